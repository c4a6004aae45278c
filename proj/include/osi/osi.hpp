// Copyright 2026 The osieval Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "osi/calibration.hpp"
#include "osi/common.hpp"
#include "osi/embedding_store.hpp"
#include "osi/manifest.hpp"
#include "osi/metrics.hpp"
#include "osi/parallel.hpp"
#include "osi/rng.hpp"
#include "osi/scoring.hpp"
#include "osi/synth.hpp"
#include "osi/transforms.hpp"
#include "osi/watchlist.hpp"
