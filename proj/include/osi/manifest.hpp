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

#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "osi/common.hpp"

namespace osi {

/// Writes <output>.manifest.json beside an output file, recording the tool
/// version, the effective configuration, and a digest of every input file.
/// Digests let downstream stages detect stale intermediates. The thread
/// count is deliberately absent from configs: outputs must not depend on it.
inline void write_manifest(const std::string& output_path, const std::string& subcommand,
                           const nlohmann::ordered_json& config,
                           const std::vector<std::string>& input_paths) {
  nlohmann::ordered_json j;
  j["tool"] = "osieval";
  j["version"] = std::string(kVersion);
  j["subcommand"] = subcommand;
  j["config"] = config;
  j["inputs"] = nlohmann::ordered_json::array();
  for (const std::string& path : input_paths) {
    nlohmann::ordered_json entry;
    entry["path"] = path;
    entry["fnv1a64"] = hex64(file_digest(path));
    j["inputs"].push_back(std::move(entry));
  }
  const std::string manifest_path = output_path + ".manifest.json";
  std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write file: " + manifest_path);
  out << j.dump(2) << "\n";
  if (!out) throw ContractError("write failed: " + manifest_path);
}

}  // namespace osi
