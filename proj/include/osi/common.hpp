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

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace osi {

inline constexpr std::string_view kVersion = "0.1.0";

/// Raised on invalid inputs or violated contracts (bad files, mismatched
/// dimensions, unattainable operating points, ...). The CLI maps this to
/// exit code 1; any other exception is an internal error (exit code 2).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// FNV-1a, used for stable string hashing (seed derivation per speaker) and
// for input-file digests in run manifests. Not cryptographic.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(s.data(), s.size());
}

inline std::uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open file for digest: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  return h;
}

/// Formats a double with 17 significant digits, enough to round-trip the
/// exact bit pattern through text. All score/rate outputs go through this so
/// files compare byte-identical across runs and thread counts.
inline std::string format_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace osi
