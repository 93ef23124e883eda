// Copyright 2026 The moeforge Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MOEFORGE_TOOLS_CLI_MANIFEST_HPP_
#define MOEFORGE_TOOLS_CLI_MANIFEST_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

namespace moeforge::cli {

/// SHA-1 of "blob <size>\0<bytes>", the id git assigns to a file's content.
std::string git_blob_hash(const std::string& bytes);
/// Throws ConfigError when the file cannot be read.
std::string git_blob_hash_file(const std::filesystem::path& path);

/// Written once per run directory as manifest.json.
struct RunManifest {
  std::string command;
  std::string config_path;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> input_hashes;  // path -> blob hash
  std::string output_dir;
  std::string started_at;
  std::string finished_at;
  nlohmann::json resolved;  // config and flags with defaults spelled out

  /// Combined hash over the sorted (path, hash) pairs.
  std::string content_hash() const;
  nlohmann::json to_json() const;
  void write(const std::filesystem::path& dir) const;
};

/// UTC, ISO-8601 to the second.
std::string utc_timestamp();

}  // namespace moeforge::cli

#endif  // MOEFORGE_TOOLS_CLI_MANIFEST_HPP_
