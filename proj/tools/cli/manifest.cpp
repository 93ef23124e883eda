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

#include "cli/manifest.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iterator>
#include <sstream>

#include "moeforge/error.hpp"

namespace moeforge::cli {

namespace {

std::string sha1_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha1(),
                 nullptr) != 1) {
    throw Error("SHA-1 digest failed");
  }
  std::string hex;
  hex.reserve(2 * len);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

}  // namespace

std::string git_blob_hash(const std::string& bytes) {
  std::string payload = "blob " + std::to_string(bytes.size());
  payload.push_back('\0');
  payload += bytes;
  return sha1_hex(payload);
}

std::string git_blob_hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open input file");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return git_blob_hash(bytes);
}

std::string RunManifest::content_hash() const {
  std::string joined;
  for (const auto& [path, hash] : input_hashes) {
    joined += path + '\t' + hash + '\n';
  }
  return git_blob_hash(joined);
}

nlohmann::json RunManifest::to_json() const {
  return nlohmann::json{{"command", command},
                        {"config_path", config_path},
                        {"seed", seed},
                        {"inputs", input_hashes},
                        {"content_hash", content_hash()},
                        {"output_dir", output_dir},
                        {"started_at", started_at},
                        {"finished_at", finished_at},
                        {"resolved", resolved}};
}

void RunManifest::write(const std::filesystem::path& dir) const {
  std::ofstream out(dir / "manifest.json");
  out << to_json().dump(2) << '\n';
  if (!out) throw Error("cannot write " + (dir / "manifest.json").string());
}

std::string utc_timestamp() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace moeforge::cli
