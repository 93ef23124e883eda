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

// On-disk formats. All integers and reals are little-endian; reals are IEEE-754
// binary64 and matrices are row-major.
//
// FFN record (version 1)
//   char[4]  "MFFN"
//   u32      version
//   u32      activation          0 = relu, 1 = gelu
//   u64      token_dim D
//   u64      hidden_dim H
//   f64[H*D] W1,  f64[H] b1,  f64[D*H] W2,  f64[D] b2
//
// MoE layer checkpoint (version 1)
//   char[4]  "MMOE"
//   u32      version
//   u64      n_replicas, granularity, token_dim, hidden_dim, top_k, seed
//   u32      activation
//   kN x FFN record               expert order (replica-major)
//   u64      router rows (kN), u64 router cols (D)
//   f64[kN*D] W_r,  f64[kN] b_r
//
// Routing traces are JSON lines, one object per token:
//   {"token_id":t,"selected":[...],"scores":[...]}

#ifndef MOEFORGE_SERIALIZE_HPP_
#define MOEFORGE_SERIALIZE_HPP_

#include <cstdint>
#include <iosfwd>
#include <string>

#include <nlohmann/json.hpp>

#include "moeforge/ffn.hpp"
#include "moeforge/moe.hpp"

namespace moeforge {

inline constexpr std::uint32_t kFfnFormatVersion = 1;
inline constexpr std::uint32_t kMoeFormatVersion = 1;

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  void magic(const char (&tag)[5]);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void reals(std::span<const double> values);

 private:
  std::ostream& out_;
};

/// Throws FormatError on truncation or a wrong tag.
class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}

  void expect_magic(const char (&tag)[5]);
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  void reals(std::span<double> values);
  /// Reads a u64 that must not exceed `limit`, naming `what` on failure.
  std::size_t dim(const char* what, std::uint64_t limit = 1u << 24);

 private:
  void read(unsigned char* buf, std::size_t n);
  std::istream& in_;
};

void write_ffn(BinaryWriter& w, const FfnParams<double>& p);
FfnParams<double> read_ffn(BinaryReader& r);
void write_ffn(std::ostream& out, const FfnParams<double>& p);
FfnParams<double> read_ffn(std::istream& in);

void write_moe(BinaryWriter& w, const MoeLayer<double>& layer);
MoeLayer<double> read_moe(BinaryReader& r);
void write_moe(std::ostream& out, const MoeLayer<double>& layer);
MoeLayer<double> read_moe(std::istream& in);

/// JSON debug form: {"format":"moeforge.ffn","version":1,"activation":...,
/// "token_dim":D,"hidden_dim":H,"w1":[[..]..],"b1":[..],"w2":[[..]..],"b2":[..]}
nlohmann::json ffn_to_json(const FfnParams<double>& p);
FfnParams<double> ffn_from_json(const nlohmann::json& j);

void write_trace_jsonl(std::ostream& out, const RoutingTrace& trace);
/// Reconstructs n_experts from the score length and top_k from the selection
/// size of the first record. Throws FormatError on malformed lines.
RoutingTrace read_trace_jsonl(std::istream& in);

}  // namespace moeforge

#endif  // MOEFORGE_SERIALIZE_HPP_
