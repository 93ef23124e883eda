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

#include "moeforge/serialize.hpp"

#include <bit>
#include <istream>
#include <ostream>
#include <sstream>

#include "moeforge/error.hpp"

namespace moeforge {

using nlohmann::json;

void BinaryWriter::magic(const char (&tag)[5]) { out_.write(tag, 4); }

void BinaryWriter::u32(std::uint32_t v) {
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out_.write(reinterpret_cast<const char*>(buf), 4);
}

void BinaryWriter::u64(std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out_.write(reinterpret_cast<const char*>(buf), 8);
}

void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::reals(std::span<const double> values) {
  for (double v : values) f64(v);
}

void BinaryReader::read(unsigned char* buf, std::size_t n) {
  in_.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw FormatError("unexpected end of binary payload");
  }
}

void BinaryReader::expect_magic(const char (&tag)[5]) {
  unsigned char buf[4];
  read(buf, 4);
  for (int i = 0; i < 4; ++i) {
    if (buf[i] != static_cast<unsigned char>(tag[i])) {
      throw FormatError(std::string("bad magic, expected '") + tag + "'");
    }
  }
}

std::uint32_t BinaryReader::u32() {
  unsigned char buf[4];
  read(buf, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
  return v;
}

std::uint64_t BinaryReader::u64() {
  unsigned char buf[8];
  read(buf, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

void BinaryReader::reals(std::span<double> values) {
  for (double& v : values) v = f64();
}

std::size_t BinaryReader::dim(const char* what, std::uint64_t limit) {
  const std::uint64_t v = u64();
  if (v > limit) {
    throw FormatError(std::string(what) + " = " + std::to_string(v) +
                      " exceeds limit " + std::to_string(limit));
  }
  return static_cast<std::size_t>(v);
}

namespace {

std::uint32_t activation_code(Activation a) {
  return a == Activation::kReLU ? 0u : 1u;
}

Activation activation_from_code(std::uint32_t code) {
  if (code == 0) return Activation::kReLU;
  if (code == 1) return Activation::kGELU;
  throw FormatError("unknown activation code " + std::to_string(code));
}

void check_version(std::uint32_t got, std::uint32_t want, const char* what) {
  if (got != want) {
    throw FormatError(std::string(what) + " version " + std::to_string(got) +
                      " is not supported (expected " + std::to_string(want) +
                      ")");
  }
}

}  // namespace

void write_ffn(BinaryWriter& w, const FfnParams<double>& p) {
  p.validate();
  w.magic("MFFN");
  w.u32(kFfnFormatVersion);
  w.u32(activation_code(p.activation));
  w.u64(p.token_dim());
  w.u64(p.hidden_dim());
  w.reals(p.w1.span());
  w.reals(p.b1.span());
  w.reals(p.w2.span());
  w.reals(p.b2.span());
}

FfnParams<double> read_ffn(BinaryReader& r) {
  r.expect_magic("MFFN");
  check_version(r.u32(), kFfnFormatVersion, "FFN record");
  const Activation act = activation_from_code(r.u32());
  const std::size_t d = r.dim("token_dim");
  const std::size_t h = r.dim("hidden_dim");
  auto p = FfnParams<double>::zeros(d, h, act);
  r.reals(p.w1.span());
  r.reals(p.b1.span());
  r.reals(p.w2.span());
  r.reals(p.b2.span());
  p.validate();
  return p;
}

void write_ffn(std::ostream& out, const FfnParams<double>& p) {
  BinaryWriter w(out);
  write_ffn(w, p);
}

FfnParams<double> read_ffn(std::istream& in) {
  BinaryReader r(in);
  return read_ffn(r);
}

void write_moe(BinaryWriter& w, const MoeLayer<double>& layer) {
  layer.validate();
  const MoeConfig& c = layer.config;
  w.magic("MMOE");
  w.u32(kMoeFormatVersion);
  w.u64(c.n_replicas);
  w.u64(c.granularity);
  w.u64(c.token_dim);
  w.u64(c.hidden_dim);
  w.u64(c.top_k);
  w.u64(c.seed);
  w.u32(activation_code(c.activation));
  for (const auto& e : layer.experts) write_ffn(w, e);
  w.u64(layer.router.w.rows());
  w.u64(layer.router.w.cols());
  w.reals(layer.router.w.span());
  w.reals(layer.router.b.span());
}

MoeLayer<double> read_moe(BinaryReader& r) {
  r.expect_magic("MMOE");
  check_version(r.u32(), kMoeFormatVersion, "MoE checkpoint");
  MoeLayer<double> layer;
  MoeConfig& c = layer.config;
  c.n_replicas = r.dim("n_replicas");
  c.granularity = r.dim("granularity");
  c.token_dim = r.dim("token_dim");
  c.hidden_dim = r.dim("hidden_dim");
  c.top_k = r.dim("top_k");
  c.seed = r.u64();
  c.activation = activation_from_code(r.u32());
  try {
    c.validate();
  } catch (const DomainError& e) {
    throw FormatError(std::string("MoE checkpoint: ") + e.what());
  }
  for (std::size_t i = 0; i < c.n_experts(); ++i) {
    layer.experts.push_back(read_ffn(r));
  }
  const std::size_t rows = r.dim("router rows");
  const std::size_t cols = r.dim("router cols");
  layer.router.w = Matrix<double>(rows, cols);
  layer.router.b = Vector<double>(rows);
  r.reals(layer.router.w.span());
  r.reals(layer.router.b.span());
  try {
    layer.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("MoE checkpoint: ") + e.what());
  }
  return layer;
}

void write_moe(std::ostream& out, const MoeLayer<double>& layer) {
  BinaryWriter w(out);
  write_moe(w, layer);
}

MoeLayer<double> read_moe(std::istream& in) {
  BinaryReader r(in);
  return read_moe(r);
}

namespace {

json matrix_to_json(const Matrix<double>& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  }
  return rows;
}

Matrix<double> matrix_from_json(const json& j, std::size_t rows,
                                std::size_t cols, const char* key) {
  if (!j.is_array() || j.size() != rows) {
    throw FormatError(std::string("ffn json: '") + key + "' must have " +
                      std::to_string(rows) + " rows");
  }
  Matrix<double> m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = j[r].get<std::vector<double>>();
    if (row.size() != cols) {
      throw FormatError(std::string("ffn json: '") + key + "' row " +
                        std::to_string(r) + " must have " +
                        std::to_string(cols) + " entries");
    }
    std::copy(row.begin(), row.end(), m.row(r).begin());
  }
  return m;
}

Vector<double> vector_from_json(const json& j, std::size_t len,
                                const char* key) {
  auto v = j.get<std::vector<double>>();
  if (v.size() != len) {
    throw FormatError(std::string("ffn json: '") + key + "' must have " +
                      std::to_string(len) + " entries");
  }
  return Vector<double>(std::move(v));
}

}  // namespace

json ffn_to_json(const FfnParams<double>& p) {
  p.validate();
  return json{{"format", "moeforge.ffn"},
              {"version", kFfnFormatVersion},
              {"activation", to_string(p.activation)},
              {"token_dim", p.token_dim()},
              {"hidden_dim", p.hidden_dim()},
              {"w1", matrix_to_json(p.w1)},
              {"b1", p.b1.values()},
              {"w2", matrix_to_json(p.w2)},
              {"b2", p.b2.values()}};
}

FfnParams<double> ffn_from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != "moeforge.ffn") {
      throw FormatError("ffn json: wrong 'format' tag");
    }
    check_version(j.at("version").get<std::uint32_t>(), kFfnFormatVersion,
                  "ffn json");
    const auto d = j.at("token_dim").get<std::size_t>();
    const auto h = j.at("hidden_dim").get<std::size_t>();
    FfnParams<double> p{matrix_from_json(j.at("w1"), h, d, "w1"),
                        vector_from_json(j.at("b1"), h, "b1"),
                        matrix_from_json(j.at("w2"), d, h, "w2"),
                        vector_from_json(j.at("b2"), d, "b2"),
                        parse_activation(j.at("activation").get<std::string>())};
    p.validate();
    return p;
  } catch (const json::exception& e) {
    throw FormatError(std::string("ffn json: ") + e.what());
  } catch (const DomainError& e) {
    throw FormatError(std::string("ffn json: ") + e.what());
  }
}

void write_trace_jsonl(std::ostream& out, const RoutingTrace& trace) {
  for (std::size_t t = 0; t < trace.size(); ++t) {
    const nlohmann::ordered_json rec{{"token_id", t},
                   {"selected", trace.gates[t].selected},
                   {"scores", trace.gates[t].scores}};
    out << rec.dump() << '\n';
  }
}

RoutingTrace read_trace_jsonl(std::istream& in) {
  RoutingTrace trace;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      const auto id = rec.at("token_id").get<std::size_t>();
      if (id != trace.size()) {
        throw FormatError("token_id " + std::to_string(id) + " out of order");
      }
      Gate g{rec.at("selected").get<std::vector<std::size_t>>(),
             rec.at("scores").get<std::vector<double>>()};
      if (trace.empty()) {
        trace.n_experts = g.scores.size();
        trace.top_k = g.selected.size();
      }
      trace.gates.push_back(std::move(g));
    } catch (const json::exception& e) {
      throw FormatError("trace line " + std::to_string(line_no) + ": " +
                        e.what());
    } catch (const FormatError& e) {
      throw FormatError("trace line " + std::to_string(line_no) + ": " +
                        e.what());
    }
  }
  if (!trace.empty()) {
    try {
      trace.validate();
    } catch (const DomainError& e) {
      throw FormatError(e.what());
    }
  }
  return trace;
}

}  // namespace moeforge
