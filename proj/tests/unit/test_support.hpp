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

#ifndef MOEFORGE_TESTS_TEST_SUPPORT_HPP_
#define MOEFORGE_TESTS_TEST_SUPPORT_HPP_

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include "moeforge/ffn.hpp"
#include "moeforge/moe.hpp"
#include "moeforge/numkernel.hpp"
#include "moeforge/rng.hpp"

namespace moeforge::testing {

inline Vector<double> random_vector(Rng& rng, std::size_t n, double sd = 1.0) {
  Vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, sd);
  return v;
}

inline Matrix<double> random_matrix(Rng& rng, std::size_t rows, std::size_t cols,
                                    double sd = 1.0) {
  Matrix<double> m(rows, cols);
  for (double& x : m.span()) x = rng.normal(0.0, sd);
  return m;
}

inline Vector<double> row_of(const Matrix<double>& m, std::size_t r) {
  return Vector<double>(std::vector<double>(m.row(r).begin(), m.row(r).end()));
}

/// Textbook two-layer perceptron, written independently of the library.
inline std::vector<double> reference_ffn(const FfnParams<double>& p,
                                         const std::vector<double>& x) {
  const std::size_t d = p.w1.cols();
  const std::size_t h = p.w1.rows();
  std::vector<double> hidden(h);
  for (std::size_t i = 0; i < h; ++i) {
    double s = p.b1[i];
    for (std::size_t c = 0; c < d; ++c) s += p.w1(i, c) * x[c];
    if (p.activation == Activation::kReLU) {
      hidden[i] = s > 0 ? s : 0.0;
    } else {
      hidden[i] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
    }
  }
  std::vector<double> y(d);
  for (std::size_t r = 0; r < d; ++r) {
    double s = p.b2[r];
    for (std::size_t i = 0; i < h; ++i) s += p.w2(r, i) * hidden[i];
    y[r] = s;
  }
  return y;
}

/// Router rows perturbed away from the replica-tied init so that routing
/// mixes replicas.
inline MoeLayer<double> random_layer(Rng& rng, const MoeConfig& cfg,
                                     double router_sd = 0.5) {
  const auto base =
      FfnParams<double>::random(cfg.token_dim, cfg.hidden_dim, rng, cfg.activation);
  MoeLayer<double> layer = expand_supernet(base, cfg);
  for (auto& e : layer.experts) {
    for (double& v : e.w1.span()) v += rng.normal(0.0, 0.1);
    for (double& v : e.w2.span()) v += rng.normal(0.0, 0.1);
  }
  for (double& v : layer.router.w.span()) v += rng.normal(0.0, router_sd);
  for (double& v : layer.router.b.span()) v += rng.normal(0.0, router_sd);
  return layer;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("moeforge_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& child = {}) const {
    return child.empty() ? path_.string() : (path_ / child).string();
  }

 private:
  static std::size_t& counter() {
    static std::size_t n = 0;
    return n;
  }
  std::filesystem::path path_;
};

}  // namespace moeforge::testing

#endif  // MOEFORGE_TESTS_TEST_SUPPORT_HPP_
