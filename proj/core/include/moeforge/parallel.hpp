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

#ifndef MOEFORGE_PARALLEL_HPP_
#define MOEFORGE_PARALLEL_HPP_

#include <cstddef>
#include <functional>

namespace moeforge {

/// Worker count used by batched kernels. Resolution order: the last value
/// passed to set_num_threads, then the MOEFORGE_THREADS environment variable,
/// then std::thread::hardware_concurrency().
std::size_t num_threads();
void set_num_threads(std::size_t n);

/// Runs fn(i) for every i in [0, n) on up to `threads` workers. Items are
/// claimed dynamically, so fn must only write state owned by item i.
/// Exceptions from fn are rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t threads = num_threads());

}  // namespace moeforge

#endif  // MOEFORGE_PARALLEL_HPP_
