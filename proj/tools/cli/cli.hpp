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

#ifndef MOEFORGE_TOOLS_CLI_CLI_HPP_
#define MOEFORGE_TOOLS_CLI_CLI_HPP_

#include <iosfwd>
#include <string>
#include <vector>

#include "cli/gradcheck.hpp"

namespace moeforge::cli {

// Process exit codes. These are part of the tool's interface.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;
inline constexpr int kExitIdentity = 4;
inline constexpr int kExitGradcheck = 5;

/// Parses `args` (without the program name) and runs one subcommand.
int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err);

/// The gradcheck subcommand with a replaceable backward pass.
int cmd_gradcheck(const GradcheckOptions& opts, std::ostream& out,
                  std::ostream& err,
                  const BackwardFn& backward = default_backward());

}  // namespace moeforge::cli

#endif  // MOEFORGE_TOOLS_CLI_CLI_HPP_
