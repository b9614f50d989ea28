// Copyright 2026 The TaCA Lab Authors.
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

#include <exception>
#include <ostream>
#include <string>
#include <vector>

namespace taca::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;  // a verify suite failed, or an unexpected error
inline constexpr int kExitUsage = 2;
inline constexpr int kExitOrdering = 3;
inline constexpr int kExitFormat = 4;

// Maps an exception from the core library onto the exit-code contract.
int exit_code_for(const std::exception& e);

// Runs one command. `args` excludes the program name, e.g.
// {"gen-data", "--out", "d.tacd"}. Commands:
//
//   gen-data    --out F [--n N] [--seed S] [--config C]
//   pretrain    --role old|new --data F --out F [--config C] [--log CSV]
//   train-taca  --old F --new F --data F --out F [--config C] [--log CSV]
//   eval-compat --old F --new F --taca F (each repeatable, one per run)
//               --data F (once, or once per run) --out F [--task T] [--k K]
//               [--new-cold] [--force] [--config C]
//   verify      [--suite gradcheck|params|losses|zero-init|all] [--points N]
//
// Exit codes: 0 success or ordering holds, 1 verify failure, 2 usage or
// config error, 3 ordering failed, 4 I/O or format error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace taca::cli
