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

#include <cstddef>
#include <string>
#include <vector>

// Self-checking oracle suites shared by the CLI, tests and acceptance run.
namespace taca {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  // The measured quantity, e.g. the worst relative gradient error.
  double value = 0.0;
};

inline constexpr double kGradCheckTolerance = 1e-6;
inline constexpr double kGradCheckStep = 1e-5;

// Every differentiable primitive, the attachment modules and every loss,
// each at `points` seeded random points.
std::vector<CheckResult> verify_gradcheck(std::size_t points = 20);
// Trainable counts of random attachments against the closed-form formula and
// an enumeration of the attachment's tensors.
std::vector<CheckResult> verify_params(std::size_t configs = 50);
// Closed-form loss values.
std::vector<CheckResult> verify_losses();
// Freshly attached adapters and LoRA leave every block output bitwise equal.
std::vector<CheckResult> verify_zero_init();

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace taca
