// Copyright (c) 2026 The sopmt Authors
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

#include <map>
#include <string>
#include <vector>

#include "sopmt/autograd.h"

namespace sopmt {

struct AdamConfig {
  Real lr = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real warmup_fraction = 0.05;
  Real grad_clip = 5.0;  // global L2 norm; <= 0 disables clipping
};

struct AdamMoments {
  Matrix m;
  Matrix v;
};

// Adam with linear warm-up to the base rate, then a constant rate.
class Adam {
 public:
  Adam(const AdamConfig& config, int total_steps);

  Real LearningRate(int step) const;
  // Applies one update to every trainable parameter from its grad and
  // returns the pre-clipping global gradient norm.
  Real Step(const std::vector<Parameter*>& params);

  int step() const { return step_; }
  void set_step(int step) { step_ = step; }
  std::map<std::string, AdamMoments>& moments() { return moments_; }
  const std::map<std::string, AdamMoments>& moments() const {
    return moments_;
  }

 private:
  AdamConfig config_;
  int total_steps_;
  int step_ = 0;
  std::map<std::string, AdamMoments> moments_;
};

}  // namespace sopmt
