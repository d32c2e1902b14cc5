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

#include "sopmt/optim.h"

#include <algorithm>
#include <cmath>

namespace sopmt {

Adam::Adam(const AdamConfig& config, int total_steps)
    : config_(config), total_steps_(total_steps) {}

Real Adam::LearningRate(int step) const {
  const int warmup = static_cast<int>(
      std::ceil(config_.warmup_fraction * total_steps_));
  if (warmup > 0 && step < warmup) {
    return config_.lr * static_cast<Real>(step + 1) / warmup;
  }
  return config_.lr;
}

Real Adam::Step(const std::vector<Parameter*>& params) {
  Real sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.squaredNorm();
  const Real norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return norm;
  const Real clip = config_.grad_clip > 0 && norm > config_.grad_clip
                        ? config_.grad_clip / norm
                        : 1.0;
  const Real lr = LearningRate(step_);
  ++step_;
  const Real bc1 = 1.0 - std::pow(config_.beta1, step_);
  const Real bc2 = 1.0 - std::pow(config_.beta2, step_);
  for (Parameter* p : params) {
    AdamMoments& mom = moments_[p->name];
    if (mom.m.size() == 0) {
      mom.m = Matrix::Zero(p->value.rows(), p->value.cols());
      mom.v = Matrix::Zero(p->value.rows(), p->value.cols());
    }
    const Matrix g = p->grad * clip;
    mom.m = config_.beta1 * mom.m + (1.0 - config_.beta1) * g;
    mom.v = config_.beta2 * mom.v + (1.0 - config_.beta2) * g.cwiseAbs2();
    p->value.array() -= lr * (mom.m.array() / bc1) /
                        ((mom.v.array() / bc2).sqrt() + config_.eps);
  }
  return norm;
}

}  // namespace sopmt
