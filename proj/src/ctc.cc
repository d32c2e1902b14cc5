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

#include "sopmt/ctc.h"

#include <cmath>
#include <limits>
#include <string>

namespace sopmt {

namespace {

constexpr Real kLogZero = -std::numeric_limits<Real>::infinity();

inline Real LogAdd(Real a, Real b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  Real m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

int CtcMinFrames(const TokenSeq& target) {
  int n = static_cast<int>(target.size());
  for (size_t i = 1; i < target.size(); ++i) {
    if (target[i] == target[i - 1]) ++n;
  }
  return n;
}

bool CtcFeasible(const TokenSeq& target, int num_frames) {
  return CtcMinFrames(target) <= num_frames;
}

CtcResult CtcLoss(const Matrix& logits, const TokenSeq& target,
                  bool need_grad) {
  const int frames = static_cast<int>(logits.rows());
  const int vocab = static_cast<int>(logits.cols());
  for (TokenId t : target) {
    if (t == kCtcBlank || t < 0 || t >= vocab) {
      throw DataError("CtcLoss: target token " + std::to_string(t) +
                      " is blank or outside the " + std::to_string(vocab) +
                      "-way output");
    }
  }
  CtcResult result;
  if (frames == 0 || !CtcFeasible(target, frames)) {
    result.loss = std::numeric_limits<Real>::infinity();
    result.feasible = false;
    return result;
  }

  // Extended label sequence: blank, l1, blank, l2, ..., blank.
  const int ext = 2 * static_cast<int>(target.size()) + 1;
  std::vector<TokenId> labels(static_cast<size_t>(ext), kCtcBlank);
  for (size_t i = 0; i < target.size(); ++i) labels[2 * i + 1] = target[i];
  auto can_skip = [&labels](int s) {
    return s >= 2 && labels[s] != kCtcBlank && labels[s] != labels[s - 2];
  };

  const Matrix logp = RowLogSoftmax(logits);
  Matrix alpha = Matrix::Constant(frames, ext, kLogZero);
  alpha(0, 0) = logp(0, labels[0]);
  if (ext > 1) alpha(0, 1) = logp(0, labels[1]);
  for (int t = 1; t < frames; ++t) {
    for (int s = 0; s < ext; ++s) {
      Real a = alpha(t - 1, s);
      if (s >= 1) a = LogAdd(a, alpha(t - 1, s - 1));
      if (can_skip(s)) a = LogAdd(a, alpha(t - 1, s - 2));
      if (a != kLogZero) alpha(t, s) = a + logp(t, labels[s]);
    }
  }
  Real log_likelihood = alpha(frames - 1, ext - 1);
  if (ext > 1) log_likelihood = LogAdd(log_likelihood, alpha(frames - 1, ext - 2));
  result.loss = -log_likelihood;
  if (!need_grad) return result;

  Matrix beta = Matrix::Constant(frames, ext, kLogZero);
  beta(frames - 1, ext - 1) = logp(frames - 1, labels[ext - 1]);
  if (ext > 1) beta(frames - 1, ext - 2) = logp(frames - 1, labels[ext - 2]);
  for (int t = frames - 2; t >= 0; --t) {
    for (int s = 0; s < ext; ++s) {
      Real b = beta(t + 1, s);
      if (s + 1 < ext) b = LogAdd(b, beta(t + 1, s + 1));
      if (s + 2 < ext && can_skip(s + 2)) b = LogAdd(b, beta(t + 1, s + 2));
      if (b != kLogZero) beta(t, s) = b + logp(t, labels[s]);
    }
  }

  // d(-log p)/d logits = softmax - occupancy of each output symbol.
  Matrix grad = logp.array().exp();
  for (int t = 0; t < frames; ++t) {
    for (int s = 0; s < ext; ++s) {
      Real ab = alpha(t, s) + beta(t, s);
      if (!std::isfinite(ab)) continue;
      grad(t, labels[s]) -= std::exp(ab - logp(t, labels[s]) - log_likelihood);
    }
  }
  result.grad = std::move(grad);
  return result;
}

CtcLossVar CtcLossOp(const Var& logits, const TokenSeq& target) {
  Graph* g = logits.graph();
  CtcResult r = CtcLoss(logits.value(), target, g->requires_grad(logits));
  CtcLossVar out;
  out.feasible = r.feasible;
  if (!r.feasible) return out;
  Matrix y(1, 1);
  y(0, 0) = r.loss;
  out.loss = g->Record(
      std::move(y), {logits},
      [logits, grad = std::move(r.grad)](Graph& g, const Matrix& dy,
                                         const Matrix&) {
        g.AccumulateGrad(logits, grad * dy(0, 0));
      });
  return out;
}

std::vector<TokenId> FrameArgmax(const Matrix& logits) {
  std::vector<TokenId> out(static_cast<size_t>(logits.rows()));
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < logits.cols(); ++k) {
      if (logits(t, k) > logits(t, best)) best = k;
    }
    out[static_cast<size_t>(t)] = static_cast<TokenId>(best);
  }
  return out;
}

TokenSeq CollapseFrames(const std::vector<TokenId>& frame_labels) {
  TokenSeq out;
  TokenId prev = -1;
  for (TokenId label : frame_labels) {
    if (label != prev && label != kCtcBlank) out.push_back(label);
    prev = label;
  }
  return out;
}

TokenSeq GreedyDecode(const Matrix& logits) {
  return CollapseFrames(FrameArgmax(logits));
}

}  // namespace sopmt
