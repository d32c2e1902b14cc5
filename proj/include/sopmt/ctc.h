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

#include <vector>

#include "sopmt/autograd.h"
#include "sopmt/common.h"

namespace sopmt {

constexpr TokenId kCtcBlank = 0;

// Number of frames the shortest valid alignment of `target` needs: one per
// label plus one separating blank per adjacent repeat.
int CtcMinFrames(const TokenSeq& target);
bool CtcFeasible(const TokenSeq& target, int num_frames);

struct CtcResult {
  Real loss = 0.0;  // +inf when infeasible
  bool feasible = true;
  Matrix grad;      // d loss / d logits; empty unless requested and feasible
};

// Negative log-likelihood of `target` under the CTC model with frame logits
// (T x V, blank at column 0), summed over all alignments with the log-space
// forward recursion. The gradient uses the forward-backward occupancies.
CtcResult CtcLoss(const Matrix& logits, const TokenSeq& target,
                  bool need_grad);

struct CtcLossVar {
  Var loss;  // 1x1; invalid when infeasible
  bool feasible = true;
};

// Graph op wrapper of CtcLoss.
CtcLossVar CtcLossOp(const Var& logits, const TokenSeq& target);

// Per-frame argmax with ties resolved towards the lowest token id.
std::vector<TokenId> FrameArgmax(const Matrix& logits);
// Merges consecutive repeats, then drops blanks.
TokenSeq CollapseFrames(const std::vector<TokenId>& frame_labels);
TokenSeq GreedyDecode(const Matrix& logits);

}  // namespace sopmt
