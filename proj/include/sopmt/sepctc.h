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

// Separator and serialized CTC branch. The separator turns the second
// downsampling output into one stream per talker (first speaker first); each
// stream has its own CTC head over blank plus content tokens. Greedy branch
// decodes are joined into the serialized output prompt.

#pragma once

#include <string>
#include <vector>

#include "sopmt/ctc.h"
#include "sopmt/mixsim.h"
#include "sopmt/nn.h"
#include "sopmt/vocab.h"

namespace sopmt {

struct SeparatorConfig {
  int input_dim = 64;  // D_c
  int lstm_hidden = 32;  // per direction
  int output_dim = 64;
  int num_talkers = 2;
};

class Separator {
 public:
  Separator(ParamStore* store, const SeparatorConfig& config,
            const Vocabulary& vocab, Rng* rng);

  // ReLU(Linear_s(LayerNorm(BiLSTM(h2)))) for s = 1..S.
  std::vector<Var> Separate(Graph* g, const Var& h2, int num_talkers) const;
  std::vector<Var> Logits(Graph* g, const std::vector<Var>& streams) const;
  // Per-branch CTC logits without gradient tracking.
  std::vector<Matrix> RunLogits(const Matrix& h2) const;

  const SeparatorConfig& config() const { return config_; }

 private:
  SeparatorConfig config_;
  BiLstm lstm_;
  LayerNormLayer norm_;
  std::vector<Linear> heads_;
  std::vector<Linear> ctc_;
};

struct SerializedCtc {
  Var loss;  // sum over feasible branches; invalid if none is feasible
  int num_infeasible = 0;
};

// Sum of per-branch CTC losses; infeasible branches are left out and counted.
SerializedCtc SerializedCtcLoss(const std::vector<Var>& branch_logits,
                                const std::vector<TokenSeq>& targets);
Real SerializedCtcLossValue(const std::vector<Matrix>& branch_logits,
                            const std::vector<TokenSeq>& targets);

struct SopPrompt {
  std::vector<TokenSeq> branch_sequences;
  TokenSeq concatenated;
  std::vector<std::vector<TokenId>> frame_labels;
};

// Joins branch outputs in branch order, with sc between branches when
// `delimit` is set.
SopPrompt BuildSop(const std::vector<TokenSeq>& branch_sequences,
                   const Vocabulary& vocab, bool delimit = true);
// Greedy-decodes every branch and builds the prompt.
SopPrompt DecodeSop(const std::vector<Matrix>& branch_logits,
                    const Vocabulary& vocab, bool delimit = true);

// Rows of the shared decoder token-embedding table.
Matrix EmbedSop(const SopPrompt& prompt, const Parameter& embedding_table);

// Reference token per branch and downsampled frame, or blank where the
// branch's talker is silent. Branch s follows the s-th speaking talker.
std::vector<std::vector<TokenId>> ReferenceFrameLabels(
    const MixtureSample& sample, int num_frames, int frame_rate);

// Text grid with one column per frame that is non-blank in at least one
// branch. Cells hold the emitted symbol, '.' for blank; with a reference,
// a "ref" row follows each branch and mismatching cells get a '*'.
std::string DumpAlignment(
    const std::vector<std::vector<TokenId>>& frame_labels,
    const Vocabulary& vocab,
    const std::vector<std::vector<TokenId>>* reference = nullptr);

}  // namespace sopmt
