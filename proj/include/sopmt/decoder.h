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

// Causal transformer decoder with two attachable low-rank adapter groups.
// The input is a row concatenation of optional prefix blocks (prompt
// embedding, projected speech encoding) followed by the bos-prefixed text
// embedding; only the text rows produce logits.

#pragma once

#include <optional>
#include <vector>

#include "sopmt/nn.h"
#include "sopmt/vocab.h"

namespace sopmt {

struct DecoderConfig {
  int model_dim = 64;
  int num_layers = 4;
  int num_heads = 4;
  int ffn_dim = 128;
  int lora_rank = 8;
  Real lora_alpha = 16.0;
};

struct GenerateResult {
  TokenSeq tokens;  // without bos/eos
  bool truncated = false;  // max_len reached before eos
  bool operator==(const GenerateResult&) const = default;
};

class Decoder {
 public:
  Decoder(ParamStore* store, const Vocabulary& vocab,
          const DecoderConfig& config, Rng* rng);

  Var EmbedText(Graph* g, const TokenSeq& tokens) const;
  Matrix EmbedTextValue(const TokenSeq& tokens) const;
  Parameter* embedding() const { return embedding_; }

  // Logits (rows of e_t) x vocab for input [prefix...; e_t].
  Var Forward(Graph* g, const std::vector<Var>& prefix, const Var& e_t,
              const AdapterSet& active) const;

  // Mean cross-entropy of logits against label followed by eos.
  Var CeLoss(const Var& logits, const TokenSeq& label) const;

  void AttachLora(ParamStore* store, ParamGroup group, Rng* rng);
  void MergeLora(ParamGroup group);
  bool HasLora(ParamGroup group) const;
  bool LoraMerged(ParamGroup group) const;
  // Restores the merge flag of a loaded adapter group without touching W.
  void MarkMerged(ParamGroup group, bool merged);

  // Greedy decoding from bos with cached keys and values.
  GenerateResult Generate(const std::vector<const Matrix*>& prefix,
                          const AdapterSet& active, int max_len) const;

  const DecoderConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }

 private:
  void CheckWidth(const Matrix& m, const char* what) const;
  const LoraAdapter* FirstAdapter(ParamGroup group) const;

  Vocabulary vocab_;
  DecoderConfig config_;
  Parameter* embedding_ = nullptr;  // vocab x D_m
  std::vector<TransformerBlock> blocks_;
  LayerNormLayer ln_out_;
  Linear output_;
};

}  // namespace sopmt
