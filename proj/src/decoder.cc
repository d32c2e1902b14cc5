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

#include "sopmt/decoder.h"

#include <cmath>
#include <limits>
#include <string>

namespace sopmt {

Decoder::Decoder(ParamStore* store, const Vocabulary& vocab,
                 const DecoderConfig& config, Rng* rng)
    : vocab_(vocab), config_(config) {
  embedding_ = store->Create("decoder.embedding", ParamGroup::kDecoderBase,
                             RandomNormal(vocab.size(), config.model_dim, 1.0,
                                          rng));
  AttentionOptions opts;
  opts.num_heads = config.num_heads;
  opts.causal = true;
  for (int i = 0; i < config.num_layers; ++i) {
    blocks_.emplace_back(store, "decoder.layer" + std::to_string(i),
                         ParamGroup::kDecoderBase, config.model_dim,
                         config.ffn_dim, opts, rng);
  }
  ln_out_ = LayerNormLayer(store, "decoder.ln_out", ParamGroup::kDecoderBase,
                           config.model_dim);
  output_ = Linear(store, "decoder.output", ParamGroup::kDecoderBase,
                   config.model_dim, vocab.size(), true, rng);
}

void Decoder::CheckWidth(const Matrix& m, const char* what) const {
  if (m.cols() != config_.model_dim) {
    throw ShapeError(std::string("decoder: ") + what + " has width " +
                     std::to_string(m.cols()) + ", expected " +
                     std::to_string(config_.model_dim));
  }
}

Var Decoder::EmbedText(Graph* g, const TokenSeq& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (!vocab_.Contains(t)) {
      throw DataError("token " + std::to_string(t) +
                      " outside the decoder vocabulary");
    }
    ids.push_back(t);
  }
  return ag::GatherRows(g->Param(embedding_), ids);
}

Matrix Decoder::EmbedTextValue(const TokenSeq& tokens) const {
  Graph g(false);
  return EmbedText(&g, tokens).value();
}

Var Decoder::Forward(Graph* g, const std::vector<Var>& prefix, const Var& e_t,
                     const AdapterSet& active) const {
  std::vector<Var> parts;
  for (const Var& p : prefix) {
    CheckWidth(p.value(), "prefix block");
    if (p.rows() > 0) parts.push_back(p);
  }
  CheckWidth(e_t.value(), "text embedding");
  if (e_t.rows() < 1) throw ShapeError("decoder: empty text input");
  const Eigen::Index prefix_rows = [&parts] {
    Eigen::Index n = 0;
    for (const Var& p : parts) n += p.rows();
    return n;
  }();
  parts.push_back(e_t);
  Var x = parts.size() == 1 ? e_t : ag::ConcatRows(parts);
  for (const auto& block : blocks_) x = block.Forward(g, x, active);
  Var text = ag::SliceRows(x, prefix_rows, e_t.rows());
  return output_.Forward(g, ln_out_.Forward(g, text));
}

Var Decoder::CeLoss(const Var& logits, const TokenSeq& label) const {
  if (logits.rows() != static_cast<Eigen::Index>(label.size()) + 1) {
    throw ShapeError("ce_loss: " + std::to_string(logits.rows()) +
                     " logit rows for a label of length " +
                     std::to_string(label.size()) + " plus eos");
  }
  std::vector<int> targets(label.begin(), label.end());
  targets.push_back(vocab_.eos());
  return ag::CrossEntropy(logits, targets);
}

void Decoder::AttachLora(ParamStore* store, ParamGroup group, Rng* rng) {
  if (group != ParamGroup::kLoraA && group != ParamGroup::kLoraB) {
    throw ConfigError("adapter group must be lora_A or lora_B");
  }
  for (auto& block : blocks_) {
    for (Linear* lin : block.AttentionProjections()) {
      lin->AttachAdapter(store, group, config_.lora_rank, config_.lora_alpha,
                         rng);
    }
  }
}

void Decoder::MergeLora(ParamGroup group) {
  for (auto& block : blocks_) {
    for (Linear* lin : block.AttentionProjections()) lin->MergeAdapter(group);
  }
}

const LoraAdapter* Decoder::FirstAdapter(ParamGroup group) const {
  if (blocks_.empty()) return nullptr;
  for (const LoraAdapter& a : blocks_[0].q().adapters()) {
    if (a.group == group) return &a;
  }
  return nullptr;
}

bool Decoder::HasLora(ParamGroup group) const {
  return FirstAdapter(group) != nullptr;
}

bool Decoder::LoraMerged(ParamGroup group) const {
  const LoraAdapter* a = FirstAdapter(group);
  return a != nullptr && a->merged;
}

void Decoder::MarkMerged(ParamGroup group, bool merged) {
  for (auto& block : blocks_) {
    for (Linear* lin : block.AttentionProjections()) {
      if (LoraAdapter* a = lin->FindAdapter(group)) a->merged = merged;
    }
  }
}

namespace {

struct LayerCache {
  Matrix k;  // positions x D, rotated
  Matrix v;
};

// Runs `x` (new rows at positions [cache size, ...)) through one block,
// appending its keys and values to the cache.
Matrix BlockStep(const TransformerBlock& block, const Matrix& x,
                 LayerCache* cache, const AdapterSet& active) {
  const int heads = block.options().num_heads;
  const Eigen::Index start = cache->k.rows();
  const Eigen::Index n = x.rows();
  const Eigen::Index dim = x.cols();
  Matrix h = block.ln_attn().Apply(x);
  Matrix q = block.q().Apply(h, active);
  Matrix k = block.k().Apply(h, active);
  Matrix v = block.v().Apply(h, active);
  ApplyRopeInPlace(&q, heads, static_cast<int>(start), 10000, false);
  ApplyRopeInPlace(&k, heads, static_cast<int>(start), 10000, false);
  cache->k.conservativeResize(start + n, dim);
  cache->v.conservativeResize(start + n, dim);
  cache->k.bottomRows(n) = k;
  cache->v.bottomRows(n) = v;

  const Eigen::Index hd = dim / heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(hd));
  Matrix attn(n, dim);
  for (int hh = 0; hh < heads; ++hh) {
    Matrix scores = (q.middleCols(hh * hd, hd) *
                     cache->k.middleCols(hh * hd, hd).transpose()) * scale;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = start + i + 1; j < scores.cols(); ++j) {
        scores(i, j) = -std::numeric_limits<Real>::infinity();
      }
    }
    attn.middleCols(hh * hd, hd) =
        RowSoftmax(scores) * cache->v.middleCols(hh * hd, hd);
  }
  Matrix x1 = x + block.o().Apply(attn, active);
  Matrix f = block.ffn_in().Apply(block.ln_ffn().Apply(x1));
  f = f.unaryExpr([](Real z) { return GeluScalar(z); });
  return x1 + block.ffn_out().Apply(f);
}

}  // namespace

GenerateResult Decoder::Generate(const std::vector<const Matrix*>& prefix,
                                 const AdapterSet& active, int max_len) const {
  if (max_len < 1) throw ConfigError("generate: max_len must be >= 1");
  std::vector<LayerCache> caches(blocks_.size());
  for (auto& c : caches) {
    c.k.resize(0, config_.model_dim);
    c.v.resize(0, config_.model_dim);
  }
  Eigen::Index prefix_rows = 0;
  for (const Matrix* p : prefix) {
    CheckWidth(*p, "prefix block");
    prefix_rows += p->rows();
  }
  Matrix x(prefix_rows + 1, config_.model_dim);
  Eigen::Index row = 0;
  for (const Matrix* p : prefix) {
    x.middleRows(row, p->rows()) = *p;
    row += p->rows();
  }
  x.row(row) = embedding_->value.row(vocab_.bos());

  GenerateResult result;
  for (int step = 0;; ++step) {
    for (size_t l = 0; l < blocks_.size(); ++l) {
      x = BlockStep(blocks_[l], x, &caches[l], active);
    }
    Matrix logits = output_.Apply(ln_out_.Apply(x.bottomRows(1)));
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < logits.cols(); ++k) {
      if (logits(0, k) > logits(0, best)) best = k;
    }
    const TokenId tok = static_cast<TokenId>(best);
    if (tok == vocab_.eos()) break;
    if (step == max_len) {
      result.truncated = true;
      break;
    }
    result.tokens.push_back(tok);
    x = embedding_->value.row(tok);
  }
  return result;
}

}  // namespace sopmt
