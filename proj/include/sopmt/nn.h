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
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "sopmt/autograd.h"

namespace sopmt {

using Rng = std::mt19937_64;

Matrix RandomNormal(Eigen::Index rows, Eigen::Index cols, Real stddev,
                    Rng* rng);
Matrix RandomUniform(Eigen::Index rows, Eigen::Index cols, Real bound,
                     Rng* rng);

// Owns every parameter of a model, keyed by a unique dotted name.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter* Create(const std::string& name, ParamGroup group, Matrix init);
  Parameter* Find(const std::string& name);
  const Parameter* Find(const std::string& name) const;
  Parameter& Get(const std::string& name);

  // Creation order.
  std::vector<Parameter*> All();
  std::vector<const Parameter*> All() const;
  std::vector<Parameter*> Group(ParamGroup group);
  bool HasGroup(ParamGroup group) const;
  void RemoveGroup(ParamGroup group);
  size_t size() const { return params_.size(); }

  // Marks exactly the listed groups trainable.
  void SetTrainable(const std::set<ParamGroup>& groups);
  std::vector<Parameter*> Trainable();
  void ZeroGrad();
  // Rounds every value to float32 precision (checkpoint storage precision).
  void RoundToFloat();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*> index_;
};

// Low-rank additive adapter on a Linear weight: W + scale * up * down.
struct LoraAdapter {
  Parameter* down = nullptr;  // r x d_in
  Parameter* up = nullptr;    // d_out x r, zero at attach time
  Real scale = 1.0;
  ParamGroup group = ParamGroup::kLoraA;
  bool merged = false;
};

using AdapterSet = std::set<ParamGroup>;

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore* store, const std::string& name, ParamGroup group,
         int in_dim, int out_dim, bool bias, Rng* rng);

  Var Forward(Graph* g, const Var& x, const AdapterSet& active = {}) const;
  // Same computation without recording; used by inference paths.
  Matrix Apply(const Matrix& x, const AdapterSet& active = {}) const;

  void AttachAdapter(ParamStore* store, ParamGroup group, int rank,
                     Real alpha, Rng* rng);
  // W <- W + scale * up * down for the adapter of `group`. Throws if that
  // adapter was already merged.
  void MergeAdapter(ParamGroup group);
  LoraAdapter* FindAdapter(ParamGroup group);
  const std::vector<LoraAdapter>& adapters() const { return adapters_; }

  const std::string& name() const { return name_; }
  Parameter* weight() const { return weight_; }
  Parameter* bias() const { return bias_; }
  int in_dim() const { return static_cast<int>(weight_->value.cols()); }
  int out_dim() const { return static_cast<int>(weight_->value.rows()); }

 private:
  std::string name_;
  Parameter* weight_ = nullptr;  // out x in
  Parameter* bias_ = nullptr;    // 1 x out
  std::vector<LoraAdapter> adapters_;
};

class LayerNormLayer {
 public:
  LayerNormLayer() = default;
  LayerNormLayer(ParamStore* store, const std::string& name, ParamGroup group,
                 int dim);

  Var Forward(Graph* g, const Var& x) const;
  Matrix Apply(const Matrix& x) const;

 private:
  Parameter* gain_ = nullptr;
  Parameter* bias_ = nullptr;
};

// Single-direction LSTM; gate order i, f, g, o.
class Lstm {
 public:
  Lstm() = default;
  Lstm(ParamStore* store, const std::string& name, ParamGroup group,
       int in_dim, int hidden, Rng* rng);

  // Returns T x hidden. With `reverse`, runs from the last frame to the first
  // and returns outputs in the original frame order.
  Var Forward(Graph* g, const Var& x, bool reverse) const;
  int hidden() const { return hidden_; }

 private:
  Linear input_;      // x -> 4H, carries the bias
  Parameter* w_hh_ = nullptr;  // 4H x H
  int hidden_ = 0;
};

class BiLstm {
 public:
  BiLstm() = default;
  BiLstm(ParamStore* store, const std::string& name, ParamGroup group,
         int in_dim, int hidden, Rng* rng);
  Var Forward(Graph* g, const Var& x) const;  // T x 2H

 private:
  Lstm fwd_;
  Lstm bwd_;
};

struct AttentionOptions {
  int num_heads = 4;
  bool causal = false;
  bool rope = true;
};

// Pre-norm transformer block: x + Attn(LN(x)), then x + FFN(LN(x)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore* store, const std::string& name,
                   ParamGroup group, int dim, int ffn_dim,
                   AttentionOptions options, Rng* rng);

  Var Forward(Graph* g, const Var& x, const AdapterSet& active) const;

  // Attention projections (the LoRA targets).
  std::vector<Linear*> AttentionProjections();
  const Linear& q() const { return q_; }
  const Linear& k() const { return k_; }
  const Linear& v() const { return v_; }
  const Linear& o() const { return o_; }
  const LayerNormLayer& ln_attn() const { return ln_attn_; }
  const LayerNormLayer& ln_ffn() const { return ln_ffn_; }
  const Linear& ffn_in() const { return ffn_in_; }
  const Linear& ffn_out() const { return ffn_out_; }
  const AttentionOptions& options() const { return options_; }

 private:
  AttentionOptions options_;
  LayerNormLayer ln_attn_;
  Linear q_, k_, v_, o_;
  LayerNormLayer ln_ffn_;
  Linear ffn_in_, ffn_out_;
};

// Multi-head scaled dot-product attention over already projected q, k, v.
Var MultiHeadAttention(const Var& q, const Var& k, const Var& v,
                       int num_heads, bool causal);

}  // namespace sopmt
