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

#include "sopmt/nn.h"

#include <algorithm>
#include <cmath>
#include <utility>

namespace sopmt {

Matrix RandomNormal(Eigen::Index rows, Eigen::Index cols, Real stddev,
                    Rng* rng) {
  std::normal_distribution<Real> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(*rng);
  return m;
}

Matrix RandomUniform(Eigen::Index rows, Eigen::Index cols, Real bound,
                     Rng* rng) {
  std::uniform_real_distribution<Real> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(*rng);
  return m;
}

// ParamStore

Parameter* ParamStore::Create(const std::string& name, ParamGroup group,
                              Matrix init) {
  if (index_.count(name)) {
    throw ConfigError("duplicate parameter name '" + name + "'");
  }
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->group = group;
  p->value = std::move(init);
  p->ZeroGrad();
  Parameter* raw = p.get();
  params_.push_back(std::move(p));
  index_.emplace(name, raw);
  return raw;
}

Parameter* ParamStore::Find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : it->second;
}

const Parameter* ParamStore::Find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : it->second;
}

Parameter& ParamStore::Get(const std::string& name) {
  Parameter* p = Find(name);
  if (p == nullptr) throw DataError("no parameter named '" + name + "'");
  return *p;
}

std::vector<Parameter*> ParamStore::All() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParamStore::All() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParamStore::Group(ParamGroup group) {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (p->group == group) out.push_back(p.get());
  }
  return out;
}

bool ParamStore::HasGroup(ParamGroup group) const {
  return std::any_of(params_.begin(), params_.end(),
                     [group](const auto& p) { return p->group == group; });
}

void ParamStore::RemoveGroup(ParamGroup group) {
  for (auto it = params_.begin(); it != params_.end();) {
    if ((*it)->group == group) {
      index_.erase((*it)->name);
      it = params_.erase(it);
    } else {
      ++it;
    }
  }
}

void ParamStore::SetTrainable(const std::set<ParamGroup>& groups) {
  for (auto& p : params_) p->trainable = groups.count(p->group) > 0;
}

std::vector<Parameter*> ParamStore::Trainable() {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (p->trainable) out.push_back(p.get());
  }
  return out;
}

void ParamStore::ZeroGrad() {
  for (auto& p : params_) p->ZeroGrad();
}

void ParamStore::RoundToFloat() {
  for (auto& p : params_) {
    p->value = p->value.cast<float>().cast<Real>();
  }
}

// Linear

Linear::Linear(ParamStore* store, const std::string& name, ParamGroup group,
               int in_dim, int out_dim, bool bias, Rng* rng)
    : name_(name) {
  weight_ = store->Create(name + ".weight", group,
                          RandomNormal(out_dim, in_dim,
                                       1.0 / std::sqrt(in_dim), rng));
  if (bias) {
    bias_ = store->Create(name + ".bias", group, Matrix::Zero(1, out_dim));
  }
}

Var Linear::Forward(Graph* g, const Var& x, const AdapterSet& active) const {
  if (x.cols() != in_dim()) {
    throw ShapeError(name_ + ": expected width " + std::to_string(in_dim()) +
                     ", got " + std::to_string(x.cols()));
  }
  Var y = ag::MatMulNT(x, g->Param(weight_));
  for (const LoraAdapter& a : adapters_) {
    if (a.merged || !active.count(a.group)) continue;
    Var low = ag::MatMulNT(x, g->Param(a.down));
    Var delta = ag::MatMulNT(low, g->Param(a.up));
    y = ag::Add(y, ag::Scale(delta, a.scale));
  }
  if (bias_ != nullptr) y = ag::AddRow(y, g->Param(bias_));
  return y;
}

Matrix Linear::Apply(const Matrix& x, const AdapterSet& active) const {
  if (x.cols() != in_dim()) {
    throw ShapeError(name_ + ": expected width " + std::to_string(in_dim()));
  }
  Matrix y = x * weight_->value.transpose();
  for (const LoraAdapter& a : adapters_) {
    if (a.merged || !active.count(a.group)) continue;
    y += a.scale * ((x * a.down->value.transpose()) * a.up->value.transpose());
  }
  if (bias_ != nullptr) y.rowwise() += bias_->value.row(0);
  return y;
}

void Linear::AttachAdapter(ParamStore* store, ParamGroup group, int rank,
                           Real alpha, Rng* rng) {
  if (FindAdapter(group) != nullptr) {
    throw ConfigError(name_ + ": adapter group " +
                      ParamGroupName(group) + " already attached");
  }
  LoraAdapter a;
  const std::string prefix = name_ + "." + ParamGroupName(group);
  a.down = store->Create(prefix + ".down", group,
                         RandomUniform(rank, in_dim(),
                                       1.0 / std::sqrt(in_dim()), rng));
  a.up = store->Create(prefix + ".up", group, Matrix::Zero(out_dim(), rank));
  a.scale = alpha / rank;
  a.group = group;
  adapters_.push_back(a);
}

void Linear::MergeAdapter(ParamGroup group) {
  LoraAdapter* a = FindAdapter(group);
  if (a == nullptr) {
    throw ConfigError(name_ + ": no adapter of group " +
                      ParamGroupName(group));
  }
  if (a->merged) {
    throw ConfigError(name_ + ": adapter group " + ParamGroupName(group) +
                      " already merged");
  }
  weight_->value += a->scale * (a->up->value * a->down->value);
  a->merged = true;
}

LoraAdapter* Linear::FindAdapter(ParamGroup group) {
  for (LoraAdapter& a : adapters_) {
    if (a.group == group) return &a;
  }
  return nullptr;
}

// LayerNormLayer

LayerNormLayer::LayerNormLayer(ParamStore* store, const std::string& name,
                               ParamGroup group, int dim) {
  gain_ = store->Create(name + ".gain", group, Matrix::Ones(1, dim));
  bias_ = store->Create(name + ".bias", group, Matrix::Zero(1, dim));
}

Var LayerNormLayer::Forward(Graph* g, const Var& x) const {
  return ag::LayerNorm(x, g->Param(gain_), g->Param(bias_));
}

Matrix LayerNormLayer::Apply(const Matrix& x) const {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Real mean = x.row(i).mean();
    Real var = (x.row(i).array() - mean).square().mean();
    Real inv_std = 1.0 / std::sqrt(var + 1e-5);
    y.row(i) = ((x.row(i).array() - mean) * inv_std) *
                   gain_->value.row(0).array() +
               bias_->value.row(0).array();
  }
  return y;
}

// Lstm

Lstm::Lstm(ParamStore* store, const std::string& name, ParamGroup group,
           int in_dim, int hidden, Rng* rng)
    : input_(store, name + ".input", group, in_dim, 4 * hidden, true, rng),
      hidden_(hidden) {
  w_hh_ = store->Create(name + ".w_hh", group,
                        RandomUniform(4 * hidden, hidden,
                                      1.0 / std::sqrt(hidden), rng));
  // Forget-gate bias starts at 1.
  input_.bias()->value.middleCols(hidden, hidden).setOnes();
}

Var Lstm::Forward(Graph* g, const Var& x, bool reverse) const {
  const Eigen::Index steps = x.rows();
  const int h = hidden_;
  Var gates_in = input_.Forward(g, x);  // T x 4H
  Var w_hh = g->Param(w_hh_);
  Var hs = g->Constant(Matrix::Zero(1, h));
  Var cs = g->Constant(Matrix::Zero(1, h));
  std::vector<Var> outputs(static_cast<size_t>(steps));
  for (Eigen::Index step = 0; step < steps; ++step) {
    Eigen::Index t = reverse ? steps - 1 - step : step;
    Var gates = ag::Add(ag::SliceRows(gates_in, t, 1), ag::MatMulNT(hs, w_hh));
    Var i = ag::Sigmoid(ag::SliceCols(gates, 0, h));
    Var f = ag::Sigmoid(ag::SliceCols(gates, h, h));
    Var c_hat = ag::Tanh(ag::SliceCols(gates, 2 * h, h));
    Var o = ag::Sigmoid(ag::SliceCols(gates, 3 * h, h));
    cs = ag::Add(ag::Mul(f, cs), ag::Mul(i, c_hat));
    hs = ag::Mul(o, ag::Tanh(cs));
    outputs[static_cast<size_t>(t)] = hs;
  }
  return ag::ConcatRows(outputs);
}

BiLstm::BiLstm(ParamStore* store, const std::string& name, ParamGroup group,
               int in_dim, int hidden, Rng* rng)
    : fwd_(store, name + ".fwd", group, in_dim, hidden, rng),
      bwd_(store, name + ".bwd", group, in_dim, hidden, rng) {}

Var BiLstm::Forward(Graph* g, const Var& x) const {
  return ag::ConcatCols({fwd_.Forward(g, x, false), bwd_.Forward(g, x, true)});
}

// Attention

Var MultiHeadAttention(const Var& q, const Var& k, const Var& v,
                       int num_heads, bool causal) {
  const Eigen::Index dim = q.cols();
  const Eigen::Index head_dim = dim / num_heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(head_dim));
  std::vector<Var> heads;
  heads.reserve(static_cast<size_t>(num_heads));
  for (int h = 0; h < num_heads; ++h) {
    Var qh = ag::SliceCols(q, h * head_dim, head_dim);
    Var kh = ag::SliceCols(k, h * head_dim, head_dim);
    Var vh = ag::SliceCols(v, h * head_dim, head_dim);
    Var scores = ag::Scale(ag::MatMulNT(qh, kh), scale);
    Var probs = ag::Softmax(scores, causal);
    heads.push_back(ag::MatMul(probs, vh));
  }
  return num_heads == 1 ? heads[0] : ag::ConcatCols(heads);
}

TransformerBlock::TransformerBlock(ParamStore* store, const std::string& name,
                                   ParamGroup group, int dim, int ffn_dim,
                                   AttentionOptions options, Rng* rng)
    : options_(options),
      ln_attn_(store, name + ".ln_attn", group, dim),
      q_(store, name + ".attn.q", group, dim, dim, false, rng),
      k_(store, name + ".attn.k", group, dim, dim, false, rng),
      v_(store, name + ".attn.v", group, dim, dim, false, rng),
      o_(store, name + ".attn.o", group, dim, dim, false, rng),
      ln_ffn_(store, name + ".ln_ffn", group, dim),
      ffn_in_(store, name + ".ffn.in", group, dim, ffn_dim, true, rng),
      ffn_out_(store, name + ".ffn.out", group, ffn_dim, dim, true, rng) {
  if (dim % options.num_heads != 0) {
    throw ConfigError(name + ": width " + std::to_string(dim) +
                      " not divisible by " +
                      std::to_string(options.num_heads) + " heads");
  }
}

Var TransformerBlock::Forward(Graph* g, const Var& x,
                              const AdapterSet& active) const {
  Var h = ln_attn_.Forward(g, x);
  Var q = q_.Forward(g, h, active);
  Var k = k_.Forward(g, h, active);
  Var v = v_.Forward(g, h, active);
  if (options_.rope) {
    q = ag::Rope(q, options_.num_heads, 0);
    k = ag::Rope(k, options_.num_heads, 0);
  }
  Var attn = MultiHeadAttention(q, k, v, options_.num_heads, options_.causal);
  Var x1 = ag::Add(x, o_.Forward(g, attn, active));
  Var f = ffn_out_.Forward(
      g, ag::Gelu(ffn_in_.Forward(g, ln_ffn_.Forward(g, x1))));
  return ag::Add(x1, f);
}

std::vector<Linear*> TransformerBlock::AttentionProjections() {
  return {&q_, &k_, &v_, &o_};
}

}  // namespace sopmt
