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

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Graph is built per forward pass (typically one training sample). Every op
// records its output value and a closure that pushes the output gradient back
// to its inputs. Parameters enter the graph as leaves; after Backward() their
// gradients are added into Parameter::grad. Leaves of frozen parameters and
// constants are marked as not requiring gradients, so whole frozen subgraphs
// skip the backward pass.

#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sopmt/common.h"

namespace sopmt {

enum class ParamGroup {
  kEncoder,
  kDownsample,
  kProjector,
  kSeparator,
  kCtcHeads,
  kDecoderBase,
  kLoraA,
  kLoraB,
};

const char* ParamGroupName(ParamGroup group);
ParamGroup ParamGroupFromName(const std::string& name);
const std::vector<ParamGroup>& AllParamGroups();

struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::kEncoder;
  Matrix value;
  Matrix grad;
  bool trainable = false;

  void ZeroGrad() { grad.setZero(value.rows(), value.cols()); }
};

class Graph;

// Lightweight handle to a node in a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  int id() const { return id_; }

  const Matrix& value() const;
  // Gradient after Backward(); a zero matrix if no gradient reached the node.
  Matrix grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Real scalar() const { return value()(0, 0); }

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  // Receives the output gradient and the output value.
  using BackwardFn =
      std::function<void(Graph&, const Matrix& dy, const Matrix& y)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var Constant(Matrix value);
  // Differentiable leaf not tied to a parameter (used by gradient checks).
  Var Input(Matrix value);
  // Leaf bound to a parameter; one node per parameter per graph.
  Var Param(Parameter* param);

  // Records an op output. `fn` is kept only if some input requires grad.
  Var Record(Matrix value, const std::vector<Var>& inputs, BackwardFn fn);

  // Runs reverse accumulation from a 1x1 root and flushes parameter grads.
  void Backward(const Var& root);

  const Matrix& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool requires_grad(const Var& v) const { return requires_grad(v.id()); }
  Matrix grad(int id) const;

  // Adds `delta` into the gradient of `v` (no-op for non-differentiable
  // nodes). The gradient buffer is allocated on first use.
  template <typename Derived>
  void AccumulateGrad(const Var& v, const Eigen::MatrixBase<Derived>& delta) {
    Node& node = nodes_[v.id()];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
      node.grad = delta;
    } else {
      node.grad += delta;
    }
  }
  // Mutable gradient buffer for ops that scatter into parts of the input.
  Matrix* MutableGrad(const Var& v);

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  std::unordered_map<Parameter*, int> param_nodes_;
  bool grad_enabled_;
};

// Differentiable ops. All inputs must belong to the same graph.
namespace ag {

Var MatMul(const Var& a, const Var& b);    // a * b
Var MatMulNT(const Var& a, const Var& b);  // a * b^T
Var Add(const Var& a, const Var& b);
Var Sub(const Var& a, const Var& b);
Var Mul(const Var& a, const Var& b);  // element-wise
Var Scale(const Var& a, Real s);
// a + broadcast of the 1xC row vector b over every row.
Var AddRow(const Var& a, const Var& b);
Var Sigmoid(const Var& a);
Var Tanh(const Var& a);
Var Relu(const Var& a);
Var Gelu(const Var& a);
// Row-wise softmax. With `causal`, entry (i, j) is masked when j > i.
Var Softmax(const Var& a, bool causal);
// Row-wise layer normalisation with 1xC gain and bias.
Var LayerNorm(const Var& x, const Var& gain, const Var& bias,
              Real eps = 1e-5);
Var ConcatRows(const std::vector<Var>& parts);
Var ConcatCols(const std::vector<Var>& parts);
Var SliceRows(const Var& a, Eigen::Index start, Eigen::Index count);
Var SliceCols(const Var& a, Eigen::Index start, Eigen::Index count);
// Row lookup: output row i = table row ids[i].
Var GatherRows(const Var& table, const std::vector<int>& ids);
// Unfolds rows for a 1-D convolution: output row i holds the concatenation
// of input rows i*stride - pad + k for k in [0, kernel), zero outside range.
Var Im2Col(const Var& x, int kernel, int stride, int pad);
// Rotary position embedding applied per head to adjacent column pairs.
Var Rope(const Var& x, int num_heads, int position_offset, Real base = 10000);
Var Sum(const Var& a);
Var Mean(const Var& a);
// Mean token cross-entropy of row-wise softmax(logits) against targets.
Var CrossEntropy(const Var& logits, const std::vector<int>& targets);

}  // namespace ag

// Forward-only helpers shared by the graph ops and the inference paths.
Matrix RowSoftmax(const Matrix& x);
Matrix RowLogSoftmax(const Matrix& x);
void ApplyRopeInPlace(Matrix* x, int num_heads, int position_offset,
                      Real base, bool inverse);
Real GeluScalar(Real x);

}  // namespace sopmt
