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

#include "sopmt/autograd.h"

#include <cmath>
#include <limits>
#include <utility>

namespace sopmt {

namespace {

constexpr const char* kGroupNames[] = {
    "encoder",   "downsample",   "projector", "separator",
    "ctc_heads", "decoder_base", "lora_A",    "lora_B",
};

void CheckSameShape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     ShapeString(a.value()) + " vs " +
                     ShapeString(b.value()));
  }
}

}  // namespace

const char* ParamGroupName(ParamGroup group) {
  return kGroupNames[static_cast<int>(group)];
}

ParamGroup ParamGroupFromName(const std::string& name) {
  for (ParamGroup g : AllParamGroups()) {
    if (name == ParamGroupName(g)) return g;
  }
  throw DataError("unknown parameter group '" + name + "'");
}

const std::vector<ParamGroup>& AllParamGroups() {
  static const std::vector<ParamGroup> groups = {
      ParamGroup::kEncoder,   ParamGroup::kDownsample,
      ParamGroup::kProjector, ParamGroup::kSeparator,
      ParamGroup::kCtcHeads,  ParamGroup::kDecoderBase,
      ParamGroup::kLoraA,     ParamGroup::kLoraB,
  };
  return groups;
}

const Matrix& Var::value() const { return graph_->value(id_); }

Matrix Var::grad() const { return graph_->grad(id_); }

Var Graph::Constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::Input(Matrix value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::Param(Parameter* param) {
  auto it = param_nodes_.find(param);
  if (it != param_nodes_.end()) return Var(this, it->second);
  Node node;
  node.value = param->value;
  node.param = param;
  node.requires_grad = grad_enabled_ && param->trainable;
  nodes_.push_back(std::move(node));
  int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(param, id);
  return Var(this, id);
}

Var Graph::Record(Matrix value, const std::vector<Var>& inputs,
                  BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (nodes_[in.id()].requires_grad) {
        node.requires_grad = true;
        break;
      }
    }
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix Graph::grad(int id) const {
  const Node& node = nodes_[id];
  if (node.grad.size() == 0) {
    return Matrix::Zero(node.value.rows(), node.value.cols());
  }
  return node.grad;
}

Matrix* Graph::MutableGrad(const Var& v) {
  Node& node = nodes_[v.id()];
  if (!node.requires_grad) return nullptr;
  if (node.grad.size() == 0) {
    node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
  }
  return &node.grad;
}

void Graph::Backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw ShapeError("Backward: root must be 1x1, got " +
                     ShapeString(root.value()));
  }
  if (!grad_enabled_ || !nodes_[root.id()].requires_grad) return;
  nodes_[root.id()].grad = Matrix::Ones(1, 1);
  for (int id = root.id(); id >= 0; --id) {
    Node& node = nodes_[id];
    if (!node.requires_grad || node.grad.size() == 0) continue;
    if (node.backward) {
      node.backward(*this, node.grad, node.value);
    } else if (node.param != nullptr) {
      Parameter& p = *node.param;
      if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
        p.ZeroGrad();
      }
      p.grad += node.grad;
    }
  }
}

Matrix RowSoftmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Real m = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Matrix RowLogSoftmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Real m = x.row(i).maxCoeff();
    Real lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  return out;
}

void ApplyRopeInPlace(Matrix* x, int num_heads, int position_offset,
                      Real base, bool inverse) {
  const Eigen::Index cols = x->cols();
  if (num_heads <= 0 || cols % num_heads != 0 ||
      (cols / num_heads) % 2 != 0) {
    throw ShapeError("Rope: width " + std::to_string(cols) +
                     " not divisible into even-sized heads");
  }
  const int head_dim = static_cast<int>(cols / num_heads);
  for (Eigen::Index t = 0; t < x->rows(); ++t) {
    const Real pos = static_cast<Real>(position_offset + t);
    for (int i = 0; i < head_dim / 2; ++i) {
      Real theta = pos * std::pow(base, -2.0 * i / head_dim);
      Real c = std::cos(theta);
      Real s = inverse ? -std::sin(theta) : std::sin(theta);
      for (int h = 0; h < num_heads; ++h) {
        Eigen::Index col = h * head_dim + 2 * i;
        Real a = (*x)(t, col);
        Real b = (*x)(t, col + 1);
        (*x)(t, col) = a * c - b * s;
        (*x)(t, col + 1) = a * s + b * c;
      }
    }
  }
}

Real GeluScalar(Real x) {
  constexpr Real kC = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x)));
}

namespace ag {

Var MatMul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("MatMul: " + ShapeString(a.value()) + " * " +
                     ShapeString(b.value()));
  }
  return a.graph()->Record(
      a.value() * b.value(), {a, b},
      [a, b](Graph& g, const Matrix& dy, const Matrix&) {
        if (g.requires_grad(a)) g.AccumulateGrad(a, dy * b.value().transpose());
        if (g.requires_grad(b)) g.AccumulateGrad(b, a.value().transpose() * dy);
      });
}

Var MatMulNT(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("MatMulNT: " + ShapeString(a.value()) + " * (" +
                     ShapeString(b.value()) + ")^T");
  }
  return a.graph()->Record(
      a.value() * b.value().transpose(), {a, b},
      [a, b](Graph& g, const Matrix& dy, const Matrix&) {
        if (g.requires_grad(a)) g.AccumulateGrad(a, dy * b.value());
        if (g.requires_grad(b)) g.AccumulateGrad(b, dy.transpose() * a.value());
      });
}

Var Add(const Var& a, const Var& b) {
  CheckSameShape(a, b, "Add");
  return a.graph()->Record(a.value() + b.value(), {a, b},
                           [a, b](Graph& g, const Matrix& dy, const Matrix&) {
                             g.AccumulateGrad(a, dy);
                             g.AccumulateGrad(b, dy);
                           });
}

Var Sub(const Var& a, const Var& b) {
  CheckSameShape(a, b, "Sub");
  return a.graph()->Record(a.value() - b.value(), {a, b},
                           [a, b](Graph& g, const Matrix& dy, const Matrix&) {
                             g.AccumulateGrad(a, dy);
                             g.AccumulateGrad(b, -dy);
                           });
}

Var Mul(const Var& a, const Var& b) {
  CheckSameShape(a, b, "Mul");
  return a.graph()->Record(
      a.value().cwiseProduct(b.value()), {a, b},
      [a, b](Graph& g, const Matrix& dy, const Matrix&) {
        if (g.requires_grad(a)) g.AccumulateGrad(a, dy.cwiseProduct(b.value()));
        if (g.requires_grad(b)) g.AccumulateGrad(b, dy.cwiseProduct(a.value()));
      });
}

Var Scale(const Var& a, Real s) {
  return a.graph()->Record(a.value() * s, {a},
                           [a, s](Graph& g, const Matrix& dy, const Matrix&) {
                             g.AccumulateGrad(a, dy * s);
                           });
}

Var AddRow(const Var& a, const Var& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw ShapeError("AddRow: " + ShapeString(a.value()) + " + row " +
                     ShapeString(b.value()));
  }
  Matrix y = a.value().rowwise() + b.value().row(0);
  return a.graph()->Record(
      std::move(y), {a, b}, [a, b](Graph& g, const Matrix& dy, const Matrix&) {
        g.AccumulateGrad(a, dy);
        if (g.requires_grad(b)) g.AccumulateGrad(b, dy.colwise().sum());
      });
}

Var Sigmoid(const Var& a) {
  Matrix y = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  return a.graph()->Record(
      std::move(y), {a}, [a](Graph& g, const Matrix& dy, const Matrix& y) {
        g.AccumulateGrad(
            a, (dy.array() * y.array() * (1.0 - y.array())).matrix());
      });
}

Var Tanh(const Var& a) {
  Matrix y = a.value().array().tanh().matrix();
  return a.graph()->Record(
      std::move(y), {a}, [a](Graph& g, const Matrix& dy, const Matrix& y) {
        g.AccumulateGrad(a, (dy.array() * (1.0 - y.array().square())).matrix());
      });
}

Var Relu(const Var& a) {
  Matrix y = a.value().cwiseMax(0.0);
  return a.graph()->Record(
      std::move(y), {a}, [a](Graph& g, const Matrix& dy, const Matrix&) {
        g.AccumulateGrad(
            a, (a.value().array() > 0.0).select(dy, 0.0).matrix());
      });
}

Var Gelu(const Var& a) {
  Matrix y = a.value().unaryExpr([](Real x) { return GeluScalar(x); });
  return a.graph()->Record(
      std::move(y), {a}, [a](Graph& g, const Matrix& dy, const Matrix&) {
        constexpr Real kC = 0.7978845608028654;
        Matrix d = a.value().unaryExpr([](Real x) {
          Real u = kC * (x + 0.044715 * x * x * x);
          Real t = std::tanh(u);
          Real du = kC * (1.0 + 3.0 * 0.044715 * x * x);
          return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        });
        g.AccumulateGrad(a, dy.cwiseProduct(d));
      });
}

Var Softmax(const Var& a, bool causal) {
  const Matrix& x = a.value();
  Matrix y = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index n = causal ? std::min<Eigen::Index>(i + 1, x.cols()) : x.cols();
    auto row = x.row(i).head(n);
    Real m = row.maxCoeff();
    y.row(i).head(n) = (row.array() - m).exp();
    y.row(i).head(n) /= y.row(i).head(n).sum();
  }
  return a.graph()->Record(
      std::move(y), {a}, [a](Graph& g, const Matrix& dy, const Matrix& y) {
        // dx = y * (dy - sum(dy * y)) row-wise; masked entries have y = 0.
        RowVector dots = (dy.cwiseProduct(y)).rowwise().sum().transpose();
        Matrix dx = y.array() * (dy.colwise() - dots.transpose()).array();
        g.AccumulateGrad(a, dx);
      });
}

Var LayerNorm(const Var& x, const Var& gain, const Var& bias, Real eps) {
  const Matrix& in = x.value();
  const Eigen::Index n = in.rows();
  const Eigen::Index d = in.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 ||
      bias.cols() != d) {
    throw ShapeError("LayerNorm: gain/bias must be 1x" + std::to_string(d));
  }
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Real mean = in.row(i).mean();
    Real var = (in.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (in.row(i).array() - mean) * inv_std(i);
  }
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  return x.graph()->Record(
      std::move(y), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph& g, const Matrix& dy, const Matrix&) {
        if (g.requires_grad(gain))
          g.AccumulateGrad(gain, dy.cwiseProduct(xhat).colwise().sum());
        if (g.requires_grad(bias)) g.AccumulateGrad(bias, dy.colwise().sum());
        if (g.requires_grad(x)) {
          const Real d = static_cast<Real>(xhat.cols());
          Matrix dxhat = dy.array().rowwise() * gain.value().row(0).array();
          Matrix dx(xhat.rows(), xhat.cols());
          for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
            Real s1 = dxhat.row(i).sum();
            Real s2 = dxhat.row(i).dot(xhat.row(i));
            dx.row(i) = (inv_std(i) / d) *
                        (d * dxhat.row(i).array() - s1 -
                         xhat.row(i).array() * s2);
          }
          g.AccumulateGrad(x, dx);
        }
      });
}

Var ConcatRows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("ConcatRows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) {
      throw ShapeError("ConcatRows: width mismatch " + std::to_string(cols) +
                       " vs " + std::to_string(p.cols()));
    }
    rows += p.rows();
  }
  Matrix y(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    y.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts[0].graph()->Record(
      std::move(y), parts, [parts](Graph& g, const Matrix& dy, const Matrix&) {
        Eigen::Index r = 0;
        for (const Var& p : parts) {
          if (g.requires_grad(p)) g.AccumulateGrad(p, dy.middleRows(r, p.rows()));
          r += p.rows();
        }
      });
}

Var ConcatCols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("ConcatCols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("ConcatCols: height mismatch");
    cols += p.cols();
  }
  Matrix y(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    y.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts[0].graph()->Record(
      std::move(y), parts, [parts](Graph& g, const Matrix& dy, const Matrix&) {
        Eigen::Index c = 0;
        for (const Var& p : parts) {
          if (g.requires_grad(p)) g.AccumulateGrad(p, dy.middleCols(c, p.cols()));
          c += p.cols();
        }
      });
}

Var SliceRows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("SliceRows: [" + std::to_string(start) + ", +" +
                     std::to_string(count) + ") out of " +
                     std::to_string(a.rows()));
  }
  return a.graph()->Record(
      a.value().middleRows(start, count), {a},
      [a, start, count](Graph& g, const Matrix& dy, const Matrix&) {
        Matrix* ga = g.MutableGrad(a);
        if (ga) ga->middleRows(start, count) += dy;
      });
}

Var SliceCols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("SliceCols: out of range");
  }
  return a.graph()->Record(
      a.value().middleCols(start, count), {a},
      [a, start, count](Graph& g, const Matrix& dy, const Matrix&) {
        Matrix* ga = g.MutableGrad(a);
        if (ga) ga->middleCols(start, count) += dy;
      });
}

Var GatherRows(const Var& table, const std::vector<int>& ids) {
  const Matrix& t = table.value();
  Matrix y(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) {
      throw DataError("GatherRows: id " + std::to_string(ids[i]) +
                      " outside table of " + std::to_string(t.rows()) +
                      " rows");
    }
    y.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  return table.graph()->Record(
      std::move(y), {table},
      [table, ids](Graph& g, const Matrix& dy, const Matrix&) {
        Matrix* gt = g.MutableGrad(table);
        if (!gt) return;
        for (size_t i = 0; i < ids.size(); ++i) {
          gt->row(ids[i]) += dy.row(static_cast<Eigen::Index>(i));
        }
      });
}

Var Im2Col(const Var& x, int kernel, int stride, int pad) {
  const Matrix& in = x.value();
  const Eigen::Index t_in = in.rows();
  const Eigen::Index d = in.cols();
  const Eigen::Index t_out = (t_in + 2 * pad - kernel) / stride + 1;
  if (t_out <= 0) throw ShapeError("Im2Col: input too short");
  Matrix y = Matrix::Zero(t_out, kernel * d);
  for (Eigen::Index i = 0; i < t_out; ++i) {
    for (int k = 0; k < kernel; ++k) {
      Eigen::Index src = i * stride - pad + k;
      if (src >= 0 && src < t_in) y.block(i, k * d, 1, d) = in.row(src);
    }
  }
  return x.graph()->Record(
      std::move(y), {x},
      [x, kernel, stride, pad](Graph& g, const Matrix& dy, const Matrix&) {
        Matrix* gx = g.MutableGrad(x);
        if (!gx) return;
        const Eigen::Index t_in = gx->rows();
        const Eigen::Index d = gx->cols();
        for (Eigen::Index i = 0; i < dy.rows(); ++i) {
          for (int k = 0; k < kernel; ++k) {
            Eigen::Index src = i * stride - pad + k;
            if (src >= 0 && src < t_in) gx->row(src) += dy.block(i, k * d, 1, d);
          }
        }
      });
}

Var Rope(const Var& x, int num_heads, int position_offset, Real base) {
  Matrix y = x.value();
  ApplyRopeInPlace(&y, num_heads, position_offset, base, false);
  return x.graph()->Record(
      std::move(y), {x},
      [x, num_heads, position_offset, base](Graph& g, const Matrix& dy,
                                            const Matrix&) {
        // The rotation is orthogonal; its adjoint is the inverse rotation.
        Matrix dx = dy;
        ApplyRopeInPlace(&dx, num_heads, position_offset, base, true);
        g.AccumulateGrad(x, dx);
      });
}

Var Sum(const Var& a) {
  Matrix y(1, 1);
  y(0, 0) = a.value().sum();
  return a.graph()->Record(
      std::move(y), {a}, [a](Graph& g, const Matrix& dy, const Matrix&) {
        g.AccumulateGrad(a, Matrix::Constant(a.rows(), a.cols(), dy(0, 0)));
      });
}

Var Mean(const Var& a) {
  const Real n = static_cast<Real>(a.value().size());
  return Scale(Sum(a), 1.0 / n);
}

Var CrossEntropy(const Var& logits, const std::vector<int>& targets) {
  const Matrix& z = logits.value();
  if (static_cast<size_t>(z.rows()) != targets.size() || targets.empty()) {
    throw ShapeError("CrossEntropy: " + std::to_string(z.rows()) +
                     " logit rows for " + std::to_string(targets.size()) +
                     " targets");
  }
  Matrix logp = RowLogSoftmax(z);
  Real loss = 0.0;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= z.cols()) {
      throw DataError("CrossEntropy: target id out of range");
    }
    loss -= logp(static_cast<Eigen::Index>(i), targets[i]);
  }
  const Real n = static_cast<Real>(targets.size());
  Matrix y(1, 1);
  y(0, 0) = loss / n;
  return logits.graph()->Record(
      std::move(y), {logits},
      [logits, targets, logp = std::move(logp), n](Graph& g, const Matrix& dy,
                                                   const Matrix&) {
        Matrix d = logp.array().exp();
        for (size_t i = 0; i < targets.size(); ++i) {
          d(static_cast<Eigen::Index>(i), targets[i]) -= 1.0;
        }
        g.AccumulateGrad(logits, d * (dy(0, 0) / n));
      });
}

}  // namespace ag
}  // namespace sopmt
