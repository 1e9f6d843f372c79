#include "melodyflow/autodiff.hpp"

#include <cmath>
#include <utility>

#include "melodyflow/errors.hpp"

namespace melodyflow {

// ---------------------------------------------------------------------------
// ParameterSet

std::size_t ParameterSet::add(const std::string& name, Matrix value) {
  if (lookup_.count(name) != 0) {
    throw ConfigError("duplicate parameter name: " + name);
  }
  lookup_[name] = values_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

bool ParameterSet::contains(const std::string& name) const { return lookup_.count(name) != 0; }

std::size_t ParameterSet::index(const std::string& name) const {
  auto it = lookup_.find(name);
  if (it == lookup_.end()) {
    throw ConfigError("unknown parameter: " + name);
  }
  return it->second;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

bool ParameterSet::same_layout(const ParameterSet& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i].rows() != other.values_[i].rows() || values_[i].cols() != other.values_[i].cols()) {
      return false;
    }
  }
  return true;
}

std::vector<Matrix> ParameterSet::zeros_like() const {
  std::vector<Matrix> out;
  out.reserve(values_.size());
  for (const auto& v : values_) out.push_back(Matrix::Zero(v.rows(), v.cols()));
  return out;
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (!same_layout(other)) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i] != other.values_[i]) return false;
  }
  return true;
}

double global_norm(const Gradients& grads) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

bool all_finite(const Gradients& grads) {
  for (const auto& g : grads) {
    if (!g.allFinite()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Var / Tape

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("scalar() on a non-1x1 value");
  return v(0, 0);
}

Var Tape::constant(Matrix value) { return push(std::move(value), nullptr); }

Var Tape::scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::parameter(std::size_t index) {
  if (params_ == nullptr || index >= params_->size()) {
    throw ConfigError("tape has no parameter at index " + std::to_string(index));
  }
  auto it = param_nodes_.find(index);
  if (it != param_nodes_.end()) return Var(this, it->second);
  Node node;
  node.ref = &params_->value(index);
  node.param = static_cast<int>(index);
  nodes_.push_back(std::move(node));
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_[index] = id;
  return Var(this, id);
}

Var Tape::parameter(const std::string& name) {
  if (params_ == nullptr) throw ConfigError("tape has no parameters");
  return parameter(params_->index(name));
}

const Matrix& Tape::value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.ref != nullptr ? *n.ref : n.value;
}

Var Tape::push(Matrix value, Backprop backprop) {
  Node node;
  node.value = std::move(value);
  node.backprop = std::move(backprop);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int id, const Matrix& g) { accumulate_expr(id, g); }

void Tape::backward(Var root, Gradients& grads) {
  if (root.tape() != this) throw ContractError("backward root belongs to another tape");
  if (root.value().size() != 1) throw ShapeError("backward root must be a 1x1 scalar");
  if (params_ != nullptr && grads.size() != params_->size()) {
    grads = params_->zeros_like();
  }
  grads_.assign(nodes_.size(), Matrix());
  grads_[static_cast<std::size_t>(root.id())] = Matrix::Ones(1, 1);
  for (int id = root.id(); id >= 0; --id) {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (grads_[static_cast<std::size_t>(id)].size() == 0) continue;
    if (node.param >= 0) {
      grads[static_cast<std::size_t>(node.param)] += grads_[static_cast<std::size_t>(id)];
    } else if (node.backprop) {
      node.backprop(*this, id);
    }
  }
  grads_.clear();
}

// ---------------------------------------------------------------------------
// Operations

namespace ad {
namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

void require_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw ContractError("operands live on different tapes");
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).push(a.value() + b.value(), [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).push(a.value() - b.value(), [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate_expr(ib, -t.grad(self));
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).push(a.value().cwiseProduct(b.value()), [ia, ib](Tape& t, int self) {
    t.accumulate_expr(ia, t.grad(self).cwiseProduct(t.value(ib)));
    t.accumulate_expr(ib, t.grad(self).cwiseProduct(t.value(ia)));
  });
}

Var div(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "div");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).push(a.value().cwiseQuotient(b.value()), [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& bv = t.value(ib);
    t.accumulate_expr(ia, g.cwiseQuotient(bv));
    t.accumulate_expr(ib, -g.cwiseProduct(t.value(ia)).cwiseQuotient(bv.cwiseProduct(bv)));
  });
}

Var scale(Var a, double s) {
  const int ia = a.id();
  return tape_of(a).push(a.value() * s, [ia, s](Tape& t, int self) { t.accumulate_expr(ia, t.grad(self) * s); });
}

Var add_scalar(Var a, double s) {
  const int ia = a.id();
  return tape_of(a).push(a.value().array() + s, [ia](Tape& t, int self) { t.accumulate(ia, t.grad(self)); });
}

Var scale_by(Var a, Var s) {
  require_same_tape(a, s);
  if (s.value().size() != 1) throw ShapeError("scale_by: factor must be 1x1");
  const int ia = a.id(), is = s.id();
  return tape_of(a).push(a.value() * s.scalar(), [ia, is](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.accumulate_expr(ia, g * t.value(is)(0, 0));
    t.accumulate_expr(is, Matrix::Constant(1, 1, g.cwiseProduct(t.value(ia)).sum()));
  });
}

Var add_row(Var a, Var row) {
  require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row must be 1 x cols(a)");
  const int ia = a.id(), ir = row.id();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return tape_of(a).push(std::move(out), [ia, ir](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate_expr(ir, t.grad(self).colwise().sum());
  });
}

Var mul_row(Var a, Var row) {
  require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("mul_row: row must be 1 x cols(a)");
  const int ia = a.id(), ir = row.id();
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return tape_of(a).push(std::move(out), [ia, ir](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& r = t.value(ir);
    t.accumulate_expr(ia, (g.array().rowwise() * r.row(0).array()).matrix());
    t.accumulate_expr(ir, g.cwiseProduct(t.value(ia)).colwise().sum());
  });
}

Var broadcast_rows(Var row, Eigen::Index rows) {
  if (row.rows() != 1) throw ShapeError("broadcast_rows: input must be a single row");
  const int ir = row.id();
  Matrix out = row.value().replicate(rows, 1);
  return tape_of(row).push(std::move(out), [ir](Tape& t, int self) {
    t.accumulate_expr(ir, t.grad(self).colwise().sum());
  });
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value();
  return tape_of(a).push(std::move(out), [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.accumulate_expr(ia, g * t.value(ib).transpose());
    t.accumulate_expr(ib, t.value(ia).transpose() * g);
  });
}

Var transpose(Var a) {
  const int ia = a.id();
  return tape_of(a).push(a.value().transpose(), [ia](Tape& t, int self) {
    t.accumulate_expr(ia, t.grad(self).transpose());
  });
}

Var tanh(Var a) {
  const int ia = a.id();
  Matrix out = a.value().array().tanh();
  return tape_of(a).push(std::move(out), [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    t.accumulate_expr(ia, (t.grad(self).array() * (1.0 - y.array().square())).matrix());
  });
}

Var silu(Var a) {
  const int ia = a.id();
  const Eigen::ArrayXXd x = a.value().array();
  const Eigen::ArrayXXd sig = 1.0 / (1.0 + (-x).exp());
  Matrix out = (x * sig).matrix();
  return tape_of(a).push(std::move(out), [ia](Tape& t, int self) {
    const Eigen::ArrayXXd xv = t.value(ia).array();
    const Eigen::ArrayXXd s = 1.0 / (1.0 + (-xv).exp());
    t.accumulate_expr(ia, (t.grad(self).array() * (s * (1.0 + xv * (1.0 - s)))).matrix());
  });
}

Var exp(Var a) {
  const int ia = a.id();
  Matrix out = a.value().array().exp();
  return tape_of(a).push(std::move(out), [ia](Tape& t, int self) {
    t.accumulate_expr(ia, t.grad(self).cwiseProduct(t.value(self)));
  });
}

Var log(Var a) {
  const int ia = a.id();
  Matrix out = a.value().array().log();
  return tape_of(a).push(std::move(out), [ia](Tape& t, int self) {
    t.accumulate_expr(ia, t.grad(self).cwiseQuotient(t.value(ia)));
  });
}

Var sqrt(Var a) {
  const int ia = a.id();
  Matrix out = a.value().array().sqrt();
  return tape_of(a).push(std::move(out), [ia](Tape& t, int self) {
    t.accumulate_expr(ia, (t.grad(self).array() / (2.0 * t.value(self).array())).matrix());
  });
}

Var square(Var a) {
  const int ia = a.id();
  Matrix out = a.value().array().square();
  return tape_of(a).push(std::move(out), [ia](Tape& t, int self) {
    t.accumulate_expr(ia, 2.0 * t.grad(self).cwiseProduct(t.value(ia)));
  });
}

Var softmax_rows(Var a) {
  const int ia = a.id();
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return tape_of(a).push(std::move(out), [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    t.accumulate_expr(ia, (y.array() * (g.colwise() - dot).array()).matrix());
  });
}

Var log_softmax_rows(Var a) {
  const int ia = a.id();
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    const double lse = m + std::log((out.row(r).array() - m).exp().sum());
    out.row(r).array() -= lse;
  }
  return tape_of(a).push(std::move(out), [ia](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Eigen::ArrayXXd p = t.value(self).array().exp();
    const Eigen::VectorXd gsum = g.rowwise().sum();
    Matrix d = g - (p.colwise() * gsum.array()).matrix();
    t.accumulate(ia, d);
  });
}

Var layer_norm_rows(Var a, double eps) {
  const int ia = a.id();
  const Matrix& x = a.value();
  const double n = static_cast<double>(x.cols());
  Eigen::VectorXd inv_std(x.rows());
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().sum() / n;
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    out.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  return tape_of(a).push(std::move(out), [ia, inv_std](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& y = t.value(self);
    const double cols = static_cast<double>(g.cols());
    Matrix d(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double gmean = g.row(r).sum() / cols;
      const double gy = g.row(r).dot(y.row(r)) / cols;
      d.row(r) = inv_std(r) * (g.row(r).array() - gmean - y.row(r).array() * gy);
    }
    t.accumulate(ia, d);
  });
}

Var sum(Var a) {
  const int ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return tape_of(a).push(Matrix::Constant(1, 1, a.value().sum()), [ia, r, c](Tape& t, int self) {
    t.accumulate_expr(ia, Matrix::Constant(r, c, t.grad(self)(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of an empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols out of range");
  const int ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  Matrix out = a.value().middleCols(start, count);
  return tape_of(a).push(std::move(out), [ia, r, c, start, count](Tape& t, int self) {
    Matrix d = Matrix::Zero(r, c);
    d.middleCols(start, count) = t.grad(self);
    t.accumulate(ia, d);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of zero parts");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    layout.emplace_back(p.id(), at);
    at += p.cols();
  }
  return tape_of(parts.front()).push(std::move(out), [layout](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    for (const auto& [id, offset] : layout) {
      t.accumulate_expr(id, g.middleCols(offset, t.value(id).cols()));
    }
  });
}

Var gather_rows(Var table, const std::vector<int>& indices) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(indices.size()), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= tv.rows()) throw ShapeError("gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(indices[i]);
  }
  const int it = table.id();
  const Eigen::Index r = tv.rows(), c = tv.cols();
  return tape_of(table).push(std::move(out), [it, r, c, indices](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix d = Matrix::Zero(r, c);
    for (std::size_t i = 0; i < indices.size(); ++i) d.row(indices[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(it, d);
  });
}

}  // namespace ad
}  // namespace melodyflow
