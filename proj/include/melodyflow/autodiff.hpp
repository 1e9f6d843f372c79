#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation applied to its Vars. Calling backward() on a
// scalar (1x1) Var walks the tape in reverse and accumulates gradients for the
// parameter leaves into a caller-owned Gradients buffer, so several tapes may
// run against the same ParameterSet concurrently.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace melodyflow {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

/// Named, ordered collection of parameter tensors.
class ParameterSet {
 public:
  std::size_t add(const std::string& name, Matrix value);

  std::size_t size() const { return values_.size(); }
  bool contains(const std::string& name) const;
  std::size_t index(const std::string& name) const;

  const std::string& name(std::size_t i) const { return names_[i]; }
  const Matrix& value(std::size_t i) const { return values_[i]; }
  Matrix& value(std::size_t i) { return values_[i]; }
  const Matrix& value(const std::string& name) const { return values_[index(name)]; }
  Matrix& value(const std::string& name) { return values_[index(name)]; }

  std::size_t scalar_count() const;
  bool same_layout(const ParameterSet& other) const;

  /// Zero-filled gradient buffer matching every tensor's shape.
  std::vector<Matrix> zeros_like() const;

  bool operator==(const ParameterSet& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

using Gradients = std::vector<Matrix>;

double global_norm(const Gradients& grads);
bool all_finite(const Gradients& grads);

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while its Tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, int self)>;

  /// `params` may be null when the graph has no trainable leaves.
  explicit Tape(const ParameterSet* params = nullptr) : params_(params) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var scalar(double value);
  /// Leaf bound to params[index]; repeated calls return the same node.
  Var parameter(std::size_t index);
  Var parameter(const std::string& name);

  /// Accumulates d(root)/d(param) into grads (resized on first use).
  void backward(Var root, Gradients& grads);

  const Matrix& value(int id) const;
  std::size_t node_count() const { return nodes_.size(); }

  // Operation plumbing, used by the free functions below.
  Var push(Matrix value, Backprop backprop);
  const Matrix& grad(int id) const { return grads_[id]; }
  void accumulate(int id, const Matrix& g);
  template <typename Expr>
  void accumulate_expr(int id, const Expr& g) {
    Matrix& slot = grads_[id];
    if (slot.size() == 0) {
      slot = g;
    } else {
      slot += g;
    }
  }

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;
    int param = -1;
    Backprop backprop;
  };

  const ParameterSet* params_;
  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
  std::unordered_map<std::size_t, int> param_nodes_;
};

namespace ad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
/// Elementwise quotient.
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// Multiplies every entry of `a` by the 1x1 Var `s`.
Var scale_by(Var a, Var s);

Var add_row(Var a, Var row);
Var mul_row(Var a, Var row);
Var broadcast_rows(Var row, Eigen::Index rows);

Var matmul(Var a, Var b);
Var transpose(Var a);

Var tanh(Var a);
Var silu(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var square(Var a);

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// Per-row standardization without affine parameters.
Var layer_norm_rows(Var a, double eps = 1e-5);

Var sum(Var a);
Var mean(Var a);

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(Var table, const std::vector<int>& indices);

}  // namespace ad

inline Var operator+(Var a, Var b) { return ad::add(a, b); }
inline Var operator-(Var a, Var b) { return ad::sub(a, b); }

}  // namespace melodyflow
