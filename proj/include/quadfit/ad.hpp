#pragma once

// Reverse-mode automatic differentiation over dense 2-D tensors.
//
// A Tape records one evaluation. Nodes are appended in creation order, which
// is a topological order, so backward() simply walks the node list in reverse.
// Tapes are single-threaded; run independent evaluations on separate tapes.

#include "quadfit/core.hpp"

#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace quadfit::ad {

class Tape;

class Var {
 public:
  Var() = default;

  const Mat& value() const;
  double item() const;  // value of a 1x1 Var
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Called during backward with the gradient flowing into the node.
using BackwardFn = std::function<void(Tape&, const Mat& grad_out)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that receives a gradient.
  Var variable(Mat value);
  /// Leaf that never receives a gradient.
  Var constant(Mat value);
  Var scalar(double v) { return constant(Mat::Constant(1, 1, v)); }

  /// Appends an operation node. The node requires a gradient iff any input does.
  Var record(Mat value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Mat value, std::span<const Var> inputs, BackwardFn backward);

  /// Reverse pass from a 1x1 output; gradients accumulate into every node.
  void backward(const Var& output);

  /// Gradient of the last backward() output with respect to v (zeros if v is off-path).
  Mat grad(const Var& v) const;
  bool requires_grad(const Var& v) const { return nodes_[v.id_].requires_grad; }
  void accumulate(const Var& v, const Mat& g);
  const Mat& value(int id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape_->value(id_); }

// -- elementwise binary ops with 2-D broadcasting of unit dimensions --------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);  // elementwise, not matmul
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator+(const Var& a, double s);
Var operator-(const Var& a, double s);
Var operator*(const Var& a, double s);
Var operator*(double s, const Var& a);
Var operator/(const Var& a, double s);

// -- unary ----------------------------------------------------------------
Var exp(const Var& a);
Var log(const Var& a);  // errors on non-positive input
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var softplus(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);  // errors on negative input; gradient 0 at 0
Var pow(const Var& a, double p);
/// max(a, c) elementwise; gradient 0 where a <= c (kink convention).
Var clamp_min(const Var& a, double c);
/// c * tanh(a / c): smooth symmetric saturation.
Var soft_clamp(const Var& a, double c);

// -- linear algebra and reductions ---------------------------------------
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var sum(const Var& a);       // -> 1x1
Var mean(const Var& a);      // -> 1x1
Var sum_rows(const Var& a);  // sum over rows -> 1 x cols
Var sum_cols(const Var& a);  // sum over columns -> rows x 1
Var row_norms(const Var& a); // L2 norm per row -> rows x 1; gradient 0 at 0
Var norm(const Var& a);      // Frobenius norm -> 1x1
Var dot_rows(const Var& a, const Var& b);  // per-row inner product -> rows x 1
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);

// -- shape manipulation -----------------------------------------------------
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);  // row-major order
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::initializer_list<Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var gather_rows(const Var& a, std::span<const int> index);
Var gather_cols(const Var& a, std::span<const int> index);
Var element(const Var& a, Eigen::Index r, Eigen::Index c);  // -> 1x1

// -- numeric checking -------------------------------------------------------
using VarFunction = std::function<Var(Tape&, const Var&)>;

/// Max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|), using
/// central differences with step eps.
double grad_check(const VarFunction& f, const Mat& x, double eps = 1e-6);

/// Gradient of f at x by autodiff (convenience for tests and checks).
Mat gradient(const VarFunction& f, const Mat& x);

}  // namespace quadfit::ad
