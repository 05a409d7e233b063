#include "quadfit/ad.hpp"

#include <algorithm>
#include <cmath>

namespace quadfit::ad {

double Var::item() const {
  const Mat& v = value();
  require(v.rows() == 1 && v.cols() == 1, ErrorCode::DimensionMismatch, "item() on non-scalar");
  return v(0, 0);
}

Var Tape::variable(Mat value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Mat value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Mat value, std::span<const Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& in : inputs) {
    require(in.tape_ == this, ErrorCode::InvalidArgument, "input belongs to a different tape");
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(const Var& v, const Mat& g) {
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return;
  require(g.rows() == n.value.rows() && g.cols() == n.value.cols(),
          ErrorCode::DimensionMismatch, "gradient shape does not match node value");
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(const Var& output) {
  require(output.tape_ == this, ErrorCode::InvalidArgument, "output belongs to a different tape");
  const Mat& out = nodes_[output.id_].value;
  require(out.rows() == 1 && out.cols() == 1, ErrorCode::DimensionMismatch,
          "backward requires a scalar output");
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  if (!nodes_[output.id_].requires_grad) return;
  nodes_[output.id_].grad = Mat::Ones(1, 1);
  nodes_[output.id_].has_grad = true;
  for (int id = output.id_; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.backward) continue;
    // The closure may append to other nodes' grads but never to nodes_ itself,
    // so holding a reference to this node's grad is safe.
    n.backward(*this, n.grad);
  }
}

Mat Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id_];
  if (!n.has_grad) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

double grad_check(const VarFunction& f, const Mat& x, double eps) {
  require(eps > 0.0, ErrorCode::InvalidArgument, "grad_check: eps must be positive");
  const Mat g_ad = gradient(f, x);
  double worst = 0.0;
  Mat probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double x0 = probe.data()[i];
    probe.data()[i] = x0 + eps;
    double fp, fm;
    {
      Tape t;
      fp = f(t, t.constant(probe)).item();
    }
    probe.data()[i] = x0 - eps;
    {
      Tape t;
      fm = f(t, t.constant(probe)).item();
    }
    probe.data()[i] = x0;
    const double g_fd = (fp - fm) / (2.0 * eps);
    const double a = g_ad.data()[i];
    const double denom = std::max({1.0, std::abs(a), std::abs(g_fd)});
    worst = std::max(worst, std::abs(a - g_fd) / denom);
  }
  return worst;
}

Mat gradient(const VarFunction& f, const Mat& x) {
  Tape t;
  Var xv = t.variable(x);
  Var y = f(t, xv);
  t.backward(y);
  return t.grad(xv);
}

}  // namespace quadfit::ad
