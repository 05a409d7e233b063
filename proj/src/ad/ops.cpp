#include "quadfit/ad.hpp"

#include <algorithm>
#include <cmath>

namespace quadfit::ad {

namespace {

struct Broadcast {
  Eigen::Index rows, cols;
};

Broadcast broadcast_shape(const Mat& a, const Mat& b, const char* op) {
  auto dim = [&](Eigen::Index x, Eigen::Index y) -> Eigen::Index {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    fail(ErrorCode::DimensionMismatch,
         std::string(op) + ": incompatible shapes " + std::to_string(a.rows()) + "x" +
             std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
             std::to_string(b.cols()));
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

Mat expand(const Mat& a, Broadcast s) {
  if (a.rows() == s.rows && a.cols() == s.cols) return a;
  return a.replicate(s.rows / a.rows(), s.cols / a.cols());
}

// Sums a broadcast gradient back down to the operand's shape.
Mat reduce_to(const Mat& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Mat r = g;
  if (rows == 1 && r.rows() != 1) r = r.colwise().sum().eval();
  if (cols == 1 && r.cols() != 1) r = r.rowwise().sum().eval();
  return r;
}

template <typename Fwd, typename GradA, typename GradB>
Var binary(const Var& a, const Var& b, const char* name, Fwd fwd, GradA ga, GradB gb) {
  require(a.valid() && b.valid() && &a.tape() == &b.tape(), ErrorCode::InvalidArgument,
          std::string(name) + ": operands must share a tape");
  const Broadcast s = broadcast_shape(a.value(), b.value(), name);
  const Mat av = expand(a.value(), s);
  const Mat bv = expand(b.value(), s);
  Mat out = fwd(av, bv);
  return a.tape().record(std::move(out), {a, b}, [a, b, s, ga, gb](Tape& t, const Mat& g) {
    if (t.requires_grad(a) || t.requires_grad(b)) {
      const Mat av = expand(a.value(), s);
      const Mat bv = expand(b.value(), s);
      if (t.requires_grad(a)) t.accumulate(a, reduce_to(ga(g, av, bv), a.rows(), a.cols()));
      if (t.requires_grad(b)) t.accumulate(b, reduce_to(gb(g, av, bv), b.rows(), b.cols()));
    }
  });
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  Mat out = fwd(a.value());
  return a.tape().record(std::move(out), {a}, [a, deriv](Tape& t, const Mat& g) {
    t.accumulate(a, deriv(g, a.value()));
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](const Mat& x, const Mat& y) -> Mat { return x + y; },
      [](const Mat& g, const Mat&, const Mat&) -> Mat { return g; },
      [](const Mat& g, const Mat&, const Mat&) -> Mat { return g; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](const Mat& x, const Mat& y) -> Mat { return x - y; },
      [](const Mat& g, const Mat&, const Mat&) -> Mat { return g; },
      [](const Mat& g, const Mat&, const Mat&) -> Mat { return -g; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul", [](const Mat& x, const Mat& y) -> Mat { return x.cwiseProduct(y); },
      [](const Mat& g, const Mat&, const Mat& y) -> Mat { return g.cwiseProduct(y); },
      [](const Mat& g, const Mat& x, const Mat&) -> Mat { return g.cwiseProduct(x); });
}

Var div(const Var& a, const Var& b) {
  require((b.value().array() != 0.0).all(), ErrorCode::InvalidArgument, "div: division by zero");
  return binary(
      a, b, "div", [](const Mat& x, const Mat& y) -> Mat { return x.cwiseQuotient(y); },
      [](const Mat& g, const Mat&, const Mat& y) -> Mat { return g.cwiseQuotient(y); },
      [](const Mat& g, const Mat& x, const Mat& y) -> Mat {
        return (-g.array() * x.array() / (y.array() * y.array())).matrix();
      });
}

Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }
Var operator*(const Var& a, const Var& b) { return mul(a, b); }
Var operator/(const Var& a, const Var& b) { return div(a, b); }

Var operator-(const Var& a) {
  return unary(
      a, [](const Mat& x) -> Mat { return -x; }, [](const Mat& g, const Mat&) -> Mat { return -g; });
}

Var operator+(const Var& a, double s) {
  return unary(
      a, [s](const Mat& x) -> Mat { return (x.array() + s).matrix(); },
      [](const Mat& g, const Mat&) -> Mat { return g; });
}

Var operator-(const Var& a, double s) { return a + (-s); }

Var operator*(const Var& a, double s) {
  return unary(
      a, [s](const Mat& x) -> Mat { return x * s; },
      [s](const Mat& g, const Mat&) -> Mat { return g * s; });
}

Var operator*(double s, const Var& a) { return a * s; }
Var operator/(const Var& a, double s) {
  require(s != 0.0, ErrorCode::InvalidArgument, "division by zero");
  return a * (1.0 / s);
}

Var exp(const Var& a) {
  Mat out = a.value().array().exp().matrix();
  return a.tape().record(Mat(out), {a}, [a, out](Tape& t, const Mat& g) {
    t.accumulate(a, g.cwiseProduct(out));
  });
}

Var log(const Var& a) {
  require((a.value().array() > 0.0).all(), ErrorCode::InvalidArgument,
          "log of non-positive value");
  return unary(
      a, [](const Mat& x) -> Mat { return x.array().log().matrix(); },
      [](const Mat& g, const Mat& x) -> Mat { return g.cwiseQuotient(x); });
}

Var tanh(const Var& a) {
  Mat out = a.value().array().tanh().matrix();
  return a.tape().record(Mat(out), {a}, [a, out](Tape& t, const Mat& g) {
    t.accumulate(a, (g.array() * (1.0 - out.array().square())).matrix());
  });
}

Var sigmoid(const Var& a) {
  Mat out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return a.tape().record(Mat(out), {a}, [a, out](Tape& t, const Mat& g) {
    t.accumulate(a, (g.array() * out.array() * (1.0 - out.array())).matrix());
  });
}

Var relu(const Var& a) { return clamp_min(a, 0.0); }

Var softplus(const Var& a) {
  return unary(
      a,
      [](const Mat& x) -> Mat {
        return x.unaryExpr([](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); });
      },
      [](const Mat& g, const Mat& x) -> Mat {
        return g.cwiseProduct(x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); }));
      });
}

Var square(const Var& a) {
  return unary(
      a, [](const Mat& x) -> Mat { return x.array().square().matrix(); },
      [](const Mat& g, const Mat& x) -> Mat { return 2.0 * g.cwiseProduct(x); });
}

Var sqrt(const Var& a) {
  require((a.value().array() >= 0.0).all(), ErrorCode::InvalidArgument, "sqrt of negative value");
  Mat out = a.value().array().sqrt().matrix();
  return a.tape().record(Mat(out), {a}, [a, out](Tape& t, const Mat& g) {
    t.accumulate(a, g.binaryExpr(out, [](double gv, double s) { return s > 0.0 ? 0.5 * gv / s : 0.0; }));
  });
}

Var pow(const Var& a, double p) {
  return unary(
      a, [p](const Mat& x) -> Mat { return x.array().pow(p).matrix(); },
      [p](const Mat& g, const Mat& x) -> Mat {
        return (g.array() * p * x.array().pow(p - 1.0)).matrix();
      });
}

Var clamp_min(const Var& a, double c) {
  return unary(
      a, [c](const Mat& x) -> Mat { return x.cwiseMax(c); },
      [c](const Mat& g, const Mat& x) -> Mat {
        return g.binaryExpr(x, [c](double gv, double xv) { return xv > c ? gv : 0.0; });
      });
}

Var soft_clamp(const Var& a, double c) {
  require(c > 0.0, ErrorCode::InvalidArgument, "soft_clamp: c must be positive");
  Mat th = (a.value().array() / c).tanh().matrix();
  return a.tape().record(c * th, {a}, [a, th](Tape& t, const Mat& g) {
    t.accumulate(a, (g.array() * (1.0 - th.array().square())).matrix());
  });
}

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), ErrorCode::DimensionMismatch,
          "matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " by " +
              std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Mat out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var transpose(const Var& a) {
  Mat out = a.value().transpose();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate(a, g.transpose());
  });
}

Var sum(const Var& a) {
  Mat out = Mat::Constant(1, 1, a.value().sum());
  const auto r = a.rows(), c = a.cols();
  return a.tape().record(std::move(out), {a}, [a, r, c](Tape& t, const Mat& g) {
    t.accumulate(a, Mat::Constant(r, c, g(0, 0)));
  });
}

Var mean(const Var& a) {
  require(a.value().size() > 0, ErrorCode::InvalidArgument, "mean of empty tensor");
  return sum(a) * (1.0 / static_cast<double>(a.value().size()));
}

Var sum_rows(const Var& a) {
  Mat out = a.value().colwise().sum();
  const auto r = a.rows();
  return a.tape().record(std::move(out), {a}, [a, r](Tape& t, const Mat& g) {
    t.accumulate(a, g.replicate(r, 1));
  });
}

Var sum_cols(const Var& a) {
  Mat out = a.value().rowwise().sum();
  const auto c = a.cols();
  return a.tape().record(std::move(out), {a}, [a, c](Tape& t, const Mat& g) {
    t.accumulate(a, g.replicate(1, c));
  });
}

Var row_norms(const Var& a) {
  Mat out = a.value().rowwise().norm();
  return a.tape().record(Mat(out), {a}, [a, out](Tape& t, const Mat& g) {
    const Mat& x = a.value();
    Mat gx(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double n = out(r, 0);
      gx.row(r) = n > 0.0 ? (x.row(r) * (g(r, 0) / n)).eval() : Mat::Zero(1, x.cols());
    }
    t.accumulate(a, gx);
  });
}

Var norm(const Var& a) {
  const double n = a.value().norm();
  return a.tape().record(Mat::Constant(1, 1, n), {a}, [a, n](Tape& t, const Mat& g) {
    if (n > 0.0) t.accumulate(a, a.value() * (g(0, 0) / n));
  });
}

Var dot_rows(const Var& a, const Var& b) { return sum_cols(mul(a, b)); }

Var softmax_rows(const Var& a) {
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return a.tape().record(Mat(out), {a}, [a, out](Tape& t, const Mat& g) {
    Mat gx(out.rows(), out.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const double s = g.row(r).dot(out.row(r));
      gx.row(r) = (out.row(r).array() * (g.row(r).array() - s)).matrix();
    }
    t.accumulate(a, gx);
  });
}

Var log_softmax_rows(const Var& a) {
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  Mat soft(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = (x.row(r).array() - lse).matrix();
    soft.row(r) = out.row(r).array().exp().matrix();
  }
  return a.tape().record(std::move(out), {a}, [a, soft](Tape& t, const Mat& g) {
    Mat gx(soft.rows(), soft.cols());
    for (Eigen::Index r = 0; r < soft.rows(); ++r) {
      gx.row(r) = g.row(r) - soft.row(r) * g.row(r).sum();
    }
    t.accumulate(a, gx);
  });
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  require(rows * cols == a.value().size(), ErrorCode::DimensionMismatch, "reshape: size mismatch");
  Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  const auto r0 = a.rows(), c0 = a.cols();
  return a.tape().record(std::move(out), {a}, [a, r0, c0](Tape& t, const Mat& g) {
    t.accumulate(a, Eigen::Map<const Mat>(g.data(), r0, c0));
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), ErrorCode::InvalidArgument, "concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const Var& p : parts) {
    require(p.cols() == cols, ErrorCode::DimensionMismatch, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), parts, [inputs](Tape& t, const Mat& g) {
    Eigen::Index at = 0;
    for (const Var& p : inputs) {
      const auto n = p.rows();
      if (t.requires_grad(p)) t.accumulate(p, g.middleRows(at, n));
      at += n;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), ErrorCode::InvalidArgument, "concat_cols: no inputs");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  for (const Var& p : parts) {
    require(p.rows() == rows, ErrorCode::DimensionMismatch, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), parts, [inputs](Tape& t, const Mat& g) {
    Eigen::Index at = 0;
    for (const Var& p : inputs) {
      const auto n = p.cols();
      if (t.requires_grad(p)) t.accumulate(p, g.middleCols(at, n));
      at += n;
    }
  });
}

Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var gather_rows(const Var& a, std::span<const int> index) {
  const Mat& x = a.value();
  Mat out(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && index[i] < x.rows(), ErrorCode::InvalidArgument,
            "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.row(index[i]);
  }
  std::vector<int> idx(index.begin(), index.end());
  return a.tape().record(std::move(out), {a}, [a, idx](Tape& t, const Mat& g) {
    Mat gx = Mat::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) gx.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(a, gx);
  });
}

Var gather_cols(const Var& a, std::span<const int> index) {
  const Mat& x = a.value();
  Mat out(x.rows(), static_cast<Eigen::Index>(index.size()));
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && index[i] < x.cols(), ErrorCode::InvalidArgument,
            "gather_cols: index out of range");
    out.col(static_cast<Eigen::Index>(i)) = x.col(index[i]);
  }
  std::vector<int> idx(index.begin(), index.end());
  return a.tape().record(std::move(out), {a}, [a, idx](Tape& t, const Mat& g) {
    Mat gx = Mat::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) gx.col(idx[i]) += g.col(static_cast<Eigen::Index>(i));
    t.accumulate(a, gx);
  });
}

Var element(const Var& a, Eigen::Index r, Eigen::Index c) {
  require(r >= 0 && r < a.rows() && c >= 0 && c < a.cols(), ErrorCode::InvalidArgument,
          "element: index out of range");
  return a.tape().record(Mat::Constant(1, 1, a.value()(r, c)), {a}, [a, r, c](Tape& t, const Mat& g) {
    Mat gx = Mat::Zero(a.rows(), a.cols());
    gx(r, c) = g(0, 0);
    t.accumulate(a, gx);
  });
}

}  // namespace quadfit::ad
