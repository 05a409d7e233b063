#pragma once

// Small forward-mode dual numbers used to build fused row-wise tape ops: the
// row function is written once as a template, evaluated with doubles in the
// forward pass and with Dual<N> to obtain its exact Jacobian in the backward
// pass.

#include "quadfit/ad.hpp"

#include <array>
#include <cmath>

namespace quadfit::ad {

template <int N>
struct Dual {
  double v = 0.0;
  std::array<double, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit constant promotion
};

template <int N>
Dual<N> operator+(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v + b.v);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
template <int N>
Dual<N> operator-(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v - b.v);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
template <int N>
Dual<N> operator-(const Dual<N>& a) {
  Dual<N> r(-a.v);
  for (int i = 0; i < N; ++i) r.d[i] = -a.d[i];
  return r;
}
template <int N>
Dual<N> operator*(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v * b.v);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
template <int N>
Dual<N> operator/(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v / b.v);
  const double inv = 1.0 / (b.v * b.v);
  for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) * inv;
  return r;
}
template <int N> Dual<N> operator+(const Dual<N>& a, double b) { return a + Dual<N>(b); }
template <int N> Dual<N> operator+(double a, const Dual<N>& b) { return Dual<N>(a) + b; }
template <int N> Dual<N> operator-(const Dual<N>& a, double b) { return a - Dual<N>(b); }
template <int N> Dual<N> operator-(double a, const Dual<N>& b) { return Dual<N>(a) - b; }
template <int N> Dual<N> operator*(const Dual<N>& a, double b) {
  Dual<N> r(a.v * b);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b;
  return r;
}
template <int N> Dual<N> operator*(double a, const Dual<N>& b) { return b * a; }
template <int N> Dual<N> operator/(const Dual<N>& a, double b) { return a * (1.0 / b); }
template <int N> Dual<N> operator/(double a, const Dual<N>& b) { return Dual<N>(a) / b; }

template <int N>
Dual<N> chain(const Dual<N>& a, double value, double deriv) {
  Dual<N> r(value);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * deriv;
  return r;
}

template <int N> Dual<N> sqrt(const Dual<N>& a) {
  const double s = std::sqrt(a.v);
  return chain(a, s, s > 0.0 ? 0.5 / s : 0.0);
}
template <int N> Dual<N> sin(const Dual<N>& a) { return chain(a, std::sin(a.v), std::cos(a.v)); }
template <int N> Dual<N> cos(const Dual<N>& a) { return chain(a, std::cos(a.v), -std::sin(a.v)); }
template <int N> Dual<N> exp(const Dual<N>& a) {
  const double e = std::exp(a.v);
  return chain(a, e, e);
}
template <int N> Dual<N> acos(const Dual<N>& a) {
  return chain(a, std::acos(a.v), -1.0 / std::sqrt(1.0 - a.v * a.v));
}

template <typename T> double value_of(const T& x) {
  if constexpr (std::is_same_v<T, double>) return x; else return x.v;
}

/// Applies fn row-by-row to an (n x NIn) Var producing an (n x NOut) Var.
/// fn must be callable as fn(const std::array<T, NIn>&, std::array<T, NOut>&)
/// for T = double and T = Dual<NIn>.
template <int NIn, int NOut, typename Fn>
Var map_rows(const Var& x, Fn fn) {
  const Mat& xv = x.value();
  require(xv.cols() == NIn, ErrorCode::DimensionMismatch, "map_rows: input column count");
  const Eigen::Index n = xv.rows();
  Mat out(n, NOut);
  for (Eigen::Index r = 0; r < n; ++r) {
    std::array<double, NIn> in;
    std::array<double, NOut> o;
    for (int i = 0; i < NIn; ++i) in[i] = xv(r, i);
    fn(in, o);
    for (int j = 0; j < NOut; ++j) out(r, j) = o[j];
  }
  return x.tape().record(std::move(out), {x}, [x, fn, n](Tape& t, const Mat& g) {
    const Mat& xv = x.value();
    Mat gx = Mat::Zero(n, NIn);
    for (Eigen::Index r = 0; r < n; ++r) {
      std::array<Dual<NIn>, NIn> in;
      std::array<Dual<NIn>, NOut> o;
      for (int i = 0; i < NIn; ++i) {
        in[i] = Dual<NIn>(xv(r, i));
        in[i].d[i] = 1.0;
      }
      fn(in, o);
      for (int j = 0; j < NOut; ++j) {
        const double gj = g(r, j);
        if (gj == 0.0) continue;
        for (int i = 0; i < NIn; ++i) gx(r, i) += gj * o[j].d[i];
      }
    }
    t.accumulate(x, gx);
  });
}

}  // namespace quadfit::ad
