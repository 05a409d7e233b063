#include "quadfit/dual.hpp"
#include "quadfit/model.hpp"

#include <Eigen/Geometry>

#include <cmath>

namespace quadfit {

namespace {

constexpr double kDegenerateTol = 1e-12;

bool rot6d_degenerate(const double* r) {
  const Vec3 a1(r[0], r[1], r[2]);
  const Vec3 a2(r[3], r[4], r[5]);
  const double n1 = a1.norm();
  const double n2 = a2.norm();
  if (n1 <= kDegenerateTol || n2 <= kDegenerateTol) return true;
  return a1.cross(a2).norm() <= kDegenerateTol * n1 * n2;
}

template <typename T>
void rot6d_row(const std::array<T, 6>& r, std::array<T, 9>& R) {
  using std::sqrt;
  const T n1 = sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
  const T b1[3] = {r[0] / n1, r[1] / n1, r[2] / n1};
  const T d = b1[0] * r[3] + b1[1] * r[4] + b1[2] * r[5];
  const T u[3] = {r[3] - d * b1[0], r[4] - d * b1[1], r[5] - d * b1[2]};
  const T n2 = sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
  const T b2[3] = {u[0] / n2, u[1] / n2, u[2] / n2};
  const T b3[3] = {b1[1] * b2[2] - b1[2] * b2[1], b1[2] * b2[0] - b1[0] * b2[2],
                   b1[0] * b2[1] - b1[1] * b2[0]};
  for (int i = 0; i < 3; ++i) {
    R[3 * i + 0] = b1[i];
    R[3 * i + 1] = b2[i];
    R[3 * i + 2] = b3[i];
  }
}

template <typename T>
void axis_angle_row(const std::array<T, 3>& w, std::array<T, 9>& R) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  const T t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
  T a, b;
  if (ad::value_of(t2) < 1e-8) {
    a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
  } else {
    const T th = sqrt(t2);
    a = sin(th) / th;
    b = (1.0 - cos(th)) / t2;
  }
  // R = I + a K + b (w w^T - t2 I)
  const T k[9] = {T(0.0), -w[2], w[1], w[2], T(0.0), -w[0], -w[1], w[0], T(0.0)};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      T v = a * k[3 * i + j] + b * (w[i] * w[j]);
      if (i == j) v = v + (1.0 - b * t2);
      R[3 * i + j] = v;
    }
  }
}

template <typename T>
void log_map_row(const std::array<T, 9>& R, std::array<T, 3>& w) {
  using std::acos;
  using std::sin;
  T c = (R[0] + R[4] + R[8] - 1.0) * 0.5;
  if (ad::value_of(c) > 1.0) c = T(1.0);
  if (ad::value_of(c) < -1.0) c = T(-1.0);
  const T u = 1.0 - c;
  T f;
  if (ad::value_of(u) < 1e-4) {
    f = 0.5 + u / 6.0 + u * u / 15.0;
  } else {
    const T th = acos(c);
    f = th / (2.0 * sin(th));
  }
  w[0] = f * (R[7] - R[5]);
  w[1] = f * (R[2] - R[6]);
  w[2] = f * (R[3] - R[1]);
}

Mat3 from_row(const std::array<double, 9>& a) {
  Mat3 R;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) R(i, j) = a[3 * i + j];
  return R;
}

}  // namespace

Mat3 rot6d_to_rotmat(std::span<const double, 6> r) {
  if (rot6d_degenerate(r.data())) fail(ErrorCode::DegenerateRotation, "6D columns are zero or parallel");
  std::array<double, 6> in;
  std::copy(r.begin(), r.end(), in.begin());
  std::array<double, 9> out;
  rot6d_row(in, out);
  return from_row(out);
}

std::array<double, 6> rotmat_to_rot6d(const Mat3& R) {
  return {R(0, 0), R(1, 0), R(2, 0), R(0, 1), R(1, 1), R(2, 1)};
}

Mat3 axis_angle_to_rotmat(const Vec3& w) {
  std::array<double, 9> out;
  axis_angle_row<double>({w[0], w[1], w[2]}, out);
  return from_row(out);
}

Vec3 rotmat_to_axis_angle(const Mat3& R) {
  const double c = (R.trace() - 1.0) * 0.5;
  if (c < -0.99) {
    // Near pi the closed form loses precision; Eigen's quaternion path is stable there.
    const Eigen::AngleAxisd aa(R);
    return aa.axis() * aa.angle();
  }
  std::array<double, 9> in;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) in[3 * i + j] = R(i, j);
  std::array<double, 3> w;
  log_map_row(in, w);
  return {w[0], w[1], w[2]};
}

namespace graph {

ad::Var rot6d_to_rotmat(const ad::Var& r) {
  const Mat& v = r.value();
  require(v.cols() == 6, ErrorCode::DimensionMismatch, "rot6d input must have 6 columns");
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    if (rot6d_degenerate(v.row(i).data()))
      fail(ErrorCode::DegenerateRotation, "6D columns are zero or parallel (row " + std::to_string(i) + ")");
  }
  return ad::map_rows<6, 9>(r, [](const auto& in, auto& out) { rot6d_row(in, out); });
}

ad::Var axis_angle_to_rotmat(const ad::Var& w) {
  return ad::map_rows<3, 9>(w, [](const auto& in, auto& out) { axis_angle_row(in, out); });
}

ad::Var rotmat_to_axis_angle(const ad::Var& R) {
  return ad::map_rows<9, 3>(R, [](const auto& in, auto& out) { log_map_row(in, out); });
}

}  // namespace graph

}  // namespace quadfit
