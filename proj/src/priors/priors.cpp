#include "quadfit/priors.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Geometry>

#include <cmath>
#include <numbers>

namespace quadfit {

GaussianShapePrior GaussianShapePrior::from_covariance(const Vec& mu, const Mat& sigma) {
  require(sigma.rows() == mu.size() && sigma.cols() == mu.size(), ErrorCode::DimensionMismatch,
          "shape prior: covariance must be K x K");
  require((sigma - sigma.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, sigma.cwiseAbs().maxCoeff()),
          ErrorCode::InvalidArgument, "shape prior: covariance is not symmetric");
  const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  require(llt.info() == Eigen::Success, ErrorCode::InvalidArgument,
          "shape prior: covariance is not positive definite");
  GaussianShapePrior p;
  p.mu = mu;
  p.sigma = sigma;
  Mat inv = llt.solve(Eigen::MatrixXd::Identity(mu.size(), mu.size()));
  p.sigma_inv = 0.5 * (inv + inv.transpose());
  return p;
}

GaussianShapePrior GaussianShapePrior::from_space(const ShapeSpace& space, double floor) {
  const Vec& ev = space.eigenvalues;
  require(ev.size() > 0, ErrorCode::InvalidArgument, "shape prior: empty shape space");
  const double lo = floor * std::max(ev.maxCoeff(), 1e-300);
  const Vec diag = ev.cwiseMax(lo);
  const Vec mu = space.mean_coeffs.size() == ev.size() ? space.mean_coeffs : Vec::Zero(ev.size());
  return from_covariance(mu, Mat(diag.asDiagonal()));
}

double shape_prior(const Vec& beta, const GaussianShapePrior& prior) {
  require(beta.size() == prior.mu.size(), ErrorCode::DimensionMismatch, "shape prior: beta has wrong length");
  const Vec d = beta - prior.mu;
  return d.dot(prior.sigma_inv * d);
}

double scale_prior(const Vec& kappa) {
  require(kappa.size() == kNumScaleGroups, ErrorCode::DimensionMismatch,
          "scale prior: kappa must have " + std::to_string(kNumScaleGroups) + " entries");
  return kappa.squaredNorm();
}

double camera_prior(double f_pred, double f_target) {
  const double d = f_pred - f_target;
  return d * d;
}

double side_leg_penalty(const Skeleton& skeleton, const Mat& joint_rot6d) {
  require(joint_rot6d.rows() == skeleton.num_joints() - 1 && joint_rot6d.cols() == 6,
          ErrorCode::DimensionMismatch, "side_leg_penalty: expects (J-1) x 6 rotations");
  double total = 0.0;
  for (const auto& leg : skeleton.leg_joint_ids) {
    for (int j : leg) {
      std::array<double, 6> r;
      for (int k = 0; k < 6; ++k) r[k] = joint_rot6d(j - 1, k);
      const Vec3 w = rotmat_to_axis_angle(rot6d_to_rotmat(r));
      const double a = w.dot(skeleton.abduction_axis);
      total += a * a;
    }
  }
  return total;
}

namespace graph {

ad::Var shape_prior(const ad::Var& beta, const GaussianShapePrior& prior) {
  require(beta.rows() == 1 && beta.cols() == prior.mu.size(), ErrorCode::DimensionMismatch,
          "shape prior: beta must be 1 x K");
  ad::Tape& t = beta.tape();
  ad::Var d = beta - t.constant(prior.mu.transpose());
  return ad::sum(ad::matmul(d, t.constant(prior.sigma_inv)) * d);
}

ad::Var scale_prior(const ad::Var& kappa) {
  require(kappa.rows() * kappa.cols() == kNumScaleGroups, ErrorCode::DimensionMismatch,
          "scale prior: kappa must have " + std::to_string(kNumScaleGroups) + " entries");
  return ad::sum(ad::square(kappa));
}

ad::Var camera_prior(const ad::Var& f_pred, double f_target) { return ad::square(f_pred - f_target); }

ad::Var side_leg_penalty(const Skeleton& skeleton, const ad::Var& joint_axis_angle) {
  require(joint_axis_angle.rows() == skeleton.num_joints() - 1 && joint_axis_angle.cols() == 3,
          ErrorCode::DimensionMismatch, "side_leg_penalty: expects (J-1) x 3 axis-angle rows");
  std::vector<int> rows;
  for (const auto& leg : skeleton.leg_joint_ids)
    for (int j : leg) rows.push_back(j - 1);
  ad::Tape& t = joint_axis_angle.tape();
  ad::Var comp = ad::matmul(ad::gather_rows(joint_axis_angle, rows), t.constant(skeleton.abduction_axis));
  return ad::sum(ad::square(comp));
}

}  // namespace graph

// -- pose corpora ------------------------------------------------------------------

namespace {

// Toy skeleton joint ids used by the gait sampler.
enum : int {
  kSpine1 = 1, kSpine2, kSpine3, kNeck, kHead, kMuzzle, kEarL, kEarLTip, kEarR, kEarRTip,
  kFlUpper, kFlLower, kFlPaw, kFrUpper, kFrLower, kFrPaw,
  kRlUpper, kRlLower, kRlPaw, kRrUpper, kRrLower, kRrPaw, kTail1, kTail2, kTail3, kJointCount
};

enum class Gait { Stand, Walk, Trot, Jump };

}  // namespace

Mat sample_gait_poses(int n, std::uint64_t seed) {
  require(n >= 0, ErrorCode::InvalidArgument, "sample_gait_poses: negative count");
  constexpr double pi = std::numbers::pi;
  Mat out = Mat::Zero(n, 3 * (kJointCount - 1));
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    Mat w = Mat::Zero(kJointCount - 1, 3);
    auto at = [&](int joint) { return w.row(joint - 1); };

    const double u = rng.uniform();
    const Gait gait = u < 0.25 ? Gait::Stand : u < 0.55 ? Gait::Walk : u < 0.8 ? Gait::Trot : Gait::Jump;
    const double phase = rng.uniform(0.0, 2.0 * pi);
    double amp = 0.0;
    std::array<double, 4> offset{};  // fl, fr, rl, rr
    switch (gait) {
      case Gait::Stand:
        amp = rng.uniform(0.0, 0.1);
        for (double& o : offset) o = rng.uniform(0.0, 2.0 * pi);
        break;
      case Gait::Walk:
        amp = rng.uniform(0.2, 0.45);
        offset = {0.5 * pi, 1.5 * pi, 0.0, pi};
        break;
      case Gait::Trot:
        amp = rng.uniform(0.3, 0.6);
        offset = {0.0, pi, pi, 0.0};
        break;
      case Gait::Jump:
        amp = rng.uniform(0.4, 0.8);
        offset = {0.0, 0.2, pi, pi + 0.2};
        break;
    }

    const int uppers[4] = {kFlUpper, kFrUpper, kRlUpper, kRrUpper};
    for (int leg = 0; leg < 4; ++leg) {
      const double a = phase + offset[leg];
      const double bend = (leg < 2 ? 1.0 : -1.0) * 0.8 * amp * (0.5 + 0.5 * std::cos(a));
      at(uppers[leg])(2) = amp * std::sin(a);
      at(uppers[leg] + 1)(2) = bend;
      at(uppers[leg] + 2)(2) = -0.5 * bend;
    }
    const double arch = gait == Gait::Jump ? 0.3 * amp * std::sin(phase) : 0.15 * amp * std::sin(2.0 * phase);
    for (int j : {kSpine1, kSpine2, kSpine3}) at(j)(2) = arch / 3.0;

    at(kNeck)(2) = 0.25 * rng.normal();
    at(kNeck)(1) = 0.15 * rng.normal();
    at(kHead)(2) = 0.15 * rng.normal();
    at(kHead)(1) = 0.1 * rng.normal();
    for (int j : {kEarL, kEarR}) {
      at(j)(2) = 0.2 * rng.normal();
      at(j)(0) = 0.1 * rng.normal();
    }
    at(kTail1)(2) = rng.uniform(-0.3, 0.6);
    at(kTail1)(1) = 0.3 * rng.normal();
    const double wag = 0.3 * std::sin(2.0 * phase);
    for (int j : {kTail2, kTail3}) {
      at(j)(1) = wag + 0.1 * rng.normal();
      at(j)(2) = 0.1 * rng.normal();
    }

    // small jitter everywhere, slightly more sideways play in the legs
    for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] += 0.02 * rng.normal();
    for (int leg = 0; leg < 4; ++leg)
      for (int k = 0; k < 3; ++k) at(uppers[leg] + k)(0) += 0.03 * rng.normal();
    out.row(i) = Eigen::Map<const Mat>(w.data(), 1, w.size());
  }
  return out;
}

Mat sample_uniform_rotation_poses(int n, int num_joints, std::uint64_t seed) {
  require(n >= 0 && num_joints >= 2, ErrorCode::InvalidArgument, "uniform poses: bad sizes");
  Rng rng(seed);
  Mat out(n, 3 * (num_joints - 1));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < num_joints - 1; ++j) {
      // normalized 4D Gaussian is a uniform unit quaternion
      double c[4];
      for (double& v : c) v = rng.normal();
      Eigen::Quaterniond q(c[0], c[1], c[2], c[3]);
      q.normalize();
      const Vec3 w = rotmat_to_axis_angle(q.toRotationMatrix());
      out.block(i, 3 * j, 1, 3) = w.transpose();
    }
  }
  return out;
}

}  // namespace quadfit
