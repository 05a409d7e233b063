#pragma once

#include "quadfit/ad.hpp"
#include "quadfit/model.hpp"

#include <string>
#include <vector>

namespace quadfit {

/// Two-hidden-layer tanh MLP: D -> H -> H -> D.
struct CouplingNet {
  Mat w1, b1, w2, b2, w3, b3;
};

struct CouplingLayer {
  Mat mask;  // 1 x D, 1 = passed through and conditioned on
  CouplingNet scale;
  CouplingNet shift;
};

/// Real-NVP pose prior. The input is first standardized by a fixed affine
/// map (identity until fitted to data), then passed through affine couplings.
/// Immutable once trained; all evaluation methods are const and thread-safe.
struct FlowPrior {
  int dim = 0;
  int hidden = 0;
  double scale_clamp = 3.0;  // log-scales are soft-clamped to (-c, c)
  Mat loc;        // 1 x D
  Mat log_scale;  // 1 x D
  std::vector<CouplingLayer> layers;

  /// Identity flow with L layers; scale and shift output layers are zero.
  static FlowPrior identity(int dim, int num_layers, int hidden, std::uint64_t seed);

  int num_layers() const { return static_cast<int>(layers.size()); }
  /// Every parameter tensor in a fixed order (normalization first).
  std::vector<Mat*> parameters();
  std::vector<const Mat*> parameters() const;
  /// Number of tensors excluded from training at the front of parameters().
  static constexpr int kFixedTensors = 2;

  /// Rows of theta are pose vectors. Returns latents; logdet gets one entry per row.
  Mat forward(const Mat& theta, Vec* logdet = nullptr) const;
  Mat inverse(const Mat& y) const;
  /// 1/2 |y|^2 - log|det J| per row.
  Vec nll(const Mat& theta) const;
  /// n poses decoded from y ~ N(0, I).
  Mat sample(int n, Rng& rng) const;
};

/// Flow evaluation on a tape. `params` follow FlowPrior::parameters() order.
namespace graph {
std::vector<ad::Var> bind_flow(ad::Tape& tape, const FlowPrior& flow, bool trainable);
ad::Var flow_forward(const FlowPrior& flow, const std::vector<ad::Var>& params, const ad::Var& theta,
                     ad::Var* logdet);
ad::Var flow_inverse(const FlowPrior& flow, const std::vector<ad::Var>& params, const ad::Var& y);
}  // namespace graph

/// Latent prior used when the pose is parameterized by y: 1/2 y^T y.
double latent_prior(const Vec& y);

struct FlowTrainConfig {
  int layers = 4;
  int hidden = 64;
  int epochs = 60;
  int batch = 256;
  double lr = 1e-3;
  double scale_clamp = 3.0;
  /// Standardize inputs with the data mean and std before the couplings.
  bool fit_normalization = true;
  std::uint64_t seed = 0;
};

struct FlowTrainResult {
  FlowPrior flow;
  double initial_nll = 0.0;
  std::vector<double> epoch_nll;  // full-dataset mean NLL after each epoch
};

/// Adam on mean NLL. Throws Divergence on a non-finite loss.
FlowTrainResult train_flow(const Mat& data, const FlowTrainConfig& config);

void save_flow(const std::string& dir, const FlowPrior& flow);
FlowPrior load_flow(const std::string& dir);

/// Flexion-dominant walking, trotting, standing and jumping poses for the toy
/// skeleton, as n x 3(J-1) axis-angle vectors.
Mat sample_gait_poses(int n, std::uint64_t seed);

/// Pose vectors whose joint rotations are uniform over SO(3).
Mat sample_uniform_rotation_poses(int n, int num_joints, std::uint64_t seed);

// -- analytic priors -----------------------------------------------------------

struct GaussianShapePrior {
  Vec mu;
  Mat sigma;
  Mat sigma_inv;

  /// Validates symmetry and positive-definiteness and stores the inverse.
  static GaussianShapePrior from_covariance(const Vec& mu, const Mat& sigma);
  /// Diagonal prior from the space's eigenvalues, floored relative to the largest.
  static GaussianShapePrior from_space(const ShapeSpace& space, double floor = 1e-8);
};

double shape_prior(const Vec& beta, const GaussianShapePrior& prior);
double scale_prior(const Vec& kappa);
double camera_prior(double f_pred, double f_target);
/// Sum over leg joints of the squared abduction component of each local rotation.
double side_leg_penalty(const Skeleton& skeleton, const Mat& joint_rot6d);

namespace graph {
ad::Var shape_prior(const ad::Var& beta, const GaussianShapePrior& prior);
ad::Var scale_prior(const ad::Var& kappa);
ad::Var camera_prior(const ad::Var& f_pred, double f_target);
/// Same penalty on (J-1) x 3 axis-angle rotations, which are their own log map.
ad::Var side_leg_penalty(const Skeleton& skeleton, const ad::Var& joint_axis_angle);
}  // namespace graph

}  // namespace quadfit
