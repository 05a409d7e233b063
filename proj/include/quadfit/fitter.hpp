#pragma once

#include "quadfit/losses.hpp"
#include "quadfit/optim.hpp"
#include "quadfit/priors.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace quadfit {

/// Shared immutable priors used by fitting and training.
struct Priors {
  FlowPrior flow;
  GaussianShapePrior shape;
};

void save_priors(const std::string& dir, const Priors& priors);
Priors load_priors(const std::string& dir);

/// Root rotation of a body seen from the side, facing +x in the image at heading
/// `yaw` (radians about the body's vertical axis). Camera y points down.
Mat3 camera_facing_root(double yaw);

struct FitState {
  ShapeParams shape;
  PoseState pose;
  double focal = 600.0;

  /// Joint rotations decoded from pose.latent into pose.joint_rot6d.
  void decode(const FlowPrior& flow);
};

/// Leaves optimized in a stage.
enum Leaf : unsigned {
  kTranslation = 1u << 0,
  kRoot = 1u << 1,
  kFocal = 1u << 2,
  kLatent = 1u << 3,
  kBeta = 1u << 4,
  kKappa = 1u << 5,
};

struct FitStage {
  unsigned free = 0;
  int iterations = 0;
  double lr = 0.0;
  bool silhouette = false;  // whether the gated silhouette term may contribute
};

struct FitConfig {
  std::vector<FitStage> stages;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// The silhouette stages run in equal phases at sigma, sigma * factor, ...
  double sigma = 1e-4;
  double sigma_factor = 0.5;
  int sigma_halvings = 2;
  /// Candidate root headings (radians about the vertical axis) tried in stage 1.
  std::vector<double> root_yaw_starts{0.0};
  LossWeights weights;
  std::uint64_t seed = 0;

  static FitConfig defaults();
  void validate() const;
  static FitConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct FitResult {
  FitState state;
  std::vector<double> trace;       // total loss at every iteration
  std::vector<int> stage_ends;     // trace index one past each stage
  LossBreakdown final_breakdown;   // at the returned state, final objective
  double initial_loss = 0.0;       // final objective at the initial state
  double final_loss = 0.0;
  double seconds = 0.0;

  /// Running minimum of the trace.
  std::vector<double> running_best() const;
};

/// Prior means: beta = mu, kappa = 0, y = 0, root facing +x, f = f_target, and a
/// translation that centers the visible keypoints at a depth matching their spread.
FitState initial_state(const Observation2D& obs, const ModelBundle& model, const Priors& priors,
                       const FitConfig& config);

/// Staged Adam. Returns the lowest-loss state of the final objective (the initial
/// state included as a candidate). Throws Precondition with fewer than 4 visible
/// keypoints and Divergence on a non-finite loss.
FitResult fit_instance(const Observation2D& obs, const ModelBundle& model, const Priors& priors,
                       const FitConfig& config, const FitState* init = nullptr);

struct BatchItem {
  std::optional<FitResult> result;
  std::string error;
  ErrorCode code = ErrorCode::InvalidArgument;
};

/// Independent fits on `jobs` worker threads. Results are identical to calling
/// fit_instance sequentially; per-instance errors are collected.
std::vector<BatchItem> fit_batch(const std::vector<Observation2D>& observations, const ModelBundle& model,
                                 const Priors& priors, const FitConfig& config, int jobs);

/// Value-path evaluation of a state.
struct PosedState {
  Mat vertices;     // N x 3 camera frame
  Mat world;        // J x 12
  Mat keypoints3d;  // K x 3
  Mat keypoints2d;  // K x 2
  Mat vertices2d;   // N x 2
};
PosedState pose_state(const FitState& state, const ModelBundle& model, int width, int height);

/// Loss breakdown of a state against an observation (no gradient).
LossBreakdown evaluate_state(const FitState& state, const Observation2D& obs, const ModelBundle& model,
                             const Priors& priors, const LossWeights& weights, double sigma);

}  // namespace quadfit
