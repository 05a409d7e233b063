#pragma once

#include "quadfit/fitter.hpp"
#include "quadfit/losses.hpp"
#include "quadfit/synthbench.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace quadfit {

/// Affine layer, y = x w + b with x as rows.
struct Dense {
  Mat w;  // in x out
  Mat b;  // 1 x out
};

/// tanh between layers, linear output.
struct Mlp {
  std::vector<Dense> layers;
};

/// Pose-branch output slots, in order: root 6D, latent y, translation, log focal.
struct PoseOutputLayout {
  int latent_dim = 0;
  int size() const { return 6 + latent_dim + 3 + 1; }
};

struct RegressorArch {
  int hidden = 256;
  int hidden_layers = 3;
  int z_dim = 64;
  int bps_points = 64;
  std::uint64_t bps_seed = 7;
};

struct RegressorNet {
  RegressorArch arch;
  int num_keypoints = 0;
  int num_breeds = 0;
  int num_components = 0;
  int latent_dim = 0;
  int num_bones = 0;
  int width = 256, height = 256;
  Mat bps_basis;  // B x 2 in the unit square, from (bps_points, bps_seed)
  // fixed standardization of the encoded features, set from the training split
  Mat feature_mean;  // 1 x F
  Mat feature_std;   // 1 x F

  Mlp shape_mlp;  // features -> z
  Dense class_head, beta_head, kappa_head;
  Mlp pose_mlp;   // features + bone lengths -> raw pose outputs
  // fixed de-standardization of the pose outputs, set by pose pretraining
  Mat pose_mean;  // 1 x P
  Mat pose_std;   // 1 x P

  static RegressorNet create(const ModelBundle& model, const FlowPrior& flow, int num_breeds, int width,
                             int height, const RegressorArch& arch, std::uint64_t seed);

  int feature_dim() const { return 3 * num_keypoints + arch.bps_points; }
  /// Trainable tensors in a fixed order (the fixed standardizations are excluded).
  std::vector<Mat*> parameters();
  std::vector<const Mat*> parameters() const;
};

/// Network input: keypoints scaled to [-1, 1] (zero when hidden), visibility
/// flags, then the BPS encoding of the mask. 1 x feature_dim.
Mat encode_observation(const RegressorNet& net, const Observation2D& obs);

struct RegressorOutput {
  Vec z;
  Vec logits;
  ShapeParams shape;
  FitState state;  // shape, decoded pose, translation, focal
};

/// Deterministic forward pass of one observation.
RegressorOutput regress(const RegressorNet& net, const ModelBundle& model, const FlowPrior& flow,
                        const Observation2D& obs);
/// Same, for pre-encoded features.
RegressorOutput regress_features(const RegressorNet& net, const ModelBundle& model, const FlowPrior& flow,
                                 const Mat& features);

/// Shape heads alone, for probing: (beta, kappa, logits) of a latent z.
ShapeParams decode_shape(const RegressorNet& net, const Vec& z, Vec* logits = nullptr);

namespace graph {
struct RegressorVars {
  ad::Var z, logits, beta, kappa;  // B rows each
  ad::Var root6d, latent, translation, log_focal;
  std::vector<ad::Var> params;
};
/// Batched forward pass on a tape. features: B x feature_dim.
RegressorVars regressor_forward(ad::Tape& tape, const RegressorNet& net, const ModelBundle& model,
                                const Mat& features, bool trainable);
}  // namespace graph

// -- training ------------------------------------------------------------------------

enum class BreedLosses { None, Sim, Sim3D };
const char* breed_losses_name(BreedLosses b);
BreedLosses breed_losses_from_name(const std::string& s);

struct TrainConfig {
  RegressorArch arch;
  int epochs = 30;
  int batch_size = 32;
  int breeds_per_batch = 8;
  double lr = 1e-3;
  LossWeights weights;
  BreedLosses breed_losses = BreedLosses::Sim;
  double sigma = 1e-4;
  // pose-branch pretraining on freshly sampled ground truth
  int pretrain_samples = 2000;
  double pretrain_shape_spread = 1.5;  // shape units around the mean
  int pretrain_epochs = 20;
  double pretrain_lr = 1e-3;
  DatasetConfig pretrain_camera;  // camera and pose ranges of the pretraining samples
  std::uint64_t seed = 0;

  void validate() const;
  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  /// Weights with the breed terms switched off according to breed_losses.
  LossWeights effective_weights() const;
};

/// One row of the metric history.
struct EpochRecord {
  int epoch = 0;
  std::array<double, kNumTerms> terms{};  // mean weighted value over batches
  double total = 0.0;
  double triplets = 0.0;        // mean N_triplets per batch
  double val_kp_error = 0.0;    // mean keypoint error in pixels
  double val_proto_mean = 0.0;  // mean over breeds of the per-breed mean error
  double val_proto_var = 0.0;   // mean over breeds of the per-breed variance
  double val_cluster = 0.0;     // silhouette of z on the validation split
  std::vector<double> val_proto_per_breed;  // breeds with validation instances, in id order
};

struct TrainResult {
  RegressorNet net;
  std::vector<EpochRecord> history;
  double pretrain_initial = 0.0;
  double pretrain_final = 0.0;
};

/// Thrown on a non-finite training loss or a prediction the loss cannot be
/// evaluated at (e.g. behind the camera); carries the history so far.
class TrainDivergence : public Error {
 public:
  TrainDivergence(const std::string& what, std::vector<EpochRecord> history)
      : Error(ErrorCode::Divergence, what), history(std::move(history)) {}
  std::vector<EpochRecord> history;
};

/// Pretrains the pose branch, then minimizes the train-mode total loss over
/// breed-stratified batches. Parameters are kept at float precision after every
/// step so a saved network reproduces the recorded validation metrics exactly.
TrainResult train_regressor(const std::vector<SynthInstance>& data, const std::vector<BreedSpec>& breeds,
                            const ModelBundle& model, const Priors& priors, const TrainConfig& config);

/// Per-breed evaluation of a set of predictions against prototypes.
struct BreedReport {
  int breed = 0;
  std::string name;
  int n = 0;
  double mean_v2v = 0.0;
  double var_v2v = 0.0;
  double pck = 0.0;
  double iou = 0.0;
};

/// Evaluates predicted states on instances with the given split ("" for all).
/// Breeds without instances are skipped.
std::vector<BreedReport> evaluate_predictions(const std::vector<SynthInstance>& data,
                                              const std::vector<FitState>& predicted,
                                              const std::vector<BreedSpec>& breeds, const ModelBundle& model,
                                              const std::string& split);

std::string history_csv(const std::vector<EpochRecord>& history);

void save_regressor(const std::string& dir, const RegressorNet& net);
RegressorNet load_regressor(const std::string& dir);

}  // namespace quadfit
