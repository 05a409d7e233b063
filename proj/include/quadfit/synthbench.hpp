#pragma once

#include "quadfit/fitter.hpp"
#include "quadfit/losses.hpp"
#include "quadfit/render.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace quadfit {

/// Shape units: beta entries are multiples of the component's standard deviation
/// sqrt(eigenvalue); kappa entries are multiples of kKappaUnit.
inline constexpr double kKappaUnit = 0.1;

struct BreedSpec {
  int id = 0;
  std::string name;
  ShapeParams prototype;
  Vec intra_std_beta;   // K, absolute beta units
  Vec intra_std_kappa;  // 7, absolute kappa units
  int clade = 0;
};

struct BreedConfig {
  int num_breeds = 20;
  int num_clades = 4;
  double intra = 0.15;  // instance spread around the prototype, shape units
  double inter = 0.6;   // prototype spread around the clade center, shape units
  double clade = 1.0;   // clade center spread around the mean, shape units
  std::uint64_t seed = 0;

  void validate() const;
  static BreedConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Clade centers around the mean shape, prototypes around their clade center.
/// Breed i belongs to clade i mod C.
std::vector<BreedSpec> gen_breeds(const ModelBundle& model, const BreedConfig& config);

struct DatasetConfig {
  int per_breed = 30;
  int width = 256;
  int height = 256;
  double focal_min = 500.0, focal_max = 700.0;
  double depth_min = 6.0, depth_max = 8.0;
  double lateral = 0.25;     // |x|, |y| translation bound
  double yaw_spread = 0.6;   // heading = side * pi + U(-spread, spread)
  double tilt = 0.08;        // std of root pitch and roll
  double pose_temperature = 0.8;  // scale of the latent sample
  double keypoint_noise = 0.0;    // px
  double val_fraction = 0.2;      // per breed, after the training instances
  double test_fraction = 0.2;     // per breed, last
  int max_retries = 20;
  std::uint64_t seed = 0;

  void validate() const;
  /// Missing fields keep their defaults; unknown fields are rejected.
  static DatasetConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct SynthInstance {
  FitState truth;
  Observation2D obs;
  int breed = 0;
  std::uint64_t seed = 0;  // instance stream, reproduces obs from truth
};

/// Deterministic per seed; instance i draws from its own stream so the result does
/// not depend on `jobs`.
std::vector<SynthInstance> gen_dataset(const ModelBundle& model, const FlowPrior& flow,
                                       const std::vector<BreedSpec>& breeds, const DatasetConfig& config,
                                       int jobs = 1);

/// Renders the observation of a known state (noise-free keypoints, hard mask).
Observation2D observe(const FitState& state, const ModelBundle& model, int width, int height);

/// Keypoints projected outside the image are marked hidden.
void mark_out_of_image(Observation2D& obs);

// -- metrics -------------------------------------------------------------------------

/// 100 x fraction of visible keypoints within ratio * sqrt(bbox area) of the target,
/// bbox from the ground-truth mask.
double pck(const Mat& pred, const Mat& gt, const Vec& visible, const Mask& gt_mask, double ratio = 0.15);

struct ProcrustesResult {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  double scale = 1.0;
  double rms = 0.0;  // residual RMS over points
  Mat aligned;       // transformed source
};

/// Least-squares map source -> target (rotation with det +1, optional uniform scale).
ProcrustesResult procrustes_align(const Mat& source, const Mat& target, bool with_scale = true);

/// Mean per-vertex distance after Procrustes alignment of source onto target.
double aligned_v2v(const Mat& source, const Mat& target, bool with_scale = true);

struct Consistency {
  double mean = 0.0;
  double variance = 0.0;  // population variance of per-prediction errors
  std::vector<double> errors;
};

/// Reposes every prediction to the T-pose, aligns it to the prototype mesh and
/// reports the mean vertex error in prototype torso lengths.
Consistency prototype_consistency(const std::vector<ShapeParams>& predictions, const Mat& prototype_mesh,
                                  const ModelBundle& model);

struct ClusterQuality {
  double score = 0.0;
  int excluded = 0;  // samples in singleton classes
};

/// Mean silhouette coefficient (Euclidean). A sample with a = b scores 0.
ClusterQuality cluster_quality(const Mat& z, const std::vector<int>& labels);

// -- dataset files ------------------------------------------------------------------

/// JSON lines: keypoints [[x, y, visible], ...], mask path, breed, breed_name, split,
/// width, height, plus the ground truth under "truth".
void save_dataset(const std::string& dir, const std::vector<SynthInstance>& data,
                  const std::vector<BreedSpec>& breeds);
std::vector<SynthInstance> load_dataset(const std::string& dir);
void save_breeds(const std::string& path, const std::vector<BreedSpec>& breeds);
std::vector<BreedSpec> load_breeds(const std::string& path);

nlohmann::json state_to_json(const FitState& s);
FitState state_from_json(const nlohmann::json& j);

}  // namespace quadfit
