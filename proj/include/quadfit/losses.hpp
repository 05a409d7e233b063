#pragma once

#include "quadfit/ad.hpp"
#include "quadfit/model.hpp"
#include "quadfit/priors.hpp"
#include "quadfit/render.hpp"

#include <json.hpp>

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace quadfit {

struct KeypointSchema {
  std::vector<std::string> names;
  Vec weights;

  int size() const { return static_cast<int>(names.size()); }
  static KeypointSchema from_model(const ModelBundle& model);
  void validate() const;
};

/// Weights of every loss term, read from JSON with exactly these field names.
/// w_kp, w_sil and w_cam are the global multipliers of the data and camera terms.
struct LossWeights {
  double w_kp = 1.0;
  double w_sil = 0.002;
  double w_beta = 0.005;
  double w_kappa = 1.0;
  double w_nf = 0.02;
  double w_side = 1.0;
  double w_cam = 1e-6;
  double w_triplet = 5.0;
  double w_cs = 1.0;
  double w_3d = 1.0;
  double margin = 1.0;
  double sil_threshold = 10.0;  // T, mean keypoint error in pixels
  double f_target = 600.0;

  void validate() const;
  static LossWeights from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// 2D evidence for one instance.
struct Observation2D {
  Mat keypoints;  // K x 2 pixels
  Vec visible;    // K, 1 visible, 0 hidden
  Mask mask;      // H x W binary
  int width = 256;
  int height = 256;
  int breed = -1;  // label index, -1 if unknown
  std::string breed_name;
  std::string split;

  int num_visible() const;
  double cx() const { return 0.5 * width; }
  double cy() const { return 0.5 * height; }
};

// -- individual terms -------------------------------------------------------------

double keypoint_loss(const Mat& pred, const Mat& gt, const Vec& visible, const Vec& weights);
double mean_keypoint_error(const Mat& pred, const Mat& gt, const Vec& visible);
/// Squared pixel error when the gate is open (kp_error < threshold), else exactly 0.
double silhouette_loss(const Mask& pred, const Mask& gt, double kp_error, double threshold);

struct TripletResult {
  double loss = 0.0;
  int num_triplets = 0;
  bool no_valid_triplets = false;  // warning flag: the term contributed 0
};

/// Every ordered same-breed pair (a, p), a != p, with its hardest in-batch negative
/// (smallest d(a, n), first index on ties). Euclidean distance on the rows of z.
TripletResult triplet_loss(const Mat& z, const std::vector<int>& labels, double margin);

/// Index triples (a, p, n) chosen by the mining rule, from the current embeddings.
std::vector<std::array<int, 3>> mine_triplets(const Mat& z, const std::vector<int>& labels);

double breed_ce_loss(const Vec& logits, int label);
double model3d_loss(const ShapeParams& pred, const ShapeParams& reference);

namespace graph {
/// pred: K x 2 pixels.
ad::Var keypoint_loss(const ad::Var& pred, const Mat& gt, const Vec& visible, const Vec& weights);
ad::Var silhouette_loss(const ad::Var& pred, const Mask& gt);
/// Sum of hinge values over the given triples.
ad::Var triplet_loss(const ad::Var& z, const std::vector<std::array<int, 3>>& triples, double margin);
/// logits: 1 x C.
ad::Var breed_ce_loss(const ad::Var& logits, int label);
ad::Var model3d_loss(const ad::Var& beta, const ad::Var& kappa, const ShapeParams& reference);
}  // namespace graph

// -- total loss --------------------------------------------------------------------

enum class LossMode { Fit, Train };

/// Named terms, in the order they are summed.
enum class Term { Kp, Sil, Beta, Kappa, Nf, Side, Cam, Cs, ThreeD, Triplet, Count };
inline constexpr int kNumTerms = static_cast<int>(Term::Count);
const char* term_name(Term t);

/// Weighted value of each enabled term; disabled terms hold 0 and enabled = false.
struct LossBreakdown {
  std::array<double, kNumTerms> value{};
  std::array<bool, kNumTerms> enabled{};
  double total = 0.0;
  double kp_error = 0.0;  // unweighted mean keypoint error, the silhouette gate input
  bool sil_gate_open = false;

  double operator[](Term t) const { return value[static_cast<int>(t)]; }
  /// Sum of the enabled values in Term order.
  double sum() const;
};

/// Everything the losses read besides the instance itself.
struct LossContext {
  const ModelBundle* model = nullptr;
  const FlowPrior* flow = nullptr;
  const GaussianShapePrior* shape_prior = nullptr;
  LossWeights weights;
  double sigma = 1e-4;  // soft rasterizer sharpness
  LossMode mode = LossMode::Fit;
};

/// Differentiable unknowns of one instance, all row vectors.
struct InstanceVars {
  ad::Var beta;         // 1 x K
  ad::Var kappa;        // 1 x 7
  ad::Var root6d;       // 1 x 6
  ad::Var latent;       // 1 x D
  ad::Var translation;  // 1 x 3
  ad::Var log_focal;    // 1 x 1
  ad::Var logits;       // 1 x C, train mode only (may be invalid)
};

/// Posed body of one instance on the tape.
struct PosedVars {
  ad::Var theta;        // 1 x D decoded pose vector
  ad::Var rotations;    // J x 9 local rotations
  graph::ShapedBody body;
  ad::Var world;        // J x 12
  ad::Var vertices;     // N x 3 camera frame
  ad::Var keypoints3d;  // K x 3
  ad::Var keypoints2d;  // K x 2
  ad::Var focal;        // 1 x 1
};

PosedVars pose_instance(const LossContext& ctx, const std::vector<ad::Var>& flow_params, const InstanceVars& v,
                        double cx, double cy);

/// Per-instance total loss. Breed terms (Cs, ThreeD) are added in Train mode when
/// the observation has a label, logits are present and, for ThreeD, a reference
/// shape is given. The batch-level triplet term is added by the caller.
ad::Var total_loss(const LossContext& ctx, const std::vector<ad::Var>& flow_params, const InstanceVars& v,
                   const Observation2D& obs, const ShapeParams* breed_reference, LossBreakdown* breakdown,
                   PosedVars* posed = nullptr);

}  // namespace quadfit
