#include "quadfit/losses.hpp"

#include <cmath>
#include <limits>
#include <map>

namespace quadfit {

KeypointSchema KeypointSchema::from_model(const ModelBundle& model) {
  KeypointSchema s;
  s.weights.resize(model.num_keypoints());
  for (int i = 0; i < model.num_keypoints(); ++i) {
    s.names.push_back(model.mesh.keypoints[i].name);
    s.weights[i] = model.mesh.keypoints[i].weight;
  }
  s.validate();
  return s;
}

void KeypointSchema::validate() const {
  require(static_cast<Eigen::Index>(names.size()) == weights.size(), ErrorCode::DimensionMismatch,
          "keypoint schema: one weight per name");
  require(weights.size() == 0 || weights.minCoeff() > 0.0, ErrorCode::InvalidArgument,
          "keypoint schema: weights must be positive");
}

// -- weights --------------------------------------------------------------------

namespace {

template <typename F>
void for_each_weight(LossWeights& w, F&& f) {
  f("w_kp", w.w_kp);
  f("w_sil", w.w_sil);
  f("w_beta", w.w_beta);
  f("w_kappa", w.w_kappa);
  f("w_nf", w.w_nf);
  f("w_side", w.w_side);
  f("w_cam", w.w_cam);
  f("w_triplet", w.w_triplet);
  f("w_cs", w.w_cs);
  f("w_3d", w.w_3d);
  f("margin", w.margin);
  f("sil_threshold", w.sil_threshold);
  f("f_target", w.f_target);
}

}  // namespace

void LossWeights::validate() const {
  LossWeights copy = *this;
  for_each_weight(copy, [](const char* name, double v) {
    require(std::isfinite(v) && v >= 0.0, ErrorCode::InvalidArgument,
            std::string("loss weights: ") + name + " must be finite and >= 0");
  });
  require(sil_threshold > 0.0, ErrorCode::InvalidArgument, "loss weights: sil_threshold must be > 0");
  require(f_target > 0.0, ErrorCode::InvalidArgument, "loss weights: f_target must be > 0");
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::InvalidArgument, "loss weights: expected a JSON object");
  LossWeights w;
  std::map<std::string, double*> fields;
  for_each_weight(w, [&](const char* name, double& v) { fields[name] = &v; });
  for (const auto& [key, value] : j.items()) {
    const auto it = fields.find(key);
    require(it != fields.end(), ErrorCode::InvalidArgument, "loss weights: unknown field '" + key + "'");
    require(value.is_number(), ErrorCode::InvalidArgument, "loss weights: '" + key + "' must be a number");
    *it->second = value.get<double>();
  }
  w.validate();
  return w;
}

nlohmann::json LossWeights::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  LossWeights copy = *this;
  for_each_weight(copy, [&](const char* name, double v) { j[name] = v; });
  return j;
}

int Observation2D::num_visible() const {
  int n = 0;
  for (Eigen::Index i = 0; i < visible.size(); ++i) n += visible[i] > 0.5;
  return n;
}

// -- terms ----------------------------------------------------------------------

namespace {

void check_keypoints(Eigen::Index pred_rows, Eigen::Index pred_cols, const Mat& gt, const Vec& visible) {
  require(pred_cols == 2 && gt.cols() == 2 && pred_rows == gt.rows() && visible.size() == gt.rows(),
          ErrorCode::DimensionMismatch, "keypoints: prediction, target and visibility sizes differ");
  bool any = false;
  for (Eigen::Index i = 0; i < visible.size(); ++i) any = any || visible[i] > 0.5;
  require(any, ErrorCode::UndefinedLoss, "keypoint loss needs at least one visible keypoint");
}

// Per-keypoint factor w_n / sum of visible weights, zero for hidden keypoints.
Mat keypoint_factors(const Vec& visible, const Vec& weights) {
  require(weights.size() == visible.size(), ErrorCode::DimensionMismatch, "keypoints: one weight per keypoint");
  Mat c(visible.size(), 1);
  double total = 0.0;
  for (Eigen::Index i = 0; i < visible.size(); ++i) {
    c(i, 0) = visible[i] > 0.5 ? weights[i] : 0.0;
    total += c(i, 0);
  }
  require(total > 0.0, ErrorCode::UndefinedLoss, "keypoint loss: visible weights sum to zero");
  return c / total;
}

}  // namespace

double keypoint_loss(const Mat& pred, const Mat& gt, const Vec& visible, const Vec& weights) {
  check_keypoints(pred.rows(), pred.cols(), gt, visible);
  const Mat c = keypoint_factors(visible, weights);
  return ((pred - gt).rowwise().squaredNorm().array() * c.col(0).array()).sum();
}

double mean_keypoint_error(const Mat& pred, const Mat& gt, const Vec& visible) {
  check_keypoints(pred.rows(), pred.cols(), gt, visible);
  double sum = 0.0;
  int n = 0;
  for (Eigen::Index i = 0; i < gt.rows(); ++i) {
    if (visible[i] <= 0.5) continue;
    sum += (pred.row(i) - gt.row(i)).norm();
    ++n;
  }
  return sum / n;
}

double silhouette_loss(const Mask& pred, const Mask& gt, double kp_error, double threshold) {
  require(pred.rows() == gt.rows() && pred.cols() == gt.cols(), ErrorCode::DimensionMismatch,
          "silhouette loss: mask sizes differ");
  if (!(kp_error < threshold)) return 0.0;
  return (pred - gt).squaredNorm();
}

std::vector<std::array<int, 3>> mine_triplets(const Mat& z, const std::vector<int>& labels) {
  require(static_cast<Eigen::Index>(labels.size()) == z.rows(), ErrorCode::DimensionMismatch,
          "triplet loss: one label per embedding");
  const int n = static_cast<int>(z.rows());
  std::vector<std::array<int, 3>> out;
  for (int a = 0; a < n; ++a) {
    int neg = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < n; ++k) {
      if (labels[k] == labels[a]) continue;
      const double d = (z.row(a) - z.row(k)).norm();
      if (d < best) {
        best = d;
        neg = k;
      }
    }
    if (neg < 0) continue;
    for (int p = 0; p < n; ++p) {
      if (p != a && labels[p] == labels[a]) out.push_back({a, p, neg});
    }
  }
  return out;
}

TripletResult triplet_loss(const Mat& z, const std::vector<int>& labels, double margin) {
  require(margin >= 0.0, ErrorCode::InvalidArgument, "triplet loss: margin must be >= 0");
  const auto triples = mine_triplets(z, labels);
  TripletResult r;
  r.num_triplets = static_cast<int>(triples.size());
  r.no_valid_triplets = triples.empty();
  for (const auto& t : triples) {
    const double dap = (z.row(t[0]) - z.row(t[1])).norm();
    const double dan = (z.row(t[0]) - z.row(t[2])).norm();
    r.loss += std::max(dap - dan + margin, 0.0);
  }
  return r;
}

double breed_ce_loss(const Vec& logits, int label) {
  require(label >= 0 && label < logits.size(), ErrorCode::InvalidArgument,
          "breed loss: label " + std::to_string(label) + " outside [0, " + std::to_string(logits.size()) + ")");
  const double mx = logits.maxCoeff();
  return -(logits[label] - mx - std::log((logits.array() - mx).exp().sum()));
}

double model3d_loss(const ShapeParams& pred, const ShapeParams& reference) {
  require(pred.beta.size() == reference.beta.size() && pred.kappa.size() == reference.kappa.size(),
          ErrorCode::DimensionMismatch, "3D model loss: shape dimensions differ");
  return (pred.beta - reference.beta).squaredNorm() + (pred.kappa - reference.kappa).squaredNorm();
}

namespace graph {

ad::Var keypoint_loss(const ad::Var& pred, const Mat& gt, const Vec& visible, const Vec& weights) {
  check_keypoints(pred.rows(), pred.cols(), gt, visible);
  ad::Tape& t = pred.tape();
  ad::Var sq = ad::sum_cols(ad::square(pred - t.constant(gt)));
  return ad::sum(sq * t.constant(keypoint_factors(visible, weights)));
}

ad::Var silhouette_loss(const ad::Var& pred, const Mask& gt) {
  require(pred.rows() == gt.rows() && pred.cols() == gt.cols(), ErrorCode::DimensionMismatch,
          "silhouette loss: mask sizes differ");
  return ad::sum(ad::square(pred - pred.tape().constant(gt)));
}

ad::Var triplet_loss(const ad::Var& z, const std::vector<std::array<int, 3>>& triples, double margin) {
  if (triples.empty()) return z.tape().scalar(0.0);
  std::vector<int> a, p, n;
  for (const auto& t : triples) {
    a.push_back(t[0]);
    p.push_back(t[1]);
    n.push_back(t[2]);
  }
  ad::Var za = ad::gather_rows(z, a);
  ad::Var dap = ad::row_norms(za - ad::gather_rows(z, p));
  ad::Var dan = ad::row_norms(za - ad::gather_rows(z, n));
  return ad::sum(ad::relu(dap - dan + margin));
}

ad::Var breed_ce_loss(const ad::Var& logits, int label) {
  require(logits.rows() == 1 && label >= 0 && label < logits.cols(), ErrorCode::InvalidArgument,
          "breed loss: label outside the logit range");
  return -ad::element(ad::log_softmax_rows(logits), 0, label);
}

ad::Var model3d_loss(const ad::Var& beta, const ad::Var& kappa, const ShapeParams& reference) {
  require(beta.cols() == reference.beta.size() && kappa.cols() == reference.kappa.size(),
          ErrorCode::DimensionMismatch, "3D model loss: shape dimensions differ");
  ad::Tape& t = beta.tape();
  ad::Var db = beta - t.constant(reference.beta.transpose());
  ad::Var dk = kappa - t.constant(reference.kappa.transpose());
  return ad::sum(ad::square(db)) + ad::sum(ad::square(dk));
}

}  // namespace graph

// -- total ------------------------------------------------------------------------

const char* term_name(Term t) {
  switch (t) {
    case Term::Kp: return "kp";
    case Term::Sil: return "sil";
    case Term::Beta: return "beta";
    case Term::Kappa: return "kappa";
    case Term::Nf: return "nf";
    case Term::Side: return "side";
    case Term::Cam: return "cam";
    case Term::Cs: return "cs";
    case Term::ThreeD: return "3d";
    case Term::Triplet: return "triplet";
    case Term::Count: break;
  }
  return "?";
}

double LossBreakdown::sum() const {
  double s = 0.0;
  bool first = true;
  for (int i = 0; i < kNumTerms; ++i) {
    if (!enabled[i]) continue;
    s = first ? value[i] : s + value[i];
    first = false;
  }
  return s;
}

PosedVars pose_instance(const LossContext& ctx, const std::vector<ad::Var>& flow_params, const InstanceVars& v,
                        double cx, double cy) {
  const ModelBundle& model = *ctx.model;
  const int J = model.num_joints();
  PosedVars p;
  p.theta = graph::flow_inverse(*ctx.flow, flow_params, v.latent);
  ad::Var joint_rot = graph::axis_angle_to_rotmat(ad::reshape(p.theta, J - 1, 3));
  p.rotations = ad::concat_rows({graph::rot6d_to_rotmat(v.root6d), joint_rot});
  p.body = graph::shape_body(model, v.beta, v.kappa);
  p.world = graph::forward_kinematics(model.skeleton, p.rotations, p.body.offsets, v.translation);
  p.vertices = graph::lbs_skin(model, p.body.vertices, p.world, p.body.joints);
  p.keypoints3d = graph::keypoints3d(model, p.vertices, p.world);
  p.focal = ad::exp(v.log_focal);
  p.keypoints2d = graph::project(p.keypoints3d, p.focal, cx, cy);
  return p;
}

ad::Var total_loss(const LossContext& ctx, const std::vector<ad::Var>& flow_params, const InstanceVars& v,
                   const Observation2D& obs, const ShapeParams* breed_reference, LossBreakdown* breakdown,
                   PosedVars* posed_out) {
  require(ctx.model && ctx.flow && ctx.shape_prior, ErrorCode::InvalidArgument, "loss context is incomplete");
  const LossWeights& w = ctx.weights;
  const ModelBundle& model = *ctx.model;
  ad::Tape& tape = v.beta.tape();
  PosedVars posed = pose_instance(ctx, flow_params, v, obs.cx(), obs.cy());

  LossBreakdown bd;
  bd.kp_error = mean_keypoint_error(posed.keypoints2d.value(), obs.keypoints, obs.visible);
  ad::Var total;
  auto add = [&](Term term, double weight, const auto& make) {
    if (weight <= 0.0) return;
    const int i = static_cast<int>(term);
    bd.enabled[i] = true;
    ad::Var x = weight * make();
    bd.value[i] = x.item();
    total = total.valid() ? total + x : x;
  };

  std::vector<double> kp_weights(model.num_keypoints());
  for (int i = 0; i < model.num_keypoints(); ++i) kp_weights[i] = model.mesh.keypoints[i].weight;
  const Vec kpw = Eigen::Map<const Vec>(kp_weights.data(), kp_weights.size());
  add(Term::Kp, w.w_kp, [&] { return graph::keypoint_loss(posed.keypoints2d, obs.keypoints, obs.visible, kpw); });

  bd.sil_gate_open = bd.kp_error < w.sil_threshold;
  if (w.w_sil > 0.0) {
    require(obs.mask.rows() == obs.height && obs.mask.cols() == obs.width, ErrorCode::DimensionMismatch,
            "observation mask does not match its image size");
    if (bd.sil_gate_open) {
      add(Term::Sil, w.w_sil, [&] {
        ad::Var v2d = graph::project(posed.vertices, posed.focal, obs.cx(), obs.cy());
        ad::Var soft = graph::soft_rasterize(v2d, model.mesh.faces, obs.width, obs.height, ctx.sigma);
        return graph::silhouette_loss(soft, obs.mask);
      });
    } else {
      bd.enabled[static_cast<int>(Term::Sil)] = true;  // gated: exactly zero, nothing to differentiate
    }
  }
  add(Term::Beta, w.w_beta, [&] { return graph::shape_prior(v.beta, *ctx.shape_prior); });
  add(Term::Kappa, w.w_kappa, [&] { return graph::scale_prior(v.kappa); });
  add(Term::Nf, w.w_nf, [&] { return 0.5 * ad::sum(ad::square(v.latent)); });
  add(Term::Side, w.w_side, [&] {
    return graph::side_leg_penalty(model.skeleton, ad::reshape(posed.theta, model.num_joints() - 1, 3));
  });
  add(Term::Cam, w.w_cam, [&] { return graph::camera_prior(posed.focal, w.f_target); });
  if (ctx.mode == LossMode::Train) {
    if (obs.breed >= 0 && v.logits.valid())
      add(Term::Cs, w.w_cs, [&] { return graph::breed_ce_loss(v.logits, obs.breed); });
    if (breed_reference) add(Term::ThreeD, w.w_3d, [&] { return graph::model3d_loss(v.beta, v.kappa, *breed_reference); });
  }
  if (!total.valid()) total = tape.scalar(0.0);
  bd.total = total.item();
  if (breakdown) *breakdown = bd;
  if (posed_out) *posed_out = posed;
  return total;
}

}  // namespace quadfit
