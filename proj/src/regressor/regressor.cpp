#include "quadfit/regressor.hpp"
#include "quadfit/io.hpp"
#include "quadfit/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>

namespace quadfit {

namespace fs = std::filesystem;

// -- network ---------------------------------------------------------------------------

namespace {

Dense make_dense(Rng& rng, int in, int out, double gain) {
  Dense d;
  d.w.resize(in, out);
  const double s = gain / std::sqrt(static_cast<double>(in));
  for (Eigen::Index i = 0; i < d.w.size(); ++i) d.w.data()[i] = s * rng.normal();
  d.b = Mat::Zero(1, out);
  return d;
}

Mlp make_mlp(Rng& rng, int in, int hidden, int layers, int out, double out_gain) {
  Mlp m;
  int width = in;
  for (int l = 0; l < layers; ++l) {
    m.layers.push_back(make_dense(rng, width, hidden, 1.0));
    width = hidden;
  }
  m.layers.push_back(make_dense(rng, width, out, out_gain));
  return m;
}

ad::Var dense(const ad::Var& x, const ad::Var& w, const ad::Var& b) { return ad::matmul(x, w) + b; }

// params holds (w, b) per layer starting at `at`; advances it.
ad::Var mlp_forward(const Mlp& m, const std::vector<ad::Var>& params, std::size_t& at, ad::Var x) {
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    x = dense(x, params[at], params[at + 1]);
    at += 2;
    if (l + 1 < m.layers.size()) x = ad::tanh(x);
  }
  return x;
}

void push_dense(std::vector<Mat*>& out, Dense& d) {
  out.push_back(&d.w);
  out.push_back(&d.b);
}

}  // namespace

RegressorNet RegressorNet::create(const ModelBundle& model, const FlowPrior& flow, int num_breeds, int width,
                                  int height, const RegressorArch& arch, std::uint64_t seed) {
  require(num_breeds >= 1 && width > 0 && height > 0, ErrorCode::InvalidArgument, "regressor: bad sizes");
  require(arch.hidden >= 1 && arch.hidden_layers >= 1 && arch.z_dim >= 1 && arch.bps_points >= 1,
          ErrorCode::InvalidArgument, "regressor: bad architecture");
  require(flow.dim == model.pose_dim(), ErrorCode::DimensionMismatch, "regressor: flow and model pose sizes differ");
  RegressorNet n;
  n.arch = arch;
  n.num_keypoints = model.num_keypoints();
  n.num_breeds = num_breeds;
  n.num_components = model.space.num_components();
  n.latent_dim = flow.dim;
  n.num_bones = model.num_joints() - 1;
  n.width = width;
  n.height = height;
  n.bps_basis = quadfit::bps_basis(arch.bps_points, arch.bps_seed);
  Rng rng(seed);
  n.shape_mlp = make_mlp(rng, n.feature_dim(), arch.hidden, arch.hidden_layers, arch.z_dim, 1.0);
  n.class_head = make_dense(rng, arch.z_dim, num_breeds, 1.0);
  n.beta_head = make_dense(rng, arch.z_dim, n.num_components, 0.1);
  n.kappa_head = make_dense(rng, arch.z_dim, kNumScaleGroups, 0.01);
  const int P = PoseOutputLayout{n.latent_dim}.size();
  n.pose_mlp = make_mlp(rng, n.feature_dim() + n.num_bones, arch.hidden, arch.hidden_layers, P, 0.1);
  n.pose_mean = Mat::Zero(1, P);
  n.pose_std = Mat::Ones(1, P);
  n.feature_mean = Mat::Zero(1, n.feature_dim());
  n.feature_std = Mat::Ones(1, n.feature_dim());
  for (Mat* m : n.parameters()) *m = round_to_float(*m);
  return n;
}

std::vector<Mat*> RegressorNet::parameters() {
  std::vector<Mat*> out;
  for (Dense& d : shape_mlp.layers) push_dense(out, d);
  push_dense(out, class_head);
  push_dense(out, beta_head);
  push_dense(out, kappa_head);
  for (Dense& d : pose_mlp.layers) push_dense(out, d);
  return out;
}

std::vector<const Mat*> RegressorNet::parameters() const {
  std::vector<const Mat*> out;
  for (Mat* m : const_cast<RegressorNet*>(this)->parameters()) out.push_back(m);
  return out;
}

Mat encode_observation(const RegressorNet& net, const Observation2D& obs) {
  require(obs.keypoints.rows() == net.num_keypoints && obs.visible.size() == net.num_keypoints,
          ErrorCode::DimensionMismatch, "encode_observation: keypoint count does not match the network");
  require(obs.width == net.width && obs.height == net.height, ErrorCode::DimensionMismatch,
          "encode_observation: image size does not match the network");
  require(obs.mask.rows() == obs.height && obs.mask.cols() == obs.width, ErrorCode::DimensionMismatch,
          "encode_observation: mask size does not match the image size");
  const int K = net.num_keypoints;
  Mat f = Mat::Zero(1, net.feature_dim());
  for (int k = 0; k < K; ++k) {
    if (obs.visible[k] <= 0.5) continue;
    require(obs.keypoints.row(k).allFinite(), ErrorCode::InvalidArgument,
            "encode_observation: visible keypoint " + std::to_string(k) + " is not finite");
    f(0, 2 * k) = (obs.keypoints(k, 0) - obs.cx()) / (0.5 * obs.width);
    f(0, 2 * k + 1) = (obs.keypoints(k, 1) - obs.cy()) / (0.5 * obs.height);
    f(0, 2 * K + k) = 1.0;
  }
  const Vec bps = bps_encode(obs.mask, net.bps_basis);
  f.block(0, 3 * K, 1, bps.size()) = bps.transpose();
  return f;
}

namespace graph {

RegressorVars regressor_forward(ad::Tape& tape, const RegressorNet& net, const ModelBundle& model,
                                const Mat& features, bool trainable) {
  require(features.cols() == net.feature_dim() && features.rows() >= 1, ErrorCode::DimensionMismatch,
          "regressor: features must be B x feature_dim");
  RegressorVars r;
  for (const Mat* m : net.parameters()) r.params.push_back(trainable ? tape.variable(*m) : tape.constant(*m));
  const Mat standardized = (features.rowwise() - net.feature_mean.row(0)).array().rowwise() /
                           net.feature_std.row(0).array();
  const ad::Var x = tape.constant(standardized);
  std::size_t at = 0;
  r.z = mlp_forward(net.shape_mlp, r.params, at, x);
  r.logits = dense(r.z, r.params[at], r.params[at + 1]);
  r.beta = dense(r.z, r.params[at + 2], r.params[at + 3]);
  r.kappa = dense(r.z, r.params[at + 4], r.params[at + 5]);
  at += 6;

  // bone lengths of each predicted shape feed the pose branch
  const int B = static_cast<int>(features.rows());
  std::vector<ad::Var> bones;
  for (int i = 0; i < B; ++i) {
    const int row[] = {i};
    const ShapedBody body = shape_body(model, ad::gather_rows(r.beta, row), ad::gather_rows(r.kappa, row));
    bones.push_back(bone_lengths(body));
  }
  const ad::Var pose_in = ad::concat_cols({x, ad::concat_rows(std::span<const ad::Var>(bones))});
  const ad::Var raw = mlp_forward(net.pose_mlp, r.params, at, pose_in);
  const ad::Var out = raw * tape.constant(net.pose_std) + tape.constant(net.pose_mean);

  auto cols = [&](int from, int count) {
    std::vector<int> idx(count);
    std::iota(idx.begin(), idx.end(), from);
    return ad::gather_cols(out, idx);
  };
  const int D = net.latent_dim;
  r.root6d = cols(0, 6);
  r.latent = cols(6, D);
  r.translation = cols(6 + D, 3);
  r.log_focal = cols(9 + D, 1);
  return r;
}

}  // namespace graph

namespace {

Vec row_vec(const Mat& m, Eigen::Index r) { return m.row(r).transpose(); }

RegressorOutput output_row(const graph::RegressorVars& v, Eigen::Index i, const FlowPrior& flow) {
  RegressorOutput o;
  o.z = row_vec(v.z.value(), i);
  o.logits = row_vec(v.logits.value(), i);
  o.shape.beta = row_vec(v.beta.value(), i);
  o.shape.kappa = row_vec(v.kappa.value(), i);
  FitState& s = o.state;
  s.shape = o.shape;
  for (int k = 0; k < 6; ++k) s.pose.root_rot6d[k] = v.root6d.value()(i, k);
  s.pose.latent = row_vec(v.latent.value(), i);
  s.pose.translation = v.translation.value().row(i).transpose();
  s.focal = std::exp(v.log_focal.value()(i, 0));
  s.decode(flow);
  return o;
}

std::vector<RegressorOutput> regress_batch(const RegressorNet& net, const ModelBundle& model, const FlowPrior& flow,
                                           const Mat& features) {
  ad::Tape tape;
  const graph::RegressorVars v = graph::regressor_forward(tape, net, model, features, false);
  std::vector<RegressorOutput> out;
  for (Eigen::Index i = 0; i < features.rows(); ++i) out.push_back(output_row(v, i, flow));
  return out;
}

}  // namespace

RegressorOutput regress_features(const RegressorNet& net, const ModelBundle& model, const FlowPrior& flow,
                                 const Mat& features) {
  require(features.rows() == 1, ErrorCode::DimensionMismatch, "regress: one feature row expected");
  return regress_batch(net, model, flow, features).front();
}

RegressorOutput regress(const RegressorNet& net, const ModelBundle& model, const FlowPrior& flow,
                        const Observation2D& obs) {
  return regress_features(net, model, flow, encode_observation(net, obs));
}

ShapeParams decode_shape(const RegressorNet& net, const Vec& z, Vec* logits) {
  require(z.size() == net.arch.z_dim, ErrorCode::DimensionMismatch, "decode_shape: z size");
  const Mat zr = z.transpose();
  ShapeParams s;
  s.beta = (zr * net.beta_head.w + net.beta_head.b).transpose();
  s.kappa = (zr * net.kappa_head.w + net.kappa_head.b).transpose();
  if (logits) *logits = (zr * net.class_head.w + net.class_head.b).transpose();
  return s;
}

// -- config --------------------------------------------------------------------------

const char* breed_losses_name(BreedLosses b) {
  switch (b) {
    case BreedLosses::None: return "none";
    case BreedLosses::Sim: return "sim";
    case BreedLosses::Sim3D: return "sim3d";
  }
  return "?";
}

BreedLosses breed_losses_from_name(const std::string& s) {
  if (s == "none") return BreedLosses::None;
  if (s == "sim") return BreedLosses::Sim;
  if (s == "sim3d") return BreedLosses::Sim3D;
  fail(ErrorCode::InvalidArgument, "breed_losses must be one of none, sim, sim3d; got '" + s + "'");
}

void TrainConfig::validate() const {
  require(epochs >= 0 && batch_size >= 1 && lr > 0 && sigma > 0, ErrorCode::InvalidArgument,
          "train config: epochs, batch_size, lr and sigma must be positive");
  require(breeds_per_batch >= 1 && batch_size % breeds_per_batch == 0, ErrorCode::InvalidArgument,
          "train config: batch_size must be a multiple of breeds_per_batch");
  if (breed_losses != BreedLosses::None && weights.w_triplet > 0) {
    require(breeds_per_batch >= 2 && batch_size / breeds_per_batch >= 2, ErrorCode::InvalidArgument,
            "train config: the triplet loss needs at least 2 breeds and 2 instances per breed in a batch");
  }
  require(pretrain_samples >= 0 && pretrain_epochs >= 0 && pretrain_lr > 0 && pretrain_shape_spread >= 0,
          ErrorCode::InvalidArgument, "train config: bad pretraining settings");
  require(arch.hidden >= 1 && arch.hidden_layers >= 1 && arch.z_dim >= 1 && arch.bps_points >= 1,
          ErrorCode::InvalidArgument, "train config: bad architecture");
  weights.validate();
  pretrain_camera.validate();
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = weights;
  if (breed_losses == BreedLosses::None) w.w_cs = w.w_triplet = 0.0;
  if (breed_losses != BreedLosses::Sim3D) w.w_3d = 0.0;
  return w;
}

TrainConfig TrainConfig::from_json(const Json& j) {
  const std::string w = "train config";
  check_json_keys(j,
                  {"arch", "epochs", "batch_size", "breeds_per_batch", "lr", "weights", "breed_losses", "sigma",
                   "pretrain_samples", "pretrain_shape_spread", "pretrain_epochs", "pretrain_lr", "pretrain_camera",
                   "seed"},
                  w);
  TrainConfig c;
  if (j.contains("arch")) {
    const Json& a = j.at("arch");
    check_json_keys(a, {"hidden", "hidden_layers", "z_dim", "bps_points", "bps_seed"}, "train config arch");
    read_json_field(a, "hidden", c.arch.hidden, w);
    read_json_field(a, "hidden_layers", c.arch.hidden_layers, w);
    read_json_field(a, "z_dim", c.arch.z_dim, w);
    read_json_field(a, "bps_points", c.arch.bps_points, w);
    read_json_field(a, "bps_seed", c.arch.bps_seed, w);
  }
  read_json_field(j, "epochs", c.epochs, w);
  read_json_field(j, "batch_size", c.batch_size, w);
  read_json_field(j, "breeds_per_batch", c.breeds_per_batch, w);
  read_json_field(j, "lr", c.lr, w);
  if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
  std::string mode = breed_losses_name(c.breed_losses);
  read_json_field(j, "breed_losses", mode, w);
  c.breed_losses = breed_losses_from_name(mode);
  read_json_field(j, "sigma", c.sigma, w);
  read_json_field(j, "pretrain_samples", c.pretrain_samples, w);
  read_json_field(j, "pretrain_shape_spread", c.pretrain_shape_spread, w);
  read_json_field(j, "pretrain_epochs", c.pretrain_epochs, w);
  read_json_field(j, "pretrain_lr", c.pretrain_lr, w);
  if (j.contains("pretrain_camera")) c.pretrain_camera = DatasetConfig::from_json(j.at("pretrain_camera"));
  read_json_field(j, "seed", c.seed, w);
  c.validate();
  return c;
}

Json TrainConfig::to_json() const {
  return {{"arch",
           {{"hidden", arch.hidden},
            {"hidden_layers", arch.hidden_layers},
            {"z_dim", arch.z_dim},
            {"bps_points", arch.bps_points},
            {"bps_seed", arch.bps_seed}}},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"breeds_per_batch", breeds_per_batch},
          {"lr", lr},
          {"weights", weights.to_json()},
          {"breed_losses", breed_losses_name(breed_losses)},
          {"sigma", sigma},
          {"pretrain_samples", pretrain_samples},
          {"pretrain_shape_spread", pretrain_shape_spread},
          {"pretrain_epochs", pretrain_epochs},
          {"pretrain_lr", pretrain_lr},
          {"pretrain_camera", pretrain_camera.to_json()},
          {"seed", seed}};
}

// -- evaluation ------------------------------------------------------------------------

std::vector<BreedReport> evaluate_predictions(const std::vector<SynthInstance>& data,
                                              const std::vector<FitState>& predicted,
                                              const std::vector<BreedSpec>& breeds, const ModelBundle& model,
                                              const std::string& split) {
  require(predicted.size() == data.size(), ErrorCode::DimensionMismatch, "evaluate: one prediction per instance");
  std::map<int, std::vector<std::size_t>> by_breed;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!split.empty() && data[i].obs.split != split) continue;
    require(data[i].breed >= 0 && data[i].breed < static_cast<int>(breeds.size()), ErrorCode::InvalidArgument,
            "evaluate: instance " + std::to_string(i) + " has an unknown breed");
    by_breed[data[i].breed].push_back(i);
  }
  std::vector<BreedReport> out;
  for (const auto& [b, idx] : by_breed) {
    BreedReport r;
    r.breed = b;
    r.name = breeds[b].name;
    r.n = static_cast<int>(idx.size());
    std::vector<ShapeParams> shapes;
    for (std::size_t i : idx) {
      const SynthInstance& s = data[i];
      const FitState& p = predicted[i];
      shapes.push_back(p.shape);
      const PosedState posed = pose_state(p, model, s.obs.width, s.obs.height);
      r.pck += pck(posed.keypoints2d, s.obs.keypoints, s.obs.visible, s.obs.mask, 0.15);
      r.iou += iou(hard_rasterize(posed.vertices2d, model.mesh.faces, s.obs.width, s.obs.height), s.obs.mask);
    }
    r.pck /= r.n;
    r.iou /= r.n;
    const Consistency c = prototype_consistency(shapes, repose_tpose(breeds[b].prototype, model), model);
    r.mean_v2v = c.mean;
    r.var_v2v = c.variance;
    out.push_back(r);
  }
  return out;
}

// -- training --------------------------------------------------------------------------

namespace {

std::vector<double> target_row(const FitState& s) {
  std::vector<double> t(s.pose.root_rot6d.begin(), s.pose.root_rot6d.end());
  for (Eigen::Index k = 0; k < s.pose.latent.size(); ++k) t.push_back(s.pose.latent[k]);
  for (int k = 0; k < 3; ++k) t.push_back(s.pose.translation[k]);
  t.push_back(std::log(s.focal));
  return t;
}

Mat value_bone_lengths(const ModelBundle& model, const ShapeParams& shape) {
  ad::Tape tape;
  const graph::ShapedBody body =
      graph::shape_body(model, tape.constant(shape.beta.transpose()), tape.constant(shape.kappa.transpose()));
  return graph::bone_lengths(body).value();
}

// Supervised pose-branch pretraining on sampled ground truth (shape branch untouched).
void pretrain_pose(RegressorNet& net, const ModelBundle& model, const FlowPrior& flow, const TrainConfig& cfg,
                   double* initial, double* final_loss) {
  *initial = *final_loss = 0.0;
  if (cfg.pretrain_samples == 0) return;
  BreedSpec generic;
  generic.name = "pretrain";
  generic.prototype = ShapeParams::zeros(net.num_components);
  generic.intra_std_beta = cfg.pretrain_shape_spread * model.space.eigenvalues.cwiseMax(0.0).cwiseSqrt();
  generic.intra_std_kappa = Vec::Constant(kNumScaleGroups, cfg.pretrain_shape_spread * kKappaUnit);
  DatasetConfig dc = cfg.pretrain_camera;
  dc.per_breed = cfg.pretrain_samples;
  dc.width = net.width;
  dc.height = net.height;
  dc.val_fraction = dc.test_fraction = 0.0;
  dc.seed = Rng(cfg.seed).fork(11).next_u64();
  const std::vector<SynthInstance> samples = gen_dataset(model, flow, {generic}, dc);

  const int n = static_cast<int>(samples.size());
  const int P = PoseOutputLayout{net.latent_dim}.size();
  Mat inputs(n, net.feature_dim() + net.num_bones), targets(n, P);
  for (int i = 0; i < n; ++i) {
    const Mat f = (encode_observation(net, samples[i].obs) - net.feature_mean).array() / net.feature_std.array();
    inputs.row(i) << f, value_bone_lengths(model, samples[i].truth.shape);
    const std::vector<double> t = target_row(samples[i].truth);
    for (int k = 0; k < P; ++k) targets(i, k) = t[k];
  }
  net.pose_mean = round_to_float(targets.colwise().mean());
  Mat var = (targets.rowwise() - net.pose_mean.row(0)).colwise().squaredNorm() / n;
  net.pose_std = round_to_float(var.cwiseSqrt().cwiseMax(1e-3));
  const Mat scaled = (targets.rowwise() - net.pose_mean.row(0)).array().rowwise() / net.pose_std.row(0).array();

  std::vector<Mat*> params;
  for (Dense& d : net.pose_mlp.layers) {
    params.push_back(&d.w);
    params.push_back(&d.b);
  }
  std::vector<AdamMoments> moments(params.size());
  const AdamConfig adam{cfg.pretrain_lr, 0.9, 0.999, 1e-8};
  Rng rng = Rng(cfg.seed).fork(12);
  const int batch = 64;
  auto loss_of = [&](const std::vector<int>& idx, bool step) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (Mat* m : params) vars.push_back(tape.variable(*m));
    Mat x(idx.size(), inputs.cols()), y(idx.size(), P);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      x.row(r) = inputs.row(idx[r]);
      y.row(r) = scaled.row(idx[r]);
    }
    std::size_t at = 0;
    const ad::Var out = mlp_forward(net.pose_mlp, vars, at, tape.constant(x));
    const ad::Var loss = ad::mean(ad::square(out - tape.constant(y)));
    if (step) {
      tape.backward(loss);
      for (std::size_t k = 0; k < params.size(); ++k) {
        adam_step(*params[k], tape.grad(vars[k]), moments[k], adam);
        *params[k] = round_to_float(*params[k]);
      }
    }
    return loss.item();
  };
  std::vector<int> all(n);
  std::iota(all.begin(), all.end(), 0);
  *initial = loss_of(all, false);
  for (int e = 0; e < cfg.pretrain_epochs; ++e) {
    std::vector<int> order = all;
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
    for (int from = 0; from < n; from += batch) {
      std::vector<int> idx(order.begin() + from, order.begin() + std::min(n, from + batch));
      const double l = loss_of(idx, true);
      if (!std::isfinite(l)) fail(ErrorCode::Divergence, "pose pretraining: non-finite loss in epoch " + std::to_string(e));
    }
  }
  *final_loss = loss_of(all, false);
}

struct Validation {
  double kp_error = 0.0, proto_mean = 0.0, proto_var = 0.0, cluster = 0.0;
  std::vector<double> per_breed;
};

Validation validate_net(const RegressorNet& net, const std::vector<SynthInstance>& data, const Mat& features,
                        const std::vector<int>& val, const std::vector<BreedSpec>& breeds, const ModelBundle& model,
                        const FlowPrior& flow) {
  Validation v;
  if (val.empty()) return v;
  Mat x(val.size(), features.cols());
  for (std::size_t r = 0; r < val.size(); ++r) x.row(r) = features.row(val[r]);
  const std::vector<RegressorOutput> out = regress_batch(net, model, flow, x);
  std::vector<SynthInstance> subset;
  std::vector<FitState> pred;
  Mat z(val.size(), net.arch.z_dim);
  std::vector<int> labels;
  for (std::size_t r = 0; r < val.size(); ++r) {
    const SynthInstance& s = data[val[r]];
    subset.push_back(s);
    pred.push_back(out[r].state);
    z.row(r) = out[r].z.transpose();
    labels.push_back(s.breed);
    const PosedState p = pose_state(out[r].state, model, s.obs.width, s.obs.height);
    v.kp_error += mean_keypoint_error(p.keypoints2d, s.obs.keypoints, s.obs.visible);
  }
  v.kp_error /= static_cast<double>(val.size());
  for (const BreedReport& b : evaluate_predictions(subset, pred, breeds, model, "")) {
    v.per_breed.push_back(b.mean_v2v);
    v.proto_mean += b.mean_v2v;
    v.proto_var += b.var_v2v;
  }
  v.proto_mean /= static_cast<double>(v.per_breed.size());
  v.proto_var /= static_cast<double>(v.per_breed.size());
  try {
    v.cluster = cluster_quality(z, labels).score;
  } catch (const Error&) {
    v.cluster = std::numeric_limits<double>::quiet_NaN();
  }
  return v;
}

}  // namespace

TrainResult train_regressor(const std::vector<SynthInstance>& data, const std::vector<BreedSpec>& breeds,
                            const ModelBundle& model, const Priors& priors, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<int> train, val;
  std::map<int, std::vector<int>> train_by_breed;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const SynthInstance& s = data[i];
    require(s.breed >= 0 && s.breed < static_cast<int>(breeds.size()), ErrorCode::InvalidArgument,
            "train_regressor: instance " + std::to_string(i) + " has no valid breed label");
    if (s.obs.split == "train") {
      train.push_back(static_cast<int>(i));
      train_by_breed[s.breed].push_back(static_cast<int>(i));
    } else if (s.obs.split == "val") {
      val.push_back(static_cast<int>(i));
    }
  }
  require(!train.empty(), ErrorCode::InvalidArgument, "train_regressor: no training instances");
  const int width = data[train.front()].obs.width, height = data[train.front()].obs.height;
  const LossWeights weights = cfg.effective_weights();
  if (weights.w_triplet > 0) {
    require(train_by_breed.size() >= 2, ErrorCode::InvalidArgument, "train_regressor: the triplet loss needs 2 breeds");
  }

  TrainResult res;
  res.net = RegressorNet::create(model, priors.flow, static_cast<int>(breeds.size()), width, height, cfg.arch,
                                 Rng(cfg.seed).fork(10).next_u64());
  RegressorNet& net = res.net;
  Mat features(data.size(), net.feature_dim());
  for (std::size_t i = 0; i < data.size(); ++i) features.row(i) = encode_observation(net, data[i].obs);
  {
    Mat tf(train.size(), features.cols());
    for (std::size_t r = 0; r < train.size(); ++r) tf.row(r) = features.row(train[r]);
    net.feature_mean = round_to_float(tf.colwise().mean());
    const Mat var = (tf.rowwise() - net.feature_mean.row(0)).colwise().squaredNorm() / static_cast<double>(tf.rows());
    // constant features (e.g. always-visible flags) are only centered
    net.feature_std = round_to_float(var.cwiseSqrt().unaryExpr([](double sd) { return sd < 1e-3 ? 1.0 : sd; }));
  }
  pretrain_pose(net, model, priors.flow, cfg, &res.pretrain_initial, &res.pretrain_final);

  LossContext ctx;
  ctx.model = &model;
  ctx.flow = &priors.flow;
  ctx.shape_prior = &priors.shape;
  ctx.weights = weights;
  ctx.sigma = cfg.sigma;
  ctx.mode = LossMode::Train;

  const std::vector<Mat*> params = net.parameters();
  std::vector<AdamMoments> moments(params.size());
  const AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
  Rng rng = Rng(cfg.seed).fork(13);
  std::vector<int> breed_ids;
  for (const auto& [b, idx] : train_by_breed) breed_ids.push_back(b);
  const int per_breed = cfg.batch_size / cfg.breeds_per_batch;
  const int take_breeds = std::min<int>(cfg.breeds_per_batch, static_cast<int>(breed_ids.size()));
  const int steps = (static_cast<int>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
  std::map<int, std::vector<int>> queue;  // per-breed shuffled instance queue

  auto record = [&](int epoch, EpochRecord rec) {
    const Validation v = validate_net(net, data, features, val, breeds, model, priors.flow);
    rec.epoch = epoch;
    rec.val_kp_error = v.kp_error;
    rec.val_proto_mean = v.proto_mean;
    rec.val_proto_var = v.proto_var;
    rec.val_cluster = v.cluster;
    rec.val_proto_per_breed = v.per_breed;
    res.history.push_back(rec);
  };
  record(0, EpochRecord{});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    for (int step = 0; step < steps; ++step) {
      // breed-stratified batch
      std::vector<int> chosen = breed_ids;
      for (int i = static_cast<int>(chosen.size()) - 1; i > 0; --i) std::swap(chosen[i], chosen[rng.index(i + 1)]);
      chosen.resize(take_breeds);
      std::sort(chosen.begin(), chosen.end());
      std::vector<int> batch;
      for (int b : chosen) {
        for (int k = 0; k < per_breed; ++k) {
          std::vector<int>& q = queue[b];
          if (q.empty()) {
            q = train_by_breed[b];
            for (int i = static_cast<int>(q.size()) - 1; i > 0; --i) std::swap(q[i], q[rng.index(i + 1)]);
          }
          batch.push_back(q.back());
          q.pop_back();
        }
      }

      ad::Tape tape;
      Mat x(batch.size(), features.cols());
      std::vector<int> labels;
      for (std::size_t r = 0; r < batch.size(); ++r) {
        x.row(r) = features.row(batch[r]);
        labels.push_back(data[batch[r]].breed);
      }
      const std::string where = "epoch " + std::to_string(epoch) + ", step " + std::to_string(step);
      const graph::RegressorVars v = graph::regressor_forward(tape, net, model, x, true);
      const std::vector<ad::Var> flow_params = graph::bind_flow(tape, priors.flow, false);
      std::vector<ad::Var> totals;
      std::array<double, kNumTerms> terms{};
      // the inputs are validated, so a geometric error here means the weights blew up
      try {
        for (std::size_t r = 0; r < batch.size(); ++r) {
          const int row[] = {static_cast<int>(r)};
          InstanceVars iv{ad::gather_rows(v.beta, row),        ad::gather_rows(v.kappa, row),
                          ad::gather_rows(v.root6d, row),      ad::gather_rows(v.latent, row),
                          ad::gather_rows(v.translation, row), ad::gather_rows(v.log_focal, row),
                          ad::gather_rows(v.logits, row)};
          const SynthInstance& s = data[batch[r]];
          const ShapeParams* ref = weights.w_3d > 0 ? &breeds[s.breed].prototype : nullptr;
          LossBreakdown bd;
          totals.push_back(total_loss(ctx, flow_params, iv, s.obs, ref, &bd));
          for (int t = 0; t < kNumTerms; ++t) terms[t] += bd.value[t] / static_cast<double>(batch.size());
        }
      } catch (const Error& e) {
        throw TrainDivergence("train_regressor: " + std::string(e.what()) + " in " + where, res.history);
      }
      ad::Var loss = ad::mean(ad::concat_rows(std::span<const ad::Var>(totals)));
      double n_triplets = 0.0;
      if (weights.w_triplet > 0) {
        const auto triples = mine_triplets(v.z.value(), labels);
        n_triplets = static_cast<double>(triples.size());
        if (!triples.empty()) {
          const ad::Var trip = weights.w_triplet * graph::triplet_loss(v.z, triples, weights.margin) / n_triplets;
          terms[static_cast<int>(Term::Triplet)] = trip.item();
          loss = loss + trip;
        }
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw TrainDivergence("train_regressor: non-finite loss in " + where, res.history);
      }
      tape.backward(loss);
      for (std::size_t k = 0; k < params.size(); ++k) {
        adam_step(*params[k], tape.grad(v.params[k]), moments[k], adam);
        *params[k] = round_to_float(*params[k]);
      }
      for (int t = 0; t < kNumTerms; ++t) rec.terms[t] += terms[t] / steps;
      rec.total += value / steps;
      rec.triplets += n_triplets / steps;
    }
    record(epoch, rec);
  }
  return res;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,total";
  for (int t = 0; t < kNumTerms; ++t) out += std::string(",") + term_name(static_cast<Term>(t));
  out += ",triplets,val_kp_error,val_proto_mean,val_proto_var,val_cluster";
  const std::size_t nb = history.empty() ? 0 : history.back().val_proto_per_breed.size();
  for (std::size_t b = 0; b < nb; ++b) out += ",val_proto_" + std::to_string(b);
  out += "\n";
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, ",%.17g", x);
    out += buf;
  };
  for (const EpochRecord& r : history) {
    out += std::to_string(r.epoch);
    num(r.total);
    for (double t : r.terms) num(t);
    num(r.triplets);
    num(r.val_kp_error);
    num(r.val_proto_mean);
    num(r.val_proto_var);
    num(r.val_cluster);
    for (double b : r.val_proto_per_breed) num(b);
    out += "\n";
  }
  return out;
}

// -- files -----------------------------------------------------------------------------

void save_regressor(const std::string& dir, const RegressorNet& net) {
  fs::create_directories(dir);
  std::vector<const Mat*> all = net.parameters();
  all.push_back(&net.pose_mean);
  all.push_back(&net.pose_std);
  all.push_back(&net.feature_mean);
  all.push_back(&net.feature_std);
  Eigen::Index total = 0;
  Json shapes = Json::array();
  for (const Mat* m : all) {
    total += m->size();
    shapes.push_back({m->rows(), m->cols()});
  }
  Mat flat(1, total);
  Eigen::Index at = 0;
  for (const Mat* m : all) {
    flat.block(0, at, 1, m->size()) = Eigen::Map<const Mat>(m->data(), 1, m->size());
    at += m->size();
  }
  write_flat((fs::path(dir) / "regressor.bin").string(), flat);
  Json j;
  j["format"] = "quadfit-regressor";
  j["version"] = 1;
  j["arch"] = {{"hidden", net.arch.hidden},
               {"hidden_layers", net.arch.hidden_layers},
               {"z_dim", net.arch.z_dim},
               {"bps_points", net.arch.bps_points},
               {"bps_seed", net.arch.bps_seed}};
  j["num_keypoints"] = net.num_keypoints;
  j["num_breeds"] = net.num_breeds;
  j["num_components"] = net.num_components;
  j["latent_dim"] = net.latent_dim;
  j["num_bones"] = net.num_bones;
  j["width"] = net.width;
  j["height"] = net.height;
  j["tensor_shapes"] = shapes;
  j["parameter_count"] = total;
  write_json((fs::path(dir) / "regressor.json").string(), j);
}

RegressorNet load_regressor(const std::string& dir) {
  const Json j = read_json((fs::path(dir) / "regressor.json").string());
  RegressorNet net;
  try {
    require(j.at("format") == "quadfit-regressor", ErrorCode::Format, "regressor.json: wrong format tag");
    const Json& a = j.at("arch");
    net.arch.hidden = a.at("hidden");
    net.arch.hidden_layers = a.at("hidden_layers");
    net.arch.z_dim = a.at("z_dim");
    net.arch.bps_points = a.at("bps_points");
    net.arch.bps_seed = a.at("bps_seed");
    net.num_keypoints = j.at("num_keypoints");
    net.num_breeds = j.at("num_breeds");
    net.num_components = j.at("num_components");
    net.latent_dim = j.at("latent_dim");
    net.num_bones = j.at("num_bones");
    net.width = j.at("width");
    net.height = j.at("height");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("regressor.json: ") + e.what());
  }
  // rebuild the topology, then overwrite every tensor
  Rng rng(0);
  const RegressorArch& arch = net.arch;
  net.bps_basis = quadfit::bps_basis(arch.bps_points, arch.bps_seed);
  net.shape_mlp = make_mlp(rng, net.feature_dim(), arch.hidden, arch.hidden_layers, arch.z_dim, 1.0);
  net.class_head = make_dense(rng, arch.z_dim, net.num_breeds, 1.0);
  net.beta_head = make_dense(rng, arch.z_dim, net.num_components, 1.0);
  net.kappa_head = make_dense(rng, arch.z_dim, kNumScaleGroups, 1.0);
  const int P = PoseOutputLayout{net.latent_dim}.size();
  net.pose_mlp = make_mlp(rng, net.feature_dim() + net.num_bones, arch.hidden, arch.hidden_layers, P, 1.0);
  net.pose_mean = Mat::Zero(1, P);
  net.pose_std = Mat::Ones(1, P);
  net.feature_mean = Mat::Zero(1, net.feature_dim());
  net.feature_std = Mat::Ones(1, net.feature_dim());

  std::vector<Mat*> all = net.parameters();
  all.push_back(&net.pose_mean);
  all.push_back(&net.pose_std);
  all.push_back(&net.feature_mean);
  all.push_back(&net.feature_std);
  const Mat flat = read_flat((fs::path(dir) / "regressor.bin").string());
  Eigen::Index total = 0;
  for (const Mat* m : all) total += m->size();
  require(flat.rows() == 1 && flat.cols() == total, ErrorCode::Format,
          "regressor.bin: expected " + std::to_string(total) + " values, found " + std::to_string(flat.size()));
  const Json& shapes = j.at("tensor_shapes");
  require(shapes.size() == all.size(), ErrorCode::Format, "regressor.json: tensor count does not match the topology");
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    Mat* m = all[i];
    require(shapes[i][0] == m->rows() && shapes[i][1] == m->cols(), ErrorCode::Format,
            "regressor.json: tensor " + std::to_string(i) + " has an unexpected shape");
    *m = Eigen::Map<const Mat>(flat.data() + at, m->rows(), m->cols());
    at += m->size();
  }
  return net;
}

}  // namespace quadfit
