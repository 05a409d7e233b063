#include "quadfit/fitter.hpp"
#include "quadfit/io.hpp"

#include <Eigen/Geometry>

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <thread>

namespace quadfit {

// -- priors on disk ------------------------------------------------------------------

void save_priors(const std::string& dir, const Priors& priors) {
  save_flow(dir, priors.flow);
  Json j;
  j["format"] = "quadfit-shape-prior";
  j["mu"] = std::vector<double>(priors.shape.mu.data(), priors.shape.mu.data() + priors.shape.mu.size());
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < priors.shape.sigma.rows(); ++r) {
    std::vector<double> row(priors.shape.sigma.cols());
    for (Eigen::Index c = 0; c < priors.shape.sigma.cols(); ++c) row[c] = priors.shape.sigma(r, c);
    rows.push_back(row);
  }
  j["sigma"] = rows;
  write_json((std::filesystem::path(dir) / "shape_prior.json").string(), j);
}

Priors load_priors(const std::string& dir) {
  Priors p;
  p.flow = load_flow(dir);
  const Json j = read_json((std::filesystem::path(dir) / "shape_prior.json").string());
  try {
    const std::vector<double> mu = j.at("mu");
    const std::vector<std::vector<double>> rows = j.at("sigma");
    Mat sigma(rows.size(), mu.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      require(rows[r].size() == mu.size(), ErrorCode::Format, "shape_prior.json: ragged covariance");
      for (std::size_t c = 0; c < mu.size(); ++c) sigma(r, c) = rows[r][c];
    }
    p.shape = GaussianShapePrior::from_covariance(Eigen::Map<const Vec>(mu.data(), mu.size()), sigma);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("shape_prior.json: ") + e.what());
  }
  return p;
}

// -- state -----------------------------------------------------------------------------

namespace {

Mat row_of(const Vec& v) { return Eigen::Map<const Mat>(v.data(), 1, v.size()); }

std::array<double, 6> to6(const Mat3& R) { return rotmat_to_rot6d(R); }

Mat joint_rot6d_from_theta(const Mat& theta, int num_joints) {
  Mat out(num_joints - 1, 6);
  for (int j = 0; j < num_joints - 1; ++j) {
    const auto r = rotmat_to_rot6d(axis_angle_to_rotmat(theta.block(0, 3 * j, 1, 3).transpose()));
    for (int k = 0; k < 6; ++k) out(j, k) = r[k];
  }
  return out;
}

}  // namespace

Mat3 camera_facing_root(double yaw) {
  // the body's up axis is +y while camera y points down, so flip about x first
  return Eigen::AngleAxisd(std::numbers::pi, Vec3::UnitX()).toRotationMatrix() *
         Eigen::AngleAxisd(yaw, Vec3::UnitY()).toRotationMatrix();
}

void FitState::decode(const FlowPrior& flow) {
  const Mat theta = flow.inverse(row_of(pose.latent));
  pose.joint_rot6d = joint_rot6d_from_theta(theta, flow.dim / 3 + 1);
}

PosedState pose_state(const FitState& s, const ModelBundle& model, int width, int height) {
  const int K = model.space.num_components();
  require(s.shape.beta.size() == K && s.shape.kappa.size() == kNumScaleGroups, ErrorCode::DimensionMismatch,
          "pose_state: shape parameter sizes");
  const Mat shaped = apply_shape(model.space, std::span<const double>(s.shape.beta.data(), K));
  const Mat rest_joints = model.joint_regressor * shaped;
  const LimbScaleResult ls = apply_limb_scales(model.skeleton, rest_joints, shaped, model.mesh.lbs_weights,
                                               std::span<const double>(s.shape.kappa.data(), kNumScaleGroups));
  PosedState p;
  p.world = forward_kinematics(model.skeleton, ls.offsets, s.pose.root_rot6d, s.pose.joint_rot6d, s.pose.translation);
  p.vertices = lbs_skin(ls.vertices, model.mesh.lbs_weights, p.world, ls.joints);
  p.keypoints3d.resize(model.num_keypoints(), 3);
  for (int i = 0; i < model.num_keypoints(); ++i) {
    const KeypointDef& d = model.mesh.keypoints[i];
    p.keypoints3d.row(i) =
        d.anchor == KeypointDef::Anchor::Vertex ? Mat(p.vertices.row(d.index)) : Mat(p.world.block(d.index, 9, 1, 3));
  }
  const Camera cam = Camera::centered(width, height, s.focal);
  p.keypoints2d = project(p.keypoints3d, cam, Vec3::Zero());
  p.vertices2d = project(p.vertices, cam, Vec3::Zero());
  return p;
}

// -- config --------------------------------------------------------------------------

FitConfig FitConfig::defaults() {
  FitConfig c;
  c.stages = {
      {kTranslation | kRoot | kFocal, 150, 0.05, false},
      {kTranslation | kRoot | kFocal | kLatent, 200, 0.02, false},
      {kTranslation | kRoot | kFocal | kLatent | kBeta | kKappa, 300, 0.01, true},
  };
  c.root_yaw_starts = {0.0, std::numbers::pi};
  return c;
}

void FitConfig::validate() const {
  require(!stages.empty(), ErrorCode::InvalidArgument, "fit config: at least one stage");
  for (const FitStage& s : stages) {
    require(s.iterations > 0 && s.lr > 0.0 && s.free != 0, ErrorCode::InvalidArgument,
            "fit config: every stage needs free leaves, positive iterations and a positive rate");
  }
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0, ErrorCode::InvalidArgument,
          "fit config: Adam hyperparameters out of range");
  require(sigma > 0 && sigma_factor > 0 && sigma_halvings >= 0, ErrorCode::InvalidArgument,
          "fit config: bad sigma schedule");
  require(!root_yaw_starts.empty(), ErrorCode::InvalidArgument, "fit config: at least one root start");
  weights.validate();
}

namespace {

const std::pair<const char*, unsigned> kLeafNames[] = {
    {"translation", kTranslation}, {"root", kRoot}, {"focal", kFocal},
    {"latent", kLatent},           {"beta", kBeta}, {"kappa", kKappa},
};

}  // namespace

FitConfig FitConfig::from_json(const Json& j) {
  check_json_keys(j, {"stages", "beta1", "beta2", "eps", "sigma", "sigma_factor", "sigma_halvings", "root_yaw_starts",
                 "weights", "seed"},
             "fit config");
  FitConfig c = defaults();
  try {
    if (j.contains("stages")) {
      c.stages.clear();
      for (const Json& s : j.at("stages")) {
        check_json_keys(s, {"free", "iterations", "lr", "silhouette"}, "fit stage");
        FitStage st;
        for (const std::string name : s.at("free")) {
          bool found = false;
          for (const auto& [n, bit] : kLeafNames) {
            if (name == n) {
              st.free |= bit;
              found = true;
            }
          }
          require(found, ErrorCode::InvalidArgument, "fit stage: unknown leaf '" + name + "'");
        }
        st.iterations = s.at("iterations");
        st.lr = s.at("lr");
        st.silhouette = s.value("silhouette", false);
        c.stages.push_back(st);
      }
    }
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.sigma = j.value("sigma", c.sigma);
    c.sigma_factor = j.value("sigma_factor", c.sigma_factor);
    c.sigma_halvings = j.value("sigma_halvings", c.sigma_halvings);
    if (j.contains("root_yaw_starts")) c.root_yaw_starts = j.at("root_yaw_starts").get<std::vector<double>>();
    if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("fit config: ") + e.what());
  }
  c.validate();
  return c;
}

Json FitConfig::to_json() const {
  Json j;
  Json st = Json::array();
  for (const FitStage& s : stages) {
    Json free = Json::array();
    for (const auto& [n, bit] : kLeafNames)
      if (s.free & bit) free.push_back(n);
    st.push_back({{"free", free}, {"iterations", s.iterations}, {"lr", s.lr}, {"silhouette", s.silhouette}});
  }
  j["stages"] = st;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["eps"] = eps;
  j["sigma"] = sigma;
  j["sigma_factor"] = sigma_factor;
  j["sigma_halvings"] = sigma_halvings;
  j["root_yaw_starts"] = root_yaw_starts;
  j["weights"] = weights.to_json();
  j["seed"] = seed;
  return j;
}

std::vector<double> FitResult::running_best() const {
  std::vector<double> out(trace.size());
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < trace.size(); ++i) out[i] = best = std::min(best, trace[i]);
  return out;
}

// -- fitting --------------------------------------------------------------------------

namespace {

// Optimized quantities as row vectors, in Leaf bit order.
struct Leaves {
  Mat translation, root, log_focal, latent, beta, kappa;

  Mat* at(int i) {
    Mat* all[] = {&translation, &root, &log_focal, &latent, &beta, &kappa};
    return all[i];
  }
};
constexpr int kNumLeaves = 6;

Leaves to_leaves(const FitState& s) {
  Leaves l;
  l.translation = s.pose.translation.transpose();
  l.root = Eigen::Map<const Mat>(s.pose.root_rot6d.data(), 1, 6);
  l.log_focal = Mat::Constant(1, 1, std::log(s.focal));
  l.latent = row_of(s.pose.latent);
  l.beta = row_of(s.shape.beta);
  l.kappa = row_of(s.shape.kappa);
  return l;
}

FitState from_leaves(const Leaves& l, const FlowPrior& flow) {
  FitState s;
  s.pose.translation = l.translation.row(0).transpose();
  for (int k = 0; k < 6; ++k) s.pose.root_rot6d[k] = l.root(0, k);
  s.focal = std::exp(l.log_focal(0, 0));
  s.pose.latent = l.latent.row(0).transpose();
  s.shape.beta = l.beta.row(0).transpose();
  s.shape.kappa = l.kappa.row(0).transpose();
  s.decode(flow);
  return s;
}

struct Objective {
  const Observation2D* obs;
  const ModelBundle* model;
  const Priors* priors;
  LossWeights weights;
  double sigma;

  // Loss at `l`; fills gradients of the free leaves when grads is given.
  double eval(const Leaves& l, unsigned free, std::array<Mat, kNumLeaves>* grads, LossBreakdown* bd) const {
    LossContext ctx;
    ctx.model = model;
    ctx.flow = &priors->flow;
    ctx.shape_prior = &priors->shape;
    ctx.weights = weights;
    ctx.sigma = sigma;
    ctx.mode = LossMode::Fit;
    ad::Tape t;
    Leaves& m = const_cast<Leaves&>(l);
    std::array<ad::Var, kNumLeaves> v;
    for (int i = 0; i < kNumLeaves; ++i) {
      const bool is_free = grads && (free & (1u << i));
      v[i] = is_free ? t.variable(*m.at(i)) : t.constant(*m.at(i));
    }
    const auto fp = graph::bind_flow(t, priors->flow, false);
    InstanceVars iv{v[4], v[5], v[1], v[3], v[0], v[2], ad::Var()};
    ad::Var loss = total_loss(ctx, fp, iv, *obs, nullptr, bd);
    const double value = loss.item();
    if (grads && std::isfinite(value)) {
      t.backward(loss);
      for (int i = 0; i < kNumLeaves; ++i)
        if (free & (1u << i)) (*grads)[i] = t.grad(v[i]);
    }
    return value;
  }
};

[[noreturn]] void diverged(const std::vector<double>& trace, const std::string& where) {
  std::string tail;
  const std::size_t from = trace.size() > 5 ? trace.size() - 5 : 0;
  for (std::size_t i = from; i < trace.size(); ++i) tail += (i > from ? ", " : "") + std::to_string(trace[i]);
  fail(ErrorCode::Divergence, "fit diverged in " + where + " after " + std::to_string(trace.size()) +
                                  " iterations; last losses [" + tail + "]");
}

}  // namespace

FitState initial_state(const Observation2D& obs, const ModelBundle& model, const Priors& priors,
                     const FitConfig& config) {
  FitState s;
  s.shape.beta = priors.shape.mu;
  s.shape.kappa = Vec::Zero(kNumScaleGroups);
  s.pose.latent = Vec::Zero(priors.flow.dim);
  s.focal = config.weights.f_target;
  s.pose.root_rot6d = to6(camera_facing_root(config.root_yaw_starts.front()));
  s.decode(priors.flow);

  // depth from the ratio of 3D to 2D keypoint spread, then center the projection
  s.pose.translation = Vec3::Zero();
  FitState far = s;
  far.pose.translation = Vec3(0, 0, 1e3);  // keeps every point in front of the camera
  const PosedState body = pose_state(far, model, obs.width, obs.height);
  Mat p3 = body.keypoints3d;
  p3.col(2).array() -= 1e3;
  Eigen::RowVector2d c2 = Eigen::RowVector2d::Zero();
  Eigen::RowVector3d c3 = Eigen::RowVector3d::Zero();
  int n = 0;
  for (Eigen::Index i = 0; i < obs.keypoints.rows(); ++i) {
    if (obs.visible[i] <= 0.5) continue;
    c2 += obs.keypoints.row(i);
    c3 += p3.row(i);
    ++n;
  }
  require(n > 0, ErrorCode::Precondition, "initial_state: no visible keypoints");
  c2 /= n;
  c3 /= n;
  double s2 = 0.0, s3 = 0.0;
  for (Eigen::Index i = 0; i < obs.keypoints.rows(); ++i) {
    if (obs.visible[i] <= 0.5) continue;
    s2 += (obs.keypoints.row(i) - c2).squaredNorm();
    s3 += (p3.row(i).head<2>() - c3.head<2>()).squaredNorm();
  }
  const double z = s2 > 0.0 ? s.focal * std::sqrt(s3 / s2) : 10.0;
  s.pose.translation = Vec3((c2[0] - obs.cx()) * z / s.focal - c3[0], (c2[1] - obs.cy()) * z / s.focal - c3[1],
                            z - c3[2]);
  return s;
}

FitResult fit_instance(const Observation2D& obs, const ModelBundle& model, const Priors& priors,
                       const FitConfig& config, const FitState* init) {
  const auto t0 = std::chrono::steady_clock::now();
  config.validate();
  require(obs.num_visible() >= 4, ErrorCode::Precondition,
          "fit_instance needs at least 4 visible keypoints, got " + std::to_string(obs.num_visible()));
  require(obs.keypoints.rows() == model.num_keypoints(), ErrorCode::DimensionMismatch,
          "observation keypoint count does not match the model");

  Objective obj{&obs, &model, &priors, config.weights, config.sigma};
  AdamConfig adam{0.0, config.beta1, config.beta2, config.eps};
  FitResult res;

  // candidate starts differ only in the root heading (and the translation fitted to it)
  std::vector<FitState> starts;
  if (init) {
    starts.push_back(*init);
  } else {
    for (double yaw : config.root_yaw_starts) {
      FitConfig c = config;
      c.root_yaw_starts = {yaw};
      starts.push_back(initial_state(obs, model, priors, c));
    }
  }

  const int last_stage = static_cast<int>(config.stages.size()) - 1;
  auto phases_of = [&](const FitStage& s) { return s.silhouette ? config.sigma_halvings + 1 : 1; };
  auto sigma_at = [&](int phase) { return config.sigma * std::pow(config.sigma_factor, phase); };
  auto weights_for = [&](const FitStage& s) {
    LossWeights w = config.weights;
    if (!s.silhouette) w.w_sil = 0.0;
    return w;
  };

  // runs one stage from `l`, appending to `trace`; tracks the best iterate of the final phase
  auto run_stage = [&](int si, Leaves& l, std::vector<double>& trace, Leaves* best, double* best_loss) {
    const FitStage& st = config.stages[si];
    std::array<AdamMoments, kNumLeaves> moments;
    adam.lr = st.lr;
    const int phases = phases_of(st);
    for (int ph = 0; ph < phases; ++ph) {
      Objective o = obj;
      o.weights = weights_for(st);
      o.sigma = sigma_at(st.silhouette ? ph : 0);
      const int begin = st.iterations * ph / phases, end = st.iterations * (ph + 1) / phases;
      const bool tracked = best && si == last_stage && ph == phases - 1;
      for (int it = begin; it < end; ++it) {
        std::array<Mat, kNumLeaves> g;
        const double loss = o.eval(l, st.free, &g, nullptr);
        trace.push_back(loss);
        if (!std::isfinite(loss)) diverged(trace, "stage " + std::to_string(si + 1));
        if (tracked && loss < *best_loss) {
          *best_loss = loss;
          *best = l;
        }
        for (int i = 0; i < kNumLeaves; ++i)
          if (st.free & (1u << i)) adam_step(*l.at(i), g[i], moments[i], adam);
      }
    }
  };

  // stage 1 from every start; keep the start with the lowest loss afterwards
  Leaves cur;
  double chosen = std::numeric_limits<double>::infinity();
  for (const FitState& s : starts) {
    Leaves l = to_leaves(s);
    std::vector<double> trace;
    run_stage(0, l, trace, nullptr, nullptr);
    Objective o = obj;
    o.weights = weights_for(config.stages[0]);
    o.sigma = sigma_at(phases_of(config.stages[0]) - 1);
    const double end = o.eval(l, 0, nullptr, nullptr);
    if (!std::isfinite(end)) diverged(trace, "stage 1");
    if (end < chosen) {
      chosen = end;
      cur = l;
      res.trace = trace;
    }
  }

  Leaves best = cur;
  double best_loss = std::numeric_limits<double>::infinity();
  if (last_stage == 0) {
    // single-stage schedule: the chosen start's end state is the only tracked candidate
    best_loss = chosen;
  }
  res.stage_ends.push_back(static_cast<int>(res.trace.size()));
  for (int si = 1; si <= last_stage; ++si) {
    run_stage(si, cur, res.trace, &best, &best_loss);
    res.stage_ends.push_back(static_cast<int>(res.trace.size()));
  }

  // final objective: last stage, last phase; candidates are the best iterate, the end
  // iterate and the initial state
  Objective fin = obj;
  fin.weights = weights_for(config.stages[last_stage]);
  fin.sigma = sigma_at(phases_of(config.stages[last_stage]) - 1);
  const double end_loss = fin.eval(cur, 0, nullptr, nullptr);
  if (end_loss < best_loss) {
    best_loss = end_loss;
    best = cur;
  }
  const Leaves init_leaves = to_leaves(starts.front());
  res.initial_loss = fin.eval(init_leaves, 0, nullptr, nullptr);
  if (res.initial_loss < best_loss) {
    best_loss = res.initial_loss;
    best = init_leaves;
  }
  if (!std::isfinite(best_loss)) diverged(res.trace, "final evaluation");
  res.final_loss = fin.eval(best, 0, nullptr, &res.final_breakdown);
  res.state = from_leaves(best, priors.flow);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

std::vector<BatchItem> fit_batch(const std::vector<Observation2D>& observations, const ModelBundle& model,
                                 const Priors& priors, const FitConfig& config, int jobs) {
  std::vector<BatchItem> out(observations.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < observations.size(); i = next++) {
      try {
        out[i].result = fit_instance(observations[i], model, priors, config);
      } catch (const Error& e) {
        out[i].error = e.what();
        out[i].code = e.code();
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(observations.size())));
  std::vector<std::thread> threads;
  for (int k = 1; k < n; ++k) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  return out;
}

LossBreakdown evaluate_state(const FitState& state, const Observation2D& obs, const ModelBundle& model,
                             const Priors& priors, const LossWeights& weights, double sigma) {
  Objective o{&obs, &model, &priors, weights, sigma};
  LossBreakdown bd;
  o.eval(to_leaves(state), 0, nullptr, &bd);
  return bd;
}

}  // namespace quadfit
