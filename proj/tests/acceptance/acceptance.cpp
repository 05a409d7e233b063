// Acceptance run: one PASS / FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance [criterion ids...]   (default: all of 1-8)

#include "quadfit/fitter.hpp"
#include "quadfit/io.hpp"
#include "quadfit/regressor.hpp"
#include "quadfit/synthbench.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <Eigen/LU>
#include <sys/wait.h>

#include <algorithm>
#include <atomic>
#include <cstdarg>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>

using namespace quadfit;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

int workers() { return std::max(1u, std::thread::hardware_concurrency()); }

// Runs f(i) for i in [0, n) on the available cores.
void parallel_for(int n, const std::function<void(int)>& f) {
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(workers(), n); ++w)
    pool.emplace_back([&] {
      for (int i; (i = next++) < n;) f(i);
    });
  for (std::thread& t : pool) t.join();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Mat random_rows(Rng& rng, int n, int d, double s = 1.0) {
  Mat m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * rng.normal();
  return m;
}

// The benchmark world shared by criteria 1, 2, 4, 5, 6.
struct World {
  ModelBundle model = build_toy_model(24, 12, 16, 0.5, 7);
  Priors priors;
  FlowTrainResult flow_run;
  double flow_seconds = 0.0;

  World() {
    const auto t0 = Clock::now();
    FlowTrainConfig fc;
    fc.epochs = 40;
    flow_run = train_flow(sample_gait_poses(4000, 1), fc);
    flow_seconds = seconds_since(t0);
    priors.flow = flow_run.flow;
    priors.shape = GaussianShapePrior::from_space(model.space);
  }
};

World& world() {
  static World w;
  return w;
}

// -- 1. gradient validity ----------------------------------------------------------------

Outcome criterion_gradients() {
  World& w = world();
  const ModelBundle& model = w.model;
  const auto t0 = Clock::now();

  // 128 x 128 instances keep the finite differences through the rasterizer affordable
  BreedConfig bc;
  bc.seed = 31;
  const std::vector<BreedSpec> breeds = gen_breeds(model, bc);
  DatasetConfig dc;
  dc.per_breed = 1;
  dc.width = dc.height = 128;
  dc.focal_min = 250.0;
  dc.focal_max = 350.0;
  dc.keypoint_noise = 1.5;
  dc.val_fraction = dc.test_fraction = 0.0;
  dc.seed = 32;
  const std::vector<SynthInstance> data = gen_dataset(model, w.priors.flow, breeds, dc);

  const int K = model.space.num_components(), D = model.pose_dim(), C = static_cast<int>(breeds.size());
  const int P = K + kNumScaleGroups + 6 + D + 3 + 1 + C;
  std::vector<int> offsets{0, K, K + kNumScaleGroups, K + kNumScaleGroups + 6, K + kNumScaleGroups + 6 + D,
                           K + kNumScaleGroups + 9 + D, K + kNumScaleGroups + 10 + D, P};
  auto slice = [&](const ad::Var& x, int part) {
    std::vector<int> idx(offsets[part + 1] - offsets[part]);
    std::iota(idx.begin(), idx.end(), offsets[part]);
    return ad::gather_cols(x, idx);
  };

  struct TermCheck {
    const char* name;
    std::function<void(LossWeights&)> enable;
    bool needs_reference = false;
  };
  const std::vector<TermCheck> checks = {
      {"keypoints", [](LossWeights& lw) { lw.w_kp = 1.0; }},
      {"silhouette", [](LossWeights& lw) { lw.w_sil = 1.0; }},
      {"shape prior", [](LossWeights& lw) { lw.w_beta = 1.0; }},
      {"limb scale prior", [](LossWeights& lw) { lw.w_kappa = 1.0; }},
      {"pose prior", [](LossWeights& lw) { lw.w_nf = 1.0; }},
      {"side-leg", [](LossWeights& lw) { lw.w_side = 1.0; }},
      {"camera", [](LossWeights& lw) { lw.w_cam = 1.0; }},
      {"breed class", [](LossWeights& lw) { lw.w_cs = 1.0; }},
      {"3D model", [](LossWeights& lw) { lw.w_3d = 1.0; }, true},
      {"total", [](LossWeights& lw) { lw = LossWeights{}; lw.w_cam = 1e-4; }, true},
  };

  std::map<std::string, double> worst;
  for (const SynthInstance& s : data) {
    Rng rng(s.seed);
    // evaluate away from the ground truth so every term has a nonzero gradient
    Mat x(1, P);
    const Vec sd = model.space.eigenvalues.cwiseSqrt();
    for (int k = 0; k < K; ++k) x(0, k) = s.truth.shape.beta[k] + 0.2 * sd[k] * rng.normal();
    for (int k = 0; k < kNumScaleGroups; ++k) x(0, offsets[1] + k) = s.truth.shape.kappa[k] + 0.05 * rng.normal();
    for (int k = 0; k < 6; ++k) x(0, offsets[2] + k) = s.truth.pose.root_rot6d[k] + 0.02 * rng.normal();
    for (int k = 0; k < D; ++k) x(0, offsets[3] + k) = s.truth.pose.latent[k] + 0.1 * rng.normal();
    for (int k = 0; k < 3; ++k) x(0, offsets[4] + k) = s.truth.pose.translation[k] + 0.02 * rng.normal();
    x(0, offsets[5]) = std::log(s.truth.focal) + 0.02 * rng.normal();
    for (int k = 0; k < C; ++k) x(0, offsets[6] + k) = rng.normal();

    for (const TermCheck& c : checks) {
      LossContext ctx;
      ctx.model = &model;
      ctx.flow = &w.priors.flow;
      ctx.shape_prior = &w.priors.shape;
      ctx.mode = LossMode::Train;
      ctx.weights.w_kp = ctx.weights.w_sil = ctx.weights.w_beta = ctx.weights.w_kappa = ctx.weights.w_nf = 0.0;
      ctx.weights.w_side = ctx.weights.w_cam = ctx.weights.w_cs = ctx.weights.w_3d = ctx.weights.w_triplet = 0.0;
      c.enable(ctx.weights);
      ctx.weights.f_target = 300.0;
      // the silhouette gate is a step in the keypoint error; keep it open (kink excluded)
      ctx.weights.sil_threshold = 1e9;
      const ShapeParams* ref = c.needs_reference ? &breeds[s.breed].prototype : nullptr;
      const ad::VarFunction f = [&](ad::Tape& tape, const ad::Var& v) {
        const auto fp = graph::bind_flow(tape, w.priors.flow, false);
        const InstanceVars iv{slice(v, 0), slice(v, 1), slice(v, 2), slice(v, 3),
                              slice(v, 4), slice(v, 5), slice(v, 6)};
        return total_loss(ctx, fp, iv, s.obs, ref, nullptr);
      };
      const double err = ad::grad_check(f, x, 1e-6);
      worst[c.name] = std::max(worst[c.name], err);
    }
  }

  // triplet term on 20 random batches; hinges near zero are kinks and are resampled
  Rng trng(33);
  double triplet_worst = 0.0;
  for (int batch = 0; batch < 20;) {
    const Mat z = random_rows(trng, 12, 8);
    const std::vector<int> labels{0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3};
    const auto triples = mine_triplets(z, labels);
    bool near_kink = false;
    for (const auto& [a, p, n] : triples) {
      const double h = (z.row(a) - z.row(p)).norm() - (z.row(a) - z.row(n)).norm() + 1.0;
      near_kink = near_kink || std::abs(h) < 1e-3;
    }
    if (near_kink) continue;
    ++batch;
    const ad::VarFunction f = [&](ad::Tape&, const ad::Var& v) {
      return graph::triplet_loss(ad::reshape(v, 12, 8), triples, 1.0);
    };
    triplet_worst = std::max(triplet_worst, ad::grad_check(f, Eigen::Map<const Mat>(z.data(), 1, z.size()), 1e-6));
  }
  worst["triplet"] = triplet_worst;

  const double secs = seconds_since(t0);
  double max_err = 0.0;
  std::string per_term;
  for (const auto& [name, e] : worst) {
    max_err = std::max(max_err, e);
    per_term += fmt(" %s=%.1e", name.c_str(), e);
  }
  Outcome o;
  o.pass = max_err < 1e-4 && secs < 120.0;
  o.detail = fmt("max relative error %.2e (< 1e-4) over %zu instances, %.1f s (< 120 s);", max_err, data.size(), secs) +
             per_term;
  return o;
}

// -- 2. flow correctness -------------------------------------------------------------------

double numeric_logdet(const FlowPrior& f, const Mat& x) {
  const int d = static_cast<int>(x.cols());
  Eigen::MatrixXd J(d, d);
  const double h = 1e-5;
  for (int k = 0; k < d; ++k) {
    Mat a = x, b = x;
    a(0, k) += h;
    b(0, k) -= h;
    J.col(k) = ((f.forward(a) - f.forward(b)) / (2 * h)).transpose();
  }
  return std::log(std::abs(J.determinant()));
}

// One-sided Welch test of mean(a) < mean(b); returns the p-value.
double welch_p_less(const Vec& a, const Vec& b, double* t_out) {
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double ma = a.mean(), mb = b.mean();
  const double va = (a.array() - ma).square().sum() / (na - 1), vb = (b.array() - mb).square().sum() / (nb - 1);
  const double se2 = va / na + vb / nb;
  const double t = (ma - mb) / std::sqrt(se2);
  const double dof = se2 * se2 / ((va / na) * (va / na) / (na - 1) + (vb / nb) * (vb / nb) / (nb - 1));
  *t_out = t;
  return boost::math::cdf(boost::math::students_t(dof), t);
}

Outcome criterion_flow() {
  World& w = world();
  const FlowPrior& flow = w.priors.flow;
  const Mat held_out = sample_gait_poses(1000, 2);
  const Mat uniform = sample_uniform_rotation_poses(1000, w.model.num_joints(), 3);

  const double rt_gait = (flow.inverse(flow.forward(held_out)) - held_out).cwiseAbs().maxCoeff();
  const double rt_uniform = (flow.inverse(flow.forward(uniform)) - uniform).cwiseAbs().maxCoeff();

  // small trained flows on leading pose coordinates
  double ld_err = 0.0;
  Rng rng(4);
  for (int d : {2, 4, 6}) {
    FlowTrainConfig fc;
    fc.layers = 4;
    fc.hidden = 16;
    fc.epochs = 10;
    fc.seed = static_cast<std::uint64_t>(d);
    const Mat corpus = sample_gait_poses(500, 5).leftCols(d);
    const FlowPrior small = train_flow(corpus, fc).flow;
    for (int trial = 0; trial < 10; ++trial) {
      const Mat x = corpus.row(rng.index(500)) + random_rows(rng, 1, d, 0.1);
      Vec ld;
      small.forward(x, &ld);
      ld_err = std::max(ld_err, std::abs(ld[0] - numeric_logdet(small, x)));
    }
  }

  const Vec nll_in = flow.nll(held_out), nll_uniform = flow.nll(uniform);
  double t = 0.0;
  const double p = welch_p_less(nll_in, nll_uniform, &t);

  Outcome o;
  o.pass = rt_gait < 1e-8 && rt_uniform < 1e-8 && ld_err < 1e-5 && nll_in.mean() < nll_uniform.mean() && p < 0.01;
  o.detail = fmt("round trip max error %.1e gait / %.1e uniform-rotation poses (< 1e-8); log-det vs numerical Jacobian "
                 "%.1e at D = 2, 4, 6 (< 1e-5); mean NLL held-out %.2f vs uniform %.3g, Welch t = %.1f, p = %.1e "
                 "(< 0.01); flow trained in %.1f s",
                 rt_gait, rt_uniform, ld_err, nll_in.mean(), nll_uniform.mean(), t, p, w.flow_seconds);
  return o;
}

// -- 3. shape-space fidelity ---------------------------------------------------------------

Outcome criterion_shape_space() {
  const ShapeCorpus corpus = toy_shape_corpus(24, 12, 7);
  const auto ends = toy_skeleton().torso_endpoint_vertex_ids;
  const int M = static_cast<int>(corpus.meshes.size());
  const ShapeSpace full = build_shape_space(corpus.meshes, corpus.is_dog, 0.5, M - 1, ends);
  double worst = 0.0;
  for (const Mat& mesh : corpus.meshes) {
    const Mat n = normalize_torso(mesh, ends);
    const Vec beta = project_to_space(full, n);
    const Mat rec = apply_shape(full, {beta.data(), static_cast<std::size_t>(beta.size())});
    worst = std::max(worst, (rec - n).norm() / n.norm());
  }
  const double torso_full = torso_length(toy_skeleton(), full.mean_vertices);
  const double torso_model = torso_length(world().model.skeleton, world().model.space.mean_vertices);
  Outcome o;
  o.pass = worst < 1e-6 && std::abs(torso_full - 1.0) < 1e-6 && std::abs(torso_model - 1.0) < 1e-6;
  o.detail = fmt("%d meshes, %d components: worst relative reconstruction error %.1e (< 1e-6); mean torso length "
                 "1 %+.1e (full basis), 1 %+.1e (benchmark model)",
                 M, M - 1, worst, torso_full - 1.0, torso_model - 1.0);
  return o;
}

// -- 4. fitting recovery -------------------------------------------------------------------

Outcome criterion_fitting() {
  World& w = world();
  BreedConfig bc;
  bc.num_breeds = 10;
  bc.num_clades = 3;
  bc.seed = 41;
  const std::vector<BreedSpec> breeds = gen_breeds(w.model, bc);
  DatasetConfig dc;
  dc.per_breed = 5;
  dc.val_fraction = dc.test_fraction = 0.0;
  dc.seed = 42;
  const std::vector<SynthInstance> data = gen_dataset(w.model, w.priors.flow, breeds, dc);
  std::vector<Observation2D> obs;
  for (const SynthInstance& s : data) obs.push_back(s.obs);
  const FitConfig cfg = FitConfig::defaults();
  const std::vector<BatchItem> items = fit_batch(obs, w.model, w.priors, cfg, workers());

  int ok = 0, errors = 0;
  double kp_sum = 0.0, v2v_sum = 0.0, secs_sum = 0.0, secs_max = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!items[i].result) {
      ++errors;
      continue;
    }
    const FitResult& r = *items[i].result;
    const PosedState p = pose_state(r.state, w.model, dc.width, dc.height);
    const PosedState g = pose_state(data[i].truth, w.model, dc.width, dc.height);
    const double kp = mean_keypoint_error(p.keypoints2d, data[i].obs.keypoints, data[i].obs.visible);
    const double v2v = aligned_v2v(p.vertices, g.vertices) /
                       torso_length(w.model.skeleton, repose_tpose(data[i].truth.shape, w.model));
    ok += kp < 2.0 && v2v < 0.05;
    kp_sum += kp;
    v2v_sum += v2v;
    secs_sum += r.seconds;
    secs_max = std::max(secs_max, r.seconds);
  }
  const double n = static_cast<double>(data.size() - errors);
  const double mean_secs = secs_sum / n;
  Outcome o;
  o.pass = errors == 0 && ok >= 45 && mean_secs < 10.0;
  o.detail = fmt("%d/%zu instances with keypoint error < 2 px and aligned vertex error < 5%% torso (>= 45); mean "
                 "keypoint error %.2f px, mean vertex error %.2f%%; %.1f s per instance (max %.1f s, < 10 s); %d "
                 "fit errors",
                 ok, data.size(), kp_sum / n, 100.0 * v2v_sum / n, mean_secs, secs_max, errors);
  return o;
}

// -- 5 and 6. breed-loss ablation ------------------------------------------------------------

struct AblationRun {
  std::string label;
  BreedLosses mode = BreedLosses::None;
  double w_triplet = 5.0;
  std::uint64_t seed = 0;
  double test_proto = 0.0, val_proto = 0.0, test_cluster = 0.0;
  double seconds = 0.0;
  std::string error;
};

struct Ablation {
  std::vector<AblationRun> runs;
  bool done = false;
};

Ablation& ablation() {
  static Ablation a;
  if (a.done) return a;
  World& w = world();
  const std::vector<BreedSpec> breeds = gen_breeds(w.model, BreedConfig{});  // 20 breeds, 4 clades
  const std::vector<SynthInstance> data = gen_dataset(w.model, w.priors.flow, breeds, DatasetConfig{}, workers());

  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (BreedLosses m : {BreedLosses::None, BreedLosses::Sim, BreedLosses::Sim3D})
      a.runs.push_back({breed_losses_name(m), m, 5.0, seed});
    a.runs.push_back({"sim3d, w_triplet 10", BreedLosses::Sim3D, 10.0, seed});
  }
  parallel_for(static_cast<int>(a.runs.size()), [&](int i) {
    AblationRun& r = a.runs[i];
    TrainConfig tc;
    tc.epochs = 100;
    tc.breed_losses = r.mode;
    tc.seed = r.seed;
    tc.weights.w_sil = 0.0;
    tc.weights.w_triplet = r.w_triplet;
    const auto t0 = Clock::now();
    try {
      const TrainResult res = train_regressor(data, breeds, w.model, w.priors, tc);
      r.val_proto = res.history.back().val_proto_mean;
      std::vector<FitState> pred;
      Mat z(0, tc.arch.z_dim);
      std::vector<int> labels;
      for (const SynthInstance& s : data) {
        if (s.obs.split != "test") {
          pred.push_back(s.truth);
          continue;
        }
        const RegressorOutput out = regress(res.net, w.model, w.priors.flow, s.obs);
        pred.push_back(out.state);
        z.conservativeResize(z.rows() + 1, Eigen::NoChange);
        z.row(z.rows() - 1) = out.z.transpose();
        labels.push_back(s.breed);
      }
      double sum = 0.0;
      const std::vector<BreedReport> rep = evaluate_predictions(data, pred, breeds, w.model, "test");
      for (const BreedReport& b : rep) sum += b.mean_v2v;
      r.test_proto = sum / static_cast<double>(rep.size());
      r.test_cluster = cluster_quality(z, labels).score;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    r.seconds = seconds_since(t0);
    std::fprintf(stderr, "  ablation %-20s seed %llu: test prototype error %.5f (val %.5f), test cluster quality "
                 "%.4f, %.0f s%s%s\n",
                 r.label.c_str(), static_cast<unsigned long long>(r.seed), r.test_proto, r.val_proto,
                 r.test_cluster, r.seconds, r.error.empty() ? "" : ", error: ", r.error.c_str());
  });
  a.done = true;
  return a;
}

std::vector<const AblationRun*> select(const Ablation& a, const std::string& label) {
  std::vector<const AblationRun*> out;
  for (const AblationRun& r : a.runs)
    if (r.label == label) out.push_back(&r);
  return out;
}

Outcome criterion_ablation() {
  const Ablation& a = ablation();
  for (const AblationRun& r : a.runs)
    if (!r.error.empty()) return {false, "training failed: " + r.error};
  auto med = [&](const std::string& label) {
    std::vector<double> v;
    for (const AblationRun* r : select(a, label)) v.push_back(r->test_proto);
    return median(v);
  };
  const double none = med("none"), sim = med("sim"), sim3d = med("sim3d"), heavy = med("sim3d, w_triplet 10");
  Outcome o;
  o.pass = none > sim && sim > sim3d && heavy <= sim3d;
  o.detail = fmt("median test prototype error over 3 seeds: no-breed %.5f > sim %.5f > sim+3D %.5f; sim+3D with "
                 "w_triplet 10: %.5f (<= %.5f at w_triplet 5); 20 breeds x 30 instances",
                 none, sim, sim3d, heavy, sim3d);
  return o;
}

Outcome criterion_clustering() {
  const Ablation& a = ablation();
  const auto none = select(a, "none"), sim = select(a, "sim");
  Outcome o;
  o.pass = true;
  std::string per_seed;
  for (std::size_t s = 0; s < none.size(); ++s) {
    o.pass = o.pass && none[s]->error.empty() && sim[s]->error.empty() && sim[s]->test_cluster > none[s]->test_cluster;
    per_seed += fmt("%sseed %llu: sim %.4f vs none %.4f", s ? "; " : "",
                    static_cast<unsigned long long>(none[s]->seed), sim[s]->test_cluster, none[s]->test_cluster);
  }
  o.detail = "silhouette of z on the test split, " + per_seed;
  return o;
}

// -- 7. metric exactness -----------------------------------------------------------------------

Outcome criterion_metrics() {
  Rng rng(71);
  int pck_exact = 0, iou_exact = 0;
  for (int c = 0; c < 100; ++c) {
    const int W = 8 + static_cast<int>(rng.index(40)), H = 8 + static_cast<int>(rng.index(40));
    Mask a = Mask::Zero(H, W), b = Mask::Zero(H, W);
    const double fill = rng.uniform(0.05, 0.9);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        a(y, x) = rng.uniform() < fill ? 1.0 : 0.0;
        b(y, x) = rng.uniform() < fill ? 1.0 : 0.0;
      }
    a(rng.index(H), rng.index(W)) = 1.0;
    // brute-force IoU
    long inter = 0, uni = 0;
    int x0 = W, y0 = H, x1 = -1, y1 = -1;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const bool pa = a(y, x) > 0.5, pb = b(y, x) > 0.5;
        inter += pa && pb;
        uni += pa || pb;
        if (pa) {
          x0 = std::min(x0, x);
          y0 = std::min(y0, y);
          x1 = std::max(x1, x);
          y1 = std::max(y1, y);
        }
      }
    iou_exact += iou(b, a) == static_cast<double>(inter) / static_cast<double>(uni);

    // brute-force PCK against the bbox of a
    const int K = 1 + static_cast<int>(rng.index(30));
    Mat gt(K, 2), pred(K, 2);
    Vec vis(K);
    for (int k = 0; k < K; ++k) {
      gt.row(k) << rng.uniform(0, W), rng.uniform(0, H);
      pred.row(k) = gt.row(k) + random_rows(rng, 1, 2, rng.uniform(0.1, 6.0));
      vis[k] = rng.uniform() < 0.8 ? 1.0 : 0.0;
    }
    vis[0] = 1.0;
    const double thr = 0.15 * std::sqrt(static_cast<double>(x1 - x0 + 1) * static_cast<double>(y1 - y0 + 1));
    int within = 0, visible = 0;
    for (int k = 0; k < K; ++k) {
      if (vis[k] <= 0.5) continue;
      ++visible;
      within += (pred.row(k) - gt.row(k)).norm() <= thr;
    }
    pck_exact += pck(pred, gt, vis, a, 0.15) == 100.0 * within / visible;
  }

  // planted rigid transforms
  double worst_rms = 0.0, worst_r = 0.0, worst_t = 0.0;
  for (int c = 0; c < 100; ++c) {
    const int N = 3 + static_cast<int>(rng.index(60));
    const Mat src = random_rows(rng, N, 3);
    const Mat3 R = axis_angle_to_rotmat(Vec3(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)));
    const Vec3 t(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
    const Mat dst = (src * R.transpose()).rowwise() + t.transpose();
    const ProcrustesResult pr = procrustes_align(src, dst, false);
    worst_rms = std::max(worst_rms, pr.rms);
    worst_r = std::max(worst_r, (pr.rotation - R).cwiseAbs().maxCoeff());
    worst_t = std::max(worst_t, (pr.translation - t).cwiseAbs().maxCoeff());
  }
  Outcome o;
  o.pass = pck_exact == 100 && iou_exact == 100 && worst_rms < 1e-10 && worst_r < 1e-10 && worst_t < 1e-10;
  o.detail = fmt("pck exact on %d/100 and iou exact on %d/100 randomized cases; planted rigid transforms: residual "
                 "%.1e (< 1e-10), rotation error %.1e, translation error %.1e",
                 pck_exact, iou_exact, worst_rms, worst_r, worst_t);
  return o;
}

// -- 8. determinism ------------------------------------------------------------------------------

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = file_bytes(e.path());
  return out;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(QUADFIT_CLI) + " " + args + " >> " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

bool same_state(const FitState& a, const FitState& b) {
  return a.shape.beta == b.shape.beta && a.shape.kappa == b.shape.kappa && a.pose.latent == b.pose.latent &&
         a.pose.root_rot6d == b.pose.root_rot6d && a.pose.translation == b.pose.translation && a.focal == b.focal;
}

Outcome criterion_determinism() {
  const fs::path dir = fs::temp_directory_path() / "quadfit_acceptance_cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path log = dir / "cli.log";
  auto config = [&](const std::string& name, const Json& j) {
    write_json((dir / name).string(), j);
    return (dir / name).string();
  };
  const std::string small_data = config(
      "data.json", {{"breeds", {{"num_breeds", 4}, {"num_clades", 2}}},
                    {"dataset", {{"per_breed", 5}, {"width", 96}, {"height", 96}, {"focal_min", 190.0}, {"focal_max", 260.0}}}});
  FitConfig fc = FitConfig::defaults();
  for (FitStage& s : fc.stages) s.iterations = 10;
  fc.weights.f_target = 225.0;
  TrainConfig tc;
  tc.arch.hidden = 32;
  tc.arch.hidden_layers = 2;
  tc.arch.z_dim = 8;
  tc.arch.bps_points = 16;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.breeds_per_batch = 2;
  tc.pretrain_samples = 64;
  tc.pretrain_epochs = 2;
  tc.pretrain_camera = DatasetConfig::from_json(read_json(small_data).at("dataset"));
  tc.weights.f_target = 225.0;

  // each command twice into separate directories; the second run uses more jobs
  const std::string model = (dir / "a_build-model/model").string(), priors = (dir / "a_train-prior/priors").string(),
                    data = (dir / "a_gen-data/data").string();
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"build-model", "--config " + config("model.json", {{"num_dogs", 8}, {"num_others", 2}, {"num_components", 6}}) +
                          " --seed 3"},
      {"train-prior", "--config " + config("prior.json", {{"samples", 300}, {"epochs", 2}, {"hidden", 16}}) +
                          " --seed 4 --model " + model},
      {"gen-data", "--config " + small_data + " --seed 5 --model " + model + " --priors " + priors},
      {"fit", "--config " + config("fit.json", {{"fit", fc.to_json()}, {"split", "test"}, {"limit", 3}}) +
                  " --seed 6 --model " + model + " --priors " + priors + " --data " + data},
      {"train", "--config " + config("train.json", tc.to_json()) + " --seed 7 --model " + model + " --priors " +
                    priors + " --data " + data},
      {"eval", "--config " + config("eval.json", {{"split", "val"}}) + " --model " + model + " --data " + data +
                   " --pred " + (dir / "a_train/predictions.jsonl").string()},
      {"render", "--config " + config("render.json", {{"instances", {0, 5}}}) + " --model " + model + " --data " +
                     data + " --pred " + (dir / "a_train/predictions.jsonl").string()},
  };
  std::string detail;
  bool pass = true;
  for (const auto& [name, args] : commands) {
    const fs::path a = dir / ("a_" + name), b = dir / ("b_" + name);
    const int ca = run_cli(name + " " + args + " --jobs 1 --out " + a.string(), log);
    const int cb = run_cli(name + " " + args + " --jobs 3 --out " + b.string(), log);
    const bool same = ca == 0 && cb == 0 && snapshot(a) == snapshot(b) && !snapshot(a).empty();
    pass = pass && same;
    detail += fmt("%s %s, ", name.c_str(), same ? "identical" : "DIFFERENT");
  }

  // fit_batch on the benchmark model with 1 and 4 workers
  World& w = world();
  BreedConfig bc;
  bc.num_breeds = 4;
  bc.seed = 81;
  DatasetConfig dc;
  dc.per_breed = 2;
  dc.seed = 82;
  const std::vector<SynthInstance> inst = gen_dataset(w.model, w.priors.flow, gen_breeds(w.model, bc), dc);
  std::vector<Observation2D> obs;
  for (const SynthInstance& s : inst) obs.push_back(s.obs);
  FitConfig quick = FitConfig::defaults();
  for (FitStage& s : quick.stages) s.iterations = 15;
  const std::vector<BatchItem> one = fit_batch(obs, w.model, w.priors, quick, 1);
  const std::vector<BatchItem> four = fit_batch(obs, w.model, w.priors, quick, 4);
  bool batch_same = true;
  for (std::size_t i = 0; i < obs.size(); ++i)
    batch_same = batch_same && one[i].result && four[i].result &&
                 same_state(one[i].result->state, four[i].result->state) &&
                 one[i].result->trace == four[i].result->trace;
  pass = pass && batch_same;
  detail += fmt("fit_batch over %zu instances with 1 vs 4 workers %s", obs.size(), batch_same ? "identical" : "DIFFERENT");
  return {pass, "outputs and manifests of two runs per command (--jobs 1 vs 3): " + detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria = {
      {"gradient validity", criterion_gradients},
      {"flow correctness", criterion_flow},
      {"shape-space fidelity", criterion_shape_space},
      {"fitting recovery", criterion_fitting},
      {"breed-loss ablation ordering", criterion_ablation},
      {"latent clustering", criterion_clustering},
      {"metric exactness", criterion_metrics},
      {"determinism", criterion_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  if (selected.empty())
    for (int i = 1; i <= static_cast<int>(criteria.size()); ++i) selected.insert(i);

  const auto t0 = Clock::now();
  int failed = 0, run = 0;
  for (int id : selected) {
    if (id < 1 || id > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "unknown criterion %d\n", id);
      return 2;
    }
    const auto& [name, fn] = criteria[id - 1];
    const auto t1 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    ++run;
    failed += !o.pass;
    std::printf("[%s] %d %s: %s (%.0f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), seconds_since(t1));
    std::fflush(stdout);
  }
  std::printf("acceptance: %d/%d criteria passed in %.0f s\n", run - failed, run, seconds_since(t0));
  return failed ? 1 : 0;
}
