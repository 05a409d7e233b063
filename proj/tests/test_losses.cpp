#include "doctest.h"

#include "quadfit/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace quadfit;

namespace {

Mat random_rows(Rng& rng, int n, int d, double s = 1.0) {
  Mat m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * rng.normal();
  return m;
}

// Brute force over all (a, p, n) triples: for each (a, p) keep the hinge of the
// negative with the smallest anchor distance.
double brute_triplet(const Mat& z, const std::vector<int>& labels, double margin, int* count) {
  const int n = static_cast<int>(z.rows());
  double total = 0.0;
  *count = 0;
  for (int a = 0; a < n; ++a)
    for (int p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      double best_d = 1e300, best_h = 0.0;
      bool found = false;
      for (int k = 0; k < n; ++k) {
        if (labels[k] == labels[a]) continue;
        const double dan = std::sqrt((z.row(a) - z.row(k)).squaredNorm());
        if (dan < best_d) {
          best_d = dan;
          best_h = std::max(0.0, std::sqrt((z.row(a) - z.row(p)).squaredNorm()) - dan + margin);
          found = true;
        }
      }
      if (found) {
        total += best_h;
        ++*count;
      }
    }
  return total;
}

struct Fixture {
  ModelBundle model = build_toy_model(16, 4, 10, 0.5, 11);
  FlowPrior flow;
  GaussianShapePrior prior;
  Fixture() {
    flow = FlowPrior::identity(model.pose_dim(), 2, 8, 3);
    Rng rng(3);
    for (Mat* m : flow.parameters())
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] += 0.02 * rng.normal();
    prior = GaussianShapePrior::from_space(model.space);
  }
};

}  // namespace

TEST_CASE("keypoint loss examples") {
  Mat gt(2, 2), pred(2, 2);
  gt << 10, 10, 50, 60;
  pred = gt;
  const Vec vis = Vec::Ones(2);
  CHECK(keypoint_loss(pred, gt, vis, Eigen::Vector2d(3, 1)) == 0.0);
  Mat one_gt(1, 2), one_pred(1, 2);
  one_gt << 0, 0;
  one_pred << 3, 4;
  for (double w : {0.5, 1.0, 3.0}) CHECK(keypoint_loss(one_pred, one_gt, Vec::Ones(1), Vec::Constant(1, w)) == 25.0);
  pred << 11, 10, 50, 62;
  CHECK(keypoint_loss(pred, gt, vis, Eigen::Vector2d(3, 1)) == doctest::Approx(1.75));
  CHECK_THROWS_AS(keypoint_loss(pred, gt, Vec::Zero(2), Eigen::Vector2d(3, 1)), Error);
  try {
    keypoint_loss(pred, gt, Vec::Zero(2), Eigen::Vector2d(3, 1));
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UndefinedLoss);
  }

  // hidden keypoints are ignored, including in the normalization
  Mat g3(3, 2), p3(3, 2);
  g3 << 0, 0, 0, 0, 0, 0;
  p3 << 1, 0, 100, 0, 0, 2;
  CHECK(keypoint_loss(p3, g3, Eigen::Vector3d(1, 0, 1), Eigen::Vector3d(3, 2, 1)) == doctest::Approx(1.75));

  // permuting keypoints together with the schema leaves the loss unchanged
  Rng rng(1);
  const Mat a = random_rows(rng, 22, 2, 10), b = random_rows(rng, 22, 2, 10);
  Vec w(22), v(22);
  for (int i = 0; i < 22; ++i) {
    w[i] = 1 + static_cast<int>(rng.index(3));
    v[i] = rng.uniform() < 0.8 ? 1 : 0;
  }
  v[0] = 1;
  std::vector<int> perm(22);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = 21; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
  Mat ap(22, 2), bp(22, 2);
  Vec wp(22), vp(22);
  for (int i = 0; i < 22; ++i) {
    ap.row(i) = a.row(perm[i]);
    bp.row(i) = b.row(perm[i]);
    wp[i] = w[perm[i]];
    vp[i] = v[perm[i]];
  }
  CHECK(keypoint_loss(ap, bp, vp, wp) == doctest::Approx(keypoint_loss(a, b, v, w)).epsilon(1e-14));

  // graph agreement and gradient
  ad::Tape t;
  CHECK(graph::keypoint_loss(t.constant(a), b, v, w).item() == doctest::Approx(keypoint_loss(a, b, v, w)));
  auto f = [&](ad::Tape&, const ad::Var& x) { return graph::keypoint_loss(ad::reshape(x, 22, 2), b, v, w); };
  CHECK(ad::grad_check(f, Eigen::Map<const Mat>(a.data(), 1, 44), 1e-6) < 1e-7);
}

TEST_CASE("mean keypoint error examples") {
  Mat gt = Mat::Zero(3, 2), pred = Mat::Zero(3, 2);
  CHECK(mean_keypoint_error(pred, gt, Vec::Ones(3)) == 0.0);
  pred(0, 1) = 7;
  CHECK(mean_keypoint_error(pred, gt, Eigen::Vector3d(1, 0, 0)) == 7.0);
  pred << 1, 0, 0, 2, 3, 0;
  CHECK(mean_keypoint_error(pred, gt, Vec::Ones(3)) == doctest::Approx(2.0));
  CHECK_THROWS_AS(mean_keypoint_error(pred, gt, Vec::Zero(3)), Error);
}

TEST_CASE("silhouette loss examples") {
  Mask gt = Mask::Zero(8, 8);
  gt.block(2, 2, 3, 4).setOnes();
  CHECK(silhouette_loss(gt, gt, 1.0, 10.0) == 0.0);
  CHECK(silhouette_loss(Mask::Zero(8, 8), gt, 1.0, 10.0) == 12.0);
  CHECK(silhouette_loss(Mask::Zero(8, 8), gt, 10.0, 10.0) == 0.0);
  CHECK(silhouette_loss(Mask::Ones(8, 8), gt, 25.0, 10.0) == 0.0);
  CHECK_THROWS_AS(silhouette_loss(Mask::Zero(7, 8), gt, 1.0, 10.0), Error);
  Rng rng(2);
  const Mat s = random_rows(rng, 8, 8).cwiseAbs();
  auto f = [&](ad::Tape&, const ad::Var& x) { return graph::silhouette_loss(ad::reshape(x, 8, 8), gt); };
  CHECK(ad::grad_check(f, Eigen::Map<const Mat>(s.data(), 1, 64), 1e-6) < 1e-7);
}

TEST_CASE("triplet loss examples") {
  // anchor at 0, positive at distance 0, negative at distance m
  Mat z(3, 1);
  z << 0, 0, 1.0;
  std::vector<int> labels{0, 0, 1};
  const TripletResult r0 = triplet_loss(z, labels, 1.0);
  // pairs (0,1) and (1,0) each hit the hinge boundary
  CHECK(r0.loss == 0.0);
  CHECK(r0.num_triplets == 2);

  Mat z2(3, 1);
  z2 << 0, 1, 0.5;
  const auto tr = mine_triplets(z2, labels);
  REQUIRE(tr.size() == 2);
  CHECK(tr[0] == std::array<int, 3>{0, 1, 2});
  // anchor 0: d(a,p) = 1, d(a,n) = 0.5, m = 0.2 -> 0.7; anchor 1: 1 - 0.5 + 0.2 = 0.7
  CHECK(triplet_loss(z2, labels, 0.2).loss == doctest::Approx(1.4));
  ad::Tape t;
  CHECK(graph::triplet_loss(t.constant(z2), {tr[0]}, 0.2).item() == doctest::Approx(0.7));

  const TripletResult none = triplet_loss(z2, {0, 0, 0}, 1.0);
  CHECK(none.loss == 0.0);
  CHECK(none.no_valid_triplets);
  CHECK(triplet_loss(z2, {0, 1, 2}, 1.0).no_valid_triplets);

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 4 + static_cast<int>(rng.index(10));
    const Mat z3 = random_rows(rng, n, 5);
    std::vector<int> lab(n);
    for (int& l : lab) l = static_cast<int>(rng.index(3));
    int count = 0;
    const double brute = brute_triplet(z3, lab, 0.8, &count);
    const TripletResult r = triplet_loss(z3, lab, 0.8);
    CHECK(r.loss == doctest::Approx(brute).epsilon(1e-12));
    CHECK(r.num_triplets == count);
    CHECK(r.loss >= 0.0);
    const auto triples = mine_triplets(z3, lab);
    ad::Tape tt;
    CHECK(graph::triplet_loss(tt.constant(z3), triples, 0.8).item() == doctest::Approx(brute).epsilon(1e-12));
    if (!triples.empty()) {
      auto f = [&](ad::Tape&, const ad::Var& x) { return graph::triplet_loss(ad::reshape(x, n, 5), triples, 0.8); };
      CHECK(ad::grad_check(f, Eigen::Map<const Mat>(z3.data(), 1, z3.size()), 1e-6) < 1e-4);
    }
  }

  // pushing the negative away never increases the loss
  Mat z4(3, 2);
  z4 << 0, 0, 1, 0, 0.3, 0;
  double prev = triplet_loss(z4, labels, 1.0).loss;
  for (int k = 0; k < 20; ++k) {
    z4(2, 1) += 0.1;
    const double cur = triplet_loss(z4, labels, 1.0).loss;
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("breed cross-entropy examples") {
  Vec l(3);
  l << 20, 0, 0;
  CHECK(breed_ce_loss(l, 0) < 1e-8);
  CHECK(breed_ce_loss(Vec::Zero(5), 2) == doctest::Approx(std::log(5.0)));
  CHECK(breed_ce_loss(Eigen::Vector2d(2, 0), 0) == doctest::Approx(0.1269280110429725));
  CHECK_THROWS_AS(breed_ce_loss(l, 3), Error);
  CHECK_THROWS_AS(breed_ce_loss(l, -1), Error);
  Rng rng(4);
  const Mat x = random_rows(rng, 1, 6);
  ad::Tape t;
  CHECK(graph::breed_ce_loss(t.constant(x), 4).item() == doctest::Approx(breed_ce_loss(x.transpose(), 4)));
  auto f = [](ad::Tape&, const ad::Var& v) { return graph::breed_ce_loss(v, 4); };
  CHECK(ad::grad_check(f, x, 1e-6) < 1e-7);
}

TEST_CASE("3D model loss examples") {
  ShapeParams a = ShapeParams::zeros(2), b = ShapeParams::zeros(2);
  CHECK(model3d_loss(a, b) == 0.0);
  a.beta << 1, -1;
  CHECK(model3d_loss(a, b) == 2.0);
  a.beta << 0.5, 0;
  a.kappa[6] = 0.5;
  CHECK(model3d_loss(a, b) == 0.5);
  CHECK_THROWS_AS(model3d_loss(a, ShapeParams::zeros(3)), Error);
}

TEST_CASE("loss weights json") {
  const LossWeights d;
  CHECK(d.w_triplet == 5.0);
  CHECK(d.w_cs == 1.0);
  CHECK(d.w_3d == 1.0);
  CHECK(d.margin == 1.0);
  CHECK(d.sil_threshold == 10.0);
  const LossWeights r = LossWeights::from_json(d.to_json());
  CHECK(r.to_json() == d.to_json());
  const LossWeights p = LossWeights::from_json(nlohmann::json{{"w_triplet", 2.5}, {"margin", 0.5}});
  CHECK(p.w_triplet == 2.5);
  CHECK(p.margin == 0.5);
  CHECK(p.w_cs == 1.0);
  CHECK_THROWS_AS(LossWeights::from_json(nlohmann::json{{"w_typo", 1.0}}), Error);
  CHECK_THROWS_AS(LossWeights::from_json(nlohmann::json{{"w_kp", -1.0}}), Error);
  CHECK_THROWS_AS(LossWeights::from_json(nlohmann::json{{"sil_threshold", 0.0}}), Error);
  CHECK_THROWS_AS(LossWeights::from_json(nlohmann::json{{"w_kp", "x"}}), Error);
  CHECK(d.to_json().size() == 13);
}

TEST_CASE("total loss assembly") {
  Fixture fx;
  const ModelBundle& model = fx.model;
  Rng rng(5);
  const int K = model.space.num_components();
  const int D = model.pose_dim();

  // a ground-truth instance observed through the value pipeline
  Mat beta = random_rows(rng, 1, K, 0.5).cwiseProduct(model.space.eigenvalues.cwiseSqrt().transpose());
  Mat kappa = random_rows(rng, 1, kNumScaleGroups, 0.1);
  Mat y = random_rows(rng, 1, D, 0.3);
  Mat root(1, 6);
  {
    const auto r = rotmat_to_rot6d(axis_angle_to_rotmat(Vec3(0.1, 0.8, -0.05)));
    for (int k = 0; k < 6; ++k) root(0, k) = r[k];
  }
  const Mat trans = (Mat(1, 3) << 0.05, -0.1, 6.0).finished();
  const double focal = 640.0;

  auto value_pipeline = [&](const Mat& b, const Mat& k, const Mat& lat, Mat& verts2d, Mat& kp2d, Mat& theta_out) {
    ShapeParams sp;
    sp.beta = b.transpose();
    sp.kappa = k.transpose();
    const Mat shaped = apply_shape(model.space, std::span<const double>(sp.beta.data(), K));
    const Mat rest_j = model.joint_regressor * shaped;
    const LimbScaleResult ls = apply_limb_scales(model.skeleton, rest_j, shaped, model.mesh.lbs_weights,
                                                 std::span<const double>(sp.kappa.data(), kNumScaleGroups));
    const Mat theta = fx.flow.inverse(lat);
    theta_out = theta;
    Mat j6(model.num_joints() - 1, 6);
    for (int j = 0; j < model.num_joints() - 1; ++j) {
      const auto r = rotmat_to_rot6d(axis_angle_to_rotmat(theta.block(0, 3 * j, 1, 3).transpose()));
      for (int c = 0; c < 6; ++c) j6(j, c) = r[c];
    }
    std::array<double, 6> r6;
    for (int c = 0; c < 6; ++c) r6[c] = root(0, c);
    const Mat world = forward_kinematics(model.skeleton, ls.offsets, r6, j6, Vec3(trans(0, 0), trans(0, 1), trans(0, 2)));
    const Mat posed = lbs_skin(ls.vertices, model.mesh.lbs_weights, world, ls.joints);
    Mat kp3(model.num_keypoints(), 3);
    for (int i = 0; i < model.num_keypoints(); ++i) {
      const auto& d = model.mesh.keypoints[i];
      kp3.row(i) = d.anchor == KeypointDef::Anchor::Vertex ? Mat(posed.row(d.index)) : Mat(world.block(d.index, 9, 1, 3));
    }
    const Camera cam = Camera::centered(256, 256, focal);
    kp2d = project(kp3, cam, Vec3::Zero());
    verts2d = project(posed, cam, Vec3::Zero());
  };

  Mat v2d, kp2d, theta;
  value_pipeline(beta, kappa, y, v2d, kp2d, theta);
  Observation2D obs;
  obs.keypoints = kp2d + random_rows(rng, model.num_keypoints(), 2, 2.0);
  obs.visible = Vec::Ones(model.num_keypoints());
  obs.visible[3] = 0;
  obs.mask = hard_rasterize(v2d, model.mesh.faces, 256, 256);
  obs.breed = 1;

  // evaluate at a perturbed state
  const Mat beta1 = beta + random_rows(rng, 1, K, 0.02);
  const Mat kappa1 = kappa + random_rows(rng, 1, kNumScaleGroups, 0.05);
  const Mat y1 = y + random_rows(rng, 1, D, 0.05);
  Mat logits = random_rows(rng, 1, 4);
  ShapeParams ref;
  ref.beta = beta.transpose();
  ref.kappa = kappa.transpose();

  LossContext ctx;
  ctx.model = &model;
  ctx.flow = &fx.flow;
  ctx.shape_prior = &fx.prior;
  ctx.mode = LossMode::Train;
  ctx.sigma = 1e-4;
  ctx.weights.w_kp = 1.3;
  ctx.weights.w_sil = 0.01;
  ctx.weights.w_beta = 0.2;
  ctx.weights.w_kappa = 0.7;
  ctx.weights.w_nf = 0.05;
  ctx.weights.w_side = 2.0;
  ctx.weights.w_cam = 1e-5;
  ctx.weights.f_target = 600.0;
  ctx.weights.w_cs = 0.9;
  ctx.weights.w_3d = 1.1;

  ad::Tape t;
  const auto fp = graph::bind_flow(t, fx.flow, false);
  InstanceVars v{t.variable(beta1), t.variable(kappa1), t.variable(root), t.variable(y1), t.variable(trans),
                 t.variable(Mat::Constant(1, 1, std::log(focal))), t.variable(logits)};
  LossBreakdown bd;
  const ad::Var total = total_loss(ctx, fp, v, obs, &ref, &bd);
  CHECK(bd.total == total.item());
  CHECK(bd.sum() == bd.total);  // bitwise: same summation order

  // independent term-by-term oracle
  Mat v2d1, kp2d1, theta1;
  value_pipeline(beta1, kappa1, y1, v2d1, kp2d1, theta1);
  const LossWeights& w = ctx.weights;
  const Vec kpw = KeypointSchema::from_model(model).weights;
  const double kp_err = mean_keypoint_error(kp2d1, obs.keypoints, obs.visible);
  CHECK(bd.kp_error == doctest::Approx(kp_err).epsilon(1e-10));
  REQUIRE(bd.sil_gate_open);
  ShapeParams cur;
  cur.beta = beta1.transpose();
  cur.kappa = kappa1.transpose();
  Mat j6(model.num_joints() - 1, 6);
  for (int j = 0; j < model.num_joints() - 1; ++j) {
    const auto r = rotmat_to_rot6d(axis_angle_to_rotmat(theta1.block(0, 3 * j, 1, 3).transpose()));
    for (int c = 0; c < 6; ++c) j6(j, c) = r[c];
  }
  const double expected[] = {
      w.w_kp * keypoint_loss(kp2d1, obs.keypoints, obs.visible, kpw),
      w.w_sil * silhouette_loss(soft_rasterize(v2d1, model.mesh.faces, 256, 256, ctx.sigma), obs.mask, kp_err,
                                w.sil_threshold),
      w.w_beta * shape_prior(cur.beta, fx.prior),
      w.w_kappa * scale_prior(cur.kappa),
      w.w_nf * latent_prior(y1.transpose()),
      w.w_side * side_leg_penalty(model.skeleton, j6),
      w.w_cam * camera_prior(focal, w.f_target),
      w.w_cs * breed_ce_loss(logits.transpose(), 1),
      w.w_3d * model3d_loss(cur, ref),
  };
  double sum = 0.0;
  for (int i = 0; i < 9; ++i) {
    CHECK(bd.enabled[i]);
    CHECK(bd.value[i] == doctest::Approx(expected[i]).epsilon(1e-8));
    sum += expected[i];
  }
  CHECK(!bd.enabled[static_cast<int>(Term::Triplet)]);
  CHECK(bd.total == doctest::Approx(sum).epsilon(1e-8));

  // fit mode drops the breed terms; zero weights give zero; single term linearity
  ctx.mode = LossMode::Fit;
  {
    ad::Tape t2;
    const auto fp2 = graph::bind_flow(t2, fx.flow, false);
    InstanceVars v2{t2.variable(beta1), t2.variable(kappa1), t2.variable(root), t2.variable(y1),
                    t2.variable(trans), t2.variable(Mat::Constant(1, 1, std::log(focal))), t2.variable(logits)};
    LossBreakdown b2;
    total_loss(ctx, fp2, v2, obs, &ref, &b2);
    CHECK(!b2.enabled[static_cast<int>(Term::Cs)]);
    CHECK(!b2.enabled[static_cast<int>(Term::ThreeD)]);
  }
  LossContext zero = ctx;
  for (double* p : {&zero.weights.w_kp, &zero.weights.w_sil, &zero.weights.w_beta, &zero.weights.w_kappa,
                    &zero.weights.w_nf, &zero.weights.w_side, &zero.weights.w_cam, &zero.weights.w_cs,
                    &zero.weights.w_3d})
    *p = 0.0;
  {
    ad::Tape t3;
    const auto fp3 = graph::bind_flow(t3, fx.flow, false);
    InstanceVars v3{t3.variable(beta1), t3.variable(kappa1), t3.variable(root), t3.variable(y1),
                    t3.variable(trans), t3.variable(Mat::Constant(1, 1, std::log(focal))), ad::Var()};
    CHECK(total_loss(zero, fp3, v3, obs, nullptr, nullptr).item() == 0.0);
    zero.weights.w_kappa = 3.0;
    CHECK(total_loss(zero, fp3, v3, obs, nullptr, nullptr).item() ==
          doctest::Approx(3.0 * scale_prior(cur.kappa)).epsilon(1e-14));
  }

  // gate closed: silhouette term is exactly zero
  Observation2D far = obs;
  far.keypoints.array() += 40.0;
  {
    ad::Tape t4;
    const auto fp4 = graph::bind_flow(t4, fx.flow, false);
    InstanceVars v4{t4.variable(beta1), t4.variable(kappa1), t4.variable(root), t4.variable(y1),
                    t4.variable(trans), t4.variable(Mat::Constant(1, 1, std::log(focal))), ad::Var()};
    LossBreakdown b4;
    total_loss(ctx, fp4, v4, far, nullptr, &b4);
    CHECK(!b4.sil_gate_open);
    CHECK(b4[Term::Sil] == 0.0);
  }

  Observation2D hidden = obs;
  hidden.visible.setZero();
  ad::Tape t5;
  const auto fp5 = graph::bind_flow(t5, fx.flow, false);
  InstanceVars v5{t5.variable(beta1), t5.variable(kappa1), t5.variable(root), t5.variable(y1),
                  t5.variable(trans), t5.variable(Mat::Constant(1, 1, std::log(focal))), ad::Var()};
  CHECK_THROWS_AS(total_loss(ctx, fp5, v5, hidden, nullptr, nullptr), Error);
}
