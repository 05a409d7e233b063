// Procedural quadruped: a capsule around every bone plus a skull and four feet.
// All meshes share one topology, so any two of them are registered.

#include "quadfit/model.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace quadfit {

namespace {

constexpr int kRings = 3;
constexpr int kSegments = 6;
constexpr int kCapsuleVerts = kRings * kSegments + 2;

struct JointSpec {
  const char* name;
  int parent;
  double x, y, z;
};

// x forward, y up, z to the animal's left.
constexpr JointSpec kJoints[] = {
    {"root", -1, 0.0, 0.0, 0.0},
    {"spine1", 0, 0.30, 0.02, 0.0},
    {"spine2", 1, 0.30, 0.01, 0.0},
    {"spine3", 2, 0.30, -0.01, 0.0},
    {"neck", 3, 0.10, 0.10, 0.0},
    {"head", 4, 0.12, 0.16, 0.0},
    {"muzzle", 5, 0.20, -0.05, 0.0},
    {"ear_l", 5, -0.03, 0.06, 0.05},
    {"ear_l_tip", 7, -0.02, 0.09, 0.03},
    {"ear_r", 5, -0.03, 0.06, -0.05},
    {"ear_r_tip", 9, -0.02, 0.09, -0.03},
    {"fl_upper", 3, 0.02, -0.08, 0.09},
    {"fl_lower", 11, 0.0, -0.26, 0.0},
    {"fl_paw", 12, 0.0, -0.24, 0.0},
    {"fr_upper", 3, 0.02, -0.08, -0.09},
    {"fr_lower", 14, 0.0, -0.26, 0.0},
    {"fr_paw", 15, 0.0, -0.24, 0.0},
    {"rl_upper", 0, -0.02, -0.06, 0.09},
    {"rl_lower", 17, 0.06, -0.26, 0.0},
    {"rl_paw", 18, -0.06, -0.24, 0.0},
    {"rr_upper", 0, -0.02, -0.06, -0.09},
    {"rr_lower", 20, 0.06, -0.26, 0.0},
    {"rr_paw", 21, -0.06, -0.24, 0.0},
    {"tail1", 0, -0.10, 0.06, 0.0},
    {"tail2", 23, -0.14, 0.02, 0.0},
    {"tail3", 24, -0.14, 0.0, 0.0},
};
constexpr int kNumJoints = static_cast<int>(std::size(kJoints));

enum Joint : int {
  kRoot = 0, kSpine1, kSpine2, kSpine3, kNeck, kHead, kMuzzle, kEarL, kEarLTip, kEarR, kEarRTip,
  kFlUpper, kFlLower, kFlPaw, kFrUpper, kFrLower, kFrPaw,
  kRlUpper, kRlLower, kRlPaw, kRrUpper, kRrLower, kRrPaw, kTail1, kTail2, kTail3
};

constexpr int kPaws[4] = {kFlPaw, kFrPaw, kRlPaw, kRrPaw};

struct Capsule {
  int a = 0;        // start joint
  int b = -1;       // end joint, or -1 for a fixed extension from `a`
  Vec3 extension = Vec3::Zero();
  double rv = 0.0;  // radius along the up-ish direction
  double rw = 0.0;  // radius along the sideways direction
};

// Joint offsets for the given proportions.
Mat joint_positions(const BodyProportions& p) {
  Mat pos(kNumJoints, 3);
  for (int j = 0; j < kNumJoints; ++j) {
    Vec3 o(kJoints[j].x, kJoints[j].y, kJoints[j].z);
    switch (j) {
      case kSpine1: case kSpine2: case kSpine3: o *= p.torso_length; break;
      case kNeck: case kHead: o *= p.neck_length; break;
      case kMuzzle: o *= p.head_length; break;
      case kEarL: case kEarR: o *= p.head_size; break;
      case kEarLTip: case kEarRTip: o *= p.ear_length; break;
      case kFlLower: case kFlPaw: case kFrLower: case kFrPaw: o *= p.front_leg_length; break;
      case kRlLower: case kRlPaw: case kRrLower: case kRrPaw: o *= p.rear_leg_length; break;
      case kTail2: case kTail3: o *= p.tail_length; break;
      case kFlUpper: case kFrUpper: case kRlUpper: case kRrUpper:
        o.y() *= p.chest_depth;
        o.z() *= p.torso_girth;
        break;
      case kTail1: o.y() *= p.chest_depth; break;
      default: break;
    }
    const int parent = kJoints[j].parent;
    pos.row(j) = parent < 0 ? o.transpose() : Eigen::RowVector3d(pos.row(parent) + o.transpose());
  }
  return pos;
}

std::vector<Capsule> capsules(const BodyProportions& p) {
  std::vector<Capsule> caps;
  auto edge = [&](int child, double rv, double rw) {
    Capsule c;
    c.a = kJoints[child].parent;
    c.b = child;
    c.rv = rv;
    c.rw = rw;
    caps.push_back(c);
  };
  const double tg = p.torso_girth, cd = p.chest_depth, ng = p.neck_girth, hs = p.head_size;
  const double lg = p.leg_girth, tl = p.tail_girth, ew = p.ear_width;
  for (int j = 1; j < kNumJoints; ++j) {
    switch (j) {
      case kSpine1: edge(j, 0.16 * tg * cd, 0.14 * tg); break;
      case kSpine2: edge(j, 0.17 * tg * cd, 0.15 * tg); break;
      case kSpine3: edge(j, 0.18 * tg * cd, 0.15 * tg); break;
      case kNeck: edge(j, 0.11 * ng, 0.10 * ng); break;
      case kHead: edge(j, 0.09 * ng, 0.08 * ng); break;
      case kMuzzle: edge(j, 0.05 * hs, 0.05 * hs); break;
      case kEarL: case kEarR: break;  // ears hang off the skull capsule
      case kEarLTip: case kEarRTip: edge(j, 0.035 * ew, 0.012 * ew); break;
      case kFlUpper: case kFrUpper: edge(j, 0.07 * lg, 0.07 * lg); break;
      case kFlLower: case kFrLower: edge(j, 0.055 * lg, 0.055 * lg); break;
      case kFlPaw: case kFrPaw: case kRlPaw: case kRrPaw: edge(j, 0.04 * lg, 0.04 * lg); break;
      case kRlUpper: case kRrUpper: edge(j, 0.08 * lg, 0.08 * lg); break;
      case kRlLower: case kRrLower: edge(j, 0.06 * lg, 0.06 * lg); break;
      case kTail1: edge(j, 0.04 * tl, 0.04 * tl); break;
      case kTail2: edge(j, 0.03 * tl, 0.03 * tl); break;
      case kTail3: edge(j, 0.02 * tl, 0.02 * tl); break;
      default: break;
    }
  }
  Capsule skull;
  skull.a = kHead;
  skull.extension = Vec3(0.05, 0.02, 0.0) * hs;
  skull.rv = skull.rw = 0.085 * hs;
  caps.push_back(skull);
  for (int paw : kPaws) {
    Capsule foot;
    foot.a = paw;
    foot.extension = Vec3(0.07, -0.02, 0.0) * lg;
    foot.rv = foot.rw = 0.035 * lg;
    caps.push_back(foot);
  }
  return caps;
}

// Capsule index of the bone ending at `child`, of the skull and of each foot.
int edge_capsule(int child) {
  int idx = 0;
  for (int j = 1; j < child; ++j) {
    if (j != kEarL && j != kEarR) ++idx;
  }
  return idx;
}
constexpr int kNumEdgeCapsules = kNumJoints - 3;
constexpr int kSkullCapsule = kNumEdgeCapsules;
constexpr int foot_capsule(int leg) { return kNumEdgeCapsules + 1 + leg; }
constexpr int kNumCapsules = kNumEdgeCapsules + 5;

int ring_vertex(int capsule, int ring, int seg) { return capsule * kCapsuleVerts + ring * kSegments + seg; }
int pole_vertex(int capsule, int end) { return capsule * kCapsuleVerts + kRings * kSegments + end; }

struct Frame {
  Vec3 start, end, axis, v, w;
};

Frame capsule_frame(const Capsule& c, const Mat& joints) {
  Frame f;
  f.start = joints.row(c.a).transpose();
  f.end = c.b >= 0 ? Vec3(joints.row(c.b).transpose()) : Vec3(f.start + c.extension);
  f.axis = (f.end - f.start).normalized();
  const Vec3 hint = std::abs(f.axis.y()) > 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  f.v = (hint - hint.dot(f.axis) * f.axis).normalized();
  f.w = f.axis.cross(f.v);
  return f;
}

Mat mesh_from(const BodyProportions& p, const Mat& joints) {
  const auto caps = capsules(p);
  Mat V(kNumCapsules * kCapsuleVerts, 3);
  for (int c = 0; c < kNumCapsules; ++c) {
    const Frame f = capsule_frame(caps[c], joints);
    for (int r = 0; r < kRings; ++r) {
      const Vec3 center = f.start + (0.5 * r) * (f.end - f.start);
      for (int s = 0; s < kSegments; ++s) {
        const double phi = 2.0 * std::numbers::pi * s / kSegments;
        const Vec3 q = center + caps[c].rv * std::cos(phi) * f.v + caps[c].rw * std::sin(phi) * f.w;
        V.row(ring_vertex(c, r, s)) = q.transpose();
      }
    }
    const double r = 0.5 * (caps[c].rv + caps[c].rw);
    V.row(pole_vertex(c, 0)) = (f.start - r * f.axis).transpose();
    V.row(pole_vertex(c, 1)) = (f.end + r * f.axis).transpose();
  }
  return V;
}

// Segment whose outward direction best matches `dir` on the template mesh.
int facing(const Mat& V, int capsule, int ring, const Vec3& dir) {
  Vec3 center = Vec3::Zero();
  for (int s = 0; s < kSegments; ++s) center += V.row(ring_vertex(capsule, ring, s)).transpose();
  center /= kSegments;
  int best = 0;
  double best_dot = -1e300;
  for (int s = 0; s < kSegments; ++s) {
    const double d = (V.row(ring_vertex(capsule, ring, s)).transpose() - center).dot(dir.normalized());
    if (d > best_dot) {
      best_dot = d;
      best = s;
    }
  }
  return ring_vertex(capsule, ring, best);
}

// Bone segment used for skinning: from the joint to its primary child, or a
// short stub for leaves.
std::pair<Vec3, Vec3> bone_segment(int j, const Mat& joints, const std::vector<Capsule>& caps) {
  const Vec3 a = joints.row(j).transpose();
  int child = -1;
  for (int k = j + 1; k < kNumJoints; ++k) {
    if (kJoints[k].parent == j && k != kEarL && k != kEarR && k != kFlUpper && k != kFrUpper &&
        k != kRlUpper && k != kRrUpper && k != kTail1) {
      child = k;
      break;
    }
  }
  if (j == kHead) child = kMuzzle;
  if (j == kRoot) child = kSpine1;
  if (child >= 0) return {a, Vec3(joints.row(child).transpose())};
  for (int leg = 0; leg < 4; ++leg) {
    if (kPaws[leg] == j) return {a, a + caps[foot_capsule(leg)].extension};
  }
  return {a, a};
}

double point_segment_distance2(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (p - (a + t * ab)).squaredNorm();
}

}  // namespace

Skeleton toy_skeleton() {
  Skeleton s;
  for (const auto& j : kJoints) s.joints.push_back({j.name, j.parent, Vec3(j.x, j.y, j.z)});
  s.leg_joint_ids = {std::vector<int>{kFlUpper, kFlLower, kFlPaw}, std::vector<int>{kFrUpper, kFrLower, kFrPaw},
                     std::vector<int>{kRlUpper, kRlLower, kRlPaw}, std::vector<int>{kRrUpper, kRrLower, kRrPaw}};
  s.head_bone_id = kMuzzle;
  s.torso_endpoint_vertex_ids = {pole_vertex(edge_capsule(kSpine3), 1), pole_vertex(edge_capsule(kSpine1), 0)};
  s.scale_targets = {
      {"front_legs", {kFlLower, kFlPaw, kFrLower, kFrPaw}},
      {"rear_legs", {kRlLower, kRlPaw, kRrLower, kRrPaw}},
      {"tail", {kTail2, kTail3}},
      {"neck", {kHead}},
      {"torso", {kSpine1, kSpine2, kSpine3}},
      {"ears", {kEarLTip, kEarRTip}},
      {"head_length", {kMuzzle}},
  };
  return s;
}

Faces toy_faces() {
  Faces F(kNumCapsules * (2 * kSegments * (kRings - 1) + 2 * kSegments), 3);
  int f = 0;
  for (int c = 0; c < kNumCapsules; ++c) {
    for (int r = 0; r + 1 < kRings; ++r) {
      for (int s = 0; s < kSegments; ++s) {
        const int s1 = (s + 1) % kSegments;
        F.row(f++) << ring_vertex(c, r, s), ring_vertex(c, r, s1), ring_vertex(c, r + 1, s1);
        F.row(f++) << ring_vertex(c, r, s), ring_vertex(c, r + 1, s1), ring_vertex(c, r + 1, s);
      }
    }
    for (int s = 0; s < kSegments; ++s) {
      const int s1 = (s + 1) % kSegments;
      F.row(f++) << pole_vertex(c, 0), ring_vertex(c, 0, s1), ring_vertex(c, 0, s);
      F.row(f++) << pole_vertex(c, 1), ring_vertex(c, kRings - 1, s), ring_vertex(c, kRings - 1, s1);
    }
  }
  return F;
}

Mat toy_vertices(const BodyProportions& p, Mat* joints) {
  const Mat J = joint_positions(p);
  if (joints) *joints = J;
  return mesh_from(p, J);
}

Mat toy_joint_regressor() {
  const int N = kNumCapsules * kCapsuleVerts;
  Mat R = Mat::Zero(kNumJoints, N);
  auto ring_mean = [&R](int j, int capsule, int ring) {
    for (int s = 0; s < kSegments; ++s) R(j, ring_vertex(capsule, ring, s)) = 1.0 / kSegments;
  };
  ring_mean(kRoot, edge_capsule(kSpine1), 0);
  ring_mean(kEarL, edge_capsule(kEarLTip), 0);
  ring_mean(kEarR, edge_capsule(kEarRTip), 0);
  for (int j = 1; j < kNumJoints; ++j) {
    if (j == kEarL || j == kEarR) continue;
    ring_mean(j, edge_capsule(j), kRings - 1);
  }
  return R;
}

Mat toy_lbs_weights() {
  const BodyProportions p;
  const Mat J = joint_positions(p);
  const Mat V = mesh_from(p, J);
  const auto caps = capsules(p);
  const Eigen::Index N = V.rows();
  Mat W = Mat::Zero(N, kNumJoints);
  std::vector<std::pair<Vec3, Vec3>> bones;
  for (int j = 0; j < kNumJoints; ++j) bones.push_back(bone_segment(j, J, caps));
  for (Eigen::Index i = 0; i < N; ++i) {
    const Vec3 v = V.row(i).transpose();
    std::vector<std::pair<double, int>> cand;
    for (int j = 0; j < kNumJoints; ++j) {
      const double d2 = point_segment_distance2(v, bones[j].first, bones[j].second);
      const double inv = 1.0 / (d2 + 1e-4);
      cand.emplace_back(inv * inv, j);
    }
    std::partial_sort(cand.begin(), cand.begin() + 4, cand.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    double total = 0.0;
    for (int k = 0; k < 4; ++k) total += cand[k].first;
    for (int k = 0; k < 4; ++k) W(i, cand[k].second) = cand[k].first / total;
  }
  return W;
}

std::vector<KeypointDef> toy_keypoints() {
  const Mat V = toy_vertices(BodyProportions{});
  const Vec3 down(0, -1, 0), up(0, 1, 0), left(0, 0, 1), right(0, 0, -1);
  auto vk = [](const char* name, double w, int index) {
    return KeypointDef{name, w, KeypointDef::Anchor::Vertex, index};
  };
  struct Leg {
    const char* prefix;
    int leg, lower, upper;
    Vec3 side;
  };
  const Leg legs[4] = {{"leg_lf", 0, kFlLower, kFlUpper, left},
                       {"leg_lr", 2, kRlLower, kRlUpper, left},
                       {"leg_rf", 1, kFrLower, kFrUpper, right},
                       {"leg_rr", 3, kRrLower, kRrUpper, right}};
  std::vector<KeypointDef> k;
  for (const Leg& l : legs) {
    const std::string pre = l.prefix;
    k.push_back(vk((pre + "_paw").c_str(), 3.0, facing(V, foot_capsule(l.leg), 1, down)));
    k.push_back(vk((pre + "_middle").c_str(), 2.0, facing(V, edge_capsule(l.lower), kRings - 1, l.side)));
    k.push_back(vk((pre + "_top").c_str(), 2.0, facing(V, edge_capsule(l.upper), kRings - 1, l.side)));
  }
  k.push_back(vk("tail_start", 3.0, facing(V, edge_capsule(kTail1), kRings - 1, up)));
  k.push_back(vk("tail_end", 3.0, pole_vertex(edge_capsule(kTail3), 1)));
  k.push_back(vk("base_ear_l", 2.0, facing(V, edge_capsule(kEarLTip), 0, left)));
  k.push_back(vk("base_ear_r", 2.0, facing(V, edge_capsule(kEarRTip), 0, right)));
  k.push_back(vk("nose", 3.0, pole_vertex(edge_capsule(kMuzzle), 1)));
  k.push_back(vk("chin", 1.0, facing(V, edge_capsule(kMuzzle), 1, down)));
  k.push_back(vk("ear_tip_l", 2.0, pole_vertex(edge_capsule(kEarLTip), 1)));
  k.push_back(vk("ear_tip_r", 2.0, pole_vertex(edge_capsule(kEarRTip), 1)));
  k.push_back(vk("eye_l", 1.0, facing(V, kSkullCapsule, 1, Vec3(0.3, 0.4, 0.85))));
  k.push_back(vk("eye_r", 1.0, facing(V, kSkullCapsule, 1, Vec3(0.3, 0.4, -0.85))));
  return k;
}

namespace {

// Multiplicative jitter around an archetype.
BodyProportions sample_proportions(const BodyProportions& base, double spread, Rng& rng) {
  auto j = [&](double m, double s) { return m * std::exp(s * spread * rng.normal()); };
  BodyProportions p;
  const double legs = rng.normal();
  p.torso_length = j(base.torso_length, 0.12);
  p.torso_girth = j(base.torso_girth, 0.12);
  p.chest_depth = j(base.chest_depth, 0.10);
  p.neck_length = j(base.neck_length, 0.15);
  p.neck_girth = j(base.neck_girth, 0.12);
  p.head_length = j(base.head_length, 0.18);
  p.head_size = j(base.head_size, 0.10);
  p.ear_length = j(base.ear_length, 0.25);
  p.ear_width = j(base.ear_width, 0.15);
  // legs share a common length factor
  const double shared = std::exp(0.15 * spread * legs);
  p.front_leg_length = shared * j(base.front_leg_length, 0.05);
  p.rear_leg_length = shared * j(base.rear_leg_length, 0.05);
  p.leg_girth = j(base.leg_girth, 0.12);
  p.tail_length = j(base.tail_length, 0.25);
  p.tail_girth = j(base.tail_girth, 0.15);
  return p;
}

}  // namespace

ShapeCorpus toy_shape_corpus(int num_dogs, int num_others, std::uint64_t seed) {
  require(num_dogs >= 0 && num_others >= 0 && num_dogs + num_others >= 2, ErrorCode::InvalidArgument,
          "corpus needs at least two meshes");
  Rng rng(seed);
  ShapeCorpus c;
  const BodyProportions dog;
  for (int i = 0; i < num_dogs; ++i) {
    c.meshes.push_back(toy_vertices(sample_proportions(dog, 1.0, rng)));
    c.is_dog.push_back(true);
  }
  // Non-dog archetypes: long-legged/long-necked, feline, bovine.
  BodyProportions horse;
  horse.front_leg_length = horse.rear_leg_length = 1.4;
  horse.neck_length = 1.5;
  horse.head_length = 1.4;
  horse.tail_length = 0.7;
  horse.ear_length = 0.6;
  BodyProportions cat;
  cat.front_leg_length = cat.rear_leg_length = 0.85;
  cat.tail_length = 1.3;
  cat.head_length = 0.6;
  cat.ear_length = 0.8;
  cat.torso_girth = 0.85;
  BodyProportions cow;
  cow.torso_girth = 1.4;
  cow.chest_depth = 1.3;
  cow.leg_girth = 1.4;
  cow.neck_girth = 1.3;
  cow.head_size = 1.2;
  const BodyProportions archetypes[3] = {horse, cat, cow};
  for (int i = 0; i < num_others; ++i) {
    c.meshes.push_back(toy_vertices(sample_proportions(archetypes[i % 3], 0.6, rng)));
    c.is_dog.push_back(false);
  }
  return c;
}

ModelBundle build_toy_model(int num_dogs, int num_others, int num_components, double dog_weight_fraction,
                            std::uint64_t seed) {
  const ShapeCorpus corpus = toy_shape_corpus(num_dogs, num_others, seed);
  ModelBundle m;
  m.skeleton = toy_skeleton();
  m.space = build_shape_space(corpus.meshes, corpus.is_dog, dog_weight_fraction, num_components,
                              m.skeleton.torso_endpoint_vertex_ids);
  m.joint_regressor = toy_joint_regressor();
  m.mesh.vertices = m.space.mean_vertices;
  m.mesh.faces = toy_faces();
  m.mesh.keypoints = toy_keypoints();
  m.mesh.lbs_weights = toy_lbs_weights();
  // Rest offsets follow the mean shape.
  const Mat rest = m.joint_regressor * m.mesh.vertices;
  for (int j = 0; j < m.skeleton.num_joints(); ++j) {
    const int p = m.skeleton.joints[j].parent;
    m.skeleton.joints[j].offset = (p < 0 ? rest.row(j) : Eigen::RowVector3d(rest.row(j) - rest.row(p))).transpose();
  }
  m.finalize();
  return m;
}

}  // namespace quadfit
