#pragma once

#include "quadfit/ad.hpp"
#include "quadfit/core.hpp"

#include <array>
#include <span>
#include <string>
#include <vector>

namespace quadfit {

inline constexpr int kNumScaleGroups = 7;

using Faces = Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor>;

struct Joint {
  std::string name;
  int parent = -1;
  Vec3 offset = Vec3::Zero();  // rest offset from the parent joint, model units
};

/// One entry of kappa: the joints whose rest offsets are scaled by exp(kappa_i).
struct ScaleTarget {
  std::string name;
  std::vector<int> joints;
};

struct KeypointDef {
  enum class Anchor { Vertex, Joint };
  std::string name;
  double weight = 1.0;
  Anchor anchor = Anchor::Vertex;
  int index = 0;
};

struct Skeleton {
  std::vector<Joint> joints;
  std::array<std::vector<int>, 4> leg_joint_ids;
  int head_bone_id = -1;
  std::array<int, 2> torso_endpoint_vertex_ids{0, 0};
  std::vector<ScaleTarget> scale_targets;
  /// Rotation axis (in every leg joint's rest frame) that swings a leg sideways.
  Vec3 abduction_axis = Vec3::UnitX();

  int num_joints() const { return static_cast<int>(joints.size()); }
  /// Rest joint positions from the cumulative offsets.
  Mat rest_joints() const;
  /// kappa index per joint, or kNumScaleGroups if the joint is not scaled.
  std::vector<int> scale_group_of_joint() const;
  /// Throws on broken topology or out-of-range references.
  void validate(int num_vertices) const;
};

struct TemplateMesh {
  Mat vertices;      // N x 3
  Faces faces;       // F x 3
  Mat lbs_weights;   // N x J, rows sum to one
  std::vector<KeypointDef> keypoints;

  int num_vertices() const { return static_cast<int>(vertices.rows()); }
  void validate(const Skeleton& skeleton) const;
};

struct ShapeSpace {
  Mat mean_vertices;   // N x 3
  Mat basis;           // K x 3N, orthonormal rows
  Vec eigenvalues;     // K, diagonal of the coefficient covariance
  Vec mean_coeffs;     // K, zero by construction
  Vec sample_weights;  // per input mesh, sums to one

  int num_components() const { return static_cast<int>(basis.rows()); }
};

struct ShapeParams {
  Vec beta;                             // K PCA coefficients
  Vec kappa = Vec::Zero(kNumScaleGroups);  // log scales

  static ShapeParams zeros(int k);
};

struct PoseState {
  std::array<double, 6> root_rot6d{1, 0, 0, 0, 1, 0};
  Mat joint_rot6d;  // (J-1) x 6, non-root joints in skeleton order
  Vec latent;       // flow latent y
  Vec3 translation = Vec3::Zero();
};

/// Everything needed to evaluate the articulated model. The derived matrices
/// are filled in by finalize() and are immutable afterwards.
struct ModelBundle {
  Skeleton skeleton;
  TemplateMesh mesh;
  ShapeSpace space;
  Mat joint_regressor;  // J x N; rest joints = regressor * shaped vertices

  // derived
  Mat offset_matrix;    // J x J, offsets = offset_matrix * joints
  Mat ancestor_matrix;  // J x J, joints = ancestor_matrix * offsets
  std::vector<int> scale_group;  // per joint
  std::vector<std::vector<std::pair<int, double>>> sparse_weights;  // per vertex

  void finalize();
  int num_joints() const { return skeleton.num_joints(); }
  int num_vertices() const { return mesh.num_vertices(); }
  int num_keypoints() const { return static_cast<int>(mesh.keypoints.size()); }
  int pose_dim() const { return 3 * (num_joints() - 1); }
};

// -- rotations ---------------------------------------------------------------

/// Gram-Schmidt of the two stored columns; throws DegenerateRotation if they are
/// zero or parallel.
Mat3 rot6d_to_rotmat(std::span<const double, 6> r);
std::array<double, 6> rotmat_to_rot6d(const Mat3& R);
Mat3 axis_angle_to_rotmat(const Vec3& w);
Vec3 rotmat_to_axis_angle(const Mat3& R);

namespace graph {
/// n x 6 -> n x 9 (row-major 3x3 per row).
ad::Var rot6d_to_rotmat(const ad::Var& r);
/// n x 3 axis-angle -> n x 9.
ad::Var axis_angle_to_rotmat(const ad::Var& w);
/// n x 9 -> n x 3 axis-angle (log map).
ad::Var rotmat_to_axis_angle(const ad::Var& R);
}  // namespace graph

// -- shape -------------------------------------------------------------------

Mat apply_shape(const ShapeSpace& space, std::span<const double> beta);

struct LimbScaleResult {
  Mat offsets;       // J x 3 scaled offsets; row 0 is the root position
  Vec bone_lengths;  // J-1 lengths of the scaled non-root offsets
  Mat joints;        // J x 3 scaled rest joints
  Mat vertices;      // N x 3 scaled rest vertices
};

LimbScaleResult apply_limb_scales(const Skeleton& skeleton, const Mat& rest_joints,
                                  const Mat& rest_vertices, const Mat& lbs_weights,
                                  std::span<const double> kappa);

/// Joint world transforms as a J x 12 matrix: row-major rotation then position.
Mat forward_kinematics(const Skeleton& skeleton, const Mat& scaled_offsets,
                       std::span<const double, 6> root_rot6d, const Mat& joint_rot6d,
                       const Vec3& translation);

Mat lbs_skin(const Mat& vertices, const Mat& lbs_weights, const Mat& world,
             const Mat& rest_joints);

/// Shape + limb scales with every joint at identity rotation.
Mat repose_tpose(const ShapeParams& shape, const ModelBundle& model);

/// Euclidean distance between the two torso endpoint vertices.
double torso_length(const Skeleton& skeleton, const Mat& vertices);

/// Rescales and rigidly aligns a mesh so its torso endpoints sit at
/// (-0.5, 0, 0) and (0.5, 0, 0).
Mat normalize_torso(const Mat& vertices, std::array<int, 2> endpoints);

/// Weighted PCA of registered meshes. Every mesh is first torso-normalized;
/// meshes flagged as dogs share `dog_weight_fraction` of the total weight.
ShapeSpace build_shape_space(std::span<const Mat> meshes, const std::vector<bool>& is_dog,
                             double dog_weight_fraction, int num_components,
                             std::array<int, 2> torso_endpoints);

/// Coefficients of a (torso-normalized) mesh in the space.
Vec project_to_space(const ShapeSpace& space, const Mat& vertices);

// -- differentiable model ----------------------------------------------------

namespace graph {

struct ShapedBody {
  ad::Var vertices;  // N x 3 after shape and limb scaling
  ad::Var joints;    // J x 3 scaled rest joints
  ad::Var offsets;   // J x 3 scaled offsets (row 0 = root position)
};

ShapedBody shape_body(const ModelBundle& model, const ad::Var& beta, const ad::Var& kappa);

/// Lengths of the non-root scaled offsets, 1 x (J-1).
ad::Var bone_lengths(const ShapedBody& body);

/// Fused forward kinematics. rotations: J x 9 local rotations (row 0 = root),
/// offsets: J x 3, translation: 1 x 3. Returns J x 12 (rotation, position).
ad::Var forward_kinematics(const Skeleton& skeleton, const ad::Var& rotations,
                           const ad::Var& offsets, const ad::Var& translation);

/// Fused linear blend skinning with constant sparse weights.
ad::Var lbs_skin(const ModelBundle& model, const ad::Var& vertices, const ad::Var& world,
                 const ad::Var& rest_joints);

/// Keypoint anchors on the posed body, K x 3.
ad::Var keypoints3d(const ModelBundle& model, const ad::Var& posed_vertices, const ad::Var& world);

}  // namespace graph

// -- procedural toy quadruped ---------------------------------------------------

/// Proportion multipliers for the procedural body. All ones is the template.
struct BodyProportions {
  double torso_length = 1.0;
  double torso_girth = 1.0;
  double chest_depth = 1.0;
  double neck_length = 1.0;
  double neck_girth = 1.0;
  double head_length = 1.0;
  double head_size = 1.0;
  double ear_length = 1.0;
  double ear_width = 1.0;
  double front_leg_length = 1.0;
  double rear_leg_length = 1.0;
  double leg_girth = 1.0;
  double tail_length = 1.0;
  double tail_girth = 1.0;
};

/// Skeleton topology, keypoint map and scale groups of the toy quadruped.
Skeleton toy_skeleton();
Faces toy_faces();
/// Registered mesh (shared topology) for the given proportions, plus its joints.
Mat toy_vertices(const BodyProportions& p, Mat* joints = nullptr);
/// Regressor mapping toy vertices to joint positions (J x N).
Mat toy_joint_regressor();
/// Inverse-distance-to-bone skinning weights for the template proportions.
Mat toy_lbs_weights();
std::vector<KeypointDef> toy_keypoints();

struct ShapeCorpus {
  std::vector<Mat> meshes;
  std::vector<bool> is_dog;
};

ShapeCorpus toy_shape_corpus(int num_dogs, int num_others, std::uint64_t seed);

/// Builds a complete bundle from the toy corpus.
ModelBundle build_toy_model(int num_dogs, int num_others, int num_components,
                            double dog_weight_fraction, std::uint64_t seed);

}  // namespace quadfit
