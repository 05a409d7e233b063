#include "quadfit/model.hpp"

#include <cmath>
#include <numeric>

namespace quadfit {

using RowMat3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;

ShapeParams ShapeParams::zeros(int k) {
  ShapeParams s;
  s.beta = Vec::Zero(k);
  s.kappa = Vec::Zero(kNumScaleGroups);
  return s;
}

Mat Skeleton::rest_joints() const {
  Mat out(num_joints(), 3);
  for (int j = 0; j < num_joints(); ++j) {
    const Vec3 base = joints[j].parent < 0 ? Vec3::Zero() : Vec3(out.row(joints[j].parent).transpose());
    out.row(j) = (base + joints[j].offset).transpose();
  }
  return out;
}

std::vector<int> Skeleton::scale_group_of_joint() const {
  std::vector<int> group(joints.size(), kNumScaleGroups);
  for (int g = 0; g < static_cast<int>(scale_targets.size()); ++g) {
    for (int j : scale_targets[g].joints) group[j] = g;
  }
  return group;
}

void Skeleton::validate(int num_vertices) const {
  require(!joints.empty(), ErrorCode::Format, "skeleton has no joints");
  int roots = 0;
  for (int j = 0; j < num_joints(); ++j) {
    const int p = joints[j].parent;
    if (p < 0) {
      ++roots;
      require(p == -1, ErrorCode::Format, "root parent must be -1");
    } else {
      require(p < j, ErrorCode::Format, "joint " + joints[j].name + " precedes its parent");
    }
  }
  require(roots == 1 && joints[0].parent == -1, ErrorCode::Format, "skeleton must have exactly one root at index 0");
  require(static_cast<int>(scale_targets.size()) == kNumScaleGroups, ErrorCode::Format,
          "skeleton must define exactly 7 scale targets");
  for (const auto& t : scale_targets) {
    for (int j : t.joints) {
      require(j > 0 && j < num_joints(), ErrorCode::Format, "scale target " + t.name + " references a missing bone");
    }
  }
  for (const auto& leg : leg_joint_ids) {
    for (int j : leg) require(j > 0 && j < num_joints(), ErrorCode::Format, "leg joint out of range");
  }
  require(head_bone_id > 0 && head_bone_id < num_joints(), ErrorCode::Format, "head bone out of range");
  for (int v : torso_endpoint_vertex_ids) {
    require(v >= 0 && v < num_vertices, ErrorCode::Format, "torso endpoint vertex out of range");
  }
  require(torso_endpoint_vertex_ids[0] != torso_endpoint_vertex_ids[1], ErrorCode::Format,
          "torso endpoints must differ");
}

void TemplateMesh::validate(const Skeleton& skeleton) const {
  const int n = num_vertices();
  require(vertices.cols() == 3, ErrorCode::Format, "vertices must be N x 3");
  require(lbs_weights.rows() == n && lbs_weights.cols() == skeleton.num_joints(), ErrorCode::Format,
          "lbs weights must be N x J");
  require((lbs_weights.array() >= 0.0).all(), ErrorCode::Format, "lbs weights must be non-negative");
  for (int i = 0; i < n; ++i) {
    require(std::abs(lbs_weights.row(i).sum() - 1.0) <= 1e-6, ErrorCode::Format,
            "lbs weight row " + std::to_string(i) + " does not sum to one");
  }
  require((faces.array() >= 0).all() && (faces.array() < n).all(), ErrorCode::Format,
          "face references a missing vertex");
  for (const auto& k : keypoints) {
    const int limit = k.anchor == KeypointDef::Anchor::Vertex ? n : skeleton.num_joints();
    require(k.index >= 0 && k.index < limit, ErrorCode::Format, "keypoint " + k.name + " anchor out of range");
    require(k.weight > 0.0, ErrorCode::Format, "keypoint weights must be positive");
  }
}

void ModelBundle::finalize() {
  skeleton.validate(mesh.num_vertices());
  mesh.validate(skeleton);
  const int J = num_joints();
  const int N = num_vertices();
  require(space.mean_vertices.rows() == N && space.mean_vertices.cols() == 3, ErrorCode::Format,
          "shape space mean does not match the template");
  require(space.basis.cols() == 3 * N, ErrorCode::Format, "shape basis width must be 3N");
  require(space.eigenvalues.size() == space.basis.rows(), ErrorCode::Format, "eigenvalue count must equal K");
  require(joint_regressor.rows() == J && joint_regressor.cols() == N, ErrorCode::Format,
          "joint regressor must be J x N");
  if (space.mean_coeffs.size() != space.basis.rows()) space.mean_coeffs = Vec::Zero(space.basis.rows());

  offset_matrix = Mat::Identity(J, J);
  ancestor_matrix = Mat::Zero(J, J);
  for (int j = 0; j < J; ++j) {
    const int p = skeleton.joints[j].parent;
    if (p >= 0) offset_matrix(j, p) = -1.0;
    for (int k = j; k >= 0; k = skeleton.joints[k].parent) ancestor_matrix(j, k) = 1.0;
  }
  scale_group = skeleton.scale_group_of_joint();
  sparse_weights.assign(N, {});
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < J; ++j) {
      const double w = mesh.lbs_weights(i, j);
      if (w != 0.0) sparse_weights[i].emplace_back(j, w);
    }
  }
}

Mat apply_shape(const ShapeSpace& space, std::span<const double> beta) {
  require(static_cast<int>(beta.size()) == space.num_components(), ErrorCode::DimensionMismatch,
          "beta length must equal the number of components");
  Mat out = space.mean_vertices;
  if (beta.empty()) return out;
  const Eigen::Map<const Eigen::RowVectorXd> b(beta.data(), static_cast<Eigen::Index>(beta.size()));
  const Eigen::RowVectorXd flat = b * space.basis;
  out += Eigen::Map<const Mat>(flat.data(), out.rows(), 3);
  return out;
}

LimbScaleResult apply_limb_scales(const Skeleton& skeleton, const Mat& rest_joints,
                                  const Mat& rest_vertices, const Mat& lbs_weights,
                                  std::span<const double> kappa) {
  require(kappa.size() == static_cast<std::size_t>(kNumScaleGroups), ErrorCode::DimensionMismatch,
          "kappa must have 7 entries");
  const int J = skeleton.num_joints();
  require(rest_joints.rows() == J, ErrorCode::DimensionMismatch, "rest joints must be J x 3");
  const auto group = skeleton.scale_group_of_joint();
  LimbScaleResult r;
  r.offsets.resize(J, 3);
  r.joints.resize(J, 3);
  r.bone_lengths.resize(J - 1);
  for (int j = 0; j < J; ++j) {
    const int p = skeleton.joints[j].parent;
    const double s = group[j] < kNumScaleGroups ? std::exp(kappa[group[j]]) : 1.0;
    if (p < 0) {
      r.offsets.row(j) = rest_joints.row(j);
      r.joints.row(j) = rest_joints.row(j);
    } else {
      r.offsets.row(j) = s * (rest_joints.row(j) - rest_joints.row(p));
      r.joints.row(j) = r.joints.row(p) + r.offsets.row(j);
      r.bone_lengths[j - 1] = r.offsets.row(j).norm();
    }
  }
  r.vertices = rest_vertices + lbs_weights * (r.joints - rest_joints);
  return r;
}

namespace {

// Written as v + sum_j w_j ((R_j - I) v + p_j - R_j J_j) so that an identity
// pose reproduces the input bit for bit.
Eigen::RowVector3d skin_offset(const Mat& world, const Mat& rest_joints, Eigen::Index j) {
  const Eigen::Map<const RowMat3> Rw(world.row(j).data());
  return world.row(j).segment<3>(9) - (Rw * rest_joints.row(j).transpose()).transpose();
}

Mat fk_forward(const std::vector<Joint>& joints, const Mat& R, const Mat& offsets, const Eigen::RowVector3d& t) {
  const int J = static_cast<int>(joints.size());
  Mat out(J, 12);
  for (int j = 0; j < J; ++j) {
    const Eigen::Map<const RowMat3> Rl(R.row(j).data());
    const Eigen::Vector3d o = offsets.row(j).transpose();
    Eigen::Map<RowMat3> Rw(out.row(j).data());
    const int p = joints[j].parent;
    if (p < 0) {
      Rw = Rl;
      out.row(j).segment<3>(9) = (Rl * o).transpose() + t;
    } else {
      const Eigen::Map<const RowMat3> Rp(out.row(p).data());
      Rw = Rp * Rl;
      out.row(j).segment<3>(9) = out.row(p).segment<3>(9) + (Rp * o).transpose();
    }
  }
  return out;
}

}  // namespace

Mat forward_kinematics(const Skeleton& skeleton, const Mat& scaled_offsets,
                       std::span<const double, 6> root_rot6d, const Mat& joint_rot6d,
                       const Vec3& translation) {
  const int J = skeleton.num_joints();
  require(joint_rot6d.rows() == J - 1 && joint_rot6d.cols() == 6, ErrorCode::DimensionMismatch,
          "joint_rot6d must be (J-1) x 6");
  require(scaled_offsets.rows() == J && scaled_offsets.cols() == 3, ErrorCode::DimensionMismatch,
          "offsets must be J x 3");
  Mat R(J, 9);
  auto put = [&R](int j, const Mat3& m) {
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) R(j, 3 * a + b) = m(a, b);
  };
  put(0, rot6d_to_rotmat(root_rot6d));
  for (int j = 1; j < J; ++j) {
    std::array<double, 6> r6;
    for (int k = 0; k < 6; ++k) r6[k] = joint_rot6d(j - 1, k);
    put(j, rot6d_to_rotmat(r6));
  }
  return fk_forward(skeleton.joints, R, scaled_offsets, translation.transpose());
}

Mat lbs_skin(const Mat& vertices, const Mat& lbs_weights, const Mat& world, const Mat& rest_joints) {
  const Eigen::Index N = vertices.rows(), J = world.rows();
  require(lbs_weights.rows() == N && lbs_weights.cols() == J, ErrorCode::DimensionMismatch,
          "lbs weights must be N x J");
  Mat out = vertices;
  for (Eigen::Index j = 0; j < J; ++j) {
    const RowMat3 A = Eigen::Map<const RowMat3>(world.row(j).data()) - RowMat3::Identity();
    const Eigen::RowVector3d b = skin_offset(world, rest_joints, j);
    for (Eigen::Index i = 0; i < N; ++i) {
      const double w = lbs_weights(i, j);
      if (w == 0.0) continue;
      out.row(i) += w * ((A * vertices.row(i).transpose()).transpose() + b);
    }
  }
  return out;
}

double torso_length(const Skeleton& skeleton, const Mat& vertices) {
  const auto [a, b] = skeleton.torso_endpoint_vertex_ids;
  return (vertices.row(a) - vertices.row(b)).norm();
}

namespace graph {

ShapedBody shape_body(const ModelBundle& model, const ad::Var& beta, const ad::Var& kappa) {
  ad::Tape& t = beta.tape();
  const int N = model.num_vertices();
  const int K = model.space.num_components();
  require(beta.rows() == 1 && beta.cols() == K, ErrorCode::DimensionMismatch, "beta must be 1 x K");
  require(kappa.rows() == 1 && kappa.cols() == kNumScaleGroups, ErrorCode::DimensionMismatch,
          "kappa must be 1 x 7");
  ad::Var mean = t.constant(model.space.mean_vertices);
  ad::Var vertices = mean;
  if (K > 0) {
    ad::Var disp = ad::reshape(ad::matmul(beta, t.constant(model.space.basis)), N, 3);
    vertices = mean + disp;
  }
  ad::Var joints = ad::matmul(t.constant(model.joint_regressor), vertices);
  ad::Var offsets = ad::matmul(t.constant(model.offset_matrix), joints);
  ad::Var scales = ad::concat_rows({ad::exp(ad::transpose(kappa)), t.scalar(1.0)});
  ad::Var per_joint = ad::gather_rows(scales, model.scale_group);
  ad::Var scaled = offsets * per_joint;
  ad::Var scaled_joints = ad::matmul(t.constant(model.ancestor_matrix), scaled);
  ad::Var moved = vertices + ad::matmul(t.constant(model.mesh.lbs_weights), scaled_joints - joints);
  return {moved, scaled_joints, scaled};
}

ad::Var bone_lengths(const ShapedBody& body) {
  std::vector<int> idx(static_cast<std::size_t>(body.offsets.rows() - 1));
  std::iota(idx.begin(), idx.end(), 1);
  return ad::transpose(ad::row_norms(ad::gather_rows(body.offsets, idx)));
}

ad::Var forward_kinematics(const Skeleton& skeleton, const ad::Var& rotations, const ad::Var& offsets,
                           const ad::Var& translation) {
  const int J = skeleton.num_joints();
  require(rotations.rows() == J && rotations.cols() == 9, ErrorCode::DimensionMismatch, "rotations must be J x 9");
  require(offsets.rows() == J && offsets.cols() == 3, ErrorCode::DimensionMismatch, "offsets must be J x 3");
  require(translation.rows() == 1 && translation.cols() == 3, ErrorCode::DimensionMismatch,
          "translation must be 1 x 3");
  const std::vector<Joint>& joints = skeleton.joints;
  Mat out = fk_forward(joints, rotations.value(), offsets.value(),
                       Eigen::RowVector3d(translation.value().row(0)));
  std::vector<int> parents(J);
  for (int j = 0; j < J; ++j) parents[j] = joints[j].parent;
  return rotations.tape().record(
      Mat(out), {rotations, offsets, translation},
      [rotations, offsets, translation, parents, out, J](ad::Tape& t, const Mat& g) {
        const Mat& R = rotations.value();
        const Mat& O = offsets.value();
        Mat gRw = Mat::Zero(J, 9);
        Mat gp = Mat::Zero(J, 3);
        Mat gR = Mat::Zero(J, 9);
        Mat gO = Mat::Zero(J, 3);
        Mat gt = Mat::Zero(1, 3);
        for (int j = 0; j < J; ++j) {
          gRw.row(j) = g.row(j).segment<9>(0);
          gp.row(j) = g.row(j).segment<3>(9);
        }
        for (int j = J - 1; j >= 0; --j) {
          const Eigen::Map<const RowMat3> Rl(R.row(j).data());
          const Eigen::Vector3d o = O.row(j).transpose();
          const Eigen::Map<const RowMat3> gRwj(gRw.row(j).data());
          const Eigen::Vector3d gpj = gp.row(j).transpose();
          Eigen::Map<RowMat3> gRj(gR.row(j).data());
          const int p = parents[j];
          if (p < 0) {
            // Rw = Rl, pos = Rl o + t
            gRj += gRwj + gpj * o.transpose();
            gO.row(j) += (Rl.transpose() * gpj).transpose();
            gt += gpj.transpose();
          } else {
            const Eigen::Map<const RowMat3> Rp(out.row(p).data());
            Eigen::Map<RowMat3> gRwp(gRw.row(p).data());
            // Rw_j = Rp Rl
            gRwp += gRwj * Rl.transpose();
            gRj += Rp.transpose() * gRwj;
            // pos_j = pos_p + Rp o
            gp.row(p) += gpj.transpose();
            gRwp += gpj * o.transpose();
            gO.row(j) += (Rp.transpose() * gpj).transpose();
          }
        }
        if (t.requires_grad(rotations)) t.accumulate(rotations, gR);
        if (t.requires_grad(offsets)) t.accumulate(offsets, gO);
        if (t.requires_grad(translation)) t.accumulate(translation, gt);
      });
}

ad::Var lbs_skin(const ModelBundle& model, const ad::Var& vertices, const ad::Var& world,
                 const ad::Var& rest_joints) {
  const Mat& V = vertices.value();
  const Mat& W = world.value();
  const Mat& Jr = rest_joints.value();
  const auto& sw = model.sparse_weights;
  const Eigen::Index N = V.rows();
  require(N == static_cast<Eigen::Index>(sw.size()), ErrorCode::DimensionMismatch, "vertex count mismatch");
  require(W.rows() == Jr.rows() && W.cols() == 12, ErrorCode::DimensionMismatch, "world must be J x 12");
  std::vector<RowMat3> A(W.rows());
  Mat b(W.rows(), 3);
  for (Eigen::Index j = 0; j < W.rows(); ++j) {
    A[j] = Eigen::Map<const RowMat3>(W.row(j).data()) - RowMat3::Identity();
    b.row(j) = skin_offset(W, Jr, j);
  }
  Mat out = V;
  for (Eigen::Index i = 0; i < N; ++i) {
    for (const auto& [j, w] : sw[i]) {
      out.row(i) += w * ((A[j] * V.row(i).transpose()).transpose() + b.row(j));
    }
  }
  const auto* weights = &sw;
  return vertices.tape().record(
      std::move(out), {vertices, world, rest_joints},
      [vertices, world, rest_joints, weights](ad::Tape& t, const Mat& g) {
        const Mat& V = vertices.value();
        const Mat& W = world.value();
        const Mat& Jr = rest_joints.value();
        const Eigen::Index N = V.rows(), J = W.rows();
        Mat gV = g;
        Mat gW = Mat::Zero(J, 12);
        Mat gJ = Mat::Zero(J, 3);
        for (Eigen::Index i = 0; i < N; ++i) {
          const Eigen::Vector3d gi = g.row(i).transpose();
          if (gi.isZero(0.0)) continue;
          for (const auto& [j, w] : (*weights)[i]) {
            const Eigen::Map<const RowMat3> Rw(W.row(j).data());
            const Eigen::Vector3d local = (V.row(i) - Jr.row(j)).transpose();
            const Eigen::Vector3d back = w * (Rw.transpose() * gi);
            gV.row(i) += back.transpose() - w * gi.transpose();
            gJ.row(j) -= back.transpose();
            Eigen::Map<RowMat3> gR(gW.row(j).data());
            gR += w * gi * local.transpose();
            gW.row(j).segment<3>(9) += w * gi.transpose();
          }
        }
        if (t.requires_grad(vertices)) t.accumulate(vertices, gV);
        if (t.requires_grad(world)) t.accumulate(world, gW);
        if (t.requires_grad(rest_joints)) t.accumulate(rest_joints, gJ);
      });
}

ad::Var keypoints3d(const ModelBundle& model, const ad::Var& posed_vertices, const ad::Var& world) {
  const int N = model.num_vertices();
  bool any_joint = false;
  std::vector<int> idx;
  idx.reserve(model.mesh.keypoints.size());
  for (const auto& k : model.mesh.keypoints) {
    if (k.anchor == KeypointDef::Anchor::Vertex) {
      idx.push_back(k.index);
    } else {
      idx.push_back(N + k.index);
      any_joint = true;
    }
  }
  if (!any_joint) return ad::gather_rows(posed_vertices, idx);
  static const int kPos[3] = {9, 10, 11};
  ad::Var joints = ad::gather_cols(world, kPos);
  return ad::gather_rows(ad::concat_rows({posed_vertices, joints}), idx);
}

}  // namespace graph

Mat repose_tpose(const ShapeParams& shape, const ModelBundle& model) {
  ad::Tape t;
  Mat beta = Eigen::Map<const Mat>(shape.beta.data(), 1, shape.beta.size());
  require(shape.kappa.size() == kNumScaleGroups, ErrorCode::DimensionMismatch, "kappa must have 7 entries");
  Mat kappa = Eigen::Map<const Mat>(shape.kappa.data(), 1, kNumScaleGroups);
  auto body = graph::shape_body(model, t.constant(beta), t.constant(kappa));
  return body.vertices.value();
}

}  // namespace quadfit
