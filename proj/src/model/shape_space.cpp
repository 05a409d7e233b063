#include "quadfit/model.hpp"

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <cmath>

namespace quadfit {

Mat normalize_torso(const Mat& vertices, std::array<int, 2> endpoints) {
  require(vertices.cols() == 3, ErrorCode::DimensionMismatch, "vertices must be N x 3");
  require(endpoints[0] >= 0 && endpoints[0] < vertices.rows() && endpoints[1] >= 0 &&
              endpoints[1] < vertices.rows(),
          ErrorCode::InvalidArgument, "torso endpoint out of range");
  // endpoints[0] is the front (sternum) vertex, endpoints[1] the rear (pelvis).
  const Vec3 front = vertices.row(endpoints[0]).transpose();
  const Vec3 rear = vertices.row(endpoints[1]).transpose();
  const double len = (front - rear).norm();
  require(len > 1e-12, ErrorCode::Precondition, "torso endpoints coincide");
  const Vec3 center = 0.5 * (front + rear);
  const Mat3 R = Eigen::Quaterniond::FromTwoVectors(front - rear, Vec3::UnitX()).toRotationMatrix();
  Mat out(vertices.rows(), 3);
  for (Eigen::Index i = 0; i < vertices.rows(); ++i) {
    out.row(i) = (R * (vertices.row(i).transpose() - center)).transpose() / len;
  }
  return out;
}

ShapeSpace build_shape_space(std::span<const Mat> meshes, const std::vector<bool>& is_dog,
                             double dog_weight_fraction, int num_components,
                             std::array<int, 2> torso_endpoints) {
  const int M = static_cast<int>(meshes.size());
  require(M >= 2, ErrorCode::InvalidArgument, "shape space needs at least two meshes");
  require(static_cast<int>(is_dog.size()) == M, ErrorCode::DimensionMismatch, "is_dog length mismatch");
  require(num_components >= 0 && num_components <= M - 1, ErrorCode::InvalidArgument,
          "number of components must be in [0, M-1]");
  require(dog_weight_fraction > 0.0 && dog_weight_fraction < 1.0, ErrorCode::InvalidArgument,
          "dog weight fraction must be in (0, 1)");
  const Eigen::Index N = meshes[0].rows();
  for (const Mat& m : meshes) {
    require(m.rows() == N && m.cols() == 3, ErrorCode::DimensionMismatch, "meshes must share topology");
  }

  int dogs = 0;
  for (bool d : is_dog) dogs += d ? 1 : 0;
  Vec w(M);
  for (int i = 0; i < M; ++i) {
    if (dogs == 0 || dogs == M) {
      w[i] = 1.0 / M;
    } else {
      w[i] = is_dog[i] ? dog_weight_fraction / dogs : (1.0 - dog_weight_fraction) / (M - dogs);
    }
  }

  Mat X(M, 3 * N);
  for (int i = 0; i < M; ++i) {
    const Mat n = normalize_torso(meshes[i], torso_endpoints);
    X.row(i) = Eigen::Map<const Eigen::RowVectorXd>(n.data(), 3 * N);
  }
  const Eigen::RowVectorXd mean = w.transpose() * X;
  Mat A = X.rowwise() - mean;
  for (int i = 0; i < M; ++i) A.row(i) *= std::sqrt(w[i]);

  ShapeSpace s;
  s.mean_vertices = Eigen::Map<const Mat>(mean.data(), N, 3);
  s.sample_weights = w;
  s.basis.resize(num_components, 3 * N);
  s.eigenvalues.resize(num_components);
  s.mean_coeffs = Vec::Zero(num_components);
  if (num_components > 0) {
    Eigen::BDCSVD<Mat> svd(A, Eigen::ComputeThinV);
    const Mat V = svd.matrixV();
    for (int k = 0; k < num_components; ++k) {
      Eigen::RowVectorXd b = V.col(k).transpose();
      Eigen::Index arg;
      b.cwiseAbs().maxCoeff(&arg);
      if (b[arg] < 0) b = -b;  // deterministic sign
      s.basis.row(k) = b;
      s.eigenvalues[k] = svd.singularValues()[k] * svd.singularValues()[k];
    }
  }
  return s;
}

Vec project_to_space(const ShapeSpace& space, const Mat& vertices) {
  require(vertices.rows() == space.mean_vertices.rows() && vertices.cols() == 3, ErrorCode::DimensionMismatch,
          "mesh does not match the shape space");
  const Mat d = vertices - space.mean_vertices;
  const Eigen::Map<const Eigen::VectorXd> flat(d.data(), d.size());
  return space.basis * flat;
}

}  // namespace quadfit
