#pragma once

#include "quadfit/ad.hpp"
#include "quadfit/model.hpp"

#include <string>

namespace quadfit {

/// Pinhole camera. The object translation lives in PoseState, not here.
struct Camera {
  double focal = 600.0;  // pixels
  double cx = 128.0;
  double cy = 128.0;
  int width = 256;
  int height = 256;

  static Camera centered(int width, int height, double focal);
  void validate() const;
};

/// Masks are H x W matrices; ground truth is binary, soft renders lie in [0, 1].
using Mask = Mat;

/// (f x/z + cx, f y/z + cy) for every row of points3d + translation.
/// Throws BehindCamera if any depth is not positive.
Mat project(const Mat& points3d, const Camera& camera, const Vec3& translation);

namespace graph {
/// points: n x 3 in the camera frame, focal: 1 x 1. Returns n x 2 pixels.
ad::Var project(const ad::Var& points, const ad::Var& focal, double cx, double cy);

/// Soft silhouette of a projected mesh. Coverage per pixel is
/// 1 - prod_f (1 - sigmoid(sign * d_f^2 / sigma)) with d_f the distance from
/// the pixel center to the triangle boundary in normalized image units
/// (pixels * 2 / width). Face pairs whose contribution is below e^-30 are
/// skipped, so the cost is proportional to the covered area.
ad::Var soft_rasterize(const ad::Var& vertices2d, const Faces& faces, int width, int height, double sigma);
}  // namespace graph

Mask soft_rasterize(const Mat& vertices2d, const Faces& faces, int width, int height, double sigma);

/// 1 where the pixel center lies inside (or on the edge of) any projected triangle.
Mask hard_rasterize(const Mat& vertices2d, const Faces& faces, int width, int height);

/// Deterministic stratified basis points in the unit square, B x 2.
Mat bps_basis(int num_points, std::uint64_t seed);

/// Distance from every basis point to the nearest foreground pixel center,
/// divided by the image diagonal. An empty mask encodes as all ones.
Vec bps_encode(const Mask& mask, const Mat& basis);
Vec bps_encode(const Mask& mask, int num_points, std::uint64_t seed);

/// |A and B| / |A or B| over pixels > 0.5; 1 when both are empty.
double iou(const Mask& a, const Mask& b);

struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel ranges
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
};

/// Bounding box of pixels > 0.5. Throws Precondition for an empty mask.
BoundingBox mask_bbox(const Mask& mask);

// Binary PGM (P5, maxval 255) and PPM (P6) images.
Mask read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Mask& mask);
/// rgb: three H x W channels in [0, 1].
void write_ppm(const std::string& path, const Mat& r, const Mat& g, const Mat& b);

}  // namespace quadfit
