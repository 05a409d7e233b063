#include "quadfit/render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace quadfit {

Camera Camera::centered(int width, int height, double focal) {
  Camera c;
  c.focal = focal;
  c.width = width;
  c.height = height;
  c.cx = 0.5 * width;
  c.cy = 0.5 * height;
  return c;
}

void Camera::validate() const {
  require(focal > 0.0 && std::isfinite(focal), ErrorCode::InvalidArgument, "focal length must be positive");
  require(width > 0 && height > 0, ErrorCode::InvalidArgument, "image size must be positive");
}

Mat project(const Mat& points3d, const Camera& camera, const Vec3& translation) {
  camera.validate();
  require(points3d.cols() == 3, ErrorCode::DimensionMismatch, "points must be n x 3");
  Mat out(points3d.rows(), 2);
  for (Eigen::Index i = 0; i < points3d.rows(); ++i) {
    const Vec3 p = points3d.row(i).transpose() + translation;
    require(p.z() > 0.0, ErrorCode::BehindCamera, "point " + std::to_string(i) + " is behind the camera");
    out(i, 0) = camera.focal * p.x() / p.z() + camera.cx;
    out(i, 1) = camera.focal * p.y() / p.z() + camera.cy;
  }
  return out;
}

namespace graph {

ad::Var project(const ad::Var& points, const ad::Var& focal, double cx, double cy) {
  const Mat& P = points.value();
  require(P.cols() == 3, ErrorCode::DimensionMismatch, "points must be n x 3");
  require(focal.rows() == 1 && focal.cols() == 1, ErrorCode::DimensionMismatch, "focal must be 1 x 1");
  const double f = focal.item();
  require(f > 0.0, ErrorCode::InvalidArgument, "focal length must be positive");
  Mat out(P.rows(), 2);
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    require(P(i, 2) > 0.0, ErrorCode::BehindCamera, "point " + std::to_string(i) + " is behind the camera");
    out(i, 0) = f * P(i, 0) / P(i, 2) + cx;
    out(i, 1) = f * P(i, 1) / P(i, 2) + cy;
  }
  return points.tape().record(std::move(out), {points, focal}, [points, focal](ad::Tape& t, const Mat& g) {
    const Mat& P = points.value();
    const double f = focal.item();
    Mat gP(P.rows(), 3);
    double gf = 0.0;
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
      const double iz = 1.0 / P(i, 2);
      const double u = P(i, 0) * iz, v = P(i, 1) * iz;
      gP(i, 0) = g(i, 0) * f * iz;
      gP(i, 1) = g(i, 1) * f * iz;
      gP(i, 2) = -(g(i, 0) * u + g(i, 1) * v) * f * iz;
      gf += g(i, 0) * u + g(i, 1) * v;
    }
    if (t.requires_grad(points)) t.accumulate(points, gP);
    if (t.requires_grad(focal)) t.accumulate(focal, Mat::Constant(1, 1, gf));
  });
}

}  // namespace graph

namespace {

using Vec2 = Eigen::Vector2d;

constexpr double kCutoff = 30.0;      // skip pairs with sigmoid below e^-30
constexpr double kSaturated = 40.0;   // coverage within e^-40 of one

double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

struct Tri {
  Vec2 v[3];
  int idx[3];
  double area2;
};

struct PixelEval {
  double d2;   // squared pixel distance to the boundary
  int edge;    // closest edge (v[edge], v[edge+1])
  double t;    // foot parameter on that edge
  Vec2 diff;   // p - closest point
  bool inside;
};

Tri make_tri(const Mat& V, const Faces& F, Eigen::Index f) {
  Tri t;
  for (int k = 0; k < 3; ++k) {
    t.idx[k] = F(f, k);
    t.v[k] = Vec2(V(t.idx[k], 0), V(t.idx[k], 1));
  }
  t.area2 = cross2(t.v[1] - t.v[0], t.v[2] - t.v[0]);
  return t;
}

bool inside_tri(const Tri& t, const Vec2& p) {
  if (t.area2 == 0.0) return false;
  const double s = t.area2 > 0.0 ? 1.0 : -1.0;
  for (int e = 0; e < 3; ++e) {
    const Vec2& a = t.v[e];
    const Vec2& b = t.v[(e + 1) % 3];
    if (s * cross2(b - a, p - a) < 0.0) return false;
  }
  return true;
}

PixelEval eval_pixel(const Tri& t, const Vec2& p) {
  PixelEval r;
  r.inside = inside_tri(t, p);
  r.d2 = std::numeric_limits<double>::infinity();
  r.edge = 0;
  r.t = 0.0;
  for (int e = 0; e < 3; ++e) {
    const Vec2& a = t.v[e];
    const Vec2 ab = t.v[(e + 1) % 3] - a;
    const double L = ab.squaredNorm();
    const double u = L > 0.0 ? std::clamp((p - a).dot(ab) / L, 0.0, 1.0) : 0.0;
    const Vec2 diff = p - (a + u * ab);
    const double d2 = diff.squaredNorm();
    if (d2 < r.d2) {
      r.d2 = d2;
      r.edge = e;
      r.t = u;
      r.diff = diff;
    }
  }
  return r;
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct Raster {
  int width, height;
  double k;       // x = +-d2 * k
  double radius;  // band half-width in pixels

  Raster(int w, int h, double sigma) : width(w), height(h) {
    require(sigma > 0.0, ErrorCode::InvalidArgument, "sigma must be positive");
    require(w > 0 && h > 0, ErrorCode::InvalidArgument, "image size must be positive");
    k = 4.0 / (static_cast<double>(w) * w) / sigma;
    radius = std::sqrt(kCutoff / k);
  }

  // Pixel range whose centers can receive a non-negligible contribution.
  void range(const Tri& t, int& x0, int& x1, int& y0, int& y1) const {
    const double minx = std::min({t.v[0].x(), t.v[1].x(), t.v[2].x()}) - radius;
    const double maxx = std::max({t.v[0].x(), t.v[1].x(), t.v[2].x()}) + radius;
    const double miny = std::min({t.v[0].y(), t.v[1].y(), t.v[2].y()}) - radius;
    const double maxy = std::max({t.v[0].y(), t.v[1].y(), t.v[2].y()}) + radius;
    x0 = std::max(0, static_cast<int>(std::ceil(minx - 0.5)));
    x1 = std::min(width - 1, static_cast<int>(std::floor(maxx - 0.5)));
    y0 = std::max(0, static_cast<int>(std::ceil(miny - 0.5)));
    y1 = std::min(height - 1, static_cast<int>(std::floor(maxy - 0.5)));
  }

  // Accumulated sum of softplus(x_f) per pixel.
  Mat accumulate(const Mat& V, const Faces& F) const {
    Mat S = Mat::Zero(height, width);
    for (Eigen::Index f = 0; f < F.rows(); ++f) {
      const Tri t = make_tri(V, F, f);
      int x0, x1, y0, y1;
      range(t, x0, x1, y0, y1);
      for (int py = y0; py <= y1; ++py) {
        for (int px = x0; px <= x1; ++px) {
          double& s = S(py, px);
          if (s > kSaturated) continue;
          const PixelEval e = eval_pixel(t, Vec2(px + 0.5, py + 0.5));
          const double x = (e.inside ? 1.0 : -1.0) * e.d2 * k;
          if (!e.inside && x < -kCutoff) continue;
          s += softplus(x);
        }
      }
    }
    return S;
  }
};

void check_mesh(const Mat& V, const Faces& F) {
  require(V.cols() == 2, ErrorCode::DimensionMismatch, "projected vertices must be n x 2");
  require(F.size() == 0 || ((F.array() >= 0).all() && (F.array() < V.rows()).all()), ErrorCode::InvalidArgument,
          "face references a missing vertex");
}

}  // namespace

namespace graph {

ad::Var soft_rasterize(const ad::Var& vertices2d, const Faces& faces, int width, int height, double sigma) {
  check_mesh(vertices2d.value(), faces);
  const Raster r(width, height, sigma);
  const Mat S = r.accumulate(vertices2d.value(), faces);
  Mat cov = 1.0 - (-S.array()).exp();
  return vertices2d.tape().record(
      std::move(cov), {vertices2d}, [vertices2d, faces, r, S](ad::Tape& t, const Mat& g) {
        const Mat& V = vertices2d.value();
        Mat gV = Mat::Zero(V.rows(), 2);
        const Mat gS = g.array() * (-S.array()).exp();
        for (Eigen::Index f = 0; f < faces.rows(); ++f) {
          const Tri tri = make_tri(V, faces, f);
          int x0, x1, y0, y1;
          r.range(tri, x0, x1, y0, y1);
          for (int py = y0; py <= y1; ++py) {
            for (int px = x0; px <= x1; ++px) {
              const double gs = gS(py, px);
              if (gs == 0.0 || S(py, px) > kSaturated) continue;
              const PixelEval e = eval_pixel(tri, Vec2(px + 0.5, py + 0.5));
              const double sign = e.inside ? 1.0 : -1.0;
              const double x = sign * e.d2 * r.k;
              if (!e.inside && x < -kCutoff) continue;
              // d(d2)/da = -2 (1 - t) diff, d(d2)/db = -2 t diff (envelope over the foot point)
              const double gd2 = gs * sigmoid(x) * sign * r.k;
              const int ia = tri.idx[e.edge], ib = tri.idx[(e.edge + 1) % 3];
              gV.row(ia) += (-2.0 * (1.0 - e.t) * gd2) * e.diff.transpose();
              gV.row(ib) += (-2.0 * e.t * gd2) * e.diff.transpose();
            }
          }
        }
        t.accumulate(vertices2d, gV);
      });
}

}  // namespace graph

Mask soft_rasterize(const Mat& vertices2d, const Faces& faces, int width, int height, double sigma) {
  check_mesh(vertices2d, faces);
  const Raster r(width, height, sigma);
  const Mat S = r.accumulate(vertices2d, faces);
  return 1.0 - (-S.array()).exp();
}

Mask hard_rasterize(const Mat& vertices2d, const Faces& faces, int width, int height) {
  require(width > 0 && height > 0, ErrorCode::InvalidArgument, "image size must be positive");
  check_mesh(vertices2d, faces);
  Mask m = Mask::Zero(height, width);
  for (Eigen::Index f = 0; f < faces.rows(); ++f) {
    const Tri t = make_tri(vertices2d, faces, f);
    if (t.area2 == 0.0) continue;
    const double minx = std::min({t.v[0].x(), t.v[1].x(), t.v[2].x()});
    const double maxx = std::max({t.v[0].x(), t.v[1].x(), t.v[2].x()});
    const double miny = std::min({t.v[0].y(), t.v[1].y(), t.v[2].y()});
    const double maxy = std::max({t.v[0].y(), t.v[1].y(), t.v[2].y()});
    const int x0 = std::max(0, static_cast<int>(std::ceil(minx - 0.5)));
    const int x1 = std::min(width - 1, static_cast<int>(std::floor(maxx - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(miny - 0.5)));
    const int y1 = std::min(height - 1, static_cast<int>(std::floor(maxy - 0.5)));
    for (int py = y0; py <= y1; ++py) {
      for (int px = x0; px <= x1; ++px) {
        if (m(py, px) == 0.0 && inside_tri(t, Vec2(px + 0.5, py + 0.5))) m(py, px) = 1.0;
      }
    }
  }
  return m;
}

Mat bps_basis(int num_points, std::uint64_t seed) {
  require(num_points >= 1, ErrorCode::InvalidArgument, "BPS needs at least one basis point");
  const int g = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(num_points))));
  const int rows = (num_points + g - 1) / g;
  Rng rng(seed);
  Mat out(num_points, 2);
  for (int i = 0; i < num_points; ++i) {
    out(i, 0) = ((i % g) + rng.uniform()) / g;
    out(i, 1) = ((i / g) + rng.uniform()) / rows;
  }
  return out;
}

Vec bps_encode(const Mask& mask, const Mat& basis) {
  require(basis.cols() == 2, ErrorCode::DimensionMismatch, "basis must be B x 2");
  const int H = static_cast<int>(mask.rows()), W = static_cast<int>(mask.cols());
  const double diag = std::sqrt(static_cast<double>(W) * W + static_cast<double>(H) * H);
  // Foreground centers grouped by row so whole rows can be skipped.
  std::vector<std::vector<double>> xs(H);
  bool any = false;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (mask(y, x) > 0.5) {
        xs[y].push_back(x + 0.5);
        any = true;
      }
    }
  }
  Vec out = Vec::Ones(basis.rows());
  if (!any) return out;
  for (Eigen::Index i = 0; i < basis.rows(); ++i) {
    const double px = basis(i, 0) * W, py = basis(i, 1) * H;
    double best = std::numeric_limits<double>::infinity();
    for (int y = 0; y < H; ++y) {
      const double dy = y + 0.5 - py;
      if (dy * dy >= best || xs[y].empty()) continue;
      // xs[y] is sorted; the nearest center is adjacent to the insertion point.
      auto it = std::lower_bound(xs[y].begin(), xs[y].end(), px);
      if (it != xs[y].end()) best = std::min(best, dy * dy + (*it - px) * (*it - px));
      if (it != xs[y].begin()) {
        --it;
        best = std::min(best, dy * dy + (*it - px) * (*it - px));
      }
    }
    out[i] = std::sqrt(best) / diag;
  }
  return out;
}

Vec bps_encode(const Mask& mask, int num_points, std::uint64_t seed) {
  return bps_encode(mask, bps_basis(num_points, seed));
}

double iou(const Mask& a, const Mask& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::DimensionMismatch, "mask sizes differ");
  long inter = 0, uni = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const bool x = a.data()[i] > 0.5, y = b.data()[i] > 0.5;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

BoundingBox mask_bbox(const Mask& mask) {
  BoundingBox b{static_cast<int>(mask.cols()), static_cast<int>(mask.rows()), 0, 0};
  bool any = false;
  for (int y = 0; y < mask.rows(); ++y) {
    for (int x = 0; x < mask.cols(); ++x) {
      if (mask(y, x) > 0.5) {
        any = true;
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x + 1);
        b.y1 = std::max(b.y1, y + 1);
      }
    }
  }
  require(any, ErrorCode::Precondition, "bounding box of an empty mask is undefined");
  return b;
}

namespace {

int next_token(std::istream& in) {
  std::string tok;
  while (in >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    return std::stoi(tok);
  }
  fail(ErrorCode::Format, "truncated image header");
}

}  // namespace

Mask read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::Io, "cannot open " + path);
  std::string magic;
  in >> magic;
  require(magic == "P5", ErrorCode::Format, path + ": not a binary PGM");
  int w, h, maxval;
  try {
    w = next_token(in);
    h = next_token(in);
    maxval = next_token(in);
  } catch (const std::invalid_argument&) {
    fail(ErrorCode::Format, path + ": malformed PGM header");
  }
  require(w > 0 && h > 0 && maxval > 0 && maxval < 256, ErrorCode::Format, path + ": unsupported PGM header");
  in.get();
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(in.gcount() == static_cast<std::streamsize>(buf.size()), ErrorCode::Format, path + ": truncated PGM");
  Mask m(h, w);
  for (int i = 0; i < w * h; ++i) m.data()[i] = buf[i] / static_cast<double>(maxval);
  return m;
}

namespace {

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

void write_pgm(const std::string& path, const Mask& mask) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::Io, "cannot write " + path);
  out << "P5\n" << mask.cols() << " " << mask.rows() << "\n255\n";
  std::vector<unsigned char> buf(mask.size());
  for (Eigen::Index i = 0; i < mask.size(); ++i) buf[i] = to_byte(mask.data()[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void write_ppm(const std::string& path, const Mat& r, const Mat& g, const Mat& b) {
  require(r.rows() == g.rows() && r.rows() == b.rows() && r.cols() == g.cols() && r.cols() == b.cols(),
          ErrorCode::DimensionMismatch, "channel sizes differ");
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::Io, "cannot write " + path);
  out << "P6\n" << r.cols() << " " << r.rows() << "\n255\n";
  std::vector<unsigned char> buf(3 * r.size());
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    buf[3 * i] = to_byte(r.data()[i]);
    buf[3 * i + 1] = to_byte(g.data()[i]);
    buf[3 * i + 2] = to_byte(b.data()[i]);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace quadfit
