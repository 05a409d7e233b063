#include "quadfit/synthbench.hpp"
#include "quadfit/io.hpp"

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <thread>

namespace quadfit {

namespace fs = std::filesystem;

// -- configs ---------------------------------------------------------------------------


void BreedConfig::validate() const {
  require(num_breeds >= num_clades && num_clades >= 1, ErrorCode::InvalidArgument,
          "breed config needs num_breeds >= num_clades >= 1");
  require(intra >= 0 && inter >= 0 && clade >= 0, ErrorCode::InvalidArgument, "breed config: spreads must be >= 0");
}

BreedConfig BreedConfig::from_json(const Json& j) {
  check_json_keys(j, {"num_breeds", "num_clades", "intra", "inter", "clade", "seed"}, "breed config");
  BreedConfig c;
  read_json_field(j, "num_breeds", c.num_breeds, "breed config");
  read_json_field(j, "num_clades", c.num_clades, "breed config");
  read_json_field(j, "intra", c.intra, "breed config");
  read_json_field(j, "inter", c.inter, "breed config");
  read_json_field(j, "clade", c.clade, "breed config");
  read_json_field(j, "seed", c.seed, "breed config");
  c.validate();
  return c;
}

Json BreedConfig::to_json() const {
  return {{"num_breeds", num_breeds}, {"num_clades", num_clades}, {"intra", intra},
          {"inter", inter},           {"clade", clade},           {"seed", seed}};
}

void DatasetConfig::validate() const {
  require(per_breed >= 0 && width > 0 && height > 0, ErrorCode::InvalidArgument, "dataset config: bad sizes");
  require(focal_min > 0 && focal_max >= focal_min && depth_min > 0 && depth_max >= depth_min,
          ErrorCode::InvalidArgument, "dataset config: bad camera ranges");
  require(lateral >= 0 && yaw_spread >= 0 && tilt >= 0 && pose_temperature >= 0 && keypoint_noise >= 0,
          ErrorCode::InvalidArgument, "dataset config: spreads must be >= 0");
  require(val_fraction >= 0 && test_fraction >= 0 && val_fraction + test_fraction <= 1.0,
          ErrorCode::InvalidArgument, "dataset config: split fractions must sum to at most 1");
  require(max_retries >= 1, ErrorCode::InvalidArgument, "dataset config: max_retries must be >= 1");
}

DatasetConfig DatasetConfig::from_json(const Json& j) {
  const std::string w = "dataset config";
  check_json_keys(j,
             {"per_breed", "width", "height", "focal_min", "focal_max", "depth_min", "depth_max", "lateral",
              "yaw_spread", "tilt", "pose_temperature", "keypoint_noise", "val_fraction", "test_fraction",
              "max_retries", "seed"},
             w);
  DatasetConfig c;
  read_json_field(j, "per_breed", c.per_breed, w);
  read_json_field(j, "width", c.width, w);
  read_json_field(j, "height", c.height, w);
  read_json_field(j, "focal_min", c.focal_min, w);
  read_json_field(j, "focal_max", c.focal_max, w);
  read_json_field(j, "depth_min", c.depth_min, w);
  read_json_field(j, "depth_max", c.depth_max, w);
  read_json_field(j, "lateral", c.lateral, w);
  read_json_field(j, "yaw_spread", c.yaw_spread, w);
  read_json_field(j, "tilt", c.tilt, w);
  read_json_field(j, "pose_temperature", c.pose_temperature, w);
  read_json_field(j, "keypoint_noise", c.keypoint_noise, w);
  read_json_field(j, "val_fraction", c.val_fraction, w);
  read_json_field(j, "test_fraction", c.test_fraction, w);
  read_json_field(j, "max_retries", c.max_retries, w);
  read_json_field(j, "seed", c.seed, w);
  c.validate();
  return c;
}

Json DatasetConfig::to_json() const {
  return {{"per_breed", per_breed},
          {"width", width},
          {"height", height},
          {"focal_min", focal_min},
          {"focal_max", focal_max},
          {"depth_min", depth_min},
          {"depth_max", depth_max},
          {"lateral", lateral},
          {"yaw_spread", yaw_spread},
          {"tilt", tilt},
          {"pose_temperature", pose_temperature},
          {"keypoint_noise", keypoint_noise},
          {"val_fraction", val_fraction},
          {"test_fraction", test_fraction},
          {"max_retries", max_retries},
          {"seed", seed}};
}

// -- breeds and instances -----------------------------------------------------------------

std::vector<BreedSpec> gen_breeds(const ModelBundle& model, const BreedConfig& c) {
  c.validate();
  const int K = model.space.num_components();
  const Vec sd = model.space.eigenvalues.cwiseMax(0.0).cwiseSqrt();
  Rng rng(c.seed);
  auto draw = [&](double spread, ShapeParams& out, const ShapeParams* around) {
    out = ShapeParams::zeros(K);
    for (int k = 0; k < K; ++k) out.beta[k] = (around ? around->beta[k] : 0.0) + spread * sd[k] * rng.normal();
    for (int k = 0; k < kNumScaleGroups; ++k)
      out.kappa[k] = (around ? around->kappa[k] : 0.0) + spread * kKappaUnit * rng.normal();
  };
  std::vector<ShapeParams> centers(c.num_clades);
  for (auto& ctr : centers) draw(c.clade, ctr, nullptr);
  std::vector<int> clade_size(c.num_clades, 0);
  for (int i = 0; i < c.num_breeds; ++i) ++clade_size[i % c.num_clades];

  std::vector<BreedSpec> out(c.num_breeds);
  for (int i = 0; i < c.num_breeds; ++i) {
    BreedSpec& b = out[i];
    b.id = i;
    char name[32];
    std::snprintf(name, sizeof name, "breed_%02d", i);
    b.name = name;
    b.clade = i % c.num_clades;
    if (clade_size[b.clade] == 1) {
      b.prototype = centers[b.clade];
    } else {
      draw(c.inter, b.prototype, &centers[b.clade]);
    }
    b.intra_std_beta = c.intra * sd;
    b.intra_std_kappa = Vec::Constant(kNumScaleGroups, c.intra * kKappaUnit);
  }
  return out;
}

Observation2D observe(const FitState& state, const ModelBundle& model, int width, int height) {
  const PosedState p = pose_state(state, model, width, height);
  Observation2D obs;
  obs.width = width;
  obs.height = height;
  obs.keypoints = p.keypoints2d;
  obs.visible = Vec::Ones(model.num_keypoints());
  obs.mask = hard_rasterize(p.vertices2d, model.mesh.faces, width, height);
  return obs;
}

void mark_out_of_image(Observation2D& obs) {
  for (Eigen::Index i = 0; i < obs.keypoints.rows(); ++i) {
    const double x = obs.keypoints(i, 0), y = obs.keypoints(i, 1);
    if (!(x >= 0.0 && x < obs.width && y >= 0.0 && y < obs.height)) obs.visible[i] = 0.0;
  }
}

namespace {

SynthInstance make_instance(const ModelBundle& model, const FlowPrior& flow, const BreedSpec& breed,
                            const DatasetConfig& c, std::uint64_t seed) {
  SynthInstance inst;
  inst.breed = breed.id;
  inst.seed = seed;
  Rng rng = Rng(seed).fork(1);
  FitState& s = inst.truth;
  const int K = model.space.num_components();
  s.shape = ShapeParams::zeros(K);
  for (int k = 0; k < K; ++k) s.shape.beta[k] = breed.prototype.beta[k] + breed.intra_std_beta[k] * rng.normal();
  for (int k = 0; k < kNumScaleGroups; ++k)
    s.shape.kappa[k] = breed.prototype.kappa[k] + breed.intra_std_kappa[k] * rng.normal();
  s.pose.latent = Vec(flow.dim);
  for (int k = 0; k < flow.dim; ++k) s.pose.latent[k] = c.pose_temperature * rng.normal();
  s.decode(flow);

  for (int attempt = 0;; ++attempt) {
    const double side = rng.uniform() < 0.5 ? 0.0 : std::numbers::pi;
    const double yaw = side + rng.uniform(-c.yaw_spread, c.yaw_spread);
    const double pitch = c.tilt * rng.normal();
    const double roll = c.tilt * rng.normal();
    const Mat3 R = camera_facing_root(yaw) * Eigen::AngleAxisd(pitch, Vec3::UnitZ()).toRotationMatrix() *
                   Eigen::AngleAxisd(roll, Vec3::UnitX()).toRotationMatrix();
    s.pose.root_rot6d = rotmat_to_rot6d(R);
    s.focal = rng.uniform(c.focal_min, c.focal_max);
    const double x = rng.uniform(-c.lateral, c.lateral);
    const double y = rng.uniform(-c.lateral, c.lateral);
    const double z = rng.uniform(c.depth_min, c.depth_max);
    s.pose.translation = Vec3(x, y, z);
    try {
      inst.obs = observe(s, model, c.width, c.height);
      break;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::BehindCamera || attempt + 1 >= c.max_retries) throw;
    }
  }

  Rng noise = Rng(seed).fork(2);
  if (c.keypoint_noise > 0.0) {
    for (Eigen::Index i = 0; i < inst.obs.keypoints.size(); ++i)
      inst.obs.keypoints.data()[i] += c.keypoint_noise * noise.normal();
  }
  mark_out_of_image(inst.obs);
  inst.obs.breed = breed.id;
  inst.obs.breed_name = breed.name;
  return inst;
}

}  // namespace

std::vector<SynthInstance> gen_dataset(const ModelBundle& model, const FlowPrior& flow,
                                       const std::vector<BreedSpec>& breeds, const DatasetConfig& c, int jobs) {
  c.validate();
  require(flow.dim == model.pose_dim(), ErrorCode::DimensionMismatch, "gen_dataset: flow and model pose sizes differ");
  const std::size_t n = breeds.size() * static_cast<std::size_t>(c.per_breed);
  std::vector<SynthInstance> out(n);
  std::vector<std::string> errors(n);
  const Rng root(c.seed);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const BreedSpec& b = breeds[i / c.per_breed];
      try {
        out[i] = make_instance(model, flow, b, c, root.fork(i).next_u64());
      } catch (const Error& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> threads;
  for (int k = 1; k < std::min<int>(jobs, static_cast<int>(n)); ++k) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  for (std::size_t i = 0; i < n; ++i)
    require(errors[i].empty(), ErrorCode::InvalidArgument, "gen_dataset instance " + std::to_string(i) + ": " + errors[i]);

  const int n_test = static_cast<int>(std::round(c.test_fraction * c.per_breed));
  const int n_val = static_cast<int>(std::round(c.val_fraction * c.per_breed));
  for (std::size_t i = 0; i < n; ++i) {
    const int j = static_cast<int>(i % c.per_breed);
    out[i].obs.split = j >= c.per_breed - n_test ? "test" : j >= c.per_breed - n_test - n_val ? "val" : "train";
  }
  return out;
}

// -- metrics ------------------------------------------------------------------------------

double pck(const Mat& pred, const Mat& gt, const Vec& visible, const Mask& gt_mask, double ratio) {
  require(pred.rows() == gt.rows() && pred.cols() == 2 && gt.cols() == 2 && visible.size() == gt.rows(),
          ErrorCode::DimensionMismatch, "pck: keypoint sizes differ");
  const BoundingBox bb = mask_bbox(gt_mask);
  const double thr = ratio * std::sqrt(static_cast<double>(bb.width()) * bb.height());
  int n = 0, hit = 0;
  for (Eigen::Index i = 0; i < gt.rows(); ++i) {
    if (visible[i] <= 0.5) continue;
    ++n;
    hit += (pred.row(i) - gt.row(i)).norm() <= thr;
  }
  require(n > 0, ErrorCode::UndefinedLoss, "pck needs at least one visible keypoint");
  return 100.0 * hit / n;
}

ProcrustesResult procrustes_align(const Mat& source, const Mat& target, bool with_scale) {
  require(source.rows() == target.rows() && source.cols() == 3 && target.cols() == 3, ErrorCode::DimensionMismatch,
          "procrustes: point sets must both be N x 3");
  require(source.rows() >= 3, ErrorCode::InvalidArgument, "procrustes needs at least 3 points");
  const double n = static_cast<double>(source.rows());
  const Eigen::RowVector3d ms = source.colwise().mean(), mt = target.colwise().mean();
  const Eigen::MatrixXd X = source.rowwise() - ms;
  const Eigen::MatrixXd Y = target.rowwise() - mt;
  const Eigen::JacobiSVD<Eigen::MatrixXd> sx(X);
  const auto& sv = sx.singularValues();
  require(sv[0] > 0.0 && sv[1] > 1e-12 * sv[0], ErrorCode::InvalidArgument,
          "procrustes: source points are coincident or collinear");

  const Mat3 sigma = Y.transpose() * X / n;
  const Eigen::JacobiSVD<Mat3> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 S = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) S(2, 2) = -1.0;
  ProcrustesResult r;
  r.rotation = svd.matrixU() * S * svd.matrixV().transpose();
  const double var_s = X.squaredNorm() / n;
  r.scale = with_scale ? (svd.singularValues().asDiagonal() * S).trace() / var_s : 1.0;
  r.translation = mt.transpose() - r.scale * r.rotation * ms.transpose();
  r.aligned = ((r.scale * (source * r.rotation.transpose())).rowwise() + r.translation.transpose()).eval();
  r.rms = std::sqrt((r.aligned - target).squaredNorm() / n);
  return r;
}

double aligned_v2v(const Mat& source, const Mat& target, bool with_scale) {
  const ProcrustesResult r = procrustes_align(source, target, with_scale);
  return (r.aligned - target).rowwise().norm().mean();
}

Consistency prototype_consistency(const std::vector<ShapeParams>& predictions, const Mat& prototype_mesh,
                                  const ModelBundle& model) {
  require(!predictions.empty(), ErrorCode::InvalidArgument, "prototype_consistency needs at least one prediction");
  const double torso = torso_length(model.skeleton, prototype_mesh);
  require(torso > 0.0, ErrorCode::InvalidArgument, "prototype mesh has a zero torso length");
  Consistency c;
  for (const ShapeParams& p : predictions) c.errors.push_back(aligned_v2v(repose_tpose(p, model), prototype_mesh) / torso);
  const double n = static_cast<double>(c.errors.size());
  for (double e : c.errors) c.mean += e;
  c.mean /= n;
  for (double e : c.errors) c.variance += (e - c.mean) * (e - c.mean);
  c.variance /= n;
  return c;
}

ClusterQuality cluster_quality(const Mat& z, const std::vector<int>& labels) {
  require(static_cast<Eigen::Index>(labels.size()) == z.rows(), ErrorCode::DimensionMismatch,
          "cluster_quality: one label per row");
  std::map<int, int> count;
  for (int l : labels) ++count[l];
  ClusterQuality q;
  std::vector<int> keep;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (count[labels[i]] >= 2) keep.push_back(static_cast<int>(i));
    else ++q.excluded;
  }
  std::map<int, int> kept_classes;
  for (int i : keep) ++kept_classes[labels[i]];
  require(kept_classes.size() >= 2, ErrorCode::InvalidArgument,
          "cluster_quality needs at least two classes with two or more samples");

  double total = 0.0;
  for (int i : keep) {
    std::map<int, std::pair<double, int>> acc;
    for (int j : keep) {
      if (j == i) continue;
      auto& a = acc[labels[j]];
      a.first += (z.row(i) - z.row(j)).norm();
      a.second += 1;
    }
    const double a = acc[labels[i]].first / acc[labels[i]].second;
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, sum] : acc)
      if (label != labels[i]) b = std::min(b, sum.first / sum.second);
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  q.score = total / static_cast<double>(keep.size());
  return q;
}

// -- files ----------------------------------------------------------------------------

namespace {

Json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec json_vec(const Json& j) {
  const std::vector<double> v = j;
  return Eigen::Map<const Vec>(v.data(), v.size());
}

}  // namespace

Json state_to_json(const FitState& s) {
  Json j;
  j["beta"] = vec_json(s.shape.beta);
  j["kappa"] = vec_json(s.shape.kappa);
  j["root_rot6d"] = s.pose.root_rot6d;
  j["latent"] = vec_json(s.pose.latent);
  j["translation"] = {s.pose.translation.x(), s.pose.translation.y(), s.pose.translation.z()};
  j["focal"] = s.focal;
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < s.pose.joint_rot6d.rows(); ++r) {
    std::vector<double> row(6);
    for (int k = 0; k < 6; ++k) row[k] = s.pose.joint_rot6d(r, k);
    rows.push_back(row);
  }
  j["joint_rot6d"] = rows;
  return j;
}

FitState state_from_json(const Json& j) {
  try {
    FitState s;
    s.shape.beta = json_vec(j.at("beta"));
    s.shape.kappa = json_vec(j.at("kappa"));
    s.pose.root_rot6d = j.at("root_rot6d").get<std::array<double, 6>>();
    s.pose.latent = json_vec(j.at("latent"));
    const std::vector<double> t = j.at("translation");
    require(t.size() == 3, ErrorCode::Format, "state: translation needs 3 entries");
    s.pose.translation = Vec3(t[0], t[1], t[2]);
    s.focal = j.at("focal");
    const std::vector<std::vector<double>> rows = j.at("joint_rot6d");
    s.pose.joint_rot6d.resize(rows.size(), 6);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      require(rows[r].size() == 6, ErrorCode::Format, "state: joint_rot6d rows need 6 entries");
      for (int k = 0; k < 6; ++k) s.pose.joint_rot6d(r, k) = rows[r][k];
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("state: ") + e.what());
  }
}

void save_breeds(const std::string& path, const std::vector<BreedSpec>& breeds) {
  Json arr = Json::array();
  for (const BreedSpec& b : breeds) {
    arr.push_back({{"id", b.id},
                   {"name", b.name},
                   {"clade", b.clade},
                   {"beta", vec_json(b.prototype.beta)},
                   {"kappa", vec_json(b.prototype.kappa)},
                   {"intra_std_beta", vec_json(b.intra_std_beta)},
                   {"intra_std_kappa", vec_json(b.intra_std_kappa)}});
  }
  write_json(path, Json{{"breeds", arr}});
}

std::vector<BreedSpec> load_breeds(const std::string& path) {
  const Json j = read_json(path);
  std::vector<BreedSpec> out;
  try {
    for (const Json& b : j.at("breeds")) {
      BreedSpec s;
      s.id = b.at("id");
      s.name = b.at("name");
      s.clade = b.at("clade");
      s.prototype.beta = json_vec(b.at("beta"));
      s.prototype.kappa = json_vec(b.at("kappa"));
      s.intra_std_beta = json_vec(b.at("intra_std_beta"));
      s.intra_std_kappa = json_vec(b.at("intra_std_kappa"));
      require(s.id == static_cast<int>(out.size()), ErrorCode::Format, "breeds.json: ids must be 0..n-1 in order");
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("breeds.json: ") + e.what());
  }
  return out;
}

void save_dataset(const std::string& dir, const std::vector<SynthInstance>& data, const std::vector<BreedSpec>& breeds) {
  fs::create_directories(fs::path(dir) / "masks");
  save_breeds((fs::path(dir) / "breeds.json").string(), breeds);
  std::string lines;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const SynthInstance& s = data[i];
    char name[32];
    std::snprintf(name, sizeof name, "masks/%05zu.pgm", i);
    write_pgm((fs::path(dir) / name).string(), s.obs.mask);
    Json kp = Json::array();
    for (Eigen::Index k = 0; k < s.obs.keypoints.rows(); ++k)
      kp.push_back({s.obs.keypoints(k, 0), s.obs.keypoints(k, 1), s.obs.visible[k] > 0.5 ? 1 : 0});
    Json j{{"index", i},
           {"keypoints", kp},
           {"mask", name},
           {"breed", s.breed},
           {"breed_name", s.obs.breed_name},
           {"split", s.obs.split},
           {"width", s.obs.width},
           {"height", s.obs.height},
           {"seed", s.seed},
           {"truth", state_to_json(s.truth)}};
    lines += j.dump() + "\n";
  }
  write_text((fs::path(dir) / "dataset.jsonl").string(), lines);
}

std::vector<SynthInstance> load_dataset(const std::string& dir) {
  std::ifstream in((fs::path(dir) / "dataset.jsonl").string());
  require(in.good(), ErrorCode::Io, "cannot open " + (fs::path(dir) / "dataset.jsonl").string());
  std::vector<SynthInstance> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      SynthInstance s;
      const auto& kp = j.at("keypoints");
      s.obs.keypoints.resize(kp.size(), 2);
      s.obs.visible.resize(kp.size());
      for (std::size_t k = 0; k < kp.size(); ++k) {
        s.obs.keypoints(k, 0) = kp[k].at(0);
        s.obs.keypoints(k, 1) = kp[k].at(1);
        s.obs.visible[k] = kp[k].at(2).get<double>();
      }
      s.obs.mask = read_pgm((fs::path(dir) / j.at("mask").get<std::string>()).string());
      s.obs.width = j.at("width");
      s.obs.height = j.at("height");
      require(s.obs.mask.rows() == s.obs.height && s.obs.mask.cols() == s.obs.width, ErrorCode::Format,
              "dataset line " + std::to_string(lineno) + ": mask size does not match width/height");
      s.breed = j.value("breed", -1);
      s.obs.breed = s.breed;
      s.obs.breed_name = j.value("breed_name", "");
      s.obs.split = j.value("split", "");
      s.seed = j.value("seed", std::uint64_t{0});
      if (j.contains("truth")) s.truth = state_from_json(j.at("truth"));
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::Format, "dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace quadfit
