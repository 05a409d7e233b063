// quadfit command-line driver: build-model, train-prior, gen-data, fit, train, eval, render.
//
// Every command reads its numeric settings from --config (strict JSON, missing
// fields keep their defaults), writes its outputs under --out and a manifest.json
// next to them. Exit codes: 0 ok, 1 other failure, 2 malformed config or usage,
// 3 missing input, 4 numerical divergence.

#include "quadfit/fitter.hpp"
#include "quadfit/io.hpp"
#include "quadfit/regressor.hpp"
#include "quadfit/synthbench.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>

using namespace quadfit;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kFailure = 1, kBadConfig = 2, kMissingInput = 3, kDiverged = 4 };

// Raised for anything wrong with --config or the command line.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out = ".";
  int jobs = 1;
  std::string model, priors, data, pred, net;
};

Json load_config(const Options& o) {
  if (o.config.empty()) return Json::object();
  if (!fs::exists(o.config)) throw MissingInput("config file not found: " + o.config);
  Json j;
  try {
    j = Json::parse(read_text(o.config));
  } catch (const Json::parse_error& e) {
    throw ConfigError(o.config + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(o.config + ": expected a JSON object");
  return j;
}

// Runs a config parser, turning its validation errors into ConfigError.
template <typename F>
auto parse_config(F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

std::string require_input(const std::string& path, const char* flag) {
  if (path.empty()) throw ConfigError(std::string("missing required option ") + flag);
  if (!fs::exists(path)) throw MissingInput(std::string(flag) + " path not found: " + path);
  return path;
}

struct Manifest {
  std::string command;
  Json config;
  Json inputs = Json::object();
  std::vector<std::string> outputs;
  std::string model_dir;
};

void write_manifest(const Options& o, const Manifest& m, std::uint64_t seed) {
  Json j;
  j["command"] = m.command;
  j["config_path"] = o.config.empty() ? Json(nullptr) : Json(o.config);
  j["config"] = m.config;
  j["seed"] = seed;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["model_hash"] = content_hash(m.model_dir);
  write_json((fs::path(o.out) / "manifest.json").string(), j);
}

std::string out_path(const Options& o, const std::string& name) { return (fs::path(o.out) / name).string(); }

// -- predictions files -----------------------------------------------------------------

struct Prediction {
  std::optional<FitState> state;
  Vec z;  // empty unless produced by the regressor
};

void write_predictions(const std::string& path, const std::vector<std::size_t>& index,
                       const std::vector<Json>& rows) {
  std::string text;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Json j = rows[i];
    j["index"] = index[i];
    text += j.dump() + "\n";
  }
  write_text(path, text);
}

std::map<std::size_t, Prediction> read_predictions(const std::string& path) {
  std::map<std::size_t, Prediction> out;
  const std::string text = read_text(path);
  std::size_t line_no = 0, at = 0;
  while (at < text.size()) {
    std::size_t end = text.find('\n', at);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(at, end - at);
    at = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      Prediction p;
      if (j.contains("state")) p.state = state_from_json(j.at("state"));
      if (j.contains("z")) {
        const std::vector<double> z = j.at("z");
        p.z = Eigen::Map<const Vec>(z.data(), static_cast<Eigen::Index>(z.size()));
      }
      out[j.at("index").get<std::size_t>()] = std::move(p);
    } catch (const Json::exception& e) {
      fail(ErrorCode::Format, path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::size_t> split_indices(const std::vector<SynthInstance>& data, const std::string& split) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (split.empty() || data[i].obs.split == split) idx.push_back(i);
  return idx;
}

std::string read_split(const Json& j, const std::string& fallback) {
  std::string split = fallback;
  read_json_field(j, "split", split, "config");
  if (split != "" && split != "train" && split != "val" && split != "test")
    fail(ErrorCode::InvalidArgument, "split must be one of \"\", train, val, test; got '" + split + "'");
  return split;
}

Vec to_vec(const std::vector<double>& v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }

Json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// -- commands --------------------------------------------------------------------------

int cmd_build_model(const Options& o) {
  const Json cfg = load_config(o);
  int num_dogs = 24, num_others = 12, num_components = 16;
  double dog_weight_fraction = 0.5;
  parse_config([&] {
    check_json_keys(cfg, {"num_dogs", "num_others", "num_components", "dog_weight_fraction"}, "build-model config");
    read_json_field(cfg, "num_dogs", num_dogs, "build-model config");
    read_json_field(cfg, "num_others", num_others, "build-model config");
    read_json_field(cfg, "num_components", num_components, "build-model config");
    read_json_field(cfg, "dog_weight_fraction", dog_weight_fraction, "build-model config");
    require(num_dogs >= 1 && num_others >= 0 && num_components >= 1 && dog_weight_fraction > 0 &&
                dog_weight_fraction <= 1,
            ErrorCode::InvalidArgument, "build-model: bad corpus settings");
    return 0;
  });
  const ModelBundle model = build_toy_model(num_dogs, num_others, num_components, dog_weight_fraction, o.seed);
  const std::string dir = out_path(o, "model");
  save_bundle(dir, model);
  Manifest m;
  m.command = "build-model";
  m.config = {{"num_dogs", num_dogs},
              {"num_others", num_others},
              {"num_components", num_components},
              {"dog_weight_fraction", dog_weight_fraction}};
  m.outputs = {"model"};
  m.model_dir = dir;
  write_manifest(o, m, o.seed);
  std::printf("model: %d components, %d vertices, %d joints -> %s\n", model.space.num_components(),
              static_cast<int>(model.mesh.vertices.rows()), model.num_joints(), dir.c_str());
  return kOk;
}

int cmd_train_prior(const Options& o) {
  const Json cfg = load_config(o);
  const std::string model_dir = require_input(o.model, "--model");
  int samples = 4000;
  FlowTrainConfig fc;
  fc.epochs = 40;
  parse_config([&] {
    const std::string w = "train-prior config";
    check_json_keys(cfg, {"samples", "layers", "hidden", "epochs", "batch", "lr", "scale_clamp"}, w);
    read_json_field(cfg, "samples", samples, w);
    read_json_field(cfg, "layers", fc.layers, w);
    read_json_field(cfg, "hidden", fc.hidden, w);
    read_json_field(cfg, "epochs", fc.epochs, w);
    read_json_field(cfg, "batch", fc.batch, w);
    read_json_field(cfg, "lr", fc.lr, w);
    read_json_field(cfg, "scale_clamp", fc.scale_clamp, w);
    require(samples >= 2 && fc.layers >= 1 && fc.hidden >= 1 && fc.epochs >= 0 && fc.batch >= 1 && fc.lr > 0 &&
                fc.scale_clamp > 0,
            ErrorCode::InvalidArgument, "train-prior: bad settings");
    return 0;
  });
  const ModelBundle model = load_bundle(model_dir);
  fc.seed = Rng(o.seed).fork(2).next_u64();
  const Mat poses = sample_gait_poses(samples, Rng(o.seed).fork(1).next_u64());
  require(poses.cols() == model.pose_dim(), ErrorCode::DimensionMismatch,
          "train-prior: the gait sampler does not match the model skeleton");
  const FlowTrainResult r = train_flow(poses, fc);
  Priors priors;
  priors.flow = r.flow;
  priors.shape = GaussianShapePrior::from_space(model.space);
  const std::string dir = out_path(o, "priors");
  save_priors(dir, priors);
  std::string csv = "epoch,nll\n0," + std::to_string(r.initial_nll) + "\n";
  for (std::size_t e = 0; e < r.epoch_nll.size(); ++e)
    csv += std::to_string(e + 1) + "," + std::to_string(r.epoch_nll[e]) + "\n";
  write_text(out_path(o, "flow_history.csv"), csv);
  Manifest m;
  m.command = "train-prior";
  m.config = {{"samples", samples}, {"layers", fc.layers}, {"hidden", fc.hidden}, {"epochs", fc.epochs},
              {"batch", fc.batch},  {"lr", fc.lr},         {"scale_clamp", fc.scale_clamp}};
  m.inputs = {{"model", model_dir}};
  m.outputs = {"priors", "flow_history.csv"};
  m.model_dir = model_dir;
  write_manifest(o, m, o.seed);
  std::printf("flow NLL %.4f -> %.4f over %d epochs -> %s\n", r.initial_nll,
              r.epoch_nll.empty() ? r.initial_nll : r.epoch_nll.back(), fc.epochs, dir.c_str());
  return kOk;
}

int cmd_gen_data(const Options& o) {
  const Json cfg = load_config(o);
  const std::string model_dir = require_input(o.model, "--model");
  const std::string priors_dir = require_input(o.priors, "--priors");
  BreedConfig bc;
  DatasetConfig dc;
  parse_config([&] {
    check_json_keys(cfg, {"breeds", "dataset"}, "gen-data config");
    if (cfg.contains("breeds")) bc = BreedConfig::from_json(cfg.at("breeds"));
    if (cfg.contains("dataset")) dc = DatasetConfig::from_json(cfg.at("dataset"));
    return 0;
  });
  if (o.seed_given) {
    bc.seed = Rng(o.seed).fork(1).next_u64();
    dc.seed = Rng(o.seed).fork(2).next_u64();
  }
  const ModelBundle model = load_bundle(model_dir);
  const Priors priors = load_priors(priors_dir);
  const std::vector<BreedSpec> breeds = gen_breeds(model, bc);
  const std::vector<SynthInstance> data = gen_dataset(model, priors.flow, breeds, dc, o.jobs);
  const std::string dir = out_path(o, "data");
  save_dataset(dir, data, breeds);
  Manifest m;
  m.command = "gen-data";
  m.config = {{"breeds", bc.to_json()}, {"dataset", dc.to_json()}};
  m.inputs = {{"model", model_dir}, {"priors", priors_dir}};
  m.outputs = {"data"};
  m.model_dir = model_dir;
  write_manifest(o, m, o.seed);
  std::map<std::string, int> counts;
  for (const SynthInstance& s : data) ++counts[s.obs.split];
  std::printf("%zu breeds, %zu instances (train %d, val %d, test %d) -> %s\n", breeds.size(), data.size(),
              counts["train"], counts["val"], counts["test"], dir.c_str());
  return kOk;
}

int cmd_fit(const Options& o) {
  const Json cfg = load_config(o);
  const std::string model_dir = require_input(o.model, "--model");
  const std::string priors_dir = require_input(o.priors, "--priors");
  const std::string data_dir = require_input(o.data, "--data");
  FitConfig fc;
  std::string split;
  int limit = -1;
  parse_config([&] {
    check_json_keys(cfg, {"fit", "split", "limit"}, "fit config");
    if (cfg.contains("fit")) fc = FitConfig::from_json(cfg.at("fit"));
    split = read_split(cfg, "test");
    read_json_field(cfg, "limit", limit, "fit config");
    return 0;
  });
  if (o.seed_given) fc.seed = o.seed;
  const ModelBundle model = load_bundle(model_dir);
  const Priors priors = load_priors(priors_dir);
  const std::vector<SynthInstance> data = load_dataset(data_dir);
  std::vector<std::size_t> idx = split_indices(data, split);
  if (limit >= 0 && static_cast<std::size_t>(limit) < idx.size()) idx.resize(limit);
  std::vector<Observation2D> obs;
  for (std::size_t i : idx) obs.push_back(data[i].obs);
  const std::vector<BatchItem> items = fit_batch(obs, model, priors, fc, o.jobs);

  std::vector<Json> rows;
  int failed = 0;
  double kp = 0.0;
  for (std::size_t r = 0; r < items.size(); ++r) {
    const BatchItem& it = items[r];
    if (!it.result) {
      rows.push_back({{"error", it.error}, {"code", to_string(it.code)}});
      ++failed;
      continue;
    }
    const FitResult& f = *it.result;
    rows.push_back({{"state", state_to_json(f.state)},
                    {"initial_loss", f.initial_loss},
                    {"final_loss", f.final_loss},
                    {"kp_error", f.final_breakdown.kp_error}});
    kp += f.final_breakdown.kp_error;
  }
  write_predictions(out_path(o, "predictions.jsonl"), idx, rows);
  Manifest m;
  m.command = "fit";
  m.config = {{"fit", fc.to_json()}, {"split", split}, {"limit", limit}};
  m.inputs = {{"model", model_dir}, {"priors", priors_dir}, {"data", data_dir}};
  m.outputs = {"predictions.jsonl"};
  m.model_dir = model_dir;
  write_manifest(o, m, fc.seed);
  const int ok = static_cast<int>(items.size()) - failed;
  std::printf("fitted %d of %zu instances, mean keypoint error %.3f px\n", ok, items.size(), ok ? kp / ok : 0.0);
  for (std::size_t r = 0; r < items.size(); ++r)
    if (!items[r].result) std::fprintf(stderr, "instance %zu: %s\n", idx[r], items[r].error.c_str());
  for (const BatchItem& it : items)
    if (!it.result && it.code == ErrorCode::Divergence) return kDiverged;
  return kOk;
}

int cmd_train(const Options& o) {
  const Json cfg = load_config(o);
  const std::string model_dir = require_input(o.model, "--model");
  const std::string priors_dir = require_input(o.priors, "--priors");
  const std::string data_dir = require_input(o.data, "--data");
  TrainConfig tc = parse_config([&] { return TrainConfig::from_json(cfg); });
  if (o.seed_given) tc.seed = o.seed;
  const ModelBundle model = load_bundle(model_dir);
  const Priors priors = load_priors(priors_dir);
  const std::vector<SynthInstance> data = load_dataset(data_dir);
  const std::vector<BreedSpec> breeds = load_breeds((fs::path(data_dir) / "breeds.json").string());

  Manifest m;
  m.command = "train";
  m.config = tc.to_json();
  m.inputs = {{"model", model_dir}, {"priors", priors_dir}, {"data", data_dir}};
  m.model_dir = model_dir;
  fs::create_directories(o.out);
  TrainResult res;
  try {
    res = train_regressor(data, breeds, model, priors, tc);
  } catch (const TrainDivergence& e) {
    write_text(out_path(o, "history.csv"), history_csv(e.history));
    m.outputs = {"history.csv"};
    write_manifest(o, m, tc.seed);
    std::fprintf(stderr, "error: %s\n", e.what());
    return kDiverged;
  }
  save_regressor(out_path(o, "regressor"), res.net);
  write_text(out_path(o, "history.csv"), history_csv(res.history));

  // predictions of the saved network for every instance
  std::vector<std::size_t> idx = split_indices(data, "");
  std::vector<Json> rows;
  for (std::size_t i : idx) {
    const RegressorOutput out = regress(res.net, model, priors.flow, data[i].obs);
    rows.push_back({{"state", state_to_json(out.state)}, {"z", vec_json(out.z)}, {"logits", vec_json(out.logits)}});
  }
  write_predictions(out_path(o, "predictions.jsonl"), idx, rows);
  m.outputs = {"regressor", "history.csv", "predictions.jsonl"};
  write_manifest(o, m, tc.seed);
  const EpochRecord& last = res.history.back();
  std::printf("trained %d epochs (%s): loss %.4f, val keypoint error %.3f px, val prototype error %.5f, "
              "val cluster quality %.4f\n",
              tc.epochs, breed_losses_name(tc.breed_losses), last.total, last.val_kp_error, last.val_proto_mean,
              last.val_cluster);
  return kOk;
}

std::string format_report(const std::vector<BreedReport>& reports) {
  std::string csv = "breed,n,mean_v2v,var_v2v,pck@0.15,iou\n";
  char buf[256];
  for (const BreedReport& r : reports) {
    std::snprintf(buf, sizeof buf, "%s,%d,%.17g,%.17g,%.17g,%.17g\n", r.name.c_str(), r.n, r.mean_v2v, r.var_v2v,
                  r.pck, r.iou);
    csv += buf;
  }
  return csv;
}

int cmd_eval(const Options& o) {
  const Json cfg = load_config(o);
  const std::string model_dir = require_input(o.model, "--model");
  const std::string data_dir = require_input(o.data, "--data");
  std::string split;
  parse_config([&] {
    check_json_keys(cfg, {"split"}, "eval config");
    split = read_split(cfg, "test");
    return 0;
  });
  const ModelBundle model = load_bundle(model_dir);
  std::vector<SynthInstance> data = load_dataset(data_dir);
  const std::vector<BreedSpec> breeds = load_breeds((fs::path(data_dir) / "breeds.json").string());

  // without --pred the dataset is evaluated against its own ground truth
  std::vector<SynthInstance> subset;
  std::vector<FitState> states;
  Mat z;
  std::vector<int> z_labels;
  int missing = 0;
  std::map<std::size_t, Prediction> preds;
  if (!o.pred.empty()) preds = read_predictions(require_input(o.pred, "--pred"));
  for (std::size_t i : split_indices(data, split)) {
    if (o.pred.empty()) {
      subset.push_back(data[i]);
      states.push_back(data[i].truth);
      continue;
    }
    const auto it = preds.find(i);
    if (it == preds.end() || !it->second.state) {
      ++missing;
      continue;
    }
    subset.push_back(data[i]);
    states.push_back(*it->second.state);
    if (it->second.z.size() > 0) {
      z.conservativeResize(z.rows() + 1, it->second.z.size());
      z.row(z.rows() - 1) = it->second.z.transpose();
      z_labels.push_back(data[i].breed);
    }
  }
  require(!subset.empty(), ErrorCode::Precondition, "eval: no predictions for the '" + split + "' split");
  const std::vector<BreedReport> reports = evaluate_predictions(subset, states, breeds, model, "");
  write_text(out_path(o, "report.csv"), format_report(reports));

  double v2v = 0.0, var = 0.0, pck_sum = 0.0, iou_sum = 0.0;
  int n = 0;
  for (const BreedReport& r : reports) {
    v2v += r.mean_v2v;
    var += r.var_v2v;
    pck_sum += r.pck * r.n;
    iou_sum += r.iou * r.n;
    n += r.n;
  }
  const double nb = static_cast<double>(reports.size());
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "split: %s\ninstances: %d (%d without a prediction)\nbreeds: %zu\n"
                "prototype error (mean over breeds): %.6f torso lengths\nprototype variance (mean over breeds): %.8f\n"
                "PCK@0.15: %.3f\nIoU: %.5f\n",
                split.empty() ? "all" : split.c_str(), n, missing, reports.size(), v2v / nb, var / nb, pck_sum / n,
                iou_sum / n);
  std::string summary = buf;
  if (z.rows() > 0) {
    try {
      const ClusterQuality q = cluster_quality(z, z_labels);
      std::snprintf(buf, sizeof buf, "latent cluster quality: %.6f (%d singleton samples excluded)\n", q.score,
                    q.excluded);
      summary += buf;
    } catch (const Error& e) {
      summary += std::string("latent cluster quality: n/a (") + e.what() + ")\n";
    }
  }
  write_text(out_path(o, "summary.txt"), summary);
  Manifest m;
  m.command = "eval";
  m.config = {{"split", split}};
  m.inputs = {{"model", model_dir}, {"data", data_dir}, {"pred", o.pred.empty() ? Json(nullptr) : Json(o.pred)}};
  m.outputs = {"report.csv", "summary.txt"};
  m.model_dir = model_dir;
  write_manifest(o, m, o.seed);
  std::fputs(summary.c_str(), stdout);
  return kOk;
}

// Nearest-pixel square marker.
void mark(Mat& channel, double x, double y, int radius, double value) {
  const int cx = static_cast<int>(std::floor(x)), cy = static_cast<int>(std::floor(y));
  for (int v = cy - radius; v <= cy + radius; ++v)
    for (int u = cx - radius; u <= cx + radius; ++u)
      if (v >= 0 && u >= 0 && v < channel.rows() && u < channel.cols()) channel(v, u) = value;
}

int cmd_render(const Options& o) {
  const Json cfg = load_config(o);
  const std::string model_dir = require_input(o.model, "--model");
  const std::string data_dir = require_input(o.data, "--data");
  std::vector<std::size_t> which{0, 1, 2, 3};
  parse_config([&] {
    check_json_keys(cfg, {"instances"}, "render config");
    read_json_field(cfg, "instances", which, "render config");
    return 0;
  });
  const ModelBundle model = load_bundle(model_dir);
  const std::vector<SynthInstance> data = load_dataset(data_dir);
  std::map<std::size_t, Prediction> preds;
  if (!o.pred.empty()) preds = read_predictions(require_input(o.pred, "--pred"));

  Manifest m;
  m.command = "render";
  m.config = {{"instances", which}};
  m.inputs = {{"model", model_dir}, {"data", data_dir}, {"pred", o.pred.empty() ? Json(nullptr) : Json(o.pred)}};
  m.model_dir = model_dir;
  fs::create_directories(o.out);
  for (std::size_t i : which) {
    require(i < data.size(), ErrorCode::InvalidArgument,
            "render: instance " + std::to_string(i) + " is out of range (" + std::to_string(data.size()) + ")");
    const SynthInstance& s = data[i];
    // ground truth mask in blue, prediction in red, keypoints as green / yellow squares
    Mat r = Mat::Zero(s.obs.height, s.obs.width), g = r, b = 0.6 * s.obs.mask;
    const auto it = preds.find(i);
    const bool has_pred = it != preds.end() && it->second.state;
    const FitState& state = has_pred ? *it->second.state : s.truth;
    const PosedState p = pose_state(state, model, s.obs.width, s.obs.height);
    r = 0.6 * hard_rasterize(p.vertices2d, model.mesh.faces, s.obs.width, s.obs.height);
    for (Eigen::Index k = 0; k < s.obs.keypoints.rows(); ++k) {
      if (s.obs.visible[k] > 0.5) mark(g, s.obs.keypoints(k, 0), s.obs.keypoints(k, 1), 1, 1.0);
      mark(g, p.keypoints2d(k, 0), p.keypoints2d(k, 1), 0, 1.0);
      mark(r, p.keypoints2d(k, 0), p.keypoints2d(k, 1), 0, 1.0);
    }
    char name[64];
    std::snprintf(name, sizeof name, "render_%05zu.ppm", i);
    write_ppm(out_path(o, name), r, g, b);
    m.outputs.push_back(name);
  }
  write_manifest(o, m, o.seed);
  std::printf("rendered %zu instances -> %s\n", which.size(), o.out.c_str());
  return kOk;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::Io: return kMissingInput;
    case ErrorCode::Divergence: return kDiverged;
    default: return kFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quadfit: quadruped shape and pose fitting toolkit"};
  app.require_subcommand(1);
  Options o;

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Options&);
    std::vector<const char*> inputs;
  };
  const std::vector<Command> commands = {
      {"build-model", "build the parametric model bundle", cmd_build_model, {}},
      {"train-prior", "train the pose flow prior", cmd_train_prior, {"model"}},
      {"gen-data", "generate the synthetic breed benchmark", cmd_gen_data, {"model", "priors"}},
      {"fit", "fit instances by optimization", cmd_fit, {"model", "priors", "data"}},
      {"train", "train the regressor", cmd_train, {"model", "priors", "data"}},
      {"eval", "per-breed evaluation report", cmd_eval, {"model", "data", "pred"}},
      {"render", "render observations and predictions", cmd_render, {"model", "data", "pred"}},
  };
  std::map<std::string, std::string*> input_fields = {
      {"model", &o.model}, {"priors", &o.priors}, {"data", &o.data}, {"pred", &o.pred}};

  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", o.config, "JSON config file");
    sub->add_option("--seed", o.seed, "random seed");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
    for (const char* in : c.inputs) sub->add_option(std::string("--") + in, *input_fields.at(in), std::string(in) + " path");
    subs.emplace_back(sub, &c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kBadConfig;
  }

  for (const auto& [sub, c] : subs) {
    if (!sub->parsed()) continue;
    o.seed_given = sub->count("--seed") > 0;
    try {
      fs::create_directories(o.out);
      return c->run(o);
    } catch (const ConfigError& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return kBadConfig;
    } catch (const MissingInput& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return kMissingInput;
    } catch (const Error& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return exit_code_for(e.code());
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return kFailure;
    }
  }
  return kFailure;
}
