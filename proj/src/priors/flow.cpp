#include "quadfit/io.hpp"
#include "quadfit/optim.hpp"
#include "quadfit/priors.hpp"

#include <cmath>
#include <filesystem>
#include <numeric>

namespace quadfit {

namespace {

Mat random_weights(Rng& rng, int rows, int cols) {
  Mat w(rows, cols);
  const double s = 1.0 / std::sqrt(static_cast<double>(rows));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = s * rng.normal();
  return w;
}

CouplingNet make_net(Rng& rng, int dim, int hidden) {
  CouplingNet n;
  n.w1 = random_weights(rng, dim, hidden);
  n.b1 = Mat::Zero(1, hidden);
  n.w2 = random_weights(rng, hidden, hidden);
  n.b2 = Mat::Zero(1, hidden);
  n.w3 = Mat::Zero(hidden, dim);
  n.b3 = Mat::Zero(1, dim);
  return n;
}

Mat add_row(Mat m, const Mat& row) {
  m.rowwise() += row.row(0);
  return m;
}

Mat mul_row(Mat m, const Mat& row) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i).array() *= row.row(0).array();
  return m;
}

Mat eval_net(const CouplingNet& n, const Mat& x) {
  Mat h = add_row(x * n.w1, n.b1).array().tanh().matrix();
  h = add_row(h * n.w2, n.b2).array().tanh().matrix();
  return add_row(h * n.w3, n.b3);
}

// Log-scale and shift of one coupling given the conditioning input.
void coupling_terms(const FlowPrior& flow, const CouplingLayer& layer, const Mat& xm, Mat& s, Mat& t) {
  const Mat free = (1.0 - layer.mask.array()).matrix();
  const double c = flow.scale_clamp;
  s = mul_row((eval_net(layer.scale, xm) / c).array().tanh().matrix() * c, free);
  t = mul_row(eval_net(layer.shift, xm), free);
}

void check_dim(const FlowPrior& flow, Eigen::Index cols) {
  require(cols == flow.dim, ErrorCode::DimensionMismatch,
          "flow expects " + std::to_string(flow.dim) + " columns, got " + std::to_string(cols));
}

void push_net(std::vector<Mat*>& out, CouplingNet& n) {
  for (Mat* m : {&n.w1, &n.b1, &n.w2, &n.b2, &n.w3, &n.b3}) out.push_back(m);
}

ad::Var graph_net(const ad::Var* p, const ad::Var& x) {
  ad::Var h = ad::tanh(ad::matmul(x, p[0]) + p[1]);
  h = ad::tanh(ad::matmul(h, p[2]) + p[3]);
  return ad::matmul(h, p[4]) + p[5];
}

constexpr int kTensorsPerLayer = 12;

}  // namespace

FlowPrior FlowPrior::identity(int dim, int num_layers, int hidden, std::uint64_t seed) {
  require(dim >= 2 && num_layers >= 1 && hidden >= 1, ErrorCode::InvalidArgument,
          "flow needs dim >= 2, at least one layer and a positive width");
  FlowPrior f;
  f.dim = dim;
  f.hidden = hidden;
  f.loc = Mat::Zero(1, dim);
  f.log_scale = Mat::Zero(1, dim);
  Rng rng(seed);
  for (int l = 0; l < num_layers; ++l) {
    CouplingLayer layer;
    layer.mask.resize(1, dim);
    for (int i = 0; i < dim; ++i) layer.mask(0, i) = (i + l) % 2 == 0 ? 1.0 : 0.0;
    layer.scale = make_net(rng, dim, hidden);
    layer.shift = make_net(rng, dim, hidden);
    f.layers.push_back(std::move(layer));
  }
  return f;
}

std::vector<Mat*> FlowPrior::parameters() {
  std::vector<Mat*> out{&loc, &log_scale};
  for (CouplingLayer& l : layers) {
    push_net(out, l.scale);
    push_net(out, l.shift);
  }
  return out;
}

std::vector<const Mat*> FlowPrior::parameters() const {
  std::vector<Mat*> p = const_cast<FlowPrior*>(this)->parameters();
  return {p.begin(), p.end()};
}

Mat FlowPrior::forward(const Mat& theta, Vec* logdet) const {
  check_dim(*this, theta.cols());
  Mat x = mul_row(add_row(theta, -loc), (-log_scale.array()).exp().matrix());
  Vec ld = Vec::Constant(theta.rows(), -log_scale.sum());
  Mat s, t;
  for (const CouplingLayer& layer : layers) {
    coupling_terms(*this, layer, mul_row(x, layer.mask), s, t);
    x = (x.array() * s.array().exp() + t.array()).matrix();
    ld += s.rowwise().sum();
  }
  if (logdet) *logdet = ld;
  return x;
}

Mat FlowPrior::inverse(const Mat& y) const {
  check_dim(*this, y.cols());
  Mat x = y;
  Mat s, t;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    coupling_terms(*this, *it, mul_row(x, it->mask), s, t);
    x = ((x - t).array() * (-s.array()).exp()).matrix();
  }
  return add_row(mul_row(x, log_scale.array().exp().matrix()), loc);
}

Vec FlowPrior::nll(const Mat& theta) const {
  Vec ld;
  const Mat y = forward(theta, &ld);
  return 0.5 * y.rowwise().squaredNorm() - ld;
}

Mat FlowPrior::sample(int n, Rng& rng) const {
  Mat y(n, dim);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = rng.normal();
  return inverse(y);
}

double latent_prior(const Vec& y) { return 0.5 * y.squaredNorm(); }

namespace graph {

std::vector<ad::Var> bind_flow(ad::Tape& tape, const FlowPrior& flow, bool trainable) {
  std::vector<ad::Var> out;
  const auto params = flow.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool fixed = !trainable || static_cast<int>(i) < FlowPrior::kFixedTensors;
    out.push_back(fixed ? tape.constant(*params[i]) : tape.variable(*params[i]));
  }
  return out;
}

ad::Var flow_forward(const FlowPrior& flow, const std::vector<ad::Var>& p, const ad::Var& theta,
                     ad::Var* logdet) {
  check_dim(flow, theta.cols());
  ad::Tape& tape = theta.tape();
  ad::Var x = (theta - p[0]) * ad::exp(-p[1]);
  ad::Var ld = -ad::sum(p[1]) * tape.constant(Mat::Ones(theta.rows(), 1));
  for (int l = 0; l < flow.num_layers(); ++l) {
    const CouplingLayer& layer = flow.layers[l];
    const ad::Var* base = p.data() + FlowPrior::kFixedTensors + l * kTensorsPerLayer;
    ad::Var m = tape.constant(layer.mask);
    ad::Var free = tape.constant((1.0 - layer.mask.array()).matrix());
    ad::Var xm = x * m;
    ad::Var s = ad::soft_clamp(graph_net(base, xm), flow.scale_clamp) * free;
    ad::Var t = graph_net(base + 6, xm) * free;
    x = x * ad::exp(s) + t;
    ld = ld + ad::sum_cols(s);
  }
  if (logdet) *logdet = ld;
  return x;
}

ad::Var flow_inverse(const FlowPrior& flow, const std::vector<ad::Var>& p, const ad::Var& y) {
  check_dim(flow, y.cols());
  ad::Tape& tape = y.tape();
  ad::Var x = y;
  for (int l = flow.num_layers() - 1; l >= 0; --l) {
    const CouplingLayer& layer = flow.layers[l];
    const ad::Var* base = p.data() + FlowPrior::kFixedTensors + l * kTensorsPerLayer;
    ad::Var xm = x * tape.constant(layer.mask);
    ad::Var free = tape.constant((1.0 - layer.mask.array()).matrix());
    ad::Var s = ad::soft_clamp(graph_net(base, xm), flow.scale_clamp) * free;
    ad::Var t = graph_net(base + 6, xm) * free;
    x = (x - t) * ad::exp(-s);
  }
  return x * ad::exp(p[1]) + p[0];
}

}  // namespace graph

FlowTrainResult train_flow(const Mat& data, const FlowTrainConfig& cfg) {
  require(data.rows() > 0, ErrorCode::InvalidArgument, "train_flow: empty dataset");
  require(cfg.epochs >= 0 && cfg.batch > 0, ErrorCode::InvalidArgument, "train_flow: bad epochs or batch");
  require(data.allFinite(), ErrorCode::InvalidArgument, "train_flow: non-finite data");
  FlowTrainResult res;
  FlowPrior& flow = res.flow;
  flow = FlowPrior::identity(static_cast<int>(data.cols()), cfg.layers, cfg.hidden, cfg.seed);
  flow.scale_clamp = cfg.scale_clamp;
  if (cfg.fit_normalization) {
    flow.loc = data.colwise().mean();
    const Mat centered = data.rowwise() - flow.loc.row(0);
    const Mat var = centered.colwise().squaredNorm() / static_cast<double>(data.rows());
    flow.log_scale = var.array().sqrt().max(1e-3).log().matrix();
  }
  res.initial_nll = flow.nll(data).mean();

  std::vector<Mat*> all = flow.parameters();
  std::vector<Mat*> trainable(all.begin() + FlowPrior::kFixedTensors, all.end());
  Adam adam(trainable, AdamConfig{cfg.lr});
  Rng rng = Rng(cfg.seed).fork(1);
  std::vector<int> order(data.rows());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t n = std::min<std::size_t>(cfg.batch, order.size() - start);
      Mat batch(n, data.cols());
      for (std::size_t r = 0; r < n; ++r) batch.row(r) = data.row(order[start + r]);
      ad::Tape tape;
      const auto p = graph::bind_flow(tape, flow, true);
      ad::Var logdet;
      ad::Var y = graph::flow_forward(flow, p, tape.constant(batch), &logdet);
      ad::Var loss = ad::mean(0.5 * ad::sum_cols(ad::square(y)) - logdet);
      if (!std::isfinite(loss.item()))
        fail(ErrorCode::Divergence, "train_flow: non-finite loss at epoch " + std::to_string(epoch));
      tape.backward(loss);
      std::vector<Mat> grads;
      for (std::size_t k = FlowPrior::kFixedTensors; k < p.size(); ++k) grads.push_back(tape.grad(p[k]));
      adam.step(grads);
    }
    const double nll = flow.nll(data).mean();
    if (!std::isfinite(nll))
      fail(ErrorCode::Divergence, "train_flow: non-finite NLL after epoch " + std::to_string(epoch));
    res.epoch_nll.push_back(nll);
  }
  return res;
}

void save_flow(const std::string& dir, const FlowPrior& flow) {
  std::filesystem::create_directories(dir);
  const auto params = flow.parameters();
  Eigen::Index total = 0;
  for (const Mat* m : params) total += m->size();
  Mat flat(1, total);
  Eigen::Index at = 0;
  for (const Mat* m : params) {
    flat.block(0, at, 1, m->size()) = Eigen::Map<const Mat>(m->data(), 1, m->size());
    at += m->size();
  }
  write_flat((std::filesystem::path(dir) / "flow.bin").string(), flat);
  Json j;
  j["format"] = "quadfit-flow";
  j["version"] = 1;
  j["dim"] = flow.dim;
  j["layers"] = flow.num_layers();
  j["hidden"] = flow.hidden;
  j["scale_clamp"] = flow.scale_clamp;
  j["parameter_count"] = total;
  Json masks = Json::array();
  for (const CouplingLayer& l : flow.layers) {
    std::vector<int> m(flow.dim);
    for (int i = 0; i < flow.dim; ++i) m[i] = static_cast<int>(l.mask(0, i));
    masks.push_back(m);
  }
  j["masks"] = masks;
  write_json((std::filesystem::path(dir) / "flow.json").string(), j);
}

FlowPrior load_flow(const std::string& dir) {
  const Json j = read_json((std::filesystem::path(dir) / "flow.json").string());
  try {
    require(j.at("format") == "quadfit-flow", ErrorCode::Format, "flow.json: unexpected format tag");
    FlowPrior flow = FlowPrior::identity(j.at("dim"), j.at("layers"), j.at("hidden"), 0);
    flow.scale_clamp = j.at("scale_clamp");
    const auto& masks = j.at("masks");
    require(masks.size() == flow.layers.size(), ErrorCode::Format, "flow.json: one mask per layer");
    for (std::size_t l = 0; l < masks.size(); ++l) {
      const std::vector<int> m = masks[l];
      require(static_cast<int>(m.size()) == flow.dim, ErrorCode::Format, "flow.json: mask length");
      for (int i = 0; i < flow.dim; ++i) flow.layers[l].mask(0, i) = m[i];
    }
    const Mat flat = read_flat((std::filesystem::path(dir) / "flow.bin").string());
    Eigen::Index at = 0;
    for (Mat* m : flow.parameters()) {
      require(flat.rows() == 1 && at + m->size() <= flat.cols(), ErrorCode::Format, "flow.bin: too short");
      *m = Eigen::Map<const Mat>(flat.data() + at, m->rows(), m->cols());
      at += m->size();
    }
    require(at == flat.cols(), ErrorCode::Format, "flow.bin: parameter count does not match flow.json");
    return flow;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("flow.json: ") + e.what());
  }
}

}  // namespace quadfit
