#include "quadfit/optim.hpp"

#include <cmath>

namespace quadfit {

void adam_step(Mat& param, const Mat& grad, AdamMoments& mo, const AdamConfig& cfg) {
  require(param.rows() == grad.rows() && param.cols() == grad.cols(), ErrorCode::DimensionMismatch,
          "adam: gradient shape does not match the parameter");
  if (mo.m.rows() != param.rows() || mo.m.cols() != param.cols()) {
    mo.m = Mat::Zero(param.rows(), param.cols());
    mo.v = Mat::Zero(param.rows(), param.cols());
    mo.step = 0;
  }
  ++mo.step;
  mo.m = cfg.beta1 * mo.m + (1.0 - cfg.beta1) * grad;
  mo.v = cfg.beta2 * mo.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(mo.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(mo.step));
  param.array() -= cfg.lr * (mo.m.array() / c1) / ((mo.v.array() / c2).sqrt() + cfg.eps);
}

Adam::Adam(std::vector<Mat*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  moments_.resize(params_.size());
}

void Adam::step(const std::vector<Mat>& grads) {
  require(grads.size() == params_.size(), ErrorCode::DimensionMismatch, "adam: one gradient per parameter");
  for (std::size_t i = 0; i < params_.size(); ++i) adam_step(*params_[i], grads[i], moments_[i], cfg_);
}

}  // namespace quadfit
