#pragma once

#include "quadfit/core.hpp"

#include <vector>

namespace quadfit {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moments for one parameter tensor.
struct AdamMoments {
  Mat m;
  Mat v;
  long step = 0;
};

/// One bias-corrected Adam update of `param` in place.
void adam_step(Mat& param, const Mat& grad, AdamMoments& moments, const AdamConfig& cfg);

/// Adam over a list of parameter tensors sharing one step counter.
class Adam {
 public:
  Adam(std::vector<Mat*> params, AdamConfig cfg);
  void step(const std::vector<Mat>& grads);
  void set_lr(double lr) { cfg_.lr = lr; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Mat*> params_;
  std::vector<AdamMoments> moments_;
  AdamConfig cfg_;
};

}  // namespace quadfit
