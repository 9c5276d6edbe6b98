#pragma once

#include <vector>

#include "cldyn/tensor.hpp"

namespace cldyn {

/// Bias-corrected Adam over a fixed list of parameter tensors. Moment
/// buffers are keyed by position, so the parameter list must be stable
/// across steps.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].data().size(), 0.0);
      v_[i].assign(params_[i].data().size(), 0.0);
    }
  }

  /// One update from the gradients currently accumulated in the parameters.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].data();
      const auto& g = params_[i].grad();
      if (g.size() != p.size())
        throw ShapeError("adam: gradient missing or mismatched for parameter " + std::to_string(i));
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < p.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        p[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::vector<Tensor>& params() { return params_; }
  long step_count() const { return t_; }
  double lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace cldyn
