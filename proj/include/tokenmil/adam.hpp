#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace tokenmil {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias-corrected moment estimates.
class Adam {
 public:
  Adam(std::size_t parameter_count, AdamConfig config)
      : config_(config), m_(parameter_count, 0.0), v_(parameter_count, 0.0) {
    if (!(config.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  }

  void step(std::span<double> params, std::span<const double> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw std::invalid_argument("Adam: parameter/gradient size mismatch");
    beta1_power_ *= config_.beta1;
    beta2_power_ *= config_.beta2;
    const double c1 = 1.0 - beta1_power_;
    const double c2 = 1.0 - beta2_power_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grads[i];
      m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
      v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g * g;
      const double m_hat = m_[i] / c1;
      const double v_hat = v_[i] / c2;
      params[i] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
    }
    ++steps_;
  }

  std::size_t steps() const noexcept { return steps_; }

 private:
  AdamConfig config_;
  std::vector<double> m_;
  std::vector<double> v_;
  double beta1_power_ = 1.0;
  double beta2_power_ = 1.0;
  std::size_t steps_ = 0;
};

}  // namespace tokenmil
