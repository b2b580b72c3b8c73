#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "sgnas/tensor.hpp"

namespace sgnas {

// Learning rate at `epoch` of a cosine annealing schedule from `base` to 0.
inline double cosine_lr(double epoch, double total_epochs, double base) {
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total_epochs));
}

// SGD with heavy-ball momentum and L2 weight decay. Parameters that received
// no gradient since the last zero_grad() are left untouched, momentum and
// decay included, so single-path training only moves the active path.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<BasicTensor<T>> params, double lr, double momentum, double weight_decay)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    buffers_.resize(params_.size());
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.grad_touched()) continue;
      auto values = p.mutable_values();
      auto grad = p.grad();
      auto& buf = buffers_[k];
      const bool fresh = buf.empty();
      if (fresh) buf.assign(values.size(), T(0));
      for (std::size_t i = 0; i < values.size(); ++i) {
        const T d = grad[i] + static_cast<T>(weight_decay_) * values[i];
        buf[i] = fresh ? d : static_cast<T>(momentum_) * buf[i] + d;
        values[i] -= static_cast<T>(lr_) * buf[i];
      }
    }
  }

 private:
  std::vector<BasicTensor<T>> params_;
  std::vector<std::vector<T>> buffers_;
  double lr_, momentum_, weight_decay_;
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<BasicTensor<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double weight_decay = 0.0, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2),
        weight_decay_(weight_decay), eps_(eps) {
    first_.resize(params_.size());
    second_.resize(params_.size());
    steps_.assign(params_.size(), 0);
  }

  void set_lr(double lr) { lr_ = lr; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.grad_touched()) continue;
      auto values = p.mutable_values();
      auto grad = p.grad();
      if (first_[k].empty()) {
        first_[k].assign(values.size(), 0.0);
        second_[k].assign(values.size(), 0.0);
      }
      const long t = ++steps_[k];
      const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = static_cast<double>(grad[i]) + weight_decay_ * values[i];
        first_[k][i] = beta1_ * first_[k][i] + (1.0 - beta1_) * g;
        second_[k][i] = beta2_ * second_[k][i] + (1.0 - beta2_) * g * g;
        const double update = lr_ * (first_[k][i] / c1) / (std::sqrt(second_[k][i] / c2) + eps_);
        values[i] = static_cast<T>(values[i] - update);
      }
    }
  }

  // Flattened moment buffers and step counts, for checkpointing.
  const std::vector<std::vector<double>>& first_moments() const { return first_; }
  const std::vector<std::vector<double>>& second_moments() const { return second_; }

 private:
  std::vector<BasicTensor<T>> params_;
  double lr_, beta1_, beta2_, weight_decay_, eps_;
  std::vector<std::vector<double>> first_, second_;
  std::vector<long> steps_;
};

}  // namespace sgnas
