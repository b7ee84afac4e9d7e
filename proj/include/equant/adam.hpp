#pragma once

// Adam with bias correction and global-norm gradient clipping. Moment
// buffers are keyed by parameter so partial checkpoints can restore them.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "equant/errors.hpp"
#include "equant/tensor.hpp"

namespace equant {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.8;
  double beta2 = 0.999;
  double eps = 1e-7;
  double clip_norm = 5.0;  // <= 0 disables clipping
  int warmup_steps = 1000; // linear ramp from 0; <= 0 disables
};

template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return t_; }

  // Learning rate the most recent step used (warmup included).
  double effective_lr() const {
    if (cfg_.warmup_steps > 0 && t_ <= cfg_.warmup_steps)
      return cfg_.lr * static_cast<double>(t_) / cfg_.warmup_steps;
    return cfg_.lr;
  }

  // Resume support: moments are stored per-parameter in registration order.
  struct Slot {
    std::vector<T> m;
    std::vector<T> v;
  };

  void attach(const std::vector<Tensor<T>>& params) {
    params_ = params;
    slots_.clear();
    slots_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      slots_[i].m.assign(static_cast<std::size_t>(params[i].numel()), T{0});
      slots_[i].v.assign(static_cast<std::size_t>(params[i].numel()), T{0});
    }
    t_ = 0;
  }

  std::size_t param_count() const { return params_.size(); }
  Slot& slot(std::size_t i) { return slots_[i]; }
  const Slot& slot(std::size_t i) const { return slots_[i]; }
  void set_step_count(std::int64_t t) { t_ = t; }

  // Applies one update from the gradients currently stored on the
  // parameters, then leaves the gradients untouched (caller zeroes them).
  // Returns the pre-clip global gradient norm.
  double step() {
    if (params_.empty()) throw ContractError("Adam::step: no parameters attached");
    ++t_;
    double sq = 0;
    for (auto& p : params_) {
      auto& g = p.grad_storage();
      for (T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
    }
    const double gnorm = std::sqrt(sq);
    double scale = 1.0;
    if (cfg_.clip_norm > 0 && gnorm > cfg_.clip_norm) scale = cfg_.clip_norm / gnorm;

    const double lr = effective_lr();

    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto val = params_[i].value();
      auto& g = params_[i].grad_storage();
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      for (std::size_t j = 0; j < val.size(); ++j) {
        const double gj = static_cast<double>(g[j]) * scale;
        const double mj = cfg_.beta1 * static_cast<double>(m[j]) + (1.0 - cfg_.beta1) * gj;
        const double vj = cfg_.beta2 * static_cast<double>(v[j]) + (1.0 - cfg_.beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        val[j] = static_cast<T>(static_cast<double>(val[j]) - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
    return gnorm;
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor<T>> params_;
  std::vector<Slot> slots_;
  std::int64_t t_ = 0;
};

}  // namespace equant
