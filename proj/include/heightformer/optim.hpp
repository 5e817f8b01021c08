#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "heightformer/params.hpp"

namespace hf {

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled decay, applied to matrices and kernels only (rank >= 2).
  double weight_decay = 1e-2;
};

/// Adaptive moments with decoupled weight decay.
class AdamW {
 public:
  AdamW(const ParameterStore& params, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& [_, t] : params) {
      slots_.push_back({t, std::vector<double>(t.size(), 0.0), std::vector<double>(t.size(), 0.0)});
    }
  }

  void step() {
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      auto g = s.param.grad();
      auto w = s.param.mutable_values();
      const double decay = s.param.rank() >= 2 ? cfg_.lr * cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        w[i] -= decay * w[i];
        w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  std::size_t steps() const { return steps_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t steps_ = 0;
};

}  // namespace hf
