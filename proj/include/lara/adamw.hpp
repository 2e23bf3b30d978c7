#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lara/param_store.hpp"

namespace lara {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-7;
};

/// AdamW with decoupled weight decay and bias correction:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta)
/// Gradients are left untouched; the caller zeroes them.
template <typename S>
class AdamWT {
 public:
  AdamWT(const ParamStoreT<S>& store, AdamWConfig cfg) : cfg_(cfg) {
    LARA_CHECK_ARG(cfg.beta1 > 0 && cfg.beta1 < 1 && cfg.beta2 > 0 && cfg.beta2 < 1,
                   "adamw: betas must lie in (0,1)");
    LARA_CHECK_ARG(cfg.eps > 0, "adamw: eps must be positive");
    for (const auto& name : store.names()) {
      const int64_t n = store.get(name).numel();
      m_.emplace_back(static_cast<size_t>(n), S(0));
      v_.emplace_back(static_cast<size_t>(n), S(0));
    }
  }

  void step(ParamStoreT<S>& store) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t pi = 0; pi < store.names().size(); ++pi) {
      auto& p = store.get(store.names()[pi]);
      LARA_CHECK_ARG(p.has_grad(), "adamw: missing gradient for ", store.names()[pi]);
      auto val = p.data();
      auto grad = p.grad();
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (size_t i = 0; i < m.size(); ++i) {
        const double g = grad[i];
        m[i] = static_cast<S>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g);
        v[i] = static_cast<S>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        val[i] = static_cast<S>(val[i] - cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                                    cfg_.weight_decay * val[i]));
      }
    }
  }

  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }
  const AdamWConfig& config() const { return cfg_; }

  std::vector<S>& moment1(size_t param_index) { return m_[param_index]; }
  std::vector<S>& moment2(size_t param_index) { return v_[param_index]; }

 private:
  AdamWConfig cfg_;
  int64_t step_ = 0;
  std::vector<std::vector<S>> m_;
  std::vector<std::vector<S>> v_;
};

using AdamW = AdamWT<float>;

}  // namespace lara
