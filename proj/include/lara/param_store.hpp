#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "lara/rng.hpp"
#include "lara/tensor.hpp"

namespace lara {

enum class Init {
  kZero,
  kOne,
  kHeTruncNormal,    // N(0, 2/fan_in), resampled beyond 2 sigma
  kResidualScaled,   // He as above, scaled by 0.1: residual-branch outputs
                     // start small so the stream stays identity-dominated
  kTokenNormal,      // N(0, std 0.02), for learned token/query arrays
  kLatentNormal,     // N(0, std 1.0), keeps latent rows separated under LN
};

/// Ordered collection of named learnable tensors. Iteration order is
/// insertion order, and all randomness is drawn from a single seeded stream,
/// so a seed fully determines every value.
template <typename S>
class ParamStoreT {
 public:
  explicit ParamStoreT(uint64_t seed) : rng_seed_(seed), rng_(seed) {}

  TensorT<S>& create(const std::string& name, std::vector<int64_t> dims, Init init,
                     double gain = 1.0) {
    LARA_CHECK_ARG(!map_.count(name), "duplicate parameter name: ", name);
    TensorT<S> t = TensorT<S>::zeros(std::move(dims));
    switch (init) {
      case Init::kZero:
        break;
      case Init::kOne:
        for (auto& v : t.data()) v = S(1);
        break;
      case Init::kHeTruncNormal:
      case Init::kResidualScaled: {
        double sigma = gain * std::sqrt(2.0 / static_cast<double>(fan_in(t.dims())));
        if (init == Init::kResidualScaled) sigma *= 0.1;
        for (auto& v : t.data()) v = static_cast<S>(rng_.truncated_normal(2.0) * sigma);
        break;
      }
      case Init::kTokenNormal:
        for (auto& v : t.data()) v = static_cast<S>(rng_.normal() * 0.02);
        break;
      case Init::kLatentNormal:
        for (auto& v : t.data()) v = static_cast<S>(rng_.normal());
        break;
    }
    t.set_requires_grad(true);
    names_.push_back(name);
    auto [it, ok] = map_.emplace(name, std::move(t));
    (void)ok;
    return it->second;
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }

  TensorT<S>& get(const std::string& name) {
    auto it = map_.find(name);
    LARA_CHECK_ARG(it != map_.end(), "unknown parameter: ", name);
    return it->second;
  }
  const TensorT<S>& get(const std::string& name) const {
    auto it = map_.find(name);
    LARA_CHECK_ARG(it != map_.end(), "unknown parameter: ", name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return names_; }
  size_t size() const { return names_.size(); }
  uint64_t rng_seed() const { return rng_seed_; }

  void zero_grads() {
    for (const auto& n : names_) get(n).zero_grad();
  }

  int64_t total_parameters() const {
    int64_t n = 0;
    for (const auto& name : names_) n += get(name).numel();
    return n;
  }

 private:
  static int64_t fan_in(const std::vector<int64_t>& dims) {
    if (dims.size() == 2) return dims[0];                      // W[in,out]
    if (dims.size() == 4) return dims[1] * dims[2] * dims[3];  // k[cout,cin,kh,kw]
    return dims.empty() ? 1 : dims[0];
  }

  std::vector<std::string> names_;
  std::unordered_map<std::string, TensorT<S>> map_;
  uint64_t rng_seed_;
  Rng rng_;
};

using ParamStore = ParamStoreT<float>;

/// Exact-value copy into another scalar type (used by the float64 shadow
/// gradient checks; float -> double is lossless).
template <typename To, typename From>
ParamStoreT<To> convert_store(const ParamStoreT<From>& src) {
  ParamStoreT<To> dst(src.rng_seed());
  for (const auto& name : src.names()) {
    const auto& t = src.get(name);
    auto& u = dst.create(name, t.dims(), Init::kZero);
    for (int64_t i = 0; i < t.numel(); ++i) u.at(i) = static_cast<To>(t.at(i));
  }
  return dst;
}

}  // namespace lara
