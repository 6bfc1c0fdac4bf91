#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gaqn/autodiff.hpp"

namespace gaqn {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Moments are keyed by parameter name.
template <class T>
class Adam {
 public:
  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };

  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void attach(const ParameterSet<T>& ps) {
    for (const auto& p : ps)
      if (!moments_.count(p.name)) moments_[p.name] = {Tensor<T>(p.value.shape()), Tensor<T>(p.value.shape())};
  }

  /// One update of every parameter in `sets` from its accumulated gradient.
  void step(const std::vector<ParameterSet<T>*>& sets) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (ParameterSet<T>* ps : sets)
      for (auto& p : *ps) {
        auto it = moments_.find(p.name);
        if (it == moments_.end()) it = moments_.emplace(p.name, Moments{Tensor<T>(p.value.shape()), Tensor<T>(p.value.shape())}).first;
        Moments& mo = it->second;
        if (p.grad.shape() != p.value.shape()) continue;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
          const double g = p.grad[i];
          const double m = cfg_.beta1 * static_cast<double>(mo.m[i]) + (1.0 - cfg_.beta1) * g;
          const double v = cfg_.beta2 * static_cast<double>(mo.v[i]) + (1.0 - cfg_.beta2) * g * g;
          mo.m[i] = static_cast<T>(m);
          mo.v[i] = static_cast<T>(v);
          p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps));
        }
      }
  }

  const AdamConfig& config() const { return cfg_; }
  std::int64_t steps_taken() const { return t_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace gaqn
