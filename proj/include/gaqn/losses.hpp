#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

#include "gaqn/ops.hpp"

namespace gaqn {

/// Probability clamp used by the logistic (vanilla) GAN losses.
inline constexpr double kProbClamp = 1e-7;

struct SigmaSchedule {
  double initial = 2.0;
  double final = 0.7;
  std::int64_t anneal_steps = 20000;
};

/// Linear annealing of the observation standard deviation.
inline double sigma_schedule(std::int64_t step, const SigmaSchedule& cfg = {}) {
  if (step < 0) throw std::invalid_argument("sigma_schedule: negative step");
  const double frac =
      cfg.anneal_steps <= 0 ? 1.0 : std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.anneal_steps));
  return cfg.initial + (cfg.final - cfg.initial) * frac;
}

namespace detail {

inline double clamped_prob(double logit) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  return std::clamp(p, kProbClamp, 1.0 - kProbClamp);
}

template <class T>
double mean_of(std::span<const T> xs, auto&& f) {
  if (xs.empty()) throw std::invalid_argument("loss over an empty score set");
  double s = 0;
  for (T v : xs) s += f(static_cast<double>(v));
  return s / static_cast<double>(xs.size());
}

}  // namespace detail

/// -mean(log sigmoid(d)) over all patch scores of the fake batch.
template <class T>
double vanilla_gan_g(std::span<const T> d_fake) {
  return detail::mean_of(d_fake, [](double d) { return -std::log(detail::clamped_prob(d)); });
}

template <class T>
double vanilla_gan_d(std::span<const T> d_real, std::span<const T> d_fake) {
  return detail::mean_of(d_real, [](double d) { return -std::log(detail::clamped_prob(d)); }) +
         detail::mean_of(d_fake, [](double d) { return -std::log(1.0 - detail::clamped_prob(d)); });
}

/// mean((d - 1)^2): pulls fake patch scores toward the real label.
template <class T>
double lsgan_g(std::span<const T> d_fake) {
  return detail::mean_of(d_fake, [](double d) { return (d - 1.0) * (d - 1.0); });
}

/// mean(d_fake^2) + mean((d_real - 1)^2).
template <class T>
double lsgan_d(std::span<const T> d_real, std::span<const T> d_fake) {
  return detail::mean_of(d_fake, [](double d) { return d * d; }) +
         detail::mean_of(d_real, [](double d) { return (d - 1.0) * (d - 1.0); });
}

/// Squared L2 distance between the batch means of two [B,F] feature batches.
template <class T>
double fm_loss(const Tensor<T>& f_real, const Tensor<T>& f_fake) {
  if (f_real.rank() != 2 || f_real.shape() != f_fake.shape() || f_real.dim(0) < 1)
    throw ShapeError("fm_loss: feature batches " + shape_str(f_real.shape()) + " and " +
                     shape_str(f_fake.shape()) + " differ");
  const int b = f_real.dim(0), f = f_real.dim(1);
  double total = 0;
  for (int j = 0; j < f; ++j) {
    double d = 0;
    for (int i = 0; i < b; ++i)
      d += static_cast<double>(f_real[static_cast<std::size_t>(i) * f + j]) -
           static_cast<double>(f_fake[static_cast<std::size_t>(i) * f + j]);
    d /= b;
    total += d * d;
  }
  return total;
}

struct LossReport {
  std::int64_t step = 0;
  double sigma = 0;
  double nll = 0;
  double kl_total = 0;
  double elbo = 0;
  double lsgan_g = 0;
  double lsgan_d = 0;
  double fm = 0;
  double gan_g = 0;
  double gan_d = 0;
  double total_generator = 0;
  double total_discriminator = 0;

  bool operator==(const LossReport&) const = default;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, LossReport report) : std::runtime_error(what), report_(report) {}
  const LossReport& report() const { return report_; }

 private:
  LossReport report_;
};

/// Which adversarial objective is active for a composite report.
enum class AdversarialLoss { none, vanilla, least_squares, least_squares_fm };

struct LossWeights {
  double adversarial = 1.0;
  double feature_matching = 1.0;
};

/// Inputs for one composite evaluation. Scores are flattened patch logits.
template <class T>
struct CompositeInputs {
  double nll = 0;
  std::span<const double> kl_per_step;
  std::span<const T> d_real;
  std::span<const T> d_fake;
  const Tensor<T>* f_real = nullptr;
  const Tensor<T>* f_fake = nullptr;
};

/// Assembles all loss components of one step: the generator objective is the adversarial
/// term plus feature matching, the discriminator objective is its own adversarial loss,
/// and the encoder/decoder objective is the ELBO (nll plus summed KL).
template <class T>
LossReport composite_losses(const CompositeInputs<T>& in, AdversarialLoss kind, double sigma, std::int64_t step,
                            const LossWeights& w = {}) {
  LossReport r;
  r.step = step;
  r.sigma = sigma;
  auto check = [&](double v, const char* name) {
    if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite loss component: ") + name, r);
    return v;
  };
  r.nll = check(in.nll, "nll");
  for (double k : in.kl_per_step) r.kl_total += k;
  check(r.kl_total, "kl_total");
  r.elbo = r.nll + r.kl_total;
  for (T v : in.d_real) check(static_cast<double>(v), "d_real");
  for (T v : in.d_fake) check(static_cast<double>(v), "d_fake");
  switch (kind) {
    case AdversarialLoss::none:
      break;
    case AdversarialLoss::vanilla:
      r.gan_g = vanilla_gan_g(in.d_fake);
      r.gan_d = vanilla_gan_d(in.d_real, in.d_fake);
      r.total_generator = w.adversarial * r.gan_g;
      r.total_discriminator = r.gan_d;
      break;
    case AdversarialLoss::least_squares:
    case AdversarialLoss::least_squares_fm:
      r.lsgan_g = lsgan_g(in.d_fake);
      r.lsgan_d = lsgan_d(in.d_real, in.d_fake);
      if (kind == AdversarialLoss::least_squares_fm) {
        if (!in.f_real || !in.f_fake) throw std::invalid_argument("composite_losses: feature batches missing");
        r.fm = check(fm_loss(*in.f_real, *in.f_fake), "fm");
      }
      r.total_generator = w.adversarial * r.lsgan_g + w.feature_matching * r.fm;
      r.total_discriminator = r.lsgan_d;
      break;
  }
  check(r.total_generator, "total_generator");
  check(r.total_discriminator, "total_discriminator");
  return r;
}

namespace ops {

/// Tape counterparts of the adversarial losses; scores are patch logits of any shape.
template <class T>
Var<T> lsgan_g(const Var<T>& d_fake) {
  const Tensor<T>& d = d_fake.value();
  const T v = static_cast<T>(gaqn::lsgan_g(d.span()));
  return d_fake.tape().record(Tensor<T>({1}, v), {d_fake}, [d_fake](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    const Tensor<T>& d = d_fake.value();
    Tensor<T>& gd = t.grad(d_fake.id());
    const T n = static_cast<T>(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) gd[i] += g * T(2) * (d[i] - T(1)) / n;
  });
}

template <class T>
Var<T> lsgan_d(const Var<T>& d_real, const Var<T>& d_fake) {
  const T v = static_cast<T>(gaqn::lsgan_d(d_real.value().span(), d_fake.value().span()));
  return d_real.tape().record(Tensor<T>({1}, v), {d_real, d_fake}, [d_real, d_fake](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    if (d_fake.needs_grad()) {
      const Tensor<T>& d = d_fake.value();
      Tensor<T>& gd = t.grad(d_fake.id());
      for (std::size_t i = 0; i < d.size(); ++i) gd[i] += g * T(2) * d[i] / static_cast<T>(d.size());
    }
    if (d_real.needs_grad()) {
      const Tensor<T>& d = d_real.value();
      Tensor<T>& gd = t.grad(d_real.id());
      for (std::size_t i = 0; i < d.size(); ++i) gd[i] += g * T(2) * (d[i] - T(1)) / static_cast<T>(d.size());
    }
  });
}

namespace detail {
// d/dlogit of -log(clamp(sigmoid)) and -log(1 - clamp(sigmoid)); zero inside the clamp region.
inline double dneg_log_p(double d) {
  const double p = 1.0 / (1.0 + std::exp(-d));
  return (p < kProbClamp || p > 1.0 - kProbClamp) ? 0.0 : -(1.0 - p);
}
inline double dneg_log_1mp(double d) {
  const double p = 1.0 / (1.0 + std::exp(-d));
  return (p < kProbClamp || p > 1.0 - kProbClamp) ? 0.0 : p;
}
}  // namespace detail

template <class T>
Var<T> vanilla_gan_g(const Var<T>& d_fake) {
  const T v = static_cast<T>(gaqn::vanilla_gan_g(d_fake.value().span()));
  return d_fake.tape().record(Tensor<T>({1}, v), {d_fake}, [d_fake](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    const Tensor<T>& d = d_fake.value();
    Tensor<T>& gd = t.grad(d_fake.id());
    for (std::size_t i = 0; i < d.size(); ++i)
      gd[i] += g * static_cast<T>(detail::dneg_log_p(d[i]) / static_cast<double>(d.size()));
  });
}

template <class T>
Var<T> vanilla_gan_d(const Var<T>& d_real, const Var<T>& d_fake) {
  const T v = static_cast<T>(gaqn::vanilla_gan_d(d_real.value().span(), d_fake.value().span()));
  return d_real.tape().record(Tensor<T>({1}, v), {d_real, d_fake}, [d_real, d_fake](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    if (d_real.needs_grad()) {
      const Tensor<T>& d = d_real.value();
      Tensor<T>& gd = t.grad(d_real.id());
      for (std::size_t i = 0; i < d.size(); ++i)
        gd[i] += g * static_cast<T>(detail::dneg_log_p(d[i]) / static_cast<double>(d.size()));
    }
    if (d_fake.needs_grad()) {
      const Tensor<T>& d = d_fake.value();
      Tensor<T>& gd = t.grad(d_fake.id());
      for (std::size_t i = 0; i < d.size(); ++i)
        gd[i] += g * static_cast<T>(detail::dneg_log_1mp(d[i]) / static_cast<double>(d.size()));
    }
  });
}

/// Feature matching against [B,F] batches; either side may carry gradient.
template <class T>
Var<T> fm_loss(const Var<T>& f_real, const Var<T>& f_fake) {
  const T v = static_cast<T>(gaqn::fm_loss(f_real.value(), f_fake.value()));
  return f_real.tape().record(Tensor<T>({1}, v), {f_real, f_fake}, [f_real, f_fake](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    const int b = f_real.dim(0), f = f_real.dim(1);
    std::vector<T> diff(static_cast<std::size_t>(f), T(0));
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < f; ++j) {
        const std::size_t k = static_cast<std::size_t>(i) * f + j;
        diff[j] += (f_real.value()[k] - f_fake.value()[k]) / static_cast<T>(b);
      }
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < f; ++j) {
        const T d = g * T(2) * diff[j] / static_cast<T>(b);
        const std::size_t k = static_cast<std::size_t>(i) * f + j;
        if (f_real.needs_grad()) t.grad(f_real.id())[k] += d;
        if (f_fake.needs_grad()) t.grad(f_fake.id())[k] -= d;
      }
  });
}

}  // namespace ops

}  // namespace gaqn
