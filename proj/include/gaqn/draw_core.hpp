#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gaqn/dataset.hpp"
#include "gaqn/ops.hpp"
#include "gaqn/repr_net.hpp"

namespace gaqn {

/// Convolutional-LSTM decoder. Generation and inference cores run on the quarter-resolution
/// grid; the canvas lives at full resolution and is read out through a 1x1 convolution and a
/// sigmoid. Core weights are shared across steps, so the step count is a call-time argument.
struct DrawConfig {
  int image_size = kImageSize;
  int repr_channels = 64;
  int hidden = 64;
  int latent = 8;
  int canvas_channels = 64;
  int steps = 8;
  int kernel = 5;

  int grid() const { return image_size / 4; }
  bool operator==(const DrawConfig&) const = default;
};

inline constexpr double kLogVarLimit = 10.0;

template <class T>
struct DrawParams {
  DrawConfig cfg;
  ParameterSet<T> params;
};

/// Diagonal Gaussian over the latent grid.
template <class T>
struct GaussianParams {
  Tensor<T> mean;
  Tensor<T> log_var;
};

template <class T>
struct ElboTerms {
  double nll = 0;                   // summed over pixels, averaged over the batch
  std::vector<double> kl_per_step;  // one entry per generation step, averaged over the batch
  Tensor<T> reconstruction;         // sigmoid readout, [N,3,H,W]
};

/// KL(q || p) of one element pair; non-negative by construction.
inline double gaussian_kl_element(double mq, double lvq, double mp, double lvp) {
  const double d = lvq - lvp;
  const double diff = mq - mp;
  return std::max(0.0, 0.5 * (std::expm1(d) - d + diff * diff * std::exp(-lvp)));
}

/// Sum over all latent elements of the closed-form diagonal-Gaussian KL.
template <class T>
double gaussian_kl(const GaussianParams<T>& q, const GaussianParams<T>& p) {
  if (q.mean.shape() != p.mean.shape() || q.log_var.shape() != q.mean.shape() || p.log_var.shape() != p.mean.shape())
    throw ShapeError("gaussian_kl: shape mismatch " + shape_str(q.mean.shape()) + " vs " + shape_str(p.mean.shape()));
  double s = 0;
  for (std::size_t i = 0; i < q.mean.size(); ++i) s += gaussian_kl_element(q.mean[i], q.log_var[i], p.mean[i], p.log_var[i]);
  return s;
}

/// Negative log-likelihood of x_gt under N(x', sigma^2), summed over every element.
template <class T>
double gaussian_nll(const Tensor<T>& x_gt, const Tensor<T>& x_pred, double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("gaussian_nll: sigma must be positive");
  if (x_gt.shape() != x_pred.shape())
    throw ShapeError("gaussian_nll: shape mismatch " + shape_str(x_gt.shape()) + " vs " + shape_str(x_pred.shape()));
  const double norm = 0.5 * std::log(2.0 * std::numbers::pi * sigma * sigma);
  double s = 0;
  for (std::size_t i = 0; i < x_gt.size(); ++i) {
    const double r = (static_cast<double>(x_gt[i]) - static_cast<double>(x_pred[i])) / sigma;
    s += 0.5 * r * r + norm;
  }
  return s;
}

namespace ops {

/// Batch-mean KL between two diagonal Gaussians given as [N,...] tensors.
template <class T>
Var<T> gaussian_kl(const Var<T>& mq, const Var<T>& lvq, const Var<T>& mp, const Var<T>& lvp) {
  detail::require_same(mq, mp, "gaussian_kl");
  detail::require_same(lvq, lvp, "gaussian_kl");
  detail::require_same(mq, lvq, "gaussian_kl");
  const double n = mq.dim(0);
  double s = 0;
  for (std::size_t i = 0; i < mq.value().size(); ++i)
    s += gaussian_kl_element(mq.value()[i], lvq.value()[i], mp.value()[i], lvp.value()[i]);
  return mq.tape().record(Tensor<T>({1}, static_cast<T>(s / n)), {mq, lvq, mp, lvp},
                          [mq, lvq, mp, lvp, n](Tape<T>& t, int self) {
                            const double g = t.grad(self)[0] / n;
                            const std::size_t sz = mq.value().size();
                            for (std::size_t i = 0; i < sz; ++i) {
                              const double d = mq.value()[i] - mp.value()[i];
                              const double inv_vp = std::exp(-static_cast<double>(lvp.value()[i]));
                              const double ratio = std::exp(static_cast<double>(lvq.value()[i]) - lvp.value()[i]);
                              if (mq.needs_grad()) t.grad(mq.id())[i] += static_cast<T>(g * d * inv_vp);
                              if (mp.needs_grad()) t.grad(mp.id())[i] -= static_cast<T>(g * d * inv_vp);
                              if (lvq.needs_grad()) t.grad(lvq.id())[i] += static_cast<T>(g * 0.5 * (ratio - 1.0));
                              if (lvp.needs_grad())
                                t.grad(lvp.id())[i] += static_cast<T>(g * 0.5 * (1.0 - ratio - d * d * inv_vp));
                            }
                          });
}

/// Batch-mean Gaussian NLL of a constant target under the predicted mean.
template <class T>
Var<T> gaussian_nll(const Tensor<T>& target, const Var<T>& pred, double sigma) {
  const double n = pred.dim(0);
  const double v = gaqn::gaussian_nll(target, pred.value(), sigma) / n;
  return pred.tape().record(Tensor<T>({1}, static_cast<T>(v)), {pred}, [target, pred, sigma, n](Tape<T>& t, int self) {
    const double g = t.grad(self)[0] / (n * sigma * sigma);
    Tensor<T>& gp = t.grad(pred.id());
    for (std::size_t i = 0; i < gp.size(); ++i)
      gp[i] += static_cast<T>(g * (static_cast<double>(pred.value()[i]) - target[i]));
  });
}

}  // namespace ops

namespace detail {

/// [N,C,H,W] -> [N,C*f*f,H/f,W/f]
template <class T>
Tensor<T> space_to_depth(const Tensor<T>& x, int f) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({n, c * f * f, h / f, w / f});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int a = 0; a < f; ++a)
        for (int b = 0; b < f; ++b)
          for (int r = 0; r < h / f; ++r)
            for (int q = 0; q < w / f; ++q) y.at(i, (ch * f + a) * f + b, r, q) = x.at(i, ch, r * f + a, q * f + b);
  return y;
}

template <class T>
std::pair<Var<T>, Var<T>> lstm_update(const Var<T>& gates, const Var<T>& cell, int hidden) {
  const Var<T> in = ops::sigmoid(ops::slice_channels(gates, 0, hidden));
  const Var<T> forget = ops::sigmoid(ops::slice_channels(gates, hidden, hidden));
  const Var<T> out = ops::sigmoid(ops::slice_channels(gates, 2 * hidden, hidden));
  const Var<T> cand = ops::tanh(ops::slice_channels(gates, 3 * hidden, hidden));
  const Var<T> c = ops::add(ops::mul(forget, cell), ops::mul(in, cand));
  return {ops::mul(out, ops::tanh(c)), c};
}

template <class T>
Tensor<T> normal_noise(const std::vector<int>& shape, std::uint64_t seed) {
  Tensor<T> e(shape);
  Rng rng(seed);
  for (auto& v : e.storage()) v = static_cast<T>(rng.normal());
  return e;
}

}  // namespace detail

template <class T>
DrawParams<T> init_draw(std::uint64_t seed, const DrawConfig& cfg = {}) {
  if (cfg.image_size % 4 != 0) throw std::invalid_argument("decoder image size must be a multiple of 4");
  DrawParams<T> d;
  d.cfg = cfg;
  Rng rng(derive_seed(seed, {0xd4a3}));
  auto& ps = d.params;
  const int h = cfg.hidden, z = cfg.latent, k = cfg.kernel, cr = cfg.repr_channels;
  const int x_ch = kChannels * 16;
  const int inf_in = x_ch + cr + kPoseDim + 2 * h;
  const int gen_in = cr + kPoseDim + z + h;
  ps.add("draw.inf.wx", {4 * h, x_ch + cr + kPoseDim, k, k}, inf_in * k * k, rng);
  ps.add("draw.inf.wh", {4 * h, 2 * h, k, k}, inf_in * k * k, rng);
  ps.add("draw.inf.b", {4 * h}, inf_in * k * k, rng);
  ps.add("draw.gen.wx", {4 * h, cr + kPoseDim, k, k}, gen_in * k * k, rng);
  ps.add("draw.gen.wh", {4 * h, z + h, k, k}, gen_in * k * k, rng);
  ps.add("draw.gen.b", {4 * h}, gen_in * k * k, rng);
  ps.add("draw.prior.w", {2 * z, h, k, k}, h * k * k, rng);
  ps.add("draw.prior.b", {2 * z}, h * k * k, rng);
  ps.add("draw.post.w", {2 * z, h, k, k}, h * k * k, rng);
  ps.add("draw.post.b", {2 * z}, h * k * k, rng);
  ps.add("draw.up.w", {h, cfg.canvas_channels, 4, 4}, h * 16, rng);
  ps.add("draw.up.b", {cfg.canvas_channels}, h * 16, rng);
  ps.add("draw.out.w", {kChannels, cfg.canvas_channels, 1, 1}, cfg.canvas_channels, rng);
  ps.add("draw.out.b", {kChannels}, cfg.canvas_channels, rng);
  return d;
}

struct ElboOptions {
  // Test hook: the posterior is replaced by the prior, making every KL term exactly zero.
  bool posterior_is_prior = false;
};

/// Tape-level result of one decoder pass.
template <class T>
struct DrawGraph {
  Var<T> nll;
  Var<T> kl;
  Var<T> elbo;
  Var<T> reconstruction;
  std::vector<double> kl_per_step;
};

namespace detail {

template <class T>
struct DrawRun {
  Tape<T>& tape;
  DrawParams<T>& draw;
  Var<T> r;
  Var<T> pose_grid;

  Var<T> p(const char* name) { return tape.param(draw.params[name]); }

  void check(const Tensor<T>& query_poses) const {
    const auto& c = draw.cfg;
    const int n = r.dim(0);
    if (r.value().rank() != 4 || r.dim(1) != c.repr_channels || r.dim(2) != c.grid() || r.dim(3) != c.grid())
      throw ShapeError("representation " + shape_str(r.shape()) + " does not match decoder config");
    if (query_poses.rank() != 2 || query_poses.dim(0) != n || query_poses.dim(1) != kPoseDim)
      throw ShapeError("query poses " + shape_str(query_poses.shape()) + " do not match batch");
  }

  std::pair<Var<T>, Var<T>> gaussian(const Var<T>& h, const char* w, const char* b) {
    const int z = draw.cfg.latent, pad = draw.cfg.kernel / 2;
    const Var<T> out = ops::conv2d(h, p(w), p(b), 1, pad);
    const Var<T> lv = ops::clamp(ops::slice_channels(out, z, z), static_cast<T>(-kLogVarLimit), static_cast<T>(kLogVarLimit));
    return {ops::slice_channels(out, 0, z), lv};
  }

  Var<T> sample(const Var<T>& mean, const Var<T>& log_var, std::uint64_t seed) {
    const Var<T> eps = tape.constant(normal_noise<T>(mean.shape(), seed));
    return ops::add(mean, ops::mul(ops::exp(ops::scale(log_var, static_cast<T>(0.5))), eps));
  }

  Var<T> zeros(int channels, int size) { return tape.constant(Tensor<T>({r.dim(0), channels, size, size})); }
};

}  // namespace detail

/// Records the full posterior-driven pass: M inference/generation steps, per-step KL between
/// posterior and prior, and the Gaussian NLL of the target under the sigmoid readout.
template <class T>
DrawGraph<T> draw_elbo(Tape<T>& tape, DrawParams<T>& draw, const Var<T>& r, const Tensor<T>& query_poses,
                       const Tensor<T>& target, int steps, double sigma, std::uint64_t seed,
                       const ElboOptions& opt = {}) {
  if (steps < 1) throw std::invalid_argument("decoder needs at least one step");
  const auto& c = draw.cfg;
  const int n = r.dim(0), h = c.hidden, pad = c.kernel / 2, s = c.grid();
  detail::DrawRun<T> run{tape, draw, r, {}};
  run.check(query_poses);
  if (target.shape() != std::vector<int>{n, kChannels, c.image_size, c.image_size})
    throw ShapeError("target " + shape_str(target.shape()) + " does not match decoder config");
  run.pose_grid = tape.constant(detail::broadcast_grid(query_poses, s));

  const Var<T> x_low = tape.constant(detail::space_to_depth(target, 4));
  const Var<T> inf_static =
      ops::conv2d(ops::concat_channels<T>({x_low, r, run.pose_grid}), run.p("draw.inf.wx"), run.p("draw.inf.b"), 1, pad);
  const Var<T> gen_static =
      ops::conv2d(ops::concat_channels<T>({r, run.pose_grid}), run.p("draw.gen.wx"), run.p("draw.gen.b"), 1, pad);

  Var<T> h_g = run.zeros(h, s), c_g = run.zeros(h, s), h_e = run.zeros(h, s), c_e = run.zeros(h, s);
  Var<T> canvas = run.zeros(c.canvas_channels, c.image_size);
  DrawGraph<T> g;
  std::vector<Var<T>> kls;
  for (int m = 0; m < steps; ++m) {
    auto [mp, lvp] = run.gaussian(h_g, "draw.prior.w", "draw.prior.b");
    Var<T> mq = mp, lvq = lvp;
    if (!opt.posterior_is_prior) {
      Var<T> gates = inf_static;
      if (m > 0) gates = ops::add(gates, ops::conv2d(ops::concat_channels<T>({h_g, h_e}), run.p("draw.inf.wh"), 1, pad));
      std::tie(h_e, c_e) = detail::lstm_update(gates, c_e, h);
      std::tie(mq, lvq) = run.gaussian(h_e, "draw.post.w", "draw.post.b");
    }
    const Var<T> kl = ops::gaussian_kl(mq, lvq, mp, lvp);
    kls.push_back(kl);
    g.kl_per_step.push_back(static_cast<double>(kl.value()[0]));
    const Var<T> z = run.sample(mq, lvq, derive_seed(seed, {static_cast<std::uint64_t>(m)}));
    const Var<T> gates =
        ops::add(gen_static, ops::conv2d(ops::concat_channels<T>({z, h_g}), run.p("draw.gen.wh"), 1, pad));
    std::tie(h_g, c_g) = detail::lstm_update(gates, c_g, h);
    canvas = ops::add(canvas, ops::conv_transpose2d(h_g, run.p("draw.up.w"), run.p("draw.up.b"), 4));
  }
  g.reconstruction = ops::sigmoid(ops::conv2d(canvas, run.p("draw.out.w"), run.p("draw.out.b")));
  g.nll = ops::gaussian_nll(target, g.reconstruction, sigma);
  g.kl = ops::weighted_sum(kls, std::vector<T>(kls.size(), T(1)));
  g.elbo = ops::weighted_sum<T>({g.nll, g.kl}, {T(1), T(1)});
  (void)n;
  return g;
}

/// Prior-driven generation of the query view.
template <class T>
Var<T> draw_generate(Tape<T>& tape, DrawParams<T>& draw, const Var<T>& r, const Tensor<T>& query_poses, int steps,
                     std::uint64_t seed) {
  if (steps < 1) throw std::invalid_argument("decoder needs at least one step");
  const auto& c = draw.cfg;
  const int h = c.hidden, pad = c.kernel / 2, s = c.grid();
  detail::DrawRun<T> run{tape, draw, r, {}};
  run.check(query_poses);
  run.pose_grid = tape.constant(detail::broadcast_grid(query_poses, s));
  const Var<T> gen_static =
      ops::conv2d(ops::concat_channels<T>({r, run.pose_grid}), run.p("draw.gen.wx"), run.p("draw.gen.b"), 1, pad);
  Var<T> h_g = run.zeros(h, s), c_g = run.zeros(h, s);
  Var<T> canvas = run.zeros(c.canvas_channels, c.image_size);
  for (int m = 0; m < steps; ++m) {
    auto [mp, lvp] = run.gaussian(h_g, "draw.prior.w", "draw.prior.b");
    const Var<T> z = run.sample(mp, lvp, derive_seed(seed, {static_cast<std::uint64_t>(m)}));
    const Var<T> gates =
        ops::add(gen_static, ops::conv2d(ops::concat_channels<T>({z, h_g}), run.p("draw.gen.wh"), 1, pad));
    std::tie(h_g, c_g) = detail::lstm_update(gates, c_g, h);
    canvas = ops::add(canvas, ops::conv_transpose2d(h_g, run.p("draw.up.w"), run.p("draw.up.b"), 4));
  }
  return ops::sigmoid(ops::conv2d(canvas, run.p("draw.out.w"), run.p("draw.out.b")));
}

namespace detail {
template <class T>
Tensor<T> as_batch(const Tensor<T>& t, int rank) {
  if (t.rank() == rank) return t;
  if (t.rank() == rank - 1) {
    std::vector<int> s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    return t.reshaped(s);
  }
  throw ShapeError("unexpected tensor rank for " + shape_str(t.shape()));
}
template <class T>
Tensor<T> poses_tensor(const std::vector<PoseEncoded>& poses) {
  Tensor<T> out({static_cast<int>(poses.size()), kPoseDim});
  for (std::size_t i = 0; i < poses.size(); ++i)
    for (int j = 0; j < kPoseDim; ++j) out[i * kPoseDim + j] = static_cast<T>(poses[i][j]);
  return out;
}
}  // namespace detail

/// Value-level ELBO pass. r: [C_r,S,S] or [N,C_r,S,S]; x_gt: [3,H,W] or [N,3,H,W].
template <class T>
ElboTerms<T> elbo_forward(DrawParams<T>& draw, const Tensor<T>& r, const std::vector<PoseEncoded>& query_poses,
                          const Tensor<T>& x_gt, int steps, double sigma, std::uint64_t seed,
                          const ElboOptions& opt = {}) {
  Tape<T> tape(false);
  const auto g = draw_elbo(tape, draw, tape.constant(detail::as_batch(r, 4)), detail::poses_tensor<T>(query_poses),
                           detail::as_batch(x_gt, 4), steps, sigma, seed, opt);
  return {static_cast<double>(g.nll.value()[0]), g.kl_per_step, g.reconstruction.value()};
}

template <class T>
Tensor<T> generate(DrawParams<T>& draw, const Tensor<T>& r, const std::vector<PoseEncoded>& query_poses, int steps,
                   std::uint64_t seed) {
  if (steps < 1) throw std::invalid_argument("decoder needs at least one step");
  Tape<T> tape(false);
  return draw_generate(tape, draw, tape.constant(detail::as_batch(r, 4)), detail::poses_tensor<T>(query_poses), steps,
                       seed)
      .value();
}

}  // namespace gaqn
