#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gaqn/adam.hpp"
#include "gaqn/dataset.hpp"
#include "gaqn/discriminator.hpp"
#include "gaqn/draw_core.hpp"
#include "gaqn/losses.hpp"
#include "gaqn/repr_net.hpp"

namespace gaqn {

enum class Mode { gqn, gqn_gan, gqn_lsgan, gaqn };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::gqn: return "gqn";
    case Mode::gqn_gan: return "gqn-gan";
    case Mode::gqn_lsgan: return "gqn-lsgan";
    case Mode::gaqn: return "gaqn";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "gqn") return Mode::gqn;
  if (s == "gqn-gan") return Mode::gqn_gan;
  if (s == "gqn-lsgan") return Mode::gqn_lsgan;
  if (s == "gaqn") return Mode::gaqn;
  throw std::invalid_argument("unknown mode: " + s);
}

inline AdversarialLoss adversarial_kind(Mode m) {
  switch (m) {
    case Mode::gqn: return AdversarialLoss::none;
    case Mode::gqn_gan: return AdversarialLoss::vanilla;
    case Mode::gqn_lsgan: return AdversarialLoss::least_squares;
    case Mode::gaqn: return AdversarialLoss::least_squares_fm;
  }
  return AdversarialLoss::none;
}

struct ModelConfig {
  EncoderConfig encoder;
  DrawConfig draw;
  DiscConfig disc;
};

struct TrainConfig {
  Mode mode = Mode::gaqn;
  std::int64_t steps = 1000;
  int batch_size = 20;
  double lr_g = 1e-4;
  double lr_d = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  SigmaSchedule sigma;
  LossWeights weights;
  int max_context = 4;
  // Discriminator updates per generator update.
  int d_steps = 1;
  // Global gradient-norm clip per parameter set; 0 disables.
  double grad_clip = 0;
  // Adversarial and feature-matching terms are inactive before this step.
  std::int64_t adv_warmup = 0;
  std::int64_t checkpoint_every = 0;
  ModelConfig model;

  int gen_layers() const { return model.draw.steps; }
};

/// Full-scale defaults: 8 generation steps, batch 20, TTUR learning rates.
inline TrainConfig full_preset() { return {}; }

/// Reduced configuration for a single CPU: 4 steps, batch 4, 32 hidden channels.
inline TrainConfig desk_preset() {
  TrainConfig c;
  c.batch_size = 4;
  c.model.draw.steps = 4;
  c.model.draw.hidden = 32;
  c.model.draw.canvas_channels = 32;
  return c;
}

inline void validate(const TrainConfig& c) {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("invalid training config: ") + what);
  };
  need(c.lr_g > 0 && c.lr_d > 0, "learning rates must be positive");
  need(c.batch_size >= 1, "batch_size must be >= 1");
  need(c.steps >= 0, "steps must be >= 0");
  need(c.model.draw.steps >= 1, "gen_layers must be >= 1");
  need(c.max_context >= 1, "max_context must be >= 1");
  need(c.d_steps >= 1, "d_steps must be >= 1");
  need(c.grad_clip >= 0, "grad_clip must be >= 0");
  need(c.sigma.initial > 0 && c.sigma.final > 0, "sigma must be positive");
  need(c.model.encoder.image_size == c.model.draw.image_size && c.model.draw.image_size == c.model.disc.image_size,
       "image sizes of encoder, decoder and discriminator differ");
  need(c.model.encoder.repr_channels == c.model.draw.repr_channels, "representation widths differ");
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad number: " + s);
  return v;
}

template <class I>
I parse_int(const std::string& s) {
  I v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad integer: " + s);
  return v;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Ordered key/value view of a config. Run-length and output settings come last and are
// excluded from the hash.
inline std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& c, bool with_run) {
  std::vector<std::pair<std::string, std::string>> e;
  const auto& m = c.model;
  std::string widths;
  for (std::size_t i = 0; i < m.disc.widths.size(); ++i) widths += (i ? "," : "") + std::to_string(m.disc.widths[i]);
  e = {{"mode", to_string(c.mode)},
       {"batch_size", std::to_string(c.batch_size)},
       {"gen_layers", std::to_string(m.draw.steps)},
       {"lr_g", fmt_double(c.lr_g)},
       {"lr_d", fmt_double(c.lr_d)},
       {"adam_beta1", fmt_double(c.beta1)},
       {"adam_beta2", fmt_double(c.beta2)},
       {"adam_eps", fmt_double(c.eps)},
       {"seed", std::to_string(c.seed)},
       {"sigma_initial", fmt_double(c.sigma.initial)},
       {"sigma_final", fmt_double(c.sigma.final)},
       {"sigma_anneal_steps", std::to_string(c.sigma.anneal_steps)},
       {"lambda_adv", fmt_double(c.weights.adversarial)},
       {"lambda_fm", fmt_double(c.weights.feature_matching)},
       {"max_context", std::to_string(c.max_context)},
       {"d_steps", std::to_string(c.d_steps)},
       {"grad_clip", fmt_double(c.grad_clip)},
       {"adv_warmup", std::to_string(c.adv_warmup)},
       {"image_size", std::to_string(m.draw.image_size)},
       {"enc_stem_channels", std::to_string(m.encoder.stem_channels)},
       {"enc_channels", std::to_string(m.encoder.channels)},
       {"repr_channels", std::to_string(m.encoder.repr_channels)},
       {"hidden", std::to_string(m.draw.hidden)},
       {"latent", std::to_string(m.draw.latent)},
       {"canvas_channels", std::to_string(m.draw.canvas_channels)},
       {"kernel", std::to_string(m.draw.kernel)},
       {"disc_widths", widths},
       {"disc_feature_block", std::to_string(m.disc.feature_block)}};
  if (with_run) {
    e.emplace_back("steps", std::to_string(c.steps));
    e.emplace_back("checkpoint_every", std::to_string(c.checkpoint_every));
  }
  return e;
}

}  // namespace detail

/// One `key=value` per line, in a fixed order.
inline std::string to_text(const TrainConfig& c) {
  std::string s;
  for (const auto& [k, v] : detail::config_entries(c, true)) s += k + "=" + v + "\n";
  return s;
}

inline TrainConfig config_from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("malformed config line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw std::invalid_argument(std::string("config key missing: ") + k);
    return it->second;
  };
  using detail::parse_double;
  using detail::parse_int;
  TrainConfig c;
  c.mode = parse_mode(get("mode"));
  c.batch_size = parse_int<int>(get("batch_size"));
  c.model.draw.steps = parse_int<int>(get("gen_layers"));
  c.lr_g = parse_double(get("lr_g"));
  c.lr_d = parse_double(get("lr_d"));
  c.beta1 = parse_double(get("adam_beta1"));
  c.beta2 = parse_double(get("adam_beta2"));
  c.eps = parse_double(get("adam_eps"));
  c.seed = parse_int<std::uint64_t>(get("seed"));
  c.sigma.initial = parse_double(get("sigma_initial"));
  c.sigma.final = parse_double(get("sigma_final"));
  c.sigma.anneal_steps = parse_int<std::int64_t>(get("sigma_anneal_steps"));
  c.weights.adversarial = parse_double(get("lambda_adv"));
  c.weights.feature_matching = parse_double(get("lambda_fm"));
  c.max_context = parse_int<int>(get("max_context"));
  c.d_steps = parse_int<int>(get("d_steps"));
  c.grad_clip = parse_double(get("grad_clip"));
  c.adv_warmup = parse_int<std::int64_t>(get("adv_warmup"));
  const int size = parse_int<int>(get("image_size"));
  c.model.encoder.image_size = c.model.draw.image_size = c.model.disc.image_size = size;
  c.model.encoder.stem_channels = parse_int<int>(get("enc_stem_channels"));
  c.model.encoder.channels = parse_int<int>(get("enc_channels"));
  c.model.encoder.repr_channels = c.model.draw.repr_channels = parse_int<int>(get("repr_channels"));
  c.model.draw.hidden = parse_int<int>(get("hidden"));
  c.model.draw.latent = parse_int<int>(get("latent"));
  c.model.draw.canvas_channels = parse_int<int>(get("canvas_channels"));
  c.model.draw.kernel = parse_int<int>(get("kernel"));
  {
    std::istringstream ws(get("disc_widths"));
    std::string tok;
    std::size_t i = 0;
    while (std::getline(ws, tok, ',')) {
      if (i >= c.model.disc.widths.size()) throw std::invalid_argument("too many disc_widths");
      c.model.disc.widths[i++] = parse_int<int>(tok);
    }
    if (i != c.model.disc.widths.size()) throw std::invalid_argument("disc_widths needs 6 entries");
  }
  c.model.disc.feature_block = parse_int<int>(get("disc_feature_block"));
  c.steps = parse_int<std::int64_t>(get("steps"));
  c.checkpoint_every = parse_int<std::int64_t>(get("checkpoint_every"));
  return c;
}

/// Hash of everything that determines the model and its optimisation trajectory.
inline std::uint64_t config_hash(const TrainConfig& c) {
  std::string s;
  for (const auto& [k, v] : detail::config_entries(c, false)) s += k + "=" + v + "\n";
  return detail::fnv1a(s);
}

/// Parameters, optimiser moments and counters of a training run.
struct TrainState {
  TrainConfig cfg;
  EncoderParams<float> enc;
  DrawParams<float> draw;
  DiscParams<float> disc;
  Adam<float> opt_g;
  Adam<float> opt_d;
  std::int64_t step = 0;
  // ELBO of the most recent steps (at most kRecentWindow), reported as the training loss.
  std::deque<double> recent_elbo;

  static constexpr std::size_t kRecentWindow = 100;

  double train_loss() const {
    if (recent_elbo.empty()) return 0;
    double s = 0;
    for (double v : recent_elbo) s += v;
    return s / static_cast<double>(recent_elbo.size());
  }
};

inline constexpr std::uint64_t kEncoderTag = 0x656e63;
inline constexpr std::uint64_t kDecoderTag = 0x647261;
inline constexpr std::uint64_t kDiscTag = 0x646973;
inline constexpr std::uint64_t kNoiseTag = 0x6e6f69;
inline constexpr std::uint64_t kBatchTag = 0x626174;

inline TrainState init_state(const TrainConfig& cfg) {
  validate(cfg);
  TrainState s;
  s.cfg = cfg;
  s.enc = init_encoder<float>(derive_seed(cfg.seed, {kEncoderTag}), cfg.model.encoder);
  s.draw = init_draw<float>(derive_seed(cfg.seed, {kDecoderTag}), cfg.model.draw);
  s.disc = init_discriminator<float>(derive_seed(cfg.seed, {kDiscTag}), cfg.model.disc);
  s.opt_g = Adam<float>({cfg.lr_g, cfg.beta1, cfg.beta2, cfg.eps});
  s.opt_d = Adam<float>({cfg.lr_d, cfg.beta1, cfg.beta2, cfg.eps});
  s.opt_g.attach(s.enc.params);
  s.opt_g.attach(s.draw.params);
  s.opt_d.attach(s.disc.params);
  return s;
}

/// Optional probes filled by train_step.
struct StepDiagnostics {
  // Largest absolute change of any encoder gradient caused by the adversarial pass.
  double encoder_adv_grad = 0;
  bool skipped = false;
};

namespace detail {

inline void clip_gradients(ParameterSet<float>& ps, double max_norm) {
  if (max_norm <= 0) return;
  double sq = 0;
  for (const auto& p : ps)
    for (float g : p.grad.storage()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const float f = static_cast<float>(max_norm / norm);
  for (auto& p : ps)
    for (float& g : p.grad.storage()) g *= f;
}

inline bool finite(double v) { return std::isfinite(v); }

}  // namespace detail

/// One optimisation step: discriminator update (adversarial modes), then a single
/// generator update. The encoder and decoder train on the ELBO; the decoder additionally
/// receives the adversarial and feature-matching gradients, which are stopped at the
/// scene representation.
inline LossReport train_step(TrainState& s, const Batch& batch, StepDiagnostics* diag = nullptr) {
  const TrainConfig& cfg = s.cfg;
  const std::int64_t k = s.step;
  const int b = batch.batch_size;
  const double sigma = sigma_schedule(k, cfg.sigma);
  const std::uint64_t noise_seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(k), kNoiseTag});
  const AdversarialLoss kind = k < cfg.adv_warmup ? AdversarialLoss::none : adversarial_kind(cfg.mode);
  const bool adversarial = kind != AdversarialLoss::none;
  const bool skip_bad = cfg.mode == Mode::gqn_gan;

  LossReport rep;
  rep.step = k + 1;
  rep.sigma = sigma;
  auto fail = [&](const char* what) {
    if (skip_bad) {
      if (diag) diag->skipped = true;
      s.step += 1;
      return true;
    }
    throw NonFiniteLoss(std::string("non-finite ") + what, rep);
  };

  s.enc.params.zero_grad();
  s.draw.params.zero_grad();
  s.disc.params.zero_grad();
  s.disc.params.set_trainable(false);

  Tape<float> tape;
  const Var<float> maps = encode_views(tape, s.enc, tape.constant(batch.context_frames), batch.context_poses);
  const Var<float> r = aggregate_context(maps, batch.owner, b);
  const DrawGraph<float> g =
      draw_elbo(tape, s.draw, r, batch.query_poses, batch.targets, cfg.model.draw.steps, sigma, noise_seed);
  rep.nll = g.nll.value()[0];
  rep.kl_total = g.kl.value()[0];
  rep.elbo = g.elbo.value()[0];
  if (!detail::finite(rep.elbo) && fail("elbo")) return rep;

  if (adversarial) {
    s.disc.params.set_trainable(true);
    const Tensor<float> pair[] = {batch.targets, g.reconstruction.value()};
    const Tensor<float> both = concat_rows<float>(pair);
    for (int i = 0; i < cfg.d_steps; ++i) {
      s.disc.params.zero_grad();
      Tape<float> dt;
      const DiscOutput<float> out = discriminator_forward(dt, s.disc, dt.constant(both));
      const Var<float> real = ops::slice_rows(out.logits, 0, b);
      const Var<float> fake = ops::slice_rows(out.logits, b, b);
      const Var<float> loss =
          kind == AdversarialLoss::vanilla ? ops::vanilla_gan_d(real, fake) : ops::lsgan_d(real, fake);
      const double v = loss.value()[0];
      (kind == AdversarialLoss::vanilla ? rep.gan_d : rep.lsgan_d) = v;
      rep.total_discriminator = v;
      if (!detail::finite(v) && fail("discriminator loss")) {
        s.disc.params.set_trainable(false);
        return rep;
      }
      dt.backward(loss);
      detail::clip_gradients(s.disc.params, cfg.grad_clip);
      s.opt_d.step({&s.disc.params});
    }
    s.disc.params.set_trainable(false);
  }

  tape.backward(g.elbo);

  if (adversarial) {
    std::vector<Tensor<float>> enc_before;
    if (diag)
      for (const auto& p : s.enc.params) enc_before.push_back(p.grad);

    const DiscOutput<float> fake = discriminator_forward(tape, s.disc, g.reconstruction);
    std::vector<Var<float>> terms;
    std::vector<float> weights;
    const Var<float> adv = kind == AdversarialLoss::vanilla ? ops::vanilla_gan_g(fake.logits) : ops::lsgan_g(fake.logits);
    (kind == AdversarialLoss::vanilla ? rep.gan_g : rep.lsgan_g) = adv.value()[0];
    terms.push_back(adv);
    weights.push_back(static_cast<float>(cfg.weights.adversarial));
    if (kind == AdversarialLoss::least_squares_fm) {
      Tape<float> rt(false);
      const Tensor<float> f_real = discriminator_forward(rt, s.disc, rt.constant(batch.targets), true).features.value();
      const Var<float> fm = ops::fm_loss(tape.constant(f_real), fake.features);
      rep.fm = fm.value()[0];
      terms.push_back(fm);
      weights.push_back(static_cast<float>(cfg.weights.feature_matching));
    }
    const Var<float> loss_g = ops::weighted_sum(terms, weights);
    rep.total_generator = loss_g.value()[0];
    if (!detail::finite(rep.total_generator) && fail("generator loss")) return rep;
    tape.clear_grads();
    tape.block(r);
    tape.backward(loss_g);

    if (diag) {
      double worst = 0;
      std::size_t i = 0;
      for (const auto& p : s.enc.params) {
        const Tensor<float>& before = enc_before[i++];
        for (std::size_t j = 0; j < p.grad.size(); ++j)
          worst = std::max(worst, std::abs(static_cast<double>(p.grad[j]) - before[j]));
      }
      diag->encoder_adv_grad = worst;
    }
  }

  detail::clip_gradients(s.enc.params, cfg.grad_clip);
  detail::clip_gradients(s.draw.params, cfg.grad_clip);
  s.opt_g.step({&s.enc.params, &s.draw.params});
  s.step += 1;
  s.recent_elbo.push_back(rep.elbo);
  while (s.recent_elbo.size() > TrainState::kRecentWindow) s.recent_elbo.pop_front();
  return rep;
}

using LossHistory = std::vector<LossReport>;

inline Batch training_batch(const TrainState& s, std::span<const SceneRecord> data) {
  if (data.empty()) throw std::invalid_argument("training dataset is empty");
  const int k = static_cast<int>(data[0].views.size());
  SampleOptions opt;
  opt.max_context = std::min(s.cfg.max_context, k - 1);
  return sample_batch(data, s.cfg.batch_size, derive_seed(s.cfg.seed, {static_cast<std::uint64_t>(s.step), kBatchTag}),
                      opt);
}

struct LoopHooks {
  std::function<void(const LossReport&)> on_step;
  std::function<void(TrainState&)> on_checkpoint;
};

/// Runs steps until `state.step == until`. Errors are rethrown with the failing step.
inline LossHistory continue_training(TrainState& s, std::span<const SceneRecord> data, std::int64_t until,
                                     const LoopHooks& hooks = {}) {
  if (data.empty()) throw std::invalid_argument("training dataset is empty");
  const int size = data[0].views.at(0).frame.dim(1);
  if (size != s.cfg.model.draw.image_size)
    throw std::invalid_argument("dataset frames are " + std::to_string(size) + " px but the model expects " +
                                std::to_string(s.cfg.model.draw.image_size));
  LossHistory history;
  while (s.step < until) {
    const std::int64_t at = s.step + 1;
    try {
      history.push_back(train_step(s, training_batch(s, data)));
    } catch (const NonFiniteLoss& e) {
      throw NonFiniteLoss("step " + std::to_string(at) + ": " + e.what(), e.report());
    } catch (const std::exception& e) {
      throw std::runtime_error("step " + std::to_string(at) + ": " + e.what());
    }
    if (hooks.on_step) hooks.on_step(history.back());
    if (hooks.on_checkpoint && s.cfg.checkpoint_every > 0 && s.step % s.cfg.checkpoint_every == 0)
      hooks.on_checkpoint(s);
  }
  return history;
}

struct TrainResult {
  TrainState state;
  LossHistory history;
};

inline TrainResult train_loop(const TrainConfig& cfg, std::span<const SceneRecord> data, const LoopHooks& hooks = {}) {
  if (data.empty()) throw std::invalid_argument("training dataset is empty");
  TrainResult out{init_state(cfg), {}};
  out.history = continue_training(out.state, data, cfg.steps, hooks);
  return out;
}

}  // namespace gaqn
