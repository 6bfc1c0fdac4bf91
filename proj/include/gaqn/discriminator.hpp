#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gaqn/dataset.hpp"
#include "gaqn/ops.hpp"
#include "gaqn/repr_net.hpp"

namespace gaqn {

/// Residual patch discriminator. widths = {stem, block1..block4, head}; the default is
/// 32 -> 64 -> 128 -> 256 -> 512 -> 1024, taking 64x64x3 down to a 2x2 score map.
struct DiscConfig {
  int image_size = kImageSize;
  std::array<int, 6> widths{32, 64, 128, 256, 512, 1024};
  // Index of the residual block whose output feeds feature matching (the 128-wide one).
  int feature_block = 1;

  int feature_dim() const { return widths[static_cast<std::size_t>(feature_block) + 1]; }
  bool operator==(const DiscConfig&) const = default;
};

template <class T>
struct DiscParams {
  DiscConfig cfg;
  ParameterSet<T> params;
};

template <class T>
struct DiscOutput {
  Var<T> logits;    // [N,1,S,S] patch scores; invalid when stopped at the features
  Var<T> features;  // [N,F] spatial mean of the feature block
  std::vector<std::vector<int>> activation_shapes;  // per layer, [C,H,W]
};

template <class T>
DiscParams<T> init_discriminator(std::uint64_t seed, const DiscConfig& cfg = {}) {
  if (cfg.image_size < 32 || cfg.image_size % 32 != 0)
    throw std::invalid_argument("discriminator image size must be a multiple of 32");
  DiscParams<T> d;
  d.cfg = cfg;
  Rng rng(derive_seed(seed, {0xd15c}));
  auto& ps = d.params;
  const auto& w = cfg.widths;
  detail::add_conv(ps, "disc.stem", w[0], kChannels, 2, rng);
  for (int b = 0; b < 4; ++b) {
    const int cin = w[static_cast<std::size_t>(b)], cout = w[static_cast<std::size_t>(b) + 1];
    const std::string n = "disc.block" + std::to_string(b + 1);
    detail::add_conv(ps, n + ".conv1", cout, cin, 3, rng);
    detail::add_conv(ps, n + ".conv2", cout, cout, 3, rng);
    detail::add_conv(ps, n + ".skip", cout, cin, 1, rng);
  }
  detail::add_conv(ps, "disc.head", w[5], w[4], 1, rng);
  detail::add_conv(ps, "disc.score", 1, w[5], 1, rng);
  return d;
}

/// Spatial mean of an [N,C,H,W] activation map, as [N,C].
template <class T>
Tensor<T> feature_mean_of(const Tensor<T>& activation) {
  Tape<T> tape(false);
  return ops::spatial_mean(tape.constant(activation)).value();
}

/// Forward pass on x: [N,3,H,W]. With `features_only`, evaluation stops after the feature block.
template <class T>
DiscOutput<T> discriminator_forward(Tape<T>& tape, DiscParams<T>& d, const Var<T>& x, bool features_only = false) {
  const auto& c = d.cfg;
  if (x.value().rank() != 4 || x.dim(1) != kChannels || x.dim(2) != c.image_size || x.dim(3) != c.image_size)
    throw ShapeError("discriminator input " + shape_str(x.shape()) + ", expected [N,3," +
                     std::to_string(c.image_size) + "," + std::to_string(c.image_size) + "]");
  auto& ps = d.params;
  using detail::conv;
  DiscOutput<T> out;
  auto note = [&](const Var<T>& v) { out.activation_shapes.push_back({v.dim(1), v.dim(2), v.dim(3)}); };
  Var<T> h = ops::relu(conv(tape, ps, "disc.stem", x, 2, 0));
  note(h);
  for (int b = 0; b < 4; ++b) {
    const std::string n = "disc.block" + std::to_string(b + 1);
    // main: conv3x3 -> ReLU -> avgpool -> conv3x3; skip: avgpool -> conv1x1
    Var<T> main = ops::relu(conv(tape, ps, n + ".conv1", h, 1, 1));
    main = conv(tape, ps, n + ".conv2", ops::avg_pool2(main), 1, 1);
    const Var<T> skip = conv(tape, ps, n + ".skip", ops::avg_pool2(h), 1, 0);
    h = ops::relu(ops::add(main, skip));
    note(h);
    if (b == c.feature_block) {
      out.features = ops::spatial_mean(h);
      if (features_only) return out;
    }
  }
  h = ops::relu(conv(tape, ps, "disc.head", h, 1, 0));
  note(h);
  out.logits = conv(tape, ps, "disc.score", h, 1, 0);
  return out;
}

/// Patch logits [N,1,2,2] and the per-layer activation shapes for frames [N,3,H,W] or [3,H,W].
template <class T>
std::pair<Tensor<T>, std::vector<std::vector<int>>> discriminate(DiscParams<T>& d, const Tensor<T>& x) {
  Tape<T> tape(false);
  auto out = discriminator_forward(tape, d, tape.constant(x.rank() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x));
  return {out.logits.value(), out.activation_shapes};
}

/// [N,F] feature means for frames [N,3,H,W] or [3,H,W].
template <class T>
Tensor<T> extract_feature_mean(DiscParams<T>& d, const Tensor<T>& x) {
  Tape<T> tape(false);
  auto out = discriminator_forward(tape, d, tape.constant(x.rank() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x),
                                   true);
  return out.features.value();
}

}  // namespace gaqn
