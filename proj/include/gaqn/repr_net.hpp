#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gaqn/dataset.hpp"
#include "gaqn/ops.hpp"

namespace gaqn {

/// Tower encoder: two stride-2 stems to a quarter-resolution grid, a residual stage,
/// channel-wise concatenation of the broadcast pose, a second residual stage and a 1x1
/// projection to `repr_channels`.
struct EncoderConfig {
  int image_size = kImageSize;
  int stem_channels = 32;
  int channels = 64;
  int repr_channels = 64;

  int grid() const { return image_size / 4; }
  bool operator==(const EncoderConfig&) const = default;
};

template <class T>
struct EncoderParams {
  EncoderConfig cfg;
  ParameterSet<T> params;
};

namespace detail {

template <class T>
void add_conv(ParameterSet<T>& ps, const std::string& name, int cout, int cin, int k, Rng& rng) {
  ps.add(name + ".w", {cout, cin, k, k}, cin * k * k, rng);
  ps.add(name + ".b", {cout}, cin * k * k, rng);
}

template <class T>
Var<T> conv(Tape<T>& tape, ParameterSet<T>& ps, const std::string& name, const Var<T>& x, int stride, int pad) {
  return ops::conv2d(x, tape.param(ps[name + ".w"]), tape.param(ps[name + ".b"]), stride, pad);
}

/// Broadcasts [N,D] vectors onto an [N,D,S,S] grid.
template <class T>
Tensor<T> broadcast_grid(const Tensor<T>& v, int size) {
  const int n = v.dim(0), d = v.dim(1);
  Tensor<T> out({n, d, size, size});
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      T* p = out.data() + (static_cast<std::size_t>(i) * d + j) * plane;
      std::fill(p, p + plane, v[static_cast<std::size_t>(i) * d + j]);
    }
  return out;
}

}  // namespace detail

template <class T>
EncoderParams<T> init_encoder(std::uint64_t seed, const EncoderConfig& cfg = {}) {
  if (cfg.image_size % 4 != 0 || cfg.image_size < 4) throw std::invalid_argument("encoder image size must be a multiple of 4");
  EncoderParams<T> p;
  p.cfg = cfg;
  Rng rng(derive_seed(seed, {0xe4c0de}));
  auto& ps = p.params;
  detail::add_conv(ps, "enc.stem1", cfg.stem_channels, kChannels, 2, rng);
  detail::add_conv(ps, "enc.stem2", cfg.channels, cfg.stem_channels, 2, rng);
  detail::add_conv(ps, "enc.res1a", cfg.channels, cfg.channels, 3, rng);
  detail::add_conv(ps, "enc.res1b", cfg.channels, cfg.channels, 3, rng);
  detail::add_conv(ps, "enc.pose", cfg.channels, cfg.channels + kPoseDim, 3, rng);
  detail::add_conv(ps, "enc.res2a", cfg.channels, cfg.channels, 3, rng);
  detail::add_conv(ps, "enc.res2b", cfg.channels, cfg.channels, 3, rng);
  detail::add_conv(ps, "enc.out", cfg.repr_channels, cfg.channels, 1, rng);
  return p;
}

/// Encodes a stack of views. frames: [V,3,H,W]; poses: [V,7] encoded. Returns [V,C_r,S,S].
template <class T>
Var<T> encode_views(Tape<T>& tape, EncoderParams<T>& enc, const Var<T>& frames, const Tensor<T>& poses) {
  const auto& c = enc.cfg;
  if (frames.value().rank() != 4 || frames.dim(1) != kChannels || frames.dim(2) != c.image_size ||
      frames.dim(3) != c.image_size)
    throw ShapeError("encoder input " + shape_str(frames.shape()) + " does not match image size " +
                     std::to_string(c.image_size));
  if (poses.rank() != 2 || poses.dim(0) != frames.dim(0) || poses.dim(1) != kPoseDim)
    throw ShapeError("encoder poses " + shape_str(poses.shape()) + " do not match frames");
  auto& ps = enc.params;
  using detail::conv;
  Var<T> h = ops::relu(conv(tape, ps, "enc.stem1", frames, 2, 0));
  h = ops::relu(conv(tape, ps, "enc.stem2", h, 2, 0));
  Var<T> r = ops::relu(conv(tape, ps, "enc.res1a", h, 1, 1));
  h = ops::relu(ops::add(h, conv(tape, ps, "enc.res1b", r, 1, 1)));
  const Var<T> pose = tape.constant(detail::broadcast_grid(poses, c.grid()));
  h = ops::relu(conv(tape, ps, "enc.pose", ops::concat_channels<T>({h, pose}), 1, 1));
  r = ops::relu(conv(tape, ps, "enc.res2a", h, 1, 1));
  h = ops::relu(ops::add(h, conv(tape, ps, "enc.res2b", r, 1, 1)));
  return conv(tape, ps, "enc.out", h, 1, 0);
}

/// Element-wise sum of per-view maps into one representation per batch element.
/// Elements that own no view receive the zero map.
template <class T>
Var<T> aggregate_context(const Var<T>& view_maps, const std::vector<int>& owner, int batch_size) {
  return ops::segment_sum(view_maps, owner, batch_size);
}

/// Single-view convenience: frame [3,H,W], pose encoded. Returns [C_r,S,S].
template <class T>
Tensor<T> encode_view(EncoderParams<T>& enc, const Tensor<T>& frame, const PoseEncoded& pose) {
  Tape<T> tape(false);
  if (frame.rank() != 3) throw ShapeError("encode_view expects a [3,H,W] frame, got " + shape_str(frame.shape()));
  Tensor<T> poses({1, kPoseDim});
  for (int i = 0; i < kPoseDim; ++i) poses[i] = static_cast<T>(pose[i]);
  std::vector<int> s{1};
  s.insert(s.end(), frame.shape().begin(), frame.shape().end());
  const Var<T> out = encode_views(tape, enc, tape.constant(frame.reshaped(s)), poses);
  const auto& o = out.value();
  return o.reshaped({o.dim(1), o.dim(2), o.dim(3)});
}

/// Sums a list of equally shaped maps; the empty list yields a zero map of `shape`.
/// Each element is accumulated in ascending order so the result does not depend on the
/// order of the list.
template <class T>
Tensor<T> aggregate_context(std::span<const Tensor<T>> maps, const std::vector<int>& shape) {
  Tensor<T> out(shape);
  for (const auto& m : maps)
    if (m.shape() != shape) throw ShapeError("aggregate_context: map " + shape_str(m.shape()) + " vs " + shape_str(shape));
  std::vector<T> vals(maps.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t j = 0; j < maps.size(); ++j) vals[j] = maps[j][i];
    std::sort(vals.begin(), vals.end());
    double s = 0;
    for (T v : vals) s += static_cast<double>(v);
    out[i] = static_cast<T>(s);
  }
  return out;
}

}  // namespace gaqn
