#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "gaqn/dataset.hpp"
#include "gaqn/trainer.hpp"

namespace gaqn {

inline constexpr char kCheckpointMagic[8] = {'G', 'A', 'Q', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

inline void put_array(std::vector<std::uint8_t>& out, const std::string& name, const Tensor<float>& t) {
  put_str(out, name);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (float v : t.storage()) put_f32(out, v);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  const std::uint8_t* take(std::size_t n) {
    if (n > b_.size() - pos_) throw CheckpointError("checkpoint truncated");
    const std::uint8_t* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() { return get_u32(take(4)); }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    return lo | (static_cast<std::uint64_t>(u32()) << 32);
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

// Every named float array held by a state, in serialisation order.
inline std::vector<std::pair<std::string, Tensor<float>*>> state_arrays(TrainState& s) {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  for (ParameterSet<float>* ps : {&s.enc.params, &s.draw.params, &s.disc.params})
    for (auto& p : *ps) out.emplace_back(p.name, &p.value);
  for (auto& [tag, opt] : std::vector<std::pair<std::string, Adam<float>*>>{{"adam.g", &s.opt_g}, {"adam.d", &s.opt_d}})
    for (auto& [name, mo] : opt->moments()) {
      out.emplace_back(tag + ".m/" + name, &mo.m);
      out.emplace_back(tag + ".v/" + name, &mo.v);
    }
  return out;
}

}  // namespace detail

/// Serialises the full training state, ending in a CRC-32 of all preceding bytes.
inline std::vector<std::uint8_t> encode_checkpoint(TrainState& s) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, config_hash(s.cfg));
  detail::put_str(out, to_text(s.cfg));
  detail::put_u64(out, static_cast<std::uint64_t>(s.step));
  detail::put_u64(out, s.cfg.seed);
  detail::put_u64(out, static_cast<std::uint64_t>(s.opt_g.steps_taken()));
  detail::put_u64(out, static_cast<std::uint64_t>(s.opt_d.steps_taken()));
  detail::put_u32(out, static_cast<std::uint32_t>(s.recent_elbo.size()));
  for (double v : s.recent_elbo) detail::put_f64(out, v);
  const auto arrays = detail::state_arrays(s);
  detail::put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, t] : arrays) detail::put_array(out, name, *t);
  detail::put_u32(out, detail::crc32_of(out));
  return out;
}

inline std::uint32_t save_checkpoint(TrainState& s, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(s);
  detail::write_file(path, bytes);
  return detail::get_u32(bytes.data() + bytes.size() - 4);
}

/// Rebuilds a state from bytes. When `expected` is given its hash must match the stored one.
inline TrainState decode_checkpoint(std::span<const std::uint8_t> bytes, const TrainConfig* expected = nullptr) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  const std::uint32_t stored_crc = detail::get_u32(bytes.data() + bytes.size() - 4);
  if (stored_crc != detail::crc32_of(bytes.first(bytes.size() - 4)))
    throw CheckpointError("checkpoint checksum mismatch");
  detail::Reader rd(bytes.first(bytes.size() - 4));
  rd.take(8);
  const std::uint32_t version = rd.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t hash = rd.u64();
  TrainConfig cfg;
  try {
    cfg = config_from_text(rd.str());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint config unreadable: ") + e.what());
  }
  if (config_hash(cfg) != hash) throw CheckpointError("checkpoint config hash does not match its config text");
  if (expected && config_hash(*expected) != hash)
    throw CheckpointError("config hash mismatch: checkpoint was written by a different model/optimiser config");

  TrainState s = init_state(cfg);
  s.step = static_cast<std::int64_t>(rd.u64());
  if (rd.u64() != cfg.seed) throw CheckpointError("checkpoint rng seed disagrees with its config");
  s.opt_g.set_steps_taken(static_cast<std::int64_t>(rd.u64()));
  s.opt_d.set_steps_taken(static_cast<std::int64_t>(rd.u64()));
  const std::uint32_t n_recent = rd.u32();
  for (std::uint32_t i = 0; i < n_recent; ++i) s.recent_elbo.push_back(rd.f64());

  auto arrays = detail::state_arrays(s);
  const std::uint32_t n = rd.u32();
  if (n != arrays.size())
    throw CheckpointError("checkpoint holds " + std::to_string(n) + " arrays, model needs " +
                          std::to_string(arrays.size()));
  std::map<std::string, Tensor<float>*> by_name(arrays.begin(), arrays.end());
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = rd.str();
    auto it = by_name.find(name);
    if (it == by_name.end() || !seen.insert(name).second)
      throw CheckpointError("unexpected array in checkpoint: " + name);
    const std::uint32_t rank = rd.u32();
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(rd.u32());
    Tensor<float>& dst = *it->second;
    if (shape != dst.shape())
      throw CheckpointError("array " + name + " has shape " + shape_str(shape) + ", model expects " +
                            shape_str(dst.shape()));
    const std::uint8_t* p = rd.take(dst.size() * 4);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = detail::get_f32(p + 4 * j);
  }
  if (rd.pos() != bytes.size() - 4) throw CheckpointError("trailing bytes in checkpoint");
  return s;
}

inline TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig* expected = nullptr) {
  const auto bytes = detail::read_file(path);
  try {
    return decode_checkpoint(bytes, expected);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace gaqn
