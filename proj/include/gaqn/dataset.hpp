#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gaqn/rng.hpp"
#include "gaqn/tensor.hpp"

namespace gaqn {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raw camera pose: position in room units, yaw in [-pi, pi), pitch in [-pi/2, pi/2].
struct PoseRaw {
  float x = 0, y = 0, z = 0;
  float yaw = 0, pitch = 0;
  bool operator==(const PoseRaw&) const = default;
};

inline constexpr int kPoseDim = 7;
using PoseEncoded = std::array<float, kPoseDim>;

/// (x, y, z, sin yaw, cos yaw, sin pitch, cos pitch)
inline PoseEncoded encode_pose(const PoseRaw& p) {
  const double yaw = p.yaw, pitch = p.pitch;
  return {p.x, p.y, p.z, static_cast<float>(std::sin(yaw)), static_cast<float>(std::cos(yaw)),
          static_cast<float>(std::sin(pitch)), static_cast<float>(std::cos(pitch))};
}

/// An RGB image stored channel-major as a [3, H, W] tensor with values in [0, 1].
using Frame = Tensor<float>;
inline constexpr int kChannels = 3;
inline constexpr int kImageSize = 64;

inline Frame make_frame(int size = kImageSize) { return Frame({kChannels, size, size}); }

inline void check_frame(const Frame& f, int size) {
  if (f.shape() != std::vector<int>{kChannels, size, size})
    throw ShapeError("frame shape " + shape_str(f.shape()) + ", expected " +
                     shape_str({kChannels, size, size}));
}

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

struct View {
  PoseRaw pose;
  Frame frame;
};

struct SceneRecord {
  std::vector<View> views;
};

struct DatasetSummary {
  std::uint32_t n_scenes = 0;
  std::uint32_t views_per_scene = 0;
  std::uint64_t bytes = 0;
  std::uint32_t checksum = 0;  // CRC32 of everything after the header
};

// Binary layout, little-endian:
//   "GQNDSET1" | u32 n_scenes | u32 K | u32 H | u32 W | u32 C
//   then n_scenes * K records of [5 x f32 pose (x,y,z,yaw,pitch)][H*W*C u8, row-major RGB]
inline constexpr char kDatasetMagic[8] = {'G', 'Q', 'N', 'D', 'S', 'E', 'T', '1'};
inline constexpr std::size_t kDatasetHeaderBytes = 28;
inline constexpr std::size_t kPoseBytes = 20;

inline std::size_t view_record_bytes(int size = kImageSize) {
  return kPoseBytes + static_cast<std::size_t>(size) * size * kChannels;
}

inline std::size_t dataset_file_bytes(std::size_t n_scenes, std::size_t k, int size = kImageSize) {
  return kDatasetHeaderBytes + n_scenes * k * view_record_bytes(size);
}

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}
inline void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

/// Serialises records into the dataset byte layout.
inline std::vector<std::uint8_t> encode_dataset(std::span<const SceneRecord> records) {
  if (records.empty()) throw FormatError("empty dataset");
  const std::size_t k = records[0].views.size();
  if (k < 2) throw FormatError("scenes need at least 2 views");
  if (records[0].views[0].frame.rank() != 3) throw FormatError("frame must be [3,H,W]");
  const int size = records[0].views[0].frame.dim(1);
  std::vector<std::uint8_t> out(std::begin(kDatasetMagic), std::end(kDatasetMagic));
  out.reserve(dataset_file_bytes(records.size(), k, size));
  detail::put_u32(out, static_cast<std::uint32_t>(records.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(k));
  detail::put_u32(out, static_cast<std::uint32_t>(size));
  detail::put_u32(out, static_cast<std::uint32_t>(size));
  detail::put_u32(out, kChannels);
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (std::size_t s = 0; s < records.size(); ++s) {
    if (records[s].views.size() != k)
      throw FormatError("inconsistent view count: scene " + std::to_string(s) + " has " +
                        std::to_string(records[s].views.size()) + ", expected " + std::to_string(k));
    for (const auto& v : records[s].views) {
      check_frame(v.frame, size);
      for (float f : {v.pose.x, v.pose.y, v.pose.z, v.pose.yaw, v.pose.pitch}) detail::put_f32(out, f);
      for (std::size_t px = 0; px < plane; ++px)
        for (int c = 0; c < kChannels; ++c) out.push_back(quantize(v.frame[c * plane + px]));
    }
  }
  return out;
}

/// Writes the dataset file and returns the CRC32 of its payload.
inline std::uint32_t write_dataset(std::span<const SceneRecord> records, const std::filesystem::path& path) {
  const auto bytes = encode_dataset(records);
  detail::write_file(path, bytes);
  return detail::crc32_of(std::span(bytes).subspan(kDatasetHeaderBytes));
}

inline std::vector<SceneRecord> decode_dataset(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kDatasetHeaderBytes) throw FormatError("truncated header");
  if (!std::equal(std::begin(kDatasetMagic), std::end(kDatasetMagic), bytes.begin()))
    throw FormatError("bad magic: not a GQNDSET1 dataset");
  const std::uint32_t n = detail::get_u32(&bytes[8]);
  const std::uint32_t k = detail::get_u32(&bytes[12]);
  const std::uint32_t h = detail::get_u32(&bytes[16]);
  const std::uint32_t w = detail::get_u32(&bytes[20]);
  const std::uint32_t c = detail::get_u32(&bytes[24]);
  if (c != kChannels || h != w || h == 0 || h > 4096) throw FormatError("unsupported image geometry");
  if (n == 0) throw FormatError("empty dataset");
  if (k < 2) throw FormatError("scenes need at least 2 views");
  const int size = static_cast<int>(h);
  const std::size_t rec = view_record_bytes(size);
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  std::vector<SceneRecord> out(n);
  std::size_t off = kDatasetHeaderBytes;
  for (std::uint32_t s = 0; s < n; ++s) {
    if (bytes.size() < off + k * rec)
      throw FormatError("truncated file: scene " + std::to_string(s) + " is incomplete");
    out[s].views.resize(k);
    for (std::uint32_t v = 0; v < k; ++v) {
      const std::uint8_t* p = &bytes[off];
      View& view = out[s].views[v];
      view.pose = {detail::get_f32(p), detail::get_f32(p + 4), detail::get_f32(p + 8), detail::get_f32(p + 12),
                   detail::get_f32(p + 16)};
      view.frame = make_frame(size);
      p += kPoseBytes;
      for (std::size_t px = 0; px < plane; ++px)
        for (int ch = 0; ch < kChannels; ++ch) view.frame[ch * plane + px] = static_cast<float>(p[px * 3 + ch]) / 255.0f;
      off += rec;
    }
  }
  if (off != bytes.size()) throw FormatError("trailing bytes after last scene");
  return out;
}

inline std::vector<SceneRecord> read_dataset(const std::filesystem::path& path) {
  return decode_dataset(detail::read_file(path));
}

/// Training tuples. Context views of all elements are stacked; `owner[v]` names the batch
/// element that context view v belongs to.
struct Batch {
  int batch_size = 0;
  Tensor<float> context_frames;  // [V,3,H,W]
  Tensor<float> context_poses;   // [V,7]
  std::vector<int> owner;        // [V]
  Tensor<float> query_poses;     // [B,7]
  Tensor<float> targets;         // [B,3,H,W]

  std::vector<int> scene_index;                 // [B]
  std::vector<int> query_index;                 // [B]
  std::vector<std::vector<int>> context_index;  // [B][N_b]
};

struct SampleOptions {
  int max_context = 4;
  // When positive every element gets exactly this many context views.
  int fixed_context = 0;
};

/// Explicit tuple selection: scene, query view and ordered context views.
struct TupleChoice {
  int scene = 0;
  int query = 0;
  std::vector<int> context;
};

inline Batch assemble_batch(std::span<const SceneRecord> records, std::span<const TupleChoice> choices) {
  if (choices.empty()) throw std::invalid_argument("batch size must be >= 1");
  Batch b;
  b.batch_size = static_cast<int>(choices.size());
  std::vector<Frame> cf, tf;
  std::vector<float> cp, qp;
  for (int i = 0; i < b.batch_size; ++i) {
    const TupleChoice& ch = choices[i];
    const SceneRecord& rec = records[static_cast<std::size_t>(ch.scene)];
    for (int v : ch.context) {
      if (v == ch.query) throw std::invalid_argument("query view cannot be part of its own context");
      cf.push_back(rec.views[static_cast<std::size_t>(v)].frame);
      const auto e = encode_pose(rec.views[static_cast<std::size_t>(v)].pose);
      cp.insert(cp.end(), e.begin(), e.end());
      b.owner.push_back(i);
    }
    tf.push_back(rec.views[static_cast<std::size_t>(ch.query)].frame);
    const auto e = encode_pose(rec.views[static_cast<std::size_t>(ch.query)].pose);
    qp.insert(qp.end(), e.begin(), e.end());
    b.scene_index.push_back(ch.scene);
    b.query_index.push_back(ch.query);
    b.context_index.push_back(ch.context);
  }
  const int views = static_cast<int>(cf.size());
  if (views > 0) {
    b.context_frames = stack<float>(cf);
  } else {
    const int size = tf[0].dim(1);
    b.context_frames = Tensor<float>({0, kChannels, size, size});
  }
  b.context_poses = Tensor<float>({views, kPoseDim}, std::move(cp));
  b.query_poses = Tensor<float>({b.batch_size, kPoseDim}, std::move(qp));
  b.targets = stack<float>(tf);
  return b;
}

/// Draws one tuple per batch element: scene uniform, query uniform over its K views,
/// context of N views without replacement from the other K-1, N uniform in [1, max_context].
inline Batch sample_batch(std::span<const SceneRecord> records, int batch_size, std::uint64_t seed,
                          const SampleOptions& opt = {}) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (records.empty()) throw std::invalid_argument("cannot sample from an empty dataset");
  const int k = static_cast<int>(records[0].views.size());
  const int n_max = opt.fixed_context > 0 ? opt.fixed_context : opt.max_context;
  if (n_max < 1 || n_max > k - 1)
    throw std::invalid_argument("context size " + std::to_string(n_max) + " not in [1, K-1] for K=" +
                                std::to_string(k));
  Rng rng(seed);
  std::vector<TupleChoice> choices(static_cast<std::size_t>(batch_size));
  for (auto& ch : choices) {
    ch.scene = static_cast<int>(rng.below(records.size()));
    if (static_cast<int>(records[static_cast<std::size_t>(ch.scene)].views.size()) != k)
      throw FormatError("records disagree on view count");
    ch.query = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    const int n = opt.fixed_context > 0 ? opt.fixed_context
                                        : 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_max)));
    std::vector<int> pool;
    for (int v = 0; v < k; ++v)
      if (v != ch.query) pool.push_back(v);
    for (int j = 0; j < n; ++j) {
      const auto pick = j + static_cast<int>(rng.below(static_cast<std::uint64_t>(pool.size() - j)));
      std::swap(pool[j], pool[pick]);
    }
    ch.context.assign(pool.begin(), pool.begin() + n);
  }
  return assemble_batch(records, choices);
}

}  // namespace gaqn
