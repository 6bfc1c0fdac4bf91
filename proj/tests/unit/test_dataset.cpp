#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "support/support.hpp"

using namespace gaqn;
using gaqn::testkit::TempDir;

namespace {

SceneRecord synthetic_record(int k, std::uint64_t seed, int size = kImageSize) {
  Rng rng(seed);
  SceneRecord r;
  for (int v = 0; v < k; ++v) {
    View view;
    view.pose = {static_cast<float>(rng.uniform(-3, 3)), static_cast<float>(rng.uniform(-1, 3)),
                 static_cast<float>(rng.uniform(-3, 3)), static_cast<float>(rng.uniform(-3.14, 3.14)),
                 static_cast<float>(rng.uniform(-1.5, 1.5))};
    view.frame = make_frame(size);
    for (auto& p : view.frame.storage()) p = static_cast<float>(rng.below(256)) / 255.0f;
    r.views.push_back(view);
  }
  return r;
}

}  // namespace

TEST(EncodePose, Examples) {
  EXPECT_EQ(encode_pose({1, 2, 3, 0, 0}), (PoseEncoded{1, 2, 3, 0, 1, 0, 1}));
  const auto b = encode_pose({0, 0, 0, static_cast<float>(std::numbers::pi / 2), 0});
  EXPECT_NEAR(b[3], 1.0, 1e-6);
  EXPECT_NEAR(b[4], 0.0, 1e-6);
  EXPECT_EQ(b[5], 0.0f);
  EXPECT_EQ(b[6], 1.0f);
  const auto c = encode_pose({0, 0, 0, static_cast<float>(std::numbers::pi - 1e-9), static_cast<float>(-std::numbers::pi / 2)});
  EXPECT_NEAR(c[3], 0.0, 1e-6);
  EXPECT_NEAR(c[4], -1.0, 1e-6);
  EXPECT_NEAR(c[5], -1.0, 1e-6);
  EXPECT_NEAR(c[6], 0.0, 1e-6);
}

TEST(EncodePose, TranslationExactAndUnitCircle) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const PoseRaw p{static_cast<float>(rng.uniform(-4, 4)), static_cast<float>(rng.uniform(-1, 3)),
                    static_cast<float>(rng.uniform(-4, 4)), static_cast<float>(rng.uniform(-3.14159, 3.14159)),
                    static_cast<float>(rng.uniform(-1.5707, 1.5707))};
    const auto e = encode_pose(p);
    EXPECT_EQ(e[0], p.x);
    EXPECT_EQ(e[1], p.y);
    EXPECT_EQ(e[2], p.z);
    EXPECT_NEAR(e[3] * e[3] + e[4] * e[4], 1.0, 1e-6);
    EXPECT_NEAR(e[5] * e[5] + e[6] * e[6], 1.0, 1e-6);
  }
}

TEST(DatasetFormat, LayoutArithmetic) {
  EXPECT_EQ(view_record_bytes(), 12308u);
  EXPECT_EQ(kDatasetHeaderBytes, 28u);
  EXPECT_EQ(dataset_file_bytes(2, 5), 28u + 2 * 5 * 12308u);
  const std::vector<SceneRecord> one{synthetic_record(5, 1)};
  EXPECT_EQ(encode_dataset(one).size(), 28u + 5 * 12308u);
}

TEST(DatasetFormat, RoundtripIsExact) {
  TempDir tmp;
  std::vector<SceneRecord> recs{synthetic_record(4, 1), synthetic_record(4, 2), synthetic_record(4, 3)};
  const auto crc = write_dataset(recs, tmp / "d.bin");
  const auto back = read_dataset(tmp / "d.bin");
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t s = 0; s < recs.size(); ++s)
    for (std::size_t v = 0; v < 4; ++v) {
      const auto &a = recs[s].views[v], &b = back[s].views[v];
      EXPECT_EQ(std::memcmp(&a.pose, &b.pose, sizeof(PoseRaw)), 0);
      EXPECT_EQ(a.frame, b.frame);
    }
  const auto bytes = detail::read_file(tmp / "d.bin");
  EXPECT_EQ(crc, detail::crc32_of(std::span(bytes).subspan(kDatasetHeaderBytes)));
  EXPECT_EQ(encode_dataset(back), bytes);
}

TEST(DatasetFormat, LittleEndianHeader) {
  const std::vector<SceneRecord> recs{synthetic_record(3, 4)};
  const auto b = encode_dataset(recs);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 8), "GQNDSET1");
  const std::uint8_t expect[20] = {1, 0, 0, 0, 3, 0, 0, 0, 64, 0, 0, 0, 64, 0, 0, 0, 3, 0, 0, 0};
  EXPECT_EQ(std::memcmp(b.data() + 8, expect, 20), 0);
  const auto x = std::bit_cast<std::uint32_t>(recs[0].views[0].pose.x);
  EXPECT_EQ(b[28], x & 0xff);
  EXPECT_EQ(b[31], x >> 24);
}

TEST(DatasetFormat, QuantizationMapsByOver255) {
  SceneRecord r = synthetic_record(2, 5);
  r.views[0].frame[0] = 0.5004f;
  r.views[0].frame[1] = 1.7f;
  r.views[0].frame[2] = -0.2f;
  const std::vector<SceneRecord> recs{r};
  const auto back = decode_dataset(encode_dataset(recs));
  EXPECT_EQ(back[0].views[0].frame[0], 128.0f / 255.0f);
  EXPECT_EQ(back[0].views[0].frame[1], 1.0f);
  EXPECT_EQ(back[0].views[0].frame[2], 0.0f);
}

TEST(DatasetFormat, Errors) {
  TempDir tmp;
  EXPECT_THROW(
      {
        try {
          encode_dataset({});
        } catch (const FormatError& e) {
          EXPECT_STREQ(e.what(), "empty dataset");
          throw;
        }
      },
      FormatError);
  std::vector<SceneRecord> mixed{synthetic_record(3, 1), synthetic_record(4, 2)};
  EXPECT_THROW(encode_dataset(mixed), FormatError);

  std::vector<SceneRecord> recs{synthetic_record(3, 1), synthetic_record(3, 2)};
  auto bytes = encode_dataset(recs);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_dataset(bad), FormatError);

  auto cut = bytes;
  cut.resize(28 + 3 * 12308 + 100);
  try {
    decode_dataset(cut);
    FAIL() << "truncation not detected";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("scene 1"), std::string::npos) << e.what();
  }
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_dataset(extra), FormatError);
  EXPECT_THROW(read_dataset(tmp / "missing.bin"), IoError);
  EXPECT_THROW(write_dataset(recs, tmp / "no" / "such" / "dir" / "d.bin"), IoError);
}

TEST(SampleBatch, ContextPolicy) {
  std::vector<SceneRecord> recs{synthetic_record(5, 1, 8), synthetic_record(5, 2, 8)};
  std::set<int> sizes;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Batch b = sample_batch(recs, 6, seed);
    ASSERT_EQ(b.batch_size, 6);
    int views = 0;
    for (int i = 0; i < 6; ++i) {
      const auto& ctx = b.context_index[static_cast<std::size_t>(i)];
      sizes.insert(static_cast<int>(ctx.size()));
      EXPECT_GE(ctx.size(), 1u);
      EXPECT_LE(ctx.size(), 4u);
      EXPECT_EQ(std::count(ctx.begin(), ctx.end(), b.query_index[static_cast<std::size_t>(i)]), 0);
      EXPECT_EQ(std::set<int>(ctx.begin(), ctx.end()).size(), ctx.size());
      views += static_cast<int>(ctx.size());
    }
    EXPECT_EQ(b.context_frames.dim(0), views);
    EXPECT_EQ(static_cast<int>(b.owner.size()), views);
  }
  EXPECT_EQ(sizes, (std::set<int>{1, 2, 3, 4}));
}

TEST(SampleBatch, TensorsMatchChosenViews) {
  std::vector<SceneRecord> recs{synthetic_record(5, 1, 8), synthetic_record(5, 2, 8)};
  const Batch b = sample_batch(recs, 3, 9);
  const std::size_t frame = 3 * 8 * 8;
  int row = 0;
  for (int i = 0; i < 3; ++i) {
    const auto& rec = recs[static_cast<std::size_t>(b.scene_index[static_cast<std::size_t>(i)])];
    const auto& q = rec.views[static_cast<std::size_t>(b.query_index[static_cast<std::size_t>(i)])];
    EXPECT_TRUE(std::equal(q.frame.storage().begin(), q.frame.storage().end(), b.targets.data() + i * frame));
    const auto qp = encode_pose(q.pose);
    EXPECT_TRUE(std::equal(qp.begin(), qp.end(), b.query_poses.data() + i * 7));
    for (int v : b.context_index[static_cast<std::size_t>(i)]) {
      const auto& c = rec.views[static_cast<std::size_t>(v)];
      EXPECT_TRUE(std::equal(c.frame.storage().begin(), c.frame.storage().end(), b.context_frames.data() + row * frame));
      EXPECT_EQ(b.owner[static_cast<std::size_t>(row)], i);
      ++row;
    }
  }
}

TEST(SampleBatch, DeterministicAndErrors) {
  std::vector<SceneRecord> recs{synthetic_record(5, 1, 8)};
  const Batch a = sample_batch(recs, 4, 77), b = sample_batch(recs, 4, 77);
  EXPECT_EQ(a.context_index, b.context_index);
  EXPECT_EQ(a.query_index, b.query_index);
  EXPECT_EQ(a.context_frames, b.context_frames);
  EXPECT_THROW(sample_batch(recs, 0, 1), std::invalid_argument);
  EXPECT_THROW(sample_batch({}, 1, 1), std::invalid_argument);
  SampleOptions too_many;
  too_many.max_context = 5;
  EXPECT_THROW(sample_batch(recs, 1, 1, too_many), std::invalid_argument);
}

TEST(SampleBatch, QueryFrequencyIsUniform) {
  std::vector<SceneRecord> recs{synthetic_record(5, 1, 4)};
  std::vector<int> counts(5, 0);
  const int n = 10000;
  for (int i = 0; i < n / 10; ++i) {
    const Batch b = sample_batch(recs, 10, derive_seed(123, {static_cast<std::uint64_t>(i)}));
    for (int q : b.query_index) ++counts[static_cast<std::size_t>(q)];
  }
  for (int c : counts) EXPECT_NEAR(static_cast<double>(c) / n, 0.2, 0.02);
}
