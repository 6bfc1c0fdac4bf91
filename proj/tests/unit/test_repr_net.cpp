#include <gtest/gtest.h>

#include "support/support.hpp"

using namespace gaqn;
using gaqn::testkit::grad_check;
using gaqn::testkit::random_tensor;

namespace {

EncoderConfig small_encoder() { return {8, 3, 4, 5}; }

}  // namespace

TEST(Encoder, DeterministicFiniteAndShaped) {
  EncoderConfig cfg;
  cfg.repr_channels = 32;
  auto enc = init_encoder<float>(1, cfg);
  auto again = init_encoder<float>(1, cfg);
  EXPECT_TRUE(enc.params.values_equal(again.params));
  const auto frame = random_tensor<float>({3, 64, 64}, 2, 0, 1);
  const auto pose = encode_pose({0.5f, 1, -1, 0.3f, -0.2f});
  const auto a = encode_view(enc, frame, pose), b = encode_view(enc, frame, pose);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.shape(), (std::vector<int>{32, 16, 16}));
  EXPECT_TRUE(all_finite(a));
}

TEST(Encoder, SinglePixelChangesOutput) {
  auto enc = init_encoder<float>(4, {64, 8, 8, 8});
  auto frame = random_tensor<float>({3, 64, 64}, 2, 0, 1);
  const auto pose = encode_pose({});
  const auto a = encode_view(enc, frame, pose);
  frame[17 * 64 + 40] += 0.5f;
  EXPECT_NE(encode_view(enc, frame, pose), a);
  auto other_pose = pose;
  other_pose[0] = 1.0f;
  EXPECT_NE(encode_view(enc, frame, other_pose), encode_view(enc, frame, pose));
}

TEST(Encoder, RejectsWrongShapes) {
  auto enc = init_encoder<float>(1, small_encoder());
  EXPECT_THROW(encode_view(enc, Tensor<float>({3, 16, 16}), encode_pose({})), ShapeError);
  EXPECT_THROW(encode_view(enc, Tensor<float>({1, 8, 8}), encode_pose({})), ShapeError);
  EXPECT_THROW(init_encoder<float>(1, {10, 3, 4, 5}), std::invalid_argument);
}

TEST(Aggregate, PermutationDuplicationAndEmpty) {
  const std::vector<int> shape{4, 3, 3};
  std::vector<Tensor<float>> maps{random_tensor<float>(shape, 1), random_tensor<float>(shape, 2),
                                  random_tensor<float>(shape, 3)};
  const auto fwd = aggregate_context<float>(maps, shape);
  std::vector<Tensor<float>> rev(maps.rbegin(), maps.rend());
  EXPECT_EQ(aggregate_context<float>(rev, shape), fwd);
  std::swap(rev[0], rev[1]);
  EXPECT_EQ(aggregate_context<float>(rev, shape), fwd);

  const std::vector<Tensor<float>> dup{maps[0], maps[0]};
  const auto two = aggregate_context<float>(dup, shape);
  for (std::size_t i = 0; i < two.size(); ++i) EXPECT_EQ(two[i], 2 * maps[0][i]);

  const auto none = aggregate_context<float>(std::span<const Tensor<float>>{}, shape);
  EXPECT_EQ(none, Tensor<float>(shape));

  std::vector<Tensor<float>> mixed{maps[0], random_tensor<float>({4, 2, 2}, 4)};
  EXPECT_THROW(aggregate_context<float>(mixed, shape), ShapeError);
}

TEST(Aggregate, TapeSumMatchesValueSum) {
  auto enc = init_encoder<double>(2, small_encoder());
  Tape<double> tape(false);
  const auto frames = random_tensor<double>({3, 3, 8, 8}, 5, 0, 1);
  const auto poses = random_tensor<double>({3, 7}, 6);
  const auto maps = encode_views(tape, enc, tape.constant(frames), poses);
  const auto r = aggregate_context(maps, {1, 0, 1}, 3);
  EXPECT_EQ(r.shape(), (std::vector<int>{3, 5, 2, 2}));
  const std::size_t per = 5 * 2 * 2;
  for (std::size_t i = 0; i < per; ++i) {
    EXPECT_NEAR(r.value()[i], maps.value()[per + i], 1e-15);
    EXPECT_NEAR(r.value()[per + i], maps.value()[i] + maps.value()[2 * per + i], 1e-12);
    EXPECT_EQ(r.value()[2 * per + i], 0.0);
  }
}

TEST(Encoder, GradientCheck) {
  auto enc = init_encoder<double>(3, small_encoder());
  const auto frames = random_tensor<double>({2, 3, 8, 8}, 7, 0, 1);
  const auto poses = random_tensor<double>({2, 7}, 8);
  auto loss = [&](Tape<double>& t) { return ops::sum(encode_views(t, enc, t.constant(frames), poses)); };
  const auto res = grad_check({&enc.params}, loss, 200, 2);
  EXPECT_GE(res.pass_rate(), 0.95) << "worst " << res.worst;
}
