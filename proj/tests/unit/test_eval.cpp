#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "support/support.hpp"

using namespace gaqn;
using gaqn::testkit::random_tensor;
using gaqn::testkit::TempDir;
using gaqn::testkit::tiny_config;
using gaqn::testkit::tiny_records;

namespace {

// Direct 2D-window SSIM with mirrored borders; each pixel gathers its own 11x11 neighbourhood.
double ssim_direct(const Tensor<double>& a, const Tensor<double>& b) {
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  double g[11], gs = 0;
  for (int i = 0; i < 11; ++i) gs += g[i] = std::exp(-(i - 5.0) * (i - 5.0) / (2 * 1.5 * 1.5));
  auto mirror = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (int dy = -5; dy <= 5; ++dy)
          for (int dx = -5; dx <= 5; ++dx) {
            const double wt = g[dy + 5] * g[dx + 5] / (gs * gs);
            const std::size_t idx = (static_cast<std::size_t>(ch) * h + mirror(y + dy, h)) * w + mirror(x + dx, w);
            const double p = a[idx], q = b[idx];
            mx += wt * p;
            my += wt * q;
            xx += wt * p * p;
            yy += wt * q * q;
            xy += wt * p * q;
          }
        const double vx = xx - mx * mx, vy = yy - my * my, cv = xy - mx * my;
        total += (2 * mx * my + c1) * (2 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
  return total / (static_cast<double>(c) * h * w);
}

LossReport report(std::int64_t step, double v) {
  LossReport r;
  r.step = step;
  r.elbo = v;
  r.total_generator = v * 2;
  r.total_discriminator = v / 2;
  return r;
}

}  // namespace

TEST(Ssim, ClosedForms) {
  const auto x = random_tensor<double>({3, 16, 16}, 1, 0, 1);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);
  const double c1 = 1e-4, expect = c1 / (1 + c1);
  EXPECT_NEAR(ssim(Tensor<double>({3, 16, 16}, 0.0), Tensor<double>({3, 16, 16}, 1.0)), expect, expect * 1e-6);
  EXPECT_THROW(ssim(x, Tensor<double>({3, 8, 8})), ShapeError);
  EXPECT_THROW(ssim(Tensor<double>({16, 16}), Tensor<double>({16, 16})), ShapeError);
}

TEST(Ssim, MatchesDirectWindowOracle) {
  for (int i = 0; i < 20; ++i) {
    const int size = 8 + 4 * (i % 4);
    const auto a = random_tensor<double>({3, size, size}, 100 + static_cast<std::uint64_t>(i), 0, 1);
    auto b = a;
    Rng rng(200 + static_cast<std::uint64_t>(i));
    for (auto& v : b.storage()) v = std::clamp(v + rng.uniform(-0.3, 0.3), 0.0, 1.0);
    const double s = ssim(a, b);
    EXPECT_NEAR(s, ssim_direct(a, b), 1e-6);
    EXPECT_DOUBLE_EQ(s, ssim(b, a));
    EXPECT_LE(s, 1.0);
  }
}

TEST(Ssim, ReflectConvention) {
  EXPECT_EQ(detail::reflect(-1, 5), 0);
  EXPECT_EQ(detail::reflect(-2, 5), 1);
  EXPECT_EQ(detail::reflect(5, 5), 4);
  EXPECT_EQ(detail::reflect(6, 5), 3);
  EXPECT_EQ(detail::reflect(-7, 5), 3);
}

TEST(Evaluate, DeterministicPureAndBounded) {
  const auto data = tiny_records(3, 4);
  TrainConfig c = tiny_config();
  c.steps = 2;
  auto run = train_loop(c, data);
  const auto before = encode_checkpoint(run.state);
  const MetricsRecord a = evaluate_model(run.state, data, 7);
  const MetricsRecord b = evaluate_model(run.state, data, 7);
  EXPECT_EQ(a, b);
  EXPECT_EQ(encode_checkpoint(run.state), before);
  EXPECT_EQ(a.n_scenes, 3);
  EXPECT_EQ(a.context_views, 3);
  EXPECT_EQ(a.checkpoint_step, 2);
  EXPECT_EQ(a.sigma, sigma_schedule(2, c.sigma));
  EXPECT_GE(a.kl_test_loss, 0.0);
  EXPECT_LE(a.ssim_mean, 1.0);
  EXPECT_GE(a.ssim_std, 0.0);
  EXPECT_EQ(a.train_loss, run.state.train_loss());
  EXPECT_TRUE(std::isfinite(a.test_loss));
}

TEST(Evaluate, ChoiceUsesFourContextViews) {
  const auto data = tiny_records(1, 7);
  const TupleChoice ch = eval_choice(data[0], 0, 3);
  EXPECT_EQ(ch.context.size(), 4u);
  EXPECT_EQ(std::count(ch.context.begin(), ch.context.end(), ch.query), 0);
  const TupleChoice again = eval_choice(data[0], 0, 3);
  EXPECT_EQ(again.context, ch.context);
  EXPECT_EQ(again.query, ch.query);
}

TEST(Metrics, TextAndCsv) {
  TempDir tmp;
  MetricsRecord m;
  m.ssim_mean = 0.5;
  m.n_scenes = 2;
  const auto files = write_metrics(m, tmp / "metrics.txt");
  ASSERT_EQ(files.size(), 2u);
  const auto text = detail::read_text(files[0]);
  EXPECT_NE(text.find("ssim_mean: 0.5\n"), std::string::npos);
  EXPECT_NE(text.find("queries_per_scene: 1\n"), std::string::npos);
  const auto csv = detail::read_text(files[1]);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
}

TEST(History, CsvHasOneRowPerStepAndRoundtrips) {
  LossHistory h;
  for (int i = 1; i <= 6; ++i) h.push_back(report(i, 0.1 * i));
  h[3].total_discriminator = std::numeric_limits<double>::quiet_NaN();
  const auto text = history_csv(h);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 7);
  const auto back = parse_history_csv(text);
  ASSERT_EQ(back.size(), 6u);
  EXPECT_EQ(back[2].elbo, h[2].elbo);
  EXPECT_TRUE(std::isnan(back[3].total_discriminator));
  EXPECT_THROW(parse_history_csv("bad\n"), FormatError);
  std::string swapped = std::string(kHistoryHeader) + "\n2,0,0,0,0,0,0,0,0,0,0,0\n1,0,0,0,0,0,0,0,0,0,0,0\n";
  EXPECT_THROW(parse_history_csv(swapped), FormatError);
}

TEST(Plots, ChartsAndComparison) {
  TempDir tmp;
  LossHistory a, b;
  for (int i = 1; i <= 4; ++i) a.push_back(report(i, i));
  for (int i = 3; i <= 6; ++i) b.push_back(report(i, 10 + i));
  b[1].total_generator = std::numeric_limits<double>::infinity();
  const auto files = emit_loss_plots(a, tmp / "one");
  ASSERT_EQ(files.size(), 3u);
  const Image chart = read_ppm(files[1]);
  EXPECT_EQ(chart.width, 640);
  EXPECT_EQ(chart.height, 480);
  EXPECT_EQ(chart.get(50, 200), (Rgb{0, 0, 0}));

  const std::string csv = comparison_csv({{"x", a}, {"y", b}});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,x_elbo,x_total_generator,x_total_discriminator,y_elbo,y_total_generator,y_total_discriminator");
  std::vector<std::string> rows;
  while (std::getline(in, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0], "1,1,2,0.5,,,");
  EXPECT_EQ(rows[2], "3,3,6,1.5,13,26,6.5");
  EXPECT_EQ(rows[5], "6,,,,16,32,8");
  const auto cmp = emit_comparison({{"x", a}, {"y", b}}, tmp / "cmp");
  EXPECT_EQ(read_ppm(cmp[1]).width, 640);
  EXPECT_THROW(emit_comparison({{"x", {}}}, tmp / "bad"), std::invalid_argument);
}

TEST(Grid, LayoutAndGroundTruthTile) {
  TempDir tmp;
  const auto data = tiny_records(2, 4);
  TrainState s = init_state(tiny_config());
  const Image g = render_grid(s, data, 1, 5, tmp / "g.ppm");
  const TupleChoice ch = eval_choice(data[1], 1, 5);
  const int n = static_cast<int>(ch.context.size());
  EXPECT_EQ(g.width, (n + 2) * 32);
  EXPECT_EQ(g.height, 32);
  const Image truth = frame_image(data[1].views[static_cast<std::size_t>(ch.query)].frame);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) ASSERT_EQ(g.get(n * 32 + x, y), truth.get(x, y));
  EXPECT_EQ(read_ppm(tmp / "g.ppm"), g);
  EXPECT_THROW(grid_image(s, data, 2, 5), std::out_of_range);
}
