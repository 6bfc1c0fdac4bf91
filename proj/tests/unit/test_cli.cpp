#include <gtest/gtest.h>

#include <sstream>

#include "gaqn/cli.hpp"
#include "support/support.hpp"

using namespace gaqn;
using gaqn::testkit::TempDir;

namespace {

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "gaqn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST(Cli, GenDataWritesTheClosedFormSize) {
  TempDir tmp;
  const auto path = (tmp / "d.bin").string();
  std::string out;
  ASSERT_EQ(run_cli({"gen-data", "--scenes", "2", "--views", "5", "--seed", "7", "--out", path}, &out), 0);
  EXPECT_EQ(std::filesystem::file_size(path), 28u + 2 * 5 * (20 + 64 * 64 * 3));
  EXPECT_NE(out.find("123108 bytes"), std::string::npos) << out;
}

TEST(Cli, UsageErrorsExitOne) {
  std::string err;
  EXPECT_EQ(run_cli({"gen-data", "--scenes", "2", "--views", "5", "--bogus", "1", "--out", "x"}, nullptr, &err), 1);
  EXPECT_NE(err.find("error"), std::string::npos);
  EXPECT_EQ(run_cli({}), 1);
  EXPECT_EQ(run_cli({"train", "--data", "/nonexistent/file.bin"}), 1);
  EXPECT_EQ(run_cli({"gen-data", "--scenes", "0", "--views", "5", "--out", "x"}), 1);
}

TEST(Cli, TrainGqnEvalPlotRender) {
  TempDir tmp;
  const auto data = (tmp / "d.bin").string(), out_dir = (tmp / "run").string();
  ASSERT_EQ(run_cli({"gen-data", "--scenes", "1", "--views", "3", "--seed", "2", "--out", data}), 0);
  std::string err;
  ASSERT_EQ(run_cli({"train", "--data", data, "--preset", "desk", "--mode", "gqn", "--steps", "3", "--batch", "1",
                     "--hidden", "4", "--gen-layers", "1", "--seed", "1", "--out", out_dir},
                    nullptr, &err),
            0)
      << err;
  EXPECT_NE(err.find("batch_size = 1"), std::string::npos);
  const auto h = read_history_csv(tmp / "run" / "loss_history.csv");
  ASSERT_EQ(h.size(), 3u);
  for (const auto& r : h)
    for (double v : {r.lsgan_g, r.lsgan_d, r.fm, r.gan_g, r.gan_d, r.total_generator, r.total_discriminator})
      EXPECT_EQ(v, 0.0);
  const auto cfg = config_from_text(detail::read_text(tmp / "run" / "config.txt"));
  EXPECT_EQ(cfg.mode, Mode::gqn);
  EXPECT_EQ(cfg.model.draw.hidden, 4);
  EXPECT_EQ(cfg.model.draw.steps, 1);

  const auto ckpt = (tmp / "run" / "checkpoint.bin").string();
  const auto report = (tmp / "m.txt").string();
  std::string out;
  ASSERT_EQ(run_cli({"eval", "--ckpt", ckpt, "--data", data, "--report", report}, &out), 0);
  EXPECT_NE(out.find("context_views: 2"), std::string::npos) << out;
  EXPECT_TRUE(std::filesystem::exists(report + ".csv"));

  ASSERT_EQ(run_cli({"plot", "--history", (tmp / "run" / "loss_history.csv").string(), "--out", (tmp / "p").string()}), 0);
  EXPECT_TRUE(std::filesystem::exists(tmp / "p" / "total_generator.ppm"));

  ASSERT_EQ(run_cli({"render", "--ckpt", ckpt, "--data", data, "--out", (tmp / "g.ppm").string()}), 0);
  EXPECT_EQ(read_ppm(tmp / "g.ppm").width, 4 * 64);
  EXPECT_EQ(run_cli({"render", "--ckpt", ckpt, "--data", data, "--scene", "3"}), 2);

  // Resume with a different optimiser setting is refused.
  EXPECT_EQ(run_cli({"train", "--data", data, "--preset", "desk", "--mode", "gqn", "--steps", "4", "--batch", "1",
                     "--hidden", "4", "--gen-layers", "1", "--seed", "1", "--lr-g", "0.01", "--resume", ckpt, "--out",
                     out_dir}),
            2);
  ASSERT_EQ(run_cli({"train", "--data", data, "--preset", "desk", "--mode", "gqn", "--steps", "4", "--batch", "1",
                     "--hidden", "4", "--gen-layers", "1", "--seed", "1", "--resume", ckpt, "--out", out_dir}),
            0);
  EXPECT_EQ(read_history_csv(tmp / "run" / "loss_history.csv").size(), 4u);
}
