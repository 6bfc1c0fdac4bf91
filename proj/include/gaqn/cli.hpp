#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "gaqn/checkpoint.hpp"
#include "gaqn/dataset.hpp"
#include "gaqn/eval.hpp"
#include "gaqn/scene_synth.hpp"
#include "gaqn/trainer.hpp"

namespace gaqn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// 0 = quiet (config and errors only), 1 = progress (default), 2 = every step.
inline int verbosity() {
  const char* v = std::getenv("GAQN_VERBOSE");
  if (!v || !*v) return 1;
  try {
    return std::stoi(v);
  } catch (const std::exception&) {
    return 1;
  }
}

inline void log_config(std::ostream& err, const std::string& command,
                       const std::vector<std::pair<std::string, std::string>>& kv) {
  err << "[" << command << "] resolved config\n";
  for (const auto& [k, v] : kv) err << "  " << k << " = " << v << "\n";
}

inline void log_config_text(std::ostream& err, const std::string& command, const std::string& text) {
  err << "[" << command << "] resolved config\n";
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) err << "  " << line.replace(line.find('='), 1, " = ") << "\n";
}

struct TrainArgs {
  std::string data;
  std::string out = "run";
  std::string preset = "full";
  std::string mode = "gaqn";
  std::string resume;
  std::int64_t steps = 1000;
  int batch = 20;
  int gen_layers = 8;
  int hidden = 64;
  double lr_g = 1e-4;
  double lr_d = 4e-4;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;
  std::int64_t sigma_anneal = 20000;
  double lambda_adv = 1;
  double lambda_fm = 1;
  int max_context = 4;
  int d_steps = 1;
  double grad_clip = 0;
  std::int64_t adv_warmup = 0;
};

inline TrainConfig resolve_train_config(const TrainArgs& a, const CLI::App& sub) {
  TrainConfig c;
  if (a.preset == "desk")
    c = desk_preset();
  else if (a.preset == "full")
    c = full_preset();
  else
    throw CLI::ValidationError("--preset", "must be desk or full");
  auto given = [&](const char* flag) { return sub.count(flag) > 0; };
  c.mode = parse_mode(a.mode);
  c.steps = a.steps;
  c.seed = a.seed;
  if (given("--batch")) c.batch_size = a.batch;
  if (given("--gen-layers")) c.model.draw.steps = a.gen_layers;
  if (given("--hidden")) c.model.draw.hidden = c.model.draw.canvas_channels = a.hidden;
  if (given("--lr-g")) c.lr_g = a.lr_g;
  if (given("--lr-d")) c.lr_d = a.lr_d;
  if (given("--sigma-anneal")) c.sigma.anneal_steps = a.sigma_anneal;
  if (given("--lambda-adv")) c.weights.adversarial = a.lambda_adv;
  if (given("--lambda-fm")) c.weights.feature_matching = a.lambda_fm;
  if (given("--max-context")) c.max_context = a.max_context;
  if (given("--d-steps")) c.d_steps = a.d_steps;
  if (given("--grad-clip")) c.grad_clip = a.grad_clip;
  if (given("--adv-warmup")) c.adv_warmup = a.adv_warmup;
  c.checkpoint_every = a.checkpoint_every;
  validate(c);
  return c;
}

inline int do_train(const TrainArgs& a, const CLI::App& sub, std::ostream& out, std::ostream& err) {
  const TrainConfig cfg = resolve_train_config(a, sub);
  const std::filesystem::path dir = a.out;
  log_config(err, "train", {{"data", a.data}, {"out", a.out}, {"preset", a.preset}, {"resume", a.resume}});
  log_config_text(err, "train", to_text(cfg));
  const auto data = read_dataset(a.data);
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "config.txt", to_text(cfg));

  TrainState state = a.resume.empty() ? init_state(cfg) : load_checkpoint(a.resume, &cfg);
  state.cfg.steps = cfg.steps;
  state.cfg.checkpoint_every = cfg.checkpoint_every;
  LossHistory history;
  const auto hist_path = dir / "loss_history.csv";
  if (!a.resume.empty() && std::filesystem::exists(hist_path)) {
    LossHistory old = read_history_csv(hist_path);
    for (const auto& r : old)
      if (r.step <= state.step) history.push_back(r);
  }
  const int v = verbosity();
  LoopHooks hooks;
  hooks.on_step = [&](const LossReport& r) {
    if (v >= 2 || (v >= 1 && (r.step % 50 == 0 || r.step == cfg.steps)))
      err << "step " << r.step << " sigma " << r.sigma << " nll " << r.nll << " kl " << r.kl_total << " G "
          << r.total_generator << " D " << r.total_discriminator << "\n";
  };
  hooks.on_checkpoint = [&](TrainState& s) {
    save_checkpoint(s, dir / ("checkpoint_" + std::to_string(s.step) + ".bin"));
  };
  LossHistory fresh;
  int code = kExitOk;
  try {
    fresh = continue_training(state, data, cfg.steps, hooks);
  } catch (const NonFiniteLoss& e) {
    err << "error: " << e.what() << "\n" << history_csv({e.report()});
    code = kExitRuntime;
  }
  history.insert(history.end(), fresh.begin(), fresh.end());
  detail::write_text(hist_path, history_csv(history));
  const auto crc = save_checkpoint(state, dir / "checkpoint.bin");
  out << "trained " << to_string(cfg.mode) << " to step " << state.step << "; checkpoint "
      << (dir / "checkpoint.bin").string() << " crc32 " << crc << "; history " << hist_path.string() << "\n";
  return code;
}

/// Dispatches a subcommand. Returns 0 on success, 1 on a usage error, 2 on a runtime error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Generative adversarial query network: data generation, training and evaluation"};
  app.require_subcommand(1);

  struct {
    int scenes = 0, views = 0, image_size = kImageSize;
    std::uint64_t seed = 0;
    std::string out;
  } gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a synthetic multi-view dataset");
  gen_cmd->add_option("--scenes", gen.scenes, "number of scenes")->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--views", gen.views, "views per scene (camera ring positions)")->required()->check(CLI::Range(2, 1 << 20));
  gen_cmd->add_option("--seed", gen.seed, "generator seed")->capture_default_str();
  gen_cmd->add_option("--image-size", gen.image_size, "frame side length in pixels")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--out", gen.out, "output dataset file")->required();

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset");
  train_cmd->add_option("--data", ta.data, "training dataset file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--mode", ta.mode, "objective")->check(CLI::IsMember({"gqn", "gqn-gan", "gqn-lsgan", "gaqn"}))->capture_default_str();
  train_cmd->add_option("--preset", ta.preset, "base configuration; explicit flags override it")->check(CLI::IsMember({"full", "desk"}))->capture_default_str();
  train_cmd->add_option("--steps", ta.steps, "total optimisation steps")->capture_default_str()->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--batch", ta.batch, "batch size")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--gen-layers", ta.gen_layers, "decoder generation steps")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--hidden", ta.hidden, "decoder hidden and canvas channels")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr-g", ta.lr_g, "encoder/decoder learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr-d", ta.lr_d, "discriminator learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--seed", ta.seed, "run seed")->capture_default_str();
  train_cmd->add_option("--out", ta.out, "output directory")->capture_default_str();
  train_cmd->add_option("--resume", ta.resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  train_cmd->add_option("--checkpoint-every", ta.checkpoint_every, "write checkpoint_<step>.bin every N steps (0: off)")->capture_default_str();
  train_cmd->add_option("--sigma-anneal", ta.sigma_anneal, "steps over which sigma goes from 2.0 to 0.7")->capture_default_str();
  train_cmd->add_option("--lambda-adv", ta.lambda_adv, "adversarial loss weight")->capture_default_str();
  train_cmd->add_option("--lambda-fm", ta.lambda_fm, "feature-matching loss weight")->capture_default_str();
  train_cmd->add_option("--max-context", ta.max_context, "largest context size sampled per element")->capture_default_str();
  train_cmd->add_option("--d-steps", ta.d_steps, "discriminator updates per generator update")->capture_default_str();
  train_cmd->add_option("--grad-clip", ta.grad_clip, "global gradient-norm clip (0: off)")->capture_default_str();
  train_cmd->add_option("--adv-warmup", ta.adv_warmup, "steps before adversarial terms switch on")->capture_default_str();

  struct {
    std::string ckpt, data, report = "metrics.txt";
    std::uint64_t seed = 0;
  } ev;
  auto* eval_cmd = app.add_subcommand("eval", "Compute test ELBO, KL and SSIM for a checkpoint");
  eval_cmd->add_option("--ckpt", ev.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ev.data, "test dataset file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--seed", ev.seed, "evaluation seed")->capture_default_str();
  eval_cmd->add_option("--report", ev.report, "metrics report path (a .csv twin is written next to it)")->capture_default_str();

  struct {
    std::vector<std::string> history, labels;
    std::string out = "plots";
  } pl;
  auto* plot_cmd = app.add_subcommand("plot", "Loss curves and run comparison from history CSVs");
  plot_cmd->add_option("--history", pl.history, "loss-history CSV files")->required()->check(CLI::ExistingFile);
  plot_cmd->add_option("--label", pl.labels, "one label per history (default: parent directory name)");
  plot_cmd->add_option("--out", pl.out, "output directory")->capture_default_str();

  struct {
    std::string ckpt, data, out = "grid.ppm";
    int scene = 0;
    std::uint64_t seed = 0;
  } rd;
  auto* render_cmd = app.add_subcommand("render", "Context | ground truth | sample grid for one scene");
  render_cmd->add_option("--ckpt", rd.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--data", rd.data, "dataset file")->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--scene", rd.scene, "scene index")->capture_default_str();
  render_cmd->add_option("--seed", rd.seed, "sampling seed")->capture_default_str();
  render_cmd->add_option("--out", rd.out, "output PPM")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* failing = &app;
    for (const auto* sc : app.get_subcommands()) failing = sc;
    err << failing->help();
    return kExitUsage;
  }

  try {
    if (*gen_cmd) {
      log_config(err, "gen-data", {{"scenes", std::to_string(gen.scenes)}, {"views", std::to_string(gen.views)},
                                   {"seed", std::to_string(gen.seed)}, {"image_size", std::to_string(gen.image_size)},
                                   {"out", gen.out}});
      SceneGenConfig sc;
      sc.image_size = gen.image_size;
      const auto sum = generate_dataset(gen.scenes, gen.views, gen.seed, gen.out, sc);
      out << "wrote " << gen.out << ": " << sum.n_scenes << " scenes x " << sum.views_per_scene << " views, "
          << sum.bytes << " bytes, crc32 " << sum.checksum << "\n";
      return kExitOk;
    }
    if (*train_cmd) {
      try {
        return do_train(ta, *train_cmd, out, err);
      } catch (const CLI::ValidationError& e) {
        err << "error: " << e.what() << "\n\n" << train_cmd->help();
        return kExitUsage;
      } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
      }
    }
    if (*eval_cmd) {
      log_config(err, "eval", {{"ckpt", ev.ckpt}, {"data", ev.data}, {"seed", std::to_string(ev.seed)},
                               {"report", ev.report}, {"context_views", std::to_string(kEvalContext)}});
      TrainState s = load_checkpoint(ev.ckpt);
      const auto data = read_dataset(ev.data);
      const MetricsRecord m = evaluate_model(s, data, ev.seed);
      write_metrics(m, ev.report);
      out << metrics_text(m);
      return kExitOk;
    }
    if (*plot_cmd) {
      log_config(err, "plot", {{"history", CLI::detail::join(pl.history)}, {"label", CLI::detail::join(pl.labels)},
                               {"out", pl.out}});
      if (!pl.labels.empty() && pl.labels.size() != pl.history.size()) {
        err << "error: --label must be given once per --history\n\n" << plot_cmd->help();
        return kExitUsage;
      }
      std::vector<LabeledHistory> runs;
      for (std::size_t i = 0; i < pl.history.size(); ++i) {
        const std::filesystem::path p = pl.history[i];
        std::string label = pl.labels.empty() ? p.parent_path().filename().string() : pl.labels[i];
        if (label.empty()) label = p.stem().string();
        runs.push_back({label, read_history_csv(p)});
      }
      std::vector<std::filesystem::path> files;
      if (runs.size() == 1) {
        files = emit_loss_plots(runs[0].history, pl.out);
      } else {
        std::map<std::string, int> seen;
        for (auto& r : runs)
          if (seen[r.label]++) r.label += "_" + std::to_string(seen[r.label]);
        for (const auto& r : runs) {
          auto f = emit_loss_plots(r.history, std::filesystem::path(pl.out) / r.label);
          files.insert(files.end(), f.begin(), f.end());
        }
        auto f = emit_comparison(runs, pl.out);
        files.insert(files.end(), f.begin(), f.end());
      }
      for (const auto& f : files) out << f.string() << "\n";
      return kExitOk;
    }
    if (*render_cmd) {
      log_config(err, "render", {{"ckpt", rd.ckpt}, {"data", rd.data}, {"scene", std::to_string(rd.scene)},
                                 {"seed", std::to_string(rd.seed)}, {"out", rd.out}});
      TrainState s = load_checkpoint(rd.ckpt);
      const auto data = read_dataset(rd.data);
      const Image g = render_grid(s, data, rd.scene, rd.seed, rd.out);
      out << "wrote " << rd.out << " (" << g.width << "x" << g.height << ")\n";
      return kExitOk;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace gaqn::cli
