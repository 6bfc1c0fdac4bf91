#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gaqn/checkpoint.hpp"
#include "gaqn/dataset.hpp"
#include "gaqn/image.hpp"
#include "gaqn/trainer.hpp"

namespace gaqn {

struct SsimConfig {
  int window = 11;
  double gaussian_sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

namespace detail {

// Half-sample symmetric reflection: ... c b a | a b c ...
inline int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  double total = 0;
  for (int i = 0; i < size; ++i) total += w[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
  for (double& v : w) v /= total;
  return w;
}

// Separable Gaussian filter of a single plane with reflected borders.
inline std::vector<double> filter_plane(const std::vector<double>& x, int h, int w, const std::vector<double>& k) {
  const int r = static_cast<int>(k.size()) / 2;
  std::vector<double> tmp(x.size()), out(x.size());
  for (int y = 0; y < h; ++y)
    for (int i = 0; i < w; ++i) {
      double s = 0;
      for (int d = -r; d <= r; ++d) s += k[static_cast<std::size_t>(d + r)] * x[static_cast<std::size_t>(y * w + reflect(i + d, w))];
      tmp[static_cast<std::size_t>(y * w + i)] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int i = 0; i < w; ++i) {
      double s = 0;
      for (int d = -r; d <= r; ++d) s += k[static_cast<std::size_t>(d + r)] * tmp[static_cast<std::size_t>(reflect(y + d, h) * w + i)];
      out[static_cast<std::size_t>(y * w + i)] = s;
    }
  return out;
}

}  // namespace detail

/// Mean structural similarity over pixels and channels of two [C,H,W] images in [0, range].
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimConfig& cfg = {}) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  if (a.rank() != 3 || a.empty()) throw ShapeError("ssim expects [C,H,W] images");
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto k = detail::gaussian_window(cfg.window, cfg.gaussian_sigma);
  const double c1 = (cfg.k1 * cfg.range) * (cfg.k1 * cfg.range), c2 = (cfg.k2 * cfg.range) * (cfg.k2 * cfg.range);
  double total = 0;
  std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) {
      x[i] = a[ch * plane + i];
      y[i] = b[ch * plane + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::filter_plane(x, h, w, k), my = detail::filter_plane(y, h, w, k);
    const auto sxx = detail::filter_plane(xx, h, w, k), syy = detail::filter_plane(yy, h, w, k),
               sxy = detail::filter_plane(xy, h, w, k);
    for (std::size_t i = 0; i < plane; ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
      total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
  }
  return total / static_cast<double>(plane * static_cast<std::size_t>(c));
}

struct MetricsRecord {
  double train_loss = 0;
  double test_loss = 0;
  double kl_test_loss = 0;
  double ssim_mean = 0;
  double ssim_std = 0;
  int n_scenes = 0;
  Mode mode = Mode::gaqn;
  std::int64_t checkpoint_step = 0;
  int context_views = 0;
  double sigma = 0;

  bool operator==(const MetricsRecord&) const = default;
};

inline constexpr int kEvalContext = 4;
inline constexpr std::uint64_t kEvalTag = 0x6576616c;
inline constexpr std::uint64_t kRenderTag = 0x726e6472;

/// Query and context choice for scene `scene`: one query, min(4, K-1) context views.
inline TupleChoice eval_choice(const SceneRecord& rec, int scene, std::uint64_t seed) {
  const int k = static_cast<int>(rec.views.size());
  if (k < 2) throw std::invalid_argument("evaluation needs at least two views per scene");
  Rng rng(derive_seed(seed, {kEvalTag, static_cast<std::uint64_t>(scene)}));
  TupleChoice ch;
  ch.scene = scene;
  ch.query = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
  std::vector<int> pool;
  for (int v = 0; v < k; ++v)
    if (v != ch.query) pool.push_back(v);
  const int n = std::min(kEvalContext, k - 1);
  for (int j = 0; j < n; ++j) {
    const auto pick = j + static_cast<int>(rng.below(static_cast<std::uint64_t>(pool.size() - j)));
    std::swap(pool[j], pool[pick]);
  }
  ch.context.assign(pool.begin(), pool.begin() + n);
  return ch;
}

/// Test-set ELBO, summed KL and reconstruction SSIM, one query per scene. The observation
/// sigma is the schedule value at the checkpoint's step.
inline MetricsRecord evaluate_model(TrainState& s, std::span<const SceneRecord> data, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("evaluation dataset is empty");
  const int size = data[0].views.at(0).frame.dim(1);
  if (size != s.cfg.model.draw.image_size)
    throw std::invalid_argument("dataset frames are " + std::to_string(size) + " px but the model expects " +
                                std::to_string(s.cfg.model.draw.image_size));
  MetricsRecord m;
  m.mode = s.cfg.mode;
  m.checkpoint_step = s.step;
  m.train_loss = s.train_loss();
  m.n_scenes = static_cast<int>(data.size());
  m.sigma = sigma_schedule(s.step, s.cfg.sigma);
  std::vector<double> scores;
  for (int i = 0; i < m.n_scenes; ++i) {
    const TupleChoice ch = eval_choice(data[static_cast<std::size_t>(i)], i, seed);
    m.context_views = static_cast<int>(ch.context.size());
    const Batch b = assemble_batch(data, std::span(&ch, 1));
    Tape<float> tape(false);
    const Var<float> r = aggregate_context(
        encode_views(tape, s.enc, tape.constant(b.context_frames), b.context_poses), b.owner, 1);
    const auto g = draw_elbo(tape, s.draw, r, b.query_poses, b.targets, s.cfg.model.draw.steps, m.sigma,
                             derive_seed(seed, {kNoiseTag, static_cast<std::uint64_t>(i)}));
    m.test_loss += g.elbo.value()[0];
    m.kl_test_loss += g.kl.value()[0];
    const auto& x = g.reconstruction.value();
    scores.push_back(ssim(b.targets.reshaped({kChannels, size, size}), x.reshaped({kChannels, size, size})));
  }
  const double n = static_cast<double>(m.n_scenes);
  m.test_loss /= n;
  m.kl_test_loss /= n;
  for (double v : scores) m.ssim_mean += v;
  m.ssim_mean /= n;
  for (double v : scores) m.ssim_std += (v - m.ssim_mean) * (v - m.ssim_mean);
  m.ssim_std = std::sqrt(m.ssim_std / n);
  return m;
}

inline std::string metrics_text(const MetricsRecord& m) {
  using detail::fmt_double;
  std::ostringstream o;
  o << "mode: " << to_string(m.mode) << "\n"
    << "checkpoint_step: " << m.checkpoint_step << "\n"
    << "n_scenes: " << m.n_scenes << "\n"
    << "context_views: " << m.context_views << "\n"
    << "queries_per_scene: 1\n"
    << "sigma: " << fmt_double(m.sigma) << "\n"
    << "train_loss: " << fmt_double(m.train_loss) << "\n"
    << "test_loss: " << fmt_double(m.test_loss) << "\n"
    << "kl_test_loss: " << fmt_double(m.kl_test_loss) << "\n"
    << "ssim_mean: " << fmt_double(m.ssim_mean) << "\n"
    << "ssim_std: " << fmt_double(m.ssim_std) << "\n";
  return o.str();
}

inline std::string metrics_csv(const MetricsRecord& m) {
  using detail::fmt_double;
  return "mode,checkpoint_step,n_scenes,context_views,sigma,train_loss,test_loss,kl_test_loss,ssim_mean,ssim_std\n" +
         to_string(m.mode) + "," + std::to_string(m.checkpoint_step) + "," + std::to_string(m.n_scenes) + "," +
         std::to_string(m.context_views) + "," + fmt_double(m.sigma) + "," + fmt_double(m.train_loss) + "," +
         fmt_double(m.test_loss) + "," + fmt_double(m.kl_test_loss) + "," + fmt_double(m.ssim_mean) + "," +
         fmt_double(m.ssim_std) + "\n";
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& s) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto b = read_file(path);
  return std::string(b.begin(), b.end());
}

}  // namespace detail

/// Writes `<report>` as key: value text and `<report>.csv` next to it.
inline std::vector<std::filesystem::path> write_metrics(const MetricsRecord& m, const std::filesystem::path& report) {
  std::filesystem::path csv = report;
  csv += ".csv";
  detail::write_text(report, metrics_text(m));
  detail::write_text(csv, metrics_csv(m));
  return {report, csv};
}

// ---- loss history ----

inline constexpr const char* kHistoryHeader =
    "step,sigma,nll,kl_total,elbo,lsgan_g,lsgan_d,fm,gan_g,gan_d,total_generator,total_discriminator";

inline std::string history_csv(const LossHistory& h) {
  using detail::fmt_double;
  std::string s = std::string(kHistoryHeader) + "\n";
  for (const auto& r : h) {
    s += std::to_string(r.step);
    for (double v : {r.sigma, r.nll, r.kl_total, r.elbo, r.lsgan_g, r.lsgan_d, r.fm, r.gan_g, r.gan_d,
                     r.total_generator, r.total_discriminator})
      s += "," + fmt_double(v);
    s += "\n";
  }
  return s;
}

inline LossHistory parse_history_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHistoryHeader) throw FormatError("not a loss-history CSV (bad header)");
  LossHistory h;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) f.push_back(tok);
    if (f.size() != 12) throw FormatError("loss-history line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields");
    auto num = [&](std::size_t i) {
      if (f[i] == "nan" || f[i] == "-nan") return std::numeric_limits<double>::quiet_NaN();
      if (f[i] == "inf") return std::numeric_limits<double>::infinity();
      if (f[i] == "-inf") return -std::numeric_limits<double>::infinity();
      return detail::parse_double(f[i]);
    };
    LossReport r;
    r.step = detail::parse_int<std::int64_t>(f[0]);
    r.sigma = num(1);
    r.nll = num(2);
    r.kl_total = num(3);
    r.elbo = num(4);
    r.lsgan_g = num(5);
    r.lsgan_d = num(6);
    r.fm = num(7);
    r.gan_g = num(8);
    r.gan_d = num(9);
    r.total_generator = num(10);
    r.total_discriminator = num(11);
    if (!h.empty() && r.step <= h.back().step) throw FormatError("loss-history steps must increase strictly");
    h.push_back(r);
  }
  return h;
}

inline LossHistory read_history_csv(const std::filesystem::path& path) {
  try {
    return parse_history_csv(detail::read_text(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---- charts ----

inline constexpr int kChartWidth = 640;
inline constexpr int kChartHeight = 480;

struct Series {
  std::vector<double> x;
  std::vector<double> y;
  Rgb color{0, 0, 0};
};

/// Line chart on a fixed 640x480 canvas with a plot frame and ten ticks per axis.
/// Non-finite points break the line.
inline Image line_chart(const std::vector<Series>& series) {
  Image img(kChartWidth, kChartHeight);
  const int left = 50, right = kChartWidth - 20, top = 20, bottom = kChartHeight - 40;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const Rgb axis{0, 0, 0}, grid{220, 220, 220};
  for (int t = 0; t <= 10; ++t) {
    const double gx = left + (right - left) * t / 10.0, gy = top + (bottom - top) * t / 10.0;
    draw_line(img, gx, top, gx, bottom, grid);
    draw_line(img, left, gy, right, gy, grid);
    draw_line(img, gx, bottom, gx, bottom + 5, axis);
    draw_line(img, left - 5, gy, left, gy, axis);
  }
  draw_line(img, left, top, left, bottom, axis);
  draw_line(img, left, bottom, right, bottom, axis);
  draw_line(img, left, top, right, top, axis);
  draw_line(img, right, top, right, bottom, axis);
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (right - left); };
  auto py = [&](double y) { return bottom - (y - y0) / (y1 - y0) * (bottom - top); };
  for (const auto& s : series) {
    bool have = false;
    double lx = 0, ly = 0;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) {
        have = false;
        continue;
      }
      const double cx = px(s.x[i]), cy = py(s.y[i]);
      if (have)
        draw_line(img, lx, ly, cx, cy, s.color);
      else
        img.set(static_cast<int>(std::lround(cx)), static_cast<int>(std::lround(cy)), s.color);
      lx = cx, ly = cy, have = true;
    }
  }
  return img;
}

inline constexpr Rgb kSeriesColors[] = {{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {148, 103, 189}};

namespace detail {

inline Series series_of(const LossHistory& h, double LossReport::*field, Rgb color) {
  Series s;
  s.color = color;
  for (const auto& r : h) {
    s.x.push_back(static_cast<double>(r.step));
    s.y.push_back(r.*field);
  }
  return s;
}

}  // namespace detail

/// Writes loss_history.csv, total_generator.ppm and total_discriminator.ppm into `out_dir`.
inline std::vector<std::filesystem::path> emit_loss_plots(const LossHistory& h, const std::filesystem::path& out_dir) {
  if (h.empty()) throw std::invalid_argument("cannot plot an empty loss history");
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> files{out_dir / "loss_history.csv", out_dir / "total_generator.ppm",
                                           out_dir / "total_discriminator.ppm"};
  detail::write_text(files[0], history_csv(h));
  write_ppm(files[1], line_chart({detail::series_of(h, &LossReport::total_generator, kSeriesColors[0])}));
  write_ppm(files[2], line_chart({detail::series_of(h, &LossReport::total_discriminator, kSeriesColors[1])}));
  return files;
}

struct LabeledHistory {
  std::string label;
  LossHistory history;
};

/// Outer join on step. For each run the columns <label>_elbo, <label>_total_generator and
/// <label>_total_discriminator; steps missing from a run leave its cells empty.
inline std::string comparison_csv(const std::vector<LabeledHistory>& runs) {
  static constexpr std::pair<const char*, double LossReport::*> kCols[] = {
      {"elbo", &LossReport::elbo},
      {"total_generator", &LossReport::total_generator},
      {"total_discriminator", &LossReport::total_discriminator}};
  std::map<std::int64_t, std::vector<std::string>> rows;
  const std::size_t width = runs.size() * std::size(kCols);
  for (std::size_t k = 0; k < runs.size(); ++k)
    for (const auto& r : runs[k].history) {
      auto& row = rows[r.step];
      row.resize(width);
      for (std::size_t c = 0; c < std::size(kCols); ++c) row[k * std::size(kCols) + c] = detail::fmt_double(r.*kCols[c].second);
    }
  std::string s = "step";
  for (const auto& run : runs)
    for (const auto& [name, _] : kCols) s += "," + run.label + "_" + name;
  s += "\n";
  for (const auto& [step, row] : rows) {
    s += std::to_string(step);
    for (const auto& cell : row) s += "," + cell;
    s += "\n";
  }
  return s;
}

/// comparison.csv plus overlay charts of the generator and discriminator losses, one
/// colour per run in input order.
inline std::vector<std::filesystem::path> emit_comparison(const std::vector<LabeledHistory>& runs,
                                                          const std::filesystem::path& out_dir) {
  if (runs.empty()) throw std::invalid_argument("no histories to compare");
  for (const auto& r : runs)
    if (r.history.empty()) throw std::invalid_argument("history '" + r.label + "' is empty");
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> files{out_dir / "comparison.csv", out_dir / "comparison_total_generator.ppm",
                                           out_dir / "comparison_total_discriminator.ppm"};
  detail::write_text(files[0], comparison_csv(runs));
  std::vector<Series> g, d;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const Rgb c = kSeriesColors[i % std::size(kSeriesColors)];
    g.push_back(detail::series_of(runs[i].history, &LossReport::total_generator, c));
    d.push_back(detail::series_of(runs[i].history, &LossReport::total_discriminator, c));
  }
  write_ppm(files[1], line_chart(g));
  write_ppm(files[2], line_chart(d));
  return files;
}

// ---- qualitative grid ----

/// One row: context views, ground-truth query view, prior sample for the query pose.
inline Image grid_image(TrainState& s, std::span<const SceneRecord> data, int scene, std::uint64_t seed) {
  if (scene < 0 || static_cast<std::size_t>(scene) >= data.size())
    throw std::out_of_range("scene index " + std::to_string(scene) + " out of range [0, " +
                            std::to_string(data.size()) + ")");
  const int size = s.cfg.model.draw.image_size;
  const TupleChoice ch = eval_choice(data[static_cast<std::size_t>(scene)], scene, seed);
  const Batch b = assemble_batch(data, std::span(&ch, 1));
  Tape<float> tape(false);
  const Var<float> r =
      aggregate_context(encode_views(tape, s.enc, tape.constant(b.context_frames), b.context_poses), b.owner, 1);
  const Var<float> x = draw_generate(tape, s.draw, r, b.query_poses, s.cfg.model.draw.steps,
                                     derive_seed(seed, {kRenderTag, static_cast<std::uint64_t>(scene)}));
  const int n = static_cast<int>(ch.context.size());
  Image grid((n + 2) * size, size);
  const auto& views = data[static_cast<std::size_t>(scene)].views;
  for (int j = 0; j < n; ++j) blit(grid, frame_image(views[static_cast<std::size_t>(ch.context[static_cast<std::size_t>(j)])].frame), j * size, 0);
  blit(grid, frame_image(views[static_cast<std::size_t>(ch.query)].frame), n * size, 0);
  blit(grid, frame_image(x.value().reshaped({kChannels, size, size})), (n + 1) * size, 0);
  return grid;
}

inline Image render_grid(TrainState& s, std::span<const SceneRecord> data, int scene, std::uint64_t seed,
                         const std::filesystem::path& out) {
  Image g = grid_image(s, data, scene, seed);
  write_ppm(out, g);
  return g;
}

}  // namespace gaqn
