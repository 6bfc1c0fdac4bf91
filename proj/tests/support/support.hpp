#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "gaqn/gaqn.hpp"

namespace gaqn::testkit {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("gaqn_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

struct GradCheckResult {
  int probed = 0;
  int passed = 0;
  double worst = 0;

  double pass_rate() const { return probed ? static_cast<double>(passed) / probed : 0.0; }
};

/// Compares tape gradients with central differences at `probes` scalar parameters drawn
/// uniformly over all elements of `sets`. A probe passes when the two agree to `tol`
/// relative, or both are below `floor` in magnitude.
inline GradCheckResult grad_check(const std::vector<ParameterSet<double>*>& sets,
                                  const std::function<Var<double>(Tape<double>&)>& loss, int probes,
                                  std::uint64_t seed, double h = 1e-4, double tol = 1e-3, double floor = 1e-8) {
  for (auto* ps : sets) ps->zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  std::vector<Parameter<double>*> flat;
  std::vector<std::size_t> offsets{0};
  for (auto* ps : sets)
    for (auto& p : *ps) {
      flat.push_back(&p);
      offsets.push_back(offsets.back() + p.value.size());
    }
  auto eval = [&]() {
    Tape<double> tape(false);
    return static_cast<double>(loss(tape).value()[0]);
  };
  Rng rng(seed);
  GradCheckResult res;
  for (int i = 0; i < probes; ++i) {
    const std::size_t flat_index = rng.below(offsets.back());
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat_index) - 1;
    Parameter<double>& p = *flat[static_cast<std::size_t>(it - offsets.begin())];
    const std::size_t j = flat_index - *it;
    const double saved = p.value[j];
    p.value[j] = saved + h;
    const double up = eval();
    p.value[j] = saved - h;
    const double down = eval();
    p.value[j] = saved;
    const double fd = (up - down) / (2 * h), an = p.grad[j];
    const double scale = std::max(std::abs(fd), std::abs(an));
    const double rel = scale < floor ? 0.0 : std::abs(fd - an) / scale;
    res.worst = std::max(res.worst, rel);
    ++res.probed;
    if (rel <= tol) ++res.passed;
  }
  return res;
}

template <class T>
Tensor<T> random_tensor(std::vector<int> shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Small model and data for fast trainer tests: 32 px images, narrow layers.
inline TrainConfig tiny_config(Mode mode = Mode::gaqn) {
  TrainConfig c;
  c.mode = mode;
  c.steps = 4;
  c.batch_size = 2;
  c.seed = 11;
  auto& m = c.model;
  m.encoder = {32, 4, 8, 8};
  m.draw.image_size = 32;
  m.draw.repr_channels = 8;
  m.draw.hidden = 8;
  m.draw.latent = 2;
  m.draw.canvas_channels = 4;
  m.draw.steps = 2;
  m.disc.image_size = 32;
  m.disc.widths = {4, 8, 8, 8, 8, 8};
  return c;
}

inline std::vector<SceneRecord> tiny_records(int scenes = 2, int views = 4, std::uint64_t seed = 5) {
  SceneGenConfig g;
  g.image_size = 32;
  return generate_records(scenes, views, seed, g);
}

}  // namespace gaqn::testkit
