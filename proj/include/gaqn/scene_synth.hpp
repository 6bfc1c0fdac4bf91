#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gaqn/dataset.hpp"
#include "gaqn/rng.hpp"

namespace gaqn {

using Vec3 = Eigen::Vector3d;

enum class ShapeKind { sphere, cube, icosahedron };

/// One object in the room. `scale` is the sphere radius, the cube half-edge or the
/// icosahedron circumradius.
struct ObjectSpec {
  ShapeKind shape = ShapeKind::sphere;
  Vec3 center = Vec3::Zero();
  double scale = 0.5;
  Vec3 albedo = Vec3::Constant(0.5);
  bool operator==(const ObjectSpec&) const = default;
};

/// Room interior: x and z in [-half_extent, half_extent], y in [floor_y, ceiling_y].
struct SceneSpec {
  double room_half_extent = 4.0;
  double floor_y = -1.0;
  double ceiling_y = 3.0;
  Vec3 wall_albedo = Vec3::Constant(0.7);
  Vec3 floor_albedo = Vec3::Constant(0.5);
  std::vector<ObjectSpec> objects;
  Vec3 light_dir = Vec3(0.0, 1.0, 0.0);  // unit vector pointing toward the light
  std::uint64_t seed = 0;
  bool operator==(const SceneSpec&) const = default;
};

/// Cameras on a horizontal ring around the look-at point, all aimed at it.
struct CameraRingConfig {
  double radius = 3.0;
  double height = 1.0;  // above the look-at point
  Vec3 look_at = Vec3::Zero();
  double fov_deg = 60.0;
};

struct SceneGenConfig {
  double room_half_extent = 4.0;
  double floor_y = -1.0;
  double ceiling_y = 3.0;
  int min_objects = 1;
  int max_objects = 3;
  double min_scale = 0.3;
  double max_scale = 1.0;
  // Object centres are drawn from a disc of this radius around the room axis.
  double placement_radius = 1.8;
  CameraRingConfig ring;
  int image_size = kImageSize;
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit length
};

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal = Vec3::Zero();  // faces the incoming ray
  Vec3 albedo = Vec3::Zero();
  int primitive = -1;  // object index, or -1 for the room shell
};

inline constexpr double kAmbient = 0.3;
inline constexpr double kDiffuse = 0.7;
inline constexpr double kRayEpsilon = 1e-9;

inline void validate(const CameraRingConfig& ring, double room_half_extent) {
  if (!(ring.radius < room_half_extent)) throw std::invalid_argument("camera ring radius must be inside the room");
  if (!(ring.fov_deg > 10.0 && ring.fov_deg < 120.0)) throw std::invalid_argument("fov must lie in (10, 120) degrees");
}

/// Checks every SceneSpec invariant; throws std::invalid_argument naming the first violation.
inline void validate(const SceneSpec& s) {
  auto in01 = [](const Vec3& c) { return (c.array() >= 0.0).all() && (c.array() <= 1.0).all(); };
  if (s.objects.empty() || s.objects.size() > 3) throw std::invalid_argument("scene must hold 1 to 3 objects");
  if (!in01(s.wall_albedo) || !in01(s.floor_albedo)) throw std::invalid_argument("room albedo outside [0,1]");
  if (std::abs(s.light_dir.norm() - 1.0) > 1e-6) throw std::invalid_argument("light direction is not unit length");
  for (const auto& o : s.objects) {
    if (!(o.scale >= 0.2 && o.scale <= 1.0)) throw std::invalid_argument("object scale outside [0.2, 1.0]");
    if (!in01(o.albedo)) throw std::invalid_argument("object albedo outside [0,1]");
    const double e = s.room_half_extent - o.scale;
    if (std::abs(o.center.x()) > e || std::abs(o.center.z()) > e || o.center.y() < s.floor_y + o.scale ||
        o.center.y() > s.ceiling_y - o.scale)
      throw std::invalid_argument("object does not fit inside the room");
  }
}

namespace detail {

inline double wrap_yaw(double a) {
  const double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a + std::numbers::pi, two_pi);
  if (a < 0) a += two_pi;
  return a - std::numbers::pi;
}

inline Vec3 random_color(Rng& rng, double lo, double hi) {
  return Vec3(rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi));
}

/// Unit-circumradius icosahedron triangles from the golden-ratio vertex set.
inline const std::vector<std::array<Vec3, 3>>& unit_icosahedron() {
  static const std::vector<std::array<Vec3, 3>> faces = [] {
    const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Vec3> v;
    for (double a : {-1.0, 1.0})
      for (double b : {-phi, phi}) {
        v.emplace_back(0.0, a, b);
        v.emplace_back(a, b, 0.0);
        v.emplace_back(b, 0.0, a);
      }
    // Faces are the vertex triples whose pairwise distances all equal the edge length 2.
    std::vector<std::array<Vec3, 3>> f;
    auto edge = [&](int i, int j) { return std::abs((v[i] - v[j]).norm() - 2.0) < 1e-9; };
    const int n = static_cast<int>(v.size());
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        for (int k = j + 1; k < n; ++k)
          if (edge(i, j) && edge(j, k) && edge(i, k)) {
            const double r = v[i].norm();
            f.push_back({v[i] / r, v[j] / r, v[k] / r});
          }
    return f;
  }();
  return faces;
}

inline std::optional<double> ray_triangle(const Ray& ray, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 p = ray.dir.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-12) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 s = ray.origin - a;
  const double u = s.dot(p) * inv;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  const Vec3 q = s.cross(e1);
  const double w = ray.dir.dot(q) * inv;
  if (w < 0.0 || u + w > 1.0) return std::nullopt;
  const double t = e2.dot(q) * inv;
  if (t <= kRayEpsilon) return std::nullopt;
  return t;
}

inline Vec3 facing(const Vec3& n, const Vec3& dir) { return n.dot(dir) > 0.0 ? Vec3(-n) : n; }

}  // namespace detail

inline SceneSpec sample_scene_spec(std::uint64_t seed, const SceneGenConfig& cfg = {}) {
  Rng rng(derive_seed(seed, {0x5ce4e}));
  SceneSpec s;
  s.seed = seed;
  s.room_half_extent = cfg.room_half_extent;
  s.floor_y = cfg.floor_y;
  s.ceiling_y = cfg.ceiling_y;
  s.wall_albedo = detail::random_color(rng, 0.15, 1.0);
  s.floor_albedo = detail::random_color(rng, 0.15, 1.0);
  // Light comes from above the horizon so the floor is lit.
  Vec3 l(rng.uniform(-1.0, 1.0), rng.uniform(0.35, 1.0), rng.uniform(-1.0, 1.0));
  s.light_dir = l.normalized();
  const int count = cfg.min_objects + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_objects - cfg.min_objects + 1)));
  for (int i = 0; i < count; ++i) {
    ObjectSpec o;
    o.shape = static_cast<ShapeKind>(rng.below(3));
    o.scale = rng.uniform(cfg.min_scale, cfg.max_scale);
    const double r = cfg.placement_radius * std::sqrt(rng.uniform());
    const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double lim = cfg.room_half_extent - o.scale;
    o.center = Vec3(std::clamp(r * std::cos(a), -lim, lim), cfg.floor_y + o.scale,
                    std::clamp(r * std::sin(a), -lim, lim));
    o.albedo = detail::random_color(rng, 0.1, 1.0);
    s.objects.push_back(o);
  }
  return s;
}

/// Intersection with the room's interior shell (four walls, floor, ceiling).
inline Hit intersect_room(const SceneSpec& s, const Ray& ray) {
  Hit best;
  auto plane = [&](int axis, double value, const Vec3& inward, const Vec3& albedo) {
    const double d = ray.dir[axis];
    if (std::abs(d) < 1e-15) return;
    const double t = (value - ray.origin[axis]) / d;
    if (t > kRayEpsilon && t < best.t) best = {t, inward, albedo, -1};
  };
  const double e = s.room_half_extent;
  plane(0, e, Vec3(-1, 0, 0), s.wall_albedo);
  plane(0, -e, Vec3(1, 0, 0), s.wall_albedo);
  plane(2, e, Vec3(0, 0, -1), s.wall_albedo);
  plane(2, -e, Vec3(0, 0, 1), s.wall_albedo);
  plane(1, s.floor_y, Vec3(0, 1, 0), s.floor_albedo);
  plane(1, s.ceiling_y, Vec3(0, -1, 0), s.wall_albedo);
  return best;
}

/// Nearest positive intersection with a single object, if any.
inline std::optional<Hit> intersect_object(const ObjectSpec& o, const Ray& ray, int index = 0) {
  switch (o.shape) {
    case ShapeKind::sphere: {
      const Vec3 oc = ray.origin - o.center;
      const double b = oc.dot(ray.dir);
      const double c = oc.squaredNorm() - o.scale * o.scale;
      const double disc = b * b - c;
      if (disc < 0) return std::nullopt;
      const double sq = std::sqrt(disc);
      double t = -b - sq;
      if (t <= kRayEpsilon) t = -b + sq;
      if (t <= kRayEpsilon) return std::nullopt;
      const Vec3 n = (ray.origin + t * ray.dir - o.center).normalized();
      return Hit{t, detail::facing(n, ray.dir), o.albedo, index};
    }
    case ShapeKind::cube: {
      double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
      int axis0 = 0, axis1 = 0;
      for (int a = 0; a < 3; ++a) {
        const double lo = o.center[a] - o.scale, hi = o.center[a] + o.scale;
        if (std::abs(ray.dir[a]) < 1e-15) {
          if (ray.origin[a] < lo || ray.origin[a] > hi) return std::nullopt;
          continue;
        }
        double ta = (lo - ray.origin[a]) / ray.dir[a], tb = (hi - ray.origin[a]) / ray.dir[a];
        if (ta > tb) std::swap(ta, tb);
        if (ta > t0) t0 = ta, axis0 = a;
        if (tb < t1) t1 = tb, axis1 = a;
      }
      if (t0 > t1) return std::nullopt;
      double t = t0;
      int axis = axis0;
      if (t <= kRayEpsilon) t = t1, axis = axis1;
      if (t <= kRayEpsilon) return std::nullopt;
      Vec3 n = Vec3::Zero();
      n[axis] = 1.0;
      return Hit{t, detail::facing(n, ray.dir), o.albedo, index};
    }
    case ShapeKind::icosahedron: {
      std::optional<Hit> best;
      for (const auto& f : detail::unit_icosahedron()) {
        const Vec3 a = o.center + o.scale * f[0], b = o.center + o.scale * f[1], c = o.center + o.scale * f[2];
        if (auto t = detail::ray_triangle(ray, a, b, c); t && (!best || *t < best->t)) {
          const Vec3 n = (b - a).cross(c - a).normalized();
          best = Hit{*t, detail::facing(n, ray.dir), o.albedo, index};
        }
      }
      return best;
    }
  }
  return std::nullopt;
}

/// Nearest hit over all objects and the room shell.
inline Hit cast_ray(const SceneSpec& s, const Ray& ray) {
  Hit best = intersect_room(s, ray);
  for (std::size_t i = 0; i < s.objects.size(); ++i)
    if (auto h = intersect_object(s.objects[i], ray, static_cast<int>(i)); h && h->t < best.t) best = *h;
  return best;
}

inline Vec3 shade(const SceneSpec& s, const Hit& h) {
  return h.albedo * (kAmbient + kDiffuse * std::max(0.0, h.normal.dot(s.light_dir)));
}

/// Viewing direction for yaw/pitch: (cos p cos y, sin p, cos p sin y).
inline Vec3 forward_dir(double yaw, double pitch) {
  return Vec3(std::cos(pitch) * std::cos(yaw), std::sin(pitch), std::cos(pitch) * std::sin(yaw));
}

/// Primary ray through the centre of pixel (row, col) of a size x size pinhole image.
inline Ray camera_ray(const PoseRaw& pose, int row, int col, int size = kImageSize, double fov_deg = 60.0) {
  const Vec3 f = forward_dir(pose.yaw, pose.pitch);
  Vec3 right = f.cross(Vec3::UnitY());
  if (right.norm() < 1e-9) right = Vec3::UnitZ();
  right.normalize();
  const Vec3 up = right.cross(f);
  const double tan_half = std::tan(fov_deg * std::numbers::pi / 360.0);
  const double u = (2.0 * (col + 0.5) / size - 1.0) * tan_half;
  const double v = (1.0 - 2.0 * (row + 0.5) / size) * tan_half;
  return {Vec3(pose.x, pose.y, pose.z), (f + u * right + v * up).normalized()};
}

inline bool pose_inside_room(const SceneSpec& s, const PoseRaw& p) {
  const double e = s.room_half_extent;
  return std::abs(p.x) < e && std::abs(p.z) < e && p.y > s.floor_y && p.y < s.ceiling_y;
}

/// Ray-cast Lambertian render of one view.
inline Frame render_view(const SceneSpec& s, const PoseRaw& pose, int size = kImageSize, double fov_deg = 60.0) {
  if (!pose_inside_room(s, pose)) throw std::invalid_argument("camera outside room");
  Frame f = make_frame(size);
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      const Vec3 col = shade(s, cast_ray(s, camera_ray(pose, r, c, size, fov_deg)));
      for (int ch = 0; ch < kChannels; ++ch)
        f[ch * plane + static_cast<std::size_t>(r) * size + c] = static_cast<float>(std::clamp(col[ch], 0.0, 1.0));
    }
  return f;
}

/// K poses at uniformly spaced ring angles (random phase), each aimed at the look-at point.
inline std::vector<PoseRaw> ring_poses(int k, const CameraRingConfig& ring, double phase = 0.0) {
  std::vector<PoseRaw> poses;
  for (int i = 0; i < k; ++i) {
    const double a = phase + 2.0 * std::numbers::pi * i / k;
    const Vec3 eye = ring.look_at + Vec3(ring.radius * std::cos(a), ring.height, ring.radius * std::sin(a));
    const Vec3 d = ring.look_at - eye;
    PoseRaw p;
    p.x = static_cast<float>(eye.x());
    p.y = static_cast<float>(eye.y());
    p.z = static_cast<float>(eye.z());
    p.yaw = static_cast<float>(detail::wrap_yaw(std::atan2(d.z(), d.x())));
    if (p.yaw >= static_cast<float>(std::numbers::pi)) p.yaw = -static_cast<float>(std::numbers::pi);
    p.pitch = static_cast<float>(std::atan2(d.y(), std::hypot(d.x(), d.z())));
    poses.push_back(p);
  }
  return poses;
}

inline SceneRecord render_scene(std::uint64_t scene_seed, int k, const SceneGenConfig& cfg = {}) {
  const SceneSpec spec = sample_scene_spec(scene_seed, cfg);
  Rng rng(derive_seed(scene_seed, {0x7a5e}));
  SceneRecord rec;
  for (const auto& p : ring_poses(k, cfg.ring, rng.uniform(0.0, 2.0 * std::numbers::pi)))
    rec.views.push_back({p, render_view(spec, p, cfg.image_size, cfg.ring.fov_deg)});
  return rec;
}

inline std::vector<SceneRecord> generate_records(int n_scenes, int k, std::uint64_t seed, const SceneGenConfig& cfg = {}) {
  if (n_scenes < 1) throw std::invalid_argument("need at least one scene");
  if (k < 2) throw std::invalid_argument("need at least two views per scene");
  validate(cfg.ring, cfg.room_half_extent);
  std::vector<SceneRecord> out;
  out.reserve(static_cast<std::size_t>(n_scenes));
  for (int i = 0; i < n_scenes; ++i) out.push_back(render_scene(derive_seed(seed, {static_cast<std::uint64_t>(i)}), k, cfg));
  return out;
}

inline DatasetSummary generate_dataset(int n_scenes, int k, std::uint64_t seed, const std::filesystem::path& out,
                                       const SceneGenConfig& cfg = {}) {
  const auto records = generate_records(n_scenes, k, seed, cfg);
  DatasetSummary sum;
  sum.n_scenes = static_cast<std::uint32_t>(n_scenes);
  sum.views_per_scene = static_cast<std::uint32_t>(k);
  sum.checksum = write_dataset(records, out);
  sum.bytes = dataset_file_bytes(records.size(), static_cast<std::size_t>(k), cfg.image_size);
  return sum;
}

}  // namespace gaqn
