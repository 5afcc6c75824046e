#pragma once

// Procedural synthetic scenes with analytic ground-truth depth and metric
// poses. A closed textured room is ray-cast per pixel; depth is the
// camera-frame z of the nearest hit, so rendered sequences satisfy the
// multi-view geometry the training losses assume, exactly.
//
// World frame: right-handed with +y pointing down (matching the camera
// convention where image v grows downward), floor at positive y.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mdt/camera.hpp"
#include "mdt/common.hpp"
#include "mdt/dataio.hpp"
#include "mdt/geometry.hpp"

namespace mdt {

// ---------------------------------------------------------------------------
// Deterministic hashing and value noise
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Uniform double in [0,1) from a 64-bit key (top 53 bits).
inline double hash_unit(std::uint64_t key) {
  return static_cast<double>(splitmix64(key) >> 11) * 0x1p-53;
}

inline std::uint64_t lattice_key(std::int64_t x, std::int64_t y, std::int64_t z,
                                 std::uint64_t seed) {
  std::uint64_t h = splitmix64(seed ^ static_cast<std::uint64_t>(x));
  h = splitmix64(h ^ static_cast<std::uint64_t>(y));
  h = splitmix64(h ^ static_cast<std::uint64_t>(z));
  return h;
}

/// Trilinearly interpolated lattice noise in [0,1], smoothstep fade,
/// bit-deterministic in the seed and position.
inline double value_noise3(const Eigen::Vector3d& p, std::uint64_t seed) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto ix = static_cast<std::int64_t>(fx);
  const auto iy = static_cast<std::int64_t>(fy);
  const auto iz = static_cast<std::int64_t>(fz);
  const double tx = p.x() - fx, ty = p.y() - fy, tz = p.z() - fz;
  auto fade = [](double t) { return t * t * (3.0 - 2.0 * t); };
  const double sx = fade(tx), sy = fade(ty), sz = fade(tz);
  auto corner = [&](int dx, int dy, int dz) {
    return hash_unit(lattice_key(ix + dx, iy + dy, iz + dz, seed));
  };
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  const double c00 = lerp(corner(0, 0, 0), corner(1, 0, 0), sx);
  const double c10 = lerp(corner(0, 1, 0), corner(1, 1, 0), sx);
  const double c01 = lerp(corner(0, 0, 1), corner(1, 0, 1), sx);
  const double c11 = lerp(corner(0, 1, 1), corner(1, 1, 1), sx);
  return lerp(lerp(c00, c10, sy), lerp(c01, c11, sy), sz);
}

struct TextureSpec {
  int octaves = 4;
  double base_frequency = 0.7;  // cycles per meter at the first octave
  double lacunarity = 2.0;
  // Octave amplitude falloff. 0.65 keeps strong detail in the higher octaves
  // (still band-limited at the render resolution), which sharpens the
  // photometric minimum around the true depth.
  double gain = 0.65;
};

/// Octave sum of value noise, normalized back into [0,1].
inline double octave_noise3(const Eigen::Vector3d& p, std::uint64_t seed,
                            const TextureSpec& tex) {
  double sum = 0, norm = 0, amp = 1, freq = tex.base_frequency;
  for (int k = 0; k < tex.octaves; ++k) {
    sum += amp * value_noise3(p * freq, splitmix64(seed + static_cast<std::uint64_t>(k)));
    norm += amp;
    amp *= tex.gain;
    freq *= tex.lacunarity;
  }
  return sum / norm;
}

// ---------------------------------------------------------------------------
// Primitives and scenes
// ---------------------------------------------------------------------------

/// Finite plane patch: corner plus two orthogonal edge vectors (meters).
struct TexturedRect {
  Eigen::Vector3d origin, edge_u, edge_v;
};

/// Axis-aligned box; cameras are assumed to stay outside of it.
struct TexturedBox {
  Eigen::Vector3d lo, hi;
};

struct SceneSpec {
  std::vector<TexturedRect> rects;
  std::vector<TexturedBox> boxes;
  TextureSpec texture;
  std::uint64_t seed = 1;
};

namespace detail {

inline constexpr double kRayEps = 1e-9;
inline constexpr double kMiss = std::numeric_limits<double>::infinity();

inline double hit_rect(const TexturedRect& r, const Eigen::Vector3d& o,
                       const Eigen::Vector3d& d) {
  const Eigen::Vector3d n = r.edge_u.cross(r.edge_v);
  const double denom = d.dot(n);
  if (std::abs(denom) < 1e-12) return kMiss;
  const double t = (r.origin - o).dot(n) / denom;
  if (t <= kRayEps) return kMiss;
  const Eigen::Vector3d q = o + t * d - r.origin;
  const double su = q.dot(r.edge_u) / r.edge_u.squaredNorm();
  const double sv = q.dot(r.edge_v) / r.edge_v.squaredNorm();
  if (su < -1e-9 || su > 1.0 + 1e-9 || sv < -1e-9 || sv > 1.0 + 1e-9) return kMiss;
  return t;
}

inline double hit_box(const TexturedBox& b, const Eigen::Vector3d& o,
                      const Eigen::Vector3d& d) {
  double t_enter = -kMiss, t_exit = kMiss;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < b.lo[a] || o[a] > b.hi[a]) return kMiss;
      continue;
    }
    const double t0 = (b.lo[a] - o[a]) / d[a];
    const double t1 = (b.hi[a] - o[a]) / d[a];
    t_enter = std::max(t_enter, std::min(t0, t1));
    t_exit = std::min(t_exit, std::max(t0, t1));
  }
  if (t_exit < t_enter || t_enter <= kRayEps) return kMiss;
  return t_enter;
}

}  // namespace detail

/// RGB albedo at a world point: one octave-noise field per channel.
inline Eigen::Vector3d scene_color(const SceneSpec& scene, const Eigen::Vector3d& p) {
  Eigen::Vector3d c;
  for (int ch = 0; ch < 3; ++ch)
    c[ch] = octave_noise3(p, splitmix64(scene.seed ^ (0x517cc1b7ull + static_cast<std::uint64_t>(ch))),
                          scene.texture);
  return c;
}

struct RenderResult {
  Tensor image;   // 3 channels in [0,1]; black where no primitive is hit
  DepthMap depth; // camera-frame z of the nearest hit; 0 and invalid at misses
};

/// Per-pixel nearest-hit ray cast. Ray directions are normalized to unit
/// camera-frame z, so the ray parameter equals the camera-frame depth.
inline RenderResult render(const SceneSpec& scene, const CameraIntrinsics& K,
                           const PoseSE3& world_from_cam) {
  K.validate();
  const int H = K.height, W = K.width;
  RenderResult out;
  out.image = Tensor::zeros(3, H, W);
  out.depth.values = Grid::Zero(H, W);
  out.depth.valid = Mask::Constant(H, W, false);
  const Eigen::Vector3d o = world_from_cam.t;
  for (int v = 0; v < H; ++v) {
    for (int u = 0; u < W; ++u) {
      const Eigen::Vector3d dir_cam((u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0);
      const Eigen::Vector3d d = world_from_cam.R * dir_cam;
      double best = detail::kMiss;
      for (const TexturedRect& r : scene.rects)
        best = std::min(best, detail::hit_rect(r, o, d));
      for (const TexturedBox& b : scene.boxes)
        best = std::min(best, detail::hit_box(b, o, d));
      if (!std::isfinite(best)) continue;
      out.depth.values(v, u) = best;
      out.depth.valid(v, u) = true;
      const Eigen::Vector3d color = scene_color(scene, o + best * d);
      for (int ch = 0; ch < 3; ++ch) out.image.ch[ch](v, u) = color[ch];
    }
  }
  return out;
}

/// Closed 8x3.3x8 m room (walls at x,z = +/-4, floor y=+1.5, ceiling
/// y=-1.8) with three boxes standing on the floor clear of the camera orbit.
/// Every interior ray hits geometry; depths span roughly 1-10 m.
inline SceneSpec default_room_scene(std::uint64_t seed) {
  SceneSpec s;
  s.seed = seed;
  const double x0 = -4, x1 = 4, z0 = -4, z1 = 4, yf = 1.5, yc = -1.8;
  auto rect = [&](Eigen::Vector3d origin, Eigen::Vector3d eu, Eigen::Vector3d ev) {
    s.rects.push_back({origin, eu, ev});
  };
  const Eigen::Vector3d ex(x1 - x0, 0, 0), ez(0, 0, z1 - z0), ey(0, yf - yc, 0);
  rect({x0, yf, z0}, ex, ez);  // floor
  rect({x0, yc, z0}, ex, ez);  // ceiling
  rect({x0, yc, z0}, ey, ez);  // wall x = -4
  rect({x1, yc, z0}, ey, ez);  // wall x = +4
  rect({x0, yc, z0}, ex, ey);  // wall z = -4
  rect({x0, yc, z1}, ex, ey);  // wall z = +4
  s.boxes.push_back({{2.0, 0.6, 2.0}, {2.9, yf, 2.9}});
  s.boxes.push_back({{-3.4, 0.3, -0.6}, {-2.3, yf, 0.6}});
  s.boxes.push_back({{0.3, 0.9, -3.5}, {1.3, yf, -2.5}});
  return s;
}

// ---------------------------------------------------------------------------
// Sequence generation
// ---------------------------------------------------------------------------

struct SynthConfig {
  int frames = 120;
  int width = 96, height = 64;
  double fx = 80, fy = 80;
  double fps = 30.0;
  std::uint64_t seed = 1;
  double orbit_radius = 1.1;
  double orbit_revolutions = 2.5;  // over the whole sequence
  // teacher distortion, applied per frame in inverse-depth space
  double teacher_scale_lo = 0.3, teacher_scale_hi = 3.0;
  double teacher_shift_frac = 0.1;  // of the frame's inverse-depth range
  bool write_teacher = true;
  bool write_gt = true;

  void validate() const {
    if (frames < 1 || width < 2 || height < 2 || fx <= 0 || fy <= 0 || fps <= 0)
      throw ConfigError("synth: frames/resolution/intrinsics out of range");
    if (!(teacher_scale_lo > 0) || teacher_scale_hi < teacher_scale_lo)
      throw ConfigError("synth: teacher scale range invalid");
  }
};

inline CameraIntrinsics make_intrinsics(const SynthConfig& cfg) {
  CameraIntrinsics k;
  k.fx = cfg.fx;
  k.fy = cfg.fy;
  k.cx = (cfg.width - 1) / 2.0;
  k.cy = (cfg.height - 1) / 2.0;
  k.width = cfg.width;
  k.height = cfg.height;
  return k;
}

/// Smooth orbit inside the room: the camera circles the center with a gentle
/// vertical bob, looking ahead along its path toward the walls. The default
/// config covers 2.5 revolutions in 120 frames, a baseline of about 14 cm
/// per frame -- large enough that depth errors produce multi-pixel
/// reprojection errors at this focal length.
inline PoseSE3 orbit_pose(const SynthConfig& cfg, int frame) {
  const double theta = 2.0 * M_PI * cfg.orbit_revolutions * frame / cfg.frames;
  const double r = cfg.orbit_radius;
  const Eigen::Vector3d eye(r * std::cos(theta), 0.1 * std::sin(2.0 * theta),
                            r * std::sin(theta));
  const double ahead = theta + 0.45;
  const Eigen::Vector3d target(2.4 * std::cos(ahead), 0.18 * std::sin(2.0 * ahead + 1.0),
                               2.4 * std::sin(ahead));
  const Eigen::Vector3d z = (target - eye).normalized();
  // level camera: x horizontal, y (image-down) toward world +y
  const Eigen::Vector3d x = Eigen::Vector3d(0, 1, 0).cross(z).normalized();
  const Eigen::Vector3d y = z.cross(x);
  PoseSE3 p;
  p.R.col(0) = x;
  p.R.col(1) = y;
  p.R.col(2) = z;
  p.t = eye;
  return p;
}

/// Render a full dataset in the dataio layout. Ground truth is written in
/// depth space (0 = invalid); the simulated teacher is the ground-truth
/// inverse depth under a per-frame random affine distortion (monotone scale
/// in [scale_lo, scale_hi], shift within +/- shift_frac of the frame's
/// inverse-depth range, nudged up if needed to keep values positive).
inline void generate_sequence(const std::string& root, const SynthConfig& cfg,
                              const std::function<PoseSE3(int)>& pose_fn = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(root + "/images");
  if (cfg.write_gt) fs::create_directories(root + "/gt_depth");
  if (cfg.write_teacher) fs::create_directories(root + "/teacher");

  const CameraIntrinsics K = make_intrinsics(cfg);
  const SceneSpec scene = default_room_scene(cfg.seed);
  save_intrinsics(root + "/intrinsics.txt", K);

  Trajectory traj;
  std::ofstream times(root + "/times.txt");
  if (!times) throw DataError("cannot write times.txt in " + root);
  char buf[64];
  for (int i = 0; i < cfg.frames; ++i) {
    const double ts = i / cfg.fps;
    std::snprintf(buf, sizeof(buf), "%.6f\n", ts);
    times << buf;
    traj.entries.push_back({ts, pose_fn ? pose_fn(i) : orbit_pose(cfg, i)});
  }
  times.close();
  save_trajectory(root + "/trajectory.txt", traj);

  for (int i = 0; i < cfg.frames; ++i) {
    const RenderResult r = render(scene, K, traj.entries[static_cast<std::size_t>(i)].pose);
    write_ppm(root + "/images/" + frame_name(i, ".ppm"), r.image);
    if (cfg.write_gt) {
      Grid gt = r.depth.values;  // misses already carry 0
      write_depth_file(root + "/gt_depth/" + frame_name(i, ".dpt"), gt,
                       DepthKind::kDepth);
    }
    if (cfg.write_teacher) {
      Grid inv = Grid::Zero(r.depth.values.rows(), r.depth.values.cols());
      double lo = detail::kMiss, hi = -detail::kMiss;
      for (int y = 0; y < inv.rows(); ++y)
        for (int x = 0; x < inv.cols(); ++x)
          if (r.depth.valid(y, x)) {
            inv(y, x) = 1.0 / r.depth.values(y, x);
            lo = std::min(lo, inv(y, x));
            hi = std::max(hi, inv(y, x));
          }
      std::mt19937_64 rng(splitmix64(cfg.seed ^ (0x7e4c9d2full + static_cast<std::uint64_t>(i))));
      std::uniform_real_distribution<double> us(cfg.teacher_scale_lo, cfg.teacher_scale_hi);
      const double range = (hi > lo) ? (hi - lo) : 0.0;
      std::uniform_real_distribution<double> ub(-cfg.teacher_shift_frac * range,
                                                cfg.teacher_shift_frac * range);
      const double s = us(rng);
      double b = ub(rng);
      if (std::isfinite(lo) && s * lo + b < 1e-4) b = 1e-4 - s * lo;
      for (int y = 0; y < inv.rows(); ++y)
        for (int x = 0; x < inv.cols(); ++x)
          if (r.depth.valid(y, x)) inv(y, x) = s * inv(y, x) + b;
      write_depth_file(root + "/teacher/" + frame_name(i, ".dpt"), inv,
                       DepthKind::kInverseDepth);
    }
  }
}

}  // namespace mdt
