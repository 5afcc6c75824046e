#pragma once

// Dataset ingestion: PPM images, binary depth files, TUM trajectories,
// intrinsics, frame association, and training-triplet assembly.
//
// Layout of a dataset directory:
//   images/000000.ppm ...   8-bit P6, converted to [0,1] float on load
//   times.txt               one timestamp (seconds) per line, line i = frame i
//   trajectory.txt          TUM lines: timestamp tx ty tz qx qy qz qw
//   intrinsics.txt          fx fy cx cy width height
//   teacher/000000.dpt ...  optional, per-frame teacher predictions
//   gt_depth/000000.dpt ... optional, per-frame ground truth (0 = invalid)

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "mdt/camera.hpp"
#include "mdt/common.hpp"
#include "mdt/tape.hpp"

namespace mdt {

// ---------------------------------------------------------------------------
// PPM (P6) images
// ---------------------------------------------------------------------------

namespace detail {

inline int ppm_token(std::istream& in) {
  // skip whitespace and '#' comments, then read one non-negative integer
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int v = -1;
  in >> v;
  return v;
}

}  // namespace detail

inline Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6') throw DataError("not a P6 PPM: " + path);
  const int w = detail::ppm_token(in);
  const int h = detail::ppm_token(in);
  const int maxval = detail::ppm_token(in);
  if (w <= 0 || h <= 0 || maxval != 255)
    throw DataError("unsupported PPM header in " + path);
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw DataError("truncated PPM payload in " + path);
  Tensor t = Tensor::zeros(3, h, w);
  std::size_t i = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) t.ch[c](y, x) = buf[i++] / 255.0;
  return t;
}

inline void write_ppm(const std::string& path, const Tensor& image) {
  require(image.channels() == 3, "write_ppm: need a 3-channel image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image: " + path);
  out << "P6\n" << image.cols() << " " << image.rows() << "\n255\n";
  std::vector<unsigned char> buf;
  buf.reserve(static_cast<std::size_t>(image.rows()) * image.cols() * 3);
  for (int y = 0; y < image.rows(); ++y)
    for (int x = 0; x < image.cols(); ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image.ch[c](y, x), 0.0, 1.0);
        buf.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("short write: " + path);
}

// ---------------------------------------------------------------------------
// Binary depth files (.dpt)
// ---------------------------------------------------------------------------

enum class DepthKind : std::uint32_t { kInverseDepth = 0, kDepth = 1 };

struct DepthFile {
  Grid values;
  DepthKind kind = DepthKind::kInverseDepth;
};

// Header: magic "DPTH", u32 version, u32 rows, u32 cols, u32 kind, then
// rows*cols float32 row-major, native little-endian.
inline constexpr char kDepthMagic[4] = {'D', 'P', 'T', 'H'};
inline constexpr std::uint32_t kDepthFileVersion = 1;

inline void write_depth_file(const std::string& path, const Grid& values,
                             DepthKind kind) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write depth file: " + path);
  out.write(kDepthMagic, 4);
  const std::uint32_t header[4] = {kDepthFileVersion,
                                   static_cast<std::uint32_t>(values.rows()),
                                   static_cast<std::uint32_t>(values.cols()),
                                   static_cast<std::uint32_t>(kind)};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  std::vector<float> buf(static_cast<std::size_t>(values.size()));
  std::size_t i = 0;
  for (int y = 0; y < values.rows(); ++y)
    for (int x = 0; x < values.cols(); ++x) buf[i++] = static_cast<float>(values(y, x));
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw DataError("short write: " + path);
}

inline DepthFile read_depth_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open depth file: " + path);
  char magic[4] = {};
  std::uint32_t header[4] = {};
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in || std::memcmp(magic, kDepthMagic, 4) != 0)
    throw DataError("bad depth file header: " + path);
  if (header[0] != kDepthFileVersion)
    throw DataError("unsupported depth file version in " + path);
  const int rows = static_cast<int>(header[1]);
  const int cols = static_cast<int>(header[2]);
  if (rows <= 0 || cols <= 0 || header[3] > 1)
    throw DataError("bad depth file dimensions in " + path);
  std::vector<float> buf(static_cast<std::size_t>(rows) * cols);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw DataError("truncated depth payload in " + path);
  DepthFile f;
  f.kind = static_cast<DepthKind>(header[3]);
  f.values = Grid(rows, cols);
  std::size_t i = 0;
  for (int y = 0; y < rows; ++y)
    for (int x = 0; x < cols; ++x) f.values(y, x) = buf[i++];
  return f;
}

// ---------------------------------------------------------------------------
// TUM trajectories
// ---------------------------------------------------------------------------

struct TrajectoryEntry {
  double timestamp = 0;
  PoseSE3 pose;  // world-from-camera
};

struct Trajectory {
  std::vector<TrajectoryEntry> entries;
};

inline Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open trajectory: " + path);
  Trajectory traj;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    double t, tx, ty, tz, qx, qy, qz, qw;
    if (!(ls >> t >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
      throw DataError("malformed trajectory line " + std::to_string(lineno) + " in " +
                      path);
    const double norm = std::sqrt(qx * qx + qy * qy + qz * qz + qw * qw);
    if (std::abs(norm - 1.0) > 1e-3)
      throw DataError("non-unit quaternion (|q| = " + std::to_string(norm) +
                      ") at trajectory line " + std::to_string(lineno) + " in " + path);
    if (!traj.entries.empty() && !(t > traj.entries.back().timestamp))
      throw DataError("non-monotone timestamp at trajectory line " +
                      std::to_string(lineno) + " in " + path);
    TrajectoryEntry e;
    e.timestamp = t;
    e.pose = PoseSE3::from_quaternion(qx, qy, qz, qw, Eigen::Vector3d(tx, ty, tz));
    traj.entries.push_back(e);
  }
  return traj;
}

inline void save_trajectory(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write trajectory: " + path);
  out << "# timestamp tx ty tz qx qy qz qw\n";
  char buf[512];
  for (const TrajectoryEntry& e : traj.entries) {
    Eigen::Quaterniond q(e.pose.R);
    q.normalize();
    std::snprintf(buf, sizeof(buf),
                  "%.9f %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n", e.timestamp,
                  e.pose.t.x(), e.pose.t.y(), e.pose.t.z(), q.x(), q.y(), q.z(),
                  q.w());
    out << buf;
  }
  if (!out) throw DataError("short write: " + path);
}

// ---------------------------------------------------------------------------
// Intrinsics files
// ---------------------------------------------------------------------------

inline CameraIntrinsics load_intrinsics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open intrinsics: " + path);
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    CameraIntrinsics k;
    if (!(ls >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height))
      throw DataError("malformed intrinsics in " + path);
    k.validate();
    return k;
  }
  throw DataError("no intrinsics line found in " + path);
}

inline void save_intrinsics(const std::string& path, const CameraIntrinsics& k) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write intrinsics: " + path);
  char buf[256];
  std::snprintf(buf, sizeof(buf), "# fx fy cx cy width height\n%.17g %.17g %.17g %.17g %d %d\n",
                k.fx, k.fy, k.cx, k.cy, k.width, k.height);
  out << buf;
}

// ---------------------------------------------------------------------------
// Frames, association, triplets
// ---------------------------------------------------------------------------

struct FrameRecord {
  int id = 0;                // zero-padded sequence index
  double timestamp = 0;      // from times.txt
  std::string image_path;
};

inline std::string frame_name(int id, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d%s", id, ext);
  return buf;
}

struct MatchedFrame {
  FrameRecord frame;
  PoseSE3 world_from_camera;
  double dt = 0;  // |frame time - pose time|
};

struct AssociationResult {
  std::vector<MatchedFrame> matched;
  int dropped = 0;
};

/// Nearest-neighbor association of frame timestamps to trajectory entries.
inline AssociationResult associate(const std::vector<FrameRecord>& frames,
                                   const Trajectory& traj, double max_dt) {
  AssociationResult out;
  if (traj.entries.empty()) {
    out.dropped = static_cast<int>(frames.size());
    return out;
  }
  for (const FrameRecord& f : frames) {
    // binary search over sorted pose timestamps
    int lo = 0, hi = static_cast<int>(traj.entries.size()) - 1;
    while (lo < hi) {
      const int mid = (lo + hi) / 2;
      if (traj.entries[mid].timestamp < f.timestamp)
        lo = mid + 1;
      else
        hi = mid;
    }
    int best = lo;
    if (lo > 0 && std::abs(traj.entries[lo - 1].timestamp - f.timestamp) <
                      std::abs(traj.entries[lo].timestamp - f.timestamp))
      best = lo - 1;
    const double dt = std::abs(traj.entries[best].timestamp - f.timestamp);
    if (dt <= max_dt) {
      out.matched.push_back({f, traj.entries[best].pose, dt});
    } else {
      ++out.dropped;
    }
  }
  return out;
}

struct FrameTriplet {
  int target = 0;                 // indices into the matched list
  std::array<int, 2> sources{};   // {t - stride, t + stride}
  PoseSE3 T_to_prev;              // target-camera -> prev-source-camera
  PoseSE3 T_to_next;              // target-camera -> next-source-camera
};

/// Every interior frame becomes a target with sources at t +/- stride.
/// Relative poses follow T_{t->t'} = inverse(world_from_cam_{t'}) *
/// world_from_cam_t. Triplets with both relative translations below tau_min
/// are dropped when tau_min > 0.
inline std::vector<FrameTriplet> make_triplets(const std::vector<MatchedFrame>& frames,
                                               int stride = 1, double tau_min = 0.0) {
  std::vector<FrameTriplet> out;
  const int n = static_cast<int>(frames.size());
  if (stride < 1 || n < 2 * stride + 1) return out;
  for (int t = stride; t + stride < n; ++t) {
    FrameTriplet tr;
    tr.target = t;
    tr.sources = {t - stride, t + stride};
    tr.T_to_prev = relative_pose(frames[t].world_from_camera,
                                 frames[t - stride].world_from_camera);
    tr.T_to_next = relative_pose(frames[t].world_from_camera,
                                 frames[t + stride].world_from_camera);
    if (tau_min > 0.0 && tr.T_to_prev.t.norm() < tau_min &&
        tr.T_to_next.t.norm() < tau_min)
      continue;
    out.push_back(tr);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory
// ---------------------------------------------------------------------------

struct Dataset {
  std::string root;
  CameraIntrinsics intrinsics;
  Trajectory trajectory;
  std::vector<FrameRecord> frames;

  std::string image_path(int id) const {
    return root + "/images/" + frame_name(id, ".ppm");
  }
  std::string teacher_path(int id) const {
    return root + "/teacher/" + frame_name(id, ".dpt");
  }
  std::string gt_depth_path(int id) const {
    return root + "/gt_depth/" + frame_name(id, ".dpt");
  }
  bool has_teacher() const {
    return std::filesystem::exists(root + "/teacher");
  }
  bool has_gt_depth() const {
    return std::filesystem::exists(root + "/gt_depth");
  }
};

inline Dataset load_dataset(const std::string& root) {
  Dataset ds;
  ds.root = root;
  const std::string times_path = root + "/times.txt";
  std::ifstream times(times_path);
  if (!times) throw DataError("missing times.txt in dataset: " + times_path);
  ds.intrinsics = load_intrinsics(root + "/intrinsics.txt");
  ds.trajectory = load_trajectory(root + "/trajectory.txt");

  std::string line;
  int id = 0, lineno = 0;
  while (std::getline(times, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    FrameRecord f;
    f.id = id++;
    try {
      f.timestamp = std::stod(line);
    } catch (const std::exception&) {
      throw DataError("malformed times.txt line " + std::to_string(lineno) + " in " +
                      times_path);
    }
    f.image_path = ds.image_path(f.id);
    if (!std::filesystem::exists(f.image_path))
      throw DataError("missing image file: " + f.image_path);
    ds.frames.push_back(std::move(f));
  }
  if (ds.frames.empty()) throw DataError("dataset has no frames: " + root);
  return ds;
}

// ---------------------------------------------------------------------------
// Image resizing (shared bilinear formula from the tape)
// ---------------------------------------------------------------------------

inline Tensor resize_image(const Tensor& image, int rows, int cols) {
  if (rows == image.rows() && cols == image.cols()) return image;
  Graph g;
  Var out = resize_bilinear(g.constant(image), rows, cols);
  return g.val(out);
}

inline Grid resize_grid(const Grid& grid, int rows, int cols) {
  if (rows == grid.rows() && cols == grid.cols()) return grid;
  Graph g;
  Var out = resize_bilinear(g.constant(Tensor(grid)), rows, cols);
  return g.val(out).ch[0];
}

// ---------------------------------------------------------------------------
// Checksums (determinism checks and run manifests)
// ---------------------------------------------------------------------------

inline std::uint64_t file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open for checksum: " + path);
  char buf[1 << 16];
  std::uint64_t h = 1469598103934665603ull;
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  return h;
}

/// Combined checksum over every regular file under root, in sorted relative
/// path order (file names participate, so renames change the sum).
inline std::uint64_t tree_checksum(const std::string& root) {
  std::vector<std::string> rel;
  for (const auto& p : std::filesystem::recursive_directory_iterator(root))
    if (p.is_regular_file())
      rel.push_back(std::filesystem::relative(p.path(), root).generic_string());
  std::sort(rel.begin(), rel.end());
  std::uint64_t h = 1469598103934665603ull;
  for (const std::string& r : rel) {
    h = fnv1a(r.data(), r.size(), h);
    const std::uint64_t fh = file_checksum(root + "/" + r);
    h = fnv1a(&fh, sizeof(fh), h);
  }
  return h;
}

}  // namespace mdt
