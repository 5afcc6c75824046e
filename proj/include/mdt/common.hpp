#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdt {

inline constexpr const char* kVersion = "0.1.0";

/// Tolerance for continuous pixel coordinates at the image border: coords
/// within this of [0, W-1] x [0, H-1] count as inside and are clamped when
/// sampling. An identity warp computes u = (x/fx)*fx + ... and must not lose
/// border pixels to rounding.
inline constexpr double kCoordEps = 1e-6;

// H x W grid, (row, col) = (y, x). Pixel coordinates elsewhere are (u, v)
// with u = column and v = row.
using Grid = Eigen::ArrayXXd;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Grid mask_to_grid(const Mask& m) {
  return m.cast<double>();
}

inline std::int64_t mask_count(const Mask& m) {
  return m.count();
}

/// Channel stack of equally sized grids. Images are 3-channel RGB in [0,1],
/// depth-like maps single channel, scalars 1x1x1.
struct Tensor {
  std::vector<Grid> ch;

  Tensor() = default;
  explicit Tensor(Grid g) { ch.push_back(std::move(g)); }

  static Tensor zeros(int channels, int rows, int cols) {
    Tensor t;
    t.ch.assign(channels, Grid::Zero(rows, cols));
    return t;
  }
  static Tensor full(int channels, int rows, int cols, double v) {
    Tensor t;
    t.ch.assign(channels, Grid::Constant(rows, cols, v));
    return t;
  }
  static Tensor scalar(double v) { return full(1, 1, 1, v); }

  int channels() const { return static_cast<int>(ch.size()); }
  int rows() const { return ch.empty() ? 0 : static_cast<int>(ch[0].rows()); }
  int cols() const { return ch.empty() ? 0 : static_cast<int>(ch[0].cols()); }
  bool is_scalar() const { return channels() == 1 && rows() == 1 && cols() == 1; }
  std::int64_t size() const {
    return static_cast<std::int64_t>(channels()) * rows() * cols();
  }

  bool same_shape(const Tensor& o) const {
    return channels() == o.channels() && rows() == o.rows() && cols() == o.cols();
  }

  double scalar_value() const { return ch.at(0)(0, 0); }

  bool all_finite() const {
    for (const Grid& g : ch)
      if (!g.isFinite().all()) return false;
    return true;
  }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::logic_error(msg);
}

// FNV-1a, used for dataset checksums and determinism checks.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace mdt
