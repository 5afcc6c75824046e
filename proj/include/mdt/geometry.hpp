#pragma once

// Differentiable camera geometry: depth normalization and conversion,
// reprojection, bilinear sampling, image and depth warping. Every operation
// exists in a tape (Var) form used by training, plus a plain overload that
// evaluates the same formula on raw grids.

#include <Eigen/Dense>

#include "mdt/camera.hpp"
#include "mdt/common.hpp"
#include "mdt/tape.hpp"

namespace mdt {

/// Transformed points with z at or below this are treated as behind the
/// camera and masked out.
inline constexpr double kBehindCameraEps = 1e-3;

struct DepthMap {
  Grid values;
  Mask valid;

  static DepthMap all_valid(Grid v) {
    Mask m = Mask::Constant(v.rows(), v.cols(), true);
    return {std::move(v), std::move(m)};
  }
};

/// Output range of the normalized-disparity-to-depth mapping.
struct DepthRange {
  double min_m = 0.1;
  double max_m = 100.0;

  void validate() const {
    if (!(min_m > 0 && min_m < max_m))
      throw ConfigError("depth range: need 0 < min < max");
  }
};

// ---------------------------------------------------------------------------
// Min-Max normalization
// ---------------------------------------------------------------------------

struct MinMaxVar {
  Var normalized;
  bool degenerate = false;
};

/// (d - min d) / (max d - min d). A constant input map is degenerate: returns
/// all-zeros (constant, no gradient) with the flag set; callers skip the
/// terms that depend on it.
inline MinMaxVar minmax_normalize(Var d) {
  Graph& g = *d.g;
  const Tensor& dv = g.val(d);
  double lo = dv.ch[0].minCoeff(), hi = dv.ch[0].maxCoeff();
  for (int c = 1; c < dv.channels(); ++c) {
    lo = std::min(lo, dv.ch[c].minCoeff());
    hi = std::max(hi, dv.ch[c].maxCoeff());
  }
  if (!(hi > lo)) {
    return {g.constant(Tensor::zeros(dv.channels(), dv.rows(), dv.cols())), true};
  }
  Var m = reduce_min(d);
  Var range = reduce_max(d) - m;
  return {(d - m) / range, false};
}

struct MinMaxGrid {
  Grid normalized;
  bool degenerate = false;
};

inline MinMaxGrid minmax_normalize(const Grid& d) {
  Graph g;
  auto r = minmax_normalize(g.constant(d));
  return {g.val(r.normalized).ch[0], r.degenerate};
}

// ---------------------------------------------------------------------------
// Normalized inverse depth -> metric depth
// ---------------------------------------------------------------------------

/// depth = 1 / (a * d_norm + b) with a = 1/min - 1/max, b = 1/max. Maps 0 to
/// max_m and 1 to min_m, strictly decreasing in between.
inline Var inv_depth_to_depth(Var d_norm, const DepthRange& range) {
  range.validate();
  const double a = 1.0 / range.min_m - 1.0 / range.max_m;
  const double b = 1.0 / range.max_m;
  return 1.0 / (d_norm * a + b);
}

inline DepthMap inv_depth_to_depth(const Grid& d_norm, const DepthRange& range) {
  Graph g;
  Var out = inv_depth_to_depth(g.constant(d_norm), range);
  return DepthMap::all_valid(g.val(out).ch[0]);
}

// ---------------------------------------------------------------------------
// Reprojection
// ---------------------------------------------------------------------------

struct PixelGrid {
  Grid u;  // continuous source column per target pixel
  Grid v;  // continuous source row per target pixel
  Mask in_bounds;
};

struct ReprojectVar {
  Var u;
  Var v;
  Var z;  // z of target points in the source frame, clamped to eps from below
  Mask in_bounds;
};

namespace detail {
// Per-pixel coefficients of the rigid transform: point = depth * (R K^-1 p~) + t.
struct ReprojCoeffs {
  Grid a1, a2, a3;
};
inline ReprojCoeffs reproj_coeffs(const CameraIntrinsics& K, const PoseSE3& T, int H,
                                  int W) {
  Eigen::Matrix3d kinv = Eigen::Matrix3d::Zero();
  kinv(0, 0) = 1.0 / K.fx;
  kinv(0, 2) = -K.cx / K.fx;
  kinv(1, 1) = 1.0 / K.fy;
  kinv(1, 2) = -K.cy / K.fy;
  kinv(2, 2) = 1.0;
  const Eigen::Matrix3d A = T.R * kinv;
  ReprojCoeffs c{Grid(H, W), Grid(H, W), Grid(H, W)};
  for (int x = 0; x < W; ++x)
    for (int y = 0; y < H; ++y) {
      const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), 1.0);
      const Eigen::Vector3d a = A * p;
      c.a1(y, x) = a(0);
      c.a2(y, x) = a(1);
      c.a3(y, x) = a(2);
    }
  return c;
}
}  // namespace detail

/// Project each target pixel through its depth into the source camera.
/// in_bounds requires z > eps and coordinates inside [0, W-1] x [0, H-1].
inline ReprojectVar reproject(Var depth, const CameraIntrinsics& K, const PoseSE3& T) {
  Graph& g = *depth.g;
  const Tensor& dv = g.val(depth);
  require(dv.channels() == 1, "reproject: depth must be single channel");
  const int H = dv.rows(), W = dv.cols();
  const auto co = detail::reproj_coeffs(K, T, H, W);
  Var a1 = g.constant(co.a1), a2 = g.constant(co.a2), a3 = g.constant(co.a3);
  Var X = a1 * depth + T.t.x();
  Var Y = a2 * depth + T.t.y();
  Var Z = a3 * depth + T.t.z();
  Var Zc = clamp_min(Z, kBehindCameraEps);
  Var u = (X / Zc) * K.fx + K.cx;
  Var v = (Y / Zc) * K.fy + K.cy;
  const Grid& zg = g.val(Z).ch[0];
  const Grid& ug = g.val(u).ch[0];
  const Grid& vg = g.val(v).ch[0];
  Mask in_bounds = (zg > kBehindCameraEps) && (ug >= -kCoordEps) &&
                   (ug <= W - 1.0 + kCoordEps) && (vg >= -kCoordEps) &&
                   (vg <= H - 1.0 + kCoordEps);
  return {u, v, Zc, std::move(in_bounds)};
}

inline PixelGrid reproject(const DepthMap& depth, const CameraIntrinsics& K,
                           const PoseSE3& T) {
  Graph g;
  auto r = reproject(g.constant(depth.values), K, T);
  return {g.val(r.u).ch[0], g.val(r.v).ch[0], r.in_bounds && depth.valid};
}

// ---------------------------------------------------------------------------
// Bilinear sampling
// ---------------------------------------------------------------------------

struct SampleVar {
  Var values;
  Mask valid;
};

/// Bilinear interpolation of src at (u, v); out-of-bounds samples are 0 with
/// validity false.
inline SampleVar bilinear_sample(Var src, Var u, Var v) {
  Graph& g = *src.g;
  const Tensor& sv = g.val(src);
  const Grid& ug = g.val(u).ch[0];
  const Grid& vg = g.val(v).ch[0];
  Mask valid = (ug >= -kCoordEps) && (ug <= sv.cols() - 1.0 + kCoordEps) &&
               (vg >= -kCoordEps) && (vg <= sv.rows() - 1.0 + kCoordEps);
  return {gather_bilinear(src, u, v), std::move(valid)};
}

struct SampleGrid {
  Tensor values;
  Mask valid;
};

inline SampleGrid bilinear_sample(const Tensor& src, const PixelGrid& coords) {
  Graph g;
  auto r = bilinear_sample(g.constant(src), g.constant(coords.u), g.constant(coords.v));
  return {g.val(r.values), r.valid && coords.in_bounds};
}

// ---------------------------------------------------------------------------
// Warping
// ---------------------------------------------------------------------------

struct WarpImageVar {
  Var image;  // zero outside the valid mask
  Mask valid;
};

/// Synthesize the target view by sampling the source image at coordinates
/// obtained from the target depth and relative pose.
inline WarpImageVar warp_image(Var src_image, Var depth_t, const CameraIntrinsics& K,
                               const PoseSE3& T) {
  Graph& g = *src_image.g;
  auto rp = reproject(depth_t, K, T);
  auto sm = bilinear_sample(src_image, rp.u, rp.v);
  Mask valid = sm.valid && rp.in_bounds;
  Tensor mask_t;
  mask_t.ch.assign(g.val(src_image).channels(), mask_to_grid(valid));
  Var out = sm.values * g.constant(std::move(mask_t));
  return {out, std::move(valid)};
}

struct WarpImageGrid {
  Tensor image;
  Mask valid;
};

inline WarpImageGrid warp_image(const Tensor& src_image, const DepthMap& depth_t,
                                const CameraIntrinsics& K, const PoseSE3& T) {
  Graph g;
  auto r = warp_image(g.constant(src_image), g.constant(depth_t.values), K, T);
  return {g.val(r.image), r.valid && depth_t.valid};
}

struct WarpDepthVar {
  Var resampled_source;   // source depth map sampled at the warp coordinates
  Var target_in_source;   // z of target points expressed in the source frame
  Mask valid;
};

/// Both sides of the frame-to-frame depth consistency comparison.
inline WarpDepthVar warp_depth(Var depth_src, Var depth_t, const CameraIntrinsics& K,
                               const PoseSE3& T) {
  auto rp = reproject(depth_t, K, T);
  auto sm = bilinear_sample(depth_src, rp.u, rp.v);
  Mask valid = sm.valid && rp.in_bounds;
  return {sm.values, rp.z, std::move(valid)};
}

struct WarpDepthGrid {
  Grid resampled_source;
  Grid target_in_source;
  Mask valid;
};

inline WarpDepthGrid warp_depth(const DepthMap& depth_src, const DepthMap& depth_t,
                                const CameraIntrinsics& K, const PoseSE3& T) {
  Graph g;
  auto r = warp_depth(g.constant(depth_src.values), g.constant(depth_t.values), K, T);
  return {g.val(r.resampled_source).ch[0], g.val(r.target_in_source).ch[0],
          r.valid && depth_t.valid};
}

}  // namespace mdt
