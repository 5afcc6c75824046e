// Independent reference implementations used to cross-check the library.
//
// Everything in this header is written with plain index loops and its own
// helper routines on purpose: the point is to have a second, unrelated path
// to the same numbers.  Keep it free of includes from mdt/ except the basic
// container/camera types and the tape (the finite-difference checker has to
// drive the graph under test).
#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "mdt/camera.hpp"
#include "mdt/common.hpp"
#include "mdt/tape.hpp"

namespace oracle {

using mdt::Grid;
using mdt::Mask;
using mdt::Tensor;

// ---------------------------------------------------------------------------
// random test data

inline Tensor random_tensor(int ch, int rows, int cols, std::uint64_t seed,
                            double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::zeros(ch, rows, cols);
  for (int c = 0; c < ch; ++c)
    for (int r = 0; r < rows; ++r)
      for (int cc = 0; cc < cols; ++cc) t.ch[c](r, cc) = dist(rng);
  return t;
}

// Random tensor whose entries are separated by at least `gap` so that
// order-dependent ops (min, median, trimming) keep their selection stable
// under the finite-difference perturbation.
inline Tensor random_separated(int ch, int rows, int cols, std::uint64_t seed,
                               double gap = 1e-3) {
  const int n = ch * rows * cols;
  std::vector<double> vals(n);
  for (int i = 0; i < n; ++i) vals[i] = i * gap * 7.3 + gap;
  std::mt19937_64 rng(seed);
  std::shuffle(vals.begin(), vals.end(), rng);
  Tensor t = Tensor::zeros(ch, rows, cols);
  int i = 0;
  for (int c = 0; c < ch; ++c)
    for (int r = 0; r < rows; ++r)
      for (int cc = 0; cc < cols; ++cc) t.ch[c](r, cc) = vals[i++];
  return t;
}

// ---------------------------------------------------------------------------
// finite-difference gradient check
//
// BuildFn: (mdt::Graph&, const std::vector<mdt::Var>&) -> mdt::Var, returning
// a scalar (1x1x1) loss.  The same closure is used for the analytic pass and
// for every perturbed forward evaluation, so both see identical structure.

struct FdReport {
  double max_abs_diff = 0.0;  // max_i |g_analytic - g_fd|
  double grad_scale = 0.0;    // max_i |g_fd|
  double rel() const { return max_abs_diff / std::max(grad_scale, 1e-12); }
};

template <typename BuildFn>
double eval_scalar(const std::vector<Tensor>& inputs, BuildFn&& build) {
  mdt::Graph g;
  std::vector<mdt::Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(g.constant(t));
  mdt::Var out = build(g, leaves);
  return g.val(out).scalar_value();
}

template <typename BuildFn>
FdReport fd_check(const std::vector<Tensor>& inputs, BuildFn&& build,
                  double eps = 1e-6) {
  // Analytic gradients.
  mdt::Graph g;
  std::vector<mdt::Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(g.leaf(t));
  mdt::Var out = build(g, leaves);
  g.backward(out);

  FdReport rep;
  std::vector<Tensor> work = inputs;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    const Tensor& grad = g.grad(leaves[ti]);
    for (int c = 0; c < inputs[ti].channels(); ++c) {
      for (int r = 0; r < inputs[ti].rows(); ++r) {
        for (int cc = 0; cc < inputs[ti].cols(); ++cc) {
          const double saved = work[ti].ch[c](r, cc);
          work[ti].ch[c](r, cc) = saved + eps;
          const double fp = eval_scalar(work, build);
          work[ti].ch[c](r, cc) = saved - eps;
          const double fm = eval_scalar(work, build);
          work[ti].ch[c](r, cc) = saved;
          const double gfd = (fp - fm) / (2.0 * eps);
          const double ga = grad.ch[c](r, cc);
          rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(ga - gfd));
          rep.grad_scale = std::max(rep.grad_scale, std::abs(gfd));
        }
      }
    }
  }
  return rep;
}

// Deterministic weight tensor for turning a tensor-valued op into a scalar.
// A weighted sum exposes transposition / mis-indexing bugs that a plain mean
// would average away.
inline Tensor probe_weights(int ch, int rows, int cols, std::uint64_t seed) {
  return random_tensor(ch, rows, cols, seed ^ 0x9e3779b97f4a7c15ULL, 0.1, 1.0);
}

inline mdt::Var weighted_sum(mdt::Graph& g, mdt::Var v, const Tensor& w) {
  return mdt::vsum(v * g.constant(w));
}

// ---------------------------------------------------------------------------
// brute-force image statistics (reflect-101 border, 3x3 box)

inline int reflect101(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = std::abs(i) % period;
  return (i < n) ? i : period - i;
}

inline Grid bf_box3(const Grid& a) {
  const int rows = static_cast<int>(a.rows());
  const int cols = static_cast<int>(a.cols());
  Grid out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double s = 0.0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc)
          s += a(reflect101(r + dr, rows), reflect101(c + dc, cols));
      out(r, c) = s / 9.0;
    }
  }
  return out;
}

inline Grid bf_ssim_channel(const Grid& x, const Grid& y) {
  const double c1 = 0.01 * 0.01;
  const double c2 = 0.03 * 0.03;
  const Grid mx = bf_box3(x);
  const Grid my = bf_box3(y);
  const Grid mxx = bf_box3(Grid(x * x));
  const Grid myy = bf_box3(Grid(y * y));
  const Grid mxy = bf_box3(Grid(x * y));
  Grid out(x.rows(), x.cols());
  for (int r = 0; r < x.rows(); ++r) {
    for (int c = 0; c < x.cols(); ++c) {
      const double sx = mxx(r, c) - mx(r, c) * mx(r, c);
      const double sy = myy(r, c) - my(r, c) * my(r, c);
      const double sxy = mxy(r, c) - mx(r, c) * my(r, c);
      const double num = (2.0 * mx(r, c) * my(r, c) + c1) * (2.0 * sxy + c2);
      const double den =
          (mx(r, c) * mx(r, c) + my(r, c) * my(r, c) + c1) * (sx + sy + c2);
      out(r, c) = num / den;
    }
  }
  return out;
}

// Per-pixel photometric pair loss, averaged over channels.
inline Grid bf_pair_loss(const std::vector<Grid>& a, const std::vector<Grid>& b,
                         double alpha = 0.85) {
  const int rows = static_cast<int>(a[0].rows());
  const int cols = static_cast<int>(a[0].cols());
  Grid out = Grid::Zero(rows, cols);
  for (std::size_t c = 0; c < a.size(); ++c) {
    const Grid ssim = bf_ssim_channel(a[c], b[c]);
    for (int r = 0; r < rows; ++r)
      for (int cc = 0; cc < cols; ++cc)
        out(r, cc) += 0.5 * alpha * (1.0 - ssim(r, cc)) +
                      (1.0 - alpha) * std::abs(a[c](r, cc) - b[c](r, cc));
  }
  out /= static_cast<double>(a.size());
  return out;
}

// Full photometric objective: per-pixel minimum over masked per-source
// losses, automasked against the unwarped sources, mean over surviving
// pixels.  Returns {loss, number of surviving pixels}.
struct BfPhoto {
  double loss = 0.0;
  int count = 0;
};

inline BfPhoto bf_photometric(const std::vector<Grid>& target,
                              const std::vector<std::vector<Grid>>& sources,
                              const std::vector<std::vector<Grid>>& warped,
                              const std::vector<Mask>& valid,
                              double big = 1e9) {
  const int rows = static_cast<int>(target[0].rows());
  const int cols = static_cast<int>(target[0].cols());
  std::vector<Grid> warped_losses, unwarped_losses;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    warped_losses.push_back(bf_pair_loss(target, warped[s]));
    unwarped_losses.push_back(bf_pair_loss(target, sources[s]));
  }
  BfPhoto out;
  double acc = 0.0;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double mn = big;
      bool any_valid = false;
      for (std::size_t s = 0; s < sources.size(); ++s) {
        const double v = valid[s](r, c) ? warped_losses[s](r, c) : big;
        mn = std::min(mn, v);
        any_valid = any_valid || valid[s](r, c);
      }
      double mn_un = std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < sources.size(); ++s)
        mn_un = std::min(mn_un, unwarped_losses[s](r, c));
      if (any_valid && mn < mn_un) {
        acc += mn;
        ++out.count;
      }
    }
  }
  out.loss = (out.count > 0) ? acc / out.count : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// brute-force scale-invariant alignment and trimmed loss

inline Grid bf_eta(const Grid& d) {
  std::vector<double> v(d.data(), d.data() + d.size());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  const double med = (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  double s = 0.0;
  for (int r = 0; r < d.rows(); ++r)
    for (int c = 0; c < d.cols(); ++c) s += std::abs(d(r, c) - med);
  s /= static_cast<double>(n);
  Grid out(d.rows(), d.cols());
  for (int r = 0; r < d.rows(); ++r)
    for (int c = 0; c < d.cols(); ++c) out(r, c) = (d(r, c) - med) / s;
  return out;
}

inline double bf_ssi(const Grid& ea, const Grid& eb) {
  std::vector<double> res;
  for (int r = 0; r < ea.rows(); ++r)
    for (int c = 0; c < ea.cols(); ++c)
      res.push_back(std::abs(ea(r, c) - eb(r, c)));
  std::sort(res.begin(), res.end());
  const std::size_t n = res.size();
  const std::size_t keep = static_cast<std::size_t>(0.8 * n);
  double acc = 0.0;
  for (std::size_t i = 0; i < keep; ++i) acc += res[i];
  return acc / (2.0 * n);
}

inline double bf_gradient_matching(const Grid& diff) {
  const int rows = static_cast<int>(diff.rows());
  const int cols = static_cast<int>(diff.cols());
  double ax = 0.0, ay = 0.0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      ax += (c + 1 < cols) ? std::abs(diff(r, c + 1) - diff(r, c)) : 0.0;
      ay += (r + 1 < rows) ? std::abs(diff(r + 1, c) - diff(r, c)) : 0.0;
    }
  const double n = static_cast<double>(rows * cols);
  return ax / n + ay / n;
}

// ---------------------------------------------------------------------------
// brute-force depth error metrics (no clamping; caller pre-filters)

struct BfMetrics {
  double abs_rel = 0.0, sq_rel = 0.0, rmse = 0.0, rmse_log = 0.0;
  double d1 = 0.0, d2 = 0.0, d3 = 0.0;
};

inline BfMetrics bf_metrics(const std::vector<double>& pred,
                            const std::vector<double>& gt) {
  BfMetrics m;
  const double n = static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - gt[i];
    m.abs_rel += std::abs(e) / gt[i];
    m.sq_rel += e * e / gt[i];
    m.rmse += e * e;
    const double le = std::log(pred[i]) - std::log(gt[i]);
    m.rmse_log += le * le;
    const double ratio = std::max(pred[i] / gt[i], gt[i] / pred[i]);
    m.d1 += (ratio < 1.25) ? 1.0 : 0.0;
    m.d2 += (ratio < 1.25 * 1.25) ? 1.0 : 0.0;
    m.d3 += (ratio < 1.25 * 1.25 * 1.25) ? 1.0 : 0.0;
  }
  m.abs_rel /= n;
  m.sq_rel /= n;
  m.rmse = std::sqrt(m.rmse / n);
  m.rmse_log = std::sqrt(m.rmse_log / n);
  m.d1 /= n;
  m.d2 /= n;
  m.d3 /= n;
  return m;
}

// ---------------------------------------------------------------------------
// co-visibility for synthetic warp oracles
//
// A target pixel counts as co-visible in the source view when its
// ground-truth 3D point (a) lands inside the source image with positive
// source-frame depth and (b) lands on a locally smooth patch of the source
// depth map that agrees with that depth: all four pixels under the bilinear
// support must be valid, within rel_tol of each other, and consistent with
// the reprojected point. Pixels whose support straddles an occlusion edge
// are excluded. Reprojection is done here with plain vector math,
// independent of the library's warp pipeline.

inline Mask covisible_mask(const Grid& depth_target, const Mask& valid_target,
                           const Grid& depth_source, const Mask& valid_source,
                           const mdt::CameraIntrinsics& K,
                           const mdt::PoseSE3& source_from_target,
                           double rel_tol = 0.02) {
  const int H = static_cast<int>(depth_target.rows());
  const int W = static_cast<int>(depth_target.cols());
  Mask out = Mask::Constant(H, W, false);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!valid_target(y, x)) continue;
      const double d = depth_target(y, x);
      const Eigen::Vector3d pc(d * (x - K.cx) / K.fx, d * (y - K.cy) / K.fy, d);
      const Eigen::Vector3d ps = source_from_target.R * pc + source_from_target.t;
      if (!(ps.z() > 1e-6)) continue;
      const double u = ps.x() / ps.z() * K.fx + K.cx;
      const double v = ps.y() / ps.z() * K.fy + K.cy;
      if (u < 0.0 || u > W - 1.0 || v < 0.0 || v > H - 1.0) continue;
      const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
      const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      if (!valid_source(y0, x0) || !valid_source(y0, x1) || !valid_source(y1, x0) ||
          !valid_source(y1, x1))
        continue;
      const double c00 = depth_source(y0, x0), c01 = depth_source(y0, x1);
      const double c10 = depth_source(y1, x0), c11 = depth_source(y1, x1);
      const double lo = std::min(std::min(c00, c01), std::min(c10, c11));
      const double hi = std::max(std::max(c00, c01), std::max(c10, c11));
      if (hi - lo > rel_tol * lo) continue;
      if (std::abs(ps.z() - 0.5 * (lo + hi)) > 1.5 * rel_tol * ps.z()) continue;
      out(y, x) = true;
    }
  return out;
}

}  // namespace oracle
