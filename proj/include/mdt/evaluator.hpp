#pragma once

// Evaluation utilities: standard depth-error metrics over ground-truth-valid
// pixels, median scaling (the scale-ambiguity baseline), per-run metric
// tables, and accumulated point-cloud export.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "mdt/camera.hpp"
#include "mdt/common.hpp"
#include "mdt/dataio.hpp"
#include "mdt/geometry.hpp"
#include "mdt/models.hpp"

namespace mdt {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Depth clamp applied to both prediction and ground truth before computing
/// metrics. The indoor default is 0.1–10 m.
struct EvalClamp {
  double d_min = 0.1;
  double d_max = 10.0;

  void validate() const {
    if (!(d_min > 0 && d_min < d_max))
      throw ConfigError("eval clamp: need 0 < d_min < d_max");
  }
};

struct DepthMetrics {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;
};

/// Error metrics over the pixels where both maps are valid, after clamping
/// both to the evaluation range. Throws when no pixel qualifies.
inline DepthMetrics compute_metrics(const DepthMap& pred, const DepthMap& gt,
                                    const EvalClamp& clamp = {}) {
  clamp.validate();
  require(pred.values.rows() == gt.values.rows() && pred.values.cols() == gt.values.cols(),
          "compute_metrics: shape mismatch");
  DepthMetrics m;
  std::int64_t n = 0;
  for (int y = 0; y < gt.values.rows(); ++y)
    for (int x = 0; x < gt.values.cols(); ++x) {
      if (!gt.valid(y, x) || !pred.valid(y, x)) continue;
      const double p = std::clamp(pred.values(y, x), clamp.d_min, clamp.d_max);
      const double g = std::clamp(gt.values(y, x), clamp.d_min, clamp.d_max);
      const double e = p - g;
      m.abs_rel += std::abs(e) / g;
      m.sq_rel += e * e / g;
      m.rmse += e * e;
      const double le = std::log(p) - std::log(g);
      m.rmse_log += le * le;
      const double ratio = std::max(p / g, g / p);
      m.delta1 += (ratio < 1.25) ? 1.0 : 0.0;
      m.delta2 += (ratio < 1.25 * 1.25) ? 1.0 : 0.0;
      m.delta3 += (ratio < 1.25 * 1.25 * 1.25) ? 1.0 : 0.0;
      ++n;
    }
  if (n == 0) throw DataError("compute_metrics: no valid pixels to evaluate");
  const double inv_n = 1.0 / static_cast<double>(n);
  m.abs_rel *= inv_n;
  m.sq_rel *= inv_n;
  m.rmse = std::sqrt(m.rmse * inv_n);
  m.rmse_log = std::sqrt(m.rmse_log * inv_n);
  m.delta1 *= inv_n;
  m.delta2 *= inv_n;
  m.delta3 *= inv_n;
  return m;
}

namespace detail {

/// Median with the usual even-count convention (mean of the middle pair).
inline double median_of(std::vector<double> v) {
  require(!v.empty(), "median: empty input");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid) - 1,
                   v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (v[mid - 1] + hi);
}

inline std::vector<double> values_at_joint_valid(const DepthMap& map,
                                                 const DepthMap& pred,
                                                 const DepthMap& gt) {
  std::vector<double> out;
  for (int y = 0; y < gt.values.rows(); ++y)
    for (int x = 0; x < gt.values.cols(); ++x)
      if (gt.valid(y, x) && pred.valid(y, x)) out.push_back(map.values(y, x));
  return out;
}

}  // namespace detail

struct MedianScaleResult {
  double scale = 1.0;
  DepthMap scaled;
};

/// Single-factor alignment of the prediction to ground truth:
/// s = median(gt) / median(pred) over the jointly valid pixels.
inline MedianScaleResult median_scale(const DepthMap& pred, const DepthMap& gt) {
  require(pred.values.rows() == gt.values.rows() && pred.values.cols() == gt.values.cols(),
          "median_scale: shape mismatch");
  const std::vector<double> gv = detail::values_at_joint_valid(gt, pred, gt);
  const std::vector<double> pv = detail::values_at_joint_valid(pred, pred, gt);
  if (gv.empty()) throw DataError("median_scale: no valid pixels");
  const double mp = detail::median_of(pv);
  if (!(std::abs(mp) > 0))
    throw NumericalError("median_scale: prediction median is zero");
  MedianScaleResult out;
  out.scale = detail::median_of(gv) / mp;
  out.scaled = pred;
  out.scaled.values *= out.scale;
  return out;
}

/// Median of pred/gt over jointly valid pixels, without any clamping: the
/// direct scale-recovery probe (1 means the metric scale is right).
inline double median_ratio(const DepthMap& pred, const DepthMap& gt) {
  require(pred.values.rows() == gt.values.rows() && pred.values.cols() == gt.values.cols(),
          "median_ratio: shape mismatch");
  std::vector<double> ratios;
  for (int y = 0; y < gt.values.rows(); ++y)
    for (int x = 0; x < gt.values.cols(); ++x)
      if (gt.valid(y, x) && pred.valid(y, x) && gt.values(y, x) > 0)
        ratios.push_back(pred.values(y, x) / gt.values(y, x));
  if (ratios.empty()) throw DataError("median_ratio: no valid pixels");
  return detail::median_of(ratios);
}

// ---------------------------------------------------------------------------
// Point clouds
// ---------------------------------------------------------------------------

/// Accumulated colored point cloud; add frames, then write once.
struct PointCloud {
  std::vector<std::array<float, 3>> xyz;
  std::vector<std::array<std::uint8_t, 3>> rgb;

  std::size_t size() const { return xyz.size(); }
};

/// Back-project the valid pixels of a depth map into the world frame and
/// append them with their image colors.
inline void add_frame(PointCloud& cloud, const DepthMap& depth, const Tensor& image,
                      const CameraIntrinsics& K, const PoseSE3& world_from_camera) {
  K.validate();
  require(image.channels() == 3, "add_frame: expected a 3-channel image");
  require(image.rows() == depth.values.rows() && image.cols() == depth.values.cols(),
          "add_frame: image/depth shape mismatch");
  for (int y = 0; y < depth.values.rows(); ++y)
    for (int x = 0; x < depth.values.cols(); ++x) {
      if (!depth.valid(y, x)) continue;
      const double d = depth.values(y, x);
      const Eigen::Vector3d pc(d * (x - K.cx) / K.fx, d * (y - K.cy) / K.fy, d);
      const Eigen::Vector3d pw = world_from_camera.R * pc + world_from_camera.t;
      cloud.xyz.push_back({static_cast<float>(pw.x()), static_cast<float>(pw.y()),
                           static_cast<float>(pw.z())});
      std::array<std::uint8_t, 3> color{};
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image.ch[c](y, x), 0.0, 1.0);
        color[static_cast<std::size_t>(c)] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
      cloud.rgb.push_back(color);
    }
}

/// ASCII PLY with float positions and uchar colors.
inline void write_ply(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write point cloud: " + path);
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << cloud.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "end_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    out << cloud.xyz[i][0] << " " << cloud.xyz[i][1] << " " << cloud.xyz[i][2] << " "
        << static_cast<int>(cloud.rgb[i][0]) << " " << static_cast<int>(cloud.rgb[i][1])
        << " " << static_cast<int>(cloud.rgb[i][2]) << "\n";
  }
  if (!out) throw DataError("short write: " + path);
}

/// Single-frame convenience wrapper.
inline void export_pointcloud(const DepthMap& depth, const Tensor& image,
                              const CameraIntrinsics& K,
                              const PoseSE3& world_from_camera,
                              const std::string& path) {
  PointCloud cloud;
  add_frame(cloud, depth, image, K, world_from_camera);
  write_ply(cloud, path);
}

// ---------------------------------------------------------------------------
// Run evaluation
// ---------------------------------------------------------------------------

/// Run the student on one full-resolution image and decode to metric depth:
/// forward at the training resolution, Min-Max normalize, map through the
/// depth range, then upsample the metric map to the input resolution.
inline DepthMap predict_depth(const StudentNet& net, const Tensor& image,
                              const DepthRange& range, int student_rows,
                              int student_cols) {
  Graph g;
  const StudentNet::Bound bound = net.bind(g, false);
  const Tensor small = resize_image(image, student_rows, student_cols);
  const Var inv = bound.forward(g.constant(small));
  const MinMaxVar mm = minmax_normalize(inv);
  if (mm.degenerate)
    throw NumericalError("predict_depth: constant network output");
  const Var depth = inv_depth_to_depth(mm.normalized, range);
  const Grid full =
      resize_grid(g.val(depth).ch[0], image.rows(), image.cols());
  return DepthMap::all_valid(full);
}

struct FrameEval {
  int frame_id = -1;
  double scale = 1.0;  // median-scaling factor
  DepthMetrics raw;
  DepthMetrics scaled;
};

struct RunEval {
  std::vector<FrameEval> frames;
  DepthMetrics raw_mean;
  DepthMetrics scaled_mean;
};

namespace detail {

inline void accumulate(DepthMetrics& acc, const DepthMetrics& m) {
  acc.abs_rel += m.abs_rel;
  acc.sq_rel += m.sq_rel;
  acc.rmse += m.rmse;
  acc.rmse_log += m.rmse_log;
  acc.delta1 += m.delta1;
  acc.delta2 += m.delta2;
  acc.delta3 += m.delta3;
}

inline void scale_by(DepthMetrics& m, double s) {
  m.abs_rel *= s;
  m.sq_rel *= s;
  m.rmse *= s;
  m.rmse_log *= s;
  m.delta1 *= s;
  m.delta2 *= s;
  m.delta3 *= s;
}

}  // namespace detail

/// Evaluate a predictor over every dataset frame with ground truth. Metrics
/// are computed per frame and averaged; both the raw and the median-scaled
/// variants are always reported.
inline RunEval evaluate_run(const Dataset& ds,
                            const std::function<DepthMap(int)>& predict,
                            const EvalClamp& clamp = {}) {
  if (!ds.has_gt_depth()) throw DataError("evaluate_run: dataset has no ground truth");
  RunEval run;
  for (const FrameRecord& f : ds.frames) {
    const DepthFile gt_file = read_depth_file(ds.gt_depth_path(f.id));
    if (gt_file.kind != DepthKind::kDepth)
      throw DataError("evaluate_run: ground truth must be metric depth");
    const DepthMap gt = DepthMap::all_valid(gt_file.values);
    const DepthMap pred = predict(f.id);

    FrameEval fe;
    fe.frame_id = f.id;
    fe.raw = compute_metrics(pred, gt, clamp);
    const MedianScaleResult ms = median_scale(pred, gt);
    fe.scale = ms.scale;
    fe.scaled = compute_metrics(ms.scaled, gt, clamp);
    detail::accumulate(run.raw_mean, fe.raw);
    detail::accumulate(run.scaled_mean, fe.scaled);
    run.frames.push_back(fe);
  }
  if (run.frames.empty()) throw DataError("evaluate_run: no frames evaluated");
  const double inv_n = 1.0 / static_cast<double>(run.frames.size());
  detail::scale_by(run.raw_mean, inv_n);
  detail::scale_by(run.scaled_mean, inv_n);
  return run;
}

/// Tab-separated metrics table in the usual column order, one aggregate row
/// per variant followed by the per-frame records.
inline void write_metrics_table(const RunEval& run, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metrics table: " + path);
  out.precision(9);
  out << "row\tframe\tabs_rel\tsq_rel\trmse\trmse_log\tdelta1\tdelta2\tdelta3\n";
  auto emit = [&out](const std::string& row, const std::string& frame,
                     const DepthMetrics& m) {
    out << row << "\t" << frame << "\t" << m.abs_rel << "\t" << m.sq_rel << "\t"
        << m.rmse << "\t" << m.rmse_log << "\t" << m.delta1 << "\t" << m.delta2
        << "\t" << m.delta3 << "\n";
  };
  emit("raw_mean", "-", run.raw_mean);
  emit("scaled_mean", "-", run.scaled_mean);
  for (const FrameEval& fe : run.frames) {
    emit("raw", std::to_string(fe.frame_id), fe.raw);
    emit("scaled", std::to_string(fe.frame_id), fe.scaled);
  }
  if (!out) throw DataError("short write: " + path);
}

}  // namespace mdt
