#pragma once

// Fine-tuning loop: triplet batching, student/teacher forwards, the combined
// training objective, adaptive-moment updates, checkpoints, and a
// line-delimited JSON run manifest.
//
// Everything is single-threaded and seeded: two runs with the same config,
// dataset, and initial weights produce identical loss traces.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mdt/common.hpp"
#include "mdt/dataio.hpp"
#include "mdt/geometry.hpp"
#include "mdt/losses.hpp"
#include "mdt/models.hpp"
#include "mdt/synth.hpp"
#include "mdt/tape.hpp"

namespace mdt {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  // optimization (full profile: 15 epochs, batch 8, lr 1e-4)
  int epochs = 15;
  int batch_size = 8;
  double learning_rate = 1e-4;
  LossWeights weights;  // (distill, smooth, consistency) = (0.001, 0.01, 0.01)

  // data
  int student_rows = 64, student_cols = 96;
  int stride = 2;        // source frames at target +/- stride
  double tau_min = 0.0;  // minimum relative-translation norm; 0 disables
  double max_dt = 0.02;  // frame-to-pose association window (seconds)
  DepthRange depth_range{0.5, 12.0};

  std::uint64_t seed = 42;
  StudentConfig student;

  // ablation and mode flags
  bool disable_distill = false;      // drop L_d entirely
  bool disable_consistency = false;  // drop L_c entirely
  bool from_scratch = false;         // random init instead of a pretrained student
  bool distill_only = false;         // pretraining mode: objective is L_d alone

  // validation switch: build zero-weighted terms instead of skipping them
  // (used by the gradient-isolation tests; numerically a no-op)
  bool construct_all_terms = false;

  void validate() const {
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("train: learning_rate must be > 0");
    if (student_rows < 8 || student_cols < 8)
      throw ConfigError("train: student resolution too small");
    if (stride < 1) throw ConfigError("train: stride must be >= 1");
    if (max_dt < 0) throw ConfigError("train: max_dt must be >= 0");
    if (weights.distill < 0 || weights.smooth < 0 || weights.consistency < 0)
      throw ConfigError("train: loss weights must be >= 0");
    depth_range.validate();
    student.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"weight_distill", c.weights.distill},
                     {"weight_smooth", c.weights.smooth},
                     {"weight_consistency", c.weights.consistency},
                     {"student_rows", c.student_rows},
                     {"student_cols", c.student_cols},
                     {"stride", c.stride},
                     {"tau_min", c.tau_min},
                     {"max_dt", c.max_dt},
                     {"depth_min", c.depth_range.min_m},
                     {"depth_max", c.depth_range.max_m},
                     {"seed", c.seed},
                     {"student_input_channels", c.student.input_channels},
                     {"student_base_channels", c.student.base_channels},
                     {"student_levels", c.student.levels},
                     {"student_seed", c.student.seed},
                     {"disable_distill", c.disable_distill},
                     {"disable_consistency", c.disable_consistency},
                     {"from_scratch", c.from_scratch},
                     {"distill_only", c.distill_only}};
}

/// Overlay semantics: keys present in the JSON replace the current field,
/// everything else keeps its value. A complete snapshot (as written by
/// to_json) restores the config exactly; a partial file acts as an override.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weights.distill = j.value("weight_distill", c.weights.distill);
  c.weights.smooth = j.value("weight_smooth", c.weights.smooth);
  c.weights.consistency = j.value("weight_consistency", c.weights.consistency);
  c.student_rows = j.value("student_rows", c.student_rows);
  c.student_cols = j.value("student_cols", c.student_cols);
  c.stride = j.value("stride", c.stride);
  c.tau_min = j.value("tau_min", c.tau_min);
  c.max_dt = j.value("max_dt", c.max_dt);
  c.depth_range.min_m = j.value("depth_min", c.depth_range.min_m);
  c.depth_range.max_m = j.value("depth_max", c.depth_range.max_m);
  c.seed = j.value("seed", c.seed);
  c.student.input_channels = j.value("student_input_channels", c.student.input_channels);
  c.student.base_channels = j.value("student_base_channels", c.student.base_channels);
  c.student.levels = j.value("student_levels", c.student.levels);
  c.student.seed = j.value("student_seed", c.student.seed);
  c.disable_distill = j.value("disable_distill", c.disable_distill);
  c.disable_consistency = j.value("disable_consistency", c.disable_consistency);
  c.from_scratch = j.value("from_scratch", c.from_scratch);
  c.distill_only = j.value("distill_only", c.distill_only);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction; state layout follows the parameter store order.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParameterStore& params, const std::vector<Tensor>& grads) {
    require(static_cast<int>(grads.size()) == params.count(),
            "adam: gradient count mismatch");
    if (m_.empty()) {
      for (int i = 0; i < params.count(); ++i) {
        const Tensor& v = params.at(i).value;
        m_.push_back(Tensor::zeros(v.channels(), v.rows(), v.cols()));
        v_.push_back(Tensor::zeros(v.channels(), v.rows(), v.cols()));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (int i = 0; i < params.count(); ++i) {
      Tensor& p = params.at(i).value;
      for (int c = 0; c < p.channels(); ++c) {
        const Grid& gch = grads[static_cast<std::size_t>(i)].ch[c];
        Grid& m = m_[static_cast<std::size_t>(i)].ch[c];
        Grid& v = v_[static_cast<std::size_t>(i)].ch[c];
        m = b1_ * m + (1.0 - b1_) * gch;
        v = b2_ * v + (1.0 - b2_) * gch.square();
        p.ch[c] -= lr_ * (m / bc1) / ((v / bc2).sqrt() + eps_);
      }
    }
  }

  std::int64_t step_count() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

/// One triplet, already resized to the student resolution.
struct TripletSample {
  Tensor target, prev, next;  // images, 3 channels each
  Grid teacher_map;           // teacher prediction for the target frame
  DepthKind teacher_kind = DepthKind::kInverseDepth;
  PoseSE3 T_to_prev, T_to_next;
};

namespace detail {

inline void check_finite_term(const Graph& g, Var v, const char* term) {
  if (!g.val(v).all_finite())
    throw NumericalError(std::string("non-finite ") + term + " loss in training step");
}

}  // namespace detail

/// Assemble the full objective for one triplet on an existing graph. Source
/// frames are forwarded through the student only when the consistency term
/// needs them. Loss terms with zero weight (or disabled by flags) are not
/// constructed at all unless construct_all_terms is set.
inline LossParts triplet_loss(Graph& g, const StudentNet::Bound& student,
                              const TripletSample& s, const TrainConfig& cfg,
                              const CameraIntrinsics& K, Var& total_out) {
  LossParts parts;
  const bool want_distill =
      !cfg.disable_distill && (cfg.weights.distill > 0 || cfg.distill_only ||
                               cfg.construct_all_terms);
  const bool want_photo = !cfg.distill_only;
  const bool want_smooth =
      !cfg.distill_only && (cfg.weights.smooth > 0 || cfg.construct_all_terms);
  const bool want_consistency =
      !cfg.distill_only && !cfg.disable_consistency &&
      (cfg.weights.consistency > 0 || cfg.construct_all_terms);

  const Var target = g.constant(s.target);
  const Var inv_t = student.forward(target);
  Var total = g.constant_scalar(0.0);

  MinMaxVar mm{Var{}, true};
  Var depth_t{};
  if (want_photo || want_smooth || want_consistency) {
    mm = minmax_normalize(inv_t);
    if (!mm.degenerate) depth_t = inv_depth_to_depth(mm.normalized, cfg.depth_range);
  }

  PhotometricVar photo{g.constant_scalar(0.0), Mask(), Mask(), true};
  if (want_photo && !mm.degenerate) {
    const Var prev = g.constant(s.prev);
    const Var next = g.constant(s.next);
    const auto wp = warp_image(prev, depth_t, K, s.T_to_prev);
    const auto wn = warp_image(next, depth_t, K, s.T_to_next);
    photo = photometric_loss(target, {prev, next}, {wp.image, wn.image},
                             {wp.valid, wn.valid});
    detail::check_finite_term(g, photo.loss, "photometric");
    total = total + photo.loss;
  }
  parts.photo = g.val(photo.loss).scalar_value();
  parts.photo_skipped = photo.skipped;

  if (want_distill) {
    Var student_side = inv_t;
    Var teacher_side = g.constant(s.teacher_map);
    if (s.teacher_kind == DepthKind::kDepth) {
      // depth-space teacher: compare decoded metric depth directly, without
      // the inverse-depth Min-Max path
      if (!depth_t.valid()) {
        MinMaxVar mm2 = minmax_normalize(inv_t);
        if (!mm2.degenerate) depth_t = inv_depth_to_depth(mm2.normalized, cfg.depth_range);
      }
      if (depth_t.valid()) student_side = depth_t;
    }
    const DistillVar d = distillation_loss(student_side, teacher_side);
    parts.distill_ssi = g.val(d.ssi).scalar_value();
    parts.distill_reg = g.val(d.reg).scalar_value();
    parts.distill_skipped = d.skipped;
    if (!d.skipped) {
      detail::check_finite_term(g, d.total, "distillation");
      total = total + (cfg.distill_only ? d.total : d.total * cfg.weights.distill);
    }
  } else {
    parts.distill_skipped = true;
  }

  if (want_smooth && !mm.degenerate) {
    const SmoothnessVar sm = smoothness_loss(mm.normalized, target);
    parts.smooth = g.val(sm.loss).scalar_value();
    parts.smooth_skipped = sm.skipped;
    if (!sm.skipped) {
      detail::check_finite_term(g, sm.loss, "smoothness");
      total = total + sm.loss * cfg.weights.smooth;
    }
  } else {
    parts.smooth_skipped = true;
  }

  if (want_consistency && !mm.degenerate && !photo.skipped) {
    std::vector<ConsistencyPair> pairs;
    for (int sdx = 0; sdx < 2; ++sdx) {
      const Var src_img = g.constant(sdx == 0 ? s.prev : s.next);
      const Var inv_s = student.forward(src_img);
      const MinMaxVar ms = minmax_normalize(inv_s);
      if (ms.degenerate) continue;
      const Var depth_s = inv_depth_to_depth(ms.normalized, cfg.depth_range);
      const auto wd =
          warp_depth(depth_s, depth_t, K, sdx == 0 ? s.T_to_prev : s.T_to_next);
      pairs.push_back({wd.resampled_source, wd.target_in_source,
                       wd.valid && photo.auto_mask});
    }
    const ConsistencyVar cv = scale_consistency_loss(g, pairs);
    parts.consistency = g.val(cv.loss).scalar_value();
    parts.consistency_skipped = cv.skipped;
    if (!cv.skipped) {
      detail::check_finite_term(g, cv.loss, "consistency");
      total = total + cv.loss * cfg.weights.consistency;
    }
  } else {
    parts.consistency_skipped = true;
  }

  total_out = total;
  return parts;
}

/// Forward/backward over a batch and one optimizer update on the student.
/// Returns the batch-mean loss breakdown (fixed summation order).
inline LossBreakdown train_step(StudentNet& net, Adam& opt,
                                const std::vector<TripletSample>& batch,
                                const TrainConfig& cfg, const CameraIntrinsics& K) {
  require(!batch.empty(), "train_step: empty batch");
  Graph g;
  const StudentNet::Bound student = net.bind(g, true);
  Var total = g.constant_scalar(0.0);
  LossBreakdown mean;
  for (const TripletSample& s : batch) {
    Var sample_total{};
    const LossParts parts = triplet_loss(g, student, s, cfg, K, sample_total);
    total = total + sample_total;
    LossWeights w = cfg.weights;
    if (cfg.distill_only) w.distill = 1.0;
    const LossBreakdown b = total_loss(parts, w);
    mean.photo += b.photo;
    mean.distill_ssi += b.distill_ssi;
    mean.distill_reg += b.distill_reg;
    mean.smooth += b.smooth;
    mean.consistency += b.consistency;
    mean.total += b.total;
    mean.w_distill = b.w_distill;
    mean.w_smooth = b.w_smooth;
    mean.w_consistency = b.w_consistency;
    mean.photo_skipped = mean.photo_skipped && b.photo_skipped;
    mean.distill_skipped = mean.distill_skipped && b.distill_skipped;
    mean.smooth_skipped = mean.smooth_skipped && b.smooth_skipped;
    mean.consistency_skipped = mean.consistency_skipped && b.consistency_skipped;
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  mean.photo *= inv_n;
  mean.distill_ssi *= inv_n;
  mean.distill_reg *= inv_n;
  mean.smooth *= inv_n;
  mean.consistency *= inv_n;
  mean.total *= inv_n;

  total = total * inv_n;
  if (!g.val(total).all_finite())
    throw NumericalError("non-finite total loss in training step");
  g.backward(total);

  std::vector<Tensor> grads;
  grads.reserve(student.pvars.size());
  for (const Var& p : student.pvars) {
    const Tensor& gr = g.grad(p);
    if (!gr.all_finite()) throw NumericalError("non-finite gradient in training step");
    grads.push_back(gr);
  }
  opt.step(net.params(), grads);
  return mean;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'M', 'D', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const StudentNet& net,
                            const nlohmann::json& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 4);
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::string meta_str = meta.dump();
  const std::uint64_t meta_len = meta_str.size();
  out.write(reinterpret_cast<const char*>(&meta_len), sizeof(meta_len));
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  const std::uint32_t n = static_cast<std::uint32_t>(net.params().count());
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  for (int i = 0; i < net.params().count(); ++i) {
    const Parameter& p = net.params().at(i);
    const std::uint32_t name_len = static_cast<std::uint32_t>(p.name.size());
    out.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
    out.write(p.name.data(), name_len);
    const std::uint32_t dims[3] = {static_cast<std::uint32_t>(p.value.channels()),
                                   static_cast<std::uint32_t>(p.value.rows()),
                                   static_cast<std::uint32_t>(p.value.cols())};
    out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    for (const Grid& c : p.value.ch)
      for (int y = 0; y < c.rows(); ++y)
        for (int x = 0; x < c.cols(); ++x) {
          const double v = c(y, x);
          out.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
  }
  if (!out) throw DataError("short write: " + path);
}

struct Checkpoint {
  StudentNet net;
  nlohmann::json meta;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[4] = {};
  std::uint32_t version = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw DataError("bad checkpoint header: " + path);
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version in " + path);
  std::uint64_t meta_len = 0;
  in.read(reinterpret_cast<char*>(&meta_len), sizeof(meta_len));
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  nlohmann::json meta = nlohmann::json::parse(meta_str, nullptr, false);
  if (meta.is_discarded()) throw DataError("corrupt checkpoint metadata: " + path);

  TrainConfig cfg = meta.at("config").get<TrainConfig>();
  Checkpoint ck{StudentNet(cfg.student), std::move(meta)};
  std::uint32_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (static_cast<int>(n) != ck.net.params().count())
    throw DataError("checkpoint parameter count mismatch: " + path);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    std::uint32_t dims[3] = {};
    in.read(reinterpret_cast<char*>(dims), sizeof(dims));
    Parameter& p = ck.net.params().at(static_cast<int>(i));
    if (name != p.name || static_cast<int>(dims[0]) != p.value.channels() ||
        static_cast<int>(dims[1]) != p.value.rows() ||
        static_cast<int>(dims[2]) != p.value.cols())
      throw DataError("checkpoint layout mismatch at parameter " + name + ": " + path);
    for (Grid& c : p.value.ch)
      for (int y = 0; y < c.rows(); ++y)
        for (int x = 0; x < c.cols(); ++x) {
          double v = 0;
          in.read(reinterpret_cast<char*>(&v), sizeof(v));
          c(y, x) = v;
        }
  }
  if (!in) throw DataError("truncated checkpoint: " + path);
  return ck;
}

// ---------------------------------------------------------------------------
// Fit loop
// ---------------------------------------------------------------------------

struct FitResult {
  std::vector<LossBreakdown> epoch_means;
  int best_epoch = -1;  // -1 when no epochs ran
  double best_validation = std::numeric_limits<double>::infinity();
  std::string best_checkpoint;
  std::string manifest_path;
};

namespace detail {

inline nlohmann::json breakdown_json(const LossBreakdown& b) {
  return nlohmann::json{{"photo", b.photo},
                        {"distill_ssi", b.distill_ssi},
                        {"distill_reg", b.distill_reg},
                        {"smooth", b.smooth},
                        {"consistency", b.consistency},
                        {"total", b.total},
                        {"photo_skipped", b.photo_skipped},
                        {"distill_skipped", b.distill_skipped},
                        {"smooth_skipped", b.smooth_skipped},
                        {"consistency_skipped", b.consistency_skipped}};
}

}  // namespace detail

/// Prepared training data: triplet samples at the student resolution plus
/// the matching (scaled) intrinsics.
struct TrainingSet {
  std::vector<TripletSample> samples;
  CameraIntrinsics camera;
};

/// Load, associate, resize, and assemble triplets for training. The teacher
/// may be null only when distillation is disabled.
inline TrainingSet prepare_training_set(const Dataset& ds, const TeacherBackend* teacher,
                                        const TrainConfig& cfg) {
  cfg.validate();
  const bool need_teacher = !cfg.disable_distill;
  if (need_teacher) require(teacher != nullptr, "trainer: teacher backend required");

  TrainingSet out;
  out.camera = scale_intrinsics(ds.intrinsics, cfg.student_cols, cfg.student_rows);

  const AssociationResult assoc = associate(ds.frames, ds.trajectory, cfg.max_dt);
  if (assoc.matched.empty()) throw DataError("trainer: no frames matched to poses");
  const auto triplets = make_triplets(assoc.matched, cfg.stride, cfg.tau_min);
  if (triplets.empty()) throw DataError("trainer: no training triplets (sequence too short?)");

  // cache resized images by matched index
  std::vector<Tensor> images(assoc.matched.size());
  std::vector<bool> loaded(assoc.matched.size(), false);
  auto image_at = [&](int idx) -> const Tensor& {
    if (!loaded[static_cast<std::size_t>(idx)]) {
      const Tensor raw = read_ppm(assoc.matched[static_cast<std::size_t>(idx)].frame.image_path);
      images[static_cast<std::size_t>(idx)] =
          resize_image(raw, cfg.student_rows, cfg.student_cols);
      loaded[static_cast<std::size_t>(idx)] = true;
    }
    return images[static_cast<std::size_t>(idx)];
  };

  for (const FrameTriplet& t : triplets) {
    TripletSample s;
    s.target = image_at(t.target);
    s.prev = image_at(t.sources[0]);
    s.next = image_at(t.sources[1]);
    s.T_to_prev = t.T_to_prev;
    s.T_to_next = t.T_to_next;
    if (need_teacher) {
      const int frame_id = assoc.matched[static_cast<std::size_t>(t.target)].frame.id;
      const TeacherPrediction pred = teacher->predict(frame_id);
      s.teacher_map = resize_grid(pred.values, cfg.student_rows, cfg.student_cols);
      s.teacher_kind = pred.kind;
    } else {
      s.teacher_map = Grid::Zero(cfg.student_rows, cfg.student_cols);
    }
    out.samples.push_back(std::move(s));
  }
  return out;
}

/// Epoch loop with seeded shuffling, per-epoch checkpoints, and a JSONL
/// manifest. The best epoch is selected by the epoch-mean photometric loss
/// (total loss in distill-only mode) and its checkpoint is copied to
/// best.ckpt. The student is updated in place.
inline FitResult fit(const Dataset& ds, const TeacherBackend* teacher, StudentNet& net,
                     const TrainConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  const auto t_start = std::chrono::steady_clock::now();
  const TrainingSet data = prepare_training_set(ds, teacher, cfg);
  fs::create_directories(out_dir);

  FitResult result;
  result.manifest_path = out_dir + "/manifest.jsonl";
  std::ofstream manifest(result.manifest_path, std::ios::trunc);
  if (!manifest) throw DataError("cannot write manifest: " + result.manifest_path);

  nlohmann::json cfg_json = cfg;
  nlohmann::json header{{"type", "config"},
                        {"config", cfg_json},
                        {"dataset_root", ds.root},
                        {"dataset_checksum", tree_checksum(ds.root)},
                        {"triplets", data.samples.size()},
                        {"code_version", kVersion}};
  manifest << header.dump() << "\n";
  manifest.flush();

  nlohmann::json ck_meta{{"config", cfg_json}, {"code_version", kVersion}};
  if (cfg.epochs == 0) {
    const std::string path = out_dir + "/epoch_000.ckpt";
    save_checkpoint(path, net, ck_meta);
    result.best_checkpoint = path;
    manifest << nlohmann::json{{"type", "final"}, {"best_epoch", -1}, {"epochs", 0}}
                    .dump()
             << "\n";
    return result;
  }

  Adam opt(cfg.learning_rate);
  std::vector<int> order(data.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    std::mt19937_64 rng(cfg.seed ^ (0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    LossBreakdown epoch_mean;
    int steps = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<TripletSample> batch;
      for (std::size_t k = pos;
           k < std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size)); ++k)
        batch.push_back(data.samples[static_cast<std::size_t>(order[k])]);
      const LossBreakdown b = train_step(net, opt, batch, cfg, data.camera);
      epoch_mean.photo += b.photo;
      epoch_mean.distill_ssi += b.distill_ssi;
      epoch_mean.distill_reg += b.distill_reg;
      epoch_mean.smooth += b.smooth;
      epoch_mean.consistency += b.consistency;
      epoch_mean.total += b.total;
      epoch_mean.w_distill = b.w_distill;
      epoch_mean.w_smooth = b.w_smooth;
      epoch_mean.w_consistency = b.w_consistency;
      ++steps;
    }
    const double inv_steps = 1.0 / static_cast<double>(steps);
    epoch_mean.photo *= inv_steps;
    epoch_mean.distill_ssi *= inv_steps;
    epoch_mean.distill_reg *= inv_steps;
    epoch_mean.smooth *= inv_steps;
    epoch_mean.consistency *= inv_steps;
    epoch_mean.total *= inv_steps;
    result.epoch_means.push_back(epoch_mean);

    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch);
    const std::string ck_path = out_dir + "/" + name;
    save_checkpoint(ck_path, net, ck_meta);

    const double validation = cfg.distill_only ? epoch_mean.total : epoch_mean.photo;
    if (validation < result.best_validation) {
      result.best_validation = validation;
      result.best_epoch = epoch;
      result.best_checkpoint = ck_path;
    }

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
    nlohmann::json line = detail::breakdown_json(epoch_mean);
    line["type"] = "epoch";
    line["epoch"] = epoch;
    line["steps"] = steps;
    line["validation"] = validation;
    line["wall_s"] = wall;
    manifest << line.dump() << "\n";
    manifest.flush();
  }

  fs::copy_file(result.best_checkpoint, out_dir + "/best.ckpt",
                fs::copy_options::overwrite_existing);
  result.best_checkpoint = out_dir + "/best.ckpt";
  const double wall_total =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  manifest << nlohmann::json{{"type", "final"},
                             {"best_epoch", result.best_epoch},
                             {"best_validation", result.best_validation},
                             {"epochs", cfg.epochs},
                             {"wall_s", wall_total}}
                  .dump()
           << "\n";
  return result;
}

/// Distillation-only pretraining: the standard way to produce the
/// "fine-tuned init" student. Returns a fresh network trained for
/// `epochs` epochs against the teacher alone.
inline StudentNet pretrain_student(const Dataset& ds, const TeacherBackend& teacher,
                                   TrainConfig cfg, int epochs,
                                   const std::string& out_dir) {
  cfg.distill_only = true;
  cfg.disable_distill = false;
  cfg.epochs = epochs;
  StudentNet net = build_toy_student(cfg.student);
  fit(ds, &teacher, net, cfg, out_dir);
  return net;
}

inline std::vector<nlohmann::json> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path);
  std::vector<nlohmann::json> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    lines.push_back(nlohmann::json::parse(line));
  }
  return lines;
}

}  // namespace mdt
