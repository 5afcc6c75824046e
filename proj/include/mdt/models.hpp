#pragma once

// Depth networks: a small trainable encoder-decoder student and frozen
// teacher backends.
//
// The student maps an RGB image to normalized disparity in (0,1) via a
// sigmoid head; the metric depth decoding (Min-Max + depth range) happens in
// the training/eval pipeline. The teacher is an opaque per-frame prediction
// source whose parameters never join a gradient tape.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mdt/common.hpp"
#include "mdt/dataio.hpp"
#include "mdt/tape.hpp"

namespace mdt {

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

struct Parameter {
  std::string name;
  Tensor value;
};

/// Named, ordered parameter list. The order fixes the optimizer-state and
/// checkpoint layouts.
class ParameterStore {
 public:
  int add(std::string name, Tensor value) {
    for (const Parameter& p : params_)
      require(p.name != name, "duplicate parameter name: " + name);
    params_.push_back({std::move(name), std::move(value)});
    return static_cast<int>(params_.size()) - 1;
  }

  int count() const { return static_cast<int>(params_.size()); }
  Parameter& at(int i) { return params_.at(static_cast<std::size_t>(i)); }
  const Parameter& at(int i) const { return params_.at(static_cast<std::size_t>(i)); }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const Parameter& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Parameter> params_;
};

// ---------------------------------------------------------------------------
// Toy student network
// ---------------------------------------------------------------------------

struct StudentConfig {
  int input_channels = 3;
  int base_channels = 8;  // width at full resolution; doubles per level
  int levels = 2;         // number of 2x downsamplings in the encoder
  std::uint64_t seed = 42;

  void validate() const {
    if (input_channels < 1) throw ConfigError("student: input_channels must be >= 1");
    if (base_channels < 1) throw ConfigError("student: base_channels must be >= 1");
    if (levels < 1 || levels > 6) throw ConfigError("student: levels must be in [1,6]");
  }

  int width_at(int level) const { return base_channels << level; }
};

/// Encoder-decoder with skip connections:
///   enc[l]   = elu(conv3x3(pool2(enc[l-1])))      widths c, 2c, 4c, ...
///   dec[l]   = elu(conv3x3(concat(upsample(dec[l+1]), enc[l])))
///   head     = sigmoid(conv3x3(dec[0]))           one channel in (0,1)
/// Zero-padded convolutions keep every stage at its input resolution, so the
/// network accepts any spatial size divisible by 2^levels.
class StudentNet {
  struct ConvSpec {
    int w = -1, b = -1;  // ParameterStore indices
    int in_ch = 0, out_ch = 0;
  };

 public:
  explicit StudentNet(const StudentConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    int prev = cfg_.input_channels;
    for (int l = 0; l <= cfg_.levels; ++l) {
      enc_.push_back(add_conv("enc" + std::to_string(l), prev, cfg_.width_at(l), rng));
      prev = cfg_.width_at(l);
    }
    for (int l = cfg_.levels - 1; l >= 0; --l)
      dec_.push_back(add_conv("dec" + std::to_string(l),
                              cfg_.width_at(l + 1) + cfg_.width_at(l),
                              cfg_.width_at(l), rng));
    head_ = add_conv("head", cfg_.base_channels, 1, rng);
  }

  const StudentConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  std::int64_t parameter_count() const { return params_.scalar_count(); }

  /// The network with its parameters materialized on a graph. trainable=true
  /// binds leaves (gradients accumulate into them); false binds constants.
  struct Bound {
    const StudentNet* net = nullptr;
    Graph* g = nullptr;
    std::vector<Var> pvars;  // one per ParameterStore entry, same order

    /// (input_channels, H, W) image -> (1, H, W) normalized disparity.
    Var forward(Var image) const {
      const StudentConfig& cfg = net->cfg_;
      const Tensor& iv = g->val(image);
      require(iv.channels() == cfg.input_channels, "student: channel mismatch");
      const int div = 1 << cfg.levels;
      require(iv.rows() % div == 0 && iv.cols() % div == 0,
              "student: input size must be divisible by 2^levels");
      std::vector<Var> skips;
      Var x = image;
      for (int l = 0; l <= cfg.levels; ++l) {
        if (l > 0) x = avgpool2(x);
        x = elu(apply_conv(net->enc_[static_cast<std::size_t>(l)], x));
        skips.push_back(x);
      }
      for (int l = cfg.levels - 1; l >= 0; --l) {
        const Var skip = skips[static_cast<std::size_t>(l)];
        const Tensor& sv = g->val(skip);
        x = resize_bilinear(x, sv.rows(), sv.cols());
        x = concat_ch(x, skip);
        x = elu(apply_conv(net->dec_[static_cast<std::size_t>(cfg.levels - 1 - l)], x));
      }
      return sigmoid(apply_conv(net->head_, x));
    }

   private:
    Var apply_conv(const StudentNet::ConvSpec& c, Var x) const {
      return conv3x3(x, pvars[static_cast<std::size_t>(c.w)],
                     pvars[static_cast<std::size_t>(c.b)], c.in_ch, c.out_ch);
    }
  };

  Bound bind(Graph& g, bool trainable) const {
    Bound b;
    b.net = this;
    b.g = &g;
    b.pvars.reserve(static_cast<std::size_t>(params_.count()));
    for (int i = 0; i < params_.count(); ++i)
      b.pvars.push_back(trainable ? g.leaf(params_.at(i).value)
                                  : g.constant(params_.at(i).value));
    return b;
  }

 private:
  ConvSpec add_conv(const std::string& name, int in_ch, int out_ch,
                    std::mt19937_64& rng) {
    // Glorot-uniform weights (fan counts include the 3x3 support), zero bias.
    const double limit = std::sqrt(6.0 / (9.0 * in_ch + 9.0 * out_ch));
    std::uniform_real_distribution<double> u(-limit, limit);
    Tensor w = Tensor::zeros(out_ch * in_ch, 3, 3);
    for (Grid& k : w.ch)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) k(y, x) = u(rng);
    ConvSpec c;
    c.in_ch = in_ch;
    c.out_ch = out_ch;
    c.w = params_.add(name + ".w", std::move(w));
    c.b = params_.add(name + ".b", Tensor::zeros(out_ch, 1, 1));
    return c;
  }

  StudentConfig cfg_;
  ParameterStore params_;
  std::vector<ConvSpec> enc_, dec_;
  ConvSpec head_;
};

inline StudentNet build_toy_student(const StudentConfig& cfg) { return StudentNet(cfg); }

/// Bilinear resize of an inverse-depth prediction to a new resolution;
/// differentiable, identity when the resolution already matches.
inline Var upsample_prediction(Var inv_depth, int rows, int cols) {
  return resize_bilinear(inv_depth, rows, cols);
}

// ---------------------------------------------------------------------------
// Teacher backends
// ---------------------------------------------------------------------------

struct TeacherPrediction {
  Grid values;  // inverse depth, or depth when kind == kDepth
  DepthKind kind = DepthKind::kInverseDepth;
};

/// Frozen prediction source keyed by dataset frame id. Implementations must
/// never expose parameters to a gradient tape; predictions enter graphs as
/// constants only.
class TeacherBackend {
 public:
  virtual ~TeacherBackend() = default;
  virtual DepthKind output_kind() const = 0;
  virtual TeacherPrediction predict(int frame_id) const = 0;
};

/// Reads per-frame predictions exported by an offline model run. Layout:
/// <dir>/000000.dpt, 000001.dpt, ... (float32 depth files; see dataio).
class PrecomputedTeacher final : public TeacherBackend {
 public:
  explicit PrecomputedTeacher(std::string dir) : dir_(std::move(dir)) {
    bool found = false;
    std::error_code ec;
    for (const auto& p : std::filesystem::directory_iterator(dir_, ec)) {
      if (p.path().extension() == ".dpt") {
        kind_ = read_depth_file(p.path().string()).kind;
        found = true;
        break;
      }
    }
    if (!found)
      throw DataError("teacher directory has no .dpt predictions: " + dir_);
  }

  DepthKind output_kind() const override { return kind_; }

  TeacherPrediction predict(int frame_id) const override {
    auto it = cache_.find(frame_id);
    if (it != cache_.end()) return it->second;
    const std::string path = dir_ + "/" + frame_name(frame_id, ".dpt");
    if (!std::filesystem::exists(path))
      throw DataError("no teacher prediction for frame " + std::to_string(frame_id) +
                      " (expected " + path + ")");
    const DepthFile f = read_depth_file(path);
    if (f.kind != kind_)
      throw DataError("teacher prediction kind mismatch at frame " +
                      std::to_string(frame_id) + ": " + path);
    TeacherPrediction pred{f.values, f.kind};
    cache_.emplace(frame_id, pred);
    return pred;
  }

 private:
  std::string dir_;
  DepthKind kind_ = DepthKind::kInverseDepth;
  mutable std::map<int, TeacherPrediction> cache_;
};

/// Adapter for an in-process model: wraps any callable frame_id -> Grid.
/// Useful for tests and for plugging a real network behind the same API.
class CallableTeacher final : public TeacherBackend {
 public:
  using Fn = std::function<Grid(int)>;
  CallableTeacher(Fn fn, DepthKind kind) : fn_(std::move(fn)), kind_(kind) {}
  DepthKind output_kind() const override { return kind_; }
  TeacherPrediction predict(int frame_id) const override {
    return {fn_(frame_id), kind_};
  }

 private:
  Fn fn_;
  DepthKind kind_;
};

}  // namespace mdt
