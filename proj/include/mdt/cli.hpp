#pragma once

// Subcommand implementations for the mdt tool: synth-gen, finetune,
// evaluate, and export-cloud. Config files are JSON with the TrainConfig
// schema (see profiles/); command-line flags override config values, and
// every override flag also reads an MDT_* environment variable.
//
// Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical
// failure, 1 anything else. Logs go to stderr, artifacts to the requested
// output paths.

#include <cstdio>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "mdt/evaluator.hpp"
#include "mdt/trainer.hpp"

namespace mdt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;
inline constexpr int kExitOther = 1;

namespace detail {

inline void log(const std::string& msg) { std::fprintf(stderr, "[mdt] %s\n", msg.c_str()); }

inline nlohmann::json load_config_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path);
  return j;
}

inline void apply_ablation(TrainConfig& cfg, const std::string& ablation) {
  if (ablation == "none" || ablation.empty()) return;
  if (ablation == "photo-only") {
    cfg.disable_distill = true;
    cfg.disable_consistency = true;
    cfg.weights.distill = 0.0;
    cfg.weights.consistency = 0.0;
  } else if (ablation == "photo-distill") {
    cfg.disable_consistency = true;
    cfg.weights.consistency = 0.0;
  } else {
    throw ConfigError("unknown ablation: " + ablation);
  }
}

/// "A:B" (half-open) or a single index "A" (one frame).
inline std::pair<int, int> parse_frame_range(const std::string& text, int frame_count) {
  int a = 0, b = 0;
  const auto colon = text.find(':');
  try {
    if (colon == std::string::npos) {
      a = std::stoi(text);
      b = a + 1;
    } else {
      a = std::stoi(text.substr(0, colon));
      b = std::stoi(text.substr(colon + 1));
    }
  } catch (const std::exception&) {
    throw ConfigError("malformed frame range (expected A or A:B): " + text);
  }
  if (a < 0 || b > frame_count || a >= b)
    throw DataError("frame range " + text + " outside dataset (frames 0.." +
                    std::to_string(frame_count - 1) + ")");
  return {a, b};
}

inline std::string metrics_line(const char* label, const DepthMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "%-12s abs_rel=%.4f sq_rel=%.4f rmse=%.4f rmse_log=%.4f "
                "d1=%.3f d2=%.3f d3=%.3f",
                label, m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2,
                m.delta3);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// synth-gen
// ---------------------------------------------------------------------------

struct SynthGenArgs {
  std::string out;
  SynthConfig cfg;
};

inline int cmd_synth_gen(const SynthGenArgs& a) {
  a.cfg.validate();
  generate_sequence(a.out, a.cfg);
  const std::uint64_t checksum = tree_checksum(a.out);
  detail::log("wrote " + std::to_string(a.cfg.frames) + " frames (" +
              std::to_string(a.cfg.width) + "x" + std::to_string(a.cfg.height) +
              ") to " + a.out);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "dataset checksum %016llx",
                static_cast<unsigned long long>(checksum));
  detail::log(buf);
  std::printf("%s\n", buf + 17);  // bare checksum on stdout for scripting
  return kExitOk;
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

struct FinetuneArgs {
  std::string data;
  std::string out;
  std::string config_path;
  std::string ablation = "none";
  std::string init_checkpoint;
  int pretrain_epochs = 2;
  TrainConfig cfg;  // after config-file and flag overlays
};

inline int cmd_finetune(const FinetuneArgs& a) {
  TrainConfig cfg = a.cfg;
  detail::apply_ablation(cfg, a.ablation);
  cfg.validate();
  const Dataset ds = load_dataset(a.data);
  detail::log("dataset " + ds.root + " with " + std::to_string(ds.frames.size()) +
              " frames");

  std::optional<PrecomputedTeacher> teacher;
  if (ds.has_teacher()) teacher.emplace(ds.root + "/teacher");

  StudentNet net = [&] {
    if (!a.init_checkpoint.empty()) {
      detail::log("initializing from checkpoint " + a.init_checkpoint);
      Checkpoint ck = load_checkpoint(a.init_checkpoint);
      cfg.student = ck.meta.at("config").get<TrainConfig>().student;
      return std::move(ck.net);
    }
    if (cfg.from_scratch) {
      detail::log("initializing from scratch (random weights)");
      return build_toy_student(cfg.student);
    }
    if (!teacher)
      throw DataError("no teacher predictions in " + ds.root +
                      "/teacher (needed for the pretrained init; pass --init or "
                      "--from-scratch to skip)");
    detail::log("pretraining a distilled init for " +
                std::to_string(a.pretrain_epochs) + " epochs");
    return pretrain_student(ds, *teacher, cfg, a.pretrain_epochs, a.out + "/pretrain");
  }();

  const TeacherBackend* tptr = nullptr;
  if (!cfg.disable_distill) {
    if (!teacher) throw DataError("no teacher predictions in " + ds.root + "/teacher");
    tptr = &*teacher;
  }

  const FitResult res = fit(ds, tptr, net, cfg, a.out);
  detail::log("training done: best epoch " + std::to_string(res.best_epoch) +
              ", manifest " + res.manifest_path);
  if (res.best_epoch >= 0) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "best validation %.6f", res.best_validation);
    detail::log(buf);
  }
  std::printf("%s\n", res.best_checkpoint.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint;
  std::string data;
  std::string report;
  EvalClamp clamp;
};

inline int cmd_evaluate(const EvaluateArgs& a) {
  a.clamp.validate();
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const TrainConfig cfg = ck.meta.at("config").get<TrainConfig>();
  const Dataset ds = load_dataset(a.data);
  detail::log("evaluating " + a.checkpoint + " on " + std::to_string(ds.frames.size()) +
              " frames");

  auto predictor = [&](int id) {
    const Tensor image = read_ppm(ds.image_path(id));
    return predict_depth(ck.net, image, cfg.depth_range, cfg.student_rows,
                         cfg.student_cols);
  };
  const RunEval run = evaluate_run(ds, predictor, a.clamp);
  write_metrics_table(run, a.report);
  detail::log("report written to " + a.report);
  std::printf("%s\n", detail::metrics_line("raw_mean", run.raw_mean).c_str());
  std::printf("%s\n", detail::metrics_line("scaled_mean", run.scaled_mean).c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// export-cloud
// ---------------------------------------------------------------------------

struct ExportCloudArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string frames;  // "A:B" half-open, "A" single, empty = all
};

inline int cmd_export_cloud(const ExportCloudArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const TrainConfig cfg = ck.meta.at("config").get<TrainConfig>();
  const Dataset ds = load_dataset(a.data);
  const int frame_count = static_cast<int>(ds.frames.size());
  const auto [lo, hi] = a.frames.empty()
                            ? std::pair<int, int>{0, frame_count}
                            : detail::parse_frame_range(a.frames, frame_count);

  const AssociationResult assoc = associate(ds.frames, ds.trajectory, cfg.max_dt);
  std::vector<const MatchedFrame*> by_id(ds.frames.size(), nullptr);
  for (const MatchedFrame& m : assoc.matched)
    by_id[static_cast<std::size_t>(m.frame.id)] = &m;

  PointCloud cloud;
  for (int id = lo; id < hi; ++id) {
    const MatchedFrame* m = by_id[static_cast<std::size_t>(id)];
    if (m == nullptr)
      throw DataError("frame " + std::to_string(id) + " has no pose within max_dt");
    const Tensor image = read_ppm(ds.image_path(id));
    const DepthMap depth = predict_depth(ck.net, image, cfg.depth_range,
                                         cfg.student_rows, cfg.student_cols);
    add_frame(cloud, depth, image, ds.intrinsics, m->world_from_camera);
  }
  write_ply(cloud, a.out);
  detail::log("wrote " + std::to_string(cloud.size()) + " points from frames [" +
              std::to_string(lo) + "," + std::to_string(hi) + ") to " + a.out);
  std::printf("%zu\n", cloud.size());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// argument wiring
// ---------------------------------------------------------------------------

inline int run(int argc, char** argv) {
  CLI::App app{"self-supervised metric depth fine-tuning toolkit"};
  app.require_subcommand(1);
  int rc = kExitOk;

  // ---- synth-gen ----
  auto sg = std::make_shared<SynthGenArgs>();
  CLI::App* synth = app.add_subcommand("synth-gen", "generate a synthetic sequence");
  synth->add_option("--out", sg->out, "output dataset directory")->required();
  synth->add_option("--frames", sg->cfg.frames, "number of frames");
  synth->add_option("--width", sg->cfg.width, "image width");
  synth->add_option("--height", sg->cfg.height, "image height");
  synth->add_option("--scene-seed", sg->cfg.seed, "scene and texture seed")
      ->envname("MDT_SCENE_SEED");
  synth->add_flag_callback("--no-teacher", [sg] { sg->cfg.write_teacher = false; },
                           "skip teacher predictions");
  synth->add_flag_callback("--no-gt", [sg] { sg->cfg.write_gt = false; },
                           "skip ground-truth depth");
  synth->callback([&rc, sg] { rc = cmd_synth_gen(*sg); });

  // ---- finetune ----
  auto ft = std::make_shared<FinetuneArgs>();
  struct FtOverrides {
    int epochs = 0, batch_size = 0, stride = 0, rows = 0, cols = 0;
    double learning_rate = 0;
    std::uint64_t seed = 0;
    bool from_scratch = false;
  };
  auto fo = std::make_shared<FtOverrides>();
  CLI::App* fine = app.add_subcommand("finetune", "fine-tune the student network");
  fine->add_option("--data", ft->data, "dataset directory")->required();
  fine->add_option("--out", ft->out, "output directory for checkpoints and manifest")
      ->required();
  fine->add_option("--config", ft->config_path, "JSON config file (TrainConfig schema)")
      ->envname("MDT_CONFIG");
  fine->add_option("--ablation", ft->ablation, "ablation variant")
      ->check(CLI::IsMember({"none", "photo-only", "photo-distill"}))
      ->envname("MDT_ABLATION");
  fine->add_option("--init", ft->init_checkpoint, "initial checkpoint");
  fine->add_option("--pretrain-epochs", ft->pretrain_epochs,
                   "distill-only epochs for the default pretrained init")
      ->envname("MDT_PRETRAIN_EPOCHS");
  CLI::Option* o_epochs =
      fine->add_option("--epochs", fo->epochs, "training epochs")->envname("MDT_EPOCHS");
  CLI::Option* o_batch = fine->add_option("--batch-size", fo->batch_size, "batch size")
                             ->envname("MDT_BATCH_SIZE");
  CLI::Option* o_lr = fine->add_option("--learning-rate", fo->learning_rate,
                                       "optimizer learning rate")
                          ->envname("MDT_LEARNING_RATE");
  CLI::Option* o_seed =
      fine->add_option("--seed", fo->seed, "training seed")->envname("MDT_SEED");
  CLI::Option* o_stride =
      fine->add_option("--stride", fo->stride, "source-frame stride")->envname("MDT_STRIDE");
  CLI::Option* o_rows =
      fine->add_option("--rows", fo->rows, "student input rows")->envname("MDT_ROWS");
  CLI::Option* o_cols =
      fine->add_option("--cols", fo->cols, "student input cols")->envname("MDT_COLS");
  CLI::Option* o_scratch = fine->add_flag("--from-scratch", fo->from_scratch,
                                          "random init instead of a pretrained student");
  fine->callback([&rc, ft, fo, o_epochs, o_batch, o_lr, o_seed, o_stride, o_rows,
                  o_cols, o_scratch] {
    if (!ft->config_path.empty())
      from_json(detail::load_config_json(ft->config_path), ft->cfg);
    if (o_epochs->count()) ft->cfg.epochs = fo->epochs;
    if (o_batch->count()) ft->cfg.batch_size = fo->batch_size;
    if (o_lr->count()) ft->cfg.learning_rate = fo->learning_rate;
    if (o_seed->count()) ft->cfg.seed = fo->seed;
    if (o_stride->count()) ft->cfg.stride = fo->stride;
    if (o_rows->count()) ft->cfg.student_rows = fo->rows;
    if (o_cols->count()) ft->cfg.student_cols = fo->cols;
    if (o_scratch->count()) ft->cfg.from_scratch = true;
    rc = cmd_finetune(*ft);
  });

  // ---- evaluate ----
  auto ev = std::make_shared<EvaluateArgs>();
  CLI::App* eval = app.add_subcommand("evaluate", "compute depth metrics for a checkpoint");
  eval->add_option("--checkpoint", ev->checkpoint, "trained checkpoint")->required();
  eval->add_option("--data", ev->data, "dataset directory with ground truth")->required();
  eval->add_option("--report", ev->report, "metrics table output path")->required();
  eval->add_option("--clamp-min", ev->clamp.d_min, "evaluation depth floor");
  eval->add_option("--clamp-max", ev->clamp.d_max, "evaluation depth ceiling");
  eval->callback([&rc, ev] { rc = cmd_evaluate(*ev); });

  // ---- export-cloud ----
  auto ec = std::make_shared<ExportCloudArgs>();
  CLI::App* cloud = app.add_subcommand("export-cloud", "export an accumulated point cloud");
  cloud->add_option("--checkpoint", ec->checkpoint, "trained checkpoint")->required();
  cloud->add_option("--data", ec->data, "dataset directory")->required();
  cloud->add_option("--out", ec->out, "output PLY path")->required();
  cloud->add_option("--frames", ec->frames, "frame range A:B (half-open) or single A");
  cloud->callback([&rc, ec] { rc = cmd_export_cloud(*ec); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const ConfigError& e) {
    detail::log(std::string("config error: ") + e.what());
    return kExitUsage;
  } catch (const DataError& e) {
    detail::log(std::string("data error: ") + e.what());
    return kExitData;
  } catch (const NumericalError& e) {
    detail::log(std::string("numerical error: ") + e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    detail::log(std::string("error: ") + e.what());
    return kExitOther;
  }
  return rc;
}

}  // namespace mdt::cli
