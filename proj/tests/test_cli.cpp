// End-to-end tests of the command-line tool: each case invokes the built
// binary as a subprocess and checks exit codes and produced artifacts.

#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "mdt/dataio.hpp"
#include "mdt/synth.hpp"
#include "mdt/trainer.hpp"

namespace fs = std::filesystem;
using namespace mdt;

namespace {

const std::string kCli = MDT_CLI_PATH;

struct RunResult {
  int exit_code = -1;
  std::string stdout_text;
};

/// Run the CLI with stdout captured to a file; stderr goes to /dev/null to
/// keep test output readable.
RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
  static int counter = 0;
  const std::string cap =
      (fs::temp_directory_path() / ("mdt_cli_out_" + std::to_string(counter++))).string();
  const std::string cmd =
      env_prefix + " \"" + kCli + "\" " + args + " > " + cap + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(cap);
  std::string line;
  while (std::getline(in, line)) r.stdout_text += line + "\n";
  return r;
}

std::string fresh_dir(const std::string& name) {
  const std::string dir = (fs::temp_directory_path() / name).string();
  fs::remove_all(dir);
  return dir;
}

// A CLI-generated dataset plus one trained checkpoint, shared by the
// evaluate / export-cloud cases. Training is the expensive part, so it runs
// once; the sequence is short with a gentle orbit so warps stay on-screen.
struct CliFixture {
  std::string data;
  std::string run;
  std::string checkpoint;
};

const CliFixture& fixture() {
  static CliFixture f = [] {
    CliFixture fx;
    fx.data = fresh_dir("mdt_cli_data");
    SynthConfig cfg;
    cfg.frames = 8;
    cfg.width = 48;
    cfg.height = 32;
    cfg.fx = 40;
    cfg.fy = 40;
    cfg.orbit_revolutions = 0.25;
    cfg.seed = 12;
    generate_sequence(fx.data, cfg);

    fx.run = fresh_dir("mdt_cli_run");
    const RunResult r = run_cli("finetune --data " + fx.data + " --out " + fx.run +
                                " --epochs 1 --batch-size 4 --rows 32 --cols 48"
                                " --stride 1 --pretrain-epochs 1");
    REQUIRE(r.exit_code == 0);
    fx.checkpoint = fx.run + "/best.ckpt";
    REQUIRE(fs::exists(fx.checkpoint));
    return fx;
  }();
  return f;
}

}  // namespace

TEST_CASE("synth-gen produces a loadable dataset and is seed-stable", "[cli]") {
  const std::string a = fresh_dir("mdt_cli_gen_a");
  const std::string b = fresh_dir("mdt_cli_gen_b");
  const std::string args = " --frames 3 --width 32 --height 32 --scene-seed 4";
  const RunResult ra = run_cli("synth-gen --out " + a + args);
  REQUIRE(ra.exit_code == 0);
  const RunResult rb = run_cli("synth-gen --out " + b + args);
  REQUIRE(rb.exit_code == 0);

  const Dataset ds = load_dataset(a);
  CHECK(ds.frames.size() == 3);
  CHECK(ds.trajectory.entries.size() == 3);
  CHECK(fs::exists(a + "/images/000002.ppm"));

  // same seed, same bytes; the printed checksum matches the tree
  CHECK(tree_checksum(a) == tree_checksum(b));
  CHECK(ra.stdout_text == rb.stdout_text);
  char expect[32];
  std::snprintf(expect, sizeof(expect), "%016llx",
                static_cast<unsigned long long>(tree_checksum(a)));
  CHECK(ra.stdout_text == std::string(expect) + "\n");

  const std::string c = fresh_dir("mdt_cli_gen_c");
  const RunResult rc =
      run_cli("synth-gen --out " + c + " --frames 3 --width 32 --height 32"
              " --scene-seed 5");
  REQUIRE(rc.exit_code == 0);
  CHECK(tree_checksum(a) != tree_checksum(c));
}

TEST_CASE("missing required flags are usage errors", "[cli]") {
  CHECK(run_cli("synth-gen --frames 3").exit_code == 2);
  CHECK(run_cli("").exit_code == 2);
  CHECK(run_cli("no-such-command").exit_code == 2);
  CHECK(run_cli("finetune --data /tmp --out /tmp/x --ablation bogus").exit_code == 2);
  CHECK(run_cli("--help").exit_code == 0);
}

TEST_CASE("finetune trains end to end and records its config", "[cli]") {
  const CliFixture& fx = fixture();
  const auto lines = read_manifest(fx.run + "/manifest.jsonl");
  REQUIRE(lines.size() >= 3);
  CHECK(lines.front().at("type") == "config");
  CHECK(lines.back().at("type") == "final");
  const TrainConfig logged = lines.front().at("config").get<TrainConfig>();
  CHECK(logged.epochs == 1);
  CHECK(logged.student_rows == 32);
  CHECK(logged.student_cols == 48);

  // the pretrained init ran as a separate distill-only fit
  CHECK(fs::exists(fx.run + "/pretrain/manifest.jsonl"));
  const auto pre = read_manifest(fx.run + "/pretrain/manifest.jsonl");
  CHECK(pre.front().at("config").at("distill_only").get<bool>());
}

TEST_CASE("finetune ablation flags zero the matching weights", "[cli]") {
  const CliFixture& fx = fixture();
  const std::string out = fresh_dir("mdt_cli_ablation");
  const RunResult r = run_cli("finetune --data " + fx.data + " --out " + out +
                              " --epochs 0 --rows 32 --cols 48 --stride 1"
                              " --ablation photo-only --pretrain-epochs 0"
                              " --from-scratch");
  REQUIRE(r.exit_code == 0);
  const auto lines = read_manifest(out + "/manifest.jsonl");
  const TrainConfig logged = lines.front().at("config").get<TrainConfig>();
  CHECK(logged.weights.distill == 0.0);
  CHECK(logged.weights.consistency == 0.0);
  CHECK(logged.disable_distill);
  CHECK(logged.disable_consistency);
}

TEST_CASE("finetune reads config files and lets flags win", "[cli]") {
  const CliFixture& fx = fixture();
  const std::string out = fresh_dir("mdt_cli_cfgfile");
  const std::string cfg_path =
      (fs::temp_directory_path() / "mdt_cli_partial.json").string();
  std::ofstream(cfg_path) << R"({"epochs": 5, "stride": 1, "student_rows": 32,)"
                          << R"( "student_cols": 48, "batch_size": 2})";

  const RunResult r = run_cli("finetune --data " + fx.data + " --out " + out +
                              " --config " + cfg_path +
                              " --epochs 0 --from-scratch --pretrain-epochs 0");
  REQUIRE(r.exit_code == 0);
  const auto lines = read_manifest(out + "/manifest.jsonl");
  const TrainConfig logged = lines.front().at("config").get<TrainConfig>();
  CHECK(logged.epochs == 0);      // flag beat the config file
  CHECK(logged.batch_size == 2);  // config file beat the default
  CHECK(logged.stride == 1);

  // environment variables act as flag defaults
  const std::string out2 = fresh_dir("mdt_cli_envvar");
  const RunResult r2 = run_cli("finetune --data " + fx.data + " --out " + out2 +
                                   " --config " + cfg_path +
                                   " --from-scratch --pretrain-epochs 0",
                               "MDT_EPOCHS=0");
  REQUIRE(r2.exit_code == 0);
  const auto lines2 = read_manifest(out2 + "/manifest.jsonl");
  CHECK(lines2.front().at("config").get<TrainConfig>().epochs == 0);

  const RunResult bad = run_cli("finetune --data " + fx.data + " --out " + out +
                                " --config /nonexistent.json");
  CHECK(bad.exit_code == 3);
}

TEST_CASE("the shipped profiles parse into valid configs", "[cli]") {
  for (const std::string name : {"full.profile", "desk.profile"}) {
    const std::string path = std::string(MDT_SOURCE_DIR) + "/profiles/" + name;
    INFO(path);
    std::ifstream in(path);
    REQUIRE(in.good());
    TrainConfig cfg;
    from_json(nlohmann::json::parse(in), cfg);
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.weights.distill == 0.001);
    CHECK(cfg.weights.smooth == 0.01);
    CHECK(cfg.weights.consistency == 0.01);
    // the desk profile is retuned for the bench scene's working volume
    CHECK(cfg.learning_rate == (name == "desk.profile" ? 3e-4 : 1e-4));
    if (name == "desk.profile") {
      CHECK(cfg.depth_range.min_m == 1.8);
      CHECK(cfg.depth_range.max_m == 4.6);
    }
  }
}

TEST_CASE("finetune on a broken dataset is a data error", "[cli]") {
  CHECK(run_cli("finetune --data /no/such/dir --out " + fresh_dir("mdt_cli_nodata"))
            .exit_code == 3);
}

TEST_CASE("evaluate writes both raw and scaled rows", "[cli]") {
  const CliFixture& fx = fixture();
  const std::string report =
      (fs::temp_directory_path() / "mdt_cli_report.tsv").string();
  const RunResult r = run_cli("evaluate --checkpoint " + fx.checkpoint + " --data " +
                              fx.data + " --report " + report);
  REQUIRE(r.exit_code == 0);
  CHECK(r.stdout_text.find("raw_mean") != std::string::npos);
  CHECK(r.stdout_text.find("scaled_mean") != std::string::npos);

  std::ifstream in(report);
  REQUIRE(in.good());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  CHECK(text.find("raw_mean\t") != std::string::npos);
  CHECK(text.find("scaled_mean\t") != std::string::npos);
  CHECK(text.find("raw\t0\t") != std::string::npos);
  CHECK(text.find("scaled\t7\t") != std::string::npos);

  CHECK(run_cli("evaluate --checkpoint /no/such.ckpt --data " + fx.data +
                " --report " + report)
            .exit_code == 3);
  CHECK(run_cli("evaluate --checkpoint " + fx.checkpoint + " --data " + fx.data +
                " --report /no/such/dir/report.tsv")
            .exit_code == 3);
}

TEST_CASE("export-cloud accumulates the requested frames", "[cli]") {
  const CliFixture& fx = fixture();
  const std::string ply = (fs::temp_directory_path() / "mdt_cli_cloud.ply").string();
  const RunResult r = run_cli("export-cloud --checkpoint " + fx.checkpoint +
                              " --data " + fx.data + " --frames 0:2 --out " + ply);
  REQUIRE(r.exit_code == 0);
  CHECK(r.stdout_text == std::to_string(2 * 48 * 32) + "\n");

  std::ifstream in(ply);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line == "ply");
  std::getline(in, line);
  CHECK(line == "format ascii 1.0");
  std::getline(in, line);
  CHECK(line == "element vertex " + std::to_string(2 * 48 * 32));

  CHECK(run_cli("export-cloud --checkpoint " + fx.checkpoint + " --data " + fx.data +
                " --frames 5:99 --out " + ply)
            .exit_code == 3);
  CHECK(run_cli("export-cloud --checkpoint " + fx.checkpoint + " --data " + fx.data +
                " --frames nope --out " + ply)
            .exit_code == 2);
}
