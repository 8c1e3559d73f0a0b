#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "rae/checkpoint.hpp"
#include "rae/commands.hpp"
#include "rae/data.hpp"
#include "rae/kernels.hpp"

using namespace rae;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "rae_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig tiny_rc(const fs::path& out, const std::string& run_name) {
  RunConfig rc;
  rc.model.dim = 16;
  rc.model.heads = 2;
  rc.model.enc_depth = 1;
  rc.model.reg_depth = 1;
  rc.model.dec_depth = 1;
  rc.model.patch_count = 8;
  rc.model.neighbors = 6;
  rc.data.points = 64;
  rc.data.train_per_class = 2;
  rc.data.test_per_class = 1;
  rc.epochs = 2;
  rc.warmup_epochs = 1;
  rc.batch_size = 8;
  rc.out_dir = out.string();
  rc.run_name = run_name;
  rc.seed = 3;
  return rc;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config: ini round trip preserves every field") {
  RunConfig rc = RunConfig::profile("paper");
  rc.seed = 1234;
  rc.align_target = "infonce";
  rc.model.kv_mode = KvMode::visible_always;
  rc.model.variant = PipelineVariant::decoder_only;
  rc.no_regressor = true;
  rc.topology = "c,d";
  const RunConfig back = RunConfig::from_ini_string(rc.to_ini());
  CHECK(back.to_ini() == rc.to_ini());
  CHECK(back.model.dim == 384);
  CHECK(back.model.kv_mode == KvMode::visible_always);
  CHECK(back.seed == 1234);
}

TEST_CASE("config: named errors for unknown fields and invalid values") {
  CHECK_THROWS_WITH_AS(RunConfig::from_ini_string("[model]\nwidth = 3\n"),
                       doctest::Contains("unknown field 'model.width'"), ConfigError);

  RunConfig rc;
  rc.model.dim = 30;  // not divisible by 4 heads
  CHECK_THROWS_WITH_AS(rc.validate("pretrain"), doctest::Contains("model.dim"), ConfigError);

  rc = RunConfig();
  rc.model.mask_ratio = 0.01;  // floor(0.16) = 0 masked patches
  CHECK_THROWS_WITH_AS(rc.validate("pretrain"), doctest::Contains("mask_ratio"), ConfigError);

  rc = RunConfig();
  rc.protocol = "SOME";
  CHECK_THROWS_WITH_AS(rc.validate("finetune"), doctest::Contains("protocol"), ConfigError);

  rc = RunConfig();
  CHECK_THROWS_WITH_AS(rc.validate("finetune"), doctest::Contains("checkpoint"), ConfigError);

  rc = RunConfig();
  CHECK_THROWS_WITH_AS(rc.validate("ablate"), doctest::Contains("axes"), ConfigError);

  rc = RunConfig();
  rc.precision = "f16";
  CHECK_THROWS_WITH_AS(rc.validate("pretrain"), doctest::Contains("precision"), ConfigError);
}

TEST_CASE("config: paper profile carries the full-scale settings") {
  const RunConfig rc = RunConfig::profile("paper");
  CHECK(rc.model.dim == 384);
  CHECK(rc.model.heads == 6);
  CHECK(rc.model.enc_depth == 12);
  CHECK(rc.model.reg_depth == 4);
  CHECK(rc.model.dec_depth == 2);
  CHECK(rc.model.patch_count == 64);
  CHECK(rc.model.neighbors == 32);
  CHECK(rc.data.points == 1024);
  CHECK(rc.epochs == 300);
  CHECK(rc.batch_size == 128);
  CHECK(rc.model.mask_ratio == 0.8);
  CHECK_THROWS_AS(RunConfig::profile("napkin"), ConfigError);
}

TEST_CASE("cmd_pretrain: epochs=0 writes initialized checkpoint and an empty log body") {
  const fs::path out = fresh_dir("pre0");
  RunConfig rc = tiny_rc(out, "run");
  rc.epochs = 0;
  CHECK(cli::cmd_pretrain(rc) == 0);
  CHECK(fs::exists(out / "run" / "checkpoint.rae"));
  CHECK(fs::exists(out / "run" / "config.ini"));
  const std::string log = slurp(out / "run" / "log.csv");
  CHECK(log == "step,l_rec,l_align,l_total,lr,grad_norm,seconds\n");
  const auto ck = load_checkpoint<double>((out / "run" / "checkpoint.rae").string());
  CHECK(ck.state.params.contains("mask_query"));
  CHECK(ck.opt.step_count() == 0);
}

TEST_CASE("cmd_pretrain: identical config+seed reproduces identical checkpoints") {
  const fs::path out = fresh_dir("deterministic");
  RunConfig rc = tiny_rc(out, "a");
  CHECK(cli::cmd_pretrain(rc) == 0);
  const std::string first = slurp(out / "a" / "checkpoint.rae");
  RunConfig rc2 = tiny_rc(out, "a");
  CHECK(cli::cmd_pretrain(rc2) == 0);
  const std::string second = slurp(out / "a" / "checkpoint.rae");
  CHECK(first == second);
  CHECK(!first.empty());
}

TEST_CASE("checkpoint: save/load round-trips bit-exactly; precision mismatch rejected") {
  const fs::path out = fresh_dir("ckpt");
  RunConfig rc = tiny_rc(out, "run");
  CHECK(cli::cmd_pretrain(rc) == 0);
  const fs::path path = out / "run" / "checkpoint.rae";
  auto ck = load_checkpoint<double>(path.string());
  const fs::path copy = out / "copy.rae";
  save_checkpoint(copy.string(), ck.state, ck.opt, ck.config_ini, ck.rng);
  CHECK(slurp(path) == slurp(copy));
  CHECK_THROWS_AS(load_checkpoint<float>(path.string()), ConfigError);
  CHECK_THROWS_AS(load_checkpoint<double>((out / "nothere.rae").string()), IoError);

  {
    std::ofstream bad(out / "bad.rae", std::ios::binary);
    bad << "definitely not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint<double>((out / "bad.rae").string()), IoError);
}

TEST_CASE("cmd_finetune: missing checkpoint path errors; topology grid emits rows") {
  const fs::path out = fresh_dir("ft");
  RunConfig rc = tiny_rc(out, "pre");
  CHECK(cli::cmd_pretrain(rc) == 0);

  RunConfig missing = tiny_rc(out, "ftbad");
  missing.checkpoint = (out / "absent.rae").string();
  CHECK(cli::cmd_finetune(missing) == 1);

  RunConfig ft = tiny_rc(out, "ftrun");
  ft.checkpoint = (out / "pre" / "checkpoint.rae").string();
  ft.protocol = "LINEAR";
  ft.topology = "a,b,c,d";
  ft.epochs = 1;
  CHECK(cli::cmd_finetune(ft) == 0);
  const std::string summary = slurp(out / "ftrun" / "summary.csv");
  // Header plus one row per topology.
  CHECK(std::count(summary.begin(), summary.end(), '\n') == 5);
  CHECK(summary.find(",a,") != std::string::npos);
  CHECK(summary.find(",d,") != std::string::npos);
  // LINEAR protocol reports an unchanged backbone.
  CHECK(summary.find("none") != std::string::npos);
}

TEST_CASE("cmd_reconstruct: single masked patch perturbs only that patch; exports parse back") {
  const fs::path out = fresh_dir("recon");
  RunConfig rc = tiny_rc(out, "pre");
  CHECK(cli::cmd_pretrain(rc) == 0);

  const PointCloud cloud = gen_shape(ShapeClass::torus, 64, 0.01, 77);
  save_xyz(cloud, (out / "cloud.xyz").string());

  RunConfig rec = tiny_rc(out, "recrun");
  rec.checkpoint = (out / "pre" / "checkpoint.rae").string();
  rec.cloud = (out / "cloud.xyz").string();
  rec.model.mask_ratio = 1.0 / 8.0;  // exactly one masked patch at S=8
  CHECK(cli::cmd_reconstruct(rec) == 0);

  const PointCloud input = load_cloud((out / "recrun" / "input.xyz").string());
  const PointCloud visible = load_cloud((out / "recrun" / "visible.xyz").string());
  const PointCloud recon = load_cloud((out / "recrun" / "reconstructed.xyz").string());
  CHECK(input.size() == 64);
  // Reconstruction = visible points (exact copies from the input) plus the
  // k predicted points of the single masked patch.
  CHECK(recon.size() == visible.size() + 6);
  for (std::size_t i = 0; i < visible.size(); ++i) {
    // Visible patch points are input points up to the recentring round trip.
    double nearest = 1e300;
    for (const Vec3& q : input.points)
      nearest = std::min(nearest, dist2_3d(visible.points[i].data(), q.data()));
    CHECK(nearest < 1e-24);
    for (std::size_t d = 0; d < 3; ++d) CHECK(recon.points[i][d] == visible.points[i][d]);
  }

  // The mask_ratio override is honored but the checkpoint geometry wins:
  // visible patches hold 7 of 8 patches * 6 points.
  CHECK(visible.size() == 7 * 6);
}

TEST_CASE("cmd_gendata: manifest directory reloads as a dataset") {
  const fs::path out = fresh_dir("gen");
  RunConfig rc = tiny_rc(out, "gd");
  rc.data.classes = "sphere,plane";
  rc.data.train_per_class = 3;
  rc.data.test_per_class = 2;
  CHECK(cli::cmd_gendata(rc) == 0);
  const Dataset train = load_dataset_dir((out / "gd" / "dataset").string(), "train");
  const Dataset test = load_dataset_dir((out / "gd" / "dataset").string(), "test");
  CHECK(train.size() == 6);
  CHECK(test.size() == 4);
  CHECK(train.class_names == std::vector<std::string>{"sphere", "plane"});
}

TEST_CASE("cli front end: argv parsing, config file loading, bad flags") {
  const fs::path out = fresh_dir("argv");
  const std::string out_s = out.string();

  const char* argv1[] = {"rae",          "gen-data",          "--classes",
                         "sphere,cube",  "--train-per-class", "2",
                         "--test-per-class", "1",             "--points",
                         "64",           "--out-dir",         out_s.c_str(),
                         "--run-name",   "fromargv"};
  CHECK(cli::run(static_cast<int>(std::size(argv1)), argv1) == 0);
  CHECK(fs::exists(out / "fromargv" / "dataset" / "manifest.csv"));

  // A persisted config relaunches the identical run elsewhere.
  RunConfig rc = tiny_rc(out, "cfgrun");
  rc.epochs = 1;
  {
    std::ofstream f(out / "saved.ini");
    f << rc.to_ini();
  }
  const std::string cfg_path = (out / "saved.ini").string();
  const char* argv2[] = {"rae", "pretrain", "--config", cfg_path.c_str()};
  CHECK(cli::run(4, argv2) == 0);
  CHECK(fs::exists(out / "cfgrun" / "checkpoint.rae"));

  const char* argv3[] = {"rae", "pretrain", "--no-such-flag"};
  CHECK(cli::run(3, argv3) != 0);

  const char* argv4[] = {"rae", "ablate", "--axes", "nonsense"};
  CHECK(cli::run(4, argv4) == 1);
}

TEST_CASE("f32 precision: trains, checkpoints, and refuses f64 loads") {
  const fs::path out = fresh_dir("f32");
  RunConfig rc = tiny_rc(out, "run32");
  rc.precision = "f32";
  CHECK(cli::cmd_pretrain(rc) == 0);
  const fs::path ckpt = out / "run32" / "checkpoint.rae";
  const auto ck = load_checkpoint<float>(ckpt.string());
  CHECK(ck.state.params.contains("mask_query"));
  CHECK_THROWS_AS(load_checkpoint<double>(ckpt.string()), ConfigError);

  RunConfig ft = tiny_rc(out, "ft32");
  ft.precision = "f32";
  ft.checkpoint = ckpt.string();
  ft.protocol = "LINEAR";
  ft.epochs = 2;
  CHECK(cli::cmd_finetune(ft) == 0);
}

TEST_CASE("cmd_gradcheck: fresh build passes and writes one row per check") {
  const fs::path out = fresh_dir("gc");
  RunConfig rc;
  rc.out_dir = out.string();
  rc.run_name = "gc";
  CHECK(cli::cmd_gradcheck(rc) == 0);
  const std::string csv = slurp(out / "gc" / "gradcheck.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') >= 30);
  CHECK(csv.find("FAIL") == std::string::npos);
}
