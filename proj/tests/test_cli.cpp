#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

std::string lara_bin() {
  const char* env = std::getenv("LARA_BIN");
  REQUIRE(env != nullptr);
  return env;
}

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run(const std::string& args) {
  const std::string cmd = lara_bin() + " " + args + " 2>&1";
  std::FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
  const int status = pclose(pipe);
  return {WEXITSTATUS(status), out};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

const std::string kMicro =
    " --override model.cameras=2 --override model.image_h=32 --override model.image_w=64"
    " --override model.bev_h=16 --override model.bev_w=16 --override model.cell_meters=1.0"
    " --override model.feat_channels=8 --override model.ray_dim=8"
    " --override model.latent_count=4 --override model.latent_dim=16"
    " --override model.self_layers=1 --override model.heads=2 --override model.d_bev=16";

fs::path scratch() {
  const fs::path dir = fs::temp_directory_path() / "lara_cli_test";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("gen-data: sample count, determinism, invalid extent exit code") {
  const fs::path dir = scratch();
  fs::remove_all(dir / "d1");
  fs::remove_all(dir / "d2");

  RunResult r1 = run("gen-data --count 4 --seed 9 --out " + (dir / "d1").string() + kMicro);
  CHECK(r1.exit_code == 0);
  int sample_dirs = 0;
  for (const auto& e : fs::directory_iterator(dir / "d1"))
    if (e.is_directory()) ++sample_dirs;
  CHECK(sample_dirs == 4);

  RunResult r2 = run("gen-data --count 4 --seed 9 --out " + (dir / "d2").string() + kMicro);
  CHECK(r2.exit_code == 0);
  CHECK(slurp(dir / "d1" / "manifest.json") == slurp(dir / "d2" / "manifest.json"));

  RunResult bad = run("gen-data --count 1 --out " + (dir / "d3").string() +
                      " --override model.cell_meters=0");
  CHECK(bad.exit_code == 2);
  CHECK(bad.output.find("cell_meters") != std::string::npos);
}

TEST_CASE("show-config prints resolved defaults and rejects unknown keys") {
  RunResult r = run("show-config");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("latent_count = 32") != std::string::npos);
  CHECK(r.output.find("query_mode = \"coords_radial\"") != std::string::npos);
  CHECK(r.output.find("[train]") != std::string::npos);

  RunResult alias = run("show-config --override model.N=16");
  CHECK(alias.output.find("latent_count = 16") != std::string::npos);

  RunResult bad = run("show-config --override model.bogus=1");
  CHECK(bad.exit_code == 2);
  CHECK(bad.output.find("valid keys") != std::string::npos);
}

TEST_CASE("train/eval/attn-analyze/sweep round trip at micro scale") {
  const fs::path dir = scratch();
  const std::string data = (dir / "ds").string();
  const std::string val = (dir / "ds_val").string();
  if (!fs::exists(data)) {
    REQUIRE(run("gen-data --count 4 --seed 5 --out " + data + kMicro).exit_code == 0);
    REQUIRE(run("gen-data --count 2 --seed 55 --out " + val + kMicro).exit_code == 0);
  }
  const std::string train_common = kMicro + " --override train.dataset=" + data +
                                   " --override train.batch_size=2" +
                                   " --override train.eval_interval=2";

  SUBCASE("train writes checkpoint, config echo and metrics") {
    fs::remove_all(dir / "run");
    RunResult r = run("train" + train_common + " --override train.steps=4 --out " +
                      (dir / "run").string());
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(dir / "run" / "checkpoint.lara"));
    CHECK(fs::exists(dir / "run" / "config.toml"));
    CHECK(fs::exists(dir / "run" / "metrics.csv"));
    // the echoed config reflects the overrides
    CHECK(slurp(dir / "run" / "config.toml").find("latent_count = 4") != std::string::npos);

    RunResult e = run("eval" + train_common + " --checkpoint " +
                      (dir / "run" / "checkpoint.lara").string() + " --dataset " + data);
    CHECK(e.exit_code == 0);
    CHECK(e.output.find("iou") != std::string::npos);
  }

  SUBCASE("attn-analyze writes the documented file set") {
    fs::remove_all(dir / "attn");
    RunResult r = run("attn-analyze" + train_common + " --dataset " + data +
                      " --sample 0 --selection n=0,h=0 --out " + (dir / "attn").string());
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(dir / "attn" / "polar_n0_h0.svg"));
    CHECK(fs::exists(dir / "attn" / "cam0_n0_h0.png"));
    CHECK(fs::exists(dir / "attn" / "cam1_n0_h0.png"));
    CHECK(fs::exists(dir / "attn" / "index.json"));
    CHECK(fs::exists(dir / "attn" / "attention.lara"));
    CHECK(fs::exists(dir / "attn" / "attention.lara.tokens.json"));
  }

  SUBCASE("single-value sweep equals a plain train run") {
    fs::remove_all(dir / "sweep");
    fs::remove_all(dir / "plain");
    const std::string sweep_common =
        train_common + " --override train.val_dataset=" + val + " --override train.steps=3";
    RunResult s = run("sweep" + sweep_common + " --axis N --values 4 --out " +
                      (dir / "sweep").string());
    CHECK(s.exit_code == 0);
    const std::string csv = slurp(dir / "sweep" / "sweep.csv");
    CHECK(csv.find("N,iou") != std::string::npos);
    // exactly one data row
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);

    RunResult t = run("train" + sweep_common + " --override model.N=4 --out " +
                      (dir / "plain").string());
    CHECK(t.exit_code == 0);
    RunResult e = run("eval" + sweep_common + " --override model.N=4 --checkpoint " +
                      (dir / "plain" / "checkpoint.lara").string() + " --dataset " + val);
    // the sweep's reported IoU equals the plain run's val IoU
    const size_t comma = csv.rfind(',');
    const double sweep_iou = std::stod(csv.substr(comma + 1));
    const size_t pos = e.output.rfind("iou");
    const double eval_iou = std::stod(e.output.substr(pos + 4));
    CHECK(sweep_iou == doctest::Approx(eval_iou).epsilon(1e-9));

    RunResult bad_axis = run("sweep" + sweep_common + " --axis Q --values 1");
    CHECK(bad_axis.exit_code == 2);
  }
}

TEST_CASE("exit codes: 0 success, 2 usage") {
  CHECK(run("show-config").exit_code == 0);
  CHECK(run("definitely-not-a-subcommand").exit_code == 2);
  CHECK(run("").exit_code == 2);  // a subcommand is required
  CHECK(run("eval --config /nonexistent/file.toml").exit_code != 0);
}
