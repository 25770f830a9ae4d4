// Drives the installed command-line binary (path in $UVLM_BIN) as a black
// box: exit codes, output-file contracts, determinism, idempotency.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

std::string bin() {
  const char* b = std::getenv("UVLM_BIN");
  REQUIRE_MESSAGE(b != nullptr, "UVLM_BIN must point at the CLI binary");
  return b;
}

struct RunOut {
  int code = -1;
  std::string out;
};

RunOut run(const std::string& args) {
  const fs::path tmp = fs::temp_directory_path() / "uvlm_cli_out.txt";
  const std::string cmd = bin() + " " + args + " > " + tmp.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  RunOut r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream f(tmp);
  std::stringstream ss;
  ss << f.rdbuf();
  r.out = ss.str();
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "uvlm_cli_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

const std::string kTinyData = "--cases 3 --shape 32x32x16 --granularity C+L --classes 2 --seed 5";

// One shared tiny dataset for the training-dependent cases.
const fs::path& shared_data() {
  static const fs::path dir = [] {
    const fs::path p = fresh_dir("data");
    REQUIRE(run("datagen " + kTinyData + " --out " + p.string()).code == 0);
    return p;
  }();
  return dir;
}

}  // namespace

TEST_CASE("datagen writes the case layout and prints the spec hash") {
  const auto dir = fresh_dir("dg");
  auto r = run("datagen " + kTinyData + " --out " + dir.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("spec_hash=") != std::string::npos);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "config.echo"));
  int case_dirs = 0;
  for (auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && e.path().filename().string().rfind("case_", 0) == 0) ++case_dirs;
  CHECK(case_dirs == 3);
  CHECK(fs::exists(dir / "case_0" / "volume.raw"));
  CHECK(fs::exists(dir / "case_0" / "report.txt"));
}

TEST_CASE("datagen is idempotent: same invocation, identical manifest bytes") {
  const auto a = fresh_dir("dg_a");
  const auto b = fresh_dir("dg_b");
  CHECK(run("datagen " + kTinyData + " --out " + a.string()).code == 0);
  CHECK(run("datagen " + kTinyData + " --out " + b.string()).code == 0);
  CHECK(file_bytes(a / "manifest.json") == file_bytes(b / "manifest.json"));
  CHECK(file_bytes(a / "case_2" / "volume.raw") == file_bytes(b / "case_2" / "volume.raw"));
  // Re-running into the same directory leaves it byte-identical.
  const std::string before = file_bytes(a / "manifest.json");
  CHECK(run("datagen " + kTinyData + " --out " + a.string()).code == 0);
  CHECK(file_bytes(a / "manifest.json") == before);
}

TEST_CASE("indivisible shapes are a usage error with exit code 2") {
  auto r = run("datagen --cases 2 --shape 50x50x30 --out " + fresh_dir("dg_bad").string());
  CHECK(r.code == 2);
  CHECK(r.out.find("divisible") != std::string::npos);
}

TEST_CASE("unknown flags and missing subcommands exit with code 2") {
  CHECK(run("train --bogus-flag 1").code == 2);
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("--help").code == 0);
}

TEST_CASE("stage-1 training logs the reference optimizer and writes the run dir") {
  const auto out = fresh_dir("run1");
  auto r = run("train --stage 1 --data " + shared_data().string() + " --steps 2 --seed 3 --out " +
               out.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("sgd lr=0.01") != std::string::npos);
  CHECK(fs::exists(out / "ckpt_final"));
  CHECK(fs::exists(out / "metrics.csv"));
  std::ifstream m(out / "metrics.csv");
  std::string line;
  std::getline(m, line);
  CHECK(line == "step,loss");

  // config.echo records the effective plan, and flags beat the preset lr.
  const std::string echo = file_bytes(out / "config.echo");
  CHECK(echo.find("sgd lr=0.01") != std::string::npos);
  const auto out2 = fresh_dir("run1_lr");
  auto r2 = run("train --stage 1 --lr 0.5 --data " + shared_data().string() +
                " --steps 2 --seed 3 --out " + out2.string());
  CHECK(r2.code == 0);
  CHECK(r2.out.find("sgd lr=0.5") != std::string::npos);
}

TEST_CASE("config-file values apply but flags override them") {
  const auto dir = fresh_dir("cfg");
  const fs::path cfg = dir / "train.ini";
  {
    std::ofstream f(cfg);
    f << "[train]\nsteps=2\nseed=9\nlr=0.25\n";
  }
  const auto out = fresh_dir("run_cfg");
  auto r = run("--config " + cfg.string() + " train --stage 1 --data " + shared_data().string() +
               " --lr 0.125 --out " + out.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("sgd lr=0.125") != std::string::npos);       // flag wins
  const std::string echo = file_bytes(out / "config.echo");
  CHECK(echo.find("steps=2") != std::string::npos);             // config file beat the preset
  CHECK(echo.find("seed=9") != std::string::npos);
}

TEST_CASE("stages 2 and 3 demand --init and a seeded run is reproducible") {
  CHECK(run("train --stage 3 --data " + shared_data().string() + " --steps 1 --out " +
            fresh_dir("noinit").string())
            .code == 2);

  const auto r1 = fresh_dir("chain1");
  CHECK(run("train --stage 1 --data " + shared_data().string() + " --steps 2 --seed 4 --out " +
            r1.string())
            .code == 0);
  const auto r3a = fresh_dir("chain3a");
  const auto r3b = fresh_dir("chain3b");
  const std::string stage3 = "train --stage 3 --init " + (r1 / "ckpt_final").string() +
                             " --data " + shared_data().string() + " --steps 2 --seed 4 --out ";
  CHECK(run(stage3 + r3a.string()).code == 0);
  CHECK(run(stage3 + r3b.string()).code == 0);
  CHECK(file_bytes(r3a / "ckpt_final") == file_bytes(r3b / "ckpt_final"));
  CHECK(file_bytes(r3a / "metrics.csv") == file_bytes(r3b / "metrics.csv"));
}

TEST_CASE("eval writes metrics.csv and missing checkpoints are usage errors") {
  const auto r1 = fresh_dir("eval_run");
  CHECK(run("train --stage 1 --data " + shared_data().string() + " --steps 2 --seed 6 --out " +
            r1.string())
            .code == 0);
  const auto ev = fresh_dir("eval_out");
  auto r = run("eval --ckpt " + (r1 / "ckpt_final").string() + " --data " +
               shared_data().string() + " --out " + ev.string());
  CHECK(r.code == 0);
  CHECK(fs::exists(ev / "metrics.csv"));
  CHECK(file_bytes(ev / "metrics.csv").find("mean_foreground_dice") != std::string::npos);
  CHECK(run("eval --ckpt /nonexistent.ckpt --data " + shared_data().string() + " --out " +
            fresh_dir("eval_bad").string())
            .code == 2);
}

TEST_CASE("ablate writes one table.csv row per matrix row; plot emits one SVG per series") {
  const auto dir = fresh_dir("abl");
  const fs::path matrix = dir / "matrix.json";
  {
    std::ofstream f(matrix);
    f << R"({"rows":[
      {"label":"full","curriculum":["seg","rep"],"skip_connections":true},
      {"label":"bare","curriculum":["rep"],"skip_connections":false}
    ]})";
  }
  const auto out = fresh_dir("abl_out");
  auto r = run("ablate --matrix " + matrix.string() + " --data " + shared_data().string() +
               " --test " + shared_data().string() + " --out " + out.string() +
               " --seg-steps 1 --cls-steps 1 --rep-steps 1");
  CHECK(r.code == 0);
  const std::string table = file_bytes(out / "table.csv");
  CHECK(table.rfind("label,f1,b_mean\n", 0) == 0);
  CHECK(std::count(table.begin(), table.end(), '\n') == 3);  // header + 2 rows

  const auto plots = fresh_dir("abl_plots");
  CHECK(run("plot --run " + out.string() + " --out " + plots.string()).code == 0);
  CHECK(fs::exists(plots / "table_f1.svg"));
  CHECK(fs::exists(plots / "table_b_mean.svg"));
  const std::string svg = file_bytes(plots / "table_f1.svg");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("polyline") != std::string::npos);
  // Plot on an empty directory is a usage error.
  CHECK(run("plot --run " + fresh_dir("empty_run").string() + " --out " +
            fresh_dir("empty_plots").string())
            .code == 2);
}
