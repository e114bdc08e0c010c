// End-to-end checks of the parkgauss binary: exit codes, the single-line
// JSON error contract, artifact layout, and the config round trip. The
// binary path comes from the build system (PARKGAUSS_BIN).

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

RunResult run(const std::string& args) {
  static int counter = 0;
  const fs::path dir = fs::temp_directory_path() / "parkgauss_cli_io";
  fs::create_directories(dir);
  const fs::path out = dir / ("out" + std::to_string(counter));
  const fs::path err = dir / ("err" + std::to_string(counter));
  ++counter;
  const std::string cmd = std::string(PARKGAUSS_BIN) + " " + args + " >" + out.string() +
                          " 2>" + err.string();
  const int rc = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// the error contract: last stderr line is one JSON object
json last_error_line(const std::string& err) {
  std::string line, last;
  std::stringstream ss(err);
  while (std::getline(ss, line))
    if (!line.empty()) last = line;
  return json::parse(last);
}

// one tiny dataset shared by the expensive cases
const std::string& tiny_data() {
  static std::string dir = [] {
    const fs::path d = fs::temp_directory_path() / "parkgauss_cli_data";
    fs::remove_all(d);
    RunResult r = run("synth --out " + d.string() +
                      " --frames 12 --width 64 --height 48 --bev-size 64 --bev-ppm 4 --seed 9");
    REQUIRE(r.code == 0);
    return d.string();
  }();
  return dir;
}

// the 64x64 BEV has 256 detector cells; the default top-K (512) is too big
const std::string& tiny_cfg() {
  static std::string path = [] {
    const fs::path p = fs::temp_directory_path() / "parkgauss_cli_data_cfg.json";
    std::ofstream f(p);
    f << R"({"loss": {"topk_k": 64}})";
    return p.string();
  }();
  return path;
}

}  // namespace

TEST_CASE("help exits zero, unknown flags exit one with a JSON error line") {
  CHECK(run("--help").code == 0);
  CHECK(run("train --help").code == 0);

  RunResult bad = run("--frobnicate");
  CHECK(bad.code == 1);
  const json e = last_error_line(bad.err);
  CHECK(e["code"] == 1);
  CHECK(e.contains("message"));
  CHECK(e.contains("context"));

  CHECK(run("").code == 1);                 // missing subcommand
  CHECK(run("synth").code == 1);            // missing required --out
}

TEST_CASE("synth writes the documented dataset layout") {
  const fs::path d = tiny_data();
  CHECK(fs::exists(d / "calib.json"));
  CHECK(fs::exists(d / "trajectory.json"));
  CHECK(fs::exists(d / "slots.json"));
  CHECK(fs::exists(d / "front" / "000000.png"));
  CHECK(fs::exists(d / "manifest.json"));
  const json m = json::parse(slurp(d / "manifest.json"));
  CHECK(m["command"] == "synth");
  CHECK(m["seed"] == 9);
  CHECK(m["versions"].contains("parkgauss"));
  CHECK(m.contains("config_hash"));
}

TEST_CASE("train produces metrics, checkpoints, manifest; bad inputs exit 2") {
  const fs::path out = fs::temp_directory_path() / "parkgauss_cli_train";
  fs::remove_all(out);
  RunResult r = run("train --data " + tiny_data() + " --config " + tiny_cfg() + " --out " +
                    out.string() +
                    " --iters 2 --phase1 1 --gaussians 25 --seed 5 --eval-every 100"
                    " --checkpoint-every 100 --log-every 1 --threads 2");
  CHECK(r.code == 0);
  CHECK(fs::exists(out / "metrics.jsonl"));
  CHECK(fs::exists(out / "scene_final.pgsc"));
  CHECK(fs::exists(out / "train_state.pgts"));
  CHECK(fs::exists(out / "manifest.json"));
  const json summary = json::parse(r.out);
  CHECK(summary.contains("psnr"));
  CHECK(summary["start_iter"] == 0);
  const json m = json::parse(slurp(out / "manifest.json"));
  CHECK(m["config"]["total_iters"] == 2);
  CHECK(m["config"]["n_gaussians"] == 25);

  RunResult missing =
      run("train --data /nonexistent --out " + out.string() + " --iters 1 --phase1 0");
  CHECK(missing.code == 2);
  CHECK(last_error_line(missing.err)["code"] == 2);

  RunResult usage = run("train --iters 1 --phase1 0");  // no --data
  CHECK(usage.code == 1);
}

TEST_CASE("dump-config round-trips through --config") {
  const fs::path dir = fs::temp_directory_path() / "parkgauss_cli_cfg";
  fs::create_directories(dir);
  RunResult a =
      run("train --dump-config --iters 321 --phase1 100 --slot-mode teacher-only --seed 11");
  REQUIRE(a.code == 0);
  const json cfg = json::parse(a.out);
  CHECK(cfg["total_iters"] == 321);
  CHECK(cfg["phase1_iters"] == 100);
  CHECK(cfg["slot_mode"] == "teacher-only");

  // flags alone that violate an invariant fail loudly, naming it
  RunResult invalid = run("train --dump-config --iters 321");
  CHECK(invalid.code == 1);
  CHECK(std::string(last_error_line(invalid.err)["message"]).find("phase1_iters") !=
        std::string::npos);

  {
    std::ofstream f(dir / "cfg.json");
    f << a.out;
  }
  RunResult b = run("train --dump-config --config " + (dir / "cfg.json").string());
  REQUIRE(b.code == 0);
  CHECK(b.out == a.out);  // reload reproduces the effective config exactly

  {
    std::ofstream f(dir / "junk.json");
    f << R"({"total_iterz": 3})";
  }
  RunResult bad = run("train --dump-config --config " + (dir / "junk.json").string());
  CHECK(bad.code == 1);
  const json e = last_error_line(bad.err);
  CHECK(e["code"] == 1);
  CHECK(std::string(e["message"]).find("total_iterz") != std::string::npos);
}

TEST_CASE("render and ipm write images; eval on identical inputs reports psnr 100") {
  const fs::path base = fs::temp_directory_path() / "parkgauss_cli_art";
  fs::remove_all(base);
  const fs::path train_out = base / "train";
  REQUIRE(run("train --data " + tiny_data() + " --config " + tiny_cfg() + " --out " +
              train_out.string() +
              " --iters 1 --phase1 1 --gaussians 20 --eval-every 10 --checkpoint-every 10")
              .code == 0);
  const std::string scene = (train_out / "scene_final.pgsc").string();

  const fs::path render_out = base / "render";
  RunResult rr = run("render --scene " + scene + " --data " + tiny_data() + " --out " +
                     render_out.string() + " --frame 1 --raw");
  CHECK(rr.code == 0);
  CHECK(fs::exists(render_out / "front.png"));
  CHECK(fs::exists(render_out / "front.pgim"));
  CHECK(fs::exists(render_out / "manifest.json"));

  const fs::path ipm_out = base / "ipm";
  RunResult ri = run("ipm --data " + tiny_data() + " --out " + ipm_out.string() + " --frame 1");
  CHECK(ri.code == 0);
  CHECK(fs::exists(ipm_out / "bev.png"));

  RunResult oob = run("ipm --data " + tiny_data() + " --out " + ipm_out.string() +
                      " --frame 9999");
  CHECK(oob.code == 1);

  const std::string img = (render_out / "front.png").string();
  RunResult ev = run("eval --pred " + img + " --gt " + img);
  CHECK(ev.code == 0);
  const json rep = json::parse(ev.out);
  CHECK(rep["psnr"] == 100.0);
  CHECK(rep["ssim"] == 1.0);

  const fs::path eval_out = base / "eval";
  RunResult ed = run("eval --data " + tiny_data() + " --scene " + scene + " --out " +
                     eval_out.string());
  CHECK(ed.code == 0);
  const json drep = json::parse(ed.out);
  CHECK(drep.contains("precision"));
  CHECK(drep["per_frame"].is_array());
  CHECK(fs::exists(eval_out / "report.json"));
  CHECK(fs::exists(eval_out / "report.csv"));

  RunResult conflict = run("eval --pred " + img + " --gt " + img + " --data " + tiny_data());
  CHECK(conflict.code == 1);
}

TEST_CASE("gradcheck passes on its self-generated scene") {
  RunResult r = run("gradcheck --seed 7 --gaussians 25 --components rgb,ipm --data " +
                    tiny_data());
  CHECK(r.code == 0);
  CHECK(r.out.find("PASS") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);

  RunResult oversize = run("gradcheck --gaussians 500 --data " + tiny_data());
  CHECK(oversize.code == 1);  // desk-scale guard is a usage error
}
