// parkgauss: surround-view gaussian splatting for parking scenes.
//
// Subcommands are thin facades over the library: synth (dataset generator),
// train, render, ipm (BEV warp), eval, gradcheck. Errors leave as one JSON
// line on stderr {code, message, context}; exit codes are 0 ok / 1 usage /
// 2 data / 3 numerical.

#include <CLI11.hpp>
#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "parkgauss/camera.hpp"
#include "parkgauss/common.hpp"
#include "parkgauss/config_io.hpp"
#include "parkgauss/image_io.hpp"
#include "parkgauss/ipm.hpp"
#include "parkgauss/losses.hpp"
#include "parkgauss/parallel.hpp"
#include "parkgauss/rasterizer.hpp"
#include "parkgauss/scene.hpp"
#include "parkgauss/synthdata.hpp"
#include "parkgauss/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace parkgauss;

namespace {

json version_block() {
  return {{"parkgauss", kVersion},
          {"cli11", CLI11_VERSION},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                        std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)}};
}

// Every artifact-producing subcommand stamps its output directory with the
// resolved configuration so runs stay attributable.
void write_manifest(const std::string& out_dir, const std::string& command, uint64_t seed,
                    const json& config, const json& extra = json::object()) {
  json m{{"tool", "parkgauss"},
         {"command", command},
         {"versions", version_block()},
         {"seed", seed},
         {"threads", thread_count()},
         {"config", config}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  if (config.is_object()) {
    const std::string dump = config.dump();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : dump) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    m["config_hash"] = buf;
  }
  std::ofstream f(fs::path(out_dir) / "manifest.json");
  if (!f) throw DataError("cannot write manifest", out_dir);
  f << m.dump(2) << "\n";
}

Pose frame_world_to_vehicle(const Dataset& data, int frame) {
  if (frame < 0 || static_cast<size_t>(frame) >= data.frames.size())
    throw UsageError("frame " + std::to_string(frame) + " out of range (dataset has " +
                     std::to_string(data.frames.size()) + " frames)");
  return world_to_vehicle(data.frames[frame].pose);
}

Pose world_to_camera(const FisheyeCamera& cam, const Pose& vehicle_from_world) {
  Pose r;
  r.q = (cam.pose.q * vehicle_from_world.q).normalized();
  r.t = cam.pose.q * vehicle_from_world.t + cam.pose.t;
  return r;
}

std::vector<Image> read_frame_images(const Dataset& data, int frame) {
  std::vector<Image> gt;
  gt.reserve(data.cameras.size());
  for (const std::string& path : data.frames[frame].image_paths) gt.push_back(read_png(path));
  return gt;
}

std::vector<Image> render_frame(const Dataset& data, const GaussianScene& scene,
                                const RenderConfig& rc, int frame) {
  const Pose v2w = frame_world_to_vehicle(data, frame);
  std::vector<Image> views;
  views.reserve(data.cameras.size());
  for (const FisheyeCamera& cam : data.cameras)
    views.push_back(rasterize(scene, cam.intr, world_to_camera(cam, v2w), rc, nullptr));
  return views;
}

// ---------------------------------------------------------------- synth

struct SynthOpts {
  std::string out;
  int frames = 64;
  int width = 320, height = 240;
  uint64_t seed = 7;
  double lighting = 1.0;
  int bev_size = 320;
  double bev_ppm = 20.0;
  int supersample = 2;
};

int run_synth(const SynthOpts& o) {
  ParkingLayout layout = default_layout();
  layout.lighting = o.lighting;
  GenerateOptions gen;
  gen.render.supersample = o.supersample;
  gen.ipm = IpmConfig{o.bev_size, o.bev_size, o.bev_ppm, IpmFusion::kNearest};
  fs::create_directories(o.out);
  generate_dataset(o.out, layout, default_trajectory(o.frames),
                   default_surround_rig(o.width, o.height), o.seed, gen);
  const json cfg{{"frames", o.frames},       {"width", o.width},
                 {"height", o.height},       {"lighting", o.lighting},
                 {"bev_size", o.bev_size},   {"bev_px_per_meter", o.bev_ppm},
                 {"supersample", o.supersample}};
  write_manifest(o.out, "synth", o.seed, cfg);
  std::cout << json{{"out", o.out}, {"frames", o.frames}}.dump() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainOpts {
  std::string data, out, config_file, resume;
  bool dump_config = false;
  // flag-provided overrides; presence tracked through the CLI11 options
  int iters = 0, phase1 = 0, gaussians = 0, sh_degree = 0;
  int log_every = 0, eval_every = 0, checkpoint_every = 0;
  uint64_t seed = 0;
  std::string slot_mode;
  CLI::Option *o_iters = nullptr, *o_phase1 = nullptr, *o_gaussians = nullptr,
              *o_sh_degree = nullptr, *o_seed = nullptr, *o_slot_mode = nullptr,
              *o_log_every = nullptr, *o_eval_every = nullptr, *o_checkpoint_every = nullptr;
};

TrainConfig resolve_config(const TrainOpts& o) {
  TrainConfig cfg;  // library defaults
  if (!o.config_file.empty()) apply_config_file(cfg, o.config_file);
  if (o.o_iters->count()) cfg.total_iters = o.iters;
  if (o.o_phase1->count()) cfg.phase1_iters = o.phase1;
  if (o.o_gaussians->count()) cfg.n_gaussians = static_cast<size_t>(o.gaussians);
  if (o.o_sh_degree->count()) cfg.sh_degree = o.sh_degree;
  if (o.o_seed->count()) cfg.seed = o.seed;
  if (o.o_slot_mode->count()) cfg.slot_mode = parse_slot_mode(o.slot_mode);
  if (o.o_log_every->count()) cfg.log_every = o.log_every;
  if (o.o_eval_every->count()) cfg.eval_every = o.eval_every;
  if (o.o_checkpoint_every->count()) cfg.checkpoint_every = o.checkpoint_every;
  cfg.validate();
  return cfg;
}

int run_train(const TrainOpts& o) {
  const TrainConfig cfg = resolve_config(o);
  if (o.dump_config) {
    std::cout << config_to_json(cfg).dump(2) << "\n";
    return kExitOk;
  }
  if (o.data.empty()) throw UsageError("train: --data is required");
  if (o.out.empty()) throw UsageError("train: --out is required");

  const Dataset data = load_dataset(o.data);
  fs::create_directories(o.out);
  write_manifest(o.out, "train", cfg.seed, config_to_json(cfg),
                 {{"data", o.data}, {"resume", o.resume}});
  std::ofstream metrics(fs::path(o.out) / "metrics.jsonl");
  if (!metrics) throw DataError("cannot write metrics log", o.out);

  const TrainResult r = run_training(data, cfg, o.out, &metrics, o.resume);
  std::cout << json{{"psnr", r.final_eval.psnr},
                    {"ssim", r.final_eval.ssim},
                    {"precision", r.final_eval.precision},
                    {"recall", r.final_eval.recall},
                    {"eval_frames", r.final_eval.frames},
                    {"start_iter", r.start_iter},
                    {"out", o.out}}
                   .dump()
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- render

struct RenderOpts {
  std::string scene, data, out, config_file;
  int frame = 0;
  bool raw = false;
};

int run_render(const RenderOpts& o) {
  TrainConfig cfg;
  if (!o.config_file.empty()) apply_config_file(cfg, o.config_file);
  const Dataset data = load_dataset(o.data);
  const GaussianScene scene = load_checkpoint(o.scene);
  const std::vector<Image> views = render_frame(data, scene, cfg.render, o.frame);
  fs::create_directories(o.out);
  json files = json::array();
  for (size_t c = 0; c < data.cameras.size(); ++c) {
    const std::string base = data.cameras[c].name;
    write_png((fs::path(o.out) / (base + ".png")).string(), views[c]);
    files.push_back(base + ".png");
    if (o.raw) {
      write_pgim((fs::path(o.out) / (base + ".pgim")).string(), views[c]);
      files.push_back(base + ".pgim");
    }
  }
  write_manifest(o.out, "render", cfg.seed, config_to_json(cfg),
                 {{"data", o.data}, {"scene", o.scene}, {"frame", o.frame}, {"files", files}});
  std::cout << json{{"out", o.out}, {"frame", o.frame}, {"files", files}}.dump() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- ipm

struct IpmOpts {
  std::string data, out, scene, config_file;
  int frame = 0;
  bool raw = false;
};

int run_ipm(const IpmOpts& o) {
  TrainConfig cfg;
  if (!o.config_file.empty()) apply_config_file(cfg, o.config_file);
  const Dataset data = load_dataset(o.data);
  frame_world_to_vehicle(data, o.frame);  // range check before any work
  const IpmGrid grid = build_ipm_grid(data.cameras, data.ipm);

  std::vector<Image> views;
  if (o.scene.empty()) {
    views = read_frame_images(data, o.frame);
  } else {
    const GaussianScene scene = load_checkpoint(o.scene);
    views = render_frame(data, scene, cfg.render, o.frame);
  }
  const Image bev = warp_ipm(grid, views);

  fs::create_directories(o.out);
  write_png((fs::path(o.out) / "bev.png").string(), bev);
  if (o.raw) write_pgim((fs::path(o.out) / "bev.pgim").string(), bev);
  write_manifest(o.out, "ipm", cfg.seed, config_to_json(cfg),
                 {{"data", o.data},
                  {"scene", o.scene},
                  {"frame", o.frame},
                  {"source", o.scene.empty() ? "ground-truth" : "rendered"}});
  std::cout << json{{"out", o.out},
                    {"bev_width", bev.width()},
                    {"bev_height", bev.height()}}
                   .dump()
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalOpts {
  std::string pred, gt, data, scene, config_file, out;
};

void write_report(const std::string& out_dir, const json& report, const std::string& csv) {
  if (out_dir.empty()) return;
  fs::create_directories(out_dir);
  std::ofstream jf(fs::path(out_dir) / "report.json");
  jf << report.dump(2) << "\n";
  std::ofstream cf(fs::path(out_dir) / "report.csv");
  cf << csv;
}

int run_eval_pair(const EvalOpts& o) {
  std::vector<std::pair<std::string, std::string>> pairs;
  if (fs::is_directory(o.pred) != fs::is_directory(o.gt))
    throw UsageError("eval: --pred and --gt must both be files or both be directories");
  if (fs::is_directory(o.pred)) {
    for (const auto& e : fs::directory_iterator(o.pred)) {
      if (e.path().extension() != ".png") continue;
      const fs::path gt_path = fs::path(o.gt) / e.path().filename();
      if (!fs::exists(gt_path))
        throw DataError("no ground-truth counterpart for " + e.path().filename().string(),
                        o.gt);
      pairs.emplace_back(e.path().string(), gt_path.string());
    }
    std::sort(pairs.begin(), pairs.end());
    if (pairs.empty()) throw DataError("no PNG files to compare", o.pred);
  } else {
    pairs.emplace_back(o.pred, o.gt);
  }

  json rows = json::array();
  std::string csv = "name,psnr,ssim\n";
  double psnr_sum = 0, ssim_sum = 0;
  for (const auto& [p, g] : pairs) {
    const Image a = read_png(p), b = read_png(g);
    const double ps = psnr(a, b), ss = ssim(a, b);
    psnr_sum += ps;
    ssim_sum += ss;
    const std::string name = fs::path(p).filename().string();
    rows.push_back({{"name", name}, {"psnr", ps}, {"ssim", ss}});
    csv += name + "," + std::to_string(ps) + "," + std::to_string(ss) + "\n";
  }
  const json report{{"psnr", psnr_sum / pairs.size()},
                    {"ssim", ssim_sum / pairs.size()},
                    {"per_frame", rows}};
  write_report(o.out, report, csv);
  std::cout << report.dump() << "\n";
  return kExitOk;
}

int run_eval_dataset(const EvalOpts& o) {
  TrainConfig cfg;
  if (!o.config_file.empty()) apply_config_file(cfg, o.config_file);
  const Dataset data = load_dataset(o.data);
  const int cells = (data.ipm.bev_height / cfg.detector.stride) *
                    (data.ipm.bev_width / cfg.detector.stride);
  cfg.loss.topk_k = std::min(cfg.loss.topk_k, cells);
  const GaussianScene scene = load_checkpoint(o.scene);
  const TrainContext ctx = prepare_training(data, cfg);

  std::vector<FrameEval> rows;
  const EvalStats e = evaluate(ctx, scene, &rows);
  json per_frame = json::array();
  std::string csv = "frame,psnr,ssim,tp,fp,fn\n";
  for (const FrameEval& r : rows) {
    per_frame.push_back({{"frame", r.frame},
                         {"psnr", r.psnr},
                         {"ssim", r.ssim},
                         {"tp", r.tp},
                         {"fp", r.fp},
                         {"fn", r.fn}});
    csv += std::to_string(r.frame) + "," + std::to_string(r.psnr) + "," +
           std::to_string(r.ssim) + "," + std::to_string(r.tp) + "," + std::to_string(r.fp) +
           "," + std::to_string(r.fn) + "\n";
  }
  const json report{{"psnr", e.psnr},
                    {"ssim", e.ssim},
                    {"precision", e.precision},
                    {"recall", e.recall},
                    {"per_frame", per_frame}};
  write_report(o.out, report, csv);
  if (!o.out.empty())
    write_manifest(o.out, "eval", cfg.seed, config_to_json(cfg),
                   {{"data", o.data}, {"scene", o.scene}});
  std::cout << report.dump() << "\n";
  return kExitOk;
}

int run_eval(const EvalOpts& o) {
  const bool pair_mode = !o.pred.empty() || !o.gt.empty();
  if (pair_mode) {
    if (o.pred.empty() || o.gt.empty())
      throw UsageError("eval: --pred and --gt go together");
    if (!o.data.empty() || !o.scene.empty())
      throw UsageError("eval: use either --pred/--gt or --data/--scene, not both");
    return run_eval_pair(o);
  }
  if (o.data.empty() || o.scene.empty())
    throw UsageError("eval: needs --pred/--gt (image mode) or --data/--scene (dataset mode)");
  return run_eval_dataset(o);
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckOpts {
  std::string data, out, components = "rgb,align,ipm,cam,feature";
  uint64_t seed = 7;
  int gaussians = 40;
  int probes = 4;
  double tol = 1e-3;
  double tol_align = 5e-3;  // detector chain is longer; see acceptance bounds
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> parts;
  size_t start = 0;
  while (start <= s.size()) {
    const size_t comma = s.find(',', start);
    const std::string part = s.substr(start, comma == std::string::npos ? comma : comma - start);
    if (!part.empty()) parts.push_back(part);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return parts;
}

int run_gradcheck(const GradcheckOpts& o) {
  std::string data_dir = o.data;
  if (data_dir.empty()) {
    // self-contained mode: a tiny deterministic dataset under tmp
    data_dir = (fs::temp_directory_path() /
                ("parkgauss_gradcheck_" + std::to_string(o.seed)))
                   .string();
    fs::remove_all(data_dir);
    GenerateOptions gen;
    gen.ipm = IpmConfig{64, 64, 4.0, IpmFusion::kNearest};
    generate_dataset(data_dir, default_layout(), default_trajectory(12),
                     default_surround_rig(64, 48), o.seed, gen);
  }
  const Dataset data = load_dataset(data_dir);

  TrainConfig cfg;
  cfg.n_gaussians = static_cast<size_t>(o.gaussians);
  cfg.seed = o.seed;
  const int cells = (data.ipm.bev_height / cfg.detector.stride) *
                    (data.ipm.bev_width / cfg.detector.stride);
  cfg.loss.topk_k = std::min(cfg.loss.topk_k, cells);
  const TrainContext ctx = prepare_training(data, cfg);
  const GaussianScene scene =
      init_scene_from_dataset(data, ctx.grid, cfg.n_gaussians, cfg.sh_degree, cfg.seed);
  const FrameBatch batch = load_frame_batch(ctx, data.frames.size() > 1 ? 1 : 0);

  const std::vector<std::string> components = split_csv(o.components);
  if (components.empty()) throw UsageError("gradcheck: empty component list");
  const GradCheckReport report = grad_check(ctx, batch, scene, components, o.probes);

  std::printf("%-9s %-14s %6s  %13s %13s %10s\n", "component", "group", "index", "analytic",
              "fd", "rel");
  for (const GradCheckEntry& e : report.entries)
    std::printf("%-9s %-14s %6zu  %+13.6e %+13.6e %10.3e\n", e.component.c_str(),
                e.group.c_str(), e.index, e.analytic, e.fd, e.rel_error);

  bool ok = true;
  json worst = json::object();
  for (const std::string& comp : components) {
    const double tol = comp == "align" ? o.tol_align : o.tol;
    const double w = report.worst_rel(comp);
    worst[comp] = w;
    const bool pass = w <= tol;
    ok = ok && pass;
    std::printf("%s: worst %.3e (tol %.0e)  %s\n", comp.c_str(), w, tol,
                pass ? "PASS" : "FAIL");
  }

  if (!o.out.empty()) {
    fs::create_directories(o.out);
    json entries = json::array();
    for (const GradCheckEntry& e : report.entries)
      entries.push_back({{"component", e.component},
                         {"group", e.group},
                         {"index", e.index},
                         {"analytic", e.analytic},
                         {"fd", e.fd},
                         {"rel_error", e.rel_error}});
    std::ofstream f(fs::path(o.out) / "gradcheck.json");
    f << json{{"entries", entries}, {"worst", worst}, {"pass", ok}}.dump(2) << "\n";
    write_manifest(o.out, "gradcheck", o.seed, config_to_json(cfg), {{"data", data_dir}});
  }
  if (!ok) throw NumericalError("gradient check failed tolerance", "gradcheck");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"surround-view gaussian splatting toolkit for parking scenes"};
  app.require_subcommand(1);
  app.fallthrough();  // --threads may follow the subcommand
  int threads = 0;
  app.add_option("--threads", threads,
                 "worker threads for all kernels (default: all logical cores)");

  SynthOpts so;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic parking dataset");
  synth->add_option("--out", so.out, "output dataset directory")->required();
  synth->add_option("--frames", so.frames, "trajectory length");
  synth->add_option("--width", so.width, "fisheye image width");
  synth->add_option("--height", so.height, "fisheye image height");
  synth->add_option("--seed", so.seed, "generator seed");
  synth->add_option("--lighting", so.lighting, "global illumination multiplier");
  synth->add_option("--bev-size", so.bev_size, "BEV raster side, pixels");
  synth->add_option("--bev-ppm", so.bev_ppm, "BEV pixels per meter");
  synth->add_option("--supersample", so.supersample, "subsamples per pixel axis");

  TrainOpts to;
  CLI::App* train = app.add_subcommand("train", "optimize a gaussian scene on a dataset");
  train->add_option("--data", to.data, "dataset directory");
  train->add_option("--out", to.out, "output directory");
  train->add_option("--config", to.config_file, "JSON config file");
  train->add_option("--resume", to.resume, "train-state (.pgts) to resume from");
  to.o_iters = train->add_option("--iters", to.iters, "total iterations");
  to.o_phase1 = train->add_option("--phase1", to.phase1, "photometric-only iterations");
  to.o_gaussians = train->add_option("--gaussians", to.gaussians, "gaussian count");
  to.o_sh_degree = train->add_option("--sh-degree", to.sh_degree, "SH degree");
  to.o_seed = train->add_option("--seed", to.seed, "training seed");
  to.o_slot_mode = train->add_option(
      "--slot-mode", to.slot_mode,
      "off | direct-ipm-l1 | feature-only | teacher-only | student-only | full");
  to.o_log_every = train->add_option("--log-every", to.log_every, "metrics cadence");
  to.o_eval_every = train->add_option("--eval-every", to.eval_every, "eval cadence");
  to.o_checkpoint_every =
      train->add_option("--checkpoint-every", to.checkpoint_every, "checkpoint cadence");
  train->add_flag("--dump-config", to.dump_config,
                  "print the effective config as JSON and exit");

  RenderOpts ro;
  CLI::App* render = app.add_subcommand("render", "render a checkpoint at a dataset pose");
  render->add_option("--scene", ro.scene, "scene checkpoint (.pgsc)")->required();
  render->add_option("--data", ro.data, "dataset directory")->required();
  render->add_option("--out", ro.out, "output directory")->required();
  render->add_option("--frame", ro.frame, "frame index");
  render->add_flag("--raw", ro.raw, "also write raw f32 images (.pgim)");
  render->add_option("--config", ro.config_file, "JSON config (render block)");

  IpmOpts io;
  CLI::App* ipm = app.add_subcommand("ipm", "warp a frame into the BEV raster");
  ipm->add_option("--data", io.data, "dataset directory")->required();
  ipm->add_option("--out", io.out, "output directory")->required();
  ipm->add_option("--frame", io.frame, "frame index");
  ipm->add_option("--scene", io.scene, "warp renders of this checkpoint instead of GT images");
  ipm->add_flag("--raw", io.raw, "also write raw f32 BEV (.pgim)");
  ipm->add_option("--config", io.config_file, "JSON config (render block)");

  EvalOpts eo;
  CLI::App* eval = app.add_subcommand("eval", "image metrics and slot detection quality");
  eval->add_option("--pred", eo.pred, "predicted image file or directory");
  eval->add_option("--gt", eo.gt, "ground-truth image file or directory");
  eval->add_option("--data", eo.data, "dataset directory (dataset mode)");
  eval->add_option("--scene", eo.scene, "scene checkpoint (dataset mode)");
  eval->add_option("--config", eo.config_file, "JSON config file");
  eval->add_option("--out", eo.out, "write report.json / report.csv here");

  GradcheckOpts go;
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "analytic adjoints vs finite differences");
  gradcheck->add_option("--seed", go.seed, "scene/dataset seed");
  gradcheck->add_option("--gaussians", go.gaussians, "scene size (desk-scale limit 50)");
  gradcheck->add_option("--components", go.components, "comma list of loss components");
  gradcheck->add_option("--probes", go.probes, "probes per parameter group");
  gradcheck->add_option("--tol", go.tol, "relative-error tolerance");
  gradcheck->add_option("--tol-align", go.tol_align, "tolerance for the align chain");
  gradcheck->add_option("--data", go.data, "existing tiny dataset (default: generate one)");
  gradcheck->add_option("--out", go.out, "write gradcheck.json here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    if (rc == 0) return kExitOk;  // --help and friends
    std::cerr << json{{"code", kExitUsage},
                      {"message", e.what()},
                      {"context", "command line"}}
                     .dump()
              << "\n";
    return kExitUsage;
  }

  try {
    set_thread_count(threads);
    if (synth->parsed()) return run_synth(so);
    if (train->parsed()) return run_train(to);
    if (render->parsed()) return run_render(ro);
    if (ipm->parsed()) return run_ipm(io);
    if (eval->parsed()) return run_eval(eo);
    if (gradcheck->parsed()) return run_gradcheck(go);
    throw UsageError("no subcommand given");
  } catch (const Error& e) {
    std::cerr << json{{"code", e.code()}, {"message", e.what()}, {"context", e.context()}}.dump()
              << "\n";
    return e.code();
  } catch (const std::exception& e) {
    std::cerr << json{{"code", kExitData}, {"message", e.what()}, {"context", "unexpected"}}.dump()
              << "\n";
    return kExitData;
  }
}
