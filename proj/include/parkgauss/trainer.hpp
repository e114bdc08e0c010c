#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "parkgauss/detector.hpp"
#include "parkgauss/ipm.hpp"
#include "parkgauss/losses.hpp"
#include "parkgauss/rasterizer.hpp"
#include "parkgauss/scene.hpp"
#include "parkgauss/slotweights.hpp"
#include "parkgauss/synthdata.hpp"

namespace parkgauss {

// Two-phase optimizer: photometric warm-up, then slot-aware refinement.
// One frame per step, Adam over all Gaussian parameter groups, exponential
// position-LR decay. Everything here is deterministic for a fixed seed and
// thread count; the loop itself is single-threaded and the kernels it calls
// parallelize internally.

// What feeds the slot-aware phase. "off" keeps the photometric loss alone;
// "direct-ipm-l1" replaces the weighted losses with an unweighted IPM/camera
// L1 (weights identically one, no detector in the loop); "feature-only"
// matches raw student/teacher confidence maps with an L2 instead of the
// weighted losses; "teacher-only"/"student-only" pin the weight mix to
// alpha = 1 / alpha = 0.
enum class SlotMode { kOff, kDirectIpmL1, kFeatureOnly, kTeacherOnly, kStudentOnly, kFull };

SlotMode parse_slot_mode(const std::string& name);  // UsageError on unknown names
const char* slot_mode_name(SlotMode mode);

struct TrainConfig {
  int total_iters = 30000;
  int phase1_iters = 20000;  // photometric-only prefix

  double lr_position = 1.6e-4;  // initial; decays to 1% over total_iters
  double lr_sh = 2.5e-3;
  double lr_opacity = 5e-2;
  double lr_scales = 5e-3;
  double lr_rotation = 1e-3;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-15;

  LossWeights loss;
  SlotMode slot_mode = SlotMode::kFull;
  double mix_alpha = 0.8;  // corner weight mix (teacher share)
  double mix_beta = 0.8;   // edge weight mix
  // Diagnostics only: lets adjoints flow through the student weight path.
  bool stop_gradient = true;

  DetectorConfig detector;
  ShapeParams shape;
  EdgeConfig edge;
  EdgeTubeParams edge_tube;
  double peak_threshold = 0.25;  // corner_peaks cut for the edge branch & eval
  double peak_nms_px = 8.0;
  MatchCriteria match;  // eval-time corner matching

  RenderConfig render;
  size_t n_gaussians = 4000;
  int sh_degree = 2;
  uint64_t seed = 1;

  int log_every = 10;
  int eval_every = 500;
  int checkpoint_every = 1000;

  void validate() const;  // UsageError on violated invariants
};

// lr_position * 0.01^(iter / total_iters): strictly decreasing, exactly 1%
// of the initial rate at the final iteration. Other groups stay constant.
double position_lr(const TrainConfig& cfg, int iter);

// First/second Adam moments, shapes mirroring the scene parameters.
struct AdamState {
  int64_t step = 0;
  SceneGrads m, v;

  void resize_like(const GaussianScene& s) {
    m.resize_like(s);
    v.resize_like(s);
  }
};

// One bias-corrected Adam update. Non-finite gradient entries are dropped.
// A group with zero learning rate is not written at all, and quaternions
// are renormalized only when the rotation group moved, so an all-zero-rate
// step leaves the scene bitwise unchanged.
void adam_step(GaussianScene& scene, AdamState& state, const SceneGrads& grads,
               const TrainConfig& cfg, int iter);

// Per-frame supervision derived from annotations and ground-truth images
// once, shared by every step that revisits the frame.
struct TeacherPack {
  CornerField field;                     // annotation-rasterized corner field
  WeightMap shape;                       // shaped teacher weights, cell grid
  WeightMap edge_bev;                    // teacher edge tubes, IPM resolution
  std::vector<CornerDetection> corners;  // deduplicated entrance corners
};

TeacherPack make_teacher_pack(const std::vector<SlotAnnotation>& annos, const Image& gt_ipm,
                              const TrainConfig& cfg);

struct FrameBatch {
  int frame_index = 0;
  std::vector<Image> gt;  // per camera, calibration order
  Image gt_ipm;           // warp of the ground-truth fisheyes
  Pose vehicle_from_world;
  const TeacherPack* teacher = nullptr;
};

// Everything the loop reuses across iterations. Holds a pointer into the
// dataset passed to prepare_training; keep that dataset alive.
struct TrainContext {
  const Dataset* data = nullptr;
  TrainConfig cfg;
  IpmGrid grid;
  std::vector<TeacherPack> teacher;  // indexed like data->frames
};

// Builds the IPM grid and teacher packs, touching every frame's images once
// so dataset/calibration mismatches surface before iteration 0.
TrainContext prepare_training(const Dataset& data, const TrainConfig& cfg);

FrameBatch load_frame_batch(const TrainContext& ctx, int frame_index);

struct StepStats {
  LossComponents parts;
  double total = 0;
  double lr_pos = 0;
  TrainPhase phase = TrainPhase::kPhotometric;
};

// Forward, full adjoint chain, Adam update, quaternion renorm. Throws
// NumericalError naming the loss component if anything turns non-finite.
StepStats train_step(const TrainContext& ctx, const FrameBatch& batch, GaussianScene& scene,
                     AdamState& opt, int iter);

// Corner-level precision/recall: detector peaks against annotation entrance
// corners (deduplicated across adjacent slots), matched like degenerate
// slots under the same criteria.
PrMetrics corner_pr(const std::vector<CornerDetection>& peaks,
                    const std::vector<SlotAnnotation>& gt, const MatchCriteria& criteria);

struct EvalStats {
  double psnr = 0, ssim = 0;        // mean over eval frames and cameras
  double precision = 0, recall = 0; // corner-level, micro-averaged over frames
  int frames = 0;
};

struct FrameEval {
  int frame = 0;
  double psnr = 0, ssim = 0;  // mean over the four cameras
  int tp = 0, fp = 0, fn = 0;
};

EvalStats evaluate(const TrainContext& ctx, const GaussianScene& scene,
                   std::vector<FrameEval>* per_frame = nullptr);

// Ground-plane points sampled through the IPM geometry (colors from the GT
// images) plus a band of box points for walls and ceiling.
GaussianScene init_scene_from_dataset(const Dataset& data, const IpmGrid& grid, size_t count,
                                      int sh_degree, uint64_t seed);

// Resumable state ("PGTS"): scene and moments at full precision plus the
// step counters, so a resumed run continues bitwise. The f32 checkpoint
// (save_checkpoint) stays the interchange artifact.
void save_train_state(const std::string& path, const GaussianScene& scene, const AdamState& opt,
                      int iter);
int load_train_state(const std::string& path, GaussianScene* scene, AdamState* opt);

struct TrainResult {
  GaussianScene scene;
  EvalStats final_eval;
  int start_iter = 0;  // nonzero when resumed
};

// Seeded per-epoch frame shuffle, eval/checkpoint cadences, JSON-lines
// metrics. out_dir may be empty (no artifacts); resume_state may name a
// PGTS file written by a previous run with the same config.
TrainResult run_training(const Dataset& data, const TrainConfig& cfg,
                         const std::string& out_dir = {}, std::ostream* metrics = nullptr,
                         const std::string& resume_state = {});

struct GradCheckEntry {
  std::string component;  // "rgb", "align", "ipm", "cam", "feature"
  std::string group;      // "mu", "quat", "log_scales", "logit_opacity", "sh"
  size_t index = 0;
  double analytic = 0, fd = 0, rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  GradCheckEntry worst;

  double worst_rel(const std::string& component) const;
};

// Central finite differences (h = 1e-4 for pose/shape parameters, 1e-3 for
// SH coefficients) against the analytic adjoints, probing the largest-
// gradient entries of each parameter group. The slot-aware weight map is
// frozen at the base scene — exactly what the stop-gradient makes the
// optimizer see. Probes whose two FD step sizes disagree straddle one of
// the rasterizer's hard blend cutoffs and are dropped; the rest are
// Richardson-extrapolated.
GradCheckReport grad_check(const TrainContext& ctx, const FrameBatch& batch,
                           const GaussianScene& scene,
                           const std::vector<std::string>& components, int probes_per_group = 4);

struct SgContractReport {
  double max_path_grad = 0;       // largest |d(L_ipm+L_cam)| through the weight path
  double sg_off_rel_error = 0;    // analytic (sg removed) vs live finite differences
  double sg_on_fd_gap = 0;        // largest |FD - analytic| left by honoring the sg
};

// The stop-gradient contract, measurably: with sg honored the weight path
// contributes exactly nothing to the analytic gradient (live FD disagrees by
// the path's worth); with sg removed the enlarged gradient matches live FD.
SgContractReport check_sg_contract(const TrainContext& ctx, const FrameBatch& batch,
                                   const GaussianScene& scene, int probes = 4);

}  // namespace parkgauss
