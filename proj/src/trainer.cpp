#include "parkgauss/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <ostream>

#include "parkgauss/image_io.hpp"
#include "parkgauss/parallel.hpp"
#include "parkgauss/prng.hpp"

namespace parkgauss {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

Pose compose(const Pose& outer, const Pose& inner) {
  Pose p;
  p.q = outer.q * inner.q;
  p.t = outer.q * inner.t + outer.t;
  return p;
}

Pose world_to_camera(const FisheyeCamera& cam, const FrameBatch& batch) {
  return compose(cam.pose, batch.vehicle_from_world);
}

void axpy(Image& dst, const Image& src, double a) {
  if (!dst.same_shape(src)) throw UsageError("axpy: shape mismatch");
  double* d = dst.data();
  const double* s = src.data();
  const size_t n = dst.size();
  for (size_t i = 0; i < n; ++i) d[i] += a * s[i];
}

// Vertical concatenation, plane by plane. Lets the camera-domain weighted
// loss normalize jointly over all views with the single-image kernel.
Image stack_rows(const std::vector<Image>& imgs) {
  const int w = imgs[0].width(), c = imgs[0].channels();
  int h = 0;
  for (const Image& img : imgs) {
    if (img.width() != w || img.channels() != c)
      throw DataError("stacked camera loss needs all views at one resolution");
    h += img.height();
  }
  Image out(h, w, c);
  for (int ch = 0; ch < c; ++ch) {
    size_t row0 = 0;
    for (const Image& img : imgs) {
      std::memcpy(out.plane(ch) + row0 * w, img.plane(ch), img.plane_size() * sizeof(double));
      row0 += img.height();
    }
  }
  return out;
}

std::vector<Image> split_rows(const Image& stacked, const std::vector<Image>& like) {
  std::vector<Image> out;
  out.reserve(like.size());
  size_t row0 = 0;
  for (const Image& ref : like) {
    Image piece(ref.height(), ref.width(), stacked.channels());
    for (int ch = 0; ch < stacked.channels(); ++ch)
      std::memcpy(piece.plane(ch), stacked.plane(ch) + row0 * stacked.width(),
                  piece.plane_size() * sizeof(double));
    out.push_back(std::move(piece));
    row0 += ref.height();
  }
  return out;
}

void require_finite(double v, const char* component, int iter) {
  if (std::isfinite(v)) return;
  std::string where = iter >= 0 ? "iteration " + std::to_string(iter) : "gradient check";
  throw NumericalError(std::string("non-finite ") + component + " at " + where, "trainer");
}

// Multipliers applied to each component's adjoint seed; zero skips the
// component's backward contribution entirely.
struct LossSeeds {
  double rgb = 0, align = 0, ipm = 0, cam = 0, feature = 0;
};

struct PipelineProducts {
  LossComponents parts;
  ProjectedWeights weights;
  bool have_weights = false;
};

bool mode_uses_detector(SlotMode m) {
  return m == SlotMode::kFeatureOnly || m == SlotMode::kTeacherOnly ||
         m == SlotMode::kStudentOnly || m == SlotMode::kFull;
}

bool mode_uses_weights(SlotMode m) {
  return m == SlotMode::kDirectIpmL1 || m == SlotMode::kTeacherOnly ||
         m == SlotMode::kStudentOnly || m == SlotMode::kFull;
}

// One frame's losses, and — when `grads` is given — the complete adjoint
// chain from the scalars back into the Gaussian parameters. `frozen`
// substitutes an externally fixed slot-weight map (the optimizer's view of
// the weights under the stop-gradient, used by the FD harness).
PipelineProducts run_pipeline(const std::vector<FisheyeCamera>& cams, const IpmGrid& grid,
                              const TrainConfig& cfg, const FrameBatch& batch,
                              const GaussianScene& scene, TrainPhase phase,
                              const LossSeeds& seeds, SceneGrads* grads,
                              const ProjectedWeights* frozen, int iter) {
  const int n_cams = static_cast<int>(cams.size());
  if (static_cast<int>(batch.gt.size()) != n_cams)
    throw DataError("frame batch image count does not match the camera set");

  PipelineProducts out;
  std::vector<Image> renders(n_cams);
  std::vector<RenderCache> caches(grads ? n_cams : 0);
  for (int c = 0; c < n_cams; ++c)
    renders[c] = rasterize(scene, cams[c].intr, world_to_camera(cams[c], batch), cfg.render,
                           grads ? &caches[c] : nullptr);

  std::vector<ScalarLoss> rgb(n_cams);
  double rgb_sum = 0;
  for (int c = 0; c < n_cams; ++c) {
    rgb[c] = l_rgb(renders[c], batch.gt[c], cfg.loss.lambda_dssim);
    rgb_sum += rgb[c].value;
  }
  out.parts.l_rgb = rgb_sum / n_cams;
  require_finite(out.parts.l_rgb, "L_rgb", iter);

  const SlotMode mode = cfg.slot_mode;
  const bool slot_phase = phase == TrainPhase::kSlotAware && mode != SlotMode::kOff;
  const bool use_edges = cfg.loss.lambda_edge > 0.0;

  Image bev;
  CornerField student;
  WeightMap student_shape;
  AlignLoss align;
  bool have_align = false;
  WeightedL1 ipm_l1, cam_l1;
  bool have_weighted = false;
  Image cam_pred_stack, cam_gt_stack;
  std::vector<double> d_feature_conf;
  const TeacherPack* teacher = batch.teacher;
  const bool want_wgrad = grads && !cfg.stop_gradient && mode_uses_weights(mode) &&
                          mode != SlotMode::kDirectIpmL1;
  double alpha_eff = cfg.mix_alpha, beta_eff = cfg.mix_beta;
  if (mode == SlotMode::kTeacherOnly) alpha_eff = beta_eff = 1.0;
  if (mode == SlotMode::kStudentOnly) alpha_eff = beta_eff = 0.0;

  if (slot_phase) {
    if (!teacher && mode != SlotMode::kDirectIpmL1)
      throw UsageError("slot-aware step needs a teacher pack for the frame");
    bev = warp_ipm(grid, renders);

    if (mode_uses_detector(mode)) {
      student = analytic_corner_detector(bev, cfg.detector);
      student_shape = shape_weights(student, cfg.shape);
    }

    if (mode == SlotMode::kFeatureOnly) {
      // Raw confidence-map L2 in place of the weighted losses.
      const size_t n = student.cell_count();
      if (teacher->field.cell_count() != n)
        throw DataError("teacher and student corner fields disagree in shape");
      double acc = 0;
      d_feature_conf.assign(n, 0.0);
      for (size_t i = 0; i < n; ++i) {
        const double d = student.confidence[i] - teacher->field.confidence[i];
        acc += d * d;
        d_feature_conf[i] = 2.0 * d / static_cast<double>(n);
      }
      out.parts.l_ipm = acc / static_cast<double>(n);
      require_finite(out.parts.l_ipm, "L_feature", iter);
    } else {
      if (mode == SlotMode::kTeacherOnly || mode == SlotMode::kStudentOnly ||
          mode == SlotMode::kFull) {
        align = l_align(student_shape, teacher->shape, cfg.loss.topk_k, cfg.loss.reverse_kl);
        out.parts.l_align = align.value;
        require_finite(out.parts.l_align, "L_align", iter);
        have_align = true;
      }

      if (frozen) {
        out.weights = *frozen;
      } else if (mode == SlotMode::kDirectIpmL1) {
        out.weights.bev = Image(bev.height(), bev.width(), 1, 1.0);
      } else {
        WeightMap mix_cells = mix_corner(teacher->shape, student_shape, alpha_eff,
                                         cfg.stop_gradient);
        Image mix_up = upsample_field(mix_cells.values, cfg.detector.stride, bev.height(),
                                      bev.width());
        WeightMap wprime{std::move(mix_up), mix_cells.gradient_allowed};
        if (use_edges) {
          auto peaks = corner_peaks(student, cfg.peak_threshold, cfg.peak_nms_px);
          EdgeScores es = edge_scores(peaks, bev, cfg.edge);
          WeightMap edge_student = rasterize_edges(es, bev.height(), bev.width(), cfg.edge_tube);
          WeightMap edge_mixed =
              mix_edge(teacher->edge_bev, edge_student, beta_eff, cfg.stop_gradient);
          wprime = combine(wprime, edge_mixed, cfg.loss.lambda_edge);
        }
        out.weights = upsample_and_backproject(wprime, cfg.detector.stride, grid);
      }
      out.have_weights = true;

      ipm_l1 = weighted_l1(bev, batch.gt_ipm, out.weights.bev, want_wgrad);
      out.parts.l_ipm = ipm_l1.value;
      require_finite(out.parts.l_ipm, "L_ipm", iter);

      if (mode != SlotMode::kDirectIpmL1) {
        cam_pred_stack = stack_rows(renders);
        cam_gt_stack = stack_rows(batch.gt);
        cam_l1 = weighted_l1(cam_pred_stack, cam_gt_stack, stack_rows(out.weights.cams),
                             want_wgrad);
        out.parts.l_cam = cam_l1.value;
        require_finite(out.parts.l_cam, "L_cam", iter);
      }
      have_weighted = true;
    }
  }

  if (!grads) return out;

  std::vector<Image> d_render;
  d_render.reserve(n_cams);
  for (int c = 0; c < n_cams; ++c)
    d_render.emplace_back(renders[c].height(), renders[c].width(), renders[c].channels());
  if (seeds.rgb != 0.0)
    for (int c = 0; c < n_cams; ++c) axpy(d_render[c], rgb[c].d_pred, seeds.rgb / n_cams);

  if (slot_phase) {
    Image d_bev(bev.height(), bev.width(), bev.channels(), 0.0);
    bool any_bev = false;

    if (have_weighted && seeds.ipm != 0.0) {
      axpy(d_bev, ipm_l1.d_pred, seeds.ipm);
      any_bev = true;
    }

    std::vector<double> d_conf;
    auto ensure_conf = [&] {
      if (d_conf.empty()) d_conf.assign(student.cell_count(), 0.0);
    };

    if (have_align && seeds.align != 0.0) {
      ensure_conf();
      Image scaled(align.d_student.height(), align.d_student.width(), 1, 0.0);
      axpy(scaled, align.d_student, seeds.align);
      shape_weights_backward(student, cfg.shape, scaled, d_conf);
    }

    if (!d_feature_conf.empty() && seeds.feature != 0.0) {
      ensure_conf();
      for (size_t i = 0; i < d_feature_conf.size(); ++i)
        d_conf[i] += seeds.feature * d_feature_conf[i];
    }

    if (want_wgrad && (seeds.ipm != 0.0 || seeds.cam != 0.0)) {
      // Diagnostic path with the stop-gradient lifted: pull the weighted
      // losses' weight adjoints back through combine -> upsample -> mix ->
      // shaping into the student confidences. The edge branch stays out of
      // it; tube placement is piecewise constant by contract.
      Image d_wprime(bev.height(), bev.width(), 1, 0.0);
      if (seeds.ipm != 0.0) axpy(d_wprime, ipm_l1.d_weight, seeds.ipm);
      if (seeds.cam != 0.0) {
        std::vector<Image> ones_like;
        ones_like.reserve(n_cams);
        for (const Image& w : out.weights.cams)
          ones_like.emplace_back(w.height(), w.width(), 1);
        std::vector<Image> d_wcams = split_rows(cam_l1.d_weight, ones_like);
        for (Image& dw : d_wcams) {
          double* p = dw.data();
          for (size_t i = 0; i < dw.size(); ++i) p[i] *= seeds.cam;
        }
        axpy(d_wprime, backproject_bev_backward(grid, d_wcams), 1.0);
      }
      Image d_cells(student.cells_y, student.cells_x, 1, 0.0);
      upsample_field_backward(d_wprime, cfg.detector.stride, d_cells);
      Image d_shape = mix_backward_student(d_cells, alpha_eff, /*stop_gradient=*/false);
      ensure_conf();
      shape_weights_backward(student, cfg.shape, d_shape, d_conf);
    }

    if (!d_conf.empty()) {
      corner_detector_backward(bev, cfg.detector, d_conf, d_bev);
      any_bev = true;
    }

    if (have_weighted && seeds.cam != 0.0 && cam_l1.d_pred.size() > 0) {
      std::vector<Image> d_cam_slices = split_rows(cam_l1.d_pred, renders);
      for (int c = 0; c < n_cams; ++c) axpy(d_render[c], d_cam_slices[c], seeds.cam);
    }

    if (any_bev) {
      std::vector<Image> from_bev = warp_ipm_backward(grid, d_bev);
      for (int c = 0; c < n_cams; ++c) axpy(d_render[c], from_bev[c], 1.0);
    }
  }

  for (int c = 0; c < n_cams; ++c)
    rasterize_backward(scene, cams[c].intr, world_to_camera(cams[c], batch), cfg.render,
                       caches[c], d_render[c], grads);
  return out;
}

LossSeeds seeds_for_phase(const TrainConfig& cfg, TrainPhase phase) {
  LossSeeds s;
  s.rgb = 1.0;
  if (phase != TrainPhase::kSlotAware) return s;
  switch (cfg.slot_mode) {
    case SlotMode::kOff:
      break;
    case SlotMode::kDirectIpmL1:
      s.ipm = cfg.loss.lambda_ipm;
      break;
    case SlotMode::kFeatureOnly:
      s.feature = cfg.loss.lambda_ipm;
      break;
    default:
      s.align = cfg.loss.lambda_align;
      s.ipm = cfg.loss.lambda_ipm;
      s.cam = cfg.loss.lambda_cam;
      break;
  }
  return s;
}

}  // namespace

SlotMode parse_slot_mode(const std::string& name) {
  if (name == "off") return SlotMode::kOff;
  if (name == "direct-ipm-l1") return SlotMode::kDirectIpmL1;
  if (name == "feature-only") return SlotMode::kFeatureOnly;
  if (name == "teacher-only") return SlotMode::kTeacherOnly;
  if (name == "student-only") return SlotMode::kStudentOnly;
  if (name == "full") return SlotMode::kFull;
  throw UsageError("unknown slot mode: " + name,
                   "expected off|direct-ipm-l1|feature-only|teacher-only|student-only|full");
}

const char* slot_mode_name(SlotMode mode) {
  switch (mode) {
    case SlotMode::kOff: return "off";
    case SlotMode::kDirectIpmL1: return "direct-ipm-l1";
    case SlotMode::kFeatureOnly: return "feature-only";
    case SlotMode::kTeacherOnly: return "teacher-only";
    case SlotMode::kStudentOnly: return "student-only";
    case SlotMode::kFull: return "full";
  }
  return "full";
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& msg) { throw UsageError(msg, "train config"); };
  if (total_iters < 0) bad("total_iters must be >= 0");
  if (phase1_iters < 0 || phase1_iters > total_iters)
    bad("phase1_iters must lie in [0, total_iters]");
  if (lr_position <= 0 || lr_sh <= 0 || lr_opacity <= 0 || lr_scales <= 0 || lr_rotation <= 0)
    bad("learning rates must be positive");
  if (adam_beta1 < 0 || adam_beta1 >= 1 || adam_beta2 < 0 || adam_beta2 >= 1)
    bad("adam betas must lie in [0, 1)");
  if (adam_eps <= 0) bad("adam_eps must be positive");
  if (loss.lambda_dssim < 0 || loss.lambda_dssim > 1) bad("lambda_dssim must lie in [0, 1]");
  if (loss.lambda_align < 0 || loss.lambda_ipm < 0 || loss.lambda_cam < 0 ||
      loss.lambda_edge < 0)
    bad("loss weights must be non-negative");
  if (loss.topk_k < 1) bad("topk_k must be >= 1");
  if (mix_alpha < 0 || mix_alpha > 1 || mix_beta < 0 || mix_beta > 1)
    bad("mix coefficients must lie in [0, 1]");
  if (detector.stride < 1) bad("detector stride must be >= 1");
  if (peak_threshold <= 0 || peak_threshold >= 1) bad("peak_threshold must lie in (0, 1)");
  if (peak_nms_px <= 0) bad("peak_nms_px must be positive");
  if (n_gaussians < 1) bad("n_gaussians must be >= 1");
  if (sh_degree < 0 || sh_degree > 2) bad("sh_degree must lie in [0, 2]");
  if (seed == 0) bad("seed must be nonzero");
  if (log_every < 1 || eval_every < 1 || checkpoint_every < 1)
    bad("log/eval/checkpoint cadences must be >= 1");
}

double position_lr(const TrainConfig& cfg, int iter) {
  if (cfg.total_iters <= 0) return cfg.lr_position;
  const double t = static_cast<double>(iter) / cfg.total_iters;
  return cfg.lr_position * std::pow(0.01, t);
}

void adam_step(GaussianScene& scene, AdamState& state, const SceneGrads& grads,
               const TrainConfig& cfg, int iter) {
  if (state.m.mu.size() != scene.mu.size()) {
    if (state.step == 0)
      state.resize_like(scene);
    else
      throw UsageError("adam state shape does not match the scene");
  }
  if (grads.mu.size() != scene.mu.size() || grads.sh.size() != scene.sh.size())
    throw UsageError("gradient shapes do not match the scene");

  state.step += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));

  auto update = [&](std::vector<double>& p, std::vector<double>& m, std::vector<double>& v,
                    const std::vector<double>& g, double lr) {
    parallel_for(static_cast<int64_t>(p.size()), [&](int64_t i) {
      double gi = g[i];
      if (!std::isfinite(gi)) gi = 0.0;
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      if (lr > 0.0) {
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        p[i] -= lr * mh / (std::sqrt(vh) + cfg.adam_eps);
      }
    });
  };

  update(scene.mu, state.m.mu, state.v.mu, grads.mu, position_lr(cfg, iter));
  update(scene.quat, state.m.quat, state.v.quat, grads.quat, cfg.lr_rotation);
  update(scene.log_scales, state.m.log_scales, state.v.log_scales, grads.log_scales,
         cfg.lr_scales);
  update(scene.logit_opacity, state.m.logit_opacity, state.v.logit_opacity,
         grads.logit_opacity, cfg.lr_opacity);
  update(scene.sh, state.m.sh, state.v.sh, grads.sh, cfg.lr_sh);

  if (cfg.lr_rotation > 0.0) {
    parallel_for(static_cast<int64_t>(scene.size()), [&](int64_t i) {
      double* q = scene.quat.data() + 4 * i;
      const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
      if (n < 1e-12) {
        q[0] = 1.0;
        q[1] = q[2] = q[3] = 0.0;
      } else {
        for (int k = 0; k < 4; ++k) q[k] /= n;
      }
    });
  }
}

TeacherPack make_teacher_pack(const std::vector<SlotAnnotation>& annos, const Image& gt_ipm,
                              const TrainConfig& cfg) {
  TeacherPack pack;
  const int cells_y = gt_ipm.height() / cfg.detector.stride;
  const int cells_x = gt_ipm.width() / cfg.detector.stride;
  pack.field = annotations_to_teacher_field(annos, cells_y, cells_x, cfg.detector.stride);
  pack.shape = shape_weights(pack.field, cfg.shape);

  // Adjacent slots share entrance corners; keep one of each.
  for (const SlotAnnotation& a : annos) {
    const double pts[2][2] = {{a.p1_u, a.p1_v}, {a.p2_u, a.p2_v}};
    for (const auto& p : pts) {
      bool seen = false;
      for (const CornerDetection& c : pack.corners)
        if (std::abs(c.u - p[0]) < 1e-6 && std::abs(c.v - p[1]) < 1e-6) {
          seen = true;
          break;
        }
      if (seen) continue;
      CornerDetection c;
      c.u = p[0];
      c.v = p[1];
      const double rad = a.angle_deg * M_PI / 180.0;
      c.dir_u = std::cos(rad);
      c.dir_v = std::sin(rad);
      c.confidence = 1.0;
      c.cell_x = std::clamp(static_cast<int>(p[0]) / cfg.detector.stride, 0, cells_x - 1);
      c.cell_y = std::clamp(static_cast<int>(p[1]) / cfg.detector.stride, 0, cells_y - 1);
      pack.corners.push_back(c);
    }
  }

  EdgeScores es = edge_scores(pack.corners, gt_ipm, cfg.edge);
  es.gradient_allowed = false;
  pack.edge_bev = rasterize_edges(es, gt_ipm.height(), gt_ipm.width(), cfg.edge_tube);
  return pack;
}

FrameBatch load_frame_batch(const TrainContext& ctx, int frame_index) {
  const Dataset& data = *ctx.data;
  if (frame_index < 0 || frame_index >= static_cast<int>(data.frames.size()))
    throw UsageError("frame index out of range: " + std::to_string(frame_index));
  const DatasetFrame& frame = data.frames[frame_index];
  if (frame.image_paths.size() != data.cameras.size())
    throw DataError("frame image count does not match the camera set",
                    "frame " + std::to_string(frame.id));

  FrameBatch batch;
  batch.frame_index = frame_index;
  batch.gt.reserve(data.cameras.size());
  for (size_t c = 0; c < data.cameras.size(); ++c) {
    Image img = read_png(frame.image_paths[c]);
    const FisheyeIntrinsics& intr = data.cameras[c].intr;
    if (img.width() != intr.width || img.height() != intr.height)
      throw DataError("image size does not match the calibration", frame.image_paths[c]);
    batch.gt.push_back(std::move(img));
  }
  batch.gt_ipm = warp_ipm(ctx.grid, batch.gt);
  batch.vehicle_from_world = world_to_vehicle(frame.pose);
  if (static_cast<size_t>(frame_index) < ctx.teacher.size())
    batch.teacher = &ctx.teacher[frame_index];
  return batch;
}

TrainContext prepare_training(const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.cameras.empty()) throw DataError("dataset has no cameras");
  if (data.frames.empty()) throw DataError("dataset has no frames");
  if (data.train_indices.empty()) throw DataError("dataset has no training frames");
  if (data.annotations.size() != data.frames.size())
    throw DataError("annotation count does not match the frame count");
  if (data.ipm.bev_width < cfg.detector.stride || data.ipm.bev_height < cfg.detector.stride)
    throw DataError("BEV raster is smaller than one detector cell");

  const int cells = (data.ipm.bev_height / cfg.detector.stride) *
                    (data.ipm.bev_width / cfg.detector.stride);
  if (cfg.loss.topk_k > cells)
    throw UsageError("topk_k exceeds the detector cell count (" + std::to_string(cells) + ")",
                     "train config");
  if (mode_uses_weights(cfg.slot_mode) && cfg.slot_mode != SlotMode::kDirectIpmL1) {
    const int w = data.cameras[0].intr.width, h = data.cameras[0].intr.height;
    for (const FisheyeCamera& cam : data.cameras)
      if (cam.intr.width != w || cam.intr.height != h)
        throw DataError("slot-aware camera loss needs all cameras at one resolution");
  }

  TrainContext ctx;
  ctx.data = &data;
  ctx.cfg = cfg;
  ctx.grid = build_ipm_grid(data.cameras, data.ipm);
  ctx.teacher.reserve(data.frames.size());
  // Touch every frame once: missing images and size mismatches surface here,
  // before any optimization state exists.
  for (size_t i = 0; i < data.frames.size(); ++i) {
    FrameBatch batch = load_frame_batch(ctx, static_cast<int>(i));
    ctx.teacher.push_back(make_teacher_pack(data.annotations[i], batch.gt_ipm, cfg));
  }
  return ctx;
}

StepStats train_step(const TrainContext& ctx, const FrameBatch& batch, GaussianScene& scene,
                     AdamState& opt, int iter) {
  const TrainConfig& cfg = ctx.cfg;
  const TrainPhase phase =
      iter < cfg.phase1_iters ? TrainPhase::kPhotometric : TrainPhase::kSlotAware;
  const LossSeeds seeds = seeds_for_phase(cfg, phase);

  SceneGrads grads;
  grads.resize_like(scene);
  PipelineProducts p = run_pipeline(ctx.data->cameras, ctx.grid, cfg, batch, scene, phase,
                                    seeds, &grads, nullptr, iter);
  adam_step(scene, opt, grads, cfg, iter);

  StepStats stats;
  stats.parts = p.parts;
  stats.total = total_loss(p.parts, cfg.loss, phase);
  stats.lr_pos = position_lr(cfg, iter);
  stats.phase = phase;
  require_finite(stats.total, "total loss", iter);
  return stats;
}

PrMetrics corner_pr(const std::vector<CornerDetection>& peaks,
                    const std::vector<SlotAnnotation>& gt, const MatchCriteria& criteria) {
  auto norm_deg = [](double d) {
    d = std::fmod(d, 360.0);
    return d < 0 ? d + 360.0 : d;
  };

  struct Corner {
    double u, v, deg;
  };
  std::vector<Corner> uniq;
  for (const SlotAnnotation& a : gt) {
    const double pts[2][2] = {{a.p1_u, a.p1_v}, {a.p2_u, a.p2_v}};
    for (const auto& p : pts) {
      bool seen = false;
      for (const Corner& c : uniq)
        if (std::abs(c.u - p[0]) < 1e-6 && std::abs(c.v - p[1]) < 1e-6 &&
            std::abs(norm_deg(c.deg - a.angle_deg)) < 1e-6) {
          seen = true;
          break;
        }
      if (!seen) uniq.push_back({p[0], p[1], norm_deg(a.angle_deg)});
    }
  }

  std::vector<SlotAnnotation> gt_corners;
  gt_corners.reserve(uniq.size());
  for (const Corner& c : uniq) {
    SlotAnnotation a;
    a.p1_u = a.p2_u = c.u;
    a.p1_v = a.p2_v = c.v;
    a.angle_deg = c.deg;
    a.type = "corner";
    gt_corners.push_back(a);
  }

  std::vector<SlotDetectionResult> dets;
  dets.reserve(peaks.size());
  for (const CornerDetection& p : peaks) {
    SlotDetectionResult d;
    d.p1_u = d.p2_u = p.u;
    d.p1_v = d.p2_v = p.v;
    d.angle_deg = norm_deg(std::atan2(p.dir_v, p.dir_u) * 180.0 / M_PI);
    d.confidence = p.confidence;
    dets.push_back(d);
  }
  return slot_precision_recall(dets, gt_corners, criteria);
}

EvalStats evaluate(const TrainContext& ctx, const GaussianScene& scene,
                   std::vector<FrameEval>* per_frame) {
  EvalStats e;
  const auto& cams = ctx.data->cameras;
  double psnr_sum = 0, ssim_sum = 0;
  int n_img = 0;
  long tp = 0, fp = 0, fn = 0;
  if (per_frame) per_frame->clear();
  for (int idx : ctx.data->eval_indices) {
    FrameBatch batch = load_frame_batch(ctx, idx);
    std::vector<Image> renders(cams.size());
    FrameEval row;
    row.frame = idx;
    for (size_t c = 0; c < cams.size(); ++c) {
      renders[c] =
          rasterize(scene, cams[c].intr, world_to_camera(cams[c], batch), ctx.cfg.render, nullptr);
      row.psnr += psnr(renders[c], batch.gt[c]);
      row.ssim += ssim(renders[c], batch.gt[c]);
      ++n_img;
    }
    psnr_sum += row.psnr;
    ssim_sum += row.ssim;
    if (!cams.empty()) {
      row.psnr /= static_cast<double>(cams.size());
      row.ssim /= static_cast<double>(cams.size());
    }
    Image bev = warp_ipm(ctx.grid, renders);
    CornerField field = analytic_corner_detector(bev, ctx.cfg.detector);
    auto peaks = corner_peaks(field, ctx.cfg.peak_threshold, ctx.cfg.peak_nms_px);
    PrMetrics pr = corner_pr(peaks, ctx.data->annotations[idx], ctx.cfg.match);
    tp += pr.tp;
    fp += pr.fp;
    fn += pr.fn;
    row.tp = pr.tp;
    row.fp = pr.fp;
    row.fn = pr.fn;
    if (per_frame) per_frame->push_back(row);
    ++e.frames;
  }
  if (n_img > 0) {
    e.psnr = psnr_sum / n_img;
    e.ssim = ssim_sum / n_img;
  }
  // Same empty-set convention as slot_precision_recall: a detector that
  // reports nothing while corners exist scores zero precision, so silence
  // cannot win precision comparisons by default.
  e.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : (fn > 0 ? 0.0 : 1.0);
  e.recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 1.0;
  return e;
}

GaussianScene init_scene_from_dataset(const Dataset& data, const IpmGrid& grid, size_t count,
                                      int sh_degree, uint64_t seed) {
  if (count == 0) throw UsageError("init_scene_from_dataset: count must be positive");
  if (data.frames.empty() || data.cameras.empty())
    throw DataError("init_scene_from_dataset: empty dataset");

  std::vector<Eigen::Vector3d> pts, cols;
  std::vector<int> source = data.train_indices;
  if (source.empty())
    for (size_t i = 0; i < data.frames.size(); ++i) source.push_back(static_cast<int>(i));
  const size_t frame_step = std::max<size_t>(1, source.size() / 8);

  for (size_t fi = 0; fi < source.size(); fi += frame_step) {
    const DatasetFrame& frame = data.frames[source[fi]];
    Pose vehicle_to_world;
    vehicle_to_world.q =
        Eigen::Quaterniond(Eigen::AngleAxisd(frame.pose.yaw_rad, Eigen::Vector3d::UnitZ()));
    vehicle_to_world.t = Eigen::Vector3d(frame.pose.x, frame.pose.y, 0.0);
    for (size_t c = 0; c < data.cameras.size(); ++c) {
      const Image img = read_png(frame.image_paths[c]);
      const Image& ground = grid.ground[c];
      if (ground.width() != img.width() || ground.height() != img.height())
        throw DataError("ground map does not match the image size", frame.image_paths[c]);
      for (int y = 0; y < img.height(); y += 3)
        for (int x = 0; x < img.width(); x += 3) {
          if (ground.at(2, y, x) < 0.5) continue;
          const Eigen::Vector2d xy =
              data.ipm.bev_to_vehicle(ground.at(0, y, x), ground.at(1, y, x));
          pts.push_back(vehicle_to_world.apply({xy.x(), xy.y(), 0.0}));
          cols.emplace_back(img.at(0, y, x), img.channels() > 1 ? img.at(1, y, x) : img.at(0, y, x),
                            img.channels() > 2 ? img.at(2, y, x) : img.at(0, y, x));
        }
    }
  }

  // A band of mid-gray points above the ground stands in for walls and
  // ceiling; photometric optimization moves them where they belong.
  Eigen::AlignedBox3d box;
  for (const auto& p : pts) box.extend(p);
  if (pts.empty()) box = Eigen::AlignedBox3d(Eigen::Vector3d(-8, -8, 0), Eigen::Vector3d(8, 8, 0));
  Prng rng(mix_seed(seed, 0xB0C5));
  const size_t n_box = std::max<size_t>(1, count / 4);
  for (size_t i = 0; i < n_box; ++i) {
    const double x = rng.uniform(box.min().x() - 0.5, box.max().x() + 0.5);
    const double y = rng.uniform(box.min().y() - 0.5, box.max().y() + 0.5);
    const double z = rng.uniform(0.3, 3.2);
    pts.emplace_back(x, y, z);
    cols.emplace_back(0.5, 0.5, 0.5);
  }

  return init_from_points(pts, cols, count, sh_degree, mix_seed(seed, 0x90D5));
}

namespace {

constexpr char kStateMagic[4] = {'P', 'G', 'T', 'S'};

void write_block(std::ofstream& f, const std::vector<double>& v) {
  f.write(reinterpret_cast<const char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_block(std::ifstream& f, std::vector<double>& v) {
  f.read(reinterpret_cast<char*>(v.data()),
         static_cast<std::streamsize>(v.size() * sizeof(double)));
}

}  // namespace

void save_train_state(const std::string& path, const GaussianScene& scene, const AdamState& opt,
                      int iter) {
  if (opt.m.mu.size() != scene.mu.size())
    throw UsageError("adam state shape does not match the scene");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write train state", path);
  f.write(kStateMagic, 4);
  const uint32_t version = 1, count = static_cast<uint32_t>(scene.size()),
                 degree = static_cast<uint32_t>(scene.sh_degree),
                 it = static_cast<uint32_t>(iter);
  const uint64_t step = static_cast<uint64_t>(opt.step);
  f.write(reinterpret_cast<const char*>(&version), 4);
  f.write(reinterpret_cast<const char*>(&count), 4);
  f.write(reinterpret_cast<const char*>(&degree), 4);
  f.write(reinterpret_cast<const char*>(&step), 8);
  f.write(reinterpret_cast<const char*>(&it), 4);
  for (const auto* v : {&scene.mu, &scene.quat, &scene.log_scales, &scene.logit_opacity,
                        &scene.sh})
    write_block(f, *v);
  for (const SceneGrads* g : {&opt.m, &opt.v})
    for (const auto* v : {&g->mu, &g->quat, &g->log_scales, &g->logit_opacity, &g->sh})
      write_block(f, *v);
  if (!f) throw DataError("short write on train state", path);
}

int load_train_state(const std::string& path, GaussianScene* scene, AdamState* opt) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read train state", path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kStateMagic, 4) != 0)
    throw DataError("not a train state file", path);
  uint32_t version = 0, count = 0, degree = 0, iter = 0;
  uint64_t step = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&count), 4);
  f.read(reinterpret_cast<char*>(&degree), 4);
  f.read(reinterpret_cast<char*>(&step), 8);
  f.read(reinterpret_cast<char*>(&iter), 4);
  if (!f || version != 1) throw DataError("unsupported train state version", path);
  if (degree > 2) throw DataError("train state sh_degree out of range", path);

  scene->sh_degree = static_cast<int>(degree);
  scene->resize(count);
  for (auto* v : {&scene->mu, &scene->quat, &scene->log_scales, &scene->logit_opacity,
                  &scene->sh})
    read_block(f, *v);
  opt->resize_like(*scene);
  opt->step = static_cast<int64_t>(step);
  for (SceneGrads* g : {&opt->m, &opt->v})
    for (auto* v : {&g->mu, &g->quat, &g->log_scales, &g->logit_opacity, &g->sh})
      read_block(f, *v);
  if (!f) throw DataError("truncated train state", path);
  scene->validate();
  return static_cast<int>(iter);
}

TrainResult run_training(const Dataset& data, const TrainConfig& cfg, const std::string& out_dir,
                         std::ostream* metrics, const std::string& resume_state) {
  TrainContext ctx = prepare_training(data, cfg);

  GaussianScene scene;
  AdamState opt;
  int start_iter = 0;
  if (!resume_state.empty()) {
    start_iter = load_train_state(resume_state, &scene, &opt);
    if (start_iter > cfg.total_iters)
      throw UsageError("resume state is past total_iters",
                       resume_state + " at iteration " + std::to_string(start_iter));
  } else {
    scene = init_scene_from_dataset(data, ctx.grid, cfg.n_gaussians, cfg.sh_degree, cfg.seed);
    opt.resize_like(scene);
  }

  if (!out_dir.empty()) fs::create_directories(out_dir);
  auto emit = [&](const json& j) {
    if (metrics) *metrics << j.dump() << "\n";
  };
  auto run_eval = [&](int iter) {
    EvalStats e = evaluate(ctx, scene);
    emit(json{{"type", "eval"},
              {"iter", iter},
              {"psnr", e.psnr},
              {"ssim", e.ssim},
              {"corner_precision", e.precision},
              {"corner_recall", e.recall},
              {"frames", e.frames}});
    return e;
  };
  auto artifact = [&](const char* stem, int iter, const char* ext) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%06d.%s", stem, iter, ext);
    return (fs::path(out_dir) / name).string();
  };

  const std::vector<int>& train_idx = data.train_indices;
  const size_t n_train = train_idx.size();
  std::vector<int> order;
  size_t order_epoch = static_cast<size_t>(-1);
  auto frame_for = [&](int iter) {
    const size_t epoch = static_cast<size_t>(iter) / n_train;
    if (epoch != order_epoch) {
      order = train_idx;
      Prng rng(mix_seed(cfg.seed, 0xE50C0000ULL + epoch));
      rng.shuffle(order);
      order_epoch = epoch;
    }
    return order[static_cast<size_t>(iter) % n_train];
  };

  EvalStats last_eval;
  bool evaluated = false;
  for (int iter = start_iter; iter < cfg.total_iters; ++iter) {
    const int frame = frame_for(iter);
    FrameBatch batch = load_frame_batch(ctx, frame);
    StepStats s = train_step(ctx, batch, scene, opt, iter);

    if (metrics && (iter % cfg.log_every == 0 || iter + 1 == cfg.total_iters))
      emit(json{{"type", "train"},
                {"iter", iter},
                {"frame", frame},
                {"phase", s.phase == TrainPhase::kPhotometric ? 1 : 2},
                {"total", s.total},
                {"l_rgb", s.parts.l_rgb},
                {"l_align", s.parts.l_align},
                {"l_ipm", s.parts.l_ipm},
                {"l_cam", s.parts.l_cam},
                {"lr_position", s.lr_pos}});

    const bool last = iter + 1 == cfg.total_iters;
    if ((iter + 1) % cfg.eval_every == 0 || last) {
      last_eval = run_eval(iter + 1);
      evaluated = true;
    }
    if (!out_dir.empty() && ((iter + 1) % cfg.checkpoint_every == 0 || last)) {
      save_checkpoint(artifact("scene", iter + 1, "pgsc"), scene);
      save_train_state(artifact("state", iter + 1, "pgts"), scene, opt, iter + 1);
    }
  }
  if (!evaluated) last_eval = run_eval(start_iter);  // 0-iteration run: initial metrics

  if (!out_dir.empty()) {
    save_checkpoint((fs::path(out_dir) / "scene_final.pgsc").string(), scene);
    save_train_state((fs::path(out_dir) / "train_state.pgts").string(), scene, opt,
                     cfg.total_iters);
  }

  TrainResult result;
  result.scene = std::move(scene);
  result.final_eval = last_eval;
  result.start_iter = start_iter;
  return result;
}

namespace {

LossSeeds seeds_for_component(const std::string& comp) {
  LossSeeds s;
  if (comp == "rgb")
    s.rgb = 1;
  else if (comp == "align")
    s.align = 1;
  else if (comp == "ipm")
    s.ipm = 1;
  else if (comp == "cam")
    s.cam = 1;
  else if (comp == "feature")
    s.feature = 1;
  else
    throw UsageError("unknown grad-check component: " + comp,
                     "expected rgb|align|ipm|cam|feature");
  return s;
}

double component_value(const LossComponents& parts, const std::string& comp) {
  if (comp == "rgb") return parts.l_rgb;
  if (comp == "align") return parts.l_align;
  if (comp == "cam") return parts.l_cam;
  return parts.l_ipm;  // "ipm" and "feature" both land here
}

struct Group {
  const char* name;
  std::vector<double> GaussianScene::* params;
  std::vector<double> SceneGrads::* grads;
  double h;
};

constexpr Group kGroups[] = {
    {"mu", &GaussianScene::mu, &SceneGrads::mu, 1e-4},
    {"quat", &GaussianScene::quat, &SceneGrads::quat, 1e-4},
    {"log_scales", &GaussianScene::log_scales, &SceneGrads::log_scales, 1e-4},
    {"logit_opacity", &GaussianScene::logit_opacity, &SceneGrads::logit_opacity, 1e-4},
    {"sh", &GaussianScene::sh, &SceneGrads::sh, 1e-3},
};

void require_desk_sized(const TrainContext& ctx, const GaussianScene& scene) {
  if (scene.size() > 50)
    throw UsageError("gradient checks want at most 50 Gaussians, got " +
                     std::to_string(scene.size()));
  for (const FisheyeCamera& cam : ctx.data->cameras)
    if (cam.intr.width > 64 || cam.intr.height > 64)
      throw UsageError("gradient checks want camera images at most 64x64");
  if (ctx.data->ipm.bev_width > 64 || ctx.data->ipm.bev_height > 64)
    throw UsageError("gradient checks want a BEV raster at most 64x64");
}

std::vector<size_t> top_abs_indices(const std::vector<double>& v, int k) {
  std::vector<size_t> idx(v.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const size_t keep = std::min<size_t>(static_cast<size_t>(k), idx.size());
  std::partial_sort(idx.begin(), idx.begin() + keep, idx.end(), [&](size_t a, size_t b) {
    const double va = std::abs(v[a]), vb = std::abs(v[b]);
    if (va != vb) return va > vb;
    return a < b;
  });
  idx.resize(keep);
  return idx;
}

double rel_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  if (scale < 1e-9) return 0.0;
  return std::abs(a - b) / std::max(scale, 1e-8);
}

}  // namespace

double GradCheckReport::worst_rel(const std::string& component) const {
  double w = 0;
  for (const GradCheckEntry& e : entries)
    if (e.component == component) w = std::max(w, e.rel_error);
  return w;
}

GradCheckReport grad_check(const TrainContext& ctx, const FrameBatch& batch,
                           const GaussianScene& scene,
                           const std::vector<std::string>& components, int probes_per_group) {
  require_desk_sized(ctx, scene);
  if (probes_per_group < 1) throw UsageError("probes_per_group must be >= 1");

  GradCheckReport report;
  for (const std::string& comp : components) {
    const LossSeeds seeds = seeds_for_component(comp);
    TrainConfig cfg = ctx.cfg;
    cfg.slot_mode = comp == "feature" ? SlotMode::kFeatureOnly : SlotMode::kFull;
    cfg.stop_gradient = true;

    SceneGrads grads;
    grads.resize_like(scene);
    PipelineProducts base = run_pipeline(ctx.data->cameras, ctx.grid, cfg, batch, scene,
                                         TrainPhase::kSlotAware, seeds, &grads, nullptr, -1);
    const ProjectedWeights* frozen = base.have_weights ? &base.weights : nullptr;

    for (const Group& group : kGroups) {
      const std::vector<double>& analytic = grads.*group.grads;
      for (size_t idx : top_abs_indices(analytic, probes_per_group)) {
        if (std::abs(analytic[idx]) < 1e-12) continue;
        auto value_at = [&](double delta) {
          GaussianScene pert = scene;
          (pert.*group.params)[idx] += delta;
          return component_value(
              run_pipeline(ctx.data->cameras, ctx.grid, cfg, batch, pert,
                           TrainPhase::kSlotAware, seeds, nullptr, frozen, -1)
                  .parts,
              comp);
        };
        const double fd1 = (value_at(group.h) - value_at(-group.h)) / (2.0 * group.h);
        const double fd2 = (value_at(group.h / 2) - value_at(-group.h / 2)) / group.h;
        // A probe straddling a blend cutoff (footprint and opacity bounds are
        // hard by contract) says nothing about the adjoints: the two step
        // sizes disagree there, so drop it.
        if (rel_error(fd1, fd2) > 0.02) continue;
        const double fd = (4.0 * fd2 - fd1) / 3.0;

        GradCheckEntry entry;
        entry.component = comp;
        entry.group = group.name;
        entry.index = idx;
        entry.analytic = analytic[idx];
        entry.fd = fd;
        entry.rel_error = rel_error(analytic[idx], fd);
        if (entry.rel_error > report.worst.rel_error) report.worst = entry;
        report.entries.push_back(std::move(entry));
      }
    }
  }
  return report;
}

SgContractReport check_sg_contract(const TrainContext& ctx, const FrameBatch& batch,
                                   const GaussianScene& scene, int probes) {
  require_desk_sized(ctx, scene);
  // Edge tubes are piecewise constant by contract, so the live-weight finite
  // differences are only meaningful with the edge branch off.
  TrainConfig cfg = ctx.cfg;
  cfg.slot_mode = SlotMode::kFull;
  cfg.loss.lambda_edge = 0.0;

  LossSeeds seeds;
  seeds.ipm = 1;
  seeds.cam = 1;

  cfg.stop_gradient = true;
  SceneGrads g_on;
  g_on.resize_like(scene);
  run_pipeline(ctx.data->cameras, ctx.grid, cfg, batch, scene, TrainPhase::kSlotAware, seeds,
               &g_on, nullptr, -1);

  cfg.stop_gradient = false;
  SceneGrads g_off;
  g_off.resize_like(scene);
  run_pipeline(ctx.data->cameras, ctx.grid, cfg, batch, scene, TrainPhase::kSlotAware, seeds,
               &g_off, nullptr, -1);

  SgContractReport report;
  for (const Group& group : kGroups) {
    const std::vector<double>& on = g_on.*group.grads;
    const std::vector<double>& off = g_off.*group.grads;
    std::vector<double> path(on.size());
    for (size_t i = 0; i < on.size(); ++i) path[i] = off[i] - on[i];
    for (size_t idx : top_abs_indices(path, probes)) {
      if (std::abs(path[idx]) < 1e-14) continue;
      report.max_path_grad = std::max(report.max_path_grad, std::abs(path[idx]));

      auto live_value = [&](double delta) {
        GaussianScene pert = scene;
        (pert.*group.params)[idx] += delta;
        const LossComponents parts =
            run_pipeline(ctx.data->cameras, ctx.grid, cfg, batch, pert,
                         TrainPhase::kSlotAware, seeds, nullptr, nullptr, -1)
                .parts;
        return parts.l_ipm + parts.l_cam;
      };
      const double fd1 = (live_value(group.h) - live_value(-group.h)) / (2.0 * group.h);
      const double fd2 = (live_value(group.h / 2) - live_value(-group.h / 2)) / group.h;
      if (rel_error(fd1, fd2) > 0.02) continue;  // straddles a blend cutoff
      const double fd = (4.0 * fd2 - fd1) / 3.0;

      report.sg_off_rel_error = std::max(report.sg_off_rel_error, rel_error(off[idx], fd));
      report.sg_on_fd_gap = std::max(report.sg_on_fd_gap, std::abs(fd - on[idx]));
    }
  }
  return report;
}

}  // namespace parkgauss
