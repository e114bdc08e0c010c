#include "parkgauss/rasterizer.hpp"

#include <algorithm>
#include <cmath>

#include "parkgauss/parallel.hpp"

namespace parkgauss {

namespace {

// Projects and culls every Gaussian, producing the compacted splat list in
// Gaussian index order.
std::vector<SplatRecord> project_splats(const GaussianScene& scene,
                                        const FisheyeIntrinsics& intr,
                                        const Pose& world_to_cam, const RenderConfig& cfg) {
  const size_t n = scene.size();
  const Eigen::Vector3d cam_center = world_to_cam.center();
  std::vector<SplatRecord> recs(n);
  std::vector<uint8_t> keep(n, 0);

  parallel_for(static_cast<int64_t>(n), [&](int64_t ii) {
    const size_t i = static_cast<size_t>(ii);
    const double op = scene.opacity(i);
    if (op <= cfg.alpha_min) return;

    const UtProjection proj = ut_project(scene.mu_at(i), scene.covariance(i), intr,
                                         world_to_cam, cfg.ut, cfg.lowpass, cfg.near);
    if (!proj.valid) return;

    const double a = proj.cov2d(0, 0), b = proj.cov2d(0, 1), c = proj.cov2d(1, 1);
    const double det = a * c - b * b;
    if (!(det > 0.0)) return;

    SplatRecord& r = recs[i];
    r.gauss = static_cast<uint32_t>(i);
    r.proj = proj;
    r.mean2d = proj.mean2d;
    r.conic_a = c / det;
    r.conic_b = -b / det;
    r.conic_c = a / det;
    r.opacity = op;
    r.cam_dist = proj.cam_dist;
    r.ln_cut = std::log(cfg.alpha_min / op);
    const double lam_max = 0.5 * (a + c) + std::sqrt(0.25 * (a - c) * (a - c) + b * b);
    r.radius = std::sqrt(-2.0 * lam_max * r.ln_cut);

    const Eigen::Vector3d to_center = scene.mu_at(i) - cam_center;
    r.view_dist = to_center.norm();
    r.view_dir = r.view_dist > 1e-12 ? (to_center / r.view_dist).eval()
                                     : Eigen::Vector3d::UnitZ();
    r.color = sh_eval_color(scene.sh.data() + scene.sh_stride() * i, scene.sh_degree,
                            r.view_dir);
    keep[i] = 1;
  });

  std::vector<SplatRecord> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i)
    if (keep[i]) out.push_back(std::move(recs[i]));
  return out;
}

struct TileSpan {
  int x0, x1, y0, y1;  // inclusive tile ranges
};

TileSpan tile_span(const SplatRecord& r, const RenderCache& rc) {
  TileSpan s;
  s.x0 = std::max(0, static_cast<int>(std::floor((r.mean2d.x() - r.radius) / rc.tile_size)));
  s.x1 = std::min(rc.tiles_x - 1,
                  static_cast<int>(std::floor((r.mean2d.x() + r.radius) / rc.tile_size)));
  s.y0 = std::max(0, static_cast<int>(std::floor((r.mean2d.y() - r.radius) / rc.tile_size)));
  s.y1 = std::min(rc.tiles_y - 1,
                  static_cast<int>(std::floor((r.mean2d.y() + r.radius) / rc.tile_size)));
  return s;
}

void build_instances(RenderCache& rc) {
  const size_t ns = rc.splats.size();
  struct Inst {
    int32_t tile;
    uint32_t splat;
  };
  std::vector<Inst> insts;
  for (size_t s = 0; s < ns; ++s) {
    const TileSpan span = tile_span(rc.splats[s], rc);
    if (span.x1 < span.x0 || span.y1 < span.y0) continue;
    for (int ty = span.y0; ty <= span.y1; ++ty)
      for (int tx = span.x0; tx <= span.x1; ++tx)
        insts.push_back({ty * rc.tiles_x + tx, static_cast<uint32_t>(s)});
  }
  std::sort(insts.begin(), insts.end(), [&](const Inst& a, const Inst& b) {
    if (a.tile != b.tile) return a.tile < b.tile;
    const double da = rc.splats[a.splat].cam_dist, db = rc.splats[b.splat].cam_dist;
    if (da != db) return da < db;
    return rc.splats[a.splat].gauss < rc.splats[b.splat].gauss;
  });

  rc.inst.resize(insts.size());
  rc.tile_offset.assign(static_cast<size_t>(rc.tiles_x) * rc.tiles_y + 1, 0);
  for (const Inst& in : insts) ++rc.tile_offset[static_cast<size_t>(in.tile) + 1];
  for (size_t t = 1; t < rc.tile_offset.size(); ++t) rc.tile_offset[t] += rc.tile_offset[t - 1];
  for (size_t i = 0; i < insts.size(); ++i) rc.inst[i] = insts[i].splat;

  // CSR from splat to the instance ids that reference it, in instance order.
  rc.splat_offset.assign(ns + 1, 0);
  for (uint32_t s : rc.inst) ++rc.splat_offset[static_cast<size_t>(s) + 1];
  for (size_t s = 1; s <= ns; ++s) rc.splat_offset[s] += rc.splat_offset[s - 1];
  rc.splat_inst.resize(rc.inst.size());
  std::vector<int64_t> cursor(rc.splat_offset.begin(), rc.splat_offset.end() - 1);
  for (size_t i = 0; i < rc.inst.size(); ++i)
    rc.splat_inst[static_cast<size_t>(cursor[rc.inst[i]]++)] = static_cast<int64_t>(i);
}

struct BlendResult {
  double t;
  Eigen::Vector3d acc;
  int64_t processed;  // exclusive end within the candidate list
};

// Shared per-pixel blend over a front-to-back candidate list. noinline keeps
// the tiled path and the reference path on the same machine code, so their
// outputs are bitwise identical (FP contraction would otherwise differ
// between independently optimized copies of this loop).
__attribute__((noinline)) BlendResult blend_pixel(int x, int y, const SplatRecord* splats,
                                                  const uint32_t* idx, int64_t n,
                                                  const RenderConfig& cfg) {
  BlendResult out{1.0, Eigen::Vector3d::Zero(), 0};
  int64_t i = 0;
  for (; i < n; ++i) {
    const SplatRecord& r = splats[idx[i]];
    const double dx = x - r.mean2d.x();
    const double dy = y - r.mean2d.y();
    const double power =
        -0.5 * (r.conic_a * dx * dx + r.conic_c * dy * dy) - r.conic_b * dx * dy;
    if (power < r.ln_cut) continue;
    double alpha = r.opacity * std::exp(power);
    if (alpha > cfg.alpha_max) alpha = cfg.alpha_max;
    out.acc += (out.t * alpha) * r.color;
    out.t *= 1.0 - alpha;
    if (out.t < cfg.transmittance_min) {
      ++i;
      break;
    }
  }
  out.processed = i;
  return out;
}

}  // namespace

Image rasterize(const GaussianScene& scene, const FisheyeIntrinsics& intr,
                const Pose& world_to_cam, const RenderConfig& cfg, RenderCache* cache) {
  RenderCache local;
  RenderCache& rc = cache ? *cache : local;
  rc = RenderCache{};
  rc.width = intr.width;
  rc.height = intr.height;
  rc.tile_size = cfg.tile_size;
  rc.tiles_x = (intr.width + cfg.tile_size - 1) / cfg.tile_size;
  rc.tiles_y = (intr.height + cfg.tile_size - 1) / cfg.tile_size;
  rc.splats = project_splats(scene, intr, world_to_cam, cfg);
  build_instances(rc);

  const size_t npx = static_cast<size_t>(rc.width) * rc.height;
  rc.final_t.assign(npx, 1.0);
  rc.stop_inst.assign(npx, 0);

  Image img(rc.height, rc.width, 3);
  double* red = img.plane(0);
  double* green = img.plane(1);
  double* blue = img.plane(2);

  const int64_t ntiles = static_cast<int64_t>(rc.tiles_x) * rc.tiles_y;
  parallel_for_dynamic(ntiles, [&](int64_t tile) {
    const int tx = static_cast<int>(tile % rc.tiles_x);
    const int ty = static_cast<int>(tile / rc.tiles_x);
    const int64_t lo = rc.tile_offset[static_cast<size_t>(tile)];
    const int64_t hi = rc.tile_offset[static_cast<size_t>(tile) + 1];
    const int x_end = std::min(rc.width, (tx + 1) * rc.tile_size);
    const int y_end = std::min(rc.height, (ty + 1) * rc.tile_size);

    for (int y = ty * rc.tile_size; y < y_end; ++y) {
      for (int x = tx * rc.tile_size; x < x_end; ++x) {
        const BlendResult b =
            blend_pixel(x, y, rc.splats.data(), rc.inst.data() + lo, hi - lo, cfg);
        const size_t px = static_cast<size_t>(y) * rc.width + x;
        rc.final_t[px] = b.t;
        rc.stop_inst[px] = static_cast<int32_t>(b.processed);
        red[px] = b.acc.x() + b.t * cfg.background.x();
        green[px] = b.acc.y() + b.t * cfg.background.y();
        blue[px] = b.acc.z() + b.t * cfg.background.z();
      }
    }
  });
  return img;
}

Image rasterize_reference(const GaussianScene& scene, const FisheyeIntrinsics& intr,
                          const Pose& world_to_cam, const RenderConfig& cfg) {
  std::vector<SplatRecord> splats = project_splats(scene, intr, world_to_cam, cfg);
  std::vector<uint32_t> order(splats.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<uint32_t>(i);
  std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (splats[a].cam_dist != splats[b].cam_dist) return splats[a].cam_dist < splats[b].cam_dist;
    return splats[a].gauss < splats[b].gauss;
  });

  Image img(intr.height, intr.width, 3);
  double* red = img.plane(0);
  double* green = img.plane(1);
  double* blue = img.plane(2);
  std::vector<uint32_t> candidates;
  for (int y = 0; y < intr.height; ++y) {
    for (int x = 0; x < intr.width; ++x) {
      // Same footprint test as the tiled path: the pixel's tile must lie in
      // the splat's tile span; then blend with the shared kernel.
      const int ptx = x / cfg.tile_size;
      const int pty = y / cfg.tile_size;
      candidates.clear();
      for (uint32_t s : order) {
        const SplatRecord& r = splats[s];
        if (ptx < std::floor((r.mean2d.x() - r.radius) / cfg.tile_size) ||
            ptx > std::floor((r.mean2d.x() + r.radius) / cfg.tile_size) ||
            pty < std::floor((r.mean2d.y() - r.radius) / cfg.tile_size) ||
            pty > std::floor((r.mean2d.y() + r.radius) / cfg.tile_size))
          continue;
        candidates.push_back(s);
      }
      const BlendResult b = blend_pixel(x, y, splats.data(), candidates.data(),
                                        static_cast<int64_t>(candidates.size()), cfg);
      const size_t px = static_cast<size_t>(y) * intr.width + x;
      red[px] = b.acc.x() + b.t * cfg.background.x();
      green[px] = b.acc.y() + b.t * cfg.background.y();
      blue[px] = b.acc.z() + b.t * cfg.background.z();
    }
  }
  return img;
}

void rasterize_backward(const GaussianScene& scene, const FisheyeIntrinsics& intr,
                        const Pose& world_to_cam, const RenderConfig& cfg,
                        const RenderCache& rc, const Image& d_image, SceneGrads* grads) {
  if (d_image.height() != rc.height || d_image.width() != rc.width || d_image.channels() != 3)
    throw DataError("rasterize_backward: gradient image shape mismatch");

  // Per-instance gradient slots: dmean(2), dconic(3), dopacity, dcolor(3).
  const size_t ninst = rc.inst.size();
  std::vector<double> ig(ninst * 9, 0.0);
  const double* d_red = d_image.plane(0);
  const double* d_green = d_image.plane(1);
  const double* d_blue = d_image.plane(2);

  const int64_t ntiles = static_cast<int64_t>(rc.tiles_x) * rc.tiles_y;
  parallel_for_dynamic(ntiles, [&](int64_t tile) {
    const int tx = static_cast<int>(tile % rc.tiles_x);
    const int ty = static_cast<int>(tile / rc.tiles_x);
    const int64_t lo = rc.tile_offset[static_cast<size_t>(tile)];
    const int x_end = std::min(rc.width, (tx + 1) * rc.tile_size);
    const int y_end = std::min(rc.height, (ty + 1) * rc.tile_size);

    for (int y = ty * rc.tile_size; y < y_end; ++y) {
      for (int x = tx * rc.tile_size; x < x_end; ++x) {
        const size_t px = static_cast<size_t>(y) * rc.width + x;
        const Eigen::Vector3d dc(d_red[px], d_green[px], d_blue[px]);
        if (dc.isZero(0.0)) continue;

        double t = rc.final_t[px];
        Eigen::Vector3d suffix = t * cfg.background;  // contributions behind i
        // Walk the processed range in reverse, reconstructing each blend.
        for (int64_t i = lo + rc.stop_inst[px] - 1; i >= lo; --i) {
          const uint32_t sidx = rc.inst[static_cast<size_t>(i)];
          const SplatRecord& r = rc.splats[sidx];
          const double dx = x - r.mean2d.x();
          const double dy = y - r.mean2d.y();
          const double power =
              -0.5 * (r.conic_a * dx * dx + r.conic_c * dy * dy) - r.conic_b * dx * dy;
          if (power < r.ln_cut) continue;
          const double alpha_raw = r.opacity * std::exp(power);
          const bool clamped = alpha_raw > cfg.alpha_max;
          const double alpha = clamped ? cfg.alpha_max : alpha_raw;

          const double t_before = t / (1.0 - alpha);
          const double d_alpha =
              dc.dot(t_before * r.color - suffix / (1.0 - alpha));
          double* slot = ig.data() + static_cast<size_t>(i) * 9;
          // dcolor
          slot[6] += dc.x() * t_before * alpha;
          slot[7] += dc.y() * t_before * alpha;
          slot[8] += dc.z() * t_before * alpha;
          if (!clamped) {
            const double d_power = alpha_raw * d_alpha;
            slot[5] += std::exp(power) * d_alpha;  // dopacity
            // power = -0.5 (A dx^2 + C dy^2) - B dx dy, d = pixel - mean2d
            slot[0] += (r.conic_a * dx + r.conic_b * dy) * d_power;  // dmean.x
            slot[1] += (r.conic_b * dx + r.conic_c * dy) * d_power;  // dmean.y
            slot[2] += -0.5 * dx * dx * d_power;                     // dA
            slot[3] += -dx * dy * d_power;                           // dB
            slot[4] += -0.5 * dy * dy * d_power;                     // dC
          }
          suffix += (t_before * alpha) * r.color;
          t = t_before;
        }
      }
    }
  });

  // Reduce per splat in fixed instance order, then push through projection,
  // SH, and covariance factorization.
  const size_t nsplat = rc.splats.size();
  parallel_for(static_cast<int64_t>(nsplat), [&](int64_t ss) {
    const size_t s = static_cast<size_t>(ss);
    const SplatRecord& r = rc.splats[s];
    double acc[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
    for (int64_t k = rc.splat_offset[s]; k < rc.splat_offset[s + 1]; ++k) {
      const double* slot = ig.data() + static_cast<size_t>(rc.splat_inst[static_cast<size_t>(k)]) * 9;
      for (int j = 0; j < 9; ++j) acc[j] += slot[j];
    }
    bool any = false;
    for (int j = 0; j < 9; ++j) any = any || acc[j] != 0.0;
    if (!any) return;

    const size_t g = r.gauss;
    const Eigen::Vector2d d_mean2d(acc[0], acc[1]);
    // Conic = Cov^-1: dCov = -Conic * G * Conic with the symmetric split of
    // the off-diagonal adjoint.
    Eigen::Matrix2d conic;
    conic << r.conic_a, r.conic_b, r.conic_b, r.conic_c;
    Eigen::Matrix2d gsym;
    gsym << acc[2], 0.5 * acc[3], 0.5 * acc[3], acc[4];
    const Eigen::Matrix2d d_cov2d = -conic * gsym * conic;

    Eigen::Vector3d d_mu = Eigen::Vector3d::Zero();
    Eigen::Matrix3d d_sigma = Eigen::Matrix3d::Zero();
    ut_project_backward(r.proj, intr, world_to_cam, cfg.ut, d_mean2d, d_cov2d, &d_mu, &d_sigma);

    Eigen::Vector4d d_quat = Eigen::Vector4d::Zero();
    Eigen::Vector3d d_ls = Eigen::Vector3d::Zero();
    covariance_backward(scene.quat_at(g), scene.log_scales_at(g), d_sigma, &d_quat, &d_ls);

    // SH color and its view-direction dependence on mu.
    const Eigen::Vector3d d_color(acc[6], acc[7], acc[8]);
    Eigen::Vector3d d_dir = Eigen::Vector3d::Zero();
    sh_eval_color_backward(scene.sh.data() + scene.sh_stride() * g, scene.sh_degree,
                           r.view_dir, d_color, grads->sh.data() + scene.sh_stride() * g,
                           &d_dir);
    if (r.view_dist > 1e-9)
      d_mu += (d_dir - r.view_dir * r.view_dir.dot(d_dir)) / r.view_dist;

    const double d_op = acc[5];
    grads->logit_opacity[g] += d_op * r.opacity * (1.0 - r.opacity);
    for (int d = 0; d < 3; ++d) {
      grads->mu[3 * g + d] += d_mu[d];
      grads->log_scales[3 * g + d] += d_ls[d];
    }
    for (int d = 0; d < 4; ++d) grads->quat[4 * g + d] += d_quat[d];
  });
}

}  // namespace parkgauss
