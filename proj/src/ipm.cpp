#include "parkgauss/ipm.hpp"

#include <algorithm>
#include <cmath>

#include "parkgauss/io_binary.hpp"
#include "parkgauss/parallel.hpp"

namespace parkgauss {

namespace {

void compute_taps(IpmGrid& g, const std::vector<FisheyeCamera>& cams, const IpmConfig& cfg) {
  const int nc = static_cast<int>(cams.size());
  std::vector<Eigen::Vector3d> centers(cams.size());
  for (size_t c = 0; c < cams.size(); ++c) centers[c] = cams[c].pose.center();

  parallel_for(g.bev_h, [&](int64_t row) {
    struct Hit {
      int cam;
      Eigen::Vector2d px;
      double dist;
    };
    std::vector<Hit> hits;
    for (int col = 0; col < g.bev_w; ++col) {
      const Eigen::Vector2d xy = cfg.bev_to_vehicle(col, static_cast<double>(row));
      const Eigen::Vector3d ground(xy.x(), xy.y(), 0.0);
      hits.clear();
      for (int c = 0; c < nc; ++c) {
        const auto& cam = cams[static_cast<size_t>(c)];
        const auto px = fisheye_project(cam.intr, cam.pose.apply(ground));
        if (!px) continue;
        if (px->x() < 0.0 || px->x() > cam.intr.width - 1 || px->y() < 0.0 ||
            px->y() > cam.intr.height - 1)
          continue;
        hits.push_back({c, *px, (ground - centers[static_cast<size_t>(c)]).norm()});
      }

      const size_t base = (static_cast<size_t>(row) * g.bev_w + col) * g.n_cams;
      if (hits.empty()) continue;
      if (cfg.fusion == IpmFusion::kNearest) {
        const auto best = std::min_element(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
          if (a.dist != b.dist) return a.dist < b.dist;
          return a.cam < b.cam;
        });
        g.cam[base] = static_cast<uint8_t>(best->cam);
        g.src_u[base] = best->px.x();
        g.src_v[base] = best->px.y();
        g.weight[base] = 1.0;
      } else {
        double norm = 0.0;
        for (const Hit& h : hits) norm += 1.0 / h.dist;
        for (size_t s = 0; s < hits.size(); ++s) {
          g.cam[base + s] = static_cast<uint8_t>(hits[s].cam);
          g.src_u[base + s] = hits[s].px.x();
          g.src_v[base + s] = hits[s].px.y();
          g.weight[base + s] = (1.0 / hits[s].dist) / norm;
        }
      }
    }
  });
}

void build_stencils(IpmGrid& g, const std::vector<FisheyeCamera>& cams) {
  g.stencil.assign(cams.size(), {});
  struct Entry {
    int64_t src;
    int32_t bev;
    double w;
  };
  std::vector<std::vector<Entry>> entries(cams.size());

  const size_t npx = static_cast<size_t>(g.bev_w) * g.bev_h;
  for (size_t p = 0; p < npx; ++p) {
    for (int s = 0; s < g.n_cams; ++s) {
      const size_t slot = p * g.n_cams + static_cast<size_t>(s);
      if (g.cam[slot] == IpmGrid::kNoCam) continue;
      const auto& intr = cams[g.cam[slot]].intr;
      // Tap layout must match Image::sample_bilinear for the same (u, v).
      const auto taps = Image::taps_for(intr.width, intr.height, g.src_u[slot], g.src_v[slot]);
      for (int t = 0; t < 4; ++t) {
        if (taps.w[t] == 0.0) continue;
        entries[g.cam[slot]].push_back(
            {static_cast<int64_t>(taps.y[t]) * intr.width + taps.x[t], static_cast<int32_t>(p),
             g.weight[slot] * taps.w[t]});
      }
    }
  }

  for (size_t c = 0; c < cams.size(); ++c) {
    auto& st = g.stencil[c];
    st.src_w = cams[c].intr.width;
    st.src_h = cams[c].intr.height;
    auto& ent = entries[c];
    // Group by source pixel, preserving BEV scan order inside each group so
    // the backward reduction order is fixed.
    std::stable_sort(ent.begin(), ent.end(),
                     [](const Entry& a, const Entry& b) { return a.src < b.src; });
    const size_t nsrc = static_cast<size_t>(st.src_w) * st.src_h;
    st.offset.assign(nsrc + 1, 0);
    st.bev.resize(ent.size());
    st.w.resize(ent.size());
    for (size_t i = 0; i < ent.size(); ++i) {
      ++st.offset[static_cast<size_t>(ent[i].src) + 1];
      st.bev[i] = ent[i].bev;
      st.w[i] = ent[i].w;
    }
    for (size_t i = 1; i <= nsrc; ++i) st.offset[i] += st.offset[i - 1];
  }
}

void build_ground_maps(IpmGrid& g, const std::vector<FisheyeCamera>& cams,
                       const IpmConfig& cfg) {
  g.ground.clear();
  for (const auto& cam : cams) {
    Image map(cam.intr.height, cam.intr.width, 3);
    const Eigen::Vector3d center = cam.pose.center();
    const Eigen::Quaterniond q_inv = cam.pose.q.conjugate();
    parallel_for(cam.intr.height, [&](int64_t y) {
      for (int x = 0; x < cam.intr.width; ++x) {
        Eigen::Vector3d ray;
        try {
          ray = fisheye_unproject(cam.intr, Eigen::Vector2d(x, static_cast<double>(y)));
        } catch (const NumericalError&) {
          continue;  // pixel outside the invertible range: no ground hit
        }
        const Eigen::Vector3d dir = q_inv * ray;
        if (center.z() <= 0.0 || dir.z() >= -1e-9) continue;
        const double t = -center.z() / dir.z();
        const Eigen::Vector3d hit = center + t * dir;
        const Eigen::Vector2d uv = cfg.vehicle_to_bev(hit.x(), hit.y());
        if (uv.x() < 0.0 || uv.x() > g.bev_w - 1 || uv.y() < 0.0 || uv.y() > g.bev_h - 1)
          continue;
        map.at(0, static_cast<int>(y), x) = uv.x();
        map.at(1, static_cast<int>(y), x) = uv.y();
        map.at(2, static_cast<int>(y), x) = 1.0;
      }
    });
    g.ground.push_back(std::move(map));
  }
}

}  // namespace

IpmGrid build_ipm_grid(const std::vector<FisheyeCamera>& cams, const IpmConfig& cfg) {
  if (cams.empty()) throw DataError("build_ipm_grid: no cameras");
  if (cams.size() >= IpmGrid::kNoCam) throw DataError("build_ipm_grid: too many cameras");
  if (cfg.bev_width <= 0 || cfg.bev_height <= 0 || cfg.px_per_meter <= 0)
    throw DataError("build_ipm_grid: invalid BEV configuration");

  IpmGrid g;
  g.bev_w = cfg.bev_width;
  g.bev_h = cfg.bev_height;
  g.n_cams = static_cast<int>(cams.size());
  g.cam.assign(g.slots(), IpmGrid::kNoCam);
  g.src_u.assign(g.slots(), 0.0);
  g.src_v.assign(g.slots(), 0.0);
  g.weight.assign(g.slots(), 0.0);

  compute_taps(g, cams, cfg);
  build_stencils(g, cams);
  build_ground_maps(g, cams, cfg);
  return g;
}

Image warp_ipm(const IpmGrid& grid, const std::vector<Image>& cam_images) {
  if (static_cast<int>(cam_images.size()) != grid.n_cams)
    throw DataError("warp_ipm: camera image count does not match the grid");
  const int channels = cam_images.empty() ? 0 : cam_images[0].channels();
  for (int c = 0; c < grid.n_cams; ++c) {
    const auto& st = grid.stencil[static_cast<size_t>(c)];
    if (cam_images[static_cast<size_t>(c)].width() != st.src_w ||
        cam_images[static_cast<size_t>(c)].height() != st.src_h ||
        cam_images[static_cast<size_t>(c)].channels() != channels)
      throw DataError("warp_ipm: camera image shape does not match the grid");
  }

  Image bev(grid.bev_h, grid.bev_w, channels);
  parallel_for(grid.bev_h, [&](int64_t row) {
    for (int col = 0; col < grid.bev_w; ++col) {
      const size_t p = static_cast<size_t>(row) * grid.bev_w + col;
      for (int s = 0; s < grid.n_cams; ++s) {
        const size_t slot = p * grid.n_cams + static_cast<size_t>(s);
        if (grid.cam[slot] == IpmGrid::kNoCam) continue;
        const Image& src = cam_images[grid.cam[slot]];
        for (int ch = 0; ch < channels; ++ch)
          bev.at(ch, static_cast<int>(row), col) +=
              grid.weight[slot] * src.sample_bilinear(ch, grid.src_u[slot], grid.src_v[slot]);
      }
    }
  });
  return bev;
}

std::vector<Image> warp_ipm_backward(const IpmGrid& grid, const Image& d_bev) {
  if (d_bev.width() != grid.bev_w || d_bev.height() != grid.bev_h)
    throw DataError("warp_ipm_backward: BEV gradient shape mismatch");
  const int channels = d_bev.channels();

  std::vector<Image> out;
  for (int c = 0; c < grid.n_cams; ++c) {
    const auto& st = grid.stencil[static_cast<size_t>(c)];
    Image grad(st.src_h, st.src_w, channels);
    parallel_for(static_cast<int64_t>(st.src_h) * st.src_w, [&](int64_t src) {
      for (int64_t i = st.offset[static_cast<size_t>(src)];
           i < st.offset[static_cast<size_t>(src) + 1]; ++i) {
        const int32_t p = st.bev[static_cast<size_t>(i)];
        const double w = st.w[static_cast<size_t>(i)];
        for (int ch = 0; ch < channels; ++ch)
          grad.plane(ch)[src] += w * d_bev.plane(ch)[p];
      }
    });
    out.push_back(std::move(grad));
  }
  return out;
}

std::vector<Image> backproject_bev(const IpmGrid& grid, const Image& bev_field) {
  if (bev_field.width() != grid.bev_w || bev_field.height() != grid.bev_h ||
      bev_field.channels() != 1)
    throw DataError("backproject_bev: field shape mismatch");

  std::vector<Image> out;
  for (const Image& map : grid.ground) {
    Image w(map.height(), map.width(), 1);
    parallel_for(map.height(), [&](int64_t y) {
      for (int x = 0; x < map.width(); ++x) {
        if (map.at(2, static_cast<int>(y), x) == 0.0) continue;
        w.at(0, static_cast<int>(y), x) = bev_field.sample_bilinear(
            0, map.at(0, static_cast<int>(y), x), map.at(1, static_cast<int>(y), x));
      }
    });
    out.push_back(std::move(w));
  }
  return out;
}

Image backproject_bev_backward(const IpmGrid& grid, const std::vector<Image>& d_cam_fields) {
  if (d_cam_fields.size() != grid.ground.size())
    throw DataError("backproject_bev_backward: camera count mismatch");
  Image d_bev(grid.bev_h, grid.bev_w, 1);
  // Serial scatter in fixed order; only exercised by the stop-gradient
  // removal diagnostics, not by training.
  for (size_t c = 0; c < grid.ground.size(); ++c) {
    const Image& map = grid.ground[c];
    const Image& g = d_cam_fields[c];
    if (g.height() != map.height() || g.width() != map.width() || g.channels() != 1)
      throw DataError("backproject_bev_backward: field shape mismatch");
    for (int y = 0; y < map.height(); ++y)
      for (int x = 0; x < map.width(); ++x) {
        if (map.at(2, y, x) == 0.0) continue;
        const double gv = g.at(0, y, x);
        if (gv == 0.0) continue;
        const auto taps = d_bev.bilinear_taps(map.at(0, y, x), map.at(1, y, x));
        for (int t = 0; t < 4; ++t) d_bev.at(0, taps.y[t], taps.x[t]) += taps.w[t] * gv;
      }
  }
  return d_bev;
}

void save_ipm_grid(const std::string& path, const IpmGrid& grid) {
  BinaryWriter w(path);
  w.magic("PGIP");
  w.u32(1);
  w.u32(static_cast<uint32_t>(grid.bev_w));
  w.u32(static_cast<uint32_t>(grid.bev_h));
  w.u32(static_cast<uint32_t>(grid.n_cams));
  for (size_t i = 0; i < grid.slots(); ++i) {
    w.u8(grid.cam[i]);
    w.f32(static_cast<float>(grid.src_u[i]));
    w.f32(static_cast<float>(grid.src_v[i]));
    w.f32(static_cast<float>(grid.weight[i]));
  }
  w.close();
}

IpmGrid load_ipm_grid(const std::string& path, const std::vector<FisheyeCamera>& cams,
                      const IpmConfig& cfg) {
  BinaryReader r(path);
  r.expect_magic("PGIP", "IPM grid");
  if (r.u32() != 1) throw DataError("unsupported IPM grid version: " + path);
  IpmGrid g;
  g.bev_w = static_cast<int>(r.u32());
  g.bev_h = static_cast<int>(r.u32());
  g.n_cams = static_cast<int>(r.u32());
  if (g.bev_w <= 0 || g.bev_h <= 0 || g.bev_w > 1 << 16 || g.bev_h > 1 << 16)
    throw DataError("implausible IPM grid dimensions: " + path);
  if (g.n_cams != static_cast<int>(cams.size()))
    throw DataError("IPM grid camera count does not match the calibration: " + path);

  g.cam.resize(g.slots());
  g.src_u.resize(g.slots());
  g.src_v.resize(g.slots());
  g.weight.resize(g.slots());
  for (size_t i = 0; i < g.slots(); ++i) {
    g.cam[i] = r.u8();
    g.src_u[i] = r.f32();
    g.src_v[i] = r.f32();
    g.weight[i] = r.f32();
    if (g.cam[i] != IpmGrid::kNoCam && g.cam[i] >= g.n_cams)
      throw DataError("IPM grid references a camera outside the calibration: " + path);
  }
  if (!r.at_eof()) throw DataError("trailing bytes in IPM grid: " + path);

  build_stencils(g, cams);
  build_ground_maps(g, cams, cfg);
  return g;
}

}  // namespace parkgauss
