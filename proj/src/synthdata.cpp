#include "parkgauss/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "parkgauss/image_io.hpp"
#include "parkgauss/parallel.hpp"
#include "parkgauss/prng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace parkgauss {
namespace {

Eigen::Vector2d row_dir(const SlotRow& row) {
  const double rad = row.orientation_deg * M_PI / 180.0;
  return {std::cos(rad), std::sin(rad)};
}

// --- procedural texture ----------------------------------------------------

double hash01(int64_t ix, int64_t iy, uint64_t seed) {
  uint64_t h = seed + 0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(ix + 0x7fffffff);
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  h += 0x94d049bb133111ebULL * static_cast<uint64_t>(iy + 0x7fffffff);
  h = (h ^ (h >> 27)) * 0x2545f4914f6cdd1dULL;
  h ^= h >> 31;
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(double x, double y, uint64_t seed) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto ix = static_cast<int64_t>(fx), iy = static_cast<int64_t>(fy);
  const double tx = smooth(x - fx), ty = smooth(y - fy);
  const double v00 = hash01(ix, iy, seed), v01 = hash01(ix + 1, iy, seed);
  const double v10 = hash01(ix, iy + 1, seed), v11 = hash01(ix + 1, iy + 1, seed);
  return (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
}

// --- painted floor ----------------------------------------------------------

struct PaintSeg {
  Eigen::Vector2d a, dir;  // unit direction
  double len = 0, half_w = 0;
  double min_x = 0, max_x = 0, min_y = 0, max_y = 0;  // inflated bounds
};

std::vector<PaintSeg> paint_segments(const ParkingLayout& layout) {
  std::vector<PaintSeg> segs;
  auto add = [&](const Eigen::Vector2d& a, const Eigen::Vector2d& b, double half_w) {
    PaintSeg s;
    s.a = a;
    const Eigen::Vector2d d = b - a;
    s.len = d.norm();
    s.dir = s.len > 0 ? Eigen::Vector2d(d / s.len) : Eigen::Vector2d(1, 0);
    s.half_w = half_w;
    s.min_x = std::min(a.x(), b.x()) - half_w;
    s.max_x = std::max(a.x(), b.x()) + half_w;
    s.min_y = std::min(a.y(), b.y()) - half_w;
    s.max_y = std::max(a.y(), b.y()) + half_w;
    segs.push_back(s);
  };
  const auto slots = layout_slots(layout);
  size_t i = 0;
  for (const auto& row : layout.rows) {
    const double hw = 0.5 * row.line_width;
    for (int k = 0; k < row.count; ++k, ++i) {
      const SlotShape& s = slots[i];
      add(s.p1, s.p2, hw);  // entrance line
      add(s.p1, s.r1, hw);  // separators
      add(s.p2, s.r2, hw);
      add(s.r1, s.r2, hw);  // rear line
    }
  }
  return segs;
}

bool on_marking(const std::vector<PaintSeg>& segs, double x, double y) {
  for (const auto& s : segs) {
    if (x < s.min_x || x > s.max_x || y < s.min_y || y > s.max_y) continue;
    const Eigen::Vector2d p(x, y);
    const double t = std::clamp((p - s.a).dot(s.dir), 0.0, s.len);
    if ((p - (s.a + t * s.dir)).squaredNorm() <= s.half_w * s.half_w) return true;
  }
  return false;
}

Eigen::Vector3d shade_ground(const std::vector<PaintSeg>& segs, double x, double y,
                             uint64_t seed) {
  if (on_marking(segs, x, y)) {
    const double wear = 1.0 - 0.08 * value_noise(3.1 * x, 3.1 * y, seed ^ 0x51a7);
    return {0.86 * wear, 0.85 * wear, 0.80 * wear};
  }
  const double n = 0.6 * value_noise(0.61 * x, 0.61 * y, seed) +
                   0.4 * value_noise(2.7 * x, 2.7 * y, seed ^ 0xa5f0);
  const double a = 0.20 + 0.13 * n;
  return {0.98 * a, a, 1.02 * a};
}

// --- ray casting ------------------------------------------------------------

struct BoxHit {
  double t = std::numeric_limits<double>::infinity();
  int axis = 0;
  double sign = 1.0;  // outward normal = sign * e_axis
};

bool intersect_box(const ObstacleBox& b, const Eigen::Vector3d& o,
                   const Eigen::Vector3d& d, BoxHit* hit) {
  double t0 = 1e-6, t1 = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 1.0;
  for (int a = 0; a < 3; ++a) {
    if (std::fabs(d[a]) < 1e-15) {
      if (o[a] < b.lo[a] || o[a] > b.hi[a]) return false;
      continue;
    }
    double ta = (b.lo[a] - o[a]) / d[a];
    double tb = (b.hi[a] - o[a]) / d[a];
    double s = -1.0;  // entering through the low face
    if (ta > tb) {
      std::swap(ta, tb);
      s = 1.0;
    }
    if (ta > t0) {
      t0 = ta;
      axis = a;
      sign = s;
    }
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  if (axis < 0) return false;  // origin inside the box
  hit->t = t0;
  hit->axis = axis;
  hit->sign = sign;
  return true;
}

Eigen::Vector3d shade_ray(const ParkingLayout& layout, const std::vector<PaintSeg>& segs,
                          const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                          uint64_t seed) {
  double t_best = std::numeric_limits<double>::infinity();
  Eigen::Vector3d color(0.02, 0.02, 0.025);  // escaped ray

  if (d.z() < -1e-12) {
    const double t = -o.z() / d.z();
    if (t > 1e-6 && t < t_best) {
      t_best = t;
      const Eigen::Vector3d p = o + t * d;
      color = shade_ground(segs, p.x(), p.y(), seed);
    }
  } else if (d.z() > 1e-12) {
    const double t = (layout.ceiling_z - o.z()) / d.z();
    if (t > 1e-6 && t < t_best) {
      t_best = t;
      const Eigen::Vector3d p = o + t * d;
      const double n = value_noise(0.8 * p.x(), 0.8 * p.y(), seed ^ 0xce11);
      color = Eigen::Vector3d::Constant(0.14 + 0.05 * n);
    }
  }

  static const Eigen::Vector3d kLight = Eigen::Vector3d(0.25, 0.15, 0.955).normalized();
  for (const auto& b : layout.boxes) {
    BoxHit hit;
    if (!intersect_box(b, o, d, &hit) || hit.t >= t_best) continue;
    t_best = hit.t;
    const Eigen::Vector3d p = o + hit.t * d;
    Eigen::Vector3d n = Eigen::Vector3d::Zero();
    n[hit.axis] = hit.sign;
    // face-local coordinates drive the texture so vertical faces vary too
    const int u_axis = (hit.axis + 1) % 3, v_axis = (hit.axis + 2) % 3;
    const double tex = value_noise(1.6 * p[u_axis], 1.6 * p[v_axis], seed ^ 0xb0c5);
    const double albedo = 0.40 + 0.10 * tex;
    const double lambert = 0.45 + 0.55 * std::max(0.0, n.dot(kLight));
    const double g = albedo * lambert;
    color = {0.96 * g, g, 1.04 * g};
  }
  return color;
}

struct RayTable {
  int ss = 1;
  std::vector<Eigen::Vector3d> dirs;  // camera frame, per pixel per subsample
  std::vector<uint8_t> ok;
};

RayTable build_ray_table(const FisheyeCamera& cam, int ss) {
  const int w = cam.intr.width, h = cam.intr.height;
  RayTable t;
  t.ss = ss;
  t.dirs.assign(static_cast<size_t>(w) * h * ss * ss, Eigen::Vector3d::Zero());
  t.ok.assign(t.dirs.size(), 0);
  parallel_for(h, [&](int64_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < w; ++x) {
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double px = x + (sx + 0.5) / ss - 0.5;
          const double py = y + (sy + 0.5) / ss - 0.5;
          const size_t i = ((static_cast<size_t>(y) * w + x) * ss + sy) * ss + sx;
          try {
            t.dirs[i] = fisheye_unproject(cam.intr, {px, py});
            t.ok[i] = 1;
          } catch (const NumericalError&) {
            // beyond the validity cone: stays black
          }
        }
      }
    }
  });
  return t;
}

Image render_with_table(const ParkingLayout& layout, const std::vector<PaintSeg>& segs,
                        const VehiclePose& pose, const FisheyeCamera& cam,
                        const RayTable& rays, uint64_t seed) {
  const int w = cam.intr.width, h = cam.intr.height;
  const Pose c2w = (cam.pose * world_to_vehicle(pose)).inverse();
  const Eigen::Vector3d origin = c2w.t;
  const Eigen::Quaterniond rot = c2w.q;
  const int ss = rays.ss;
  const double inv_samples = 1.0 / (ss * ss);

  Image img(h, w, 3);
  parallel_for(h, [&](int64_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < w; ++x) {
      Eigen::Vector3d acc = Eigen::Vector3d::Zero();
      for (int s = 0; s < ss * ss; ++s) {
        const size_t i = (static_cast<size_t>(y) * w + x) * ss * ss + s;
        if (!rays.ok[i]) continue;
        acc += shade_ray(layout, segs, origin, rot * rays.dirs[i], seed);
      }
      acc *= inv_samples * layout.lighting;
      for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = std::clamp(acc[ch], 0.0, 1.0);
    }
  });
  return img;
}

// --- geometry helpers -------------------------------------------------------

struct Rect2 {
  Eigen::Vector2d c[4];
};

Rect2 slot_rect(const SlotShape& s) { return {{s.p1, s.p2, s.r2, s.r1}}; }

// Separating-axis test for convex quads, with a shrink so slots sharing a
// painted line (adjacent in a row, back to back rows) do not count as
// overlapping.
bool rects_overlap(const Rect2& a, const Rect2& b, double shrink) {
  const Rect2* rs[2] = {&a, &b};
  for (const Rect2* r : rs) {
    for (int e = 0; e < 4; ++e) {
      const Eigen::Vector2d edge = r->c[(e + 1) % 4] - r->c[e];
      const Eigen::Vector2d ax(-edge.y(), edge.x());
      double amin = std::numeric_limits<double>::infinity(), amax = -amin;
      double bmin = amin, bmax = amax;
      for (int i = 0; i < 4; ++i) {
        amin = std::min(amin, ax.dot(a.c[i]));
        amax = std::max(amax, ax.dot(a.c[i]));
        bmin = std::min(bmin, ax.dot(b.c[i]));
        bmax = std::max(bmax, ax.dot(b.c[i]));
      }
      const double margin = shrink * ax.norm();
      if (amax - margin <= bmin + margin || bmax - margin <= amin + margin) return false;
    }
  }
  return true;
}

bool segment_hits_box_2d(const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                         const ObstacleBox& box) {
  // 2D slab test on the footprint
  double t0 = 0.0, t1 = 1.0;
  const Eigen::Vector2d d = b - a;
  const double lo[2] = {box.lo.x(), box.lo.y()};
  const double hi[2] = {box.hi.x(), box.hi.y()};
  for (int ax = 0; ax < 2; ++ax) {
    if (std::fabs(d[ax]) < 1e-15) {
      if (a[ax] < lo[ax] || a[ax] > hi[ax]) return false;
      continue;
    }
    double ta = (lo[ax] - a[ax]) / d[ax];
    double tb = (hi[ax] - a[ax]) / d[ax];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  return true;
}

std::string frame_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06d.png", id);
  return buf;
}

json load_json_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(std::string("cannot open ") + what + ": " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed ") + what + " (" + path + "): " + e.what());
  }
}

}  // namespace

std::vector<SlotShape> layout_slots(const ParkingLayout& layout) {
  std::vector<SlotShape> out;
  for (const auto& row : layout.rows) {
    const Eigen::Vector2d dir = row_dir(row);
    const Eigen::Vector2d n(-dir.y(), dir.x());  // depth side: left of the row
    for (int k = 0; k < row.count; ++k) {
      SlotShape s;
      s.p1 = row.origin + k * row.slot_width * dir;
      s.p2 = s.p1 + row.slot_width * dir;
      s.r1 = s.p1 + row.slot_depth * n;
      s.r2 = s.p2 + row.slot_depth * n;
      double deg = std::atan2(n.y(), n.x()) * 180.0 / M_PI;
      if (deg < 0) deg += 360.0;
      s.direction_deg = deg < 360.0 ? deg : 0.0;
      s.type = row.type;
      out.push_back(s);
    }
  }
  return out;
}

void ParkingLayout::validate() const {
  if (!(max_x > min_x) || !(max_y > min_y)) throw DataError("empty lot extent");
  if (!(ceiling_z > 0)) throw DataError("ceiling height must be positive");
  if (!(lighting >= 0)) throw DataError("lighting level must be non-negative");
  for (size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.count <= 0) throw DataError("slot row " + std::to_string(r) + ": empty");
    if (!(row.slot_width > 0) || !(row.slot_depth > 0) || !(row.line_width > 0))
      throw DataError("slot row " + std::to_string(r) + ": non-positive dimensions");
    if (row.type != "perpendicular" && row.type != "parallel")
      throw DataError("slot row " + std::to_string(r) + ": unknown type '" + row.type + "'");
  }
  for (const auto& b : boxes)
    if (!(b.hi.x() > b.lo.x()) || !(b.hi.y() > b.lo.y()) || !(b.hi.z() > b.lo.z()))
      throw DataError("obstacle box with non-positive extent");

  const auto slots = layout_slots(*this);
  const double pad = 0.0;
  for (size_t i = 0; i < slots.size(); ++i) {
    const Rect2 r = slot_rect(slots[i]);
    for (int c = 0; c < 4; ++c) {
      if (r.c[c].x() < min_x - pad || r.c[c].x() > max_x + pad ||
          r.c[c].y() < min_y - pad || r.c[c].y() > max_y + pad)
        throw DataError("slot " + std::to_string(i) + " markings leave the lot extent");
    }
  }
  std::string overlaps;
  for (size_t i = 0; i < slots.size(); ++i) {
    for (size_t j = i + 1; j < slots.size(); ++j) {
      if (rects_overlap(slot_rect(slots[i]), slot_rect(slots[j]), 1e-6)) {
        if (!overlaps.empty()) overlaps += ", ";
        overlaps += std::to_string(i) + "/" + std::to_string(j);
      }
    }
  }
  if (!overlaps.empty()) throw DataError("overlapping slots: " + overlaps);
}

Pose world_to_vehicle(const VehiclePose& pose) {
  Pose p;
  p.q = Eigen::Quaterniond(Eigen::AngleAxisd(-pose.yaw_rad, Eigen::Vector3d::UnitZ()));
  p.t = -(p.q * Eigen::Vector3d(pose.x, pose.y, 0.0));
  return p;
}

ParkingLayout default_layout() {
  ParkingLayout lot;
  lot.min_x = -12.0;
  lot.max_x = 12.0;
  lot.min_y = -9.0;
  lot.max_y = 9.0;
  lot.ceiling_z = 3.0;
  lot.texture_seed = 7;
  lot.lighting = 0.85;

  SlotRow north;  // faces the corridor from y = +3.2
  north.origin = {-7.8, 3.2};
  north.orientation_deg = 0.0;
  SlotRow south;  // mirrored, entrance line runs -x so depth points to -y
  south.origin = {7.8, -3.2};
  south.orientation_deg = 180.0;
  lot.rows = {north, south};

  const double wz = 3.0, th = 0.3;
  lot.boxes = {
      {{-12.0 - th, -9.0 - th, 0}, {12.0 + th, -9.0, wz}},   // south wall
      {{-12.0 - th, 9.0, 0}, {12.0 + th, 9.0 + th, wz}},     // north wall
      {{-12.0 - th, -9.0 - th, 0}, {-12.0, 9.0 + th, wz}},   // west wall
      {{12.0, -9.0 - th, 0}, {12.0 + th, 9.0 + th, wz}},     // east wall
      {{-9.4, 3.2, 0}, {-9.0, 3.6, wz}},                     // pillars at row ends
      {{9.0, -3.6, 0}, {9.4, -3.2, wz}},
  };
  return lot;
}

std::vector<VehiclePose> default_trajectory(int frames) {
  if (frames <= 0) throw UsageError("trajectory needs at least one frame");
  std::vector<VehiclePose> out;
  out.reserve(frames);
  double x = -8.5, y = 0.4, yaw = 0.0;
  const double step = 0.22;  // 2.2 m/s at 10 Hz
  const int straight = (frames * 5) / 8;
  for (int i = 0; i < frames; ++i) {
    out.push_back({x, y, yaw, i * 0.1});
    if (i >= straight) yaw += 1.6 * M_PI / 180.0;
    x += step * std::cos(yaw);
    y += step * std::sin(yaw);
  }
  return out;
}

Eigen::Vector3d ground_color(const ParkingLayout& layout, double x, double y,
                             uint64_t noise_seed) {
  return shade_ground(paint_segments(layout), x, y, noise_seed);
}

Image render_view(const ParkingLayout& layout, const VehiclePose& pose,
                  const FisheyeCamera& cam, uint64_t noise_seed,
                  const RenderOptions& opt) {
  if (opt.supersample < 1 || opt.supersample > 8)
    throw UsageError("supersample factor out of range");
  const auto segs = paint_segments(layout);
  const RayTable rays = build_ray_table(cam, opt.supersample);
  return render_with_table(layout, segs, pose, cam, rays, noise_seed);
}

std::vector<SlotAnnotation> frame_annotations(const ParkingLayout& layout,
                                              const VehiclePose& pose,
                                              const IpmConfig& ipm,
                                              std::vector<int>* visible_slots) {
  const auto slots = layout_slots(layout);
  const Eigen::Vector2d c(pose.x, pose.y);
  const Eigen::Rotation2Dd to_vehicle(-pose.yaw_rad);
  std::vector<SlotAnnotation> out;
  if (visible_slots) visible_slots->clear();

  for (size_t i = 0; i < slots.size(); ++i) {
    const SlotShape& s = slots[i];
    bool ok = true;
    Eigen::Vector2d bev[2];
    const Eigen::Vector2d pts[2] = {s.p1, s.p2};
    for (int k = 0; k < 2 && ok; ++k) {
      const Eigen::Vector2d v = to_vehicle * (pts[k] - c);
      bev[k] = ipm.vehicle_to_bev(v.x(), v.y());
      if (bev[k].x() < 0 || bev[k].x() > ipm.bev_width - 1 || bev[k].y() < 0 ||
          bev[k].y() > ipm.bev_height - 1)
        ok = false;
      // line of sight from the vehicle center, blocked by anything tall
      for (const auto& box : layout.boxes) {
        if (!ok) break;
        if (box.hi.z() - box.lo.z() < 0.5) continue;
        if (segment_hits_box_2d(c, pts[k], box)) ok = false;
      }
    }
    if (!ok) continue;

    const double rad = s.direction_deg * M_PI / 180.0;
    const Eigen::Vector2d dv = to_vehicle * Eigen::Vector2d(std::cos(rad), std::sin(rad));
    // vehicle (x fwd, y left) -> BEV pixel axes: du = -y, dv = -x
    double deg = std::atan2(-dv.x(), -dv.y()) * 180.0 / M_PI;
    if (deg < 0) deg += 360.0;
    if (deg >= 360.0) deg = 0.0;

    SlotAnnotation a;
    a.p1_u = bev[0].x();
    a.p1_v = bev[0].y();
    a.p2_u = bev[1].x();
    a.p2_v = bev[1].y();
    a.angle_deg = deg;
    a.type = s.type;
    out.push_back(a);
    if (visible_slots) visible_slots->push_back(static_cast<int>(i));
  }
  return out;
}

void generate_dataset(const std::string& dir, const ParkingLayout& layout,
                      const std::vector<VehiclePose>& trajectory,
                      const std::vector<FisheyeCamera>& cams, uint64_t seed,
                      const GenerateOptions& opt) {
  layout.validate();
  if (trajectory.empty()) throw UsageError("empty trajectory");
  if (cams.empty()) throw UsageError("no cameras");
  {
    std::set<std::string> names;
    for (const auto& cam : cams)
      if (!names.insert(cam.name).second)
        throw UsageError("duplicate camera name: " + cam.name);
  }
  for (size_t i = 0; i < trajectory.size(); ++i) {
    const auto& p = trajectory[i];
    if (p.x < layout.min_x || p.x > layout.max_x || p.y < layout.min_y || p.y > layout.max_y)
      throw DataError("trajectory pose " + std::to_string(i) + " leaves the lot");
    if (i > 0 && !(p.timestamp > trajectory[i - 1].timestamp))
      throw DataError("trajectory timestamps must increase");
  }

  fs::create_directories(dir);
  for (const auto& cam : cams) fs::create_directories(fs::path(dir) / cam.name);
  save_calibration((fs::path(dir) / "calib.json").string(), cams);

  {
    json traj;
    traj["frames"] = json::array();
    for (size_t i = 0; i < trajectory.size(); ++i) {
      const auto& p = trajectory[i];
      traj["frames"].push_back({{"frame", static_cast<int>(i)},
                                {"timestamp", p.timestamp},
                                {"x", p.x},
                                {"y", p.y},
                                {"yaw_rad", p.yaw_rad}});
    }
    std::ofstream out(fs::path(dir) / "trajectory.json", std::ios::binary);
    out << traj.dump(2) << "\n";
  }

  {
    const auto slots = layout_slots(layout);
    json doc;
    doc["ipm"] = {{"bev_width", opt.ipm.bev_width},
                  {"bev_height", opt.ipm.bev_height},
                  {"px_per_meter", opt.ipm.px_per_meter}};
    doc["world_slots"] = json::array();
    for (const auto& s : slots)
      doc["world_slots"].push_back({{"p1", {s.p1.x(), s.p1.y()}},
                                    {"p2", {s.p2.x(), s.p2.y()}},
                                    {"r1", {s.r1.x(), s.r1.y()}},
                                    {"r2", {s.r2.x(), s.r2.y()}},
                                    {"direction_deg", s.direction_deg},
                                    {"type", s.type}});
    doc["frames"] = json::array();
    for (size_t i = 0; i < trajectory.size(); ++i) {
      std::vector<int> vis;
      const auto annos = frame_annotations(layout, trajectory[i], opt.ipm, &vis);
      json fr;
      fr["frame"] = static_cast<int>(i);
      fr["slots"] = json::array();
      for (size_t k = 0; k < annos.size(); ++k) {
        const auto& a = annos[k];
        fr["slots"].push_back({{"slot", vis[k]},
                               {"p1", {a.p1_u, a.p1_v}},
                               {"p2", {a.p2_u, a.p2_v}},
                               {"angle_deg", a.angle_deg},
                               {"type", a.type}});
      }
      doc["frames"].push_back(std::move(fr));
    }
    std::ofstream out(fs::path(dir) / "slots.json", std::ios::binary);
    out << doc.dump(2) << "\n";
  }

  const auto segs = paint_segments(layout);
  std::vector<RayTable> rays;
  rays.reserve(cams.size());
  for (const auto& cam : cams) rays.push_back(build_ray_table(cam, opt.render.supersample));
  const uint64_t noise_seed = mix_seed(seed, layout.texture_seed);

  parallel_for_dynamic(static_cast<int64_t>(trajectory.size()), [&](int64_t f) {
    for (size_t c = 0; c < cams.size(); ++c) {
      const Image img = render_with_table(layout, segs, trajectory[static_cast<size_t>(f)],
                                          cams[c], rays[c], noise_seed);
      write_png((fs::path(dir) / cams[c].name / frame_name(static_cast<int>(f))).string(),
                img);
    }
  });
}

Dataset load_dataset(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir);
  Dataset ds;
  ds.cameras = load_calibration((fs::path(dir) / "calib.json").string());

  const json traj = load_json_file((fs::path(dir) / "trajectory.json").string(),
                                   "trajectory file");
  try {
    const auto& frames = traj.at("frames");
    for (size_t i = 0; i < frames.size(); ++i) {
      const auto& f = frames[i];
      if (f.at("frame").get<int>() != static_cast<int>(i))
        throw DataError("trajectory frames must be contiguous from 0");
      DatasetFrame df;
      df.id = static_cast<int>(i);
      df.pose.x = f.at("x").get<double>();
      df.pose.y = f.at("y").get<double>();
      df.pose.yaw_rad = f.at("yaw_rad").get<double>();
      df.pose.timestamp = f.at("timestamp").get<double>();
      if (i > 0 && !(df.pose.timestamp > ds.frames.back().pose.timestamp))
        throw DataError("trajectory timestamps must increase");
      ds.frames.push_back(std::move(df));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed trajectory file: ") + e.what());
  }
  if (ds.frames.empty()) throw DataError("trajectory holds no frames");

  const json slots = load_json_file((fs::path(dir) / "slots.json").string(), "slot file");
  try {
    const auto& ipm = slots.at("ipm");
    ds.ipm.bev_width = ipm.at("bev_width").get<int>();
    ds.ipm.bev_height = ipm.at("bev_height").get<int>();
    ds.ipm.px_per_meter = ipm.at("px_per_meter").get<double>();
    ds.annotations.assign(ds.frames.size(), {});
    std::vector<bool> seen(ds.frames.size(), false);
    for (const auto& fr : slots.at("frames")) {
      const int id = fr.at("frame").get<int>();
      if (id < 0 || id >= static_cast<int>(ds.frames.size()))
        throw DataError("slot annotations reference unknown frame " + std::to_string(id));
      seen[static_cast<size_t>(id)] = true;
      for (const auto& s : fr.at("slots")) {
        SlotAnnotation a;
        a.p1_u = s.at("p1")[0].get<double>();
        a.p1_v = s.at("p1")[1].get<double>();
        a.p2_u = s.at("p2")[0].get<double>();
        a.p2_v = s.at("p2")[1].get<double>();
        a.angle_deg = s.at("angle_deg").get<double>();
        a.type = s.value("type", "perpendicular");
        ds.annotations[static_cast<size_t>(id)].push_back(a);
        ds.frames[static_cast<size_t>(id)].visible_slots.push_back(s.value("slot", -1));
      }
    }
    for (size_t i = 0; i < seen.size(); ++i)
      if (!seen[i])
        throw DataError("slot annotations missing for frame " + std::to_string(i));
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed slot file: ") + e.what());
  }

  for (const auto& cam : ds.cameras) {
    const fs::path folder = fs::path(dir) / cam.name;
    if (!fs::is_directory(folder)) throw DataError("missing camera folder: " + cam.name);
    size_t n_png = 0;
    for (const auto& e : fs::directory_iterator(folder))
      if (e.path().extension() == ".png") ++n_png;
    if (n_png != ds.frames.size())
      throw DataError("camera folder '" + cam.name + "' holds " + std::to_string(n_png) +
                      " images, expected " + std::to_string(ds.frames.size()));
  }
  for (auto& frame : ds.frames) {
    for (const auto& cam : ds.cameras) {
      const fs::path p = fs::path(dir) / cam.name / frame_name(frame.id);
      if (!fs::exists(p)) throw DataError("missing image file: " + p.string());
      frame.image_paths.push_back(p.string());
    }
  }

  for (int i = 0; i < static_cast<int>(ds.frames.size()); ++i) {
    if (i % 10 == 0)
      ds.eval_indices.push_back(i);
    else
      ds.train_indices.push_back(i);
  }
  return ds;
}

}  // namespace parkgauss
