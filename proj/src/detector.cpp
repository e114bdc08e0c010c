#include "parkgauss/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "parkgauss/image_io.hpp"
#include "parkgauss/parallel.hpp"

namespace parkgauss {

namespace {

constexpr int kT = TemplateBank::kSize;          // template side
constexpr int kHalf = kT / 2;                    // 4
constexpr int kN = kT * kT;                      // 81 pixels per patch
constexpr double kNccEps = 1e-6;                 // keeps the NCC denominator away from 0

// Distance from p to the segment a + s*(b-a), s in [0,1].
double dist_to_segment(double pu, double pv, double au, double av, double bu, double bv) {
  const double du = bu - au, dv = bv - av;
  const double len2 = du * du + dv * dv;
  double s = len2 > 0 ? ((pu - au) * du + (pv - av) * dv) / len2 : 0.0;
  s = std::clamp(s, 0.0, 1.0);
  const double ru = pu - (au + s * du), rv = pv - (av + s * dv);
  return std::sqrt(ru * ru + rv * rv);
}

TemplateBank build_bank() {
  TemplateBank bank;
  const double arm = kHalf + 0.5;  // arms reach the patch border
  // Orientations k, k+4, k+8, k+12 are exact 90-degree rotations of each
  // other: the first quadrant uses cos/sin, the rest rotate those vectors,
  // so the bank symmetry holds bitwise.
  for (int k = 0; k < 4; ++k) {
    const double th = k * (2.0 * M_PI / TemplateBank::kOrientations);
    double du = std::cos(th), dv = std::sin(th);
    for (int q = 0; q < 4; ++q) {
      const int idx = k + 4 * q;
      bank.dir_u[idx] = du;
      bank.dir_v[idx] = dv;
      bank.angle_deg[idx] = idx * (360.0 / TemplateBank::kOrientations);
      const double nu = -dv, nv = du;  // rotate 90 degrees
      du = nu;
      dv = nv;
    }
  }
  for (int k = 0; k < TemplateBank::kOrientations; ++k) {
    bank.dir_u[TemplateBank::kOrientations + k] = bank.dir_u[k];
    bank.dir_v[TemplateBank::kOrientations + k] = bank.dir_v[k];
    bank.angle_deg[TemplateBank::kOrientations + k] = bank.angle_deg[k];
  }
  for (int idx = 0; idx < TemplateBank::kCount; ++idx) {
    const bool tee = idx >= TemplateBank::kOrientations;
    const double du = bank.dir_u[idx], dv = bank.dir_v[idx];
    const double qu = -dv, qv = du;  // perpendicular arm direction
    double* p = bank.patch[idx];
    for (int v = 0; v < kT; ++v) {
      for (int u = 0; u < kT; ++u) {
        const double pu = u - kHalf, pv = v - kHalf;
        // L: two half-rays; T: one half-ray plus the full crossbar.
        const double d_stem = dist_to_segment(pu, pv, 0, 0, arm * du, arm * dv);
        const double d_bar = tee ? dist_to_segment(pu, pv, -arm * qu, -arm * qv, arm * qu, arm * qv)
                                 : dist_to_segment(pu, pv, 0, 0, arm * qu, arm * qv);
        const double d = std::min(d_stem, d_bar);
        p[v * kT + u] = std::clamp(1.5 - d, 0.0, 1.0);  // ~2 px wide soft line
      }
    }
    double mean = std::accumulate(p, p + kN, 0.0) / kN;
    double norm2 = 0;
    for (int i = 0; i < kN; ++i) {
      p[i] -= mean;
      norm2 += p[i] * p[i];
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (int i = 0; i < kN; ++i) p[i] *= inv;
  }
  return bank;
}

struct CellWindow {
  double w[kN];
  double mean;
  double denom;  // sqrt(sum (w - mean)^2 + eps^2)
};

CellWindow gather_window(const Image& gray, int cu, int cv) {
  CellWindow win;
  double s1 = 0, s2 = 0;
  int i = 0;
  for (int v = cv - kHalf; v <= cv + kHalf; ++v)
    for (int u = cu - kHalf; u <= cu + kHalf; ++u, ++i) {
      const double g = gray.at(0, v, u);
      win.w[i] = g;
      s1 += g;
      s2 += g * g;
    }
  win.mean = s1 / kN;
  const double ssq = std::max(s2 - s1 * s1 / kN, 0.0);
  win.denom = std::sqrt(ssq + kNccEps * kNccEps);
  return win;
}

void validate_detector_config(const Image& bev, const DetectorConfig& cfg) {
  if (bev.height() < kT || bev.width() < kT)
    throw DataError("corner detector: image smaller than the 9x9 template");
  if (cfg.stride < 1 || cfg.gain <= 0 || cfg.temperature <= 0)
    throw UsageError("corner detector: stride, gain and temperature must be positive");
}

}  // namespace

const TemplateBank& template_bank() {
  static const TemplateBank bank = build_bank();
  return bank;
}

CornerField analytic_corner_detector(const Image& bev, const DetectorConfig& cfg) {
  validate_detector_config(bev, cfg);
  const Image gray = to_grayscale(bev);
  const TemplateBank& bank = template_bank();

  CornerField f;
  f.stride = cfg.stride;
  f.cells_y = bev.height() / cfg.stride;
  f.cells_x = bev.width() / cfg.stride;
  f.confidence.assign(f.cell_count(), sigmoid(-cfg.bias));
  f.dir_u.assign(f.cell_count(), 1.0);
  f.dir_v.assign(f.cell_count(), 0.0);
  f.off_u.assign(f.cell_count(), 0.0);
  f.off_v.assign(f.cell_count(), 0.0);

  parallel_for(f.cells_y, [&](int cy) {
    const int cv = static_cast<int>(f.center_v(cy));
    if (cv - kHalf < 0 || cv + kHalf >= bev.height()) return;
    for (int cx = 0; cx < f.cells_x; ++cx) {
      const int cu = static_cast<int>(f.center_u(cx));
      if (cu - kHalf < 0 || cu + kHalf >= bev.width()) continue;
      const CellWindow win = gather_window(gray, cu, cv);
      double ncc[TemplateBank::kCount];
      double best = -2;
      int best_k = 0;
      for (int k = 0; k < TemplateBank::kCount; ++k) {
        double num = 0;
        const double* t = bank.patch[k];
        for (int i = 0; i < kN; ++i) num += win.w[i] * t[i];
        ncc[k] = num / win.denom;
        if (ncc[k] > best) {
          best = ncc[k];
          best_k = k;
        }
      }
      // Normalized log-sum-exp: equals `best` when all responses tie, so a
      // flat bank response stays at the plain maximum instead of drifting.
      double acc = 0;
      for (int k = 0; k < TemplateBank::kCount; ++k)
        acc += std::exp(cfg.temperature * (ncc[k] - best));
      const double smax = best + std::log(acc / TemplateBank::kCount) / cfg.temperature;
      const size_t c = f.cell(cy, cx);
      f.confidence[c] = sigmoid(cfg.gain * smax - cfg.bias);
      f.dir_u[c] = bank.dir_u[best_k];
      f.dir_v[c] = bank.dir_v[best_k];
    }
  });

  // Sub-cell offsets from a 1D quadratic fit through the confidence of the
  // cell and its axis neighbors; only meaningful where the cell is a proper
  // local maximum along that axis.
  parallel_for(f.cells_y, [&](int cy) {
    if (cy < 1 || cy >= f.cells_y - 1) return;
    for (int cx = 1; cx < f.cells_x - 1; ++cx) {
      const size_t c = f.cell(cy, cx);
      const double c0 = f.confidence[c];
      const double cl = f.confidence[f.cell(cy, cx - 1)], cr = f.confidence[f.cell(cy, cx + 1)];
      const double cu = f.confidence[f.cell(cy - 1, cx)], cd = f.confidence[f.cell(cy + 1, cx)];
      const double qu = cl - 2 * c0 + cr;
      const double qv = cu - 2 * c0 + cd;
      if (qu < -1e-12)
        f.off_u[c] = std::clamp(0.5 * (cl - cr) / qu, -0.5, 0.5) * cfg.stride;
      if (qv < -1e-12)
        f.off_v[c] = std::clamp(0.5 * (cu - cd) / qv, -0.5, 0.5) * cfg.stride;
    }
  });
  return f;
}

void corner_detector_backward(const Image& bev, const DetectorConfig& cfg,
                              const std::vector<double>& d_confidence, Image& d_bev) {
  validate_detector_config(bev, cfg);
  if (!d_bev.same_shape(bev))
    throw DataError("corner_detector_backward: gradient image shape mismatch");
  const Image gray = to_grayscale(bev);
  const TemplateBank& bank = template_bank();
  const int cells_y = bev.height() / cfg.stride;
  const int cells_x = bev.width() / cfg.stride;
  if (d_confidence.size() != static_cast<size_t>(cells_y) * cells_x)
    throw DataError("corner_detector_backward: confidence gradient size mismatch");

  Image d_gray(bev.height(), bev.width(), 1);

  // Windows of cell rows three apart never overlap vertically (stride >= 1
  // gives 3*stride >= 3 ... only safe when 3*stride > 9), so fall back to a
  // serial sweep for tiny strides.
  const int phase_step = 3 * cfg.stride > kT ? 3 : cells_y;
  for (int phase = 0; phase < std::min(phase_step, cells_y); ++phase) {
    const int rows = (cells_y - phase + phase_step - 1) / phase_step;
    parallel_for(rows, [&](int r) {
      const int cy = phase + r * phase_step;
      const int cv = cy * cfg.stride + cfg.stride / 2;
      if (cv - kHalf < 0 || cv + kHalf >= bev.height()) return;
      for (int cx = 0; cx < cells_x; ++cx) {
        const double g = d_confidence[static_cast<size_t>(cy) * cells_x + cx];
        if (g == 0) continue;
        const int cu = cx * cfg.stride + cfg.stride / 2;
        if (cu - kHalf < 0 || cu + kHalf >= bev.width()) continue;  // border: constant
        const CellWindow win = gather_window(gray, cu, cv);
        double ncc[TemplateBank::kCount], num[TemplateBank::kCount];
        double best = -2;
        for (int k = 0; k < TemplateBank::kCount; ++k) {
          double n = 0;
          const double* t = bank.patch[k];
          for (int i = 0; i < kN; ++i) n += win.w[i] * t[i];
          num[k] = n;
          ncc[k] = n / win.denom;
          best = std::max(best, ncc[k]);
        }
        double acc = 0, soft[TemplateBank::kCount];
        for (int k = 0; k < TemplateBank::kCount; ++k) {
          soft[k] = std::exp(cfg.temperature * (ncc[k] - best));
          acc += soft[k];
        }
        const double smax = best + std::log(acc / TemplateBank::kCount) / cfg.temperature;
        const double conf = sigmoid(cfg.gain * smax - cfg.bias);
        const double d_smax = g * conf * (1 - conf) * cfg.gain;
        // d smax / d ncc_k is the softmax weight; fold the template sum and
        // the denominator term into one 81-pixel patch update.
        double patch_sum[kN] = {0};
        double s_num = 0;
        for (int k = 0; k < TemplateBank::kCount; ++k) {
          const double d_ncc = d_smax * soft[k] / acc;
          if (d_ncc == 0) continue;
          s_num += d_ncc * num[k];
          const double* t = bank.patch[k];
          for (int i = 0; i < kN; ++i) patch_sum[i] += d_ncc * t[i];
        }
        const double inv_d = 1.0 / win.denom;
        const double inv_d3 = inv_d * inv_d * inv_d;
        int i = 0;
        for (int v = cv - kHalf; v <= cv + kHalf; ++v)
          for (int u = cu - kHalf; u <= cu + kHalf; ++u, ++i)
            d_gray.at(0, v, u) += patch_sum[i] * inv_d - s_num * (win.w[i] - win.mean) * inv_d3;
      }
    });
  }

  const double inv_c = 1.0 / bev.channels();
  const double* src = d_gray.plane(0);
  for (int ch = 0; ch < bev.channels(); ++ch) {
    double* dst = d_bev.plane(ch);
    for (size_t i = 0; i < d_bev.plane_size(); ++i)
      dst[i] += bev.channels() == 1 ? src[i] : src[i] * inv_c;
  }
}

std::vector<CornerDetection> corner_peaks(const CornerField& field, double confidence_threshold,
                                          double nms_radius_px) {
  std::vector<CornerDetection> cands;
  for (int cy = 0; cy < field.cells_y; ++cy)
    for (int cx = 0; cx < field.cells_x; ++cx) {
      const size_t c = field.cell(cy, cx);
      const double v = field.confidence[c];
      if (v <= confidence_threshold) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int ny = cy + dy, nx = cx + dx;
          if (ny < 0 || ny >= field.cells_y || nx < 0 || nx >= field.cells_x) continue;
          if (field.confidence[field.cell(ny, nx)] > v) {
            is_max = false;
            break;
          }
        }
      if (!is_max) continue;
      CornerDetection d;
      d.u = field.center_u(cx) + field.off_u[c];
      d.v = field.center_v(cy) + field.off_v[c];
      d.dir_u = field.dir_u[c];
      d.dir_v = field.dir_v[c];
      d.confidence = v;
      d.cell_x = cx;
      d.cell_y = cy;
      cands.push_back(d);
    }
  std::sort(cands.begin(), cands.end(), [&](const CornerDetection& a, const CornerDetection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.cell_y * field.cells_x + a.cell_x < b.cell_y * field.cells_x + b.cell_x;
  });
  std::vector<CornerDetection> out;
  for (const CornerDetection& d : cands) {
    bool keep = true;
    for (const CornerDetection& k : out) {
      const double du = d.u - k.u, dv = d.v - k.v;
      if (du * du + dv * dv < nms_radius_px * nms_radius_px) {
        keep = false;
        break;
      }
    }
    if (keep) out.push_back(d);
  }
  return out;
}

namespace {

// Upper-percentile brightness used to normalize marking likelihood. Treated
// as a constant in the backward pass (an order statistic's gradient support
// is a single pixel and destabilizes nothing by being dropped).
double brightness_scale(const Image& gray, double percentile) {
  std::vector<double> v(gray.plane(0), gray.plane(0) + gray.plane_size());
  const size_t idx = static_cast<size_t>(percentile * (v.size() - 1));
  std::nth_element(v.begin(), v.begin() + idx, v.end());
  return std::max(v[idx], 1e-6);
}

}  // namespace

EdgeScores edge_scores(const std::vector<CornerDetection>& corners, const Image& bev,
                       const EdgeConfig& cfg) {
  if (cfg.n_samples < 2) throw UsageError("edge_scores: need at least two line samples");
  EdgeScores es;
  es.corners = corners;
  const size_t k = corners.size();
  es.scores.assign(k * k, 0.0);
  if (k < 2) return es;
  const Image gray = to_grayscale(bev);
  const double scale = brightness_scale(gray, cfg.percentile);
  for (size_t i = 0; i < k; ++i)
    for (size_t j = i + 1; j < k; ++j) {
      double acc = 0;
      for (int s = 0; s < cfg.n_samples; ++s) {
        const double t = static_cast<double>(s) / (cfg.n_samples - 1);
        const double u = (1 - t) * corners[i].u + t * corners[j].u;
        const double v = (1 - t) * corners[i].v + t * corners[j].v;
        acc += std::clamp(gray.sample_bilinear(0, u, v) / scale, 0.0, 1.0);
      }
      const double score = sigmoid(cfg.gain * (acc / cfg.n_samples) - cfg.bias);
      es.scores[es.index(i, j)] = score;
      es.scores[es.index(j, i)] = score;
    }
  return es;
}

void edge_scores_backward(const std::vector<CornerDetection>& corners, const Image& bev,
                          const EdgeConfig& cfg, const std::vector<double>& d_scores,
                          Image& d_bev) {
  const size_t k = corners.size();
  if (d_scores.size() != k * k) throw DataError("edge_scores_backward: score gradient size mismatch");
  if (!d_bev.same_shape(bev)) throw DataError("edge_scores_backward: gradient image shape mismatch");
  if (k < 2) return;
  const Image gray = to_grayscale(bev);
  const double scale = brightness_scale(gray, cfg.percentile);
  const double inv_c = 1.0 / bev.channels();
  for (size_t i = 0; i < k; ++i)
    for (size_t j = i + 1; j < k; ++j) {
      const double g = d_scores[i * k + j] + d_scores[j * k + i];
      if (g == 0) continue;
      double acc = 0;
      for (int s = 0; s < cfg.n_samples; ++s) {
        const double t = static_cast<double>(s) / (cfg.n_samples - 1);
        const double u = (1 - t) * corners[i].u + t * corners[j].u;
        const double v = (1 - t) * corners[i].v + t * corners[j].v;
        acc += std::clamp(gray.sample_bilinear(0, u, v) / scale, 0.0, 1.0);
      }
      const double score = sigmoid(cfg.gain * (acc / cfg.n_samples) - cfg.bias);
      const double d_mean = g * score * (1 - score) * cfg.gain / cfg.n_samples;
      for (int s = 0; s < cfg.n_samples; ++s) {
        const double t = static_cast<double>(s) / (cfg.n_samples - 1);
        const double u = (1 - t) * corners[i].u + t * corners[j].u;
        const double v = (1 - t) * corners[i].v + t * corners[j].v;
        const double raw = gray.sample_bilinear(0, u, v) / scale;
        if (raw <= 0 || raw >= 1) continue;  // clamped: no gradient
        const Image::BilinearTaps taps = gray.bilinear_taps(u, v);
        for (int a = 0; a < 4; ++a) {
          const double d_g = d_mean * taps.w[a] / scale;
          for (int ch = 0; ch < bev.channels(); ++ch)
            d_bev.at(ch, taps.y[a], taps.x[a]) += bev.channels() == 1 ? d_g : d_g * inv_c;
        }
      }
    }
}

void save_corner_field(const std::string& path, const CornerField& field) {
  Image img(field.cells_y, field.cells_x, 5);
  const std::vector<double>* planes[5] = {&field.confidence, &field.dir_u, &field.dir_v,
                                          &field.off_u, &field.off_v};
  for (int p = 0; p < 5; ++p)
    std::copy(planes[p]->begin(), planes[p]->end(), img.plane(p));
  write_pghm(path, img);
}

CornerField load_corner_field(const std::string& path, int stride, int expect_cells_x,
                              int expect_cells_y) {
  const Image img = read_pghm(path);
  if (img.channels() != 5)
    throw DataError("corner field file must have 5 planes (confidence, direction, offset): " + path);
  if ((expect_cells_x >= 0 && img.width() != expect_cells_x) ||
      (expect_cells_y >= 0 && img.height() != expect_cells_y))
    throw DataError("corner field shape does not match the configured BEV grid: " + path);
  CornerField f;
  f.cells_y = img.height();
  f.cells_x = img.width();
  f.stride = stride;
  f.gradient_allowed = false;
  const auto grab = [&](int p) {
    return std::vector<double>(img.plane(p), img.plane(p) + img.plane_size());
  };
  f.confidence = grab(0);
  f.dir_u = grab(1);
  f.dir_v = grab(2);
  f.off_u = grab(3);
  f.off_v = grab(4);
  for (double c : f.confidence)
    if (!(c >= 0.0 && c <= 1.0))
      throw DataError("corner field confidence outside [0, 1]: " + path);
  return f;
}

void require_student_field(const CornerField& field) {
  if (!field.gradient_allowed)
    throw UsageError(
        "externally loaded corner fields are constants and cannot serve as the student; "
        "student fields must come from the analytic detector");
}

std::vector<SlotAnnotation> load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotation file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed annotation JSON: " + path + ": " + e.what());
  }
  if (!j.is_array()) throw DataError("annotation file must be a JSON array: " + path);
  std::vector<SlotAnnotation> out;
  for (size_t i = 0; i < j.size(); ++i) {
    const nlohmann::json& a = j[i];
    SlotAnnotation s;
    try {
      s.p1_u = a.at("p1").at(0).get<double>();
      s.p1_v = a.at("p1").at(1).get<double>();
      s.p2_u = a.at("p2").at(0).get<double>();
      s.p2_v = a.at("p2").at(1).get<double>();
      s.angle_deg = a.at("angle_deg").get<double>();
      s.type = a.value("type", "perpendicular");
    } catch (const nlohmann::json::exception& e) {
      throw DataError("annotation " + std::to_string(i) + " malformed: " + e.what(), path);
    }
    if (s.p1_u == s.p2_u && s.p1_v == s.p2_v)
      throw DataError("annotation " + std::to_string(i) + ": entrance points coincide", path);
    if (!(s.angle_deg >= 0.0 && s.angle_deg < 360.0))
      throw DataError("annotation " + std::to_string(i) + ": angle outside [0, 360)", path);
    if (s.type != "perpendicular" && s.type != "parallel")
      throw DataError("annotation " + std::to_string(i) + ": unknown slot type " + s.type, path);
    out.push_back(std::move(s));
  }
  return out;
}

void save_annotations(const std::string& path, const std::vector<SlotAnnotation>& annos) {
  nlohmann::json j = nlohmann::json::array();
  for (const SlotAnnotation& s : annos) {
    j.push_back({{"p1", {s.p1_u, s.p1_v}},
                 {"p2", {s.p2_u, s.p2_v}},
                 {"angle_deg", s.angle_deg},
                 {"type", s.type}});
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write annotation file: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw DataError("failed writing annotation file: " + path);
}

CornerField annotations_to_teacher_field(const std::vector<SlotAnnotation>& annos, int cells_y,
                                         int cells_x, int stride) {
  if (cells_y <= 0 || cells_x <= 0 || stride < 1)
    throw UsageError("annotations_to_teacher_field: invalid field shape");
  CornerField f;
  f.cells_y = cells_y;
  f.cells_x = cells_x;
  f.stride = stride;
  f.gradient_allowed = false;
  f.confidence.assign(f.cell_count(), 0.0);
  f.dir_u.assign(f.cell_count(), 1.0);
  f.dir_v.assign(f.cell_count(), 0.0);
  f.off_u.assign(f.cell_count(), 0.0);
  f.off_v.assign(f.cell_count(), 0.0);

  struct Point {
    double u, v, du, dv;
  };
  std::vector<Point> pts;
  for (const SlotAnnotation& a : annos) {
    const double rad = a.angle_deg * M_PI / 180.0;
    pts.push_back({a.p1_u, a.p1_v, std::cos(rad), std::sin(rad)});
    pts.push_back({a.p2_u, a.p2_v, std::cos(rad), std::sin(rad)});
  }
  if (pts.empty()) return f;

  constexpr double kSigmaCells = 2.0;
  const double half = stride / 2.0;
  for (int cy = 0; cy < cells_y; ++cy)
    for (int cx = 0; cx < cells_x; ++cx) {
      const size_t c = f.cell(cy, cx);
      double best = -1;
      const Point* nearest = nullptr;
      for (const Point& p : pts) {
        // distances in cell units so the bump width is resolution-independent
        const double du = (p.u - f.center_u(cx)) / stride;
        const double dv = (p.v - f.center_v(cy)) / stride;
        const double d2 = du * du + dv * dv;
        const double val = std::exp(-d2 / (2 * kSigmaCells * kSigmaCells));
        if (val > best) {
          best = val;
          nearest = &p;
        }
      }
      f.confidence[c] = best;
      f.dir_u[c] = nearest->du;
      f.dir_v[c] = nearest->dv;
      f.off_u[c] = std::clamp(nearest->u - f.center_u(cx), -half, half);
      f.off_v[c] = std::clamp(nearest->v - f.center_v(cy), -half, half);
    }
  return f;
}

}  // namespace parkgauss
