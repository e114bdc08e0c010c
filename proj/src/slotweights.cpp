#include "parkgauss/slotweights.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

#include "parkgauss/image_io.hpp"
#include "parkgauss/parallel.hpp"

namespace parkgauss {

void validate_weight_map(const WeightMap& w, double max_allowed) {
  const double* p = w.values.data();
  for (size_t i = 0; i < w.values.size(); ++i)
    if (!std::isfinite(p[i]) || p[i] < 0 || p[i] > max_allowed)
      throw NumericalError("weight map value out of range: " + std::to_string(p[i]));
}

WeightMap shape_weights(const CornerField& field, const ShapeParams& p) {
  if (p.temperature <= 0 || p.gamma <= 0)
    throw UsageError("shape_weights: temperature and gamma must be positive");
  WeightMap w;
  w.values = Image(field.cells_y, field.cells_x, 1);
  w.gradient_allowed = field.gradient_allowed;
  double* out = w.values.plane(0);
  for (size_t i = 0; i < field.cell_count(); ++i) {
    const double s = sigmoid((field.confidence[i] - p.tau) / p.temperature);
    out[i] = p.gamma == 1.0 ? s : std::pow(s, p.gamma);
  }
  return w;
}

void shape_weights_backward(const CornerField& field, const ShapeParams& p,
                            const Image& d_values, std::vector<double>& d_conf) {
  if (d_values.plane_size() != field.cell_count() || d_values.channels() != 1)
    throw DataError("shape_weights_backward: gradient shape mismatch");
  if (d_conf.size() != field.cell_count())
    throw DataError("shape_weights_backward: confidence gradient size mismatch");
  const double* d = d_values.plane(0);
  for (size_t i = 0; i < field.cell_count(); ++i) {
    const double s = sigmoid((field.confidence[i] - p.tau) / p.temperature);
    const double ds = s * (1 - s) / p.temperature;
    const double outer = p.gamma == 1.0 ? 1.0 : p.gamma * std::pow(s, p.gamma - 1);
    d_conf[i] += d[i] * outer * ds;
  }
}

namespace {

WeightMap mix(const WeightMap& teacher, const WeightMap& student, double alpha,
              bool stop_gradient, const char* what) {
  if (!teacher.values.same_shape(student.values))
    throw DataError(std::string(what) + ": teacher and student shapes differ");
  if (alpha < 0 || alpha > 1) throw UsageError(std::string(what) + ": mix factor outside [0, 1]");
  WeightMap out;
  out.values = Image(teacher.values.height(), teacher.values.width(), 1);
  out.gradient_allowed = stop_gradient ? false : student.gradient_allowed;
  const double* t = teacher.values.plane(0);
  const double* s = student.values.plane(0);
  double* o = out.values.plane(0);
  for (size_t i = 0; i < out.values.plane_size(); ++i) o[i] = alpha * t[i] + (1 - alpha) * s[i];
  return out;
}

}  // namespace

WeightMap mix_corner(const WeightMap& teacher, const WeightMap& student, double alpha,
                     bool stop_gradient) {
  return mix(teacher, student, alpha, stop_gradient, "mix_corner");
}

WeightMap mix_edge(const WeightMap& teacher, const WeightMap& student, double beta,
                   bool stop_gradient) {
  return mix(teacher, student, beta, stop_gradient, "mix_edge");
}

Image mix_backward_student(const Image& d_mix, double alpha, bool stop_gradient) {
  Image d(d_mix.height(), d_mix.width(), 1);
  if (stop_gradient) return d;  // sg(W_s): nothing flows
  const double* in = d_mix.plane(0);
  double* out = d.plane(0);
  for (size_t i = 0; i < d.plane_size(); ++i) out[i] = (1 - alpha) * in[i];
  return d;
}

WeightMap rasterize_edges(const EdgeScores& es, int height, int width, const EdgeTubeParams& p) {
  if (p.top_k < 1 || p.sigma <= 0 || p.n_samples < 2)
    throw UsageError("rasterize_edges: invalid tube parameters");
  WeightMap w;
  w.values = Image(height, width, 1);
  w.gradient_allowed = false;
  const size_t k = es.corners.size();
  if (k < 2) return w;

  // top-K positive entries of the upper triangle, strongest first, ties in
  // (i, j) lexicographic order so the selection is deterministic
  std::vector<std::tuple<double, size_t, size_t>> cand;
  for (size_t i = 0; i < k; ++i)
    for (size_t j = i + 1; j < k; ++j)
      if (es.score(i, j) > 0) cand.emplace_back(es.score(i, j), i, j);
  std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    return std::tie(std::get<1>(a), std::get<2>(a)) < std::tie(std::get<1>(b), std::get<2>(b));
  });
  if (cand.size() > static_cast<size_t>(p.top_k)) cand.resize(p.top_k);

  const double band = 4 * p.sigma;
  const double inv_two_sigma2 = 1.0 / (2 * p.sigma * p.sigma);
  parallel_for(height, [&](int y) {
    double* row = w.values.plane(0) + static_cast<size_t>(y) * width;
    for (const auto& [score, i, j] : cand) {
      (void)score;
      const double au = es.corners[i].u, av = es.corners[i].v;
      const double bu = es.corners[j].u, bv = es.corners[j].v;
      const double du = bu - au, dv = bv - av;
      const double len2 = du * du + dv * dv;
      // skip rows entirely outside the 4-sigma band of the segment's bbox
      if (y < std::min(av, bv) - band || y > std::max(av, bv) + band) continue;
      const int x_lo = std::max(0, static_cast<int>(std::floor(std::min(au, bu) - band)));
      const int x_hi = std::min(width - 1, static_cast<int>(std::ceil(std::max(au, bu) + band)));
      for (int x = x_lo; x <= x_hi; ++x) {
        double s = len2 > 0 ? ((x - au) * du + (y - av) * dv) / len2 : 0.0;
        s = std::clamp(s, 0.0, 1.0);
        const double ru = x - (au + s * du), rv = y - (av + s * dv);
        if (ru * ru + rv * rv > band * band) continue;
        // the tube maximum over sampled t reduces to the nearest sample
        double best_d2 = std::numeric_limits<double>::infinity();
        for (int n = 0; n < p.n_samples; ++n) {
          const double t = static_cast<double>(n) / (p.n_samples - 1);
          const double pu = x - ((1 - t) * au + t * bu);
          const double pv = y - ((1 - t) * av + t * bv);
          best_d2 = std::min(best_d2, pu * pu + pv * pv);
        }
        const double e = std::exp(-best_d2 * inv_two_sigma2);
        if (p.aggregation == EdgeAggregation::kMax)
          row[x] = std::max(row[x], e);
        else
          row[x] += e;
      }
    }
  });
  return w;
}

WeightMap combine(const WeightMap& w_mix, const WeightMap& w_edge, double lambda_edge) {
  if (!w_mix.values.same_shape(w_edge.values))
    throw DataError("combine: weight map shapes differ");
  if (lambda_edge < 0) throw UsageError("combine: lambda_edge must be nonnegative");
  WeightMap out;
  out.values = Image(w_mix.values.height(), w_mix.values.width(), 1);
  out.gradient_allowed = w_mix.gradient_allowed || w_edge.gradient_allowed;
  const double* a = w_mix.values.plane(0);
  const double* b = w_edge.values.plane(0);
  double* o = out.values.plane(0);
  for (size_t i = 0; i < out.values.plane_size(); ++i) o[i] = a[i] + lambda_edge * b[i];
  return out;
}

Image upsample_field(const Image& field_values, int stride, int height, int width) {
  if (field_values.channels() != 1) throw DataError("upsample_field: expected a single plane");
  if (stride < 1) throw UsageError("upsample_field: stride must be positive");
  Image up(height, width, 1);
  const double off = stride / 2;  // integer cell-center offset, matches CornerField
  parallel_for(height, [&](int y) {
    const double fy = (y - off) / stride;
    double* row = up.plane(0) + static_cast<size_t>(y) * width;
    for (int x = 0; x < width; ++x) row[x] = field_values.sample_bilinear(0, (x - off) / stride, fy);
  });
  return up;
}

void upsample_field_backward(const Image& d_up, int stride, Image& d_field) {
  if (d_up.channels() != 1 || d_field.channels() != 1)
    throw DataError("upsample_field_backward: expected single planes");
  const double off = stride / 2;
  // serial scatter: only exercised on the stop-gradient-removed diagnostic path
  for (int y = 0; y < d_up.height(); ++y)
    for (int x = 0; x < d_up.width(); ++x) {
      const double g = d_up.at(0, y, x);
      if (g == 0) continue;
      const Image::BilinearTaps t =
          Image::taps_for(d_field.width(), d_field.height(), (x - off) / stride, (y - off) / stride);
      for (int a = 0; a < 4; ++a) d_field.at(0, t.y[a], t.x[a]) += g * t.w[a];
    }
}

ProjectedWeights upsample_and_backproject(const WeightMap& w, int stride, const IpmGrid& grid) {
  ProjectedWeights out;
  out.bev = w.values.height() == grid.bev_h && w.values.width() == grid.bev_w
                ? w.values
                : upsample_field(w.values, stride, grid.bev_h, grid.bev_w);
  out.cams = backproject_bev(grid, out.bev);
  return out;
}

void save_weight_map(const std::string& path, const WeightMap& w) { write_pghm(path, w.values); }

void save_weight_map_png(const std::string& path, const WeightMap& w) {
  double peak = 1.0;
  const double* p = w.values.data();
  for (size_t i = 0; i < w.values.size(); ++i) peak = std::max(peak, p[i]);
  Image vis(w.values.height(), w.values.width(), 1);
  for (size_t i = 0; i < vis.size(); ++i) vis.data()[i] = std::clamp(p[i] / peak, 0.0, 1.0);
  write_png(path, vis);
}

}  // namespace parkgauss
