#include "parkgauss/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "parkgauss/parallel.hpp"

namespace parkgauss {
namespace {

constexpr int kWin = 11;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

const std::array<double, kWin>& ssim_window() {
  static const std::array<double, kWin> g = [] {
    std::array<double, kWin> w{};
    const double sigma = 1.5;
    double sum = 0.0;
    for (int i = 0; i < kWin; ++i) {
      const double d = i - (kWin - 1) / 2.0;
      w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
      sum += w[i];
    }
    for (double& v : w) v /= sum;
    return w;
  }();
  return g;
}

struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;
  Plane() = default;
  Plane(int height, int width) : h(height), w(width), v(static_cast<size_t>(height) * width, 0.0) {}
  double& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  double at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
};

// Separable Gaussian convolution keeping only fully covered windows,
// so the output shrinks by kWin-1 in each dimension.
Plane blur_valid(const Plane& in) {
  const auto& g = ssim_window();
  Plane mid(in.h, in.w - kWin + 1);
  parallel_for(in.h, [&](int64_t row) {
    const int y = static_cast<int>(row);
    for (int x = 0; x < mid.w; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWin; ++k) s += g[k] * in.at(y, x + k);
      mid.at(y, x) = s;
    }
  });
  Plane out(in.h - kWin + 1, mid.w);
  parallel_for(out.h, [&](int64_t row) {
    const int y = static_cast<int>(row);
    for (int x = 0; x < out.w; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWin; ++k) s += g[k] * mid.at(y + k, x);
      out.at(y, x) = s;
    }
  });
  return out;
}

// Transpose of blur_valid: scatters a window-map back to image size.
// Written as a gather per output pixel so parallel rows stay deterministic.
Plane blur_valid_transpose(const Plane& in, int out_h, int out_w) {
  const auto& g = ssim_window();
  Plane mid(out_h, in.w);
  parallel_for(out_h, [&](int64_t row) {
    const int y = static_cast<int>(row);
    const int lo = std::max(0, y - kWin + 1), hi = std::min(in.h - 1, y);
    for (int x = 0; x < in.w; ++x) {
      double s = 0.0;
      for (int p = lo; p <= hi; ++p) s += g[y - p] * in.at(p, x);
      mid.at(y, x) = s;
    }
  });
  Plane out(out_h, out_w);
  parallel_for(out_h, [&](int64_t row) {
    const int y = static_cast<int>(row);
    for (int x = 0; x < out_w; ++x) {
      const int lo = std::max(0, x - kWin + 1), hi = std::min(in.w - 1, x);
      double s = 0.0;
      for (int p = lo; p <= hi; ++p) s += g[x - p] * mid.at(y, p);
      out.at(y, x) = s;
    }
  });
  return out;
}

// Mean SSIM of one channel over the valid window map. When `d_pred` is
// given, accumulates upstream * d(mean map)/d(pred) into its channel plane.
double ssim_channel(const Image& pred, const Image& target, int ch, double upstream,
                    Image* d_pred) {
  const int h = pred.height(), w = pred.width();
  Plane x(h, w), y(h, w), xx(h, w), yy(h, w), xy(h, w);
  parallel_for(h, [&](int64_t row) {
    const int py = static_cast<int>(row);
    for (int px = 0; px < w; ++px) {
      const double a = pred.at(ch, py, px), b = target.at(ch, py, px);
      x.at(py, px) = a;
      y.at(py, px) = b;
      xx.at(py, px) = a * a;
      yy.at(py, px) = b * b;
      xy.at(py, px) = a * b;
    }
  });
  const Plane mx = blur_valid(x), my = blur_valid(y);
  const Plane mxx = blur_valid(xx), myy = blur_valid(yy), mxy = blur_valid(xy);
  const int mh = mx.h, mw = mx.w;
  const size_t n_map = static_cast<size_t>(mh) * mw;

  Plane c_mu, c_xx, c_xy;
  if (d_pred) {
    c_mu = Plane(mh, mw);
    c_xx = Plane(mh, mw);
    c_xy = Plane(mh, mw);
  }
  std::vector<double> row_sums(static_cast<size_t>(mh), 0.0);
  parallel_for(mh, [&](int64_t row) {
    const int my_ = static_cast<int>(row);
    double acc = 0.0;
    for (int mx_ = 0; mx_ < mw; ++mx_) {
      const double ux = mx.at(my_, mx_), uy = my.at(my_, mx_);
      const double sxx = mxx.at(my_, mx_) - ux * ux;
      const double syy = myy.at(my_, mx_) - uy * uy;
      const double sxy = mxy.at(my_, mx_) - ux * uy;
      const double a1 = 2.0 * ux * uy + kSsimC1;
      const double a2 = 2.0 * sxy + kSsimC2;
      const double b1 = ux * ux + uy * uy + kSsimC1;
      const double b2 = sxx + syy + kSsimC2;
      const double s = (a1 * a2) / (b1 * b2);
      acc += s;
      if (d_pred) {
        const double u = upstream / static_cast<double>(n_map);
        const double ds_da1 = a2 / (b1 * b2);
        const double ds_da2 = a1 / (b1 * b2);
        const double ds_db1 = -s / b1;
        const double ds_db2 = -s / b2;
        // raw-moment partials: a2 and b2 carry -2*mu terms from the
        // uncentered variance/covariance expansion
        c_mu.at(my_, mx_) =
            u * (ds_da1 * 2.0 * uy - ds_da2 * 2.0 * uy + ds_db1 * 2.0 * ux - ds_db2 * 2.0 * ux);
        c_xx.at(my_, mx_) = u * ds_db2;
        c_xy.at(my_, mx_) = u * 2.0 * ds_da2;
      }
    }
    row_sums[static_cast<size_t>(my_)] = acc;
  });
  double total = 0.0;
  for (double s : row_sums) total += s;

  if (d_pred) {
    const Plane t_mu = blur_valid_transpose(c_mu, h, w);
    const Plane t_xx = blur_valid_transpose(c_xx, h, w);
    const Plane t_xy = blur_valid_transpose(c_xy, h, w);
    parallel_for(h, [&](int64_t row) {
      const int py = static_cast<int>(row);
      for (int px = 0; px < w; ++px) {
        d_pred->at(ch, py, px) += t_mu.at(py, px) +
                                  2.0 * x.at(py, px) * t_xx.at(py, px) +
                                  y.at(py, px) * t_xy.at(py, px);
      }
    });
  }
  return total / static_cast<double>(n_map);
}

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) throw DataError(std::string(what) + ": image shapes differ");
}

void require_ssim_size(const Image& img) {
  if (img.height() < kWin || img.width() < kWin)
    throw DataError("SSIM needs images at least 11x11");
}

// d(loss)/d(restricted scores) given d(loss)/d(softmax probabilities).
std::vector<double> softmax_backward(const std::vector<double>& pi,
                                     const std::vector<double>& d_pi) {
  double dot = 0.0;
  for (size_t i = 0; i < pi.size(); ++i) dot += d_pi[i] * pi[i];
  std::vector<double> d_s(pi.size());
  for (size_t i = 0; i < pi.size(); ++i) d_s[i] = pi[i] * (d_pi[i] - dot);
  return d_s;
}

std::vector<double> softmax(const std::vector<double>& s) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : s) mx = std::max(mx, v);
  std::vector<double> pi(s.size());
  double sum = 0.0;
  for (size_t i = 0; i < s.size(); ++i) {
    pi[i] = std::exp(s[i] - mx);
    sum += pi[i];
  }
  for (double& v : pi) v /= sum;
  return pi;
}

double point_dist(double au, double av, double bu, double bv) {
  return std::hypot(au - bu, av - bv);
}

bool angles_agree(double a, double b, double tol_deg) {
  double d = std::fmod(std::fabs(a - b), 360.0);
  return d < tol_deg || 360.0 - d < tol_deg;
}

// Worst paired entrance-point distance under the better of the two point
// assignments; infinity when neither assignment keeps both within `limit`.
double slot_pair_distance(const SlotDetectionResult& d, const SlotAnnotation& g,
                          double limit) {
  const double direct = std::max(point_dist(d.p1_u, d.p1_v, g.p1_u, g.p1_v),
                                 point_dist(d.p2_u, d.p2_v, g.p2_u, g.p2_v));
  const double crossed = std::max(point_dist(d.p1_u, d.p1_v, g.p2_u, g.p2_v),
                                  point_dist(d.p2_u, d.p2_v, g.p1_u, g.p1_v));
  const double best = std::min(direct, crossed);
  return best <= limit ? best : std::numeric_limits<double>::infinity();
}

bool detection_less(const SlotDetectionResult& a, const SlotDetectionResult& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  return std::tie(a.p1_u, a.p1_v, a.p2_u, a.p2_v, a.angle_deg) <
         std::tie(b.p1_u, b.p1_v, b.p2_u, b.p2_v, b.angle_deg);
}

}  // namespace

double total_loss(const LossComponents& c, const LossWeights& w, TrainPhase phase) {
  if (phase == TrainPhase::kPhotometric) return c.l_rgb;
  return c.l_rgb + w.lambda_align * c.l_align + w.lambda_ipm * c.l_ipm +
         w.lambda_cam * c.l_cam;
}

ScalarLoss l_rgb(const Image& rendered, const Image& target, double lambda_dssim) {
  require_same_shape(rendered, target, "l_rgb");
  if (lambda_dssim < 0.0 || lambda_dssim > 1.0)
    throw UsageError("l_rgb: lambda_dssim must lie in [0, 1]");

  ScalarLoss out;
  out.d_pred = Image(rendered.height(), rendered.width(), rendered.channels());
  const size_t n = rendered.size();
  const double* a = rendered.data();
  const double* b = target.data();
  const double l1 =
      deterministic_sum_n(static_cast<int64_t>(n),
                          [&](int64_t i) { return std::fabs(a[i] - b[i]); }) /
      static_cast<double>(n);
  {
    double* d = out.d_pred.data();
    const double scale = (1.0 - lambda_dssim) / static_cast<double>(n);
    parallel_for(static_cast<int64_t>(n), [&](int64_t i) {
      const double diff = a[i] - b[i];
      d[i] = diff > 0.0 ? scale : (diff < 0.0 ? -scale : 0.0);
    });
  }
  out.value = (1.0 - lambda_dssim) * l1;

  if (lambda_dssim > 0.0) {
    require_ssim_size(rendered);
    const int c = rendered.channels();
    // d(value)/d(per-channel mean SSIM) = -lambda/2 * 1/C
    const double upstream = -lambda_dssim / (2.0 * c);
    double ssim_total = 0.0;
    for (int ch = 0; ch < c; ++ch)
      ssim_total += ssim_channel(rendered, target, ch, upstream, &out.d_pred);
    ssim_total /= c;
    out.value += lambda_dssim * (1.0 - ssim_total) / 2.0;
  }
  return out;
}

double ssim(const Image& a, const Image& b) {
  require_same_shape(a, b, "ssim");
  require_ssim_size(a);
  double total = 0.0;
  for (int ch = 0; ch < a.channels(); ++ch)
    total += ssim_channel(a, b, ch, 0.0, nullptr);
  return total / a.channels();
}

double psnr(const Image& a, const Image& b) {
  require_same_shape(a, b, "psnr");
  const double* pa = a.data();
  const double* pb = b.data();
  const double mse = deterministic_sum_n(static_cast<int64_t>(a.size()),
                                         [&](int64_t i) {
                                           const double d = pa[i] - pb[i];
                                           return d * d;
                                         }) /
                     static_cast<double>(a.size());
  if (mse < 1e-10) return 100.0;
  return -10.0 * std::log10(mse);
}

std::vector<size_t> topk_region(const Image& values, int k) {
  if (k <= 0) throw UsageError("topk_region: k must be positive");
  if (static_cast<size_t>(k) > values.size())
    throw UsageError("topk_region: k exceeds the number of elements");
  const double* v = values.data();
  std::vector<size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                    [v](size_t i, size_t j) {
                      if (v[i] != v[j]) return v[i] > v[j];
                      return i < j;
                    });
  idx.resize(static_cast<size_t>(k));
  return idx;
}

AlignLoss l_align(const WeightMap& student, const WeightMap& teacher, int k,
                  bool reverse) {
  require_same_shape(student.values, teacher.values, "l_align");
  if (!student.gradient_allowed)
    throw UsageError("l_align: student weight map does not carry gradients");

  const std::vector<size_t> omega = topk_region(teacher.values, k);
  std::vector<double> s(omega.size()), t(omega.size());
  for (size_t i = 0; i < omega.size(); ++i) {
    s[i] = student.values.data()[omega[i]];
    t[i] = teacher.values.data()[omega[i]];
  }
  const std::vector<double> pi_s = softmax(s);
  const std::vector<double> pi_t = softmax(t);

  constexpr double kEps = 1e-8;
  AlignLoss out;
  std::vector<double> d_pi_s(omega.size(), 0.0);
  if (!reverse) {
    for (size_t i = 0; i < omega.size(); ++i) {
      const double lr = std::log(pi_s[i] + kEps) - std::log(pi_t[i] + kEps);
      out.value += pi_s[i] * lr;
      d_pi_s[i] = lr + pi_s[i] / (pi_s[i] + kEps);
    }
  } else {
    for (size_t i = 0; i < omega.size(); ++i) {
      out.value += pi_t[i] * (std::log(pi_t[i] + kEps) - std::log(pi_s[i] + kEps));
      d_pi_s[i] = -pi_t[i] / (pi_s[i] + kEps);
    }
  }
  const std::vector<double> d_s = softmax_backward(pi_s, d_pi_s);
  out.d_student = Image(student.values.height(), student.values.width(), 1);
  for (size_t i = 0; i < omega.size(); ++i) out.d_student.data()[omega[i]] = d_s[i];
  return out;
}

WeightedL1 weighted_l1(const Image& pred, const Image& target, const Image& weight,
                       bool want_weight_grad) {
  require_same_shape(pred, target, "weighted_l1");
  if (weight.channels() != 1 || weight.height() != pred.height() ||
      weight.width() != pred.width())
    throw DataError("weighted_l1: weight map must be single-channel at image size");

  const int c = pred.channels();
  const size_t np = pred.plane_size();
  const double* w = weight.data();
  const double den_raw = deterministic_sum_n(static_cast<int64_t>(np),
                                             [&](int64_t i) { return w[i]; });
  const double den = std::max(den_raw, 1e-8);
  // channel-mean absolute error per pixel keeps the scale of plain mean-L1
  const double num = deterministic_sum_n(static_cast<int64_t>(np), [&](int64_t i) {
    double e = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      const size_t j = np * ch + i;
      e += std::fabs(pred.data()[j] - target.data()[j]);
    }
    return w[i] * e / c;
  });

  WeightedL1 out;
  out.value = num / den;
  out.d_pred = Image(pred.height(), pred.width(), c);
  parallel_for(static_cast<int64_t>(np), [&](int64_t i) {
    for (int ch = 0; ch < c; ++ch) {
      const size_t j = np * ch + i;
      const double diff = pred.data()[j] - target.data()[j];
      const double sg = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
      out.d_pred.data()[j] = w[i] * sg / (c * den);
    }
  });
  if (want_weight_grad) {
    out.d_weight = Image(pred.height(), pred.width(), 1);
    const double through = den_raw > 1e-8 ? out.value : 0.0;
    parallel_for(static_cast<int64_t>(np), [&](int64_t i) {
      double e = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const size_t j = np * ch + i;
        e += std::fabs(pred.data()[j] - target.data()[j]);
      }
      out.d_weight.data()[i] = (e / c - through) / den;
    });
  }
  return out;
}

PrMetrics slot_precision_recall(const std::vector<SlotDetectionResult>& detections,
                                const std::vector<SlotAnnotation>& ground_truth,
                                const MatchCriteria& criteria) {
  std::vector<SlotDetectionResult> kept;
  for (const auto& d : detections)
    if (d.confidence >= criteria.confidence) kept.push_back(d);
  // content-based ordering keeps the result invariant to input permutation
  std::sort(kept.begin(), kept.end(), detection_less);

  std::vector<bool> used(ground_truth.size(), false);
  PrMetrics out;
  for (const auto& d : kept) {
    int best = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (size_t g = 0; g < ground_truth.size(); ++g) {
      if (used[g]) continue;
      const auto& gt = ground_truth[g];
      if (!angles_agree(d.angle_deg, gt.angle_deg, criteria.angle_deg)) continue;
      const double dist = slot_pair_distance(d, gt, criteria.distance_px);
      if (dist < best_dist ||
          (dist == best_dist && best >= 0 &&
           std::tie(gt.p1_u, gt.p1_v, gt.p2_u, gt.p2_v) <
               std::tie(ground_truth[best].p1_u, ground_truth[best].p1_v,
                        ground_truth[best].p2_u, ground_truth[best].p2_v))) {
        best = static_cast<int>(g);
        best_dist = dist;
      }
    }
    if (best >= 0 && std::isfinite(best_dist)) {
      used[static_cast<size_t>(best)] = true;
      ++out.tp;
    } else {
      ++out.fp;
    }
  }
  out.fn = static_cast<int>(ground_truth.size()) - out.tp;
  if (kept.empty())
    out.precision = ground_truth.empty() ? 1.0 : 0.0;
  else
    out.precision = static_cast<double>(out.tp) / kept.size();
  out.recall = ground_truth.empty()
                   ? 1.0
                   : static_cast<double>(out.tp) / ground_truth.size();
  return out;
}

}  // namespace parkgauss
