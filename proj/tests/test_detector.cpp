#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "parkgauss/detector.hpp"
#include "parkgauss/image_io.hpp"
#include "parkgauss/prng.hpp"

using namespace parkgauss;

namespace {

double seg_dist(double pu, double pv, double au, double av, double bu, double bv) {
  const double du = bu - au, dv = bv - av;
  const double len2 = du * du + dv * dv;
  double s = len2 > 0 ? ((pu - au) * du + (pv - av) * dv) / len2 : 0.0;
  s = std::clamp(s, 0.0, 1.0);
  const double ru = pu - (au + s * du), rv = pv - (av + s * dv);
  return std::sqrt(ru * ru + rv * rv);
}

// Paints an L junction the same way the template bank draws one: two soft
// half-rays of width ~2 px starting at (u0, v0).
void paint_l_corner(Image& img, double u0, double v0, double angle_rad, double arm_px,
                    double brightness) {
  const double du = std::cos(angle_rad), dv = std::sin(angle_rad);
  const double qu = -dv, qv = du;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const double d1 = seg_dist(x, y, u0, v0, u0 + arm_px * du, v0 + arm_px * dv);
      const double d2 = seg_dist(x, y, u0, v0, u0 + arm_px * qu, v0 + arm_px * qv);
      const double line = std::clamp(1.5 - std::min(d1, d2), 0.0, 1.0);
      for (int ch = 0; ch < img.channels(); ++ch)
        img.at(ch, y, x) = std::max(img.at(ch, y, x), brightness * line);
    }
}

Image rot90(const Image& img) {
  // (u, v) -> (S-1-v, u); direction vectors rotate as (du, dv) -> (-dv, du)
  REQUIRE(img.width() == img.height());
  const int s = img.width();
  Image out(s, s, img.channels());
  for (int ch = 0; ch < img.channels(); ++ch)
    for (int v = 0; v < s; ++v)
      for (int u = 0; u < s; ++u) out.at(ch, u, s - 1 - v) = img.at(ch, v, u);
  return out;
}

size_t argmax_cell(const CornerField& f) {
  return std::max_element(f.confidence.begin(), f.confidence.end()) - f.confidence.begin();
}

}  // namespace

TEST_CASE("template bank is normalized and closed under 90-degree rotation") {
  const TemplateBank& bank = template_bank();
  constexpr int n = TemplateBank::kSize;
  for (int k = 0; k < TemplateBank::kCount; ++k) {
    double sum = 0, norm2 = 0;
    for (int i = 0; i < n * n; ++i) {
      sum += bank.patch[k][i];
      norm2 += bank.patch[k][i] * bank.patch[k][i];
    }
    CHECK(std::abs(sum) < 1e-12);
    CHECK(std::abs(norm2 - 1.0) < 1e-12);
    CHECK(bank.dir_u[k] == doctest::Approx(std::cos(bank.angle_deg[k] * M_PI / 180)).epsilon(1e-12));
    CHECK(bank.dir_v[k] == doctest::Approx(std::sin(bank.angle_deg[k] * M_PI / 180)).epsilon(1e-12));
  }
  // patch[k+4] evaluated at the rotated pixel equals patch[k]: rotating the
  // image by 90 degrees shifts the winning orientation by exactly four bins
  for (int bank_base : {0, TemplateBank::kOrientations}) {
    for (int k = 0; k < TemplateBank::kOrientations; ++k) {
      const int k_rot = bank_base + (k + 4) % TemplateBank::kOrientations;
      for (int v = 0; v < n; ++v)
        for (int u = 0; u < n; ++u) {
          const double a = bank.patch[bank_base + k][v * n + u];
          const double b = bank.patch[k_rot][u * n + (n - 1 - v)];
          CHECK(std::abs(a - b) < 1e-12);
        }
    }
  }
}

TEST_CASE("uniform image yields baseline confidence and no peaks") {
  Image img(64, 64, 1, 0.5);
  const DetectorConfig cfg;
  const CornerField f = analytic_corner_detector(img, cfg);
  CHECK(f.cells_y == 16);
  CHECK(f.cells_x == 16);
  CHECK(f.gradient_allowed);
  const double baseline = sigmoid(-cfg.bias);
  for (double c : f.confidence) CHECK(c == doctest::Approx(baseline).epsilon(1e-6));
  CHECK(corner_peaks(f).empty());
}

TEST_CASE("detector rejects images smaller than the template") {
  Image img(8, 32, 1, 0.5);
  CHECK_THROWS_AS(analytic_corner_detector(img), DataError);
}

TEST_CASE("ideal L corner is found at the painted cell") {
  Image img(64, 64, 1, 0.1);
  const double u0 = 30, v0 = 34;  // both on cell centers (stride 4 -> 4k+2)
  paint_l_corner(img, u0, v0, 0.0, 12.0, 0.9);
  const CornerField f = analytic_corner_detector(img);

  const size_t best = argmax_cell(f);
  const int cy = static_cast<int>(best) / f.cells_x, cx = static_cast<int>(best) % f.cells_x;
  CHECK(std::abs(f.center_u(cx) - u0) <= f.stride);
  CHECK(std::abs(f.center_v(cy) - v0) <= f.stride);
  // the normalized log-sum-exp deflates a lone matching template by
  // log(bank size)/temperature ~ 0.35, so an ideal corner sits near 0.8
  CHECK(f.confidence[best] > 0.6);
  // winner should be the matching orientation (bin 0 of the L bank)
  CHECK(f.dir_u[best] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(f.dir_v[best]) < 1e-12);

  const std::vector<CornerDetection> peaks = corner_peaks(f);
  REQUIRE(!peaks.empty());
  CHECK(std::abs(peaks[0].u - u0) < 2.5);
  CHECK(std::abs(peaks[0].v - v0) < 2.5);
}

TEST_CASE("rotating the image by 90 degrees rotates the detection") {
  // odd side: (u, v) -> (S-1-v, u) then maps cell centers (4k+2) to cell
  // centers, so the rotated corner stays grid-aligned and the bank-symmetry
  // argument applies cell by cell
  const int s = 65;
  Image img(s, s, 1, 0.1);
  const double u0 = 30, v0 = 34;
  paint_l_corner(img, u0, v0, 0.0, 12.0, 0.9);
  const Image rot = rot90(img);

  const CornerField f0 = analytic_corner_detector(img);
  const CornerField f1 = analytic_corner_detector(rot);

  const size_t b0 = argmax_cell(f0), b1 = argmax_cell(f1);
  CHECK(f1.confidence[b1] == doctest::Approx(f0.confidence[b0]).epsilon(1e-6));
  // corner position maps under (u, v) -> (S-1-v, u)
  const double eu = s - 1 - v0, ev = u0;
  const int cy1 = static_cast<int>(b1) / f1.cells_x, cx1 = static_cast<int>(b1) % f1.cells_x;
  CHECK(std::abs(f1.center_u(cx1) - eu) <= f1.stride + 1e-9);
  CHECK(std::abs(f1.center_v(cy1) - ev) <= f1.stride + 1e-9);
  // direction rotates by +90 degrees; allow one orientation bin of slack
  const double exp_du = -f0.dir_v[b0], exp_dv = f0.dir_u[b0];
  const double dot = exp_du * f1.dir_u[b1] + exp_dv * f1.dir_v[b1];
  CHECK(dot > std::cos(1.5 * 2 * M_PI / TemplateBank::kOrientations));
}

TEST_CASE("confidence is exactly translation-equivariant to one-cell shifts") {
  const int s = 64, stride = 4;
  Prng rng(411);
  Image base(s, s + stride, 1);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s + stride; ++x)
      base.at(0, y, x) = 0.3 + 0.4 * rng.uniform() + 0.2 * std::sin(0.4 * x + 0.2 * y);
  paint_l_corner(base, 34, 30, M_PI / 2, 10.0, 0.9);

  Image left(s, s, 1), right(s, s, 1);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      left.at(0, y, x) = base.at(0, y, x);
      right.at(0, y, x) = base.at(0, y, x + stride);
    }
  const CornerField fl = analytic_corner_detector(left);
  const CornerField fr = analytic_corner_detector(right);
  // cell cx of the shifted crop sees the same window as cell cx+1 of the
  // original, so interior cells must agree bitwise
  for (int cy = 1; cy < fl.cells_y - 1; ++cy)
    for (int cx = 1; cx + 1 < fl.cells_x - 1; ++cx) {
      CHECK(fr.confidence[fr.cell(cy, cx)] == fl.confidence[fl.cell(cy, cx + 1)]);
      CHECK(fr.dir_u[fr.cell(cy, cx)] == fl.dir_u[fl.cell(cy, cx + 1)]);
      CHECK(fr.dir_v[fr.cell(cy, cx)] == fl.dir_v[fl.cell(cy, cx + 1)]);
    }
}

TEST_CASE("detector gradient matches central finite differences") {
  const int s = 16;
  Prng rng(1903);
  Image img(s, s, 1);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      img.at(0, y, x) = 0.5 + 0.3 * std::sin(0.7 * x + 0.3 * y) + 0.15 * rng.uniform();

  const DetectorConfig cfg;
  const CornerField f = analytic_corner_detector(img, cfg);
  std::vector<double> w(f.cell_count());
  for (double& v : w) v = rng.uniform(-1.0, 1.0);

  Image grad(s, s, 1);
  corner_detector_backward(img, cfg, w, grad);

  const auto objective = [&](const Image& in) {
    const CornerField field = analytic_corner_detector(in, cfg);
    double acc = 0;
    for (size_t i = 0; i < field.cell_count(); ++i) acc += w[i] * field.confidence[i];
    return acc;
  };
  const double h = 1e-3;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      Image up = img, dn = img;
      up.at(0, y, x) += h;
      dn.at(0, y, x) -= h;
      const double fd = (objective(up) - objective(dn)) / (2 * h);
      const double an = grad.at(0, y, x);
      CHECK(std::abs(an - fd) <= 1e-3 * std::max(std::abs(an), std::abs(fd)) + 1e-8);
    }
}

TEST_CASE("detector gradient spreads evenly across color channels") {
  const int s = 16;
  Prng rng(77);
  Image img(s, s, 3);
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) img.at(ch, y, x) = 0.2 + 0.6 * rng.uniform();

  const DetectorConfig cfg;
  const CornerField f = analytic_corner_detector(img, cfg);
  std::vector<double> w(f.cell_count());
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  Image grad(s, s, 3);
  corner_detector_backward(img, cfg, w, grad);

  const auto objective = [&](const Image& in) {
    const CornerField field = analytic_corner_detector(in, cfg);
    double acc = 0;
    for (size_t i = 0; i < field.cell_count(); ++i) acc += w[i] * field.confidence[i];
    return acc;
  };
  const double h = 1e-3;
  for (int trial = 0; trial < 24; ++trial) {
    const int ch = static_cast<int>(rng.uniform_index(3));
    const int y = static_cast<int>(rng.uniform_index(s));
    const int x = static_cast<int>(rng.uniform_index(s));
    Image up = img, dn = img;
    up.at(ch, y, x) += h;
    dn.at(ch, y, x) -= h;
    const double fd = (objective(up) - objective(dn)) / (2 * h);
    CHECK(std::abs(grad.at(ch, y, x) - fd) <=
          1e-3 * std::max(std::abs(grad.at(ch, y, x)), std::abs(fd)) + 1e-8);
  }
}

TEST_CASE("corner peaks: empty field, close-pair suppression, planted peaks") {
  CornerField f;
  f.cells_y = 40;
  f.cells_x = 40;
  f.stride = 4;
  f.confidence.assign(f.cell_count(), 0.0);
  f.dir_u.assign(f.cell_count(), 1.0);
  f.dir_v.assign(f.cell_count(), 0.0);
  f.off_u.assign(f.cell_count(), 0.0);
  f.off_v.assign(f.cell_count(), 0.0);

  CHECK(corner_peaks(f).empty());

  SUBCASE("the stronger of two close peaks survives") {
    f.confidence[f.cell(10, 10)] = 0.8;
    f.confidence[f.cell(10, 11)] = 0.9;  // 4 px away < 8 px radius
    const auto peaks = corner_peaks(f, 0.25, 8.0);
    REQUIRE(peaks.size() == 1);
    CHECK(peaks[0].cell_x == 11);
    CHECK(peaks[0].confidence == doctest::Approx(0.9));
  }

  SUBCASE("well-separated planted peaks are all recovered") {
    Prng rng(5531);
    std::vector<std::pair<int, int>> planted;
    while (planted.size() < 10) {
      const int cy = 1 + static_cast<int>(rng.uniform_index(38));
      const int cx = 1 + static_cast<int>(rng.uniform_index(38));
      bool ok = true;
      for (auto [py, px] : planted) {
        const double d = std::hypot(4.0 * (px - cx), 4.0 * (py - cy));
        if (d <= 16.0) ok = false;  // keep pairwise separation > 2*nms_radius
      }
      if (ok) planted.emplace_back(cy, cx);
    }
    for (size_t i = 0; i < planted.size(); ++i)
      f.confidence[f.cell(planted[i].first, planted[i].second)] = 0.5 + 0.02 * i;

    const auto peaks = corner_peaks(f, 0.25, 8.0);
    REQUIRE(peaks.size() == 10);
    // brute-force oracle: detections are the planted cells, strongest first
    for (size_t i = 0; i < peaks.size(); ++i) {
      const auto [py, px] = planted[planted.size() - 1 - i];
      CHECK(peaks[i].cell_y == py);
      CHECK(peaks[i].cell_x == px);
      CHECK(peaks[i].u == doctest::Approx(px * 4 + 2));
      CHECK(peaks[i].v == doctest::Approx(py * 4 + 2));
    }
  }
}

TEST_CASE("edge scores separate painted lines from dark background") {
  Image img(64, 64, 1, 0.05);
  const double au = 10, av = 50, bu = 50, bv = 12;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const double d = seg_dist(x, y, au, av, bu, bv);
      img.at(0, y, x) = std::max(img.at(0, y, x), std::clamp(1.5 - d, 0.0, 1.0));
    }
  std::vector<CornerDetection> corners(3);
  corners[0].u = au;
  corners[0].v = av;
  corners[1].u = bu;
  corners[1].v = bv;
  corners[2].u = 58;  // dark area
  corners[2].v = 58;

  const EdgeScores es = edge_scores(corners, img);
  REQUIRE(es.scores.size() == 9);
  CHECK(es.score(0, 1) > 0.9);
  CHECK(es.score(0, 2) < 0.1);
  CHECK(es.score(1, 2) < 0.1);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(es.score(i, i) == 0.0);
    for (size_t j = 0; j < 3; ++j) CHECK(es.score(i, j) == es.score(j, i));
  }
}

TEST_CASE("edge score gradient matches a directional derivative") {
  const int s = 48;
  Prng rng(909);
  Image img(s, s, 3);
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) img.at(ch, y, x) = 0.1 + 0.5 * rng.uniform();
  // a block of saturated pixels pins the percentile normalizer; the
  // perturbation leaves it untouched so the scale is constant under FD
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 8; ++x) img.at(ch, y, x) = 1.0;

  std::vector<CornerDetection> corners(3);
  corners[0].u = 12;
  corners[0].v = 30;
  corners[1].u = 40;
  corners[1].v = 35;
  corners[2].u = 25;
  corners[2].v = 12;

  const EdgeConfig cfg;
  std::vector<double> d_scores(9);
  for (double& v : d_scores) v = rng.uniform(-1.0, 1.0);

  Image grad(s, s, 3);
  edge_scores_backward(corners, img, cfg, d_scores, grad);

  Image dir(s, s, 3);
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        dir.at(ch, y, x) = (y < 5 && x < 8) ? 0.0 : rng.uniform(-1.0, 1.0);

  const auto objective = [&](double eps) {
    Image shifted = img;
    for (size_t i = 0; i < shifted.size(); ++i) shifted.data()[i] += eps * dir.data()[i];
    const EdgeScores es = edge_scores(corners, shifted, cfg);
    double acc = 0;
    for (size_t i = 0; i < es.scores.size(); ++i) acc += d_scores[i] * es.scores[i];
    return acc;
  };
  const double eps = 1e-4;
  const double fd = (objective(eps) - objective(-eps)) / (2 * eps);
  double an = 0;
  for (size_t i = 0; i < grad.size(); ++i) an += grad.data()[i] * dir.data()[i];
  CHECK(std::abs(an - fd) <= 1e-6 + 1e-4 * std::abs(an));
}

TEST_CASE("corner field files round trip and reject misuse") {
  const char* path = "field_rt.pghm";
  CornerField f;
  f.cells_y = 6;
  f.cells_x = 5;
  f.stride = 4;
  Prng rng(31);
  f.confidence.resize(f.cell_count());
  f.dir_u.resize(f.cell_count());
  f.dir_v.resize(f.cell_count());
  f.off_u.resize(f.cell_count());
  f.off_v.resize(f.cell_count());
  for (size_t i = 0; i < f.cell_count(); ++i) {
    f.confidence[i] = rng.uniform();
    const double th = rng.uniform(0.0, 2 * M_PI);
    f.dir_u[i] = std::cos(th);
    f.dir_v[i] = std::sin(th);
    f.off_u[i] = rng.uniform(-2.0, 2.0);
    f.off_v[i] = rng.uniform(-2.0, 2.0);
  }
  save_corner_field(path, f);
  const CornerField g = load_corner_field(path, 4, 5, 6);
  CHECK(g.cells_y == 6);
  CHECK(g.cells_x == 5);
  CHECK(g.stride == 4);
  CHECK_FALSE(g.gradient_allowed);
  for (size_t i = 0; i < f.cell_count(); ++i) {
    CHECK(g.confidence[i] == static_cast<double>(static_cast<float>(f.confidence[i])));
    CHECK(g.off_u[i] == static_cast<double>(static_cast<float>(f.off_u[i])));
  }
  CHECK_THROWS_AS(require_student_field(g), UsageError);
  require_student_field(analytic_corner_detector(Image(16, 16, 1, 0.5)));  // must not throw

  CHECK_THROWS_AS(load_corner_field(path, 4, 7, 6), DataError);

  write_pghm(path, Image(6, 5, 4, 0.0));  // wrong plane count
  CHECK_THROWS_AS(load_corner_field(path, 4), DataError);

  Image bad(6, 5, 5, 0.0);
  bad.at(0, 0, 0) = 1.5;  // confidence outside [0, 1]
  write_pghm(path, bad);
  CHECK_THROWS_AS(load_corner_field(path, 4), DataError);
  std::remove(path);
}

TEST_CASE("annotation files round trip and validate") {
  const char* path = "annos_rt.json";
  std::vector<SlotAnnotation> annos(2);
  annos[0] = {22.0, 30.0, 22.0, 70.0, 90.0, "perpendicular"};
  annos[1] = {100.5, 40.25, 140.5, 40.25, 0.0, "parallel"};
  save_annotations(path, annos);
  const auto loaded = load_annotations(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].p1_u == 22.0);
  CHECK(loaded[0].p2_v == 70.0);
  CHECK(loaded[1].angle_deg == 0.0);
  CHECK(loaded[1].type == "parallel");

  annos[0].angle_deg = 360.0;
  save_annotations(path, annos);
  CHECK_THROWS_AS(load_annotations(path), DataError);

  annos[0].angle_deg = 10.0;
  annos[0].p2_u = annos[0].p1_u;
  annos[0].p2_v = annos[0].p1_v;
  save_annotations(path, annos);
  CHECK_THROWS_AS(load_annotations(path), DataError);
  std::remove(path);
}

TEST_CASE("annotations render to an ideal teacher field") {
  SlotAnnotation a;
  a.p1_u = 22;  // exactly the center of cell (7, 5) at stride 4
  a.p1_v = 30;
  a.p2_u = 50;
  a.p2_v = 30;
  a.angle_deg = 90.0;
  const CornerField f = annotations_to_teacher_field({a}, 20, 20, 4);
  CHECK_FALSE(f.gradient_allowed);

  CHECK(f.confidence[f.cell(7, 5)] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(f.confidence[f.cell(7, 6)] == doctest::Approx(std::exp(-1.0 / 8.0)).epsilon(1e-12));
  CHECK(f.confidence[f.cell(6, 5)] == doctest::Approx(std::exp(-1.0 / 8.0)).epsilon(1e-12));
  CHECK(f.off_u[f.cell(7, 5)] == 0.0);
  CHECK(f.off_v[f.cell(7, 5)] == 0.0);
  // a neighbor points back toward the annotation, clamped to half a cell
  CHECK(f.off_u[f.cell(7, 6)] == -2.0);
  CHECK(std::abs(f.dir_u[f.cell(7, 5)]) < 1e-12);
  CHECK(f.dir_v[f.cell(7, 5)] == doctest::Approx(1.0).epsilon(1e-12));

  const CornerField empty = annotations_to_teacher_field({}, 20, 20, 4);
  for (double c : empty.confidence) CHECK(c == 0.0);
}
