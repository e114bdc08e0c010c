#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "parkgauss/camera.hpp"
#include "parkgauss/image_io.hpp"
#include "parkgauss/prng.hpp"
#include "parkgauss/slotweights.hpp"

using namespace parkgauss;

namespace {

CornerField make_field(int cy, int cx, double conf = 0.0, bool grad = true) {
  CornerField f;
  f.cells_y = cy;
  f.cells_x = cx;
  f.stride = 4;
  f.gradient_allowed = grad;
  f.confidence.assign(f.cell_count(), conf);
  f.dir_u.assign(f.cell_count(), 1.0);
  f.dir_v.assign(f.cell_count(), 0.0);
  f.off_u.assign(f.cell_count(), 0.0);
  f.off_v.assign(f.cell_count(), 0.0);
  return f;
}

WeightMap const_map(int h, int w, double v, bool grad = false) {
  WeightMap m;
  m.values = Image(h, w, 1, v);
  m.gradient_allowed = grad;
  return m;
}

}  // namespace

TEST_CASE("shape_weights matches the shaping function at pinned points") {
  CornerField f = make_field(2, 3);
  f.confidence = {0.25, 0.75, 0.0, 1.0, 0.5, 0.9};
  const WeightMap w = shape_weights(f);
  CHECK(w.gradient_allowed);
  CHECK(w.values.at(0, 0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(w.values.at(0, 0, 1) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));

  ShapeParams sq;
  sq.gamma = 2.0;
  const WeightMap w2 = shape_weights(f, sq);
  CHECK(w2.values.at(0, 0, 0) == doctest::Approx(0.25).epsilon(1e-12));

  // teacher fields produce frozen maps
  f.gradient_allowed = false;
  CHECK_FALSE(shape_weights(f).gradient_allowed);
}

TEST_CASE("shape_weights is monotone and matches finite differences") {
  Prng rng(1201);
  CornerField f = make_field(4, 5);
  for (double& c : f.confidence) c = rng.uniform();

  for (double gamma : {1.0, 2.0}) {
    ShapeParams p;
    p.gamma = gamma;
    const WeightMap w = shape_weights(f, p);

    // monotonicity: bump one confidence, the weight must not decrease
    for (size_t i = 0; i < f.cell_count(); ++i) {
      CornerField g = f;
      g.confidence[i] += 0.1;
      const WeightMap v = shape_weights(g, p);
      CHECK(v.values.data()[i] >= w.values.data()[i]);
    }

    Image d_values(4, 5, 1);
    std::vector<double> weights(f.cell_count());
    for (size_t i = 0; i < f.cell_count(); ++i) {
      weights[i] = rng.uniform(-1.0, 1.0);
      d_values.data()[i] = weights[i];
    }
    std::vector<double> d_conf(f.cell_count(), 0.0);
    shape_weights_backward(f, p, d_values, d_conf);
    const double h = 1e-6;
    for (size_t i = 0; i < f.cell_count(); ++i) {
      CornerField up = f, dn = f;
      up.confidence[i] += h;
      dn.confidence[i] -= h;
      double fd = 0;
      const WeightMap wu = shape_weights(up, p), wd = shape_weights(dn, p);
      for (size_t j = 0; j < f.cell_count(); ++j)
        fd += weights[j] * (wu.values.data()[j] - wd.values.data()[j]);
      fd /= 2 * h;
      CHECK(d_conf[i] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("teacher-student mixes follow the paper constants and drop gradients") {
  const WeightMap t = const_map(3, 4, 1.0, false);
  const WeightMap s = const_map(3, 4, 0.0, true);

  const WeightMap m = mix_corner(t, s);
  CHECK(m.values.at(0, 1, 2) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK_FALSE(m.gradient_allowed);  // stop-gradient: no adjoint may flow

  const WeightMap me = mix_edge(t, s);
  CHECK(me.values.at(0, 0, 0) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK_FALSE(me.gradient_allowed);

  // convex-combination identity for equal inputs, any mix factor
  const WeightMap both = const_map(3, 4, 0.37, true);
  const WeightMap id = mix_corner(both, both, 0.33);
  for (size_t i = 0; i < id.values.size(); ++i)
    CHECK(id.values.data()[i] == doctest::Approx(0.37).epsilon(1e-15));

  // diagnostics can keep the student branch live
  CHECK(mix_corner(t, s, 0.8, /*stop_gradient=*/false).gradient_allowed);

  Image d_mix(3, 4, 1, 2.0);
  const Image blocked = mix_backward_student(d_mix, 0.8, true);
  const Image open = mix_backward_student(d_mix, 0.8, false);
  for (size_t i = 0; i < blocked.size(); ++i) {
    CHECK(blocked.data()[i] == 0.0);
    CHECK(open.data()[i] == doctest::Approx(0.2 * 2.0).epsilon(1e-15));
  }

  CHECK_THROWS_AS(mix_corner(t, const_map(4, 4, 0.0)), DataError);
}

TEST_CASE("edge tubes hit the pinned Gaussian values") {
  // endpoints 31 px apart: the 32 samples land on consecutive integer u
  std::vector<CornerDetection> corners(2);
  corners[0].u = 10;
  corners[0].v = 20;
  corners[1].u = 41;
  corners[1].v = 20;
  EdgeScores es;
  es.corners = corners;
  es.scores = {0.0, 0.9, 0.9, 0.0};

  const WeightMap w = rasterize_edges(es, 48, 64);
  CHECK_FALSE(w.gradient_allowed);
  CHECK(w.values.at(0, 20, 17) == doctest::Approx(1.0).epsilon(1e-15));  // on a sample
  CHECK(w.values.at(0, 20, 10) == doctest::Approx(1.0).epsilon(1e-15));  // endpoint
  // perpendicular distance sigma = 1.5 from the nearest sample
  const double expect = std::exp(-0.5);
  CHECK(w.values.at(0, 18, 17) == doctest::Approx(std::exp(-4.0 / 4.5)).epsilon(1e-12));
  SUBCASE("exact sigma offset via a half-pixel segment") {
    EdgeScores half = es;
    half.corners[0].v = 20.5;
    half.corners[1].v = 20.5;
    const WeightMap wh = rasterize_edges(half, 48, 64);
    CHECK(wh.values.at(0, 19, 17) == doctest::Approx(expect).epsilon(1e-12));
  }
  // beyond the 4-sigma band the tube is truncated to zero
  CHECK(w.values.at(0, 27, 17) == 0.0);
  CHECK(w.values.at(0, 20, 3) == 0.0);
}

TEST_CASE("edge tube distance is off-by-quarter-free along the segment") {
  // diagonal segment: the value on a pixel exactly between two samples uses
  // the true nearest-sample distance, not the perpendicular distance
  std::vector<CornerDetection> corners(2);
  corners[0].u = 5;
  corners[0].v = 5;
  corners[1].u = 36;
  corners[1].v = 36;
  EdgeScores es;
  es.corners = corners;
  es.scores = {0.0, 1.0, 1.0, 0.0};
  const WeightMap w = rasterize_edges(es, 48, 48);
  // samples fall on integer (k, k); pixel (10, 10) is a sample
  CHECK(w.values.at(0, 10, 10) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("edge selection keeps only the strongest K and tolerates scarcity") {
  std::vector<CornerDetection> corners(4);
  corners[0] = {4, 4, 1, 0, 0.9, 0, 0};
  corners[1] = {44, 4, 1, 0, 0.9, 0, 0};
  corners[2] = {4, 44, 1, 0, 0.9, 0, 0};
  corners[3] = {44, 44, 1, 0, 0.9, 0, 0};
  EdgeScores es;
  es.corners = corners;
  es.scores.assign(16, 0.0);
  const auto set = [&](size_t i, size_t j, double v) {
    es.scores[i * 4 + j] = v;
    es.scores[j * 4 + i] = v;
  };
  set(0, 1, 0.9);  // top edge
  set(2, 3, 0.8);  // bottom edge
  set(0, 2, 0.4);  // left edge, should be dropped at top_k = 2

  EdgeTubeParams p;
  p.top_k = 2;
  const WeightMap w = rasterize_edges(es, 48, 48, p);
  CHECK(w.values.at(0, 4, 24) > 0.9);   // on 0-1
  CHECK(w.values.at(0, 44, 24) > 0.9);  // on 2-3
  CHECK(w.values.at(0, 24, 4) == 0.0);                                   // 0-2 dropped

  SUBCASE("fewer positive scores than K uses what exists") {
    EdgeScores sparse = es;
    sparse.scores.assign(16, 0.0);
    sparse.scores[0 * 4 + 1] = sparse.scores[1 * 4 + 0] = 0.5;
    EdgeTubeParams p8;
    p8.top_k = 8;
    const WeightMap ws = rasterize_edges(sparse, 48, 48, p8);
    CHECK(ws.values.at(0, 4, 24) > 0.9);
    CHECK(ws.values.at(0, 44, 24) == 0.0);
  }

  SUBCASE("sum aggregation accumulates crossing tubes") {
    EdgeScores cross = es;
    cross.scores.assign(16, 0.0);
    cross.scores[0 * 4 + 3] = cross.scores[3 * 4 + 0] = 0.9;  // diagonal
    cross.scores[1 * 4 + 2] = cross.scores[2 * 4 + 1] = 0.9;  // anti-diagonal
    EdgeTubeParams sum = p;
    sum.aggregation = EdgeAggregation::kSum;
    const WeightMap wmax = rasterize_edges(cross, 48, 48, p);
    const WeightMap wsum = rasterize_edges(cross, 48, 48, sum);
    CHECK(wmax.values.at(0, 24, 24) > 0.8);
    // both tubes pass the center symmetrically: sum doubles the max
    CHECK(wsum.values.at(0, 24, 24) ==
          doctest::Approx(2 * wmax.values.at(0, 24, 24)).epsilon(1e-12));
  }
}

TEST_CASE("combine adds the edge band on top of the corner mask") {
  const WeightMap mix = const_map(5, 5, 0.8);
  const WeightMap edge = const_map(5, 5, 0.5);
  const WeightMap out = combine(mix, edge, 0.5);
  for (size_t i = 0; i < out.values.size(); ++i)
    CHECK(out.values.data()[i] == doctest::Approx(1.05).epsilon(1e-15));

  const WeightMap same = combine(mix, edge, 0.0);
  for (size_t i = 0; i < same.values.size(); ++i) CHECK(same.values.data()[i] == 0.8);

  validate_weight_map(out, 1.5);
  CHECK_THROWS_AS(validate_weight_map(out, 1.0), NumericalError);
  CHECK_THROWS_AS(combine(mix, const_map(4, 5, 0.0), 0.5), DataError);
}

TEST_CASE("field upsampling preserves constants, mass, and peak position") {
  Image field(6, 6, 1, 0.7);
  const Image up = upsample_field(field, 4, 24, 24);
  for (size_t i = 0; i < up.size(); ++i) CHECK(up.data()[i] == doctest::Approx(0.7).epsilon(1e-15));

  Image hot(6, 6, 1, 0.0);
  hot.at(0, 3, 2) = 1.0;
  const Image uh = upsample_field(hot, 4, 24, 24);
  double mass = 0, peak = -1;
  int pu = -1, pv = -1;
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 24; ++x) {
      mass += uh.at(0, y, x);
      if (uh.at(0, y, x) > peak) {
        peak = uh.at(0, y, x);
        pu = x;
        pv = y;
      }
    }
  CHECK(mass == doctest::Approx(16.0).epsilon(1e-5));  // stride^2
  CHECK(peak == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pu == 2 * 4 + 2);  // cell center in IPM pixels
  CHECK(pv == 3 * 4 + 2);

  // adjoint identity: <d_up, up(f)> == <up_backward(d_up), f>
  Prng rng(88);
  Image f2(6, 6, 1), d_up(24, 24, 1);
  for (size_t i = 0; i < f2.size(); ++i) f2.data()[i] = rng.uniform();
  for (size_t i = 0; i < d_up.size(); ++i) d_up.data()[i] = rng.uniform(-1.0, 1.0);
  const Image u2 = upsample_field(f2, 4, 24, 24);
  double lhs = 0;
  for (size_t i = 0; i < d_up.size(); ++i) lhs += d_up.data()[i] * u2.data()[i];
  Image d_field(6, 6, 1);
  upsample_field_backward(d_up, 4, d_field);
  double rhs = 0;
  for (size_t i = 0; i < f2.size(); ++i) rhs += d_field.data()[i] * f2.data()[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("weights project from field cells to BEV to camera pixels") {
  IpmConfig cfg;
  cfg.bev_width = 96;
  cfg.bev_height = 96;
  cfg.px_per_meter = 12;
  const auto rig = default_surround_rig();
  const IpmGrid grid = build_ipm_grid(rig, cfg);

  const WeightMap field = const_map(24, 24, 0.7);
  const ProjectedWeights pw = upsample_and_backproject(field, 4, grid);
  CHECK(pw.bev.height() == 96);
  CHECK(pw.bev.width() == 96);
  REQUIRE(pw.cams.size() == rig.size());

  size_t ground_px = 0;
  for (size_t c = 0; c < rig.size(); ++c) {
    const Image& ground = grid.ground[c];
    for (int y = 0; y < pw.cams[c].height(); ++y)
      for (int x = 0; x < pw.cams[c].width(); ++x) {
        const double w = pw.cams[c].at(0, y, x);
        if (ground.at(2, y, x) > 0.5) {
          CHECK(w == doctest::Approx(0.7).epsilon(1e-12));
          ++ground_px;
        } else {
          CHECK(w == 0.0);
        }
      }
  }
  CHECK(ground_px > 1000);

  // passthrough: a map already at IPM resolution is not resampled
  WeightMap bev_res;
  bev_res.values = Image(96, 96, 1, 0.3);
  const ProjectedWeights direct = upsample_and_backproject(bev_res, 4, grid);
  CHECK(direct.bev.at(0, 50, 50) == 0.3);
}

TEST_CASE("weight maps dump to heatmap and png files") {
  WeightMap w = const_map(8, 10, 0.4);
  w.values.at(0, 3, 4) = 1.3;
  save_weight_map("w_dump.pghm", w);
  save_weight_map_png("w_dump.png", w);
  const Image back = read_pghm("w_dump.pghm");
  CHECK(back.height() == 8);
  CHECK(back.width() == 10);
  CHECK(back.at(0, 3, 4) == doctest::Approx(1.3).epsilon(1e-6));
  const Image png = read_png("w_dump.png");
  CHECK(png.at(0, 3, 4) == doctest::Approx(1.0).epsilon(1e-2));  // normalized peak
  std::remove("w_dump.pghm");
  std::remove("w_dump.png");
}
