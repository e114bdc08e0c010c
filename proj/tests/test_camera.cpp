#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "parkgauss/camera.hpp"
#include "parkgauss/prng.hpp"

using namespace parkgauss;

namespace {

FisheyeIntrinsics desk_intrinsics() {
  FisheyeIntrinsics in;
  in.fx = 120.0;
  in.fy = 121.5;
  in.cx = 160.0;
  in.cy = 120.0;
  in.k = {-0.02, 0.004, -0.0008, 0.0001};
  in.width = 320;
  in.height = 240;
  in.validate();
  return in;
}

}  // namespace

TEST_CASE("intrinsics validation") {
  FisheyeIntrinsics in = desk_intrinsics();
  CHECK_NOTHROW(in.validate());

  FisheyeIntrinsics bad = in;
  bad.fx = -1;
  CHECK_THROWS_AS(bad.validate(), DataError);

  bad = in;
  bad.cx = 500;
  CHECK_THROWS_AS(bad.validate(), DataError);

  // Strongly negative k1 makes d(theta) turn over inside the cone.
  bad = in;
  bad.k = {-0.5, 0.0, 0.0, 0.0};
  CHECK_THROWS_AS(bad.validate(), DataError);
}

TEST_CASE("project/unproject round trip") {
  const FisheyeIntrinsics in = desk_intrinsics();
  Prng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const double theta = rng.uniform(0.0, in.theta_max * 0.98);
    const double phi = rng.uniform(0.0, 2.0 * M_PI);
    const Eigen::Vector3d ray(std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi),
                              std::cos(theta));
    const double depth = rng.uniform(0.5, 20.0);
    const auto px = fisheye_project(in, depth * ray);
    REQUIRE(px.has_value());
    const Eigen::Vector3d back = fisheye_unproject(in, *px);
    CHECK((back - ray).norm() < 1e-10);
  }
}

TEST_CASE("projection rejects rays at or beyond the cone") {
  const FisheyeIntrinsics in = desk_intrinsics();
  const double theta = in.theta_max + 0.01;
  const Eigen::Vector3d p(std::sin(theta), 0.0, std::cos(theta));
  CHECK(!fisheye_project(in, p).has_value());
  CHECK(!fisheye_project(in, Eigen::Vector3d(0, 0, -1)).has_value());
}

TEST_CASE("on-axis projection hits the principal point") {
  const FisheyeIntrinsics in = desk_intrinsics();
  const auto px = fisheye_project(in, Eigen::Vector3d(0, 0, 2.5));
  REQUIRE(px.has_value());
  CHECK(px->x() == doctest::Approx(in.cx).epsilon(1e-12));
  CHECK(px->y() == doctest::Approx(in.cy).epsilon(1e-12));
  CHECK(fisheye_unproject(in, Eigen::Vector2d(in.cx, in.cy)).isApprox(Eigen::Vector3d(0, 0, 1)));
}

TEST_CASE("projection jacobian matches finite differences") {
  const FisheyeIntrinsics in = desk_intrinsics();
  Prng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const double theta = rng.uniform(0.05, in.theta_max * 0.95);
    const double phi = rng.uniform(0.0, 2.0 * M_PI);
    const double depth = rng.uniform(0.5, 10.0);
    const Eigen::Vector3d p = depth * Eigen::Vector3d(std::sin(theta) * std::cos(phi),
                                                      std::sin(theta) * std::sin(phi),
                                                      std::cos(theta));
    Eigen::Vector2d px;
    Eigen::Matrix<double, 2, 3> jac;
    REQUIRE(fisheye_project_jacobian(in, p, &px, &jac));

    const double h = 1e-6;
    for (int d = 0; d < 3; ++d) {
      Eigen::Vector3d pp = p, pm = p;
      pp[d] += h;
      pm[d] -= h;
      const auto fp = fisheye_project(in, pp);
      const auto fm = fisheye_project(in, pm);
      REQUIRE(fp.has_value());
      REQUIRE(fm.has_value());
      const Eigen::Vector2d fd = (*fp - *fm) / (2 * h);
      for (int r = 0; r < 2; ++r)
        CHECK(jac(r, d) == doctest::Approx(fd[r]).epsilon(1e-5));
    }
  }
}

TEST_CASE("on-axis jacobian reduces to pinhole") {
  const FisheyeIntrinsics in = desk_intrinsics();
  Eigen::Vector2d px;
  Eigen::Matrix<double, 2, 3> jac;
  REQUIRE(fisheye_project_jacobian(in, Eigen::Vector3d(0, 0, 2.0), &px, &jac));
  CHECK(jac(0, 0) == doctest::Approx(in.fx / 2.0));
  CHECK(jac(1, 1) == doctest::Approx(in.fy / 2.0));
  CHECK(jac(0, 1) == 0.0);
}

TEST_CASE("unprojection fails loudly outside the invertible range") {
  FisheyeIntrinsics in = desk_intrinsics();
  // Bypass validate(): a model whose distortion turns over makes large
  // radii unreachable, so Newton cannot converge.
  in.k = {-0.5, 0.0, 0.0, 0.0};
  CHECK_THROWS_AS(fisheye_unproject(in, Eigen::Vector2d(319, 239)), NumericalError);
}

TEST_CASE("pose algebra") {
  Prng rng(17);
  Pose a, b;
  a.q = Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal()).normalized();
  a.t = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
  b.q = Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal()).normalized();
  b.t = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());

  const Eigen::Vector3d x(0.3, -1.2, 2.0);
  CHECK((a.apply_inverse(a.apply(x)) - x).norm() < 1e-12);
  CHECK((a.inverse().apply(a.apply(x)) - x).norm() < 1e-12);
  CHECK(((a * b).apply(x) - a.apply(b.apply(x))).norm() < 1e-12);
  // center() is the camera origin in the parent frame.
  CHECK(a.apply(a.center()).norm() < 1e-12);

  Pose bad;
  bad.q = Eigen::Quaterniond(1.1, 0, 0, 0);
  CHECK_THROWS_AS(bad.validate(), DataError);
}

TEST_CASE("calibration json round trip") {
  std::vector<FisheyeCamera> cams(2);
  cams[0].name = "front";
  cams[0].intr = desk_intrinsics();
  cams[0].pose.q = Eigen::Quaterniond(Eigen::AngleAxisd(0.5, Eigen::Vector3d::UnitX()));
  cams[0].pose.t = Eigen::Vector3d(0.1, -0.2, 0.9);
  cams[1] = cams[0];
  cams[1].name = "rear";
  cams[1].pose.t = Eigen::Vector3d(-0.1, 0.2, 0.8);

  const std::string path =
      (std::filesystem::temp_directory_path() / "pg_calib_test.json").string();
  save_calibration(path, cams);
  const auto back = load_calibration(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "front");
  CHECK(back[1].name == "rear");
  CHECK(back[0].intr.fx == doctest::Approx(cams[0].intr.fx).epsilon(1e-12));
  CHECK(back[0].intr.k[3] == doctest::Approx(cams[0].intr.k[3]).epsilon(1e-12));
  CHECK(back[0].pose.q.angularDistance(cams[0].pose.q) < 1e-12);
  CHECK((back[1].pose.t - cams[1].pose.t).norm() < 1e-12);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(load_calibration("/nonexistent/calib.json"), DataError);
}
