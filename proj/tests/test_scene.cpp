#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "parkgauss/prng.hpp"
#include "parkgauss/scene.hpp"

using namespace parkgauss;

TEST_CASE("quaternion rotation matches eigen and is orthonormal") {
  Prng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    const Eigen::Matrix3d r = quat_to_rotation(q);
    CHECK((r * r.transpose() - Eigen::Matrix3d::Identity()).norm() < 1e-12);
    CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    const Eigen::Quaterniond eq(q[0], q[1], q[2], q[3]);
    CHECK((r - eq.normalized().toRotationMatrix()).norm() < 1e-12);
  }
}

TEST_CASE("quaternion rotation backward matches finite differences") {
  Prng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    if (q.norm() < 0.5) q[0] += 1.0;
    Eigen::Matrix3d g;
    for (int i = 0; i < 9; ++i) g.data()[i] = rng.normal();

    const Eigen::Vector4d grad = quat_rotation_backward(q, g);
    const double h = 1e-6;
    for (int d = 0; d < 4; ++d) {
      Eigen::Vector4d qp = q, qm = q;
      qp[d] += h;
      qm[d] -= h;
      const double fd =
          ((quat_to_rotation(qp) - quat_to_rotation(qm)).array() * g.array()).sum() / (2 * h);
      CHECK(grad[d] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("covariance backward matches finite differences") {
  Prng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    if (q.norm() < 0.5) q[0] += 1.0;
    const Eigen::Vector3d ls(rng.uniform(-2, 1), rng.uniform(-2, 1), rng.uniform(-2, 1));
    Eigen::Matrix3d g;
    for (int i = 0; i < 9; ++i) g.data()[i] = rng.normal();

    GaussianScene s;
    s.resize(1);
    auto cov = [&](const Eigen::Vector4d& qq, const Eigen::Vector3d& lls) {
      for (int i = 0; i < 4; ++i) s.quat[i] = qq[i];
      for (int i = 0; i < 3; ++i) s.log_scales[i] = lls[i];
      return s.covariance(0);
    };

    Eigen::Vector4d dq = Eigen::Vector4d::Zero();
    Eigen::Vector3d dls = Eigen::Vector3d::Zero();
    covariance_backward(q, ls, g, &dq, &dls);

    const double h = 1e-6;
    for (int d = 0; d < 4; ++d) {
      Eigen::Vector4d qp = q, qm = q;
      qp[d] += h;
      qm[d] -= h;
      const double fd = ((cov(qp, ls) - cov(qm, ls)).array() * g.array()).sum() / (2 * h);
      CHECK(dq[d] == doctest::Approx(fd).epsilon(1e-5));
    }
    for (int d = 0; d < 3; ++d) {
      Eigen::Vector3d lp = ls, lm = ls;
      lp[d] += h;
      lm[d] -= h;
      const double fd = ((cov(q, lp) - cov(q, lm)).array() * g.array()).sum() / (2 * h);
      CHECK(dls[d] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("covariance is spd and respects scales") {
  GaussianScene s;
  s.resize(1);
  s.log_scales[0] = std::log(2.0);
  s.log_scales[1] = std::log(0.5);
  s.log_scales[2] = std::log(1.0);
  const Eigen::Matrix3d cov = s.covariance(0);
  // Identity rotation: covariance is diag(scale^2).
  CHECK(cov(0, 0) == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(cov(1, 1) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(cov(2, 2) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cov(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("sh basis values at canonical directions") {
  double b[9];
  sh_basis(2, Eigen::Vector3d(0, 0, 1), b);
  CHECK(b[0] == doctest::Approx(0.28209479177387814).epsilon(1e-14));
  CHECK(b[1] == 0.0);
  CHECK(b[2] == doctest::Approx(0.4886025119029199).epsilon(1e-14));
  CHECK(b[6] == doctest::Approx(2.0 * 0.31539156525252005).epsilon(1e-12));
  CHECK(b[8] == 0.0);

  sh_basis(2, Eigen::Vector3d(1, 0, 0), b);
  CHECK(b[3] == doctest::Approx(0.4886025119029199).epsilon(1e-14));
  CHECK(b[6] == doctest::Approx(-0.31539156525252005).epsilon(1e-12));
  CHECK(b[8] == doctest::Approx(0.5462742152960396).epsilon(1e-12));
}

TEST_CASE("sh color evaluation and dc convention") {
  GaussianScene s;
  s.sh_degree = 2;
  s.resize(1);
  // DC set so the view-independent color equals 0.8.
  const double dc = (0.8 - 0.5) / 0.28209479177387814;
  s.sh[0] = dc;
  const Eigen::Vector3d c =
      sh_eval_color(s.sh.data(), 2, Eigen::Vector3d(0.3, -0.5, 0.8).normalized());
  CHECK(c[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(c[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(c[2] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("sh color backward matches finite differences and gates clamps") {
  Prng rng(29);
  const int nb = 9;
  std::vector<double> sh(3 * nb);
  for (auto& v : sh) v = 0.2 * rng.normal();
  const Eigen::Vector3d dir = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
  const Eigen::Vector3d dcol(rng.normal(), rng.normal(), rng.normal());

  std::vector<double> dsh(3 * nb, 0.0);
  Eigen::Vector3d ddir = Eigen::Vector3d::Zero();
  sh_eval_color_backward(sh.data(), 2, dir, dcol, dsh.data(), &ddir);

  const double h = 1e-6;
  for (int i = 0; i < 3 * nb; ++i) {
    std::vector<double> p = sh, m = sh;
    p[static_cast<size_t>(i)] += h;
    m[static_cast<size_t>(i)] -= h;
    const double fd =
        (sh_eval_color(p.data(), 2, dir) - sh_eval_color(m.data(), 2, dir)).dot(dcol) / (2 * h);
    CHECK(dsh[static_cast<size_t>(i)] == doctest::Approx(fd).epsilon(1e-5));
  }

  // Saturated channel passes no gradient.
  std::fill(sh.begin(), sh.begin() + nb, 0.0);
  sh[0] = 10.0;  // red clamps at 1
  std::fill(dsh.begin(), dsh.end(), 0.0);
  sh_eval_color_backward(sh.data(), 2, dir, Eigen::Vector3d(1, 0, 0), dsh.data(), nullptr);
  for (int i = 0; i < nb; ++i) CHECK(dsh[static_cast<size_t>(i)] == 0.0);
}

TEST_CASE("init from points on a unit grid") {
  std::vector<Eigen::Vector3d> pts;
  std::vector<Eigen::Vector3d> cols;
  for (int x = 0; x < 4; ++x)
    for (int y = 0; y < 4; ++y)
      for (int z = 0; z < 4; ++z) {
        pts.emplace_back(x, y, z);
        cols.emplace_back(0.25, 0.5, 0.75);
      }
  const GaussianScene s = init_from_points(pts, cols, pts.size(), 2, 1);
  REQUIRE(s.size() == 64);
  // Three nearest neighbours on a unit grid are all at distance one.
  for (double ls : s.log_scales) CHECK(ls == doctest::Approx(0.0).epsilon(1e-12));
  for (size_t i = 0; i < s.size(); ++i) CHECK(s.opacity(i) == doctest::Approx(0.1).epsilon(1e-12));
  // DC reproduces the albedo.
  const Eigen::Vector3d c = sh_eval_color(s.sh.data(), 2, Eigen::Vector3d(0, 0, 1));
  CHECK(c[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(c[2] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("init handles subsample, oversample, and a single point") {
  std::vector<Eigen::Vector3d> pts{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  std::vector<Eigen::Vector3d> cols(4, Eigen::Vector3d(0.5, 0.5, 0.5));

  CHECK(init_from_points(pts, cols, 2, 2, 5).size() == 2);
  CHECK(init_from_points(pts, cols, 10, 2, 5).size() == 10);

  const GaussianScene one = init_from_points({{1, 2, 3}}, {Eigen::Vector3d(1, 1, 1)}, 1, 2, 5);
  REQUIRE(one.size() == 1);
  CHECK(one.mu_at(0).isApprox(Eigen::Vector3d(1, 2, 3)));
  CHECK(one.log_scales[0] == doctest::Approx(std::log(0.1)).epsilon(1e-12));

  CHECK_THROWS_AS(init_from_points({}, {}, 4, 2, 5), DataError);
}

TEST_CASE("init random stays inside the box") {
  Eigen::AlignedBox3d box(Eigen::Vector3d(-1, -2, 0), Eigen::Vector3d(1, 2, 3));
  const GaussianScene s = init_random(box, 100, 1, 7);
  REQUIRE(s.size() == 100);
  CHECK(s.sh_degree == 1);
  for (size_t i = 0; i < s.size(); ++i) CHECK(box.contains(s.mu_at(i)));
  // Same seed reproduces bitwise.
  const GaussianScene s2 = init_random(box, 100, 1, 7);
  CHECK(s.mu == s2.mu);
}

TEST_CASE("checkpoint round trip") {
  Eigen::AlignedBox3d box(Eigen::Vector3d(-5, -5, 0), Eigen::Vector3d(5, 5, 3));
  GaussianScene s = init_random(box, 37, 2, 99);
  Prng rng(31);
  for (auto& v : s.sh) v = rng.normal();
  for (auto& v : s.log_scales) v += 0.1 * rng.normal();

  const std::string path =
      (std::filesystem::temp_directory_path() / "pg_ckpt_test.pgsc").string();
  save_checkpoint(path, s);
  const GaussianScene back = load_checkpoint(path);
  REQUIRE(back.size() == s.size());
  CHECK(back.sh_degree == 2);
  for (size_t i = 0; i < s.mu.size(); ++i)
    CHECK(back.mu[i] == static_cast<double>(static_cast<float>(s.mu[i])));
  for (size_t i = 0; i < s.sh.size(); ++i)
    CHECK(back.sh[i] == static_cast<double>(static_cast<float>(s.sh[i])));
  for (size_t i = 0; i < back.size(); ++i)
    CHECK(Eigen::Map<const Eigen::Vector4d>(back.quat.data() + 4 * i).norm() ==
          doctest::Approx(1.0).epsilon(1e-12));

  // Corrupt the magic.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  std::filesystem::remove(path);
}
