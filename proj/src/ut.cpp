#include "parkgauss/ut.hpp"

#include <cmath>

namespace parkgauss {

Eigen::Matrix3d cholesky3(const Eigen::Matrix3d& a) {
  const double scale = std::max({std::abs(a(0, 0)), std::abs(a(1, 1)), std::abs(a(2, 2)), 1e-300});
  const double tol = 1e-10 * scale;

  Eigen::Matrix3d l = Eigen::Matrix3d::Zero();
  double p = a(0, 0);
  if (p < -tol) throw NumericalError("cholesky3: matrix not positive semidefinite");
  l(0, 0) = p > 0.0 ? std::sqrt(p) : 0.0;
  if (l(0, 0) > 0.0) {
    l(1, 0) = a(1, 0) / l(0, 0);
    l(2, 0) = a(2, 0) / l(0, 0);
  }
  p = a(1, 1) - l(1, 0) * l(1, 0);
  if (p < -tol) throw NumericalError("cholesky3: matrix not positive semidefinite");
  l(1, 1) = p > 0.0 ? std::sqrt(p) : 0.0;
  if (l(1, 1) > 0.0) l(2, 1) = (a(2, 1) - l(2, 0) * l(1, 0)) / l(1, 1);
  p = a(2, 2) - l(2, 0) * l(2, 0) - l(2, 1) * l(2, 1);
  if (p < -tol) throw NumericalError("cholesky3: matrix not positive semidefinite");
  l(2, 2) = p > 0.0 ? std::sqrt(p) : 0.0;
  return l;
}

Eigen::Matrix3d cholesky3_backward(const Eigen::Matrix3d& l, const Eigen::Matrix3d& d_l) {
  // Reverse of the scalar recurrence in cholesky3. Columns that collapsed to
  // zero pivots carry no gradient (subgradient zero).
  double dl00 = d_l(0, 0), dl10 = d_l(1, 0), dl20 = d_l(2, 0);
  double dl11 = d_l(1, 1), dl21 = d_l(2, 1), dl22 = d_l(2, 2);
  Eigen::Matrix3d da = Eigen::Matrix3d::Zero();

  if (l(2, 2) > 0.0) {
    const double dt = dl22 / (2.0 * l(2, 2));
    da(2, 2) += dt;
    dl20 += -2.0 * l(2, 0) * dt;
    dl21 += -2.0 * l(2, 1) * dt;
  }
  if (l(1, 1) > 0.0) {
    const double dt21 = dl21 / l(1, 1);
    dl11 += -l(2, 1) / l(1, 1) * dl21;
    da(2, 1) += dt21;
    dl20 += -l(1, 0) * dt21;
    dl10 += -l(2, 0) * dt21;

    const double dt11 = dl11 / (2.0 * l(1, 1));
    da(1, 1) += dt11;
    dl10 += -2.0 * l(1, 0) * dt11;
  }
  if (l(0, 0) > 0.0) {
    da(2, 0) += dl20 / l(0, 0);
    dl00 += -l(2, 0) / l(0, 0) * dl20;
    da(1, 0) += dl10 / l(0, 0);
    dl00 += -l(1, 0) / l(0, 0) * dl10;
    da(0, 0) += dl00 / (2.0 * l(0, 0));
  }
  return da;
}

SigmaPoints sigma_points(const Eigen::Vector3d& mu, const Eigen::Matrix3d& sigma,
                         const UtParams& ut) {
  const double lambda = ut.lambda();
  const double n_lam = 3.0 + lambda;
  if (!(n_lam > 0.0))
    throw NumericalError("sigma_points: n + lambda must be positive",
                         "lambda = " + std::to_string(lambda));

  SigmaPoints sp;
  sp.chol = cholesky3(sigma);
  const double c = std::sqrt(n_lam);

  sp.x[0] = mu;
  for (int i = 0; i < 3; ++i) {
    const Eigen::Vector3d col = c * sp.chol.col(i);
    sp.x[static_cast<size_t>(1 + i)] = mu + col;
    sp.x[static_cast<size_t>(4 + i)] = mu - col;
  }
  sp.w_mean[0] = lambda / n_lam;
  sp.w_cov[0] = sp.w_mean[0] + (1.0 - ut.alpha * ut.alpha + ut.beta);
  for (int i = 1; i < 7; ++i) {
    sp.w_mean[static_cast<size_t>(i)] = 1.0 / (2.0 * n_lam);
    sp.w_cov[static_cast<size_t>(i)] = 1.0 / (2.0 * n_lam);
  }
  return sp;
}

void sigma_points_backward(const SigmaPoints& sp, const UtParams& ut,
                           const std::array<Eigen::Vector3d, 7>& d_x, Eigen::Vector3d* d_mu,
                           Eigen::Matrix3d* d_sigma) {
  const double c = std::sqrt(3.0 + ut.lambda());
  if (d_mu)
    for (const auto& g : d_x) *d_mu += g;
  if (d_sigma) {
    Eigen::Matrix3d d_l = Eigen::Matrix3d::Zero();
    for (int i = 0; i < 3; ++i)
      d_l.col(i) = c * (d_x[static_cast<size_t>(1 + i)] - d_x[static_cast<size_t>(4 + i)]);
    *d_sigma += cholesky3_backward(sp.chol, d_l);
  }
}

UtProjection ut_project(const Eigen::Vector3d& mu, const Eigen::Matrix3d& sigma,
                        const FisheyeIntrinsics& intr, const Pose& world_to_cam,
                        const UtParams& ut, double lowpass, double near) {
  UtProjection out;
  const Eigen::Vector3d center_cam = world_to_cam.apply(mu);
  out.depth = center_cam.z();
  out.cam_dist = center_cam.norm();
  if (!(out.depth > near)) return out;

  out.sp = sigma_points(mu, sigma, ut);
  for (int i = 0; i < 7; ++i) {
    const Eigen::Vector3d pc = world_to_cam.apply(out.sp.x[static_cast<size_t>(i)]);
    const auto px = fisheye_project(intr, pc);
    if (!px) return out;  // any sigma point outside the cone culls the splat
    out.p[static_cast<size_t>(i)] = *px;
  }

  out.mean2d.setZero();
  for (int i = 0; i < 7; ++i) out.mean2d += out.sp.w_mean[static_cast<size_t>(i)] * out.p[static_cast<size_t>(i)];
  out.cov2d.setZero();
  for (int i = 0; i < 7; ++i) {
    const Eigen::Vector2d d = out.p[static_cast<size_t>(i)] - out.mean2d;
    out.cov2d += out.sp.w_cov[static_cast<size_t>(i)] * (d * d.transpose());
  }
  out.cov2d(0, 0) += lowpass;
  out.cov2d(1, 1) += lowpass;
  out.valid = true;
  return out;
}

void ut_project_backward(const UtProjection& proj, const FisheyeIntrinsics& intr,
                         const Pose& world_to_cam, const UtParams& ut,
                         const Eigen::Vector2d& d_mean2d, const Eigen::Matrix2d& d_cov2d,
                         Eigen::Vector3d* d_mu, Eigen::Matrix3d* d_sigma) {
  const Eigen::Matrix2d dsym = d_cov2d + d_cov2d.transpose();
  const Eigen::Matrix3d rot = world_to_cam.q.toRotationMatrix();

  // Moment adjoints: cov2d = sum w_c (p - m)(p - m)^T, mean2d = sum w_m p.
  Eigen::Vector2d d_mean_total = d_mean2d;
  std::array<Eigen::Vector2d, 7> d_p;
  for (int i = 0; i < 7; ++i) {
    const Eigen::Vector2d diff = proj.p[static_cast<size_t>(i)] - proj.mean2d;
    d_p[static_cast<size_t>(i)] = proj.sp.w_cov[static_cast<size_t>(i)] * (dsym * diff);
    d_mean_total -= d_p[static_cast<size_t>(i)];
  }
  for (int i = 0; i < 7; ++i)
    d_p[static_cast<size_t>(i)] += proj.sp.w_mean[static_cast<size_t>(i)] * d_mean_total;

  // Through the projection at each sigma point: p = pi(R x + t).
  std::array<Eigen::Vector3d, 7> d_x;
  for (int i = 0; i < 7; ++i) {
    const Eigen::Vector3d pc = world_to_cam.apply(proj.sp.x[static_cast<size_t>(i)]);
    Eigen::Vector2d px;
    Eigen::Matrix<double, 2, 3> jac;
    if (!fisheye_project_jacobian(intr, pc, &px, &jac))
      throw NumericalError("ut_project_backward: sigma point left the validity cone");
    d_x[static_cast<size_t>(i)] = rot.transpose() * (jac.transpose() * d_p[static_cast<size_t>(i)]);
  }
  sigma_points_backward(proj.sp, ut, d_x, d_mu, d_sigma);
}

}  // namespace parkgauss
