#pragma once

#include <Eigen/Dense>
#include <array>

#include "parkgauss/camera.hpp"
#include "parkgauss/common.hpp"

namespace parkgauss {

// Unscented transform parameters; defaults give lambda = 0 for n = 3.
struct UtParams {
  double alpha = 1.0;
  double beta = 2.0;
  double kappa = 0.0;

  double lambda() const { return alpha * alpha * (3.0 + kappa) - 3.0; }
};

// 2n+1 = 7 sigma points for a 3D Gaussian, with separate mean/covariance
// weights.
struct SigmaPoints {
  std::array<Eigen::Vector3d, 7> x;
  std::array<double, 7> w_mean;
  std::array<double, 7> w_cov;
  Eigen::Matrix3d chol;  // lower factor of Sigma, kept for the backward pass
};

// Lower-triangular Cholesky factor of a symmetric PSD 3x3 matrix. Zero
// pivots are tolerated (the corresponding column is zeroed); pivots below
// -tol relative to the diagonal scale raise NumericalError.
Eigen::Matrix3d cholesky3(const Eigen::Matrix3d& a);

// Adjoint of cholesky3: maps dL/dL_factor to dL/dA. The returned matrix is
// lower triangular (the factorization reads only the lower triangle of A);
// combined with A = M M^T this yields symmetric parameter gradients.
Eigen::Matrix3d cholesky3_backward(const Eigen::Matrix3d& l, const Eigen::Matrix3d& d_l);

SigmaPoints sigma_points(const Eigen::Vector3d& mu, const Eigen::Matrix3d& sigma,
                         const UtParams& ut);

// Backward companion: given gradients w.r.t. the sigma point locations,
// accumulate gradients w.r.t. mu and Sigma.
void sigma_points_backward(const SigmaPoints& sp, const UtParams& ut,
                           const std::array<Eigen::Vector3d, 7>& d_x, Eigen::Vector3d* d_mu,
                           Eigen::Matrix3d* d_sigma);

// UT push of a 3D Gaussian through a posed fisheye projection. The camera
// pose maps world to camera: x_cam = q x_world + t.
struct UtProjection {
  bool valid = false;
  Eigen::Vector2d mean2d = Eigen::Vector2d::Zero();
  Eigen::Matrix2d cov2d = Eigen::Matrix2d::Zero();  // includes the low-pass floor
  double depth = 0.0;     // camera-frame z of the center
  double cam_dist = 0.0;  // Euclidean distance of the center, used for sorting
  // Saved forward state for the backward pass.
  SigmaPoints sp;
  std::array<Eigen::Vector2d, 7> p;
};

// All seven sigma points must project inside the validity cone and the center
// must be in front of the camera (z > near) for the splat to be valid.
UtProjection ut_project(const Eigen::Vector3d& mu, const Eigen::Matrix3d& sigma,
                        const FisheyeIntrinsics& intr, const Pose& world_to_cam,
                        const UtParams& ut, double lowpass, double near);

// Accumulates dL/dmu and dL/dSigma from gradients of the projected moments.
// d_cov2d is the full-matrix adjoint of cov2d.
void ut_project_backward(const UtProjection& proj, const FisheyeIntrinsics& intr,
                         const Pose& world_to_cam, const UtParams& ut,
                         const Eigen::Vector2d& d_mean2d, const Eigen::Matrix2d& d_cov2d,
                         Eigen::Vector3d* d_mu, Eigen::Matrix3d* d_sigma);

}  // namespace parkgauss
