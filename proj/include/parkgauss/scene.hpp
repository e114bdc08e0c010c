#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "parkgauss/common.hpp"
#include "parkgauss/prng.hpp"

namespace parkgauss {

inline int sh_basis_size(int degree) { return (degree + 1) * (degree + 1); }

// Gaussian primitive soup, structure-of-arrays. Parameters live in the
// domains the optimizer steps in: log scales, logit opacity, raw quaternion
// (renormalized after each step). SH coefficients are channel-major per
// Gaussian: [r0..rB-1, g0..gB-1, b0..bB-1].
struct GaussianScene {
  int sh_degree = 2;
  std::vector<double> mu;             // n*3
  std::vector<double> quat;           // n*4, (w,x,y,z)
  std::vector<double> log_scales;     // n*3
  std::vector<double> logit_opacity;  // n
  std::vector<double> sh;             // n*3*basis

  size_t size() const { return logit_opacity.size(); }
  int basis() const { return sh_basis_size(sh_degree); }
  size_t sh_stride() const { return 3 * static_cast<size_t>(basis()); }

  Eigen::Map<const Eigen::Vector3d> mu_at(size_t i) const {
    return Eigen::Map<const Eigen::Vector3d>(mu.data() + 3 * i);
  }
  Eigen::Map<const Eigen::Vector4d> quat_at(size_t i) const {
    return Eigen::Map<const Eigen::Vector4d>(quat.data() + 4 * i);
  }
  Eigen::Map<const Eigen::Vector3d> log_scales_at(size_t i) const {
    return Eigen::Map<const Eigen::Vector3d>(log_scales.data() + 3 * i);
  }

  void resize(size_t n) {
    mu.assign(n * 3, 0.0);
    quat.assign(n * 4, 0.0);
    for (size_t i = 0; i < n; ++i) quat[4 * i] = 1.0;
    log_scales.assign(n * 3, 0.0);
    logit_opacity.assign(n, 0.0);
    sh.assign(n * sh_stride(), 0.0);
  }

  double opacity(size_t i) const { return 1.0 / (1.0 + std::exp(-logit_opacity[i])); }

  Eigen::Matrix3d covariance(size_t i) const;

  void validate() const;
};

// Gradient buffers with the same shapes as the scene parameters.
struct SceneGrads {
  std::vector<double> mu, quat, log_scales, logit_opacity, sh;

  void resize_like(const GaussianScene& s) {
    mu.assign(s.mu.size(), 0.0);
    quat.assign(s.quat.size(), 0.0);
    log_scales.assign(s.log_scales.size(), 0.0);
    logit_opacity.assign(s.logit_opacity.size(), 0.0);
    sh.assign(s.sh.size(), 0.0);
  }
  void zero() {
    std::fill(mu.begin(), mu.end(), 0.0);
    std::fill(quat.begin(), quat.end(), 0.0);
    std::fill(log_scales.begin(), log_scales.end(), 0.0);
    std::fill(logit_opacity.begin(), logit_opacity.end(), 0.0);
    std::fill(sh.begin(), sh.end(), 0.0);
  }
};

// Rotation matrix from a (not necessarily unit) quaternion: the quaternion is
// normalized internally. Backward maps dL/dR to dL/d(raw quat), including the
// normalization Jacobian.
Eigen::Matrix3d quat_to_rotation(const Eigen::Vector4d& q_raw);
Eigen::Vector4d quat_rotation_backward(const Eigen::Vector4d& q_raw, const Eigen::Matrix3d& d_rot);

// Covariance factor backward: given dL/dSigma (full 3x3 adjoint) for
// Sigma = R S S^T R^T, accumulates dL/d(raw quat) and dL/d(log scales).
void covariance_backward(const Eigen::Vector4d& q_raw, const Eigen::Vector3d& log_scales,
                         const Eigen::Matrix3d& d_sigma, Eigen::Vector4d* d_quat,
                         Eigen::Vector3d* d_log_scales);

// Real spherical harmonics up to degree 2, basis order
// [Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22].
void sh_basis(int degree, const Eigen::Vector3d& dir, double* out);

// Color = 0.5 + sum_b sh[b] Y_b(dir), clamped to [0, 1] per channel.
// `dir` must be unit length. `sh_g` points at one Gaussian's coefficients.
Eigen::Vector3d sh_eval_color(const double* sh_g, int degree, const Eigen::Vector3d& dir);

// Backward of sh_eval_color. Clamped channels pass zero gradient. d_dir
// receives the gradient w.r.t. the (unit) direction argument.
void sh_eval_color_backward(const double* sh_g, int degree, const Eigen::Vector3d& dir,
                            const Eigen::Vector3d& d_color, double* d_sh_g,
                            Eigen::Vector3d* d_dir);

// Initialization from a point set: positions and per-point RGB albedo.
// If `count` differs from points.size(), a seeded subsample (or sample with
// replacement) is taken. Scales start at the log mean distance to the three
// nearest neighbours; opacity at logit(0.1); SH DC reproduces the albedo.
GaussianScene init_from_points(const std::vector<Eigen::Vector3d>& points,
                               const std::vector<Eigen::Vector3d>& colors, size_t count,
                               int sh_degree, uint64_t seed);

// Seeded uniform initialization inside a box with mid-gray albedo.
GaussianScene init_random(const Eigen::AlignedBox3d& box, size_t count, int sh_degree,
                          uint64_t seed);

// Checkpoint ("PGSC"): header {magic, version=1, count u32, sh_degree u32},
// then per Gaussian f32 fields in declaration order.
void save_checkpoint(const std::string& path, const GaussianScene& scene);
GaussianScene load_checkpoint(const std::string& path);

}  // namespace parkgauss
