#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "parkgauss/common.hpp"

namespace parkgauss {

// Equidistant fisheye intrinsics: d(theta) = theta (1 + k1 t^2 + k2 t^4 +
// k3 t^6 + k4 t^8), pixel = (fx d x/r + cx, fy d y/r + cy).
struct FisheyeIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  std::array<double, 4> k{0, 0, 0, 0};
  int width = 0, height = 0;
  double theta_max = 1.7453292519943295;  // 100 degrees

  void validate() const;

  double distort(double theta) const {
    const double t2 = theta * theta;
    return theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))));
  }
  double distort_deriv(double theta) const {
    const double t2 = theta * theta;
    return 1.0 + t2 * (3.0 * k[0] + t2 * (5.0 * k[1] + t2 * (7.0 * k[2] + t2 * 9.0 * k[3])));
  }
};

// Rigid transform q, t applied as x_out = q * x_in + t. For a camera pose
// this maps parent-frame (world or vehicle) points into the camera frame.
struct Pose {
  Eigen::Quaterniond q = Eigen::Quaterniond::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return q * x + t; }
  Eigen::Vector3d apply_inverse(const Eigen::Vector3d& x) const {
    return q.conjugate() * (x - t);
  }
  Pose inverse() const {
    Pose p;
    p.q = q.conjugate();
    p.t = -(p.q * t);
    return p;
  }
  // Composition: (a * b).apply(x) == a.apply(b.apply(x)).
  friend Pose operator*(const Pose& a, const Pose& b) {
    Pose p;
    p.q = a.q * b.q;
    p.t = a.q * b.t + a.t;
    return p;
  }
  // Origin of the target frame expressed in the source frame.
  Eigen::Vector3d center() const { return q.conjugate() * (-t); }

  void validate() const;
};

struct FisheyeCamera {
  std::string name;
  FisheyeIntrinsics intr;
  Pose pose;  // vehicle -> camera
};

// Projects a camera-frame point. Returns nullopt when the ray angle is at or
// beyond the validity cone.
std::optional<Eigen::Vector2d> fisheye_project(const FisheyeIntrinsics& intr,
                                               const Eigen::Vector3d& p_cam);

// Projection with the 2x3 Jacobian d(pixel)/d(p_cam).
bool fisheye_project_jacobian(const FisheyeIntrinsics& intr, const Eigen::Vector3d& p_cam,
                              Eigen::Vector2d* pixel, Eigen::Matrix<double, 2, 3>* jac);

// Inverts the distortion by Newton iteration (init theta = observed radius,
// at most 20 steps, tolerance 1e-12). Returns the unit ray. Throws
// NumericalError when the iteration does not converge.
Eigen::Vector3d fisheye_unproject(const FisheyeIntrinsics& intr, const Eigen::Vector2d& pixel);

// Calibration file: JSON array of camera objects. Validates on load.
std::vector<FisheyeCamera> load_calibration(const std::string& path);
void save_calibration(const std::string& path, const std::vector<FisheyeCamera>& cams);

// Camera rigidly mounted on the vehicle (frame: x forward, y left, z up),
// optical axis along `yaw_deg` (about +z, 0 = forward) pitched down by
// `pitch_down_deg`, with image-right kept horizontal.
FisheyeCamera make_surround_camera(const std::string& name, const FisheyeIntrinsics& intr,
                                   const Eigen::Vector3d& position, double yaw_deg,
                                   double pitch_down_deg);

// Four-camera rig (front/rear/left/right) used by the synthetic scenes.
std::vector<FisheyeCamera> default_surround_rig(int width = 320, int height = 240);

}  // namespace parkgauss
