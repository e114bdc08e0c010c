#include "parkgauss/camera.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace parkgauss {

using json = nlohmann::json;

void FisheyeIntrinsics::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw DataError("focal lengths must be positive");
  if (width <= 0 || height <= 0) throw DataError("image size must be positive");
  if (!(cx >= 0 && cx < width && cy >= 0 && cy < height))
    throw DataError("principal point outside image");
  if (!(theta_max > 0) || theta_max >= M_PI) throw DataError("theta_max out of range");
  // The distortion polynomial must stay strictly monotonic on the cone,
  // otherwise projection is not invertible.
  const int kSamples = 512;
  for (int i = 0; i <= kSamples; ++i) {
    const double theta = theta_max * i / kSamples;
    if (distort_deriv(theta) <= 0.0)
      throw DataError("distortion polynomial non-monotonic inside validity cone");
  }
}

void Pose::validate() const {
  if (std::abs(q.norm() - 1.0) > 1e-9) throw DataError("pose quaternion not normalized");
}

std::optional<Eigen::Vector2d> fisheye_project(const FisheyeIntrinsics& intr,
                                               const Eigen::Vector3d& p_cam) {
  Eigen::Vector2d px;
  if (!fisheye_project_jacobian(intr, p_cam, &px, nullptr)) return std::nullopt;
  return px;
}

bool fisheye_project_jacobian(const FisheyeIntrinsics& intr, const Eigen::Vector3d& p_cam,
                              Eigen::Vector2d* pixel, Eigen::Matrix<double, 2, 3>* jac) {
  const double x = p_cam.x(), y = p_cam.y(), z = p_cam.z();
  const double r2 = x * x + y * y;
  const double r = std::sqrt(r2);
  const double theta = std::atan2(r, z);
  if (!(theta < intr.theta_max)) return false;

  if (r < 1e-12) {
    // On-axis limit: d(theta)/r -> 1/z, i.e. plain pinhole behaviour.
    if (pixel) *pixel = Eigen::Vector2d(intr.cx + intr.fx * x / z, intr.cy + intr.fy * y / z);
    if (jac) {
      jac->setZero();
      (*jac)(0, 0) = intr.fx / z;
      (*jac)(0, 2) = -intr.fx * x / (z * z);
      (*jac)(1, 1) = intr.fy / z;
      (*jac)(1, 2) = -intr.fy * y / (z * z);
    }
    return true;
  }

  const double d = intr.distort(theta);
  const double s = d / r;
  if (pixel) *pixel = Eigen::Vector2d(intr.cx + intr.fx * s * x, intr.cy + intr.fy * s * y);
  if (jac) {
    const double dd = intr.distort_deriv(theta);
    const double rho2 = r2 + z * z;
    // s = d(theta)/r with theta = atan2(r, z):
    //   ds/dx = x (A - B) / r^2,  ds/dy = y (A - B) / r^2,  ds/dz = -dd / rho2
    // where A = dd * z / rho2 and B = d / r.
    const double a_minus_b = dd * z / rho2 - s;
    const double gxy = a_minus_b / r2;
    (*jac)(0, 0) = intr.fx * (s + x * x * gxy);
    (*jac)(0, 1) = intr.fx * x * y * gxy;
    (*jac)(0, 2) = -intr.fx * x * dd / rho2;
    (*jac)(1, 0) = intr.fy * x * y * gxy;
    (*jac)(1, 1) = intr.fy * (s + y * y * gxy);
    (*jac)(1, 2) = -intr.fy * y * dd / rho2;
  }
  return true;
}

Eigen::Vector3d fisheye_unproject(const FisheyeIntrinsics& intr, const Eigen::Vector2d& pixel) {
  const double mx = (pixel.x() - intr.cx) / intr.fx;
  const double my = (pixel.y() - intr.cy) / intr.fy;
  const double d_obs = std::sqrt(mx * mx + my * my);
  if (d_obs < 1e-14) return Eigen::Vector3d(0, 0, 1);

  double theta = d_obs;
  bool converged = false;
  for (int it = 0; it < 20; ++it) {
    const double deriv = intr.distort_deriv(theta);
    if (std::abs(deriv) < 1e-14)
      throw NumericalError("fisheye unprojection: derivative vanished",
                           "pixel (" + std::to_string(pixel.x()) + ", " +
                               std::to_string(pixel.y()) + ")");
    const double step = (intr.distort(theta) - d_obs) / deriv;
    theta -= step;
    if (std::abs(step) < 1e-12) {
      converged = true;
      break;
    }
  }
  if (!converged)
    throw NumericalError("fisheye unprojection: Newton iteration did not converge",
                         "pixel (" + std::to_string(pixel.x()) + ", " +
                             std::to_string(pixel.y()) + "), residual " +
                             std::to_string(intr.distort(theta) - d_obs));
  if (theta < 0.0 || theta > intr.theta_max + 1e-9)
    throw NumericalError("fisheye unprojection: pixel outside the validity cone",
                         "pixel (" + std::to_string(pixel.x()) + ", " +
                             std::to_string(pixel.y()) + "), theta " + std::to_string(theta));

  const double sin_t = std::sin(theta), cos_t = std::cos(theta);
  return Eigen::Vector3d(sin_t * mx / d_obs, sin_t * my / d_obs, cos_t);
}

std::vector<FisheyeCamera> load_calibration(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open calibration file: " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw DataError("calibration parse error: " + std::string(e.what()), path);
  }
  if (!doc.is_array() || doc.empty()) throw DataError("calibration must be a non-empty array");

  std::vector<FisheyeCamera> cams;
  try {
    for (const auto& c : doc) {
      FisheyeCamera cam;
      cam.name = c.at("name").get<std::string>();
      cam.intr.fx = c.at("fx").get<double>();
      cam.intr.fy = c.at("fy").get<double>();
      cam.intr.cx = c.at("cx").get<double>();
      cam.intr.cy = c.at("cy").get<double>();
      const auto k = c.at("k");
      if (!k.is_array() || k.size() != 4) throw DataError("calibration: k must have 4 entries");
      for (int i = 0; i < 4; ++i) cam.intr.k[static_cast<size_t>(i)] = k[static_cast<size_t>(i)].get<double>();
      cam.intr.width = c.at("width").get<int>();
      cam.intr.height = c.at("height").get<int>();
      if (c.contains("theta_max_deg"))
        cam.intr.theta_max = c.at("theta_max_deg").get<double>() * M_PI / 180.0;
      const auto q = c.at("q_wxyz");
      const auto t = c.at("t_xyz");
      if (!q.is_array() || q.size() != 4 || !t.is_array() || t.size() != 3)
        throw DataError("calibration: q_wxyz needs 4 entries, t_xyz needs 3");
      cam.pose.q = Eigen::Quaterniond(q[0].get<double>(), q[1].get<double>(),
                                      q[2].get<double>(), q[3].get<double>());
      cam.pose.t = Eigen::Vector3d(t[0].get<double>(), t[1].get<double>(), t[2].get<double>());
      cam.pose.validate();
      cam.intr.validate();
      cams.push_back(std::move(cam));
    }
  } catch (const json::exception& e) {
    throw DataError("calibration field error: " + std::string(e.what()), path);
  }
  return cams;
}

FisheyeCamera make_surround_camera(const std::string& name, const FisheyeIntrinsics& intr,
                                   const Eigen::Vector3d& position, double yaw_deg,
                                   double pitch_down_deg) {
  const double yaw = yaw_deg * M_PI / 180.0;
  const double pitch = pitch_down_deg * M_PI / 180.0;
  const Eigen::Vector3d axis(std::cos(pitch) * std::cos(yaw), std::cos(pitch) * std::sin(yaw),
                             -std::sin(pitch));
  const Eigen::Vector3d right = axis.cross(Eigen::Vector3d::UnitZ()).normalized();
  const Eigen::Vector3d down = axis.cross(right);

  Eigen::Matrix3d rot;  // vehicle -> camera
  rot.row(0) = right;
  rot.row(1) = down;
  rot.row(2) = axis;

  FisheyeCamera cam;
  cam.name = name;
  cam.intr = intr;
  cam.pose.q = Eigen::Quaterniond(rot);
  cam.pose.t = -(rot * position);
  cam.intr.validate();
  cam.pose.validate();
  return cam;
}

std::vector<FisheyeCamera> default_surround_rig(int width, int height) {
  FisheyeIntrinsics intr;
  intr.fx = 0.375 * width;
  intr.fy = 0.375 * width;
  intr.cx = 0.5 * width;
  intr.cy = 0.5 * height;
  intr.k = {-0.02, 0.004, 0.0, 0.0};
  intr.width = width;
  intr.height = height;

  return {
      make_surround_camera("front", intr, Eigen::Vector3d(3.7, 0.0, 0.9), 0.0, 40.0),
      make_surround_camera("rear", intr, Eigen::Vector3d(-1.0, 0.0, 0.9), 180.0, 40.0),
      make_surround_camera("left", intr, Eigen::Vector3d(1.4, 1.0, 1.0), 90.0, 40.0),
      make_surround_camera("right", intr, Eigen::Vector3d(1.4, -1.0, 1.0), -90.0, 40.0),
  };
}

void save_calibration(const std::string& path, const std::vector<FisheyeCamera>& cams) {
  json doc = json::array();
  for (const auto& cam : cams) {
    json c;
    c["name"] = cam.name;
    c["fx"] = cam.intr.fx;
    c["fy"] = cam.intr.fy;
    c["cx"] = cam.intr.cx;
    c["cy"] = cam.intr.cy;
    c["k"] = {cam.intr.k[0], cam.intr.k[1], cam.intr.k[2], cam.intr.k[3]};
    c["width"] = cam.intr.width;
    c["height"] = cam.intr.height;
    c["theta_max_deg"] = cam.intr.theta_max * 180.0 / M_PI;
    c["q_wxyz"] = {cam.pose.q.w(), cam.pose.q.x(), cam.pose.q.y(), cam.pose.q.z()};
    c["t_xyz"] = {cam.pose.t.x(), cam.pose.t.y(), cam.pose.t.z()};
    doc.push_back(std::move(c));
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot open file for writing: " + path);
  out << doc.dump(2) << "\n";
}

}  // namespace parkgauss
