#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "parkgauss/camera.hpp"
#include "parkgauss/image.hpp"

namespace parkgauss {

enum class IpmFusion { kNearest, kFeathered };

// Bird's-eye-view raster over the z=0 ground plane of the vehicle frame
// (x forward, y left, z up). Front is up in the image, the vehicle's left
// side is image-left: u = cu - ppm*y, v = cv - ppm*x.
struct IpmConfig {
  int bev_width = 256;
  int bev_height = 256;
  double px_per_meter = 100.0;
  IpmFusion fusion = IpmFusion::kNearest;

  Eigen::Vector2d vehicle_to_bev(double x, double y) const {
    return {0.5 * (bev_width - 1) - px_per_meter * y, 0.5 * (bev_height - 1) - px_per_meter * x};
  }
  Eigen::Vector2d bev_to_vehicle(double u, double v) const {
    return {(0.5 * (bev_height - 1) - v) / px_per_meter, (0.5 * (bev_width - 1) - u) / px_per_meter};
  }
  // Homogeneous map (x_v, y_v, 1) -> (u, v, 1).
  Eigen::Matrix3d k_ipm() const {
    Eigen::Matrix3d k;
    k << 0, -px_per_meter, 0.5 * (bev_width - 1), -px_per_meter, 0, 0.5 * (bev_height - 1), 0, 0, 1;
    return k;
  }
};

// Precomputed correspondence grid. For every BEV pixel, up to n_cams slots
// {camera, source pixel, blend weight}; unused slots have cam = 0xFF and
// weight 0. The transpose stencil (per camera, per source pixel -> BEV taps)
// drives the backward warp; the ground maps drive weight back-projection.
struct IpmGrid {
  static constexpr uint8_t kNoCam = 0xFF;

  int bev_w = 0, bev_h = 0, n_cams = 0;
  std::vector<uint8_t> cam;    // bev pixel * n_cams slots
  std::vector<double> src_u, src_v, weight;

  struct Stencil {
    int src_w = 0, src_h = 0;
    std::vector<int64_t> offset;  // src_w*src_h + 1
    std::vector<int32_t> bev;
    std::vector<double> w;
  };
  std::vector<Stencil> stencil;  // per camera

  // Per camera, 3 planes: BEV u, BEV v of the pixel's ground intersection,
  // and a 0/1 validity flag.
  std::vector<Image> ground;

  size_t slots() const { return static_cast<size_t>(bev_w) * bev_h * n_cams; }
};

// Deterministic and calibration-pure: depends only on the camera set and the
// BEV configuration, so grids can be cached and reused across frames.
IpmGrid build_ipm_grid(const std::vector<FisheyeCamera>& cams, const IpmConfig& cfg);

// BEV pixels with no valid camera are zero.
Image warp_ipm(const IpmGrid& grid, const std::vector<Image>& cam_images);

// Transpose of warp_ipm: scatters dL/d(BEV) back to per-camera image
// gradients via the precomputed stencils (gather form, deterministic).
std::vector<Image> warp_ipm_backward(const IpmGrid& grid, const Image& d_bev);

// Samples a BEV weight field at every fisheye pixel's ground intersection.
// Pixels whose ray misses the ground (or leaves the BEV extent) get zero.
std::vector<Image> backproject_bev(const IpmGrid& grid, const Image& bev_field);

// Transpose of backproject_bev; used only when the stop-gradient on the
// student weight path is disabled.
Image backproject_bev_backward(const IpmGrid& grid, const std::vector<Image>& d_cam_fields);

// "PGIP": header {magic, version=1, bev_w u32, bev_h u32, n_cams u32}, then
// per BEV pixel row-major, per slot {cam u8, u f32, v f32, w f32}.
void save_ipm_grid(const std::string& path, const IpmGrid& grid);

// Loading rebuilds the stencils and ground maps from the camera set, which
// must match the grid's n_cams.
IpmGrid load_ipm_grid(const std::string& path, const std::vector<FisheyeCamera>& cams,
                      const IpmConfig& cfg);

}  // namespace parkgauss
