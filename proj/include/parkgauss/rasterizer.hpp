#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "parkgauss/camera.hpp"
#include "parkgauss/image.hpp"
#include "parkgauss/scene.hpp"
#include "parkgauss/ut.hpp"

namespace parkgauss {

struct RenderConfig {
  int tile_size = 16;
  double lowpass = 0.3;          // isotropic floor added to projected covariance
  double alpha_min = 1.0 / 255.0;
  double alpha_max = 0.999;
  double transmittance_min = 1e-4;  // per-pixel early stop
  double near = 0.05;               // minimum camera-frame z of a splat center
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
  UtParams ut;
};

// One culled-and-projected Gaussian. Conic is the inverse of the projected
// covariance; ln_cut = ln(alpha_min / opacity) bounds the footprint.
struct SplatRecord {
  uint32_t gauss = 0;
  Eigen::Vector2d mean2d = Eigen::Vector2d::Zero();
  double conic_a = 0, conic_b = 0, conic_c = 0;
  double opacity = 0;
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
  Eigen::Vector3d view_dir = Eigen::Vector3d::UnitZ();  // unit, camera -> center
  double view_dist = 0;
  double cam_dist = 0;
  double ln_cut = 0;
  double radius = 0;
  UtProjection proj;
};

// Forward products consumed by the backward pass.
struct RenderCache {
  int width = 0, height = 0, tile_size = 0, tiles_x = 0, tiles_y = 0;
  std::vector<SplatRecord> splats;
  std::vector<uint32_t> inst;          // instance -> splat index, sorted by
                                       // (tile, center distance, gauss index)
  std::vector<int64_t> tile_offset;    // size tiles_x*tiles_y + 1
  std::vector<int64_t> splat_offset;   // CSR: per splat -> its instance ids
  std::vector<int64_t> splat_inst;
  std::vector<double> final_t;         // per pixel
  std::vector<int32_t> stop_inst;      // per pixel, exclusive end within the tile range
};

// Splats sorted front-to-back by Euclidean center distance (ties by index)
// and alpha-blended per tile. Pixel centers sit at integer coordinates.
Image rasterize(const GaussianScene& scene, const FisheyeIntrinsics& intr,
                const Pose& world_to_cam, const RenderConfig& cfg, RenderCache* cache);

// Pixel-ordered reference without tiling or instance lists; bitwise-equal to
// rasterize() by construction (identical per-pixel arithmetic sequence).
Image rasterize_reference(const GaussianScene& scene, const FisheyeIntrinsics& intr,
                          const Pose& world_to_cam, const RenderConfig& cfg);

// Accumulates parameter gradients for dL/d(image). Deterministic for any
// thread count: per-instance gradients are reduced per splat in fixed order.
void rasterize_backward(const GaussianScene& scene, const FisheyeIntrinsics& intr,
                        const Pose& world_to_cam, const RenderConfig& cfg,
                        const RenderCache& cache, const Image& d_image, SceneGrads* grads);

}  // namespace parkgauss
