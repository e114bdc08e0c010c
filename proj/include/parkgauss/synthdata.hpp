#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "parkgauss/camera.hpp"
#include "parkgauss/detector.hpp"
#include "parkgauss/image.hpp"
#include "parkgauss/ipm.hpp"

namespace parkgauss {

// Synthetic parking-garage scenes. Ground truth comes from an analytic
// ray caster (ground plane + boxes), deliberately not from the Gaussian
// rasterizer, so training is checked against an independent image-formation
// path. All geometry is metric, world frame: x/y on the floor, z up.

struct SlotRow {
  Eigen::Vector2d origin{0.0, 0.0};  // entrance corner of the first slot
  int count = 6;
  double slot_width = 2.6;           // meters along the entrance line
  double slot_depth = 5.2;           // meters from entrance to rear line
  double orientation_deg = 0.0;      // world direction of the entrance line
  double line_width = 0.12;          // painted marking width, meters
  std::string type = "perpendicular";
};

struct ObstacleBox {
  Eigen::Vector3d lo{0.0, 0.0, 0.0};
  Eigen::Vector3d hi{0.0, 0.0, 0.0};
};

struct ParkingLayout {
  double min_x = -12.0, max_x = 12.0;  // lot extent, meters
  double min_y = -9.0, max_y = 9.0;
  double ceiling_z = 3.0;
  std::vector<SlotRow> rows;
  std::vector<ObstacleBox> boxes;     // walls and pillars
  uint64_t texture_seed = 7;
  double lighting = 1.0;              // global multiplier (garage illumination)

  // Throws DataError naming every overlapping slot pair or any marking
  // outside the lot extent.
  void validate() const;
};

// World-space outline of one slot. p1/p2 are the entrance corners the
// annotations track; direction points from the entrance toward the rear.
struct SlotShape {
  Eigen::Vector2d p1, p2, r1, r2;
  double direction_deg = 0.0;  // world frame, [0, 360)
  std::string type;
};

std::vector<SlotShape> layout_slots(const ParkingLayout& layout);

struct VehiclePose {
  double x = 0.0, y = 0.0;
  double yaw_rad = 0.0;  // about +z, 0 = world +x
  double timestamp = 0.0;
};

// Maps world points into the vehicle frame (x forward, y left, z up).
Pose world_to_vehicle(const VehiclePose& pose);

// Desk-scale defaults: two perpendicular rows of six slots facing a central
// corridor, perimeter walls, two pillars; straight-then-turn drive at 10 Hz.
ParkingLayout default_layout();
std::vector<VehiclePose> default_trajectory(int frames = 64);

// Floor color (pre-lighting) at a world point: procedural asphalt with the
// slot markings painted on. Exposed for oracle checks.
Eigen::Vector3d ground_color(const ParkingLayout& layout, double x, double y,
                             uint64_t noise_seed);

struct RenderOptions {
  int supersample = 2;  // NxN subsamples per pixel
};

// Ray-casts one fisheye view of the scene. Deterministic in all arguments.
Image render_view(const ParkingLayout& layout, const VehiclePose& pose,
                  const FisheyeCamera& cam, uint64_t noise_seed,
                  const RenderOptions& opt = {});

// Annotations for one frame: every slot whose entrance corners land inside
// the BEV raster with a clear 2D line of sight from the vehicle center.
// Entrance points are BEV pixels, angles live in BEV pixel axes.
std::vector<SlotAnnotation> frame_annotations(const ParkingLayout& layout,
                                              const VehiclePose& pose,
                                              const IpmConfig& ipm,
                                              std::vector<int>* visible_slots = nullptr);

struct GenerateOptions {
  RenderOptions render;
  IpmConfig ipm{320, 320, 20.0,
                IpmFusion::kNearest};  // 16 m x 16 m annotation raster
};

// Writes calib.json, trajectory.json, slots.json and one PNG folder per
// camera (zero-padded frame names). Bitwise deterministic per seed.
void generate_dataset(const std::string& dir, const ParkingLayout& layout,
                      const std::vector<VehiclePose>& trajectory,
                      const std::vector<FisheyeCamera>& cams, uint64_t seed,
                      const GenerateOptions& opt = {});

struct DatasetFrame {
  int id = 0;
  VehiclePose pose;
  std::vector<std::string> image_paths;  // one per camera, calibration order
  std::vector<int> visible_slots;
};

struct Dataset {
  std::vector<FisheyeCamera> cameras;
  std::vector<DatasetFrame> frames;
  std::vector<std::vector<SlotAnnotation>> annotations;  // per frame
  IpmConfig ipm;
  std::vector<int> train_indices;  // every 10th frame held out for eval
  std::vector<int> eval_indices;
};

Dataset load_dataset(const std::string& dir);

}  // namespace parkgauss
