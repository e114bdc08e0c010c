#pragma once

#include <string>
#include <vector>

#include "parkgauss/image.hpp"

namespace parkgauss {

// Analytic slot-corner detector. Slides a bank of L/T-junction templates over
// the BEV image at a fixed stride and folds the per-orientation normalized
// cross-correlations into a single confidence per cell with a log-sum-exp
// smooth max, so the whole confidence field stays differentiable w.r.t. the
// image. Direction and sub-cell offsets are derived from the winning template
// and the local confidence curvature; they carry no gradient.

struct DetectorConfig {
  int stride = 4;            // BEV pixels per field cell
  double gain = 8.0;         // applied to the smooth-maxed correlation
  double bias = 4.0;         // confidence = sigmoid(gain * score - bias)
  double temperature = 10.0; // log-sum-exp sharpness over the template bank
};

// 9x9 patches, zero-mean and unit-norm, 16 orientations of an L junction
// followed by 16 orientations of a T junction.
struct TemplateBank {
  static constexpr int kSize = 9;
  static constexpr int kOrientations = 16;
  static constexpr int kCount = 2 * kOrientations;
  double patch[kCount][kSize * kSize];
  double angle_deg[kCount];
  double dir_u[kCount], dir_v[kCount];
};
const TemplateBank& template_bank();

struct CornerField {
  int cells_y = 0, cells_x = 0;
  int stride = 4;
  std::vector<double> confidence;   // cells_y * cells_x, in [0, 1]
  std::vector<double> dir_u, dir_v; // unit direction of the winning template
  std::vector<double> off_u, off_v; // sub-cell peak offset in BEV pixels
  bool gradient_allowed = true;     // false for teacher / externally loaded fields

  size_t cell_count() const { return static_cast<size_t>(cells_y) * cells_x; }
  size_t cell(int cy, int cx) const { return static_cast<size_t>(cy) * cells_x + cx; }
  // BEV pixel position of a cell center.
  double center_u(int cx) const { return cx * stride + stride / 2; }
  double center_v(int cy) const { return cy * stride + stride / 2; }
};

struct CornerDetection {
  double u = 0, v = 0;          // BEV pixels (cell center + offset)
  double dir_u = 1, dir_v = 0;  // unit direction
  double confidence = 0;
  int cell_x = 0, cell_y = 0;
};

CornerField analytic_corner_detector(const Image& bev, const DetectorConfig& cfg = {});

// Accumulates d(sum d_confidence[cell] * confidence[cell]) / d(image) into
// d_bev (same shape as bev; caller zeroes). Border cells carry no gradient.
void corner_detector_backward(const Image& bev, const DetectorConfig& cfg,
                              const std::vector<double>& d_confidence, Image& d_bev);

// Local maxima above `confidence_threshold`, greedily pruned so surviving
// peaks are at least `nms_radius_px` apart (strongest first, ties by cell
// index). Positions are cell center + sub-cell offset, in BEV pixels.
std::vector<CornerDetection> corner_peaks(const CornerField& field,
                                          double confidence_threshold = 0.25,
                                          double nms_radius_px = 8.0);

// Edge plausibility between detected corners: mean marking likelihood along
// the segment, squashed to (0, 1). Likelihood is the grayscale image
// normalized by its upper percentile, so "painted line" saturates near 1.
struct EdgeConfig {
  int n_samples = 32;
  double gain = 8.0;
  double bias = 4.0;
  double percentile = 0.99; // markings are a bright minority; anchor near the top
};

struct EdgeScores {
  std::vector<CornerDetection> corners;
  std::vector<double> scores; // K*K row-major, symmetric, zero diagonal
  bool gradient_allowed = true;

  size_t index(size_t i, size_t j) const { return i * corners.size() + j; }
  double score(size_t i, size_t j) const { return scores[index(i, j)]; }
};

EdgeScores edge_scores(const std::vector<CornerDetection>& corners, const Image& bev,
                       const EdgeConfig& cfg = {});

// Accumulates d(sum d_scores[i,j] * scores[i,j]) / d(image) into d_bev.
void edge_scores_backward(const std::vector<CornerDetection>& corners, const Image& bev,
                          const EdgeConfig& cfg, const std::vector<double>& d_scores,
                          Image& d_bev);

// Corner fields serialize as five-plane heatmap files (confidence, dir_u,
// dir_v, off_u, off_v). Loaded fields are constants: gradient_allowed is
// cleared so they can only serve as teachers.
void save_corner_field(const std::string& path, const CornerField& field);
CornerField load_corner_field(const std::string& path, int stride,
                              int expect_cells_x = -1, int expect_cells_y = -1);

// Guard for wiring mistakes: a field used as the student (gradient source)
// must have been produced by the differentiable detector.
void require_student_field(const CornerField& field);

// Ground-truth slot annotation in BEV pixel coordinates.
struct SlotAnnotation {
  double p1_u = 0, p1_v = 0; // entrance point pair
  double p2_u = 0, p2_v = 0;
  double angle_deg = 0;      // slot direction, [0, 360)
  std::string type = "perpendicular";
};

std::vector<SlotAnnotation> load_annotations(const std::string& path);
void save_annotations(const std::string& path, const std::vector<SlotAnnotation>& annos);

// Ideal teacher field from ground-truth annotations: Gaussian confidence
// bumps (sigma = 2 cells) at each entrance point, direction from the slot
// angle, exact sub-cell offsets. Not differentiable by construction.
CornerField annotations_to_teacher_field(const std::vector<SlotAnnotation>& annos,
                                         int cells_y, int cells_x, int stride);

}  // namespace parkgauss
