#pragma once

#include <string>
#include <vector>

#include "parkgauss/detector.hpp"
#include "parkgauss/image.hpp"
#include "parkgauss/ipm.hpp"

namespace parkgauss {

// Slot-aware supervision weights. A map remembers whether adjoints may flow
// back into whatever produced it: teacher-derived and stop-gradient-mixed
// maps are constants, and the losses refuse to differentiate through them.

struct WeightMap {
  Image values;  // single plane, finite, >= 0
  bool gradient_allowed = false;
};

// Throws if a weight map is non-finite, negative, or above `max_allowed`.
void validate_weight_map(const WeightMap& w, double max_allowed);

struct ShapeParams {
  double tau = 0.25;         // confidence threshold
  double temperature = 0.5;  // softness of the mask
  double gamma = 1.0;        // shaping exponent
};

// W = sigmoid((conf - tau) / T)^gamma at field resolution.
WeightMap shape_weights(const CornerField& field, const ShapeParams& p = {});

// Accumulates d(sum d_values * W) / d(confidence) into d_conf.
void shape_weights_backward(const CornerField& field, const ShapeParams& p,
                            const Image& d_values, std::vector<double>& d_conf);

// W_mix = alpha * teacher + (1 - alpha) * student, student wrapped in a
// stop-gradient: the result never carries gradients. Passing
// stop_gradient = false (diagnostics only) lets the student flag through.
WeightMap mix_corner(const WeightMap& teacher, const WeightMap& student, double alpha = 0.8,
                     bool stop_gradient = true);
WeightMap mix_edge(const WeightMap& teacher, const WeightMap& student, double beta = 0.8,
                   bool stop_gradient = true);

// Splits an adjoint of the mixed map onto the student branch; zero under the
// stop-gradient contract.
Image mix_backward_student(const Image& d_mix, double alpha, bool stop_gradient);

enum class EdgeAggregation { kMax, kSum };

struct EdgeTubeParams {
  int top_k = 8;          // edges kept from the score matrix
  double sigma = 1.5;     // Gaussian tube width, pixels
  int n_samples = 32;     // segment samples
  EdgeAggregation aggregation = EdgeAggregation::kMax;
};

// Rasterizes the strongest edges as Gaussian tubes onto an height x width
// grid: e(u,v) = max_t exp(-|x - l(t)|^2 / (2 sigma^2)) over sampled t,
// truncated beyond 4 sigma from the segment. Edge selection is piecewise
// constant in the scores, so the result carries no gradient.
WeightMap rasterize_edges(const EdgeScores& es, int height, int width,
                          const EdgeTubeParams& p = {});

// W'_mix = W_mix + lambda_edge * W_edge.
WeightMap combine(const WeightMap& w_mix, const WeightMap& w_edge, double lambda_edge);

// Bilinear upsample from detector field resolution to the IPM grid, placing
// cell (cy, cx) at BEV pixel (cx*stride + stride/2, cy*stride + stride/2).
Image upsample_field(const Image& field_values, int stride, int height, int width);
// Transpose of upsample_field; accumulates into d_field.
void upsample_field_backward(const Image& d_up, int stride, Image& d_field);

struct ProjectedWeights {
  Image bev;               // weight map at IPM resolution
  std::vector<Image> cams; // weight image per camera (zero off the ground)
};

// Maps already at IPM resolution pass through without resampling.
ProjectedWeights upsample_and_backproject(const WeightMap& w, int stride, const IpmGrid& grid);

// Debug dumps: raw planes as a heatmap file, or a normalized grayscale PNG.
void save_weight_map(const std::string& path, const WeightMap& w);
void save_weight_map_png(const std::string& path, const WeightMap& w);

}  // namespace parkgauss
