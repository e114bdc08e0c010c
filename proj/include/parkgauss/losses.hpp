#pragma once

#include <vector>

#include "parkgauss/detector.hpp"
#include "parkgauss/image.hpp"
#include "parkgauss/slotweights.hpp"

namespace parkgauss {

// Training objectives and evaluation metrics. Every loss that feeds the
// optimizer returns its exact adjoint alongside the scalar.

struct LossWeights {
  double lambda_dssim = 0.2;  // Eq. 15 lambda
  double lambda_align = 0.001;
  double lambda_ipm = 0.1;
  double lambda_cam = 0.1;
  double lambda_edge = 0.5;  // Eq. 14 weight (paper leaves it unassigned)
  int topk_k = 512;          // teacher top-K region for the alignment loss
  bool reverse_kl = false;   // swap the KL direction (ablation only)
};

enum class TrainPhase { kPhotometric, kSlotAware };

struct LossComponents {
  double l_rgb = 0, l_align = 0, l_ipm = 0, l_cam = 0;
};

// Photometric phase uses L_rgb alone; the slot-aware phase adds the weighted
// alignment and slot-consistency terms.
double total_loss(const LossComponents& c, const LossWeights& w, TrainPhase phase);

struct ScalarLoss {
  double value = 0;
  Image d_pred;
};

// (1 - lambda) * mean|diff| + lambda * (1 - SSIM) / 2 with the standard
// 11x11 sigma=1.5 Gaussian SSIM on unit range, windows fully inside the
// image ("valid" map). Adjoint w.r.t. `rendered` is exact.
ScalarLoss l_rgb(const Image& rendered, const Image& target, double lambda_dssim = 0.2);

// Evaluation-only metrics.
double ssim(const Image& a, const Image& b);
double psnr(const Image& a, const Image& b);  // capped at 100 dB

// Indices of the K largest values, ties resolved toward lower index.
std::vector<size_t> topk_region(const Image& values, int k);

struct AlignLoss {
  double value = 0;
  Image d_student;  // adjoint on the student weight map (zero off the top-K set)
};

// KL(softmax(W_s | Omega) || softmax(W_t | Omega)) on the teacher's top-K
// region, eps = 1e-8 inside the logs. Gradient flows only into the student.
// `reverse` swaps the KL direction (ablation only).
AlignLoss l_align(const WeightMap& student, const WeightMap& teacher, int k,
                  bool reverse = false);

struct WeightedL1 {
  double value = 0;
  Image d_pred;
  Image d_weight;  // filled only when requested (stop-gradient diagnostics)
};

// ||W (x) |pred - target|||_1 / max(||W||_1, 1e-8); the per-pixel error is
// the channel mean, so the scale matches plain mean-L1. Serves both the IPM
// and the per-camera slot-aware terms.
WeightedL1 weighted_l1(const Image& pred, const Image& target, const Image& weight,
                       bool want_weight_grad = false);

// Slot-level detection metrics (Eq. 20-22).
struct SlotDetectionResult {
  double p1_u = 0, p1_v = 0;
  double p2_u = 0, p2_v = 0;
  double angle_deg = 0;
  double confidence = 0;
};

struct MatchCriteria {
  double distance_px = 10.0;
  double angle_deg = 10.0;
  double confidence = 0.5;
};

struct PrMetrics {
  double precision = 0, recall = 0;
  int tp = 0, fp = 0, fn = 0;
};

// Greedy one-to-one matching, highest confidence first. A detection matches
// a ground-truth slot when both entrance points pair within `distance_px`
// (either point assignment) and the angles agree modulo 360.
PrMetrics slot_precision_recall(const std::vector<SlotDetectionResult>& detections,
                                const std::vector<SlotAnnotation>& ground_truth,
                                const MatchCriteria& criteria = {});

}  // namespace parkgauss
