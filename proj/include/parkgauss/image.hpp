#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#include "parkgauss/common.hpp"

namespace parkgauss {

// Planar image: `channels` planes of height*width doubles, row-major.
class Image {
public:
  Image() = default;
  Image(int height, int width, int channels, double fill = 0.0)
      : h_(height), w_(width), c_(channels),
        data_(static_cast<size_t>(height) * width * channels, fill) {
    if (height <= 0 || width <= 0 || channels <= 0)
      throw DataError("image dimensions must be positive");
  }

  int height() const { return h_; }
  int width() const { return w_; }
  int channels() const { return c_; }
  bool empty() const { return data_.empty(); }
  size_t plane_size() const { return static_cast<size_t>(h_) * w_; }
  size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double* plane(int ch) { return data_.data() + plane_size() * ch; }
  const double* plane(int ch) const { return data_.data() + plane_size() * ch; }

  double& at(int ch, int y, int x) {
    assert(ch >= 0 && ch < c_ && y >= 0 && y < h_ && x >= 0 && x < w_);
    return data_[plane_size() * ch + static_cast<size_t>(y) * w_ + x];
  }
  double at(int ch, int y, int x) const {
    assert(ch >= 0 && ch < c_ && y >= 0 && y < h_ && x >= 0 && x < w_);
    return data_[plane_size() * ch + static_cast<size_t>(y) * w_ + x];
  }

  bool same_shape(const Image& other) const {
    return h_ == other.h_ && w_ == other.w_ && c_ == other.c_;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  // Bilinear sample of one plane at continuous pixel coordinates, where
  // integer (x, y) is the center of pixel (x, y). Coordinates are clamped
  // to the valid range, so samples on the border extend edge values.
  double sample_bilinear(int ch, double x, double y) const {
    const int x0 = clamp_index(static_cast<int>(std::floor(x)), w_ - 1);
    const int y0 = clamp_index(static_cast<int>(std::floor(y)), h_ - 1);
    const int x1 = x0 + 1 < w_ ? x0 + 1 : x0;
    const int y1 = y0 + 1 < h_ ? y0 + 1 : y0;
    double fx = x - x0, fy = y - y0;
    fx = fx < 0 ? 0 : (fx > 1 ? 1 : fx);
    fy = fy < 0 ? 0 : (fy > 1 ? 1 : fy);
    const double v00 = at(ch, y0, x0), v01 = at(ch, y0, x1);
    const double v10 = at(ch, y1, x0), v11 = at(ch, y1, x1);
    return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
  }

  // Tap layout matching sample_bilinear, for building transpose stencils.
  struct BilinearTaps {
    int x[4], y[4];
    double w[4];
  };
  static BilinearTaps taps_for(int width, int height, double x, double y) {
    const int x0 = clamp_index(static_cast<int>(std::floor(x)), width - 1);
    const int y0 = clamp_index(static_cast<int>(std::floor(y)), height - 1);
    const int x1 = x0 + 1 < width ? x0 + 1 : x0;
    const int y1 = y0 + 1 < height ? y0 + 1 : y0;
    double fx = x - x0, fy = y - y0;
    fx = fx < 0 ? 0 : (fx > 1 ? 1 : fx);
    fy = fy < 0 ? 0 : (fy > 1 ? 1 : fy);
    BilinearTaps t;
    t.x[0] = x0; t.y[0] = y0; t.w[0] = (1 - fy) * (1 - fx);
    t.x[1] = x1; t.y[1] = y0; t.w[1] = (1 - fy) * fx;
    t.x[2] = x0; t.y[2] = y1; t.w[2] = fy * (1 - fx);
    t.x[3] = x1; t.y[3] = y1; t.w[3] = fy * fx;
    return t;
  }
  BilinearTaps bilinear_taps(double x, double y) const { return taps_for(w_, h_, x, y); }

private:
  static int clamp_index(int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); }

  int h_ = 0, w_ = 0, c_ = 0;
  std::vector<double> data_;
};

inline Image to_grayscale(const Image& img) {
  if (img.channels() == 1) return img;
  Image out(img.height(), img.width(), 1);
  const double inv = 1.0 / img.channels();
  for (int ch = 0; ch < img.channels(); ++ch) {
    const double* p = img.plane(ch);
    double* o = out.plane(0);
    for (size_t i = 0; i < img.plane_size(); ++i) o[i] += p[i] * inv;
  }
  return out;
}

}  // namespace parkgauss
