#include "parkgauss/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "parkgauss/io_binary.hpp"
#include "parkgauss/parallel.hpp"

namespace parkgauss {

Eigen::Matrix3d GaussianScene::covariance(size_t i) const {
  const Eigen::Matrix3d rot = quat_to_rotation(quat_at(i));
  const Eigen::Vector3d s = log_scales_at(i).array().exp();
  const Eigen::Matrix3d m = rot * s.asDiagonal();
  return m * m.transpose();
}

void GaussianScene::validate() const {
  const size_t n = size();
  if (mu.size() != n * 3 || quat.size() != n * 4 || log_scales.size() != n * 3 ||
      sh.size() != n * sh_stride())
    throw DataError("scene arrays have inconsistent sizes");
  if (sh_degree < 0 || sh_degree > 2) throw DataError("sh_degree must be in [0, 2]");
  for (size_t i = 0; i < n; ++i) {
    if (quat_at(i).norm() < 1e-12) throw DataError("degenerate quaternion in scene");
    for (int d = 0; d < 3; ++d)
      if (!std::isfinite(mu[3 * i + d]) || !std::isfinite(log_scales[3 * i + d]))
        throw DataError("non-finite scene parameter");
  }
}

Eigen::Matrix3d quat_to_rotation(const Eigen::Vector4d& q_raw) {
  const Eigen::Vector4d q = q_raw / q_raw.norm();
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Eigen::Matrix3d r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

Eigen::Vector4d quat_rotation_backward(const Eigen::Vector4d& q_raw,
                                       const Eigen::Matrix3d& g) {
  const double norm = q_raw.norm();
  const Eigen::Vector4d q = q_raw / norm;
  const double w = q[0], x = q[1], y = q[2], z = q[3];

  Eigen::Matrix3d dw, dx, dy, dz;
  dw << 0, -z, y, z, 0, -x, -y, x, 0;
  dx << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
  dy << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
  dz << -2 * z, -w, x, w, -2 * z, y, x, y, 0;

  Eigen::Vector4d d_unit;
  d_unit[0] = 2.0 * (g.array() * dw.array()).sum();
  d_unit[1] = 2.0 * (g.array() * dx.array()).sum();
  d_unit[2] = 2.0 * (g.array() * dy.array()).sum();
  d_unit[3] = 2.0 * (g.array() * dz.array()).sum();

  // Through normalization: d(q/|q|)/dq = (I - qhat qhat^T) / |q|.
  return (d_unit - q * q.dot(d_unit)) / norm;
}

void covariance_backward(const Eigen::Vector4d& q_raw, const Eigen::Vector3d& log_scales,
                         const Eigen::Matrix3d& d_sigma, Eigen::Vector4d* d_quat,
                         Eigen::Vector3d* d_log_scales) {
  const Eigen::Matrix3d rot = quat_to_rotation(q_raw);
  const Eigen::Vector3d s = log_scales.array().exp();
  const Eigen::Matrix3d m = rot * s.asDiagonal();

  // Sigma = M M^T  =>  dM = (dSigma + dSigma^T) M.
  const Eigen::Matrix3d dm = (d_sigma + d_sigma.transpose()) * m;
  const Eigen::Matrix3d d_rot = dm * s.asDiagonal();
  const Eigen::Vector3d d_s = (rot.transpose() * dm).diagonal();

  if (d_quat) *d_quat += quat_rotation_backward(q_raw, d_rot);
  if (d_log_scales) *d_log_scales += d_s.cwiseProduct(s);
}

namespace {

constexpr double kY0 = 0.28209479177387814;   // 1 / (2 sqrt(pi))
constexpr double kY1 = 0.4886025119029199;    // sqrt(3 / (4 pi))
constexpr double kY2a = 1.0925484305920792;   // sqrt(15 / (4 pi))
constexpr double kY2b = 0.31539156525252005;  // sqrt(5 / (16 pi))
constexpr double kY2c = 0.5462742152960396;   // sqrt(15 / (16 pi))

}  // namespace

void sh_basis(int degree, const Eigen::Vector3d& dir, double* out) {
  const double x = dir.x(), y = dir.y(), z = dir.z();
  out[0] = kY0;
  if (degree < 1) return;
  out[1] = kY1 * y;
  out[2] = kY1 * z;
  out[3] = kY1 * x;
  if (degree < 2) return;
  out[4] = kY2a * x * y;
  out[5] = kY2a * y * z;
  out[6] = kY2b * (3.0 * z * z - 1.0);
  out[7] = kY2a * x * z;
  out[8] = kY2c * (x * x - y * y);
}

namespace {

// d(basis)/d(dir components); rows are basis functions.
void sh_basis_grad(int degree, const Eigen::Vector3d& dir, Eigen::Vector3d* grad) {
  const double x = dir.x(), y = dir.y(), z = dir.z();
  grad[0].setZero();
  if (degree < 1) return;
  grad[1] = Eigen::Vector3d(0, kY1, 0);
  grad[2] = Eigen::Vector3d(0, 0, kY1);
  grad[3] = Eigen::Vector3d(kY1, 0, 0);
  if (degree < 2) return;
  grad[4] = Eigen::Vector3d(kY2a * y, kY2a * x, 0);
  grad[5] = Eigen::Vector3d(0, kY2a * z, kY2a * y);
  grad[6] = Eigen::Vector3d(0, 0, 6.0 * kY2b * z);
  grad[7] = Eigen::Vector3d(kY2a * z, 0, kY2a * x);
  grad[8] = Eigen::Vector3d(2.0 * kY2c * x, -2.0 * kY2c * y, 0);
}

}  // namespace

Eigen::Vector3d sh_eval_color(const double* sh_g, int degree, const Eigen::Vector3d& dir) {
  double basis[9];
  sh_basis(degree, dir, basis);
  const int nb = sh_basis_size(degree);
  Eigen::Vector3d c;
  for (int ch = 0; ch < 3; ++ch) {
    double v = 0.5;
    const double* coef = sh_g + ch * nb;
    for (int b = 0; b < nb; ++b) v += coef[b] * basis[b];
    c[ch] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  }
  return c;
}

void sh_eval_color_backward(const double* sh_g, int degree, const Eigen::Vector3d& dir,
                            const Eigen::Vector3d& d_color, double* d_sh_g,
                            Eigen::Vector3d* d_dir) {
  double basis[9];
  Eigen::Vector3d bgrad[9];
  sh_basis(degree, dir, basis);
  if (d_dir) sh_basis_grad(degree, dir, bgrad);
  const int nb = sh_basis_size(degree);
  for (int ch = 0; ch < 3; ++ch) {
    double v = 0.5;
    const double* coef = sh_g + ch * nb;
    for (int b = 0; b < nb; ++b) v += coef[b] * basis[b];
    if (v < 0.0 || v > 1.0) continue;  // clamped: zero gradient
    const double g = d_color[ch];
    if (g == 0.0) continue;
    if (d_sh_g)
      for (int b = 0; b < nb; ++b) d_sh_g[ch * nb + b] += g * basis[b];
    if (d_dir)
      for (int b = 0; b < nb; ++b) *d_dir += g * coef[b] * bgrad[b];
  }
}

namespace {

constexpr double kInitOpacityLogit = -2.1972245773362196;  // logit(0.1)

std::vector<double> knn_mean_distance(const std::vector<Eigen::Vector3d>& pts) {
  const size_t n = pts.size();
  std::vector<double> out(n, 0.1);
  if (n < 2) return out;
  const size_t kk = std::min<size_t>(3, n - 1);
  parallel_for(static_cast<int64_t>(n), [&](int64_t i) {
    double best[3] = {1e300, 1e300, 1e300};
    for (size_t j = 0; j < n; ++j) {
      if (j == static_cast<size_t>(i)) continue;
      const double d2 = (pts[j] - pts[static_cast<size_t>(i)]).squaredNorm();
      if (d2 < best[2]) {
        best[2] = d2;
        if (best[2] < best[1]) std::swap(best[1], best[2]);
        if (best[1] < best[0]) std::swap(best[0], best[1]);
      }
    }
    double sum = 0.0;
    for (size_t k = 0; k < kk; ++k) sum += std::sqrt(best[k]);
    out[static_cast<size_t>(i)] = sum / static_cast<double>(kk);
  });
  return out;
}

GaussianScene build_from_samples(const std::vector<Eigen::Vector3d>& pts,
                                 const std::vector<Eigen::Vector3d>& cols, int sh_degree) {
  GaussianScene scene;
  scene.sh_degree = sh_degree;
  scene.resize(pts.size());
  const std::vector<double> nn = knn_mean_distance(pts);
  const int nb = scene.basis();
  for (size_t i = 0; i < pts.size(); ++i) {
    for (int d = 0; d < 3; ++d) scene.mu[3 * i + d] = pts[i][d];
    // Cap the neighbour distance: sparse point sets would otherwise seed
    // meter-scale blobs whose sigma points leave the fisheye validity cone,
    // and such splats never rasterize (so they never receive a gradient).
    const double ls = std::log(std::clamp(nn[i], 1e-4, 1.0));
    for (int d = 0; d < 3; ++d) scene.log_scales[3 * i + d] = ls;
    scene.logit_opacity[i] = kInitOpacityLogit;
    for (int ch = 0; ch < 3; ++ch) {
      double a = cols[i][ch];
      a = a < 0.0 ? 0.0 : (a > 1.0 ? 1.0 : a);
      scene.sh[i * scene.sh_stride() + static_cast<size_t>(ch * nb)] = (a - 0.5) / kY0;
    }
  }
  return scene;
}

}  // namespace

GaussianScene init_from_points(const std::vector<Eigen::Vector3d>& points,
                               const std::vector<Eigen::Vector3d>& colors, size_t count,
                               int sh_degree, uint64_t seed) {
  if (points.empty()) throw DataError("init_from_points: empty point set");
  if (points.size() != colors.size())
    throw DataError("init_from_points: point/color count mismatch");
  if (count == 0) count = points.size();

  Prng rng(mix_seed(seed, 0x5ce4e));
  std::vector<Eigen::Vector3d> pts, cols;
  pts.reserve(count);
  cols.reserve(count);
  if (count <= points.size()) {
    std::vector<size_t> idx(points.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    rng.shuffle(idx);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    for (size_t i : idx) {
      pts.push_back(points[i]);
      cols.push_back(colors[i]);
    }
  } else {
    pts = points;
    cols = colors;
    // Extra samples duplicate source points with a small jitter so nearest
    // neighbour distances stay positive.
    while (pts.size() < count) {
      const size_t i = static_cast<size_t>(rng.uniform_index(points.size()));
      Eigen::Vector3d p = points[i];
      for (int d = 0; d < 3; ++d) p[d] += 0.01 * rng.normal();
      pts.push_back(p);
      cols.push_back(colors[i]);
    }
  }
  return build_from_samples(pts, cols, sh_degree);
}

GaussianScene init_random(const Eigen::AlignedBox3d& box, size_t count, int sh_degree,
                          uint64_t seed) {
  if (count == 0) throw DataError("init_random: count must be positive");
  Prng rng(mix_seed(seed, 0x7a2d0));
  std::vector<Eigen::Vector3d> pts(count), cols(count, Eigen::Vector3d(0.5, 0.5, 0.5));
  for (auto& p : pts)
    for (int d = 0; d < 3; ++d) p[d] = rng.uniform(box.min()[d], box.max()[d]);
  return build_from_samples(pts, cols, sh_degree);
}

void save_checkpoint(const std::string& path, const GaussianScene& scene) {
  scene.validate();
  BinaryWriter w(path);
  w.magic("PGSC");
  w.u32(1);
  w.u32(static_cast<uint32_t>(scene.size()));
  w.u32(static_cast<uint32_t>(scene.sh_degree));
  const size_t shs = scene.sh_stride();
  for (size_t i = 0; i < scene.size(); ++i) {
    w.f32_array(scene.mu.data() + 3 * i, 3);
    w.f32_array(scene.quat.data() + 4 * i, 4);
    w.f32_array(scene.log_scales.data() + 3 * i, 3);
    w.f32_array(scene.logit_opacity.data() + i, 1);
    w.f32_array(scene.sh.data() + shs * i, shs);
  }
  w.close();
}

GaussianScene load_checkpoint(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic("PGSC", "checkpoint");
  const uint32_t version = r.u32();
  if (version != 1) throw DataError("unsupported checkpoint version: " + path);
  const uint32_t count = r.u32();
  const uint32_t degree = r.u32();
  if (degree > 2) throw DataError("checkpoint sh_degree out of range: " + path);
  if (count == 0 || count > 50'000'000) throw DataError("implausible checkpoint count: " + path);

  GaussianScene scene;
  scene.sh_degree = static_cast<int>(degree);
  scene.resize(count);
  const size_t shs = scene.sh_stride();
  for (size_t i = 0; i < count; ++i) {
    r.f32_array(scene.mu.data() + 3 * i, 3);
    r.f32_array(scene.quat.data() + 4 * i, 4);
    r.f32_array(scene.log_scales.data() + 3 * i, 3);
    r.f32_array(scene.logit_opacity.data() + i, 1);
    r.f32_array(scene.sh.data() + shs * i, shs);
  }
  if (!r.at_eof()) throw DataError("trailing bytes in checkpoint: " + path);

  // f32 round-trips denormalize quaternions slightly; restore unit norm.
  for (size_t i = 0; i < count; ++i) {
    Eigen::Map<Eigen::Vector4d> q(scene.quat.data() + 4 * i);
    const double n = q.norm();
    if (n < 1e-12) throw DataError("degenerate quaternion in checkpoint: " + path);
    q /= n;
  }
  scene.validate();
  return scene;
}

}  // namespace parkgauss
