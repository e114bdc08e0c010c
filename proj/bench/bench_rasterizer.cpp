// Throughput comparison: tiled OpenMP rasterizer vs the serial per-pixel
// reference, plus the backward pass. The two forwards are checked for the
// bitwise equality the tests rely on before any timing is reported.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "parkgauss/camera.hpp"
#include "parkgauss/parallel.hpp"
#include "parkgauss/rasterizer.hpp"
#include "parkgauss/scene.hpp"

using namespace parkgauss;

namespace {

double time_ms(int reps, const std::function<void()>& fn) {
  fn();  // warm-up
  std::vector<double> samples;
  samples.reserve(reps);
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(samples.begin(), samples.end());
  return samples[samples.size() / 2];
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rasterizer benchmark: tiled/OpenMP vs serial reference"};
  int n_gauss = 8000, width = 640, height = 480, reps = 5, threads = 0;
  app.add_option("--gaussians", n_gauss, "scene size");
  app.add_option("--width", width, "image width");
  app.add_option("--height", height, "image height");
  app.add_option("--reps", reps, "timed repetitions (median reported)");
  app.add_option("--threads", threads, "thread count for the parallel runs");
  CLI11_PARSE(app, argc, argv);

  const Eigen::AlignedBox3d box(Eigen::Vector3d(-8, -8, 0), Eigen::Vector3d(8, 8, 3));
  const GaussianScene scene = init_random(box, static_cast<size_t>(n_gauss), 2, 42);
  const FisheyeCamera cam = default_surround_rig(width, height)[0];
  const Pose w2c = cam.pose;  // vehicle frame == world frame
  const RenderConfig cfg;

  set_thread_count(threads);
  Image tiled = rasterize(scene, cam.intr, w2c, cfg, nullptr);
  const Image reference = rasterize_reference(scene, cam.intr, w2c, cfg);
  if (!tiled.same_shape(reference) ||
      !std::equal(tiled.data(), tiled.data() + tiled.size(), reference.data())) {
    std::fprintf(stderr, "tiled and reference outputs differ; refusing to time a broken pair\n");
    return 1;
  }

  std::printf("scene: %d gaussians, %dx%d, %d threads\n", n_gauss, width, height,
              thread_count());

  const double t_ref = time_ms(reps, [&] { rasterize_reference(scene, cam.intr, w2c, cfg); });

  set_thread_count(1);
  const double t_tiled1 = time_ms(reps, [&] { rasterize(scene, cam.intr, w2c, cfg, nullptr); });
  set_thread_count(threads);
  const double t_tiled = time_ms(reps, [&] { rasterize(scene, cam.intr, w2c, cfg, nullptr); });

  RenderCache cache;
  rasterize(scene, cam.intr, w2c, cfg, &cache);
  Image d_img(height, width, 3, 1e-3);
  SceneGrads grads;
  grads.resize_like(scene);
  const double t_bwd = time_ms(
      reps, [&] { rasterize_backward(scene, cam.intr, w2c, cfg, cache, d_img, &grads); });

  std::printf("%-28s %10s %10s\n", "kernel", "ms/frame", "speedup");
  std::printf("%-28s %10.2f %10s\n", "reference (serial)", t_ref, "1.00x");
  std::printf("%-28s %10.2f %9.2fx\n", "tiled, 1 thread", t_tiled1, t_ref / t_tiled1);
  std::printf("%-28s %10.2f %9.2fx\n", "tiled, all threads", t_tiled, t_ref / t_tiled);
  std::printf("%-28s %10.2f %9s\n", "backward, all threads", t_bwd, "-");
  return 0;
}
