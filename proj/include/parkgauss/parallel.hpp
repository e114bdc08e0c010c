#pragma once

#include <cstdint>
#include <span>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace parkgauss {

// Thread count used by all parallel kernels. 0 means "library default".
void set_thread_count(int n);
int thread_count();

template <class F>
void parallel_for(int64_t n, F&& body) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) body(i);
#else
  for (int64_t i = 0; i < n; ++i) body(i);
#endif
}

template <class F>
void parallel_for_dynamic(int64_t n, F&& body) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1)
  for (int64_t i = 0; i < n; ++i) body(i);
#else
  for (int64_t i = 0; i < n; ++i) body(i);
#endif
}

// Deterministic sum: fixed 4096-element blocks are summed independently
// (parallel), then block sums are combined in index order. The result is
// bitwise identical for any thread count.
double deterministic_sum(std::span<const double> values);

// Same reduction applied to f(i) for i in [0, n).
template <class F>
double deterministic_sum_n(int64_t n, F&& f) {
  constexpr int64_t kBlock = 4096;
  const int64_t nblocks = (n + kBlock - 1) / kBlock;
  std::vector<double> partial(static_cast<size_t>(nblocks), 0.0);
  parallel_for(nblocks, [&](int64_t b) {
    const int64_t lo = b * kBlock;
    const int64_t hi = lo + kBlock < n ? lo + kBlock : n;
    double s = 0.0;
    for (int64_t i = lo; i < hi; ++i) s += f(i);
    partial[static_cast<size_t>(b)] = s;
  });
  double total = 0.0;
  for (double s : partial) total += s;
  return total;
}

}  // namespace parkgauss
