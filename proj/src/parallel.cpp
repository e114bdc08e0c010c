#include "parkgauss/parallel.hpp"

namespace parkgauss {

void set_thread_count(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

double deterministic_sum(std::span<const double> values) {
  return deterministic_sum_n(static_cast<int64_t>(values.size()),
                             [&](int64_t i) { return values[static_cast<size_t>(i)]; });
}

}  // namespace parkgauss
