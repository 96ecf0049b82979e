#pragma once

#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace unlearnwf {

/// Caps the worker count used by parallel_for. Results never depend on it:
/// callers write into pre-allocated slots and reduce in index order.
inline void set_jobs(int jobs) {
#ifdef _OPENMP
  if (jobs > 0) omp_set_num_threads(jobs);
#else
  (void)jobs;
#endif
}

template <typename F>
void parallel_for(std::size_t n, F&& body) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(n); ++i) body(static_cast<std::size_t>(i));
#else
  for (std::size_t i = 0; i < n; ++i) body(i);
#endif
}

}  // namespace unlearnwf
