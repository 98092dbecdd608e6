#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pcfglab {

// Every data-parallel kernel takes an Exec and must produce bit-identical
// results under both policies: per-index outputs land in preallocated slots
// and reductions run serially in index order afterwards.
enum class Exec { serial, openmp };

template <class F>
void parallel_for(Exec exec, std::int64_t n, F&& body) {
  if (exec == Exec::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 16)
    for (std::int64_t i = 0; i < n; ++i) body(i);
    return;
#endif
  }
  for (std::int64_t i = 0; i < n; ++i) body(i);
}

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace pcfglab
