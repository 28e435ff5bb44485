#pragma once

#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace crdiff {

/// Worker cap from CRPRUNE_THREADS; 0 means "let the runtime decide".
inline int configured_threads() {
  const char* env = std::getenv("CRPRUNE_THREADS");
  if (env == nullptr || *env == '\0') return 0;
  try {
    int n = std::stoi(env);
    return n > 0 ? n : 0;
  } catch (...) {
    return 0;
  }
}

inline void apply_thread_cap() {
#ifdef _OPENMP
  static std::once_flag once;
  std::call_once(once, [] {
    if (int n = configured_threads(); n > 0) omp_set_num_threads(n);
  });
#endif
}

/**
 * Runs fn(i) for i in [0, n). Iterations must write disjoint outputs; any
 * reduction over i is left to the caller so results do not depend on the
 * worker count. The first exception thrown by any iteration is rethrown.
 */
template <typename Fn>
void parallel_for(int n, Fn&& fn) {
  if (n <= 0) return;
#ifdef _OPENMP
  apply_thread_cap();
  if (n > 1 && omp_get_max_threads() > 1 && !omp_in_parallel()) {
    std::exception_ptr err;
    std::mutex mu;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!err) err = std::current_exception();
      }
    }
    if (err) std::rethrow_exception(err);
    return;
  }
#endif
  for (int i = 0; i < n; ++i) fn(i);
}

}  // namespace crdiff
