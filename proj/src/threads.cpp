#include "vct/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vct {

namespace {
int g_threads = 1;
}

int num_threads() { return g_threads; }

void set_num_threads(int n) {
  if (n < 1) n = 1;
  g_threads = n;
#ifdef _OPENMP
  omp_set_num_threads(n);
#endif
}

}  // namespace vct
