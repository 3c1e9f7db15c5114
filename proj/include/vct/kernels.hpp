#pragma once

// Dense kernels used by the tensor engine. Each kernel has a serial
// reference implementation and an OpenMP variant parallelized over
// output-disjoint indices, so both produce bitwise-identical results.
// The dispatchers at the bottom pick a variant from the global thread
// setting.

#include <cstddef>

namespace vct {

int num_threads();
void set_num_threads(int n);

namespace kernels {

namespace serial {

// c[m x n] = a[m x k] * b[k x n]
template <class T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) ci[j] = T(0);
    const T* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b[k x n]
template <class T>
void matmul_nn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + static_cast<std::size_t>(i) * n;
    const T* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
template <class T>
void matmul_nt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<std::size_t>(i) * k;
    T* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* bj = b + static_cast<std::size_t>(j) * k;
      T s = T(0);
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <class T>
void matmul_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    T* cp = c + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T aip = a[static_cast<std::size_t>(i) * k + p];
      const T* bi = b + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

// x: [h x w x ci], wgt: [kh x kw x ci x co], bias: [co] or null,
// y: [ho x wo x co] with ho = (h + 2*pad - kh)/stride + 1.
template <class T>
void conv2d(const T* x, const T* wgt, const T* bias, T* y, int h, int w,
            int ci, int kh, int kw, int co, int stride, int pad, int ho,
            int wo) {
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      T* out = y + (static_cast<std::size_t>(oy) * wo + ox) * co;
      for (int c = 0; c < co; ++c) out[c] = bias ? bias[c] : T(0);
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          const T* xin = x + (static_cast<std::size_t>(iy) * w + ix) * ci;
          const T* wk =
              wgt + (static_cast<std::size_t>(ky) * kw + kx) * ci * co;
          for (int c = 0; c < ci; ++c) {
            const T xv = xin[c];
            const T* wc = wk + static_cast<std::size_t>(c) * co;
            for (int o = 0; o < co; ++o) out[o] += xv * wc[o];
          }
        }
      }
    }
  }
}

// dx[h x w x ci] += conv transpose of dy with wgt (gather form).
template <class T>
void conv2d_backward_input(const T* dy, const T* wgt, T* dx, int h, int w,
                           int ci, int kh, int kw, int co, int stride, int pad,
                           int ho, int wo) {
  for (int iy = 0; iy < h; ++iy) {
    for (int ix = 0; ix < w; ++ix) {
      T* g = dx + (static_cast<std::size_t>(iy) * w + ix) * ci;
      for (int ky = 0; ky < kh; ++ky) {
        const int num = iy + pad - ky;
        if (num < 0 || num % stride != 0) continue;
        const int oy = num / stride;
        if (oy >= ho) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int numx = ix + pad - kx;
          if (numx < 0 || numx % stride != 0) continue;
          const int ox = numx / stride;
          if (ox >= wo) continue;
          const T* gy = dy + (static_cast<std::size_t>(oy) * wo + ox) * co;
          const T* wk =
              wgt + (static_cast<std::size_t>(ky) * kw + kx) * ci * co;
          for (int c = 0; c < ci; ++c) {
            const T* wc = wk + static_cast<std::size_t>(c) * co;
            T s = T(0);
            for (int o = 0; o < co; ++o) s += gy[o] * wc[o];
            g[c] += s;
          }
        }
      }
    }
  }
}

// dw[kh x kw x ci x co] += correlation of x with dy; db[co] += sums.
template <class T>
void conv2d_backward_weights(const T* x, const T* dy, T* dw, T* db, int h,
                             int w, int ci, int kh, int kw, int co, int stride,
                             int pad, int ho, int wo) {
  for (int ky = 0; ky < kh; ++ky) {
    for (int kx = 0; kx < kw; ++kx) {
      T* wk = dw + (static_cast<std::size_t>(ky) * kw + kx) * ci * co;
      for (int oy = 0; oy < ho; ++oy) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int ox = 0; ox < wo; ++ox) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          const T* xin = x + (static_cast<std::size_t>(iy) * w + ix) * ci;
          const T* gy = dy + (static_cast<std::size_t>(oy) * wo + ox) * co;
          for (int c = 0; c < ci; ++c) {
            const T xv = xin[c];
            T* wc = wk + static_cast<std::size_t>(c) * co;
            for (int o = 0; o < co; ++o) wc[o] += xv * gy[o];
          }
        }
      }
    }
  }
  if (db) {
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const T* gy = dy + (static_cast<std::size_t>(oy) * wo + ox) * co;
        for (int o = 0; o < co; ++o) db[o] += gy[o];
      }
  }
}

}  // namespace serial

namespace par {

template <class T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i)
    serial::matmul(a + static_cast<std::size_t>(i) * k, b,
                   c + static_cast<std::size_t>(i) * n, 1, k, n);
}

template <class T>
void matmul_nn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i)
    serial::matmul_nn_acc(a + static_cast<std::size_t>(i) * k, b,
                          c + static_cast<std::size_t>(i) * n, 1, k, n);
}

template <class T>
void matmul_nt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i)
    serial::matmul_nt_acc(a + static_cast<std::size_t>(i) * k, b,
                          c + static_cast<std::size_t>(i) * n, 1, k, n);
}

template <class T>
void matmul_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
// rows of c are indexed by p; each p reads a full column of a
#pragma omp parallel for schedule(static)
  for (int p = 0; p < k; ++p) {
    T* cp = c + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T aip = a[static_cast<std::size_t>(i) * k + p];
      const T* bi = b + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

template <class T>
void conv2d(const T* x, const T* wgt, const T* bias, T* y, int h, int w,
            int ci, int kh, int kw, int co, int stride, int pad, int ho,
            int wo) {
#pragma omp parallel for schedule(static)
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      T* out = y + (static_cast<std::size_t>(oy) * wo + ox) * co;
      for (int c = 0; c < co; ++c) out[c] = bias ? bias[c] : T(0);
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          const T* xin = x + (static_cast<std::size_t>(iy) * w + ix) * ci;
          const T* wk =
              wgt + (static_cast<std::size_t>(ky) * kw + kx) * ci * co;
          for (int c = 0; c < ci; ++c) {
            const T xv = xin[c];
            const T* wc = wk + static_cast<std::size_t>(c) * co;
            for (int o = 0; o < co; ++o) out[o] += xv * wc[o];
          }
        }
      }
    }
  }
}

template <class T>
void conv2d_backward_input(const T* dy, const T* wgt, T* dx, int h, int w,
                           int ci, int kh, int kw, int co, int stride, int pad,
                           int ho, int wo) {
#pragma omp parallel for schedule(static)
  for (int iy = 0; iy < h; ++iy) {
    for (int ix = 0; ix < w; ++ix) {
      T* g = dx + (static_cast<std::size_t>(iy) * w + ix) * ci;
      for (int ky = 0; ky < kh; ++ky) {
        const int num = iy + pad - ky;
        if (num < 0 || num % stride != 0) continue;
        const int oy = num / stride;
        if (oy >= ho) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int numx = ix + pad - kx;
          if (numx < 0 || numx % stride != 0) continue;
          const int ox = numx / stride;
          if (ox >= wo) continue;
          const T* gy = dy + (static_cast<std::size_t>(oy) * wo + ox) * co;
          const T* wk =
              wgt + (static_cast<std::size_t>(ky) * kw + kx) * ci * co;
          for (int c = 0; c < ci; ++c) {
            const T* wc = wk + static_cast<std::size_t>(c) * co;
            T s = T(0);
            for (int o = 0; o < co; ++o) s += gy[o] * wc[o];
            g[c] += s;
          }
        }
      }
    }
  }
}

template <class T>
void conv2d_backward_weights(const T* x, const T* dy, T* dw, T* db, int h,
                             int w, int ci, int kh, int kw, int co, int stride,
                             int pad, int ho, int wo) {
  const int taps = kh * kw;
// kernel taps write disjoint dw slices
#pragma omp parallel for schedule(static)
  for (int t = 0; t < taps; ++t) {
    const int ky = t / kw;
    const int kx = t % kw;
    T* wk = dw + static_cast<std::size_t>(t) * ci * co;
    for (int oy = 0; oy < ho; ++oy) {
      const int iy = oy * stride - pad + ky;
      if (iy < 0 || iy >= h) continue;
      for (int ox = 0; ox < wo; ++ox) {
        const int ix = ox * stride - pad + kx;
        if (ix < 0 || ix >= w) continue;
        const T* xin = x + (static_cast<std::size_t>(iy) * w + ix) * ci;
        const T* gy = dy + (static_cast<std::size_t>(oy) * wo + ox) * co;
        for (int c = 0; c < ci; ++c) {
          const T xv = xin[c];
          T* wc = wk + static_cast<std::size_t>(c) * co;
          for (int o = 0; o < co; ++o) wc[o] += xv * gy[o];
        }
      }
    }
  }
  if (db) {
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const T* gy = dy + (static_cast<std::size_t>(oy) * wo + ox) * co;
        for (int o = 0; o < co; ++o) db[o] += gy[o];
      }
  }
}

}  // namespace par

template <class T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n) {
  if (num_threads() > 1)
    par::matmul(a, b, c, m, k, n);
  else
    serial::matmul(a, b, c, m, k, n);
}

template <class T>
void matmul_nn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  if (num_threads() > 1)
    par::matmul_nn_acc(a, b, c, m, k, n);
  else
    serial::matmul_nn_acc(a, b, c, m, k, n);
}

template <class T>
void matmul_nt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  if (num_threads() > 1)
    par::matmul_nt_acc(a, b, c, m, k, n);
  else
    serial::matmul_nt_acc(a, b, c, m, k, n);
}

template <class T>
void matmul_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  if (num_threads() > 1)
    par::matmul_tn_acc(a, b, c, m, k, n);
  else
    serial::matmul_tn_acc(a, b, c, m, k, n);
}

template <class T>
void conv2d(const T* x, const T* wgt, const T* bias, T* y, int h, int w,
            int ci, int kh, int kw, int co, int stride, int pad, int ho,
            int wo) {
  if (num_threads() > 1)
    par::conv2d(x, wgt, bias, y, h, w, ci, kh, kw, co, stride, pad, ho, wo);
  else
    serial::conv2d(x, wgt, bias, y, h, w, ci, kh, kw, co, stride, pad, ho, wo);
}

template <class T>
void conv2d_backward_input(const T* dy, const T* wgt, T* dx, int h, int w,
                           int ci, int kh, int kw, int co, int stride, int pad,
                           int ho, int wo) {
  if (num_threads() > 1)
    par::conv2d_backward_input(dy, wgt, dx, h, w, ci, kh, kw, co, stride, pad,
                               ho, wo);
  else
    serial::conv2d_backward_input(dy, wgt, dx, h, w, ci, kh, kw, co, stride,
                                  pad, ho, wo);
}

template <class T>
void conv2d_backward_weights(const T* x, const T* dy, T* dw, T* db, int h,
                             int w, int ci, int kh, int kw, int co, int stride,
                             int pad, int ho, int wo) {
  if (num_threads() > 1)
    par::conv2d_backward_weights(x, dy, dw, db, h, w, ci, kh, kw, co, stride,
                                 pad, ho, wo);
  else
    serial::conv2d_backward_weights(x, dy, dw, db, h, w, ci, kh, kw, co,
                                    stride, pad, ho, wo);
}

}  // namespace kernels
}  // namespace vct
