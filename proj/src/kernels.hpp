#pragma once

// Dense loops shared by the tape primitives. Row-major throughout; every
// reduction runs in a fixed order so results are bit-reproducible.

#include <cstddef>

namespace kdstage::kernels {

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const T av = a[i * k + l];
      if (av == T(0)) continue;
      const T* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k x n] += a^T * b  with a: [m x k], b: [m x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* brow = b + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const T av = a[i * k + l];
      if (av == T(0)) continue;
      T* crow = c + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Fixed eight-lane dot product.
template <typename T>
T dot(const T* x, const T* y, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) lanes[j] += x[i + j] * y[i + j];
  }
  T tail = 0;
  for (; i < n; ++i) tail += x[i] * y[i];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

// c[m x k] += a[m x n] * b[k x n]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) c[i * k + l] += dot(a + i * n, b + l * n, n);
  }
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw, stride, padding;
  std::size_t out_h, out_w;
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

// col[(c*kh + ky)*kw + kx][oy*out_w + ox] = x[c][oy*s - p + ky][ox*s - p + kx], zero outside.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* dst = col + ((c * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          T* drow = dst + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) drow[ox] = T(0);
            continue;
          }
          const T* srow = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            drow[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? T(0) : srow[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* x) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* src = col + ((c * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          T* xrow = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const T* srow = src + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            if (ix >= 0 && ix < static_cast<long>(g.width)) xrow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace kdstage::kernels
