#include "fpl/conv.hpp"

#include <cstring>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fpl::kernels {

static void check_conv_args(const Tensor& x, const Tensor& w, int stride, int padding) {
  if (x.rank() != 4 || w.rank() != 4)
    throw std::invalid_argument("conv2d: expected NCHW input and FCkhkw weight");
  if (x.dim(1) != w.dim(1))
    throw std::invalid_argument("conv2d: channel mismatch");
  if (stride < 1 || padding < 0)
    throw std::invalid_argument("conv2d: invalid stride/padding");
  if (w.dim(2) > x.dim(2) + 2 * padding || w.dim(3) > x.dim(3) + 2 * padding)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
}

Tensor conv2d_reference(const Tensor& x, const Tensor& w, int stride, int padding) {
  check_conv_args(x, w, stride, padding);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = conv_out_dim(H, kh, stride, padding);
  const int ow = conv_out_dim(W, kw, stride, padding);
  Tensor y({N, F, oh, ow});
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          float acc = 0.0f;
          for (int c = 0; c < C; ++c)
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v) {
                int hi = i * stride - padding + u;
                int wi = j * stride - padding + v;
                if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                acc += x.at4(n, c, hi, wi) * w.at4(f, c, u, v);
              }
          y.at4(n, f, i, j) = acc;
        }
  return y;
}

void matmul_mk_kn(const float* a, const float* b, float* c, int m, int k, int n) {
  std::memset(c, 0, sizeof(float) * static_cast<std::size_t>(m) * n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * n;
    const float* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// col buffer layout: [C*kh*kw, oh*ow] for one image.
static void im2col(const Tensor& x, int n, int kh, int kw, int stride, int padding,
                   int oh, int ow, float* col) {
  const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::size_t r = 0;
  for (int c = 0; c < C; ++c)
    for (int u = 0; u < kh; ++u)
      for (int v = 0; v < kw; ++v, ++r) {
        float* dst = col + r * static_cast<std::size_t>(oh) * ow;
        for (int i = 0; i < oh; ++i) {
          int hi = i * stride - padding + u;
          for (int j = 0; j < ow; ++j) {
            int wi = j * stride - padding + v;
            dst[i * ow + j] = (hi < 0 || hi >= H || wi < 0 || wi >= W)
                                  ? 0.0f
                                  : x.at4(n, c, hi, wi);
          }
        }
      }
}

Tensor conv2d_im2col(const Tensor& x, const Tensor& w, int stride, int padding) {
  check_conv_args(x, w, stride, padding);
  const int N = x.dim(0), C = x.dim(1);
  const int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = conv_out_dim(x.dim(2), kh, stride, padding);
  const int ow = conv_out_dim(x.dim(3), kw, stride, padding);
  const int K = C * kh * kw;
  const int M = oh * ow;
  Tensor y({N, F, oh, ow});
  std::vector<float> col(static_cast<std::size_t>(K) * M);
  for (int n = 0; n < N; ++n) {
    im2col(x, n, kh, kw, stride, padding, oh, ow, col.data());
    matmul_mk_kn(w.data.data(), col.data(),
                 y.data.data() + static_cast<std::size_t>(n) * F * M, F, K, M);
  }
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& w, int stride, int padding,
                     const Tensor& dy, Tensor& dx, Tensor& dw) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = dy.dim(2), ow = dy.dim(3);
  const int K = C * kh * kw;
  const int M = oh * ow;
  if (dx.shape != x.shape) dx = Tensor::zeros(x.shape);
  if (dw.shape != w.shape) dw = Tensor::zeros(w.shape);

  std::vector<float> col(static_cast<std::size_t>(K) * M);
  std::vector<float> dcol(static_cast<std::size_t>(K) * M);
  for (int n = 0; n < N; ++n) {
    im2col(x, n, kh, kw, stride, padding, oh, ow, col.data());
    const float* dyn = dy.data.data() + static_cast<std::size_t>(n) * F * M;

    // dW += dY_n * col_n^T   (F x K), accumulated serially over n.
#pragma omp parallel for schedule(static)
    for (int f = 0; f < F; ++f) {
      const float* dyrow = dyn + static_cast<std::size_t>(f) * M;
      float* dwrow = dw.data.data() + static_cast<std::size_t>(f) * K;
      for (int r = 0; r < K; ++r) {
        const float* crow = col.data() + static_cast<std::size_t>(r) * M;
        float acc = 0.0f;
        for (int j = 0; j < M; ++j) acc += dyrow[j] * crow[j];
        dwrow[r] += acc;
      }
    }

    // dcol = W^T * dY_n   (K x M); each row r owned by one thread.
#pragma omp parallel for schedule(static)
    for (int r = 0; r < K; ++r) {
      float* drow = dcol.data() + static_cast<std::size_t>(r) * M;
      std::memset(drow, 0, sizeof(float) * M);
      for (int f = 0; f < F; ++f) {
        const float wv = w.data[static_cast<std::size_t>(f) * K + r];
        const float* dyrow = dyn + static_cast<std::size_t>(f) * M;
        for (int j = 0; j < M; ++j) drow[j] += wv * dyrow[j];
      }
    }

    // col2im scatter (serial; overlapping windows write the same pixels).
    std::size_t r = 0;
    for (int c = 0; c < C; ++c)
      for (int u = 0; u < kh; ++u)
        for (int v = 0; v < kw; ++v, ++r) {
          const float* drow = dcol.data() + r * static_cast<std::size_t>(M);
          for (int i = 0; i < oh; ++i) {
            int hi = i * stride - padding + u;
            if (hi < 0 || hi >= H) continue;
            for (int j = 0; j < ow; ++j) {
              int wi = j * stride - padding + v;
              if (wi < 0 || wi >= W) continue;
              dx.at4(n, c, hi, wi) += drow[i * ow + j];
            }
          }
        }
  }
}

}  // namespace fpl::kernels
