#pragma once

#include "fpl/tensor.hpp"

namespace fpl::kernels {

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Serial sliding-window reference; the oracle the fast path is tested against.
Tensor conv2d_reference(const Tensor& x, const Tensor& w, int stride, int padding);

// im2col + matmul, OpenMP over output rows. Inner accumulation order is
// fixed, so results are bit-identical for any thread count.
Tensor conv2d_im2col(const Tensor& x, const Tensor& w, int stride, int padding);

// Gradients for the im2col path.
void conv2d_backward(const Tensor& x, const Tensor& w, int stride, int padding,
                     const Tensor& dy, Tensor& dx, Tensor& dw);

// C[m,n] = A[m,k] * B[k,n], OpenMP over rows of A.
void matmul_mk_kn(const float* a, const float* b, float* c, int m, int k, int n);

}  // namespace fpl::kernels
