// Copyright (c) the perco-micro Authors.
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <memory>
#include <vector>

#include "pcm/tensor.hpp"

namespace pcm {

namespace detail {

template <typename Real>
Real dot8(const Real* a, const Real* b, int k) {
  Real s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
  int i = 0;
  for (; i + 8 <= k; i += 8) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
    s4 += a[i + 4] * b[i + 4];
    s5 += a[i + 5] * b[i + 5];
    s6 += a[i + 6] * b[i + 6];
    s7 += a[i + 7] * b[i + 7];
  }
  Real s = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
  for (; i < k; ++i) s += a[i] * b[i];
  return s;
}

template <typename Real>
void axpy(Real* y, Real a, const Real* x, int k) {
  for (int i = 0; i < k; ++i) y[i] += a * x[i];
}

// Patch matrix: one row of length C*kh*kw per output position, zero padded.
// Row index np = n*(Ho*Wo) + oy*Wo + ox.
template <typename Real>
void im2col(const Real* x, int N, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, std::vector<Real>& col) {
  const int K = C * kh * kw;
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  col.assign(static_cast<size_t>(N) * P * K, Real(0));
  parallel_for(static_cast<std::int64_t>(N) * P, [&](std::int64_t np) {
    const int n = static_cast<int>(np / P);
    const int p = static_cast<int>(np % P);
    const int oy = p / Wo, ox = p % Wo;
    Real* row = col.data() + np * K;
    for (int c = 0; c < C; ++c) {
      const Real* src = x + (static_cast<std::int64_t>(n) * C + c) * H * W;
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= W) continue;
          row[(c * kh + ky) * kw + kx] = src[iy * W + ix];
        }
      }
    }
  });
}

// Scatter the patch-matrix gradient back into the input gradient. Patches
// overlap, so parallelism is per image only.
template <typename Real>
void col2im_add(const std::vector<Real>& dcol, int N, int C, int H, int W, int kh, int kw,
                int stride, int pad, int Ho, int Wo, Real* dx) {
  const int K = C * kh * kw;
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  parallel_for(N, [&](std::int64_t n) {
    for (std::int64_t p = 0; p < P; ++p) {
      const int oy = static_cast<int>(p) / Wo, ox = static_cast<int>(p) % Wo;
      const Real* row = dcol.data() + (n * P + p) * K;
      for (int c = 0; c < C; ++c) {
        Real* dst = dx + (n * C + c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            dst[iy * W + ix] += row[(c * kh + ky) * kw + kx];
          }
        }
      }
    }
  });
}

}  // namespace detail

// 2-D convolution, NCHW. kernel [O,C,kh,kw], bias [O]; kh/kw odd.
// Ho = (H + 2*pad - kh)/stride + 1.
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& input, const Tensor<Real>& kernel,
                    const Tensor<Real>& bias, int stride = 1, int pad = 0) {
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 4)
    throw DataError("conv2d: expected NCHW input and OCkk kernel");
  if (xs[1] != ks[1])
    throw DataError("conv2d: input channels " + std::to_string(xs[1]) +
                    " != kernel channels " + std::to_string(ks[1]));
  if (ks[2] % 2 == 0 || ks[3] % 2 == 0) throw DataError("conv2d: kernel size must be odd");
  if (stride < 1 || pad < 0) throw DataError("conv2d: invalid stride/padding");
  if (bias.shape() != Shape{ks[0]}) throw DataError("conv2d: bias shape mismatch");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int O = ks[0], kh = ks[2], kw = ks[3];
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) throw DataError("conv2d: output would be empty");

  const int K = C * kh * kw;
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  auto col = std::make_shared<std::vector<Real>>();
  detail::im2col(input.data().data(), N, C, H, W, kh, kw, stride, pad, Ho, Wo, *col);

  std::vector<Real> out(static_cast<size_t>(N) * O * P);
  const Real* kmat = kernel.data().data();  // [O][K] contiguous
  const Real* pb = bias.data().data();
  parallel_for(static_cast<std::int64_t>(N) * P, [&](std::int64_t np) {
    const int n = static_cast<int>(np / P);
    const std::int64_t p = np % P;
    const Real* row = col->data() + np * K;
    for (int o = 0; o < O; ++o)
      out[(static_cast<std::int64_t>(n) * O + o) * P + p] =
          detail::dot8(kmat + static_cast<std::int64_t>(o) * K, row, K) + pb[o];
  });
  check_finite(out, "conv2d");

  auto xn = input.node();
  auto kn = kernel.node();
  auto bn = bias.node();
  auto backprop = [xn, kn, bn, col, N, C, H, W, O, kh, kw, stride, pad, Ho, Wo, K,
                   P](typename Tensor<Real>::Node& nd) {
    const Real* g = nd.grad.data();  // [N,O,P]
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
          Real acc = 0;
          const Real* gp = g + (static_cast<std::int64_t>(n) * O + o) * P;
          for (std::int64_t p = 0; p < P; ++p) acc += gp[p];
          bn->grad[o] += acc;
        }
    }
    if (kn->requires_grad) {
      kn->ensure_grad();
      parallel_for(O, [&](std::int64_t o) {
        Real* dk = kn->grad.data() + o * K;
        for (int n = 0; n < N; ++n) {
          const Real* gp = g + (static_cast<std::int64_t>(n) * O + o) * P;
          for (std::int64_t p = 0; p < P; ++p)
            detail::axpy(dk, gp[p], col->data() + (n * P + p) * K, K);
        }
      });
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      std::vector<Real> dcol(static_cast<size_t>(N) * P * K, Real(0));
      const Real* kmat2 = kn->data.data();
      parallel_for(static_cast<std::int64_t>(N) * P, [&](std::int64_t np) {
        const int n = static_cast<int>(np / P);
        const std::int64_t p = np % P;
        Real* drow = dcol.data() + np * K;
        for (int o = 0; o < O; ++o)
          detail::axpy(drow, g[(static_cast<std::int64_t>(n) * O + o) * P + p],
                       kmat2 + static_cast<std::int64_t>(o) * K, K);
      });
      detail::col2im_add(dcol, N, C, H, W, kh, kw, stride, pad, Ho, Wo, xn->grad.data());
    }
  };
  return detail::make_op<Real>({N, O, Ho, Wo}, std::move(out), {xn, kn, bn},
                               std::move(backprop), "conv2d");
}

}  // namespace pcm
