#pragma once

// Naive single-threaded reference kernels. These stay deliberately close to
// the textbook definitions (scatter form for convolutions) and are used only
// by tests and the kernel benchmark to cross-check the parallel kernels.

#include <cmath>
#include <cstdint>
#include <vector>

#include "useg/tensor.hpp"

namespace useg::ref {

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int stride, int pad) {
  const Shape4 xs = x.shape(), ws = w.shape();
  const int k = ws.h;
  const Shape4 ys{xs.n, ws.n, (xs.h + 2 * pad - k) / stride + 1, (xs.w + 2 * pad - k) / stride + 1};
  Tensor<S> y(ys);
  for (int n = 0; n < ys.n; ++n)
    for (int oc = 0; oc < ys.c; ++oc)
      for (int r = 0; r < ys.h; ++r)
        for (int q = 0; q < ys.w; ++q) y.at(n, oc, r, q) = bias[oc];
  for (int n = 0; n < xs.n; ++n)
    for (int oc = 0; oc < ws.n; ++oc)
      for (int ic = 0; ic < xs.c; ++ic)
        for (int ih = 0; ih < xs.h; ++ih)
          for (int iw = 0; iw < xs.w; ++iw)
            for (int kh = 0; kh < k; ++kh)
              for (int kw = 0; kw < k; ++kw) {
                const int rs = ih + pad - kh, qs = iw + pad - kw;
                if (rs % stride != 0 || qs % stride != 0) continue;
                const int r = rs / stride, q = qs / stride;
                if (r < 0 || r >= ys.h || q < 0 || q >= ys.w) continue;
                y.at(n, oc, r, q) += w.at(oc, ic, kh, kw) * x.at(n, ic, ih, iw);
              }
  return y;
}

template <class S>
Tensor<S> tconv2x2(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
  const Shape4 xs = x.shape(), ws = w.shape();
  Tensor<S> y(Shape4{xs.n, ws.c, xs.h * 2, xs.w * 2});
  for (int n = 0; n < xs.n; ++n)
    for (int oc = 0; oc < ws.c; ++oc)
      for (int r = 0; r < y.shape().h; ++r)
        for (int q = 0; q < y.shape().w; ++q) y.at(n, oc, r, q) = bias[oc];
  for (int n = 0; n < xs.n; ++n)
    for (int ic = 0; ic < xs.c; ++ic)
      for (int oc = 0; oc < ws.c; ++oc)
        for (int ih = 0; ih < xs.h; ++ih)
          for (int iw = 0; iw < xs.w; ++iw)
            for (int dh = 0; dh < 2; ++dh)
              for (int dw = 0; dw < 2; ++dw)
                y.at(n, oc, 2 * ih + dh, 2 * iw + dw) += x.at(n, ic, ih, iw) * w.at(ic, oc, dh, dw);
  return y;
}

template <class S>
Tensor<S> maxpool2x2(const Tensor<S>& x) {
  const Shape4 xs = x.shape();
  Tensor<S> y(Shape4{xs.n, xs.c, xs.h / 2, xs.w / 2});
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      for (int r = 0; r < xs.h / 2; ++r)
        for (int q = 0; q < xs.w / 2; ++q) {
          S m = x.at(n, c, 2 * r, 2 * q);
          m = std::max(m, x.at(n, c, 2 * r, 2 * q + 1));
          m = std::max(m, x.at(n, c, 2 * r + 1, 2 * q));
          m = std::max(m, x.at(n, c, 2 * r + 1, 2 * q + 1));
          y.at(n, c, r, q) = m;
        }
  return y;
}

template <class S>
Tensor<S> upsample2x(const Tensor<S>& x) {
  const Shape4 xs = x.shape();
  Tensor<S> y(Shape4{xs.n, xs.c, xs.h * 2, xs.w * 2});
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      for (int r = 0; r < xs.h * 2; ++r)
        for (int q = 0; q < xs.w * 2; ++q) y.at(n, c, r, q) = x.at(n, c, r / 2, q / 2);
  return y;
}

template <class S>
Tensor<S> groupnorm(const Tensor<S>& x, int groups, const S* gamma, const S* beta, S eps) {
  const Shape4 xs = x.shape();
  Tensor<S> y(xs);
  const int cpg = xs.c / groups;
  for (int n = 0; n < xs.n; ++n)
    for (int g = 0; g < groups; ++g) {
      double s = 0.0;
      std::int64_t cnt = 0;
      for (int c = g * cpg; c < (g + 1) * cpg; ++c)
        for (int r = 0; r < xs.h; ++r)
          for (int q = 0; q < xs.w; ++q) {
            s += x.at(n, c, r, q);
            ++cnt;
          }
      const double mu = s / double(cnt);
      double v = 0.0;
      for (int c = g * cpg; c < (g + 1) * cpg; ++c)
        for (int r = 0; r < xs.h; ++r)
          for (int q = 0; q < xs.w; ++q) {
            const double d = x.at(n, c, r, q) - mu;
            v += d * d;
          }
      const double rstd = 1.0 / std::sqrt(v / double(cnt) + double(eps));
      for (int c = g * cpg; c < (g + 1) * cpg; ++c)
        for (int r = 0; r < xs.h; ++r)
          for (int q = 0; q < xs.w; ++q)
            y.at(n, c, r, q) = static_cast<S>(gamma[c] * ((x.at(n, c, r, q) - mu) * rstd) + beta[c]);
    }
  return y;
}

}  // namespace useg::ref
