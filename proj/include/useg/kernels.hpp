#pragma once

// Data-parallel tensor kernels. Every kernel parallelizes over independent
// output elements with a fixed serial reduction order per element, so results
// are bit-identical for any OpenMP thread count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "useg/tensor.hpp"

namespace useg::kernels {

using std::int64_t;

template <class S>
void check_conv_args(const Shape4& xs, const Shape4& ws, int stride, int pad) {
  if (ws.h != ws.w) throw std::invalid_argument("conv2d: kernel must be square, got " + ws.str());
  if (ws.h < 1 || ws.h > 3) throw std::invalid_argument("conv2d: kernel size must be in {1,2,3}, got " + ws.str());
  if (xs.c != ws.c)
    throw std::invalid_argument("conv2d: input channels " + xs.str() + " do not match weight " + ws.str());
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  const int k = ws.h;
  if (xs.h + 2 * pad < k || xs.w + 2 * pad < k)
    throw std::invalid_argument("conv2d: input " + xs.str() + " smaller than kernel " + ws.str());
}

inline Shape4 conv_out_shape(const Shape4& xs, const Shape4& ws, int stride, int pad) {
  const int k = ws.h;
  return Shape4{xs.n, ws.n, (xs.h + 2 * pad - k) / stride + 1, (xs.w + 2 * pad - k) / stride + 1};
}

// Zero-padded copy of x, spatial dims grown by 2*pad.
template <class S>
Tensor<S> pad_spatial(const Tensor<S>& x, int pad) {
  const Shape4 xs = x.shape();
  Tensor<S> out(Shape4{xs.n, xs.c, xs.h + 2 * pad, xs.w + 2 * pad});
  const int64_t planes = int64_t(xs.n) * xs.c;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p) {
    const S* src = x.data() + p * xs.h * xs.w;
    S* dst = out.data() + p * (xs.h + 2 * pad) * (xs.w + 2 * pad) + pad * (xs.w + 2 * pad) + pad;
    for (int h = 0; h < xs.h; ++h)
      std::copy(src + int64_t(h) * xs.w, src + int64_t(h + 1) * xs.w, dst + int64_t(h) * (xs.w + 2 * pad));
  }
  return out;
}

#if defined(__GNUC__)
#define USEG_FAST_F32 1
namespace detail {

typedef float vf16 __attribute__((vector_size(64)));

inline vf16 splat16(float x) { return vf16{x, x, x, x, x, x, x, x, x, x, x, x, x, x, x, x}; }
inline vf16 loadu16(const float* p) {
  vf16 v;
  __builtin_memcpy(&v, p, sizeof v);
  return v;
}
inline void storeu16(float* p, vf16 v) { __builtin_memcpy(p, &v, sizeof v); }

inline float hsum16(vf16 v) {
  float s = 0.f;
  for (int i = 0; i < 16; ++i) s += v[i];
  return s;
}

// Two output channels per pass, 32-pixel register tile, all nine taps in the
// accumulator loop. Row path for wide feature maps.
inline void conv3_rows_f32_pair(const float* xp, int ci, int wp, std::int64_t xplane, const float* w,
                                const float* bias, int co, float* y, int oh, int ow, int pi) {
  {
    const int oc0 = 2 * pi;
    const int oc1 = oc0 + 1 < co ? oc0 + 1 : oc0;
    const float* w0 = w + std::int64_t(oc0) * ci * 9;
    const float* w1 = w + std::int64_t(oc1) * ci * 9;
    float* y0 = y + std::int64_t(oc0) * oh * ow;
    float* y1 = y + std::int64_t(oc1) * oh * ow;
    for (int r = 0; r < oh; ++r) {
      const float* xr0 = xp + std::int64_t(r) * wp;
      // Tiles may overlap at the right edge; each tile recomputes its outputs
      // from scratch, so overlapping stores write identical values.
      int t = 0;
      for (; t + 32 <= ow; t += 32) {
        vf16 a0 = splat16(bias[oc0]), a1 = a0, b0 = splat16(bias[oc1]), b1 = b0;
        for (int ic = 0; ic < ci; ++ic) {
          const float* base = xr0 + ic * xplane + t;
          const float* wa = w0 + ic * 9;
          const float* wb = w1 + ic * 9;
          for (int kh = 0; kh < 3; ++kh) {
            const float* p = base + kh * wp;
            for (int kw = 0; kw < 3; ++kw) {
              const vf16 v0 = loadu16(p + kw), v1 = loadu16(p + kw + 16);
              const vf16 ca = splat16(wa[kh * 3 + kw]), cb = splat16(wb[kh * 3 + kw]);
              a0 += ca * v0;
              a1 += ca * v1;
              b0 += cb * v0;
              b1 += cb * v1;
            }
          }
        }
        storeu16(y0 + std::int64_t(r) * ow + t, a0);
        storeu16(y0 + std::int64_t(r) * ow + t + 16, a1);
        if (oc1 != oc0) {
          storeu16(y1 + std::int64_t(r) * ow + t, b0);
          storeu16(y1 + std::int64_t(r) * ow + t + 16, b1);
        }
      }
      while (t < ow) {
        if (ow >= 16) t = std::min(t, ow - 16);
        const int span = std::min(16, ow - t);
        vf16 a0 = splat16(bias[oc0]), b0 = splat16(bias[oc1]);
        for (int ic = 0; ic < ci; ++ic) {
          const float* base = xr0 + ic * xplane + t;
          const float* wa = w0 + ic * 9;
          const float* wb = w1 + ic * 9;
          for (int kh = 0; kh < 3; ++kh) {
            const float* p = base + kh * wp;
            for (int kw = 0; kw < 3; ++kw) {
              const vf16 v0 = loadu16(p + kw);
              a0 += splat16(wa[kh * 3 + kw]) * v0;
              b0 += splat16(wb[kh * 3 + kw]) * v0;
            }
          }
        }
        if (span == 16) {
          storeu16(y0 + std::int64_t(r) * ow + t, a0);
          if (oc1 != oc0) storeu16(y1 + std::int64_t(r) * ow + t, b0);
        } else {
          for (int j = 0; j < span; ++j) {
            y0[std::int64_t(r) * ow + t + j] = a0[j];
            if (oc1 != oc0) y1[std::int64_t(r) * ow + t + j] = b0[j];
          }
        }
        t += span;
      }
    }
  }
}

// Channel-vectorized path for small feature maps (rows shorter than a tile):
// weights transposed to (ci, kh, kw, co); one 32-channel block and a group of
// four adjacent output columns share each weight load so the transposed
// weight slice stays cache-resident. Groups may overlap at the row edge.
inline void conv3_small_f32_block(const float* xp, int ci, int wp, std::int64_t xplane, const float* wt,
                                  const float* bias, int co, float* y, int oh, int ow, int c0) {
  const std::int64_t ohw = std::int64_t(oh) * ow;
  const vf16 b0 = loadu16(bias + c0), b1 = loadu16(bias + c0 + 16);
  for (int r = 0; r < oh; ++r) {
    for (int q0 = 0; q0 < ow;) {
      if (ow >= 4) q0 = std::min(q0, ow - 4);
      const int gn = std::min(4, ow - q0);
      vf16 acc[4][2];
      for (int g = 0; g < 4; ++g) {
        acc[g][0] = b0;
        acc[g][1] = b1;
      }
      const float* xbase = xp + std::int64_t(r) * wp + q0;
      for (int ic = 0; ic < ci; ++ic) {
        const float* px = xbase + ic * xplane;
        const float* wrow = wt + std::int64_t(ic) * 9 * co + c0;
        for (int kh = 0; kh < 3; ++kh) {
          const float* prow = px + kh * wp;
          for (int kw = 0; kw < 3; ++kw) {
            const float* wr = wrow + (kh * 3 + kw) * co;
            const vf16 w0 = loadu16(wr), w1 = loadu16(wr + 16);
            for (int g = 0; g < 4; ++g) {
              const vf16 xv = splat16(prow[kw + g]);
              acc[g][0] += xv * w0;
              acc[g][1] += xv * w1;
            }
          }
        }
      }
      for (int g = 0; g < gn; ++g)
        for (int v = 0; v < 2; ++v)
          for (int l = 0; l < 16; ++l) y[std::int64_t(c0 + v * 16 + l) * ohw + std::int64_t(r) * ow + q0 + g] = acc[g][v][l];
      q0 += gn;
    }
  }
}

}  // namespace detail
#endif  // __GNUC__

// 3x3 stride-1 core on a pre-padded input.
template <class S>
void conv3x3_s1_padded(const Tensor<S>& xp, const S* w, const S* bias, int co, Tensor<S>& y) {
  const Shape4 ps = xp.shape();
  const Shape4 ys = y.shape();
  const int ci = ps.c, oh = ys.h, ow = ys.w, wp = ps.w;
  const int64_t xplane = int64_t(ps.h) * wp;
#ifdef USEG_FAST_F32
  if constexpr (std::is_same_v<S, float>) {
    const bool small = ow <= 28 && ow >= 4 && co % 32 == 0;
    if (small) {
      std::vector<float> wt(static_cast<std::size_t>(ci) * 9 * co);
      for (int oc = 0; oc < co; ++oc)
        for (int ic = 0; ic < ci; ++ic)
          for (int t = 0; t < 9; ++t) wt[(std::int64_t(ic) * 9 + t) * co + oc] = w[(std::int64_t(oc) * ci + ic) * 9 + t];
#pragma omp parallel for collapse(2) schedule(static)
      for (int n = 0; n < ys.n; ++n)
        for (int c0 = 0; c0 < co; c0 += 32)
          detail::conv3_small_f32_block(xp.data() + int64_t(n) * ci * xplane, ci, wp, xplane, wt.data(), bias, co,
                                        y.data() + int64_t(n) * co * oh * ow, oh, ow, c0);
      return;
    }
    if (ow >= 16) {  // vector row tiles need 16-wide rows
      const int pairs = (co + 1) / 2;
#pragma omp parallel for collapse(2) schedule(static)
      for (int n = 0; n < ys.n; ++n)
        for (int pi = 0; pi < pairs; ++pi)
          detail::conv3_rows_f32_pair(xp.data() + int64_t(n) * ci * xplane, ci, wp, xplane, w, bias, co,
                                      y.data() + int64_t(n) * co * oh * ow, oh, ow, pi);
      return;
    }
  }
#endif
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < ys.n; ++n) {
    for (int oc = 0; oc < co; ++oc) {
      const S* xn = xp.data() + int64_t(n) * ci * xplane;
      const S* wk = w + int64_t(oc) * ci * 9;
      S* yc = y.data() + (int64_t(n) * co + oc) * oh * ow;
      std::vector<S> acc(static_cast<std::size_t>(ow));
      for (int r = 0; r < oh; ++r) {
        std::fill(acc.begin(), acc.end(), bias[oc]);
        const S* xrow0 = xn + int64_t(r) * wp;
        for (int ic = 0; ic < ci; ++ic) {
          const S* xr = xrow0 + ic * xplane;
          const S* wr = wk + ic * 9;
          for (int kh = 0; kh < 3; ++kh) {
            const S* row = xr + kh * wp;
            const S w0 = wr[kh * 3 + 0], w1 = wr[kh * 3 + 1], w2 = wr[kh * 3 + 2];
            S* a = acc.data();
#pragma omp simd
            for (int t = 0; t < ow; ++t) a[t] += w0 * row[t] + w1 * row[t + 1] + w2 * row[t + 2];
          }
        }
        std::copy(acc.begin(), acc.end(), yc + int64_t(r) * ow);
      }
    }
  }
}

// 1x1 stride-1: per output row, an axpy over input channels.
template <class S>
void conv1x1_s1(const Tensor<S>& x, const S* w, const S* bias, int co, Tensor<S>& y) {
  const Shape4 xs = x.shape();
  const int ci = xs.c;
  const int64_t hw = int64_t(xs.h) * xs.w;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < xs.n; ++n) {
    for (int oc = 0; oc < co; ++oc) {
      const S* xn = x.data() + int64_t(n) * ci * hw;
      const S* wk = w + int64_t(oc) * ci;
      S* yc = y.data() + (int64_t(n) * co + oc) * hw;
      for (int64_t t = 0; t < hw; ++t) yc[t] = bias[oc];
      for (int ic = 0; ic < ci; ++ic) {
        const S wv = wk[ic];
        const S* xr = xn + ic * hw;
#pragma omp simd
        for (int64_t t = 0; t < hw; ++t) yc[t] += wv * xr[t];
      }
    }
  }
}

// Generic direct convolution, any kernel/stride/pad. Used for the shapes the
// fast paths do not cover (gradcheck-sized tensors).
template <class S>
void conv_generic(const Tensor<S>& x, const Tensor<S>& w, const S* bias, int stride, int pad, Tensor<S>& y) {
  const Shape4 xs = x.shape(), ws = w.shape(), ys = y.shape();
  const int k = ws.h;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < ys.n; ++n) {
    for (int oc = 0; oc < ys.c; ++oc) {
      for (int r = 0; r < ys.h; ++r) {
        for (int qc = 0; qc < ys.w; ++qc) {
          S acc = bias ? bias[oc] : S(0);
          for (int ic = 0; ic < xs.c; ++ic)
            for (int kh = 0; kh < k; ++kh) {
              const int ih = r * stride - pad + kh;
              if (ih < 0 || ih >= xs.h) continue;
              for (int kw = 0; kw < k; ++kw) {
                const int iw = qc * stride - pad + kw;
                if (iw < 0 || iw >= xs.w) continue;
                acc += w.at(oc, ic, kh, kw) * x.at(n, ic, ih, iw);
              }
            }
          y.at(n, oc, r, qc) = acc;
        }
      }
    }
  }
}

template <class S>
Tensor<S> conv2d_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int stride, int pad) {
  check_conv_args<S>(x.shape(), w.shape(), stride, pad);
  const Shape4 ys = conv_out_shape(x.shape(), w.shape(), stride, pad);
  Tensor<S> y(ys);
  const int k = w.shape().h;
  if (k == 3 && stride == 1) {
    Tensor<S> xp = pad_spatial(x, pad);
    conv3x3_s1_padded(xp, w.data(), bias.data(), ys.c, y);
  } else if (k == 1 && stride == 1 && pad == 0) {
    conv1x1_s1(x, w.data(), bias.data(), ys.c, y);
  } else {
    conv_generic(x, w, bias.data(), stride, pad, y);
  }
  return y;
}

// dL/dx for stride-1 convolution: correlation of padded dy with the kernel
// flipped and transposed in its channel axes; reuses the fast 3x3 core.
template <class S>
void conv2d_bwd_input_s1(const Tensor<S>& dy, const Tensor<S>& w, int pad, Tensor<S>& dx) {
  const Shape4 ws = w.shape();
  const int k = ws.h, co = ws.n, ci = ws.c;
  Tensor<S> wt(Shape4{ci, co, k, k});
  for (int oc = 0; oc < co; ++oc)
    for (int ic = 0; ic < ci; ++ic)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) wt.at(ic, oc, k - 1 - kh, k - 1 - kw) = w.at(oc, ic, kh, kw);
  Tensor<S> contrib(dx.shape());
  if (k == 3) {
    Tensor<S> dyp = pad_spatial(dy, k - 1 - pad);
    conv3x3_s1_padded(dyp, wt.data(), std::vector<S>(static_cast<std::size_t>(ci), S(0)).data(), ci, contrib);
  } else if (k == 1 && pad == 0) {
    conv1x1_s1(dy, wt.data(), std::vector<S>(static_cast<std::size_t>(ci), S(0)).data(), ci, contrib);
  } else {
    conv_generic(dy, wt, static_cast<const S*>(nullptr), 1, k - 1 - pad, contrib);
  }
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += contrib[i];
}

template <class S>
void conv2d_bwd_input_generic(const Tensor<S>& dy, const Tensor<S>& w, int stride, int pad, Tensor<S>& dx) {
  const Shape4 xs = dx.shape(), ws = w.shape(), ys = dy.shape();
  const int k = ws.h;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < xs.n; ++n) {
    for (int ic = 0; ic < xs.c; ++ic) {
      for (int ih = 0; ih < xs.h; ++ih)
        for (int iw = 0; iw < xs.w; ++iw) {
          S acc = S(0);
          for (int oc = 0; oc < ys.c; ++oc)
            for (int kh = 0; kh < k; ++kh) {
              const int t = ih + pad - kh;
              if (t % stride != 0) continue;
              const int r = t / stride;
              if (r < 0 || r >= ys.h) continue;
              for (int kw = 0; kw < k; ++kw) {
                const int u = iw + pad - kw;
                if (u % stride != 0) continue;
                const int q = u / stride;
                if (q < 0 || q >= ys.w) continue;
                acc += w.at(oc, ic, kh, kw) * dy.at(n, oc, r, q);
              }
            }
          dx.at(n, ic, ih, iw) += acc;
        }
    }
  }
}

#ifdef USEG_FAST_F32
namespace detail {

// dW for one (oc, ic) pair, all nine taps accumulated in one sweep over rows.
inline void bwd_weight3_f32(const float* xp, const float* dy, int n_batch, std::int64_t xplane, std::int64_t yplane,
                            int wp, int oh, int ow, float* dw9) {
  vf16 acc[9];
  for (auto& a : acc) a = splat16(0.f);
  double tail[9] = {};
  for (int n = 0; n < n_batch; ++n) {
    const float* xc = xp + std::int64_t(n) * xplane;   // caller pre-offsets channel
    const float* yc = dy + std::int64_t(n) * yplane;
    for (int r = 0; r < oh; ++r) {
      const float* xr = xc + std::int64_t(r) * wp;
      const float* yr = yc + std::int64_t(r) * ow;
      int t = 0;
      for (; t + 16 <= ow; t += 16) {
        const vf16 d = loadu16(yr + t);
        for (int kh = 0; kh < 3; ++kh) {
          const float* p = xr + kh * wp + t;
          acc[kh * 3 + 0] += d * loadu16(p);
          acc[kh * 3 + 1] += d * loadu16(p + 1);
          acc[kh * 3 + 2] += d * loadu16(p + 2);
        }
      }
      for (; t < ow; ++t) {
        const double d = yr[t];
        for (int kh = 0; kh < 3; ++kh)
          for (int kw = 0; kw < 3; ++kw) tail[kh * 3 + kw] += d * xr[kh * wp + t + kw];
      }
    }
  }
  for (int j = 0; j < 9; ++j) dw9[j] += static_cast<float>(static_cast<double>(hsum16(acc[j])) + tail[j]);
}

}  // namespace detail
#endif

template <class S>
void conv2d_bwd_weight(const Tensor<S>& x, const Tensor<S>& dy, int k, int stride, int pad, Tensor<S>& dw,
                       Tensor<S>& db) {
  const Shape4 xs = x.shape(), ys = dy.shape();
  const int co = ys.c, ci = xs.c;
#ifdef USEG_FAST_F32
  if constexpr (std::is_same_v<S, float>) {
    if (k == 3 && stride == 1) {
      Tensor<S> xp = pad_spatial(x, pad);
      const Shape4 ps = xp.shape();
      const int64_t xplane = int64_t(ps.h) * ps.w;
      const int64_t yplane = int64_t(ys.h) * ys.w;
#pragma omp parallel for collapse(2) schedule(static)
      for (int oc = 0; oc < co; ++oc)
        for (int ic = 0; ic < ci; ++ic)
          detail::bwd_weight3_f32(xp.data() + int64_t(ic) * xplane, dy.data() + int64_t(oc) * yplane, xs.n,
                                  int64_t(ci) * xplane, int64_t(co) * yplane, ps.w, ys.h, ys.w,
                                  dw.data() + (int64_t(oc) * ci + ic) * 9);
#pragma omp parallel for schedule(static)
      for (int oc = 0; oc < co; ++oc) {
        double acc = 0.0;
        for (int n = 0; n < ys.n; ++n) {
          const S* yc = dy.data() + (int64_t(n) * co + oc) * ys.h * ys.w;
          for (int64_t t = 0; t < int64_t(ys.h) * ys.w; ++t) acc += static_cast<double>(yc[t]);
        }
        db[oc] += static_cast<S>(acc);
      }
      return;
    }
  }
#endif
  if (stride == 1) {
    Tensor<S> xp = pad_spatial(x, pad);
    const Shape4 ps = xp.shape();
    const int64_t xplane = int64_t(ps.h) * ps.w;
    const int64_t yplane = int64_t(ys.h) * ys.w;
#pragma omp parallel for collapse(2) schedule(static)
    for (int oc = 0; oc < co; ++oc) {
      for (int ic = 0; ic < ci; ++ic) {
        S* dwk = dw.data() + (int64_t(oc) * ci + ic) * k * k;
        for (int kh = 0; kh < k; ++kh)
          for (int kw = 0; kw < k; ++kw) {
            double acc = 0.0;
            for (int n = 0; n < xs.n; ++n) {
              const S* xc = xp.data() + (int64_t(n) * ci + ic) * xplane;
              const S* yc = dy.data() + (int64_t(n) * co + oc) * yplane;
              for (int r = 0; r < ys.h; ++r) {
                const S* xr = xc + int64_t(r + kh) * ps.w + kw;
                const S* yr = yc + int64_t(r) * ys.w;
                S rowacc = S(0);
#pragma omp simd reduction(+ : rowacc)
                for (int t = 0; t < ys.w; ++t) rowacc += xr[t] * yr[t];
                acc += static_cast<double>(rowacc);
              }
            }
            dwk[kh * k + kw] += static_cast<S>(acc);
          }
      }
    }
  } else {
#pragma omp parallel for collapse(2) schedule(static)
    for (int oc = 0; oc < co; ++oc) {
      for (int ic = 0; ic < ci; ++ic) {
        for (int kh = 0; kh < k; ++kh)
          for (int kw = 0; kw < k; ++kw) {
            double acc = 0.0;
            for (int n = 0; n < xs.n; ++n)
              for (int r = 0; r < ys.h; ++r) {
                const int ih = r * stride - pad + kh;
                if (ih < 0 || ih >= xs.h) continue;
                for (int q = 0; q < ys.w; ++q) {
                  const int iw = q * stride - pad + kw;
                  if (iw < 0 || iw >= xs.w) continue;
                  acc += static_cast<double>(x.at(n, ic, ih, iw)) * static_cast<double>(dy.at(n, oc, r, q));
                }
              }
            dw.at(oc, ic, kh, kw) += static_cast<S>(acc);
          }
      }
    }
  }
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < co; ++oc) {
    double acc = 0.0;
    for (int n = 0; n < ys.n; ++n) {
      const S* yc = dy.data() + (int64_t(n) * co + oc) * ys.h * ys.w;
      for (int64_t t = 0; t < int64_t(ys.h) * ys.w; ++t) acc += static_cast<double>(yc[t]);
    }
    db[oc] += static_cast<S>(acc);
  }
}

// ---- transposed convolution, kernel 2 stride 2 (exact doubling) ----
// weight layout (c_in, c_out, 2, 2); each output pixel is touched by exactly
// one kernel tap, so the gather form needs no scatter.

template <class S>
Tensor<S> tconv2x2_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
  const Shape4 xs = x.shape(), ws = w.shape();
  if (ws.h != 2 || ws.w != 2) throw std::invalid_argument("transposed_conv2d: kernel must be 2x2, got " + ws.str());
  if (ws.n != xs.c)
    throw std::invalid_argument("transposed_conv2d: weight " + ws.str() + " does not match input " + xs.str());
  const int ci = xs.c, co = ws.c;
  Tensor<S> y(Shape4{xs.n, co, xs.h * 2, xs.w * 2});
  const Shape4 ys = y.shape();
  const int64_t xplane = int64_t(xs.h) * xs.w;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < xs.n; ++n) {
    for (int oc = 0; oc < co; ++oc) {
      S* yc = y.data() + (int64_t(n) * co + oc) * ys.h * ys.w;
      const S* xn = x.data() + int64_t(n) * ci * xplane;
      for (int ih = 0; ih < xs.h; ++ih) {
        for (int dh = 0; dh < 2; ++dh) {
          S* yrow = yc + int64_t(2 * ih + dh) * ys.w;
          for (int64_t t = 0; t < ys.w; ++t) yrow[t] = bias[oc];
          for (int ic = 0; ic < ci; ++ic) {
            const S* xr = xn + ic * xplane + int64_t(ih) * xs.w;
            const S w0 = w.at(ic, oc, dh, 0), w1 = w.at(ic, oc, dh, 1);
#pragma omp simd
            for (int iw = 0; iw < xs.w; ++iw) {
              yrow[2 * iw] += w0 * xr[iw];
              yrow[2 * iw + 1] += w1 * xr[iw];
            }
          }
        }
      }
    }
  }
  return y;
}

template <class S>
void tconv2x2_bwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& dy, Tensor<S>& dx, Tensor<S>& dw,
                  Tensor<S>& db) {
  const Shape4 xs = x.shape(), ws = w.shape(), ys = dy.shape();
  const int ci = ws.n, co = ws.c;
  const int64_t xplane = int64_t(xs.h) * xs.w, yplane = int64_t(ys.h) * ys.w;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < xs.n; ++n) {
    for (int ic = 0; ic < ci; ++ic) {
      S* dxc = dx.data() + (int64_t(n) * ci + ic) * xplane;
      for (int ih = 0; ih < xs.h; ++ih)
        for (int iw = 0; iw < xs.w; ++iw) {
          S acc = S(0);
          for (int oc = 0; oc < co; ++oc)
            for (int dh = 0; dh < 2; ++dh)
              for (int dwi = 0; dwi < 2; ++dwi)
                acc += w.at(ic, oc, dh, dwi) * dy.at(n, oc, 2 * ih + dh, 2 * iw + dwi);
          dxc[int64_t(ih) * xs.w + iw] += acc;
        }
    }
  }
#pragma omp parallel for collapse(2) schedule(static)
  for (int ic = 0; ic < ci; ++ic) {
    for (int oc = 0; oc < co; ++oc) {
      for (int dh = 0; dh < 2; ++dh)
        for (int dwi = 0; dwi < 2; ++dwi) {
          double acc = 0.0;
          for (int n = 0; n < xs.n; ++n) {
            const S* xc = x.data() + (int64_t(n) * ci + ic) * xplane;
            const S* yc = dy.data() + (int64_t(n) * co + oc) * yplane;
            for (int ih = 0; ih < xs.h; ++ih)
              for (int iw = 0; iw < xs.w; ++iw)
                acc += static_cast<double>(xc[int64_t(ih) * xs.w + iw]) *
                       static_cast<double>(yc[int64_t(2 * ih + dh) * ys.w + 2 * iw + dwi]);
          }
          dw.at(ic, oc, dh, dwi) += static_cast<S>(acc);
        }
    }
  }
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < co; ++oc) {
    double acc = 0.0;
    for (int n = 0; n < ys.n; ++n) {
      const S* yc = dy.data() + (int64_t(n) * co + oc) * yplane;
      for (int64_t t = 0; t < yplane; ++t) acc += static_cast<double>(yc[t]);
    }
    db[oc] += static_cast<S>(acc);
  }
}

// ---- 2x2 max pooling; ties resolved toward the first window element in
// row-major order, recorded for the backward scatter ----

template <class S>
Tensor<S> maxpool2x2_fwd(const Tensor<S>& x, std::vector<std::int32_t>& argmax) {
  const Shape4 xs = x.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0)
    throw std::invalid_argument("maxpool2x2: spatial dims must be even, got " + xs.str());
  Tensor<S> y(Shape4{xs.n, xs.c, xs.h / 2, xs.w / 2});
  const Shape4 ys = y.shape();
  argmax.assign(static_cast<std::size_t>(y.numel()), 0);
  const int64_t planes = int64_t(xs.n) * xs.c;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p) {
    const S* xc = x.data() + p * xs.h * xs.w;
    S* yc = y.data() + p * ys.h * ys.w;
    std::int32_t* am = argmax.data() + p * ys.h * ys.w;
    for (int r = 0; r < ys.h; ++r)
      for (int q = 0; q < ys.w; ++q) {
        const int ih = 2 * r, iw = 2 * q;
        const std::int32_t cand[4] = {ih * xs.w + iw, ih * xs.w + iw + 1, (ih + 1) * xs.w + iw,
                                      (ih + 1) * xs.w + iw + 1};
        std::int32_t best = cand[0];
        S bv = xc[cand[0]];
        for (int t = 1; t < 4; ++t)
          if (xc[cand[t]] > bv) {
            bv = xc[cand[t]];
            best = cand[t];
          }
        yc[int64_t(r) * ys.w + q] = bv;
        am[int64_t(r) * ys.w + q] = best;
      }
  }
  return y;
}

template <class S>
void maxpool2x2_bwd(const Tensor<S>& dy, const std::vector<std::int32_t>& argmax, Tensor<S>& dx) {
  const Shape4 ys = dy.shape(), xs = dx.shape();
  const int64_t planes = int64_t(xs.n) * xs.c;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p) {
    S* dxc = dx.data() + p * xs.h * xs.w;
    const S* dyc = dy.data() + p * ys.h * ys.w;
    const std::int32_t* am = argmax.data() + p * ys.h * ys.w;
    for (int64_t t = 0; t < int64_t(ys.h) * ys.w; ++t) dxc[am[t]] += dyc[t];
  }
}

// ---- nearest-neighbour 2x upsampling ----

template <class S>
Tensor<S> upsample2x_fwd(const Tensor<S>& x) {
  const Shape4 xs = x.shape();
  Tensor<S> y(Shape4{xs.n, xs.c, xs.h * 2, xs.w * 2});
  const int64_t planes = int64_t(xs.n) * xs.c;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p) {
    const S* xc = x.data() + p * xs.h * xs.w;
    S* yc = y.data() + p * int64_t(xs.h * 2) * (xs.w * 2);
    for (int r = 0; r < xs.h * 2; ++r) {
      const S* xr = xc + int64_t(r / 2) * xs.w;
      S* yr = yc + int64_t(r) * (xs.w * 2);
      for (int q = 0; q < xs.w; ++q) {
        yr[2 * q] = xr[q];
        yr[2 * q + 1] = xr[q];
      }
    }
  }
  return y;
}

template <class S>
void upsample2x_bwd(const Tensor<S>& dy, Tensor<S>& dx) {
  const Shape4 xs = dx.shape(), ys = dy.shape();
  const int64_t planes = int64_t(xs.n) * xs.c;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p) {
    const S* dyc = dy.data() + p * ys.h * ys.w;
    S* dxc = dx.data() + p * xs.h * xs.w;
    for (int r = 0; r < xs.h; ++r)
      for (int q = 0; q < xs.w; ++q)
        dxc[int64_t(r) * xs.w + q] += dyc[int64_t(2 * r) * ys.w + 2 * q] + dyc[int64_t(2 * r) * ys.w + 2 * q + 1] +
                                      dyc[int64_t(2 * r + 1) * ys.w + 2 * q] +
                                      dyc[int64_t(2 * r + 1) * ys.w + 2 * q + 1];
  }
}

// ---- group normalization ----
// Statistics per (sample, group) over the group's channels and all spatial
// positions. Saved mean/rstd feed the backward pass.

template <class S>
Tensor<S> groupnorm_fwd(const Tensor<S>& x, int groups, const S* gamma, const S* beta, S eps,
                        std::vector<S>& mean_out, std::vector<S>& rstd_out) {
  const Shape4 xs = x.shape();
  if (groups < 1 || xs.c % groups != 0)
    throw std::invalid_argument("group_norm: channels " + std::to_string(xs.c) + " not divisible by groups " +
                                std::to_string(groups));
  if (!(eps > S(0))) throw std::invalid_argument("group_norm: eps must be > 0");
  Tensor<S> y(xs);
  const int cpg = xs.c / groups;
  const int64_t hw = int64_t(xs.h) * xs.w;
  const int64_t gsize = cpg * hw;
  mean_out.assign(static_cast<std::size_t>(xs.n) * groups, S(0));
  rstd_out.assign(static_cast<std::size_t>(xs.n) * groups, S(0));
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < xs.n; ++n) {
    for (int g = 0; g < groups; ++g) {
      const S* xg = x.data() + (int64_t(n) * xs.c + int64_t(g) * cpg) * hw;
      double s = 0.0, s2 = 0.0;
      for (int64_t t = 0; t < gsize; ++t) {
        const double v = static_cast<double>(xg[t]);
        s += v;
        s2 += v * v;
      }
      const double mu = s / double(gsize);
      const double var = std::max(0.0, s2 / double(gsize) - mu * mu);
      const S m = static_cast<S>(mu);
      const S rstd = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      mean_out[static_cast<std::size_t>(n) * groups + g] = m;
      rstd_out[static_cast<std::size_t>(n) * groups + g] = rstd;
      S* yg = y.data() + (int64_t(n) * xs.c + int64_t(g) * cpg) * hw;
      for (int c = 0; c < cpg; ++c) {
        const S ga = gamma[g * cpg + c], be = beta[g * cpg + c];
        const S* xr = xg + int64_t(c) * hw;
        S* yr = yg + int64_t(c) * hw;
#pragma omp simd
        for (int64_t t = 0; t < hw; ++t) yr[t] = ga * (xr[t] - m) * rstd + be;
      }
    }
  }
  return y;
}

template <class S>
void groupnorm_bwd(const Tensor<S>& x, const Tensor<S>& dy, int groups, const S* gamma, const std::vector<S>& mean,
                   const std::vector<S>& rstd, Tensor<S>& dx, S* dgamma, S* dbeta) {
  const Shape4 xs = x.shape();
  const int cpg = xs.c / groups;
  const int64_t hw = int64_t(xs.h) * xs.w;
  const int64_t gsize = cpg * hw;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < xs.n; ++n) {
    for (int g = 0; g < groups; ++g) {
      const S m = mean[static_cast<std::size_t>(n) * groups + g];
      const S r = rstd[static_cast<std::size_t>(n) * groups + g];
      const S* xg = x.data() + (int64_t(n) * xs.c + int64_t(g) * cpg) * hw;
      const S* dyg = dy.data() + (int64_t(n) * xs.c + int64_t(g) * cpg) * hw;
      double s1 = 0.0, s2 = 0.0;
      for (int c = 0; c < cpg; ++c) {
        const S ga = gamma[g * cpg + c];
        for (int64_t t = 0; t < hw; ++t) {
          const double dg = static_cast<double>(ga) * static_cast<double>(dyg[int64_t(c) * hw + t]);
          s1 += dg;
          s2 += dg * static_cast<double>((xg[int64_t(c) * hw + t] - m) * r);
        }
      }
      const double inv = 1.0 / double(gsize);
      S* dxg = dx.data() + (int64_t(n) * xs.c + int64_t(g) * cpg) * hw;
      for (int c = 0; c < cpg; ++c) {
        const S ga = gamma[g * cpg + c];
        const S* xr = xg + int64_t(c) * hw;
        const S* dyr = dyg + int64_t(c) * hw;
        S* dxr = dxg + int64_t(c) * hw;
#pragma omp simd
        for (int64_t t = 0; t < hw; ++t) {
          const S xhat = (xr[t] - m) * r;
          dxr[t] += r * (ga * dyr[t] - static_cast<S>(inv * (s1 + static_cast<double>(xhat) * s2)));
        }
      }
    }
  }
#pragma omp parallel for schedule(static)
  for (int c = 0; c < xs.c; ++c) {
    const int g = c / cpg;
    double dg = 0.0, db = 0.0;
    for (int n = 0; n < xs.n; ++n) {
      const S m = mean[static_cast<std::size_t>(n) * groups + g];
      const S r = rstd[static_cast<std::size_t>(n) * groups + g];
      const S* xr = x.data() + (int64_t(n) * xs.c + c) * hw;
      const S* dyr = dy.data() + (int64_t(n) * xs.c + c) * hw;
      for (int64_t t = 0; t < hw; ++t) {
        dg += static_cast<double>(dyr[t]) * static_cast<double>((xr[t] - m) * r);
        db += static_cast<double>(dyr[t]);
      }
    }
    dgamma[c] += static_cast<S>(dg);
    dbeta[c] += static_cast<S>(db);
  }
}

// ---- pointwise and reduction helpers ----

template <class S>
Tensor<S> relu_fwd(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > S(0) ? x[i] : S(0);
  return y;
}

template <class S>
void relu_bwd(const Tensor<S>& y, const Tensor<S>& dy, Tensor<S>& dx) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < y.numel(); ++i) dx[i] += y[i] > S(0) ? dy[i] : S(0);
}

inline constexpr double kSigmoidClamp = 30.0;

template <class S>
Tensor<S> sigmoid_fwd(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < x.numel(); ++i) {
    S v = x[i];
    if (v > S(kSigmoidClamp)) v = S(kSigmoidClamp);
    if (v < S(-kSigmoidClamp)) v = S(-kSigmoidClamp);
    y[i] = S(1) / (S(1) + std::exp(-v));
  }
  return y;
}

template <class S>
void sigmoid_bwd(const Tensor<S>& y, const Tensor<S>& dy, Tensor<S>& dx) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < y.numel(); ++i) dx[i] += dy[i] * y[i] * (S(1) - y[i]);
}

template <class S>
Tensor<S> add_fwd(const Tensor<S>& a, const Tensor<S>& b) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tensor<S> y(a.shape());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < a.numel(); ++i) y[i] = a[i] + b[i];
  return y;
}

template <class S>
void axpy(S alpha, const Tensor<S>& x, Tensor<S>& y) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < x.numel(); ++i) y[i] += alpha * x[i];
}

// Global average pooling to (n, c, 1, 1).
template <class S>
Tensor<S> gap_fwd(const Tensor<S>& x) {
  const Shape4 xs = x.shape();
  Tensor<S> y(Shape4{xs.n, xs.c, 1, 1});
  const int64_t hw = int64_t(xs.h) * xs.w;
  const int64_t planes = int64_t(xs.n) * xs.c;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p) {
    double acc = 0.0;
    const S* xc = x.data() + p * hw;
    for (int64_t t = 0; t < hw; ++t) acc += static_cast<double>(xc[t]);
    y[p] = static_cast<S>(acc / double(hw));
  }
  return y;
}

template <class S>
void gap_bwd(const Tensor<S>& dy, Tensor<S>& dx) {
  const Shape4 xs = dx.shape();
  const int64_t hw = int64_t(xs.h) * xs.w;
  const int64_t planes = int64_t(xs.n) * xs.c;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p) {
    const S g = dy[p] / static_cast<S>(hw);
    S* dxc = dx.data() + p * hw;
#pragma omp simd
    for (int64_t t = 0; t < hw; ++t) dxc[t] += g;
  }
}

// Per-channel scaling by a (n, c, 1, 1) tensor.
template <class S>
Tensor<S> scale_channels_fwd(const Tensor<S>& x, const Tensor<S>& s) {
  const Shape4 xs = x.shape(), ss = s.shape();
  if (ss.n != xs.n || ss.c != xs.c || ss.h != 1 || ss.w != 1)
    throw std::invalid_argument("scale_channels: scale shape " + ss.str() + " does not match input " + xs.str());
  Tensor<S> y(xs);
  const int64_t hw = int64_t(xs.h) * xs.w;
  const int64_t planes = int64_t(xs.n) * xs.c;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p) {
    const S sv = s[p];
    const S* xc = x.data() + p * hw;
    S* yc = y.data() + p * hw;
#pragma omp simd
    for (int64_t t = 0; t < hw; ++t) yc[t] = sv * xc[t];
  }
  return y;
}

template <class S>
void scale_channels_bwd(const Tensor<S>& x, const Tensor<S>& s, const Tensor<S>& dy, Tensor<S>& dx, Tensor<S>& ds) {
  const Shape4 xs = x.shape();
  const int64_t hw = int64_t(xs.h) * xs.w;
  const int64_t planes = int64_t(xs.n) * xs.c;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p) {
    const S sv = s[p];
    const S* xc = x.data() + p * hw;
    const S* dyc = dy.data() + p * hw;
    S* dxc = dx.data() + p * hw;
    double acc = 0.0;
#pragma omp simd
    for (int64_t t = 0; t < hw; ++t) dxc[t] += sv * dyc[t];
    for (int64_t t = 0; t < hw; ++t) acc += static_cast<double>(dyc[t]) * static_cast<double>(xc[t]);
    ds[p] += static_cast<S>(acc);
  }
}

// Channel concatenation (a first, then b).
template <class S>
Tensor<S> concat_fwd(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape4 as = a.shape(), bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
    throw std::invalid_argument("concat: spatial/batch mismatch " + as.str() + " vs " + bs.str());
  Tensor<S> y(Shape4{as.n, as.c + bs.c, as.h, as.w});
  const int64_t hw = int64_t(as.h) * as.w;
#pragma omp parallel for schedule(static)
  for (int n = 0; n < as.n; ++n) {
    S* yn = y.data() + int64_t(n) * (as.c + bs.c) * hw;
    std::copy(a.data() + int64_t(n) * as.c * hw, a.data() + int64_t(n + 1) * as.c * hw, yn);
    std::copy(b.data() + int64_t(n) * bs.c * hw, b.data() + int64_t(n + 1) * bs.c * hw, yn + int64_t(as.c) * hw);
  }
  return y;
}

template <class S>
void concat_bwd(const Tensor<S>& dy, Tensor<S>& da, Tensor<S>& db) {
  const Shape4 as = da.shape(), bs = db.shape();
  const int64_t hw = int64_t(as.h) * as.w;
#pragma omp parallel for schedule(static)
  for (int n = 0; n < as.n; ++n) {
    const S* yn = dy.data() + int64_t(n) * (as.c + bs.c) * hw;
    S* an = da.data() + int64_t(n) * as.c * hw;
    S* bn = db.data() + int64_t(n) * bs.c * hw;
    for (int64_t t = 0; t < int64_t(as.c) * hw; ++t) an[t] += yn[t];
    for (int64_t t = 0; t < int64_t(bs.c) * hw; ++t) bn[t] += yn[int64_t(as.c) * hw + t];
  }
}

}  // namespace useg::kernels
