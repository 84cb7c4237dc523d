#pragma once

// Differentiable operators on (H, W, C) feature maps. Convolution weights are
// stored (kH, kW, C_in, C_out) so the innermost loops run over contiguous
// output channels.

#include <cmath>
#include <cstring>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "bevrestore/bevgrid.hpp"
#include "bevrestore/errors.hpp"
#include "bevrestore/tape.hpp"
#include "bevrestore/tensor.hpp"

namespace bevrestore {

enum class PoolMode { kMax, kAverage };
enum class InterpMethod { kNearest, kBilinear, kBicubic };

inline const char* to_string(InterpMethod m) {
  switch (m) {
    case InterpMethod::kNearest: return "nearest";
    case InterpMethod::kBilinear: return "bilinear";
    case InterpMethod::kBicubic: return "bicubic";
  }
  return "?";
}

namespace detail {

inline Tape& tape_of(const Var& v) {
  if (!v.valid()) throw UsageError("unbound variable passed to an op");
  return *v.tape();
}

inline void same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw UsageError("variables recorded on different tapes");
}

inline void check_conv_weights(const Tensor& w, int cin, const char* op) {
  if (w.rank() != 4) throw ShapeError(std::string(op) + ": weights must be (kH,kW,Cin,Cout)");
  if (w.dim(2) != cin) {
    throw ShapeError(std::string(op) + ": weight input channels " + std::to_string(w.dim(2)) +
                     " do not match input channels " + std::to_string(cin));
  }
}

// (kH,kW,Cin,Cout) -> (kH,kW,Cout,Cin)
inline std::vector<double> transpose_io(const Tensor& w) {
  const int taps = w.dim(0) * w.dim(1), cin = w.dim(2), cout = w.dim(3);
  std::vector<double> t(w.size());
  for (int k = 0; k < taps; ++k) {
    const double* src = w.data() + static_cast<std::size_t>(k) * cin * cout;
    double* dst = t.data() + static_cast<std::size_t>(k) * cin * cout;
    for (int ci = 0; ci < cin; ++ci)
      for (int co = 0; co < cout; ++co) dst[co * cin + ci] = src[ci * cout + co];
  }
  return t;
}

// C(M x N) += A(M x K) * B(K x N). A is addressed as A[i*ai + p*ap] so
// transposed operands need no copy; B and C are row-major with contiguous
// columns. Register-blocked MR x NR tiles, fixed summation order over p.
template <int MR, int NR>
inline void gemm_tile(int K, const double* A, std::ptrdiff_t ai, std::ptrdiff_t ap, const double* B,
                      std::ptrdiff_t ldb, double* C, std::ptrdiff_t ldc) {
  double acc[MR][NR] = {};
  for (int p = 0; p < K; ++p) {
    const double* b = B + p * ldb;
    for (int r = 0; r < MR; ++r) {
      const double a = A[r * ai + p * ap];
      for (int j = 0; j < NR; ++j) acc[r][j] += a * b[j];
    }
  }
  for (int r = 0; r < MR; ++r)
    for (int j = 0; j < NR; ++j) C[r * ldc + j] += acc[r][j];
}

// 4-wide vector tile (GCC/Clang vector extension): MR rows x 4*NV columns
// held in registers for the whole K loop.
typedef double v4d __attribute__((vector_size(32)));

template <int MR, int NV>
inline void gemm_tile_v(int K, const double* A, std::ptrdiff_t ai, std::ptrdiff_t ap, const double* B,
                        std::ptrdiff_t ldb, double* C, std::ptrdiff_t ldc) {
  v4d acc[MR][NV];
  for (int r = 0; r < MR; ++r)
    for (int v = 0; v < NV; ++v) acc[r][v] = v4d{0.0, 0.0, 0.0, 0.0};
  for (int p = 0; p < K; ++p) {
    v4d b[NV];
    for (int v = 0; v < NV; ++v) std::memcpy(&b[v], B + p * ldb + 4 * v, sizeof(v4d));
    for (int r = 0; r < MR; ++r) {
      const double a = A[r * ai + p * ap];
      for (int v = 0; v < NV; ++v) acc[r][v] += a * b[v];
    }
  }
  for (int r = 0; r < MR; ++r)
    for (int v = 0; v < NV; ++v)
      for (int l = 0; l < 4; ++l) C[r * ldc + 4 * v + l] += acc[r][v][l];
}

template <int MR>
inline void gemm_row_block(int N, int K, const double* A, std::ptrdiff_t ai, std::ptrdiff_t ap, const double* B,
                           std::ptrdiff_t ldb, double* C, std::ptrdiff_t ldc) {
  int j = 0;
  for (; j + 8 <= N; j += 8) gemm_tile_v<MR, 2>(K, A, ai, ap, B + j, ldb, C + j, ldc);
  for (; j + 4 <= N; j += 4) gemm_tile_v<MR, 1>(K, A, ai, ap, B + j, ldb, C + j, ldc);
  for (; j < N; ++j) gemm_tile<MR, 1>(K, A, ai, ap, B + j, ldb, C + j, ldc);
}

inline void gemm_acc(int M, int N, int K, const double* A, std::ptrdiff_t ai, std::ptrdiff_t ap, const double* B,
                     std::ptrdiff_t ldb, double* C, std::ptrdiff_t ldc) {
  int i = 0;
  for (; i + 4 <= M; i += 4) gemm_row_block<4>(N, K, A + i * ai, ai, ap, B, ldb, C + i * ldc, ldc);
  for (; i < M; ++i) gemm_row_block<1>(N, K, A + i * ai, ai, ap, B, ldb, C + i * ldc, ldc);
}

// Patch matrix (ho*wo, kh*kw*cin) of an (H, W, cin) map; padding reads as 0.
inline void im2col(const double* x, int H, int W, int cin, int kh, int kw, int stride, int pad, int ho, int wo,
                   double* cols) {
  const std::size_t K = static_cast<std::size_t>(kh) * kw * cin;
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      double* row = cols + (static_cast<std::size_t>(oy) * wo + ox) * K;
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - pad + ky;
        for (int kx = 0; kx < kw; ++kx, row += cin) {
          const int ix = ox * stride - pad + kx;
          if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
            std::fill_n(row, cin, 0.0);
          } else {
            std::copy_n(x + (static_cast<std::size_t>(iy) * W + ix) * cin, cin, row);
          }
        }
      }
    }
}

// Adjoint of im2col: scatters patch-matrix gradients back onto the map.
inline void col2im_add(const double* cols, int H, int W, int cin, int kh, int kw, int stride, int pad, int ho,
                       int wo, double* x) {
  const std::size_t K = static_cast<std::size_t>(kh) * kw * cin;
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      const double* row = cols + (static_cast<std::size_t>(oy) * wo + ox) * K;
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - pad + ky;
        for (int kx = 0; kx < kw; ++kx, row += cin) {
          const int ix = ox * stride - pad + kx;
          if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
          double* dst = x + (static_cast<std::size_t>(iy) * W + ix) * cin;
          for (int c = 0; c < cin; ++c) dst[c] += row[c];
        }
      }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops.

inline Var add(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  Tape& tape = detail::tape_of(a);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) {
    throw ShapeError("add: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    for (const Var& v : {a, b}) {
      if (Tensor* gv = t.grad_buffer(v)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gv)[i] += g[i];
      }
    }
  });
}

inline Var scale(const Var& a, double factor) {
  Tape& tape = detail::tape_of(a);
  Tensor out = a.value();
  for (auto& v : out.vec()) v *= factor;
  return tape.record(std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += factor * g[i];
    }
  });
}

inline Var relu(const Var& a) {
  Tape& tape = detail::tape_of(a);
  Tensor out = a.value();
  for (auto& v : out.vec()) v = v > 0.0 ? v : 0.0;
  return tape.record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) {
      const Tensor& x = a.value();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) (*ga)[i] += g[i];
    }
  });
}

inline Var sum(const Var& a) {
  Tape& tape = detail::tape_of(a);
  Tensor out({1}, a.value().sum());
  return tape.record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) {
      for (auto& v : ga->vec()) v += g[0];
    }
  });
}

// Concatenate (H,W,Ca) and (H,W,Cb) into (H,W,Ca+Cb).
inline Var concat_channels(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  Tape& tape = detail::tape_of(a);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_rank3(x, "concat_channels");
  require_rank3(y, "concat_channels");
  if (x.h() != y.h() || x.w() != y.w()) {
    throw ShapeError("concat_channels: spatial mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(y.shape()));
  }
  const int ca = x.c(), cb = y.c(), cc = ca + cb;
  const std::size_t n = static_cast<std::size_t>(x.h()) * x.w();
  Tensor out = Tensor::hwc(x.h(), x.w(), cc);
  for (std::size_t p = 0; p < n; ++p) {
    std::copy_n(x.data() + p * ca, ca, out.data() + p * cc);
    std::copy_n(y.data() + p * cb, cb, out.data() + p * cc + ca);
  }
  return tape.record(std::move(out), {a, b}, [a, b, ca, cb, cc, n](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t p = 0; p < n; ++p)
        for (int c = 0; c < ca; ++c) (*ga)[p * ca + c] += g[p * cc + c];
    }
    if (Tensor* gb = t.grad_buffer(b)) {
      for (std::size_t p = 0; p < n; ++p)
        for (int c = 0; c < cb; ++c) (*gb)[p * cb + c] += g[p * cc + ca + c];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution family.

inline int conv_out_dim(int in, int k, int stride, int pad) {
  if (stride < 1) throw ShapeError("conv stride must be >= 1");
  if (pad < 0) throw ShapeError("conv padding must be >= 0");
  if (in + 2 * pad < k) {
    throw ShapeError("conv kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

// Cross-correlation with zero padding. `bias` may be an unbound Var.
inline Var conv2d(const Var& x, const Var& weights, const Var& bias, int stride, int padding) {
  detail::same_tape(x, weights);
  Tape& tape = detail::tape_of(x);
  const Tensor& in = x.value();
  const Tensor& w = weights.value();
  require_rank3(in, "conv2d");
  detail::check_conv_weights(w, in.c(), "conv2d");
  const int H = in.h(), W = in.w(), cin = in.c();
  const int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  const int ho = conv_out_dim(H, kh, stride, padding);
  const int wo = conv_out_dim(W, kw, stride, padding);
  const bool has_bias = bias.valid();
  if (has_bias) {
    detail::same_tape(x, bias);
    if (bias.value().size() != static_cast<std::size_t>(cout)) {
      throw ShapeError("conv2d: bias length does not match output channels");
    }
  }

  // Patch-matrix formulation: out (M x cout) = cols (M x K) * W (K x cout),
  // where the (kH,kW,Cin,Cout) weight layout already is K x cout row-major.
  const int M = ho * wo, K = kh * kw * cin;
  const bool direct = kh == 1 && kw == 1 && stride == 1 && padding == 0;
  // Scratch buffers are reused across calls to avoid re-faulting large pages.
  auto patches = [=](const Tensor& in, std::vector<double>& buf) -> const double* {
    if (direct) return in.data();
    buf.resize(static_cast<std::size_t>(M) * K);
    detail::im2col(in.data(), H, W, cin, kh, kw, stride, padding, ho, wo, buf.data());
    return buf.data();
  };

  Tensor out = Tensor::hwc(ho, wo, cout);
  if (has_bias)
    for (int p = 0; p < M; ++p) std::copy_n(bias.value().data(), cout, out.data() + static_cast<std::size_t>(p) * cout);
  {
    thread_local std::vector<double> buf;
    const double* cols = patches(in, buf);
    detail::gemm_acc(M, cout, K, cols, K, 1, w.data(), cout, out.data(), cout);
  }

  std::vector<Var> inputs{x, weights};
  if (has_bias) inputs.push_back(bias);
  return tape.record(std::move(out), inputs, [=](Tape& t, const Tensor& g) {
    const Tensor& in = x.value();
    const Tensor& w = weights.value();
    Tensor* gx = t.grad_buffer(x);
    Tensor* gw = t.grad_buffer(weights);
    Tensor* gb = has_bias ? t.grad_buffer(bias) : nullptr;
    if (gb)
      for (int p = 0; p < M; ++p)
        for (int co = 0; co < cout; ++co) (*gb)[co] += g[static_cast<std::size_t>(p) * cout + co];
    if (gw) {
      // gW (K x cout) += cols^T (K x M) * g (M x cout)
      thread_local std::vector<double> buf;
      const double* cols = patches(in, buf);
      detail::gemm_acc(K, cout, M, cols, 1, K, g.data(), cout, gw->data(), cout);
    }
    if (gx) {
      // gcols (M x K) = g (M x cout) * W^T (cout x K)
      std::vector<double> wt(static_cast<std::size_t>(cout) * K);
      for (int k = 0; k < K; ++k)
        for (int co = 0; co < cout; ++co) wt[static_cast<std::size_t>(co) * K + k] = w[static_cast<std::size_t>(k) * cout + co];
      if (direct) {
        detail::gemm_acc(M, K, cout, g.data(), cout, 1, wt.data(), K, gx->data(), K);
      } else {
        thread_local std::vector<double> gcols;
        gcols.assign(static_cast<std::size_t>(M) * K, 0.0);
        detail::gemm_acc(M, K, cout, g.data(), cout, 1, wt.data(), K, gcols.data(), K);
        detail::col2im_add(gcols.data(), H, W, cin, kh, kw, stride, padding, ho, wo, gx->data());
      }
    }
  });
}

inline Var conv2d(const Var& x, const Var& weights, int stride, int padding) {
  return conv2d(x, weights, Var(), stride, padding);
}

// Gradient-of-convolution semantics: every input pixel stamps the kernel,
// scaled by its value, at (iy*stride, ix*stride). The full output
// ((H-1)*stride + kH, (W-1)*stride + kW, C_out) is trimmed by `crop` pixels on
// every side.
inline Var transposed_conv2d(const Var& x, const Var& weights, int stride, int crop = 0) {
  detail::same_tape(x, weights);
  Tape& tape = detail::tape_of(x);
  const Tensor& in = x.value();
  const Tensor& w = weights.value();
  require_rank3(in, "transposed_conv2d");
  detail::check_conv_weights(w, in.c(), "transposed_conv2d");
  if (stride < 1) throw ShapeError("transposed_conv2d: stride must be >= 1");
  if (crop < 0) throw ShapeError("transposed_conv2d: crop must be >= 0");
  const int H = in.h(), W = in.w(), cin = in.c();
  const int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  const int ho = (H - 1) * stride + kh - 2 * crop;
  const int wo = (W - 1) * stride + kw - 2 * crop;
  if (ho < 1 || wo < 1) throw ShapeError("transposed_conv2d: crop removes the whole output");

  // Per-pixel stamps as one product: cols (H*W x kH*kW*Cout) = x (H*W x Cin)
  // * Wr (Cin x kH*kW*Cout), then each stamp is added at its output offset.
  const int M = H * W, taps = kh * kw, Kc = taps * cout;
  auto rearranged = [=](const Tensor& w) {
    std::vector<double> wr(static_cast<std::size_t>(cin) * Kc);
    for (int tp = 0; tp < taps; ++tp)
      for (int ci = 0; ci < cin; ++ci)
        std::copy_n(w.data() + (static_cast<std::size_t>(tp) * cin + ci) * cout, cout,
                    wr.data() + static_cast<std::size_t>(ci) * Kc + static_cast<std::size_t>(tp) * cout);
    return wr;
  };
  // Visits every (input pixel, tap) pair that lands inside the cropped output.
  auto for_each_stamp = [=](auto&& fn) {
    for (int iy = 0; iy < H; ++iy)
      for (int ix = 0; ix < W; ++ix)
        for (int dy = 0; dy < kh; ++dy) {
          const int oy = iy * stride + dy - crop;
          if (oy < 0 || oy >= ho) continue;
          for (int dx = 0; dx < kw; ++dx) {
            const int ox = ix * stride + dx - crop;
            if (ox < 0 || ox >= wo) continue;
            fn((static_cast<std::size_t>(iy) * W + ix) * Kc + static_cast<std::size_t>(dy * kw + dx) * cout,
               (static_cast<std::size_t>(oy) * wo + ox) * cout);
          }
        }
  };

  Tensor out = Tensor::hwc(ho, wo, cout);
  {
    const std::vector<double> wr = rearranged(w);
    thread_local std::vector<double> cols;
    cols.assign(static_cast<std::size_t>(M) * Kc, 0.0);
    detail::gemm_acc(M, Kc, cin, in.data(), cin, 1, wr.data(), Kc, cols.data(), Kc);
    for_each_stamp([&](std::size_t src, std::size_t dst) {
      for (int co = 0; co < cout; ++co) out[dst + co] += cols[src + co];
    });
  }

  return tape.record(std::move(out), {x, weights}, [=](Tape& t, const Tensor& g) {
    const Tensor& in = x.value();
    const Tensor& w = weights.value();
    Tensor* gx = t.grad_buffer(x);
    Tensor* gw = t.grad_buffer(weights);
    thread_local std::vector<double> gcols;
    gcols.assign(static_cast<std::size_t>(M) * Kc, 0.0);
    for_each_stamp([&](std::size_t src, std::size_t dst) { std::copy_n(g.data() + dst, cout, gcols.data() + src); });
    if (gx) {
      // gx (M x Cin) += gcols (M x Kc) * Wr^T (Kc x Cin)
      const std::vector<double> wr = rearranged(w);
      std::vector<double> wrt(wr.size());
      for (int ci = 0; ci < cin; ++ci)
        for (int k = 0; k < Kc; ++k) wrt[static_cast<std::size_t>(k) * cin + ci] = wr[static_cast<std::size_t>(ci) * Kc + k];
      detail::gemm_acc(M, cin, Kc, gcols.data(), Kc, 1, wrt.data(), cin, gx->data(), cin);
    }
    if (gw) {
      // gWr (Cin x Kc) = x^T (Cin x M) * gcols (M x Kc)
      std::vector<double> gwr(static_cast<std::size_t>(cin) * Kc, 0.0);
      detail::gemm_acc(cin, Kc, M, in.data(), 1, cin, gcols.data(), Kc, gwr.data(), Kc);
      for (int tp = 0; tp < taps; ++tp)
        for (int ci = 0; ci < cin; ++ci) {
          const double* src = gwr.data() + static_cast<std::size_t>(ci) * Kc + static_cast<std::size_t>(tp) * cout;
          double* dst = gw->data() + (static_cast<std::size_t>(tp) * cin + ci) * cout;
          for (int co = 0; co < cout; ++co) dst[co] += src[co];
        }
    }
  });
}

// Adds a per-channel bias to an (H,W,C) map.
inline Var add_channel_bias(const Var& x, const Var& bias) {
  detail::same_tape(x, bias);
  Tape& tape = detail::tape_of(x);
  const Tensor& in = x.value();
  require_rank3(in, "add_channel_bias");
  const int c = in.c();
  if (bias.value().size() != static_cast<std::size_t>(c)) {
    throw ShapeError("add_channel_bias: bias length does not match channels");
  }
  Tensor out = in;
  const double* b = bias.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % c];
  return tape.record(std::move(out), {x, bias}, [x, bias, c](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_buffer(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    if (Tensor* gb = t.grad_buffer(bias))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % c] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Pixel shuffle. out[y, x, c] = in[y/s, x/s, c*s*s + (y%s)*s + (x%s)].

namespace detail {

// Index map from shuffled (sh, sw, C) positions to source (h, w, s*s*C)
// positions; shuffle gathers with it and unshuffle scatters with it.
inline std::vector<std::size_t> shuffle_index(int h, int w, int c_out, int s) {
  const int sh = h * s, sw = w * s, cin = c_out * s * s;
  std::vector<std::size_t> idx(static_cast<std::size_t>(sh) * sw * c_out);
  std::size_t k = 0;
  for (int y = 0; y < sh; ++y)
    for (int x = 0; x < sw; ++x)
      for (int c = 0; c < c_out; ++c) {
        const int src_c = c * s * s + (y % s) * s + (x % s);
        idx[k++] = (static_cast<std::size_t>(y / s) * w + x / s) * cin + src_c;
      }
  return idx;
}

}  // namespace detail

inline Var pixel_shuffle(const Var& x, int s) {
  Tape& tape = detail::tape_of(x);
  const Tensor& in = x.value();
  require_rank3(in, "pixel_shuffle");
  if (s < 1) throw ShapeError("pixel_shuffle: scale must be positive");
  if (in.c() % (s * s) != 0) {
    throw ShapeError("pixel_shuffle: channels " + std::to_string(in.c()) + " not divisible by " +
                     std::to_string(s * s));
  }
  const int c_out = in.c() / (s * s);
  auto idx = std::make_shared<std::vector<std::size_t>>(detail::shuffle_index(in.h(), in.w(), c_out, s));
  Tensor out = Tensor::hwc(in.h() * s, in.w() * s, c_out);
  for (std::size_t k = 0; k < idx->size(); ++k) out[k] = in[(*idx)[k]];
  return tape.record(std::move(out), {x}, [x, idx](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_buffer(x))
      for (std::size_t k = 0; k < idx->size(); ++k) (*gx)[(*idx)[k]] += g[k];
  });
}

inline Var pixel_unshuffle(const Var& x, int s) {
  Tape& tape = detail::tape_of(x);
  const Tensor& in = x.value();
  require_rank3(in, "pixel_unshuffle");
  if (s < 1) throw ShapeError("pixel_unshuffle: scale must be positive");
  if (in.h() % s != 0 || in.w() % s != 0) {
    throw ShapeError("pixel_unshuffle: spatial dims " + shape_str(in.shape()) +
                     " not divisible by " + std::to_string(s));
  }
  const int h = in.h() / s, w = in.w() / s;
  auto idx = std::make_shared<std::vector<std::size_t>>(detail::shuffle_index(h, w, in.c(), s));
  Tensor out = Tensor::hwc(h, w, in.c() * s * s);
  for (std::size_t k = 0; k < idx->size(); ++k) out[(*idx)[k]] = in[k];
  return tape.record(std::move(out), {x}, [x, idx](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_buffer(x))
      for (std::size_t k = 0; k < idx->size(); ++k) (*gx)[k] += g[(*idx)[k]];
  });
}

// ---------------------------------------------------------------------------
// Pooling with stride equal to the kernel. size_u pools along W, size_v
// along H.

inline Var pool2d(const Var& x, const Kernel2& k, PoolMode mode) {
  Tape& tape = detail::tape_of(x);
  const Tensor& in = x.value();
  require_rank3(in, "pool2d");
  if (in.h() % k.size_v != 0 || in.w() % k.size_u != 0) {
    throw ShapeError("pool2d: " + shape_str(in.shape()) + " not divisible by kernel " +
                     std::to_string(k.size_u) + "x" + std::to_string(k.size_v));
  }
  const int ho = in.h() / k.size_v, wo = in.w() / k.size_u, c = in.c();
  const int W = in.w();
  Tensor out = Tensor::hwc(ho, wo, c);
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  if (mode == PoolMode::kMax) argmax->resize(out.size());
  const double inv = 1.0 / (k.size_u * k.size_v);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t o = (static_cast<std::size_t>(oy) * wo + ox) * c + ch;
        double acc = mode == PoolMode::kMax ? -INFINITY : 0.0;
        std::size_t best = 0;
        for (int j = 0; j < k.size_v; ++j)
          for (int i = 0; i < k.size_u; ++i) {
            const std::size_t src =
                (static_cast<std::size_t>(oy * k.size_v + j) * W + ox * k.size_u + i) * c + ch;
            if (mode == PoolMode::kMax) {
              if (in[src] > acc) {
                acc = in[src];
                best = src;
              }
            } else {
              acc += in[src];
            }
          }
        if (mode == PoolMode::kMax) {
          out[o] = acc;
          (*argmax)[o] = best;
        } else {
          out[o] = acc * inv;
        }
      }
  const std::size_t aux = argmax->size() * sizeof(std::size_t);
  return tape.record(
      std::move(out), {x},
      [=](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(x);
        if (!gx) return;
        if (mode == PoolMode::kMax) {
          for (std::size_t o = 0; o < g.size(); ++o) (*gx)[(*argmax)[o]] += g[o];
          return;
        }
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox)
            for (int ch = 0; ch < c; ++ch) {
              const double go = g[(static_cast<std::size_t>(oy) * wo + ox) * c + ch] * inv;
              for (int j = 0; j < k.size_v; ++j)
                for (int i = 0; i < k.size_u; ++i)
                  (*gx)[(static_cast<std::size_t>(oy * k.size_v + j) * W + ox * k.size_u + i) * c + ch] += go;
            }
      },
      aux);
}

// ---------------------------------------------------------------------------
// Fixed-kernel upsampling. Source coordinate of destination index o is
// (o + 0.5) / s - 0.5 (align-corners = false); out-of-range taps clamp to the
// border. Bicubic uses the Keys kernel with a = -0.75.

namespace detail {

struct Tap {
  int index;
  double weight;
};

inline double keys_cubic(double t, double a = -0.75) {
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

inline std::vector<std::vector<Tap>> interp_taps(int n, int s, InterpMethod method) {
  std::vector<std::vector<Tap>> taps(static_cast<std::size_t>(n) * s);
  auto clamp = [n](int i) { return i < 0 ? 0 : (i >= n ? n - 1 : i); };
  for (int o = 0; o < n * s; ++o) {
    auto& tv = taps[static_cast<std::size_t>(o)];
    if (method == InterpMethod::kNearest) {
      tv.push_back({o / s, 1.0});
      continue;
    }
    const double src = (o + 0.5) / s - 0.5;
    const int i0 = static_cast<int>(std::floor(src));
    const double f = src - i0;
    if (method == InterpMethod::kBilinear) {
      tv.push_back({clamp(i0), 1.0 - f});
      tv.push_back({clamp(i0 + 1), f});
    } else {
      for (int m = -1; m <= 2; ++m) tv.push_back({clamp(i0 + m), keys_cubic(f - m)});
    }
  }
  return taps;
}

}  // namespace detail

inline Var interp_upsample(const Var& x, int s, InterpMethod method) {
  Tape& tape = detail::tape_of(x);
  const Tensor& in = x.value();
  require_rank3(in, "interp_upsample");
  if (s < 1) throw ShapeError("interp_upsample: scale must be positive");
  const int H = in.h(), W = in.w(), c = in.c();
  auto ty = std::make_shared<std::vector<std::vector<detail::Tap>>>(detail::interp_taps(H, s, method));
  auto tx = std::make_shared<std::vector<std::vector<detail::Tap>>>(detail::interp_taps(W, s, method));
  const int ho = H * s, wo = W * s;
  Tensor out = Tensor::hwc(ho, wo, c);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      double* o = out.data() + (static_cast<std::size_t>(oy) * wo + ox) * c;
      for (const auto& a : (*ty)[static_cast<std::size_t>(oy)])
        for (const auto& b : (*tx)[static_cast<std::size_t>(ox)]) {
          const double wgt = a.weight * b.weight;
          const double* src = in.data() + (static_cast<std::size_t>(a.index) * W + b.index) * c;
          for (int ch = 0; ch < c; ++ch) o[ch] += wgt * src[ch];
        }
    }
  return tape.record(std::move(out), {x}, [=](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_buffer(x);
    if (!gx) return;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const double* go = g.data() + (static_cast<std::size_t>(oy) * wo + ox) * c;
        for (const auto& a : (*ty)[static_cast<std::size_t>(oy)])
          for (const auto& b : (*tx)[static_cast<std::size_t>(ox)]) {
            const double wgt = a.weight * b.weight;
            double* dst = gx->data() + (static_cast<std::size_t>(a.index) * W + b.index) * c;
            for (int ch = 0; ch < c; ++ch) dst[ch] += wgt * go[ch];
          }
      }
  });
}

// ---------------------------------------------------------------------------
// Multi-head self-attention over the H*W cells of a feature map, with a
// residual connection: y = x + concat_h(softmax(Q_h K_h^T / sqrt(d)) V_h) Wo.
// Projections are (C, C) matrices without bias.

struct MsaWeights {
  Var wq, wk, wv, wo;
};

namespace detail {

// C(m x n) = A(m x k) * B(k x n), all row-major.
inline void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
  std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double av = a[static_cast<std::size_t>(i) * k + p];
      const double* br = b + static_cast<std::size_t>(p) * n;
      double* cr = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * br[j];
    }
}

// C(m x n) += A^T B with A (k x m), B (k x n).
inline void matmul_tn_acc(const double* a, const double* b, double* c, int k, int m, int n) {
  for (int p = 0; p < k; ++p)
    for (int i = 0; i < m; ++i) {
      const double av = a[static_cast<std::size_t>(p) * m + i];
      if (av == 0.0) continue;
      const double* br = b + static_cast<std::size_t>(p) * n;
      double* cr = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * br[j];
    }
}

// C(m x n) += A B^T with A (m x k), B (n x k).
inline void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      const double* ar = a + static_cast<std::size_t>(i) * k;
      const double* br = b + static_cast<std::size_t>(j) * k;
      for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
      c[static_cast<std::size_t>(i) * n + j] += acc;
    }
}

struct MsaSaved {
  std::vector<double> q, k, v, o, p;  // p: heads x T x T
};

}  // namespace detail

inline Var msa_layer(const Var& x, const MsaWeights& wts, int heads) {
  Tape& tape = detail::tape_of(x);
  const Tensor& in = x.value();
  require_rank3(in, "msa_layer");
  const int T = in.h() * in.w();
  const int C = in.c();
  if (heads < 1 || C % heads != 0) {
    throw ShapeError("msa_layer: channels " + std::to_string(C) + " not divisible by heads " +
                     std::to_string(heads));
  }
  for (const Var* w : {&wts.wq, &wts.wk, &wts.wv, &wts.wo}) {
    detail::same_tape(x, *w);
    const Tensor& m = w->value();
    if (m.rank() != 2 || m.dim(0) != C || m.dim(1) != C) {
      throw ShapeError("msa_layer: projection must be (C,C), got " + shape_str(m.shape()));
    }
  }
  const int dh = C / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t TC = static_cast<std::size_t>(T) * C;
  const std::size_t TT = static_cast<std::size_t>(T) * T;

  auto sv = std::make_shared<detail::MsaSaved>();
  sv->q.resize(TC);
  sv->k.resize(TC);
  sv->v.resize(TC);
  sv->o.assign(TC, 0.0);
  sv->p.resize(TT * heads);
  detail::matmul(in.data(), wts.wq.value().data(), sv->q.data(), T, C, C);
  detail::matmul(in.data(), wts.wk.value().data(), sv->k.data(), T, C, C);
  detail::matmul(in.data(), wts.wv.value().data(), sv->v.data(), T, C, C);

  for (int h = 0; h < heads; ++h) {
    double* P = sv->p.data() + h * TT;
    for (int i = 0; i < T; ++i) {
      double* row = P + static_cast<std::size_t>(i) * T;
      const double* qi = sv->q.data() + static_cast<std::size_t>(i) * C + h * dh;
      double mx = -INFINITY;
      for (int j = 0; j < T; ++j) {
        const double* kj = sv->k.data() + static_cast<std::size_t>(j) * C + h * dh;
        double dot = 0.0;
        for (int d = 0; d < dh; ++d) dot += qi[d] * kj[d];
        row[j] = dot * sc;
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (int j = 0; j < T; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      double* oi = sv->o.data() + static_cast<std::size_t>(i) * C + h * dh;
      for (int j = 0; j < T; ++j) {
        row[j] /= z;
        const double pj = row[j];
        const double* vj = sv->v.data() + static_cast<std::size_t>(j) * C + h * dh;
        for (int d = 0; d < dh; ++d) oi[d] += pj * vj[d];
      }
    }
  }

  Tensor out = in;
  {
    std::vector<double> proj(TC);
    detail::matmul(sv->o.data(), wts.wo.value().data(), proj.data(), T, C, C);
    for (std::size_t i = 0; i < TC; ++i) out[i] += proj[i];
  }

  const std::size_t aux = (4 * TC + heads * TT) * sizeof(double);
  return tape.record(
      std::move(out), {x, wts.wq, wts.wk, wts.wv, wts.wo},
      [=](Tape& t, const Tensor& g) {
        const Tensor& in = x.value();
        Tensor* gx = t.grad_buffer(x);
        if (gx)
          for (std::size_t i = 0; i < TC; ++i) (*gx)[i] += g[i];
        if (Tensor* gwo = t.grad_buffer(wts.wo)) detail::matmul_tn_acc(sv->o.data(), g.data(), gwo->data(), T, C, C);

        std::vector<double> dO(TC, 0.0);
        detail::matmul_nt_acc(g.data(), wts.wo.value().data(), dO.data(), T, C, C);
        std::vector<double> dQ(TC, 0.0), dK(TC, 0.0), dV(TC, 0.0);
        std::vector<double> dS(static_cast<std::size_t>(T));
        for (int h = 0; h < heads; ++h) {
          const double* P = sv->p.data() + h * TT;
          for (int i = 0; i < T; ++i) {
            const double* row = P + static_cast<std::size_t>(i) * T;
            const double* doi = dO.data() + static_cast<std::size_t>(i) * C + h * dh;
            double dot = 0.0;
            for (int j = 0; j < T; ++j) {
              const double* vj = sv->v.data() + static_cast<std::size_t>(j) * C + h * dh;
              double* dvj = dV.data() + static_cast<std::size_t>(j) * C + h * dh;
              double dp = 0.0;
              for (int d = 0; d < dh; ++d) {
                dp += doi[d] * vj[d];
                dvj[d] += row[j] * doi[d];
              }
              dS[static_cast<std::size_t>(j)] = dp;
              dot += row[j] * dp;
            }
            const double* qi = sv->q.data() + static_cast<std::size_t>(i) * C + h * dh;
            double* dqi = dQ.data() + static_cast<std::size_t>(i) * C + h * dh;
            for (int j = 0; j < T; ++j) {
              const double ds = row[j] * (dS[static_cast<std::size_t>(j)] - dot) * sc;
              if (ds == 0.0) continue;
              const double* kj = sv->k.data() + static_cast<std::size_t>(j) * C + h * dh;
              double* dkj = dK.data() + static_cast<std::size_t>(j) * C + h * dh;
              for (int d = 0; d < dh; ++d) {
                dqi[d] += ds * kj[d];
                dkj[d] += ds * qi[d];
              }
            }
          }
        }
        const std::pair<const Var*, const std::vector<double>*> proj[] = {
            {&wts.wq, &dQ}, {&wts.wk, &dK}, {&wts.wv, &dV}};
        for (const auto& [w, d] : proj) {
          if (Tensor* gw = t.grad_buffer(*w)) detail::matmul_tn_acc(in.data(), d->data(), gw->data(), T, C, C);
          if (gx) detail::matmul_nt_acc(d->data(), w->value().data(), gx->data(), T, C, C);
        }
      },
      aux);
}

// ---------------------------------------------------------------------------
// Sigmoid focal loss averaged over all elements:
//   -alpha_t (1 - p_t)^gamma log(p_t).
// A soft target t in [0, 1] mixes the positive and negative terms linearly,
// t * L(z | 1) + (1 - t) * L(z | 0).

namespace detail {

inline double softplus(double a) { return std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a))); }

}  // namespace detail

namespace detail {

// Per-element focal loss for a hard label and its derivative w.r.t. z.
inline std::pair<double, double> focal_term(double z, bool pos, double gamma, double alpha) {
  const double zt = pos ? z : -z;
  const double log_pt = -softplus(-zt);
  const double pt = 1.0 / (1.0 + std::exp(-zt));
  const double q = 1.0 / (1.0 + std::exp(zt));
  const double at = pos ? alpha : 1.0 - alpha;
  const double loss = -at * std::pow(q, gamma) * log_pt;
  const double dzt = at * (gamma * std::pow(q, gamma) * pt * log_pt - std::pow(q, gamma + 1.0));
  return {loss, pos ? dzt : -dzt};
}

}  // namespace detail

inline Var sigmoid_focal_loss(const Var& logits, const Tensor& target, double gamma, double alpha) {
  Tape& tape = detail::tape_of(logits);
  const Tensor& z = logits.value();
  if (z.shape() != target.shape()) {
    throw ShapeError("sigmoid_focal_loss: logits " + shape_str(z.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  const std::size_t n = z.size();
  if (n == 0) throw ShapeError("sigmoid_focal_loss: empty input");
  auto tgt = std::make_shared<Tensor>(target);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = (*tgt)[i];
    if (!(t >= 0.0 && t <= 1.0)) throw ShapeError("sigmoid_focal_loss: target values must lie in [0, 1]");
    if (t > 0.0) total += t * detail::focal_term(z[i], true, gamma, alpha).first;
    if (t < 1.0) total += (1.0 - t) * detail::focal_term(z[i], false, gamma, alpha).first;
  }
  Tensor out({1}, total / static_cast<double>(n));
  return tape.record(
      std::move(out), {logits},
      [=](Tape& t, const Tensor& g) {
        Tensor* gz = t.grad_buffer(logits);
        if (!gz) return;
        const Tensor& z = logits.value();
        const double scale_n = g[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double ti = (*tgt)[i];
          double d = 0.0;
          if (ti > 0.0) d += ti * detail::focal_term(z[i], true, gamma, alpha).second;
          if (ti < 1.0) d += (1.0 - ti) * detail::focal_term(z[i], false, gamma, alpha).second;
          (*gz)[i] += scale_n * d;
        }
      },
      tgt->bytes());
}

}  // namespace bevrestore
