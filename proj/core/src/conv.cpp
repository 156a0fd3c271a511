#include <cblas.h>

#include <algorithm>
#include <cstring>
#include <memory>
#include <vector>

#include "sitar/tape.hpp"

namespace sitar::ad {

namespace {

// Images are processed in tiles of kTile: the unrolled column matrices of a
// tile share one matrix product, which amortizes the per-call cost of the
// BLAS kernel over enough columns to matter while the working set still fits
// in cache (a whole-batch matrix streams through RAM and is slower).
constexpr int kTile = 16;

// First output column whose tap ow*S - P + kj is >= 0, and one past the last
// with the tap < W: the in-bounds range is precomputed so the inner copy
// loops carry no per-element bounds test.
inline int ow_lo(int P, int kj, int S) {
  return P - kj <= 0 ? 0 : (P - kj + S - 1) / S;
}
inline int ow_hi(int W, int P, int kj, int S, int Wo) {
  const int hi = (W + P - kj + S - 1) / S;
  return hi < Wo ? hi : Wo;
}

// Unrolls one [C,H,W] image into a [C*K*K, Ho*Wo] block of a column matrix
// with row stride ld. Out-of-bounds taps read as zero.
void im2col(const double* img, int C, int H, int W, int K, int S, int P, int Ho,
            int Wo, double* col, std::size_t ld) {
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < K; ++ki)
      for (int kj = 0; kj < K; ++kj) {
        double* row = col + ((static_cast<std::size_t>(c) * K + ki) * K + kj) * ld;
        const int lo = ow_lo(P, kj, S), hi = ow_hi(W, P, kj, S, Wo);
        for (int oh = 0; oh < Ho; ++oh) {
          double* dst = row + static_cast<std::size_t>(oh) * Wo;
          const int ih = oh * S - P + ki;
          if (ih < 0 || ih >= H) {
            std::memset(dst, 0, sizeof(double) * Wo);
            continue;
          }
          const double* src =
              img + (static_cast<std::size_t>(c) * H + ih) * W - P + kj;
          for (int ow = 0; ow < lo; ++ow) dst[ow] = 0.0;
          if (S == 1) {
            std::memcpy(dst + lo, src + lo, sizeof(double) * (hi - lo));
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow] = src[ow * S];
          }
          for (int ow = hi; ow < Wo; ++ow) dst[ow] = 0.0;
        }
      }
}

// Adjoint of im2col: scatters a [C*K*K, Ho*Wo] block (row stride ld) back
// into a [C,H,W] image, accumulating where taps overlap.
void col2im_accum(const double* col, int C, int H, int W, int K, int S, int P,
                  int Ho, int Wo, double* img, std::size_t ld) {
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < K; ++ki)
      for (int kj = 0; kj < K; ++kj) {
        const double* row =
            col + ((static_cast<std::size_t>(c) * K + ki) * K + kj) * ld;
        const int lo = ow_lo(P, kj, S), hi = ow_hi(W, P, kj, S, Wo);
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * S - P + ki;
          if (ih < 0 || ih >= H) continue;
          const double* src = row + static_cast<std::size_t>(oh) * Wo;
          double* dst = img + (static_cast<std::size_t>(c) * H + ih) * W - P + kj;
          for (int ow = lo; ow < hi; ++ow) dst[ow * S] += src[ow];
        }
      }
}

// Repacks a tile between the tensor layout [T,C,n] and the matrix layout
// [C, T*n] used by the tiled products.
void gather_ct(const double* tcn, int T, int C, int n, double* ctn) {
  for (int b = 0; b < T; ++b)
    for (int c = 0; c < C; ++c)
      std::memcpy(ctn + (static_cast<std::size_t>(c) * T + b) * n,
                  tcn + (static_cast<std::size_t>(b) * C + c) * n,
                  sizeof(double) * n);
}

void scatter_tc_accum(const double* ctn, int T, int C, int n, double* tcn) {
  for (int b = 0; b < T; ++b)
    for (int c = 0; c < C; ++c) {
      const double* src = ctn + (static_cast<std::size_t>(c) * T + b) * n;
      double* dst = tcn + (static_cast<std::size_t>(b) * C + c) * n;
      for (int i = 0; i < n; ++i) dst[i] += src[i];
    }
}

}  // namespace

Var conv2d(Var x, Var w, Var bias, int kernel, int stride, int pad) {
  Tape& t = *x.tape;
  const Tensor &xv = t.value(x), &wv = t.value(w), &bv = t.value(bias);
  require(xv.ndim() == 4, "conv2d: input must be [B,Cin,H,W]");
  require(wv.ndim() == 4 && wv.dim(2) == static_cast<std::size_t>(kernel) &&
              wv.dim(3) == static_cast<std::size_t>(kernel),
          "conv2d: weight must be [Cout,Cin,K,K]");
  require(wv.dim(1) == xv.dim(1), "conv2d: channel mismatch");
  require(bv.ndim() == 1 && bv.dim(0) == wv.dim(0), "conv2d: bias must be [Cout]");

  const int B = static_cast<int>(xv.dim(0)), Cin = static_cast<int>(xv.dim(1));
  const int H = static_cast<int>(xv.dim(2)), W = static_cast<int>(xv.dim(3));
  const int Cout = static_cast<int>(wv.dim(0));
  const int K = kernel, S = stride, P = pad;
  const int Ho = (H + 2 * P - K) / S + 1, Wo = (W + 2 * P - K) / S + 1;
  require(Ho > 0 && Wo > 0, "conv2d: empty output");
  const int KC = Cin * K * K, OS = Ho * Wo;
  const std::size_t img_in = static_cast<std::size_t>(Cin) * H * W;
  const std::size_t img_out = static_cast<std::size_t>(Cout) * OS;

  Tensor out({static_cast<std::size_t>(B), static_cast<std::size_t>(Cout),
              static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo)});
  std::vector<double> col(static_cast<std::size_t>(KC) * kTile * OS);
  std::vector<double> out_ct(static_cast<std::size_t>(Cout) * kTile * OS);
  for (int b0 = 0; b0 < B; b0 += kTile) {
    const int T = std::min(kTile, B - b0);
    const std::size_t TOS = static_cast<std::size_t>(T) * OS;
    for (int b = 0; b < T; ++b)
      im2col(xv.data.data() + (b0 + b) * img_in, Cin, H, W, K, S, P, Ho, Wo,
             col.data() + static_cast<std::size_t>(b) * OS, TOS);
    // [Cout, KC] x [KC, T*OS] -> [Cout, T*OS]
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, Cout,
                static_cast<int>(TOS), KC, 1.0, wv.data.data(), KC, col.data(),
                static_cast<int>(TOS), 0.0, out_ct.data(),
                static_cast<int>(TOS));
    for (int b = 0; b < T; ++b)
      for (int c = 0; c < Cout; ++c) {
        const double* src =
            out_ct.data() + (static_cast<std::size_t>(c) * T + b) * OS;
        double* dst = out.data.data() + (b0 + b) * img_out +
                      static_cast<std::size_t>(c) * OS;
        const double bc = bv.data[c];
        for (int i = 0; i < OS; ++i) dst[i] = src[i] + bc;
      }
  }

  const int xi = x.id, wi = w.id, bi = bias.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [=](Tape& tp) {
    const auto& go = tp.grad(oi);
    const auto &xv2 = tp.value(xi).data, &wv2 = tp.value(wi).data;
    auto &gx = tp.grad(xi), &gw = tp.grad(wi), &gb = tp.grad(bi);
    std::vector<double> colbuf(static_cast<std::size_t>(KC) * kTile * OS);
    std::vector<double> dcol(static_cast<std::size_t>(KC) * kTile * OS);
    std::vector<double> dout_ct(static_cast<std::size_t>(Cout) * kTile * OS);
    for (int b0 = 0; b0 < B; b0 += kTile) {
      const int T = std::min(kTile, B - b0);
      const std::size_t TOS = static_cast<std::size_t>(T) * OS;
      const double* dout = go.data() + b0 * img_out;
      // dBias: sum over batch and spatial positions.
      for (int b = 0; b < T; ++b)
        for (int c = 0; c < Cout; ++c) {
          const double* plane = dout + b * img_out + static_cast<std::size_t>(c) * OS;
          double s = 0.0;
          for (int i = 0; i < OS; ++i) s += plane[i];
          gb[c] += s;
        }
      gather_ct(dout, T, Cout, OS, dout_ct.data());
      // dW += dOut x col^T
      for (int b = 0; b < T; ++b)
        im2col(xv2.data() + (b0 + b) * img_in, Cin, H, W, K, S, P, Ho, Wo,
               colbuf.data() + static_cast<std::size_t>(b) * OS, TOS);
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, Cout, KC,
                  static_cast<int>(TOS), 1.0, dout_ct.data(),
                  static_cast<int>(TOS), colbuf.data(), static_cast<int>(TOS),
                  1.0, gw.data(), KC);
      // dX += col2im(W^T x dOut)
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, KC,
                  static_cast<int>(TOS), Cout, 1.0, wv2.data(), KC,
                  dout_ct.data(), static_cast<int>(TOS), 0.0, dcol.data(),
                  static_cast<int>(TOS));
      for (int b = 0; b < T; ++b)
        col2im_accum(dcol.data() + static_cast<std::size_t>(b) * OS, Cin, H, W,
                     K, S, P, Ho, Wo, gx.data() + (b0 + b) * img_in, TOS);
    }
  });
}

Var conv2d_transpose(Var x, Var w, Var bias, int kernel, int stride, int pad) {
  Tape& t = *x.tape;
  const Tensor &xv = t.value(x), &wv = t.value(w), &bv = t.value(bias);
  require(xv.ndim() == 4, "conv2d_transpose: input must be [B,Cin,Ho,Wo]");
  require(wv.ndim() == 4 && wv.dim(2) == static_cast<std::size_t>(kernel) &&
              wv.dim(3) == static_cast<std::size_t>(kernel),
          "conv2d_transpose: weight must be [Cin,Cout,K,K]");
  require(wv.dim(0) == xv.dim(1), "conv2d_transpose: channel mismatch");
  require(bv.ndim() == 1 && bv.dim(0) == wv.dim(1),
          "conv2d_transpose: bias must be [Cout]");

  const int B = static_cast<int>(xv.dim(0)), Cin = static_cast<int>(xv.dim(1));
  const int Ho = static_cast<int>(xv.dim(2)), Wo = static_cast<int>(xv.dim(3));
  const int Cout = static_cast<int>(wv.dim(1));
  const int K = kernel, S = stride, P = pad;
  // The transposed convolution producing [H,W] is the data adjoint of a
  // forward convolution [H,W] -> [Ho,Wo] with the same geometry.
  const int H = (Ho - 1) * S - 2 * P + K, W = (Wo - 1) * S - 2 * P + K;
  require(H > 0 && W > 0, "conv2d_transpose: empty output");
  const int KC = Cout * K * K, OS = Ho * Wo;
  const std::size_t img_in = static_cast<std::size_t>(Cin) * OS;
  const std::size_t img_out = static_cast<std::size_t>(Cout) * H * W;

  Tensor out({static_cast<std::size_t>(B), static_cast<std::size_t>(Cout),
              static_cast<std::size_t>(H), static_cast<std::size_t>(W)});
  std::vector<double> x_ct(static_cast<std::size_t>(Cin) * kTile * OS);
  std::vector<double> col(static_cast<std::size_t>(KC) * kTile * OS);
  for (int b0 = 0; b0 < B; b0 += kTile) {
    const int T = std::min(kTile, B - b0);
    const std::size_t TOS = static_cast<std::size_t>(T) * OS;
    // col = W^T x X : [KC, Cin]^T-view x [Cin, T*OS], with W stored [Cin, KC].
    gather_ct(xv.data.data() + b0 * img_in, T, Cin, OS, x_ct.data());
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, KC,
                static_cast<int>(TOS), Cin, 1.0, wv.data.data(), KC,
                x_ct.data(), static_cast<int>(TOS), 0.0, col.data(),
                static_cast<int>(TOS));
    for (int b = 0; b < T; ++b) {
      double* img = out.data.data() + (b0 + b) * img_out;
      col2im_accum(col.data() + static_cast<std::size_t>(b) * OS, Cout, H, W, K,
                   S, P, Ho, Wo, img, TOS);
      for (int c = 0; c < Cout; ++c) {
        double* plane = img + static_cast<std::size_t>(c) * H * W;
        const double bc = bv.data[c];
        for (int i = 0; i < H * W; ++i) plane[i] += bc;
      }
    }
  }

  const int xi = x.id, wi = w.id, bi = bias.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [=](Tape& tp) {
    const auto& go = tp.grad(oi);
    const auto &xv2 = tp.value(xi).data, &wv2 = tp.value(wi).data;
    auto &gx = tp.grad(xi), &gw = tp.grad(wi), &gb = tp.grad(bi);
    std::vector<double> dcol(static_cast<std::size_t>(KC) * kTile * OS);
    std::vector<double> dx_ct(static_cast<std::size_t>(Cin) * kTile * OS);
    std::vector<double> x_ct2(static_cast<std::size_t>(Cin) * kTile * OS);
    for (int b0 = 0; b0 < B; b0 += kTile) {
      const int T = std::min(kTile, B - b0);
      const std::size_t TOS = static_cast<std::size_t>(T) * OS;
      for (int b = 0; b < T; ++b) {
        const double* dout = go.data() + (b0 + b) * img_out;
        for (int c = 0; c < Cout; ++c) {
          double s = 0.0;
          const double* plane = dout + static_cast<std::size_t>(c) * H * W;
          for (int i = 0; i < H * W; ++i) s += plane[i];
          gb[c] += s;
        }
        // dcol = im2col(dOut); then dX += W x dcol and dW += X x dcol^T.
        im2col(dout, Cout, H, W, K, S, P, Ho, Wo,
               dcol.data() + static_cast<std::size_t>(b) * OS, TOS);
      }
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, Cin,
                  static_cast<int>(TOS), KC, 1.0, wv2.data(), KC, dcol.data(),
                  static_cast<int>(TOS), 0.0, dx_ct.data(),
                  static_cast<int>(TOS));
      scatter_tc_accum(dx_ct.data(), T, Cin, OS, gx.data() + b0 * img_in);
      gather_ct(xv2.data() + b0 * img_in, T, Cin, OS, x_ct2.data());
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, Cin, KC,
                  static_cast<int>(TOS), 1.0, x_ct2.data(),
                  static_cast<int>(TOS), dcol.data(), static_cast<int>(TOS),
                  1.0, gw.data(), KC);
    }
  });
}

}  // namespace sitar::ad
