#pragma once

// Forward and backward kernels for the ops the denoiser needs. Every kernel is
// a pure function of its inputs. Batch loops run through parallel_for and any
// reduction across the batch happens in sample order, so results do not
// depend on the worker count.

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

#include "crdiff/parallel.hpp"
#include "crdiff/tensor.hpp"

namespace crdiff::kernels {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw InputError(msg);
}

inline void require_rank4(const Shape& s, const char* what) {
  require(s.size() == 4, std::string(what) + ": expected rank-4 tensor, got " + shape_str(s));
  // batch may be empty; spatial and channel extents may not
  for (std::size_t i = 1; i < s.size(); ++i)
    require(s[i] > 0, std::string(what) + ": non-positive extent in " + shape_str(s));
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation)

struct ConvGeom {
  int n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  int k() const { return cin * kh * kw; }
  int p() const { return ho * wo; }
};

inline ConvGeom conv_geometry(const Shape& xs, const Shape& ws, std::size_t bias_len, int stride, int pad) {
  require_rank4(xs, "conv2d input");
  require(ws.size() == 4, "conv2d kernel: expected rank-4, got " + shape_str(ws));
  require(stride >= 1 && pad >= 0, "conv2d: stride must be >= 1 and padding >= 0");
  require(ws[1] == xs[1], "conv2d: kernel expects " + std::to_string(ws[1]) + " input channels, input has " +
                              std::to_string(xs[1]));
  require(bias_len == static_cast<std::size_t>(ws[0]), "conv2d: bias length does not match output channels");
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, pad, 0, 0};
  const int sh = g.h + 2 * pad - g.kh;
  const int sw = g.w + 2 * pad - g.kw;
  require(sh >= 0 && sw >= 0, "conv2d: kernel larger than padded input");
  require(sh % stride == 0 && sw % stride == 0, "conv2d: stride does not divide padded extent exactly");
  g.ho = sh / stride + 1;
  g.wo = sw / stride + 1;
  return g;
}

// cols is (K x ld) row-major; sample columns start at col_offset.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols, int ld, int col_offset) {
  for (int ci = 0; ci < g.cin; ++ci)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = cols + static_cast<std::size_t>((ci * g.kh + ky) * g.kw + kx) * ld + col_offset;
        const T* plane = x + static_cast<std::size_t>(ci) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          T* out = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, T(0));
            continue;
          }
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            out[ox] = (ix >= 0 && ix < g.w) ? plane[iy * g.w + ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* gx) {
  const int ld = g.p();
  for (int ci = 0; ci < g.cin; ++ci)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + static_cast<std::size_t>((ci * g.kh + ky) * g.kw + kx) * ld;
        T* plane = gx + static_cast<std::size_t>(ci) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b, int stride,
                      int pad) {
  const ConvGeom g = conv_geometry(x.shape(), w.shape(), b.size(), stride, pad);
  BasicTensor<T> y({g.n, g.cout, g.ho, g.wo});
  CMapR<T> wm(w.ptr(), g.cout, g.k());
  parallel_for(g.n, [&](int n) {
    MatR<T> cols(g.k(), g.p());
    im2col(x.ptr() + static_cast<std::size_t>(n) * g.cin * g.h * g.w, g, cols.data(), g.p(), 0);
    MapR<T> ym(y.ptr() + static_cast<std::size_t>(n) * g.cout * g.p(), g.cout, g.p());
    ym.noalias() = wm * cols;
    for (int co = 0; co < g.cout; ++co) ym.row(co).array() += b[static_cast<std::size_t>(co)];
  });
  return y;
}

/// Any of gx/gw/gb may be null. Gradients are accumulated (+=).
template <typename T>
void conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& gy, int stride,
                     int pad, BasicTensor<T>* gx, BasicTensor<T>* gw, BasicTensor<T>* gb) {
  const ConvGeom g = conv_geometry(x.shape(), w.shape(), static_cast<std::size_t>(w.dim(0)), stride, pad);
  const int P = g.p();
  const int K = g.k();
  CMapR<T> wm(w.ptr(), g.cout, K);
  if (gw != nullptr) {
    // One GEMM over the whole batch: gW = gY_all (Cout x N*P) * cols_all^T.
    MatR<T> cols(K, static_cast<Eigen::Index>(g.n) * P);
    MatR<T> gyall(g.cout, static_cast<Eigen::Index>(g.n) * P);
    parallel_for(g.n, [&](int n) {
      im2col(x.ptr() + static_cast<std::size_t>(n) * g.cin * g.h * g.w, g, cols.data(), g.n * P, n * P);
      CMapR<T> gyn(gy.ptr() + static_cast<std::size_t>(n) * g.cout * P, g.cout, P);
      gyall.block(0, static_cast<Eigen::Index>(n) * P, g.cout, P) = gyn;
    });
    MapR<T> gwm(gw->ptr(), g.cout, K);
    MatR<T> prod = gyall * cols.transpose();
    gwm += prod;
  }
  if (gb != nullptr) {
    for (int n = 0; n < g.n; ++n)
      for (int co = 0; co < g.cout; ++co) {
        const T* src = gy.ptr() + (static_cast<std::size_t>(n) * g.cout + co) * P;
        double s = 0;
        for (int i = 0; i < P; ++i) s += src[i];
        (*gb)[static_cast<std::size_t>(co)] += static_cast<T>(s);
      }
  }
  if (gx != nullptr) {
    parallel_for(g.n, [&](int n) {
      CMapR<T> gyn(gy.ptr() + static_cast<std::size_t>(n) * g.cout * P, g.cout, P);
      MatR<T> gcols = wm.transpose() * gyn;
      col2im_add(gcols.data(), g, gx->ptr() + static_cast<std::size_t>(n) * g.cin * g.h * g.w);
    });
  }
}

// ---------------------------------------------------------------------------
// group norm

struct GroupNormStats {
  std::vector<double> mean;  // [N*G]
  std::vector<double> rstd;  // [N*G]
};

template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, int groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps, GroupNormStats* stats = nullptr) {
  require_rank4(x.shape(), "group_norm input");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(groups >= 1 && C % groups == 0, "group_norm: channels " + std::to_string(C) +
                                              " not divisible by groups " + std::to_string(groups));
  require(gamma.size() == static_cast<std::size_t>(C) && beta.size() == static_cast<std::size_t>(C),
          "group_norm: affine parameters must have one entry per channel");
  require(eps > 0, "group_norm: eps must be positive");
  const int cg = C / groups;
  const std::size_t m = static_cast<std::size_t>(cg) * HW;
  BasicTensor<T> y(x.shape());
  GroupNormStats local;
  GroupNormStats& st = stats ? *stats : local;
  st.mean.assign(static_cast<std::size_t>(N) * groups, 0.0);
  st.rstd.assign(static_cast<std::size_t>(N) * groups, 0.0);
  parallel_for(N, [&](int n) {
    for (int g = 0; g < groups; ++g) {
      const T* src = x.ptr() + (static_cast<std::size_t>(n) * C + g * cg) * HW;
      double s = 0;
      for (std::size_t i = 0; i < m; ++i) s += src[i];
      const double mu = s / static_cast<double>(m);
      double v = 0;
      for (std::size_t i = 0; i < m; ++i) v += (src[i] - mu) * (src[i] - mu);
      const double rstd = 1.0 / std::sqrt(v / static_cast<double>(m) + eps);
      st.mean[static_cast<std::size_t>(n) * groups + g] = mu;
      st.rstd[static_cast<std::size_t>(n) * groups + g] = rstd;
      T* dst = y.ptr() + (static_cast<std::size_t>(n) * C + g * cg) * HW;
      for (int c = 0; c < cg; ++c) {
        const double ga = gamma[static_cast<std::size_t>(g * cg + c)];
        const double be = beta[static_cast<std::size_t>(g * cg + c)];
        for (int i = 0; i < HW; ++i) {
          const std::size_t j = static_cast<std::size_t>(c) * HW + i;
          dst[j] = static_cast<T>((src[j] - mu) * rstd * ga + be);
        }
      }
    }
  });
  return y;
}

template <typename T>
void group_norm_backward(const BasicTensor<T>& x, int groups, const BasicTensor<T>& gamma,
                         const GroupNormStats& st, const BasicTensor<T>& gy, BasicTensor<T>* gx,
                         BasicTensor<T>* ggamma, BasicTensor<T>* gbeta) {
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const int cg = C / groups;
  const double m = static_cast<double>(cg) * HW;
  // per-(n, c) partial sums, reduced over n in order afterwards
  std::vector<double> dgam(static_cast<std::size_t>(N) * C, 0.0), dbet(static_cast<std::size_t>(N) * C, 0.0);
  parallel_for(N, [&](int n) {
    for (int g = 0; g < groups; ++g) {
      const double mu = st.mean[static_cast<std::size_t>(n) * groups + g];
      const double rstd = st.rstd[static_cast<std::size_t>(n) * groups + g];
      const std::size_t base = (static_cast<std::size_t>(n) * C + g * cg) * HW;
      double sum_gh = 0, sum_gh_xh = 0;
      for (int c = 0; c < cg; ++c) {
        const std::size_t ch = static_cast<std::size_t>(g * cg + c);
        const double ga = gamma[ch];
        double dg = 0, db = 0;
        for (int i = 0; i < HW; ++i) {
          const std::size_t j = base + static_cast<std::size_t>(c) * HW + i;
          const double xh = (x[j] - mu) * rstd;
          dg += gy[j] * xh;
          db += gy[j];
          const double gh = gy[j] * ga;
          sum_gh += gh;
          sum_gh_xh += gh * xh;
        }
        dgam[static_cast<std::size_t>(n) * C + ch] = dg;
        dbet[static_cast<std::size_t>(n) * C + ch] = db;
      }
      if (gx == nullptr) continue;
      for (int c = 0; c < cg; ++c) {
        const double ga = gamma[static_cast<std::size_t>(g * cg + c)];
        for (int i = 0; i < HW; ++i) {
          const std::size_t j = base + static_cast<std::size_t>(c) * HW + i;
          const double xh = (x[j] - mu) * rstd;
          const double gh = gy[j] * ga;
          (*gx)[j] += static_cast<T>(rstd * (gh - sum_gh / m - xh * sum_gh_xh / m));
        }
      }
    }
  });
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      if (ggamma) (*ggamma)[static_cast<std::size_t>(c)] += static_cast<T>(dgam[static_cast<std::size_t>(n) * C + c]);
      if (gbeta) (*gbeta)[static_cast<std::size_t>(c)] += static_cast<T>(dbet[static_cast<std::size_t>(n) * C + c]);
    }
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

template <typename T>
void silu_backward(const BasicTensor<T>& x, const BasicTensor<T>& gy, BasicTensor<T>& gx) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T s = sigmoid(x[i]);
    gx[i] += gy[i] * (s * (T(1) + x[i] * (T(1) - s)));
  }
}

// ---------------------------------------------------------------------------
// resampling

template <typename T>
BasicTensor<T> avg_pool2(const BasicTensor<T>& x) {
  require_rank4(x.shape(), "avg_pool2");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0 && H >= 2 && W >= 2, "avg_pool2: extents must be even, got " + shape_str(x.shape()));
  BasicTensor<T> y({N, C, H / 2, W / 2});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H / 2; ++i)
        for (int j = 0; j < W / 2; ++j)
          y.at4(n, c, i, j) = (x.at4(n, c, 2 * i, 2 * j) + x.at4(n, c, 2 * i, 2 * j + 1) +
                               x.at4(n, c, 2 * i + 1, 2 * j) + x.at4(n, c, 2 * i + 1, 2 * j + 1)) *
                              T(0.25);
  return y;
}

template <typename T>
void avg_pool2_backward(const BasicTensor<T>& gy, BasicTensor<T>& gx) {
  const int N = gy.dim(0), C = gy.dim(1), h = gy.dim(2), w = gy.dim(3);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const T g = gy.at4(n, c, i, j) * T(0.25);
          gx.at4(n, c, 2 * i, 2 * j) += g;
          gx.at4(n, c, 2 * i, 2 * j + 1) += g;
          gx.at4(n, c, 2 * i + 1, 2 * j) += g;
          gx.at4(n, c, 2 * i + 1, 2 * j + 1) += g;
        }
}

template <typename T>
BasicTensor<T> upsample2(const BasicTensor<T>& x) {
  require_rank4(x.shape(), "upsample2");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  BasicTensor<T> y({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < 2 * H; ++i)
        for (int j = 0; j < 2 * W; ++j) y.at4(n, c, i, j) = x.at4(n, c, i / 2, j / 2);
  return y;
}

template <typename T>
void upsample2_backward(const BasicTensor<T>& gy, BasicTensor<T>& gx) {
  const int N = gy.dim(0), C = gy.dim(1), H = gy.dim(2), W = gy.dim(3);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) gx.at4(n, c, i / 2, j / 2) += gy.at4(n, c, i, j);
}

/// One output pixel of a bilinear resize: up to four weighted taps into the source grid.
struct BilinearTap {
  int y0, y1, x0, x1;
  double wy, wx;  // weight of the y1 / x1 taps
};

// Half-pixel centres, edge clamped.
inline std::vector<BilinearTap> bilinear_taps(int hin, int win, int hout, int wout) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(hout) * wout);
  auto axis = [](int out_i, int n_in, int n_out, int& i0, int& i1, double& frac) {
    double src = (out_i + 0.5) * static_cast<double>(n_in) / n_out - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
    i0 = static_cast<int>(std::floor(src));
    i1 = std::min(i0 + 1, n_in - 1);
    frac = src - i0;
  };
  for (int i = 0; i < hout; ++i)
    for (int j = 0; j < wout; ++j) {
      BilinearTap& t = taps[static_cast<std::size_t>(i) * wout + j];
      axis(i, hin, hout, t.y0, t.y1, t.wy);
      axis(j, win, wout, t.x0, t.x1, t.wx);
    }
  return taps;
}

/// Resizes a (C, H, W) map. Returns an exact copy when extents already match.
template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& x, int hout, int wout) {
  require(x.rank() == 3, "bilinear_resize: expected (C,H,W), got " + shape_str(x.shape()));
  require(hout > 0 && wout > 0, "bilinear_resize: target extents must be positive");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H == hout && W == wout) return x;
  const auto taps = bilinear_taps(H, W, hout, wout);
  BasicTensor<T> y({C, hout, wout});
  for (int c = 0; c < C; ++c) {
    const T* src = x.ptr() + static_cast<std::size_t>(c) * H * W;
    T* dst = y.ptr() + static_cast<std::size_t>(c) * hout * wout;
    for (std::size_t p = 0; p < taps.size(); ++p) {
      const BilinearTap& t = taps[p];
      const double top = src[t.y0 * W + t.x0] * (1 - t.wx) + src[t.y0 * W + t.x1] * t.wx;
      const double bot = src[t.y1 * W + t.x0] * (1 - t.wx) + src[t.y1 * W + t.x1] * t.wx;
      dst[p] = static_cast<T>(top * (1 - t.wy) + bot * t.wy);
    }
  }
  return y;
}

template <typename T>
void bilinear_resize_backward(const Shape& in_shape, const BasicTensor<T>& gy, BasicTensor<T>& gx) {
  const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
  const int hout = gy.dim(1), wout = gy.dim(2);
  if (H == hout && W == wout) {
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    return;
  }
  const auto taps = bilinear_taps(H, W, hout, wout);
  for (int c = 0; c < C; ++c) {
    const T* g = gy.ptr() + static_cast<std::size_t>(c) * hout * wout;
    T* dst = gx.ptr() + static_cast<std::size_t>(c) * H * W;
    for (std::size_t p = 0; p < taps.size(); ++p) {
      const BilinearTap& t = taps[p];
      const double v = g[p];
      dst[t.y0 * W + t.x0] += static_cast<T>(v * (1 - t.wy) * (1 - t.wx));
      dst[t.y0 * W + t.x1] += static_cast<T>(v * (1 - t.wy) * t.wx);
      dst[t.y1 * W + t.x0] += static_cast<T>(v * t.wy * (1 - t.wx));
      dst[t.y1 * W + t.x1] += static_cast<T>(v * t.wy * t.wx);
    }
  }
}

// ---------------------------------------------------------------------------
// dense layers

/// y = x W^T + b with x (N, in), W (out, in), b (out).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  require(x.rank() == 2 && w.rank() == 2, "linear: expected (N,in) input and (out,in) weight");
  require(x.dim(1) == w.dim(1), "linear: input width " + std::to_string(x.dim(1)) + " != weight width " +
                                    std::to_string(w.dim(1)));
  require(b.size() == static_cast<std::size_t>(w.dim(0)), "linear: bias length mismatch");
  const int N = x.dim(0), in = x.dim(1), out = w.dim(0);
  BasicTensor<T> y({N, out});
  MapR<T> ym(y.ptr(), N, out);
  ym.noalias() = CMapR<T>(x.ptr(), N, in) * CMapR<T>(w.ptr(), out, in).transpose();
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < out; ++o) ym(n, o) += b[static_cast<std::size_t>(o)];
  return y;
}

template <typename T>
void linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& gy,
                     BasicTensor<T>* gx, BasicTensor<T>* gw, BasicTensor<T>* gb) {
  const int N = x.dim(0), in = x.dim(1), out = w.dim(0);
  CMapR<T> gym(gy.ptr(), N, out);
  if (gx) MapR<T>(gx->ptr(), N, in) += gym * CMapR<T>(w.ptr(), out, in);
  if (gw) {
    MatR<T> prod = gym.transpose() * CMapR<T>(x.ptr(), N, in);
    MapR<T>(gw->ptr(), out, in) += prod;
  }
  if (gb)
    for (int o = 0; o < out; ++o) {
      double s = 0;
      for (int n = 0; n < N; ++n) s += gym(n, o);
      (*gb)[static_cast<std::size_t>(o)] += static_cast<T>(s);
    }
}

// ---------------------------------------------------------------------------
// single-head spatial self-attention with a learned positional map

template <typename T>
struct AttentionSaved {
  BasicTensor<T> pos;           // resized positional map (C, H, W)
  std::vector<MatR<T>> probs;   // per sample (L, L) softmax rows
};

inline void check_attention_shapes(const Shape& xs, const Shape& wq, const Shape& wk, const Shape& wv,
                                   const Shape& wo, const Shape& pos) {
  require_rank4(xs, "attention2d input");
  const int C = xs[1];
  for (const Shape* s : {&wq, &wk, &wv, &wo})
    require(s->size() == 2 && (*s)[0] == C && (*s)[1] == C,
            "attention2d: projection shape " + shape_str(*s) + " does not match " + std::to_string(C) + " channels");
  require(pos.size() == 3 && pos[0] == C, "attention2d: positional map " + shape_str(pos) +
                                               " does not match " + std::to_string(C) + " channels");
}

template <typename T>
BasicTensor<T> attention2d(const BasicTensor<T>& x, const BasicTensor<T>& wq, const BasicTensor<T>& wk,
                           const BasicTensor<T>& wv, const BasicTensor<T>& wo, const BasicTensor<T>& pos_emb,
                           AttentionSaved<T>* saved = nullptr) {
  check_attention_shapes(x.shape(), wq.shape(), wk.shape(), wv.shape(), wo.shape(), pos_emb.shape());
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), L = H * W;
  BasicTensor<T> pos = bilinear_resize(pos_emb, H, W);
  CMapR<T> P(pos.ptr(), C, L);
  CMapR<T> Wq(wq.ptr(), C, C), Wk(wk.ptr(), C, C), Wv(wv.ptr(), C, C), Wo(wo.ptr(), C, C);
  const T scale = T(1) / std::sqrt(static_cast<T>(C));
  BasicTensor<T> y(x.shape());
  std::vector<MatR<T>> probs(saved ? static_cast<std::size_t>(N) : 0);
  parallel_for(N, [&](int n) {
    const std::size_t off = static_cast<std::size_t>(n) * C * L;
    MatR<T> X = CMapR<T>(x.ptr() + off, C, L) + P;
    MatR<T> Q = Wq * X, K = Wk * X, V = Wv * X;
    MatR<T> S = (Q.transpose() * K) * scale;  // (L, L): row i = query i
    for (int i = 0; i < L; ++i) {
      const T mx = S.row(i).maxCoeff();
      S.row(i) = (S.row(i).array() - mx).exp();
      S.row(i) /= S.row(i).sum();
    }
    MatR<T> O = V * S.transpose();
    MapR<T>(y.ptr() + off, C, L) = CMapR<T>(x.ptr() + off, C, L) + Wo * O;
    if (saved) probs[static_cast<std::size_t>(n)] = std::move(S);
  });
  if (saved) {
    saved->pos = std::move(pos);
    saved->probs = std::move(probs);
  }
  return y;
}

template <typename T>
void attention2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& wq, const BasicTensor<T>& wk,
                          const BasicTensor<T>& wv, const BasicTensor<T>& wo, const BasicTensor<T>& pos_emb,
                          const AttentionSaved<T>& saved, const BasicTensor<T>& gy, BasicTensor<T>* gx,
                          BasicTensor<T>* gwq, BasicTensor<T>* gwk, BasicTensor<T>* gwv, BasicTensor<T>* gwo,
                          BasicTensor<T>* gpos) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), L = H * W;
  CMapR<T> P(saved.pos.ptr(), C, L);
  CMapR<T> Wq(wq.ptr(), C, C), Wk(wk.ptr(), C, C), Wv(wv.ptr(), C, C), Wo(wo.ptr(), C, C);
  const T scale = T(1) / std::sqrt(static_cast<T>(C));
  // per-sample weight/positional partials, summed in sample order below
  std::vector<MatR<T>> dq(N), dk(N), dv(N), dwo(N), dX(N);
  parallel_for(N, [&](int n) {
    const std::size_t off = static_cast<std::size_t>(n) * C * L;
    MatR<T> X = CMapR<T>(x.ptr() + off, C, L) + P;
    MatR<T> Q = Wq * X, K = Wk * X, V = Wv * X;
    const MatR<T>& A = saved.probs[static_cast<std::size_t>(n)];
    MatR<T> O = V * A.transpose();
    CMapR<T> G(gy.ptr() + off, C, L);
    MatR<T> dO = Wo.transpose() * G;
    MatR<T> dV = dO * A;
    MatR<T> dA = dO.transpose() * V;  // (L, L)
    MatR<T> dS(L, L);
    for (int i = 0; i < L; ++i) {
      const T dot = (dA.row(i).array() * A.row(i).array()).sum();
      dS.row(i) = A.row(i).array() * (dA.row(i).array() - dot);
    }
    dS *= scale;
    MatR<T> dQ = K * dS.transpose();
    MatR<T> dK = Q * dS;
    dwo[n] = G * O.transpose();
    dq[n] = dQ * X.transpose();
    dk[n] = dK * X.transpose();
    dv[n] = dV * X.transpose();
    dX[n] = Wq.transpose() * dQ + Wk.transpose() * dK + Wv.transpose() * dV;
    if (gx) MapR<T>(gx->ptr() + off, C, L) += G + dX[n];
  });
  auto reduce = [&](std::vector<MatR<T>>& parts, BasicTensor<T>* dst) {
    if (!dst) return;
    MapR<T> D(dst->ptr(), C, C);
    for (int n = 0; n < N; ++n) D += parts[static_cast<std::size_t>(n)];
  };
  reduce(dq, gwq);
  reduce(dk, gwk);
  reduce(dv, gwv);
  reduce(dwo, gwo);
  if (gpos) {
    BasicTensor<T> gp({C, H, W});
    MapR<T> GP(gp.ptr(), C, L);
    for (int n = 0; n < N; ++n) GP += dX[static_cast<std::size_t>(n)];
    bilinear_resize_backward(pos_emb.shape(), gp, *gpos);
  }
}

}  // namespace crdiff::kernels
