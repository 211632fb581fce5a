#pragma once

// Minimal deterministic CNN kernel for the learned update blocks: NCHW
// tensors, 3x3 same-padding convolution, group normalization, ReLU, the
// residual update block, Adam, and a cosine learning-rate schedule. All
// layers carry hand-written reverse-mode gradients. The scalar type is a
// template parameter: float is the production precision, double is the
// verification mode used by the finite-difference tests. Reductions
// accumulate in double either way so training trajectories are bit-stable.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qpat/common.hpp"
#include "qpat/rng.hpp"

namespace qpat {

namespace nn_detail {

// fixed-order 16-lane accumulator: vectorizes reductions without
// reassociating the summation order between runs, so results are
// bit-reproducible. An accumulator can be threaded across several
// row segments before taking the total.
template <typename T>
struct LaneAcc {
  T s[16] = {};

  void dot(const T* a, const T* b, int n) {
    T loc[16] = {};
    int k = 0;
    for (; k + 16 <= n; k += 16)
      for (int l = 0; l < 16; ++l) loc[l] += a[k + l] * b[k + l];
    for (; k < n; ++k) loc[0] += a[k] * b[k];
    for (int l = 0; l < 16; ++l) s[l] += loc[l];
  }
  void sum(const T* a, int n) {
    T loc[16] = {};
    int k = 0;
    for (; k + 16 <= n; k += 16)
      for (int l = 0; l < 16; ++l) loc[l] += a[k + l];
    for (; k < n; ++k) loc[0] += a[k];
    for (int l = 0; l < 16; ++l) s[l] += loc[l];
  }
  void sumsq_dev(const T* a, int n, T mean) {
    T loc[16] = {};
    int k = 0;
    for (; k + 16 <= n; k += 16)
      for (int l = 0; l < 16; ++l) {
        const T d = a[k + l] - mean;
        loc[l] += d * d;
      }
    for (; k < n; ++k) {
      const T d = a[k] - mean;
      loc[0] += d * d;
    }
    for (int l = 0; l < 16; ++l) s[l] += loc[l];
  }
  double total() const {
    double t[8];
    for (int l = 0; l < 8; ++l) t[l] = double(s[2 * l]) + double(s[2 * l + 1]);
    return ((t[0] + t[1]) + (t[2] + t[3])) + ((t[4] + t[5]) + (t[6] + t[7]));
  }
};

template <typename T>
inline double lane_dot(const T* a, const T* b, int n) {
  LaneAcc<T> acc;
  acc.dot(a, b, n);
  return acc.total();
}

template <typename T>
inline double lane_sum(const T* a, int n) {
  LaneAcc<T> acc;
  acc.sum(a, n);
  return acc.total();
}

// smallest k >= k0 with k % w == col
inline int first_col_ge(int k0, int w, int col) {
  return k0 + (col - k0 % w + w) % w;
}

// A 3x3 tap couples output pixel k with input pixel k + off where
// off = dy*w + dx. Over the flattened plane the in-bounds k range is
// [max(0,-off), n - max(0,off)); the only spurious pairs left in that
// range are the ones where dx wraps across a row boundary, i.e. the
// k with k % w == w-1 (dx = +1) or k % w == 0 (dx = -1). Each tap is
// therefore one long contiguous pass plus at most h-1 scalar fixups.
struct TapSpan {
  int off, k0, k1, wrap0, wrap_step;  // wrap0 < 0: nothing to fix up
  TapSpan(int dy, int dx, int h, int w, int n) {
    off = dy * w + dx;
    k0 = std::max(0, -off);
    k1 = n - std::max(0, off);
    wrap_step = w;
    wrap0 = dx == 0 ? -1 : first_col_ge(k0, w, dx > 0 ? w - 1 : 0);
    if (h - std::abs(dy) <= 0 || w - std::abs(dx) <= 0) k1 = k0;  // empty
  }
};

// four dot products sharing one left-hand stream, fixed lane order
template <typename T>
inline void lane_dot4(const T* g, const T* x0, const T* x1, const T* x2,
                      const T* x3, int n, double out[4]) {
  T l0[16] = {}, l1[16] = {}, l2[16] = {}, l3[16] = {};
  int k = 0;
  for (; k + 16 <= n; k += 16)
    for (int l = 0; l < 16; ++l) {
      const T gv = g[k + l];
      l0[l] += gv * x0[k + l];
      l1[l] += gv * x1[k + l];
      l2[l] += gv * x2[k + l];
      l3[l] += gv * x3[k + l];
    }
  for (; k < n; ++k) {
    const T gv = g[k];
    l0[0] += gv * x0[k];
    l1[0] += gv * x1[k];
    l2[0] += gv * x2[k];
    l3[0] += gv * x3[k];
  }
  auto tot = [](const T* s) {
    double t[8];
    for (int l = 0; l < 8; ++l) t[l] = double(s[2 * l]) + double(s[2 * l + 1]);
    return ((t[0] + t[1]) + (t[2] + t[3])) + ((t[4] + t[5]) + (t[6] + t[7]));
  };
  out[0] = tot(l0);
  out[1] = tot(l1);
  out[2] = tot(l2);
  out[3] = tot(l3);
}

}  // namespace nn_detail

template <typename T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_),
        v(std::size_t(n_) * c_ * h_ * w_, T(0)) {}

  std::size_t size() const { return v.size(); }
  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  T* plane(int i, int j) { return v.data() + (std::size_t(i) * c + j) * h * w; }
  const T* plane(int i, int j) const {
    return v.data() + (std::size_t(i) * c + j) * h * w;
  }
  T& at(int i, int j, int y, int x) { return plane(i, j)[y * w + x]; }
  T at(int i, int j, int y, int x) const { return plane(i, j)[y * w + x]; }

  bool finite() const {
    for (const T& x : v)
      if (!std::isfinite(double(x))) return false;
    return true;
  }
};

// 3x3 convolution, stride 1, zero ("same") padding, with bias
template <typename T>
struct Conv2d {
  int in_c = 0, out_c = 0;
  std::vector<T> w, b;    // [out_c][in_c][3][3], [out_c]
  std::vector<T> gw, gb;  // accumulated parameter gradients

  Conv2d(int ic, int oc)
      : in_c(ic), out_c(oc), w(std::size_t(oc) * ic * 9, T(0)), b(oc, T(0)),
        gw(w.size(), T(0)), gb(oc, T(0)) {}

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.c != in_c)
      throw std::invalid_argument("conv2d: input has " + std::to_string(x.c) +
                                  " channels, expected " +
                                  std::to_string(in_c));
    x_ = x;
    Tensor<T> y(x.n, out_c, x.h, x.w);
    const int H = x.h, W = x.w, N = H * W;
    for (int i = 0; i < x.n; ++i)
      for (int oc = 0; oc < out_c; ++oc) {
        T* yp = y.plane(i, oc);
        const T bias = b[std::size_t(oc)];
        for (int k = 0; k < N; ++k) yp[k] = bias;
        const T* wb = w.data() + std::size_t(oc) * in_c * 9;
        for (int t = 0; t < 9; ++t) {
          const nn_detail::TapSpan sp(t / 3 - 1, t % 3 - 1, H, W, N);
          if (sp.k1 <= sp.k0) continue;
          int ic = 0;
          for (; ic + 4 <= in_c; ic += 4) {
            const T w0 = wb[ic * 9 + t], w1 = wb[(ic + 1) * 9 + t];
            const T w2 = wb[(ic + 2) * 9 + t], w3 = wb[(ic + 3) * 9 + t];
            if (w0 == T(0) && w1 == T(0) && w2 == T(0) && w3 == T(0)) continue;
            const T* x0 = x.plane(i, ic) + sp.off;
            const T* x1 = x.plane(i, ic + 1) + sp.off;
            const T* x2 = x.plane(i, ic + 2) + sp.off;
            const T* x3 = x.plane(i, ic + 3) + sp.off;
            for (int k = sp.k0; k < sp.k1; ++k)
              yp[k] += w0 * x0[k] + w1 * x1[k] + w2 * x2[k] + w3 * x3[k];
            if (sp.wrap0 >= 0)
              for (int k = sp.wrap0; k < sp.k1; k += sp.wrap_step)
                yp[k] -= w0 * x0[k] + w1 * x1[k] + w2 * x2[k] + w3 * x3[k];
          }
          for (; ic < in_c; ++ic) {
            const T wv = wb[ic * 9 + t];
            if (wv == T(0)) continue;
            const T* xs = x.plane(i, ic) + sp.off;
            for (int k = sp.k0; k < sp.k1; ++k) yp[k] += wv * xs[k];
            if (sp.wrap0 >= 0)
              for (int k = sp.wrap0; k < sp.k1; k += sp.wrap_step)
                yp[k] -= wv * xs[k];
          }
        }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    if (gy.n != x_.n || gy.c != out_c || gy.h != x_.h || gy.w != x_.w)
      throw std::invalid_argument("conv2d: cotangent shape mismatch");
    Tensor<T> gx(x_.n, in_c, x_.h, x_.w);
    const int H = x_.h, W = x_.w, N = H * W;
    for (int i = 0; i < x_.n; ++i) {
      // bias and weight gradients: dots against the cached input
      for (int oc = 0; oc < out_c; ++oc) {
        const T* gp = gy.plane(i, oc);
        gb[std::size_t(oc)] += T(nn_detail::lane_sum(gp, N));
        T* gwb = gw.data() + std::size_t(oc) * in_c * 9;
        for (int t = 0; t < 9; ++t) {
          const nn_detail::TapSpan sp(t / 3 - 1, t % 3 - 1, H, W, N);
          if (sp.k1 <= sp.k0) continue;
          int ic = 0;
          for (; ic + 4 <= in_c; ic += 4) {
            const T* x0 = x_.plane(i, ic) + sp.off;
            const T* x1 = x_.plane(i, ic + 1) + sp.off;
            const T* x2 = x_.plane(i, ic + 2) + sp.off;
            const T* x3 = x_.plane(i, ic + 3) + sp.off;
            double d[4];
            nn_detail::lane_dot4(gp + sp.k0, x0 + sp.k0, x1 + sp.k0,
                                 x2 + sp.k0, x3 + sp.k0, sp.k1 - sp.k0, d);
            if (sp.wrap0 >= 0)
              for (int k = sp.wrap0; k < sp.k1; k += sp.wrap_step) {
                const double gv = double(gp[k]);
                d[0] -= gv * double(x0[k]);
                d[1] -= gv * double(x1[k]);
                d[2] -= gv * double(x2[k]);
                d[3] -= gv * double(x3[k]);
              }
            for (int j = 0; j < 4; ++j) gwb[(ic + j) * 9 + t] += T(d[j]);
          }
          for (; ic < in_c; ++ic) {
            const T* xs = x_.plane(i, ic) + sp.off;
            nn_detail::LaneAcc<T> acc;
            acc.dot(gp + sp.k0, xs + sp.k0, sp.k1 - sp.k0);
            double wg = acc.total();
            if (sp.wrap0 >= 0)
              for (int k = sp.wrap0; k < sp.k1; k += sp.wrap_step)
                wg -= double(gp[k]) * double(xs[k]);
            gwb[ic * 9 + t] += T(wg);
          }
        }
      }
      // input gradients: transposed stencil, fused over output channels
      for (int ic = 0; ic < in_c; ++ic) {
        T* gxp = gx.plane(i, ic);
        for (int t = 0; t < 9; ++t) {
          const nn_detail::TapSpan sp(t / 3 - 1, t % 3 - 1, H, W, N);
          if (sp.k1 <= sp.k0) continue;
          T* gxs = gxp + sp.off;
          int oc = 0;
          for (; oc + 4 <= out_c; oc += 4) {
            const T w0 = w[(std::size_t(oc) * in_c + ic) * 9 + t];
            const T w1 = w[(std::size_t(oc + 1) * in_c + ic) * 9 + t];
            const T w2 = w[(std::size_t(oc + 2) * in_c + ic) * 9 + t];
            const T w3 = w[(std::size_t(oc + 3) * in_c + ic) * 9 + t];
            if (w0 == T(0) && w1 == T(0) && w2 == T(0) && w3 == T(0)) continue;
            const T* g0 = gy.plane(i, oc);
            const T* g1 = gy.plane(i, oc + 1);
            const T* g2 = gy.plane(i, oc + 2);
            const T* g3 = gy.plane(i, oc + 3);
            for (int k = sp.k0; k < sp.k1; ++k)
              gxs[k] += w0 * g0[k] + w1 * g1[k] + w2 * g2[k] + w3 * g3[k];
            if (sp.wrap0 >= 0)
              for (int k = sp.wrap0; k < sp.k1; k += sp.wrap_step)
                gxs[k] -= w0 * g0[k] + w1 * g1[k] + w2 * g2[k] + w3 * g3[k];
          }
          for (; oc < out_c; ++oc) {
            const T wv = w[(std::size_t(oc) * in_c + ic) * 9 + t];
            if (wv == T(0)) continue;
            const T* gp = gy.plane(i, oc);
            for (int k = sp.k0; k < sp.k1; ++k) gxs[k] += wv * gp[k];
            if (sp.wrap0 >= 0)
              for (int k = sp.wrap0; k < sp.k1; k += sp.wrap_step)
                gxs[k] -= wv * gp[k];
          }
        }
      }
    }
    return gx;
  }

 private:
  Tensor<T> x_;
};

// per-(sample, group) standardization with a per-channel affine map
template <typename T>
struct GroupNorm {
  int channels = 0, groups = 0;
  T eps = T(1e-5);
  std::vector<T> gamma, beta, ggamma, gbeta;

  GroupNorm(int ch, int gr)
      : channels(ch), groups(gr), gamma(ch, T(1)), beta(ch, T(0)),
        ggamma(ch, T(0)), gbeta(ch, T(0)) {
    if (gr < 1 || ch % gr != 0)
      throw std::invalid_argument("group norm: channels not divisible");
  }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.c != channels)
      throw std::invalid_argument("group norm: channel count mismatch");
    const int cpg = channels / groups;
    const std::size_t m = std::size_t(cpg) * x.h * x.w;
    xhat_ = Tensor<T>(x.n, x.c, x.h, x.w);
    invstd_.assign(std::size_t(x.n) * groups, T(0));
    Tensor<T> y(x.n, x.c, x.h, x.w);
    for (int i = 0; i < x.n; ++i)
      for (int g = 0; g < groups; ++g) {
        const T* gx0 = x.plane(i, g * cpg);
        const double mean = nn_detail::lane_sum(gx0, int(m)) / double(m);
        nn_detail::LaneAcc<T> vacc;
        vacc.sumsq_dev(gx0, int(m), T(mean));
        const double var = vacc.total() / double(m);
        const T istd = T(1.0 / std::sqrt(var + double(eps)));
        invstd_[std::size_t(i) * groups + g] = istd;
        for (int cc = 0; cc < cpg; ++cc) {
          const int ch = g * cpg + cc;
          const T* xp = x.plane(i, ch);
          T* hp = xhat_.plane(i, ch);
          T* yp = y.plane(i, ch);
          const T ga = gamma[std::size_t(ch)], be = beta[std::size_t(ch)];
          for (int k = 0; k < x.h * x.w; ++k) {
            hp[k] = T((double(xp[k]) - mean) * double(istd));
            yp[k] = ga * hp[k] + be;
          }
        }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    if (!gy.same_shape(xhat_))
      throw std::invalid_argument("group norm: cotangent shape mismatch");
    const int cpg = channels / groups;
    const std::size_t plane = std::size_t(xhat_.h) * xhat_.w;
    const double m = double(cpg) * double(plane);
    Tensor<T> gx(gy.n, gy.c, gy.h, gy.w);
    for (int i = 0; i < gy.n; ++i)
      for (int g = 0; g < groups; ++g) {
        // reduce grads w.r.t. the standardized values over the group
        double sum_gh = 0, sum_ghh = 0;
        for (int cc = 0; cc < cpg; ++cc) {
          const int ch = g * cpg + cc;
          const T* gp = gy.plane(i, ch);
          const T* hp = xhat_.plane(i, ch);
          const double ga = double(gamma[std::size_t(ch)]);
          const double sg = nn_detail::lane_sum(gp, int(plane));
          const double sgh = nn_detail::lane_dot(gp, hp, int(plane));
          gbeta[std::size_t(ch)] += T(sg);
          ggamma[std::size_t(ch)] += T(sgh);
          sum_gh += ga * sg;
          sum_ghh += ga * sgh;
        }
        const double istd = double(invstd_[std::size_t(i) * groups + g]);
        const double mean_gh = sum_gh / m, mean_ghh = sum_ghh / m;
        for (int cc = 0; cc < cpg; ++cc) {
          const int ch = g * cpg + cc;
          const T* gp = gy.plane(i, ch);
          const T* hp = xhat_.plane(i, ch);
          T* op = gx.plane(i, ch);
          const double ga = double(gamma[std::size_t(ch)]);
          for (std::size_t k = 0; k < plane; ++k)
            op[k] = T(istd * (ga * double(gp[k]) - mean_gh -
                              double(hp[k]) * mean_ghh));
        }
      }
    return gx;
  }

 private:
  Tensor<T> xhat_;
  std::vector<T> invstd_;
};

template <typename T>
struct ReLU {
  Tensor<T> forward(const Tensor<T>& x) {
    y_ = x;
    for (T& v : y_.v) v = v > T(0) ? v : T(0);
    return y_;
  }
  Tensor<T> backward(const Tensor<T>& gy) {
    if (!gy.same_shape(y_))
      throw std::invalid_argument("relu: cotangent shape mismatch");
    Tensor<T> gx = gy;
    for (std::size_t k = 0; k < gx.v.size(); ++k)
      if (!(y_.v[k] > T(0))) gx.v[k] = T(0);
    return gx;
  }

 private:
  Tensor<T> y_;
};

// the paper-sized residual update block: [x, p] -> delta
// conv 2->32, three group-normed ReLU stages, conv 32->1
template <typename T>
struct UpdateBlock {
  Conv2d<T> conv1{2, 32}, conv2{32, 32}, conv3{32, 32}, conv4{32, 1};
  GroupNorm<T> gn1{32, 8}, gn2{32, 8}, gn3{32, 8};
  ReLU<T> relu1, relu2, relu3;

  // He-normal fan-in init for the hidden convolutions; the output layer
  // starts at zero so the untrained block is the identity update
  void init(Rng& rng) {
    auto he = [&rng](Conv2d<T>& c) {
      const double std = std::sqrt(2.0 / (9.0 * c.in_c));
      for (T& v : c.w) v = T(rng.gauss(0.0, std));
      for (T& v : c.b) v = T(0);
    };
    he(conv1);
    he(conv2);
    he(conv3);
    for (T& v : conv4.w) v = T(0);
    for (T& v : conv4.b) v = T(0);
    for (GroupNorm<T>* g : {&gn1, &gn2, &gn3}) {
      std::fill(g->gamma.begin(), g->gamma.end(), T(1));
      std::fill(g->beta.begin(), g->beta.end(), T(0));
    }
  }

  // fixed traversal order; also the checkpoint serialization order
  template <typename F>
  void for_each_array(F&& f) {
    f("conv1.w", conv1.w, conv1.gw);
    f("conv1.b", conv1.b, conv1.gb);
    f("gn1.scale", gn1.gamma, gn1.ggamma);
    f("gn1.shift", gn1.beta, gn1.gbeta);
    f("conv2.w", conv2.w, conv2.gw);
    f("conv2.b", conv2.b, conv2.gb);
    f("gn2.scale", gn2.gamma, gn2.ggamma);
    f("gn2.shift", gn2.beta, gn2.gbeta);
    f("conv3.w", conv3.w, conv3.gw);
    f("conv3.b", conv3.b, conv3.gb);
    f("gn3.scale", gn3.gamma, gn3.ggamma);
    f("gn3.shift", gn3.beta, gn3.gbeta);
    f("conv4.w", conv4.w, conv4.gw);
    f("conv4.b", conv4.b, conv4.gb);
  }

  // 608 + 64 + 9248 + 64 + 9248 + 64 + 289 = 19585
  std::size_t param_count() {
    std::size_t n = 0;
    for_each_array([&](const char*, std::vector<T>& p, std::vector<T>&) {
      n += p.size();
    });
    return n;
  }

  void zero_grad() {
    for_each_array([](const char*, std::vector<T>&, std::vector<T>& g) {
      std::fill(g.begin(), g.end(), T(0));
    });
  }

  Tensor<T> delta_forward(const Tensor<T>& in) {
    if (in.c != 2)
      throw std::invalid_argument("update block: expects 2 input channels");
    Tensor<T> t = conv1.forward(in);
    guard(t, "conv1");
    t = gn1.forward(t);
    guard(t, "gn1");
    t = relu1.forward(t);
    t = conv2.forward(t);
    guard(t, "conv2");
    t = gn2.forward(t);
    guard(t, "gn2");
    t = relu2.forward(t);
    t = conv3.forward(t);
    guard(t, "conv3");
    t = gn3.forward(t);
    guard(t, "gn3");
    t = relu3.forward(t);
    t = conv4.forward(t);
    guard(t, "conv4");
    return t;
  }

  // accumulates parameter gradients, returns the 2-channel input gradient
  Tensor<T> delta_backward(const Tensor<T>& gdelta) {
    Tensor<T> g = conv4.backward(gdelta);
    g = relu3.backward(g);
    g = gn3.backward(g);
    g = conv3.backward(g);
    g = relu2.backward(g);
    g = gn2.backward(g);
    g = conv2.backward(g);
    g = relu1.backward(g);
    g = gn1.backward(g);
    return conv1.backward(g);
  }

 private:
  static void guard(const Tensor<T>& t, const char* layer) {
    if (!t.finite())
      throw TrainingError(std::string("update block: non-finite activation "
                                      "after ") +
                          layer);
  }
};

// assembles the block input [x / x_scale, p / p_scale]
template <typename T>
Tensor<T> make_block_input(const Tensor<T>& x, const Tensor<T>& p, T x_scale,
                           T p_scale) {
  if (!x.same_shape(p) || x.c != 1)
    throw std::invalid_argument("block input: need matching 1-channel images");
  Tensor<T> in(x.n, 2, x.h, x.w);
  const std::size_t plane = std::size_t(x.h) * x.w;
  for (int i = 0; i < x.n; ++i) {
    const T* xp = x.plane(i, 0);
    const T* pp = p.plane(i, 0);
    T* c0 = in.plane(i, 0);
    T* c1 = in.plane(i, 1);
    for (std::size_t k = 0; k < plane; ++k) {
      c0[k] = xp[k] / x_scale;
      c1[k] = pp[k] / p_scale;
    }
  }
  return in;
}

// x_next = max(x + delta, 0) + 1e-5; mask records where the clamp is inactive
template <typename T>
Tensor<T> residual_clamp(const Tensor<T>& x, const Tensor<T>& delta,
                         std::vector<std::uint8_t>* mask = nullptr) {
  if (!x.same_shape(delta))
    throw std::invalid_argument("residual clamp: shape mismatch");
  Tensor<T> out = x;
  if (mask) mask->assign(x.size(), 0);
  for (std::size_t k = 0; k < out.v.size(); ++k) {
    const T s = x.v[k] + delta.v[k];
    if (s > T(0)) {
      out.v[k] = s + T(1e-5);
      if (mask) (*mask)[k] = 1;
    } else {
      out.v[k] = T(1e-5);
    }
  }
  return out;
}

// one network update step: the spec-level convenience wrapper
template <typename T>
Tensor<T> update_block_apply(const Tensor<T>& x, const Tensor<T>& p,
                             UpdateBlock<T>& block, T x_scale = T(1),
                             T p_scale = T(1)) {
  const Tensor<T> delta =
      block.delta_forward(make_block_input(x, p, x_scale, p_scale));
  return residual_clamp(x, delta);
}

template <typename T>
struct AdamState {
  std::vector<T> m, v;
  void resize(std::size_t n) {
    m.assign(n, T(0));
    v.assign(n, T(0));
  }
};

// standard Adam with bias correction; t is the 1-based step index
template <typename T>
void adam_step(std::vector<T>& p, const std::vector<T>& g, AdamState<T>& s,
               double lr, long t, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8) {
  if (s.m.size() != p.size()) s.resize(p.size());
  if (g.size() != p.size())
    throw std::invalid_argument("adam: gradient size mismatch");
  const double c1 = 1.0 - std::pow(beta1, double(t));
  const double c2 = 1.0 - std::pow(beta2, double(t));
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double gk = double(g[k]);
    const double mk = beta1 * double(s.m[k]) + (1.0 - beta1) * gk;
    const double vk = beta2 * double(s.v[k]) + (1.0 - beta2) * gk * gk;
    s.m[k] = T(mk);
    s.v[k] = T(vk);
    p[k] = T(double(p[k]) - lr * (mk / c1) / (std::sqrt(vk / c2) + eps));
  }
}

inline double cosine_lr(long step, long total, double lr0) {
  if (total < 1) throw std::invalid_argument("cosine schedule: empty horizon");
  const double t = std::min(std::max(double(step), 0.0), double(total));
  return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t / total));
}

}  // namespace qpat
