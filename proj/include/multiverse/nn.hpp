#pragma once

// Differentiable building blocks on rank-3 spatial maps (rows, cols, channels).
// Every op takes and returns graph Vars; parameters are read through
// Graph::param so gradients land on the named store entries.

#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "multiverse/autodiff.hpp"
#include "multiverse/errors.hpp"
#include "multiverse/gridworld.hpp"
#include "multiverse/tensor.hpp"

namespace mvt::nn {

namespace detail {

template <typename T>
void require_finite(const Tensor<T>& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string(what) + ": non-finite input");
}

template <typename T>
void require_same(Graph<T>& g, Var a, Var b, const char* what) {
  require_shape(g.value(b).shape(), g.value(a).shape(), what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  detail::require_same(g, a, b, "add");
  Tensor<T> out = g.value(a);
  const auto& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.emit(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
    for (Var v : {a, b}) {
      if (!g.requires_grad(v)) continue;
      auto& gv = g.grad_ref(v);
      for (std::size_t i = 0; i < go.size(); ++i) gv[i] += go[i];
    }
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  detail::require_same(g, a, b, "mul");
  Tensor<T> out = g.value(a);
  const auto& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.emit(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    if (g.requires_grad(a)) {
      auto& ga = g.grad_ref(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (g.requires_grad(b)) {
      auto& gb = g.grad_ref(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

// Pointwise nonlinearities recompute their derivative from the input value
// during the backward pass instead of keeping a second copy of the output.
template <typename T>
Var sigmoid(Graph<T>& g, Var a) {
  Tensor<T> out = g.value(a);
  for (T& v : out.values()) v = T{1} / (T{1} + std::exp(-v));
  return g.emit(std::move(out), {a}, [a](Graph<T>& g, const Tensor<T>& go) {
    const auto& av = g.value(a);
    auto& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const T s = T{1} / (T{1} + std::exp(-av[i]));
      ga[i] += go[i] * s * (T{1} - s);
    }
  });
}

template <typename T>
Var tanh(Graph<T>& g, Var a) {
  Tensor<T> out = g.value(a);
  for (T& v : out.values()) v = std::tanh(v);
  return g.emit(std::move(out), {a}, [a](Graph<T>& g, const Tensor<T>& go) {
    const auto& av = g.value(a);
    auto& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const T t = std::tanh(av[i]);
      ga[i] += go[i] * (T{1} - t * t);
    }
  });
}

// ---------------------------------------------------------------------------
// Channel plumbing

template <typename T>
Var concat_channels(Graph<T>& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = g.value(parts[0]).shape();
  require_rank(s0, 3, "concat_channels");
  std::size_t total = 0;
  for (Var p : parts) {
    const Shape& s = g.value(p).shape();
    require_rank(s, 3, "concat_channels");
    if (s[0] != s0[0] || s[1] != s0[1])
      throw ShapeError("concat_channels: spatial mismatch, expected " + shape_str(s0) + ", got " +
                       shape_str(s));
    total += s[2];
  }
  const std::size_t cells = s0[0] * s0[1];
  Tensor<T> out(Shape{s0[0], s0[1], total});
  std::size_t off = 0;
  for (Var p : parts) {
    const auto& v = g.value(p);
    const std::size_t ch = v.dim(2);
    for (std::size_t i = 0; i < cells; ++i)
      for (std::size_t c = 0; c < ch; ++c) out[i * total + off + c] = v[i * ch + c];
    off += ch;
  }
  return g.emit(std::move(out), parts, [parts, cells, total](Graph<T>& g, const Tensor<T>& go) {
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t ch = g.value(p).dim(2);
      if (g.requires_grad(p)) {
        auto& gp = g.grad_ref(p);
        for (std::size_t i = 0; i < cells; ++i)
          for (std::size_t c = 0; c < ch; ++c) gp[i * ch + c] += go[i * total + off + c];
      }
      off += ch;
    }
  });
}

template <typename T>
Var slice_channels(Graph<T>& g, Var a, std::size_t begin, std::size_t count) {
  const Shape& s = g.value(a).shape();
  require_rank(s, 3, "slice_channels");
  if (begin + count > s[2] || count == 0)
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") exceeds " + shape_str(s));
  const std::size_t cells = s[0] * s[1];
  const std::size_t ch = s[2];
  Tensor<T> out(Shape{s[0], s[1], count});
  const auto& v = g.value(a);
  for (std::size_t i = 0; i < cells; ++i)
    for (std::size_t c = 0; c < count; ++c) out[i * count + c] = v[i * ch + begin + c];
  return g.emit(std::move(out), {a}, [a, begin, count, cells, ch](Graph<T>& g, const Tensor<T>& go) {
    auto& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < cells; ++i)
      for (std::size_t c = 0; c < count; ++c) ga[i * ch + begin + c] += go[i * count + c];
  });
}

// mask (rows, cols, 1) scales every channel of x at the same cell.
template <typename T>
Var mul_cells(Graph<T>& g, Var mask, Var x) {
  const Shape& sm = g.value(mask).shape();
  const Shape& sx = g.value(x).shape();
  require_rank(sx, 3, "mul_cells");
  require_shape(sm, Shape{sx[0], sx[1], 1}, "mul_cells mask");
  const std::size_t cells = sx[0] * sx[1];
  const std::size_t ch = sx[2];
  Tensor<T> out = g.value(x);
  const auto& m = g.value(mask);
  for (std::size_t i = 0; i < cells; ++i)
    for (std::size_t c = 0; c < ch; ++c) out[i * ch + c] *= m[i];
  return g.emit(std::move(out), {mask, x}, [mask, x, cells, ch](Graph<T>& g, const Tensor<T>& go) {
    const auto& m = g.value(mask);
    const auto& xv = g.value(x);
    if (g.requires_grad(x)) {
      auto& gx = g.grad_ref(x);
      for (std::size_t i = 0; i < cells; ++i)
        for (std::size_t c = 0; c < ch; ++c) gx[i * ch + c] += go[i * ch + c] * m[i];
    }
    if (g.requires_grad(mask)) {
      auto& gm = g.grad_ref(mask);
      for (std::size_t i = 0; i < cells; ++i)
        for (std::size_t c = 0; c < ch; ++c) gm[i] += go[i * ch + c] * xv[i * ch + c];
    }
  });
}

// 2x2 average pooling; rows and cols must be even.
template <typename T>
Var avg_pool2(Graph<T>& g, Var x) {
  const Shape& s = g.value(x).shape();
  require_rank(s, 3, "avg_pool2");
  if (s[0] % 2 || s[1] % 2) throw ShapeError("avg_pool2: odd spatial dims " + shape_str(s));
  const std::size_t ho = s[0] / 2, wo = s[1] / 2, ch = s[2];
  Tensor<T> out(Shape{ho, wo, ch});
  const auto& v = g.value(x);
  for (std::size_t r = 0; r < ho; ++r)
    for (std::size_t c = 0; c < wo; ++c)
      for (std::size_t k = 0; k < ch; ++k)
        out.at(r, c, k) = T(0.25) * (v.at(2 * r, 2 * c, k) + v.at(2 * r + 1, 2 * c, k) +
                                     v.at(2 * r, 2 * c + 1, k) + v.at(2 * r + 1, 2 * c + 1, k));
  return g.emit(std::move(out), {x}, [x, ho, wo, ch](Graph<T>& g, const Tensor<T>& go) {
    auto& gx = g.grad_ref(x);
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t c = 0; c < wo; ++c)
        for (std::size_t k = 0; k < ch; ++k) {
          const T q = T(0.25) * go.at(r, c, k);
          gx.at(2 * r, 2 * c, k) += q;
          gx.at(2 * r + 1, 2 * c, k) += q;
          gx.at(2 * r, 2 * c + 1, k) += q;
          gx.at(2 * r + 1, 2 * c + 1, k) += q;
        }
  });
}

// ---------------------------------------------------------------------------
// Linear maps

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

// (H*W, k*k*ci) patch matrix with zero padding; column order matches the
// (k, k, ci, co) weight layout flattened to (k*k*ci, co).
template <typename T>
RowMat<T> im2col(const Tensor<T>& x, std::size_t k) {
  const std::size_t H = x.dim(0), W = x.dim(1), ci = x.dim(2);
  const long pad = static_cast<long>(k / 2);
  RowMat<T> cols = RowMat<T>::Zero(static_cast<long>(H * W), static_cast<long>(k * k * ci));
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      T* row = cols.data() + (r * W + c) * k * k * ci;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long rr = static_cast<long>(r + ky) - pad;
        if (rr < 0 || rr >= static_cast<long>(H)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long cc = static_cast<long>(c + kx) - pad;
          if (cc < 0 || cc >= static_cast<long>(W)) continue;
          const T* in = &x.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc), 0);
          std::copy(in, in + ci, row + (ky * k + kx) * ci);
        }
      }
    }
  return cols;
}

template <typename T>
void col2im_add(const RowMat<T>& cols, Tensor<T>& gx, std::size_t k) {
  const std::size_t H = gx.dim(0), W = gx.dim(1), ci = gx.dim(2);
  const long pad = static_cast<long>(k / 2);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const T* row = cols.data() + (r * W + c) * k * k * ci;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long rr = static_cast<long>(r + ky) - pad;
        if (rr < 0 || rr >= static_cast<long>(H)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long cc = static_cast<long>(c + kx) - pad;
          if (cc < 0 || cc >= static_cast<long>(W)) continue;
          T* out = &gx.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc), 0);
          const T* src = row + (ky * k + kx) * ci;
          for (std::size_t i = 0; i < ci; ++i) out[i] += src[i];
        }
      }
    }
}

}  // namespace detail

// Same-padded, stride-1 cross-correlation.
// x: (H, W, Cin), w: (k, k, Cin, Cout), b: (Cout) -> (H, W, Cout).
template <typename T>
Var conv2d(Graph<T>& g, Var x, Var w, Var b) {
  const Shape& sx = g.value(x).shape();
  const Shape& sw = g.value(w).shape();
  require_rank(sx, 3, "conv2d input");
  require_rank(sw, 4, "conv2d weights");
  const std::size_t k = sw[0];
  if (sw[1] != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd, got " + shape_str(sw));
  const std::size_t H = sx[0], W = sx[1], ci = sx[2], co = sw[3];
  require_shape(sw, Shape{k, k, ci, co}, "conv2d weights");
  require_shape(g.value(b).shape(), Shape{co}, "conv2d bias");
  const long n = static_cast<long>(H * W), kk = static_cast<long>(k * k * ci), no = static_cast<long>(co);

  const auto& bv = g.value(b);
  Tensor<T> out(Shape{H, W, co});
  {
    const RowMat<T> cols = detail::im2col(g.value(x), k);
    MatMap<T> y(out.data(), n, no);
    y.noalias() = cols * ConstMatMap<T>(g.value(w).data(), kk, no);
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.data(), no);
  }
  return g.emit(std::move(out), {x, w, b}, [x, w, b, k, n, kk, no](Graph<T>& g, const Tensor<T>& go) {
    const ConstMatMap<T> gy(go.data(), n, no);
    if (g.requires_grad(b)) {
      auto& gb = g.grad_ref(b);
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), no) += gy.colwise().sum();
    }
    if (g.requires_grad(w)) {
      const RowMat<T> cols = detail::im2col(g.value(x), k);
      MatMap<T>(g.grad_ref(w).data(), kk, no).noalias() += cols.transpose() * gy;
    }
    if (g.requires_grad(x)) {
      const RowMat<T> gcols = gy * ConstMatMap<T>(g.value(w).data(), kk, no).transpose();
      detail::col2im_add(gcols, g.grad_ref(x), k);
    }
  });
}

// Per-cell affine map shared across cells. x: (H, W, Cin), w: (Cin, Cout).
template <typename T>
Var dense(Graph<T>& g, Var x, Var w, Var b) {
  const Shape& sx = g.value(x).shape();
  const Shape& sw = g.value(w).shape();
  require_rank(sx, 3, "dense input");
  require_rank(sw, 2, "dense weights");
  const std::size_t cells = sx[0] * sx[1], ci = sx[2], co = sw[1];
  require_shape(sw, Shape{ci, co}, "dense weights");
  require_shape(g.value(b).shape(), Shape{co}, "dense bias");
  const long n = static_cast<long>(cells), ni = static_cast<long>(ci), no = static_cast<long>(co);
  const auto& bv = g.value(b);
  Tensor<T> out(Shape{sx[0], sx[1], co});
  MatMap<T> y(out.data(), n, no);
  y.noalias() = ConstMatMap<T>(g.value(x).data(), n, ni) * ConstMatMap<T>(g.value(w).data(), ni, no);
  y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.data(), no);
  return g.emit(std::move(out), {x, w, b}, [x, w, b, n, ni, no](Graph<T>& g, const Tensor<T>& go) {
    const ConstMatMap<T> gy(go.data(), n, no);
    if (g.requires_grad(b)) {
      auto& gb = g.grad_ref(b);
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), no) += gy.colwise().sum();
    }
    if (g.requires_grad(w))
      MatMap<T>(g.grad_ref(w).data(), ni, no).noalias() += ConstMatMap<T>(g.value(x).data(), n, ni).transpose() * gy;
    if (g.requires_grad(x))
      MatMap<T>(g.grad_ref(x).data(), n, ni).noalias() += gy * ConstMatMap<T>(g.value(w).data(), ni, no).transpose();
  });
}

// Per-cell affine lift of a scalar map: out[i, e] = c[i] * w[e] + b[e].
template <typename T>
Var embed_belief(Graph<T>& g, Var belief, Var w, Var b) {
  const Shape& sc = g.value(belief).shape();
  require_rank(sc, 3, "embed_belief");
  if (sc[2] != 1) throw ShapeError("embed_belief: belief must have one channel, got " + shape_str(sc));
  const std::size_t de = g.value(w).size();
  require_shape(g.value(w).shape(), Shape{de}, "embed_belief weights");
  require_shape(g.value(b).shape(), Shape{de}, "embed_belief bias");
  const std::size_t cells = sc[0] * sc[1];
  const auto& cv = g.value(belief);
  const auto& wv = g.value(w);
  const auto& bv = g.value(b);
  Tensor<T> out(Shape{sc[0], sc[1], de});
  for (std::size_t n = 0; n < cells; ++n)
    for (std::size_t e = 0; e < de; ++e) out[n * de + e] = cv[n] * wv[e] + bv[e];
  return g.emit(std::move(out), {belief, w, b}, [belief, w, b, cells, de](Graph<T>& g, const Tensor<T>& go) {
    const auto& cv = g.value(belief);
    const auto& wv = g.value(w);
    if (g.requires_grad(w) || g.requires_grad(b)) {
      Tensor<T>* gw = g.requires_grad(w) ? &g.grad_ref(w) : nullptr;
      Tensor<T>* gb = g.requires_grad(b) ? &g.grad_ref(b) : nullptr;
      for (std::size_t n = 0; n < cells; ++n)
        for (std::size_t e = 0; e < de; ++e) {
          if (gw) (*gw)[e] += go[n * de + e] * cv[n];
          if (gb) (*gb)[e] += go[n * de + e];
        }
    }
    if (g.requires_grad(belief)) {
      auto& gc = g.grad_ref(belief);
      for (std::size_t n = 0; n < cells; ++n) {
        T s{0};
        for (std::size_t e = 0; e < de; ++e) s += go[n * de + e] * wv[e];
        gc[n] += s;
      }
    }
  });
}

// Softmax over all cells of a one-channel map, max-subtracted.
template <typename T>
Var spatial_softmax(Graph<T>& g, Var logits) {
  const Shape& s = g.value(logits).shape();
  require_rank(s, 3, "spatial_softmax");
  if (s[2] != 1) throw ShapeError("spatial_softmax: expected one channel, got " + shape_str(s));
  const auto& lv = g.value(logits);
  for (T v : lv.values())
    if (std::isnan(v)) throw NumericError("spatial_softmax: NaN logit");
  T mx = lv[0];
  for (T v : lv.values()) mx = std::max(mx, v);
  if (!std::isfinite(mx)) throw NumericError("spatial_softmax: non-finite logits");
  Tensor<T> out(s);
  T z{0};
  for (std::size_t i = 0; i < lv.size(); ++i) {
    out[i] = std::exp(lv[i] - mx);
    z += out[i];
  }
  for (T& v : out.values()) v /= z;
  const Tensor<T> probs = out;
  return g.emit(std::move(out), {logits}, [logits, probs](Graph<T>& g, const Tensor<T>& go) {
    T dot{0};
    for (std::size_t i = 0; i < go.size(); ++i) dot += go[i] * probs[i];
    auto& gl = g.grad_ref(logits);
    for (std::size_t i = 0; i < go.size(); ++i) gl[i] += probs[i] * (go[i] - dot);
  });
}

// ---------------------------------------------------------------------------
// Graph layer over the 8-connected cell graph

enum class GatForm {
  // out_i = mean_{j in N(i)} f_e([v_i, v_j]) + h_i
  additive,
  // out_i = sum_{j in N(i)} softmax_j(u . phi([v_i, v_j])) h_j + h_i
  attention,
};

struct GatParams {
  Var w1;   // (2 (d + Cs), d); rows [0, d+Cs) act on v_i, the rest on v_j
  Var b1;   // (d)
  Var w2;   // (d, d), additive form
  Var b2;   // (d), additive form
  Var att;  // (d), attention form
};

namespace detail {

// a = v_i part, bb = v_j part of the first edge-MLP layer for every node.
template <typename T>
void gat_node_terms(const Tensor<T>& h, const Tensor<T>& ctx, const Tensor<T>& w1, std::size_t cells,
                    std::size_t d, std::size_t cs, std::vector<T>& a, std::vector<T>& bb) {
  const std::size_t dv = d + cs;
  a.assign(cells * d, T{0});
  bb.assign(cells * d, T{0});
  for (std::size_t n = 0; n < cells; ++n) {
    T* an = a.data() + n * d;
    T* bn = bb.data() + n * d;
    for (std::size_t k = 0; k < dv; ++k) {
      const T v = k < d ? h[n * d + k] : ctx[n * cs + (k - d)];
      if (v == T{0}) continue;
      const T* wa = w1.data() + k * d;
      const T* wb = w1.data() + (dv + k) * d;
      for (std::size_t o = 0; o < d; ++o) {
        an[o] += v * wa[o];
        bn[o] += v * wb[o];
      }
    }
  }
}

// Pushes gradients of the per-node first-layer terms back to h, ctx and w1.
template <typename T>
void gat_node_terms_backward(Graph<T>& g, Var h, Var ctx, Var w1, std::size_t cells, std::size_t d,
                             std::size_t cs, const std::vector<T>& ga, const std::vector<T>& gbb) {
  const std::size_t dv = d + cs;
  const auto& hv = g.value(h);
  const auto& cv = g.value(ctx);
  const auto& wv = g.value(w1);
  Tensor<T>* gh = g.requires_grad(h) ? &g.grad_ref(h) : nullptr;
  Tensor<T>* gc = g.requires_grad(ctx) ? &g.grad_ref(ctx) : nullptr;
  Tensor<T>* gw = g.requires_grad(w1) ? &g.grad_ref(w1) : nullptr;
  for (std::size_t n = 0; n < cells; ++n) {
    const T* gan = ga.data() + n * d;
    const T* gbn = gbb.data() + n * d;
    for (std::size_t k = 0; k < dv; ++k) {
      const T v = k < d ? hv[n * d + k] : cv[n * cs + (k - d)];
      const T* wa = wv.data() + k * d;
      const T* wb = wv.data() + (dv + k) * d;
      if (gw && v != T{0}) {
        T* gwa = gw->data() + k * d;
        T* gwb = gw->data() + (dv + k) * d;
        for (std::size_t o = 0; o < d; ++o) {
          gwa[o] += v * gan[o];
          gwb[o] += v * gbn[o];
        }
      }
      if ((k < d && gh) || (k >= d && gc)) {
        T s{0};
        for (std::size_t o = 0; o < d; ++o) s += wa[o] * gan[o] + wb[o] * gbn[o];
        if (k < d)
          (*gh)[n * d + k] += s;
        else
          (*gc)[n * cs + (k - d)] += s;
      }
    }
  }
}

}  // namespace detail

// hidden: (H, W, d), node_context: (H, W, Cs). Node features are v_i = [h_i, ctx_i].
// Cells without neighbors (1x1 maps) pass their hidden state through unchanged.
template <typename T>
Var gat_layer(Graph<T>& g, Var hidden, Var node_context, const GatParams& p, const NeighborTable& nb,
              GatForm form = GatForm::additive) {
  const Shape& sh = g.value(hidden).shape();
  const Shape& sc = g.value(node_context).shape();
  require_rank(sh, 3, "gat hidden");
  require_rank(sc, 3, "gat context");
  if (sc[0] != sh[0] || sc[1] != sh[1]) throw ShapeError("gat: context " + shape_str(sc) + " vs hidden " + shape_str(sh));
  if (nb.rows != sh[0] || nb.cols != sh[1]) throw ShapeError("gat: neighbor table does not match " + shape_str(sh));
  const std::size_t cells = sh[0] * sh[1], d = sh[2], cs = sc[2];
  require_shape(g.value(p.w1).shape(), Shape{2 * (d + cs), d}, "gat w1");
  require_shape(g.value(p.b1).shape(), Shape{d}, "gat b1");
  if (form == GatForm::additive) {
    require_shape(g.value(p.w2).shape(), Shape{d, d}, "gat w2");
    require_shape(g.value(p.b2).shape(), Shape{d}, "gat b2");
  } else {
    require_shape(g.value(p.att).shape(), Shape{d}, "gat att");
  }

  const auto& hv = g.value(hidden);
  const auto& b1 = g.value(p.b1);
  std::vector<T> a, bb;
  detail::gat_node_terms(hv, g.value(node_context), g.value(p.w1), cells, d, cs, a, bb);

  // t holds tanh(a_i + b_j + b1) per directed edge, in table order.
  std::vector<T> t(nb.indices.size() * d);
  for (std::size_t i = 0; i < cells; ++i)
    for (std::size_t e = nb.offsets[i]; e < nb.offsets[i + 1]; ++e) {
      const std::size_t j = nb.indices[e];
      for (std::size_t o = 0; o < d; ++o) t[e * d + o] = std::tanh(a[i * d + o] + bb[j * d + o] + b1[o]);
    }

  Tensor<T> out = hv;
  if (form == GatForm::additive) {
    const auto& w2 = g.value(p.w2);
    const auto& b2 = g.value(p.b2);
    std::vector<T> m(cells * d, T{0});
    for (std::size_t i = 0; i < cells; ++i) {
      const std::size_t deg = nb.degree(i);
      if (deg == 0) continue;
      T* mi = m.data() + i * d;
      for (std::size_t e = nb.offsets[i]; e < nb.offsets[i + 1]; ++e)
        for (std::size_t o = 0; o < d; ++o) mi[o] += t[e * d + o];
      const T inv = T{1} / static_cast<T>(deg);
      for (std::size_t o = 0; o < d; ++o) mi[o] *= inv;
      T* y = out.data() + i * d;
      for (std::size_t o = 0; o < d; ++o) y[o] += b2[o];
      for (std::size_t k = 0; k < d; ++k) {
        const T v = mi[k];
        const T* wr = w2.data() + k * d;
        for (std::size_t o = 0; o < d; ++o) y[o] += v * wr[o];
      }
    }
    const GatParams pp = p;
    return g.emit(std::move(out), {hidden, node_context, p.w1, p.b1, p.w2, p.b2},
                  [hidden, node_context, pp, nb, cells, d, cs, t = std::move(t), m = std::move(m)](
                      Graph<T>& g, const Tensor<T>& go) {
                    const auto& w2 = g.value(pp.w2);
                    if (g.requires_grad(hidden)) {
                      auto& gh = g.grad_ref(hidden);
                      for (std::size_t n = 0; n < cells * d; ++n) gh[n] += go[n];
                    }
                    Tensor<T>* gw2 = g.requires_grad(pp.w2) ? &g.grad_ref(pp.w2) : nullptr;
                    Tensor<T>* gb2 = g.requires_grad(pp.b2) ? &g.grad_ref(pp.b2) : nullptr;
                    Tensor<T>* gb1 = g.requires_grad(pp.b1) ? &g.grad_ref(pp.b1) : nullptr;
                    std::vector<T> ga(cells * d, T{0}), gbb(cells * d, T{0}), gm(d);
                    for (std::size_t i = 0; i < cells; ++i) {
                      const std::size_t deg = nb.degree(i);
                      if (deg == 0) continue;
                      const T* goi = go.data() + i * d;
                      if (gb2)
                        for (std::size_t o = 0; o < d; ++o) (*gb2)[o] += goi[o];
                      for (std::size_t k = 0; k < d; ++k) {
                        const T* wr = w2.data() + k * d;
                        T s{0};
                        for (std::size_t o = 0; o < d; ++o) s += wr[o] * goi[o];
                        gm[k] = s / static_cast<T>(deg);
                        if (gw2) {
                          const T mk = m[i * d + k];
                          T* gwr = gw2->data() + k * d;
                          for (std::size_t o = 0; o < d; ++o) gwr[o] += mk * goi[o];
                        }
                      }
                      for (std::size_t e = nb.offsets[i]; e < nb.offsets[i + 1]; ++e) {
                        const std::size_t j = nb.indices[e];
                        for (std::size_t o = 0; o < d; ++o) {
                          const T te = t[e * d + o];
                          const T gt = gm[o] * (T{1} - te * te);
                          ga[i * d + o] += gt;
                          gbb[j * d + o] += gt;
                          if (gb1) (*gb1)[o] += gt;
                        }
                      }
                    }
                    detail::gat_node_terms_backward(g, hidden, node_context, pp.w1, cells, d, cs, ga, gbb);
                  });
  }

  // Attention form: scalar scores per edge, normalized over each neighborhood.
  const auto& att = g.value(p.att);
  std::vector<T> alpha(nb.indices.size(), T{0});
  for (std::size_t i = 0; i < cells; ++i) {
    const std::size_t lo = nb.offsets[i], hi = nb.offsets[i + 1];
    if (lo == hi) continue;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t e = lo; e < hi; ++e) {
      T s{0};
      for (std::size_t o = 0; o < d; ++o) s += att[o] * t[e * d + o];
      alpha[e] = s;
      mx = std::max(mx, s);
    }
    T z{0};
    for (std::size_t e = lo; e < hi; ++e) {
      alpha[e] = std::exp(alpha[e] - mx);
      z += alpha[e];
    }
    T* y = out.data() + i * d;
    for (std::size_t e = lo; e < hi; ++e) {
      alpha[e] /= z;
      const T* hj = hv.data() + nb.indices[e] * d;
      for (std::size_t o = 0; o < d; ++o) y[o] += alpha[e] * hj[o];
    }
  }
  const GatParams pp = p;
  return g.emit(std::move(out), {hidden, node_context, p.w1, p.b1, p.att},
                [hidden, node_context, pp, nb, cells, d, cs, t = std::move(t), alpha = std::move(alpha)](
                    Graph<T>& g, const Tensor<T>& go) {
                  const auto& hv = g.value(hidden);
                  const auto& att = g.value(pp.att);
                  Tensor<T>* gh = g.requires_grad(hidden) ? &g.grad_ref(hidden) : nullptr;
                  Tensor<T>* gatt = g.requires_grad(pp.att) ? &g.grad_ref(pp.att) : nullptr;
                  Tensor<T>* gb1 = g.requires_grad(pp.b1) ? &g.grad_ref(pp.b1) : nullptr;
                  if (gh)
                    for (std::size_t n = 0; n < cells * d; ++n) (*gh)[n] += go[n];
                  std::vector<T> ga(cells * d, T{0}), gbb(cells * d, T{0});
                  std::vector<T> galpha;
                  for (std::size_t i = 0; i < cells; ++i) {
                    const std::size_t lo = nb.offsets[i], hi = nb.offsets[i + 1];
                    if (lo == hi) continue;
                    const T* goi = go.data() + i * d;
                    galpha.assign(hi - lo, T{0});
                    T wsum{0};
                    for (std::size_t e = lo; e < hi; ++e) {
                      const std::size_t j = nb.indices[e];
                      const T* hj = hv.data() + j * d;
                      T s{0};
                      for (std::size_t o = 0; o < d; ++o) s += goi[o] * hj[o];
                      galpha[e - lo] = s;
                      wsum += alpha[e] * s;
                      if (gh)
                        for (std::size_t o = 0; o < d; ++o) (*gh)[j * d + o] += alpha[e] * goi[o];
                    }
                    for (std::size_t e = lo; e < hi; ++e) {
                      const std::size_t j = nb.indices[e];
                      const T gs = alpha[e] * (galpha[e - lo] - wsum);
                      for (std::size_t o = 0; o < d; ++o) {
                        const T te = t[e * d + o];
                        if (gatt) (*gatt)[o] += gs * te;
                        const T gt = gs * att[o] * (T{1} - te * te);
                        ga[i * d + o] += gt;
                        gbb[j * d + o] += gt;
                        if (gb1) (*gb1)[o] += gt;
                      }
                    }
                  }
                  detail::gat_node_terms_backward(g, hidden, node_context, pp.w1, cells, d, cs, ga, gbb);
                });
}

// ---------------------------------------------------------------------------
// Recurrent cell

struct ConvLstmParams {
  Var w;  // (k, k, Cin + d, 4 d); gate order i, f, o, g
  Var b;  // (4 d)
};

struct LstmState {
  Var h;
  Var c;
};

// ConvLSTM without peepholes: gates from a convolution over [x, h_prev].
template <typename T>
LstmState convrnn_step(Graph<T>& g, Var x, LstmState prev, const ConvLstmParams& p) {
  detail::require_finite(g.value(x), "convrnn_step");
  const Shape& sh = g.value(prev.h).shape();
  require_rank(sh, 3, "convrnn_step hidden");
  require_shape(g.value(prev.c).shape(), sh, "convrnn_step cell");
  const std::size_t d = sh[2];
  Var gates = conv2d(g, concat_channels(g, {x, prev.h}), p.w, p.b);
  if (g.value(gates).dim(2) != 4 * d)
    throw ShapeError("convrnn_step: gate conv yields " + std::to_string(g.value(gates).dim(2)) +
                     " channels, expected " + std::to_string(4 * d));
  Var i = sigmoid(g, slice_channels(g, gates, 0, d));
  Var f = sigmoid(g, slice_channels(g, gates, d, d));
  Var o = sigmoid(g, slice_channels(g, gates, 2 * d, d));
  Var cand = tanh(g, slice_channels(g, gates, 3 * d, d));
  Var c = add(g, mul(g, f, prev.c), mul(g, i, cand));
  Var h = mul(g, o, tanh(g, c));
  return {h, c};
}

// ---------------------------------------------------------------------------
// Layer declarations and initialization

struct LayerSpec {
  enum class Kind { dense, conv2d, convrnn_cell, gat, spatial_softmax, embed };
  Kind kind = Kind::dense;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t context_channels = 0;  // gat only
  GatForm gat_form = GatForm::additive;
};

inline void validate(const LayerSpec& s) {
  if (s.in_channels == 0 || s.out_channels == 0) throw ConfigError("layer channel counts must be positive");
  if ((s.kind == LayerSpec::Kind::conv2d || s.kind == LayerSpec::Kind::convrnn_cell) && s.kernel % 2 == 0)
    throw ConfigError("conv kernels must be odd-sized, got " + std::to_string(s.kernel));
}

// Balanced uniform initialization: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Tensor<T> t(std::move(shape));
  for (T& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

// Creates the parameters of one layer under `prefix.` and returns nothing;
// models read them back by name.
template <typename T>
void declare(ParameterStore<T>& store, const std::string& prefix, const LayerSpec& s, std::mt19937_64& rng) {
  validate(s);
  const std::size_t ci = s.in_channels, co = s.out_channels, k = s.kernel;
  switch (s.kind) {
    case LayerSpec::Kind::dense:
      store.add(prefix + ".w", glorot_uniform<T>(Shape{ci, co}, ci, co, rng));
      store.add(prefix + ".b", Tensor<T>(Shape{co}));
      break;
    case LayerSpec::Kind::conv2d:
    case LayerSpec::Kind::spatial_softmax:
      store.add(prefix + ".w", glorot_uniform<T>(Shape{k, k, ci, co}, k * k * ci, k * k * co, rng));
      store.add(prefix + ".b", Tensor<T>(Shape{co}));
      break;
    case LayerSpec::Kind::convrnn_cell: {
      // in_channels counts the external input only; hidden width is out_channels.
      const std::size_t cin = ci + co;
      store.add(prefix + ".w", glorot_uniform<T>(Shape{k, k, cin, 4 * co}, k * k * cin, k * k * co, rng));
      Tensor<T> b(Shape{4 * co});
      for (std::size_t i = co; i < 2 * co; ++i) b[i] = T{1};  // forget gate
      store.add(prefix + ".b", std::move(b));
      break;
    }
    case LayerSpec::Kind::gat: {
      const std::size_t dv = ci + s.context_channels;
      store.add(prefix + ".w1", glorot_uniform<T>(Shape{2 * dv, co}, 2 * dv, co, rng));
      store.add(prefix + ".b1", Tensor<T>(Shape{co}));
      if (s.gat_form == GatForm::additive) {
        store.add(prefix + ".w2", glorot_uniform<T>(Shape{co, co}, co, co, rng));
        store.add(prefix + ".b2", Tensor<T>(Shape{co}));
      } else {
        store.add(prefix + ".att", glorot_uniform<T>(Shape{co}, co, 1, rng));
      }
      break;
    }
    case LayerSpec::Kind::embed:
      store.add(prefix + ".w", glorot_uniform<T>(Shape{co}, 1, co, rng));
      store.add(prefix + ".b", Tensor<T>(Shape{co}));
      break;
  }
}

template <typename T>
GatParams gat_params(Graph<T>& g, const ParameterStore<T>& s, const std::string& prefix, GatForm form) {
  GatParams p;
  p.w1 = g.param(s, prefix + ".w1");
  p.b1 = g.param(s, prefix + ".b1");
  if (form == GatForm::additive) {
    p.w2 = g.param(s, prefix + ".w2");
    p.b2 = g.param(s, prefix + ".b2");
  } else {
    p.att = g.param(s, prefix + ".att");
  }
  return p;
}

template <typename T>
ConvLstmParams lstm_params(Graph<T>& g, const ParameterStore<T>& s, const std::string& prefix) {
  return {g.param(s, prefix + ".w"), g.param(s, prefix + ".b")};
}

// ---------------------------------------------------------------------------
// Scalar reductions used by the losses

// -log(max(p[cell], floor)); the floor keeps the loss finite for vanishing mass.
template <typename T>
Var neg_log_prob_at(Graph<T>& g, Var probs, std::size_t cell, T floor = T(1e-12)) {
  const auto& pv = g.value(probs);
  if (cell >= pv.size()) throw RangeError("neg_log_prob_at: cell " + std::to_string(cell) + " out of range");
  const T p = pv[cell];
  Tensor<T> out = Tensor<T>::scalar(-std::log(std::max(p, floor)));
  return g.emit(std::move(out), {probs}, [probs, cell, floor](Graph<T>& g, const Tensor<T>& go) {
    const T p = g.value(probs)[cell];
    if (p > floor) g.grad_ref(probs)[cell] -= go[0] / p;
  });
}

// Sum over all entries of smooth_l1(pred - target), smooth_l1(x) = 0.5 x^2 if |x| < 1 else |x| - 0.5.
template <typename T>
Var smooth_l1_sum(Graph<T>& g, Var pred, const Tensor<T>& target) {
  require_shape(target.shape(), g.value(pred).shape(), "smooth_l1 target");
  const auto& pv = g.value(pred);
  T s{0};
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T x = pv[i] - target[i];
    const T ax = std::abs(x);
    s += ax < T{1} ? T(0.5) * x * x : ax - T(0.5);
  }
  return g.emit(Tensor<T>::scalar(s), {pred}, [pred, target](Graph<T>& g, const Tensor<T>& go) {
    const auto& pv = g.value(pred);
    auto& gp = g.grad_ref(pred);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const T x = pv[i] - target[i];
      const T d = std::abs(x) < T{1} ? x : (x > T{0} ? T{1} : T{-1});
      gp[i] += go[0] * d;
    }
  });
}

template <typename T>
Var sum_squares(Graph<T>& g, Var a) {
  T s{0};
  for (T v : g.value(a).values()) s += v * v;
  return g.emit(Tensor<T>::scalar(s), {a}, [a](Graph<T>& g, const Tensor<T>& go) {
    const auto& av = g.value(a);
    auto& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += T{2} * go[0] * av[i];
  });
}

// sum_k coeffs[k] * terms[k] over scalar terms.
template <typename T>
Var linear_combination(Graph<T>& g, const std::vector<Var>& terms, const std::vector<T>& coeffs) {
  if (terms.size() != coeffs.size()) throw ArgumentError("linear_combination: length mismatch");
  T s{0};
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (g.value(terms[k]).size() != 1) throw ShapeError("linear_combination expects scalars");
    s += coeffs[k] * g.value(terms[k])[0];
  }
  return g.emit(Tensor<T>::scalar(s), terms, [terms, coeffs](Graph<T>& g, const Tensor<T>& go) {
    for (std::size_t k = 0; k < terms.size(); ++k)
      if (g.requires_grad(terms[k])) g.grad_ref(terms[k])[0] += coeffs[k] * go[0];
  });
}

}  // namespace mvt::nn
