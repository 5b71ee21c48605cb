#pragma once

// Minimal reverse-mode autodiff over CHW tensors. Parameters live in one flat
// vector owned by the caller; ops read weights from it and accumulate weight
// gradients into a parallel flat gradient vector. With grad mode off, nodes
// keep no parents, so inference holds only live activations.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <new>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hfd/core/image.hpp"

namespace hfd::nn {

// Eigen's vectorized reductions peel loops by runtime alignment, so the
// summation order depends on the buffer address. Storage for anything that
// reaches Eigen is 64-byte aligned to keep results bit-reproducible.
template <class T, std::size_t A = 64>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U, A>&) {}
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U, A>;
  };
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{A})); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t{A}); }
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
};

using AlignedVec = std::vector<double, AlignedAllocator<double>>;

struct Tensor {
  int c = 0, h = 0, w = 0;
  AlignedVec v;

  Tensor() = default;
  Tensor(int c_, int h_, int w_, double fill = 0.0)
      : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, fill) {}

  std::size_t size() const { return v.size(); }
  bool empty() const { return v.empty(); }
  int hw() const { return h * w; }
  double* ch(int k) { return v.data() + static_cast<std::size_t>(k) * h * w; }
  const double* ch(int k) const { return v.data() + static_cast<std::size_t>(k) * h * w; }
  bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;
using MapVec = Eigen::Map<Eigen::VectorXd>;

inline MapRM as_mat(Tensor& t) { return MapRM(t.v.data(), t.c, t.hw()); }
inline CMapRM as_mat(const Tensor& t) { return CMapRM(t.v.data(), t.c, t.hw()); }

// HWC interleaved image <-> CHW planar tensor.
inline Tensor to_chw(const ImageBuffer& img) {
  Tensor t(img.channels, img.height, img.width);
  const int n = img.height * img.width;
  for (int p = 0; p < n; ++p)
    for (int k = 0; k < img.channels; ++k) t.v[static_cast<std::size_t>(k) * n + p] = img.data[static_cast<std::size_t>(p) * img.channels + k];
  return t;
}

inline ImageBuffer from_chw(const Tensor& t) {
  ImageBuffer img(t.h, t.w, t.c);
  const int n = t.hw();
  for (int p = 0; p < n; ++p)
    for (int k = 0; k < t.c; ++k) img.data[static_cast<std::size_t>(p) * t.c + k] = t.v[static_cast<std::size_t>(k) * n + p];
  return img;
}

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;
  bool needs_grad = false;

  Tensor& g() {
    if (grad.empty()) grad = Tensor(value.c, value.h, value.w);
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Flat parameter storage plus where gradients go. grad may be null (inference).
struct ParamRef {
  const double* w = nullptr;
  double* grad = nullptr;
};

inline Var leaf(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return n;
}

inline Var make_node(Tensor value, std::vector<Var> parents, bool has_params, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (!grad_mode()) return n;
  bool need = has_params;
  for (const auto& p : parents) need = need || p->needs_grad;
  if (!need) return n;
  n->needs_grad = true;
  n->parents = std::move(parents);
  n->backward_fn = std::move(fn);
  return n;
}

// Runs the tape from a scalar root. Gradients of every node reachable from
// the root are accumulated; parameter gradients land in the ParamRef buffers.
inline void backward(const Var& root, double seed = 1.0) {
  if (root->value.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->needs_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root->g().v[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------- ops

struct ConvSpec {
  int cin = 0, cout = 0, k = 1;
  std::size_t w = 0, b = 0;  // offsets into the flat parameter vector
  std::size_t count() const { return static_cast<std::size_t>(cout) * cin * k * k + cout; }
};

namespace detail {

// Rows ordered (ci, ky, kx); zero padding k/2.
inline void im2col(const Tensor& x, int k, RowMat& cols) {
  const int H = x.h, W = x.w, r0 = k / 2;
  cols.resize(static_cast<Eigen::Index>(x.c) * k * k, static_cast<Eigen::Index>(H) * W);
  for (int ci = 0; ci < x.c; ++ci) {
    const double* src = x.ch(ci);
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* dst = cols.row((ci * k + ky) * k + kx).data();
        const int dy = ky - r0, dx = kx - r0;
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        for (int y = 0; y < H; ++y) {
          double* d = dst + static_cast<std::size_t>(y) * W;
          const int ys = y + dy;
          if (ys < 0 || ys >= H || x1 <= x0) {
            std::fill(d, d + W, 0.0);
            continue;
          }
          std::fill(d, d + x0, 0.0);
          std::memcpy(d + x0, src + static_cast<std::size_t>(ys) * W + x0 + dx, sizeof(double) * (x1 - x0));
          std::fill(d + x1, d + W, 0.0);
        }
      }
  }
}

inline void col2im_add(const RowMat& cols, int k, Tensor& gx) {
  const int H = gx.h, W = gx.w, r0 = k / 2;
  for (int ci = 0; ci < gx.c; ++ci) {
    double* dst = gx.ch(ci);
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* src = cols.row((ci * k + ky) * k + kx).data();
        const int dy = ky - r0, dx = kx - r0;
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        for (int y = 0; y < H; ++y) {
          const int ys = y + dy;
          if (ys < 0 || ys >= H) continue;
          const double* s = src + static_cast<std::size_t>(y) * W;
          double* d = dst + static_cast<std::size_t>(ys) * W + dx;
          for (int xx = x0; xx < x1; ++xx) d[xx] += s[xx];
        }
      }
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

inline Var conv2d(ParamRef P, const ConvSpec& s, const Var& x) {
  const Tensor& xv = x->value;
  if (xv.c != s.cin) throw std::invalid_argument("conv2d: expected " + std::to_string(s.cin) + " input channels, got " + std::to_string(xv.c));
  Tensor out(s.cout, xv.h, xv.w);
  CMapRM W(P.w + s.w, s.cout, static_cast<Eigen::Index>(s.cin) * s.k * s.k);
  if (s.k == 1) {
    as_mat(out).noalias() = W * as_mat(xv);
  } else {
    RowMat cols;
    detail::im2col(xv, s.k, cols);
    as_mat(out).noalias() = W * cols;
  }
  as_mat(out).colwise() += CMapVec(P.w + s.b, s.cout);
  return make_node(std::move(out), {x}, P.grad != nullptr, [P, s](Node& n) {
    const Var& xp = n.parents[0];
    CMapRM dout = as_mat(std::as_const(n.grad));
    CMapRM W(P.w + s.w, s.cout, static_cast<Eigen::Index>(s.cin) * s.k * s.k);
    MapRM dW(P.grad + s.w, s.cout, static_cast<Eigen::Index>(s.cin) * s.k * s.k);
    MapVec(P.grad + s.b, s.cout) += dout.rowwise().sum();
    if (s.k == 1) {
      dW.noalias() += dout * as_mat(xp->value).transpose();
      if (xp->needs_grad) as_mat(xp->g()).noalias() += W.transpose() * dout;
      return;
    }
    RowMat cols;
    detail::im2col(xp->value, s.k, cols);
    dW.noalias() += dout * cols.transpose();
    if (xp->needs_grad) {
      RowMat dcols = W.transpose() * dout;
      detail::col2im_add(dcols, s.k, xp->g());
    }
  });
}

inline Var silu(const Var& x) {
  Tensor out = x->value;
  for (double& v : out.v) v = v * detail::sigmoid(v);
  return make_node(std::move(out), {x}, false, [](Node& n) {
    const Var& xp = n.parents[0];
    Tensor& gx = xp->g();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double a = xp->value.v[i], sg = detail::sigmoid(a);
      gx.v[i] += n.grad.v[i] * sg * (1.0 + a * (1.0 - sg));
    }
  });
}

struct NormSpec {
  int c = 0, groups = 1;
  std::size_t gamma = 0, beta = 0;
  std::size_t count() const { return 2 * static_cast<std::size_t>(c); }
};

inline Var group_norm(ParamRef P, const NormSpec& s, const Var& x, double eps = 1e-5) {
  const Tensor& xv = x->value;
  if (xv.c != s.c) throw std::invalid_argument("group_norm: channel mismatch");
  const int cpg = s.c / s.groups;
  const std::size_t gsize = static_cast<std::size_t>(cpg) * xv.hw();
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv = std::make_shared<std::vector<double>>(s.groups);
  Tensor out(xv.c, xv.h, xv.w);
  for (int g = 0; g < s.groups; ++g) {
    const std::size_t o = g * gsize;
    double mean = 0;
    for (std::size_t i = 0; i < gsize; ++i) mean += xv.v[o + i];
    mean /= gsize;
    double var = 0;
    for (std::size_t i = 0; i < gsize; ++i) var += (xv.v[o + i] - mean) * (xv.v[o + i] - mean);
    var /= gsize;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv)[g] = is;
    for (std::size_t i = 0; i < gsize; ++i) (*xhat)[o + i] = (xv.v[o + i] - mean) * is;
  }
  const int n = xv.hw();
  for (int ch = 0; ch < xv.c; ++ch) {
    const double ga = P.w[s.gamma + ch], be = P.w[s.beta + ch];
    const std::size_t o = static_cast<std::size_t>(ch) * n;
    for (int i = 0; i < n; ++i) out.v[o + i] = ga * (*xhat)[o + i] + be;
  }
  return make_node(std::move(out), {x}, P.grad != nullptr, [P, s, xhat, inv, gsize, cpg](Node& nd) {
    const Var& xp = nd.parents[0];
    const int n = nd.value.hw();
    std::vector<double> dxhat(nd.grad.size());
    for (int ch = 0; ch < s.c; ++ch) {
      const std::size_t o = static_cast<std::size_t>(ch) * n;
      const double ga = P.w[s.gamma + ch];
      double dg = 0, db = 0;
      for (int i = 0; i < n; ++i) {
        const double gy = nd.grad.v[o + i];
        dg += gy * (*xhat)[o + i];
        db += gy;
        dxhat[o + i] = gy * ga;
      }
      P.grad[s.gamma + ch] += dg;
      P.grad[s.beta + ch] += db;
    }
    if (!xp->needs_grad) return;
    Tensor& gx = xp->g();
    (void)cpg;
    for (int g = 0; g < s.groups; ++g) {
      const std::size_t o = g * gsize;
      double sd = 0, sdx = 0;
      for (std::size_t i = 0; i < gsize; ++i) {
        sd += dxhat[o + i];
        sdx += dxhat[o + i] * (*xhat)[o + i];
      }
      const double is = (*inv)[g], m = static_cast<double>(gsize);
      for (std::size_t i = 0; i < gsize; ++i)
        gx.v[o + i] += is / m * (m * dxhat[o + i] - sd - (*xhat)[o + i] * sdx);
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] += b->value.v[i];
  return make_node(std::move(out), {a, b}, false, [](Node& n) {
    for (int k = 0; k < 2; ++k) {
      const Var& p = n.parents[k];
      if (!p->needs_grad) continue;
      Tensor& g = p->g();
      for (std::size_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i];
    }
  });
}

// x (C,H,W) + b (C,1,1) broadcast over space.
inline Var add_channel_bias(const Var& x, const Var& b) {
  const Tensor& xv = x->value;
  if (b->value.c != xv.c || b->value.hw() != 1) throw std::invalid_argument("add_channel_bias: shape mismatch");
  Tensor out = xv;
  as_mat(out).colwise() += CMapVec(b->value.v.data(), xv.c);
  return make_node(std::move(out), {x, b}, false, [](Node& n) {
    const Var& xp = n.parents[0];
    const Var& bp = n.parents[1];
    if (xp->needs_grad) as_mat(xp->g()) += as_mat(n.grad);
    if (bp->needs_grad) MapVec(bp->g().v.data(), bp->value.c) += as_mat(n.grad).rowwise().sum();
  });
}

inline Var avg_pool2(const Var& x) {
  const Tensor& xv = x->value;
  if (xv.h % 2 || xv.w % 2) throw std::invalid_argument("avg_pool2: odd spatial size");
  Tensor out(xv.c, xv.h / 2, xv.w / 2);
  for (int ch = 0; ch < xv.c; ++ch) {
    const double* s = xv.ch(ch);
    double* d = out.ch(ch);
    for (int y = 0; y < out.h; ++y)
      for (int xx = 0; xx < out.w; ++xx) {
        const double* r = s + static_cast<std::size_t>(2 * y) * xv.w + 2 * xx;
        d[y * out.w + xx] = 0.25 * (r[0] + r[1] + r[xv.w] + r[xv.w + 1]);
      }
  }
  return make_node(std::move(out), {x}, false, [](Node& n) {
    Tensor& gx = n.parents[0]->g();
    for (int ch = 0; ch < gx.c; ++ch) {
      const double* s = n.grad.ch(ch);
      double* d = gx.ch(ch);
      for (int y = 0; y < n.grad.h; ++y)
        for (int xx = 0; xx < n.grad.w; ++xx) {
          const double q = 0.25 * s[y * n.grad.w + xx];
          double* r = d + static_cast<std::size_t>(2 * y) * gx.w + 2 * xx;
          r[0] += q;
          r[1] += q;
          r[gx.w] += q;
          r[gx.w + 1] += q;
        }
    }
  });
}

// Nearest-neighbour 2x.
inline Var upsample2(const Var& x) {
  const Tensor& xv = x->value;
  Tensor out(xv.c, xv.h * 2, xv.w * 2);
  for (int ch = 0; ch < xv.c; ++ch) {
    const double* s = xv.ch(ch);
    double* d = out.ch(ch);
    for (int y = 0; y < out.h; ++y)
      for (int xx = 0; xx < out.w; ++xx) d[y * out.w + xx] = s[(y / 2) * xv.w + xx / 2];
  }
  return make_node(std::move(out), {x}, false, [](Node& n) {
    Tensor& gx = n.parents[0]->g();
    for (int ch = 0; ch < gx.c; ++ch) {
      const double* s = n.grad.ch(ch);
      double* d = gx.ch(ch);
      for (int y = 0; y < n.grad.h; ++y)
        for (int xx = 0; xx < n.grad.w; ++xx) d[(y / 2) * gx.w + xx / 2] += s[y * n.grad.w + xx];
    }
  });
}

inline Var concat(const Var& a, const Var& b) {
  const Tensor &av = a->value, &bv = b->value;
  if (av.h != bv.h || av.w != bv.w) throw std::invalid_argument("concat: spatial mismatch");
  Tensor out(av.c + bv.c, av.h, av.w);
  std::copy(av.v.begin(), av.v.end(), out.v.begin());
  std::copy(bv.v.begin(), bv.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(av.size()));
  return make_node(std::move(out), {a, b}, false, [](Node& n) {
    std::size_t off = 0;
    for (int k = 0; k < 2; ++k) {
      const Var& p = n.parents[k];
      if (p->needs_grad) {
        Tensor& g = p->g();
        for (std::size_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[off + i];
      }
      off += p->value.size();
    }
  });
}

// Single-head dot-product attention over spatial positions. Input holds
// q, k, v stacked along channels (3C); output is C channels.
inline Var attention_core(const Var& qkv) {
  const Tensor& t = qkv->value;
  if (t.c % 3) throw std::invalid_argument("attention_core: channels not divisible by 3");
  const int C = t.c / 3, N = t.hw();
  const double scale = 1.0 / std::sqrt(static_cast<double>(C));
  CMapRM Q(t.v.data(), C, N), K(t.v.data() + static_cast<std::size_t>(C) * N, C, N),
      V(t.v.data() + 2 * static_cast<std::size_t>(C) * N, C, N);
  auto A = std::make_shared<RowMat>(N, N);
  A->noalias() = scale * (Q.transpose() * K);
  for (int i = 0; i < N; ++i) {
    auto r = A->row(i);
    const double m = r.maxCoeff();
    r = (r.array() - m).exp();
    r /= r.sum();
  }
  Tensor out(C, t.h, t.w);
  as_mat(out).noalias() = V * A->transpose();
  if (!grad_mode()) A.reset();
  return make_node(std::move(out), {qkv}, false, [A, C, N, scale](Node& n) {
    const Var& p = n.parents[0];
    const Tensor& t = p->value;
    CMapRM Q(t.v.data(), C, N), K(t.v.data() + static_cast<std::size_t>(C) * N, C, N),
        V(t.v.data() + 2 * static_cast<std::size_t>(C) * N, C, N);
    Tensor& g = p->g();
    MapRM dQ(g.v.data(), C, N), dK(g.v.data() + static_cast<std::size_t>(C) * N, C, N),
        dV(g.v.data() + 2 * static_cast<std::size_t>(C) * N, C, N);
    CMapRM dO = as_mat(std::as_const(n.grad));
    dV.noalias() += dO * (*A);
    RowMat dS = dO.transpose() * V;
    for (int i = 0; i < N; ++i) {
      const double dot = dS.row(i).dot(A->row(i));
      dS.row(i) = A->row(i).array() * (dS.row(i).array() - dot);
    }
    dQ.noalias() += scale * (K * dS.transpose());
    dK.noalias() += scale * (Q * dS);
  });
}

// Scalar sum_i (target_i - scale * x_i)^2.
inline Var scaled_sq_error(const Var& x, const Tensor& target, double scale) {
  if (!x->value.same_shape(target)) throw std::invalid_argument("scaled_sq_error: shape mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double r = target.v[i] - scale * x->value.v[i];
    acc += r * r;
  }
  auto tgt = std::make_shared<Tensor>(target);
  return make_node(Tensor(1, 1, 1, acc), {x}, false, [tgt, scale](Node& n) {
    const Var& xp = n.parents[0];
    Tensor& gx = xp->g();
    const double g = n.grad.v[0];
    for (std::size_t i = 0; i < gx.size(); ++i)
      gx.v[i] += g * -2.0 * scale * (tgt->v[i] - scale * xp->value.v[i]);
  });
}

}  // namespace hfd::nn
