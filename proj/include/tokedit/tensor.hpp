#pragma once

// Reverse-mode autodiff over dense float tensors. Define-by-run: every op
// returns a fresh node holding its value and, when gradients are enabled and
// some parent requires them, a closure that routes the node's gradient into
// its parents. Eigen backs the matrix products; everything else is plain
// loops. Single-threaded by design: training must be bit-reproducible.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "tokedit/common.hpp"
#include "tokedit/rng.hpp"

namespace tokedit {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

struct TensorNode {
  std::vector<int> shape;
  std::vector<float> value;
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
  }
};

inline size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    TOKEDIT_CHECK(d >= 0, ShapeError, "negative dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

namespace grad_mode {
inline bool& enabled() {
  thread_local bool on = true;
  return on;
}
}  // namespace grad_mode

// RAII guard for inference paths: no tape is recorded inside.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode::enabled()) { grad_mode::enabled() = false; }
  ~NoGradGuard() { grad_mode::enabled() = prev; }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.assign(shape_numel(n->shape), 0.0f);
    n->requires_grad = requires_grad && grad_mode::enabled();
    return Tensor(n);
  }

  static Tensor full(std::vector<int> shape, float v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false) {
    TOKEDIT_CHECK(shape_numel(shape) == data.size(), ShapeError,
                  "from_data: %zu values for shape of %zu", data.size(), shape_numel(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad && grad_mode::enabled();
    return Tensor(n);
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, float stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->value) v = rng.normal_f(0.0f, stddev);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  size_t numel() const { return node_->value.size(); }

  float* data() { return node_->value.data(); }
  const float* data() const { return node_->value.data(); }
  std::vector<float>& value() { return node_->value; }
  const std::vector<float>& value() const { return node_->value; }
  float scalar() const {
    TOKEDIT_CHECK(numel() == 1, ShapeError, "scalar() on tensor of %zu elements", numel());
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  const std::vector<float>& grad() const { return node_->grad; }
  std::vector<float>& grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
  }

  std::shared_ptr<TensorNode> node() const { return node_; }

  Tensor detach() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = node_->shape;
    n->value = node_->value;
    n->requires_grad = false;
    return Tensor(n);
  }

  // Backprop from this scalar. Gradients accumulate into every node of the
  // graph that requires them; intermediate grads are retained.
  void backward() {
    TOKEDIT_CHECK(numel() == 1, ShapeError, "backward() requires a scalar");
    TOKEDIT_CHECK(node_->requires_grad, Error, "backward() on a non-grad tensor");
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [cur, idx] = stack.back();
      if (idx < cur->parents.size()) {
        TensorNode* p = cur->parents[idx].get();
        idx++;
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(cur);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode* n = *it;
      if (n->backward_fn) n->backward_fn(*n);
    }
  }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Generic custom-op constructor: value must be filled in by the caller via
// the returned tensor before use; backward receives the completed node.
inline Tensor make_op(std::vector<int> shape, const std::vector<Tensor>& parents,
                      std::function<void(TensorNode&)> backward) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value.assign(shape_numel(n->shape), 0.0f);
  bool need = false;
  if (grad_mode::enabled()) {
    for (const auto& p : parents) need = need || p.requires_grad();
  }
  n->requires_grad = need;
  if (need) {
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward);
  }
  return Tensor(n);
}

namespace detail {
inline void accum(TensorNode& dst, const float* g, size_t n) {
  dst.ensure_grad();
  for (size_t i = 0; i < n; i++) dst.grad[i] += g[i];
}
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  TOKEDIT_CHECK(a.shape() == b.shape(), ShapeError, "%s: shape mismatch", op);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  auto an = a.node(), bn = b.node();
  Tensor out = make_op(a.shape(), {a, b}, [an, bn](TensorNode& self) {
    if (an->requires_grad) detail::accum(*an, self.grad.data(), self.numel());
    if (bn->requires_grad) detail::accum(*bn, self.grad.data(), self.numel());
  });
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (size_t i = 0; i < out.numel(); i++) po[i] = pa[i] + pb[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  auto an = a.node(), bn = b.node();
  Tensor out = make_op(a.shape(), {a, b}, [an, bn](TensorNode& self) {
    if (an->requires_grad) detail::accum(*an, self.grad.data(), self.numel());
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.numel(); i++) bn->grad[i] -= self.grad[i];
    }
  });
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (size_t i = 0; i < out.numel(); i++) po[i] = pa[i] - pb[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  auto an = a.node(), bn = b.node();
  Tensor out = make_op(a.shape(), {a, b}, [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.numel(); i++) an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.numel(); i++) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (size_t i = 0; i < out.numel(); i++) po[i] = pa[i] * pb[i];
  return out;
}

inline Tensor scale(const Tensor& a, float s) {
  auto an = a.node();
  Tensor out = make_op(a.shape(), {a}, [an, s](TensorNode& self) {
    an->ensure_grad();
    for (size_t i = 0; i < self.numel(); i++) an->grad[i] += self.grad[i] * s;
  });
  const float* pa = a.data();
  float* po = out.data();
  for (size_t i = 0; i < out.numel(); i++) po[i] = pa[i] * s;
  return out;
}

// Multiply by a single-element tensor (learnable scalar, e.g. a logit scale).
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  TOKEDIT_CHECK(s.numel() == 1, ShapeError, "scale_by: scalar tensor expected");
  auto an = a.node(), sn = s.node();
  Tensor out = make_op(a.shape(), {a, s}, [an, sn](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      float sv = sn->value[0];
      for (size_t i = 0; i < self.numel(); i++) an->grad[i] += self.grad[i] * sv;
    }
    if (sn->requires_grad) {
      sn->ensure_grad();
      double acc = 0.0;
      for (size_t i = 0; i < self.numel(); i++)
        acc += static_cast<double>(self.grad[i]) * an->value[i];
      sn->grad[0] += static_cast<float>(acc);
    }
  });
  const float* pa = a.data();
  float sv = s.scalar();
  float* po = out.data();
  for (size_t i = 0; i < out.numel(); i++) po[i] = pa[i] * sv;
  return out;
}

inline Tensor add_scalar(const Tensor& a, float s) {
  auto an = a.node();
  Tensor out = make_op(a.shape(), {a}, [an](TensorNode& self) {
    detail::accum(*an, self.grad.data(), self.numel());
  });
  const float* pa = a.data();
  float* po = out.data();
  for (size_t i = 0; i < out.numel(); i++) po[i] = pa[i] + s;
  return out;
}

inline Tensor clamp_t(const Tensor& a, float lo, float hi) {
  auto an = a.node();
  Tensor out = make_op(a.shape(), {a}, [an, lo, hi](TensorNode& self) {
    an->ensure_grad();
    for (size_t i = 0; i < self.numel(); i++) {
      if (an->value[i] > lo && an->value[i] < hi) an->grad[i] += self.grad[i];
    }
  });
  const float* pa = a.data();
  float* po = out.data();
  for (size_t i = 0; i < out.numel(); i++) po[i] = std::min(hi, std::max(lo, pa[i]));
  return out;
}

inline Tensor relu(const Tensor& a) {
  auto an = a.node();
  Tensor out = make_op(a.shape(), {a}, [an](TensorNode& self) {
    an->ensure_grad();
    for (size_t i = 0; i < self.numel(); i++)
      if (an->value[i] > 0.0f) an->grad[i] += self.grad[i];
  });
  const float* pa = a.data();
  float* po = out.data();
  for (size_t i = 0; i < out.numel(); i++) po[i] = pa[i] > 0.0f ? pa[i] : 0.0f;
  return out;
}

inline Tensor gelu(const Tensor& a) {
  // exact erf form; derivative Phi(x) + x*phi(x)
  auto an = a.node();
  Tensor out = make_op(a.shape(), {a}, [an](TensorNode& self) {
    an->ensure_grad();
    constexpr float inv_sqrt2 = 0.7071067811865475f;
    constexpr float inv_sqrt2pi = 0.3989422804014327f;
    for (size_t i = 0; i < self.numel(); i++) {
      float x = an->value[i];
      float cdf = 0.5f * (1.0f + std::erf(x * inv_sqrt2));
      float pdf = inv_sqrt2pi * std::exp(-0.5f * x * x);
      an->grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
  const float* pa = a.data();
  float* po = out.data();
  constexpr float inv_sqrt2 = 0.7071067811865475f;
  for (size_t i = 0; i < out.numel(); i++)
    po[i] = 0.5f * pa[i] * (1.0f + std::erf(pa[i] * inv_sqrt2));
  return out;
}

inline Tensor sigmoid(const Tensor& a) {
  auto an = a.node();
  Tensor out = make_op(a.shape(), {a}, [an](TensorNode& self) {
    an->ensure_grad();
    for (size_t i = 0; i < self.numel(); i++) {
      float y = self.value[i];
      an->grad[i] += self.grad[i] * y * (1.0f - y);
    }
  });
  const float* pa = a.data();
  float* po = out.data();
  for (size_t i = 0; i < out.numel(); i++) po[i] = 1.0f / (1.0f + std::exp(-pa[i]));
  return out;
}

inline Tensor dropout(const Tensor& a, float p, Rng& rng, bool training) {
  if (!training || p <= 0.0f) return a;
  auto mask = std::make_shared<std::vector<float>>(a.numel());
  float keep = 1.0f - p;
  for (auto& m : *mask) m = rng.uniform() < keep ? 1.0f / keep : 0.0f;
  auto an = a.node();
  Tensor out = make_op(a.shape(), {a}, [an, mask](TensorNode& self) {
    an->ensure_grad();
    for (size_t i = 0; i < self.numel(); i++) an->grad[i] += self.grad[i] * (*mask)[i];
  });
  const float* pa = a.data();
  float* po = out.data();
  for (size_t i = 0; i < out.numel(); i++) po[i] = pa[i] * (*mask)[i];
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
  TOKEDIT_CHECK(shape_numel(shape) == a.numel(), ShapeError, "reshape: numel mismatch");
  auto an = a.node();
  Tensor out = make_op(std::move(shape), {a}, [an](TensorNode& self) {
    detail::accum(*an, self.grad.data(), self.numel());
  });
  std::memcpy(out.data(), a.data(), a.numel() * sizeof(float));
  return out;
}

// [B, T, H*dh] -> [B*H, T, dh]
inline Tensor split_heads(const Tensor& x, int heads) {
  TOKEDIT_CHECK(x.ndim() == 3, ShapeError, "split_heads: 3-D input expected");
  int B = x.dim(0), T = x.dim(1), D = x.dim(2);
  TOKEDIT_CHECK(D % heads == 0, ShapeError, "split_heads: dim %d not divisible by %d", D, heads);
  int dh = D / heads;
  auto xn = x.node();
  Tensor out = make_op({B * heads, T, dh}, {x}, [xn, B, T, heads, dh](TensorNode& self) {
    xn->ensure_grad();
    int D = heads * dh;
    for (int b = 0; b < B; b++)
      for (int h = 0; h < heads; h++)
        for (int t = 0; t < T; t++) {
          const float* g = &self.grad[(((size_t)b * heads + h) * T + t) * dh];
          float* dst = &xn->grad[((size_t)b * T + t) * D + h * dh];
          for (int c = 0; c < dh; c++) dst[c] += g[c];
        }
  });
  const float* px = x.data();
  float* po = out.data();
  for (int b = 0; b < B; b++)
    for (int h = 0; h < heads; h++)
      for (int t = 0; t < T; t++)
        std::memcpy(&po[(((size_t)b * heads + h) * T + t) * dh],
                    &px[((size_t)b * T + t) * D + h * dh], sizeof(float) * dh);
  return out;
}

// [B*H, T, dh] -> [B, T, H*dh]
inline Tensor merge_heads(const Tensor& x, int heads) {
  TOKEDIT_CHECK(x.ndim() == 3 && x.dim(0) % heads == 0, ShapeError, "merge_heads: bad input");
  int B = x.dim(0) / heads, T = x.dim(1), dh = x.dim(2);
  int D = heads * dh;
  auto xn = x.node();
  Tensor out = make_op({B, T, D}, {x}, [xn, B, T, heads, dh, D](TensorNode& self) {
    xn->ensure_grad();
    for (int b = 0; b < B; b++)
      for (int h = 0; h < heads; h++)
        for (int t = 0; t < T; t++) {
          const float* g = &self.grad[((size_t)b * T + t) * D + h * dh];
          float* dst = &xn->grad[(((size_t)b * heads + h) * T + t) * dh];
          for (int c = 0; c < dh; c++) dst[c] += g[c];
        }
  });
  const float* px = x.data();
  float* po = out.data();
  for (int b = 0; b < B; b++)
    for (int h = 0; h < heads; h++)
      for (int t = 0; t < T; t++)
        std::memcpy(&po[((size_t)b * T + t) * D + h * dh],
                    &px[(((size_t)b * heads + h) * T + t) * dh], sizeof(float) * dh);
  return out;
}

inline Tensor transpose2d(const Tensor& a) {
  TOKEDIT_CHECK(a.ndim() == 2, ShapeError, "transpose2d: 2-D input expected");
  int m = a.dim(0), n = a.dim(1);
  auto an = a.node();
  Tensor out = make_op({n, m}, {a}, [an, m, n](TensorNode& self) {
    an->ensure_grad();
    for (int i = 0; i < n; i++)
      for (int j = 0; j < m; j++) an->grad[(size_t)j * n + i] += self.grad[(size_t)i * m + j];
  });
  CMatMap A(a.data(), m, n);
  MatMap O(out.data(), n, m);
  O = A.transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  TOKEDIT_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), ShapeError,
                "matmul: [%d,%d]x[%d,%d]", a.dim(0), a.dim(1), b.dim(0), b.dim(1));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto an = a.node(), bn = b.node();
  Tensor out = make_op({m, n}, {a, b}, [an, bn, m, k, n](TensorNode& self) {
    MatMap G(self.grad.data(), m, n);
    if (an->requires_grad) {
      an->ensure_grad();
      MatMap dA(an->grad.data(), m, k);
      CMatMap B(bn->value.data(), k, n);
      dA.noalias() += G * B.transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      MatMap dB(bn->grad.data(), k, n);
      CMatMap A(an->value.data(), m, k);
      dB.noalias() += A.transpose() * G;
    }
  });
  CMatMap A(a.data(), m, k), B(b.data(), k, n);
  MatMap O(out.data(), m, n);
  O.noalias() = A * B;
  return out;
}

// a [m,k] x b[n,k]^T -> [m,n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  TOKEDIT_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1), ShapeError,
                "matmul_nt: inner dims differ");
  int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  auto an = a.node(), bn = b.node();
  Tensor out = make_op({m, n}, {a, b}, [an, bn, m, k, n](TensorNode& self) {
    MatMap G(self.grad.data(), m, n);
    if (an->requires_grad) {
      an->ensure_grad();
      MatMap dA(an->grad.data(), m, k);
      CMatMap B(bn->value.data(), n, k);
      dA.noalias() += G * B;
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      MatMap dB(bn->grad.data(), n, k);
      CMatMap A(an->value.data(), m, k);
      dB.noalias() += G.transpose() * A;
    }
  });
  CMatMap A(a.data(), m, k), B(b.data(), n, k);
  MatMap O(out.data(), m, n);
  O.noalias() = A * B.transpose();
  return out;
}

// Batched products over leading dim. trans_b treats b as [B, n, k] and
// multiplies by its per-batch transpose.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false) {
  TOKEDIT_CHECK(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0), ShapeError,
                "bmm: bad batch dims");
  int B = a.dim(0), m = a.dim(1), k = a.dim(2);
  int n = trans_b ? b.dim(1) : b.dim(2);
  TOKEDIT_CHECK(trans_b ? b.dim(2) == k : b.dim(1) == k, ShapeError, "bmm: inner dims differ");
  auto an = a.node(), bn = b.node();
  Tensor out = make_op({B, m, n}, {a, b}, [an, bn, B, m, k, n, trans_b](TensorNode& self) {
    for (int i = 0; i < B; i++) {
      MatMap G(&self.grad[(size_t)i * m * n], m, n);
      if (an->requires_grad) {
        an->ensure_grad();
        MatMap dA(&an->grad[(size_t)i * m * k], m, k);
        if (trans_b) {
          CMatMap Bi(&bn->value[(size_t)i * n * k], n, k);
          dA.noalias() += G * Bi;
        } else {
          CMatMap Bi(&bn->value[(size_t)i * k * n], k, n);
          dA.noalias() += G * Bi.transpose();
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        CMatMap A(&an->value[(size_t)i * m * k], m, k);
        if (trans_b) {
          MatMap dB(&bn->grad[(size_t)i * n * k], n, k);
          dB.noalias() += G.transpose() * A;
        } else {
          MatMap dB(&bn->grad[(size_t)i * k * n], k, n);
          dB.noalias() += A.transpose() * G;
        }
      }
    }
  });
  for (int i = 0; i < B; i++) {
    CMatMap A(&a.data()[(size_t)i * m * k], m, k);
    MatMap O(&out.data()[(size_t)i * m * n], m, n);
    if (trans_b) {
      CMatMap Bi(&b.data()[(size_t)i * n * k], n, k);
      O.noalias() = A * Bi.transpose();
    } else {
      CMatMap Bi(&b.data()[(size_t)i * k * n], k, n);
      O.noalias() = A * Bi;
    }
  }
  return out;
}

// x [..., Din] @ w [Din, Dout] + b. A 3-D input runs one GEMM per leading
// index: identical samples then follow identical kernel paths, so equal
// sequences in a batch produce bitwise-equal rows no matter where they sit.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
  TOKEDIT_CHECK(w.ndim() == 2 && x.dim(x.ndim() - 1) == w.dim(0), ShapeError,
                "linear: input dim %d vs weight %d", x.dim(x.ndim() - 1), w.dim(0));
  int din = w.dim(0), dout = w.dim(1);
  int rows = static_cast<int>(x.numel()) / din;
  int chunks = x.ndim() == 3 ? x.dim(0) : 1;
  int chunk_rows = rows / std::max(1, chunks);
  std::vector<int> out_shape(x.shape());
  out_shape.back() = dout;
  std::vector<Tensor> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  auto xn = x.node(), wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  Tensor out = make_op(std::move(out_shape), parents,
                       [xn, wn, bn, chunks, chunk_rows, din, dout](TensorNode& self) {
    CMatMap W(wn->value.data(), din, dout);
    for (int c = 0; c < chunks; c++) {
      MatMap G(&self.grad[(size_t)c * chunk_rows * dout], chunk_rows, dout);
      if (xn->requires_grad) {
        xn->ensure_grad();
        MatMap dX(&xn->grad[(size_t)c * chunk_rows * din], chunk_rows, din);
        dX.noalias() += G * W.transpose();
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        MatMap dW(wn->grad.data(), din, dout);
        CMatMap X(&xn->value[(size_t)c * chunk_rows * din], chunk_rows, din);
        dW.noalias() += X.transpose() * G;
      }
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      int rows = chunks * chunk_rows;
      for (int r = 0; r < rows; r++)
        for (int c = 0; c < dout; c++) bn->grad[c] += self.grad[(size_t)r * dout + c];
    }
  });
  CMatMap W(w.data(), din, dout);
  for (int c = 0; c < chunks; c++) {
    CMatMap X(&x.data()[(size_t)c * chunk_rows * din], chunk_rows, din);
    MatMap O(&out.data()[(size_t)c * chunk_rows * dout], chunk_rows, dout);
    O.noalias() = X * W;
  }
  if (b.defined()) {
    TOKEDIT_CHECK(b.numel() == static_cast<size_t>(dout), ShapeError, "linear: bias size");
    for (int r = 0; r < rows; r++)
      for (int c = 0; c < dout; c++) out.data()[(size_t)r * dout + c] += b.data()[c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Broadcast add: x [B, ...inner] + y [...inner]
// ---------------------------------------------------------------------------

inline Tensor add_bcast0(const Tensor& x, const Tensor& y) {
  TOKEDIT_CHECK(x.numel() % y.numel() == 0, ShapeError, "add_bcast0: sizes incompatible");
  size_t inner = y.numel();
  size_t reps = x.numel() / inner;
  auto xn = x.node(), yn = y.node();
  Tensor out = make_op(x.shape(), {x, y}, [xn, yn, inner, reps](TensorNode& self) {
    if (xn->requires_grad) detail::accum(*xn, self.grad.data(), self.numel());
    if (yn->requires_grad) {
      yn->ensure_grad();
      for (size_t r = 0; r < reps; r++)
        for (size_t i = 0; i < inner; i++) yn->grad[i] += self.grad[r * inner + i];
    }
  });
  const float* px = x.data();
  const float* py = y.data();
  float* po = out.data();
  for (size_t r = 0; r < reps; r++)
    for (size_t i = 0; i < inner; i++) po[r * inner + i] = px[r * inner + i] + py[i];
  return out;
}

// ---------------------------------------------------------------------------
// Normalization / softmax / reductions
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         float eps = 1e-5f) {
  int d = x.dim(x.ndim() - 1);
  TOKEDIT_CHECK(gamma.numel() == static_cast<size_t>(d) && beta.numel() == static_cast<size_t>(d),
                ShapeError, "layer_norm: param size mismatch");
  int rows = static_cast<int>(x.numel()) / d;
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  Tensor out = make_op(x.shape(), {x, gamma, beta},
                       [xn, gn, bn, xhat, inv_std, rows, d](TensorNode& self) {
    for (int r = 0; r < rows; r++) {
      const float* g = &self.grad[(size_t)r * d];
      const float* xh = &(*xhat)[(size_t)r * d];
      float istd = (*inv_std)[r];
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (int i = 0; i < d; i++) gn->grad[i] += g[i] * xh[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int i = 0; i < d; i++) bn->grad[i] += g[i];
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        float* dx = &xn->grad[(size_t)r * d];
        double sum_gy = 0.0, sum_gyx = 0.0;
        for (int i = 0; i < d; i++) {
          float gy = g[i] * gn->value[i];
          sum_gy += gy;
          sum_gyx += static_cast<double>(gy) * xh[i];
        }
        float mg = static_cast<float>(sum_gy / d);
        float mgx = static_cast<float>(sum_gyx / d);
        for (int i = 0; i < d; i++) {
          float gy = g[i] * gn->value[i];
          dx[i] += istd * (gy - mg - xh[i] * mgx);
        }
      }
    }
  });
  const float* px = x.data();
  float* po = out.data();
  for (int r = 0; r < rows; r++) {
    const float* xr = &px[(size_t)r * d];
    double mean = 0.0;
    for (int i = 0; i < d; i++) mean += xr[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; i++) {
      double c = xr[i] - mean;
      var += c * c;
    }
    var /= d;
    float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[r] = istd;
    for (int i = 0; i < d; i++) {
      float xh = (xr[i] - static_cast<float>(mean)) * istd;
      (*xhat)[(size_t)r * d + i] = xh;
      po[(size_t)r * d + i] = xh * gamma.data()[i] + beta.data()[i];
    }
  }
  return out;
}

inline Tensor softmax_lastdim(const Tensor& x) {
  int d = x.dim(x.ndim() - 1);
  int rows = static_cast<int>(x.numel()) / d;
  auto xn = x.node();
  Tensor out = make_op(x.shape(), {x}, [xn, rows, d](TensorNode& self) {
    xn->ensure_grad();
    for (int r = 0; r < rows; r++) {
      const float* g = &self.grad[(size_t)r * d];
      const float* p = &self.value[(size_t)r * d];
      float* dx = &xn->grad[(size_t)r * d];
      double dot = 0.0;
      for (int i = 0; i < d; i++) dot += static_cast<double>(g[i]) * p[i];
      for (int i = 0; i < d; i++) dx[i] += p[i] * (g[i] - static_cast<float>(dot));
    }
  });
  const float* px = x.data();
  float* po = out.data();
  for (int r = 0; r < rows; r++) {
    const float* xr = &px[(size_t)r * d];
    float* pr = &po[(size_t)r * d];
    float mx = xr[0];
    for (int i = 1; i < d; i++) mx = std::max(mx, xr[i]);
    double sum = 0.0;
    for (int i = 0; i < d; i++) {
      pr[i] = std::exp(xr[i] - mx);
      sum += pr[i];
    }
    float inv = static_cast<float>(1.0 / sum);
    for (int i = 0; i < d; i++) pr[i] *= inv;
  }
  return out;
}

// Mean of -log softmax(logits)[target] over rows with weight > 0.
// weights are fixed (no grad); result = sum_i w_i*nll_i / sum_i w_i.
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets,
                                 const std::vector<float>& weights) {
  TOKEDIT_CHECK(logits.ndim() == 2, ShapeError, "cross_entropy_mean: 2-D logits expected");
  int rows = logits.dim(0), d = logits.dim(1);
  TOKEDIT_CHECK(targets.size() == static_cast<size_t>(rows) && weights.size() == targets.size(),
                ShapeError, "cross_entropy_mean: rows mismatch");
  double wsum = 0.0;
  for (float w : weights) wsum += w;
  auto probs = std::make_shared<std::vector<float>>();
  auto tgt = std::make_shared<std::vector<int>>(targets);
  auto wts = std::make_shared<std::vector<float>>(weights);
  auto ln = logits.node();
  Tensor out = make_op({1}, {logits}, [ln, probs, tgt, wts, rows, d, wsum](TensorNode& self) {
    if (wsum <= 0.0) return;
    ln->ensure_grad();
    float g = self.grad[0];
    for (int r = 0; r < rows; r++) {
      float w = (*wts)[r];
      if (w <= 0.0f) continue;
      float coeff = g * w / static_cast<float>(wsum);
      const float* p = &(*probs)[(size_t)r * d];
      float* dl = &ln->grad[(size_t)r * d];
      int t = (*tgt)[r];
      for (int i = 0; i < d; i++) dl[i] += coeff * p[i];
      dl[t] -= coeff;
    }
  });
  probs->assign((size_t)rows * d, 0.0f);
  const float* px = logits.data();
  double total = 0.0;
  for (int r = 0; r < rows; r++) {
    float w = weights[r];
    if (w <= 0.0f) continue;
    int t = targets[r];
    TOKEDIT_CHECK(t >= 0 && t < d, ShapeError, "cross_entropy_mean: target %d out of range", t);
    const float* xr = &px[(size_t)r * d];
    float mx = xr[0];
    for (int i = 1; i < d; i++) mx = std::max(mx, xr[i]);
    double sum = 0.0;
    float* pr = &(*probs)[(size_t)r * d];
    for (int i = 0; i < d; i++) {
      pr[i] = std::exp(xr[i] - mx);
      sum += pr[i];
    }
    float inv = static_cast<float>(1.0 / sum);
    for (int i = 0; i < d; i++) pr[i] *= inv;
    total += w * -std::log(std::max(static_cast<double>(pr[t]), 1e-30));
  }
  out.data()[0] = wsum > 0.0 ? static_cast<float>(total / wsum) : 0.0f;
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  auto xn = x.node();
  size_t n = x.numel();
  Tensor out = make_op({1}, {x}, [xn, n](TensorNode& self) {
    xn->ensure_grad();
    float c = self.grad[0] / static_cast<float>(n);
    for (size_t i = 0; i < n; i++) xn->grad[i] += c;
  });
  double acc = 0.0;
  for (size_t i = 0; i < n; i++) acc += x.data()[i];
  out.data()[0] = static_cast<float>(acc / static_cast<double>(n));
  return out;
}

inline Tensor sum_all(const Tensor& x) {
  auto xn = x.node();
  size_t n = x.numel();
  Tensor out = make_op({1}, {x}, [xn, n](TensorNode& self) {
    xn->ensure_grad();
    for (size_t i = 0; i < n; i++) xn->grad[i] += self.grad[0];
  });
  double acc = 0.0;
  for (size_t i = 0; i < n; i++) acc += x.data()[i];
  out.data()[0] = static_cast<float>(acc);
  return out;
}

// [N, D] -> [N]
inline Tensor sum_lastdim(const Tensor& x) {
  int d = x.dim(x.ndim() - 1);
  int rows = static_cast<int>(x.numel()) / d;
  std::vector<int> shp(x.shape().begin(), x.shape().end() - 1);
  auto xn = x.node();
  Tensor out = make_op(shp, {x}, [xn, rows, d](TensorNode& self) {
    xn->ensure_grad();
    for (int r = 0; r < rows; r++)
      for (int i = 0; i < d; i++) xn->grad[(size_t)r * d + i] += self.grad[r];
  });
  for (int r = 0; r < rows; r++) {
    double acc = 0.0;
    for (int i = 0; i < d; i++) acc += x.data()[(size_t)r * d + i];
    out.data()[r] = static_cast<float>(acc);
  }
  return out;
}

// x [B, T, D], w [B*T] fixed weights -> [B, D]; per-sample weighted mean.
inline Tensor weighted_mean_axis1(const Tensor& x, const std::vector<float>& w) {
  TOKEDIT_CHECK(x.ndim() == 3, ShapeError, "weighted_mean_axis1: 3-D input expected");
  int B = x.dim(0), T = x.dim(1), D = x.dim(2);
  TOKEDIT_CHECK(w.size() == static_cast<size_t>(B) * T, ShapeError, "weighted_mean_axis1: weights");
  auto wp = std::make_shared<std::vector<float>>(w);
  std::vector<double> denom(B, 0.0);
  for (int b = 0; b < B; b++)
    for (int t = 0; t < T; t++) denom[b] += w[(size_t)b * T + t];
  auto dn = std::make_shared<std::vector<double>>(denom);
  auto xn = x.node();
  Tensor out = make_op({B, D}, {x}, [xn, wp, dn, B, T, D](TensorNode& self) {
    xn->ensure_grad();
    for (int b = 0; b < B; b++) {
      double dnv = (*dn)[b];
      if (dnv <= 0.0) continue;
      for (int t = 0; t < T; t++) {
        float c = static_cast<float>((*wp)[(size_t)b * T + t] / dnv);
        if (c == 0.0f) continue;
        const float* g = &self.grad[(size_t)b * D];
        float* dx = &xn->grad[((size_t)b * T + t) * D];
        for (int i = 0; i < D; i++) dx[i] += c * g[i];
      }
    }
  });
  for (int b = 0; b < B; b++) {
    double dnv = denom[b];
    for (int i = 0; i < D; i++) {
      double acc = 0.0;
      for (int t = 0; t < T; t++)
        acc += static_cast<double>(w[(size_t)b * T + t]) * x.data()[((size_t)b * T + t) * D + i];
      out.data()[(size_t)b * D + i] = dnv > 0.0 ? static_cast<float>(acc / dnv) : 0.0f;
    }
  }
  return out;
}

// Row-wise x / ||x||; treats the last dim as the vector.
inline Tensor l2_normalize_rows(const Tensor& x, float eps = 1e-12f) {
  int d = x.dim(x.ndim() - 1);
  int rows = static_cast<int>(x.numel()) / d;
  auto inv_norm = std::make_shared<std::vector<float>>(rows);
  auto xn = x.node();
  Tensor out = make_op(x.shape(), {x}, [xn, inv_norm, rows, d](TensorNode& self) {
    xn->ensure_grad();
    for (int r = 0; r < rows; r++) {
      const float* g = &self.grad[(size_t)r * d];
      const float* y = &self.value[(size_t)r * d];
      float* dx = &xn->grad[(size_t)r * d];
      float in = (*inv_norm)[r];
      double dot = 0.0;
      for (int i = 0; i < d; i++) dot += static_cast<double>(g[i]) * y[i];
      for (int i = 0; i < d; i++)
        dx[i] += in * (g[i] - y[i] * static_cast<float>(dot));
    }
  });
  for (int r = 0; r < rows; r++) {
    const float* xr = &x.data()[(size_t)r * d];
    double s = 0.0;
    for (int i = 0; i < d; i++) s += static_cast<double>(xr[i]) * xr[i];
    float in = static_cast<float>(1.0 / std::sqrt(s + eps));
    (*inv_norm)[r] = in;
    for (int i = 0; i < d; i++) out.data()[(size_t)r * d + i] = xr[i] * in;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gather / embedding
// ---------------------------------------------------------------------------

// table [V, D] indexed by ids; id -1 yields a zero row (used for positions
// that have no entry in a given positional table).
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  TOKEDIT_CHECK(table.ndim() == 2, ShapeError, "embedding: 2-D table expected");
  int V = table.dim(0), D = table.dim(1);
  int n = static_cast<int>(ids.size());
  auto idp = std::make_shared<std::vector<int>>(ids);
  auto tn = table.node();
  Tensor out = make_op({n, D}, {table}, [tn, idp, n, D](TensorNode& self) {
    tn->ensure_grad();
    for (int r = 0; r < n; r++) {
      int id = (*idp)[r];
      if (id < 0) continue;
      const float* g = &self.grad[(size_t)r * D];
      float* dst = &tn->grad[(size_t)id * D];
      for (int i = 0; i < D; i++) dst[i] += g[i];
    }
  });
  for (int r = 0; r < n; r++) {
    int id = ids[r];
    if (id < 0) continue;
    TOKEDIT_CHECK(id < V, ShapeError, "embedding: id %d out of range %d", id, V);
    std::memcpy(&out.data()[(size_t)r * D], &table.data()[(size_t)id * D], sizeof(float) * D);
  }
  return out;
}

inline Tensor gather_rows(const Tensor& x, const std::vector<int>& rows_idx) {
  TOKEDIT_CHECK(x.ndim() == 2, ShapeError, "gather_rows: 2-D input expected");
  int N = x.dim(0), D = x.dim(1);
  int n = static_cast<int>(rows_idx.size());
  auto idp = std::make_shared<std::vector<int>>(rows_idx);
  auto xn = x.node();
  Tensor out = make_op({n, D}, {x}, [xn, idp, n, D](TensorNode& self) {
    xn->ensure_grad();
    for (int r = 0; r < n; r++) {
      const float* g = &self.grad[(size_t)r * D];
      float* dst = &xn->grad[(size_t)(*idp)[r] * D];
      for (int i = 0; i < D; i++) dst[i] += g[i];
    }
  });
  for (int r = 0; r < n; r++) {
    int id = rows_idx[r];
    TOKEDIT_CHECK(id >= 0 && id < N, ShapeError, "gather_rows: row %d out of range", id);
    std::memcpy(&out.data()[(size_t)r * D], &x.data()[(size_t)id * D], sizeof(float) * D);
  }
  return out;
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  TOKEDIT_CHECK(x.ndim() == 2 && c0 >= 0 && c1 <= x.dim(1) && c0 < c1, ShapeError,
                "slice_cols: bad range [%d,%d)", c0, c1);
  int N = x.dim(0), D = x.dim(1), W = c1 - c0;
  auto xn = x.node();
  Tensor out = make_op({N, W}, {x}, [xn, N, D, c0, W](TensorNode& self) {
    xn->ensure_grad();
    for (int r = 0; r < N; r++)
      for (int i = 0; i < W; i++)
        xn->grad[(size_t)r * D + c0 + i] += self.grad[(size_t)r * W + i];
  });
  for (int r = 0; r < N; r++)
    std::memcpy(&out.data()[(size_t)r * W], &x.data()[(size_t)r * D + c0], sizeof(float) * W);
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (im2col) and 2x nearest upsampling, NCHW
// ---------------------------------------------------------------------------

namespace detail {
inline void im2col(const float* img, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int oh, int ow, float* cols) {
  // cols is [C*kh*kw, oh*ow]
  int ocols = oh * ow;
  for (int c = 0; c < C; c++)
    for (int ky = 0; ky < kh; ky++)
      for (int kx = 0; kx < kw; kx++) {
        float* dst = cols + (size_t)((c * kh + ky) * kw + kx) * ocols;
        for (int y = 0; y < oh; y++) {
          int iy = y * stride + ky - pad;
          for (int x = 0; x < ow; x++) {
            int ix = x * stride + kx - pad;
            dst[y * ow + x] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                  ? img[((size_t)c * H + iy) * W + ix]
                                  : 0.0f;
          }
        }
      }
}

inline void col2im_accum(const float* cols, int C, int H, int W, int kh, int kw, int stride,
                         int pad, int oh, int ow, float* img) {
  int ocols = oh * ow;
  for (int c = 0; c < C; c++)
    for (int ky = 0; ky < kh; ky++)
      for (int kx = 0; kx < kw; kx++) {
        const float* src = cols + (size_t)((c * kh + ky) * kw + kx) * ocols;
        for (int y = 0; y < oh; y++) {
          int iy = y * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          for (int x = 0; x < ow; x++) {
            int ix = x * stride + kx - pad;
            if (ix < 0 || ix >= W) continue;
            img[((size_t)c * H + iy) * W + ix] += src[y * ow + x];
          }
        }
      }
}
}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  TOKEDIT_CHECK(x.ndim() == 4 && w.ndim() == 4, ShapeError, "conv2d: NCHW input and OIHW weight");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Co = w.dim(0), Ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  TOKEDIT_CHECK(C == Ci, ShapeError, "conv2d: channels %d vs weight %d", C, Ci);
  int oh = (H + 2 * pad - kh) / stride + 1;
  int ow = (W + 2 * pad - kw) / stride + 1;
  TOKEDIT_CHECK(oh > 0 && ow > 0, ShapeError, "conv2d: empty output");
  int k = Ci * kh * kw, ocols = oh * ow;
  std::vector<Tensor> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  auto xn = x.node(), wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  // keep the im2col buffers for backward
  auto cols_all = std::make_shared<std::vector<float>>((size_t)N * k * ocols);
  for (int i = 0; i < N; i++)
    detail::im2col(&x.data()[(size_t)i * C * H * W], C, H, W, kh, kw, stride, pad, oh, ow,
                   &(*cols_all)[(size_t)i * k * ocols]);

  Tensor out = make_op({N, Co, oh, ow}, parents,
                       [xn, wn, bn, cols_all, N, C, H, W, Co, kh, kw, stride, pad, oh, ow,
                        k, ocols](TensorNode& self) {
    for (int i = 0; i < N; i++) {
      MatMap G(&self.grad[(size_t)i * Co * ocols], Co, ocols);
      CMatMap Cols(&(*cols_all)[(size_t)i * k * ocols], k, ocols);
      if (wn->requires_grad) {
        wn->ensure_grad();
        MatMap dW(wn->grad.data(), Co, k);
        dW.noalias() += G * Cols.transpose();
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int co = 0; co < Co; co++) {
          double acc = 0.0;
          for (int p = 0; p < ocols; p++) acc += self.grad[((size_t)i * Co + co) * ocols + p];
          bn->grad[co] += static_cast<float>(acc);
        }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        RowMat dcols(k, ocols);
        CMatMap Wm(wn->value.data(), Co, k);
        dcols.noalias() = Wm.transpose() * G;
        detail::col2im_accum(dcols.data(), C, H, W, kh, kw, stride, pad, oh, ow,
                             &xn->grad[(size_t)i * C * H * W]);
      }
    }
  });
  CMatMap Wm(w.data(), Co, k);
  for (int i = 0; i < N; i++) {
    CMatMap Cols(&(*cols_all)[(size_t)i * k * ocols], k, ocols);
    MatMap O(&out.data()[(size_t)i * Co * ocols], Co, ocols);
    O.noalias() = Wm * Cols;
    if (b.defined())
      for (int co = 0; co < Co; co++)
        for (int p = 0; p < ocols; p++) out.data()[((size_t)i * Co + co) * ocols + p] += b.data()[co];
  }
  if (!out.requires_grad()) cols_all->clear();
  return out;
}

inline Tensor upsample_nearest2(const Tensor& x) {
  TOKEDIT_CHECK(x.ndim() == 4, ShapeError, "upsample_nearest2: NCHW input expected");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto xn = x.node();
  Tensor out = make_op({N, C, 2 * H, 2 * W}, {x}, [xn, N, C, H, W](TensorNode& self) {
    xn->ensure_grad();
    for (int n = 0; n < N; n++)
      for (int c = 0; c < C; c++)
        for (int y = 0; y < 2 * H; y++)
          for (int x2 = 0; x2 < 2 * W; x2++)
            xn->grad[(((size_t)n * C + c) * H + y / 2) * W + x2 / 2] +=
                self.grad[(((size_t)n * C + c) * 2 * H + y) * 2 * W + x2];
  });
  for (int n = 0; n < N; n++)
    for (int c = 0; c < C; c++)
      for (int y = 0; y < 2 * H; y++)
        for (int x2 = 0; x2 < 2 * W; x2++)
          out.data()[(((size_t)n * C + c) * 2 * H + y) * 2 * W + x2] =
              x.data()[(((size_t)n * C + c) * H + y / 2) * W + x2 / 2];
  return out;
}

// [N,C,H,W] -> [N*H*W, C]: per-position channel vectors as rows.
inline Tensor channels_last(const Tensor& x) {
  TOKEDIT_CHECK(x.ndim() == 4, ShapeError, "channels_last: NCHW input expected");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto xn = x.node();
  Tensor out = make_op({N * H * W, C}, {x}, [xn, N, C, H, W](TensorNode& self) {
    xn->ensure_grad();
    for (int n = 0; n < N; n++)
      for (int y = 0; y < H; y++)
        for (int xx = 0; xx < W; xx++) {
          const float* g = &self.grad[((size_t)(n * H + y) * W + xx) * C];
          for (int c = 0; c < C; c++)
            xn->grad[(((size_t)n * C + c) * H + y) * W + xx] += g[c];
        }
  });
  for (int n = 0; n < N; n++)
    for (int y = 0; y < H; y++)
      for (int xx = 0; xx < W; xx++) {
        float* o = &out.data()[((size_t)(n * H + y) * W + xx) * C];
        for (int c = 0; c < C; c++) o[c] = x.data()[(((size_t)n * C + c) * H + y) * W + xx];
      }
  return out;
}

// [N*H*W, C] -> [N,C,H,W]
inline Tensor channels_first(const Tensor& x, int N, int H, int W) {
  TOKEDIT_CHECK(x.ndim() == 2 && x.dim(0) == N * H * W, ShapeError,
                "channels_first: rows %d != %d", x.dim(0), N * H * W);
  int C = x.dim(1);
  auto xn = x.node();
  Tensor out = make_op({N, C, H, W}, {x}, [xn, N, C, H, W](TensorNode& self) {
    xn->ensure_grad();
    for (int n = 0; n < N; n++)
      for (int y = 0; y < H; y++)
        for (int xx = 0; xx < W; xx++) {
          float* g = &xn->grad[((size_t)(n * H + y) * W + xx) * C];
          for (int c = 0; c < C; c++)
            g[c] += self.grad[(((size_t)n * C + c) * H + y) * W + xx];
        }
  });
  for (int n = 0; n < N; n++)
    for (int y = 0; y < H; y++)
      for (int xx = 0; xx < W; xx++) {
        const float* src = &x.data()[((size_t)(n * H + y) * W + xx) * C];
        for (int c = 0; c < C; c++)
          out.data()[(((size_t)n * C + c) * H + y) * W + xx] = src[c];
      }
  return out;
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

inline Tensor mse_mean(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return mean_all(mul(d, d));
}

inline bool all_finite(const Tensor& t) {
  for (size_t i = 0; i < t.numel(); i++)
    if (!std::isfinite(t.data()[i])) return false;
  return true;
}

}  // namespace tokedit
