#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "charkeeper/common.hpp"

namespace charkeeper {

// ---------------------------------------------------------------------------
// Dense tensor. 2-D [rows x cols] for all differentiable math; 3-D only for
// exported attention traces.
// ---------------------------------------------------------------------------

template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(numel_of(shape), fill);
  }
  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::runtime_error("Tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }
  std::size_t numel() const { return data.size(); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }

  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Reverse-mode autodiff over a dynamically recorded graph.
//
// backward() computes pass-local gradients in fresh buffers and then adds the
// pass result into each node's persistent grad, so repeating a backward pass
// doubles every gradient buffer exactly.
// ---------------------------------------------------------------------------

template <class T>
struct Node;

template <class T>
using VarPtr = std::shared_ptr<Node<T>>;

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // persistent accumulated gradient; empty until first backward
  bool requires_grad = false;
  std::vector<VarPtr<T>> parents;
  // Pass-local backward: reads `gout`, accumulates into parent buffers
  // (nullptr entries mark parents that do not require grad).
  std::function<void(const Tensor<T>& gout, const std::vector<Tensor<T>*>& gparents)> backfn;

  Tensor<T>& ensure_grad() {
    if (grad.data.empty()) grad = Tensor<T>(value.shape, T(0));
    return grad;
  }
  void zero_grad() {
    if (!grad.data.empty()) std::fill(grad.data.begin(), grad.data.end(), T(0));
  }
};

inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
};

template <class T>
VarPtr<T> make_param(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

template <class T>
VarPtr<T> make_constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = false;
  return n;
}

template <class T>
bool any_requires(const std::vector<VarPtr<T>>& parents) {
  for (const auto& p : parents)
    if (p && p->requires_grad) return true;
  return false;
}

template <class T, class Back>
VarPtr<T> make_op(Tensor<T> value, std::vector<VarPtr<T>> parents, Back&& backfn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  const bool track = g_grad_enabled && any_requires(parents);
  n->requires_grad = track;
  if (track) {
    n->parents = std::move(parents);
    n->backfn = std::forward<Back>(backfn);
  }
  return n;
}

template <class T>
void backward(const VarPtr<T>& root) {
  if (!root) throw std::runtime_error("backward: null root");
  if (!root->requires_grad) return;
  // Iterative topological order over the recorded graph.
  std::vector<Node<T>*> topo;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx].get();
      ++idx;
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  // Pass-local gradient buffers.
  std::unordered_map<Node<T>*, Tensor<T>> buf;
  buf.reserve(topo.size());
  buf[root.get()] = Tensor<T>(root->value.shape, T(1));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node<T>* node = *it;
    auto found = buf.find(node);
    if (found == buf.end()) continue;  // unreachable from root's grad flow
    if (!node->backfn) continue;
    std::vector<Tensor<T>*> gparents(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      Node<T>* p = node->parents[i].get();
      if (!p || !p->requires_grad) continue;
      auto [slot, inserted] = buf.try_emplace(p);
      if (inserted) slot->second = Tensor<T>(p->value.shape, T(0));
      gparents[i] = &slot->second;
    }
    node->backfn(found->second, gparents);
  }
  // Fold the pass into persistent grads.
  for (auto& [node, g] : buf) {
    Tensor<T>& acc = node->ensure_grad();
    for (std::size_t i = 0; i < g.data.size(); ++i) acc.data[i] += g.data[i];
  }
}

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
void check_2d(const Tensor<T>& t, const char* what) {
  if (t.shape.size() != 2) throw std::runtime_error(std::string(what) + ": expected 2-D tensor");
}
}  // namespace detail

// c = a @ b, [m x k] @ [k x n]
template <class T>
VarPtr<T> matmul(const VarPtr<T>& a, const VarPtr<T>& b) {
  detail::check_2d(a->value, "matmul lhs");
  detail::check_2d(b->value, "matmul rhs");
  const int m = a->value.rows(), k = a->value.cols(), n = b->value.cols();
  if (b->value.rows() != k) throw std::runtime_error("matmul: inner dimensions differ");
  Tensor<T> out({m, n}, T(0));
  for (int i = 0; i < m; ++i) {
    const T* arow = &a->value.data[static_cast<std::size_t>(i) * k];
    T* orow = &out.data[static_cast<std::size_t>(i) * n];
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = &b->value.data[static_cast<std::size_t>(p) * n];
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  Tensor<T> aval = a->value, bval = b->value;
  return make_op(std::move(out), {a, b},
                 [aval, bval, m, k, n](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (gp[0]) {  // ga += g @ b^T
                     for (int i = 0; i < m; ++i)
                       for (int p = 0; p < k; ++p) {
                         T acc = T(0);
                         const T* grow = &g.data[static_cast<std::size_t>(i) * n];
                         const T* brow = &bval.data[static_cast<std::size_t>(p) * n];
                         for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                         gp[0]->data[static_cast<std::size_t>(i) * k + p] += acc;
                       }
                   }
                   if (gp[1]) {  // gb += a^T @ g
                     for (int p = 0; p < k; ++p)
                       for (int i = 0; i < m; ++i) {
                         const T av = aval.data[static_cast<std::size_t>(i) * k + p];
                         if (av == T(0)) continue;
                         const T* grow = &g.data[static_cast<std::size_t>(i) * n];
                         T* brow = &gp[1]->data[static_cast<std::size_t>(p) * n];
                         for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                       }
                   }
                 });
}

// c = a @ b^T, [m x k] @ [n x k]^T -> [m x n]
template <class T>
VarPtr<T> matmul_nt(const VarPtr<T>& a, const VarPtr<T>& b) {
  detail::check_2d(a->value, "matmul_nt lhs");
  detail::check_2d(b->value, "matmul_nt rhs");
  const int m = a->value.rows(), k = a->value.cols(), n = b->value.rows();
  if (b->value.cols() != k) throw std::runtime_error("matmul_nt: inner dimensions differ");
  Tensor<T> out({m, n}, T(0));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      T acc = T(0);
      const T* arow = &a->value.data[static_cast<std::size_t>(i) * k];
      const T* brow = &b->value.data[static_cast<std::size_t>(j) * k];
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out.at(i, j) = acc;
    }
  Tensor<T> aval = a->value, bval = b->value;
  return make_op(std::move(out), {a, b},
                 [aval, bval, m, k, n](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (gp[0]) {  // ga += g @ b
                     for (int i = 0; i < m; ++i)
                       for (int j = 0; j < n; ++j) {
                         const T gv = g.data[static_cast<std::size_t>(i) * n + j];
                         if (gv == T(0)) continue;
                         const T* brow = &bval.data[static_cast<std::size_t>(j) * k];
                         T* arow = &gp[0]->data[static_cast<std::size_t>(i) * k];
                         for (int p = 0; p < k; ++p) arow[p] += gv * brow[p];
                       }
                   }
                   if (gp[1]) {  // gb += g^T @ a
                     for (int i = 0; i < m; ++i)
                       for (int j = 0; j < n; ++j) {
                         const T gv = g.data[static_cast<std::size_t>(i) * n + j];
                         if (gv == T(0)) continue;
                         const T* arow = &aval.data[static_cast<std::size_t>(i) * k];
                         T* brow = &gp[1]->data[static_cast<std::size_t>(j) * k];
                         for (int p = 0; p < k; ++p) brow[p] += gv * arow[p];
                       }
                   }
                 });
}

template <class T>
VarPtr<T> add(const VarPtr<T>& a, const VarPtr<T>& b) {
  if (!a->value.same_shape(b->value)) throw std::runtime_error("add: shape mismatch");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
  return make_op(std::move(out), {a, b},
                 [](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   for (int s = 0; s < 2; ++s)
                     if (gp[s])
                       for (std::size_t i = 0; i < g.data.size(); ++i) gp[s]->data[i] += g.data[i];
                 });
}

// a [m x n] + row vector b [1 x n] broadcast over rows
template <class T>
VarPtr<T> add_rowvec(const VarPtr<T>& a, const VarPtr<T>& b) {
  detail::check_2d(a->value, "add_rowvec lhs");
  if (b->value.rows() != 1 || b->value.cols() != a->value.cols())
    throw std::runtime_error("add_rowvec: bias shape mismatch");
  const int m = a->value.rows(), n = a->value.cols();
  Tensor<T> out = a->value;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) += b->value.data[static_cast<std::size_t>(j)];
  return make_op(std::move(out), {a, b},
                 [m, n](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (gp[0])
                     for (std::size_t i = 0; i < g.data.size(); ++i) gp[0]->data[i] += g.data[i];
                   if (gp[1])
                     for (int i = 0; i < m; ++i)
                       for (int j = 0; j < n; ++j)
                         gp[1]->data[static_cast<std::size_t>(j)] +=
                             g.data[static_cast<std::size_t>(i) * n + j];
                 });
}

template <class T>
VarPtr<T> scale(const VarPtr<T>& a, T s) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v *= s;
  return make_op(std::move(out), {a},
                 [s](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (gp[0])
                     for (std::size_t i = 0; i < g.data.size(); ++i) gp[0]->data[i] += s * g.data[i];
                 });
}

template <class T>
VarPtr<T> mul_elem(const VarPtr<T>& a, const VarPtr<T>& b) {
  if (!a->value.same_shape(b->value)) throw std::runtime_error("mul_elem: shape mismatch");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->value.data[i];
  Tensor<T> aval = a->value, bval = b->value;
  return make_op(std::move(out), {a, b},
                 [aval, bval](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (gp[0])
                     for (std::size_t i = 0; i < g.data.size(); ++i)
                       gp[0]->data[i] += g.data[i] * bval.data[i];
                   if (gp[1])
                     for (std::size_t i = 0; i < g.data.size(); ++i)
                       gp[1]->data[i] += g.data[i] * aval.data[i];
                 });
}

template <class T>
VarPtr<T> relu(const VarPtr<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.data)
    if (v < T(0)) v = T(0);
  Tensor<T> aval = a->value;
  return make_op(std::move(out), {a},
                 [aval](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (gp[0])
                     for (std::size_t i = 0; i < g.data.size(); ++i)
                       if (aval.data[i] > T(0)) gp[0]->data[i] += g.data[i];
                 });
}

// Row-wise softmax over (x + mask); mask is an additive constant (may be null).
template <class T>
VarPtr<T> softmax_rows(const VarPtr<T>& x, const Tensor<T>* mask = nullptr) {
  detail::check_2d(x->value, "softmax_rows");
  const int m = x->value.rows(), n = x->value.cols();
  if (mask && (mask->rows() != m || mask->cols() != n))
    throw std::runtime_error("softmax_rows: mask shape mismatch");
  Tensor<T> out({m, n}, T(0));
  for (int i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < n; ++j) {
      const T v = x->value.at(i, j) + (mask ? mask->at(i, j) : T(0));
      if (v > mx) mx = v;
    }
    if (std::isinf(static_cast<double>(mx)) && mx < T(0))
      throw std::runtime_error("softmax_rows: fully masked row");
    T z = T(0);
    for (int j = 0; j < n; ++j) {
      const T v = x->value.at(i, j) + (mask ? mask->at(i, j) : T(0));
      const T e = std::exp(v - mx);
      out.at(i, j) = e;
      z += e;
    }
    for (int j = 0; j < n; ++j) out.at(i, j) /= z;
  }
  Tensor<T> y = out;
  return make_op(std::move(out), {x},
                 [y, m, n](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (!gp[0]) return;
                   for (int i = 0; i < m; ++i) {
                     T dot = T(0);
                     for (int j = 0; j < n; ++j) dot += g.at(i, j) * y.at(i, j);
                     for (int j = 0; j < n; ++j)
                       gp[0]->at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
                   }
                 });
}

template <class T>
VarPtr<T> log_softmax_rows(const VarPtr<T>& x) {
  detail::check_2d(x->value, "log_softmax_rows");
  const int m = x->value.rows(), n = x->value.cols();
  Tensor<T> out({m, n}, T(0));
  for (int i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < n; ++j) mx = std::max(mx, x->value.at(i, j));
    T z = T(0);
    for (int j = 0; j < n; ++j) z += std::exp(x->value.at(i, j) - mx);
    const T lz = mx + std::log(z);
    for (int j = 0; j < n; ++j) out.at(i, j) = x->value.at(i, j) - lz;
  }
  Tensor<T> y = out;
  return make_op(std::move(out), {x},
                 [y, m, n](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (!gp[0]) return;
                   for (int i = 0; i < m; ++i) {
                     T gsum = T(0);
                     for (int j = 0; j < n; ++j) gsum += g.at(i, j);
                     for (int j = 0; j < n; ++j)
                       gp[0]->at(i, j) += g.at(i, j) - std::exp(y.at(i, j)) * gsum;
                   }
                 });
}

inline constexpr double kLayerNormEps = 1e-5;

// Per-row normalization with affine gain/bias (each [1 x n]).
template <class T>
VarPtr<T> layer_norm(const VarPtr<T>& x, const VarPtr<T>& gain, const VarPtr<T>& bias) {
  detail::check_2d(x->value, "layer_norm");
  const int m = x->value.rows(), n = x->value.cols();
  if (n < 1) throw std::runtime_error("layer_norm: empty rows");
  if (gain->value.cols() != n || bias->value.cols() != n)
    throw std::runtime_error("layer_norm: affine shape mismatch");
  Tensor<T> out({m, n}, T(0));
  Tensor<T> xhat({m, n}, T(0));
  Tensor<T> inv_std({m, 1}, T(0));
  for (int i = 0; i < m; ++i) {
    T mean = T(0);
    for (int j = 0; j < n; ++j) mean += x->value.at(i, j);
    mean /= static_cast<T>(n);
    T var = T(0);
    for (int j = 0; j < n; ++j) {
      const T d = x->value.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T istd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    inv_std.at(i, 0) = istd;
    for (int j = 0; j < n; ++j) {
      const T xh = (x->value.at(i, j) - mean) * istd;
      xhat.at(i, j) = xh;
      out.at(i, j) = gain->value.data[static_cast<std::size_t>(j)] * xh +
                     bias->value.data[static_cast<std::size_t>(j)];
    }
  }
  Tensor<T> gval = gain->value;
  return make_op(std::move(out), {x, gain, bias},
                 [xhat, inv_std, gval, m, n](const Tensor<T>& g,
                                             const std::vector<Tensor<T>*>& gp) {
                   for (int i = 0; i < m; ++i) {
                     if (gp[1] || gp[2]) {
                       for (int j = 0; j < n; ++j) {
                         if (gp[1])
                           gp[1]->data[static_cast<std::size_t>(j)] += g.at(i, j) * xhat.at(i, j);
                         if (gp[2]) gp[2]->data[static_cast<std::size_t>(j)] += g.at(i, j);
                       }
                     }
                     if (gp[0]) {
                       T mean_gxh = T(0), mean_gxh_xh = T(0);
                       for (int j = 0; j < n; ++j) {
                         const T gxh = g.at(i, j) * gval.data[static_cast<std::size_t>(j)];
                         mean_gxh += gxh;
                         mean_gxh_xh += gxh * xhat.at(i, j);
                       }
                       mean_gxh /= static_cast<T>(n);
                       mean_gxh_xh /= static_cast<T>(n);
                       for (int j = 0; j < n; ++j) {
                         const T gxh = g.at(i, j) * gval.data[static_cast<std::size_t>(j)];
                         gp[0]->at(i, j) +=
                             inv_std.at(i, 0) * (gxh - mean_gxh - xhat.at(i, j) * mean_gxh_xh);
                       }
                     }
                   }
                 });
}

// Gather rows of an embedding table by token id.
template <class T>
VarPtr<T> embedding_rows(const VarPtr<T>& table, const TokenSeq& ids) {
  detail::check_2d(table->value, "embedding_rows");
  const int v = table->value.rows(), d = table->value.cols();
  const int n = static_cast<int>(ids.size());
  Tensor<T> out({n, d}, T(0));
  for (int i = 0; i < n; ++i) {
    const TokenId id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= v)
      throw std::runtime_error("token id out of range: " + std::to_string(id));
    for (int j = 0; j < d; ++j) out.at(i, j) = table->value.at(id, j);
  }
  TokenSeq ids_copy = ids;
  return make_op(std::move(out), {table},
                 [ids_copy, d](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (!gp[0]) return;
                   for (int i = 0; i < static_cast<int>(ids_copy.size()); ++i) {
                     const TokenId id = ids_copy[static_cast<std::size_t>(i)];
                     for (int j = 0; j < d; ++j) gp[0]->at(id, j) += g.at(i, j);
                   }
                 });
}

template <class T>
VarPtr<T> slice_rows(const VarPtr<T>& a, int start, int len) {
  detail::check_2d(a->value, "slice_rows");
  const int m = a->value.rows(), n = a->value.cols();
  if (start < 0 || len < 0 || start + len > m) throw std::runtime_error("slice_rows: out of range");
  Tensor<T> out({len, n}, T(0));
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = a->value.at(start + i, j);
  return make_op(std::move(out), {a},
                 [start, len, n](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (!gp[0]) return;
                   for (int i = 0; i < len; ++i)
                     for (int j = 0; j < n; ++j) gp[0]->at(start + i, j) += g.at(i, j);
                 });
}

template <class T>
VarPtr<T> slice_cols(const VarPtr<T>& a, int start, int len) {
  detail::check_2d(a->value, "slice_cols");
  const int m = a->value.rows(), n = a->value.cols();
  if (start < 0 || len < 0 || start + len > n) throw std::runtime_error("slice_cols: out of range");
  Tensor<T> out({m, len}, T(0));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < len; ++j) out.at(i, j) = a->value.at(i, start + j);
  return make_op(std::move(out), {a},
                 [start, len, m](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (!gp[0]) return;
                   for (int i = 0; i < m; ++i)
                     for (int j = 0; j < len; ++j) gp[0]->at(i, start + j) += g.at(i, j);
                 });
}

template <class T>
VarPtr<T> concat_rows(const std::vector<VarPtr<T>>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_rows: empty input");
  const int n = parts[0]->value.cols();
  int total = 0;
  for (const auto& p : parts) {
    detail::check_2d(p->value, "concat_rows");
    if (p->value.cols() != n) throw std::runtime_error("concat_rows: column mismatch");
    total += p->value.rows();
  }
  Tensor<T> out({total, n}, T(0));
  int r = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    offsets.push_back(r);
    for (int i = 0; i < p->value.rows(); ++i, ++r)
      for (int j = 0; j < n; ++j) out.at(r, j) = p->value.at(i, j);
  }
  std::vector<int> sizes;
  for (const auto& p : parts) sizes.push_back(p->value.rows());
  return make_op(std::move(out), parts,
                 [offsets, sizes, n](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   for (std::size_t s = 0; s < gp.size(); ++s) {
                     if (!gp[s]) continue;
                     for (int i = 0; i < sizes[s]; ++i)
                       for (int j = 0; j < n; ++j) gp[s]->at(i, j) += g.at(offsets[s] + i, j);
                   }
                 });
}

template <class T>
VarPtr<T> concat_cols(const std::vector<VarPtr<T>>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_cols: empty input");
  const int m = parts[0]->value.rows();
  int total = 0;
  for (const auto& p : parts) {
    detail::check_2d(p->value, "concat_cols");
    if (p->value.rows() != m) throw std::runtime_error("concat_cols: row mismatch");
    total += p->value.cols();
  }
  Tensor<T> out({m, total}, T(0));
  std::vector<int> offsets, sizes;
  int c = 0;
  for (const auto& p : parts) {
    offsets.push_back(c);
    sizes.push_back(p->value.cols());
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < p->value.cols(); ++j) out.at(i, c + j) = p->value.at(i, j);
    c += p->value.cols();
  }
  return make_op(std::move(out), parts,
                 [offsets, sizes, m](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   for (std::size_t s = 0; s < gp.size(); ++s) {
                     if (!gp[s]) continue;
                     for (int i = 0; i < m; ++i)
                       for (int j = 0; j < sizes[s]; ++j) gp[s]->at(i, j) += g.at(i, offsets[s] + j);
                   }
                 });
}

template <class T>
VarPtr<T> mean_rows(const VarPtr<T>& a) {
  detail::check_2d(a->value, "mean_rows");
  const int m = a->value.rows(), n = a->value.cols();
  if (m < 1) throw std::runtime_error("mean_rows: empty");
  Tensor<T> out({1, n}, T(0));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(0, j) += a->value.at(i, j);
  for (int j = 0; j < n; ++j) out.at(0, j) /= static_cast<T>(m);
  return make_op(std::move(out), {a},
                 [m, n](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (!gp[0]) return;
                   for (int i = 0; i < m; ++i)
                     for (int j = 0; j < n; ++j) gp[0]->at(i, j) += g.at(0, j) / static_cast<T>(m);
                 });
}

template <class T>
VarPtr<T> sum_all(const VarPtr<T>& a) {
  T s = T(0);
  for (const T& v : a->value.data) s += v;
  Tensor<T> out({1, 1}, s);
  return make_op(std::move(out), {a},
                 [](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (!gp[0]) return;
                   for (auto& v : gp[0]->data) v += g.data[0];
                 });
}

// Scale row i of a [m x n] by w[i] (w is [m x 1]); gradient flows to both.
template <class T>
VarPtr<T> row_scale(const VarPtr<T>& a, const VarPtr<T>& w) {
  detail::check_2d(a->value, "row_scale");
  const int m = a->value.rows(), n = a->value.cols();
  if (w->value.rows() != m || w->value.cols() != 1)
    throw std::runtime_error("row_scale: weight shape mismatch");
  Tensor<T> out = a->value;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) *= w->value.at(i, 0);
  Tensor<T> aval = a->value, wval = w->value;
  return make_op(std::move(out), {a, w},
                 [aval, wval, m, n](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (gp[0])
                     for (int i = 0; i < m; ++i)
                       for (int j = 0; j < n; ++j) gp[0]->at(i, j) += g.at(i, j) * wval.at(i, 0);
                   if (gp[1])
                     for (int i = 0; i < m; ++i) {
                       T acc = T(0);
                       for (int j = 0; j < n; ++j) acc += g.at(i, j) * aval.at(i, j);
                       gp[1]->at(i, 0) += acc;
                     }
                 });
}

// Picks y[t] = logits[t, ids[t]] as a column vector [n x 1].
template <class T>
VarPtr<T> gather_cols(const VarPtr<T>& a, const TokenSeq& ids) {
  detail::check_2d(a->value, "gather_cols");
  const int m = a->value.rows(), n = a->value.cols();
  if (static_cast<int>(ids.size()) != m) throw std::runtime_error("gather_cols: id count mismatch");
  Tensor<T> out({m, 1}, T(0));
  for (int i = 0; i < m; ++i) {
    const TokenId id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= n) throw std::runtime_error("gather_cols: id out of range");
    out.at(i, 0) = a->value.at(i, id);
  }
  TokenSeq ids_copy = ids;
  return make_op(std::move(out), {a},
                 [ids_copy](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (!gp[0]) return;
                   for (int i = 0; i < static_cast<int>(ids_copy.size()); ++i)
                     gp[0]->at(i, ids_copy[static_cast<std::size_t>(i)]) += g.at(i, 0);
                 });
}

inline constexpr double kLogOneMinusPClamp = 1e-6;

// log(1 - exp(x)) elementwise for x = log p < 0; p clamps to 1 - 1e-6.
// `clamp_events`, when given, counts clamped elements.
template <class T>
VarPtr<T> log1m_exp(const VarPtr<T>& a, long* clamp_events = nullptr) {
  const T max_x = std::log(T(1) - static_cast<T>(kLogOneMinusPClamp));
  Tensor<T> out = a->value;
  Tensor<T> clamped = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    T x = out.data[i];
    if (x > max_x) {
      x = max_x;
      if (clamp_events) ++*clamp_events;
    }
    clamped.data[i] = x;
    out.data[i] = std::log1p(-std::exp(x));
  }
  return make_op(std::move(out), {a},
                 [clamped, max_x](const Tensor<T>& g, const std::vector<Tensor<T>*>& gp) {
                   if (!gp[0]) return;
                   for (std::size_t i = 0; i < g.data.size(); ++i) {
                     const T x = clamped.data[i];
                     if (x >= max_x) continue;  // saturated region: no gradient
                     const T p = std::exp(x);
                     gp[0]->data[i] += g.data[i] * (-p / (T(1) - p));
                   }
                 });
}

}  // namespace charkeeper
