#pragma once

#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "charkeeper/autodiff.hpp"
#include "charkeeper/common.hpp"

namespace charkeeper {

// Named parameter registry. Registration order is the checkpoint directory
// order; shared modules register their tensors once.
template <class T>
class ParamStore {
 public:
  VarPtr<T> create_normal(const std::string& name, std::vector<int> shape, T std_dev, Rng& rng) {
    Tensor<T> t(shape, T(0));
    for (auto& v : t.data) v = static_cast<T>(rng.next_normal()) * std_dev;
    return insert(name, std::move(t));
  }
  VarPtr<T> create_fill(const std::string& name, std::vector<int> shape, T fill) {
    return insert(name, Tensor<T>(std::move(shape), fill));
  }
  VarPtr<T> find(const std::string& name) const {
    for (const auto& [n, v] : items_)
      if (n == name) return v;
    throw std::runtime_error("parameter not found: " + name);
  }
  bool contains(const std::string& name) const {
    for (const auto& [n, v] : items_)
      if (n == name) return true;
    return false;
  }
  const std::vector<std::pair<std::string, VarPtr<T>>>& items() const { return items_; }
  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& [name, v] : items_) n += v->value.numel();
    return n;
  }
  void zero_grad() {
    for (auto& [name, v] : items_) v->zero_grad();
  }

 private:
  VarPtr<T> insert(const std::string& name, Tensor<T> t) {
    if (contains(name)) throw std::runtime_error("duplicate parameter name: " + name);
    auto v = make_param(std::move(t));
    items_.emplace_back(name, v);
    return v;
  }
  std::vector<std::pair<std::string, VarPtr<T>>> items_;
};

template <class T>
struct Linear {
  VarPtr<T> w;  // [in x out]
  VarPtr<T> b;  // [1 x out]

  static Linear create(ParamStore<T>& store, const std::string& prefix, int in, int out,
                       Rng& rng) {
    Linear lin;
    const T std_dev = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
    lin.w = store.create_normal(prefix + ".w", {in, out}, std_dev, rng);
    lin.b = store.create_fill(prefix + ".b", {1, out}, T(0));
    return lin;
  }
  VarPtr<T> operator()(const VarPtr<T>& x) const { return add_rowvec(matmul(x, w), b); }
};

template <class T>
struct LayerNormP {
  VarPtr<T> gain;  // [1 x d]
  VarPtr<T> bias;  // [1 x d]

  static LayerNormP create(ParamStore<T>& store, const std::string& prefix, int dim) {
    LayerNormP ln;
    ln.gain = store.create_fill(prefix + ".gain", {1, dim}, T(1));
    ln.bias = store.create_fill(prefix + ".bias", {1, dim}, T(0));
    return ln;
  }
  VarPtr<T> operator()(const VarPtr<T>& x) const { return layer_norm(x, gain, bias); }
};

template <class T>
struct AttentionOutput {
  VarPtr<T> out;                        // [Tq x d_model]
  std::vector<VarPtr<T>> head_weights;  // n_heads entries, each [Tq x Tk]
};

// Exports head weights as one [n_heads x Tq x Tk] tensor (no gradient).
template <class T>
Tensor<T> stack_head_weights(const AttentionOutput<T>& att) {
  if (att.head_weights.empty()) throw std::runtime_error("stack_head_weights: no heads");
  const int h = static_cast<int>(att.head_weights.size());
  const int tq = att.head_weights[0]->value.rows();
  const int tk = att.head_weights[0]->value.cols();
  Tensor<T> out({h, tq, tk}, T(0));
  for (int i = 0; i < h; ++i)
    for (std::size_t e = 0; e < att.head_weights[i]->value.data.size(); ++e)
      out.data[static_cast<std::size_t>(i) * tq * tk + e] = att.head_weights[i]->value.data[e];
  return out;
}

template <class T>
struct MultiHeadAttention {
  int d_model = 0;
  int n_heads = 0;
  Linear<T> wq, wk, wv, wo;

  static MultiHeadAttention create(ParamStore<T>& store, const std::string& prefix, int d_model,
                                   int n_heads, Rng& rng) {
    if (n_heads < 1 || d_model % n_heads != 0)
      throw std::runtime_error("attention: head count does not divide model width");
    MultiHeadAttention mha;
    mha.d_model = d_model;
    mha.n_heads = n_heads;
    mha.wq = Linear<T>::create(store, prefix + ".wq", d_model, d_model, rng);
    mha.wk = Linear<T>::create(store, prefix + ".wk", d_model, d_model, rng);
    mha.wv = Linear<T>::create(store, prefix + ".wv", d_model, d_model, rng);
    mha.wo = Linear<T>::create(store, prefix + ".wo", d_model, d_model, rng);
    return mha;
  }

  // q_in [Tq x d], k_in == v_in [Tk x d]; mask (optional) additive [Tq x Tk].
  AttentionOutput<T> operator()(const VarPtr<T>& q_in, const VarPtr<T>& k_in,
                                const VarPtr<T>& v_in, const Tensor<T>* mask = nullptr) const {
    const int dh = d_model / n_heads;
    auto q = wq(q_in);
    auto k = wk(k_in);
    auto v = wv(v_in);
    AttentionOutput<T> res;
    std::vector<VarPtr<T>> heads;
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (int h = 0; h < n_heads; ++h) {
      auto qh = slice_cols(q, h * dh, dh);
      auto kh = slice_cols(k, h * dh, dh);
      auto vh = slice_cols(v, h * dh, dh);
      auto scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
      auto w = softmax_rows(scores, mask);
      res.head_weights.push_back(w);
      heads.push_back(matmul(w, vh));
    }
    res.out = wo(concat_cols(heads));
    return res;
  }
};

template <class T>
struct FeedForward {
  Linear<T> fc1, fc2;

  static FeedForward create(ParamStore<T>& store, const std::string& prefix, int d_model,
                            int d_ffn, Rng& rng) {
    FeedForward ffn;
    ffn.fc1 = Linear<T>::create(store, prefix + ".fc1", d_model, d_ffn, rng);
    ffn.fc2 = Linear<T>::create(store, prefix + ".fc2", d_ffn, d_model, rng);
    return ffn;
  }
  VarPtr<T> operator()(const VarPtr<T>& x) const { return fc2(relu(fc1(x))); }
};

// Pre-norm residual blocks: x + sublayer(layer_norm(x)). With all sublayer
// weights at zero the block is an exact identity.
template <class T>
struct EncoderLayer {
  LayerNormP<T> ln_attn, ln_ffn;
  MultiHeadAttention<T> self_attn;
  FeedForward<T> ffn;

  static EncoderLayer create(ParamStore<T>& store, const std::string& prefix, int d_model,
                             int n_heads, int d_ffn, Rng& rng) {
    EncoderLayer layer;
    layer.ln_attn = LayerNormP<T>::create(store, prefix + ".ln_attn", d_model);
    layer.self_attn = MultiHeadAttention<T>::create(store, prefix + ".self_attn", d_model,
                                                    n_heads, rng);
    layer.ln_ffn = LayerNormP<T>::create(store, prefix + ".ln_ffn", d_model);
    layer.ffn = FeedForward<T>::create(store, prefix + ".ffn", d_model, d_ffn, rng);
    return layer;
  }

  VarPtr<T> operator()(const VarPtr<T>& x, const Tensor<T>* mask = nullptr) const {
    auto nx = ln_attn(x);
    auto h = add(x, self_attn(nx, nx, nx, mask).out);
    return add(h, ffn(ln_ffn(h)));
  }
};

template <class T>
Tensor<T> causal_mask(int t) {
  Tensor<T> m({t, t}, T(0));
  const T ninf = -std::numeric_limits<T>::infinity();
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) m.at(i, j) = ninf;
  return m;
}

// Sinusoidal position table [max_len x d], added to embeddings.
template <class T>
Tensor<T> sinusoid_positions(int max_len, int d) {
  Tensor<T> out({max_len, d}, T(0));
  for (int pos = 0; pos < max_len; ++pos)
    for (int j = 0; j < d; ++j) {
      const double angle = pos / std::pow(10000.0, 2.0 * (j / 2) / d);
      out.at(pos, j) = static_cast<T>((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  return out;
}

}  // namespace charkeeper
