#pragma once

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "charkeeper/autodiff.hpp"
#include "charkeeper/corpus.hpp"
#include "charkeeper/layers.hpp"
#include "charkeeper/tokenizer.hpp"

namespace charkeeper {

enum class GroundingMode {
  none,
  profile,
  decoder_attn,
  trainable_mask,
  classifier_attn_top,
  classifier_attn_bottom
};

enum class MoInput { dec_only, enc_dec };

std::string grounding_mode_name(GroundingMode m);
GroundingMode grounding_mode_from_name(const std::string& s);

struct ExpandedAttentionConfig {
  GroundingMode mode = GroundingMode::none;
  FieldSet subset;  // profile mode: fields (and optionally History) to re-encode
  int rounds = 1;   // r in {1,2,3}
  int k = 8;        // token budget for the automated modes
};

struct ModelConfig {
  int d_model = 64;
  int n_heads = 2;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ffn = 256;
  int vocab_size = 0;
  int max_ctx_tokens = 64;
  int max_target_len = 24;
  ExpandedAttentionConfig expanded;
  int n_mo = 0;  // {0, 2}
  MoInput mo_input = MoInput::dec_only;
  std::uint64_t seed = 1;

  void validate() const {
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      throw std::runtime_error("model config: head count does not divide model width");
    if (vocab_size < Vocabulary::kNumReserved)
      throw std::runtime_error("model config: vocab size too small");
    if (max_ctx_tokens < 1) throw std::runtime_error("model config: max_ctx_tokens < 1");
    if (expanded.rounds < 1 || expanded.rounds > 3)
      throw std::runtime_error("model config: rounds must be 1, 2 or 3");
    if (expanded.mode == GroundingMode::profile && expanded.subset.empty())
      throw std::runtime_error("model config: profile grounding needs a non-empty subset");
    if (expanded.mode != GroundingMode::none && expanded.mode != GroundingMode::profile &&
        expanded.k < 1)
      throw std::runtime_error("model config: k must be >= 1 for automated grounding");
    if (n_mo != 0 && n_mo != 2)
      throw std::runtime_error("model config: n_mo must be 0 or 2");
  }
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct GroundingSelection {
  std::vector<int> positions;  // into the serialized context (automated modes)
  std::string provenance;
  bool clamped = false;  // k exceeded context length
};

// Extra context handed to decode: either pre-encoded states (profile,
// trainable_mask, classifier_attn_*) or a dynamic per-step re-attention over
// the encoder states themselves (decoder_attn).
template <class T>
struct ExtraContext {
  GroundingMode mode = GroundingMode::none;
  VarPtr<T> states;  // null for decoder_attn (encoder states are used directly)
  GroundingSelection selection;
  TokenSeq tokens;  // tokens behind each extra-state row (empty for decoder_attn)
  int k = 0;
};

template <class T>
struct DecodeTraces {
  // Per decoder layer: cross-attention weights [n_heads x Tq x Tk].
  std::vector<Tensor<T>> cross;
  // Per decoder layer, per round: expanded-attention weights.
  std::vector<std::vector<Tensor<T>>> expanded;
};

// Top-k positions of `weights` (ties by position ascending).
template <class T>
std::vector<int> topk_positions(const std::vector<T>& weights, int k) {
  std::vector<int> idx(weights.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  const int take = std::min<int>(k, static_cast<int>(idx.size()));
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (weights[static_cast<std::size_t>(a)] != weights[static_cast<std::size_t>(b)])
      return weights[static_cast<std::size_t>(a)] > weights[static_cast<std::size_t>(b)];
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(take));
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <class T>
std::vector<int> bottomk_positions(const std::vector<T>& weights, int k) {
  std::vector<T> neg(weights.size());
  for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -weights[i];
  return topk_positions(neg, k);
}

template <class T>
class Seq2SeqModel {
 public:
  ModelConfig cfg;
  ParamStore<T> params;

  explicit Seq2SeqModel(ModelConfig config) : cfg(std::move(config)) {
    cfg.validate();
    Rng rng(cfg.seed);
    const T emb_std = static_cast<T>(0.05);
    embedding_ = params.create_normal("embedding", {cfg.vocab_size, cfg.d_model}, emb_std, rng);
    for (int l = 0; l < cfg.n_enc_layers; ++l)
      enc_layers_.push_back(EncoderLayer<T>::create(params, "enc." + std::to_string(l),
                                                    cfg.d_model, cfg.n_heads, cfg.d_ffn, rng));
    enc_final_ln_ = LayerNormP<T>::create(params, "enc.final_ln", cfg.d_model);
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
      const std::string p = "dec." + std::to_string(l);
      DecLayer layer;
      layer.ln_self = LayerNormP<T>::create(params, p + ".ln_self", cfg.d_model);
      layer.self_attn =
          MultiHeadAttention<T>::create(params, p + ".self_attn", cfg.d_model, cfg.n_heads, rng);
      layer.ln_cross = LayerNormP<T>::create(params, p + ".ln_cross", cfg.d_model);
      layer.cross_attn =
          MultiHeadAttention<T>::create(params, p + ".cross_attn", cfg.d_model, cfg.n_heads, rng);
      layer.ln_ffn = LayerNormP<T>::create(params, p + ".ln_ffn", cfg.d_model);
      layer.ffn = FeedForward<T>::create(params, p + ".ffn", cfg.d_model, cfg.d_ffn, rng);
      dec_layers_.push_back(std::move(layer));
    }
    dec_final_ln_ = LayerNormP<T>::create(params, "dec.final_ln", cfg.d_model);
    out_head_ = Linear<T>::create(params, "out_head", cfg.d_model, cfg.vocab_size, rng);
    if (cfg.expanded.mode == GroundingMode::trainable_mask)
      mask_proj_ = Linear<T>::create(params, "mask_proj", cfg.d_model, 1, rng);
    for (int l = 0; l < cfg.n_mo; ++l)
      mo_layers_.push_back(EncoderLayer<T>::create(params, "mo." + std::to_string(l), cfg.d_model,
                                                   cfg.n_heads, cfg.d_ffn, rng));
    const int max_pos = std::max(cfg.max_ctx_tokens, cfg.max_target_len) + 2;
    pos_table_ = sinusoid_positions<T>(max_pos, cfg.d_model);
  }

  // Expanded / multi-objective path counters (reachability assertions).
  mutable long expanded_path_calls = 0;
  mutable long mo_path_calls = 0;

  const VarPtr<T>& embedding() const { return embedding_; }
  const Linear<T>& mask_projection() const {
    if (cfg.expanded.mode != GroundingMode::trainable_mask)
      throw std::runtime_error("mask projection only exists in trainable_mask mode");
    return mask_proj_;
  }

  VarPtr<T> embed(const TokenSeq& toks) const {
    if (static_cast<int>(toks.size()) > pos_table_.rows())
      throw std::runtime_error("sequence longer than position table");
    auto e = embedding_rows(embedding_, toks);
    Tensor<T> pos({static_cast<int>(toks.size()), cfg.d_model}, T(0));
    for (int i = 0; i < pos.rows(); ++i)
      for (int j = 0; j < cfg.d_model; ++j) pos.at(i, j) = pos_table_.at(i, j);
    return add(e, make_constant(std::move(pos)));
  }

  VarPtr<T> run_encoder_stack(const VarPtr<T>& x) const {
    auto h = x;
    for (const auto& layer : enc_layers_) h = layer(h);
    return enc_final_ln_(h);
  }

  // Per-token final encoder states for an already-truncated context.
  VarPtr<T> encode_context(const TokenSeq& ctx_tokens) const {
    if (ctx_tokens.empty()) throw std::runtime_error("encode_context: empty context");
    if (static_cast<int>(ctx_tokens.size()) > cfg.max_ctx_tokens)
      throw std::runtime_error("encode_context: context exceeds max_ctx_tokens");
    return run_encoder_stack(embed(ctx_tokens));
  }

  // Re-encodes already-embedded rows (trainable-mask path).
  VarPtr<T> encode_embedded(const VarPtr<T>& emb) const {
    Tensor<T> pos({emb->value.rows(), cfg.d_model}, T(0));
    for (int i = 0; i < pos.rows(); ++i)
      for (int j = 0; j < cfg.d_model; ++j) pos.at(i, j) = pos_table_.at(i, j);
    return run_encoder_stack(add(emb, make_constant(std::move(pos))));
  }

  // Decoder forward over the whole prefix; returns final states [T x d].
  // `extra` must be present iff grounding mode != none.
  VarPtr<T> decode_states(const VarPtr<T>& enc_states, const ExtraContext<T>* extra,
                          const TokenSeq& prefix, DecodeTraces<T>* traces = nullptr) const {
    if (prefix.empty() || prefix.front() != Vocabulary::kBos)
      throw std::runtime_error("decode_states: prefix must begin with BOS");
    const bool expanded_on = cfg.expanded.mode != GroundingMode::none;
    if (expanded_on && (!extra || extra->mode != cfg.expanded.mode))
      throw std::runtime_error("decode_states: extra states absent while grounding enabled");
    const int tq = static_cast<int>(prefix.size());
    const Tensor<T> cmask = causal_mask<T>(tq);
    auto h = embed(prefix);
    if (traces) {
      traces->cross.clear();
      traces->expanded.assign(dec_layers_.size(), {});
    }
    for (std::size_t l = 0; l < dec_layers_.size(); ++l) {
      const DecLayer& layer = dec_layers_[l];
      {
        auto nx = layer.ln_self(h);
        h = add(h, layer.self_attn(nx, nx, nx, &cmask).out);
      }
      auto catt = layer.cross_attn(layer.ln_cross(h), enc_states, enc_states);
      if (traces) traces->cross.push_back(stack_head_weights(catt));
      h = add(h, catt.out);
      if (expanded_on) {
        ++expanded_path_calls;
        const VarPtr<T>& ext =
            extra->mode == GroundingMode::decoder_attn ? enc_states : extra->states;
        std::optional<Tensor<T>> rowmask;
        if (extra->mode == GroundingMode::decoder_attn)
          rowmask = decoder_attn_rowmask(catt, tq, ext->value.rows(), extra->k);
        for (int r = 0; r < cfg.expanded.rounds; ++r) {
          auto eatt = layer.cross_attn(layer.ln_cross(h), ext, ext,
                                       rowmask ? &*rowmask : nullptr);
          if (traces) traces->expanded[l].push_back(stack_head_weights(eatt));
          h = add(h, eatt.out);
        }
      }
      h = add(h, layer.ffn(layer.ln_ffn(h)));
    }
    return dec_final_ln_(h);
  }

  // Teacher-forcing log-probabilities [T x V] for positions 1..T.
  VarPtr<T> forward_logprobs(const VarPtr<T>& enc_states, const ExtraContext<T>* extra,
                             const TokenSeq& dec_input, DecodeTraces<T>* traces = nullptr) const {
    return log_softmax_rows(out_head_(decode_states(enc_states, extra, dec_input, traces)));
  }

  // Next-token log-probabilities after `prefix` (no graph).
  Tensor<T> next_logprobs(const VarPtr<T>& enc_states, const ExtraContext<T>* extra,
                          const TokenSeq& prefix, DecodeTraces<T>* traces = nullptr) const {
    NoGradGuard ng;
    auto lp = forward_logprobs(enc_states, extra, prefix, traces);
    const int t = lp->value.rows() - 1;
    Tensor<T> out({1, cfg.vocab_size}, T(0));
    for (int j = 0; j < cfg.vocab_size; ++j) out.at(0, j) = lp->value.at(t, j);
    return out;
  }

  // Grounding construction. For classifier modes the caller passes the
  // classifier's per-position attention export over ctx_tokens.
  ExtraContext<T> build_expanded_context(const PovContext& ctx, const Vocabulary& vocab,
                                         const TokenSeq& ctx_tokens, const VarPtr<T>& enc_states,
                                         const std::vector<double>* classifier_export) const {
    ExtraContext<T> out;
    out.mode = cfg.expanded.mode;
    out.k = cfg.expanded.k;
    const int n_ctx = static_cast<int>(ctx_tokens.size());
    switch (cfg.expanded.mode) {
      case GroundingMode::none:
        throw std::runtime_error("build_expanded_context: grounding mode is none");
      case GroundingMode::profile: {
        TokenSeq sub = serialize_context(ctx, vocab, cfg.expanded.subset);
        if (sub.empty()) sub.push_back(Vocabulary::kPad);
        sub = truncate_left(sub, cfg.max_ctx_tokens);
        out.states = run_encoder_stack(embed(sub));
        out.selection.provenance = "profile";
        out.tokens = sub;
        return out;
      }
      case GroundingMode::decoder_attn:
        out.selection.provenance = "decoder_attn";
        out.selection.clamped = cfg.expanded.k > n_ctx;
        return out;
      case GroundingMode::trainable_mask: {
        auto scores = softmax_rows(transpose_to_row(mask_proj_(enc_states)));
        std::vector<T> w(scores->value.data.begin(), scores->value.data.end());
        out.selection.positions = topk_positions(w, cfg.expanded.k);
        out.selection.provenance = "trainable_mask";
        out.selection.clamped = cfg.expanded.k > n_ctx;
        TokenSeq picked;
        for (int p : out.selection.positions) picked.push_back(ctx_tokens[static_cast<std::size_t>(p)]);
        auto emb = embedding_rows(embedding_, picked);
        // Row i scaled by its softmax weight so the mask layer gets gradient.
        std::vector<VarPtr<T>> weight_rows;
        for (int p : out.selection.positions)
          weight_rows.push_back(slice_cols(scores, p, 1));
        auto wcol = transpose_to_col(concat_cols(weight_rows));
        out.states = encode_embedded(row_scale(emb, wcol));
        out.tokens = picked;
        return out;
      }
      case GroundingMode::classifier_attn_top:
      case GroundingMode::classifier_attn_bottom: {
        if (!classifier_export)
          throw std::runtime_error("classifier grounding requires a classifier attention export");
        if (static_cast<int>(classifier_export->size()) != n_ctx)
          throw std::runtime_error("classifier export length mismatch");
        out.selection.positions = cfg.expanded.mode == GroundingMode::classifier_attn_top
                                      ? topk_positions(*classifier_export, cfg.expanded.k)
                                      : bottomk_positions(*classifier_export, cfg.expanded.k);
        out.selection.provenance = cfg.expanded.mode == GroundingMode::classifier_attn_top
                                       ? "classifier_attn_top"
                                       : "classifier_attn_bottom";
        out.selection.clamped = cfg.expanded.k > n_ctx;
        std::vector<VarPtr<T>> rows;
        for (int p : out.selection.positions) rows.push_back(slice_rows(enc_states, p, 1));
        out.states = concat_rows(rows);
        for (int p : out.selection.positions)
          out.tokens.push_back(ctx_tokens[static_cast<std::size_t>(p)]);
        return out;
      }
    }
    throw std::runtime_error("build_expanded_context: unknown mode");
  }

  // Character scores [1 x n_candidates]: pooled (optionally MO-transformed)
  // states dotted against pooled candidate-name encodings.
  VarPtr<T> mo_scores(const VarPtr<T>& enc_states, const VarPtr<T>& dec_states,
                      const std::vector<TokenSeq>& candidate_names) const {
    if (candidate_names.empty()) throw std::runtime_error("mo_scores: empty candidate set");
    ++mo_path_calls;
    VarPtr<T> sel = cfg.mo_input == MoInput::dec_only
                        ? dec_states
                        : concat_rows<T>({enc_states, dec_states});
    for (const auto& layer : mo_layers_) sel = layer(sel);
    auto pooled = mean_rows(sel);  // [1 x d]
    std::vector<VarPtr<T>> cand_rows;
    for (const auto& name : candidate_names) {
      if (name.empty()) throw std::runtime_error("mo_scores: empty candidate name");
      cand_rows.push_back(mean_rows(run_encoder_stack(embed(name))));
    }
    return matmul_nt(pooled, concat_rows(cand_rows));  // [1 x n]
  }

  struct DecLayer {
    LayerNormP<T> ln_self, ln_cross, ln_ffn;
    MultiHeadAttention<T> self_attn, cross_attn;
    FeedForward<T> ffn;
  };
  const std::vector<DecLayer>& decoder_layers() const { return dec_layers_; }
  const std::vector<EncoderLayer<T>>& mo_layers() const { return mo_layers_; }

 private:
  // [n x 1] -> [1 x n] and back, for the mask-score plumbing.
  static VarPtr<T> transpose_to_row(const VarPtr<T>& col) {
    std::vector<VarPtr<T>> parts;
    for (int i = 0; i < col->value.rows(); ++i) parts.push_back(slice_rows(col, i, 1));
    return concat_cols(parts);
  }
  static VarPtr<T> transpose_to_col(const VarPtr<T>& row) {
    std::vector<VarPtr<T>> parts;
    for (int j = 0; j < row->value.cols(); ++j) parts.push_back(slice_cols(row, j, 1));
    return concat_rows(parts);
  }

  // Expanded-attention mask for decoder_attn grounding: row t re-attends to
  // the top-k encoder positions under row t-1's max-over-heads cross weights
  // (row 0: uniform fallback, resolved to the first k positions).
  static Tensor<T> decoder_attn_rowmask(const AttentionOutput<T>& cross, int tq, int tk, int k) {
    const T ninf = -std::numeric_limits<T>::infinity();
    Tensor<T> mask({tq, tk}, ninf);
    const int take = std::min(k, tk);
    for (int t = 0; t < tq; ++t) {
      std::vector<int> sel;
      if (t == 0) {
        for (int j = 0; j < take; ++j) sel.push_back(j);
      } else {
        std::vector<T> w(static_cast<std::size_t>(tk), T(0));
        for (const auto& head : cross.head_weights)
          for (int j = 0; j < tk; ++j)
            w[static_cast<std::size_t>(j)] =
                std::max(w[static_cast<std::size_t>(j)], head->value.at(t - 1, j));
        sel = topk_positions(w, take);
      }
      for (int j : sel) mask.at(t, j) = T(0);
    }
    return mask;
  }

  VarPtr<T> embedding_;
  std::vector<EncoderLayer<T>> enc_layers_;
  LayerNormP<T> enc_final_ln_;
  std::vector<DecLayer> dec_layers_;
  LayerNormP<T> dec_final_ln_;
  Linear<T> out_head_;
  Linear<T> mask_proj_;
  std::vector<EncoderLayer<T>> mo_layers_;
  Tensor<T> pos_table_;
};

}  // namespace charkeeper
