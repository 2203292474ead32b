#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "charkeeper/autodiff.hpp"
#include "charkeeper/corpus.hpp"
#include "charkeeper/layers.hpp"
#include "charkeeper/tokenizer.hpp"

namespace charkeeper {

// One classifier record: serialized context + prior-utterance window + SEP +
// candidate utterance (or prefix). The candidate starts after the last SEP.
struct RpaExample {
  TokenSeq context_tokens;
  std::string label;                    // true speaker name
  std::vector<std::string> pool;        // pool[0], pool[1] are the participants
  bool is_partial = false;
  int prefix_len = 0;                   // LTR only; 0 for full examples
  int dialogue_index = 0;
  int turn_index = 0;                   // candidate's turn within its dialogue
};

struct RpaDatasetOptions {
  int pool_size = 100;  // label + participants + random negatives up to this
  std::uint64_t seed = 1;
};

// Enumerates (POV, window, target) per dialogue:
//   n_prior=0    -> every utterance once per POV, empty history
//   n_prior=n>=1 -> every contiguous window of n utterances x every later target
//   n_prior=ALL  -> the two final turns (one per speaker) per POV, full history
std::vector<RpaExample> build_rpa_dataset(const std::vector<Dialogue>& corpus,
                                          const Vocabulary& vocab, int n_prior,
                                          const RpaDatasetOptions& opts);

// Expands full examples into every candidate prefix of length 1..w.
std::vector<RpaExample> build_ltr_dataset(const std::vector<RpaExample>& full);

// Index of the first candidate token (position after the last SEP).
int candidate_start(const TokenSeq& context_tokens);

std::string rpa_examples_to_jsonl(const std::vector<RpaExample>& examples);
std::vector<RpaExample> rpa_examples_from_jsonl(const std::string& text);

struct RpaClassifierConfig {
  int d_model = 64;
  int n_heads = 2;
  int n_ctx_layers = 2;
  int n_cand_layers = 2;
  int d_ffn = 256;
  int m_codes = 4;
  int vocab_size = 0;
  int max_ctx_tokens = 256;
  std::uint64_t seed = 1;

  void validate() const {
    if (m_codes < 1) throw std::runtime_error("classifier config: m_codes must be >= 1");
    if (vocab_size < Vocabulary::kNumReserved)
      throw std::runtime_error("classifier config: vocab size too small");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      throw std::runtime_error("classifier config: head count does not divide model width");
  }
};

nlohmann::json rpa_config_to_json(const RpaClassifierConfig& cfg);
RpaClassifierConfig rpa_config_from_json(const nlohmann::json& j);

template <class T>
struct ScoredPool {
  std::vector<double> probs;            // softmax over the pool
  std::vector<double> attention_export; // per context token, mean over codes
  bool truncated = false;
};

// Poly-encoder speaker classifier. The context encoder has no position
// table, so the attention export is exactly permutation-covariant with the
// context tokens; speaker identity here never depends on word order.
template <class T>
class RpaClassifier {
 public:
  RpaClassifierConfig cfg;
  ParamStore<T> params;

  explicit RpaClassifier(RpaClassifierConfig config) : cfg(std::move(config)) {
    cfg.validate();
    Rng rng(cfg.seed);
    embedding_ = params.create_normal("embedding", {cfg.vocab_size, cfg.d_model},
                                      static_cast<T>(0.05), rng);
    for (int l = 0; l < cfg.n_ctx_layers; ++l)
      ctx_layers_.push_back(EncoderLayer<T>::create(params, "ctx." + std::to_string(l),
                                                    cfg.d_model, cfg.n_heads, cfg.d_ffn, rng));
    ctx_final_ln_ = LayerNormP<T>::create(params, "ctx.final_ln", cfg.d_model);
    for (int l = 0; l < cfg.n_cand_layers; ++l)
      cand_layers_.push_back(EncoderLayer<T>::create(params, "cand." + std::to_string(l),
                                                     cfg.d_model, cfg.n_heads, cfg.d_ffn, rng));
    cand_final_ln_ = LayerNormP<T>::create(params, "cand.final_ln", cfg.d_model);
    codes_ = params.create_normal("codes", {cfg.m_codes, cfg.d_model},
                                  static_cast<T>(1.0 / std::sqrt(cfg.d_model)), rng);
  }

  VarPtr<T> context_states(const TokenSeq& toks) const {
    if (toks.empty()) throw std::runtime_error("classifier: empty context");
    auto h = embedding_rows(embedding_, toks);
    for (const auto& layer : ctx_layers_) h = layer(h);
    return ctx_final_ln_(h);
  }

  struct CodeAttention {
    VarPtr<T> outputs;  // [m x d]
    VarPtr<T> weights;  // [m x T]
  };

  CodeAttention code_attend(const VarPtr<T>& states) const {
    CodeAttention out;
    const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
    out.weights = softmax_rows(scale(matmul_nt(codes_, states), inv));
    out.outputs = matmul(out.weights, states);
    return out;
  }

  VarPtr<T> encode_candidate(const TokenSeq& name_tokens) const {
    if (name_tokens.empty()) throw std::runtime_error("classifier: empty candidate");
    auto h = embedding_rows(embedding_, name_tokens);
    for (const auto& layer : cand_layers_) h = layer(h);
    return mean_rows(cand_final_ln_(h));  // [1 x d]
  }

  // Pool logits [1 x n]: candidate vector attends over the m code outputs,
  // then dot product against the candidate vector.
  VarPtr<T> pool_logits(const TokenSeq& ctx_tokens,
                        const std::vector<TokenSeq>& pool_tokens) const {
    if (pool_tokens.empty()) throw std::runtime_error("classifier: empty pool");
    auto code = code_attend(context_states(ctx_tokens));
    const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
    std::vector<VarPtr<T>> scores;
    for (const auto& name : pool_tokens) {
      auto cand = encode_candidate(name);                       // [1 x d]
      auto w = softmax_rows(scale(matmul_nt(cand, code.outputs), inv));  // [1 x m]
      auto ctx_vec = matmul(w, code.outputs);                   // [1 x d]
      scores.push_back(matmul_nt(ctx_vec, cand));               // [1 x 1]
    }
    return concat_cols(scores);
  }

  ScoredPool<T> score_candidates(const TokenSeq& ctx_tokens_in,
                                 const std::vector<std::string>& pool,
                                 const Vocabulary& vocab) const {
    NoGradGuard ng;
    ScoredPool<T> out;
    TokenSeq ctx_tokens = ctx_tokens_in;
    if (static_cast<int>(ctx_tokens.size()) > cfg.max_ctx_tokens) {
      ctx_tokens = truncate_left(ctx_tokens, cfg.max_ctx_tokens);
      out.truncated = true;
    }
    std::vector<TokenSeq> pool_tokens;
    for (const auto& name : pool) pool_tokens.push_back(vocab.encode_words(name));
    auto logits = pool_logits(ctx_tokens, pool_tokens);
    out.probs = softmax_values(logits->value);
    out.attention_export = attention_export(ctx_tokens);
    return out;
  }

  // Inference-mode probabilities over an arbitrary token pool (truncates the
  // context to max_ctx_tokens like score_candidates).
  std::vector<double> score_pool_tokens(const TokenSeq& ctx_tokens_in,
                                        const std::vector<TokenSeq>& pool_tokens) const {
    NoGradGuard ng;
    TokenSeq ctx_tokens = truncate_left(ctx_tokens_in, cfg.max_ctx_tokens);
    return softmax_values(pool_logits(ctx_tokens, pool_tokens)->value);
  }

  // Mean over codes of the code-attention weights; sums to 1.
  std::vector<double> attention_export(const TokenSeq& ctx_tokens) const {
    NoGradGuard ng;
    auto code = code_attend(context_states(ctx_tokens));
    std::vector<double> out(ctx_tokens.size(), 0.0);
    for (int i = 0; i < cfg.m_codes; ++i)
      for (std::size_t j = 0; j < out.size(); ++j)
        out[j] += static_cast<double>(code.weights->value.at(i, static_cast<int>(j))) /
                  cfg.m_codes;
    return out;
  }

 private:
  static std::vector<double> softmax_values(const Tensor<T>& logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (const T& v : logits.data) mx = std::max(mx, static_cast<double>(v));
    std::vector<double> out(logits.data.size());
    double z = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = std::exp(static_cast<double>(logits.data[i]) - mx);
      z += out[i];
    }
    for (auto& v : out) v /= z;
    return out;
  }

  VarPtr<T> embedding_;
  std::vector<EncoderLayer<T>> ctx_layers_;
  LayerNormP<T> ctx_final_ln_;
  std::vector<EncoderLayer<T>> cand_layers_;
  LayerNormP<T> cand_final_ln_;
  VarPtr<T> codes_;
};

enum class PoolMode { full_catalog, participants };

struct HitsResult {
  double accuracy = 0.0;
  int n_examples = 0;
  int n_truncated = 0;
};

template <class T>
HitsResult hits_at_k(const RpaClassifier<T>& clf, const std::vector<RpaExample>& eval_set,
                     PoolMode mode, const Vocabulary& vocab) {
  if (eval_set.empty()) throw std::runtime_error("hits_at_k: empty eval set");
  std::vector<std::string> catalog;
  if (mode == PoolMode::full_catalog) {
    std::set<std::string> names;
    for (const auto& ex : eval_set) {
      names.insert(ex.label);
      if (ex.pool.size() >= 2) {
        names.insert(ex.pool[0]);
        names.insert(ex.pool[1]);
      }
    }
    catalog.assign(names.begin(), names.end());
  }
  HitsResult res;
  int hits = 0;
  for (const auto& ex : eval_set) {
    std::vector<std::string> pool;
    if (mode == PoolMode::full_catalog) {
      pool = catalog;
    } else {
      if (ex.pool.size() < 2) throw std::runtime_error("hits_at_k: example lacks participants");
      pool.assign(ex.pool.begin(), ex.pool.begin() + 2);
    }
    auto scored = clf.score_candidates(ex.context_tokens, pool, vocab);
    if (scored.truncated) ++res.n_truncated;
    // Top-ranked = label, ties with a wrong label count as a miss.
    double best = -1.0;
    for (double p : scored.probs) best = std::max(best, p);
    int best_count = 0;
    bool label_best = false;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (scored.probs[i] == best) {
        ++best_count;
        if (pool[i] == ex.label) label_best = true;
      }
    }
    if (label_best && best_count == 1) ++hits;
    ++res.n_examples;
  }
  res.accuracy = static_cast<double>(hits) / res.n_examples;
  return res;
}

}  // namespace charkeeper
