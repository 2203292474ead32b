#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "charkeeper/rpa.hpp"
#include "charkeeper/seq2seq.hpp"

namespace charkeeper {

enum class Strategy { beam, nucleus, topk, delayed_beam };
enum class Reranker { none, complete, partial_only, pacer, fudge_oracle };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& s);
std::string reranker_name(Reranker r);
Reranker reranker_from_name(const std::string& s);

struct DecodeConfig {
  Strategy strategy = Strategy::beam;
  int beam_size = 10;
  int min_len = 5;   // toy default; full-scale dialogue models typically use 20
  int max_len = 16;  // decoded text tokens, EOS excluded
  bool block_context_trigram = true;
  bool block_self_trigram = true;
  double top_p = 0.3;
  int top_k = 50;
  int delay = 10;
  Reranker reranker = Reranker::none;
  int pacer_toks = 10;
  double pacer_freq = 1.0;       // fraction of steps re-scored; stride = ceil(1/freq)
  bool pacer_reorder_only = false;  // re-order the top tokens without score adjustment
  std::uint64_t seed = 1;

  void validate() const {
    if (beam_size < 1) throw std::runtime_error("decode config: beam_size must be >= 1");
    if (top_p <= 0.0 || top_p > 1.0) throw std::runtime_error("decode config: top_p outside (0, 1]");
    if (top_k < 1) throw std::runtime_error("decode config: top_k must be >= 1");
    if (pacer_freq <= 0.0 || pacer_freq > 1.0)
      throw std::runtime_error("decode config: pacer_freq outside (0, 1]");
    if (pacer_toks < 1) throw std::runtime_error("decode config: pacer_toks must be >= 1");
    if (min_len < 1 || max_len < min_len)
      throw std::runtime_error("decode config: need 1 <= min_len <= max_len");
    if (delay < 0) throw std::runtime_error("decode config: delay must be >= 0");
  }
};

struct BeamHypothesis {
  TokenSeq tokens;  // generated tokens; ends with EOS once finished
  double lm_logprob = 0.0;
  double adjusted_score = 0.0;  // equals lm_logprob until a re-ranker touches it
  bool finished = false;
  bool best_effort = false;  // all continuations were blocked
};

struct CostLedger {
  long lm_steps = 0;          // decoder forward evaluations
  long classifier_calls = 0;  // partial_calls + final_calls
  long partial_calls = 0;
  long final_calls = 0;
  long fallback_events = 0;  // all-zero classifier probabilities
  std::vector<int> rescore_steps;          // 1-indexed steps where re-scoring fired
  std::vector<int> live_beams_at_rescore;  // live beams at each of those steps
  double relative_cost = 1.0;  // (lm_steps + classifier_calls) / lm_steps

  void finalize() {
    classifier_calls = partial_calls + final_calls;
    relative_cost =
        lm_steps > 0 ? (static_cast<double>(lm_steps) + classifier_calls) / lm_steps : 1.0;
  }
};

// Closed-form call count from the per-step trace:
//   sum over re-scoring steps of live_beams * min(#Toks, |V|)  (+ final |beams| for PACER).
long expected_classifier_calls(const CostLedger& ledger, int pacer_toks, int vocab_size,
                               bool with_final, int n_finished);

// Classifier prefix scorer: p(self | ctx, prefix). Bundles everything the
// decoding loops need to query the LTR classifier.
struct SelfScorer {
  std::function<double(const TokenSeq& generated_prefix)> prob_self;
};

template <class T>
SelfScorer make_self_scorer(const RpaClassifier<T>& clf, const Vocabulary& vocab,
                            const TokenSeq& ctx_tokens, const std::string& self_name,
                            const std::string& partner_name) {
  std::vector<std::string> pool = {self_name, partner_name};
  TokenSeq base = ctx_tokens;
  base.push_back(Vocabulary::kSep);
  return SelfScorer{[&clf, &vocab, pool, base](const TokenSeq& prefix) {
    TokenSeq q = base;
    for (TokenId t : prefix)
      if (t != Vocabulary::kEos && t != Vocabulary::kPad) q.push_back(t);
    if (q.back() == Vocabulary::kSep) q.push_back(Vocabulary::kPad);  // empty prefix guard
    return clf.score_candidates(q, pool, vocab).probs[0];
  }};
}

// ---------------------------------------------------------------------------
// Decode entry points (float models; defined in decoding.cpp)
// ---------------------------------------------------------------------------

struct DecodeResult {
  std::vector<BeamHypothesis> hypotheses;  // ranked best-first
  CostLedger ledger;
  GroundingSelection selection;  // grounding provenance when mode != none
};

class Decoder {
 public:
  Decoder(const Seq2SeqModel<float>& model, const Vocabulary& vocab);

  // Grounding classifier for classifier_attn_* modes (may be null otherwise).
  void set_grounding_classifier(const RpaClassifier<float>* clf) { ground_clf_ = clf; }

  // Runs cfg.strategy + cfg.reranker. `scorer` is required for any reranker
  // other than none.
  DecodeResult decode(const PovContext& pov, const DecodeConfig& cfg,
                      const SelfScorer* scorer = nullptr) const;

  // Exhaustive FUDGE reference: every step re-scores the full vocabulary.
  // Implemented as its own loop, independent of the beam machinery.
  DecodeResult fudge_oracle(const PovContext& pov, const DecodeConfig& cfg,
                            const SelfScorer& scorer) const;

  TokenSeq serialize_pov(const PovContext& pov) const;

 private:
  const Seq2SeqModel<float>& model_;
  const Vocabulary& vocab_;
  const RpaClassifier<float>* ground_clf_ = nullptr;
};

// FUDGE product over a candidate token set: p'(t) proportional to
// p_lm(t) * p_clf(t), renormalized to preserve the set's probability mass;
// tokens outside the set keep their original log-probabilities.
// Returns adjusted log-probs; `probs_clf` aligns with `candidates`.
std::vector<double> fudge_rescore_row(const std::vector<double>& lm_logprobs,
                                      const std::vector<int>& candidates,
                                      const std::vector<double>& probs_clf,
                                      long* fallback_events);

// Stable re-order of hypotheses by classifier self-probability (descending),
// lm_logprob as tiebreak. Never alters token content.
void rerank_complete(std::vector<BeamHypothesis>& hyps, const SelfScorer& scorer,
                     CostLedger& ledger);

// ---------------------------------------------------------------------------
// Retrieval responder (utterance bank + optional RPA re-ranking)
// ---------------------------------------------------------------------------

struct BankUtterance {
  TokenSeq tokens;
  std::string speaker_name;  // role of the original speaker
};

struct RetrievalResult {
  int bank_index = -1;
  bool partner_said = false;  // returned utterance originally spoken by the partner's role
  CostLedger ledger;
};

RetrievalResult retrieval_respond(const RpaClassifier<float>& response_ranker,
                                  const RpaClassifier<float>& rpa_clf,
                                  const Vocabulary& vocab,
                                  const std::vector<BankUtterance>& bank,
                                  const PovContext& pov, const TokenSeq& ctx_tokens,
                                  bool rerank, int rerank_k);

}  // namespace charkeeper
