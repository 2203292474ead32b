#pragma once

#include <functional>
#include <string>
#include <vector>

#include "charkeeper/optim.hpp"
#include "charkeeper/rpa.hpp"
#include "charkeeper/seq2seq.hpp"

namespace charkeeper {

enum class UlMode { top1, all, random3 };

std::string ul_mode_name(UlMode m);
UlMode ul_mode_from_name(const std::string& s);

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  int batch_size = 8;
  int max_steps = 200;
  std::uint64_t seed = 1;
  double ul_probability = 0.25;  // fraction of batches considered for UL
  UlMode ul_mode = UlMode::top1;
  double ul_weight = 0.5;
  int mo_stage = 1;
  double mo_loss_weight = 1.0;  // lambda
  std::string log_path;         // CSV (step, loss components, wall time); empty = no log

  void validate() const {
    if (ul_probability < 0.0 || ul_probability > 1.0)
      throw std::runtime_error("train config: ul_probability outside [0, 1]");
    if (mo_loss_weight < 0.0) throw std::runtime_error("train config: lambda must be >= 0");
    if (batch_size < 1 || max_steps < 0) throw std::runtime_error("train config: bad sizes");
  }
};

// One teacher-forcing pair: serialized+truncated context and EOS-framed
// target tokens, plus the POV needed for grounding and classifier pools.
struct GenExample {
  TokenSeq ctx_tokens;
  TokenSeq target;  // y_1 .. y_k EOS (no BOS)
  PovContext pov;
  int dialogue_index = 0;
  int turn_index = 0;
};

std::vector<GenExample> build_generation_dataset(const std::vector<Dialogue>& corpus,
                                                 const Vocabulary& vocab, int max_ctx_tokens);

// ---------------------------------------------------------------------------
// Losses (templated so gradient checks run in 64-bit)
// ---------------------------------------------------------------------------

// Mean token NLL over one target; PAD positions excluded.
template <class T>
VarPtr<T> nll_loss(const Seq2SeqModel<T>& model, const VarPtr<T>& enc_states,
                   const ExtraContext<T>* extra, const TokenSeq& target) {
  if (target.empty()) throw std::runtime_error("nll_loss: empty target");
  TokenSeq dec_input;
  dec_input.push_back(Vocabulary::kBos);
  dec_input.insert(dec_input.end(), target.begin(), target.end() - 1);
  auto logprobs = model.forward_logprobs(enc_states, extra, dec_input);
  auto picked = gather_cols(logprobs, target);  // [T x 1]
  Tensor<T> mask({static_cast<int>(target.size()), 1}, T(0));
  int live = 0;
  for (std::size_t i = 0; i < target.size(); ++i)
    if (target[i] != Vocabulary::kPad) {
      mask.at(static_cast<int>(i), 0) = T(1);
      ++live;
    }
  if (live == 0) throw std::runtime_error("nll_loss: all-PAD target");
  auto masked = mul_elem(picked, make_constant(std::move(mask)));
  return scale(sum_all(masked), static_cast<T>(-1.0 / live));
}

// Builds the grounding input for one example (null when mode = none).
template <class T>
std::optional<ExtraContext<T>> make_extra(const Seq2SeqModel<T>& model, const Vocabulary& vocab,
                                          const GenExample& ex, const VarPtr<T>& enc_states,
                                          const std::vector<double>* classifier_export) {
  if (model.cfg.expanded.mode == GroundingMode::none) return std::nullopt;
  return model.build_expanded_context(ex.pov, vocab, ex.ctx_tokens, enc_states,
                                      classifier_export);
}

// As make_extra, sourcing the attention export from `ground_clf` when the
// grounding mode needs one.
template <class T>
std::optional<ExtraContext<T>> grounding_extra(const Seq2SeqModel<T>& model,
                                               const Vocabulary& vocab, const GenExample& ex,
                                               const VarPtr<T>& enc_states,
                                               const RpaClassifier<T>* ground_clf) {
  const GroundingMode mode = model.cfg.expanded.mode;
  if (mode == GroundingMode::none) return std::nullopt;
  std::vector<double> exported;
  const std::vector<double>* ptr = nullptr;
  if (mode == GroundingMode::classifier_attn_top ||
      mode == GroundingMode::classifier_attn_bottom) {
    if (!ground_clf)
      throw std::runtime_error("classifier grounding requires a grounding classifier");
    exported = ground_clf->attention_export(
        truncate_left(ex.ctx_tokens, ground_clf->cfg.max_ctx_tokens));
    ptr = &exported;
  }
  return make_extra(model, vocab, ex, enc_states, ptr);
}

// Cross-entropy of a [1 x n] score row against `label_idx`.
template <class T>
VarPtr<T> score_ce(const VarPtr<T>& scores, int label_idx) {
  auto lp = log_softmax_rows(scores);
  return scale(gather_cols(lp, TokenSeq{static_cast<TokenId>(label_idx)}), T(-1));
}

// Unlikelihood term: -sum over flagged positions of log(1 - p(y_t)).
template <class T>
VarPtr<T> ul_loss(const Seq2SeqModel<T>& model, const VarPtr<T>& enc_states,
                  const ExtraContext<T>* extra, const TokenSeq& generation,
                  const std::vector<int>& positions, long* clamp_events = nullptr) {
  if (positions.empty()) throw std::runtime_error("ul_loss: empty flag set");
  TokenSeq dec_input;
  dec_input.push_back(Vocabulary::kBos);
  dec_input.insert(dec_input.end(), generation.begin(), generation.end() - 1);
  auto logprobs = model.forward_logprobs(enc_states, extra, dec_input);
  std::vector<VarPtr<T>> picked;
  for (int pos : positions) {
    if (pos < 0 || pos >= static_cast<int>(generation.size()))
      throw std::runtime_error("ul_loss: flagged position out of range");
    auto row = slice_rows(logprobs, pos, 1);
    picked.push_back(slice_cols(row, generation[static_cast<std::size_t>(pos)], 1));
  }
  auto lp = concat_rows(picked);  // [|flags| x 1] log p of each flagged token
  return scale(sum_all(log1m_exp(lp, clamp_events)), T(-1));
}

// ---------------------------------------------------------------------------
// UL flagging
// ---------------------------------------------------------------------------

struct UlFlagSet {
  std::vector<int> positions;       // indices into the generation (0-based)
  std::vector<double> wrong_probs;  // partner probability at each flagged prefix
  bool gated_out = false;           // full generation classified as self
};

// Scores every prefix of `generation` (text tokens, EOS stripped) with the
// LTR classifier against the participant pair. Returns the empty set when the
// full generation is already classified as self.
template <class T>
UlFlagSet ul_flag_tokens(const RpaClassifier<T>& ltr_clf, const Vocabulary& vocab,
                         const PovContext& pov, const TokenSeq& ctx_tokens,
                         const TokenSeq& generation, UlMode mode, Rng& rng) {
  UlFlagSet out;
  TokenSeq text = generation;
  while (!text.empty() && (text.back() == Vocabulary::kEos || text.back() == Vocabulary::kPad))
    text.pop_back();
  if (text.empty()) {
    out.gated_out = true;
    return out;
  }
  const std::vector<std::string> pool = {pov.self_name, pov.partner_name};
  auto prefix_wrong_prob = [&](int plen) {
    TokenSeq q = ctx_tokens;
    q.push_back(Vocabulary::kSep);
    q.insert(q.end(), text.begin(), text.begin() + plen);
    auto scored = ltr_clf.score_candidates(q, pool, vocab);
    return scored.probs[1];  // partner probability
  };
  const int w = static_cast<int>(text.size());
  const double full_wrong = prefix_wrong_prob(w);
  if (full_wrong <= 0.5) {
    out.gated_out = true;
    return out;
  }
  std::vector<double> wrong(static_cast<std::size_t>(w));
  for (int p = 1; p <= w; ++p) wrong[static_cast<std::size_t>(p - 1)] = prefix_wrong_prob(p);
  std::vector<int> misclassified;
  for (int p = 1; p <= w; ++p)
    if (wrong[static_cast<std::size_t>(p - 1)] > 0.5) misclassified.push_back(p - 1);
  switch (mode) {
    case UlMode::top1: {
      int best = 0;
      for (int i = 1; i < w; ++i)
        if (wrong[static_cast<std::size_t>(i)] > wrong[static_cast<std::size_t>(best)]) best = i;
      out.positions = {best};
      break;
    }
    case UlMode::all:
      out.positions = misclassified;
      break;
    case UlMode::random3: {
      std::vector<int> cand = misclassified;
      while (static_cast<int>(out.positions.size()) < 3 && !cand.empty()) {
        const std::size_t j = rng.next_index(cand.size());
        out.positions.push_back(cand[j]);
        cand.erase(cand.begin() + static_cast<std::ptrdiff_t>(j));
      }
      std::sort(out.positions.begin(), out.positions.end());
      break;
    }
  }
  for (int pos : out.positions)
    out.wrong_probs.push_back(wrong[static_cast<std::size_t>(pos)]);
  return out;
}

// ---------------------------------------------------------------------------
// Float training drivers (declared here, defined in training.cpp)
// ---------------------------------------------------------------------------

struct StepLog {
  int step = 0;
  double nll = 0.0;
  double ul = 0.0;
  double mo_ce = 0.0;
  double wall_ms = 0.0;
};

void write_train_log(const std::string& path, const std::vector<StepLog>& logs);

// Plain NLL training (with optional UL mixing when ul_clf is non-null).
// ground_clf supplies the attention export for classifier grounding modes.
std::vector<StepLog> train_generator(Seq2SeqModel<float>& model, const Vocabulary& vocab,
                                     const std::vector<GenExample>& data, const TrainConfig& cfg,
                                     const RpaClassifier<float>* ul_clf = nullptr,
                                     const RpaClassifier<float>* ground_clf = nullptr);

// Staged multi-objective training. Stage 1 freezes everything except the MO
// layers; stage 2 optimizes NLL + lambda * character CE jointly (lambda = 0
// skips the MO forward entirely).
std::vector<StepLog> train_mo(Seq2SeqModel<float>& model, const Vocabulary& vocab,
                              const std::vector<GenExample>& data,
                              const std::vector<std::string>& character_pool,
                              const TrainConfig& cfg);

// Generic ranking-classifier trainer (speaker classifier, response ranker).
struct RankItem {
  TokenSeq ctx;
  std::vector<TokenSeq> pool_tokens;
  int label = 0;
};

std::vector<StepLog> train_ranker(RpaClassifier<float>& clf, const std::vector<RankItem>& items,
                                  const TrainConfig& cfg);

std::vector<RankItem> rank_items_from_examples(const std::vector<RpaExample>& examples,
                                               const Vocabulary& vocab, int max_ctx_tokens);

// Fraction of examples whose character scores put the true speaker first
// (teacher-forced decoder states over the gold target).
double mo_hits_at_1(const Seq2SeqModel<float>& model, const Vocabulary& vocab,
                    const std::vector<GenExample>& data,
                    const std::vector<std::string>& character_pool);

}  // namespace charkeeper
