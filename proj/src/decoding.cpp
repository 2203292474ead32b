#include "charkeeper/decoding.hpp"

#include <array>
#include <cmath>
#include <limits>

namespace charkeeper {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

using Trigram = std::array<TokenId, 3>;

std::set<Trigram> collect_trigrams(const TokenSeq& seq) {
  std::set<Trigram> out;
  for (std::size_t i = 0; i + 2 < seq.size(); ++i)
    out.insert({seq[i], seq[i + 1], seq[i + 2]});
  return out;
}

bool is_generatable(TokenId t) {
  // Words, UNK and EOS; never PAD/BOS/SEP or the field markers.
  return t == Vocabulary::kEos || t == Vocabulary::kUnk || t >= Vocabulary::kNumReserved;
}

struct Constraints {
  std::set<Trigram> context_trigrams;
  bool block_ctx = true;
  bool block_self = true;
  int min_len = 1;
  int max_len = 16;
};

// Masks a next-token log-prob row in place for the hypothesis `tokens`.
void apply_constraints(std::vector<double>& lp, const TokenSeq& tokens, const Constraints& cc) {
  const int len = static_cast<int>(tokens.size());
  for (std::size_t v = 0; v < lp.size(); ++v)
    if (!is_generatable(static_cast<TokenId>(v))) lp[v] = kNegInf;
  if (len < cc.min_len) lp[Vocabulary::kEos] = kNegInf;
  if (len >= cc.max_len) {
    // Length cap: only EOS may follow.
    for (std::size_t v = 0; v < lp.size(); ++v)
      if (static_cast<TokenId>(v) != Vocabulary::kEos) lp[v] = kNegInf;
    return;
  }
  if (len >= 2 && (cc.block_ctx || cc.block_self)) {
    const TokenId a = tokens[static_cast<std::size_t>(len - 2)];
    const TokenId b = tokens[static_cast<std::size_t>(len - 1)];
    std::set<Trigram> self_tris;
    if (cc.block_self) self_tris = collect_trigrams(tokens);
    for (std::size_t v = 0; v < lp.size(); ++v) {
      if (lp[v] == kNegInf) continue;
      const Trigram tri = {a, b, static_cast<TokenId>(v)};
      if ((cc.block_ctx && cc.context_trigrams.count(tri)) ||
          (cc.block_self && self_tris.count(tri)))
        lp[v] = kNegInf;
    }
  }
}

std::vector<double> row_to_vec(const Tensor<float>& row) {
  std::vector<double> out(row.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(row.data[i]);
  return out;
}

TokenSeq with_bos(const TokenSeq& tokens) {
  TokenSeq out;
  out.reserve(tokens.size() + 1);
  out.push_back(Vocabulary::kBos);
  out.insert(out.end(), tokens.begin(), tokens.end());
  return out;
}

// Token ids ordered by log-prob descending, id ascending on ties.
std::vector<int> order_by_logprob(const std::vector<double>& lp) {
  std::vector<int> idx(lp.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (lp[static_cast<std::size_t>(a)] != lp[static_cast<std::size_t>(b)])
      return lp[static_cast<std::size_t>(a)] > lp[static_cast<std::size_t>(b)];
    return a < b;
  });
  return idx;
}

struct Candidate {
  int beam_idx;
  TokenId token;
  double lm_total;
  double adj_total;
  double sel_key;  // ranking key; equals adj_total unless re-order-only mode
};

}  // namespace

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::beam: return "beam";
    case Strategy::nucleus: return "nucleus";
    case Strategy::topk: return "topk";
    case Strategy::delayed_beam: return "delayed_beam";
  }
  throw std::runtime_error("unknown strategy");
}

Strategy strategy_from_name(const std::string& s) {
  if (s == "beam") return Strategy::beam;
  if (s == "nucleus") return Strategy::nucleus;
  if (s == "topk") return Strategy::topk;
  if (s == "delayed_beam") return Strategy::delayed_beam;
  throw std::runtime_error("unknown strategy: " + s);
}

std::string reranker_name(Reranker r) {
  switch (r) {
    case Reranker::none: return "none";
    case Reranker::complete: return "complete";
    case Reranker::partial_only: return "partial_only";
    case Reranker::pacer: return "pacer";
    case Reranker::fudge_oracle: return "fudge_oracle";
  }
  throw std::runtime_error("unknown reranker");
}

Reranker reranker_from_name(const std::string& s) {
  if (s == "none") return Reranker::none;
  if (s == "complete") return Reranker::complete;
  if (s == "partial_only") return Reranker::partial_only;
  if (s == "pacer") return Reranker::pacer;
  if (s == "fudge_oracle") return Reranker::fudge_oracle;
  throw std::runtime_error("unknown reranker: " + s);
}

long expected_classifier_calls(const CostLedger& ledger, int pacer_toks, int vocab_size,
                               bool with_final, int n_finished) {
  long calls = 0;
  const long per_beam = std::min<long>(pacer_toks, vocab_size);
  for (int live : ledger.live_beams_at_rescore) calls += static_cast<long>(live) * per_beam;
  if (with_final) calls += n_finished;
  return calls;
}

std::vector<double> fudge_rescore_row(const std::vector<double>& lm_logprobs,
                                      const std::vector<int>& candidates,
                                      const std::vector<double>& probs_clf,
                                      long* fallback_events) {
  if (candidates.empty()) throw std::runtime_error("fudge_rescore_row: empty candidate set");
  if (candidates.size() != probs_clf.size())
    throw std::runtime_error("fudge_rescore_row: classifier probabilities misaligned");
  std::vector<double> out = lm_logprobs;
  // Set mass before and after the product, in linear space.
  double set_mass = 0.0, product_mass = 0.0;
  bool any_clf = false;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double p_lm = std::exp(lm_logprobs[static_cast<std::size_t>(candidates[i])]);
    set_mass += p_lm;
    product_mass += p_lm * probs_clf[i];
    if (probs_clf[i] > 0.0) any_clf = true;
  }
  if (!any_clf || product_mass <= 0.0) {
    // All classifier probabilities zero: keep the lm distribution.
    if (fallback_events) ++*fallback_events;
    return out;
  }
  const double log_renorm = std::log(set_mass) - std::log(product_mass);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const std::size_t v = static_cast<std::size_t>(candidates[i]);
    if (lm_logprobs[v] == kNegInf) continue;
    out[v] = lm_logprobs[v] + std::log(probs_clf[i]) + log_renorm;
  }
  return out;
}

void rerank_complete(std::vector<BeamHypothesis>& hyps, const SelfScorer& scorer,
                     CostLedger& ledger) {
  if (hyps.empty()) throw std::runtime_error("rerank_complete: no hypotheses");
  std::vector<double> p_self(hyps.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    p_self[i] = scorer.prob_self(hyps[i].tokens);
    ++ledger.final_calls;
  }
  std::vector<int> idx(hyps.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (p_self[static_cast<std::size_t>(a)] != p_self[static_cast<std::size_t>(b)])
      return p_self[static_cast<std::size_t>(a)] > p_self[static_cast<std::size_t>(b)];
    return hyps[static_cast<std::size_t>(a)].lm_logprob > hyps[static_cast<std::size_t>(b)].lm_logprob;
  });
  std::vector<BeamHypothesis> reordered;
  for (int i : idx) {
    BeamHypothesis h = hyps[static_cast<std::size_t>(i)];
    h.adjusted_score = h.lm_logprob + std::log(std::max(p_self[static_cast<std::size_t>(i)], 1e-300));
    reordered.push_back(std::move(h));
  }
  hyps = std::move(reordered);
}

Decoder::Decoder(const Seq2SeqModel<float>& model, const Vocabulary& vocab)
    : model_(model), vocab_(vocab) {}

TokenSeq Decoder::serialize_pov(const PovContext& pov) const {
  return truncate_left(serialize_context(pov, vocab_, all_fields()), model_.cfg.max_ctx_tokens);
}

namespace {

struct LoopEnv {
  const Seq2SeqModel<float>* model;
  const VarPtr<float>* enc;
  const ExtraContext<float>* extra;
  Constraints cc;
  int vocab_size;
};

std::vector<double> masked_next_row(const LoopEnv& env, const TokenSeq& tokens,
                                    CostLedger& ledger) {
  ++ledger.lm_steps;
  auto row = env.model->next_logprobs(*env.enc, env.extra, with_bos(tokens));
  std::vector<double> lp = row_to_vec(row);
  apply_constraints(lp, tokens, env.cc);
  return lp;
}

// Beam expansion from an optional prefix. When `partial_rescore` is set,
// re-scoring steps adjust the top pacer_toks tokens per live beam via the
// FUDGE product before beam selection.
std::vector<BeamHypothesis> beam_loop(const LoopEnv& env, const DecodeConfig& cfg,
                                      const SelfScorer* scorer, bool partial_rescore,
                                      const TokenSeq& prefix, double prefix_lm,
                                      double prefix_adj, CostLedger& ledger) {
  const int stride = static_cast<int>(std::ceil(1.0 / cfg.pacer_freq - 1e-9));
  std::vector<BeamHypothesis> live = {
      {prefix, prefix_lm, prefix_adj, /*finished=*/false, /*best_effort=*/false}};
  std::vector<BeamHypothesis> finished;
  for (int step = 1; !live.empty(); ++step) {
    const bool rescore = partial_rescore && (step - 1) % stride == 0;
    if (rescore) {
      ledger.rescore_steps.push_back(step);
      ledger.live_beams_at_rescore.push_back(static_cast<int>(live.size()));
    }
    std::vector<Candidate> cands;
    std::vector<BeamHypothesis> stuck;
    for (std::size_t bi = 0; bi < live.size(); ++bi) {
      const BeamHypothesis& b = live[bi];
      std::vector<double> lp = masked_next_row(env, b.tokens, ledger);
      std::vector<double> sel = lp;
      if (rescore) {
        if (!scorer) throw std::runtime_error("partial re-scoring requires a classifier scorer");
        const std::vector<int> order = order_by_logprob(lp);
        const int take = std::min<int>(cfg.pacer_toks, env.vocab_size);
        std::vector<int> set(order.begin(), order.begin() + take);
        std::vector<double> pclf(set.size());
        for (std::size_t i = 0; i < set.size(); ++i) {
          TokenSeq probe = b.tokens;
          probe.push_back(static_cast<TokenId>(set[i]));
          pclf[i] = scorer->prob_self(probe);
          ++ledger.partial_calls;
        }
        sel = fudge_rescore_row(lp, set, pclf, &ledger.fallback_events);
      }
      bool any = false;
      for (int v = 0; v < env.vocab_size; ++v) {
        if (lp[static_cast<std::size_t>(v)] == kNegInf) continue;
        any = true;
        const double adj_inc =
            cfg.pacer_reorder_only ? lp[static_cast<std::size_t>(v)] : sel[static_cast<std::size_t>(v)];
        cands.push_back({static_cast<int>(bi), static_cast<TokenId>(v),
                         b.lm_logprob + lp[static_cast<std::size_t>(v)],
                         b.adjusted_score + adj_inc,
                         b.adjusted_score + sel[static_cast<std::size_t>(v)]});
      }
      if (!any) {
        BeamHypothesis h = b;
        h.tokens.push_back(Vocabulary::kEos);
        h.finished = true;
        h.best_effort = true;
        stuck.push_back(std::move(h));
      }
    }
    for (auto& h : stuck) finished.push_back(std::move(h));
    if (cands.empty()) break;
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.sel_key != b.sel_key) return a.sel_key > b.sel_key;
      if (a.lm_total != b.lm_total) return a.lm_total > b.lm_total;
      if (a.token != b.token) return a.token < b.token;
      return a.beam_idx < b.beam_idx;
    });
    std::vector<BeamHypothesis> next_live;
    const int width = std::min<int>(cfg.beam_size, static_cast<int>(cands.size()));
    for (int i = 0; i < width; ++i) {
      const Candidate& c = cands[static_cast<std::size_t>(i)];
      BeamHypothesis h = live[static_cast<std::size_t>(c.beam_idx)];
      h.tokens.push_back(c.token);
      h.lm_logprob = c.lm_total;
      h.adjusted_score = c.adj_total;
      if (c.token == Vocabulary::kEos) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        next_live.push_back(std::move(h));
      }
    }
    live = std::move(next_live);
  }
  std::stable_sort(finished.begin(), finished.end(),
                   [](const BeamHypothesis& a, const BeamHypothesis& b) {
                     if (a.adjusted_score != b.adjusted_score)
                       return a.adjusted_score > b.adjusted_score;
                     return a.lm_logprob > b.lm_logprob;
                   });
  if (static_cast<int>(finished.size()) > cfg.beam_size) finished.resize(cfg.beam_size);
  return finished;
}

// Shared inverse-CDF draw over candidates sorted by probability descending
// (token id ascending on ties); every sampling strategy funnels through this
// so the degenerate equivalences are exact.
TokenId sample_from_candidates(const std::vector<double>& lp, const std::vector<int>& order,
                               std::size_t n_candidates, Rng& rng) {
  double mass = 0.0;
  for (std::size_t i = 0; i < n_candidates; ++i) {
    const double p = std::exp(lp[static_cast<std::size_t>(order[i])]);
    mass += p;
  }
  if (mass <= 0.0) throw std::runtime_error("sampling: no probability mass");
  const double u = rng.next_double() * mass;
  double cum = 0.0;
  for (std::size_t i = 0; i < n_candidates; ++i) {
    cum += std::exp(lp[static_cast<std::size_t>(order[i])]);
    if (u < cum) return static_cast<TokenId>(order[i]);
  }
  return static_cast<TokenId>(order[n_candidates - 1]);
}

BeamHypothesis sample_loop(const LoopEnv& env, const DecodeConfig& cfg, Rng& rng,
                           CostLedger& ledger) {
  BeamHypothesis hyp;
  while (true) {
    std::vector<double> lp = masked_next_row(env, hyp.tokens, ledger);
    const std::vector<int> order = order_by_logprob(lp);
    std::size_t n = 0;
    if (cfg.strategy == Strategy::nucleus) {
      double cum = 0.0;
      while (n < order.size()) {
        const double p = std::exp(lp[static_cast<std::size_t>(order[n])]);
        if (p <= 0.0 && n > 0) break;  // exhausted the finite tail
        cum += p;
        ++n;
        if (cum >= cfg.top_p) break;
      }
    } else {  // topk (also the delayed_beam prefix phase)
      n = std::min<std::size_t>(static_cast<std::size_t>(cfg.top_k), order.size());
      while (n > 1 && lp[static_cast<std::size_t>(order[n - 1])] == kNegInf) --n;
    }
    if (n == 0) n = 1;
    const TokenId t = sample_from_candidates(lp, order, n, rng);
    hyp.tokens.push_back(t);
    hyp.lm_logprob += lp[static_cast<std::size_t>(t)];
    hyp.adjusted_score = hyp.lm_logprob;
    if (t == Vocabulary::kEos) {
      hyp.finished = true;
      return hyp;
    }
  }
}

}  // namespace

DecodeResult Decoder::decode(const PovContext& pov, const DecodeConfig& cfg,
                             const SelfScorer* scorer) const {
  cfg.validate();
  if (cfg.reranker == Reranker::fudge_oracle) {
    if (!scorer) throw std::runtime_error("fudge_oracle requires a classifier scorer");
    return fudge_oracle(pov, cfg, *scorer);
  }
  const bool partial =
      cfg.reranker == Reranker::pacer || cfg.reranker == Reranker::partial_only;
  if (partial && cfg.strategy != Strategy::beam)
    throw std::runtime_error("partial re-scoring is defined for beam search only");
  if ((partial || cfg.reranker == Reranker::complete) && !scorer)
    throw std::runtime_error("re-ranking requires a classifier scorer");

  DecodeResult res;
  const TokenSeq ctx_tokens = serialize_pov(pov);
  auto enc = model_.encode_context(ctx_tokens);
  std::optional<ExtraContext<float>> extra;
  if (model_.cfg.expanded.mode != GroundingMode::none) {
    std::vector<double> exported;
    const std::vector<double>* export_ptr = nullptr;
    if (model_.cfg.expanded.mode == GroundingMode::classifier_attn_top ||
        model_.cfg.expanded.mode == GroundingMode::classifier_attn_bottom) {
      if (!ground_clf_)
        throw std::runtime_error("classifier grounding requires set_grounding_classifier");
      exported = ground_clf_->attention_export(
          truncate_left(ctx_tokens, ground_clf_->cfg.max_ctx_tokens));
      export_ptr = &exported;
    }
    extra = model_.build_expanded_context(pov, vocab_, ctx_tokens, enc, export_ptr);
    res.selection = extra->selection;
  }

  LoopEnv env;
  env.model = &model_;
  env.enc = &enc;
  env.extra = extra ? &*extra : nullptr;
  env.cc.context_trigrams = collect_trigrams(ctx_tokens);
  env.cc.block_ctx = cfg.block_context_trigram;
  env.cc.block_self = cfg.block_self_trigram;
  env.cc.min_len = cfg.min_len;
  env.cc.max_len = cfg.max_len;
  env.vocab_size = model_.cfg.vocab_size;

  Rng rng(cfg.seed);
  switch (cfg.strategy) {
    case Strategy::beam:
      res.hypotheses = beam_loop(env, cfg, scorer, partial, {}, 0.0, 0.0, res.ledger);
      break;
    case Strategy::nucleus:
    case Strategy::topk:
      res.hypotheses = {sample_loop(env, cfg, rng, res.ledger)};
      break;
    case Strategy::delayed_beam: {
      BeamHypothesis prefix_hyp;
      bool early_eos = false;
      {
        for (int i = 0; i < cfg.delay; ++i) {
          std::vector<double> lp = masked_next_row(env, prefix_hyp.tokens, res.ledger);
          const std::vector<int> order = order_by_logprob(lp);
          std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.top_k), order.size());
          while (n > 1 && lp[static_cast<std::size_t>(order[n - 1])] == kNegInf) --n;
          if (n == 0) n = 1;
          const TokenId t = sample_from_candidates(lp, order, n, rng);
          prefix_hyp.tokens.push_back(t);
          prefix_hyp.lm_logprob += lp[static_cast<std::size_t>(t)];
          prefix_hyp.adjusted_score = prefix_hyp.lm_logprob;
          if (t == Vocabulary::kEos) {
            prefix_hyp.finished = true;
            early_eos = true;
            break;
          }
        }
      }
      if (early_eos)
        res.hypotheses = {prefix_hyp};
      else
        res.hypotheses = beam_loop(env, cfg, scorer, false, prefix_hyp.tokens,
                                   prefix_hyp.lm_logprob, prefix_hyp.adjusted_score, res.ledger);
      break;
    }
  }

  if (res.hypotheses.empty()) throw std::runtime_error("decode produced no hypotheses");
  if (cfg.reranker == Reranker::complete || cfg.reranker == Reranker::pacer)
    rerank_complete(res.hypotheses, *scorer, res.ledger);
  res.ledger.finalize();
  return res;
}

DecodeResult Decoder::fudge_oracle(const PovContext& pov, const DecodeConfig& cfg,
                                   const SelfScorer& scorer) const {
  const TokenSeq ctx_tokens = serialize_pov(pov);
  auto enc = model_.encode_context(ctx_tokens);
  std::optional<ExtraContext<float>> extra;
  if (model_.cfg.expanded.mode != GroundingMode::none)
    extra = model_.build_expanded_context(pov, vocab_, ctx_tokens, enc, nullptr);

  Constraints cc;
  cc.context_trigrams = collect_trigrams(ctx_tokens);
  cc.block_ctx = cfg.block_context_trigram;
  cc.block_self = cfg.block_self_trigram;
  cc.min_len = cfg.min_len;
  cc.max_len = cfg.max_len;

  DecodeResult res;
  BeamHypothesis hyp;
  while (!hyp.finished) {
    ++res.ledger.lm_steps;
    auto row = model_.next_logprobs(enc, extra ? &*extra : nullptr, with_bos(hyp.tokens));
    std::vector<double> lp = row_to_vec(row);
    apply_constraints(lp, hyp.tokens, cc);
    // Product distribution over every viable token.
    TokenId best = -1;
    double best_key = kNegInf, best_lm = kNegInf;
    for (int v = 0; v < model_.cfg.vocab_size; ++v) {
      if (lp[static_cast<std::size_t>(v)] == kNegInf) continue;
      TokenSeq probe = hyp.tokens;
      probe.push_back(static_cast<TokenId>(v));
      const double p_clf = scorer.prob_self(probe);
      ++res.ledger.partial_calls;
      const double key = lp[static_cast<std::size_t>(v)] +
                         std::log(std::max(p_clf, std::numeric_limits<double>::min()));
      if (key > best_key || (key == best_key && lp[static_cast<std::size_t>(v)] > best_lm)) {
        best = static_cast<TokenId>(v);
        best_key = key;
        best_lm = lp[static_cast<std::size_t>(v)];
      }
    }
    if (best < 0) {
      hyp.tokens.push_back(Vocabulary::kEos);
      hyp.finished = true;
      hyp.best_effort = true;
      break;
    }
    hyp.tokens.push_back(best);
    hyp.lm_logprob += lp[static_cast<std::size_t>(best)];
    hyp.adjusted_score += best_key;
    if (best == Vocabulary::kEos) hyp.finished = true;
  }
  res.hypotheses = {hyp};
  res.ledger.finalize();
  return res;
}

RetrievalResult retrieval_respond(const RpaClassifier<float>& response_ranker,
                                  const RpaClassifier<float>& rpa_clf,
                                  const Vocabulary& vocab,
                                  const std::vector<BankUtterance>& bank,
                                  const PovContext& pov, const TokenSeq& ctx_tokens,
                                  bool rerank, int rerank_k) {
  if (bank.empty()) throw std::runtime_error("retrieval_respond: empty bank");
  std::vector<TokenSeq> pool_tokens;
  for (const auto& u : bank) pool_tokens.push_back(u.tokens);
  RetrievalResult res;
  const std::vector<double> probs = response_ranker.score_pool_tokens(ctx_tokens, pool_tokens);
  std::vector<int> order(bank.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (probs[static_cast<std::size_t>(a)] != probs[static_cast<std::size_t>(b)])
      return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
    return a < b;
  });
  int pick = order[0];
  if (rerank && rerank_k > 1) {
    const int k = std::min<int>(rerank_k, static_cast<int>(order.size()));
    const std::vector<std::string> pair = {pov.self_name, pov.partner_name};
    double best_self = -1.0;
    for (int i = 0; i < k; ++i) {
      TokenSeq q = ctx_tokens;
      q.push_back(Vocabulary::kSep);
      const TokenSeq& cand = bank[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])].tokens;
      q.insert(q.end(), cand.begin(), cand.end());
      const double p_self = rpa_clf.score_candidates(q, pair, vocab).probs[0];
      ++res.ledger.final_calls;
      if (p_self > best_self) {
        best_self = p_self;
        pick = order[static_cast<std::size_t>(i)];
      }
    }
  }
  res.bank_index = pick;
  res.partner_said = bank[static_cast<std::size_t>(pick)].speaker_name == pov.partner_name;
  res.ledger.finalize();
  return res;
}

}  // namespace charkeeper
