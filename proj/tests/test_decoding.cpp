#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "charkeeper/decoding.hpp"
#include "charkeeper/training.hpp"

using namespace charkeeper;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Fixture {
  std::vector<Dialogue> corpus;
  Vocabulary vocab;
  std::vector<GenExample> data;
};

Fixture make_fixture(int n_dialogues = 4, int turns = 4, std::uint64_t seed = 17) {
  CorpusSpec spec;
  spec.n_roles = 4;
  spec.role_lexicon_size = 4;
  spec.n_dialogues = n_dialogues;
  spec.turns_per_dialogue = turns;
  spec.seed = seed;
  Fixture f;
  f.corpus = generate_synthetic_corpus(spec);
  f.vocab = build_vocab(f.corpus, 1);
  f.data = build_generation_dataset(f.corpus, f.vocab, 48);
  return f;
}

ModelConfig small_model_config(const Fixture& f) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.d_ffn = 32;
  cfg.vocab_size = f.vocab.size();
  cfg.max_ctx_tokens = 48;
  cfg.max_target_len = 14;
  cfg.seed = 3;
  return cfg;
}

RpaClassifierConfig small_clf_config(const Fixture& f) {
  RpaClassifierConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_ctx_layers = 1;
  cfg.n_cand_layers = 1;
  cfg.d_ffn = 32;
  cfg.m_codes = 2;
  cfg.vocab_size = f.vocab.size();
  cfg.max_ctx_tokens = 128;
  cfg.seed = 5;
  return cfg;
}

// Deterministic prefix-keyed probability in (0.05, 0.95); cheap stand-in for
// a trained classifier when only call accounting or ordering matters.
SelfScorer hash_scorer() {
  return SelfScorer{[](const TokenSeq& prefix) {
    std::uint64_t h = 1469598103934665603ull;
    for (TokenId t : prefix) {
      h ^= static_cast<std::uint64_t>(t) + 0x9e3779b97f4a7c15ull;
      h *= 1099511628211ull;
    }
    return 0.05 + 0.9 * static_cast<double>(h % 100003ull) / 100003.0;
  }};
}

SelfScorer constant_scorer(double p) {
  return SelfScorer{[p](const TokenSeq&) { return p; }};
}

bool token_ok(TokenId t) {
  return t == Vocabulary::kEos || t == Vocabulary::kUnk || t >= Vocabulary::kNumReserved;
}

using Trigram = std::array<TokenId, 3>;

std::set<Trigram> trigrams_of(const TokenSeq& seq) {
  std::set<Trigram> out;
  for (std::size_t i = 2; i < seq.size(); ++i) out.insert({seq[i - 2], seq[i - 1], seq[i]});
  return out;
}

// min_len/max_len bounds, EOS framing, generatable tokens, and (when the
// blocks are on) trigram novelty against the context and the hypothesis
// itself.  best_effort hypotheses are exempt from the length/trigram rules.
void check_constraints(const BeamHypothesis& h, const TokenSeq& ctx, const DecodeConfig& cfg) {
  REQUIRE(!h.tokens.empty());
  CHECK(h.finished);
  CHECK(h.tokens.back() == Vocabulary::kEos);
  const int text_len = static_cast<int>(h.tokens.size()) - 1;
  for (int i = 0; i < text_len; ++i) {
    CHECK(h.tokens[static_cast<std::size_t>(i)] != Vocabulary::kEos);
    CHECK(token_ok(h.tokens[static_cast<std::size_t>(i)]));
  }
  CHECK(text_len <= cfg.max_len);
  if (h.best_effort) return;
  CHECK(text_len >= cfg.min_len);
  const std::set<Trigram> ctx_tris = trigrams_of(ctx);
  std::set<Trigram> seen;
  for (std::size_t i = 2; i < h.tokens.size(); ++i) {
    const Trigram tri = {h.tokens[i - 2], h.tokens[i - 1], h.tokens[i]};
    if (cfg.block_context_trigram) CHECK(ctx_tris.count(tri) == 0);
    if (cfg.block_self_trigram) CHECK(seen.count(tri) == 0);
    seen.insert(tri);
  }
}

}  // namespace

TEST_CASE("strategy and reranker names round-trip") {
  for (Strategy s : {Strategy::beam, Strategy::nucleus, Strategy::topk, Strategy::delayed_beam})
    CHECK(strategy_from_name(strategy_name(s)) == s);
  for (Reranker r : {Reranker::none, Reranker::complete, Reranker::partial_only, Reranker::pacer,
                     Reranker::fudge_oracle})
    CHECK(reranker_from_name(reranker_name(r)) == r);
  CHECK_THROWS_WITH(strategy_from_name("greedy"), doctest::Contains("unknown strategy"));
  CHECK_THROWS_WITH(reranker_from_name("mbr"), doctest::Contains("unknown reranker"));
}

TEST_CASE("decode config validation rejects out-of-range fields") {
  DecodeConfig ok;
  CHECK_NOTHROW(ok.validate());
  auto expect_bad = [](DecodeConfig cfg, const char* what) {
    CHECK_THROWS_WITH(cfg.validate(), doctest::Contains(what));
  };
  DecodeConfig c = ok;
  c.beam_size = 0;
  expect_bad(c, "beam_size");
  c = ok;
  c.top_p = 0.0;
  expect_bad(c, "top_p");
  c = ok;
  c.top_p = 1.5;
  expect_bad(c, "top_p");
  c = ok;
  c.top_k = 0;
  expect_bad(c, "top_k");
  c = ok;
  c.pacer_freq = 0.0;
  expect_bad(c, "pacer_freq");
  c = ok;
  c.pacer_freq = 1.1;
  expect_bad(c, "pacer_freq");
  c = ok;
  c.pacer_toks = 0;
  expect_bad(c, "pacer_toks");
  c = ok;
  c.min_len = 0;
  expect_bad(c, "min_len");
  c = ok;
  c.min_len = 9;
  c.max_len = 8;
  expect_bad(c, "min_len");
  c = ok;
  c.delay = -1;
  expect_bad(c, "delay");
}

TEST_CASE("fudge product matches the hand-computed two-token oracle") {
  // p_lm = {0.6, 0.4}, p_clf = {0.5, 1.0}; the mass-preserving product is
  // {0.6*0.5, 0.4*1.0} / 0.7 = {3/7, 4/7}.
  const std::vector<double> lp = {std::log(0.6), std::log(0.4)};
  long fallbacks = 0;
  const auto out = fudge_rescore_row(lp, {0, 1}, {0.5, 1.0}, &fallbacks);
  REQUIRE(out.size() == 2);
  CHECK(out[0] == doctest::Approx(std::log(3.0 / 7.0)).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx(std::log(4.0 / 7.0)).epsilon(1e-12));
  CHECK(std::exp(out[0]) + std::exp(out[1]) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fallbacks == 0);
}

TEST_CASE("fudge product preserves set mass and leaves outside tokens untouched") {
  const std::vector<double> probs = {0.5, 0.2, 0.2, 0.1};
  std::vector<double> lp(4);
  for (int i = 0; i < 4; ++i) lp[static_cast<std::size_t>(i)] = std::log(probs[static_cast<std::size_t>(i)]);
  const std::vector<int> set = {1, 2};
  const std::vector<double> pclf = {0.8, 0.1};
  long fallbacks = 0;
  const auto out = fudge_rescore_row(lp, set, pclf, &fallbacks);

  CHECK(out[0] == lp[0]);
  CHECK(out[3] == lp[3]);
  const double set_mass = probs[1] + probs[2];
  const double product_mass = probs[1] * 0.8 + probs[2] * 0.1;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto v = static_cast<std::size_t>(set[i]);
    const double want = lp[v] + std::log(pclf[i]) + std::log(set_mass) - std::log(product_mass);
    CHECK(out[v] == doctest::Approx(want).epsilon(1e-12));
  }
  CHECK(std::exp(out[1]) + std::exp(out[2]) == doctest::Approx(set_mass).epsilon(1e-12));
  CHECK(fallbacks == 0);
}

TEST_CASE("fudge product falls back to the lm row when the classifier is silent") {
  const std::vector<double> lp = {std::log(0.7), std::log(0.2), std::log(0.1)};
  long fallbacks = 0;
  const auto out = fudge_rescore_row(lp, {0, 1, 2}, {0.0, 0.0, 0.0}, &fallbacks);
  CHECK(out == lp);
  CHECK(fallbacks == 1);
  const auto out2 = fudge_rescore_row(lp, {1}, {0.0}, &fallbacks);
  CHECK(out2 == lp);
  CHECK(fallbacks == 2);
}

TEST_CASE("fudge product skips masked tokens and validates its inputs") {
  std::vector<double> lp = {std::log(0.6), -kInf, std::log(0.4)};
  long fallbacks = 0;
  const auto out = fudge_rescore_row(lp, {0, 1, 2}, {0.5, 0.9, 0.5}, &fallbacks);
  CHECK(out[1] == -kInf);
  // Uniform classifier over the unmasked members leaves them unchanged.
  CHECK(out[0] == doctest::Approx(lp[0]).epsilon(1e-12));
  CHECK(out[2] == doctest::Approx(lp[2]).epsilon(1e-12));
  CHECK(fallbacks == 0);

  CHECK_THROWS_WITH(fudge_rescore_row(lp, {}, {}, nullptr),
                    doctest::Contains("empty candidate set"));
  CHECK_THROWS_WITH(fudge_rescore_row(lp, {0, 1}, {0.5}, nullptr),
                    doctest::Contains("misaligned"));
}

TEST_CASE("complete re-ranking orders by self-probability without altering content") {
  auto hyp = [](std::initializer_list<TokenId> toks, double lm) {
    BeamHypothesis h;
    h.tokens = TokenSeq(toks);
    h.lm_logprob = lm;
    h.adjusted_score = lm;
    h.finished = true;
    return h;
  };
  std::vector<BeamHypothesis> hyps = {
      hyp({10, 11, Vocabulary::kEos}, -1.0), hyp({12, 13, Vocabulary::kEos}, -2.0),
      hyp({14, 15, Vocabulary::kEos}, -3.0), hyp({16, 17, Vocabulary::kEos}, -0.5)};
  std::map<TokenId, double> p_by_head = {{10, 0.2}, {12, 0.9}, {14, 0.9}, {16, 0.0}};
  SelfScorer scorer{[&](const TokenSeq& toks) { return p_by_head.at(toks[0]); }};

  std::multiset<TokenSeq> before;
  for (const auto& h : hyps) before.insert(h.tokens);
  CostLedger ledger;
  rerank_complete(hyps, scorer, ledger);

  CHECK(ledger.final_calls == 4);
  std::multiset<TokenSeq> after;
  for (const auto& h : hyps) after.insert(h.tokens);
  CHECK(before == after);

  // 0.9-tie broken by lm (-2 over -3), then 0.2, then the zero-probability tail.
  CHECK(hyps[0].tokens[0] == 12);
  CHECK(hyps[1].tokens[0] == 14);
  CHECK(hyps[2].tokens[0] == 10);
  CHECK(hyps[3].tokens[0] == 16);
  CHECK(hyps[0].adjusted_score == doctest::Approx(-2.0 + std::log(0.9)).epsilon(1e-12));
  CHECK(hyps[2].adjusted_score == doctest::Approx(-1.0 + std::log(0.2)).epsilon(1e-12));
  CHECK(hyps[3].adjusted_score == doctest::Approx(-0.5 + std::log(1e-300)).epsilon(1e-12));

  std::vector<BeamHypothesis> empty;
  CHECK_THROWS_WITH(rerank_complete(empty, scorer, ledger), doctest::Contains("no hypotheses"));
}

TEST_CASE("complete re-ranking is stable on full ties") {
  std::vector<BeamHypothesis> hyps;
  for (TokenId t : {20, 21, 22}) {
    BeamHypothesis h;
    h.tokens = {t, Vocabulary::kEos};
    h.lm_logprob = -1.5;
    h.finished = true;
    hyps.push_back(h);
  }
  CostLedger ledger;
  rerank_complete(hyps, constant_scorer(0.4), ledger);
  CHECK(hyps[0].tokens[0] == 20);
  CHECK(hyps[1].tokens[0] == 21);
  CHECK(hyps[2].tokens[0] == 22);
}

TEST_CASE("expected classifier calls follow the live-beam trace") {
  CostLedger ledger;
  ledger.live_beams_at_rescore = {2, 3};
  CHECK(expected_classifier_calls(ledger, 5, 4, false, 0) == 20);  // #Toks clamped to |V|
  CHECK(expected_classifier_calls(ledger, 5, 40, false, 0) == 25);
  CHECK(expected_classifier_calls(ledger, 5, 40, true, 3) == 28);
  CostLedger none;
  CHECK(expected_classifier_calls(none, 10, 40, true, 7) == 7);
  CHECK(expected_classifier_calls(none, 10, 40, false, 7) == 0);
}

TEST_CASE("ledger finalize computes totals and relative cost") {
  CostLedger ledger;
  ledger.lm_steps = 20;
  ledger.partial_calls = 10;
  ledger.final_calls = 1;
  ledger.finalize();
  CHECK(ledger.classifier_calls == 11);
  CHECK(ledger.relative_cost == doctest::Approx(31.0 / 20.0).epsilon(1e-15));

  CostLedger idle;
  idle.partial_calls = 5;
  idle.finalize();
  CHECK(idle.classifier_calls == 5);
  CHECK(idle.relative_cost == 1.0);
}

TEST_CASE("prefix scorer strips terminals and guards the empty prefix") {
  auto f = make_fixture();
  RpaClassifier<float> clf(small_clf_config(f));
  const auto& pov = f.data[2].pov;
  const TokenSeq ctx = f.data[2].ctx_tokens;
  const SelfScorer scorer =
      make_self_scorer(clf, f.vocab, ctx, pov.self_name, pov.partner_name);
  const std::vector<std::string> pool = {pov.self_name, pov.partner_name};

  TokenSeq prefix = {12, 15, 11};
  TokenSeq manual = ctx;
  manual.push_back(Vocabulary::kSep);
  for (TokenId t : prefix) manual.push_back(t);
  const auto scored = clf.score_candidates(manual, pool, f.vocab);
  CHECK(scorer.prob_self(prefix) == scored.probs[0]);
  CHECK(scored.probs[0] + scored.probs[1] == doctest::Approx(1.0).epsilon(1e-9));

  // EOS/PAD contribute nothing.
  TokenSeq noisy = {12, Vocabulary::kEos, 15, Vocabulary::kPad, 11, Vocabulary::kEos};
  CHECK(scorer.prob_self(noisy) == scorer.prob_self(prefix));

  TokenSeq guard = ctx;
  guard.push_back(Vocabulary::kSep);
  guard.push_back(Vocabulary::kPad);
  CHECK(scorer.prob_self({}) == clf.score_candidates(guard, pool, f.vocab).probs[0]);
}

TEST_CASE("a twenty-step single-beam rescore-once decode issues eleven classifier calls") {
  auto f = make_fixture();
  Seq2SeqModel<float> model(small_model_config(f));
  Decoder decoder(model, f.vocab);

  DecodeConfig cfg;
  cfg.strategy = Strategy::beam;
  cfg.beam_size = 1;
  cfg.reranker = Reranker::pacer;
  cfg.pacer_freq = 0.05;  // stride 20: with 20 decode steps only step 1 re-scores
  cfg.pacer_toks = 10;
  cfg.min_len = 19;
  cfg.max_len = 19;
  cfg.block_context_trigram = false;
  cfg.block_self_trigram = false;

  const SelfScorer scorer = constant_scorer(0.5);
  const auto res = decoder.decode(f.data[0].pov, cfg, &scorer);

  CHECK(res.ledger.rescore_steps == std::vector<int>{1});
  CHECK(res.ledger.live_beams_at_rescore == std::vector<int>{1});
  CHECK(res.ledger.partial_calls == 10);
  CHECK(res.ledger.final_calls == 1);
  CHECK(res.ledger.classifier_calls == 11);
  CHECK(res.ledger.lm_steps == 20);
  CHECK(res.ledger.relative_cost == doctest::Approx(31.0 / 20.0).epsilon(1e-15));

  REQUIRE(res.hypotheses.size() == 1);
  CHECK(res.hypotheses[0].tokens.size() == 20);  // 19 text tokens + EOS
  CHECK(res.hypotheses[0].tokens.back() == Vocabulary::kEos);
  CHECK(!res.hypotheses[0].best_effort);
}

TEST_CASE("measured classifier calls equal the closed form across configurations") {
  auto f = make_fixture();
  Seq2SeqModel<float> model(small_model_config(f));
  Decoder decoder(model, f.vocab);
  const SelfScorer scorer = hash_scorer();
  const int V = f.vocab.size();

  struct Variant {
    Reranker reranker;
    Strategy strategy;
    int beam;
    int toks;
    double freq;
  };
  const std::vector<Variant> variants = {
      {Reranker::pacer, Strategy::beam, 1, 3, 1.0},
      {Reranker::pacer, Strategy::beam, 2, 7, 0.5},
      {Reranker::pacer, Strategy::beam, 3, 1, 0.33},
      {Reranker::pacer, Strategy::beam, 2, 500, 0.05},
      {Reranker::partial_only, Strategy::beam, 2, 4, 1.0},
      {Reranker::partial_only, Strategy::beam, 3, 9, 0.3},
      {Reranker::complete, Strategy::beam, 3, 10, 1.0},
      {Reranker::complete, Strategy::nucleus, 1, 10, 1.0},
      {Reranker::complete, Strategy::topk, 1, 10, 1.0},
      {Reranker::none, Strategy::beam, 2, 10, 1.0},
  };

  int vi = 0;
  for (const auto& v : variants) {
    CAPTURE(vi);
    DecodeConfig cfg;
    cfg.strategy = v.strategy;
    cfg.beam_size = v.beam;
    cfg.reranker = v.reranker;
    cfg.pacer_toks = v.toks;
    cfg.pacer_freq = v.freq;
    cfg.min_len = 2;
    cfg.max_len = 6 + (vi % 3);
    cfg.seed = 100 + static_cast<std::uint64_t>(vi);
    const SelfScorer* sp = v.reranker == Reranker::none ? nullptr : &scorer;
    const auto res = decoder.decode(f.data[static_cast<std::size_t>(vi) % f.data.size()].pov,
                                    cfg, sp);

    const bool with_final =
        v.reranker == Reranker::pacer || v.reranker == Reranker::complete;
    const long expect = expected_classifier_calls(res.ledger, cfg.pacer_toks, V, with_final,
                                                  static_cast<int>(res.hypotheses.size()));
    CHECK(res.ledger.classifier_calls == expect);
    CHECK(res.ledger.classifier_calls == res.ledger.partial_calls + res.ledger.final_calls);

    long partial = 0;
    for (int live : res.ledger.live_beams_at_rescore)
      partial += static_cast<long>(live) * std::min<long>(cfg.pacer_toks, V);
    CHECK(res.ledger.partial_calls == partial);
    CHECK(res.ledger.final_calls == (with_final ? static_cast<long>(res.hypotheses.size()) : 0));

    const bool rescoring = v.reranker == Reranker::pacer || v.reranker == Reranker::partial_only;
    if (rescoring) {
      const int stride = static_cast<int>(std::ceil(1.0 / cfg.pacer_freq - 1e-9));
      REQUIRE(!res.ledger.rescore_steps.empty());
      CHECK(res.ledger.rescore_steps.front() == 1);
      for (int s : res.ledger.rescore_steps) CHECK((s - 1) % stride == 0);
      CHECK(res.ledger.rescore_steps.size() == res.ledger.live_beams_at_rescore.size());
    } else {
      CHECK(res.ledger.rescore_steps.empty());
    }
    ++vi;
  }
}

TEST_CASE("beam decode respects length, vocabulary, and trigram constraints") {
  auto f = make_fixture(6, 4, 23);
  Seq2SeqModel<float> model(small_model_config(f));
  Decoder decoder(model, f.vocab);

  for (std::size_t di = 0; di < 6; ++di) {
    CAPTURE(di);
    const auto& ex = f.data[di * 3 % f.data.size()];
    DecodeConfig cfg;
    cfg.beam_size = 3;
    cfg.min_len = 3;
    cfg.max_len = 8;
    const auto res = decoder.decode(ex.pov, cfg);
    REQUIRE(!res.hypotheses.empty());
    CHECK(res.hypotheses.size() <= static_cast<std::size_t>(cfg.beam_size));
    const TokenSeq ctx = decoder.serialize_pov(ex.pov);
    for (const auto& h : res.hypotheses) check_constraints(h, ctx, cfg);
    for (std::size_t i = 1; i < res.hypotheses.size(); ++i)
      CHECK(res.hypotheses[i - 1].adjusted_score >= res.hypotheses[i].adjusted_score);
  }
}

TEST_CASE("sampled strategies honor the same constraints") {
  auto f = make_fixture();
  Seq2SeqModel<float> model(small_model_config(f));
  Decoder decoder(model, f.vocab);

  for (Strategy s : {Strategy::nucleus, Strategy::topk, Strategy::delayed_beam}) {
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
      CAPTURE(static_cast<int>(s));
      CAPTURE(seed);
      DecodeConfig cfg;
      cfg.strategy = s;
      cfg.min_len = 3;
      cfg.max_len = 8;
      cfg.top_p = 0.9;
      cfg.top_k = 5;
      cfg.delay = 2;
      cfg.beam_size = 2;
      cfg.seed = seed;
      const auto& ex = f.data[seed % f.data.size()];
      const auto res = decoder.decode(ex.pov, cfg);
      REQUIRE(!res.hypotheses.empty());
      const TokenSeq ctx = decoder.serialize_pov(ex.pov);
      for (const auto& h : res.hypotheses) check_constraints(h, ctx, cfg);
    }
  }
}

TEST_CASE("degenerate sampling configurations reproduce beam search and each other") {
  auto f = make_fixture();
  Seq2SeqModel<float> model(small_model_config(f));
  Decoder decoder(model, f.vocab);
  const auto& pov = f.data[1].pov;

  DecodeConfig beam1;
  beam1.strategy = Strategy::beam;
  beam1.beam_size = 1;
  beam1.min_len = 3;
  beam1.max_len = 10;
  const auto greedy = decoder.decode(pov, beam1);

  SUBCASE("top-k with k=1 is greedy") {
    DecodeConfig cfg = beam1;
    cfg.strategy = Strategy::topk;
    cfg.top_k = 1;
    const auto res = decoder.decode(pov, cfg);
    CHECK(res.hypotheses[0].tokens == greedy.hypotheses[0].tokens);
    CHECK(res.hypotheses[0].lm_logprob == greedy.hypotheses[0].lm_logprob);
  }

  SUBCASE("nucleus with full mass equals top-k over the whole vocabulary") {
    DecodeConfig nuc = beam1;
    nuc.strategy = Strategy::nucleus;
    nuc.top_p = 1.0;
    nuc.seed = 77;
    DecodeConfig tk = beam1;
    tk.strategy = Strategy::topk;
    tk.top_k = f.vocab.size();
    tk.seed = 77;
    const auto a = decoder.decode(pov, nuc);
    const auto b = decoder.decode(pov, tk);
    CHECK(a.hypotheses[0].tokens == b.hypotheses[0].tokens);
    CHECK(a.hypotheses[0].lm_logprob == b.hypotheses[0].lm_logprob);
  }

  SUBCASE("delayed beam with zero delay is plain beam search") {
    for (int width : {1, 3}) {
      CAPTURE(width);
      DecodeConfig pure = beam1;
      pure.beam_size = width;
      DecodeConfig delayed = pure;
      delayed.strategy = Strategy::delayed_beam;
      delayed.delay = 0;
      const auto a = decoder.decode(pov, pure);
      const auto b = decoder.decode(pov, delayed);
      REQUIRE(a.hypotheses.size() == b.hypotheses.size());
      for (std::size_t i = 0; i < a.hypotheses.size(); ++i) {
        CHECK(a.hypotheses[i].tokens == b.hypotheses[i].tokens);
        CHECK(a.hypotheses[i].lm_logprob == b.hypotheses[i].lm_logprob);
        CHECK(a.hypotheses[i].adjusted_score == b.hypotheses[i].adjusted_score);
      }
      CHECK(a.ledger.lm_steps == b.ledger.lm_steps);
    }
  }

  SUBCASE("delayed beam with a greedy prefix matches single-beam search") {
    DecodeConfig cfg = beam1;
    cfg.strategy = Strategy::delayed_beam;
    cfg.delay = 3;
    cfg.top_k = 1;
    const auto res = decoder.decode(pov, cfg);
    CHECK(res.hypotheses[0].tokens == greedy.hypotheses[0].tokens);
  }
}

TEST_CASE("partial re-scoring with full token coverage matches the exhaustive oracle") {
  auto f = make_fixture(5, 4, 31);
  Seq2SeqModel<float> model(small_model_config(f));
  RpaClassifier<float> clf(small_clf_config(f));
  Decoder decoder(model, f.vocab);

  for (std::size_t di = 0; di < 5; ++di) {
    CAPTURE(di);
    const auto& ex = f.data[di * 2 % f.data.size()];
    const TokenSeq ctx = decoder.serialize_pov(ex.pov);
    const SelfScorer scorer =
        make_self_scorer(clf, f.vocab, ctx, ex.pov.self_name, ex.pov.partner_name);

    DecodeConfig cfg;
    cfg.strategy = Strategy::beam;
    cfg.beam_size = 1;
    cfg.reranker = Reranker::pacer;
    cfg.pacer_freq = 1.0;
    cfg.pacer_toks = f.vocab.size();
    cfg.min_len = 2;
    cfg.max_len = 7;

    const auto pacer = decoder.decode(ex.pov, cfg, &scorer);
    const auto oracle = decoder.fudge_oracle(ex.pov, cfg, scorer);
    REQUIRE(pacer.hypotheses.size() == 1);
    REQUIRE(oracle.hypotheses.size() == 1);
    CHECK(pacer.hypotheses[0].tokens == oracle.hypotheses[0].tokens);
    CHECK(pacer.hypotheses[0].lm_logprob == oracle.hypotheses[0].lm_logprob);

    DecodeConfig via = cfg;
    via.reranker = Reranker::fudge_oracle;
    const auto dispatched = decoder.decode(ex.pov, via, &scorer);
    CHECK(dispatched.hypotheses[0].tokens == oracle.hypotheses[0].tokens);
  }
}

TEST_CASE("re-order-only mode keeps lm scores while selecting the same tokens") {
  auto f = make_fixture();
  Seq2SeqModel<float> model(small_model_config(f));
  Decoder decoder(model, f.vocab);
  const SelfScorer scorer = hash_scorer();
  const auto& pov = f.data[3].pov;

  DecodeConfig cfg;
  cfg.strategy = Strategy::beam;
  cfg.beam_size = 1;
  cfg.reranker = Reranker::partial_only;
  cfg.pacer_freq = 1.0;
  cfg.pacer_toks = 5;
  cfg.min_len = 3;
  cfg.max_len = 8;

  const auto adjusted = decoder.decode(pov, cfg, &scorer);
  DecodeConfig ro = cfg;
  ro.pacer_reorder_only = true;
  const auto reorder = decoder.decode(pov, ro, &scorer);

  // Same selection key, so the same token path; only the carried score differs.
  REQUIRE(reorder.hypotheses.size() == adjusted.hypotheses.size());
  CHECK(reorder.hypotheses[0].tokens == adjusted.hypotheses[0].tokens);
  for (const auto& h : reorder.hypotheses) CHECK(h.adjusted_score == h.lm_logprob);
  CHECK(adjusted.hypotheses[0].adjusted_score != adjusted.hypotheses[0].lm_logprob);
}

TEST_CASE("complete re-ranking selects the brute-force argmax hypothesis") {
  auto f = make_fixture(5, 4, 41);
  Seq2SeqModel<float> model(small_model_config(f));
  RpaClassifier<float> clf(small_clf_config(f));
  Decoder decoder(model, f.vocab);

  for (std::size_t di = 0; di < 4; ++di) {
    CAPTURE(di);
    const auto& ex = f.data[di * 3 % f.data.size()];
    const TokenSeq ctx = decoder.serialize_pov(ex.pov);
    const SelfScorer scorer =
        make_self_scorer(clf, f.vocab, ctx, ex.pov.self_name, ex.pov.partner_name);

    DecodeConfig cfg;
    cfg.beam_size = 4;
    cfg.min_len = 2;
    cfg.max_len = 7;
    const auto plain = decoder.decode(ex.pov, cfg);

    DecodeConfig rr = cfg;
    rr.reranker = Reranker::complete;
    const auto reranked = decoder.decode(ex.pov, rr, &scorer);

    REQUIRE(reranked.hypotheses.size() == plain.hypotheses.size());
    std::multiset<TokenSeq> a, b;
    for (const auto& h : plain.hypotheses) a.insert(h.tokens);
    for (const auto& h : reranked.hypotheses) b.insert(h.tokens);
    CHECK(a == b);

    // Brute force over the same pool.
    std::size_t best = 0;
    double best_p = -1.0, best_lm = -kInf;
    for (std::size_t i = 0; i < plain.hypotheses.size(); ++i) {
      const double p = scorer.prob_self(plain.hypotheses[i].tokens);
      if (p > best_p || (p == best_p && plain.hypotheses[i].lm_logprob > best_lm)) {
        best = i;
        best_p = p;
        best_lm = plain.hypotheses[i].lm_logprob;
      }
    }
    CHECK(reranked.hypotheses[0].tokens == plain.hypotheses[best].tokens);
    CHECK(reranked.hypotheses[0].adjusted_score ==
          doctest::Approx(plain.hypotheses[best].lm_logprob + std::log(std::max(best_p, 1e-300)))
              .epsilon(1e-12));
    CHECK(reranked.ledger.final_calls == static_cast<long>(plain.hypotheses.size()));

    for (std::size_t i = 1; i < reranked.hypotheses.size(); ++i) {
      const double prev = scorer.prob_self(reranked.hypotheses[i - 1].tokens);
      const double cur = scorer.prob_self(reranked.hypotheses[i].tokens);
      CHECK(prev >= cur);
    }
  }
}

TEST_CASE("decode rejects misconfigured re-ranking requests") {
  auto f = make_fixture();
  Seq2SeqModel<float> model(small_model_config(f));
  Decoder decoder(model, f.vocab);
  const SelfScorer scorer = hash_scorer();
  const auto& pov = f.data[0].pov;

  DecodeConfig cfg;
  cfg.min_len = 2;
  cfg.max_len = 6;

  cfg.strategy = Strategy::nucleus;
  cfg.reranker = Reranker::pacer;
  CHECK_THROWS_WITH(decoder.decode(pov, cfg, &scorer),
                    doctest::Contains("beam search only"));
  cfg.strategy = Strategy::topk;
  cfg.reranker = Reranker::partial_only;
  CHECK_THROWS_WITH(decoder.decode(pov, cfg, &scorer),
                    doctest::Contains("beam search only"));

  cfg.strategy = Strategy::beam;
  cfg.reranker = Reranker::complete;
  CHECK_THROWS_WITH(decoder.decode(pov, cfg, nullptr),
                    doctest::Contains("re-ranking requires a classifier scorer"));
  cfg.reranker = Reranker::pacer;
  CHECK_THROWS_WITH(decoder.decode(pov, cfg, nullptr),
                    doctest::Contains("re-ranking requires a classifier scorer"));
  cfg.reranker = Reranker::fudge_oracle;
  CHECK_THROWS_WITH(decoder.decode(pov, cfg, nullptr),
                    doctest::Contains("fudge_oracle requires a classifier scorer"));
}

TEST_CASE("classifier-grounded decode needs its classifier attached") {
  auto f = make_fixture();
  ModelConfig mc = small_model_config(f);
  mc.expanded.mode = GroundingMode::classifier_attn_top;
  mc.expanded.k = 4;
  Seq2SeqModel<float> model(mc);
  RpaClassifier<float> clf(small_clf_config(f));
  Decoder decoder(model, f.vocab);
  const auto& pov = f.data[0].pov;

  DecodeConfig cfg;
  cfg.beam_size = 1;
  cfg.min_len = 2;
  cfg.max_len = 5;
  CHECK_THROWS_WITH(decoder.decode(pov, cfg),
                    doctest::Contains("requires set_grounding_classifier"));

  decoder.set_grounding_classifier(&clf);
  const auto res = decoder.decode(pov, cfg);
  REQUIRE(!res.hypotheses.empty());
  CHECK(res.selection.positions.size() == 4);
  CHECK(!res.selection.provenance.empty());
  const TokenSeq ctx = decoder.serialize_pov(pov);
  for (int p : res.selection.positions) {
    CHECK(p >= 0);
    CHECK(p < static_cast<int>(ctx.size()));
  }
}

TEST_CASE("retrieval responder ranks the bank and optionally re-scores the head") {
  auto f = make_fixture(5, 4, 53);
  RpaClassifier<float> ranker(small_clf_config(f));
  RpaClassifierConfig cc2 = small_clf_config(f);
  cc2.seed = 11;
  RpaClassifier<float> rpa(cc2);

  const auto& ex = f.data[4];
  const TokenSeq ctx = ex.ctx_tokens;

  std::vector<BankUtterance> bank;
  for (std::size_t i = 0; i < 6 && i < f.data.size(); ++i) {
    BankUtterance u;
    u.tokens = f.data[i].target;
    u.speaker_name = i % 2 == 0 ? ex.pov.partner_name : ex.pov.self_name;
    bank.push_back(u);
  }

  std::vector<TokenSeq> pool_tokens;
  for (const auto& u : bank) pool_tokens.push_back(u.tokens);
  const std::vector<double> probs = ranker.score_pool_tokens(ctx, pool_tokens);

  SUBCASE("plain retrieval picks the ranker argmax") {
    const auto res = retrieval_respond(ranker, rpa, f.vocab, bank, ex.pov, ctx, false, 5);
    int want = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
      if (probs[i] > probs[static_cast<std::size_t>(want)]) want = static_cast<int>(i);
    CHECK(res.bank_index == want);
    CHECK(res.ledger.final_calls == 0);
    CHECK(res.partner_said ==
          (bank[static_cast<std::size_t>(res.bank_index)].speaker_name == ex.pov.partner_name));
  }

  SUBCASE("re-scoring walks the top-k and keeps the best self-probability") {
    const int k = 3;
    const auto res = retrieval_respond(ranker, rpa, f.vocab, bank, ex.pov, ctx, true, k);
    CHECK(res.ledger.final_calls == k);

    std::vector<int> order(bank.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      if (probs[static_cast<std::size_t>(a)] != probs[static_cast<std::size_t>(b)])
        return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
      return a < b;
    });
    const std::vector<std::string> pair = {ex.pov.self_name, ex.pov.partner_name};
    int want = order[0];
    double best = -1.0;
    for (int i = 0; i < k; ++i) {
      TokenSeq q = ctx;
      q.push_back(Vocabulary::kSep);
      const TokenSeq& cand = bank[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])].tokens;
      q.insert(q.end(), cand.begin(), cand.end());
      const double p = rpa.score_candidates(q, pair, f.vocab).probs[0];
      if (p > best) {
        best = p;
        want = order[static_cast<std::size_t>(i)];
      }
    }
    CHECK(res.bank_index == want);
  }

  SUBCASE("a top-1 re-scoring window degenerates to plain retrieval") {
    const auto plain = retrieval_respond(ranker, rpa, f.vocab, bank, ex.pov, ctx, false, 5);
    const auto top1 = retrieval_respond(ranker, rpa, f.vocab, bank, ex.pov, ctx, true, 1);
    CHECK(top1.bank_index == plain.bank_index);
    CHECK(top1.ledger.final_calls == 0);
  }

  SUBCASE("single-utterance banks expose the partner flag both ways") {
    std::vector<BankUtterance> partner_bank = {{f.data[0].target, ex.pov.partner_name}};
    std::vector<BankUtterance> self_bank = {{f.data[0].target, ex.pov.self_name}};
    CHECK(retrieval_respond(ranker, rpa, f.vocab, partner_bank, ex.pov, ctx, false, 1)
              .partner_said);
    CHECK(!retrieval_respond(ranker, rpa, f.vocab, self_bank, ex.pov, ctx, false, 1)
               .partner_said);
  }

  SUBCASE("an empty bank is rejected") {
    CHECK_THROWS_WITH(retrieval_respond(ranker, rpa, f.vocab, {}, ex.pov, ctx, false, 1),
                      doctest::Contains("empty bank"));
  }
}
