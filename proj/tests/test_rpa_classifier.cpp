#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "charkeeper/rpa.hpp"

using namespace charkeeper;

namespace {

std::vector<Dialogue> tiny_corpus(int n_dialogues, int turns, std::uint64_t seed) {
  CorpusSpec spec;
  spec.n_roles = 6;
  spec.role_lexicon_size = 4;
  spec.n_dialogues = n_dialogues;
  spec.turns_per_dialogue = turns;
  spec.seed = seed;
  return generate_synthetic_corpus(spec);
}

Vocabulary corpus_vocab(const std::vector<Dialogue>& corpus) {
  return build_vocab(corpus, 1);
}

// Independent enumeration of the expected (pov, history window, target)
// records, constructing contexts through PovContext by hand.
struct ExpectedRecord {
  TokenSeq context;
  std::string label;
  std::string self_name;
  std::string partner_name;
  int dialogue_index = 0;
  int turn_index = 0;
};

ExpectedRecord expected_record(const Dialogue& d, int di, int pov, int hist_begin, int hist_end,
                               int target, const Vocabulary& vocab) {
  PovContext pc;
  pc.self_name = d.characters[pov].name;
  pc.self_persona = d.characters[pov].persona;
  pc.partner_name = d.characters[1 - pov].name;
  pc.setting_name = d.setting_name;
  pc.setting_desc = d.setting_desc;
  for (int t = hist_begin; t < hist_end; ++t)
    pc.history.push_back(d.utterances[static_cast<std::size_t>(t)]);
  ExpectedRecord rec;
  rec.context = serialize_context(pc, vocab, all_fields());
  rec.context.push_back(Vocabulary::kSep);
  TokenSeq cand = vocab.encode_words(d.utterances[static_cast<std::size_t>(target)].text);
  rec.context.insert(rec.context.end(), cand.begin(), cand.end());
  rec.label = d.characters[d.utterances[static_cast<std::size_t>(target)].speaker].name;
  rec.self_name = pc.self_name;
  rec.partner_name = pc.partner_name;
  rec.dialogue_index = di;
  rec.turn_index = target;
  return rec;
}

std::vector<ExpectedRecord> expected_records(const std::vector<Dialogue>& corpus,
                                             const Vocabulary& vocab, int n_prior) {
  std::vector<ExpectedRecord> out;
  for (std::size_t di = 0; di < corpus.size(); ++di) {
    const Dialogue& d = corpus[di];
    const int n = static_cast<int>(d.utterances.size());
    for (int pov = 0; pov < 2; ++pov) {
      if (n_prior == 0) {
        for (int t = 0; t < n; ++t)
          out.push_back(expected_record(d, static_cast<int>(di), pov, 0, 0, t, vocab));
      } else if (n_prior == kAllPrior) {
        for (int t = n - 2; t < n; ++t)
          out.push_back(expected_record(d, static_cast<int>(di), pov, 0, t, t, vocab));
      } else {
        for (int i = 0; i + n_prior < n; ++i)
          for (int t = i + n_prior; t < n; ++t)
            out.push_back(
                expected_record(d, static_cast<int>(di), pov, i, i + n_prior, t, vocab));
      }
    }
  }
  return out;
}

RpaClassifierConfig tiny_clf_config(int vocab_size) {
  RpaClassifierConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_ctx_layers = 1;
  cfg.n_cand_layers = 1;
  cfg.d_ffn = 32;
  cfg.m_codes = 3;
  cfg.vocab_size = vocab_size;
  cfg.max_ctx_tokens = 48;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("dataset builder matches the enumeration oracle for every window policy") {
  auto corpus = tiny_corpus(6, 6, 31);
  auto vocab = corpus_vocab(corpus);
  RpaDatasetOptions opts;
  opts.pool_size = 5;
  opts.seed = 9;

  for (int n_prior : {0, 2, kAllPrior}) {
    CAPTURE(n_prior);
    auto built = build_rpa_dataset(corpus, vocab, n_prior, opts);
    auto expect = expected_records(corpus, vocab, n_prior);
    REQUIRE(built.size() == expect.size());
    for (std::size_t i = 0; i < built.size(); ++i) {
      CHECK(built[i].context_tokens == expect[i].context);
      CHECK(built[i].label == expect[i].label);
      REQUIRE(built[i].pool.size() >= 2);
      CHECK(built[i].pool[0] == expect[i].self_name);
      CHECK(built[i].pool[1] == expect[i].partner_name);
      CHECK(built[i].dialogue_index == expect[i].dialogue_index);
      CHECK(built[i].turn_index == expect[i].turn_index);
      CHECK_FALSE(built[i].is_partial);
      CHECK(built[i].prefix_len == 0);
    }
  }
}

TEST_CASE("empty-history policy yields two examples per utterance") {
  auto corpus = tiny_corpus(4, 7, 12);
  auto vocab = corpus_vocab(corpus);
  auto built = build_rpa_dataset(corpus, vocab, 0, {});
  std::size_t total_utts = 0;
  for (const auto& d : corpus) total_utts += d.utterances.size();
  CHECK(built.size() == 2 * total_utts);
}

TEST_CASE("negative pools are distinct catalog names behind the participants") {
  auto corpus = tiny_corpus(8, 4, 77);
  auto vocab = corpus_vocab(corpus);
  std::set<std::string> catalog;
  for (const auto& d : corpus) {
    catalog.insert(d.characters[0].name);
    catalog.insert(d.characters[1].name);
  }
  RpaDatasetOptions opts;
  opts.pool_size = 5;
  auto built = build_rpa_dataset(corpus, vocab, kAllPrior, opts);
  REQUIRE_FALSE(built.empty());
  for (const auto& ex : built) {
    CHECK(ex.pool.size() <= 5);
    std::set<std::string> uniq(ex.pool.begin(), ex.pool.end());
    CHECK(uniq.size() == ex.pool.size());
    for (const auto& name : ex.pool) CHECK(catalog.count(name) == 1);
    CHECK((ex.label == ex.pool[0] || ex.label == ex.pool[1]));
  }
  // A large budget caps the pool at the catalog size.
  opts.pool_size = 1000;
  auto wide = build_rpa_dataset(corpus, vocab, kAllPrior, opts);
  for (const auto& ex : wide) CHECK(ex.pool.size() == catalog.size());
}

TEST_CASE("candidate start is the slot after the last separator") {
  CHECK(candidate_start({5, 10, Vocabulary::kSep, 11, 12}) == 3);
  CHECK(candidate_start({Vocabulary::kSep, 10, Vocabulary::kSep, 11}) == 3);
  CHECK(candidate_start({10, Vocabulary::kSep}) == 2);
  CHECK_THROWS_AS(candidate_start({10, 11, 12}), std::runtime_error);
}

TEST_CASE("prefix expansion emits one example per candidate prefix length") {
  auto corpus = tiny_corpus(3, 4, 55);
  auto vocab = corpus_vocab(corpus);
  auto full = build_rpa_dataset(corpus, vocab, kAllPrior, {});
  auto ltr = build_ltr_dataset(full);

  std::size_t expected_total = 0;
  for (const auto& ex : full)
    expected_total +=
        ex.context_tokens.size() - static_cast<std::size_t>(candidate_start(ex.context_tokens));
  CHECK(ltr.size() == expected_total);

  std::size_t cursor = 0;
  for (const auto& ex : full) {
    const int cs = candidate_start(ex.context_tokens);
    const int w = static_cast<int>(ex.context_tokens.size()) - cs;
    for (int p = 1; p <= w; ++p, ++cursor) {
      const RpaExample& pe = ltr[cursor];
      CHECK(pe.is_partial);
      CHECK(pe.prefix_len == p);
      CHECK(pe.label == ex.label);
      CHECK(pe.pool == ex.pool);
      REQUIRE(pe.context_tokens.size() == static_cast<std::size_t>(cs + p));
      CHECK(std::equal(pe.context_tokens.begin(), pe.context_tokens.end(),
                       ex.context_tokens.begin()));
    }
  }

  CHECK_THROWS_AS(build_ltr_dataset(ltr), std::runtime_error);
}

TEST_CASE("classifier dataset jsonl keeps exactly the five persisted fields") {
  auto corpus = tiny_corpus(2, 4, 3);
  auto vocab = corpus_vocab(corpus);
  auto full = build_rpa_dataset(corpus, vocab, 0, {});
  auto ltr = build_ltr_dataset(full);

  const std::string text = rpa_examples_to_jsonl(ltr);
  auto back = rpa_examples_from_jsonl(text);
  REQUIRE(back.size() == ltr.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].context_tokens == ltr[i].context_tokens);
    CHECK(back[i].label == ltr[i].label);
    CHECK(back[i].pool == ltr[i].pool);
    CHECK(back[i].is_partial == ltr[i].is_partial);
    CHECK(back[i].prefix_len == ltr[i].prefix_len);
  }

  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.size() == 5);
    CHECK(j.contains("context"));
    CHECK(j.contains("label"));
    CHECK(j.contains("pool"));
    CHECK(j.contains("is_partial"));
    CHECK(j.contains("prefix_len"));
  }

  CHECK_THROWS_WITH(rpa_examples_from_jsonl("{\"context\": [1,2"),
                    doctest::Contains("line 1"));
}

TEST_CASE("classifier parameter count matches the closed-form formula") {
  auto cfg = tiny_clf_config(40);
  RpaClassifier<float> clf(cfg);
  const long long d = cfg.d_model, f = cfg.d_ffn, v = cfg.vocab_size;
  const long long mha = 4 * (d * d + d);
  const long long ffn = (d * f + f) + (f * d + d);
  const long long layer = 2 * (2 * d) + mha + ffn;
  long long total = v * d;
  total += cfg.n_ctx_layers * layer + 2 * d;
  total += cfg.n_cand_layers * layer + 2 * d;
  total += cfg.m_codes * d;
  CHECK(static_cast<long long>(clf.params.total_params()) == total);

  // The code count changes parameters by exactly d per code.
  auto cfg2 = cfg;
  cfg2.m_codes = cfg.m_codes + 2;
  RpaClassifier<float> clf2(cfg2);
  CHECK(clf2.params.total_params() == clf.params.total_params() + 2 * static_cast<std::size_t>(d));
}

TEST_CASE("classifier config json round trip and validation") {
  auto cfg = tiny_clf_config(77);
  cfg.max_ctx_tokens = 99;
  cfg.seed = 321;
  auto back = rpa_config_from_json(rpa_config_to_json(cfg));
  CHECK(back.d_model == cfg.d_model);
  CHECK(back.n_heads == cfg.n_heads);
  CHECK(back.n_ctx_layers == cfg.n_ctx_layers);
  CHECK(back.n_cand_layers == cfg.n_cand_layers);
  CHECK(back.d_ffn == cfg.d_ffn);
  CHECK(back.m_codes == cfg.m_codes);
  CHECK(back.vocab_size == cfg.vocab_size);
  CHECK(back.max_ctx_tokens == cfg.max_ctx_tokens);
  CHECK(back.seed == cfg.seed);

  auto bad = cfg;
  bad.m_codes = 0;
  CHECK_THROWS_AS(RpaClassifier<float>{bad}, std::runtime_error);
  bad = cfg;
  bad.n_heads = 3;
  CHECK_THROWS_AS(RpaClassifier<float>{bad}, std::runtime_error);
  bad = cfg;
  bad.vocab_size = 2;
  CHECK_THROWS_AS(RpaClassifier<float>{bad}, std::runtime_error);
}

TEST_CASE("code attention weights are a distribution over context tokens") {
  auto cfg = tiny_clf_config(40);
  RpaClassifier<double> clf(cfg);
  NoGradGuard ng;
  TokenSeq ctx = {10, 11, 12, 13, 14, 15, 16};
  auto code = clf.code_attend(clf.context_states(ctx));
  REQUIRE(code.weights->value.rows() == cfg.m_codes);
  REQUIRE(code.weights->value.cols() == static_cast<int>(ctx.size()));
  for (int i = 0; i < cfg.m_codes; ++i) {
    double row = 0;
    for (int j = 0; j < code.weights->value.cols(); ++j) {
      CHECK(code.weights->value.at(i, j) >= 0);
      row += code.weights->value.at(i, j);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }

  auto exported = clf.attention_export(ctx);
  REQUIRE(exported.size() == ctx.size());
  double total = 0;
  for (std::size_t j = 0; j < exported.size(); ++j) {
    double mean = 0;
    for (int i = 0; i < cfg.m_codes; ++i)
      mean += code.weights->value.at(i, static_cast<int>(j)) / cfg.m_codes;
    CHECK(exported[j] == doctest::Approx(mean).epsilon(1e-12));
    total += exported[j];
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("attention export is permutation-covariant with the context") {
  auto cfg = tiny_clf_config(40);
  RpaClassifier<double> clf(cfg);
  NoGradGuard ng;
  TokenSeq ctx = {10, 11, 12, 13, 14, 15};
  std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  TokenSeq shuffled;
  for (std::size_t p : perm) shuffled.push_back(ctx[p]);

  auto base = clf.attention_export(ctx);
  auto moved = clf.attention_export(shuffled);
  REQUIRE(moved.size() == base.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    CHECK(moved[i] == doctest::Approx(base[perm[i]]).epsilon(1e-9));

  // Scores over a candidate pool are order-blind too.
  std::vector<TokenSeq> pool = {{10}, {12}, {15}};
  auto pa = clf.score_pool_tokens(ctx, pool);
  auto pb = clf.score_pool_tokens(shuffled, pool);
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(pa[i] == doctest::Approx(pb[i]).epsilon(1e-9));
}

TEST_CASE("scored pools are normalized and flag truncation") {
  auto corpus = tiny_corpus(3, 4, 8);
  auto vocab = corpus_vocab(corpus);
  auto cfg = tiny_clf_config(vocab.size());
  cfg.max_ctx_tokens = 12;
  RpaClassifier<double> clf(cfg);

  auto data = build_rpa_dataset(corpus, vocab, kAllPrior, {});
  REQUIRE_FALSE(data.empty());
  const auto& ex = data.front();
  REQUIRE(ex.context_tokens.size() > 12);  // forces the truncation path
  auto scored = clf.score_candidates(ex.context_tokens, ex.pool, vocab);
  CHECK(scored.truncated);
  CHECK(scored.attention_export.size() == 12);
  REQUIRE(scored.probs.size() == ex.pool.size());
  double z = 0;
  for (double p : scored.probs) {
    CHECK(p >= 0);
    z += p;
  }
  CHECK(z == doctest::Approx(1.0).epsilon(1e-12));

  TokenSeq small = {10, 11};
  auto fine = clf.score_candidates(small, ex.pool, vocab);
  CHECK_FALSE(fine.truncated);
  CHECK(fine.attention_export.size() == 2);

  CHECK_THROWS_AS(clf.score_candidates({}, ex.pool, vocab), std::runtime_error);
  CHECK_THROWS_AS(clf.pool_logits(small, {}), std::runtime_error);
  CHECK_THROWS_AS(clf.encode_candidate({}), std::runtime_error);
}

TEST_CASE("ranking ties count as misses and pool modes pick different pools") {
  auto corpus = tiny_corpus(3, 4, 21);
  auto vocab = corpus_vocab(corpus);
  auto cfg = tiny_clf_config(vocab.size());
  RpaClassifier<double> clf(cfg);
  auto data = build_rpa_dataset(corpus, vocab, kAllPrior, {});
  REQUIRE_FALSE(data.empty());

  // Duplicate the label in the pool: identical names score identically, so
  // the top rank is shared and the example cannot count as a hit.
  RpaExample tied = data.front();
  tied.pool = {tied.label, tied.label};
  auto res = hits_at_k(clf, {tied}, PoolMode::participants, vocab);
  CHECK(res.n_examples == 1);
  CHECK(res.accuracy == 0.0);

  auto part = hits_at_k(clf, data, PoolMode::participants, vocab);
  CHECK(part.n_examples == static_cast<int>(data.size()));
  CHECK(part.accuracy >= 0.0);
  CHECK(part.accuracy <= 1.0);

  auto catalog = hits_at_k(clf, data, PoolMode::full_catalog, vocab);
  CHECK(catalog.n_examples == part.n_examples);

  CHECK_THROWS_AS(hits_at_k(clf, {}, PoolMode::participants, vocab), std::runtime_error);
  RpaExample lonely = data.front();
  lonely.pool = {lonely.label};
  CHECK_THROWS_AS(hits_at_k(clf, {lonely}, PoolMode::participants, vocab), std::runtime_error);
}
