#include "charkeeper/rpa.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace charkeeper {

using nlohmann::json;

namespace {

// All (window_start, window_len, target) triples for one dialogue and one
// choice of n_prior. Shared with the test-side enumeration oracle semantics.
struct Pair {
  int upto;   // history = the window_len utterances ending just before `upto`
  int len;    // window length
  int target; // candidate turn
};

std::vector<Pair> enumerate_pairs(int n_utts, int n_prior) {
  std::vector<Pair> out;
  if (n_prior == 0) {
    for (int t = 0; t < n_utts; ++t) out.push_back({0, 0, t});
    return out;
  }
  if (n_prior == kAllPrior) {
    // The two final turns (one per speaker under strict alternation).
    for (int t = n_utts - 2; t < n_utts; ++t) out.push_back({t, t, t});
    return out;
  }
  for (int i = 0; i + n_prior < n_utts; ++i)
    for (int t = i + n_prior; t < n_utts; ++t) out.push_back({i + n_prior, n_prior, t});
  return out;
}

}  // namespace

std::vector<RpaExample> build_rpa_dataset(const std::vector<Dialogue>& corpus,
                                          const Vocabulary& vocab, int n_prior,
                                          const RpaDatasetOptions& opts) {
  std::set<std::string> name_set;
  for (const auto& d : corpus) {
    name_set.insert(d.characters[0].name);
    name_set.insert(d.characters[1].name);
  }
  const std::vector<std::string> catalog(name_set.begin(), name_set.end());

  Rng rng(opts.seed);
  std::vector<RpaExample> out;
  for (std::size_t di = 0; di < corpus.size(); ++di) {
    const Dialogue& d = corpus[di];
    const int n_utts = static_cast<int>(d.utterances.size());
    if (n_prior != kAllPrior && n_prior > n_utts - 1) {
      std::fprintf(stderr, "build_rpa_dataset: skipping dialogue %zu (n_prior %d > %d turns - 1)\n",
                   di, n_prior, n_utts);
      continue;
    }
    for (int pov = 0; pov < 2; ++pov) {
      for (const Pair& pr : enumerate_pairs(n_utts, n_prior)) {
        PovContext pc = flatten_context(d, pov, pr.upto, pr.len == pr.upto ? kAllPrior : pr.len);
        RpaExample ex;
        ex.context_tokens = serialize_context(pc, vocab, all_fields());
        ex.context_tokens.push_back(Vocabulary::kSep);
        const TokenSeq cand = vocab.encode_words(d.utterances[static_cast<std::size_t>(pr.target)].text);
        ex.context_tokens.insert(ex.context_tokens.end(), cand.begin(), cand.end());
        ex.label = d.characters[d.utterances[static_cast<std::size_t>(pr.target)].speaker].name;
        ex.pool.push_back(d.characters[pov].name);      // self
        ex.pool.push_back(d.characters[1 - pov].name);  // partner
        std::vector<std::string> negatives;
        for (const auto& name : catalog)
          if (name != ex.pool[0] && name != ex.pool[1]) negatives.push_back(name);
        rng.shuffle(negatives);
        for (const auto& name : negatives) {
          if (static_cast<int>(ex.pool.size()) >= opts.pool_size) break;
          ex.pool.push_back(name);
        }
        ex.dialogue_index = static_cast<int>(di);
        ex.turn_index = pr.target;
        out.push_back(std::move(ex));
      }
    }
  }
  return out;
}

int candidate_start(const TokenSeq& context_tokens) {
  for (int i = static_cast<int>(context_tokens.size()) - 1; i >= 0; --i)
    if (context_tokens[static_cast<std::size_t>(i)] == Vocabulary::kSep) return i + 1;
  throw std::runtime_error("candidate_start: no separator in context");
}

std::vector<RpaExample> build_ltr_dataset(const std::vector<RpaExample>& full) {
  std::vector<RpaExample> out;
  for (const auto& ex : full) {
    if (ex.is_partial) throw std::runtime_error("build_ltr_dataset: input already partial");
    const int cs = candidate_start(ex.context_tokens);
    const int w = static_cast<int>(ex.context_tokens.size()) - cs;
    for (int p = 1; p <= w; ++p) {
      RpaExample pe = ex;
      pe.context_tokens.assign(ex.context_tokens.begin(), ex.context_tokens.begin() + cs + p);
      pe.is_partial = true;
      pe.prefix_len = p;
      out.push_back(std::move(pe));
    }
  }
  return out;
}

std::string rpa_examples_to_jsonl(const std::vector<RpaExample>& examples) {
  std::ostringstream out;
  for (const auto& ex : examples) {
    json j = {{"context", ex.context_tokens},
              {"label", ex.label},
              {"pool", ex.pool},
              {"is_partial", ex.is_partial},
              {"prefix_len", ex.prefix_len}};
    out << j.dump() << "\n";
  }
  return out.str();
}

std::vector<RpaExample> rpa_examples_from_jsonl(const std::string& text) {
  std::vector<RpaExample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("rpa dataset parse error at line " + std::to_string(lineno) +
                               ": " + e.what());
    }
    RpaExample ex;
    ex.context_tokens = j.at("context").get<TokenSeq>();
    ex.label = j.at("label").get<std::string>();
    ex.pool = j.at("pool").get<std::vector<std::string>>();
    ex.is_partial = j.at("is_partial").get<bool>();
    ex.prefix_len = j.at("prefix_len").get<int>();
    out.push_back(std::move(ex));
  }
  return out;
}

json rpa_config_to_json(const RpaClassifierConfig& cfg) {
  return json{{"d_model", cfg.d_model},       {"n_heads", cfg.n_heads},
              {"n_ctx_layers", cfg.n_ctx_layers}, {"n_cand_layers", cfg.n_cand_layers},
              {"d_ffn", cfg.d_ffn},           {"m_codes", cfg.m_codes},
              {"vocab_size", cfg.vocab_size}, {"max_ctx_tokens", cfg.max_ctx_tokens},
              {"seed", cfg.seed}};
}

RpaClassifierConfig rpa_config_from_json(const json& j) {
  RpaClassifierConfig cfg;
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.n_ctx_layers = j.at("n_ctx_layers").get<int>();
  cfg.n_cand_layers = j.at("n_cand_layers").get<int>();
  cfg.d_ffn = j.at("d_ffn").get<int>();
  cfg.m_codes = j.at("m_codes").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.max_ctx_tokens = j.at("max_ctx_tokens").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

}  // namespace charkeeper
