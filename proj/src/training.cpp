#include "charkeeper/training.hpp"

#include <chrono>
#include <fstream>
#include <numeric>
#include <sstream>

#include "charkeeper/decoding.hpp"

namespace charkeeper {

std::string ul_mode_name(UlMode m) {
  switch (m) {
    case UlMode::top1: return "top1";
    case UlMode::all: return "all";
    case UlMode::random3: return "random3";
  }
  throw std::runtime_error("unknown ul mode");
}

UlMode ul_mode_from_name(const std::string& s) {
  if (s == "top1") return UlMode::top1;
  if (s == "all") return UlMode::all;
  if (s == "random3") return UlMode::random3;
  throw std::runtime_error("unknown ul mode: " + s);
}

std::vector<GenExample> build_generation_dataset(const std::vector<Dialogue>& corpus,
                                                 const Vocabulary& vocab, int max_ctx_tokens) {
  std::vector<GenExample> out;
  for (std::size_t di = 0; di < corpus.size(); ++di) {
    const Dialogue& d = corpus[di];
    for (std::size_t t = 0; t < d.utterances.size(); ++t) {
      const Utterance& u = d.utterances[t];
      GenExample ex;
      ex.pov = flatten_context(d, u.speaker, static_cast<int>(t), kAllPrior);
      ex.ctx_tokens = truncate_left(serialize_context(ex.pov, vocab, all_fields()),
                                    max_ctx_tokens);
      ex.target = vocab.encode_words(u.text);
      ex.target.push_back(Vocabulary::kEos);
      ex.dialogue_index = static_cast<int>(di);
      ex.turn_index = static_cast<int>(t);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

void write_train_log(const std::string& path, const std::vector<StepLog>& logs) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write train log: " + path);
  f << "step,nll,ul,mo_ce,wall_ms\n";
  for (const auto& l : logs)
    f << l.step << ',' << l.nll << ',' << l.ul << ',' << l.mo_ce << ',' << l.wall_ms << '\n';
}

namespace {

double elapsed_ms(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
      .count();
}

// Epoch-shuffled index stream; reshuffles whenever an epoch is exhausted.
class IndexStream {
 public:
  IndexStream(std::size_t n, Rng& rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(order_);
  }
  std::size_t next() {
    if (pos_ == order_.size()) {
      rng_.shuffle(order_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  Rng& rng_;
  std::size_t pos_ = 0;
};

int live_tokens(const TokenSeq& target) {
  int live = 0;
  for (TokenId t : target)
    if (t != Vocabulary::kPad) ++live;
  return live;
}

// Token-weighted batch NLL: sum_i mean_nll_i * live_i / sum_i live_i. Kept in
// one place so the stage-2 lambda=0 trajectory reproduces plain NLL training
// operation for operation.
VarPtr<float> batch_nll(const Seq2SeqModel<float>& model, const Vocabulary& vocab,
                        const std::vector<const GenExample*>& batch,
                        const RpaClassifier<float>* ground_clf) {
  VarPtr<float> acc;
  double total_live = 0.0;
  for (const GenExample* ex : batch) {
    auto enc = model.encode_context(ex->ctx_tokens);
    auto extra = grounding_extra(model, vocab, *ex, enc, ground_clf);
    const int live = live_tokens(ex->target);
    auto term = scale(nll_loss(model, enc, extra ? &*extra : nullptr, ex->target),
                      static_cast<float>(live));
    acc = acc ? add(acc, term) : term;
    total_live += live;
  }
  if (!acc) throw std::runtime_error("batch_nll: empty batch");
  return scale(acc, static_cast<float>(1.0 / total_live));
}

}  // namespace

std::vector<StepLog> train_generator(Seq2SeqModel<float>& model, const Vocabulary& vocab,
                                     const std::vector<GenExample>& data, const TrainConfig& cfg,
                                     const RpaClassifier<float>* ul_clf,
                                     const RpaClassifier<float>* ground_clf) {
  cfg.validate();
  if (data.empty()) throw std::runtime_error("train_generator: empty dataset");
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  AdamW<float> opt(model.params, ocfg);
  Rng rng(cfg.seed);
  IndexStream stream(data.size(), rng);
  Decoder decoder(model, vocab);
  if (ground_clf) decoder.set_grounding_classifier(ground_clf);

  std::vector<StepLog> logs;
  const auto t0 = std::chrono::steady_clock::now();
  for (int step = 1; step <= cfg.max_steps; ++step) {
    model.params.zero_grad();
    std::vector<const GenExample*> batch;
    for (int i = 0; i < cfg.batch_size; ++i) batch.push_back(&data[stream.next()]);
    auto loss = batch_nll(model, vocab, batch, ground_clf);
    StepLog log;
    log.step = step;
    log.nll = static_cast<double>(loss->value.at(0, 0));

    if (ul_clf && cfg.ul_probability > 0.0 && rng.next_double() < cfg.ul_probability) {
      const GenExample& ex = *batch[rng.next_index(batch.size())];
      DecodeConfig gcfg;
      gcfg.strategy = Strategy::beam;
      gcfg.beam_size = 1;
      gcfg.min_len = 1;
      gcfg.max_len = model.cfg.max_target_len - 1;
      gcfg.reranker = Reranker::none;
      gcfg.seed = rng.next_u64();
      auto res = decoder.decode(ex.pov, gcfg, nullptr);
      const TokenSeq& gen = res.hypotheses.front().tokens;
      UlFlagSet flags = ul_flag_tokens(*ul_clf, vocab, ex.pov, ex.ctx_tokens, gen, cfg.ul_mode,
                                       rng);
      if (!flags.gated_out && !flags.positions.empty()) {
        auto enc = model.encode_context(ex.ctx_tokens);
        auto extra = grounding_extra(model, vocab, ex, enc, ground_clf);
        auto ul = ul_loss(model, enc, extra ? &*extra : nullptr, gen, flags.positions);
        log.ul = static_cast<double>(ul->value.at(0, 0));
        loss = add(loss, scale(ul, static_cast<float>(cfg.ul_weight)));
      }
    }

    backward(loss);
    opt.step();
    log.wall_ms = elapsed_ms(t0);
    logs.push_back(log);
  }
  if (!cfg.log_path.empty()) write_train_log(cfg.log_path, logs);
  return logs;
}

std::vector<StepLog> train_mo(Seq2SeqModel<float>& model, const Vocabulary& vocab,
                              const std::vector<GenExample>& data,
                              const std::vector<std::string>& character_pool,
                              const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw std::runtime_error("train_mo: empty dataset");
  if (cfg.mo_stage != 1 && cfg.mo_stage != 2)
    throw std::runtime_error("train_mo: stage must be 1 or 2");
  const bool use_mo = cfg.mo_stage == 1 || cfg.mo_loss_weight > 0.0;
  if (use_mo && model.cfg.n_mo == 0)
    throw std::runtime_error("train_mo: model has no multi-objective layers");
  if (use_mo && character_pool.empty())
    throw std::runtime_error("train_mo: empty character pool");

  std::vector<TokenSeq> pool_tokens;
  for (const auto& name : character_pool) pool_tokens.push_back(vocab.encode_words(name));
  auto label_of = [&](const GenExample& ex) {
    for (std::size_t i = 0; i < character_pool.size(); ++i)
      if (character_pool[i] == ex.pov.self_name) return static_cast<int>(i);
    throw std::runtime_error("train_mo: speaker missing from character pool: " +
                             ex.pov.self_name);
  };

  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  AdamW<float> opt(model.params, ocfg);
  if (cfg.mo_stage == 1)
    opt.set_trainable([](const std::string& name) { return name.rfind("mo.", 0) == 0; });

  Rng rng(cfg.seed);
  IndexStream stream(data.size(), rng);
  std::vector<StepLog> logs;
  const auto t0 = std::chrono::steady_clock::now();
  for (int step = 1; step <= cfg.max_steps; ++step) {
    model.params.zero_grad();
    std::vector<const GenExample*> batch;
    for (int i = 0; i < cfg.batch_size; ++i) batch.push_back(&data[stream.next()]);
    StepLog log;
    log.step = step;
    VarPtr<float> loss;
    if (cfg.mo_stage == 2) {
      loss = batch_nll(model, vocab, batch, nullptr);
      log.nll = static_cast<double>(loss->value.at(0, 0));
    }
    if (use_mo) {
      VarPtr<float> ce_acc;
      for (const GenExample* ex : batch) {
        auto enc = model.encode_context(ex->ctx_tokens);
        auto extra = grounding_extra(model, vocab, *ex, enc, static_cast<const RpaClassifier<float>*>(nullptr));
        TokenSeq dec_input;
        dec_input.push_back(Vocabulary::kBos);
        dec_input.insert(dec_input.end(), ex->target.begin(), ex->target.end() - 1);
        auto dec_states = model.decode_states(enc, extra ? &*extra : nullptr, dec_input);
        auto scores = model.mo_scores(enc, dec_states, pool_tokens);
        auto ce = score_ce(scores, label_of(*ex));
        ce_acc = ce_acc ? add(ce_acc, ce) : ce;
      }
      auto ce_mean = scale(ce_acc, static_cast<float>(1.0 / batch.size()));
      log.mo_ce = static_cast<double>(ce_mean->value.at(0, 0));
      if (cfg.mo_stage == 1)
        loss = ce_mean;
      else
        loss = add(loss, scale(ce_mean, static_cast<float>(cfg.mo_loss_weight)));
    }
    backward(loss);
    opt.step();
    log.wall_ms = elapsed_ms(t0);
    logs.push_back(log);
  }
  if (!cfg.log_path.empty()) write_train_log(cfg.log_path, logs);
  return logs;
}

std::vector<StepLog> train_ranker(RpaClassifier<float>& clf, const std::vector<RankItem>& items,
                                  const TrainConfig& cfg) {
  cfg.validate();
  if (items.empty()) throw std::runtime_error("train_ranker: no items");
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  AdamW<float> opt(clf.params, ocfg);
  Rng rng(cfg.seed);
  IndexStream stream(items.size(), rng);
  std::vector<StepLog> logs;
  const auto t0 = std::chrono::steady_clock::now();
  for (int step = 1; step <= cfg.max_steps; ++step) {
    clf.params.zero_grad();
    VarPtr<float> acc;
    for (int i = 0; i < cfg.batch_size; ++i) {
      const RankItem& item = items[stream.next()];
      auto ce = score_ce(clf.pool_logits(item.ctx, item.pool_tokens), item.label);
      acc = acc ? add(acc, ce) : ce;
    }
    auto loss = scale(acc, static_cast<float>(1.0 / cfg.batch_size));
    StepLog log;
    log.step = step;
    log.nll = static_cast<double>(loss->value.at(0, 0));
    backward(loss);
    opt.step();
    log.wall_ms = elapsed_ms(t0);
    logs.push_back(log);
  }
  if (!cfg.log_path.empty()) write_train_log(cfg.log_path, logs);
  return logs;
}

std::vector<RankItem> rank_items_from_examples(const std::vector<RpaExample>& examples,
                                               const Vocabulary& vocab, int max_ctx_tokens) {
  std::vector<RankItem> out;
  for (const auto& ex : examples) {
    RankItem item;
    item.ctx = truncate_left(ex.context_tokens, max_ctx_tokens);
    for (const auto& name : ex.pool) item.pool_tokens.push_back(vocab.encode_words(name));
    int label = -1;
    for (std::size_t i = 0; i < ex.pool.size(); ++i)
      if (ex.pool[i] == ex.label) {
        label = static_cast<int>(i);
        break;
      }
    if (label < 0) throw std::runtime_error("rank item: label missing from pool");
    item.label = label;
    out.push_back(std::move(item));
  }
  return out;
}

double mo_hits_at_1(const Seq2SeqModel<float>& model, const Vocabulary& vocab,
                    const std::vector<GenExample>& data,
                    const std::vector<std::string>& character_pool) {
  if (data.empty()) throw std::runtime_error("mo_hits_at_1: no data");
  NoGradGuard ng;
  std::vector<TokenSeq> pool_tokens;
  for (const auto& name : character_pool) pool_tokens.push_back(vocab.encode_words(name));
  int hits = 0;
  for (const auto& ex : data) {
    auto enc = model.encode_context(ex.ctx_tokens);
    auto extra = grounding_extra(model, vocab, ex, enc, static_cast<const RpaClassifier<float>*>(nullptr));
    TokenSeq dec_input;
    dec_input.push_back(Vocabulary::kBos);
    dec_input.insert(dec_input.end(), ex.target.begin(), ex.target.end() - 1);
    auto dec_states = model.decode_states(enc, extra ? &*extra : nullptr, dec_input);
    auto scores = model.mo_scores(enc, dec_states, pool_tokens);
    int best = 0;
    for (int i = 1; i < static_cast<int>(character_pool.size()); ++i)
      if (scores->value.at(0, i) > scores->value.at(0, best)) best = i;
    int label = -1;
    for (std::size_t i = 0; i < character_pool.size(); ++i)
      if (character_pool[i] == ex.pov.self_name) label = static_cast<int>(i);
    if (label < 0) throw std::runtime_error("mo_hits_at_1: speaker missing from pool");
    if (best == label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace charkeeper
