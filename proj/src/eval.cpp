#include "charkeeper/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace charkeeper {

namespace {

std::string fmt(double v, int prec = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

TokenSeq strip_tail(const TokenSeq& seq) {
  TokenSeq out = seq;
  while (!out.empty() && (out.back() == Vocabulary::kEos || out.back() == Vocabulary::kPad))
    out.pop_back();
  return out;
}

}  // namespace

std::vector<GenOutput> decode_outputs(const Seq2SeqModel<float>& model, const Vocabulary& vocab,
                                      const std::vector<Dialogue>& dialogues,
                                      const DecodeConfig& cfg, const SelfScorer* scorer,
                                      const RpaClassifier<float>* ground_clf) {
  Decoder decoder(model, vocab);
  if (ground_clf) decoder.set_grounding_classifier(ground_clf);
  std::vector<GenOutput> out;
  for (std::size_t di = 0; di < dialogues.size(); ++di) {
    const Dialogue& d = dialogues[di];
    for (std::size_t t = 0; t < d.utterances.size(); ++t) {
      GenOutput g;
      g.dialogue_index = static_cast<int>(di);
      g.turn_index = static_cast<int>(t);
      g.pov = flatten_context(d, d.utterances[t].speaker, static_cast<int>(t), kAllPrior);
      g.ctx_tokens = decoder.serialize_pov(g.pov);
      DecodeConfig per = cfg;
      per.seed = cfg.seed + di * 1009 + t;  // distinct stream per context
      auto res = decoder.decode(g.pov, per, scorer);
      g.response = strip_tail(res.hypotheses.front().tokens);
      g.ledger = res.ledger;
      out.push_back(std::move(g));
    }
  }
  return out;
}

std::vector<GenOutput> gold_outputs(const std::vector<Dialogue>& dialogues,
                                    const Vocabulary& vocab, int max_ctx_tokens) {
  std::vector<GenOutput> out;
  for (const auto& ex : build_generation_dataset(dialogues, vocab, max_ctx_tokens)) {
    GenOutput g;
    g.dialogue_index = ex.dialogue_index;
    g.turn_index = ex.turn_index;
    g.pov = ex.pov;
    g.ctx_tokens = ex.ctx_tokens;
    g.response = strip_tail(ex.target);
    out.push_back(std::move(g));
  }
  return out;
}

RpaReport rpa_metric(const std::vector<GenOutput>& outputs, const RpaClassifier<float>& clf,
                     const Vocabulary& vocab, std::uint64_t clf_vocab_hash,
                     const std::vector<std::string>* catalog) {
  if (outputs.empty()) throw std::runtime_error("rpa_metric: no outputs");
  if (clf_vocab_hash != 0 && clf_vocab_hash != vocab.hash())
    throw std::runtime_error("rpa_metric: classifier/vocabulary hash mismatch");
  RpaReport rep;
  int max_turn = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const GenOutput& g = outputs[i];
    std::vector<std::string> pool;
    int self_idx = 0;
    if (catalog) {
      pool = *catalog;
      auto it = std::find(pool.begin(), pool.end(), g.pov.self_name);
      if (it == pool.end())
        throw std::runtime_error("rpa_metric: speaker missing from catalog: " + g.pov.self_name);
      self_idx = static_cast<int>(it - pool.begin());
    } else {
      pool = {g.pov.self_name, g.pov.partner_name};
    }
    TokenSeq q = g.ctx_tokens;
    q.push_back(Vocabulary::kSep);
    const TokenSeq text = strip_tail(g.response);
    q.insert(q.end(), text.begin(), text.end());
    auto scored = clf.score_candidates(q, pool, vocab);
    int best = 0;
    bool strict_top = true;
    for (int j = 0; j < static_cast<int>(pool.size()); ++j) {
      if (scored.probs[static_cast<std::size_t>(j)] > scored.probs[static_cast<std::size_t>(best)])
        best = j;
      if (j != self_idx && scored.probs[static_cast<std::size_t>(j)] >=
                               scored.probs[static_cast<std::size_t>(self_idx)])
        strict_top = false;
    }
    RpaRow row;
    row.context_id = static_cast<int>(i);
    row.dialogue_index = g.dialogue_index;
    row.turn_index = g.turn_index + 1;
    row.predicted = pool[static_cast<std::size_t>(best)];
    row.p_self = scored.probs[static_cast<std::size_t>(self_idx)];
    row.correct = strict_top;
    max_turn = std::max(max_turn, row.turn_index);
    rep.rows.push_back(std::move(row));
    rep.lm_steps += g.ledger.lm_steps;
    rep.classifier_calls += g.ledger.classifier_calls;
  }
  rep.per_turn_rpa.assign(static_cast<std::size_t>(max_turn), 0.0);
  rep.per_turn_counts.assign(static_cast<std::size_t>(max_turn), 0);
  int n_correct = 0;
  for (const auto& row : rep.rows) {
    const std::size_t b = static_cast<std::size_t>(row.turn_index - 1);
    ++rep.per_turn_counts[b];
    if (row.correct) {
      rep.per_turn_rpa[b] += 1.0;
      ++n_correct;
    }
  }
  for (std::size_t b = 0; b < rep.per_turn_rpa.size(); ++b)
    if (rep.per_turn_counts[b] > 0)
      rep.per_turn_rpa[b] = 100.0 * rep.per_turn_rpa[b] / rep.per_turn_counts[b];
  rep.aggregate_rpa = 100.0 * n_correct / static_cast<double>(rep.rows.size());
  return rep;
}

void write_rpa_report_csv(const std::string& path, const RpaReport& report) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write report: " + path);
  f << "context_id,dialogue,turn,predicted,p_self,correct\n";
  for (const auto& r : report.rows)
    f << r.context_id << ',' << r.dialogue_index << ',' << r.turn_index << ',' << r.predicted
      << ',' << fmt(r.p_self, 6) << ',' << (r.correct ? 1 : 0) << '\n';
}

double f1_metric(const std::string& hyp, const std::string& ref) {
  const std::vector<std::string> h = split_ws(lowercase(hyp));
  const std::vector<std::string> r = split_ws(lowercase(ref));
  if (h.empty() && r.empty()) return 1.0;
  if (h.empty() || r.empty()) return 0.0;
  std::map<std::string, int> ref_counts;
  for (const auto& w : r) ++ref_counts[w];
  int overlap = 0;
  for (const auto& w : h) {
    auto it = ref_counts.find(w);
    if (it != ref_counts.end() && it->second > 0) {
      ++overlap;
      --it->second;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / h.size();
  const double recall = static_cast<double>(overlap) / r.size();
  return 2.0 * precision * recall / (precision + recall);
}

double perplexity(const Seq2SeqModel<float>& model, const Vocabulary& vocab,
                  const std::vector<GenExample>& data, const RpaClassifier<float>* ground_clf) {
  if (data.empty()) throw std::runtime_error("perplexity: empty evaluation set");
  NoGradGuard ng;
  double total_nll = 0.0;
  long total_tokens = 0;
  for (const auto& ex : data) {
    auto enc = model.encode_context(ex.ctx_tokens);
    auto extra = grounding_extra(model, vocab, ex, enc, ground_clf);
    TokenSeq dec_input;
    dec_input.push_back(Vocabulary::kBos);
    dec_input.insert(dec_input.end(), ex.target.begin(), ex.target.end() - 1);
    auto logprobs = model.forward_logprobs(enc, extra ? &*extra : nullptr, dec_input);
    for (std::size_t i = 0; i < ex.target.size(); ++i) {
      if (ex.target[i] == Vocabulary::kPad) continue;
      total_nll -= static_cast<double>(logprobs->value.at(static_cast<int>(i), ex.target[i]));
      ++total_tokens;
    }
  }
  if (total_tokens == 0) throw std::runtime_error("perplexity: no live tokens");
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

PerTurnReport per_turn_report(const RpaReport& model_report, const RpaReport& gold_report) {
  if (model_report.per_turn_rpa.size() != gold_report.per_turn_rpa.size())
    throw std::runtime_error("per_turn_report: turn-index mismatch");
  if (model_report.per_turn_counts != gold_report.per_turn_counts)
    throw std::runtime_error("per_turn_report: reports cover different contexts");
  PerTurnReport out;
  for (std::size_t i = 0; i < model_report.per_turn_rpa.size(); ++i) {
    out.turns.push_back(static_cast<int>(i) + 1);
    out.model_rpa.push_back(model_report.per_turn_rpa[i]);
    out.gold_rpa.push_back(gold_report.per_turn_rpa[i]);
    out.delta.push_back(model_report.per_turn_rpa[i] - gold_report.per_turn_rpa[i]);
  }
  return out;
}

void write_per_turn_csv(const std::string& path, const PerTurnReport& r) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write report: " + path);
  f << "turn,model_rpa,gold_rpa,delta\n";
  for (std::size_t i = 0; i < r.turns.size(); ++i)
    f << r.turns[i] << ',' << fmt(r.model_rpa[i], 4) << ',' << fmt(r.gold_rpa[i], 4) << ','
      << fmt(r.delta[i], 4) << '\n';
}

std::string per_turn_svg(const PerTurnReport& r) {
  const int width = 640, height = 400;
  const double left = 60, right = 20, top = 20, bottom = 50;
  const std::size_t n = r.turns.size();
  auto x_of = [&](std::size_t i) {
    const double span = width - left - right;
    return n <= 1 ? left + span / 2 : left + span * static_cast<double>(i) / (n - 1);
  };
  auto y_of = [&](double v) { return top + (100.0 - v) / 100.0 * (height - top - bottom); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\">\n";
  s << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
    << "\" fill=\"white\"/>\n";
  for (int v = 0; v <= 100; v += 25) {
    s << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(y_of(v)) << "\" x2=\""
      << fmt(width - right) << "\" y2=\"" << fmt(y_of(v))
      << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    s << "<text x=\"" << fmt(left - 8) << "\" y=\"" << fmt(y_of(v) + 4)
      << "\" font-size=\"12\" text-anchor=\"end\">" << v << "</text>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    s << "<text x=\"" << fmt(x_of(i)) << "\" y=\"" << fmt(height - bottom + 18)
      << "\" font-size=\"12\" text-anchor=\"middle\">" << r.turns[i] << "</text>\n";
    s << "<line x1=\"" << fmt(x_of(i)) << "\" y1=\"" << fmt(y_of(r.gold_rpa[i])) << "\" x2=\""
      << fmt(x_of(i)) << "\" y2=\"" << fmt(y_of(r.model_rpa[i]))
      << "\" stroke=\"#d62728\" stroke-width=\"1\"/>\n";
  }
  auto polyline = [&](const std::vector<double>& ys, const char* color) {
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < n; ++i) {
      if (i) s << ' ';
      s << fmt(x_of(i)) << ',' << fmt(y_of(ys[i]));
    }
    s << "\"/>\n";
  };
  polyline(r.gold_rpa, "#888888");
  polyline(r.model_rpa, "#1f77b4");
  s << "<text x=\"" << fmt(left) << "\" y=\"" << fmt(height - 8)
    << "\" font-size=\"12\">model (blue) vs gold (gray); bars = delta</text>\n";
  s << "</svg>\n";
  return s.str();
}

namespace {

// Max over heads (and, via repeated calls, layers/rounds) folded into `acc`,
// transposing [H x Tq x Tk] traces into [Tk x Tq].
void fold_trace(const Tensor<float>& t, std::vector<std::vector<double>>& acc) {
  const int heads = t.shape[0], tq = t.shape[1], tk = t.shape[2];
  if (acc.empty()) acc.assign(static_cast<std::size_t>(tk),
                              std::vector<double>(static_cast<std::size_t>(tq), 0.0));
  for (int h = 0; h < heads; ++h)
    for (int q = 0; q < tq; ++q)
      for (int k = 0; k < tk; ++k) {
        const double v = static_cast<double>(
            t.data[static_cast<std::size_t>((h * tq + q) * tk + k)]);
        auto& cell = acc[static_cast<std::size_t>(k)][static_cast<std::size_t>(q)];
        cell = std::max(cell, v);
      }
}

}  // namespace

HeatmapBundle export_attention_heatmap(const Seq2SeqModel<float>& model,
                                       const Vocabulary& vocab, const PovContext& pov,
                                       const TokenSeq& response, bool want_expanded,
                                       const RpaClassifier<float>* ground_clf) {
  if (want_expanded && model.cfg.expanded.mode == GroundingMode::none)
    throw std::runtime_error("expanded heatmap requested but grounding is disabled");
  const TokenSeq text = strip_tail(response);
  if (text.empty()) throw std::runtime_error("heatmap: empty response");
  NoGradGuard ng;
  const TokenSeq ctx_tokens =
      truncate_left(serialize_context(pov, vocab, all_fields()), model.cfg.max_ctx_tokens);
  auto enc = model.encode_context(ctx_tokens);
  GenExample shim;
  shim.pov = pov;
  shim.ctx_tokens = ctx_tokens;
  auto extra = grounding_extra(model, vocab, shim, enc, ground_clf);
  TokenSeq dec_input;
  dec_input.push_back(Vocabulary::kBos);
  dec_input.insert(dec_input.end(), text.begin(), text.end() - 1);
  DecodeTraces<float> traces;
  model.decode_states(enc, extra ? &*extra : nullptr, dec_input, &traces);

  HeatmapBundle out;
  std::vector<std::vector<double>> cross;
  for (const auto& t : traces.cross) fold_trace(t, cross);
  out.cross.values = std::move(cross);
  for (TokenId t : ctx_tokens) out.cross.context_labels.push_back(vocab.text_of(t));
  for (TokenId t : text) out.cross.response_labels.push_back(vocab.text_of(t));

  if (want_expanded) {
    std::vector<std::vector<double>> exp_vals;
    for (const auto& per_layer : traces.expanded)
      for (const auto& t : per_layer) fold_trace(t, exp_vals);
    if (exp_vals.empty()) throw std::runtime_error("heatmap: no expanded-attention traces");
    AttentionHeatmap hm;
    hm.values = std::move(exp_vals);
    const TokenSeq& extra_tokens = extra->tokens.empty() ? ctx_tokens : extra->tokens;
    for (TokenId t : extra_tokens) hm.context_labels.push_back(vocab.text_of(t));
    hm.response_labels = out.cross.response_labels;
    out.expanded = std::move(hm);
  }
  return out;
}

void write_heatmap_csv(const std::string& path, const AttentionHeatmap& hm) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write heatmap: " + path);
  f << "token";
  for (const auto& l : hm.response_labels) f << ',' << l;
  f << '\n';
  for (std::size_t r = 0; r < hm.values.size(); ++r) {
    f << hm.context_labels[r];
    for (double v : hm.values[r]) f << ',' << fmt(v, 6);
    f << '\n';
  }
}

std::string heatmap_svg(const AttentionHeatmap& hm) {
  const int cell = 24, gutter_left = 120, gutter_top = 90;
  const int rows = static_cast<int>(hm.values.size());
  const int cols = rows ? static_cast<int>(hm.values[0].size()) : 0;
  const int width = gutter_left + cols * cell + 10;
  const int height = gutter_top + rows * cell + 10;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\">\n";
  s << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
    << "\" fill=\"white\"/>\n";
  for (int c = 0; c < cols; ++c)
    s << "<text x=\"" << gutter_left + c * cell + cell / 2 << "\" y=\"" << gutter_top - 6
      << "\" font-size=\"10\" text-anchor=\"start\" transform=\"rotate(-60 "
      << gutter_left + c * cell + cell / 2 << ' ' << gutter_top - 6 << ")\">"
      << hm.response_labels[static_cast<std::size_t>(c)] << "</text>\n";
  for (int r = 0; r < rows; ++r) {
    s << "<text x=\"" << gutter_left - 6 << "\" y=\"" << gutter_top + r * cell + cell / 2 + 4
      << "\" font-size=\"10\" text-anchor=\"end\">"
      << hm.context_labels[static_cast<std::size_t>(r)] << "</text>\n";
    for (int c = 0; c < cols; ++c) {
      const double v = hm.values[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      const int g = 255 - static_cast<int>(std::lround(std::min(1.0, std::max(0.0, v)) * 255));
      s << "<rect x=\"" << gutter_left + c * cell << "\" y=\"" << gutter_top + r * cell
        << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb(" << g << ',' << g
        << ',' << g << ")\" stroke=\"#cccccc\"/>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

void write_metric_rows(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write metrics: " + path);
  f << "model,ppl,f1,rpa,decode_strategy\n";
  for (const auto& r : rows)
    f << r.tag << ',' << fmt(r.ppl, 4) << ',' << fmt(r.f1 * 100.0, 2) << ',' << fmt(r.rpa, 2)
      << ',' << r.decode_strategy << '\n';
}

}  // namespace charkeeper
