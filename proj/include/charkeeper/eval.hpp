#pragma once

#include <optional>
#include <string>
#include <vector>

#include "charkeeper/decoding.hpp"
#include "charkeeper/training.hpp"

namespace charkeeper {

// One response (generated or gold) with its provenance.
struct GenOutput {
  int dialogue_index = 0;
  int turn_index = 0;  // 0-based turn within the dialogue
  PovContext pov;
  TokenSeq ctx_tokens;
  TokenSeq response;  // text tokens, EOS stripped
  CostLedger ledger;
};

struct RpaRow {
  int context_id = 0;
  int dialogue_index = 0;
  int turn_index = 0;  // 1-based
  std::string predicted;
  double p_self = 0.0;
  bool correct = false;
};

struct RpaReport {
  std::vector<RpaRow> rows;
  double aggregate_rpa = 0.0;        // percent
  std::vector<double> per_turn_rpa;  // percent; index 0 = turn 1
  std::vector<int> per_turn_counts;
  long lm_steps = 0;          // decode-time totals carried from the ledgers
  long classifier_calls = 0;  // ditto (metric-time calls not included)
};

// Decodes one response per (dialogue, turn) with the given settings.
std::vector<GenOutput> decode_outputs(const Seq2SeqModel<float>& model, const Vocabulary& vocab,
                                      const std::vector<Dialogue>& dialogues,
                                      const DecodeConfig& cfg,
                                      const SelfScorer* scorer = nullptr,
                                      const RpaClassifier<float>* ground_clf = nullptr);

// Gold turns packaged as outputs (the human-analog row).
std::vector<GenOutput> gold_outputs(const std::vector<Dialogue>& dialogues,
                                    const Vocabulary& vocab, int max_ctx_tokens);

// Scores each response against the participant pair (or `catalog` when
// given); correct iff the true speaker is strictly top-ranked.
RpaReport rpa_metric(const std::vector<GenOutput>& outputs, const RpaClassifier<float>& clf,
                     const Vocabulary& vocab, std::uint64_t clf_vocab_hash,
                     const std::vector<std::string>* catalog = nullptr);

void write_rpa_report_csv(const std::string& path, const RpaReport& report);

// Unigram overlap F1 after lowercasing + whitespace split.
double f1_metric(const std::string& hyp, const std::string& ref);

// exp(mean per-token NLL) under teacher forcing, PAD excluded.
double perplexity(const Seq2SeqModel<float>& model, const Vocabulary& vocab,
                  const std::vector<GenExample>& data,
                  const RpaClassifier<float>* ground_clf = nullptr);

struct PerTurnReport {
  std::vector<int> turns;  // 1-based
  std::vector<double> model_rpa;
  std::vector<double> gold_rpa;
  std::vector<double> delta;  // model - gold
};

PerTurnReport per_turn_report(const RpaReport& model_report, const RpaReport& gold_report);
void write_per_turn_csv(const std::string& path, const PerTurnReport& r);
std::string per_turn_svg(const PerTurnReport& r);

struct AttentionHeatmap {
  std::vector<std::string> context_labels;   // rows
  std::vector<std::string> response_labels;  // columns
  std::vector<std::vector<double>> values;   // [rows x cols], each in [0, 1]
};

struct HeatmapBundle {
  AttentionHeatmap cross;                    // over the full serialized context
  std::optional<AttentionHeatmap> expanded;  // over the extra grounding states
};

// Max over heads, then max over decoder layers (and rounds, for the expanded
// pass). Requesting the expanded matrix on an ungrounded model is an error.
HeatmapBundle export_attention_heatmap(const Seq2SeqModel<float>& model,
                                       const Vocabulary& vocab, const PovContext& pov,
                                       const TokenSeq& response, bool want_expanded,
                                       const RpaClassifier<float>* ground_clf = nullptr);

void write_heatmap_csv(const std::string& path, const AttentionHeatmap& hm);
std::string heatmap_svg(const AttentionHeatmap& hm);

struct MetricRow {
  std::string tag;
  double ppl = 0.0;
  double f1 = 0.0;   // 0..1; written x100
  double rpa = 0.0;  // percent
  std::string decode_strategy;
};

void write_metric_rows(const std::string& path, const std::vector<MetricRow>& rows);

}  // namespace charkeeper
