#pragma once

// Scoring with official SQuAD semantics (normalize, multi-gold max, empty
// string as the no-answer prediction), the three evaluation modes, the
// probability-gap analysis, the confidence-threshold baseline, and the
// attention-map export.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "equant/config.hpp"
#include "equant/corpus.hpp"
#include "equant/model.hpp"

namespace equant {

std::string normalize_answer(const std::string& text);

// golds empty means the gold answer is "unanswerable".
int exact_match(const std::string& prediction, const std::vector<std::string>& golds);
double f1_score(const std::string& prediction, const std::vector<std::string>& golds);

enum class EvalMode { v1, v2, force_answerable };

std::string to_string(EvalMode mode);
EvalMode eval_mode_from_string(const std::string& s);

struct ExampleRecord {
  std::string id;
  int delta = 0;                 // gold answerability
  bool predicted_answerable = true;
  std::string predicted_text;    // empty when predicted unanswerable
  std::optional<std::pair<int, int>> span;
  std::optional<double> p0;
  double max_p1 = 0;             // max over context positions
  double max_p2 = 0;
  double em = 0;
  double f1 = 0;
};

struct EvalReport {
  double em = 0;                       // percentages
  double f1 = 0;
  double answerability_accuracy = 0;
  int total = 0;
  int answerable = 0;
  int unanswerable = 0;
  std::vector<ExampleRecord> records;  // dataset order
};

// Per-group mean/std (population) of the per-example max start/end
// probabilities.
struct GroupStats {
  int count = 0;
  double mean_p1 = 0, std_p1 = 0;
  double mean_p2 = 0, std_p2 = 0;
};

struct ProbabilityStats {
  GroupStats answerable;
  GroupStats unanswerable;
};

using Predictor = std::function<ModelOutput(const QAExample&)>;

// Wraps a trained model as a Predictor (examples are truncated to the caps).
Predictor model_predictor(const Model<float>& model, const Caps& caps);

EvalReport evaluate(const Predictor& predictor, const std::vector<QAExample>& examples,
                    const ModelConfig& cfg, EvalMode mode);

ProbabilityStats probability_stats(const Predictor& predictor,
                                   const std::vector<QAExample>& examples);

// Confidence statistic for the no-head baseline: product of the two maxima,
// or the larger of the two.
enum class ThresholdStat { product, max_of_two };

std::string to_string(ThresholdStat s);
ThresholdStat threshold_stat_from_string(const std::string& s);

// Confidence baseline: declare unanswerable iff the statistic falls below p.
EvalReport threshold_baseline(const Predictor& predictor, const std::vector<QAExample>& examples,
                              const ModelConfig& cfg, double p,
                              ThresholdStat stat = ThresholdStat::product);

struct ThresholdSweep {
  double p = 0;         // accuracy-maximizing threshold (lowest on ties)
  double accuracy = 0;  // percentage at that threshold
};

// Candidates are 0 plus every example's own statistic.
ThresholdSweep sweep_threshold(const Predictor& predictor, const std::vector<QAExample>& examples,
                               ThresholdStat stat = ThresholdStat::product);

std::string format_eval_report(const EvalReport& report);
std::string format_probability_stats(const ProbabilityStats& stats);

// id -> predicted text as JSON, consumable by external scorers.
void write_prediction_dump(const std::filesystem::path& path, const EvalReport& report);

enum class AttentionCategory { answerable, adversarial_unanswerable, shuffled };

std::string to_string(AttentionCategory c);
AttentionCategory attention_category_from_string(const std::string& s);

struct AttentionDump {
  std::string id;
  AttentionCategory category = AttentionCategory::answerable;
  std::vector<std::string> context_tokens;
  std::vector<std::string> question_tokens;
  std::vector<float> S;     // row-major [n x m], raw similarity
  std::vector<float> Sbar;  // row-softmax of S
};

AttentionDump attention_dump(const Model<float>& model, const QAExample& example,
                             const Caps& caps, AttentionCategory category);
void export_attention(const std::filesystem::path& path, const AttentionDump& dump);
AttentionDump import_attention(const std::filesystem::path& path);

}  // namespace equant
