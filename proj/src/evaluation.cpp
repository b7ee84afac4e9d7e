#include "equant/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <sstream>

#include <json.hpp>

#include "equant/errors.hpp"
#include "equant/io.hpp"

namespace equant {

using nlohmann::json;

namespace {

bool is_space_byte(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// Bytes >= 0x80 (UTF-8 continuation/lead) count as letters, never punctuation.
bool is_punct_byte(unsigned char c) { return c < 0x80 && std::ispunct(c); }

bool is_article(const std::string& w) { return w == "a" || w == "an" || w == "the"; }

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && is_space_byte(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !is_space_byte(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace

std::string normalize_answer(const std::string& text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_punct_byte(c)) continue;
    cleaned.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
  }
  std::string out;
  for (const auto& w : split_words(cleaned)) {
    if (is_article(w)) continue;
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

int exact_match(const std::string& prediction, const std::vector<std::string>& golds) {
  const std::string pred = normalize_answer(prediction);
  if (golds.empty()) return pred.empty() ? 1 : 0;
  for (const auto& g : golds)
    if (pred == normalize_answer(g)) return 1;
  return 0;
}

namespace {

double f1_against(const std::vector<std::string>& pred_tokens,
                  const std::vector<std::string>& gold_tokens) {
  if (pred_tokens.empty() || gold_tokens.empty())
    return (pred_tokens.empty() && gold_tokens.empty()) ? 1.0 : 0.0;
  std::map<std::string, int> budget;
  for (const auto& t : gold_tokens) ++budget[t];
  int common = 0;
  for (const auto& t : pred_tokens) {
    auto it = budget.find(t);
    if (it != budget.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(pred_tokens.size());
  const double recall = static_cast<double>(common) / static_cast<double>(gold_tokens.size());
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace

double f1_score(const std::string& prediction, const std::vector<std::string>& golds) {
  const auto pred_tokens = split_words(normalize_answer(prediction));
  if (golds.empty()) return pred_tokens.empty() ? 1.0 : 0.0;
  double best = 0.0;
  for (const auto& g : golds)
    best = std::max(best, f1_against(pred_tokens, split_words(normalize_answer(g))));
  return best;
}

std::string to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::v1: return "v1";
    case EvalMode::v2: return "v2";
    case EvalMode::force_answerable: return "force_answerable";
  }
  return "v2";
}

EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "v1") return EvalMode::v1;
  if (s == "v2") return EvalMode::v2;
  if (s == "force_answerable") return EvalMode::force_answerable;
  throw ConfigError("unknown eval mode '" + s + "' (want v1|v2|force_answerable)");
}

std::string to_string(ThresholdStat s) {
  return s == ThresholdStat::product ? "product" : "max_of_two";
}

ThresholdStat threshold_stat_from_string(const std::string& s) {
  if (s == "product") return ThresholdStat::product;
  if (s == "max_of_two") return ThresholdStat::max_of_two;
  throw ConfigError("unknown threshold statistic '" + s + "' (want product|max_of_two)");
}

Predictor model_predictor(const Model<float>& model, const Caps& caps) {
  return [&model, caps](const QAExample& ex) { return model.infer(input_from_example(ex, caps)); };
}

namespace {

// Everything derived from one predictor call. The span decision always comes
// from the p0-stripped output, so every answerability rule (mode, threshold)
// picks between the same forced text and the empty string.
struct PredictionRecord {
  ModelOutput output;
  Answer forced;
  double max_p1 = 0;
  double max_p2 = 0;
};

PredictionRecord make_record(const Predictor& predictor, const QAExample& ex,
                             const ModelConfig& cfg) {
  PredictionRecord rec;
  rec.output = predictor(ex);
  ModelOutput stripped = rec.output;
  stripped.p0.reset();
  rec.forced = predict(stripped, cfg, ex);
  const std::size_t n1 = std::min(rec.output.p1.size(), ex.context_tokens.size());
  const std::size_t n2 = std::min(rec.output.p2.size(), ex.context_tokens.size());
  for (std::size_t i = 0; i < n1; ++i) rec.max_p1 = std::max(rec.max_p1, rec.output.p1[i]);
  for (std::size_t i = 0; i < n2; ++i) rec.max_p2 = std::max(rec.max_p2, rec.output.p2[i]);
  return rec;
}

template <typename AnswerableRule>
EvalReport build_report(const std::vector<QAExample>& examples,
                        const std::vector<PredictionRecord>& recs,
                        const AnswerableRule& rule) {
  EvalReport rep;
  rep.total = static_cast<int>(examples.size());
  double em_sum = 0, f1_sum = 0;
  int correct = 0;
  static const std::vector<std::string> kNoGolds;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    const auto& rec = recs[i];
    ExampleRecord r;
    r.id = ex.id;
    r.delta = ex.answerable;
    r.predicted_answerable = rule(rec) && rec.forced.answerable;
    if (r.predicted_answerable) {
      r.predicted_text = rec.forced.text;
      r.span = rec.forced.span;
    }
    r.p0 = rec.output.p0;
    r.max_p1 = rec.max_p1;
    r.max_p2 = rec.max_p2;
    const auto& golds = ex.answerable ? ex.gold_answer_texts : kNoGolds;
    r.em = exact_match(r.predicted_text, golds);
    r.f1 = f1_score(r.predicted_text, golds);
    em_sum += r.em;
    f1_sum += r.f1;
    if ((r.predicted_answerable ? 1 : 0) == ex.answerable) ++correct;
    if (ex.answerable)
      ++rep.answerable;
    else
      ++rep.unanswerable;
    rep.records.push_back(std::move(r));
  }
  rep.em = 100.0 * em_sum / rep.total;
  rep.f1 = 100.0 * f1_sum / rep.total;
  rep.answerability_accuracy = 100.0 * correct / rep.total;
  return rep;
}

std::vector<PredictionRecord> collect(const Predictor& predictor,
                                      const std::vector<QAExample>& examples,
                                      const ModelConfig& cfg) {
  if (examples.empty()) throw ContractError("evaluation: empty example set");
  std::vector<PredictionRecord> recs;
  recs.reserve(examples.size());
  for (const auto& ex : examples) recs.push_back(make_record(predictor, ex, cfg));
  return recs;
}

double stat_value(double max_p1, double max_p2, ThresholdStat stat) {
  return stat == ThresholdStat::product ? max_p1 * max_p2 : std::max(max_p1, max_p2);
}

}  // namespace

EvalReport evaluate(const Predictor& predictor, const std::vector<QAExample>& examples,
                    const ModelConfig& cfg, EvalMode mode) {
  if (mode == EvalMode::v1)
    for (const auto& ex : examples)
      if (!ex.answerable)
        throw ContractError("evaluate: v1 mode requires every example answerable, but " + ex.id +
                            " has delta=0");
  const auto recs = collect(predictor, examples, cfg);
  if (mode == EvalMode::v2) {
    const double thr = cfg.answerability_threshold;
    return build_report(examples, recs, [thr](const PredictionRecord& rec) {
      return !rec.output.p0.has_value() || *rec.output.p0 >= thr;
    });
  }
  // v1 and force_answerable both override the head: always answer.
  return build_report(examples, recs, [](const PredictionRecord&) { return true; });
}

ProbabilityStats probability_stats(const Predictor& predictor,
                                   const std::vector<QAExample>& examples) {
  if (examples.empty()) throw ContractError("probability_stats: empty example set");
  std::vector<std::pair<double, double>> groups[2];
  ModelConfig cfg;  // span decoding is irrelevant here; only the maxima are used
  for (const auto& ex : examples) {
    const auto rec = make_record(predictor, ex, cfg);
    groups[ex.answerable ? 1 : 0].emplace_back(rec.max_p1, rec.max_p2);
  }
  auto summarize = [](const std::vector<std::pair<double, double>>& vals) {
    GroupStats g;
    g.count = static_cast<int>(vals.size());
    if (vals.empty()) return g;
    for (const auto& [a, b] : vals) {
      g.mean_p1 += a;
      g.mean_p2 += b;
    }
    g.mean_p1 /= g.count;
    g.mean_p2 /= g.count;
    for (const auto& [a, b] : vals) {
      g.std_p1 += (a - g.mean_p1) * (a - g.mean_p1);
      g.std_p2 += (b - g.mean_p2) * (b - g.mean_p2);
    }
    g.std_p1 = std::sqrt(g.std_p1 / g.count);
    g.std_p2 = std::sqrt(g.std_p2 / g.count);
    return g;
  };
  ProbabilityStats stats;
  stats.answerable = summarize(groups[1]);
  stats.unanswerable = summarize(groups[0]);
  return stats;
}

EvalReport threshold_baseline(const Predictor& predictor, const std::vector<QAExample>& examples,
                              const ModelConfig& cfg, double p, ThresholdStat stat) {
  const auto recs = collect(predictor, examples, cfg);
  return build_report(examples, recs, [p, stat](const PredictionRecord& rec) {
    return !(stat_value(rec.max_p1, rec.max_p2, stat) < p);
  });
}

ThresholdSweep sweep_threshold(const Predictor& predictor, const std::vector<QAExample>& examples,
                               ThresholdStat stat) {
  ModelConfig cfg;
  const auto recs = collect(predictor, examples, cfg);
  std::vector<double> candidates{0.0};
  for (const auto& rec : recs) candidates.push_back(stat_value(rec.max_p1, rec.max_p2, stat));
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  ThresholdSweep best;
  best.accuracy = -1;
  for (const double p : candidates) {
    int correct = 0;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const bool answer = !(stat_value(recs[i].max_p1, recs[i].max_p2, stat) < p);
      if ((answer ? 1 : 0) == examples[i].answerable) ++correct;
    }
    const double acc = 100.0 * correct / static_cast<double>(recs.size());
    if (acc > best.accuracy) {
      best.accuracy = acc;
      best.p = p;
    }
  }
  return best;
}

std::string format_eval_report(const EvalReport& report) {
  std::ostringstream os;
  os << "total = " << report.total << "\n";
  os << "answerable = " << report.answerable << "\n";
  os << "unanswerable = " << report.unanswerable << "\n";
  os << "em = " << format_double(report.em) << "\n";
  os << "f1 = " << format_double(report.f1) << "\n";
  os << "answerability_accuracy = " << format_double(report.answerability_accuracy) << "\n";
  char line[96];
  std::snprintf(line, sizeof line, "EM / F1 / Acc: %.3f / %.3f / %.3f\n", report.em, report.f1,
                report.answerability_accuracy);
  os << line;
  return os.str();
}

std::string format_probability_stats(const ProbabilityStats& stats) {
  std::ostringstream os;
  auto emit = [&os](const char* group, const GroupStats& g) {
    os << group << "/count = " << g.count << "\n";
    os << group << "/mean_p1 = " << format_double(g.mean_p1) << "\n";
    os << group << "/std_p1 = " << format_double(g.std_p1) << "\n";
    os << group << "/mean_p2 = " << format_double(g.mean_p2) << "\n";
    os << group << "/std_p2 = " << format_double(g.std_p2) << "\n";
  };
  emit("answerable", stats.answerable);
  emit("unanswerable", stats.unanswerable);
  return os.str();
}

void write_prediction_dump(const std::filesystem::path& path, const EvalReport& report) {
  json j = json::object();
  for (const auto& r : report.records) j[r.id] = r.predicted_text;
  io::atomic_write(
      path, [&j](std::ostream& os) { os << j.dump(2) << "\n"; }, false);
}

std::string to_string(AttentionCategory c) {
  switch (c) {
    case AttentionCategory::answerable: return "answerable";
    case AttentionCategory::adversarial_unanswerable: return "adversarial-unanswerable";
    case AttentionCategory::shuffled: return "shuffled";
  }
  return "answerable";
}

AttentionCategory attention_category_from_string(const std::string& s) {
  if (s == "answerable") return AttentionCategory::answerable;
  if (s == "adversarial-unanswerable") return AttentionCategory::adversarial_unanswerable;
  if (s == "shuffled") return AttentionCategory::shuffled;
  throw ConfigError("unknown attention category '" + s +
                    "' (want answerable|adversarial-unanswerable|shuffled)");
}

AttentionDump attention_dump(const Model<float>& model, const QAExample& example, const Caps& caps,
                             AttentionCategory category) {
  const auto input = input_from_example(example, caps);
  auto ctx = Ctx<float>::eval();
  const auto f = model.forward(ctx, input);
  AttentionDump dump;
  dump.id = example.id;
  dump.category = category;
  const int n = f.S.dim(0);
  const int m = f.S.dim(1);
  for (int i = 0; i < n; ++i)
    dump.context_tokens.push_back(example.context_tokens[static_cast<std::size_t>(i)].text);
  for (int j = 0; j < m; ++j)
    dump.question_tokens.push_back(example.question_tokens[static_cast<std::size_t>(j)].text);
  dump.S.assign(f.S.value().begin(), f.S.value().end());
  dump.Sbar.assign(f.Sbar.value().begin(), f.Sbar.value().end());
  return dump;
}

namespace {

// %.9g preserves every float32 bit pattern across a text round trip.
void write_matrix(std::ostream& os, const char* name, const std::vector<float>& vals, int n,
                  int m) {
  os << name << " = " << n << " " << m << "\n";
  char buf[48];
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(vals[static_cast<std::size_t>(i) * m + j]));
      os << (j ? " " : "") << buf;
    }
    os << "\n";
  }
}

std::string next_line(std::istream& is, const char* what) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError(std::string("attention dump: missing ") + what);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

std::string expect_field(std::istream& is, const std::string& key) {
  const std::string line = next_line(is, key.c_str());
  const std::string prefix = key + " = ";
  if (line.rfind(prefix, 0) != 0)
    throw ParseError("attention dump: expected '" + key + " = ...', got '" + line + "'");
  return line.substr(prefix.size());
}

std::vector<float> read_matrix(std::istream& is, const std::string& name, int n, int m) {
  const std::string header = expect_field(is, name);
  std::istringstream hs(header);
  int hn = -1, hm = -1;
  if (!(hs >> hn >> hm) || hn != n || hm != m)
    throw ParseError("attention dump: " + name + " dimensions disagree with the token lists");
  std::vector<float> vals;
  vals.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(m));
  for (int i = 0; i < n; ++i) {
    const std::string line = next_line(is, name.c_str());
    const char* p = line.c_str();
    for (int j = 0; j < m; ++j) {
      char* end = nullptr;
      const float v = std::strtof(p, &end);
      if (end == p) throw ParseError("attention dump: bad float in " + name + " row " + std::to_string(i));
      vals.push_back(v);
      p = end;
    }
    while (*p && is_space_byte(static_cast<unsigned char>(*p))) ++p;
    if (*p) throw ParseError("attention dump: trailing junk in " + name + " row " + std::to_string(i));
  }
  return vals;
}

}  // namespace

void export_attention(const std::filesystem::path& path, const AttentionDump& dump) {
  const int n = static_cast<int>(dump.context_tokens.size());
  const int m = static_cast<int>(dump.question_tokens.size());
  if (dump.S.size() != static_cast<std::size_t>(n) * m || dump.Sbar.size() != dump.S.size())
    throw ContractError("export_attention: matrix sizes disagree with the token lists");
  io::atomic_write(
      path,
      [&](std::ostream& os) {
        os << "attention v1\n";
        os << "id = " << dump.id << "\n";
        os << "category = " << to_string(dump.category) << "\n";
        os << "context_tokens = " << n << "\n";
        for (const auto& t : dump.context_tokens) os << t << "\n";
        os << "question_tokens = " << m << "\n";
        for (const auto& t : dump.question_tokens) os << t << "\n";
        write_matrix(os, "S", dump.S, n, m);
        write_matrix(os, "Sbar", dump.Sbar, n, m);
      },
      false);
}

AttentionDump import_attention(const std::filesystem::path& path) {
  auto is = io::open_input(path, false);
  if (next_line(is, "header") != "attention v1")
    throw ParseError("attention dump: bad header in " + path.string());
  AttentionDump dump;
  dump.id = expect_field(is, "id");
  dump.category = attention_category_from_string(expect_field(is, "category"));
  const int n = parse_int_value("context_tokens", expect_field(is, "context_tokens"));
  if (n < 0) throw ParseError("attention dump: negative context_tokens count");
  for (int i = 0; i < n; ++i) dump.context_tokens.push_back(next_line(is, "context token"));
  const int m = parse_int_value("question_tokens", expect_field(is, "question_tokens"));
  if (m < 0) throw ParseError("attention dump: negative question_tokens count");
  for (int j = 0; j < m; ++j) dump.question_tokens.push_back(next_line(is, "question token"));
  dump.S = read_matrix(is, "S", n, m);
  dump.Sbar = read_matrix(is, "Sbar", n, m);
  return dump;
}

}  // namespace equant
