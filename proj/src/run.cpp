#include "equant/run.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "equant/checkpoint.hpp"
#include "equant/errors.hpp"
#include "equant/io.hpp"
#include "equant/training.hpp"

namespace equant {

namespace {

const std::vector<std::string>& command_list() {
  static const std::vector<std::string> cmds = {"preprocess", "pretrain",     "train",
                                                "evaluate",   "stats",        "attn-dump",
                                                "count-params", "shuffle"};
  return cmds;
}

std::string trimmed(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

struct Sections {
  std::map<std::string, std::string> run, model, train;

  std::map<std::string, std::string>* section(const std::string& name) {
    if (name == "run") return &run;
    if (name == "model") return &model;
    if (name == "train") return &train;
    return nullptr;
  }
};

// Flat key = value lines grouped by [section] headers; keys before any
// header belong to the run section.
Sections parse_sectioned(const std::string& text) {
  Sections out;
  auto* cur = &out.run;
  std::string section = "run";
  std::size_t pos = 0;
  int lineno = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    const std::string t = trimmed(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
      section = trimmed(t.substr(1, t.size() - 2));
      cur = out.section(section);
      if (!cur)
        throw ConfigError("line " + std::to_string(lineno) + ": unknown section '" + section +
                          "' (want run|model|train)");
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value, got '" + t + "'");
    const std::string key = trimmed(t.substr(0, eq));
    const std::string value = trimmed(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!cur->emplace(key, value).second)
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key +
                        "' in section [" + section + "]");
  }
  return out;
}

std::string join_kv(const std::map<std::string, std::string>& m) {
  std::ostringstream os;
  for (const auto& [k, v] : m) os << k << " = " << v << "\n";
  return os.str();
}

std::filesystem::path absolutized(const std::filesystem::path& p) {
  return p.empty() ? p : std::filesystem::absolute(p);
}

void write_text_artifact(const std::filesystem::path& path, const std::string& text) {
  io::atomic_write(
      path, [&text](std::ostream& os) { os << text; }, false);
}

// Checkpoint-backed commands take their architecture from the checkpoint;
// explicit model keys may only adjust the prediction decision rule.
ModelConfig merge_checkpoint_config(const ModelConfig& base,
                                    const std::map<std::string, std::string>& keys) {
  auto kv = parse_kv_lines(serialize_model_config(base));
  std::map<std::string, std::string> m(kv.begin(), kv.end());
  for (const auto& [k, v] : keys) m[k] = v;
  const ModelConfig merged = parse_model_config(join_kv(m));
  ModelConfig probe = base;
  probe.answerability_threshold = merged.answerability_threshold;
  probe.span_length_cap = merged.span_length_cap;
  if (serialize_model_config(probe) != serialize_model_config(merged))
    throw ConfigError(
        "model overrides may only change answerability_threshold or span_length_cap when a "
        "checkpoint supplies the architecture");
  return merged;
}

std::string artifact_stem(const std::string& id) {
  std::string out;
  for (char c : id)
    out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_');
  return out;
}

}  // namespace

RunSpec resolve_config(const std::string& command, const std::string& file_text,
                       const std::vector<KeyOverride>& overrides) {
  Sections merged = parse_sectioned(file_text);
  for (const auto& o : overrides) {
    auto* sec = merged.section(o[0]);
    if (!sec) throw ConfigError("unknown config section '" + o[0] + "' (want run|model|train)");
    (*sec)[o[1]] = o[2];
  }

  RunSpec spec;
  spec.command = command;
  // echoed configs carry their command; an explicit argv command wins
  if (auto it = merged.run.find("command"); it != merged.run.end()) {
    if (spec.command.empty()) spec.command = it->second;
    merged.run.erase(it);
  }
  const auto& cmds = command_list();
  if (std::find(cmds.begin(), cmds.end(), spec.command) == cmds.end())
    throw ConfigError("unknown command '" + spec.command + "'");

  for (const auto& [k, v] : merged.run) {
    if (k == "dataset") spec.dataset = v;
    else if (k == "embeddings") spec.embeddings = v;
    else if (k == "cache") spec.cache = v;
    else if (k == "checkpoint") spec.checkpoint = v;
    else if (k == "out_dir") spec.out_dir = v;
    else if (k == "context_cap") spec.caps.context = parse_int_value(k, v);
    else if (k == "question_cap") spec.caps.question = parse_int_value(k, v);
    else if (k == "word_cap") spec.caps.word = parse_int_value(k, v);
    else if (k == "eval_mode") spec.eval_mode = eval_mode_from_string(v);
    else if (k == "threshold") spec.threshold = parse_double_value(k, v);
    else if (k == "threshold_stat") spec.threshold_stat = threshold_stat_from_string(v);
    else if (k == "example") spec.example = v;
    else if (k == "category") spec.category = attention_category_from_string(v);
    else if (k == "start_iteration") spec.start_iteration = parse_int_value(k, v);
    else if (k == "char_vocab") spec.char_vocab = parse_int_value(k, v);
    else throw ConfigError("unknown run key '" + k + "'");
  }
  spec.model = parse_model_config(join_kv(merged.model));
  spec.train = parse_train_config(join_kv(merged.train));
  spec.model_keys = std::move(merged.model);

  if (spec.caps.context <= 0 || spec.caps.question <= 0 || spec.caps.word <= 0)
    throw ConfigError("context_cap/question_cap/word_cap must be positive");
  if (spec.start_iteration < 0) throw ConfigError("start_iteration must be non-negative");
  if (spec.char_vocab < 2) throw ConfigError("char_vocab must be at least 2");

  if (!spec.cache.empty() && spec.cache.is_relative())
    if (const char* dir = std::getenv("EQUANT_CACHE_DIR"))
      if (*dir) spec.cache = std::filesystem::path(dir) / spec.cache;
  spec.dataset = absolutized(spec.dataset);
  spec.embeddings = absolutized(spec.embeddings);
  spec.cache = absolutized(spec.cache);
  spec.checkpoint = absolutized(spec.checkpoint);
  spec.out_dir = absolutized(spec.out_dir);
  return spec;
}

std::string serialize_run_spec(const RunSpec& spec) {
  std::ostringstream os;
  os << "[run]\n";
  os << "command = " << spec.command << "\n";
  os << "dataset = " << spec.dataset.string() << "\n";
  os << "embeddings = " << spec.embeddings.string() << "\n";
  os << "cache = " << spec.cache.string() << "\n";
  os << "checkpoint = " << spec.checkpoint.string() << "\n";
  os << "out_dir = " << spec.out_dir.string() << "\n";
  os << "context_cap = " << spec.caps.context << "\n";
  os << "question_cap = " << spec.caps.question << "\n";
  os << "word_cap = " << spec.caps.word << "\n";
  os << "eval_mode = " << to_string(spec.eval_mode) << "\n";
  os << "threshold = " << format_double(spec.threshold) << "\n";
  os << "threshold_stat = " << to_string(spec.threshold_stat) << "\n";
  os << "example = " << spec.example << "\n";
  os << "category = " << to_string(spec.category) << "\n";
  os << "start_iteration = " << spec.start_iteration << "\n";
  os << "char_vocab = " << spec.char_vocab << "\n";
  os << "[model]\n" << serialize_model_config(spec.model);
  os << "[train]\n" << serialize_train_config(spec.train);
  return os.str();
}

void RunSpec::validate() const {
  const auto& cmds = command_list();
  if (std::find(cmds.begin(), cmds.end(), command) == cmds.end())
    throw ConfigError("unknown command '" + command + "'");
  auto need = [this](const std::filesystem::path& p, const char* what) {
    if (p.empty()) throw ConfigError(command + " requires " + what);
  };
  auto need_file = [&need](const std::filesystem::path& p, const char* what) {
    need(p, what);
    if (!std::filesystem::exists(p))
      throw IoError(std::string(what) + " not found: " + p.string());
  };
  need(out_dir, "an output directory (--out)");
  if (command == "preprocess") {
    need_file(dataset, "a dataset (--dataset)");
    need_file(embeddings, "an embedding file (--embeddings)");
    need(cache, "a cache path (--cache)");
  } else if (command == "pretrain" || command == "train") {
    need_file(cache, "a cache (--cache)");
    if (!checkpoint.empty()) need_file(checkpoint, "the checkpoint (--checkpoint)");
    if (start_iteration > 0 && checkpoint.empty())
      throw ConfigError("resuming (--start-iteration > 0) requires --checkpoint");
    if (command == "pretrain" && start_iteration > 0)
      throw ConfigError("pretrain always starts at iteration 0; resume with the train command");
  } else if (command == "evaluate" || command == "stats" || command == "attn-dump") {
    need_file(cache, "a cache (--cache)");
    need_file(checkpoint, "a checkpoint (--checkpoint)");
    if (command == "attn-dump" && example.empty())
      throw ConfigError("attn-dump requires an example id (--example)");
  } else if (command == "shuffle") {
    need_file(cache, "a cache (--cache)");
  }
  // count-params needs nothing beyond out_dir; a cache is optional
  if (command == "count-params" && !cache.empty())
    need_file(cache, "the cache (--cache)");
}

int run(const RunSpec& spec_in) {
  RunSpec spec = spec_in;
  spec.validate();

  if (spec.command == "preprocess") {
    CacheBundle bundle;
    bundle.examples = load_squad(spec.dataset);
    const auto glove = load_glove(spec.embeddings, spec.model.word_dim);
    bundle.vocab = build_vocabulary(bundle.examples, glove);
    bundle.word_embeddings = build_word_embeddings(bundle.vocab, glove, spec.model.word_dim);
    bundle.caps = spec.caps;
    encode_examples(bundle.examples, bundle.vocab, spec.caps.word);
    save_cache(spec.cache, bundle);
  } else if (spec.command == "shuffle") {
    CacheBundle bundle = load_cache(spec.cache);
    bundle.examples = shuffle_pairs(bundle.examples, spec.train.seed);
    save_cache(spec.out_dir / "shuffled_cache.bin", bundle);
  } else if (spec.command == "count-params") {
    std::optional<CacheBundle> bundle;
    if (!spec.cache.empty()) bundle = load_cache(spec.cache);
    const Tensor<float> emb =
        bundle ? bundle->word_embeddings : Tensor<float>::zeros({2, spec.model.word_dim});
    const int chars = bundle ? bundle->vocab.char_count() : spec.char_vocab;
    Model<float> model(spec.model, emb, chars, 0);
    std::ostringstream os;
    for (const auto& [block, count] : model.count_params_per_block())
      os << block << " = " << count << "\n";
    os << "total = " << model.count_params() << "\n";
    write_text_artifact(spec.out_dir / "params.txt", os.str());
    std::cout << os.str();
  } else if (spec.command == "pretrain" || spec.command == "train") {
    const CacheBundle bundle = load_cache(spec.cache);
    const TrainConfig tc = spec.train;
    std::optional<Checkpoint> ck;
    if (!spec.checkpoint.empty()) ck = load_checkpoint(spec.checkpoint);
    std::optional<Model<float>> model;
    Adam<float> adam(adam_config_from(tc));
    if (spec.start_iteration > 0) {
      // exact resume: weights, optimizer slots, and architecture all come
      // from the checkpoint
      spec.model = merge_checkpoint_config(ck->config, spec.model_keys);
      model.emplace(model_from_checkpoint(*ck, bundle.word_embeddings, tc.seed));
      adam.attach(model->params().all());
      restore_optimizer(*ck, *model, adam);
    } else {
      model.emplace(spec.model, bundle.word_embeddings, bundle.vocab.char_count(), tc.seed);
      if (ck) restore_partial(*ck, *model);
      adam.attach(model->params().all());
    }
    if (spec.command == "pretrain")
      pretrain_trunk(*model, adam, bundle.examples, bundle.caps, tc, spec.out_dir);
    else
      train_loop(*model, adam, bundle.examples, bundle.caps, tc, spec.out_dir,
                 spec.start_iteration);
  } else {  // evaluate | stats | attn-dump
    const CacheBundle bundle = load_cache(spec.cache);
    const Checkpoint ck = load_checkpoint(spec.checkpoint);
    spec.model = merge_checkpoint_config(ck.config, spec.model_keys);
    const Model<float> model = model_from_checkpoint(ck, bundle.word_embeddings);
    if (spec.command == "evaluate") {
      const auto predictor = model_predictor(model, bundle.caps);
      const EvalReport report =
          spec.threshold >= 0.0
              ? threshold_baseline(predictor, bundle.examples, spec.model, spec.threshold,
                                   spec.threshold_stat)
              : evaluate(predictor, bundle.examples, spec.model, spec.eval_mode);
      write_text_artifact(spec.out_dir / "report.txt", format_eval_report(report));
      write_prediction_dump(spec.out_dir / "predictions.json", report);
      std::cout << format_eval_report(report);
    } else if (spec.command == "stats") {
      const auto predictor = model_predictor(model, bundle.caps);
      const ProbabilityStats stats = probability_stats(predictor, bundle.examples);
      const ThresholdSweep sweep = sweep_threshold(predictor, bundle.examples, spec.threshold_stat);
      std::ostringstream os;
      os << format_probability_stats(stats);
      os << "threshold_stat = " << to_string(spec.threshold_stat) << "\n";
      os << "sweep/p = " << format_double(sweep.p) << "\n";
      os << "sweep/accuracy = " << format_double(sweep.accuracy) << "\n";
      write_text_artifact(spec.out_dir / "stats.txt", os.str());
      std::cout << os.str();
    } else {
      const QAExample* target = nullptr;
      for (const auto& ex : bundle.examples)
        if (ex.id == spec.example) target = &ex;
      if (!target)
        throw ContractError("attn-dump: example '" + spec.example + "' not found in the cache");
      const AttentionDump dump = attention_dump(model, *target, bundle.caps, spec.category);
      export_attention(spec.out_dir / ("attention_" + artifact_stem(spec.example) + ".txt"), dump);
    }
  }

  write_text_artifact(spec.out_dir / "resolved_config.txt", serialize_run_spec(spec));
  return 0;
}

}  // namespace equant
