// Thin command-line shell: flags become {section, key, value} overrides on
// top of an optional config file, and every failure is reported as a single
// machine-parsable line on stderr.

#include <array>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "equant/errors.hpp"
#include "equant/run.hpp"

namespace {

struct FlagDef {
  const char* flag;
  const char* section;
  const char* key;
  const char* help;
};

// Every RunSpec field is reachable: the curated flags below plus the generic
// --set section.key=value escape hatch.
const std::vector<FlagDef>& flag_defs() {
  static const std::vector<FlagDef> defs = {
      {"--dataset", "run", "dataset", "SQuAD-format JSON input"},
      {"--embeddings", "run", "embeddings", "GloVe-format embedding text file"},
      {"--cache", "run", "cache",
       "preprocessed bundle path (relative paths resolve under $EQUANT_CACHE_DIR)"},
      {"--checkpoint", "run", "checkpoint", "input checkpoint file"},
      {"--out", "run", "out_dir", "output directory for artifacts"},
      {"--context-cap", "run", "context_cap", "max context tokens kept at preprocess time"},
      {"--question-cap", "run", "question_cap", "max question tokens kept at preprocess time"},
      {"--word-cap", "run", "word_cap", "max characters kept per token"},
      {"--mode", "run", "eval_mode", "evaluation mode: v1|v2|force_answerable"},
      {"--threshold", "run", "threshold",
       "confidence threshold; >= 0 switches evaluate to the no-head baseline"},
      {"--threshold-stat", "run", "threshold_stat", "baseline statistic: product|max_of_two"},
      {"--example", "run", "example", "example id to dump (attn-dump)"},
      {"--category", "run", "category",
       "attention dump label: answerable|adversarial-unanswerable|shuffled"},
      {"--start-iteration", "run", "start_iteration",
       "completed iterations behind the resume checkpoint (train)"},
      {"--char-vocab", "run", "char_vocab",
       "character table size for count-params without a cache"},
      {"--head", "model", "head_variant", "answerability head: none|equant1|equant2|equant3"},
      {"--hidden", "model", "hidden", "trunk hidden width"},
      {"--attention-heads", "model", "attention_heads", "self-attention head count"},
      {"--seed", "train", "seed", "seed for init, batch sampling, and dropout"},
      {"--iterations", "train", "max_iterations", "total training iterations"},
      {"--batch-size", "train", "batch_size", "examples per training step"},
      {"--lr", "train", "lr", "peak learning rate"},
      {"--checkpoint-interval", "train", "checkpoint_interval",
       "iterations between saved checkpoints"},
      {"--dropout", "train", "dropout", "dropout rate during training"},
  };
  return defs;
}

struct SubState {
  std::string name;
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<std::string> values;
  std::vector<CLI::Option*> opts;
};

std::string one_line(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (c == '\n' || c == '\r') c = ' ';
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw equant::IoError("cannot open config file " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EQuANt: extended QANet question answering with answerability prediction"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"preprocess", "tokenize and encode a SQuAD dataset into a reusable cache"},
      {"pretrain", "train the span trunk on answerable-only data"},
      {"train", "train a model (optionally from a pretrained trunk checkpoint)"},
      {"evaluate", "score a checkpoint: EM, F1, and answerability accuracy"},
      {"stats", "start/end probability statistics and the confidence-threshold sweep"},
      {"attn-dump", "export one example's context-query attention matrices"},
      {"count-params", "print trainable parameter counts per block"},
      {"shuffle", "re-pair questions with contexts from other articles"},
  };

  std::vector<SubState> subs(commands.size());
  for (std::size_t i = 0; i < commands.size(); ++i) {
    auto* sc = app.add_subcommand(commands[i].first, commands[i].second);
    SubState& st = subs[i];
    st.name = commands[i].first;
    st.values.resize(flag_defs().size());
    st.opts.resize(flag_defs().size());
    sc->add_option("--config", st.config_path, "sectioned key = value configuration file");
    sc->add_option("--set", st.sets, "generic override, e.g. --set model.model_blocks=7");
    for (std::size_t j = 0; j < flag_defs().size(); ++j)
      st.opts[j] = sc->add_option(flag_defs()[j].flag, st.values[j], flag_defs()[j].help);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    SubState* chosen = nullptr;
    for (auto& st : subs)
      if (app.got_subcommand(st.name)) chosen = &st;
    if (!chosen) throw equant::ConfigError("no command given");

    std::vector<equant::KeyOverride> overrides;
    for (const auto& s : chosen->sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos)
        throw equant::ConfigError("--set expects section.key=value, got '" + s + "'");
      std::string key = s.substr(0, eq);
      const std::string value = s.substr(eq + 1);
      const auto dot = key.find('.');
      std::string section = "run";
      if (dot != std::string::npos) {
        section = key.substr(0, dot);
        key = key.substr(dot + 1);
      }
      overrides.push_back({section, key, value});
    }
    for (std::size_t j = 0; j < flag_defs().size(); ++j)
      if (chosen->opts[j]->count() > 0)
        overrides.push_back({flag_defs()[j].section, flag_defs()[j].key, chosen->values[j]});

    const std::string file_text =
        chosen->config_path.empty() ? std::string() : read_file(chosen->config_path);
    const auto spec = equant::resolve_config(chosen->name, file_text, overrides);
    return equant::run(spec);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
    return 1;
  }
}
