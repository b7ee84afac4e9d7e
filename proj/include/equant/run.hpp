#pragma once

// Command-line front end. A RunSpec names one command plus every knob it
// needs; resolve_config merges defaults, a sectioned config file, and flag
// overrides (flags win); run() dispatches into the library and writes all
// artifacts atomically, echoing the fully resolved configuration next to
// them so any run can be reproduced from its output directory alone.

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "equant/config.hpp"
#include "equant/corpus.hpp"
#include "equant/evaluation.hpp"

namespace equant {

struct RunSpec {
  std::string command;  // preprocess|pretrain|train|evaluate|stats|attn-dump|count-params|shuffle
  std::filesystem::path dataset;     // SQuAD-format JSON
  std::filesystem::path embeddings;  // GloVe-format text
  std::filesystem::path cache;       // preprocessed bundle (written by preprocess)
  std::filesystem::path checkpoint;  // input checkpoint
  std::filesystem::path out_dir;     // artifact directory
  Caps caps;                         // applied at preprocess time; later commands use the cached caps
  ModelConfig model;
  TrainConfig train;
  EvalMode eval_mode = EvalMode::v2;
  double threshold = -1.0;  // >= 0 switches evaluate to the confidence baseline
  ThresholdStat threshold_stat = ThresholdStat::product;
  std::string example;  // attn-dump target id
  AttentionCategory category = AttentionCategory::answerable;
  int start_iteration = 0;  // completed iterations behind the resume checkpoint
  int char_vocab = 128;     // char table size for count-params without a cache
  // model keys explicitly present in the file or flags; when a checkpoint
  // supplies the architecture these may only adjust the decision rule
  std::map<std::string, std::string> model_keys;

  void validate() const;  // command-specific required fields, inputs exist on disk
};

// {section, key, value} with section one of run|model|train.
using KeyOverride = std::array<std::string, 3>;

RunSpec resolve_config(const std::string& command, const std::string& file_text,
                       const std::vector<KeyOverride>& overrides);

// Full three-section echo; feeding it back through resolve_config rebuilds
// the same RunSpec (paths are absolutized so the echo is cwd-independent).
std::string serialize_run_spec(const RunSpec& spec);

// Executes the command and returns 0 with every artifact in place. Failures
// surface as exceptions for the binary to turn into a one-line error.
int run(const RunSpec& spec);

}  // namespace equant
