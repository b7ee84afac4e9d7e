#pragma once

// Architecture hyperparameters. Defaults follow the published configuration:
// 300-d frozen word vectors + 96 char-conv features -> 396-wide embedding,
// hidden size 96, single-head attention, and the three answerability-head
// variants. Everything is overridable so reduced-width experiments stay in
// the same code path.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "equant/errors.hpp"

namespace equant {

enum class HeadVariant { none, equant1, equant2, equant3 };

inline std::string to_string(HeadVariant h) {
  switch (h) {
    case HeadVariant::none: return "none";
    case HeadVariant::equant1: return "equant1";
    case HeadVariant::equant2: return "equant2";
    case HeadVariant::equant3: return "equant3";
  }
  return "none";
}

inline HeadVariant head_variant_from_string(const std::string& s) {
  if (s == "none") return HeadVariant::none;
  if (s == "equant1") return HeadVariant::equant1;
  if (s == "equant2") return HeadVariant::equant2;
  if (s == "equant3") return HeadVariant::equant3;
  throw ConfigError("unknown head variant '" + s + "' (want none|equant1|equant2|equant3)");
}

struct ModelConfig {
  int word_dim = 300;
  int char_dim = 64;
  int char_conv_out = 96;
  int char_conv_kernel = 5;
  int hidden = 96;
  int attention_heads = 1;
  HeadVariant head_variant = HeadVariant::none;

  // encoder geometry
  int embed_blocks = 1;
  int embed_convs = 4;
  int embed_kernel = 7;
  int model_blocks = 7;
  int model_convs = 2;
  int model_kernel = 5;

  // answerability heads
  int head_enc_blocks = 2;             // encoder blocks prepended in variants 2 and 3
  int head1_channels1 = 8;
  int head1_channels2 = 16;
  int head1_kernel = 3;
  int head2_channels1 = 8;
  int head2_channels2 = 16;
  int head2_kernel = 5;
  int head3_mid1 = 48;
  int head3_mid2 = 24;
  bool head_reads_fused = false;       // heads 2/3 read M0 unless this is set
  bool head1_raw_similarity = false;   // head 1 reads row-softmaxed weights unless set
  bool head_stop_gradient = false;     // block head gradients from the trunk

  // prediction rule
  int span_length_cap = 30;
  double answerability_threshold = 0.5;
  int equant2_pad_length = 400;

  int embed_dim() const { return word_dim + char_conv_out; }

  void validate() const {
    auto positive = [](long long v, const char* name) {
      if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(word_dim, "word_dim");
    positive(char_dim, "char_dim");
    positive(char_conv_out, "char_conv_out");
    positive(char_conv_kernel, "char_conv_kernel");
    positive(hidden, "hidden");
    positive(attention_heads, "attention_heads");
    positive(embed_blocks, "embed_blocks");
    positive(embed_convs, "embed_convs");
    positive(embed_kernel, "embed_kernel");
    positive(model_blocks, "model_blocks");
    positive(model_convs, "model_convs");
    positive(model_kernel, "model_kernel");
    positive(head_enc_blocks, "head_enc_blocks");
    positive(equant2_pad_length, "equant2_pad_length");
    if (hidden % attention_heads != 0)
      throw ConfigError("attention_heads (" + std::to_string(attention_heads) +
                        ") must divide hidden (" + std::to_string(hidden) + ")");
    if (span_length_cap < 0) throw ConfigError("span_length_cap must be non-negative");
    if (answerability_threshold < 0.0 || answerability_threshold > 1.0)
      throw ConfigError("answerability_threshold must lie in [0,1]");
    if (char_conv_kernel % 2 == 0 || embed_kernel % 2 == 0 || model_kernel % 2 == 0 ||
        head1_kernel % 2 == 0 || head2_kernel % 2 == 0)
      throw ConfigError("convolution kernel widths must be odd");
  }
};

struct TrainConfig {
  int batch_size = 32;
  double lr = 0.001;
  double beta1 = 0.8;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  double clip_norm = 5.0;   // <= 0 disables clipping
  int warmup_steps = 1000;  // <= 0 disables the linear ramp
  double dropout = 0.1;
  int max_iterations = 1000;
  int checkpoint_interval = 100;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (lr < 0.0) throw ConfigError("lr must be non-negative");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("beta1/beta2 must lie in [0,1)");
    if (epsilon <= 0.0) throw ConfigError("epsilon must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
    if (max_iterations <= 0) throw ConfigError("max_iterations must be positive");
    if (checkpoint_interval <= 0) throw ConfigError("checkpoint_interval must be positive");
  }
};

// Flat key=value serialization, used by checkpoints and run config files.
// Parsers start from defaults, reject unknown keys, and round-trip exactly.
std::string serialize_model_config(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& text);
std::string serialize_train_config(const TrainConfig& cfg);
TrainConfig parse_train_config(const std::string& text);

// Shared low-level helpers (also used by the command-line config reader).
std::vector<std::pair<std::string, std::string>> parse_kv_lines(const std::string& text);
int parse_int_value(const std::string& key, const std::string& value);
double parse_double_value(const std::string& key, const std::string& value);
bool parse_bool_value(const std::string& key, const std::string& value);
std::uint64_t parse_u64_value(const std::string& key, const std::string& value);
std::string format_double(double v);

}  // namespace equant
