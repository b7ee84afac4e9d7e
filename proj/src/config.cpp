#include "equant/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <set>

namespace equant {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_kv_lines(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::set<std::string> seen;
  std::size_t pos = 0;
  int lineno = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value, got '" + t +
                        "'");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!seen.insert(key).second)
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    out.emplace_back(key, value);
  }
  return out;
}

int parse_int_value(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  long v = std::strtol(value.c_str(), &end, 10);
  if (errno != 0 || end == value.c_str() || *end != '\0')
    throw ConfigError("key '" + key + "': expected an integer, got '" + value + "'");
  return static_cast<int>(v);
}

std::uint64_t parse_u64_value(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  unsigned long long v = std::strtoull(value.c_str(), &end, 10);
  if (errno != 0 || end == value.c_str() || *end != '\0' || value.find('-') != std::string::npos)
    throw ConfigError("key '" + key + "': expected an unsigned integer, got '" + value + "'");
  return static_cast<std::uint64_t>(v);
}

double parse_double_value(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(value.c_str(), &end);
  if (errno != 0 || end == value.c_str() || *end != '\0')
    throw ConfigError("key '" + key + "': expected a number, got '" + value + "'");
  return v;
}

bool parse_bool_value(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + value + "'");
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string serialize_model_config(const ModelConfig& c) {
  std::string s;
  auto put = [&](const char* k, const std::string& v) { s += std::string(k) + " = " + v + "\n"; };
  auto puti = [&](const char* k, long long v) { put(k, std::to_string(v)); };
  auto putb = [&](const char* k, bool v) { put(k, v ? "true" : "false"); };
  puti("word_dim", c.word_dim);
  puti("char_dim", c.char_dim);
  puti("char_conv_out", c.char_conv_out);
  puti("char_conv_kernel", c.char_conv_kernel);
  puti("hidden", c.hidden);
  puti("attention_heads", c.attention_heads);
  put("head_variant", to_string(c.head_variant));
  puti("embed_blocks", c.embed_blocks);
  puti("embed_convs", c.embed_convs);
  puti("embed_kernel", c.embed_kernel);
  puti("model_blocks", c.model_blocks);
  puti("model_convs", c.model_convs);
  puti("model_kernel", c.model_kernel);
  puti("head_enc_blocks", c.head_enc_blocks);
  puti("head1_channels1", c.head1_channels1);
  puti("head1_channels2", c.head1_channels2);
  puti("head1_kernel", c.head1_kernel);
  puti("head2_channels1", c.head2_channels1);
  puti("head2_channels2", c.head2_channels2);
  puti("head2_kernel", c.head2_kernel);
  puti("head3_mid1", c.head3_mid1);
  puti("head3_mid2", c.head3_mid2);
  putb("head_reads_fused", c.head_reads_fused);
  putb("head1_raw_similarity", c.head1_raw_similarity);
  putb("head_stop_gradient", c.head_stop_gradient);
  puti("span_length_cap", c.span_length_cap);
  put("answerability_threshold", format_double(c.answerability_threshold));
  puti("equant2_pad_length", c.equant2_pad_length);
  return s;
}

ModelConfig parse_model_config(const std::string& text) {
  ModelConfig c;
  for (const auto& [k, v] : parse_kv_lines(text)) {
    if (k == "word_dim") c.word_dim = parse_int_value(k, v);
    else if (k == "char_dim") c.char_dim = parse_int_value(k, v);
    else if (k == "char_conv_out") c.char_conv_out = parse_int_value(k, v);
    else if (k == "char_conv_kernel") c.char_conv_kernel = parse_int_value(k, v);
    else if (k == "hidden") c.hidden = parse_int_value(k, v);
    else if (k == "attention_heads") c.attention_heads = parse_int_value(k, v);
    else if (k == "head_variant") c.head_variant = head_variant_from_string(v);
    else if (k == "embed_blocks") c.embed_blocks = parse_int_value(k, v);
    else if (k == "embed_convs") c.embed_convs = parse_int_value(k, v);
    else if (k == "embed_kernel") c.embed_kernel = parse_int_value(k, v);
    else if (k == "model_blocks") c.model_blocks = parse_int_value(k, v);
    else if (k == "model_convs") c.model_convs = parse_int_value(k, v);
    else if (k == "model_kernel") c.model_kernel = parse_int_value(k, v);
    else if (k == "head_enc_blocks") c.head_enc_blocks = parse_int_value(k, v);
    else if (k == "head1_channels1") c.head1_channels1 = parse_int_value(k, v);
    else if (k == "head1_channels2") c.head1_channels2 = parse_int_value(k, v);
    else if (k == "head1_kernel") c.head1_kernel = parse_int_value(k, v);
    else if (k == "head2_channels1") c.head2_channels1 = parse_int_value(k, v);
    else if (k == "head2_channels2") c.head2_channels2 = parse_int_value(k, v);
    else if (k == "head2_kernel") c.head2_kernel = parse_int_value(k, v);
    else if (k == "head3_mid1") c.head3_mid1 = parse_int_value(k, v);
    else if (k == "head3_mid2") c.head3_mid2 = parse_int_value(k, v);
    else if (k == "head_reads_fused") c.head_reads_fused = parse_bool_value(k, v);
    else if (k == "head1_raw_similarity") c.head1_raw_similarity = parse_bool_value(k, v);
    else if (k == "head_stop_gradient") c.head_stop_gradient = parse_bool_value(k, v);
    else if (k == "span_length_cap") c.span_length_cap = parse_int_value(k, v);
    else if (k == "answerability_threshold") c.answerability_threshold = parse_double_value(k, v);
    else if (k == "equant2_pad_length") c.equant2_pad_length = parse_int_value(k, v);
    else throw ConfigError("unknown model config key '" + k + "'");
  }
  c.validate();
  return c;
}

std::string serialize_train_config(const TrainConfig& c) {
  std::string s;
  auto put = [&](const char* k, const std::string& v) { s += std::string(k) + " = " + v + "\n"; };
  put("batch_size", std::to_string(c.batch_size));
  put("lr", format_double(c.lr));
  put("beta1", format_double(c.beta1));
  put("beta2", format_double(c.beta2));
  put("epsilon", format_double(c.epsilon));
  put("clip_norm", format_double(c.clip_norm));
  put("warmup_steps", std::to_string(c.warmup_steps));
  put("dropout", format_double(c.dropout));
  put("max_iterations", std::to_string(c.max_iterations));
  put("checkpoint_interval", std::to_string(c.checkpoint_interval));
  put("seed", std::to_string(c.seed));
  return s;
}

TrainConfig parse_train_config(const std::string& text) {
  TrainConfig c;
  for (const auto& [k, v] : parse_kv_lines(text)) {
    if (k == "batch_size") c.batch_size = parse_int_value(k, v);
    else if (k == "lr") c.lr = parse_double_value(k, v);
    else if (k == "beta1") c.beta1 = parse_double_value(k, v);
    else if (k == "beta2") c.beta2 = parse_double_value(k, v);
    else if (k == "epsilon") c.epsilon = parse_double_value(k, v);
    else if (k == "clip_norm") c.clip_norm = parse_double_value(k, v);
    else if (k == "warmup_steps") c.warmup_steps = parse_int_value(k, v);
    else if (k == "dropout") c.dropout = parse_double_value(k, v);
    else if (k == "max_iterations") c.max_iterations = parse_int_value(k, v);
    else if (k == "checkpoint_interval") c.checkpoint_interval = parse_int_value(k, v);
    else if (k == "seed") c.seed = parse_u64_value(k, v);
    else throw ConfigError("unknown train config key '" + k + "'");
  }
  c.validate();
  return c;
}

}  // namespace equant
