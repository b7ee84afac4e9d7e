#pragma once

// Dataset ingestion: SQuAD-format parsing, rule-based tokenization with
// exact character offsets, answer-span alignment, GloVe loading, index
// encoding, batching with padding/masks, cross-article pair shuffling, and
// a versioned binary cache.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "equant/tensor.hpp"

namespace equant {

struct Token {
  std::string text;
  int start = 0;  // character offsets into the source string, [start, end)
  int end = 0;
};

struct QAExample {
  std::string id;
  std::string source_article;    // article the context came from
  std::string question_article;  // article the question came from
  std::string context;
  std::string question;
  std::vector<Token> context_tokens;
  std::vector<Token> question_tokens;
  std::optional<std::pair<int, int>> answer_span;  // token indices, i <= j
  int answerable = 0;                              // delta
  std::vector<std::string> gold_answer_texts;
  // index-encoded forms, filled by encode_examples
  std::vector<int> context_word_ids;
  std::vector<int> question_word_ids;
  std::vector<std::vector<int>> context_char_ids;   // per token, capped length
  std::vector<std::vector<int>> question_char_ids;

  bool encoded() const {
    return context_word_ids.size() == context_tokens.size() &&
           question_word_ids.size() == question_tokens.size();
  }
};

// Length limits applied at encode/batch time.
struct Caps {
  int context = 400;
  int question = 50;
  int word = 16;
};

struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kOov = 1;

  std::vector<std::string> words;    // real words in first-seen order; id = 2 + position
  std::vector<unsigned char> chars;  // real bytes in first-seen order; id = 2 + position
  std::unordered_map<std::string, int> word_ids;
  std::array<int, 256> char_id_table{};  // 0 means unmapped

  int word_id(const std::string& w) const {
    auto it = word_ids.find(w);
    return it == word_ids.end() ? kOov : it->second;
  }
  int char_id(unsigned char c) const {
    const int id = char_id_table[c];
    return id == 0 ? kOov : id;
  }
  int word_count() const { return static_cast<int>(words.size()) + 2; }
  int char_count() const { return static_cast<int>(chars.size()) + 2; }
};

using GloveMap = std::unordered_map<std::string, std::vector<float>>;

// One padded batch; arrays are row-major [size x len] or [size x len x word].
struct Batch {
  int size = 0;
  int context_len = 0;
  int question_len = 0;
  int word_len = 0;
  std::vector<int> context_words;
  std::vector<int> question_words;
  std::vector<int> context_chars;
  std::vector<int> question_chars;
  std::vector<std::uint8_t> context_mask;
  std::vector<std::uint8_t> question_mask;
  std::vector<int> span_start;  // -1 sentinel when delta = 0
  std::vector<int> span_end;
  std::vector<int> delta;
  std::vector<int> example_index;  // into the source example list
  std::vector<std::string> ids;
};

std::vector<Token> tokenize(const std::string& text);

std::vector<QAExample> parse_squad(const std::string& json_text);
std::vector<QAExample> load_squad(const std::filesystem::path& path);

// Minimal token span covering [answer_start, answer_start + |answer_text|).
std::pair<int, int> align_answer(const std::vector<Token>& tokens,
                                 const std::string& answer_text, int answer_start);

// Exact source substring spanned by tokens [i, j].
std::string span_text(const std::string& source, const std::vector<Token>& tokens, int i, int j);

GloveMap load_glove(const std::filesystem::path& path, int dims);

Vocabulary build_vocabulary(const std::vector<QAExample>& examples, const GloveMap& glove);

// Frozen word table: row 0 pad, row 1 OOV (both zero), then GloVe values.
Tensor<float> build_word_embeddings(const Vocabulary& vocab, const GloveMap& glove, int dims);

void encode_examples(std::vector<QAExample>& examples, const Vocabulary& vocab, int word_cap);

// Training batches filter over-cap examples and shuffle by seed; evaluation
// batches keep every example in order, truncating to the caps.
std::vector<Batch> make_batches(const std::vector<QAExample>& examples, const Caps& caps,
                                int batch_size, bool for_training, std::uint64_t seed);

// Pairs every context with a question drawn from a different article.
std::vector<QAExample> shuffle_pairs(const std::vector<QAExample>& examples, std::uint64_t seed);

struct CacheBundle {
  std::vector<QAExample> examples;
  Vocabulary vocab;
  Tensor<float> word_embeddings;
  Caps caps;
};

void save_cache(const std::filesystem::path& path, const CacheBundle& bundle);
CacheBundle load_cache(const std::filesystem::path& path);

}  // namespace equant
