#include "equant/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "equant/io.hpp"
#include "equant/rng.hpp"

namespace equant {

namespace {

using nlohmann::json;

bool is_space_byte(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// Bytes >= 0x80 (UTF-8 continuation/lead) count as letters, never punctuation.
bool is_punct_byte(unsigned char c) { return c < 0x80 && std::ispunct(c); }

}  // namespace

std::vector<Token> tokenize(const std::string& text) {
  std::vector<Token> out;
  const int n = static_cast<int>(text.size());
  int pos = 0;
  while (pos < n) {
    while (pos < n && is_space_byte(static_cast<unsigned char>(text[pos]))) ++pos;
    if (pos >= n) break;
    int chunk_end = pos;
    while (chunk_end < n && !is_space_byte(static_cast<unsigned char>(text[chunk_end]))) ++chunk_end;

    // peel leading and trailing punctuation into single-character tokens
    int s = pos, e = chunk_end;
    std::vector<Token> tail;
    while (s < e && is_punct_byte(static_cast<unsigned char>(text[s]))) {
      out.push_back({text.substr(static_cast<std::size_t>(s), 1), s, s + 1});
      ++s;
    }
    while (e > s && is_punct_byte(static_cast<unsigned char>(text[e - 1]))) {
      tail.push_back({text.substr(static_cast<std::size_t>(e) - 1, 1), e - 1, e});
      --e;
    }
    if (s < e) out.push_back({text.substr(static_cast<std::size_t>(s), static_cast<std::size_t>(e - s)), s, e});
    for (auto it = tail.rbegin(); it != tail.rend(); ++it) out.push_back(std::move(*it));
    pos = chunk_end;
  }
  return out;
}

std::pair<int, int> align_answer(const std::vector<Token>& tokens,
                                 const std::string& answer_text, int answer_start) {
  if (answer_text.empty()) throw ContractError("align_answer: empty answer text");
  const int a0 = answer_start;
  const int a1 = answer_start + static_cast<int>(answer_text.size());
  int first = -1, last = -1;
  for (int t = 0; t < static_cast<int>(tokens.size()); ++t) {
    if (tokens[t].end > a0 && tokens[t].start < a1) {
      if (first < 0) first = t;
      last = t;
    }
  }
  if (first < 0)
    throw AlignmentError("answer at characters [" + std::to_string(a0) + "," + std::to_string(a1) +
                         ") overlaps no token");
  return {first, last};
}

std::string span_text(const std::string& source, const std::vector<Token>& tokens, int i, int j) {
  if (i < 0 || j < i || j >= static_cast<int>(tokens.size()))
    throw ContractError("span_text: bad token span (" + std::to_string(i) + "," +
                        std::to_string(j) + ") over " + std::to_string(tokens.size()) + " tokens");
  return source.substr(static_cast<std::size_t>(tokens[static_cast<std::size_t>(i)].start),
                       static_cast<std::size_t>(tokens[static_cast<std::size_t>(j)].end -
                                                tokens[static_cast<std::size_t>(i)].start));
}

namespace {

const json& need(const json& obj, const char* key, const std::string& path) {
  if (!obj.is_object() || !obj.contains(key))
    throw ParseError(path + ": missing '" + key + "'");
  return obj.at(key);
}

std::string need_string(const json& obj, const char* key, const std::string& path) {
  const json& v = need(obj, key, path);
  if (!v.is_string()) throw ParseError(path + "." + key + ": expected a string");
  return v.get<std::string>();
}

}  // namespace

std::vector<QAExample> parse_squad(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("dataset json: ") + e.what());
  }
  const json& data = need(doc, "data", "<root>");
  if (!data.is_array()) throw ParseError("<root>.data: expected an array");

  std::vector<QAExample> out;
  for (std::size_t ai = 0; ai < data.size(); ++ai) {
    const std::string apath = "data[" + std::to_string(ai) + "]";
    const json& article = data[ai];
    const std::string title =
        article.is_object() && article.contains("title") && article["title"].is_string()
            ? article["title"].get<std::string>()
            : "article-" + std::to_string(ai);
    const json& paragraphs = need(article, "paragraphs", apath);
    if (!paragraphs.is_array()) throw ParseError(apath + ".paragraphs: expected an array");
    for (std::size_t pi = 0; pi < paragraphs.size(); ++pi) {
      const std::string ppath = apath + ".paragraphs[" + std::to_string(pi) + "]";
      const json& para = paragraphs[pi];
      const std::string context = need_string(para, "context", ppath);
      const auto context_tokens = tokenize(context);
      const json& qas = need(para, "qas", ppath);
      if (!qas.is_array()) throw ParseError(ppath + ".qas: expected an array");
      for (std::size_t qi = 0; qi < qas.size(); ++qi) {
        const std::string qpath = ppath + ".qas[" + std::to_string(qi) + "]";
        const json& qa = qas[qi];
        QAExample ex;
        ex.id = need_string(qa, "id", qpath);
        ex.question = need_string(qa, "question", qpath);
        ex.source_article = title;
        ex.question_article = title;
        ex.context = context;
        ex.context_tokens = context_tokens;
        ex.question_tokens = tokenize(ex.question);
        const bool impossible =
            qa.contains("is_impossible") && qa["is_impossible"].is_boolean() &&
            qa["is_impossible"].get<bool>();
        if (impossible) {
          ex.answerable = 0;
        } else {
          const json& answers = need(qa, "answers", qpath);
          if (!answers.is_array() || answers.empty())
            throw ParseError(qpath + ".answers: expected a non-empty array for an answerable question");
          for (std::size_t xi = 0; xi < answers.size(); ++xi) {
            const std::string xpath = qpath + ".answers[" + std::to_string(xi) + "]";
            ex.gold_answer_texts.push_back(need_string(answers[xi], "text", xpath));
          }
          const json& first = answers[0];
          const std::string text = first.at("text").get<std::string>();
          const json& startv = need(first, "answer_start", qpath + ".answers[0]");
          if (!startv.is_number_integer())
            throw ParseError(qpath + ".answers[0].answer_start: expected an integer");
          const int start = startv.get<int>();
          if (start < 0 || start + static_cast<int>(text.size()) > static_cast<int>(context.size()))
            throw AlignmentError("question " + ex.id + ": answer offsets [" + std::to_string(start) +
                                 "," + std::to_string(start + text.size()) + ") outside context of " +
                                 std::to_string(context.size()) + " characters");
          try {
            ex.answer_span = align_answer(context_tokens, text, start);
          } catch (const AlignmentError& e) {
            throw AlignmentError("question " + ex.id + ": " + e.what());
          }
          ex.answerable = 1;
        }
        out.push_back(std::move(ex));
      }
    }
  }
  return out;
}

std::vector<QAExample> load_squad(const std::filesystem::path& path) {
  auto is = io::open_input(path, false);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_squad(buf.str());
}

GloveMap load_glove(const std::filesystem::path& path, int dims) {
  if (dims <= 0) throw ConfigError("load_glove: dims must be positive");
  auto is = io::open_input(path, false);
  GloveMap out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string token;
    ls >> token;
    std::vector<float> vec;
    vec.reserve(static_cast<std::size_t>(dims));
    std::string field;
    while (static_cast<int>(vec.size()) < dims && ls >> field) {
      char* endp = nullptr;
      const float v = std::strtof(field.c_str(), &endp);
      if (endp == field.c_str() || *endp != '\0')
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + field + "'");
      vec.push_back(v);
    }
    if (static_cast<int>(vec.size()) < dims)
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected at least " +
                       std::to_string(dims) + " values, got " + std::to_string(vec.size()));
    out[token] = std::move(vec);  // later duplicates win, matching a plain reload
  }
  return out;
}

Vocabulary build_vocabulary(const std::vector<QAExample>& examples, const GloveMap& glove) {
  Vocabulary v;
  v.char_id_table.fill(0);
  auto add_token = [&](const std::string& w) {
    if (glove.count(w) && !v.word_ids.count(w)) {
      v.word_ids.emplace(w, 2 + static_cast<int>(v.words.size()));
      v.words.push_back(w);
    }
    for (unsigned char c : w)
      if (v.char_id_table[c] == 0) {
        v.char_id_table[c] = 2 + static_cast<int>(v.chars.size());
        v.chars.push_back(c);
      }
  };
  for (const auto& ex : examples) {
    for (const auto& t : ex.context_tokens) add_token(t.text);
    for (const auto& t : ex.question_tokens) add_token(t.text);
  }
  return v;
}

Tensor<float> build_word_embeddings(const Vocabulary& vocab, const GloveMap& glove, int dims) {
  auto table = Tensor<float>::zeros({vocab.word_count(), dims});
  auto tv = table.value();
  for (std::size_t w = 0; w < vocab.words.size(); ++w) {
    auto it = glove.find(vocab.words[w]);
    if (it == glove.end())
      throw ContractError("build_word_embeddings: vocabulary word '" + vocab.words[w] +
                          "' missing from embedding map");
    if (static_cast<int>(it->second.size()) < dims)
      throw ShapeError("build_word_embeddings: vector for '" + vocab.words[w] + "' shorter than " +
                       std::to_string(dims));
    const std::size_t row = (w + 2) * static_cast<std::size_t>(dims);
    for (int j = 0; j < dims; ++j) tv[row + static_cast<std::size_t>(j)] = it->second[static_cast<std::size_t>(j)];
  }
  return table;
}

void encode_examples(std::vector<QAExample>& examples, const Vocabulary& vocab, int word_cap) {
  if (word_cap <= 0) throw ConfigError("encode_examples: word cap must be positive");
  auto encode_side = [&](const std::vector<Token>& tokens, std::vector<int>& word_ids,
                         std::vector<std::vector<int>>& char_ids) {
    word_ids.clear();
    char_ids.clear();
    word_ids.reserve(tokens.size());
    char_ids.reserve(tokens.size());
    for (const auto& t : tokens) {
      word_ids.push_back(vocab.word_id(t.text));
      std::vector<int> cs;
      const int len = std::min<int>(word_cap, static_cast<int>(t.text.size()));
      cs.reserve(static_cast<std::size_t>(len));
      for (int k = 0; k < len; ++k)
        cs.push_back(vocab.char_id(static_cast<unsigned char>(t.text[static_cast<std::size_t>(k)])));
      char_ids.push_back(std::move(cs));
    }
  };
  for (auto& ex : examples) {
    encode_side(ex.context_tokens, ex.context_word_ids, ex.context_char_ids);
    encode_side(ex.question_tokens, ex.question_word_ids, ex.question_char_ids);
  }
}

std::vector<Batch> make_batches(const std::vector<QAExample>& examples, const Caps& caps,
                                int batch_size, bool for_training, std::uint64_t seed) {
  if (batch_size <= 0) throw ConfigError("make_batches: batch_size must be positive");
  std::vector<int> order;
  for (int i = 0; i < static_cast<int>(examples.size()); ++i) {
    const auto& ex = examples[static_cast<std::size_t>(i)];
    if (!ex.encoded()) throw ContractError("make_batches: example " + ex.id + " not encoded");
    if (ex.context_tokens.empty() || ex.question_tokens.empty())
      throw ContractError("make_batches: example " + ex.id + " has an empty side");
    if (for_training) {
      if (static_cast<int>(ex.context_tokens.size()) > caps.context) continue;
      if (static_cast<int>(ex.question_tokens.size()) > caps.question) continue;
    }
    order.push_back(i);
  }
  if (for_training) {
    Rng rng(seed);
    shuffle(rng, order);
  }

  std::vector<Batch> batches;
  for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(order.size(), at + static_cast<std::size_t>(batch_size));
    Batch b;
    b.size = static_cast<int>(stop - at);
    b.word_len = caps.word;
    for (std::size_t k = at; k < stop; ++k) {
      const auto& ex = examples[static_cast<std::size_t>(order[k])];
      b.context_len = std::max(b.context_len,
                               std::min(caps.context, static_cast<int>(ex.context_tokens.size())));
      b.question_len = std::max(b.question_len,
                                std::min(caps.question, static_cast<int>(ex.question_tokens.size())));
    }
    const auto fill_side = [&](const std::vector<int>& word_ids,
                               const std::vector<std::vector<int>>& char_ids, int len,
                               std::vector<int>& words, std::vector<int>& chars,
                               std::vector<std::uint8_t>& mask) {
      const int real = std::min(len, static_cast<int>(word_ids.size()));
      for (int t = 0; t < len; ++t) {
        const bool on = t < real;
        words.push_back(on ? word_ids[static_cast<std::size_t>(t)] : Vocabulary::kPad);
        mask.push_back(on ? 1 : 0);
        for (int c = 0; c < b.word_len; ++c) {
          int id = Vocabulary::kPad;
          if (on && c < static_cast<int>(char_ids[static_cast<std::size_t>(t)].size()))
            id = char_ids[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)];
          chars.push_back(id);
        }
      }
    };
    for (std::size_t k = at; k < stop; ++k) {
      const int idx = order[k];
      const auto& ex = examples[static_cast<std::size_t>(idx)];
      fill_side(ex.context_word_ids, ex.context_char_ids, b.context_len, b.context_words,
                b.context_chars, b.context_mask);
      fill_side(ex.question_word_ids, ex.question_char_ids, b.question_len, b.question_words,
                b.question_chars, b.question_mask);
      b.delta.push_back(ex.answerable);
      b.span_start.push_back(ex.answer_span ? ex.answer_span->first : -1);
      b.span_end.push_back(ex.answer_span ? ex.answer_span->second : -1);
      b.example_index.push_back(idx);
      b.ids.push_back(ex.id);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

std::vector<QAExample> shuffle_pairs(const std::vector<QAExample>& examples, std::uint64_t seed) {
  std::vector<std::string> articles;
  for (const auto& ex : examples)
    if (std::find(articles.begin(), articles.end(), ex.source_article) == articles.end())
      articles.push_back(ex.source_article);
  if (articles.size() < 2)
    throw ContractError("shuffle_pairs: need questions from at least 2 articles, found " +
                        std::to_string(articles.size()));
  Rng rng(seed);
  std::vector<QAExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    std::vector<int> donors;
    for (int i = 0; i < static_cast<int>(examples.size()); ++i)
      if (examples[static_cast<std::size_t>(i)].source_article != ex.source_article)
        donors.push_back(i);
    const auto& donor = examples[static_cast<std::size_t>(donors[static_cast<std::size_t>(
        rand_index(rng, donors.size()))])];
    QAExample pair = ex;
    pair.id = ex.id + "~" + donor.id;
    pair.question = donor.question;
    pair.question_article = donor.source_article;
    pair.question_tokens = donor.question_tokens;
    pair.question_word_ids = donor.question_word_ids;
    pair.question_char_ids = donor.question_char_ids;
    pair.answer_span.reset();
    pair.answerable = 0;
    pair.gold_answer_texts.clear();
    out.push_back(std::move(pair));
  }
  return out;
}

namespace {

constexpr char kCacheMagic[8] = {'E', 'Q', 'C', 'A', 'C', 'H', 'E', '1'};
constexpr std::uint32_t kCacheVersion = 1;

void write_tokens(std::ostream& os, const std::vector<Token>& toks) {
  io::write_u32(os, static_cast<std::uint32_t>(toks.size()));
  for (const auto& t : toks) {
    io::write_u32(os, static_cast<std::uint32_t>(t.start));
    io::write_u32(os, static_cast<std::uint32_t>(t.end));
  }
}

std::vector<Token> read_tokens(std::istream& is, const std::string& source) {
  const auto n = io::read_u32(is);
  std::vector<Token> toks(n);
  for (auto& t : toks) {
    t.start = static_cast<int>(io::read_u32(is));
    t.end = static_cast<int>(io::read_u32(is));
    if (t.start < 0 || t.end < t.start || t.end > static_cast<int>(source.size()))
      throw ParseError("cache: token offsets outside source text");
    t.text = source.substr(static_cast<std::size_t>(t.start),
                           static_cast<std::size_t>(t.end - t.start));
  }
  return toks;
}

void write_ints(std::ostream& os, const std::vector<int>& v) {
  io::write_u32(os, static_cast<std::uint32_t>(v.size()));
  for (int x : v) io::write_i32(os, x);
}

std::vector<int> read_ints(std::istream& is) {
  const auto n = io::read_u32(is);
  std::vector<int> v(n);
  for (auto& x : v) x = io::read_i32(is);
  return v;
}

}  // namespace

void save_cache(const std::filesystem::path& path, const CacheBundle& bundle) {
  io::atomic_write(path, [&](std::ostream& os) {
    io::write_bytes(os, kCacheMagic, sizeof(kCacheMagic));
    io::write_u32(os, kCacheVersion);
    io::write_u32(os, static_cast<std::uint32_t>(bundle.caps.context));
    io::write_u32(os, static_cast<std::uint32_t>(bundle.caps.question));
    io::write_u32(os, static_cast<std::uint32_t>(bundle.caps.word));

    const auto& v = bundle.vocab;
    io::write_u32(os, static_cast<std::uint32_t>(v.words.size()));
    for (const auto& w : v.words) io::write_str(os, w);
    io::write_u32(os, static_cast<std::uint32_t>(v.chars.size()));
    for (unsigned char c : v.chars) io::write_pod(os, c);

    io::write_u32(os, static_cast<std::uint32_t>(bundle.word_embeddings.dim(0)));
    io::write_u32(os, static_cast<std::uint32_t>(bundle.word_embeddings.dim(1)));
    for (float f : bundle.word_embeddings.value()) io::write_f32(os, f);

    io::write_u32(os, static_cast<std::uint32_t>(bundle.examples.size()));
    for (const auto& ex : bundle.examples) {
      io::write_str(os, ex.id);
      io::write_str(os, ex.source_article);
      io::write_str(os, ex.question_article);
      io::write_str(os, ex.context);
      io::write_str(os, ex.question);
      io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(ex.answerable));
      io::write_i32(os, ex.answer_span ? ex.answer_span->first : -1);
      io::write_i32(os, ex.answer_span ? ex.answer_span->second : -1);
      io::write_u32(os, static_cast<std::uint32_t>(ex.gold_answer_texts.size()));
      for (const auto& g : ex.gold_answer_texts) io::write_str(os, g);
      write_tokens(os, ex.context_tokens);
      write_tokens(os, ex.question_tokens);
      write_ints(os, ex.context_word_ids);
      write_ints(os, ex.question_word_ids);
      io::write_u32(os, static_cast<std::uint32_t>(ex.context_char_ids.size()));
      for (const auto& cs : ex.context_char_ids) write_ints(os, cs);
      io::write_u32(os, static_cast<std::uint32_t>(ex.question_char_ids.size()));
      for (const auto& cs : ex.question_char_ids) write_ints(os, cs);
    }
  });
}

CacheBundle load_cache(const std::filesystem::path& path) {
  auto is = io::open_input(path);
  char magic[8];
  io::read_bytes(is, magic, sizeof(magic));
  if (std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0)
    throw ParseError(path.string() + ": not a cache file (bad magic)");
  const auto version = io::read_u32(is);
  if (version != kCacheVersion)
    throw ParseError(path.string() + ": cache version " + std::to_string(version) +
                     " unsupported (want " + std::to_string(kCacheVersion) + ")");
  CacheBundle b;
  b.caps.context = static_cast<int>(io::read_u32(is));
  b.caps.question = static_cast<int>(io::read_u32(is));
  b.caps.word = static_cast<int>(io::read_u32(is));

  b.vocab.char_id_table.fill(0);
  const auto nwords = io::read_u32(is);
  for (std::uint32_t i = 0; i < nwords; ++i) {
    auto w = io::read_str(is);
    b.vocab.word_ids.emplace(w, 2 + static_cast<int>(b.vocab.words.size()));
    b.vocab.words.push_back(std::move(w));
  }
  const auto nchars = io::read_u32(is);
  for (std::uint32_t i = 0; i < nchars; ++i) {
    const auto c = io::read_pod<unsigned char>(is);
    b.vocab.char_id_table[c] = 2 + static_cast<int>(b.vocab.chars.size());
    b.vocab.chars.push_back(c);
  }

  const int rows = static_cast<int>(io::read_u32(is));
  const int dims = static_cast<int>(io::read_u32(is));
  std::vector<float> emb(static_cast<std::size_t>(rows) * static_cast<std::size_t>(dims));
  for (auto& f : emb) f = io::read_f32(is);
  b.word_embeddings = Tensor<float>::from({rows, dims}, std::move(emb));

  const auto count = io::read_u32(is);
  b.examples.resize(count);
  for (auto& ex : b.examples) {
    ex.id = io::read_str(is);
    ex.source_article = io::read_str(is);
    ex.question_article = io::read_str(is);
    ex.context = io::read_str(is);
    ex.question = io::read_str(is);
    ex.answerable = io::read_pod<std::uint8_t>(is);
    const int si = io::read_i32(is);
    const int sj = io::read_i32(is);
    if (si >= 0) ex.answer_span = {si, sj};
    const auto ngold = io::read_u32(is);
    ex.gold_answer_texts.resize(ngold);
    for (auto& g : ex.gold_answer_texts) g = io::read_str(is);
    ex.context_tokens = read_tokens(is, ex.context);
    ex.question_tokens = read_tokens(is, ex.question);
    ex.context_word_ids = read_ints(is);
    ex.question_word_ids = read_ints(is);
    ex.context_char_ids.resize(io::read_u32(is));
    for (auto& cs : ex.context_char_ids) cs = read_ints(is);
    ex.question_char_ids.resize(io::read_u32(is));
    for (auto& cs : ex.question_char_ids) cs = read_ints(is);
  }
  return b;
}

}  // namespace equant
