#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <json.hpp>

#include "equant/corpus.hpp"
#include "equant/errors.hpp"
#include "testutil.hpp"

using namespace equant;
using nlohmann::json;

namespace {

json make_qa(const std::string& id, const std::string& question, const json& answers,
             std::optional<bool> impossible = std::nullopt) {
  json qa = {{"id", id}, {"question", question}, {"answers", answers}};
  if (impossible) qa["is_impossible"] = *impossible;
  return qa;
}

json make_doc(const std::vector<std::pair<std::string, json>>& articles) {
  json data = json::array();
  for (const auto& [title, paragraphs] : articles)
    data.push_back({{"title", title}, {"paragraphs", paragraphs}});
  return {{"data", data}};
}

std::filesystem::path write_file(const std::filesystem::path& dir, const std::string& name,
                                 const std::string& body) {
  auto p = dir / name;
  std::ofstream os(p);
  os << body;
  return p;
}

const std::string kContext = "Tesla moved to the city in 1871.";

}  // namespace

TEST_CASE("tokenizer splits words and peels boundary punctuation") {
  auto toks = tokenize("in 1871.");
  REQUIRE(toks.size() == 3);
  CHECK(toks[0].text == "in");
  CHECK(toks[0].start == 0);
  CHECK(toks[0].end == 2);
  CHECK(toks[1].text == "1871");
  CHECK(toks[1].start == 3);
  CHECK(toks[1].end == 7);
  CHECK(toks[2].text == ".");
  CHECK(toks[2].start == 7);
  CHECK(toks[2].end == 8);
}

TEST_CASE("tokenizer handles empty input and nested punctuation order") {
  CHECK(tokenize("").empty());
  auto toks = tokenize("(cat).");
  REQUIRE(toks.size() == 4);
  CHECK(toks[0].text == "(");
  CHECK(toks[1].text == "cat");
  CHECK(toks[2].text == ")");
  CHECK(toks[3].text == ".");
}

TEST_CASE("token offsets reproduce their exact source substrings") {
  const std::string text = "  Dr. O'Neil-Smith paid $4,000 (cash!) -- no refund. \xc3\xa9tude ";
  auto toks = tokenize(text);
  CHECK(!toks.empty());
  int prev_end = -1;
  for (const auto& t : toks) {
    CHECK(text.substr(static_cast<std::size_t>(t.start),
                      static_cast<std::size_t>(t.end - t.start)) == t.text);
    CHECK(t.start >= prev_end);
    CHECK(t.start < t.end);
    prev_end = t.end;
  }
}

TEST_CASE("multibyte characters are kept inside their word") {
  auto toks = tokenize("caf\xc3\xa9.");
  REQUIRE(toks.size() == 2);
  CHECK(toks[0].text == "caf\xc3\xa9");
  CHECK(toks[1].text == ".");
}

TEST_CASE("answer alignment finds the minimal covering token span") {
  auto toks = tokenize("The cat sat");
  CHECK(align_answer(toks, "cat", 4) == std::pair{1, 1});
  CHECK(align_answer(toks, "The cat sat", 0) == std::pair{0, 2});
  CHECK(align_answer(toks, "cat sat", 4) == std::pair{1, 2});
  // offset inside a token still selects it
  CHECK(align_answer(toks, "at", 5) == std::pair{1, 1});
  CHECK_THROWS_AS(align_answer(toks, "", 0), ContractError);
}

TEST_CASE("parsing a v1 document yields one answerable example") {
  auto doc = make_doc({{"Nikola_Tesla",
                        json::array({{{"context", kContext},
                                      {"qas", json::array({make_qa(
                                                 "q1", "When did Tesla move?",
                                                 json::array({{{"text", "1871"},
                                                               {"answer_start", 27}}}))})}}})}});
  auto exs = parse_squad(doc.dump());
  REQUIRE(exs.size() == 1);
  const auto& ex = exs[0];
  CHECK(ex.id == "q1");
  CHECK(ex.answerable == 1);
  REQUIRE(ex.answer_span.has_value());
  CHECK(ex.answer_span->first == 6);
  CHECK(ex.answer_span->second == 6);
  CHECK(ex.gold_answer_texts == std::vector<std::string>{"1871"});
  CHECK(ex.source_article == "Nikola_Tesla");
  CHECK(span_text(ex.context, ex.context_tokens, 6, 6) == "1871");
}

TEST_CASE("impossible questions carry no span and delta zero") {
  auto doc = make_doc({{"T",
                        json::array({{{"context", kContext},
                                      {"qas", json::array({make_qa("q2", "What city?",
                                                                   json::array(), true)})}}})}});
  auto exs = parse_squad(doc.dump());
  REQUIRE(exs.size() == 1);
  CHECK(exs[0].answerable == 0);
  CHECK_FALSE(exs[0].answer_span.has_value());
  CHECK(exs[0].gold_answer_texts.empty());
}

TEST_CASE("empty data array parses to an empty list") {
  CHECK(parse_squad(R"({"data": []})").empty());
}

TEST_CASE("malformed documents name the offending record") {
  CHECK_THROWS_AS(parse_squad("{}"), ParseError);
  CHECK_THROWS_AS(parse_squad(R"({"data": [{}]})"), ParseError);
  try {
    parse_squad(R"({"data": [{"title":"t","paragraphs":[{"context":"x","qas":[{"question":"?"}]}]}]})");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("data[0].paragraphs[0].qas[0]") != std::string::npos);
  }
}

TEST_CASE("answer offsets outside the context raise an alignment error naming the id") {
  auto doc = make_doc({{"T",
                        json::array({{{"context", "short"},
                                      {"qas", json::array({make_qa(
                                                 "bad-q", "?",
                                                 json::array({{{"text", "missing"},
                                                               {"answer_start", 99}}}))})}}})}});
  try {
    parse_squad(doc.dump());
    FAIL("expected an alignment error");
  } catch (const AlignmentError& e) {
    CHECK(std::string(e.what()).find("bad-q") != std::string::npos);
  }
}

TEST_CASE("embedding file loads exactly and truncates long vectors") {
  auto dir = testutil::scratch_dir("glove");
  auto path = write_file(dir, "vecs.txt",
                         "tesla 0.1 0.2 0.3\n"
                         "moved 1.5 -2.25 3.125 9.0 9.0\n");
  auto g3 = load_glove(path, 3);
  REQUIRE(g3.size() == 2);
  CHECK(g3.at("tesla") == std::vector<float>{0.1f, 0.2f, 0.3f});
  CHECK(g3.at("moved") == std::vector<float>{1.5f, -2.25f, 3.125f});
  auto g2 = load_glove(path, 2);  // truncation keeps the leading values
  CHECK(g2.at("moved") == std::vector<float>{1.5f, -2.25f});
  auto bad = write_file(dir, "bad.txt", "tok 1.0\n");
  try {
    load_glove(bad, 3);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find(":1") != std::string::npos);
  }
}

TEST_CASE("vocabulary reserves pad and OOV and maps known tokens") {
  auto doc = make_doc({{"T",
                        json::array({{{"context", "alpha beta gamma"},
                                      {"qas", json::array({make_qa(
                                                 "q", "beta?",
                                                 json::array({{{"text", "beta"},
                                                               {"answer_start", 6}}}))})}}})}});
  auto exs = parse_squad(doc.dump());
  GloveMap glove = {{"alpha", {1.f, 2.f}}, {"beta", {3.f, 4.f}}, {"unused", {9.f, 9.f}}};
  auto vocab = build_vocabulary(exs, glove);
  CHECK(vocab.word_id("alpha") >= 2);
  CHECK(vocab.word_id("beta") >= 2);
  CHECK(vocab.word_id("gamma") == Vocabulary::kOov);   // not in the embedding file
  CHECK(vocab.word_id("unused") == Vocabulary::kOov);  // not in the corpus
  CHECK(vocab.word_count() == 2 + 2);                  // alpha and beta only
  CHECK(vocab.char_id('a') >= 2);
  CHECK(vocab.char_id('\x01') == Vocabulary::kOov);

  auto emb = build_word_embeddings(vocab, glove, 2);
  CHECK(emb.dim(0) == vocab.word_count());
  CHECK(emb.value()[0] == 0.f);  // pad row
  CHECK(emb.value()[2] == 0.f);  // OOV row
  const int aid = vocab.word_id("alpha");
  CHECK(emb.value()[static_cast<std::size_t>(aid) * 2] == 1.f);
  CHECK(emb.value()[static_cast<std::size_t>(aid) * 2 + 1] == 2.f);
  CHECK_FALSE(emb.requires_grad());
}

TEST_CASE("encoding truncates characters at the word cap") {
  auto doc = make_doc({{"T",
                        json::array({{{"context", "abcdefgh xy"},
                                      {"qas", json::array({make_qa(
                                                 "q", "xy?",
                                                 json::array({{{"text", "xy"},
                                                               {"answer_start", 9}}}))})}}})}});
  auto exs = parse_squad(doc.dump());
  GloveMap glove = {{"abcdefgh", {1.f}}, {"xy", {2.f}}};
  auto vocab = build_vocabulary(exs, glove);
  encode_examples(exs, vocab, 4);
  REQUIRE(exs[0].encoded());
  CHECK(exs[0].context_char_ids[0].size() == 4);  // truncated from 8
  CHECK(exs[0].context_char_ids[1].size() == 2);
}

namespace {

std::vector<QAExample> batch_fixture(int n_questions) {
  json qas = json::array();
  for (int i = 0; i < n_questions; ++i)
    qas.push_back(make_qa("q" + std::to_string(i), "where is tok" + std::to_string(i) + "?",
                          json::array({{{"text", "tok0"}, {"answer_start", 0}}})));
  auto doc = make_doc({{"T", json::array({{{"context", "tok0 tok1 tok2 tok3 tok4 tok5"},
                                           {"qas", qas}}})}});
  auto exs = parse_squad(doc.dump());
  GloveMap glove;
  for (int i = 0; i < 6; ++i) glove["tok" + std::to_string(i)] = {1.f, 0.f};
  auto vocab = build_vocabulary(exs, glove);
  encode_examples(exs, vocab, 16);
  return exs;
}

}  // namespace

TEST_CASE("batching chunks five examples into sizes 2, 2, 1") {
  auto exs = batch_fixture(5);
  Caps caps;
  auto batches = make_batches(exs, caps, 2, false, 0);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size == 2);
  CHECK(batches[1].size == 2);
  CHECK(batches[2].size == 1);
  // evaluation batching is lossless and ordered
  std::vector<int> seen;
  for (const auto& b : batches)
    for (int idx : b.example_index) seen.push_back(idx);
  CHECK(seen == std::vector<int>{0, 1, 2, 3, 4});
}

TEST_CASE("batch arrays carry masks that mark exactly the real positions") {
  auto exs = batch_fixture(3);
  Caps caps;
  auto batches = make_batches(exs, caps, 4, false, 0);
  REQUIRE(batches.size() == 1);
  const auto& b = batches[0];
  CHECK(b.context_len == 6);
  for (int e = 0; e < b.size; ++e)
    for (int t = 0; t < b.context_len; ++t) {
      const auto at = static_cast<std::size_t>(e * b.context_len + t);
      if (b.context_mask[at]) {
        CHECK(b.context_words[at] != Vocabulary::kPad);
      } else {
        CHECK(b.context_words[at] == Vocabulary::kPad);
      }
    }
  CHECK(b.delta == std::vector<int>{1, 1, 1});
  CHECK(b.span_start == std::vector<int>{0, 0, 0});
}

TEST_CASE("training batches shuffle deterministically and filter over-cap examples") {
  auto exs = batch_fixture(8);
  Caps caps;
  caps.question = 3;  // questions have 5 tokens -> everything filtered
  CHECK(make_batches(exs, caps, 4, true, 1).empty());
  caps.question = 50;
  caps.context = 3;  // context has 6 tokens -> filtered from training
  CHECK(make_batches(exs, caps, 4, true, 1).empty());
  // but kept (truncated) for evaluation
  auto eval = make_batches(exs, caps, 4, false, 1);
  CHECK(!eval.empty());
  CHECK(eval[0].context_len == 3);

  Caps open;
  auto a = make_batches(exs, open, 4, true, 42);
  auto b = make_batches(exs, open, 4, true, 42);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].example_index == b[i].example_index);
  auto c = make_batches(exs, open, 4, true, 43);
  bool same = true;
  for (std::size_t i = 0; i < a.size() && same; ++i) same = a[i].example_index == c[i].example_index;
  CHECK_FALSE(same);
}

TEST_CASE("unencoded examples are rejected at batch time") {
  auto doc = make_doc({{"T",
                        json::array({{{"context", "a b"},
                                      {"qas", json::array({make_qa(
                                                 "q", "?",
                                                 json::array({{{"text", "a"},
                                                               {"answer_start", 0}}}))})}}})}});
  auto exs = parse_squad(doc.dump());
  CHECK_THROWS_AS(make_batches(exs, Caps{}, 2, false, 0), ContractError);
}

namespace {

std::vector<QAExample> two_article_fixture() {
  auto doc = make_doc(
      {{"ArticleA",
        json::array({{{"context", "alpha beta"},
                      {"qas", json::array({make_qa("a1", "alpha question?",
                                                   json::array({{{"text", "alpha"},
                                                                 {"answer_start", 0}}}))})}}})},
       {"ArticleB",
        json::array({{{"context", "gamma delta"},
                      {"qas", json::array({make_qa("b1", "gamma question?",
                                                   json::array({{{"text", "gamma"},
                                                                 {"answer_start", 0}}}))})}}})}});
  auto exs = parse_squad(doc.dump());
  GloveMap glove = {{"alpha", {1.f}}, {"beta", {1.f}}, {"gamma", {1.f}}, {"delta", {1.f}}};
  auto vocab = build_vocabulary(exs, glove);
  encode_examples(exs, vocab, 16);
  return exs;
}

}  // namespace

TEST_CASE("pair shuffling swaps questions across articles") {
  auto exs = two_article_fixture();
  auto shuffled = shuffle_pairs(exs, 5);
  REQUIRE(shuffled.size() == 2);
  // with exactly two articles each context must take the other's question
  CHECK(shuffled[0].question == "gamma question?");
  CHECK(shuffled[1].question == "alpha question?");
  for (const auto& ex : shuffled) {
    CHECK(ex.answerable == 0);
    CHECK_FALSE(ex.answer_span.has_value());
    CHECK(ex.gold_answer_texts.empty());
    CHECK(ex.question_article != ex.source_article);
    CHECK(ex.encoded());
  }
}

TEST_CASE("pair shuffling over many examples never pairs within an article") {
  std::vector<std::pair<std::string, json>> arts;
  for (int a = 0; a < 3; ++a) {
    json qas = json::array();
    for (int q = 0; q < 4; ++q)
      qas.push_back(make_qa("a" + std::to_string(a) + "q" + std::to_string(q),
                            "question " + std::to_string(a), json::array(), true));
    arts.push_back({"Art" + std::to_string(a),
                    json::array({{{"context", "w x y z"}, {"qas", qas}}})});
  }
  auto exs = parse_squad(make_doc(arts).dump());
  encode_examples(exs, build_vocabulary(exs, {}), 16);
  auto shuffled = shuffle_pairs(exs, 9);
  CHECK(shuffled.size() == exs.size());
  for (const auto& ex : shuffled) CHECK(ex.question_article != ex.source_article);
  // deterministic under the seed
  auto again = shuffle_pairs(exs, 9);
  for (std::size_t i = 0; i < shuffled.size(); ++i) CHECK(shuffled[i].id == again[i].id);
}

TEST_CASE("pair shuffling demands at least two articles") {
  auto doc = make_doc({{"Only",
                        json::array({{{"context", "a b"},
                                      {"qas", json::array({make_qa("q", "?", json::array(),
                                                                   true)})}}})}});
  auto exs = parse_squad(doc.dump());
  CHECK_THROWS_AS(shuffle_pairs(exs, 0), ContractError);
}

TEST_CASE("cache round-trips examples, vocabulary and embeddings bitwise") {
  auto exs = two_article_fixture();
  GloveMap glove = {{"alpha", {1.5f}}, {"beta", {-2.25f}}, {"gamma", {0.125f}}, {"delta", {3.f}}};
  auto vocab = build_vocabulary(exs, glove);
  CacheBundle bundle{exs, vocab, build_word_embeddings(vocab, glove, 1), Caps{}};

  auto dir = testutil::scratch_dir("cache");
  const auto path = dir / "corpus.cache";
  save_cache(path, bundle);
  auto loaded = load_cache(path);

  CHECK(loaded.caps.context == 400);
  CHECK(loaded.vocab.words == vocab.words);
  CHECK(loaded.vocab.chars == vocab.chars);
  REQUIRE(loaded.examples.size() == exs.size());
  for (std::size_t i = 0; i < exs.size(); ++i) {
    const auto& a = exs[i];
    const auto& b = loaded.examples[i];
    CHECK(a.id == b.id);
    CHECK(a.context == b.context);
    CHECK(a.question == b.question);
    CHECK(a.answerable == b.answerable);
    CHECK(a.answer_span == b.answer_span);
    CHECK(a.gold_answer_texts == b.gold_answer_texts);
    REQUIRE(a.context_tokens.size() == b.context_tokens.size());
    for (std::size_t t = 0; t < a.context_tokens.size(); ++t) {
      CHECK(a.context_tokens[t].text == b.context_tokens[t].text);
      CHECK(a.context_tokens[t].start == b.context_tokens[t].start);
    }
    CHECK(a.context_word_ids == b.context_word_ids);
    CHECK(a.question_char_ids == b.question_char_ids);
  }
  for (std::int64_t i = 0; i < bundle.word_embeddings.numel(); ++i)
    CHECK(bundle.word_embeddings.value()[i] == loaded.word_embeddings.value()[i]);

  // saving again produces an identical file
  const auto path2 = dir / "corpus2.cache";
  save_cache(path2, bundle);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
}

TEST_CASE("cache rejects foreign files and future versions") {
  auto dir = testutil::scratch_dir("cache_bad");
  auto bad = write_file(dir, "bad.cache", "NOTCACHE----------------");
  CHECK_THROWS_AS(load_cache(bad), ParseError);
}
