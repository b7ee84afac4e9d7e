#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "equant/model.hpp"
#include "testutil.hpp"

using namespace equant;
using namespace testutil;

namespace {

Tensor<double> word_table(Rng& rng, int rows, int dim) {
  std::vector<double> v(static_cast<std::size_t>(rows) * dim);
  for (auto& x : v) x = uniform(rng, -0.5, 0.5);
  for (int r = 0; r < 2 && r < rows; ++r)  // pad and OOV rows stay zero
    for (int c = 0; c < dim; ++c) v[static_cast<std::size_t>(r) * dim + c] = 0.0;
  return Tensor<double>::from({rows, dim}, std::move(v), false);
}

ModelConfig micro_config(HeadVariant head) {
  ModelConfig cfg;
  cfg.word_dim = 6;
  cfg.char_dim = 4;
  cfg.char_conv_out = 6;
  cfg.char_conv_kernel = 3;
  cfg.hidden = 8;
  cfg.attention_heads = 2;
  cfg.head_variant = head;
  cfg.embed_blocks = 1;
  cfg.embed_convs = 1;
  cfg.embed_kernel = 3;
  cfg.model_blocks = 2;
  cfg.model_convs = 1;
  cfg.model_kernel = 3;
  cfg.head_enc_blocks = 1;
  cfg.head1_channels1 = 2;
  cfg.head1_channels2 = 3;
  cfg.head2_channels1 = 2;
  cfg.head2_channels2 = 3;
  cfg.head2_kernel = 3;
  cfg.head3_mid1 = 4;
  cfg.head3_mid2 = 2;
  cfg.span_length_cap = 4;
  cfg.equant2_pad_length = 9;
  return cfg;
}

constexpr int kMicroWordVocab = 7;
constexpr int kMicroCharVocab = 8;

ExampleInput random_input(Rng& rng, int n, int m, int word_len) {
  ExampleInput in;
  in.word_len = word_len;
  for (int i = 0; i < n; ++i) {
    in.context_words.push_back(static_cast<int>(rand_index(rng, kMicroWordVocab)));
    for (int c = 0; c < word_len; ++c)
      in.context_chars.push_back(static_cast<int>(rand_index(rng, kMicroCharVocab)));
  }
  for (int i = 0; i < m; ++i) {
    in.question_words.push_back(static_cast<int>(rand_index(rng, kMicroWordVocab)));
    for (int c = 0; c < word_len; ++c)
      in.question_chars.push_back(static_cast<int>(rand_index(rng, kMicroCharVocab)));
  }
  in.context_mask = Mask::ones({n});
  in.question_mask = Mask::ones({m});
  return in;
}

double sum_of(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x;
  return s;
}

// Freshly built models have all-zero biases, which parks every ReLU exactly on
// its kink (bad for finite differences) and can leave narrow layers dead.
// Move the biases to a generic point first.
void perturb_biases(Model<double>& model, std::uint64_t seed) {
  Rng rng(seed);
  auto& ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& name = ps.name(i);
    if (!(name.ends_with("_b") || name.ends_with("/b") || name.ends_with("bias"))) continue;
    for (auto& v : ps.at(i).value()) v = uniform(rng, -0.2, 0.2);
  }
}

}  // namespace

TEST_CASE("trilinear similarity reproduces the hand-evaluated example") {
  auto ctx = Ctx<double>::eval();
  auto C = Tensor<double>::from({1, 2}, {1, 2});
  auto Q = Tensor<double>::from({1, 2}, {3, 4});
  auto w = Tensor<double>::from({6}, {1, 1, 1, 1, 1, 1});
  auto bias = Tensor<double>::scalar(0.0);
  auto S = trilinear_similarity(ctx, C, Q, w, bias);
  REQUIRE(S.shape() == Shape{1, 1});
  CHECK(S.value()[0] == doctest::Approx(21.0).epsilon(1e-12));  // 1+2 + 3+4 + 3+8
}

TEST_CASE("trilinear similarity matches elementwise definition on a grid") {
  auto ctx = Ctx<double>::eval();
  Rng rng(11);
  auto C = random_tensor(rng, {3, 4}, false);
  auto Q = random_tensor(rng, {2, 4}, false);
  auto w = random_tensor(rng, {12, 1}, false);
  auto bias = Tensor<double>::scalar(0.37);
  auto S = trilinear_similarity(ctx, C, Q, w, bias);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      double want = 0.37;
      for (int k = 0; k < 4; ++k) {
        const double c = C.value()[static_cast<std::size_t>(i) * 4 + k];
        const double q = Q.value()[static_cast<std::size_t>(j) * 4 + k];
        want += w.value()[static_cast<std::size_t>(k)] * c;
        want += w.value()[static_cast<std::size_t>(4 + k)] * q;
        want += w.value()[static_cast<std::size_t>(8 + k)] * c * q;
      }
      CHECK(rel_err(S.value()[static_cast<std::size_t>(i) * 2 + j], want) < 1e-12);
    }
  }
}

TEST_CASE("trilinear similarity gradients agree with finite differences") {
  Rng rng(12);
  auto C = random_tensor(rng, {3, 2});
  auto Q = random_tensor(rng, {2, 2});
  auto w = random_tensor(rng, {6, 1});
  auto bias = random_tensor(rng, {1});
  std::vector<Tensor<double>> leaves = {C, Q, w, bias};
  auto res = grad_check(
      [](Ctx<double>& ctx, std::vector<Tensor<double>>& ls) {
        return sum_all(ctx, trilinear_similarity(ctx, ls[0], ls[1], ls[2], ls[3]));
      },
      leaves);
  CHECK_MESSAGE(res.ok, res.where, " err=", res.worst);
}

TEST_CASE("parameter counts per block match the architecture at full width") {
  ModelConfig cfg;  // defaults: 300/64/96, 1x4conv k7 embed, 7x2conv k5 model
  Rng rng(5);
  const int word_vocab = 10, char_vocab = 30;
  std::vector<float> wv(static_cast<std::size_t>(word_vocab) * cfg.word_dim, 0.0f);
  auto wt = Tensor<float>::from({word_vocab, cfg.word_dim}, std::move(wv), false);

  auto expect_trunk = [&](const std::map<std::string, std::int64_t>& counts) {
    // char table + char conv (5*64*96+96) + two highway layers at width 396
    const std::int64_t highway = 2 * 2 * (396LL * 396 + 396);
    CHECK(counts.at("input_embedding") == char_vocab * 64 + 30816 + highway);
    // 396*96 projection plus one block: 4 convs (7*96+96*96+96), 4+1+1 layer norm
    // pairs (2*96 each), attention 3*96*96, ffn 2*(96*96+96)
    CHECK(counts.at("embedding_encoder") == 38016 + 87360);
    CHECK(counts.at("context_query_attention") == 289);
    CHECK(counts.at("model_encoder") == 36864 + 7 * 66624);
    CHECK(counts.at("output_layer") == 384);
  };

  SUBCASE("trunk only") {
    Model<float> model(cfg, wt, char_vocab, 1);
    auto counts = model.count_params_per_block();
    expect_trunk(counts);
    CHECK(counts.count("answerability_head") == 0);
  }
  SUBCASE("head variants") {
    cfg.head_variant = HeadVariant::equant1;
    Model<float> m1(cfg, wt, char_vocab, 1);
    // 3x3 convs 1->8->16 plus a 16->1 readout
    CHECK(m1.count_params_per_block().at("answerability_head") ==
          (9 * 8 + 8) + (9 * 8 * 16 + 16) + 17);
    CHECK(m1.count_params_per_block().at("answerability_head") == 1265);

    cfg.head_variant = HeadVariant::equant2;
    Model<float> m2(cfg, wt, char_vocab, 1);
    // two encoder blocks + per-position score + k5 convs 1->8->16 + flattened readout
    CHECK(m2.count_params_per_block().at("answerability_head") ==
          2 * 66624 + 97 + (5 * 8 + 8) + (5 * 8 * 16 + 16) + (400 * 16 + 1));
    CHECK(m2.count_params_per_block().at("answerability_head") == 140450);

    cfg.head_variant = HeadVariant::equant3;
    Model<float> m3(cfg, wt, char_vocab, 1);
    // two encoder blocks + FFN chain 96->48->24->1
    const std::int64_t ffn_chain = (96 * 48 + 48) + (48 * 24 + 24) + (24 * 1 + 1);
    CHECK(ffn_chain == 5857);
    CHECK(m3.count_params_per_block().at("answerability_head") == 2 * 66624 + ffn_chain);
    CHECK(m3.count_params_per_block().at("answerability_head") == 139105);
    expect_trunk(m3.count_params_per_block());
  }
}

TEST_CASE("forward produces valid distributions across a size grid") {
  auto cfg = micro_config(HeadVariant::equant3);
  Rng rng(21);
  auto wt = word_table(rng, kMicroWordVocab, cfg.word_dim);
  Model<double> model(cfg, wt, kMicroCharVocab, 99);
  for (int n : {1, 2, 7, 9}) {
    for (int m : {1, 3, 7}) {
      auto in = random_input(rng, n, m, 4);
      auto ctx = Ctx<double>::eval();
      auto out = model.forward(ctx, in);
      REQUIRE(out.p1.shape() == Shape{n});
      REQUIRE(out.p2.shape() == Shape{n});
      REQUIRE(out.S.shape() == Shape{n, m});
      CHECK(out.p1.all_finite());
      CHECK(out.p2.all_finite());
      CHECK(rel_err(sum_of(out.p1.value()), 1.0) < 1e-9);
      CHECK(rel_err(sum_of(out.p2.value()), 1.0) < 1e-9);
      for (double p : out.p1.value()) CHECK(p >= 0.0);
      REQUIRE(out.p0.defined());
      CHECK(out.p0.value()[0] > 0.0);
      CHECK(out.p0.value()[0] < 1.0);
    }
  }
}

TEST_CASE("padded rows and columns never change unmasked outputs") {
  for (auto head : {HeadVariant::equant1, HeadVariant::equant2, HeadVariant::equant3}) {
    CAPTURE(to_string(head));
    auto cfg = micro_config(head);
    Rng rng(31);
    auto wt = word_table(rng, kMicroWordVocab, cfg.word_dim);
    Model<double> model(cfg, wt, kMicroCharVocab, 7);

    const int n = 5, m = 3, word_len = 4;
    auto in = random_input(rng, n, m, word_len);
    auto padded = in;
    auto grow = [&](std::vector<int>& words, std::vector<int>& chars, int extra) {
      for (int i = 0; i < extra; ++i) {
        words.push_back(static_cast<int>(rand_index(rng, kMicroWordVocab)));
        for (int c = 0; c < word_len; ++c)
          chars.push_back(static_cast<int>(rand_index(rng, kMicroCharVocab)));
      }
    };
    grow(padded.context_words, padded.context_chars, 3);
    grow(padded.question_words, padded.question_chars, 2);
    padded.context_mask = Mask::prefix(n + 3, n);
    padded.question_mask = Mask::prefix(m + 2, m);

    auto ctx = Ctx<double>::eval();
    auto a = model.forward(ctx, in);
    auto b = model.forward(ctx, padded);
    for (int i = 0; i < n; ++i) {
      CHECK(a.p1.value()[static_cast<std::size_t>(i)] ==
            b.p1.value()[static_cast<std::size_t>(i)]);
      CHECK(a.p2.value()[static_cast<std::size_t>(i)] ==
            b.p2.value()[static_cast<std::size_t>(i)]);
    }
    for (int i = n; i < n + 3; ++i) {
      CHECK(b.p1.value()[static_cast<std::size_t>(i)] == 0.0);
      CHECK(b.p2.value()[static_cast<std::size_t>(i)] == 0.0);
    }
    REQUIRE(a.p0.defined());
    REQUIRE(b.p0.defined());
    CHECK(a.p0.value()[0] == b.p0.value()[0]);
  }
}

TEST_CASE("construction is deterministic in the seed") {
  auto cfg = micro_config(HeadVariant::equant1);
  Rng rng(41);
  auto wt = word_table(rng, kMicroWordVocab, cfg.word_dim);
  Model<double> a(cfg, wt, kMicroCharVocab, 123);
  Model<double> b(cfg, wt, kMicroCharVocab, 123);
  Model<double> c(cfg, wt, kMicroCharVocab, 124);
  REQUIRE(a.params().size() == b.params().size());
  bool identical = true, differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params().name(i) == b.params().name(i));
    auto av = a.params().at(i).value(), bv = b.params().at(i).value(),
         cv = c.params().at(i).value();
    for (std::int64_t k = 0; k < a.params().at(i).numel(); ++k) {
      if (av[static_cast<std::size_t>(k)] != bv[static_cast<std::size_t>(k)]) identical = false;
      if (av[static_cast<std::size_t>(k)] != cv[static_cast<std::size_t>(k)]) differs = true;
    }
  }
  CHECK(identical);
  CHECK(differs);

  auto in = random_input(rng, 4, 3, 4);
  auto o1 = a.infer(in);
  auto o2 = b.infer(in);
  CHECK(o1.p1 == o2.p1);
  CHECK(o1.p2 == o2.p2);
  CHECK(o1.p0 == o2.p0);
}

TEST_CASE("end-to-end gradients match finite differences on a micro model") {
  auto cfg = micro_config(HeadVariant::equant1);
  Rng rng(51);
  auto wt = word_table(rng, kMicroWordVocab, cfg.word_dim);
  Model<double> model(cfg, wt, kMicroCharVocab, 3);
  perturb_biases(model, 333);
  auto in = random_input(rng, 5, 3, 4);

  // A representative slice of every component; the acceptance run sweeps all
  // parameters for every head variant.
  std::vector<std::string> names = {
      "input_embedding/char_emb",        "input_embedding/char_conv/w",
      "input_embedding/highway1/t_w",    "input_embedding/highway2/g_b",
      "embedding_encoder/proj_w",        "embedding_encoder/block0/conv0/depth",
      "embedding_encoder/block0/attn/wq", "embedding_encoder/block0/ffn/w1_w",
      "embedding_encoder/block0/ln_ffn/gain", "context_query_attention/w",
      "context_query_attention/bias",    "model_encoder/proj_w",
      "model_encoder/block1/conv0/point", "output_layer/w1",
      "output_layer/w2",                 "answerability_head/conv1/w",
      "answerability_head/conv2/b",      "answerability_head/ff_w",
      "answerability_head/ff_b"};
  std::vector<Tensor<double>> leaves;
  for (const auto& nm : names) leaves.push_back(model.params().get(nm));

  auto res = grad_check(
      [&](Ctx<double>& ctx, std::vector<Tensor<double>>&) {
        auto out = model.forward(ctx, in);
        auto loss = cross_entropy_categorical(ctx, out.p1, 2);
        loss = add(ctx, loss, cross_entropy_categorical(ctx, out.p2, 3));
        return add(ctx, loss, cross_entropy_binary(ctx, out.p0, 1));
      },
      leaves, 1e-6, 2e-4);
  CHECK_MESSAGE(res.ok, res.where, " err=", res.worst);
}

TEST_CASE("stop-gradient confines head loss to head parameters") {
  auto cfg = micro_config(HeadVariant::equant3);
  cfg.head_stop_gradient = true;
  Rng rng(61);
  auto wt = word_table(rng, kMicroWordVocab, cfg.word_dim);
  auto in = random_input(rng, 4, 3, 4);

  auto head_grad_norms = [&](bool stop) {
    cfg.head_stop_gradient = stop;
    Model<double> model(cfg, wt, kMicroCharVocab, 9);
    perturb_biases(model, 999);
    Tape<double> tape;
    auto ctx = Ctx<double>::record(tape);
    auto out = model.forward(ctx, in);
    auto loss = cross_entropy_binary(ctx, out.p0, 1);
    tape.backward(loss);
    double trunk = 0, head = 0;
    auto& ps = model.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!ps.at(i).grad_touched()) continue;
      double s = 0;
      for (double g : ps.at(i).grad()) s += g * g;
      if (ps.name(i).rfind("answerability_head/", 0) == 0)
        head += s;
      else
        trunk += s;
    }
    return std::pair<double, double>(trunk, head);
  };

  auto [trunk_on, head_on] = head_grad_norms(true);
  CHECK(trunk_on == 0.0);
  CHECK(head_on > 0.0);
  auto [trunk_off, head_off] = head_grad_norms(false);
  CHECK(trunk_off > 0.0);
  CHECK(head_off > 0.0);
}

TEST_CASE("head input switch decides whether the model stack feeds the head") {
  auto cfg = micro_config(HeadVariant::equant3);
  Rng rng(71);
  auto wt = word_table(rng, kMicroWordVocab, cfg.word_dim);
  auto in = random_input(rng, 4, 3, 4);

  // Gradient of a head-only loss reaches the shared model-encoder blocks
  // exactly when the head reads their output rather than their input.
  auto stack_grad = [&](bool fused) {
    cfg.head_reads_fused = fused;
    Model<double> model(cfg, wt, kMicroCharVocab, 13);
    // keep the head's narrow FFN chain alive so gradients can pass it
    for (const char* nm : {"answerability_head/ff1_b", "answerability_head/ff2_b"})
      for (auto& v : model.params().get(nm).value()) v = 20.0;
    Tape<double> tape;
    auto ctx = Ctx<double>::record(tape);
    auto out = model.forward(ctx, in);
    tape.backward(cross_entropy_binary(ctx, out.p0, 1));
    double s = 0;
    auto& ps = model.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps.name(i).rfind("model_encoder/block", 0) != 0) continue;
      if (!ps.at(i).grad_touched()) continue;
      for (double g : ps.at(i).grad()) s += std::abs(g);
    }
    return s;
  };

  CHECK(stack_grad(false) > 0.0);  // head reads the stack output
  CHECK(stack_grad(true) == 0.0);  // head reads the stack input
}

TEST_CASE("similarity head can read raw scores instead of the row softmax") {
  auto cfg = micro_config(HeadVariant::equant1);
  Rng rng(72);
  auto wt = word_table(rng, kMicroWordVocab, cfg.word_dim);
  auto in = random_input(rng, 4, 3, 4);
  Model<double> soft(cfg, wt, kMicroCharVocab, 13);
  cfg.head1_raw_similarity = true;
  Model<double> raw(cfg, wt, kMicroCharVocab, 13);
  perturb_biases(soft, 778);
  perturb_biases(raw, 778);
  auto a = soft.infer(in);
  auto b = raw.infer(in);
  CHECK(*a.p0 != *b.p0);
}

TEST_CASE("padded-context head rejects contexts longer than its pad length") {
  auto cfg = micro_config(HeadVariant::equant2);
  Rng rng(81);
  auto wt = word_table(rng, kMicroWordVocab, cfg.word_dim);
  Model<double> model(cfg, wt, kMicroCharVocab, 17);
  auto in = random_input(rng, cfg.equant2_pad_length + 1, 3, 4);
  auto ctx = Ctx<double>::eval();
  CHECK_THROWS_AS(model.forward(ctx, in), ContractError);
  auto ok = random_input(rng, cfg.equant2_pad_length, 3, 4);
  CHECK_NOTHROW(model.forward(ctx, ok));
}

TEST_CASE("trunk-only model reports no answerability probability") {
  auto cfg = micro_config(HeadVariant::none);
  Rng rng(91);
  auto wt = word_table(rng, kMicroWordVocab, cfg.word_dim);
  Model<double> model(cfg, wt, kMicroCharVocab, 19);
  auto out = model.infer(random_input(rng, 4, 3, 4));
  CHECK_FALSE(out.p0.has_value());
  CHECK(out.p1.size() == 4);
}

TEST_CASE("span prediction picks the best product under the length cap") {
  ModelConfig cfg;
  QAExample ex;
  ex.context = "ab cd ef";
  ex.context_tokens = {{"ab", 0, 2}, {"cd", 3, 5}, {"ef", 6, 8}};

  SUBCASE("one-hot probabilities recover the span and text") {
    ModelOutput out;
    out.p1 = {0, 1, 0};
    out.p2 = {0, 0, 1};
    auto ans = predict(out, cfg, ex);
    REQUIRE(ans.answerable);
    CHECK(ans.span == std::pair<int, int>(1, 2));
    CHECK(ans.text == "cd ef");
  }
  SUBCASE("a zero-length cap compares only single-token spans") {
    cfg.span_length_cap = 0;
    ModelOutput out;
    out.p1 = {0.6, 0.4, 0.0};
    out.p2 = {0.5, 0.5, 0.0};
    auto ans = predict(out, cfg, ex);
    REQUIRE(ans.answerable);
    CHECK(ans.span == std::pair<int, int>(0, 0));  // 0.30 beats 0.20
    CHECK(ans.text == "ab");
  }
  SUBCASE("ties resolve to the earliest span") {
    ModelOutput out;
    out.p1 = {0.5, 0.5, 0.0};
    out.p2 = {0.5, 0.5, 0.0};
    auto ans = predict(out, cfg, ex);
    CHECK(ans.span == std::pair<int, int>(0, 0));
  }
  SUBCASE("the cap excludes longer spans even with higher product") {
    cfg.span_length_cap = 1;
    ModelOutput out;
    out.p1 = {0.9, 0.05, 0.05};
    out.p2 = {0.01, 0.01, 0.98};
    auto ans = predict(out, cfg, ex);
    REQUIRE(ans.answerable);
    CHECK(ans.span->second - ans.span->first <= 1);
  }
  SUBCASE("a low answerability probability yields a refusal") {
    ModelOutput out;
    out.p1 = {0, 1, 0};
    out.p2 = {0, 0, 1};
    out.p0 = 0.49;
    auto ans = predict(out, cfg, ex);
    CHECK_FALSE(ans.answerable);
    CHECK(ans.text.empty());
    CHECK_FALSE(ans.span.has_value());
    out.p0 = 0.51;
    CHECK(predict(out, cfg, ex).answerable);
  }
  SUBCASE("padded probability tails are ignored") {
    ModelOutput out;
    out.p1 = {0, 1, 0, 0, 0};
    out.p2 = {0, 1, 0, 0, 0};
    auto ans = predict(out, cfg, ex);
    CHECK(ans.span == std::pair<int, int>(1, 1));
    CHECK(ans.text == "cd");
  }
}

TEST_CASE("batch rows and direct example encoding agree") {
  QAExample ex;
  ex.id = "x1";
  ex.source_article = "A";
  ex.context = "alpha beta gamma";
  ex.question = "beta?";
  ex.context_tokens = tokenize(ex.context);
  ex.question_tokens = tokenize(ex.question);
  ex.answerable = 1;
  ex.answer_span = {{1, 1}};
  ex.gold_answer_texts = {"beta"};

  GloveMap glove;
  glove["alpha"] = {0.1f, 0.2f};
  glove["beta"] = {0.3f, 0.4f};
  glove["gamma"] = {0.5f, 0.6f};
  std::vector<QAExample> all = {ex};
  auto vocab = build_vocabulary(all, glove);
  Caps caps{10, 5, 6};
  encode_examples(all, vocab, caps.word);

  auto batches = make_batches(all, caps, 4, false, 0);
  REQUIRE(batches.size() == 1);
  auto from_batch = input_from_batch(batches[0], 0);
  auto direct = input_from_example(all[0], caps);
  CHECK(from_batch.context_words == direct.context_words);
  CHECK(from_batch.question_words == direct.question_words);
  CHECK(from_batch.context_chars == direct.context_chars);
  CHECK(from_batch.question_chars == direct.question_chars);
  CHECK(from_batch.word_len == direct.word_len);
  CHECK(from_batch.context_mask.count() == direct.context_mask.count());
}
