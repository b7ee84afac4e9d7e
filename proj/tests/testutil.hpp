#pragma once

// Shared test helpers. The centrepiece is the finite-difference gradient
// checker: it treats a forward function as a black box, perturbs every
// scalar input by +/-h, and compares the central difference against the
// adjoint produced by the tape. Run it in double precision.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "equant/config.hpp"
#include "equant/corpus.hpp"
#include "equant/rng.hpp"
#include "equant/tensor.hpp"

namespace testutil {

using equant::Ctx;
using equant::Shape;
using equant::Tape;
using equant::Tensor;

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

// Forward function builds a scalar loss from the given leaf tensors.
using ForwardFn = std::function<Tensor<double>(Ctx<double>&, std::vector<Tensor<double>>&)>;

struct GradCheckResult {
  bool ok = true;
  double worst = 0.0;
  std::string where;
};

// Checks d(loss)/d(leaf[i][j]) for every scalar of every leaf.
inline GradCheckResult grad_check(const ForwardFn& f, std::vector<Tensor<double>> leaves,
                                  double h = 1e-5, double tol = 1e-4) {
  GradCheckResult res;

  Tape<double> tape;
  auto ctx = Ctx<double>::record(tape);
  auto loss = f(ctx, leaves);
  tape.backward(loss);

  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    if (!leaf.requires_grad()) continue;
    const auto& analytic = leaf.grad_storage();
    for (std::int64_t j = 0; j < leaf.numel(); ++j) {
      const double orig = leaf.value()[j];

      leaf.value()[j] = orig + h;
      auto ectx = Ctx<double>::eval();
      const double fp = f(ectx, leaves).item();

      leaf.value()[j] = orig - h;
      const double fm = f(ectx, leaves).item();

      leaf.value()[j] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double got = analytic[static_cast<std::size_t>(j)];
      const double err = rel_err(got, numeric, 1e-6);
      if (err > res.worst) {
        res.worst = err;
        res.where = "leaf " + std::to_string(li) + " elem " + std::to_string(j) + ": analytic " +
                    std::to_string(got) + " vs numeric " + std::to_string(numeric);
      }
      if (err > tol && std::fabs(got - numeric) > 1e-7) {
        res.ok = false;
      }
    }
  }
  return res;
}

inline Tensor<double> random_tensor(equant::Rng& rng, const Shape& s, bool requires_grad = true,
                                    double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(equant::numel_of(s)));
  for (auto& x : v) x = equant::uniform(rng, lo, hi);
  return Tensor<double>::from(s, std::move(v), requires_grad);
}

// Scratch directory unique to a test, cleaned on entry.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("equant_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// A reduced-width model that exercises every code path (multi-head
// attention, all encoder stages, each answerability head) in milliseconds.
inline equant::ModelConfig micro_model_config(equant::HeadVariant head,
                                              int word_dim = 6) {
  equant::ModelConfig cfg;
  cfg.word_dim = word_dim;
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
  cfg.equant2_pad_length = 24;
  return cfg;
}

// Synthetic reading-comprehension corpus with a learnable rule: the answer is
// the word right after "key"; contexts without "key" are unanswerable. Two
// articles so question shuffling has a cross-article donor.
struct MicroCorpus {
  std::vector<equant::QAExample> examples;
  equant::Vocabulary vocab;
  equant::GloveMap glove;
  equant::Tensor<float> embeddings;
  equant::Caps caps{20, 8, 6};
};

inline MicroCorpus micro_corpus(int n_examples, std::uint64_t seed, double unanswerable_frac,
                                int word_dim = 6) {
  static const std::vector<std::string> kFiller = {"alpha", "beta",  "gamma", "delta",
                                                   "blue",  "red",   "green", "stone",
                                                   "water", "cloud", "iron",  "salt"};
  static const std::vector<std::string> kValues = {"gold", "silver", "copper", "amber"};
  equant::Rng rng(seed);
  MicroCorpus mc;
  for (int i = 0; i < n_examples; ++i) {
    const bool answerable =
        equant::uniform(rng, 0.0, 1.0) >= unanswerable_frac || unanswerable_frac <= 0.0;
    std::vector<std::string> words;
    const int len = 5 + static_cast<int>(equant::rand_index(rng, 4));
    for (int w = 0; w < len; ++w)
      words.push_back(kFiller[equant::rand_index(rng, kFiller.size())]);
    equant::QAExample ex;
    ex.id = "micro-" + std::to_string(i);
    ex.source_article = (i % 2 == 0) ? "article-even" : "article-odd";
    ex.question_article = ex.source_article;
    ex.answerable = answerable ? 1 : 0;
    if (answerable) {
      const int pos = 1 + static_cast<int>(equant::rand_index(
                              rng, static_cast<std::size_t>(words.size() - 1)));
      words[static_cast<std::size_t>(pos) - 1] = "key";
      words[static_cast<std::size_t>(pos)] = kValues[equant::rand_index(rng, kValues.size())];
    }
    for (std::size_t w = 0; w < words.size(); ++w)
      ex.context += (w ? " " : "") + words[w];
    ex.question = "what follows key";
    ex.context_tokens = equant::tokenize(ex.context);
    ex.question_tokens = equant::tokenize(ex.question);
    if (answerable) {
      int pos = -1;
      for (std::size_t t = 0; t < words.size(); ++t)
        if (words[t] == "key") pos = static_cast<int>(t) + 1;
      ex.answer_span = {{pos, pos}};
      ex.gold_answer_texts = {words[static_cast<std::size_t>(pos)]};
    }
    mc.examples.push_back(std::move(ex));
  }

  std::vector<std::string> vocab_words = kFiller;
  vocab_words.insert(vocab_words.end(), kValues.begin(), kValues.end());
  vocab_words.push_back("key");
  vocab_words.push_back("what");
  vocab_words.push_back("follows");
  for (const auto& w : vocab_words) {
    std::vector<float> vec(static_cast<std::size_t>(word_dim));
    for (auto& x : vec) x = static_cast<float>(equant::uniform(rng, -0.5, 0.5));
    mc.glove[w] = vec;
  }
  mc.vocab = equant::build_vocabulary(mc.examples, mc.glove);
  mc.embeddings = equant::build_word_embeddings(mc.vocab, mc.glove, word_dim);
  equant::encode_examples(mc.examples, mc.vocab, mc.caps.word);
  return mc;
}

}  // namespace testutil
