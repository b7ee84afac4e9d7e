#pragma once

// The network: input embedding (frozen word vectors + char convolution +
// highway), a shared embedding encoder, trilinear context-query attention,
// a shared model-encoder stack applied three times, start/end output layers,
// and the three optional answerability heads.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "equant/config.hpp"
#include "equant/corpus.hpp"
#include "equant/rng.hpp"
#include "equant/tensor.hpp"

namespace equant {

// Copies values into an untracked leaf (used for stop-gradient and casts).
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return Tensor<T>::from(x.shape(), std::vector<T>(x.value().begin(), x.value().end()));
}

template <typename To, typename From>
Tensor<To> cast_tensor(const Tensor<From>& x, bool requires_grad = false) {
  std::vector<To> v(static_cast<std::size_t>(x.numel()));
  auto xv = x.value();
  for (std::int64_t i = 0; i < x.numel(); ++i) v[static_cast<std::size_t>(i)] = static_cast<To>(xv[i]);
  return Tensor<To>::from(x.shape(), std::move(v), requires_grad);
}

// Named trainable parameters in registration order.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    index_.emplace(name, names_.size());
    names_.push_back(name);
    tensors_.push_back(t);
    return t;
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return tensors_[it->second];
  }
  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor<T> at(std::size_t i) const { return tensors_[i]; }
  std::vector<Tensor<T>> all() const { return tensors_; }
  void zero_grads() {
    for (auto& t : tensors_) t.zero_grad();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// One example's index arrays, already padded/truncated to fixed lengths.
struct ExampleInput {
  std::vector<int> context_words;
  std::vector<int> context_chars;  // [n x word_len]
  std::vector<int> question_words;
  std::vector<int> question_chars;  // [m x word_len]
  Mask context_mask;
  Mask question_mask;
  int word_len = 0;
};

inline ExampleInput input_from_batch(const Batch& b, int row) {
  if (row < 0 || row >= b.size) throw ContractError("input_from_batch: row out of range");
  ExampleInput in;
  in.word_len = b.word_len;
  const int n = b.context_len, m = b.question_len;
  const auto cw = static_cast<std::size_t>(row) * n;
  const auto qw = static_cast<std::size_t>(row) * m;
  in.context_words.assign(b.context_words.begin() + static_cast<std::ptrdiff_t>(cw),
                          b.context_words.begin() + static_cast<std::ptrdiff_t>(cw + n));
  in.question_words.assign(b.question_words.begin() + static_cast<std::ptrdiff_t>(qw),
                           b.question_words.begin() + static_cast<std::ptrdiff_t>(qw + m));
  const auto cc = cw * static_cast<std::size_t>(b.word_len);
  const auto qc = qw * static_cast<std::size_t>(b.word_len);
  in.context_chars.assign(b.context_chars.begin() + static_cast<std::ptrdiff_t>(cc),
                          b.context_chars.begin() + static_cast<std::ptrdiff_t>(cc + static_cast<std::size_t>(n) * b.word_len));
  in.question_chars.assign(b.question_chars.begin() + static_cast<std::ptrdiff_t>(qc),
                           b.question_chars.begin() + static_cast<std::ptrdiff_t>(qc + static_cast<std::size_t>(m) * b.word_len));
  in.context_mask = Mask::from(
      {n}, std::vector<std::uint8_t>(b.context_mask.begin() + static_cast<std::ptrdiff_t>(cw),
                                     b.context_mask.begin() + static_cast<std::ptrdiff_t>(cw + n)));
  in.question_mask = Mask::from(
      {m}, std::vector<std::uint8_t>(b.question_mask.begin() + static_cast<std::ptrdiff_t>(qw),
                                     b.question_mask.begin() + static_cast<std::ptrdiff_t>(qw + m)));
  return in;
}

inline ExampleInput input_from_example(const QAExample& ex, const Caps& caps) {
  if (!ex.encoded()) throw ContractError("input_from_example: example " + ex.id + " not encoded");
  ExampleInput in;
  in.word_len = caps.word;
  const int n = std::min<int>(caps.context, static_cast<int>(ex.context_word_ids.size()));
  const int m = std::min<int>(caps.question, static_cast<int>(ex.question_word_ids.size()));
  if (n == 0 || m == 0) throw ContractError("input_from_example: example " + ex.id + " has an empty side");
  auto fill = [&](int len, const std::vector<int>& words, const std::vector<std::vector<int>>& chars,
                  std::vector<int>& out_words, std::vector<int>& out_chars) {
    for (int t = 0; t < len; ++t) {
      out_words.push_back(words[static_cast<std::size_t>(t)]);
      const auto& cs = chars[static_cast<std::size_t>(t)];
      for (int c = 0; c < caps.word; ++c)
        out_chars.push_back(c < static_cast<int>(cs.size()) ? cs[static_cast<std::size_t>(c)]
                                                            : Vocabulary::kPad);
    }
  };
  fill(n, ex.context_word_ids, ex.context_char_ids, in.context_words, in.context_chars);
  fill(m, ex.question_word_ids, ex.question_char_ids, in.question_words, in.question_chars);
  in.context_mask = Mask::ones({n});
  in.question_mask = Mask::ones({m});
  return in;
}

// S[i,j] = w1·c_i + w2·q_j + w3·(c_i ⊙ q_j) + bias, with w = [w1; w2; w3].
template <typename T>
Tensor<T> trilinear_similarity(Ctx<T>& ctx, const Tensor<T>& C, const Tensor<T>& Q,
                               const Tensor<T>& w, const Tensor<T>& bias) {
  if (C.ndim() != 2 || Q.ndim() != 2 || C.dim(1) != Q.dim(1))
    throw ShapeError("trilinear_similarity: want [n x d] and [m x d], got " +
                     shape_str(C.shape()) + " and " + shape_str(Q.shape()));
  const int d = C.dim(1);
  if (w.numel() != 3 * d)
    throw ShapeError("trilinear_similarity: weight must hold 3*d = " + std::to_string(3 * d) +
                     " values, got " + std::to_string(w.numel()));
  auto wc = w.ndim() == 2 ? w : reshape(ctx, w, {3 * d, 1});
  auto w1 = slice_rows(ctx, wc, 0, d);
  auto w2 = slice_rows(ctx, wc, d, 2 * d);
  auto w3 = reshape(ctx, slice_rows(ctx, wc, 2 * d, 3 * d), {d});
  const int n = C.dim(0), m = Q.dim(0);
  auto c_part = reshape(ctx, matmul(ctx, C, w1), {n});
  auto q_part = reshape(ctx, matmul(ctx, Q, w2), {m});
  auto cross = matmul(ctx, mul_row(ctx, C, w3), transpose(ctx, Q));
  auto S = add_col(ctx, add_row(ctx, cross, q_part), c_part);
  return add_scalar(ctx, S, bias);
}

// Detached per-example predictions.
struct ModelOutput {
  std::vector<double> p1;
  std::vector<double> p2;
  std::optional<double> p0;
};

struct Answer {
  bool answerable = false;
  std::optional<std::pair<int, int>> span;
  std::string text;
};

// Live forward-pass handles (still attached to the tape).
template <typename T>
struct ForwardOut {
  Tensor<T> p1;  // [n]
  Tensor<T> p2;  // [n]
  Tensor<T> p0;  // [1]; undefined when the model has no head
  Tensor<T> S;     // raw similarity [n x m]
  Tensor<T> Sbar;  // row-softmaxed similarity
  Mask context_mask;
  Mask question_mask;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, Tensor<T> word_embeddings, int char_vocab_size,
        std::uint64_t seed)
      : cfg_(cfg), word_emb_(std::move(word_embeddings)), char_vocab_(char_vocab_size) {
    cfg_.validate();
    if (word_emb_.ndim() != 2 || word_emb_.dim(1) != cfg_.word_dim)
      throw ShapeError("word embedding table must be [vocab x " + std::to_string(cfg_.word_dim) +
                       "], got " + shape_str(word_emb_.shape()));
    if (word_emb_.requires_grad())
      throw ContractError("word embeddings are frozen and must not require gradients");
    if (char_vocab_ < 2) throw ConfigError("char vocabulary must include pad and OOV");
    Rng rng(derive_seed(seed, 0xE0));
    init_params(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  int char_vocab_size() const { return char_vocab_; }
  const Tensor<T>& word_embeddings() const { return word_emb_; }

  ForwardOut<T> forward(Ctx<T>& ctx, const ExampleInput& in) const {
    const int n = static_cast<int>(in.context_mask.size());
    const int m = static_cast<int>(in.question_mask.size());
    if (n == 0 || m == 0) throw ContractError("forward: empty context or question");
    if (cfg_.head_variant == HeadVariant::equant2 && n > cfg_.equant2_pad_length)
      throw ContractError("forward: context of " + std::to_string(n) +
                          " tokens exceeds the pad length " +
                          std::to_string(cfg_.equant2_pad_length));
    const Mask& cmask = in.context_mask;
    const Mask& qmask = in.question_mask;

    auto c_emb = embed_side(ctx, in.context_words, in.context_chars, in.word_len);
    auto q_emb = embed_side(ctx, in.question_words, in.question_chars, in.word_len);

    auto proj = params_.get("embedding_encoder/proj_w");
    auto C = matmul(ctx, c_emb, proj);
    auto Q = matmul(ctx, q_emb, proj);
    for (int b = 0; b < cfg_.embed_blocks; ++b) {
      const std::string prefix = "embedding_encoder/block" + std::to_string(b);
      C = encoder_block(ctx, C, cmask, prefix, cfg_.embed_convs);
      Q = encoder_block(ctx, Q, qmask, prefix, cfg_.embed_convs);
    }

    auto S = trilinear(ctx, C, Q);
    auto Sbar = masked_softmax(ctx, S, 1, qmask);
    auto Sbb = masked_softmax(ctx, S, 0, cmask);
    auto A = matmul(ctx, Sbar, Q);
    auto B = matmul(ctx, Sbar, matmul(ctx, transpose(ctx, Sbb), C));
    auto fused = concat_cols<T>(ctx, {C, A, mul(ctx, C, A), mul(ctx, C, B)});
    fused = dropout(ctx, fused);

    auto M = matmul(ctx, fused, params_.get("model_encoder/proj_w"));
    auto stack_pass = [&](Tensor<T> x) {
      for (int b = 0; b < cfg_.model_blocks; ++b)
        x = encoder_block(ctx, x, cmask, "model_encoder/block" + std::to_string(b),
                          cfg_.model_convs);
      return x;
    };
    auto M0 = stack_pass(M);
    auto M1 = stack_pass(M0);
    auto M2 = stack_pass(M1);

    auto span_logits = [&](const Tensor<T>& a, const Tensor<T>& b2, const char* wname) {
      auto cat = concat_cols<T>(ctx, {a, b2});
      auto z = matmul(ctx, cat, params_.get(wname));
      return reshape(ctx, z, {n});
    };
    ForwardOut<T> out;
    out.p1 = masked_softmax(ctx, span_logits(M0, M1, "output_layer/w1"), 1, cmask);
    out.p2 = masked_softmax(ctx, span_logits(M0, M2, "output_layer/w2"), 1, cmask);
    out.S = S;
    out.Sbar = Sbar;
    out.context_mask = cmask;
    out.question_mask = qmask;

    switch (cfg_.head_variant) {
      case HeadVariant::none:
        break;
      case HeadVariant::equant1:
        out.p0 = head1(ctx, S, Sbar, cmask, qmask);
        break;
      case HeadVariant::equant2:
        out.p0 = head2(ctx, cfg_.head_reads_fused ? M : M0, cmask);
        break;
      case HeadVariant::equant3:
        out.p0 = head3(ctx, cfg_.head_reads_fused ? M : M0, cmask);
        break;
    }
    return out;
  }

  ModelOutput infer(const ExampleInput& in) const {
    auto ctx = Ctx<T>::eval();
    auto f = forward(ctx, in);
    ModelOutput o;
    o.p1.assign(f.p1.value().begin(), f.p1.value().end());
    o.p2.assign(f.p2.value().begin(), f.p2.value().end());
    if (f.p0.defined()) o.p0 = static_cast<double>(f.p0.value()[0]);
    return o;
  }

  // Trainable scalars per top-level block (frozen word table excluded).
  std::map<std::string, std::int64_t> count_params_per_block() const {
    std::map<std::string, std::int64_t> counts;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& name = params_.name(i);
      counts[name.substr(0, name.find('/'))] += params_.at(i).numel();
    }
    return counts;
  }
  std::int64_t count_params() const {
    std::int64_t total = 0;
    for (std::size_t i = 0; i < params_.size(); ++i) total += params_.at(i).numel();
    return total;
  }

 private:
  ModelConfig cfg_;
  Tensor<T> word_emb_;
  int char_vocab_;
  ParamStore<T> params_;

  Tensor<T> xavier(Rng& rng, const Shape& s, int fan_in, int fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<T> v(static_cast<std::size_t>(numel_of(s)));
    for (auto& x : v) x = static_cast<T>(uniform(rng, -limit, limit));
    return Tensor<T>::from(s, std::move(v), true);
  }
  Tensor<T> zeros_param(const Shape& s) { return Tensor<T>::zeros(s, true); }
  Tensor<T> ones_param(const Shape& s) {
    auto t = Tensor<T>::zeros(s, true);
    for (auto& v : t.value()) v = T{1};
    return t;
  }

  void add_linear(Rng& rng, const std::string& prefix, int in, int out, bool bias = true) {
    params_.add(prefix + "_w", xavier(rng, {in, out}, in, out));
    if (bias) params_.add(prefix + "_b", zeros_param({out}));
  }
  void add_layer_norm(const std::string& prefix, int d) {
    params_.add(prefix + "/gain", ones_param({d}));
    params_.add(prefix + "/bias", zeros_param({d}));
  }
  void add_encoder_block(Rng& rng, const std::string& prefix, int nconvs, int kernel, int d) {
    for (int c = 0; c < nconvs; ++c) {
      add_layer_norm(prefix + "/ln_conv" + std::to_string(c), d);
      params_.add(prefix + "/conv" + std::to_string(c) + "/depth",
                  xavier(rng, {kernel, d}, kernel, kernel));
      params_.add(prefix + "/conv" + std::to_string(c) + "/point", xavier(rng, {d, d}, d, d));
      params_.add(prefix + "/conv" + std::to_string(c) + "/bias", zeros_param({d}));
    }
    add_layer_norm(prefix + "/ln_attn", d);
    params_.add(prefix + "/attn/wq", xavier(rng, {d, d}, d, d));
    params_.add(prefix + "/attn/wk", xavier(rng, {d, d}, d, d));
    params_.add(prefix + "/attn/wv", xavier(rng, {d, d}, d, d));
    add_layer_norm(prefix + "/ln_ffn", d);
    add_linear(rng, prefix + "/ffn/w1", d, d);
    add_linear(rng, prefix + "/ffn/w2", d, d);
  }

  void init_params(Rng& rng) {
    const int E = cfg_.embed_dim();
    const int h = cfg_.hidden;

    // input embedding
    {
      std::vector<T> v(static_cast<std::size_t>(char_vocab_) * cfg_.char_dim);
      for (auto& x : v) x = static_cast<T>(uniform(rng, -0.05, 0.05));
      params_.add("input_embedding/char_emb",
                  Tensor<T>::from({char_vocab_, cfg_.char_dim}, std::move(v), true));
    }
    params_.add("input_embedding/char_conv/w",
                xavier(rng, {cfg_.char_conv_kernel, cfg_.char_dim, cfg_.char_conv_out},
                       cfg_.char_conv_kernel * cfg_.char_dim,
                       cfg_.char_conv_kernel * cfg_.char_conv_out));
    params_.add("input_embedding/char_conv/b", zeros_param({cfg_.char_conv_out}));
    for (int l = 1; l <= 2; ++l) {
      const std::string hp = "input_embedding/highway" + std::to_string(l);
      add_linear(rng, hp + "/t", E, E);
      add_linear(rng, hp + "/g", E, E);
    }

    // embedding encoder
    params_.add("embedding_encoder/proj_w", xavier(rng, {E, h}, E, h));
    for (int b = 0; b < cfg_.embed_blocks; ++b)
      add_encoder_block(rng, "embedding_encoder/block" + std::to_string(b), cfg_.embed_convs,
                        cfg_.embed_kernel, h);

    // context-query attention (trilinear weights stored as one [3h x 1] column)
    params_.add("context_query_attention/w", xavier(rng, {3 * h, 1}, 3 * h, 1));
    params_.add("context_query_attention/bias", zeros_param({1}));

    // model encoder
    params_.add("model_encoder/proj_w", xavier(rng, {4 * h, h}, 4 * h, h));
    for (int b = 0; b < cfg_.model_blocks; ++b)
      add_encoder_block(rng, "model_encoder/block" + std::to_string(b), cfg_.model_convs,
                        cfg_.model_kernel, h);

    // start/end output layers
    params_.add("output_layer/w1", xavier(rng, {2 * h, 1}, 2 * h, 1));
    params_.add("output_layer/w2", xavier(rng, {2 * h, 1}, 2 * h, 1));

    // answerability head
    switch (cfg_.head_variant) {
      case HeadVariant::none:
        break;
      case HeadVariant::equant1: {
        const int k = cfg_.head1_kernel, c1 = cfg_.head1_channels1, c2 = cfg_.head1_channels2;
        params_.add("answerability_head/conv1/w",
                    xavier(rng, {k, k, 1, c1}, k * k, k * k * c1));
        params_.add("answerability_head/conv1/b", zeros_param({c1}));
        params_.add("answerability_head/conv2/w",
                    xavier(rng, {k, k, c1, c2}, k * k * c1, k * k * c2));
        params_.add("answerability_head/conv2/b", zeros_param({c2}));
        add_linear(rng, "answerability_head/ff", c2, 1);
        break;
      }
      case HeadVariant::equant2: {
        for (int b = 0; b < cfg_.head_enc_blocks; ++b)
          add_encoder_block(rng, "answerability_head/block" + std::to_string(b),
                            cfg_.model_convs, cfg_.model_kernel, h);
        add_linear(rng, "answerability_head/ff1", h, 1);
        const int k = cfg_.head2_kernel, c1 = cfg_.head2_channels1, c2 = cfg_.head2_channels2;
        params_.add("answerability_head/conv1/w", xavier(rng, {k, 1, c1}, k, k * c1));
        params_.add("answerability_head/conv1/b", zeros_param({c1}));
        params_.add("answerability_head/conv2/w", xavier(rng, {k, c1, c2}, k * c1, k * c2));
        params_.add("answerability_head/conv2/b", zeros_param({c2}));
        add_linear(rng, "answerability_head/ff2", cfg_.equant2_pad_length * c2, 1);
        break;
      }
      case HeadVariant::equant3: {
        for (int b = 0; b < cfg_.head_enc_blocks; ++b)
          add_encoder_block(rng, "answerability_head/block" + std::to_string(b),
                            cfg_.model_convs, cfg_.model_kernel, h);
        add_linear(rng, "answerability_head/ff1", h, cfg_.head3_mid1);
        add_linear(rng, "answerability_head/ff2", cfg_.head3_mid1, cfg_.head3_mid2);
        add_linear(rng, "answerability_head/ff3", cfg_.head3_mid2, 1);
        break;
      }
    }
  }

  Tensor<T> apply_linear(Ctx<T>& ctx, const Tensor<T>& x, const std::string& prefix) const {
    return linear(ctx, x, params_.get(prefix + "_w"), params_.get(prefix + "_b"));
  }

  Tensor<T> highway(Ctx<T>& ctx, const Tensor<T>& x, const std::string& prefix) const {
    auto t = relu(ctx, apply_linear(ctx, x, prefix + "/t"));
    auto g = sigmoid(ctx, apply_linear(ctx, x, prefix + "/g"));
    auto keep = add_scalar(ctx, scale(ctx, g, T{-1}), Tensor<T>::scalar(T{1}));
    return add(ctx, mul(ctx, g, t), mul(ctx, keep, x));
  }

  Tensor<T> embed_side(Ctx<T>& ctx, const std::vector<int>& word_ids,
                       const std::vector<int>& char_ids, int word_len) const {
    const int n = static_cast<int>(word_ids.size());
    if (static_cast<int>(char_ids.size()) != n * word_len)
      throw ShapeError("embed_side: char array does not match tokens x word_len");
    auto words = gather_rows(ctx, word_emb_, word_ids);

    auto char_emb = params_.get("input_embedding/char_emb");
    auto conv_w = params_.get("input_embedding/char_conv/w");
    auto conv_b = params_.get("input_embedding/char_conv/b");
    std::vector<Tensor<T>> rows;
    rows.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      std::vector<int> ids(char_ids.begin() + static_cast<std::ptrdiff_t>(i) * word_len,
                           char_ids.begin() + static_cast<std::ptrdiff_t>(i + 1) * word_len);
      auto ce = gather_rows(ctx, char_emb, ids);
      auto cc = relu(ctx, conv1d(ctx, ce, conv_w, conv_b));
      rows.push_back(max_rows(ctx, cc));
    }
    auto chars = concat_rows(ctx, rows);

    auto x = concat_cols<T>(ctx, {words, chars});
    x = dropout(ctx, x);
    x = highway(ctx, x, "input_embedding/highway1");
    x = highway(ctx, x, "input_embedding/highway2");
    return x;
  }

  Tensor<T> attend(Ctx<T>& ctx, const Tensor<T>& x, const std::string& prefix,
                   const Mask& mask) const {
    const int d = x.dim(1);
    auto q = matmul(ctx, x, params_.get(prefix + "/wq"));
    auto k = matmul(ctx, x, params_.get(prefix + "/wk"));
    auto v = matmul(ctx, x, params_.get(prefix + "/wv"));
    const int heads = cfg_.attention_heads;
    const int dh = d / heads;
    auto one_head = [&](const Tensor<T>& qs, const Tensor<T>& ks, const Tensor<T>& vs) {
      auto logits = scale(ctx, matmul(ctx, qs, transpose(ctx, ks)),
                          static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
      return matmul(ctx, masked_softmax(ctx, logits, 1, mask), vs);
    };
    if (heads == 1) return one_head(q, k, v);
    std::vector<Tensor<T>> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int hh = 0; hh < heads; ++hh) {
      const int c0 = hh * dh, c1 = c0 + dh;
      outs.push_back(one_head(slice_cols(ctx, q, c0, c1), slice_cols(ctx, k, c0, c1),
                              slice_cols(ctx, v, c0, c1)));
    }
    return concat_cols(ctx, outs);
  }

  Tensor<T> encoder_block(Ctx<T>& ctx, Tensor<T> x, const Mask& mask, const std::string& prefix,
                          int nconvs) const {
    const int n = x.dim(0), d = x.dim(1);
    x = add(ctx, x, positional_encoding<T>(n, d));
    auto ln = [&](const Tensor<T>& y, const std::string& lp) {
      return layer_norm(ctx, y, params_.get(prefix + "/" + lp + "/gain"),
                        params_.get(prefix + "/" + lp + "/bias"));
    };
    for (int c = 0; c < nconvs; ++c) {
      const std::string cs = std::to_string(c);
      auto y = ln(x, "ln_conv" + cs);
      y = depthwise_separable_conv1d(ctx, y, params_.get(prefix + "/conv" + cs + "/depth"),
                                     params_.get(prefix + "/conv" + cs + "/point"),
                                     params_.get(prefix + "/conv" + cs + "/bias"), mask);
      x = add(ctx, x, dropout(ctx, y));
    }
    {
      auto y = attend(ctx, ln(x, "ln_attn"), prefix + "/attn", mask);
      x = add(ctx, x, dropout(ctx, y));
    }
    {
      auto y = ln(x, "ln_ffn");
      y = relu(ctx, apply_linear(ctx, y, prefix + "/ffn/w1"));
      y = apply_linear(ctx, y, prefix + "/ffn/w2");
      x = add(ctx, x, dropout(ctx, y));
    }
    return x;
  }

  Tensor<T> trilinear(Ctx<T>& ctx, const Tensor<T>& C, const Tensor<T>& Q) const {
    return trilinear_similarity(ctx, C, Q, params_.get("context_query_attention/w"),
                                params_.get("context_query_attention/bias"));
  }

  Tensor<T> maybe_detach(Ctx<T>& ctx, const Tensor<T>& x) const {
    (void)ctx;
    return cfg_.head_stop_gradient ? detach(x) : x;
  }

  Tensor<T> head1(Ctx<T>& ctx, const Tensor<T>& S, const Tensor<T>& Sbar, const Mask& cmask,
                  const Mask& qmask) const {
    auto in = maybe_detach(ctx, cfg_.head1_raw_similarity ? S : Sbar);
    const int n = in.dim(0), m = in.dim(1);
    const Mask grid = outer(cmask, qmask);
    auto map = reshape(ctx, in, {n, m, 1});
    auto h1 = relu(ctx, conv2d(ctx, map, params_.get("answerability_head/conv1/w"),
                               params_.get("answerability_head/conv1/b"), grid));
    auto h2 = relu(ctx, conv2d(ctx, h1, params_.get("answerability_head/conv2/w"),
                               params_.get("answerability_head/conv2/b"), grid));
    auto pooled = masked_mean_cells(ctx, h2, grid);
    auto z = apply_linear(ctx, pooled, "answerability_head/ff");
    return reshape(ctx, sigmoid(ctx, z), {1});
  }

  Tensor<T> head_encoder(Ctx<T>& ctx, Tensor<T> x, const Mask& cmask) const {
    x = maybe_detach(ctx, x);
    for (int b = 0; b < cfg_.head_enc_blocks; ++b)
      x = encoder_block(ctx, x, cmask, "answerability_head/block" + std::to_string(b),
                        cfg_.model_convs);
    return x;
  }

  Tensor<T> head2(Ctx<T>& ctx, const Tensor<T>& E1, const Mask& cmask) const {
    auto x = head_encoder(ctx, E1, cmask);
    auto scores = apply_linear(ctx, x, "answerability_head/ff1");
    scores = apply_row_mask(ctx, scores, cmask);
    auto padded = pad_rows(ctx, scores, cfg_.equant2_pad_length);
    auto u = relu(ctx, conv1d(ctx, padded, params_.get("answerability_head/conv1/w"),
                              params_.get("answerability_head/conv1/b")));
    u = relu(ctx, conv1d(ctx, u, params_.get("answerability_head/conv2/w"),
                         params_.get("answerability_head/conv2/b")));
    auto flat = reshape(ctx, u, {1, cfg_.equant2_pad_length * cfg_.head2_channels2});
    auto z = apply_linear(ctx, flat, "answerability_head/ff2");
    return reshape(ctx, sigmoid(ctx, z), {1});
  }

  Tensor<T> head3(Ctx<T>& ctx, const Tensor<T>& E1, const Mask& cmask) const {
    auto x = head_encoder(ctx, E1, cmask);
    auto z = relu(ctx, apply_linear(ctx, x, "answerability_head/ff1"));
    z = relu(ctx, apply_linear(ctx, z, "answerability_head/ff2"));
    z = apply_linear(ctx, z, "answerability_head/ff3");
    auto pooled = masked_mean_rows(ctx, z, cmask);
    return reshape(ctx, sigmoid(ctx, pooled), {1});
  }
};

// Decision rule: refuse when the head says unanswerable, otherwise the
// highest-product span no longer than the cap, earliest on ties.
inline Answer predict(const ModelOutput& out, const ModelConfig& cfg, const QAExample& ex) {
  Answer ans;
  if (out.p0.has_value() && *out.p0 < cfg.answerability_threshold) return ans;
  const int n = std::min<int>(static_cast<int>(out.p1.size()),
                              static_cast<int>(ex.context_tokens.size()));
  if (n <= 0 || out.p2.size() < out.p1.size()) return ans;
  int bi = 0, bj = 0;
  double best = -1.0;
  for (int i = 0; i < n; ++i) {
    const int jmax = std::min(n - 1, i + cfg.span_length_cap);
    for (int j = i; j <= jmax; ++j) {
      const double score = out.p1[static_cast<std::size_t>(i)] * out.p2[static_cast<std::size_t>(j)];
      if (score > best) {
        best = score;
        bi = i;
        bj = j;
      }
    }
  }
  ans.answerable = true;
  ans.span = {bi, bj};
  ans.text = span_text(ex.context, ex.context_tokens, bi, bj);
  return ans;
}

}  // namespace equant
