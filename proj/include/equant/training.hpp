#pragma once

// Joint loss with exact answerability gating, the Adam training step, the
// deterministic/resumable training loop, and the trunk-pretraining phase.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "equant/checkpoint.hpp"
#include "equant/config.hpp"
#include "equant/corpus.hpp"
#include "equant/io.hpp"
#include "equant/model.hpp"
#include "equant/rng.hpp"
#include "equant/tensor.hpp"

namespace equant {

struct LossBreakdown {
  double l0 = 0;  // answerability cross-entropy, mean over the batch
  double l1 = 0;  // start cross-entropy (answerable examples only), mean over the batch
  double l2 = 0;  // end cross-entropy, mean over the batch
  double total = 0;  // (sum l0 + sum l1 + sum l2) / N -- same accumulators as the components
  int batch_size = 0;
};

template <typename T>
struct BatchLoss {
  Tensor<T> loss;  // scalar, attached to the caller's tape
  LossBreakdown stats;
};

// One example's term: l0 + delta * (l1 + l2). Unanswerable rows contribute
// only l0; their sentinel span targets are never read, so the gating is
// exact in both the value and every gradient. Without a head there is no l0
// and unanswerable rows are refused. Component values accumulate into acc*.
template <typename T>
Tensor<T> example_loss(Ctx<T>& ctx, const ForwardOut<T>& out, bool has_head, int delta,
                       int span_start, int span_end, const std::string& id, double* acc0,
                       double* acc1, double* acc2) {
  Tensor<T> ex;
  if (has_head) {
    auto l0 = cross_entropy_binary(ctx, out.p0, delta);
    if (acc0) *acc0 += static_cast<double>(l0.item());
    ex = l0;
  } else if (delta == 0) {
    throw ContractError("example_loss: unanswerable example '" + id +
                        "' cannot train a model without an answerability head");
  }
  if (delta == 1) {
    if (span_start < 0 || span_end < 0)
      throw ContractError("example_loss: answerable example '" + id +
                          "' is missing its span target");
    auto l1 = cross_entropy_categorical(ctx, out.p1, span_start);
    auto l2 = cross_entropy_categorical(ctx, out.p2, span_end);
    if (acc1) *acc1 += static_cast<double>(l1.item());
    if (acc2) *acc2 += static_cast<double>(l2.item());
    auto span_loss = add(ctx, l1, l2);
    ex = ex.defined() ? add(ctx, ex, span_loss) : span_loss;
  }
  return ex;
}

// total = (1/N) sum_i [ l0_i + delta_i * (l1_i + l2_i) ].
template <typename T>
BatchLoss<T> joint_loss(Ctx<T>& ctx, const Model<T>& model, const Batch& batch) {
  if (batch.size <= 0) throw ContractError("joint_loss: empty batch");
  const bool has_head = model.config().head_variant != HeadVariant::none;
  Tensor<T> sum;
  double acc0 = 0, acc1 = 0, acc2 = 0;
  for (int row = 0; row < batch.size; ++row) {
    const std::size_t r = static_cast<std::size_t>(row);
    auto fwd = model.forward(ctx, input_from_batch(batch, row));
    auto ex = example_loss(ctx, fwd, has_head, batch.delta[r], batch.span_start[r],
                           batch.span_end[r], batch.ids[r], &acc0, &acc1, &acc2);
    sum = sum.defined() ? add(ctx, sum, ex) : ex;
  }
  BatchLoss<T> out;
  out.loss = scale(ctx, sum, static_cast<T>(1.0 / batch.size));
  out.stats.l0 = acc0 / batch.size;
  out.stats.l1 = acc1 / batch.size;
  out.stats.l2 = acc2 / batch.size;
  out.stats.total = (acc0 + acc1 + acc2) / batch.size;
  out.stats.batch_size = batch.size;
  return out;
}

// One optimizer update on one batch; returns the pre-update loss.
inline LossBreakdown train_step(Model<float>& model, Adam<float>& adam, const Batch& batch,
                                double dropout_rate, Rng& rng) {
  Tape<float> tape;
  auto ctx = Ctx<float>::train(tape, dropout_rate, rng);
  auto bl = joint_loss(ctx, model, batch);
  if (!std::isfinite(bl.stats.total)) {
    std::string ids;
    for (const auto& id : batch.ids) ids += (ids.empty() ? "" : ", ") + id;
    throw ContractError("train_step: non-finite loss " + std::to_string(bl.stats.total) +
                        " on batch [" + ids + "]");
  }
  model.params().zero_grads();
  tape.backward(bl.loss);
  adam.step();
  return bl.stats;
}

struct RunRecord {
  int iteration = 0;  // 1-based count of completed iterations
  double total = 0, l0 = 0, l1 = 0, l2 = 0;
  double lr = 0;
  double wall_seconds = 0;
};

inline std::string format_run_record(const RunRecord& r) {
  return "iteration=" + std::to_string(r.iteration) + " total=" + format_double(r.total) +
         " l0=" + format_double(r.l0) + " l1=" + format_double(r.l1) +
         " l2=" + format_double(r.l2) + " lr=" + format_double(r.lr) +
         " wall_seconds=" + format_double(r.wall_seconds);
}

inline std::vector<RunRecord> parse_run_log(const std::string& text) {
  std::vector<RunRecord> out;
  int last_iter = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    RunRecord r;
    std::size_t cursor = 0;
    while (cursor < line.size()) {
      std::size_t sp = line.find(' ', cursor);
      if (sp == std::string::npos) sp = line.size();
      std::string field = line.substr(cursor, sp - cursor);
      cursor = sp + 1;
      if (field.empty()) continue;
      std::size_t eq = field.find('=');
      if (eq == std::string::npos)
        throw ParseError("run log: malformed field '" + field + "'");
      std::string k = field.substr(0, eq), v = field.substr(eq + 1);
      if (k == "iteration") r.iteration = parse_int_value(k, v);
      else if (k == "total") r.total = parse_double_value(k, v);
      else if (k == "l0") r.l0 = parse_double_value(k, v);
      else if (k == "l1") r.l1 = parse_double_value(k, v);
      else if (k == "l2") r.l2 = parse_double_value(k, v);
      else if (k == "lr") r.lr = parse_double_value(k, v);
      else if (k == "wall_seconds") r.wall_seconds = parse_double_value(k, v);
      else throw ParseError("run log: unknown field '" + k + "'");
    }
    if (r.iteration <= last_iter) throw ParseError("run log: iterations must strictly increase");
    last_iter = r.iteration;
    out.push_back(r);
  }
  return out;
}

inline AdamConfig adam_config_from(const TrainConfig& tc) {
  AdamConfig ac;
  ac.lr = tc.lr;
  ac.beta1 = tc.beta1;
  ac.beta2 = tc.beta2;
  ac.eps = tc.epsilon;
  ac.clip_norm = tc.clip_norm;
  ac.warmup_steps = tc.warmup_steps;
  return ac;
}

// The examples eligible for training batches: encoded and within caps.
inline std::vector<int> training_pool(const std::vector<QAExample>& examples, const Caps& caps) {
  std::vector<int> pool;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    if (!ex.encoded())
      throw ContractError("training_pool: example " + ex.id + " is not encoded");
    if (static_cast<int>(ex.context_word_ids.size()) > caps.context) continue;
    if (static_cast<int>(ex.question_word_ids.size()) > caps.question) continue;
    if (ex.context_word_ids.empty() || ex.question_word_ids.empty()) continue;
    pool.push_back(static_cast<int>(i));
  }
  if (pool.empty()) throw ContractError("training_pool: no example fits the caps");
  return pool;
}

// Batch for a given iteration: a seed-derived sample without replacement.
// Depending only on (seed, iteration) makes any checkpoint a resume point.
inline Batch batch_for_iteration(const std::vector<QAExample>& examples,
                                 const std::vector<int>& pool, const Caps& caps,
                                 const TrainConfig& tc, int iteration) {
  Rng rng(derive_seed(tc.seed, 0x6A7C0000u + static_cast<std::uint64_t>(iteration)));
  const int k = std::min<int>(tc.batch_size, static_cast<int>(pool.size()));
  std::vector<int> picks = pool;
  for (int i = 0; i < k; ++i) {
    const std::size_t j =
        static_cast<std::size_t>(i) + rand_index(rng, picks.size() - static_cast<std::size_t>(i));
    std::swap(picks[static_cast<std::size_t>(i)], picks[j]);
  }
  std::vector<QAExample> chosen;
  chosen.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) chosen.push_back(examples[static_cast<std::size_t>(picks[i])]);
  auto batches = make_batches(chosen, caps, k, false, 0);
  return batches.front();
}

// Runs iterations [start_iteration, max_iterations). Appends one log record
// and saves one checkpoint per interval (and at the end). Deterministic in
// (seed, start state); restoring checkpoint k and passing start_iteration=k
// continues the original trajectory exactly.
inline std::vector<RunRecord> train_loop(Model<float>& model, Adam<float>& adam,
                                         const std::vector<QAExample>& examples, const Caps& caps,
                                         const TrainConfig& tc,
                                         const std::filesystem::path& out_dir,
                                         int start_iteration = 0) {
  tc.validate();
  if (start_iteration < 0 || start_iteration >= tc.max_iterations)
    throw ContractError("train_loop: start_iteration " + std::to_string(start_iteration) +
                        " outside [0, " + std::to_string(tc.max_iterations) + ")");
  std::filesystem::create_directories(out_dir);
  auto pool = training_pool(examples, caps);

  std::vector<RunRecord> records;
  std::ofstream log(out_dir / "run_log.txt", start_iteration == 0 ? std::ios::trunc
                                                                  : std::ios::app);
  if (!log) throw IoError("cannot open run log in " + out_dir.string());
  const auto t0 = std::chrono::steady_clock::now();

  for (int iter = start_iteration; iter < tc.max_iterations; ++iter) {
    auto batch = batch_for_iteration(examples, pool, caps, tc, iter);
    Rng drop_rng(derive_seed(tc.seed, 0xD09F0000u + static_cast<std::uint64_t>(iter)));
    auto stats = train_step(model, adam, batch, tc.dropout, drop_rng);

    const int done = iter + 1;
    if (done % tc.checkpoint_interval == 0 || done == tc.max_iterations) {
      RunRecord r;
      r.iteration = done;
      r.total = stats.total;
      r.l0 = stats.l0;
      r.l1 = stats.l1;
      r.l2 = stats.l2;
      r.lr = adam.effective_lr();
      r.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      records.push_back(r);
      log << format_run_record(r) << "\n";
      log.flush();
      if (!log) throw IoError("run log write failed in " + out_dir.string());
      save_checkpoint(out_dir / ("checkpoint_" + std::to_string(done) + ".ckpt"), model, &adam);
    }
  }
  return records;
}

// Phase one: span-only training of a head-less trunk on answerable data.
inline std::vector<RunRecord> pretrain_trunk(Model<float>& model, Adam<float>& adam,
                                             const std::vector<QAExample>& examples,
                                             const Caps& caps, const TrainConfig& tc,
                                             const std::filesystem::path& out_dir) {
  if (model.config().head_variant != HeadVariant::none)
    throw ContractError("pretrain_trunk: model must have head_variant none, got " +
                        to_string(model.config().head_variant));
  for (const auto& ex : examples)
    if (ex.answerable != 1)
      throw ContractError("pretrain_trunk: unanswerable example '" + ex.id +
                          "' in the pretraining set");
  return train_loop(model, adam, examples, caps, tc, out_dir);
}

}  // namespace equant
