#pragma once

// Versioned checkpoint container: the full model config, the char vocabulary
// size, every named parameter as raw little-endian float32, and (optionally)
// Adam moments for exact resume. Restores are validate-then-copy so a failed
// restore never leaves a half-mutated model.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "equant/adam.hpp"
#include "equant/config.hpp"
#include "equant/errors.hpp"
#include "equant/io.hpp"
#include "equant/model.hpp"

namespace equant {

inline constexpr char kCheckpointMagic[9] = "EQCKPT01";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointParam {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct CheckpointSlot {
  std::string name;
  std::vector<float> m;
  std::vector<float> v;
};

struct Checkpoint {
  ModelConfig config;
  int char_vocab = 0;
  std::vector<CheckpointParam> params;
  bool has_optimizer = false;
  std::int64_t optimizer_step = 0;
  std::vector<CheckpointSlot> slots;
};

struct RestoreReport {
  std::vector<std::string> restored;  // copied from the checkpoint
  std::vector<std::string> fresh;     // kept their current (initialized) values
};

inline void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                            const Adam<float>* adam = nullptr) {
  io::atomic_write(path, [&](std::ostream& out) {
    io::write_bytes(out, kCheckpointMagic, 8);
    io::write_u32(out, kCheckpointVersion);
    io::write_str(out, serialize_model_config(model.config()));
    io::write_u32(out, static_cast<std::uint32_t>(model.char_vocab_size()));
    const auto& ps = model.params();
    io::write_u32(out, static_cast<std::uint32_t>(ps.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      io::write_str(out, ps.name(i));
      auto t = ps.at(i);
      io::write_u32(out, static_cast<std::uint32_t>(t.ndim()));
      for (int d = 0; d < t.ndim(); ++d) io::write_i32(out, t.dim(d));
      io::write_u64(out, static_cast<std::uint64_t>(t.numel()));
      for (float v : t.value()) io::write_f32(out, v);
    }
    io::write_u8(out, adam ? 1 : 0);
    if (adam) {
      io::write_u64(out, static_cast<std::uint64_t>(adam->step_count()));
      io::write_u32(out, static_cast<std::uint32_t>(ps.size()));
      for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& slot = adam->slot(i);
        io::write_str(out, ps.name(i));
        io::write_u64(out, slot.m.size());
        for (float v : slot.m) io::write_f32(out, v);
        for (float v : slot.v) io::write_f32(out, v);
      }
    }
  });
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto in = io::open_input(path);
  try {
    char magic[8];
    io::read_bytes(in, magic, 8);
    if (std::string(magic, 8) != kCheckpointMagic)
      throw RestoreError(path.string() + ": not a checkpoint file");
    const auto version = io::read_u32(in);
    if (version != kCheckpointVersion)
      throw RestoreError(path.string() + ": unsupported checkpoint version " +
                         std::to_string(version));
    Checkpoint ck;
    ck.config = parse_model_config(io::read_str(in));
    ck.char_vocab = static_cast<int>(io::read_u32(in));
    const auto n_params = io::read_u32(in);
    ck.params.resize(n_params);
    for (auto& p : ck.params) {
      p.name = io::read_str(in);
      const auto ndim = io::read_u32(in);
      p.shape.resize(ndim);
      for (auto& d : p.shape) d = io::read_i32(in);
      const auto count = io::read_u64(in);
      if (static_cast<std::int64_t>(count) != numel_of(p.shape))
        throw RestoreError(path.string() + ": parameter '" + p.name +
                           "' payload does not match its shape");
      p.values.resize(count);
      for (auto& v : p.values) v = io::read_f32(in);
    }
    ck.has_optimizer = io::read_u8(in) != 0;
    if (ck.has_optimizer) {
      ck.optimizer_step = static_cast<std::int64_t>(io::read_u64(in));
      const auto n_slots = io::read_u32(in);
      ck.slots.resize(n_slots);
      for (auto& s : ck.slots) {
        s.name = io::read_str(in);
        const auto count = io::read_u64(in);
        s.m.resize(count);
        for (auto& v : s.m) v = io::read_f32(in);
        s.v.resize(count);
        for (auto& v : s.v) v = io::read_f32(in);
      }
    }
    return ck;
  } catch (const IoError& e) {
    throw RestoreError(path.string() + ": " + e.what());
  }
}

// Copies every checkpoint parameter into the model by name. Parameters the
// checkpoint does not mention keep their fresh initialization (that is the
// trunk-into-head workflow). Unknown names or shape conflicts abort before
// anything is written.
inline RestoreReport restore_partial(const Checkpoint& ck, Model<float>& model) {
  auto& ps = model.params();
  for (const auto& p : ck.params) {
    if (!ps.has(p.name))
      throw RestoreError("checkpoint parameter '" + p.name + "' does not exist in the model");
    auto t = ps.get(p.name);
    if (t.shape() != p.shape)
      throw RestoreError("parameter '" + p.name + "': checkpoint shape " + shape_str(p.shape) +
                         " conflicts with model shape " + shape_str(t.shape()));
  }
  RestoreReport report;
  std::set<std::string> restored;
  for (const auto& p : ck.params) {
    auto t = ps.get(p.name);
    std::copy(p.values.begin(), p.values.end(), t.value().begin());
    restored.insert(p.name);
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (restored.count(ps.name(i)))
      report.restored.push_back(ps.name(i));
    else
      report.fresh.push_back(ps.name(i));
  }
  return report;
}

// Restores optimizer moments into an Adam instance already attached to the
// model's parameters (same registration order).
inline void restore_optimizer(const Checkpoint& ck, const Model<float>& model,
                              Adam<float>& adam) {
  if (!ck.has_optimizer) throw RestoreError("checkpoint carries no optimizer state");
  const auto& ps = model.params();
  if (ck.slots.size() != ps.size())
    throw RestoreError("optimizer state holds " + std::to_string(ck.slots.size()) +
                       " slots for " + std::to_string(ps.size()) + " parameters");
  for (std::size_t i = 0; i < ck.slots.size(); ++i) {
    if (ck.slots[i].name != ps.name(i))
      throw RestoreError("optimizer slot '" + ck.slots[i].name + "' does not match parameter '" +
                         ps.name(i) + "'");
    if (ck.slots[i].m.size() != static_cast<std::size_t>(ps.at(i).numel()))
      throw RestoreError("optimizer slot '" + ck.slots[i].name + "' has the wrong size");
  }
  for (std::size_t i = 0; i < ck.slots.size(); ++i) {
    adam.slot(i).m = ck.slots[i].m;
    adam.slot(i).v = ck.slots[i].v;
  }
  adam.set_step_count(ck.optimizer_step);
}

// Builds the exact model the checkpoint was saved from; every parameter must
// be present.
inline Model<float> model_from_checkpoint(const Checkpoint& ck,
                                          const Tensor<float>& word_embeddings,
                                          std::uint64_t seed = 0) {
  Model<float> model(ck.config, word_embeddings, ck.char_vocab, seed);
  auto report = restore_partial(ck, model);
  if (!report.fresh.empty())
    throw RestoreError("checkpoint does not cover parameter '" + report.fresh.front() + "' (" +
                       std::to_string(report.fresh.size()) + " missing)");
  return model;
}

}  // namespace equant
