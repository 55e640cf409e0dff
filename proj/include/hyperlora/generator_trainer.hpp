#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hyperlora/condition_encoder.hpp"
#include "hyperlora/errors.hpp"
#include "hyperlora/hyper_decoder.hpp"
#include "hyperlora/optim.hpp"
#include "hyperlora/rng.hpp"
#include "hyperlora/task_corpus.hpp"
#include "hyperlora/weight_codec.hpp"
#include "hyperlora/zoo.hpp"

namespace hyperlora {

// ---------------------------------------------------------------------------
// Generator training: map prompt batches (conditions) onto checkpoint token
// grids (targets) with a plain MSE objective. Each training pair couples one
// checkpoint of one task with a batch of that task's prompts.
// ---------------------------------------------------------------------------

// All checkpoints of a zoo, tokenized once up front. Every checkpoint must
// agree on the tokenization plan.
template <typename T>
struct CheckpointBank {
  TokenizationPlan plan;
  std::vector<std::string> task_ids;  // parallel to grids
  std::vector<std::string> names;     // checkpoint file names, parallel
  std::vector<Tensor<T>> grids;
  std::map<std::string, std::vector<std::size_t>> by_task;

  std::size_t size() const { return grids.size(); }
};

template <typename T = float>
CheckpointBank<T> load_checkpoint_bank(const std::filesystem::path& zoo_dir,
                                       const ZooManifest& manifest,
                                       std::int64_t c_w, std::int64_t l_w) {
  CheckpointBank<T> bank;
  bool first = true;
  for (const auto& [task_id, entry] : manifest.tasks) {
    for (const std::string& rel : entry.checkpoints) {
      WeightFile wf = load_weight_file(zoo_dir / rel);
      LoRAAdapter<float> adapter = lora_from_weight_file<float>(wf);
      TokenizationPlan plan;
      Tensor<float> grid = tokenize_lora(adapter, c_w, l_w, &plan);
      if (first) {
        bank.plan = plan;
        first = false;
      } else if (plan.to_json() != bank.plan.to_json()) {
        throw StructuralError(
            "zoo checkpoints disagree on the tokenization plan (" + rel + ")");
      }
      bank.task_ids.push_back(task_id);
      bank.names.push_back(rel);
      if constexpr (std::is_same_v<T, float>) {
        bank.grids.push_back(std::move(grid));
      } else {
        bank.grids.push_back(grid.template cast<T>());
      }
      bank.by_task[task_id].push_back(bank.grids.size() - 1);
    }
  }
  if (bank.grids.empty())
    throw StructuralError("zoo manifest lists no checkpoints");
  return bank;
}

enum class PairingStrategy {
  kFixedPool = 1,   // prompt pool size equals batch length; the batch is the
                    // whole pool, identical for every pair of a task
  kSampledPool = 2  // each pair draws a fresh batch from a larger pool
};

inline std::string pairing_strategy_name(PairingStrategy s) {
  return s == PairingStrategy::kFixedPool ? "fixed_pool" : "sampled_pool";
}

inline PairingStrategy pairing_strategy_from_int(int v) {
  if (v == 1) return PairingStrategy::kFixedPool;
  if (v == 2) return PairingStrategy::kSampledPool;
  throw ConfigError("pairing strategy must be 1 or 2, got " +
                    std::to_string(v));
}

inline PairingStrategy pairing_strategy_from_string(std::string_view name) {
  if (name == "fixed_pool") return PairingStrategy::kFixedPool;
  if (name == "sampled_pool") return PairingStrategy::kSampledPool;
  throw ConfigError("unknown pairing strategy: '" + std::string(name) + "'");
}

struct GeneratorTrainConfig {
  long steps = 2000;
  int pairs_per_step = 2;
  double lr = 3e-5;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  double noise_scale = 1e-4;
  int batch_len = 8;   // N of the condition tensor
  int pool_size = 8;   // prompt pool per task
  PairingStrategy strategy = PairingStrategy::kFixedPool;
  ConditionSource condition_source = ConditionSource::kPromptOnly;
  // Plateau early stop: after each window, training stops once the window
  // mean fails to improve on the best window by min_improve (relative),
  // patience windows in a row.
  bool early_stop = true;
  long plateau_window = 100;
  int plateau_patience = 3;
  double plateau_min_improve = 0.01;

  void validate() const {
    if (steps < 1) throw ConfigError("generator steps must be positive");
    if (pairs_per_step < 1)
      throw ConfigError("pairs_per_step must be positive");
    if (lr <= 0.0) throw ConfigError("generator lr must be positive");
    if (noise_scale < 0.0) throw ConfigError("noise_scale must be >= 0");
    if (batch_len < 1) throw ConfigError("batch_len must be positive");
    if (strategy == PairingStrategy::kFixedPool && pool_size != batch_len)
      throw ConfigError(
          "fixed_pool pairing requires pool_size == batch_len, got pool " +
          std::to_string(pool_size) + " vs batch " + std::to_string(batch_len));
    if (strategy == PairingStrategy::kSampledPool && pool_size <= batch_len)
      throw ConfigError(
          "sampled_pool pairing requires pool_size > batch_len, got pool " +
          std::to_string(pool_size) + " vs batch " + std::to_string(batch_len));
    if (plateau_window < 1) throw ConfigError("plateau_window must be >= 1");
    if (plateau_patience < 1) throw ConfigError("plateau_patience must be >= 1");
  }
};

template <typename T>
struct TrainPair {
  std::string task_id;
  std::string checkpoint;
  Tensor<T> condition;  // [N, L, C]
  Tensor<T> target;     // [n_w, l_w, c_w]
};

// Adds uniform noise to the real-weight cells of a grid; padding cells stay
// exactly zero so the generator keeps learning them as zeros.
template <typename T>
void augment_target(Tensor<T>& grid, const TokenizationPlan& plan,
                    double scale, Rng& rng) {
  if (grid.shape() != plan.grid_shape())
    throw StructuralError("augment_target: grid does not match the plan");
  if (scale == 0.0) return;
  for (std::int64_t i = 0; i < plan.total_floats; ++i)
    grid[i] = static_cast<T>(static_cast<double>(grid[i]) +
                             rng.uniform(-scale, scale));
}

namespace detail {

// The batch seed realizes the pairing strategy: a fixed pool re-uses one
// batch per task for the whole run, a sampled pool draws fresh batches.
inline std::uint64_t pair_batch_seed(const GeneratorTrainConfig& cfg,
                                     std::uint64_t run_seed,
                                     const std::string& task_id, Rng& step_rng) {
  if (cfg.strategy == PairingStrategy::kFixedPool)
    return derive_seed(run_seed, "gen/batch/" + task_id);
  return step_rng.next_u64();
}

}  // namespace detail

template <typename T>
TrainPair<T> sample_train_pair(const CheckpointBank<T>& bank,
                               const std::map<std::string, TaskDataset>& tasks,
                               const std::vector<std::string>& train_task_ids,
                               const ConditionEncoder& encoder,
                               const GeneratorTrainConfig& cfg,
                               std::uint64_t run_seed, Rng& step_rng) {
  if (train_task_ids.empty())
    throw DomainError("no training tasks for the generator");
  const std::string& task_id = train_task_ids[static_cast<std::size_t>(
      step_rng.uniform_int(static_cast<std::int64_t>(train_task_ids.size())))];
  auto bt = bank.by_task.find(task_id);
  if (bt == bank.by_task.end() || bt->second.empty())
    throw StructuralError("no checkpoints in the bank for task " + task_id);
  auto dt = tasks.find(task_id);
  if (dt == tasks.end())
    throw StructuralError("no dataset for task " + task_id);
  const std::size_t grid_idx = bt->second[static_cast<std::size_t>(
      step_rng.uniform_int(static_cast<std::int64_t>(bt->second.size())))];

  const std::uint64_t batch_seed =
      detail::pair_batch_seed(cfg, run_seed, task_id, step_rng);
  PromptBatch batch = sample_prompt_batch(dt->second, cfg.batch_len,
                                          cfg.pool_size, batch_seed,
                                          cfg.condition_source);
  TrainPair<T> pair;
  pair.task_id = task_id;
  pair.checkpoint = bank.names[grid_idx];
  Tensor<float> cond = encoder.encode_batch(batch);
  if constexpr (std::is_same_v<T, float>) {
    pair.condition = std::move(cond);
  } else {
    pair.condition = cond.template cast<T>();
  }
  pair.target = bank.grids[grid_idx];
  augment_target(pair.target, bank.plan, cfg.noise_scale, step_rng);
  return pair;
}

struct GeneratorTrainResult {
  std::vector<double> loss_trace;       // cumulative, one entry per step
  std::vector<double> grad_norm_trace;  // post-clip global norm, this call only
  long steps_run = 0;                   // steps executed by this call
  bool early_stopped = false;
};

// Trains the decoder in place. Deterministic given (seed, prior_trace.size()):
// each step re-derives its RNG from the step index, so an interrupted run
// resumed from a state file continues bit-for-bit.
template <typename T>
GeneratorTrainResult train_generator(
    HyperDecoder<T>& dec, const CheckpointBank<T>& bank,
    const std::map<std::string, TaskDataset>& tasks,
    const std::vector<std::string>& train_task_ids,
    const ConditionEncoder& encoder, const GeneratorTrainConfig& cfg,
    std::uint64_t seed, AdamW<T>& opt,
    std::vector<double> prior_trace = {},
    const std::function<void(long, double)>& on_step = {}) {
  cfg.validate();
  dec.spec.validate();

  const std::vector<std::int64_t> want_in = {cfg.batch_len,
                                             encoder.max_positions(),
                                             encoder.feature_dim()};
  if (dec.spec.in_shape() != want_in)
    throw ConfigError("decoder input " +
                      Tensor<T>::zeros(dec.spec.in_shape()).shape_str() +
                      " does not match the condition shape " +
                      Tensor<T>::zeros(want_in).shape_str());
  if (dec.spec.out_shape() != bank.plan.grid_shape())
    throw ConfigError("decoder output does not match the checkpoint grid");
  for (const std::string& id : train_task_ids)
    if (!bank.by_task.count(id))
      throw ConfigError("training task " + id + " has no zoo checkpoints");

  GeneratorTrainResult result;
  result.loss_trace = std::move(prior_trace);

  // Parameter and gradient views in a stable order.
  HyperDecoder<T> grads = make_zero_decoder_grads(dec);
  std::vector<Tensor<T>*> params, gptrs;
  dec.for_each_param(
      [&](const std::string&, Tensor<T>& t) { params.push_back(&t); });
  grads.for_each_param(
      [&](const std::string&, Tensor<T>& t) { gptrs.push_back(&t); });

  // Replay the early-stop window bookkeeping over the resumed prefix.
  double best_window = std::numeric_limits<double>::infinity();
  int stall = 0;
  auto window_update = [&](long completed_steps) -> bool {
    if (!cfg.early_stop || completed_steps % cfg.plateau_window != 0)
      return false;
    double mean = 0.0;
    for (long i = completed_steps - cfg.plateau_window; i < completed_steps;
         ++i)
      mean += result.loss_trace[static_cast<std::size_t>(i)];
    mean /= static_cast<double>(cfg.plateau_window);
    if (mean < best_window * (1.0 - cfg.plateau_min_improve)) {
      best_window = mean;
      stall = 0;
    } else if (++stall >= cfg.plateau_patience) {
      return true;
    }
    return false;
  };
  for (long s = 1; s <= static_cast<long>(result.loss_trace.size()); ++s)
    if (window_update(s)) {
      result.early_stopped = true;
      return result;  // the resumed run had already plateaued
    }

  for (long step = static_cast<long>(result.loss_trace.size());
       step < cfg.steps; ++step) {
    Rng rng(derive_seed(seed, "gen/step/" + std::to_string(step)));
    for (Tensor<T>* g : gptrs) g->zero();

    double loss = 0.0;
    for (int p = 0; p < cfg.pairs_per_step; ++p) {
      TrainPair<T> pair = sample_train_pair(bank, tasks, train_task_ids,
                                            encoder, cfg, seed, rng);
      DecoderForwardCache<T> cache;
      Tensor<T> out = decoder_forward(dec, pair.condition, cache);
      Tensor<T> dout;
      loss += mse_loss(out, pair.target, &dout);
      decoder_backward(dec, dout, cache, grads);
    }
    loss /= cfg.pairs_per_step;
    if (!std::isfinite(loss))
      throw TrainingError("generator loss is not finite", step);
    if (cfg.pairs_per_step > 1) {
      const T inv = static_cast<T>(1.0 / cfg.pairs_per_step);
      for (Tensor<T>* g : gptrs)
        for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] *= inv;
    }
    clip_global_norm(gptrs, cfg.clip_norm);
    double post_sq = 0.0;
    for (const Tensor<T>* g : gptrs)
      for (std::int64_t i = 0; i < g->numel(); ++i)
        post_sq += static_cast<double>((*g)[i]) * static_cast<double>((*g)[i]);
    result.grad_norm_trace.push_back(std::sqrt(post_sq));
    opt.step(params, gptrs);

    result.loss_trace.push_back(loss);
    ++result.steps_run;
    if (on_step) on_step(step, loss);
    if (window_update(step + 1)) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Resumable state: decoder weights, optimizer moments, loss trace.
// ---------------------------------------------------------------------------

template <typename T>
void save_generator_state(const std::filesystem::path& path,
                          HyperDecoder<T>& dec, const AdamW<T>& opt,
                          const std::vector<double>& trace) {
  WeightFile wf = decoder_to_weight_file(dec);
  wf.meta["kind"] = "generator_state";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%ld", opt.step_count());
  wf.meta["opt_step"] = buf;
  const auto& m = opt.moments_m();
  const auto& v = opt.moments_v();
  for (std::size_t i = 0; i < m.size(); ++i) {
    Tensor<float> tm({static_cast<std::int64_t>(m[i].size())});
    Tensor<float> tv({static_cast<std::int64_t>(v[i].size())});
    for (std::size_t j = 0; j < m[i].size(); ++j) {
      tm[static_cast<std::int64_t>(j)] = static_cast<float>(m[i][j]);
      tv[static_cast<std::int64_t>(j)] = static_cast<float>(v[i][j]);
    }
    wf.add("opt.m." + std::to_string(i), tm);
    wf.add("opt.v." + std::to_string(i), tv);
  }
  // %.17g round-trips doubles exactly, so the resumed early-stop bookkeeping
  // sees the same losses it would have seen uninterrupted.
  std::string joined;
  for (double d : trace) {
    char num[40];
    std::snprintf(num, sizeof num, "%.17g", d);
    if (!joined.empty()) joined += ',';
    joined += num;
  }
  wf.meta["trace"] = joined;
  save_weight_file(wf, path);
}

template <typename T = float>
void load_generator_state(const std::filesystem::path& path,
                          HyperDecoder<T>& dec, AdamW<T>& opt,
                          std::vector<double>& trace) {
  WeightFile wf = load_weight_file(path);
  if (wf.meta_or("kind", "") != "generator_state")
    throw StructuralError("not a generator state file: " + path.string());
  wf.meta["kind"] = "generator";  // reuse the checkpoint loader for weights
  HyperDecoder<T> loaded = decoder_from_weight_file<T>(wf);
  dec = std::move(loaded);

  std::size_t n_groups = 0;
  dec.for_each_param([&](const std::string&, Tensor<T>&) { ++n_groups; });
  std::vector<std::vector<T>> m(n_groups), v(n_groups);
  for (std::size_t i = 0; i < n_groups; ++i) {
    Tensor<float> tm = wf.get("opt.m." + std::to_string(i));
    Tensor<float> tv = wf.get("opt.v." + std::to_string(i));
    m[i].assign(tm.data(), tm.data() + tm.numel());
    v[i].assign(tv.data(), tv.data() + tv.numel());
  }
  opt.restore(std::move(m), std::move(v),
              std::stol(wf.meta_or("opt_step", "0")));

  trace.clear();
  const std::string joined = wf.meta_or("trace", "");
  std::size_t pos = 0;
  while (pos < joined.size()) {
    std::size_t comma = joined.find(',', pos);
    if (comma == std::string::npos) comma = joined.size();
    trace.push_back(std::strtod(joined.substr(pos, comma - pos).c_str(),
                                nullptr));
    pos = comma + 1;
  }
}

}  // namespace hyperlora
