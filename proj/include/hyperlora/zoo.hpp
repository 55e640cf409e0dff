#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hyperlora/backbone.hpp"
#include "hyperlora/errors.hpp"
#include "hyperlora/optim.hpp"
#include "hyperlora/rng.hpp"
#include "hyperlora/serialize.hpp"
#include "hyperlora/task_corpus.hpp"

namespace hyperlora {

// ---------------------------------------------------------------------------
// Supervised training loops over (prompt, answer) pairs
// ---------------------------------------------------------------------------

struct TrainRecipe {
  long steps = 200;
  double lr = 1e-3;
  long batch_size = 16;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
};

namespace detail {

template <typename T>
TokenBatch<T> sample_supervised_batch(const BackboneConfig& cfg,
                                      const TaskDataset& ds, long batch_size,
                                      Rng& rng) {
  auto train_idx = ds.split_indices(Split::kTrain);
  if (train_idx.empty())
    throw DomainError("task '" + ds.task_id + "' has no train samples");
  std::vector<std::string> prompts, answers;
  for (long b = 0; b < batch_size; ++b) {
    std::size_t pick = train_idx[static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(train_idx.size())))];
    prompts.push_back(ds.prompts[pick]);
    answers.push_back(ds.answers[pick]);
  }
  return make_token_batch<T>(cfg, prompts, answers);
}

}  // namespace detail

// Multi-task pretraining of the full backbone: each step draws a task
// uniformly, then a fresh batch from its train split. Returns the loss trace.
template <typename T = float>
std::vector<double> train_backbone(Backbone<T>& model,
                                   const std::vector<TaskDataset>& tasks,
                                   const TrainRecipe& recipe,
                                   std::uint64_t seed) {
  if (tasks.empty()) throw DomainError("backbone training needs tasks");
  if (recipe.steps < 1 || recipe.batch_size < 1)
    throw ConfigError("training recipe needs positive steps and batch size");
  Rng rng(derive_seed(seed, "backbone/train"));
  std::vector<Tensor<T>*> params;
  model.for_each_param(
      [&](const std::string&, Tensor<T>& t) { params.push_back(&t); });
  AdamWConfig ocfg;
  ocfg.lr = recipe.lr;
  ocfg.weight_decay = recipe.weight_decay;
  AdamW<T> opt(ocfg);
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(recipe.steps));
  for (long step = 0; step < recipe.steps; ++step) {
    const TaskDataset& ds = tasks[static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(tasks.size())))];
    TokenBatch<T> batch =
        detail::sample_supervised_batch<T>(model.cfg, ds, recipe.batch_size, rng);
    ForwardCache<T> cache;
    double loss = forward_loss(model, batch, cache);
    if (!std::isfinite(loss))
      throw TrainingError("backbone loss is not finite", step);
    Backbone<T> grads = make_zero_grads(model);
    backward(model, batch, cache, &grads);
    std::vector<Tensor<T>*> gptrs;
    grads.for_each_param(
        [&](const std::string&, Tensor<T>& t) { gptrs.push_back(&t); });
    clip_global_norm(gptrs, recipe.clip_norm);
    opt.step(params, gptrs);
    trace.push_back(loss);
  }
  return trace;
}

// Adapter fine-tuning with the backbone frozen. Returns the loss trace.
template <typename T = float>
std::vector<double> train_lora(const Backbone<T>& model, LoRAAdapter<T>& lora,
                               const TaskDataset& ds, const TrainRecipe& recipe,
                               std::uint64_t seed,
                               AdamW<T>* persistent_opt = nullptr) {
  if (recipe.steps < 0 || recipe.batch_size < 1)
    throw ConfigError("training recipe needs positive batch size");
  Rng rng(derive_seed(seed, "lora/train/" + ds.task_id));
  std::vector<Tensor<T>*> params;
  for (auto& t : lora.A) params.push_back(&t);
  for (auto& t : lora.B) params.push_back(&t);
  AdamWConfig ocfg;
  ocfg.lr = recipe.lr;
  ocfg.weight_decay = recipe.weight_decay;
  AdamW<T> local_opt(ocfg);
  AdamW<T>* opt = persistent_opt ? persistent_opt : &local_opt;
  opt->set_lr(recipe.lr);
  std::vector<double> trace;
  for (long step = 0; step < recipe.steps; ++step) {
    TokenBatch<T> batch =
        detail::sample_supervised_batch<T>(model.cfg, ds, recipe.batch_size, rng);
    ForwardCache<T> cache;
    double loss = forward_loss(model, &lora, batch, cache);
    if (!std::isfinite(loss))
      throw TrainingError("adapter loss is not finite on task " + ds.task_id,
                          step);
    LoRAAdapter<T> lgrads = make_zero_lora_grads(lora);
    backward(model, &lora, batch, cache, static_cast<Backbone<T>*>(nullptr),
             &lgrads);
    std::vector<Tensor<T>*> gptrs;
    for (auto& t : lgrads.A) gptrs.push_back(&t);
    for (auto& t : lgrads.B) gptrs.push_back(&t);
    clip_global_norm(gptrs, recipe.clip_norm);
    opt->step(params, gptrs);
    trace.push_back(loss);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Exact-match evaluation by greedy decoding
// ---------------------------------------------------------------------------

template <typename T = float>
double evaluate_exact_match(const Backbone<T>& model,
                            const LoRAAdapter<T>* lora, const TaskDataset& ds,
                            Split split, std::size_t max_samples = 0) {
  auto idx = ds.split_indices(split);
  if (idx.empty())
    throw DomainError("task '" + ds.task_id + "' has no " + split_name(split) +
                      " samples");
  if (max_samples > 0 && idx.size() > max_samples) idx.resize(max_samples);
  std::size_t hits = 0;
  for (std::size_t i : idx) {
    std::string got = generate_answer(model, lora, ds.prompts[i]);
    if (got == ds.answers[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

// ---------------------------------------------------------------------------
// Checkpoint collection: a throwaway adaptation phase (no saves) followed by
// a low-lr phase that snapshots the adapter after every step.
// ---------------------------------------------------------------------------

struct CollectRecipe {
  long adapt_steps = 75;
  double adapt_lr = 1e-3;
  long snapshot_steps = 50;
  double snapshot_lr = 1e-4;
  long batch_size = 16;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  int rank = 4;
};

// Trains one task's adapter and writes snapshot_steps checkpoint files into
// out_dir/<task_id>/. Returns the relative checkpoint paths in step order.
template <typename T = float>
std::vector<std::string> collect_checkpoints(
    const Backbone<T>& model, const TaskDataset& ds, const CollectRecipe& rec,
    std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (rec.snapshot_steps < 1)
    throw ConfigError("checkpoint collection needs snapshot steps");
  LoRAAdapter<T> lora = init_lora<T>(model.cfg, rec.rank, seed, ds.task_id);
  TrainRecipe phase1;
  phase1.steps = rec.adapt_steps;
  phase1.lr = rec.adapt_lr;
  phase1.batch_size = rec.batch_size;
  phase1.weight_decay = rec.weight_decay;
  phase1.clip_norm = rec.clip_norm;
  AdamW<T> opt;  // moments persist across both phases
  train_lora(model, lora, ds, phase1, derive_seed(seed, "collect/adapt"), &opt);

  TrainRecipe phase2 = phase1;
  phase2.steps = 1;
  phase2.lr = rec.snapshot_lr;
  std::vector<std::string> files;
  for (long s = 1; s <= rec.snapshot_steps; ++s) {
    train_lora(model, lora, ds, phase2,
               derive_seed(seed, "collect/snapshot/" + std::to_string(s)),
               &opt);
    char step_id[16];
    std::snprintf(step_id, sizeof(step_id), "ft_%04ld", s);
    lora.step_id = step_id;
    std::string rel = ds.task_id + "/" + step_id + ".bin";
    save_weight_file(lora_to_weight_file(lora), out_dir / rel);
    files.push_back(rel);
  }
  return files;
}

// ---------------------------------------------------------------------------
// Zoo manifest
// ---------------------------------------------------------------------------

struct ZooTaskEntry {
  std::vector<std::string> checkpoints;  // relative paths, step order
  std::vector<std::string> hashes;       // content hash per checkpoint
  double final_train_loss = 0.0;
  double final_accuracy = -1.0;  // test split exact match; -1 if not measured
};

struct ZooManifest {
  std::string schema = "zoo_manifest_v1";
  std::uint64_t seed = 0;
  std::string backbone_file = "backbone.bin";
  std::string backbone_hash;
  nlohmann::ordered_json backbone_config;
  std::string created_at;  // informational; excluded from the content hash
  std::map<std::string, ZooTaskEntry> tasks;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["schema"] = schema;
    j["seed"] = seed;
    j["backbone_file"] = backbone_file;
    j["backbone_hash"] = backbone_hash;
    j["backbone_config"] = backbone_config;
    j["created_at"] = created_at;
    nlohmann::ordered_json jt;
    for (const auto& [task_id, e] : tasks) {
      nlohmann::ordered_json je;
      je["checkpoints"] = e.checkpoints;
      je["hashes"] = e.hashes;
      je["final_train_loss"] = e.final_train_loss;
      je["final_accuracy"] = e.final_accuracy;
      jt[task_id] = je;
    }
    j["tasks"] = jt;
    return j;
  }

  static ZooManifest from_json(const nlohmann::json& j) {
    ZooManifest m;
    m.schema = j.at("schema").get<std::string>();
    if (m.schema != "zoo_manifest_v1")
      throw StructuralError("unknown zoo manifest schema: " + m.schema);
    m.seed = j.at("seed").get<std::uint64_t>();
    m.backbone_file = j.at("backbone_file").get<std::string>();
    m.backbone_hash = j.at("backbone_hash").get<std::string>();
    m.backbone_config = j.at("backbone_config");
    m.created_at = j.value("created_at", "");
    for (const auto& [task_id, je] : j.at("tasks").items()) {
      ZooTaskEntry e;
      e.checkpoints = je.at("checkpoints").get<std::vector<std::string>>();
      e.hashes = je.at("hashes").get<std::vector<std::string>>();
      e.final_train_loss = je.at("final_train_loss").get<double>();
      e.final_accuracy = je.at("final_accuracy").get<double>();
      m.tasks[task_id] = e;
    }
    return m;
  }

  // Stable content hash: identical inputs give identical zoos regardless of
  // when they were produced. Hashing the key-sorted form keeps the value
  // stable across save/load round trips and json key reordering.
  std::uint64_t content_hash() const {
    nlohmann::json j = to_json();
    j.erase("created_at");
    std::string dump = j.dump();
    return fnv1a64(dump);
  }
};

inline void save_zoo_manifest(const ZooManifest& m,
                              const std::filesystem::path& path) {
  write_file(path, m.to_json().dump(2) + "\n");
}

inline ZooManifest load_zoo_manifest(const std::filesystem::path& path) {
  try {
    return ZooManifest::from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("cannot parse zoo manifest " + path.string() + ": " +
                  e.what());
  }
}

// Verifies that every checkpoint listed in the manifest exists on disk with
// the recorded content hash.
inline void verify_zoo_integrity(const ZooManifest& m,
                                 const std::filesystem::path& zoo_dir) {
  auto check = [&](const std::string& rel, const std::string& want) {
    auto p = zoo_dir / rel;
    if (!std::filesystem::exists(p))
      throw StructuralError("zoo is missing file: " + rel);
    std::string got = hash_hex(file_content_hash(p));
    if (got != want)
      throw StructuralError("zoo file content drifted: " + rel + " (have " +
                            got + ", manifest says " + want + ")");
  };
  check(m.backbone_file, m.backbone_hash);
  for (const auto& [task_id, e] : m.tasks) {
    if (e.checkpoints.size() != e.hashes.size())
      throw StructuralError("manifest hashes misaligned for task " + task_id);
    for (std::size_t i = 0; i < e.checkpoints.size(); ++i)
      check(e.checkpoints[i], e.hashes[i]);
  }
}

}  // namespace hyperlora
