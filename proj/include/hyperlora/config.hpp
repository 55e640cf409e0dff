#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hyperlora/errors.hpp"
#include "hyperlora/generator_trainer.hpp"
#include "hyperlora/hyper_decoder.hpp"
#include "hyperlora/rng.hpp"
#include "hyperlora/serialize.hpp"
#include "hyperlora/task_corpus.hpp"
#include "hyperlora/zoo.hpp"

namespace hyperlora {

// Environment variable naming the default output root (fallback: ./runs).
inline constexpr const char* kOutputRootEnv = "HYPERLORA_OUT";

// ---------------------------------------------------------------------------
// Declarative experiment description: one file drives every command.
// ---------------------------------------------------------------------------

struct CorpusSection {
  std::vector<std::string> tasks = {"reverse", "copy", "sort_digits"};
  std::size_t samples_per_task = 400;
};

struct BackboneSection {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int context_len = 32;
  long pretrain_steps = 300;
  double pretrain_lr = 3e-4;
  long pretrain_batch_size = 16;

  BackboneConfig model_config() const {
    BackboneConfig cfg;
    cfg.d_model = d_model;
    cfg.n_layers = n_layers;
    cfg.n_heads = n_heads;
    cfg.d_ff = d_ff;
    cfg.context_len = context_len;
    cfg.validate();
    return cfg;
  }
};

struct EvalSection {
  std::string protocol = "close_set";  // close_set | open_set | cross_domain
  std::vector<std::string> train_tasks;  // empty close_set = all corpus tasks
  std::vector<std::string> test_tasks;
  std::size_t max_samples = 0;
  bool baselines = false;
  int few_shot_examples = 8;
  int in_context_demos = 3;
};

struct ExperimentConfig {
  std::uint64_t seed = 17;
  std::string output_root;  // empty -> $HYPERLORA_OUT, then ./runs
  std::string run_name;     // empty -> "<protocol>-<config hash prefix>"
  CorpusSection corpus;
  BackboneSection backbone;
  CollectRecipe zoo;
  std::string encoder_id = "hashed_trigram";
  DecoderSpec decoder;
  GeneratorTrainConfig train;
  EvalSection eval;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["output_root"] = output_root;
    j["run_name"] = run_name;
    j["corpus"] = {{"tasks", corpus.tasks},
                   {"samples_per_task", corpus.samples_per_task}};
    j["backbone"] = {{"d_model", backbone.d_model},
                     {"n_layers", backbone.n_layers},
                     {"n_heads", backbone.n_heads},
                     {"d_ff", backbone.d_ff},
                     {"context_len", backbone.context_len},
                     {"pretrain_steps", backbone.pretrain_steps},
                     {"pretrain_lr", backbone.pretrain_lr},
                     {"pretrain_batch_size", backbone.pretrain_batch_size}};
    j["zoo"] = {{"adapt_steps", zoo.adapt_steps},
                {"adapt_lr", zoo.adapt_lr},
                {"snapshot_steps", zoo.snapshot_steps},
                {"snapshot_lr", zoo.snapshot_lr},
                {"batch_size", zoo.batch_size},
                {"weight_decay", zoo.weight_decay},
                {"clip_norm", zoo.clip_norm},
                {"rank", zoo.rank}};
    j["encoder_id"] = encoder_id;
    j["decoder"] = decoder.to_json();
    j["train"] = {{"steps", train.steps},
                  {"pairs_per_step", train.pairs_per_step},
                  {"lr", train.lr},
                  {"weight_decay", train.weight_decay},
                  {"clip_norm", train.clip_norm},
                  {"noise_scale", train.noise_scale},
                  {"batch_len", train.batch_len},
                  {"pool_size", train.pool_size},
                  {"pairing", pairing_strategy_name(train.strategy)},
                  {"condition_source",
                   condition_source_name(train.condition_source)},
                  {"early_stop", train.early_stop},
                  {"plateau_window", train.plateau_window},
                  {"plateau_patience", train.plateau_patience},
                  {"plateau_min_improve", train.plateau_min_improve}};
    j["eval"] = {{"protocol", eval.protocol},
                 {"train_tasks", eval.train_tasks},
                 {"test_tasks", eval.test_tasks},
                 {"max_samples", eval.max_samples},
                 {"baselines", eval.baselines},
                 {"few_shot_examples", eval.few_shot_examples},
                 {"in_context_demos", eval.in_context_demos}};
    return j;
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.seed = j.value("seed", c.seed);
    c.output_root = j.value("output_root", c.output_root);
    c.run_name = j.value("run_name", c.run_name);
    if (j.contains("corpus")) {
      const auto& s = j.at("corpus");
      c.corpus.tasks = s.value("tasks", c.corpus.tasks);
      c.corpus.samples_per_task =
          s.value("samples_per_task", c.corpus.samples_per_task);
    }
    if (j.contains("backbone")) {
      const auto& s = j.at("backbone");
      c.backbone.d_model = s.value("d_model", c.backbone.d_model);
      c.backbone.n_layers = s.value("n_layers", c.backbone.n_layers);
      c.backbone.n_heads = s.value("n_heads", c.backbone.n_heads);
      c.backbone.d_ff = s.value("d_ff", c.backbone.d_ff);
      c.backbone.context_len = s.value("context_len", c.backbone.context_len);
      c.backbone.pretrain_steps =
          s.value("pretrain_steps", c.backbone.pretrain_steps);
      c.backbone.pretrain_lr = s.value("pretrain_lr", c.backbone.pretrain_lr);
      c.backbone.pretrain_batch_size =
          s.value("pretrain_batch_size", c.backbone.pretrain_batch_size);
    }
    if (j.contains("zoo")) {
      const auto& s = j.at("zoo");
      c.zoo.adapt_steps = s.value("adapt_steps", c.zoo.adapt_steps);
      c.zoo.adapt_lr = s.value("adapt_lr", c.zoo.adapt_lr);
      c.zoo.snapshot_steps = s.value("snapshot_steps", c.zoo.snapshot_steps);
      c.zoo.snapshot_lr = s.value("snapshot_lr", c.zoo.snapshot_lr);
      c.zoo.batch_size = s.value("batch_size", c.zoo.batch_size);
      c.zoo.weight_decay = s.value("weight_decay", c.zoo.weight_decay);
      c.zoo.clip_norm = s.value("clip_norm", c.zoo.clip_norm);
      c.zoo.rank = s.value("rank", c.zoo.rank);
    }
    c.encoder_id = j.value("encoder_id", c.encoder_id);
    if (j.contains("decoder")) c.decoder = DecoderSpec::from_json(j.at("decoder"));
    if (j.contains("train")) {
      const auto& s = j.at("train");
      c.train.steps = s.value("steps", c.train.steps);
      c.train.pairs_per_step = s.value("pairs_per_step", c.train.pairs_per_step);
      c.train.lr = s.value("lr", c.train.lr);
      c.train.weight_decay = s.value("weight_decay", c.train.weight_decay);
      c.train.clip_norm = s.value("clip_norm", c.train.clip_norm);
      c.train.noise_scale = s.value("noise_scale", c.train.noise_scale);
      c.train.batch_len = s.value("batch_len", c.train.batch_len);
      c.train.pool_size = s.value("pool_size", c.train.pool_size);
      if (s.contains("pairing"))
        c.train.strategy =
            pairing_strategy_from_string(s.at("pairing").get<std::string>());
      if (s.contains("condition_source"))
        c.train.condition_source = condition_source_from_string(
            s.at("condition_source").get<std::string>());
      c.train.early_stop = s.value("early_stop", c.train.early_stop);
      c.train.plateau_window = s.value("plateau_window", c.train.plateau_window);
      c.train.plateau_patience =
          s.value("plateau_patience", c.train.plateau_patience);
      c.train.plateau_min_improve =
          s.value("plateau_min_improve", c.train.plateau_min_improve);
    }
    if (j.contains("eval")) {
      const auto& s = j.at("eval");
      c.eval.protocol = s.value("protocol", c.eval.protocol);
      c.eval.train_tasks = s.value("train_tasks", c.eval.train_tasks);
      c.eval.test_tasks = s.value("test_tasks", c.eval.test_tasks);
      c.eval.max_samples = s.value("max_samples", c.eval.max_samples);
      c.eval.baselines = s.value("baselines", c.eval.baselines);
      c.eval.few_shot_examples =
          s.value("few_shot_examples", c.eval.few_shot_examples);
      c.eval.in_context_demos =
          s.value("in_context_demos", c.eval.in_context_demos);
    }
    return c;
  }

  void validate() const {
    if (corpus.tasks.empty()) throw ConfigError("corpus needs tasks");
    std::set<std::string> known;
    for (const std::string& t : corpus.tasks) {
      task_kind_from_string(t);  // throws on unknown kinds
      if (!known.insert(t).second)
        throw ConfigError("corpus lists task '" + t + "' twice");
    }
    if (corpus.samples_per_task < 2)
      throw ConfigError("samples_per_task must be >= 2");
    backbone.model_config();
    decoder.validate();
    train.validate();
    auto check_ref = [&](const std::vector<std::string>& ids,
                         const char* where) {
      for (const std::string& id : ids)
        if (!known.count(id))
          throw ConfigError(std::string(where) + " references task '" + id +
                            "' which is not in the corpus");
    };
    check_ref(eval.train_tasks, "eval.train_tasks");
    check_ref(eval.test_tasks, "eval.test_tasks");
    if (eval.protocol != "close_set" && eval.protocol != "open_set" &&
        eval.protocol != "cross_domain")
      throw ConfigError("unknown eval protocol: '" + eval.protocol + "'");
    if (eval.protocol != "close_set" && eval.test_tasks.empty())
      throw ConfigError(eval.protocol + " needs explicit eval.test_tasks");
  }

  // Canonical content hash: serializing via unordered json sorts object keys,
  // so two files with reordered keys hash identically.
  std::uint64_t config_hash() const {
    nlohmann::json sorted = to_json();
    return fnv1a64(sorted.dump());
  }

  // All run randomness flows from the one seed through named channels.
  std::uint64_t sub_seed(const std::string& channel) const {
    return derive_seed(seed, "experiment/" + channel);
  }

  std::filesystem::path resolved_output_root() const {
    if (!output_root.empty()) return output_root;
    if (const char* env = std::getenv(kOutputRootEnv); env && *env)
      return env;
    return "runs";
  }

  std::filesystem::path run_dir() const {
    std::string name = run_name;
    if (name.empty())
      name = eval.protocol + "-" + hash_hex(config_hash()).substr(0, 12);
    return resolved_output_root() / name;
  }
};

// ---------------------------------------------------------------------------
// CLI overrides: --set dotted.path=value applied to the raw json
// ---------------------------------------------------------------------------

inline void apply_config_override(nlohmann::json& j, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key.path=value, got '" + kv +
                      "'");
  const std::string path = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    std::size_t dot = path.find('.', start);
    std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("empty key segment in '" + path + "'");
    if (dot == std::string::npos) {
      // Values parse as json when possible (numbers, bools, arrays), else
      // as a raw string: --set train.lr=3e-4, --set eval.protocol=open_set.
      nlohmann::json parsed = nlohmann::json::parse(raw, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? nlohmann::json(raw) : parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline ExperimentConfig load_experiment_config(
    const std::filesystem::path& path,
    const std::vector<std::string>& overrides = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("cannot parse config " + path.string() + ": " + e.what());
  }
  for (const std::string& kv : overrides) apply_config_override(j, kv);
  ExperimentConfig cfg;
  try {
    cfg = ExperimentConfig::from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() +
                      " has a malformed value: " + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Run-directory ownership: at most one live command per directory
// ---------------------------------------------------------------------------

class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir, bool force = false)
      : lock_path_(run_dir / ".lock") {
    std::filesystem::create_directories(run_dir);
    if (force) std::filesystem::remove_all(lock_path_);
    // create_directory is atomic: it fails exactly when another holder won.
    if (!std::filesystem::create_directory(lock_path_))
      throw StateError("run directory " + run_dir.string() +
                       " is locked by another command (remove " +
                       lock_path_.string() + " if that process is dead)");
    held_ = true;
  }

  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

  ~RunLock() { release(); }

  void release() {
    if (!held_) return;
    std::error_code ec;
    std::filesystem::remove_all(lock_path_, ec);
    held_ = false;
  }

 private:
  std::filesystem::path lock_path_;
  bool held_ = false;
};

}  // namespace hyperlora
