#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hyperlora/condition_encoder.hpp"
#include "hyperlora/errors.hpp"
#include "hyperlora/generator_trainer.hpp"
#include "hyperlora/hyper_decoder.hpp"
#include "hyperlora/task_corpus.hpp"
#include "hyperlora/weight_codec.hpp"
#include "hyperlora/zoo.hpp"

namespace hyperlora {

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

// Accuracies are exact-match rates in [0, 1]; -1 marks a column that was not
// measured in this run.
struct TaskEval {
  std::string task_id;
  double generated = -1.0;
  std::vector<std::pair<std::string, double>> training_adapters;
  double training_adapter_avg = -1.0;
  double base_backbone = -1.0;
  double source_checkpoint = -1.0;  // the task's own final zoo snapshot
  double full_shot = -1.0;          // freshly tuned adapter, zoo recipe
  double few_shot = -1.0;           // adapter tuned on a handful of examples
  double in_context = -1.0;         // demonstrations in the prompt, no tuning
};

struct TimingTable {
  double generation_seconds = -1.0;
  double tuning_seconds = -1.0;
  double speedup_ratio = -1.0;
  double encoder_warmup_seconds = -1.0;
};

struct EvalReport {
  std::string protocol;  // close_set | open_set | cross_domain
  std::vector<std::string> train_tasks;
  std::vector<std::string> test_tasks;
  std::string pairing;
  std::string condition_source;
  std::uint64_t seed = 0;
  std::vector<TaskEval> rows;
  TimingTable timing;
  // What the generator pipeline consumed, tagged by purpose:
  //   train:checkpoint:<path>, condition:prompts:<task>,
  //   condition:answers:<task>, baseline:answers:<task>
  std::vector<std::string> provenance;

  void validate() const {
    auto ok = [](double a) { return a == -1.0 || (a >= 0.0 && a <= 1.0); };
    for (const TaskEval& r : rows) {
      for (double a : {r.generated, r.training_adapter_avg, r.base_backbone,
                       r.source_checkpoint, r.full_shot, r.few_shot,
                       r.in_context})
        if (!ok(a))
          throw StructuralError("accuracy out of range for task " + r.task_id);
      for (const auto& [name, a] : r.training_adapters)
        if (!ok(a))
          throw StructuralError("adapter accuracy out of range: " + name);
      if (r.training_adapter_avg != -1.0) {
        if (r.training_adapters.empty())
          throw StructuralError("stored average without adapter rows");
        double mean = 0.0;
        for (const auto& [name, a] : r.training_adapters) mean += a;
        mean /= static_cast<double>(r.training_adapters.size());
        if (std::abs(mean - r.training_adapter_avg) > 1e-9)
          throw StructuralError(
              "training-adapter average does not match its constituents for "
              "task " +
              r.task_id);
      }
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["protocol"] = protocol;
    j["train_tasks"] = train_tasks;
    j["test_tasks"] = test_tasks;
    j["pairing"] = pairing;
    j["condition_source"] = condition_source;
    j["seed"] = seed;
    nlohmann::ordered_json jr = nlohmann::ordered_json::array();
    for (const TaskEval& r : rows) {
      nlohmann::ordered_json row;
      row["task_id"] = r.task_id;
      row["generated"] = r.generated;
      nlohmann::ordered_json ads = nlohmann::ordered_json::array();
      for (const auto& [name, a] : r.training_adapters)
        ads.push_back({{"adapter", name}, {"accuracy", a}});
      row["training_adapters"] = ads;
      row["training_adapter_avg"] = r.training_adapter_avg;
      row["base_backbone"] = r.base_backbone;
      row["source_checkpoint"] = r.source_checkpoint;
      row["full_shot"] = r.full_shot;
      row["few_shot"] = r.few_shot;
      row["in_context"] = r.in_context;
      jr.push_back(row);
    }
    j["rows"] = jr;
    j["timing"] = {{"generation_seconds", timing.generation_seconds},
                   {"tuning_seconds", timing.tuning_seconds},
                   {"speedup_ratio", timing.speedup_ratio},
                   {"encoder_warmup_seconds", timing.encoder_warmup_seconds}};
    j["provenance"] = provenance;
    return j;
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.protocol = j.at("protocol").get<std::string>();
    r.train_tasks = j.at("train_tasks").get<std::vector<std::string>>();
    r.test_tasks = j.at("test_tasks").get<std::vector<std::string>>();
    r.pairing = j.at("pairing").get<std::string>();
    r.condition_source = j.at("condition_source").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& row : j.at("rows")) {
      TaskEval t;
      t.task_id = row.at("task_id").get<std::string>();
      t.generated = row.at("generated").get<double>();
      for (const auto& a : row.at("training_adapters"))
        t.training_adapters.emplace_back(a.at("adapter").get<std::string>(),
                                         a.at("accuracy").get<double>());
      t.training_adapter_avg = row.at("training_adapter_avg").get<double>();
      t.base_backbone = row.at("base_backbone").get<double>();
      t.source_checkpoint = row.at("source_checkpoint").get<double>();
      t.full_shot = row.at("full_shot").get<double>();
      t.few_shot = row.at("few_shot").get<double>();
      t.in_context = row.at("in_context").get<double>();
      r.rows.push_back(std::move(t));
    }
    const auto& tj = j.at("timing");
    r.timing.generation_seconds = tj.at("generation_seconds").get<double>();
    r.timing.tuning_seconds = tj.at("tuning_seconds").get<double>();
    r.timing.speedup_ratio = tj.at("speedup_ratio").get<double>();
    r.timing.encoder_warmup_seconds =
        tj.at("encoder_warmup_seconds").get<double>();
    r.provenance = j.at("provenance").get<std::vector<std::string>>();
    r.validate();
    return r;
  }

  // accuracy.csv: one wide row per test task (-1 rendered empty);
  // adapters.csv: one row per (task, training adapter).
  void save(const std::filesystem::path& dir) const {
    validate();
    write_file(dir / "report.json", to_json().dump(2) + "\n");
    auto cell = [](double a) {
      if (a == -1.0) return std::string();
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", a);
      return std::string(buf);
    };
    std::string csv =
        "task_id,generated,training_adapter_avg,base_backbone,"
        "source_checkpoint,full_shot,few_shot,in_context\n";
    for (const TaskEval& r : rows)
      csv += r.task_id + "," + cell(r.generated) + "," +
             cell(r.training_adapter_avg) + "," + cell(r.base_backbone) + "," +
             cell(r.source_checkpoint) + "," + cell(r.full_shot) + "," +
             cell(r.few_shot) + "," + cell(r.in_context) + "\n";
    write_file(dir / "accuracy.csv", csv);
    std::string adapters = "task_id,adapter,accuracy\n";
    for (const TaskEval& r : rows)
      for (const auto& [name, a] : r.training_adapters)
        adapters += r.task_id + "," + name + "," + cell(a) + "\n";
    write_file(dir / "adapters.csv", adapters);
  }
};

// Open-set and cross-domain runs must not feed held-out checkpoints or
// held-out answers into the generator pipeline.
inline void audit_no_leakage(const EvalReport& report) {
  if (report.protocol == "close_set") return;
  for (const std::string& test : report.test_tasks) {
    const std::string ckpt_tag = "train:checkpoint:" + test + "/";
    const std::string ans_tag = "condition:answers:" + test;
    for (const std::string& p : report.provenance) {
      if (p.rfind(ckpt_tag, 0) == 0)
        throw StructuralError("leakage: held-out checkpoint in training: " + p);
      if (p == ans_tag)
        throw StructuralError("leakage: held-out answers in condition: " + p);
    }
  }
}

// ---------------------------------------------------------------------------
// Adapter generation (single forward pass, no gradients)
// ---------------------------------------------------------------------------

template <typename T>
LoRAAdapter<T> generate_adapter(const HyperDecoder<T>& dec,
                                const ConditionEncoder& encoder,
                                const TaskDataset& ds,
                                const GeneratorTrainConfig& cfg,
                                const TokenizationPlan& plan,
                                std::uint64_t seed) {
  if (static_cast<std::int64_t>(cfg.batch_len) != dec.spec.in_shape()[0])
    throw DomainError("prompt batch length " + std::to_string(cfg.batch_len) +
                      " does not match the generator's training batch_len " +
                      std::to_string(dec.spec.in_shape()[0]));
  PromptBatch batch =
      sample_prompt_batch(ds, cfg.batch_len, cfg.pool_size,
                          derive_seed(seed, "eval/cond/" + ds.task_id),
                          cfg.condition_source);
  Tensor<float> cond = encoder.encode_batch(batch);
  Tensor<T> cond_t;
  if constexpr (std::is_same_v<T, float>) {
    cond_t = std::move(cond);
  } else {
    cond_t = cond.template cast<T>();
  }
  DecoderForwardCache<T> cache;
  Tensor<T> grid = decoder_forward(dec, cond_t, cache);
  LoRAAdapter<T> adapter = detokenize_lora(grid, plan);
  adapter.task_id = ds.task_id;
  adapter.step_id = "generated";
  return adapter;
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

// Full two-phase tuning exactly like zoo collection, minus the disk writes.
template <typename T>
LoRAAdapter<T> train_full_adapter(const Backbone<T>& model,
                                  const TaskDataset& ds,
                                  const CollectRecipe& rec,
                                  std::uint64_t seed) {
  LoRAAdapter<T> lora = init_lora<T>(model.cfg, rec.rank, seed, ds.task_id);
  AdamW<T> opt;
  TrainRecipe phase1;
  phase1.steps = rec.adapt_steps;
  phase1.lr = rec.adapt_lr;
  phase1.batch_size = rec.batch_size;
  phase1.weight_decay = rec.weight_decay;
  phase1.clip_norm = rec.clip_norm;
  train_lora(model, lora, ds, phase1, derive_seed(seed, "collect/adapt"),
             &opt);
  TrainRecipe phase2 = phase1;
  phase2.steps = rec.snapshot_steps;
  phase2.lr = rec.snapshot_lr;
  train_lora(model, lora, ds, phase2, derive_seed(seed, "baseline/snapshot"),
             &opt);
  return lora;
}

// Restricts a dataset's train split to its first k samples.
inline TaskDataset restrict_train_split(const TaskDataset& ds, std::size_t k) {
  TaskDataset out = ds;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < out.splits.size(); ++i) {
    if (out.splits[i] != Split::kTrain) continue;
    if (kept < k)
      ++kept;
    else
      out.splits[i] = Split::kTest;  // surplus train samples are unused
  }
  if (kept == 0) throw DomainError("no train samples to restrict");
  return out;
}

template <typename T>
double few_shot_accuracy(const Backbone<T>& model, const TaskDataset& ds,
                         const CollectRecipe& rec, int examples,
                         std::size_t eval_max, std::uint64_t seed) {
  TaskDataset few = restrict_train_split(ds, static_cast<std::size_t>(examples));
  LoRAAdapter<T> lora =
      train_full_adapter(model, few, rec, derive_seed(seed, "baseline/few"));
  return evaluate_exact_match(model, &lora, ds, Split::kTest, eval_max);
}

// Demonstrations are prepended as "prompt answer" pairs while the sequence
// still fits the context window; with a tiny context this often degrades to
// zero demonstrations, which is reported as-is.
template <typename T>
double in_context_accuracy(const Backbone<T>& model, const TaskDataset& ds,
                           int max_demos, std::size_t eval_max,
                           std::uint64_t seed) {
  auto train_idx = ds.split_indices(Split::kTrain);
  auto test_idx = ds.split_indices(Split::kTest);
  if (test_idx.empty()) throw DomainError("no test samples");
  if (eval_max > 0 && test_idx.size() > eval_max) test_idx.resize(eval_max);
  Rng rng(derive_seed(seed, "baseline/icl/" + ds.task_id));
  // Reserve room for SEP + answer + EOS after the prompt.
  const std::size_t budget =
      static_cast<std::size_t>(model.cfg.context_len) - 2 -
      (kMaxPayloadLen + 1);
  std::size_t hits = 0;
  for (std::size_t i : test_idx) {
    std::string prompt = ds.prompts[i];
    for (int d = 0; d < max_demos && !train_idx.empty(); ++d) {
      const std::size_t pick = train_idx[static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(train_idx.size())))];
      const std::string demo = ds.prompts[pick] + " " + ds.answers[pick] + " ";
      if (demo.size() + prompt.size() > budget) break;
      prompt = demo + prompt;
    }
    if (generate_answer(model, prompt) == ds.answers[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test_idx.size());
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

struct ProtocolSettings {
  DecoderSpec decoder_spec;
  GeneratorTrainConfig train;
  CollectRecipe zoo_recipe;  // for the tuned baselines
  std::string encoder_id = "hashed_trigram";
  std::size_t eval_max_samples = 0;  // 0 = whole test split
  bool baselines = false;            // adds full_shot/few_shot/in_context
  int few_shot_examples = 8;
  int in_context_demos = 3;
};

template <typename T>
struct ProtocolOutputs {
  EvalReport report;
  HyperDecoder<T> generator;
  GeneratorTrainResult train_result;
  std::map<std::string, LoRAAdapter<T>> generated;
};

namespace detail {

inline ZooManifest filter_manifest(const ZooManifest& manifest,
                                   const std::vector<std::string>& keep) {
  ZooManifest out = manifest;
  out.tasks.clear();
  for (const std::string& id : keep) {
    auto it = manifest.tasks.find(id);
    if (it == manifest.tasks.end())
      throw ConfigError("task " + id + " is not in the zoo manifest");
    out.tasks[id] = it->second;
  }
  return out;
}

}  // namespace detail

// When `pretrained` is given it must have been trained on exactly train_ids
// under ps (a staged run via the CLI); training is skipped and the report's
// provenance describes what that training consumed.
template <typename T>
ProtocolOutputs<T> run_protocol(const std::string& protocol,
                                const Backbone<T>& model,
                                const std::map<std::string, TaskDataset>& tasks,
                                const std::filesystem::path& zoo_dir,
                                const ZooManifest& manifest,
                                const std::vector<std::string>& train_ids,
                                const std::vector<std::string>& test_ids,
                                const ProtocolSettings& ps,
                                std::uint64_t seed,
                                const HyperDecoder<T>* pretrained = nullptr) {
  if (train_ids.empty())
    throw DomainError("protocol needs at least one training task");
  if (test_ids.empty())
    throw DomainError("protocol needs at least one test task");
  for (const auto& id : train_ids)
    if (!tasks.count(id)) throw ConfigError("unknown training task " + id);
  for (const auto& id : test_ids)
    if (!tasks.count(id)) throw ConfigError("unknown test task " + id);
  const bool heldout = protocol != "close_set";
  if (heldout) {
    std::set<std::string> train_set(train_ids.begin(), train_ids.end());
    for (const auto& id : test_ids)
      if (train_set.count(id))
        throw DomainError("held-out task " + id + " appears in the train set");
    if (ps.train.condition_source != ConditionSource::kPromptOnly)
      throw ConfigError(
          "held-out protocols require prompt_only conditions; answers of "
          "held-out tasks must stay unread");
  }

  ProtocolOutputs<T> out;
  EvalReport& rep = out.report;
  rep.protocol = protocol;
  rep.train_tasks = train_ids;
  rep.test_tasks = test_ids;
  rep.pairing = pairing_strategy_name(ps.train.strategy);
  rep.condition_source = condition_source_name(ps.train.condition_source);
  rep.seed = seed;

  // The generator pipeline only ever sees training-task checkpoints.
  ZooManifest train_manifest = detail::filter_manifest(manifest, train_ids);
  const auto out_shape = ps.decoder_spec.out_shape();
  CheckpointBank<T> bank = load_checkpoint_bank<T>(
      zoo_dir, train_manifest, out_shape[2], out_shape[1]);
  for (const auto& [task_id, entry] : train_manifest.tasks)
    for (const std::string& rel : entry.checkpoints)
      rep.provenance.push_back("train:checkpoint:" + rel);
  for (const std::string& id : train_ids) {
    rep.provenance.push_back("condition:prompts:" + id);
    if (ps.train.condition_source != ConditionSource::kPromptOnly)
      rep.provenance.push_back("condition:answers:" + id);
  }

  const auto in_shape = ps.decoder_spec.in_shape();
  auto base_enc = make_encoder(ps.encoder_id, static_cast<int>(in_shape[2]),
                               static_cast<int>(in_shape[1]));
  CachingEncoder encoder(std::move(base_enc));

  if (pretrained) {
    if (pretrained->spec.to_json().dump() != ps.decoder_spec.to_json().dump())
      throw ConfigError(
          "pretrained generator spec does not match the protocol settings");
    out.generator = *pretrained;
  } else {
    out.generator =
        init_decoder<T>(ps.decoder_spec, derive_seed(seed, "protocol/init"));
    AdamW<T> opt(AdamWConfig{ps.train.lr, 0.9, 0.999, 1e-8,
                             ps.train.weight_decay});
    out.train_result =
        train_generator(out.generator, bank, tasks, train_ids, encoder,
                        ps.train, derive_seed(seed, "protocol/train"), opt);
  }

  // Final snapshot of each training task, used as the baseline adapters.
  std::map<std::string, LoRAAdapter<T>> final_adapters;
  for (const std::string& id : train_ids) {
    const auto& entry = train_manifest.tasks.at(id);
    if (entry.checkpoints.empty())
      throw StructuralError("task " + id + " has no checkpoints in the zoo");
    WeightFile wf = load_weight_file(zoo_dir / entry.checkpoints.back());
    final_adapters[id] = lora_from_weight_file<T>(wf);
  }

  for (const std::string& id : test_ids) {
    const TaskDataset& ds = tasks.at(id);
    TaskEval row;
    row.task_id = id;
    rep.provenance.push_back("condition:prompts:" + id);
    if (ps.train.condition_source != ConditionSource::kPromptOnly)
      rep.provenance.push_back("condition:answers:" + id);

    LoRAAdapter<T> gen = generate_adapter(out.generator, encoder, ds,
                                          ps.train, bank.plan, seed);
    row.generated =
        evaluate_exact_match(model, &gen, ds, Split::kTest,
                             ps.eval_max_samples);
    row.base_backbone =
        evaluate_exact_match<T>(model, nullptr, ds, Split::kTest,
                                ps.eval_max_samples);
    double sum = 0.0;
    for (const std::string& tid : train_ids) {
      const double acc =
          evaluate_exact_match(model, &final_adapters.at(tid), ds,
                               Split::kTest, ps.eval_max_samples);
      row.training_adapters.emplace_back(
          tid + "/" + final_adapters.at(tid).step_id, acc);
      sum += acc;
    }
    row.training_adapter_avg =
        sum / static_cast<double>(row.training_adapters.size());

    // Close-set comparisons anchor on the task's own final snapshot.
    if (!heldout) {
      auto it = manifest.tasks.find(id);
      if (it != manifest.tasks.end() && !it->second.checkpoints.empty())
        row.source_checkpoint = evaluate_exact_match(
            model, &final_adapters.at(id), ds, Split::kTest,
            ps.eval_max_samples);
    }

    if (ps.baselines) {
      rep.provenance.push_back("baseline:answers:" + id);
      LoRAAdapter<T> full = train_full_adapter(
          model, ds, ps.zoo_recipe, derive_seed(seed, "baseline/full/" + id));
      row.full_shot = evaluate_exact_match(model, &full, ds, Split::kTest,
                                           ps.eval_max_samples);
      row.few_shot =
          few_shot_accuracy(model, ds, ps.zoo_recipe, ps.few_shot_examples,
                            ps.eval_max_samples,
                            derive_seed(seed, "baseline/few/" + id));
      row.in_context = in_context_accuracy(model, ds, ps.in_context_demos,
                                           ps.eval_max_samples, seed);
    }
    out.generated.emplace(id, std::move(gen));
    rep.rows.push_back(std::move(row));
  }

  rep.validate();
  audit_no_leakage(rep);
  return out;
}

template <typename T>
ProtocolOutputs<T> closeset_protocol(
    const Backbone<T>& model, const std::map<std::string, TaskDataset>& tasks,
    const std::filesystem::path& zoo_dir, const ZooManifest& manifest,
    const std::vector<std::string>& task_ids, const ProtocolSettings& ps,
    std::uint64_t seed, const HyperDecoder<T>* pretrained = nullptr) {
  return run_protocol("close_set", model, tasks, zoo_dir, manifest, task_ids,
                      task_ids, ps, seed, pretrained);
}

template <typename T>
ProtocolOutputs<T> openset_protocol(
    const Backbone<T>& model, const std::map<std::string, TaskDataset>& tasks,
    const std::filesystem::path& zoo_dir, const ZooManifest& manifest,
    const std::vector<std::string>& train_ids,
    const std::vector<std::string>& holdout_ids, const ProtocolSettings& ps,
    std::uint64_t seed, const HyperDecoder<T>* pretrained = nullptr) {
  return run_protocol("open_set", model, tasks, zoo_dir, manifest, train_ids,
                      holdout_ids, ps, seed, pretrained);
}

// Family-level holdout: families are named by task kind and must not overlap.
template <typename T>
ProtocolOutputs<T> crossdomain_protocol(
    const Backbone<T>& model, const std::map<std::string, TaskDataset>& tasks,
    const std::filesystem::path& zoo_dir, const ZooManifest& manifest,
    const std::vector<TaskKind>& train_family,
    const std::vector<TaskKind>& test_family, const ProtocolSettings& ps,
    std::uint64_t seed, const HyperDecoder<T>* pretrained = nullptr) {
  std::set<TaskKind> train_set(train_family.begin(), train_family.end());
  for (TaskKind k : test_family)
    if (train_set.count(k))
      throw DomainError("cross-domain families overlap on kind " +
                        task_kind_name(k));
  std::vector<std::string> train_ids, test_ids;
  for (const auto& [id, ds] : tasks) {
    if (train_set.count(ds.kind)) train_ids.push_back(id);
    if (std::find(test_family.begin(), test_family.end(), ds.kind) !=
        test_family.end())
      test_ids.push_back(id);
  }
  return run_protocol("cross_domain", model, tasks, zoo_dir, manifest,
                      train_ids, test_ids, ps, seed, pretrained);
}

// ---------------------------------------------------------------------------
// Efficiency
// ---------------------------------------------------------------------------

// Wall-clock for one adapter generation (encoder warm-up excluded, reported
// separately) versus full two-phase LoRA tuning on the same hardware.
template <typename T>
TimingTable efficiency_report(const Backbone<T>& model, const TaskDataset& ds,
                              const HyperDecoder<T>& dec,
                              const std::string& encoder_id,
                              const TokenizationPlan& plan,
                              const GeneratorTrainConfig& cfg,
                              const CollectRecipe& recipe,
                              std::uint64_t seed) {
  using clock = std::chrono::steady_clock;
  const auto in_shape = dec.spec.in_shape();
  auto base_enc = make_encoder(encoder_id, static_cast<int>(in_shape[2]),
                               static_cast<int>(in_shape[1]));
  CachingEncoder encoder(std::move(base_enc));

  // Warm the text cache with the exact condition batch generation will use.
  PromptBatch warm =
      sample_prompt_batch(ds, cfg.batch_len, cfg.pool_size,
                          derive_seed(seed, "eval/cond/" + ds.task_id),
                          cfg.condition_source);
  const auto w0 = clock::now();
  encoder.encode_batch(warm);
  const auto w1 = clock::now();

  const auto g0 = clock::now();
  LoRAAdapter<T> generated =
      generate_adapter(dec, encoder, ds, cfg, plan, seed);
  const auto g1 = clock::now();

  const auto t0 = clock::now();
  LoRAAdapter<T> tuned =
      train_full_adapter(model, ds, recipe, derive_seed(seed, "efficiency"));
  const auto t1 = clock::now();

  auto secs = [](clock::time_point a, clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
  };
  TimingTable t;
  t.encoder_warmup_seconds = secs(w0, w1);
  t.generation_seconds = std::max(secs(g0, g1), 1e-9);
  t.tuning_seconds = secs(t0, t1);
  t.speedup_ratio = t.tuning_seconds / t.generation_seconds;
  return t;
}

}  // namespace hyperlora
