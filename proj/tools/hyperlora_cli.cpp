// hyperlora command-line orchestrator.
//
// Stages (each one process, each owning the run directory via a lockfile):
//   corpus          build the synthetic task datasets
//   collect-zoo     pretrain the backbone and collect per-task LoRA zoos
//   train-generator train the hyper-convolutional generator on the zoo
//   generate        emit adapters for tasks with a single forward pass
//   evaluate        run the configured protocol and write the report
//   report          aggregate several finished runs (e.g. holdout rotations)
//   weight-map      project zoo + generated adapters to 2D (csv + png)
//   efficiency      time generation against full tuning
//
// Every command exits 0 on success with a one-line JSON record on stdout,
// and nonzero with a one-line JSON error record on stderr.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hyperlora/config.hpp"
#include "hyperlora/eval_harness.hpp"
#include "hyperlora/weight_map.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace hyperlora;

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_root;  // overrides config + environment
  bool force = false;       // steal a stale run lock
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("-c,--config", o.config_path, "experiment config (json)")
      ->required();
  cmd->add_option("--set", o.overrides,
                  "override a config key, e.g. --set train.lr=1e-4");
  cmd->add_option("--out", o.output_root, "output root (overrides config)");
  cmd->add_flag("--force", o.force, "take over a locked run directory");
}

ExperimentConfig load_cfg(const CommonOpts& o) {
  ExperimentConfig cfg = load_experiment_config(o.config_path, o.overrides);
  if (!o.output_root.empty()) cfg.output_root = o.output_root;
  return cfg;
}

struct Paths {
  fs::path run, corpus, zoo, generator, generated, eval, map;
  explicit Paths(const ExperimentConfig& cfg)
      : run(cfg.run_dir()),
        corpus(run / "corpus"),
        zoo(run / "zoo"),
        generator(run / "generator"),
        generated(run / "generated"),
        eval(run / "eval"),
        map(run / "map") {}
};

void emit(const ordered_json& record) {
  std::fputs((record.dump() + "\n").c_str(), stdout);
}

std::string now_iso8601() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%FT%TZ", std::gmtime(&t));
  return buf;
}

// The resolved config is snapshotted into the run directory so a finished
// run is self-describing even if the source file later changes.
void snapshot_config(const ExperimentConfig& cfg, const Paths& p) {
  write_file(p.run / "config.json", cfg.to_json().dump(2) + "\n");
}

std::map<std::string, TaskDataset> load_corpus(const ExperimentConfig& cfg,
                                               const Paths& p) {
  std::map<std::string, TaskDataset> tasks;
  for (const std::string& id : cfg.corpus.tasks) {
    fs::path f = p.corpus / (id + ".jsonl");
    if (!fs::exists(f))
      throw IoError("corpus file missing: " + f.string() +
                    " (run the `corpus` command first)");
    tasks[id] = load_task_jsonl(f);
  }
  return tasks;
}

Backbone<float> load_backbone(const Paths& p) {
  fs::path f = p.zoo / "backbone.bin";
  if (!fs::exists(f))
    throw IoError("backbone missing: " + f.string() +
                  " (run the `collect-zoo` command first)");
  return backbone_from_weight_file<float>(load_weight_file(f));
}

ZooManifest load_manifest(const Paths& p) {
  fs::path f = p.zoo / "manifest.json";
  if (!fs::exists(f))
    throw IoError("zoo manifest missing: " + f.string() +
                  " (run the `collect-zoo` command first)");
  return load_zoo_manifest(f);
}

HyperDecoder<float> load_generator(const Paths& p) {
  fs::path f = p.generator / "generator.bin";
  if (!fs::exists(f))
    throw IoError("generator missing: " + f.string() +
                  " (run the `train-generator` command first)");
  return decoder_from_weight_file<float>(load_weight_file(f));
}

json load_train_meta(const Paths& p) {
  fs::path f = p.generator / "train_meta.json";
  if (!fs::exists(f))
    throw IoError("generator metadata missing: " + f.string() +
                  " (run the `train-generator` command first)");
  return json::parse(read_file(f));
}

// Which tasks feed generator training and which are scored.
std::pair<std::vector<std::string>, std::vector<std::string>> resolve_split(
    const ExperimentConfig& cfg) {
  std::vector<std::string> train = cfg.eval.train_tasks;
  std::vector<std::string> test = cfg.eval.test_tasks;
  if (cfg.eval.protocol == "close_set") {
    if (train.empty()) train = cfg.corpus.tasks;
    test = train;  // close-set scores the training tasks themselves
  } else {
    if (train.empty())
      throw ConfigError(cfg.eval.protocol +
                        " needs explicit eval.train_tasks");
  }
  return {train, test};
}

ProtocolSettings protocol_settings(const ExperimentConfig& cfg) {
  ProtocolSettings ps;
  ps.decoder_spec = cfg.decoder;
  ps.train = cfg.train;
  ps.zoo_recipe = cfg.zoo;
  ps.encoder_id = cfg.encoder_id;
  ps.eval_max_samples = cfg.eval.max_samples;
  ps.baselines = cfg.eval.baselines;
  ps.few_shot_examples = cfg.eval.few_shot_examples;
  ps.in_context_demos = cfg.eval.in_context_demos;
  return ps;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

double pop_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size()));
}

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

int cmd_corpus(const CommonOpts& o) {
  ExperimentConfig cfg = load_cfg(o);
  Paths p(cfg);
  RunLock lock(p.run, o.force);
  snapshot_config(cfg, p);

  ordered_json manifest;
  manifest["schema"] = "corpus_v1";
  manifest["seed"] = cfg.sub_seed("corpus");
  manifest["samples_per_task"] = cfg.corpus.samples_per_task;
  ordered_json jt;
  for (const std::string& id : cfg.corpus.tasks) {
    TaskDataset ds = make_task(task_kind_from_string(id),
                               cfg.corpus.samples_per_task,
                               cfg.sub_seed("corpus"));
    fs::path f = p.corpus / (id + ".jsonl");
    save_task_jsonl(ds, f);
    jt[id] = {{"file", id + ".jsonl"},
              {"samples", ds.prompts.size()},
              {"hash", hash_hex(file_content_hash(f))}};
  }
  manifest["tasks"] = jt;
  write_file(p.corpus / "corpus.json", manifest.dump(2) + "\n");

  emit({{"command", "corpus"},
        {"run_dir", p.run.string()},
        {"tasks", cfg.corpus.tasks.size()},
        {"samples_per_task", cfg.corpus.samples_per_task},
        {"corpus_hash", hash_hex(fnv1a64(manifest["tasks"].dump()))}});
  return 0;
}

// ---------------------------------------------------------------------------
// collect-zoo
// ---------------------------------------------------------------------------

int cmd_collect_zoo(const CommonOpts& o) {
  ExperimentConfig cfg = load_cfg(o);
  Paths p(cfg);
  RunLock lock(p.run, o.force);
  snapshot_config(cfg, p);
  auto tasks = load_corpus(cfg, p);

  BackboneConfig bc = cfg.backbone.model_config();
  Backbone<float> model = init_backbone<float>(bc, cfg.sub_seed("init"));
  std::vector<TaskDataset> all;
  for (const auto& [id, ds] : tasks) all.push_back(ds);
  if (cfg.backbone.pretrain_steps > 0) {
    TrainRecipe pre;
    pre.steps = cfg.backbone.pretrain_steps;
    pre.lr = cfg.backbone.pretrain_lr;
    pre.batch_size = cfg.backbone.pretrain_batch_size;
    train_backbone(model, all, pre, cfg.sub_seed("zoo"));
  }
  WeightFile bwf = backbone_to_weight_file(model);
  save_weight_file(bwf, p.zoo / "backbone.bin");

  ZooManifest manifest;
  manifest.seed = cfg.sub_seed("zoo");
  manifest.backbone_file = "backbone.bin";
  manifest.backbone_hash = hash_hex(file_content_hash(p.zoo / "backbone.bin"));
  manifest.backbone_config = {
      {"d_model", bc.d_model},       {"n_layers", bc.n_layers},
      {"n_heads", bc.n_heads},       {"d_ff", bc.d_ff},
      {"context_len", bc.context_len}, {"vocab_size", bc.vocab_size}};
  manifest.created_at = now_iso8601();

  std::size_t total = 0;
  for (const std::string& id : cfg.corpus.tasks) {
    const TaskDataset& ds = tasks.at(id);
    ZooTaskEntry entry;
    try {
      entry.checkpoints = collect_checkpoints(
          model, ds, cfg.zoo, derive_seed(cfg.sub_seed("zoo"), "task/" + id),
          p.zoo);
    } catch (const TrainingError& e) {
      throw TrainingError("task '" + id + "': " + e.what(), e.step_index);
    }
    for (const std::string& rel : entry.checkpoints)
      entry.hashes.push_back(hash_hex(file_content_hash(p.zoo / rel)));
    LoRAAdapter<float> last = lora_from_weight_file<float>(
        load_weight_file(p.zoo / entry.checkpoints.back()));
    entry.final_accuracy =
        evaluate_exact_match(model, &last, ds, Split::kTest, 64);
    entry.final_train_loss = 0.0;
    total += entry.checkpoints.size();
    manifest.tasks[id] = entry;
  }
  save_zoo_manifest(manifest, p.zoo / "manifest.json");
  verify_zoo_integrity(manifest, p.zoo);

  emit({{"command", "collect-zoo"},
        {"run_dir", p.run.string()},
        {"tasks", manifest.tasks.size()},
        {"checkpoints", total},
        {"manifest_hash", hash_hex(manifest.content_hash())}});
  return 0;
}

// ---------------------------------------------------------------------------
// train-generator
// ---------------------------------------------------------------------------

int cmd_train_generator(const CommonOpts& o, bool dry_run, bool resume) {
  ExperimentConfig cfg = load_cfg(o);
  Paths p(cfg);
  RunLock lock(p.run, o.force);
  snapshot_config(cfg, p);
  auto tasks = load_corpus(cfg, p);
  ZooManifest manifest = load_manifest(p);
  verify_zoo_integrity(manifest, p.zoo);
  auto [train_ids, test_ids] = resolve_split(cfg);

  // Pre-flight: every failure below names the conflict before any step runs.
  cfg.decoder.validate();
  cfg.train.validate();
  const auto out_shape = cfg.decoder.out_shape();
  const auto in_shape = cfg.decoder.in_shape();
  ZooManifest train_manifest = detail::filter_manifest(manifest, train_ids);
  CheckpointBank<float> bank = load_checkpoint_bank<float>(
      p.zoo, train_manifest, out_shape[2], out_shape[1]);
  if (bank.plan.grid_shape() != out_shape)
    throw ConfigError("decoder emits [" + std::to_string(out_shape[0]) + "," +
                      std::to_string(out_shape[1]) + "," +
                      std::to_string(out_shape[2]) +
                      "] but the zoo tokenizes to [" +
                      std::to_string(bank.plan.n_w) + "," +
                      std::to_string(bank.plan.l_w) + "," +
                      std::to_string(bank.plan.c_w) + "]");
  auto base_enc = make_encoder(cfg.encoder_id, static_cast<int>(in_shape[2]),
                               static_cast<int>(in_shape[1]));
  CachingEncoder encoder(std::move(base_enc));

  if (dry_run) {
    emit({{"command", "train-generator"},
          {"dry_run", true},
          {"steps_run", 0},
          {"train_tasks", train_ids},
          {"pairing", pairing_strategy_name(cfg.train.strategy)},
          {"grid", {bank.plan.n_w, bank.plan.l_w, bank.plan.c_w}},
          {"checkpoints", bank.size()}});
    return 0;
  }

  HyperDecoder<float> dec;
  AdamW<float> opt(AdamWConfig{cfg.train.lr, 0.9, 0.999, 1e-8,
                               cfg.train.weight_decay});
  std::vector<double> prior;
  if (resume) {
    fs::path state = p.generator / "state.bin";
    if (!fs::exists(state))
      throw StateError("nothing to resume: " + state.string() +
                       " does not exist");
    load_generator_state(state, dec, opt, prior);
    if (static_cast<long>(prior.size()) >= cfg.train.steps)
      throw StateError("training already reached " +
                       std::to_string(prior.size()) + " of " +
                       std::to_string(cfg.train.steps) + " steps");
  } else {
    dec = init_decoder<float>(cfg.decoder, cfg.sub_seed("init"));
  }

  GeneratorTrainResult res =
      train_generator(dec, bank, tasks, train_ids, encoder, cfg.train,
                      cfg.sub_seed("pairing"), opt, prior);

  save_weight_file(decoder_to_weight_file(dec), p.generator / "generator.bin");
  save_generator_state(p.generator / "state.bin", dec, opt, res.loss_trace);
  std::string trace = "step,loss\n";
  for (std::size_t i = 0; i < res.loss_trace.size(); ++i) {
    char line[64];
    std::snprintf(line, sizeof line, "%zu,%.10g\n", i, res.loss_trace[i]);
    trace += line;
  }
  write_file(p.generator / "trace.csv", trace);

  ordered_json meta;
  meta["train_tasks"] = train_ids;
  meta["steps_run"] = res.steps_run;
  meta["total_steps"] = res.loss_trace.size();
  meta["early_stopped"] = res.early_stopped;
  meta["pairing"] = pairing_strategy_name(cfg.train.strategy);
  meta["condition_source"] = condition_source_name(cfg.train.condition_source);
  meta["plan"] = bank.plan.to_json();
  meta["zoo_manifest_hash"] = hash_hex(manifest.content_hash());
  meta["config_hash"] = hash_hex(cfg.config_hash());
  write_file(p.generator / "train_meta.json", meta.dump(2) + "\n");

  emit({{"command", "train-generator"},
        {"dry_run", false},
        {"resumed", resume},
        {"steps_run", res.steps_run},
        {"total_steps", res.loss_trace.size()},
        {"early_stopped", res.early_stopped},
        {"final_loss", res.loss_trace.empty() ? -1.0 : res.loss_trace.back()},
        {"generator_hash",
         hash_hex(file_content_hash(p.generator / "generator.bin"))}});
  return 0;
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

int cmd_generate(const CommonOpts& o, std::vector<std::string> only_tasks) {
  ExperimentConfig cfg = load_cfg(o);
  Paths p(cfg);
  RunLock lock(p.run, o.force);
  auto tasks = load_corpus(cfg, p);
  HyperDecoder<float> dec = load_generator(p);
  json meta = load_train_meta(p);
  TokenizationPlan plan = TokenizationPlan::from_json(meta.at("plan"));

  std::vector<std::string> targets = only_tasks;
  if (targets.empty()) targets = resolve_split(cfg).second;
  const auto in_shape = dec.spec.in_shape();
  auto base_enc = make_encoder(cfg.encoder_id, static_cast<int>(in_shape[2]),
                               static_cast<int>(in_shape[1]));
  CachingEncoder encoder(std::move(base_enc));

  ordered_json files = ordered_json::array();
  for (const std::string& id : targets) {
    auto it = tasks.find(id);
    if (it == tasks.end())
      throw ConfigError("task '" + id + "' is not in the corpus");
    LoRAAdapter<float> ad = generate_adapter(dec, encoder, it->second,
                                             cfg.train, plan,
                                             cfg.sub_seed("eval"));
    fs::path f = p.generated / (id + ".bin");
    save_weight_file(lora_to_weight_file(ad), f);
    files.push_back({{"task", id},
                     {"file", f.string()},
                     {"hash", hash_hex(file_content_hash(f))}});
  }
  emit({{"command", "generate"}, {"adapters", files}});
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

int cmd_evaluate(const CommonOpts& o, bool with_baselines) {
  ExperimentConfig cfg = load_cfg(o);
  Paths p(cfg);
  RunLock lock(p.run, o.force);
  auto tasks = load_corpus(cfg, p);
  Backbone<float> model = load_backbone(p);
  ZooManifest manifest = load_manifest(p);
  HyperDecoder<float> dec = load_generator(p);
  auto [train_ids, test_ids] = resolve_split(cfg);

  ProtocolSettings ps = protocol_settings(cfg);
  if (with_baselines) ps.baselines = true;
  const std::uint64_t seed = cfg.sub_seed("eval");

  ProtocolOutputs<float> out = [&] {
    if (cfg.eval.protocol == "close_set")
      return closeset_protocol(model, tasks, p.zoo, manifest, train_ids, ps,
                               seed, &dec);
    if (cfg.eval.protocol == "open_set")
      return openset_protocol(model, tasks, p.zoo, manifest, train_ids,
                              test_ids, ps, seed, &dec);
    std::vector<TaskKind> train_family, test_family;
    for (const std::string& id : train_ids)
      train_family.push_back(tasks.at(id).kind);
    for (const std::string& id : test_ids)
      test_family.push_back(tasks.at(id).kind);
    return crossdomain_protocol(model, tasks, p.zoo, manifest, train_family,
                                test_family, ps, seed, &dec);
  }();

  out.report.save(p.eval);
  for (auto& [id, adapter] : out.generated)
    save_weight_file(lora_to_weight_file(adapter),
                     p.generated / (id + ".bin"));

  ordered_json rows = ordered_json::array();
  for (const TaskEval& r : out.report.rows)
    rows.push_back({{"task", r.task_id},
                    {"generated", r.generated},
                    {"training_adapter_avg", r.training_adapter_avg},
                    {"base_backbone", r.base_backbone}});
  emit({{"command", "evaluate"},
        {"protocol", out.report.protocol},
        {"report", (p.eval / "report.json").string()},
        {"rows", rows}});
  return 0;
}

// ---------------------------------------------------------------------------
// report (cross-run aggregation)
// ---------------------------------------------------------------------------

int cmd_report(const std::vector<std::string>& run_dirs,
               const std::string& out_dir) {
  if (run_dirs.empty()) throw ConfigError("report needs at least one run dir");
  std::vector<double> gen, avg, base, improv;
  std::string runs_csv =
      "run,protocol,generated,training_adapter_avg,base_backbone,"
      "improvement\n";
  for (const std::string& dir : run_dirs) {
    fs::path f = fs::path(dir) / "eval" / "report.json";
    if (!fs::exists(f))
      throw IoError("no evaluation report at " + f.string());
    EvalReport rep = EvalReport::from_json(json::parse(read_file(f)));
    if (rep.rows.empty())
      throw StructuralError("report has no rows: " + f.string());
    std::vector<double> g, a, b;
    for (const TaskEval& r : rep.rows) {
      g.push_back(r.generated);
      a.push_back(r.training_adapter_avg);
      b.push_back(r.base_backbone);
    }
    const double gm = mean_of(g), am = mean_of(a), bm = mean_of(b);
    gen.push_back(gm);
    avg.push_back(am);
    base.push_back(bm);
    improv.push_back(gm - am);
    char line[256];
    std::snprintf(line, sizeof line, "%s,%s,%.6f,%.6f,%.6f,%.6f\n",
                  dir.c_str(), rep.protocol.c_str(), gm, am, bm, gm - am);
    runs_csv += line;
  }
  std::string agg_csv = "metric,mean,std,n\n";
  auto add = [&](const char* name, const std::vector<double>& xs) {
    char line[128];
    std::snprintf(line, sizeof line, "%s,%.6f,%.6f,%zu\n", name, mean_of(xs),
                  pop_std(xs), xs.size());
    agg_csv += line;
  };
  add("generated", gen);
  add("training_adapter_avg", avg);
  add("base_backbone", base);
  add("improvement", improv);

  fs::path out = out_dir.empty() ? fs::path("report_out") : fs::path(out_dir);
  write_file(out / "runs.csv", runs_csv);
  write_file(out / "aggregate.csv", agg_csv);

  emit({{"command", "report"},
        {"runs", run_dirs.size()},
        {"generated_mean", mean_of(gen)},
        {"generated_std", pop_std(gen)},
        {"training_adapter_avg_mean", mean_of(avg)},
        {"improvement_mean", mean_of(improv)},
        {"improvement_std", pop_std(improv)},
        {"out_dir", out.string()}});
  return 0;
}

// ---------------------------------------------------------------------------
// weight-map
// ---------------------------------------------------------------------------

int cmd_weight_map(const CommonOpts& o, double perplexity) {
  ExperimentConfig cfg = load_cfg(o);
  Paths p(cfg);
  RunLock lock(p.run, o.force);
  ZooManifest manifest = load_manifest(p);
  const auto out_shape = cfg.decoder.out_shape();
  CheckpointBank<float> bank =
      load_checkpoint_bank<float>(p.zoo, manifest, out_shape[2], out_shape[1]);

  std::vector<WeightMapEntry> entries;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    WeightMapEntry e;
    e.label = bank.names[i];
    e.task_id = bank.task_ids[i];
    e.generated = false;
    e.weights.assign(bank.grids[i].data(),
                     bank.grids[i].data() + bank.grids[i].numel());
    entries.push_back(std::move(e));
  }
  if (fs::exists(p.generated))
    for (const auto& ent : fs::directory_iterator(p.generated)) {
      if (ent.path().extension() != ".bin") continue;
      LoRAAdapter<float> ad =
          lora_from_weight_file<float>(load_weight_file(ent.path()));
      TokenizationPlan plan;
      Tensor<float> grid = tokenize_lora(ad, bank.plan.c_w, bank.plan.l_w,
                                         &plan);
      WeightMapEntry e;
      e.label = ad.task_id + "/generated";
      e.task_id = ad.task_id;
      e.generated = true;
      e.weights.assign(grid.data(), grid.data() + grid.numel());
      entries.push_back(std::move(e));
    }

  TsneConfig tc;
  if (perplexity > 0) tc.perplexity = perplexity;
  auto points = export_weight_map(entries, p.map / "weight_map",
                                  cfg.sub_seed("weight_map"), tc);
  ClusterStats stats = cluster_distances(points);
  emit({{"command", "weight-map"},
        {"points", points.size()},
        {"csv", (p.map / "weight_map.csv").string()},
        {"png", (p.map / "weight_map.png").string()},
        {"intra_task_distance", stats.intra},
        {"inter_task_distance", stats.inter}});
  return 0;
}

// ---------------------------------------------------------------------------
// efficiency
// ---------------------------------------------------------------------------

int cmd_efficiency(const CommonOpts& o, std::string task_id) {
  ExperimentConfig cfg = load_cfg(o);
  Paths p(cfg);
  RunLock lock(p.run, o.force);
  auto tasks = load_corpus(cfg, p);
  Backbone<float> model = load_backbone(p);
  HyperDecoder<float> dec = load_generator(p);
  json meta = load_train_meta(p);
  TokenizationPlan plan = TokenizationPlan::from_json(meta.at("plan"));

  if (task_id.empty()) task_id = resolve_split(cfg).second.front();
  auto it = tasks.find(task_id);
  if (it == tasks.end())
    throw ConfigError("task '" + task_id + "' is not in the corpus");

  TimingTable t =
      efficiency_report(model, it->second, dec, cfg.encoder_id, plan,
                        cfg.train, cfg.zoo, cfg.sub_seed("eval"));

  ordered_json j = {{"task", task_id},
                    {"generation_seconds", t.generation_seconds},
                    {"tuning_seconds", t.tuning_seconds},
                    {"speedup_ratio", t.speedup_ratio},
                    {"encoder_warmup_seconds", t.encoder_warmup_seconds}};
  write_file(p.eval / "efficiency.json", j.dump(2) + "\n");

  // A finished evaluation report absorbs the measured timings.
  fs::path rep_file = p.eval / "report.json";
  if (fs::exists(rep_file)) {
    EvalReport rep = EvalReport::from_json(json::parse(read_file(rep_file)));
    rep.timing = t;
    rep.save(p.eval);
  }

  emit({{"command", "efficiency"},
        {"task", task_id},
        {"generation_seconds", t.generation_seconds},
        {"tuning_seconds", t.tuning_seconds},
        {"speedup_ratio", t.speedup_ratio}});
  return 0;
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "ConfigError";
  if (dynamic_cast<const DomainError*>(&e)) return "DomainError";
  if (dynamic_cast<const StructuralError*>(&e)) return "StructuralError";
  if (dynamic_cast<const TrainingError*>(&e)) return "TrainingError";
  if (dynamic_cast<const IoError*>(&e)) return "IoError";
  if (dynamic_cast<const StateError*>(&e)) return "StateError";
  return "Error";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hyperlora: generate LoRA adapters from task prompts"};
  app.require_subcommand(1);

  CommonOpts corpus_o, zoo_o, train_o, gen_o, eval_o, map_o, eff_o;
  bool dry_run = false, resume = false, baselines = false;
  std::vector<std::string> gen_tasks, report_dirs;
  std::string report_out, eff_task;
  double map_perplexity = 0.0;
  int rc = 0;

  auto* c_corpus = app.add_subcommand("corpus", "build the task datasets");
  add_common(c_corpus, corpus_o);
  c_corpus->callback([&] { rc = cmd_corpus(corpus_o); });

  auto* c_zoo = app.add_subcommand(
      "collect-zoo", "pretrain the backbone and collect LoRA checkpoints");
  add_common(c_zoo, zoo_o);
  c_zoo->callback([&] { rc = cmd_collect_zoo(zoo_o); });

  auto* c_train =
      app.add_subcommand("train-generator", "train the adapter generator");
  add_common(c_train, train_o);
  c_train->add_flag("--dry-run", dry_run,
                    "validate spec, pairing and geometry; train 0 steps");
  c_train->add_flag("--resume", resume, "continue from the saved state");
  c_train->callback(
      [&] { rc = cmd_train_generator(train_o, dry_run, resume); });

  auto* c_gen = app.add_subcommand(
      "generate", "emit adapters for tasks with one forward pass");
  add_common(c_gen, gen_o);
  c_gen->add_option("--task", gen_tasks,
                    "task to generate for (repeatable; default: eval tasks)");
  c_gen->callback([&] { rc = cmd_generate(gen_o, gen_tasks); });

  auto* c_eval =
      app.add_subcommand("evaluate", "run the configured protocol");
  add_common(c_eval, eval_o);
  c_eval->add_flag("--baselines", baselines,
                   "also measure full-shot, few-shot and in-context columns");
  c_eval->callback([&] { rc = cmd_evaluate(eval_o, baselines); });

  auto* c_rep = app.add_subcommand(
      "report", "aggregate finished runs into one table with means and std");
  c_rep->add_option("runs", report_dirs, "run directories to aggregate")
      ->required();
  c_rep->add_option("--out-dir", report_out,
                    "where to write runs.csv/aggregate.csv");
  c_rep->callback([&] { rc = cmd_report(report_dirs, report_out); });

  auto* c_map = app.add_subcommand(
      "weight-map", "project zoo and generated adapters to 2D");
  add_common(c_map, map_o);
  c_map->add_option("--perplexity", map_perplexity,
                    "neighborhood size for the projection");
  c_map->callback([&] { rc = cmd_weight_map(map_o, map_perplexity); });

  auto* c_eff = app.add_subcommand(
      "efficiency", "time adapter generation against full tuning");
  add_common(c_eff, eff_o);
  c_eff->add_option("--task", eff_task, "task to time (default: first eval task)");
  c_eff->callback([&] { rc = cmd_efficiency(eff_o, eff_task); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // plain help text, not an error record
  } catch (const CLI::ParseError& e) {
    ordered_json rec = {{"error", "UsageError"}, {"message", e.what()}};
    std::fputs((rec.dump() + "\n").c_str(), stderr);
    return e.get_exit_code() == 0 ? 1 : e.get_exit_code();
  } catch (const std::exception& e) {
    ordered_json rec = {{"error", error_kind(e)}, {"message", e.what()}};
    std::fputs((rec.dump() + "\n").c_str(), stderr);
    return 1;
  }
  return rc;
}
