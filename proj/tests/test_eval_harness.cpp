#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hyperlora/eval_harness.hpp"

using namespace hyperlora;

namespace {

BackboneConfig tiny_cfg() {
  BackboneConfig cfg;
  cfg.context_len = 32;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  return cfg;
}

// Real end-to-end world: frozen backbone, two-task zoo (reverse + copy,
// rank-2, two snapshots each), grid [6, 4, 12].
struct World {
  std::filesystem::path dir;
  Backbone<float> model;
  ZooManifest manifest;
  std::map<std::string, TaskDataset> tasks;
  TokenizationPlan plan;
};

const World& world() {
  static World w = [] {
    World out;
    out.dir = std::filesystem::temp_directory_path() / "hl_eval_zoo";
    std::filesystem::remove_all(out.dir);
    std::filesystem::create_directories(out.dir);
    out.model = init_backbone<float>(tiny_cfg(), 21);
    CollectRecipe rec;
    rec.adapt_steps = 2;
    rec.snapshot_steps = 2;
    rec.batch_size = 4;
    rec.rank = 2;
    for (TaskKind kind : {TaskKind::kReverse, TaskKind::kCopy}) {
      TaskDataset ds = make_task(kind, 40, 11);
      auto files = collect_checkpoints(out.model, ds, rec, 31, out.dir);
      ZooTaskEntry entry;
      entry.checkpoints = files;
      for (const auto& rel : files)
        entry.hashes.push_back(hash_hex(file_content_hash(out.dir / rel)));
      out.manifest.tasks[ds.task_id] = entry;
      out.tasks[ds.task_id] = std::move(ds);
    }
    CheckpointBank<float> bank =
        load_checkpoint_bank<float>(out.dir, out.manifest, 12, 4);
    out.plan = bank.plan;
    return out;
  }();
  return w;
}

ProtocolSettings fast_settings(const World& w) {
  ProtocolSettings ps;
  BlockSpec b;
  b.n_in = 4;
  b.l_in = 24;
  b.c_in = 16;
  b.n_out = w.plan.n_w;
  b.l_out = w.plan.l_w;
  b.c_out = w.plan.c_w;
  ps.decoder_spec.blocks = {b};
  ps.train.steps = 6;
  ps.train.pairs_per_step = 1;
  ps.train.lr = 1e-3;
  ps.train.batch_len = 4;
  ps.train.pool_size = 4;
  ps.train.noise_scale = 0.0;
  ps.train.early_stop = false;
  ps.eval_max_samples = 8;
  ps.zoo_recipe.adapt_steps = 2;
  ps.zoo_recipe.snapshot_steps = 2;
  ps.zoo_recipe.batch_size = 4;
  ps.zoo_recipe.rank = 2;
  ps.few_shot_examples = 4;
  return ps;
}

std::vector<std::string> all_ids(const World& w) {
  std::vector<std::string> ids;
  for (const auto& [id, ds] : w.tasks) ids.push_back(id);
  return ids;
}

EvalReport sample_report() {
  EvalReport r;
  r.protocol = "close_set";
  r.train_tasks = {"a", "b"};
  r.test_tasks = {"a", "b"};
  r.pairing = "fixed_pool";
  r.condition_source = "prompt_only";
  r.seed = 7;
  TaskEval row;
  row.task_id = "a";
  row.generated = 0.75;
  row.training_adapters = {{"a/ft_0001", 0.5}, {"b/ft_0001", 0.25}};
  row.training_adapter_avg = 0.375;
  row.base_backbone = 0.125;
  row.source_checkpoint = 0.8125;
  r.rows.push_back(row);
  r.timing.generation_seconds = 0.01;
  r.timing.tuning_seconds = 1.0;
  r.timing.speedup_ratio = 100.0;
  r.provenance = {"train:checkpoint:a/ft_0001.bin", "condition:prompts:a"};
  return r;
}

}  // namespace

TEST_CASE("eval report survives a json round trip") {
  EvalReport r = sample_report();
  EvalReport back = EvalReport::from_json(r.to_json());
  CHECK(back.to_json().dump() == r.to_json().dump());
  CHECK(back.rows[0].training_adapters.size() == 2);
  CHECK(back.rows[0].few_shot == -1.0);
  CHECK(back.timing.speedup_ratio == 100.0);
}

TEST_CASE("eval report validation rejects malformed accuracies") {
  EvalReport r = sample_report();
  r.rows[0].generated = 1.5;
  CHECK_THROWS_AS(r.validate(), StructuralError);

  r = sample_report();
  r.rows[0].training_adapter_avg = 0.9;  // constituents say 0.375
  CHECK_THROWS_AS(r.validate(), StructuralError);

  r = sample_report();
  r.rows[0].training_adapters.clear();
  CHECK_THROWS_AS(r.validate(), StructuralError);

  CHECK_NOTHROW(sample_report().validate());
}

TEST_CASE("leakage audit polices held-out protocols only") {
  EvalReport r = sample_report();
  // Close-set may legitimately consume its own tasks' data.
  r.provenance.push_back("condition:answers:a");
  CHECK_NOTHROW(audit_no_leakage(r));

  r.protocol = "open_set";
  r.train_tasks = {"b"};
  r.test_tasks = {"a"};
  CHECK_THROWS_AS(audit_no_leakage(r), StructuralError);

  r.provenance = {"train:checkpoint:b/ft_0001.bin", "condition:prompts:a"};
  CHECK_NOTHROW(audit_no_leakage(r));

  r.provenance.push_back("train:checkpoint:a/ft_0002.bin");
  CHECK_THROWS_AS(audit_no_leakage(r), StructuralError);
}

TEST_CASE("generated adapters are deterministic and shaped by the plan") {
  const World& w = world();
  ProtocolSettings ps = fast_settings(w);
  HyperDecoder<float> dec = init_decoder<float>(ps.decoder_spec, 5);
  auto enc = make_encoder("hashed_trigram", 16, 24);
  const TaskDataset& ds = w.tasks.begin()->second;

  LoRAAdapter<float> a = generate_adapter(dec, *enc, ds, ps.train, w.plan, 3);
  LoRAAdapter<float> b = generate_adapter(dec, *enc, ds, ps.train, w.plan, 3);
  LoRAAdapter<float> c = generate_adapter(dec, *enc, ds, ps.train, w.plan, 4);
  REQUIRE(a.rank == w.plan.rank);
  REQUIRE(a.A.size() == b.A.size());
  CHECK(a.task_id == ds.task_id);
  CHECK(a.step_id == "generated");
  bool same = true, diff = false;
  for (std::size_t i = 0; i < a.A.size(); ++i) {
    for (std::int64_t j = 0; j < a.A[i].numel(); ++j) {
      same = same && a.A[i][j] == b.A[i][j];
      diff = diff || a.A[i][j] != c.A[i][j];
    }
  }
  CHECK(same);
  CHECK(diff);

  // Batch geometry is part of the generator contract.
  GeneratorTrainConfig bad = ps.train;
  bad.batch_len = 3;
  bad.pool_size = 3;
  CHECK_THROWS_AS(generate_adapter(dec, *enc, ds, bad, w.plan, 3),
                  DomainError);
}

TEST_CASE("a zeroed generator reproduces the base backbone exactly") {
  const World& w = world();
  ProtocolSettings ps = fast_settings(w);
  HyperDecoder<float> dec = init_decoder<float>(ps.decoder_spec, 5);
  dec.for_each_param([](const std::string&, Tensor<float>& t) {
    std::fill(t.data(), t.data() + t.numel(), 0.0f);
  });
  auto enc = make_encoder("hashed_trigram", 16, 24);
  const TaskDataset& ds = w.tasks.begin()->second;
  LoRAAdapter<float> zero =
      generate_adapter(dec, *enc, ds, ps.train, w.plan, 3);
  double with = evaluate_exact_match(w.model, &zero, ds, Split::kTest, 16);
  double base =
      evaluate_exact_match<float>(w.model, nullptr, ds, Split::kTest, 16);
  CHECK(with == base);
}

TEST_CASE("close-set protocol fills every column and is deterministic") {
  const World& w = world();
  ProtocolSettings ps = fast_settings(w);
  auto ids = all_ids(w);

  auto out = closeset_protocol(w.model, w.tasks, w.dir, w.manifest, ids, ps, 9);
  const EvalReport& r = out.report;
  CHECK(r.protocol == "close_set");
  CHECK(r.pairing == "fixed_pool");
  CHECK(r.condition_source == "prompt_only");
  REQUIRE(r.rows.size() == ids.size());
  for (const TaskEval& row : r.rows) {
    CHECK(row.generated >= 0.0);
    CHECK(row.generated <= 1.0);
    CHECK(row.base_backbone >= 0.0);
    CHECK(row.source_checkpoint >= 0.0);  // own snapshot was measured
    REQUIRE(row.training_adapters.size() == ids.size());
    CHECK(row.full_shot == -1.0);  // baselines disabled
  }
  CHECK(out.generated.size() == ids.size());
  CHECK(out.train_result.steps_run == 6);
  // Timing is only produced by the efficiency probe.
  CHECK(r.timing.generation_seconds == -1.0);

  bool saw_ckpt = false, saw_prompt = false;
  for (const std::string& p : r.provenance) {
    saw_ckpt = saw_ckpt || p.rfind("train:checkpoint:", 0) == 0;
    saw_prompt = saw_prompt || p.rfind("condition:prompts:", 0) == 0;
  }
  CHECK(saw_ckpt);
  CHECK(saw_prompt);

  auto again =
      closeset_protocol(w.model, w.tasks, w.dir, w.manifest, ids, ps, 9);
  CHECK(again.report.to_json().dump() == r.to_json().dump());
}

TEST_CASE("open-set holds the test task completely out of the pipeline") {
  const World& w = world();
  ProtocolSettings ps = fast_settings(w);
  auto ids = all_ids(w);
  REQUIRE(ids.size() == 2);
  const std::string holdout = ids[0];
  const std::string train = ids[1];

  auto out = openset_protocol(w.model, w.tasks, w.dir, w.manifest, {train},
                              {holdout}, ps, 9);
  const EvalReport& r = out.report;
  CHECK(r.protocol == "open_set");
  REQUIRE(r.rows.size() == 1);
  CHECK(r.rows[0].task_id == holdout);
  CHECK(r.rows[0].source_checkpoint == -1.0);  // close-set only column
  REQUIRE(r.rows[0].training_adapters.size() == 1);
  for (const std::string& p : r.provenance) {
    CHECK(p.rfind("train:checkpoint:" + holdout + "/", 0) != 0);
    CHECK(p != "condition:answers:" + holdout);
  }

  // The held-out task may not appear on the training side.
  CHECK_THROWS_AS(openset_protocol(w.model, w.tasks, w.dir, w.manifest, ids,
                                   {holdout}, ps, 9),
                  DomainError);
  // Conditions that read answers are rejected up front.
  ProtocolSettings leaky = ps;
  leaky.train.condition_source = ConditionSource::kPromptPlusAnswer;
  CHECK_THROWS_AS(openset_protocol(w.model, w.tasks, w.dir, w.manifest,
                                   {train}, {holdout}, leaky, 9),
                  ConfigError);
}

TEST_CASE("cross-domain splits by task kind and rejects overlap") {
  const World& w = world();
  ProtocolSettings ps = fast_settings(w);

  auto out = crossdomain_protocol(w.model, w.tasks, w.dir, w.manifest,
                                  {TaskKind::kReverse}, {TaskKind::kCopy}, ps,
                                  9);
  CHECK(out.report.protocol == "cross_domain");
  REQUIRE(out.report.rows.size() == 1);
  CHECK(w.tasks.at(out.report.rows[0].task_id).kind == TaskKind::kCopy);
  CHECK(w.tasks.at(out.report.train_tasks[0]).kind == TaskKind::kReverse);

  CHECK_THROWS_AS(
      crossdomain_protocol(w.model, w.tasks, w.dir, w.manifest,
                           {TaskKind::kReverse, TaskKind::kCopy},
                           {TaskKind::kCopy}, ps, 9),
      DomainError);
}

TEST_CASE("baselines add tuned and in-context columns") {
  const World& w = world();
  ProtocolSettings ps = fast_settings(w);
  ps.baselines = true;
  auto ids = all_ids(w);
  auto out = closeset_protocol(w.model, w.tasks, w.dir, w.manifest,
                               {ids[0]}, ps, 9);
  const TaskEval& row = out.report.rows[0];
  for (double a : {row.full_shot, row.few_shot, row.in_context}) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
  bool saw_baseline_tag = false;
  for (const std::string& p : out.report.provenance)
    saw_baseline_tag =
        saw_baseline_tag || p == "baseline:answers:" + ids[0];
  CHECK(saw_baseline_tag);

  CHECK_THROWS_AS(restrict_train_split(w.tasks.at(ids[0]), 0), DomainError);
}

TEST_CASE("report save writes json and both csv views") {
  const World& w = world();
  ProtocolSettings ps = fast_settings(w);
  auto ids = all_ids(w);
  auto out = closeset_protocol(w.model, w.tasks, w.dir, w.manifest, ids, ps, 9);
  auto dir = std::filesystem::temp_directory_path() / "hl_eval_report";
  std::filesystem::remove_all(dir);
  out.report.save(dir);

  EvalReport back = EvalReport::from_json(
      nlohmann::json::parse(read_file(dir / "report.json")));
  CHECK(back.to_json().dump() == out.report.to_json().dump());

  std::string acc = read_file(dir / "accuracy.csv");
  CHECK(acc.rfind("task_id,generated,", 0) == 0);
  CHECK(std::count(acc.begin(), acc.end(), '\n') == 1 + (long)ids.size());
  std::string ad = read_file(dir / "adapters.csv");
  CHECK(std::count(ad.begin(), ad.end(), '\n') ==
        1 + (long)(ids.size() * ids.size()));
}

TEST_CASE("efficiency probe times generation against tuning") {
  const World& w = world();
  ProtocolSettings ps = fast_settings(w);
  HyperDecoder<float> dec = init_decoder<float>(ps.decoder_spec, 5);
  const TaskDataset& ds = w.tasks.begin()->second;
  TimingTable t =
      efficiency_report(w.model, ds, dec, "hashed_trigram", w.plan, ps.train,
                        ps.zoo_recipe, 13);
  CHECK(t.generation_seconds > 0.0);
  CHECK(t.tuning_seconds > 0.0);
  CHECK(t.encoder_warmup_seconds >= 0.0);
  CHECK(t.speedup_ratio ==
        Catch::Approx(t.tuning_seconds / t.generation_seconds));
}
