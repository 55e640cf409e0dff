// End-to-end tests of the command-line orchestrator, driven as a subprocess.

#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hyperlora/backbone.hpp"
#include "hyperlora/config.hpp"
#include "hyperlora/eval_harness.hpp"

using namespace hyperlora;
namespace fs = std::filesystem;
using nlohmann::json;

#ifndef HL_CLI_PATH
#error "HL_CLI_PATH must point at the hyperlora_cli binary"
#endif

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string out;  // stdout
  std::string err;  // stderr
};

CmdResult run_cli(const std::string& args) {
  const fs::path err_file =
      fs::temp_directory_path() / "hl_cli_stderr.txt";
  const std::string cmd =
      std::string(HL_CLI_PATH) + " " + args + " 2>" + err_file.string();
  CmdResult r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf;
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  int status = ::pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  if (fs::exists(err_file)) r.err = read_file(err_file);
  return r;
}

// Last stdout line parsed as the command's result record.
json record_of(const CmdResult& r) {
  std::string line = r.out;
  while (!line.empty() && (line.back() == '\n' || line.back() == '\r'))
    line.pop_back();
  auto nl = line.rfind('\n');
  if (nl != std::string::npos) line = line.substr(nl + 1);
  return json::parse(line);
}

// A micro experiment that finishes every stage in seconds.
struct CliWorld {
  fs::path root;
  fs::path config;
};

const CliWorld& cli_world() {
  static CliWorld w = [] {
    CliWorld out;
    out.root = fs::temp_directory_path() / "hl_cli_world";
    fs::remove_all(out.root);
    fs::create_directories(out.root);
    out.config = out.root / "exp.json";

    ExperimentConfig cfg;
    cfg.seed = 17;
    cfg.output_root = (out.root / "runs").string();
    cfg.run_name = "main";
    cfg.corpus.tasks = {"reverse", "copy"};
    cfg.corpus.samples_per_task = 60;
    cfg.backbone.d_model = 16;
    cfg.backbone.n_layers = 2;
    cfg.backbone.n_heads = 2;
    cfg.backbone.d_ff = 32;
    cfg.backbone.pretrain_steps = 5;
    cfg.backbone.pretrain_batch_size = 4;
    cfg.zoo.adapt_steps = 3;
    cfg.zoo.snapshot_steps = 2;
    cfg.zoo.batch_size = 4;
    cfg.zoo.rank = 2;
    BlockSpec b;
    b.n_in = 4;
    b.l_in = 24;
    b.c_in = 16;
    b.n_out = 6;
    b.l_out = 4;
    b.c_out = 12;
    cfg.decoder.blocks = {b};
    cfg.train.steps = 12;
    cfg.train.pairs_per_step = 1;
    cfg.train.lr = 1e-3;
    cfg.train.batch_len = 4;
    cfg.train.pool_size = 4;
    cfg.train.early_stop = false;
    cfg.eval.max_samples = 6;
    write_file(out.config, cfg.to_json().dump(2));

    // The staged pipeline the other tests build on.
    for (const char* stage :
         {"corpus", "collect-zoo", "train-generator", "generate",
          "evaluate"}) {
      CmdResult r = run_cli(std::string(stage) + " -c " + out.config.string());
      if (r.exit_code != 0)
        throw std::runtime_error("stage " + std::string(stage) +
                                 " failed: " + r.err);
    }
    return out;
  }();
  return w;
}

fs::path main_run() { return cli_world().root / "runs" / "main"; }

}  // namespace

TEST_CASE("pipeline stages leave complete artifacts behind") {
  const CliWorld& w = cli_world();
  fs::path run = main_run();
  CHECK(fs::exists(run / "config.json"));
  CHECK(fs::exists(run / "corpus" / "reverse.jsonl"));
  CHECK(fs::exists(run / "corpus" / "corpus.json"));
  CHECK(fs::exists(run / "zoo" / "backbone.bin"));
  CHECK(fs::exists(run / "zoo" / "manifest.json"));
  CHECK(fs::exists(run / "generator" / "generator.bin"));
  CHECK(fs::exists(run / "generator" / "state.bin"));
  CHECK(fs::exists(run / "generator" / "trace.csv"));
  CHECK(fs::exists(run / "generated" / "reverse.bin"));
  CHECK(fs::exists(run / "eval" / "report.json"));
  CHECK(fs::exists(run / "eval" / "accuracy.csv"));
  // No stage leaves its lock behind.
  CHECK_FALSE(fs::exists(run / ".lock"));

  EvalReport rep = EvalReport::from_json(
      json::parse(read_file(run / "eval" / "report.json")));
  CHECK(rep.protocol == "close_set");
  CHECK(rep.rows.size() == 2);
  (void)w;
}

TEST_CASE("generated adapters load and merge into the backbone") {
  fs::path run = main_run();
  Backbone<float> model = backbone_from_weight_file<float>(
      load_weight_file(run / "zoo" / "backbone.bin"));
  LoRAAdapter<float> ad = lora_from_weight_file<float>(
      load_weight_file(run / "generated" / "reverse.bin"));
  CHECK(ad.task_id == "reverse");
  Backbone<float> merged = merge_lora(model, ad);
  CHECK(merged.layers.size() == model.layers.size());
}

TEST_CASE("collect-zoo is idempotent: rerun matches the manifest hash") {
  const CliWorld& w = cli_world();
  std::string base = " -c " + w.config.string() + " --set run_name=twin";
  REQUIRE(run_cli("corpus" + base).exit_code == 0);
  json first = record_of(run_cli("collect-zoo" + base));
  json again = record_of(run_cli("collect-zoo" + base + " --force"));
  CHECK(first.at("manifest_hash") == again.at("manifest_hash"));

  // And it matches the main run: same config, same content.
  ZooManifest main_manifest =
      load_zoo_manifest(main_run() / "zoo" / "manifest.json");
  CHECK(first.at("manifest_hash").get<std::string>() ==
        hash_hex(main_manifest.content_hash()));
}

TEST_CASE("dry-run validates without touching the generator artifacts") {
  const CliWorld& w = cli_world();
  fs::path gen = main_run() / "generator" / "generator.bin";
  auto before = fs::last_write_time(gen);
  json rec = record_of(
      run_cli("train-generator -c " + w.config.string() + " --dry-run"));
  CHECK(rec.at("dry_run") == true);
  CHECK(rec.at("steps_run") == 0);
  CHECK(rec.at("checkpoints") == 4);
  CHECK(fs::last_write_time(gen) == before);
}

TEST_CASE("resume continues to the requested step count losslessly") {
  const CliWorld& w = cli_world();
  std::string base = " -c " + w.config.string();

  json more = record_of(run_cli("train-generator" + base +
                                " --resume --set train.steps=20"));
  CHECK(more.at("resumed") == true);
  CHECK(more.at("steps_run") == 8);
  CHECK(more.at("total_steps") == 20);

  // A fresh, uninterrupted 20-step run lands on the identical artifact.
  for (const char* stage : {"corpus", "collect-zoo"})
    REQUIRE(run_cli(std::string(stage) + base +
                    " --set run_name=straight").exit_code == 0);
  json straight = record_of(run_cli("train-generator" + base +
                                    " --set run_name=straight"
                                    " --set train.steps=20"));
  CHECK(straight.at("generator_hash") == more.at("generator_hash"));

  // Loss continuity across the seam: no resume spike.
  std::string trace = read_file(main_run() / "generator" / "trace.csv");
  std::vector<double> losses;
  std::size_t pos = trace.find('\n') + 1;
  while (pos < trace.size()) {
    std::size_t comma = trace.find(',', pos);
    std::size_t eol = trace.find('\n', pos);
    losses.push_back(std::stod(trace.substr(comma + 1, eol - comma - 1)));
    pos = eol + 1;
  }
  REQUIRE(losses.size() == 20);
  double pre_mean = 0.0, pre_sq = 0.0;
  for (int i = 6; i < 12; ++i) pre_mean += losses[i];
  pre_mean /= 6.0;
  for (int i = 6; i < 12; ++i)
    pre_sq += (losses[i] - pre_mean) * (losses[i] - pre_mean);
  double pre_std = std::sqrt(pre_sq / 6.0);
  CHECK(std::abs(losses[12] - pre_mean) < 10.0 * std::max(pre_std, 1e-6));
}

TEST_CASE("failure paths emit machine-readable error records") {
  const CliWorld& w = cli_world();

  CmdResult miss = run_cli("evaluate -c " + w.config.string() +
                           " --set run_name=empty_run");
  CHECK(miss.exit_code == 1);
  json rec = json::parse(miss.err.substr(0, miss.err.find('\n')));
  CHECK(rec.at("error") == "IoError");
  CHECK(rec.at("message").get<std::string>().find("corpus") !=
        std::string::npos);

  CmdResult usage = run_cli("corpus");
  CHECK(usage.exit_code != 0);
  json urec = json::parse(usage.err.substr(0, usage.err.find('\n')));
  CHECK(urec.at("error") == "UsageError");

  CmdResult badcfg = run_cli(
      "corpus -c " + w.config.string() +
      " --set corpus.tasks=[\\\"no_such_task\\\"] --set run_name=bad");
  CHECK(badcfg.exit_code == 1);
  json brec = json::parse(badcfg.err.substr(0, badcfg.err.find('\n')));
  CHECK(brec.at("error") == "ConfigError");
}

TEST_CASE("conflicting decoder and zoo geometry fails before training") {
  const CliWorld& w = cli_world();
  CmdResult r = run_cli("train-generator -c " + w.config.string() +
                        " --set zoo.rank=4 --set run_name=main --dry-run");
  // rank only affects fresh zoos; instead break the decoder output shape.
  r = run_cli(
      "train-generator -c " + w.config.string() +
      " --set decoder.blocks=[{\\\"in\\\":[4,24,16],\\\"out\\\":[5,4,12],"
      "\\\"kernel\\\":3,\\\"gelu\\\":true}] --dry-run");
  CHECK(r.exit_code == 1);
  json rec = json::parse(r.err.substr(0, r.err.find('\n')));
  CHECK(rec.at("error") == "ConfigError");
  const std::string msg = rec.at("message").get<std::string>();
  CHECK(msg.find("[5,4,12]") != std::string::npos);  // decoder side
  CHECK(msg.find("[6,4,12]") != std::string::npos);  // zoo side
}

TEST_CASE("weight-map and efficiency commands board a finished run") {
  const CliWorld& w = cli_world();
  json map = record_of(
      run_cli("weight-map -c " + w.config.string() + " --perplexity 3"));
  CHECK(map.at("points").get<int>() >= 6);  // 4 zoo + 2 generated
  CHECK(fs::exists(main_run() / "map" / "weight_map.csv"));
  CHECK(fs::exists(main_run() / "map" / "weight_map.png"));

  json eff = record_of(run_cli("efficiency -c " + w.config.string()));
  CHECK(eff.at("speedup_ratio").get<double>() > 0.0);
  CHECK(fs::exists(main_run() / "eval" / "efficiency.json"));

  // The evaluation report absorbed the timing table.
  EvalReport rep = EvalReport::from_json(
      json::parse(read_file(main_run() / "eval" / "report.json")));
  CHECK(rep.timing.generation_seconds > 0.0);
  CHECK(rep.timing.tuning_seconds > 0.0);
  CHECK(rep.timing.speedup_ratio ==
        rep.timing.tuning_seconds / rep.timing.generation_seconds);
}

TEST_CASE("report aggregates runs with recomputable means and stds") {
  const CliWorld& w = cli_world();
  // Second evaluated run with a different seed.
  std::string alt = " -c " + w.config.string() + " --set run_name=alt" +
                    " --set seed=18";
  for (const char* stage :
       {"corpus", "collect-zoo", "train-generator", "evaluate"})
    REQUIRE(run_cli(std::string(stage) + alt).exit_code == 0);

  fs::path out_dir = cli_world().root / "agg";
  fs::path alt_run = cli_world().root / "runs" / "alt";
  json rec = record_of(run_cli("report " + main_run().string() + " " +
                               alt_run.string() + " --out-dir " +
                               out_dir.string()));
  CHECK(rec.at("runs") == 2);
  REQUIRE(fs::exists(out_dir / "aggregate.csv"));
  REQUIRE(fs::exists(out_dir / "runs.csv"));

  // Recompute the aggregate independently from the two reports.
  auto run_mean = [](const fs::path& run) {
    EvalReport rep = EvalReport::from_json(
        json::parse(read_file(run / "eval" / "report.json")));
    double g = 0.0;
    for (const TaskEval& r : rep.rows) g += r.generated;
    return g / static_cast<double>(rep.rows.size());
  };
  const double m1 = run_mean(main_run());
  const double m2 = run_mean(alt_run);
  const double want_mean = (m1 + m2) / 2.0;
  const double want_std =
      std::sqrt(((m1 - want_mean) * (m1 - want_mean) +
                 (m2 - want_mean) * (m2 - want_mean)) /
                2.0);
  CHECK(rec.at("generated_mean").get<double>() ==
        Catch::Approx(want_mean).margin(1e-9));
  CHECK(rec.at("generated_std").get<double>() ==
        Catch::Approx(want_std).margin(1e-9));

  CmdResult missing = run_cli("report /nonexistent_run");
  CHECK(missing.exit_code == 1);
}
