#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "hyperlora/backbone.hpp"
#include "hyperlora/optim.hpp"

using namespace hyperlora;

namespace {

BackboneConfig tiny_cfg() {
  BackboneConfig cfg;
  cfg.context_len = 20;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  return cfg;
}

template <typename T>
TokenBatch<T> tiny_batch(const BackboneConfig& cfg) {
  std::vector<std::string> prompts = {"copy: abcd", "add: 123"};
  std::vector<std::string> answers = {"abcd", "6"};
  return make_token_batch<T>(cfg, prompts, answers);
}

}  // namespace

TEST_CASE("character codec round-trips the full vocabulary") {
  std::string chars =
      "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 :";
  for (char c : chars) {
    int id = encode_char(c);
    CHECK(id >= 4);
    CHECK(id < kVocabSize);
    CHECK(decode_char(id) == c);
  }
  CHECK_THROWS_AS(encode_char('!'), DomainError);
  CHECK_THROWS_AS(decode_char(kPadToken), DomainError);
  CHECK_THROWS_AS(decode_char(kVocabSize), DomainError);
}

TEST_CASE("token batches mask exactly the answer and eos targets") {
  BackboneConfig cfg = tiny_cfg();
  auto batch = make_token_batch<float>(cfg, {"copy: ab"}, {"ab"});
  // seq: BOS c o p y :  ' ' a b SEP a b EOS  (13 tokens, 12 input positions)
  CHECK(batch.tokens(0, 0) == kBosToken);
  CHECK(batch.targets(0, 0) == encode_char('c'));
  // SEP sits at index 9; answer targets are at input positions 9 and 10,
  // EOS target at position 11
  CHECK(batch.tokens(0, 9) == kSepToken);
  CHECK(batch.targets(0, 9) == encode_char('a'));
  CHECK(batch.targets(0, 11) == kEosToken);
  double mask_sum = 0.0;
  for (std::int64_t t = 0; t < cfg.context_len; ++t)
    mask_sum += batch.mask(0, t);
  CHECK(mask_sum == 3.0);  // 2 answer chars + EOS
  CHECK(batch.mask(0, 8) == 0.0f);
  CHECK(batch.mask(0, 9) == 1.0f);
  CHECK(batch.mask(0, 10) == 1.0f);
  CHECK(batch.mask(0, 11) == 1.0f);
  CHECK(batch.mask(0, 12) == 0.0f);
  // too-long sequences are rejected
  BackboneConfig small = cfg;
  small.context_len = 8;
  CHECK_THROWS_AS(make_token_batch<float>(small, {"copy: abcdef"}, {"abcdef"}),
                  DomainError);
}

TEST_CASE("init is deterministic and shaped by the config") {
  BackboneConfig cfg = tiny_cfg();
  auto a = init_backbone<float>(cfg, 5);
  auto b = init_backbone<float>(cfg, 5);
  auto c = init_backbone<float>(cfg, 6);
  CHECK(a.tok_emb.vec() == b.tok_emb.vec());
  CHECK(a.layers[1].w2.vec() == b.layers[1].w2.vec());
  CHECK(a.tok_emb.vec() != c.tok_emb.vec());
  CHECK(a.param_count() > 0);
  CHECK(a.layers.size() == 2);
  CHECK(a.head.shape() == std::vector<std::int64_t>{kVocabSize, 16});
  BackboneConfig bad = cfg;
  bad.n_heads = 3;  // does not divide 16
  CHECK_THROWS_AS(init_backbone<float>(bad, 0), ConfigError);
}

TEST_CASE("analytic gradients match central finite differences") {
  // Double precision end-to-end; relative tolerance 1e-4.
  BackboneConfig cfg = tiny_cfg();
  auto model = init_backbone<double>(cfg, 11);
  auto lora = init_lora<double>(cfg, 2, 13, "probe");
  // make B nonzero so every adapter path carries gradient
  Rng rng(99);
  for (auto& Bm : lora.B) Bm.fill_uniform(rng, -0.05, 0.05);
  auto batch = tiny_batch<double>(cfg);

  ForwardCache<double> cache;
  double base_loss = forward_loss(model, &lora, batch, cache);
  REQUIRE(std::isfinite(base_loss));
  auto grads = make_zero_grads(model);
  auto lgrads = make_zero_lora_grads(lora);
  backward(model, &lora, batch, cache, &grads, &lgrads);

  const double h = 1e-5;
  auto fd_check = [&](Tensor<double>& param, const Tensor<double>& grad,
                      const std::string& name) {
    // probe a deterministic spread of coordinates in each tensor
    std::int64_t n = param.numel();
    std::int64_t stride = std::max<std::int64_t>(1, n / 7);
    for (std::int64_t i = 0; i < n; i += stride) {
      double keep = param[i];
      param[i] = keep + h;
      ForwardCache<double> c1;
      double up = forward_loss(model, &lora, batch, c1);
      param[i] = keep - h;
      ForwardCache<double> c2;
      double down = forward_loss(model, &lora, batch, c2);
      param[i] = keep;
      double numeric = (up - down) / (2 * h);
      double analytic = grad[i];
      double denom = std::max({1e-8, std::abs(numeric), std::abs(analytic)});
      double rel = std::abs(numeric - analytic) / denom;
      INFO(name << "[" << i << "] analytic=" << analytic
                << " numeric=" << numeric);
      if (std::abs(numeric) < 1e-9 && std::abs(analytic) < 1e-9) continue;
      REQUIRE(rel < 1e-4);
    }
  };

  model.for_each_param([&](const std::string& name, Tensor<double>& t) {
    // find the matching grad tensor through the same traversal
    Tensor<double>* g = nullptr;
    grads.for_each_param([&](const std::string& gname, Tensor<double>& gt) {
      if (gname == name) g = &gt;
    });
    REQUIRE(g != nullptr);
    fd_check(t, *g, name);
  });
  for (std::size_t i = 0; i < lora.targets.size(); ++i) {
    fd_check(lora.A[i], lgrads.A[i], lora.targets[i] + ".A");
    fd_check(lora.B[i], lgrads.B[i], lora.targets[i] + ".B");
  }
}

TEST_CASE("adapter route agrees with merged weights") {
  BackboneConfig cfg = tiny_cfg();
  auto model = init_backbone<float>(cfg, 3);
  auto lora = init_lora<float>(cfg, 4, 7, "t");
  Rng rng(1);
  for (auto& Bm : lora.B) Bm.fill_uniform(rng, -0.1f, 0.1f);

  auto batch = tiny_batch<float>(cfg);
  ForwardCache<float> c1, c2;
  double adapter_loss = forward_loss(model, &lora, batch, c1);
  auto merged = merge_lora(model, lora);
  double merged_loss = forward_loss(merged, batch, c2);
  CHECK(adapter_loss == Catch::Approx(merged_loss).margin(1e-4));
  for (std::int64_t i = 0; i < c1.logits.numel(); ++i)
    REQUIRE(std::abs(c1.logits[i] - c2.logits[i]) < 1e-3f);

  // greedy decoding agrees too
  std::string g1 = generate_answer(model, &lora, "copy: abcd");
  std::string g2 = generate_answer(merged, "copy: abcd");
  CHECK(g1 == g2);
}

TEST_CASE("zero-initialized adapter leaves the model unchanged") {
  BackboneConfig cfg = tiny_cfg();
  auto model = init_backbone<float>(cfg, 3);
  auto lora = init_lora<float>(cfg, 4, 7, "t");  // B == 0
  auto batch = tiny_batch<float>(cfg);
  ForwardCache<float> c1, c2;
  double with = forward_loss(model, &lora, batch, c1);
  double without = forward_loss(model, batch, c2);
  CHECK(with == Catch::Approx(without).margin(1e-7));
}

TEST_CASE("incremental decoding matches batch logits") {
  // The KV-cache path must agree with the full forward: compare the greedy
  // first answer token against an argmax on the batched logits at the SEP.
  BackboneConfig cfg = tiny_cfg();
  auto model = init_backbone<float>(cfg, 21);
  std::string prompt = "copy: zz";
  auto batch = make_token_batch<float>(cfg, {prompt}, {"zz"});
  ForwardCache<float> cache;
  forward_loss(model, batch, cache);
  std::int64_t sep_pos = 0;
  for (std::int64_t t = 0; t < cfg.context_len; ++t)
    if (batch.tokens(0, t) == kSepToken) sep_pos = t;
  int best = 0;
  for (int v = 1; v < cfg.vocab_size; ++v)
    if (cache.logits(0, sep_pos, v) > cache.logits(0, sep_pos, best)) best = v;
  std::string gen = generate_answer(model, prompt, 1);
  if (best == kEosToken || best == kPadToken || best == kBosToken ||
      best == kSepToken) {
    CHECK(gen.empty());
  } else {
    REQUIRE(gen.size() == 1);
    CHECK(encode_char(gen[0]) == best);
  }
}

TEST_CASE("a few optimizer steps reduce the training loss") {
  BackboneConfig cfg = tiny_cfg();
  auto model = init_backbone<float>(cfg, 8);
  auto batch = tiny_batch<float>(cfg);
  std::vector<Tensor<float>*> params;
  model.for_each_param(
      [&](const std::string&, Tensor<float>& t) { params.push_back(&t); });
  AdamWConfig ocfg;
  ocfg.lr = 3e-3;
  ocfg.weight_decay = 0.0;
  AdamW<float> opt(ocfg);
  ForwardCache<float> cache;
  double first = forward_loss(model, batch, cache);
  double last = first;
  for (int step = 0; step < 30; ++step) {
    auto grads = make_zero_grads(model);
    forward_loss(model, batch, cache);
    backward(model, batch, cache, &grads);
    std::vector<Tensor<float>*> gptrs;
    grads.for_each_param(
        [&](const std::string&, Tensor<float>& t) { gptrs.push_back(&t); });
    clip_global_norm(gptrs, 1.0);
    opt.step(params, gptrs);
    last = forward_loss(model, batch, cache);
  }
  CHECK(last < 0.5 * first);
}

TEST_CASE("backbone serialization round-trips the forward pass") {
  BackboneConfig cfg = tiny_cfg();
  auto model = init_backbone<float>(cfg, 9);
  WeightFile wf = backbone_to_weight_file(model);
  std::string bytes = encode_weight_file(wf);
  auto back = backbone_from_weight_file<float>(decode_weight_file(bytes));
  auto batch = tiny_batch<float>(cfg);
  ForwardCache<float> c1, c2;
  double l1 = forward_loss(model, batch, c1);
  double l2 = forward_loss(back, batch, c2);
  CHECK(l1 == l2);  // bit-exact parameters imply identical loss
  for (std::int64_t i = 0; i < c1.logits.numel(); ++i)
    REQUIRE(c1.logits[i] == c2.logits[i]);
}

TEST_CASE("adapter serialization round-trips bit-exactly") {
  BackboneConfig cfg = tiny_cfg();
  auto lora = init_lora<float>(cfg, 3, 17, "reverse");
  lora.step_id = "ft_0042";
  Rng rng(2);
  for (auto& Bm : lora.B) Bm.fill_uniform(rng, -0.2f, 0.2f);
  WeightFile wf = lora_to_weight_file(lora);
  auto back = lora_from_weight_file<float>(decode_weight_file(encode_weight_file(wf)));
  CHECK(back.task_id == "reverse");
  CHECK(back.step_id == "ft_0042");
  CHECK(back.rank == 3);
  REQUIRE(back.targets == lora.targets);
  for (std::size_t i = 0; i < lora.targets.size(); ++i) {
    REQUIRE(back.A[i].vec() == lora.A[i].vec());
    REQUIRE(back.B[i].vec() == lora.B[i].vec());
  }
}

TEST_CASE("prompts that overflow the context are rejected at decode time") {
  BackboneConfig cfg = tiny_cfg();
  cfg.context_len = 8;
  auto model = init_backbone<float>(cfg, 1);
  CHECK_THROWS_AS(generate_answer(model, "copy: abcdefgh"),
                  DomainError);
}
