#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "hyperlora/optim.hpp"

using namespace hyperlora;

TEST_CASE("adamw matches a hand-derived scalar trajectory") {
  // lr 0.01, betas (0.9, 0.999), eps 1e-8, wd 0.1, constant grad 0.5,
  // p0 = 1; expected values computed independently in double precision.
  Tensor<double> p({1});
  p[0] = 1.0;
  Tensor<double> g({1});
  g[0] = 0.5;
  AdamWConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.1;
  AdamW<double> opt(cfg);
  const double expected[3] = {0.989000000200, 0.978011000400, 0.967032989599};
  for (int t = 0; t < 3; ++t) {
    opt.step({&p}, {&g});
    CHECK(p[0] == Catch::Approx(expected[t]).epsilon(1e-9));
  }
  CHECK(opt.step_count() == 3);
}

TEST_CASE("adamw with zero weight decay follows the adam trajectory") {
  Tensor<double> p({1});
  p[0] = -2.0;
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  AdamW<double> opt(cfg);
  const double grads[3] = {0.3, -0.7, 0.1};
  const double expected[3] = {-2.099999996667, -2.057981457960, -2.034099125923};
  Tensor<double> g({1});
  for (int t = 0; t < 3; ++t) {
    g[0] = grads[t];
    opt.step({&p}, {&g});
    CHECK(p[0] == Catch::Approx(expected[t]).epsilon(1e-9));
  }
}

TEST_CASE("adamw descends a simple quadratic") {
  // minimize (x-3)^2 from x=0; enough steps should approach 3
  Tensor<float> p({1});
  AdamWConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.0;
  AdamW<float> opt(cfg);
  Tensor<float> g({1});
  for (int t = 0; t < 2000; ++t) {
    g[0] = 2.0f * (p[0] - 3.0f);
    opt.step({&p}, {&g});
  }
  CHECK(std::abs(p[0] - 3.0f) < 0.05f);
}

TEST_CASE("set_lr changes the step size") {
  Tensor<float> p({1});
  p[0] = 1.0f;
  AdamWConfig cfg;
  cfg.lr = 0.0;
  cfg.weight_decay = 0.0;
  AdamW<float> opt(cfg);
  Tensor<float> g({1});
  g[0] = 1.0f;
  opt.step({&p}, {&g});
  CHECK(p[0] == 1.0f);  // zero lr: no movement
  opt.set_lr(0.1);
  opt.step({&p}, {&g});
  CHECK(p[0] < 1.0f);
}

TEST_CASE("mismatched groups are rejected") {
  Tensor<float> p({2}), g({2}), bad({3});
  AdamW<float> opt;
  CHECK_THROWS_AS(opt.step({&p}, {}), StructuralError);
  CHECK_THROWS_AS(opt.step({&p}, {&bad}), StructuralError);
}

TEST_CASE("global norm and clipping") {
  Tensor<float> a({2}), b({1});
  a[0] = 3.0f;
  a[1] = 0.0f;
  b[0] = 4.0f;
  std::vector<Tensor<float>*> grads = {&a, &b};
  CHECK(global_grad_norm(grads) == Catch::Approx(5.0));

  double pre = clip_global_norm(grads, 1.0);
  CHECK(pre == Catch::Approx(5.0));
  CHECK(global_grad_norm(grads) == Catch::Approx(1.0).epsilon(1e-6));
  CHECK(a[0] == Catch::Approx(0.6f));
  CHECK(b[0] == Catch::Approx(0.8f));

  // below the threshold: untouched
  double pre2 = clip_global_norm(grads, 10.0);
  CHECK(pre2 == Catch::Approx(1.0).epsilon(1e-6));
  CHECK(a[0] == Catch::Approx(0.6f));
}
