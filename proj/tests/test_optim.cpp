#include <gtest/gtest.h>

#include <cmath>

#include "dirgap/optim.hpp"

using namespace dirgap;

TEST(Schedule, Examples) {
  OptimConfig c;
  EXPECT_EQ(lr_at(0, 1000, c), 0.0);
  EXPECT_EQ(warmup_steps(1000, c), 100);
  EXPECT_DOUBLE_EQ(lr_at(100, 1000, c), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(550, 1000, c), 5.0e-5);
  EXPECT_DOUBLE_EQ(lr_at(550, 1000, c), 1e-4 * (1000 - 550) / 900.0);
  EXPECT_DOUBLE_EQ(lr_at(1000, 1000, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(50, 1000, c), 5e-5);
  // ceil: 10% of 1260 steps is exactly 126, of 1261 it is 127.
  EXPECT_EQ(warmup_steps(1260, c), 126);
  EXPECT_EQ(warmup_steps(1261, c), 127);
  EXPECT_THROW(lr_at(0, 0, c), ConfigError);
}

TEST(Schedule, PiecewiseLinearAndBounded) {
  OptimConfig c;
  c.base_lr = 3e-4;
  for (long total : {1L, 7L, 63L, 1260L}) {
    double mx = 0;
    for (long s = 0; s <= total; ++s) {
      const double lr = lr_at(s, total, c);
      EXPECT_GE(lr, 0.0);
      EXPECT_LE(lr, c.base_lr * (1 + 1e-12));
      mx = std::max(mx, lr);
      if (s > 0) {
        // Adjacent values differ by at most one ramp increment.
        const long warm = std::max(1L, warmup_steps(total, c));
        const double step = c.base_lr / std::min(warm, std::max(1L, total - warm));
        EXPECT_LE(std::abs(lr - lr_at(s - 1, total, c)), step * (1 + 1e-9));
      }
    }
    EXPECT_DOUBLE_EQ(mx, c.base_lr);
  }
}

TEST(Presets, Values) {
  const auto t = OptimConfig::transformer();
  EXPECT_EQ(t.base_lr, 1e-4);
  EXPECT_EQ(t.weight_decay, 0.01);
  EXPECT_EQ(t.epochs, 20);
  EXPECT_EQ(t.batch_size, 64);
  EXPECT_EQ(OptimConfig::finetune_reg().weight_decay, 0.1);
  const auto m = OptimConfig::mlp();
  EXPECT_EQ(m.base_lr, 1e-3);
  EXPECT_EQ(m.weight_decay, 0.0);
  EXPECT_EQ(m.batch_size, 256);
  EXPECT_EQ(m.epochs, 50);
  OptimConfig bad;
  bad.warmup_frac = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(LoraLr, Examples) {
  EXPECT_DOUBLE_EQ(lora_lr(1e-4, 8), 1e-4);
  EXPECT_DOUBLE_EQ(lora_lr(1e-4, 64), 8e-4);
  EXPECT_DOUBLE_EQ(lora_lr(1e-4, 256), 1e-3);
  EXPECT_THROW(lora_lr(1e-4, 0), ConfigError);
}

namespace {

nn::ParameterStore<double> scalar_store(double theta, bool decay = true) {
  nn::ParameterStore<double> p;
  p.add("theta", {1}, decay).value[0] = theta;
  return p;
}

}  // namespace

TEST(AdamW, SignAndStepBound) {
  OptimConfig c;
  c.weight_decay = 0;
  AdamW<double> opt(c);
  auto p = scalar_store(1.0);
  p.at("theta").grad[0] = 1.0;  // d/dθ ½θ² at θ = 1
  opt.step(p, 0.1);
  EXPECT_LT(p.at("theta").value[0], 1.0);
  EXPECT_LE(1.0 - p.at("theta").value[0], 0.1);
}

TEST(AdamW, PureDecay) {
  OptimConfig c;
  c.weight_decay = 0.1;
  AdamW<double> opt(c);
  auto p = scalar_store(2.0);
  opt.step(p, 0.1);
  EXPECT_DOUBLE_EQ(p.at("theta").value[0], 2.0 * (1 - 0.01));
}

TEST(AdamW, ExemptEntriesNeverDecay) {
  OptimConfig c;
  c.weight_decay = 0.5;
  AdamW<double> opt(c);
  nn::ParameterStore<double> p;
  p.add("w", {2}).value.values = {1.0, -1.0};
  p.add("b", {2}, false).value.values = {1.0, -1.0};
  p.add("frozen", {1}).value[0] = 3.0;
  p.at("frozen").trainable = false;
  p.at("frozen").grad[0] = 5.0;
  for (int i = 0; i < 5; ++i) opt.step(p, 0.1);
  EXPECT_EQ(p.at("b").value.values, (nn::Buffer<double>{1.0, -1.0}));
  EXPECT_LT(p.at("w").value[0], 1.0);
  EXPECT_EQ(p.at("frozen").value[0], 3.0);
}

TEST(AdamW, ReducesToAdamTenStepTrajectory) {
  // Plain Adam on f(θ) = ½θ², written out step by step.
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.05;
  double theta = 1.5, m = 0, v = 0;
  std::vector<double> expect;
  for (int t = 1; t <= 10; ++t) {
    const double g = theta;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    theta -= lr * mh / (std::sqrt(vh) + eps);
    expect.push_back(theta);
  }
  OptimConfig c;
  c.weight_decay = 0;
  AdamW<double> opt(c);
  auto p = scalar_store(1.5);
  for (int t = 0; t < 10; ++t) {
    p.at("theta").grad[0] = p.at("theta").value[0];
    opt.step(p, lr);
    EXPECT_NEAR(p.at("theta").value[0], expect[t], 1e-10) << "step " << t + 1;
  }
  EXPECT_EQ(opt.steps_taken(), 10);
  // First Adam step moves by exactly lr (bias-corrected m/sqrt(v) = sign(g)).
  EXPECT_NEAR(expect[0], 1.5 - lr, 1e-8);
}

TEST(AdamW, Deterministic) {
  auto run = [] {
    OptimConfig c;
    AdamW<double> opt(c);
    auto p = scalar_store(0.7);
    std::vector<double> traj;
    for (int t = 0; t < 20; ++t) {
      p.at("theta").grad[0] = std::sin(p.at("theta").value[0] * 3);
      opt.step(p, 0.01);
      traj.push_back(p.at("theta").value[0]);
    }
    return traj;
  };
  EXPECT_EQ(run(), run());
}
