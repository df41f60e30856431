#pragma once

// AdamW with decoupled weight decay and a linear warmup/decay schedule.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dirgap/errors.hpp"
#include "dirgap/nn/array.hpp"

namespace dirgap {

struct OptimConfig {
  double base_lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_frac = 0.1;
  double clip_norm = 1.0;
  int epochs = 20;
  int batch_size = 64;

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0) throw ConfigError("warmup_frac must be in [0, 1)");
    if (epochs < 1 || batch_size < 1) throw ConfigError("epochs and batch_size must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  }

  // Transformer defaults: lr 1e-4, wd 0.01, 20 epochs of batch 64.
  static OptimConfig transformer() { return {}; }

  // Regularized finetuning: weight decay 0.1.
  static OptimConfig finetune_reg() {
    OptimConfig c;
    c.weight_decay = 0.1;
    return c;
  }

  // MLP baseline: lr 1e-3, no weight decay, 50 epochs of batch 256.
  static OptimConfig mlp() {
    OptimConfig c;
    c.base_lr = 1e-3;
    c.weight_decay = 0.0;
    c.epochs = 50;
    c.batch_size = 256;
    return c;
  }

  friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

inline long warmup_steps(long total_steps, const OptimConfig& cfg) {
  return static_cast<long>(std::ceil(cfg.warmup_frac * static_cast<double>(total_steps)));
}

/// Linear ramp 0 -> base_lr over ceil(warmup_frac * total) steps, then linear
/// decay to 0 at total_steps.
inline double lr_at(long step, long total_steps, const OptimConfig& cfg) {
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  step = std::clamp(step, 0L, total_steps);
  const long warm = warmup_steps(total_steps, cfg);
  if (step < warm) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (total_steps == warm) return cfg.base_lr;
  return cfg.base_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warm);
}

/// eta_r = min(eta_base * r / 8, 1e-3)
inline double lora_lr(double base_lr, int rank) {
  if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
  return std::min(base_lr * static_cast<double>(rank) / 8.0, 1e-3);
}

template <class T>
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(std::move(cfg)) {}

  long steps_taken() const { return t_; }

  /// One update of every trainable entry with learning rate `lr`. Decay is
  /// decoupled (theta *= 1 - lr * wd) and skipped for decay-exempt entries.
  void step(nn::ParameterStore<T>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, e] : params) {
      if (!e.trainable) continue;
      auto& st = state_[name];
      if (st.m.size() != e.value.size()) {
        st.m.assign(e.value.size(), 0.0);
        st.v.assign(e.value.size(), 0.0);
      }
      const double decay = e.decay ? lr * cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < e.value.size(); ++i) {
        const double g = e.grad[i];
        double theta = e.value[i];
        theta -= decay * theta;
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        theta -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        e.value[i] = static_cast<T>(theta);
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  OptimConfig cfg_;
  std::map<std::string, Moments> state_;
  long t_ = 0;
};

}  // namespace dirgap
