#pragma once

// GPT-2 style causal Transformer, LoRA adapters on its attention
// projections, and the non-causal character MLP baseline.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dirgap/errors.hpp"
#include "dirgap/nn/array.hpp"
#include "dirgap/nn/checkpoint.hpp"
#include "dirgap/nn/loss.hpp"
#include "dirgap/nn/ops.hpp"
#include "dirgap/nn/tape.hpp"
#include "dirgap/rng.hpp"
#include "dirgap/textcodec.hpp"

namespace dirgap {

using nn::ParameterStore;
using nn::Tape;
using nn::Var;

struct TransformerConfig {
  int n_layers = 2;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 512;
  int max_len = kDefaultMaxLen;
  int vocab_size = 39;
  double attn_dropout = 0.0;
  double resid_dropout = 0.0;
  double embd_dropout = 0.0;

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || max_len < 1 ||
        vocab_size < 2)
      throw ConfigError("transformer dimensions must be positive (vocab >= 2)");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    for (double p : {attn_dropout, resid_dropout, embd_dropout})
      if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probabilities must be in [0, 1)");
  }

  friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

struct LoraConfig {
  int rank = 8;
  double alpha = 8.0;  // scaling is alpha / rank
  double dropout = 0.05;
  std::set<std::string> targets{"attn.c_attn", "attn.c_proj"};

  static LoraConfig with_rank(int r) {
    LoraConfig c;
    c.rank = r;
    c.alpha = r;
    return c;
  }

  double scaling() const { return alpha / rank; }

  friend bool operator==(const LoraConfig&, const LoraConfig&) = default;
};

inline constexpr std::string_view kLoraPrefix = "lora.";

enum class Init { Scratch, FromCheckpoint };

namespace detail {

// Biases and LayerNorm parameters are exempt from weight decay.
inline bool is_decay_exempt(const std::string& name) {
  return name.ends_with(".bias") || name.find("ln_") != std::string::npos ||
         name.starts_with("ln.");
}

template <class T>
void tag_decay(ParameterStore<T>& p) {
  for (auto& [name, e] : p) e.decay = !is_decay_exempt(name);
}

template <class T>
void fill_normal(nn::DenseArray<T>& a, Rng& rng, double sd) {
  for (auto& v : a.values) v = static_cast<T>(rng.normal(0.0, sd));
}

template <class T>
void fill_uniform(nn::DenseArray<T>& a, Rng& rng, double bound) {
  for (auto& v : a.values) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
}

inline std::string layer_name(int i, std::string_view rest) {
  return "h." + std::to_string(i) + "." + std::string(rest);
}

}  // namespace detail

/// Parameters in GPT-2 naming. Scratch init: weights N(0, 0.02), biases 0,
/// LayerNorm gains 1. The LM head is tied to the token embedding.
template <class T>
ParameterStore<T> transformer_init(const TransformerConfig& cfg, std::uint64_t seed,
                                   Init init = Init::Scratch,
                                   const std::filesystem::path& checkpoint = {}) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  ParameterStore<T> p;
  Rng rng(seed);
  auto weight = [&](const std::string& name, nn::Shape shape) {
    detail::fill_normal(p.add(name, std::move(shape)).value, rng, 0.02);
  };
  auto zeros = [&](const std::string& name, std::size_t n) { p.add(name, {n}, false); };
  auto ones = [&](const std::string& name, std::size_t n) {
    auto& e = p.add(name, {n}, false);
    std::fill(e.value.values.begin(), e.value.values.end(), T{1});
  };
  weight("wte", {static_cast<std::size_t>(cfg.vocab_size), d});
  weight("wpe", {static_cast<std::size_t>(cfg.max_len), d});
  for (int i = 0; i < cfg.n_layers; ++i) {
    ones(detail::layer_name(i, "ln_1.weight"), d);
    zeros(detail::layer_name(i, "ln_1.bias"), d);
    weight(detail::layer_name(i, "attn.c_attn.weight"), {3 * d, d});
    zeros(detail::layer_name(i, "attn.c_attn.bias"), 3 * d);
    weight(detail::layer_name(i, "attn.c_proj.weight"), {d, d});
    zeros(detail::layer_name(i, "attn.c_proj.bias"), d);
    ones(detail::layer_name(i, "ln_2.weight"), d);
    zeros(detail::layer_name(i, "ln_2.bias"), d);
    weight(detail::layer_name(i, "mlp.c_fc.weight"), {ff, d});
    zeros(detail::layer_name(i, "mlp.c_fc.bias"), ff);
    weight(detail::layer_name(i, "mlp.c_proj.weight"), {d, ff});
    zeros(detail::layer_name(i, "mlp.c_proj.bias"), d);
  }
  ones("ln_f.weight", d);
  zeros("ln_f.bias", d);
  detail::tag_decay(p);
  if (init == Init::FromCheckpoint) nn::load_into(p, checkpoint);
  return p;
}

/// Freezes every base entry and adds trainable adapters A [r, in] ~ N(0, 0.02)
/// and B [out, r] = 0 for each targeted projection, so W_eff = W + (alpha/r) B A.
template <class T>
ParameterStore<T> lora_wrap(const ParameterStore<T>& base, const TransformerConfig& cfg,
                            const LoraConfig& lcfg, std::uint64_t seed) {
  if (lcfg.rank < 1) throw ConfigError("LoRA rank must be >= 1");
  if (lcfg.alpha <= 0.0) throw ConfigError("LoRA alpha must be positive");
  if (lcfg.dropout < 0.0 || lcfg.dropout >= 1.0) throw ConfigError("LoRA dropout must be in [0, 1)");
  if (lcfg.targets.empty()) throw ConfigError("LoRA needs at least one target");
  ParameterStore<T> p = base;
  p.freeze_all();
  Rng rng(seed);
  const auto r = static_cast<std::size_t>(lcfg.rank);
  for (int i = 0; i < cfg.n_layers; ++i) {
    for (const auto& target : lcfg.targets) {
      const std::string wname = detail::layer_name(i, target + ".weight");
      if (!base.contains(wname)) throw ConfigError("LoRA target missing from base: " + wname);
      const auto& shape = base.at(wname).value.shape;
      const std::size_t out = shape[0], in = shape[1];
      // Ranks past min(out, in) are over-complete but still well defined.
      if (r > out + in)
        throw ConfigError("LoRA rank " + std::to_string(r) + " too large for " + wname +
                          " " + nn::shape_string(shape));
      const std::string prefix = std::string(kLoraPrefix) + detail::layer_name(i, target);
      detail::fill_normal(p.add(prefix + ".A", {r, in}).value, rng, 0.02);
      p.add(prefix + ".B", {out, r});
    }
  }
  return p;
}

template <class T>
bool has_lora(const ParameterStore<T>& params) {
  for (const auto& [name, e] : params)
    if (name.starts_with(kLoraPrefix)) return true;
  return false;
}

struct ForwardResult {
  Var loss;
  Var logits;
  nn::CrossEntropy stats;
  std::size_t batch = 0;
  std::size_t seq = 0;
};

/// Teacher-forced causal LM loss over the target span of each instance.
///
/// The batch is cut to its longest unpadded instance; with right padding and
/// a causal mask this leaves every logit of interest unchanged. Logits at
/// position t score token t+1, and rows count toward the loss when token t+1
/// is in the target span.
template <class T>
ForwardResult transformer_forward(Tape<T>& tape, ParameterStore<T>& params,
                                  const TransformerConfig& cfg,
                                  std::span<const TaskInstance> batch, bool train,
                                  Rng* rng = nullptr, const LoraConfig* lora = nullptr) {
  if (batch.empty()) throw ConfigError("empty batch");
  if (has_lora(params) && !lora) throw ConfigError("LoRA adapters present but no LoraConfig given");
  std::size_t seq = 0;
  for (const auto& ti : batch)
    seq = std::max(seq, static_cast<std::size_t>(ti.prompt_len + ti.target_len));
  if (seq > static_cast<std::size_t>(cfg.max_len) || seq > batch[0].input_ids.size())
    throw ConfigError("instance length exceeds max_len");
  const std::size_t B = batch.size(), N = B * seq;
  const bool dropping = train && (cfg.attn_dropout > 0 || cfg.resid_dropout > 0 ||
                                  cfg.embd_dropout > 0 || (lora && lora->dropout > 0));
  if (dropping && !rng) throw ConfigError("training with dropout needs an rng");

  std::vector<std::int32_t> ids(N), pos(N), targets(N, 0);
  std::vector<std::uint8_t> mask(N, 0);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& ti = batch[b];
    for (std::size_t t = 0; t < seq; ++t) {
      ids[b * seq + t] = ti.input_ids[t];
      pos[b * seq + t] = static_cast<std::int32_t>(t);
      if (t + 1 < seq && ti.loss_mask[t + 1]) {
        targets[b * seq + t] = ti.input_ids[t + 1];
        mask[b * seq + t] = 1;
      }
    }
  }

  auto P = [&](const std::string& name) { return tape.param(params, name); };
  auto project = [&](Var h, int layer, const std::string& target) {
    Var y = linear(tape, h, P(detail::layer_name(layer, target + ".weight")),
                   P(detail::layer_name(layer, target + ".bias")));
    const std::string prefix = std::string(kLoraPrefix) + detail::layer_name(layer, target);
    if (lora && params.contains(prefix + ".A")) {
      Var u = dropout(tape, h, lora->dropout, rng, train);
      u = linear(tape, u, P(prefix + ".A"));
      u = linear(tape, u, P(prefix + ".B"));
      y = add(tape, y, scale(tape, u, static_cast<T>(lora->scaling())));
    }
    return y;
  };

  Var x = add(tape, embedding(tape, P("wte"), ids), embedding(tape, P("wpe"), pos));
  x = dropout(tape, x, cfg.embd_dropout, rng, train);
  for (int i = 0; i < cfg.n_layers; ++i) {
    Var h = layer_norm(tape, x, P(detail::layer_name(i, "ln_1.weight")),
                       P(detail::layer_name(i, "ln_1.bias")));
    Var qkv = project(h, i, "attn.c_attn");
    Var a = causal_self_attention(tape, qkv, B, seq, static_cast<std::size_t>(cfg.n_heads),
                                  cfg.attn_dropout, rng, train);
    a = project(a, i, "attn.c_proj");
    x = add(tape, x, dropout(tape, a, cfg.resid_dropout, rng, train));
    h = layer_norm(tape, x, P(detail::layer_name(i, "ln_2.weight")),
                   P(detail::layer_name(i, "ln_2.bias")));
    Var f = gelu(tape, linear(tape, h, P(detail::layer_name(i, "mlp.c_fc.weight")),
                              P(detail::layer_name(i, "mlp.c_fc.bias"))));
    f = linear(tape, f, P(detail::layer_name(i, "mlp.c_proj.weight")),
               P(detail::layer_name(i, "mlp.c_proj.bias")));
    x = add(tape, x, dropout(tape, f, cfg.resid_dropout, rng, train));
  }
  x = layer_norm(tape, x, P("ln_f.weight"), P("ln_f.bias"));
  ForwardResult r;
  r.logits = linear(tape, x, P("wte"));
  r.batch = B;
  r.seq = seq;
  auto ce = masked_cross_entropy(tape, r.logits, targets, mask);
  r.loss = ce.loss;
  r.stats = ce.stats;
  return r;
}

struct MLPConfig {
  int seq_len = 8;
  int vocab_size = 36;
  int d_emb = 64;
  int n_hidden_layers = 4;
  int d_hidden = 512;

  int output_dim() const { return seq_len * vocab_size; }

  void validate() const {
    if (seq_len < 1 || vocab_size < 2 || d_emb < 1 || n_hidden_layers < 1 || d_hidden < 1)
      throw ConfigError("MLP dimensions must be positive (vocab >= 2)");
  }

  friend bool operator==(const MLPConfig&, const MLPConfig&) = default;
};

/// Embedding rows N(0, 1); linear weights and biases U(-1/sqrt(in), 1/sqrt(in));
/// LayerNorm gains 1 and biases 0.
template <class T>
ParameterStore<T> mlp_init(const MLPConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParameterStore<T> p;
  Rng rng(seed);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const auto hid = static_cast<std::size_t>(cfg.d_hidden);
  detail::fill_normal(p.add("emb.weight", {v, static_cast<std::size_t>(cfg.d_emb)}).value, rng, 1.0);
  std::size_t in = static_cast<std::size_t>(cfg.seq_len * cfg.d_emb);
  auto linear_params = [&](const std::string& prefix, std::size_t out, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    detail::fill_uniform(p.add(prefix + ".weight", {out, fan_in}).value, rng, bound);
    detail::fill_uniform(p.add(prefix + ".bias", {out}, false).value, rng, bound);
  };
  for (int i = 0; i < cfg.n_hidden_layers; ++i) {
    const std::string s = std::to_string(i);
    linear_params("fc." + s, hid, in);
    auto& g = p.add("ln." + s + ".weight", {hid}, false);
    std::fill(g.value.values.begin(), g.value.values.end(), T{1});
    p.add("ln." + s + ".bias", {hid}, false);
    in = hid;
  }
  linear_params("head", static_cast<std::size_t>(cfg.output_dim()), hid);
  detail::tag_decay(p);
  return p;
}

/// embed -> flatten -> n x [linear -> ReLU -> LayerNorm] -> linear(L * |Σ|),
/// scored as L independent |Σ|-way predictions. `source` and `target` hold
/// alphabet indices, seq_len per example.
template <class T>
ForwardResult mlp_forward(Tape<T>& tape, ParameterStore<T>& params, const MLPConfig& cfg,
                          std::span<const std::int32_t> source,
                          std::span<const std::int32_t> target) {
  const auto L = static_cast<std::size_t>(cfg.seq_len);
  if (source.empty() || source.size() % L != 0 || target.size() != source.size())
    throw ConfigError("MLP batch must hold whole sequences of seq_len ids");
  const std::size_t B = source.size() / L;
  auto P = [&](const std::string& name) { return tape.param(params, name); };
  Var x = embedding(tape, P("emb.weight"), source);
  x = view(tape, x, {B, L * static_cast<std::size_t>(cfg.d_emb)});
  for (int i = 0; i < cfg.n_hidden_layers; ++i) {
    const std::string s = std::to_string(i);
    x = relu(tape, linear(tape, x, P("fc." + s + ".weight"), P("fc." + s + ".bias")));
    x = layer_norm(tape, x, P("ln." + s + ".weight"), P("ln." + s + ".bias"));
  }
  Var out = linear(tape, x, P("head.weight"), P("head.bias"));
  ForwardResult r;
  r.logits = view(tape, out, {B * L, static_cast<std::size_t>(cfg.vocab_size)});
  r.batch = B;
  r.seq = L;
  std::vector<std::uint8_t> mask(B * L, 1);
  auto ce = masked_cross_entropy(tape, r.logits, target, mask);
  r.loss = ce.loss;
  r.stats = ce.stats;
  return r;
}

// Alphabet indices of a string, for the MLP.
inline std::vector<std::int32_t> alphabet_ids(const std::string& s, const StringSpec& spec) {
  std::vector<std::int32_t> out;
  out.reserve(s.size());
  for (char c : s) {
    const auto pos = spec.alphabet.find(c);
    if (pos == std::string::npos) throw EncodingError(std::string("character '") + c + "' not in alphabet");
    out.push_back(static_cast<std::int32_t>(pos));
  }
  return out;
}

}  // namespace dirgap
