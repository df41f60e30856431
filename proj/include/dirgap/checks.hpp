#pragma once

// Ready-made gradient checks on tiny instances of both model families.

#include <cstdint>
#include <vector>

#include "dirgap/mapgen.hpp"
#include "dirgap/models.hpp"
#include "dirgap/nn/gradcheck.hpp"
#include "dirgap/textcodec.hpp"

namespace dirgap {

namespace detail {

inline MappingConfig tiny_mapping() {
  MappingConfig m;
  m.spec.alphabet = "abcdef";
  m.spec.length = 4;
  m.branching = 2;
  m.n_pairs = 6;
  m.seed = 3;
  return m;
}

// Moves every entry away from its init (zeros, ones, tiny normals) so that
// no gradient term vanishes by construction.
template <class T>
void jitter(ParameterStore<T>& p, std::uint64_t seed, double sd) {
  Rng rng(seed);
  for (auto& [name, e] : p)
    for (auto& v : e.value.values) v += static_cast<T>(rng.normal(0.0, sd));
}

}  // namespace detail

inline TransformerConfig tiny_transformer_config(int vocab_size) {
  TransformerConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_len = 16;
  c.vocab_size = vocab_size;
  return c;
}

inline MLPConfig tiny_mlp_config() {
  MLPConfig c;
  c.seq_len = 4;
  c.vocab_size = 6;
  c.d_emb = 5;
  c.n_hidden_layers = 2;
  c.d_hidden = 12;
  return c;
}

/// Tiny Transformer on a 6-pair inverse batch. With `with_lora` the base is
/// frozen and rank-3 adapters (non-zero B) are checked instead.
inline nn::GradCheckReport gradcheck_tiny_transformer(const nn::GradCheckOptions& opt = {},
                                                      bool with_lora = false) {
  const auto m = detail::tiny_mapping();
  const PairSet ps = generate(m);
  const Vocab vocab(m.spec);
  const auto cfg = tiny_transformer_config(vocab.size());
  std::vector<TaskInstance> batch;
  for (const auto& p : ps.pairs) batch.push_back(encode_example(p, Direction::Inverse, vocab, cfg.max_len));
  // Ragged batch: the last instance is cut short so that padding is exercised.
  batch.back().input_ids[batch.back().prompt_len + 2] = vocab.pad_id();
  batch.back().loss_mask[batch.back().prompt_len + 2] = 0;
  batch.back().loss_mask[batch.back().prompt_len + 3] = 0;
  batch.back().input_ids[batch.back().prompt_len + 3] = vocab.pad_id();
  batch.back().target_len = 2;

  auto params = transformer_init<double>(cfg, 11);
  detail::jitter(params, 12, 0.3);
  LoraConfig lcfg = LoraConfig::with_rank(3);
  if (with_lora) {
    params = lora_wrap(params, cfg, lcfg, 13);
    for (auto& [name, e] : params)
      if (name.starts_with(kLoraPrefix))
        for (auto& v : e.value.values) v += Rng(fnv1a(name)).normal(0.0, 0.3);
  }
  nn::LossFn fn = [&](Tape<double>& tape, ParameterStore<double>& p) {
    return transformer_forward(tape, p, cfg, batch, false, nullptr, with_lora ? &lcfg : nullptr).loss;
  };
  return nn::grad_check(fn, params, opt);
}

/// Tiny MLP on a 6-pair forward batch.
inline nn::GradCheckReport gradcheck_tiny_mlp(const nn::GradCheckOptions& opt = {}) {
  const auto m = detail::tiny_mapping();
  const PairSet ps = generate(m);
  const auto cfg = tiny_mlp_config();
  std::vector<std::int32_t> src, tgt;
  for (const auto& p : ps.pairs) {
    auto a = alphabet_ids(p.a, m.spec), b = alphabet_ids(p.b, m.spec);
    src.insert(src.end(), a.begin(), a.end());
    tgt.insert(tgt.end(), b.begin(), b.end());
  }
  auto params = mlp_init<double>(cfg, 21);
  detail::jitter(params, 22, 0.1);
  nn::LossFn fn = [&](Tape<double>& tape, ParameterStore<double>& p) {
    return mlp_forward(tape, p, cfg, src, tgt).loss;
  };
  return nn::grad_check(fn, params, opt);
}

}  // namespace dirgap
