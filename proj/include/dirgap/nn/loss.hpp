#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dirgap/errors.hpp"
#include "dirgap/nn/array.hpp"
#include "dirgap/nn/tape.hpp"

namespace dirgap::nn {

struct CrossEntropy {
  double loss = 0.0;     // mean NLL over counted rows, nats
  double sum_nll = 0.0;  // total NLL over counted rows, nats
  std::size_t count = 0;
};

namespace detail {

inline void check_ce_args(std::size_t rows, std::size_t vocab,
                          std::span<const std::int32_t> targets,
                          std::span<const std::uint8_t> mask) {
  if (vocab < 2) throw ConfigError("cross entropy needs at least 2 classes");
  if (targets.size() != rows || mask.size() != rows)
    throw ConfigError("cross entropy: targets/mask length must equal the row count");
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++count;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab)
      throw ConfigError("cross entropy: target id out of range");
  }
  if (count == 0) throw EmptyTargetError("cross entropy: no mask-true positions");
}

// -log softmax(row)[target], with max subtraction, accumulated in double.
template <class T>
double row_nll(const T* row, std::size_t vocab, std::int32_t target, double* lse_out) {
  double m = row[0];
  for (std::size_t j = 1; j < vocab; ++j) m = std::max(m, static_cast<double>(row[j]));
  double z = 0.0;
  for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j]) - m);
  const double lse = m + std::log(z);
  if (lse_out) *lse_out = lse;
  return lse - static_cast<double>(row[target]);
}

}  // namespace detail

/// Mean over mask-true rows of -log softmax(logits)[target], natural log.
template <class T>
CrossEntropy masked_cross_entropy(const DenseArray<T>& logits,
                                  std::span<const std::int32_t> targets,
                                  std::span<const std::uint8_t> mask) {
  if (logits.shape.size() != 2) throw ConfigError("cross entropy: logits must be [T, V]");
  const std::size_t rows = logits.shape[0], vocab = logits.shape[1];
  detail::check_ce_args(rows, vocab, targets, mask);
  CrossEntropy ce;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ce.sum_nll += detail::row_nll(logits.data() + r * vocab, vocab, targets[r], nullptr);
    ++ce.count;
  }
  ce.loss = ce.sum_nll / static_cast<double>(ce.count);
  if (!std::isfinite(ce.loss)) throw NumericError("non-finite cross entropy");
  return ce;
}

struct LossVar {
  Var loss;  // scalar: mean NLL over counted rows
  CrossEntropy stats;
};

/// Tape version of masked_cross_entropy; logits is [rows, V].
template <class T>
LossVar masked_cross_entropy(Tape<T>& tape, Var logits,
                             std::span<const std::int32_t> targets,
                             std::span<const std::uint8_t> mask) {
  const auto& s = tape.shape(logits);
  if (s.size() != 2) throw ConfigError("cross entropy: logits must be [T, V]");
  const std::size_t rows = s[0], vocab = s[1];
  detail::check_ce_args(rows, vocab, targets, mask);
  LossVar out;
  out.loss = tape.make({1}, tape.requires_grad(logits));
  const T* lg = tape.node(logits).value;
  std::vector<double> lse(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    out.stats.sum_nll += detail::row_nll(lg + r * vocab, vocab, targets[r], &lse[r]);
    ++out.stats.count;
  }
  out.stats.loss = out.stats.sum_nll / static_cast<double>(out.stats.count);
  if (!std::isfinite(out.stats.loss)) throw NumericError("non-finite cross entropy");
  tape.node(out.loss).value[0] = static_cast<T>(out.stats.loss);

  if (tape.requires_grad(logits)) {
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    const double inv_count = 1.0 / static_cast<double>(out.stats.count);
    tape.on_backward([&tape, logits, loss = out.loss, rows, vocab, inv_count,
                      lse = std::move(lse), tgt = std::move(tgt), msk = std::move(msk)] {
      const double g = static_cast<double>(tape.node(loss).grad[0]) * inv_count;
      const T* lg = tape.node(logits).value;
      T* dl = tape.node(logits).grad;
      for (std::size_t r = 0; r < rows; ++r) {
        if (!msk[r]) continue;
        const T* row = lg + r * vocab;
        T* drow = dl + r * vocab;
        for (std::size_t j = 0; j < vocab; ++j) {
          const double p = std::exp(static_cast<double>(row[j]) - lse[r]);
          drow[j] += static_cast<T>(g * p);
        }
        drow[tgt[r]] -= static_cast<T>(g);
      }
    });
  }
  return out;
}

/// Scales every trainable gradient by max_norm / ||g|| when ||g|| > max_norm.
/// Returns the factor applied (1 when no clipping happened).
template <class T>
double clip_global_norm(ParameterStore<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, e] : params) {
    if (!e.trainable) continue;
    for (const T& g : e.grad.values) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm <= max_norm || norm == 0.0) return 1.0;
  const double factor = max_norm / norm;
  for (auto& [name, e] : params) {
    if (!e.trainable) continue;
    for (T& g : e.grad.values) g = static_cast<T>(g * factor);
  }
  return factor;
}

template <class T>
double global_grad_norm(const ParameterStore<T>& params) {
  double sq = 0.0;
  for (const auto& [name, e] : params)
    if (e.trainable)
      for (const T& g : e.grad.values) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

}  // namespace dirgap::nn
