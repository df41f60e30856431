#pragma once

// Entropy floors, excess loss and the directional gap, plus a lookup-table
// oracle that attains the inverse floor on a concrete PairSet.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>

#include "dirgap/errors.hpp"
#include "dirgap/mapgen.hpp"
#include "dirgap/textcodec.hpp"

namespace dirgap {

/// Minimum achievable cross-entropy: H(B|A) = 0 forward, H(A|B) = ln K inverse.
inline double floor_nats(Direction d, std::uint32_t k) {
  if (k < 1) throw ConfigError("K must be >= 1");
  return d == Direction::Forward ? 0.0 : std::log(static_cast<double>(k));
}

inline double excess(double observed, double floor) { return observed - floor; }

inline double directional_gap(double excess_inverse, double excess_forward) {
  return excess_inverse - excess_forward;
}

struct FloorSpec {
  Direction direction = Direction::Forward;
  std::uint32_t k = 1;
  double floor = 0.0;

  static FloorSpec of(Direction d, std::uint32_t k) { return {d, k, floor_nats(d, k)}; }
};

struct MetricsRecord {
  double observed = 0.0;
  double floor = 0.0;
  double excess = 0.0;

  static MetricsRecord of(double observed, const FloorSpec& fs) {
    return {observed, fs.floor, dirgap::excess(observed, fs.floor)};
  }
};

struct OracleLoss {
  double per_sequence = 0.0;  // mean over pairs of -log p(target | source)
  double per_token = 0.0;     // per_sequence / target length
};

/// Cross-entropy of the exact empirical conditional p*(target | source),
/// scored autoregressively on the data it was built from.
///
/// Counts every (source, target-prefix) occurrence, then scores each target
/// character with p(c | source, prefix) = n(source, prefix + c) / n(source,
/// prefix). Prefix collisions among the K pre-images are handled by the counts.
inline OracleLoss tabular_oracle_loss(const PairSet& ps, Direction d) {
  if (ps.pairs.empty()) throw ConfigError("empty PairSet");
  // Key: source '\t' prefix. Value: number of pairs with that source whose
  // target starts with prefix.
  std::unordered_map<std::string, std::uint64_t> counts;
  counts.reserve(ps.pairs.size() * (ps.config.spec.length + 2));
  for (const auto& p : ps.pairs) {
    const auto [src, tgt] = oriented(p, d);
    std::string key = src + '\t';
    ++counts[key];
    for (char c : tgt) {
      key += c;
      ++counts[key];
    }
  }
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& p : ps.pairs) {
    const auto [src, tgt] = oriented(p, d);
    std::string key = src + '\t';
    double seq = 0.0;
    for (char c : tgt) {
      const double parent = static_cast<double>(counts.at(key));
      key += c;
      const double child = static_cast<double>(counts.at(key));
      seq -= std::log(child / parent);
    }
    total += seq;
    tokens += tgt.size();
  }
  OracleLoss out;
  out.per_sequence = total / static_cast<double>(ps.pairs.size());
  out.per_token = total / static_cast<double>(tokens);
  return out;
}

}  // namespace dirgap
