#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <map>

#include "dirgap/mapgen.hpp"
#include "dirgap/metrics.hpp"

using namespace dirgap;

namespace {

std::string two_dp(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Brute-force oracle: the empirical conditional p(target | source) assigns
// 1/multiplicity to each observed target, so -log p averaged over pairs.
double sequence_level_oracle(const PairSet& ps, Direction d) {
  std::map<std::string, int> mult;
  for (const auto& p : ps.pairs) ++mult[d == Direction::Forward ? p.a : p.b];
  double total = 0;
  for (const auto& p : ps.pairs) total += std::log(double(mult[d == Direction::Forward ? p.a : p.b]));
  return total / ps.pairs.size();
}

PairSet pairs(std::uint32_t k, std::uint64_t n, std::uint64_t seed) {
  MappingConfig m;
  m.branching = k;
  m.n_pairs = n;
  m.seed = seed;
  return generate(m);
}

}  // namespace

TEST(Floor, Values) {
  EXPECT_EQ(floor_nats(Direction::Forward, 1), 0.0);
  EXPECT_EQ(floor_nats(Direction::Forward, 8), 0.0);
  EXPECT_EQ(floor_nats(Direction::Inverse, 1), 0.0);
  EXPECT_NEAR(floor_nats(Direction::Inverse, 5), 1.6094379124341003, 1e-15);
  EXPECT_NEAR(floor_nats(Direction::Inverse, 8), 2.0794415416798357, 1e-15);
  EXPECT_EQ(two_dp(floor_nats(Direction::Inverse, 5)), "1.61");
  EXPECT_EQ(two_dp(floor_nats(Direction::Inverse, 8)), "2.08");
  EXPECT_THROW(floor_nats(Direction::Inverse, 0), ConfigError);
  const auto fs = FloorSpec::of(Direction::Inverse, 5);
  EXPECT_EQ(fs.floor, std::log(5.0));
}

TEST(Excess, Arithmetic) {
  EXPECT_EQ(two_dp(excess(3.08, floor_nats(Direction::Inverse, 5))), "1.47");
  EXPECT_EQ(two_dp(directional_gap(2.07, 0.91)), "1.16");
  EXPECT_EQ(directional_gap(0.5, 0.5), 0.0);
  const auto rec = MetricsRecord::of(4.7546, FloorSpec::of(Direction::Inverse, 5));
  EXPECT_EQ(rec.excess, rec.observed - rec.floor);
  EXPECT_EQ(two_dp(rec.excess), "3.15");
  EXPECT_EQ(two_dp(rec.observed), "4.75");
}

TEST(Oracle, FloorsAttained) {
  for (std::uint32_t k : {1u, 2u, 5u, 8u}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const auto ps = pairs(k, 1000, seed);
      const auto fwd = tabular_oracle_loss(ps, Direction::Forward);
      const auto inv = tabular_oracle_loss(ps, Direction::Inverse);
      EXPECT_EQ(fwd.per_sequence, 0.0);
      EXPECT_NEAR(inv.per_sequence, floor_nats(Direction::Inverse, k), 1e-9);
      EXPECT_NEAR(inv.per_sequence, sequence_level_oracle(ps, Direction::Inverse), 1e-9);
      EXPECT_NEAR(inv.per_token, inv.per_sequence / 8, 1e-12);
    }
  }
}

TEST(Oracle, SharedPrefixesHandledByCounts) {
  // Pre-images that share prefixes spread their ln K over later positions
  // but the sequence total is unchanged.
  MappingConfig m;
  m.spec.alphabet = "ab";
  m.spec.length = 3;
  m.branching = 4;
  m.n_pairs = 4;
  PairSet ps{{{"aaa", "bbb"}, {"aab", "bbb"}, {"aba", "bbb"}, {"bbb", "bbb"}}, m};
  const auto o = tabular_oracle_loss(ps, Direction::Inverse);
  EXPECT_NEAR(o.per_sequence, std::log(4.0), 1e-12);
  EXPECT_EQ(tabular_oracle_loss(ps, Direction::Forward).per_sequence, 0.0);
}

TEST(Oracle, EmptySet) {
  PairSet ps;
  EXPECT_THROW(tabular_oracle_loss(ps, Direction::Forward), ConfigError);
}
