#pragma once

// Entropy-controlled random string mappings.
//
// A PairSet holds n_pairs (A, B) pairs over Σ^L such that every A is globally
// unique and every distinct B has exactly K pre-images. The forward task A->B
// is then a function (H = 0) and the inverse task B->A is uniform over K
// choices (H = ln K).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dirgap/errors.hpp"
#include "dirgap/rng.hpp"

namespace dirgap {

inline constexpr std::string_view kDefaultAlphabet =
    "abcdefghijklmnopqrstuvwxyz0123456789";

struct StringSpec {
  std::string alphabet{kDefaultAlphabet};
  int length = 8;

  void validate() const {
    if (alphabet.empty()) throw ConfigError("alphabet is empty");
    if (length < 1) throw ConfigError("string length must be >= 1");
    std::unordered_set<char> seen;
    for (char c : alphabet) {
      if (!std::isgraph(static_cast<unsigned char>(c)))
        throw ConfigError("alphabet characters must be printable, non-space");
      if (!seen.insert(c).second)
        throw ConfigError(std::string("duplicate alphabet character '") + c + "'");
    }
  }

  // |Σ|^L, saturating at UINT64_MAX.
  std::uint64_t space_size() const {
    std::uint64_t total = 1;
    const std::uint64_t base = alphabet.size();
    for (int i = 0; i < length; ++i) {
      if (total > UINT64_MAX / base) return UINT64_MAX;
      total *= base;
    }
    return total;
  }

  bool contains(const std::string& s) const {
    if (static_cast<int>(s.size()) != length) return false;
    return std::all_of(s.begin(), s.end(), [&](char c) {
      return alphabet.find(c) != std::string::npos;
    });
  }

  friend bool operator==(const StringSpec&, const StringSpec&) = default;
};

struct MappingConfig {
  StringSpec spec;
  std::uint32_t branching = 1;  // K
  std::uint64_t n_pairs = 4000;
  std::uint64_t seed = 0;

  std::uint64_t n_targets() const { return n_pairs / branching; }

  void validate() const {
    spec.validate();
    if (branching < 1) throw ConfigError("branching factor K must be >= 1");
    if (n_pairs < 1) throw ConfigError("n_pairs must be >= 1");
    if (n_pairs % branching != 0)
      throw ConfigError("K=" + std::to_string(branching) +
                        " does not divide n_pairs=" + std::to_string(n_pairs));
    // A and B are sampled on independent sides, so each side only needs its
    // own distinct strings.
    const std::uint64_t space = spec.space_size();
    if (n_pairs > space || n_targets() > space)
      throw ConfigError("alphabet too small: " + std::to_string(n_pairs) +
                        " distinct strings requested from a space of " +
                        std::to_string(space));
  }

  // One-line "key=value" form used as the PairSet file header.
  std::string serialize() const {
    std::ostringstream os;
    os << "alphabet=" << spec.alphabet << " length=" << spec.length
       << " branching=" << branching << " n_pairs=" << n_pairs
       << " seed=" << seed;
    return os.str();
  }

  static MappingConfig parse(const std::string& line) {
    MappingConfig cfg;
    std::istringstream is(line);
    std::string field;
    int seen = 0;
    while (is >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw ConfigError("bad config field: " + field);
      const std::string key = field.substr(0, eq);
      const std::string value = field.substr(eq + 1);
      try {
        if (key == "alphabet") {
          cfg.spec.alphabet = value;
        } else if (key == "length") {
          cfg.spec.length = std::stoi(value);
        } else if (key == "branching") {
          cfg.branching = static_cast<std::uint32_t>(std::stoul(value));
        } else if (key == "n_pairs") {
          cfg.n_pairs = std::stoull(value);
        } else if (key == "seed") {
          cfg.seed = std::stoull(value);
        } else {
          throw ConfigError("unknown config key: " + key);
        }
      } catch (const std::logic_error&) {
        throw ConfigError("bad value for " + key + ": " + value);
      }
      ++seen;
    }
    if (seen != 5) throw ConfigError("incomplete mapping config: " + line);
    cfg.validate();
    return cfg;
  }

  friend bool operator==(const MappingConfig&, const MappingConfig&) = default;
};

struct Pair {
  std::string a;
  std::string b;
  friend bool operator==(const Pair&, const Pair&) = default;
};

struct PairSet {
  std::vector<Pair> pairs;
  MappingConfig config;

  std::uint64_t content_hash() const {
    std::uint64_t h = fnv1a(config.serialize());
    for (const auto& p : pairs) {
      h = fnv1a(p.a, h);
      h = fnv1a("\t", h);
      h = fnv1a(p.b, h);
      h = fnv1a("\n", h);
    }
    return h;
  }

  friend bool operator==(const PairSet&, const PairSet&) = default;
};

namespace detail {

inline std::string random_string(const StringSpec& spec, Rng& rng) {
  std::string s(static_cast<std::size_t>(spec.length), '\0');
  for (auto& c : s) c = spec.alphabet[rng.below(spec.alphabet.size())];
  return s;
}

// Draws `count` strings absent from `taken` (which is updated), by rejection
// with a cap of 100 * count attempts.
inline std::vector<std::string> sample_distinct(
    const StringSpec& spec, std::uint64_t count, Rng& rng,
    std::unordered_set<std::string>& taken) {
  std::vector<std::string> out;
  out.reserve(count);
  const std::uint64_t cap = 100 * std::max<std::uint64_t>(count, 1);
  std::uint64_t attempts = 0;
  while (out.size() < count) {
    if (++attempts > cap)
      throw ConfigError("sampling exhausted after " + std::to_string(cap) +
                        " attempts (" + std::to_string(out.size()) + "/" +
                        std::to_string(count) + " distinct strings drawn)");
    std::string s = random_string(spec, rng);
    if (taken.insert(s).second) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

/// K = 1: n distinct A and n distinct B, B shuffled, then zipped.
inline PairSet generate_bijective(const MappingConfig& cfg) {
  cfg.validate();
  if (cfg.branching != 1)
    throw ConfigError("generate_bijective requires K=1");
  Rng rng(cfg.seed);
  std::unordered_set<std::string> taken_a, taken_b;
  auto as = detail::sample_distinct(cfg.spec, cfg.n_pairs, rng, taken_a);
  auto bs = detail::sample_distinct(cfg.spec, cfg.n_pairs, rng, taken_b);
  rng.shuffle(bs);
  PairSet ps{{}, cfg};
  ps.pairs.reserve(cfg.n_pairs);
  for (std::size_t i = 0; i < as.size(); ++i)
    ps.pairs.push_back({std::move(as[i]), std::move(bs[i])});
  return ps;
}

/// K > 1: n/K distinct targets, each with K globally distinct pre-images.
/// Pairs are emitted target by target and then shuffled.
inline PairSet generate_many_to_one(const MappingConfig& cfg) {
  cfg.validate();
  if (cfg.branching <= 1)
    throw ConfigError("generate_many_to_one requires K>1");
  Rng rng(cfg.seed);
  std::unordered_set<std::string> taken_a, taken_b;
  const auto bs = detail::sample_distinct(cfg.spec, cfg.n_targets(), rng, taken_b);
  PairSet ps{{}, cfg};
  ps.pairs.reserve(cfg.n_pairs);
  for (const auto& b : bs) {
    auto as = detail::sample_distinct(cfg.spec, cfg.branching, rng, taken_a);
    for (auto& a : as) ps.pairs.push_back({std::move(a), b});
  }
  rng.shuffle(ps.pairs);
  return ps;
}

inline PairSet generate(const MappingConfig& cfg) {
  return cfg.branching == 1 ? generate_bijective(cfg) : generate_many_to_one(cfg);
}

struct TopologyReport {
  std::uint64_t n_pairs = 0;
  std::uint64_t distinct_a = 0;
  std::uint64_t distinct_b = 0;
  std::uint64_t invalid_strings = 0;
  // Number of strings that occur both as some A and as some B. Reported only.
  std::uint64_t ab_overlap = 0;
  // multiplicity -> number of distinct B with that many pre-images
  std::map<std::uint64_t, std::uint64_t> b_multiplicity;
  std::vector<std::string> violations;

  bool pass() const { return violations.empty(); }
};

inline TopologyReport validate_topology(const PairSet& ps) {
  TopologyReport r;
  const auto& cfg = ps.config;
  r.n_pairs = ps.pairs.size();
  std::unordered_map<std::string, std::uint64_t> a_count, b_count;
  for (const auto& p : ps.pairs) {
    ++a_count[p.a];
    ++b_count[p.b];
    if (!cfg.spec.contains(p.a)) ++r.invalid_strings;
    if (!cfg.spec.contains(p.b)) ++r.invalid_strings;
  }
  r.distinct_a = a_count.size();
  r.distinct_b = b_count.size();
  for (const auto& [b, n] : b_count) ++r.b_multiplicity[n];
  for (const auto& [a, n] : a_count)
    if (b_count.contains(a)) ++r.ab_overlap;

  if (r.n_pairs != cfg.n_pairs)
    r.violations.push_back("pair count " + std::to_string(r.n_pairs) +
                           " != n_pairs " + std::to_string(cfg.n_pairs));
  if (r.distinct_a != r.n_pairs)
    r.violations.push_back("A not globally unique: " +
                           std::to_string(r.n_pairs - r.distinct_a) +
                           " duplicate A strings");
  if (r.b_multiplicity.size() != 1 || r.b_multiplicity.begin()->first != cfg.branching)
    r.violations.push_back("B multiplicity is not exactly K=" +
                           std::to_string(cfg.branching));
  if (cfg.branching > 0 && r.distinct_b != cfg.n_pairs / cfg.branching)
    r.violations.push_back("distinct B " + std::to_string(r.distinct_b) +
                           " != n_pairs/K " +
                           std::to_string(cfg.n_pairs / cfg.branching));
  if (r.invalid_strings > 0)
    r.violations.push_back(std::to_string(r.invalid_strings) +
                           " strings with wrong length or characters outside the alphabet");
  return r;
}

struct UniformityReport {
  double max_abs_z = 0.0;  // largest |count - mean| / binomial sd over Σ
  bool pass = true;
};

// Character-frequency sanity check over the distinct strings of one side.
// Fails if any character deviates from n·L/|Σ| by more than `z_limit`
// binomial standard deviations.
inline UniformityReport character_uniformity(const PairSet& ps, bool a_side,
                                             double z_limit = 5.0) {
  const auto& spec = ps.config.spec;
  std::unordered_set<std::string> distinct;
  for (const auto& p : ps.pairs) distinct.insert(a_side ? p.a : p.b);
  std::unordered_map<char, std::uint64_t> counts;
  for (const auto& s : distinct)
    for (char c : s) ++counts[c];
  const double trials = static_cast<double>(distinct.size()) * spec.length;
  const double prob = 1.0 / static_cast<double>(spec.alphabet.size());
  const double mean = trials * prob;
  const double sd = std::sqrt(trials * prob * (1.0 - prob));
  UniformityReport r;
  for (char c : spec.alphabet) {
    const double dev = std::abs(static_cast<double>(counts[c]) - mean);
    const double z = sd > 0 ? dev / sd : 0.0;
    r.max_abs_z = std::max(r.max_abs_z, z);
  }
  r.pass = r.max_abs_z <= z_limit;
  return r;
}

inline void save_pairset(const PairSet& ps, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
  out << ps.config.serialize() << '\n';
  for (const auto& p : ps.pairs) out << p.a << '\t' << p.b << '\n';
}

inline PairSet load_pairset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("empty pair file " + path.string());
  PairSet ps{{}, MappingConfig::parse(line)};
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                        ": expected A<TAB>B");
    ps.pairs.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return ps;
}

}  // namespace dirgap
