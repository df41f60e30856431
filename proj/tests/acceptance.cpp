// Acceptance checks, one PASS/FAIL line each. Pass criterion numbers as
// arguments to run a subset; the exit code is nonzero if any check fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>

#include "dirgap/checks.hpp"
#include "dirgap/harness.hpp"
#include "dirgap/metrics.hpp"
#include "dirgap/report.hpp"

using namespace dirgap;
namespace fs = std::filesystem;

namespace {

constexpr auto F = Direction::Forward;
constexpr auto I = Direction::Inverse;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

MappingConfig desk_mapping(std::uint32_t k, std::uint64_t n = 4000, std::uint64_t seed = 0xacce97) {
  MappingConfig m;
  m.branching = k;
  m.n_pairs = n;
  m.seed = seed;
  return m;
}

fs::path work_dir() {
  const auto d = fs::temp_directory_path() / "dirgap_acceptance";
  fs::create_directories(d);
  return d;
}

// Desk runs are shared between criteria; each distinct config trains once.
std::map<std::string, RunRecord>& run_cache() {
  static std::map<std::string, RunRecord> c;
  return c;
}

const RunRecord& desk_run(const RunConfig& c) {
  auto& cache = run_cache();
  const auto key = config_hash(c);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  RunOptions opt;
  opt.cache_dir = work_dir() / "cache";
  std::fprintf(stderr, "  training K=%u %s %s %s ...\n", c.mapping.branching, regime_label(c).c_str(),
               std::string(to_string(c.model)).c_str(), std::string(to_string(c.direction)).c_str());
  auto r = run_experiment(c, nullptr, opt);
  std::fprintf(stderr, "    final %.4f excess %.4f (%s) %.0fs %s %s\n", r.final_loss, r.final_excess,
               r.loss_unit.c_str(), r.seconds, r.status.c_str(), r.error.c_str());
  return cache.emplace(key, std::move(r)).first->second;
}

// ---- criteria -----------------------------------------------------------------

Outcome floors() {
  const std::map<std::uint32_t, double> expect{{1, 0.0}, {5, 1.6094379124341003}, {8, 2.0794415416798357}};
  const std::map<std::uint32_t, std::string> table{{5, "1.61"}, {8, "2.08"}};
  bool ok = true;
  std::string d;
  for (const auto& [k, v] : expect) {
    const double fl = floor_nats(I, k);
    ok = ok && std::abs(fl - v) <= 1e-12 && floor_nats(F, k) == 0.0;
    if (table.contains(k)) ok = ok && fmt2(fl) == table.at(k);
    d += fmt("K=%u %.10f  ", k, fl);
  }
  return {ok, d};
}

Outcome oracle() {
  bool ok = true;
  std::string d;
  for (std::uint32_t k : {1u, 5u, 8u}) {
    const auto ps = generate(desk_mapping(k, 1000, 7 + k));
    const auto fwd = tabular_oracle_loss(ps, F).per_sequence;
    const auto inv = tabular_oracle_loss(ps, I).per_sequence;
    const double diff = std::abs(inv - floor_nats(I, k));
    ok = ok && std::abs(fwd) <= 1e-12 && diff <= 1e-9;
    d += fmt("K=%u fwd %.2e inv-floor %.2e  ", k, fwd, diff);
  }
  return {ok, d};
}

Outcome gradients() {
  nn::GradCheckOptions opt;
  opt.tol = 1e-4;
  opt.coords_per_group = 32;
  const auto t = gradcheck_tiny_transformer(opt);
  const auto l = gradcheck_tiny_transformer(opt, true);
  const auto m = gradcheck_tiny_mlp(opt);
  return {t.pass && l.pass && m.pass,
          fmt("transformer %.2e, lora %.2e, mlp %.2e (max rel error)", t.max_rel_error, l.max_rel_error,
              m.max_rel_error)};
}

Outcome topology() {
  Rng rng(0x70b0);
  int configs = 0, injected = 0, caught = 0;
  bool ok = true;
  for (std::uint32_t k : {1u, 2u, 5u, 8u}) {
    for (int i = 0; i < 10; ++i) {
      const auto m = desk_mapping(k, k * (1 + rng.below(600)), rng.next());
      auto ps = generate(m);
      ++configs;
      ok = ok && validate_topology(ps).pass();
      if (ps.pairs.size() < 3) continue;
      std::vector<PairSet> bad(5, ps);
      bad[0].pairs[1].a = bad[0].pairs[0].a;
      for (auto& p : bad[1].pairs)
        if (p.b != bad[1].pairs[0].b) { p.b = bad[1].pairs[0].b; break; }
      if (bad[1].pairs == ps.pairs) bad[1].pairs[0].b = std::string(8, 'z');  // all B equal: K broken by a new B
      bad[2].pairs[2].a[3] = '#';
      bad[3].pairs[0].b.pop_back();
      bad[4].pairs.pop_back();
      for (const auto& b : bad) {
        ++injected;
        caught += !validate_topology(b).pass();
      }
    }
  }
  return {ok && caught == injected, fmt("%d configs valid, %d/%d injected violations caught", configs, caught,
                                        injected)};
}

RunConfig scratch_cfg(std::uint32_t k, Direction d, ModelKind model = ModelKind::Transformer) {
  return make_run_config(desk_mapping(k), d, Regime::scratch(), model);
}

Outcome determinism() {
  const auto c = scratch_cfg(5, F);
  const auto& a = desk_run(c);
  RunOptions opt;
  opt.cache_dir = work_dir() / "cache";
  const auto b = run_experiment(c, nullptr, opt);
  const bool ok = a.ok() && b.ok() && a.loss_curve() == b.loss_curve() && a.final_loss == b.final_loss;
  return {ok, fmt("%zu epochs, final %.17g vs %.17g", a.epochs.size(), a.final_loss, b.final_loss)};
}

Outcome symmetry() {
  const auto& f = desk_run(scratch_cfg(1, F));
  const auto& i = desk_run(scratch_cfg(1, I));
  if (!f.ok() || !i.ok()) return {false, "run failed: " + f.error + i.error};
  const double gap = i.final_excess - f.final_excess;
  const double bound = std::max(0.1, 0.1 * 0.5 * (f.final_excess + i.final_excess));
  return {std::abs(gap) <= bound, fmt("excess fwd %.4f inv %.4f, |gap| %.4f <= %.4f nats/sequence", f.final_excess,
                                      i.final_excess, std::abs(gap), bound)};
}

Outcome gap_trend() {
  const auto& tf = desk_run(scratch_cfg(5, F));
  const auto& ti = desk_run(scratch_cfg(5, I));
  const auto& mf = desk_run(scratch_cfg(5, F, ModelKind::MLP));
  const auto& mi = desk_run(scratch_cfg(5, I, ModelKind::MLP));
  if (!tf.ok() || !ti.ok() || !mf.ok() || !mi.ok()) return {false, "a run failed"};
  const bool same_data = tf.pairset_hash == ti.pairset_hash && tf.pairset_hash == mf.pairset_hash &&
                         tf.pairset_hash == mi.pairset_hash;
  const double gt = ti.final_excess - tf.final_excess;
  const double gm = mi.final_excess - mf.final_excess;
  return {same_data && gt >= 0.2 && gt > gm && gm <= 0.3,
          fmt("transformer gap %.4f (>= 0.2), MLP gap %.4f (<= 0.3)%s", gt, gm, same_data ? "" : " DATA MISMATCH")};
}

Outcome lora_trend() {
  const auto m = desk_mapping(5);
  const auto& ft = desk_run(make_run_config(m, I, Regime::finetune()));
  std::vector<double> ex;
  std::string d;
  for (int r : {8, 64, 256}) {
    const auto& lr = desk_run(make_run_config(m, I, Regime::lora(r)));
    if (!lr.ok()) return {false, "LoRA run failed: " + lr.error};
    ex.push_back(lr.final_excess);
    d += fmt("r=%d %.4f  ", r, lr.final_excess);
  }
  if (!ft.ok()) return {false, "FT run failed: " + ft.error};
  const bool monotone = ex[1] <= ex[0] + 0.05 && ex[2] <= ex[1] + 0.05;
  return {ex[0] > ft.final_excess && monotone, d + fmt("FT %.4f (inverse excess)", ft.final_excess)};
}

Outcome memorization() {
  bool ok = true;
  std::string d;
  for (auto model : {ModelKind::Transformer, ModelKind::MLP}) {
    auto c = make_run_config(desk_mapping(1, 16, 0x16), F, Regime::scratch(), model);
    c.optim.batch_size = 16;
    c.optim.epochs = 2000;  // one step per epoch
    c.optim.base_lr = 1e-3;
    const auto r = run_experiment(c);
    ok = ok && r.ok() && r.final_loss < 0.01;
    d += fmt("%s %.2e %s after %d steps  ", std::string(to_string(model)).c_str(), r.final_loss,
             r.loss_unit.c_str(), c.optim.epochs);
  }
  return {ok, d};
}

Outcome arithmetic() {
  auto row = [](std::uint32_t k, const char* regime, int rank, Direction dir, double observed) {
    ResultRow r;
    r.k = k;
    r.regime = regime;
    r.rank = rank;
    r.direction = dir;
    r.floor = floor_nats(dir, k);
    r.observed = observed;
    r.excess = excess(observed, r.floor);
    return r;
  };
  const double l5 = std::log(5.0), l8 = std::log(8.0);
  const std::vector<ResultRow> rows{
      row(1, "scratch", 0, F, 3.60),  row(1, "scratch", 0, I, 3.60),   row(5, "scratch", 0, F, 0.91),
      row(5, "scratch", 0, I, 2.07 + l5), row(8, "scratch", 0, F, 0.67), row(8, "scratch", 0, I, 1.57 + l8),
      row(1, "mlp", 0, F, 0.484),     row(1, "mlp", 0, I, 0.496),      row(5, "mlp", 0, F, 0.464),
      row(5, "mlp", 0, I, 0.686 + l5), row(8, "mlp", 0, F, 0.42),      row(8, "mlp", 0, I, 0.53 + l8),
      row(1, "ft", 0, F, 3.03),       row(1, "ft", 0, I, 3.04),        row(5, "ft", 0, F, 1.41),
      row(5, "ft", 0, I, 3.08),       row(5, "ft_reg", 0, F, 1.37),    row(5, "ft_reg", 0, I, 3.01),
      row(8, "ft", 0, F, 1.17),       row(8, "ft", 0, I, 3.07),        row(8, "ft_reg", 0, F, 1.14),
      row(8, "ft_reg", 0, I, 2.99),   row(5, "lora", 8, F, 4.97),      row(5, "lora", 8, I, 5.06),
      row(5, "lora", 64, F, 2.03),    row(5, "lora", 64, I, 4.85),     row(5, "lora", 256, F, 1.82),
      row(5, "lora", 256, I, 4.7546), row(8, "lora", 8, F, 4.85),      row(8, "lora", 8, I, 5.06),
      row(8, "lora", 64, F, 1.66),    row(8, "lora", 64, I, 4.85),     row(8, "lora", 256, F, 1.60),
      row(8, "lora", 256, I, 4.75),
  };
  const auto s = aggregate(parse_csv(emit_csv(rows)));
  struct Cell {
    const char* regime;
    std::uint32_t k;
    int rank;
    std::optional<double> value;
    const char* want;
  };
  auto fx = [&](const char* g, std::uint32_t k, int r, Direction dir) -> std::optional<double> {
    const auto* sr = s.find(g, k, r);
    if (!sr) return std::nullopt;
    const auto& c = dir == F ? sr->forward : sr->inverse;
    return c ? std::optional<double>(c->excess) : std::nullopt;
  };
  auto gap = [&](const char* g, std::uint32_t k) {
    const auto* sr = s.find(g, k);
    return sr ? sr->gap() : std::nullopt;
  };
  const std::vector<Cell> cells{
      {"scratch", 1, 0, fx("scratch", 1, 0, F), "3.60"}, {"scratch", 1, 0, fx("scratch", 1, 0, I), "3.60"},
      {"scratch", 1, 0, gap("scratch", 1), "0.00"},       {"scratch", 5, 0, fx("scratch", 5, 0, F), "0.91"},
      {"scratch", 5, 0, fx("scratch", 5, 0, I), "2.07"}, {"scratch", 5, 0, gap("scratch", 5), "1.16"},
      {"scratch", 8, 0, fx("scratch", 8, 0, F), "0.67"}, {"scratch", 8, 0, fx("scratch", 8, 0, I), "1.57"},
      {"scratch", 8, 0, gap("scratch", 8), "0.90"},       {"mlp", 1, 0, fx("mlp", 1, 0, F), "0.48"},
      {"mlp", 1, 0, fx("mlp", 1, 0, I), "0.50"},         {"mlp", 1, 0, gap("mlp", 1), "0.01"},
      {"mlp", 5, 0, fx("mlp", 5, 0, F), "0.46"},         {"mlp", 5, 0, fx("mlp", 5, 0, I), "0.69"},
      {"mlp", 5, 0, gap("mlp", 5), "0.22"},               {"mlp", 8, 0, fx("mlp", 8, 0, F), "0.42"},
      {"mlp", 8, 0, fx("mlp", 8, 0, I), "0.53"},         {"mlp", 8, 0, gap("mlp", 8), "0.11"},
      {"ft", 1, 0, fx("ft", 1, 0, F), "3.03"},           {"ft", 1, 0, fx("ft", 1, 0, I), "3.04"},
      {"ft", 5, 0, fx("ft", 5, 0, F), "1.41"},           {"ft", 5, 0, fx("ft", 5, 0, I), "1.47"},
      {"ft_reg", 5, 0, fx("ft_reg", 5, 0, F), "1.37"},   {"ft_reg", 5, 0, fx("ft_reg", 5, 0, I), "1.40"},
      {"ft", 8, 0, fx("ft", 8, 0, F), "1.17"},           {"ft", 8, 0, fx("ft", 8, 0, I), "0.99"},
      {"ft_reg", 8, 0, fx("ft_reg", 8, 0, F), "1.14"},   {"ft_reg", 8, 0, fx("ft_reg", 8, 0, I), "0.91"},
      {"lora", 5, 8, fx("lora", 5, 8, F), "4.97"},       {"lora", 5, 8, fx("lora", 5, 8, I), "3.45"},
      {"lora", 5, 64, fx("lora", 5, 64, F), "2.03"},     {"lora", 5, 64, fx("lora", 5, 64, I), "3.24"},
      {"lora", 5, 256, fx("lora", 5, 256, F), "1.82"},   {"lora", 5, 256, fx("lora", 5, 256, I), "3.15"},
      {"lora", 8, 8, fx("lora", 8, 8, F), "4.85"},       {"lora", 8, 8, fx("lora", 8, 8, I), "2.98"},
      {"lora", 8, 64, fx("lora", 8, 64, F), "1.66"},     {"lora", 8, 64, fx("lora", 8, 64, I), "2.77"},
      {"lora", 8, 256, fx("lora", 8, 256, F), "1.60"},   {"lora", 8, 256, fx("lora", 8, 256, I), "2.67"},
  };
  int good = 0;
  std::string bad;
  for (const auto& c : cells) {
    if (fmt2(c.value) == c.want)
      ++good;
    else
      bad += fmt(" %s K=%u r=%d got %s want %s;", c.regime, c.k, c.rank, fmt2(c.value).c_str(), c.want);
  }
  const auto t = render_pretrained(s);
  const bool totals = t.find("3.08") != std::string::npos && t.find("2.99") != std::string::npos;
  return {good == static_cast<int>(cells.size()) && totals,
          fmt("%d/%zu cells reproduced", good, cells.size()) + bad};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"floor exactness", floors},
      {"floor attainability oracle", oracle},
      {"gradient fidelity", gradients},
      {"topology invariants", topology},
      {"determinism", determinism},
      {"K=1 directional symmetry", symmetry},
      {"K=5 directional gap trend", gap_trend},
      {"LoRA capacity trend", lora_trend},
      {"memorization sanity", memorization},
      {"arithmetic reproduction", arithmetic},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!only.empty() && !only.contains(n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s  %2d %-28s %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", n, criteria[i].first, o.detail.c_str(),
                secs);
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
