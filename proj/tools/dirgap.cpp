// dirgap: generate mappings, train, run suites and aggregate reports.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "dirgap/checks.hpp"
#include "dirgap/harness.hpp"
#include "dirgap/metrics.hpp"
#include "dirgap/report.hpp"

using namespace dirgap;
namespace fs = std::filesystem;

namespace {

void print_record(const RunRecord& r) {
  const auto& c = r.config;
  std::printf("K=%u %-7s r=%-3d %-11s %-8s loss=%.4f floor=%.4f excess=%.4f (%s) %.1fs %s%s\n",
              c.mapping.branching, regime_label(c).c_str(), c.regime.rank,
              std::string(to_string(c.model)).c_str(), std::string(to_string(c.direction)).c_str(),
              r.final_loss, r.floor, r.final_excess, r.loss_unit.c_str(), r.seconds,
              r.status.c_str(), r.error.empty() ? "" : (": " + r.error).c_str());
  std::fflush(stdout);
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Directional excess-loss experiments on random string mappings"};
  app.require_subcommand(1);

  // gen
  std::uint32_t k = 1;
  std::uint64_t n_pairs = 4000, seed = 0;
  std::string alphabet(kDefaultAlphabet);
  int length = 8;
  std::string out;
  auto* gen = app.add_subcommand("gen", "Write a PairSet file");
  gen->add_option("--k", k, "Branching factor K")->check(CLI::PositiveNumber);
  gen->add_option("--n-pairs", n_pairs, "Number of pairs");
  gen->add_option("--seed", seed, "Mapping seed");
  gen->add_option("--alphabet", alphabet, "Alphabet");
  gen->add_option("--length", length, "String length");
  gen->add_option("--out", out, "Output file")->required();

  // run
  std::string direction = "forward", regime = "scratch", model = "transformer", checkpoint;
  int epochs = 0, rank = 0;
  double lr = 0;
  auto* run = app.add_subcommand("run", "Train one configuration and append its record");
  run->add_option("--k", k, "Branching factor K")->check(CLI::PositiveNumber);
  run->add_option("--n-pairs", n_pairs, "Number of pairs");
  run->add_option("--seed", seed, "Mapping seed");
  run->add_option("--direction", direction, "forward|inverse");
  run->add_option("--regime,--modes", regime, "scratch|ft|ft_reg|lora<r>");
  run->add_option("--rank", rank, "LoRA rank (with --regime lora)");
  run->add_option("--model", model, "transformer|mlp");
  run->add_option("--epochs", epochs, "Override epochs");
  run->add_option("--lr", lr, "Override base learning rate");
  run->add_option("--checkpoint", checkpoint, "Base checkpoint for pretrained regimes");
  run->add_option("--out", out, "Output directory (default $DIRGAP_OUT or runs)");

  // suite
  std::string ks = "1,5,8", modes = "scratch,ft,ft_reg", ranks = "8,64,256", matrix,
              directions = "forward,inverse";
  int surrogate_epochs = 0;
  auto* suite = app.add_subcommand("suite", "Run (or resume) a run matrix");
  suite->add_option("--k", ks, "Comma-separated K values");
  suite->add_option("--modes", modes, "Comma-separated regimes; 'mlp' adds the MLP baseline");
  suite->add_option("--lora-ranks", ranks, "Comma-separated LoRA ranks; empty for none");
  suite->add_option("--directions", directions, "Comma-separated directions");
  suite->add_option("--n-pairs", n_pairs, "Pairs per K");
  suite->add_option("--seed", seed, "Base mapping seed");
  suite->add_option("--epochs", epochs, "Override epochs");
  suite->add_option("--lr", lr, "Override base learning rate");
  suite->add_option("--surrogate-epochs", surrogate_epochs, "Surrogate pretraining epochs");
  suite->add_option("--matrix", matrix, "JSON run-matrix file (overrides the flags above)");
  suite->add_option("--out", out, "Output directory (default $DIRGAP_OUT or runs)");

  // report
  std::string in_dir;
  auto* report = app.add_subcommand("report", "Aggregate records into tables, CSV and SVG");
  report->add_option("dir", in_dir, "Directory holding records.jsonl")->required();
  report->add_option("--out", out, "Output directory (default: the input directory)");

  // oracle
  auto* oracle = app.add_subcommand("oracle", "Check that the entropy floors are attained by a lookup table");
  oracle->add_option("--k", k, "Branching factor K")->check(CLI::PositiveNumber);
  oracle->add_option("--n-pairs", n_pairs, "Number of pairs");
  oracle->add_option("--seed", seed, "Mapping seed");

  // gradcheck
  double tol = 1e-4;
  std::size_t coords = 32;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the tiny models");
  std::string gc_model = "all";
  gc->add_option("--model", gc_model, "transformer|lora|mlp|all");
  gc->add_option("--tol", tol, "Relative error tolerance");
  gc->add_option("--coords", coords, "Coordinates per parameter group");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      MappingConfig m;
      m.spec.alphabet = alphabet;
      m.spec.length = length;
      m.branching = k;
      m.n_pairs = n_pairs;
      m.seed = seed;
      const PairSet ps = generate(m);
      const auto topo = validate_topology(ps);
      save_pairset(ps, out);
      std::printf("%zu pairs, %zu distinct A, %zu distinct B, hash %s -> %s\n", topo.n_pairs,
                  topo.distinct_a, topo.distinct_b, hex64(ps.content_hash()).c_str(), out.c_str());
      return topo.pass() ? 0 : 1;
    }

    if (*run) {
      MappingConfig m;
      m.branching = k;
      m.n_pairs = n_pairs;
      m.seed = seed;
      RunConfig c = make_run_config(m, parse_direction(direction), Regime::parse(regime, rank),
                                    parse_model(model));
      if (epochs > 0) {
        c.optim.epochs = epochs;
        if (c.surrogate) c.surrogate->epochs = epochs;
      }
      if (lr > 0) c.optim.base_lr = c.regime.kind == Regime::Kind::Lora ? lora_lr(lr, c.regime.rank) : lr;
      if (!checkpoint.empty()) {
        c.base_checkpoint = checkpoint;
        c.surrogate.reset();
      }
      const fs::path dir = output_dir(out);
      RunOptions opt;
      opt.cache_dir = dir / "cache";
      opt.on_epoch = [](const EpochLog& e) {
        std::fprintf(stderr, "epoch %3d  loss %.4f  excess %.4f  lr %.3g\n", e.epoch, e.train_loss,
                     e.excess, e.lr);
      };
      const RunRecord r = run_experiment(c, nullptr, opt);
      append_record(r, dir / kRecordsFile);
      print_record(r);
      return r.ok() ? 0 : 1;
    }

    if (*suite) {
      SuiteSpec s;
      if (!matrix.empty()) {
        std::ifstream in(matrix);
        if (!in) throw LoadError("cannot open " + matrix);
        s = suite_from_json(json::parse(in));
      } else {
        s.ks.clear();
        for (const auto& v : split(ks)) s.ks.push_back(static_cast<std::uint32_t>(std::stoul(v)));
        s.regimes.clear();
        for (const auto& v : split(modes)) {
          if (v == "mlp")
            s.include_mlp = true;
          else if (v == "lora")
            continue;  // LoRA runs come from --lora-ranks
          else
            s.regimes.push_back(Regime::parse(v));
        }
        s.lora_ranks.clear();
        for (const auto& v : split(ranks)) s.lora_ranks.push_back(std::stoi(v));
        s.directions.clear();
        for (const auto& v : split(directions)) s.directions.push_back(parse_direction(v));
        s.n_pairs = n_pairs;
        s.mapping_seed = seed;
        if (epochs > 0) s.epochs = epochs;
        if (lr > 0) s.lr = lr;
        if (surrogate_epochs > 0) s.surrogate_epochs = surrogate_epochs;
      }
      const fs::path dir = output_dir(out);
      const auto records = run_suite(s, dir, print_record);
      std::size_t failed = 0;
      for (const auto& r : records) failed += !r.ok();
      std::printf("%zu records in %s (%zu failed)\n", records.size(), (dir / kRecordsFile).c_str(), failed);
      return failed ? 1 : 0;
    }

    if (*report) {
      const fs::path dir = out.empty() ? fs::path(in_dir) : fs::path(out);
      const auto records = read_records(fs::path(in_dir) / kRecordsFile);
      if (records.empty()) throw LoadError("no records in " + (fs::path(in_dir) / kRecordsFile).string());
      fs::create_directories(dir);
      const std::string tables = render_tables(aggregate(records));
      std::ofstream(dir / "tables.txt") << tables;
      std::ofstream(dir / "results.csv") << emit_csv(to_rows(records));
      const auto plots = emit_plots(records, dir);
      std::cout << tables << "\n";
      std::cout << "wrote " << (dir / "tables.txt").string() << ", " << (dir / "results.csv").string();
      for (const auto& f : plots.files) std::cout << ", " << f.string();
      std::cout << "\n";
      for (const auto& n : plots.notes) std::cout << "note: " << n << "\n";
      return 0;
    }

    if (*oracle) {
      MappingConfig m;
      m.branching = k;
      m.n_pairs = n_pairs;
      m.seed = seed;
      const PairSet ps = generate(m);
      bool ok = true;
      for (auto d : {Direction::Forward, Direction::Inverse}) {
        const double fl = floor_nats(d, k);
        const auto o = tabular_oracle_loss(ps, d);
        const double diff = std::abs(o.per_sequence - fl);
        ok = ok && diff <= 1e-9;
        std::printf("%-8s floor %.10f  oracle %.10f nats/sequence (%.10f nats/token)  |diff| %.3g\n",
                    std::string(to_string(d)).c_str(), fl, o.per_sequence, o.per_token, diff);
      }
      std::printf("%s\n", ok ? "floors attained" : "floors NOT attained");
      return ok ? 0 : 1;
    }

    if (*gc) {
      nn::GradCheckOptions opt;
      opt.tol = tol;
      opt.coords_per_group = coords;
      bool ok = true;
      auto show = [&](const char* name, const nn::GradCheckReport& r) {
        std::printf("%-12s max rel error %.3e in %s -> %s\n", name, r.max_rel_error, r.worst_group.c_str(),
                    r.pass ? "pass" : "FAIL");
        ok = ok && r.pass;
      };
      if (gc_model != "transformer" && gc_model != "lora" && gc_model != "mlp" && gc_model != "all")
        throw ConfigError("unknown model '" + gc_model + "' (transformer|lora|mlp|all)");
      if (gc_model == "transformer" || gc_model == "all") show("transformer", gradcheck_tiny_transformer(opt));
      if (gc_model == "lora" || gc_model == "all") show("lora", gradcheck_tiny_transformer(opt, true));
      if (gc_model == "mlp" || gc_model == "all") show("mlp", gradcheck_tiny_mlp(opt));
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
