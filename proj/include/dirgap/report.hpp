#pragma once

// Aggregation of RunRecords into excess/gap tables, CSV export and static
// SVG plots.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "dirgap/errors.hpp"
#include "dirgap/harness.hpp"
#include "dirgap/metrics.hpp"

namespace dirgap {

/// One finished run, flattened. The MLP baseline is carried as regime "mlp".
struct ResultRow {
  std::uint32_t k = 1;
  std::string regime;  // scratch | ft | ft_reg | lora | mlp
  int rank = 0;
  Direction direction = Direction::Forward;
  double floor = 0;
  double observed = 0;
  double excess = 0;
  double seconds = 0;
  std::size_t params_total = 0;
  std::size_t params_trainable = 0;

  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

inline std::string regime_label(const RunConfig& c) {
  return c.model == ModelKind::MLP ? "mlp" : c.regime.name();
}

inline ResultRow to_row(const RunRecord& r) {
  ResultRow row;
  row.k = r.config.mapping.branching;
  row.regime = regime_label(r.config);
  row.rank = r.config.regime.rank;
  row.direction = r.config.direction;
  row.floor = r.floor;
  row.observed = r.final_loss;
  row.excess = r.final_excess;
  row.seconds = r.seconds;
  row.params_total = r.params_total;
  row.params_trainable = r.params_trainable;
  return row;
}

inline std::vector<ResultRow> to_rows(const std::vector<RunRecord>& records) {
  std::vector<ResultRow> out;
  for (const auto& r : records)
    if (r.ok()) out.push_back(to_row(r));
  return out;
}

struct SummaryKey {
  std::string regime;
  int rank = 0;
  std::uint32_t k = 1;

  auto tie() const { return std::tie(regime, rank, k); }
  friend bool operator<(const SummaryKey& a, const SummaryKey& b) { return a.tie() < b.tie(); }
  friend bool operator==(const SummaryKey& a, const SummaryKey& b) { return a.tie() == b.tie(); }
};

struct SummaryCell {
  double floor = 0;
  double observed = 0;
  double excess = 0;

  friend bool operator==(const SummaryCell&, const SummaryCell&) = default;
};

struct SummaryRow {
  SummaryKey key;
  std::optional<SummaryCell> forward;
  std::optional<SummaryCell> inverse;

  std::optional<double> gap() const {
    if (!forward || !inverse) return std::nullopt;
    return directional_gap(inverse->excess, forward->excess);
  }

  friend bool operator==(const SummaryRow&, const SummaryRow&) = default;
};

struct SuiteSummary {
  std::vector<SummaryRow> rows;  // sorted by (regime, rank, K)

  const SummaryRow* find(const std::string& regime, std::uint32_t k, int rank = 0) const {
    for (const auto& r : rows)
      if (r.key == SummaryKey{regime, rank, k}) return &r;
    return nullptr;
  }

  bool has_regime(const std::string& regime) const {
    return std::any_of(rows.begin(), rows.end(), [&](const auto& r) { return r.key.regime == regime; });
  }

  friend bool operator==(const SuiteSummary&, const SuiteSummary&) = default;
};

/// Groups rows by (regime, rank, K); a later row for the same cell wins.
inline SuiteSummary aggregate(const std::vector<ResultRow>& rows) {
  std::map<SummaryKey, SummaryRow> by_key;
  for (const auto& r : rows) {
    SummaryKey key{r.regime, r.rank, r.k};
    auto& row = by_key[key];
    row.key = key;
    SummaryCell cell{r.floor, r.observed, r.excess};
    (r.direction == Direction::Forward ? row.forward : row.inverse) = cell;
  }
  SuiteSummary s;
  for (auto& [key, row] : by_key) s.rows.push_back(std::move(row));
  return s;
}

inline SuiteSummary aggregate(const std::vector<RunRecord>& records) {
  return aggregate(to_rows(records));
}

// ---- text tables -------------------------------------------------------------

inline std::string fmt2(std::optional<double> v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v);
  // Avoid "-0.00" for tiny negative values.
  if (std::string(buf) == "-0.00") return "0.00";
  return buf;
}

namespace detail {

inline std::optional<double> excess_of(const std::optional<SummaryCell>& c) {
  if (!c) return std::nullopt;
  return c->excess;
}

inline std::optional<double> observed_of(const std::optional<SummaryCell>& c) {
  if (!c) return std::nullopt;
  return c->observed;
}

inline std::vector<std::uint32_t> ks_of(const SuiteSummary& s, const std::string& regime) {
  std::vector<std::uint32_t> ks;
  for (const auto& r : s.rows)
    if (r.key.regime == regime && std::find(ks.begin(), ks.end(), r.key.k) == ks.end())
      ks.push_back(r.key.k);
  std::sort(ks.begin(), ks.end());
  return ks;
}

inline std::string pad(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
}

inline std::string pad_right(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

}  // namespace detail

/// Scratch Transformer vs MLP excess and gap per K.
inline std::string render_scratch_vs_mlp(const SuiteSummary& s) {
  std::vector<std::uint32_t> ks = detail::ks_of(s, "scratch");
  for (auto k : detail::ks_of(s, "mlp"))
    if (std::find(ks.begin(), ks.end(), k) == ks.end()) ks.push_back(k);
  std::sort(ks.begin(), ks.end());
  std::ostringstream os;
  os << "Excess loss (nats): Transformer (scratch) vs MLP\n";
  os << detail::pad("K", 3) << " | " << detail::pad("Forward", 8) << detail::pad("Inverse", 9)
     << detail::pad("Gap", 7) << " | " << detail::pad("Forward", 8) << detail::pad("Inverse", 9)
     << detail::pad("Gap", 7) << "\n";
  for (auto k : ks) {
    const auto* t = s.find("scratch", k);
    const auto* m = s.find("mlp", k);
    auto cells = [](const SummaryRow* r) {
      if (!r) return detail::pad("-", 8) + detail::pad("-", 9) + detail::pad("-", 7);
      return detail::pad(fmt2(detail::excess_of(r->forward)), 8) +
             detail::pad(fmt2(detail::excess_of(r->inverse)), 9) + detail::pad(fmt2(r->gap()), 7);
    };
    os << detail::pad(std::to_string(k), 3) << " | " << cells(t) << " | " << cells(m) << "\n";
  }
  return os.str();
}

/// Pretrained regimes: floor, excess and total loss per K and direction.
inline std::string render_pretrained(const SuiteSummary& s) {
  std::ostringstream os;
  os << "Excess loss (nats): pretrained initialization\n";
  os << detail::pad_right("Regime", 8) << detail::pad("K", 3) << "  " << detail::pad_right("Direction", 10)
     << detail::pad("Floor", 7) << detail::pad("Excess", 8) << detail::pad("Total", 8) << "\n";
  for (const std::string regime : {"ft", "ft_reg"}) {
    const std::string label = regime == "ft" ? "FT" : "FT-Reg";
    for (auto k : detail::ks_of(s, regime)) {
      const auto* r = s.find(regime, k);
      for (auto d : {Direction::Forward, Direction::Inverse}) {
        const auto& c = d == Direction::Forward ? r->forward : r->inverse;
        if (!c) continue;
        os << detail::pad_right(label, 8) << detail::pad(std::to_string(k), 3) << "  "
           << detail::pad_right(d == Direction::Forward ? "A->B" : "B->A", 10)
           << detail::pad(fmt2(c->floor), 7) << detail::pad(fmt2(c->excess), 8)
           << detail::pad(fmt2(c->observed), 8) << "\n";
      }
    }
  }
  return os.str();
}

/// LoRA excess and loss per K and rank, both directions.
inline std::string render_lora(const SuiteSummary& s) {
  std::ostringstream os;
  os << "Excess loss (nats): LoRA\n";
  os << detail::pad("K", 3) << detail::pad("Rank", 6) << " | " << detail::pad("Excess", 8)
     << detail::pad("Loss", 7) << " | " << detail::pad("Excess", 8) << detail::pad("Loss", 7) << "\n";
  for (const auto& r : s.rows) {
    if (r.key.regime != "lora") continue;
    os << detail::pad(std::to_string(r.key.k), 3) << detail::pad(std::to_string(r.key.rank), 6)
       << " | " << detail::pad(fmt2(detail::excess_of(r.forward)), 8)
       << detail::pad(fmt2(detail::observed_of(r.forward)), 7) << " | "
       << detail::pad(fmt2(detail::excess_of(r.inverse)), 8)
       << detail::pad(fmt2(detail::observed_of(r.inverse)), 7) << "\n";
  }
  return os.str();
}

/// Every table that has data, separated by blank lines.
inline std::string render_tables(const SuiteSummary& s) {
  std::string out;
  if (s.has_regime("scratch") || s.has_regime("mlp")) out += render_scratch_vs_mlp(s);
  if (s.has_regime("ft") || s.has_regime("ft_reg")) out += (out.empty() ? "" : "\n") + render_pretrained(s);
  if (s.has_regime("lora")) out += (out.empty() ? "" : "\n") + render_lora(s);
  if (out.empty()) out = "no completed runs\n";
  return out;
}

// ---- CSV ---------------------------------------------------------------------

inline constexpr std::string_view kCsvHeader =
    "k,regime,rank,direction,floor,observed,excess,gap,seconds,params_total,params_trainable";

namespace detail {

inline std::string num17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// One line per row. `gap` is the (regime, rank, K) gap, empty when the
/// opposite direction is missing.
inline std::string emit_csv(const std::vector<ResultRow>& rows) {
  const SuiteSummary s = aggregate(rows);
  std::ostringstream os;
  os << kCsvHeader << "\n";
  for (const auto& r : rows) {
    const auto* sr = s.find(r.regime, r.k, r.rank);
    const auto gap = sr ? sr->gap() : std::nullopt;
    os << r.k << ',' << r.regime << ',' << r.rank << ',' << to_string(r.direction) << ','
       << detail::num17(r.floor) << ',' << detail::num17(r.observed) << ','
       << detail::num17(r.excess) << ',' << (gap ? detail::num17(*gap) : "") << ','
       << detail::num17(r.seconds) << ',' << r.params_total << ',' << r.params_trainable << "\n";
  }
  return os.str();
}

inline std::vector<ResultRow> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw LoadError("CSV header mismatch");
  std::vector<ResultRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.push_back("");
    if (f.size() != 11) throw LoadError("CSV line " + std::to_string(lineno) + ": expected 11 fields");
    try {
      ResultRow r;
      r.k = static_cast<std::uint32_t>(std::stoul(f[0]));
      r.regime = f[1];
      r.rank = std::stoi(f[2]);
      r.direction = parse_direction(f[3]);
      r.floor = std::stod(f[4]);
      r.observed = std::stod(f[5]);
      r.excess = std::stod(f[6]);
      r.seconds = std::stod(f[8]);
      r.params_total = std::stoull(f[9]);
      r.params_trainable = std::stoull(f[10]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error& e) {
      throw LoadError("CSV line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

// ---- SVG ---------------------------------------------------------------------

namespace detail {

class Svg {
 public:
  Svg(double w, double h) : w_(w), h_(h) {}

  void line(double x1, double y1, double x2, double y2, const std::string& stroke,
            double width = 1, const std::string& dash = "") {
    os_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
        << "\" stroke=\"" << stroke << "\" stroke-width=\"" << width << "\"";
    if (!dash.empty()) os_ << " stroke-dasharray=\"" << dash << "\"";
    os_ << "/>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    os_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h
        << "\" fill=\"" << fill << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 11,
            const std::string& anchor = "middle") {
    os_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
        << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\">" << escape(s)
        << "</text>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke,
                const std::string& dash = "") {
    os_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1.5\"";
    if (!dash.empty()) os_ << " stroke-dasharray=\"" << dash << "\"";
    os_ << " points=\"";
    for (const auto& [x, y] : pts) os_ << x << ',' << y << ' ';
    os_ << "\"/>\n";
  }
  void circle(double x, double y, double r, const std::string& fill) {
    os_ << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"" << r << "\" fill=\"" << fill << "\"/>\n";
  }

  std::string str() const {
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_
        << "\" viewBox=\"0 0 " << w_ << ' ' << h_ << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << os_.str() << "</svg>\n";
    return out.str();
  }

 private:
  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      if (c == '<') out += "&lt;";
      else if (c == '>') out += "&gt;";
      else if (c == '&') out += "&amp;";
      else out += c;
    }
    return out;
  }

  double w_, h_;
  std::ostringstream os_;
};

// Frame with y-axis ticks; maps data to pixels inside [x0, x1] x [y0, y1].
struct Axes {
  double x0, y0, x1, y1;
  double xmin, xmax, ymin, ymax;

  double px(double x) const { return x0 + (x - xmin) / (xmax - xmin) * (x1 - x0); }
  double py(double y) const { return y1 - (y - ymin) / (ymax - ymin) * (y1 - y0); }

  void draw(Svg& svg, const std::string& title, const std::string& ylabel) const {
    svg.line(x0, y1, x1, y1, "black");
    svg.line(x0, y0, x0, y1, "black");
    svg.text((x0 + x1) / 2, y0 - 8, title, 12);
    svg.text(x0 - 36, (y0 + y1) / 2, ylabel, 10);
    for (int i = 0; i <= 4; ++i) {
      const double v = ymin + (ymax - ymin) * i / 4.0;
      svg.line(x0 - 4, py(v), x0, py(v), "black");
      svg.text(x0 - 6, py(v) + 4, fmt2(v), 9, "end");
    }
  }
};

inline const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

inline void write_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw LoadError("cannot write " + p.string());
  out << s;
}

inline std::pair<double, double> padded_range(double lo, double hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double m = 0.05 * (hi - lo);
  return {lo - m, hi + m};
}

}  // namespace detail

struct PlotOutput {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> notes;  // series or panels that were skipped
};

/// Writes excess_bars.svg, gap_vs_k.svg and loss_curves.svg under `dir`.
inline PlotOutput emit_plots(const std::vector<RunRecord>& records, const std::filesystem::path& dir) {
  PlotOutput out;
  std::filesystem::create_directories(dir);
  const SuiteSummary s = aggregate(records);
  if (s.rows.empty()) {
    out.notes.push_back("no completed runs; nothing plotted");
    return out;
  }

  {  // (a) excess bars per (regime, rank, K), forward and inverse side by side
    const double bw = 14, group = 2 * bw + 18;
    const double w = std::max(320.0, 80 + group * s.rows.size());
    detail::Svg svg(w, 300);
    double ymax = 0, ymin = 0;
    for (const auto& r : s.rows)
      for (const auto& c : {r.forward, r.inverse})
        if (c) {
          ymax = std::max(ymax, c->excess);
          ymin = std::min(ymin, c->excess);
        }
    const auto [lo, hi] = detail::padded_range(ymin, ymax);
    detail::Axes ax{60, 30, w - 20, 230, 0, 1, lo, hi};
    ax.draw(svg, "Excess loss by run", "nats");
    svg.line(ax.x0, ax.py(0), ax.x1, ax.py(0), "#888");
    double x = ax.x0 + 10;
    for (const auto& r : s.rows) {
      int slot = 0;
      for (const auto& c : {r.forward, r.inverse}) {
        if (c) {
          const double top = ax.py(std::max(0.0, c->excess)), bot = ax.py(std::min(0.0, c->excess));
          svg.rect(x + slot * bw, top, bw - 2, bot - top, detail::kPalette[slot]);
          if (slot == 1) svg.text(x + slot * bw + bw / 2, top - 3, "floor " + fmt2(c->floor), 8);
        }
        ++slot;
      }
      std::string label = r.key.regime + (r.key.rank ? std::to_string(r.key.rank) : "");
      svg.text(x + bw, 245, label, 9);
      svg.text(x + bw, 257, "K=" + std::to_string(r.key.k), 9);
      x += group;
    }
    svg.rect(ax.x0, 272, 10, 10, detail::kPalette[0]);
    svg.text(ax.x0 + 14, 281, "forward A->B", 10, "start");
    svg.rect(ax.x0 + 110, 272, 10, 10, detail::kPalette[1]);
    svg.text(ax.x0 + 124, 281, "inverse B->A", 10, "start");
    detail::write_file(dir / "excess_bars.svg", svg.str());
    out.files.push_back(dir / "excess_bars.svg");
  }

  {  // (b) gap vs K, one polyline per (regime, rank)
    std::map<std::pair<std::string, int>, std::vector<std::pair<double, double>>> series;
    double kmax = 1, gmin = 0, gmax = 0;
    for (const auto& r : s.rows) {
      const auto g = r.gap();
      if (!g) {
        out.notes.push_back("gap skipped for " + r.key.regime + " K=" + std::to_string(r.key.k) +
                            ": missing a direction");
        continue;
      }
      series[{r.key.regime, r.key.rank}].push_back({static_cast<double>(r.key.k), *g});
      kmax = std::max(kmax, static_cast<double>(r.key.k));
      gmin = std::min(gmin, *g);
      gmax = std::max(gmax, *g);
    }
    detail::Svg svg(420, 300);
    const auto [lo, hi] = detail::padded_range(gmin, gmax);
    detail::Axes ax{60, 30, 300, 250, 0.5, kmax + 0.5, lo, hi};
    ax.draw(svg, "Directional gap vs K", "nats");
    svg.line(ax.x0, ax.py(0), ax.x1, ax.py(0), "#888", 1, "3,3");
    for (int k = 1; k <= static_cast<int>(kmax); ++k) svg.text(ax.px(k), 265, std::to_string(k), 9);
    svg.text((ax.x0 + ax.x1) / 2, 285, "K", 10);
    int i = 0;
    for (const auto& [key, pts] : series) {
      const std::string color = detail::kPalette[i % 6];
      std::vector<std::pair<double, double>> px;
      for (const auto& [k, g] : pts) {
        px.push_back({ax.px(k), ax.py(g)});
        svg.circle(ax.px(k), ax.py(g), 2.5, color);
      }
      svg.polyline(px, color);
      svg.line(310, 40 + 16 * i, 325, 40 + 16 * i, color, 2);
      svg.text(330, 44 + 16 * i, key.first + (key.second ? " r=" + std::to_string(key.second) : ""), 10,
               "start");
      ++i;
    }
    detail::write_file(dir / "gap_vs_k.svg", svg.str());
    out.files.push_back(dir / "gap_vs_k.svg");
  }

  {  // (c) per-epoch train loss with the floor as reference, one panel per regime
    std::vector<std::string> panels;
    for (const std::string p : {"scratch", "ft", "ft_reg", "lora", "mlp"}) {
      const bool any = std::any_of(records.begin(), records.end(), [&](const RunRecord& r) {
        return r.ok() && regime_label(r.config) == p && !r.epochs.empty();
      });
      if (any)
        panels.push_back(p);
      else
        out.notes.push_back("loss-curve panel '" + p + "' skipped: no runs");
    }
    const double pw = 300, ph = 220;
    detail::Svg svg(pw * std::max<std::size_t>(1, panels.size()) + 20, ph + 60);
    for (std::size_t pi = 0; pi < panels.size(); ++pi) {
      double ymin = 0, ymax = 0;
      int emax = 1;
      for (const auto& r : records) {
        if (!r.ok() || regime_label(r.config) != panels[pi]) continue;
        for (const auto& e : r.epochs) ymax = std::max(ymax, e.train_loss);
        emax = std::max(emax, static_cast<int>(r.epochs.size()));
      }
      const auto [lo, hi] = detail::padded_range(ymin, ymax);
      const double ox = 20 + pi * pw;
      detail::Axes ax{ox + 50, 30, ox + pw - 20, ph, 1, std::max(2.0, static_cast<double>(emax)), lo, hi};
      ax.draw(svg, panels[pi], "loss");
      svg.text((ax.x0 + ax.x1) / 2, ph + 18, "epoch", 10);
      int i = 0;
      for (const auto& r : records) {
        if (!r.ok() || regime_label(r.config) != panels[pi]) continue;
        const std::string color = detail::kPalette[i % 6];
        const std::string dash = r.config.direction == Direction::Inverse ? "5,3" : "";
        std::vector<std::pair<double, double>> pts;
        for (const auto& e : r.epochs) pts.push_back({ax.px(e.epoch), ax.py(e.train_loss)});
        svg.polyline(pts, color, dash);
        if (r.floor > 0) svg.line(ax.x0, ax.py(r.floor), ax.x1, ax.py(r.floor), color, 0.8, "2,2");
        std::string label = "K=" + std::to_string(r.config.mapping.branching) +
                            (r.config.regime.rank ? " r=" + std::to_string(r.config.regime.rank) : "") +
                            (r.config.direction == Direction::Forward ? " fwd" : " inv");
        svg.text(ax.x1 - 2, ax.y0 + 12 + 11 * i, label, 8, "end");
        ++i;
      }
    }
    if (panels.empty()) svg.text(100, 100, "no loss curves", 12);
    detail::write_file(dir / "loss_curves.svg", svg.str());
    out.files.push_back(dir / "loss_curves.svg");
  }
  return out;
}

}  // namespace dirgap
