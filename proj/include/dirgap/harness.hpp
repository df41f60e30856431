#pragma once

// Experiment orchestration: regime dispatch, seeding, the epoch loop and
// RunRecord logging.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "dirgap/errors.hpp"
#include "dirgap/mapgen.hpp"
#include "dirgap/metrics.hpp"
#include "dirgap/models.hpp"
#include "dirgap/nn/checkpoint.hpp"
#include "dirgap/nn/loss.hpp"
#include "dirgap/optim.hpp"
#include "dirgap/rng.hpp"
#include "dirgap/textcodec.hpp"

namespace dirgap {

using json = nlohmann::ordered_json;

inline constexpr int kRecordSchemaVersion = 1;

enum class ModelKind { Transformer, MLP };

inline std::string_view to_string(ModelKind m) {
  return m == ModelKind::Transformer ? "transformer" : "mlp";
}

inline ModelKind parse_model(std::string_view s) {
  if (s == "transformer" || s == "tf") return ModelKind::Transformer;
  if (s == "mlp") return ModelKind::MLP;
  throw ConfigError("unknown model '" + std::string(s) + "' (transformer|mlp)");
}

struct Regime {
  enum class Kind { Scratch, Finetune, FinetuneReg, Lora };
  Kind kind = Kind::Scratch;
  int rank = 0;  // LoRA only

  static Regime scratch() { return {Kind::Scratch, 0}; }
  static Regime finetune() { return {Kind::Finetune, 0}; }
  static Regime finetune_reg() { return {Kind::FinetuneReg, 0}; }
  static Regime lora(int r) {
    if (r < 1) throw ConfigError("LoRA rank must be >= 1");
    return {Kind::Lora, r};
  }

  bool pretrained() const { return kind != Kind::Scratch; }

  // "scratch", "ft", "ft_reg", "lora"; the rank is carried separately.
  std::string name() const {
    switch (kind) {
      case Kind::Scratch: return "scratch";
      case Kind::Finetune: return "ft";
      case Kind::FinetuneReg: return "ft_reg";
      case Kind::Lora: return "lora";
    }
    return "?";
  }

  // Accepts the names above plus "finetune", "ft-reg", "finetune_reg" and
  // "lora<r>" / "lora:<r>".
  static Regime parse(std::string_view s, int rank = 0) {
    if (s == "scratch") return scratch();
    if (s == "ft" || s == "finetune") return finetune();
    if (s == "ft_reg" || s == "ft-reg" || s == "finetune_reg") return finetune_reg();
    if (s.starts_with("lora")) {
      std::string_view rest = s.substr(4);
      if (rest.starts_with(":")) rest.remove_prefix(1);
      if (!rest.empty()) {
        try {
          rank = std::stoi(std::string(rest));
        } catch (const std::exception&) {
          throw ConfigError("bad LoRA rank in '" + std::string(s) + "'");
        }
      }
      return lora(rank);
    }
    throw ConfigError("unknown regime '" + std::string(s) + "'");
  }

  friend bool operator==(const Regime&, const Regime&) = default;
};

struct SurrogateConfig {
  int epochs = 20;
  std::uint64_t mapping_seed = 0x5eed'0000'0001ULL;

  friend bool operator==(const SurrogateConfig&, const SurrogateConfig&) = default;
};

struct RunConfig {
  MappingConfig mapping;
  Direction direction = Direction::Forward;
  Regime regime;
  ModelKind model = ModelKind::Transformer;
  TransformerConfig transformer;
  MLPConfig mlp;
  OptimConfig optim;
  std::optional<SurrogateConfig> surrogate;
  std::filesystem::path base_checkpoint;  // used instead of surrogate when set
  std::uint64_t run_seed = 0;

  void validate() const {
    mapping.validate();
    optim.validate();
    if (model == ModelKind::Transformer) {
      transformer.validate();
      if (transformer.vocab_size != Vocab(mapping.spec).size())
        throw ConfigError("transformer vocab_size does not match the alphabet's vocabulary");
    } else {
      mlp.validate();
      if (regime.pretrained()) throw ConfigError("the MLP baseline only supports the scratch regime");
      if (mlp.seq_len != mapping.spec.length ||
          mlp.vocab_size != static_cast<int>(mapping.spec.alphabet.size()))
        throw ConfigError("MLP seq_len/vocab_size do not match the string spec");
    }
    if (regime.kind == Regime::Kind::Lora && regime.rank < 1)
      throw ConfigError("LoRA rank must be >= 1");
    if (regime.pretrained() && !surrogate && base_checkpoint.empty())
      throw ConfigError("regime " + regime.name() +
                        " needs a base checkpoint or surrogate pretraining");
    if (surrogate) {
      if (surrogate->epochs < 1) throw ConfigError("surrogate epochs must be >= 1");
      if (surrogate->mapping_seed == mapping.seed)
        throw ConfigError("surrogate mapping must use a different seed from the experiment");
    }
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Default seed policy: one seed per (K, regime, rank). Direction is left out
/// so that forward and inverse runs share init, batch order and dropout masks.
inline std::uint64_t default_run_seed(std::uint32_t k, const Regime& regime,
                                      ModelKind model = ModelKind::Transformer) {
  std::uint64_t h = fnv1a("run");
  h = hash_combine(h, k);
  h = hash_combine(h, fnv1a(regime.name()));
  h = hash_combine(h, static_cast<std::uint64_t>(regime.rank));
  h = hash_combine(h, fnv1a(to_string(model)));
  return h;
}

/// A RunConfig with the desk-scale defaults for the regime filled in.
inline RunConfig make_run_config(const MappingConfig& mapping, Direction d, const Regime& regime,
                                 ModelKind model = ModelKind::Transformer) {
  RunConfig c;
  c.mapping = mapping;
  c.direction = d;
  c.regime = regime;
  c.model = model;
  c.transformer.vocab_size = Vocab(mapping.spec).size();
  c.mlp.seq_len = mapping.spec.length;
  c.mlp.vocab_size = static_cast<int>(mapping.spec.alphabet.size());
  c.optim = model == ModelKind::MLP ? OptimConfig::mlp() : OptimConfig::transformer();
  switch (regime.kind) {
    case Regime::Kind::Scratch:
    case Regime::Kind::Finetune:
      break;
    case Regime::Kind::FinetuneReg:
      c.transformer.attn_dropout = c.transformer.resid_dropout = c.transformer.embd_dropout = 0.1;
      c.optim.weight_decay = OptimConfig::finetune_reg().weight_decay;
      break;
    case Regime::Kind::Lora:
      c.optim.base_lr = lora_lr(c.optim.base_lr, regime.rank);
      break;
  }
  if (regime.pretrained()) {
    SurrogateConfig s;
    s.epochs = c.optim.epochs;
    if (s.mapping_seed == mapping.seed) ++s.mapping_seed;
    c.surrogate = s;
  }
  c.run_seed = default_run_seed(mapping.branching, regime, model);
  return c;
}

// ---- JSON ----------------------------------------------------------------

inline json to_json(const MappingConfig& m) {
  return json{{"alphabet", m.spec.alphabet},
              {"length", m.spec.length},
              {"branching", m.branching},
              {"n_pairs", m.n_pairs},
              {"seed", m.seed}};
}

inline MappingConfig mapping_from_json(const json& j) {
  MappingConfig m;
  m.spec.alphabet = j.at("alphabet").get<std::string>();
  m.spec.length = j.at("length").get<int>();
  m.branching = j.at("branching").get<std::uint32_t>();
  m.n_pairs = j.at("n_pairs").get<std::uint64_t>();
  m.seed = j.at("seed").get<std::uint64_t>();
  return m;
}

inline json to_json(const TransformerConfig& t) {
  return json{{"n_layers", t.n_layers},       {"d_model", t.d_model},
              {"n_heads", t.n_heads},         {"d_ff", t.d_ff},
              {"max_len", t.max_len},         {"vocab_size", t.vocab_size},
              {"attn_dropout", t.attn_dropout}, {"resid_dropout", t.resid_dropout},
              {"embd_dropout", t.embd_dropout}};
}

inline TransformerConfig transformer_from_json(const json& j) {
  TransformerConfig t;
  t.n_layers = j.at("n_layers").get<int>();
  t.d_model = j.at("d_model").get<int>();
  t.n_heads = j.at("n_heads").get<int>();
  t.d_ff = j.at("d_ff").get<int>();
  t.max_len = j.at("max_len").get<int>();
  t.vocab_size = j.at("vocab_size").get<int>();
  t.attn_dropout = j.at("attn_dropout").get<double>();
  t.resid_dropout = j.at("resid_dropout").get<double>();
  t.embd_dropout = j.at("embd_dropout").get<double>();
  return t;
}

inline json to_json(const MLPConfig& m) {
  return json{{"seq_len", m.seq_len},
              {"vocab_size", m.vocab_size},
              {"d_emb", m.d_emb},
              {"n_hidden_layers", m.n_hidden_layers},
              {"d_hidden", m.d_hidden}};
}

inline MLPConfig mlp_from_json(const json& j) {
  MLPConfig m;
  m.seq_len = j.at("seq_len").get<int>();
  m.vocab_size = j.at("vocab_size").get<int>();
  m.d_emb = j.at("d_emb").get<int>();
  m.n_hidden_layers = j.at("n_hidden_layers").get<int>();
  m.d_hidden = j.at("d_hidden").get<int>();
  return m;
}

inline json to_json(const OptimConfig& o) {
  return json{{"base_lr", o.base_lr},     {"weight_decay", o.weight_decay},
              {"beta1", o.beta1},         {"beta2", o.beta2},
              {"eps", o.eps},             {"warmup_frac", o.warmup_frac},
              {"clip_norm", o.clip_norm}, {"epochs", o.epochs},
              {"batch_size", o.batch_size}};
}

inline OptimConfig optim_from_json(const json& j) {
  OptimConfig o;
  o.base_lr = j.at("base_lr").get<double>();
  o.weight_decay = j.at("weight_decay").get<double>();
  o.beta1 = j.at("beta1").get<double>();
  o.beta2 = j.at("beta2").get<double>();
  o.eps = j.at("eps").get<double>();
  o.warmup_frac = j.at("warmup_frac").get<double>();
  o.clip_norm = j.at("clip_norm").get<double>();
  o.epochs = j.at("epochs").get<int>();
  o.batch_size = j.at("batch_size").get<int>();
  return o;
}

inline json to_json(const RunConfig& c) {
  json j;
  j["mapping"] = to_json(c.mapping);
  j["direction"] = std::string(to_string(c.direction));
  j["regime"] = c.regime.name();
  j["rank"] = c.regime.rank;
  j["model"] = std::string(to_string(c.model));
  if (c.model == ModelKind::Transformer)
    j["transformer"] = to_json(c.transformer);
  else
    j["mlp"] = to_json(c.mlp);
  j["optim"] = to_json(c.optim);
  if (c.surrogate)
    j["surrogate"] = json{{"epochs", c.surrogate->epochs}, {"mapping_seed", c.surrogate->mapping_seed}};
  else
    j["surrogate"] = nullptr;
  j["base_checkpoint"] = c.base_checkpoint.string();
  j["run_seed"] = c.run_seed;
  return j;
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  c.mapping = mapping_from_json(j.at("mapping"));
  c.direction = parse_direction(j.at("direction").get<std::string>());
  c.regime = Regime::parse(j.at("regime").get<std::string>(), j.value("rank", 0));
  c.model = parse_model(j.at("model").get<std::string>());
  c.transformer.vocab_size = Vocab(c.mapping.spec).size();
  c.mlp.seq_len = c.mapping.spec.length;
  c.mlp.vocab_size = static_cast<int>(c.mapping.spec.alphabet.size());
  if (j.contains("transformer")) c.transformer = transformer_from_json(j.at("transformer"));
  if (j.contains("mlp")) c.mlp = mlp_from_json(j.at("mlp"));
  c.optim = optim_from_json(j.at("optim"));
  if (j.contains("surrogate") && !j.at("surrogate").is_null()) {
    SurrogateConfig s;
    s.epochs = j.at("surrogate").at("epochs").get<int>();
    s.mapping_seed = j.at("surrogate").at("mapping_seed").get<std::uint64_t>();
    c.surrogate = s;
  }
  c.base_checkpoint = j.value("base_checkpoint", std::string());
  c.run_seed = j.at("run_seed").get<std::uint64_t>();
  return c;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

/// Stable identity of a config, used to resume suites.
inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

// ---- records ---------------------------------------------------------------

struct EpochLog {
  int epoch = 0;           // 1-based
  double train_loss = 0;   // mean over the epoch's batches, reporting unit
  double excess = 0;
  double lr = 0;           // lr of the epoch's last step

  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

struct RunRecord {
  RunConfig config;
  std::string config_hash;
  std::string pairset_hash;
  std::string loss_unit;  // "nats/sequence" or "nats/position"
  std::vector<EpochLog> epochs;
  double floor = 0;
  double final_loss = 0;  // evaluation pass on the training set, dropout off
  double final_excess = 0;
  double final_loss_per_token = 0;
  double best_epoch_loss = 0;
  double seconds = 0;
  std::size_t params_total = 0;
  std::size_t params_trainable = 0;
  std::vector<std::string> notes;
  std::string status = "ok";  // "ok" or "error"
  std::string error;

  bool ok() const { return status == "ok"; }
  std::vector<double> loss_curve() const {
    std::vector<double> out;
    for (const auto& e : epochs) out.push_back(e.train_loss);
    return out;
  }
};

inline json to_json(const RunRecord& r) {
  json j;
  j["schema_version"] = kRecordSchemaVersion;
  j["config_hash"] = r.config_hash;
  j["config"] = to_json(r.config);
  j["pairset_hash"] = r.pairset_hash;
  j["status"] = r.status;
  j["error"] = r.error;
  j["loss_unit"] = r.loss_unit;
  j["floor"] = r.floor;
  j["final_loss"] = r.final_loss;
  j["final_excess"] = r.final_excess;
  j["final_loss_per_token"] = r.final_loss_per_token;
  j["best_epoch_loss"] = r.best_epoch_loss;
  j["seconds"] = r.seconds;
  j["params_total"] = r.params_total;
  j["params_trainable"] = r.params_trainable;
  json ep = json::array();
  for (const auto& e : r.epochs)
    ep.push_back(json{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"excess", e.excess}, {"lr", e.lr}});
  j["epochs"] = std::move(ep);
  j["notes"] = r.notes;
  return j;
}

inline RunRecord record_from_json(const json& j) {
  if (j.value("schema_version", 0) != kRecordSchemaVersion)
    throw LoadError("unsupported record schema_version");
  RunRecord r;
  r.config = run_config_from_json(j.at("config"));
  r.config_hash = j.at("config_hash").get<std::string>();
  r.pairset_hash = j.at("pairset_hash").get<std::string>();
  r.status = j.at("status").get<std::string>();
  r.error = j.value("error", std::string());
  r.loss_unit = j.at("loss_unit").get<std::string>();
  r.floor = j.at("floor").get<double>();
  r.final_loss = j.at("final_loss").get<double>();
  r.final_excess = j.at("final_excess").get<double>();
  r.final_loss_per_token = j.at("final_loss_per_token").get<double>();
  r.best_epoch_loss = j.at("best_epoch_loss").get<double>();
  r.seconds = j.at("seconds").get<double>();
  r.params_total = j.at("params_total").get<std::size_t>();
  r.params_trainable = j.at("params_trainable").get<std::size_t>();
  for (const auto& e : j.at("epochs"))
    r.epochs.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(),
                        e.at("excess").get<double>(), e.at("lr").get<double>()});
  r.notes = j.at("notes").get<std::vector<std::string>>();
  return r;
}

inline void append_record(const RunRecord& r, const std::filesystem::path& jsonl) {
  if (jsonl.has_parent_path()) std::filesystem::create_directories(jsonl.parent_path());
  std::ofstream out(jsonl, std::ios::app);
  if (!out) throw LoadError("cannot open " + jsonl.string() + " for appending");
  out << to_json(r).dump() << '\n';
}

/// Reads every record in a JSON Lines file; a missing file yields none.
inline std::vector<RunRecord> read_records(const std::filesystem::path& jsonl) {
  std::vector<RunRecord> out;
  std::ifstream in(jsonl);
  if (!in) return out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw LoadError(jsonl.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- training ----------------------------------------------------------------

struct RunOptions {
  // Directory for cached surrogate checkpoints; empty disables caching.
  std::filesystem::path cache_dir;
  // Called after every epoch.
  std::function<void(const EpochLog&)> on_epoch;
};

namespace detail {

// Transformer losses are reported per sequence (per-token mean times the
// target length) so the ln K floor applies directly; MLP losses are the mean
// over its L independent position predictions.
inline double report_scale(const RunConfig& c) {
  return c.model == ModelKind::Transformer ? static_cast<double>(c.mapping.spec.length) : 1.0;
}

inline std::string loss_unit(const RunConfig& c) {
  return c.model == ModelKind::Transformer ? "nats/sequence" : "nats/position";
}

class Trainer {
 public:
  Trainer(const RunConfig& cfg, const PairSet& ps, ParameterStore<float> params,
          std::optional<LoraConfig> lora)
      : cfg_(cfg), params_(std::move(params)), lora_(std::move(lora)) {
    const std::size_t n = ps.pairs.size();
    if (cfg.model == ModelKind::Transformer) {
      Vocab vocab(cfg.mapping.spec);
      instances_.reserve(n);
      for (const auto& p : ps.pairs)
        instances_.push_back(encode_example(p, cfg.direction, vocab, cfg.transformer.max_len));
    } else {
      for (const auto& p : ps.pairs) {
        const auto [src, tgt] = oriented(p, cfg.direction);
        auto s = alphabet_ids(src, cfg.mapping.spec);
        auto t = alphabet_ids(tgt, cfg.mapping.spec);
        src_.insert(src_.end(), s.begin(), s.end());
        tgt_.insert(tgt_.end(), t.begin(), t.end());
      }
    }
    n_ = n;
  }

  ParameterStore<float>& params() { return params_; }

  // Mean per-token (transformer) or per-position (MLP) loss of one batch.
  double step(std::span<const std::size_t> idx, bool train, Rng* rng) {
    nn::Tape<float> tape(train);
    ForwardResult r;
    if (cfg_.model == ModelKind::Transformer) {
      batch_.clear();
      for (auto i : idx) batch_.push_back(instances_[i]);
      r = transformer_forward(tape, params_, cfg_.transformer, batch_, train, rng,
                              lora_ ? &*lora_ : nullptr);
    } else {
      const auto L = static_cast<std::size_t>(cfg_.mlp.seq_len);
      bsrc_.clear();
      btgt_.clear();
      for (auto i : idx) {
        bsrc_.insert(bsrc_.end(), src_.begin() + i * L, src_.begin() + (i + 1) * L);
        btgt_.insert(btgt_.end(), tgt_.begin() + i * L, tgt_.begin() + (i + 1) * L);
      }
      r = mlp_forward(tape, params_, cfg_.mlp, bsrc_, btgt_);
    }
    if (train) tape.backward(r.loss);
    return r.stats.loss;
  }

  // Loss over the whole set with dropout off, weighted by batch size.
  double evaluate(std::size_t batch) {
    std::vector<std::size_t> idx;
    double sum = 0;
    for (std::size_t start = 0; start < n_; start += batch) {
      idx.clear();
      for (std::size_t i = start; i < std::min(n_, start + batch); ++i) idx.push_back(i);
      sum += step(idx, false, nullptr) * static_cast<double>(idx.size());
    }
    return sum / static_cast<double>(n_);
  }

  std::size_t size() const { return n_; }

 private:
  RunConfig cfg_;
  ParameterStore<float> params_;
  std::optional<LoraConfig> lora_;
  std::size_t n_ = 0;
  std::vector<TaskInstance> instances_, batch_;
  std::vector<std::int32_t> src_, tgt_, bsrc_, btgt_;
};

// Runs the fixed-budget loop and fills the epoch logs of `rec`.
inline void train_loop(Trainer& tr, const RunConfig& cfg, RunRecord& rec, const RunOptions& opt) {
  const std::size_t n = tr.size();
  const auto bs = static_cast<std::size_t>(cfg.optim.batch_size);
  const long steps_per_epoch = static_cast<long>((n + bs - 1) / bs);
  const long total = steps_per_epoch * cfg.optim.epochs;
  AdamW<float> adam(cfg.optim);
  Rng drop_rng(hash_combine(cfg.run_seed, fnv1a("dropout")));
  std::vector<std::size_t> order(n), idx;
  const double scale = report_scale(cfg);
  long global = 0;
  for (int epoch = 1; epoch <= cfg.optim.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(hash_combine(cfg.run_seed, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    double sum = 0;
    double lr = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      idx.assign(order.begin() + static_cast<long>(start),
                 order.begin() + static_cast<long>(std::min(n, start + bs)));
      tr.params().zero_grad();
      const double loss = tr.step(idx, true, &drop_rng);
      nn::clip_global_norm(tr.params(), cfg.optim.clip_norm);
      lr = lr_at(global, total, cfg.optim);
      adam.step(tr.params(), lr);
      ++global;
      sum += loss * static_cast<double>(idx.size());
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = sum / static_cast<double>(n) * scale;
    log.excess = excess(log.train_loss, rec.floor);
    log.lr = lr;
    rec.epochs.push_back(log);
    if (opt.on_epoch) opt.on_epoch(log);
  }
}

inline std::size_t count_a_overlap(const PairSet& x, const PairSet& y) {
  std::unordered_set<std::string> as;
  for (const auto& p : x.pairs) as.insert(p.a);
  std::size_t n = 0;
  for (const auto& p : y.pairs) n += as.count(p.a);
  return n;
}

}  // namespace detail

struct SurrogateResult {
  std::filesystem::path checkpoint;
  std::size_t a_overlap = 0;  // A-strings shared with the experiment mapping
  double final_loss = 0;      // per sequence
  bool cached = false;
};

/// Trains a scratch Transformer on a disjoint K=1 mapping and saves it as the
/// initialization for the pretrained regimes.
inline SurrogateResult surrogate_pretrain(const TransformerConfig& model, const MappingConfig& experiment,
                                          const SurrogateConfig& sc,
                                          const std::filesystem::path& out_path,
                                          const RunOptions& opt = {}) {
  MappingConfig pm = experiment;
  pm.branching = 1;
  pm.seed = sc.mapping_seed;
  if (pm.seed == experiment.seed)
    throw ConfigError("surrogate mapping must use a different seed from the experiment");
  RunConfig c = make_run_config(pm, Direction::Forward, Regime::scratch());
  c.transformer = model;
  c.transformer.attn_dropout = c.transformer.resid_dropout = c.transformer.embd_dropout = 0.0;
  c.optim.epochs = sc.epochs;
  c.run_seed = hash_combine(default_run_seed(1, Regime::scratch()), fnv1a("surrogate"));

  const PairSet pre = generate(pm);
  const PairSet exp = generate(experiment);
  SurrogateResult res;
  res.checkpoint = out_path;
  res.a_overlap = detail::count_a_overlap(pre, exp);
  if (std::filesystem::exists(out_path)) {
    res.cached = true;
    return res;
  }
  RunRecord rec;
  rec.floor = 0.0;
  detail::Trainer tr(c, pre, transformer_init<float>(c.transformer, hash_combine(c.run_seed, fnv1a("init"))),
                     std::nullopt);
  detail::train_loop(tr, c, rec, opt);
  res.final_loss = tr.evaluate(256) * detail::report_scale(c);
  if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
  // Write under a temporary name so an interrupted save is never picked up.
  auto tmp = out_path;
  tmp += ".tmp";
  nn::save_checkpoint(tr.params(), tmp);
  std::filesystem::rename(tmp, out_path);
  std::filesystem::rename(nn::manifest_path(tmp), nn::manifest_path(out_path));
  return res;
}

inline std::filesystem::path surrogate_cache_path(const RunConfig& c, const std::filesystem::path& dir) {
  json key{{"transformer", to_json(c.transformer)}, {"mapping", to_json(c.mapping)},
           {"epochs", c.surrogate->epochs}, {"mapping_seed", c.surrogate->mapping_seed}};
  key["transformer"]["attn_dropout"] = key["transformer"]["resid_dropout"] =
      key["transformer"]["embd_dropout"] = 0.0;
  return dir / ("surrogate-" + hex64(fnv1a(key.dump())) + ".ckpt");
}

/// Runs one configuration on `ps` (generated from cfg.mapping when null).
/// Errors abort the run and are returned in the record with the config echoed.
inline RunRecord run_experiment(const RunConfig& cfg, const PairSet* ps = nullptr,
                                const RunOptions& opt = {}) {
  RunRecord rec;
  rec.config = cfg;
  rec.config_hash = config_hash(cfg);
  rec.loss_unit = detail::loss_unit(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    cfg.validate();
    std::optional<PairSet> owned;
    if (!ps) {
      owned = generate(cfg.mapping);
      ps = &*owned;
    } else if (!(ps->config == cfg.mapping)) {
      throw ConfigError("PairSet was generated from a different mapping config");
    }
    rec.pairset_hash = hex64(ps->content_hash());
    rec.floor = floor_nats(cfg.direction, cfg.mapping.branching);

    const std::uint64_t init_seed = hash_combine(cfg.run_seed, fnv1a("init"));
    ParameterStore<float> params;
    std::optional<LoraConfig> lora;
    if (cfg.model == ModelKind::MLP) {
      params = mlp_init<float>(cfg.mlp, init_seed);
    } else if (!cfg.regime.pretrained()) {
      params = transformer_init<float>(cfg.transformer, init_seed);
    } else {
      std::filesystem::path ckpt = cfg.base_checkpoint;
      if (ckpt.empty()) {
        const auto dir = opt.cache_dir.empty()
                             ? std::filesystem::temp_directory_path() / "dirgap-cache"
                             : opt.cache_dir;
        ckpt = surrogate_cache_path(cfg, dir);
        const auto sr = surrogate_pretrain(cfg.transformer, cfg.mapping, *cfg.surrogate, ckpt);
        rec.notes.push_back("initialization: surrogate pretraining on a disjoint K=1 mapping (seed " +
                            std::to_string(cfg.surrogate->mapping_seed) + ", " +
                            std::to_string(cfg.surrogate->epochs) +
                            " epochs), standing in for pretrained GPT-2 weights");
        rec.notes.push_back("surrogate A-overlap with experiment mapping: " +
                            std::to_string(sr.a_overlap));
        if (sr.a_overlap > 0)
          rec.notes.push_back("warning: surrogate mapping shares " + std::to_string(sr.a_overlap) +
                              " A-strings with the experiment mapping");
      } else {
        rec.notes.push_back("initialization: checkpoint " + ckpt.string());
      }
      params = transformer_init<float>(cfg.transformer, init_seed, Init::FromCheckpoint, ckpt);
      if (cfg.regime.kind == Regime::Kind::Lora) {
        lora = LoraConfig::with_rank(cfg.regime.rank);
        params = lora_wrap(params, cfg.transformer, *lora, hash_combine(cfg.run_seed, fnv1a("lora")));
      }
    }
    rec.params_total = params.count_total();
    rec.params_trainable = params.count_trainable();

    detail::Trainer tr(cfg, *ps, std::move(params), lora);
    detail::train_loop(tr, cfg, rec, opt);
    const double per_unit = tr.evaluate(256);
    rec.final_loss_per_token = per_unit;
    rec.final_loss = per_unit * detail::report_scale(cfg);
    rec.final_excess = excess(rec.final_loss, rec.floor);
    rec.best_epoch_loss = rec.epochs.front().train_loss;
    for (const auto& e : rec.epochs) rec.best_epoch_loss = std::min(rec.best_epoch_loss, e.train_loss);
  } catch (const std::exception& e) {
    rec.status = "error";
    rec.error = e.what();
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

// ---- suites ------------------------------------------------------------------

struct SuiteSpec {
  std::vector<std::uint32_t> ks{1, 5, 8};
  std::vector<Regime> regimes{Regime::scratch(), Regime::finetune(), Regime::finetune_reg()};
  std::vector<int> lora_ranks{8, 64, 256};
  bool include_mlp = false;
  std::vector<Direction> directions{Direction::Forward, Direction::Inverse};
  std::uint64_t n_pairs = 4000;
  std::uint64_t mapping_seed = 0;  // combined with K per PairSet
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<int> surrogate_epochs;
};

inline MappingConfig suite_mapping(const SuiteSpec& s, std::uint32_t k) {
  MappingConfig m;
  m.branching = k;
  m.n_pairs = s.n_pairs;
  m.seed = hash_combine(s.mapping_seed, k);
  return m;
}

/// The run matrix in execution order. LoRA runs are generated only for K > 1.
inline std::vector<RunConfig> suite_configs(const SuiteSpec& s) {
  std::vector<RunConfig> out;
  auto push = [&](const MappingConfig& m, const Regime& r, ModelKind model) {
    for (auto d : s.directions) {
      RunConfig c = make_run_config(m, d, r, model);
      if (s.epochs) c.optim.epochs = *s.epochs;
      if (s.lr) c.optim.base_lr = r.kind == Regime::Kind::Lora ? lora_lr(*s.lr, r.rank) : *s.lr;
      if (c.surrogate) c.surrogate->epochs = s.surrogate_epochs.value_or(c.optim.epochs);
      out.push_back(std::move(c));
    }
  };
  for (auto k : s.ks) {
    const MappingConfig m = suite_mapping(s, k);
    for (const auto& r : s.regimes) push(m, r, ModelKind::Transformer);
    if (k > 1)
      for (int rank : s.lora_ranks) push(m, Regime::lora(rank), ModelKind::Transformer);
    if (s.include_mlp) push(m, Regime::scratch(), ModelKind::MLP);
  }
  return out;
}

/// Parses a run-matrix file:
/// {"k": [1,5,8], "modes": ["scratch","ft","ft_reg","mlp"], "lora_ranks": [8,64,256],
///  "directions": ["forward","inverse"], "n_pairs": 4000, "seed": 0,
///  "epochs": 20, "lr": 1e-4, "surrogate_epochs": 20}
/// Every key is optional.
inline SuiteSpec suite_from_json(const json& j) {
  SuiteSpec s;
  if (j.contains("k")) s.ks = j.at("k").get<std::vector<std::uint32_t>>();
  if (j.contains("modes")) {
    s.regimes.clear();
    for (const auto& m : j.at("modes").get<std::vector<std::string>>()) {
      if (m == "mlp")
        s.include_mlp = true;
      else
        s.regimes.push_back(Regime::parse(m));
    }
  }
  if (j.contains("lora_ranks")) s.lora_ranks = j.at("lora_ranks").get<std::vector<int>>();
  if (j.contains("directions")) {
    s.directions.clear();
    for (const auto& d : j.at("directions").get<std::vector<std::string>>())
      s.directions.push_back(parse_direction(d));
  }
  if (j.contains("n_pairs")) s.n_pairs = j.at("n_pairs").get<std::uint64_t>();
  if (j.contains("seed")) s.mapping_seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("epochs")) s.epochs = j.at("epochs").get<int>();
  if (j.contains("lr")) s.lr = j.at("lr").get<double>();
  if (j.contains("surrogate_epochs")) s.surrogate_epochs = j.at("surrogate_epochs").get<int>();
  return s;
}

/// Output directory: `explicit_dir` if set, else $DIRGAP_OUT, else "runs".
inline std::filesystem::path output_dir(const std::filesystem::path& explicit_dir = {}) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (const char* env = std::getenv("DIRGAP_OUT"); env && *env) return env;
  return "runs";
}

inline constexpr std::string_view kRecordsFile = "records.jsonl";

/// Executes the suite's run matrix, appending to <out>/records.jsonl. Configs
/// with a completed record are skipped; failures are recorded and the suite
/// continues. Returns the records for the matrix in matrix order.
inline std::vector<RunRecord> run_suite(const SuiteSpec& s, const std::filesystem::path& out,
                                        const std::function<void(const RunRecord&)>& on_record = {}) {
  std::filesystem::create_directories(out);
  const auto path = out / kRecordsFile;
  std::map<std::string, RunRecord> done;
  for (auto& r : read_records(path))
    if (r.ok()) done[r.config_hash] = std::move(r);

  RunOptions opt;
  opt.cache_dir = out / "cache";
  std::map<std::uint32_t, PairSet> pairsets;
  std::vector<RunRecord> results;
  for (const auto& c : suite_configs(s)) {
    const std::string h = config_hash(c);
    if (auto it = done.find(h); it != done.end()) {
      results.push_back(it->second);
      continue;
    }
    auto [it, fresh] = pairsets.try_emplace(c.mapping.branching);
    if (fresh) {
      it->second = generate(c.mapping);
      save_pairset(it->second, out / ("pairs_k" + std::to_string(c.mapping.branching) + ".tsv"));
    }
    RunRecord r = run_experiment(c, &it->second, opt);
    append_record(r, path);
    if (on_record) on_record(r);
    if (r.ok()) done[h] = r;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace dirgap
