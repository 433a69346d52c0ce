#pragma once

// Run configuration: typed blocks read from an Ini file, cross-field checks,
// and the resolved snapshot written next to every run's outputs. Unknown keys
// are rejected so a typo never silently falls back to a default.

#include "outlier_lab/corpus_gen.hpp"
#include "outlier_lab/data.hpp"
#include "outlier_lab/ini.hpp"
#include "outlier_lab/metrics.hpp"
#include "outlier_lab/model.hpp"
#include "outlier_lab/quant_model.hpp"
#include "outlier_lab/rng.hpp"
#include "outlier_lab/softmax.hpp"
#include "outlier_lab/trainer.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace olab {

struct DataConfig {
  /// Text files, or the single entry "toy" for the built-in generated corpus.
  std::vector<std::string> corpus{"toy"};
  std::size_t vocab_size = 8192;
  std::size_t seq_len = 0;  // 0: model.max_seq_len
  PackMode pack_mode = PackMode::Concat;
  double val_fraction = 0.02;
  std::size_t toy_documents = 4000;
  std::uint64_t toy_seed = ToyCorpusOptions{}.seed;
};

struct EvalConfig {
  std::vector<std::size_t> lengths;  // empty: the training length only
  std::size_t n_samples = 256;
  bool kurtosis_excess = false;
  OutlierScope outlier_sites = OutlierScope::LayerOutputs;
};

struct SweepConfig {
  std::vector<std::string> methods{"vanilla", "ncs"};
  std::vector<std::size_t> lengths{32};
  double cs_zeta = 1.0;
  double cs_alpha = 3.2;
  double ncs_zeta = 1.0;
  std::optional<double> ncs_beta;  // default: derived from cs_alpha at each cell's length (mlm), 0.9 (clm)
};

struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  std::string out = "runs";
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  QuantScheme quant;
  EvalConfig eval;
  SweepConfig sweep;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t log_every = 100;

  /// The single top-level seed; the trainer draws its data and mask
  /// streams from it.
  void set_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
  }

  std::size_t seq_len() const { return data.seq_len == 0 ? model.max_seq_len : data.seq_len; }
  std::vector<std::size_t> eval_lengths() const {
    return eval.lengths.empty() ? std::vector<std::size_t>{seq_len()} : eval.lengths;
  }
  std::uint64_t init_seed() const { return derive_seed(seed, "init", 0); }
  std::uint64_t calib_seed() const { return derive_seed(seed, "calib", 0); }
  std::uint64_t eval_seed() const { return derive_seed(seed, "eval", 0); }

  /// Checks every block plus the cross-field rules. The model's vocab size
  /// is only known once the corpus is read, so it is checked there.
  void validate() const {
    ModelConfig m = model;
    if (m.vocab_size == 0) m.vocab_size = data.vocab_size;
    m.validate();
    train.validate();
    quant.validate();
    if (name.empty() || name.find('/') != std::string::npos) {
      throw ConfigError("run.name", "must be a non-empty plain file name");
    }
    if (data.corpus.empty()) throw ConfigError("data.corpus", "no corpus given");
    if (data.vocab_size <= static_cast<std::size_t>(Vocab::kNumReserved)) {
      throw ConfigError("data.vocab_size", "must exceed the 5 reserved ids");
    }
    if (seq_len() < 2 || seq_len() > model.max_seq_len) {
      throw ConfigError("data.seq_len", "must be in [2, model.max_seq_len]");
    }
    if (!(data.val_fraction > 0.0 && data.val_fraction < 1.0)) {
      throw ConfigError("data.val_fraction", "must be in (0, 1)");
    }
    for (std::size_t L : eval_lengths()) {
      if (L < 2 || L > model.max_seq_len) {
        throw ConfigError("eval.lengths", "length " + std::to_string(L) +
                                              " outside [2, model.max_seq_len = " +
                                              std::to_string(model.max_seq_len) + "]");
      }
    }
    if (eval.n_samples == 0) throw ConfigError("eval.n_samples", "must be >= 1");
    for (const auto& method : sweep.methods) {
      if (method != "vanilla" && method != "cs" && method != "ncs") {
        throw ConfigError("sweep.methods", "unknown method '" + method + "'");
      }
    }
    for (std::size_t L : sweep.lengths) {
      if (L < 2) throw ConfigError("sweep.lengths", "lengths must be >= 2");
    }
  }

  /// NCS row sum when none is given. Masked LMs take the unclipped CS row
  /// mass zeta + (T - 1) * (-alpha / T) at the pretraining length T; causal
  /// models use 0.9.
  static double default_ncs_beta(Objective objective, double zeta, double alpha, std::size_t T) {
    if (objective == Objective::CausalLM) return 0.9;
    return cs_unclipped_sum(zeta, gamma_from_alpha(alpha, T), T);
  }

  /// The softmax a sweep cell trains with at length L.
  SoftmaxConfig sweep_softmax(const std::string& method, std::size_t L) const {
    const auto dir = model.objective == Objective::CausalLM ? AttentionDirection::Causal
                                                            : AttentionDirection::Bidirectional;
    if (method == "vanilla") return SoftmaxConfig::vanilla(dir);
    if (method == "cs") return SoftmaxConfig::clipped_alpha(sweep.cs_zeta, sweep.cs_alpha, dir);
    if (method == "ncs") {
      const double beta =
          sweep.ncs_beta.value_or(default_ncs_beta(model.objective, sweep.ncs_zeta, sweep.cs_alpha, L));
      return SoftmaxConfig::normalized(sweep.ncs_zeta, beta, dir);
    }
    throw ConfigError("sweep.methods", "unknown method '" + method + "'");
  }

  /// Config of one sweep cell: softmax from `method`, training length L.
  RunConfig sweep_cell(const std::string& method, std::size_t L) const {
    RunConfig c = *this;
    c.name = method + "-T" + std::to_string(L);
    c.model.softmax = sweep_softmax(method, L);
    c.model.max_seq_len = L;
    c.data.seq_len = 0;
    c.eval.lengths.clear();
    return c;
  }

  static RunConfig from_ini(const Ini& ini, const std::filesystem::path& base_dir = {});
  Ini to_ini() const;
};

namespace detail {

template <class E>
E parse_enum(const Ini& ini, const std::string& key, E def, std::initializer_list<std::pair<const char*, E>> names) {
  auto r = ini.raw(key);
  if (!r) return def;
  std::string allowed;
  for (const auto& [n, e] : names) {
    if (*r == n) return e;
    allowed += std::string(allowed.empty() ? "" : ", ") + n;
  }
  throw ConfigError(key, "unknown value '" + *r + "' (expected " + allowed + ")");
}

inline int get_int(const Ini& ini, const std::string& key, int def) {
  auto v = ini.get_uint(key);
  if (!v) return def;
  if (*v > 1024) throw ConfigError(key, "out of range");
  return static_cast<int>(*v);
}

}  // namespace detail

inline RunConfig RunConfig::from_ini(const Ini& ini, const std::filesystem::path& base_dir) {
  RunConfig c;
  c.name = ini.get_string("run.name", c.name);
  c.set_seed(ini.get_uint("run.seed").value_or(c.seed));
  c.out = ini.get_string("run.out", c.out);

  auto& m = c.model;
  m.objective = detail::parse_enum(ini, "model.objective", Objective::MLM,
                                   {{"mlm", Objective::MLM}, {"clm", Objective::CausalLM}});
  m.n_layers = ini.get_size("model.n_layers", m.n_layers);
  m.hidden = ini.get_size("model.hidden", m.hidden);
  m.n_heads = ini.get_size("model.n_heads", m.n_heads);
  m.intermediate = ini.get_size("model.intermediate", m.intermediate);
  m.max_seq_len = ini.get_size("model.max_seq_len", m.max_seq_len);
  m.norm_placement = detail::parse_enum(ini, "model.norm", ModelConfig::default_placement(m.objective),
                                        {{"post", NormPlacement::PostNorm}, {"pre", NormPlacement::PreNorm}});
  m.mlm_prob = ini.get_double("model.mlm_prob", m.mlm_prob);
  m.dropout = ini.get_double("model.dropout", m.dropout);
  m.ln_eps = ini.get_double("model.ln_eps", m.ln_eps);
  m.init_std = ini.get_double("model.init_std", m.init_std);

  auto& s = m.softmax;
  s.variant = detail::parse_enum(ini, "softmax.variant", SoftmaxVariant::Vanilla,
                                 {{"vanilla", SoftmaxVariant::Vanilla},
                                  {"cs", SoftmaxVariant::Clipped},
                                  {"ncs", SoftmaxVariant::NormalizedClipped}});
  s.zeta = ini.get_double("softmax.zeta", 1.0);
  s.gamma = ini.get_double("softmax.gamma");
  s.alpha = ini.get_double("softmax.alpha");
  s.beta = ini.get_double("softmax.beta");
  // ncs without beta: derive it once from alpha (default 3.2) at max_seq_len
  if (s.variant == SoftmaxVariant::NormalizedClipped && !s.beta && !s.gamma) {
    s.beta = default_ncs_beta(m.objective, s.zeta, s.alpha.value_or(3.2), m.max_seq_len);
    s.alpha.reset();
  }
  s.direction = detail::parse_enum(
      ini, "softmax.direction",
      m.objective == Objective::CausalLM ? AttentionDirection::Causal : AttentionDirection::Bidirectional,
      {{"bidirectional", AttentionDirection::Bidirectional}, {"causal", AttentionDirection::Causal}});

  auto& t = c.train;
  t.max_steps = ini.get_size("train.max_steps", t.max_steps);
  t.warmup_steps = ini.get_size("train.warmup_steps", t.warmup_steps);
  t.batch_size = ini.get_size("train.batch_size", t.batch_size);
  t.peak_lr = ini.get_double("train.peak_lr", t.peak_lr);
  t.beta1 = ini.get_double("train.beta1", t.beta1);
  t.beta2 = ini.get_double("train.beta2", t.beta2);
  t.eps = ini.get_double("train.eps", t.eps);
  t.weight_decay = ini.get_double("train.weight_decay", t.weight_decay);
  t.max_grad_norm = ini.get_double("train.max_grad_norm", t.max_grad_norm);
  c.checkpoint_every = ini.get_size("train.checkpoint_every", c.checkpoint_every);
  c.log_every = ini.get_size("train.log_every", c.log_every);

  auto& d = c.data;
  if (ini.has("data.corpus")) {
    d.corpus = ini.list("data.corpus");
    for (auto& p : d.corpus) {
      if (p != "toy" && std::filesystem::path(p).is_relative() && !base_dir.empty()) {
        p = (base_dir / p).lexically_normal().string();
      }
    }
  }
  d.vocab_size = ini.get_size("data.vocab_size", d.vocab_size);
  d.seq_len = ini.get_size("data.seq_len", d.seq_len);
  d.pack_mode = detail::parse_enum(ini, "data.pack_mode", PackMode::Concat,
                                   {{"concat", PackMode::Concat}, {"per_document", PackMode::PerDocument}});
  d.val_fraction = ini.get_double("data.val_fraction", d.val_fraction);
  d.toy_documents = ini.get_size("data.toy_documents", d.toy_documents);
  d.toy_seed = ini.get_uint("data.toy_seed").value_or(d.toy_seed);

  auto& q = c.quant;
  q.weight_bits = detail::get_int(ini, "quant.weight_bits", q.weight_bits);
  q.act_bits = detail::get_int(ini, "quant.act_bits", q.act_bits);
  if (auto e = ini.raw("quant.weight_estimator")) q.weight_estimator = parse_estimator(*e, "quant.weight_estimator");
  if (auto e = ini.raw("quant.act_estimator")) q.act_estimator = parse_estimator(*e, "quant.act_estimator");
  q.momentum = ini.get_double("quant.momentum", q.momentum);
  q.percentile = ini.get_double("quant.percentile", q.percentile);
  q.mse_grid = detail::get_int(ini, "quant.mse_grid", q.mse_grid);
  q.calib_batches = ini.get_size("quant.calib_batches", q.calib_batches);
  q.calib_batch_size = ini.get_size("quant.calib_batch_size", q.calib_batch_size);
  q.quantize_final_norm = ini.get_bool("quant.quantize_final_norm", q.quantize_final_norm);

  auto& e = c.eval;
  e.lengths = ini.get_size_list("eval.lengths").value_or(e.lengths);
  e.n_samples = ini.get_size("eval.n_samples", e.n_samples);
  e.kurtosis_excess = ini.get_bool("eval.kurtosis_excess", e.kurtosis_excess);
  e.outlier_sites = detail::parse_enum(ini, "eval.outlier_sites", OutlierScope::LayerOutputs,
                                       {{"layer_outputs", OutlierScope::LayerOutputs}, {"all", OutlierScope::All}});

  auto& w = c.sweep;
  if (ini.has("sweep.methods")) w.methods = ini.list("sweep.methods");
  w.lengths = ini.get_size_list("sweep.lengths").value_or(w.lengths);
  w.cs_zeta = ini.get_double("sweep.cs_zeta", w.cs_zeta);
  w.cs_alpha = ini.get_double("sweep.cs_alpha", w.cs_alpha);
  w.ncs_zeta = ini.get_double("sweep.ncs_zeta", w.ncs_zeta);
  w.ncs_beta = ini.get_double("sweep.ncs_beta");

  if (auto extra = ini.unused(); !extra.empty()) throw ConfigError(extra.front(), "unknown key");
  c.validate();
  return c;
}

inline Ini RunConfig::to_ini() const {
  Ini ini;
  ini.set("run.name", name);
  ini.set("run.seed", static_cast<std::size_t>(seed));
  ini.set("run.out", out);

  ini.set("model.objective", to_string(model.objective));
  ini.set("model.n_layers", model.n_layers);
  ini.set("model.hidden", model.hidden);
  ini.set("model.n_heads", model.n_heads);
  ini.set("model.intermediate", model.ffn_size());
  ini.set("model.max_seq_len", model.max_seq_len);
  ini.set("model.norm", to_string(model.norm_placement));
  ini.set("model.mlm_prob", model.mlm_prob);
  ini.set("model.dropout", model.dropout);
  ini.set("model.ln_eps", model.ln_eps);
  ini.set("model.init_std", model.init_std);

  const auto& s = model.softmax;
  ini.set("softmax.variant", to_string(s.variant));
  ini.set("softmax.zeta", s.zeta);
  if (s.gamma) ini.set("softmax.gamma", *s.gamma);
  if (s.alpha) ini.set("softmax.alpha", *s.alpha);
  if (s.beta) ini.set("softmax.beta", *s.beta);
  ini.set("softmax.direction", to_string(s.direction));

  ini.set("train.max_steps", train.max_steps);
  ini.set("train.warmup_steps", train.warmup_steps);
  ini.set("train.batch_size", train.batch_size);
  ini.set("train.peak_lr", train.peak_lr);
  ini.set("train.beta1", train.beta1);
  ini.set("train.beta2", train.beta2);
  ini.set("train.eps", train.eps);
  ini.set("train.weight_decay", train.weight_decay);
  ini.set("train.max_grad_norm", train.max_grad_norm);
  ini.set("train.checkpoint_every", checkpoint_every);
  ini.set("train.log_every", log_every);

  std::string corpus;
  for (const auto& p : data.corpus) corpus += (corpus.empty() ? "" : ", ") + p;
  ini.set("data.corpus", corpus);
  ini.set("data.vocab_size", data.vocab_size);
  ini.set("data.seq_len", seq_len());
  ini.set("data.pack_mode", to_string(data.pack_mode));
  ini.set("data.val_fraction", data.val_fraction);
  ini.set("data.toy_documents", data.toy_documents);
  ini.set("data.toy_seed", static_cast<std::size_t>(data.toy_seed));

  ini.set("quant.weight_bits", static_cast<std::size_t>(quant.weight_bits));
  ini.set("quant.act_bits", static_cast<std::size_t>(quant.act_bits));
  ini.set("quant.weight_estimator", to_string(quant.weight_estimator));
  ini.set("quant.act_estimator", to_string(quant.act_estimator));
  ini.set("quant.momentum", quant.momentum);
  ini.set("quant.percentile", quant.percentile);
  ini.set("quant.mse_grid", static_cast<std::size_t>(quant.mse_grid));
  ini.set("quant.calib_batches", quant.calib_batches);
  ini.set("quant.calib_batch_size", quant.calib_batch_size);
  ini.set("quant.quantize_final_norm", quant.quantize_final_norm);

  std::string lengths;
  for (auto L : eval_lengths()) lengths += (lengths.empty() ? "" : ", ") + std::to_string(L);
  ini.set("eval.lengths", lengths);
  ini.set("eval.n_samples", eval.n_samples);
  ini.set("eval.kurtosis_excess", eval.kurtosis_excess);
  ini.set("eval.outlier_sites", to_string(eval.outlier_sites));

  std::string methods;
  for (const auto& m : sweep.methods) methods += (methods.empty() ? "" : ", ") + m;
  ini.set("sweep.methods", methods);
  std::string sl;
  for (auto L : sweep.lengths) sl += (sl.empty() ? "" : ", ") + std::to_string(L);
  ini.set("sweep.lengths", sl);
  ini.set("sweep.cs_zeta", sweep.cs_zeta);
  ini.set("sweep.cs_alpha", sweep.cs_alpha);
  ini.set("sweep.ncs_zeta", sweep.ncs_zeta);
  if (sweep.ncs_beta) ini.set("sweep.ncs_beta", *sweep.ncs_beta);
  return ini;
}

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, std::string_view text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("cannot write " + p.string());
}

inline RunConfig load_run_config(const std::filesystem::path& p) {
  return RunConfig::from_ini(Ini::parse(read_file(p)), p.parent_path());
}

/// Corpus text for `data`: the concatenated files, or the generated toy
/// corpus.
inline std::string load_corpus(const DataConfig& data) {
  if (data.corpus.size() == 1 && data.corpus.front() == "toy") {
    ToyCorpusOptions opt;
    opt.seed = data.toy_seed;
    opt.n_documents = data.toy_documents;
    return generate_toy_corpus(opt);
  }
  std::vector<std::filesystem::path> paths(data.corpus.begin(), data.corpus.end());
  for (const auto& p : paths) {
    if (!std::filesystem::exists(p)) throw IoError("corpus file not found: " + p.string());
  }
  return read_text_files(paths);
}

}  // namespace olab
