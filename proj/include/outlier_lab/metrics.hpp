#pragma once

// Quality and outlier diagnostics.
//
// Evaluation masking is keyed on sequence content (derive_seed(eval_seed,
// "eval-mask", hash(ids))), so a sequence is masked the same way wherever it
// sits in the dataset. Reordering the dataset only reorders the sum.

#include "outlier_lab/data.hpp"
#include "outlier_lab/model.hpp"
#include "outlier_lab/quant_model.hpp"
#include "outlier_lab/rng.hpp"
#include "outlier_lab/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace olab {

struct KurtosisResult {
  double value = std::numeric_limits<double>::quiet_NaN();
  bool zero_variance = false;
};

/// Pearson kurtosis m4 / m2^2 (central moments, no bias correction).
/// Constant input is flagged instead of producing a value.
inline KurtosisResult kurtosis(std::span<const double> x, bool excess = false) {
  if (x.size() < 2) throw std::invalid_argument("kurtosis needs at least 2 values");
  KurtosisResult r;
  if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); })) {
    r.zero_variance = true;
    return r;
  }
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double m2 = 0.0;
  double m4 = 0.0;
  for (double v : x) {
    const double d = (v - mean) * (v - mean);
    m2 += d;
    m4 += d * d;
  }
  m2 /= static_cast<double>(x.size());
  m4 /= static_cast<double>(x.size());
  if (m2 == 0.0) {
    r.zero_variance = true;
    return r;
  }
  r.value = m4 / (m2 * m2) - (excess ? 3.0 : 0.0);
  return r;
}

inline double inf_norm(std::span<const double> x) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  return m;
}

/// LayerOutputs: the hidden state each transformer layer hands to the next
/// (after ln2 for PostNorm, the second residual sum for PreNorm). All: every
/// activation site, including attention scores and probabilities.
enum class OutlierScope { LayerOutputs, All };

inline std::string to_string(OutlierScope s) { return s == OutlierScope::All ? "all" : "layer_outputs"; }

struct SiteOutliers {
  std::string site;
  double max_inf_norm = 0.0;
  double avg_kurtosis = std::numeric_limits<double>::quiet_NaN();
  double max_kurtosis = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_kurtosis = 0;
  std::size_t n_zero_variance = 0;
};

struct OutlierReport {
  double max_inf_norm = 0.0;
  std::string max_inf_norm_site;
  /// Unweighted mean over (site, sample) pairs with nonzero variance.
  double avg_kurtosis = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_samples = 0;
  std::size_t n_excluded = 0;
  bool kurtosis_excess = false;
  OutlierScope scope = OutlierScope::LayerOutputs;
  std::vector<SiteOutliers> per_site;
};

/// Folds per-sample activations into an OutlierReport. Sites keep the order
/// in which they are first seen.
class OutlierAccumulator {
 public:
  explicit OutlierAccumulator(bool excess = false) : excess_(excess) {}

  void add(const std::string& site, std::span<const double> sample) {
    auto [it, fresh] = index_.try_emplace(site, sites_.size());
    if (fresh) sites_.push_back({site, 0.0, 0.0, 0.0, 0, 0});
    auto& s = sites_[it->second];
    s.inf = std::max(s.inf, inf_norm(sample));
    const KurtosisResult k = kurtosis(sample, excess_);
    if (k.zero_variance) {
      ++s.zero_var;
    } else {
      s.k_sum += k.value;
      s.k_max = s.n_k == 0 ? k.value : std::max(s.k_max, k.value);
      ++s.n_k;
    }
  }

  OutlierReport report(std::size_t n_samples) const {
    OutlierReport r;
    r.n_samples = n_samples;
    r.kurtosis_excess = excess_;
    double k_sum = 0.0;
    std::size_t n_k = 0;
    for (const auto& s : sites_) {
      SiteOutliers o;
      o.site = s.name;
      o.max_inf_norm = s.inf;
      o.n_kurtosis = s.n_k;
      o.n_zero_variance = s.zero_var;
      if (s.n_k > 0) {
        o.avg_kurtosis = s.k_sum / static_cast<double>(s.n_k);
        o.max_kurtosis = s.k_max;
      }
      if (r.max_inf_norm_site.empty() || s.inf > r.max_inf_norm) {
        r.max_inf_norm = s.inf;
        r.max_inf_norm_site = s.name;
      }
      k_sum += s.k_sum;
      n_k += s.n_k;
      r.n_excluded += s.zero_var;
      r.per_site.push_back(std::move(o));
    }
    if (n_k > 0) r.avg_kurtosis = k_sum / static_cast<double>(n_k);
    return r;
  }

 private:
  struct Acc {
    std::string name;
    double inf;
    double k_sum;
    double k_max;
    std::size_t n_k;
    std::size_t zero_var;
  };
  bool excess_;
  std::vector<Acc> sites_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline std::vector<std::string> outlier_sites(const Transformer& model, OutlierScope scope) {
  if (scope == OutlierScope::All) return model.activation_sites();
  std::vector<std::string> out;
  const bool post = model.config().norm_placement == NormPlacement::PostNorm;
  for (std::size_t l = 0; l < model.config().n_layers; ++l) {
    out.push_back("layer" + std::to_string(l) + (post ? ".ln2" : ".residual2"));
  }
  return out;
}

namespace detail {

inline const Transformer& base_model(const Transformer& m) { return m; }
inline const Transformer& base_model(const QuantizedModel& q) { return q.weights(); }

// Every site tensor is batch-major, so sample b is the b-th equal chunk.
struct OutlierHook : ActivationHook {
  OutlierAccumulator& acc;
  std::unordered_set<std::string> keep;
  std::size_t batch_size = 1;
  OutlierHook(OutlierAccumulator& a, const std::vector<std::string>& sites)
      : acc(a), keep(sites.begin(), sites.end()) {}
  Tensor on_site(const std::string& site, const Tensor& x) override {
    if (!keep.contains(site)) return x;
    const std::size_t per = x.numel() / batch_size;
    for (std::size_t b = 0; b < batch_size; ++b) acc.add(site, x.data().subspan(b * per, per));
    return x;
  }
};

inline Batch gather(const PackedDataset& ds, std::size_t first, std::size_t count) {
  Batch b{{}, count, ds.seq_len};
  b.ids.reserve(count * ds.seq_len);
  for (std::size_t i = first; i < first + count; ++i) {
    auto s = ds.sequence(i);
    b.ids.insert(b.ids.end(), s.begin(), s.end());
  }
  return b;
}

inline std::uint64_t sequence_hash(std::span<const std::int32_t> ids) {
  std::string_view bytes(reinterpret_cast<const char*>(ids.data()), ids.size_bytes());
  return fnv1a(bytes);
}

}  // namespace detail

/// Activation statistics over the first n_samples sequences of `ds`, fed
/// unmasked. Works for Transformer and QuantizedModel.
template <class M>
OutlierReport outlier_report(const M& model, const PackedDataset& ds, std::size_t n_samples,
                             bool kurtosis_excess = false,
                             OutlierScope scope = OutlierScope::LayerOutputs,
                             std::size_t batch_size = 32) {
  if (n_samples == 0) throw std::invalid_argument("outlier_report: n_samples must be >= 1");
  if (n_samples > ds.size()) {
    throw std::invalid_argument("outlier_report: " + std::to_string(n_samples) +
                                " samples requested, dataset has " + std::to_string(ds.size()));
  }
  NoRecordScope no_tape;
  OutlierAccumulator acc(kurtosis_excess);
  detail::OutlierHook hook(acc, outlier_sites(detail::base_model(model), scope));
  for (std::size_t first = 0; first < n_samples; first += batch_size) {
    const std::size_t n = std::min(batch_size, n_samples - first);
    hook.batch_size = n;
    model.logits(detail::gather(ds, first, n), {.hook = &hook, .dropout_rng = nullptr});
  }
  OutlierReport r = acc.report(n_samples);
  r.scope = scope;
  return r;
}

struct EvalStats {
  double total_nll = 0.0;
  std::size_t n_targets = 0;
  std::size_t n_correct = 0;
  std::size_t n_sequences = 0;

  double mean_loss() const { return total_nll / static_cast<double>(n_targets); }
  double perplexity() const { return std::exp(mean_loss()); }
  double accuracy() const { return static_cast<double>(n_correct) / static_cast<double>(n_targets); }
};

/// Masked positions (MLM) or all next-token positions (CLM), summed over
/// the dataset. Also counts argmax hits.
template <class M>
EvalStats evaluate(const M& model, const PackedDataset& ds, std::uint64_t eval_seed,
                   std::size_t batch_size = 32) {
  if (ds.size() == 0) throw DataError("evaluation dataset is empty");
  const ModelConfig& cfg = model.config();
  NoRecordScope no_tape;
  EvalStats st;
  st.n_sequences = ds.size();
  for (std::size_t first = 0; first < ds.size(); first += batch_size) {
    const std::size_t n = std::min(batch_size, ds.size() - first);
    Batch b = detail::gather(ds, first, n);
    ModelOutput out;
    if (cfg.objective == Objective::MLM) {
      std::vector<std::int32_t> labels;
      std::vector<std::int32_t> corrupted;
      for (std::size_t i = 0; i < n; ++i) {
        auto seq = ds.sequence(first + i);
        Rng rng(derive_seed(eval_seed, "eval-mask", detail::sequence_hash(seq)));
        auto m = mask_batch(seq, cfg.vocab_size, cfg.mlm_prob, rng);
        labels.insert(labels.end(), m.labels.begin(), m.labels.end());
        corrupted.insert(corrupted.end(), m.corrupted.begin(), m.corrupted.end());
      }
      if (std::all_of(labels.begin(), labels.end(), [](std::int32_t l) { return l < 0; })) continue;
      b.ids = std::move(corrupted);
      out = model.forward_mlm(b, labels);
    } else {
      out = model.forward_clm(b);
    }
    st.total_nll += out.loss.item() * static_cast<double>(out.n_targets);
    st.n_targets += out.n_targets;
    const std::size_t V = out.logits.shape().back();
    auto logits = out.logits.data();
    for (std::size_t r = 0; r < out.targets.size(); ++r) {
      if (out.targets[r] < 0) continue;
      auto row = logits.subspan(r * V, V);
      const auto best = std::max_element(row.begin(), row.end()) - row.begin();
      st.n_correct += best == out.targets[r];
    }
  }
  if (st.n_targets == 0) throw DataError("evaluation selected no target positions");
  return st;
}

template <class M>
double perplexity(const M& model, const PackedDataset& ds, std::uint64_t eval_seed) {
  return evaluate(model, ds, eval_seed).perplexity();
}

template <class M>
double mlm_accuracy(const M& model, const PackedDataset& ds, std::uint64_t eval_seed) {
  if (model.config().objective != Objective::MLM) {
    throw std::logic_error("mlm_accuracy on a causal model");
  }
  return evaluate(model, ds, eval_seed).accuracy();
}

struct LengthRow {
  std::size_t length = 0;
  double metric = 0.0;  // MLM accuracy, or perplexity for CLM
  std::size_t n_sequences = 0;
};

/// Re-chunks the token stream of `validation` at each length and evaluates.
/// Rows come back sorted by length.
template <class M>
std::vector<LengthRow> length_sweep(const M& model, const PackedDataset& validation,
                                    std::vector<std::size_t> lengths, std::uint64_t eval_seed) {
  const ModelConfig& cfg = model.config();
  std::sort(lengths.begin(), lengths.end());
  lengths.erase(std::unique(lengths.begin(), lengths.end()), lengths.end());
  std::vector<LengthRow> rows;
  for (std::size_t L : lengths) {
    if (L > cfg.max_seq_len) {
      throw ConfigError("eval.lengths", "length " + std::to_string(L) +
                                            " exceeds position capacity " +
                                            std::to_string(cfg.max_seq_len));
    }
    if (L < 2) throw ConfigError("eval.lengths", "lengths must be >= 2");
    PackedDataset ds = pack_ids(validation.ids, L, validation.corpus_hash);
    const EvalStats st = evaluate(model, ds, eval_seed);
    rows.push_back({L, cfg.objective == Objective::MLM ? st.accuracy() : st.perplexity(), ds.size()});
  }
  return rows;
}

/// Calibration batches drawn at random from the training set. MLM batches
/// are masked like training batches.
inline std::vector<Batch> calibration_batches(const PackedDataset& train, const ModelConfig& cfg,
                                              const QuantScheme& scheme, std::uint64_t seed) {
  if (train.size() == 0) throw DataError("calibration set is empty");
  Rng pick(derive_seed(seed, "calib", 0));
  std::vector<Batch> out;
  for (std::size_t i = 0; i < scheme.calib_batches; ++i) {
    Batch b{{}, scheme.calib_batch_size, train.seq_len};
    for (std::size_t k = 0; k < scheme.calib_batch_size; ++k) {
      auto s = train.sequence(static_cast<std::size_t>(pick.below(train.size())));
      b.ids.insert(b.ids.end(), s.begin(), s.end());
    }
    if (cfg.objective == Objective::MLM) {
      Rng rng(derive_seed(seed, "calib", i + 1));
      b.ids = mask_batch(b.ids, cfg.vocab_size, cfg.mlm_prob, rng).corrupted;
    }
    out.push_back(std::move(b));
  }
  return out;
}

struct EvalReport {
  std::string objective;
  double fp_loss = 0.0;
  double fp_ppl = 0.0;
  double quant_loss = 0.0;
  double quant_ppl = 0.0;
  std::optional<double> fp_accuracy;
  std::optional<double> quant_accuracy;
  std::size_t n_eval_sequences = 0;
  std::size_t n_eval_targets = 0;
  std::uint64_t calib_seed = 0;
  std::uint64_t eval_seed = 0;
  QuantScheme scheme;
  std::vector<SiteSpec> weight_specs;
  std::vector<SiteSpec> activation_specs;
  OutlierReport outliers;
  std::vector<LengthRow> lengths;
  nlohmann::json metadata = nlohmann::json::object();
};

struct FpVsQuantOptions {
  std::uint64_t calib_seed = 0;
  std::uint64_t eval_seed = 0;
  std::size_t outlier_samples = 256;
  bool kurtosis_excess = false;
  OutlierScope outlier_scope = OutlierScope::LayerOutputs;
};

/// Evaluates the model in full precision and after quantize_model, and
/// attaches the outlier statistics of the full-precision model.
inline EvalReport fp_vs_quant(const Transformer& model, const QuantScheme& scheme,
                              const PackedDataset& validation, const PackedDataset& train,
                              const FpVsQuantOptions& opt) {
  const ModelConfig& cfg = model.config();
  EvalReport r;
  r.objective = to_string(cfg.objective);
  r.calib_seed = opt.calib_seed;
  r.eval_seed = opt.eval_seed;
  r.scheme = scheme;

  const EvalStats fp = evaluate(model, validation, opt.eval_seed);
  QuantizedModel q = quantize_model(model, calibration_batches(train, cfg, scheme, opt.calib_seed), scheme);
  const EvalStats qs = evaluate(q, validation, opt.eval_seed);
  r.fp_loss = fp.mean_loss();
  r.fp_ppl = fp.perplexity();
  r.quant_loss = qs.mean_loss();
  r.quant_ppl = qs.perplexity();
  if (cfg.objective == Objective::MLM) {
    r.fp_accuracy = fp.accuracy();
    r.quant_accuracy = qs.accuracy();
  }
  r.n_eval_sequences = fp.n_sequences;
  r.n_eval_targets = fp.n_targets;
  r.weight_specs = q.weight_specs();
  r.activation_specs = q.activation_specs();
  r.outliers = outlier_report(model, validation, std::min(opt.outlier_samples, validation.size()),
                              opt.kurtosis_excess, opt.outlier_scope);
  return r;
}

inline nlohmann::json spec_json(const SiteSpec& s) {
  return {{"site", s.site},
          {"s", s.spec.scale},
          {"z", s.spec.zero_point},
          {"b", s.spec.bits},
          {"estimator", to_string(s.spec.estimator)}};
}

inline nlohmann::json to_json(const OutlierReport& o) {
  nlohmann::json sites = nlohmann::json::array();
  for (const auto& s : o.per_site) {
    sites.push_back({{"site", s.site},
                     {"max_inf_norm", s.max_inf_norm},
                     {"avg_kurtosis", s.avg_kurtosis},
                     {"max_kurtosis", s.max_kurtosis},
                     {"n_kurtosis", s.n_kurtosis},
                     {"n_zero_variance", s.n_zero_variance}});
  }
  return {{"max_inf_norm", o.max_inf_norm},
          {"max_inf_norm_site", o.max_inf_norm_site},
          {"avg_kurtosis", o.avg_kurtosis},
          {"kurtosis", o.kurtosis_excess ? "excess" : "pearson"},
          {"sites", to_string(o.scope)},
          {"aggregation", "max / unweighted mean over (site, sample) pairs"},
          {"n_samples", o.n_samples},
          {"n_excluded", o.n_excluded},
          {"per_site", std::move(sites)}};
}

inline nlohmann::json to_json(const QuantScheme& s) {
  return {{"weight_bits", s.weight_bits},
          {"act_bits", s.act_bits},
          {"weight_estimator", to_string(s.weight_estimator)},
          {"act_estimator", to_string(s.act_estimator)},
          {"momentum", s.momentum},
          {"percentile", s.percentile},
          {"mse_grid", s.mse_grid},
          {"calib_batches", s.calib_batches},
          {"calib_batch_size", s.calib_batch_size},
          {"quantize_final_norm", s.quantize_final_norm}};
}

inline constexpr int kEvalReportVersion = 1;

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json weights = nlohmann::json::array();
  for (const auto& s : r.weight_specs) weights.push_back(spec_json(s));
  nlohmann::json acts = nlohmann::json::array();
  for (const auto& s : r.activation_specs) acts.push_back(spec_json(s));
  nlohmann::json lengths = nlohmann::json::array();
  for (const auto& l : r.lengths) {
    lengths.push_back({{"length", l.length}, {"metric", l.metric}, {"n_sequences", l.n_sequences}});
  }
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  return {{"format", "outlier-lab-eval"},
          {"version", kEvalReportVersion},
          {"objective", r.objective},
          {"fp_loss", r.fp_loss},
          {"fp_ppl", r.fp_ppl},
          {"quant_loss", r.quant_loss},
          {"quant_ppl", r.quant_ppl},
          {"fp_accuracy", opt(r.fp_accuracy)},
          {"quant_accuracy", opt(r.quant_accuracy)},
          {"n_eval_sequences", r.n_eval_sequences},
          {"n_eval_targets", r.n_eval_targets},
          {"calib_seed", r.calib_seed},
          {"eval_seed", r.eval_seed},
          {"scheme", to_json(r.scheme)},
          {"weight_specs", std::move(weights)},
          {"activation_specs", std::move(acts)},
          {"outliers", to_json(r.outliers)},
          {"length_sweep", std::move(lengths)},
          {"metadata", r.metadata}};
}

}  // namespace olab
