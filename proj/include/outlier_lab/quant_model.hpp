#pragma once

// Post-training W8A8 simulation of a Transformer. Every weight tensor gets a
// per-tensor spec and is fake-quantized once; every activation site gets a
// static spec from calibration and is fake-quantized on the fly. The output
// projection (the tied embedding in its output role, plus the MLM output
// bias) stays in full precision.

#include "outlier_lab/model.hpp"
#include "outlier_lab/quantizer.hpp"
#include "outlier_lab/softmax.hpp"

#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace olab {

struct QuantScheme {
  int weight_bits = 8;
  int act_bits = 8;
  RangeEstimator weight_estimator = RangeEstimator::MinMax;
  RangeEstimator act_estimator = RangeEstimator::RunningMinMax;
  double momentum = 0.9;
  double percentile = 99.999;
  int mse_grid = 64;
  std::size_t calib_batches = 16;
  std::size_t calib_batch_size = 8;
  bool quantize_final_norm = true;

  void validate() const {
    if (weight_bits < 2 || weight_bits > 31) throw ConfigError("quant.weight_bits", "must be in [2, 31]");
    if (act_bits < 2 || act_bits > 31) throw ConfigError("quant.act_bits", "must be in [2, 31]");
    if (weight_estimator != RangeEstimator::MinMax && weight_estimator != RangeEstimator::MSE) {
      throw ConfigError("quant.weight_estimator", "must be minmax or mse");
    }
    if (act_estimator != RangeEstimator::RunningMinMax && act_estimator != RangeEstimator::Percentile) {
      throw ConfigError("quant.act_estimator", "must be running_minmax or percentile");
    }
    if (!(momentum > 0.0 && momentum < 1.0)) throw ConfigError("quant.momentum", "must be in (0, 1)");
    if (!(percentile > 50.0 && percentile <= 100.0)) {
      throw ConfigError("quant.percentile", "must be in (50, 100]");
    }
    if (mse_grid < 2) throw ConfigError("quant.mse_grid", "must be >= 2");
    if (calib_batches == 0) throw ConfigError("quant.calib_batches", "must be >= 1");
    if (calib_batch_size == 0) throw ConfigError("quant.calib_batch_size", "must be >= 1");
  }
};

inline RangeEstimator parse_estimator(const std::string& s, const std::string& field) {
  for (auto e : {RangeEstimator::MinMax, RangeEstimator::MSE, RangeEstimator::RunningMinMax,
                 RangeEstimator::Percentile}) {
    if (to_string(e) == s) return e;
  }
  throw ConfigError(field, "unknown estimator '" + s + "'");
}

struct SiteSpec {
  std::string site;
  QuantizerSpec spec;
};

namespace detail {

class CalibrationHook : public ActivationHook {
 public:
  explicit CalibrationHook(const QuantScheme& s) : scheme_(s) {}

  Tensor on_site(const std::string& site, const Tensor& x) override {
    auto [it, fresh] = state_.try_emplace(site);
    if (fresh) {
      it->second.momentum = scheme_.momentum;
      order_.push_back(site);
    }
    if (scheme_.act_estimator == RangeEstimator::Percentile) {
      auto& buf = it->second.sample_buffer;
      buf.insert(buf.end(), x.data().begin(), x.data().end());
      ++it->second.batches_seen;
    } else {
      it->second = running_minmax_update(it->second, x.data());
    }
    return x;
  }

  std::vector<SiteSpec> specs() const {
    std::vector<SiteSpec> out;
    for (const auto& site : order_) {
      const auto& st = state_.at(site);
      double lo = st.running_min;
      double hi = st.running_max;
      if (scheme_.act_estimator == RangeEstimator::Percentile) {
        std::tie(lo, hi) = percentile_range(st.sample_buffer, scheme_.percentile);
      }
      out.push_back({site, QuantizerSpec::from(params_from_range(lo, hi, scheme_.act_bits),
                                               scheme_.act_bits, scheme_.act_estimator,
                                               QuantTarget::Activation)});
    }
    return out;
  }

 private:
  QuantScheme scheme_;
  std::unordered_map<std::string, CalibrationState> state_;
  std::vector<std::string> order_;
};

class FakeQuantHook : public ActivationHook {
 public:
  FakeQuantHook(const std::unordered_map<std::string, QuantizerSpec>& specs, ActivationHook* next)
      : specs_(specs), next_(next) {}

  Tensor on_site(const std::string& site, const Tensor& x) override {
    auto it = specs_.find(site);
    Tensor y = it == specs_.end() ? x : fake_quant(x, it->second);
    return next_ ? next_->on_site(site, y) : y;
  }

 private:
  const std::unordered_map<std::string, QuantizerSpec>& specs_;
  ActivationHook* next_;
};

}  // namespace detail

class QuantizedModel {
 public:
  QuantizedModel(Transformer model, std::vector<SiteSpec> weights, std::vector<SiteSpec> acts,
                 QuantScheme scheme)
      : model_(std::move(model)),
        weight_specs_(std::move(weights)),
        act_specs_(std::move(acts)),
        scheme_(scheme) {
    for (const auto& a : act_specs_) act_index_[a.site] = a.spec;
  }

  const ModelConfig& config() const { return model_.config(); }
  const QuantScheme& scheme() const { return scheme_; }
  const std::vector<SiteSpec>& weight_specs() const { return weight_specs_; }
  const std::vector<SiteSpec>& activation_specs() const { return act_specs_; }
  std::size_t spec_count() const { return weight_specs_.size() + act_specs_.size(); }
  /// The weights after fake quantization.
  const Transformer& weights() const { return model_; }

  Tensor logits(const Batch& b, const ForwardOptions& opt = {}) const {
    detail::FakeQuantHook hook(act_index_, opt.hook);
    return model_.logits(b, {.hook = &hook, .dropout_rng = nullptr});
  }
  ModelOutput forward_mlm(const Batch& b, std::span<const std::int32_t> labels,
                          const ForwardOptions& opt = {}) const {
    detail::FakeQuantHook hook(act_index_, opt.hook);
    return model_.forward_mlm(b, labels, {.hook = &hook, .dropout_rng = nullptr});
  }
  ModelOutput forward_clm(const Batch& b, const ForwardOptions& opt = {}) const {
    detail::FakeQuantHook hook(act_index_, opt.hook);
    return model_.forward_clm(b, {.hook = &hook, .dropout_rng = nullptr});
  }

 private:
  Transformer model_;
  std::vector<SiteSpec> weight_specs_;
  std::vector<SiteSpec> act_specs_;
  std::unordered_map<std::string, QuantizerSpec> act_index_;
  QuantScheme scheme_;
};

/// Names of parameters that stay in full precision under `scheme`.
inline std::unordered_set<std::string> unquantized_parameters(const Transformer& model,
                                                              const QuantScheme& scheme) {
  std::unordered_set<std::string> skip;
  for (const auto& n : model.final_layer_parameters()) skip.insert(n);
  if (!scheme.quantize_final_norm) {
    skip.insert(model.final_norm_name() + ".gain");
    skip.insert(model.final_norm_name() + ".bias");
  }
  return skip;
}

/// Quantizes weights, then calibrates activation ranges by running the
/// calibration batches through the weight-quantized model.
inline QuantizedModel quantize_model(const Transformer& model, const std::vector<Batch>& calib,
                                     const QuantScheme& scheme) {
  scheme.validate();
  if (calib.empty()) throw ShapeError("quantize_model", "no calibration batches");
  for (const auto& b : calib) {
    if (b.batch_size == 0 || b.ids.size() != b.batch_size * b.seq_len ||
        b.seq_len != calib.front().seq_len || b.seq_len > model.config().max_seq_len) {
      throw ShapeError("quantize_model", "calibration batch shape mismatch: " +
                                             std::to_string(b.ids.size()) + " ids as " +
                                             std::to_string(b.batch_size) + " x " +
                                             std::to_string(b.seq_len));
    }
  }

  Transformer q = model;
  q.set_output_weight(model.param("embeddings.token").detached_copy());
  const auto skip = unquantized_parameters(model, scheme);
  std::vector<SiteSpec> weights;
  for (auto& p : q.parameters()) {
    if (skip.contains(p.name)) continue;
    auto data = p.tensor.mutable_data();
    QuantParams qp = scheme.weight_estimator == RangeEstimator::MSE
                         ? mse_estimator(data, scheme.weight_bits, scheme.mse_grid).params
                         : minmax_params(data, scheme.weight_bits);
    auto spec = QuantizerSpec::from(qp, scheme.weight_bits, scheme.weight_estimator, QuantTarget::Weight);
    fake_quant_inplace(data, spec);
    weights.push_back({p.name, spec});
  }

  detail::CalibrationHook calib_hook(scheme);
  {
    NoRecordScope no_tape;
    for (const auto& b : calib) q.logits(b, {.hook = &calib_hook, .dropout_rng = nullptr});
  }
  std::vector<SiteSpec> acts;
  const std::string final_norm = model.final_norm_name();
  for (auto& s : calib_hook.specs()) {
    if (!scheme.quantize_final_norm && s.site == final_norm) continue;
    acts.push_back(std::move(s));
  }
  return QuantizedModel(std::move(q), std::move(weights), std::move(acts), scheme);
}

}  // namespace olab
