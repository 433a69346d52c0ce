#pragma once

// Tiny transformer language model with a pluggable attention normalizer.
//
//   MLM  : post-norm bidirectional encoder + transform/LN head, tied output.
//   CLM  : pre-norm causal decoder + final LN, tied output.
//
// Every tensor that feeds the next layer passes through a named activation
// site; an ActivationHook can observe or replace it (calibration, fake
// quantization, activation capture, attention export).

#include "outlier_lab/rng.hpp"
#include "outlier_lab/softmax.hpp"
#include "outlier_lab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace olab {

enum class Objective { MLM, CausalLM };
enum class NormPlacement { PostNorm, PreNorm };

inline std::string to_string(Objective o) { return o == Objective::MLM ? "mlm" : "clm"; }
inline std::string to_string(NormPlacement p) {
  return p == NormPlacement::PostNorm ? "post" : "pre";
}

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t hidden = 64;
  std::size_t n_heads = 4;
  std::size_t intermediate = 0;  // 0 means 4 * hidden
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 32;
  Objective objective = Objective::MLM;
  SoftmaxConfig softmax;
  NormPlacement norm_placement = NormPlacement::PostNorm;
  double mlm_prob = 0.15;
  double dropout = 0.0;
  double ln_eps = 1e-5;
  double init_std = 0.02;

  std::size_t ffn_size() const { return intermediate == 0 ? 4 * hidden : intermediate; }
  std::size_t head_dim() const { return hidden / n_heads; }

  static NormPlacement default_placement(Objective o) {
    return o == Objective::MLM ? NormPlacement::PostNorm : NormPlacement::PreNorm;
  }

  void validate() const {
    if (n_layers == 0) throw ConfigError("model.n_layers", "must be >= 1");
    if (hidden == 0 || n_heads == 0 || hidden % n_heads != 0) {
      throw ConfigError("model.n_heads", "hidden must be divisible by n_heads");
    }
    if (vocab_size <= 5) throw ConfigError("model.vocab_size", "must exceed the 5 reserved ids");
    if (max_seq_len < 2) throw ConfigError("model.max_seq_len", "must be >= 2");
    if (objective == Objective::MLM && !(mlm_prob > 0.0 && mlm_prob < 1.0)) {
      throw ConfigError("model.mlm_prob", "must be in (0, 1)");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout", "must be in [0, 1)");
    softmax.validate();
    const bool causal = softmax.direction == AttentionDirection::Causal;
    if (causal != (objective == Objective::CausalLM)) {
      throw ConfigError("softmax.direction", "causal attention goes with the clm objective only");
    }
  }
};

/// Closed-form parameter count.
inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t h = c.hidden;
  const std::size_t f = c.ffn_size();
  std::size_t n = c.vocab_size * h + c.max_seq_len * h;
  if (c.norm_placement == NormPlacement::PostNorm) n += 2 * h;  // embedding LN
  n += c.n_layers * (4 * (h * h + h) + 2 * (2 * h) + (h * f + f) + (f * h + h));
  if (c.norm_placement == NormPlacement::PreNorm) n += 2 * h;  // final LN
  if (c.objective == Objective::MLM) n += (h * h + h) + 2 * h + c.vocab_size;
  return n;
}

/// Token ids for `batch_size` sequences of `seq_len` tokens, row-major.
struct Batch {
  std::vector<std::int32_t> ids;
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
};

class ActivationHook {
 public:
  virtual ~ActivationHook() = default;
  /// Returns the tensor that continues through the network.
  virtual Tensor on_site(const std::string& site, const Tensor& x) = 0;
};

struct ForwardOptions {
  ActivationHook* hook = nullptr;
  Rng* dropout_rng = nullptr;  // dropout is active only when set and p > 0
};

struct ModelOutput {
  Tensor loss;    // mean cross-entropy (nats)
  Tensor logits;  // [n_rows, V]
  std::size_t n_targets = 0;
  std::vector<std::int32_t> targets;  // one per logits row, -1 = not scored
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool decay = true;  // decoupled weight decay applies
};

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

namespace detail {

inline Tensor site(const ForwardOptions& o, const std::string& prefix, const char* name,
                   const Tensor& x) {
  if (o.hook == nullptr) return x;
  return o.hook->on_site(prefix + name, x);
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return ops::linear(x, w, b); }

inline Tensor dropout(const Tensor& x, double p, const ForwardOptions& o) {
  if (o.dropout_rng == nullptr || p <= 0.0) return x;
  std::vector<double> keep(x.numel());
  for (double& k : keep) k = o.dropout_rng->uniform() < p ? 0.0 : 1.0 / (1.0 - p);
  return ops::mul(x, Tensor(x.shape(), std::move(keep)));
}

}  // namespace detail

/// Multi-head self-attention over x ([B*T, H]) added onto `residual`.
/// Scores are QK^T / sqrt(H / n_heads); rows go through attention_normalize.
inline Tensor attention_layer(const Tensor& x, const Tensor& residual, std::size_t batch,
                              std::size_t seq_len, const AttentionWeights& w, std::size_t n_heads,
                              const SoftmaxConfig& cfg, const std::vector<std::uint8_t>* mask,
                              std::optional<std::size_t> pretrain_length,
                              const ForwardOptions& opt = {}, const std::string& prefix = "",
                              double dropout = 0.0) {
  const std::size_t h = x.dim(1);
  if (x.rank() != 2 || x.dim(0) != batch * seq_len || h % n_heads != 0) {
    throw ShapeError("attention_layer", "input " + shape_str(x.shape()) + " for batch " +
                                            std::to_string(batch) + " x " +
                                            std::to_string(seq_len));
  }
  if ((cfg.direction == AttentionDirection::Causal) != (mask != nullptr)) {
    throw ShapeError("attention_layer", "causal config and mask must go together");
  }
  const std::size_t hd = h / n_heads;
  auto split_heads = [&](const Tensor& t) {
    return ops::transpose(ops::reshape(t, {batch, seq_len, n_heads, hd}), {0, 2, 1, 3});
  };
  Tensor q = detail::site(opt, prefix, "attn.q", detail::linear(x, w.wq, w.bq));
  Tensor k = detail::site(opt, prefix, "attn.k", detail::linear(x, w.wk, w.bk));
  Tensor v = detail::site(opt, prefix, "attn.v", detail::linear(x, w.wv, w.bv));
  Tensor scores = ops::scale(ops::matmul(split_heads(q), split_heads(k), {.transpose_b = true}),
                             1.0 / std::sqrt(static_cast<double>(hd)));
  scores = detail::site(opt, prefix, "attn.scores", scores);
  Tensor probs = attention_normalize(scores, cfg, mask, pretrain_length);
  probs = detail::site(opt, prefix, "attn.probs", probs);
  Tensor ctx = ops::matmul(probs, split_heads(v));
  ctx = ops::reshape(ops::transpose(ctx, {0, 2, 1, 3}), {batch * seq_len, h});
  ctx = detail::site(opt, prefix, "attn.context", ctx);
  Tensor out = detail::site(opt, prefix, "attn.out", detail::linear(ctx, w.wo, w.bo));
  return ops::add(residual, detail::dropout(out, dropout, opt));
}

class Transformer {
 public:
  Transformer() = default;

  /// normal(0, init_std) weights, zero biases, unit LayerNorm gains.
  Transformer(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(init_seed, "init"));
    const std::size_t h = cfg_.hidden;
    const std::size_t f = cfg_.ffn_size();
    auto normal = [&](const std::string& name, Shape s) {
      std::vector<double> v(shape_numel(s));
      for (double& x : v) x = cfg_.init_std * rng.normal();
      add_param(name, Tensor(std::move(s), std::move(v), true), true);
    };
    auto zeros = [&](const std::string& name, Shape s) {
      add_param(name, Tensor::zeros(std::move(s), true), false);
    };
    auto layer_norm = [&](const std::string& name) {
      add_param(name + ".gain", Tensor(Shape{h}, std::vector<double>(h, 1.0), true), false);
      zeros(name + ".bias", {h});
    };

    normal("embeddings.token", {cfg_.vocab_size, h});
    normal("embeddings.position", {cfg_.max_seq_len, h});
    if (post_norm()) layer_norm("embeddings.ln");
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.out"}) {
        normal(p + proj + ".weight", {h, h});
        zeros(p + proj + ".bias", {h});
      }
      layer_norm(p + "ln1");
      normal(p + "ffn.in.weight", {h, f});
      zeros(p + "ffn.in.bias", {f});
      normal(p + "ffn.out.weight", {f, h});
      zeros(p + "ffn.out.bias", {h});
      layer_norm(p + "ln2");
    }
    if (!post_norm()) layer_norm("final_ln");
    if (cfg_.objective == Objective::MLM) {
      normal("head.transform.weight", {h, h});
      zeros("head.transform.bias", {h});
      layer_norm("head.ln");
      zeros("head.output_bias", {cfg_.vocab_size});
    }
  }

  Transformer(const Transformer& other) : cfg_(other.cfg_) {
    for (const auto& p : other.params_) add_param(p.name, clone(p.tensor), p.decay);
    if (other.output_weight_) output_weight_ = clone(*other.output_weight_);
  }
  Transformer& operator=(const Transformer& other) {
    if (this != &other) *this = Transformer(other);
    return *this;
  }
  Transformer(Transformer&&) = default;
  Transformer& operator=(Transformer&&) = default;

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedParam>& parameters() { return params_; }
  const std::vector<NamedParam>& parameters() const { return params_; }

  const Tensor& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second].tensor;
  }
  Tensor& param(const std::string& name) {
    return const_cast<Tensor&>(std::as_const(*this).param(name));
  }
  bool has_param(const std::string& name) const { return index_.contains(name); }

  /// Replaces a parameter's values (shape must match).
  void set_param(const std::string& name, std::span<const double> values) {
    Tensor& t = param(name);
    if (values.size() != t.numel()) {
      throw ShapeError("set_param", name + " expects " + std::to_string(t.numel()) + " values");
    }
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }

  /// Matrix used by the output projection in place of the tied token
  /// embedding (the quantized model keeps the full-precision copy here).
  void set_output_weight(Tensor w) { output_weight_ = std::move(w); }

  /// Parameters that exist only in the final (vocabulary) layer.
  std::vector<std::string> final_layer_parameters() const {
    if (cfg_.objective == Objective::MLM) return {"head.output_bias"};
    return {};
  }

  /// Name of the normalization applied right before the output projection.
  std::string final_norm_name() const {
    return cfg_.objective == Objective::MLM ? "head.ln" : "final_ln";
  }

  /// Activation sites in forward order.
  std::vector<std::string> activation_sites() const {
    std::vector<std::string> s{"embeddings.sum"};
    if (post_norm()) s.push_back("embeddings.ln");
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      if (!post_norm()) s.push_back(p + "ln1");
      for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.scores", "attn.probs",
                            "attn.context", "attn.out", "residual1"}) {
        s.push_back(p + n);
      }
      s.push_back(p + (post_norm() ? "ln1" : "ln2"));
      for (const char* n : {"ffn.in", "ffn.act", "ffn.out", "residual2"}) s.push_back(p + n);
      if (post_norm()) s.push_back(p + "ln2");
    }
    if (!post_norm()) s.push_back("final_ln");
    if (cfg_.objective == Objective::MLM) {
      for (const char* n : {"head.transform", "head.act", "head.ln"}) s.push_back(n);
    }
    return s;
  }

  /// Final hidden states [B*T, H] (after the last normalization of the
  /// trunk; the MLM transform is part of the head).
  Tensor encode(const Batch& b, const ForwardOptions& opt = {}) const {
    check_batch(b);
    const std::size_t bt = b.batch_size * b.seq_len;
    Tensor tok = ops::embedding_lookup(param("embeddings.token"), b.ids, {bt});
    std::vector<std::int32_t> pos_ids(bt);
    for (std::size_t i = 0; i < bt; ++i) pos_ids[i] = static_cast<std::int32_t>(i % b.seq_len);
    Tensor pos = ops::embedding_lookup(param("embeddings.position"), pos_ids, {bt});
    Tensor x = detail::site(opt, "", "embeddings.sum", ops::add(tok, pos));
    if (post_norm()) {
      x = detail::site(opt, "", "embeddings.ln",
                       ops::layer_norm(x, param("embeddings.ln.gain"), param("embeddings.ln.bias"),
                                       cfg_.ln_eps));
    }
    const bool causal = cfg_.objective == Objective::CausalLM;
    const std::vector<std::uint8_t> mask = causal ? causal_mask(b.seq_len) : std::vector<std::uint8_t>{};
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      x = layer(x, l, b, causal ? &mask : nullptr, opt);
    }
    if (!post_norm()) {
      x = detail::site(opt, "", "final_ln",
                       ops::layer_norm(x, param("final_ln.gain"), param("final_ln.bias"), cfg_.ln_eps));
    }
    return x;
  }

  /// Vocabulary logits for rows of hidden states ([N, H] -> [N, V]).
  Tensor head(const Tensor& hidden, const ForwardOptions& opt = {}) const {
    const Tensor& out_w = output_weight_ ? *output_weight_ : param("embeddings.token");
    if (cfg_.objective == Objective::CausalLM) {
      return ops::matmul(hidden, out_w, {.transpose_b = true});
    }
    Tensor t = detail::site(opt, "", "head.transform",
                            detail::linear(hidden, param("head.transform.weight"),
                                           param("head.transform.bias")));
    t = detail::site(opt, "", "head.act", ops::gelu(t));
    t = detail::site(opt, "", "head.ln",
                     ops::layer_norm(t, param("head.ln.gain"), param("head.ln.bias"), cfg_.ln_eps));
    return ops::add(ops::matmul(t, out_w, {.transpose_b = true}), param("head.output_bias"));
  }

  /// Logits at every position, [B*T, V].
  Tensor logits(const Batch& b, const ForwardOptions& opt = {}) const { return head(encode(b, opt), opt); }

  /// Cross-entropy over positions with labels[i] >= 0 (the masked ones).
  /// Logits are computed for those rows only.
  ModelOutput forward_mlm(const Batch& corrupted, std::span<const std::int32_t> labels,
                          const ForwardOptions& opt = {}) const {
    if (cfg_.objective != Objective::MLM) throw std::logic_error("forward_mlm on a causal model");
    if (labels.size() != corrupted.ids.size()) {
      throw ShapeError("forward_mlm", "labels do not match batch size");
    }
    std::vector<std::int32_t> rows;
    ModelOutput out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= 0) {
        rows.push_back(static_cast<std::int32_t>(i));
        out.targets.push_back(labels[i]);
      }
    }
    if (rows.empty()) throw std::invalid_argument("forward_mlm: no masked positions in batch");
    Tensor hidden = encode(corrupted, opt);
    Tensor selected = ops::embedding_lookup(hidden, rows, {rows.size()});
    out.logits = head(selected, opt);
    out.loss = ops::cross_entropy(out.logits, out.targets);
    out.n_targets = rows.size();
    return out;
  }

  /// Next-token cross-entropy averaged over positions 0..T-2 of each row.
  ModelOutput forward_clm(const Batch& b, const ForwardOptions& opt = {}) const {
    if (cfg_.objective != Objective::CausalLM) throw std::logic_error("forward_clm on an MLM model");
    if (b.seq_len < 2) throw std::invalid_argument("forward_clm: sequences need at least 2 tokens");
    ModelOutput out;
    out.targets.assign(b.ids.size(), -1);
    for (std::size_t r = 0; r < b.batch_size; ++r) {
      for (std::size_t t = 0; t + 1 < b.seq_len; ++t) {
        out.targets[r * b.seq_len + t] = b.ids[r * b.seq_len + t + 1];
      }
    }
    out.logits = logits(b, opt);
    out.loss = ops::cross_entropy(out.logits, out.targets);
    out.n_targets = b.batch_size * (b.seq_len - 1);
    return out;
  }

 private:
  bool post_norm() const { return cfg_.norm_placement == NormPlacement::PostNorm; }

  static Tensor clone(const Tensor& t) {
    Tensor c = t.detached_copy();
    c.set_requires_grad(t.requires_grad());
    return c;
  }

  void add_param(const std::string& name, Tensor t, bool decay) {
    index_[name] = params_.size();
    params_.push_back({name, std::move(t), decay});
  }

  void check_batch(const Batch& b) const {
    if (b.batch_size == 0 || b.seq_len == 0 || b.ids.size() != b.batch_size * b.seq_len) {
      throw ShapeError("forward", "batch of " + std::to_string(b.ids.size()) + " ids is not " +
                                      std::to_string(b.batch_size) + " x " +
                                      std::to_string(b.seq_len));
    }
    if (b.seq_len > cfg_.max_seq_len) {
      throw ShapeError("forward", "sequence length " + std::to_string(b.seq_len) +
                                      " exceeds position capacity " +
                                      std::to_string(cfg_.max_seq_len));
    }
  }

  Tensor layer(const Tensor& x, std::size_t l, const Batch& b,
               const std::vector<std::uint8_t>* mask, const ForwardOptions& opt) const {
    const std::string p = "layer" + std::to_string(l) + ".";
    auto P = [&](const char* n) -> const Tensor& { return param(p + n); };
    AttentionWeights w{P("attn.q.weight"), P("attn.q.bias"), P("attn.k.weight"), P("attn.k.bias"),
                       P("attn.v.weight"), P("attn.v.bias"), P("attn.out.weight"), P("attn.out.bias")};
    auto ln = [&](const Tensor& t, const char* name) {
      return ops::layer_norm(t, param(p + name + ".gain"), param(p + name + ".bias"), cfg_.ln_eps);
    };
    auto ffn = [&](const Tensor& t) {
      Tensor u = detail::site(opt, p, "ffn.in", detail::linear(t, P("ffn.in.weight"), P("ffn.in.bias")));
      u = detail::site(opt, p, "ffn.act", ops::gelu(u));
      u = detail::site(opt, p, "ffn.out", detail::linear(u, P("ffn.out.weight"), P("ffn.out.bias")));
      return detail::dropout(u, cfg_.dropout, opt);
    };
    const std::optional<std::size_t> t_pre = cfg_.max_seq_len;
    if (post_norm()) {
      Tensor h = attention_layer(x, x, b.batch_size, b.seq_len, w, cfg_.n_heads, cfg_.softmax, mask,
                                 t_pre, opt, p, cfg_.dropout);
      h = detail::site(opt, p, "residual1", h);
      h = detail::site(opt, p, "ln1", ln(h, "ln1"));
      Tensor y = detail::site(opt, p, "residual2", ops::add(h, ffn(h)));
      return detail::site(opt, p, "ln2", ln(y, "ln2"));
    }
    Tensor a = detail::site(opt, p, "ln1", ln(x, "ln1"));
    Tensor h = attention_layer(a, x, b.batch_size, b.seq_len, w, cfg_.n_heads, cfg_.softmax, mask,
                               t_pre, opt, p, cfg_.dropout);
    h = detail::site(opt, p, "residual1", h);
    Tensor f = detail::site(opt, p, "ln2", ln(h, "ln2"));
    return detail::site(opt, p, "residual2", ops::add(h, ffn(f)));
  }

  ModelConfig cfg_;
  std::vector<NamedParam> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::optional<Tensor> output_weight_;
};

/// Every activation site of one forward pass, in forward order.
struct ActivationTrace {
  std::vector<std::string> sites;
  std::vector<Tensor> values;

  const Tensor& at(const std::string& site) const {
    for (std::size_t i = 0; i < sites.size(); ++i) {
      if (sites[i] == site) return values[i];
    }
    throw std::out_of_range("no activation site " + site);
  }
};

namespace detail {
struct CaptureHook : ActivationHook {
  ActivationTrace trace;
  Tensor on_site(const std::string& site, const Tensor& x) override {
    trace.sites.push_back(site);
    trace.values.push_back(x.detached_copy());
    return x;
  }
};
}  // namespace detail

/// Runs `batch` (no tape) and records every activation site.
inline ActivationTrace capture_activations(const Transformer& model, const Batch& batch) {
  NoRecordScope no_tape;
  detail::CaptureHook hook;
  model.logits(batch, {.hook = &hook, .dropout_rng = nullptr});
  return std::move(hook.trace);
}

struct AttentionMap {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t sample = 0;
  std::size_t T = 0;
  std::vector<double> probs;  // T x T, row = query
  /// Largest column mass divided by T.
  double concentration = 0.0;
};

inline double attention_concentration(std::span<const double> probs, std::size_t T) {
  double best = 0.0;
  for (std::size_t k = 0; k < T; ++k) {
    double col = 0.0;
    for (std::size_t q = 0; q < T; ++q) col += probs[q * T + k];
    best = std::max(best, col);
  }
  return best / static_cast<double>(T);
}

/// Attention probabilities of every layer, head and sample of `batch`.
inline std::vector<AttentionMap> export_attention(const Transformer& model, const Batch& batch) {
  const ActivationTrace trace = capture_activations(model, batch);
  const auto& cfg = model.config();
  const std::size_t T = batch.seq_len;
  std::vector<AttentionMap> out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const Tensor& p = trace.at("layer" + std::to_string(l) + ".attn.probs");
    for (std::size_t b = 0; b < batch.batch_size; ++b) {
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        AttentionMap m{l, h, b, T, {}, 0.0};
        auto src = p.data().subspan(((b * cfg.n_heads) + h) * T * T, T * T);
        m.probs.assign(src.begin(), src.end());
        m.concentration = attention_concentration(m.probs, T);
        out.push_back(std::move(m));
      }
    }
  }
  return out;
}

}  // namespace olab
