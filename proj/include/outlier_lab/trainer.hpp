#pragma once

// Pretraining loop: linear warmup/decay schedule, global grad-norm clipping
// and AdamW with decoupled weight decay.
//
// Everything random is a pure function of (seed, step): the batch for a step
// comes from a per-epoch permutation seeded by derive_seed(seed, "data",
// epoch), masking from derive_seed(seed, "mask", step). Resuming from a
// checkpoint therefore replays the exact same trajectory.

#include "outlier_lab/data.hpp"
#include "outlier_lab/model.hpp"
#include "outlier_lab/rng.hpp"
#include "outlier_lab/softmax.hpp"
#include "outlier_lab/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace olab {

struct TrainConfig {
  std::size_t max_steps = 2000;
  std::size_t warmup_steps = 200;
  std::size_t batch_size = 32;
  double peak_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (max_steps == 0) throw ConfigError("train.max_steps", "must be >= 1");
    if (warmup_steps >= max_steps) throw ConfigError("train.warmup_steps", "must be < max_steps");
    if (batch_size == 0) throw ConfigError("train.batch_size", "must be >= 1");
    if (!(peak_lr > 0.0)) throw ConfigError("train.peak_lr", "must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1", "must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2", "must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("train.eps", "must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
    if (!(max_grad_norm > 0.0)) throw ConfigError("train.max_grad_norm", "must be > 0");
  }
};

/// Linear ramp 0 -> peak over warmup_steps, then linear decay to 0 at
/// max_steps.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  const auto s = static_cast<double>(step);
  if (step < cfg.warmup_steps) return cfg.peak_lr * s / static_cast<double>(cfg.warmup_steps);
  if (step >= cfg.max_steps) return 0.0;
  return cfg.peak_lr * static_cast<double>(cfg.max_steps - step) /
         static_cast<double>(cfg.max_steps - cfg.warmup_steps);
}

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// First and second moments per parameter, in parameter order.
struct AdamState {
  std::size_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState for_params(const std::vector<NamedParam>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.tensor.numel(), 0.0);
      s.v.emplace_back(p.tensor.numel(), 0.0);
    }
    return s;
  }
};

inline double global_grad_norm(const std::vector<NamedParam>& params) {
  double ss = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) ss += g * g;
  }
  return std::sqrt(ss);
}

/// Rescales all gradients so their global norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::vector<NamedParam>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= k;
    }
  }
  return norm;
}

/// One AdamW update with learning rate lr: p -= lr * wd * p (decayed
/// parameters only), then p -= lr * m_hat / (sqrt(v_hat) + eps).
inline void adamw_update(std::vector<NamedParam>& params, AdamState& st, double lr,
                         const TrainConfig& cfg) {
  if (st.m.size() != params.size()) throw std::logic_error("adamw_update: state/parameter mismatch");
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.tensor.has_grad()) continue;
    auto w = p.tensor.mutable_data();
    auto g = p.tensor.grad();
    auto& m = st.m[i];
    auto& v = st.v[i];
    const double decay = p.decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      w[j] -= decay * w[j];
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.eps);
    }
  }
}

struct StepResult {
  std::size_t step = 0;  // number of updates applied so far
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
};

/// Forward per objective, backward, clip, AdamW. `labels` is used for MLM
/// only. Throws DivergenceError when the loss or gradient is not finite.
inline StepResult train_step(Transformer& model, const Batch& batch,
                             std::span<const std::int32_t> labels, AdamState& opt,
                             const TrainConfig& cfg, std::size_t step, Rng* dropout_rng = nullptr) {
  auto& params = model.parameters();
  for (auto& p : params) p.tensor.zero_grad();
  Tape tape;
  Tensor loss;
  {
    RecordingScope rec(tape);
    ForwardOptions fo{.hook = nullptr, .dropout_rng = dropout_rng};
    loss = model.config().objective == Objective::MLM ? model.forward_mlm(batch, labels, fo).loss
                                                      : model.forward_clm(batch, fo).loss;
  }
  StepResult r;
  r.step = step + 1;
  r.loss = loss.item();
  if (!std::isfinite(r.loss)) throw DivergenceError(r.step, "non-finite loss");
  tape.backward(loss);
  r.grad_norm = clip_grad_norm(params, cfg.max_grad_norm);
  if (!std::isfinite(r.grad_norm)) throw DivergenceError(r.step, "non-finite gradient norm");
  r.lr = lr_at(step + 1, cfg);
  adamw_update(params, opt, r.lr, cfg);
  return r;
}

/// Deterministic batch source: step s reads positions [s*B, (s+1)*B) of the
/// endless stream formed by concatenating seeded per-epoch permutations.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t n_sequences, std::size_t batch_size, std::uint64_t seed)
      : n_(n_sequences), b_(batch_size), seed_(seed) {
    if (n_ == 0) throw DataError("training set is empty");
  }

  std::vector<std::size_t> indices(std::size_t step) {
    std::vector<std::size_t> out;
    out.reserve(b_);
    for (std::size_t k = 0; k < b_; ++k) {
      const std::size_t flat = step * b_ + k;
      const std::size_t epoch = flat / n_;
      if (epoch != epoch_ || perm_.empty()) {
        perm_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
        Rng rng(derive_seed(seed_, "data", epoch));
        rng.shuffle(perm_);
        epoch_ = epoch;
      }
      out.push_back(perm_[flat % n_]);
    }
    return out;
  }

 private:
  std::size_t n_;
  std::size_t b_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

class Trainer {
 public:
  Trainer(Transformer model, PackedDataset train, TrainConfig cfg)
      : model_(std::move(model)),
        data_(std::move(train)),
        cfg_(cfg),
        schedule_(data_.size(), cfg.batch_size, cfg.seed),
        opt_(AdamState::for_params(model_.parameters())) {
    cfg_.validate();
    if (data_.seq_len > model_.config().max_seq_len) {
      throw ConfigError("data.seq_len", "longer than model.max_seq_len");
    }
  }

  /// Continues from a saved state (`step` updates already applied).
  void restore(AdamState opt, std::size_t step) {
    if (opt.m.size() != model_.parameters().size()) {
      throw std::invalid_argument("optimizer state does not match the model");
    }
    opt_ = std::move(opt);
    step_ = step;
  }

  Transformer& model() { return model_; }
  const Transformer& model() const { return model_; }
  const AdamState& optimizer() const { return opt_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t step() const { return step_; }
  bool done() const { return step_ >= cfg_.max_steps; }

  /// Batch (and MLM labels) consumed by update number step+1.
  std::pair<Batch, std::vector<std::int32_t>> batch_for(std::size_t step) {
    const auto idx = schedule_.indices(step);
    Batch b{{}, idx.size(), data_.seq_len};
    b.ids.reserve(idx.size() * data_.seq_len);
    for (auto i : idx) {
      auto s = data_.sequence(i);
      b.ids.insert(b.ids.end(), s.begin(), s.end());
    }
    std::vector<std::int32_t> labels;
    if (model_.config().objective == Objective::MLM) {
      Rng rng(derive_seed(cfg_.seed, "mask", step));
      auto m = mask_batch(b.ids, model_.config().vocab_size, model_.config().mlm_prob, rng);
      b.ids = std::move(m.corrupted);
      labels = std::move(m.labels);
      // a batch with nothing selected still needs one target
      if (m.positions.empty()) {
        labels[0] = b.ids[0];
        b.ids[0] = Vocab::kMask;
      }
    }
    return {std::move(b), std::move(labels)};
  }

  StepResult step_once() {
    auto [batch, labels] = batch_for(step_);
    Rng dropout(derive_seed(cfg_.seed, "dropout", step_));
    StepResult r = train_step(model_, batch, labels, opt_, cfg_, step_, &dropout);
    ++step_;
    return r;
  }

  /// Runs until max_steps (or `until`), calling `on_step` after each update.
  void run(const std::function<void(const StepResult&)>& on_step = {},
           std::size_t until = static_cast<std::size_t>(-1)) {
    const std::size_t stop = std::min(until, cfg_.max_steps);
    while (step_ < stop) {
      StepResult r = step_once();
      if (on_step) on_step(r);
    }
  }

 private:
  Transformer model_;
  PackedDataset data_;
  TrainConfig cfg_;
  BatchSchedule schedule_;
  AdamState opt_;
  std::size_t step_ = 0;
};

}  // namespace olab
