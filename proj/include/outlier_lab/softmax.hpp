#pragma once

// Attention normalizers: vanilla softmax, clipped softmax (CS) and normalized
// clipped softmax (NCS), bidirectional and causal.
//
//   CS(x)  = clip((zeta - gamma) * softmax(x) + gamma, 0, 1)
//   NCS(x) = CS(x) with gamma = (beta - zeta) / (T - 1), so that the unclipped
//            row mass zeta + (T - 1) * gamma equals beta for every row length T.
//
// For causal attention T is the number of attendable keys of the query row
// (its 1-based position).

#include "outlier_lab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace olab {

enum class SoftmaxVariant { Vanilla, Clipped, NormalizedClipped };
enum class AttentionDirection { Bidirectional, Causal };

inline std::string to_string(SoftmaxVariant v) {
  switch (v) {
    case SoftmaxVariant::Vanilla: return "vanilla";
    case SoftmaxVariant::Clipped: return "cs";
    case SoftmaxVariant::NormalizedClipped: return "ncs";
  }
  return "?";
}

inline std::string to_string(AttentionDirection d) {
  return d == AttentionDirection::Causal ? "causal" : "bidirectional";
}

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct SoftmaxConfig {
  SoftmaxVariant variant = SoftmaxVariant::Vanilla;
  double zeta = 1.0;
  std::optional<double> gamma;
  std::optional<double> alpha;
  std::optional<double> beta;
  AttentionDirection direction = AttentionDirection::Bidirectional;

  static SoftmaxConfig vanilla(AttentionDirection dir = AttentionDirection::Bidirectional) {
    return {SoftmaxVariant::Vanilla, 1.0, std::nullopt, std::nullopt, std::nullopt, dir};
  }
  static SoftmaxConfig clipped(double zeta, double gamma,
                               AttentionDirection dir = AttentionDirection::Bidirectional) {
    return {SoftmaxVariant::Clipped, zeta, gamma, std::nullopt, std::nullopt, dir};
  }
  /// CS with gamma = -alpha / T_pre, resolved against the model's max length.
  static SoftmaxConfig clipped_alpha(double zeta, double alpha,
                                     AttentionDirection dir = AttentionDirection::Bidirectional) {
    return {SoftmaxVariant::Clipped, zeta, std::nullopt, alpha, std::nullopt, dir};
  }
  static SoftmaxConfig normalized(double zeta, double beta,
                                  AttentionDirection dir = AttentionDirection::Bidirectional) {
    return {SoftmaxVariant::NormalizedClipped, zeta, std::nullopt, std::nullopt, beta, dir};
  }

  /// Throws ConfigError naming the offending `softmax.*` key.
  void validate() const {
    switch (variant) {
      case SoftmaxVariant::Vanilla:
        if (gamma || alpha || beta) {
          throw ConfigError("softmax", "vanilla takes no gamma/alpha/beta");
        }
        break;
      case SoftmaxVariant::Clipped:
        if (zeta < 1.0) throw ConfigError("softmax.zeta", "clipped softmax requires zeta >= 1");
        if (beta) throw ConfigError("softmax.beta", "not used by clipped softmax");
        if (gamma.has_value() == alpha.has_value()) {
          throw ConfigError("softmax.gamma", "clipped softmax needs exactly one of gamma, alpha");
        }
        if (gamma && *gamma > 0.0) throw ConfigError("softmax.gamma", "must be <= 0");
        if (alpha && *alpha < 0.0) throw ConfigError("softmax.alpha", "must be >= 0");
        break;
      case SoftmaxVariant::NormalizedClipped:
        if (zeta < 1.0) throw ConfigError("softmax.zeta", "normalized clipped softmax requires zeta >= 1");
        if (gamma || alpha) throw ConfigError("softmax.gamma", "not used by normalized clipped softmax");
        if (!beta) throw ConfigError("softmax.beta", "required by normalized clipped softmax");
        if (*beta > zeta) throw ConfigError("softmax.beta", "must be <= zeta");
        break;
    }
  }
};

struct NormalizationContext {
  std::size_t T = 1;
};

inline std::vector<double> vanilla_softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("vanilla_softmax: empty input");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

inline double gamma_from_alpha(double alpha, std::size_t T) {
  if (T == 0) throw std::invalid_argument("gamma_from_alpha: T must be >= 1");
  return -alpha / static_cast<double>(T);
}

/// Row mass of the unclipped CS transform: zeta + (T - 1) * gamma.
inline double cs_unclipped_sum(double zeta, double gamma, std::size_t T) {
  return zeta + (static_cast<double>(T) - 1.0) * gamma;
}

/// Solves zeta + (T - 1) * gamma = beta. A single-entry row has no free
/// gamma; it is defined as 0 there.
inline double ncs_gamma(double zeta, double beta, std::size_t T) {
  if (T < 2) return 0.0;
  return (beta - zeta) / (static_cast<double>(T) - 1.0);
}

/// The affine stretch before clipping, (zeta - gamma) * softmax + gamma.
inline std::vector<double> clipped_softmax_preclip(std::span<const double> logits, double zeta,
                                                   double gamma) {
  auto p = vanilla_softmax(logits);
  for (double& v : p) v = (zeta - gamma) * v + gamma;
  return p;
}

inline std::vector<double> clipped_softmax(std::span<const double> logits, double zeta,
                                           double gamma) {
  auto p = clipped_softmax_preclip(logits, zeta, gamma);
  for (double& v : p) v = std::clamp(v, 0.0, 1.0);
  return p;
}

inline std::vector<double> ncs_softmax(std::span<const double> logits, double zeta, double beta,
                                       NormalizationContext ctx) {
  if (ctx.T == 0) throw std::invalid_argument("ncs_softmax: T must be >= 1");
  if (ctx.T > logits.size()) {
    throw std::invalid_argument("ncs_softmax: T exceeds row length");
  }
  return clipped_softmax(logits, zeta, ncs_gamma(zeta, beta, ctx.T));
}

/// Lower-triangular (including diagonal) attendable mask for T x T causal
/// attention; 1 = masked (future key).
inline std::vector<std::uint8_t> causal_mask(std::size_t T) {
  std::vector<std::uint8_t> m(T * T, 0);
  for (std::size_t q = 0; q < T; ++q) {
    for (std::size_t k = q + 1; k < T; ++k) m[q * T + k] = 1;
  }
  return m;
}

/// Row-wise attention normalization of `scores` ([..., Tq, Tk]).
///
/// `mask` (Tq x Tk, 1 = not attendable) is required for causal configs.
/// Vanilla fills masked scores with -inf before softmax. CS/NCS normalize over
/// the attendable entries only: softmax with masked entries at probability 0,
/// the affine stretch, then masked entries forced to 0. NCS uses the number of
/// attendable keys of each row as T. `pretrain_length` resolves CS alpha into
/// gamma = -alpha / T_pre. `preclip`, when given, receives the stretched
/// values before clipping (for inspection and gradient probes).
inline Tensor attention_normalize(const Tensor& scores, const SoftmaxConfig& cfg,
                                  const std::vector<std::uint8_t>* mask = nullptr,
                                  std::optional<std::size_t> pretrain_length = std::nullopt,
                                  Tensor* preclip = nullptr) {
  if (scores.rank() < 2) {
    throw ShapeError("attention_normalize", "scores must be at least 2-D, got " +
                                                shape_str(scores.shape()));
  }
  const std::size_t tq = scores.dim(scores.rank() - 2);
  const std::size_t tk = scores.dim(scores.rank() - 1);
  if (cfg.direction == AttentionDirection::Causal && mask == nullptr) {
    throw ShapeError("attention_normalize", "causal attention requires a mask");
  }
  if (mask != nullptr && mask->size() != tq * tk) {
    throw ShapeError("attention_normalize", "mask of " + std::to_string(mask->size()) +
                                                " entries for " + std::to_string(tq) + "x" +
                                                std::to_string(tk) + " scores");
  }
  const Shape mask_shape{tq, tk};

  std::vector<std::size_t> row_len(tq, tk);
  if (mask != nullptr) {
    for (std::size_t q = 0; q < tq; ++q) {
      std::size_t n = 0;
      for (std::size_t k = 0; k < tk; ++k) n += (*mask)[q * tk + k] ? 0 : 1;
      if (n == 0) throw ShapeError("attention_normalize", "row with no attendable key");
      row_len[q] = n;
    }
  }

  Tensor masked = mask != nullptr
                      ? ops::masked_fill(scores, *mask, mask_shape,
                                         -std::numeric_limits<double>::infinity())
                      : scores;
  Tensor probs = ops::softmax(masked);
  if (cfg.variant == SoftmaxVariant::Vanilla) {
    if (preclip != nullptr) *preclip = probs;
    return probs;
  }

  double zeta = cfg.zeta;
  Tensor stretched;
  if (cfg.variant == SoftmaxVariant::Clipped) {
    double gamma = 0.0;
    if (cfg.gamma) {
      gamma = *cfg.gamma;
    } else if (cfg.alpha && pretrain_length) {
      gamma = gamma_from_alpha(*cfg.alpha, *pretrain_length);
    } else {
      throw ConfigError("softmax.alpha", "clipped softmax with alpha needs the pretraining length");
    }
    stretched = ops::affine(probs, zeta - gamma, gamma);
  } else {
    if (!cfg.beta) throw ConfigError("softmax.beta", "required by normalized clipped softmax");
    const bool uniform_rows = std::all_of(row_len.begin(), row_len.end(),
                                          [&](std::size_t n) { return n == row_len[0]; });
    if (uniform_rows) {
      const double gamma = ncs_gamma(zeta, *cfg.beta, row_len[0]);
      stretched = ops::affine(probs, zeta - gamma, gamma);
    } else {
      std::vector<double> factor(tq * tk);
      std::vector<double> offset(tq * tk);
      for (std::size_t q = 0; q < tq; ++q) {
        const double gamma = ncs_gamma(zeta, *cfg.beta, row_len[q]);
        std::fill_n(factor.begin() + q * tk, tk, zeta - gamma);
        std::fill_n(offset.begin() + q * tk, tk, gamma);
      }
      stretched = ops::add(ops::mul(probs, Tensor(mask_shape, std::move(factor))),
                           Tensor(mask_shape, std::move(offset)));
    }
  }
  if (mask != nullptr) stretched = ops::masked_fill(stretched, *mask, mask_shape, 0.0);
  if (preclip != nullptr) *preclip = stretched;
  return ops::clip(stretched, 0.0, 1.0);
}

}  // namespace olab
