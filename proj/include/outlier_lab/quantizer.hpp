#pragma once

// Simulated uniform affine quantization:
//
//   X_q = clip(round(X / s) + z, 0, 2^b - 1),   X_hat = s * (X_q - z)
//   s = (max - min) / (2^b - 1),   z = -round(min / s)
//
// round() is round-half-away-from-zero. The range is widened to contain 0 so
// that z always lands inside [0, 2^b - 1]. Per-tensor only.

#include "outlier_lab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace olab {

enum class RangeEstimator { MinMax, MSE, RunningMinMax, Percentile };
enum class QuantTarget { Weight, Activation };

inline std::string to_string(RangeEstimator e) {
  switch (e) {
    case RangeEstimator::MinMax: return "minmax";
    case RangeEstimator::MSE: return "mse";
    case RangeEstimator::RunningMinMax: return "running_minmax";
    case RangeEstimator::Percentile: return "percentile";
  }
  return "?";
}

inline std::string to_string(QuantTarget t) {
  return t == QuantTarget::Weight ? "weight" : "activation";
}

struct QuantParams {
  double scale = 1.0;
  std::int64_t zero_point = 0;
  /// Set when the estimated range collapsed to one value.
  bool degenerate = false;
};

struct QuantizerSpec {
  int bits = 8;
  double scale = 1.0;
  std::int64_t zero_point = 0;
  RangeEstimator estimator = RangeEstimator::MinMax;
  QuantTarget target = QuantTarget::Weight;
  bool degenerate = false;

  std::int64_t max_level() const { return (std::int64_t{1} << bits) - 1; }

  static QuantizerSpec from(const QuantParams& p, int bits, RangeEstimator est, QuantTarget target) {
    return {bits, p.scale, p.zero_point, est, target, p.degenerate};
  }
};

struct QuantizedTensor {
  std::vector<std::int64_t> values;
  QuantizerSpec spec;
  Shape shape;
};

namespace detail {
inline void check_bits(int bits) {
  if (bits < 2 || bits > 31) throw std::invalid_argument("bit-width must be in [2, 31]");
}
}  // namespace detail

/// Scale and zero-point mapping [lo, hi] onto the b-bit grid.
///
/// A collapsed range lo == hi == c uses s = |c| (1 for c == 0) and z = 0 for
/// c >= 0, z = 1 for c < 0, which reconstructs c exactly.
inline QuantParams params_from_range(double lo, double hi, int bits) {
  detail::check_bits(bits);
  if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi) {
    throw std::invalid_argument("quantization range must be finite with lo <= hi");
  }
  if (lo == hi) {
    if (lo == 0.0) return {1.0, 0, true};
    return {std::abs(lo), lo > 0.0 ? 0 : 1, true};
  }
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  const auto levels = static_cast<double>((std::int64_t{1} << bits) - 1);
  const double s = (hi - lo) / levels;
  auto z = static_cast<std::int64_t>(-std::round(lo / s));
  z = std::clamp<std::int64_t>(z, 0, (std::int64_t{1} << bits) - 1);
  return {s, z, false};
}

inline std::pair<double, double> min_max(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("range estimation on empty tensor");
  auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  if (!std::isfinite(*lo) || !std::isfinite(*hi)) {
    throw std::invalid_argument("range estimation on non-finite values");
  }
  return {*lo, *hi};
}

inline QuantParams minmax_params(std::span<const double> x, int bits) {
  auto [lo, hi] = min_max(x);
  return params_from_range(lo, hi, bits);
}

inline std::int64_t quantize_value(double x, const QuantizerSpec& spec) {
  const double q = std::round(x / spec.scale) + static_cast<double>(spec.zero_point);
  return static_cast<std::int64_t>(std::clamp(q, 0.0, static_cast<double>(spec.max_level())));
}

inline double dequantize_value(std::int64_t q, const QuantizerSpec& spec) {
  return spec.scale * static_cast<double>(q - spec.zero_point);
}

inline QuantizedTensor quantize(std::span<const double> x, const Shape& shape,
                                const QuantizerSpec& spec) {
  if (!(spec.scale > 0.0)) throw std::invalid_argument("quantize: scale must be > 0");
  ops::detail::require_finite("quantize", x);
  QuantizedTensor out{std::vector<std::int64_t>(x.size()), spec, shape};
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = quantize_value(x[i], spec);
  return out;
}

inline QuantizedTensor quantize(const Tensor& x, const QuantizerSpec& spec) {
  return quantize(x.data(), x.shape(), spec);
}

inline Tensor dequantize(const QuantizedTensor& xq) {
  std::vector<double> out(xq.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dequantize_value(xq.values[i], xq.spec);
  return Tensor(xq.shape, std::move(out));
}

/// dequantize(quantize(x)) computed in place. No gradient.
inline void fake_quant_inplace(std::span<double> x, const QuantizerSpec& spec) {
  if (!(spec.scale > 0.0)) throw std::invalid_argument("fake_quant: scale must be > 0");
  ops::detail::require_finite("fake_quant", x);
  for (double& v : x) v = dequantize_value(quantize_value(v, spec), spec);
}

inline Tensor fake_quant(const Tensor& x, const QuantizerSpec& spec) {
  Tensor y = x.detached_copy();
  fake_quant_inplace(y.mutable_data(), spec);
  return y;
}

inline double quantization_sse(std::span<const double> x, const QuantizerSpec& spec) {
  double sse = 0.0;
  for (double v : x) {
    const double d = dequantize_value(quantize_value(v, spec), spec) - v;
    sse += d * d;
  }
  return sse;
}

struct MseSearchResult {
  QuantParams params;
  double shrink = 1.0;  // selected c
  double sse = 0.0;     // at the selected c
  std::vector<double> candidates;
};

/// Grid search over shrunken ranges [c * min, c * max], c uniform on
/// [0.3, 1.0] with `grid` points, minimizing the fake-quant squared error.
/// Ties go to the larger c.
inline MseSearchResult mse_estimator(std::span<const double> w, int bits, int grid = 64) {
  if (grid < 2) throw std::invalid_argument("mse_estimator: grid must be >= 2");
  auto [lo, hi] = min_max(w);
  MseSearchResult best;
  best.sse = std::numeric_limits<double>::infinity();
  for (int i = 0; i < grid; ++i) {
    const double c = (i == grid - 1) ? 1.0 : 0.3 + 0.7 * static_cast<double>(i) / (grid - 1);
    best.candidates.push_back(c);
    const QuantParams p = params_from_range(c * lo, c * hi, bits);
    const double sse =
        quantization_sse(w, QuantizerSpec::from(p, bits, RangeEstimator::MSE, QuantTarget::Weight));
    if (sse <= best.sse) {
      best.sse = sse;
      best.shrink = c;
      best.params = p;
    }
  }
  return best;
}

struct CalibrationState {
  double running_min = 0.0;
  double running_max = 0.0;
  double momentum = 0.9;
  std::size_t batches_seen = 0;
  std::vector<double> sample_buffer;  // percentile mode only
};

inline CalibrationState running_minmax_update(CalibrationState state,
                                              std::span<const double> batch) {
  if (!(state.momentum > 0.0 && state.momentum < 1.0)) {
    throw std::invalid_argument("running_minmax_update: momentum must be in (0, 1)");
  }
  if (batch.empty()) throw std::invalid_argument("running_minmax_update: empty batch");
  auto [lo, hi] = min_max(batch);
  if (state.batches_seen == 0) {
    state.running_min = lo;
    state.running_max = hi;
  } else {
    const double m = state.momentum;
    state.running_min = m * state.running_min + (1.0 - m) * lo;
    state.running_max = m * state.running_max + (1.0 - m) * hi;
  }
  ++state.batches_seen;
  return state;
}

namespace detail {
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(i);
  return sorted[i] + frac * (sorted[i + 1] - sorted[i]);
}
}  // namespace detail

/// ((100 - p)-th, p-th) percentiles with linear interpolation between order
/// statistics.
inline std::pair<double, double> percentile_range(std::span<const double> samples, double p) {
  if (samples.empty()) throw std::invalid_argument("percentile_range: empty samples");
  if (!(p > 50.0 && p <= 100.0)) throw std::invalid_argument("percentile_range: p must be in (50, 100]");
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  return {detail::sorted_quantile(sorted, (100.0 - p) / 100.0),
          detail::sorted_quantile(sorted, p / 100.0)};
}

}  // namespace olab
