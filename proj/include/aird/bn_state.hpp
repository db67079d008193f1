#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "aird/tensor.hpp"

namespace aird {

enum class BNMode { train, eval, adapt };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Running statistics of one batch-norm layer. The learned scale/shift live in
/// the owning network's parameter map.
struct BNState {
  std::vector<double> running_mean;
  std::vector<double> running_var;

  explicit BNState(std::size_t channels = 0) : running_mean(channels, 0.0), running_var(channels, 1.0) {}
  std::size_t channels() const { return running_mean.size(); }
  friend bool operator==(const BNState&, const BNState&) = default;
};

struct ChannelMoments {
  std::vector<double> mean;
  std::vector<double> var;  // divisor count, or count-1 when unbiased
  std::size_t count = 0;    // elements per channel
};

// Per-channel moments of x [B×C×…] over every axis but the channel axis.
inline ChannelMoments channel_moments(const Tensor& x, bool unbiased = false) {
  if (x.rank() < 2) throw DimensionError("channel_moments: expected B×C×…, got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1), inner = x.size() / (b * c);
  ChannelMoments m{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0), b * inner};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t p = 0; p < inner; ++p) s += x[(i * c + ch) * inner + p];
    const double mu = s / static_cast<double>(m.count);
    double ss = 0.0;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t p = 0; p < inner; ++p) {
        const double d = x[(i * c + ch) * inner + p] - mu;
        ss += d * d;
      }
    m.mean[ch] = mu;
    m.var[ch] = ss / static_cast<double>(unbiased ? m.count - 1 : m.count);
  }
  return m;
}

namespace facebn {

/// One momentum update of the running statistics from an unlabeled batch:
///   mean <- gamma * mean + (1 - gamma) * batch_mean
///   var  <- gamma * var  + (1 - gamma) * batch_var
/// batch_var uses divisor M unless `unbiased` is set.
inline void adapt_step(BNState& state, const Tensor& batch, double gamma, bool unbiased = false) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("adapt_step: gamma must lie in [0, 1]");
  if (batch.rank() < 2) throw DimensionError("adapt_step: expected M×C×…, got " + to_string(batch.shape()));
  if (batch.dim(0) < 2)
    throw BatchSizeError("adapt_step: batch size " + std::to_string(batch.dim(0)) + " < 2");
  if (batch.dim(1) != state.channels())
    throw DimensionError("adapt_step: batch has " + std::to_string(batch.dim(1)) + " channels, state has " +
                         std::to_string(state.channels()));
  const ChannelMoments m = channel_moments(batch, unbiased);
  for (std::size_t c = 0; c < state.channels(); ++c) {
    state.running_mean[c] = gamma * state.running_mean[c] + (1.0 - gamma) * m.mean[c];
    state.running_var[c] = gamma * state.running_var[c] + (1.0 - gamma) * m.var[c];
  }
}

}  // namespace facebn
}  // namespace aird
