#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "aird/bn_state.hpp"
#include "aird/nn.hpp"

namespace aird::facebn {

struct AdaptConfig {
  double gamma = 0.1;
  std::size_t batch_size = 32;
  std::size_t num_batches = 0;  // 0: one full pass over the stream source
  std::set<std::string> layer_filter;
  bool unbiased = false;

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("adapt: gamma must lie in [0, 1]");
    if (batch_size < 2) throw BatchSizeError("adapt: batch_size must be >= 2");
  }
};

// Yields the next batch, or nullopt when exhausted.
using BatchStream = std::function<std::optional<Tensor>()>;

/// Batches of `batch_size` rows from `images` [N×…] in a seeded shuffled
/// order. num_batches = 0 gives one pass (trailing rows that would form a
/// batch smaller than 2 are dropped); larger values wrap around with a fresh
/// shuffle per pass.
inline BatchStream shuffled_stream(const Tensor& images, std::size_t batch_size, std::size_t num_batches,
                                   std::uint64_t seed) {
  const std::size_t n = images.dim(0), per = images.size() / n;
  if (batch_size < 2) throw BatchSizeError("adapt: batch_size must be >= 2");
  const std::size_t m = std::min(batch_size, n);
  const std::size_t one_pass = n / m + (n % m >= 2 ? 1 : 0);
  const std::size_t total = num_batches ? num_batches : one_pass;
  struct State {
    Rng rng;
    std::vector<std::size_t> order;
    std::size_t pos = 0, emitted = 0;
  };
  auto st = std::make_shared<State>(State{Rng(seed, "adapt"), {}, 0, 0});
  return [=, &images]() -> std::optional<Tensor> {
    if (st->emitted == total) return std::nullopt;
    if (st->order.empty() || st->pos >= n || (n - st->pos < 2)) {
      st->order.resize(n);
      for (std::size_t i = 0; i < n; ++i) st->order[i] = i;
      st->rng.shuffle(st->order);
      st->pos = 0;
    }
    const std::size_t take = std::min(m, n - st->pos);
    Shape s = images.shape();
    s[0] = take;
    Tensor b(s);
    for (std::size_t k = 0; k < take; ++k) {
      const double* src = images.data().data() + st->order[st->pos + k] * per;
      std::copy(src, src + per, b.data().data() + k * per);
    }
    st->pos += take;
    ++st->emitted;
    return b;
  };
}

/// Forward every stream batch in adapt mode. Only BN running statistics change.
inline Network adapt_network(Network net, const BatchStream& stream, const AdaptConfig& cfg) {
  cfg.validate();
  if (net.bn().empty()) throw ConfigError("adapt: network has no BN layers");
  for (const auto& name : cfg.layer_filter)
    if (!net.bn().count(name)) throw ConfigError("adapt: unknown BN layer '" + name + "'");
  ForwardOptions opt;
  opt.mode = BNMode::adapt;
  opt.adapt = {cfg.gamma, cfg.unbiased, cfg.layer_filter};
  std::size_t seen = 0;
  while (auto batch = stream()) {
    if (cfg.num_batches && seen == cfg.num_batches) break;
    Graph g;
    net.forward(g, *batch, opt);
    ++seen;
  }
  if (seen == 0) throw ConfigError("adapt: empty batch stream");
  return net;
}

/// Per-channel statistics of each BN layer's input over the whole of `images`
/// (biased variance), computed from the network's own forward pass.
inline std::map<std::string, ChannelMoments> activation_stats(const Network& net, const Tensor& images) {
  // A γ=0 adapt pass over one batch holding every image makes the running
  // statistics equal to the moments of that batch at every layer.
  Network probe = net;
  AdaptConfig cfg;
  cfg.gamma = 0.0;
  cfg.batch_size = std::max<std::size_t>(2, images.dim(0));
  bool done = false;
  Network adapted = adapt_network(probe, [&]() -> std::optional<Tensor> {
    if (done) return std::nullopt;
    done = true;
    return images;
  }, cfg);
  std::map<std::string, ChannelMoments> out;
  for (const auto& [name, s] : adapted.bn()) out[name] = {s.running_mean, s.running_var, images.dim(0)};
  return out;
}

// |μ − μ*| + |σ − σ*| per channel.
inline std::vector<double> channel_distance(const BNState& s, const ChannelMoments& ref) {
  std::vector<double> d(s.channels());
  for (std::size_t c = 0; c < d.size(); ++c)
    d[c] = std::abs(s.running_mean[c] - ref.mean[c]) + std::abs(std::sqrt(s.running_var[c]) - std::sqrt(ref.var[c]));
  return d;
}

struct ShiftSummary {
  std::size_t channels = 0;
  std::size_t improved = 0;  // channels whose distance to the reference decreased
  double fraction() const { return channels ? static_cast<double>(improved) / static_cast<double>(channels) : 0.0; }
};

/// Diagnostic of an adaptation: per-layer mean/var shift and, when a
/// reference is given, the distance of before/after stats to it.
inline nlohmann::json diagnostic(const Network& before, const Network& after,
                                 const std::map<std::string, ChannelMoments>* reference = nullptr,
                                 ShiftSummary* summary = nullptr) {
  nlohmann::json layers = nlohmann::json::array();
  ShiftSummary sum;
  for (const auto& [name, b] : before.bn()) {
    const BNState& a = after.bn().at(name);
    double dmean = 0.0, dvar = 0.0;
    for (std::size_t c = 0; c < b.channels(); ++c) {
      dmean += std::abs(a.running_mean[c] - b.running_mean[c]);
      dvar += std::abs(a.running_var[c] - b.running_var[c]);
    }
    const double ch = static_cast<double>(b.channels());
    nlohmann::json l = {{"layer", name},
                        {"channels", b.channels()},
                        {"mean_before", b.running_mean},
                        {"var_before", b.running_var},
                        {"mean_after", a.running_mean},
                        {"var_after", a.running_var},
                        {"mean_abs_shift", dmean / ch},
                        {"var_abs_shift", dvar / ch}};
    if (reference) {
      const auto& ref = reference->at(name);
      const auto db = channel_distance(b, ref), da = channel_distance(a, ref);
      std::size_t improved = 0;
      double sb = 0.0, sa = 0.0;
      for (std::size_t c = 0; c < db.size(); ++c) {
        improved += da[c] < db[c];
        sb += db[c];
        sa += da[c];
      }
      l["distance_before"] = sb / ch;
      l["distance_after"] = sa / ch;
      l["channels_improved"] = improved;
      sum.channels += db.size();
      sum.improved += improved;
    }
    layers.push_back(std::move(l));
  }
  if (summary) *summary = sum;
  nlohmann::json j = {{"layers", layers}};
  if (reference) j["fraction_improved"] = sum.fraction();
  return j;
}

}  // namespace aird::facebn
