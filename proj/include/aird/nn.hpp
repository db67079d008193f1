#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "aird/autograd.hpp"
#include "aird/bn_state.hpp"
#include "aird/rng.hpp"
#include "aird/tensor.hpp"

namespace aird {

struct AdaptOptions {
  double gamma = 0.1;
  bool unbiased = false;
  std::set<std::string> layer_filter;  // empty: every BN layer adapts
};

/// Batch normalization over x [B×C×…].
///   train: batch statistics; running stats updated with kBatchNormMomentum
///          (unbiased variance, matching the usual framework convention).
///   eval:  stored statistics; nothing mutated.
///   adapt: facebn::adapt_step on the incoming batch, then normalize with the
///          updated running statistics.
inline Var batchnorm(Var x, Var scale, Var shift, BNState& state, BNMode mode, const AdaptOptions& adapt = {}) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw DimensionError("batchnorm: expected B×C×…, got " + to_string(xv.shape()));
  const std::size_t b = xv.dim(0), c = xv.dim(1), inner = xv.size() / (b * c);
  if (c != state.channels() || scale.size() != c || shift.size() != c)
    throw DimensionError("batchnorm: channel mismatch, input " + to_string(xv.shape()) + " vs state " +
                         std::to_string(state.channels()));
  if (mode != BNMode::eval && b < 2)
    throw BatchSizeError("batchnorm: batch size " + std::to_string(b) + " < 2 needs stored statistics");

  std::vector<double> mu(c), inv_std(c);
  if (mode == BNMode::train) {
    const ChannelMoments m = channel_moments(xv);
    const double n = static_cast<double>(m.count);
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = m.mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(m.var[ch] + kBatchNormEps);
      state.running_mean[ch] = (1.0 - kBatchNormMomentum) * state.running_mean[ch] + kBatchNormMomentum * m.mean[ch];
      state.running_var[ch] =
          (1.0 - kBatchNormMomentum) * state.running_var[ch] + kBatchNormMomentum * m.var[ch] * n / (n - 1.0);
    }
  } else {
    if (mode == BNMode::adapt) facebn::adapt_step(state, xv, adapt.gamma, adapt.unbiased);
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = state.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + kBatchNormEps);
    }
  }

  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  const Tensor& sv = scale.value();
  const Tensor& tv = shift.value();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t k = (i * c + ch) * inner + p;
        xhat[k] = (xv[k] - mu[ch]) * inv_std[ch];
        out[k] = sv[ch] * xhat[k] + tv[ch];
      }

  Graph& g = *x.graph;
  const bool batch_stats = mode == BNMode::train;
  return g.record(std::move(out), {x.id, scale.id, shift.id},
                  [ix = x.id, is = scale.id, it = shift.id, b, c, inner, batch_stats, inv_std = std::move(inv_std),
                   xhat = std::move(xhat)](Graph& g, std::size_t self) {
                    const auto& go = g.grad_buffer(self);
                    const Tensor& sv = g.value(is);
                    std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
                    for (std::size_t i = 0; i < b; ++i)
                      for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t p = 0; p < inner; ++p) {
                          const std::size_t k = (i * c + ch) * inner + p;
                          sum_dy[ch] += go[k];
                          sum_dy_xhat[ch] += go[k] * xhat[k];
                        }
                    if (g.needs_grad(is)) {
                      auto& gs = g.grad_buffer(is);
                      for (std::size_t ch = 0; ch < c; ++ch) gs[ch] += sum_dy_xhat[ch];
                    }
                    if (g.needs_grad(it)) {
                      auto& gt = g.grad_buffer(it);
                      for (std::size_t ch = 0; ch < c; ++ch) gt[ch] += sum_dy[ch];
                    }
                    if (!g.needs_grad(ix)) return;
                    auto& gx = g.grad_buffer(ix);
                    const double n = static_cast<double>(b * inner);
                    for (std::size_t i = 0; i < b; ++i)
                      for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t p = 0; p < inner; ++p) {
                          const std::size_t k = (i * c + ch) * inner + p;
                          if (batch_stats) {
                            gx[k] += sv[ch] * inv_std[ch] *
                                     (go[k] - sum_dy[ch] / n - xhat[k] * sum_dy_xhat[ch] / n);
                          } else {
                            gx[k] += go[k] * sv[ch] * inv_std[ch];
                          }
                        }
                  });
}

// Cross-correlation with weights laid out [(C·k·k) × O]; output B×O×Ho×Wo.
inline Var conv2d(Var x, Var weight, std::size_t kernel, std::size_t stride = 1, std::size_t pad = 0) {
  const ConvGeometry geo = conv_geometry(x.shape(), kernel, stride, pad);
  if (weight.value().rank() != 2 || weight.value().dim(0) != geo.channels * kernel * kernel)
    throw DimensionError("conv2d: weight " + to_string(weight.shape()) + " does not match " +
                         std::to_string(geo.channels) + " input channels with kernel " + std::to_string(kernel));
  Var cols = im2col(x, kernel, stride, pad);
  return rows_to_nchw(matmul(cols, weight), geo.batch, geo.out_h(), geo.out_w());
}

// x [B×in] · W [in×out] + b [out]
inline Var linear(Var x, Var weight, Var bias) { return add(matmul(x, weight), bias); }

/// Additive angular margin on a cosine matrix [B×c]: the label column becomes
/// s·cos(θ + m), every other column s·cos θ. When θ + m would pass π the label
/// column falls back to s·(cos θ − m·sin m'), m' = π − m, keeping it monotone.
inline Var arc_margin(Var cosine, const std::vector<std::size_t>& labels, double margin, double s) {
  const Tensor& cv = cosine.value();
  detail::require_rank(cv, 2, "arc_margin");
  const std::size_t n = cv.dim(0), c = cv.dim(1);
  if (labels.size() != n) throw DimensionError("arc_margin: one label per row required");
  const double cos_m = std::cos(margin), sin_m = std::sin(margin);
  const double th = std::cos(std::numbers::pi - margin);
  const double mm = std::sin(std::numbers::pi - margin) * margin;
  Tensor out(cv.shape());
  std::vector<double> dlabel(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw DimensionError("arc_margin: label out of range");
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = s * cv[i * c + j];
    const double ct = std::clamp(cv[i * c + labels[i]], -1.0, 1.0);
    const double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
    if (margin == 0.0) {
      dlabel[i] = s;
    } else if (ct > th) {
      out[i * c + labels[i]] = s * (ct * cos_m - st * sin_m);
      dlabel[i] = s * (cos_m + sin_m * ct / std::max(st, kLogFloor));
    } else {
      out[i * c + labels[i]] = s * (ct - mm);
      dlabel[i] = s;
    }
  }
  return cosine.graph->record(std::move(out), {cosine.id},
                              [ic = cosine.id, labels, s, n, c, dlabel = std::move(dlabel)](Graph& g, std::size_t self) {
                                const auto& go = g.grad_buffer(self);
                                auto& gx = g.grad_buffer(ic);
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t j = 0; j < c; ++j)
                                    gx[i * c + j] += go[i * c + j] * (j == labels[i] ? dlabel[i] : s);
                              });
}

// Cosine between L2-normalized embeddings f [B×d] and class weights [c×d].
inline Var cosine_logits(Var f, Var class_weights) {
  return matmul(l2_normalize_rows(f), transpose(l2_normalize_rows(class_weights)));
}

inline Var margin_softmax_logits(Var f, Var class_weights, const std::vector<std::size_t>& labels, double margin,
                                 double s) {
  return arc_margin(cosine_logits(f, class_weights), labels, margin, s);
}

// ---------------------------------------------------------------------------

/// Conv blocks (3×3 conv → BN → ReLU → 2×2 max-pool) then a linear embedding
/// and a cosine classifier.
struct Architecture {
  std::size_t input_size = 32;
  std::vector<std::size_t> channels{8, 16, 32, 32};
  std::size_t embed_dim = 64;
  std::size_t num_classes = 16;
  double margin = 0.35;
  double scale = 16.0;

  static Architecture teacher(std::size_t classes) { return {32, {8, 16, 32, 32}, 64, classes, 0.35, 16.0}; }
  static Architecture student(std::size_t classes, std::size_t input = 8) {
    return {input, {16, 32, 32}, 64, classes, 0.35, 16.0};
  }

  std::size_t final_spatial() const { return input_size >> channels.size(); }

  void validate() const {
    if (channels.empty() || embed_dim == 0 || num_classes < 2 || input_size == 0)
      throw ConfigError("architecture: empty or degenerate layout");
    if (final_spatial() == 0 || (final_spatial() << channels.size()) != input_size)
      throw ConfigError("architecture: input " + std::to_string(input_size) + " not divisible by 2^" +
                        std::to_string(channels.size()));
    if (!(scale > 0.0) || margin < 0.0) throw ConfigError("architecture: scale must be positive, margin >= 0");
  }

  std::string canonical() const {
    std::ostringstream os;
    char buf[64];
    os << "input=" << input_size << ";channels=";
    for (std::size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
    os << ";embed=" << embed_dim << ";classes=" << num_classes;
    std::snprintf(buf, sizeof buf, ";margin=%.17g", margin);
    os << buf;
    std::snprintf(buf, sizeof buf, ";scale=%.17g", scale);
    os << buf;
    return os.str();
  }

  static Architecture parse(std::string_view text) {
    Architecture a;
    a.channels.clear();
    std::istringstream is{std::string(text)};
    std::string item;
    std::set<std::string> seen;
    while (std::getline(is, item, ';')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw FormatError("architecture: malformed item '" + item + "'");
      const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
      seen.insert(key);
      try {
        if (key == "input") a.input_size = std::stoul(val);
        else if (key == "embed") a.embed_dim = std::stoul(val);
        else if (key == "classes") a.num_classes = std::stoul(val);
        else if (key == "margin") a.margin = std::stod(val);
        else if (key == "scale") a.scale = std::stod(val);
        else if (key == "channels") {
          std::istringstream cs(val);
          std::string ch;
          while (std::getline(cs, ch, ',')) a.channels.push_back(std::stoul(ch));
        } else {
          throw FormatError("architecture: unknown key '" + key + "'");
        }
      } catch (const std::logic_error&) {
        throw FormatError("architecture: bad value for '" + key + "'");
      }
    }
    if (seen.size() != 6) throw FormatError("architecture: incomplete descriptor '" + std::string(text) + "'");
    a.validate();
    return a;
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct ForwardOptions {
  BNMode mode = BNMode::eval;
  bool trainable = false;  // record parameters as differentiable leaves
  AdaptOptions adapt;
  // When set, receives the biased input moments of every BN layer.
  std::map<std::string, ChannelMoments>* probe = nullptr;
};

struct ForwardOutput {
  Var embedding;  // [B×embed_dim], pre-classifier
  Var cosine;     // [B×c]
  Var logits;     // scale · cosine, no margin
};

class Network {
 public:
  Network() = default;

  // Kaiming-uniform conv/linear weights, BN scale 1 / shift 0.
  Network(Architecture arch, Rng& rng) : arch_(std::move(arch)) {
    arch_.validate();
    std::size_t in = 1;
    for (std::size_t i = 0; i < arch_.channels.size(); ++i) {
      const std::size_t out = arch_.channels[i];
      const std::string p = block_prefix(i);
      params_[p + ".conv.weight"] = kaiming({in * 9, out}, in * 9, rng);
      params_[p + ".bn.scale"] = Tensor({out}, 1.0);
      params_[p + ".bn.shift"] = Tensor({out}, 0.0);
      bn_[p + ".bn"] = BNState(out);
      in = out;
    }
    const std::size_t flat = in * arch_.final_spatial() * arch_.final_spatial();
    params_["embed.weight"] = kaiming({flat, arch_.embed_dim}, flat, rng);
    params_["embed.bias"] = Tensor({arch_.embed_dim}, 0.0);
    params_["classifier.weight"] = kaiming({arch_.num_classes, arch_.embed_dim}, arch_.embed_dim, rng);
  }

  Network(Architecture arch, std::map<std::string, Tensor> params, std::map<std::string, BNState> bn)
      : arch_(std::move(arch)), params_(std::move(params)), bn_(std::move(bn)) {
    arch_.validate();
    Rng dummy(0);
    Network ref(arch_, dummy);
    for (const auto& [name, t] : ref.params_) {
      auto it = params_.find(name);
      if (it == params_.end()) throw FormatError("network: missing parameter '" + name + "'");
      if (it->second.shape() != t.shape())
        throw FormatError("network: parameter '" + name + "' has shape " + to_string(it->second.shape()) +
                          ", expected " + to_string(t.shape()));
    }
    if (params_.size() != ref.params_.size()) throw FormatError("network: unexpected extra parameters");
    for (const auto& [name, st] : ref.bn_) {
      auto it = bn_.find(name);
      if (it == bn_.end() || it->second.channels() != st.channels())
        throw FormatError("network: BN state '" + name + "' missing or mis-sized");
    }
    if (bn_.size() != ref.bn_.size()) throw FormatError("network: unexpected extra BN state");
  }

  const Architecture& arch() const { return arch_; }
  std::map<std::string, Tensor>& params() { return params_; }
  const std::map<std::string, Tensor>& params() const { return params_; }
  std::map<std::string, BNState>& bn() { return bn_; }
  const std::map<std::string, BNState>& bn() const { return bn_; }

  void set_trainable(bool on) {
    for (auto& [_, t] : params_) t.set_requires_grad(on);
  }
  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  ForwardOutput forward(Graph& g, const Tensor& x, const ForwardOptions& opt = {}) {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != arch_.input_size || x.dim(3) != arch_.input_size)
      throw DimensionError("network expects B×1×" + std::to_string(arch_.input_size) + "×" +
                           std::to_string(arch_.input_size) + " input, got " + to_string(x.shape()));
    auto leaf = [&](const std::string& name) {
      Tensor& t = params_.at(name);
      return opt.trainable ? g.param(t) : g.constant(Tensor(t.shape(), t.storage()));
    };
    Var h = g.constant(x);
    for (std::size_t i = 0; i < arch_.channels.size(); ++i) {
      const std::string p = block_prefix(i);
      h = conv2d(h, leaf(p + ".conv.weight"), 3, 1, 1);
      BNMode mode = opt.mode;
      if (mode == BNMode::adapt && !opt.adapt.layer_filter.empty() && !opt.adapt.layer_filter.count(p + ".bn"))
        mode = BNMode::eval;
      if (opt.probe) (*opt.probe)[p + ".bn"] = channel_moments(h.value());
      h = batchnorm(h, leaf(p + ".bn.scale"), leaf(p + ".bn.shift"), bn_.at(p + ".bn"), mode, opt.adapt);
      h = maxpool2(relu(h));
    }
    const std::size_t batch = x.dim(0);
    h = reshape(h, {batch, h.size() / batch});
    Var f = linear(h, leaf("embed.weight"), leaf("embed.bias"));
    Var cos = cosine_logits(f, leaf("classifier.weight"));
    return {f, cos, scale(cos, arch_.scale)};
  }

  // Eval-mode forward in fixed-size chunks; returns embeddings [N×d] and logits [N×c].
  std::pair<Tensor, Tensor> embed_all(const Tensor& x, std::size_t chunk = 64) {
    const std::size_t n = x.dim(0), per = x.size() / n;
    Tensor emb({n, arch_.embed_dim}), logits({n, arch_.num_classes});
    for (std::size_t start = 0; start < n; start += chunk) {
      const std::size_t m = std::min(chunk, n - start);
      Shape s = x.shape();
      s[0] = m;
      Tensor part(s, std::vector<double>(x.data().begin() + start * per, x.data().begin() + (start + m) * per));
      Graph g;
      auto out = forward(g, part);
      std::copy_n(out.embedding.value().data().data(), m * arch_.embed_dim, emb.data().data() + start * arch_.embed_dim);
      std::copy_n(out.logits.value().data().data(), m * arch_.num_classes,
                  logits.data().data() + start * arch_.num_classes);
    }
    return {std::move(emb), std::move(logits)};
  }

  std::uint64_t parameter_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : params_) {
      h = fnv1a(name.data(), name.size(), h);
      h = fnv1a(t.data().data(), t.size() * sizeof(double), h);
    }
    return h;
  }

  std::uint64_t bn_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, s] : bn_) {
      h = fnv1a(name.data(), name.size(), h);
      h = fnv1a(s.running_mean.data(), s.channels() * sizeof(double), h);
      h = fnv1a(s.running_var.data(), s.channels() * sizeof(double), h);
    }
    return h;
  }

  std::uint64_t state_hash() const { return splitmix64(parameter_hash() ^ bn_hash()); }

  static std::string block_prefix(std::size_t i) { return "block" + std::to_string(i); }

 private:
  static Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
  }

  Architecture arch_;
  std::map<std::string, Tensor> params_;
  std::map<std::string, BNState> bn_;
};

}  // namespace aird
