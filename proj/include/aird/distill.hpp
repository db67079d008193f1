#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "aird/autograd.hpp"
#include "aird/io.hpp"
#include "aird/rng.hpp"
#include "aird/tensor.hpp"

namespace aird {

struct EmptyPairsError : ConfigError {
  using ConfigError::ConfigError;
};

// ---------------------------------------------------------------------------
// Offline pair mining

struct ScoredPair {
  std::uint32_t anchor;
  std::uint32_t other;
  double sim;
  friend bool operator==(const ScoredPair&, const ScoredPair&) = default;
};

/// Mined pairs, grouped by ascending anchor. Within an anchor positives are in
/// descending similarity and negatives are the n_neg most similar samples of
/// other identities, also descending. Ties go to the lower index.
struct PairSet {
  std::vector<ScoredPair> positives;
  std::vector<ScoredPair> negatives;
  std::size_t n_neg = 0;
  std::size_t num_samples = 0;

  friend bool operator==(const PairSet&, const PairSet&) = default;
};

inline bool similarity_order(const ScoredPair& a, const ScoredPair& b) {
  if (a.sim != b.sim) return a.sim > b.sim;
  return a.other < b.other;
}

// Rows of embeds must be unit length (|1 - ‖row‖| < 1e-6).
inline PairSet mine_pairs(const Tensor& embeds, std::span<const std::size_t> labels, std::size_t n_neg) {
  if (embeds.rank() != 2 || embeds.dim(0) != labels.size())
    throw DimensionError("mine_pairs: embeddings " + to_string(embeds.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t n = embeds.dim(0), d = embeds.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += embeds[i * d + k] * embeds[i * d + k];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6)
      throw ConfigError("mine_pairs: embedding row " + std::to_string(i) + " is not L2-normalized");
  }
  if (n_neg == 0) throw ConfigError("mine_pairs: n_neg must be positive");

  std::map<std::size_t, std::size_t> count;
  for (auto y : labels) ++count[y];
  std::vector<std::size_t> anchors;
  for (std::size_t i = 0; i < n; ++i)
    if (count[labels[i]] >= 2) anchors.push_back(i);
  if (anchors.empty()) throw EmptyPairsError("mine_pairs: no identity has at least two samples");
  for (auto i : anchors) {
    const std::size_t others = n - count[labels[i]];
    if (n_neg >= others)
      throw ConfigError("mine_pairs: n_neg=" + std::to_string(n_neg) + " needs more than the " +
                        std::to_string(others) + " different-identity samples available to anchor " +
                        std::to_string(i));
  }

  PairSet out;
  out.n_neg = n_neg;
  out.num_samples = n;
  std::vector<ScoredPair> pos, neg;
  for (auto i : anchors) {
    pos.clear();
    neg.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += embeds[i * d + k] * embeds[j * d + k];
      ScoredPair p{static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j), s};
      (labels[j] == labels[i] ? pos : neg).push_back(p);
    }
    std::sort(pos.begin(), pos.end(), similarity_order);
    std::partial_sort(neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n_neg), neg.end(), similarity_order);
    out.positives.insert(out.positives.end(), pos.begin(), pos.end());
    out.negatives.insert(out.negatives.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n_neg));
  }
  return out;
}

/// Per-anchor views into a PairSet.
class PairIndex {
 public:
  explicit PairIndex(const PairSet& set) : set_(&set) {
    for (std::size_t k = 0; k < set.positives.size(); ++k) pos_[set.positives[k].anchor].push_back(k);
    for (std::size_t k = 0; k < set.negatives.size(); ++k) neg_[set.negatives[k].anchor].push_back(k);
  }
  std::vector<ScoredPair> positives(std::size_t anchor) const { return collect(pos_, set_->positives, anchor); }
  std::vector<ScoredPair> negatives(std::size_t anchor) const { return collect(neg_, set_->negatives, anchor); }

 private:
  static std::vector<ScoredPair> collect(const std::map<std::size_t, std::vector<std::size_t>>& m,
                                         const std::vector<ScoredPair>& src, std::size_t anchor) {
    std::vector<ScoredPair> v;
    if (auto it = m.find(anchor); it != m.end())
      for (auto k : it->second) v.push_back(src[k]);
    return v;
  }
  const PairSet* set_;
  std::map<std::size_t, std::vector<std::size_t>> pos_, neg_;
};

inline constexpr std::uint32_t kPairFileFormat = 1;

// "AIRP" u32 format u64 num_samples u64 n_neg u64 npos u64 nneg, then per pair
// u32 anchor u32 other f64 sim (positives first).
inline std::string serialize_pairs(const PairSet& p) {
  io::Writer w;
  w.bytes("AIRP");
  w.u32(kPairFileFormat);
  w.u64(p.num_samples);
  w.u64(p.n_neg);
  w.u64(p.positives.size());
  w.u64(p.negatives.size());
  for (const auto* list : {&p.positives, &p.negatives})
    for (const auto& s : *list) {
      w.u32(s.anchor);
      w.u32(s.other);
      w.f64(s.sim);
    }
  return w.buffer();
}

inline PairSet deserialize_pairs(std::string bytes) {
  io::Reader r(std::move(bytes));
  if (r.bytes(4) != "AIRP") throw FormatError("pair file: bad magic");
  if (const auto f = r.u32(); f != kPairFileFormat) throw FormatError("pair file: unsupported format " + std::to_string(f));
  PairSet p;
  p.num_samples = r.u64();
  p.n_neg = r.u64();
  const auto np = r.u64(), nn = r.u64();
  for (auto [list, count] : {std::pair{&p.positives, np}, std::pair{&p.negatives, nn}})
    for (std::uint64_t k = 0; k < count; ++k) {
      ScoredPair s{};
      s.anchor = r.u32();
      s.other = r.u32();
      s.sim = r.f64();
      if (s.anchor >= p.num_samples || s.other >= p.num_samples) throw FormatError("pair file: index out of range");
      list->push_back(s);
    }
  if (!r.at_end()) throw FormatError("pair file: trailing bytes");
  return p;
}

inline void save_pairs(const PairSet& p, const std::filesystem::path& path) { io::write_file(path, serialize_pairs(p)); }
inline PairSet load_pairs(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("pair file not found: '" + path.string() + "'");
  return deserialize_pairs(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Relation networks and critic

/// relu(W · [f_a, f_b] + b), W stored [(2·d) × rel_dim].
struct RelationNet {
  Tensor weight;
  Tensor bias;

  RelationNet() = default;
  RelationNet(std::size_t embed_dim, std::size_t rel_dim, Rng& rng)
      : weight({2 * embed_dim, rel_dim}), bias({rel_dim}, 0.0) {
    const double bound = std::sqrt(6.0 / static_cast<double>(2 * embed_dim));
    for (auto& v : weight.data()) v = rng.uniform(-bound, bound);
    weight.set_requires_grad();
    bias.set_requires_grad();
  }

  std::size_t input_dim() const { return weight.dim(0); }
  std::size_t rel_dim() const { return weight.dim(1); }

  // fa, fb: [P×d] -> [P×rel_dim]
  Var forward(Graph& g, Var fa, Var fb) {
    if (fa.value().rank() != 2 || fb.value().rank() != 2 || fa.shape()[1] + fb.shape()[1] != input_dim())
      throw DimensionError("relation net expects concatenated width " + std::to_string(input_dim()) + ", got " +
                           to_string(fa.shape()) + " ++ " + to_string(fb.shape()));
    return relu(add(matmul(concat_cols(fa, fb), g.param(weight)), g.param(bias)));
  }

  void zero_grad() {
    weight.zero_grad();
    bias.zero_grad();
  }
};

// sigmoid((cos(r_t, r_ts) − offset) / tau) per row; strict rejects zero-norm relations.
inline Var critic_h(Var r_t, Var r_ts, double tau, bool strict = true, double offset = 0.0) {
  if (!(tau > 0.0)) throw ConfigError("critic_h: temperature must be positive");
  Var c = cosine_rows(r_t, r_ts, strict);
  if (offset != 0.0) c = add_scalar(c, -offset);
  return sigmoid(scale(c, 1.0 / tau));
}

inline constexpr double kCriticClamp = 1e-7;

enum class RldReduction { mean, sum };

struct RldOptions {
  double tau = 0.1;
  double n = 16.0;  // weight of the negative side, the negatives-per-anchor count
  RldReduction reduction = RldReduction::mean;
  bool strict = false;
  // Relations leave a ReLU, so their cosine lies in [0, 1]; centring it lets
  // negatives reach h near 0 instead of stalling at h = 0.5.
  double critic_offset = 0.5;
};

struct IndexPair {
  std::size_t anchor;
  std::size_t other;
};

struct RldResult {
  Var loss;
  Var positive_term;  // −Σ or −mean of log h over positives
  Var negative_term;  // −Σ or −mean of log(1−h) over negatives, before the n weight
  std::size_t clamped = 0;
};

/// Contrastive relation loss. For each pair (i, j):
///   r_t  = R_t(f_t[i], f_t[j]),  r_ts = R_ts(f_t[i], f_s[j]),  h = critic(r_t, r_ts)
///   L = −Σ_pos log h − n · Σ_neg log(1 − h)   (or per-side means)
/// Teacher rows are constants; gradients reach student rows and both relation nets.
inline RldResult rld_loss(Graph& g, std::span<const IndexPair> positives, std::span<const IndexPair> negatives,
                          const Tensor& teacher_embeds, Var student_embeds, RelationNet& r_t, RelationNet& r_ts,
                          const RldOptions& opt) {
  if (positives.empty() || negatives.empty()) throw EmptyPairsError("rld_loss: needs positive and negative pairs");
  if (teacher_embeds.rank() != 2 || student_embeds.value().rank() != 2 ||
      teacher_embeds.dim(0) != student_embeds.shape()[0])
    throw DimensionError("rld_loss: teacher " + to_string(teacher_embeds.shape()) + " and student " +
                         to_string(student_embeds.shape()) + " embeddings must be indexed alike");
  Var ft = g.constant(teacher_embeds);
  RldResult res;
  auto side = [&](std::span<const IndexPair> pairs, bool positive) {
    std::vector<std::size_t> ia, io;
    for (const auto& p : pairs) {
      ia.push_back(p.anchor);
      io.push_back(p.other);
    }
    Var anchor_t = gather_rows(ft, ia);
    Var rel_t = r_t.forward(g, anchor_t, gather_rows(ft, io));
    Var rel_ts = r_ts.forward(g, anchor_t, gather_rows(student_embeds, io));
    Var h = critic_h(rel_t, rel_ts, opt.tau, opt.strict, opt.critic_offset);
    for (double v : h.value().data())
      if (v < kCriticClamp || v > 1.0 - kCriticClamp) ++res.clamped;
    h = clamp(h, kCriticClamp, 1.0 - kCriticClamp);
    Var lg = positive ? log(h) : log(add_scalar(scale(h, -1.0), 1.0));
    Var total = sum(lg);
    const double k = opt.reduction == RldReduction::mean ? 1.0 / static_cast<double>(pairs.size()) : 1.0;
    return scale(total, -k);
  };
  res.positive_term = side(positives, true);
  res.negative_term = side(negatives, false);
  res.loss = add(res.positive_term, scale(res.negative_term, opt.n));
  return res;
}

// ---------------------------------------------------------------------------
// Instance-level decoupled distillation

struct DecoupledProbs {
  double p_tar = 0.0;
  double p_ntar = 0.0;
  std::vector<double> p_hat;  // c−1 entries, class order with the target removed
};

namespace detail {
struct RowLse {
  double all;
  double non_target;
};
inline RowLse row_lse(std::span<const double> z, std::size_t target) {
  double mx = -std::numeric_limits<double>::infinity(), mn = mx;
  for (std::size_t j = 0; j < z.size(); ++j) {
    mx = std::max(mx, z[j]);
    if (j != target) mn = std::max(mn, z[j]);
  }
  double s = 0.0, sn = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    s += std::exp(z[j] - mx);
    if (j != target) sn += std::exp(z[j] - mn);
  }
  return {mx + std::log(s), mn + std::log(sn)};
}
}  // namespace detail

inline DecoupledProbs decouple(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) throw DimensionError("decouple: target index out of range");
  if (logits.size() < 2) throw DimensionError("decouple: need at least two classes");
  const auto lse = detail::row_lse(logits, target);
  DecoupledProbs p;
  p.p_tar = std::exp(logits[target] - lse.all);
  p.p_ntar = std::exp(lse.non_target - lse.all);
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (j != target) p.p_hat.push_back(std::exp(logits[j] - lse.non_target));
  return p;
}

namespace detail {
inline double xlogx_over(double p, double log_q) { return p > 0.0 ? p * (std::log(p) - log_q) : 0.0; }
}  // namespace detail

struct IldResult {
  Var loss;         // batch mean of target + non-target terms
  Var target_term;  // batch mean of the binary (target vs rest) KL
  Var non_target_term;
};

/// Decoupled KL between teacher (constant) and student logits [B×c]:
///   pt_tar·log(pt_tar/ps_tar) + pt_ntar·log(pt_ntar/ps_ntar) + pt_ntar·Σ_{i≠tar} p̂t_i·log(p̂t_i/p̂s_i)
/// Logits are divided by `temperature` and the result scaled by temperature².
inline IldResult ild_loss(Graph& g, const Tensor& teacher_logits, Var student_logits,
                          const std::vector<std::size_t>& targets, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ConfigError("ild_loss: temperature must be positive");
  if (teacher_logits.shape() != student_logits.shape() || teacher_logits.rank() != 2)
    throw DimensionError("ild_loss: teacher " + to_string(teacher_logits.shape()) + " vs student " +
                         to_string(student_logits.shape()));
  const std::size_t b = teacher_logits.dim(0), c = teacher_logits.dim(1);
  if (targets.size() != b) throw DimensionError("ild_loss: one target per row required");

  Var zs = temperature == 1.0 ? student_logits : scale(student_logits, 1.0 / temperature);
  Var lse_all = logsumexp_rows(zs);
  Var lse_nt = logsumexp_rows(zs, targets);  // [B]
  Var log_ps_tar = sub(pick(zs, targets), lse_all);  // [B]
  Var log_ps_ntar = sub(lse_nt, lse_all);            // [B]

  // Teacher side is constant.
  Tensor a({b}), bw({b}), a_log({b}), b_log({b}), hat_w({b, c}, 0.0);
  double non_target_const = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (targets[i] >= c) throw DimensionError("ild_loss: target out of range");
    std::vector<double> zt(c);
    for (std::size_t j = 0; j < c; ++j) zt[j] = teacher_logits[i * c + j] / temperature;
    const DecoupledProbs pt = decouple(zt, targets[i]);
    a[i] = pt.p_tar;
    bw[i] = pt.p_ntar;
    a_log[i] = pt.p_tar > 0.0 ? pt.p_tar * std::log(pt.p_tar) : 0.0;
    b_log[i] = pt.p_ntar > 0.0 ? pt.p_ntar * std::log(pt.p_ntar) : 0.0;
    std::size_t k = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (j == targets[i]) continue;
      const double ph = pt.p_hat[k++];
      hat_w[i * c + j] = pt.p_ntar * ph;
      if (ph > 0.0) non_target_const += pt.p_ntar * ph * std::log(ph);
    }
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  const double t2 = temperature * temperature;

  // target term: Σ a·log a − a·log ps_tar + b·log b − b·log ps_ntar
  double target_const = 0.0;
  for (std::size_t i = 0; i < b; ++i) target_const += a_log[i] + b_log[i];
  Var tgt = sub(g.constant(Tensor({1}, {target_const})),
                add(sum(mul(log_ps_tar, g.constant(a))), sum(mul(log_ps_ntar, g.constant(bw)))));
  // non-target term: Σ b·p̂t·(log p̂t − log p̂s) with log p̂s_j = z_j − lse_nt. The target
  // column of hat_w is zero and each row of hat_w sums to b, so
  //   Σ_j hat_w·log p̂s_j = Σ_j hat_w·z_j − b·lse_nt.
  Var weighted_log_phat = sub(sum(mul(zs, g.constant(hat_w))), sum(mul(lse_nt, g.constant(bw))));
  Var ntg = sub(g.constant(Tensor({1}, {non_target_const})), weighted_log_phat);

  IldResult r;
  r.target_term = scale(tgt, inv_b * t2);
  r.non_target_term = scale(ntg, inv_b * t2);
  r.loss = add(r.target_term, r.non_target_term);
  return r;
}

// Reference scalar form of the decoupled loss for one sample (no graph).
inline double ild_value(std::span<const double> teacher, std::span<const double> student, std::size_t target) {
  const DecoupledProbs t = decouple(teacher, target);
  const DecoupledProbs s = decouple(student, target);
  double v = detail::xlogx_over(t.p_tar, std::log(s.p_tar)) + detail::xlogx_over(t.p_ntar, std::log(s.p_ntar));
  double nt = 0.0;
  for (std::size_t k = 0; k < t.p_hat.size(); ++k) nt += detail::xlogx_over(t.p_hat[k], std::log(s.p_hat[k]));
  return v + t.p_ntar * nt;
}

// ---------------------------------------------------------------------------

struct LossWeights {
  double alpha = 1.0;
  double beta = 2.0;
};

/// α·ild + β·rld + cls; a non-finite component is reported by name.
inline Var total_loss(Var cls, Var ild, Var rld, const LossWeights& w) {
  for (auto [name, v] : {std::pair{"cls", cls}, std::pair{"ild", ild}, std::pair{"rld", rld}})
    if (!std::isfinite(v.item())) throw NumericError(std::string("total_loss: non-finite ") + name + " component");
  return add(add(scale(ild, w.alpha), scale(rld, w.beta)), cls);
}

inline double total_loss(double cls, double ild, double rld, const LossWeights& w) {
  for (auto [name, v] : {std::pair{"cls", cls}, std::pair{"ild", ild}, std::pair{"rld", rld}})
    if (!std::isfinite(v)) throw NumericError(std::string("total_loss: non-finite ") + name + " component");
  return w.alpha * ild + w.beta * rld + cls;
}

}  // namespace aird
