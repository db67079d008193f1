#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "aird/config.hpp"
#include "aird/distill.hpp"
#include "aird/nn.hpp"
#include "aird/synth.hpp"

namespace aird {

/// T²·KL(softmax(t/T) ‖ softmax(s/T)), averaged over rows.
inline Var vanilla_kd_loss(Graph& g, const Tensor& teacher_logits, Var student_logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("vanilla_kd_loss: temperature must be positive");
  if (teacher_logits.rank() != 2 || teacher_logits.shape() != student_logits.shape())
    throw DimensionError("vanilla_kd_loss: teacher " + to_string(teacher_logits.shape()) + " vs student " +
                         to_string(student_logits.shape()));
  const std::size_t b = teacher_logits.dim(0), c = teacher_logits.dim(1);
  Tensor pt({b, c});
  double entropy_term = 0.0;  // Σ p·log p
  for (std::size_t i = 0; i < b; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, teacher_logits[i * c + j] / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(teacher_logits[i * c + j] / temperature - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      const double lp = teacher_logits[i * c + j] / temperature - lz;
      pt[i * c + j] = std::exp(lp);
      entropy_term += pt[i * c + j] * lp;
    }
  }
  Var ls = log_softmax(temperature == 1.0 ? student_logits : scale(student_logits, 1.0 / temperature));
  Var kl = sub(g.constant(Tensor({1}, {entropy_term})), sum(mul(ls, g.constant(pt))));
  return scale(kl, temperature * temperature / static_cast<double>(b));
}

/// SGD with momentum and L2 weight decay: v ← μv + (g + λw); w ← w − lr·v.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), decay_(weight_decay) {}

  void step(const std::vector<std::pair<std::string, Tensor*>>& params, double lr) {
    for (auto& [name, p] : params) {
      if (!p->has_grad()) continue;
      auto& v = velocity_[name];
      if (v.empty()) v.assign(p->size(), 0.0);
      auto w = p->data();
      auto g = p->grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + (g[i] + decay_ * w[i]);
        w[i] -= lr * v[i];
      }
    }
  }

 private:
  double momentum_, decay_;
  std::map<std::string, std::vector<double>> velocity_;
};

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double total = 0.0;
  double cls = 0.0;
  double ild = 0.0;  // IlD, or the vanilla KD term in vanilla_kd mode
  double rld = 0.0;
  std::size_t clamped = 0;
  double batch_accuracy = 0.0;
};

struct TrainResult {
  Network net;
  std::vector<EpochStats> curve;
  double train_accuracy = 0.0;  // eval-mode, on the training split
  double seconds = 0.0;
};

inline std::string curve_csv(const std::vector<EpochStats>& curve) {
  std::string s = "epoch,lr,total,cls,ild,rld,clamped,batch_accuracy\n";
  char buf[256];
  for (const auto& e : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%.17g\n", e.epoch, e.lr, e.total, e.cls, e.ild,
                  e.rld, e.clamped, e.batch_accuracy);
    s += buf;
  }
  return s;
}

inline Tensor take_rows(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t per = t.size() / t.dim(0);
  Shape s = t.shape();
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= t.dim(0)) throw DimensionError("take_rows: row out of range");
    std::copy_n(t.data().data() + rows[k] * per, per, out.data().data() + k * per);
  }
  return out;
}

inline Tensor normalized_rows(const Tensor& t) {
  Tensor out = t;
  const std::size_t n = t.dim(0), d = t.size() / n;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += t[i * d + j] * t[i * d + j];
    const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= inv;
  }
  return out;
}

inline double accuracy_of(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    hit += best == labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(n);
}

namespace detail {

inline std::size_t class_count(const synth::Dataset& d) { return d.config.num_ids; }

inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch_size) {
    std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(s),
                               order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch_size)));
    if (b.size() >= 2) out.push_back(std::move(b));  // batch norm needs two rows
  }
  return out;
}

inline std::vector<std::pair<std::string, Tensor*>> param_list(Network& net) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, t] : net.params()) out.emplace_back(name, &t);
  return out;
}

[[noreturn]] inline void rethrow_with(const NumericError& e, std::size_t epoch, std::size_t step) {
  throw NumericError("diverged at epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " + e.what());
}

inline void check_loss(double v, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(v))
    throw NumericError("diverged at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                       ": loss is " + std::to_string(v));
}

}  // namespace detail

/// Margin-softmax teacher on the HR training split.
inline TrainResult train_teacher(const RunConfig& cfg, const synth::Dataset& data) {
  cfg.validate();
  const auto& tr = data.train;
  if (tr.size() == 0) throw ConfigError("train_teacher: empty HR training split");
  const auto t0 = std::chrono::steady_clock::now();
  Architecture arch = Architecture::teacher(detail::class_count(data));
  arch.input_size = data.config.hr_size;
  Rng init(cfg.seed, "init/teacher");
  TrainResult res{Network(arch, init), {}, 0.0, 0.0};
  Network& net = res.net;
  net.set_trainable(true);
  Sgd opt(cfg.momentum, cfg.weight_decay);
  Rng order(cfg.seed, "batch/teacher");
  const auto params = detail::param_list(net);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochStats st;
    st.epoch = epoch;
    st.lr = cfg.lr_at(epoch);
    std::size_t steps = 0, hit = 0, seen = 0;
    for (const auto& b : detail::batches(tr.size(), cfg.batch_size, order)) {
      std::vector<std::size_t> labels;
      for (auto i : b) labels.push_back(tr.labels[i]);
      Graph g;
      ForwardOptions fo;
      fo.mode = BNMode::train;
      fo.trainable = true;
      auto out = net.forward(g, take_rows(tr.hr, b), fo);
      Var loss = cross_entropy(arc_margin(out.cosine, labels, arch.margin, arch.scale), labels);
      detail::check_loss(loss.item(), epoch, steps);
      net.zero_grad();
      g.backward(loss);
      opt.step(params, st.lr);
      st.total += loss.item();
      hit += static_cast<std::size_t>(std::lround(accuracy_of(out.cosine.value(), labels) * b.size()));
      seen += b.size();
      ++steps;
    }
    st.total /= static_cast<double>(std::max<std::size_t>(steps, 1));
    st.cls = st.total;
    st.batch_accuracy = seen ? static_cast<double>(hit) / static_cast<double>(seen) : 0.0;
    res.curve.push_back(st);
  }
  net.set_trainable(false);
  net.zero_grad();
  res.train_accuracy = accuracy_of(net.embed_all(tr.hr).second, tr.labels);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

struct DistillResult : TrainResult {
  RelationNet rel_t, rel_ts;
  std::uint64_t teacher_hash_before = 0, teacher_hash_after = 0;
};

/// Student training on LR inputs. Mode selects the objective:
///   aird:       α·IlD + β·RlD + Cls
///   vanilla_kd: α·KD(T) + Cls
///   scratch_lr: Cls (the aird path with α = β = 0)
/// The teacher runs once in eval mode over the HR split; its features and
/// logits are cached for the whole run. `pairs` is required when RlD is active.
inline DistillResult distill_student(const RunConfig& cfg, const synth::Dataset& data, const Network& teacher,
                                     const PairSet* pairs) {
  cfg.validate();
  const auto& tr = data.train;
  if (tr.size() == 0) throw ConfigError("distill: empty training split");
  if (teacher.arch().input_size != data.config.hr_size)
    throw ConfigError("distill: teacher input " + std::to_string(teacher.arch().input_size) + " does not match HR size " +
                      std::to_string(data.config.hr_size));
  if (teacher.arch().num_classes != detail::class_count(data))
    throw ConfigError("distill: teacher has " + std::to_string(teacher.arch().num_classes) + " classes, dataset has " +
                      std::to_string(detail::class_count(data)));
  if (cfg.mode == TrainMode::teacher) throw ConfigError("distill: mode 'teacher' is not a student mode");

  LossWeights w = cfg.weights;
  if (cfg.mode == TrainMode::scratch_lr) w = {0.0, 0.0};
  if (cfg.mode == TrainMode::vanilla_kd) w.beta = 0.0;
  const bool use_rld = w.beta > 0.0;
  if (use_rld) {
    if (!pairs) throw ConfigError("distill: relation loss needs a mined pair file");
    if (pairs->num_samples != tr.size())
      throw ConfigError("distill: pair file covers " + std::to_string(pairs->num_samples) + " samples, training split has " +
                        std::to_string(tr.size()));
  }

  const auto t0 = std::chrono::steady_clock::now();
  DistillResult res;
  res.teacher_hash_before = teacher.state_hash();
  Network frozen = teacher;
  auto [t_embed, t_logits] = frozen.embed_all(tr.hr);
  const Tensor t_unit = normalized_rows(t_embed);
  res.teacher_hash_after = teacher.state_hash();

  const Architecture arch = Architecture::student(detail::class_count(data), data.config.lr_size());
  Rng init(cfg.seed, "init/student");
  res.net = Network(arch, init);
  Network& net = res.net;
  net.set_trainable(true);
  Rng rel_rng(cfg.seed, "relation");
  res.rel_t = RelationNet(arch.embed_dim, cfg.rel_dim, rel_rng);
  res.rel_ts = RelationNet(arch.embed_dim, cfg.rel_dim, rel_rng);

  std::optional<PairIndex> index;
  if (use_rld) index.emplace(*pairs);
  RldOptions ro;
  ro.tau = cfg.tau;
  ro.critic_offset = cfg.critic_offset;
  ro.n = use_rld ? static_cast<double>(pairs->n_neg) : 0.0;
  ro.reduction = cfg.rld_reduction;

  auto params = detail::param_list(net);
  if (use_rld) {
    params.emplace_back("rel_t.weight", &res.rel_t.weight);
    params.emplace_back("rel_t.bias", &res.rel_t.bias);
    params.emplace_back("rel_ts.weight", &res.rel_ts.weight);
    params.emplace_back("rel_ts.bias", &res.rel_ts.bias);
  }
  Sgd opt(cfg.momentum, cfg.weight_decay);
  Rng order(cfg.seed, "batch/student");

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochStats st;
    st.epoch = epoch;
    st.lr = cfg.lr_at(epoch);
    std::size_t steps = 0, hit = 0, seen = 0;
    for (const auto& b : detail::batches(tr.size(), cfg.batch_size, order)) {
      // Rows forwarded through the student: the batch, then (for RlD) every
      // mined partner of a batch anchor.
      std::vector<std::size_t> rows = b;
      std::vector<IndexPair> pos, neg;
      if (use_rld) {
        std::map<std::size_t, std::size_t> local;
        for (std::size_t k = 0; k < b.size(); ++k) local[b[k]] = k;
        const bool grow = cfg.pair_scope == PairScope::union_batch;
        if (grow) {
          std::vector<std::size_t> extra;
          for (auto a : b)
            for (const auto& side : {index->positives(a), index->negatives(a)})
              for (const auto& p : side)
                if (!local.count(p.other)) {
                  local[p.other] = 0;
                  extra.push_back(p.other);
                }
          std::sort(extra.begin(), extra.end());
          for (auto e : extra) {
            local[e] = rows.size();
            rows.push_back(e);
          }
        }
        for (auto a : b) {
          for (const auto& p : index->positives(a))
            if (local.count(p.other)) pos.push_back({local[a], local[p.other]});
          for (const auto& p : index->negatives(a))
            if (local.count(p.other)) neg.push_back({local[a], local[p.other]});
        }
      }
      std::vector<std::size_t> labels, head(b.size());
      for (std::size_t k = 0; k < b.size(); ++k) {
        labels.push_back(tr.labels[b[k]]);
        head[k] = k;
      }

      Graph g;
      ForwardOptions fo;
      fo.mode = BNMode::train;
      fo.trainable = true;
      auto out = net.forward(g, take_rows(tr.lr, rows), fo);
      Var cosine = rows.size() == b.size() ? out.cosine : gather_rows(out.cosine, head);
      Var cls = cross_entropy(arc_margin(cosine, labels, arch.margin, arch.scale), labels);
      Var zero = g.constant(Tensor({1}, 0.0));
      Var inst = zero, rel = zero;
      if (w.alpha > 0.0) {
        Var logits = rows.size() == b.size() ? out.logits : gather_rows(out.logits, head);
        const Tensor tl = take_rows(t_logits, b);
        inst = cfg.mode == TrainMode::vanilla_kd ? vanilla_kd_loss(g, tl, logits, cfg.kd_temperature)
                                                 : ild_loss(g, tl, logits, labels, cfg.ild_temperature).loss;
      }
      if (use_rld && !pos.empty() && !neg.empty()) {
        auto r = rld_loss(g, pos, neg, take_rows(t_unit, rows), l2_normalize_rows(out.embedding, false), res.rel_t,
                          res.rel_ts, ro);
        rel = r.loss;
        st.clamped += r.clamped;
      }
      Var loss;
      try {
        loss = total_loss(cls, inst, rel, w);
      } catch (const NumericError& e) {
        detail::rethrow_with(e, epoch, steps);
      }
      net.zero_grad();
      res.rel_t.zero_grad();
      res.rel_ts.zero_grad();
      g.backward(loss);
      opt.step(params, st.lr);
      st.total += loss.item();
      st.cls += cls.item();
      st.ild += inst.item();
      st.rld += rel.item();
      hit += static_cast<std::size_t>(std::lround(accuracy_of(cosine.value(), labels) * b.size()));
      seen += b.size();
      ++steps;
    }
    const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(steps, 1));
    st.total *= inv;
    st.cls *= inv;
    st.ild *= inv;
    st.rld *= inv;
    st.batch_accuracy = seen ? static_cast<double>(hit) / static_cast<double>(seen) : 0.0;
    res.curve.push_back(st);
  }
  net.set_trainable(false);
  net.zero_grad();
  res.rel_t.zero_grad();
  res.rel_ts.zero_grad();
  res.train_accuracy = accuracy_of(net.embed_all(tr.lr).second, tr.labels);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// Teacher features for mining: unit-norm eval-mode embeddings of the HR split.
inline Tensor teacher_unit_embeddings(const Network& teacher, const Tensor& hr) {
  Network t = teacher;
  return normalized_rows(t.embed_all(hr).first);
}

}  // namespace aird
