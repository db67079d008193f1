#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "aird/nn.hpp"
#include "aird/synth.hpp"
#include "aird/train.hpp"

namespace aird {

inline constexpr std::size_t kHistogramBins = 100;

struct ThresholdResult {
  double accuracy = 0.0;
  double threshold = 0.0;  // predict "same" when score > threshold
};

/// Best accuracy over every threshold that separates the sorted scores
/// differently: above all, between each pair of distinct neighbours, below all.
/// Ties between equally good thresholds go to the highest one.
inline ThresholdResult best_threshold(std::span<const double> scores, const std::vector<bool>& same) {
  const std::size_t n = scores.size();
  if (n == 0) throw ConfigError("verification: empty protocol");
  if (same.size() != n) throw DimensionError("verification: one label per score required");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  long correct = 0;
  for (bool s : same) correct += !s;
  ThresholdResult best{static_cast<double>(correct) / static_cast<double>(n),
                       std::nextafter(scores[idx[0]], std::numeric_limits<double>::infinity())};
  long current = correct;
  for (std::size_t k = 0; k < n;) {
    const double v = scores[idx[k]];
    std::size_t e = k;
    for (; e < n && scores[idx[e]] == v; ++e) current += same[idx[e]] ? 1 : -1;
    const double t = e < n ? 0.5 * (v + scores[idx[e]]) : std::nextafter(v, -std::numeric_limits<double>::infinity());
    if (current > correct) {
      correct = current;
      best = {static_cast<double>(current) / static_cast<double>(n), t};
    }
    k = e;
  }
  return best;
}

struct Histogram {
  std::vector<std::size_t> positive = std::vector<std::size_t>(kHistogramBins, 0);
  std::vector<std::size_t> negative = std::vector<std::size_t>(kHistogramBins, 0);

  static std::size_t bin(double score) {
    const double u = (std::clamp(score, -1.0, 1.0) + 1.0) / 2.0;
    return std::min(kHistogramBins - 1, static_cast<std::size_t>(u * static_cast<double>(kHistogramBins)));
  }

  // Σ_b min(pos_b/|pos|, neg_b/|neg|)
  double overlap() const {
    const double np = static_cast<double>(std::accumulate(positive.begin(), positive.end(), std::size_t{0}));
    const double nn = static_cast<double>(std::accumulate(negative.begin(), negative.end(), std::size_t{0}));
    if (np == 0 || nn == 0) return 0.0;
    double o = 0.0;
    for (std::size_t b = 0; b < kHistogramBins; ++b)
      o += std::min(static_cast<double>(positive[b]) / np, static_cast<double>(negative[b]) / nn);
    return o;
  }
};

inline Histogram score_histogram(std::span<const double> scores, const std::vector<bool>& same) {
  Histogram h;
  for (std::size_t i = 0; i < scores.size(); ++i) (same[i] ? h.positive : h.negative)[Histogram::bin(scores[i])]++;
  return h;
}

enum class VerifyMode { lrlr, lrhr };

struct VerifyReport {
  VerifyMode mode = VerifyMode::lrlr;
  ThresholdResult best;
  std::vector<double> scores;
  std::vector<bool> same;
  Histogram histogram;
};

struct IdentifyReport {
  double top1 = 0.0;
  double top5 = 0.0;
  std::size_t gallery = 0, probes = 0;
  bool finetuned = false;
};

inline double dot_rows(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t d = a.dim(1);
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * b[j * d + k];
  return s;
}

inline VerifyReport verify_scores(const Tensor& probe_unit, const Tensor& gallery_unit,
                                  const std::vector<synth::VerifyPair>& pairs, VerifyMode mode) {
  if (pairs.empty()) throw ConfigError("verification: empty protocol");
  VerifyReport r;
  r.mode = mode;
  for (const auto& p : pairs) {
    if (p.a >= probe_unit.dim(0) || p.b >= gallery_unit.dim(0))
      throw ConfigError("verification: protocol index out of range");
    r.scores.push_back(dot_rows(probe_unit, p.a, gallery_unit, p.b));
    r.same.push_back(p.same);
  }
  r.best = best_threshold(r.scores, r.same);
  r.histogram = score_histogram(r.scores, r.same);
  return r;
}

/// LR-LR: both sides are LR images through the student. LR-HR: the probe is
/// LR through the student, the gallery HR through the teacher (or, with
/// student_only, the HR gallery downsampled to the student's input).
inline VerifyReport evaluate_verification(const Network& student, const synth::Split& split,
                                          const std::vector<synth::VerifyPair>& pairs, VerifyMode mode,
                                          const Network* teacher = nullptr, const synth::DatasetConfig* data = nullptr) {
  Network s = student;
  const Tensor probe = normalized_rows(s.embed_all(split.lr).first);
  if (mode == VerifyMode::lrlr) return verify_scores(probe, probe, pairs, mode);
  Tensor gallery;
  if (teacher) {
    Network t = *teacher;
    gallery = normalized_rows(t.embed_all(split.hr).first);
  } else {
    const std::size_t hs = split.hr.dim(2), in = student.arch().input_size;
    if (hs % in) throw ConfigError("verification: HR size not a multiple of the student input");
    gallery = normalized_rows(s.embed_all(synth::downsample(split.hr, hs / in, data ? data->kernel : synth::Kernel::bicubic)).first);
  }
  return verify_scores(probe, gallery, pairs, mode);
}

/// Nearest-gallery ranking by cosine; ties go to the lower gallery position.
inline IdentifyReport rank_identities(const Tensor& unit, std::span<const std::size_t> labels,
                                      const synth::IdentifyProtocol& p) {
  if (p.gallery.empty()) throw ConfigError("identification: empty gallery");
  std::set<std::size_t> gallery_labels;
  for (auto g : p.gallery) gallery_labels.insert(labels[g]);
  for (auto q : p.probes)
    if (!gallery_labels.count(labels[q]))
      throw ConfigError("identification: probe " + std::to_string(q) + " has label " + std::to_string(labels[q]) +
                        " absent from the gallery");
  IdentifyReport r;
  r.gallery = p.gallery.size();
  r.probes = p.probes.size();
  std::size_t hit1 = 0, hit5 = 0;
  std::vector<std::size_t> order(p.gallery.size());
  std::vector<double> sim(p.gallery.size());
  for (auto q : p.probes) {
    for (std::size_t k = 0; k < p.gallery.size(); ++k) sim[k] = dot_rows(unit, q, unit, p.gallery[k]);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
    // Rank by identity: the first occurrence of each label in similarity order.
    std::vector<std::size_t> seen;
    for (auto k : order) {
      const std::size_t l = labels[p.gallery[k]];
      if (std::find(seen.begin(), seen.end(), l) == seen.end()) seen.push_back(l);
      if (seen.size() == 5) break;
    }
    const auto it = std::find(seen.begin(), seen.end(), labels[q]);
    hit1 += it == seen.begin();
    hit5 += it != seen.end();
  }
  const double np = static_cast<double>(std::max<std::size_t>(p.probes.size(), 1));
  r.top1 = static_cast<double>(hit1) / np;
  r.top5 = static_cast<double>(hit5) / np;
  return r;
}

/// Fine-tune the embedding and classifier layers on the gallery samples with
/// convolutions and batch norm frozen (BN in eval mode).
inline Network finetune_final_layers(Network net, const synth::Split& split, std::span<const std::size_t> gallery,
                                     const RunConfig& cfg, std::size_t epochs = 10) {
  const Tensor x = take_rows(split.lr, gallery);
  std::vector<std::size_t> labels;
  for (auto g : gallery) labels.push_back(split.labels[g]);
  std::vector<std::pair<std::string, Tensor*>> params;
  for (auto& [name, t] : net.params()) {
    const bool head = name.rfind("embed.", 0) == 0 || name.rfind("classifier.", 0) == 0;
    t.set_requires_grad(head);
    if (head) params.emplace_back(name, &t);
  }
  Sgd opt(cfg.momentum, cfg.weight_decay);
  Rng order(cfg.seed, "batch/finetune");
  const double lr = cfg.lr * cfg.lr_decay;
  for (std::size_t e = 0; e < epochs; ++e) {
    for (const auto& b : detail::batches(x.dim(0), cfg.batch_size, order)) {
      std::vector<std::size_t> bl;
      for (auto i : b) bl.push_back(labels[i]);
      Graph g;
      ForwardOptions fo;
      fo.mode = BNMode::eval;
      fo.trainable = true;
      auto out = net.forward(g, take_rows(x, b), fo);
      Var loss = cross_entropy(arc_margin(out.cosine, bl, net.arch().margin, net.arch().scale), bl);
      detail::check_loss(loss.item(), e, 0);
      net.zero_grad();
      g.backward(loss);
      opt.step(params, lr);
    }
  }
  net.set_trainable(false);
  net.zero_grad();
  return net;
}

inline IdentifyReport evaluate_identification(const Network& student, const synth::Split& split,
                                              const synth::IdentifyProtocol& p, const RunConfig* finetune = nullptr) {
  Network s = finetune ? finetune_final_layers(student, split, p.gallery, *finetune) : student;
  IdentifyReport r = rank_identities(normalized_rows(s.embed_all(split.lr).first), split.labels, p);
  r.finetuned = finetune != nullptr;
  return r;
}

// ---------------------------------------------------------------------------
// Report emission

inline std::string verify_mode_name(VerifyMode m) { return m == VerifyMode::lrlr ? "verify_lrlr" : "verify_lrhr"; }

inline nlohmann::json to_json(const VerifyReport& r) {
  return {{"mode", verify_mode_name(r.mode)},
          {"accuracy", r.best.accuracy},
          {"threshold", r.best.threshold},
          {"pairs", r.scores.size()},
          {"overlap", r.histogram.overlap()},
          {"histogram", {{"bins", kHistogramBins}, {"range", {-1.0, 1.0}},
                         {"positive", r.histogram.positive}, {"negative", r.histogram.negative}}}};
}

inline nlohmann::json to_json(const IdentifyReport& r) {
  return {{"mode", "identify"},
          {"accuracy", r.top1},
          {"top_k", {{"1", r.top1}, {"5", r.top5}}},
          {"gallery", r.gallery},
          {"probes", r.probes},
          {"finetuned", r.finetuned}};
}

inline std::string histogram_csv(const Histogram& h) {
  std::string s = "bin_lo,bin_hi,positive,negative\n";
  char buf[128];
  for (std::size_t b = 0; b < kHistogramBins; ++b) {
    const double lo = -1.0 + 2.0 * static_cast<double>(b) / kHistogramBins;
    std::snprintf(buf, sizeof buf, "%.4f,%.4f,%zu,%zu\n", lo, lo + 2.0 / kHistogramBins, h.positive[b], h.negative[b]);
    s += buf;
  }
  return s;
}

inline std::string scores_csv(const VerifyReport& r, const std::vector<synth::VerifyPair>& pairs) {
  std::string s = "a,b,same,score\n";
  char buf[128];
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%d,%.17g\n", pairs[i].a, pairs[i].b, pairs[i].same ? 1 : 0, r.scores[i]);
    s += buf;
  }
  return s;
}

}  // namespace aird
