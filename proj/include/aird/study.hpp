#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aird/config.hpp"
#include "aird/distill.hpp"
#include "aird/eval.hpp"
#include "aird/facebn.hpp"
#include "aird/synth.hpp"
#include "aird/train.hpp"

namespace aird {

inline std::uint64_t data_seed(const RunConfig& cfg) { return substream_seed(cfg.seed, "data"); }
inline std::uint64_t protocol_seed(const RunConfig& cfg) { return substream_seed(cfg.seed, "protocol"); }

/// Everything a seed's student runs share: data, teacher, mined pairs and the
/// verification protocol over the test split.
struct SeedContext {
  RunConfig cfg;
  synth::Dataset data;
  TrainResult teacher;
  PairSet pairs;
  std::vector<synth::VerifyPair> protocol;
};

inline SeedContext prepare_seed(const RunConfig& cfg) {
  SeedContext c;
  c.cfg = cfg;
  c.data = synth::generate_dataset(cfg.data, data_seed(cfg));
  RunConfig tcfg = cfg;
  tcfg.mode = TrainMode::teacher;
  c.teacher = train_teacher(tcfg, c.data);
  c.pairs = mine_pairs(teacher_unit_embeddings(c.teacher.net, c.data.train.hr), c.data.train.labels, cfg.n_neg);
  c.protocol = synth::build_verify_protocol(c.data.test.labels, cfg.eval_pairs, protocol_seed(cfg));
  return c;
}

inline facebn::AdaptConfig adapt_config(const RunConfig& cfg) {
  facebn::AdaptConfig a;
  a.gamma = cfg.adapt_gamma;
  a.batch_size = cfg.adapt_batch_size;
  a.num_batches = cfg.adapt_num_batches;
  a.unbiased = cfg.adapt_unbiased;
  return a;
}

/// Adapt on the unlabeled LR images of a split.
inline Network adapt_to(const Network& net, const Tensor& lr_images, const RunConfig& cfg) {
  const auto a = adapt_config(cfg);
  return facebn::adapt_network(net, facebn::shuffled_stream(lr_images, a.batch_size, a.num_batches, cfg.seed), a);
}

struct StudentRun {
  DistillResult result;
  VerifyReport clean;    // LR-LR on the test split
  VerifyReport shifted;  // LR-LR on the shifted test split
  std::optional<VerifyReport> shifted_facebn;
};

/// Train one student variant on a prepared seed and evaluate it.
inline StudentRun run_student(const SeedContext& c, const RunConfig& cfg, const PairSet* pairs, bool facebn) {
  StudentRun r;
  r.result = distill_student(cfg, c.data, c.teacher.net, pairs ? pairs : &c.pairs);
  r.clean = evaluate_verification(r.result.net, c.data.test, c.protocol, VerifyMode::lrlr);
  r.shifted = evaluate_verification(r.result.net, c.data.test_shifted, c.protocol, VerifyMode::lrlr);
  if (facebn) {
    Network adapted = adapt_to(r.result.net, c.data.test_shifted.lr, cfg);
    r.shifted_facebn = evaluate_verification(adapted, c.data.test_shifted, c.protocol, VerifyMode::lrlr);
  }
  return r;
}

inline RunConfig with_mode(RunConfig cfg, TrainMode m) {
  cfg.mode = m;
  return cfg;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationSpec {
  std::string name;
  bool ild = false;
  bool rld = false;
  bool facebn = false;
};

// Rows of the component table: classification only, each distillation term,
// both, and both with test-time adaptation.
inline std::vector<AblationSpec> default_ablation_grid() {
  return {{"cls", false, false, false},
          {"cls+ild", true, false, false},
          {"cls+rld", false, true, false},
          {"cls+ild+rld", true, true, false},
          {"cls+ild+rld+facebn", true, true, true}};
}

struct AblationRow {
  AblationSpec spec;
  std::vector<double> accuracy;  // per seed, shifted test split
  double mean() const {
    double s = 0.0;
    for (double a : accuracy) s += a;
    return accuracy.empty() ? 0.0 : s / static_cast<double>(accuracy.size());
  }
};

inline RunConfig ablation_config(const RunConfig& base, const AblationSpec& s) {
  RunConfig cfg = with_mode(base, TrainMode::aird);
  cfg.weights.alpha = s.ild ? base.weights.alpha : 0.0;
  cfg.weights.beta = s.rld ? base.weights.beta : 0.0;
  return cfg;
}

/// Every row is evaluated on the shifted test split so the adaptation row is
/// comparable with the rest. Runs sharing a training configuration are trained once.
inline std::vector<AblationRow> run_ablation(const std::vector<AblationSpec>& grid, const std::vector<SeedContext>& seeds) {
  if (grid.empty()) throw ConfigError("ablation: empty grid");
  std::vector<AblationRow> rows;
  for (const auto& s : grid) rows.push_back({s, {}});
  for (const auto& c : seeds) {
    std::map<std::pair<bool, bool>, StudentRun> trained;
    for (auto& row : rows) {
      const auto key = std::pair{row.spec.ild, row.spec.rld};
      auto it = trained.find(key);
      if (it == trained.end())
        it = trained.emplace(key, run_student(c, ablation_config(c.cfg, row.spec), nullptr, true)).first;
      row.accuracy.push_back(row.spec.facebn ? it->second.shifted_facebn->best.accuracy : it->second.shifted.best.accuracy);
    }
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string s = "config,cls,ild,rld,facebn,mean_accuracy,per_seed\n";
  char buf[64];
  for (const auto& r : rows) {
    s += r.spec.name + ",1," + (r.spec.ild ? "1" : "0") + "," + (r.spec.rld ? "1" : "0") + "," +
         (r.spec.facebn ? "1" : "0") + ",";
    std::snprintf(buf, sizeof buf, "%.6f", r.mean());
    s += buf;
    s += ",";
    for (std::size_t i = 0; i < r.accuracy.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.6f", i ? ";" : "", r.accuracy[i]);
      s += buf;
    }
    s += "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// Negative-count sweep

struct SweepRow {
  std::size_t n = 0;
  std::vector<double> accuracy;  // per seed, clean test split
  std::vector<double> seconds;   // per seed, student training wall time
  double mean_accuracy() const {
    double s = 0.0;
    for (double a : accuracy) s += a;
    return accuracy.empty() ? 0.0 : s / static_cast<double>(accuracy.size());
  }
  double total_seconds() const {
    double s = 0.0;
    for (double t : seconds) s += t;
    return s;
  }
};

inline std::vector<SweepRow> negative_count_sweep(const std::vector<SeedContext>& seeds,
                                                  const std::vector<std::size_t>& n_values = {4, 8, 16, 32, 64}) {
  if (n_values.empty()) throw ConfigError("sweep: no negative counts");
  std::vector<SweepRow> rows;
  for (auto n : n_values) rows.push_back({n, {}, {}});
  for (const auto& c : seeds) {
    const Tensor unit = teacher_unit_embeddings(c.teacher.net, c.data.train.hr);
    for (auto& row : rows) {
      RunConfig cfg = with_mode(c.cfg, TrainMode::aird);
      cfg.n_neg = row.n;
      const PairSet pairs = mine_pairs(unit, c.data.train.labels, row.n);
      const auto run = run_student(c, cfg, &pairs, false);
      row.accuracy.push_back(run.clean.best.accuracy);
      row.seconds.push_back(run.result.seconds);
    }
  }
  return rows;
}

/// Largest relative excess of measured times over their least-squares line in
/// n. A superlinear curve sits above its fit at the ends; linear or slower
/// growth keeps every point at or below the fit up to noise.
inline double linear_fit_deviation(const std::vector<SweepRow>& rows) {
  const double k = static_cast<double>(rows.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& r : rows) {
    const double x = static_cast<double>(r.n), y = r.total_seconds();
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double den = k * sxx - sx * sx;
  const double b = den != 0.0 ? (k * sxy - sx * sy) / den : 0.0;
  const double a = (sy - b * sx) / k;
  double worst = 0.0;
  for (const auto& r : rows) {
    const double fit = a + b * static_cast<double>(r.n);
    worst = std::max(worst, (r.total_seconds() - fit) / std::max(fit, 1e-9));
  }
  return worst;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string s = "n_neg,mean_accuracy,total_seconds,per_seed_accuracy\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.3f,", r.n, r.mean_accuracy(), r.total_seconds());
    s += buf;
    for (std::size_t i = 0; i < r.accuracy.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.6f", i ? ";" : "", r.accuracy[i]);
      s += buf;
    }
    s += "\n";
  }
  return s;
}

}  // namespace aird
