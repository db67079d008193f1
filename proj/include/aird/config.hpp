#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aird/distill.hpp"
#include "aird/io.hpp"
#include "aird/synth.hpp"

namespace aird {

enum class PairScope { union_batch, in_batch };

enum class TrainMode { teacher, aird, vanilla_kd, scratch_lr };

inline std::string mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::teacher: return "teacher";
    case TrainMode::aird: return "aird";
    case TrainMode::vanilla_kd: return "vanilla_kd";
    case TrainMode::scratch_lr: return "scratch_lr";
  }
  return "?";
}

inline TrainMode parse_mode(std::string_view s) {
  for (auto m : {TrainMode::teacher, TrainMode::aird, TrainMode::vanilla_kd, TrainMode::scratch_lr})
    if (mode_name(m) == s) return m;
  throw ConfigError("unknown train mode '" + std::string(s) + "'");
}

struct RunConfig {
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::aird;

  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double lr = 0.05;
  std::vector<std::size_t> milestones{21, 28, 32};
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  LossWeights weights{1.0, 2.0};
  std::size_t n_neg = 16;
  double tau = 0.1;
  double critic_offset = 0.5;
  std::size_t rel_dim = 32;
  double kd_temperature = 4.0;
  double ild_temperature = 1.0;
  RldReduction rld_reduction = RldReduction::mean;
  // union: every mined partner of a batch anchor is forwarded with the batch.
  // batch: only pairs whose partner is already in the mini-batch are used.
  PairScope pair_scope = PairScope::union_batch;

  synth::DatasetConfig data;

  std::size_t eval_pairs = 400;
  std::size_t gallery_per_id = 3;
  bool lrhr_student_only = false;
  bool identify_finetune = false;

  double adapt_gamma = 0.1;
  std::size_t adapt_batch_size = 32;
  std::size_t adapt_num_batches = 0;  // 0: one pass over the gallery
  bool adapt_unbiased = false;

  void validate() const {
    if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
    if (!(lr > 0) || !(lr_decay > 0) || momentum < 0 || weight_decay < 0)
      throw ConfigError("train: rates must be positive");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (i && milestones[i] <= milestones[i - 1]) throw ConfigError("train.milestones must be strictly increasing");
      if (epochs > 0 && milestones[i] >= epochs) throw ConfigError("train.milestones must be < train.epochs");
    }
    if (!(tau > 0) || !(kd_temperature > 0) || !(ild_temperature > 0))
      throw ConfigError("distill: temperatures must be positive");
    if (weights.alpha < 0 || weights.beta < 0) throw ConfigError("distill: alpha and beta must be >= 0");
    if (n_neg == 0 || rel_dim == 0) throw ConfigError("distill: n_neg and rel_dim must be positive");
    if (!(adapt_gamma >= 0 && adapt_gamma <= 1)) throw ConfigError("adapt.gamma must lie in [0, 1]");
    if (adapt_batch_size < 2) throw ConfigError("adapt.batch_size must be >= 2");
    data.validate();
  }

  double lr_at(std::size_t epoch) const {
    double r = lr;
    for (auto m : milestones)
      if (epoch >= m) r *= lr_decay;
    return r;
  }
};

// ---------------------------------------------------------------------------
// Text form: "# aird-config v1" header, then "key = value" lines. Keys are
// dotted; unknown keys are rejected.

namespace detail {

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::vector<std::size_t> parse_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::istringstream is(v);
  std::string item;
  while (std::getline(is, item, ','))
    if (!item.empty()) out.push_back(std::stoul(item));
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected boolean, got '" + v + "'");
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
Field num(T RunConfig::*m) {
  return {[m](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt_double(c.*m);
            else return std::to_string(c.*m);
          },
          [m](RunConfig& c, const std::string& v) {
            if constexpr (std::is_floating_point_v<T>) c.*m = std::stod(v);
            else c.*m = static_cast<T>(std::stoull(v));
          }};
}

template <class Get, class Set>
Field field(Get g, Set s) {
  return {g, s};
}

inline const std::map<std::string, Field>& fields() {
  using synth::DatasetConfig;
  static const std::map<std::string, Field> f = [] {
    std::map<std::string, Field> m;
    m["seed"] = num(&RunConfig::seed);
    m["train.mode"] = field([](const RunConfig& c) { return mode_name(c.mode); },
                            [](RunConfig& c, const std::string& v) { c.mode = parse_mode(v); });
    m["train.epochs"] = num(&RunConfig::epochs);
    m["train.batch_size"] = num(&RunConfig::batch_size);
    m["train.lr"] = num(&RunConfig::lr);
    m["train.milestones"] = field(
        [](const RunConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.milestones.size(); ++i) s += (i ? "," : "") + std::to_string(c.milestones[i]);
          return s;
        },
        [](RunConfig& c, const std::string& v) { c.milestones = parse_list(v); });
    m["train.lr_decay"] = num(&RunConfig::lr_decay);
    m["train.momentum"] = num(&RunConfig::momentum);
    m["train.weight_decay"] = num(&RunConfig::weight_decay);
    m["distill.alpha"] = field([](const RunConfig& c) { return fmt_double(c.weights.alpha); },
                               [](RunConfig& c, const std::string& v) { c.weights.alpha = std::stod(v); });
    m["distill.beta"] = field([](const RunConfig& c) { return fmt_double(c.weights.beta); },
                              [](RunConfig& c, const std::string& v) { c.weights.beta = std::stod(v); });
    m["distill.n_neg"] = num(&RunConfig::n_neg);
    m["distill.tau"] = num(&RunConfig::tau);
    m["distill.critic_offset"] = num(&RunConfig::critic_offset);
    m["distill.rel_dim"] = num(&RunConfig::rel_dim);
    m["distill.kd_temperature"] = num(&RunConfig::kd_temperature);
    m["distill.ild_temperature"] = num(&RunConfig::ild_temperature);
    m["distill.rld_reduction"] = field(
        [](const RunConfig& c) { return std::string(c.rld_reduction == RldReduction::mean ? "mean" : "sum"); },
        [](RunConfig& c, const std::string& v) {
          if (v != "mean" && v != "sum") throw ConfigError("distill.rld_reduction must be mean or sum");
          c.rld_reduction = v == "mean" ? RldReduction::mean : RldReduction::sum;
        });
    m["distill.pair_scope"] = field(
        [](const RunConfig& c) { return std::string(c.pair_scope == PairScope::union_batch ? "union" : "batch"); },
        [](RunConfig& c, const std::string& v) {
          if (v != "union" && v != "batch") throw ConfigError("distill.pair_scope must be union or batch");
          c.pair_scope = v == "union" ? PairScope::union_batch : PairScope::in_batch;
        });
    auto data_num = [](auto DatasetConfig::*mp) {
      return field(
          [mp](const RunConfig& c) {
            using T = std::remove_cvref_t<decltype(c.data.*mp)>;
            if constexpr (std::is_floating_point_v<T>) return fmt_double(c.data.*mp);
            else return std::to_string(c.data.*mp);
          },
          [mp](RunConfig& c, const std::string& v) {
            using T = std::remove_cvref_t<decltype(c.data.*mp)>;
            if constexpr (std::is_floating_point_v<T>) c.data.*mp = std::stod(v);
            else c.data.*mp = static_cast<T>(std::stoull(v));
          });
    };
    m["data.num_ids"] = data_num(&DatasetConfig::num_ids);
    m["data.samples_per_id"] = data_num(&DatasetConfig::samples_per_id);
    m["data.train_per_id"] = data_num(&DatasetConfig::train_per_id);
    m["data.hr_size"] = data_num(&DatasetConfig::hr_size);
    m["data.lr_factor"] = data_num(&DatasetConfig::lr_factor);
    m["data.kernel"] = field([](const RunConfig& c) { return synth::kernel_name(c.data.kernel); },
                             [](RunConfig& c, const std::string& v) { c.data.kernel = synth::parse_kernel(v); });
    m["data.blobs"] = data_num(&DatasetConfig::blobs);
    m["data.min_latent_distance"] = data_num(&DatasetConfig::min_latent_distance);
    m["data.jitter_shift"] = data_num(&DatasetConfig::jitter_shift);
    m["data.jitter_rotate"] = data_num(&DatasetConfig::jitter_rotate);
    m["data.gain_range"] = data_num(&DatasetConfig::gain_range);
    m["data.noise"] = data_num(&DatasetConfig::noise);
    m["data.occluder_amp"] = data_num(&DatasetConfig::occluder_amp);
    m["data.blob_amp"] = data_num(&DatasetConfig::blob_amp);
    m["data.stroke_amp"] = data_num(&DatasetConfig::stroke_amp);
    m["data.stroke_freq_lo"] = data_num(&DatasetConfig::stroke_freq_lo);
    m["data.stroke_freq_hi"] = data_num(&DatasetConfig::stroke_freq_hi);
    m["data.shift.enabled"] = field([](const RunConfig& c) { return std::string(c.data.shift.enabled ? "true" : "false"); },
                                    [](RunConfig& c, const std::string& v) { c.data.shift.enabled = parse_bool(v); });
    m["data.shift.brightness"] = field([](const RunConfig& c) { return fmt_double(c.data.shift.brightness); },
                                       [](RunConfig& c, const std::string& v) { c.data.shift.brightness = std::stod(v); });
    m["data.shift.contrast"] = field([](const RunConfig& c) { return fmt_double(c.data.shift.contrast); },
                                     [](RunConfig& c, const std::string& v) { c.data.shift.contrast = std::stod(v); });
    m["data.shift.blur_sigma"] = field([](const RunConfig& c) { return fmt_double(c.data.shift.blur_sigma); },
                                       [](RunConfig& c, const std::string& v) { c.data.shift.blur_sigma = std::stod(v); });
    m["data.shift.noise"] = field([](const RunConfig& c) { return fmt_double(c.data.shift.noise); },
                                  [](RunConfig& c, const std::string& v) { c.data.shift.noise = std::stod(v); });
    m["eval.pairs"] = num(&RunConfig::eval_pairs);
    m["eval.gallery_per_id"] = num(&RunConfig::gallery_per_id);
    m["eval.lrhr_student_only"] = field([](const RunConfig& c) { return std::string(c.lrhr_student_only ? "true" : "false"); },
                                        [](RunConfig& c, const std::string& v) { c.lrhr_student_only = parse_bool(v); });
    m["eval.identify_finetune"] = field([](const RunConfig& c) { return std::string(c.identify_finetune ? "true" : "false"); },
                                        [](RunConfig& c, const std::string& v) { c.identify_finetune = parse_bool(v); });
    m["adapt.gamma"] = num(&RunConfig::adapt_gamma);
    m["adapt.batch_size"] = num(&RunConfig::adapt_batch_size);
    m["adapt.num_batches"] = num(&RunConfig::adapt_num_batches);
    m["adapt.unbiased"] = field([](const RunConfig& c) { return std::string(c.adapt_unbiased ? "true" : "false"); },
                                [](RunConfig& c, const std::string& v) { c.adapt_unbiased = parse_bool(v); });
    return m;
  }();
  return f;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (const auto& [name, _] : detail::fields()) k.push_back(name);
  return k;
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& f = detail::fields();
  auto it = f.find(key);
  if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second.set(c, detail::trim(value));
  } catch (const std::logic_error&) {
    throw ConfigError("bad value '" + value + "' for config key '" + key + "'");
  }
}

// "key=value"
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set_config_value(c, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  std::istringstream is{std::string(text)};
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    line = detail::trim(line);
    if (!header && line == "# aird-config v1") {
      header = true;
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    apply_override(base, line);
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& p, RunConfig base = {}) {
  const std::string text = io::read_file(p);
  if (text.rfind("# aird-config v1", 0) != 0) throw ConfigError("config '" + p.string() + "' lacks '# aird-config v1' header");
  return parse_config(text, std::move(base));
}

inline std::string format_config(const RunConfig& c) {
  std::string s = "# aird-config v1\n";
  for (const auto& [name, f] : detail::fields()) s += name + " = " + f.get(c) + "\n";
  return s;
}

inline nlohmann::json config_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, f] : detail::fields()) j[name] = f.get(c);
  return j;
}

}  // namespace aird
