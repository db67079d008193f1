#pragma once
// Command-line front end. Every verb reads artifacts from earlier stages and
// writes its own into a fresh output directory together with run_manifest.json.
// Reports hold results only; timings live in the manifest, so a rerun with the
// same seed reproduces every artifact except the manifest bitwise.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aird/aird.hpp"

namespace aird::cli {

namespace fs = std::filesystem;

inline constexpr const char* kRunManifest = "run_manifest.json";
inline constexpr const char* kModelFile = "model.ckpt";
inline constexpr const char* kPairsFile = "pairs.bin";

/// An input artifact that an earlier stage should have produced.
struct MissingArtifact : Error {
  MissingArtifact(const std::string& what, const fs::path& p, const std::string& producer)
      : Error("missing " + what + " '" + p.string() + "' (run " + producer + " first)") {}
};

struct Options {
  std::string verb;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::vector<std::string> overrides;

  std::string data, teacher, pairs, split, verify_mode = "lrlr";
  std::vector<std::string> models;  // name=path, or a bare path
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::size_t> negatives{4, 8, 16, 32, 64};
};

inline fs::path out_root() {
  const char* e = std::getenv("AIRD_OUT_ROOT");
  return e && *e ? fs::path(e) : fs::path("runs");
}

// Default output directory per verb; downstream verbs default their inputs to
// the same places, so a plain sequence of verbs chains without flags.
inline fs::path default_out(const Options& o, const RunConfig& cfg) {
  const fs::path root = out_root();
  if (o.verb == "gen-data") return root / "data";
  if (o.verb == "train-teacher") return root / "teacher";
  if (o.verb == "mine-pairs") return root / "pairs";
  if (o.verb == "distill") return root / mode_name(cfg.mode);
  if (o.verb == "adapt") return root / "adapted";
  return root / o.verb;
}

inline synth::SplitKind parse_split(const std::string& s) {
  for (auto k : {synth::SplitKind::train, synth::SplitKind::test, synth::SplitKind::test_shifted})
    if (synth::split_name(k) == s) return k;
  throw ConfigError("unknown split '" + s + "'");
}

inline VerifyMode parse_verify_mode(const std::string& s) {
  if (s == "lrlr") return VerifyMode::lrlr;
  if (s == "lrhr") return VerifyMode::lrhr;
  throw ConfigError("unknown verification mode '" + s + "'");
}

inline fs::path resolve(const std::string& given, const fs::path& fallback, const char* file) {
  fs::path p = given.empty() ? fallback / file : fs::path(given);
  if (fs::is_directory(p)) p /= file;
  return p;
}

/// State of one command while it runs: resolved config, a staging directory
/// and the provenance that goes into the manifest.
class Run {
 public:
  Run(Options o, RunConfig cfg, fs::path out, std::ostream& log)
      : opt(std::move(o)), cfg(std::move(cfg)), log(log), out_(std::move(out)) {
    stage_ = out_;
    stage_ += ".partial";
    fs::remove_all(stage_);
    fs::create_directories(stage_);
  }
  ~Run() {
    std::error_code ec;
    if (!committed_) fs::remove_all(stage_, ec);
  }
  Run(const Run&) = delete;
  Run& operator=(const Run&) = delete;

  Options opt;
  RunConfig cfg;
  std::ostream& log;  // progress messages
  nlohmann::json report = nlohmann::json::object();

  fs::path file(const std::string& name) const { return stage_ / name; }
  void write(const std::string& name, std::string_view bytes) const { io::write_file(file(name), bytes); }

  synth::Dataset load_data() {
    const fs::path dir = opt.data.empty() ? out_root() / "data" : fs::path(opt.data);
    if (!fs::exists(dir / "manifest.json")) throw MissingArtifact("dataset", dir / "manifest.json", "gen-data");
    note_input("data", dir / "manifest.json");
    synth::Dataset d = synth::load_dataset(dir);
    cfg.data = d.config;  // the dataset on disk is authoritative
    return d;
  }

  Network load_network(const std::string& role, const std::string& given, const fs::path& fallback,
                       const std::string& producer) {
    const fs::path p = resolve(given, fallback, kModelFile);
    if (!fs::exists(p)) throw MissingArtifact(role + " checkpoint", p, producer);
    note_input(role, p);
    return load_checkpoint(p);
  }

  PairSet load_pair_set() {
    const fs::path p = resolve(opt.pairs, out_root() / "pairs", kPairsFile);
    if (!fs::exists(p)) throw MissingArtifact("pair file", p, "mine-pairs");
    note_input("pairs", p);
    return load_pairs(p);
  }

  /// name=path entries of --model; a bare path is named after its directory.
  std::vector<std::pair<std::string, Network>> load_models() {
    if (opt.models.empty()) throw ConfigError("no --model given");
    std::vector<std::pair<std::string, Network>> v;
    for (const auto& m : opt.models) {
      const auto eq = m.find('=');
      std::string name = eq == std::string::npos ? "" : m.substr(0, eq);
      const std::string path = eq == std::string::npos ? m : m.substr(eq + 1);
      if (name.empty()) name = fs::path(path).filename().string();
      if (name.empty() || name == kModelFile) name = fs::path(path).parent_path().filename().string();
      v.emplace_back(name, load_network("model " + name, path, path, "distill"));
    }
    return v;
  }

  void commit(double seconds) {
    nlohmann::json artifacts = nlohmann::json::object();
    for (const auto& e : fs::recursive_directory_iterator(stage_))
      if (e.is_regular_file()) artifacts[fs::relative(e.path(), stage_).generic_string()] = io::file_checksum(e.path());
    nlohmann::json m = {{"format", 1},
                        {"verb", opt.verb},
                        {"seed", cfg.seed},
                        {"config", config_json(cfg)},
                        {"inputs", inputs_},
                        {"artifacts", artifacts},
                        {"wall_seconds", seconds}};
    io::write_file(file(kRunManifest), m.dump(2) + "\n");
    if (fs::exists(out_)) fs::remove_all(out_);
    fs::rename(stage_, out_);
    committed_ = true;
  }

  const fs::path& out() const { return out_; }

 private:
  void note_input(const std::string& role, const fs::path& p) {
    inputs_[role] = {{"path", p.string()}, {"checksum", io::file_checksum(p)}};
  }

  fs::path out_, stage_;
  nlohmann::json inputs_ = nlohmann::json::object();
  bool committed_ = false;
};

// ---------------------------------------------------------------------------
// Verbs

inline void gen_data(Run& r) {
  const synth::Dataset d = synth::generate_dataset(r.cfg.data, data_seed(r.cfg));
  synth::save_dataset(d, r.file(""));
  r.report = {{"data_seed", d.seed}, {"train", d.train.size()}, {"test", d.test.size()}};
}

inline void train_teacher_verb(Run& r) {
  const synth::Dataset d = r.load_data();
  RunConfig tcfg = with_mode(r.cfg, TrainMode::teacher);
  const TrainResult t = train_teacher(tcfg, d);
  save_checkpoint(t.net, r.file(kModelFile));
  r.write("curve.csv", curve_csv(t.curve));
  r.report = {{"train_accuracy", t.train_accuracy}};
}

inline void mine_pairs_verb(Run& r) {
  const synth::Dataset d = r.load_data();
  const Network teacher = r.load_network("teacher", r.opt.teacher, out_root() / "teacher", "train-teacher");
  const PairSet p = mine_pairs(teacher_unit_embeddings(teacher, d.train.hr), d.train.labels, r.cfg.n_neg);
  save_pairs(p, r.file(kPairsFile));
  r.report = {{"positives", p.positives.size()}, {"negatives", p.negatives.size()}, {"n_neg", p.n_neg}};
}

inline void distill_verb(Run& r) {
  const synth::Dataset d = r.load_data();
  const Network teacher = r.load_network("teacher", r.opt.teacher, out_root() / "teacher", "train-teacher");
  std::optional<PairSet> pairs;
  if (r.cfg.mode == TrainMode::aird && r.cfg.weights.beta > 0.0) pairs = r.load_pair_set();
  const DistillResult res = distill_student(r.cfg, d, teacher, pairs ? &*pairs : nullptr);
  save_checkpoint(res.net, r.file(kModelFile));
  r.write("curve.csv", curve_csv(res.curve));
  r.report = {{"mode", mode_name(r.cfg.mode)}, {"train_accuracy", res.train_accuracy}};
}

inline void adapt_verb(Run& r) {
  const synth::Dataset d = r.load_data();
  if (r.opt.models.size() > 1) throw ConfigError("adapt takes one --model");
  const std::string given = r.opt.models.empty() ? "" : r.opt.models.front();
  const Network before = r.load_network("model", given, out_root() / "aird", "distill");
  const Tensor& images = d.split(parse_split(r.opt.split)).lr;
  const Network after = adapt_to(before, images, r.cfg);
  const auto truth = facebn::activation_stats(after, images);
  facebn::ShiftSummary sum;
  const auto diag = facebn::diagnostic(before, after, &truth, &sum);
  save_checkpoint(after, r.file(kModelFile));
  r.write("adapt.json", diag.dump(2) + "\n");
  r.report = {{"split", r.opt.split}, {"fraction_improved", sum.fraction()}};
}

inline std::vector<synth::VerifyPair> verify_protocol(const Run& r, const synth::Split& s) {
  return synth::build_verify_protocol(s.labels, r.cfg.eval_pairs, protocol_seed(r.cfg));
}

inline void eval_verify_verb(Run& r) {
  const synth::Dataset d = r.load_data();
  const synth::Split& split = d.split(parse_split(r.opt.split));
  const VerifyMode mode = parse_verify_mode(r.opt.verify_mode);
  std::optional<Network> teacher;
  if (mode == VerifyMode::lrhr && !r.cfg.lrhr_student_only)
    teacher = r.load_network("teacher", r.opt.teacher, out_root() / "teacher", "train-teacher");
  const auto models = r.load_models();
  const auto pairs = verify_protocol(r, split);
  r.write("protocol.txt", synth::format_verify_protocol(pairs));
  nlohmann::json acc = nlohmann::json::object(), full = nlohmann::json::object();
  for (const auto& [name, net] : models) {
    const auto rep = evaluate_verification(net, split, pairs, mode, teacher ? &*teacher : nullptr, &d.config);
    acc[name] = rep.best.accuracy;
    full[name] = to_json(rep);
  }
  r.report = {{"split", r.opt.split}, {"mode", verify_mode_name(mode)}, {"accuracy", acc}, {"results", full}};
}

inline void eval_identify_verb(Run& r) {
  const synth::Dataset d = r.load_data();
  const synth::Split& split = d.split(parse_split(r.opt.split));
  const auto models = r.load_models();
  const auto p = synth::build_identify_protocol(split.labels, r.cfg.gallery_per_id, protocol_seed(r.cfg));
  r.write("protocol.txt", synth::format_identify_protocol(p));
  nlohmann::json acc = nlohmann::json::object(), full = nlohmann::json::object();
  for (const auto& [name, net] : models) {
    const auto rep = evaluate_identification(net, split, p, r.cfg.identify_finetune ? &r.cfg : nullptr);
    acc[name] = rep.top1;
    full[name] = to_json(rep);
  }
  r.report = {{"split", r.opt.split}, {"accuracy", acc}, {"results", full}};
}

inline void export_scores_verb(Run& r) {
  const synth::Dataset d = r.load_data();
  const synth::Split& split = d.split(parse_split(r.opt.split));
  const VerifyMode mode = parse_verify_mode(r.opt.verify_mode);
  std::optional<Network> teacher;
  if (mode == VerifyMode::lrhr && !r.cfg.lrhr_student_only)
    teacher = r.load_network("teacher", r.opt.teacher, out_root() / "teacher", "train-teacher");
  const auto models = r.load_models();
  if (models.size() != 1) throw ConfigError("export-scores takes exactly one --model");
  const auto pairs = verify_protocol(r, split);
  const auto rep = evaluate_verification(models.front().second, split, pairs, mode, teacher ? &*teacher : nullptr,
                                         &d.config);
  r.write("scores.csv", scores_csv(rep, pairs));
  r.write("histogram.csv", histogram_csv(rep.histogram));
  r.report = {{"model", models.front().first}, {"accuracy", rep.best.accuracy}, {"overlap", rep.histogram.overlap()}};
}

inline std::vector<SeedContext> study_seeds(Run& r) {
  std::vector<SeedContext> v;
  for (auto s : r.opt.seeds) {
    RunConfig c = r.cfg;
    c.seed = s;
    r.log << "preparing seed " << s << "\n";
    v.push_back(prepare_seed(c));
  }
  return v;
}

inline void ablate_verb(Run& r) {
  const auto rows = run_ablation(default_ablation_grid(), study_seeds(r));
  r.write("ablation.csv", ablation_csv(rows));
  nlohmann::json acc = nlohmann::json::object();
  for (const auto& row : rows) acc[row.spec.name] = row.mean();
  r.report = {{"seeds", r.opt.seeds}, {"accuracy", acc}};
}

inline void sweep_verb(Run& r) {
  const auto rows = negative_count_sweep(study_seeds(r), r.opt.negatives);
  r.write("sweep.csv", sweep_csv(rows));
  nlohmann::json acc = nlohmann::json::object();
  for (const auto& row : rows) acc[std::to_string(row.n)] = row.mean_accuracy();
  r.report = {{"seeds", r.opt.seeds}, {"accuracy", acc}, {"linear_fit_deviation", linear_fit_deviation(rows)}};
}

inline const std::map<std::string, void (*)(Run&)>& verbs() {
  static const std::map<std::string, void (*)(Run&)> v = {
      {"gen-data", gen_data},          {"train-teacher", train_teacher_verb}, {"mine-pairs", mine_pairs_verb},
      {"distill", distill_verb},       {"adapt", adapt_verb},                 {"eval-verify", eval_verify_verb},
      {"eval-identify", eval_identify_verb}, {"ablate", ablate_verb},         {"sweep-negatives", sweep_verb},
      {"export-scores", export_scores_verb}};
  return v;
}

// ---------------------------------------------------------------------------
// Dispatch

inline const char* verb_help(const std::string& v) {
  static const std::map<std::string, const char*> h = {
      {"gen-data", "Generate the synthetic dataset"},
      {"train-teacher", "Train the HR teacher (--data)"},
      {"mine-pairs", "Mine hard-negative pairs with the teacher (--data, --teacher)"},
      {"distill", "Train an LR student in train.mode (--data, --teacher, --pairs)"},
      {"adapt", "Re-estimate BN statistics on an unlabeled split (--data, --model)"},
      {"eval-verify", "Verification accuracy of one or more models (--data, --model name=path ...)"},
      {"eval-identify", "Closed-set identification accuracy (--data, --model ...)"},
      {"ablate", "Component ablation over seeds (--seeds)"},
      {"sweep-negatives", "Accuracy and time over negative counts (--seeds, --negatives)"},
      {"export-scores", "Per-pair scores and histogram CSV (--data, --model)"}};
  return h.at(v);
}

// Verb-specific flags beyond the common ones.
inline std::string verb_inputs(const std::string& v) {
  static const std::map<std::string, std::string> in = {
      {"gen-data", ""},
      {"train-teacher", "data"},
      {"mine-pairs", "data teacher"},
      {"distill", "data teacher pairs"},
      {"adapt", "data model split"},
      {"eval-verify", "data teacher model split mode"},
      {"eval-identify", "data model split"},
      {"ablate", "seeds"},
      {"sweep-negatives", "seeds negatives"},
      {"export-scores", "data teacher model split mode"}};
  return in.at(v);
}

/// Runs one command. Returns 0 on success, 1 on usage errors and missing
/// inputs, 2 when the work itself fails.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"Instance and relation distillation for low-resolution face recognition", "aird"};
  app.require_subcommand(1);
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, fn] : verbs()) {
    (void)fn;
    CLI::App* s = app.add_subcommand(name, verb_help(name));
    s->add_option("--config", o.config, "Config file (# aird-config v1)");
    s->add_option("--out", o.out, "Output directory");
    s->add_option("--seed", o.seed, "Run seed");
    s->add_flag("--force", o.force, "Replace an existing output directory");
    s->add_option("--set", o.overrides, "Override key=value (repeatable)");
    const std::string use = verb_inputs(name);
    auto uses = [&](const char* f) { return use.find(f) != std::string::npos; };
    if (uses("data")) s->add_option("--data", o.data, "Dataset directory");
    if (uses("teacher")) s->add_option("--teacher", o.teacher, "Teacher run directory or checkpoint");
    if (uses("pairs")) s->add_option("--pairs", o.pairs, "Pair run directory or pair file");
    if (uses("model")) s->add_option("--model", o.models, "Model as name=path or a run directory (repeatable)");
    if (uses("split"))
      s->add_option("--split", o.split,
                    std::string("train, test or test_shifted (default ") + (name == "adapt" ? "test_shifted)" : "test)"));
    if (uses("mode")) s->add_option("--mode", o.verify_mode, "lrlr or lrhr")->capture_default_str();
    if (uses("seeds")) s->add_option("--seeds", o.seeds, "Comma-separated seeds")->delimiter(',');
    if (uses("negatives")) s->add_option("--negatives", o.negatives, "Comma-separated negative counts")->delimiter(',');
    subs[name] = s;
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  auto selected = [&]() -> CLI::App* {
    for (const auto& [name, s] : subs)
      if (s->parsed()) return s;
    return &app;
  };
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << selected()->help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "aird: " << e.what() << "\n" << selected()->help();
    return 1;
  }
  for (const auto& [name, s] : subs)
    if (s->parsed()) o.verb = name;

  // Everything that can be checked without doing work is checked here.
  RunConfig cfg;
  fs::path outdir;
  try {
    if (!o.config.empty()) {
      if (!fs::exists(o.config)) throw ConfigError("config file not found: '" + o.config + "'");
      cfg = load_config(o.config);
    }
    for (const auto& kv : o.overrides) apply_override(cfg, kv);
    if (o.seed) cfg.seed = *o.seed;
    cfg.validate();
    if (o.verb == "distill" && cfg.mode == TrainMode::teacher)
      throw ConfigError("distill: train.mode must be a student mode");
    if (o.split.empty()) o.split = o.verb == "adapt" ? "test_shifted" : "test";
    parse_split(o.split);
    parse_verify_mode(o.verify_mode);
    if (o.seeds.empty()) throw ConfigError("--seeds is empty");
    outdir = o.out.empty() ? default_out(o, cfg) : fs::path(o.out);
    if (fs::exists(outdir) && !o.force)
      throw ConfigError("output directory '" + outdir.string() + "' exists; pass --force to replace it");
  } catch (const Error& e) {
    err << "aird " << o.verb << ": " << e.what() << "\n" << subs.at(o.verb)->help();
    return 1;
  }

  const auto t0 = std::chrono::steady_clock::now();
  try {
    Run run(o, cfg, outdir, err);
    verbs().at(o.verb)(run);
    run.write("report.json", run.report.dump(2) + "\n");
    run.commit(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    out << run.report.dump(2) << "\n";
    return 0;
  } catch (const MissingArtifact& e) {
    err << "aird " << o.verb << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "aird " << o.verb << ": " << e.what() << "\n";
    return 2;
  }
}

inline int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args);
}

}  // namespace aird::cli
