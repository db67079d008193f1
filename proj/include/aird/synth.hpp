#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aird/io.hpp"
#include "aird/rng.hpp"
#include "aird/tensor.hpp"

namespace aird::synth {

// ---------------------------------------------------------------------------
// Resampling

enum class Kernel { bicubic, area };

inline Kernel parse_kernel(std::string_view s) {
  if (s == "bicubic") return Kernel::bicubic;
  if (s == "area") return Kernel::area;
  throw ConfigError("unknown resampling kernel '" + std::string(s) + "'");
}
inline std::string kernel_name(Kernel k) { return k == Kernel::bicubic ? "bicubic" : "area"; }

// Catmull-Rom cubic, a = -0.5.
inline double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

struct Taps {
  std::vector<std::size_t> index;
  std::vector<double> weight;
  std::size_t ref = 0;  // position in index of the tap nearest the sample centre
};

// Antialiased 1-D taps for output sample `o` when shrinking by `factor`, with
// edge clamping; weights are normalised to sum to one.
inline std::vector<Taps> resample_taps(std::size_t in, std::size_t factor, Kernel kernel) {
  std::vector<Taps> out(in / factor);
  const double f = static_cast<double>(factor);
  for (std::size_t o = 0; o < out.size(); ++o) {
    Taps& t = out[o];
    const double centre = (static_cast<double>(o) + 0.5) * f - 0.5;
    if (kernel == Kernel::area) {
      for (std::size_t k = 0; k < factor; ++k) {
        t.index.push_back(o * factor + k);
        t.weight.push_back(1.0 / f);
      }
      t.ref = 0;
      continue;
    }
    const double support = 2.0 * f;
    const auto lo = static_cast<std::ptrdiff_t>(std::floor(centre - support));
    const auto hi = static_cast<std::ptrdiff_t>(std::ceil(centre + support));
    double total = 0.0, best = 1e300;
    for (std::ptrdiff_t k = lo; k <= hi; ++k) {
      const double w = cubic_weight((static_cast<double>(k) - centre) / f);
      if (w == 0.0) continue;
      const auto idx = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(k, 0, static_cast<std::ptrdiff_t>(in) - 1));
      if (std::abs(static_cast<double>(k) - centre) < best) {
        best = std::abs(static_cast<double>(k) - centre);
        t.ref = t.index.size();
      }
      t.index.push_back(idx);
      t.weight.push_back(w);
      total += w;
    }
    for (auto& w : t.weight) w /= total;
  }
  return out;
}

namespace detail {
// ref + Σ w·(x − ref): reproduces constant inputs exactly.
inline double apply_taps(const Taps& t, const double* src, std::size_t stride) {
  const double ref = src[t.index[t.ref] * stride];
  double acc = 0.0;
  for (std::size_t k = 0; k < t.index.size(); ++k) acc += t.weight[k] * (src[t.index[k] * stride] - ref);
  return ref + acc;
}
}  // namespace detail

/// Downsamples the trailing H×W plane(s) of `hr` by `factor`; output clamped to [0, 1].
inline Tensor downsample(const Tensor& hr, std::size_t factor, Kernel kernel = Kernel::bicubic) {
  if (hr.rank() < 2) throw DimensionError("downsample: need at least H×W, got " + to_string(hr.shape()));
  const std::size_t h = hr.dim(hr.rank() - 2), w = hr.dim(hr.rank() - 1);
  if (factor == 0 || h % factor || w % factor)
    throw DimensionError("downsample: factor " + std::to_string(factor) + " does not divide " + to_string(hr.shape()));
  const std::size_t planes = hr.size() / (h * w), oh = h / factor, ow = w / factor;
  Shape os = hr.shape();
  os[os.size() - 2] = oh;
  os[os.size() - 1] = ow;
  Tensor out(os);
  if (factor == 1) {
    out = Tensor(os, hr.storage());
    for (auto& v : out.data()) v = std::clamp(v, 0.0, 1.0);
    return out;
  }
  const auto tx = resample_taps(w, factor, kernel);
  const auto ty = resample_taps(h, factor, kernel);
  std::vector<double> rows(h * ow);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = hr.data().data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < ow; ++x) rows[y * ow + x] = detail::apply_taps(tx[x], src + y * w, 1);
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        out[p * oh * ow + y * ow + x] = std::clamp(detail::apply_taps(ty[y], rows.data() + x, ow), 0.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Identities and rendering

/// Low-dimensional appearance latent of one identity.
struct IdentitySpec {
  std::size_t id = 0;
  std::uint64_t seed = 0;
  double base = 0.4;
  struct Blob {
    double x, y, sigma, amp;
  };
  std::vector<Blob> blobs;
  double stroke_angle = 0.0;
  double stroke_freq = 0.1;  // cycles per HR pixel
  double stroke_phase = 0.0;
  double stroke_amp = 0.05;

  std::vector<double> latent() const {
    std::vector<double> v{base * 4.0, std::cos(2 * stroke_angle), std::sin(2 * stroke_angle), stroke_freq * 10.0};
    for (const auto& b : blobs) {
      v.push_back(b.x / 8.0);
      v.push_back(b.y / 8.0);
      v.push_back(b.amp * 5.0);
    }
    return v;
  }
};

struct ShiftConfig {
  bool enabled = true;
  double brightness = 0.12;
  double contrast = 0.6;
  double blur_sigma = 0.9;  // HR pixels; 0 disables
  double noise = 0.03;
};

struct DatasetConfig {
  std::size_t num_ids = 16;
  std::size_t samples_per_id = 20;
  std::size_t train_per_id = 14;
  std::size_t hr_size = 32;
  std::size_t lr_factor = 4;
  Kernel kernel = Kernel::bicubic;
  std::size_t blobs = 4;
  double min_latent_distance = 1.2;
  double jitter_shift = 2.5;   // HR pixels
  double jitter_rotate = 0.25;  // radians
  double gain_range = 0.2;
  double noise = 0.05;
  double occluder_amp = 0.25;
  double blob_amp = 0.15;       // identity blobs: amplitude drawn from ±blob_amp
  double stroke_amp = 0.15;     // identity stroke texture: amplitude in [stroke_amp/2, stroke_amp]
  double stroke_freq_lo = 0.15;  // cycles per HR pixel
  double stroke_freq_hi = 0.3;
  ShiftConfig shift;

  std::size_t lr_size() const { return hr_size / lr_factor; }

  void validate() const {
    if (num_ids < 2) throw ConfigError("dataset: num_ids must be >= 2");
    if (samples_per_id < 2) throw ConfigError("dataset: samples_per_id must be >= 2");
    if (train_per_id == 0 || train_per_id >= samples_per_id)
      throw ConfigError("dataset: train_per_id must lie in [1, samples_per_id)");
    if (lr_factor == 0 || hr_size % lr_factor) throw ConfigError("dataset: lr_factor must divide hr_size");
    if (blob_amp < 0 || stroke_amp < 0 || !(stroke_freq_lo > 0) || stroke_freq_hi < stroke_freq_lo)
      throw ConfigError("dataset: blob/stroke amplitudes must be >= 0 and 0 < stroke_freq_lo <= stroke_freq_hi");
    if (noise < 0 || shift.noise < 0 || shift.blur_sigma < 0 || shift.contrast <= 0)
      throw ConfigError("dataset: noise/blur must be >= 0 and contrast > 0");
  }
};

inline IdentitySpec sample_identity(std::size_t id, std::uint64_t seed, const DatasetConfig& cfg) {
  Rng rng(seed);
  IdentitySpec s;
  s.id = id;
  s.seed = seed;
  const double size = static_cast<double>(cfg.hr_size);
  s.base = rng.uniform(0.3, 0.45);
  for (std::size_t b = 0; b < cfg.blobs; ++b)
    s.blobs.push_back({rng.uniform(0.25, 0.75) * size, rng.uniform(0.25, 0.75) * size, rng.uniform(2.0, 4.5),
                       rng.uniform(-cfg.blob_amp, cfg.blob_amp)});
  s.stroke_angle = rng.uniform(0.0, std::numbers::pi);
  s.stroke_freq = rng.uniform(cfg.stroke_freq_lo, cfg.stroke_freq_hi);
  s.stroke_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  s.stroke_amp = rng.uniform(cfg.stroke_amp / 2.0, cfg.stroke_amp);
  return s;
}

// Identities rejection-sampled so latents stay at least min_latent_distance apart.
inline std::vector<IdentitySpec> sample_identities(const DatasetConfig& cfg, std::uint64_t seed) {
  std::vector<IdentitySpec> ids;
  Rng rng(seed, "identities");
  for (std::size_t id = 0; id < cfg.num_ids; ++id) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw ConfigError("dataset: cannot place identities at the requested latent distance");
      IdentitySpec s = sample_identity(id, rng.bits(), cfg);
      const auto la = s.latent();
      bool ok = true;
      for (const auto& o : ids) {
        const auto lb = o.latent();
        double d = 0.0;
        for (std::size_t k = 0; k < la.size(); ++k) d += (la[k] - lb[k]) * (la[k] - lb[k]);
        if (std::sqrt(d) < cfg.min_latent_distance) {
          ok = false;
          break;
        }
      }
      if (ok) {
        ids.push_back(std::move(s));
        break;
      }
    }
  }
  return ids;
}

inline double canonical_intensity(const IdentitySpec& s, double x, double y, double size) {
  double v = s.base;
  for (const auto& b : s.blobs) {
    const double dx = x - b.x, dy = y - b.y;
    v += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
  }
  const double c = size / 2.0;
  const double t = (x - c) * std::cos(s.stroke_angle) + (y - c) * std::sin(s.stroke_angle);
  const double env = std::exp(-((x - c) * (x - c) + (y - c) * (y - c)) / (2.0 * (size / 3.0) * (size / 3.0)));
  v += s.stroke_amp * env * std::cos(2.0 * std::numbers::pi * s.stroke_freq * t + s.stroke_phase);
  return v;
}

// One HR sample: canonical appearance under a random similarity transform,
// illumination gain/offset, a random occluding blob and pixel noise.
inline Tensor render_sample(const IdentitySpec& s, const DatasetConfig& cfg, Rng& rng) {
  const std::size_t n = cfg.hr_size;
  const double size = static_cast<double>(n), c = size / 2.0;
  const double ang = rng.uniform(-cfg.jitter_rotate, cfg.jitter_rotate);
  const double tx = rng.uniform(-cfg.jitter_shift, cfg.jitter_shift);
  const double ty = rng.uniform(-cfg.jitter_shift, cfg.jitter_shift);
  const double gain = rng.uniform(1.0 - cfg.gain_range, 1.0 + cfg.gain_range);
  const double offset = rng.uniform(-0.05, 0.05);
  const double ox = rng.uniform(0.15, 0.85) * size, oy = rng.uniform(0.15, 0.85) * size;
  const double oamp = rng.uniform(-cfg.occluder_amp, cfg.occluder_amp), osig = rng.uniform(2.0, 4.0);
  const double ca = std::cos(ang), sa = std::sin(ang);
  Tensor img({1, n, n});
  for (std::size_t yi = 0; yi < n; ++yi)
    for (std::size_t xi = 0; xi < n; ++xi) {
      const double qx = static_cast<double>(xi) + 0.5 - c - tx, qy = static_cast<double>(yi) + 0.5 - c - ty;
      const double px = ca * qx + sa * qy + c, py = -sa * qx + ca * qy + c;
      double v = gain * canonical_intensity(s, px, py, size) + offset;
      const double dx = static_cast<double>(xi) + 0.5 - ox, dy = static_cast<double>(yi) + 0.5 - oy;
      v += oamp * std::exp(-(dx * dx + dy * dy) / (2.0 * osig * osig));
      v += cfg.noise * rng.normal();
      img[yi * n + xi] = std::clamp(v, 0.0, 1.0);
    }
  return img;
}

inline Tensor gaussian_blur(const Tensor& img, double sigma) {
  if (sigma <= 0.0) return img;
  const std::size_t h = img.dim(img.rank() - 2), w = img.dim(img.rank() - 1);
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double tot = 0.0;
  for (int i = -r; i <= r; ++i) tot += (k[i + r] = std::exp(-i * i / (2.0 * sigma * sigma)));
  for (auto& v : k) v /= tot;
  Tensor tmp(img.shape()), out(img.shape());
  auto at = [](std::ptrdiff_t i, std::size_t n) { return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1)); };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * img[y * w + at(static_cast<std::ptrdiff_t>(x) + i, w)];
      tmp[y * w + x] = s;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp[at(static_cast<std::ptrdiff_t>(y) + i, h) * w + x];
      out[y * w + x] = s;
    }
  return out;
}

// Test-time degradation: contrast about 0.5, brightness offset, blur, noise.
inline Tensor apply_shift(const Tensor& img, const ShiftConfig& s, Rng& rng) {
  Tensor out = img;
  for (auto& v : out.data()) v = (v - 0.5) * s.contrast + 0.5 + s.brightness;
  out = gaussian_blur(out, s.blur_sigma);
  for (auto& v : out.data()) v = std::clamp(v + (s.noise > 0 ? s.noise * rng.normal() : 0.0), 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset

enum class SplitKind { train, test, test_shifted };

inline std::string split_name(SplitKind k) {
  switch (k) {
    case SplitKind::train: return "train";
    case SplitKind::test: return "test";
    case SplitKind::test_shifted: return "test_shifted";
  }
  return "?";
}

struct Split {
  Tensor hr;  // [N×1×H×H]
  Tensor lr;  // [N×1×h×h], downsample(hr)
  std::vector<std::size_t> labels;
  bool shift_applied = false;
  std::size_t size() const { return labels.size(); }
};

struct SampleRecord {
  Tensor hr_image;
  Tensor lr_image;
  std::size_t label;
  SplitKind split;
  bool shift_applied;
};

/// Train, clean test and shifted test splits. test_shifted holds the same
/// underlying test samples passed through ShiftConfig (a copy of test when the
/// shift is disabled).
struct Dataset {
  DatasetConfig config;
  std::uint64_t seed = 0;
  Split train, test, test_shifted;

  const Split& split(SplitKind k) const {
    return k == SplitKind::train ? train : k == SplitKind::test ? test : test_shifted;
  }

  SampleRecord record(SplitKind k, std::size_t i) const {
    const Split& s = split(k);
    const std::size_t hs = config.hr_size, ls = config.lr_size();
    auto slice = [i](const Tensor& t, std::size_t side) {
      const std::size_t per = side * side;
      return Tensor({1, side, side}, std::vector<double>(t.data().begin() + i * per, t.data().begin() + (i + 1) * per));
    };
    return {slice(s.hr, hs), slice(s.lr, ls), s.labels.at(i), k, s.shift_applied};
  }
};

namespace detail {
inline Split assemble(std::vector<Tensor>& imgs, std::vector<std::size_t> labels, const DatasetConfig& cfg, bool shifted) {
  const std::size_t n = imgs.size(), hs = cfg.hr_size;
  Tensor hr({n, 1, hs, hs});
  for (std::size_t i = 0; i < n; ++i) std::copy(imgs[i].data().begin(), imgs[i].data().end(), hr.data().begin() + i * hs * hs);
  Tensor lr = downsample(hr, cfg.lr_factor, cfg.kernel);
  return {std::move(hr), std::move(lr), std::move(labels), shifted};
}
}  // namespace detail

/// Pure function of (config, seed). Order: identity, then sample index.
inline Dataset generate_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto ids = sample_identities(cfg, seed);
  std::vector<Tensor> tr, te, ts;
  std::vector<std::size_t> ltr, lte;
  for (const auto& id : ids) {
    Rng rng(seed, "samples/" + std::to_string(id.id));
    Rng shift_rng(seed, "shift/" + std::to_string(id.id));
    for (std::size_t k = 0; k < cfg.samples_per_id; ++k) {
      Tensor img = render_sample(id, cfg, rng);
      if (k < cfg.train_per_id) {
        tr.push_back(std::move(img));
        ltr.push_back(id.id);
      } else {
        ts.push_back(cfg.shift.enabled ? apply_shift(img, cfg.shift, shift_rng) : img);
        te.push_back(std::move(img));
        lte.push_back(id.id);
      }
    }
  }
  Dataset d;
  d.config = cfg;
  d.seed = seed;
  d.train = detail::assemble(tr, ltr, cfg, false);
  d.test = detail::assemble(te, lte, cfg, false);
  d.test_shifted = detail::assemble(ts, lte, cfg, cfg.shift.enabled);
  return d;
}

// ---------------------------------------------------------------------------
// Evaluation protocols

struct VerifyPair {
  std::size_t a;  // probe (LR)
  std::size_t b;  // gallery (LR or HR)
  bool same;
  friend bool operator==(const VerifyPair&, const VerifyPair&) = default;
};

struct IdentifyProtocol {
  std::vector<std::size_t> gallery;
  std::vector<std::size_t> probes;
};

/// Balanced verification pairs over one split: pair_count/2 distinct
/// same-identity pairs and pair_count/2 distinct different-identity pairs.
inline std::vector<VerifyPair> build_verify_protocol(std::span<const std::size_t> labels, std::size_t pair_count,
                                                     std::uint64_t seed) {
  if (pair_count == 0 || pair_count % 2) throw ConfigError("protocol: pair_count must be a positive even number");
  const std::size_t half = pair_count / 2, n = labels.size();
  std::vector<VerifyPair> pos, neg;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) (labels[i] == labels[j] ? pos : neg).push_back({i, j, labels[i] == labels[j]});
  if (pos.size() < half || neg.size() < half)
    throw ConfigError("protocol: need " + std::to_string(half) + " positive and negative pairs, have " +
                      std::to_string(pos.size()) + " positive and " + std::to_string(neg.size()) +
                      " negative (short by " +
                      std::to_string(std::max(half, pos.size()) - pos.size() + std::max(half, neg.size()) - neg.size()) +
                      ")");
  Rng rng(seed, "protocol/verify");
  rng.shuffle(pos);
  rng.shuffle(neg);
  std::vector<VerifyPair> out;
  for (std::size_t k = 0; k < half; ++k) {
    out.push_back(pos[k]);
    out.push_back(neg[k]);
  }
  return out;
}

/// Gallery/probe partition: gallery_per_id samples of every identity go to the
/// gallery, the remainder are probes.
inline IdentifyProtocol build_identify_protocol(std::span<const std::size_t> labels, std::size_t gallery_per_id,
                                                std::uint64_t seed) {
  if (gallery_per_id == 0) throw ConfigError("protocol: gallery_per_id must be positive");
  std::map<std::size_t, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < labels.size(); ++i) by_id[labels[i]].push_back(i);
  Rng rng(seed, "protocol/identify");
  IdentifyProtocol p;
  for (auto& [id, idx] : by_id) {
    if (idx.size() <= gallery_per_id)
      throw ConfigError("protocol: identity " + std::to_string(id) + " has " + std::to_string(idx.size()) +
                        " samples, needs " + std::to_string(gallery_per_id + 1) + " (short by " +
                        std::to_string(gallery_per_id + 1 - idx.size()) + ")");
    rng.shuffle(idx);
    p.gallery.insert(p.gallery.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(gallery_per_id));
    p.probes.insert(p.probes.end(), idx.begin() + static_cast<std::ptrdiff_t>(gallery_per_id), idx.end());
  }
  std::sort(p.gallery.begin(), p.gallery.end());
  std::sort(p.probes.begin(), p.probes.end());
  return p;
}

inline std::string format_verify_protocol(const std::vector<VerifyPair>& pairs) {
  std::string s = "# aird verify protocol v1: idx_a idx_b label_same\n";
  for (const auto& p : pairs) s += std::to_string(p.a) + " " + std::to_string(p.b) + " " + (p.same ? "1" : "0") + "\n";
  return s;
}

inline std::vector<VerifyPair> parse_verify_protocol(std::string_view text) {
  std::vector<VerifyPair> out;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::size_t a, b;
    int same;
    if (!(ls >> a >> b >> same) || (same != 0 && same != 1)) throw FormatError("verify protocol: bad line '" + line + "'");
    out.push_back({a, b, same == 1});
  }
  return out;
}

// One entry per line: "g idx" for gallery, "p idx" for probes.
inline std::string format_identify_protocol(const IdentifyProtocol& p) {
  std::string s = "# aird identify protocol v1: role idx\n";
  for (auto i : p.gallery) s += "g " + std::to_string(i) + "\n";
  for (auto i : p.probes) s += "p " + std::to_string(i) + "\n";
  return s;
}

inline IdentifyProtocol parse_identify_protocol(std::string_view text) {
  IdentifyProtocol p;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string role;
    std::size_t idx;
    if (!(ls >> role >> idx) || (role != "g" && role != "p")) throw FormatError("identify protocol: bad line '" + line + "'");
    (role == "g" ? p.gallery : p.probes).push_back(idx);
  }
  return p;
}

// ---------------------------------------------------------------------------
// On-disk form: manifest.json + one little-endian f64 block per split/resolution.

inline nlohmann::json to_json(const DatasetConfig& c) {
  return {{"num_ids", c.num_ids},
          {"samples_per_id", c.samples_per_id},
          {"train_per_id", c.train_per_id},
          {"hr_size", c.hr_size},
          {"lr_factor", c.lr_factor},
          {"kernel", kernel_name(c.kernel)},
          {"blobs", c.blobs},
          {"min_latent_distance", c.min_latent_distance},
          {"jitter_shift", c.jitter_shift},
          {"jitter_rotate", c.jitter_rotate},
          {"gain_range", c.gain_range},
          {"noise", c.noise},
          {"occluder_amp", c.occluder_amp},
          {"blob_amp", c.blob_amp},
          {"stroke_amp", c.stroke_amp},
          {"stroke_freq_lo", c.stroke_freq_lo},
          {"stroke_freq_hi", c.stroke_freq_hi},
          {"shift",
           {{"enabled", c.shift.enabled},
            {"brightness", c.shift.brightness},
            {"contrast", c.shift.contrast},
            {"blur_sigma", c.shift.blur_sigma},
            {"noise", c.shift.noise}}}};
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  c.num_ids = j.at("num_ids");
  c.samples_per_id = j.at("samples_per_id");
  c.train_per_id = j.at("train_per_id");
  c.hr_size = j.at("hr_size");
  c.lr_factor = j.at("lr_factor");
  c.kernel = parse_kernel(j.at("kernel").get<std::string>());
  c.blobs = j.at("blobs");
  c.min_latent_distance = j.at("min_latent_distance");
  c.jitter_shift = j.at("jitter_shift");
  c.jitter_rotate = j.at("jitter_rotate");
  c.gain_range = j.at("gain_range");
  c.noise = j.at("noise");
  c.occluder_amp = j.at("occluder_amp");
  c.blob_amp = j.at("blob_amp");
  c.stroke_amp = j.at("stroke_amp");
  c.stroke_freq_lo = j.at("stroke_freq_lo");
  c.stroke_freq_hi = j.at("stroke_freq_hi");
  const auto& s = j.at("shift");
  c.shift = {s.at("enabled"), s.at("brightness"), s.at("contrast"), s.at("blur_sigma"), s.at("noise")};
  return c;
}

inline std::string tensor_block(const Tensor& t) {
  io::Writer w;
  w.f64s(t.data());
  return w.buffer();
}

// Returns the manifest written (it carries per-block checksums).
inline nlohmann::json save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format"] = 1;
  m["seed"] = d.seed;
  m["config"] = to_json(d.config);
  for (auto k : {SplitKind::train, SplitKind::test, SplitKind::test_shifted}) {
    const Split& s = d.split(k);
    const std::string name = split_name(k);
    nlohmann::json sj;
    sj["count"] = s.size();
    sj["labels"] = s.labels;
    sj["shift_applied"] = s.shift_applied;
    for (auto [res, t] : {std::pair{"hr", &s.hr}, std::pair{"lr", &s.lr}}) {
      const std::string file = name + "_" + res + ".f64";
      const std::string bytes = tensor_block(*t);
      io::write_file(dir / file, bytes);
      sj[res] = {{"file", file}, {"shape", t->shape()}, {"checksum", io::checksum(bytes)}};
    }
    m["splits"][name] = sj;
  }
  io::write_file(dir / "manifest.json", m.dump(2) + "\n");
  return m;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  if (!std::filesystem::exists(mpath)) throw ConfigError("dataset manifest not found: '" + mpath.string() + "'");
  const auto m = nlohmann::json::parse(io::read_file(mpath));
  if (m.at("format") != 1) throw FormatError("dataset: unsupported manifest format");
  Dataset d;
  d.seed = m.at("seed");
  d.config = dataset_config_from_json(m.at("config"));
  for (auto k : {SplitKind::train, SplitKind::test, SplitKind::test_shifted}) {
    const auto& sj = m.at("splits").at(split_name(k));
    Split s;
    s.labels = sj.at("labels").get<std::vector<std::size_t>>();
    s.shift_applied = sj.at("shift_applied");
    for (auto [res, t] : {std::pair{"hr", &s.hr}, std::pair{"lr", &s.lr}}) {
      const auto& bj = sj.at(res);
      const std::string bytes = io::read_file(dir / bj.at("file").get<std::string>());
      if (io::checksum(bytes) != bj.at("checksum").get<std::string>())
        throw FormatError("dataset: checksum mismatch for " + bj.at("file").get<std::string>());
      Shape shape = bj.at("shape").get<Shape>();
      io::Reader r(bytes);
      *t = Tensor(shape, r.f64s(shape_size(shape)));
    }
    (k == SplitKind::train ? d.train : k == SplitKind::test ? d.test : d.test_shifted) = std::move(s);
  }
  return d;
}

}  // namespace aird::synth
