#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "support.hpp"

using namespace aird;
using namespace aird::test;
using namespace aird::synth;

namespace {

DatasetConfig small_config() {
  DatasetConfig c;
  c.num_ids = 6;
  c.samples_per_id = 8;
  c.train_per_id = 4;
  return c;
}

double global_mean(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s / static_cast<double>(t.size());
}

// Direct 2-D resampler: every output pixel is a normalised weighted sum over
// the full input grid with the separable Catmull-Rom kernel stretched by the
// factor and indices clamped at the border.
Tensor reference_bicubic(const Tensor& img, std::size_t n, std::size_t f) {
  auto cubic = [](double x) {
    x = std::abs(x);
    if (x <= 1) return 1.5 * x * x * x - 2.5 * x * x + 1;
    if (x < 2) return -0.5 * x * x * x + 2.5 * x * x - 4 * x + 2;
    return 0.0;
  };
  const std::size_t m = n / f;
  const double fd = static_cast<double>(f);
  const long reach = static_cast<long>(2 * f + 2);
  Tensor out({m, m});
  for (std::size_t oy = 0; oy < m; ++oy)
    for (std::size_t ox = 0; ox < m; ++ox) {
      const double cy = (static_cast<double>(oy) + 0.5) * fd - 0.5, cx = (static_cast<double>(ox) + 0.5) * fd - 0.5;
      double acc = 0.0, wsum = 0.0;
      for (long ky = static_cast<long>(cy) - reach; ky <= static_cast<long>(cy) + reach; ++ky)
        for (long kx = static_cast<long>(cx) - reach; kx <= static_cast<long>(cx) + reach; ++kx) {
          const double w = cubic((static_cast<double>(ky) - cy) / fd) * cubic((static_cast<double>(kx) - cx) / fd);
          const auto iy = static_cast<std::size_t>(std::clamp<long>(ky, 0, static_cast<long>(n) - 1));
          const auto ix = static_cast<std::size_t>(std::clamp<long>(kx, 0, static_cast<long>(n) - 1));
          acc += w * img[iy * n + ix];
          wsum += w;
        }
      out[oy * m + ox] = std::clamp(acc / wsum, 0.0, 1.0);
    }
  return out;
}

}  // namespace

TEST(Downsample, ConstantStaysConstant) {
  for (auto k : {Kernel::bicubic, Kernel::area})
    for (double c : {0.0, 0.37, 1.0}) {
      const Tensor lr = downsample(Tensor({1, 1, 32, 32}, c), 4, k);
      EXPECT_EQ(lr.shape(), (Shape{1, 1, 8, 8}));
      for (double v : lr.data()) EXPECT_EQ(v, c);
    }
}

TEST(Downsample, FactorOneIsIdentity) {
  Rng rng(1);
  const Tensor img = uniform_tensor(rng, {2, 1, 9, 9}, 0.0, 1.0);
  EXPECT_EQ(downsample(img, 1), img);
}

TEST(Downsample, CheckerboardMatchesDirectConvolution) {
  Tensor board({32, 32});
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) board[y * 32 + x] = ((x / 3 + y / 2) % 2) ? 1.0 : 0.0;
  const Tensor got = downsample(board, 4);
  const Tensor want = reference_bicubic(board, 32, 4);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
}

TEST(Downsample, RandomImagesMatchDirectConvolution) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t f = between(rng, 2, 4), n = f * between(rng, 2, 6);
    const Tensor img = uniform_tensor(rng, {n, n}, 0.0, 1.0);
    const Tensor got = downsample(img, f), want = reference_bicubic(img, n, f);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
  }
}

TEST(Downsample, AreaKernelIsBlockMean) {
  Rng rng(3);
  const Tensor img = uniform_tensor(rng, {4, 4}, 0.0, 1.0);
  const Tensor lr = downsample(img, 2, Kernel::area);
  EXPECT_NEAR(lr[0], (img[0] + img[1] + img[4] + img[5]) / 4.0, 1e-15);
}

TEST(Downsample, Errors) {
  EXPECT_THROW(downsample(Tensor({1, 1, 30, 30}), 4), DimensionError);
  EXPECT_THROW(downsample(Tensor({1, 1, 32, 32}), 0), DimensionError);
  EXPECT_THROW(downsample(Tensor::vector({1, 2}), 2), DimensionError);
  EXPECT_THROW(parse_kernel("lanczos"), ConfigError);
}

TEST(Dataset, DeterministicAndWellFormed) {
  const auto cfg = small_config();
  const Dataset a = generate_dataset(cfg, 5), b = generate_dataset(cfg, 5);
  EXPECT_EQ(a.train.hr, b.train.hr);
  EXPECT_EQ(a.test_shifted.lr, b.test_shifted.lr);
  EXPECT_EQ(a.train.labels, b.train.labels);
  EXPECT_NE(generate_dataset(cfg, 6).train.hr, a.train.hr);

  EXPECT_EQ(a.train.size(), 24u);
  EXPECT_EQ(a.test.size(), 24u);
  EXPECT_EQ(a.train.lr.shape(), (Shape{24, 1, 8, 8}));
  for (const Split* s : {&a.train, &a.test, &a.test_shifted}) {
    EXPECT_EQ(s->lr, downsample(s->hr, cfg.lr_factor, cfg.kernel));
    for (double v : s->hr.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
  EXPECT_TRUE(a.test_shifted.shift_applied);
  EXPECT_FALSE(a.test.shift_applied);
  const SampleRecord r = a.record(SplitKind::test, 3);
  EXPECT_EQ(r.lr_image, downsample(r.hr_image, 4));
  EXPECT_EQ(r.label, a.test.labels[3]);
}

TEST(Dataset, IdentitiesAreSeparated) {
  const auto cfg = small_config();
  const auto ids = sample_identities(cfg, 9);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      const auto a = ids[i].latent(), b = ids[j].latent();
      double d = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) d += (a[k] - b[k]) * (a[k] - b[k]);
      EXPECT_GE(std::sqrt(d), cfg.min_latent_distance);
    }
}

TEST(Dataset, ShiftControlsGlobalMean) {
  DatasetConfig cfg = small_config();
  cfg.num_ids = 16;
  cfg.samples_per_id = 20;
  cfg.train_per_id = 10;
  cfg.shift.enabled = false;
  const Dataset plain = generate_dataset(cfg, 11);
  EXPECT_LT(std::abs(global_mean(plain.test.hr) - global_mean(plain.train.hr)), 0.01);
  EXPECT_EQ(plain.test_shifted.hr, plain.test.hr);

  cfg.shift = {true, 0.2, 1.0, 0.0, 0.0};
  const Dataset bright = generate_dataset(cfg, 11);
  EXPECT_NEAR(global_mean(bright.test_shifted.hr) - global_mean(bright.train.hr), 0.2, 0.01);
}

TEST(Dataset, InvalidConfigRejected) {
  auto cfg = small_config();
  cfg.num_ids = 1;
  EXPECT_THROW(generate_dataset(cfg, 1), ConfigError);
  cfg = small_config();
  cfg.train_per_id = cfg.samples_per_id;
  EXPECT_THROW(generate_dataset(cfg, 1), ConfigError);
  cfg = small_config();
  cfg.lr_factor = 5;
  EXPECT_THROW(generate_dataset(cfg, 1), ConfigError);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const Dataset d = generate_dataset(small_config(), 3);
  const auto dir = std::filesystem::temp_directory_path() / "aird_dataset_test";
  std::filesystem::remove_all(dir);
  save_dataset(d, dir);
  const Dataset back = load_dataset(dir);
  EXPECT_EQ(back.seed, d.seed);
  EXPECT_EQ(to_json(back.config), to_json(d.config));
  EXPECT_EQ(back.train.hr, d.train.hr);
  EXPECT_EQ(back.test_shifted.lr, d.test_shifted.lr);
  EXPECT_EQ(back.test.labels, d.test.labels);
  // A flipped byte is caught by the checksum.
  std::string bytes = io::read_file(dir / "train_hr.f64");
  bytes[17] ^= 0x01;
  io::write_file(dir / "train_hr.f64", bytes);
  EXPECT_THROW(load_dataset(dir), FormatError);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_dataset(dir), ConfigError);
}

TEST(VerifyProtocol, BalancedAndLabelledCorrectly) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto labels = random_labels(rng, 60, between(rng, 3, 8));
    const auto pairs = build_verify_protocol(labels, 100, trial);
    ASSERT_EQ(pairs.size(), 100u);
    std::size_t pos = 0;
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& p : pairs) {
      EXPECT_EQ(p.same, labels[p.a] == labels[p.b]);
      EXPECT_NE(p.a, p.b);
      EXPECT_TRUE(seen.insert({p.a, p.b}).second);
      pos += p.same;
    }
    EXPECT_EQ(pos, 50u);
    EXPECT_EQ(parse_verify_protocol(format_verify_protocol(pairs)), pairs);
    EXPECT_EQ(build_verify_protocol(labels, 100, trial), pairs);
  }
}

TEST(VerifyProtocol, ShortfallIsReported) {
  const std::vector<std::size_t> labels{0, 0, 1, 1};  // 2 positive, 4 negative pairs
  try {
    build_verify_protocol(labels, 6, 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("short by 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(build_verify_protocol(labels, 3, 1), ConfigError);
  EXPECT_THROW(parse_verify_protocol("1 2 7\n"), FormatError);
}

TEST(IdentifyProtocol, GalleryCoversEveryProbeAndIsDisjoint) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t ids = between(rng, 2, 6), per = between(rng, 3, 6);
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < ids; ++i)
      for (std::size_t k = 0; k < per; ++k) labels.push_back(i);
    rng.shuffle(labels);
    const std::size_t g = between(rng, 1, per - 1);
    const auto p = build_identify_protocol(labels, g, trial);
    EXPECT_EQ(p.gallery.size(), ids * g);
    EXPECT_EQ(p.gallery.size() + p.probes.size(), labels.size());
    std::set<std::size_t> gset(p.gallery.begin(), p.gallery.end()), glabels;
    for (auto i : p.gallery) glabels.insert(labels[i]);
    for (auto i : p.probes) {
      EXPECT_FALSE(gset.count(i));
      EXPECT_TRUE(glabels.count(labels[i]));
    }
    const auto back = parse_identify_protocol(format_identify_protocol(p));
    EXPECT_EQ(back.gallery, p.gallery);
    EXPECT_EQ(back.probes, p.probes);
  }
  EXPECT_THROW(build_identify_protocol(std::vector<std::size_t>{0, 0, 1}, 1, 1), ConfigError);
  EXPECT_THROW(build_identify_protocol(std::vector<std::size_t>{0, 0, 1, 1}, 0, 1), ConfigError);
}
