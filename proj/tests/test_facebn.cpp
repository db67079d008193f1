#include <gtest/gtest.h>

#include "support.hpp"

using namespace aird;
using namespace aird::test;

TEST(AdaptStep, MomentumExample) {
  BNState s(1);
  s.running_mean[0] = 1.0;
  const Tensor batch({2, 1, 1, 1}, {-1.0, 1.0});  // mean 0, biased var 1
  facebn::adapt_step(s, batch, 0.1);
  EXPECT_NEAR(s.running_mean[0], 0.1, 1e-15);
  EXPECT_NEAR(s.running_var[0], 1.0, 1e-15);
  BNState u(1);
  facebn::adapt_step(u, batch, 0.1, true);  // unbiased var 2
  EXPECT_NEAR(u.running_var[0], 0.1 + 0.9 * 2.0, 1e-15);
}

TEST(AdaptStep, UnitMomentumLeavesStateUnchanged) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = between(rng, 1, 4);
    BNState s(c);
    for (std::size_t k = 0; k < c; ++k) {
      s.running_mean[k] = rng.normal();
      s.running_var[k] = rng.uniform(0.1, 3.0);
    }
    const BNState before = s;
    facebn::adapt_step(s, normal_tensor(rng, {between(rng, 2, 6), c, 3, 3}, 5.0), 1.0);
    EXPECT_EQ(s, before);
  }
}

TEST(AdaptStep, Errors) {
  BNState s(2);
  EXPECT_THROW(facebn::adapt_step(s, Tensor({1, 2, 2, 2}), 0.1), BatchSizeError);
  EXPECT_THROW(facebn::adapt_step(s, Tensor({4, 3, 2, 2}), 0.1), DimensionError);
  EXPECT_THROW(facebn::adapt_step(s, Tensor({4, 2, 2, 2}), 1.5), ConfigError);
}

namespace {

// Batches drawn i.i.d. from N(mean, var) per channel.
Tensor stationary_batch(Rng& rng, std::size_t m, const std::vector<double>& mean, const std::vector<double>& var,
                        std::size_t side) {
  const std::size_t c = mean.size();
  Tensor t({m, c, side, side});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < side * side; ++p)
        t[(i * c + ch) * side * side + p] = rng.normal(mean[ch], std::sqrt(var[ch]));
  return t;
}

}  // namespace

TEST(AdaptStep, ConvergesOnStationaryStream) {
  Rng rng(2);
  const std::vector<double> mean{5.0, -3.0, 1.5}, var{2.0, 0.5, 4.0};
  BNState s(3);
  for (int k = 0; k < 50; ++k) facebn::adapt_step(s, stationary_batch(rng, 256, mean, var, 16), 0.1);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_LT(std::abs(s.running_mean[c] - mean[c]), 0.02 * std::abs(mean[c]));
    EXPECT_LT(std::abs(s.running_var[c] - var[c]), 0.02 * var[c]);
  }
}

TEST(AdaptStep, StationaryFixedPointWithinSamplingNoise) {
  // With γ = 0.1 the state is dominated by the latest batch, so its spread
  // around the stream mean is the per-batch sampling noise σ/√(elements).
  Rng rng(3);
  const std::vector<double> mean{2.0}, var{9.0};
  const std::size_t m = 8, side = 4, elems = m * side * side;
  const double bound = 3.0 * std::sqrt(var[0] / static_cast<double>(elems));
  std::vector<Tensor> stream;
  for (int k = 0; k < 40; ++k) stream.push_back(stationary_batch(rng, m, mean, var, side));
  std::vector<double> finals;
  for (int shuffle = 0; shuffle < 5; ++shuffle) {
    rng.shuffle(stream);
    BNState s(1);
    for (const auto& b : stream) facebn::adapt_step(s, b, 0.1);
    EXPECT_LT(std::abs(s.running_mean[0] - mean[0]), bound);
    finals.push_back(s.running_mean[0]);
  }
  EXPECT_LT(std::ranges::max(finals) - std::ranges::min(finals), 2.0 * bound);
}

class AdaptNetworkTest : public ::testing::Test {
 protected:
  Rng rng{4};
  Network net{Architecture::student(4, 8), rng};
  Tensor images = shifted_images();

  Tensor shifted_images() {
    Tensor t = uniform_tensor(rng, {96, 1, 8, 8}, 0.0, 1.0);
    for (auto& v : t.data()) v = 0.3 * v + 0.6;
    return t;
  }
};

TEST_F(AdaptNetworkTest, OnlyRunningStatisticsChange) {
  const auto params = net.parameter_hash(), bn = net.bn_hash();
  const Network out = facebn::adapt_network(net, facebn::shuffled_stream(images, 32, 0, 7), {});
  EXPECT_EQ(out.parameter_hash(), params);
  EXPECT_NE(out.bn_hash(), bn);
  for (const auto& [name, t] : net.params()) EXPECT_EQ(out.params().at(name), t);
}

TEST_F(AdaptNetworkTest, UnitMomentumIsBitwiseNoOp) {
  facebn::AdaptConfig cfg;
  cfg.gamma = 1.0;
  const Network out = facebn::adapt_network(net, facebn::shuffled_stream(images, 32, 0, 7), cfg);
  EXPECT_EQ(serialize_checkpoint(out), serialize_checkpoint(net));
}

TEST_F(AdaptNetworkTest, DeterministicGivenStream) {
  const Network a = facebn::adapt_network(net, facebn::shuffled_stream(images, 16, 0, 9), {});
  const Network b = facebn::adapt_network(net, facebn::shuffled_stream(images, 16, 0, 9), {});
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
}

TEST_F(AdaptNetworkTest, EmptyStreamAndBadConfig) {
  EXPECT_THROW(facebn::adapt_network(net, [] { return std::optional<Tensor>{}; }, {}), ConfigError);
  facebn::AdaptConfig cfg;
  cfg.layer_filter = {"no_such_layer"};
  EXPECT_THROW(facebn::adapt_network(net, facebn::shuffled_stream(images, 32, 0, 7), cfg), ConfigError);
  cfg = {};
  cfg.batch_size = 1;
  EXPECT_THROW(facebn::adapt_network(net, facebn::shuffled_stream(images, 32, 0, 7), cfg), BatchSizeError);
}

TEST_F(AdaptNetworkTest, LayerFilterRestrictsUpdates) {
  facebn::AdaptConfig cfg;
  const std::string first = net.bn().begin()->first;
  cfg.layer_filter = {first};
  const Network out = facebn::adapt_network(net, facebn::shuffled_stream(images, 32, 0, 7), cfg);
  for (const auto& [name, s] : out.bn()) {
    if (name == first)
      EXPECT_NE(s, net.bn().at(name));
    else
      EXPECT_EQ(s, net.bn().at(name));
  }
}

TEST_F(AdaptNetworkTest, AdaptedStatisticsNormalizeTheTestStream) {
  // Several full-set batches, so the stale statistics have decayed by γ^5;
  // the normalized activations then have mean ≈ 0 and variance ≈ 1 per channel.
  facebn::AdaptConfig cfg;
  cfg.batch_size = 96;
  cfg.num_batches = 5;
  const Network out = facebn::adapt_network(net, facebn::shuffled_stream(images, 96, 5, 7), cfg);
  const auto truth = facebn::activation_stats(out, images);
  for (const auto& [name, s] : out.bn()) {
    const auto& ref = truth.at(name);
    for (std::size_t c = 0; c < s.channels(); ++c) {
      const double sd = std::sqrt(s.running_var[c] + kBatchNormEps);
      EXPECT_LT(std::abs((ref.mean[c] - s.running_mean[c]) / sd), 0.1) << name << " channel " << c;
      EXPECT_LT(std::abs(ref.var[c] / (sd * sd) - 1.0), 0.15) << name << " channel " << c;
    }
  }
}

TEST_F(AdaptNetworkTest, DistanceToTestStatisticsShrinks) {
  const Network out = facebn::adapt_network(net, facebn::shuffled_stream(images, 32, 0, 7), {});
  const auto truth = facebn::activation_stats(out, images);
  facebn::ShiftSummary sum;
  const auto diag = facebn::diagnostic(net, out, &truth, &sum);
  EXPECT_GT(sum.channels, 0u);
  EXPECT_GE(sum.fraction(), 0.9);
  EXPECT_EQ(diag.at("layers").size(), net.bn().size());
}

TEST(ShuffledStream, OnePassCoversEveryRowOnce) {
  Tensor rows({10, 1});
  for (std::size_t i = 0; i < 10; ++i) rows[i] = static_cast<double>(i);
  auto stream = facebn::shuffled_stream(rows, 4, 0, 3);
  std::vector<double> seen;
  while (auto b = stream()) seen.insert(seen.end(), b->data().begin(), b->data().end());
  std::ranges::sort(seen);
  ASSERT_EQ(seen.size(), 10u);  // 4 + 4 + 2
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen[i], static_cast<double>(i));
}
