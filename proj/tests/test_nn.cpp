#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"

using namespace aird;
using namespace aird::test;

TEST(Conv2d, OneByOneIdentityAndZeroWeights) {
  Rng rng(1);
  const Tensor x = uniform_tensor(rng, {2, 3, 4, 4});
  Graph g;
  EXPECT_EQ(conv2d(g.constant(x), g.constant(Tensor::eye(3)), 1).value(), x);
  const Tensor z = conv2d(g.constant(x), g.constant(Tensor({27, 2})), 3, 1, 1).value();
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesDirectCrossCorrelation) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = between(rng, 1, 3), o = between(rng, 1, 3), h = between(rng, 3, 6), pad = rng.index(2);
    const Tensor x = uniform_tensor(rng, {2, c, h, h}), w = uniform_tensor(rng, {c * 9, o});
    Graph g;
    const Tensor y = conv2d(g.constant(x), g.constant(w), 3, 1, pad).value();
    const std::size_t ho = h + 2 * pad - 2;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t oc = 0; oc < o; ++oc)
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < ho; ++ox) {
            double s = 0.0;
            for (std::size_t ic = 0; ic < c; ++ic)
              for (std::size_t ky = 0; ky < 3; ++ky)
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
                  const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
                  if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(h)) continue;
                  s += x[((b * c + ic) * h + iy) * h + ix] * w[(ic * 9 + ky * 3 + kx) * o + oc];
                }
            EXPECT_NEAR(y[((b * o + oc) * ho + oy) * ho + ox], s, 1e-12);
          }
  }
}

TEST(Conv2d, GradientOnSpecShape) {
  Rng rng(3);
  const double err = grad_check([](Graph&, const std::vector<Var>& v) { return conv2d(v[0], v[1], 3, 1, 1); },
                                {uniform_tensor(rng, {1, 2, 5, 5}), uniform_tensor(rng, {18, 2})}, rng);
  EXPECT_LT(err, 1e-4);
}

namespace {
Var bn(Graph& g, const Tensor& x, const Tensor& s, const Tensor& t, BNState& st, BNMode m) {
  return batchnorm(g.constant(x), g.constant(s), g.constant(t), st, m);
}
}  // namespace

TEST(BatchNorm, EvalWithUnitStatsIsIdentity) {
  Rng rng(4);
  const Tensor x = uniform_tensor(rng, {3, 2, 2, 2});
  BNState st(2);
  Graph g;
  const Tensor y = bn(g, x, Tensor({2}, 1.0), Tensor({2}, 0.0), st, BNMode::eval).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
  EXPECT_EQ(st, BNState(2));
}

TEST(BatchNorm, TrainOutputHasShiftMeanAndScaleVariance) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = between(rng, 2, 6), c = between(rng, 1, 4), s = between(rng, 1, 3);
    // Nondegenerate batches only: every channel variance at least 1, so the
    // epsilon in the denominator stays below the tolerance.
    Tensor x;
    do {
      x = normal_tensor(rng, {b, c, s, s}, rng.uniform(1.0, 3.0));
    } while (std::ranges::min(channel_moments(x).var) < 1.0);
    for (auto& v : x.data()) v += 2.0;
    const Tensor sc = uniform_tensor(rng, {c}, 0.5, 2.0), sh = uniform_tensor(rng, {c});
    BNState st(c);
    Graph g;
    const ChannelMoments m = channel_moments(bn(g, x, sc, sh, st, BNMode::train).value());
    for (std::size_t ch = 0; ch < c; ++ch) {
      EXPECT_NEAR(m.mean[ch], sh[ch], 1e-6);
      EXPECT_NEAR(m.var[ch], sc[ch] * sc[ch], 1e-4);
    }
  }
}

TEST(BatchNorm, TrainUpdatesRunningStatsWithMomentum) {
  const Tensor x({2, 1, 1, 2}, {1.0, 3.0, 5.0, 7.0});  // mean 4, biased var 5, unbiased 20/3
  BNState st(1);
  Graph g;
  bn(g, x, Tensor({1}, 1.0), Tensor({1}, 0.0), st, BNMode::train);
  EXPECT_NEAR(st.running_mean[0], 0.1 * 4.0, 1e-15);
  EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * 20.0 / 3.0, 1e-15);
}

TEST(BatchNorm, BatchOfOneNeedsStoredStats) {
  const Tensor x({1, 2, 2, 2}, 1.0);
  BNState st(2);
  Graph g;
  EXPECT_THROW(bn(g, x, Tensor({2}, 1.0), Tensor({2}, 0.0), st, BNMode::train), BatchSizeError);
  EXPECT_THROW(bn(g, x, Tensor({2}, 1.0), Tensor({2}, 0.0), st, BNMode::adapt), BatchSizeError);
  EXPECT_NO_THROW(bn(g, x, Tensor({2}, 1.0), Tensor({2}, 0.0), st, BNMode::eval));
  EXPECT_THROW(bn(g, Tensor({2, 3, 1, 1}), Tensor({2}, 1.0), Tensor({2}, 0.0), st, BNMode::eval), DimensionError);
}

TEST(MarginSoftmax, ZeroMarginUnitScaleGivesCosine) {
  Graph g;
  Var f = g.constant(Tensor::matrix({{2, 0}}));
  Var w = g.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  const Tensor y = margin_softmax_logits(f, w, {0}, 0.0, 1.0).value();
  EXPECT_NEAR(y[0], 1.0, 1e-15);
  EXPECT_NEAR(y[1], 0.0, 1e-15);
}

TEST(MarginSoftmax, MarginLowersOnlyTheLabelLogit) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = between(rng, 1, 4), c = between(rng, 2, 5), d = between(rng, 2, 4);
    const Tensor f = normal_tensor(rng, {n, d}), w = normal_tensor(rng, {c, d});
    const auto labels = random_labels(rng, n, c);
    Graph g;
    const Tensor plain = margin_softmax_logits(g.constant(f), g.constant(w), labels, 0.0, 16.0).value();
    const Tensor marg = margin_softmax_logits(g.constant(f), g.constant(w), labels, 0.5, 16.0).value();
    const Tensor cos = cosine_logits(g.constant(f), g.constant(w)).value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        EXPECT_NEAR(plain[i * c + j], 16.0 * cos[i * c + j], 1e-12);
        if (j == labels[i])
          EXPECT_LT(marg[i * c + j], plain[i * c + j]);
        else
          EXPECT_EQ(marg[i * c + j], plain[i * c + j]);
      }
  }
}

TEST(MarginSoftmax, ZeroNormEmbeddingIsNumericError) {
  Graph g;
  EXPECT_THROW(margin_softmax_logits(g.constant(Tensor({1, 3})), g.constant(Tensor::eye(3)), {0}, 0.35, 16.0),
               NumericError);
}

class NetworkTest : public ::testing::Test {
 protected:
  Rng rng{7};
  Network net{Architecture::student(4, 8), rng};
  Tensor x = uniform_tensor(rng, {5, 1, 8, 8}, 0.0, 1.0);

  void SetUp() override {
    // Non-trivial running statistics.
    for (auto& [_, s] : net.bn())
      for (std::size_t c = 0; c < s.channels(); ++c) {
        s.running_mean[c] = rng.uniform(-0.2, 0.2);
        s.running_var[c] = rng.uniform(0.5, 1.5);
      }
  }
};

TEST_F(NetworkTest, OutputShapes) {
  Graph g;
  auto out = net.forward(g, x);
  EXPECT_EQ(out.embedding.shape(), (Shape{5, 64}));
  EXPECT_EQ(out.logits.shape(), (Shape{5, 4}));
}

TEST_F(NetworkTest, EvalForwardIsDeterministicAndSideEffectFree) {
  const auto before = net.state_hash();
  Graph g1, g2;
  auto a = net.forward(g1, x), b = net.forward(g2, x);
  EXPECT_EQ(a.embedding.value(), b.embedding.value());
  EXPECT_EQ(a.logits.value(), b.logits.value());
  EXPECT_EQ(net.state_hash(), before);
}

TEST_F(NetworkTest, EvalBatchEqualsSingleForwards) {
  Graph g;
  const Tensor batch = net.forward(g, x).logits.value();
  for (std::size_t i = 0; i < 5; ++i) {
    Graph h;
    const Tensor one = net.forward(h, take_rows(x, std::vector<std::size_t>{i})).logits.value();
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(one[j], batch[i * 4 + j], 1e-10);
  }
}

TEST_F(NetworkTest, ResolutionMismatchListsExpectedAndActual) {
  Graph g;
  try {
    net.forward(g, Tensor({1, 1, 16, 16}));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("8"), std::string::npos);
    EXPECT_NE(m.find("[1x1x16x16]"), std::string::npos) << m;
  }
}

TEST_F(NetworkTest, CheckpointRoundTripIsBitwise) {
  const auto path = std::filesystem::temp_directory_path() / "aird_nn_roundtrip.ckpt";
  save_checkpoint(net, path);
  Network back = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.arch(), net.arch());
  EXPECT_EQ(back.state_hash(), net.state_hash());
  Graph g1, g2;
  EXPECT_EQ(back.forward(g1, x).logits.value(), net.forward(g2, x).logits.value());
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(net));
}

TEST_F(NetworkTest, CorruptCheckpointIsFormatError) {
  std::string bytes = serialize_checkpoint(net);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), FormatError);
  bytes[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
}

TEST_F(NetworkTest, ParameterNamesStable) {
  Rng other(99);
  Network fresh(Architecture::student(4, 8), other);
  std::vector<std::string> a, b;
  for (const auto& [k, _] : net.params()) a.push_back(k);
  for (const auto& [k, _] : fresh.params()) b.push_back(k);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 3u * 3 + 3);  // conv/scale/shift per block, embed weight/bias, classifier
}

TEST(Architecture, CanonicalRoundTrip) {
  for (const auto& a : {Architecture::teacher(16), Architecture::student(7, 16), test::tiny_arch()})
    EXPECT_EQ(Architecture::parse(a.canonical()), a);
  EXPECT_THROW(Architecture::parse("input=8;channels=2"), FormatError);
  EXPECT_THROW(Architecture({12, {2, 2, 2}, 4, 3, 0.35, 16.0}).validate(), ConfigError);
}
