#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "canet/error.hpp"
#include "canet/gradcheck.hpp"
#include "canet/layers.hpp"
#include "canet/ops.hpp"
#include "oracles.hpp"

using namespace canet;

namespace {

std::vector<double> random_values(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

double variance(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST(Conv2d, DeltaKernelIsIdentity) {
  Tape<double> tape;
  std::vector<double> x(16);
  std::iota(x.begin(), x.end(), 1.0);
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  const auto y = ops::conv2d(tape, Tensor<double>({1, 1, 4, 4}, x), Tensor<double>({1, 1, 3, 3}, k),
                             Tensor<double>({1}, {0.0}), 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_EQ(values(y), x);
}

TEST(Conv2d, AllOnesCenterCountsNine) {
  Tape<double> tape;
  const auto y = ops::conv2d(tape, Tensor<double>::full({1, 1, 3, 3}, 1.0), Tensor<double>::full({1, 1, 3, 3}, 1.0),
                             Tensor<double>({1}, {0.0}), 1);
  EXPECT_DOUBLE_EQ(y.data()[4], 9.0);
  EXPECT_DOUBLE_EQ(y.data()[0], 4.0);  // corner sees a 2x2 neighbourhood
}

TEST(Conv2d, MatchesDirectLoopsForStridesOneAndTwo) {
  std::mt19937_64 rng(21);
  for (std::size_t stride : {1u, 2u}) {
    const std::size_t n = 2, c = 3, h = 7, w = 6, o = 4;
    const auto x = random_values(n * c * h * w, rng);
    const auto k = random_values(o * c * 9, rng);
    const auto b = random_values(o, rng);
    Tape<double> tape;
    const auto y = ops::conv2d(tape, Tensor<double>({n, c, h, w}, x), Tensor<double>({o, c, 3, 3}, k),
                               Tensor<double>({o}, b), stride);
    const auto ref = oracle::conv2d(x, n, c, h, w, k, b, o, stride);
    EXPECT_EQ(y.shape(), (Shape{n, o, (h - 1) / stride + 1, (w - 1) / stride + 1}));
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, ChannelMismatchIsAnError) {
  Tape<double> tape;
  EXPECT_THROW(ops::conv2d(tape, Tensor<double>::zeros({1, 2, 4, 4}), Tensor<double>::zeros({1, 3, 3, 3}),
                           Tensor<double>::zeros({1}), 1),
               ShapeError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  Tensor<double> x({2, 2, 5, 4}, random_values(80, rng));
  Tensor<double> k({3, 2, 3, 3}, random_values(54, rng));
  Tensor<double> b({3}, random_values(3, rng));
  Tensor<double> w({2, 3, 5, 4}, random_values(120, rng));
  std::vector<NamedTensor<double>> params{{"x", x}, {"weight", k}, {"bias", b}};
  const auto report = finite_difference_check(
      [&](Tape<double>& t) { return ops::sum(t, ops::mul(t, w, ops::conv2d(t, x, k, b, 1))); }, params,
      {.tolerance = 1e-4});
  EXPECT_TRUE(report.passed) << report.worst();
}

TEST(BatchNorm, TrainModeNormalizesPerChannel) {
  std::mt19937_64 rng(8);
  std::vector<double> x = random_values(4 * 3 * 5 * 5, rng);
  for (auto& v : x) v = 7.0 + 3.0 * v;
  Tensor<double> gamma = Tensor<double>::full({3}, 1.0), beta = Tensor<double>::zeros({3});
  Tensor<double> rm = Tensor<double>::zeros({3}), rv = Tensor<double>::full({3}, 1.0);
  Tape<double> tape;
  const auto y = ops::batchnorm(tape, Tensor<double>({4, 3, 5, 5}, x), gamma, beta, rm, rv, Mode::train, 1e-5, 0.1);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    std::vector<double> vals;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) vals.push_back(y.data()[(b * 3 + ch) * 25 + i]);
    const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / 100.0;
    EXPECT_NEAR(mean, 0.0, 1e-5);
    EXPECT_NEAR(variance(vals), 1.0, 1e-4);
  }
}

TEST(BatchNorm, AffineLawOnStandardizedInput) {
  // Two values per channel at -1 and +1 are already standardized.
  Tensor<double> x({2, 1}, {-1.0, 1.0});
  Tensor<double> gamma({1}, {2.0}), beta({1}, {3.0});
  Tensor<double> rm = Tensor<double>::zeros({1}), rv = Tensor<double>::full({1}, 1.0);
  Tape<double> tape;
  const auto y = ops::batchnorm(tape, x, gamma, beta, rm, rv, Mode::train, 0.0, 0.1);
  EXPECT_NEAR((y.data()[0] + y.data()[1]) / 2, 3.0, 1e-12);
  EXPECT_NEAR((y.data()[1] - y.data()[0]) / 2, 2.0, 1e-12);
}

TEST(BatchNorm, RunningStatisticsFollowMomentumRule) {
  Tensor<double> x({2, 1}, {1.0, 3.0});  // mean 2, unbiased variance 2
  Tensor<double> gamma({1}, {1.0}), beta({1}, {0.0});
  Tensor<double> rm({1}, {0.5}), rv({1}, {1.0});
  Tape<double> tape;
  ops::batchnorm(tape, x, gamma, beta, rm, rv, Mode::train, 1e-5, 0.1);
  EXPECT_NEAR(rm.data()[0], 0.9 * 0.5 + 0.1 * 2.0, 1e-12);
  EXPECT_NEAR(rv.data()[0], 0.9 * 1.0 + 0.1 * 2.0, 1e-12);
  // Eval mode uses them and leaves them alone.
  const auto y = ops::batchnorm(tape, x, gamma, beta, rm, rv, Mode::eval, 1e-5, 0.1);
  EXPECT_NEAR(y.data()[0], (1.0 - 0.65) / std::sqrt(1.1 + 1e-5), 1e-12);
  EXPECT_NEAR(rm.data()[0], 0.65, 1e-12);
}

TEST(BatchNorm, BatchOfOneInTrainModeIsAnError) {
  BatchNorm2d<double> bn(2);
  Tape<double> tape;
  EXPECT_THROW(bn.forward(tape, Tensor<double>::zeros({1, 2, 3, 3}), Mode::train), ShapeError);
  EXPECT_NO_THROW(bn.forward(tape, Tensor<double>::zeros({1, 2, 3, 3}), Mode::eval));
  EXPECT_DOUBLE_EQ(BatchNorm2d<double>::kEps, 1e-5);
  EXPECT_DOUBLE_EQ(BatchNorm2d<double>::kMomentum, 0.1);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  Tensor<double> x({3, 2, 3, 3}, random_values(54, rng));
  Tensor<double> gamma({2}, {1.3, 0.7}), beta({2}, {0.1, -0.2});
  Tensor<double> w({3, 2, 3, 3}, random_values(54, rng));
  Tensor<double> rm = Tensor<double>::zeros({2}), rv = Tensor<double>::full({2}, 1.0);
  std::vector<NamedTensor<double>> params{{"x", x}, {"gamma", gamma}, {"beta", beta}};
  const auto report = finite_difference_check(
      [&](Tape<double>& t) {
        return ops::sum(t, ops::mul(t, w, ops::batchnorm(t, x, gamma, beta, rm, rv, Mode::train, 1e-5, 0.1)));
      },
      params, {.tolerance = 1e-4});
  EXPECT_TRUE(report.passed) << report.worst();
}

TEST(MaxPool, TakesWindowMaximum) {
  Tape<double> tape;
  const auto y = ops::maxpool2x2(tape, Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 4.0);
}

TEST(MaxPool, TiesRouteGradientToFirstElement) {
  Tape<double> tape;
  Tensor<double> x = Tensor<double>::full({1, 1, 4, 4}, 2.5);
  x.set_requires_grad(true);
  const auto y = ops::maxpool2x2(tape, x);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 2.5);
  tape.backward(ops::sum(tape, y));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_DOUBLE_EQ(x.grad()[r * 4 + c], (r % 2 == 0 && c % 2 == 0) ? 1.0 : 0.0) << r << "," << c;
}

TEST(MaxPool, OddExtentsPadWithNegativeInfinity) {
  std::mt19937_64 rng(2);
  auto x = random_values(2 * 3 * 5 * 7, rng);
  for (auto& v : x) v -= 10.0;  // all negative, so zero padding would show up
  Tape<double> tape;
  const auto y = ops::maxpool2x2(tape, Tensor<double>({2, 3, 5, 7}, x));
  EXPECT_EQ(y.shape(), (Shape{2, 3, 3, 4}));
  EXPECT_EQ(values(y), oracle::maxpool(x, 6, 5, 7));
}

TEST(MaxPool, FacePoolScheduleReaches14) {
  const auto sched = BackboneSpec::face().spatial_schedule();
  EXPECT_EQ(sched.back(), (std::pair<std::size_t, std::size_t>{14, 14}));
}

TEST(GlobalAvgPool, ConstantMapAndGradient) {
  Tape<double> tape;
  Tensor<double> x = Tensor<double>::full({2, 3, 4, 5}, 1.75);
  x.set_requires_grad(true);
  const auto y = ops::global_avg_pool(tape, x);
  EXPECT_EQ(y.shape(), (Shape{2, 3}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.75);
  tape.backward(ops::sum(tape, y));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0 / 20.0);
  Tape<float> t2;
  EXPECT_EQ(ops::global_avg_pool(t2, Tensor<float>::zeros({1, 1024, 14, 14})).shape(), (Shape{1, 1024}));
}

TEST(Backbone, FaceArchitectureAtFullWidth) {
  const auto spec = BackboneSpec::face();
  EXPECT_EQ(spec.channels,
            (std::vector<std::size_t>{64, 64, 128, 128, 256, 256, 256, 256, 256, 256, 512, 512, 1024}));
  EXPECT_EQ(spec.pool_after, (std::vector<std::size_t>{2, 4, 7, 10}));
  EXPECT_EQ(spec.in_channels, 3u);
  EXPECT_EQ(spec.in_height, 224u);
  EXPECT_EQ(spec.in_width, 224u);
  const Backbone<float> net(spec, 1);
  ASSERT_EQ(net.blocks().size(), 13u);
  for (std::size_t i = 0; i < 13; ++i) {
    EXPECT_EQ(net.blocks()[i].conv.out_channels(), spec.channels[i]);
    EXPECT_EQ(net.blocks()[i].conv.stride(), 1u);
    EXPECT_EQ(net.blocks()[i].conv.weight().shape(),
              (Shape{spec.channels[i], i == 0 ? 3u : spec.channels[i - 1], 3, 3}));
    EXPECT_EQ(net.blocks()[i].pool_after, spec.pools_after(i + 1));
  }
  EXPECT_EQ(net.fc().in_features(), 1024u);
  EXPECT_EQ(net.fc().out_features(), 256u);
}

TEST(Backbone, EyeArchitectureAtFullWidth) {
  const auto spec = BackboneSpec::eye();
  EXPECT_EQ(spec.channels, (std::vector<std::size_t>{64, 64, 128, 128, 128, 256, 256, 256, 512, 1024}));
  EXPECT_EQ(spec.pool_after, (std::vector<std::size_t>{2, 5, 8}));
  EXPECT_EQ(spec.in_channels, 1u);
  EXPECT_EQ(spec.in_height, 36u);
  EXPECT_EQ(spec.in_width, 60u);
  // Ceil pooling of 36x60: 18x30, 9x15, then 5x8.
  EXPECT_EQ(spec.spatial_schedule().back(), (std::pair<std::size_t, std::size_t>{5, 8}));
  Backbone<float> net(spec, 2);
  EXPECT_EQ(net.blocks().size(), 10u);
  EXPECT_EQ(net.fc().in_features(), 1024u);
  EXPECT_EQ(net.fc().out_features(), 256u);
  Tape<float> tape;
  tape.set_recording(false);
  const auto f = net.forward(tape, Tensor<float>::full({2, 1, 36, 60}, 0.5f), Mode::eval);
  EXPECT_EQ(f.shape(), (Shape{2, 256}));
}

TEST(Backbone, FaceForwardAtFullWidthYields256) {
  Backbone<float> net(BackboneSpec::face(), 3);
  Tape<float> tape;
  tape.set_recording(false);
  const auto f = net.forward(tape, Tensor<float>::full({1, 3, 224, 224}, 0.25f), Mode::eval);
  EXPECT_EQ(f.shape(), (Shape{1, 256}));
}

TEST(Backbone, WidthScaleCeilsChannelsAndRoundsFeatureDim) {
  const auto spec = BackboneSpec::face(1.0 / 8.0, 56, 56);
  EXPECT_EQ(spec.scaled_channels(), (std::vector<std::size_t>{8, 8, 16, 16, 32, 32, 32, 32, 32, 32, 64, 64, 128}));
  EXPECT_EQ(spec.feature_dim(), 32u);
  EXPECT_EQ(BackboneSpec::eye(1.0 / 3.0).scaled_channels().front(), 22u);
  EXPECT_EQ(BackboneSpec::eye(1.0 / 3.0).feature_dim(), 85u);
  for (double scale : {1.0 / 16.0, 0.2, 0.5}) {
    Backbone<float> net(BackboneSpec::eye(scale, 12, 20), 5);
    Tape<float> tape;
    tape.set_recording(false);
    EXPECT_EQ(net.forward(tape, Tensor<float>::zeros({2, 1, 12, 20}), Mode::train).dim(1),
              static_cast<std::size_t>(std::lround(256 * scale)));
  }
  EXPECT_THROW(BackboneSpec::face(0.0).validate(), ShapeError);
  EXPECT_THROW(BackboneSpec::face(1.0, 2, 2).validate(), ShapeError);
}

TEST(Init, MsraVarianceMatchesTwoOverFanIn) {
  std::mt19937_64 rng(17);
  for (std::size_t fan_in : {64u, 576u, 4608u}) {
    const auto w = msra_normal<double>(100000, fan_in, rng);
    const double expect = 2.0 / static_cast<double>(fan_in);
    EXPECT_NEAR(variance(w) / expect, 1.0, 0.1) << fan_in;
  }
}

TEST(Init, BackboneConvWeightsFollowMsraAndBiasesAreZero) {
  Backbone<double> net(BackboneSpec::face(1.0 / 8.0, 56, 56), 9);
  for (const auto& block : net.blocks()) {
    const double fan_in = static_cast<double>(block.conv.in_channels() * 9);
    if (fan_in < 64) continue;
    const std::vector<double> w(block.conv.weight().data().begin(), block.conv.weight().data().end());
    if (w.size() < 2000) continue;  // too few draws for a 10% bound
    EXPECT_NEAR(variance(w) * fan_in / 2.0, 1.0, 0.1);
    for (double b : block.conv.bias().data()) EXPECT_EQ(b, 0.0);
  }
}

TEST(Init, SameSeedSameWeights) {
  Backbone<float> a(BackboneSpec::eye(0.125, 18, 30), 42), b(BackboneSpec::eye(0.125, 18, 30), 42);
  Backbone<float> c(BackboneSpec::eye(0.125, 18, 30), 43);
  std::vector<ParamRef<float>> pa, pb, pc;
  a.collect(pa, "eye");
  b.collect(pb, "eye");
  c.collect(pc, "eye");
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
    any_diff = any_diff || !std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(),
                                       pc[i].tensor.data().begin());
  }
  EXPECT_TRUE(any_diff);
  EXPECT_EQ(pa.front().name, "eye.block1.conv.weight");
}

TEST(Backbone, TinyScaleGradientMatchesFiniteDifferences) {
  Backbone<double> net(BackboneSpec::face(1.0 / 16.0, 8, 8), 6);
  std::mt19937_64 rng(7);
  Tensor<double> x({4, 3, 8, 8}, random_values(4 * 3 * 64, rng));
  Tensor<double> w({4, 16}, random_values(64, rng));
  std::vector<ParamRef<double>> refs;
  net.collect(refs, "face");
  std::vector<NamedTensor<double>> params;
  for (const auto& r : refs)
    if (r.trainable) params.push_back({r.name, r.tensor});
  const auto report = finite_difference_check(
      [&](Tape<double>& t) { return ops::sum(t, ops::mul(t, w, net.forward(t, x, Mode::train))); }, params,
      {.step = 1e-7, .tolerance = 1e-4, .max_entries_per_param = 12, .seed = 1});
  EXPECT_TRUE(report.passed) << report.worst();
}
