#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "canet/checkpoint.hpp"
#include "canet/config.hpp"
#include "canet/error.hpp"
#include "canet/geometry.hpp"
#include "canet/serialize.hpp"
#include "canet/training.hpp"

using namespace canet;
using namespace canet::training;

namespace {

// Desk geometry with few samples, so a training epoch takes a fraction of a second.
ExperimentConfig small_experiment(std::uint16_t subjects, std::uint32_t per_subject, double scale = 0.125) {
  auto c = ExperimentConfig::desk();
  c.synth.subjects = subjects;
  c.synth.samples_per_subject = per_subject;
  c.model.width_scale = scale;
  c.train.batch_size = 16;
  c.sync();
  return c;
}

std::vector<std::vector<float>> snapshot(const GazeModel<float>& model, bool buffers) {
  std::vector<std::vector<float>> out;
  for (const auto& p : buffers ? model.parameters() : model.trainable_parameters())
    out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void set_all(Tensor<float> t, float v) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), v); }

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("canet_test_training_" + name);
}

}  // namespace

TEST(TrainConfig, DefaultsAndValidation) {
  TrainConfig c;
  EXPECT_EQ(c.epochs, 200u);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_DOUBLE_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.optimizer, OptimizerKind::adam);
  EXPECT_DOUBLE_EQ(c.loss.alpha, 1.0);
  EXPECT_DOUBLE_EQ(c.loss.beta, 2.0);
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_optimizer("rmsprop"), ConfigError);
  EXPECT_EQ(parse_optimizer("sgd"), OptimizerKind::sgd);
}

TEST(Optimizer, ZeroGradientLeavesParametersUnchanged) {
  for (auto kind : {OptimizerKind::adam, OptimizerKind::sgd}) {
    Tensor<float> w({3}, {0.5f, -1.0f, 2.0f});
    w.zero_grad();
    TrainConfig c;
    c.optimizer = kind;
    c.sgd_momentum = 0.9;
    auto opt = make_optimizer(c, {w});
    for (int i = 0; i < 3; ++i) opt->step();
    EXPECT_EQ(std::vector<float>(w.data().begin(), w.data().end()), (std::vector<float>{0.5f, -1.0f, 2.0f}));
  }
}

TEST(Optimizer, SgdAndAdamFirstSteps) {
  Tensor<float> w({1}, {1.0f});
  w.grad_accumulator()[0] = 2.0f;
  Sgd sgd({w}, 0.1, 0.0);
  sgd.step();
  EXPECT_FLOAT_EQ(w.data()[0], 0.8f);
  Tensor<float> u({1}, {1.0f});
  u.grad_accumulator()[0] = -4.0f;
  Adam adam({u}, 0.01, 0.9, 0.999, 1e-8);
  adam.step();  // bias-corrected first step moves by lr * sign(grad)
  EXPECT_NEAR(u.data()[0], 1.01f, 1e-6);
}

TEST(Train, ZeroLearningRateKeepsParametersBitIdentical) {
  auto c = small_experiment(2, 20);
  c.train.learning_rate = 0.0;
  c.train.epochs = 2;
  const auto d = data::synth_generate(c.synth);
  GazeModel<float> model(c.model, c.seed);
  const auto before = snapshot(model, false);
  train(model, data::DatasetView::all(d), c.train);
  EXPECT_EQ(snapshot(model, false), before);
}

TEST(Train, ToyRunReducesLoss) {
  auto c = small_experiment(2, 100);
  c.train.epochs = 10;
  const auto d = data::synth_generate(c.synth);
  GazeModel<float> model(c.model, c.seed);
  const auto curve = train(model, data::DatasetView::all(d), c.train);
  ASSERT_EQ(curve.epoch_loss.size(), 10u);
  EXPECT_LT(curve.epoch_loss.back(), curve.epoch_loss.front());
}

TEST(Train, SameSeedGivesIdenticalCurvesAndWeights) {
  auto c = small_experiment(2, 24);
  c.train.epochs = 2;
  const auto d = data::synth_generate(c.synth);
  GazeModel<float> a(c.model, 3), b(c.model, 3);
  const auto ca = train(a, data::DatasetView::all(d), c.train);
  const auto cb = train(b, data::DatasetView::all(d), c.train);
  EXPECT_EQ(ca.epoch_loss, cb.epoch_loss);
  EXPECT_EQ(snapshot(a, true), snapshot(b, true));
}

TEST(Train, NonFiniteLossNamesTheTensor) {
  auto c = small_experiment(1, 8);
  c.train.epochs = 1;
  const auto d = data::synth_generate(c.synth);
  GazeModel<float> model(c.model, 0);
  Tensor<float> w = model.face_backbone().fc().weight();
  w.mutable_data()[0] = NAN;
  try {
    train(model, data::DatasetView::all(d), c.train);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("face.fc.weight"), std::string::npos) << e.what();
  }
}

TEST(Train, GeometryMismatchIsAShapeError) {
  auto c = small_experiment(1, 4);
  const auto d = data::synth_generate(c.synth);
  auto m = c.model;
  m.eye_width = 60;
  GazeModel<float> model(m, 0);
  EXPECT_THROW(train(model, data::DatasetView::all(d), c.train), ShapeError);
}

TEST(Batch, PixelsAreScaledAndReorderedToChannelsFirst) {
  auto c = small_experiment(1, 2);
  const auto d = data::synth_generate(c.synth);
  const auto batch = make_batch(data::DatasetView::all(d), {1});
  const auto& g = d.geometry();
  EXPECT_EQ(batch.inputs.face.shape(), (Shape{1, 3, g.face_height, g.face_width}));
  const std::size_t y = 20, x = 31, ch = 2;
  EXPECT_FLOAT_EQ(batch.inputs.face.data()[(ch * g.face_height + y) * g.face_width + x],
                  d[1].face[(y * g.face_width + x) * 3 + ch] / 255.0f);
  EXPECT_FLOAT_EQ(batch.inputs.left.data()[5], d[1].left_eye[5] / 255.0f);
}

TEST(Evaluate, IsPureAndAggregatesBySubject) {
  auto c = small_experiment(3, 10);
  const auto d = data::synth_generate(c.synth);
  GazeModel<float> model(c.model, 1);
  const auto before = snapshot(model, true);
  const auto view = data::DatasetView::all(d);
  const auto a = evaluate(model, view, 7);
  const auto b = evaluate(model, view, 7);
  EXPECT_EQ(snapshot(model, true), before);
  EXPECT_EQ(a.refined_deg, b.refined_deg);
  EXPECT_EQ(a.basic_deg, b.basic_deg);
  ASSERT_EQ(a.per_subject.size(), 3u);
  double refined = 0, basic = 0;
  std::size_t n = 0;
  for (const auto& s : a.per_subject) {
    refined += s.refined_deg * static_cast<double>(s.count);
    basic += s.basic_deg * static_cast<double>(s.count);
    n += s.count;
  }
  EXPECT_EQ(n, a.count);
  EXPECT_NEAR(refined / static_cast<double>(n), a.refined_deg, 1e-9);
  EXPECT_NEAR(basic / static_cast<double>(n), a.basic_deg, 1e-9);
  EXPECT_TRUE(a.has_attention_weights);
  EXPECT_THROW(evaluate(model, data::DatasetView(d, {})), ConfigError);
}

TEST(Evaluate, ForcedPerfectPredictionScoresZero) {
  auto c = small_experiment(2, 5);
  c.synth.pitch_range_deg = c.synth.yaw_range_deg = 0.0;  // every label is (0, 0, -1)
  const auto d = data::synth_generate(c.synth);
  GazeModel<float> model(c.model, 2);
  for (auto* head : {&model.basic_head(), &model.residual_head()}) {
    set_all((*head)->weight(), 0.0f);
    set_all((*head)->bias(), 0.0f);
  }
  Tensor<float> b = model.basic_head()->bias();
  b.mutable_data()[2] = -1.0f;
  const auto r = evaluate(model, data::DatasetView::all(d));
  EXPECT_EQ(r.refined_deg, 0.0);
  EXPECT_EQ(r.basic_deg, 0.0);
}

TEST(Evaluate, ConstantPredictorMatchesMonteCarloOracle) {
  auto c = ExperimentConfig::desk();  // 6 x 300, labels within +-20 degrees
  const auto d = data::synth_generate(c.synth);
  const auto report = evaluate_constant(data::DatasetView::all(d));
  const double mc = monte_carlo_center_error_deg(20.0, 20.0, 1'000'000, 5);
  // 1800 labels: sampling std of the mean is about 0.14 degrees.
  EXPECT_NEAR(report.refined_deg, mc, 0.5);
  EXPECT_EQ(report.refined_deg, report.basic_deg);
  EXPECT_FALSE(report.has_attention_weights);
}

TEST(Evaluate, MonteCarloOracleAgreesWithQuadrature) {
  // Midpoint rule over the label square.
  const int n = 400;
  const double r = geometry::radians(20.0);
  double sum = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double p = -r + (i + 0.5) * 2 * r / n, y = -r + (j + 0.5) * 2 * r / n;
      sum += std::acos(std::cos(p) * std::cos(y));
    }
  const double quad = geometry::degrees(sum / (n * n));
  EXPECT_NEAR(monte_carlo_center_error_deg(20.0, 20.0, 1'000'000, 9), quad, 0.02);
}

TEST(Csv, HeadersAndRows) {
  std::ostringstream loss;
  write_loss_csv(loss, LossCurve{{1.5, 0.25}});
  EXPECT_EQ(loss.str(), "epoch,loss\n0,1.5\n1,0.25\n");

  EvalReport r;
  r.count = 2;
  r.refined_deg = 1.0;
  r.basic_deg = 2.0;
  r.per_subject = {SubjectReport{4, 2, 1.0, 2.0, 0.0, 0.0}};
  std::ostringstream eval;
  write_eval_csv(eval, r);
  EXPECT_EQ(eval.str(), "subject,count,refined_deg,basic_deg,w_l_mean,w_l_std\n4,2,1,2,,\nall,2,1,2,,\n");

  std::ostringstream ab;
  write_ablation_csv(ab, {AblationRow{VariantKind::face_net, 10, r}});
  EXPECT_EQ(ab.str(), "variant,parameters,basic_deg,refined_deg,w_l_mean,w_l_std\nface_net,10,2,1,,\n");
}

TEST(Config, DeskProfile) {
  const auto c = ExperimentConfig::desk();
  EXPECT_DOUBLE_EQ(c.model.width_scale, 0.125);
  EXPECT_EQ(c.synth.geometry, (data::Geometry{56, 56, 3, 18, 30}));
  EXPECT_EQ(c.model.face_height, 56u);
  EXPECT_EQ(c.model.eye_width, 30u);
  EXPECT_EQ(c.synth.subjects, 6u);
  EXPECT_EQ(c.synth.samples_per_subject, 300u);
  EXPECT_EQ(c.synth.noise, 0.0);
  EXPECT_LE(c.train.epochs, 30u);
}

TEST(Config, OverlayAndStrictKeys) {
  const auto c = parse_config(R"({"seed": 5, "model": {"variant": "one_gram", "width_scale": 0.25},
                                  "train": {"epochs": 3, "alpha": 0.5, "optimizer": "sgd"},
                                  "synth": {"subjects": 4}})");
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.train.seed, 5u);
  EXPECT_EQ(c.synth.seed, 5u);
  EXPECT_EQ(c.model.kind, VariantKind::one_gram);
  EXPECT_DOUBLE_EQ(c.model.width_scale, 0.25);
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_DOUBLE_EQ(c.train.loss.alpha, 0.5);
  EXPECT_EQ(c.train.optimizer, OptimizerKind::sgd);
  EXPECT_EQ(c.synth.subjects, 4u);
  try {
    parse_config(R"({"train": {"foo": 1}})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.foo"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config(R"({"sedd": 1})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"train": {"epochs": "ten"}})"), ConfigError);
  EXPECT_THROW(parse_config("{not json"), ConfigError);
  EXPECT_THROW(parse_config(R"({"model": {"variant": "nope"}})"), ConfigError);
  EXPECT_THROW(load_config(temp_path("missing.json")), IoError);
}

TEST(Checkpoint, RoundTripRestoresEveryTensor) {
  auto c = small_experiment(2, 6);
  c.model.kind = VariantKind::face_attention;
  c.train.epochs = 1;
  const auto d = data::synth_generate(c.synth);
  GazeModel<float> model(c.model, 4);
  train(model, data::DatasetView::all(d), c.train);  // moves weights and running statistics
  const auto path = temp_path("model.canw");
  save_checkpoint(path, model);
  const auto loaded = load_checkpoint(path);
  EXPECT_EQ(loaded->kind(), VariantKind::face_attention);
  EXPECT_EQ(loaded->config().eye_width, 30u);
  EXPECT_EQ(snapshot(*loaded, true), snapshot(model, true));
  const auto view = data::DatasetView::all(d);
  EXPECT_EQ(evaluate(*loaded, view).refined_deg, evaluate(model, view).refined_deg);

  // Same model saved twice: identical bytes.
  const auto path2 = temp_path("model2.canw");
  save_checkpoint(path2, model);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(a), {}), std::string(std::istreambuf_iterator<char>(b), {}));
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST(Checkpoint, MetadataAndMismatchErrors) {
  ModelConfig m;
  m.kind = VariantKind::eye_net;
  m.width_scale = 0.125;
  const auto meta = checkpoint_metadata(m);
  EXPECT_EQ(parse_checkpoint_metadata(meta).kind, VariantKind::eye_net);
  EXPECT_THROW(parse_checkpoint_metadata("face.block1.conv.weight"), FormatError);
  EXPECT_THROW(parse_checkpoint_metadata("meta/variant=canet"), FormatError);

  // A weight file whose tensors do not fit the recorded variant.
  const auto path = temp_path("bad.canw");
  std::vector<NamedTensor<float>> entries{{meta, Tensor<float>::scalar(0.0f)},
                                          {"head_b.weight", Tensor<float>::zeros({2, 2})}};
  io::save_weights(path, entries);
  EXPECT_THROW(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}
