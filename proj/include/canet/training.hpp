#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "canet/dataset.hpp"
#include "canet/model.hpp"
#include "canet/tensor.hpp"

namespace canet::training {

enum class OptimizerKind { adam, sgd };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double sgd_momentum = 0.0;
  LossWeights loss{};
  std::uint64_t seed = 0;

  /// Throws ConfigError unless every size is positive and the rates are sane.
  void validate() const;
};

/// Updates trainable tensors in place from their accumulated gradients.
/// Tensors without a gradient are skipped.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step() = 0;
};

class Adam final : public Optimizer {
 public:
  Adam(std::vector<Tensor<float>> params, double lr, double beta1, double beta2, double eps);
  void step() override;

 private:
  std::vector<Tensor<float>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

class Sgd final : public Optimizer {
 public:
  Sgd(std::vector<Tensor<float>> params, double lr, double momentum);
  void step() override;

 private:
  std::vector<Tensor<float>> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_, momentum_;
};

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg, std::vector<Tensor<float>> params);

/// Pixel tensors for a batch: bytes scaled to [0, 1], face HWC reordered to CHW.
struct Batch {
  ModelInputs<float> inputs;
  Tensor<float> gaze;  // [N, 3]
  std::vector<std::uint16_t> subjects;
};

Batch make_batch(const data::DatasetView& view, const std::vector<std::size_t>& positions);

/// Throws ShapeError when the dataset geometry differs from the model input.
void check_geometry(const ModelConfig& model, const data::Geometry& geometry);

struct LossCurve {
  std::vector<double> epoch_loss;  // mean training loss per epoch
};

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

/// Deterministic given cfg.seed: epoch e visits samples in a permutation drawn
/// from derive_seed(seed, {e}). Batches with fewer than two samples are skipped
/// because batch statistics are undefined for them. A non-finite loss aborts
/// with NumericError naming the first non-finite tensor.
LossCurve train(GazeModel<float>& model, const data::DatasetView& view, const TrainConfig& cfg,
                const EpochCallback& on_epoch = {});

struct SubjectReport {
  std::uint16_t subject = 0;
  std::size_t count = 0;
  double refined_deg = 0.0;
  double basic_deg = 0.0;
  double w_l_mean = 0.0;
  double w_l_std = 0.0;
};

struct EvalReport {
  std::size_t count = 0;
  double refined_deg = 0.0;  // angle between g and g*
  double basic_deg = 0.0;    // angle between g_b and g*
  std::vector<SubjectReport> per_subject;
  bool has_attention_weights = false;
  double w_l_mean = 0.0;
  double w_l_std = 0.0;
};

/// Inference only: eval-mode batch norm, nothing recorded, no state mutated.
EvalReport evaluate(GazeModel<float>& model, const data::DatasetView& view, std::size_t batch_size = 64);

/// Error of a model that always predicts straight ahead, (0, 0, -1).
EvalReport evaluate_constant(const data::DatasetView& view, const std::array<double, 3>& prediction = {0.0, 0.0, -1.0});

/// Mean angle in degrees between (0, 0, -1) and gaze drawn uniformly over
/// pitch and yaw in [-range, range], estimated with `samples` draws.
double monte_carlo_center_error_deg(double pitch_range_deg, double yaw_range_deg, std::size_t samples,
                                    std::uint64_t seed);

struct AblationRow {
  VariantKind kind;
  std::size_t parameter_count = 0;
  EvalReport report;
};

/// Trains every variant from the same seed and budget on all subjects except
/// `held_out` and evaluates on `held_out`. Rows follow all_variants() order.
std::vector<AblationRow> run_ablation_suite(const data::Dataset& dataset, std::uint16_t held_out,
                                            const ModelConfig& base, const TrainConfig& cfg,
                                            const std::function<void(const AblationRow&)>& on_row = {});

void write_loss_csv(std::ostream& out, const LossCurve& curve);
void write_eval_csv(std::ostream& out, const EvalReport& report);
void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

}  // namespace canet::training
