#include "canet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <random>

#include "canet/error.hpp"
#include "canet/geometry.hpp"
#include "canet/random.hpp"

namespace canet::training {

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected adam or sgd)");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for batch statistics");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) throw ConfigError("sgd_momentum must lie in [0, 1)");
  if (!(loss.alpha >= 0.0) || !(loss.beta > 0.0)) throw ConfigError("loss weights need alpha >= 0 and beta > 0");
}

Adam::Adam(std::vector<Tensor<float>> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      const double update = lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      if (update != 0.0) w[i] = static_cast<float>(w[i] - update);
    }
  }
}

Sgd::Sgd(std::vector<Tensor<float>> params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void Sgd::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& vel = velocity_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      vel[i] = momentum_ * vel[i] + g[i];
      const double update = lr_ * vel[i];
      if (update != 0.0) w[i] = static_cast<float>(w[i] - update);
    }
  }
}

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg, std::vector<Tensor<float>> params) {
  if (cfg.optimizer == OptimizerKind::adam) {
    return std::make_unique<Adam>(std::move(params), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  }
  return std::make_unique<Sgd>(std::move(params), cfg.learning_rate, cfg.sgd_momentum);
}

void check_geometry(const ModelConfig& model, const data::Geometry& g) {
  if (g.face_channels != 3 || g.face_height != model.face_height || g.face_width != model.face_width ||
      g.eye_height != model.eye_height || g.eye_width != model.eye_width) {
    throw ShapeError("dataset geometry (" + g.describe() + ") does not match model input (face " +
                     std::to_string(model.face_height) + "x" + std::to_string(model.face_width) + "x3, eyes " +
                     std::to_string(model.eye_height) + "x" + std::to_string(model.eye_width) + ")");
  }
}

Batch make_batch(const data::DatasetView& view, const std::vector<std::size_t>& positions) {
  const auto& g = view.geometry();
  const std::size_t n = positions.size();
  const std::size_t fh = g.face_height, fw = g.face_width, fc = g.face_channels;
  const std::size_t eye = g.eye_bytes();
  std::vector<float> face(n * fc * fh * fw), left(n * eye), right(n * eye), gaze(n * 3);
  Batch batch;
  batch.subjects.reserve(n);
  constexpr float kScale = 1.0f / 255.0f;
  for (std::size_t b = 0; b < n; ++b) {
    const auto& r = view[positions[b]];
    for (std::size_t c = 0; c < fc; ++c)
      for (std::size_t y = 0; y < fh; ++y)
        for (std::size_t x = 0; x < fw; ++x)
          face[((b * fc + c) * fh + y) * fw + x] = r.face[(y * fw + x) * fc + c] * kScale;
    for (std::size_t i = 0; i < eye; ++i) {
      left[b * eye + i] = r.left_eye[i] * kScale;
      right[b * eye + i] = r.right_eye[i] * kScale;
    }
    for (std::size_t k = 0; k < 3; ++k) gaze[b * 3 + k] = r.gaze[k];
    batch.subjects.push_back(r.subject_id);
  }
  batch.inputs.face = Tensor<float>({n, fc, fh, fw}, std::move(face));
  batch.inputs.left = Tensor<float>({n, 1, g.eye_height, g.eye_width}, std::move(left));
  batch.inputs.right = Tensor<float>({n, 1, g.eye_height, g.eye_width}, std::move(right));
  batch.gaze = Tensor<float>({n, 3}, std::move(gaze));
  return batch;
}

namespace {

bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

std::string location(std::size_t epoch, std::size_t batch) {
  return "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch);
}

void check_parameters(const GazeModel<float>& model, std::size_t epoch, std::size_t batch) {
  for (const auto& p : model.parameters()) {
    if (!all_finite(p.tensor.data())) {
      throw NumericError("non-finite loss at " + location(epoch, batch) + ": parameter " + p.name);
    }
  }
}

[[noreturn]] void report_non_finite(const GazeModel<float>& model, const ModelOutput<float>& out, std::size_t epoch,
                                    std::size_t batch) {
  const std::string where = location(epoch, batch);
  check_parameters(model, epoch, batch);
  const std::pair<const char*, const Tensor<float>*> outputs[] = {
      {"h1", &out.diagnostics.h1}, {"w_l", &out.diagnostics.w_l}, {"g_b", &out.g_b},
      {"h2", &out.diagnostics.h2}, {"g_r", &out.g_r},           {"g", &out.g}};
  for (const auto& [name, t] : outputs) {
    if (t->defined() && !all_finite(t->data())) throw NumericError("non-finite loss at " + where + ": tensor " + name);
  }
  throw NumericError("non-finite loss at " + where + ": tensor loss");
}

void check_gradients(const std::vector<ParamRef<float>>& params, std::size_t epoch, std::size_t batch) {
  for (const auto& p : params) {
    if (p.tensor.has_grad() && !all_finite(p.tensor.grad())) {
      throw NumericError("non-finite gradient at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                         ": parameter " + p.name);
    }
  }
}

// Metrics use the exact angle; the arccos clamp only protects loss gradients.
double angle_deg(std::span<const float> a, std::span<const float> b) {
  const geometry::GazeVector u{a[0], a[1], a[2]}, v{b[0], b[1], b[2]};
  return geometry::degrees(geometry::angular_distance(u, v, 0.0));
}

struct Accumulator {
  std::size_t count = 0;
  double refined = 0.0, basic = 0.0;
  double w_sum = 0.0, w_sq = 0.0;
};

void mean_std(const Accumulator& a, double& mean, double& std) {
  mean = a.w_sum / static_cast<double>(a.count);
  std = std::sqrt(std::max(0.0, a.w_sq / static_cast<double>(a.count) - mean * mean));
}

EvalReport finish(const std::map<std::uint16_t, Accumulator>& by_subject, bool has_w) {
  EvalReport report;
  report.has_attention_weights = has_w;
  Accumulator total;
  for (const auto& [subject, acc] : by_subject) {
    SubjectReport s;
    s.subject = subject;
    s.count = acc.count;
    s.refined_deg = acc.refined / static_cast<double>(acc.count);
    s.basic_deg = acc.basic / static_cast<double>(acc.count);
    if (has_w) mean_std(acc, s.w_l_mean, s.w_l_std);
    report.per_subject.push_back(s);
    total.count += acc.count;
    total.refined += acc.refined;
    total.basic += acc.basic;
    total.w_sum += acc.w_sum;
    total.w_sq += acc.w_sq;
  }
  report.count = total.count;
  report.refined_deg = total.refined / static_cast<double>(total.count);
  report.basic_deg = total.basic / static_cast<double>(total.count);
  if (has_w) mean_std(total, report.w_l_mean, report.w_l_std);
  return report;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

LossCurve train(GazeModel<float>& model, const data::DatasetView& view, const TrainConfig& cfg,
                const EpochCallback& on_epoch) {
  cfg.validate();
  if (view.size() < 2) throw ConfigError("training needs at least 2 samples, got " + std::to_string(view.size()));
  check_geometry(model.config(), view.geometry());

  const auto params = model.trainable_parameters();
  std::vector<Tensor<float>> tensors;
  for (const auto& p : params) tensors.push_back(p.tensor);
  for (auto& t : tensors) t.set_requires_grad(true);
  auto optimizer = make_optimizer(cfg, tensors);

  LossCurve curve;
  Tape<float> tape;
  std::vector<std::size_t> order(view.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(cfg.seed, {epoch}));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t seen = 0, batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) continue;
      const std::vector<std::size_t> positions(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() + static_cast<std::ptrdiff_t>(end));
      const Batch batch = make_batch(view, positions);

      tape.reset();
      for (auto& t : tensors) t.clear_grad();
      ModelOutput<float> out;
      Tensor<float> loss;
      try {
        out = model.forward(tape, batch.inputs, Mode::train);
        loss = canet_loss(tape, out.g_b, out.g, batch.gaze, cfg.loss);
      } catch (const NumericError&) {
        // An op refused a NaN on the way; blame the parameter it came from if there is one.
        check_parameters(model, epoch, batch_index);
        throw;
      }
      const double value = loss.item();
      if (!std::isfinite(value)) report_non_finite(model, out, epoch, batch_index);
      tape.backward(loss);
      check_gradients(params, epoch, batch_index);
      optimizer->step();

      loss_sum += value * static_cast<double>(positions.size());
      seen += positions.size();
    }
    const double mean = loss_sum / static_cast<double>(seen);
    curve.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  tape.reset();
  for (auto& t : tensors) t.clear_grad();
  return curve;
}

EvalReport evaluate(GazeModel<float>& model, const data::DatasetView& view, std::size_t batch_size) {
  if (view.empty()) throw ConfigError("cannot evaluate an empty dataset view");
  if (batch_size == 0) throw ConfigError("evaluation batch size must be positive");
  check_geometry(model.config(), view.geometry());

  Tape<float> tape;
  tape.set_recording(false);
  std::map<std::uint16_t, Accumulator> by_subject;
  bool has_w = false;
  for (std::size_t start = 0; start < view.size(); start += batch_size) {
    const std::size_t end = std::min(view.size(), start + batch_size);
    std::vector<std::size_t> positions(end - start);
    std::iota(positions.begin(), positions.end(), start);
    const Batch batch = make_batch(view, positions);
    tape.reset();
    const auto out = model.forward(tape, batch.inputs, Mode::eval);
    has_w = out.diagnostics.w_l.defined();
    const auto g = out.g.data(), gb = out.g_b.data(), gt = batch.gaze.data();
    for (std::size_t i = 0; i < positions.size(); ++i) {
      auto& acc = by_subject[batch.subjects[i]];
      ++acc.count;
      acc.refined += angle_deg(g.subspan(3 * i, 3), gt.subspan(3 * i, 3));
      acc.basic += angle_deg(gb.subspan(3 * i, 3), gt.subspan(3 * i, 3));
      if (has_w) {
        const double w = out.diagnostics.w_l.data()[i];
        acc.w_sum += w;
        acc.w_sq += w * w;
      }
    }
  }
  return finish(by_subject, has_w);
}

EvalReport evaluate_constant(const data::DatasetView& view, const std::array<double, 3>& prediction) {
  if (view.empty()) throw ConfigError("cannot evaluate an empty dataset view");
  const geometry::GazeVector p{prediction[0], prediction[1], prediction[2]};
  std::map<std::uint16_t, Accumulator> by_subject;
  for (std::size_t i = 0; i < view.size(); ++i) {
    const auto& r = view[i];
    const double e = geometry::degrees(geometry::angular_distance(p, {r.gaze[0], r.gaze[1], r.gaze[2]}, 0.0));
    auto& acc = by_subject[r.subject_id];
    ++acc.count;
    acc.refined += e;
    acc.basic += e;
  }
  return finish(by_subject, false);
}

double monte_carlo_center_error_deg(double pitch_range_deg, double yaw_range_deg, std::size_t samples,
                                    std::uint64_t seed) {
  if (samples == 0) throw ConfigError("monte carlo estimate needs at least one sample");
  std::mt19937_64 rng(derive_seed(seed, {0x6d63}));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double pr = geometry::radians(pitch_range_deg), yr = geometry::radians(yaw_range_deg);
  double sum = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double pitch = pr * unit(rng);
    const double yaw = yr * unit(rng);
    sum += std::acos(std::clamp(std::cos(pitch) * std::cos(yaw), -1.0, 1.0));
  }
  return geometry::degrees(sum / static_cast<double>(samples));
}

std::vector<AblationRow> run_ablation_suite(const data::Dataset& dataset, std::uint16_t held_out,
                                            const ModelConfig& base, const TrainConfig& cfg,
                                            const std::function<void(const AblationRow&)>& on_row) {
  const auto [train_view, test_view] = data::split_leave_one_subject_out(dataset, held_out);
  std::vector<AblationRow> rows;
  for (const auto kind : all_variants()) {
    ModelConfig mc = base;
    mc.kind = kind;
    GazeModel<float> model(mc, cfg.seed);
    train(model, train_view, cfg);
    AblationRow row{kind, model.parameter_count(), evaluate(model, test_view)};
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_loss_csv(std::ostream& out, const LossCurve& curve) {
  out << "epoch,loss\n";
  for (std::size_t e = 0; e < curve.epoch_loss.size(); ++e) out << e << ',' << fmt(curve.epoch_loss[e]) << '\n';
}

void write_eval_csv(std::ostream& out, const EvalReport& report) {
  out << "subject,count,refined_deg,basic_deg,w_l_mean,w_l_std\n";
  auto row = [&](const std::string& subject, std::size_t count, double refined, double basic, double wm, double ws) {
    out << subject << ',' << count << ',' << fmt(refined) << ',' << fmt(basic) << ',';
    if (report.has_attention_weights) out << fmt(wm) << ',' << fmt(ws);
    else out << ',';
    out << '\n';
  };
  for (const auto& s : report.per_subject) {
    row(std::to_string(s.subject), s.count, s.refined_deg, s.basic_deg, s.w_l_mean, s.w_l_std);
  }
  row("all", report.count, report.refined_deg, report.basic_deg, report.w_l_mean, report.w_l_std);
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "variant,parameters,basic_deg,refined_deg,w_l_mean,w_l_std\n";
  for (const auto& r : rows) {
    out << to_string(r.kind) << ',' << r.parameter_count << ',' << fmt(r.report.basic_deg) << ','
        << fmt(r.report.refined_deg) << ',';
    if (r.report.has_attention_weights) out << fmt(r.report.w_l_mean) << ',' << fmt(r.report.w_l_std);
    else out << ',';
    out << '\n';
  }
}

}  // namespace canet::training
