// canet: dataset synthesis, training, evaluation, ablation and gradient checks.
//
// Exit codes: 0 ok, 2 configuration or shape error, 3 I/O or format error,
// 4 numeric abort, 5 verification failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "canet/checkpoint.hpp"
#include "canet/config.hpp"
#include "canet/dataset.hpp"
#include "canet/error.hpp"
#include "canet/gradcheck_suite.hpp"
#include "canet/training.hpp"

namespace {

namespace fs = std::filesystem;
using namespace canet;

enum ExitCode { kOk = 0, kConfig = 2, kIo = 3, kNumeric = 4, kCheckFailed = 5 };

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> scale;
  std::optional<std::string> variant;
  std::optional<std::uint16_t> hold_out;
  std::optional<std::size_t> epochs;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool model_flags) {
  cmd->add_option("--config", a.config, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", a.seed, "Seed for generation, initialization and shuffling");
  if (!model_flags) return;
  cmd->add_option("--scale", a.scale, "Channel width scale in (0, 1]");
  cmd->add_option("--variant", a.variant, "Model variant (canet, face_net, ...)");
  cmd->add_option("--hold-out-subject", a.hold_out, "Subject excluded from training and used for evaluation");
  cmd->add_option("--epochs", a.epochs, "Training epochs");
}

ExperimentConfig resolve(const CommonArgs& a) {
  ExperimentConfig c = a.config.empty() ? ExperimentConfig::desk() : load_config(a.config);
  if (a.seed) c.seed = *a.seed;
  if (a.scale) c.model.width_scale = *a.scale;
  if (a.variant) c.model.kind = parse_variant(*a.variant);
  if (a.hold_out) c.hold_out = *a.hold_out;
  if (a.epochs) c.train.epochs = *a.epochs;
  c.sync();
  return c;
}

void use_dataset_geometry(ExperimentConfig& c, const data::Geometry& g) {
  c.synth.geometry = g;
  c.sync();
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
}

template <typename Fn>
void write_text(const fs::path& path, Fn&& fn) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  fn(out);
  if (!out) throw IoError("write failed for " + path.string());
}

void print_report(const std::string& label, const training::EvalReport& r) {
  std::printf("%s: %zu samples, mean angular error %.3f deg (basic %.3f deg)\n", label.c_str(), r.count,
              r.refined_deg, r.basic_deg);
  if (r.has_attention_weights) std::printf("  attention w_l mean %.4f std %.4f\n", r.w_l_mean, r.w_l_std);
}

int cmd_synth(const CommonArgs& a, std::optional<std::uint16_t> subjects, std::optional<std::uint32_t> per_subject,
              std::optional<double> noise, const std::string& out) {
  auto c = resolve(a);
  if (subjects) c.synth.subjects = *subjects;
  if (per_subject) c.synth.samples_per_subject = *per_subject;
  if (noise) c.synth.noise = *noise;
  const auto dataset = data::synth_generate(c.synth);
  ensure_parent(out);
  data::write_dataset(dataset, out);
  std::printf("wrote %zu samples from %zu subjects (%ju bytes) to %s\n", dataset.size(), dataset.subjects().size(),
              static_cast<std::uintmax_t>(fs::file_size(out)), out.c_str());
  return kOk;
}

int cmd_train(const CommonArgs& a, const std::string& data_path, const fs::path& out_dir) {
  auto c = resolve(a);
  const auto dataset = data::read_dataset(data_path);
  use_dataset_geometry(c, dataset.geometry());
  c.validate();
  const auto [train_view, test_view] = data::split_leave_one_subject_out(dataset, c.hold_out);
  GazeModel<float> model(c.model, c.seed);
  std::printf("training %s (scale %g, %zu parameters) on %zu samples, holding out subject %u\n",
              std::string(to_string(c.model.kind)).c_str(), c.model.width_scale, model.parameter_count(),
              train_view.size(), static_cast<unsigned>(c.hold_out));
  const auto curve = training::train(model, train_view, c.train, [&](std::size_t epoch, double loss) {
    std::printf("  epoch %3zu  loss %.6f\n", epoch, loss);
    std::fflush(stdout);
  });
  fs::create_directories(out_dir);
  save_checkpoint(out_dir / "checkpoint.canw", model);
  write_text(out_dir / "loss.csv", [&](std::ostream& o) { training::write_loss_csv(o, curve); });
  std::printf("wrote %s and %s\n", (out_dir / "checkpoint.canw").c_str(), (out_dir / "loss.csv").c_str());
  return kOk;
}

int cmd_eval(const CommonArgs& a, const std::string& data_path, const std::string& checkpoint,
             const std::string& baseline, const fs::path& out) {
  auto c = resolve(a);
  const auto dataset = data::read_dataset(data_path);
  const auto [train_view, test_view] = data::split_leave_one_subject_out(dataset, c.hold_out);
  training::EvalReport report;
  std::string label;
  if (!baseline.empty()) {
    if (baseline != "center") throw ConfigError("unknown baseline '" + baseline + "' (expected center)");
    report = training::evaluate_constant(test_view);
    label = "baseline center";
  } else {
    if (checkpoint.empty()) throw ConfigError("eval needs --checkpoint or --baseline");
    auto model = load_checkpoint(checkpoint);
    report = training::evaluate(*model, test_view);
    label = std::string(to_string(model->kind()));
  }
  write_text(out, [&](std::ostream& o) { training::write_eval_csv(o, report); });
  print_report(label + ", subject " + std::to_string(c.hold_out), report);
  std::printf("wrote %s\n", out.c_str());
  return kOk;
}

int cmd_ablate(const CommonArgs& a, const std::string& data_path, const fs::path& out) {
  auto c = resolve(a);
  const auto dataset = data::read_dataset(data_path);
  use_dataset_geometry(c, dataset.geometry());
  c.validate();
  std::printf("ablation on subject %u, %zu epochs, scale %g\n", static_cast<unsigned>(c.hold_out), c.train.epochs,
              c.model.width_scale);
  std::printf("%-20s %10s %10s %10s\n", "variant", "params", "basic", "refined");
  const auto rows = training::run_ablation_suite(dataset, c.hold_out, c.model, c.train, [](const auto& row) {
    std::printf("%-20s %10zu %10.3f %10.3f\n", std::string(to_string(row.kind)).c_str(), row.parameter_count,
                row.report.basic_deg, row.report.refined_deg);
    std::fflush(stdout);
  });
  write_text(out, [&](std::ostream& o) { training::write_ablation_csv(o, rows); });
  std::printf("wrote %s\n", out.c_str());
  return kOk;
}

int cmd_gradcheck(std::optional<double> tol, std::size_t trials, std::uint64_t seed, const std::string& fault) {
  GradCheckSuiteOptions opts;
  if (tol) opts.op_tolerance = opts.model_tolerance = *tol;
  opts.trials = trials;
  opts.seed = seed;
  if (!fault.empty()) {
    if (fault != "conv2d") throw ConfigError("unknown fault '" + fault + "' (expected conv2d)");
    opts.inject_conv_fault = true;
  }
  std::printf("%-22s %6s %8s %12s %10s\n", "check", "trials", "entries", "worst", "tol");
  const auto report = run_gradcheck_suite(opts, [](const GradCheckSuiteEntry& e) {
    std::printf("%-22s %6zu %8zu %12.3e %10.1e  %s\n", e.name.c_str(), e.trials, e.entries, e.worst, e.tolerance,
                e.passed ? "ok" : "FAIL");
    std::fflush(stdout);
  });
  if (report.passed()) {
    std::printf("gradient check passed\n");
    return kOk;
  }
  std::string names;
  for (const auto& n : report.failures()) names += (names.empty() ? "" : ", ") + n;
  std::printf("gradient check FAILED: %s\n", names.c_str());
  return kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-to-fine gaze estimation toolkit"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string data_path, checkpoint, baseline, fault, out;
  std::optional<std::uint16_t> subjects;
  std::optional<std::uint32_t> per_subject;
  std::optional<double> noise, tol;
  std::size_t trials = 100;
  std::uint64_t check_seed = 0;

  auto* synth = app.add_subcommand("synth", "Render a synthetic dataset");
  add_common(synth, common, false);
  synth->add_option("--subjects", subjects, "Number of subjects");
  synth->add_option("--per-subject", per_subject, "Samples per subject");
  synth->add_option("--noise", noise, "Pixel noise std as a fraction of 255");
  synth->add_option("--out", out, "Output dataset file")->default_val("data.gzds");

  auto* train = app.add_subcommand("train", "Train a model, leaving one subject out");
  add_common(train, common, true);
  train->add_option("--data", data_path, "Dataset file")->required();
  train->add_option("--out", out, "Output directory for checkpoint.canw and loss.csv")->default_val("run");

  auto* eval = app.add_subcommand("eval", "Evaluate on the held-out subject");
  add_common(eval, common, true);
  eval->add_option("--data", data_path, "Dataset file")->required();
  eval->add_option("--checkpoint", checkpoint, "Checkpoint written by train");
  eval->add_option("--baseline", baseline, "Evaluate a constant predictor instead (center)");
  eval->add_option("--out", out, "Output report CSV")->default_val("eval.csv");

  auto* ablate = app.add_subcommand("ablate", "Train and compare all ten variants");
  add_common(ablate, common, true);
  ablate->add_option("--data", data_path, "Dataset file")->required();
  ablate->add_option("--out", out, "Output comparison CSV")->default_val("ablation.csv");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gradcheck->add_option("--tol", tol, "Relative tolerance for every check");
  gradcheck->add_option("--trials", trials, "Random shapes per op")->default_val(100);
  gradcheck->add_option("--seed", check_seed, "Seed for random shapes and values");
  gradcheck->add_option("--inject-fault", fault, "Test fixture: corrupt an op's backward (conv2d)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*synth) return cmd_synth(common, subjects, per_subject, noise, out);
    if (*train) return cmd_train(common, data_path, out);
    if (*eval) return cmd_eval(common, data_path, checkpoint, baseline, out);
    if (*ablate) return cmd_ablate(common, data_path, out);
    if (*gradcheck) return cmd_gradcheck(tol, trials, check_seed, fault);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  }
  return kOk;
}
