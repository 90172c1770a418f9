#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

// Finite-difference verification of every differentiable op and of the whole
// toy model, all in 64-bit. Each op is checked on randomized small shapes with
// the scalar loss sum(W * op(inputs)) for a random fixed W.
namespace canet {

struct GradCheckSuiteOptions {
  double op_tolerance = 1e-5;
  double model_tolerance = 1e-4;
  std::size_t trials = 100;  // random shapes per op
  // Entries sampled per parameter tensor in the whole-model check.
  std::size_t model_entries_per_param = 12;
  std::uint64_t seed = 0;
  // Negate conv2d backward for the duration of the run (mutation test).
  bool inject_conv_fault = false;
};

struct GradCheckSuiteEntry {
  std::string name;
  bool model_level = false;
  std::size_t trials = 0;
  std::size_t entries = 0;
  double worst = 0.0;  // largest relative error seen
  std::string worst_param;
  double tolerance = 0.0;
  bool passed = true;
};

struct GradCheckSuiteReport {
  std::vector<GradCheckSuiteEntry> entries;
  bool passed() const;
  std::vector<std::string> failures() const;
};

/// Names of the op-level checks, in run order.
std::vector<std::string> gradcheck_suite_ops();

GradCheckSuiteReport run_gradcheck_suite(const GradCheckSuiteOptions& options,
                                         const std::function<void(const GradCheckSuiteEntry&)>& on_entry = {});

}  // namespace canet
