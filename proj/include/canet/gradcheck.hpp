#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "canet/tensor.hpp"

namespace canet {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  // 0 checks every entry; otherwise a seeded sample of at most this many
  // entries per parameter tensor.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double tolerance = 0.0;
  bool passed = true;

  double worst() const;
};

/// |ad - fd| / max(|ad|, |fd|, 1e-8).
double relative_error(double analytic, double numeric);

/// Bound on the rounding error of a central difference: 16 ulps of the larger
/// loss value, divided by the step. Differences below it carry no information
/// about the gradient.
double fd_roundoff_bound(double f_up, double f_down, double step);

/// Compares reverse-mode gradients of a scalar function against central
/// differences (f(x+h) - f(x-h)) / 2h, entry by entry, for every listed
/// parameter. An entry's error is relative_error computed after first
/// subtracting fd_roundoff_bound from |ad - fd| (clamped at zero). `loss` must build its graph on the tape it is handed and be
/// deterministic. Existing gradients of the parameters are discarded.
///
/// Throws NumericError naming the parameter when a loss value or gradient is
/// not finite.
GradCheckReport finite_difference_check(const std::function<Tensor<double>(Tape<double>&)>& loss,
                                        std::span<const NamedTensor<double>> params,
                                        const GradCheckOptions& options = {});

}  // namespace canet
