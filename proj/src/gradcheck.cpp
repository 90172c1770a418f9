#include "canet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "canet/error.hpp"

namespace canet {

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& p : params) w = std::max(w, p.max_rel_error);
  return w;
}

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

double fd_roundoff_bound(double f_up, double f_down, double step) {
  constexpr double kUlps = 16.0;
  return kUlps * std::numeric_limits<double>::epsilon() * std::max(std::abs(f_up), std::abs(f_down)) / step;
}

namespace {

std::vector<std::size_t> entries_to_check(std::size_t numel, std::size_t limit, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(numel);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (limit == 0 || numel <= limit) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double evaluate(const std::function<Tensor<double>(Tape<double>&)>& loss, const std::string& name) {
  Tape<double> tape;
  tape.set_recording(false);
  const double v = loss(tape).item();
  if (!std::isfinite(v)) throw NumericError("gradient check: non-finite loss while perturbing " + name);
  return v;
}

}  // namespace

GradCheckReport finite_difference_check(const std::function<Tensor<double>(Tape<double>&)>& loss,
                                        std::span<const NamedTensor<double>> params,
                                        const GradCheckOptions& options) {
  std::vector<Tensor<double>> handles;
  for (const auto& p : params) {
    Tensor<double> t = p.tensor;
    t.set_requires_grad(true);
    t.clear_grad();
    handles.push_back(t);
  }

  Tape<double> tape;
  const auto root = loss(tape);
  if (!std::isfinite(root.item())) throw NumericError("gradient check: non-finite loss at the base point");
  tape.backward(root);

  GradCheckReport report;
  report.tolerance = options.tolerance;
  std::mt19937_64 rng(options.seed);
  const double h = options.step;

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& t = handles[p];
    const auto& name = params[p].name;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    ParamCheck check{name, 0.0, 0};
    for (auto i : entries_to_check(t.numel(), options.max_entries_per_param, rng)) {
      if (!std::isfinite(analytic[i])) throw NumericError("gradient check: non-finite gradient for " + name);
      auto values = t.mutable_data();
      const double original = values[i];
      values[i] = original + h;
      const double up = evaluate(loss, name);
      values[i] = original - h;
      const double down = evaluate(loss, name);
      values[i] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double excess = std::max(0.0, std::abs(analytic[i] - numeric) - fd_roundoff_bound(up, down, h));
      const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      check.max_rel_error = std::max(check.max_rel_error, excess / scale);
      ++check.entries_checked;
    }
    report.passed = report.passed && check.max_rel_error <= options.tolerance;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace canet
