#include "canet/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>

#include "canet/error.hpp"
#include "canet/geometry.hpp"
#include "canet/gradcheck.hpp"
#include "canet/layers.hpp"
#include "canet/model.hpp"
#include "canet/ops.hpp"
#include "canet/random.hpp"

namespace canet {

namespace {

using T = double;
using Rng = std::mt19937_64;
using LossFn = std::function<Tensor<T>(Tape<T>&)>;

struct Trial {
  LossFn loss;
  std::vector<NamedTensor<T>> params;
};

using TrialFactory = std::function<Trial(Rng&)>;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor<T> uniform(Rng& rng, Shape shape, T lo = -1.0, T hi = 1.0) {
  std::uniform_real_distribution<T> d(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor<T>(std::move(shape), std::move(v));
}

// Values bounded away from zero so that a step never crosses the ReLU kink.
Tensor<T> away_from_zero(Rng& rng, Shape shape) {
  std::uniform_real_distribution<T> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor<T>(std::move(shape), std::move(v));
}

// Distinct values at least 0.05 apart so pooling windows never tie.
Tensor<T> distinct(Rng& rng, Shape shape) {
  std::vector<T> v(shape_numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<T>(i) - 0.025 * static_cast<T>(v.size());
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor<T>(std::move(shape), std::move(v));
}

Tensor<T> param(Tensor<T> t) {
  t.set_requires_grad(true);
  return t;
}

Tensor<T> unit_rows(Rng& rng, std::size_t n) {
  std::uniform_real_distribution<T> angle(-0.6, 0.6);
  std::vector<T> v;
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = geometry::pitchyaw_to_vector(angle(rng), angle(rng));
    v.insert(v.end(), {g.x, g.y, g.z});
  }
  return Tensor<T>({n, 3}, std::move(v));
}

Tensor<T> near_unit_rows(Rng& rng, std::size_t n) {
  auto t = unit_rows(rng, n);
  std::uniform_real_distribution<T> jitter(-0.3, 0.3);
  for (auto& x : t.mutable_data()) x += jitter(rng);
  return t;
}

// sum(W * y) with W drawn once per trial.
LossFn weighted(Rng& rng, Shape out_shape, std::function<Tensor<T>(Tape<T>&)> body) {
  const auto w = uniform(rng, std::move(out_shape));
  return [w, body = std::move(body)](Tape<T>& tape) { return ops::sum(tape, ops::mul(tape, w, body(tape))); };
}

Trial elementwise_trial(Rng& rng, ops::ElementwiseKind kind) {
  const Shape s{pick(rng, 1, 4), pick(rng, 1, 4)};
  const bool binary = kind == ops::ElementwiseKind::add || kind == ops::ElementwiseKind::sub ||
                      kind == ops::ElementwiseKind::mul;
  const auto a = param(kind == ops::ElementwiseKind::relu ? away_from_zero(rng, s) : uniform(rng, s, -2.0, 2.0));
  const auto b = binary ? param(uniform(rng, s)) : Tensor<T>{};
  Trial t{weighted(rng, s, [=](Tape<T>& tape) { return ops::elementwise(tape, kind, a, b); }), {{"a", a}}};
  if (binary) t.params.push_back({"b", b});
  return t;
}

std::vector<std::pair<std::string, TrialFactory>> op_factories() {
  using K = ops::ElementwiseKind;
  std::vector<std::pair<std::string, TrialFactory>> f;
  f.emplace_back("add", [](Rng& r) { return elementwise_trial(r, K::add); });
  f.emplace_back("sub", [](Rng& r) { return elementwise_trial(r, K::sub); });
  f.emplace_back("mul", [](Rng& r) { return elementwise_trial(r, K::mul); });
  f.emplace_back("relu", [](Rng& r) { return elementwise_trial(r, K::relu); });
  f.emplace_back("tanh", [](Rng& r) { return elementwise_trial(r, K::tanh); });
  f.emplace_back("sigmoid", [](Rng& r) { return elementwise_trial(r, K::sigmoid); });
  f.emplace_back("affine_scalar", [](Rng& r) {
    const Shape s{pick(r, 1, 4), pick(r, 1, 4)};
    const auto a = param(uniform(r, s));
    std::uniform_real_distribution<T> d(-2.0, 2.0);
    const T scale = d(r), shift = d(r);
    return Trial{weighted(r, s, [=](Tape<T>& t) { return ops::affine_scalar(t, a, scale, shift); }), {{"a", a}}};
  });
  f.emplace_back("matmul", [](Rng& r) {
    const std::size_t m = pick(r, 1, 5), k = pick(r, 1, 5), n = pick(r, 1, 5);
    const auto a = param(uniform(r, {m, k})), b = param(uniform(r, {k, n}));
    return Trial{weighted(r, {m, n}, [=](Tape<T>& t) { return ops::matmul(t, a, b); }), {{"a", a}, {"b", b}}};
  });
  f.emplace_back("concat", [](Rng& r) {
    const std::size_t axis = pick(r, 0, 1), m = pick(r, 1, 4), n = pick(r, 1, 4), k = pick(r, 1, 4);
    const auto a = param(uniform(r, {m, n}));
    const auto b = param(uniform(r, axis == 0 ? Shape{k, n} : Shape{m, k}));
    const Shape out = axis == 0 ? Shape{m + k, n} : Shape{m, n + k};
    return Trial{weighted(r, out, [=](Tape<T>& t) { return ops::concat(t, a, b, axis); }), {{"a", a}, {"b", b}}};
  });
  f.emplace_back("slice", [](Rng& r) {
    const std::size_t axis = pick(r, 0, 1);
    const Shape s{pick(r, 1, 5), pick(r, 1, 5)};
    const std::size_t start = pick(r, 0, s[axis] - 1), len = pick(r, 1, s[axis] - start);
    Shape out = s;
    out[axis] = len;
    const auto a = param(uniform(r, s));
    return Trial{weighted(r, out, [=](Tape<T>& t) { return ops::slice(t, a, axis, start, len); }), {{"a", a}}};
  });
  f.emplace_back("reshape", [](Rng& r) {
    const std::size_t m = pick(r, 1, 4), n = pick(r, 1, 4);
    const auto a = param(uniform(r, {m, n}));
    return Trial{weighted(r, {n, m}, [=](Tape<T>& t) { return ops::reshape(t, a, {n, m}); }), {{"a", a}}};
  });
  f.emplace_back("expand_rows", [](Rng& r) {
    const std::size_t m = pick(r, 1, 4), n = pick(r, 1, 4);
    const auto a = param(uniform(r, {1, n}));
    return Trial{weighted(r, {m, n}, [=](Tape<T>& t) { return ops::expand_rows(t, a, m); }), {{"a", a}}};
  });
  f.emplace_back("expand_cols", [](Rng& r) {
    const std::size_t m = pick(r, 1, 4), n = pick(r, 1, 4);
    const auto a = param(uniform(r, {m, 1}));
    return Trial{weighted(r, {m, n}, [=](Tape<T>& t) { return ops::expand_cols(t, a, n); }), {{"a", a}}};
  });
  f.emplace_back("softmax", [](Rng& r) {
    const bool matrix = pick(r, 0, 1) == 1;
    const Shape s = matrix ? Shape{pick(r, 1, 4), pick(r, 1, 5)} : Shape{pick(r, 1, 6)};
    const auto a = param(uniform(r, s, -3.0, 3.0));
    return Trial{weighted(r, s, [=](Tape<T>& t) { return ops::softmax(t, a); }), {{"a", a}}};
  });
  f.emplace_back("sum", [](Rng& r) {
    const auto a = param(uniform(r, {pick(r, 1, 4), pick(r, 1, 4)}));
    const T w = std::uniform_real_distribution<T>(0.5, 2.0)(r);
    return Trial{[=](Tape<T>& t) { return ops::affine_scalar(t, ops::sum(t, a), w, T(0)); }, {{"a", a}}};
  });
  f.emplace_back("mean", [](Rng& r) {
    const auto a = param(uniform(r, {pick(r, 1, 4), pick(r, 1, 4)}));
    const T w = std::uniform_real_distribution<T>(0.5, 2.0)(r);
    return Trial{[=](Tape<T>& t) { return ops::affine_scalar(t, ops::mean(t, a), w, T(0)); }, {{"a", a}}};
  });
  f.emplace_back("angular_distance", [](Rng& r) {
    const std::size_t n = pick(r, 1, 4);
    const auto a = param(uniform(r, {n, 3})), b = param(uniform(r, {n, 3}));
    return Trial{weighted(r, {n}, [=](Tape<T>& t) { return ops::angular_distance_rows(t, a, b, T(1e-7)); }),
                 {{"a", a}, {"b", b}}};
  });
  f.emplace_back("conv2d", [](Rng& r) {
    const std::size_t n = pick(r, 1, 2), c = pick(r, 1, 3), h = pick(r, 2, 6), w = pick(r, 2, 6), o = pick(r, 1, 3);
    const std::size_t stride = pick(r, 1, 2);
    const auto x = param(uniform(r, {n, c, h, w})), k = param(uniform(r, {o, c, 3, 3})), b = param(uniform(r, {o}));
    const Shape out{n, o, (h - 1) / stride + 1, (w - 1) / stride + 1};
    return Trial{weighted(r, out, [=](Tape<T>& t) { return ops::conv2d(t, x, k, b, stride); }),
                 {{"x", x}, {"weight", k}, {"bias", b}}};
  });
  auto batchnorm = [](Mode mode) {
    return [mode](Rng& r) {
      const std::size_t c = pick(r, 1, 3);
      const bool spatial = pick(r, 0, 1) == 1;
      const Shape s = spatial ? Shape{pick(r, 2, 3), c, pick(r, 1, 3), pick(r, 1, 3)} : Shape{pick(r, 2, 5), c};
      const auto x = param(uniform(r, s, -2.0, 2.0));
      const auto gamma = param(uniform(r, {c}, 0.5, 1.5)), beta = param(uniform(r, {c}));
      const auto mean0 = uniform(r, {c}, -0.5, 0.5), var0 = uniform(r, {c}, 0.5, 2.0);
      LossFn body = weighted(r, s, [=](Tape<T>& t) {
        // Fresh buffers per evaluation keep every call identical.
        Tensor<T> rm = mean0.detached_copy(), rv = var0.detached_copy();
        return ops::batchnorm(t, x, gamma, beta, rm, rv, mode, T(1e-5), T(0.1));
      });
      return Trial{body, {{"x", x}, {"gamma", gamma}, {"beta", beta}}};
    };
  };
  f.emplace_back("batchnorm_train", batchnorm(Mode::train));
  f.emplace_back("batchnorm_eval", batchnorm(Mode::eval));
  f.emplace_back("maxpool2x2", [](Rng& r) {
    const std::size_t n = pick(r, 1, 2), c = pick(r, 1, 2), h = pick(r, 1, 5), w = pick(r, 1, 5);
    const auto x = param(distinct(r, {n, c, h, w}));
    return Trial{weighted(r, {n, c, (h + 1) / 2, (w + 1) / 2}, [=](Tape<T>& t) { return ops::maxpool2x2(t, x); }),
                 {{"x", x}}};
  });
  f.emplace_back("global_avg_pool", [](Rng& r) {
    const std::size_t n = pick(r, 1, 3), c = pick(r, 1, 3);
    const auto x = param(uniform(r, {n, c, pick(r, 1, 4), pick(r, 1, 4)}));
    return Trial{weighted(r, {n, c}, [=](Tape<T>& t) { return ops::global_avg_pool(t, x); }), {{"x", x}}};
  });
  auto attention = [](AttentionMode mode) {
    return [mode](Rng& r) {
      const std::size_t n = pick(r, 1, 3), q = pick(r, 1, 4), d = pick(r, 1, 4), da = pick(r, 1, 4);
      Rng init(r());
      auto p = AttentionParams<T>::make(mode, q, d, da, init);
      const auto query = param(uniform(r, {n, q}));
      const auto fl = param(uniform(r, {n, d})), fr = param(uniform(r, {n, d}));
      std::vector<ParamRef<T>> refs;
      p.collect(refs, "attention");
      Trial trial{weighted(r, {n, d}, [=](Tape<T>& t) { return attention_fuse(t, mode, query, fl, fr, p).fused; }),
                  {{"f_l", fl}, {"f_r", fr}}};
      if (mode == AttentionMode::additive || mode == AttentionMode::query_only) trial.params.push_back({"query", query});
      for (auto& ref : refs) trial.params.push_back({ref.name, param(ref.tensor)});
      return trial;
    };
  };
  f.emplace_back("attention_additive", attention(AttentionMode::additive));
  f.emplace_back("attention_query_only", attention(AttentionMode::query_only));
  f.emplace_back("attention_eye_only", attention(AttentionMode::eye_only));
  f.emplace_back("attention_fixed_half", attention(AttentionMode::fixed_half));
  auto gate = [](CandidateActivation act) {
    return [act](Rng& r) {
      const std::size_t n = pick(r, 1, 3), d = pick(r, 1, 4);
      Rng init(r());
      GateParams<T> p(d, d, init);
      HeadState<T> state{param(uniform(r, {n, d})), {}, {}, {}};
      const auto feature = param(uniform(r, {n, d}));
      std::vector<ParamRef<T>> refs;
      p.collect(refs, "gate");
      Trial trial{weighted(r, {n, d}, [=](Tape<T>& t) { return gate_step(t, state, feature, p, act).h; }),
                  {{"h", state.h}, {"feature", feature}}};
      for (auto& ref : refs) trial.params.push_back({ref.name, param(ref.tensor)});
      return trial;
    };
  };
  f.emplace_back("gate_relu", gate(CandidateActivation::relu));
  f.emplace_back("gate_tanh", gate(CandidateActivation::tanh));
  f.emplace_back("canet_loss", [](Rng& r) {
    const std::size_t n = pick(r, 1, 4);
    const auto g_star = unit_rows(r, n);
    const auto gb = param(near_unit_rows(r, n)), g = param(near_unit_rows(r, n));
    std::uniform_real_distribution<T> wd(0.5, 2.0);
    const LossWeights weights{wd(r), wd(r)};
    return Trial{[=](Tape<T>& t) { return canet_loss(t, gb, g, g_star, weights); }, {{"g_b", gb}, {"g", g}}};
  });
  return f;
}

void absorb(GradCheckSuiteEntry& entry, const GradCheckReport& report) {
  for (const auto& p : report.params) {
    entry.entries += p.entries_checked;
    if (entry.worst_param.empty() || p.max_rel_error > entry.worst) {
      entry.worst = p.max_rel_error;
      entry.worst_param = p.name;
    }
  }
}

GradCheckSuiteEntry run_op(const std::string& name, const TrialFactory& factory, const GradCheckSuiteOptions& opts,
                           std::uint64_t stream) {
  GradCheckSuiteEntry entry;
  entry.name = name;
  entry.tolerance = opts.op_tolerance;
  entry.trials = opts.trials;
  for (std::size_t i = 0; i < opts.trials; ++i) {
    Rng rng(derive_seed(opts.seed, {stream, i}));
    const Trial trial = factory(rng);
    GradCheckOptions gc;
    gc.tolerance = opts.op_tolerance;
    const auto report = finite_difference_check(trial.loss, trial.params, gc);
    absorb(entry, report);
  }
  entry.passed = entry.worst <= entry.tolerance;
  return entry;
}

// A smaller step than the op checks: with hundreds of ReLU and max-pool units
// downstream of an early weight, a 1e-5 step regularly crosses a kink.
constexpr double kModelStep = 1e-7;

GradCheckSuiteEntry run_model(const GradCheckSuiteOptions& opts) {
  GradCheckSuiteEntry entry;
  entry.name = "canet_model";
  entry.model_level = true;
  entry.tolerance = opts.model_tolerance;
  entry.trials = 1;

  ModelConfig cfg;
  cfg.kind = VariantKind::canet;
  cfg.width_scale = 1.0 / 16.0;
  cfg.face_height = 8;
  cfg.face_width = 8;
  cfg.eye_height = 6;
  cfg.eye_width = 10;
  GazeModel<T> model(cfg, derive_seed(opts.seed, {0x6d6f64656c}));
  constexpr std::size_t kBatch = 4;
  Rng rng(derive_seed(opts.seed, {0x696e707574}));
  const ModelInputs<T> inputs{uniform(rng, {kBatch, 3, 8, 8}, 0.0, 1.0), uniform(rng, {kBatch, 1, 6, 10}, 0.0, 1.0),
                              uniform(rng, {kBatch, 1, 6, 10}, 0.0, 1.0)};
  const auto g_star = unit_rows(rng, kBatch);

  std::vector<NamedTensor<T>> params;
  for (auto& p : model.trainable_parameters()) params.push_back({p.name, param(p.tensor)});
  LossFn loss = [&](Tape<T>& tape) {
    const auto out = model.forward(tape, inputs, Mode::train);
    return canet_loss(tape, out.g_b, out.g, g_star, LossWeights{});
  };
  GradCheckOptions gc;
  gc.tolerance = opts.model_tolerance;
  gc.step = kModelStep;
  gc.max_entries_per_param = opts.model_entries_per_param;
  gc.seed = opts.seed;
  absorb(entry, finite_difference_check(loss, params, gc));
  entry.passed = entry.worst <= entry.tolerance;
  return entry;
}

}  // namespace

bool GradCheckSuiteReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

std::vector<std::string> GradCheckSuiteReport::failures() const {
  std::vector<std::string> names;
  for (const auto& e : entries)
    if (!e.passed) names.push_back(e.name);
  return names;
}

std::vector<std::string> gradcheck_suite_ops() {
  std::vector<std::string> names;
  for (const auto& [name, factory] : op_factories()) names.push_back(name);
  return names;
}

GradCheckSuiteReport run_gradcheck_suite(const GradCheckSuiteOptions& options,
                                         const std::function<void(const GradCheckSuiteEntry&)>& on_entry) {
  std::optional<fault::ScopedConvBackwardSignFlip> fault;
  if (options.inject_conv_fault) fault.emplace();

  GradCheckSuiteReport report;
  const auto factories = op_factories();
  for (std::size_t k = 0; k < factories.size(); ++k) {
    report.entries.push_back(run_op(factories[k].first, factories[k].second, options, k));
    if (on_entry) on_entry(report.entries.back());
  }
  report.entries.push_back(run_model(options));
  if (on_entry) on_entry(report.entries.back());
  return report;
}

}  // namespace canet
