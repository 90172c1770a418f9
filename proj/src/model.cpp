#include "canet/model.hpp"

#include <cmath>

#include "canet/error.hpp"
#include "canet/ops.hpp"
#include "canet/random.hpp"

namespace canet {

// ---- attention --------------------------------------------------------------

template <typename T>
AttentionParams<T> AttentionParams<T>::make(AttentionMode mode, std::size_t query_dim, std::size_t feature_dim,
                                            std::size_t attention_dim, std::mt19937_64& rng) {
  AttentionParams p;
  if (mode == AttentionMode::fixed_half) return p;
  auto param = [&](std::size_t rows, std::size_t cols) {
    Tensor<T> t({rows, cols}, msra_normal<T>(rows * cols, rows, rng));
    t.set_requires_grad(true);
    return t;
  };
  if (mode != AttentionMode::eye_only) p.w1 = param(query_dim, attention_dim);
  if (mode != AttentionMode::query_only) p.w2 = param(feature_dim, attention_dim);
  p.v = param(attention_dim, 1);
  if (mode == AttentionMode::query_only) p.v_right = param(attention_dim, 1);
  return p;
}

template <typename T>
void AttentionParams<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
  if (v.defined()) out.push_back({prefix + ".v", v, true});
  if (v_right.defined()) out.push_back({prefix + ".v_right", v_right, true});
  if (w1.defined()) out.push_back({prefix + ".w1", w1, true});
  if (w2.defined()) out.push_back({prefix + ".w2", w2, true});
}

template <typename T>
AttentionOutput<T> attention_fuse(Tape<T>& tape, AttentionMode mode, const Tensor<T>& query, const Tensor<T>& f_l,
                                  const Tensor<T>& f_r, const AttentionParams<T>& params) {
  if (f_l.rank() != 2 || f_l.shape() != f_r.shape()) {
    throw ShapeError("attention: eye features must be equal [N, D] matrices, got " + shape_to_string(f_l.shape()) +
                     " and " + shape_to_string(f_r.shape()));
  }
  const std::size_t n = f_l.dim(0), d = f_l.dim(1);
  AttentionOutput<T> out;
  if (mode == AttentionMode::fixed_half) {
    out.w_l = Tensor<T>::full({n, 1}, T(0.5));
    out.w_r = Tensor<T>::full({n, 1}, T(0.5));
  } else {
    if (mode != AttentionMode::eye_only && (!query.defined() || query.rank() != 2 || query.dim(0) != n ||
                                            query.dim(1) != params.w1.dim(0))) {
      throw ShapeError("attention: query must be [" + std::to_string(n) + ", " + std::to_string(params.w1.dim(0)) +
                       "], got " + (query.defined() ? shape_to_string(query.shape()) : std::string("undefined")));
    }
    if (mode != AttentionMode::query_only && params.w2.dim(0) != d) {
      throw ShapeError("attention: eye feature dim " + std::to_string(d) + " does not match W_2 input " +
                       std::to_string(params.w2.dim(0)));
    }
    switch (mode) {
      case AttentionMode::additive: {
        const auto q = ops::matmul(tape, query, params.w1);
        out.m_l = ops::matmul(tape, ops::tanh(tape, ops::add(tape, q, ops::matmul(tape, f_l, params.w2))), params.v);
        out.m_r = ops::matmul(tape, ops::tanh(tape, ops::add(tape, q, ops::matmul(tape, f_r, params.w2))), params.v);
        break;
      }
      case AttentionMode::query_only: {
        const auto s = ops::tanh(tape, ops::matmul(tape, query, params.w1));
        out.m_l = ops::matmul(tape, s, params.v);
        out.m_r = ops::matmul(tape, s, params.v_right);
        break;
      }
      case AttentionMode::eye_only:
        out.m_l = ops::matmul(tape, ops::tanh(tape, ops::matmul(tape, f_l, params.w2)), params.v);
        out.m_r = ops::matmul(tape, ops::tanh(tape, ops::matmul(tape, f_r, params.w2)), params.v);
        break;
      case AttentionMode::fixed_half:
        break;
    }
    const auto w = ops::softmax(tape, ops::concat(tape, out.m_l, out.m_r, 1));
    out.w_l = ops::slice(tape, w, 1, 0, 1);
    out.w_r = ops::slice(tape, w, 1, 1, 1);
  }
  out.fused = ops::add(tape, ops::mul(tape, ops::expand_cols(tape, out.w_l, d), f_l),
                       ops::mul(tape, ops::expand_cols(tape, out.w_r, d), f_r));
  return out;
}

// ---- gate -------------------------------------------------------------------

template <typename T>
GateParams<T>::GateParams(std::size_t state_dim, std::size_t feature_dim, std::mt19937_64& rng, T z_bias)
    : wz(state_dim + feature_dim, state_dim, rng),
      wr(state_dim + feature_dim, state_dim, rng),
      wh(state_dim + feature_dim, state_dim, rng) {
  Tensor<T> b = wz.bias();
  for (auto& v : b.mutable_data()) v = z_bias;
}

template <typename T>
void GateParams<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
  wz.collect(out, prefix + ".wz");
  wr.collect(out, prefix + ".wr");
  wh.collect(out, prefix + ".wh");
}

template <typename T>
HeadState<T> initial_state(std::size_t batch, std::size_t state_dim) {
  return {Tensor<T>::zeros({batch, state_dim}), {}, {}, {}};
}

template <typename T>
HeadState<T> gate_step(Tape<T>& tape, const HeadState<T>& state, const Tensor<T>& feature, const GateParams<T>& params,
                       CandidateActivation activation) {
  const auto& h = state.h;
  if (h.rank() != 2 || feature.rank() != 2 || h.dim(0) != feature.dim(0) || h.dim(1) != params.state_dim() ||
      h.dim(1) + feature.dim(1) != params.wz.in_features()) {
    throw ShapeError("gate_step: state " + shape_to_string(h.shape()) + " and feature " +
                     shape_to_string(feature.shape()) + " do not fit gate of input " +
                     std::to_string(params.wz.in_features()) + " and state " + std::to_string(params.state_dim()));
  }
  HeadState<T> next;
  const auto hf = ops::concat(tape, h, feature, 1);
  next.z = ops::sigmoid(tape, params.wz.forward(tape, hf));
  next.r = ops::sigmoid(tape, params.wr.forward(tape, hf));
  const auto candidate_in = params.wh.forward(tape, ops::concat(tape, ops::mul(tape, next.r, h), feature, 1));
  next.h_tilde = activation == CandidateActivation::relu ? ops::relu(tape, candidate_in) : ops::tanh(tape, candidate_in);
  const auto keep = ops::affine_scalar(tape, next.z, T(-1), T(1));
  next.h = ops::add(tape, ops::mul(tape, keep, h), ops::mul(tape, next.z, next.h_tilde));
  return next;
}

// ---- loss -------------------------------------------------------------------

template <typename T>
Tensor<T> canet_loss(Tape<T>& tape, const Tensor<T>& g_b, const Tensor<T>& g, const Tensor<T>& g_star,
                     const LossWeights& weights, T clamp_eps) {
  if (!(weights.alpha >= 0.0) || !(weights.beta >= 0.0)) throw ConfigError("loss weights must be non-negative");
  if (g_star.rank() != 2 || g_star.dim(1) != 3) {
    throw ShapeError("loss: ground truth must be [N, 3], got " + shape_to_string(g_star.shape()));
  }
  for (std::size_t r = 0; r < g_star.dim(0); ++r) {
    const T* v = g_star.data().data() + 3 * r;
    const double n = std::sqrt(double(v[0]) * v[0] + double(v[1]) * v[1] + double(v[2]) * v[2]);
    if (std::abs(n - 1.0) > 1e-4) throw NumericError("loss: ground-truth row " + std::to_string(r) + " is not unit length");
  }
  const auto basic = ops::angular_distance_rows(tape, g_b, g_star, clamp_eps);
  const auto refined = ops::angular_distance_rows(tape, g, g_star, clamp_eps);
  const auto total = ops::add(tape, ops::affine_scalar(tape, basic, T(weights.alpha), T(0)),
                              ops::affine_scalar(tape, refined, T(weights.beta), T(0)));
  return ops::mean(tape, total);
}

// ---- variants ---------------------------------------------------------------

const std::array<VariantKind, 10>& all_variants() {
  static const std::array<VariantKind, 10> kinds{
      VariantKind::canet,          VariantKind::face_net,           VariantKind::eye_net,
      VariantKind::joint_net,      VariantKind::gate_ablation,      VariantKind::attention_ablation,
      VariantKind::one_gram,       VariantKind::fine_to_coarse,     VariantKind::face_attention,
      VariantKind::eye_attention};
  return kinds;
}

std::string_view to_string(VariantKind kind) {
  switch (kind) {
    case VariantKind::canet: return "canet";
    case VariantKind::face_net: return "face_net";
    case VariantKind::eye_net: return "eye_net";
    case VariantKind::joint_net: return "joint_net";
    case VariantKind::gate_ablation: return "gate_ablation";
    case VariantKind::attention_ablation: return "attention_ablation";
    case VariantKind::one_gram: return "one_gram";
    case VariantKind::fine_to_coarse: return "fine_to_coarse";
    case VariantKind::face_attention: return "face_attention";
    case VariantKind::eye_attention: return "eye_attention";
  }
  return "?";
}

VariantKind parse_variant(std::string_view name) {
  for (auto k : all_variants()) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

namespace {

bool single_stage(VariantKind k) {
  return k == VariantKind::face_net || k == VariantKind::eye_net || k == VariantKind::joint_net;
}

AttentionMode attention_mode_for(VariantKind k) {
  switch (k) {
    case VariantKind::attention_ablation: return AttentionMode::fixed_half;
    case VariantKind::face_attention: return AttentionMode::query_only;
    case VariantKind::eye_attention:
    case VariantKind::fine_to_coarse: return AttentionMode::eye_only;
    default: return AttentionMode::additive;
  }
}

}  // namespace

template <typename T>
GazeModel<T>::GazeModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config), rng_(derive_seed(seed, {4})), attention_mode_(attention_mode_for(config.kind)) {
  const auto kind = config_.kind;
  if (kind != VariantKind::eye_net) face_.emplace(config_.face_spec(), derive_seed(seed, {1}));
  if (kind != VariantKind::face_net) {
    left_.emplace(config_.eye_spec(), derive_seed(seed, {2}));
    right_.emplace(config_.eye_spec(), derive_seed(seed, {3}));
  }
  const std::size_t d = config_.state_dim();
  const std::size_t eye_d = config_.eye_spec().feature_dim();
  const T z_bias = static_cast<T>(config_.z_bias);

  switch (kind) {
    case VariantKind::face_net: head_b_.emplace(d, 3, rng_); return;
    case VariantKind::eye_net: head_b_.emplace(2 * eye_d, 3, rng_); return;
    case VariantKind::joint_net: head_b_.emplace(d + 2 * eye_d, 3, rng_); return;
    case VariantKind::gate_ablation:
      attention_ = AttentionParams<T>::make(attention_mode_, d, eye_d, d, rng_);
      head_b_.emplace(d, 3, rng_);
      head_r_.emplace(d + eye_d, 3, rng_);
      return;
    default: break;
  }
  if (kind == VariantKind::fine_to_coarse) {
    gate1_.emplace(d, eye_d, rng_, z_bias);
    gate2_.emplace(d, d, rng_, z_bias);
  } else {
    gate1_.emplace(d, d, rng_, z_bias);
    gate2_.emplace(d, eye_d, rng_, z_bias);
  }
  attention_ = AttentionParams<T>::make(attention_mode_, d, eye_d, d, rng_);
  head_b_.emplace(d, 3, rng_);
  head_r_.emplace(d, 3, rng_);
}

template <typename T>
Backbone<T>& GazeModel<T>::face_backbone() {
  if (!face_) throw ConfigError(std::string(to_string(kind())) + " has no face backbone");
  return *face_;
}

template <typename T>
Backbone<T>& GazeModel<T>::left_backbone() {
  if (!left_) throw ConfigError(std::string(to_string(kind())) + " has no eye backbones");
  return *left_;
}

template <typename T>
Backbone<T>& GazeModel<T>::right_backbone() {
  if (!right_) throw ConfigError(std::string(to_string(kind())) + " has no eye backbones");
  return *right_;
}

template <typename T>
bool GazeModel<T>::has_attention() const {
  return attention_.has_value() && attention_mode_ != AttentionMode::fixed_half;
}

template <typename T>
std::optional<AttentionMode> GazeModel<T>::attention_mode() const {
  if (!attention_) return std::nullopt;
  return attention_mode_;
}

template <typename T>
Tensor<T> GazeModel<T>::fuse_eyes(Tape<T>& tape, const Tensor<T>& query, const Tensor<T>& f_l, const Tensor<T>& f_r,
                                  Diagnostics<T>& diag) const {
  auto att = attention_fuse(tape, attention_mode_, query, f_l, f_r, *attention_);
  diag.w_l = att.w_l;
  diag.w_r = att.w_r;
  return att.fused;
}

template <typename T>
ModelOutput<T> GazeModel<T>::forward(Tape<T>& tape, const ModelInputs<T>& in, Mode mode) {
  const auto kind = config_.kind;
  std::size_t n = 0;
  if (face_) {
    if (!in.face.defined()) throw ShapeError(std::string(to_string(kind)) + " needs a face image batch");
    n = in.face.dim(0);
  }
  if (left_) {
    if (!in.left.defined() || !in.right.defined()) throw ShapeError(std::string(to_string(kind)) + " needs eye image batches");
    if (in.left.shape() != in.right.shape()) {
      throw ShapeError("left and right eye batches differ: " + shape_to_string(in.left.shape()) + " vs " +
                       shape_to_string(in.right.shape()));
    }
    if (n != 0 && in.left.dim(0) != n) throw ShapeError("face and eye batches have different sizes");
    n = in.left.dim(0);
  }

  ModelOutput<T> out;
  auto& diag = out.diagnostics;
  const std::size_t d = config_.state_dim();
  const Tensor<T> f_f = face_ ? face_->forward(tape, in.face, mode) : Tensor<T>{};
  Tensor<T> f_l, f_r;
  if (left_) {
    f_l = left_->forward(tape, in.left, mode);
    f_r = right_->forward(tape, in.right, mode);
  }

  if (single_stage(kind)) {
    Tensor<T> feature;
    if (kind == VariantKind::face_net) feature = f_f;
    else if (kind == VariantKind::eye_net) feature = ops::concat(tape, f_l, f_r, 1);
    else feature = ops::concat(tape, ops::concat(tape, f_f, f_l, 1), f_r, 1);
    out.g = head_b_->forward(tape, feature);
    out.g_b = out.g;
    out.g_r = Tensor<T>::zeros({n, 3});
    return out;
  }

  if (kind == VariantKind::gate_ablation) {
    out.g_b = head_b_->forward(tape, f_f);
    const auto f_e = fuse_eyes(tape, f_f, f_l, f_r, diag);
    out.g_r = head_r_->forward(tape, ops::concat(tape, f_f, f_e, 1));
    out.g = ops::add(tape, out.g_b, out.g_r);
    return out;
  }

  const auto h0 = initial_state<T>(n, d);
  if (kind == VariantKind::fine_to_coarse) {
    const auto f_e = fuse_eyes(tape, Tensor<T>{}, f_l, f_r, diag);
    const auto s1 = gate_step(tape, h0, f_e, *gate1_, config_.activation);
    out.g_b = head_b_->forward(tape, s1.h);
    diag.residual_prev_state = s1.h;
    const auto s2 = gate_step(tape, s1, f_f, *gate2_, config_.activation);
    out.g_r = head_r_->forward(tape, s2.h);
    diag.h1 = s1.h;
    diag.h2 = s2.h;
    out.g = ops::add(tape, out.g_b, out.g_r);
    return out;
  }

  const auto s1 = gate_step(tape, h0, f_f, *gate1_, config_.activation);
  out.g_b = head_b_->forward(tape, s1.h);
  const auto f_e = fuse_eyes(tape, s1.h, f_l, f_r, diag);
  const HeadState<T> prev = kind == VariantKind::one_gram ? initial_state<T>(n, d) : s1;
  diag.residual_prev_state = prev.h;
  const auto s2 = gate_step(tape, prev, f_e, *gate2_, config_.activation);
  out.g_r = head_r_->forward(tape, s2.h);
  diag.h1 = s1.h;
  diag.h2 = s2.h;
  out.g = ops::add(tape, out.g_b, out.g_r);
  return out;
}

template <typename T>
std::vector<ParamGroup<T>> GazeModel<T>::parameter_groups() const {
  std::vector<ParamGroup<T>> groups;
  auto group = [&](const std::string& name, auto&& fill) {
    ParamGroup<T> g{name, {}};
    fill(g.params, name);
    groups.push_back(std::move(g));
  };
  if (face_) group("face", [&](auto& v, const auto& p) { face_->collect(v, p); });
  if (left_) {
    group("left_eye", [&](auto& v, const auto& p) { left_->collect(v, p); });
    group("right_eye", [&](auto& v, const auto& p) { right_->collect(v, p); });
  }
  if (gate1_) group("gate1", [&](auto& v, const auto& p) { gate1_->collect(v, p); });
  if (gate2_) group("gate2", [&](auto& v, const auto& p) { gate2_->collect(v, p); });
  if (has_attention()) group("attention", [&](auto& v, const auto& p) { attention_->collect(v, p); });
  if (head_b_) group("head_b", [&](auto& v, const auto& p) { head_b_->collect(v, p); });
  if (head_r_) group("head_r", [&](auto& v, const auto& p) { head_r_->collect(v, p); });
  return groups;
}

template <typename T>
std::vector<ParamRef<T>> GazeModel<T>::parameters() const {
  std::vector<ParamRef<T>> all;
  for (auto& g : parameter_groups())
    for (auto& p : g.params) all.push_back(std::move(p));
  return all;
}

template <typename T>
std::vector<ParamRef<T>> GazeModel<T>::trainable_parameters() const {
  std::vector<ParamRef<T>> out;
  for (auto& p : parameters())
    if (p.trainable) out.push_back(std::move(p));
  return out;
}

template <typename T>
std::size_t GazeModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : trainable_parameters()) n += p.tensor.numel();
  return n;
}

#define CANET_INSTANTIATE_MODEL(T)                                                                            \
  template struct AttentionParams<T>;                                                                         \
  template AttentionOutput<T> attention_fuse(Tape<T>&, AttentionMode, const Tensor<T>&, const Tensor<T>&,     \
                                             const Tensor<T>&, const AttentionParams<T>&);                    \
  template struct GateParams<T>;                                                                              \
  template HeadState<T> initial_state<T>(std::size_t, std::size_t);                                           \
  template HeadState<T> gate_step(Tape<T>&, const HeadState<T>&, const Tensor<T>&, const GateParams<T>&,      \
                                  CandidateActivation);                                                       \
  template Tensor<T> canet_loss(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                const LossWeights&, T);                                                       \
  template class GazeModel<T>;

CANET_INSTANTIATE_MODEL(float)
CANET_INSTANTIATE_MODEL(double)

}  // namespace canet
