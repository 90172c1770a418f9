#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "canet/layers.hpp"
#include "canet/tensor.hpp"

namespace canet {

// ---------------------------------------------------------------------------
// Attention over the two eye features.
//
//   m_l = v^T tanh(W_1^T q + W_2^T f_l)
//   m_r = v^T tanh(W_1^T q + W_2^T f_r)
//   [w_l, w_r] = softmax([m_l, m_r]),   f_e = w_l f_l + w_r f_r
//
// The same v, W_1, W_2 score both eyes. The other modes exist for the
// weight-generation comparisons: scores from the query alone (one v per eye,
// since shared parameters would always tie), scores from the eye features
// alone, or fixed 0.5 / 0.5 weights.
// ---------------------------------------------------------------------------

enum class AttentionMode { additive, query_only, eye_only, fixed_half };

template <typename T>
struct AttentionParams {
  Tensor<T> v;        // [d_a, 1]
  Tensor<T> v_right;  // [d_a, 1], query_only only
  Tensor<T> w1;       // [query_dim, d_a], unused by eye_only
  Tensor<T> w2;       // [feature_dim, d_a], unused by query_only

  static AttentionParams make(AttentionMode mode, std::size_t query_dim, std::size_t feature_dim,
                              std::size_t attention_dim, std::mt19937_64& rng);
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) const;
};

template <typename T>
struct AttentionOutput {
  Tensor<T> m_l, m_r;  // [N, 1]; undefined for fixed_half
  Tensor<T> w_l, w_r;  // [N, 1]
  Tensor<T> fused;     // [N, D]
};

/// `query` is ignored by eye_only and fixed_half and may be undefined there.
template <typename T>
AttentionOutput<T> attention_fuse(Tape<T>& tape, AttentionMode mode, const Tensor<T>& query,
                                  const Tensor<T>& f_l, const Tensor<T>& f_r, const AttentionParams<T>& params);

// ---------------------------------------------------------------------------
// Gate step of the head component:
//
//   z = sigmoid(W_z [h, f]),  r = sigmoid(W_r [h, f])
//   h~ = ReLU(W_h [r * h, f]),  h' = (1 - z) * h + z * h~
// ---------------------------------------------------------------------------

enum class CandidateActivation { relu, tanh };

template <typename T>
struct GateParams {
  Linear<T> wz, wr, wh;  // each [2 * state_dim -> state_dim]

  GateParams(std::size_t state_dim, std::size_t feature_dim, std::mt19937_64& rng, T z_bias = T(1));
  std::size_t state_dim() const { return wz.out_features(); }
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) const;
};

template <typename T>
struct HeadState {
  Tensor<T> h;
  Tensor<T> z, r, h_tilde;  // undefined for the initial state
};

template <typename T>
HeadState<T> initial_state(std::size_t batch, std::size_t state_dim);

template <typename T>
HeadState<T> gate_step(Tape<T>& tape, const HeadState<T>& state, const Tensor<T>& feature, const GateParams<T>& params,
                       CandidateActivation activation = CandidateActivation::relu);

// ---------------------------------------------------------------------------
// Loss: mean over the batch of alpha * angle(g_b, g*) + beta * angle(g, g*).
// ---------------------------------------------------------------------------

struct LossWeights {
  double alpha = 1.0;
  double beta = 2.0;
};

template <typename T>
Tensor<T> canet_loss(Tape<T>& tape, const Tensor<T>& g_b, const Tensor<T>& g, const Tensor<T>& g_star,
                     const LossWeights& weights, T clamp_eps = T(1e-7));

// ---------------------------------------------------------------------------
// Model assembly and ablation variants.
// ---------------------------------------------------------------------------

enum class VariantKind {
  canet,
  face_net,
  eye_net,
  joint_net,
  gate_ablation,
  attention_ablation,
  one_gram,
  fine_to_coarse,
  face_attention,
  eye_attention,
};

const std::array<VariantKind, 10>& all_variants();
std::string_view to_string(VariantKind kind);
/// Throws ConfigError for an unknown name.
VariantKind parse_variant(std::string_view name);

struct ModelConfig {
  VariantKind kind = VariantKind::canet;
  double width_scale = 1.0;
  std::size_t face_height = 224;
  std::size_t face_width = 224;
  std::size_t eye_height = 36;
  std::size_t eye_width = 60;
  CandidateActivation activation = CandidateActivation::relu;
  double z_bias = 1.0;

  BackboneSpec face_spec() const { return BackboneSpec::face(width_scale, face_height, face_width); }
  BackboneSpec eye_spec() const { return BackboneSpec::eye(width_scale, eye_height, eye_width); }
  std::size_t state_dim() const { return face_spec().feature_dim(); }
};

template <typename T>
struct ModelInputs {
  Tensor<T> face;   // [N, 3, H, W]
  Tensor<T> left;   // [N, 1, h, w]
  Tensor<T> right;  // [N, 1, h, w]
};

template <typename T>
struct Diagnostics {
  Tensor<T> w_l, w_r;             // [N, 1] when the variant fuses eyes by weights
  Tensor<T> h1, h2;               // gate states when the variant has a gate chain
  Tensor<T> residual_prev_state;  // previous state handed to the residual gate
};

template <typename T>
struct ModelOutput {
  Tensor<T> g_b, g_r, g;  // [N, 3]
  Diagnostics<T> diagnostics;
};

/// One trainable component, e.g. "face" or "gate2", and its tensors.
template <typename T>
struct ParamGroup {
  std::string name;
  std::vector<ParamRef<T>> params;
};

template <typename T>
class GazeModel {
 public:
  GazeModel(const ModelConfig& config, std::uint64_t seed);

  ModelOutput<T> forward(Tape<T>& tape, const ModelInputs<T>& inputs, Mode mode);

  const ModelConfig& config() const { return config_; }
  VariantKind kind() const { return config_.kind; }

  /// Every tensor with a stable dotted name, buffers included.
  std::vector<ParamRef<T>> parameters() const;
  std::vector<ParamRef<T>> trainable_parameters() const;
  std::vector<ParamGroup<T>> parameter_groups() const;
  std::size_t parameter_count() const;

  bool has_attention() const;
  bool has_gates() const { return gate1_.has_value() || gate2_.has_value(); }
  std::optional<AttentionMode> attention_mode() const;

  bool uses_face() const { return face_.has_value(); }
  bool uses_eyes() const { return left_.has_value(); }
  Backbone<T>& face_backbone();
  Backbone<T>& left_backbone();
  Backbone<T>& right_backbone();
  std::optional<Linear<T>>& basic_head() { return head_b_; }
  std::optional<Linear<T>>& residual_head() { return head_r_; }
  std::optional<GateParams<T>>& gate(int index) { return index == 1 ? gate1_ : gate2_; }
  std::optional<AttentionParams<T>>& attention() { return attention_; }

 private:
  Tensor<T> fuse_eyes(Tape<T>& tape, const Tensor<T>& query, const Tensor<T>& f_l, const Tensor<T>& f_r,
                      Diagnostics<T>& diag) const;

  ModelConfig config_;
  std::mt19937_64 rng_;
  std::optional<Backbone<T>> face_, left_, right_;
  std::optional<GateParams<T>> gate1_, gate2_;
  std::optional<AttentionParams<T>> attention_;
  std::optional<Linear<T>> head_b_, head_r_;
  AttentionMode attention_mode_ = AttentionMode::additive;
};

}  // namespace canet
