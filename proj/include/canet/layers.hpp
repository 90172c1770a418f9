#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "canet/tensor.hpp"

namespace canet {

enum class Mode { train, eval };

/// A named tensor owned by a layer. Non-trainable entries are buffers such as
/// batch-norm running statistics; they are saved with the weights but never
/// touched by an optimizer.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

namespace ops {

/// 3x3 convolution with one pixel of zero padding, NCHW layout.
/// weight [out, in, 3, 3], bias [out].
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride);

/// Per-channel batch normalization over N (and H, W for rank-4 input). In train
/// mode the running statistics are updated in place.
template <typename T>
Tensor<T> batchnorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, T eps, T momentum);

/// 2x2 max pooling with stride 2. Odd extents are padded with -inf on the
/// right/bottom, so the output is ceil(H/2) x ceil(W/2). Ties go to the first
/// element of the window in row-major order.
template <typename T>
Tensor<T> maxpool2x2(Tape<T>& tape, const Tensor<T>& x);

/// [N, C, H, W] -> [N, C]
template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x);

}  // namespace ops

namespace fault {

// Test hook for the gradient-check suite: while alive, conv2d backward
// returns negated input and weight gradients.
class ScopedConvBackwardSignFlip {
 public:
  ScopedConvBackwardSignFlip();
  ~ScopedConvBackwardSignFlip();
  ScopedConvBackwardSignFlip(const ScopedConvBackwardSignFlip&) = delete;
  ScopedConvBackwardSignFlip& operator=(const ScopedConvBackwardSignFlip&) = delete;
};

}  // namespace fault

/// Zero-mean normal draws with variance 2 / fan_in (MSRA / He).
template <typename T>
std::vector<T> msra_normal(std::size_t count, std::size_t fan_in, std::mt19937_64& rng);

template <typename T>
class Conv2d {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t stride, std::mt19937_64& rng);

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const;
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) const;

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  std::size_t stride() const { return stride_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  std::size_t in_, out_, stride_;
  Tensor<T> weight_, bias_;
};

template <typename T>
class BatchNorm2d {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  explicit BatchNorm2d(std::size_t channels);

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, Mode mode);
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) const;

  std::size_t channels() const { return channels_; }
  const Tensor<T>& gamma() const { return gamma_; }
  const Tensor<T>& beta() const { return beta_; }
  const Tensor<T>& running_mean() const { return running_mean_; }
  const Tensor<T>& running_var() const { return running_var_; }

 private:
  std::size_t channels_;
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
};

/// y = x W + b with W [in, out] and b [1, out].
template <typename T>
class Linear {
 public:
  Linear(std::size_t in_features, std::size_t out_features, std::mt19937_64& rng);

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const;
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) const;

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  std::size_t in_, out_;
  Tensor<T> weight_, bias_;
};

/// Channel plan of a conv backbone: blocks of conv(3x3) -> ReLU -> BatchNorm,
/// 2x2 max pools after selected blocks, then GAP and a fully connected layer.
struct BackboneSpec {
  std::string name;
  std::vector<std::size_t> channels;    // per block, at width_scale 1
  std::vector<std::size_t> pool_after;  // 1-based block indices
  std::vector<std::size_t> strides;     // per block
  double width_scale = 1.0;
  std::size_t in_channels = 3;
  std::size_t in_height = 224;
  std::size_t in_width = 224;
  std::size_t feature_dim_base = 256;

  static BackboneSpec face(double width_scale = 1.0, std::size_t height = 224, std::size_t width = 224);
  static BackboneSpec eye(double width_scale = 1.0, std::size_t height = 36, std::size_t width = 60);

  std::vector<std::size_t> scaled_channels() const;  // ceil(c * width_scale)
  std::size_t feature_dim() const;                   // round(256 * width_scale)
  bool pools_after(std::size_t block) const;         // 1-based
  /// (H, W) after each block, including its pool.
  std::vector<std::pair<std::size_t, std::size_t>> spatial_schedule() const;
  void validate() const;
};

template <typename T>
class Backbone {
 public:
  struct Block {
    Conv2d<T> conv;
    BatchNorm2d<T> bn;
    bool pool_after;
  };

  Backbone(BackboneSpec spec, std::uint64_t seed);

  /// x is [N, in_channels, in_height, in_width]; returns [N, feature_dim].
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, Mode mode);
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) const;

  const BackboneSpec& spec() const { return spec_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  const Linear<T>& fc() const { return fc_; }

 private:
  BackboneSpec spec_;
  std::mt19937_64 rng_;
  std::vector<Block> blocks_;
  Linear<T> fc_;
};

template <typename T>
Backbone<T> build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  return Backbone<T>(spec, seed);
}

}  // namespace canet
