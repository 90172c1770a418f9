#include "canet/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "canet/error.hpp"
#include "canet/ops.hpp"

namespace canet {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using Map = Eigen::Map<RowMatrix<T>>;

int conv_backward_sign = 1;

std::string dims(std::initializer_list<std::size_t> d) { return shape_to_string(Shape(d)); }

}  // namespace

namespace fault {
ScopedConvBackwardSignFlip::ScopedConvBackwardSignFlip() { conv_backward_sign = -1; }
ScopedConvBackwardSignFlip::~ScopedConvBackwardSignFlip() { conv_backward_sign = 1; }
}  // namespace fault

namespace ops {

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride) {
  if (x.rank() != 4) throw ShapeError("conv2d: expected NCHW input, got " + shape_to_string(x.shape()));
  if (weight.rank() != 4 || weight.dim(2) != 3 || weight.dim(3) != 3) {
    throw ShapeError("conv2d: expected [out, in, 3, 3] weight, got " + shape_to_string(weight.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = weight.dim(0);
  if (weight.dim(1) != c) {
    throw ShapeError("conv2d: input has " + std::to_string(c) + " channels but weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.numel() != o) throw ShapeError("conv2d: bias has " + std::to_string(bias.numel()) + " entries, need " + std::to_string(o));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t ho = (h + 2 - 3) / stride + 1;
  const std::size_t wo = (w + 2 - 3) / stride + 1;
  const std::size_t p = ho * wo;
  const std::size_t k = c * 9;
  const std::size_t cols = n * p;

  // im2col: row (ci, ky, kx), column (n, oy, ox).
  std::vector<T> col(k * cols, T(0));
  const T* xd = x.data().data();
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        T* row = col.data() + ((ci * 3 + ky) * 3 + kx) * cols;
        for (std::size_t b = 0; b < n; ++b) {
          const T* plane = xd + (b * c + ci) * h * w;
          T* dst = row + b * p;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - 1;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - 1;
              if (ix >= 0 && ix < static_cast<long>(w)) dst[oy * wo + ox] = plane[iy * w + ix];
            }
          }
        }
      }
    }
  }

  RowMatrix<T> out_mat = ConstMap<T>(weight.data().data(), o, k) * ConstMap<T>(col.data(), k, cols);
  std::vector<T> out(n * o * p);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oc = 0; oc < o; ++oc) {
      const T bv = bias.data()[oc];
      const T* src = out_mat.data() + oc * cols + b * p;
      T* dst = out.data() + (b * o + oc) * p;
      for (std::size_t i = 0; i < p; ++i) dst[i] = src[i] + bv;
    }
  }

  const bool keep_col = tape.recording() && (weight.requires_grad() || x.requires_grad());
  if (!keep_col) col.clear();
  return tape.record(
      "conv2d", {n, o, ho, wo}, std::move(out), {x, weight, bias},
      [x, weight, bias, col = std::move(col), n, c, h, w, o, ho, wo, p, k, cols, stride](
          std::span<const T> g) mutable {
        const T sign = static_cast<T>(conv_backward_sign);
        RowMatrix<T> g_mat(o, cols);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t oc = 0; oc < o; ++oc)
            std::copy_n(g.data() + (b * o + oc) * p, p, g_mat.data() + oc * cols + b * p);
        if (bias.requires_grad()) {
          auto gb = bias.grad_accumulator();
          for (std::size_t oc = 0; oc < o; ++oc) gb[oc] += g_mat.row(oc).sum();
        }
        if (weight.requires_grad()) {
          Map<T>(weight.grad_accumulator().data(), o, k).noalias() +=
              sign * (g_mat * ConstMap<T>(col.data(), k, cols).transpose());
        }
        if (x.requires_grad()) {
          RowMatrix<T> dcol = ConstMap<T>(weight.data().data(), o, k).transpose() * g_mat;
          auto gx = x.grad_accumulator();
          for (std::size_t ci = 0; ci < c; ++ci) {
            for (std::size_t ky = 0; ky < 3; ++ky) {
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const T* row = dcol.data() + ((ci * 3 + ky) * 3 + kx) * cols;
                for (std::size_t b = 0; b < n; ++b) {
                  T* plane = gx.data() + (b * c + ci) * h * w;
                  const T* src = row + b * p;
                  for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - 1;
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                      const long ix = static_cast<long>(ox * stride + kx) - 1;
                      if (ix >= 0 && ix < static_cast<long>(w)) plane[iy * w + ix] += sign * src[oy * wo + ox];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> batchnorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, T eps, T momentum) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("batchnorm: expected [N, C] or [N, C, H, W], got " + shape_to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c) {
    throw ShapeError("batchnorm: parameters do not match " + std::to_string(c) + " channels");
  }
  if (mode == Mode::train && n < 2) throw ShapeError("batchnorm: train mode needs a batch of at least 2, got 1");
  const std::size_t m = n * spatial;

  std::vector<T> mean(c), inv_std(c);
  const T* xd = x.data().data();
  if (mode == Mode::train) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      T s = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = xd + (b * c + ch) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) s += src[i];
      }
      const T mu = s / static_cast<T>(m);
      T sq = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = xd + (b * c + ch) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) sq += (src[i] - mu) * (src[i] - mu);
      }
      const T var = sq / static_cast<T>(m);
      mean[ch] = mu;
      inv_std[ch] = T(1) / std::sqrt(var + eps);
      rm[ch] = (T(1) - momentum) * rm[ch] + momentum * mu;
      rv[ch] = (T(1) - momentum) * rv[ch] + momentum * (sq / static_cast<T>(m - 1));
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean.data()[ch];
      inv_std[ch] = T(1) / std::sqrt(running_var.data()[ch] + eps);
    }
  }

  std::vector<T> xhat(x.numel()), out(x.numel());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * spatial;
      const T gm = gamma.data()[ch], bt = beta.data()[ch];
      for (std::size_t i = 0; i < spatial; ++i) {
        xhat[base + i] = (xd[base + i] - mean[ch]) * inv_std[ch];
        out[base + i] = gm * xhat[base + i] + bt;
      }
    }
  }

  return tape.record(
      "batchnorm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, spatial, m,
       train = mode == Mode::train](std::span<const T> g) mutable {
        std::vector<T> sum_g(c, T(0)), sum_gx(c, T(0));
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
              sum_g[ch] += g[base + i];
              sum_gx[ch] += g[base + i] * xhat[base + i];
            }
          }
        }
        if (gamma.requires_grad()) {
          auto gg = gamma.grad_accumulator();
          for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
        }
        if (beta.requires_grad()) {
          auto gb = beta.grad_accumulator();
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
        }
        if (!x.requires_grad()) return;
        auto gx = x.grad_accumulator();
        const T inv_m = T(1) / static_cast<T>(m);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * spatial;
            const T scale = gamma.data()[ch] * inv_std[ch];
            for (std::size_t i = 0; i < spatial; ++i) {
              if (train) {
                gx[base + i] += scale * (g[base + i] - sum_g[ch] * inv_m - xhat[base + i] * sum_gx[ch] * inv_m);
              } else {
                gx[base + i] += scale * g[base + i];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> maxpool2x2(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("maxpool2x2: expected NCHW input, got " + shape_to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = (h + 1) / 2, wo = (w + 1) / 2;
  std::vector<T> out(n * c * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  const T* xd = x.data().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t in_base = plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = in_base + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          const std::size_t iy = 2 * oy + dy;
          if (iy >= h) continue;
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t ix = 2 * ox + dx;
            if (ix >= w) continue;
            const std::size_t idx = in_base + iy * w + ix;
            if (xd[idx] > best) {
              best = xd[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (plane * ho + oy) * wo + ox;
        out[o] = best;
        argmax[o] = best_idx;
      }
    }
  }
  return tape.record("maxpool2x2", {n, c, ho, wo}, std::move(out), {x},
                     [x, argmax = std::move(argmax)](std::span<const T> g) mutable {
                       auto gx = x.grad_accumulator();
                       for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                     });
}

template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expected NCHW input, got " + shape_to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), spatial = x.dim(2) * x.dim(3);
  const T inv = T(1) / static_cast<T>(spatial);
  std::vector<T> out(n * c);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    T s = 0;
    const T* src = x.data().data() + plane * spatial;
    for (std::size_t i = 0; i < spatial; ++i) s += src[i];
    out[plane] = s * inv;
  }
  return tape.record("global_avg_pool", {n, c}, std::move(out), {x},
                     [x, spatial, inv](std::span<const T> g) mutable {
                       auto gx = x.grad_accumulator();
                       for (std::size_t plane = 0; plane < g.size(); ++plane)
                         for (std::size_t i = 0; i < spatial; ++i) gx[plane * spatial + i] += g[plane] * inv;
                     });
}

}  // namespace ops

template <typename T>
std::vector<T> msra_normal(std::size_t count, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> v(count);
  for (auto& e : v) e = static_cast<T>(dist(rng));
  return v;
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t stride, std::mt19937_64& rng)
    : in_(in_channels), out_(out_channels), stride_(stride) {
  if (in_ == 0 || out_ == 0 || stride_ == 0) {
    throw ShapeError("conv2d layer needs positive channels and stride, got in=" + std::to_string(in_) +
                     " out=" + std::to_string(out_) + " stride=" + std::to_string(stride_));
  }
  weight_ = Tensor<T>({out_, in_, 3, 3}, msra_normal<T>(out_ * in_ * 9, in_ * 9, rng));
  weight_.set_requires_grad(true);
  bias_ = Tensor<T>::zeros({out_});
  bias_.set_requires_grad(true);
}

template <typename T>
Tensor<T> Conv2d<T>::forward(Tape<T>& tape, const Tensor<T>& x) const {
  return ops::conv2d(tape, x, weight_, bias_, stride_);
}

template <typename T>
void Conv2d<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight_, true});
  out.push_back({prefix + ".bias", bias_, true});
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels)
    : channels_(channels),
      gamma_(Tensor<T>::full({channels}, T(1))),
      beta_(Tensor<T>::zeros({channels})),
      running_mean_(Tensor<T>::zeros({channels})),
      running_var_(Tensor<T>::full({channels}, T(1))) {
  gamma_.set_requires_grad(true);
  beta_.set_requires_grad(true);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(Tape<T>& tape, const Tensor<T>& x, Mode mode) {
  return ops::batchnorm(tape, x, gamma_, beta_, running_mean_, running_var_, mode, static_cast<T>(kEps),
                        static_cast<T>(kMomentum));
}

template <typename T>
void BatchNorm2d<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma_, true});
  out.push_back({prefix + ".beta", beta_, true});
  out.push_back({prefix + ".running_mean", running_mean_, false});
  out.push_back({prefix + ".running_var", running_var_, false});
}

template <typename T>
Linear<T>::Linear(std::size_t in_features, std::size_t out_features, std::mt19937_64& rng)
    : in_(in_features), out_(out_features) {
  if (in_ == 0 || out_ == 0) throw ShapeError("linear layer needs positive dimensions");
  weight_ = Tensor<T>({in_, out_}, msra_normal<T>(in_ * out_, in_, rng));
  weight_.set_requires_grad(true);
  bias_ = Tensor<T>::zeros({1, out_});
  bias_.set_requires_grad(true);
}

template <typename T>
Tensor<T> Linear<T>::forward(Tape<T>& tape, const Tensor<T>& x) const {
  if (x.rank() != 2 || x.dim(1) != in_) {
    throw ShapeError("linear: expected [N, " + std::to_string(in_) + "] input, got " + shape_to_string(x.shape()));
  }
  return ops::add(tape, ops::matmul(tape, x, weight_), ops::expand_rows(tape, bias_, x.dim(0)));
}

template <typename T>
void Linear<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight_, true});
  out.push_back({prefix + ".bias", bias_, true});
}

BackboneSpec BackboneSpec::face(double width_scale, std::size_t height, std::size_t width) {
  BackboneSpec s;
  s.name = "face";
  s.channels = {64, 64, 128, 128, 256, 256, 256, 256, 256, 256, 512, 512, 1024};
  s.pool_after = {2, 4, 7, 10};
  s.strides.assign(s.channels.size(), 1);
  s.width_scale = width_scale;
  s.in_channels = 3;
  s.in_height = height;
  s.in_width = width;
  return s;
}

BackboneSpec BackboneSpec::eye(double width_scale, std::size_t height, std::size_t width) {
  BackboneSpec s;
  s.name = "eye";
  s.channels = {64, 64, 128, 128, 128, 256, 256, 256, 512, 1024};
  s.pool_after = {2, 5, 8};
  s.strides.assign(s.channels.size(), 1);
  s.width_scale = width_scale;
  s.in_channels = 1;
  s.in_height = height;
  s.in_width = width;
  return s;
}

std::vector<std::size_t> BackboneSpec::scaled_channels() const {
  std::vector<std::size_t> out;
  out.reserve(channels.size());
  for (auto c : channels) {
    out.push_back(static_cast<std::size_t>(std::ceil(static_cast<double>(c) * width_scale - 1e-9)));
  }
  return out;
}

std::size_t BackboneSpec::feature_dim() const {
  return static_cast<std::size_t>(std::lround(static_cast<double>(feature_dim_base) * width_scale));
}

bool BackboneSpec::pools_after(std::size_t block) const {
  return std::find(pool_after.begin(), pool_after.end(), block) != pool_after.end();
}

std::vector<std::pair<std::size_t, std::size_t>> BackboneSpec::spatial_schedule() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t h = in_height, w = in_width;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const std::size_t s = i < strides.size() ? strides[i] : 1;
    h = (h + 2 - 3) / s + 1;
    w = (w + 2 - 3) / s + 1;
    if (pools_after(i + 1)) {
      h = (h + 1) / 2;
      w = (w + 1) / 2;
    }
    out.emplace_back(h, w);
  }
  return out;
}

void BackboneSpec::validate() const {
  if (channels.empty()) throw ShapeError("backbone '" + name + "' has no blocks");
  if (strides.size() != channels.size()) throw ShapeError("backbone '" + name + "' stride list length differs from block count");
  if (!(width_scale > 0.0)) throw ShapeError("backbone '" + name + "' width_scale must be positive");
  for (auto c : scaled_channels()) {
    if (c < 1) throw ShapeError("backbone '" + name + "' width_scale leaves a block without channels");
  }
  if (feature_dim() < 1) throw ShapeError("backbone '" + name + "' width_scale leaves no feature dimensions");
  for (auto s : strides) {
    if (s == 0) throw ShapeError("backbone '" + name + "' has a zero stride");
  }
  for (auto p : pool_after) {
    if (p < 1 || p > channels.size()) throw ShapeError("backbone '" + name + "' pools after nonexistent block " + std::to_string(p));
  }
  if (in_channels == 0 || in_height < 3 || in_width < 3) {
    throw ShapeError("backbone '" + name + "' input must be at least 3x3 with a channel, got " +
                     dims({in_channels, in_height, in_width}));
  }
}

namespace {

template <typename T>
std::vector<typename Backbone<T>::Block> make_blocks(const BackboneSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  std::vector<typename Backbone<T>::Block> blocks;
  const auto ch = spec.scaled_channels();
  std::size_t in = spec.in_channels;
  for (std::size_t i = 0; i < ch.size(); ++i) {
    blocks.push_back({Conv2d<T>(in, ch[i], spec.strides[i], rng), BatchNorm2d<T>(ch[i]), spec.pools_after(i + 1)});
    in = ch[i];
  }
  return blocks;
}

}  // namespace

template <typename T>
Backbone<T>::Backbone(BackboneSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)),
      rng_(seed),
      blocks_(make_blocks<T>(spec_, rng_)),
      fc_(blocks_.back().conv.out_channels(), spec_.feature_dim(), rng_) {}

template <typename T>
Tensor<T> Backbone<T>::forward(Tape<T>& tape, const Tensor<T>& x, Mode mode) {
  if (x.rank() != 4 || x.dim(1) != spec_.in_channels || x.dim(2) != spec_.in_height || x.dim(3) != spec_.in_width) {
    throw ShapeError("backbone '" + spec_.name + "' expects [N, " + std::to_string(spec_.in_channels) + ", " +
                     std::to_string(spec_.in_height) + ", " + std::to_string(spec_.in_width) + "] input, got " +
                     shape_to_string(x.shape()));
  }
  Tensor<T> y = x;
  for (auto& block : blocks_) {
    y = block.conv.forward(tape, y);
    y = ops::relu(tape, y);
    y = block.bn.forward(tape, y, mode);
    if (block.pool_after) y = ops::maxpool2x2(tape, y);
  }
  return fc_.forward(tape, ops::global_avg_pool(tape, y));
}

template <typename T>
void Backbone<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = prefix + ".block" + std::to_string(i + 1);
    blocks_[i].conv.collect(out, p + ".conv");
    blocks_[i].bn.collect(out, p + ".bn");
  }
  fc_.collect(out, prefix + ".fc");
}

#define CANET_INSTANTIATE_LAYERS(T)                                                                          \
  template Tensor<T> ops::conv2d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t); \
  template Tensor<T> ops::batchnorm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                    Tensor<T>&, Tensor<T>&, Mode, T, T);                                      \
  template Tensor<T> ops::maxpool2x2(Tape<T>&, const Tensor<T>&);                                            \
  template Tensor<T> ops::global_avg_pool(Tape<T>&, const Tensor<T>&);                                       \
  template std::vector<T> msra_normal<T>(std::size_t, std::size_t, std::mt19937_64&);                        \
  template class Conv2d<T>;                                                                                   \
  template class BatchNorm2d<T>;                                                                              \
  template class Linear<T>;                                                                                   \
  template class Backbone<T>;

CANET_INSTANTIATE_LAYERS(float)
CANET_INSTANTIATE_LAYERS(double)

}  // namespace canet
