#include "canet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "canet/error.hpp"

namespace canet::ops {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using Map = Eigen::Map<RowMatrix<T>>;

const char* kind_name(ElementwiseKind kind) {
  switch (kind) {
    case ElementwiseKind::add: return "add";
    case ElementwiseKind::sub: return "sub";
    case ElementwiseKind::mul: return "mul";
    case ElementwiseKind::relu: return "relu";
    case ElementwiseKind::tanh: return "tanh";
    case ElementwiseKind::sigmoid: return "sigmoid";
  }
  return "?";
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined operand");
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

template <typename T>
void require_matrix(const Tensor<T>& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_to_string(a.shape()));
}

// Outer/axis/inner decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

template <typename T>
Tensor<T> elementwise(Tape<T>& tape, ElementwiseKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  const char* name = kind_name(kind);
  require_defined(a, name);
  const bool binary = kind == ElementwiseKind::add || kind == ElementwiseKind::sub || kind == ElementwiseKind::mul;
  if (binary) {
    require_defined(b, name);
    require_same_shape(a, b, name);
  }
  const auto x = a.data();
  const std::size_t n = x.size();
  std::vector<T> out(n);
  switch (kind) {
    case ElementwiseKind::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + b.data()[i];
      break;
    case ElementwiseKind::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - b.data()[i];
      break;
    case ElementwiseKind::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * b.data()[i];
      break;
    case ElementwiseKind::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case ElementwiseKind::tanh:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(x[i]);
      break;
    case ElementwiseKind::sigmoid:
      for (std::size_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
      break;
  }

  if (binary) {
    std::vector<T> saved_a, saved_b;
    if (kind == ElementwiseKind::mul) {
      saved_a.assign(a.data().begin(), a.data().end());
      saved_b.assign(b.data().begin(), b.data().end());
    }
    return tape.record(name, a.shape(), std::move(out), {a, b},
                       [kind, a, b, saved_a = std::move(saved_a), saved_b = std::move(saved_b)](
                           std::span<const T> g) mutable {
                         const std::size_t n = g.size();
                         if (a.requires_grad()) {
                           auto ga = a.grad_accumulator();
                           for (std::size_t i = 0; i < n; ++i)
                             ga[i] += kind == ElementwiseKind::mul ? g[i] * saved_b[i] : g[i];
                         }
                         if (b.requires_grad()) {
                           auto gb = b.grad_accumulator();
                           for (std::size_t i = 0; i < n; ++i) {
                             if (kind == ElementwiseKind::add) gb[i] += g[i];
                             else if (kind == ElementwiseKind::sub) gb[i] -= g[i];
                             else gb[i] += g[i] * saved_a[i];
                           }
                         }
                       });
  }

  // Unary rules are expressed through the input (relu) or the output (tanh, sigmoid).
  std::vector<T> saved = kind == ElementwiseKind::relu ? std::vector<T>(x.begin(), x.end()) : out;
  return tape.record(name, a.shape(), std::move(out), {a},
                     [kind, a, saved = std::move(saved)](std::span<const T> g) mutable {
                       auto ga = a.grad_accumulator();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         switch (kind) {
                           case ElementwiseKind::relu: ga[i] += saved[i] > T(0) ? g[i] : T(0); break;
                           case ElementwiseKind::tanh: ga[i] += g[i] * (T(1) - saved[i] * saved[i]); break;
                           case ElementwiseKind::sigmoid: ga[i] += g[i] * saved[i] * (T(1) - saved[i]); break;
                           default: break;
                         }
                       }
                     });
}

template <typename T>
Tensor<T> affine_scalar(Tape<T>& tape, const Tensor<T>& a, T scale, T shift) {
  require_defined(a, "affine_scalar");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * a.data()[i] + shift;
  return tape.record("affine_scalar", a.shape(), std::move(out), {a}, [a, scale](std::span<const T> g) mutable {
    auto ga = a.grad_accumulator();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += scale * g[i];
  });
}

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  std::vector<T> out(m * n);
  Map<T>(out.data(), m, n).noalias() = ConstMap<T>(a.data().data(), m, k) * ConstMap<T>(b.data().data(), k, n);
  return tape.record("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const T> g) mutable {
    ConstMap<T> dc(g.data(), m, n);
    if (a.requires_grad()) {
      Map<T>(a.grad_accumulator().data(), m, k).noalias() += dc * ConstMap<T>(b.data().data(), k, n).transpose();
    }
    if (b.requires_grad()) {
      Map<T>(b.grad_accumulator().data(), k, n).noalias() += ConstMap<T>(a.data().data(), m, k).transpose() * dc;
    }
  });
}

template <typename T>
Tensor<T> concat(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  require_defined(a, "concat");
  require_defined(b, "concat");
  if (a.rank() != b.rank() || axis >= a.rank()) {
    throw ShapeError("concat: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()) + " on axis " + std::to_string(axis));
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      throw ShapeError("concat: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                       shape_to_string(b.shape()) + " on axis " + std::to_string(axis));
    }
  }
  const auto sa = split_at(a.shape(), axis);
  const auto sb = split_at(b.shape(), axis);
  const std::size_t chunk_a = sa.extent * sa.inner, chunk_b = sb.extent * sb.inner;
  Shape shape = a.shape();
  shape[axis] += b.dim(axis);
  std::vector<T> out;
  out.reserve(a.numel() + b.numel());
  for (std::size_t o = 0; o < sa.outer; ++o) {
    out.insert(out.end(), a.data().begin() + o * chunk_a, a.data().begin() + (o + 1) * chunk_a);
    out.insert(out.end(), b.data().begin() + o * chunk_b, b.data().begin() + (o + 1) * chunk_b);
  }
  return tape.record("concat", std::move(shape), std::move(out), {a, b},
                     [a, b, outer = sa.outer, chunk_a, chunk_b](std::span<const T> g) mutable {
                       const std::size_t stride = chunk_a + chunk_b;
                       if (a.requires_grad()) {
                         auto ga = a.grad_accumulator();
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t i = 0; i < chunk_a; ++i) ga[o * chunk_a + i] += g[o * stride + i];
                       }
                       if (b.requires_grad()) {
                         auto gb = b.grad_accumulator();
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t i = 0; i < chunk_b; ++i)
                             gb[o * chunk_b + i] += g[o * stride + chunk_a + i];
                       }
                     });
}

template <typename T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  require_defined(a, "slice");
  if (axis >= a.rank() || length == 0 || start + length > a.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") on axis " + std::to_string(axis) + " out of bounds for " + shape_to_string(a.shape()));
  }
  const auto s = split_at(a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<T> out;
  out.reserve(s.outer * length * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    auto first = a.data().begin() + (o * s.extent + start) * s.inner;
    out.insert(out.end(), first, first + length * s.inner);
  }
  return tape.record("slice", std::move(shape), std::move(out), {a},
                     [a, s, start, length](std::span<const T> g) mutable {
                       auto ga = a.grad_accumulator();
                       const std::size_t chunk = length * s.inner;
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t i = 0; i < chunk; ++i)
                           ga[(o * s.extent + start) * s.inner + i] += g[o * chunk + i];
                     });
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return tape.record("reshape", std::move(shape), std::move(out), {a}, [a](std::span<const T> g) mutable {
    auto ga = a.grad_accumulator();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Tensor<T> expand_rows(Tape<T>& tape, const Tensor<T>& a, std::size_t rows) {
  require_defined(a, "expand_rows");
  if (a.rank() != 2 || a.dim(0) != 1 || rows == 0) {
    throw ShapeError("expand_rows: expected [1 x n], got " + shape_to_string(a.shape()));
  }
  const std::size_t n = a.dim(1);
  std::vector<T> out(rows * n);
  for (std::size_t r = 0; r < rows; ++r) std::copy(a.data().begin(), a.data().end(), out.begin() + r * n);
  return tape.record("expand_rows", {rows, n}, std::move(out), {a}, [a, rows, n](std::span<const T> g) mutable {
    auto ga = a.grad_accumulator();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) ga[j] += g[r * n + j];
  });
}

template <typename T>
Tensor<T> expand_cols(Tape<T>& tape, const Tensor<T>& a, std::size_t cols) {
  require_defined(a, "expand_cols");
  if (a.rank() != 2 || a.dim(1) != 1 || cols == 0) {
    throw ShapeError("expand_cols: expected [m x 1], got " + shape_to_string(a.shape()));
  }
  const std::size_t m = a.dim(0);
  std::vector<T> out(m * cols);
  for (std::size_t r = 0; r < m; ++r) std::fill_n(out.begin() + r * cols, cols, a.data()[r]);
  return tape.record("expand_cols", {m, cols}, std::move(out), {a}, [a, m, cols](std::span<const T> g) mutable {
    auto ga = a.grad_accumulator();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < cols; ++j) ga[r] += g[r * cols + j];
  });
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x) {
  require_defined(x, "softmax");
  if (x.rank() > 2) throw ShapeError("softmax: expected a vector or matrix, got " + shape_to_string(x.shape()));
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * cols;
    T* y = out.data() + r * cols;
    T peak = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j) {
      if (std::isnan(in[j])) throw NumericError("softmax: NaN input");
      peak = std::max(peak, in[j]);
    }
    T total = 0;
    for (std::size_t j = 0; j < cols; ++j) total += (y[j] = std::exp(in[j] - peak));
    for (std::size_t j = 0; j < cols; ++j) y[j] /= total;
  }
  std::vector<T> saved = out;
  return tape.record("softmax", x.shape(), std::move(out), {x},
                     [x, rows, cols, saved = std::move(saved)](std::span<const T> g) mutable {
                       auto gx = x.grad_accumulator();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const T* y = saved.data() + r * cols;
                         const T* gy = g.data() + r * cols;
                         T dot = 0;
                         for (std::size_t j = 0; j < cols; ++j) dot += gy[j] * y[j];
                         for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += y[j] * (gy[j] - dot);
                       }
                     });
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  require_defined(a, "sum");
  T total = 0;
  for (auto v : a.data()) total += v;
  return tape.record("sum", {1}, {total}, {a}, [a](std::span<const T> g) mutable {
    for (auto& v : a.grad_accumulator()) v += g[0];
  });
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
  require_defined(a, "mean");
  T total = 0;
  for (auto v : a.data()) total += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  return tape.record("mean", {1}, {total * inv}, {a}, [a, inv](std::span<const T> g) mutable {
    for (auto& v : a.grad_accumulator()) v += g[0] * inv;
  });
}

template <typename T>
Tensor<T> angular_distance_rows(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, T clamp_eps) {
  require_defined(a, "angular_distance");
  require_defined(b, "angular_distance");
  require_same_shape(a, b, "angular_distance");
  if (a.rank() != 2 || a.dim(1) != 3) {
    throw ShapeError("angular_distance: expected [N x 3], got " + shape_to_string(a.shape()));
  }
  const std::size_t n = a.dim(0);
  std::vector<T> out(n), cosines(n), norm_a(n), norm_b(n);
  std::vector<unsigned char> clamped(n, 0);
  const T lo = T(-1) + clamp_eps, hi = T(1) - clamp_eps;
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = a.data().data() + 3 * r;
    const T* y = b.data().data() + 3 * r;
    const T na = std::sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
    const T nb = std::sqrt(y[0] * y[0] + y[1] * y[1] + y[2] * y[2]);
    if (!(na > T(0)) || !(nb > T(0))) {
      throw NumericError("angular_distance: zero-norm vector in row " + std::to_string(r));
    }
    T c = (x[0] * y[0] + x[1] * y[1] + x[2] * y[2]) / (na * nb);
    if (clamp_eps > T(0) && (c < lo || c > hi)) {
      c = std::clamp(c, lo, hi);
      clamped[r] = 1;
    } else if (c <= T(-1) || c >= T(1)) {
      // Rounding can push the ratio past +-1; the derivative is unbounded there.
      c = std::clamp(c, T(-1), T(1));
      clamped[r] = 1;
    }
    cosines[r] = c;
    norm_a[r] = na;
    norm_b[r] = nb;
    out[r] = std::acos(c);
  }
  return tape.record(
      "angular_distance", {n}, std::move(out), {a, b},
      [a, b, cosines = std::move(cosines), norm_a = std::move(norm_a), norm_b = std::move(norm_b),
       clamped = std::move(clamped)](std::span<const T> g) mutable {
        for (std::size_t r = 0; r < g.size(); ++r) {
          if (clamped[r]) continue;
          const T c = cosines[r];
          const T dl_dc = -g[r] / std::sqrt(T(1) - c * c);
          const T* x = a.data().data() + 3 * r;
          const T* y = b.data().data() + 3 * r;
          const T inv_ab = T(1) / (norm_a[r] * norm_b[r]);
          if (a.requires_grad()) {
            auto ga = a.grad_accumulator();
            const T inv_aa = c / (norm_a[r] * norm_a[r]);
            for (int k = 0; k < 3; ++k) ga[3 * r + k] += dl_dc * (y[k] * inv_ab - x[k] * inv_aa);
          }
          if (b.requires_grad()) {
            auto gb = b.grad_accumulator();
            const T inv_bb = c / (norm_b[r] * norm_b[r]);
            for (int k = 0; k < 3; ++k) gb[3 * r + k] += dl_dc * (x[k] * inv_ab - y[k] * inv_bb);
          }
        }
      });
}

#define CANET_INSTANTIATE_OPS(T)                                                                         \
  template Tensor<T> elementwise(Tape<T>&, ElementwiseKind, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> affine_scalar(Tape<T>&, const Tensor<T>&, T, T);                                   \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> concat(Tape<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);                 \
  template Tensor<T> slice(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t, std::size_t);          \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                                        \
  template Tensor<T> expand_rows(Tape<T>&, const Tensor<T>&, std::size_t);                              \
  template Tensor<T> expand_cols(Tape<T>&, const Tensor<T>&, std::size_t);                              \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&);                                               \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> angular_distance_rows(Tape<T>&, const Tensor<T>&, const Tensor<T>&, T);

CANET_INSTANTIATE_OPS(float)
CANET_INSTANTIATE_OPS(double)

}  // namespace canet::ops
