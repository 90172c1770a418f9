#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace canet {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0 for leaves and constants
  std::uint64_t tape_generation = 0;
};

}  // namespace detail

/// Dense row-major tensor handle.
///
/// Copies share storage, like a reference-counted pointer. Values are treated as
/// immutable once produced by an op; only leaves (parameters, buffers) are
/// written through mutable_data(), and only outside of a recorded forward pass.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  /// Gradient buffer, allocated as zeros on first use. Op backward rules
  /// accumulate into it with +=.
  std::span<T> grad_accumulator() const;
  void zero_grad() const;
  void clear_grad() const { node_->grad.clear(); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  Tensor detached_copy() const;

 private:
  friend class Tape<T>;
  std::shared_ptr<detail::TensorNode<T>> node_;
};

/// Records differentiable ops in execution order and replays their backward
/// rules in reverse.
///
/// A tape is single-threaded. After backward() it is consumed; reset() starts a
/// new generation and invalidates every tensor recorded before it.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const T> grad_out)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Recording is on by default. With it off, ops return constants and keep no
  /// backward state, which is what inference and finite differences want.
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  /// Creates an op result. When recording and any input requires a gradient,
  /// the result joins the graph and `fn` is kept for backward.
  Tensor<T> record(std::string_view op, Shape shape, std::vector<T> data,
                   std::initializer_list<Tensor<T>> inputs, BackwardFn fn);

  void backward(const Tensor<T>& root);
  void reset();

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }
  std::vector<std::string> op_names() const;

 private:
  struct Record {
    std::string op;
    Tensor<T> output;
    BackwardFn backward;
  };

  std::uint64_t id_;
  std::uint64_t generation_ = 1;
  bool recording_ = true;
  bool consumed_ = false;
  std::vector<Record> records_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace canet
