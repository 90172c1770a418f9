#include "canet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>

#include "canet/error.hpp"

namespace canet {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) {
  if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_to_string(shape) + " holds " + std::to_string(shape_numel(shape)) +
                     " elements but data has " + std::to_string(data.size()));
  }
  node_ = std::make_shared<detail::TensorNode<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor({1}, {value});
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_to_string(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::grad_accumulator() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() const {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detached_copy() const {
  return Tensor(node_->shape, node_->data);
}

namespace {
std::atomic<std::uint64_t> next_tape_id{1};
}

template <typename T>
Tape<T>::Tape() : id_(next_tape_id.fetch_add(1)) {}

template <typename T>
Tensor<T> Tape<T>::record(std::string_view op, Shape shape, std::vector<T> data,
                          std::initializer_list<Tensor<T>> inputs, BackwardFn fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!recording_) return out;
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  if (!needs_grad) return out;
  if (consumed_) throw Error("tape already ran backward; call reset() before recording new ops");
  out.node_->requires_grad = true;
  out.node_->tape_id = id_;
  out.node_->tape_generation = generation_;
  records_.push_back(Record{std::string(op), out, std::move(fn)});
  return out;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& root) {
  if (!root.defined()) throw Error("backward on an undefined tensor");
  if (root.numel() != 1) {
    throw ShapeError("backward needs a scalar root, got shape " + shape_to_string(root.shape()));
  }
  if (consumed_) throw Error("backward already ran on this tape; call reset() first");
  if (root.node_->tape_id != id_ || root.node_->tape_generation != generation_) {
    throw Error("stale tape: the root tensor was not recorded on the current tape generation");
  }
  Tensor<T> r = root;
  r.grad_accumulator()[0] += T(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not reachable from root
    it->backward(it->output.grad());
  }
  consumed_ = true;
}

template <typename T>
void Tape<T>::reset() {
  records_.clear();
  consumed_ = false;
  ++generation_;
}

template <typename T>
std::vector<std::string> Tape<T>::op_names() const {
  std::vector<std::string> names;
  names.reserve(records_.size());
  for (const auto& r : records_) names.push_back(r.op);
  return names;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace canet
