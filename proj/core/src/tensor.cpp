// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "peftlab/errors.hpp"
#include "peftlab/kernels.hpp"

namespace peftlab {

struct Tensor::Impl {
  Shape shape;
  DType dtype = DType::kF32;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty == absent
};

std::string to_string(DType dtype) { return dtype == DType::kF16 ? "f16" : "f32"; }

DType dtype_from_string(const std::string& name) {
  if (name == "f32") return DType::kF32;
  if (name == "f16") return DType::kF16;
  throw InvalidConfig("unknown dtype '" + name + "'");
}

std::size_t dtype_size(DType dtype) { return dtype == DType::kF16 ? 2 : 4; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeMismatch("tensor extents must be positive, got " + shape_to_string(shape));
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, DType dtype, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_numel(shape), 0.0f);
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, DType dtype, bool requires_grad) {
  check_shape(shape);
  if (data.size() != shape_numel(shape)) {
    throw ShapeMismatch("data size " + std::to_string(data.size()) + " does not match shape " +
                        shape_to_string(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->dtype = dtype;
  impl->requires_grad = requires_grad;
  if (dtype == DType::kF16) kernels::round_to_f16(impl->data);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({}, {value}, DType::kF32, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeMismatch("axis " + std::to_string(axis) + " out of range for " +
                        shape_to_string(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
DType Tensor::dtype() const { return impl_->dtype; }
std::span<const float> Tensor::data() const { return impl_->data; }
std::span<float> Tensor::mutable_data() const { return impl_->data; }

float Tensor::item() const {
  if (numel() != 1) throw ShapeMismatch("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

float Tensor::at(std::size_t row, std::size_t col) const {
  return impl_->data[row * impl_->shape.back() + col];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) const {
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const float> Tensor::grad() const { return impl_->grad; }
std::span<float> Tensor::mutable_grad() const { return impl_->grad; }

void Tensor::accumulate_grad(std::span<const float> delta) const {
  if (!impl_->requires_grad) return;
  if (delta.size() != impl_->data.size()) {
    throw ShapeMismatch("gradient size mismatch for " + shape_to_string(shape()));
  }
  if (impl_->grad.empty()) {
    impl_->grad.assign(delta.begin(), delta.end());
    return;
  }
  for (std::size_t i = 0; i < delta.size(); ++i) impl_->grad[i] += delta[i];
}

void Tensor::zero_grad() const {
  if (impl_->requires_grad) impl_->grad.assign(impl_->data.size(), 0.0f);
}

void Tensor::clear_grad() const { impl_->grad.clear(); }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<Impl>(*impl_);
  return Tensor(std::move(impl));
}

Tensor Tensor::to(DType dtype) const {
  auto impl = std::make_shared<Impl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->dtype = dtype;
  if (dtype == DType::kF16) kernels::round_to_f16(impl->data);
  return Tensor(std::move(impl));
}

void Graph::record(std::string op, Tensor output, std::function<void()> backward) {
  if (!recording()) return;
  if (consumed_) throw GraphConsumed("cannot record '" + op + "' into a consumed graph");
  nodes_.push_back(Node{std::move(op), std::move(output), std::move(backward)});
}

void Graph::backward(const Tensor& loss) {
  if (consumed_) throw GraphConsumed("backward() already ran on this graph");
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeMismatch("backward() needs a scalar loss");
  }
  consumed_ = true;
  if (!loss.requires_grad()) {
    nodes_.clear();
    return;
  }
  Tensor root = loss;
  root.clear_grad();
  const float one = 1.0f;
  root.accumulate_grad(std::span<const float>(&one, 1));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
  // Intermediates are no longer needed; drop them (and their grads).
  for (auto& node : nodes_) {
    if (!node.output.same_storage(root)) node.output.clear_grad();
  }
  nodes_.clear();
}

void backward(const Tensor& loss, Graph& graph) { graph.backward(loss); }

}  // namespace peftlab
