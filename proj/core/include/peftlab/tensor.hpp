// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace peftlab {

enum class DType : std::uint8_t { kF32, kF16 };

std::string to_string(DType dtype);
DType dtype_from_string(const std::string& name);
std::size_t dtype_size(DType dtype);

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major array. Copies share storage, like a handle; use clone() for
// a deep copy. Element storage is always float; an f16 tensor holds only
// values exactly representable in IEEE binary16.
//
// The gradient slot is f32, has the tensor's shape, and is allocated lazily
// by the backward pass; it can only exist when requires_grad is set.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = DType::kF32, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data, DType dtype = DType::kF32,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  DType dtype() const;

  std::span<const float> data() const;
  // Handles share storage, so const here only means the handle is not
  // reseated. Mutation is reserved for initialisers and optimisers.
  std::span<float> mutable_data() const;
  float item() const;
  float at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool on) const;

  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad() const;
  // Adds `delta` into the grad slot, allocating it on first use. No-op when
  // requires_grad is off.
  void accumulate_grad(std::span<const float> delta) const;
  void zero_grad() const;
  void clear_grad() const;

  Tensor clone() const;
  // Deep copy converted to `dtype` (round-to-nearest-even for f16).
  Tensor to(DType dtype) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;
};

// Execution-order tape of differentiable operations.
//
// In record mode every op whose inputs require grad appends a node; backward()
// replays the nodes in reverse and is allowed exactly once. Inference mode
// records nothing, so outputs never require grad.
class Graph {
 public:
  enum class Mode { kRecord, kInference };

  explicit Graph(Mode mode = Mode::kRecord) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return mode_ == Mode::kRecord; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // `backward` reads output.grad() and accumulates into the inputs it captured.
  void record(std::string op, Tensor output, std::function<void()> backward);

  // Populates d(loss)/d(leaf) for every requires_grad leaf reached from `loss`.
  void backward(const Tensor& loss);

 private:
  struct Node {
    std::string op;
    Tensor output;
    std::function<void()> backward;
  };
  Mode mode_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

// Populates leaf grads through `graph`. Throws GraphConsumed on reuse.
void backward(const Tensor& loss, Graph& graph);

}  // namespace peftlab
