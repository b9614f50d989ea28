// Copyright 2026 The TaCA Lab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace taca {

using Shape = std::vector<std::size_t>;

// Tensor storage is 64-byte aligned. Vectorized kernels peel loops based on
// the start address, so a fixed alignment keeps results bitwise reproducible
// across allocations.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlignment));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool grad_present = false;
  bool trainable = false;
  // True for trainable leaves and for every tensor computed from one while a
  // tape was recording.
  bool requires_grad = false;
  bool produced_by_op = false;
  std::uint64_t id = 0;

  void accumulate(std::size_t i, double g);
  std::span<double> ensure_grad();
};

}  // namespace detail

// Dense row-major float64 tensor. Copies of a Tensor share storage; use
// clone() for a deep copy. Values are immutable once an op has produced them;
// parameters (leaves) are updated in place by optimizers between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool trainable = false);
  static Tensor full(Shape shape, double value, bool trainable = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                           bool trainable = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  // Matrix view: all leading dimensions folded into rows.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const { return values()[i]; }
  double at(std::size_t row, std::size_t col) const {
    return values()[row * cols() + col];
  }

  bool trainable() const;
  // Marks a leaf as a parameter. Has no effect on tensors already recorded.
  void set_trainable(bool trainable);
  bool requires_grad() const;

  bool has_grad() const;
  // Throws ContractError when no gradient is stored.
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  std::uint64_t id() const;

  // Fresh leaf with copied values, detached from any tape.
  Tensor detach() const;
  // Deep copy preserving the trainable flag; the copy is a new leaf.
  Tensor clone() const;
  bool bitwise_equal(const Tensor& other) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  detail::Node& checked() const;

  std::shared_ptr<detail::Node> node_;
};

// Ordered log of executed primitives. Records are appended in execution order,
// so every record's inputs were produced before it.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Record {
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::vector<std::shared_ptr<detail::Node>> inputs,
              std::shared_ptr<detail::Node> output, BackwardFn backward);

  // Accumulates d(loss)/d(leaf) into every trainable leaf reachable from
  // `loss`. Intermediate gradients are reset first, so calling backward twice
  // on the same tape adds the two leaf gradients.
  void backward(const Tensor& loss);
  void clear();

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  // Records whose backward function ran during the last backward call.
  std::size_t last_visit_count() const { return last_visits_; }

  // Tape currently receiving records on this thread, or nullptr.
  static Tape* active();

 private:
  friend class TapeScope;
  friend class NoGradScope;

  std::vector<Record> records_;
  std::size_t last_visits_ = 0;
};

// Installs a fresh tape as the thread's active tape for its lifetime.
class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* previous_;
};

// Disables recording for its lifetime; results carry no gradient history.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Runs reverse mode from a scalar loss on the active tape.
void backward(const Tensor& loss);

}  // namespace taca
