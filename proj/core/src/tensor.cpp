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

#include "taca/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <sstream>

#include "taca/errors.hpp"

namespace taca {

namespace {

std::uint64_t next_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

thread_local Tape* g_active_tape = nullptr;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

std::span<double> Node::ensure_grad() {
  if (!grad_present) {
    grad.assign(value.size(), 0.0);
    grad_present = true;
  }
  return grad;
}

void Node::accumulate(std::size_t i, double g) { ensure_grad()[i] += g; }

}  // namespace detail

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  return Tensor(std::move(node));
}

namespace {

std::shared_ptr<detail::Node> make_node(Shape shape, Buffer values, bool trainable) {
  for (auto d : shape) {
    if (d == 0) {
      throw DimensionError("tensor dimensions must be positive, got " +
                           shape_string(shape));
    }
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->trainable = trainable;
  node->requires_grad = trainable;
  node->id = next_id();
  return node;
}

}  // namespace

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool trainable) {
  return Tensor(make_node(std::move(shape), Buffer(values.begin(), values.end()),
                          trainable));
}

Tensor Tensor::zeros(Shape shape, bool trainable) {
  return full(std::move(shape), 0.0, trainable);
}

Tensor Tensor::full(Shape shape, double value, bool trainable) {
  const auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), Buffer(n, value), trainable));
}

Tensor Tensor::scalar(double value) { return from_values({}, {value}); }

detail::Node& Tensor::checked() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked().value.size(); }

std::size_t Tensor::cols() const {
  const auto& s = shape();
  return s.empty() ? 1 : s.back();
}

std::size_t Tensor::rows() const { return numel() / cols(); }

std::span<const double> Tensor::values() const { return checked().value; }

std::span<double> Tensor::mutable_values() { return checked().value; }

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() needs a single-element tensor, got " +
                        shape_string(shape()));
  }
  return checked().value[0];
}

bool Tensor::trainable() const { return checked().trainable; }

void Tensor::set_trainable(bool trainable) {
  auto& n = checked();
  if (n.produced_by_op) {
    throw ContractError("only leaf tensors can change their trainable flag");
  }
  n.trainable = trainable;
  n.requires_grad = trainable;
  if (!trainable) {
    n.grad.clear();
    n.grad_present = false;
  }
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

bool Tensor::has_grad() const { return checked().grad_present; }

std::span<const double> Tensor::grad() const {
  const auto& n = checked();
  if (!n.grad_present) throw ContractError("tensor has no gradient");
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = checked();
  if (n.grad_present) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

void Tensor::clear_grad() {
  auto& n = checked();
  n.grad.clear();
  n.grad_present = false;
}

std::uint64_t Tensor::id() const { return checked().id; }

Tensor Tensor::detach() const {
  return Tensor(make_node(shape(), checked().value, false));
}

Tensor Tensor::clone() const {
  return Tensor(make_node(shape(), checked().value, trainable()));
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  const auto& a = checked();
  const auto& b = other.checked();
  if (a.shape != b.shape) return false;
  return std::memcmp(a.value.data(), b.value.data(),
                     a.value.size() * sizeof(double)) == 0;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::vector<std::shared_ptr<detail::Node>> inputs,
                  std::shared_ptr<detail::Node> output, BackwardFn backward) {
  records_.push_back({std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got " +
                        (loss.defined() ? shape_string(loss.shape())
                                        : std::string("undefined")));
  }
  const auto& loss_node = loss.node();
  std::size_t end = records_.size();
  while (end > 0 && records_[end - 1].output != loss_node) --end;
  if (end == 0) {
    throw ContractError("loss was not produced on this tape");
  }
  for (std::size_t i = 0; i < end; ++i) {
    auto& out = *records_[i].output;
    out.grad.clear();
    out.grad_present = false;
  }
  loss_node->ensure_grad()[0] = 1.0;
  last_visits_ = 0;
  for (std::size_t i = end; i-- > 0;) {
    auto& rec = records_[i];
    if (!rec.output->grad_present) continue;
    rec.backward();
    ++last_visits_;
  }
}

void Tape::clear() {
  records_.clear();
  last_visits_ = 0;
}

TapeScope::TapeScope() : previous_(g_active_tape) { g_active_tape = &tape_; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }

NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  auto* tape = Tape::active();
  if (tape == nullptr) throw ContractError("backward called with no active tape");
  tape->backward(loss);
}

}  // namespace taca
