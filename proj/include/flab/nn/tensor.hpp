// Copyright 2026 The flab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Minimal reverse-mode automatic differentiation over dense NCHW tensors.
// Instantiated for float (models) and double (gradient checks).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace flab::nn {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

template <typename T>
struct Node {
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  T* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, std::vector<T> value);
  static Var constant(Shape shape, T fill);
  static Var parameter(Shape shape, std::vector<T> value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> value() const { return node_->value; }
  std::span<T> mutable_value() { return node_->value; }
  const T* data() const { return node_->value.data(); }
  T item() const { return node_->value.at(0); }

  // Zero-filled when no gradient has reached this node.
  std::vector<T> grad() const;
  void zero_grad() { node_->grad.clear(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Accumulates d(loss)/d(leaf) into every reachable node that requires grad.
template <typename T>
void backward(const Var<T>& loss);

// While alive, new ops on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Builds an op result; records the graph when any parent requires grad.
template <typename T>
Var<T> make_result(Shape shape, std::vector<T> value,
                   std::vector<std::shared_ptr<Node<T>>> parents,
                   std::function<void(Node<T>&)> backward_fn);

}  // namespace flab::nn
