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

#include "flab/nn/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "flab/error.hpp"

namespace flab::nn {
namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Var<T> Var<T>::constant(Shape shape, std::vector<T> value) {
  if (numel(shape) != value.size()) {
    throw InputError("tensor value size does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return Var(std::move(n));
}

template <typename T>
Var<T> Var<T>::constant(Shape shape, T fill) {
  const std::size_t count = numel(shape);
  return constant(std::move(shape), std::vector<T>(count, fill));
}

template <typename T>
Var<T> Var<T>::parameter(Shape shape, std::vector<T> value) {
  Var v = constant(std::move(shape), std::move(value));
  v.node()->requires_grad = true;
  return v;
}

template <typename T>
std::vector<T> Var<T>::grad() const {
  if (node_->grad.size() == node_->value.size()) return node_->grad;
  return std::vector<T>(node_->value.size(), T(0));
}

template <typename T>
Var<T> make_result(Shape shape, std::vector<T> value,
                   std::vector<std::shared_ptr<Node<T>>> parents,
                   std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || (p && p->requires_grad);
    if (any) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Var<T>(std::move(n));
}

template <typename T>
void backward(const Var<T>& loss) {
  if (loss.size() != 1) throw InputError("backward() needs a scalar loss");
  if (!loss.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p != nullptr && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
}

template class Var<float>;
template class Var<double>;
template Var<float> make_result(Shape, std::vector<float>, std::vector<std::shared_ptr<Node<float>>>,
                                std::function<void(Node<float>&)>);
template Var<double> make_result(Shape, std::vector<double>,
                                 std::vector<std::shared_ptr<Node<double>>>,
                                 std::function<void(Node<double>&)>);
template void backward(const Var<float>&);
template void backward(const Var<double>&);

}  // namespace flab::nn
