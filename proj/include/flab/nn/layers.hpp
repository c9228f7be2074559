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

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "flab/error.hpp"
#include "flab/nn/ops.hpp"
#include "flab/nn/tensor.hpp"
#include "flab/rng.hpp"

namespace flab::nn {

// Ordered collection of named trainable tensors.
template <typename T>
class ParamSet {
 public:
  using Entry = std::pair<std::string, Var<T>>;

  Var<T> add(std::string name, Shape shape, std::vector<T> init) {
    for (const auto& e : entries_) {
      if (e.first == name) throw ConfigError("duplicate parameter name " + name);
    }
    Var<T> v = Var<T>::parameter(std::move(shape), std::move(init));
    entries_.emplace_back(std::move(name), v);
    return v;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  const Var<T>* find(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.first == name) return &e.second;
    }
    return nullptr;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  void set_trainable(bool on) {
    for (auto& e : entries_) e.second.node()->requires_grad = on;
  }

 private:
  std::vector<Entry> entries_;
};

template <typename T>
std::vector<T> uniform_init(std::size_t n, double bound, Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return v;
}

template <typename T>
struct Linear {
  Var<T> w, b;

  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, int in, int out, Rng& rng,
         double gain = 1.0) {
    const double bound = gain / std::sqrt(static_cast<double>(in));
    w = ps.add(name + ".w", {out, in}, uniform_init<T>(static_cast<std::size_t>(out) * in, bound, rng));
    b = ps.add(name + ".b", {out}, uniform_init<T>(static_cast<std::size_t>(out), bound, rng));
  }

  Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }
};

template <typename T>
struct Conv2d {
  Var<T> w, b;
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(ParamSet<T>& ps, const std::string& name, int in, int out, int k, int stride_,
         int pad_, Rng& rng, double gain = 1.0)
      : stride(stride_), pad(pad_) {
    const double bound = gain / std::sqrt(static_cast<double>(in) * k * k);
    w = ps.add(name + ".w", {out, in, k, k},
               uniform_init<T>(static_cast<std::size_t>(out) * in * k * k, bound, rng));
    b = ps.add(name + ".b", {out}, uniform_init<T>(static_cast<std::size_t>(out), bound, rng));
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct ConvTranspose2d {
  Var<T> w, b;
  int stride = 1;
  int pad = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(ParamSet<T>& ps, const std::string& name, int in, int out, int k,
                  int stride_, int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in) * k * k / (stride_ * stride_));
    w = ps.add(name + ".w", {in, out, k, k},
               uniform_init<T>(static_cast<std::size_t>(in) * out * k * k, bound, rng));
    b = ps.add(name + ".b", {out}, uniform_init<T>(static_cast<std::size_t>(out), bound, rng));
  }

  Var<T> operator()(const Var<T>& x) const { return conv_transpose2d(x, w, b, stride, pad); }
};

}  // namespace flab::nn
