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
#include <cstdint>
#include <string>
#include <vector>

#include "flab/error.hpp"
#include "flab/nn/layers.hpp"

namespace flab::nn {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

// Adam with bias correction over a ParamSet.
template <typename T>
class Adam {
 public:
  Adam(const ParamSet<T>& params, AdamOptions opt) : params_(params.entries()), opt_(opt) {
    for (const auto& [name, v] : params_) {
      m_.emplace_back(v.size(), 0.0F);
      v_.emplace_back(v.size(), 0.0F);
    }
  }

  // Applies one update from the accumulated gradients; returns the
  // pre-clipping gradient norm.
  double step() {
    double sq = 0.0;
    for (const auto& [name, p] : params_) {
      const auto& g = p.node()->grad;
      for (T x : g) sq += static_cast<double>(x) * x;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm");
    const double clip = (opt_.clip_norm > 0.0 && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto* node = params_[k].second.node();
      if (!node->requires_grad || node->grad.size() != node->value.size()) continue;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < node->value.size(); ++i) {
        const double g = static_cast<double>(node->grad[i]) * clip;
        m[i] = static_cast<float>(opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g);
        v[i] = static_cast<float>(opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g);
        const double update = opt_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
        node->value[i] = static_cast<T>(node->value[i] - update);
      }
    }
    return norm;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  std::int64_t steps() const { return t_; }
  void set_lr(double lr) { opt_.lr = lr; }

  // Moment buffers, parallel to the parameter order.
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  const std::vector<typename ParamSet<T>::Entry>& params() const { return params_; }

  void restore(std::int64_t t, std::vector<std::vector<float>> m, std::vector<std::vector<float>> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) {
      throw ConfigError("optimizer state does not match parameter list");
    }
    for (std::size_t k = 0; k < m.size(); ++k) {
      if (m[k].size() != m_[k].size() || v[k].size() != v_[k].size()) {
        throw ConfigError("optimizer state shape mismatch for " + params_[k].first);
      }
    }
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  std::vector<typename ParamSet<T>::Entry> params_;
  AdamOptions opt_;
  std::vector<std::vector<float>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace flab::nn
