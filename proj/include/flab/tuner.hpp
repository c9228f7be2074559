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

#include <cstdint>
#include <string_view>

#include "flab/checkpoint.hpp"
#include "flab/clap.hpp"
#include "flab/nn/layers.hpp"
#include "flab/synthcorpus.hpp"

namespace flab {

// Square linear map W x + b between the text encoder and the generator.
class TuningLayer {
 public:
  // W = I exactly; b ~ N(0, noise_std^2) from `seed`.
  TuningLayer(int dim, double noise_std, std::uint64_t seed);

  int dim() const { return dim_; }
  nn::ParamSet<float>& params() { return params_; }
  const nn::Var<float>& weight() const { return w_; }
  const nn::Var<float>& bias() const { return b_; }

  // Output is not renormalised.
  Embedding apply(const Embedding& e) const;
  // Rows of x [B, D] mapped through the layer, differentiable.
  nn::Var<float> forward(const nn::Var<float>& x) const;

  bool trainable() const { return trainable_; }
  void set_trainable(bool on);

  // Arrays `<prefix>W` and `<prefix>b`.
  void save(Bundle& b, const std::string& prefix) const;
  void load(const Bundle& b, const std::string& prefix);

 private:
  int dim_;
  nn::ParamSet<float> params_;
  nn::Var<float> w_, b_;
  bool trainable_ = true;
};

// apply(encode_text(label_to_text(label))), L2-normalised for cosine use.
Embedding tuned_target(std::string_view label, const LabelTable& table, const ClapModel& encoder,
                       const TuningLayer& layer);

}  // namespace flab
