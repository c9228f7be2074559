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

#include "flab/tuner.hpp"

#include "flab/error.hpp"
#include "flab/nn/ops.hpp"
#include "flab/rng.hpp"

namespace flab {

TuningLayer::TuningLayer(int dim, double noise_std, std::uint64_t seed) : dim_(dim) {
  if (dim < 1) throw ConfigError("tuning layer dimension must be positive");
  if (!(noise_std >= 0.0)) throw ConfigError("tuning noise_std must be >= 0");
  std::vector<float> eye(static_cast<std::size_t>(dim) * dim, 0.0F);
  for (int i = 0; i < dim; ++i) eye[static_cast<std::size_t>(i) * dim + i] = 1.0F;
  Rng rng(derive_seed(seed, "tuner-bias"));
  std::vector<float> bias(static_cast<std::size_t>(dim));
  for (float& v : bias) v = static_cast<float>(noise_std * rng.normal());
  w_ = params_.add("W", {dim, dim}, std::move(eye));
  b_ = params_.add("b", {dim}, std::move(bias));
}

Embedding TuningLayer::apply(const Embedding& e) const {
  if (e.dim() != dim_) {
    throw InputError("tuning layer expects dimension " + std::to_string(dim_) + ", got " +
                     std::to_string(e.dim()));
  }
  Embedding out;
  out.values.resize(static_cast<std::size_t>(dim_));
  const auto w = w_.value();
  const auto b = b_.value();
  for (int r = 0; r < dim_; ++r) {
    double acc = b[r];
    for (int c = 0; c < dim_; ++c) acc += static_cast<double>(w[static_cast<std::size_t>(r) * dim_ + c]) * e.values[c];
    out.values[r] = static_cast<float>(acc);
  }
  out.normalized = false;
  return out;
}

nn::Var<float> TuningLayer::forward(const nn::Var<float>& x) const {
  if (x.rank() != 2 || x.dim(1) != dim_) throw InputError("tuning layer: bad input shape " + nn::shape_str(x.shape()));
  return nn::linear(x, w_, b_);
}

void TuningLayer::set_trainable(bool on) {
  trainable_ = on;
  params_.set_trainable(on);
}

void TuningLayer::save(Bundle& b, const std::string& prefix) const {
  store_params(b, prefix, params_);
  b.metadata["tuner"]["trainable"] = trainable_;
}

void TuningLayer::load(const Bundle& b, const std::string& prefix) { load_params(b, prefix, params_); }

Embedding tuned_target(std::string_view label, const LabelTable& table, const ClapModel& encoder,
                       const TuningLayer& layer) {
  return normalized(layer.apply(encoder.encode_text(label_to_text(label, table))));
}

}  // namespace flab
