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

#include <gtest/gtest.h>

#include <cmath>

#include "flab/diffusion.hpp"
#include "flab/error.hpp"
#include "flab/nn/ops.hpp"
#include "flab/rng.hpp"
#include "flab/tuner.hpp"

namespace flab {
namespace {

Embedding random_embedding(int d, Rng& rng) {
  Embedding e;
  e.values.resize(d);
  for (float& v : e.values) v = static_cast<float>(rng.normal());
  return e;
}

TEST(Tuner, IdentityAtInitWithoutNoise) {
  const TuningLayer layer(16, 0.0, 1);
  Rng rng(2);
  for (int i = 0; i < 10; ++i) {
    const Embedding x = random_embedding(16, rng);
    EXPECT_EQ(layer.apply(x).values, x.values);
  }
}

TEST(Tuner, AdditiveAtInit) {
  const TuningLayer layer(16, 0.01, 3);
  const auto b = layer.bias().value();
  Rng rng(4);
  const Embedding zero{std::vector<float>(16, 0.0F), false};
  const Embedding at_zero = layer.apply(zero);
  for (int k = 0; k < 16; ++k) EXPECT_EQ(at_zero.values[k], b[k]);
  for (int i = 0; i < 10; ++i) {
    const Embedding x = random_embedding(16, rng);
    const Embedding y = layer.apply(x);
    for (int k = 0; k < 16; ++k) {
      // Exact: W = I contributes x_k * 1 and zeros, summed in double.
      EXPECT_EQ(y.values[k], static_cast<float>(static_cast<double>(b[k]) + x.values[k]));
    }
  }
  const TuningLayer same(16, 0.01, 3), other(16, 0.01, 5);
  EXPECT_TRUE(std::equal(b.begin(), b.end(), same.bias().value().begin()));
  EXPECT_FALSE(std::equal(b.begin(), b.end(), other.bias().value().begin()));
}

TEST(Tuner, LinearityAndShapeErrors) {
  TuningLayer layer(4, 0.0, 1);
  auto w = layer.weight();
  auto wv = w.mutable_value();
  for (int i = 0; i < 4; ++i) wv[i * 4 + i] = 2.0F;
  const Embedding x{{1.0F, -2.0F, 0.5F, 3.0F}, true};
  const Embedding y = layer.apply(x);
  for (int k = 0; k < 4; ++k) EXPECT_FLOAT_EQ(y.values[k], 2.0F * x.values[k]);
  EXPECT_FALSE(y.normalized);
  EXPECT_THROW(layer.apply(Embedding{{1.0F}, true}), InputError);
  EXPECT_THROW(TuningLayer(4, -1.0, 1), ConfigError);
}

TEST(Tuner, GradientOfSquaredNormMatchesFiniteDifferences) {
  TuningLayer layer(5, 0.3, 6);
  Rng rng(7);
  nn::Var<float> handle = layer.weight();
  auto wv = handle.mutable_value();
  for (float& v : wv) v += static_cast<float>(0.2 * rng.normal());
  const Embedding e = random_embedding(5, rng);
  const nn::Var<float> x = nn::Var<float>::constant({1, 5}, e.values);
  const nn::Var<float> y = layer.forward(x);
  nn::backward(nn::sum(nn::mul(y, y)));
  const auto grad = layer.weight().grad();

  // Finite differences of ||W e + b||^2 evaluated in double precision.
  auto f = [&](const std::vector<double>& w) {
    double acc = 0.0;
    for (int r = 0; r < 5; ++r) {
      double v = layer.bias().value()[r];
      for (int c = 0; c < 5; ++c) v += w[r * 5 + c] * e.values[c];
      acc += v * v;
    }
    return acc;
  };
  std::vector<double> w(layer.weight().value().begin(), layer.weight().value().end());
  const double h = 1e-6;
  for (std::size_t i = 0; i < w.size(); ++i) {
    std::vector<double> up = w, down = w;
    up[i] += h;
    down[i] -= h;
    const double numeric = (f(up) - f(down)) / (2 * h);
    EXPECT_NEAR(grad[i], numeric, 1e-5 * std::max(1.0, std::abs(numeric)));
  }
}

TEST(Tuner, BothParametersMoveDuringJointTraining) {
  const int d = 6;
  TuningLayer layer(d, 0.01, 8);
  const std::vector<float> w0(layer.weight().value().begin(), layer.weight().value().end());
  const std::vector<float> b0(layer.bias().value().begin(), layer.bias().value().end());
  UNetConfig uc;
  uc.in_channels = 2;
  uc.width = 4;
  uc.cond_dim = d;
  UNet unet(uc, 1);
  const NoiseSchedule s = make_schedule(100);
  Rng rng(9);
  std::vector<LatentTensor> latents;
  std::vector<Embedding> texts;
  for (int i = 0; i < 8; ++i) {
    LatentTensor z{2, 4, 4, std::vector<float>(32)};
    for (float& v : z.values) v = static_cast<float>(rng.normal());
    latents.push_back(std::move(z));
    texts.push_back(normalized(random_embedding(d, rng)));
  }
  const ConditionFn cond = [&](std::span<const std::size_t> idx) {
    std::vector<float> rows;
    for (std::size_t i : idx) rows.insert(rows.end(), texts[i].values.begin(), texts[i].values.end());
    return layer.forward(nn::Var<float>::constant({static_cast<int>(idx.size()), d}, rows));
  };
  LdmTrainConfig tc;
  tc.batch_size = 8;
  LdmTrainer trainer(unet, &layer.params(), s, tc);
  const double loss = trainer.step(latents, cond);
  EXPECT_GT(loss, 0.0);
  const std::vector<float> w1(layer.weight().value().begin(), layer.weight().value().end());
  const std::vector<float> b1(layer.bias().value().begin(), layer.bias().value().end());
  EXPECT_NE(w0, w1);
  EXPECT_NE(b0, b1);
}

TEST(Tuner, FrozenLayerStaysPut) {
  const int d = 4;
  TuningLayer layer(d, 0.01, 8);
  layer.set_trainable(false);
  const nn::Var<float> y = layer.forward(nn::Var<float>::constant({1, d}, 1.0F));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tuner, TunedTargetAndCheckpoint) {
  const ClapModel clap(ClapConfig{}, Vocabulary::build(LabelTable::defaults(), Vocabulary::default_adjuncts()), 1);
  const LabelTable table = LabelTable::defaults();
  const TuningLayer plain(64, 0.0, 1);
  const Embedding raw = clap.encode_text(label_to_text("Rain", table));
  const Embedding t = tuned_target("Rain", table, clap, plain);
  for (int k = 0; k < 64; ++k) EXPECT_NEAR(t.values[k], raw.values[k], 1e-6);
  EXPECT_EQ(tuned_target("Rain", table, clap, plain).values, t.values);
  EXPECT_THROW(tuned_target("Kazoo", table, clap, plain), LookupError);

  const TuningLayer noisy(64, 0.05, 2);
  Bundle b;
  noisy.save(b, "tuner.");
  EXPECT_TRUE(b.has("tuner.W"));
  EXPECT_TRUE(b.has("tuner.b"));
  TuningLayer loaded(64, 0.0, 3);
  loaded.load(b, "tuner.");
  EXPECT_EQ(tuned_target("Rain", table, clap, loaded).values, tuned_target("Rain", table, clap, noisy).values);
}

}  // namespace
}  // namespace flab
