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
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "flab/checkpoint.hpp"
#include "flab/error.hpp"
#include "flab/nn/adam.hpp"
#include "flab/nn/layers.hpp"
#include "flab/nn/ops.hpp"
#include "flab/vae.hpp"

namespace flab {

enum class ScheduleKind { linear };

// Steps are numbered 1..N; index 0 of each array is step 1.
struct NoiseSchedule {
  int N = 0;
  std::vector<double> beta, alpha, alpha_bar;

  double beta_at(int n) const { return beta.at(static_cast<std::size_t>(n - 1)); }
  double alpha_bar_at(int n) const { return alpha_bar.at(static_cast<std::size_t>(n - 1)); }
  void check_step(int n) const;
};

// Linear beta from 1e-4 to 0.02.
NoiseSchedule make_schedule(int N, ScheduleKind kind = ScheduleKind::linear);

// sqrt(alpha_bar_n) z0 + sqrt(1 - alpha_bar_n) eps
std::vector<float> q_sample(std::span<const float> z0, int n, std::span<const float> eps,
                            const NoiseSchedule& sched);

// z0 and eps are [B, ...] with identical shapes; cond is [B, D].
template <typename T>
struct DiffusionBatch {
  nn::Var<T> z0;
  nn::Var<T> cond;
  std::vector<int> steps;
  nn::Var<T> eps;
};

template <typename T>
using Denoiser =
    std::function<nn::Var<T>(const nn::Var<T>& z_n, const std::vector<int>& steps, const nn::Var<T>& cond)>;

// Mean over the batch of ||eps - eps_theta(z_n, n, E)||^2.
template <typename T>
nn::Var<T> training_loss(const DiffusionBatch<T>& batch, const Denoiser<T>& denoiser,
                         const NoiseSchedule& sched) {
  if (!batch.z0.defined() || !batch.eps.defined() || batch.z0.shape() != batch.eps.shape()) {
    throw InputError("training_loss: z0 and eps must share a shape");
  }
  const int b = batch.z0.dim(0);
  if (static_cast<int>(batch.steps.size()) != b || (batch.cond.defined() && batch.cond.dim(0) != b)) {
    throw InputError("training_loss: inconsistent batch sizes");
  }
  const std::size_t per = batch.z0.size() / static_cast<std::size_t>(b);
  std::vector<T> zn(batch.z0.size());
  for (int i = 0; i < b; ++i) {
    sched.check_step(batch.steps[i]);
    const double ab = sched.alpha_bar_at(batch.steps[i]);
    const T a = static_cast<T>(std::sqrt(ab)), s = static_cast<T>(std::sqrt(1.0 - ab));
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
      zn[j] = a * batch.z0.value()[j] + s * batch.eps.value()[j];
    }
  }
  const nn::Var<T> pred =
      denoiser(nn::Var<T>::constant(batch.z0.shape(), std::move(zn)), batch.steps, batch.cond);
  const nn::Var<T> loss =
      nn::scale(nn::squared_error_sum(pred, batch.eps), static_cast<T>(1.0 / b));
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericalError("diffusion loss is not finite");
  }
  return loss;
}

// Standard sinusoidal features of the step index, [B, dim].
template <typename T>
nn::Var<T> timestep_embedding(const std::vector<int>& steps, int dim);

struct UNetConfig {
  int in_channels = 4;
  int width = 16;
  int cond_dim = 64;
  int time_dim = 32;
  int cond_hidden = 64;

  void validate() const;
};

// Two-level UNet. Step features are added to every block's feature maps;
// the condition modulates every block through a feature-wise affine map.
class UNet {
 public:
  UNet(UNetConfig cfg, std::uint64_t seed);

  const UNetConfig& config() const { return cfg_; }
  nn::ParamSet<float>& params() { return params_; }
  const nn::ParamSet<float>& params() const { return params_; }

  nn::Var<float> forward(const nn::Var<float>& z, const std::vector<int>& steps,
                         const nn::Var<float>& cond) const;
  Denoiser<float> as_denoiser() const;

  void save(Bundle& b, const std::string& prefix) const;
  void load(const Bundle& b, const std::string& prefix);

 private:
  struct Block {
    nn::Conv2d<float> conv1, conv2, skip;
    nn::Linear<float> time_proj, film_proj;
    int out = 0;
    bool has_skip = false;
  };
  Block make_block(const std::string& name, int in, int out, Rng& rng);
  nn::Var<float> run_block(const Block& b, const nn::Var<float>& x, const nn::Var<float>& temb,
                           const nn::Var<float>& cfeat) const;

  UNetConfig cfg_;
  nn::ParamSet<float> params_;
  nn::Linear<float> time_mlp_, cond_mlp_;
  nn::Conv2d<float> in_conv_, down_, up_conv_, out_conv_;
  Block enc_, mid_, dec_;
};

struct SamplerConfig {
  int steps = 200;      // evenly strided subset of the training steps
  double clip_x0 = 0.0;  // 0 disables clipping of the predicted clean latent
};

// Evenly strided step subset ending at N, ascending.
std::vector<int> sampler_steps(const NoiseSchedule& sched, int count);

// Ancestral reverse chain from z_N ~ N(0, I). Row i of `conds` is the
// condition of output i, whose noise stream is seeded by seeds[i], so every
// output is a function of its own (condition, seed).
std::vector<LatentTensor> ddpm_sample(const Denoiser<float>& denoiser,
                                      const std::vector<std::vector<float>>& conds,
                                      const std::vector<std::uint64_t>& seeds,
                                      const NoiseSchedule& sched, int channels, int height,
                                      int width, const SamplerConfig& cfg);

struct LdmTrainConfig {
  int steps = 2000;
  int batch_size = 32;
  double lr = 1e-3;
  double extra_lr = 1e-3;  // learning rate of jointly trained conditioning params
  double cond_dropout = 0.0;
  std::uint64_t seed = 0;
  int log_every = 0;
};

// Produces the [B, D] condition rows for the given dataset indices. The
// result may depend on trainable parameters (e.g. a tuning layer).
using ConditionFn = std::function<nn::Var<float>(std::span<const std::size_t> indices)>;

// Resumable optimisation of the denoising objective. Every step's batch,
// step indices and noise derive from (seed, step), so a run resumed from
// saved state continues exactly as the uninterrupted run would.
class LdmTrainer {
 public:
  LdmTrainer(UNet& unet, nn::ParamSet<float>* extra, const NoiseSchedule& sched,
             LdmTrainConfig cfg);

  // Runs one optimisation step on standardised latents; returns its loss.
  double step(std::span<const LatentTensor> latents, const ConditionFn& condition);
  std::int64_t steps_done() const { return unet_opt_.steps(); }
  // Rows of the most recent batch that kept their condition.
  int last_conditioned() const { return last_conditioned_; }

  void save_state(Bundle& b, const std::string& prefix) const;
  void load_state(const Bundle& b, const std::string& prefix);

 private:
  UNet& unet_;
  nn::ParamSet<float>* extra_;
  const NoiseSchedule& sched_;
  LdmTrainConfig cfg_;
  nn::Adam<float> unet_opt_;
  std::unique_ptr<nn::Adam<float>> extra_opt_;
  int last_conditioned_ = 0;
};

// Denoising loss over every latent with noise and step fixed by `seed`.
double ldm_eval_loss(const UNet& unet, std::span<const LatentTensor> latents,
                     const ConditionFn& condition, const NoiseSchedule& sched, std::uint64_t seed,
                     int batch_size = 64);

}  // namespace flab
