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

#include "flab/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "flab/rng.hpp"

namespace flab {

using nn::Var;

void NoiseSchedule::check_step(int n) const {
  if (n < 1 || n > N) {
    throw InputError("diffusion step " + std::to_string(n) + " outside [1, " + std::to_string(N) + "]");
  }
}

NoiseSchedule make_schedule(int N, ScheduleKind kind) {
  if (N < 10) throw ConfigError("noise schedule needs N >= 10");
  if (kind != ScheduleKind::linear) throw ConfigError("unsupported schedule kind");
  NoiseSchedule s;
  s.N = N;
  constexpr double lo = 1e-4, hi = 0.02;
  double prod = 1.0;
  for (int i = 0; i < N; ++i) {
    const double b = lo + (hi - lo) * static_cast<double>(i) / (N - 1);
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

std::vector<float> q_sample(std::span<const float> z0, int n, std::span<const float> eps,
                            const NoiseSchedule& sched) {
  sched.check_step(n);
  if (z0.size() != eps.size()) throw InputError("q_sample: z0 and eps differ in size");
  const double ab = sched.alpha_bar_at(n);
  const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
  std::vector<float> out(z0.size());
  for (std::size_t i = 0; i < z0.size(); ++i) {
    out[i] = static_cast<float>(a * z0[i] + s * eps[i]);
  }
  return out;
}

template <typename T>
Var<T> timestep_embedding(const std::vector<int>& steps, int dim) {
  const int half = dim / 2;
  std::vector<T> v(steps.size() * static_cast<std::size_t>(dim), T(0));
  for (std::size_t i = 0; i < steps.size(); ++i) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / std::max(half, 1));
      const double arg = steps[i] * freq;
      v[i * dim + k] = static_cast<T>(std::sin(arg));
      v[i * dim + half + k] = static_cast<T>(std::cos(arg));
    }
  }
  return Var<T>::constant({static_cast<int>(steps.size()), dim}, std::move(v));
}

template Var<float> timestep_embedding<float>(const std::vector<int>&, int);
template Var<double> timestep_embedding<double>(const std::vector<int>&, int);

void UNetConfig::validate() const {
  if (in_channels < 1 || width < 1 || cond_dim < 1 || time_dim < 2 || cond_hidden < 1) {
    throw ConfigError("unet: dimensions must be positive (time_dim >= 2)");
  }
}

UNet::UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, "unet-init"));
  const int w = cfg_.width;
  time_mlp_ = nn::Linear<float>(params_, "time.mlp", cfg_.time_dim, cfg_.time_dim, rng);
  cond_mlp_ = nn::Linear<float>(params_, "cond.mlp", cfg_.cond_dim, cfg_.cond_hidden, rng);
  in_conv_ = nn::Conv2d<float>(params_, "in", cfg_.in_channels, w, 3, 1, 1, rng);
  enc_ = make_block("enc", w, w, rng);
  down_ = nn::Conv2d<float>(params_, "down", w, 2 * w, 3, 2, 1, rng);
  mid_ = make_block("mid", 2 * w, 2 * w, rng);
  up_conv_ = nn::Conv2d<float>(params_, "up", 2 * w, w, 3, 1, 1, rng);
  dec_ = make_block("dec", 2 * w, w, rng);
  out_conv_ = nn::Conv2d<float>(params_, "out", w, cfg_.in_channels, 3, 1, 1, rng, 0.1);
}

UNet::Block UNet::make_block(const std::string& name, int in, int out, Rng& rng) {
  Block b;
  b.out = out;
  b.conv1 = nn::Conv2d<float>(params_, name + ".conv1", in, out, 3, 1, 1, rng);
  b.conv2 = nn::Conv2d<float>(params_, name + ".conv2", out, out, 3, 1, 1, rng);
  b.time_proj = nn::Linear<float>(params_, name + ".time", cfg_.time_dim, out, rng);
  b.film_proj = nn::Linear<float>(params_, name + ".film", cfg_.cond_hidden, 2 * out, rng, 0.1);
  if (in != out) {
    b.skip = nn::Conv2d<float>(params_, name + ".skip", in, out, 1, 1, 0, rng);
    b.has_skip = true;
  }
  return b;
}

Var<float> UNet::run_block(const Block& b, const Var<float>& x, const Var<float>& temb,
                           const Var<float>& cfeat) const {
  Var<float> h = nn::silu(b.conv1(x));
  h = nn::add_channel_bias(h, b.time_proj(temb));
  const Var<float> gb = b.film_proj(cfeat);
  h = nn::film(h, nn::slice_cols(gb, 0, b.out), nn::slice_cols(gb, b.out, b.out));
  h = b.conv2(nn::silu(h));
  return nn::add(b.has_skip ? b.skip(x) : x, h);
}

Var<float> UNet::forward(const Var<float>& z, const std::vector<int>& steps,
                         const Var<float>& cond) const {
  if (z.rank() != 4 || z.dim(1) != cfg_.in_channels) {
    throw InputError("unet: expected [B, " + std::to_string(cfg_.in_channels) + ", H, W] input, got " +
                     nn::shape_str(z.shape()));
  }
  const int b = z.dim(0), h = z.dim(2), w = z.dim(3);
  if (static_cast<int>(steps.size()) != b || cond.rank() != 2 || cond.dim(0) != b ||
      cond.dim(1) != cfg_.cond_dim) {
    throw InputError("unet: steps/condition do not match the batch");
  }
  const Var<float> temb = nn::silu(time_mlp_(timestep_embedding<float>(steps, cfg_.time_dim)));
  const Var<float> cfeat = nn::silu(cond_mlp_(cond));
  const Var<float> x0 = in_conv_(z);
  const Var<float> e = run_block(enc_, x0, temb, cfeat);
  const Var<float> m = run_block(mid_, nn::silu(down_(e)), temb, cfeat);
  const Var<float> u = up_conv_(nn::upsample2x(m, h, w));
  const Var<float> d = run_block(dec_, nn::concat_channels(u, e), temb, cfeat);
  return out_conv_(nn::silu(d));
}

Denoiser<float> UNet::as_denoiser() const {
  return [this](const Var<float>& z, const std::vector<int>& steps, const Var<float>& cond) {
    return forward(z, steps, cond);
  };
}

void UNet::save(Bundle& b, const std::string& prefix) const {
  store_params(b, prefix, params_);
  auto& meta = b.metadata["unet"];
  meta["in_channels"] = cfg_.in_channels;
  meta["width"] = cfg_.width;
  meta["cond_dim"] = cfg_.cond_dim;
  meta["time_dim"] = cfg_.time_dim;
  meta["cond_hidden"] = cfg_.cond_hidden;
}

void UNet::load(const Bundle& b, const std::string& prefix) { load_params(b, prefix, params_); }

std::vector<int> sampler_steps(const NoiseSchedule& sched, int count) {
  if (count < 1) throw ConfigError("sampler needs at least one step");
  count = std::min(count, sched.N);
  std::vector<int> steps;
  for (int i = 1; i <= count; ++i) {
    steps.push_back(static_cast<int>(std::lround(static_cast<double>(i) * sched.N / count)));
  }
  steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
  return steps;
}

std::vector<LatentTensor> ddpm_sample(const Denoiser<float>& denoiser,
                                      const std::vector<std::vector<float>>& conds,
                                      const std::vector<std::uint64_t>& seeds,
                                      const NoiseSchedule& sched, int channels, int height,
                                      int width, const SamplerConfig& cfg) {
  if (conds.size() != seeds.size()) throw InputError("ddpm_sample: one seed per condition");
  if (channels < 1 || height < 1 || width < 1) throw InputError("ddpm_sample: bad latent shape");
  const int b = static_cast<int>(conds.size());
  if (b == 0) return {};
  const int d = static_cast<int>(conds[0].size());
  std::vector<float> cflat;
  for (const auto& c : conds) {
    if (static_cast<int>(c.size()) != d) throw InputError("ddpm_sample: ragged conditions");
    cflat.insert(cflat.end(), c.begin(), c.end());
  }
  const Var<float> cond = Var<float>::constant({b, d}, std::move(cflat));
  const std::size_t per = static_cast<std::size_t>(channels) * height * width;

  nn::NoGradGuard guard;
  std::vector<Rng> rngs;
  std::vector<float> z(per * b);
  for (int i = 0; i < b; ++i) {
    rngs.emplace_back(derive_seed(seeds[i], "ddpm-sample"));
    for (std::size_t j = 0; j < per; ++j) z[i * per + j] = static_cast<float>(rngs[i].normal());
  }
  const std::vector<int> steps = sampler_steps(sched, cfg.steps);
  for (int k = static_cast<int>(steps.size()) - 1; k >= 0; --k) {
    const int n = steps[k];
    const double ab = sched.alpha_bar_at(n);
    const double ab_prev = k > 0 ? sched.alpha_bar_at(steps[k - 1]) : 1.0;
    const double beta = 1.0 - ab / ab_prev;
    const Var<float> eps_hat =
        denoiser(Var<float>::constant({b, channels, height, width}, z), std::vector<int>(b, n), cond);
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double var = k > 0 ? beta * (1.0 - ab_prev) / (1.0 - ab) : 0.0;
    const double sd = std::sqrt(std::max(var, 0.0));
    for (int i = 0; i < b; ++i) {
      for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
        double x0 = (z[j] - std::sqrt(1.0 - ab) * eps_hat.data()[j]) / std::sqrt(ab);
        if (cfg.clip_x0 > 0.0) x0 = std::clamp(x0, -cfg.clip_x0, cfg.clip_x0);
        double next = c0 * x0 + ct * z[j];
        if (k > 0) next += sd * rngs[i].normal();
        z[j] = static_cast<float>(next);
      }
    }
  }
  std::vector<LatentTensor> out;
  for (int i = 0; i < b; ++i) {
    out.push_back(LatentTensor{channels, height, width,
                               std::vector<float>(z.begin() + i * per, z.begin() + (i + 1) * per)});
    for (float v : out.back().values) {
      if (!std::isfinite(v)) throw NumericalError("ddpm_sample produced a non-finite latent");
    }
  }
  return out;
}

LdmTrainer::LdmTrainer(UNet& unet, nn::ParamSet<float>* extra, const NoiseSchedule& sched,
                       LdmTrainConfig cfg)
    : unet_(unet),
      extra_(extra),
      sched_(sched),
      cfg_(cfg),
      unet_opt_(unet.params(), nn::AdamOptions{cfg.lr, 0.9, 0.999, 1e-8, 1.0}) {
  if (cfg_.batch_size < 1) throw ConfigError("ldm batch size must be >= 1");
  if (cfg_.cond_dropout < 0.0 || cfg_.cond_dropout > 1.0) {
    throw ConfigError("condition dropout must lie in [0, 1]");
  }
  if (extra_ != nullptr) {
    extra_opt_ = std::make_unique<nn::Adam<float>>(*extra_, nn::AdamOptions{cfg.extra_lr, 0.9, 0.999, 1e-8, 1.0});
  }
}

double LdmTrainer::step(std::span<const LatentTensor> latents, const ConditionFn& condition) {
  if (latents.empty()) throw InputError("ldm training: no latents");
  const std::int64_t s = steps_done();
  Rng rng(derive_seed(cfg_.seed, "ldm-step", static_cast<std::uint64_t>(s)));
  const int b = cfg_.batch_size;
  const LatentTensor& ref = latents.front();
  const std::size_t per = ref.size();
  std::vector<std::size_t> idx(b);
  std::vector<int> steps(b);
  std::vector<float> z0(per * b), eps(per * b), keep;
  for (int i = 0; i < b; ++i) {
    idx[i] = static_cast<std::size_t>(rng.below(latents.size()));
    steps[i] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched_.N)));
    const LatentTensor& z = latents[idx[i]];
    if (!z.same_shape(ref)) throw InputError("ldm training: latents differ in shape");
    std::copy(z.values.begin(), z.values.end(), z0.begin() + i * per);
    for (std::size_t j = 0; j < per; ++j) eps[i * per + j] = static_cast<float>(rng.normal());
  }
  Var<float> cond = condition(idx);
  last_conditioned_ = b;
  if (cfg_.cond_dropout > 0.0) {
    const int d = cond.dim(1);
    keep.assign(static_cast<std::size_t>(b) * d, 1.0F);
    last_conditioned_ = 0;
    for (int i = 0; i < b; ++i) {
      if (rng.uniform() < cfg_.cond_dropout) {
        std::fill(keep.begin() + i * d, keep.begin() + (i + 1) * d, 0.0F);
      } else {
        ++last_conditioned_;
      }
    }
    cond = nn::mul(cond, Var<float>::constant(cond.shape(), std::move(keep)));
  }
  const nn::Shape shape = {b, ref.channels, ref.height, ref.width};
  DiffusionBatch<float> batch{Var<float>::constant(shape, std::move(z0)), cond, steps,
                              Var<float>::constant(shape, std::move(eps))};
  unet_opt_.zero_grad();
  if (extra_opt_) extra_opt_->zero_grad();
  const Var<float> loss = training_loss<float>(batch, unet_.as_denoiser(), sched_);
  nn::backward(loss);
  unet_opt_.step();
  if (extra_opt_) extra_opt_->step();
  if (cfg_.log_every > 0 && (s + 1) % cfg_.log_every == 0) {
    std::cerr << "[ldm] step " << s + 1 << " loss " << loss.item() << '\n';
  }
  return loss.item();
}

void LdmTrainer::save_state(Bundle& b, const std::string& prefix) const {
  store_optimizer(b, prefix + "unet.", unet_opt_);
  if (extra_opt_) store_optimizer(b, prefix + "extra.", *extra_opt_);
}

void LdmTrainer::load_state(const Bundle& b, const std::string& prefix) {
  load_optimizer(b, prefix + "unet.", unet_opt_);
  if (extra_opt_) load_optimizer(b, prefix + "extra.", *extra_opt_);
}

double ldm_eval_loss(const UNet& unet, std::span<const LatentTensor> latents,
                     const ConditionFn& condition, const NoiseSchedule& sched, std::uint64_t seed,
                     int batch_size) {
  if (latents.empty()) throw InputError("ldm_eval_loss: no latents");
  nn::NoGradGuard guard;
  const LatentTensor& ref = latents.front();
  const std::size_t per = ref.size();
  double total = 0.0;
  for (std::size_t start = 0; start < latents.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min(latents.size(), start + batch_size) - start;
    std::vector<std::size_t> idx(n);
    std::vector<int> steps(n);
    std::vector<float> z0(per * n), eps(per * n);
    for (std::size_t i = 0; i < n; ++i) {
      idx[i] = start + i;
      Rng rng(derive_seed(seed, "ldm-eval", static_cast<std::uint64_t>(start + i)));
      steps[i] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.N)));
      std::copy(latents[idx[i]].values.begin(), latents[idx[i]].values.end(), z0.begin() + i * per);
      for (std::size_t j = 0; j < per; ++j) eps[i * per + j] = static_cast<float>(rng.normal());
    }
    const nn::Shape shape = {static_cast<int>(n), ref.channels, ref.height, ref.width};
    DiffusionBatch<float> batch{Var<float>::constant(shape, std::move(z0)), condition(idx), steps,
                                Var<float>::constant(shape, std::move(eps))};
    total += training_loss<float>(batch, unet.as_denoiser(), sched).item() * static_cast<double>(n);
  }
  return total / static_cast<double>(latents.size());
}

}  // namespace flab
