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

#include "flab/vae.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <iostream>

#include "flab/error.hpp"
#include "flab/nn/adam.hpp"
#include "flab/nn/ops.hpp"
#include "flab/rng.hpp"

namespace flab {

using nn::Var;

void VaeConfig::validate() const {
  if (n_mels < 1 || frames < 1) throw ConfigError("vae: mel shape must be positive");
  if (latent_channels < 1 || hidden < 1) throw ConfigError("vae: channel counts must be positive");
  if (compression < 2 || !std::has_single_bit(static_cast<unsigned>(compression))) {
    throw ConfigError("vae: compression must be a power of two >= 2");
  }
  if (!(kl_weight >= 0.0)) throw ConfigError("vae: kl_weight must be >= 0");
}

int VaeConfig::stages() const { return std::countr_zero(static_cast<unsigned>(compression)); }

int VaeConfig::padded_mels() const { return (n_mels + compression - 1) / compression * compression; }

int VaeConfig::padded_frames() const {
  return (frames + compression - 1) / compression * compression;
}

MelVae::MelVae(VaeConfig cfg, StftConfig frontend, std::uint64_t seed)
    : cfg_(cfg), frontend_(frontend) {
  cfg_.validate();
  if (frontend_.n_mels != cfg_.n_mels) throw ConfigError("vae: n_mels differs from the frontend");
  Rng rng(derive_seed(seed, "vae-init"));
  const int h = cfg_.hidden, c = cfg_.latent_channels;
  enc_in_ = nn::Conv2d<float>(params_, "enc.in", 1, h, 3, 1, 1, rng);
  for (int s = 0; s < cfg_.stages(); ++s) {
    enc_down_.emplace_back(params_, "enc.down" + std::to_string(s), h, h, 4, 2, 1, rng);
  }
  enc_out_ = nn::Conv2d<float>(params_, "enc.out", h, 2 * c, 3, 1, 1, rng);
  dec_in_ = nn::Conv2d<float>(params_, "dec.in", c, h, 3, 1, 1, rng);
  for (int s = 0; s < cfg_.stages(); ++s) {
    dec_up_.emplace_back(params_, "dec.up" + std::to_string(s), h, h, 4, 2, 1, rng);
  }
  dec_out_ = nn::Conv2d<float>(params_, "dec.out", h, 1, 3, 1, 1, rng);
  latent_mean_.assign(static_cast<std::size_t>(c), 0.0F);
  latent_std_.assign(static_cast<std::size_t>(c), 1.0F);
}

void MelVae::check_mel(const MelSpectrogram& m) const {
  if (m.n_mels != cfg_.n_mels || m.frames != cfg_.frames) {
    throw InputError("vae: mel shape (" + std::to_string(m.n_mels) + ", " +
                     std::to_string(m.frames) + ") does not match (" + std::to_string(cfg_.n_mels) +
                     ", " + std::to_string(cfg_.frames) + ")");
  }
  for (float v : m.values) {
    if (!std::isfinite(v)) throw InputError("vae: non-finite mel input");
  }
}

void MelVae::check_latent(const LatentTensor& z) const {
  if (z.channels != cfg_.latent_channels || z.height != cfg_.latent_height() ||
      z.width != cfg_.latent_width() || z.values.size() != nn::numel({z.channels, z.height, z.width})) {
    throw InputError("vae: latent shape (" + std::to_string(z.channels) + ", " +
                     std::to_string(z.height) + ", " + std::to_string(z.width) +
                     ") does not match (" + std::to_string(cfg_.latent_channels) + ", " +
                     std::to_string(cfg_.latent_height()) + ", " +
                     std::to_string(cfg_.latent_width()) + ")");
  }
}

Var<float> MelVae::prepare(std::span<const MelSpectrogram* const> mels) const {
  const int n = static_cast<int>(mels.size());
  const int ph = cfg_.padded_mels(), pw = cfg_.padded_frames();
  const float pad = static_cast<float>((frontend_.log_floor_value() - mel_mean_) / mel_std_);
  std::vector<float> x(static_cast<std::size_t>(n) * ph * pw, pad);
  for (int i = 0; i < n; ++i) {
    check_mel(*mels[i]);
    for (int r = 0; r < cfg_.n_mels; ++r) {
      for (int f = 0; f < cfg_.frames; ++f) {
        x[(static_cast<std::size_t>(i) * ph + r) * pw + f] =
            static_cast<float>((mels[i]->at(r, f) - mel_mean_) / mel_std_);
      }
    }
  }
  return Var<float>::constant({n, 1, ph, pw}, std::move(x));
}

MelVae::Posterior MelVae::encode_forward(const Var<float>& x) const {
  Var<float> h = nn::silu(enc_in_(x));
  for (const auto& d : enc_down_) h = nn::silu(d(h));
  const Var<float> out = enc_out_(h);
  const int c = cfg_.latent_channels;
  return {nn::slice_channels(out, 0, c), nn::slice_channels(out, c, c)};
}

Var<float> MelVae::decode_forward(const Var<float>& z) const {
  Var<float> h = nn::silu(dec_in_(z));
  for (const auto& u : dec_up_) h = nn::silu(u(h));
  return dec_out_(h);
}

std::vector<LatentTensor> MelVae::encode(std::span<const MelSpectrogram> mels, bool sample,
                                         std::uint64_t seed) const {
  nn::NoGradGuard guard;
  std::vector<LatentTensor> out;
  out.reserve(mels.size());
  const int c = cfg_.latent_channels, lh = cfg_.latent_height(), lw = cfg_.latent_width();
  const std::size_t per = static_cast<std::size_t>(c) * lh * lw;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < mels.size(); start += kChunk) {
    std::vector<const MelSpectrogram*> ptrs;
    for (std::size_t i = start; i < std::min(mels.size(), start + kChunk); ++i) ptrs.push_back(&mels[i]);
    const Posterior post = encode_forward(prepare(ptrs));
    for (std::size_t k = 0; k < ptrs.size(); ++k) {
      LatentTensor z{c, lh, lw, std::vector<float>(per)};
      const float* mu = post.mu.data() + k * per;
      const float* lv = post.logvar.data() + k * per;
      if (sample) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(start + k)));
        for (std::size_t j = 0; j < per; ++j) {
          z.values[j] = mu[j] + std::exp(0.5F * lv[j]) * static_cast<float>(rng.normal());
        }
      } else {
        std::copy(mu, mu + per, z.values.begin());
      }
      out.push_back(std::move(z));
    }
  }
  return out;
}

LatentTensor MelVae::encode(const MelSpectrogram& m, bool sample, std::uint64_t seed) const {
  return encode(std::span<const MelSpectrogram>(&m, 1), sample, seed).front();
}

std::vector<MelSpectrogram> MelVae::decode(std::span<const LatentTensor> zs) const {
  nn::NoGradGuard guard;
  std::vector<MelSpectrogram> out;
  out.reserve(zs.size());
  const int c = cfg_.latent_channels, lh = cfg_.latent_height(), lw = cfg_.latent_width();
  const int ph = cfg_.padded_mels(), pw = cfg_.padded_frames();
  const std::size_t per = static_cast<std::size_t>(c) * lh * lw;
  const float floor_v = static_cast<float>(frontend_.log_floor_value());
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < zs.size(); start += kChunk) {
    const std::size_t n = std::min(zs.size(), start + kChunk) - start;
    std::vector<float> x(n * per);
    for (std::size_t k = 0; k < n; ++k) {
      check_latent(zs[start + k]);
      std::copy(zs[start + k].values.begin(), zs[start + k].values.end(), x.begin() + k * per);
    }
    const Var<float> y = decode_forward(Var<float>::constant({static_cast<int>(n), c, lh, lw}, std::move(x)));
    for (std::size_t k = 0; k < n; ++k) {
      MelSpectrogram m;
      m.n_mels = cfg_.n_mels;
      m.frames = cfg_.frames;
      m.config = frontend_;
      m.values.resize(static_cast<std::size_t>(m.n_mels) * m.frames);
      for (int r = 0; r < m.n_mels; ++r) {
        for (int f = 0; f < m.frames; ++f) {
          const float v = y.data()[(k * ph + r) * pw + f];
          const float mel = static_cast<float>(v * mel_std_ + mel_mean_);
          m.at(r, f) = std::isfinite(mel) ? std::max(mel, floor_v) : floor_v;
        }
      }
      out.push_back(std::move(m));
    }
  }
  return out;
}

MelSpectrogram MelVae::decode(const LatentTensor& z) const {
  return decode(std::span<const LatentTensor>(&z, 1)).front();
}

void MelVae::set_mel_normalization(double mean, double stddev) {
  if (!(stddev > 0.0) || !std::isfinite(mean)) throw InputError("vae: bad mel normalisation");
  mel_mean_ = mean;
  mel_std_ = stddev;
}

void MelVae::set_latent_stats(std::vector<float> mean, std::vector<float> stddev) {
  const auto c = static_cast<std::size_t>(cfg_.latent_channels);
  if (mean.size() != c || stddev.size() != c) throw InputError("vae: latent stats size mismatch");
  for (float s : stddev) {
    if (!(s > 0.0F)) throw InputError("vae: latent stddev must be positive");
  }
  latent_mean_ = std::move(mean);
  latent_std_ = std::move(stddev);
}

LatentTensor MelVae::standardize(LatentTensor z) const {
  check_latent(z);
  const std::size_t plane = static_cast<std::size_t>(z.height) * z.width;
  for (std::size_t i = 0; i < z.values.size(); ++i) {
    const std::size_t ch = i / plane;
    z.values[i] = (z.values[i] - latent_mean_[ch]) / latent_std_[ch];
  }
  return z;
}

LatentTensor MelVae::destandardize(LatentTensor z) const {
  check_latent(z);
  const std::size_t plane = static_cast<std::size_t>(z.height) * z.width;
  for (std::size_t i = 0; i < z.values.size(); ++i) {
    const std::size_t ch = i / plane;
    z.values[i] = z.values[i] * latent_std_[ch] + latent_mean_[ch];
  }
  return z;
}

void MelVae::save(Bundle& b, const std::string& prefix) const {
  store_params(b, prefix, params_);
  const auto c = static_cast<std::int64_t>(cfg_.latent_channels);
  b.arrays[prefix + "latent_mean"] = make_array({c}, latent_mean_);
  b.arrays[prefix + "latent_std"] = make_array({c}, latent_std_);
  auto& meta = b.metadata["vae"];
  meta["n_mels"] = cfg_.n_mels;
  meta["frames"] = cfg_.frames;
  meta["latent_channels"] = cfg_.latent_channels;
  meta["hidden"] = cfg_.hidden;
  meta["compression"] = cfg_.compression;
  meta["kl_weight"] = cfg_.kl_weight;
  meta["mel_mean"] = mel_mean_;
  meta["mel_std"] = mel_std_;
}

void MelVae::load(const Bundle& b, const std::string& prefix) {
  load_params(b, prefix, params_);
  set_latent_stats(b.at(prefix + "latent_mean").data, b.at(prefix + "latent_std").data);
  const auto& meta = b.metadata.at("vae");
  set_mel_normalization(meta.at("mel_mean").get<double>(), meta.at("mel_std").get<double>());
}

double reconstruction_mae(const MelVae& vae, std::span<const MelSpectrogram> mels) {
  if (mels.empty()) throw InputError("reconstruction_mae: no clips");
  const auto z = vae.encode(mels);
  const auto rec = vae.decode(z);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mels.size(); ++i) {
    for (std::size_t j = 0; j < mels[i].values.size(); ++j) {
      acc += std::abs(static_cast<double>(mels[i].values[j]) - rec[i].values[j]);
    }
    n += mels[i].values.size();
  }
  return acc / static_cast<double>(n);
}

Var<float> vae_loss(const MelVae& vae, std::span<const MelSpectrogram* const> batch,
                    std::uint64_t noise_seed) {
  const Var<float> x = vae.prepare(batch);
  const MelVae::Posterior post = vae.encode_forward(x);
  std::vector<float> eps(post.mu.size());
  Rng rng(noise_seed);
  for (float& e : eps) e = static_cast<float>(rng.normal());
  const Var<float> z = nn::add(
      post.mu, nn::mul(nn::exp(nn::scale(post.logvar, 0.5F)),
                       Var<float>::constant(post.mu.shape(), std::move(eps))));
  const Var<float> rec = nn::abs_error_sum(vae.decode_forward(z), x);
  const Var<float> kl = nn::gaussian_kl(post.mu, post.logvar);
  const float denom = static_cast<float>(x.size());
  return nn::scale(nn::add(rec, nn::scale(kl, static_cast<float>(vae.config().kl_weight))),
                   1.0F / denom);
}

void fit_latent_stats(MelVae& vae, std::span<const MelSpectrogram> mels) {
  if (mels.empty()) throw InputError("fit_latent_stats: no clips");
  const auto zs = vae.encode(mels);
  const int c = vae.config().latent_channels;
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  const std::size_t plane = static_cast<std::size_t>(zs[0].height) * zs[0].width;
  for (const auto& z : zs) {
    for (std::size_t i = 0; i < z.values.size(); ++i) {
      const double v = z.values[i];
      sum[i / plane] += v;
      sq[i / plane] += v * v;
    }
  }
  const double n = static_cast<double>(plane * zs.size());
  std::vector<float> mean(c), sd(c);
  for (int ch = 0; ch < c; ++ch) {
    const double m = sum[ch] / n;
    mean[ch] = static_cast<float>(m);
    sd[ch] = static_cast<float>(std::sqrt(std::max(sq[ch] / n - m * m, 1e-8)));
  }
  vae.set_latent_stats(std::move(mean), std::move(sd));
}

VaeTrainReport train_vae(MelVae& vae, std::span<const MelSpectrogram> train,
                         std::span<const MelSpectrogram> val, const VaeTrainConfig& cfg) {
  if (train.empty()) throw InputError("train_vae: empty corpus");
  if (cfg.batch_size < 1) throw ConfigError("vae batch size must be >= 1");
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (const auto& m : train) {
    for (float v : m.values) {
      sum += v;
      sq += static_cast<double>(v) * v;
    }
    count += m.values.size();
  }
  const double mean = sum / static_cast<double>(count);
  vae.set_mel_normalization(mean, std::sqrt(std::max(sq / count - mean * mean, 1e-6)));

  VaeTrainReport report;
  if (!val.empty()) report.init_val_mae = reconstruction_mae(vae, val);
  nn::Adam<float> opt(vae.params(), nn::AdamOptions{cfg.lr, 0.9, 0.999, 1e-8, 5.0});
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  Rng order_rng(derive_seed(cfg.seed, "vae-order"));
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const MelSpectrogram*> batch;
    while (static_cast<int>(batch.size()) < std::min<int>(cfg.batch_size, static_cast<int>(train.size()))) {
      if (cursor == order.size()) {
        order_rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      batch.push_back(&train[order[cursor++]]);
    }
    opt.zero_grad();
    const Var<float> loss = vae_loss(vae, batch, derive_seed(cfg.seed, "vae-noise", static_cast<std::uint64_t>(step)));
    if (!std::isfinite(loss.item())) {
      throw NumericalError("vae loss became non-finite at step " + std::to_string(step));
    }
    nn::backward(loss);
    opt.step();
    report.losses.push_back(loss.item());
    if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
      std::cerr << "[vae] step " << step + 1 << " loss " << loss.item() << '\n';
    }
  }
  fit_latent_stats(vae, train);
  if (!val.empty()) report.final_val_mae = reconstruction_mae(vae, val);
  return report;
}

}  // namespace flab
