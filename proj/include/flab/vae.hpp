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
#include <span>
#include <string>
#include <vector>

#include "flab/checkpoint.hpp"
#include "flab/frontend.hpp"
#include "flab/nn/layers.hpp"

namespace flab {

// channels x height x width, row-major.
struct LatentTensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> values;

  std::size_t size() const { return values.size(); }
  bool same_shape(const LatentTensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

struct VaeConfig {
  int n_mels = 64;
  int frames = 394;
  int latent_channels = 4;
  int hidden = 16;
  int compression = 4;  // power of two; one stride-2 stage per factor of two
  double kl_weight = 1e-4;

  void validate() const;
  int stages() const;
  int padded_mels() const;
  int padded_frames() const;
  int latent_height() const { return padded_mels() / compression; }
  int latent_width() const { return padded_frames() / compression; }
};

class MelVae {
 public:
  MelVae(VaeConfig cfg, StftConfig frontend, std::uint64_t seed);

  const VaeConfig& config() const { return cfg_; }
  const StftConfig& frontend() const { return frontend_; }
  nn::ParamSet<float>& params() { return params_; }

  // z = mu + exp(logvar / 2) * eps. With `sample` false, eps = 0.
  LatentTensor encode(const MelSpectrogram& m, bool sample = false, std::uint64_t seed = 0) const;
  std::vector<LatentTensor> encode(std::span<const MelSpectrogram> mels, bool sample = false,
                                   std::uint64_t seed = 0) const;
  // Cropped back to the configured frame count and clamped at the log floor.
  MelSpectrogram decode(const LatentTensor& z) const;
  std::vector<MelSpectrogram> decode(std::span<const LatentTensor> zs) const;

  // Normalised, padded network input [N, 1, H, W].
  nn::Var<float> prepare(std::span<const MelSpectrogram* const> mels) const;
  struct Posterior {
    nn::Var<float> mu, logvar;
  };
  Posterior encode_forward(const nn::Var<float>& x) const;
  // Output in normalised units, padded shape.
  nn::Var<float> decode_forward(const nn::Var<float>& z) const;

  void set_mel_normalization(double mean, double stddev);
  double mel_mean() const { return mel_mean_; }
  double mel_std() const { return mel_std_; }

  // Per-channel statistics applied before diffusion.
  void set_latent_stats(std::vector<float> mean, std::vector<float> stddev);
  const std::vector<float>& latent_mean() const { return latent_mean_; }
  const std::vector<float>& latent_std() const { return latent_std_; }
  LatentTensor standardize(LatentTensor z) const;
  LatentTensor destandardize(LatentTensor z) const;

  void save(Bundle& b, const std::string& prefix) const;
  void load(const Bundle& b, const std::string& prefix);

 private:
  void check_mel(const MelSpectrogram& m) const;
  void check_latent(const LatentTensor& z) const;

  VaeConfig cfg_;
  StftConfig frontend_;
  nn::ParamSet<float> params_;
  nn::Conv2d<float> enc_in_, enc_out_, dec_in_, dec_out_;
  std::vector<nn::Conv2d<float>> enc_down_;
  std::vector<nn::ConvTranspose2d<float>> dec_up_;
  double mel_mean_ = -5.0;
  double mel_std_ = 4.0;
  std::vector<float> latent_mean_, latent_std_;
};

struct VaeTrainConfig {
  int steps = 1500;
  int batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int log_every = 0;
};

struct VaeTrainReport {
  double init_val_mae = 0.0;  // log-mel units
  double final_val_mae = 0.0;
  std::vector<double> losses;
};

// Mean absolute reconstruction error (deterministic encode) in log-mel units.
double reconstruction_mae(const MelVae& vae, std::span<const MelSpectrogram> mels);

// Loss per mel element: (L1 + kl_weight * KL) averaged over the batch.
nn::Var<float> vae_loss(const MelVae& vae, std::span<const MelSpectrogram* const> batch,
                        std::uint64_t noise_seed);

// Also fits the mel normalisation (before training) and the latent
// standardisation statistics (after training) from `train`.
VaeTrainReport train_vae(MelVae& vae, std::span<const MelSpectrogram> train,
                         std::span<const MelSpectrogram> val, const VaeTrainConfig& cfg);

void fit_latent_stats(MelVae& vae, std::span<const MelSpectrogram> mels);

}  // namespace flab
