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
#include <vector>

#include <Eigen/Core>

#include "flab/frontend.hpp"
#include "flab/wav.hpp"

namespace flab {

struct VocoderConfig {
  int n_iters = 32;
  StftConfig stft;
};

// Mel pseudo-inverse followed by Griffin-Lim phase recovery.
class Vocoder {
 public:
  explicit Vocoder(VocoderConfig cfg);

  const VocoderConfig& config() const { return cfg_; }
  // n_freq x n_mels
  const Eigen::MatrixXd& pseudo_inverse() const { return pinv_; }

  // Linear magnitude estimate [bin][frame], clamped at zero.
  Eigen::MatrixXd mel_to_magnitude(const MelSpectrogram& m) const;

  // Length frames * hop + window - hop; peaks above 0.95 are scaled down.
  // The initial phase is drawn from `seed`. When `convergence` is given it
  // receives the spectral convergence after every iteration.
  Waveform mel_to_wav(const MelSpectrogram& m, std::uint64_t seed,
                      std::vector<double>* convergence = nullptr) const;

  // Griffin-Lim on a known magnitude.
  std::vector<double> griffin_lim(const Eigen::MatrixXd& magnitude, std::uint64_t seed,
                                  std::vector<double>* convergence = nullptr) const;

 private:
  VocoderConfig cfg_;
  Eigen::MatrixXd pinv_;
};

// ||(|STFT x| - target)||_F / ||target||_F
double spectral_convergence(std::span<const double> x, const Eigen::MatrixXd& target,
                            const StftConfig& cfg);

}  // namespace flab
