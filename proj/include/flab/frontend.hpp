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

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "flab/wav.hpp"

namespace flab {

// Analysis frontend. Frames start at sample 0 with no centre padding, so
// frames = 1 + floor((len - window_len) / hop).
struct StftConfig {
  int window_len = 1024;
  int hop = 160;
  int n_mels = 64;
  int sample_rate = 16000;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-5;

  void validate() const;
  int n_freq() const { return window_len / 2 + 1; }
  int frames_for(std::size_t n_samples) const;
  // Samples produced by overlap-add of `frames` frames.
  std::size_t samples_for(int frames) const {
    return static_cast<std::size_t>(frames) * hop + window_len - hop;
  }
  double log_floor_value() const;

  bool operator==(const StftConfig&) const = default;
};

// Log-magnitude mel spectrogram, row-major [mel][frame].
struct MelSpectrogram {
  int n_mels = 0;
  int frames = 0;
  std::vector<float> values;
  StftConfig config;

  float at(int mel, int frame) const {
    return values[static_cast<std::size_t>(mel) * frames + frame];
  }
  float& at(int mel, int frame) {
    return values[static_cast<std::size_t>(mel) * frames + frame];
  }
};

// Complex STFT, frame-major [frame][bin].
struct Spectrum {
  int frames = 0;
  int n_freq = 0;
  std::vector<std::complex<double>> bins;

  std::complex<double>& at(int frame, int bin) {
    return bins[static_cast<std::size_t>(frame) * n_freq + bin];
  }
  const std::complex<double>& at(int frame, int bin) const {
    return bins[static_cast<std::size_t>(frame) * n_freq + bin];
  }
};

std::vector<double> hann_window(int n);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular filters on the HTK mel scale, n_mels x n_freq.
Eigen::MatrixXd mel_filterbank(const StftConfig& cfg);

Spectrum stft(std::span<const double> samples, const StftConfig& cfg);
// Least-squares overlap-add inverse; output length cfg.samples_for(frames).
std::vector<double> istft(const Spectrum& spec, const StftConfig& cfg);

// Magnitudes |X| laid out [bin][frame].
Eigen::MatrixXd magnitude(const Spectrum& spec);

MelSpectrogram wav_to_mel(const Waveform& w, const StftConfig& cfg);
MelSpectrogram mel_from_magnitude(const Eigen::MatrixXd& mag, const StftConfig& cfg);

}  // namespace flab
