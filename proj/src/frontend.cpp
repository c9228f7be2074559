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

#include "flab/frontend.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "flab/error.hpp"
#include "flab/fft.hpp"

namespace flab {

void StftConfig::validate() const {
  if (hop <= 0 || hop > window_len) {
    throw ConfigError("stft: require 0 < hop <= window_len");
  }
  if (n_mels < 1) throw ConfigError("stft: n_mels must be >= 1");
  if (sample_rate <= 0) throw ConfigError("stft: sample_rate must be positive");
  if (!(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0)) {
    throw ConfigError("stft: require 0 <= fmin < fmax <= sample_rate/2");
  }
  if (!(log_floor > 0.0)) throw ConfigError("stft: log_floor must be positive");
}

int StftConfig::frames_for(std::size_t n_samples) const {
  if (n_samples < static_cast<std::size_t>(window_len)) {
    throw InputError("clip of " + std::to_string(n_samples) +
                     " samples is shorter than one window (" +
                     std::to_string(window_len) + ")");
  }
  return 1 + static_cast<int>((n_samples - window_len) / hop);
}

double StftConfig::log_floor_value() const { return std::log(log_floor); }

std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  }
  return w;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Eigen::MatrixXd mel_filterbank(const StftConfig& cfg) {
  cfg.validate();
  const int n_freq = cfg.n_freq();
  const double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.window_len;
  const double lo = hz_to_mel(cfg.fmin);
  const double hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / (cfg.n_mels + 1));
  }
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(cfg.n_mels, n_freq);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], centre = edges[m + 1], right = edges[m + 2];
    for (int k = 0; k < n_freq; ++k) {
      const double f = k * bin_hz;
      double w = 0.0;
      if (f > left && f <= centre) {
        w = (f - left) / (centre - left);
      } else if (f > centre && f < right) {
        w = (right - f) / (right - centre);
      }
      fb(m, k) = w;
    }
    // Filters narrower than a bin would otherwise be empty.
    if (fb.row(m).sum() <= 0.0) {
      const int k = std::clamp(static_cast<int>(std::lround(centre / bin_hz)), 0, n_freq - 1);
      fb(m, k) = 1.0;
    }
  }
  return fb;
}

Spectrum stft(std::span<const double> samples, const StftConfig& cfg) {
  cfg.validate();
  const int frames = cfg.frames_for(samples.size());
  const RealFft fft(cfg.window_len);
  const auto window = hann_window(cfg.window_len);
  Spectrum spec;
  spec.frames = frames;
  spec.n_freq = cfg.n_freq();
  spec.bins.resize(static_cast<std::size_t>(frames) * spec.n_freq);
  std::vector<double> buf(static_cast<std::size_t>(cfg.window_len));
  for (int t = 0; t < frames; ++t) {
    const std::size_t start = static_cast<std::size_t>(t) * cfg.hop;
    for (int i = 0; i < cfg.window_len; ++i) buf[i] = samples[start + i] * window[i];
    fft.forward(buf, std::span(spec.bins).subspan(static_cast<std::size_t>(t) * spec.n_freq,
                                                  static_cast<std::size_t>(spec.n_freq)));
  }
  return spec;
}

std::vector<double> istft(const Spectrum& spec, const StftConfig& cfg) {
  const RealFft fft(cfg.window_len);
  const auto window = hann_window(cfg.window_len);
  std::vector<double> out(cfg.samples_for(spec.frames), 0.0);
  std::vector<double> norm(out.size(), 0.0);
  std::vector<double> buf(static_cast<std::size_t>(cfg.window_len));
  for (int t = 0; t < spec.frames; ++t) {
    fft.inverse(std::span(spec.bins).subspan(static_cast<std::size_t>(t) * spec.n_freq,
                                             static_cast<std::size_t>(spec.n_freq)),
                buf);
    const std::size_t start = static_cast<std::size_t>(t) * cfg.hop;
    for (int i = 0; i < cfg.window_len; ++i) {
      out[start + i] += buf[i] * window[i];
      norm[start + i] += window[i] * window[i];
    }
  }
  // Near the ends only a taper covers each sample; bounding the divisor keeps
  // inconsistent spectra from blowing up there.
  const double norm_floor = 0.1 * *std::max_element(norm.begin(), norm.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= std::max(norm[i], norm_floor);
  return out;
}

Eigen::MatrixXd magnitude(const Spectrum& spec) {
  Eigen::MatrixXd mag(spec.n_freq, spec.frames);
  for (int t = 0; t < spec.frames; ++t) {
    for (int k = 0; k < spec.n_freq; ++k) mag(k, t) = std::abs(spec.at(t, k));
  }
  return mag;
}

MelSpectrogram mel_from_magnitude(const Eigen::MatrixXd& mag, const StftConfig& cfg) {
  const Eigen::MatrixXd fb = mel_filterbank(cfg);
  if (mag.rows() != fb.cols()) throw InputError("magnitude rows do not match n_freq");
  const Eigen::MatrixXd mel = fb * mag;
  MelSpectrogram out;
  out.n_mels = cfg.n_mels;
  out.frames = static_cast<int>(mag.cols());
  out.config = cfg;
  out.values.resize(static_cast<std::size_t>(out.n_mels) * out.frames);
  for (int m = 0; m < out.n_mels; ++m) {
    for (int t = 0; t < out.frames; ++t) {
      out.at(m, t) = static_cast<float>(std::log(std::max(mel(m, t), cfg.log_floor)));
    }
  }
  return out;
}

MelSpectrogram wav_to_mel(const Waveform& w, const StftConfig& cfg) {
  if (w.sample_rate != cfg.sample_rate) {
    throw InputError("sample rate " + std::to_string(w.sample_rate) +
                     " does not match frontend rate " + std::to_string(cfg.sample_rate));
  }
  std::vector<double> x(w.samples.begin(), w.samples.end());
  return mel_from_magnitude(magnitude(stft(x, cfg)), cfg);
}

}  // namespace flab
