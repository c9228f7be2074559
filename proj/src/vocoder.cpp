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

#include "flab/vocoder.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/SVD>

#include "flab/error.hpp"
#include "flab/rng.hpp"

namespace flab {

Vocoder::Vocoder(VocoderConfig cfg) : cfg_(cfg) {
  if (cfg_.n_iters < 1) throw ConfigError("vocoder needs at least one iteration");
  cfg_.stft.validate();
  const Eigen::MatrixXd fb = mel_filterbank(cfg_.stft);
  pinv_ = fb.completeOrthogonalDecomposition().pseudoInverse();
}

Eigen::MatrixXd Vocoder::mel_to_magnitude(const MelSpectrogram& m) const {
  if (m.n_mels != cfg_.stft.n_mels) throw InputError("vocoder: mel bins do not match the STFT config");
  if (m.frames < 1) throw InputError("vocoder: empty mel");
  const double floor_v = cfg_.stft.log_floor_value();
  Eigen::MatrixXd lin(m.n_mels, m.frames);
  for (int r = 0; r < m.n_mels; ++r) {
    for (int f = 0; f < m.frames; ++f) {
      const double v = m.at(r, f);
      if (!std::isfinite(v)) throw InputError("vocoder: non-finite mel value");
      lin(r, f) = v > floor_v + 1e-6 ? std::exp(v) : 0.0;
    }
  }
  return (pinv_ * lin).cwiseMax(0.0);
}

double spectral_convergence(std::span<const double> x, const Eigen::MatrixXd& target,
                            const StftConfig& cfg) {
  const Eigen::MatrixXd mag = magnitude(stft(x, cfg));
  const double denom = target.norm();
  return denom > 0.0 ? (mag - target).norm() / denom : mag.norm();
}

std::vector<double> Vocoder::griffin_lim(const Eigen::MatrixXd& mag, std::uint64_t seed,
                                         std::vector<double>* convergence) const {
  const StftConfig& sc = cfg_.stft;
  if (mag.rows() != sc.n_freq()) throw InputError("griffin_lim: magnitude rows must equal n_freq");
  const int frames = static_cast<int>(mag.cols());
  Spectrum spec;
  spec.frames = frames;
  spec.n_freq = sc.n_freq();
  spec.bins.resize(static_cast<std::size_t>(frames) * spec.n_freq);
  Rng rng(derive_seed(seed, "griffin-lim"));
  for (int f = 0; f < frames; ++f) {
    for (int k = 0; k < spec.n_freq; ++k) {
      spec.at(f, k) = std::polar(mag(k, f), 2.0 * std::numbers::pi * rng.uniform());
    }
  }
  std::vector<double> x = istft(spec, sc);
  if (convergence != nullptr) convergence->clear();
  for (int it = 0; it < cfg_.n_iters; ++it) {
    Spectrum est = stft(x, sc);
    for (int f = 0; f < frames; ++f) {
      for (int k = 0; k < spec.n_freq; ++k) {
        const std::complex<double> c = est.at(f, k);
        const double a = std::abs(c);
        spec.at(f, k) = a > 1e-12 ? c * (mag(k, f) / a) : std::complex<double>(mag(k, f), 0.0);
      }
    }
    x = istft(spec, sc);
    if (convergence != nullptr) convergence->push_back(spectral_convergence(x, mag, sc));
  }
  return x;
}

Waveform Vocoder::mel_to_wav(const MelSpectrogram& m, std::uint64_t seed,
                             std::vector<double>* convergence) const {
  const std::vector<double> x = griffin_lim(mel_to_magnitude(m), seed, convergence);
  Waveform w;
  w.sample_rate = cfg_.stft.sample_rate;
  w.samples.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw NumericalError("vocoder produced a non-finite sample");
    w.samples[i] = static_cast<float>(x[i]);
  }
  limit_peak(w, 0.95F);
  return w;
}

}  // namespace flab
