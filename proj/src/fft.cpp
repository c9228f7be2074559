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

#include "flab/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <utility>
#include <vector>

#include "flab/error.hpp"

namespace flab {
namespace {

struct PlanPair {
  fftw_plan forward;
  fftw_plan inverse;
};

// FFTW's planner is not thread-safe; execution with the new-array API is.
PlanPair plans_for(int n) {
  static std::mutex mu;
  static std::map<int, PlanPair> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<double> real(static_cast<std::size_t>(n));
  std::vector<fftw_complex> cplx(static_cast<std::size_t>(n / 2 + 1));
  const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
  PlanPair p{fftw_plan_dft_r2c_1d(n, real.data(), cplx.data(), flags),
             fftw_plan_dft_c2r_1d(n, cplx.data(), real.data(), flags)};
  if (p.forward == nullptr || p.inverse == nullptr) {
    throw NumericalError("FFTW failed to plan length " + std::to_string(n));
  }
  cache.emplace(n, p);
  return p;
}

}  // namespace

RealFft::RealFft(int n) : n_(n) {
  if (n < 2) throw InputError("FFT length must be at least 2");
  const PlanPair p = plans_for(n);
  forward_plan_ = p.forward;
  inverse_plan_ = p.inverse;
}

void RealFft::forward(std::span<const double> in,
                      std::span<std::complex<double>> out) const {
  if (static_cast<int>(in.size()) != n_ || static_cast<int>(out.size()) != bins()) {
    throw InputError("RealFft::forward: size mismatch");
  }
  // r2c leaves its input untouched, the cast is safe.
  fftw_execute_dft_r2c(static_cast<fftw_plan>(forward_plan_),
                       const_cast<double*>(in.data()),
                       reinterpret_cast<fftw_complex*>(out.data()));
}

void RealFft::inverse(std::span<const std::complex<double>> in,
                      std::span<double> out) const {
  if (static_cast<int>(in.size()) != bins() || static_cast<int>(out.size()) != n_) {
    throw InputError("RealFft::inverse: size mismatch");
  }
  // c2r overwrites its input.
  std::vector<std::complex<double>> scratch(in.begin(), in.end());
  fftw_execute_dft_c2r(static_cast<fftw_plan>(inverse_plan_),
                       reinterpret_cast<fftw_complex*>(scratch.data()), out.data());
  const double scale = 1.0 / n_;
  for (double& x : out) x *= scale;
}

}  // namespace flab
