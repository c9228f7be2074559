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

#include "flab/wav.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "flab/error.hpp"

namespace flab {
namespace {

void put_u32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b = {static_cast<char>(v & 0xFF),
                                 static_cast<char>((v >> 8) & 0xFF),
                                 static_cast<char>((v >> 16) & 0xFF),
                                 static_cast<char>((v >> 24) & 0xFF)};
  out.write(b.data(), 4);
}

void put_u16(std::ofstream& out, std::uint16_t v) {
  const std::array<char, 2> b = {static_cast<char>(v & 0xFF),
                                 static_cast<char>((v >> 8) & 0xFF)};
  out.write(b.data(), 2);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace

void write_wav(const std::filesystem::path& path, const Waveform& w) {
  if (w.sample_rate <= 0) throw InputError("write_wav: sample rate must be positive");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  out.write("RIFF", 4);
  put_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out.write("data", 4);
  put_u32(out, data_bytes);
  std::vector<char> pcm(w.samples.size() * 2);
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    const float x = std::clamp(w.samples[i], -1.0F, 1.0F);
    const auto q = static_cast<std::int16_t>(std::lround(x * 32767.0F));
    const auto u = static_cast<std::uint16_t>(q);
    pcm[2 * i] = static_cast<char>(u & 0xFF);
    pcm[2 * i + 1] = static_cast<char>((u >> 8) & 0xFF);
  }
  out.write(pcm.data(), static_cast<std::streamsize>(pcm.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw IoError("not a RIFF/WAVE file: " + path.string());
  }
  Waveform w;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id(reinterpret_cast<const char*>(bytes.data() + pos), 4);
    const std::uint32_t size = get_u32(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw IoError("truncated chunk in " + path.string());
    if (id == "fmt ") {
      if (size < 16) throw IoError("short fmt chunk in " + path.string());
      const auto format = get_u16(bytes.data() + body);
      const auto channels = get_u16(bytes.data() + body + 2);
      const auto bits = get_u16(bytes.data() + body + 14);
      if (format != 1 || channels != 1 || bits != 16) {
        throw IoError("only mono 16-bit PCM is supported: " + path.string());
      }
      w.sample_rate = static_cast<int>(get_u32(bytes.data() + body + 4));
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw IoError("data before fmt in " + path.string());
      const std::size_t n = size / 2;
      w.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto u = get_u16(bytes.data() + body + 2 * i);
        w.samples[i] = static_cast<float>(static_cast<std::int16_t>(u)) / 32767.0F;
      }
      return w;
    }
    pos = body + size + (size & 1U);
  }
  throw IoError("no data chunk in " + path.string());
}

void limit_peak(Waveform& w, float peak) {
  float m = 0.0F;
  for (float x : w.samples) m = std::max(m, std::fabs(x));
  if (m > peak) {
    const float g = peak / m;
    for (float& x : w.samples) x *= g;
  }
}

double rms(const Waveform& w) {
  if (w.samples.empty()) return 0.0;
  double acc = 0.0;
  for (float x : w.samples) acc += static_cast<double>(x) * x;
  return std::sqrt(acc / static_cast<double>(w.samples.size()));
}

}  // namespace flab
