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

#include "flab/synthcorpus.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "flab/error.hpp"
#include "flab/fft.hpp"
#include "flab/parallel.hpp"
#include "flab/rng.hpp"

namespace flab {
namespace {

using json = nlohmann::json;
constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr float kPeak = 0.95F;

const std::map<SoundFamily, std::vector<std::string>>& required_params() {
  static const std::map<SoundFamily, std::vector<std::string>> table = {
      {SoundFamily::impulse_train, {"rate_hz", "center_hz", "decay_s", "jitter", "noise_mix"}},
      {SoundFamily::band_noise, {"center_hz", "bandwidth_hz"}},
      {SoundFamily::chirp, {"f_start_hz", "f_end_hz", "rate_hz", "sweep_s", "noise_mix"}},
      {SoundFamily::tonal_burst, {"f0_hz", "harmonics", "rate_hz", "burst_s"}},
      {SoundFamily::am_noise, {"center_hz", "mod_hz", "depth", "hum_hz", "engine_prob"}},
  };
  return table;
}

class ParamDraw {
 public:
  ParamDraw(const SoundClassSpec& spec, Rng& rng) : spec_(spec), rng_(rng) {}
  double operator()(const std::string& key) {
    const auto it = spec_.param_ranges.find(key);
    if (it == spec_.param_ranges.end()) {
      throw ConfigError("class " + spec_.name + " is missing parameter " + key);
    }
    return rng_.uniform(it->second.low, it->second.high);
  }

 private:
  const SoundClassSpec& spec_;
  Rng& rng_;
};

// White Gaussian noise shaped by a Gaussian band around centre_hz.
std::vector<double> band_noise(std::size_t n, int sr, double centre_hz, double bandwidth_hz,
                               Rng& rng) {
  std::vector<double> x(n);
  for (double& v : x) v = rng.normal();
  if (n < 2) return x;
  const RealFft fft(static_cast<int>(n));
  std::vector<std::complex<double>> spec(static_cast<std::size_t>(fft.bins()));
  fft.forward(x, spec);
  const double sd = std::max(bandwidth_hz / 2.0, 1.0);
  for (std::size_t k = 0; k < spec.size(); ++k) {
    const double f = static_cast<double>(k) * sr / static_cast<double>(n);
    const double z = (f - centre_hz) / sd;
    spec[k] *= std::exp(-0.5 * z * z);
  }
  fft.inverse(spec, x);
  double acc = 0.0;
  for (double v : x) acc += v * v;
  const double r = std::sqrt(acc / static_cast<double>(n));
  if (r > 0.0) {
    for (double& v : x) v /= r;
  }
  return x;
}

// Two-pole resonator, output scaled to unit RMS.
std::vector<double> resonate(std::vector<double> x, int sr, double centre_hz, double bw_hz) {
  const double r = std::exp(-std::numbers::pi * bw_hz / sr);
  const double c = 2.0 * r * std::cos(kTwoPi * centre_hz / sr);
  double y1 = 0.0, y2 = 0.0, acc = 0.0;
  for (double& v : x) {
    const double y = v + c * y1 - r * r * y2;
    y2 = y1;
    y1 = y;
    v = y;
    acc += y * y;
  }
  const double rms = std::sqrt(acc / std::max<std::size_t>(x.size(), 1));
  if (rms > 0.0) {
    for (double& v : x) v /= rms;
  }
  return x;
}

// Onset times (seconds) of a jittered periodic event stream.
std::vector<double> onsets(double rate_hz, double jitter, double duration_s, Rng& rng) {
  std::vector<double> out;
  const double period = 1.0 / std::max(rate_hz, 1e-3);
  // The first onset always lands inside the clip.
  double t = rng.uniform(0.0, std::min(period, 0.8 * duration_s));
  while (t < duration_s) {
    out.push_back(t);
    t += period * (1.0 + jitter * rng.uniform(-0.5, 0.5));
  }
  return out;
}

void impulse_train(std::vector<double>& out, int sr, ParamDraw& p, Rng& rng) {
  const double rate = p("rate_hz"), centre = p("center_hz"), decay = p("decay_s");
  const double jitter = p("jitter"), mix = p("noise_mix");
  const double dur = static_cast<double>(out.size()) / sr;
  for (double t0 : onsets(rate, jitter, dur, rng)) {
    const auto start = static_cast<std::size_t>(t0 * sr);
    const std::size_t len =
        std::min(out.size() - start, static_cast<std::size_t>(5.0 * decay * sr) + 1);
    std::vector<double> noise(len);
    for (double& v : noise) v = rng.normal();
    noise = resonate(std::move(noise), sr, centre, std::max(100.0, 0.3 * centre));
    const double amp = rng.uniform(0.6, 1.0);
    const double phase = rng.uniform(0.0, kTwoPi);
    for (std::size_t i = 0; i < len; ++i) {
      const double tau = static_cast<double>(i) / sr;
      const double env = std::exp(-tau / decay);
      const double tone = std::sin(kTwoPi * centre * tau + phase);
      out[start + i] += amp * env * (mix * noise[i] + (1.0 - mix) * tone);
    }
  }
}

void band_noise_family(std::vector<double>& out, int sr, ParamDraw& p, Rng& rng) {
  const double centre = p("center_hz"), bw = p("bandwidth_hz");
  const auto noise = band_noise(out.size(), sr, centre, bw, rng);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += noise[i];
}

void chirp(std::vector<double>& out, int sr, ParamDraw& p, Rng& rng) {
  const double f0 = p("f_start_hz"), f1 = p("f_end_hz"), rate = p("rate_hz");
  const double sweep = p("sweep_s"), mix = p("noise_mix");
  const double dur = static_cast<double>(out.size()) / sr;
  const auto noise =
      band_noise(out.size(), sr, 0.5 * (f0 + f1), std::fabs(f1 - f0) + 500.0, rng);
  for (double t0 : onsets(rate, 0.2, dur, rng)) {
    const auto start = static_cast<std::size_t>(t0 * sr);
    const std::size_t len =
        std::min(out.size() - start, static_cast<std::size_t>(sweep * sr) + 1);
    const double amp = rng.uniform(0.6, 1.0);
    double phase = rng.uniform(0.0, kTwoPi);
    for (std::size_t i = 0; i < len; ++i) {
      const double frac = static_cast<double>(i) / static_cast<double>(len);
      const double f = f0 + (f1 - f0) * frac;
      phase += kTwoPi * f / sr;
      const double env = 0.5 - 0.5 * std::cos(kTwoPi * frac);
      out[start + i] += amp * env * ((1.0 - mix) * std::sin(phase) + mix * noise[start + i]);
    }
  }
}

void tonal_burst(std::vector<double>& out, int sr, ParamDraw& p, Rng& rng) {
  const double f0 = p("f0_hz"), rate = p("rate_hz"), burst = p("burst_s");
  const int harmonics = std::max(1, static_cast<int>(std::lround(p("harmonics"))));
  const double dur = static_cast<double>(out.size()) / sr;
  for (double t0 : onsets(rate, 0.3, dur, rng)) {
    const auto start = static_cast<std::size_t>(t0 * sr);
    const std::size_t len =
        std::min(out.size() - start, static_cast<std::size_t>(burst * sr) + 1);
    const double amp = rng.uniform(0.6, 1.0);
    std::vector<double> phases(static_cast<std::size_t>(harmonics));
    for (double& ph : phases) ph = rng.uniform(0.0, kTwoPi);
    double base_phase = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double tau = static_cast<double>(i) / sr;
      const double frac = static_cast<double>(i) / static_cast<double>(len);
      base_phase += kTwoPi * f0 * (1.0 - 0.1 * frac) / sr;
      const double attack = std::min(1.0, tau / 0.01);
      const double env = attack * std::exp(-3.0 * frac);
      double s = 0.0;
      for (int h = 1; h <= harmonics; ++h) {
        if (h * f0 >= 0.5 * sr) break;
        s += std::sin(h * base_phase + phases[h - 1]) / h;
      }
      out[start + i] += amp * env * s;
    }
  }
}

// Two sub-types: engine-like (strong hum, low noise band) and pass-by
// driving noise (weak hum, brighter band, swelling envelope).
void am_noise(std::vector<double>& out, int sr, ParamDraw& p, Rng& rng) {
  const double centre = p("center_hz"), mod = p("mod_hz"), depth = p("depth");
  const double hum = p("hum_hz"), engine_prob = p("engine_prob");
  const bool engine = rng.uniform() < engine_prob;
  const double dur = static_cast<double>(out.size()) / sr;
  const auto noise = engine ? band_noise(out.size(), sr, centre, centre, rng)
                            : band_noise(out.size(), sr, 2.5 * centre, 2.0 * centre, rng);
  const double hum_mix = engine ? 0.7 : 0.15;
  const double drift_phase = rng.uniform(0.0, kTwoPi);
  const double pass_t = rng.uniform(0.2, 0.8) * dur;
  const double pass_w = 0.3 * dur;
  double mod_phase = rng.uniform(0.0, kTwoPi);
  double hum_phase = rng.uniform(0.0, kTwoPi);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double t = static_cast<double>(i) / sr;
    const double m = mod * (1.0 + 0.2 * std::sin(kTwoPi * 0.25 * t + drift_phase));
    mod_phase += kTwoPi * m / sr;
    hum_phase += kTwoPi * hum / sr;
    const double am = 1.0 - depth + depth * (0.5 + 0.5 * std::sin(mod_phase));
    double h = 0.0;
    for (int k = 1; k <= 6; ++k) {
      if (k * hum >= 0.5 * sr) break;
      h += std::sin(k * hum_phase) / k;
    }
    const double z = (t - pass_t) / pass_w;
    const double swell = engine ? 1.0 : 0.3 + 0.7 * std::exp(-0.5 * z * z);
    out[i] += swell * am * ((1.0 - hum_mix) * noise[i] + hum_mix * h);
  }
}

SoundClassSpec make_spec(std::string name, SoundFamily family,
                         std::map<std::string, ParamRange> ranges, double duration_s) {
  SoundClassSpec s{std::move(name), family, std::move(ranges), duration_s};
  s.validate();
  return s;
}

}  // namespace

SoundFamily parse_family(std::string_view name) {
  if (name == "impulse_train") return SoundFamily::impulse_train;
  if (name == "band_noise") return SoundFamily::band_noise;
  if (name == "chirp") return SoundFamily::chirp;
  if (name == "tonal_burst") return SoundFamily::tonal_burst;
  if (name == "am_noise") return SoundFamily::am_noise;
  throw ConfigError("unknown sound family '" + std::string(name) + "'");
}

std::string_view family_name(SoundFamily f) {
  switch (f) {
    case SoundFamily::impulse_train: return "impulse_train";
    case SoundFamily::band_noise: return "band_noise";
    case SoundFamily::chirp: return "chirp";
    case SoundFamily::tonal_burst: return "tonal_burst";
    case SoundFamily::am_noise: return "am_noise";
  }
  return "?";
}

void SoundClassSpec::validate() const {
  if (name.empty()) throw ConfigError("sound class without a name");
  if (!(duration_s > 0.0)) throw ConfigError("class " + name + ": duration_s must be > 0");
  if (param_ranges.empty()) throw ConfigError("class " + name + ": no parameter ranges");
  for (const auto& [key, r] : param_ranges) {
    if (!(r.low <= r.high)) {
      throw ConfigError("class " + name + ": empty range for " + key);
    }
  }
  for (const auto& key : required_params().at(family)) {
    if (!param_ranges.contains(key)) {
      throw ConfigError("class " + name + " (" + std::string(family_name(family)) +
                        ") needs parameter " + key);
    }
  }
}

Waveform synth_clip(const SoundClassSpec& spec, std::uint64_t seed, int sample_rate) {
  spec.validate();
  if (sample_rate <= 0) throw ConfigError("sample rate must be positive");
  Rng rng(derive_seed(seed, "synth"));
  ParamDraw draw(spec, rng);
  std::vector<double> buf(
      static_cast<std::size_t>(std::llround(spec.duration_s * sample_rate)), 0.0);
  switch (spec.family) {
    case SoundFamily::impulse_train: impulse_train(buf, sample_rate, draw, rng); break;
    case SoundFamily::band_noise: band_noise_family(buf, sample_rate, draw, rng); break;
    case SoundFamily::chirp: chirp(buf, sample_rate, draw, rng); break;
    case SoundFamily::tonal_burst: tonal_burst(buf, sample_rate, draw, rng); break;
    case SoundFamily::am_noise: am_noise(buf, sample_rate, draw, rng); break;
  }
  double peak = 0.0;
  for (double v : buf) peak = std::max(peak, std::fabs(v));
  // Room tone about 50 dB below the peak.
  Rng bed(derive_seed(seed, "synth-bed"));
  const double bed_level = std::max(peak, 1e-3) * std::pow(10.0, -50.0 / 20.0);
  for (double& v : buf) v += bed_level * bed.normal();
  peak = 0.0;
  for (double v : buf) peak = std::max(peak, std::fabs(v));
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(buf.size());
  const double g = peak > 0.0 ? kPeak / peak : 0.0;
  for (std::size_t i = 0; i < buf.size(); ++i) {
    w.samples[i] = std::clamp(static_cast<float>(buf[i] * g), -kPeak, kPeak);
  }
  return w;
}

std::vector<SoundClassSpec> target_classes(double d) {
  using F = SoundFamily;
  return {
      make_spec("DogBark", F::tonal_burst,
                {{"f0_hz", {350, 600}}, {"harmonics", {4, 8}}, {"rate_hz", {1.2, 2.5}},
                 {"burst_s", {0.12, 0.25}}}, d),
      make_spec("Footstep", F::impulse_train,
                {{"rate_hz", {1.5, 2.5}}, {"center_hz", {150, 400}}, {"decay_s", {0.03, 0.06}},
                 {"jitter", {0.05, 0.2}}, {"noise_mix", {0.6, 0.9}}}, d),
      make_spec("GunShot", F::impulse_train,
                {{"rate_hz", {0.6, 1.2}}, {"center_hz", {800, 1500}}, {"decay_s", {0.15, 0.3}},
                 {"jitter", {0.0, 0.3}}, {"noise_mix", {0.85, 1.0}}}, d),
      make_spec("Keyboard", F::impulse_train,
                {{"rate_hz", {6, 12}}, {"center_hz", {2500, 4500}}, {"decay_s", {0.008, 0.02}},
                 {"jitter", {0.2, 0.5}}, {"noise_mix", {0.3, 0.6}}}, d),
      make_spec("MovingMotorVehicle", F::am_noise,
                {{"center_hz", {200, 700}}, {"mod_hz", {8, 30}}, {"depth", {0.3, 0.8}},
                 {"hum_hz", {40, 120}}, {"engine_prob", {0.5, 0.5}}}, d),
      make_spec("Rain", F::band_noise,
                {{"center_hz", {3000, 5500}}, {"bandwidth_hz", {2000, 4000}}}, d),
      make_spec("SneezeCough", F::chirp,
                {{"f_start_hz", {1500, 2500}}, {"f_end_hz", {300, 700}}, {"rate_hz", {0.8, 1.6}},
                 {"sweep_s", {0.2, 0.4}}, {"noise_mix", {0.5, 0.8}}}, d),
  };
}

std::vector<SoundClassSpec> pretrain_classes(double d) {
  using F = SoundFamily;
  auto impulse = [d](std::string n, ParamRange rate, ParamRange c, ParamRange decay,
                     ParamRange mix) {
    return make_spec(std::move(n), F::impulse_train,
                     {{"rate_hz", rate}, {"center_hz", c}, {"decay_s", decay},
                      {"jitter", {0.0, 0.3}}, {"noise_mix", mix}}, d);
  };
  auto band = [d](std::string n, ParamRange c, ParamRange bw) {
    return make_spec(std::move(n), F::band_noise, {{"center_hz", c}, {"bandwidth_hz", bw}}, d);
  };
  auto sweep = [d](std::string n, ParamRange f0, ParamRange f1, ParamRange rate, ParamRange s,
                   ParamRange mix) {
    return make_spec(std::move(n), F::chirp,
                     {{"f_start_hz", f0}, {"f_end_hz", f1}, {"rate_hz", rate}, {"sweep_s", s},
                      {"noise_mix", mix}}, d);
  };
  auto tone = [d](std::string n, ParamRange f0, ParamRange h, ParamRange rate, ParamRange b) {
    return make_spec(std::move(n), F::tonal_burst,
                     {{"f0_hz", f0}, {"harmonics", h}, {"rate_hz", rate}, {"burst_s", b}}, d);
  };
  auto am = [d](std::string n, ParamRange c, ParamRange mod, ParamRange depth, ParamRange hum,
                double engine) {
    return make_spec(std::move(n), F::am_noise,
                     {{"center_hz", c}, {"mod_hz", mod}, {"depth", depth}, {"hum_hz", hum},
                      {"engine_prob", {engine, engine}}}, d);
  };
  return {
      impulse("WoodKnock", {1, 3}, {500, 900}, {0.02, 0.05}, {0.2, 0.5}),
      impulse("Hammer", {1.5, 3}, {1500, 2500}, {0.05, 0.1}, {0.4, 0.7}),
      impulse("ClockTick", {2, 4}, {3000, 5000}, {0.005, 0.01}, {0.1, 0.3}),
      impulse("DoorSlam", {0.3, 0.7}, {80, 200}, {0.2, 0.4}, {0.7, 1.0}),
      band("Wind", {300, 800}, {300, 800}),
      band("Waterfall", {1500, 2500}, {1500, 3000}),
      band("SteamHiss", {5000, 7000}, {500, 1500}),
      band("OceanSurf", {700, 1200}, {800, 1600}),
      sweep("BirdChirp", {3000, 4000}, {5000, 6500}, {3, 6}, {0.05, 0.1}, {0.0, 0.1}),
      sweep("Siren", {600, 800}, {1200, 1600}, {0.5, 1.0}, {0.4, 0.8}, {0.0, 0.1}),
      sweep("Whistle", {1800, 2200}, {2500, 3000}, {0.8, 1.5}, {0.2, 0.4}, {0.0, 0.2}),
      sweep("Swoosh", {4000, 6000}, {500, 1000}, {1, 2}, {0.15, 0.3}, {0.7, 1.0}),
      tone("Doorbell", {600, 900}, {2, 4}, {0.8, 1.5}, {0.3, 0.5}),
      tone("CarHorn", {200, 350}, {6, 10}, {0.5, 1.5}, {0.3, 0.6}),
      tone("Beep", {900, 1500}, {1, 2}, {2, 4}, {0.05, 0.12}),
      tone("CatMeow", {500, 800}, {3, 6}, {0.6, 1.0}, {0.4, 0.7}),
      am("ElectricFan", {400, 800}, {2, 5}, {0.1, 0.3}, {100, 200}, 1.0),
      am("Train", {300, 600}, {3, 8}, {0.4, 0.8}, {50, 90}, 0.5),
      am("Helicopter", {500, 1000}, {10, 20}, {0.6, 0.9}, {20, 40}, 1.0),
      am("Crowd", {800, 1600}, {1, 3}, {0.2, 0.5}, {150, 250}, 0.0),
  };
}

std::vector<SoundClassSpec> load_class_specs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open class spec file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed class spec file " + path.string() + ": " + e.what());
  }
  std::vector<SoundClassSpec> specs;
  std::set<std::string> names;
  for (const auto& item : doc) {
    SoundClassSpec s;
    s.name = item.at("name").get<std::string>();
    s.family = parse_family(item.at("family").get<std::string>());
    s.duration_s = item.value("duration_s", 4.0);
    for (const auto& [key, range] : item.at("params").items()) {
      s.param_ranges[key] = ParamRange{range.at(0).get<double>(), range.at(1).get<double>()};
    }
    s.validate();
    if (!names.insert(s.name).second) throw ConfigError("duplicate class name " + s.name);
    specs.push_back(std::move(s));
  }
  return specs;
}

void save_class_specs(const std::filesystem::path& path,
                      const std::vector<SoundClassSpec>& specs) {
  json doc = json::array();
  for (const auto& s : specs) {
    json params = json::object();
    for (const auto& [key, r] : s.param_ranges) params[key] = {r.low, r.high};
    doc.push_back({{"name", s.name},
                   {"family", std::string(family_name(s.family))},
                   {"duration_s", s.duration_s},
                   {"params", params}});
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

LabelTable LabelTable::defaults() {
  return LabelTable(Rows{
      {"DogBark", "a dog bark"},
      {"Footstep", "footsteps on the floor"},
      {"GunShot", "a gun shot"},
      {"Keyboard", "Someone using keyboard"},
      {"MovingMotorVehicle", "a moving motor vehicle"},
      {"Rain", "rain falling"},
      {"SneezeCough", "someone sneezing and coughing"},
      {"WoodKnock", "someone knocking on wood"},
      {"Hammer", "a hammer hitting metal"},
      {"ClockTick", "a ticking clock"},
      {"DoorSlam", "a door slamming shut"},
      {"Wind", "wind blowing outside"},
      {"Waterfall", "water falling steadily"},
      {"SteamHiss", "a steam hiss"},
      {"OceanSurf", "ocean waves on the shore"},
      {"BirdChirp", "a small bird chirping"},
      {"Siren", "a police siren wailing"},
      {"Whistle", "someone whistling a tune"},
      {"Swoosh", "a fast swoosh"},
      {"Doorbell", "a doorbell ringing"},
      {"CarHorn", "a car horn honking"},
      {"Beep", "an electronic beep"},
      {"CatMeow", "a cat meowing"},
      {"ElectricFan", "an electric fan humming"},
      {"Train", "a train passing by"},
      {"Helicopter", "a helicopter flying overhead"},
      {"Crowd", "a crowd talking"},
  });
}

LabelTable LabelTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open label table " + path.string());
  Rows rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size()) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                        ": expected 'label<TAB>text'");
    }
    rows[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return LabelTable(std::move(rows));
}

void LabelTable::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# label\ttext\n";
  for (const auto& [label, text] : rows_) out << label << '\t' << text << '\n';
}

const std::string& LabelTable::text_for(std::string_view label) const {
  const auto it = rows_.find(label);
  if (it == rows_.end()) {
    throw LookupError("no wrapped text for label '" + std::string(label) + "'");
  }
  return it->second;
}

bool LabelTable::contains(std::string_view label) const { return rows_.find(label) != rows_.end(); }

std::string label_to_text(std::string_view label, const LabelTable& table) {
  return table.text_for(label);
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::pretrain: return "pretrain";
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::eval: return "eval";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "pretrain") return Split::pretrain;
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "eval") return Split::eval;
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

std::vector<std::string> CorpusManifest::class_names() const {
  std::vector<std::string> names;
  for (const auto& e : entries) {
    if (std::find(names.begin(), names.end(), e.class_name) == names.end()) {
      names.push_back(e.class_name);
    }
  }
  return names;
}

std::vector<const ManifestEntry*> CorpusManifest::of_class(std::string_view name) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.class_name == name) out.push_back(&e);
  }
  return out;
}

std::filesystem::path manifest_path(const std::filesystem::path& root, Split s) {
  return root / (std::string(split_name(s)) + ".jsonl");
}

void write_manifest(const std::filesystem::path& file, const CorpusManifest& m) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + file.string());
  for (const auto& e : m.entries) {
    json row = json::object();
    row["clip_id"] = e.clip_id;
    row["class"] = e.class_name;
    row["text"] = e.text;
    row["seed"] = e.seed;
    row["path"] = e.path;
    out << row.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + file.string());
}

CorpusManifest read_manifest(const std::filesystem::path& file, Split split) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open manifest " + file.string());
  CorpusManifest m;
  m.split = split;
  m.root = file.parent_path();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const json row = json::parse(line);
      m.entries.push_back(ManifestEntry{row.at("clip_id").get<std::string>(),
                                        row.at("class").get<std::string>(),
                                        row.at("text").get<std::string>(),
                                        row.at("seed").get<std::uint64_t>(),
                                        row.at("path").get<std::string>()});
    } catch (const json::exception& e) {
      throw IoError("malformed manifest line in " + file.string() + ": " + e.what());
    }
  }
  return m;
}

namespace {

struct PendingClip {
  const SoundClassSpec* spec;
  ManifestEntry entry;
};

void render(const std::vector<PendingClip>& clips, int sample_rate,
            const std::filesystem::path& out_dir) {
  parallel_for(clips.size(), [&](std::size_t i) {
    const auto& c = clips[i];
    write_wav(out_dir / c.entry.path, synth_clip(*c.spec, c.entry.seed, sample_rate));
  });
}

void prepare_dirs(const std::vector<SoundClassSpec>& specs, const std::filesystem::path& out_dir) {
  std::error_code ec;
  for (const auto& s : specs) {
    std::filesystem::create_directories(out_dir / "audio" / s.name, ec);
    if (ec) throw IoError("cannot create " + (out_dir / "audio" / s.name).string() + ": " + ec.message());
  }
}

void check_unique(const std::vector<SoundClassSpec>& specs) {
  std::set<std::string> names;
  for (const auto& s : specs) {
    s.validate();
    if (!names.insert(s.name).second) throw ConfigError("duplicate class name " + s.name);
  }
}

std::string clip_id(const std::string& cls, std::string_view tag, int index) {
  std::ostringstream os;
  os << cls << '-' << tag << '-';
  os.width(4);
  os.fill('0');
  os << index;
  return os.str();
}

}  // namespace

CorpusSplits build_corpus(const std::vector<SoundClassSpec>& specs, int n_per_class,
                          double split_ratio, std::uint64_t root_seed,
                          const LabelTable& table, int sample_rate,
                          const std::filesystem::path& out_dir) {
  if (n_per_class < 2) throw ConfigError("n_per_class must be >= 2");
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) {
    throw ConfigError("split_ratio must lie in (0, 1)");
  }
  check_unique(specs);
  prepare_dirs(specs, out_dir);
  const int n_train = static_cast<int>(std::floor(split_ratio * n_per_class));
  CorpusSplits out;
  out.train.split = Split::train;
  out.val.split = Split::val;
  out.train.root = out.val.root = out_dir;
  std::vector<PendingClip> pending;
  for (const auto& spec : specs) {
    const std::string text = table.text_for(spec.name);
    std::vector<int> order(static_cast<std::size_t>(n_per_class));
    for (int i = 0; i < n_per_class; ++i) order[i] = i;
    Rng rng(derive_seed(root_seed, "split", hash_tag(spec.name)));
    rng.shuffle(order.begin(), order.end());
    for (int rank = 0; rank < n_per_class; ++rank) {
      const int i = order[rank];
      ManifestEntry e;
      e.clip_id = clip_id(spec.name, "dev", i);
      e.class_name = spec.name;
      e.text = text;
      e.seed = derive_seed(root_seed, "dev", hash_tag(spec.name), static_cast<std::uint64_t>(i));
      e.path = "audio/" + spec.name + "/" + e.clip_id + ".wav";
      pending.push_back({&spec, e});
      (rank < n_train ? out.train : out.val).entries.push_back(std::move(e));
    }
  }
  auto by_id = [](const ManifestEntry& a, const ManifestEntry& b) { return a.clip_id < b.clip_id; };
  std::sort(out.train.entries.begin(), out.train.entries.end(), by_id);
  std::sort(out.val.entries.begin(), out.val.entries.end(), by_id);
  render(pending, sample_rate, out_dir);
  write_manifest(manifest_path(out_dir, Split::train), out.train);
  write_manifest(manifest_path(out_dir, Split::val), out.val);
  return out;
}

CorpusManifest build_split(const std::vector<SoundClassSpec>& specs, int n_per_class,
                           Split split, std::uint64_t root_seed, const LabelTable& table,
                           int sample_rate, const std::filesystem::path& out_dir) {
  if (n_per_class < 2) throw ConfigError("n_per_class must be >= 2");
  check_unique(specs);
  prepare_dirs(specs, out_dir);
  CorpusManifest m;
  m.split = split;
  m.root = out_dir;
  std::vector<PendingClip> pending;
  const std::string_view tag = split_name(split);
  for (const auto& spec : specs) {
    const std::string text = table.text_for(spec.name);
    for (int i = 0; i < n_per_class; ++i) {
      ManifestEntry e;
      e.clip_id = clip_id(spec.name, tag, i);
      e.class_name = spec.name;
      e.text = text;
      e.seed = derive_seed(root_seed, tag, hash_tag(spec.name), static_cast<std::uint64_t>(i));
      e.path = "audio/" + spec.name + "/" + e.clip_id + ".wav";
      pending.push_back({&spec, e});
      m.entries.push_back(std::move(e));
    }
  }
  render(pending, sample_rate, out_dir);
  write_manifest(manifest_path(out_dir, split), m);
  return m;
}

}  // namespace flab
