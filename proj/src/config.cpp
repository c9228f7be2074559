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

#include "flab/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "flab/error.hpp"
#include "flab/rng.hpp"

namespace flab {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Drops a trailing comment, respecting quotes.
std::string strip_comment(std::string_view line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && quoted) {
      ++i;
    } else if (line[i] == '"') {
      quoted = !quoted;
    } else if (line[i] == '#' && !quoted) {
      return std::string(line.substr(0, i));
    }
  }
  return std::string(line);
}

std::string unquote(std::string_view v, const std::string& where) {
  if (v.size() < 2 || v.front() != '"' || v.back() != '"') {
    throw ConfigError(where + ": unterminated string");
  }
  std::string out;
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    if (v[i] == '\\' && i + 2 < v.size()) {
      ++i;
      out.push_back(v[i] == 'n' ? '\n' : v[i] == 't' ? '\t' : v[i]);
    } else {
      out.push_back(v[i]);
    }
  }
  return out;
}

bool is_list(std::string_view v) { return !v.empty() && v.front() == '['; }

// Numbers and booleans are written bare, everything else quoted.
bool is_plain(const std::string& v) {
  if (v == "true" || v == "false") return true;
  if (v.empty()) return false;
  char* end = nullptr;
  std::strtod(v.c_str(), &end);
  return end == v.c_str() + v.size() && v.find_first_of(" \t") == std::string::npos;
}

}  // namespace

std::string quote_config_string(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') {
      out.push_back('\\');
      out.push_back(c);
    } else if (c == '\n') {
      out += "\\n";
    } else if (c == '\t') {
      out += "\\t";
    } else {
      out.push_back(c);
    }
  }
  return out + "\"";
}

std::vector<std::string> parse_config_list(std::string_view value) {
  const std::string v = trim(value);
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') {
    throw ConfigError("expected a bracketed list, got '" + v + "'");
  }
  std::vector<std::string> items;
  std::string cur;
  bool quoted = false, any = false;
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    const char c = v[i];
    if (quoted) {
      if (c == '\\' && i + 2 < v.size()) {
        cur.push_back(v[++i]);
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      if (!any) cur = trim(cur);
      quoted = true;
      any = true;
    } else if (c == ',') {
      items.push_back(any ? cur : trim(cur));
      cur.clear();
      any = false;
    } else if (!(any && (c == ' ' || c == '\t'))) {
      cur.push_back(c);
    }
  }
  if (quoted) throw ConfigError("unterminated string in list '" + v + "'");
  const std::string last = any ? cur : trim(cur);
  if (!last.empty() || any || !items.empty()) items.push_back(last);
  return items;
}

std::string format_config_list(const std::vector<std::string>& items, bool quote) {
  std::string out = "[";
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += ", ";
    out += quote ? quote_config_string(items[i]) : items[i];
  }
  return out + "]";
}

ConfigFile ConfigFile::parse(std::string_view text, const std::string& origin) {
  ConfigFile f;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    const std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3) throw ConfigError(where + ": malformed section header");
      section = trim(s.substr(1, s.size() - 2));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (section.empty()) throw ConfigError(where + ": key '" + key + "' outside a section");
    const std::string full = section + "." + key;
    if (f.has(full)) throw ConfigError(where + ": duplicate key '" + full + "'");
    if (!value.empty() && value.front() == '"') {
      f.entries_[full] = unquote(value, where);
    } else if (is_list(value)) {
      parse_config_list(value);  // syntax check
      f.entries_[full] = value;
    } else {
      f.entries_[full] = value;
    }
  }
  return f;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

const std::string& ConfigFile::raw(std::string_view key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("missing config key '" + std::string(key) + "'");
  return it->second;
}

std::string ConfigFile::dump() const {
  std::string out, section;
  for (const auto& [key, value] : entries_) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      if (!out.empty()) out += "\n";
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + (is_list(value) || is_plain(value) ? value : quote_config_string(value)) + "\n";
  }
  return out;
}

void ConfigFile::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << dump();
  if (!out) throw IoError("write failed: " + path.string());
}

namespace {

void read_value(const std::string& key, const std::string& v, std::string& out) {
  (void)key;
  out = v;
}

void read_value(const std::string& key, const std::string& v, int& out) {
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

void read_value(const std::string& key, const std::string& v, std::uint64_t& out) {
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

void read_value(const std::string& key, const std::string& v, double& out) {
  char* end = nullptr;
  out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

void read_value(const std::string& key, const std::string& v, bool& out) {
  if (v == "true") {
    out = true;
  } else if (v == "false") {
    out = false;
  } else {
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }
}

template <typename T>
void read_value(const std::string& key, const std::string& v, std::vector<T>& out) {
  out.clear();
  for (const auto& item : parse_config_list(v)) {
    T x{};
    read_value(key, item, x);
    out.push_back(x);
  }
}

std::string number_text(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string write_value(const std::string& v) { return v; }
std::string write_value(int v) { return std::to_string(v); }
std::string write_value(std::uint64_t v) { return std::to_string(v); }
std::string write_value(double v) { return number_text(v); }
std::string write_value(bool v) { return v ? "true" : "false"; }

template <typename T>
std::string write_value(const std::vector<T>& v) {
  std::vector<std::string> items;
  for (const auto& x : v) items.push_back(write_value(x));
  return format_config_list(items, std::is_same_v<T, std::string>);
}

// Calls f(key, field) for every scalar or list field.
template <typename F>
void visit_fields(RunConfig& c, F&& f) {
  f("run.preset", c.preset);
  f("run.work_dir", c.work_dir);
  f("run.seed", c.seed);

  f("audio.sample_rate", c.audio.stft.sample_rate);
  f("audio.duration_s", c.audio.duration_s);
  f("audio.window_len", c.audio.stft.window_len);
  f("audio.hop", c.audio.stft.hop);
  f("audio.n_mels", c.audio.stft.n_mels);
  f("audio.fmin", c.audio.stft.fmin);
  f("audio.fmax", c.audio.stft.fmax);
  f("audio.log_floor", c.audio.stft.log_floor);

  f("corpus.seed", c.corpus.seed);
  f("corpus.train_per_class", c.corpus.train_per_class);
  f("corpus.split_ratio", c.corpus.split_ratio);
  f("corpus.pretrain_per_class", c.corpus.pretrain_per_class);
  f("corpus.eval_per_class", c.corpus.eval_per_class);
  f("corpus.label_table", c.corpus.label_table);
  f("corpus.class_specs", c.corpus.class_specs);
  f("corpus.pretrain_specs", c.corpus.pretrain_specs);

  f("clap.embed_dim", c.clap.embed_dim);
  f("clap.word_dim", c.clap.word_dim);
  f("clap.text_hidden", c.clap.text_hidden);
  f("clap.audio_channels", c.clap.audio_channels);
  f("clap.steps", c.clap.steps);
  f("clap.batch", c.clap.batch);
  f("clap.lr", c.clap.lr);
  f("clap.label_prompts", c.clap.label_prompts);

  f("vae.latent_channels", c.vae.latent_channels);
  f("vae.hidden", c.vae.hidden);
  f("vae.compression", c.vae.compression);
  f("vae.kl_weight", c.vae.kl_weight);
  f("vae.steps", c.vae.steps);
  f("vae.batch", c.vae.batch);
  f("vae.lr", c.vae.lr);

  f("ldm.optimizer", c.ldm.optimizer);
  f("ldm.width", c.ldm.width);
  f("ldm.time_dim", c.ldm.time_dim);
  f("ldm.cond_hidden", c.ldm.cond_hidden);
  f("ldm.schedule_steps", c.ldm.schedule_steps);
  f("ldm.sampler_steps", c.ldm.sampler_steps);
  f("ldm.clip_x0", c.ldm.clip_x0);
  f("ldm.batch", c.ldm.batch);
  f("ldm.lr", c.ldm.lr);
  f("ldm.pretrain_steps", c.ldm.pretrain_steps);
  f("ldm.finetune_steps", c.ldm.finetune_steps);
  f("ldm.pretrain_epochs", c.ldm.pretrain_epochs);
  f("ldm.finetune_epochs", c.ldm.finetune_epochs);
  f("ldm.cond_dropout", c.ldm.cond_dropout);
  f("ldm.eval_every", c.ldm.eval_every);
  f("ldm.checkpoint_every", c.ldm.checkpoint_every);

  f("finetune.text_mode", c.finetune.text_mode);
  f("finetune.tuner", c.finetune.tuner);
  f("finetune.tuner_noise_std", c.finetune.tuner_noise_std);
  f("finetune.tuner_lr", c.finetune.tuner_lr);

  f("select.pool_size", c.select.pool_size);
  f("select.mode", c.select.mode);
  f("select.target_source", c.select.target_source);
  f("select.backfill", c.select.backfill);
  f("select.target_pool_m", c.select.target_pool_m);
  f("select.grid", c.select.grid);
  f("select.variant_texts", c.select.variant_texts);

  f("generate.count", c.generate.count);
  f("generate.seed", c.generate.seed);
  f("generate.vocoder_iters", c.generate.vocoder_iters);

  f("benchmark.seeds", c.benchmark.seeds);
  f("benchmark.rows", c.benchmark.rows);
  f("benchmark.clips_per_class", c.benchmark.clips_per_class);
  f("benchmark.complex_class", c.benchmark.complex_class);
  f("benchmark.fixed_texts", c.benchmark.fixed_texts);
  f("benchmark.repeat_runs", c.benchmark.repeat_runs);
  f("benchmark.repeat_clips", c.benchmark.repeat_clips);
  f("benchmark.target_seeds", c.benchmark.target_seeds);
  f("benchmark.target_clips", c.benchmark.target_clips);
}

void apply_bench(RunConfig& c) {
  c.audio.stft = StftConfig{512, 128, 32, 16000, 0.0, 8000.0, 1e-5};
  c.audio.duration_s = 1.0;
  c.corpus.train_per_class = 60;
  c.corpus.pretrain_per_class = 40;
  c.corpus.eval_per_class = 40;
  c.clap.embed_dim = 32;
  c.clap.text_hidden = 32;
  c.clap.audio_channels = 8;
  c.clap.steps = 400;
  c.vae.hidden = 8;
  c.vae.steps = 600;
  c.ldm.width = 16;
  c.ldm.cond_hidden = 32;
  c.ldm.sampler_steps = 50;
  c.ldm.pretrain_steps = 1200;
  c.ldm.finetune_steps = 600;
  c.finetune.tuner_lr = 1e-4;
  c.select.pool_size = 4;
  c.generate.count = 40;
  c.generate.vocoder_iters = 16;
  c.benchmark.clips_per_class = 40;
  c.benchmark.repeat_runs = 10;
  c.benchmark.repeat_clips = 30;
  c.benchmark.target_seeds = 5;
  c.benchmark.target_clips = 30;
}

void apply_smoke(RunConfig& c) {
  c.audio.stft = StftConfig{256, 128, 16, 8000, 0.0, 4000.0, 1e-5};
  c.audio.duration_s = 0.5;
  c.corpus.train_per_class = 10;
  c.corpus.split_ratio = 0.8;
  c.corpus.pretrain_per_class = 4;
  c.corpus.eval_per_class = 6;
  c.clap.embed_dim = 8;
  c.clap.word_dim = 8;
  c.clap.text_hidden = 8;
  c.clap.audio_channels = 4;
  c.clap.steps = 10;
  c.clap.batch = 7;
  c.vae.hidden = 4;
  c.vae.steps = 10;
  c.vae.batch = 8;
  c.ldm.width = 4;
  c.ldm.time_dim = 8;
  c.ldm.cond_hidden = 8;
  c.ldm.schedule_steps = 100;
  c.ldm.sampler_steps = 5;
  c.ldm.batch = 8;
  c.ldm.pretrain_steps = 10;
  c.ldm.finetune_steps = 10;
  c.select.pool_size = 2;
  c.select.target_pool_m = 3;
  c.generate.count = 4;
  c.generate.vocoder_iters = 2;
  c.benchmark.clips_per_class = 4;
  c.benchmark.repeat_runs = 3;
  c.benchmark.repeat_clips = 4;
  c.benchmark.target_seeds = 2;
  c.benchmark.target_clips = 4;
  c.benchmark.fixed_texts = {"motor", "sound of motor"};
}

void apply_full(RunConfig& c) {
  c.audio.stft = StftConfig{1024, 256, 80, 22050, 0.0, 11025.0, 1e-5};
  c.audio.duration_s = 4.0;
  c.clap.embed_dim = 512;
  c.clap.lr = 3e-5;
  c.vae.lr = 3e-5;
  c.ldm.lr = 3e-5;
  c.ldm.pretrain_epochs = 3.0;
  c.ldm.finetune_epochs = 1000.0;
  c.ldm.eval_every = 100000;
  c.finetune.tuner_lr = 3e-5;
  c.generate.count = 100;
}

std::string section_hash(const RunConfig& c, std::initializer_list<std::string_view> include,
                         std::initializer_list<std::string_view> exclude) {
  auto matches = [](const std::string& key, std::string_view p) {
    return key == p || (key.size() > p.size() && key.starts_with(p) && key[p.size()] == '.');
  };
  std::string text;
  const ConfigFile file = c.to_file();
  for (const auto& [key, value] : file.entries()) {
    const bool in = std::any_of(include.begin(), include.end(), [&](auto p) { return matches(key, p); });
    const bool out = std::any_of(exclude.begin(), exclude.end(), [&](auto p) { return matches(key, p); });
    if (in && !out) text += key + "=" + value + "\n";
  }
  return hex_digest(text);
}

}  // namespace

std::string hex_digest(std::string_view text) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(mix64(hash_tag(text))));
  return buf;
}

RunConfig RunConfig::preset_named(std::string_view name) {
  RunConfig c;
  if (name == "desk") {
    // Struct defaults.
  } else if (name == "full") {
    apply_full(c);
  } else if (name == "bench") {
    apply_bench(c);
  } else if (name == "smoke") {
    apply_smoke(c);
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (valid: desk, full, bench, smoke)");
  }
  c.preset = std::string(name);
  return c;
}

void RunConfig::apply(const std::string& key, const std::string& value) {
  if (key.starts_with("texts.")) {
    finetune.texts[key.substr(6)] = value;
    return;
  }
  if (key.starts_with("thresholds.")) {
    double t = 0.0;
    read_value(key, value, t);
    select.thresholds[key.substr(11)] = t;
    return;
  }
  bool found = false;
  visit_fields(*this, [&](const char* k, auto& field) {
    if (!found && key == k) {
      read_value(key, value, field);
      found = true;
    }
  });
  if (!found) throw ConfigError("unknown config key '" + key + "'");
}

RunConfig RunConfig::from_file(const ConfigFile& file) {
  RunConfig c = preset_named(file.has("run.preset") ? file.raw("run.preset") : "desk");
  for (const auto& [key, value] : file.entries()) {
    if (key != "run.preset") c.apply(key, value);
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  return from_file(ConfigFile::load(path));
}

ConfigFile RunConfig::to_file() const {
  ConfigFile f;
  RunConfig copy = *this;
  visit_fields(copy, [&](const char* k, auto& field) { f.set(k, write_value(field)); });
  for (const auto& [cls, text] : finetune.texts) f.set("texts." + cls, text);
  for (const auto& [cls, t] : select.thresholds) f.set("thresholds." + cls, write_value(t));
  return f;
}

void RunConfig::validate() const {
  audio.stft.validate();
  if (!(audio.duration_s > 0.0)) throw ConfigError("audio.duration_s must be positive");
  if (corpus.train_per_class < 2) throw ConfigError("corpus.train_per_class must be >= 2");
  if (!(corpus.split_ratio > 0.0 && corpus.split_ratio < 1.0)) {
    throw ConfigError("corpus.split_ratio must lie in (0, 1)");
  }
  if (corpus.pretrain_per_class < 1 || corpus.eval_per_class < 2) {
    throw ConfigError("corpus: pretrain_per_class >= 1 and eval_per_class >= 2 required");
  }
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
  };
  positive(clap.embed_dim, "clap.embed_dim");
  positive(clap.steps, "clap.steps");
  positive(clap.batch, "clap.batch");
  positive(vae.steps, "vae.steps");
  positive(vae.batch, "vae.batch");
  positive(ldm.batch, "ldm.batch");
  positive(ldm.sampler_steps, "ldm.sampler_steps");
  positive(generate.count, "generate.count");
  positive(generate.vocoder_iters, "generate.vocoder_iters");
  positive(select.pool_size, "select.pool_size");
  positive(select.target_pool_m, "select.target_pool_m");
  if (ldm.optimizer != "adam") throw ConfigError("ldm.optimizer: only 'adam' is available");
  if (ldm.sampler_steps > ldm.schedule_steps) {
    throw ConfigError("ldm.sampler_steps exceeds ldm.schedule_steps");
  }
  if (ldm.pretrain_steps < 0 || ldm.finetune_steps < 0) throw ConfigError("ldm step counts must be >= 0");
  if (!(ldm.cond_dropout >= 0.0 && ldm.cond_dropout < 1.0)) {
    throw ConfigError("ldm.cond_dropout must lie in [0, 1)");
  }
  if (finetune.text_mode != "label" && finetune.text_mode != "wrapped") {
    throw ConfigError("finetune.text_mode must be 'label' or 'wrapped'");
  }
  if (finetune.tuner != "off" && finetune.tuner != "frozen" && finetune.tuner != "joint") {
    throw ConfigError("finetune.tuner must be 'off', 'frozen' or 'joint'");
  }
  if (finetune.tuner_noise_std < 0.0) throw ConfigError("finetune.tuner_noise_std must be >= 0");
  if (select.mode != "none" && select.mode != "top1" && select.mode != "threshold") {
    throw ConfigError("select.mode must be none, top1 or threshold");
  }
  if (select.target_source != "tuned_text" && select.target_source != "text_variant" &&
      select.target_source != "audio_embedding_pool") {
    throw ConfigError("select.target_source must be tuned_text, text_variant or audio_embedding_pool");
  }
  for (const auto& [cls, t] : select.thresholds) {
    if (!(t >= -1.0 && t <= 1.0)) throw ConfigError("thresholds." + cls + " outside [-1, 1]");
  }
  if (benchmark.seeds.empty()) throw ConfigError("benchmark.seeds is empty");
  positive(benchmark.clips_per_class, "benchmark.clips_per_class");
  if (benchmark.repeat_clips < 2 || benchmark.target_clips < 2) {
    throw ConfigError("benchmark: repeat_clips and target_clips must be >= 2");
  }
}

std::string RunConfig::pretrain_hash() const {
  return section_hash(*this, {"audio", "corpus", "clap", "vae", "ldm", "run.seed"},
                      {"ldm.finetune_steps", "ldm.finetune_epochs", "ldm.eval_every",
                       "ldm.checkpoint_every", "ldm.sampler_steps", "ldm.clip_x0"});
}

std::string RunConfig::finetune_hash() const {
  return section_hash(*this, {"audio", "corpus", "clap", "vae", "ldm", "finetune", "texts", "run.seed"},
                      {"ldm.eval_every", "ldm.checkpoint_every", "ldm.sampler_steps", "ldm.clip_x0"});
}

}  // namespace flab
