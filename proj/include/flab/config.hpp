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
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "flab/frontend.hpp"

namespace flab {

// Flat "key = value" text grouped by "[section]" headers. Keys are addressed
// as "section.key". Values are numbers, true/false, strings (bare or double
// quoted) or bracketed lists of those. '#' starts a comment.
class ConfigFile {
 public:
  using Entries = std::map<std::string, std::string, std::less<>>;

  static ConfigFile parse(std::string_view text, const std::string& origin = "<config>");
  static ConfigFile load(const std::filesystem::path& path);

  bool has(std::string_view key) const { return entries_.find(key) != entries_.end(); }
  // Raw value text; strings are unquoted, lists keep their brackets.
  const std::string& raw(std::string_view key) const;
  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
  const Entries& entries() const { return entries_; }

  // Canonical text: sections and keys in sorted order.
  std::string dump() const;
  void save(const std::filesystem::path& path) const;

 private:
  Entries entries_;
};

std::string quote_config_string(std::string_view s);
// Splits "[a, "b c", 3]" into its unquoted items.
std::vector<std::string> parse_config_list(std::string_view value);
std::string format_config_list(const std::vector<std::string>& items, bool quote);

struct AudioSection {
  StftConfig stft;
  double duration_s = 4.0;
};

struct CorpusSection {
  std::uint64_t seed = 1;
  int train_per_class = 100;
  double split_ratio = 0.9;
  int pretrain_per_class = 200;
  int eval_per_class = 100;
  std::string label_table;     // empty: built-in table
  std::string class_specs;     // empty: built-in target classes
  std::string pretrain_specs;  // empty: built-in pretraining classes
};

struct ClapSection {
  int embed_dim = 64;
  int word_dim = 32;
  int text_hidden = 64;
  int audio_channels = 16;
  int steps = 600;
  int batch = 16;
  double lr = 1e-3;
  bool label_prompts = true;  // also pair every clip with its bare label words
};

struct VaeSection {
  int latent_channels = 4;
  int hidden = 16;
  int compression = 4;
  double kl_weight = 1e-4;
  int steps = 1500;
  int batch = 16;
  double lr = 1e-3;
};

struct LdmSection {
  std::string optimizer = "adam";
  int width = 16;
  int time_dim = 32;
  int cond_hidden = 64;
  int schedule_steps = 1000;
  int sampler_steps = 200;
  double clip_x0 = 0.0;
  int batch = 32;
  double lr = 1e-3;
  int pretrain_steps = 2000;
  int finetune_steps = 2000;
  // When positive, epochs over the stage's clips replace the step counts.
  double pretrain_epochs = 0.0;
  double finetune_epochs = 0.0;
  double cond_dropout = 0.0;
  int eval_every = 0;        // 0 disables periodic validation
  int checkpoint_every = 0;  // 0 saves only at the end of the stage
};

struct FinetuneSection {
  std::string text_mode = "wrapped";  // label | wrapped
  std::string tuner = "joint";        // off | frozen | joint
  double tuner_noise_std = 0.01;
  double tuner_lr = 1e-3;
  // Per-class replacement of the conditioning text.
  std::map<std::string, std::string, std::less<>> texts;
};

struct SelectSection {
  int pool_size = 8;
  std::string mode = "top1";
  std::string target_source = "tuned_text";
  bool backfill = true;
  int target_pool_m = 8;
  std::vector<double> grid;                 // empty: the default grid
  std::vector<std::string> variant_texts;   // targets for text_variant
  std::map<std::string, double, std::less<>> thresholds;
};

struct GenerateSection {
  int count = 100;
  std::uint64_t seed = 1;
  int vocoder_iters = 32;
};

struct BenchmarkSection {
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<std::string> rows = {"LDM-S", "+Pre", "+Text", "+Filter", "+Tuned"};
  int clips_per_class = 100;
  std::string complex_class = "MovingMotorVehicle";
  std::vector<std::string> fixed_texts = {"motor", "a moving motor", "sound of motor",
                                           "driving motor car"};
  int repeat_runs = 10;
  int repeat_clips = 50;
  int target_seeds = 5;
  int target_clips = 50;
};

struct RunConfig {
  std::string preset = "desk";
  std::string work_dir = "flab-run";
  std::uint64_t seed = 1;
  AudioSection audio;
  CorpusSection corpus;
  ClapSection clap;
  VaeSection vae;
  LdmSection ldm;
  FinetuneSection finetune;
  SelectSection select;
  GenerateSection generate;
  BenchmarkSection benchmark;

  // "desk", "full", "bench" or "smoke".
  static RunConfig preset_named(std::string_view name);
  // Starts from the preset named by run.preset (default desk), then applies
  // every key. Unknown keys raise ConfigError.
  static RunConfig from_file(const ConfigFile& file);
  static RunConfig load(const std::filesystem::path& path);
  ConfigFile to_file() const;
  // Sets one "section.key" from its text form.
  void apply(const std::string& key, const std::string& value);

  void validate() const;

  // Hashes of the resolved settings a stage's checkpoint depends on.
  std::string pretrain_hash() const;
  std::string finetune_hash() const;
};

std::string hex_digest(std::string_view text);

}  // namespace flab
