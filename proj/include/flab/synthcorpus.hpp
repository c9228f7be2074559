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
#include <utility>
#include <vector>

#include "flab/wav.hpp"

namespace flab {

enum class SoundFamily { impulse_train, band_noise, chirp, tonal_burst, am_noise };

SoundFamily parse_family(std::string_view name);
std::string_view family_name(SoundFamily f);

struct ParamRange {
  double low = 0.0;
  double high = 0.0;
};

// A parametric sound class. Every clip draws its parameters uniformly from
// param_ranges using the clip seed.
struct SoundClassSpec {
  std::string name;
  SoundFamily family = SoundFamily::band_noise;
  std::map<std::string, ParamRange> param_ranges;
  double duration_s = 4.0;

  void validate() const;
};

// Deterministic in (spec, seed, sample_rate); peak normalised to 0.95.
Waveform synth_clip(const SoundClassSpec& spec, std::uint64_t seed, int sample_rate);

// The seven target classes and the twenty disjoint pretraining classes.
std::vector<SoundClassSpec> target_classes(double duration_s);
std::vector<SoundClassSpec> pretrain_classes(double duration_s);

// Class specs as JSON: [{"name":..., "family":..., "duration_s":...,
// "params": {"key": [low, high], ...}}, ...]. Unknown families raise
// ConfigError.
std::vector<SoundClassSpec> load_class_specs(const std::filesystem::path& path);
void save_class_specs(const std::filesystem::path& path,
                      const std::vector<SoundClassSpec>& specs);

// Label -> wrapped text lookup, stored as a two-column TSV.
class LabelTable {
 public:
  using Rows = std::map<std::string, std::string, std::less<>>;

  LabelTable() = default;
  explicit LabelTable(Rows rows) : rows_(std::move(rows)) {}

  static LabelTable defaults();
  static LabelTable load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // Throws LookupError for labels without an entry.
  const std::string& text_for(std::string_view label) const;
  bool contains(std::string_view label) const;
  const Rows& rows() const { return rows_; }

 private:
  Rows rows_;
};

std::string label_to_text(std::string_view label, const LabelTable& table);

enum class Split { pretrain, train, val, eval };
std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct ManifestEntry {
  std::string clip_id;
  std::string class_name;
  std::string text;
  std::uint64_t seed = 0;
  std::string path;  // relative to the corpus root

  bool operator==(const ManifestEntry&) const = default;
};

struct CorpusManifest {
  Split split = Split::train;
  std::filesystem::path root;  // directory the entry paths are relative to
  std::vector<ManifestEntry> entries;

  std::vector<std::string> class_names() const;
  std::vector<const ManifestEntry*> of_class(std::string_view name) const;
  std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.path; }
};

// JSON lines; one object per clip with fields clip_id, class, text, seed, path.
void write_manifest(const std::filesystem::path& file, const CorpusManifest& m);
CorpusManifest read_manifest(const std::filesystem::path& file, Split split);
std::filesystem::path manifest_path(const std::filesystem::path& root, Split s);

struct CorpusSplits {
  CorpusManifest train;
  CorpusManifest val;
};

// Synthesises n_per_class clips per class, assigns floor(split_ratio * n)
// of them to train and the rest to val, writes WAVs and manifests below
// out_dir.
CorpusSplits build_corpus(const std::vector<SoundClassSpec>& specs, int n_per_class,
                          double split_ratio, std::uint64_t root_seed,
                          const LabelTable& table, int sample_rate,
                          const std::filesystem::path& out_dir);

// Single-split variant used for the pretraining and evaluation sets.
CorpusManifest build_split(const std::vector<SoundClassSpec>& specs, int n_per_class,
                           Split split, std::uint64_t root_seed, const LabelTable& table,
                           int sample_rate, const std::filesystem::path& out_dir);

}  // namespace flab
