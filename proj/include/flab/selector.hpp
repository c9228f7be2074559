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
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flab/clap.hpp"
#include "flab/fad.hpp"

namespace flab {

enum class SelectMode { none, top1, threshold };
enum class TargetSource { tuned_text, text_variant, audio_embedding_pool };

SelectMode parse_select_mode(std::string_view s);
std::string_view select_mode_name(SelectMode m);
TargetSource parse_target_source(std::string_view s);
std::string_view target_source_name(TargetSource t);

struct SelectionPolicy {
  int pool_size = 8;
  SelectMode mode = SelectMode::top1;
  TargetSource target_source = TargetSource::tuned_text;
  std::map<std::string, double, std::less<>> thresholds;  // per class; missing = -1
  bool backfill = true;
  std::uint64_t seed = 0;

  double threshold_for(std::string_view class_name) const;
  void validate() const;
};

struct Candidate {
  std::string clip_id;
  Embedding audio;  // normalised
  double score = 0.0;
};

using CandidatePool = std::vector<Candidate>;

// Cosine similarity of a candidate's audio embedding to the target.
double score_candidate(const Embedding& audio, const Embedding& target);
double score_candidate(const Waveform& w, const Embedding& target, const ClapModel& encoder,
                       const StftConfig& frontend);

// Fills every candidate's score against `target`.
void score_pool(CandidatePool& pool, const Embedding& target);

// none: the first `want` candidates in pool order.
// top1: the `want` highest scores, ties broken by clip_id.
// threshold: every candidate scoring >= the class threshold in pool order;
// if fewer than `want` pass and backfill is on, the rest are added by
// descending score.
std::vector<std::string> select(const CandidatePool& pool, const SelectionPolicy& policy,
                                std::string_view class_name, int want);

// Per selection iteration one target is drawn uniformly from `targets`
// (seeded), the remaining candidates are scored against it and one is
// taken as `select` would. `first_scores`, when given, receives the scores
// of the first iteration in pool order.
std::vector<std::string> multi_target_select(const CandidatePool& pool,
                                             std::span<const Embedding> targets,
                                             const SelectionPolicy& policy,
                                             std::string_view class_name, int want,
                                             std::uint64_t seed,
                                             std::vector<double>* first_scores = nullptr);

struct TargetPoolEntry {
  std::string clip_id;
  Embedding embedding;
  double mean_cosine = 0.0;  // to the other clips of the class
};

// The top_m clips of one class ranked by mean cosine similarity to the
// other clips of that class (ties by clip_id).
std::vector<TargetPoolEntry> build_audio_target_pool(std::span<const std::string> clip_ids,
                                                     std::span<const Embedding> embeddings,
                                                     int top_m);

struct CalibrationRow {
  std::string class_name;
  double theta = 0.0;
  int n_selected = 0;
  int n_passing = 0;
  std::optional<double> fad;  // absent when fewer than two clips were selected
};

struct CalibrationResult {
  std::map<std::string, double, std::less<>> thresholds;
  std::vector<CalibrationRow> rows;
};

// The default grid {-1.0, 0.0, 0.1, ..., 0.9}.
std::vector<double> default_threshold_grid();

// For each class, each request's pool is reduced to one clip per grid
// point in threshold mode; the grid point with the lowest FAD against the
// class reference wins (ties to the smaller threshold). Pools must carry
// scores already.
CalibrationResult calibrate_thresholds(
    const std::map<std::string, std::vector<CandidatePool>, std::less<>>& pools,
    const EmbeddingsByClass& reference, std::span<const double> grid, bool backfill = true);

void write_calibration_csv(const std::filesystem::path& file, const CalibrationResult& r);

}  // namespace flab
