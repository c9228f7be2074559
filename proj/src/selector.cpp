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

#include "flab/selector.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "flab/error.hpp"
#include "flab/rng.hpp"

namespace flab {

SelectMode parse_select_mode(std::string_view s) {
  if (s == "none") return SelectMode::none;
  if (s == "top1") return SelectMode::top1;
  if (s == "threshold") return SelectMode::threshold;
  throw ConfigError("unknown selection mode '" + std::string(s) + "'");
}

std::string_view select_mode_name(SelectMode m) {
  switch (m) {
    case SelectMode::none: return "none";
    case SelectMode::top1: return "top1";
    case SelectMode::threshold: return "threshold";
  }
  return "none";
}

TargetSource parse_target_source(std::string_view s) {
  if (s == "tuned_text") return TargetSource::tuned_text;
  if (s == "text_variant") return TargetSource::text_variant;
  if (s == "audio_embedding_pool") return TargetSource::audio_embedding_pool;
  throw ConfigError("unknown target source '" + std::string(s) + "'");
}

std::string_view target_source_name(TargetSource t) {
  switch (t) {
    case TargetSource::tuned_text: return "tuned_text";
    case TargetSource::text_variant: return "text_variant";
    case TargetSource::audio_embedding_pool: return "audio_embedding_pool";
  }
  return "tuned_text";
}

double SelectionPolicy::threshold_for(std::string_view class_name) const {
  const auto it = thresholds.find(class_name);
  return it == thresholds.end() ? -1.0 : it->second;
}

void SelectionPolicy::validate() const {
  if (pool_size < 1) throw ConfigError("selection pool size must be >= 1");
  for (const auto& [c, t] : thresholds) {
    if (!(t >= -1.0 && t <= 1.0)) throw ConfigError("threshold for " + c + " outside [-1, 1]");
  }
}

double score_candidate(const Embedding& audio, const Embedding& target) {
  return cosine(audio, target);
}

double score_candidate(const Waveform& w, const Embedding& target, const ClapModel& encoder,
                       const StftConfig& frontend) {
  return score_candidate(encoder.encode_audio(wav_to_mel(w, frontend)), target);
}

void score_pool(CandidatePool& pool, const Embedding& target) {
  for (auto& c : pool) c.score = score_candidate(c.audio, target);
}

namespace {

bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.clip_id < b.clip_id;
}

void check_pool(const CandidatePool& pool, int want) {
  if (pool.empty()) throw InputError("selection from an empty pool");
  if (want < 0) throw InputError("selection count must be >= 0");
}

}  // namespace

std::vector<std::string> select(const CandidatePool& pool, const SelectionPolicy& policy,
                                std::string_view class_name, int want) {
  check_pool(pool, want);
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::string> out;
  switch (policy.mode) {
    case SelectMode::none:
      if (static_cast<int>(pool.size()) < want) throw InputError("pool smaller than the request");
      for (int i = 0; i < want; ++i) out.push_back(pool[i].clip_id);
      return out;
    case SelectMode::top1: {
      if (static_cast<int>(pool.size()) < want) throw InputError("pool smaller than the request");
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return better(pool[a], pool[b]); });
      for (int i = 0; i < want; ++i) out.push_back(pool[order[i]].clip_id);
      return out;
    }
    case SelectMode::threshold: {
      const double theta = policy.threshold_for(class_name);
      std::vector<bool> taken(pool.size(), false);
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (pool[i].score >= theta) {
          out.push_back(pool[i].clip_id);
          taken[i] = true;
        }
      }
      if (policy.backfill && static_cast<int>(out.size()) < want) {
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return better(pool[a], pool[b]); });
        for (std::size_t i : order) {
          if (static_cast<int>(out.size()) >= want) break;
          if (!taken[i]) out.push_back(pool[i].clip_id);
        }
      }
      return out;
    }
  }
  return out;
}

std::vector<std::string> multi_target_select(const CandidatePool& pool,
                                             std::span<const Embedding> targets,
                                             const SelectionPolicy& policy,
                                             std::string_view class_name, int want,
                                             std::uint64_t seed,
                                             std::vector<double>* first_scores) {
  check_pool(pool, want);
  if (targets.empty()) throw InputError("multi-target selection needs at least one target");
  if (static_cast<int>(pool.size()) < want) throw InputError("pool smaller than the request");
  Rng rng(derive_seed(seed, "multi-target"));
  CandidatePool remaining = pool;
  std::vector<std::string> out;
  SelectionPolicy single = policy;
  single.backfill = true;
  for (int it = 0; it < want; ++it) {
    const Embedding& target = targets[rng.below(targets.size())];
    score_pool(remaining, target);
    if (it == 0 && first_scores != nullptr) {
      first_scores->clear();
      for (const auto& c : remaining) first_scores->push_back(c.score);
    }
    const auto pick = select(remaining, single, class_name, 1);
    out.push_back(pick.front());
    remaining.erase(std::find_if(remaining.begin(), remaining.end(),
                                 [&](const Candidate& c) { return c.clip_id == pick.front(); }));
    if (remaining.empty()) break;
  }
  return out;
}

std::vector<TargetPoolEntry> build_audio_target_pool(std::span<const std::string> clip_ids,
                                                     std::span<const Embedding> embeddings,
                                                     int top_m) {
  if (clip_ids.size() != embeddings.size()) throw InputError("target pool: ids and embeddings differ");
  const int n = static_cast<int>(embeddings.size());
  if (top_m < 1 || top_m > n) {
    throw InputError("target pool size " + std::to_string(top_m) + " exceeds the " +
                     std::to_string(n) + " clips of the class");
  }
  std::vector<TargetPoolEntry> all;
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = 0; j < n; ++j) {
      if (j != i) acc += cosine(embeddings[i], embeddings[j]);
    }
    all.push_back({clip_ids[i], embeddings[i], n > 1 ? acc / (n - 1) : 1.0});
  }
  std::stable_sort(all.begin(), all.end(), [](const TargetPoolEntry& a, const TargetPoolEntry& b) {
    if (a.mean_cosine != b.mean_cosine) return a.mean_cosine > b.mean_cosine;
    return a.clip_id < b.clip_id;
  });
  all.resize(static_cast<std::size_t>(top_m));
  return all;
}

std::vector<double> default_threshold_grid() {
  std::vector<double> g = {-1.0};
  for (int i = 0; i <= 9; ++i) g.push_back(i / 10.0);
  return g;
}

CalibrationResult calibrate_thresholds(
    const std::map<std::string, std::vector<CandidatePool>, std::less<>>& pools,
    const EmbeddingsByClass& reference, std::span<const double> grid, bool backfill) {
  if (grid.empty()) throw ConfigError("calibration grid is empty");
  std::vector<double> sorted(grid.begin(), grid.end());
  std::sort(sorted.begin(), sorted.end());
  CalibrationResult result;
  for (const auto& [cls, requests] : pools) {
    const auto ref = reference.find(cls);
    if (ref == reference.end() || ref->second.size() < 2) {
      throw InputError("calibration: class " + cls + " lacks a reference set");
    }
    const EmbeddingStats ref_stats = fit_stats(ref->second);
    std::optional<double> best_fad;
    double best_theta = sorted.front();
    for (double theta : sorted) {
      SelectionPolicy policy;
      policy.mode = SelectMode::threshold;
      policy.backfill = backfill;
      policy.thresholds[cls] = theta;
      CalibrationRow row{cls, theta, 0, 0, std::nullopt};
      std::vector<Embedding> chosen;
      for (const auto& pool : requests) {
        for (const auto& c : pool) row.n_passing += c.score >= theta ? 1 : 0;
        const auto ids = select(pool, policy, cls, 1);
        if (ids.empty()) continue;
        const auto it = std::find_if(pool.begin(), pool.end(),
                                     [&](const Candidate& c) { return c.clip_id == ids.front(); });
        chosen.push_back(it->audio);
      }
      row.n_selected = static_cast<int>(chosen.size());
      if (chosen.size() >= 2) {
        row.fad = frechet_distance(fit_stats(chosen), ref_stats);
        if (!best_fad || *row.fad < *best_fad) {
          best_fad = row.fad;
          best_theta = theta;
        }
      }
      result.rows.push_back(std::move(row));
    }
    result.thresholds[cls] = best_theta;
  }
  return result;
}

void write_calibration_csv(const std::filesystem::path& file, const CalibrationResult& r) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  out << "class,theta,n_selected,n_passing,F\n";
  for (const auto& row : r.rows) {
    out << row.class_name << ',' << format_fad(row.theta) << ',' << row.n_selected << ','
        << row.n_passing << ',' << (row.fad ? format_fad(*row.fad) : "") << '\n';
  }
  if (!out) throw IoError("write failed: " + file.string());
}

}  // namespace flab
