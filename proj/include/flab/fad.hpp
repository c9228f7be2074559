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

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "flab/checkpoint.hpp"
#include "flab/clap.hpp"
#include "flab/synthcorpus.hpp"

namespace flab {

struct EmbeddingStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  int n = 0;
};

// Sample mean and 1/(n-1) covariance, symmetrised. Needs n >= 2.
EmbeddingStats fit_stats(std::span<const Embedding> embeddings);
EmbeddingStats fit_stats(const Eigen::MatrixXd& rows);

// ||mu_r - mu_t||^2 + tr(S_r + S_t - 2 (S_r S_t)^(1/2)), with the root taken
// as that of sqrt(S_r) S_t sqrt(S_r). Negative eigenvalues are clamped to
// zero; the result is clamped at zero.
double frechet_distance(const EmbeddingStats& r, const EmbeddingStats& t);

struct FadRow {
  std::string class_name;
  std::optional<double> fad;  // absent when either side lacks two clips
  int n_generated = 0;
  int n_reference = 0;
};

struct FadReport {
  std::string extractor;
  std::vector<FadRow> rows;    // one per class, in class order
  std::optional<double> pooled;  // all generated clips against all reference clips

  const FadRow* find(std::string_view class_name) const;
  // Mean over classes with a value.
  std::optional<double> class_mean() const;
};

using EmbeddingsByClass = std::map<std::string, std::vector<Embedding>, std::less<>>;

// Per-class and pooled distances over the union of both sides' classes.
FadReport evaluate_fad(const EmbeddingsByClass& generated, const EmbeddingsByClass& reference,
                       const std::string& extractor);

// Embeds audio clips; returns one embedding per input, in order.
using AudioEmbedder = std::function<std::vector<Embedding>(std::span<const Waveform>)>;

// Embeddings keyed by clip_id, persisted as a named-array container. Entries
// computed by a different extractor are ignored.
class EmbeddingCache {
 public:
  EmbeddingCache(std::filesystem::path file, std::string extractor);

  const Embedding* find(const std::string& clip_id) const;
  void put(const std::string& clip_id, Embedding e);
  void save() const;
  std::size_t size() const { return entries_.size(); }

 private:
  std::filesystem::path file_;
  std::string extractor_;
  std::map<std::string, Embedding> entries_;
};

// Embeds every clip of a manifest, using and filling `cache` when given.
EmbeddingsByClass embed_manifest(const CorpusManifest& m, const AudioEmbedder& embed,
                                 EmbeddingCache* cache = nullptr);

FadReport evaluate_fad(const CorpusManifest& generated, const CorpusManifest& reference,
                       const AudioEmbedder& embed, const std::string& extractor,
                       EmbeddingCache* cache = nullptr);

// CSV columns: class,F,n_generated,n_reference (absent values left empty;
// the pooled row uses class "__pooled__").
void write_fad_csv(const std::filesystem::path& file, const FadReport& r);
// One JSON object per class row.
void write_fad_jsonl(const std::filesystem::path& file, const FadReport& r);

std::string format_fad(double v);

}  // namespace flab
