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

#include "flab/fad.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "flab/error.hpp"

namespace flab {

EmbeddingStats fit_stats(const Eigen::MatrixXd& rows) {
  const auto n = rows.rows();
  if (n < 2) throw InputError("fit_stats needs at least two embeddings");
  EmbeddingStats s;
  s.n = static_cast<int>(n);
  s.mu = rows.colwise().mean().transpose();
  const Eigen::MatrixXd centred = rows.rowwise() - s.mu.transpose();
  s.sigma = centred.transpose() * centred / static_cast<double>(n - 1);
  s.sigma = 0.5 * (s.sigma + s.sigma.transpose()).eval();
  return s;
}

EmbeddingStats fit_stats(std::span<const Embedding> embeddings) {
  if (embeddings.size() < 2) throw InputError("fit_stats needs at least two embeddings");
  const int d = embeddings.front().dim();
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(embeddings.size()), d);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].dim() != d) throw InputError("fit_stats: embeddings differ in dimension");
    for (int j = 0; j < d; ++j) rows(static_cast<Eigen::Index>(i), j) = embeddings[i].values[j];
  }
  return fit_stats(rows);
}

namespace {

Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> decompose(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "eigendecomposition of " << what << " failed (dim " << m.rows() << ", trace " << m.trace()
        << ", max |entry| " << m.cwiseAbs().maxCoeff() << ")";
    throw NumericalError(msg.str());
  }
  return es;
}

}  // namespace

double frechet_distance(const EmbeddingStats& r, const EmbeddingStats& t) {
  if (r.mu.size() != t.mu.size() || r.sigma.rows() != t.sigma.rows()) {
    throw InputError("frechet_distance: dimension mismatch");
  }
  const auto es_r = decompose(r.sigma, "the first covariance");
  const Eigen::VectorXd root_vals = es_r.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd root_r =
      es_r.eigenvectors() * root_vals.asDiagonal() * es_r.eigenvectors().transpose();
  Eigen::MatrixXd m = root_r * t.sigma * root_r;
  m = 0.5 * (m + m.transpose()).eval();
  const auto es_m = decompose(m, "the covariance product");
  const double tr_sqrt = es_m.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double f = (r.mu - t.mu).squaredNorm() + r.sigma.trace() + t.sigma.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(f)) throw NumericalError("frechet_distance is not finite");
  return std::max(f, 0.0);
}

const FadRow* FadReport::find(std::string_view class_name) const {
  for (const auto& r : rows) {
    if (r.class_name == class_name) return &r;
  }
  return nullptr;
}

std::optional<double> FadReport::class_mean() const {
  double acc = 0.0;
  int n = 0;
  for (const auto& r : rows) {
    if (r.fad) {
      acc += *r.fad;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return acc / n;
}

FadReport evaluate_fad(const EmbeddingsByClass& generated, const EmbeddingsByClass& reference,
                       const std::string& extractor) {
  FadReport rep;
  rep.extractor = extractor;
  std::set<std::string> classes;
  for (const auto& [c, v] : generated) classes.insert(c);
  for (const auto& [c, v] : reference) classes.insert(c);
  std::vector<Embedding> all_gen, all_ref;
  for (const auto& c : classes) {
    FadRow row;
    row.class_name = c;
    const auto g = generated.find(c);
    const auto r = reference.find(c);
    row.n_generated = g == generated.end() ? 0 : static_cast<int>(g->second.size());
    row.n_reference = r == reference.end() ? 0 : static_cast<int>(r->second.size());
    if (row.n_generated >= 2 && row.n_reference >= 2) {
      row.fad = frechet_distance(fit_stats(g->second), fit_stats(r->second));
    }
    if (g != generated.end()) all_gen.insert(all_gen.end(), g->second.begin(), g->second.end());
    if (r != reference.end()) all_ref.insert(all_ref.end(), r->second.begin(), r->second.end());
    rep.rows.push_back(std::move(row));
  }
  if (all_gen.size() >= 2 && all_ref.size() >= 2) {
    rep.pooled = frechet_distance(fit_stats(all_gen), fit_stats(all_ref));
  }
  return rep;
}

EmbeddingCache::EmbeddingCache(std::filesystem::path file, std::string extractor)
    : file_(std::move(file)), extractor_(std::move(extractor)) {
  if (!std::filesystem::exists(file_)) return;
  const Bundle b = load_bundle(file_);
  if (b.metadata.value("extractor", std::string()) != extractor_) return;
  for (const auto& [id, arr] : b.arrays) entries_[id] = Embedding{arr.data, true};
}

const Embedding* EmbeddingCache::find(const std::string& clip_id) const {
  const auto it = entries_.find(clip_id);
  return it == entries_.end() ? nullptr : &it->second;
}

void EmbeddingCache::put(const std::string& clip_id, Embedding e) { entries_[clip_id] = std::move(e); }

void EmbeddingCache::save() const {
  Bundle b;
  b.metadata["extractor"] = extractor_;
  for (const auto& [id, e] : entries_) {
    b.arrays[id] = make_array({static_cast<std::int64_t>(e.values.size())}, e.values);
  }
  if (file_.has_parent_path()) std::filesystem::create_directories(file_.parent_path());
  save_bundle(file_, b);
}

EmbeddingsByClass embed_manifest(const CorpusManifest& m, const AudioEmbedder& embed,
                                 EmbeddingCache* cache) {
  EmbeddingsByClass out;
  std::vector<std::size_t> missing;
  std::vector<Embedding> found(m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const Embedding* hit = cache != nullptr ? cache->find(m.entries[i].clip_id) : nullptr;
    if (hit != nullptr) {
      found[i] = *hit;
    } else {
      missing.push_back(i);
    }
  }
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < missing.size(); s += kChunk) {
    std::vector<Waveform> audio;
    const std::size_t e = std::min(missing.size(), s + kChunk);
    for (std::size_t k = s; k < e; ++k) audio.push_back(read_wav(m.resolve(m.entries[missing[k]])));
    const auto emb = embed(audio);
    if (emb.size() != audio.size()) throw InputError("embedder returned the wrong number of embeddings");
    for (std::size_t k = s; k < e; ++k) {
      found[missing[k]] = emb[k - s];
      if (cache != nullptr) cache->put(m.entries[missing[k]].clip_id, emb[k - s]);
    }
  }
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    out[m.entries[i].class_name].push_back(std::move(found[i]));
  }
  return out;
}

FadReport evaluate_fad(const CorpusManifest& generated, const CorpusManifest& reference,
                       const AudioEmbedder& embed, const std::string& extractor,
                       EmbeddingCache* cache) {
  const auto gen = embed_manifest(generated, embed, nullptr);
  const auto ref = embed_manifest(reference, embed, cache);
  if (cache != nullptr) cache->save();
  return evaluate_fad(gen, ref, extractor);
}

std::string format_fad(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

void write_fad_csv(const std::filesystem::path& file, const FadReport& r) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  out << "class,F,n_generated,n_reference\n";
  int ng = 0, nr = 0;
  for (const auto& row : r.rows) {
    out << row.class_name << ',' << (row.fad ? format_fad(*row.fad) : "") << ',' << row.n_generated
        << ',' << row.n_reference << '\n';
    ng += row.n_generated;
    nr += row.n_reference;
  }
  out << "__pooled__," << (r.pooled ? format_fad(*r.pooled) : "") << ',' << ng << ',' << nr << '\n';
  if (!out) throw IoError("write failed: " + file.string());
}

void write_fad_jsonl(const std::filesystem::path& file, const FadReport& r) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  for (const auto& row : r.rows) {
    nlohmann::json j = {{"class", row.class_name},
                        {"extractor", r.extractor},
                        {"n_generated", row.n_generated},
                        {"n_reference", row.n_reference}};
    j["F"] = row.fad ? nlohmann::json(*row.fad) : nlohmann::json(nullptr);
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + file.string());
}

}  // namespace flab
