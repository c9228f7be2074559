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

#include "flab/clap.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "flab/error.hpp"
#include "flab/nn/adam.hpp"
#include "flab/nn/ops.hpp"
#include "flab/rng.hpp"

namespace flab {

using nn::Var;

std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c)) != 0) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

Vocabulary::Vocabulary() { add("<unk>"); }

void Vocabulary::add(const std::string& word) {
  if (index_.contains(word)) return;
  index_.emplace(word, static_cast<int>(tokens_.size()));
  tokens_.push_back(word);
}

const std::vector<std::string>& Vocabulary::default_adjuncts() {
  static const std::vector<std::string> words = {
      "a",     "an",     "the",  "of",     "sound",   "someone", "using", "on",
      "and",   "by",     "in",   "with",   "motor",   "driving", "car",   "moving",
      "engine", "noise", "loud", "quiet",  "distant", "close",   "small", "large"};
  return words;
}

Vocabulary Vocabulary::build(const LabelTable& table, const std::vector<std::string>& adjunct) {
  std::vector<std::string> words;
  for (const auto& [label, text] : table.rows()) {
    for (auto& w : tokenize_words(text)) words.push_back(std::move(w));
    for (auto& w : tokenize_words(label)) words.push_back(std::move(w));
  }
  for (const auto& a : adjunct) {
    for (auto& w : tokenize_words(a)) words.push_back(std::move(w));
  }
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  Vocabulary v;
  for (const auto& w : words) v.add(w);
  return v;
}

int Vocabulary::id(std::string_view word) const {
  const auto it = index_.find(word);
  return it == index_.end() ? kUnknown : it->second;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : tokenize_words(text)) ids.push_back(id(w));
  return ids;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.empty() || tokens.front() != "<unk>") {
    throw ConfigError("vocabulary must start with <unk>");
  }
  Vocabulary v;
  for (std::size_t i = 1; i < tokens.size(); ++i) v.add(tokens[i]);
  if (v.size() != static_cast<int>(tokens.size())) throw ConfigError("duplicate vocabulary entries");
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

TextPrompt make_prompt(std::string_view raw, const Vocabulary& vocab) {
  return TextPrompt{std::string(raw), vocab.encode(raw)};
}

double dot(const Embedding& a, const Embedding& b) {
  if (a.values.size() != b.values.size()) throw InputError("embedding dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    acc += static_cast<double>(a.values[i]) * b.values[i];
  }
  return acc;
}

double cosine(const Embedding& a, const Embedding& b) {
  const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

Embedding normalized(Embedding e) {
  double n = 0.0;
  for (float v : e.values) n += static_cast<double>(v) * v;
  n = std::sqrt(n);
  if (n > 0.0) {
    for (float& v : e.values) v = static_cast<float>(v / n);
  }
  e.normalized = true;
  return e;
}

ClapModel::ClapModel(ClapConfig cfg, Vocabulary vocab, std::uint64_t seed)
    : cfg_(cfg), vocab_(std::move(vocab)) {
  if (cfg_.embed_dim < 1 || cfg_.word_dim < 1 || cfg_.text_hidden < 1 || cfg_.audio_channels < 1) {
    throw ConfigError("clap: dimensions must be positive");
  }
  if (!(cfg_.init_temperature > 0.0)) throw ConfigError("clap: temperature must be positive");
  Rng rng(derive_seed(seed, "clap-init"));
  std::vector<float> table(static_cast<std::size_t>(vocab_.size()) * cfg_.word_dim);
  for (float& v : table) v = static_cast<float>(rng.normal());
  word_table_ = params_.add("text.words", {vocab_.size(), cfg_.word_dim}, std::move(table));
  text_fc1_ = nn::Linear<float>(params_, "text.fc1", cfg_.word_dim, cfg_.text_hidden, rng);
  text_fc2_ = nn::Linear<float>(params_, "text.fc2", cfg_.text_hidden, cfg_.embed_dim, rng);
  const int c = cfg_.audio_channels;
  conv1_ = nn::Conv2d<float>(params_, "audio.conv1", 1, c, 3, 2, 1, rng);
  conv2_ = nn::Conv2d<float>(params_, "audio.conv2", c, 2 * c, 3, 2, 1, rng);
  conv3_ = nn::Conv2d<float>(params_, "audio.conv3", 2 * c, 2 * c, 3, 2, 1, rng);
  audio_proj_ = nn::Linear<float>(params_, "audio.proj", 2 * c, cfg_.embed_dim, rng);
  log_temperature_ = params_.add("log_temperature", {1},
                                 {static_cast<float>(std::log(cfg_.init_temperature))});
}

void ClapModel::check_mel(const MelSpectrogram& m) const {
  if (m.n_mels != cfg_.n_mels || m.frames != cfg_.frames) {
    throw InputError("clap: mel shape (" + std::to_string(m.n_mels) + ", " +
                     std::to_string(m.frames) + ") does not match encoder frontend (" +
                     std::to_string(cfg_.n_mels) + ", " + std::to_string(cfg_.frames) + ")");
  }
}

Var<float> ClapModel::text_forward(const std::vector<std::vector<int>>& tokens) const {
  for (const auto& t : tokens) {
    if (t.empty()) throw InputError("clap: empty token sequence");
  }
  Var<float> h = nn::embedding_mean(word_table_, tokens);
  h = nn::silu(text_fc1_(h));
  return nn::l2_normalize_rows(text_fc2_(h));
}

Var<float> ClapModel::audio_forward(std::span<const MelSpectrogram* const> mels) const {
  const int n = static_cast<int>(mels.size());
  const std::size_t per = static_cast<std::size_t>(cfg_.n_mels) * cfg_.frames;
  std::vector<float> x(per * n);
  const float mean = static_cast<float>(mel_mean_), inv = static_cast<float>(1.0 / mel_std_);
  for (int i = 0; i < n; ++i) {
    check_mel(*mels[i]);
    for (std::size_t j = 0; j < per; ++j) x[i * per + j] = (mels[i]->values[j] - mean) * inv;
  }
  Var<float> h = Var<float>::constant({n, 1, cfg_.n_mels, cfg_.frames}, std::move(x));
  h = nn::silu(conv1_(h));
  h = nn::silu(conv2_(h));
  h = nn::silu(conv3_(h));
  return nn::l2_normalize_rows(audio_proj_(nn::global_avg_pool(h)));
}

Var<float> ClapModel::logit_scale() const { return nn::exp(nn::scale(log_temperature_, -1.0F)); }

double ClapModel::temperature() const { return std::exp(static_cast<double>(log_temperature_.item())); }

namespace {

std::vector<Embedding> rows_to_embeddings(const Var<float>& v) {
  const int n = v.dim(0), d = v.dim(1);
  std::vector<Embedding> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    out[i].values.assign(v.data() + static_cast<std::size_t>(i) * d,
                         v.data() + static_cast<std::size_t>(i + 1) * d);
    out[i].normalized = true;
  }
  return out;
}

}  // namespace

Embedding ClapModel::encode_text(const TextPrompt& p) const {
  nn::NoGradGuard guard;
  return rows_to_embeddings(text_forward({p.tokens})).front();
}

std::vector<Embedding> ClapModel::encode_texts(std::span<const TextPrompt> prompts) const {
  nn::NoGradGuard guard;
  std::vector<std::vector<int>> tokens;
  for (const auto& p : prompts) tokens.push_back(p.tokens);
  if (tokens.empty()) return {};
  return rows_to_embeddings(text_forward(tokens));
}

Embedding ClapModel::encode_audio(const MelSpectrogram& m) const {
  const MelSpectrogram* one[] = {&m};
  nn::NoGradGuard guard;
  return rows_to_embeddings(audio_forward(one)).front();
}

std::vector<Embedding> ClapModel::encode_audio(std::span<const MelSpectrogram> mels) const {
  nn::NoGradGuard guard;
  std::vector<Embedding> out;
  out.reserve(mels.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < mels.size(); start += kChunk) {
    std::vector<const MelSpectrogram*> ptrs;
    for (std::size_t i = start; i < std::min(mels.size(), start + kChunk); ++i) ptrs.push_back(&mels[i]);
    for (auto& e : rows_to_embeddings(audio_forward(ptrs))) out.push_back(std::move(e));
  }
  return out;
}

void ClapModel::set_mel_normalization(double mean, double stddev) {
  if (!(stddev > 0.0) || !std::isfinite(mean)) throw InputError("clap: bad mel normalisation");
  mel_mean_ = mean;
  mel_std_ = stddev;
}

void ClapModel::save(Bundle& b, const std::string& prefix) const {
  store_params(b, prefix, params_);
  auto& meta = b.metadata["clap"];
  meta["embed_dim"] = cfg_.embed_dim;
  meta["word_dim"] = cfg_.word_dim;
  meta["text_hidden"] = cfg_.text_hidden;
  meta["audio_channels"] = cfg_.audio_channels;
  meta["n_mels"] = cfg_.n_mels;
  meta["frames"] = cfg_.frames;
  meta["mel_mean"] = mel_mean_;
  meta["mel_std"] = mel_std_;
  meta["vocab"] = vocab_.tokens();
}

void ClapModel::load(const Bundle& b, const std::string& prefix) {
  load_params(b, prefix, params_);
  const auto& meta = b.metadata.at("clap");
  set_mel_normalization(meta.at("mel_mean").get<double>(), meta.at("mel_std").get<double>());
}

Var<float> contrastive_loss(const ClapModel& model, std::span<const ClapPair> batch) {
  if (batch.size() < 2) throw InputError("contrastive loss needs at least two pairs");
  std::vector<const MelSpectrogram*> mels;
  std::vector<std::vector<int>> tokens;
  for (const auto& p : batch) {
    mels.push_back(p.mel);
    tokens.push_back(p.text.tokens);
  }
  const Var<float> audio = model.audio_forward(mels);
  const Var<float> text = model.text_forward(tokens);
  const Var<float> logits = nn::mul_scalar(nn::matmul_nt(audio, text), model.logit_scale());
  std::vector<int> diag(batch.size());
  std::iota(diag.begin(), diag.end(), 0);
  const Var<float> a2t = nn::cross_entropy_rows(logits, diag);
  const Var<float> t2a = nn::cross_entropy_rows(nn::transpose(logits), diag);
  return nn::scale(nn::add(a2t, t2a), 0.5F);
}

namespace {

std::map<int, std::vector<std::size_t>> group_by_class(std::span<const ClapPair> pairs) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pairs.size(); ++i) groups[pairs[i].class_id].push_back(i);
  return groups;
}

}  // namespace

double heldout_contrastive_loss(const ClapModel& model, std::span<const ClapPair> val,
                                int batch_size) {
  nn::NoGradGuard guard;
  const auto groups = group_by_class(val);
  std::size_t rounds = 0;
  for (const auto& [c, idx] : groups) rounds = std::max(rounds, idx.size());
  double total = 0.0;
  std::size_t weight = 0;
  for (std::size_t r = 0; r < rounds; ++r) {
    std::vector<ClapPair> row;
    for (const auto& [c, idx] : groups) {
      if (r < idx.size()) row.push_back(val[idx[r]]);
    }
    for (std::size_t s = 0; s < row.size(); s += static_cast<std::size_t>(batch_size)) {
      const std::size_t e = std::min(row.size(), s + static_cast<std::size_t>(batch_size));
      if (e - s < 2) continue;
      const double l = contrastive_loss(model, std::span(row).subspan(s, e - s)).item();
      total += l * static_cast<double>(e - s);
      weight += e - s;
    }
  }
  if (weight == 0) throw InputError("held-out set has fewer than two classes");
  return total / static_cast<double>(weight);
}

ClapTrainReport train_contrastive(ClapModel& model, std::span<const ClapPair> train,
                                  std::span<const ClapPair> val, const ClapTrainConfig& cfg) {
  const auto groups = group_by_class(train);
  if (groups.size() < 2) throw InputError("contrastive training needs at least two classes");
  if (cfg.batch_size < 2) throw ConfigError("clap batch size must be >= 2");

  // Normalisation statistics from the training mels.
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (const auto& p : train) {
    for (float v : p.mel->values) {
      sum += v;
      sq += static_cast<double>(v) * v;
    }
    count += p.mel->values.size();
  }
  const double mean = sum / static_cast<double>(count);
  model.set_mel_normalization(mean, std::sqrt(std::max(sq / count - mean * mean, 1e-6)));

  ClapTrainReport report;
  const int val_batch = cfg.batch_size;
  if (!val.empty()) report.init_val_loss = heldout_contrastive_loss(model, val, val_batch);

  std::vector<int> classes;
  for (const auto& [c, idx] : groups) classes.push_back(c);
  const std::size_t per_batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), classes.size());
  nn::Adam<float> opt(model.params(), nn::AdamOptions{cfg.lr, 0.9, 0.999, 1e-8, 5.0});
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, "clap-step", static_cast<std::uint64_t>(step)));
    rng.shuffle(classes.begin(), classes.end());
    std::vector<ClapPair> batch;
    for (std::size_t k = 0; k < per_batch; ++k) {
      const auto& idx = groups.at(classes[k]);
      batch.push_back(train[idx[rng.below(idx.size())]]);
    }
    opt.zero_grad();
    const Var<float> loss = contrastive_loss(model, batch);
    if (!std::isfinite(loss.item())) {
      throw NumericalError("contrastive loss became non-finite at step " + std::to_string(step));
    }
    nn::backward(loss);
    opt.step();
    report.train_losses.push_back(loss.item());
    if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
      std::cerr << "[clap] step " << step + 1 << " loss " << loss.item()
                << " temperature " << model.temperature() << '\n';
    }
  }
  if (!val.empty()) report.final_val_loss = heldout_contrastive_loss(model, val, val_batch);
  return report;
}

double text_to_audio_top1(const ClapModel& model, std::span<const ClapPair> val,
                          const std::map<int, TextPrompt>& class_text) {
  if (val.empty()) throw InputError("retrieval needs held-out pairs");
  std::vector<MelSpectrogram> mels;
  for (const auto& p : val) mels.push_back(*p.mel);
  const auto audio = model.encode_audio(mels);
  std::map<int, Embedding> text;
  for (const auto& [c, prompt] : class_text) text[c] = model.encode_text(prompt);
  const auto groups = group_by_class(val);
  std::map<int, std::size_t> seen;
  int hits = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const int c = val[i].class_id;
    const auto it = text.find(c);
    if (it == text.end()) throw LookupError("no text prompt for class " + std::to_string(c));
    const std::size_t occurrence = seen[c]++;
    const double own = dot(it->second, audio[i]);
    bool hit = true;
    for (const auto& [other, idx] : groups) {
      if (other == c) continue;
      const std::size_t j = idx[occurrence % idx.size()];
      if (dot(it->second, audio[j]) >= own) {
        hit = false;
        break;
      }
    }
    hits += hit ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(val.size());
}

}  // namespace flab
