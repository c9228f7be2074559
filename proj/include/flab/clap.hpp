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
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flab/checkpoint.hpp"
#include "flab/frontend.hpp"
#include "flab/nn/layers.hpp"
#include "flab/synthcorpus.hpp"

namespace flab {

// Lowercased alphanumeric words; every other character separates words.
std::vector<std::string> tokenize_words(std::string_view text);

// Word-level vocabulary. Id 0 is reserved for unknown words.
class Vocabulary {
 public:
  static constexpr int kUnknown = 0;

  Vocabulary();
  // Words from every wrapped text and label in the table plus the adjunct list.
  static Vocabulary build(const LabelTable& table, const std::vector<std::string>& adjunct);
  static const std::vector<std::string>& default_adjuncts();

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  int id(std::string_view word) const;
  std::vector<int> encode(std::string_view text) const;

  // One token per line, in id order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

 private:
  void add(const std::string& word);
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
};

struct TextPrompt {
  std::string raw;
  std::vector<int> tokens;
};

TextPrompt make_prompt(std::string_view raw, const Vocabulary& vocab);

struct Embedding {
  std::vector<float> values;
  bool normalized = false;

  int dim() const { return static_cast<int>(values.size()); }
};

double dot(const Embedding& a, const Embedding& b);
// Cosine similarity, clamped to [-1, 1].
double cosine(const Embedding& a, const Embedding& b);
Embedding normalized(Embedding e);

struct ClapConfig {
  int embed_dim = 64;
  int word_dim = 32;
  int text_hidden = 64;
  int audio_channels = 16;
  double init_temperature = 0.07;
  int n_mels = 64;
  int frames = 394;
};

// Paired text/audio encoders projecting into one normalised space.
class ClapModel {
 public:
  ClapModel(ClapConfig cfg, Vocabulary vocab, std::uint64_t seed);

  const ClapConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  nn::ParamSet<float>& params() { return params_; }
  const nn::ParamSet<float>& params() const { return params_; }

  Embedding encode_text(const TextPrompt& p) const;
  Embedding encode_text(std::string_view text) const { return encode_text(make_prompt(text, vocab_)); }
  Embedding encode_audio(const MelSpectrogram& m) const;
  std::vector<Embedding> encode_audio(std::span<const MelSpectrogram> mels) const;
  std::vector<Embedding> encode_texts(std::span<const TextPrompt> prompts) const;

  // Differentiable forward passes; rows are L2-normalised.
  nn::Var<float> text_forward(const std::vector<std::vector<int>>& tokens) const;
  nn::Var<float> audio_forward(std::span<const MelSpectrogram* const> mels) const;
  nn::Var<float> logit_scale() const;  // 1 / temperature
  double temperature() const;

  void set_mel_normalization(double mean, double stddev);
  double mel_mean() const { return mel_mean_; }
  double mel_std() const { return mel_std_; }

  void save(Bundle& b, const std::string& prefix) const;
  void load(const Bundle& b, const std::string& prefix);

 private:
  void check_mel(const MelSpectrogram& m) const;

  ClapConfig cfg_;
  Vocabulary vocab_;
  nn::ParamSet<float> params_;
  nn::Var<float> word_table_;
  nn::Linear<float> text_fc1_, text_fc2_;
  nn::Conv2d<float> conv1_, conv2_, conv3_;
  nn::Linear<float> audio_proj_;
  nn::Var<float> log_temperature_;
  double mel_mean_ = -5.0;
  double mel_std_ = 4.0;
};

// One contrastive example: an audio clip, its text and its class index.
struct ClapPair {
  const MelSpectrogram* mel;
  TextPrompt text;
  int class_id;
};

// Symmetric InfoNCE over the batch similarity matrix.
nn::Var<float> contrastive_loss(const ClapModel& model, std::span<const ClapPair> batch);

struct ClapTrainConfig {
  int steps = 600;
  int batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int log_every = 0;  // 0 = silent
};

struct ClapTrainReport {
  double init_val_loss = 0.0;
  double final_val_loss = 0.0;
  std::vector<double> train_losses;
};

// Batches draw distinct classes where possible; held-out loss is computed
// on `val` before and after training.
ClapTrainReport train_contrastive(ClapModel& model, std::span<const ClapPair> train,
                                  std::span<const ClapPair> val, const ClapTrainConfig& cfg);

// Deterministic held-out loss over class-distinct batches of `val`.
double heldout_contrastive_loss(const ClapModel& model, std::span<const ClapPair> val,
                                int batch_size);

// Text-to-audio top-1 retrieval: for each held-out clip, the gallery is
// that clip plus one clip of every other class; a hit means the clip's
// class text scores its own clip highest.
double text_to_audio_top1(const ClapModel& model, std::span<const ClapPair> val,
                          const std::map<int, TextPrompt>& class_text);

}  // namespace flab
