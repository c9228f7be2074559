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

#include <gtest/gtest.h>

#include <cmath>

#include "flab/clap.hpp"
#include "flab/error.hpp"
#include "flab/nn/ops.hpp"
#include "flab/rng.hpp"

namespace flab {
namespace {

ClapConfig small_config() {
  ClapConfig c;
  c.n_mels = 16;
  c.frames = 20;
  c.audio_channels = 4;
  return c;
}

MelSpectrogram random_mel(int n_mels, int frames, std::uint64_t seed) {
  MelSpectrogram m;
  m.n_mels = n_mels;
  m.frames = frames;
  m.values.resize(static_cast<std::size_t>(n_mels) * frames);
  Rng rng(seed);
  for (float& v : m.values) v = static_cast<float>(rng.normal(-5.0, 2.0));
  return m;
}

Vocabulary test_vocab() { return Vocabulary::build(LabelTable::defaults(), Vocabulary::default_adjuncts()); }

TEST(Tokenizer, LowercasesAndSplits) {
  EXPECT_EQ(tokenize_words("Someone using Keyboard!"),
            (std::vector<std::string>{"someone", "using", "keyboard"}));
  EXPECT_TRUE(tokenize_words("  -- ").empty());
}

TEST(Vocabulary, CoversTableAndRoundTrips) {
  const Vocabulary v = test_vocab();
  EXPECT_EQ(v.tokens().front(), "<unk>");
  const LabelTable table = LabelTable::defaults();
  for (const auto& [label, text] : table.rows()) {
    for (int id : v.encode(text)) {
      EXPECT_GT(id, 0);
      EXPECT_LT(id, v.size());
    }
  }
  EXPECT_EQ(v.id("zyzzyva"), Vocabulary::kUnknown);
  EXPECT_EQ(Vocabulary::from_tokens(v.tokens()).tokens(), v.tokens());
  EXPECT_THROW(Vocabulary::from_tokens({"a", "b"}), ConfigError);
}

TEST(Clap, EmbeddingsAreDeterministicAndNormalised) {
  const ClapModel model(small_config(), test_vocab(), 3);
  const Embedding a = model.encode_text("a dog bark");
  const Embedding b = model.encode_text("a dog bark");
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.dim(), 64);
  EXPECT_TRUE(a.normalized);
  EXPECT_NEAR(dot(a, a), 1.0, 1e-6);

  const MelSpectrogram m = random_mel(16, 20, 1);
  const Embedding x = model.encode_audio(m);
  EXPECT_EQ(x.values, model.encode_audio(m).values);
  EXPECT_EQ(x.dim(), 64);
  EXPECT_NEAR(dot(x, x), 1.0, 1e-6);
  const double c = cosine(a, x);
  EXPECT_GE(c, -1.0);
  EXPECT_LE(c, 1.0);

  std::vector<MelSpectrogram> batch = {m, random_mel(16, 20, 2)};
  const auto both = model.encode_audio(std::span<const MelSpectrogram>(batch));
  for (std::size_t i = 0; i < x.values.size(); ++i) EXPECT_NEAR(both[0].values[i], x.values[i], 1e-6);
}

TEST(Clap, ContractErrors) {
  const ClapModel model(small_config(), test_vocab(), 3);
  EXPECT_THROW(model.encode_text(TextPrompt{"", {}}), InputError);
  EXPECT_THROW(model.encode_audio(random_mel(16, 21, 1)), InputError);
  EXPECT_THROW(model.encode_audio(random_mel(15, 20, 1)), InputError);
}

TEST(Clap, InitialLossIsNearLogBatch) {
  const ClapModel model(small_config(), test_vocab(), 5);
  const Vocabulary& v = model.vocab();
  std::vector<MelSpectrogram> mels;
  for (int i = 0; i < 8; ++i) mels.push_back(random_mel(16, 20, 100 + i));
  const char* texts[] = {"a dog bark", "rain falling", "a gun shot", "footsteps on the floor",
                         "someone using keyboard", "a moving motor vehicle", "a siren", "a whistle"};
  std::vector<ClapPair> batch;
  for (int i = 0; i < 8; ++i) batch.push_back({&mels[i], make_prompt(texts[i], v), i});
  const double loss = contrastive_loss(model, batch).item();
  // Unit vectors scaled by 1/0.07 keep logits within about +-14; random init
  // leaves them far from confident, so the loss sits near log 8.
  EXPECT_GT(loss, std::log(8.0) * 0.5);
  EXPECT_LT(loss, std::log(8.0) * 2.5);
  EXPECT_NEAR(model.temperature(), 0.07, 1e-6);
}

TEST(Clap, LossIsSymmetricInAudioAndText) {
  // Swapping roles transposes the logit matrix; the symmetric loss averages
  // both directions, so computing each direction by hand must agree.
  const ClapModel model(small_config(), test_vocab(), 6);
  std::vector<MelSpectrogram> mels;
  for (int i = 0; i < 4; ++i) mels.push_back(random_mel(16, 20, 200 + i));
  const char* texts[] = {"a dog bark", "rain falling", "a gun shot", "a siren"};
  std::vector<ClapPair> batch;
  std::vector<const MelSpectrogram*> ptrs;
  std::vector<std::vector<int>> tokens;
  for (int i = 0; i < 4; ++i) {
    batch.push_back({&mels[i], make_prompt(texts[i], model.vocab()), i});
    ptrs.push_back(&mels[i]);
    tokens.push_back(batch.back().text.tokens);
  }
  const double loss = contrastive_loss(model, batch).item();
  const auto a = model.audio_forward(ptrs);
  const auto t = model.text_forward(tokens);
  const std::vector<int> diag = {0, 1, 2, 3};
  const auto s = model.logit_scale();
  const double a2t = nn::cross_entropy_rows(nn::mul_scalar(nn::matmul_nt(a, t), s), diag).item();
  const double t2a = nn::cross_entropy_rows(nn::mul_scalar(nn::matmul_nt(t, a), s), diag).item();
  EXPECT_NEAR(loss, 0.5 * (a2t + t2a), 1e-5);
}

TEST(Clap, TrainingLowersHeldOutLossAndStaysPositive) {
  ClapModel model(small_config(), test_vocab(), 7);
  // Two classes separated by a constant offset in the mel.
  std::vector<MelSpectrogram> mels;
  for (int i = 0; i < 40; ++i) {
    MelSpectrogram m = random_mel(16, 20, 300 + i);
    const int cls = i % 2;
    for (int r = 0; r < 16; ++r) {
      for (int f = 0; f < 20; ++f) m.at(r, f) += (cls == 0) == (r < 8) ? 3.0F : -3.0F;
    }
    mels.push_back(std::move(m));
  }
  std::vector<ClapPair> train, val;
  for (int i = 0; i < 40; ++i) {
    ClapPair p{&mels[i], make_prompt(i % 2 == 0 ? "a dog bark" : "rain falling", model.vocab()), i % 2};
    (i < 32 ? train : val).push_back(p);
  }
  ClapTrainConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 2;
  cfg.lr = 3e-3;
  cfg.seed = 1;
  const ClapTrainReport r = train_contrastive(model, train, val, cfg);
  EXPECT_LT(r.final_val_loss, r.init_val_loss);
  EXPECT_GT(model.temperature(), 0.0);
  std::map<int, TextPrompt> texts = {{0, make_prompt("a dog bark", model.vocab())},
                                     {1, make_prompt("rain falling", model.vocab())}};
  EXPECT_GE(text_to_audio_top1(model, val, texts), 0.9);

  ClapModel again(small_config(), test_vocab(), 7);
  const ClapTrainReport r2 = train_contrastive(again, train, val, cfg);
  EXPECT_EQ(r.train_losses, r2.train_losses);

  std::vector<ClapPair> one_class(train.begin(), train.begin() + 1);
  EXPECT_THROW(train_contrastive(again, one_class, val, cfg), InputError);
}

TEST(Clap, CheckpointRoundTrip) {
  ClapModel a(small_config(), test_vocab(), 8);
  a.set_mel_normalization(-4.0, 3.0);
  Bundle b;
  a.save(b, "clap.");
  ClapModel c(small_config(), Vocabulary::from_tokens(b.metadata["clap"]["vocab"]), 99);
  c.load(b, "clap.");
  const MelSpectrogram m = random_mel(16, 20, 9);
  EXPECT_EQ(a.encode_audio(m).values, c.encode_audio(m).values);
  EXPECT_EQ(a.encode_text("rain falling").values, c.encode_text("rain falling").values);
}

}  // namespace
}  // namespace flab
