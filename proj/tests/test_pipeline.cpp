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

#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>

#include "flab/benchmark.hpp"
#include "flab/config.hpp"
#include "flab/error.hpp"
#include "flab/pipeline.hpp"
#include "flab/rng.hpp"
#include "test_util.hpp"

namespace flab {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

TEST(Config, PresetsRoundTripThroughText) {
  for (const char* name : {"desk", "full", "bench", "smoke"}) {
    const RunConfig c = RunConfig::preset_named(name);
    const std::string text = c.to_file().dump();
    const RunConfig back = RunConfig::from_file(ConfigFile::parse(text));
    EXPECT_EQ(back.to_file().dump(), text) << name;
    EXPECT_EQ(back.pretrain_hash(), c.pretrain_hash()) << name;
    EXPECT_EQ(back.finetune_hash(), c.finetune_hash()) << name;
    EXPECT_NO_THROW(c.validate()) << name;
  }
}

TEST(Config, ParsesSectionsListsAndQuotes) {
  const ConfigFile f = ConfigFile::parse(
      "# comment\n[run]\npreset = smoke\n[select]\nvariant_texts = [\"a dog\", bark]  # trailing\n"
      "[texts]\nDogBark = \"a loud dog\"\n[ldm]\nlr = 0.0005\n");
  const RunConfig c = RunConfig::from_file(f);
  EXPECT_EQ(c.preset, "smoke");
  EXPECT_EQ(c.select.variant_texts, (std::vector<std::string>{"a dog", "bark"}));
  EXPECT_EQ(c.finetune.texts.at("DogBark"), "a loud dog");
  EXPECT_DOUBLE_EQ(c.ldm.lr, 0.0005);
  EXPECT_EQ(c.audio.stft.sample_rate, RunConfig::preset_named("smoke").audio.stft.sample_rate);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(RunConfig::from_file(ConfigFile::parse("[ldm]\nlearning_rate = 1\n")), ConfigError);
  EXPECT_THROW(RunConfig::from_file(ConfigFile::parse("[ldm]\nlr = fast\n")), ConfigError);
  EXPECT_THROW(RunConfig::from_file(ConfigFile::parse("[run]\npreset = huge\n")), ConfigError);
  EXPECT_THROW(ConfigFile::parse("[ldm\nlr = 1\n"), ConfigError);
  RunConfig c = RunConfig::preset_named("smoke");
  c.select.pool_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, StageHashesTrackTheirSettings) {
  const RunConfig base = RunConfig::preset_named("smoke");
  RunConfig c = base;
  c.finetune.tuner = "frozen";
  c.ldm.finetune_steps += 1;
  c.select.pool_size += 1;
  EXPECT_EQ(c.pretrain_hash(), base.pretrain_hash());
  EXPECT_NE(c.finetune_hash(), base.finetune_hash());
  c = base;
  c.select.pool_size += 1;
  EXPECT_EQ(c.finetune_hash(), base.finetune_hash());
  c.clap.steps += 1;
  EXPECT_NE(c.pretrain_hash(), base.pretrain_hash());
  c = base;
  c.seed = 7;
  EXPECT_NE(c.pretrain_hash(), base.pretrain_hash());
}

TEST(Config, LabelWords) {
  EXPECT_EQ(label_words("DogBark"), "dog bark");
  EXPECT_EQ(label_words("MovingMotorVehicle"), "moving motor vehicle");
}

// One smoke workspace with corpus and pretrain checkpoint shared by the
// tests below.
class SmokePipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = std::make_unique<test::TempDir>();
    cfg_ = RunConfig::preset_named("smoke");
    cfg_.work_dir = (dir_->path() / "run").string();
    cmd_synth_data(cfg_, Workspace{cfg_.work_dir}.corpus(), nullptr);
    TrainOptions t;
    t.stage = Stage::pretrain;
    t.log = nullptr;
    cmd_train(cfg_, t);
    t.stage = Stage::finetune;
    cmd_train(cfg_, t);
  }
  static void TearDownTestSuite() { dir_.reset(); }

  static TrainOptions finetune_to(const fs::path& out) {
    TrainOptions t;
    t.stage = Stage::finetune;
    t.output = out;
    t.log = nullptr;
    return t;
  }

  static inline std::unique_ptr<test::TempDir> dir_;
  static inline RunConfig cfg_;
};

TEST_F(SmokePipeline, SynthDataIsDeterministic) {
  test::TempDir other;
  cmd_synth_data(cfg_, other.path(), nullptr);
  const fs::path mine = Workspace{cfg_.work_dir}.corpus();
  for (const char* f : {"train.jsonl", "val.jsonl", "pretrain.jsonl", "eval.jsonl", "label_text.tsv"}) {
    EXPECT_EQ(slurp(other.path() / f), slurp(mine / f)) << f;
  }
  const auto m = load_split(mine, Split::train);
  ASSERT_FALSE(m.entries.empty());
  EXPECT_EQ(slurp(other.path() / m.entries.front().path), slurp(m.resolve(m.entries.front())));
  EXPECT_EQ(m.class_names().size(), 7U);
}

TEST_F(SmokePipeline, FinetuneWithoutPretrainIsConfigError) {
  test::TempDir empty;
  RunConfig c = cfg_;
  c.work_dir = empty.path().string();
  TrainOptions t = finetune_to(empty.path() / "ft.flab");
  t.corpus_dir = Workspace{cfg_.work_dir}.corpus();
  EXPECT_THROW(cmd_train(c, t), ConfigError);
  EXPECT_FALSE(fs::exists(empty.path() / "ft.flab"));
}

TEST_F(SmokePipeline, PretrainHashMismatchNeedsForce) {
  RunConfig c = cfg_;
  c.clap.steps += 1;
  const fs::path out = dir_->path() / "mismatch.flab";
  EXPECT_THROW(cmd_train(c, finetune_to(out)), ConfigError);
  TrainOptions t = finetune_to(out);
  t.force = true;
  EXPECT_TRUE(cmd_train(c, t).complete);
}

TEST_F(SmokePipeline, ResumeMatchesUninterruptedRun) {
  const fs::path a = dir_->path() / "a.flab";
  const fs::path b = dir_->path() / "b.flab";
  const TrainResult full = cmd_train(cfg_, finetune_to(a));
  ASSERT_TRUE(full.complete);
  TrainOptions stop = finetune_to(b);
  stop.stop_after = 3;
  const TrainResult first = cmd_train(cfg_, stop);
  EXPECT_FALSE(first.complete);
  EXPECT_TRUE(fs::exists(b.string() + ".partial"));
  EXPECT_FALSE(fs::exists(b));
  const TrainResult rest = cmd_train(cfg_, finetune_to(b));
  ASSERT_TRUE(rest.complete);
  std::vector<double> joined = first.ldm_losses;
  joined.insert(joined.end(), rest.ldm_losses.begin(), rest.ldm_losses.end());
  EXPECT_EQ(joined, full.ldm_losses);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_FALSE(fs::exists(b.string() + ".partial"));
}

TEST_F(SmokePipeline, CompleteCheckpointIsReusedUnlessRestarted) {
  const fs::path out = dir_->path() / "reuse.flab";
  ASSERT_TRUE(cmd_train(cfg_, finetune_to(out)).complete);
  const std::string bytes = slurp(out);
  const TrainResult again = cmd_train(cfg_, finetune_to(out));
  EXPECT_TRUE(again.complete);
  EXPECT_TRUE(again.ldm_losses.empty());
  TrainOptions r = finetune_to(out);
  r.restart = true;
  EXPECT_FALSE(cmd_train(cfg_, r).ldm_losses.empty());
  EXPECT_EQ(slurp(out), bytes);
}

TEST_F(SmokePipeline, FromScratchLineageIsDistinct) {
  const fs::path pre = dir_->path() / "lineage-pre.flab";
  const fs::path scratch = dir_->path() / "lineage-scratch.flab";
  cmd_train(cfg_, finetune_to(pre));
  TrainOptions s = finetune_to(scratch);
  s.from_scratch = true;
  cmd_train(cfg_, s);
  const ModelSet a = load_models(pre, cfg_);
  const ModelSet b = load_models(scratch, cfg_);
  EXPECT_FALSE(a.info.at("from_scratch").get<bool>());
  EXPECT_TRUE(b.info.at("from_scratch").get<bool>());
  EXPECT_NE(a.info.at("lineage").dump(), b.info.at("lineage").dump());
  EXPECT_EQ(a.info.at("lineage").front(), "pretrain:" + cfg_.pretrain_hash());
  EXPECT_NE(slurp(pre), slurp(scratch));
}

TEST_F(SmokePipeline, FrozenTunerStaysAtInitialisation) {
  Embedding probe;
  Rng rng(5);
  for (int i = 0; i < cfg_.clap.embed_dim; ++i) probe.values.push_back(static_cast<float>(rng.normal()));
  const TuningLayer init(cfg_.clap.embed_dim, cfg_.finetune.tuner_noise_std, derive_seed(cfg_.seed, "tuner"));

  RunConfig frozen = cfg_;
  frozen.finetune.tuner = "frozen";
  const fs::path f = dir_->path() / "frozen.flab";
  cmd_train(frozen, finetune_to(f));
  const ModelSet fm = load_models(f, frozen);
  ASSERT_TRUE(fm.tuner);
  EXPECT_FALSE(fm.tuner->trainable());
  EXPECT_EQ(fm.tuner->apply(probe).values, init.apply(probe).values);

  RunConfig joint = cfg_;
  joint.finetune.tuner = "joint";
  const fs::path j = dir_->path() / "joint.flab";
  cmd_train(joint, finetune_to(j));
  const ModelSet jm = load_models(j, joint);
  EXPECT_TRUE(jm.tuner->trainable());
  EXPECT_NE(jm.tuner->apply(probe).values, init.apply(probe).values);
}

TEST_F(SmokePipeline, GenerateWritesClipsAndSidecar) {
  const ModelSet models = load_models(Workspace{cfg_.work_dir}.checkpoint(Stage::finetune), cfg_);
  test::TempDir out;
  GenerateOptions g;
  g.labels = {"DogBark", "Rain"};
  g.count = 3;
  g.seed = 11;
  g.policy.pool_size = 2;
  g.policy.mode = SelectMode::top1;
  g.out_dir = out.path();
  g.log = nullptr;
  const GenerationResult r = generate_clips(models, cfg_, g);
  ASSERT_EQ(r.clips.size(), 6U);
  EXPECT_EQ(count_lines(out.path() / "generated.jsonl"), 6U);
  EXPECT_EQ(count_lines(out.path() / "scores.jsonl"), 6U);
  EXPECT_TRUE(fs::exists(out.path() / "config.resolved.toml"));
  for (const auto& c : r.clips) {
    ASSERT_EQ(c.scores.size(), 2U);
    EXPECT_GE(c.scores[static_cast<std::size_t>(c.chosen)], c.scores[static_cast<std::size_t>(1 - c.chosen)]);
    EXPECT_TRUE(fs::exists(out.path() / "audio" / c.class_name / (c.clip_id + ".wav")));
  }

  test::TempDir again;
  g.out_dir = again.path();
  generate_clips(models, cfg_, g);
  for (const auto& e : r.manifest.entries) EXPECT_EQ(slurp(out.path() / e.path), slurp(again.path() / e.path));
  EXPECT_EQ(slurp(out.path() / "scores.jsonl"), slurp(again.path() / "scores.jsonl"));
}

TEST_F(SmokePipeline, CandidatesDoNotDependOnPoolSize) {
  const ModelSet models = load_models(Workspace{cfg_.work_dir}.checkpoint(Stage::finetune), cfg_);
  GenerateOptions g;
  g.labels = {"Keyboard"};
  g.count = 2;
  g.seed = 3;
  g.policy.pool_size = 1;
  g.policy.mode = SelectMode::none;
  g.keep_pools = true;
  g.log = nullptr;
  const auto one = generate_clips(models, cfg_, g);
  g.policy.pool_size = 3;
  const auto three = generate_clips(models, cfg_, g);
  ASSERT_EQ(three.pools.at("Keyboard").size(), 2U);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_EQ(one.clips[j].audio.samples, three.clips[j].audio.samples);
    EXPECT_EQ(three.pools.at("Keyboard")[j].size(), 3U);
  }
}

TEST_F(SmokePipeline, UnknownLabelIsLookupError) {
  const ModelSet models = load_models(Workspace{cfg_.work_dir}.checkpoint(Stage::finetune), cfg_);
  GenerateOptions g;
  g.labels = {"Thunder"};
  g.log = nullptr;
  EXPECT_THROW(generate_clips(models, cfg_, g), LookupError);
}

TEST_F(SmokePipeline, GenerationNeedsFinetuneCheckpoint) {
  const ModelSet models = load_models(Workspace{cfg_.work_dir}.checkpoint(Stage::pretrain), cfg_);
  GenerateOptions g;
  g.log = nullptr;
  EXPECT_THROW(generate_clips(models, cfg_, g), ConfigError);
}

TEST_F(SmokePipeline, SelfEvaluationIsNearZero) {
  const ModelSet models = load_models(Workspace{cfg_.work_dir}.checkpoint(Stage::finetune), cfg_);
  const fs::path corpus = Workspace{cfg_.work_dir}.corpus();
  const auto eval = load_split(corpus, Split::eval);
  test::TempDir out;
  const FadReport r = cmd_evaluate(models, cfg_, eval, Split::eval, corpus, out.path());
  ASSERT_TRUE(r.pooled.has_value());
  EXPECT_NEAR(*r.pooled, 0.0, 1e-6);
  EXPECT_EQ(r.rows.size(), 7U);
  for (const auto& row : r.rows) {
    ASSERT_TRUE(row.fad.has_value()) << row.class_name;
    EXPECT_NEAR(*row.fad, 0.0, 1e-6) << row.class_name;
  }
  EXPECT_TRUE(fs::exists(out.path() / "fad.csv"));
  EXPECT_TRUE(fs::exists(out.path() / "fad.jsonl"));
}

TEST_F(SmokePipeline, CalibrationPicksGridThresholds) {
  const ModelSet models = load_models(Workspace{cfg_.work_dir}.checkpoint(Stage::finetune), cfg_);
  test::TempDir out;
  CalibrateOptions c;
  c.labels = {"DogBark", "GunShot"};
  c.count = 4;
  c.seed = 2;
  c.grid = {-1.0, 0.0, 0.5};
  c.out_dir = out.path();
  c.log = nullptr;
  const CalibrationResult r = cmd_calibrate(models, cfg_, c);
  ASSERT_EQ(r.thresholds.size(), 2U);
  for (const auto& [cls, t] : r.thresholds) {
    EXPECT_TRUE(t == -1.0 || t == 0.0 || t == 0.5) << cls;
  }
  const RunConfig tuned = RunConfig::load(out.path() / "calibrated.toml");
  EXPECT_EQ(tuned.select.mode, "threshold");
  EXPECT_EQ(tuned.select.thresholds.at("DogBark"), r.thresholds.at("DogBark"));
  EXPECT_EQ(count_lines(out.path() / "calibration.csv"), 1U + 2U * 3U);
}

TEST(Benchmark, QuartilesAndRows) {
  EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(median({1.0, 2.0, 3.0, 4.0}), 2.5);
  EXPECT_DOUBLE_EQ(interquartile_range({1.0, 2.0, 3.0, 4.0, 5.0}), 2.0);
  EXPECT_DOUBLE_EQ(interquartile_range({7.0}), 0.0);
  EXPECT_THROW(median({}), InputError);
  EXPECT_TRUE(ablation_row("LDM-S").from_scratch);
  EXPECT_EQ(ablation_row("+Tuned").tuner, "joint");
  EXPECT_EQ(ablation_row("+Filter").mode, SelectMode::top1);
  EXPECT_THROW(ablation_row("+Magic"), ConfigError);
}

TEST(Benchmark, SmokeRunWritesEveryReport) {
  test::TempDir dir;
  RunConfig c = RunConfig::preset_named("smoke");
  c.benchmark.seeds = {1};
  c.benchmark.repeat_runs = 2;
  c.benchmark.target_seeds = 1;
  BenchmarkOptions o;
  o.log = nullptr;
  const BenchmarkReport r = cmd_benchmark(c, dir.path(), o);
  EXPECT_TRUE(r.errors.empty());
  for (const auto& row : c.benchmark.rows) EXPECT_TRUE(r.mean_pooled(row).has_value()) << row;
  EXPECT_EQ(count_lines(dir.path() / "ablation.csv"), 1U + c.benchmark.rows.size());
  EXPECT_EQ(count_lines(dir.path() / "repeats.csv"), 1U + 2U * (c.benchmark.fixed_texts.size() + 1));
  EXPECT_EQ(count_lines(dir.path() / "targets.csv"), 1U + 3U);
  EXPECT_TRUE(fs::exists(dir.path() / "seed-1" / "rows" / "ldm-s" / "fad.csv"));
}

}  // namespace
}  // namespace flab
