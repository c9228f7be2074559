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
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flab/checkpoint.hpp"
#include "flab/clap.hpp"
#include "flab/config.hpp"
#include "flab/diffusion.hpp"
#include "flab/fad.hpp"
#include "flab/selector.hpp"
#include "flab/synthcorpus.hpp"
#include "flab/tuner.hpp"
#include "flab/vae.hpp"
#include "flab/vocoder.hpp"

namespace flab {

using LogFn = std::function<void(const std::string&)>;

// Writes to stderr.
void log_stderr(const std::string& line);

enum class Stage { pretrain, finetune };
Stage parse_stage(std::string_view s);
std::string_view stage_name(Stage s);

// Layout of a run directory.
struct Workspace {
  std::filesystem::path root;

  std::filesystem::path corpus() const { return root / "corpus"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path checkpoint(Stage s) const;
  std::filesystem::path cache() const { return root / "cache"; }
  std::filesystem::path logs() const { return root / "logs"; }
};

// Writes the resolved configuration as <dir>/config.resolved.toml.
void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& dir);

LabelTable load_label_table(const RunConfig& cfg);
std::vector<SoundClassSpec> load_target_specs(const RunConfig& cfg);
std::vector<SoundClassSpec> load_pretrain_specs(const RunConfig& cfg);

// The class name split into lowercase words: "DogBark" -> "dog bark".
std::string label_words(std::string_view label);
// Conditioning text of a class under the finetune settings.
std::string condition_text(std::string_view label, const RunConfig& cfg, const LabelTable& table);

ClapConfig clap_config(const RunConfig& cfg);
VaeConfig vae_config(const RunConfig& cfg);
UNetConfig unet_config(const RunConfig& cfg);
int clip_frames(const RunConfig& cfg);

// Synthesises the train/val, pretrain and eval splits below corpus_dir.
void cmd_synth_data(const RunConfig& cfg, const std::filesystem::path& corpus_dir,
                    const LogFn& log = log_stderr);

CorpusManifest load_split(const std::filesystem::path& corpus_dir, Split s);
std::vector<MelSpectrogram> load_mels(const CorpusManifest& m, const StftConfig& stft);

// Every trained component of a run plus the checkpoint metadata.
struct ModelSet {
  std::unique_ptr<ClapModel> clap;
  std::unique_ptr<MelVae> vae;
  std::unique_ptr<UNet> unet;
  std::unique_ptr<TuningLayer> tuner;  // absent in pretrain checkpoints
  NoiseSchedule schedule;
  nlohmann::json info;  // metadata["flab"]

  void save(Bundle& b) const;
};

// Loads a checkpoint written by cmd_train. Shapes come from `cfg`.
ModelSet load_models(const std::filesystem::path& file, const RunConfig& cfg);

struct TrainOptions {
  Stage stage = Stage::pretrain;
  bool from_scratch = false;  // finetune: fresh generator instead of the pretrained one
  bool force = false;         // accept configuration hash mismatches
  bool restart = false;       // ignore a partial checkpoint
  int stop_after = -1;        // stop after this many generator steps (testing resumes)
  std::filesystem::path corpus_dir;   // empty: <work_dir>/corpus
  std::filesystem::path pretrained;   // empty: the workspace pretrain checkpoint
  std::filesystem::path output;       // empty: the workspace checkpoint of the stage
  LogFn log = log_stderr;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  bool complete = false;
  std::vector<double> ldm_losses;  // losses of the steps run in this call
  std::int64_t ldm_steps_done = 0;
};

TrainResult cmd_train(const RunConfig& cfg, const TrainOptions& opts);

// Target embeddings each class is scored against.
struct TargetSet {
  std::map<std::string, std::vector<Embedding>, std::less<>> per_class;
};

TargetSet build_targets(const ModelSet& models, const RunConfig& cfg, TargetSource source,
                        std::span<const std::string> labels, const std::filesystem::path& corpus_dir);

struct GenerateOptions {
  std::vector<std::string> labels;  // empty: every target class
  int count = 0;                    // 0: generate.count
  std::uint64_t seed = 0;
  SelectionPolicy policy;
  std::filesystem::path out_dir;  // empty: nothing written
  std::filesystem::path corpus_dir;
  bool keep_pools = false;  // keep every scored candidate pool
  LogFn log = log_stderr;
};

struct GeneratedClip {
  std::string clip_id;
  std::string class_name;
  Waveform audio;       // 16-bit quantised, as written
  Embedding embedding;  // of `audio`
  std::vector<double> scores;  // of every candidate in the request's pool
  int chosen = 0;
};

struct GenerationResult {
  std::vector<GeneratedClip> clips;
  CorpusManifest manifest;
  std::map<std::string, std::vector<CandidatePool>, std::less<>> pools;
};

// Per class and request: K candidates sampled, decoded, vocoded, scored and
// reduced to one clip by the selection policy. Candidate (class, request, k)
// depends only on the seed, never on K's neighbours or thread count.
GenerationResult generate_clips(const ModelSet& models, const RunConfig& cfg,
                                const GenerateOptions& opts);

// Rounds samples to the 16-bit grid used by WAV output.
void quantize_pcm16(Waveform& w);

EmbeddingsByClass embeddings_of(const GenerationResult& r);
// Audio embedder built on the frozen CLAP encoder.
AudioEmbedder clap_embedder(const ClapModel& clap, const StftConfig& stft);
std::string extractor_id(const ClapModel& clap);

// Embeddings of a reference split, cached below the workspace.
EmbeddingsByClass reference_embeddings(const ModelSet& models, const RunConfig& cfg,
                                       const std::filesystem::path& corpus_dir, Split split,
                                       const std::filesystem::path& cache_dir);

FadReport cmd_evaluate(const ModelSet& models, const RunConfig& cfg,
                       const CorpusManifest& generated, Split reference,
                       const std::filesystem::path& corpus_dir, const std::filesystem::path& out_dir);

struct CalibrateOptions {
  std::vector<std::string> labels;
  int count = 0;  // requests per class; 0: generate.count
  std::uint64_t seed = 0;
  std::vector<double> grid;  // empty: select.grid or the default grid
  std::filesystem::path corpus_dir;
  std::filesystem::path out_dir;
  LogFn log = log_stderr;
};

// Thresholds tuned against the val split; the report and a config with the
// thresholds filled in are written to out_dir.
CalibrationResult cmd_calibrate(const ModelSet& models, const RunConfig& cfg,
                                const CalibrateOptions& opts);

SelectionPolicy policy_from_config(const RunConfig& cfg);

// Trains the encoders on the train split alone (seeded by cfg.seed) and
// returns text-to-audio top-1 retrieval on val, each class queried with
// its wrapped text.
double clap_alignment(const RunConfig& cfg, const std::filesystem::path& corpus_dir,
                      const LogFn& log = log_stderr);

}  // namespace flab
