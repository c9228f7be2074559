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

// flab: data synthesis, training, generation, evaluation and benchmarks.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flab/benchmark.hpp"
#include "flab/config.hpp"
#include "flab/error.hpp"
#include "flab/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string preset;
  std::string work_dir;
  bool quiet = false;

  flab::RunConfig resolve() const {
    flab::ConfigFile file;
    if (!config.empty()) file = flab::ConfigFile::load(config);
    if (!preset.empty()) file.set("run.preset", preset);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) {
        throw flab::ConfigError("--set expects key=value, got '" + s + "'");
      }
      file.set(s.substr(0, eq), s.substr(eq + 1));
    }
    flab::RunConfig cfg = flab::RunConfig::from_file(file);
    if (!work_dir.empty()) cfg.work_dir = work_dir;
    cfg.validate();
    return cfg;
  }

  flab::LogFn log() const {
    if (quiet) return nullptr;
    return flab::log_stderr;
  }
};

fs::path or_default(const std::string& s, const fs::path& fallback) { return s.empty() ? fallback : fs::path(s); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flab: few-shot sound generation with a text-conditioned latent diffusion model"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("-c,--config", common.config, "Configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", common.sets, "Override one key, e.g. --set ldm.lr=0.0005")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app.add_option("--preset", common.preset, "desk, full, bench or smoke");
  app.add_option("-w,--work-dir", common.work_dir, "Run directory");
  app.add_flag("-q,--quiet", common.quiet, "No progress output");

  auto* show = app.add_subcommand("config", "Print the resolved configuration");

  auto* synth = app.add_subcommand("synth-data", "Synthesise the corpus splits");
  std::string synth_out;
  synth->add_option("-o,--out", synth_out, "Corpus directory (default <work-dir>/corpus)");

  auto* train = app.add_subcommand("train", "Train one stage");
  std::string stage = "pretrain";
  flab::TrainOptions topts;
  std::string t_corpus, t_pretrained, t_output;
  train->add_option("--stage", stage, "pretrain or finetune")->check(CLI::IsMember({"pretrain", "finetune"}));
  train->add_flag("--from-scratch", topts.from_scratch, "Finetune a freshly initialised generator");
  train->add_flag("--force", topts.force, "Accept checkpoints written with another configuration");
  train->add_flag("--restart", topts.restart, "Ignore partial and finished checkpoints");
  train->add_option("--stop-after", topts.stop_after, "Stop after this many generator steps");
  train->add_option("--corpus", t_corpus, "Corpus directory");
  train->add_option("--pretrained", t_pretrained, "Pretrain checkpoint for the finetune stage");
  train->add_option("-o,--output", t_output, "Checkpoint to write");

  auto* gen = app.add_subcommand("generate", "Generate clips for some classes");
  std::string g_ckpt, g_out, g_corpus, g_mode, g_target;
  std::vector<std::string> g_labels;
  int g_count = 0, g_pool = 0;
  std::uint64_t g_seed = 0;
  bool g_seed_set = false;
  gen->add_option("--checkpoint", g_ckpt, "Finetune checkpoint");
  gen->add_option("--labels", g_labels, "Classes (default: every target class)")->delimiter(',');
  gen->add_option("--count", g_count, "Clips per class");
  gen->add_option("--pool", g_pool, "Candidates per clip");
  gen->add_option("--mode", g_mode, "none, top1 or threshold")->check(CLI::IsMember({"none", "top1", "threshold"}));
  gen->add_option("--target", g_target, "tuned_text, text_variant or audio_embedding_pool");
  auto* seed_opt = gen->add_option("--seed", g_seed, "Generation seed");
  gen->add_option("--corpus", g_corpus, "Corpus directory");
  gen->add_option("-o,--out", g_out, "Output directory (default <work-dir>/generated)");

  auto* eval = app.add_subcommand("evaluate", "Per-class and pooled FAD of a generated set");
  std::string e_gen, e_ckpt, e_out, e_corpus, e_ref = "eval";
  eval->add_option("--generated", e_gen, "generated.jsonl or its directory")->required();
  eval->add_option("--checkpoint", e_ckpt, "Checkpoint providing the audio encoder");
  eval->add_option("--reference", e_ref, "Reference split")->check(CLI::IsMember({"train", "val", "eval", "pretrain"}));
  eval->add_option("--corpus", e_corpus, "Corpus directory");
  eval->add_option("-o,--out", e_out, "Report directory (default: the generated directory)");

  auto* calib = app.add_subcommand("calibrate", "Tune per-class selection thresholds on the val split");
  std::string c_ckpt, c_out, c_corpus;
  flab::CalibrateOptions copts;
  calib->add_option("--checkpoint", c_ckpt, "Finetune checkpoint");
  calib->add_option("--labels", copts.labels, "Classes")->delimiter(',');
  calib->add_option("--count", copts.count, "Requests per class");
  calib->add_option("--seed", copts.seed, "Generation seed");
  calib->add_option("--grid", copts.grid, "Threshold grid")->delimiter(',');
  calib->add_option("--corpus", c_corpus, "Corpus directory");
  calib->add_option("-o,--out", c_out, "Output directory (default <work-dir>/calibration)");

  auto* bench = app.add_subcommand("benchmark", "Ablation, repeat and target studies");
  std::string b_out;
  flab::BenchmarkOptions bopts;
  bool no_ablation = false, no_repeats = false, no_targets = false;
  bench->add_option("-o,--out", b_out, "Output directory (default <work-dir>/benchmark)");
  bench->add_flag("--no-ablation", no_ablation, "Skip the ablation rows");
  bench->add_flag("--no-repeats", no_repeats, "Skip the repeat study");
  bench->add_flag("--no-targets", no_targets, "Skip the target study");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : flab::kExitConfig;
  }

  try {
    const flab::RunConfig cfg = common.resolve();
    const flab::Workspace ws{cfg.work_dir};
    const flab::LogFn log = common.log();

    if (*show) {
      std::cout << cfg.to_file().dump();
    } else if (*synth) {
      flab::cmd_synth_data(cfg, or_default(synth_out, ws.corpus()), log);
    } else if (*train) {
      topts.stage = flab::parse_stage(stage);
      topts.corpus_dir = t_corpus;
      topts.pretrained = t_pretrained;
      topts.output = t_output;
      topts.log = log;
      flab::cmd_train(cfg, topts);
    } else if (*gen) {
      g_seed_set = seed_opt->count() > 0;
      flab::GenerateOptions g;
      flab::RunConfig gcfg = cfg;
      if (g_pool > 0) gcfg.select.pool_size = g_pool;
      if (!g_mode.empty()) gcfg.select.mode = g_mode;
      if (!g_target.empty()) gcfg.select.target_source = g_target;
      g.policy = flab::policy_from_config(gcfg);
      g.labels = g_labels;
      g.count = g_count;
      g.seed = g_seed_set ? g_seed : cfg.generate.seed;
      g.corpus_dir = or_default(g_corpus, ws.corpus());
      g.out_dir = or_default(g_out, ws.root / "generated");
      g.log = log;
      const auto models = flab::load_models(or_default(g_ckpt, ws.checkpoint(flab::Stage::finetune)), gcfg);
      const auto r = flab::generate_clips(models, gcfg, g);
      if (log) log("generate: " + std::to_string(r.clips.size()) + " clips written to " + g.out_dir.string());
    } else if (*eval) {
      fs::path file = e_gen;
      if (fs::is_directory(file)) file /= "generated.jsonl";
      if (!fs::exists(file)) throw flab::ConfigError("missing generated manifest " + file.string());
      const auto generated = flab::read_manifest(file, flab::Split::eval);
      const auto models = flab::load_models(or_default(e_ckpt, ws.checkpoint(flab::Stage::finetune)), cfg);
      const fs::path out = or_default(e_out, file.parent_path());
      const auto r = flab::cmd_evaluate(models, cfg, generated, flab::parse_split(e_ref),
                                        or_default(e_corpus, ws.corpus()), out);
      std::cout << "class,F\n";
      for (const auto& row : r.rows) {
        std::cout << row.class_name << ',' << (row.fad ? flab::format_fad(*row.fad) : "") << '\n';
      }
      std::cout << "__pooled__," << (r.pooled ? flab::format_fad(*r.pooled) : "") << '\n';
    } else if (*calib) {
      copts.corpus_dir = or_default(c_corpus, ws.corpus());
      copts.out_dir = or_default(c_out, ws.root / "calibration");
      if (copts.seed == 0) copts.seed = cfg.generate.seed;
      copts.log = log;
      const auto models = flab::load_models(or_default(c_ckpt, ws.checkpoint(flab::Stage::finetune)), cfg);
      const auto r = flab::cmd_calibrate(models, cfg, copts);
      for (const auto& [cls, t] : r.thresholds) std::cout << cls << ' ' << t << '\n';
    } else if (*bench) {
      bopts.ablation = !no_ablation;
      bopts.repeats = !no_repeats;
      bopts.targets = !no_targets;
      bopts.log = log;
      const auto r = flab::cmd_benchmark(cfg, or_default(b_out, ws.root / "benchmark"), bopts);
      for (const auto& e : r.errors) std::cerr << "benchmark error: " << e << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "flab: " << e.what() << '\n';
    return flab::exit_code(e);
  }
  return flab::kExitOk;
}
