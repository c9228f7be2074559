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

#include "flab/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include "flab/error.hpp"
#include "flab/parallel.hpp"
#include "flab/rng.hpp"

namespace flab {

namespace fs = std::filesystem;
using nlohmann::json;

void log_stderr(const std::string& line) { std::cerr << line << std::endl; }

Stage parse_stage(std::string_view s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "finetune") return Stage::finetune;
  throw ConfigError("unknown stage '" + std::string(s) + "' (valid: pretrain, finetune)");
}

std::string_view stage_name(Stage s) { return s == Stage::pretrain ? "pretrain" : "finetune"; }

fs::path Workspace::checkpoint(Stage s) const {
  return checkpoints() / (std::string(stage_name(s)) + ".flab");
}

void write_resolved_config(const RunConfig& cfg, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  cfg.to_file().save(dir / "config.resolved.toml");
}

LabelTable load_label_table(const RunConfig& cfg) {
  return cfg.corpus.label_table.empty() ? LabelTable::defaults()
                                        : LabelTable::load(cfg.corpus.label_table);
}

std::vector<SoundClassSpec> load_target_specs(const RunConfig& cfg) {
  if (cfg.corpus.class_specs.empty()) return target_classes(cfg.audio.duration_s);
  return load_class_specs(cfg.corpus.class_specs);
}

std::vector<SoundClassSpec> load_pretrain_specs(const RunConfig& cfg) {
  if (cfg.corpus.pretrain_specs.empty()) return pretrain_classes(cfg.audio.duration_s);
  return load_class_specs(cfg.corpus.pretrain_specs);
}

std::string label_words(std::string_view label) {
  std::string out;
  for (std::size_t i = 0; i < label.size(); ++i) {
    const char c = label[i];
    if (std::isupper(static_cast<unsigned char>(c)) && i > 0 &&
        std::islower(static_cast<unsigned char>(label[i - 1]))) {
      out.push_back(' ');
    }
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

std::string condition_text(std::string_view label, const RunConfig& cfg, const LabelTable& table) {
  const auto it = cfg.finetune.texts.find(label);
  if (it != cfg.finetune.texts.end()) return it->second;
  if (cfg.finetune.text_mode == "label") return label_words(label);
  return label_to_text(label, table);
}

int clip_frames(const RunConfig& cfg) {
  const auto n = static_cast<std::size_t>(std::llround(cfg.audio.duration_s * cfg.audio.stft.sample_rate));
  return cfg.audio.stft.frames_for(n);
}

ClapConfig clap_config(const RunConfig& cfg) {
  ClapConfig c;
  c.embed_dim = cfg.clap.embed_dim;
  c.word_dim = cfg.clap.word_dim;
  c.text_hidden = cfg.clap.text_hidden;
  c.audio_channels = cfg.clap.audio_channels;
  c.n_mels = cfg.audio.stft.n_mels;
  c.frames = clip_frames(cfg);
  return c;
}

VaeConfig vae_config(const RunConfig& cfg) {
  VaeConfig v;
  v.n_mels = cfg.audio.stft.n_mels;
  v.frames = clip_frames(cfg);
  v.latent_channels = cfg.vae.latent_channels;
  v.hidden = cfg.vae.hidden;
  v.compression = cfg.vae.compression;
  v.kl_weight = cfg.vae.kl_weight;
  return v;
}

UNetConfig unet_config(const RunConfig& cfg) {
  UNetConfig u;
  u.in_channels = cfg.vae.latent_channels;
  u.width = cfg.ldm.width;
  u.cond_dim = cfg.clap.embed_dim;
  u.time_dim = cfg.ldm.time_dim;
  u.cond_hidden = cfg.ldm.cond_hidden;
  return u;
}

void cmd_synth_data(const RunConfig& cfg, const fs::path& corpus_dir, const LogFn& log) {
  cfg.validate();
  const LabelTable table = load_label_table(cfg);
  const auto targets = load_target_specs(cfg);
  const auto pretrain = load_pretrain_specs(cfg);
  const int sr = cfg.audio.stft.sample_rate;
  const auto splits = build_corpus(targets, cfg.corpus.train_per_class, cfg.corpus.split_ratio,
                                   cfg.corpus.seed, table, sr, corpus_dir);
  if (log) log("synth-data: train " + std::to_string(splits.train.entries.size()) + " clips, val " +
      std::to_string(splits.val.entries.size()));
  const auto pre = build_split(pretrain, cfg.corpus.pretrain_per_class, Split::pretrain,
                               cfg.corpus.seed, table, sr, corpus_dir);
  if (log) log("synth-data: pretrain " + std::to_string(pre.entries.size()) + " clips");
  const auto ev = build_split(targets, cfg.corpus.eval_per_class, Split::eval, cfg.corpus.seed,
                              table, sr, corpus_dir);
  if (log) log("synth-data: eval " + std::to_string(ev.entries.size()) + " clips");
  save_class_specs(corpus_dir / "target_classes.json", targets);
  save_class_specs(corpus_dir / "pretrain_classes.json", pretrain);
  table.save(corpus_dir / "label_text.tsv");
  write_resolved_config(cfg, corpus_dir);
}

CorpusManifest load_split(const fs::path& corpus_dir, Split s) {
  const fs::path file = manifest_path(corpus_dir, s);
  if (!fs::exists(file)) {
    throw ConfigError("missing " + std::string(split_name(s)) + " manifest " + file.string() +
                      " (run synth-data first)");
  }
  return read_manifest(file, s);
}

std::vector<MelSpectrogram> load_mels(const CorpusManifest& m, const StftConfig& stft) {
  std::vector<MelSpectrogram> mels(m.entries.size());
  parallel_for(m.entries.size(), [&](std::size_t i) {
    mels[i] = wav_to_mel(read_wav(m.resolve(m.entries[i])), stft);
  });
  return mels;
}

void ModelSet::save(Bundle& b) const {
  if (clap) clap->save(b, "clap.");
  if (vae) vae->save(b, "vae.");
  if (unet) unet->save(b, "unet.");
  if (tuner) {
    tuner->save(b, "tuner.");
    b.metadata["tuner"] = {{"dim", tuner->dim()}, {"trainable", tuner->trainable()}};
  }
  b.metadata["flab"] = info;
  b.metadata["flab"]["schedule_steps"] = schedule.N;
}

namespace {

std::unique_ptr<ClapModel> clap_from(const Bundle& b, const RunConfig& cfg) {
  if (!b.metadata.contains("clap")) throw ConfigError("checkpoint has no text/audio encoder");
  auto vocab = Vocabulary::from_tokens(b.metadata["clap"].at("vocab").get<std::vector<std::string>>());
  auto m = std::make_unique<ClapModel>(clap_config(cfg), std::move(vocab), 0);
  m->load(b, "clap.");
  return m;
}

std::unique_ptr<MelVae> vae_from(const Bundle& b, const RunConfig& cfg) {
  if (!b.metadata.contains("vae")) throw ConfigError("checkpoint has no VAE");
  auto v = std::make_unique<MelVae>(vae_config(cfg), cfg.audio.stft, 0);
  v->load(b, "vae.");
  return v;
}

std::unique_ptr<UNet> unet_from(const Bundle& b, const RunConfig& cfg) {
  if (!b.metadata.contains("unet")) throw ConfigError("checkpoint has no generator");
  auto u = std::make_unique<UNet>(unet_config(cfg), 0);
  u->load(b, "unet.");
  return u;
}

std::unique_ptr<TuningLayer> tuner_from(const Bundle& b, const RunConfig& cfg) {
  auto t = std::make_unique<TuningLayer>(cfg.clap.embed_dim, 0.0, 0);
  t->load(b, "tuner.");
  t->set_trainable(b.metadata.at("tuner").value("trainable", false));
  return t;
}

}  // namespace

ModelSet load_models(const fs::path& file, const RunConfig& cfg) {
  if (!fs::exists(file)) throw ConfigError("missing checkpoint " + file.string());
  const Bundle b = load_bundle(file);
  ModelSet m;
  m.clap = clap_from(b, cfg);
  m.vae = vae_from(b, cfg);
  if (b.metadata.contains("unet")) m.unet = unet_from(b, cfg);
  if (b.metadata.contains("tuner")) m.tuner = tuner_from(b, cfg);
  m.info = b.metadata.value("flab", json::object());
  m.schedule = make_schedule(cfg.ldm.schedule_steps);
  return m;
}

namespace {

struct TrainContext {
  const RunConfig& cfg;
  const TrainOptions& opts;
  Workspace ws;
  fs::path corpus_dir;
  fs::path output;
  fs::path partial;
  std::ofstream log_file;

  void log(const std::string& line) {
    if (opts.log) opts.log(line);
  }
  void log_json(const json& j) {
    log_file << j.dump() << '\n';
    log_file.flush();
  }
};

std::vector<std::string> vocab_extras(const RunConfig& cfg) {
  std::vector<std::string> words = Vocabulary::default_adjuncts();
  for (const auto& t : cfg.benchmark.fixed_texts) words.push_back(t);
  for (const auto& t : cfg.select.variant_texts) words.push_back(t);
  for (const auto& [c, t] : cfg.finetune.texts) words.push_back(t);
  return words;
}

// Contrastive pairs of every clip with its wrapped text and optionally its
// bare label words. Class ids follow the sorted class names.
std::vector<ClapPair> clap_pairs(const std::vector<const CorpusManifest*>& manifests,
                                 const std::vector<const std::vector<MelSpectrogram>*>& mels,
                                 const ClapModel& model, bool label_prompts) {
  std::set<std::string> names;
  for (const auto* m : manifests) {
    for (const auto& e : m->entries) names.insert(e.class_name);
  }
  const std::vector<std::string> order(names.begin(), names.end());
  auto class_id = [&](const std::string& n) {
    return static_cast<int>(std::lower_bound(order.begin(), order.end(), n) - order.begin());
  };
  std::vector<ClapPair> pairs;
  for (std::size_t k = 0; k < manifests.size(); ++k) {
    const auto& m = *manifests[k];
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
      const auto& e = m.entries[i];
      pairs.push_back({&(*mels[k])[i], make_prompt(e.text, model.vocab()), class_id(e.class_name)});
      if (label_prompts) {
        pairs.push_back({&(*mels[k])[i], make_prompt(label_words(e.class_name), model.vocab()),
                         class_id(e.class_name)});
      }
    }
  }
  return pairs;
}

void train_encoder_and_vae(TrainContext& ctx, ModelSet& models,
                           const std::vector<const CorpusManifest*>& manifests,
                           const std::vector<const std::vector<MelSpectrogram>*>& mels,
                           const CorpusManifest& val, const std::vector<MelSpectrogram>& val_mels,
                           json& progress, Bundle& partial) {
  const RunConfig& cfg = ctx.cfg;
  if (!progress.value("clap", false)) {
    const LabelTable table = load_label_table(cfg);
    Vocabulary vocab = Vocabulary::build(table, vocab_extras(cfg));
    models.clap = std::make_unique<ClapModel>(clap_config(cfg), std::move(vocab), derive_seed(cfg.seed, "clap"));
    const auto train = clap_pairs(manifests, mels, *models.clap, cfg.clap.label_prompts);
    const auto valp = clap_pairs({&val}, {&val_mels}, *models.clap, false);
    ClapTrainConfig tc;
    tc.steps = cfg.clap.steps;
    tc.batch_size = cfg.clap.batch;
    tc.lr = cfg.clap.lr;
    tc.seed = derive_seed(cfg.seed, "clap-train");
    const auto rep = train_contrastive(*models.clap, train, valp, tc);
    ctx.log("clap: held-out loss " + std::to_string(rep.init_val_loss) + " -> " +
            std::to_string(rep.final_val_loss));
    ctx.log_json({{"phase", "clap"}, {"init_val_loss", rep.init_val_loss}, {"final_val_loss", rep.final_val_loss}});
    progress["clap"] = true;
    models.clap->save(partial, "clap.");
  }
  if (!progress.value("vae", false)) {
    std::vector<MelSpectrogram> all;
    for (const auto* m : mels) all.insert(all.end(), m->begin(), m->end());
    models.vae = std::make_unique<MelVae>(vae_config(cfg), cfg.audio.stft, derive_seed(cfg.seed, "vae"));
    VaeTrainConfig vc;
    vc.steps = cfg.vae.steps;
    vc.batch_size = cfg.vae.batch;
    vc.lr = cfg.vae.lr;
    vc.seed = derive_seed(cfg.seed, "vae-train");
    const auto rep = train_vae(*models.vae, all, val_mels, vc);
    ctx.log("vae: held-out MAE " + std::to_string(rep.init_val_mae) + " -> " +
            std::to_string(rep.final_val_mae));
    ctx.log_json({{"phase", "vae"}, {"init_val_mae", rep.init_val_mae}, {"final_val_mae", rep.final_val_mae}});
    progress["vae"] = true;
    models.vae->save(partial, "vae.");
  }
}

int stage_steps(int steps, double epochs, std::size_t n_clips, int batch) {
  if (epochs <= 0.0) return steps;
  const double per_epoch = std::ceil(static_cast<double>(n_clips) / batch);
  return static_cast<int>(std::ceil(epochs * per_epoch));
}

std::vector<LatentTensor> standardized_latents(const MelVae& vae, std::span<const MelSpectrogram> mels) {
  auto z = vae.encode(mels);
  for (auto& t : z) t = vae.standardize(std::move(t));
  return z;
}

void write_bundle(const fs::path& path, const Bundle& b) {
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  save_bundle(tmp, b);
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

void check_hash(const json& info, const std::string& expected, bool force, const std::string& what) {
  const std::string got = info.value("config_hash", std::string());
  if (got != expected && !force) {
    throw ConfigError(what + " was written with a different configuration (hash " + got + ", expected " +
                      expected + "); pass --force to use it anyway");
  }
}

// Runs the generator optimisation with periodic partial saves; returns
// false when stopped early.
bool run_ldm(TrainContext& ctx, ModelSet& models, LdmTrainer& trainer, int total,
             std::span<const LatentTensor> latents, const ConditionFn& condition, Bundle& partial,
             json& progress, TrainResult& result, const std::function<void(int)>& on_eval) {
  const RunConfig& cfg = ctx.cfg;
  auto save_partial = [&] {
    models.unet->save(partial, "unet.");
    if (models.tuner) {
      models.tuner->save(partial, "tuner.");
      partial.metadata["tuner"] = {{"dim", models.tuner->dim()}, {"trainable", models.tuner->trainable()}};
    }
    trainer.save_state(partial, "trainer.");
    progress["ldm_steps"] = trainer.steps_done();
    partial.metadata["flab"]["progress"] = progress;
    write_bundle(ctx.partial, partial);
  };
  const int log_every = std::max(1, total / 20);
  while (trainer.steps_done() < total) {
    if (ctx.opts.stop_after >= 0 && trainer.steps_done() >= ctx.opts.stop_after) {
      save_partial();
      ctx.log("stopped after " + std::to_string(trainer.steps_done()) + " generator steps");
      return false;
    }
    const double loss = trainer.step(latents, condition);
    result.ldm_losses.push_back(loss);
    const auto done = trainer.steps_done();
    if (done % log_every == 0 || done == total) {
      ctx.log("ldm step " + std::to_string(done) + "/" + std::to_string(total) + " loss " + std::to_string(loss));
      ctx.log_json({{"phase", "ldm"}, {"step", done}, {"loss", loss}});
    }
    if (cfg.ldm.eval_every > 0 && done % cfg.ldm.eval_every == 0 && on_eval) on_eval(static_cast<int>(done));
    if (cfg.ldm.checkpoint_every > 0 && done % cfg.ldm.checkpoint_every == 0 && done < total) save_partial();
  }
  result.ldm_steps_done = trainer.steps_done();
  return true;
}

std::vector<std::vector<float>> condition_rows_matrix(const std::vector<Embedding>& e) {
  std::vector<std::vector<float>> rows;
  for (const auto& x : e) rows.push_back(x.values);
  return rows;
}

ConditionFn rows_condition(const std::vector<std::vector<float>>& rows, int dim) {
  return [&rows, dim](std::span<const std::size_t> idx) {
    std::vector<float> flat;
    flat.reserve(idx.size() * static_cast<std::size_t>(dim));
    for (std::size_t i : idx) flat.insert(flat.end(), rows[i].begin(), rows[i].end());
    return nn::Var<float>::constant({static_cast<int>(idx.size()), dim}, std::move(flat));
  };
}

TrainResult train_pretrain(TrainContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  TrainResult result;
  result.checkpoint = ctx.output;
  const std::string hash = cfg.pretrain_hash();

  ModelSet models;
  models.schedule = make_schedule(cfg.ldm.schedule_steps);
  Bundle partial;
  json progress = json::object();
  if (!ctx.opts.restart && fs::exists(ctx.partial)) {
    partial = load_bundle(ctx.partial);
    check_hash(partial.metadata.value("flab", json::object()), hash, ctx.opts.force, "partial checkpoint");
    progress = partial.metadata["flab"].value("progress", json::object());
    if (progress.value("clap", false)) models.clap = clap_from(partial, cfg);
    if (progress.value("vae", false)) models.vae = vae_from(partial, cfg);
    ctx.log("resuming pretrain from " + ctx.partial.string());
  }
  partial.metadata["flab"] = {{"stage", "pretrain"}, {"config_hash", hash}, {"seed", cfg.seed}};

  const CorpusManifest pre = load_split(ctx.corpus_dir, Split::pretrain);
  const CorpusManifest train = load_split(ctx.corpus_dir, Split::train);
  const CorpusManifest val = load_split(ctx.corpus_dir, Split::val);
  const auto pre_mels = load_mels(pre, cfg.audio.stft);
  const auto train_mels = load_mels(train, cfg.audio.stft);
  const auto val_mels = load_mels(val, cfg.audio.stft);
  train_encoder_and_vae(ctx, models, {&pre, &train}, {&pre_mels, &train_mels}, val, val_mels, progress, partial);
  partial.metadata["flab"]["progress"] = progress;
  write_bundle(ctx.partial, partial);

  // Audio-embedding conditions on the pretraining corpus.
  const auto latents = standardized_latents(*models.vae, pre_mels);
  const auto cond_rows = condition_rows_matrix(models.clap->encode_audio(pre_mels));
  const ConditionFn condition = rows_condition(cond_rows, cfg.clap.embed_dim);

  models.unet = std::make_unique<UNet>(unet_config(cfg), derive_seed(cfg.seed, "unet"));
  LdmTrainConfig tc;
  tc.batch_size = cfg.ldm.batch;
  tc.lr = cfg.ldm.lr;
  tc.cond_dropout = cfg.ldm.cond_dropout;
  tc.seed = derive_seed(cfg.seed, "ldm-pretrain");
  LdmTrainer trainer(*models.unet, nullptr, models.schedule, tc);
  if (partial.metadata["flab"]["progress"].value("ldm_steps", 0) > 0) {
    models.unet->load(partial, "unet.");
    trainer.load_state(partial, "trainer.");
  }
  const int total = stage_steps(cfg.ldm.pretrain_steps, cfg.ldm.pretrain_epochs, latents.size(), cfg.ldm.batch);
  std::function<void(int)> on_eval;
  if (cfg.ldm.eval_every > 0) {
    const auto val_latents = standardized_latents(*models.vae, val_mels);
    auto val_rows = std::make_shared<std::vector<std::vector<float>>>(
        condition_rows_matrix(models.clap->encode_audio(val_mels)));
    on_eval = [&ctx, &models, val_latents, val_rows, &cfg](int step) {
      const double l = ldm_eval_loss(*models.unet, val_latents, rows_condition(*val_rows, cfg.clap.embed_dim),
                                     models.schedule, derive_seed(cfg.seed, "ldm-val"));
      ctx.log("ldm step " + std::to_string(step) + " held-out loss " + std::to_string(l));
      ctx.log_json({{"phase", "ldm-eval"}, {"step", step}, {"val_loss", l}});
    };
  }
  if (!run_ldm(ctx, models, trainer, total, latents, condition, partial, progress, result, on_eval)) {
    return result;
  }
  models.info = {{"stage", "pretrain"},
                 {"config_hash", hash},
                 {"seed", cfg.seed},
                 {"lineage", json::array({"pretrain:" + hash})},
                 {"ldm_steps", trainer.steps_done()},
                 {"complete", true}};
  Bundle out;
  models.save(out);
  write_bundle(ctx.output, out);
  std::error_code ec;
  fs::remove(ctx.partial, ec);
  result.complete = true;
  result.ldm_steps_done = trainer.steps_done();
  ctx.log("pretrain checkpoint written to " + ctx.output.string());
  return result;
}

TrainResult train_finetune(TrainContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  TrainResult result;
  result.checkpoint = ctx.output;
  const std::string hash = cfg.finetune_hash();
  const fs::path pretrained = ctx.opts.pretrained.empty() ? ctx.ws.checkpoint(Stage::pretrain) : ctx.opts.pretrained;
  const bool have_pretrained = fs::exists(pretrained);
  if (!have_pretrained && !ctx.opts.from_scratch) {
    throw ConfigError("finetune needs the pretrain checkpoint " + pretrained.string() +
                      " (train --stage pretrain first, or pass --from-scratch)");
  }

  ModelSet models;
  models.schedule = make_schedule(cfg.ldm.schedule_steps);
  Bundle partial;
  json progress = json::object();
  json lineage = json::array();
  Bundle upstream;
  if (have_pretrained) {
    upstream = load_bundle(pretrained);
    const json info = upstream.metadata.value("flab", json::object());
    if (info.value("stage", std::string()) != "pretrain") {
      throw ConfigError(pretrained.string() + " is not a pretrain checkpoint");
    }
    check_hash(info, cfg.pretrain_hash(), ctx.opts.force, "pretrain checkpoint " + pretrained.string());
    lineage = info.value("lineage", json::array());
  }
  lineage.push_back(std::string(ctx.opts.from_scratch ? "scratch:" : "finetune:") + hash);

  if (!ctx.opts.restart && fs::exists(ctx.partial)) {
    partial = load_bundle(ctx.partial);
    const json info = partial.metadata.value("flab", json::object());
    check_hash(info, hash, ctx.opts.force, "partial checkpoint");
    if (info.value("from_scratch", false) != ctx.opts.from_scratch) {
      throw ConfigError("partial checkpoint was started with a different --from-scratch setting");
    }
    progress = info.value("progress", json::object());
    ctx.log("resuming finetune from " + ctx.partial.string());
  }
  partial.metadata["flab"] = {{"stage", "finetune"}, {"config_hash", hash}, {"seed", cfg.seed},
                              {"from_scratch", ctx.opts.from_scratch}};

  const CorpusManifest train = load_split(ctx.corpus_dir, Split::train);
  const CorpusManifest val = load_split(ctx.corpus_dir, Split::val);
  const auto train_mels = load_mels(train, cfg.audio.stft);
  const auto val_mels = load_mels(val, cfg.audio.stft);

  if (have_pretrained) {
    models.clap = clap_from(upstream, cfg);
    models.vae = vae_from(upstream, cfg);
  } else {
    // No upstream at all: encoder and VAE learn from the small set alone.
    if (progress.value("clap", false)) models.clap = clap_from(partial, cfg);
    if (progress.value("vae", false)) models.vae = vae_from(partial, cfg);
    train_encoder_and_vae(ctx, models, {&train}, {&train_mels}, val, val_mels, progress, partial);
  }
  models.clap->save(partial, "clap.");
  models.vae->save(partial, "vae.");

  const LabelTable table = load_label_table(cfg);
  std::map<std::string, std::vector<float>, std::less<>> class_text;
  for (const auto& name : train.class_names()) {
    class_text[name] = models.clap->encode_text(condition_text(name, cfg, table)).values;
  }
  std::vector<const std::vector<float>*> rows;
  for (const auto& e : train.entries) rows.push_back(&class_text.at(e.class_name));

  const bool use_tuner = cfg.finetune.tuner != "off";
  models.tuner = std::make_unique<TuningLayer>(cfg.clap.embed_dim, use_tuner ? cfg.finetune.tuner_noise_std : 0.0,
                                               derive_seed(cfg.seed, "tuner"));
  models.tuner->set_trainable(cfg.finetune.tuner == "joint");
  const int dim = cfg.clap.embed_dim;
  TuningLayer& tuner = *models.tuner;
  const ConditionFn condition = [&rows, &tuner, dim](std::span<const std::size_t> idx) {
    std::vector<float> flat;
    flat.reserve(idx.size() * static_cast<std::size_t>(dim));
    for (std::size_t i : idx) flat.insert(flat.end(), rows[i]->begin(), rows[i]->end());
    return tuner.forward(nn::Var<float>::constant({static_cast<int>(idx.size()), dim}, std::move(flat)));
  };

  if (ctx.opts.from_scratch) {
    models.unet = std::make_unique<UNet>(unet_config(cfg), derive_seed(cfg.seed, "unet-scratch"));
  } else {
    models.unet = unet_from(upstream, cfg);
  }
  LdmTrainConfig tc;
  tc.batch_size = cfg.ldm.batch;
  tc.lr = cfg.ldm.lr;
  tc.extra_lr = cfg.finetune.tuner_lr;
  tc.cond_dropout = cfg.ldm.cond_dropout;
  tc.seed = derive_seed(cfg.seed, "ldm-finetune");
  LdmTrainer trainer(*models.unet, tuner.trainable() ? &tuner.params() : nullptr, models.schedule, tc);
  if (progress.value("ldm_steps", 0) > 0) {
    models.unet->load(partial, "unet.");
    tuner.load(partial, "tuner.");
    trainer.load_state(partial, "trainer.");
  }
  partial.metadata["flab"]["progress"] = progress;
  write_bundle(ctx.partial, partial);

  const auto latents = standardized_latents(*models.vae, train_mels);
  const int total = stage_steps(cfg.ldm.finetune_steps, cfg.ldm.finetune_epochs, latents.size(), cfg.ldm.batch);
  std::function<void(int)> on_eval;
  if (cfg.ldm.eval_every > 0) {
    on_eval = [&](int step) {
      GenerateOptions g;
      g.count = std::max(2, std::min(cfg.generate.count, 8));
      g.seed = derive_seed(cfg.seed, "val-fad");
      g.policy.mode = SelectMode::none;
      g.policy.pool_size = 1;
      g.corpus_dir = ctx.corpus_dir;
      g.log = nullptr;
      const auto gen = generate_clips(models, cfg, g);
      EmbeddingsByClass ref;
      const auto val_emb = models.clap->encode_audio(val_mels);
      for (std::size_t i = 0; i < val.entries.size(); ++i) ref[val.entries[i].class_name].push_back(val_emb[i]);
      const FadReport r = evaluate_fad(embeddings_of(gen), ref, extractor_id(*models.clap));
      const double pooled = r.pooled.value_or(std::nan(""));
      ctx.log("ldm step " + std::to_string(step) + " validation FAD " + std::to_string(pooled));
      ctx.log_json({{"phase", "ldm-eval"}, {"step", step}, {"val_fad", pooled}});
    };
  }
  if (!run_ldm(ctx, models, trainer, total, latents, condition, partial, progress, result, on_eval)) {
    return result;
  }
  models.info = {{"stage", "finetune"},
                 {"config_hash", hash},
                 {"pretrain_hash", cfg.pretrain_hash()},
                 {"seed", cfg.seed},
                 {"from_scratch", ctx.opts.from_scratch},
                 {"tuner", cfg.finetune.tuner},
                 {"text_mode", cfg.finetune.text_mode},
                 {"lineage", lineage},
                 {"ldm_steps", trainer.steps_done()},
                 {"complete", true}};
  Bundle out;
  models.save(out);
  write_bundle(ctx.output, out);
  std::error_code ec;
  fs::remove(ctx.partial, ec);
  result.complete = true;
  result.ldm_steps_done = trainer.steps_done();
  ctx.log("finetune checkpoint written to " + ctx.output.string());
  return result;
}

}  // namespace

TrainResult cmd_train(const RunConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const Workspace ws{cfg.work_dir};
  const fs::path output = opts.output.empty() ? ws.checkpoint(opts.stage) : opts.output;
  TrainContext ctx{cfg, opts, ws, opts.corpus_dir.empty() ? ws.corpus() : opts.corpus_dir, output,
                   output.string() + ".partial", {}};
  std::error_code ec;
  fs::create_directories(ws.logs(), ec);
  fs::create_directories(output.parent_path(), ec);
  ctx.log_file.open(ws.logs() / ("train-" + std::string(stage_name(opts.stage)) + ".jsonl"), std::ios::app);
  write_resolved_config(cfg, output.parent_path());
  if (!opts.restart && fs::exists(output)) {
    const json info = load_bundle(output).metadata.value("flab", json::object());
    const std::string hash = opts.stage == Stage::pretrain ? cfg.pretrain_hash() : cfg.finetune_hash();
    if (info.value("complete", false) && info.value("stage", std::string()) == stage_name(opts.stage) &&
        info.value("config_hash", std::string()) == hash &&
        info.value("from_scratch", false) == (opts.stage == Stage::finetune && opts.from_scratch)) {
      ctx.log(output.string() + " is up to date");
      return {output, true, {}, info.value("ldm_steps", std::int64_t{0})};
    }
  }
  return opts.stage == Stage::pretrain ? train_pretrain(ctx) : train_finetune(ctx);
}

void quantize_pcm16(Waveform& w) {
  for (float& x : w.samples) {
    x = static_cast<float>(std::lround(std::clamp(x, -1.0F, 1.0F) * 32767.0F)) / 32767.0F;
  }
}

std::string extractor_id(const ClapModel& clap) {
  Bundle b;
  clap.save(b, "");
  return "clap-" + hex_digest(serialize_bundle(b));
}

AudioEmbedder clap_embedder(const ClapModel& clap, const StftConfig& stft) {
  return [&clap, stft](std::span<const Waveform> clips) {
    std::vector<MelSpectrogram> mels(clips.size());
    parallel_for(clips.size(), [&](std::size_t i) { mels[i] = wav_to_mel(clips[i], stft); });
    return clap.encode_audio(mels);
  };
}

SelectionPolicy policy_from_config(const RunConfig& cfg) {
  SelectionPolicy p;
  p.pool_size = cfg.select.pool_size;
  p.mode = parse_select_mode(cfg.select.mode);
  p.target_source = parse_target_source(cfg.select.target_source);
  p.backfill = cfg.select.backfill;
  p.thresholds = cfg.select.thresholds;
  p.seed = cfg.generate.seed;
  p.validate();
  return p;
}

namespace {

std::vector<std::string> resolve_labels(std::span<const std::string> requested, const RunConfig& cfg) {
  std::vector<std::string> valid;
  for (const auto& s : load_target_specs(cfg)) valid.push_back(s.name);
  if (requested.empty()) return valid;
  for (const auto& l : requested) {
    if (std::find(valid.begin(), valid.end(), l) == valid.end()) {
      std::string list;
      for (const auto& v : valid) list += (list.empty() ? "" : ", ") + v;
      throw LookupError("unknown label '" + l + "' (valid labels: " + list + ")");
    }
  }
  return {requested.begin(), requested.end()};
}

Embedding conditioned(const ModelSet& m, const Embedding& text) {
  return m.tuner ? m.tuner->apply(text) : text;
}

}  // namespace

TargetSet build_targets(const ModelSet& models, const RunConfig& cfg, TargetSource source,
                        std::span<const std::string> labels, const fs::path& corpus_dir) {
  TargetSet t;
  const LabelTable table = load_label_table(cfg);
  switch (source) {
    case TargetSource::tuned_text:
      for (const auto& l : labels) {
        t.per_class[l] = {normalized(conditioned(models, models.clap->encode_text(condition_text(l, cfg, table))))};
      }
      break;
    case TargetSource::text_variant:
      for (const auto& l : labels) {
        auto& v = t.per_class[l];
        if (cfg.select.variant_texts.empty()) {
          v.push_back(models.clap->encode_text(condition_text(l, cfg, table)));
        }
        for (const auto& text : cfg.select.variant_texts) v.push_back(models.clap->encode_text(text));
      }
      break;
    case TargetSource::audio_embedding_pool: {
      const CorpusManifest train = load_split(corpus_dir, Split::train);
      for (const auto& l : labels) {
        CorpusManifest one;
        one.root = train.root;
        std::vector<std::string> ids;
        for (const auto* e : train.of_class(l)) {
          one.entries.push_back(*e);
          ids.push_back(e->clip_id);
        }
        if (ids.empty()) throw InputError("no training clips for class " + l);
        const auto emb = models.clap->encode_audio(load_mels(one, cfg.audio.stft));
        const int m = std::min<int>(cfg.select.target_pool_m, static_cast<int>(ids.size()));
        for (auto& entry : build_audio_target_pool(ids, emb, m)) t.per_class[l].push_back(std::move(entry.embedding));
      }
      break;
    }
  }
  return t;
}

GenerationResult generate_clips(const ModelSet& models, const RunConfig& cfg, const GenerateOptions& opts) {
  if (!models.unet || !models.tuner) throw ConfigError("generation needs a finetune checkpoint");
  const auto labels = resolve_labels(opts.labels, cfg);
  const int count = opts.count > 0 ? opts.count : cfg.generate.count;
  const SelectionPolicy& policy = opts.policy;
  policy.validate();
  const int k_pool = policy.pool_size;
  const LabelTable table = load_label_table(cfg);
  const VaeConfig vc = models.vae->config();
  const int ch = vc.latent_channels, hh = vc.latent_height(), ww = vc.latent_width();
  const Vocoder vocoder(VocoderConfig{cfg.generate.vocoder_iters, cfg.audio.stft});
  SamplerConfig sc;
  sc.steps = cfg.ldm.sampler_steps;
  sc.clip_x0 = cfg.ldm.clip_x0;
  const Denoiser<float> denoiser = models.unet->as_denoiser();
  TargetSet targets;
  if (policy.mode != SelectMode::none) {
    targets = build_targets(models, cfg, policy.target_source, labels,
                            opts.corpus_dir.empty() ? Workspace{cfg.work_dir}.corpus() : opts.corpus_dir);
  }

  GenerationResult result;
  result.manifest.split = Split::eval;
  result.manifest.root = opts.out_dir;
  const int chunk_requests = std::max(1, 64 / k_pool);
  for (const auto& label : labels) {
    const std::string text = condition_text(label, cfg, table);
    const std::vector<float> cond = conditioned(models, models.clap->encode_text(text)).values;
    const std::uint64_t class_tag = hash_tag(label);
    int emitted = 0;
    for (int start = 0; start < count; start += chunk_requests) {
      const int n_req = std::min(chunk_requests, count - start);
      const int n = n_req * k_pool;
      std::vector<std::vector<float>> conds(static_cast<std::size_t>(n), cond);
      std::vector<std::uint64_t> seeds;
      for (int j = start; j < start + n_req; ++j) {
        for (int k = 0; k < k_pool; ++k) {
          seeds.push_back(derive_seed(opts.seed, "generate", class_tag, static_cast<std::uint64_t>(j),
                                      static_cast<std::uint64_t>(k)));
        }
      }
      auto latents = ddpm_sample(denoiser, conds, seeds, models.schedule, ch, hh, ww, sc);
      for (auto& z : latents) z = models.vae->destandardize(std::move(z));
      const auto mels = models.vae->decode(latents);
      std::vector<Waveform> audio(static_cast<std::size_t>(n));
      parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        audio[i] = vocoder.mel_to_wav(mels[i], derive_seed(seeds[i], "vocoder"));
        quantize_pcm16(audio[i]);
      });
      const auto emb = clap_embedder(*models.clap, cfg.audio.stft)(audio);
      for (int r = 0; r < n_req; ++r) {
        const int j = start + r;
        CandidatePool pool;
        for (int k = 0; k < k_pool; ++k) {
          pool.push_back({std::to_string(k), emb[static_cast<std::size_t>(r * k_pool + k)], 0.0});
        }
        int chosen = 0;
        std::vector<double> scores;
        if (policy.mode != SelectMode::none) {
          const auto& tl = targets.per_class.at(label);
          const auto pick = multi_target_select(pool, tl, policy, label, 1,
                                                derive_seed(opts.seed, "select", class_tag, static_cast<std::uint64_t>(j)),
                                                &scores);
          chosen = std::stoi(pick.front());
          for (int k = 0; k < k_pool; ++k) pool[static_cast<std::size_t>(k)].score = scores[static_cast<std::size_t>(k)];
          if (policy.mode == SelectMode::threshold && !policy.backfill &&
              scores[static_cast<std::size_t>(chosen)] < policy.threshold_for(label)) {
            continue;
          }
        }
        if (opts.keep_pools) result.pools[label].push_back(pool);
        GeneratedClip clip;
        char id[32];
        std::snprintf(id, sizeof id, "%04d", j);
        clip.clip_id = label + "_gen_" + id;
        clip.class_name = label;
        clip.audio = std::move(audio[static_cast<std::size_t>(r * k_pool + chosen)]);
        clip.embedding = pool[static_cast<std::size_t>(chosen)].audio;
        clip.scores = std::move(scores);
        clip.chosen = chosen;
        result.manifest.entries.push_back({clip.clip_id, label, text,
                                           seeds[static_cast<std::size_t>(r * k_pool + chosen)],
                                           "audio/" + label + "/" + clip.clip_id + ".wav"});
        result.clips.push_back(std::move(clip));
        ++emitted;
      }
    }
    if (opts.log) opts.log("generate: " + label + " " + std::to_string(emitted) + " clips");
  }

  if (!opts.out_dir.empty()) {
    std::error_code ec;
    for (const auto& l : labels) fs::create_directories(opts.out_dir / "audio" / l, ec);
    if (ec) throw IoError("cannot create " + opts.out_dir.string() + ": " + ec.message());
    for (std::size_t i = 0; i < result.clips.size(); ++i) {
      write_wav(opts.out_dir / result.manifest.entries[i].path, result.clips[i].audio);
    }
    write_manifest(opts.out_dir / "generated.jsonl", result.manifest);
    std::ofstream side(opts.out_dir / "scores.jsonl");
    for (const auto& c : result.clips) {
      side << json{{"clip_id", c.clip_id}, {"class", c.class_name}, {"chosen", c.chosen}, {"scores", c.scores}}.dump()
           << '\n';
    }
    if (!side) throw IoError("cannot write scores sidecar in " + opts.out_dir.string());
    write_resolved_config(cfg, opts.out_dir);
  }
  return result;
}

EmbeddingsByClass embeddings_of(const GenerationResult& r) {
  EmbeddingsByClass out;
  for (const auto& c : r.clips) out[c.class_name].push_back(c.embedding);
  return out;
}

EmbeddingsByClass reference_embeddings(const ModelSet& models, const RunConfig& cfg, const fs::path& corpus_dir,
                                       Split split, const fs::path& cache_dir) {
  const CorpusManifest m = load_split(corpus_dir, split);
  const std::string extractor = extractor_id(*models.clap);
  std::error_code ec;
  fs::create_directories(cache_dir, ec);
  EmbeddingCache cache(cache_dir / ("embeddings-" + std::string(split_name(split)) + ".flab"), extractor);
  return embed_manifest(m, clap_embedder(*models.clap, cfg.audio.stft), &cache);
}

FadReport cmd_evaluate(const ModelSet& models, const RunConfig& cfg, const CorpusManifest& generated,
                       Split reference, const fs::path& corpus_dir, const fs::path& out_dir) {
  const auto ref = reference_embeddings(models, cfg, corpus_dir, reference, Workspace{cfg.work_dir}.cache());
  const auto gen = embed_manifest(generated, clap_embedder(*models.clap, cfg.audio.stft));
  EmbeddingsByClass ref_all = ref;
  for (const auto& s : load_target_specs(cfg)) ref_all[s.name];
  FadReport r = evaluate_fad(gen, ref_all, extractor_id(*models.clap));
  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    write_fad_csv(out_dir / "fad.csv", r);
    write_fad_jsonl(out_dir / "fad.jsonl", r);
  }
  return r;
}

CalibrationResult cmd_calibrate(const ModelSet& models, const RunConfig& cfg, const CalibrateOptions& opts) {
  const fs::path corpus_dir = opts.corpus_dir.empty() ? Workspace{cfg.work_dir}.corpus() : opts.corpus_dir;
  const auto labels = resolve_labels(opts.labels, cfg);
  SelectionPolicy policy = policy_from_config(cfg);
  if (policy.mode == SelectMode::none) policy.mode = SelectMode::top1;
  GenerateOptions g;
  g.labels = labels;
  g.count = opts.count;
  g.seed = opts.seed;
  g.policy = policy;
  g.corpus_dir = corpus_dir;
  g.log = opts.log;
  g.keep_pools = true;
  const GenerationResult gen = generate_clips(models, cfg, g);

  const auto val = reference_embeddings(models, cfg, corpus_dir, Split::val, Workspace{cfg.work_dir}.cache());
  std::vector<double> grid = opts.grid;
  if (grid.empty()) grid = cfg.select.grid.empty() ? default_threshold_grid() : cfg.select.grid;
  const CalibrationResult r = calibrate_thresholds(gen.pools, val, grid, policy.backfill);
  if (!opts.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(opts.out_dir, ec);
    write_calibration_csv(opts.out_dir / "calibration.csv", r);
    RunConfig tuned = cfg;
    for (const auto& [cls, t] : r.thresholds) tuned.select.thresholds[cls] = t;
    tuned.select.mode = "threshold";
    tuned.to_file().save(opts.out_dir / "calibrated.toml");
  }
  return r;
}

double clap_alignment(const RunConfig& cfg, const fs::path& corpus_dir, const LogFn& log) {
  cfg.validate();
  const LabelTable table = load_label_table(cfg);
  const CorpusManifest train = load_split(corpus_dir, Split::train);
  const CorpusManifest val = load_split(corpus_dir, Split::val);
  const auto train_mels = load_mels(train, cfg.audio.stft);
  const auto val_mels = load_mels(val, cfg.audio.stft);
  ClapModel model(clap_config(cfg), Vocabulary::build(table, vocab_extras(cfg)), derive_seed(cfg.seed, "clap"));
  const auto train_pairs = clap_pairs({&train}, {&train_mels}, model, cfg.clap.label_prompts);
  const auto val_pairs = clap_pairs({&val}, {&val_mels}, model, false);
  ClapTrainConfig tc;
  tc.steps = cfg.clap.steps;
  tc.batch_size = cfg.clap.batch;
  tc.lr = cfg.clap.lr;
  tc.seed = derive_seed(cfg.seed, "clap-train");
  const auto rep = train_contrastive(model, train_pairs, val_pairs, tc);
  auto names = train.class_names();
  std::sort(names.begin(), names.end());
  std::map<int, TextPrompt> class_text;
  for (std::size_t i = 0; i < names.size(); ++i) {
    class_text[static_cast<int>(i)] = make_prompt(label_to_text(names[i], table), model.vocab());
  }
  const double top1 = text_to_audio_top1(model, val_pairs, class_text);
  if (log) {
    log("clap alignment seed " + std::to_string(cfg.seed) + ": held-out loss " +
        std::to_string(rep.init_val_loss) + " -> " + std::to_string(rep.final_val_loss) + ", top-1 " +
        std::to_string(top1));
  }
  return top1;
}

}  // namespace flab
