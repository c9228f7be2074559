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

#include "flab/benchmark.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <tuple>

#include "flab/error.hpp"
#include "flab/rng.hpp"

namespace flab {

namespace fs = std::filesystem;

AblationRow ablation_row(const std::string& name) {
  if (name == "LDM-S") return {name, true, "label", "off", SelectMode::none};
  if (name == "+Pre") return {name, false, "label", "off", SelectMode::none};
  if (name == "+Text") return {name, false, "wrapped", "off", SelectMode::none};
  if (name == "+Filter") return {name, false, "wrapped", "off", SelectMode::top1};
  if (name == "+Tuned") return {name, false, "wrapped", "joint", SelectMode::top1};
  throw ConfigError("unknown benchmark row '" + name + "' (valid: LDM-S, +Pre, +Text, +Filter, +Tuned)");
}

namespace {

constexpr const char* kPooled = "__pooled__";

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string cell(const std::optional<double>& v) { return v ? format_fad(*v) : std::string(); }

std::string slug(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!out.empty() && out.back() != '-') {
      out += '-';
    }
  }
  while (!out.empty() && out.back() == '-') out.pop_back();
  return out.empty() ? "x" : out;
}

// A finetuned generator is identified by how it was trained.
using VariantKey = std::tuple<bool, std::string, std::string>;

std::string variant_name(const VariantKey& k) {
  return std::string(std::get<0>(k) ? "scratch" : "pre") + "-" + std::get<1>(k) + "-" + std::get<2>(k);
}

RunConfig variant_config(const RunConfig& base, const std::string& text_mode, const std::string& tuner) {
  RunConfig c = base;
  c.finetune.text_mode = text_mode;
  c.finetune.tuner = tuner;
  return c;
}

ModelSet train_variant(const RunConfig& vcfg, bool from_scratch, const fs::path& corpus, const fs::path& output,
                       const LogFn& log) {
  TrainOptions t;
  t.stage = Stage::finetune;
  t.from_scratch = from_scratch;
  t.corpus_dir = corpus;
  t.output = output;
  t.log = log;
  cmd_train(vcfg, t);
  return load_models(output, vcfg);
}

EmbeddingsByClass with_all_classes(EmbeddingsByClass e, const RunConfig& cfg) {
  for (const auto& s : load_target_specs(cfg)) e[s.name];
  return e;
}

std::optional<double> class_fad(const std::vector<Embedding>& gen, const std::vector<Embedding>& ref,
                                const std::string& cls, const std::string& extractor) {
  EmbeddingsByClass g, r;
  g[cls] = gen;
  r[cls] = ref;
  const FadReport rep = evaluate_fad(g, r, extractor);
  return rep.find(cls) ? rep.find(cls)->fad : std::nullopt;
}

void run_ablation_seed(const RunConfig& cfg, std::uint64_t seed, const fs::path& out_dir, const fs::path& corpus,
                       const BenchmarkOptions& opts, BenchmarkReport& report,
                       std::map<VariantKey, fs::path>& checkpoints) {
  RunConfig scfg = cfg;
  scfg.seed = seed;
  scfg.work_dir = (out_dir / ("seed-" + std::to_string(seed))).string();
  const Workspace ws{scfg.work_dir};

  TrainOptions pre;
  pre.stage = Stage::pretrain;
  pre.corpus_dir = corpus;
  pre.log = opts.log;
  cmd_train(scfg, pre);

  std::vector<AblationRow> rows;
  for (const auto& name : cfg.benchmark.rows) rows.push_back(ablation_row(name));
  std::map<VariantKey, int> pool_of;
  for (const auto& r : rows) {
    int& k = pool_of[{r.from_scratch, r.text_mode, r.tuner}];
    k = std::max(k, r.mode == SelectMode::none ? 1 : cfg.select.pool_size);
  }

  std::optional<EmbeddingsByClass> reference;
  std::string extractor;
  for (const auto& [key, k_pool] : pool_of) {
    const auto& [scratch, text_mode, tuner] = key;
    const std::string vname = variant_name(key);
    std::vector<const AblationRow*> users;
    for (const auto& r : rows) {
      if (VariantKey{r.from_scratch, r.text_mode, r.tuner} == key) users.push_back(&r);
    }
    try {
      const RunConfig vcfg = variant_config(scfg, text_mode, tuner);
      const fs::path ckpt = ws.checkpoints() / (vname + ".flab");
      const ModelSet models = train_variant(vcfg, scratch, corpus, ckpt, opts.log);
      if (seed == cfg.benchmark.seeds.front()) checkpoints[key] = ckpt;
      if (!reference) {
        reference = with_all_classes(reference_embeddings(models, vcfg, corpus, Split::eval, ws.cache()), vcfg);
        extractor = extractor_id(*models.clap);
      }
      GenerateOptions g;
      g.count = cfg.benchmark.clips_per_class;
      g.seed = derive_seed(seed, "bench-generate");
      g.policy.pool_size = k_pool;
      g.policy.mode = k_pool > 1 ? SelectMode::top1 : SelectMode::none;
      g.policy.target_source = TargetSource::tuned_text;
      g.corpus_dir = corpus;
      g.keep_pools = true;
      g.log = opts.log;
      const GenerationResult gen = generate_clips(models, vcfg, g);
      for (const AblationRow* r : users) {
        EmbeddingsByClass emb;
        if (r->mode == SelectMode::none) {
          for (const auto& [cls, pools] : gen.pools) {
            for (const auto& p : pools) emb[cls].push_back(p.front().audio);
          }
        } else {
          emb = embeddings_of(gen);
        }
        const FadReport rep = evaluate_fad(emb, *reference, extractor);
        const fs::path row_dir = ws.root / "rows" / slug(r->name);
        fs::create_directories(row_dir);
        write_fad_csv(row_dir / "fad.csv", rep);
        for (const auto& fr : rep.rows) report.cells.push_back({r->name, seed, fr.class_name, fr.fad});
        report.cells.push_back({r->name, seed, kPooled, rep.pooled});
        if (opts.log) {
          opts.log("benchmark seed " + std::to_string(seed) + " " + r->name + " pooled FAD " + cell(rep.pooled));
        }
      }
    } catch (const std::exception& e) {
      for (const AblationRow* r : users) {
        report.errors.push_back("seed " + std::to_string(seed) + " row " + r->name + ": " + e.what());
      }
    }
  }
}

void run_repeats(const RunConfig& cfg, const fs::path& out_dir, const fs::path& corpus, const BenchmarkOptions& opts,
                 const fs::path& tuned_ckpt, BenchmarkReport& report) {
  const std::uint64_t seed = cfg.benchmark.seeds.front();
  RunConfig scfg = cfg;
  scfg.seed = seed;
  scfg.work_dir = (out_dir / ("seed-" + std::to_string(seed))).string();
  const Workspace ws{scfg.work_dir};
  const std::string cls = cfg.benchmark.complex_class;

  std::vector<std::pair<std::string, RunConfig>> configs;
  for (const auto& text : cfg.benchmark.fixed_texts) {
    RunConfig c = variant_config(scfg, "wrapped", "frozen");
    c.finetune.texts[cls] = text;
    configs.emplace_back("text:" + text, c);
  }
  configs.emplace_back("tuned", variant_config(scfg, "wrapped", "joint"));

  std::optional<std::vector<Embedding>> reference;
  std::string extractor;
  for (const auto& [name, c] : configs) {
    try {
      const bool tuned = name == "tuned";
      const fs::path ckpt = tuned && !tuned_ckpt.empty() ? tuned_ckpt
                                                         : ws.checkpoints() / ("repeat-" + slug(name) + ".flab");
      const ModelSet models = train_variant(c, false, corpus, ckpt, opts.log);
      if (!reference) {
        reference = reference_embeddings(models, c, corpus, Split::eval, ws.cache())[cls];
        extractor = extractor_id(*models.clap);
      }
      for (int run = 0; run < cfg.benchmark.repeat_runs; ++run) {
        GenerateOptions g;
        g.labels = {cls};
        g.count = cfg.benchmark.repeat_clips;
        g.seed = derive_seed(seed, "repeat", static_cast<std::uint64_t>(run));
        g.policy.pool_size = 1;
        g.policy.mode = SelectMode::none;
        g.corpus_dir = corpus;
        g.log = nullptr;
        const auto gen = generate_clips(models, c, g);
        const auto fad = class_fad(embeddings_of(gen)[cls], *reference, cls, extractor);
        report.repeats.push_back({name, static_cast<std::uint64_t>(run), fad});
      }
      if (opts.log) opts.log("benchmark repeats " + name + " done");
    } catch (const std::exception& e) {
      report.errors.push_back("repeat " + name + ": " + e.what());
    }
  }
}

void run_targets(const RunConfig& cfg, const fs::path& out_dir, const fs::path& corpus, const BenchmarkOptions& opts,
                 const fs::path& tuned_ckpt, BenchmarkReport& report) {
  const std::uint64_t seed = cfg.benchmark.seeds.front();
  RunConfig scfg = variant_config(cfg, "wrapped", "joint");
  scfg.seed = seed;
  scfg.work_dir = (out_dir / ("seed-" + std::to_string(seed))).string();
  if (scfg.select.variant_texts.empty()) scfg.select.variant_texts = cfg.benchmark.fixed_texts;
  const Workspace ws{scfg.work_dir};
  const std::string cls = cfg.benchmark.complex_class;
  const std::vector<std::string> labels = {cls};
  const std::uint64_t class_tag = hash_tag(cls);
  try {
    const fs::path ckpt = tuned_ckpt.empty() ? ws.checkpoints() / "pre-wrapped-joint.flab" : tuned_ckpt;
    const ModelSet models = train_variant(scfg, false, corpus, ckpt, opts.log);
    const auto reference = reference_embeddings(models, scfg, corpus, Split::eval, ws.cache())[cls];
    const std::string extractor = extractor_id(*models.clap);
    const TargetSource sources[] = {TargetSource::tuned_text, TargetSource::text_variant,
                                    TargetSource::audio_embedding_pool};
    std::map<TargetSource, TargetSet> targets;
    for (TargetSource s : sources) targets[s] = build_targets(models, scfg, s, labels, corpus);
    SelectionPolicy policy;
    policy.pool_size = cfg.select.pool_size;
    policy.mode = SelectMode::top1;
    for (int run = 0; run < cfg.benchmark.target_seeds; ++run) {
      GenerateOptions g;
      g.labels = labels;
      g.count = cfg.benchmark.target_clips;
      g.seed = derive_seed(seed, "targets", static_cast<std::uint64_t>(run));
      g.policy = policy;
      g.corpus_dir = corpus;
      g.keep_pools = true;
      g.log = nullptr;
      const auto gen = generate_clips(models, scfg, g);
      const auto& pools = gen.pools.at(cls);
      for (TargetSource s : sources) {
        std::vector<Embedding> chosen;
        for (std::size_t j = 0; j < pools.size(); ++j) {
          const auto pick = multi_target_select(pools[j], targets[s].per_class.at(cls), policy, cls, 1,
                                                derive_seed(g.seed, "select", class_tag, static_cast<std::uint64_t>(j)));
          chosen.push_back(pools[j][static_cast<std::size_t>(std::stoi(pick.front()))].audio);
        }
        report.targets.push_back({std::string(target_source_name(s)), static_cast<std::uint64_t>(run),
                                  class_fad(chosen, reference, cls, extractor)});
      }
    }
    if (opts.log) opts.log("benchmark targets done");
  } catch (const std::exception& e) {
    report.errors.push_back(std::string("targets: ") + e.what());
  }
}

}  // namespace

std::optional<double> BenchmarkReport::mean(const std::string& row, const std::string& class_name) const {
  std::vector<double> v;
  for (const auto& c : cells) {
    if (c.row == row && c.class_name == class_name && c.fad) v.push_back(*c.fad);
  }
  return mean_of(v);
}

std::optional<double> BenchmarkReport::mean_pooled(const std::string& row) const { return mean(row, kPooled); }

BenchmarkReport cmd_benchmark(const RunConfig& cfg, const fs::path& out_dir, const BenchmarkOptions& opts) {
  cfg.validate();
  if (cfg.benchmark.seeds.empty()) throw ConfigError("benchmark.seeds is empty");
  BenchmarkReport report;
  report.rows = cfg.benchmark.rows;
  report.seeds = cfg.benchmark.seeds;
  for (const auto& s : load_target_specs(cfg)) report.classes.push_back(s.name);
  for (const auto& r : cfg.benchmark.rows) ablation_row(r);
  if (std::find(report.classes.begin(), report.classes.end(), cfg.benchmark.complex_class) ==
      report.classes.end()) {
    throw LookupError("benchmark.complex_class '" + cfg.benchmark.complex_class + "' is not a target class");
  }

  const fs::path corpus = out_dir / "corpus";
  if (!fs::exists(manifest_path(corpus, Split::train)) || !fs::exists(manifest_path(corpus, Split::pretrain)) ||
      !fs::exists(manifest_path(corpus, Split::eval))) {
    cmd_synth_data(cfg, corpus, opts.log);
  }

  std::map<VariantKey, fs::path> checkpoints;
  if (opts.ablation) {
    for (std::uint64_t seed : cfg.benchmark.seeds) {
      try {
        run_ablation_seed(cfg, seed, out_dir, corpus, opts, report, checkpoints);
      } catch (const std::exception& e) {
        report.errors.push_back("seed " + std::to_string(seed) + ": " + e.what());
      }
    }
  }
  const auto tuned = checkpoints.find({false, "wrapped", "joint"});
  const fs::path tuned_ckpt = tuned == checkpoints.end() ? fs::path() : tuned->second;
  if (opts.repeats) run_repeats(cfg, out_dir, corpus, opts, tuned_ckpt, report);
  if (opts.targets) run_targets(cfg, out_dir, corpus, opts, tuned_ckpt, report);
  write_benchmark_report(out_dir, report);
  return report;
}

void write_benchmark_report(const fs::path& dir, const BenchmarkReport& r) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw IoError("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("ablation.csv");
    f << "row";
    for (const auto& c : r.classes) f << ',' << c;
    f << ",class_mean,pooled\n";
    for (const auto& row : r.rows) {
      f << row;
      std::vector<double> means;
      for (const auto& c : r.classes) {
        const auto m = r.mean(row, c);
        if (m) means.push_back(*m);
        f << ',' << cell(m);
      }
      f << ',' << cell(means.size() == r.classes.size() ? mean_of(means) : std::nullopt) << ','
        << cell(r.mean_pooled(row)) << '\n';
    }
  }
  {
    auto f = open("ablation_seeds.csv");
    f << "row,seed,class,F\n";
    for (const auto& c : r.cells) f << c.row << ',' << c.seed << ',' << c.class_name << ',' << cell(c.fad) << '\n';
  }
  {
    auto f = open("repeats.csv");
    f << "configuration,run,F\n";
    for (const auto& x : r.repeats) f << '"' << x.configuration << "\"," << x.seed << ',' << cell(x.fad) << '\n';
  }
  {
    auto f = open("targets.csv");
    f << "target_source,run,F\n";
    for (const auto& x : r.targets) f << x.configuration << ',' << x.seed << ',' << cell(x.fad) << '\n';
  }
  {
    auto f = open("errors.txt");
    for (const auto& e : r.errors) f << e << '\n';
  }
}

namespace {

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

double interquartile_range(std::vector<double> v) {
  if (v.empty()) throw InputError("interquartile range of an empty sample");
  std::sort(v.begin(), v.end());
  return quantile(v, 0.75) - quantile(v, 0.25);
}

double median(std::vector<double> v) {
  if (v.empty()) throw InputError("median of an empty sample");
  std::sort(v.begin(), v.end());
  return quantile(v, 0.5);
}

}  // namespace flab
