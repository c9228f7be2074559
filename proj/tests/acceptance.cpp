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

// Runs the nine acceptance criteria and prints one PASS/FAIL line each.
// Criteria 4 to 9 train real models; their artifacts stay in --work.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "flab/benchmark.hpp"
#include "flab/config.hpp"
#include "flab/diffusion.hpp"
#include "flab/error.hpp"
#include "flab/fad.hpp"
#include "flab/pipeline.hpp"
#include "flab/rng.hpp"
#include "flab/selector.hpp"
#include "flab/tuner.hpp"

namespace fs = std::filesystem;
using namespace flab;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1e", v);
  return buf;
}

// Keeps the first failing check.
struct Checks {
  bool ok = true;
  std::string first;
  void expect(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      first = what;
    }
  }
};

// ---- 1: Frechet distance oracles -------------------------------------

EmbeddingStats stats_1d(double mu, double var) {
  EmbeddingStats s;
  s.mu = Eigen::VectorXd::Constant(1, mu);
  s.sigma = Eigen::MatrixXd::Constant(1, 1, var);
  s.n = 10;
  return s;
}

Eigen::MatrixXd random_rows(int n, int d, Rng& rng, double shift, double scale) {
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = shift + scale * rng.normal();
  }
  return m;
}

Outcome criterion_fad() {
  const Timer t;
  Checks c;
  Rng rng(101);
  double worst_self = 0.0, worst_1d = 0.0, worst_sym = 0.0, worst_shift = 0.0, worst_diag = 0.0;
  for (int d : {1, 2, 3, 8, 32, 64}) {
    const Eigen::MatrixXd x = random_rows(4 * d + 8, d, rng, 0.0, 1.0);
    const EmbeddingStats s = fit_stats(x);
    worst_self = std::max(worst_self, frechet_distance(s, s));
  }
  c.expect(worst_self < 1e-6, "self distance " + std::to_string(worst_self));
  for (int i = 0; i < 100; ++i) {
    const double m1 = rng.normal(0, 3), m2 = rng.normal(0, 3);
    const double s1 = rng.uniform(0.01, 5.0), s2 = rng.uniform(0.01, 5.0);
    const double want = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
    worst_1d = std::max(worst_1d, std::abs(frechet_distance(stats_1d(m1, s1 * s1), stats_1d(m2, s2 * s2)) - want));
  }
  c.expect(worst_1d <= 1e-8, "1-D closed form error " + std::to_string(worst_1d));
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 1 + trial % 4;
    const Eigen::MatrixXd x = random_rows(40, d, rng, 0.0, 1.0);
    const Eigen::MatrixXd y = random_rows(50, d, rng, 0.5, 1.5);
    const double f = frechet_distance(fit_stats(x), fit_stats(y));
    worst_sym = std::max(worst_sym, std::abs(f - frechet_distance(fit_stats(y), fit_stats(x))));
    Eigen::RowVectorXd shift(d);
    for (int j = 0; j < d; ++j) shift(j) = rng.normal(0, 2);
    const double g = frechet_distance(fit_stats(Eigen::MatrixXd(x.rowwise() + shift)),
                                      fit_stats(Eigen::MatrixXd(y.rowwise() + shift)));
    worst_shift = std::max(worst_shift, std::abs(f - g));
  }
  c.expect(worst_sym <= 1e-8, "symmetry error " + std::to_string(worst_sym));
  c.expect(worst_shift <= 1e-8, "translation error " + std::to_string(worst_shift));
  for (int d = 1; d <= 3; ++d) {
    for (int trial = 0; trial < 30; ++trial) {
      EmbeddingStats a, b;
      a.mu = Eigen::VectorXd(d);
      b.mu = Eigen::VectorXd(d);
      Eigen::VectorXd la(d), lb(d);
      double want = 0.0;
      for (int i = 0; i < d; ++i) {
        a.mu(i) = rng.normal();
        b.mu(i) = rng.normal();
        la(i) = rng.uniform(0.0, 4.0);
        lb(i) = rng.uniform(0.0, 4.0);
        want += std::pow(a.mu(i) - b.mu(i), 2) + std::pow(std::sqrt(la(i)) - std::sqrt(lb(i)), 2);
      }
      a.sigma = la.asDiagonal();
      b.sigma = lb.asDiagonal();
      worst_diag = std::max(worst_diag, std::abs(frechet_distance(a, b) - want));
    }
  }
  c.expect(worst_diag <= 1e-8, "diagonal oracle error " + std::to_string(worst_diag));
  const double secs = t.seconds();
  c.expect(secs < 10.0, "runtime " + fmt(secs, 1) + " s");
  return {c.ok, c.ok ? "max errors: self " + sci(worst_self) + ", 1-D " + sci(worst_1d) + ", symmetry " +
                           sci(worst_sym) + ", translation " + sci(worst_shift) + ", diagonal " + sci(worst_diag) +
                           ", " + fmt(secs, 2) + " s"
                     : c.first};
}

// ---- 2: diffusion maths ----------------------------------------------

using nn::Var;

DiffusionBatch<double> random_batch(int b, int dim, std::uint64_t seed, const NoiseSchedule& s) {
  Rng rng(seed);
  std::vector<double> z0(static_cast<std::size_t>(b * dim)), eps(z0.size()), cond(static_cast<std::size_t>(b));
  std::vector<int> steps(static_cast<std::size_t>(b));
  for (auto& v : z0) v = rng.normal();
  for (auto& v : eps) v = rng.normal();
  for (auto& v : cond) v = rng.normal();
  for (auto& n : steps) n = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.N)));
  return {Var<double>::constant({b, 1, 1, dim}, z0), Var<double>::constant({b, 1}, cond), steps,
          Var<double>::constant({b, 1, 1, dim}, eps)};
}

Outcome criterion_diffusion() {
  const Timer t;
  Checks c;
  const NoiseSchedule s = make_schedule(1000);
  // Forward-process moments at three depths.
  double worst_var = 0.0;
  for (int n : {50, 400, 1000}) {
    Rng rng(derive_seed(202, static_cast<std::uint64_t>(n)));
    const int draws = 10000, dim = 16;
    std::vector<float> z0(dim), eps(dim);
    for (float& v : z0) v = static_cast<float>(rng.normal());
    double sum = 0.0, sq = 0.0;
    const double a = std::sqrt(s.alpha_bar_at(n));
    for (int d = 0; d < draws; ++d) {
      for (float& e : eps) e = static_cast<float>(rng.normal());
      const auto zn = q_sample(z0, n, eps, s);
      for (int j = 0; j < dim; ++j) {
        const double r = zn[static_cast<std::size_t>(j)] - a * z0[static_cast<std::size_t>(j)];
        sum += r;
        sq += r * r;
      }
    }
    const double count = static_cast<double>(draws) * dim;
    const double mean = sum / count, var = sq / count - mean * mean;
    const double want = 1.0 - s.alpha_bar_at(n);
    c.expect(std::abs(mean) < 4.0 * std::sqrt(want / count), "q_sample mean at step " + std::to_string(n));
    worst_var = std::max(worst_var, std::abs(var / want - 1.0));
  }
  c.expect(worst_var < 0.02, "q_sample variance ratio off by " + fmt(worst_var));

  const int b = 256, dim = 64;
  const auto batch = random_batch(b, dim, 203, s);
  const Denoiser<double> perfect = [&](const Var<double>&, const std::vector<int>&, const Var<double>&) {
    return batch.eps;
  };
  const double perfect_loss = training_loss<double>(batch, perfect, s).item();
  c.expect(perfect_loss == 0.0, "perfect predictor loss " + std::to_string(perfect_loss));
  const Denoiser<double> zero = [](const Var<double>& z, const std::vector<int>&, const Var<double>&) {
    return Var<double>::constant(z.shape(), 0.0);
  };
  const double per_dim = training_loss<double>(batch, zero, s).item() / dim;
  c.expect(std::abs(per_dim - 1.0) <= 0.03, "zero predictor loss per dim " + fmt(per_dim));

  // Ten-parameter toy denoiser: W z + b + v c + u (n / N).
  Rng rng(204);
  auto param = [&](nn::Shape shape) {
    std::vector<double> v(nn::numel(shape));
    for (double& x : v) x = rng.normal(0.0, 0.5);
    return Var<double>::parameter(std::move(shape), std::move(v));
  };
  Var<double> w = param({2, 2}), bias = param({2}), v = param({2, 1}), u = param({2, 1});
  const Denoiser<double> toy = [&](const Var<double>& z, const std::vector<int>& steps, const Var<double>& cond) {
    const int n = z.dim(0);
    std::vector<double> frac(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) frac[static_cast<std::size_t>(i)] = static_cast<double>(steps[static_cast<std::size_t>(i)]) / s.N;
    Var<double> out = nn::linear(nn::reshape(z, {n, 2}), w, bias);
    out = nn::add(out, nn::linear(cond, v, Var<double>()));
    out = nn::add(out, nn::linear(Var<double>::constant({n, 1}, frac), u, Var<double>()));
    return nn::reshape(out, z.shape());
  };
  const auto toy_batch = random_batch(8, 2, 205, s);
  nn::backward(training_loss<double>(toy_batch, toy, s));
  double worst_rel = 0.0;
  std::size_t n_params = 0;
  for (Var<double>* p : {&w, &bias, &v, &u}) {
    const auto grad = p->grad();
    const std::vector<double> analytic(grad.begin(), grad.end());
    n_params += p->size();
    for (std::size_t i = 0; i < p->size(); ++i) {
      auto vals = p->mutable_value();
      const double saved = vals[i], h = 1e-6;
      nn::NoGradGuard guard;
      vals[i] = saved + h;
      const double up = training_loss<double>(toy_batch, toy, s).item();
      vals[i] = saved - h;
      const double down = training_loss<double>(toy_batch, toy, s).item();
      vals[i] = saved;
      const double numeric = (up - down) / (2 * h);
      worst_rel = std::max(worst_rel, std::abs(analytic[i] - numeric) / std::max(std::abs(numeric), 1e-8));
    }
  }
  c.expect(n_params == 10, "toy denoiser has " + std::to_string(n_params) + " parameters");
  c.expect(worst_rel <= 1e-4, "gradient relative error " + std::to_string(worst_rel));
  const double secs = t.seconds();
  c.expect(secs < 60.0, "runtime " + fmt(secs, 1) + " s");
  return {c.ok, c.ok ? "variance ratio error " + fmt(worst_var) + ", zero-predictor " + fmt(per_dim) +
                           ", gradient rel error " + sci(worst_rel) + ", " + fmt(secs, 2) + " s"
                     : c.first};
}

// ---- 3: tuning layer -------------------------------------------------

Outcome criterion_tuner() {
  const Timer t;
  Checks c;
  const int d = 16;
  Rng rng(301);
  auto random_embedding = [&](int dim) {
    Embedding e;
    for (int i = 0; i < dim; ++i) e.values.push_back(static_cast<float>(rng.normal()));
    return e;
  };
  const TuningLayer plain(d, 0.0, 1);
  for (int i = 0; i < 20; ++i) {
    const Embedding x = random_embedding(d);
    c.expect(plain.apply(x).values == x.values, "identity at init");
  }
  const TuningLayer noisy(d, 0.01, 2);
  const auto b = noisy.bias().value();
  for (int i = 0; i < 20; ++i) {
    const Embedding x = random_embedding(d);
    const Embedding y = noisy.apply(x);
    for (int k = 0; k < d; ++k) {
      c.expect(y.values[static_cast<std::size_t>(k)] ==
                   static_cast<float>(static_cast<double>(b[static_cast<std::size_t>(k)]) + x.values[static_cast<std::size_t>(k)]),
               "additive at init");
    }
  }
  TuningLayer layer(d, 0.01, 3);
  const std::vector<float> w0(layer.weight().value().begin(), layer.weight().value().end());
  const std::vector<float> b0(layer.bias().value().begin(), layer.bias().value().end());
  UNetConfig uc;
  uc.in_channels = 2;
  uc.width = 4;
  uc.cond_dim = d;
  UNet unet(uc, 4);
  const NoiseSchedule s = make_schedule(100);
  std::vector<LatentTensor> latents;
  std::vector<Embedding> texts;
  for (int i = 0; i < 8; ++i) {
    LatentTensor z{2, 4, 4, std::vector<float>(32)};
    for (float& v : z.values) v = static_cast<float>(rng.normal());
    latents.push_back(std::move(z));
    texts.push_back(normalized(random_embedding(d)));
  }
  const ConditionFn cond = [&](std::span<const std::size_t> idx) {
    std::vector<float> rows;
    for (std::size_t i : idx) rows.insert(rows.end(), texts[i].values.begin(), texts[i].values.end());
    return layer.forward(nn::Var<float>::constant({static_cast<int>(idx.size()), d}, rows));
  };
  LdmTrainConfig tc;
  tc.batch_size = 8;
  LdmTrainer trainer(unet, &layer.params(), s, tc);
  const double loss = trainer.step(latents, cond);
  c.expect(loss > 0.0, "loss is zero");
  c.expect(std::vector<float>(layer.weight().value().begin(), layer.weight().value().end()) != w0, "W unchanged");
  c.expect(std::vector<float>(layer.bias().value().begin(), layer.bias().value().end()) != b0, "b unchanged");
  const double secs = t.seconds();
  c.expect(secs < 10.0, "runtime " + fmt(secs, 1) + " s");
  return {c.ok, c.ok ? "step loss " + fmt(loss) + ", " + fmt(secs, 2) + " s" : c.first};
}

// ---- 4: encoder alignment --------------------------------------------

Outcome criterion_alignment(const RunConfig& cfg, const fs::path& corpus, const LogFn& log) {
  std::vector<double> scores;
  double slowest = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    RunConfig c = cfg;
    c.seed = seed;
    const Timer t;
    scores.push_back(clap_alignment(c, corpus, log));
    slowest = std::max(slowest, t.seconds());
  }
  const double mean = (scores[0] + scores[1] + scores[2]) / 3.0;
  const bool ok = mean >= 0.8 && slowest <= 600.0;
  return {ok, "top-1 " + fmt(scores[0], 3) + " " + fmt(scores[1], 3) + " " + fmt(scores[2], 3) + ", mean " +
                  fmt(mean, 3) + " (need >= 0.8), slowest seed " + fmt(slowest, 0) + " s"};
}

// ---- 5: selection ----------------------------------------------------

Outcome criterion_selection(const RunConfig& cfg, const fs::path& bench_dir, const fs::path& corpus,
                            const fs::path& out, const LogFn& log) {
  Checks c;
  Rng rng(501);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 1 + static_cast<int>(rng.below(12));
    const int want = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    CandidatePool pool;
    for (int i = 0; i < k; ++i) {
      // Coarse scores so ties occur.
      pool.push_back({"c" + std::to_string(1000 + rng.below(9000)) + "_" + std::to_string(i), {},
                      std::round(rng.uniform(-1.0, 1.0) * 8.0) / 8.0});
    }
    SelectionPolicy p;
    p.mode = SelectMode::top1;
    std::vector<const Candidate*> sorted;
    for (const auto& x : pool) sorted.push_back(&x);
    std::sort(sorted.begin(), sorted.end(), [](const Candidate* a, const Candidate* b) {
      return a->score != b->score ? a->score > b->score : a->clip_id < b->clip_id;
    });
    std::vector<std::string> oracle;
    for (int i = 0; i < want; ++i) oracle.push_back(sorted[static_cast<std::size_t>(i)]->clip_id);
    c.expect(select(pool, p, "X", want) == oracle, "top1 differs from the sort oracle");

    // Passing sets shrink as the threshold rises.
    std::set<std::string> previous;
    bool first = true;
    for (double theta = -1.0; theta <= 1.0; theta += 0.125) {
      SelectionPolicy th;
      th.mode = SelectMode::threshold;
      th.backfill = false;
      th.thresholds["X"] = theta;
      const auto got = select(pool, th, "X", k);
      const std::set<std::string> now(got.begin(), got.end());
      if (!first) {
        c.expect(std::includes(previous.begin(), previous.end(), now.begin(), now.end()),
                 "threshold selection is not monotone");
      }
      previous = now;
      first = false;
    }
  }
  if (!c.ok) return {false, c.first};

  RunConfig tuned = cfg;
  tuned.seed = cfg.benchmark.seeds.front();
  tuned.work_dir = (bench_dir / ("seed-" + std::to_string(tuned.seed))).string();
  tuned.finetune.text_mode = "wrapped";
  tuned.finetune.tuner = "joint";
  const ModelSet models = load_models(Workspace{tuned.work_dir}.checkpoints() / "pre-wrapped-joint.flab", tuned);
  CalibrateOptions o;
  o.count = cfg.generate.count;
  o.seed = derive_seed(tuned.seed, "calibration");
  o.grid = default_threshold_grid();
  o.corpus_dir = corpus;
  o.out_dir = out;
  o.log = log;
  const CalibrationResult r = cmd_calibrate(models, tuned, o);
  int n_classes = 0;
  std::string worst;
  for (const auto& [cls, theta] : r.thresholds) {
    std::optional<double> at_theta, at_floor;
    for (const auto& row : r.rows) {
      if (row.class_name != cls) continue;
      if (row.theta == theta) at_theta = row.fad;
      if (row.theta == -1.0) at_floor = row.fad;
    }
    ++n_classes;
    c.expect(at_theta && at_floor && *at_theta <= *at_floor, "class " + cls + " calibrated FAD above theta=-1");
  }
  c.expect(n_classes == 7, "calibrated " + std::to_string(n_classes) + " classes");
  std::string thetas;
  for (const auto& [cls, theta] : r.thresholds) thetas += (thetas.empty() ? "" : " ") + cls + "=" + fmt(theta, 1);
  return {c.ok, c.ok ? "200 pools match the sort oracle, monotone; calibrated " + thetas : c.first};
}

// ---- 6 to 8: benchmark orderings ---------------------------------------

std::string opt(const std::optional<double>& v) { return v ? fmt(*v) : std::string("n/a"); }

Outcome criterion_ablation(const BenchmarkReport& r, double seconds_per_seed) {
  const auto s = r.mean_pooled("LDM-S"), p = r.mean_pooled("+Pre"), f = r.mean_pooled("+Filter");
  int wins = 0, total = 0;
  for (const auto& cls : r.classes) {
    const auto tf = r.mean("+Tuned", cls), ff = r.mean("+Filter", cls);
    if (tf && ff) {
      ++total;
      wins += *tf <= *ff;
    }
  }
  const bool ordered = s && p && f && *s >= *p && *p >= *f;
  const bool ok = ordered && wins >= 5 && r.seeds.size() >= 3 && seconds_per_seed <= 45 * 60.0;
  return {ok, "pooled LDM-S " + opt(s) + " +Pre " + opt(p) + " +Text " + opt(r.mean_pooled("+Text")) + " +Filter " +
                  opt(f) + " +Tuned " + opt(r.mean_pooled("+Tuned")) + "; +Tuned <= +Filter on " +
                  std::to_string(wins) + "/" + std::to_string(total) + " classes; " + std::to_string(r.seeds.size()) +
                  " seeds, " + fmt(seconds_per_seed / 60.0, 1) + " min per seed"};
}

std::vector<double> values_of(const std::vector<RepeatRun>& runs, const std::string& name) {
  std::vector<double> v;
  for (const auto& x : runs) {
    if (x.configuration == name && x.fad) v.push_back(*x.fad);
  }
  return v;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

Outcome criterion_targets(const BenchmarkReport& r, int want_seeds) {
  const auto pool = values_of(r.targets, "audio_embedding_pool");
  const auto text = values_of(r.targets, "tuned_text");
  const auto variant = values_of(r.targets, "text_variant");
  const bool complete = static_cast<int>(pool.size()) >= want_seeds && pool.size() == text.size();
  const bool ok = complete && mean_of(pool) <= mean_of(text);
  return {ok, "mean FAD audio_embedding_pool " + fmt(mean_of(pool)) + ", tuned_text " + fmt(mean_of(text)) +
                  ", text_variant " + fmt(mean_of(variant)) + " over " + std::to_string(pool.size()) + " seeds"};
}

Outcome criterion_variance(const BenchmarkReport& r, const RunConfig& cfg) {
  const auto tuned = values_of(r.repeats, "tuned");
  std::string worst;
  double worst_median = -1.0;
  for (const auto& t : cfg.benchmark.fixed_texts) {
    const auto v = values_of(r.repeats, "text:" + t);
    if (v.empty()) continue;
    const double m = median(v);
    if (m > worst_median) {
      worst_median = m;
      worst = t;
    }
  }
  if (worst.empty() || tuned.size() < 10) {
    return {false, "missing repeat runs (tuned " + std::to_string(tuned.size()) + ")"};
  }
  const auto wv = values_of(r.repeats, "text:" + worst);
  const double iqr_tuned = interquartile_range(tuned), iqr_worst = interquartile_range(wv);
  std::string all;
  for (const auto& t : cfg.benchmark.fixed_texts) {
    const auto v = values_of(r.repeats, "text:" + t);
    if (!v.empty()) all += " '" + t + "' " + fmt(interquartile_range(v));
  }
  const bool ok = iqr_tuned <= iqr_worst && wv.size() >= 10;
  return {ok, "IQR tuned " + fmt(iqr_tuned) + " (median " + fmt(median(tuned)) + ") vs worst fixed text '" + worst +
                  "' " + fmt(iqr_worst) + " (median " + fmt(worst_median) + "); all fixed:" + all};
}

// ---- 9: determinism --------------------------------------------------

Outcome criterion_determinism(const fs::path& work) {
  RunConfig c = RunConfig::preset_named("smoke");
  c.benchmark.seeds = {1, 2, 3};
  BenchmarkOptions o;
  o.log = nullptr;
  const fs::path a = work / "determinism-a", b = work / "determinism-b";
  fs::remove_all(a);
  fs::remove_all(b);
  cmd_benchmark(c, a, o);
  cmd_benchmark(c, b, o);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  };
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && (e.path().extension() == ".csv" || name == "errors.txt")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const fs::path other = b / fs::relative(f, a);
    if (!fs::exists(other) || slurp(f) != slurp(other)) {
      return {false, fs::relative(f, a).string() + " differs between runs"};
    }
  }
  return {!files.empty(), std::to_string(files.size()) + " report files byte-identical across two smoke benchmarks"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flab acceptance criteria"};
  std::string work = "acceptance-work";
  std::string preset = "bench";
  std::vector<int> only;
  bool reuse = false, verbose = false;
  app.add_option("--work", work, "Scratch directory for trained models and reports");
  app.add_option("--preset", preset, "Configuration preset for criteria 4 to 8");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_flag("--reuse", reuse, "Keep artifacts of an earlier run");
  app.add_flag("-v,--verbose", verbose, "Progress output");
  CLI11_PARSE(app, argc, argv);

  const LogFn log = verbose ? LogFn(log_stderr) : LogFn(nullptr);
  const fs::path root = fs::absolute(work);
  if (!reuse) fs::remove_all(root);
  fs::create_directories(root);
  RunConfig cfg;
  try {
    cfg = RunConfig::preset_named(preset);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }
  const fs::path bench_dir = root / "benchmark";
  const fs::path corpus = bench_dir / "corpus";

  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  std::optional<BenchmarkReport> report;
  double seconds_per_seed = 0.0;
  auto benchmark = [&]() -> const BenchmarkReport& {
    if (!report) {
      const Timer t;
      BenchmarkOptions o;
      o.log = log;
      report = cmd_benchmark(cfg, bench_dir, o);
      seconds_per_seed = t.seconds() / static_cast<double>(cfg.benchmark.seeds.size());
      for (const auto& e : report->errors) std::cerr << "benchmark error: " << e << '\n';
    }
    return *report;
  };

  const std::vector<std::pair<int, std::string>> names = {
      {1, "FAD oracle suite"},          {2, "diffusion math suite"},    {3, "tuner suite"},
      {4, "encoder alignment"},         {5, "selection suite"},         {6, "ablation ordering"},
      {7, "multi-target selection"},    {8, "variance reduction"},      {9, "determinism"}};
  int failures = 0;
  for (const auto& [n, name] : names) {
    if (!wanted(n)) continue;
    Outcome o;
    try {
      switch (n) {
        case 1: o = criterion_fad(); break;
        case 2: o = criterion_diffusion(); break;
        case 3: o = criterion_tuner(); break;
        case 4:
          if (!fs::exists(manifest_path(corpus, Split::train))) cmd_synth_data(cfg, corpus, log);
          o = criterion_alignment(cfg, corpus, log);
          break;
        case 5:
          benchmark();
          o = criterion_selection(cfg, bench_dir, corpus, root / "calibration", log);
          break;
        case 6: o = criterion_ablation(benchmark(), seconds_per_seed); break;
        case 7: o = criterion_targets(benchmark(), cfg.benchmark.target_seeds); break;
        case 8: o = criterion_variance(benchmark(), cfg); break;
        case 9: o = criterion_determinism(root); break;
      }
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << n << " (" << name << "): " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
