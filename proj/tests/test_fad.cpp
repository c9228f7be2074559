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
#include <complex>
#include <fstream>

#include <Eigen/Eigenvalues>

#include "flab/error.hpp"
#include "flab/fad.hpp"
#include "flab/rng.hpp"
#include "test_util.hpp"

namespace flab {
namespace {

EmbeddingStats stats_1d(double mu, double var) {
  EmbeddingStats s;
  s.mu = Eigen::VectorXd::Constant(1, mu);
  s.sigma = Eigen::MatrixXd::Constant(1, 1, var);
  s.n = 10;
  return s;
}

EmbeddingStats random_stats(int d, Rng& rng) {
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
  }
  EmbeddingStats s;
  s.mu = Eigen::VectorXd(d);
  for (int i = 0; i < d; ++i) s.mu(i) = rng.normal();
  s.sigma = a * a.transpose() / d;
  s.n = 100;
  return s;
}

std::vector<Embedding> random_set(int n, int d, Rng& rng, double shift = 0.0, double scale = 1.0) {
  std::vector<Embedding> out(n);
  for (auto& e : out) {
    e.values.resize(d);
    for (float& v : e.values) v = static_cast<float>(shift + scale * rng.normal());
  }
  return out;
}

// Independent path: eigenvalues of the (non-symmetric) product S_r S_t.
double trace_sqrt_product_general(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(a * b);
  double acc = 0.0;
  for (int i = 0; i < es.eigenvalues().size(); ++i) acc += std::sqrt(es.eigenvalues()(i)).real();
  return acc;
}

TEST(FitStats, HandComputedExamples) {
  const std::vector<Embedding> same = {{{1.0F, 2.0F}, false}, {{1.0F, 2.0F}, false}};
  const EmbeddingStats s = fit_stats(same);
  EXPECT_DOUBLE_EQ(s.mu(0), 1.0);
  EXPECT_DOUBLE_EQ(s.mu(1), 2.0);
  EXPECT_DOUBLE_EQ(s.sigma.norm(), 0.0);

  const std::vector<Embedding> pair = {{{0.0F, 0.0F}, false}, {{2.0F, 0.0F}, false}};
  const EmbeddingStats p = fit_stats(pair);
  EXPECT_DOUBLE_EQ(p.mu(0), 1.0);
  EXPECT_DOUBLE_EQ(p.mu(1), 0.0);
  EXPECT_DOUBLE_EQ(p.sigma(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(p.sigma(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(p.sigma(1, 1), 0.0);
  EXPECT_EQ(p.n, 2);
  EXPECT_THROW(fit_stats(std::span<const Embedding>(same.data(), 1)), InputError);
}

TEST(FitStats, PermutationInvariant) {
  Rng rng(1);
  auto set = random_set(30, 4, rng);
  const EmbeddingStats a = fit_stats(set);
  std::reverse(set.begin(), set.end());
  rng.shuffle(set.begin(), set.end());
  const EmbeddingStats b = fit_stats(set);
  EXPECT_LT((a.mu - b.mu).norm(), 1e-12);
  EXPECT_LT((a.sigma - b.sigma).norm(), 1e-12);
}

TEST(Frechet, SelfDistanceIsZero) {
  Rng rng(2);
  for (int d : {1, 2, 5, 16, 64}) {
    const EmbeddingStats s = random_stats(d, rng);
    EXPECT_LT(frechet_distance(s, s), 1e-6) << d;
  }
}

TEST(Frechet, OneDimensionalClosedForm) {
  EXPECT_NEAR(frechet_distance(stats_1d(0, 1), stats_1d(1, 4)), 2.0, 1e-12);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const double m1 = rng.normal(0, 3), m2 = rng.normal(0, 3);
    const double s1 = rng.uniform(0.01, 5.0), s2 = rng.uniform(0.01, 5.0);
    const double expected = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
    EXPECT_NEAR(frechet_distance(stats_1d(m1, s1 * s1), stats_1d(m2, s2 * s2)), expected, 1e-8);
  }
}

TEST(Frechet, DiagonalOracle) {
  Rng rng(4);
  for (int d = 1; d <= 3; ++d) {
    for (int trial = 0; trial < 20; ++trial) {
      EmbeddingStats a, b;
      a.mu = Eigen::VectorXd(d);
      b.mu = Eigen::VectorXd(d);
      Eigen::VectorXd la(d), lb(d);
      double expected = 0.0;
      for (int i = 0; i < d; ++i) {
        a.mu(i) = rng.normal();
        b.mu(i) = rng.normal();
        la(i) = rng.uniform(0.0, 4.0);
        lb(i) = rng.uniform(0.0, 4.0);
        expected += std::pow(a.mu(i) - b.mu(i), 2) + std::pow(std::sqrt(la(i)) - std::sqrt(lb(i)), 2);
      }
      a.sigma = la.asDiagonal();
      b.sigma = lb.asDiagonal();
      EXPECT_NEAR(frechet_distance(a, b), expected, 1e-8);
    }
  }
}

TEST(Frechet, MatchesGeneralEigenPath) {
  Rng rng(5);
  for (int d = 1; d <= 3; ++d) {
    for (int trial = 0; trial < 20; ++trial) {
      const EmbeddingStats a = random_stats(d, rng), b = random_stats(d, rng);
      const double expected = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() -
                              2.0 * trace_sqrt_product_general(a.sigma, b.sigma);
      EXPECT_NEAR(frechet_distance(a, b), std::max(expected, 0.0), 1e-8);
    }
  }
}

TEST(Frechet, SymmetryTranslationAndScaling) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_set(40, 3, rng), y = random_set(50, 3, rng, 0.5, 1.5);
    const double f = frechet_distance(fit_stats(x), fit_stats(y));
    EXPECT_NEAR(f, frechet_distance(fit_stats(y), fit_stats(x)), 1e-8);
    // Shift in double precision so float rounding of the inputs does not enter.
    Eigen::MatrixXd mx(40, 3), my(50, 3);
    for (int i = 0; i < 40; ++i) {
      for (int j = 0; j < 3; ++j) mx(i, j) = x[i].values[j];
    }
    for (int i = 0; i < 50; ++i) {
      for (int j = 0; j < 3; ++j) my(i, j) = y[i].values[j];
    }
    const Eigen::RowVector3d shift(0.25, -1.0, 3.0);
    const double shifted = frechet_distance(fit_stats(Eigen::MatrixXd(mx.rowwise() + shift)),
                                            fit_stats(Eigen::MatrixXd(my.rowwise() + shift)));
    EXPECT_NEAR(f, shifted, 1e-8);
  }
  const double c = 3.0;
  const double base = frechet_distance(stats_1d(0.3, 2.0), stats_1d(-1.0, 0.5));
  const double scaled = frechet_distance(stats_1d(0.3 * c, 2.0 * c * c), stats_1d(-1.0 * c, 0.5 * c * c));
  EXPECT_NEAR(scaled, c * c * base, 1e-9);
}

TEST(Frechet, GrowsWithEmbeddingNoise) {
  Rng rng(7);
  const auto ref = random_set(400, 8, rng);
  double previous = -1.0;
  for (double sigma : {0.0, 0.3, 0.8, 1.5}) {
    Rng noise(8);
    std::vector<Embedding> gen = ref;
    for (auto& e : gen) {
      for (float& v : e.values) v += static_cast<float>(sigma * noise.normal());
    }
    const double f = frechet_distance(fit_stats(gen), fit_stats(ref));
    EXPECT_GE(f, previous) << sigma;
    previous = f;
  }
}

TEST(EvaluateFad, SelfEvaluationAndSchema) {
  Rng rng(9);
  EmbeddingsByClass ref;
  const char* classes[] = {"DogBark", "Footstep", "GunShot", "Keyboard", "MovingMotorVehicle", "Rain", "SneezeCough"};
  for (const char* c : classes) ref[c] = random_set(20, 6, rng);
  const FadReport self = evaluate_fad(ref, ref, "test");
  ASSERT_EQ(self.rows.size(), 7U);
  for (const auto& row : self.rows) {
    ASSERT_TRUE(row.fad.has_value());
    EXPECT_LT(*row.fad, 1e-6);
    EXPECT_EQ(row.n_generated, 20);
  }
  EXPECT_LT(*self.pooled, 1e-6);

  EmbeddingsByClass gen = ref;
  gen.erase("Rain");
  gen["Rain"] = random_set(1, 6, rng);
  const FadReport partial = evaluate_fad(gen, ref, "test");
  EXPECT_FALSE(partial.find("Rain")->fad.has_value());
  EXPECT_EQ(partial.find("Rain")->n_generated, 1);
  gen.erase("Rain");
  const FadReport missing = evaluate_fad(gen, ref, "test");
  ASSERT_NE(missing.find("Rain"), nullptr);
  EXPECT_FALSE(missing.find("Rain")->fad.has_value());
  EXPECT_EQ(missing.find("Rain")->n_generated, 0);
}

TEST(EvaluateFad, ReportFilesAndCache) {
  test::TempDir dir;
  Rng rng(10);
  EmbeddingsByClass ref = {{"A", random_set(5, 3, rng)}, {"B", random_set(5, 3, rng)}};
  const FadReport r = evaluate_fad(ref, ref, "test");
  write_fad_csv(dir.path() / "fad.csv", r);
  std::ifstream in(dir.path() / "fad.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "class,F,n_generated,n_reference");

  EmbeddingCache cache(dir.path() / "cache.flab", "enc-1");
  cache.put("clip-1", ref["A"][0]);
  cache.save();
  EmbeddingCache again(dir.path() / "cache.flab", "enc-1");
  ASSERT_NE(again.find("clip-1"), nullptr);
  EXPECT_EQ(again.find("clip-1")->values, ref["A"][0].values);
  EmbeddingCache other(dir.path() / "cache.flab", "enc-2");
  EXPECT_EQ(other.find("clip-1"), nullptr);
}

}  // namespace
}  // namespace flab
