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

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "flab/error.hpp"
#include "flab/rng.hpp"
#include "flab/selector.hpp"
#include "test_util.hpp"

namespace flab {
namespace {

Embedding random_unit(int d, Rng& rng) {
  Embedding e;
  e.values.resize(d);
  for (float& v : e.values) v = static_cast<float>(rng.normal());
  return normalized(e);
}

CandidatePool pool_with_scores(const std::vector<double>& scores) {
  CandidatePool pool;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    Candidate c;
    c.clip_id = "c" + std::to_string(100 + i);
    c.score = scores[i];
    pool.push_back(std::move(c));
  }
  return pool;
}

SelectionPolicy mode_policy(SelectMode m, double theta = -1.0) {
  SelectionPolicy p;
  p.mode = m;
  p.thresholds["X"] = theta;
  return p;
}

TEST(Selector, ScoreIdentityAndOrthogonal) {
  const Embedding a{{1.0F, 0.0F, 0.0F}, true};
  const Embedding b{{0.0F, 1.0F, 0.0F}, true};
  EXPECT_NEAR(score_candidate(a, a), 1.0, 1e-12);
  EXPECT_NEAR(score_candidate(a, b), 0.0, 1e-12);
}

TEST(Selector, NamesRoundTrip) {
  for (auto m : {SelectMode::none, SelectMode::top1, SelectMode::threshold}) {
    EXPECT_EQ(parse_select_mode(select_mode_name(m)), m);
  }
  for (auto t : {TargetSource::tuned_text, TargetSource::text_variant,
                 TargetSource::audio_embedding_pool}) {
    EXPECT_EQ(parse_target_source(target_source_name(t)), t);
  }
  EXPECT_THROW(parse_select_mode("best"), ConfigError);
  EXPECT_THROW(parse_target_source("x"), ConfigError);
  SelectionPolicy p;
  p.thresholds["A"] = 1.5;
  EXPECT_THROW(p.validate(), ConfigError);
  p.thresholds["A"] = 0.2;
  p.pool_size = 0;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Selector, DegenerateCases) {
  const CandidatePool one = pool_with_scores({-0.9});
  EXPECT_EQ(select(one, mode_policy(SelectMode::top1), "X", 1), std::vector<std::string>{"c100"});
  const CandidatePool pool = pool_with_scores({0.1, -0.5, 0.9, -1.0, 0.3});
  const auto all = select(pool, mode_policy(SelectMode::threshold, -1.0), "X", 1);
  EXPECT_EQ(all.size(), pool.size());
  EXPECT_EQ(select(pool, mode_policy(SelectMode::none), "X", 2),
            (std::vector<std::string>{"c100", "c101"}));
  EXPECT_THROW(select(CandidatePool{}, mode_policy(SelectMode::top1), "X", 1), InputError);
  EXPECT_THROW(select(one, mode_policy(SelectMode::top1), "X", 2), InputError);
}

TEST(Selector, TopMatchesSortOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(10));
    std::vector<double> scores(n);
    // Coarse quantisation forces ties.
    for (double& s : scores) s = std::round(rng.uniform(-1.0, 1.0) * 4.0) / 4.0;
    const CandidatePool pool = pool_with_scores(scores);
    const int want = 1 + static_cast<int>(rng.below(n));
    std::vector<std::pair<double, std::string>> oracle;
    for (const auto& c : pool) oracle.emplace_back(-c.score, c.clip_id);
    std::sort(oracle.begin(), oracle.end());
    std::vector<std::string> expect;
    for (int i = 0; i < want; ++i) expect.push_back(oracle[i].second);
    EXPECT_EQ(select(pool, mode_policy(SelectMode::top1), "X", want), expect);
  }
}

TEST(Selector, ThresholdPassesThenBackfills) {
  const CandidatePool pool = pool_with_scores({0.2, 0.8, 0.5, 0.9, 0.1});
  EXPECT_EQ(select(pool, mode_policy(SelectMode::threshold, 0.5), "X", 1),
            (std::vector<std::string>{"c101", "c102", "c103"}));
  EXPECT_EQ(select(pool, mode_policy(SelectMode::threshold, 0.95), "X", 2),
            (std::vector<std::string>{"c103", "c101"}));
  SelectionPolicy strict = mode_policy(SelectMode::threshold, 0.95);
  strict.backfill = false;
  EXPECT_TRUE(select(pool, strict, "X", 2).empty());
  // A class without a threshold behaves as -1.
  EXPECT_EQ(select(pool, mode_policy(SelectMode::threshold, 0.95), "Other", 1).size(), 5U);
}

TEST(Selector, MonotoneSubsetNoDuplicates) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> scores(8);
    for (double& s : scores) s = rng.uniform(-1.0, 1.0);
    const CandidatePool pool = pool_with_scores(scores);
    std::set<std::string> ids;
    for (const auto& c : pool) ids.insert(c.clip_id);
    std::size_t prev = pool.size() + 1;
    for (double theta : default_threshold_grid()) {
      SelectionPolicy p = mode_policy(SelectMode::threshold, theta);
      p.backfill = false;
      const auto out = select(pool, p, "X", 3);
      EXPECT_LE(out.size(), prev);
      prev = out.size();
      const std::set<std::string> uniq(out.begin(), out.end());
      EXPECT_EQ(uniq.size(), out.size());
      for (const auto& id : out) EXPECT_TRUE(ids.count(id));
      p.backfill = true;
      const auto filled = select(pool, p, "X", 3);
      EXPECT_GE(filled.size(), 3U);
      EXPECT_EQ(std::set<std::string>(filled.begin(), filled.end()).size(), filled.size());
    }
  }
}

TEST(Selector, TopIsScaleInvariant) {
  Rng rng(13);
  CandidatePool pool;
  for (int i = 0; i < 8; ++i) pool.push_back({"k" + std::to_string(i), random_unit(16, rng), 0.0});
  Embedding target = random_unit(16, rng);
  score_pool(pool, target);
  const auto a = select(pool, mode_policy(SelectMode::top1), "X", 3);
  for (float& v : target.values) v *= 7.5F;
  target.normalized = false;
  score_pool(pool, target);
  EXPECT_EQ(select(pool, mode_policy(SelectMode::top1), "X", 3), a);
}

TEST(Selector, MultiTargetReducesToSingle) {
  Rng rng(14);
  CandidatePool pool;
  for (int i = 0; i < 8; ++i) pool.push_back({"k" + std::to_string(i), random_unit(16, rng), 0.0});
  const Embedding target = random_unit(16, rng);
  CandidatePool scored = pool;
  score_pool(scored, target);
  const SelectionPolicy p = mode_policy(SelectMode::top1);
  const std::vector<Embedding> one{target};
  EXPECT_EQ(multi_target_select(pool, one, p, "X", 3, 5), select(scored, p, "X", 3));

  std::vector<Embedding> many;
  for (int i = 0; i < 4; ++i) many.push_back(random_unit(16, rng));
  const auto x = multi_target_select(pool, many, p, "X", 4, 9);
  EXPECT_EQ(x, multi_target_select(pool, many, p, "X", 4, 9));
  EXPECT_EQ(std::set<std::string>(x.begin(), x.end()).size(), 4U);
  EXPECT_THROW(multi_target_select(pool, std::vector<Embedding>{}, p, "X", 1, 1), InputError);
}

TEST(Selector, AudioTargetPoolMatchesBruteForce) {
  Rng rng(15);
  const Embedding centre = random_unit(8, rng);
  std::vector<std::string> ids;
  std::vector<Embedding> embs;
  for (int i = 0; i < 12; ++i) {
    Embedding e = random_unit(8, rng);
    const double w = rng.uniform(0.0, 2.0);
    for (int k = 0; k < 8; ++k) e.values[k] += static_cast<float>(w * centre.values[k]);
    ids.push_back("t" + std::to_string(i));
    embs.push_back(normalized(e));
  }
  const auto top = build_audio_target_pool(ids, embs, 3);
  ASSERT_EQ(top.size(), 3U);
  double best = -2.0;
  std::string best_id;
  for (int i = 0; i < 12; ++i) {
    double acc = 0.0;
    for (int j = 0; j < 12; ++j) {
      if (i == j) continue;
      double d = 0.0;
      for (int k = 0; k < 8; ++k) d += static_cast<double>(embs[i].values[k]) * embs[j].values[k];
      acc += d;
    }
    if (acc / 11.0 > best) {
      best = acc / 11.0;
      best_id = ids[i];
    }
  }
  EXPECT_EQ(top.front().clip_id, best_id);
  EXPECT_NEAR(top.front().mean_cosine, best, 1e-6);
  EXPECT_GE(top[0].mean_cosine, top[1].mean_cosine);
  EXPECT_GE(top[1].mean_cosine, top[2].mean_cosine);

  const auto whole = build_audio_target_pool(ids, embs, 12);
  std::set<std::string> got;
  for (const auto& e : whole) got.insert(e.clip_id);
  EXPECT_EQ(got, std::set<std::string>(ids.begin(), ids.end()));
  EXPECT_THROW(build_audio_target_pool(ids, embs, 13), InputError);
  EXPECT_THROW(build_audio_target_pool(ids, embs, 0), InputError);
}

struct CalibrationFixture {
  std::map<std::string, std::vector<CandidatePool>, std::less<>> pools;
  EmbeddingsByClass reference;
};

// Candidates near the reference mean score high; the rest are shifted off.
CalibrationFixture calibration_fixture(std::uint64_t seed) {
  Rng rng(seed);
  const int d = 6;
  CalibrationFixture f;
  for (const std::string cls : {"A", "B"}) {
    auto& ref = f.reference[cls];
    for (int i = 0; i < 40; ++i) {
      Embedding e;
      for (int k = 0; k < d; ++k) e.values.push_back(static_cast<float>(rng.normal(0.0, 0.3)));
      ref.push_back(e);
    }
    for (int r = 0; r < 20; ++r) {
      CandidatePool pool;
      for (int c = 0; c < 6; ++c) {
        const double off = rng.uniform(0.0, 3.0);
        Embedding e;
        for (int k = 0; k < d; ++k) {
          e.values.push_back(static_cast<float>(rng.normal(k == 0 ? off : 0.0, 0.3)));
        }
        pool.push_back({cls + std::to_string(r) + "_" + std::to_string(c), e,
                        std::clamp(1.0 - off / 1.5, -1.0, 1.0)});
      }
      f.pools[cls].push_back(std::move(pool));
    }
  }
  return f;
}

TEST(Calibration, SinglePointGridIsNoOp) {
  const auto f = calibration_fixture(21);
  const std::vector<double> grid{-1.0};
  const auto r = calibrate_thresholds(f.pools, f.reference, grid);
  for (const auto& [cls, theta] : r.thresholds) EXPECT_EQ(theta, -1.0);
  EXPECT_EQ(r.rows.size(), 2U);
  EXPECT_THROW(calibrate_thresholds(f.pools, f.reference, std::vector<double>{}), ConfigError);
}

TEST(Calibration, NeverWorseThanNoSelectionAndDeterministic) {
  const auto f = calibration_fixture(22);
  const auto grid = default_threshold_grid();
  const auto r = calibrate_thresholds(f.pools, f.reference, grid);
  for (const auto& [cls, theta] : r.thresholds) {
    std::optional<double> at_theta, at_none;
    for (const auto& row : r.rows) {
      if (row.class_name != cls) continue;
      if (row.theta == theta) at_theta = row.fad;
      if (row.theta == -1.0) at_none = row.fad;
    }
    ASSERT_TRUE(at_theta && at_none);
    EXPECT_LE(*at_theta, *at_none);
    EXPECT_GT(theta, -1.0);  // the fixture rewards selection
  }
  const auto again = calibrate_thresholds(f.pools, f.reference, grid);
  EXPECT_EQ(again.thresholds, r.thresholds);

  test::TempDir dir;
  write_calibration_csv(dir.path() / "cal.csv", r);
  std::ifstream in(dir.path() / "cal.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "class,theta,n_selected,n_passing,F");
}

TEST(Calibration, MissingReferenceIsInputError) {
  auto f = calibration_fixture(23);
  f.reference.erase("B");
  EXPECT_THROW(calibrate_thresholds(f.pools, f.reference, default_threshold_grid()), InputError);
}

}  // namespace
}  // namespace flab
