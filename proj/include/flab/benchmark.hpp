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
#include <optional>
#include <string>
#include <vector>

#include "flab/config.hpp"
#include "flab/pipeline.hpp"

namespace flab {

// One rung of the ablation ladder.
struct AblationRow {
  std::string name;
  bool from_scratch = false;
  std::string text_mode = "wrapped";
  std::string tuner = "off";
  SelectMode mode = SelectMode::none;
};

// Known rows: LDM-S, +Pre, +Text, +Filter, +Tuned.
AblationRow ablation_row(const std::string& name);

struct BenchmarkCell {
  std::string row;
  std::uint64_t seed = 0;
  std::string class_name;  // "__pooled__" for the pooled distance
  std::optional<double> fad;
};

// Per-run distance of one configuration on the complex class.
struct RepeatRun {
  std::string configuration;
  std::uint64_t seed = 0;
  std::optional<double> fad;
};

struct BenchmarkReport {
  std::vector<std::string> rows;
  std::vector<std::string> classes;
  std::vector<std::uint64_t> seeds;
  std::vector<BenchmarkCell> cells;
  std::vector<RepeatRun> repeats;  // training-embedding comparison
  std::vector<RepeatRun> targets;  // selection-target comparison
  std::vector<std::string> errors;

  // Means over seeds with a value.
  std::optional<double> mean(const std::string& row, const std::string& class_name) const;
  std::optional<double> mean_pooled(const std::string& row) const;
};

struct BenchmarkOptions {
  bool ablation = true;
  bool repeats = true;
  bool targets = true;
  LogFn log = log_stderr;
};

// Trains and evaluates the ablation ladder for every configured seed,
// then the repeat and target studies on the first seed. Row failures are
// recorded and the run continues. Reports are written below out_dir.
BenchmarkReport cmd_benchmark(const RunConfig& cfg, const std::filesystem::path& out_dir,
                              const BenchmarkOptions& opts = {});

// ablation.csv, ablation_seeds.csv, repeats.csv, targets.csv, errors.txt.
void write_benchmark_report(const std::filesystem::path& dir, const BenchmarkReport& r);

// Interquartile range with linear interpolation between order statistics.
double interquartile_range(std::vector<double> v);
double median(std::vector<double> v);

}  // namespace flab
