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

// Named-array container ("FLAB1"):
//   magic "FLAB1"
//   u64 metadata length, UTF-8 JSON metadata (sorted keys)
//   u64 array count
//   per array, in name order:
//     u32 name length, name bytes, u8 dtype tag (1 = float32),
//     u32 rank, u64 dims[rank], little-endian float32 payload

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flab/nn/adam.hpp"
#include "flab/nn/layers.hpp"

namespace flab {

struct NamedArray {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  bool operator==(const NamedArray&) const = default;
};

struct Bundle {
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, NamedArray> arrays;

  bool has(const std::string& name) const { return arrays.contains(name); }
  const NamedArray& at(const std::string& name) const;
};

std::string serialize_bundle(const Bundle& b);
Bundle deserialize_bundle(const std::string& bytes);
void save_bundle(const std::filesystem::path& path, const Bundle& b);
Bundle load_bundle(const std::filesystem::path& path);

// Copies every parameter of `ps` into `b` as `prefix + name`.
void store_params(Bundle& b, const std::string& prefix, const nn::ParamSet<float>& ps);
// Overwrites parameter values from `b`; missing or mis-shaped arrays raise
// ConfigError.
void load_params(const Bundle& b, const std::string& prefix, nn::ParamSet<float>& ps);

void store_optimizer(Bundle& b, const std::string& prefix, const nn::Adam<float>& opt);
void load_optimizer(const Bundle& b, const std::string& prefix, nn::Adam<float>& opt);

NamedArray make_array(std::vector<std::int64_t> shape, std::vector<float> data);

}  // namespace flab
