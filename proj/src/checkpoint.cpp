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

#include "flab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "flab/error.hpp"

namespace flab {
namespace {

constexpr char kMagic[] = "FLAB1";
constexpr std::size_t kMagicLen = 5;
constexpr std::uint8_t kFloat32 = 1;

void put_uint(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > s_.size()) throw IoError("truncated checkpoint");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

std::size_t count_of(const std::vector<std::int64_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

}  // namespace

const NamedArray& Bundle::at(const std::string& name) const {
  const auto it = arrays.find(name);
  if (it == arrays.end()) throw ConfigError("checkpoint has no array named " + name);
  return it->second;
}

NamedArray make_array(std::vector<std::int64_t> shape, std::vector<float> data) {
  if (count_of(shape) != data.size()) throw InputError("array data does not match its shape");
  return NamedArray{std::move(shape), std::move(data)};
}

std::string serialize_bundle(const Bundle& b) {
  std::string out(kMagic, kMagicLen);
  const std::string meta = b.metadata.dump();
  put_uint(out, meta.size(), 8);
  out += meta;
  put_uint(out, b.arrays.size(), 8);
  for (const auto& [name, arr] : b.arrays) {
    if (count_of(arr.shape) != arr.data.size()) {
      throw InputError("array " + name + " does not match its shape");
    }
    put_uint(out, name.size(), 4);
    out += name;
    out.push_back(static_cast<char>(kFloat32));
    put_uint(out, arr.shape.size(), 4);
    for (auto d : arr.shape) put_uint(out, static_cast<std::uint64_t>(d), 8);
    for (float f : arr.data) put_uint(out, std::bit_cast<std::uint32_t>(f), 4);
  }
  return out;
}

Bundle deserialize_bundle(const std::string& bytes) {
  if (bytes.size() < kMagicLen || bytes.compare(0, kMagicLen, kMagic) != 0) {
    throw IoError("not a FLAB1 container");
  }
  Reader r(bytes);
  r.bytes(kMagicLen);
  Bundle b;
  const auto meta_len = r.uint(8);
  try {
    b.metadata = nlohmann::json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  const auto count = r.uint(8);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name = r.bytes(r.uint(4));
    if (r.uint(1) != kFloat32) throw IoError("unsupported dtype for array " + name);
    NamedArray arr;
    const auto rank = r.uint(4);
    for (std::uint64_t d = 0; d < rank; ++d) arr.shape.push_back(static_cast<std::int64_t>(r.uint(8)));
    arr.data.resize(count_of(arr.shape));
    for (float& f : arr.data) f = std::bit_cast<float>(static_cast<std::uint32_t>(r.uint(4)));
    b.arrays.emplace(name, std::move(arr));
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint arrays");
  return b;
}

void save_bundle(const std::filesystem::path& path, const Bundle& b) {
  const std::string bytes = serialize_bundle(b);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Bundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_bundle(ss.str());
}

void store_params(Bundle& b, const std::string& prefix, const nn::ParamSet<float>& ps) {
  for (const auto& [name, v] : ps.entries()) {
    std::vector<std::int64_t> shape(v.shape().begin(), v.shape().end());
    b.arrays[prefix + name] = NamedArray{std::move(shape),
                                         std::vector<float>(v.value().begin(), v.value().end())};
  }
}

void load_params(const Bundle& b, const std::string& prefix, nn::ParamSet<float>& ps) {
  for (const auto& [name, v] : ps.entries()) {
    const auto& arr = b.at(prefix + name);
    const std::vector<std::int64_t> want(v.shape().begin(), v.shape().end());
    if (arr.shape != want) {
      throw ConfigError("checkpoint array " + prefix + name + " has the wrong shape");
    }
    nn::Var<float> handle = v;
    auto dst = handle.mutable_value();
    std::copy(arr.data.begin(), arr.data.end(), dst.begin());
  }
}

void store_optimizer(Bundle& b, const std::string& prefix, const nn::Adam<float>& opt) {
  const auto& params = opt.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto n = static_cast<std::int64_t>(opt.first_moments()[k].size());
    b.arrays[prefix + "m." + params[k].first] = NamedArray{{n}, opt.first_moments()[k]};
    b.arrays[prefix + "v." + params[k].first] = NamedArray{{n}, opt.second_moments()[k]};
  }
  b.arrays[prefix + "step"] = NamedArray{{1}, {static_cast<float>(opt.steps())}};
}

void load_optimizer(const Bundle& b, const std::string& prefix, nn::Adam<float>& opt) {
  std::vector<std::vector<float>> m, v;
  for (const auto& [name, p] : opt.params()) {
    m.push_back(b.at(prefix + "m." + name).data);
    v.push_back(b.at(prefix + "v." + name).data);
  }
  opt.restore(static_cast<std::int64_t>(b.at(prefix + "step").data.at(0)), std::move(m), std::move(v));
}

}  // namespace flab
