// Copyright 2026 The metadet Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "metadet/tensor.hpp"

namespace metadet::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  MD_CHECK(in.good(), IngestError, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto n = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<unsigned char> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  MD_CHECK(in.good(), IngestError, "short read on " + path.string());
  return buf;
}

inline void write_bytes(const fs::path& path, const void* data, std::size_t n) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  MD_CHECK(out.good(), IngestError, "cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  MD_CHECK(out.good(), IngestError, "short write on " + path.string());
}

inline std::string file_hash(const fs::path& path) {
  auto bytes = read_bytes(path);
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

// -- little-endian scalar packing (host assumed little-endian, asserted) -----

static_assert(std::endian::native == std::endian::little,
              "tensor file format assumes a little-endian host");

template <class T>
inline void put(std::vector<unsigned char>& buf, T v) {
  const auto* p = reinterpret_cast<const unsigned char*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

template <class T>
inline T take(const std::vector<unsigned char>& buf, std::size_t& off) {
  MD_CHECK(off + sizeof(T) <= buf.size(), IngestError, "truncated binary payload");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

// -- tensor blob: 8-byte magic + shape header + raw little-endian payload ----

constexpr char kTensorMagic[8] = {'M', 'D', 'T', 'N', 'S', 'R', '1', '\n'};

/// Persist as float32 (the on-disk dtype for image tensors).
inline void save_tensor_f32(const fs::path& path, const Tensor& t) {
  std::vector<unsigned char> buf;
  buf.insert(buf.end(), kTensorMagic, kTensorMagic + 8);
  put<std::uint32_t>(buf, 1);  // dtype: f32
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(buf, static_cast<std::uint64_t>(d));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    put<float>(buf, static_cast<float>(t.at(i)));
  write_bytes(path, buf.data(), buf.size());
}

inline Tensor load_tensor_f32(const fs::path& path) {
  auto buf = read_bytes(path);
  MD_CHECK(buf.size() >= 16 && std::memcmp(buf.data(), kTensorMagic, 8) == 0, IngestError,
           "bad tensor magic in " + path.string());
  std::size_t off = 8;
  const auto dtype = take<std::uint32_t>(buf, off);
  MD_CHECK(dtype == 1, IngestError, "unexpected dtype in " + path.string());
  const auto rank = take<std::uint32_t>(buf, off);
  Shape dims;
  for (std::uint32_t i = 0; i < rank; ++i)
    dims.push_back(static_cast<std::int64_t>(take<std::uint64_t>(buf, off)));
  Tensor t(dims);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.at(i) = take<float>(buf, off);
  return t;
}

inline void save_labels(const fs::path& path, const std::vector<int>& labels) {
  std::vector<unsigned char> buf;
  buf.insert(buf.end(), kTensorMagic, kTensorMagic + 8);
  put<std::uint32_t>(buf, 2);  // dtype: i32
  put<std::uint32_t>(buf, 1);
  put<std::uint64_t>(buf, labels.size());
  for (int v : labels) put<std::int32_t>(buf, v);
  write_bytes(path, buf.data(), buf.size());
}

inline std::vector<int> load_labels(const fs::path& path) {
  auto buf = read_bytes(path);
  MD_CHECK(buf.size() >= 16 && std::memcmp(buf.data(), kTensorMagic, 8) == 0, IngestError,
           "bad tensor magic in " + path.string());
  std::size_t off = 8;
  MD_CHECK(take<std::uint32_t>(buf, off) == 2, IngestError, "expected label dtype");
  MD_CHECK(take<std::uint32_t>(buf, off) == 1, IngestError, "labels must be rank 1");
  const auto n = take<std::uint64_t>(buf, off);
  std::vector<int> out(n);
  for (auto& v : out) v = take<std::int32_t>(buf, off);
  return out;
}

// -- parameter blob: named float64 tensors ------------------------------------

constexpr char kParamMagic[8] = {'M', 'D', 'P', 'A', 'R', 'M', '1', '\n'};

inline void save_named_tensors(const fs::path& path,
                               const std::vector<std::pair<std::string, Tensor>>& items) {
  std::vector<unsigned char> buf;
  buf.insert(buf.end(), kParamMagic, kParamMagic + 8);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(items.size()));
  for (const auto& [name, t] : items) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(buf, static_cast<std::uint64_t>(d));
    for (std::int64_t i = 0; i < t.numel(); ++i) put<double>(buf, t.at(i));
  }
  write_bytes(path, buf.data(), buf.size());
}

inline std::vector<std::pair<std::string, Tensor>> load_named_tensors(const fs::path& path) {
  auto buf = read_bytes(path);
  MD_CHECK(buf.size() >= 12 && std::memcmp(buf.data(), kParamMagic, 8) == 0, IngestError,
           "bad parameter magic in " + path.string());
  std::size_t off = 8;
  const auto count = take<std::uint32_t>(buf, off);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = take<std::uint32_t>(buf, off);
    MD_CHECK(off + name_len <= buf.size(), IngestError, "truncated name");
    std::string name(reinterpret_cast<const char*>(buf.data() + off), name_len);
    off += name_len;
    const auto rank = take<std::uint32_t>(buf, off);
    Shape dims;
    for (std::uint32_t i = 0; i < rank; ++i)
      dims.push_back(static_cast<std::int64_t>(take<std::uint64_t>(buf, off)));
    Tensor t(dims);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.at(i) = take<double>(buf, off);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

// -- json ----------------------------------------------------------------------

inline void save_json(const fs::path& path, const json& j) {
  const std::string s = j.dump(2) + "\n";
  write_bytes(path, s.data(), s.size());
}

inline json load_json(const fs::path& path) {
  auto bytes = read_bytes(path);
  return json::parse(bytes.begin(), bytes.end());
}

/// Hash of the canonical (sorted-key) dump; stable across runs.
inline std::string json_hash(const json& j) { return hex64(fnv1a64(j.dump())); }

}  // namespace metadet::io
