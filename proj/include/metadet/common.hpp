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

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

#if __has_include(<malloc.h>)
#include <malloc.h>
#endif

namespace metadet {

// Tensor buffers are routinely a few hundred KB; keep glibc from serving them
// straight out of mmap (the default 128 KB threshold makes every conv
// intermediate a syscall round trip).
#if __has_include(<malloc.h>) && defined(M_MMAP_THRESHOLD)
inline const bool kMallocTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

/// Floating point type used for all tensor math. Double keeps finite-difference
/// verification and long accumulation chains well inside tolerance.
using real = double;

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& m) : std::runtime_error("contract error: " + m) {}
};
struct IngestError : std::runtime_error {
  explicit IngestError(const std::string& m) : std::runtime_error("ingestion error: " + m) {}
};
struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& m) : std::runtime_error("training error: " + m) {}
};
struct AttackError : std::runtime_error {
  explicit AttackError(const std::string& m) : std::runtime_error("attack error: " + m) {}
};
struct PoolError : std::runtime_error {
  explicit PoolError(const std::string& m) : std::runtime_error("pool error: " + m) {}
};
struct ProtocolError : std::runtime_error {
  explicit ProtocolError(const std::string& m) : std::runtime_error("protocol error: " + m) {}
};
struct BenchmarkError : std::runtime_error {
  explicit BenchmarkError(const std::string& m) : std::runtime_error("benchmark error: " + m) {}
};

namespace detail {
template <class E>
[[noreturn]] inline void raise(const char* cond, const std::string& msg) {
  std::ostringstream os;
  os << msg << " (failed: " << cond << ")";
  throw E(os.str());
}
}  // namespace detail

}  // namespace metadet

#define MD_CHECK(cond, Exc, msg)                            \
  do {                                                      \
    if (!(cond)) ::metadet::detail::raise<Exc>(#cond, msg); \
  } while (0)

#define MD_CONTRACT(cond, msg) MD_CHECK(cond, ::metadet::ContractError, msg)
