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

#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include "metadet/io.hpp"
#include "metadet/rng.hpp"

// Source image datasets. MNIST and Fashion-MNIST are read from IDX files,
// CIFAR-10 from its binary batches; pixels are scaled to [0,1] with no other
// preprocessing so that l-inf budgets stay interpretable. When the published
// files cannot be obtained (offline hosts), synthesize_domain_files() writes a
// deterministic stand-in corpus in the exact same on-disk formats, flagged by
// a PROVENANCE.json marker that is carried through to every report.

namespace metadet::data {

namespace fs = std::filesystem;

enum class Domain { MNIST, FashionMNIST, CIFAR10 };
enum class Split { train, test };

inline std::string domain_name(Domain d) {
  switch (d) {
    case Domain::MNIST: return "MNIST";
    case Domain::FashionMNIST: return "FashionMNIST";
    case Domain::CIFAR10: return "CIFAR10";
  }
  return "?";
}

inline Domain domain_from_name(const std::string& s) {
  if (s == "MNIST") return Domain::MNIST;
  if (s == "FashionMNIST") return Domain::FashionMNIST;
  if (s == "CIFAR10") return Domain::CIFAR10;
  throw ConfigError("unknown domain: " + s);
}

inline std::string split_name(Split s) { return s == Split::train ? "train" : "test"; }

inline std::string domain_dirname(Domain d) {
  switch (d) {
    case Domain::MNIST: return "mnist";
    case Domain::FashionMNIST: return "fashion-mnist";
    case Domain::CIFAR10: return "cifar-10";
  }
  return "?";
}

struct DomainShape {
  std::int64_t channels, height, width;
};

inline DomainShape domain_shape(Domain d) {
  return d == Domain::CIFAR10 ? DomainShape{3, 32, 32} : DomainShape{1, 28, 28};
}

struct ImageDataset {
  Domain domain;
  Split split;
  Tensor images;  // [n, C, H, W], every value in [0,1]
  std::vector<int> labels;
  std::string provenance = "published";  // or "synthetic"

  std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }

  bool covers_all_classes() const {
    std::vector<bool> seen(10, false);
    for (int y : labels) seen[static_cast<std::size_t>(y)] = true;
    for (bool b : seen)
      if (!b) return false;
    return true;
  }
};

/// Data root: CLI override wins, then METADET_DATA_ROOT, then ./data.
inline fs::path resolve_data_root(const std::string& cli_override = "") {
  if (!cli_override.empty()) return cli_override;
  if (const char* env = std::getenv("METADET_DATA_ROOT")) return env;
  return "data";
}

namespace detail {

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off,
                               const std::string& file) {
  MD_CHECK(off + 4 <= b.size(), IngestError, "truncated header in " + file);
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

inline void check_exists(const fs::path& p) {
  MD_CHECK(fs::exists(p), IngestError, "missing dataset file: " + p.string());
}

struct IdxImages {
  std::int64_t n, rows, cols;
  std::vector<unsigned char> bytes;  // pixel payload
};

inline IdxImages read_idx_images(const fs::path& path) {
  check_exists(path);
  auto buf = io::read_bytes(path);
  MD_CHECK(read_be32(buf, 0, path.string()) == 2051, IngestError,
           "bad IDX image magic in " + path.string());
  IdxImages out;
  out.n = read_be32(buf, 4, path.string());
  out.rows = read_be32(buf, 8, path.string());
  out.cols = read_be32(buf, 12, path.string());
  const std::size_t need = 16 + static_cast<std::size_t>(out.n * out.rows * out.cols);
  MD_CHECK(buf.size() >= need, IngestError, "truncated IDX image payload in " + path.string());
  out.bytes.assign(buf.begin() + 16, buf.begin() + static_cast<std::ptrdiff_t>(need));
  return out;
}

inline std::vector<int> read_idx_labels(const fs::path& path) {
  check_exists(path);
  auto buf = io::read_bytes(path);
  MD_CHECK(read_be32(buf, 0, path.string()) == 2049, IngestError,
           "bad IDX label magic in " + path.string());
  const std::int64_t n = read_be32(buf, 4, path.string());
  MD_CHECK(buf.size() >= 8 + static_cast<std::size_t>(n), IngestError,
           "truncated IDX label payload in " + path.string());
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = buf[8 + i];
  return labels;
}

inline std::string provenance_of(const fs::path& dir) {
  const fs::path marker = dir / "PROVENANCE.json";
  if (!fs::exists(marker)) return "published";
  auto j = io::load_json(marker);
  return j.value("synthetic", false) ? "synthetic" : "published";
}

}  // namespace detail

/// Loads one split of one domain from the published binary formats.
inline ImageDataset load_split(Domain domain, Split split, const fs::path& data_root) {
  const fs::path dir = data_root / domain_dirname(domain);
  ImageDataset ds;
  ds.domain = domain;
  ds.split = split;
  ds.provenance = detail::provenance_of(dir);

  if (domain == Domain::CIFAR10) {
    std::vector<fs::path> files;
    if (split == Split::train)
      for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    else
      files.push_back(dir / "test_batch.bin");
    std::vector<unsigned char> all;
    for (const auto& f : files) {
      detail::check_exists(f);
      auto b = io::read_bytes(f);
      MD_CHECK(b.size() % 3073 == 0, IngestError, "corrupt CIFAR-10 batch: " + f.string());
      all.insert(all.end(), b.begin(), b.end());
    }
    const std::int64_t n = static_cast<std::int64_t>(all.size() / 3073);
    ds.images = Tensor({n, 3, 32, 32});
    ds.labels.resize(static_cast<std::size_t>(n));
    real* px = ds.images.data();
    for (std::int64_t i = 0; i < n; ++i) {
      const unsigned char* rec = all.data() + i * 3073;
      const int y = rec[0];
      MD_CHECK(y >= 0 && y <= 9, IngestError, "CIFAR-10 label out of range");
      ds.labels[static_cast<std::size_t>(i)] = y;
      for (std::int64_t j = 0; j < 3072; ++j)
        px[i * 3072 + j] = static_cast<real>(rec[1 + j]) / 255.0;
    }
    return ds;
  }

  const std::string img_name =
      split == Split::train ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte";
  const std::string lbl_name =
      split == Split::train ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte";
  auto imgs = detail::read_idx_images(dir / img_name);
  ds.labels = detail::read_idx_labels(dir / lbl_name);
  MD_CHECK(static_cast<std::int64_t>(ds.labels.size()) == imgs.n, IngestError,
           "image/label count mismatch under " + dir.string());
  for (int y : ds.labels)
    MD_CHECK(y >= 0 && y <= 9, IngestError, "label out of range under " + dir.string());
  ds.images = Tensor({imgs.n, 1, imgs.rows, imgs.cols});
  real* px = ds.images.data();
  const std::int64_t total = imgs.n * imgs.rows * imgs.cols;
  for (std::int64_t i = 0; i < total; ++i)
    px[i] = static_cast<real>(imgs.bytes[static_cast<std::size_t>(i)]) / 255.0;
  return ds;
}

/// Class id -> indices, disjoint and complete.
inline std::map<int, std::vector<std::int64_t>> class_partition(const ImageDataset& ds) {
  std::map<int, std::vector<std::int64_t>> out;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(ds.labels.size()); ++i)
    out[ds.labels[static_cast<std::size_t>(i)]].push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic stand-in corpus (exact published formats, deterministic).
// ---------------------------------------------------------------------------

struct SynthSpec {
  std::int64_t n_train = 60000;
  std::int64_t n_test = 10000;
  std::uint64_t seed = 0;
};

namespace detail {

// 7x5 glyph masks: digit-like for the MNIST stand-in, blocky apparel-like
// silhouettes for the Fashion-MNIST stand-in.
inline const char* const* glyph_table(Domain d) {
  static const char* digits[10] = {
      "01110100011001110101110011000101110",  // 0
      "00100011000010000100001000010001110",  // 1
      "01110100010000100110010001000011111",  // 2
      "01110100010000101110000011000101110",  // 3
      "00010001100101010010111110001000010",  // 4
      "11111100001111000001000011000101110",  // 5
      "01110100001000011110100011000101110",  // 6
      "11111000010001000100010001000010000",  // 7
      "01110100011000101110100011000101110",  // 8
      "01110100011000101111000010000101110",  // 9
  };
  static const char* shapes[10] = {
      "00100011100111011111011100111000100",  // vest
      "10001110111111101110011100111001110",  // shirt
      "00100001000111011111111110111000100",  // dress
      "11111110111101111011110111101111111",  // bag
      "00000111111111100000111111111100000",  // band
      "10101010101111111111111110111000100",  // sandal
      "00000001110111111111111110000000000",  // sneaker
      "11011110111101111011110111101111011",  // coat
      "00100011100111001110011100111011111",  // boot
      "01010111111111101110001000010000100",  // heart-top
  };
  return d == Domain::FashionMNIST ? shapes : digits;
}

inline real sample_glyph(const char* mask, real gy, real gx) {
  // bilinear sample of the 7x5 mask at continuous coordinates
  if (gy < -0.5 || gx < -0.5 || gy > 6.5 || gx > 4.5) return 0;
  auto cell = [&](int r, int c) -> real {
    if (r < 0 || r > 6 || c < 0 || c > 4) return 0;
    return mask[r * 5 + c] == '1' ? 1 : 0;
  };
  const int r0 = static_cast<int>(std::floor(gy)), c0 = static_cast<int>(std::floor(gx));
  const real fy = gy - r0, fx = gx - c0;
  return cell(r0, c0) * (1 - fy) * (1 - fx) + cell(r0 + 1, c0) * fy * (1 - fx) +
         cell(r0, c0 + 1) * (1 - fy) * fx + cell(r0 + 1, c0 + 1) * fy * fx;
}

inline void render_gray(Domain d, int cls, Rng& rng, unsigned char* out28x28) {
  const char* mask = glyph_table(d)[cls];
  const real angle = rng.uniform(-0.25, 0.25);
  const real scale_y = rng.uniform(2.6, 3.4), scale_x = rng.uniform(2.6, 3.4);
  const real cy = 13.5 + rng.uniform(-2.5, 2.5), cx = 13.5 + rng.uniform(-2.5, 2.5);
  const real intensity = rng.uniform(0.6, 1.0);
  const real ca = std::cos(angle), sa = std::sin(angle);
  for (int y = 0; y < 28; ++y) {
    for (int x = 0; x < 28; ++x) {
      const real dy = y - cy, dx = x - cx;
      const real gy = (ca * dy + sa * dx) / scale_y + 3.0;
      const real gx = (-sa * dy + ca * dx) / scale_x + 2.0;
      real v = intensity * sample_glyph(mask, gy, gx);
      v += 0.03 * rng.normal();
      v = std::min<real>(1, std::max<real>(0, v));
      out28x28[y * 28 + x] = static_cast<unsigned char>(std::lround(v * 255));
    }
  }
}

inline void render_color(int cls, Rng& rng, unsigned char* out3x32x32) {
  // class = (shape, palette) pairs; background is a noisy solid color
  const int shape = cls % 5;
  const int palette = cls / 5;
  real fg[3], bg[3];
  for (int c = 0; c < 3; ++c) bg[c] = rng.uniform(0.05, 0.45);
  if (palette == 0) {
    fg[0] = rng.uniform(0.7, 1.0); fg[1] = rng.uniform(0.0, 0.3); fg[2] = rng.uniform(0.3, 0.6);
  } else {
    fg[0] = rng.uniform(0.0, 0.3); fg[1] = rng.uniform(0.6, 1.0); fg[2] = rng.uniform(0.6, 1.0);
  }
  const real cy = 15.5 + rng.uniform(-4, 4), cx = 15.5 + rng.uniform(-4, 4);
  const real r = rng.uniform(5.0, 9.0);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const real dy = y - cy, dx = x - cx;
      bool inside = false;
      switch (shape) {
        case 0: inside = dy * dy + dx * dx <= r * r; break;                       // disk
        case 1: inside = std::fabs(dy) <= r * 0.8 && std::fabs(dx) <= r * 0.8; break;  // square
        case 2: inside = std::fabs(dy) <= r * 0.3 || std::fabs(dx) <= r * 0.3; break;  // cross
        case 3: inside = static_cast<int>(std::floor((y + x) / 4.0)) % 2 == 0 &&
                         dy * dy + dx * dx <= r * r; break;                        // diag stripes
        case 4: inside = std::fabs(std::sqrt(dy * dy + dx * dx) - r) <= 1.8; break;     // ring
      }
      for (int c = 0; c < 3; ++c) {
        real v = (inside ? fg[c] : bg[c]) + 0.04 * rng.normal();
        v = std::min<real>(1, std::max<real>(0, v));
        out3x32x32[c * 1024 + y * 32 + x] = static_cast<unsigned char>(std::lround(v * 255));
      }
    }
  }
}

inline void write_idx_files(const fs::path& dir, const std::string& img_name,
                            const std::string& lbl_name, std::int64_t n, Domain d, Rng& rng) {
  std::vector<unsigned char> img;
  img.reserve(static_cast<std::size_t>(16 + n * 784));
  auto put_be = [&](std::vector<unsigned char>& b, std::uint32_t v) {
    b.push_back(static_cast<unsigned char>(v >> 24));
    b.push_back(static_cast<unsigned char>(v >> 16));
    b.push_back(static_cast<unsigned char>(v >> 8));
    b.push_back(static_cast<unsigned char>(v));
  };
  put_be(img, 2051);
  put_be(img, static_cast<std::uint32_t>(n));
  put_be(img, 28);
  put_be(img, 28);
  std::vector<unsigned char> lbl;
  put_be(lbl, 2049);
  put_be(lbl, static_cast<std::uint32_t>(n));
  unsigned char pix[784];
  for (std::int64_t i = 0; i < n; ++i) {
    const int cls = i < 10 ? static_cast<int>(i) : static_cast<int>(rng.below(10));
    render_gray(d, cls, rng, pix);
    img.insert(img.end(), pix, pix + 784);
    lbl.push_back(static_cast<unsigned char>(cls));
  }
  io::write_bytes(dir / img_name, img.data(), img.size());
  io::write_bytes(dir / lbl_name, lbl.data(), lbl.size());
}

}  // namespace detail

/// Writes a deterministic stand-in corpus for one domain in the published
/// binary formats, plus a PROVENANCE.json marker. First ten samples of each
/// split cycle through the classes so tiny corpora still cover all labels.
inline void synthesize_domain_files(Domain domain, const fs::path& data_root,
                                    const SynthSpec& spec) {
  const fs::path dir = data_root / domain_dirname(domain);
  fs::create_directories(dir);
  Rng rng = stage_rng(spec.seed, "synth:" + domain_name(domain));
  if (domain == Domain::CIFAR10) {
    const std::int64_t per = (spec.n_train + 4) / 5;
    std::int64_t left = spec.n_train;
    for (int b = 1; b <= 5; ++b) {
      const std::int64_t n = std::min<std::int64_t>(per, std::max<std::int64_t>(left, 0));
      std::vector<unsigned char> buf;
      buf.reserve(static_cast<std::size_t>(n * 3073));
      unsigned char pix[3072];
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t global = spec.n_train - left + i;
        const int cls = global < 10 ? static_cast<int>(global) : static_cast<int>(rng.below(10));
        detail::render_color(cls, rng, pix);
        buf.push_back(static_cast<unsigned char>(cls));
        buf.insert(buf.end(), pix, pix + 3072);
      }
      left -= n;
      io::write_bytes(dir / ("data_batch_" + std::to_string(b) + ".bin"), buf.data(), buf.size());
    }
    std::vector<unsigned char> buf;
    unsigned char pix[3072];
    for (std::int64_t i = 0; i < spec.n_test; ++i) {
      const int cls = i < 10 ? static_cast<int>(i) : static_cast<int>(rng.below(10));
      detail::render_color(cls, rng, pix);
      buf.push_back(static_cast<unsigned char>(cls));
      buf.insert(buf.end(), pix, pix + 3072);
    }
    io::write_bytes(dir / "test_batch.bin", buf.data(), buf.size());
  } else {
    detail::write_idx_files(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                            spec.n_train, domain, rng);
    detail::write_idx_files(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte",
                            spec.n_test, domain, rng);
  }
  io::save_json(dir / "PROVENANCE.json",
                {{"synthetic", true},
                 {"generator", "metadet-synth-1"},
                 {"seed", spec.seed},
                 {"n_train", spec.n_train},
                 {"n_test", spec.n_test}});
}

/// True when the published (or previously synthesized) files are present.
inline bool split_files_present(Domain domain, const fs::path& data_root) {
  const fs::path dir = data_root / domain_dirname(domain);
  if (domain == Domain::CIFAR10)
    return fs::exists(dir / "data_batch_1.bin") && fs::exists(dir / "test_batch.bin");
  return fs::exists(dir / "train-images-idx3-ubyte") &&
         fs::exists(dir / "t10k-images-idx3-ubyte");
}

}  // namespace metadet::data
