// Copyright 2026 The TaCA Lab Authors.
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


#include "taca/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "taca/binary_io.hpp"
#include "taca/errors.hpp"
#include "taca/rng.hpp"

namespace taca {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'T', 'A', 'C', 'D'};
constexpr double kNoiseAmplitude = 0.05;

// Glyph membership at fractional coordinates (u, v) in (0, 1) of its box.
bool glyph_covers(Glyph g, double u, double v) {
  switch (g) {
    case Glyph::kSquare:
      return true;
    case Glyph::kCross:
      return std::abs(u - 0.5) < 1.0 / 6.0 || std::abs(v - 0.5) < 1.0 / 6.0;
    case Glyph::kDiagonal:
      return std::abs(u - v) < 0.2;
    case Glyph::kRing:
      return std::max(std::abs(u - 0.5), std::abs(v - 0.5)) > 1.0 / 3.0;
  }
  return false;
}

void check_render_spec(const ImageSpec& spec) {
  if (spec.height < 4 || spec.width < 4 || spec.height % 2 != 0 || spec.width % 2 != 0 ||
      spec.channels == 0) {
    throw SpecError("rendering needs even height and width of at least 4");
  }
}

}  // namespace

std::size_t LatentFactor::index() const {
  validate();
  return (static_cast<std::size_t>(shape) * kAttributeLevels + color) * kAttributeLevels +
         position;
}

LatentFactor LatentFactor::from_index(std::size_t index) {
  if (index >= kLatentCount) {
    throw ParameterError("latent index " + std::to_string(index) + " outside [0, 64)");
  }
  return LatentFactor{static_cast<std::uint8_t>(index / 16),
                      static_cast<std::uint8_t>((index / 4) % 4),
                      static_cast<std::uint8_t>(index % 4)};
}

void LatentFactor::validate() const {
  if (shape >= kAttributeLevels || color >= kAttributeLevels || position >= kAttributeLevels) {
    throw ParameterError("latent attributes must lie in [0, 4)");
  }
}

Image render_image(const LatentFactor& z, std::uint64_t noise_seed, const ImageSpec& spec) {
  z.validate();
  check_render_spec(spec);
  Rng rng(derive_seed(noise_seed, "image"));
  Image img{spec.height, spec.width, spec.channels, {}};
  img.pixels.resize(spec.pixel_count());
  const std::size_t qh = spec.height / 2, qw = spec.width / 2;
  const std::size_t r0 = (z.position / 2) * qh, c0 = (z.position % 2) * qw;
  // One pixel of margin inside the quadrant when it is large enough.
  const std::size_t mh = qh >= 4 ? 1 : 0, mw = qw >= 4 ? 1 : 0;
  const double bh = static_cast<double>(qh - 2 * mh), bw = static_cast<double>(qw - 2 * mw);
  const double intensity = (z.color + 1.0) / 4.0;
  const auto glyph = static_cast<Glyph>(z.shape);
  for (std::size_t r = 0; r < spec.height; ++r) {
    for (std::size_t c = 0; c < spec.width; ++c) {
      double base = 0.0;
      if (r >= r0 + mh && r < r0 + qh - mh && c >= c0 + mw && c < c0 + qw - mw) {
        const double u = (static_cast<double>(r - r0 - mh) + 0.5) / bh;
        const double v = (static_cast<double>(c - c0 - mw) + 0.5) / bw;
        if (glyph_covers(glyph, u, v)) base = intensity;
      }
      for (std::size_t ch = 0; ch < spec.channels; ++ch) {
        const double noisy = base + rng.uniform(0.0, kNoiseAmplitude);
        img.pixels[(r * spec.width + c) * spec.channels + ch] = std::clamp(noisy, 0.0, 1.0);
      }
    }
  }
  return img;
}

TokenSequence render_caption(const LatentFactor& z, std::uint64_t noise_seed) {
  z.validate();
  Rng rng(derive_seed(noise_seed, "caption"));
  TokenSequence tokens{kShapeTokenBase + z.shape, kColorTokenBase + z.color,
                       kPositionTokenBase + z.position};
  const auto distractor =
      kDistractorTokenBase + static_cast<std::uint32_t>(rng.index(kDistractorTokenCount));
  const auto at = static_cast<std::ptrdiff_t>(rng.index(tokens.size() + 1));
  tokens.insert(tokens.begin() + at, distractor);
  return tokens;
}

LatentFactor latent_from_caption(const TokenSequence& caption) {
  int shape = -1, color = -1, position = -1;
  auto take = [](int& slot, std::uint32_t id, std::uint32_t base) {
    if (id < base || id >= base + kAttributeLevels) return false;
    if (slot >= 0) throw FormatError("caption repeats an attribute");
    slot = static_cast<int>(id - base);
    return true;
  };
  for (auto id : caption) {
    take(shape, id, kShapeTokenBase) || take(color, id, kColorTokenBase) ||
        take(position, id, kPositionTokenBase);
  }
  if (shape < 0 || color < 0 || position < 0) {
    throw FormatError("caption lacks an attribute token");
  }
  return LatentFactor{static_cast<std::uint8_t>(shape), static_cast<std::uint8_t>(color),
                      static_cast<std::uint8_t>(position)};
}

PairedSample make_sample(const LatentFactor& z, std::uint64_t noise_seed,
                         const ImageSpec& spec) {
  return PairedSample{render_image(z, noise_seed, spec), render_caption(z, noise_seed), z};
}

Dataset generate_dataset(std::size_t n, std::uint64_t seed, const ImageSpec& spec) {
  if (n == 0) throw ParameterError("dataset size must be at least 1");
  spec.validate();
  check_render_spec(spec);
  Dataset d;
  d.spec = spec;
  d.seed = seed;
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t record_seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    Rng rng(record_seed);
    const auto z = LatentFactor::from_index(rng.index(kLatentCount));
    d.samples.push_back(make_sample(z, record_seed, spec));
  }
  return d;
}

std::vector<std::uint8_t> serialize_dataset(const Dataset& d) {
  ByteWriter w;
  w.raw(kMagic);
  w.u32(kDatasetVersion);
  w.u64(d.samples.size());
  w.u32(static_cast<std::uint32_t>(d.spec.height));
  w.u32(static_cast<std::uint32_t>(d.spec.width));
  w.u32(static_cast<std::uint32_t>(d.spec.channels));
  w.u32(static_cast<std::uint32_t>(d.spec.patch));
  w.u32(d.vocab_size);
  w.u32(d.max_len);
  w.u64(d.seed);
  w.u64(fnv1a64(w.bytes()));
  const std::size_t pixels = d.spec.pixel_count();
  for (const auto& s : d.samples) {
    if (s.image.pixels.size() != pixels) {
      throw SpecError("sample image does not match the dataset spec");
    }
    w.u8(s.latent.shape);
    w.u8(s.latent.color);
    w.u8(s.latent.position);
    w.u32(static_cast<std::uint32_t>(s.caption.size()));
    for (auto id : s.caption) w.u32(id);
    for (double p : s.image.pixels) w.f64(p);
  }
  return w.take();
}

Dataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.raw(kMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) {
    throw FormatError("not a dataset file (bad magic)");
  }
  const auto version = r.u32();
  if (version != kDatasetVersion) {
    throw VersionError("dataset version " + std::to_string(version) + " is not supported (" +
                       std::to_string(kDatasetVersion) + " expected)");
  }
  Dataset d;
  const auto n = r.u64();
  d.spec.height = r.u32();
  d.spec.width = r.u32();
  d.spec.channels = r.u32();
  d.spec.patch = r.u32();
  d.vocab_size = r.u32();
  d.max_len = r.u32();
  d.seed = r.u64();
  const auto expected = fnv1a64(r.consumed());
  if (r.u64() != expected) throw FormatError("dataset header checksum mismatch");
  try {
    d.spec.validate();
  } catch (const SpecError& e) {
    throw FormatError(std::string("dataset header: ") + e.what());
  }
  const std::size_t pixels = d.spec.pixel_count();
  // Every record needs at least its fixed fields and pixels.
  const std::size_t min_record = 3 + 4 + 8 * pixels;
  if (n > r.remaining() / min_record) {
    throw TruncatedError("dataset declares " + std::to_string(n) + " records but holds " +
                         std::to_string(r.remaining()) + " bytes");
  }
  d.samples.resize(n);
  for (auto& s : d.samples) {
    s.latent.shape = r.u8();
    s.latent.color = r.u8();
    s.latent.position = r.u8();
    try {
      s.latent.validate();
    } catch (const ParameterError&) {
      throw FormatError("dataset record holds an invalid latent factor");
    }
    const auto len = r.u32();
    if (len > d.max_len) throw FormatError("caption longer than the declared max length");
    s.caption.resize(len);
    for (auto& id : s.caption) {
      id = r.u32();
      if (id >= d.vocab_size) throw FormatError("caption token outside the vocabulary");
    }
    s.image = Image{d.spec.height, d.spec.width, d.spec.channels, std::vector<double>(pixels)};
    for (auto& p : s.image.pixels) p = r.f64();
  }
  if (r.remaining() != 0) {
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after the last record");
  }
  return d;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  write_file(path, serialize_dataset(dataset));
}

Dataset load_dataset(const std::filesystem::path& path) {
  return deserialize_dataset(read_file(path));
}

std::vector<Image> dataset_images(const Dataset& dataset) {
  std::vector<Image> out;
  out.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) out.push_back(s.image);
  return out;
}

std::vector<TokenSequence> dataset_captions(const Dataset& dataset) {
  std::vector<TokenSequence> out;
  out.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) out.push_back(s.caption);
  return out;
}

std::vector<std::size_t> dataset_labels(const Dataset& dataset) {
  std::vector<std::size_t> out;
  out.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) out.push_back(s.latent.index());
  return out;
}

}  // namespace taca
