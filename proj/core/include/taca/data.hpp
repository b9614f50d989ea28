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


#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "taca/encoder.hpp"

// Procedural paired images and captions driven by a small set of shared
// latent factors.
namespace taca {

inline constexpr std::size_t kAttributeLevels = 4;
inline constexpr std::size_t kLatentCount = 64;

// Caption vocabulary layout. Ids 0..2 are padding, [CLS] and [SEP].
inline constexpr std::uint32_t kShapeTokenBase = 3;
inline constexpr std::uint32_t kColorTokenBase = 7;
inline constexpr std::uint32_t kPositionTokenBase = 11;
inline constexpr std::uint32_t kDistractorTokenBase = 15;
inline constexpr std::uint32_t kDistractorTokenCount = 17;
inline constexpr std::size_t kCaptionLength = 4;

enum class Glyph : std::uint8_t { kSquare = 0, kCross = 1, kDiagonal = 2, kRing = 3 };

struct LatentFactor {
  std::uint8_t shape = 0;
  std::uint8_t color = 0;
  std::uint8_t position = 0;  // quadrant, row-major

  // Dense id in [0, 64).
  std::size_t index() const;
  static LatentFactor from_index(std::size_t index);
  void validate() const;

  bool operator==(const LatentFactor&) const = default;
};

struct PairedSample {
  Image image;
  TokenSequence caption;
  LatentFactor latent;

  bool operator==(const PairedSample&) const = default;
};

struct Dataset {
  ImageSpec spec;
  std::uint32_t vocab_size = 32;
  std::uint32_t max_len = 12;
  std::uint64_t seed = 0;
  std::vector<PairedSample> samples;

  bool operator==(const Dataset&) const = default;
};

// Glyph at intensity (color + 1) / 4 in quadrant `position`, plus uniform
// noise in [0, 0.05], clipped to [0, 1]. Needs even height and width >= 4.
Image render_image(const LatentFactor& z, std::uint64_t noise_seed,
                   const ImageSpec& spec = {});
// Shape, color and position tokens in that order with one distractor token
// inserted at a random position.
TokenSequence render_caption(const LatentFactor& z, std::uint64_t noise_seed);
// Inverse of the attribute part of render_caption; throws FormatError when
// the caption does not hold exactly one token per attribute.
LatentFactor latent_from_caption(const TokenSequence& caption);

PairedSample make_sample(const LatentFactor& z, std::uint64_t noise_seed,
                         const ImageSpec& spec = {});
// Latents uniform over the 64 factors; record i depends only on (seed, i).
Dataset generate_dataset(std::size_t n, std::uint64_t seed, const ImageSpec& spec = {});

inline constexpr std::uint32_t kDatasetVersion = 1;

std::vector<std::uint8_t> serialize_dataset(const Dataset& dataset);
// FormatError on bad magic, checksum or content; VersionError on an unknown
// version; TruncatedError when the data ends early.
Dataset deserialize_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Column views used by the trainers.
std::vector<Image> dataset_images(const Dataset& dataset);
std::vector<TokenSequence> dataset_captions(const Dataset& dataset);
std::vector<std::size_t> dataset_labels(const Dataset& dataset);

}  // namespace taca
