#include <cmath>
#include <numeric>

#include "doctest.h"
#include "taca/encoder.hpp"
#include "taca/errors.hpp"
#include "taca/ops.hpp"
#include "taca/rng.hpp"

using namespace taca;

namespace {

Image random_image(const ImageSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  Image img{spec.height, spec.width, spec.channels, {}};
  img.pixels.resize(spec.pixel_count());
  for (auto& p : img.pixels) p = rng.uniform();
  return img;
}

TokenSequence random_caption(std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  TokenSequence t(len);
  for (auto& id : t) id = static_cast<std::uint32_t>(3 + rng.index(29));
  return t;
}

double diff_norm(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::pow(a.at(i) - b.at(i), 2);
  return std::sqrt(s);
}

double norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

// Independent count: walk the architecture tensor by tensor.
std::size_t count_by_walk(std::size_t embed_rows, std::size_t embed_cols,
                          std::size_t extra_tokens, std::size_t positions, std::size_t layers,
                          std::size_t k, std::size_t d) {
  std::size_t n = embed_rows * embed_cols + extra_tokens * k + positions * k;
  for (std::size_t l = 0; l < layers; ++l) {
    n += 2 * k;                // ln1
    n += 4 * (k * k + k);      // q, k, v, o
    n += 2 * k;                // ln2
    n += 4 * k * k + 4 * k;    // fc1
    n += k * 4 * k + k;        // fc2
  }
  return n + 2 * k + d * k;
}

}  // namespace

TEST_CASE("patchify counts and layout") {
  ImageSpec spec{4, 4, 1, 2};
  Image img{4, 4, 1, std::vector<double>(16)};
  std::iota(img.pixels.begin(), img.pixels.end(), 0.0);
  auto p = patchify(img, spec);
  CHECK(p.shape() == Shape{4, 4});
  // First patch is the top-left 2x2 block, pixels row-major.
  CHECK(p.at(0) == 0.0);
  CHECK(p.at(1) == 1.0);
  CHECK(p.at(2) == 4.0);
  CHECK(p.at(3) == 5.0);
  // Second patch is top-right.
  CHECK(p.at(4) == 2.0);

  ImageSpec unit{2, 2, 1, 1};
  Image abcd{2, 2, 1, {10, 20, 30, 40}};
  auto q = patchify(abcd, unit);
  CHECK(q.shape() == Shape{4, 1});
  for (std::size_t i = 0; i < 4; ++i) CHECK(q.at(i) == abcd.pixels[i]);

  ImageSpec rgb{2, 2, 3, 2};
  Image colour{2, 2, 3, std::vector<double>(12)};
  std::iota(colour.pixels.begin(), colour.pixels.end(), 0.0);
  auto c = patchify(colour, rgb);
  CHECK(c.shape() == Shape{1, 12});
  for (std::size_t i = 0; i < 12; ++i) CHECK(c.at(i) == static_cast<double>(i));
}

TEST_CASE("patchify rejects mismatched images") {
  ImageSpec bad{5, 4, 1, 2};
  CHECK_THROWS_AS(bad.validate(), SpecError);
  Image img{5, 4, 1, std::vector<double>(20)};
  CHECK_THROWS_AS(patchify(img, bad), SpecError);

  ImageSpec spec{4, 4, 1, 2};
  Image wrong{4, 4, 1, std::vector<double>(15)};
  CHECK_THROWS_AS(patchify(wrong, spec), SpecError);
  Image other{2, 8, 1, std::vector<double>(16)};
  CHECK_THROWS_AS(patchify(other, spec), SpecError);
}

TEST_CASE("config validation") {
  VisualEncoderConfig v;
  v.heads = 5;
  CHECK_THROWS_AS(v.validate(), ConfigError);
  v = VisualEncoderConfig{};
  v.layers = 0;
  CHECK_THROWS_AS(v.validate(), ConfigError);
  TextEncoderConfig t;
  t.sep_id = t.cls_id;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TextEncoderConfig{};
  t.cls_id = 32;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("encode_image shape, unit norm, determinism and sensitivity") {
  VisualEncoderConfig cfg;
  auto w = init_visual_encoder(cfg, 7);
  auto img = random_image(cfg.image, 11);
  auto a = encode_image(w, img);
  auto b = encode_image(w, img);
  CHECK(a.shape() == Shape{cfg.embed_dim});
  CHECK(a.bitwise_equal(b));
  CHECK(std::abs(norm(a) - 1.0) < 1e-12);

  auto flipped = img;
  flipped.pixels[37] = 1.0 - flipped.pixels[37];
  CHECK(diff_norm(a, encode_image(w, flipped)) > 0.0);

  Image wrong{8, 8, 1, std::vector<double>(64)};
  CHECK_THROWS_AS(encode_image(w, wrong), SpecError);
}

TEST_CASE("batched image encoding matches single encoding") {
  VisualEncoderConfig cfg;
  cfg.layers = 1;
  auto w = init_visual_encoder(cfg, 3);
  std::vector<Image> imgs{random_image(cfg.image, 1), random_image(cfg.image, 2),
                          random_image(cfg.image, 3)};
  auto batch = encode_images(w, imgs);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    auto one = encode_image(w, imgs[i]);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
      CHECK(batch.at(i * cfg.embed_dim + j) == doctest::Approx(one.at(j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("encode_text shape, order sensitivity and errors") {
  TextEncoderConfig cfg;
  auto w = init_text_encoder(cfg, 5);
  auto cap = random_caption(6, 21);
  auto a = encode_text(w, cap);
  CHECK(a.shape() == Shape{cfg.embed_dim});
  CHECK(std::abs(norm(a) - 1.0) < 1e-12);
  CHECK(a.bitwise_equal(encode_text(w, cap)));

  auto swapped = cap;
  std::swap(swapped[1], swapped[3]);
  REQUIRE(swapped != cap);
  CHECK(diff_norm(a, encode_text(w, swapped)) > 0.0);

  CHECK_THROWS_AS(encode_text(w, {3, 4, static_cast<std::uint32_t>(cfg.vocab_size)}),
                  VocabError);
  CHECK_THROWS_AS(encode_text(w, random_caption(cfg.max_len - 1, 2)), LengthError);
  CHECK_NOTHROW(encode_text(w, random_caption(cfg.max_len - 2, 2)));

  auto framed = frame_tokens(cfg, {5, 6});
  CHECK(framed == TokenSequence{cfg.cls_id, 5, 6, cfg.sep_id});
}

TEST_CASE("batched text encoding with mixed lengths keeps order") {
  TextEncoderConfig cfg;
  auto w = init_text_encoder(cfg, 9);
  std::vector<TokenSequence> caps{random_caption(4, 1), random_caption(2, 2),
                                  random_caption(4, 3), random_caption(7, 4)};
  auto batch = encode_texts(w, caps);
  CHECK(batch.shape() == Shape{4, cfg.embed_dim});
  for (std::size_t i = 0; i < caps.size(); ++i) {
    auto one = encode_text(w, caps[i]);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
      CHECK(batch.at(i * cfg.embed_dim + j) == doctest::Approx(one.at(j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("init is seeded") {
  VisualEncoderConfig cfg;
  auto a = init_visual_encoder(cfg, 1).named_tensors();
  auto b = init_visual_encoder(cfg, 1).named_tensors();
  auto c = init_visual_encoder(cfg, 2).named_tensors();
  REQUIRE(a.size() == b.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.bitwise_equal(b[i].second));
    any_diff = any_diff || !a[i].second.bitwise_equal(c[i].second);
  }
  CHECK(any_diff);
}

TEST_CASE("parameter counts match an independent walk") {
  for (std::size_t layers : {1u, 2u, 4u}) {
    for (std::size_t k : {8u, 32u, 64u}) {
      VisualEncoderConfig v;
      v.layers = layers;
      v.width = k;
      v.embed_dim = 12;
      const auto& s = v.image;
      const std::size_t expected = count_by_walk(k, s.patch_dim(), 1, s.patch_count() + 1,
                                                 layers, k, 12);
      CHECK(visual_parameter_count(v) == expected);
      CHECK(enumerate_parameters(init_visual_encoder(v, 0).named_tensors()) == expected);

      TextEncoderConfig t;
      t.layers = layers;
      t.width = k;
      t.embed_dim = 12;
      const std::size_t text_expected =
          count_by_walk(t.vocab_size, k, 0, t.max_len, layers, k, 12);
      CHECK(text_parameter_count(t) == text_expected);
      CHECK(enumerate_parameters(init_text_encoder(t, 0).named_tensors()) == text_expected);
    }
  }
}

TEST_CASE("all weights are finite and LN gains start at one") {
  auto w = init_visual_encoder(VisualEncoderConfig{}, 4);
  for (const auto& [name, t] : w.named_tensors()) {
    for (double v : t.values()) REQUIRE(std::isfinite(v));
  }
  for (double g : w.blocks[0].ln1_gain.values()) CHECK(g == 1.0);
  for (double b : w.blocks[0].bq.values()) CHECK(b == 0.0);
}

TEST_CASE("encoding is pure") {
  VisualEncoderConfig cfg;
  auto w = init_visual_encoder(cfg, 8);
  auto before = w.named_tensors();
  std::vector<std::vector<double>> snapshot;
  for (const auto& [n, t] : before) snapshot.emplace_back(t.values().begin(), t.values().end());
  for (int i = 0; i < 3; ++i) encode_image(w, random_image(cfg.image, i));
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(std::equal(snapshot[i].begin(), snapshot[i].end(), before[i].second.values().begin()));
  }
}

TEST_CASE("contrastive loss reaches every trainable parameter") {
  VisualEncoderConfig vc;
  TextEncoderConfig tc;
  auto vw = init_visual_encoder(vc, 1);
  auto tw = init_text_encoder(tc, 2);
  set_trainable(vw.named_tensors(), true);
  set_trainable(tw.named_tensors(), true);
  std::vector<Image> imgs;
  std::vector<TokenSequence> caps;
  for (std::size_t i = 0; i < 4; ++i) {
    imgs.push_back(random_image(vc.image, 100 + i));
    caps.push_back(random_caption(3 + i, 200 + i));
  }
  TapeScope scope;
  auto logits = scale(matmul_nt(encode_images(vw, imgs), encode_texts(tw, caps)), 1.0 / 0.07);
  std::vector<std::size_t> targets{0, 1, 2, 3};
  backward(cross_entropy_rows(logits, targets));

  auto check_all = [](const NamedTensors& named) {
    for (const auto& [name, t] : named) {
      INFO(name);
      REQUIRE(t.has_grad());
      double mag = 0.0;
      for (double g : t.grad()) mag += std::abs(g);
      CHECK(mag > 0.0);
    }
  };
  auto visual = vw.named_tensors();
  check_all(visual);
  // Rows of token embeddings for unused ids legitimately get zero gradient.
  auto text = tw.named_tensors();
  text.erase(text.begin());
  check_all(text);
}

TEST_CASE("named round trip rebuilds identical weights") {
  VisualEncoderConfig cfg;
  auto w = init_visual_encoder(cfg, 12);
  NamedTensors prefixed;
  for (const auto& [n, t] : w.named_tensors()) prefixed.emplace_back("visual." + n, t.clone());
  auto r = visual_from_named(cfg, prefixed, "visual.");
  auto img = random_image(cfg.image, 3);
  CHECK(encode_image(w, img).bitwise_equal(encode_image(r, img)));

  prefixed.pop_back();
  CHECK_THROWS_AS(visual_from_named(cfg, prefixed, "visual."), FormatError);
}
