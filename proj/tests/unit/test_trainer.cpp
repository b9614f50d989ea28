#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "taca/data.hpp"
#include "taca/errors.hpp"
#include "taca/losses.hpp"
#include "taca/ops.hpp"
#include "taca/rng.hpp"
#include "taca/trainer.hpp"

using namespace taca;

namespace {

VisualEncoderConfig tiny_visual(std::size_t layers = 1, std::size_t width = 16,
                                std::size_t dim = 8) {
  VisualEncoderConfig c;
  c.layers = layers;
  c.width = width;
  c.heads = 2;
  c.embed_dim = dim;
  return c;
}

TextEncoderConfig tiny_text(std::size_t dim = 8) {
  TextEncoderConfig c;
  c.layers = 1;
  c.width = 16;
  c.heads = 2;
  c.embed_dim = dim;
  return c;
}

TrainConfig quick(std::size_t steps, std::uint64_t seed = 0) {
  TrainConfig c;
  c.steps = steps;
  c.batch_size = 8;
  c.seed = seed;
  return c;
}

const Dataset& small_data() {
  static const Dataset d = generate_dataset(64, 5);
  return d;
}

// Model with a 2-layer, 8-dim new encoder; shared by the TaCA tests.
struct Models {
  ClipModel old_model;
  ClipModel new_model;
};

const Models& models() {
  static const Models m{pretrain_clip(tiny_visual(), tiny_text(), small_data(), quick(5, 1)),
                        pretrain_clip(tiny_visual(2, 16, 12), tiny_text(12), small_data(),
                                      quick(5, 2))};
  return m;
}

std::string snapshot(const ClipModel& m) {
  return tensor_digest(m.visual.named_tensors()) + tensor_digest(m.text.named_tensors());
}

}  // namespace

TEST_CASE("adamw hand examples") {
  AdamWConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.0;
  Tensor w = Tensor::from_values({1}, {1.0}, true);
  AdamW opt({{"w", w}}, cfg);
  {
    TapeScope scope;
    backward(sum(w));
  }
  CHECK(w.grad()[0] == 1.0);
  opt.step();
  CHECK(std::abs(w.item() - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15);
  CHECK(std::abs(w.item() - 0.9) < 1e-8);
  CHECK(opt.step_count() == 1);

  Tensor z = Tensor::from_values({3}, {1.0, -2.0, 3.0}, true);
  AdamW still({{"z", z}}, cfg);
  {
    TapeScope scope;
    backward(scale(sum(z), 0.0));
  }
  still.step();
  CHECK(z.at(0) == 1.0);
  CHECK(z.at(1) == -2.0);

  cfg.weight_decay = 0.5;
  Tensor d = Tensor::from_values({2}, {2.0, -4.0}, true);
  AdamW decay({{"d", d}}, cfg);
  {
    TapeScope scope;
    backward(scale(sum(d), 0.0));
  }
  decay.step();
  CHECK(d.at(0) == 2.0 * (1.0 - 0.1 * 0.5));
  CHECK(d.at(1) == -4.0 * (1.0 - 0.1 * 0.5));
}

TEST_CASE("adamw matches a reference over several steps") {
  AdamWConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0.1;
  Rng rng(3);
  Tensor w = rng.normal_tensor({5}, 1.0, true);
  std::vector<double> ref(w.values().begin(), w.values().end()), m(5, 0.0), v(5, 0.0);
  AdamW opt({{"w", w}}, cfg);
  for (int step = 1; step <= 6; ++step) {
    // Loss sum(w^3) has gradient 3 w^2.
    std::vector<double> g(5);
    for (int i = 0; i < 5; ++i) g[i] = 3.0 * ref[i] * ref[i];
    {
      TapeScope scope;
      backward(sum(mul(mul(w, w), w)));
    }
    opt.step();
    opt.zero_grad();
    for (int i = 0; i < 5; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1.0 - std::pow(0.9, step));
      const double vh = v[i] / (1.0 - std::pow(0.999, step));
      ref[i] = ref[i] * (1.0 - 0.01 * 0.1) - 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    for (int i = 0; i < 5; ++i) CHECK(std::abs(w.at(i) - ref[i]) < 1e-14);
  }
}

TEST_CASE("adamw contracts") {
  Tensor w = Tensor::from_values({1}, {1.0}, true);
  AdamW opt({{"w", w}}, AdamWConfig{});
  CHECK_THROWS_AS(opt.step(), ContractError);
  CHECK(opt.step_count() == 0);
  CHECK_THROWS_AS(AdamW({{"f", Tensor::zeros({1})}}, AdamWConfig{}), ContractError);
  CHECK_THROWS_AS(AdamW({{"w", w}, {"w", w}}, AdamWConfig{}), ContractError);
  AdamWConfig bad;
  bad.beta1 = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("batch sampler covers each epoch once and drops the remainder") {
  BatchSampler s(10, 3, 4);
  std::multiset<std::size_t> seen;
  for (int b = 0; b < 3; ++b) {
    for (auto i : s.next()) seen.insert(i);
  }
  CHECK(seen.size() == 9);
  CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 9);
  CHECK(s.epoch() == 0);
  s.next();
  CHECK(s.epoch() == 1);

  BatchSampler a(50, 8, 1), b(50, 8, 1);
  for (int i = 0; i < 20; ++i) CHECK(a.next() == b.next());
  CHECK_THROWS_AS(BatchSampler(4, 5, 0), ConfigError);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(pretrain_clip(tiny_visual(), tiny_text(), small_data(), c), ConfigError);
  c = TrainConfig{};
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(pretrain_clip(tiny_visual(), tiny_text(12), small_data(), quick(1)),
                  ConfigError);
}

TEST_CASE("clip pretraining reduces the loss on a fixed batch") {
  const auto& data = small_data();
  auto cfg = quick(200);
  cfg.batch_size = 8;
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<Image> images;
  std::vector<TokenSequence> captions;
  for (auto i : idx) {
    images.push_back(data.samples[i].image);
    captions.push_back(data.samples[i].caption);
  }
  auto loss_of = [&](const ClipModel& m) {
    NoGradScope ng;
    return clip_symmetric_loss(encode_images(m.visual, images), encode_texts(m.text, captions),
                               m.temperature)
        .item();
  };
  auto untrained = cfg;
  untrained.steps = 1;
  untrained.optimizer.learning_rate = 1e-12;
  const double before = loss_of(pretrain_clip(tiny_visual(), tiny_text(), data, untrained));
  std::vector<ClipStepLog> log;
  auto trained = pretrain_clip(tiny_visual(), tiny_text(), data, cfg, &log);
  CHECK(log.size() == 200);
  CHECK(loss_of(trained) < before);
  CHECK(log.back().loss < log.front().loss);
}

TEST_CASE("pretraining is deterministic") {
  auto a = clip_checkpoint(pretrain_clip(tiny_visual(), tiny_text(), small_data(), quick(3, 9)));
  auto b = clip_checkpoint(pretrain_clip(tiny_visual(), tiny_text(), small_data(), quick(3, 9)));
  auto c = clip_checkpoint(pretrain_clip(tiny_visual(), tiny_text(), small_data(), quick(3, 8)));
  CHECK(checkpoints_equal(a, b));
  CHECK_FALSE(checkpoints_equal(a, c));
}

TEST_CASE("taca training freezes every backbone and logs recomposed losses") {
  const auto& m = models();
  const std::string old_before = snapshot(m.old_model);
  const std::string new_before = tensor_digest(m.new_model.visual.named_tensors());
  TacaConfig taca;
  taca.bottleneck = 4;
  taca.projector_hidden = 16;
  taca.inserted_layers = {1, 2};
  auto cfg = quick(30);
  std::vector<TacaStepLog> log;
  auto att = train_taca(m.old_model, m.new_model.visual, taca, small_data(), cfg, &log);
  CHECK(snapshot(m.old_model) == old_before);
  CHECK(tensor_digest(m.new_model.visual.named_tensors()) == new_before);
  REQUIRE(log.size() == 30);
  for (const auto& row : log) {
    CHECK(std::abs(row.total - (row.contrastive + 2.0 * row.distill)) <= 1e-12);
  }
  CHECK(log.back().total < log.front().total);

  cfg.lambda = 0.0;
  std::vector<TacaStepLog> zero;
  train_taca(m.old_model, m.new_model.visual, taca, small_data(), cfg, &zero);
  for (const auto& row : zero) {
    CHECK(row.distill > 0.0);
    CHECK(row.total == row.contrastive);
  }
}

TEST_CASE("trainable set during taca training is exactly the attachment") {
  const auto& m = models();
  Rng rng(77);
  for (int trial = 0; trial < 6; ++trial) {
    TacaConfig taca;
    taca.variant = trial % 3 == 2 ? PeftVariant::kLora : PeftVariant::kAdapter;
    taca.bottleneck = 1 + rng.index(15);
    taca.rank = 1 + rng.index(15);
    taca.adapters_per_block = 1 + rng.index(2);
    taca.projector_hidden = 4 + rng.index(12);
    taca.inserted_layers = trial % 2 == 0 ? std::vector<std::size_t>{2}
                                          : std::vector<std::size_t>{1, 2};
    // Attach fresh and inspect the flags the optimizer will see.
    auto att = attach_taca(m.new_model.visual, taca, m.old_model.visual.config.embed_dim, 0);
    std::size_t trainable = 0;
    for (const auto& [n, t] : att.named_tensors()) {
      CHECK(t.trainable());
      trainable += t.numel();
    }
    for (const auto& [n, t] : m.new_model.visual.named_tensors()) CHECK_FALSE(t.trainable());
    CHECK(trainable ==
          count_trainable(taca, m.new_model.visual.config, m.old_model.visual.config.embed_dim)
              .exact);
    const std::string before = tensor_digest(m.new_model.visual.named_tensors());
    train_taca(m.old_model, m.new_model.visual, taca, small_data(), quick(2, trial));
    CHECK(tensor_digest(m.new_model.visual.named_tensors()) == before);
  }
}

TEST_CASE("taca training is deterministic") {
  const auto& m = models();
  TacaConfig taca;
  taca.bottleneck = 4;
  taca.inserted_layers = {2};
  auto a = train_taca(m.old_model, m.new_model.visual, taca, small_data(), quick(5, 3));
  auto b = train_taca(m.old_model, m.new_model.visual, taca, small_data(), quick(5, 3));
  CHECK(checkpoints_equal(taca_checkpoint(a, 8), taca_checkpoint(b, 8)));
}

TEST_CASE("checkpoint round trips") {
  const auto& m = models();
  auto c = clip_checkpoint(m.old_model, R"({"role":"old"})");
  auto path = std::filesystem::temp_directory_path() / "taca_test_ckpt.tack";
  save_checkpoint(c, path);
  auto back = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(checkpoints_equal(c, back));
  CHECK(back.metadata.find("\"role\":\"old\"") != std::string::npos);
  auto model = clip_from_checkpoint(back);
  CHECK(checkpoints_equal(clip_checkpoint(model, R"({"role":"old"})"), c));

  TacaConfig taca;
  taca.bottleneck = 4;
  taca.inserted_layers = {2};
  auto att = attach_taca(m.new_model.visual, taca, 8, 1);
  auto tc = taca_checkpoint(att, 8);
  auto restored = taca_from_checkpoint(deserialize_checkpoint(serialize_checkpoint(tc)),
                                       m.new_model.visual);
  CHECK(checkpoints_equal(taca_checkpoint(restored, 8), tc));
  CHECK(taca_old_dim(tc) == 8);
  // An encoder with another embedding dimension cannot host the attachment.
  CHECK_THROWS_AS(taca_from_checkpoint(tc, m.old_model.visual), ConfigError);
  CHECK_THROWS_AS(clip_from_checkpoint(tc), FormatError);
}

TEST_CASE("corrupt checkpoints are rejected") {
  auto c = clip_checkpoint(models().old_model);
  auto bytes = serialize_checkpoint(c);

  CHECK_THROWS_AS(deserialize_checkpoint(serialize_dataset(small_data())), FormatError);
  auto v = bytes;
  v[4] = 9;
  CHECK_THROWS_AS(deserialize_checkpoint(v), VersionError);
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + cut);
    CHECK_THROWS_AS(deserialize_checkpoint(part), LengthError);
  }
  auto extra = bytes;
  extra.push_back(1);
  CHECK_THROWS_AS(deserialize_checkpoint(extra), FormatError);

  Checkpoint dup{"{}", {{"a", Tensor::zeros({1})}, {"a", Tensor::zeros({2})}}};
  CHECK_THROWS_AS(serialize_checkpoint(dup), ContractError);
  Checkpoint bad_meta{"not json", {}};
  CHECK_THROWS_AS(deserialize_checkpoint(serialize_checkpoint(bad_meta)), FormatError);
}
