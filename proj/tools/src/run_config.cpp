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

#include "taca_cli/run_config.hpp"

#include <cstdio>
#include <set>

#include "json.hpp"
#include "taca/binary_io.hpp"
#include "taca/errors.hpp"
#include "taca/losses.hpp"
#include "taca/ops.hpp"
#include "taca/rng.hpp"

namespace taca::cli {

namespace {

using nlohmann::json;

// Reads typed keys from one JSON object and rejects the ones nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }

  void size(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void u64(const char* key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void real(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void boolean(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "true or false");
      out = v->get<bool>();
    }
  }
  void text(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  template <typename T>
  void list(const char* key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "an array of non-negative integers");
      std::vector<T> values;
      for (const auto& item : *v) {
        if (!item.is_number_unsigned()) fail(key, "an array of non-negative integers");
        values.push_back(item.get<T>());
      }
      out = std::move(values);
    }
  }
  // Nested object, or nullptr when absent.
  const json* child(const char* key) { return find(key); }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + path_ + "." + key + "'");
    }
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const char* key, const char* expected) const {
    throw ConfigError(path_ + "." + key + " must be " + expected);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_encoder(Section& s, VisualEncoderConfig& c, std::size_t& pretrain_steps) {
  s.size("layers", c.layers);
  s.size("width", c.width);
  s.size("heads", c.heads);
  s.size("embed_dim", c.embed_dim);
  s.size("pretrain_steps", pretrain_steps);
  s.finish();
}

json encoder_json(const VisualEncoderConfig& c, std::size_t pretrain_steps) {
  return {{"layers", c.layers},
          {"width", c.width},
          {"heads", c.heads},
          {"embed_dim", c.embed_dim},
          {"pretrain_steps", pretrain_steps}};
}

template <typename Fn>
void with_section(Section& root, const char* key, Fn fn) {
  if (const json* j = root.child(key)) {
    Section s(*j, key);
    fn(s);
    s.finish();
  }
}

}  // namespace

Role parse_role(std::string_view name) {
  if (name == "old") return Role::kOld;
  if (name == "new") return Role::kNew;
  throw ConfigError("role must be 'old' or 'new', got '" + std::string(name) + "'");
}

std::string_view role_name(Role role) { return role == Role::kOld ? "old" : "new"; }

RunConfig::RunConfig() {
  new_encoder.layers = 4;
  new_encoder.width = 64;
  new_encoder.embed_dim = 32;
}

VisualEncoderConfig RunConfig::visual(Role role) const {
  VisualEncoderConfig c = role == Role::kOld ? old_encoder : new_encoder;
  c.image = image_spec;
  return c;
}

TextEncoderConfig RunConfig::text(Role role) const {
  TextEncoderConfig c = text_encoder;
  c.embed_dim = visual(role).embed_dim;
  return c;
}

TrainConfig RunConfig::pretrain(Role role) const {
  TrainConfig t = taca_training();
  t.steps = role == Role::kOld ? old_pretrain_steps : new_pretrain_steps;
  t.seed = derive_seed(seed, role_name(role));
  return t;
}

TrainConfig RunConfig::taca_training() const {
  TrainConfig t;
  t.optimizer = optimizer;
  t.batch_size = batch_size;
  t.steps = steps;
  t.seed = seed;
  t.lambda = lambda;
  t.temperature = temperature;
  t.symmetric_contrastive = symmetric;
  return t;
}

void RunConfig::validate() const {
  for (Role role : {Role::kOld, Role::kNew}) {
    visual(role).validate();
    text(role).validate();
    TrainConfig t = pretrain(role);
    if (t.steps < 1) {
      throw ConfigError(std::string(role_name(role)) + "_encoder.pretrain_steps must be positive");
    }
  }
  taca.validate(new_encoder.layers, new_encoder.width);
  taca_training().validate();
  TacaLossConfig loss;
  loss.lambda = lambda;
  loss.contrastive.temperature = temperature;
  loss.validate();
  if (data_n < 1) throw ConfigError("data.n must be positive");
  eval.validate();
}

std::string to_json(const RunConfig& c) {
  json eval_seeds = c.eval.seeds;
  const json j = {
      {"image_spec",
       {{"height", c.image_spec.height},
        {"width", c.image_spec.width},
        {"channels", c.image_spec.channels},
        {"patch", c.image_spec.patch}}},
      {"old_encoder", encoder_json(c.old_encoder, c.old_pretrain_steps)},
      {"new_encoder", encoder_json(c.new_encoder, c.new_pretrain_steps)},
      {"text_encoder",
       {{"layers", c.text_encoder.layers},
        {"width", c.text_encoder.width},
        {"heads", c.text_encoder.heads},
        {"vocab_size", c.text_encoder.vocab_size},
        {"max_len", c.text_encoder.max_len}}},
      {"taca",
       {{"variant", std::string(variant_name(c.taca.variant))},
        {"bottleneck", c.taca.bottleneck},
        {"rank", c.taca.rank},
        {"lora_alpha", c.taca.lora_alpha},
        {"inserted_layers", c.taca.inserted_layers},
        {"adapters_per_block", c.taca.adapters_per_block},
        {"projector_hidden", c.taca.projector_hidden},
        {"activation", std::string(activation_name(c.taca.activation))}}},
      {"loss", {{"lambda", c.lambda}, {"temperature", c.temperature}, {"symmetric", c.symmetric}}},
      {"train",
       {{"learning_rate", c.optimizer.learning_rate},
        {"batch_size", c.batch_size},
        {"steps", c.steps},
        {"seed", c.seed},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay}}},
      {"data", {{"n", c.data_n}, {"seed", c.data_seed}}},
      {"eval",
       {{"task", std::string(task_name(c.eval.task))},
        {"k", c.eval.k},
        {"seeds", eval_seeds},
        {"head",
         {{"steps", c.eval.head.steps},
          {"learning_rate", c.eval.head.learning_rate},
          {"weight_decay", c.eval.head.weight_decay}}}}}};
  return j.dump();
}

RunConfig parse_run_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section root(j, "config");
  with_section(root, "image_spec", [&](Section& s) {
    s.size("height", c.image_spec.height);
    s.size("width", c.image_spec.width);
    s.size("channels", c.image_spec.channels);
    s.size("patch", c.image_spec.patch);
  });
  if (const json* e = root.child("old_encoder")) {
    Section s(*e, "old_encoder");
    read_encoder(s, c.old_encoder, c.old_pretrain_steps);
  }
  if (const json* e = root.child("new_encoder")) {
    Section s(*e, "new_encoder");
    read_encoder(s, c.new_encoder, c.new_pretrain_steps);
  }
  with_section(root, "text_encoder", [&](Section& s) {
    s.size("layers", c.text_encoder.layers);
    s.size("width", c.text_encoder.width);
    s.size("heads", c.text_encoder.heads);
    s.size("vocab_size", c.text_encoder.vocab_size);
    s.size("max_len", c.text_encoder.max_len);
  });
  with_section(root, "taca", [&](Section& s) {
    std::string variant(variant_name(c.taca.variant));
    std::string act(activation_name(c.taca.activation));
    s.text("variant", variant);
    s.size("bottleneck", c.taca.bottleneck);
    s.size("rank", c.taca.rank);
    s.real("lora_alpha", c.taca.lora_alpha);
    s.list("inserted_layers", c.taca.inserted_layers);
    s.size("adapters_per_block", c.taca.adapters_per_block);
    s.size("projector_hidden", c.taca.projector_hidden);
    s.text("activation", act);
    try {
      c.taca.variant = parse_variant(variant);
      c.taca.activation = parse_activation(act);
    } catch (const Error& e) {
      throw ConfigError(std::string("taca: ") + e.what());
    }
  });
  with_section(root, "loss", [&](Section& s) {
    s.real("lambda", c.lambda);
    s.real("temperature", c.temperature);
    s.boolean("symmetric", c.symmetric);
  });
  with_section(root, "train", [&](Section& s) {
    s.real("learning_rate", c.optimizer.learning_rate);
    s.size("batch_size", c.batch_size);
    s.size("steps", c.steps);
    s.u64("seed", c.seed);
    s.real("beta1", c.optimizer.beta1);
    s.real("beta2", c.optimizer.beta2);
    s.real("eps", c.optimizer.eps);
    s.real("weight_decay", c.optimizer.weight_decay);
  });
  with_section(root, "data", [&](Section& s) {
    s.size("n", c.data_n);
    s.u64("seed", c.data_seed);
  });
  with_section(root, "eval", [&](Section& s) {
    std::string task(task_name(c.eval.task));
    s.text("task", task);
    c.eval.task = parse_task(task);
    s.size("k", c.eval.k);
    s.list("seeds", c.eval.seeds);
    if (const json* h = s.child("head")) {
      Section head(*h, "eval.head");
      head.size("steps", c.eval.head.steps);
      head.real("learning_rate", c.eval.head.learning_rate);
      head.real("weight_decay", c.eval.head.weight_decay);
      head.finish();
    }
  });
  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_run_config(std::string_view(reinterpret_cast<const char*>(bytes.data()),
                                           bytes.size()));
}

std::string config_digest(const RunConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(to_json(config))));
  return buf;
}

}  // namespace taca::cli
