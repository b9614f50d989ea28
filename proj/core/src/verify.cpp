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

#include "taca/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>

#include "taca/data.hpp"
#include "taca/encoder.hpp"
#include "taca/gradcheck.hpp"
#include "taca/losses.hpp"
#include "taca/ops.hpp"
#include "taca/peft.hpp"
#include "taca/rng.hpp"

namespace taca {

namespace {

constexpr double kKinkMargin = 1e-3;
constexpr int kMaxResamples = 1000;

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// sum(t * w) for fixed positive weights, so every output element matters.
Tensor weighted_sum(const Tensor& t) {
  Rng rng(99);
  return sum(mul(t, rng.uniform_tensor(t.shape(), 0.5, 1.5)));
}

struct Probe {
  Tensor point;
  ScalarProgram program;
};

// Builds a probe from a seeded generator; nullopt asks for a resample.
using ProbeFactory = std::function<std::optional<Probe>(Rng&)>;

CheckResult run_probe(const std::string& name, std::size_t points, const ProbeFactory& make) {
  double worst = 0.0;
  for (std::size_t p = 0; p < points; ++p) {
    Rng rng(derive_seed(p, name));
    std::optional<Probe> probe;
    for (int attempt = 0; attempt < kMaxResamples && !probe; ++attempt) probe = make(rng);
    if (!probe) return {name, false, "no valid sample point"};
    worst = std::max(worst, grad_check(probe->program, probe->point, kGradCheckStep));
  }
  return {name, worst < kGradCheckTolerance,
          "max relative error " + sci(worst) + " over " + std::to_string(points) + " points",
          worst};
}

bool preactivation_clear(const Tensor& x, const Tensor& w, const Tensor& b) {
  NoGradScope no_grad;
  return !near_kink(add_bias(matmul(x, w), b), kKinkMargin);
}

Tensor unit(const Tensor& x) { return l2_normalize_rows(x); }

// Unary program over a single random input.
ProbeFactory unary(Shape shape, std::function<Tensor(const Tensor&)> f,
                   double kink_margin = 0.0) {
  return [shape, f, kink_margin](Rng& rng) -> std::optional<Probe> {
    Tensor x = rng.normal_tensor(shape, 1.0);
    if (kink_margin > 0.0 && near_kink(x, kink_margin)) return std::nullopt;
    return Probe{x, [f](const Tensor& t) { return weighted_sum(f(t)); }};
  };
}

// Program in the first argument with a random fixed second argument.
ProbeFactory with_other(Shape shape, Shape other_shape,
                        std::function<Tensor(const Tensor&, const Tensor&)> f) {
  return [shape, other_shape, f](Rng& rng) -> std::optional<Probe> {
    Tensor x = rng.normal_tensor(shape, 1.0);
    Tensor y = rng.normal_tensor(other_shape, 1.0);
    return Probe{x, [f, y](const Tensor& t) { return weighted_sum(f(t, y)); }};
  };
}

// Loss probes: the free argument is normalized inside the program so finite
// differences stay on the unit sphere.
ProbeFactory loss_probe(std::function<Tensor(const Tensor&, const Tensor&, const Tensor&)> f) {
  return [f](Rng& rng) -> std::optional<Probe> {
    Tensor x = rng.normal_tensor({5, 4}, 1.0);
    Tensor b, c;
    {
      NoGradScope no_grad;
      b = unit(rng.normal_tensor({5, 4}, 1.0));
      c = unit(rng.normal_tensor({5, 4}, 1.0));
    }
    return Probe{x, [f, b, c](const Tensor& t) { return f(t, b, c); }};
  };
}

Adapter random_adapter(Rng& rng, std::size_t k, std::size_t bottleneck) {
  return Adapter{rng.normal_tensor({k, bottleneck}, 0.5), rng.normal_tensor({bottleneck}, 0.5),
                 rng.normal_tensor({bottleneck, k}, 0.5), rng.normal_tensor({k}, 0.5),
                 Activation::kRelu};
}

DimensionProjector random_projector(Rng& rng) {
  return DimensionProjector{rng.normal_tensor({6, 10}, 0.5), rng.normal_tensor({10}, 0.5),
                            rng.normal_tensor({10, 4}, 0.5), rng.normal_tensor({4}, 0.5),
                            Activation::kRelu};
}

LoRAModule random_lora(Rng& rng) {
  return LoRAModule{rng.normal_tensor({5, 4}, 1.0), rng.normal_tensor({5, 2}, 1.0),
                    rng.normal_tensor({2, 4}, 1.0), 2, 1.5};
}

enum class AdapterArg { kInput, kDown, kUp };

ProbeFactory adapter_probe(AdapterArg arg) {
  return [arg](Rng& rng) -> std::optional<Probe> {
    const Adapter base = random_adapter(rng, 5, 3);
    const Tensor x = rng.normal_tensor({4, 5}, 1.0);
    if (!preactivation_clear(x, base.w_down, base.b_down)) return std::nullopt;
    switch (arg) {
      case AdapterArg::kInput:
        return Probe{x, [base](const Tensor& t) { return weighted_sum(adapter_forward(base, t)); }};
      case AdapterArg::kDown:
        return Probe{base.w_down, [base, x](const Tensor& t) {
                       Adapter a = base;
                       a.w_down = t;
                       return weighted_sum(adapter_forward(a, x));
                     }};
      case AdapterArg::kUp:
        break;
    }
    return Probe{base.w_up, [base, x](const Tensor& t) {
                   Adapter a = base;
                   a.w_up = t;
                   return weighted_sum(adapter_forward(a, x));
                 }};
  };
}

enum class ProjectorArg { kInput, kFirst, kSecond };

ProbeFactory projector_probe(ProjectorArg arg) {
  return [arg](Rng& rng) -> std::optional<Probe> {
    const DimensionProjector base = random_projector(rng);
    const Tensor x = rng.normal_tensor({3, 6}, 1.0);
    if (!preactivation_clear(x, base.w1, base.b1)) return std::nullopt;
    switch (arg) {
      case ProjectorArg::kInput:
        return Probe{x,
                     [base](const Tensor& t) { return weighted_sum(projector_forward(base, t)); }};
      case ProjectorArg::kFirst:
        return Probe{base.w1, [base, x](const Tensor& t) {
                       DimensionProjector p = base;
                       p.w1 = t;
                       return weighted_sum(projector_forward(p, x));
                     }};
      case ProjectorArg::kSecond:
        break;
    }
    return Probe{base.w2, [base, x](const Tensor& t) {
                   DimensionProjector p = base;
                   p.w2 = t;
                   return weighted_sum(projector_forward(p, x));
                 }};
  };
}

enum class LoraArg { kInput, kA, kB };

ProbeFactory lora_probe(LoraArg arg) {
  return [arg](Rng& rng) -> std::optional<Probe> {
    const LoRAModule base = random_lora(rng);
    const Tensor x = rng.normal_tensor({3, 4}, 1.0);
    switch (arg) {
      case LoraArg::kInput:
        return Probe{x, [base](const Tensor& t) { return weighted_sum(lora_forward(base, t)); }};
      case LoraArg::kA:
        return Probe{base.a, [base, x](const Tensor& t) {
                       LoRAModule m = base;
                       m.a = t;
                       return weighted_sum(lora_forward(m, x));
                     }};
      case LoraArg::kB:
        break;
    }
    return Probe{base.b, [base, x](const Tensor& t) {
                   LoRAModule m = base;
                   m.b = t;
                   return weighted_sum(lora_forward(m, x));
                 }};
  };
}

ProbeFactory attention_probe(int which) {
  return [which](Rng& rng) -> std::optional<Probe> {
    std::vector<Tensor> qkv;
    for (int i = 0; i < 3; ++i) qkv.push_back(rng.normal_tensor({6, 4}, 1.0));
    const Tensor point = qkv[which];
    return Probe{point, [qkv, which](const Tensor& t) {
                   auto args = qkv;
                   args[which] = t;
                   return weighted_sum(attention(args[0], args[1], args[2], 2, 2));
                 }};
  };
}

std::vector<std::pair<std::string, ProbeFactory>> gradcheck_cases() {
  const std::vector<std::size_t> picks{2, 0, 2, 1};
  const std::vector<std::size_t> targets{1, 0, 3};
  return {
      {"matmul lhs", with_other({3, 4}, {4, 2}, [](auto& a, auto& b) { return matmul(a, b); })},
      {"matmul rhs", with_other({4, 2}, {3, 4}, [](auto& b, auto& a) { return matmul(a, b); })},
      {"matmul_nt lhs",
       with_other({3, 4}, {2, 4}, [](auto& a, auto& b) { return matmul_nt(a, b); })},
      {"matmul_nt rhs",
       with_other({2, 4}, {3, 4}, [](auto& b, auto& a) { return matmul_nt(a, b); })},
      {"transpose", unary({3, 4}, [](auto& a) { return transpose(a); })},
      {"add", with_other({3, 4}, {3, 4}, [](auto& a, auto& b) { return add(a, b); })},
      {"sub rhs", with_other({3, 4}, {3, 4}, [](auto& b, auto& a) { return sub(a, b); })},
      {"mul", with_other({3, 4}, {3, 4}, [](auto& a, auto& b) { return mul(a, b); })},
      {"mul square", unary({3, 4}, [](auto& a) { return mul(a, a); })},
      {"scale", unary({3, 4}, [](auto& a) { return scale(a, -1.7); })},
      {"add_bias input", with_other({3, 4}, {4}, [](auto& a, auto& b) { return add_bias(a, b); })},
      {"add_bias bias", with_other({4}, {3, 4}, [](auto& b, auto& a) { return add_bias(a, b); })},
      {"add_tiled input",
       with_other({6, 3}, {2, 3}, [](auto& a, auto& p) { return add_tiled(a, p); })},
      {"add_tiled pattern",
       with_other({2, 3}, {6, 3}, [](auto& p, auto& a) { return add_tiled(a, p); })},
      {"reshape", unary({3, 4}, [](auto& a) { return reshape(a, {2, 6}); })},
      {"sum", unary({3, 4}, [](auto& a) { return scale(sum(mul(a, a)), 0.5); })},
      {"mean", unary({3, 4}, [](auto& a) { return mean(mul(a, a)); })},
      {"softmax_rows", unary({3, 5}, [](auto& a) { return softmax_rows(a, 1.0); })},
      {"l2_normalize_rows", unary({3, 5}, [](auto& a) { return l2_normalize_rows(a); })},
      {"layer_norm input",
       [](Rng& rng) -> std::optional<Probe> {
         const Tensor g = rng.normal_tensor({5}, 1.0), b = rng.normal_tensor({5}, 1.0);
         return Probe{rng.normal_tensor({3, 5}, 1.0),
                      [g, b](const Tensor& t) { return weighted_sum(layer_norm(t, g, b)); }};
       }},
      {"layer_norm gain",
       [](Rng& rng) -> std::optional<Probe> {
         const Tensor x = rng.normal_tensor({3, 5}, 1.0), b = rng.normal_tensor({5}, 1.0);
         return Probe{rng.normal_tensor({5}, 1.0),
                      [x, b](const Tensor& t) { return weighted_sum(layer_norm(x, t, b)); }};
       }},
      {"layer_norm bias",
       [](Rng& rng) -> std::optional<Probe> {
         const Tensor x = rng.normal_tensor({3, 5}, 1.0), g = rng.normal_tensor({5}, 1.0);
         return Probe{rng.normal_tensor({5}, 1.0),
                      [x, g](const Tensor& t) { return weighted_sum(layer_norm(x, g, t)); }};
       }},
      {"relu", unary({3, 4}, [](auto& a) { return relu(a); }, kKinkMargin)},
      {"gelu", unary({3, 4}, [](auto& a) { return gelu(a); })},
      {"cross_entropy_rows",
       unary({3, 5}, [targets](auto& a) { return cross_entropy_rows(a, targets); })},
      {"select_rows", unary({3, 4}, [picks](auto& a) { return select_rows(a, picks); })},
      {"concat_rows", with_other({2, 3}, {3, 3}, [](auto& a, auto& b) {
         const std::vector<Tensor> parts{b, a, a};
         return concat_rows(parts);
       })},
      {"prepend_rows input",
       with_other({6, 3}, {3}, [](auto& a, auto& r) { return prepend_rows(a, r, 2); })},
      {"prepend_rows row",
       with_other({3}, {6, 3}, [](auto& r, auto& a) { return prepend_rows(a, r, 2); })},
      {"attention query", attention_probe(0)},
      {"attention key", attention_probe(1)},
      {"attention value", attention_probe(2)},
      {"adapter_forward input", adapter_probe(AdapterArg::kInput)},
      {"adapter_forward down", adapter_probe(AdapterArg::kDown)},
      {"adapter_forward up", adapter_probe(AdapterArg::kUp)},
      {"projector_forward input", projector_probe(ProjectorArg::kInput)},
      {"projector_forward first layer", projector_probe(ProjectorArg::kFirst)},
      {"projector_forward second layer", projector_probe(ProjectorArg::kSecond)},
      {"lora_forward input", lora_probe(LoraArg::kInput)},
      {"lora_forward a", lora_probe(LoraArg::kA)},
      {"lora_forward b", lora_probe(LoraArg::kB)},
      {"nce query",
       loss_probe([](auto& x, auto& b, auto&) { return nce(unit(x), b, 0.5); })},
      {"nce keys", loss_probe([](auto& x, auto& b, auto&) { return nce(b, unit(x), 0.5); })},
      {"clip_symmetric_loss",
       loss_probe([](auto& x, auto& b, auto&) { return clip_symmetric_loss(unit(x), b, 0.5); })},
      {"distill_loss", loss_probe([](auto& x, auto& b, auto&) { return distill_loss(x, b); })},
      {"cross_model_contrastive", loss_probe([](auto& x, auto& b, auto&) {
         return cross_model_contrastive(unit(x), b, 0.5);
       })},
      {"taca_total", loss_probe([](auto& x, auto& b, auto& c) {
         TacaLossConfig cfg;
         cfg.contrastive.temperature = 0.5;
         return taca_total(unit(x), b, c, cfg).total;
       })},
  };
}

CheckResult expect_close(const std::string& name, double got, double want, double tol) {
  const double err = std::abs(got - want);
  return {name, err <= tol, "got " + sci(got) + ", expected " + sci(want) + ", |diff| " + sci(err),
          err};
}

}  // namespace

std::vector<CheckResult> verify_gradcheck(std::size_t points) {
  std::vector<CheckResult> out;
  for (const auto& [name, factory] : gradcheck_cases()) {
    out.push_back(run_probe(name, points, factory));
  }
  return out;
}

std::vector<CheckResult> verify_params(std::size_t configs) {
  std::vector<CheckResult> out;
  std::size_t formula_ok = 0, exact_ok = 0, lora_ok = 0;
  std::string first_failure;
  for (std::size_t i = 0; i < configs; ++i) {
    Rng rng(derive_seed(i, "params"));
    VisualEncoderConfig enc;
    enc.layers = 1 + rng.index(4);
    enc.heads = std::size_t{1} << rng.index(3);
    enc.width = enc.heads * (2 + rng.index(7));
    enc.embed_dim = 2 + rng.index(31);
    const std::size_t old_dim = 2 + rng.index(31);

    TacaConfig cfg;
    cfg.bottleneck = 1 + rng.index(std::min<std::size_t>(32, enc.width - 1));
    cfg.rank = 1 + rng.index(std::min<std::size_t>(8, enc.width - 1));
    cfg.adapters_per_block = 1 + rng.index(2);
    cfg.projector_hidden = 1 + rng.index(64);
    cfg.inserted_layers.clear();
    for (std::size_t l = 1; l <= enc.layers; ++l) {
      if (rng.uniform() < 0.6) cfg.inserted_layers.push_back(l);
    }
    if (cfg.inserted_layers.empty()) cfg.inserted_layers.push_back(1 + rng.index(enc.layers));

    const std::size_t k = enc.width, layers = cfg.inserted_layers.size();
    const std::size_t dn = enc.embed_dim, dp = cfg.projector_hidden, d_o = old_dim;
    const std::size_t projector = dn * dp + dp * d_o;
    const auto encoder = init_visual_encoder(enc, derive_seed(i, "encoder"));

    for (PeftVariant variant : {PeftVariant::kAdapter, PeftVariant::kLora}) {
      cfg.variant = variant;
      const ParamCount count = count_trainable(cfg, enc, old_dim);
      const TacaAttachment att = attach_taca(encoder, cfg, old_dim, i);
      std::size_t enumerated = 0;
      for (const auto& [name, t] : att.named_tensors()) {
        if (t.trainable()) enumerated += t.numel();
      }
      if (variant == PeftVariant::kAdapter) {
        const std::size_t formula =
            cfg.adapters_per_block * 2 * layers * k * cfg.bottleneck + projector;
        const std::size_t biases =
            cfg.adapters_per_block * layers * (cfg.bottleneck + k) + dp + d_o;
        const bool f_ok = count.formula == formula;
        const bool e_ok = count.exact == enumerated && enumerated == formula + biases;
        formula_ok += f_ok;
        exact_ok += e_ok;
        if ((!f_ok || !e_ok) && first_failure.empty()) {
          first_failure = "config " + std::to_string(i) + ": formula " +
                          std::to_string(count.formula) + " vs " + std::to_string(formula) +
                          ", exact " + std::to_string(count.exact) + " vs enumerated " +
                          std::to_string(enumerated);
        }
      } else {
        // Query and value modules each hold a [k x r] and an [r x k] factor.
        const std::size_t formula = layers * 2 * 2 * k * cfg.rank + projector;
        lora_ok += count.formula == formula && count.exact == enumerated &&
                   enumerated == formula + dp + d_o;
      }
    }
  }
  const std::string of = " of " + std::to_string(configs);
  out.push_back({"adapter formula count", formula_ok == configs,
                 std::to_string(formula_ok) + of + (first_failure.empty() ? "" : "; " + first_failure)});
  out.push_back({"adapter exact count equals enumeration", exact_ok == configs,
                 std::to_string(exact_ok) + of});
  out.push_back({"lora counts", lora_ok == configs, std::to_string(lora_ok) + of});
  return out;
}

std::vector<CheckResult> verify_losses() {
  std::vector<CheckResult> out;
  const Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  const double aligned = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  out.push_back(expect_close("nce aligned orthonormal pair", nce(eye, eye, 1.0).item(), aligned,
                             1e-9));
  out.push_back(expect_close("clip symmetric aligned orthonormal pair",
                             clip_symmetric_loss(eye, eye, 1.0).item(), aligned, 1e-9));
  for (std::size_t b : {2u, 3u, 8u, 32u}) {
    std::vector<double> same;
    for (std::size_t i = 0; i < b; ++i) same.insert(same.end(), {0.6, 0.8, 0.0});
    const Tensor t = Tensor::from_values({b, 3}, same);
    out.push_back(expect_close("nce uniform similarity B=" + std::to_string(b),
                               nce(t, t, 0.07).item(), std::log(static_cast<double>(b)), 1e-9));
  }
  const double d = distill_loss(Tensor::from_values({1, 2}, {3, 4}), Tensor::zeros({1, 2})).item();
  out.push_back({"distill hand case", d == 12.5, "got " + sci(d) + ", expected 12.5"});

  double worst = 0.0;
  bool zero_ok = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(seed, "recompose"));
    NoGradScope no_grad;
    const Tensor a = unit(rng.normal_tensor({8, 6}, 1.0));
    const Tensor b = unit(rng.normal_tensor({8, 6}, 1.0));
    const Tensor c = unit(rng.normal_tensor({8, 6}, 1.0));
    TacaLossConfig cfg;
    const TacaLoss l = taca_total(a, b, c, cfg);
    worst = std::max(worst, std::abs(l.total.item() -
                                     (l.contrastive.item() + cfg.lambda * l.distill.item())));
    cfg.lambda = 0.0;
    const TacaLoss z = taca_total(a, b, c, cfg);
    zero_ok = zero_ok && z.total.item() == z.contrastive.item();
  }
  out.push_back({"taca_total recomposition", worst <= 1e-12,
                 "max |total - (contra + lambda distill)| " + sci(worst)});
  out.push_back({"taca_total without distillation", zero_ok, "total equals contra at lambda 0"});
  return out;
}

std::vector<CheckResult> verify_zero_init() {
  std::vector<CheckResult> out;
  VisualEncoderConfig enc;
  enc.layers = 4;
  enc.width = 64;
  enc.embed_dim = 32;
  const auto encoder = init_visual_encoder(enc, 11);
  const Dataset data = generate_dataset(4, 12);
  const auto images = dataset_images(data);
  std::vector<Tensor> plain;
  {
    NoGradScope no_grad;
    encode_images(encoder, images, nullptr, &plain);
  }
  auto check = [&](const std::string& name, const TacaConfig& cfg) {
    const TacaAttachment att = attach_taca(encoder, cfg, 16, 13);
    std::vector<Tensor> adapted;
    {
      NoGradScope no_grad;
      encode_images(encoder, images, &att, &adapted);
    }
    std::size_t equal = 0;
    for (std::size_t i = 0; i < plain.size() && i < adapted.size(); ++i) {
      equal += plain[i].bitwise_equal(adapted[i]);
    }
    out.push_back({name, adapted.size() == plain.size() && equal == plain.size(),
                   std::to_string(equal) + " of " + std::to_string(plain.size()) +
                       " block outputs bitwise equal"});
  };
  TacaConfig one;
  check("adapters after feed-forward", one);
  TacaConfig two;
  two.adapters_per_block = 2;
  check("adapters after attention and feed-forward", two);
  TacaConfig lora;
  lora.variant = PeftVariant::kLora;
  check("lora on query and value", lora);
  return out;
}

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const CheckResult& r) { return r.passed; });
}

}  // namespace taca
