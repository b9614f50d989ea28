#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "taca/errors.hpp"
#include "taca/gradcheck.hpp"
#include "taca/losses.hpp"
#include "taca/ops.hpp"
#include "taca/rng.hpp"
#include "test_support.hpp"

using namespace taca;
using taca::testing::random_unit_rows;

namespace {

constexpr double kGradTol = 1e-6;
constexpr double kStep = 1e-5;
// -log(e / (e + 1)), evaluated at 30 digits.
constexpr double kTwoByTwo = 0.313261687518222834;

// Plain-loop InfoNCE used as the oracle.
double reference_nce(const Tensor& q, const Tensor& k, double tau) {
  const std::size_t b = q.rows(), d = q.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> s(b);
    for (std::size_t j = 0; j < b; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q.at(i, c) * k.at(j, c);
      s[j] = dot / tau;
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double v : s) z += std::exp(v - mx);
    total += std::log(z) + mx - s[i];
  }
  return total / static_cast<double>(b);
}

Tensor eye2() { return Tensor::from_values({2, 2}, {1, 0, 0, 1}); }

}  // namespace

TEST_CASE("nce closed forms") {
  Rng rng(1);
  auto one = random_unit_rows(rng, 1, 5);
  CHECK(nce(one, random_unit_rows(rng, 1, 5), 0.07).item() == 0.0);
  CHECK(std::abs(nce(eye2(), eye2(), 1.0).item() - kTwoByTwo) < 1e-15);

  for (std::size_t b : {2u, 3u, 7u, 16u}) {
    auto row = random_unit_rows(rng, 1, 4);
    std::vector<double> same;
    for (std::size_t i = 0; i < b; ++i) same.insert(same.end(), row.values().begin(), row.values().end());
    auto t = Tensor::from_values({b, 4}, same);
    CHECK(std::abs(nce(t, t, 0.07).item() - std::log(static_cast<double>(b))) < 1e-12);
  }
}

TEST_CASE("nce matches the reference and respects its bounds") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const std::size_t b = 1 + rng.index(12);
    const double tau = 0.05 + rng.uniform();
    auto q = random_unit_rows(rng, b, 6);
    auto k = random_unit_rows(rng, b, 6);
    const double v = nce(q, k, tau).item();
    CHECK(std::abs(v - reference_nce(q, k, tau)) < 1e-12);
    CHECK(v >= 0.0);
    auto sims = matmul_nt(q, k);
    const auto [lo, hi] = std::minmax_element(sims.values().begin(), sims.values().end());
    CHECK(v <= std::log(static_cast<double>(b)) + (*hi - *lo) / tau + 1e-12);
  }
}

TEST_CASE("nce contract errors") {
  Rng rng(2);
  auto q = random_unit_rows(rng, 3, 4);
  auto off = Tensor::from_values({3, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1.01, 0});
  CHECK_THROWS_AS(nce(q, off, 0.1), ContractError);
  CHECK_THROWS_AS(nce(off, q, 0.1), ContractError);
  CHECK_THROWS_AS(nce(q, random_unit_rows(rng, 2, 4), 0.1), ContractError);
  CHECK_THROWS_AS(nce(q, q, 0.0), ParameterError);
  // Within tolerance is accepted.
  auto near = Tensor::from_values({1, 2}, {1.0 + 5e-7, 0.0});
  CHECK_NOTHROW(nce(near, near, 0.1));
}

TEST_CASE("clip symmetric loss") {
  CHECK(std::abs(clip_symmetric_loss(eye2(), eye2(), 1.0).item() - kTwoByTwo) < 1e-15);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 40);
    auto a = random_unit_rows(rng, 5, 6);
    auto b = random_unit_rows(rng, 5, 6);
    CHECK(clip_symmetric_loss(a, b, 0.1).item() == clip_symmetric_loss(b, a, 0.1).item());
    const double expect = 0.5 * (reference_nce(a, b, 0.1) + reference_nce(b, a, 0.1));
    CHECK(std::abs(clip_symmetric_loss(a, b, 0.1).item() - expect) < 1e-12);
  }
}

TEST_CASE("distillation loss") {
  Rng rng(3);
  auto a = rng.normal_tensor({4, 3}, 1.0);
  auto b = rng.normal_tensor({4, 3}, 1.0);
  CHECK(distill_loss(a, a).item() == 0.0);
  CHECK(distill_loss(Tensor::from_values({1, 2}, {3, 4}), Tensor::zeros({1, 2})).item() == 12.5);
  CHECK(distill_loss(a, b).item() == distill_loss(b, a).item());
  CHECK(distill_loss(a, b).item() >= 0.0);
  CHECK_THROWS_AS(distill_loss(a, rng.normal_tensor({4, 2}, 1.0)), ContractError);
}

TEST_CASE("cross-model contrastive is single-direction nce") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 70);
    auto v = random_unit_rows(rng, 6, 5);
    auto t = random_unit_rows(rng, 6, 5);
    CHECK(cross_model_contrastive(v, t, 0.07).item() == nce(v, t, 0.07).item());
    CHECK(std::abs(cross_model_contrastive(v, t, 0.07).item() - reference_nce(v, t, 0.07)) <
          1e-12);
    CHECK(cross_model_contrastive(v, t, 0.07, true).item() ==
          clip_symmetric_loss(v, t, 0.07).item());
  }
  Rng rng(5);
  CHECK(cross_model_contrastive(random_unit_rows(rng, 1, 3), random_unit_rows(rng, 1, 3), 0.07)
            .item() == 0.0);
}

TEST_CASE("combined loss recomposes") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 90);
    auto nv = random_unit_rows(rng, 8, 4);
    auto ot = random_unit_rows(rng, 8, 4);
    auto ov = random_unit_rows(rng, 8, 4);
    TacaLossConfig cfg;
    auto l = taca_total(nv, ot, ov, cfg);
    CHECK(cfg.lambda == 2.0);
    CHECK(std::abs(l.total.item() - (l.contrastive.item() + 2.0 * l.distill.item())) < 1e-12);
    CHECK(std::abs(l.contrastive.item() - reference_nce(nv, ot, 0.07)) < 1e-12);
    cfg.lambda = 0.0;
    auto z = taca_total(nv, ot, ov, cfg);
    CHECK(z.total.item() == z.contrastive.item());
  }
  Rng rng(6);
  auto v = random_unit_rows(rng, 1, 4);
  CHECK(taca_total(v, random_unit_rows(rng, 1, 4), v, TacaLossConfig{}).total.item() == 0.0);

  TacaLossConfig bad;
  bad.lambda = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.lambda = 1.0;
  bad.contrastive.temperature = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("loss gradients") {
  // Programs normalize their inputs so finite-difference probes stay on the
  // unit sphere required by the contracts.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 120);
    const Tensor a = rng.normal_tensor({5, 4}, 1.0);
    const Tensor b = random_unit_rows(rng, 5, 4);
    const Tensor c = random_unit_rows(rng, 5, 4);
    CHECK(grad_check([&](const Tensor& x) { return nce(l2_normalize_rows(x), b, 0.2); }, a,
                     kStep) < kGradTol);
    CHECK(grad_check([&](const Tensor& x) { return nce(b, l2_normalize_rows(x), 0.2); }, a,
                     kStep) < kGradTol);
    CHECK(grad_check(
              [&](const Tensor& x) { return clip_symmetric_loss(l2_normalize_rows(x), b, 0.2); },
              a, kStep) < kGradTol);
    CHECK(grad_check(
              [&](const Tensor& x) { return clip_symmetric_loss(b, l2_normalize_rows(x), 0.2); },
              a, kStep) < kGradTol);
    CHECK(grad_check([&](const Tensor& x) { return distill_loss(x, b); }, a, kStep) < kGradTol);
    TacaLossConfig cfg;
    cfg.contrastive.temperature = 0.2;
    CHECK(grad_check([&](const Tensor& x) {
            return taca_total(l2_normalize_rows(x), b, c, cfg).total;
          }, a, kStep) < kGradTol);
  }
}
