#include <cmath>

#include "doctest.h"
#include "taca/errors.hpp"
#include "taca/ops.hpp"
#include "taca/rng.hpp"
#include "taca/tensor.hpp"
#include "test_support.hpp"

using namespace taca;

TEST_CASE("tensor construction enforces shape invariants") {
  auto t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 6.0);
  CHECK_THROWS_AS(Tensor::from_values({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), DimensionError);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
  CHECK(Tensor::zeros({3}).id() != Tensor::zeros({3}).id());
}

TEST_CASE("backward of x^2 at 3 is 6") {
  auto x = Tensor::from_values({1}, {3.0}, true);
  TapeScope scope;
  auto loss = sum(mul(x, x));
  backward(loss);
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("loss independent of x leaves a zero or absent gradient") {
  auto x = Tensor::from_values({2}, {1.0, 2.0}, true);
  auto y = Tensor::from_values({2}, {5.0, 7.0}, true);
  TapeScope scope;
  auto unused = scale(x, 2.0);
  auto loss = sum(mul(y, y));
  backward(loss);
  if (x.has_grad()) {
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
  }
  CHECK(y.grad()[1] == 14.0);
}

TEST_CASE("frozen tensors never receive gradient storage") {
  auto frozen = Tensor::from_values({2}, {1.0, 2.0}, false);
  auto w = Tensor::from_values({2}, {3.0, 4.0}, true);
  TapeScope scope;
  backward(sum(mul(frozen, w)));
  CHECK_FALSE(frozen.has_grad());
  CHECK(w.grad()[0] == 1.0);
  CHECK(w.grad()[1] == 2.0);
}

TEST_CASE("backward rejects non-scalar losses and foreign tensors") {
  auto x = Tensor::from_values({2}, {1.0, 2.0}, true);
  TapeScope scope;
  auto y = scale(x, 2.0);
  CHECK_THROWS_AS(backward(y), ContractError);
  auto other = Tensor::scalar(1.0);
  CHECK_THROWS_AS(backward(other), ContractError);
}

TEST_CASE("no active tape means no recording") {
  auto x = Tensor::from_values({2}, {1.0, 2.0}, true);
  auto y = sum(mul(x, x));
  CHECK_FALSE(y.requires_grad());
  CHECK_THROWS_AS(backward(y), ContractError);
  TapeScope scope;
  {
    NoGradScope off;
    auto z = sum(mul(x, x));
    CHECK_FALSE(z.requires_grad());
  }
  CHECK(scope.tape().size() == 0);
}

TEST_CASE("tape is topologically ordered and each record is visited once") {
  Rng rng(3);
  auto a = rng.normal_tensor({3, 4}, 1.0, true);
  auto b = rng.normal_tensor({4, 2}, 1.0, true);
  TapeScope scope;
  auto h = gelu(matmul(a, b));
  auto loss = sum(mul(h, h));
  const auto& records = scope.tape().records();
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (const auto& in : records[i].inputs) {
      if (!in->produced_by_op) continue;
      bool earlier = false;
      for (std::size_t j = 0; j < i; ++j) earlier |= records[j].output == in;
      CHECK(earlier);
    }
  }
  backward(loss);
  CHECK(scope.tape().last_visit_count() == records.size());
}

TEST_CASE("gradient of a sum of losses equals the sum of separate backward passes") {
  Rng rng(11);
  auto x = rng.normal_tensor({4, 3}, 1.0, true);
  auto w = rng.normal_tensor({3, 3}, 1.0, true);
  auto build = [&](double s) { return sum(gelu(scale(matmul(x, w), s))); };

  std::vector<double> separate_x, separate_w;
  {
    TapeScope scope;
    auto l1 = build(1.0);
    auto l2 = build(-0.5);
    backward(l1);
    backward(l2);
    separate_x.assign(x.grad().begin(), x.grad().end());
    separate_w.assign(w.grad().begin(), w.grad().end());
  }
  x.zero_grad();
  w.zero_grad();
  {
    TapeScope scope;
    backward(add(build(1.0), build(-0.5)));
  }
  for (std::size_t i = 0; i < separate_x.size(); ++i) {
    CHECK(std::abs(separate_x[i] - x.grad()[i]) < 1e-12);
  }
  for (std::size_t i = 0; i < separate_w.size(); ++i) {
    CHECK(std::abs(separate_w[i] - w.grad()[i]) < 1e-12);
  }
}

TEST_CASE("identical programs and seeds give bitwise identical values and grads") {
  auto run = [] {
    Rng rng(42);
    auto x = rng.normal_tensor({5, 8}, 1.0, true);
    auto g = rng.normal_tensor({8}, 1.0, true);
    auto b = rng.normal_tensor({8}, 1.0, true);
    TapeScope scope;
    auto y = softmax_rows(layer_norm(x, g, b), 0.7);
    auto loss = testing::weighted_sum(y);
    backward(loss);
    return std::make_tuple(y.detach(), x.clone(), std::vector<double>(x.grad().begin(), x.grad().end()));
  };
  auto [y1, x1, g1] = run();
  auto [y2, x2, g2] = run();
  CHECK(y1.bitwise_equal(y2));
  CHECK(x1.bitwise_equal(x2));
  CHECK(g1 == g2);
}

TEST_CASE("set_trainable is restricted to leaves") {
  auto x = Tensor::from_values({2}, {1.0, 2.0}, true);
  TapeScope scope;
  auto y = scale(x, 3.0);
  CHECK_THROWS_AS(y.set_trainable(false), ContractError);
}
