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

#include "taca/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "taca/errors.hpp"

namespace taca {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Strided = Eigen::OuterStride<>;
using ConstBlock = Eigen::Map<const RowMat, 0, Strided>;
using MutBlock = Eigen::Map<RowMat, 0, Strided>;

ConstMap view(const Node& n, std::size_t rows, std::size_t cols) {
  return ConstMap(n.value.data(), static_cast<Eigen::Index>(rows),
                  static_cast<Eigen::Index>(cols));
}

ConstMap grad_view(const Node& n, std::size_t rows, std::size_t cols) {
  return ConstMap(n.grad.data(), static_cast<Eigen::Index>(rows),
                  static_cast<Eigen::Index>(cols));
}

MutMap grad_target(Node& n, std::size_t rows, std::size_t cols) {
  return MutMap(n.ensure_grad().data(), static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

std::shared_ptr<Node> make_output(Shape shape) {
  auto t = Tensor::zeros(std::move(shape));
  return t.node();
}

bool needs_record(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Finishes an op: records `fn` on the active tape when any input requires a
// gradient, otherwise returns a plain constant.
template <typename Fn>
Tensor emit(std::shared_ptr<Node> out, std::initializer_list<const Tensor*> inputs,
            Fn&& fn) {
  out->produced_by_op = true;
  if (needs_record(inputs)) {
    out->requires_grad = true;
    std::vector<std::shared_ptr<Node>> in;
    in.reserve(inputs.size());
    for (const auto* t : inputs) in.push_back(t->node());
    Tape::active()->record(std::move(in), out, std::forward<Fn>(fn));
  }
  return Tensor::wrap(std::move(out));
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " needs a rank-2 tensor, got " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

void require_positive_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("temperature must be positive and finite, got " +
                         std::to_string(temperature));
  }
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "gelu") return Activation::kGelu;
  throw ParameterError("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation kind) {
  return kind == Activation::kRelu ? "relu" : "gelu";
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " +
                         shape_string(a.shape()) + " . " + shape_string(b.shape()));
  }
  auto out = make_output({m, n});
  MutMap(out->value.data(), m, n).noalias() = view(*a.node(), m, k) * view(*b.node(), k, n);
  Node* an = a.node().get();
  Node* bn = b.node().get();
  Node* on = out.get();
  return emit(out, {&a, &b}, [an, bn, on, m, k, n] {
    auto g = grad_view(*on, m, n);
    if (an->requires_grad) {
      grad_target(*an, m, k).noalias() += g * view(*bn, k, n).transpose();
    }
    if (bn->requires_grad) {
      grad_target(*bn, k, n).noalias() += view(*an, m, k).transpose() * g;
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ for " +
                         shape_string(a.shape()) + " . " +
                         shape_string(b.shape()) + "^T");
  }
  auto out = make_output({m, n});
  MutMap(out->value.data(), m, n).noalias() =
      view(*a.node(), m, k) * view(*b.node(), n, k).transpose();
  Node* an = a.node().get();
  Node* bn = b.node().get();
  Node* on = out.get();
  return emit(out, {&a, &b}, [an, bn, on, m, k, n] {
    auto g = grad_view(*on, m, n);
    if (an->requires_grad) {
      grad_target(*an, m, k).noalias() += g * view(*bn, n, k);
    }
    if (bn->requires_grad) {
      grad_target(*bn, n, k).noalias() += g.transpose() * view(*an, m, k);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const auto m = a.dim(0), n = a.dim(1);
  auto out = make_output({n, m});
  MutMap(out->value.data(), n, m) = view(*a.node(), m, n).transpose();
  Node* an = a.node().get();
  Node* on = out.get();
  return emit(out, {&a}, [an, on, m, n] {
    grad_target(*an, m, n) += grad_view(*on, n, m).transpose();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto out = make_output(a.shape());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
  Node* an = a.node().get();
  Node* bn = b.node().get();
  Node* on = out.get();
  return emit(out, {&a, &b}, [an, bn, on] {
    for (Node* in : {an, bn}) {
      if (!in->requires_grad) continue;
      auto g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto out = make_output(a.shape());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] - bv[i];
  Node* an = a.node().get();
  Node* bn = b.node().get();
  Node* on = out.get();
  return emit(out, {&a, &b}, [an, bn, on] {
    if (an->requires_grad) {
      auto g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      auto g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto out = make_output(a.shape());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
  Node* an = a.node().get();
  Node* bn = b.node().get();
  Node* on = out.get();
  return emit(out, {&a, &b}, [an, bn, on] {
    if (an->requires_grad) {
      auto g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * an->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  auto out = make_output(a.shape());
  const auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * factor;
  Node* an = a.node().get();
  Node* on = out.get();
  return emit(out, {&a}, [an, on, factor] {
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * factor;
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  const auto rows = a.rows(), cols = a.cols();
  if (bias.numel() != cols || bias.cols() != cols) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) +
                         " does not match last dimension of " +
                         shape_string(a.shape()));
  }
  auto out = make_output(a.shape());
  const auto av = a.values(), bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out->value[r * cols + c] = av[r * cols + c] + bv[c];
    }
  }
  Node* an = a.node().get();
  Node* bn = bias.node().get();
  Node* on = out.get();
  return emit(out, {&a, &bias}, [an, bn, on, rows, cols] {
    if (an->requires_grad) {
      auto g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      auto g = bn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) g[c] += on->grad[r * cols + c];
      }
    }
  });
}

Tensor add_tiled(const Tensor& a, const Tensor& pattern) {
  const auto cols = a.cols();
  const auto block = pattern.numel();
  if (pattern.cols() != cols || a.numel() % block != 0) {
    throw DimensionError("add_tiled: pattern " + shape_string(pattern.shape()) +
                         " does not tile " + shape_string(a.shape()));
  }
  auto out = make_output(a.shape());
  const auto av = a.values(), pv = pattern.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + pv[i % block];
  Node* an = a.node().get();
  Node* pn = pattern.node().get();
  Node* on = out.get();
  return emit(out, {&a, &pattern}, [an, pn, on, block] {
    if (an->requires_grad) {
      auto g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    }
    if (pn->requires_grad) {
      auto g = pn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) g[i % block] += on->grad[i];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) +
                         " as " + shape_string(shape));
  }
  auto out = make_output(std::move(shape));
  std::copy(a.values().begin(), a.values().end(), out->value.begin());
  Node* an = a.node().get();
  Node* on = out.get();
  return emit(out, {&a}, [an, on] {
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
  });
}

Tensor sum(const Tensor& a) {
  auto out = make_output({});
  double s = 0.0;
  for (double v : a.values()) s += v;
  out->value[0] = s;
  Node* an = a.node().get();
  Node* on = out.get();
  return emit(out, {&a}, [an, on] {
    auto g = an->ensure_grad();
    for (auto& x : g) x += on->grad[0];
  });
}

Tensor mean(const Tensor& a) {
  auto out = make_output({});
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double n = static_cast<double>(a.numel());
  out->value[0] = s / n;
  Node* an = a.node().get();
  Node* on = out.get();
  return emit(out, {&a}, [an, on, n] {
    auto g = an->ensure_grad();
    for (auto& x : g) x += on->grad[0] / n;
  });
}

Tensor softmax_rows(const Tensor& a, double temperature) {
  require_positive_temperature(temperature);
  const auto rows = a.rows(), cols = a.cols();
  auto out = make_output(a.shape());
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = av.data() + r * cols;
    double* o = out->value.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp((in[c] - mx) / temperature);
      z += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  Node* an = a.node().get();
  Node* on = out.get();
  return emit(out, {&a}, [an, on, rows, cols, temperature] {
    auto g = an->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = on->value.data() + r * cols;
      const double* gy = on->grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * gy[c];
      for (std::size_t c = 0; c < cols; ++c) {
        g[r * cols + c] += y[c] * (gy[c] - dot) / temperature;
      }
    }
  });
}

Tensor l2_normalize_rows(const Tensor& a) {
  const auto rows = a.rows(), cols = a.cols();
  auto out = make_output(a.shape());
  Buffer norms(rows);
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += av[r * cols + c] * av[r * cols + c];
    const double norm = std::sqrt(ss);
    if (!(norm >= kNormEpsilon)) {
      throw DegenerateVectorError("l2_normalize_rows: row " + std::to_string(r) +
                                  " has norm " + std::to_string(norm));
    }
    norms[r] = norm;
    for (std::size_t c = 0; c < cols; ++c) {
      out->value[r * cols + c] = av[r * cols + c] / norm;
    }
  }
  Node* an = a.node().get();
  Node* on = out.get();
  return emit(out, {&a}, [an, on, rows, cols, norms = std::move(norms)] {
    auto g = an->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = on->value.data() + r * cols;
      const double* gy = on->grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * gy[c];
      for (std::size_t c = 0; c < cols; ++c) {
        g[r * cols + c] += (gy[c] - y[c] * dot) / norms[r];
      }
    }
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
  const auto rows = a.rows(), cols = a.cols();
  if (a.rank() == 0 || cols == 0) {
    throw DimensionError("layer_norm needs a non-empty last dimension");
  }
  if (gain.numel() != cols || bias.numel() != cols) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) +
                         " / bias " + shape_string(bias.shape()) +
                         " do not match last dimension of " +
                         shape_string(a.shape()));
  }
  auto out = make_output(a.shape());
  Buffer normalized(a.numel());
  Buffer inv_std(rows);
  const auto av = a.values(), gv = gain.values(), bv = bias.values();
  const double n = static_cast<double>(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += x[c];
    mu /= n;
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (x[c] - mu) * (x[c] - mu);
    var /= n;
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    for (std::size_t c = 0; c < cols; ++c) {
      const double xh = (x[c] - mu) * inv_std[r];
      normalized[r * cols + c] = xh;
      out->value[r * cols + c] = gv[c] * xh + bv[c];
    }
  }
  Node* an = a.node().get();
  Node* gn = gain.node().get();
  Node* bn = bias.node().get();
  Node* on = out.get();
  return emit(out, {&a, &gain, &bias},
              [an, gn, bn, on, rows, cols, n, normalized = std::move(normalized),
               inv_std = std::move(inv_std)] {
                if (gn->requires_grad) {
                  auto g = gn->ensure_grad();
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                      g[c] += on->grad[r * cols + c] * normalized[r * cols + c];
                    }
                  }
                }
                if (bn->requires_grad) {
                  auto g = bn->ensure_grad();
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) g[c] += on->grad[r * cols + c];
                  }
                }
                if (an->requires_grad) {
                  auto g = an->ensure_grad();
                  Buffer dxh(cols);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                      dxh[c] = on->grad[r * cols + c] * gn->value[c];
                      s1 += dxh[c];
                      s2 += dxh[c] * normalized[r * cols + c];
                    }
                    for (std::size_t c = 0; c < cols; ++c) {
                      g[r * cols + c] += inv_std[r] / n *
                                         (n * dxh[c] - s1 - normalized[r * cols + c] * s2);
                    }
                  }
                }
              });
}

Tensor activation(const Tensor& a, Activation kind) {
  return kind == Activation::kRelu ? relu(a) : gelu(a);
}

Tensor relu(const Tensor& a) {
  auto out = make_output(a.shape());
  const auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = std::max(0.0, av[i]);
  Node* an = a.node().get();
  Node* on = out.get();
  return emit(out, {&a}, [an, on] {
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (an->value[i] > 0.0) g[i] += on->grad[i];
    }
  });
}

Tensor gelu(const Tensor& a) {
  auto out = make_output(a.shape());
  const auto av = a.values();
  const bool record = needs_record({&a});
  // The normal CDF is kept for the backward pass so erf runs once per entry.
  Buffer cdf(record ? av.size() : 0);
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double c = 0.5 * (1.0 + std::erf(av[i] * std::numbers::sqrt2 / 2.0));
    out->value[i] = av[i] * c;
    if (record) cdf[i] = c;
  }
  Node* an = a.node().get();
  Node* on = out.get();
  return emit(out, {&a}, [an, on, cdf = std::move(cdf)] {
    auto g = an->ensure_grad();
    const double norm = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = an->value[i];
      g[i] += on->grad[i] * (cdf[i] + x * norm * std::exp(-0.5 * x * x));
    }
  });
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> targets) {
  const auto rows = logits.rows(), cols = logits.cols();
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  }
  Buffer probs(logits.numel());
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  const auto lv = logits.values();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tg[r] >= cols) {
      throw DimensionError("cross_entropy_rows: target " + std::to_string(tg[r]) +
                           " out of range for " + std::to_string(cols) + " classes");
    }
    const double* x = lv.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      probs[r * cols + c] = std::exp(x[c] - mx);
      z += probs[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= z;
    total += std::log(z) + mx - x[tg[r]];
  }
  auto out = make_output({});
  out->value[0] = total / static_cast<double>(rows);
  Node* ln = logits.node().get();
  Node* on = out.get();
  return emit(out, {&logits},
              [ln, on, rows, cols, probs = std::move(probs), tg = std::move(tg)] {
                auto g = ln->ensure_grad();
                const double scale = on->grad[0] / static_cast<double>(rows);
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t c = 0; c < cols; ++c) {
                    const double onehot = c == tg[r] ? 1.0 : 0.0;
                    g[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                  }
                }
              });
}

Tensor select_rows(const Tensor& a, std::span<const std::size_t> indices) {
  const auto rows = a.rows(), cols = a.cols();
  if (indices.empty()) throw DimensionError("select_rows: empty index list");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  for (auto i : idx) {
    if (i >= rows) {
      throw DimensionError("select_rows: row " + std::to_string(i) +
                           " out of range for " + shape_string(a.shape()));
    }
  }
  auto out = make_output({idx.size(), cols});
  const auto av = a.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(av.data() + idx[r] * cols, cols, out->value.data() + r * cols);
  }
  Node* an = a.node().get();
  Node* on = out.get();
  return emit(out, {&a}, [an, on, cols, idx = std::move(idx)] {
    auto g = an->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t c = 0; c < cols; ++c) g[idx[r] * cols + c] += on->grad[r * cols + c];
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const auto cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " +
                           shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    rows += p.rows();
  }
  auto out = make_output({rows, cols});
  std::size_t offset = 0;
  bool record = false;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out->value.begin() + offset);
    offset += p.numel();
    record = record || p.requires_grad();
  }
  out->produced_by_op = true;
  if (record && Tape::active() != nullptr) {
    out->requires_grad = true;
    std::vector<std::shared_ptr<Node>> in;
    for (const auto& p : parts) in.push_back(p.node());
    std::vector<Node*> raw;
    for (const auto& n : in) raw.push_back(n.get());
    Node* on = out.get();
    Tape::active()->record(std::move(in), out, [raw = std::move(raw), on] {
      std::size_t off = 0;
      for (Node* n : raw) {
        if (n->requires_grad) {
          auto g = n->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[off + i];
        }
        off += n->value.size();
      }
    });
  }
  return Tensor::wrap(std::move(out));
}

Tensor prepend_rows(const Tensor& a, const Tensor& row, std::size_t groups) {
  const auto cols = a.cols();
  if (row.numel() != cols) {
    throw DimensionError("prepend_rows: row " + shape_string(row.shape()) +
                         " does not match " + shape_string(a.shape()));
  }
  if (groups == 0 || a.rows() % groups != 0) {
    throw DimensionError("prepend_rows: " + std::to_string(a.rows()) +
                         " rows do not split into " + std::to_string(groups) + " groups");
  }
  const auto t = a.rows() / groups;
  auto out = make_output({groups * (t + 1), cols});
  const auto av = a.values(), rv = row.values();
  for (std::size_t g = 0; g < groups; ++g) {
    double* dst = out->value.data() + g * (t + 1) * cols;
    std::copy(rv.begin(), rv.end(), dst);
    std::copy_n(av.data() + g * t * cols, t * cols, dst + cols);
  }
  Node* an = a.node().get();
  Node* rn = row.node().get();
  Node* on = out.get();
  return emit(out, {&a, &row}, [an, rn, on, groups, t, cols] {
    for (std::size_t g = 0; g < groups; ++g) {
      const double* src = on->grad.data() + g * (t + 1) * cols;
      if (rn->requires_grad) {
        auto gr = rn->ensure_grad();
        for (std::size_t c = 0; c < cols; ++c) gr[c] += src[c];
      }
      if (an->requires_grad) {
        auto ga = an->ensure_grad();
        for (std::size_t i = 0; i < t * cols; ++i) ga[g * t * cols + i] += src[cols + i];
      }
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t groups, std::size_t heads) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const auto rows = q.rows(), width = q.cols();
  if (groups == 0 || rows % groups != 0) {
    throw DimensionError("attention: " + std::to_string(rows) +
                         " rows do not split into " + std::to_string(groups) + " sequences");
  }
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  const auto t = static_cast<Eigen::Index>(rows / groups);
  const auto dh = static_cast<Eigen::Index>(width / heads);
  const auto w = static_cast<Eigen::Index>(width);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto out = make_output({rows, width});
  // Attention probabilities per (group, head), kept for the backward pass.
  Buffer probs(groups * heads * static_cast<std::size_t>(t * t));
  const double* qv = q.values().data();
  const double* kv = k.values().data();
  const double* vv = v.values().data();
  RowMat scores(t, t);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      const auto off = static_cast<Eigen::Index>(g) * t * w + static_cast<Eigen::Index>(h) * dh;
      ConstBlock qb(qv + off, t, dh, Strided(w));
      ConstBlock kb(kv + off, t, dh, Strided(w));
      ConstBlock vb(vv + off, t, dh, Strided(w));
      scores.noalias() = (qb * kb.transpose()) * inv_sqrt;
      MutMap p(probs.data() + (g * heads + h) * static_cast<std::size_t>(t * t), t, t);
      for (Eigen::Index r = 0; r < t; ++r) {
        const double mx = scores.row(r).maxCoeff();
        p.row(r) = (scores.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
      }
      MutBlock ob(out->value.data() + off, t, dh, Strided(w));
      ob.noalias() = p * vb;
    }
  }
  Node* qn = q.node().get();
  Node* kn = k.node().get();
  Node* vn = v.node().get();
  Node* on = out.get();
  return emit(out, {&q, &k, &v},
              [qn, kn, vn, on, groups, heads, t, dh, w, inv_sqrt,
               probs = std::move(probs)] {
                double* gq = qn->requires_grad ? qn->ensure_grad().data() : nullptr;
                double* gk = kn->requires_grad ? kn->ensure_grad().data() : nullptr;
                double* gv = vn->requires_grad ? vn->ensure_grad().data() : nullptr;
                RowMat dp(t, t), ds(t, t);
                for (std::size_t g = 0; g < groups; ++g) {
                  for (std::size_t h = 0; h < heads; ++h) {
                    const auto off = static_cast<Eigen::Index>(g) * t * w +
                                     static_cast<Eigen::Index>(h) * dh;
                    ConstMap p(probs.data() + (g * heads + h) * static_cast<std::size_t>(t * t),
                               t, t);
                    ConstBlock go(on->grad.data() + off, t, dh, Strided(w));
                    ConstBlock qb(qn->value.data() + off, t, dh, Strided(w));
                    ConstBlock kb(kn->value.data() + off, t, dh, Strided(w));
                    ConstBlock vb(vn->value.data() + off, t, dh, Strided(w));
                    if (gv) {
                      MutBlock(gv + off, t, dh, Strided(w)).noalias() += p.transpose() * go;
                    }
                    if (!gq && !gk) continue;
                    dp.noalias() = go * vb.transpose();
                    for (Eigen::Index r = 0; r < t; ++r) {
                      const double dot = dp.row(r).dot(p.row(r));
                      ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
                    }
                    ds *= inv_sqrt;
                    if (gq) MutBlock(gq + off, t, dh, Strided(w)).noalias() += ds * kb;
                    if (gk) {
                      MutBlock(gk + off, t, dh, Strided(w)).noalias() += ds.transpose() * qb;
                    }
                  }
                }
              });
}

}  // namespace taca
