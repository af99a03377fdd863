#include "kgedit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>

#include "kgedit/error.hpp"

namespace kgedit::ad {

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Tensor Var::grad() const {
  if (node_->grad.empty()) return Tensor(node_->value.shape(), 0.0);
  return node_->grad;
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

namespace {

using NodePtr = std::shared_ptr<Node>;

Var make_node(const char* op, Tensor value, std::vector<NodePtr> parents,
              std::function<void(Node&)> backward_fn) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const NodePtr& p) { return p->requires_grad; });
  if (any) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward_fn);
  }
  return Var(std::move(node));
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a 2-D tensor, got " + to_string(t.shape()));
  }
}

// C[n x m] += A[n x k] * B[k x m]. Each output row depends only on the matching
// row of A, so a query's result is independent of what else shares its batch.
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k x m] += A^T * D where A is [n x k] and D is [n x m].
void gemm_tn(const double* a, const double* d, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    const double* drow = d + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * drow[j];
    }
  }
}

std::vector<double> transposed(const Tensor& t) {
  const std::size_t r = t.rows(), c = t.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t[i * c + j];
  }
  return out;
}

enum class Broadcast { same, single, suffix };

Broadcast classify(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::same;
  if (element_count(b) == 1) return Broadcast::single;
  if (b.size() < a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) {
    return Broadcast::suffix;
  }
  throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(b) + " onto " +
                       to_string(a));
}

template <typename Fwd, typename GradA, typename GradB>
Var binary(const char* op, const Var& a, const Var& b, Fwd fwd, GradA grad_a, GradB grad_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast mode = classify(av.shape(), bv.shape(), op);
  const std::size_t n = av.size();
  const std::size_t bn = bv.size();
  auto b_index = [mode, bn](std::size_t i) -> std::size_t {
    switch (mode) {
      case Broadcast::same:
        return i;
      case Broadcast::single:
        return 0;
      case Broadcast::suffix:
        return i % bn;
    }
    return i;
  };
  Tensor out(av.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[b_index(i)]);
  NodePtr pa = a.node(), pb = b.node();
  return make_node(op, std::move(out), {pa, pb},
                   [pa, pb, n, b_index, grad_a, grad_b](Node& self) {
                     const Tensor& g = self.grad;
                     const Tensor& x = pa->value;
                     const Tensor& y = pb->value;
                     if (pa->requires_grad) {
                       Tensor& ga = pa->grad_buffer();
                       for (std::size_t i = 0; i < n; ++i) {
                         ga[i] += grad_a(g[i], x[i], y[b_index(i)]);
                       }
                     }
                     if (pb->requires_grad) {
                       Tensor& gb = pb->grad_buffer();
                       for (std::size_t i = 0; i < n; ++i) {
                         gb[b_index(i)] += grad_b(g[i], x[i], y[b_index(i)]);
                       }
                     }
                   });
}

// Unary op whose derivative is expressed through input x and output y.
template <typename Fwd, typename Deriv>
Var unary(const char* op, const Var& x, Fwd fwd, Deriv deriv) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  NodePtr px = x.node();
  return make_node(op, std::move(out), {px}, [px, deriv](Node& self) {
    Tensor& gx = px->grad_buffer();
    const Tensor& xs = px->value;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      gx[i] += self.grad[i] * deriv(xs[i], self.value[i]);
    }
  });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------

void backward(const Var& loss) {
  if (!loss) throw ContractError("backward() on an empty Var");
  if (loss.value().size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; parents are visited in declaration order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are per-pass; only leaves accumulate across calls.
  for (Node* n : order) {
    if (n->backward) n->grad = Tensor();
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  const std::size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(av.shape()) + " x " +
                         to_string(bv.shape()));
  }
  Tensor out({n, m}, 0.0);
  gemm_nn(av.data(), bv.data(), out.data(), n, k, m);
  NodePtr pa = a.node(), pb = b.node();
  return make_node("matmul", std::move(out), {pa, pb}, [pa, pb, n, k, m](Node& self) {
    if (pa->requires_grad) {
      const std::vector<double> bt = transposed(pb->value);
      gemm_nn(self.grad.data(), bt.data(), pa->grad_buffer().data(), n, m, k);
    }
    if (pb->requires_grad) {
      gemm_tn(pa->value.data(), self.grad.data(), pb->grad_buffer().data(), n, k, m);
    }
  });
}

Var transpose(const Var& a) {
  const Tensor& av = a.value();
  require_rank2(av, "transpose");
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out({c, r}, transposed(av));
  NodePtr pa = a.node();
  return make_node("transpose", std::move(out), {pa}, [pa, r, c](Node& self) {
    Tensor& ga = pa->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  if (element_count(shape) != a.value().size()) {
    throw DimensionError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  Tensor out = a.value().reshaped(std::move(shape));
  NodePtr pa = a.node();
  return make_node("reshape", std::move(out), {pa}, [pa](Node& self) {
    Tensor& ga = pa->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Var sigmoid(const Var& x) {
  return unary(
      "sigmoid", x, [](double v) { return stable_sigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Var relu(const Var& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var scale(const Var& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Var elementwise(Elementwise op, std::span<const Var> args) {
  const bool is_binary = op == Elementwise::add || op == Elementwise::sub || op == Elementwise::mul;
  const std::size_t want = is_binary ? 2 : 1;
  if (args.size() != want) {
    throw ContractError("elementwise: expected " + std::to_string(want) + " argument(s), got " +
                        std::to_string(args.size()));
  }
  switch (op) {
    case Elementwise::add:
      return add(args[0], args[1]);
    case Elementwise::sub:
      return sub(args[0], args[1]);
    case Elementwise::mul:
      return mul(args[0], args[1]);
    case Elementwise::sigmoid:
      return sigmoid(args[0]);
    case Elementwise::tanh:
      return tanh(args[0]);
    case Elementwise::relu:
      return relu(args[0]);
  }
  throw ContractError("elementwise: unknown op");
}

// ---------------------------------------------------------------------------

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  NodePtr px = x.node();
  return make_node("sum", Tensor::scalar(total), {px}, [px](Node& self) {
    Tensor& gx = px->grad_buffer();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var softmax(const Var& x, std::size_t axis) {
  const Tensor& xv = x.value();
  const std::size_t len = xv.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);

  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xv[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, xv[base + l * inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(xv[base + l * inner] - mx);
        out[base + l * inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= total;
    }
  }
  NodePtr px = x.node();
  return make_node("softmax", std::move(out), {px}, [px, outer, inner, len](Node& self) {
    Tensor& gx = px->grad_buffer();
    const Tensor& y = self.value;
    const Tensor& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < len; ++l) dot += y[base + l * inner] * g[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t i = base + l * inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

namespace {

// Row-wise log-sum-exp over the last axis.
std::vector<double> row_lse(const Tensor& t) {
  const std::size_t rows = t.rows(), cols = t.cols();
  std::vector<double> lse(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = t.data() + r * cols;
    double mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(row[c] - mx);
    lse[r] = mx + std::log(total);
  }
  return lse;
}

}  // namespace

Var log_softmax(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  const std::vector<double> lse = row_lse(xv);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] - lse[r];
  }
  NodePtr px = x.node();
  return make_node("log_softmax", std::move(out), {px}, [px, rows, cols](Node& self) {
    Tensor& gx = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gsum += self.grad[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        gx[i] += self.grad[i] - std::exp(self.value[i]) * gsum;
      }
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const std::size_t> targets) {
  const Tensor& z = logits.value();
  if (z.rank() > 2) throw DimensionError("cross_entropy: logits must be 1-D or 2-D");
  const std::size_t rows = z.rows(), cols = z.cols();
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  for (auto t : targets) {
    if (t >= cols) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(cols) + ")");
    }
  }
  const std::vector<double> lse = row_lse(z);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) total += lse[r] - z[r * cols + targets[r]];
  const double loss = std::max(0.0, total / static_cast<double>(rows));
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  NodePtr pz = logits.node();
  return make_node("cross_entropy", Tensor::scalar(loss), {pz},
                   [pz, lse, tg, rows, cols](Node& self) {
                     Tensor& gz = pz->grad_buffer();
                     const double g = self.grad[0] / static_cast<double>(rows);
                     const Tensor& zv = pz->value;
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t c = 0; c < cols; ++c) {
                         const std::size_t i = r * cols + c;
                         const double p = std::exp(zv[i] - lse[r]);
                         gz[i] += g * (p - (c == tg[r] ? 1.0 : 0.0));
                       }
                     }
                   });
}

Var binary_cross_entropy(const Var& logits, std::span<const double> labels) {
  const Tensor& z = logits.value();
  if (z.size() != labels.size()) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(z.size()) + " logits");
  }
  const std::size_t n = z.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = z[i];
    total += std::max(v, 0.0) - v * labels[i] + std::log1p(std::exp(-std::abs(v)));
  }
  std::vector<double> y(labels.begin(), labels.end());
  NodePtr pz = logits.node();
  return make_node("binary_cross_entropy", Tensor::scalar(total / static_cast<double>(n)), {pz},
                   [pz, y, n](Node& self) {
                     Tensor& gz = pz->grad_buffer();
                     const double g = self.grad[0] / static_cast<double>(n);
                     for (std::size_t i = 0; i < n; ++i) {
                       gz[i] += g * (stable_sigmoid(pz->value[i]) - y[i]);
                     }
                   });
}

Var kl_divergence(const Var& logits, const Tensor& reference_log_probs) {
  const Tensor& z = logits.value();
  if (z.shape() != reference_log_probs.shape()) {
    throw DimensionError("kl_divergence: logits " + to_string(z.shape()) + " vs reference " +
                         to_string(reference_log_probs.shape()));
  }
  const std::size_t rows = z.rows(), cols = z.cols();
  const std::vector<double> lse = row_lse(z);
  // d[i] = log p_i - log r_i, kept for the backward pass.
  std::vector<double> diff(z.size()), prob(z.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      const double logp = z[i] - lse[r];
      prob[i] = std::exp(logp);
      diff[i] = logp - reference_log_probs[i];
      total += prob[i] * diff[i];
    }
  }
  NodePtr pz = logits.node();
  return make_node("kl_divergence", Tensor::scalar(total / static_cast<double>(rows)), {pz},
                   [pz, diff, prob, rows, cols](Node& self) {
                     Tensor& gz = pz->grad_buffer();
                     const double g = self.grad[0] / static_cast<double>(rows);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double expected = 0.0;
                       for (std::size_t c = 0; c < cols; ++c) {
                         expected += prob[r * cols + c] * diff[r * cols + c];
                       }
                       for (std::size_t c = 0; c < cols; ++c) {
                         const std::size_t i = r * cols + c;
                         gz[i] += g * prob[i] * (diff[i] - expected);
                       }
                     }
                   });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  Tensor normed(xv.shape());
  std::vector<double> inv_std(rows);
  Tensor out(xv.shape());
  const double* g = gain.value().data();
  const double* b = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    const bool flat = std::all_of(row, row + d, [row](double v) { return v == row[0]; });
    double mu = row[0];
    if (!flat) {
      mu = 0.0;
      for (std::size_t c = 0; c < d; ++c) mu += row[c];
      mu /= static_cast<double>(d);
    }
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (row[c] - mu) * inv_std[r];
      normed[r * d + c] = xh;
      out[r * d + c] = xh * g[c] + b[c];
    }
  }
  NodePtr px = x.node(), pg = gain.node(), pb = bias.node();
  return make_node("layer_norm", std::move(out), {px, pg, pb},
                   [px, pg, pb, normed = std::move(normed), inv_std, rows, d](Node& self) {
                     const Tensor& dy = self.grad;
                     const double* gv = pg->value.data();
                     if (pg->requires_grad) {
                       Tensor& gg = pg->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t c = 0; c < d; ++c) gg[c] += dy[r * d + c] * normed[r * d + c];
                       }
                     }
                     if (pb->requires_grad) {
                       Tensor& gb = pb->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t c = 0; c < d; ++c) gb[c] += dy[r * d + c];
                       }
                     }
                     if (px->requires_grad) {
                       Tensor& gx = px->grad_buffer();
                       const double dn = static_cast<double>(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t c = 0; c < d; ++c) {
                           const double dxh = dy[r * d + c] * gv[c];
                           s1 += dxh;
                           s2 += dxh * normed[r * d + c];
                         }
                         for (std::size_t c = 0; c < d; ++c) {
                           const double dxh = dy[r * d + c] * gv[c];
                           gx[r * d + c] +=
                               inv_std[r] / dn * (dn * dxh - s1 - normed[r * d + c] * s2);
                         }
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------

Var gather_rows(const Var& table, std::span<const std::size_t> index) {
  const Tensor& tv = table.value();
  require_rank2(tv, "gather_rows");
  const std::size_t cols = tv.cols(), limit = tv.dim(0);
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  Tensor out({index.size(), cols});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= limit) {
      throw IndexError("gather_rows: row " + std::to_string(index[i]) + " outside [0, " +
                       std::to_string(limit) + ")");
    }
    std::copy_n(tv.data() + index[i] * cols, cols, out.data() + i * cols);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  NodePtr pt = table.node();
  return make_node("gather_rows", std::move(out), {pt}, [pt, idx, cols](Node& self) {
    Tensor& gt = pt->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = gt.data() + idx[i] * cols;
      const double* src = self.grad.data() + i * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_cols");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (begin >= end || end > cols) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + to_string(xv.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.data() + r * cols + begin, w, out.data() + r * w);
  }
  NodePtr px = x.node();
  return make_node("slice_cols", std::move(out), {px}, [px, rows, cols, begin, w](Node& self) {
    Tensor& gx = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < w; ++c) gx[r * cols + begin + c] += self.grad[r * w + c];
    }
  });
}

Var concat_cols(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "concat_cols");
  require_rank2(bv, "concat_cols");
  if (av.dim(0) != bv.dim(0)) {
    throw DimensionError("concat_cols: row counts differ, " + to_string(av.shape()) + " vs " +
                         to_string(bv.shape()));
  }
  const std::size_t rows = av.dim(0), ca = av.dim(1), cb = bv.dim(1), w = ca + cb;
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * ca, ca, out.data() + r * w);
    std::copy_n(bv.data() + r * cb, cb, out.data() + r * w + ca);
  }
  NodePtr pa = a.node(), pb = b.node();
  return make_node("concat_cols", std::move(out), {pa, pb}, [pa, pb, rows, ca, cb, w](Node& self) {
    if (pa->requires_grad) {
      Tensor& ga = pa->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += self.grad[r * w + c];
      }
    }
    if (pb->requires_grad) {
      Tensor& gb = pb->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += self.grad[r * w + ca + c];
      }
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t batch, std::size_t seq_len,
              std::size_t heads, std::span<const std::size_t> lengths) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_rank2(qv, "attention");
  if (kv.shape() != qv.shape() || vv.shape() != qv.shape()) {
    throw DimensionError("attention: q/k/v shapes differ");
  }
  if (qv.dim(0) != batch * seq_len) {
    throw DimensionError("attention: " + std::to_string(qv.dim(0)) + " rows for batch " +
                         std::to_string(batch) + " x seq_len " + std::to_string(seq_len));
  }
  const std::size_t width = qv.dim(1);
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (lengths.size() != batch) throw DimensionError("attention: one length per sequence needed");
  for (auto len : lengths) {
    if (len == 0 || len > seq_len) throw DimensionError("attention: sequence length out of range");
  }
  const std::size_t dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[((b * heads + h) * seq_len + i) * seq_len + j]
  std::vector<double> probs(batch * heads * seq_len * seq_len, 0.0);
  Tensor out(qv.shape(), 0.0);
  std::vector<double> scores(seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = lengths[b];
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < len; ++i) {
        const double* qi = qv.data() + (b * seq_len + i) * width + off;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = kv.data() + (b * seq_len + j) * width + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          total += scores[j];
        }
        double* prow = probs.data() + ((b * heads + h) * seq_len + i) * seq_len;
        double* orow = out.data() + (b * seq_len + i) * width + off;
        for (std::size_t j = 0; j < len; ++j) {
          prow[j] = scores[j] / total;
          const double* vj = vv.data() + (b * seq_len + j) * width + off;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += prow[j] * vj[c];
        }
      }
    }
  }

  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  NodePtr pq = q.node(), pk = k.node(), pv = v.node();
  return make_node(
      "attention", std::move(out), {pq, pk, pv},
      [pq, pk, pv, probs = std::move(probs), lens, batch, seq_len, heads, dh, width,
       inv_sqrt](Node& self) {
        const Tensor& dout = self.grad;
        Tensor* gq = pq->requires_grad ? &pq->grad_buffer() : nullptr;
        Tensor* gk = pk->requires_grad ? &pk->grad_buffer() : nullptr;
        Tensor* gv = pv->requires_grad ? &pv->grad_buffer() : nullptr;
        std::vector<double> dp(seq_len), ds(seq_len);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t len = lens[b];
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < len; ++i) {
              const double* prow = probs.data() + ((b * heads + h) * seq_len + i) * seq_len;
              const double* di = dout.data() + (b * seq_len + i) * width + off;
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                const std::size_t rj = (b * seq_len + j) * width + off;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += di[c] * pv->value[rj + c];
                dp[j] = s;
                dot += prow[j] * s;
                if (gv) {
                  for (std::size_t c = 0; c < dh; ++c) (*gv)[rj + c] += prow[j] * di[c];
                }
              }
              const std::size_t ri = (b * seq_len + i) * width + off;
              for (std::size_t j = 0; j < len; ++j) {
                ds[j] = prow[j] * (dp[j] - dot) * inv_sqrt;
                const std::size_t rj = (b * seq_len + j) * width + off;
                if (gq) {
                  for (std::size_t c = 0; c < dh; ++c) (*gq)[ri + c] += ds[j] * pk->value[rj + c];
                }
                if (gk) {
                  for (std::size_t c = 0; c < dh; ++c) (*gk)[rj + c] += ds[j] * pq->value[ri + c];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Var()>& f, std::span<Var> params,
                           const GradCheckOptions& options) {
  for (auto& p : params) p.zero_grad();
  Var loss = f();
  backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::size_t total = 0;
  for (auto& p : params) total += p.value().size();
  if (options.max_coordinates == 0 || options.max_coordinates >= total) {
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      for (std::size_t i = 0; i < params[pi].value().size(); ++i) coords.emplace_back(pi, i);
    }
  } else {
    Rng rng(options.seed);
    std::unordered_set<std::size_t> picked;
    while (picked.size() < options.max_coordinates) {
      const std::size_t flat = rng.below(total);
      if (!picked.insert(flat).second) continue;
      std::size_t rem = flat, pi = 0;
      while (rem >= params[pi].value().size()) rem -= params[pi++].value().size();
      coords.emplace_back(pi, rem);
    }
  }

  GradCheckReport report;
  report.tolerance = options.tolerance;
  for (auto [pi, i] : coords) {
    double& x = params[pi].mutable_value()[i];
    const double saved = x;
    x = saved + options.epsilon;
    const double up = f().value().item();
    x = saved - options.epsilon;
    const double down = f().value().item();
    x = saved;
    GradCheckEntry e;
    e.param = pi;
    e.index = i;
    e.analytic = analytic[pi][i];
    e.numeric = (up - down) / (2.0 * options.epsilon);
    const double denom =
        std::max({std::abs(e.analytic), std::abs(e.numeric), options.floor});
    e.relative_error = std::abs(e.analytic - e.numeric) / denom;
    report.max_relative_error = std::max(report.max_relative_error, e.relative_error);
    report.entries.push_back(e);
  }
  report.passed = report.max_relative_error < options.tolerance;
  for (auto& p : params) p.zero_grad();
  return report;
}

}  // namespace kgedit::ad
