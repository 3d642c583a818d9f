#include "lorex/diff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace lorex::diff {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

struct Dims {
  std::size_t r, c;
};

Dims dims(const Tensor& t) { return {t.rows(), t.cols()}; }

std::string dims_str(const Tensor& t) { return to_string(t.shape()); }

Shape matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

// ---------------------------------------------------------------- matmul

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  auto [m, k] = dims(a);
  auto [k2, n] = dims(b);
  if (k != k2) throw ShapeError("matmul", "inner extents differ: " + dims_str(a) + " x " + dims_str(b));
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_node("matmul", matrix_shape(m, n), std::move(out), {a, b},
                   [an, bn, m, k, n](Node& self) {
                     MapC g(self.grad.data(), m, n);
                     if (an->requires_grad) {
                       Map(an->grad_buffer().data(), m, k).noalias() +=
                           g * MapC(bn->value.data(), k, n).transpose();
                     }
                     if (bn->requires_grad) {
                       Map(bn->grad_buffer().data(), k, n).noalias() +=
                           MapC(an->value.data(), m, k).transpose() * g;
                     }
                   });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  auto [m, k] = dims(a);
  auto [n, k2] = dims(b);
  if (k != k2) {
    throw ShapeError("matmul_nt", "inner extents differ: " + dims_str(a) + " x " + dims_str(b) + "^T");
  }
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() =
      MapC(a.data().data(), m, k) * MapC(b.data().data(), n, k).transpose();
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_node("matmul_nt", matrix_shape(m, n), std::move(out), {a, b},
                   [an, bn, m, k, n](Node& self) {
                     MapC g(self.grad.data(), m, n);
                     if (an->requires_grad) {
                       Map(an->grad_buffer().data(), m, k).noalias() += g * MapC(bn->value.data(), n, k);
                     }
                     if (bn->requires_grad) {
                       Map(bn->grad_buffer().data(), n, k).noalias() +=
                           g.transpose() * MapC(an->value.data(), m, k);
                     }
                   });
}

// ---------------------------------------------------------------- broadcasting binary ops

namespace {

struct Broadcast {
  std::size_t rows, cols;
  Dims a, b;
  std::size_t ia(std::size_t i, std::size_t j) const {
    return (a.r == 1 ? 0 : i) * a.c + (a.c == 1 ? 0 : j);
  }
  std::size_t ib(std::size_t i, std::size_t j) const {
    return (b.r == 1 ? 0 : i) * b.c + (b.c == 1 ? 0 : j);
  }
};

Broadcast broadcast(std::string_view op, const Tensor& a, const Tensor& b) {
  Dims da = dims(a), db = dims(b);
  auto extent = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(op, "cannot broadcast " + dims_str(a) + " with " + dims_str(b));
  };
  return {extent(da.r, db.r), extent(da.c, db.c), da, db};
}

Shape result_shape(const Tensor& a, const Tensor& b, const Broadcast& bc) {
  if (a.shape() == b.shape()) return a.shape();
  if (bc.rows == a.rows() && bc.cols == a.cols() && a.shape().size() >= 2) return a.shape();
  if (bc.rows == b.rows() && bc.cols == b.cols() && b.shape().size() >= 2) return b.shape();
  return matrix_shape(bc.rows, bc.cols);
}

// f(x, y) forward; dfa/dfb give partial derivatives given x, y and output z.
template <class F, class DA, class DB>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  auto bc = broadcast(op, a, b);
  std::vector<double> out(bc.rows * bc.cols);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < bc.rows; ++i)
    for (std::size_t j = 0; j < bc.cols; ++j)
      out[i * bc.cols + j] = f(av[bc.ia(i, j)], bv[bc.ib(i, j)]);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_node(op, result_shape(a, b, bc), std::move(out), {a, b},
                   [an, bn, bc, dfa, dfb](Node& self) {
                     const auto& g = self.grad;
                     const auto& z = self.value;
                     double* ga = an->requires_grad ? an->grad_buffer().data() : nullptr;
                     double* gb = bn->requires_grad ? bn->grad_buffer().data() : nullptr;
                     for (std::size_t i = 0; i < bc.rows; ++i) {
                       for (std::size_t j = 0; j < bc.cols; ++j) {
                         const std::size_t o = i * bc.cols + j;
                         const double x = an->value[bc.ia(i, j)];
                         const double y = bn->value[bc.ib(i, j)];
                         if (ga) ga[bc.ia(i, j)] += g[o] * dfa(x, y, z[o]);
                         if (gb) gb[bc.ib(i, j)] += g[o] * dfb(x, y, z[o]);
                       }
                     }
                   });
}

template <class F, class D>
Tensor unary(std::string_view op, const Tensor& a, F f, D df) {
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  auto an = a.node_ptr();
  return make_node(op, a.shape(), std::move(out), {a}, [an, df](Node& self) {
    auto ga = an->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * df(an->value[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

namespace {
double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor softplus(const Tensor& a) {
  return unary(
      "softplus", a,
      [](double x) { return x > 30 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return stable_sigmoid(x); });
}

// ---------------------------------------------------------------- softmax family

namespace {

void softmax_backward(const std::shared_ptr<Node>& an, const Node& self, std::size_t m, std::size_t n) {
  auto ga = an->grad_buffer();
  for (std::size_t i = 0; i < m; ++i) {
    const double* y = &self.value[i * n];
    const double* g = &self.grad[i * n];
    double dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[j] * (g[j] - dot);
  }
}

}  // namespace

Tensor softmax(const Tensor& a) {
  auto [m, n] = dims(a);
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av[i * n + j]);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += out[i * n + j] = std::exp(av[i * n + j] - mx);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  auto an = a.node_ptr();
  return make_node("softmax", a.shape(), std::move(out), {a},
                   [an, m = m, n = n](Node& self) { softmax_backward(an, self, m, n); });
}

Tensor masked_softmax(const Tensor& a, std::span<const std::uint8_t> mask) {
  auto [m, n] = dims(a);
  if (mask.size() != a.size()) {
    throw ShapeError("masked_softmax", "mask has " + std::to_string(mask.size()) +
                                           " entries for input " + dims_str(a));
  }
  std::vector<double> out(a.size(), 0.0);
  const auto av = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (mask[i * n + j]) mx = std::max(mx, av[i * n + j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw ShapeError("masked_softmax", "row " + std::to_string(i) + " has no allowed entry");
    }
    double z = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (mask[i * n + j]) z += out[i * n + j] = std::exp(av[i * n + j] - mx);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  auto an = a.node_ptr();
  return make_node("masked_softmax", a.shape(), std::move(out), {a},
                   [an, m = m, n = n](Node& self) { softmax_backward(an, self, m, n); });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  auto [m, n] = dims(x);
  if (gamma.size() != n || beta.size() != n) {
    throw ShapeError("layer_norm", "gain/bias " + dims_str(gamma) + "/" + dims_str(beta) +
                                       " do not match width of " + dims_str(x));
  }
  std::vector<double> out(x.size()), xhat(x.size()), inv_std(m);
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xv[i * n + j] - mu) * (xv[i * n + j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xv[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
    }
  }
  auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
  return make_node("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                   [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), m = m,
                    n = n](Node& self) {
                     const auto& g = self.grad;
                     if (gn->requires_grad || bn->requires_grad) {
                       auto gg = gn->grad_buffer();
                       auto gb = bn->grad_buffer();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j) {
                           gg[j] += g[i * n + j] * xhat[i * n + j];
                           gb[j] += g[i * n + j];
                         }
                     }
                     if (!xn->requires_grad) return;
                     auto gx = xn->grad_buffer();
                     const double inv_n = 1.0 / static_cast<double>(n);
                     for (std::size_t i = 0; i < m; ++i) {
                       double s1 = 0, s2 = 0;
                       for (std::size_t j = 0; j < n; ++j) {
                         const double d = g[i * n + j] * gn->value[j];
                         s1 += d;
                         s2 += d * xhat[i * n + j];
                       }
                       for (std::size_t j = 0; j < n; ++j) {
                         const double d = g[i * n + j] * gn->value[j];
                         gx[i * n + j] += inv_std[i] * (d - s1 * inv_n - xhat[i * n + j] * s2 * inv_n);
                       }
                     }
                   });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  double s = 0;
  for (double v : a.data()) s += v;
  auto an = a.node_ptr();
  return make_node("sum", {}, {s}, {a}, [an](Node& self) {
    auto ga = an->grad_buffer();
    for (auto& v : ga) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  double s = 0;
  for (double v : a.data()) s += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  auto an = a.node_ptr();
  return make_node("mean", {}, {s * inv}, {a}, [an, inv](Node& self) {
    auto ga = an->grad_buffer();
    for (auto& v : ga) v += self.grad[0] * inv;
  });
}

Tensor mean_pool(const Tensor& a) {
  auto [m, n] = dims(a);
  if (m == 0) throw ShapeError("mean_pool", "no rows to pool in " + dims_str(a));
  std::vector<double> out(n, 0.0);
  const auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (auto& v : out) v *= inv;
  auto an = a.node_ptr();
  return make_node("mean_pool", matrix_shape(1, n), std::move(out), {a},
                   [an, m = m, n = n, inv](Node& self) {
                     auto ga = an->grad_buffer();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j] * inv;
                   });
}

Tensor segment_mean(const Tensor& a, std::size_t group_size, std::span<const std::uint8_t> valid) {
  auto [m, n] = dims(a);
  if (group_size == 0 || m % group_size != 0 || valid.size() != m) {
    throw ShapeError("segment_mean", "input " + dims_str(a) + " with group size " +
                                         std::to_string(group_size) + " and " +
                                         std::to_string(valid.size()) + " validity flags");
  }
  const std::size_t groups = m / group_size;
  std::vector<double> out(groups * n, 0.0), weight(groups, 0.0);
  const auto av = a.data();
  for (std::size_t g = 0; g < groups; ++g) {
    std::size_t count = 0;
    for (std::size_t s = 0; s < group_size; ++s) count += valid[g * group_size + s] ? 1 : 0;
    if (count == 0) continue;
    weight[g] = 1.0 / static_cast<double>(count);
    for (std::size_t s = 0; s < group_size; ++s) {
      const std::size_t r = g * group_size + s;
      if (!valid[r]) continue;
      for (std::size_t j = 0; j < n; ++j) out[g * n + j] += av[r * n + j] * weight[g];
    }
  }
  auto an = a.node_ptr();
  std::vector<std::uint8_t> keep(valid.begin(), valid.end());
  return make_node("segment_mean", matrix_shape(groups, n), std::move(out), {a},
                   [an, n = n, group_size, groups, weight = std::move(weight),
                    keep = std::move(keep)](Node& self) {
                     auto ga = an->grad_buffer();
                     for (std::size_t g = 0; g < groups; ++g)
                       for (std::size_t s = 0; s < group_size; ++s) {
                         const std::size_t r = g * group_size + s;
                         if (!keep[r]) continue;
                         for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += self.grad[g * n + j] * weight[g];
                       }
                   });
}

// ---------------------------------------------------------------- structural

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols", "no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols", "row extents differ: " + dims_str(parts[0]) + " vs " + dims_str(p));
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.data().data() + i * c, c, out.data() + i * n + off);
    off += c;
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return make_node("concat_cols", matrix_shape(m, n), std::move(out), parts,
                   [nodes, offsets, m, n](Node& self) {
                     for (std::size_t k = 0; k < nodes.size(); ++k) {
                       if (!nodes[k]->requires_grad) continue;
                       const std::size_t c = nodes[k]->value.size() / std::max<std::size_t>(m, 1);
                       auto g = nodes[k]->grad_buffer();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * n + offsets[k] + j];
                     }
                   });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows", "no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw ShapeError("concat_rows", "column extents differ: " + dims_str(parts[0]) + " vs " + dims_str(p));
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return make_node("concat_rows", matrix_shape(m, n), std::move(out), parts, [nodes](Node& self) {
    std::size_t off = 0;
    for (const auto& nd : nodes) {
      const std::size_t len = nd->value.size();
      if (nd->requires_grad) {
        auto g = nd->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
      }
      off += len;
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  auto [m, n] = dims(a);
  if (begin > end || end > n) {
    throw ShapeError("slice_cols", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                       ") outside " + dims_str(a));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(a.data().data() + i * n + begin, w, out.data() + i * w);
  auto an = a.node_ptr();
  return make_node("slice_cols", matrix_shape(m, w), std::move(out), {a},
                   [an, m = m, n = n, begin, w](Node& self) {
                     auto g = an->grad_buffer();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
                   });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape", "cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  auto an = a.node_ptr();
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_node("reshape", std::move(shape), std::move(out), {a}, [an](Node& self) {
    auto g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor straight_through(const Tensor& soft, std::vector<double> hard) {
  if (hard.size() != soft.size()) {
    throw ShapeError("straight_through", "forward value has " + std::to_string(hard.size()) +
                                             " entries, soft input " + dims_str(soft));
  }
  auto sn = soft.node_ptr();
  return make_node("straight_through", soft.shape(), std::move(hard), {soft}, [sn](Node& self) {
    auto g = sn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  auto [v, d] = dims(table);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw ShapeError("embedding", "id " + std::to_string(ids[i]) + " outside table " + dims_str(table));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  auto tn = table.node_ptr();
  std::vector<int> idx(ids.begin(), ids.end());
  return make_node("embedding", matrix_shape(ids.size(), d), std::move(out), {table},
                   [tn, idx = std::move(idx), d = d](Node& self) {
                     auto g = tn->grad_buffer();
                     for (std::size_t i = 0; i < idx.size(); ++i)
                       for (std::size_t j = 0; j < d; ++j)
                         g[static_cast<std::size_t>(idx[i]) * d + j] += self.grad[i * d + j];
                   });
}

Tensor pick(const Tensor& a, std::span<const int> index) {
  auto [m, n] = dims(a);
  if (index.size() != m) {
    throw ShapeError("pick", std::to_string(index.size()) + " indices for " + dims_str(a));
  }
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= n) {
      throw ShapeError("pick", "index " + std::to_string(index[i]) + " outside " + dims_str(a));
    }
    out[i] = a.data()[i * n + static_cast<std::size_t>(index[i])];
  }
  auto an = a.node_ptr();
  std::vector<int> idx(index.begin(), index.end());
  return make_node("pick", matrix_shape(m, 1), std::move(out), {a},
                   [an, idx = std::move(idx), n = n](Node& self) {
                     auto g = an->grad_buffer();
                     for (std::size_t i = 0; i < idx.size(); ++i)
                       g[i * n + static_cast<std::size_t>(idx[i])] += self.grad[i];
                   });
}

// ---------------------------------------------------------------- losses

Tensor squared_error(const Tensor& prediction, const Tensor& target) {
  if (prediction.size() != target.size()) {
    throw ShapeError("squared_error", "prediction " + dims_str(prediction) + " vs target " + dims_str(target));
  }
  double s = 0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = prediction.data()[i] - target.data()[i];
    s += d * d;
  }
  auto pn = prediction.node_ptr(), tn = target.node_ptr();
  return make_node("squared_error", {}, {s}, {prediction, target}, [pn, tn](Node& self) {
    const double g = self.grad[0];
    if (pn->requires_grad) {
      auto gp = pn->grad_buffer();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += 2.0 * g * (pn->value[i] - tn->value[i]);
    }
    if (tn->requires_grad) {
      auto gt = tn->grad_buffer();
      for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= 2.0 * g * (pn->value[i] - tn->value[i]);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  auto [m, n] = dims(logits);
  if (targets.size() != m) {
    throw ShapeError("cross_entropy", std::to_string(targets.size()) + " targets for logits " + dims_str(logits));
  }
  std::vector<double> prob(logits.size());
  double loss = 0;
  const auto lv = logits.data();
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= n) {
      throw ShapeError("cross_entropy", "target " + std::to_string(targets[i]) + " outside " + std::to_string(n) + " classes");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, lv[i * n + j]);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += prob[i * n + j] = std::exp(lv[i * n + j] - mx);
    for (std::size_t j = 0; j < n; ++j) prob[i * n + j] /= z;
    loss -= lv[i * n + static_cast<std::size_t>(targets[i])] - mx - std::log(z);
  }
  const double inv = 1.0 / static_cast<double>(m);
  auto ln = logits.node_ptr();
  std::vector<int> tg(targets.begin(), targets.end());
  return make_node("cross_entropy", {}, {loss * inv}, {logits},
                   [ln, prob = std::move(prob), tg = std::move(tg), n = n, inv](Node& self) {
                     auto g = ln->grad_buffer();
                     const double s = self.grad[0] * inv;
                     for (std::size_t i = 0; i < tg.size(); ++i)
                       for (std::size_t j = 0; j < n; ++j)
                         g[i * n + j] += s * (prob[i * n + j] - (static_cast<int>(j) == tg[i] ? 1.0 : 0.0));
                   });
}

// ---------------------------------------------------------------- recurrent / attention

Tensor gru_gates(const Tensor& gi, const Tensor& gh, const Tensor& h) {
  auto [b, h3] = dims(gi);
  auto [b2, hd] = dims(h);
  if (h3 != 3 * hd || b != b2 || gh.rows() != b || gh.cols() != h3) {
    throw ShapeError("gru_gates", "gi " + dims_str(gi) + ", gh " + dims_str(gh) + ", h " + dims_str(h));
  }
  std::vector<double> out(b * hd), r(b * hd), z(b * hd), nn(b * hd);
  const auto giv = gi.data(), ghv = gh.data(), hv = h.data();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < hd; ++j) {
      const std::size_t o = i * hd + j;
      const std::size_t base = i * h3;
      r[o] = stable_sigmoid(giv[base + j] + ghv[base + j]);
      z[o] = stable_sigmoid(giv[base + hd + j] + ghv[base + hd + j]);
      nn[o] = std::tanh(giv[base + 2 * hd + j] + r[o] * ghv[base + 2 * hd + j]);
      out[o] = (1.0 - z[o]) * nn[o] + z[o] * hv[o];
    }
  }
  auto gin = gi.node_ptr(), ghn = gh.node_ptr(), hn = h.node_ptr();
  return make_node("gru_gates", matrix_shape(b, hd), std::move(out), {gi, gh, h},
                   [gin, ghn, hn, r = std::move(r), z = std::move(z), nn = std::move(nn), b = b,
                    hd = hd](Node& self) {
                     const std::size_t h3 = 3 * hd;
                     double* ggi = gin->requires_grad ? gin->grad_buffer().data() : nullptr;
                     double* ggh = ghn->requires_grad ? ghn->grad_buffer().data() : nullptr;
                     double* gh = hn->requires_grad ? hn->grad_buffer().data() : nullptr;
                     for (std::size_t i = 0; i < b; ++i) {
                       for (std::size_t j = 0; j < hd; ++j) {
                         const std::size_t o = i * hd + j;
                         const std::size_t base = i * h3;
                         const double g = self.grad[o];
                         const double dn = g * (1.0 - z[o]);
                         const double dz = g * (hn->value[o] - nn[o]);
                         const double dan = dn * (1.0 - nn[o] * nn[o]);
                         const double ghn_val = ghn->value[base + 2 * hd + j];
                         const double dr = dan * ghn_val;
                         const double dar = dr * r[o] * (1.0 - r[o]);
                         const double daz = dz * z[o] * (1.0 - z[o]);
                         if (ggi) {
                           ggi[base + j] += dar;
                           ggi[base + hd + j] += daz;
                           ggi[base + 2 * hd + j] += dan;
                         }
                         if (ggh) {
                           ggh[base + j] += dar;
                           ggh[base + hd + j] += daz;
                           ggh[base + 2 * hd + j] += dan * r[o];
                         }
                         if (gh) gh[o] += g * z[o];
                       }
                     }
                   });
}

Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t group_size,
                      std::span<const std::uint8_t> key_valid) {
  auto [m, d] = dims(q);
  if (k.rows() != m || v.rows() != m || k.cols() != d || group_size == 0 || m % group_size != 0 ||
      key_valid.size() != m) {
    throw ShapeError("self_attention", "q " + dims_str(q) + ", k " + dims_str(k) + ", v " + dims_str(v) +
                                           ", group " + std::to_string(group_size) + ", mask " +
                                           std::to_string(key_valid.size()));
  }
  const std::size_t dv = v.cols();
  const std::size_t groups = m / group_size;
  const std::size_t s = group_size;
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> weights(groups * s * s, 0.0), out(m * dv, 0.0);
  const auto qv = q.data(), kv = k.data(), vv = v.data();
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t i = 0; i < s; ++i) {
      const std::size_t qi = g * s + i;
      double* w = &weights[(g * s + i) * s];
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s; ++j) {
        const std::size_t kj = g * s + j;
        if (!key_valid[kj]) continue;
        double dot = 0;
        for (std::size_t c = 0; c < d; ++c) dot += qv[qi * d + c] * kv[kj * d + c];
        w[j] = dot * scale_f;
        mx = std::max(mx, w[j]);
      }
      if (mx == -std::numeric_limits<double>::infinity()) continue;
      double z = 0;
      for (std::size_t j = 0; j < s; ++j) {
        if (!key_valid[g * s + j]) continue;
        w[j] = std::exp(w[j] - mx);
        z += w[j];
      }
      for (std::size_t j = 0; j < s; ++j) {
        if (!key_valid[g * s + j]) continue;
        w[j] /= z;
        for (std::size_t c = 0; c < dv; ++c) out[qi * dv + c] += w[j] * vv[(g * s + j) * dv + c];
      }
    }
  }
  auto qn = q.node_ptr(), kn = k.node_ptr(), vn = v.node_ptr();
  return make_node("self_attention", matrix_shape(m, dv), std::move(out), {q, k, v},
                   [qn, kn, vn, weights = std::move(weights), groups, s, d = d, dv,
                    scale_f](Node& self) {
                     double* gq = qn->requires_grad ? qn->grad_buffer().data() : nullptr;
                     double* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
                     double* gvv = vn->requires_grad ? vn->grad_buffer().data() : nullptr;
                     std::vector<double> dw(s), ds(s);
                     for (std::size_t g = 0; g < groups; ++g) {
                       for (std::size_t i = 0; i < s; ++i) {
                         const std::size_t qi = g * s + i;
                         const double* w = &weights[(g * s + i) * s];
                         const double* go = &self.grad[qi * dv];
                         double dot = 0;
                         for (std::size_t j = 0; j < s; ++j) {
                           const std::size_t vj = g * s + j;
                           double acc = 0;
                           for (std::size_t c = 0; c < dv; ++c) acc += go[c] * vn->value[vj * dv + c];
                           dw[j] = acc;
                           dot += acc * w[j];
                           if (gvv && w[j] != 0.0)
                             for (std::size_t c = 0; c < dv; ++c) gvv[vj * dv + c] += w[j] * go[c];
                         }
                         for (std::size_t j = 0; j < s; ++j) ds[j] = w[j] * (dw[j] - dot) * scale_f;
                         for (std::size_t j = 0; j < s; ++j) {
                           if (ds[j] == 0.0) continue;
                           const std::size_t kj = g * s + j;
                           if (gq)
                             for (std::size_t c = 0; c < d; ++c) gq[qi * d + c] += ds[j] * kn->value[kj * d + c];
                           if (gk)
                             for (std::size_t c = 0; c < d; ++c) gk[kj * d + c] += ds[j] * qn->value[qi * d + c];
                         }
                       }
                     }
                   });
}

}  // namespace lorex::diff
