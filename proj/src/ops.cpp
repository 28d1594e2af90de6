#include "palab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "palab/errors.hpp"
#include "palab/kernels.hpp"

namespace palab::ops {
namespace {

struct Dims {
  std::size_t rows;
  std::size_t cols;
};

Dims matrix_dims(const Shape& s) {
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  throw ShapeError("expected a vector or matrix, got shape " + shape_string(s));
}

Dims require_matrix(const Graph& g, Var v, const char* op) {
  const Shape& s = g.shape(v);
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(s));
  return {s[0], s[1]};
}

std::vector<double> transpose(std::span<const double> x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  }
  return t;
}

void require_same_shape(const Graph& g, Var a, Var b, const char* op) {
  if (g.shape(a) != g.shape(b)) {
    throw ShapeError(std::string(op) + ": shapes differ, " + shape_string(g.shape(a)) + " vs " +
                     shape_string(g.shape(b)));
  }
}

const kernels::KernelTable& K() { return kernels::active(); }

}  // namespace

Var matmul(Graph& g, Var a, Var b) {
  const auto [m, k] = require_matrix(g, a, "matmul");
  const auto [k2, n] = require_matrix(g, b, "matmul");
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(g.shape(a)) + " x " +
                     shape_string(g.shape(b)));
  }
  std::vector<double> out(m * n);
  K().gemm(m, n, k, g.value(a).data(), g.value(b).data(), out.data(), false);
  return g.record(OpKind::kMatmul, {a.id, b.id}, {m, n}, std::move(out), 2 * m * k * n,
                  [a, b, m, k, n](Graph& g, NodeId self) {
                    auto dc = g.adjoint_of(self);
                    if (g.needs_grad(a)) {
                      auto bt = transpose(g.value(b), k, n);
                      K().gemm(m, k, n, dc.data(), bt.data(), g.adjoint(a.id).data(), true);
                    }
                    if (g.needs_grad(b)) {
                      auto at = transpose(g.value(a), m, k);
                      K().gemm(k, n, m, at.data(), dc.data(), g.adjoint(b.id).data(), true);
                    }
                  });
}

Var batched_matmul(Graph& g, Var a, Var b, std::size_t batches) {
  const auto [am, k] = require_matrix(g, a, "batched_matmul");
  const auto [bk, n] = require_matrix(g, b, "batched_matmul");
  if (batches == 0 || am % batches != 0 || bk != batches * k) {
    throw ShapeError("batched_matmul: cannot split " + shape_string(g.shape(a)) + " x " +
                     shape_string(g.shape(b)) + " into " + std::to_string(batches) + " blocks");
  }
  const std::size_t m = am / batches;
  std::vector<double> out(am * n);
  const double* av = g.value(a).data();
  const double* bv = g.value(b).data();
  for (std::size_t i = 0; i < batches; ++i) {
    K().gemm(m, n, k, av + i * m * k, bv + i * k * n, out.data() + i * m * n, false);
  }
  return g.record(OpKind::kBatchedMatmul, {a.id, b.id}, {am, n}, std::move(out),
                  2 * batches * m * k * n, [a, b, batches, m, k, n](Graph& g, NodeId self) {
                    auto dc = g.adjoint_of(self);
                    for (std::size_t i = 0; i < batches; ++i) {
                      const double* dci = dc.data() + i * m * n;
                      if (g.needs_grad(a)) {
                        auto bt = transpose(g.value(b).subspan(i * k * n, k * n), k, n);
                        K().gemm(m, k, n, dci, bt.data(), g.adjoint(a.id).data() + i * m * k, true);
                      }
                      if (g.needs_grad(b)) {
                        auto at = transpose(g.value(a).subspan(i * m * k, m * k), m, k);
                        K().gemm(k, n, m, at.data(), dci, g.adjoint(b.id).data() + i * k * n, true);
                      }
                    }
                  });
}

Var batched_matmul_bt(Graph& g, Var a, Var b, std::size_t batches) {
  const auto [am, k] = require_matrix(g, a, "batched_matmul_bt");
  const auto [bn, k2] = require_matrix(g, b, "batched_matmul_bt");
  if (batches == 0 || am % batches != 0 || bn % batches != 0 || k != k2) {
    throw ShapeError("batched_matmul_bt: cannot split " + shape_string(g.shape(a)) + " x " +
                     shape_string(g.shape(b)) + "ᵀ into " + std::to_string(batches) + " blocks");
  }
  const std::size_t m = am / batches;
  const std::size_t n = bn / batches;
  std::vector<double> out(batches * m * n);
  const double* av = g.value(a).data();
  for (std::size_t i = 0; i < batches; ++i) {
    auto bt = transpose(g.value(b).subspan(i * n * k, n * k), n, k);
    K().gemm(m, n, k, av + i * m * k, bt.data(), out.data() + i * m * n, false);
  }
  return g.record(OpKind::kBatchedMatmulBt, {a.id, b.id}, {am, n}, std::move(out),
                  2 * batches * m * k * n, [a, b, batches, m, k, n](Graph& g, NodeId self) {
                    auto dc = g.adjoint_of(self);
                    for (std::size_t i = 0; i < batches; ++i) {
                      const double* dci = dc.data() + i * m * n;
                      if (g.needs_grad(a)) {
                        // dA_i = dC_i * B_i
                        K().gemm(m, k, n, dci, g.value(b).data() + i * n * k,
                                 g.adjoint(a.id).data() + i * m * k, true);
                      }
                      if (g.needs_grad(b)) {
                        // dB_i = dC_iᵀ * A_i
                        auto dct = transpose(dc.subspan(i * m * n, m * n), m, n);
                        K().gemm(n, k, m, dct.data(), g.value(a).data() + i * m * k,
                                 g.adjoint(b.id).data() + i * n * k, true);
                      }
                    }
                  });
}

Var add(Graph& g, Var a, Var b) {
  require_same_shape(g, a, b, "add");
  const std::size_t n = shape_size(g.shape(a));
  std::vector<double> out(n);
  K().add(n, g.value(a).data(), g.value(b).data(), out.data());
  return g.record(OpKind::kAdd, {a.id, b.id}, g.shape(a), std::move(out), n,
                  [a, b, n](Graph& g, NodeId self) {
                    auto dc = g.adjoint_of(self);
                    if (g.needs_grad(a)) K().axpy(n, 1.0, dc.data(), g.adjoint(a.id).data());
                    if (g.needs_grad(b)) K().axpy(n, 1.0, dc.data(), g.adjoint(b.id).data());
                  });
}

Var add_bias(Graph& g, Var x, Var bias) {
  const auto [rows, cols] = require_matrix(g, x, "add_bias");
  if (g.shape(bias) != Shape{cols}) {
    throw ShapeError("add_bias: bias " + shape_string(g.shape(bias)) + " does not match " +
                     shape_string(g.shape(x)));
  }
  std::vector<double> out(rows * cols);
  const double* xv = g.value(x).data();
  const double* bv = g.value(bias).data();
  for (std::size_t r = 0; r < rows; ++r) K().add(cols, xv + r * cols, bv, out.data() + r * cols);
  return g.record(OpKind::kAddBias, {x.id, bias.id}, {rows, cols}, std::move(out), rows * cols,
                  [x, bias, rows, cols](Graph& g, NodeId self) {
                    auto dc = g.adjoint_of(self);
                    if (g.needs_grad(x)) K().axpy(rows * cols, 1.0, dc.data(), g.adjoint(x.id).data());
                    if (g.needs_grad(bias)) {
                      auto db = g.adjoint(bias.id);
                      for (std::size_t r = 0; r < rows; ++r) K().axpy(cols, 1.0, dc.data() + r * cols, db.data());
                    }
                  });
}

Var add_constant(Graph& g, Var x, const Tensor& c) {
  if (g.shape(x) != c.shape()) {
    throw ShapeError("add_constant: shapes differ, " + shape_string(g.shape(x)) + " vs " +
                     shape_string(c.shape()));
  }
  const std::size_t n = c.size();
  std::vector<double> out(n);
  K().add(n, g.value(x).data(), c.data().data(), out.data());
  return g.record(OpKind::kAddConstant, {x.id}, g.shape(x), std::move(out), n,
                  [x, n](Graph& g, NodeId self) {
                    K().axpy(n, 1.0, g.adjoint_of(self).data(), g.adjoint(x.id).data());
                  });
}

Var mul(Graph& g, Var a, Var b) {
  require_same_shape(g, a, b, "mul");
  const std::size_t n = shape_size(g.shape(a));
  std::vector<double> out(n);
  K().mul(n, g.value(a).data(), g.value(b).data(), out.data());
  return g.record(OpKind::kMul, {a.id, b.id}, g.shape(a), std::move(out), n,
                  [a, b, n](Graph& g, NodeId self) {
                    auto dc = g.adjoint_of(self);
                    std::vector<double> tmp(n);
                    if (g.needs_grad(a)) {
                      K().mul(n, dc.data(), g.value(b).data(), tmp.data());
                      K().axpy(n, 1.0, tmp.data(), g.adjoint(a.id).data());
                    }
                    if (g.needs_grad(b)) {
                      K().mul(n, dc.data(), g.value(a).data(), tmp.data());
                      K().axpy(n, 1.0, tmp.data(), g.adjoint(b.id).data());
                    }
                  });
}

Var scale(Graph& g, Var x, double factor) {
  const std::size_t n = shape_size(g.shape(x));
  std::vector<double> out(n);
  K().scale(n, factor, g.value(x).data(), out.data());
  return g.record(OpKind::kScale, {x.id}, g.shape(x), std::move(out), n,
                  [x, n, factor](Graph& g, NodeId self) {
                    K().axpy(n, factor, g.adjoint_of(self).data(), g.adjoint(x.id).data());
                  });
}

Var scale_by_entry(Graph& g, Var x, Var s, std::size_t index) {
  if (index >= shape_size(g.shape(s))) {
    throw IndexError("scale_by_entry: index " + std::to_string(index) + " outside " +
                     shape_string(g.shape(s)));
  }
  const std::size_t n = shape_size(g.shape(x));
  const double factor = g.value(s)[index];
  std::vector<double> out(n);
  K().scale(n, factor, g.value(x).data(), out.data());
  return g.record(OpKind::kScaleByEntry, {x.id, s.id}, g.shape(x), std::move(out), n,
                  [x, s, n, index](Graph& g, NodeId self) {
                    auto dc = g.adjoint_of(self);
                    if (g.needs_grad(x)) K().axpy(n, g.value(s)[index], dc.data(), g.adjoint(x.id).data());
                    if (g.needs_grad(s)) {
                      auto xv = g.value(x);
                      double acc = 0.0;
                      for (std::size_t i = 0; i < n; ++i) acc += dc[i] * xv[i];
                      g.adjoint(s.id)[index] += acc;
                    }
                  });
}

Var relu(Graph& g, Var x) {
  const std::size_t n = shape_size(g.shape(x));
  std::vector<double> out(n);
  K().relu(n, g.value(x).data(), out.data());
  return g.record(OpKind::kRelu, {x.id}, g.shape(x), std::move(out), n,
                  [x, n](Graph& g, NodeId self) {
                    K().relu_backward(n, g.value(x).data(), g.adjoint_of(self).data(),
                                      g.adjoint(x.id).data());
                  });
}

Var tanh(Graph& g, Var x) {
  const std::size_t n = shape_size(g.shape(x));
  auto xv = g.value(x);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(xv[i]);
  return g.record(OpKind::kTanh, {x.id}, g.shape(x), std::move(out), kTanhFlopsPerElement * n,
                  [x, n](Graph& g, NodeId self) {
                    auto dc = g.adjoint_of(self);
                    auto y = g.value(Var{self});
                    auto dx = g.adjoint(x.id);
                    for (std::size_t i = 0; i < n; ++i) dx[i] += dc[i] * (1.0 - y[i] * y[i]);
                  });
}

Var softmax_lastdim(Graph& g, Var x) {
  const auto [rows, cols] = matrix_dims(g.shape(x));
  if (cols == 0) throw ShapeError("softmax_lastdim: last dimension must be at least 1");
  auto xv = g.value(x);
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double* y = out.data() + r * cols;
    const double top = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(in[c] - top);
      total += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
  }
  return g.record(OpKind::kSoftmax, {x.id}, g.shape(x), std::move(out),
                  kSoftmaxFlopsPerElement * rows * cols, [x, rows, cols](Graph& g, NodeId self) {
                    auto dy = g.adjoint_of(self);
                    auto y = g.value(Var{self});
                    auto dx = g.adjoint(x.id);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const std::size_t o = r * cols;
                      double dot = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) dot += dy[o + c] * y[o + c];
                      for (std::size_t c = 0; c < cols; ++c) dx[o + c] += y[o + c] * (dy[o + c] - dot);
                    }
                  });
}

Var layernorm(Graph& g, Var x, Var gamma, Var beta, double eps) {
  if (!(eps > 0.0)) throw ContractError("layernorm: eps must be positive");
  const auto [rows, d] = matrix_dims(g.shape(x));
  if (g.shape(gamma) != Shape{d} || g.shape(beta) != Shape{d}) {
    throw ShapeError("layernorm: gamma " + shape_string(g.shape(gamma)) + " / beta " +
                     shape_string(g.shape(beta)) + " do not match feature size " + std::to_string(d));
  }
  auto xv = g.value(x);
  auto gv = g.value(gamma);
  auto bv = g.value(beta);
  std::vector<double> out(rows * d);
  std::vector<double> xhat(rows * d);
  std::vector<double> rstd(rows);
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += in[c];
    mean *= inv_d;
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mean) * (in[c] - mean);
    var *= inv_d;
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (in[c] - mean) * rstd[r];
      xhat[r * d + c] = h;
      out[r * d + c] = gv[c] * h + bv[c];
    }
  }
  return g.record(
      OpKind::kLayerNorm, {x.id, gamma.id, beta.id}, g.shape(x), std::move(out),
      kLayerNormFlopsPerElement * rows * d,
      [x, gamma, beta, rows, d, inv_d, xhat = std::move(xhat), rstd = std::move(rstd)](Graph& g, NodeId self) {
        auto dy = g.adjoint_of(self);
        if (g.needs_grad(gamma)) {
          auto dg = g.adjoint(gamma.id);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) dg[c] += dy[r * d + c] * xhat[r * d + c];
        }
        if (g.needs_grad(beta)) {
          auto db = g.adjoint(beta.id);
          for (std::size_t r = 0; r < rows; ++r) K().axpy(d, 1.0, dy.data() + r * d, db.data());
        }
        if (g.needs_grad(x)) {
          auto gv = g.value(gamma);
          auto dx = g.adjoint(x.id);
          std::vector<double> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t o = r * d;
            double mean_dh = 0.0;
            double mean_dh_h = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              dh[c] = dy[o + c] * gv[c];
              mean_dh += dh[c];
              mean_dh_h += dh[c] * xhat[o + c];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t c = 0; c < d; ++c) {
              dx[o + c] += rstd[r] * (dh[c] - mean_dh - xhat[o + c] * mean_dh_h);
            }
          }
        }
      });
}

Var cross_entropy(Graph& g, Var logits, std::span<const std::size_t> labels, Reduction reduction) {
  const auto [b, c] = require_matrix(g, logits, "cross_entropy");
  if (labels.size() != b) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " rows");
  }
  if (b == 0 || c == 0) throw ShapeError("cross_entropy: empty logits");
  auto xv = g.value(logits);
  std::vector<double> probs(b * c);
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[r]) + " at row " +
                       std::to_string(r) + " is not below " + std::to_string(c) + " classes");
    }
    const double* in = xv.data() + r * c;
    const double top = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(in[k] - top);
    const double lse = top + std::log(z);
    for (std::size_t k = 0; k < c; ++k) probs[r * c + k] = std::exp(in[k] - lse);
    total += lse - in[labels[r]];
  }
  const double factor = reduction == Reduction::kMean ? 1.0 / static_cast<double>(b) : 1.0;
  std::vector<std::size_t> label_copy(labels.begin(), labels.end());
  return g.record(OpKind::kCrossEntropy, {logits.id}, {1}, {total * factor}, 0,
                  [logits, b, c, factor, probs = std::move(probs),
                   label_copy = std::move(label_copy)](Graph& g, NodeId self) {
                    const double up = g.adjoint_of(self)[0] * factor;
                    auto dx = g.adjoint(logits.id);
                    for (std::size_t r = 0; r < b; ++r) {
                      const std::size_t y = label_copy[r];
                      for (std::size_t k = 0; k < c; ++k) {
                        const double target = k == y ? 1.0 : 0.0;
                        dx[r * c + k] += up * (probs[r * c + k] - target);
                      }
                    }
                  });
}

Var embedding(Graph& g, Var table, std::span<const std::size_t> ids) {
  const auto [v, d] = require_matrix(g, table, "embedding");
  auto tv = g.value(table);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " is not below table size " +
                       std::to_string(v));
    }
    std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> id_copy(ids.begin(), ids.end());
  return g.record(OpKind::kEmbedding, {table.id}, {ids.size(), d}, std::move(out), 0,
                  [table, d, id_copy = std::move(id_copy)](Graph& g, NodeId self) {
                    auto dy = g.adjoint_of(self);
                    auto dt = g.adjoint(table.id);
                    for (std::size_t i = 0; i < id_copy.size(); ++i) {
                      K().axpy(d, 1.0, dy.data() + i * d, dt.data() + id_copy[i] * d);
                    }
                  });
}

Var slice_cols(Graph& g, Var x, std::size_t begin, std::size_t end) {
  const auto [rows, cols] = require_matrix(g, x, "slice_cols");
  if (begin > end || end > cols) {
    throw IndexError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + std::to_string(cols) + " columns");
  }
  const std::size_t w = end - begin;
  auto xv = g.value(x);
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.data() + r * cols + begin, w, out.data() + r * w);
  return g.record(OpKind::kSliceCols, {x.id}, {rows, w}, std::move(out), 0,
                  [x, rows, cols, begin, w](Graph& g, NodeId self) {
                    auto dy = g.adjoint_of(self);
                    auto dx = g.adjoint(x.id);
                    for (std::size_t r = 0; r < rows; ++r) {
                      K().axpy(w, 1.0, dy.data() + r * w, dx.data() + r * cols + begin);
                    }
                  });
}

Var concat_cols(Graph& g, std::span<const Var> parts, std::size_t rows) {
  std::vector<std::size_t> widths;
  std::vector<NodeId> ids;
  std::size_t total = 0;
  for (Var p : parts) {
    const auto [r, c] = require_matrix(g, p, "concat_cols");
    if (r != rows) throw ShapeError("concat_cols: part has " + std::to_string(r) + " rows, expected " + std::to_string(rows));
    widths.push_back(c);
    ids.push_back(p.id);
    total += c;
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    auto pv = g.value(parts[i]);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.data() + r * widths[i], widths[i], out.data() + r * total + offset);
    }
    offset += widths[i];
  }
  auto inputs = ids;
  return g.record(OpKind::kConcatCols, std::move(inputs), {rows, total}, std::move(out), 0,
                  [ids, widths, rows, total](Graph& g, NodeId self) {
                    auto dy = g.adjoint_of(self);
                    std::size_t offset = 0;
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      if (g.node(ids[i]).needs_grad) {
                        auto dp = g.adjoint(ids[i]);
                        for (std::size_t r = 0; r < rows; ++r) {
                          K().axpy(widths[i], 1.0, dy.data() + r * total + offset, dp.data() + r * widths[i]);
                        }
                      }
                      offset += widths[i];
                    }
                  });
}

Var select_rows(Graph& g, Var x, std::span<const std::size_t> rows) {
  const auto [n, cols] = require_matrix(g, x, "select_rows");
  auto xv = g.value(x);
  std::vector<double> out(rows.size() * cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw IndexError("select_rows: row " + std::to_string(rows[i]) + " outside " + std::to_string(n));
    std::copy_n(xv.data() + rows[i] * cols, cols, out.data() + i * cols);
  }
  std::vector<std::size_t> row_copy(rows.begin(), rows.end());
  return g.record(OpKind::kSelectRows, {x.id}, {rows.size(), cols}, std::move(out), 0,
                  [x, cols, row_copy = std::move(row_copy)](Graph& g, NodeId self) {
                    auto dy = g.adjoint_of(self);
                    auto dx = g.adjoint(x.id);
                    for (std::size_t i = 0; i < row_copy.size(); ++i) {
                      K().axpy(cols, 1.0, dy.data() + i * cols, dx.data() + row_copy[i] * cols);
                    }
                  });
}

Var sum(Graph& g, Var x) {
  auto xv = g.value(x);
  double total = 0.0;
  for (double v : xv) total += v;
  return g.record(OpKind::kSum, {x.id}, {1}, {total}, xv.size(), [x](Graph& g, NodeId self) {
    const double up = g.adjoint_of(self)[0];
    for (double& d : g.adjoint(x.id)) d += up;
  });
}

}  // namespace palab::ops
