// SPDX-License-Identifier: Apache-2.0
#include "fmoe/numerics/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace fmoe {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMat<T>> view(const Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()),
          static_cast<Eigen::Index>(t.cols())};
}

template <typename T>
Eigen::Map<RowMat<T>> view(Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()),
          static_cast<Eigen::Index>(t.cols())};
}

template <typename T>
Eigen::Map<const RowMat<T>> view(std::span<const T> s, std::size_t r, std::size_t c) {
  return {s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

template <typename T>
Eigen::Map<RowMat<T>> view(std::span<T> s, std::size_t r, std::size_t c) {
  return {s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

template <typename T>
Tape<T>& tape_of(const Var<T>& a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

template <typename T>
Tape<T>& tape_of(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw ContractError("operands live on different tapes");
  return tape_of(a);
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite input");
    }
  }
}

std::string pair_shapes(const Shape& a, const Shape& b) {
  return shape_string(a) + " and " + shape_string(b);
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& tape = tape_of(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " +
                         pair_shapes(av.shape(), bv.shape()));
  }
  const std::size_t m = av.rows();
  const std::size_t n = bv.cols();
  Tensor<T> out(Shape{m, n});
  view(out).noalias() = view(av) * view(bv);
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ia, ib, m, n](Tape<T>& t, std::size_t self) {
                       auto dy = view(t.grad(self), m, n);
                       const auto& A = t.value(ia);
                       const auto& B = t.value(ib);
                       if (t.requires_grad(ia)) {
                         view(t.accumulator(ia), A.rows(), A.cols()).noalias() +=
                             dy * view(B).transpose();
                       }
                       if (t.requires_grad(ib)) {
                         view(t.accumulator(ib), B.rows(), B.cols()).noalias() +=
                             view(A).transpose() * dy;
                       }
                     });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  auto& tape = tape_of(a);
  const auto& av = a.value();
  const std::size_t m = av.rows();
  const std::size_t n = av.cols();
  Tensor<T> out(Shape{n, m});
  view(out) = view(av).transpose();
  const std::size_t ia = a.id();
  return tape.record(std::move(out), a.requires_grad(),
                     [ia, m, n](Tape<T>& t, std::size_t self) {
                       view(t.accumulator(ia), m, n) +=
                           view(t.grad(self), n, m).transpose();
                     });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& tape = tape_of(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("add: shapes differ: " + pair_shapes(av.shape(), bv.shape()));
  }
  Tensor<T> out = av;
  out.clear_grad();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ia, ib](Tape<T>& t, std::size_t self) {
                       auto dy = t.grad(self);
                       for (std::size_t id : {ia, ib}) {
                         if (!t.requires_grad(id)) continue;
                         auto dx = t.accumulator(id);
                         for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
                       }
                     });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& tape = tape_of(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("mul: shapes differ: " + pair_shapes(av.shape(), bv.shape()));
  }
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ia, ib](Tape<T>& t, std::size_t self) {
                       auto dy = t.grad(self);
                       const auto& A = t.value(ia);
                       const auto& B = t.value(ib);
                       if (t.requires_grad(ia)) {
                         auto dx = t.accumulator(ia);
                         for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * B[i];
                       }
                       if (t.requires_grad(ib)) {
                         auto dx = t.accumulator(ib);
                         for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * A[i];
                       }
                     });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  auto& tape = tape_of(a);
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  const std::size_t ia = a.id();
  return tape.record(std::move(out), a.requires_grad(),
                     [ia, factor](Tape<T>& t, std::size_t self) {
                       auto dy = t.grad(self);
                       auto dx = t.accumulator(ia);
                       for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * factor;
                     });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  auto& tape = tape_of(x, bias);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bv.shape()) +
                         " does not match columns of " + shape_string(xv.shape()));
  }
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] + bv[c];
  }
  const std::size_t ix = x.id();
  const std::size_t ib = bias.id();
  return tape.record(std::move(out), x.requires_grad() || bias.requires_grad(),
                     [ix, ib, rows, cols](Tape<T>& t, std::size_t self) {
                       auto dy = t.grad(self);
                       if (t.requires_grad(ix)) {
                         auto dx = t.accumulator(ix);
                         for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
                       }
                       if (t.requires_grad(ib)) {
                         auto db = t.accumulator(ib);
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t c = 0; c < cols; ++c) db[c] += dy[r * cols + c];
                         }
                       }
                     });
}

template <typename T>
Var<T> scale_rows(const Var<T>& x, std::span<const T> factors) {
  auto& tape = tape_of(x);
  const auto& xv = x.value();
  if (factors.size() != xv.rows()) {
    throw DimensionError("scale_rows: " + std::to_string(factors.size()) +
                         " factors for shape " + shape_string(xv.shape()));
  }
  const std::size_t cols = xv.cols();
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] * factors[r];
  }
  auto saved = std::make_shared<std::vector<T>>(factors.begin(), factors.end());
  const std::size_t ix = x.id();
  return tape.record(std::move(out), x.requires_grad(),
                     [ix, cols, saved](Tape<T>& t, std::size_t self) {
                       auto dy = t.grad(self);
                       auto dx = t.accumulator(ix);
                       for (std::size_t r = 0; r < saved->size(); ++r) {
                         const T f = (*saved)[r];
                         if (f == T{0}) continue;
                         for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += dy[r * cols + c] * f;
                       }
                     });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  auto& tape = tape_of(a);
  T s{0};
  for (T v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return tape.record(Tensor<T>::scalar(s), a.requires_grad(),
                     [ia](Tape<T>& t, std::size_t self) {
                       const T g = t.grad(self)[0];
                       for (T& d : t.accumulator(ia)) d += g;
                     });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const auto n = a.value().size();
  if (n == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  auto& tape = tape_of(parts[0]);
  const std::size_t rows = parts[0].rows();
  std::size_t total = 0;
  bool rg = false;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    tape_of(parts[0], p);
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch between " +
                           pair_shapes(parts[0].shape(), p.shape()));
    }
    ids.push_back(p.id());
    widths.push_back(p.cols());
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  Tensor<T> out(Shape{rows, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  return tape.record(std::move(out), rg,
                     [ids, widths, rows, total](Tape<T>& t, std::size_t self) {
                       auto dy = t.grad(self);
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         if (t.requires_grad(ids[k])) {
                           auto dx = t.accumulator(ids[k]);
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t c = 0; c < widths[k]; ++c) {
                               dx[r * widths[k] + c] += dy[r * total + off + c];
                             }
                           }
                         }
                         off += widths[k];
                       }
                     });
}

template <typename T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::size_t> indices,
                   long padding_index) {
  auto& tape = tape_of(table);
  const auto& tv = table.value();
  const std::size_t cols = tv.cols();
  const std::size_t n_rows = tv.rows();
  Tensor<T> out(Shape{indices.size(), cols});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n_rows) {
      throw IndexError("gather_rows: index " + std::to_string(indices[i]) +
                       " outside table of " + std::to_string(n_rows) + " rows");
    }
    std::copy_n(tv.data() + indices[i] * cols, cols, out.data() + i * cols);
  }
  auto saved = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  const std::size_t it = table.id();
  return tape.record(std::move(out), table.requires_grad(),
                     [it, cols, saved, padding_index](Tape<T>& t, std::size_t self) {
                       auto dy = t.grad(self);
                       auto dx = t.accumulator(it);
                       for (std::size_t i = 0; i < saved->size(); ++i) {
                         const std::size_t row = (*saved)[i];
                         if (padding_index >= 0 && row == static_cast<std::size_t>(padding_index)) continue;
                         for (std::size_t c = 0; c < cols; ++c) dx[row * cols + c] += dy[i * cols + c];
                       }
                     });
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
  auto& tape = tape_of(x);
  const auto& xv = x.value();
  check_finite(xv, "softmax");
  if (axis != 0 && axis != 1) throw ContractError("softmax: axis must be 0 or 1");
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  // A "line" is one slice along the softmax axis.
  const std::size_t lines = axis == 1 ? rows : cols;
  const std::size_t len = axis == 1 ? cols : rows;
  const std::size_t stride = axis == 1 ? 1 : cols;
  auto start = [=](std::size_t l) { return axis == 1 ? l * cols : l; };
  Tensor<T> out(xv.shape());
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t s0 = start(l);
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[s0 + j * stride]);
    T z{0};
    for (std::size_t j = 0; j < len; ++j) {
      const T e = std::exp(xv[s0 + j * stride] - mx);
      out[s0 + j * stride] = e;
      z += e;
    }
    for (std::size_t j = 0; j < len; ++j) out[s0 + j * stride] /= z;
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), x.requires_grad(),
                     [ix, lines, len, stride, start](Tape<T>& t, std::size_t self) {
                       const auto& y = t.value(self);
                       auto dy = t.grad(self);
                       auto dx = t.accumulator(ix);
                       for (std::size_t l = 0; l < lines; ++l) {
                         const std::size_t s0 = start(l);
                         T dot{0};
                         for (std::size_t j = 0; j < len; ++j) {
                           dot += dy[s0 + j * stride] * y[s0 + j * stride];
                         }
                         for (std::size_t j = 0; j < len; ++j) {
                           const std::size_t p = s0 + j * stride;
                           dx[p] += y[p] * (dy[p] - dot);
                         }
                       }
                     });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::size_t> targets) {
  auto& tape = tape_of(logits);
  const auto& xv = logits.value();
  check_finite(xv, "cross_entropy");
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_string(xv.shape()));
  }
  auto probs = std::make_shared<std::vector<T>>(xv.size());
  auto tgt = std::make_shared<std::vector<std::size_t>>(targets.begin(), targets.end());
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= cols) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) +
                       " outside " + std::to_string(cols) + " classes");
    }
    const T* row = xv.data() + r * cols;
    const T mx = *std::max_element(row, row + cols);
    T z{0};
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
    const T lse = mx + std::log(z);
    total += lse - row[targets[r]];
    for (std::size_t c = 0; c < cols; ++c) (*probs)[r * cols + c] = std::exp(row[c] - lse);
  }
  const T inv_rows = T{1} / static_cast<T>(rows);
  const std::size_t ix = logits.id();
  return tape.record(Tensor<T>::scalar(total * inv_rows), logits.requires_grad(),
                     [ix, probs, tgt, cols, inv_rows](Tape<T>& t, std::size_t self) {
                       const T g = t.grad(self)[0] * inv_rows;
                       auto dx = t.accumulator(ix);
                       for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * (*probs)[i];
                       for (std::size_t r = 0; r < tgt->size(); ++r) dx[r * cols + (*tgt)[r]] -= g;
                     });
}

template <typename T>
Var<T> stop_gradient(const Var<T>& x) {
  auto& tape = tape_of(x);
  const auto v = x.value().values();
  return tape.constant(Tensor<T>(x.shape(), std::vector<T>(v.begin(), v.end())));
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  auto& tape = tape_of(x, gain);
  tape_of(x, bias);
  const auto& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  if (gain.value().size() != cols || bias.value().size() != cols) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) +
                         " do not match " + shape_string(xv.shape()));
  }
  const auto& g = gain.value();
  const auto& b = bias.value();
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * cols;
    T mu{0};
    for (std::size_t c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<T>(cols);
    T var{0};
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(cols);
    const T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (row[c] - mu) * is;
      (*xhat)[r * cols + c] = h;
      out[r * cols + c] = h * g[c] + b[c];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return tape.record(
      std::move(out), rg,
      [ix, ig, ib, rows, cols, xhat, inv_std](Tape<T>& t, std::size_t self) {
        auto dy = t.grad(self);
        const auto& gv = t.value(ig);
        if (t.requires_grad(ig)) {
          auto dg = t.accumulator(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) dg[c] += dy[r * cols + c] * (*xhat)[r * cols + c];
        }
        if (t.requires_grad(ib)) {
          auto db = t.accumulator(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) db[c] += dy[r * cols + c];
        }
        if (t.requires_grad(ix)) {
          auto dx = t.accumulator(ix);
          const T n = static_cast<T>(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            T s1{0}, s2{0};
            for (std::size_t c = 0; c < cols; ++c) {
              const T dh = dy[r * cols + c] * gv[c];
              s1 += dh;
              s2 += dh * (*xhat)[r * cols + c];
            }
            const T k = (*inv_std)[r] / n;
            for (std::size_t c = 0; c < cols; ++c) {
              const T dh = dy[r * cols + c] * gv[c];
              dx[r * cols + c] += k * (n * dh - s1 - (*xhat)[r * cols + c] * s2);
            }
          }
        }
      });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  auto& tape = tape_of(x);
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = T(0.5) * xv[i] * (T{1} + std::erf(xv[i] * inv_sqrt2));
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), x.requires_grad(),
                     [ix, inv_sqrt2](Tape<T>& t, std::size_t self) {
                       const T inv_sqrt_2pi = T(0.39894228040143267794);
                       const auto& in = t.value(ix);
                       auto dy = t.grad(self);
                       auto dx = t.accumulator(ix);
                       for (std::size_t i = 0; i < dx.size(); ++i) {
                         const T v = in[i];
                         const T cdf = T(0.5) * (T{1} + std::erf(v * inv_sqrt2));
                         const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
                         dx[i] += dy[i] * (cdf + v * pdf);
                       }
                     });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double p, ForwardContext& ctx) {
  if (!ctx.train || p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout probability must be < 1");
  if (ctx.rng == nullptr) throw ContractError("train-mode dropout needs an rng");
  auto& tape = tape_of(x);
  const auto& xv = x.value();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(xv.size());
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = ctx.rng->uniform() < p ? T{0} : keep_scale;
    out[i] = xv[i] * (*mask)[i];
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), x.requires_grad(),
                     [ix, mask](Tape<T>& t, std::size_t self) {
                       auto dy = t.grad(self);
                       auto dx = t.accumulator(ix);
                       for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * (*mask)[i];
                     });
}

template <typename T>
Var<T> sparse_matmul(const SparseMatrix& a, const Var<T>& x) {
  auto& tape = tape_of(x);
  const auto& xv = x.value();
  if (a.cols != xv.rows()) {
    throw DimensionError("sparse_matmul: " + pair_shapes(Shape{a.rows, a.cols}, xv.shape()));
  }
  const std::size_t cols = xv.cols();
  Tensor<T> out(Shape{a.rows, cols});
  for (std::size_t r = 0; r < a.rows; ++r) {
    T* dst = out.data() + r * cols;
    for (std::size_t k = a.row_ptr[r]; k < a.row_ptr[r + 1]; ++k) {
      const T w = static_cast<T>(a.values[k]);
      const T* src = xv.data() + a.col_idx[k] * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += w * src[c];
    }
  }
  const std::size_t ix = x.id();
  const SparseMatrix* ap = &a;
  return tape.record(std::move(out), x.requires_grad(),
                     [ix, ap, cols](Tape<T>& t, std::size_t self) {
                       auto dy = t.grad(self);
                       auto dx = t.accumulator(ix);
                       for (std::size_t r = 0; r < ap->rows; ++r) {
                         const T* g = dy.data() + r * cols;
                         for (std::size_t k = ap->row_ptr[r]; k < ap->row_ptr[r + 1]; ++k) {
                           const T w = static_cast<T>(ap->values[k]);
                           T* d = dx.data() + ap->col_idx[k] * cols;
                           for (std::size_t c = 0; c < cols; ++c) d[c] += w * g[c];
                         }
                       }
                     });
}

template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                        std::span<const std::uint8_t> key_valid, std::size_t seq_len,
                        std::size_t heads, double dropout_p, ForwardContext& ctx) {
  auto& tape = tape_of(q, k);
  tape_of(q, v);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  if (kv.shape() != vv.shape() || qv.cols() != kv.cols()) {
    throw DimensionError("causal_attention: q/k/v shapes differ: " +
                         pair_shapes(qv.shape(), kv.shape()));
  }
  const std::size_t total_rows = kv.rows();
  const std::size_t width = kv.cols();
  if (seq_len == 0 || total_rows % seq_len != 0 || key_valid.size() != total_rows) {
    throw DimensionError("causal_attention: " + std::to_string(total_rows) +
                         " rows incompatible with sequence length " + std::to_string(seq_len));
  }
  const std::size_t n_seq = total_rows / seq_len;
  const std::size_t q_len = qv.rows() / n_seq;
  if (q_len == 0 || q_len > seq_len || qv.rows() % n_seq != 0) {
    throw DimensionError("causal_attention: " + std::to_string(qv.rows()) +
                         " query rows for " + std::to_string(n_seq) + " sequences");
  }
  const std::size_t q_off = seq_len - q_len;
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(width) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = width / heads;
  const T inv_scale = T{1} / std::sqrt(static_cast<T>(dh));
  const bool use_dropout = ctx.train && dropout_p > 0.0;
  if (use_dropout && ctx.rng == nullptr) throw ContractError("train-mode dropout needs an rng");
  const T keep_scale = use_dropout ? static_cast<T>(1.0 / (1.0 - dropout_p)) : T{1};

  // probs[s][h][i][j]: softmax weights before dropout; ws: weights after.
  const std::size_t block = q_len * seq_len;
  auto probs = std::make_shared<std::vector<T>>(n_seq * heads * block, T{0});
  auto dropped = use_dropout ? std::make_shared<std::vector<T>>(n_seq * heads * block, T{0})
                             : probs;
  auto valid = std::make_shared<std::vector<std::uint8_t>>(key_valid.begin(), key_valid.end());
  Tensor<T> out(Shape{n_seq * q_len, width});
  std::vector<T> scores(seq_len);
  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t base = s * seq_len;
    const std::size_t qbase = s * q_len;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      T* P = probs->data() + (s * heads + h) * block;
      T* W = dropped->data() + (s * heads + h) * block;
      for (std::size_t i = 0; i < q_len; ++i) {
        const std::size_t last = q_off + i;
        const T* qi = qv.data() + (qbase + i) * width + off;
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j <= last; ++j) {
          if (!(*valid)[base + j]) continue;
          const T* kj = kv.data() + (base + j) * width + off;
          T dot{0};
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          scores[j] = dot * inv_scale;
          mx = std::max(mx, scores[j]);
          any = true;
        }
        if (!any) continue;
        T z{0};
        for (std::size_t j = 0; j <= last; ++j) {
          if (!(*valid)[base + j]) continue;
          P[i * seq_len + j] = std::exp(scores[j] - mx);
          z += P[i * seq_len + j];
        }
        T* oi = out.data() + (qbase + i) * width + off;
        for (std::size_t j = 0; j <= last; ++j) {
          if (!(*valid)[base + j]) continue;
          P[i * seq_len + j] /= z;
          if (use_dropout) {
            W[i * seq_len + j] =
                ctx.rng->uniform() < dropout_p ? T{0} : P[i * seq_len + j] * keep_scale;
          }
          const T w = W[i * seq_len + j];
          if (w == T{0}) continue;
          const T* vj = vv.data() + (base + j) * width + off;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  return tape.record(
      std::move(out), rg,
      [=](Tape<T>& t, std::size_t self) {
        auto dy = t.grad(self);
        const auto& Q = t.value(iq);
        const auto& K = t.value(ik);
        const auto& V = t.value(iv);
        const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
        std::span<T> dq, dk, dv;
        if (gq) dq = t.accumulator(iq);
        if (gk) dk = t.accumulator(ik);
        if (gv) dv = t.accumulator(iv);
        std::vector<T> dp(seq_len);
        for (std::size_t s = 0; s < n_seq; ++s) {
          const std::size_t base = s * seq_len;
          const std::size_t qbase = s * q_len;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            const T* P = probs->data() + (s * heads + h) * block;
            const T* W = dropped->data() + (s * heads + h) * block;
            for (std::size_t i = 0; i < q_len; ++i) {
              const std::size_t last = q_off + i;
              const T* gi = dy.data() + (qbase + i) * width + off;
              T dot{0};
              for (std::size_t j = 0; j <= last; ++j) {
                dp[j] = T{0};
                const T p = P[i * seq_len + j];
                if (p == T{0}) continue;
                const T* vj = V.data() + (base + j) * width + off;
                T g{0};
                for (std::size_t c = 0; c < dh; ++c) g += gi[c] * vj[c];
                if (gv) {
                  const T w = W[i * seq_len + j];
                  T* dvj = dv.data() + (base + j) * width + off;
                  for (std::size_t c = 0; c < dh; ++c) dvj[c] += w * gi[c];
                }
                // Gradient w.r.t. pre-dropout weight.
                dp[j] = use_dropout ? (W[i * seq_len + j] == T{0} ? T{0} : g * keep_scale) : g;
                dot += dp[j] * p;
              }
              const T* qi = Q.data() + (qbase + i) * width + off;
              for (std::size_t j = 0; j <= last; ++j) {
                const T p = P[i * seq_len + j];
                if (p == T{0}) continue;
                const T ds = p * (dp[j] - dot) * inv_scale;
                if (ds == T{0}) continue;
                const T* kj = K.data() + (base + j) * width + off;
                if (gq) {
                  T* dqi = dq.data() + (qbase + i) * width + off;
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                }
                if (gk) {
                  T* dkj = dk.data() + (base + j) * width + off;
                  for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> weighted_mixture(const Var<T>& gates, std::span<const Var<T>> parts) {
  auto& tape = tape_of(gates);
  const auto& gv = gates.value();
  const std::size_t rows = gv.rows();
  const std::size_t experts = gv.cols();
  if (parts.size() != experts) {
    throw DimensionError("weighted_mixture: " + std::to_string(parts.size()) +
                         " parts for gate shape " + shape_string(gv.shape()));
  }
  const std::size_t cols = parts[0].cols();
  std::vector<std::size_t> ids;
  bool rg = gates.requires_grad();
  for (const auto& p : parts) {
    tape_of(gates, p);
    if (p.rows() != rows || p.cols() != cols) {
      throw DimensionError("weighted_mixture: part shape mismatch " +
                           pair_shapes(parts[0].shape(), p.shape()));
    }
    ids.push_back(p.id());
    rg = rg || p.requires_grad();
  }
  Tensor<T> out(Shape{rows, cols});
  for (std::size_t e = 0; e < experts; ++e) {
    const auto& pv = parts[e].value();
    for (std::size_t r = 0; r < rows; ++r) {
      const T w = gv[r * experts + e];
      T* dst = out.data() + r * cols;
      const T* src = pv.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += w * src[c];
    }
  }
  const std::size_t ig = gates.id();
  return tape.record(std::move(out), rg,
                     [ig, ids, rows, cols, experts](Tape<T>& t, std::size_t self) {
                       auto dy = t.grad(self);
                       const auto& G = t.value(ig);
                       for (std::size_t e = 0; e < experts; ++e) {
                         const auto& pv = t.value(ids[e]);
                         if (t.requires_grad(ig)) {
                           auto dg = t.accumulator(ig);
                           for (std::size_t r = 0; r < rows; ++r) {
                             T s{0};
                             for (std::size_t c = 0; c < cols; ++c) s += dy[r * cols + c] * pv[r * cols + c];
                             dg[r * experts + e] += s;
                           }
                         }
                         if (t.requires_grad(ids[e])) {
                           auto dp = t.accumulator(ids[e]);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T w = G[r * experts + e];
                             for (std::size_t c = 0; c < cols; ++c) dp[r * cols + c] += w * dy[r * cols + c];
                           }
                         }
                       }
                     });
}

template <typename T>
Var<T> probability_nll(const Var<T>& probs, std::span<const std::size_t> targets, T floor) {
  auto& tape = tape_of(probs);
  const auto& pv = probs.value();
  const std::size_t rows = pv.rows();
  const std::size_t cols = pv.cols();
  if (targets.size() != rows) {
    throw DimensionError("probability_nll: " + std::to_string(targets.size()) +
                         " targets for " + shape_string(pv.shape()));
  }
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= cols) {
      throw IndexError("probability_nll: target " + std::to_string(targets[r]) +
                       " outside " + std::to_string(cols) + " classes");
    }
    total -= std::log(pv[r * cols + targets[r]] + floor);
  }
  auto tgt = std::make_shared<std::vector<std::size_t>>(targets.begin(), targets.end());
  const T inv_rows = T{1} / static_cast<T>(rows);
  const std::size_t ip = probs.id();
  return tape.record(Tensor<T>::scalar(total * inv_rows), probs.requires_grad(),
                     [ip, tgt, cols, inv_rows, floor](Tape<T>& t, std::size_t self) {
                       const T g = t.grad(self)[0] * inv_rows;
                       const auto& P = t.value(ip);
                       auto dx = t.accumulator(ip);
                       for (std::size_t r = 0; r < tgt->size(); ++r) {
                         const std::size_t i = r * cols + (*tgt)[r];
                         dx[i] -= g / (P[i] + floor);
                       }
                     });
}

#define FMOE_INSTANTIATE_OPS(T)                                                              \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                      \
  template Var<T> transpose(const Var<T>&);                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                         \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                         \
  template Var<T> scale(const Var<T>&, T);                                                   \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                    \
  template Var<T> scale_rows(const Var<T>&, std::span<const T>);                             \
  template Var<T> sum(const Var<T>&);                                                        \
  template Var<T> mean(const Var<T>&);                                                       \
  template Var<T> concat_cols(std::span<const Var<T>>);                                      \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>, long);            \
  template Var<T> softmax(const Var<T>&, int);                                               \
  template Var<T> cross_entropy(const Var<T>&, std::span<const std::size_t>);                \
  template Var<T> stop_gradient(const Var<T>&);                                              \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                \
  template Var<T> gelu(const Var<T>&);                                                       \
  template Var<T> dropout(const Var<T>&, double, ForwardContext&);                           \
  template Var<T> sparse_matmul(const SparseMatrix&, const Var<T>&);                         \
  template Var<T> causal_attention(const Var<T>&, const Var<T>&, const Var<T>&,              \
                                   std::span<const std::uint8_t>, std::size_t, std::size_t,  \
                                   double, ForwardContext&);                                 \
  template Var<T> weighted_mixture(const Var<T>&, std::span<const Var<T>>);                  \
  template Var<T> probability_nll(const Var<T>&, std::span<const std::size_t>, T);

FMOE_INSTANTIATE_OPS(float)
FMOE_INSTANTIATE_OPS(double)

}  // namespace fmoe
