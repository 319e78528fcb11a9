#include "multirep/autodiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace multirep::ad {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutStrided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using StoragePtr = std::shared_ptr<detail::Storage<T>>;

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> make_output(const char* tag, Shape shape, std::vector<T> data, bool requires_grad) {
  for (T v : data) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string("non-finite value produced by ") + tag);
    }
  }
  return Tensor<T>::from(std::move(shape), std::move(data), requires_grad);
}

[[noreturn]] void dim_error(const char* op, const std::string& detail) {
  throw DimensionError(std::string(op) + ": " + detail);
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& x, std::size_t rank) {
  if (x.rank() != rank) {
    dim_error(op, "expected rank " + std::to_string(rank) + ", got " + shape_string(x.shape()));
  }
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    dim_error(op, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer;
  std::size_t n;
  std::size_t inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
void accumulate(std::vector<T>& into, std::span<const T> from) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
}

template <typename T>
void check_norm(const char* op, T norm) {
  if (!(norm >= static_cast<T>(kMinNorm))) {
    throw DegenerateVectorError(std::string(op) + ": vector norm " + std::to_string(norm) +
                                " below " + std::to_string(kMinNorm));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    dim_error("matmul", shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  std::vector<T> out(m * n);
  MutMap<T>(out.data(), m, n).noalias() =
      ConstMap<T>(a.data().data(), m, k) * ConstMap<T>(b.data().data(), k, n);
  const bool rg = tracking({&a, &b});
  Tensor<T> y = make_output("matmul", {m, n}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> sa = a.storage(), sb = b.storage(), sy = y.storage();
    Tape<T>::active()->record("matmul", {&a, &b}, y, [sa, sb, sy, m, k, n] {
      ConstMap<T> g(sy->grad.data(), m, n);
      if (sa->requires_grad) {
        MutMap<T>(sa->grad.data(), m, k).noalias() +=
            g * ConstMap<T>(sb->data.data(), k, n).transpose();
      }
      if (sb->requires_grad) {
        MutMap<T>(sb->grad.data(), k, n).noalias() +=
            ConstMap<T>(sa->data.data(), m, k).transpose() * g;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul_nt", a, 2);
  require_rank("matmul_nt", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    dim_error("matmul_nt", shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  MutMap<T>(out.data(), m, n).noalias() =
      ConstMap<T>(a.data().data(), m, k) * ConstMap<T>(b.data().data(), n, k).transpose();
  const bool rg = tracking({&a, &b});
  Tensor<T> y = make_output("matmul_nt", {m, n}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> sa = a.storage(), sb = b.storage(), sy = y.storage();
    Tape<T>::active()->record("matmul_nt", {&a, &b}, y, [sa, sb, sy, m, k, n] {
      ConstMap<T> g(sy->grad.data(), m, n);
      if (sa->requires_grad) {
        MutMap<T>(sa->grad.data(), m, k).noalias() += g * ConstMap<T>(sb->data.data(), n, k);
      }
      if (sb->requires_grad) {
        MutMap<T>(sb->grad.data(), n, k).noalias() +=
            g.transpose() * ConstMap<T>(sa->data.data(), m, k);
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank("transpose", x, 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  MutMap<T>(out.data(), c, r) = ConstMap<T>(x.data().data(), r, c).transpose();
  const bool rg = tracking({&x});
  Tensor<T> y = make_output("transpose", {c, r}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("transpose", {&x}, y, [sx, sy, r, c] {
      MutMap<T>(sx->grad.data(), r, c) += ConstMap<T>(sy->grad.data(), c, r).transpose();
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  const bool rg = tracking({&a, &b});
  Tensor<T> y = make_output("add", a.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sa = a.storage(), sb = b.storage(), sy = y.storage();
    Tape<T>::active()->record("add", {&a, &b}, y, [sa, sb, sy] {
      if (sa->requires_grad) accumulate<T>(sa->grad, sy->grad);
      if (sb->requires_grad) accumulate<T>(sb->grad, sy->grad);
    });
  }
  return y;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  const bool rg = tracking({&a, &b});
  Tensor<T> y = make_output("sub", a.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sa = a.storage(), sb = b.storage(), sy = y.storage();
    Tape<T>::active()->record("sub", {&a, &b}, y, [sa, sb, sy] {
      if (sa->requires_grad) accumulate<T>(sa->grad, sy->grad);
      if (sb->requires_grad) {
        for (std::size_t i = 0; i < sb->grad.size(); ++i) sb->grad[i] -= sy->grad[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  const bool rg = tracking({&a, &b});
  Tensor<T> y = make_output("mul", a.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sa = a.storage(), sb = b.storage(), sy = y.storage();
    Tape<T>::active()->record("mul", {&a, &b}, y, [sa, sb, sy] {
      const std::size_t n = sy->grad.size();
      if (sa->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) sa->grad[i] += sy->grad[i] * sb->data[i];
      }
      if (sb->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) sb->grad[i] += sy->grad[i] * sa->data[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank("add_bias", x, 2);
  require_rank("add_bias", bias, 1);
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (bias.dim(0) != d) {
    dim_error("add_bias", shape_string(x.shape()) + " + " + shape_string(bias.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bias[c];
  }
  const bool rg = tracking({&x, &bias});
  Tensor<T> y = make_output("add_bias", x.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sb = bias.storage(), sy = y.storage();
    Tape<T>::active()->record("add_bias", {&x, &bias}, y, [sx, sb, sy, n, d] {
      if (sx->requires_grad) accumulate<T>(sx->grad, sy->grad);
      if (sb->requires_grad) {
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < d; ++c) sb->grad[c] += sy->grad[r * d + c];
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, Real<T> factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  const bool rg = tracking({&x});
  Tensor<T> y = make_output("scale", x.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("scale", {&x}, y, [sx, sy, factor] {
      for (std::size_t i = 0; i < sx->grad.size(); ++i) sx->grad[i] += sy->grad[i] * factor;
    });
  }
  return y;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  const bool rg = tracking({&x});
  Tensor<T> y = make_output("exp", x.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("exp", {&x}, y, [sx, sy] {
      for (std::size_t i = 0; i < sx->grad.size(); ++i) sx->grad[i] += sy->grad[i] * sy->data[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x[i] > T(0))) throw NumericalError("log of non-positive value");
    out[i] = std::log(x[i]);
  }
  const bool rg = tracking({&x});
  Tensor<T> y = make_output("log", x.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("log", {&x}, y, [sx, sy] {
      for (std::size_t i = 0; i < sx->grad.size(); ++i) sx->grad[i] += sy->grad[i] / sx->data[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kAlpha = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kBeta = T(0.044715);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kAlpha * (v + kBeta * v * v * v)));
  }
  const bool rg = tracking({&x});
  Tensor<T> y = make_output("gelu", x.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("gelu", {&x}, y, [sx, sy] {
      for (std::size_t i = 0; i < sx->grad.size(); ++i) {
        const T v = sx->data[i];
        const T t = std::tanh(kAlpha * (v + kBeta * v * v * v));
        const T dt = (T(1) - t * t) * kAlpha * (T(1) + T(3) * kBeta * v * v);
        sx->grad[i] += sy->grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions and structure

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  const bool rg = tracking({&x});
  Tensor<T> y = make_output<T>("sum", {}, {total}, rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("sum", {&x}, y, [sx, sy] {
      for (T& g : sx->grad) g += sy->grad[0];
    });
  }
  return y;
}

namespace {

template <typename T>
Tensor<T> reduce_axis(const char* tag, const Tensor<T>& x, std::size_t axis, bool mean) {
  if (axis >= x.rank()) dim_error(tag, "axis out of range for " + shape_string(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  const T w = mean ? T(1) / static_cast<T>(s.n) : T(1);
  std::vector<T> out(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.n; ++i) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        out[o * s.inner + in] += x[(o * s.n + i) * s.inner + in];
      }
    }
  }
  for (T& v : out) v *= w;
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const bool rg = tracking({&x});
  Tensor<T> y = make_output(tag, std::move(shape), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record(tag, {&x}, y, [sx, sy, s, w] {
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.n; ++i) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            sx->grad[(o * s.n + i) * s.inner + in] += w * sy->grad[o * s.inner + in];
          }
        }
      }
    });
  }
  return y;
}

}  // namespace

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
  return reduce_axis("sum_axis", x, axis, false);
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  return reduce_axis("mean_axis", x, axis, true);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) dim_error("concat", "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) dim_error("concat", "axis out of range for " + shape_string(first));
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor<T>& p : parts) {
    Shape a = p.shape(), b = first;
    if (a.size() != b.size()) dim_error("concat", "rank mismatch");
    widths.push_back(a[axis]);
    total += a[axis];
    a[axis] = b[axis] = 0;
    if (a != b) dim_error("concat", shape_string(p.shape()) + " vs " + shape_string(first));
  }
  Shape shape = first;
  shape[axis] = total;
  const AxisSplit s = split_axis(shape, axis);
  std::vector<T> out(shape_numel(shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const std::size_t block = widths[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(parts[p].data().data() + o * block, block,
                  out.data() + o * total * s.inner + offset);
    }
    offset += block;
  }
  bool rg = false;
  if (Tape<T>::active()) {
    for (const Tensor<T>& p : parts) rg = rg || p.requires_grad();
  }
  Tensor<T> y = make_output("concat", shape, std::move(out), rg);
  if (rg) {
    std::vector<StoragePtr<T>> sp;
    std::vector<const Tensor<T>*> inputs;
    for (const Tensor<T>& p : parts) {
      sp.push_back(p.storage());
      inputs.push_back(&p);
    }
    StoragePtr<T> sy = y.storage();
    Tape<T>::active()->record("concat", inputs, y, [sp, sy, widths, s, total] {
      std::size_t off = 0;
      for (std::size_t p = 0; p < sp.size(); ++p) {
        const std::size_t block = widths[p] * s.inner;
        if (sp[p]->requires_grad) {
          for (std::size_t o = 0; o < s.outer; ++o) {
            const T* g = sy->grad.data() + o * total * s.inner + off;
            T* dst = sp[p]->grad.data() + o * block;
            for (std::size_t i = 0; i < block; ++i) dst[i] += g[i];
          }
        }
        off += block;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    dim_error("reshape", shape_string(x.shape()) + " to " + shape_string(shape));
  }
  const bool rg = tracking({&x});
  Tensor<T> y = make_output("reshape", std::move(shape),
                            std::vector<T>(x.data().begin(), x.data().end()), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("reshape", {&x}, y,
                              [sx, sy] { accumulate<T>(sx->grad, sy->grad); });
  }
  return y;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  require_rank("gather_rows", x, 2);
  if (rows.empty()) dim_error("gather_rows", "empty row list");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<T> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) {
      dim_error("gather_rows", "row " + std::to_string(idx[r]) + " of " + std::to_string(n));
    }
    std::copy_n(x.data().data() + idx[r] * d, d, out.data() + r * d);
  }
  const bool rg = tracking({&x});
  Tensor<T> y = make_output("gather_rows", {idx.size(), d}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("gather_rows", {&x}, y, [sx, sy, idx, d] {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t c = 0; c < d; ++c) sx->grad[idx[r] * d + c] += sy->grad[r * d + c];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_rank("embedding", table, 2);
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.dim(0)) {
      dim_error("embedding", "id " + std::to_string(id) + " outside table of " +
                                 std::to_string(table.dim(0)));
    }
    rows.push_back(static_cast<std::size_t>(id));
  }
  return gather_rows(table, std::span<const std::size_t>(rows));
}

template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::size_t> cols) {
  require_rank("pick", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (cols.size() != n) dim_error("pick", "one column per row required");
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  std::vector<T> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (idx[r] >= c) dim_error("pick", "column " + std::to_string(idx[r]) + " of " + std::to_string(c));
    out[r] = x.at(r, idx[r]);
  }
  const bool rg = tracking({&x});
  Tensor<T> y = make_output("pick", {n}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("pick", {&x}, y, [sx, sy, idx, c] {
      for (std::size_t r = 0; r < idx.size(); ++r) sx->grad[r * c + idx[r]] += sy->grad[r];
    });
  }
  return y;
}

template <typename T>
Tensor<T> diag_embed(const Tensor<T>& v) {
  require_rank("diag_embed", v, 1);
  const std::size_t n = v.dim(0);
  std::vector<T> out(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = v[i];
  const bool rg = tracking({&v});
  Tensor<T> y = make_output("diag_embed", {n, n}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> sv = v.storage(), sy = y.storage();
    Tape<T>::active()->record("diag_embed", {&v}, y, [sv, sy, n] {
      for (std::size_t i = 0; i < n; ++i) sv->grad[i] += sy->grad[i * n + i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalization and probabilities

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Real<T> eps) {
  if (x.rank() < 1) dim_error("layer_norm", "scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    dim_error("layer_norm", "gamma/beta must be [" + std::to_string(d) + "]");
  }
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  std::vector<T> xhat(x.numel()), inv_std(rows), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * d;
    T mean = T(0);
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (row[c] - mean) * inv_std[r];
      out[r * d + c] = xhat[r * d + c] * gamma[c] + beta[c];
    }
  }
  const bool rg = tracking({&x, &gamma, &beta});
  Tensor<T> y = make_output("layer_norm", x.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sg = gamma.storage(), sb = beta.storage(), sy = y.storage();
    Tape<T>::active()->record(
        "layer_norm", {&x, &gamma, &beta}, y,
        [sx, sg, sb, sy, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
          std::vector<T> dxhat(d);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* g = sy->grad.data() + r * d;
            const T* xh = xhat.data() + r * d;
            if (sg->requires_grad) {
              for (std::size_t c = 0; c < d; ++c) sg->grad[c] += g[c] * xh[c];
            }
            if (sb->requires_grad) {
              for (std::size_t c = 0; c < d; ++c) sb->grad[c] += g[c];
            }
            if (!sx->requires_grad) continue;
            T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
            for (std::size_t c = 0; c < d; ++c) {
              dxhat[c] = g[c] * sg->data[c];
              mean_dxhat += dxhat[c];
              mean_dxhat_xhat += dxhat[c] * xh[c];
            }
            mean_dxhat /= static_cast<T>(d);
            mean_dxhat_xhat /= static_cast<T>(d);
            for (std::size_t c = 0; c < d; ++c) {
              sx->grad[r * d + c] += inv_std[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
            }
          }
        });
  }
  return y;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) dim_error("softmax", "axis out of range for " + shape_string(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      auto at = [&](std::size_t i) { return (o * s.n + i) * s.inner + in; };
      T mx = x[at(0)];
      for (std::size_t i = 1; i < s.n; ++i) mx = std::max(mx, x[at(i)]);
      T z = T(0);
      for (std::size_t i = 0; i < s.n; ++i) {
        out[at(i)] = std::exp(x[at(i)] - mx);
        z += out[at(i)];
      }
      for (std::size_t i = 0; i < s.n; ++i) out[at(i)] /= z;
    }
  }
  const bool rg = tracking({&x});
  Tensor<T> y = make_output("softmax", x.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("softmax", {&x}, y, [sx, sy, s] {
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          auto at = [&](std::size_t i) { return (o * s.n + i) * s.inner + in; };
          T dot = T(0);
          for (std::size_t i = 0; i < s.n; ++i) dot += sy->grad[at(i)] * sy->data[at(i)];
          for (std::size_t i = 0; i < s.n; ++i) {
            sx->grad[at(i)] += sy->data[at(i)] * (sy->grad[at(i)] - dot);
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, std::span<const std::uint8_t> key_mask,
                         std::size_t rows_per_sequence) {
  require_rank("masked_softmax", scores, 2);
  const std::size_t rows = scores.dim(0), cols = scores.dim(1);
  if (rows_per_sequence == 0 || rows % rows_per_sequence != 0 ||
      key_mask.size() != (rows / rows_per_sequence) * cols) {
    dim_error("masked_softmax", "key mask does not match scores " + shape_string(scores.shape()));
  }
  std::vector<T> out(rows * cols, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* m = key_mask.data() + (r / rows_per_sequence) * cols;
    const T* x = scores.data().data() + r * cols;
    T mx = T(0);
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) {
      if (m[c] && (!any || x[c] > mx)) {
        mx = x[c];
        any = true;
      }
    }
    if (!any) throw ContractError("masked_softmax: row with no attendable column");
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      if (m[c]) {
        out[r * cols + c] = std::exp(x[c] - mx);
        z += out[r * cols + c];
      }
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  const bool rg = tracking({&scores});
  Tensor<T> y = make_output("masked_softmax", scores.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = scores.storage(), sy = y.storage();
    Tape<T>::active()->record("masked_softmax", {&scores}, y, [sx, sy, rows, cols] {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* p = sy->data.data() + r * cols;
        const T* g = sy->grad.data() + r * cols;
        T dot = T(0);
        for (std::size_t c = 0; c < cols; ++c) dot += p[c] * g[c];
        for (std::size_t c = 0; c < cols; ++c) sx->grad[r * cols + c] += p[c] * (g[c] - dot);
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> logsumexp_rows(const Tensor<T>& x) {
  require_rank("logsumexp_rows", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<T> out(n), probs(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = x.data().data() + r * c;
    const T mx = *std::max_element(row, row + c);
    T z = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(row[j] - mx);
      z += probs[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    out[r] = mx + std::log(z);
  }
  const bool rg = tracking({&x});
  Tensor<T> y = make_output("logsumexp_rows", {n}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("logsumexp_rows", {&x}, y,
                              [sx, sy, probs = std::move(probs), n, c] {
                                for (std::size_t r = 0; r < n; ++r) {
                                  for (std::size_t j = 0; j < c; ++j) {
                                    sx->grad[r * c + j] += sy->grad[r] * probs[r * c + j];
                                  }
                                }
                              });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Similarity

template <typename T>
Tensor<T> cosine(const Tensor<T>& u, const Tensor<T>& v) {
  require_same_shape("cosine", u, v);
  T uu = T(0), vv = T(0), uv = T(0);
  for (std::size_t i = 0; i < u.numel(); ++i) {
    uu += u[i] * u[i];
    vv += v[i] * v[i];
    uv += u[i] * v[i];
  }
  const T nu = std::sqrt(uu), nv = std::sqrt(vv);
  check_norm("cosine", nu);
  check_norm("cosine", nv);
  const T c = uv / (nu * nv);
  const bool rg = tracking({&u, &v});
  Tensor<T> y = make_output<T>("cosine", {}, {c}, rg);
  if (rg) {
    StoragePtr<T> su = u.storage(), sv = v.storage(), sy = y.storage();
    Tape<T>::active()->record("cosine", {&u, &v}, y, [su, sv, sy, nu, nv, c] {
      const T g = sy->grad[0];
      const std::size_t n = su->data.size();
      if (su->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) {
          su->grad[i] += g * (sv->data[i] / (nu * nv) - c * su->data[i] / (nu * nu));
        }
      }
      if (sv->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) {
          sv->grad[i] += g * (su->data[i] / (nu * nv) - c * sv->data[i] / (nv * nv));
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  require_rank("l2_normalize_rows", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> out(n * d), norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = x.data().data() + r * d;
    T ss = T(0);
    for (std::size_t c = 0; c < d; ++c) ss += row[c] * row[c];
    norms[r] = std::sqrt(ss);
    check_norm("l2_normalize_rows", norms[r]);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = row[c] / norms[r];
  }
  const bool rg = tracking({&x});
  Tensor<T> y = make_output("l2_normalize_rows", x.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("l2_normalize_rows", {&x}, y,
                              [sx, sy, norms = std::move(norms), n, d] {
                                for (std::size_t r = 0; r < n; ++r) {
                                  const T* yr = sy->data.data() + r * d;
                                  const T* g = sy->grad.data() + r * d;
                                  T dot = T(0);
                                  for (std::size_t c = 0; c < d; ++c) dot += yr[c] * g[c];
                                  for (std::size_t c = 0; c < d; ++c) {
                                    sx->grad[r * d + c] += (g[c] - yr[c] * dot) / norms[r];
                                  }
                                }
                              });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Stochastic

std::vector<std::uint8_t> dropout_keep_mask(std::uint64_t key, std::size_t count, double rate) {
  std::vector<std::uint8_t> keep(count);
  for (std::size_t i = 0; i < count; ++i) keep[i] = SeedStream::uniform(key, i) >= rate ? 1 : 0;
  return keep;
}

template <typename T>
Tensor<T> apply_dropout_mask(const Tensor<T>& x, std::span<const std::uint8_t> keep, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout rate must lie in [0, 1)");
  if (keep.size() != x.numel()) dim_error("dropout", "mask length does not match input");
  const T factor = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mult(x.numel());
  for (std::size_t i = 0; i < mult.size(); ++i) mult[i] = keep[i] ? factor : T(0);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mult[i];
  const bool rg = tracking({&x});
  Tensor<T> y = make_output("dropout", x.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> sx = x.storage(), sy = y.storage();
    Tape<T>::active()->record("dropout", {&x}, y, [sx, sy, mult = std::move(mult)] {
      for (std::size_t i = 0; i < mult.size(); ++i) sx->grad[i] += sy->grad[i] * mult[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, SeedStream& stream) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout rate must lie in [0, 1)");
  if (mode == Mode::kEval || rate == 0.0) return x;
  const std::vector<std::uint8_t> keep = dropout_keep_mask(stream.next_block(), x.numel(), rate);
  return apply_dropout_mask(x, std::span<const std::uint8_t>(keep), rate);
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Tensor<T> attention_scores(const Tensor<T>& q, const Tensor<T>& k, std::size_t batch,
                           std::size_t seq, std::size_t heads) {
  require_rank("attention_scores", q, 2);
  require_same_shape("attention_scores", q, k);
  const std::size_t d = q.dim(1);
  if (q.dim(0) != batch * seq || heads == 0 || d % heads != 0) {
    dim_error("attention_scores", "packed shape " + shape_string(q.shape()) + " does not match " +
                                      std::to_string(batch) + "x" + std::to_string(seq) +
                                      " with " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const T factor = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> out(batch * heads * seq * seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * seq * d + h * dh;
      ConstStrided<T> qb(q.data().data() + off, seq, dh, Eigen::OuterStride<>(d));
      ConstStrided<T> kb(k.data().data() + off, seq, dh, Eigen::OuterStride<>(d));
      MutMap<T>(out.data() + (b * heads + h) * seq * seq, seq, seq).noalias() =
          factor * (qb * kb.transpose());
    }
  }
  const bool rg = tracking({&q, &k});
  Tensor<T> y = make_output("attention_scores", {batch * heads * seq, seq}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> sq = q.storage(), sk = k.storage(), sy = y.storage();
    Tape<T>::active()->record(
        "attention_scores", {&q, &k}, y, [sq, sk, sy, batch, seq, heads, d, dh, factor] {
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
              const std::size_t off = b * seq * d + h * dh;
              ConstMap<T> g(sy->grad.data() + (b * heads + h) * seq * seq, seq, seq);
              if (sq->requires_grad) {
                MutStrided<T>(sq->grad.data() + off, seq, dh, Eigen::OuterStride<>(d)).noalias() +=
                    factor * (g * ConstStrided<T>(sk->data.data() + off, seq, dh,
                                                  Eigen::OuterStride<>(d)));
              }
              if (sk->requires_grad) {
                MutStrided<T>(sk->grad.data() + off, seq, dh, Eigen::OuterStride<>(d)).noalias() +=
                    factor * (g.transpose() * ConstStrided<T>(sq->data.data() + off, seq, dh,
                                                              Eigen::OuterStride<>(d)));
              }
            }
          }
        });
  }
  return y;
}

template <typename T>
Tensor<T> attention_context(const Tensor<T>& probs, const Tensor<T>& v, std::size_t batch,
                            std::size_t seq, std::size_t heads) {
  require_rank("attention_context", probs, 2);
  require_rank("attention_context", v, 2);
  const std::size_t d = v.dim(1);
  if (v.dim(0) != batch * seq || heads == 0 || d % heads != 0 ||
      probs.shape() != Shape{batch * heads * seq, seq}) {
    dim_error("attention_context", shape_string(probs.shape()) + " with values " +
                                       shape_string(v.shape()));
  }
  const std::size_t dh = d / heads;
  std::vector<T> out(batch * seq * d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * seq * d + h * dh;
      ConstMap<T> p(probs.data().data() + (b * heads + h) * seq * seq, seq, seq);
      MutStrided<T>(out.data() + off, seq, dh, Eigen::OuterStride<>(d)).noalias() =
          p * ConstStrided<T>(v.data().data() + off, seq, dh, Eigen::OuterStride<>(d));
    }
  }
  const bool rg = tracking({&probs, &v});
  Tensor<T> y = make_output("attention_context", {batch * seq, d}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> sp = probs.storage(), sv = v.storage(), sy = y.storage();
    Tape<T>::active()->record(
        "attention_context", {&probs, &v}, y, [sp, sv, sy, batch, seq, heads, d, dh] {
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
              const std::size_t off = b * seq * d + h * dh;
              const std::size_t poff = (b * heads + h) * seq * seq;
              ConstStrided<T> g(sy->grad.data() + off, seq, dh, Eigen::OuterStride<>(d));
              if (sp->requires_grad) {
                MutMap<T>(sp->grad.data() + poff, seq, seq).noalias() +=
                    g * ConstStrided<T>(sv->data.data() + off, seq, dh, Eigen::OuterStride<>(d))
                            .transpose();
              }
              if (sv->requires_grad) {
                MutStrided<T>(sv->grad.data() + off, seq, dh, Eigen::OuterStride<>(d)).noalias() +=
                    ConstMap<T>(sp->data.data() + poff, seq, seq).transpose() * g;
              }
            }
          }
        });
  }
  return y;
}

// ---------------------------------------------------------------------------

#define MULTIREP_INSTANTIATE_OPS(T)                                                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale(const Tensor<T>&, Real<T>);                                         \
  template Tensor<T> exp(const Tensor<T>&);                                                    \
  template Tensor<T> log(const Tensor<T>&);                                                    \
  template Tensor<T> gelu(const Tensor<T>&);                                                   \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> sum_axis(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> mean_axis(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                       \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);              \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>);               \
  template Tensor<T> pick(const Tensor<T>&, std::span<const std::size_t>);                     \
  template Tensor<T> diag_embed(const Tensor<T>&);                                             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Real<T>); \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> masked_softmax(const Tensor<T>&, std::span<const std::uint8_t>,           \
                                    std::size_t);                                              \
  template Tensor<T> logsumexp_rows(const Tensor<T>&);                                         \
  template Tensor<T> cosine(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&);                                      \
  template Tensor<T> dropout(const Tensor<T>&, double, Mode, SeedStream&);                     \
  template Tensor<T> apply_dropout_mask(const Tensor<T>&, std::span<const std::uint8_t>,       \
                                        double);                                               \
  template Tensor<T> attention_scores(const Tensor<T>&, const Tensor<T>&, std::size_t,         \
                                      std::size_t, std::size_t);                               \
  template Tensor<T> attention_context(const Tensor<T>&, const Tensor<T>&, std::size_t,        \
                                       std::size_t, std::size_t);

MULTIREP_INSTANTIATE_OPS(float)
MULTIREP_INSTANTIATE_OPS(double)

}  // namespace multirep::ad
