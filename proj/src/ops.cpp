#include "relpatch/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace relpatch::ops {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw ShapeError(cat(op, ": dtype mismatch ", dtype_name(a.dtype()), " vs ", dtype_name(b.dtype())));
}

// Row-major strides; broadcast dims (size 1 where output is larger) get stride 0.
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> strides(out.size(), 0);
  int64_t s = 1;
  for (int i = static_cast<int>(in.size()) - 1, j = static_cast<int>(out.size()) - 1; i >= 0; --i, --j) {
    strides[j] = (in[i] == 1 && out[j] != 1) ? 0 : s;
    s *= in[i];
  }
  return strides;
}

template <class T, class F>
Tensor binary_ew(const Tensor& a, const Tensor& b, const Shape& out_shape, F f) {
  Tensor out = Tensor::zeros(out_shape, a.dtype());
  auto av = a.data<T>();
  auto bv = b.data<T>();
  auto ov = out.mutable_data<T>();
  const size_t rank = out_shape.size();
  if (a.shape() == out_shape && b.shape() == out_shape) {
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i], bv[i]);
    return out;
  }
  const auto as = broadcast_strides(a.shape(), out_shape);
  const auto bs = broadcast_strides(b.shape(), out_shape);
  std::vector<int64_t> idx(rank, 0);
  int64_t ai = 0, bi = 0;
  for (size_t o = 0; o < ov.size(); ++o) {
    ov[o] = f(av[static_cast<size_t>(ai)], bv[static_cast<size_t>(bi)]);
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      ++idx[d];
      ai += as[d];
      bi += bs[d];
      if (idx[d] < out_shape[d]) break;
      ai -= as[d] * out_shape[d];
      bi -= bs[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return out;
}

template <class F>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f) {
  check_same_dtype(a, b, name);
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  if (a.dtype() == DType::f32)
    return binary_ew<float>(a, b, out_shape, [&](float x, float y) { return static_cast<float>(f(x, y)); });
  return binary_ew<double>(a, b, out_shape, f);
}

template <class T, class F>
Tensor unary_ew(const Tensor& x, F f) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  auto xv = x.data<T>();
  auto ov = out.mutable_data<T>();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = static_cast<T>(f(static_cast<double>(xv[i])));
  return out;
}

template <class F>
Tensor unary_op(const Tensor& x, F f) {
  if (x.dtype() == DType::f32) return unary_ew<float>(x, f);
  return unary_ew<double>(x, f);
}

struct MatView {
  int64_t batch, rows, cols;
};

MatView mat_view(const Shape& s) {
  if (s.size() < 2) throw ShapeError(cat("matmul operand must have rank >= 2, got ", shape_str(s)));
  int64_t batch = 1;
  for (size_t i = 0; i + 2 < s.size(); ++i) batch *= s[i];
  return {batch, s[s.size() - 2], s[s.size() - 1]};
}

template <class T>
void matmul_2d(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  // ikj order: accumulates full rows of c; vectorizes well and keeps the
  // reduction order fixed.
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
Tensor matmul_impl(const Tensor& a, const Tensor& b) {
  const MatView av = mat_view(a.shape());
  const MatView bv = mat_view(b.shape());
  const bool shared_b = b.rank() == 2 && a.rank() > 2;
  if (av.cols != bv.rows)
    throw ShapeError(cat("matmul: inner dims differ, ", shape_str(a.shape()), " x ", shape_str(b.shape())));
  if (!shared_b) {
    if (a.rank() != b.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
      throw ShapeError(cat("matmul: batch dims differ, ", shape_str(a.shape()), " x ", shape_str(b.shape())));
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(bv.cols);
  Tensor out = Tensor::zeros(out_shape, a.dtype());
  const T* ap = a.data<T>().data();
  const T* bp = b.data<T>().data();
  T* op = out.mutable_data<T>().data();
  for (int64_t batch = 0; batch < av.batch; ++batch) {
    const T* bb = shared_b ? bp : bp + batch * bv.rows * bv.cols;
    matmul_2d(ap + batch * av.rows * av.cols, bb, op + batch * av.rows * bv.cols,
              av.rows, av.cols, bv.cols);
  }
  return out;
}

int64_t last_dim(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("last-axis op on a scalar");
  return x.shape().back();
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    const int64_t ad = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const int64_t bd = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ad != bd && ad != 1 && bd != 1)
      throw ShapeError(cat("cannot broadcast ", shape_str(a), " with ", shape_str(b)));
    out[i] = std::max(ad, bd);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "add", [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "sub", [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor smul(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return s * x; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_same_dtype(a, b, "matmul");
  if (a.dtype() == DType::f32) return matmul_impl<float>(a, b);
  return matmul_impl<double>(a, b);
}

Tensor gelu(const Tensor& x) {
  return unary_op(x, [](double v) { return v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)); });
}
Tensor gelu_cdf(const Tensor& x) {
  return unary_op(x, [](double v) { return 0.5 * (1.0 + std::erf(v * kInvSqrt2)); });
}
Tensor silu(const Tensor& x) {
  return unary_op(x, [](double v) { return v / (1.0 + std::exp(-v)); });
}
Tensor sigmoid(const Tensor& x) {
  return unary_op(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}
Tensor relu(const Tensor& x) {
  return unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

Tensor softmax_lastaxis(const Tensor& x) {
  const int64_t n = last_dim(x);
  const int64_t rows = x.numel() / n;
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  for (int64_t r = 0; r < rows; ++r) {
    double mx = x.at(r * n);
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x.at(r * n + j));
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) denom += std::exp(x.at(r * n + j) - mx);
    for (int64_t j = 0; j < n; ++j) out.set(r * n + j, std::exp(x.at(r * n + j) - mx) / denom);
  }
  return out;
}

NormResult layernorm_lastaxis(const Tensor& x, double eps) {
  const int64_t n = last_dim(x);
  const int64_t rows = x.numel() / n;
  Shape stat_shape = x.shape();
  stat_shape.back() = 1;
  NormResult r{Tensor::zeros(x.shape(), x.dtype()), Tensor::zeros(stat_shape, x.dtype()),
               Tensor::zeros(stat_shape, x.dtype())};
  for (int64_t row = 0; row < rows; ++row) {
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += x.at(row * n + j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double d = x.at(row * n + j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    r.mean.set(row, mean);
    r.inv.set(row, inv);
    for (int64_t j = 0; j < n; ++j) r.y.set(row * n + j, (x.at(row * n + j) - mean) * inv);
  }
  return r;
}

NormResult rmsnorm_lastaxis(const Tensor& x, double eps) {
  const int64_t n = last_dim(x);
  const int64_t rows = x.numel() / n;
  Shape stat_shape = x.shape();
  stat_shape.back() = 1;
  NormResult r{Tensor::zeros(x.shape(), x.dtype()), Tensor(), Tensor::zeros(stat_shape, x.dtype())};
  for (int64_t row = 0; row < rows; ++row) {
    double ms = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double v = x.at(row * n + j);
      ms += v * v;
    }
    ms /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(ms + eps);
    r.inv.set(row, inv);
    for (int64_t j = 0; j < n; ++j) r.y.set(row * n + j, x.at(row * n + j) * inv);
  }
  return r;
}

Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& indices) {
  if (table.rank() != 2) throw ShapeError(cat("gather: table must be rank 2, got ", shape_str(table.shape())));
  const int64_t v = table.dim(0), d = table.dim(1);
  Tensor out = Tensor::zeros({static_cast<int64_t>(indices.size()), d}, table.dtype());
  for (size_t i = 0; i < indices.size(); ++i) {
    const int64_t row = indices[i];
    if (row < 0 || row >= v) throw ShapeError(cat("gather: index ", row, " out of range [0, ", v, ")"));
    for (int64_t j = 0; j < d; ++j) out.set(static_cast<int64_t>(i) * d + j, table.at(row * d + j));
  }
  return out;
}

Tensor slice(const Tensor& x, const std::vector<int64_t>& begin, const std::vector<int64_t>& end) {
  if (begin.size() != x.rank() || end.size() != x.rank())
    throw ShapeError(cat("slice: bounds rank ", begin.size(), " vs tensor rank ", x.rank()));
  Shape out_shape(x.rank());
  for (size_t d = 0; d < x.rank(); ++d) {
    if (begin[d] < 0 || end[d] > x.dim(d) || begin[d] >= end[d])
      throw ShapeError(cat("slice: bad range [", begin[d], ", ", end[d], ") on axis ", d,
                           " of ", shape_str(x.shape())));
    out_shape[d] = end[d] - begin[d];
  }
  Tensor out = Tensor::zeros(out_shape, x.dtype());
  std::vector<int64_t> in_strides(x.rank(), 1);
  for (int d = static_cast<int>(x.rank()) - 2; d >= 0; --d)
    in_strides[d] = in_strides[d + 1] * x.dim(d + 1);
  std::vector<int64_t> idx(x.rank(), 0);
  for (int64_t o = 0; o < out.numel(); ++o) {
    int64_t src = 0;
    for (size_t d = 0; d < x.rank(); ++d) src += (begin[d] + idx[d]) * in_strides[d];
    out.set(o, x.at(src));
    for (int d = static_cast<int>(x.rank()) - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& xs, int64_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& base = xs[0].shape();
  if (axis < 0 || axis >= static_cast<int64_t>(base.size()))
    throw ShapeError(cat("concat: axis ", axis, " out of range for rank ", base.size()));
  Shape out_shape = base;
  int64_t total = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != base.size()) throw ShapeError("concat: rank mismatch");
    for (size_t d = 0; d < base.size(); ++d)
      if (static_cast<int64_t>(d) != axis && t.dim(d) != base[d])
        throw ShapeError(cat("concat: shape mismatch ", shape_str(t.shape()), " vs ", shape_str(base)));
    total += t.dim(static_cast<size_t>(axis));
  }
  out_shape[static_cast<size_t>(axis)] = total;
  Tensor out = Tensor::zeros(out_shape, xs[0].dtype());
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= base[static_cast<size_t>(d)];
  for (size_t d = static_cast<size_t>(axis) + 1; d < base.size(); ++d) inner *= base[d];
  int64_t offset = 0;
  for (const Tensor& t : xs) {
    if (t.dtype() != xs[0].dtype()) throw ShapeError("concat: dtype mismatch");
    const int64_t cdim = t.dim(static_cast<size_t>(axis));
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t c = 0; c < cdim; ++c)
        for (int64_t i = 0; i < inner; ++i)
          out.set((o * total + offset + c) * inner + i, t.at((o * cdim + c) * inner + i));
    offset += cdim;
  }
  return out;
}

Tensor transpose(const Tensor& x, const std::vector<int64_t>& perm) {
  if (perm.size() != x.rank()) throw ShapeError(cat("transpose: perm rank ", perm.size(), " vs ", x.rank()));
  std::vector<bool> seen(x.rank(), false);
  Shape out_shape(x.rank());
  for (size_t d = 0; d < x.rank(); ++d) {
    if (perm[d] < 0 || perm[d] >= static_cast<int64_t>(x.rank()) || seen[static_cast<size_t>(perm[d])])
      throw ShapeError("transpose: invalid permutation");
    seen[static_cast<size_t>(perm[d])] = true;
    out_shape[d] = x.dim(static_cast<size_t>(perm[d]));
  }
  Tensor out = Tensor::zeros(out_shape, x.dtype());
  std::vector<int64_t> in_strides(x.rank(), 1);
  for (int d = static_cast<int>(x.rank()) - 2; d >= 0; --d)
    in_strides[d] = in_strides[d + 1] * x.dim(static_cast<size_t>(d) + 1);
  std::vector<int64_t> idx(x.rank(), 0);
  for (int64_t o = 0; o < out.numel(); ++o) {
    int64_t src = 0;
    for (size_t d = 0; d < x.rank(); ++d) src += idx[d] * in_strides[static_cast<size_t>(perm[d])];
    out.set(o, x.at(src));
    for (int d = static_cast<int>(x.rank()) - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

Tensor reshape(const Tensor& x, const Shape& new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError(cat("reshape: ", shape_str(x.shape()), " to ", shape_str(new_shape)));
  Tensor out = x.clone();
  // Contiguous row-major data: reshape is a metadata change on a copy.
  Tensor shaped = Tensor::zeros(new_shape, x.dtype());
  for (int64_t i = 0; i < x.numel(); ++i) shaped.set(i, out.at(i));
  return shaped;
}

Tensor center_lastaxis(const Tensor& x) {
  const int64_t n = last_dim(x);
  const int64_t rows = x.numel() / n;
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  for (int64_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += x.at(r * n + j);
    mean /= static_cast<double>(n);
    for (int64_t j = 0; j < n; ++j) out.set(r * n + j, x.at(r * n + j) - mean);
  }
  return out;
}

Tensor eps_shift(const Tensor& x, double eps) {
  return unary_op(x, [eps](double v) { return v + (v < 0.0 ? -eps : eps); });
}

Tensor ew_div(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("ew_div: shape mismatch");
  return binary_op(a, b, "ew_div", [](double x, double y) { return x / y; });
}

Tensor sum_lastaxis_keepdim(const Tensor& x) {
  const int64_t n = last_dim(x);
  const int64_t rows = x.numel() / n;
  Shape out_shape = x.shape();
  out_shape.back() = 1;
  Tensor out = Tensor::zeros(out_shape, x.dtype());
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += x.at(r * n + j);
    out.set(r, s);
  }
  return out;
}

Tensor mean_lastaxis_keepdim(const Tensor& x) {
  return smul(sum_lastaxis_keepdim(x), 1.0 / static_cast<double>(last_dim(x)));
}

double sum_all(const Tensor& x) {
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x.at(i);
  return s;
}

Tensor reduce_to_shape(const Tensor& cot, const Shape& target) {
  if (cot.shape() == target) return cot;
  const size_t out_rank = cot.rank();
  const size_t tgt_rank = target.size();
  Tensor out = Tensor::zeros(target, cot.dtype());
  std::vector<int64_t> tgt_strides(out_rank, 0);
  int64_t s = 1;
  for (int i = static_cast<int>(tgt_rank) - 1, j = static_cast<int>(out_rank) - 1; i >= 0; --i, --j) {
    tgt_strides[j] = (target[i] == 1 && cot.shape()[j] != 1) ? 0 : s;
    s *= target[i];
  }
  std::vector<int64_t> idx(out_rank, 0);
  int64_t ti = 0;
  for (int64_t o = 0; o < cot.numel(); ++o) {
    out.set(ti, out.at(ti) + cot.at(o));
    for (int d = static_cast<int>(out_rank) - 1; d >= 0; --d) {
      ++idx[d];
      ti += tgt_strides[d];
      if (idx[d] < cot.shape()[d]) break;
      ti -= tgt_strides[d] * cot.shape()[d];
      idx[d] = 0;
    }
  }
  return out;
}

Tensor replace_rows(const Tensor& base, const Tensor& src, const std::vector<int64_t>& rows) {
  if (base.rank() < 1) throw ShapeError("replace_rows: scalar base");
  const int64_t nrows = base.dim(0);
  const int64_t rowlen = base.numel() / std::max<int64_t>(nrows, 1);
  if (src.rank() != base.rank() || static_cast<int64_t>(rows.size()) != src.dim(0) ||
      src.numel() != static_cast<int64_t>(rows.size()) * rowlen)
    throw ShapeError(cat("replace_rows: src ", shape_str(src.shape()), " rows ", rows.size(),
                         " base ", shape_str(base.shape())));
  Tensor out = base.clone();
  for (size_t i = 0; i < rows.size(); ++i) {
    const int64_t r = rows[i];
    if (r < 0 || r >= nrows) throw ShapeError(cat("replace_rows: row ", r, " out of range"));
    for (int64_t j = 0; j < rowlen; ++j)
      out.set(r * rowlen + j, src.at(static_cast<int64_t>(i) * rowlen + j));
  }
  return out;
}

}  // namespace relpatch::ops
