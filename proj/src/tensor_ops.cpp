#include <algorithm>
#include <cmath>
#include <numbers>

#include "magma/error.hpp"
#include "magma/tensor.hpp"

namespace magma {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

enum class Bcast { none, scalar_b, scalar_a };

Bcast binary_layout(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::none;
  if (b.numel() == 1) return Bcast::scalar_b;
  if (a.numel() == 1) return Bcast::scalar_a;
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

// Elementwise binary op with scalar-with-tensor broadcasting.
// `partials(a, b, y)` returns {dy/da, dy/db}.
template <class Fwd, class Partials>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Partials partials) {
  const Bcast layout = binary_layout(a, b, name);
  const Shape& out_shape = layout == Bcast::scalar_a ? b.shape() : a.shape();
  const std::size_t n = numel(out_shape);
  const auto& ad = a.impl()->data;
  const auto& bd = b.impl()->data;
  auto ai = [&](std::size_t i) { return layout == Bcast::scalar_a ? ad[0] : ad[i]; };
  auto bi = [&](std::size_t i) { return layout == Bcast::scalar_b ? bd[0] : bd[i]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ai(i), bi(i));

  ImplPtr pa = a.impl(), pb = b.impl();
  return make_result(
      out_shape, std::move(out), {&a, &b},
      [pa, pb, layout, partials](const TensorImpl& y) {
        const std::size_t n = y.data.size();
        const bool sa = layout == Bcast::scalar_a, sb = layout == Bcast::scalar_b;
        double* ga = pa->requires_grad ? pa->grad_buffer().data() : nullptr;
        double* gb = pb->requires_grad ? pb->grad_buffer().data() : nullptr;
        for (std::size_t i = 0; i < n; ++i) {
          const double av = pa->data[sa ? 0 : i];
          const double bv = pb->data[sb ? 0 : i];
          const auto [da, db] = partials(av, bv, y.data[i]);
          if (ga) ga[sa ? 0 : i] += y.grad[i] * da;
          if (gb) gb[sb ? 0 : i] += y.grad[i] * db;
        }
      },
      name);
}

template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  const auto& xd = x.impl()->data;
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  ImplPtr px = x.impl();
  return make_result(
      x.shape(), std::move(out), {&x},
      [px, deriv](const TensorImpl& y) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += y.grad[i] * deriv(px->data[i], y.data[i]);
      },
      name);
}

// C[M,N] += A[M,K] * B[K,N], i-k-j order.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[M,K] += A[M,N] * B[K,N]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      c[i * k + p] += s;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

struct ReducePlan {
  Shape out_shape;
  std::vector<std::size_t> out_index;  // per input element
  std::size_t count = 1;                // input elements per output element
};

ReducePlan plan_reduce(const Shape& shape, const std::vector<std::size_t>& axes, const char* op) {
  if (axes.empty()) throw DegenerateInputError(std::string(op) + ": empty reduction axis set");
  std::vector<bool> reduced(shape.size(), false);
  for (std::size_t a : axes) {
    if (a >= shape.size() || reduced[a]) {
      throw DimensionError(std::string(op) + ": invalid axis " + std::to_string(a) + " for shape " +
                           shape_str(shape));
    }
    reduced[a] = true;
  }
  ReducePlan plan;
  std::vector<std::size_t> out_stride_per_axis(shape.size(), 0);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (reduced[i]) {
      plan.count *= shape[i];
    } else {
      plan.out_shape.push_back(shape[i]);
    }
  }
  if (plan.out_shape.empty()) plan.out_shape = {1};
  std::size_t stride = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    if (!reduced[i]) {
      out_stride_per_axis[i] = stride;
      stride *= shape[i];
    }
  }
  const std::size_t n = numel(shape);
  plan.out_index.resize(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  std::size_t o = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    plan.out_index[flat] = o;
    for (std::size_t ax = shape.size(); ax-- > 0;) {
      if (++idx[ax] < shape[ax]) {
        o += out_stride_per_axis[ax];
        break;
      }
      o -= out_stride_per_axis[ax] * (shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  return plan;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double) { return std::pair{y, x}; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw DomainError("div: division by zero");
  }
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double x, double y, double) { return std::pair{1.0 / y, -x / (y * y)}; });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      x, "neg", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double c) {
  return unary_op(
      x, "scale", [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log: input must be strictly positive, got " + std::to_string(v));
  }
  return unary_op(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) {
    if (v < 0.0) throw DomainError("sqrt: input must be nonnegative, got " + std::to_string(v));
  }
  return unary_op(
      x, "sqrt", [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor reciprocal(const Tensor& x) {
  for (double v : x.data()) {
    if (v == 0.0) throw DomainError("reciprocal: input must be nonzero");
  }
  return unary_op(
      x, "reciprocal", [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  ImplPtr pa = a.impl(), pb = b.impl();
  return make_result(
      {m, n}, std::move(out), {&a, &b},
      [pa, pb, m, k, n](const TensorImpl& y) {
        if (pa->requires_grad) gemm_nt(y.grad.data(), pb->data.data(), pa->grad_buffer().data(), m, n, k);
        if (pb->requires_grad) gemm_tn(pa->data.data(), y.grad.data(), pb->grad_buffer().data(), m, k, n);
      },
      "matmul");
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(g * m * n, 0.0);
  for (std::size_t i = 0; i < g; ++i) {
    gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n, m, k, n);
  }
  ImplPtr pa = a.impl(), pb = b.impl();
  return make_result(
      {g, m, n}, std::move(out), {&a, &b},
      [pa, pb, g, m, k, n](const TensorImpl& y) {
        for (std::size_t i = 0; i < g; ++i) {
          const double* dy = y.grad.data() + i * m * n;
          if (pa->requires_grad) {
            gemm_nt(dy, pb->data.data() + i * k * n, pa->grad_buffer().data() + i * m * k, m, n, k);
          }
          if (pb->requires_grad) {
            gemm_tn(pa->data.data() + i * m * k, dy, pb->grad_buffer().data() + i * k * n, m, k, n);
          }
        }
      },
      "bmm");
}

Tensor transpose(const Tensor& x) {
  if (x.rank() == 2) return permute(x, {1, 0});
  if (x.rank() == 3) return permute(x, {0, 2, 1});
  throw DimensionError("transpose: expected rank 2 or 3, got " + shape_str(x.shape()));
}

Tensor mul_rows(const Tensor& x, const Tensor& v) {
  require_rank(x, 2, "mul_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (v.numel() != r) {
    throw DimensionError("mul_rows: " + shape_str(x.shape()) + " with row scales " + shape_str(v.shape()));
  }
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * v[i];
  ImplPtr px = x.impl(), pv = v.impl();
  return make_result(
      x.shape(), std::move(out), {&x, &v},
      [px, pv, r, c](const TensorImpl& y) {
        if (px->requires_grad) {
          auto& g = px->grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y.grad[i * c + j] * pv->data[i];
        }
        if (pv->requires_grad) {
          auto& g = pv->grad_buffer();
          for (std::size_t i = 0; i < r; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += y.grad[i * c + j] * px->data[i * c + j];
            g[i] += s;
          }
        }
      },
      "mul_rows");
}

Tensor mul_cols(const Tensor& x, const Tensor& v) {
  require_rank(x, 2, "mul_cols");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (v.numel() != c) {
    throw DimensionError("mul_cols: " + shape_str(x.shape()) + " with column scales " + shape_str(v.shape()));
  }
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * v[j];
  ImplPtr px = x.impl(), pv = v.impl();
  return make_result(
      x.shape(), std::move(out), {&x, &v},
      [px, pv, r, c](const TensorImpl& y) {
        if (px->requires_grad) {
          auto& g = px->grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y.grad[i * c + j] * pv->data[j];
        }
        if (pv->requires_grad) {
          auto& g = pv->grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += y.grad[i * c + j] * px->data[i * c + j];
        }
      },
      "mul_cols");
}

Tensor diag(const Tensor& v) {
  const std::size_t n = v.numel();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = v[i];
  ImplPtr pv = v.impl();
  return make_result(
      {n, n}, std::move(out), {&v},
      [pv, n](const TensorImpl& y) {
        auto& g = pv->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += y.grad[i * n + i];
      },
      "diag");
}

// ---------------------------------------------------------------- shape

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  ImplPtr px = x.impl();
  return make_result(
      std::move(shape), x.impl()->data, {&x},
      [px](const TensorImpl& y) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += y.grad[i];
      },
      "reshape");
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  if (axes.size() != in.size()) {
    throw DimensionError("permute: axis list size does not match shape " + shape_str(in));
  }
  std::vector<bool> seen(in.size(), false);
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size() || seen[axes[i]]) throw DimensionError("permute: invalid axis permutation");
    seen[axes[i]] = true;
    out_shape[i] = in[axes[i]];
  }
  const auto in_strides = strides_of(in);
  const std::size_t n = x.numel();
  // source[k] = input flat index feeding output element k
  auto source = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(in.size(), 0);
  std::size_t src = 0;
  for (std::size_t k = 0; k < n; ++k) {
    (*source)[k] = src;
    for (std::size_t ax = out_shape.size(); ax-- > 0;) {
      const std::size_t st = in_strides[axes[ax]];
      if (++idx[ax] < out_shape[ax]) {
        src += st;
        break;
      }
      src -= st * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = x[(*source)[k]];
  ImplPtr px = x.impl();
  return make_result(
      std::move(out_shape), std::move(out), {&x},
      [px, source](const TensorImpl& y) {
        auto& g = px->grad_buffer();
        for (std::size_t k = 0; k < y.grad.size(); ++k) g[(*source)[k]] += y.grad[k];
      },
      "permute");
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DegenerateInputError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    bool ok = p.rank() == first.size();
    for (std::size_t i = 0; ok && i < first.size(); ++i) ok = (i == axis) || p.shape()[i] == first[i];
    if (!ok) throw DimensionError("concat: " + shape_str(first) + " vs " + shape_str(p.shape()));
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_chunk = out_shape[axis] * inner;
  std::vector<double> out(numel(out_shape));
  std::vector<ImplPtr> impls;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t chunk = p.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().begin() + o * chunk, chunk, out.begin() + o * out_chunk + off);
    }
    impls.push_back(p.impl());
    offsets.push_back(off);
    off += chunk;
  }
  std::function<void(const TensorImpl&)> backward = [impls, offsets, outer, inner, axis,
                                                     out_chunk](const TensorImpl& y) {
    for (std::size_t pi = 0; pi < impls.size(); ++pi) {
      if (!impls[pi]->requires_grad) continue;
      auto& g = impls[pi]->grad_buffer();
      const std::size_t chunk = impls[pi]->shape[axis] * inner;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < chunk; ++e) g[o * chunk + e] += y.grad[o * out_chunk + offsets[pi] + e];
    }
  };
  Tensor result = make_result(out_shape, std::move(out), {}, nullptr, "concat");
  // Variadic inputs: register them on the node by hand.
  Tape* tape = Tape::active();
  const bool any = std::any_of(parts.begin(), parts.end(), [](const Tensor& p) { return p.requires_grad(); });
  if (tape != nullptr && any) {
    auto& impl = *result.impl();
    impl.requires_grad = true;
    impl.inputs = impls;
    impl.backward = std::move(backward);
    tape->record(result.impl());
  }
  return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& in = x.shape();
  if (axis >= in.size() || length == 0 || start + length > in[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") invalid on axis " + std::to_string(axis) + " of " + shape_str(in));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  Shape out_shape = in;
  out_shape[axis] = length;
  const std::size_t in_chunk = in[axis] * inner, out_chunk = length * inner, off = start * inner;
  std::vector<double> out(outer * out_chunk);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().begin() + o * in_chunk + off, out_chunk, out.begin() + o * out_chunk);
  }
  ImplPtr px = x.impl();
  return make_result(
      std::move(out_shape), std::move(out), {&x},
      [px, outer, in_chunk, out_chunk, off](const TensorImpl& y) {
        auto& g = px->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t e = 0; e < out_chunk; ++e) g[o * in_chunk + off + e] += y.grad[o * out_chunk + e];
      },
      "slice");
}

Tensor gather_tokens(const Tensor& x, const std::vector<std::vector<std::size_t>>& index) {
  require_rank(x, 3, "gather_tokens");
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (index.size() != b || index.empty() || index.front().empty()) {
    throw DimensionError("gather_tokens: index batch does not match " + shape_str(x.shape()));
  }
  const std::size_t tp = index.front().size();
  for (const auto& row : index) {
    if (row.size() != tp) throw DimensionError("gather_tokens: ragged index rows");
    for (std::size_t p : row) {
      if (p >= t) throw DimensionError("gather_tokens: token index out of range");
    }
  }
  std::vector<double> out(b * tp * d);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < tp; ++j)
      std::copy_n(x.data().begin() + (i * t + index[i][j]) * d, d, out.begin() + (i * tp + j) * d);
  ImplPtr px = x.impl();
  return make_result(
      {b, tp, d}, std::move(out), {&x},
      [px, index, b, t, tp, d](const TensorImpl& y) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < tp; ++j)
            for (std::size_t e = 0; e < d; ++e) g[(i * t + index[i][j]) * d + e] += y.grad[(i * tp + j) * d + e];
      },
      "gather_tokens");
}

Tensor repeat_batch(const Tensor& x, std::size_t n) {
  if (x.rank() == 0 || x.dim(0) != 1) {
    throw DimensionError("repeat_batch: leading extent must be 1, got " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[0] = n;
  const std::size_t chunk = x.numel();
  std::vector<double> out(n * chunk);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(x.data().begin(), chunk, out.begin() + i * chunk);
  ImplPtr px = x.impl();
  return make_result(
      std::move(out_shape), std::move(out), {&x},
      [px, n, chunk](const TensorImpl& y) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t e = 0; e < chunk; ++e) g[e] += y.grad[i * chunk + e];
      },
      "repeat_batch");
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  ImplPtr px = x.impl();
  return make_result(
      {1}, {s}, {&x},
      [px](const TensorImpl& y) {
        auto& g = px->grad_buffer();
        for (double& v : g) v += y.grad[0];
      },
      "sum");
}

Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes) {
  auto plan = std::make_shared<ReducePlan>(plan_reduce(x.shape(), axes, "sum"));
  std::vector<double> out(numel(plan->out_shape), 0.0);
  for (std::size_t i = 0; i < x.numel(); ++i) out[plan->out_index[i]] += x[i];
  ImplPtr px = x.impl();
  return make_result(
      plan->out_shape, std::move(out), {&x},
      [px, plan](const TensorImpl& y) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += y.grad[plan->out_index[i]];
      },
      "sum_axes");
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes) {
  auto plan = std::make_shared<ReducePlan>(plan_reduce(x.shape(), axes, "mean"));
  std::vector<double> out(numel(plan->out_shape), 0.0);
  for (std::size_t i = 0; i < x.numel(); ++i) out[plan->out_index[i]] += x[i];
  const double inv = 1.0 / static_cast<double>(plan->count);
  for (double& v : out) v *= inv;
  ImplPtr px = x.impl();
  return make_result(
      plan->out_shape, std::move(out), {&x},
      [px, plan, inv](const TensorImpl& y) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += y.grad[plan->out_index[i]] * inv;
      },
      "mean_axes");
}

Tensor max(const Tensor& x, const std::vector<std::size_t>& axes) {
  auto plan = plan_reduce(x.shape(), axes, "max");
  const std::size_t n_out = numel(plan.out_shape);
  std::vector<double> out(n_out, 0.0);
  auto argmax = std::make_shared<std::vector<std::size_t>>(n_out, x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t o = plan.out_index[i];
    if ((*argmax)[o] == x.numel() || x[i] > out[o]) {
      out[o] = x[i];
      (*argmax)[o] = i;
    }
  }
  ImplPtr px = x.impl();
  return make_result(
      plan.out_shape, std::move(out), {&x},
      [px, argmax](const TensorImpl& y) {
        auto& g = px->grad_buffer();
        for (std::size_t o = 0; o < argmax->size(); ++o) g[(*argmax)[o]] += y.grad[o];
      },
      "max_axes");
}

// ---------------------------------------------------------------- nn primitives

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double m = xd[base];
      for (std::size_t k = 1; k < n; ++k) m = std::max(m, xd[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(xd[base + k * inner] - m);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= z;
    }
  }
  ImplPtr px = x.impl();
  return make_result(
      s, std::move(out), {&x},
      [px, outer, inner, n](const TensorImpl& y) {
        auto& g = px->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double dot = 0.0;
            for (std::size_t k = 0; k < n; ++k) dot += y.grad[base + k * inner] * y.data[base + k * inner];
            for (std::size_t k = 0; k < n; ++k) {
              const std::size_t i = base + k * inner;
              g[i] += y.data[i] * (y.grad[i] - dot);
            }
          }
        }
      },
      "softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: width " + std::to_string(d) + " vs gain " + shape_str(gain.shape()) +
                         " / bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
  ImplPtr px = x.impl(), pg = gain.impl(), pb = bias.impl();
  return make_result(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [px, pg, pb, xhat, rstd, rows, d](const TensorImpl& y) {
        if (pg->requires_grad || pb->requires_grad) {
          double* gg = pg->requires_grad ? pg->grad_buffer().data() : nullptr;
          double* gb = pb->requires_grad ? pb->grad_buffer().data() : nullptr;
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) {
              const double dy = y.grad[r * d + j];
              if (gg) gg[j] += dy * (*xhat)[r * d + j];
              if (gb) gb[j] += dy;
            }
        }
        if (px->requires_grad) {
          auto& g = px->grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = y.grad[r * d + j] * pg->data[j];
              s1 += dh;
              s2 += dh * (*xhat)[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = y.grad[r * d + j] * pg->data[j];
              g[r * d + j] += (*rstd)[r] * (dh - inv_d * s1 - (*xhat)[r * d + j] * inv_d * s2);
            }
          }
        }
      },
      "layer_norm");
}

Tensor gelu(const Tensor& x) {
  // sqrt(2/pi) = 0.7978845608...
  constexpr double c = 0.7978845608028654;
  constexpr double a = 0.044715;
  return unary_op(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(c * (v + a * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(weight, 2, "linear");
  const std::size_t out_f = weight.dim(0), in_f = weight.dim(1);
  if (x.shape().back() != in_f) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != out_f) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  const std::size_t rows = x.numel() / in_f;
  std::vector<double> out(rows * out_f, 0.0);
  gemm_nt(x.data().data(), weight.data().data(), out.data(), rows, in_f, out_f);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out_f; ++o) out[r * out_f + o] += bias[o];
  }
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  ImplPtr px = x.impl(), pw = weight.impl();
  ImplPtr pb = bias.defined() ? bias.impl() : nullptr;
  return make_result(
      std::move(out_shape), std::move(out), {&x, &weight, &bias},
      [px, pw, pb, rows, in_f, out_f](const TensorImpl& y) {
        if (px->requires_grad) gemm_nn(y.grad.data(), pw->data.data(), px->grad_buffer().data(), rows, out_f, in_f);
        if (pw->requires_grad) gemm_tn(y.grad.data(), px->data.data(), pw->grad_buffer().data(), rows, out_f, in_f);
        if (pb && pb->requires_grad) {
          auto& g = pb->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out_f; ++o) g[o] += y.grad[r * out_f + o];
        }
      },
      "linear");
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw DimensionError("cross_entropy: label count does not match logits rows");
  auto probs = std::make_shared<std::vector<double>>(n * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw DataError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    const double* row = logits.data().data() + i * c;
    const double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - m) / z;
    loss += -(row[labels[i]] - m - std::log(z));
  }
  loss /= static_cast<double>(n);
  ImplPtr pl = logits.impl();
  return make_result(
      {1}, {loss}, {&logits},
      [pl, probs, labels, n, c](const TensorImpl& y) {
        auto& g = pl->grad_buffer();
        const double s = y.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j)
            g[i * c + j] += s * ((*probs)[i * c + j] - (j == labels[i] ? 1.0 : 0.0));
      },
      "cross_entropy");
}

Tensor pairwise_sq_dists(const Tensor& z) {
  require_rank(z, 2, "pairwise_sq_dists");
  const std::size_t b = z.dim(0), d = z.dim(1);
  std::vector<double> out(b * b, 0.0);
  const auto zd = z.data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = i + 1; j < b; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = zd[i * d + k] - zd[j * d + k];
        s += diff * diff;
      }
      out[i * b + j] = s;
      out[j * b + i] = s;
    }
  ImplPtr pz = z.impl();
  return make_result(
      {b, b}, std::move(out), {&z},
      [pz, b, d](const TensorImpl& y) {
        auto& g = pz->grad_buffer();
        const auto& zv = pz->data;
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < b; ++j) {
            if (i == j) continue;
            const double w = 2.0 * (y.grad[i * b + j] + y.grad[j * b + i]);
            if (w == 0.0) continue;
            for (std::size_t k = 0; k < d; ++k) g[i * d + k] += w * (zv[i * d + k] - zv[j * d + k]);
          }
      },
      "pairwise_sq_dists");
}

}  // namespace magma
