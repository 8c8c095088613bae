#include "xt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "xt/errors.hpp"

namespace xt {

using detail::grad_sink;
using detail::make_result;
using detail::promote;

namespace {

using InSpan = std::span<const std::shared_ptr<TensorImpl>>;

const std::vector<double>& vals(const std::shared_ptr<TensorImpl>& t) {
  return t->storage->values;
}

std::size_t norm_axis(std::ptrdiff_t axis, std::size_t rank) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "axis out of range");
  return static_cast<std::size_t>(axis);
}

// Returns the number of times b repeats inside a (1 for equal shapes).
std::size_t broadcast_outer(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size() && std::equal(sb.begin(), sb.end(), sa.end() - sb.size());
  if (!ok) {
    throw ContractViolation(std::string(op) + ": shapes " + shape_str(sa) + " and " +
                            shape_str(sb) + " are not broadcast-compatible");
  }
  return a.numel() / std::max<std::size_t>(b.numel(), 1);
}

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), x.dtype(), {x},
                     [df](const TensorImpl& o, InSpan in) {
                       double* g = grad_sink(*in[0]);
                       if (!g) return;
                       const auto& xv = vals(in[0]);
                       const auto& yv = o.storage->values;
                       for (std::size_t i = 0; i < xv.size(); ++i) g[i] += o.grad[i] * df(xv[i], yv[i]);
                     });
}

// Rows of a matmul operand and the per-batch extents.
struct MatmulDims {
  std::size_t batch, n, k, m;
  bool shared_b;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool tb) {
  require(a.rank() >= 2 && b.rank() >= 2, "matmul: operands need rank >= 2");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  MatmulDims d{};
  d.n = sa[sa.size() - 2];
  d.k = sa.back();
  const std::size_t bk = tb ? sb.back() : sb[sb.size() - 2];
  d.m = tb ? sb[sb.size() - 2] : sb.back();
  if (bk != d.k) {
    throw ContractViolation("matmul: inner extents differ " + shape_str(sa) + " x " + shape_str(sb));
  }
  d.batch = a.numel() / (d.n * d.k);
  d.shared_b = b.rank() == 2;
  if (!d.shared_b) {
    bool same = sb.size() == sa.size() && std::equal(sa.begin(), sa.end() - 2, sb.begin());
    if (!same) {
      throw ContractViolation("matmul: batch extents differ " + shape_str(sa) + " x " +
                              shape_str(sb));
    }
  }
  return d;
}

}  // namespace

Tensor stop_gradient(const Tensor& x) { return detail::stop_gradient_hook(x.detach()); }

Tensor reshape(const Tensor& x, Shape shape) { return detail::make_view(x, std::move(shape)); }

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const auto& s = x.shape();
  const std::size_t r = s.size();
  require(axes.size() == r, "permute: wrong number of axes");
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    require(a < r && !seen[a], "permute: axes must be a permutation");
    seen[a] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  Shape os(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    os[i] = s[axes[i]];
    stride[i] = in_stride[axes[i]];
  }
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*src)[i] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < os[d]) {
        off += stride[d];
        break;
      }
      off -= stride[d] * (os[d] - 1);
      idx[d] = 0;
    }
  }
  const auto& xv = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*src)[i]];
  return make_result(std::move(os), std::move(out), x.dtype(), {x},
                     [src](const TensorImpl& o, InSpan in) {
                       double* g = grad_sink(*in[0]);
                       if (!g) return;
                       for (std::size_t i = 0; i < src->size(); ++i) g[(*src)[i]] += o.grad[i];
                     });
}

Tensor transpose(const Tensor& x) {
  require(x.rank() >= 2, "transpose: rank must be >= 2");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t outer = broadcast_outer(a, b, "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  const std::size_t nb = bv.size();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < nb; ++j) out[o * nb + j] = av[o * nb + j] + bv[j];
  return make_result(a.shape(), std::move(out), promote({&a, &b}), {a, b},
                     [outer, nb](const TensorImpl& o, InSpan in) {
                       if (double* ga = grad_sink(*in[0]))
                         for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
                       if (double* gb = grad_sink(*in[1]))
                         for (std::size_t q = 0; q < outer; ++q)
                           for (std::size_t j = 0; j < nb; ++j) gb[j] += o.grad[q * nb + j];
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t outer = broadcast_outer(a, b, "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  const std::size_t nb = bv.size();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < nb; ++j) out[o * nb + j] = av[o * nb + j] * bv[j];
  return make_result(a.shape(), std::move(out), promote({&a, &b}), {a, b},
                     [outer, nb](const TensorImpl& o, InSpan in) {
                       const auto& av = vals(in[0]);
                       const auto& bv = vals(in[1]);
                       if (double* ga = grad_sink(*in[0]))
                         for (std::size_t q = 0; q < outer; ++q)
                           for (std::size_t j = 0; j < nb; ++j)
                             ga[q * nb + j] += o.grad[q * nb + j] * bv[j];
                       if (double* gb = grad_sink(*in[1]))
                         for (std::size_t q = 0; q < outer; ++q)
                           for (std::size_t j = 0; j < nb; ++j)
                             gb[j] += o.grad[q * nb + j] * av[q * nb + j];
                     });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  const MatmulDims d = matmul_dims(a, b, transpose_b);
  Shape os = a.shape();
  os.back() = d.m;
  const double* A = a.data().data();
  const double* B = b.data().data();
  std::vector<double> out(d.batch * d.n * d.m, 0.0);
  const std::size_t bstride = d.shared_b ? 0 : d.k * d.m;
  for (std::size_t bi = 0; bi < d.batch; ++bi) {
    const double* Bb = B + bi * bstride;
    for (std::size_t i = 0; i < d.n; ++i) {
      const double* arow = A + (bi * d.n + i) * d.k;
      double* crow = out.data() + (bi * d.n + i) * d.m;
      if (!transpose_b) {
        for (std::size_t p = 0; p < d.k; ++p) {
          const double av = arow[p];
          const double* brow = Bb + p * d.m;
          for (std::size_t j = 0; j < d.m; ++j) crow[j] += av * brow[j];
        }
      } else {
        for (std::size_t j = 0; j < d.m; ++j) {
          const double* brow = Bb + j * d.k;
          double acc = 0.0;
          for (std::size_t p = 0; p < d.k; ++p) acc += arow[p] * brow[p];
          crow[j] = acc;
        }
      }
    }
  }
  return make_result(std::move(os), std::move(out), promote({&a, &b}), {a, b},
                     [d, bstride, transpose_b](const TensorImpl& o, InSpan in) {
                       const double* A = vals(in[0]).data();
                       const double* B = vals(in[1]).data();
                       double* gA = grad_sink(*in[0]);
                       double* gB = grad_sink(*in[1]);
                       const double* G = o.grad.data();
                       for (std::size_t bi = 0; bi < d.batch; ++bi) {
                         const double* Bb = B + bi * bstride;
                         double* gBb = gB ? gB + bi * bstride : nullptr;
                         for (std::size_t i = 0; i < d.n; ++i) {
                           const std::size_t r = bi * d.n + i;
                           const double* grow = G + r * d.m;
                           const double* arow = A + r * d.k;
                           if (!transpose_b) {
                             // C = A B: dA = G B^T, dB = A^T G.
                             for (std::size_t p = 0; p < d.k; ++p) {
                               const double* brow = Bb + p * d.m;
                               if (gA) {
                                 double acc = 0.0;
                                 for (std::size_t j = 0; j < d.m; ++j) acc += grow[j] * brow[j];
                                 gA[r * d.k + p] += acc;
                               }
                               if (gBb) {
                                 const double av = arow[p];
                                 double* gbrow = gBb + p * d.m;
                                 for (std::size_t j = 0; j < d.m; ++j) gbrow[j] += av * grow[j];
                               }
                             }
                           } else {
                             // C = A B^T: dA = G B, dB = G^T A.
                             for (std::size_t j = 0; j < d.m; ++j) {
                               const double gv = grow[j];
                               const double* brow = Bb + j * d.k;
                               if (gA)
                                 for (std::size_t p = 0; p < d.k; ++p) gA[r * d.k + p] += gv * brow[p];
                               if (gBb) {
                                 double* gbrow = gBb + j * d.k;
                                 for (std::size_t p = 0; p < d.k; ++p) gbrow[p] += gv * arow[p];
                               }
                             }
                           }
                         }
                       }
                     });
}

Tensor softmax(const Tensor& x, std::ptrdiff_t axis_in) {
  const auto& s = x.shape();
  const std::size_t axis = norm_axis(axis_in, s.size());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) {
        const double v = xv[base + j * inner];
        if (std::isnan(v)) throw InvalidNumerics("softmax: NaN input");
        mx = std::max(mx, v);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  return make_result(s, std::move(out), x.dtype(), {x},
                     [outer, inner, len](const TensorImpl& o, InSpan in) {
                       double* g = grad_sink(*in[0]);
                       if (!g) return;
                       const auto& y = o.storage->values;
                       for (std::size_t a = 0; a < outer; ++a) {
                         for (std::size_t b = 0; b < inner; ++b) {
                           const std::size_t base = a * len * inner + b;
                           double dot = 0.0;
                           for (std::size_t j = 0; j < len; ++j)
                             dot += o.grad[base + j * inner] * y[base + j * inner];
                           for (std::size_t j = 0; j < len; ++j) {
                             const std::size_t i = base + j * inner;
                             g[i] += y[i] * (o.grad[i] - dot);
                           }
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.dim(-1);
  require(gamma.numel() == d && beta.numel() == d, "layer_norm: parameter width mismatch");
  const std::size_t rows = x.numel() / d;
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  std::vector<double> out(xv.size());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), promote({&x, &gamma, &beta}), {x, gamma, beta},
                     [d, rows, xhat, inv_sigma](const TensorImpl& o, InSpan in) {
                       double* gx = grad_sink(*in[0]);
                       double* gg = grad_sink(*in[1]);
                       double* gb = grad_sink(*in[2]);
                       const auto& gamma = vals(in[1]);
                       std::vector<double> dh(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = o.grad.data() + r * d;
                         const double* h = xhat->data() + r * d;
                         if (gg)
                           for (std::size_t j = 0; j < d; ++j) gg[j] += g[j] * h[j];
                         if (gb)
                           for (std::size_t j = 0; j < d; ++j) gb[j] += g[j];
                         if (!gx) continue;
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           dh[j] = g[j] * gamma[j];
                           m1 += dh[j];
                           m2 += dh[j] * h[j];
                         }
                         m1 /= static_cast<double>(d);
                         m2 /= static_cast<double>(d);
                         const double is = (*inv_sigma)[r];
                         for (std::size_t j = 0; j < d; ++j)
                           gx[r * d + j] += is * (dh[j] - m1 - h[j] * m2);
                       }
                     });
}

Tensor mean(const Tensor& x, std::ptrdiff_t axis_in) {
  const auto& s = x.shape();
  const std::size_t axis = norm_axis(axis_in, s.size());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  require(len > 0, "mean: empty axis");
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) os.push_back(s[i]);
  const auto& xv = x.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t b = 0; b < inner; ++b) out[o * inner + b] += xv[(o * len + j) * inner + b];
  const double inv = 1.0 / static_cast<double>(len);
  for (auto& v : out) v *= inv;
  return make_result(std::move(os), std::move(out), x.dtype(), {x},
                     [outer, inner, len, inv](const TensorImpl& o, InSpan in) {
                       double* g = grad_sink(*in[0]);
                       if (!g) return;
                       for (std::size_t a = 0; a < outer; ++a)
                         for (std::size_t j = 0; j < len; ++j)
                           for (std::size_t b = 0; b < inner; ++b)
                             g[(a * len + j) * inner + b] += o.grad[a * inner + b] * inv;
                     });
}

Tensor masked_mean_tokens(const Tensor& x, std::span<const std::uint8_t> keep) {
  require(x.rank() == 3, "masked_mean_tokens: expected [B, T, D]");
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  require(keep.size() == T, "masked_mean_tokens: mask length mismatch");
  auto kept = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t t = 0; t < T; ++t)
    if (keep[t]) kept->push_back(t);
  require(!kept->empty(), "masked_mean_tokens: every token is masked");
  const double inv = 1.0 / static_cast<double>(kept->size());
  const auto& xv = x.data();
  std::vector<double> out(B * D, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (auto t : *kept)
      for (std::size_t j = 0; j < D; ++j) out[b * D + j] += xv[(b * T + t) * D + j];
  for (auto& v : out) v *= inv;
  return make_result({B, D}, std::move(out), x.dtype(), {x},
                     [B, T, D, kept, inv](const TensorImpl& o, InSpan in) {
                       double* g = grad_sink(*in[0]);
                       if (!g) return;
                       for (std::size_t b = 0; b < B; ++b)
                         for (auto t : *kept)
                           for (std::size_t j = 0; j < D; ++j)
                             g[(b * T + t) * D + j] += o.grad[b * D + j] * inv;
                     });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_result({}, {acc}, x.dtype(), {x}, [](const TensorImpl& o, InSpan in) {
    double* g = grad_sink(*in[0]);
    if (!g) return;
    const std::size_t n = shape_numel(in[0]->shape);
    for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[0];
  });
}

Tensor concat(const std::vector<Tensor>& xs, std::ptrdiff_t axis_in) {
  require(!xs.empty(), "concat: no inputs");
  const Shape& s0 = xs[0].shape();
  const std::size_t axis = norm_axis(axis_in, s0.size());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  auto lens = std::make_shared<std::vector<std::size_t>>();
  std::size_t total = 0;
  DType dt = DType::F64;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) {
      throw ContractViolation("concat: incompatible shapes " + shape_str(s0) + " and " +
                              shape_str(s));
    }
    lens->push_back(s[axis]);
    total += s[axis];
    if (t.dtype() == DType::F32) dt = DType::F32;
  }
  Shape os = s0;
  os[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& v = xs[k].data();
    const std::size_t blk = (*lens)[k] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.data() + o * blk, blk, out.data() + o * total * inner + off * inner);
    off += (*lens)[k];
  }
  return make_result(std::move(os), std::move(out), dt, xs,
                     [outer, inner, total, lens](const TensorImpl& o, InSpan in) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < in.size(); ++k) {
                         const std::size_t blk = (*lens)[k] * inner;
                         if (double* g = grad_sink(*in[k])) {
                           for (std::size_t a = 0; a < outer; ++a) {
                             const double* src = o.grad.data() + a * total * inner + off * inner;
                             for (std::size_t j = 0; j < blk; ++j) g[a * blk + j] += src[j];
                           }
                         }
                         off += (*lens)[k];
                       }
                     });
}

Tensor slice(const Tensor& x, std::ptrdiff_t axis_in, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  const std::size_t axis = norm_axis(axis_in, s.size());
  require(begin <= end && end <= s[axis], "slice: range out of bounds");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis], cnt = end - begin;
  Shape os = s;
  os[axis] = cnt;
  const auto& xv = x.data();
  std::vector<double> out(outer * cnt * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.data() + (o * len + begin) * inner, cnt * inner,
                out.data() + o * cnt * inner);
  return make_result(std::move(os), std::move(out), x.dtype(), {x},
                     [outer, inner, len, begin, cnt](const TensorImpl& o, InSpan in) {
                       double* g = grad_sink(*in[0]);
                       if (!g) return;
                       for (std::size_t a = 0; a < outer; ++a)
                         for (std::size_t j = 0; j < cnt * inner; ++j)
                           g[(a * len + begin) * inner + j] += o.grad[a * cnt * inner + j];
                     });
}

Tensor gather_rows(const Tensor& x, std::size_t w,
                   std::shared_ptr<const std::vector<std::ptrdiff_t>> rows, Shape out_shape) {
  require(w > 0 && x.numel() % w == 0, "gather_rows: row width does not divide input");
  require(shape_numel(out_shape) == rows->size() * w, "gather_rows: output shape mismatch");
  const auto nrows = static_cast<std::ptrdiff_t>(x.numel() / w);
  const auto& xv = x.data();
  std::vector<double> out(rows->size() * w, 0.0);
  for (std::size_t i = 0; i < rows->size(); ++i) {
    const auto r = (*rows)[i];
    if (r < 0) continue;
    require(r < nrows, "gather_rows: row index out of range");
    std::copy_n(xv.data() + static_cast<std::size_t>(r) * w, w, out.data() + i * w);
  }
  return make_result(std::move(out_shape), std::move(out), x.dtype(), {x},
                     [w, rows](const TensorImpl& o, InSpan in) {
                       double* g = grad_sink(*in[0]);
                       if (!g) return;
                       for (std::size_t i = 0; i < rows->size(); ++i) {
                         const auto r = (*rows)[i];
                         if (r < 0) continue;
                         double* dst = g + static_cast<std::size_t>(r) * w;
                         const double* src = o.grad.data() + i * w;
                         for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
                       }
                     });
}

Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::ptrdiff_t>> index,
              Shape out_shape) {
  require(shape_numel(out_shape) == index->size(), "gather: output shape mismatch");
  const auto n = static_cast<std::ptrdiff_t>(x.numel());
  const auto& xv = x.data();
  std::vector<double> out(index->size(), 0.0);
  for (std::size_t i = 0; i < index->size(); ++i) {
    const auto s = (*index)[i];
    if (s < 0) continue;
    require(s < n, "gather: index out of range");
    out[i] = xv[static_cast<std::size_t>(s)];
  }
  return make_result(std::move(out_shape), std::move(out), x.dtype(), {x},
                     [index](const TensorImpl& o, InSpan in) {
                       double* g = grad_sink(*in[0]);
                       if (!g) return;
                       for (std::size_t i = 0; i < index->size(); ++i) {
                         const auto s = (*index)[i];
                         if (s >= 0) g[static_cast<std::size_t>(s)] += o.grad[i];
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require(logits.rank() == 2, "cross_entropy: logits must be [B, K]");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  require(labels.size() == B, "cross_entropy: label count mismatch");
  const auto& lv = logits.data();
  auto probs = std::make_shared<std::vector<double>>(B * K);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    require(y >= 0 && static_cast<std::size_t>(y) < K, "cross_entropy: label out of range");
    const double* l = lv.data() + b * K;
    const double mx = *std::max_element(l, l + K);
    double z = 0.0;
    for (std::size_t j = 0; j < K; ++j) z += std::exp(l[j] - mx);
    for (std::size_t j = 0; j < K; ++j) (*probs)[b * K + j] = std::exp(l[j] - mx) / z;
    loss += (mx + std::log(z)) - l[y];
  }
  loss /= static_cast<double>(B);
  return make_result({}, {loss}, logits.dtype(), {logits},
                     [B, K, probs, lab](const TensorImpl& o, InSpan in) {
                       double* g = grad_sink(*in[0]);
                       if (!g) return;
                       const double s = o.grad[0] / static_cast<double>(B);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t j = 0; j < K; ++j) {
                           const double t = (static_cast<int>(j) == (*lab)[b]) ? 1.0 : 0.0;
                           g[b * K + j] += s * ((*probs)[b * K + j] - t);
                         }
                     });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 double scale_factor) {
  require(q.rank() >= 2 && k.rank() == q.rank() && v.rank() == q.rank(),
          "attention: q, k, v must share rank >= 2");
  const std::size_t D = q.dim(-1);
  require(k.dim(-1) == D && v.dim(-1) == D, "attention: width mismatch");
  require(heads >= 1 && D % heads == 0, "attention: heads must divide width");
  const std::size_t Tq = q.dim(-2), Tk = k.dim(-2);
  require(v.dim(-2) == Tk, "attention: key/value length mismatch");
  require(Tk >= 1, "attention: empty key set");
  const std::size_t B = q.numel() / (Tq * D);
  require(k.numel() == B * Tk * D, "attention: batch extents differ");
  const std::size_t dh = D / heads;
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  // Probabilities live in a ledger-counted tensor: they are the attention
  // activation whose size the memory probes measure.
  Tensor probs = Tensor::zeros({B, heads, Tq, Tk});
  double* P = probs.mutable_data().data();
  std::vector<double> out(B * Tq * D, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < Tq; ++i) {
        const double* qi = Q + (b * Tq + i) * D + h * dh;
        double* pi = P + ((b * heads + h) * Tq + i) * Tk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < Tk; ++j) {
          const double* kj = K + (b * Tk + j) * D + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= scale_factor;
          if (std::isnan(s)) throw InvalidNumerics("attention: NaN score");
          pi[j] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < Tk; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          z += pi[j];
        }
        const double iz = 1.0 / z;
        double* oi = out.data() + (b * Tq + i) * D + h * dh;
        for (std::size_t j = 0; j < Tk; ++j) {
          pi[j] *= iz;
          const double* vj = V + (b * Tk + j) * D + h * dh;
          const double p = pi[j];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }
  const bool record = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  Tensor saved = record ? probs : Tensor();
  return make_result(
      q.shape(), std::move(out), promote({&q, &k, &v}), {q, k, v},
      [saved, B, heads, Tq, Tk, D, dh, scale_factor](const TensorImpl& o, InSpan in) {
        const double* Q = vals(in[0]).data();
        const double* K = vals(in[1]).data();
        const double* V = vals(in[2]).data();
        double* gQ = grad_sink(*in[0]);
        double* gK = grad_sink(*in[1]);
        double* gV = grad_sink(*in[2]);
        const double* P = saved.data().data();
        const double* G = o.grad.data();
        std::vector<double> dp(Tk);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < Tq; ++i) {
              const double* pi = P + ((b * heads + h) * Tq + i) * Tk;
              const double* gi = G + (b * Tq + i) * D + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < Tk; ++j) {
                const double* vj = V + (b * Tk + j) * D + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                dp[j] = s;
                dot += s * pi[j];
                if (gV) {
                  double* gvj = gV + (b * Tk + j) * D + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += pi[j] * gi[c];
                }
              }
              const double* qi = Q + (b * Tq + i) * D + h * dh;
              double* gqi = gQ ? gQ + (b * Tq + i) * D + h * dh : nullptr;
              for (std::size_t j = 0; j < Tk; ++j) {
                const double ds = pi[j] * (dp[j] - dot) * scale_factor;
                if (ds == 0.0) continue;
                const double* kj = K + (b * Tk + j) * D + h * dh;
                if (gqi)
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                if (gK) {
                  double* gkj = gK + (b * Tk + j) * D + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

void require_finite(const Tensor& x, const char* what) {
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw InvalidNumerics(std::string(what) + ": non-finite value");
  }
}

}  // namespace xt
