#pragma once

// Differentiable tensor operations. Every op validates shapes, checks that
// its result is finite and, when a GradTape<T> is active and any input
// requires a gradient, records its adjoint on the tape.

#include <cmath>
#include <functional>
#include <initializer_list>
#include <random>
#include <vector>

#include "mhformer/tensor.hpp"

namespace mhf {

namespace detail {

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!GradTape<T>::active()) return false;
  for (const auto* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T>
void mark_tracked(Tensor<T>& out) {
  out.impl_ptr()->requires_grad = true;
  out.impl_ptr()->leaf = false;
}

template <typename T>
void record(std::function<void()> fn) {
  GradTape<T>::active()->record(std::move(fn));
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data())
    if (!std::isfinite(v))
      throw NumericalError(std::string("non-finite value produced by ") + op);
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2)
    throw ShapeError(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
}

inline std::size_t last_dim(const Shape& s) { return s.back(); }
inline std::size_t leading(const Shape& s) { return shape_numel(s) / s.back(); }

// C[m×n] += A[m×k] · B[k×n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m×n] += A[m×k] · B[n×k]ᵀ
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// C[m×n] += A[k×m]ᵀ · B[k×n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = ap[i];
      if (av == T(0)) continue;
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// Test-only negative control: scales the GELU adjoint so gradient checks can
// be shown to fail. Never set outside tests and the gradcheck command.
inline double& gelu_adjoint_corruption() {
  static double factor = 1.0;
  return factor;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
  if (b.dim(0) != q)
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor<T> out({p, r});
  detail::gemm_nn(a.data().data(), b.data().data(), out.data().data(), p, q, r);
  detail::check_finite(out, "matmul");
  if (detail::tracking<T>({&a, &b})) {
    detail::mark_tracked(out);
    detail::record<T>([ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr(), p, q, r] {
      if (oi->grad.empty()) return;
      const T* go = oi->grad.data();
      if (ai->requires_grad)
        detail::gemm_nt(go, bi->data.data(), ai->grad_buffer().data(), p, r, q);
      if (bi->requires_grad)
        detail::gemm_tn(ai->data.data(), go, bi->grad_buffer().data(), p, q, r);
    });
  }
  return out;
}

/// x·w + b with b broadcast over rows.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank2(x, "linear");
  detail::require_rank2(w, "linear");
  const std::size_t n = x.dim(0), din = x.dim(1), dout = w.dim(1);
  if (w.dim(0) != din || b.numel() != dout)
    throw ShapeError("linear shape mismatch: x " + shape_str(x.shape()) + ", w " +
                     shape_str(w.shape()) + ", b " + shape_str(b.shape()));
  Tensor<T> out({n, dout});
  T* o = out.data().data();
  const T* bv = b.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dout; ++j) o[i * dout + j] = bv[j];
  detail::gemm_nn(x.data().data(), w.data().data(), o, n, din, dout);
  detail::check_finite(out, "linear");
  if (detail::tracking<T>({&x, &w, &b})) {
    detail::mark_tracked(out);
    detail::record<T>([xi = x.impl_ptr(), wi = w.impl_ptr(), bi = b.impl_ptr(),
                       oi = out.impl_ptr(), n, din, dout] {
      if (oi->grad.empty()) return;
      const T* go = oi->grad.data();
      if (xi->requires_grad)
        detail::gemm_nt(go, wi->data.data(), xi->grad_buffer().data(), n, dout, din);
      if (wi->requires_grad)
        detail::gemm_tn(xi->data.data(), go, wi->grad_buffer().data(), n, din, dout);
      if (bi->requires_grad) {
        T* gb = bi->grad_buffer().data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < dout; ++j) gb[j] += go[i * dout + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  detail::check_finite(out, "add");
  if (detail::tracking<T>({&a, &b})) {
    detail::mark_tracked(out);
    detail::record<T>([ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr()] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) ai->accumulate_grad(oi->grad);
      if (bi->requires_grad) bi->accumulate_grad(oi->grad);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  detail::check_finite(out, "sub");
  if (detail::tracking<T>({&a, &b})) {
    detail::mark_tracked(out);
    detail::record<T>([ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr()] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) ai->accumulate_grad(oi->grad);
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= oi->grad[i];
      }
    });
  }
  return out;
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  detail::check_finite(out, "mul");
  if (detail::tracking<T>({&a, &b})) {
    detail::mark_tracked(out);
    detail::record<T>([ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr()] {
      if (oi->grad.empty()) return;
      const auto& go = oi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * ai->data[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  detail::check_finite(out, "scale");
  if (detail::tracking<T>({&a})) {
    detail::mark_tracked(out);
    detail::record<T>([ai = a.impl_ptr(), oi = out.impl_ptr(), s] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      auto& ga = ai->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i] * s;
    });
  }
  return out;
}

/// Adds `pattern` [r×c] to every consecutive r-row block of x [k·r×c].
template <typename T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& pattern) {
  detail::require_rank2(x, "add_tiled");
  detail::require_rank2(pattern, "add_tiled");
  const std::size_t r = pattern.dim(0), c = pattern.dim(1);
  if (x.dim(1) != c || x.dim(0) % r != 0)
    throw ShapeError("add_tiled: " + shape_str(x.shape()) + " is not a stack of " +
                     shape_str(pattern.shape()));
  const std::size_t block = r * c;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] + pattern[i % block];
  detail::check_finite(out, "add_tiled");
  if (detail::tracking<T>({&x, &pattern})) {
    detail::mark_tracked(out);
    detail::record<T>([xi = x.impl_ptr(), pi = pattern.impl_ptr(), oi = out.impl_ptr(), block] {
      if (oi->grad.empty()) return;
      if (xi->requires_grad) xi->accumulate_grad(oi->grad);
      if (pi->requires_grad) {
        auto& gp = pi->grad_buffer();
        for (std::size_t i = 0; i < oi->grad.size(); ++i) gp[i % block] += oi->grad[i];
      }
    });
  }
  return out;
}

/// Sum of all elements as a {1} scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  detail::check_finite(out, "sum");
  if (detail::tracking<T>({&x})) {
    detail::mark_tracked(out);
    detail::record<T>([xi = x.impl_ptr(), oi = out.impl_ptr()] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      const T g = oi->grad[0];
      for (auto& v : xi->grad_buffer()) v += g;
    });
  }
  return out;
}

/// Row-wise softmax over the last axis with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t d = detail::last_dim(x.shape()), rows = detail::leading(x.shape());
  detail::check_finite(x, "softmax_rows input");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T* yr = out.data().data() + r * d;
    T mx = *std::max_element(xr, xr + d);
    T z = 0;
    for (std::size_t j = 0; j < d; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < d; ++j) yr[j] /= z;
  }
  if (detail::tracking<T>({&x})) {
    detail::mark_tracked(out);
    detail::record<T>([xi = x.impl_ptr(), oi = out.impl_ptr(), rows, d] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      T* gx = xi->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = oi->data.data() + r * d;
        const T* gy = oi->grad.data() + r * d;
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

/// Normalizes each row over the last axis, then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t d = detail::last_dim(x.shape()), rows = detail::leading(x.shape());
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm affine size mismatch for " + shape_str(x.shape()));
  if (!(eps > T(0))) throw ValidationError("layer_norm eps must be positive");
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel()), rstd(rows);
  const T* g = gain.data().data();
  const T* b = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mean) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * g[j] + b[j];
    }
  }
  detail::check_finite(out, "layer_norm");
  if (detail::tracking<T>({&x, &gain, &bias})) {
    detail::mark_tracked(out);
    detail::record<T>([xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr(),
                       oi = out.impl_ptr(), xhat = std::move(xhat), rstd = std::move(rstd),
                       rows, d] {
      if (oi->grad.empty()) return;
      const T* go = oi->grad.data();
      if (gi->requires_grad) {
        T* gg = gi->grad_buffer().data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += go[r * d + j] * xhat[r * d + j];
      }
      if (bi->requires_grad) {
        T* gb = bi->grad_buffer().data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += go[r * d + j];
      }
      if (xi->requires_grad) {
        T* gx = xi->grad_buffer().data();
        const T* g = gi->data.data();
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_gh = 0, mean_ghx = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T gh = go[r * d + j] * g[j];
            mean_gh += gh;
            mean_ghx += gh * xhat[r * d + j];
          }
          mean_gh /= T(d);
          mean_ghx /= T(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T gh = go[r * d + j] * g[j];
            gx[r * d + j] += rstd[r] * (gh - mean_gh - xhat[r * d + j] * mean_ghx);
          }
        }
      }
    });
  }
  return out;
}

/// Exact GELU, x·Φ(x) with Φ the standard normal CDF.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i)
    out[i] = x[i] * T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
  detail::check_finite(out, "gelu");
  if (detail::tracking<T>({&x})) {
    detail::mark_tracked(out);
    detail::record<T>([xi = x.impl_ptr(), oi = out.impl_ptr()] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      constexpr T inv_sqrt2pi = T(0.39894228040143267794);
      const T corrupt = T(detail::gelu_adjoint_corruption());
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T v = xi->data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        gx[i] += oi->grad[i] * (cdf + v * pdf) * corrupt;
      }
    });
  }
  return out;
}

/// Concatenates tensors with equal leading extents along the last axis.
template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_last of an empty list");
  Shape lead(xs[0].shape().begin(), xs[0].shape().end() - 1);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& x : xs) {
    Shape l(x.shape().begin(), x.shape().end() - 1);
    if (l != lead)
      throw ShapeError("concat_last leading extents differ: " + shape_str(xs[0].shape()) +
                       " vs " + shape_str(x.shape()));
    widths.push_back(x.shape().back());
    total += x.shape().back();
  }
  Shape os = lead;
  os.push_back(total);
  Tensor<T> out(os);
  const std::size_t rows = shape_numel(os) / total;
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::size_t w = widths[k];
    const T* src = xs[k].data().data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(src + r * w, src + (r + 1) * w, out.data().data() + r * total + off);
    off += w;
  }
  bool track = false;
  for (const auto& x : xs) track = track || detail::tracking<T>({&x});
  if (track) {
    detail::mark_tracked(out);
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> ins;
    for (const auto& x : xs) ins.push_back(x.impl_ptr());
    detail::record<T>([ins = std::move(ins), widths = std::move(widths), oi = out.impl_ptr(),
                       rows, total] {
      if (oi->grad.empty()) return;
      std::size_t off = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        const std::size_t w = widths[k];
        if (ins[k]->requires_grad) {
          T* g = ins[k]->grad_buffer().data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) g[r * w + j] += oi->grad[r * total + off + j];
        }
        off += w;
      }
    });
  }
  return out;
}

/// Columns [begin, begin+width) of the last axis.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t width) {
  const std::size_t c = detail::last_dim(x.shape()), rows = detail::leading(x.shape());
  if (width == 0 || begin + width > c)
    throw ShapeError("slice_last out of range for " + shape_str(x.shape()));
  Shape os = x.shape();
  os.back() = width;
  Tensor<T> out(os);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(x.data().data() + r * c + begin, x.data().data() + r * c + begin + width,
              out.data().data() + r * width);
  if (detail::tracking<T>({&x})) {
    detail::mark_tracked(out);
    detail::record<T>([xi = x.impl_ptr(), oi = out.impl_ptr(), rows, c, begin, width] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      T* g = xi->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < width; ++j) g[r * c + begin + j] += oi->grad[r * width + j];
    });
  }
  return out;
}

/// Splits the last axis into `parts` equal, non-overlapping chunks.
template <typename T>
std::vector<Tensor<T>> split_last(const Tensor<T>& x, std::size_t parts) {
  const std::size_t c = detail::last_dim(x.shape());
  if (parts == 0 || c % parts != 0)
    throw ShapeError("split_last: " + std::to_string(c) + " columns not divisible into " +
                     std::to_string(parts) + " parts");
  const std::size_t w = c / parts;
  std::vector<Tensor<T>> out;
  out.reserve(parts);
  for (std::size_t k = 0; k < parts; ++k) out.push_back(slice_last(x, k * w, w));
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank2(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  if (detail::tracking<T>({&x})) {
    detail::mark_tracked(out);
    detail::record<T>([xi = x.impl_ptr(), oi = out.impl_ptr(), r, c] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      T* g = xi->grad_buffer().data();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += oi->grad[j * r + i];
    });
  }
  return out;
}

/// Transposes each of `blocks` stacked r×c blocks: [blocks·r × c] → [blocks·c × r].
template <typename T>
Tensor<T> block_transpose(const Tensor<T>& x, std::size_t blocks) {
  detail::require_rank2(x, "block_transpose");
  if (blocks == 0 || x.dim(0) % blocks != 0)
    throw ShapeError("block_transpose: " + shape_str(x.shape()) + " not divisible into " +
                     std::to_string(blocks) + " blocks");
  const std::size_t r = x.dim(0) / blocks, c = x.dim(1);
  Tensor<T> out({blocks * c, r});
  for (std::size_t b = 0; b < blocks; ++b) {
    const T* src = x.data().data() + b * r * c;
    T* dst = out.data().data() + b * r * c;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  }
  if (detail::tracking<T>({&x})) {
    detail::mark_tracked(out);
    detail::record<T>([xi = x.impl_ptr(), oi = out.impl_ptr(), blocks, r, c] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      T* g = xi->grad_buffer().data();
      for (std::size_t b = 0; b < blocks; ++b) {
        const T* go = oi->grad.data() + b * r * c;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += go[j * r + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  Tensor<T> out = x.reshaped(std::move(shape));
  if (detail::tracking<T>({&x})) {
    detail::mark_tracked(out);
    detail::record<T>([xi = x.impl_ptr(), oi = out.impl_ptr()] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->accumulate_grad(oi->grad);
    });
  }
  return out;
}

/// Sum over rows of the last-axis Euclidean distance ‖a−b‖ (or its square).
/// The unsquared norm has zero subgradient where a row of a equals b.
template <typename T>
Tensor<T> row_distance_sum(const Tensor<T>& a, const Tensor<T>& b, bool squared) {
  if (a.shape() != b.shape())
    throw ShapeError("row_distance_sum shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const std::size_t k = detail::last_dim(a.shape()), rows = detail::leading(a.shape());
  std::vector<T> norms(rows);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const T d = a[r * k + j] - b[r * k + j];
      s += d * d;
    }
    norms[r] = std::sqrt(s);
    total += squared ? s : norms[r];
  }
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::check_finite(out, "row_distance_sum");
  if (detail::tracking<T>({&a, &b})) {
    detail::mark_tracked(out);
    detail::record<T>([ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr(),
                       norms = std::move(norms), rows, k, squared] {
      if (oi->grad.empty()) return;
      const T g = oi->grad[0];
      T* ga = ai->requires_grad ? ai->grad_buffer().data() : nullptr;
      T* gb = bi->requires_grad ? bi->grad_buffer().data() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        if (!squared && norms[r] == T(0)) continue;
        const T f = squared ? T(2) * g : g / norms[r];
        for (std::size_t j = 0; j < k; ++j) {
          const T d = (ai->data[r * k + j] - bi->data[r * k + j]) * f;
          if (ga) ga[r * k + j] += d;
          if (gb) gb[r * k + j] -= d;
        }
      }
    });
  }
  return out;
}

struct AttentionSpec {
  std::size_t heads = 1;
  // Tokens per sample; rows of q/k/v are stacked samples of this many tokens.
  // 0 means the whole tensor is one sample.
  std::size_t tokens = 0;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;  // required when dropout > 0
  // Receives each (sample, head) probability matrix, tokens×tokens row-major,
  // before dropout.
  std::function<void(std::size_t sample, std::size_t head, std::span<const double> probs,
                     std::size_t n)>
      probe;
};

/// Multi-head scaled dot-product attention over pre-projected q, k, v:
/// per sample and head, softmax(Q_h K_hᵀ / √d_h) V_h, heads concatenated.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionSpec& spec) {
  detail::require_rank2(q, "attention");
  if (k.shape() != q.shape() || v.shape() != q.shape())
    throw ShapeError("attention q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  const std::size_t rows = q.dim(0), d = q.dim(1), h = spec.heads;
  const std::size_t n = spec.tokens == 0 ? rows : spec.tokens;
  if (h == 0 || d % h != 0)
    throw ShapeError("attention: " + std::to_string(h) + " heads do not divide dim " +
                     std::to_string(d));
  if (rows % n != 0)
    throw ShapeError("attention: " + std::to_string(rows) + " rows are not a multiple of " +
                     std::to_string(n) + " tokens");
  if (spec.dropout < 0.0 || spec.dropout >= 1.0)
    throw ValidationError("attention dropout must lie in [0, 1)");
  const bool drop = spec.dropout > 0.0;
  if (drop && !spec.rng) throw ValidationError("attention dropout requires an rng");
  const std::size_t samples = rows / n, dh = d / h;
  const T scale = T(1) / std::sqrt(T(dh));
  const T keep_scale = drop ? T(1.0 / (1.0 - spec.dropout)) : T(1);

  const bool track = detail::tracking<T>({&q, &k, &v});
  // probs[(s*h + head)*n*n + i*n + j]; mask likewise when dropping.
  std::vector<T> probs(samples * h * n * n);
  std::vector<unsigned char> mask(drop ? probs.size() : 0, 1);
  Tensor<T> out({rows, d});
  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  T* O = out.data().data();
  std::vector<double> probe_buf(spec.probe ? n * n : 0);
  std::bernoulli_distribution keep(1.0 - spec.dropout);

  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t hd = 0; hd < h; ++hd) {
      T* P = probs.data() + (s * h + hd) * n * n;
      const std::size_t col = hd * dh;
      for (std::size_t i = 0; i < n; ++i) {
        const T* qi = Q + (s * n + i) * d + col;
        T* pi = P + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          const T* kj = K + (s * n + j) * d + col;
          T acc = 0;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          pi[j] = acc * scale;
        }
        T mx = *std::max_element(pi, pi + n);
        T z = 0;
        for (std::size_t j = 0; j < n; ++j) z += (pi[j] = std::exp(pi[j] - mx));
        for (std::size_t j = 0; j < n; ++j) pi[j] /= z;
      }
      if (spec.probe) {
        std::copy(P, P + n * n, probe_buf.begin());
        spec.probe(s, hd, probe_buf, n);
      }
      unsigned char* Mk = drop ? mask.data() + (s * h + hd) * n * n : nullptr;
      if (drop)
        for (std::size_t e = 0; e < n * n; ++e) Mk[e] = keep(*spec.rng) ? 1 : 0;
      for (std::size_t i = 0; i < n; ++i) {
        T* oi = O + (s * n + i) * d + col;
        const T* pi = P + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          T w = pi[j];
          if (drop) w = Mk[i * n + j] ? w * keep_scale : T(0);
          if (w == T(0)) continue;
          const T* vj = V + (s * n + j) * d + col;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }
  detail::check_finite(out, "attention");

  if (track) {
    detail::mark_tracked(out);
    detail::record<T>([qi = q.impl_ptr(), ki = k.impl_ptr(), vi = v.impl_ptr(),
                       oi = out.impl_ptr(), probs = std::move(probs), mask = std::move(mask),
                       samples, h, n, d, dh, scale, keep_scale, drop] {
      if (oi->grad.empty()) return;
      const T* GO = oi->grad.data();
      const T* Q = qi->data.data();
      const T* K = ki->data.data();
      const T* V = vi->data.data();
      T* GQ = qi->requires_grad ? qi->grad_buffer().data() : nullptr;
      T* GK = ki->requires_grad ? ki->grad_buffer().data() : nullptr;
      T* GV = vi->requires_grad ? vi->grad_buffer().data() : nullptr;
      std::vector<T> gp(n * n);
      for (std::size_t s = 0; s < samples; ++s) {
        for (std::size_t hd = 0; hd < h; ++hd) {
          const T* P = probs.data() + (s * h + hd) * n * n;
          const unsigned char* Mk = drop ? mask.data() + (s * h + hd) * n * n : nullptr;
          const std::size_t col = hd * dh;
          // gP = gO Vᵀ, with the dropout mask applied to route through P'.
          for (std::size_t i = 0; i < n; ++i) {
            const T* goi = GO + (s * n + i) * d + col;
            for (std::size_t j = 0; j < n; ++j) {
              const T* vj = V + (s * n + j) * d + col;
              T acc = 0;
              for (std::size_t c = 0; c < dh; ++c) acc += goi[c] * vj[c];
              if (drop) acc = Mk[i * n + j] ? acc * keep_scale : T(0);
              gp[i * n + j] = acc;
              if (GV) {
                T w = P[i * n + j];
                if (drop) w = Mk[i * n + j] ? w * keep_scale : T(0);
                T* gvj = GV + (s * n + j) * d + col;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += w * goi[c];
              }
            }
          }
          // Softmax adjoint, folded with the 1/√d_h scale.
          for (std::size_t i = 0; i < n; ++i) {
            const T* pi = P + i * n;
            T* gpi = gp.data() + i * n;
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += gpi[j] * pi[j];
            for (std::size_t j = 0; j < n; ++j) gpi[j] = pi[j] * (gpi[j] - dot) * scale;
          }
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              const T gs = gp[i * n + j];
              if (gs == T(0)) continue;
              if (GQ) {
                T* gqi = GQ + (s * n + i) * d + col;
                const T* kj = K + (s * n + j) * d + col;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += gs * kj[c];
              }
              if (GK) {
                T* gkj = GK + (s * n + j) * d + col;
                const T* qi_ = Q + (s * n + i) * d + col;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += gs * qi_[c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace mhf
