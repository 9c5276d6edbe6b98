#pragma once

#include <cblas.h>

#include <cmath>
#include <cstring>
#include <optional>

#include "cldyn/tensor.hpp"

namespace cldyn {

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode& self) {
    for (auto& p : self.parents) p->ensure_grad();
    auto& ga = self.parents[0]->grad;
    auto& gb = self.parents[1]->grad;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      ga[i] += self.grad[i];
      gb[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode& self) {
    for (auto& p : self.parents) p->ensure_grad();
    auto& ga = self.parents[0]->grad;
    auto& gb = self.parents[1]->grad;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      ga[i] += self.grad[i];
      gb[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode& self) {
    for (auto& p : self.parents) p->ensure_grad();
    auto& ga = self.parents[0]->grad;
    auto& gb = self.parents[1]->grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      ga[i] += self.grad[i] * bv[i];
      gb[i] += self.grad[i] * av[i];
    }
  });
}

/// Elementwise max; ties route the (sub)gradient to the first operand.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "maximum");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] >= bv[i] ? av[i] : bv[i];
  return detail::make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode& self) {
    for (auto& p : self.parents) p->ensure_grad();
    auto& ga = self.parents[0]->grad;
    auto& gb = self.parents[1]->grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (av[i] >= bv[i]) ga[i] += self.grad[i];
      else gb[i] += self.grad[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
  return detail::make_op(a.shape(), std::move(out), {a.node()}, [c](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& ga = self.parents[0]->grad;
    for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * c;
  });
}

/// Copy of a's value as a constant leaf; cuts the record.
inline Tensor detach(const Tensor& a) {
  return Tensor::from_data(a.shape(), a.data(), false);
}

inline Tensor leaky_relu(const Tensor& a, double alpha = 0.2) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : alpha * av[i];
  return detail::make_op(a.shape(), std::move(out), {a.node()}, [alpha](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& ga = self.parents[0]->grad;
    const auto& av = self.parents[0]->value;
    for (size_t i = 0; i < self.grad.size(); ++i)
      ga[i] += self.grad[i] * (av[i] > 0.0 ? 1.0 : alpha);
  });
}

inline Tensor relu(const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return detail::make_op(a.shape(), std::move(out), {a.node()}, [](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& ga = self.parents[0]->grad;
    const auto& av = self.parents[0]->value;
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (av[i] > 0.0) ga[i] += self.grad[i];
  });
}

inline Tensor sigmoid(const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) {
    double x = av[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return detail::make_op(a.shape(), std::move(out), {a.node()}, [](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& ga = self.parents[0]->grad;
    const auto& y = self.value;
    for (size_t i = 0; i < self.grad.size(); ++i)
      ga[i] += self.grad[i] * y[i] * (1.0 - y[i]);
  });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_op(Shape{}, {s}, {a.node()}, [](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& ga = self.parents[0]->grad;
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_op(Shape{}, {s / n}, {a.node()}, [n](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& ga = self.parents[0]->grad;
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[0] / n;
  });
}

/// Mean absolute difference. Subgradient of |.| at 0 is 0.
inline Tensor l1_distance(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "l1_distance");
  const auto& av = a.data();
  const auto& bv = b.data();
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
  return detail::make_op(Shape{}, {s / n}, {a.node(), b.node()}, [n](TensorNode& self) {
    for (auto& p : self.parents) p->ensure_grad();
    auto& ga = self.parents[0]->grad;
    auto& gb = self.parents[1]->grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const double g = self.grad[0] / n;
    for (size_t i = 0; i < av.size(); ++i) {
      double d = av[i] - bv[i];
      double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      ga[i] += g * sg;
      gb[i] -= g * sg;
    }
  });
}

inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  detail::check_same_shape(pred, target, "mse_loss");
  const auto& pv = pred.data();
  const auto& tv = target.data();
  const double n = static_cast<double>(pv.size());
  double s = 0.0;
  for (size_t i = 0; i < pv.size(); ++i) {
    double d = pv[i] - tv[i];
    s += d * d;
  }
  return detail::make_op(Shape{}, {s / n}, {pred.node(), target.node()}, [n](TensorNode& self) {
    for (auto& p : self.parents) p->ensure_grad();
    auto& gp = self.parents[0]->grad;
    auto& gt = self.parents[1]->grad;
    const auto& pv = self.parents[0]->value;
    const auto& tv = self.parents[1]->value;
    const double g = self.grad[0] * 2.0 / n;
    for (size_t i = 0; i < pv.size(); ++i) {
      double d = pv[i] - tv[i];
      gp[i] += g * d;
      gt[i] -= g * d;
    }
  });
}

/// Mean binary cross-entropy, predictions clamped to [eps, 1-eps].
/// No gradient through clamped elements.
inline Tensor bce_loss(const Tensor& pred, const Tensor& target, double eps = 1e-7) {
  detail::check_same_shape(pred, target, "bce_loss");
  const auto& pv = pred.data();
  const auto& tv = target.data();
  const double n = static_cast<double>(pv.size());
  double s = 0.0;
  for (size_t i = 0; i < pv.size(); ++i) {
    double p = std::min(std::max(pv[i], eps), 1.0 - eps);
    s -= tv[i] * std::log(p) + (1.0 - tv[i]) * std::log(1.0 - p);
  }
  return detail::make_op(Shape{}, {s / n}, {pred.node(), target.node()}, [n, eps](TensorNode& self) {
    for (auto& p : self.parents) p->ensure_grad();
    auto& gp = self.parents[0]->grad;
    auto& gt = self.parents[1]->grad;
    const auto& pv = self.parents[0]->value;
    const auto& tv = self.parents[1]->value;
    const double g = self.grad[0] / n;
    for (size_t i = 0; i < pv.size(); ++i) {
      double p = std::min(std::max(pv[i], eps), 1.0 - eps);
      if (pv[i] > eps && pv[i] < 1.0 - eps)
        gp[i] += g * (-tv[i] / p + (1.0 - tv[i]) / (1.0 - p));
      gt[i] += g * (std::log(1.0 - p) - std::log(p));
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra

/// y = W^T x + b with W of shape (n, m): y[j] = sum_i W[i,j] x[i] + b[j].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.shape().rank != 1 || w.shape().rank != 2 || b.shape().rank != 1)
    throw ShapeError("linear expects vector, matrix, vector");
  const long n = x.shape()[0], m = w.shape()[1];
  if (w.shape()[0] != n || b.shape()[0] != m)
    throw ShapeError("linear: x" + x.shape().str() + " W" + w.shape().str() + " b" + b.shape().str());
  const auto& xv = x.data();
  const auto& wv = w.data();
  const auto& bv = b.data();
  std::vector<double> out(static_cast<size_t>(m));
  for (long j = 0; j < m; ++j) {
    double acc = bv[static_cast<size_t>(j)];
    for (long i = 0; i < n; ++i) acc += wv[static_cast<size_t>(i * m + j)] * xv[static_cast<size_t>(i)];
    out[static_cast<size_t>(j)] = acc;
  }
  return detail::make_op(Shape{m}, std::move(out), {x.node(), w.node(), b.node()},
                         [n, m](TensorNode& self) {
    for (auto& p : self.parents) p->ensure_grad();
    auto& gx = self.parents[0]->grad;
    auto& gw = self.parents[1]->grad;
    auto& gb = self.parents[2]->grad;
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    const auto& gy = self.grad;
    for (long j = 0; j < m; ++j) gb[static_cast<size_t>(j)] += gy[static_cast<size_t>(j)];
    for (long i = 0; i < n; ++i) {
      double acc = 0.0;
      for (long j = 0; j < m; ++j) {
        acc += wv[static_cast<size_t>(i * m + j)] * gy[static_cast<size_t>(j)];
        gw[static_cast<size_t>(i * m + j)] += xv[static_cast<size_t>(i)] * gy[static_cast<size_t>(j)];
      }
      gx[static_cast<size_t>(i)] += acc;
    }
  });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().rank != 2 || b.shape().rank != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: " + a.shape().str() + " x " + b.shape().str());
  const long p = a.shape()[0], q = a.shape()[1], r = b.shape()[1];
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(static_cast<size_t>(p * r), 0.0);
  for (long i = 0; i < p; ++i)
    for (long k = 0; k < q; ++k) {
      double aik = av[static_cast<size_t>(i * q + k)];
      for (long j = 0; j < r; ++j)
        out[static_cast<size_t>(i * r + j)] += aik * bv[static_cast<size_t>(k * r + j)];
    }
  return detail::make_op(Shape{p, r}, std::move(out), {a.node(), b.node()},
                         [p, q, r](TensorNode& self) {
    for (auto& par : self.parents) par->ensure_grad();
    auto& ga = self.parents[0]->grad;
    auto& gb = self.parents[1]->grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const auto& gc = self.grad;
    for (long i = 0; i < p; ++i)
      for (long k = 0; k < q; ++k) {
        double acc = 0.0;
        for (long j = 0; j < r; ++j) {
          acc += gc[static_cast<size_t>(i * r + j)] * bv[static_cast<size_t>(k * r + j)];
          gb[static_cast<size_t>(k * r + j)] += av[static_cast<size_t>(i * q + k)] * gc[static_cast<size_t>(i * r + j)];
        }
        ga[static_cast<size_t>(i * q + k)] += acc;
      }
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.shape().rank != 2) throw ShapeError("transpose expects rank-2, got " + a.shape().str());
  const long r = a.shape()[0], c = a.shape()[1];
  const auto& av = a.data();
  std::vector<double> out(static_cast<size_t>(r * c));
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j)
      out[static_cast<size_t>(j * r + i)] = av[static_cast<size_t>(i * c + j)];
  return detail::make_op(Shape{c, r}, std::move(out), {a.node()}, [r, c](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& ga = self.parents[0]->grad;
    for (long i = 0; i < r; ++i)
      for (long j = 0; j < c; ++j)
        ga[static_cast<size_t>(i * c + j)] += self.grad[static_cast<size_t>(j * r + i)];
  });
}

inline Tensor reshape(const Tensor& a, const Shape& s) {
  if (s.numel() != a.numel())
    throw ShapeError("reshape " + a.shape().str() + " -> " + s.str());
  return detail::make_op(s, a.data(), {a.node()}, [](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& ga = self.parents[0]->grad;
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

/// Row i of a rank-2 tensor as a vector; the gradient routes back into
/// that row only.
inline Tensor select_row(const Tensor& m, long i) {
  if (m.shape().rank != 2) throw ShapeError("select_row expects rank-2, got " + m.shape().str());
  const long rows = m.shape()[0], cols = m.shape()[1];
  if (i < 0 || i >= rows) throw ShapeError("select_row index out of range");
  const auto& mv = m.data();
  std::vector<double> out(mv.begin() + i * cols, mv.begin() + (i + 1) * cols);
  return detail::make_op(Shape{cols}, std::move(out), {m.node()}, [i, cols](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& gm = self.parents[0]->grad;
    for (long j = 0; j < cols; ++j) gm[static_cast<size_t>(i * cols + j)] += self.grad[static_cast<size_t>(j)];
  });
}

// ---------------------------------------------------------------------------
// softmax / cosine

/// Softmax along `axis` of a vector (axis 0) or matrix (axis 0 or 1),
/// stabilized by max subtraction. Slices sum to 1.
inline Tensor softmax(const Tensor& x, int axis = 0) {
  const Shape& s = x.shape();
  if (s.rank != 1 && s.rank != 2) throw ShapeError("softmax expects rank 1 or 2");
  if (axis < 0 || axis >= s.rank) throw ShapeError("softmax axis out of range");
  const long rows = s.rank == 2 ? s[0] : 1;
  const long cols = s.rank == 2 ? s[1] : s[0];
  // slice iteration: axis 1 (or rank-1) walks rows, axis 0 walks columns
  const bool over_rows = (s.rank == 1) || (axis == 1);
  const long nslices = over_rows ? rows : cols;
  const long slice_len = over_rows ? cols : rows;
  const long stride = over_rows ? 1 : cols;
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (long sl = 0; sl < nslices; ++sl) {
    const long base = over_rows ? sl * cols : sl;
    double mx = -std::numeric_limits<double>::infinity();
    for (long i = 0; i < slice_len; ++i) mx = std::max(mx, xv[static_cast<size_t>(base + i * stride)]);
    double z = 0.0;
    for (long i = 0; i < slice_len; ++i) {
      double e = std::exp(xv[static_cast<size_t>(base + i * stride)] - mx);
      out[static_cast<size_t>(base + i * stride)] = e;
      z += e;
    }
    for (long i = 0; i < slice_len; ++i) out[static_cast<size_t>(base + i * stride)] /= z;
  }
  return detail::make_op(s, std::move(out), {x.node()},
                         [nslices, slice_len, stride, over_rows, cols](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& gx = self.parents[0]->grad;
    const auto& y = self.value;
    const auto& gy = self.grad;
    for (long sl = 0; sl < nslices; ++sl) {
      const long base = over_rows ? sl * cols : sl;
      double dot = 0.0;
      for (long i = 0; i < slice_len; ++i) {
        size_t idx = static_cast<size_t>(base + i * stride);
        dot += gy[idx] * y[idx];
      }
      for (long i = 0; i < slice_len; ++i) {
        size_t idx = static_cast<size_t>(base + i * stride);
        gx[idx] += y[idx] * (gy[idx] - dot);
      }
    }
  });
}

/// <a,b> / (|a||b| + eps). The eps keeps zero vectors finite (score ~ 0).
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-12) {
  if (a.shape().rank != 1 || b.shape().rank != 1 || a.numel() != b.numel())
    throw ShapeError("cosine_similarity: " + a.shape().str() + " vs " + b.shape().str());
  const auto& av = a.data();
  const auto& bv = b.data();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    dot += av[i] * bv[i];
    na2 += av[i] * av[i];
    nb2 += bv[i] * bv[i];
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const double denom = na * nb + eps;
  return detail::make_op(Shape{}, {dot / denom}, {a.node(), b.node()},
                         [dot, na, nb, denom](TensorNode& self) {
    for (auto& p : self.parents) p->ensure_grad();
    auto& ga = self.parents[0]->grad;
    auto& gb = self.parents[1]->grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const double g = self.grad[0];
    const double inv_na = na > 0.0 ? 1.0 / na : 0.0;
    const double inv_nb = nb > 0.0 ? 1.0 / nb : 0.0;
    const double d2 = denom * denom;
    for (size_t i = 0; i < av.size(); ++i) {
      ga[i] += g * (bv[i] / denom - dot * nb * av[i] * inv_na / d2);
      gb[i] += g * (av[i] / denom - dot * na * bv[i] * inv_nb / d2);
    }
  });
}

// ---------------------------------------------------------------------------
// map ops (C x H x W)

namespace detail {
inline void check_map(const Tensor& t, const char* op) {
  if (t.shape().rank != 3) throw ShapeError(std::string(op) + " expects C x H x W, got " + t.shape().str());
}
inline void check_conv_config(long k, long dilation) {
  if (k != 1 && k != 3) throw ShapeError("kernel size must be 1 or 3, got " + std::to_string(k));
  if (dilation < 1 || dilation > 3) throw ShapeError("dilation must be in {1,2,3}");
  if (k == 1 && dilation != 1) throw ShapeError("dilation must be 1 for 1x1 kernels");
}

// Large convolutions go through im2col + dgemm; small shapes keep the direct
// loops whose per-output summation order the nested-loop oracle reproduces
// bitwise.
inline bool conv_uses_gemm(long macs) { return macs >= (1L << 21); }

inline void blas_single_thread() {
  static const bool done = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}

// cols is (ci*k*k) x (h*w), row (cidx, ky, kx), column (y, x); zero padding.
inline void im2col(const double* in, long ci, long h, long w, long k, long dil,
                   std::vector<double>& cols) {
  const long c = k / 2;
  cols.assign(static_cast<size_t>(ci * k * k * h * w), 0.0);
  for (long cidx = 0; cidx < ci; ++cidx)
    for (long ky = 0; ky < k; ++ky)
      for (long kx = 0; kx < k; ++kx) {
        const long dy = dil * (ky - c), dx = dil * (kx - c);
        const long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
        const long x0 = std::max(0L, -dx), x1 = std::min(w, w - dx);
        double* dst = cols.data() + ((cidx * k + ky) * k + kx) * h * w;
        for (long y = y0; y < y1; ++y)
          std::memcpy(dst + y * w + x0, in + (cidx * h + y + dy) * w + dx + x0,
                      static_cast<size_t>(x1 - x0) * sizeof(double));
      }
}

inline void col2im_add(const double* cols, long ci, long h, long w, long k, long dil,
                       double* out) {
  const long c = k / 2;
  for (long cidx = 0; cidx < ci; ++cidx)
    for (long ky = 0; ky < k; ++ky)
      for (long kx = 0; kx < k; ++kx) {
        const long dy = dil * (ky - c), dx = dil * (kx - c);
        const long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
        const long x0 = std::max(0L, -dx), x1 = std::min(w, w - dx);
        const double* src = cols + ((cidx * k + ky) * k + kx) * h * w;
        for (long y = y0; y < y1; ++y) {
          double* dst = out + (cidx * h + y + dy) * w + dx;
          const double* s = src + y * w;
          for (long x = x0; x < x1; ++x) dst[x] += s[x];
        }
      }
}
}  // namespace detail

/// Cross-correlation with zero "same" padding. Per-output summation runs
/// input-channel -> kernel-row -> kernel-column so a nested-loop oracle with
/// the same order matches bitwise.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, long dilation,
                     const std::optional<Tensor>& bias = std::nullopt) {
  detail::check_map(input, "conv2d");
  if (kernel.shape().rank != 4) throw ShapeError("conv2d kernel must be Cout x Cin x k x k");
  const long ci = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const long co = kernel.shape()[0], kci = kernel.shape()[1], k = kernel.shape()[2];
  if (kernel.shape()[3] != k) throw ShapeError("conv2d kernel must be square");
  detail::check_conv_config(k, dilation);
  if (kci != ci)
    throw ShapeError("conv2d: kernel Cin " + std::to_string(kci) + " != input channels " + std::to_string(ci));
  if (bias && (bias->shape().rank != 1 || (*bias).shape()[0] != co))
    throw ShapeError("conv2d bias must be a vector of length Cout");

  const long c = k / 2;
  const long macs = co * ci * k * k * h * w;
  const auto& in = input.data();
  const auto& kv = kernel.data();
  std::vector<double> out(static_cast<size_t>(co * h * w), 0.0);
  if (detail::conv_uses_gemm(macs)) {
    detail::blas_single_thread();
    std::vector<double> cols;
    detail::im2col(in.data(), ci, h, w, k, dilation, cols);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(co),
                static_cast<int>(h * w), static_cast<int>(ci * k * k), 1.0, kv.data(),
                static_cast<int>(ci * k * k), cols.data(), static_cast<int>(h * w), 0.0,
                out.data(), static_cast<int>(h * w));
    if (bias) {
      const auto& bv = bias->data();
      for (long o = 0; o < co; ++o) {
        double* p = out.data() + o * h * w;
        const double b = bv[static_cast<size_t>(o)];
        for (long i = 0; i < h * w; ++i) p[i] += b;
      }
    }
  } else {
    if (bias) {
      const auto& bv = bias->data();
      for (long o = 0; o < co; ++o)
        std::fill(out.begin() + o * h * w, out.begin() + (o + 1) * h * w, bv[static_cast<size_t>(o)]);
    }
    for (long o = 0; o < co; ++o)
      for (long cidx = 0; cidx < ci; ++cidx)
        for (long ky = 0; ky < k; ++ky)
          for (long kx = 0; kx < k; ++kx) {
            const double wv = kv[static_cast<size_t>(((o * ci + cidx) * k + ky) * k + kx)];
            const long dy = dilation * (ky - c), dx = dilation * (kx - c);
            const long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
            const long x0 = std::max(0L, -dx), x1 = std::min(w, w - dx);
            for (long y = y0; y < y1; ++y) {
              const double* inr = in.data() + (cidx * h + y + dy) * w + dx;
              double* outr = out.data() + (o * h + y) * w;
              for (long x = x0; x < x1; ++x) outr[x] += wv * inr[x];
            }
          }
  }

  std::vector<NodePtr> parents{input.node(), kernel.node()};
  if (bias) parents.push_back(bias->node());
  return detail::make_op(Shape{co, h, w}, std::move(out), std::move(parents),
                         [ci, h, w, co, k, c, dilation, macs](TensorNode& self) {
    TensorNode* pin = self.parents[0].get();
    TensorNode* pk = self.parents[1].get();
    TensorNode* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    const auto& gy = self.grad;
    if (pb && pb->needs_grad) {
      pb->ensure_grad();
      for (long o = 0; o < co; ++o) {
        double acc = 0.0;
        const double* gr = gy.data() + o * h * w;
        for (long i = 0; i < h * w; ++i) acc += gr[i];
        pb->grad[static_cast<size_t>(o)] += acc;
      }
    }
    const bool need_in = pin->needs_grad, need_k = pk->needs_grad;
    if (need_in) pin->ensure_grad();
    if (need_k) pk->ensure_grad();
    if (!need_in && !need_k) return;
    const auto& in = pin->value;
    const auto& kv = pk->value;
    if (detail::conv_uses_gemm(macs)) {
      const long r = ci * k * k, n = h * w;
      if (need_in) {
        std::vector<double> dcols(static_cast<size_t>(r * n));
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(r),
                    static_cast<int>(n), static_cast<int>(co), 1.0, kv.data(),
                    static_cast<int>(r), gy.data(), static_cast<int>(n), 0.0, dcols.data(),
                    static_cast<int>(n));
        detail::col2im_add(dcols.data(), ci, h, w, k, dilation, pin->grad.data());
      }
      if (need_k) {
        std::vector<double> cols;
        detail::im2col(in.data(), ci, h, w, k, dilation, cols);
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(co),
                    static_cast<int>(r), static_cast<int>(n), 1.0, gy.data(),
                    static_cast<int>(n), cols.data(), static_cast<int>(n), 1.0,
                    pk->grad.data(), static_cast<int>(r));
      }
      return;
    }
    for (long o = 0; o < co; ++o)
      for (long cidx = 0; cidx < ci; ++cidx)
        for (long ky = 0; ky < k; ++ky)
          for (long kx = 0; kx < k; ++kx) {
            const size_t widx = static_cast<size_t>(((o * ci + cidx) * k + ky) * k + kx);
            const double wv = kv[widx];
            const long dy = dilation * (ky - c), dx = dilation * (kx - c);
            const long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
            const long x0 = std::max(0L, -dx), x1 = std::min(w, w - dx);
            double wacc = 0.0;
            for (long y = y0; y < y1; ++y) {
              const double* gr = gy.data() + (o * h + y) * w;
              const double* inr = in.data() + (cidx * h + y + dy) * w + dx;
              double* gir = need_in ? pin->grad.data() + (cidx * h + y + dy) * w + dx : nullptr;
              if (need_in && need_k) {
                for (long x = x0; x < x1; ++x) {
                  gir[x] += wv * gr[x];
                  wacc += inr[x] * gr[x];
                }
              } else if (need_in) {
                for (long x = x0; x < x1; ++x) gir[x] += wv * gr[x];
              } else {
                for (long x = x0; x < x1; ++x) wacc += inr[x] * gr[x];
              }
            }
            if (need_k) pk->grad[widx] += wacc;
          }
  });
}

/// Per-channel convolution with a C x k x k kernel stack; differentiable in
/// both the input and the kernel values.
inline Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, long dilation) {
  detail::check_map(input, "depthwise_conv2d");
  if (kernel.shape().rank != 3) throw ShapeError("depthwise kernel must be C x k x k");
  const long ch = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const long kc = kernel.shape()[0], k = kernel.shape()[1];
  if (kernel.shape()[2] != k) throw ShapeError("depthwise kernel must be square");
  detail::check_conv_config(k, dilation);
  if (kc != ch)
    throw ShapeError("depthwise_conv2d: kernel channels " + std::to_string(kc) + " != input channels " + std::to_string(ch));

  const long c = k / 2;
  const auto& in = input.data();
  const auto& kv = kernel.data();
  std::vector<double> out(static_cast<size_t>(ch * h * w), 0.0);
  for (long cc = 0; cc < ch; ++cc)
    for (long ky = 0; ky < k; ++ky)
      for (long kx = 0; kx < k; ++kx) {
        const double wv = kv[static_cast<size_t>((cc * k + ky) * k + kx)];
        const long dy = dilation * (ky - c), dx = dilation * (kx - c);
        const long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
        const long x0 = std::max(0L, -dx), x1 = std::min(w, w - dx);
        for (long y = y0; y < y1; ++y) {
          const double* inr = in.data() + (cc * h + y + dy) * w + dx;
          double* outr = out.data() + (cc * h + y) * w;
          for (long x = x0; x < x1; ++x) outr[x] += wv * inr[x];
        }
      }
  return detail::make_op(Shape{ch, h, w}, std::move(out), {input.node(), kernel.node()},
                         [ch, h, w, k, c, dilation](TensorNode& self) {
    TensorNode* pin = self.parents[0].get();
    TensorNode* pk = self.parents[1].get();
    const bool need_in = pin->needs_grad, need_k = pk->needs_grad;
    if (need_in) pin->ensure_grad();
    if (need_k) pk->ensure_grad();
    const auto& gy = self.grad;
    const auto& in = pin->value;
    const auto& kv = pk->value;
    for (long cc = 0; cc < ch; ++cc)
      for (long ky = 0; ky < k; ++ky)
        for (long kx = 0; kx < k; ++kx) {
          const size_t widx = static_cast<size_t>((cc * k + ky) * k + kx);
          const double wv = kv[widx];
          const long dy = dilation * (ky - c), dx = dilation * (kx - c);
          const long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
          const long x0 = std::max(0L, -dx), x1 = std::min(w, w - dx);
          double wacc = 0.0;
          for (long y = y0; y < y1; ++y) {
            const double* gr = gy.data() + (cc * h + y) * w;
            const double* inr = in.data() + (cc * h + y + dy) * w + dx;
            double* gir = need_in ? pin->grad.data() + (cc * h + y + dy) * w + dx : nullptr;
            for (long x = x0; x < x1; ++x) {
              if (need_in) gir[x] += wv * gr[x];
              wacc += inr[x] * gr[x];
            }
          }
          if (need_k) pk->grad[widx] += wacc;
        }
  });
}

/// Sobel gradient magnitude per channel, zero padding,
/// sqrt(gx^2 + gy^2 + eps) with eps = 1e-12 to stay differentiable.
inline Tensor sobel(const Tensor& image, double eps = 1e-12) {
  detail::check_map(image, "sobel");
  const long ch = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
  if (h < 3 || w < 3) throw ShapeError("sobel needs at least 3x3, got " + image.shape().str());
  static constexpr double kx_st[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static constexpr double ky_st[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  const auto& in = image.data();
  const size_t plane = static_cast<size_t>(h * w);
  std::vector<double> gx(static_cast<size_t>(ch) * plane, 0.0), gy(gx.size(), 0.0);
  for (long cc = 0; cc < ch; ++cc)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        double sx = 0.0, sy = 0.0;
        for (long dy = -1; dy <= 1; ++dy) {
          const long yy = y + dy;
          if (yy < 0 || yy >= h) continue;
          for (long dx = -1; dx <= 1; ++dx) {
            const long xx = x + dx;
            if (xx < 0 || xx >= w) continue;
            const double v = in[static_cast<size_t>((cc * h + yy) * w + xx)];
            sx += kx_st[dy + 1][dx + 1] * v;
            sy += ky_st[dy + 1][dx + 1] * v;
          }
        }
        const size_t idx = static_cast<size_t>((cc * h + y) * w + x);
        gx[idx] = sx;
        gy[idx] = sy;
      }
  std::vector<double> out(gx.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i] + eps);
  return detail::make_op(image.shape(), std::move(out), {image.node()},
                         [ch, h, w, gx = std::move(gx), gy = std::move(gy)](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& gin = self.parents[0]->grad;
    const auto& mag = self.value;
    const auto& gm = self.grad;
    for (long cc = 0; cc < ch; ++cc)
      for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
          const size_t idx = static_cast<size_t>((cc * h + y) * w + x);
          const double dgx = gm[idx] * gx[idx] / mag[idx];
          const double dgy = gm[idx] * gy[idx] / mag[idx];
          for (long dy = -1; dy <= 1; ++dy) {
            const long yy = y + dy;
            if (yy < 0 || yy >= h) continue;
            for (long dx = -1; dx <= 1; ++dx) {
              const long xx = x + dx;
              if (xx < 0 || xx >= w) continue;
              gin[static_cast<size_t>((cc * h + yy) * w + xx)] +=
                  dgx * kx_st[dy + 1][dx + 1] + dgy * ky_st[dy + 1][dx + 1];
            }
          }
        }
  });
}

enum class PoolKind { GAP, GMP, MeanP, MaxP };

inline PoolKind pool_kind_from_string(const std::string& s) {
  if (s == "GAP") return PoolKind::GAP;
  if (s == "GMP") return PoolKind::GMP;
  if (s == "MeanP") return PoolKind::MeanP;
  if (s == "MaxP") return PoolKind::MaxP;
  throw ConfigError("unknown pooling kind '" + s + "'");
}

/// GAP/GMP reduce H x W to 1x1; MeanP/MaxP are 2x2 stride-1 windows clipped
/// at the border (so a constant map stays constant). Max pooling routes the
/// gradient to the first maximal element in scan order.
inline Tensor pool(const Tensor& x, PoolKind kind) {
  detail::check_map(x, "pool");
  const long ch = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const auto& in = x.data();
  if (kind == PoolKind::GAP) {
    std::vector<double> out(static_cast<size_t>(ch));
    const double n = static_cast<double>(h * w);
    for (long cc = 0; cc < ch; ++cc) {
      double s = 0.0;
      const double* p = in.data() + cc * h * w;
      for (long i = 0; i < h * w; ++i) s += p[i];
      out[static_cast<size_t>(cc)] = s / n;
    }
    return detail::make_op(Shape{ch, 1, 1}, std::move(out), {x.node()}, [ch, h, w](TensorNode& self) {
      self.parents[0]->ensure_grad();
      auto& g = self.parents[0]->grad;
      const double n = static_cast<double>(h * w);
      for (long cc = 0; cc < ch; ++cc) {
        const double gv = self.grad[static_cast<size_t>(cc)] / n;
        double* p = g.data() + cc * h * w;
        for (long i = 0; i < h * w; ++i) p[i] += gv;
      }
    });
  }
  if (kind == PoolKind::GMP) {
    std::vector<double> out(static_cast<size_t>(ch));
    std::vector<long> arg(static_cast<size_t>(ch));
    for (long cc = 0; cc < ch; ++cc) {
      const double* p = in.data() + cc * h * w;
      long best = 0;
      for (long i = 1; i < h * w; ++i)
        if (p[i] > p[best]) best = i;
      out[static_cast<size_t>(cc)] = p[best];
      arg[static_cast<size_t>(cc)] = best;
    }
    return detail::make_op(Shape{ch, 1, 1}, std::move(out), {x.node()},
                           [ch, h, w, arg = std::move(arg)](TensorNode& self) {
      self.parents[0]->ensure_grad();
      auto& g = self.parents[0]->grad;
      for (long cc = 0; cc < ch; ++cc)
        g[static_cast<size_t>(cc * h * w + arg[static_cast<size_t>(cc)])] += self.grad[static_cast<size_t>(cc)];
    });
  }
  // 2x2 stride-1 local pooling, border-clipped windows
  std::vector<double> out(in.size());
  std::vector<long> arg;
  const bool is_max = kind == PoolKind::MaxP;
  if (is_max) arg.resize(in.size());
  for (long cc = 0; cc < ch; ++cc)
    for (long y = 0; y < h; ++y)
      for (long x2 = 0; x2 < w; ++x2) {
        const long yl = std::min(y + 1, h - 1), xl = std::min(x2 + 1, w - 1);
        const size_t oidx = static_cast<size_t>((cc * h + y) * w + x2);
        if (is_max) {
          double best = -std::numeric_limits<double>::infinity();
          long bidx = -1;
          for (long yy = y; yy <= yl; ++yy)
            for (long xx = x2; xx <= xl; ++xx) {
              const size_t idx = static_cast<size_t>((cc * h + yy) * w + xx);
              if (in[idx] > best) {
                best = in[idx];
                bidx = static_cast<long>(idx);
              }
            }
          out[oidx] = best;
          arg[oidx] = bidx;
        } else {
          double s = 0.0;
          long cnt = 0;
          for (long yy = y; yy <= yl; ++yy)
            for (long xx = x2; xx <= xl; ++xx) {
              s += in[static_cast<size_t>((cc * h + yy) * w + xx)];
              ++cnt;
            }
          out[oidx] = s / static_cast<double>(cnt);
        }
      }
  if (is_max) {
    return detail::make_op(x.shape(), std::move(out), {x.node()},
                           [arg = std::move(arg)](TensorNode& self) {
      self.parents[0]->ensure_grad();
      auto& g = self.parents[0]->grad;
      for (size_t i = 0; i < self.grad.size(); ++i) g[static_cast<size_t>(arg[i])] += self.grad[i];
    });
  }
  return detail::make_op(x.shape(), std::move(out), {x.node()}, [ch, h, w](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& g = self.parents[0]->grad;
    for (long cc = 0; cc < ch; ++cc)
      for (long y = 0; y < h; ++y)
        for (long x2 = 0; x2 < w; ++x2) {
          const long yl = std::min(y + 1, h - 1), xl = std::min(x2 + 1, w - 1);
          const long cnt = (yl - y + 1) * (xl - x2 + 1);
          const double gv = self.grad[static_cast<size_t>((cc * h + y) * w + x2)] / static_cast<double>(cnt);
          for (long yy = y; yy <= yl; ++yy)
            for (long xx = x2; xx <= xl; ++xx)
              g[static_cast<size_t>((cc * h + yy) * w + xx)] += gv;
        }
  });
}

/// C x 1 x 1 -> C x H x W replication.
inline Tensor broadcast_hw(const Tensor& x, long h, long w) {
  if (x.shape().rank != 3 || x.shape()[1] != 1 || x.shape()[2] != 1)
    throw ShapeError("broadcast_hw expects C x 1 x 1, got " + x.shape().str());
  const long ch = x.shape()[0];
  std::vector<double> out(static_cast<size_t>(ch * h * w));
  for (long cc = 0; cc < ch; ++cc)
    std::fill(out.begin() + cc * h * w, out.begin() + (cc + 1) * h * w, x.data()[static_cast<size_t>(cc)]);
  return detail::make_op(Shape{ch, h, w}, std::move(out), {x.node()}, [ch, h, w](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& g = self.parents[0]->grad;
    for (long cc = 0; cc < ch; ++cc) {
      double acc = 0.0;
      const double* p = self.grad.data() + cc * h * w;
      for (long i = 0; i < h * w; ++i) acc += p[i];
      g[static_cast<size_t>(cc)] += acc;
    }
  });
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  detail::check_map(a, "concat_channels");
  detail::check_map(b, "concat_channels");
  if (a.shape()[1] != b.shape()[1] || a.shape()[2] != b.shape()[2])
    throw ShapeError("concat_channels spatial mismatch: " + a.shape().str() + " vs " + b.shape().str());
  const long ca = a.shape()[0], cb = b.shape()[0], h = a.shape()[1], w = a.shape()[2];
  std::vector<double> out;
  out.reserve(a.data().size() + b.data().size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return detail::make_op(Shape{ca + cb, h, w}, std::move(out), {a.node(), b.node()},
                         [ca, h, w](TensorNode& self) {
    for (auto& p : self.parents) p->ensure_grad();
    auto& ga = self.parents[0]->grad;
    auto& gb = self.parents[1]->grad;
    const size_t na = static_cast<size_t>(ca * h * w);
    for (size_t i = 0; i < na; ++i) ga[i] += self.grad[i];
    for (size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[na + i];
  });
}

/// Bilinear resize with half-pixel centers; an equal-size resize is the
/// identity map.
inline Tensor bilinear_resize(const Tensor& x, long h2, long w2) {
  detail::check_map(x, "bilinear_resize");
  if (h2 < 1 || w2 < 1) throw ShapeError("bilinear_resize target must be positive");
  const long ch = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const double sy = static_cast<double>(h) / static_cast<double>(h2);
  const double sx = static_cast<double>(w) / static_cast<double>(w2);
  struct Tap { long i0, i1; double t; };
  std::vector<Tap> ys(static_cast<size_t>(h2)), xs(static_cast<size_t>(w2));
  auto make_tap = [](long o, double s, long n) {
    double src = (static_cast<double>(o) + 0.5) * s - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(n - 1));
    long i0 = static_cast<long>(std::floor(src));
    long i1 = std::min(i0 + 1, n - 1);
    return Tap{i0, i1, src - static_cast<double>(i0)};
  };
  for (long y = 0; y < h2; ++y) ys[static_cast<size_t>(y)] = make_tap(y, sy, h);
  for (long x2 = 0; x2 < w2; ++x2) xs[static_cast<size_t>(x2)] = make_tap(x2, sx, w);
  const auto& in = x.data();
  std::vector<double> out(static_cast<size_t>(ch * h2 * w2));
  for (long cc = 0; cc < ch; ++cc)
    for (long y = 0; y < h2; ++y) {
      const Tap& ty = ys[static_cast<size_t>(y)];
      for (long x2 = 0; x2 < w2; ++x2) {
        const Tap& tx = xs[static_cast<size_t>(x2)];
        const double v00 = in[static_cast<size_t>((cc * h + ty.i0) * w + tx.i0)];
        const double v01 = in[static_cast<size_t>((cc * h + ty.i0) * w + tx.i1)];
        const double v10 = in[static_cast<size_t>((cc * h + ty.i1) * w + tx.i0)];
        const double v11 = in[static_cast<size_t>((cc * h + ty.i1) * w + tx.i1)];
        out[static_cast<size_t>((cc * h2 + y) * w2 + x2)] =
            (1.0 - ty.t) * ((1.0 - tx.t) * v00 + tx.t * v01) + ty.t * ((1.0 - tx.t) * v10 + tx.t * v11);
      }
    }
  return detail::make_op(Shape{ch, h2, w2}, std::move(out), {x.node()},
                         [ch, h, w, h2, w2, ys = std::move(ys), xs = std::move(xs)](TensorNode& self) {
    self.parents[0]->ensure_grad();
    auto& g = self.parents[0]->grad;
    for (long cc = 0; cc < ch; ++cc)
      for (long y = 0; y < h2; ++y) {
        const Tap& ty = ys[static_cast<size_t>(y)];
        for (long x2 = 0; x2 < w2; ++x2) {
          const Tap& tx = xs[static_cast<size_t>(x2)];
          const double gv = self.grad[static_cast<size_t>((cc * h2 + y) * w2 + x2)];
          g[static_cast<size_t>((cc * h + ty.i0) * w + tx.i0)] += gv * (1.0 - ty.t) * (1.0 - tx.t);
          g[static_cast<size_t>((cc * h + ty.i0) * w + tx.i1)] += gv * (1.0 - ty.t) * tx.t;
          g[static_cast<size_t>((cc * h + ty.i1) * w + tx.i0)] += gv * ty.t * (1.0 - tx.t);
          g[static_cast<size_t>((cc * h + ty.i1) * w + tx.i1)] += gv * ty.t * tx.t;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// non-differentiable helpers

/// First index of the maximum (lowest index on ties).
inline long argmax(const std::vector<double>& v) {
  long best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<long>(i);
  return best;
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

}  // namespace cldyn
