#pragma once

#include <cmath>
#include <cstring>
#include <initializer_list>
#include <string>
#include <vector>

#include "gmoe/core/tensor.hpp"

// Differentiable operations. Every op computes its forward value through the
// kernel layer, verifies the result is finite, and (when an input sits on a
// tape) records a backward rule. Backward rules work on plain values and never
// record new nodes.

namespace gmoe {

namespace detail {

template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> ins) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : ins) {
    if (!t->taped()) continue;
    if (tape && tape != t->tape())
      throw ShapeError("operation mixes tensors from different tapes");
    tape = t->tape();
  }
  return tape;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!simd::kernels<T>().all_finite(t.data(), t.size()))
    throw NumericError(std::string("operation '") + op +
                       "' produced a non-finite value");
}

template <typename T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2)
    throw ShapeError(std::string(op) + ": expected a 2-d tensor, got " +
                     shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// c = a @ b on raw values.
template <typename T>
Tensor<T> mm_nn(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> c({a.rows(), b.cols()});
  simd::kernels<T>().matmul(a.data(), b.data(), c.data(), a.rows(), a.cols(),
                            b.cols());
  return c;
}

// c = a @ b^T: c[i,p] = dot(a_i, b_p).
template <typename T>
Tensor<T> mm_nt(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.rows(), n = a.cols(), k = b.rows();
  Tensor<T> c({m, k});
  const auto& K = simd::kernels<T>();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      c.at(i, p) = K.dot(a.data() + i * n, b.data() + p * n, n);
  return c;
}

// c = a^T @ g: rank-1 accumulation, c_p += a[i,p] * g_i.
template <typename T>
Tensor<T> mm_tn(const Tensor<T>& a, const Tensor<T>& g) {
  const std::size_t m = a.rows(), k = a.cols(), n = g.cols();
  Tensor<T> c({k, n});
  const auto& K = simd::kernels<T>();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      K.axpy(a.at(i, p), g.data() + i * n, c.data() + p * n, n);
  return c;
}

template <typename T>
Tensor<T> transposed(const Tensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = x.at(i, j);
  return out;
}

}  // namespace detail

// ------------------------------------------------------------ elementwise ---

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  simd::kernels<T>().add(a.data(), b.data(), out.data(), out.size());
  detail::check_finite(out, "add");
  if (Tape<T>* tape = detail::common_tape<T>({&a, &b})) {
    const int pa = tape->node_of(a), pb = tape->node_of(b);
    tape->mark(out, tape->record({pa, pb},
                                 [pa, pb](const Tensor<T>& g, auto& sink) {
                                   sink.add(pa, g);
                                   sink.add(pb, g);
                                 }));
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  simd::kernels<T>().sub(a.data(), b.data(), out.data(), out.size());
  detail::check_finite(out, "sub");
  if (Tape<T>* tape = detail::common_tape<T>({&a, &b})) {
    const int pa = tape->node_of(a), pb = tape->node_of(b);
    tape->mark(out, tape->record({pa, pb},
                                 [pa, pb](const Tensor<T>& g, auto& sink) {
                                   sink.add(pa, g);
                                   Tensor<T> ng(g.shape());
                                   simd::kernels<T>().scale(g.data(), T(-1),
                                                            ng.data(), ng.size());
                                   sink.add(pb, ng);
                                 }));
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  simd::kernels<T>().mul(a.data(), b.data(), out.data(), out.size());
  detail::check_finite(out, "mul");
  if (Tape<T>* tape = detail::common_tape<T>({&a, &b})) {
    const int pa = tape->node_of(a), pb = tape->node_of(b);
    tape->mark(out, tape->record({pa, pb},
                                 [a, b, pa, pb](const Tensor<T>& g, auto& sink) {
                                   if (pa >= 0) {
                                     Tensor<T> da(g.shape());
                                     simd::kernels<T>().mul(g.data(), b.data(),
                                                            da.data(), da.size());
                                     sink.add(pa, da);
                                   }
                                   if (pb >= 0) {
                                     Tensor<T> db(g.shape());
                                     simd::kernels<T>().mul(g.data(), a.data(),
                                                            db.data(), db.size());
                                     sink.add(pb, db);
                                   }
                                 }));
  }
  return out;
}

// out = alpha * x, alpha a plain constant.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T alpha) {
  Tensor<T> out(x.shape());
  simd::kernels<T>().scale(x.data(), alpha, out.data(), out.size());
  detail::check_finite(out, "scale");
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px},
                                 [px, alpha](const Tensor<T>& g, auto& sink) {
                                   Tensor<T> dx(g.shape());
                                   simd::kernels<T>().scale(g.data(), alpha,
                                                            dx.data(), dx.size());
                                   sink.add(px, dx);
                                 }));
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = x.at(i) + c;
  detail::check_finite(out, "add_scalar");
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px}, [px](const Tensor<T>& g, auto& sink) {
      sink.add(px, g);
    }));
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  simd::kernels<T>().relu(x.data(), out.data(), out.size());
  detail::check_finite(out, "relu");
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px}, [x, px](const Tensor<T>& g, auto& sink) {
      Tensor<T> dx(g.shape());
      simd::kernels<T>().relu_mask(x.data(), g.data(), dx.data(), dx.size());
      sink.add(px, dx);
    }));
  }
  return out;
}

// Exact Gaussian-CDF form: gelu(x) = x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(x.at(i));
    out.at(i) = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  detail::check_finite(out, "gelu");
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px}, [x, px](const Tensor<T>& g, auto& sink) {
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      Tensor<T> dx(g.shape());
      for (std::size_t i = 0; i < dx.size(); ++i) {
        const double v = static_cast<double>(x.at(i));
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        dx.at(i) = static_cast<T>((cdf + v * pdf) * static_cast<double>(g.at(i)));
      }
      sink.add(px, dx);
    }));
  }
  return out;
}

enum class Activation { relu, gelu };

inline const char* activation_name(Activation a) {
  return a == Activation::relu ? "relu" : "gelu";
}

template <typename T>
Tensor<T> activate(Activation act, const Tensor<T>& x) {
  return act == Activation::relu ? relu(x) : gelu(x);
}

// Multiply by a constant 0/1 mask. The mask is not a differentiable input.
template <typename T>
Tensor<T> mask_mul(const Tensor<T>& x, const Tensor<T>& mask) {
  detail::require_same_shape(x, mask, "mask_mul");
  Tensor<T> out(x.shape());
  simd::kernels<T>().mul(x.data(), mask.data(), out.data(), out.size());
  detail::check_finite(out, "mask_mul");
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    Tensor<T> m = mask.detached();
    tape->mark(out, tape->record({px}, [m, px](const Tensor<T>& g, auto& sink) {
      Tensor<T> dx(g.shape());
      simd::kernels<T>().mul(g.data(), m.data(), dx.data(), dx.size());
      sink.add(px, dx);
    }));
  }
  return out;
}

// -------------------------------------------------------------- structure ---

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  Tensor<T> out = detail::mm_nn(a, b);
  detail::check_finite(out, "matmul");
  if (Tape<T>* tape = detail::common_tape<T>({&a, &b})) {
    const int pa = tape->node_of(a), pb = tape->node_of(b);
    tape->mark(out, tape->record({pa, pb},
                                 [a, b, pa, pb](const Tensor<T>& g, auto& sink) {
                                   if (pa >= 0) sink.add(pa, detail::mm_nt(g, b));
                                   if (pb >= 0) sink.add(pb, detail::mm_tn(a, g));
                                 }));
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_2d(x, "transpose");
  Tensor<T> out = detail::transposed(x);
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px}, [px](const Tensor<T>& g, auto& sink) {
      sink.add(px, detail::transposed(g));
    }));
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<std::size_t> shape) {
  Tensor<T> out = x.reshaped_view(shape);
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    auto orig = x.shape();
    tape->mark(out, tape->record({px}, [px, orig](const Tensor<T>& g, auto& sink) {
      sink.add(px, g.reshaped_view(orig));
    }));
  }
  return out;
}

// Add a row vector to every row.
template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& v) {
  detail::require_2d(x, "add_row");
  if (v.size() != x.cols())
    throw ShapeError("add_row: vector length " + shape_str(v.shape()) +
                     " does not match row width " + shape_str(x.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    simd::kernels<T>().add(x.data() + i * n, v.data(), out.data() + i * n, n);
  detail::check_finite(out, "add_row");
  if (Tape<T>* tape = detail::common_tape<T>({&x, &v})) {
    const int px = tape->node_of(x), pv = tape->node_of(v);
    auto vshape = v.shape();
    tape->mark(out, tape->record({px, pv},
                                 [px, pv, vshape](const Tensor<T>& g, auto& sink) {
                                   sink.add(px, g);
                                   if (pv >= 0) {
                                     const std::size_t m = g.rows(), n = g.cols();
                                     Tensor<T> dv(vshape);
                                     for (std::size_t i = 0; i < m; ++i)
                                       simd::kernels<T>().axpy(
                                           T(1), g.data() + i * n, dv.data(), n);
                                     sink.add(pv, dv);
                                   }
                                 }));
  }
  return out;
}

// Scale each row i by w[i].
template <typename T>
Tensor<T> row_scale(const Tensor<T>& x, const Tensor<T>& w) {
  detail::require_2d(x, "row_scale");
  if (w.size() != x.rows())
    throw ShapeError("row_scale: weight length " + shape_str(w.shape()) +
                     " does not match row count " + shape_str(x.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    simd::kernels<T>().scale(x.data() + i * n, w.at(i), out.data() + i * n, n);
  detail::check_finite(out, "row_scale");
  if (Tape<T>* tape = detail::common_tape<T>({&x, &w})) {
    const int px = tape->node_of(x), pw = tape->node_of(w);
    auto wshape = w.shape();
    tape->mark(out, tape->record(
                        {px, pw},
                        [x, w, px, pw, wshape](const Tensor<T>& g, auto& sink) {
                          const std::size_t m = g.rows(), n = g.cols();
                          if (px >= 0) {
                            Tensor<T> dx({m, n});
                            for (std::size_t i = 0; i < m; ++i)
                              simd::kernels<T>().scale(g.data() + i * n, w.at(i),
                                                       dx.data() + i * n, n);
                            sink.add(px, dx);
                          }
                          if (pw >= 0) {
                            Tensor<T> dw(wshape);
                            for (std::size_t i = 0; i < m; ++i)
                              dw.at(i) = simd::kernels<T>().dot(
                                  g.data() + i * n, x.data() + i * n, n);
                            sink.add(pw, dw);
                          }
                        }));
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
  detail::require_2d(x, "slice_cols");
  if (c0 >= c1 || c1 > x.cols())
    throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") for " + shape_str(x.shape()));
  const std::size_t m = x.rows(), n = x.cols(), w = c1 - c0;
  Tensor<T> out({m, w});
  for (std::size_t i = 0; i < m; ++i)
    std::memcpy(out.data() + i * w, x.data() + i * n + c0, w * sizeof(T));
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px},
                                 [px, m, n, c0, w](const Tensor<T>& g, auto& sink) {
                                   Tensor<T> dx({m, n});
                                   for (std::size_t i = 0; i < m; ++i)
                                     std::memcpy(dx.data() + i * n + c0,
                                                 g.data() + i * w, w * sizeof(T));
                                   sink.add(px, dx);
                                 }));
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.rows() != m)
      throw ShapeError("concat_cols: row counts differ, " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    n += p.cols();
  }
  Tensor<T> out({m, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      std::memcpy(out.data() + i * n + off, p.data() + i * p.cols(),
                  p.cols() * sizeof(T));
    off += p.cols();
  }
  Tape<T>* tape = nullptr;
  for (const auto& p : parts) {
    if (!p.taped()) continue;
    if (tape && tape != p.tape())
      throw ShapeError("concat_cols: parts from different tapes");
    tape = p.tape();
  }
  if (tape) {
    std::vector<int> ids;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      ids.push_back(tape->node_of(p));
      widths.push_back(p.cols());
    }
    tape->mark(out, tape->record(ids, [ids, widths, m, n](const Tensor<T>& g,
                                                          auto& sink) {
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < ids.size(); ++pi) {
        const std::size_t w = widths[pi];
        if (ids[pi] >= 0) {
          Tensor<T> dp({m, w});
          for (std::size_t i = 0; i < m; ++i)
            std::memcpy(dp.data() + i * w, g.data() + i * n + off, w * sizeof(T));
          sink.add(ids[pi], dp);
        }
        off += w;
      }
    }));
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.cols() != n)
      throw ShapeError("concat_rows: column counts differ, " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    m += p.rows();
  }
  Tensor<T> out({m, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.data() + off * n, p.data(), p.size() * sizeof(T));
    off += p.rows();
  }
  Tape<T>* tape = nullptr;
  for (const auto& p : parts) {
    if (!p.taped()) continue;
    if (tape && tape != p.tape())
      throw ShapeError("concat_rows: parts from different tapes");
    tape = p.tape();
  }
  if (tape) {
    std::vector<int> ids;
    std::vector<std::size_t> heights;
    for (const auto& p : parts) {
      ids.push_back(tape->node_of(p));
      heights.push_back(p.rows());
    }
    tape->mark(out, tape->record(ids, [ids, heights, n](const Tensor<T>& g,
                                                        auto& sink) {
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < ids.size(); ++pi) {
        const std::size_t h = heights[pi];
        if (ids[pi] >= 0) {
          Tensor<T> dp({h, n});
          std::memcpy(dp.data(), g.data() + off * n, h * n * sizeof(T));
          sink.add(ids[pi], dp);
        }
        off += h;
      }
    }));
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<int> idx) {
  detail::require_2d(x, "gather_rows");
  const std::size_t m = x.rows(), n = x.cols();
  for (int i : idx)
    if (i < 0 || static_cast<std::size_t>(i) >= m)
      throw ShapeError("gather_rows: index " + std::to_string(i) +
                       " out of range for " + shape_str(x.shape()));
  Tensor<T> out({idx.size(), n});
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::memcpy(out.data() + r * n, x.data() + static_cast<std::size_t>(idx[r]) * n,
                n * sizeof(T));
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px}, [px, idx, m, n](const Tensor<T>& g,
                                                       auto& sink) {
      Tensor<T> dx({m, n});
      for (std::size_t r = 0; r < idx.size(); ++r)
        simd::kernels<T>().axpy(T(1), g.data() + r * n,
                                dx.data() + static_cast<std::size_t>(idx[r]) * n,
                                n);
      sink.add(px, dx);
    }));
  }
  return out;
}

// Rows of x placed (added) at idx within an otherwise-zero [m, n] tensor.
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& x, std::vector<int> idx, std::size_t m) {
  detail::require_2d(x, "scatter_rows");
  if (idx.size() != x.rows())
    throw ShapeError("scatter_rows: index count " + std::to_string(idx.size()) +
                     " does not match rows of " + shape_str(x.shape()));
  const std::size_t n = x.cols();
  for (int i : idx)
    if (i < 0 || static_cast<std::size_t>(i) >= m)
      throw ShapeError("scatter_rows: index " + std::to_string(i) +
                       " out of range for " + std::to_string(m) + " rows");
  Tensor<T> out({m, n});
  for (std::size_t r = 0; r < idx.size(); ++r)
    simd::kernels<T>().axpy(T(1), x.data() + r * n,
                            out.data() + static_cast<std::size_t>(idx[r]) * n, n);
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px}, [px, idx, n](const Tensor<T>& g,
                                                    auto& sink) {
      Tensor<T> dx({idx.size(), n});
      for (std::size_t r = 0; r < idx.size(); ++r)
        std::memcpy(dx.data() + r * n,
                    g.data() + static_cast<std::size_t>(idx[r]) * n,
                    n * sizeof(T));
      sink.add(px, dx);
    }));
  }
  return out;
}

template <typename T>
Tensor<T> gather_elems(const Tensor<T>& x, std::vector<int> rows,
                       std::vector<int> cols) {
  detail::require_2d(x, "gather_elems");
  if (rows.size() != cols.size())
    throw ShapeError("gather_elems: row/col index lengths differ");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<T> out({rows.size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= m || cols[i] < 0 ||
        static_cast<std::size_t>(cols[i]) >= n)
      throw ShapeError("gather_elems: index out of range");
    out.at(i) = x.at(static_cast<std::size_t>(rows[i]),
                     static_cast<std::size_t>(cols[i]));
  }
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px}, [px, rows, cols, m, n](const Tensor<T>& g,
                                                              auto& sink) {
      Tensor<T> dx({m, n});
      for (std::size_t i = 0; i < rows.size(); ++i)
        dx.at(static_cast<std::size_t>(rows[i]),
              static_cast<std::size_t>(cols[i])) += g.at(i);
      sink.add(px, dx);
    }));
  }
  return out;
}

// Mean over consecutive groups of `group` rows.
template <typename T>
Tensor<T> mean_pool_rows(const Tensor<T>& x, std::size_t group) {
  detail::require_2d(x, "mean_pool_rows");
  if (group == 0 || x.rows() % group != 0)
    throw ShapeError("mean_pool_rows: row count " + std::to_string(x.rows()) +
                     " not divisible by group " + std::to_string(group));
  const std::size_t m = x.rows() / group, n = x.cols();
  const T inv = T(1) / static_cast<T>(group);
  Tensor<T> out({m, n});
  for (std::size_t s = 0; s < m; ++s)
    for (std::size_t r = 0; r < group; ++r)
      simd::kernels<T>().axpy(inv, x.data() + (s * group + r) * n,
                              out.data() + s * n, n);
  detail::check_finite(out, "mean_pool_rows");
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px}, [px, group, inv](const Tensor<T>& g,
                                                        auto& sink) {
      const std::size_t m = g.rows(), n = g.cols();
      Tensor<T> dx({m * group, n});
      for (std::size_t s = 0; s < m; ++s)
        for (std::size_t r = 0; r < group; ++r)
          simd::kernels<T>().scale(g.data() + s * n, inv,
                                   dx.data() + (s * group + r) * n, n);
      sink.add(px, dx);
    }));
  }
  return out;
}

// -------------------------------------------------------------- reductions ---

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::scalar(simd::kernels<T>().sum(x.data(), x.size()));
  detail::check_finite(out, "sum");
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    auto shape = x.shape();
    tape->mark(out, tape->record({px}, [px, shape](const Tensor<T>& g,
                                                   auto& sink) {
      sink.add(px, Tensor<T>::full(shape, g.item()));
    }));
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> col_sum(const Tensor<T>& x) {
  detail::require_2d(x, "col_sum");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<T> out({n});
  for (std::size_t i = 0; i < m; ++i)
    simd::kernels<T>().axpy(T(1), x.data() + i * n, out.data(), n);
  detail::check_finite(out, "col_sum");
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px}, [px, m, n](const Tensor<T>& g,
                                                  auto& sink) {
      Tensor<T> dx({m, n});
      for (std::size_t i = 0; i < m; ++i)
        std::memcpy(dx.data() + i * n, g.data(), n * sizeof(T));
      sink.add(px, dx);
    }));
  }
  return out;
}

template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x) {
  const T sq = simd::kernels<T>().dot(x.data(), x.data(), x.size());
  const T norm = std::sqrt(sq);
  Tensor<T> out = Tensor<T>::scalar(norm);
  detail::check_finite(out, "l2_norm");
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px}, [x, px, norm](const Tensor<T>& g,
                                                     auto& sink) {
      Tensor<T> dx(x.shape());
      if (norm > T(0))
        simd::kernels<T>().scale(x.data(), g.item() / norm, dx.data(), dx.size());
      sink.add(px, dx);
    }));
  }
  return out;
}

// ------------------------------------------------------------- normalizers ---

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  if (x.rank() == 0 || x.rank() > 2)
    throw ShapeError("softmax: expected rank 1 or 2, got " +
                     shape_str(x.shape()));
  const int r = static_cast<int>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  if (x.dim(static_cast<std::size_t>(axis)) == 0)
    throw ShapeError("softmax: empty axis");
  if (r == 2 && axis == 0) return transpose(softmax(transpose(x), 1));

  const std::size_t m = x.rows(), n = x.cols();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data() + i * n;
    T* o = out.data() + i * n;
    const T mx = simd::kernels<T>().max(row, n);
    for (std::size_t j = 0; j < n; ++j) o[j] = std::exp(row[j] - mx);
    const T s = simd::kernels<T>().sum(o, n);
    simd::kernels<T>().scale(o, T(1) / s, o, n);
  }
  detail::check_finite(out, "softmax");
  if (Tape<T>* tape = detail::common_tape<T>({&x})) {
    const int px = tape->node_of(x);
    tape->mark(out, tape->record({px}, [out, px](const Tensor<T>& g, auto& sink) {
      const std::size_t m = out.rows(), n = out.cols();
      Tensor<T> dx(out.shape());
      for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g.data() + i * n;
        const T* srow = out.data() + i * n;
        const T inner = simd::kernels<T>().dot(grow, srow, n);
        for (std::size_t j = 0; j < n; ++j)
          dx.data()[i * n + j] = (grow[j] - inner) * srow[j];
      }
      sink.add(px, dx);
    }));
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-6)) {
  if (x.rank() == 0 || x.rank() > 2)
    throw ShapeError("layer_norm: expected rank 1 or 2, got " +
                     shape_str(x.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw ShapeError("layer_norm: zero-length feature axis");
  if (gamma.size() != n || beta.size() != n)
    throw ShapeError("layer_norm: affine extents " + shape_str(gamma.shape()) +
                     "/" + shape_str(beta.shape()) + " do not match " +
                     shape_str(x.shape()));
  if (!(eps > T(0))) throw ShapeError("layer_norm: eps must be positive");

  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  Tensor<T> inv_std({m});
  const T invn = T(1) / static_cast<T>(n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data() + i * n;
    const T mu = simd::kernels<T>().sum(row, n) * invn;
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T d = row[j] - mu;
      var += d * d;
    }
    var *= invn;
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std.at(i) = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const T xh = (row[j] - mu) * inv;
      xhat.data()[i * n + j] = xh;
      out.data()[i * n + j] = gamma.at(j) * xh + beta.at(j);
    }
  }
  detail::check_finite(out, "layer_norm");
  if (Tape<T>* tape = detail::common_tape<T>({&x, &gamma, &beta})) {
    const int px = tape->node_of(x);
    const int pg = tape->node_of(gamma);
    const int pb = tape->node_of(beta);
    auto gshape = gamma.shape();
    tape->mark(out, tape->record(
                        {px, pg, pb},
                        [xhat, inv_std, gamma, px, pg, pb, gshape, invn](
                            const Tensor<T>& g, auto& sink) {
                          const std::size_t m = g.rows(), n = g.cols();
                          if (px >= 0) {
                            Tensor<T> dx(g.shape());
                            std::vector<T> gg(n);
                            for (std::size_t i = 0; i < m; ++i) {
                              const T* grow = g.data() + i * n;
                              const T* xh = xhat.data() + i * n;
                              for (std::size_t j = 0; j < n; ++j)
                                gg[j] = grow[j] * gamma.at(j);
                              const T mean_gg =
                                  simd::kernels<T>().sum(gg.data(), n) * invn;
                              const T mean_ggx =
                                  simd::kernels<T>().dot(gg.data(), xh, n) * invn;
                              const T inv = inv_std.at(i);
                              for (std::size_t j = 0; j < n; ++j)
                                dx.data()[i * n + j] =
                                    inv * (gg[j] - mean_gg - xh[j] * mean_ggx);
                            }
                            sink.add(px, dx);
                          }
                          if (pg >= 0) {
                            Tensor<T> dgamma(gshape);
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                dgamma.at(j) += g.data()[i * n + j] *
                                                xhat.data()[i * n + j];
                            sink.add(pg, dgamma);
                          }
                          if (pb >= 0) {
                            Tensor<T> dbeta(gshape);
                            for (std::size_t i = 0; i < m; ++i)
                              simd::kernels<T>().axpy(T(1), g.data() + i * n,
                                                      dbeta.data(), n);
                            sink.add(pb, dbeta);
                          }
                        }));
  }
  return out;
}

}  // namespace gmoe
