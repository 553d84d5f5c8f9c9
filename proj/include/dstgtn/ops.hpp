#pragma once

// Differentiable primitives. Every function returns a fresh tensor and, when gradient
// mode is on and an input requires a gradient, records its backward rule.

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dstgtn/errors.hpp"
#include "dstgtn/tensor.hpp"

namespace dstgtn {

namespace kernels {

// c[M,N] += a[M,K] * b[K,N]; each c[i,j] accumulates over k in ascending order.
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[K,N] += a[M,K]^T * b[M,N]. Four rows of a/b per pass; each c element still
// accumulates over i in ascending order, so results match the one-row loop bit for bit.
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T *a0 = a + i * k, *a1 = a0 + k, *a2 = a1 + k, *a3 = a2 + k;
    const T *b0 = b + i * n, *b1 = b0 + n, *b2 = b1 + n, *b3 = b2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const T x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] = (((cp[j] + x0 * b0[j]) + x1 * b1[j]) + x2 * b2[j]) + x3 * b3[j];
    }
  }
  for (; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

// c[M,K] += a[M,N] * b[K,N]^T, via an explicit transpose of b so the inner loop is an axpy.
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k,
             std::vector<T>& scratch) {
  scratch.resize(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) scratch[j * k + p] = b[p * n + j];
  gemm_nn(a, scratch.data(), c, m, n, k);
}

}  // namespace kernels

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " +
                         to_string(b));
  }
}

// Right-aligned broadcast of `in` against `out`; returns per-axis input strides (0 where
// broadcast) laid out against `out`'s axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out,
                                                  const char* op) {
  if (in.size() > out.size()) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(in) + " to " +
                         to_string(out));
  }
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t r = 0; r < in.size(); ++r) {
    const std::size_t ia = in.size() - 1 - r;
    const std::size_t oa = out.size() - 1 - r;
    if (in[ia] == out[oa]) {
      strides[oa] = stride;
    } else if (in[ia] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(in) + " to " +
                           to_string(out));
    }
    stride *= in[ia];
  }
  return strides;
}

// Linear offsets into a source laid out with `strides` for every element of `out` (row-major).
inline std::vector<std::size_t> strided_index_map(const Shape& out,
                                                  const std::vector<std::size_t>& strides) {
  const std::size_t total = numel(out);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t src = 0;
  for (std::size_t lin = 0; lin < total; ++lin) {
    map[lin] = src;
    for (std::size_t ax = out.size(); ax-- > 0;) {
      ++idx[ax];
      src += strides[ax];
      if (idx[ax] < out[ax]) break;
      src -= strides[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return map;
}

// out[i] = in[map[i]]; gradients scatter-add back through the map.
template <class T>
Tensor<T> gather_by_map(const Tensor<T>& x, Shape out_shape,
                        std::shared_ptr<const std::vector<std::size_t>> map) {
  const auto& src = x.vec();
  std::vector<T> out(map->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[(*map)[i]];
  auto xn = x.node();
  return make_result<T>(std::move(out_shape), std::move(out), {x}, [xn, map](const Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < map->size(); ++i) g[(*map)[i]] += o.grad[i];
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise algebra

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.vec()[i] + b.vec()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn](const Node<T>& o) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.vec()[i] - b.vec()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn](const Node<T>& o) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.vec()[i] * b.vec()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn](const Node<T>& o) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->value[i];
    }
  });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "div");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.vec()[i] / b.vec()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn](const Node<T>& o) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T bv = bn->value[i];
        g[i] -= o.grad[i] * an->value[i] / (bv * bv);
      }
    }
  });
}

/// scale * x + shift, elementwise.
template <class T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * x.vec()[i] + shift;
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {x}, [xn, scale](const Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * o.grad[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return affine(x, s, T(0));
}

/// max(x, 0); the subgradient at exactly 0 is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.vec()[i] > T(0) ? x.vec()[i] : T(0);
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {x}, [xn](const Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xn->value[i] > T(0)) g[i] += o.grad[i];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.vec()) s += v;
  auto xn = x.node();
  return make_result<T>({1}, {s}, {x}, [xn](const Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (auto& gi : g) gi += o.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// x[..., n] + bias[n]
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t n = bias.size();
  if (bias.rank() != 1 || x.dim(-1) != n) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not match " +
                         to_string(x.shape()));
  }
  std::vector<T> out(x.vec());
  for (std::size_t r = 0; r < out.size(); r += n)
    for (std::size_t j = 0; j < n; ++j) out[r + j] += bias.vec()[j];
  auto xn = x.node(), bn = bias.node();
  return make_result<T>(x.shape(), std::move(out), {x, bias}, [xn, bn, n](const Node<T>& o) {
    if (xn->requires_grad) {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t r = 0; r < o.grad.size(); r += n)
        for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[r + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  auto xn = x.node();
  return make_result<T>(std::move(shape), x.vec(), {x}, [xn](const Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

/// out.shape[i] = x.shape[axes[i]]
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const auto& in = x.shape();
  if (axes.size() != in.size()) {
    throw DimensionError("permute: axes rank does not match " + to_string(in));
  }
  std::vector<std::size_t> in_strides(in.size(), 1);
  for (std::size_t a = in.size(); a-- > 1;) in_strides[a - 1] = in_strides[a] * in[a];
  Shape out(in.size());
  std::vector<std::size_t> strides(in.size());
  std::vector<bool> used(in.size(), false);
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size() || used[axes[i]]) throw DimensionError("permute: invalid axes");
    used[axes[i]] = true;
    out[i] = in[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  auto map = std::make_shared<const std::vector<std::size_t>>(detail::strided_index_map(out, strides));
  return detail::gather_by_map(x, std::move(out), std::move(map));
}

/// Swaps the two trailing axes.
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2 for " + to_string(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

/// Expands size-1 (or missing leading) axes to `shape`.
template <class T>
Tensor<T> broadcast_to(const Tensor<T>& x, Shape shape) {
  if (x.shape() == shape) return x;
  auto strides = detail::broadcast_strides(x.shape(), shape, "broadcast_to");
  auto map = std::make_shared<const std::vector<std::size_t>>(detail::strided_index_map(shape, strides));
  return detail::gather_by_map(x, std::move(shape), std::move(map));
}

/// Rows of a [R, W] table selected by `rows`; result shape [rows.size(), W].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> rows) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2");
  const std::size_t width = table.dim(1);
  auto map = std::make_shared<std::vector<std::size_t>>(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= table.dim(0)) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[r]) + " outside table " +
                           to_string(table.shape()));
    }
    for (std::size_t j = 0; j < width; ++j) (*map)[r * width + j] = rows[r] * width + j;
  }
  return detail::gather_by_map(table, Shape{rows.size(), width},
                               std::shared_ptr<const std::vector<std::size_t>>(map));
}

/// x[..., begin:end]
template <class T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t w = x.dim(-1);
  if (begin >= end || end > w) {
    throw DimensionError("slice_last: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + to_string(x.shape()));
  }
  Shape out = x.shape();
  out.back() = end - begin;
  const std::size_t rows = x.size() / w;
  auto map = std::make_shared<std::vector<std::size_t>>();
  map->reserve(rows * (end - begin));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = begin; j < end; ++j) map->push_back(r * w + j);
  return detail::gather_by_map(x, std::move(out), std::shared_ptr<const std::vector<std::size_t>>(map));
}

/// Concatenation along the last axis; all leading extents must agree.
template <class T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead) {
      throw DimensionError("concat_last: leading extents " + to_string(p.shape()) + " vs " +
                           to_string(parts[0].shape()));
    }
    widths.push_back(p.dim(-1));
    total += p.dim(-1);
  }
  const std::size_t rows = numel(lead);
  std::vector<T> out(rows * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].vec();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(r * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + off));
    off += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result<T>(std::move(shape), std::move(out), parts,
                        [nodes, widths, rows, total](const Node<T>& o) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < nodes.size(); ++k) {
                            if (nodes[k]->requires_grad) {
                              auto& g = nodes[k]->ensure_grad();
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < widths[k]; ++j)
                                  g[r * widths[k] + j] += o.grad[r * total + off + j];
                            }
                            off += widths[k];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Contractions

/// Batched matrix product a[..., m, k] x b[..., k, n] -> [..., m, n].
/// Leading axes match or broadcast (right-aligned, size-1 or missing axes expand).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  auto mismatch = [&] {
    return DimensionError("matmul: shapes " + to_string(a.shape()) + " and " +
                          to_string(b.shape()) + " do not conform");
  };
  if (a.rank() < 2 || b.rank() < 2) throw mismatch();
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) throw mismatch();
  Shape la(a.shape().begin(), a.shape().end() - 2);
  Shape lb(b.shape().begin(), b.shape().end() - 2);
  auto an = a.node(), bn = b.node();

  if (lb.empty()) {
    // Shared right operand: flatten all of a's leading axes into rows.
    const std::size_t rows = numel(la) * m;
    std::vector<T> out(rows * n, T(0));
    kernels::gemm_nn(a.vec().data(), b.vec().data(), out.data(), rows, k, n);
    Shape shape = la;
    shape.insert(shape.end(), {m, n});
    return make_result<T>(std::move(shape), std::move(out), {a, b},
                          [an, bn, rows, k, n](const Node<T>& o) {
                            if (an->requires_grad) {
                              std::vector<T> scratch;
                              kernels::gemm_nt(o.grad.data(), bn->value.data(),
                                               an->ensure_grad().data(), rows, n, k, scratch);
                            }
                            if (bn->requires_grad) {
                              kernels::gemm_tn(an->value.data(), o.grad.data(),
                                               bn->ensure_grad().data(), rows, k, n);
                            }
                          });
  }

  // General batched case.
  Shape lead = la.size() >= lb.size() ? la : lb;
  const Shape& shorter = la.size() >= lb.size() ? lb : la;
  for (std::size_t r = 0; r < shorter.size(); ++r) {
    auto& e = lead[lead.size() - 1 - r];
    const auto s = shorter[shorter.size() - 1 - r];
    if (e == 1) e = s;
    else if (s != 1 && s != e) throw mismatch();
  }
  auto map_for = [&](const Shape& l) {
    Shape bshape(l.begin(), l.end());
    auto strides = detail::broadcast_strides(bshape, lead, "matmul");
    return detail::strided_index_map(lead, strides);
  };
  auto amap = std::make_shared<const std::vector<std::size_t>>(
      la.empty() ? std::vector<std::size_t>(numel(lead), 0) : map_for(la));
  auto bmap = std::make_shared<const std::vector<std::size_t>>(map_for(lb));
  const std::size_t batches = numel(lead);
  std::vector<T> out(batches * m * n, T(0));
  for (std::size_t s = 0; s < batches; ++s) {
    kernels::gemm_nn(a.vec().data() + (*amap)[s] * m * k, b.vec().data() + (*bmap)[s] * k * n,
                     out.data() + s * m * n, m, k, n);
  }
  Shape shape = lead;
  shape.insert(shape.end(), {m, n});
  return make_result<T>(std::move(shape), std::move(out), {a, b},
                        [an, bn, amap, bmap, batches, m, k, n](const Node<T>& o) {
                          std::vector<T> scratch;
                          if (an->requires_grad) {
                            auto& g = an->ensure_grad();
                            for (std::size_t s = 0; s < batches; ++s)
                              kernels::gemm_nt(o.grad.data() + s * m * n,
                                               bn->value.data() + (*bmap)[s] * k * n,
                                               g.data() + (*amap)[s] * m * k, m, n, k, scratch);
                          }
                          if (bn->requires_grad) {
                            auto& g = bn->ensure_grad();
                            for (std::size_t s = 0; s < batches; ++s)
                              kernels::gemm_tn(an->value.data() + (*amap)[s] * m * k,
                                               o.grad.data() + s * m * n,
                                               g.data() + (*bmap)[s] * k * n, m, k, n);
                          }
                        });
}

/// x[..., in] * W[in, out] + b[out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add_bias(matmul(x, weight), bias);
}

/// out[b,t,i,:] = sum_j g[t,i,j] * z[b,t,j,:]  (graph convolution on every time slice).
template <class T>
Tensor<T> contract_time_graph(const Tensor<T>& g, const Tensor<T>& z) {
  if (g.rank() != 3 || z.rank() != 4 || g.dim(1) != g.dim(2) || g.dim(0) != z.dim(1) ||
      g.dim(1) != z.dim(2)) {
    throw DimensionError("contract_time_graph: graph " + to_string(g.shape()) +
                         " does not match features " + to_string(z.shape()));
  }
  const std::size_t B = z.dim(0), Tn = z.dim(1), N = z.dim(2), D = z.dim(3);
  std::vector<T> out(z.size(), T(0));
  const T* gv = g.vec().data();
  const T* zv = z.vec().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < Tn; ++t)
      kernels::gemm_nn(gv + t * N * N, zv + (b * Tn + t) * N * D, out.data() + (b * Tn + t) * N * D,
                       N, N, D);
  auto gn = g.node(), zn = z.node();
  return make_result<T>(z.shape(), std::move(out), {g, z}, [gn, zn, B, Tn, N, D](const Node<T>& o) {
    std::vector<T> scratch;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < Tn; ++t) {
        const std::size_t zo = (b * Tn + t) * N * D;
        if (zn->requires_grad)
          kernels::gemm_tn(gn->value.data() + t * N * N, o.grad.data() + zo,
                           zn->ensure_grad().data() + zo, N, N, D);
        if (gn->requires_grad)
          kernels::gemm_nt(o.grad.data() + zo, zn->value.data() + zo,
                           gn->ensure_grad().data() + t * N * N, N, D, N, scratch);
      }
    }
  });
}

/// out[r, :] = s[r] * a[r, :] where s covers every leading position of a.
template <class T>
Tensor<T> scale_rows(const Tensor<T>& a, const Tensor<T>& s) {
  const std::size_t n = a.dim(-1);
  if (s.size() * n != a.size() ||
      !std::equal(s.shape().begin(), s.shape().end(), a.shape().begin(), a.shape().end() - 1)) {
    throw DimensionError("scale_rows: weights " + to_string(s.shape()) + " do not cover " +
                         to_string(a.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t r = 0; r < s.size(); ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = s.vec()[r] * a.vec()[r * n + j];
  auto an = a.node(), sn = s.node();
  return make_result<T>(a.shape(), std::move(out), {a, s}, [an, sn, n](const Node<T>& o) {
    const std::size_t rows = sn->value.size();
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += sn->value[r] * o.grad[r * n + j];
    }
    if (sn->requires_grad) {
      auto& g = sn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += o.grad[r * n + j] * an->value[r * n + j];
        g[r] += acc;
      }
    }
  });
}

/// s[..., n] -> [..., n, n] with s on the diagonal.
template <class T>
Tensor<T> diag_embed(const Tensor<T>& s) {
  const std::size_t n = s.dim(-1);
  const std::size_t rows = s.size() / n;
  Shape shape = s.shape();
  shape.push_back(n);
  std::vector<T> out(rows * n * n, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < n; ++i) out[(r * n + i) * n + i] = s.vec()[r * n + i];
  auto sn = s.node();
  return make_result<T>(std::move(shape), std::move(out), {s}, [sn, n, rows](const Node<T>& o) {
    auto& g = sn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += o.grad[(r * n + i) * n + i];
  });
}

// ---------------------------------------------------------------------------
// Normalisation

/// Softmax over the last axis with max subtraction.
template <class T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  const std::size_t n = x.dim(-1);
  const auto& v = x.vec();
  std::vector<T> out(v.size());
  for (std::size_t r = 0; r < v.size(); r += n) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(v[r + j])) throw NumericError("softmax_last: NaN input");
      mx = std::max(mx, v[r + j]);
    }
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      out[r + j] = std::exp(v[r + j] - mx);
      z += out[r + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r + j] /= z;
  }
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {x}, [xn, n](const Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < o.value.size(); r += n) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += o.grad[r + j] * o.value[r + j];
      for (std::size_t j = 0; j < n; ++j) g[r + j] += o.value[r + j] * (o.grad[r + j] - dot);
    }
  });
}

/// Normalises every last-axis slice to mean 0 / variance 1, then applies gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  const std::size_t n = x.dim(-1);
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain " + to_string(gain.shape()) + " / bias " +
                         to_string(bias.shape()) + " do not match " + to_string(x.shape()));
  }
  const std::size_t rows = x.size() / n;
  const auto& v = x.vec();
  auto xhat = std::make_shared<std::vector<T>>(v.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = v.data() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (xr[j] - mu) * is;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = gain.vec()[j] * h + bias.vec()[j];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_result<T>(x.shape(), std::move(out), {x, gain, bias},
                        [xn, gn, bn, xhat, inv_std, n, rows](const Node<T>& o) {
                          if (gn->requires_grad) {
                            auto& g = gn->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < n; ++j)
                                g[j] += o.grad[r * n + j] * (*xhat)[r * n + j];
                          }
                          if (bn->requires_grad) {
                            auto& g = bn->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[r * n + j];
                          }
                          if (xn->requires_grad) {
                            auto& g = xn->ensure_grad();
                            std::vector<T> dh(n);
                            for (std::size_t r = 0; r < rows; ++r) {
                              T mean_dh = 0, mean_dh_h = 0;
                              for (std::size_t j = 0; j < n; ++j) {
                                dh[j] = o.grad[r * n + j] * gn->value[j];
                                mean_dh += dh[j];
                                mean_dh_h += dh[j] * (*xhat)[r * n + j];
                              }
                              mean_dh /= static_cast<T>(n);
                              mean_dh_h /= static_cast<T>(n);
                              for (std::size_t j = 0; j < n; ++j)
                                g[r * n + j] += (*inv_std)[r] *
                                                (dh[j] - mean_dh - (*xhat)[r * n + j] * mean_dh_h);
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Losses

/// sum(mask * |pred - target|) / sum(mask). `target` and `mask` carry no gradient.
template <class T>
Tensor<T> masked_mae(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask) {
  detail::require_same_shape(pred.shape(), target.shape(), "masked_mae");
  detail::require_same_shape(pred.shape(), mask.shape(), "masked_mae");
  T weight = 0, acc = 0;
  const auto& p = pred.vec();
  const auto& y = target.vec();
  const auto& w = mask.vec();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (w[i] != T(0)) {
      weight += w[i];
      acc += w[i] * std::abs(p[i] - y[i]);
    }
  }
  if (weight <= T(0)) throw ContractError("masked_mae: every element is masked out");
  auto pn = pred.node(), yn = target.node(), wn = mask.node();
  return make_result<T>({1}, {acc / weight}, {pred}, [pn, yn, wn, weight](const Node<T>& o) {
    auto& g = pn->ensure_grad();
    const T s = o.grad[0] / weight;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T d = pn->value[i] - yn->value[i];
      const T sign = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
      g[i] += s * wn->value[i] * sign;
    }
  });
}

}  // namespace dstgtn
