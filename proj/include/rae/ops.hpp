#pragma once

// Differentiable operations over Tape/Var. Forward loops delegate the heavy
// lifting to rae::kernels; backward closures accumulate additively so a
// parameter used several times (the shared mask query, tied weights) collects
// the sum of all its path gradients.

#include <cstddef>
#include <vector>

#include "rae/autodiff.hpp"
#include "rae/kernels.hpp"
#include "rae/rng.hpp"
#include "rae/tensor.hpp"

namespace rae {
namespace detail {

template <class T>
void accumulate(const std::shared_ptr<Node<T>>& n, const Tensor<T>& delta) {
  if (!n->requires_grad) return;
  Tensor<T>& g = n->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

template <class T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (!a.value().same_shape(b.value()))
    throw ShapeError(std::string(op) + ": " + shape_str(a.value().shape()) + " vs " +
                     shape_str(b.value().shape()));
}

// Rows/cols of the trailing dimension view: any tensor is treated as
// [size/last, last].
template <class T>
std::pair<std::size_t, std::size_t> lastdim_view(const Tensor<T>& t, const char* op) {
  if (t.ndim() < 1 || t.size() == 0) throw ContractError(std::string(op) + ": empty tensor");
  const std::size_t c = t.shape().back();
  return {t.size() / c, c};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  auto an = a.node(), bn = b.node();
  return a.tape()->make("add", std::move(out), {&a, &b}, [an, bn](Node<T>& o) {
    detail::accumulate(an, o.grad);
    detail::accumulate(bn, o.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  auto an = a.node(), bn = b.node();
  return a.tape()->make("sub", std::move(out), {&a, &b}, [an, bn](Node<T>& o) {
    detail::accumulate(an, o.grad);
    if (bn->requires_grad) {
      Tensor<T>& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto an = a.node(), bn = b.node();
  return a.tape()->make("mul", std::move(out), {&a, &b}, [an, bn](Node<T>& o) {
    if (an->requires_grad) {
      Tensor<T>& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      Tensor<T>& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->value[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
  auto an = a.node();
  return a.tape()->make("scale", std::move(out), {&a}, [an, s](Node<T>& o) {
    if (an->requires_grad) {
      Tensor<T>& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
    }
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + s;
  auto an = a.node();
  return a.tape()->make("add_scalar", std::move(out), {&a},
                        [an](Node<T>& o) { detail::accumulate(an, o.grad); });
}

template <class T>
Var<T> neg(const Var<T>& a) {
  return scale(a, T{-1});
}

// Elementwise addition of a fixed tensor (no gradient through the constant).
template <class T>
Var<T> add_constant(const Var<T>& a, const Tensor<T>& c) {
  if (!a.value().same_shape(c)) throw ShapeError("add_constant: shape mismatch");
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c[i];
  auto an = a.node();
  return a.tape()->make("add_constant", std::move(out), {&a},
                        [an](Node<T>& o) { detail::accumulate(an, o.grad); });
}

// y = x + b broadcast over rows; x is [*, C], b is {C}.
template <class T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& b) {
  auto [r, c] = detail::lastdim_view(x.value(), "add_rowvec");
  if (b.value().size() != c) throw ShapeError("add_rowvec: bias size mismatch");
  Tensor<T> out(x.value().shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.value()[i * c + j] + b.value()[j];
  auto xn = x.node(), bn = b.node();
  return x.tape()->make("add_rowvec", std::move(out), {&x, &b}, [xn, bn, r, c](Node<T>& o) {
    detail::accumulate(xn, o.grad);
    if (bn->requires_grad) {
      Tensor<T>& g = bn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows())
    throw ShapeError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor<T> out({m, n});
  kernels::matmul(av.data(), bv.data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return a.tape()->make("matmul", std::move(out), {&a, &b}, [an, bn, m, k, n](Node<T>& o) {
    if (an->requires_grad) {
      // dA = G * B^T
      Tensor<T> bt({n, k});
      kernels::transpose(bn->value.data(), bt.data(), k, n);
      Tensor<T> da({m, k});
      kernels::matmul(o.grad.data(), bt.data(), da.data(), m, n, k);
      detail::accumulate(an, da);
    }
    if (bn->requires_grad) {
      // dB = A^T * G
      Tensor<T> at({k, m});
      kernels::transpose(an->value.data(), at.data(), m, k);
      Tensor<T> db({k, n});
      kernels::matmul(at.data(), o.grad.data(), db.data(), k, m, n);
      detail::accumulate(bn, db);
    }
  });
}

template <class T>
Var<T> transpose2d(const Var<T>& a) {
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tensor<T> out({n, m});
  kernels::transpose(a.value().data(), out.data(), m, n);
  auto an = a.node();
  return a.tape()->make("transpose", std::move(out), {&a}, [an, m, n](Node<T>& o) {
    if (an->requires_grad) {
      Tensor<T> gt({m, n});
      kernels::transpose(o.grad.data(), gt.data(), n, m);
      detail::accumulate(an, gt);
    }
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(s);
  auto an = a.node();
  return a.tape()->make("reshape", std::move(out), {&a}, [an](Node<T>& o) {
    if (an->requires_grad) {
      Tensor<T>& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <class T>
Var<T> as_row(const Var<T>& v) {
  return reshape(v, Shape{1, v.value().size()});
}

template <class T>
Var<T> flatten(const Var<T>& v) {
  return reshape(v, Shape{v.value().size()});
}

// y = x W + b for x of shape [*, in]; leading dimensions are preserved.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  auto [r, in] = detail::lastdim_view(x.value(), "linear");
  if (w.value().ndim() != 2 || w.value().rows() != in)
    throw ShapeError("linear: input width " + std::to_string(in) + " vs weight " +
                     shape_str(w.value().shape()));
  const std::size_t out_w = w.value().cols();
  if (b.value().size() != out_w) throw ShapeError("linear: bias size mismatch");
  Var<T> x2 = reshape(x, Shape{r, in});
  Var<T> y = add_rowvec(matmul(x2, w), b);
  Shape out_shape = x.value().shape();
  out_shape.back() = out_w;
  return reshape(y, std::move(out_shape));
}

// ---------------------------------------------------------------------------
// slicing / stacking
// ---------------------------------------------------------------------------

template <class T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t count) {
  const std::size_t r = x.value().rows(), c = x.value().cols();
  if (begin + count > r) throw ShapeError("slice_rows: range out of bounds");
  Tensor<T> out({count, c});
  for (std::size_t i = 0; i < count * c; ++i) out[i] = x.value()[begin * c + i];
  auto xn = x.node();
  return x.tape()->make("slice_rows", std::move(out), {&x}, [xn, begin, c, count](Node<T>& o) {
    if (xn->requires_grad) {
      Tensor<T>& g = xn->ensure_grad();
      for (std::size_t i = 0; i < count * c; ++i) g[begin * c + i] += o.grad[i];
    }
  });
}

template <class T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> idx) {
  const std::size_t r = x.value().rows(), c = x.value().cols();
  for (std::size_t i : idx)
    if (i >= r) throw ShapeError("gather_rows: index out of bounds");
  Tensor<T> out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.value()[idx[i] * c + j];
  auto xn = x.node();
  return x.tape()->make("gather_rows", std::move(out), {&x}, [xn, idx = std::move(idx), c](Node<T>& o) {
    if (xn->requires_grad) {
      Tensor<T>& g = xn->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += o.grad[i * c + j];
    }
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t c = parts[0].value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != c) throw ShapeError("concat_rows: column mismatch");
    total += p.value().rows();
  }
  Tensor<T> out({total, c});
  std::size_t row = 0;
  std::vector<std::shared_ptr<Node<T>>> nodes;
  std::vector<std::size_t> offsets;
  bool any_grad = false;
  for (const auto& p : parts) {
    offsets.push_back(row);
    for (std::size_t i = 0; i < p.value().size(); ++i) out[row * c + i] = p.value()[i];
    row += p.value().rows();
    nodes.push_back(p.node());
    any_grad = any_grad || p.requires_grad();
  }
  // Assemble through make() on the first part's tape.
  auto bwd = [nodes, offsets, c](Node<T>& o) {
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      if (!nodes[p]->requires_grad) continue;
      Tensor<T>& g = nodes[p]->ensure_grad();
      const std::size_t base = offsets[p] * c;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[base + i];
    }
  };
  if (!any_grad) return parts[0].tape()->constant(std::move(out));
  Var<T> first = parts[0];
  return first.tape()->make("concat_rows", std::move(out), {&first}, std::move(bwd));
}

template <class T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t count) {
  const std::size_t r = x.value().rows(), c = x.value().cols();
  if (begin + count > c) throw ShapeError("slice_cols: range out of bounds");
  Tensor<T> out({r, count});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x.value()[i * c + begin + j];
  auto xn = x.node();
  return x.tape()->make("slice_cols", std::move(out), {&x}, [xn, begin, r, c, count](Node<T>& o) {
    if (xn->requires_grad) {
      Tensor<T>& g = xn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) g[i * c + begin + j] += o.grad[i * count + j];
    }
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t r = parts[0].value().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != r) throw ShapeError("concat_cols: row mismatch");
    total += p.value().cols();
  }
  Tensor<T> out({r, total});
  std::vector<std::shared_ptr<Node<T>>> nodes;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> widths;
  std::size_t col = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    const std::size_t w = p.value().cols();
    offsets.push_back(col);
    widths.push_back(w);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + col + j] = p.value()[i * w + j];
    col += w;
    nodes.push_back(p.node());
    any_grad = any_grad || p.requires_grad();
  }
  auto bwd = [nodes, offsets, widths, r, total](Node<T>& o) {
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      if (!nodes[p]->requires_grad) continue;
      Tensor<T>& g = nodes[p]->ensure_grad();
      const std::size_t w = widths[p];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * w + j] += o.grad[i * total + offsets[p] + j];
    }
  };
  if (!any_grad) return parts[0].tape()->constant(std::move(out));
  Var<T> first = parts[0];
  return first.tape()->make("concat_cols", std::move(out), {&first}, std::move(bwd));
}

// Concatenation of 1-D vectors.
template <class T>
Var<T> concat_flat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_flat: no inputs");
  std::size_t total = 0;
  for (const auto& p : parts) total += p.value().size();
  Tensor<T> out({total});
  std::vector<std::shared_ptr<Node<T>>> nodes;
  std::vector<std::size_t> offsets;
  std::size_t pos = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    offsets.push_back(pos);
    for (std::size_t i = 0; i < p.value().size(); ++i) out[pos + i] = p.value()[i];
    pos += p.value().size();
    nodes.push_back(p.node());
    any_grad = any_grad || p.requires_grad();
  }
  auto bwd = [nodes, offsets](Node<T>& o) {
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      if (!nodes[p]->requires_grad) continue;
      Tensor<T>& g = nodes[p]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[offsets[p] + i];
    }
  };
  if (!any_grad) return parts[0].tape()->constant(std::move(out));
  Var<T> first = parts[0];
  return first.tape()->make("concat_flat", std::move(out), {&first}, std::move(bwd));
}

template <class T>
Var<T> concat_rows(std::initializer_list<Var<T>> parts) {
  return concat_rows(std::vector<Var<T>>(parts));
}
template <class T>
Var<T> concat_cols(std::initializer_list<Var<T>> parts) {
  return concat_cols(std::vector<Var<T>>(parts));
}
template <class T>
Var<T> concat_flat(std::initializer_list<Var<T>> parts) {
  return concat_flat(std::vector<Var<T>>(parts));
}

// Broadcasts each row of x [G, C] into k consecutive copies -> [G*k, C].
template <class T>
Var<T> repeat_rows(const Var<T>& x, std::size_t k) {
  const std::size_t g_rows = x.value().rows(), c = x.value().cols();
  Tensor<T> out({g_rows * k, c});
  for (std::size_t g = 0; g < g_rows; ++g)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t col = 0; col < c; ++col) out[(g * k + j) * c + col] = x.value()[g * c + col];
  auto xn = x.node();
  return x.tape()->make("repeat_rows", std::move(out), {&x}, [xn, g_rows, k, c](Node<T>& o) {
    if (xn->requires_grad) {
      Tensor<T>& g = xn->ensure_grad();
      for (std::size_t gi = 0; gi < g_rows; ++gi)
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t col = 0; col < c; ++col) g[gi * c + col] += o.grad[(gi * k + j) * c + col];
    }
  });
}

// Max over each group of k consecutive rows: [G*k, C] -> [G, C]. Ties pick
// the lowest row so the gradient route is deterministic.
template <class T>
Var<T> segment_max_rows(const Var<T>& x, std::size_t k) {
  const std::size_t rows = x.value().rows(), c = x.value().cols();
  if (k == 0 || rows % k != 0) throw ShapeError("segment_max_rows: rows not divisible by group size");
  const std::size_t groups = rows / k;
  Tensor<T> out({groups, c});
  std::vector<std::size_t> arg(groups * c);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t col = 0; col < c; ++col) {
      T best = x.value()[(g * k) * c + col];
      std::size_t best_r = g * k;
      for (std::size_t j = 1; j < k; ++j) {
        const T v = x.value()[(g * k + j) * c + col];
        if (v > best) {
          best = v;
          best_r = g * k + j;
        }
      }
      out[g * c + col] = best;
      arg[g * c + col] = best_r;
    }
  auto xn = x.node();
  return x.tape()->make("segment_max_rows", std::move(out), {&x},
                        [xn, arg = std::move(arg), c](Node<T>& o) {
                          if (xn->requires_grad) {
                            Tensor<T>& g = xn->ensure_grad();
                            for (std::size_t i = 0; i < arg.size(); ++i)
                              g[arg[i] * c + (i % c)] += o.grad[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Var<T> reduce_sum(const Var<T>& x) {
  T acc{};
  for (std::size_t i = 0; i < x.value().size(); ++i) acc += x.value()[i];
  auto xn = x.node();
  return x.tape()->make("reduce_sum", Tensor<T>::scalar(acc), {&x}, [xn](Node<T>& o) {
    if (xn->requires_grad) {
      Tensor<T>& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0];
    }
  });
}

template <class T>
Var<T> reduce_mean(const Var<T>& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ContractError("reduce_mean: empty tensor");
  return scale(reduce_sum(x), T{1} / static_cast<T>(n));
}

// Column-wise max over rows: [R, C] -> {C}, argmax ties to the lowest row.
template <class T>
Var<T> max_over_rows(const Var<T>& x) {
  const std::size_t r = x.value().rows(), c = x.value().cols();
  if (r == 0) throw ContractError("max_over_rows: no rows");
  Tensor<T> out({c});
  std::vector<std::size_t> arg(c);
  for (std::size_t j = 0; j < c; ++j) {
    T best = x.value()[j];
    std::size_t best_r = 0;
    for (std::size_t i = 1; i < r; ++i) {
      const T v = x.value()[i * c + j];
      if (v > best) {
        best = v;
        best_r = i;
      }
    }
    out[j] = best;
    arg[j] = best_r;
  }
  auto xn = x.node();
  return x.tape()->make("max_over_rows", std::move(out), {&x},
                        [xn, arg = std::move(arg), c](Node<T>& o) {
                          if (xn->requires_grad) {
                            Tensor<T>& g = xn->ensure_grad();
                            for (std::size_t j = 0; j < c; ++j) g[arg[j] * c + j] += o.grad[j];
                          }
                        });
}

template <class T>
Var<T> mean_over_rows(const Var<T>& x) {
  const std::size_t r = x.value().rows(), c = x.value().cols();
  if (r == 0) throw ContractError("mean_over_rows: no rows");
  Tensor<T> out({c});
  for (std::size_t j = 0; j < c; ++j) {
    T acc{};
    for (std::size_t i = 0; i < r; ++i) acc += x.value()[i * c + j];
    out[j] = acc / static_cast<T>(r);
  }
  auto xn = x.node();
  return x.tape()->make("mean_over_rows", std::move(out), {&x}, [xn, r, c](Node<T>& o) {
    if (xn->requires_grad) {
      Tensor<T>& g = xn->ensure_grad();
      const T inv = T{1} / static_cast<T>(r);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j] * inv;
    }
  });
}

// Row sums: [R, C] -> {R}.
template <class T>
Var<T> sum_over_cols(const Var<T>& x) {
  const std::size_t r = x.value().rows(), c = x.value().cols();
  Tensor<T> out({r});
  for (std::size_t i = 0; i < r; ++i) {
    T acc{};
    for (std::size_t j = 0; j < c; ++j) acc += x.value()[i * c + j];
    out[i] = acc;
  }
  auto xn = x.node();
  return x.tape()->make("sum_over_cols", std::move(out), {&x}, [xn, r, c](Node<T>& o) {
    if (xn->requires_grad) {
      Tensor<T>& g = xn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// nonlinearities / normalization
// ---------------------------------------------------------------------------

// Tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline constexpr double kGeluCoeff = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluCubic = 0.044715;

template <class T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out(x.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.value()[i];
    const T inner = static_cast<T>(kGeluCoeff) * (v + static_cast<T>(kGeluCubic) * v * v * v);
    out[i] = T{0.5} * v * (T{1} + std::tanh(inner));
  }
  auto xn = x.node();
  return x.tape()->make("gelu", std::move(out), {&x}, [xn](Node<T>& o) {
    if (!xn->requires_grad) return;
    Tensor<T>& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xn->value[i];
      const T inner = static_cast<T>(kGeluCoeff) * (v + static_cast<T>(kGeluCubic) * v * v * v);
      const T t = std::tanh(inner);
      const T dinner = static_cast<T>(kGeluCoeff) * (T{1} + T{3} * static_cast<T>(kGeluCubic) * v * v);
      g[i] += o.grad[i] * (T{0.5} * (T{1} + t) + T{0.5} * v * (T{1} - t * t) * dinner);
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] > T{} ? x.value()[i] : T{};
  auto xn = x.node();
  return x.tape()->make("relu", std::move(out), {&x}, [xn](Node<T>& o) {
    if (!xn->requires_grad) return;
    Tensor<T>& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xn->value[i] > T{}) g[i] += o.grad[i];
  });
}

// Softmax along the trailing dimension, stabilized by per-row max
// subtraction.
template <class T>
Var<T> softmax_lastdim(const Var<T>& x) {
  auto [r, c] = detail::lastdim_view(x.value(), "softmax_lastdim");
  Tensor<T> out(x.value().shape());
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.value().data() + i * c;
    T mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T denom{};
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(row[j] - mx);
      denom += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= denom;
  }
  auto xn = x.node();
  return x.tape()->make("softmax_lastdim", std::move(out), {&x}, [xn, r, c](Node<T>& o) {
    if (!xn->requires_grad) return;
    Tensor<T>& g = xn->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      const T* y = o.value.data() + i * c;
      const T* gy = o.grad.data() + i * c;
      T dot{};
      for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

// Layer normalization over the trailing dimension (population variance),
// then per-feature affine.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  if (eps <= T{}) throw ContractError("layer_norm: eps must be positive");
  auto [r, c] = detail::lastdim_view(x.value(), "layer_norm");
  if (gamma.value().size() != c || beta.value().size() != c)
    throw ShapeError("layer_norm: affine size mismatch");
  Tensor<T> out(x.value().shape());
  Tensor<T> xhat(x.value().shape());
  std::vector<T> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.value().data() + i * c;
    T mean{};
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<T>(c);
    T var{};
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(c);
    const T inv = T{1} / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mean) * inv;
      out[i * c + j] = gamma.value()[j] * xhat[i * c + j] + beta.value()[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return x.tape()->make(
      "layer_norm", std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c](Node<T>& o) {
        if (bn->requires_grad) {
          Tensor<T>& g = bn->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
        }
        if (gn->requires_grad) {
          Tensor<T>& g = gn->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j] * xhat[i * c + j];
        }
        if (xn->requires_grad) {
          Tensor<T>& g = xn->ensure_grad();
          for (std::size_t i = 0; i < r; ++i) {
            T mean_dxhat{}, mean_dxhat_xhat{};
            std::vector<T> dxhat(c);
            for (std::size_t j = 0; j < c; ++j) {
              dxhat[j] = o.grad[i * c + j] * gn->value[j];
              mean_dxhat += dxhat[j];
              mean_dxhat_xhat += dxhat[j] * xhat[i * c + j];
            }
            mean_dxhat /= static_cast<T>(c);
            mean_dxhat_xhat /= static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j)
              g[i * c + j] += inv_std[i] * (dxhat[j] - mean_dxhat - xhat[i * c + j] * mean_dxhat_xhat);
          }
        }
      });
}

// Inverted dropout; identity (and no tape node) when not training.
template <class T>
Var<T> dropout(const Var<T>& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout: rate must be < 1");
  Tensor<T> mask(x.value().shape());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() >= p ? keep_scale : T{};
  Tensor<T> out(x.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * mask[i];
  auto xn = x.node();
  return x.tape()->make("dropout", std::move(out), {&x}, [xn, mask = std::move(mask)](Node<T>& o) {
    if (!xn->requires_grad) return;
    Tensor<T>& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * mask[i];
  });
}

// Batch normalization over the batch dimension of [B, C]. In training mode
// batch statistics normalize and the running buffers are updated in place;
// in eval mode the running buffers normalize. Training requires B >= 2.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>* running_mean,
                  Tensor<T>* running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const std::size_t b = x.value().rows(), c = x.value().cols();
  if (gamma.value().size() != c || beta.value().size() != c)
    throw ShapeError("batch_norm: affine size mismatch");
  if (training && b < 2) throw ContractError("batch_norm: training requires batch >= 2");
  Tensor<T> out({b, c});
  Tensor<T> xhat({b, c});
  std::vector<T> inv_std(c);
  if (training) {
    for (std::size_t j = 0; j < c; ++j) {
      T mean{};
      for (std::size_t i = 0; i < b; ++i) mean += x.value()[i * c + j];
      mean /= static_cast<T>(b);
      T var{};
      for (std::size_t i = 0; i < b; ++i) {
        const T d = x.value()[i * c + j] - mean;
        var += d * d;
      }
      var /= static_cast<T>(b);
      const T inv = T{1} / std::sqrt(var + eps);
      inv_std[j] = inv;
      for (std::size_t i = 0; i < b; ++i) {
        xhat[i * c + j] = (x.value()[i * c + j] - mean) * inv;
        out[i * c + j] = gamma.value()[j] * xhat[i * c + j] + beta.value()[j];
      }
      (*running_mean)[j] = (T{1} - momentum) * (*running_mean)[j] + momentum * mean;
      const T unbiased = var * static_cast<T>(b) / static_cast<T>(b - 1);
      (*running_var)[j] = (T{1} - momentum) * (*running_var)[j] + momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      const T inv = T{1} / std::sqrt((*running_var)[j] + eps);
      inv_std[j] = inv;
      for (std::size_t i = 0; i < b; ++i) {
        xhat[i * c + j] = (x.value()[i * c + j] - (*running_mean)[j]) * inv;
        out[i * c + j] = gamma.value()[j] * xhat[i * c + j] + beta.value()[j];
      }
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return x.tape()->make(
      "batch_norm", std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), b, c, training](Node<T>& o) {
        if (bn->requires_grad) {
          Tensor<T>& g = bn->ensure_grad();
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
        }
        if (gn->requires_grad) {
          Tensor<T>& g = gn->ensure_grad();
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j] * xhat[i * c + j];
        }
        if (xn->requires_grad) {
          Tensor<T>& g = xn->ensure_grad();
          if (training) {
            for (std::size_t j = 0; j < c; ++j) {
              T mean_d{}, mean_dx{};
              for (std::size_t i = 0; i < b; ++i) {
                const T d = o.grad[i * c + j] * gn->value[j];
                mean_d += d;
                mean_dx += d * xhat[i * c + j];
              }
              mean_d /= static_cast<T>(b);
              mean_dx /= static_cast<T>(b);
              for (std::size_t i = 0; i < b; ++i) {
                const T d = o.grad[i * c + j] * gn->value[j];
                g[i * c + j] += inv_std[j] * (d - mean_d - xhat[i * c + j] * mean_dx);
              }
            }
          } else {
            for (std::size_t i = 0; i < b; ++i)
              for (std::size_t j = 0; j < c; ++j)
                g[i * c + j] += o.grad[i * c + j] * gn->value[j] * inv_std[j];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Rows scaled to unit Euclidean norm. Zero-norm rows are a contract error.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x) {
  const std::size_t r = x.value().rows(), c = x.value().cols();
  Tensor<T> out({r, c});
  std::vector<T> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    T acc{};
    for (std::size_t j = 0; j < c; ++j) acc += x.value()[i * c + j] * x.value()[i * c + j];
    const T n = std::sqrt(acc);
    if (!(n > T{})) throw ContractError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    norms[i] = n;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.value()[i * c + j] / n;
  }
  auto xn = x.node();
  return x.tape()->make("l2_normalize_rows", std::move(out), {&x},
                        [xn, norms = std::move(norms), r, c](Node<T>& o) {
                          if (!xn->requires_grad) return;
                          Tensor<T>& g = xn->ensure_grad();
                          for (std::size_t i = 0; i < r; ++i) {
                            const T* y = o.value.data() + i * c;
                            const T* gy = o.grad.data() + i * c;
                            T dot{};
                            for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
                            for (std::size_t j = 0; j < c; ++j)
                              g[i * c + j] += (gy[j] - dot * y[j]) / norms[i];
                          }
                        });
}

// 1 - cos(s, t) over flattened inputs; in [0, 2]. Gradient flows to both
// sides when both require it.
template <class T>
Var<T> cosine_loss(const Var<T>& s, const Var<T>& t) {
  if (s.value().size() != t.value().size()) throw ShapeError("cosine_loss: size mismatch");
  const std::size_t n = s.value().size();
  T dot{}, na{}, nb{};
  for (std::size_t i = 0; i < n; ++i) {
    dot += s.value()[i] * t.value()[i];
    na += s.value()[i] * s.value()[i];
    nb += t.value()[i] * t.value()[i];
  }
  const T a = std::sqrt(na), b = std::sqrt(nb);
  if (!(a > T{}) || !(b > T{})) throw ContractError("cosine_loss: zero-norm input");
  const T cosv = dot / (a * b);
  auto sn = s.node(), tn = t.node();
  return s.tape()->make("cosine_loss", Tensor<T>::scalar(T{1} - cosv), {&s, &t},
                        [sn, tn, dot, a, b, n](Node<T>& o) {
                          const T g = o.grad[0];
                          if (sn->requires_grad) {
                            Tensor<T>& gs = sn->ensure_grad();
                            for (std::size_t i = 0; i < n; ++i)
                              gs[i] += g * (dot * sn->value[i] / (a * a * a * b) -
                                            tn->value[i] / (a * b));
                          }
                          if (tn->requires_grad) {
                            Tensor<T>& gt = tn->ensure_grad();
                            for (std::size_t i = 0; i < n; ++i)
                              gt[i] += g * (dot * tn->value[i] / (b * b * b * a) -
                                            sn->value[i] / (a * b));
                          }
                        });
}

// Mean over all elements of (a - b)^2.
template <class T>
Var<T> mse_mean(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("mse_mean", a, b);
  const std::size_t n = a.value().size();
  T acc{};
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  auto an = a.node(), bn = b.node();
  return a.tape()->make("mse_mean", Tensor<T>::scalar(acc / static_cast<T>(n)), {&a, &b},
                        [an, bn, n](Node<T>& o) {
                          const T s = o.grad[0] * T{2} / static_cast<T>(n);
                          if (an->requires_grad) {
                            Tensor<T>& g = an->ensure_grad();
                            for (std::size_t i = 0; i < n; ++i)
                              g[i] += s * (an->value[i] - bn->value[i]);
                          }
                          if (bn->requires_grad) {
                            Tensor<T>& g = bn->ensure_grad();
                            for (std::size_t i = 0; i < n; ++i)
                              g[i] -= s * (an->value[i] - bn->value[i]);
                          }
                        });
}

// Mean cross-entropy of logits [B, C] against integer labels.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::size_t>& labels) {
  const std::size_t b = logits.value().rows(), c = logits.value().cols();
  if (labels.size() != b) throw ContractError("cross_entropy: label count mismatch");
  for (std::size_t y : labels)
    if (y >= c) throw ContractError("cross_entropy: label out of range");
  Tensor<T> probs({b, c});
  T loss{};
  for (std::size_t i = 0; i < b; ++i) {
    const T* row = logits.value().data() + i * c;
    T mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T denom{};
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(row[j] - mx);
      denom += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= denom;
    loss += std::log(denom) + mx - row[labels[i]];
  }
  loss /= static_cast<T>(b);
  auto ln = logits.node();
  return logits.tape()->make("cross_entropy", Tensor<T>::scalar(loss), {&logits},
                             [ln, probs = std::move(probs), labels, b, c](Node<T>& o) {
                               if (!ln->requires_grad) return;
                               Tensor<T>& g = ln->ensure_grad();
                               const T s = o.grad[0] / static_cast<T>(b);
                               for (std::size_t i = 0; i < b; ++i)
                                 for (std::size_t j = 0; j < c; ++j) {
                                   T p = probs[i * c + j];
                                   if (j == labels[i]) p -= T{1};
                                   g[i * c + j] += s * p;
                                 }
                             });
}

// Symmetric squared Chamfer distance between two point sets [n,3]:
// mean over a of the nearest squared distance into b, plus the reverse term.
template <class T>
Var<T> chamfer_l2(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.ndim() != 2 || av.cols() != 3 || bv.ndim() != 2 || bv.cols() != 3)
    throw ShapeError("chamfer_l2: inputs must be [n,3]");
  const std::size_t na = av.rows(), nb = bv.rows();
  if (na == 0 || nb == 0) throw ContractError("chamfer_l2: empty point set");
  std::vector<T> da(na), db(nb);
  std::vector<std::size_t> ja(na), jb(nb);
  kernels::nearest_in_set(av.data(), na, bv.data(), nb, da.data(), ja.data());
  kernels::nearest_in_set(bv.data(), nb, av.data(), na, db.data(), jb.data());
  T sum_a{}, sum_b{};
  for (std::size_t i = 0; i < na; ++i) sum_a += da[i];
  for (std::size_t j = 0; j < nb; ++j) sum_b += db[j];
  const T value = sum_a / static_cast<T>(na) + sum_b / static_cast<T>(nb);
  auto an = a.node(), bn = b.node();
  return a.tape()->make(
      "chamfer_l2", Tensor<T>::scalar(value), {&a, &b},
      [an, bn, ja = std::move(ja), jb = std::move(jb), na, nb](Node<T>& o) {
        const T g = o.grad[0];
        const T wa = g * T{2} / static_cast<T>(na);
        const T wb = g * T{2} / static_cast<T>(nb);
        Tensor<T>* ga = an->requires_grad ? &an->ensure_grad() : nullptr;
        Tensor<T>* gb = bn->requires_grad ? &bn->ensure_grad() : nullptr;
        for (std::size_t i = 0; i < na; ++i) {
          const std::size_t j = ja[i];
          for (std::size_t d = 0; d < 3; ++d) {
            const T diff = an->value[i * 3 + d] - bn->value[j * 3 + d];
            if (ga) (*ga)[i * 3 + d] += wa * diff;
            if (gb) (*gb)[j * 3 + d] -= wa * diff;
          }
        }
        for (std::size_t j = 0; j < nb; ++j) {
          const std::size_t i = jb[j];
          for (std::size_t d = 0; d < 3; ++d) {
            const T diff = bn->value[j * 3 + d] - an->value[i * 3 + d];
            if (gb) (*gb)[j * 3 + d] += wb * diff;
            if (ga) (*ga)[i * 3 + d] -= wb * diff;
          }
        }
      });
}

}  // namespace rae
