#include "hivit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hivit/kernels.hpp"

namespace hivit {
namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Gradient buffer of an input, or null when it does not need one.
template <typename T>
T* grad_buf(const NodePtr<T>& n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

Shape batch_dims(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

Shape broadcast_shape(const Shape& a, const Shape& b, const Shape& fa, const Shape& fb) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("matmul: batch extents not broadcastable: " + shape_str(fa) + " x " +
                       shape_str(fb));
    out[i] = std::max(da, db);
  }
  return out;
}

// For each linear index of `out`, the linear index into broadcast source `in`.
std::vector<std::int64_t> broadcast_map(const Shape& in, const Shape& out) {
  const std::int64_t total = shape_numel(out);
  std::vector<std::int64_t> map(static_cast<std::size_t>(total));
  const std::size_t off = out.size() - in.size();
  std::vector<std::int64_t> coord(out.size(), 0);
  for (std::int64_t lin = 0; lin < total; ++lin) {
    std::int64_t src = 0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const auto c = in[i] == 1 ? 0 : coord[i + off];
      src = src * in[i] + c;
    }
    map[static_cast<std::size_t>(lin)] = src;
    for (std::size_t i = out.size(); i-- > 0;) {
      if (++coord[i] < out[i]) break;
      coord[i] = 0;
    }
  }
  return map;
}

void check_index_list(std::span<const std::int64_t> idx, std::int64_t count, std::int64_t lists,
                      std::int64_t limit, const char* op) {
  if (static_cast<std::int64_t>(idx.size()) != count * lists)
    throw IndexError(std::string(op) + ": index list has " + std::to_string(idx.size()) +
                     " entries, expected " + std::to_string(count * lists));
  std::vector<char> seen(static_cast<std::size_t>(limit));
  for (std::int64_t l = 0; l < lists; ++l) {
    std::fill(seen.begin(), seen.end(), 0);
    for (std::int64_t i = 0; i < count; ++i) {
      const auto v = idx[static_cast<std::size_t>(l * count + i)];
      if (v < 0 || v >= limit)
        throw IndexError(std::string(op) + ": index " + std::to_string(v) + " outside [0, " +
                         std::to_string(limit) + ")");
      if (seen[static_cast<std::size_t>(v)]++)
        throw IndexError(std::string(op) + ": duplicate index " + std::to_string(v));
    }
  }
}

// Number of lists in a shared-or-per-batch index span.
std::int64_t index_lists(std::span<const std::int64_t> idx, std::int64_t count,
                         std::int64_t batch) {
  if (static_cast<std::int64_t>(idx.size()) == count) return 1;
  return batch;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::int64_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const Shape ba = batch_dims(a.shape()), bb = batch_dims(b.shape());
  Shape out_batch = broadcast_shape(ba, bb, a.shape(), b.shape());
  const auto map_a = broadcast_map(ba, out_batch);
  const auto map_b = broadcast_map(bb, out_batch);
  const std::int64_t batches = shape_numel(out_batch);
  std::vector<T> out(static_cast<std::size_t>(batches * m * n));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::int64_t i = 0; i < batches; ++i)
    kernels::gemm(false, false, m, n, k, ad + map_a[i] * m * k, bd + map_b[i] * k * n,
                  out.data() + i * m * n, false);
  Shape shape = out_batch;
  shape.push_back(m);
  shape.push_back(n);
  return make_result<T>("matmul", std::move(shape), std::move(out), {a.ptr(), b.ptr()},
                        [=](Node<T>& self) {
                          const auto& na = self.inputs[0];
                          const auto& nb = self.inputs[1];
                          T* ga = grad_buf(na);
                          T* gb = grad_buf(nb);
                          const T* g = self.grad.data();
                          for (std::int64_t i = 0; i < batches; ++i) {
                            const T* gi = g + i * m * n;
                            if (ga)
                              kernels::gemm(false, true, m, k, n, gi, nb->data.data() + map_b[i] * k * n,
                                            ga + map_a[i] * m * k, true);
                            if (gb)
                              kernels::gemm(true, false, k, n, m, na->data.data() + map_a[i] * m * k, gi,
                                            gb + map_b[i] * k * n, true);
                          }
                        });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank < 2: " + shape_str(x.shape()));
  const std::int64_t r = x.dim(-2), c = x.dim(-1);
  const std::int64_t batches = x.numel() / std::max<std::int64_t>(r * c, 1);
  std::vector<T> out(x.data().size());
  const T* xd = x.data().data();
  for (std::int64_t b = 0; b < batches; ++b)
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = xd[b * r * c + i * c + j];
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return make_result<T>("transpose_last2", std::move(shape), std::move(out), {x.ptr()},
                        [=](Node<T>& self) {
                          T* gx = grad_buf(self.inputs[0]);
                          const T* g = self.grad.data();
                          for (std::int64_t b = 0; b < batches; ++b)
                            for (std::int64_t i = 0; i < r; ++i)
                              for (std::int64_t j = 0; j < c; ++j)
                                gx[b * r * c + i * c + j] += g[b * r * c + j * r + i];
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(0))
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(w.shape()));
  const std::int64_t in = w.dim(0), outf = w.dim(1);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != outf))
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " vs weight " +
                     shape_str(w.shape()));
  const std::int64_t rows = in ? x.numel() / in : 0;
  std::vector<T> out(static_cast<std::size_t>(rows * outf));
  kernels::gemm(false, false, rows, outf, in, x.data().data(), w.data().data(), out.data(), false);
  if (b.defined()) {
    const T* bd = b.data().data();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < outf; ++j) out[r * outf + j] += bd[j];
  }
  Shape shape = x.shape();
  shape.back() = outf;
  std::vector<NodePtr<T>> inputs{x.ptr(), w.ptr()};
  const bool has_bias = b.defined();
  if (has_bias) inputs.push_back(b.ptr());
  return make_result<T>("linear", std::move(shape), std::move(out), std::move(inputs),
                        [=](Node<T>& self) {
                          const auto& nx = self.inputs[0];
                          const auto& nw = self.inputs[1];
                          const T* g = self.grad.data();
                          if (T* gx = grad_buf(nx))
                            kernels::gemm(false, true, rows, in, outf, g, nw->data.data(), gx, true);
                          if (T* gw = grad_buf(nw))
                            kernels::gemm(true, false, in, outf, rows, nx->data.data(), g, gw, true);
                          if (has_bias) {
                            if (T* gb = grad_buf(self.inputs[2]))
                              for (std::int64_t r = 0; r < rows; ++r)
                                for (std::int64_t j = 0; j < outf; ++j) gb[j] += g[r * outf + j];
                          }
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.begin(), sb.end(), sa.end() - sb.size()))
    throw ShapeError("add: " + shape_str(sb) + " is not a suffix of " + shape_str(sa));
  const std::int64_t na = a.numel(), nb = std::max<std::int64_t>(b.numel(), 1);
  std::vector<T> out(static_cast<std::size_t>(na));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::int64_t i = 0; i < na; ++i) out[i] = ad[i] + bd[i % nb];
  return make_result<T>("add", sa, std::move(out), {a.ptr(), b.ptr()}, [=](Node<T>& self) {
    const T* g = self.grad.data();
    if (T* ga = grad_buf(self.inputs[0]))
      for (std::int64_t i = 0; i < na; ++i) ga[i] += g[i];
    if (T* gb = grad_buf(self.inputs[1]))
      for (std::int64_t i = 0; i < na; ++i) gb[i % nb] += g[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::int64_t n = a.numel();
  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a.ptr(), b.ptr()}, [=](Node<T>& self) {
    const T* g = self.grad.data();
    const auto& na = self.inputs[0];
    const auto& nb = self.inputs[1];
    if (T* ga = grad_buf(na))
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * nb->data[i];
    if (T* gb = grad_buf(nb))
      for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * na->data[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  const std::int64_t n = x.numel();
  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[i] = x.data()[i] * s;
  return make_result<T>("scale", x.shape(), std::move(out), {x.ptr()}, [=](Node<T>& self) {
    T* gx = grad_buf(self.inputs[0]);
    for (std::int64_t i = 0; i < n; ++i) gx[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1 || x.dim(-1) < 1)
    throw ShapeError("softmax_lastdim: empty last axis in " + shape_str(x.shape()));
  const std::int64_t cols = x.dim(-1), rows = x.numel() / cols;
  std::vector<T> out(x.data().size());
  kernels::softmax_rows(x.data().data(), out.data(), rows, cols);
  bool bad = false;
  for (T v : x.data()) bad = bad || !std::isfinite(v);
  auto result = make_result<T>("softmax_lastdim", x.shape(), std::move(out), {x.ptr()},
                               [=](Node<T>& self) {
                                 T* gx = grad_buf(self.inputs[0]);
                                 kernels::softmax_rows_backward(self.data.data(), self.grad.data(),
                                                                gx, rows, cols);
                               });
  if (bad) result.node()->nonfinite = true;
  return result;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::int64_t cols = x.dim(-1);
  if (gamma.numel() != cols || beta.numel() != cols)
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + " vs input " +
                     shape_str(x.shape()));
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  const std::int64_t rows = x.numel() / cols;
  std::vector<T> out(x.data().size());
  std::vector<T> mu(static_cast<std::size_t>(rows)), rs(static_cast<std::size_t>(rows));
  kernels::layer_norm_rows(x.data().data(), gamma.data().data(), beta.data().data(), eps,
                           out.data(), mu.data(), rs.data(), rows, cols);
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x.ptr(), gamma.ptr(), beta.ptr()},
      [=, mu = std::move(mu), rs = std::move(rs)](Node<T>& self) {
        const auto& nx = self.inputs[0];
        const auto& ng = self.inputs[1];
        kernels::layer_norm_rows_backward(nx->data.data(), ng->data.data(), mu.data(), rs.data(),
                                          self.grad.data(), grad_buf(nx), grad_buf(ng),
                                          grad_buf(self.inputs[2]), rows, cols);
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const std::int64_t n = x.numel();
  std::vector<T> out(static_cast<std::size_t>(n));
  kernels::gelu(x.data().data(), out.data(), n);
  return make_result<T>("gelu", x.shape(), std::move(out), {x.ptr()}, [=](Node<T>& self) {
    const auto& nx = self.inputs[0];
    kernels::gelu_backward(nx->data.data(), self.grad.data(), grad_buf(nx), n);
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {x.ptr()},
                        [](Node<T>& self) {
                          T* gx = grad_buf(self.inputs[0]);
                          for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> gather_units(const Tensor<T>& x, std::span<const std::int64_t> idx, std::int64_t count) {
  if (x.rank() < 2) throw ShapeError("gather_units: rank < 2: " + shape_str(x.shape()));
  const std::int64_t batch = x.dim(0), units = x.dim(1);
  const std::int64_t row = units ? x.numel() / (batch * units) : 0;
  const std::int64_t lists = index_lists(idx, count, batch);
  check_index_list(idx, count, lists, units, "gather_units");
  std::vector<std::int64_t> map(idx.begin(), idx.end());
  std::vector<T> out(static_cast<std::size_t>(batch * count * row));
  const T* xd = x.data().data();
  for (std::int64_t b = 0; b < batch; ++b) {
    const std::int64_t* li = map.data() + (lists == 1 ? 0 : b * count);
    for (std::int64_t i = 0; i < count; ++i)
      std::copy_n(xd + (b * units + li[i]) * row, row, out.data() + (b * count + i) * row);
  }
  Shape shape = x.shape();
  shape[1] = count;
  return make_result<T>("gather_units", std::move(shape), std::move(out), {x.ptr()},
                        [=, map = std::move(map)](Node<T>& self) {
                          T* gx = grad_buf(self.inputs[0]);
                          const T* g = self.grad.data();
                          for (std::int64_t b = 0; b < batch; ++b) {
                            const std::int64_t* li = map.data() + (lists == 1 ? 0 : b * count);
                            for (std::int64_t i = 0; i < count; ++i) {
                              T* dst = gx + (b * units + li[i]) * row;
                              const T* src = g + (b * count + i) * row;
                              for (std::int64_t j = 0; j < row; ++j) dst[j] += src[j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> scatter_units(const Tensor<T>& x, std::span<const std::int64_t> idx, std::int64_t total,
                        const Tensor<T>& fill) {
  if (x.rank() < 2) throw ShapeError("scatter_units: rank < 2: " + shape_str(x.shape()));
  const std::int64_t batch = x.dim(0), count = x.dim(1);
  const std::int64_t row = fill.numel();
  if (count * batch * row != x.numel())
    throw ShapeError("scatter_units: fill " + shape_str(fill.shape()) + " does not match rows of " +
                     shape_str(x.shape()));
  const std::int64_t lists = index_lists(idx, count, batch);
  check_index_list(idx, count, lists, total, "scatter_units");
  std::vector<std::int64_t> map(idx.begin(), idx.end());
  std::vector<T> out(static_cast<std::size_t>(batch * total * row));
  const T* fd = fill.data().data();
  for (std::int64_t r = 0; r < batch * total; ++r) std::copy_n(fd, row, out.data() + r * row);
  const T* xd = x.data().data();
  for (std::int64_t b = 0; b < batch; ++b) {
    const std::int64_t* li = map.data() + (lists == 1 ? 0 : b * count);
    for (std::int64_t i = 0; i < count; ++i)
      std::copy_n(xd + (b * count + i) * row, row, out.data() + (b * total + li[i]) * row);
  }
  Shape shape = x.shape();
  shape[1] = total;
  return make_result<T>(
      "scatter_units", std::move(shape), std::move(out), {x.ptr(), fill.ptr()},
      [=, map = std::move(map)](Node<T>& self) {
        T* gx = grad_buf(self.inputs[0]);
        T* gf = grad_buf(self.inputs[1]);
        const T* g = self.grad.data();
        std::vector<char> placed(static_cast<std::size_t>(total));
        for (std::int64_t b = 0; b < batch; ++b) {
          const std::int64_t* li = map.data() + (lists == 1 ? 0 : b * count);
          std::fill(placed.begin(), placed.end(), 0);
          for (std::int64_t i = 0; i < count; ++i) {
            placed[static_cast<std::size_t>(li[i])] = 1;
            if (gx)
              for (std::int64_t j = 0; j < row; ++j)
                gx[(b * count + i) * row + j] += g[(b * total + li[i]) * row + j];
          }
          if (gf)
            for (std::int64_t u = 0; u < total; ++u)
              if (!placed[static_cast<std::size_t>(u)])
                for (std::int64_t j = 0; j < row; ++j) gf[j] += g[(b * total + u) * row + j];
        }
      });
}

template <typename T>
Tensor<T> replace_units(const Tensor<T>& x, std::span<const std::int64_t> idx, std::int64_t count,
                        const Tensor<T>& fill) {
  if (x.rank() < 2) throw ShapeError("replace_units: rank < 2: " + shape_str(x.shape()));
  const std::int64_t batch = x.dim(0), units = x.dim(1);
  const std::int64_t row = fill.numel();
  if (batch * units * row != x.numel())
    throw ShapeError("replace_units: fill " + shape_str(fill.shape()) + " does not match rows of " +
                     shape_str(x.shape()));
  const std::int64_t lists = index_lists(idx, count, batch);
  check_index_list(idx, count, lists, units, "replace_units");
  std::vector<std::int64_t> map(idx.begin(), idx.end());
  std::vector<T> out(x.data().begin(), x.data().end());
  const T* fd = fill.data().data();
  for (std::int64_t b = 0; b < batch; ++b) {
    const std::int64_t* li = map.data() + (lists == 1 ? 0 : b * count);
    for (std::int64_t i = 0; i < count; ++i)
      std::copy_n(fd, row, out.data() + (b * units + li[i]) * row);
  }
  return make_result<T>(
      "replace_units", x.shape(), std::move(out), {x.ptr(), fill.ptr()},
      [=, map = std::move(map)](Node<T>& self) {
        T* gx = grad_buf(self.inputs[0]);
        T* gf = grad_buf(self.inputs[1]);
        const T* g = self.grad.data();
        std::vector<char> replaced(static_cast<std::size_t>(units));
        for (std::int64_t b = 0; b < batch; ++b) {
          const std::int64_t* li = map.data() + (lists == 1 ? 0 : b * count);
          std::fill(replaced.begin(), replaced.end(), 0);
          for (std::int64_t i = 0; i < count; ++i) replaced[static_cast<std::size_t>(li[i])] = 1;
          for (std::int64_t u = 0; u < units; ++u) {
            const T* src = g + (b * units + u) * row;
            if (replaced[static_cast<std::size_t>(u)]) {
              if (gf)
                for (std::int64_t j = 0; j < row; ++j) gf[j] += src[j];
            } else if (gx) {
              for (std::int64_t j = 0; j < row; ++j) gx[(b * units + u) * row + j] += src[j];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> select_heads(const Tensor<T>& qkv, int part, std::int64_t heads) {
  if (qkv.rank() != 3 || heads <= 0 || qkv.dim(2) % (3 * heads) != 0 || part < 0 || part > 2)
    throw ShapeError("select_heads: cannot split " + shape_str(qkv.shape()) + " into 3 x " +
                     std::to_string(heads) + " heads");
  const std::int64_t batch = qkv.dim(0), n = qkv.dim(1), width = qkv.dim(2);
  const std::int64_t dh = width / (3 * heads);
  std::vector<T> out(static_cast<std::size_t>(batch * heads * n * dh));
  const T* src = qkv.data().data();
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t t = 0; t < n; ++t)
        std::copy_n(src + (b * n + t) * width + (part * heads + h) * dh, dh,
                    out.data() + ((b * heads + h) * n + t) * dh);
  return make_result<T>("select_heads", {batch, heads, n, dh}, std::move(out), {qkv.ptr()},
                        [=](Node<T>& self) {
                          T* gq = grad_buf(self.inputs[0]);
                          const T* g = self.grad.data();
                          for (std::int64_t b = 0; b < batch; ++b)
                            for (std::int64_t h = 0; h < heads; ++h)
                              for (std::int64_t t = 0; t < n; ++t) {
                                T* dst = gq + (b * n + t) * width + (part * heads + h) * dh;
                                const T* s = g + ((b * heads + h) * n + t) * dh;
                                for (std::int64_t d = 0; d < dh; ++d) dst[d] += s[d];
                              }
                        });
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("merge_heads: expected rank 4, got " + shape_str(x.shape()));
  const std::int64_t batch = x.dim(0), heads = x.dim(1), n = x.dim(2), dh = x.dim(3);
  std::vector<T> out(x.data().size());
  const T* src = x.data().data();
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t t = 0; t < n; ++t)
        std::copy_n(src + ((b * heads + h) * n + t) * dh, dh,
                    out.data() + (b * n + t) * heads * dh + h * dh);
  return make_result<T>("merge_heads", {batch, n, heads * dh}, std::move(out), {x.ptr()},
                        [=](Node<T>& self) {
                          T* gx = grad_buf(self.inputs[0]);
                          const T* g = self.grad.data();
                          for (std::int64_t b = 0; b < batch; ++b)
                            for (std::int64_t h = 0; h < heads; ++h)
                              for (std::int64_t t = 0; t < n; ++t) {
                                T* dst = gx + ((b * heads + h) * n + t) * dh;
                                const T* s = g + (b * n + t) * heads * dh + h * dh;
                                for (std::int64_t d = 0; d < dh; ++d) dst[d] += s[d];
                              }
                        });
}

template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x) {
  if (x.rank() != 5 || x.dim(2) != x.dim(3))
    throw ShapeError("space_to_depth: expected [B, M, k, k, D], got " + shape_str(x.shape()));
  const std::int64_t k = x.dim(2);
  if (k % 2 != 0) throw ShapeError("space_to_depth: odd unit side " + std::to_string(k));
  const std::int64_t units = x.dim(0) * x.dim(1), d = x.dim(4), h = k / 2;
  std::vector<T> out(x.data().size());
  const T* src = x.data().data();
  // Source offset of out[u, i, j, q*d + c].
  auto src_off = [=](std::int64_t u, std::int64_t i, std::int64_t j, std::int64_t q) {
    const std::int64_t r = 2 * i + (q & 1), c = 2 * j + (q >> 1);
    return ((u * k + r) * k + c) * d;
  };
  for (std::int64_t u = 0; u < units; ++u)
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < h; ++j)
        for (std::int64_t q = 0; q < 4; ++q)
          std::copy_n(src + src_off(u, i, j, q), d,
                      out.data() + ((u * h + i) * h + j) * 4 * d + q * d);
  return make_result<T>("space_to_depth", {x.dim(0), x.dim(1), h, h, 4 * d}, std::move(out),
                        {x.ptr()}, [=](Node<T>& self) {
                          T* gx = grad_buf(self.inputs[0]);
                          const T* g = self.grad.data();
                          for (std::int64_t u = 0; u < units; ++u)
                            for (std::int64_t i = 0; i < h; ++i)
                              for (std::int64_t j = 0; j < h; ++j)
                                for (std::int64_t q = 0; q < 4; ++q) {
                                  T* dst = gx + src_off(u, i, j, q);
                                  const T* s = g + ((u * h + i) * h + j) * 4 * d + q * d;
                                  for (std::int64_t c = 0; c < d; ++c) dst[c] += s[c];
                                }
                        });
}

template <typename T>
Tensor<T> patchify_units(const Tensor<T>& images, std::int64_t unit, std::int64_t inner) {
  if (images.rank() != 4 || images.dim(2) != images.dim(3))
    throw ShapeError("patchify_units: expected square [B, C, H, W], got " +
                     shape_str(images.shape()));
  const std::int64_t batch = images.dim(0), ch = images.dim(1), side = images.dim(2);
  if (unit <= 0 || inner <= 0 || side % unit != 0 || unit % inner != 0)
    throw ShapeError("patchify_units: side " + std::to_string(side) + " not tiled by unit " +
                     std::to_string(unit) + " / inner patch " + std::to_string(inner));
  const std::int64_t grid = side / unit, k = unit / inner, pv = ch * inner * inner;
  const std::int64_t units = grid * grid;
  std::vector<T> out(images.data().size());
  // Image offset of element e of patch (b, u, i, j).
  auto img_off = [=](std::int64_t b, std::int64_t u, std::int64_t i, std::int64_t j,
                     std::int64_t e) {
    const std::int64_t c = e / (inner * inner), py = (e / inner) % inner, px = e % inner;
    const std::int64_t y = (u / grid) * unit + i * inner + py;
    const std::int64_t xx = (u % grid) * unit + j * inner + px;
    return ((b * ch + c) * side + y) * side + xx;
  };
  const T* src = images.data().data();
  std::int64_t o = 0;
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t u = 0; u < units; ++u)
      for (std::int64_t i = 0; i < k; ++i)
        for (std::int64_t j = 0; j < k; ++j)
          for (std::int64_t e = 0; e < pv; ++e) out[o++] = src[img_off(b, u, i, j, e)];
  return make_result<T>("patchify_units", {batch, units, k, k, pv}, std::move(out),
                        {images.ptr()}, [=](Node<T>& self) {
                          T* gi = grad_buf(self.inputs[0]);
                          const T* g = self.grad.data();
                          std::int64_t q = 0;
                          for (std::int64_t b = 0; b < batch; ++b)
                            for (std::int64_t u = 0; u < units; ++u)
                              for (std::int64_t i = 0; i < k; ++i)
                                for (std::int64_t j = 0; j < k; ++j)
                                  for (std::int64_t e = 0; e < pv; ++e)
                                    gi[img_off(b, u, i, j, e)] += g[q++];
                        });
}

template <typename T>
Tensor<T> bias_lookup(const Tensor<T>& table, std::span<const std::int64_t> index,
                      std::int64_t batch) {
  if (table.rank() != 2) throw ShapeError("bias_lookup: table must be 2-D");
  const std::int64_t rows = table.dim(0), heads = table.dim(1);
  if (batch <= 0 || static_cast<std::int64_t>(index.size()) % batch != 0)
    throw ShapeError("bias_lookup: index length not divisible by batch");
  const std::int64_t pairs = static_cast<std::int64_t>(index.size()) / batch;
  for (auto v : index)
    if (v < 0 || v >= rows) throw IndexError("bias_lookup: row " + std::to_string(v) + " out of range");
  std::vector<std::int64_t> map(index.begin(), index.end());
  std::vector<T> out(static_cast<std::size_t>(batch * heads * pairs));
  const T* td = table.data().data();
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t p = 0; p < pairs; ++p)
        out[(b * heads + h) * pairs + p] = td[map[b * pairs + p] * heads + h];
  return make_result<T>("bias_lookup", {batch, heads, pairs}, std::move(out), {table.ptr()},
                        [=, map = std::move(map)](Node<T>& self) {
                          T* gt = grad_buf(self.inputs[0]);
                          const T* g = self.grad.data();
                          for (std::int64_t b = 0; b < batch; ++b)
                            for (std::int64_t h = 0; h < heads; ++h)
                              for (std::int64_t p = 0; p < pairs; ++p)
                                gt[map[b * pairs + p] * heads + h] += g[(b * heads + h) * pairs + p];
                        });
}

template <typename T>
Tensor<T> mean_tokens(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("mean_tokens: expected [B, N, D], got " + shape_str(x.shape()));
  const std::int64_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (n == 0) throw ShapeError("mean_tokens: no tokens");
  std::vector<T> out(static_cast<std::size_t>(batch * d), T(0));
  const T* xd = x.data().data();
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t t = 0; t < n; ++t)
      for (std::int64_t c = 0; c < d; ++c) out[b * d + c] += xd[(b * n + t) * d + c];
    for (std::int64_t c = 0; c < d; ++c) out[b * d + c] /= T(n);
  }
  return make_result<T>("mean_tokens", {batch, d}, std::move(out), {x.ptr()}, [=](Node<T>& self) {
    T* gx = grad_buf(self.inputs[0]);
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t c = 0; c < d; ++c) gx[(b * n + t) * d + c] += self.grad[b * d + c] / T(n);
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return make_result<T>("sum", {1}, {acc}, {x.ptr()}, [](Node<T>& self) {
    T* gx = grad_buf(self.inputs[0]);
    const std::size_t n = self.inputs[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, std::span<const T> factors) {
  const std::int64_t batch = x.dim(0);
  if (static_cast<std::int64_t>(factors.size()) != batch)
    throw ShapeError("scale_rows: " + std::to_string(factors.size()) + " factors for batch " +
                     std::to_string(batch));
  const std::int64_t row = batch ? x.numel() / batch : 0;
  std::vector<T> f(factors.begin(), factors.end());
  std::vector<T> out(x.data().size());
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t j = 0; j < row; ++j) out[b * row + j] = x.data()[b * row + j] * f[b];
  return make_result<T>("scale_rows", x.shape(), std::move(out), {x.ptr()},
                        [=, f = std::move(f)](Node<T>& self) {
                          T* gx = grad_buf(self.inputs[0]);
                          for (std::int64_t b = 0; b < batch; ++b)
                            for (std::int64_t j = 0; j < row; ++j)
                              gx[b * row + j] += self.grad[b * row + j] * f[b];
                        });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size()))
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<T> probs(logits.data().size());
  kernels::softmax_rows(logits.data().data(), probs.data(), batch, classes);
  std::vector<int> lab(labels.begin(), labels.end());
  T loss = 0;
  for (std::int64_t b = 0; b < batch; ++b) {
    if (lab[b] < 0 || lab[b] >= classes)
      throw IndexError("cross_entropy: label " + std::to_string(lab[b]) + " outside [0, " +
                       std::to_string(classes) + ")");
    // log-softmax via max subtraction so extreme logits stay finite
    const T* row = logits.data().data() + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T z = 0;
    for (std::int64_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    loss += std::log(z) + mx - row[lab[b]];
  }
  loss /= T(batch);
  return make_result<T>("cross_entropy", {1}, {loss}, {logits.ptr()},
                        [=, probs = std::move(probs), lab = std::move(lab)](Node<T>& self) {
                          T* gl = grad_buf(self.inputs[0]);
                          const T g = self.grad[0] / T(batch);
                          for (std::int64_t b = 0; b < batch; ++b)
                            for (std::int64_t c = 0; c < classes; ++c)
                              gl[b * classes + c] +=
                                  g * (probs[b * classes + c] - (c == lab[b] ? T(1) : T(0)));
                        });
}

template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, std::span<const T> target, std::span<const T> weight) {
  if (pred.rank() != 3 || static_cast<std::int64_t>(target.size()) != pred.numel() ||
      static_cast<std::int64_t>(weight.size()) != pred.dim(0) * pred.dim(1))
    throw ShapeError("masked_mse: prediction " + shape_str(pred.shape()) +
                     " does not match target/weight sizes");
  const std::int64_t rows = pred.dim(0) * pred.dim(1), p = pred.dim(2);
  T denom = 0;
  for (T w : weight) denom += w;
  if (!(denom > T(0))) throw ContractError("masked_mse: no scored units");
  std::vector<T> diff(static_cast<std::size_t>(pred.numel()));
  std::vector<T> w(weight.begin(), weight.end());
  T loss = 0;
  const T* pd = pred.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::int64_t j = 0; j < p; ++j) {
      const T d = pd[r * p + j] - target[r * p + j];
      diff[r * p + j] = d;
      acc += d * d;
    }
    loss += w[r] * acc / T(p);
  }
  loss /= denom;
  return make_result<T>("masked_mse", {1}, {loss}, {pred.ptr()},
                        [=, diff = std::move(diff), w = std::move(w)](Node<T>& self) {
                          T* gp = grad_buf(self.inputs[0]);
                          const T g = self.grad[0] * T(2) / (T(p) * denom);
                          for (std::int64_t r = 0; r < rows; ++r) {
                            if (w[r] == T(0)) continue;
                            for (std::int64_t j = 0; j < p; ++j) gp[r * p + j] += g * w[r] * diff[r * p + j];
                          }
                        });
}

#define HIVIT_INSTANTIATE_OPS(T)                                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                          \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> gelu(const Tensor<T>&);                                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> gather_units(const Tensor<T>&, std::span<const std::int64_t>, std::int64_t); \
  template Tensor<T> scatter_units(const Tensor<T>&, std::span<const std::int64_t>, std::int64_t, \
                                   const Tensor<T>&);                                            \
  template Tensor<T> replace_units(const Tensor<T>&, std::span<const std::int64_t>, std::int64_t, \
                                   const Tensor<T>&);                                            \
  template Tensor<T> select_heads(const Tensor<T>&, int, std::int64_t);                          \
  template Tensor<T> merge_heads(const Tensor<T>&);                                              \
  template Tensor<T> space_to_depth(const Tensor<T>&);                                           \
  template Tensor<T> patchify_units(const Tensor<T>&, std::int64_t, std::int64_t);               \
  template Tensor<T> bias_lookup(const Tensor<T>&, std::span<const std::int64_t>, std::int64_t); \
  template Tensor<T> mean_tokens(const Tensor<T>&);                                              \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> scale_rows(const Tensor<T>&, std::span<const T>);                           \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                      \
  template Tensor<T> masked_mse(const Tensor<T>&, std::span<const T>, std::span<const T>);

HIVIT_INSTANTIATE_OPS(float)
HIVIT_INSTANTIATE_OPS(double)

}  // namespace hivit
