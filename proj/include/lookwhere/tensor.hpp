#pragma once

// Reverse-mode autodiff over dense double tensors. Dynamic tape: each op
// records parent handles and a backprop closure; backward() walks the graph
// once and then releases it. Kernels are handwritten with a fixed per-element
// accumulation order so row-subset results match full-matrix results bitwise.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lookwhere/rng.hpp"

namespace lookwhere {

using Shape = std::vector<int>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ValueError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class IndexError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline int64_t shape_numel(const Shape& s) {
  if (s.empty()) throw ShapeError("shape_numel: empty shape");
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("shape_numel: non-positive dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline thread_local bool grad_enabled = true;

// C[m,n] (+)= A[m,k] * B[k,n]. ikj loop order: for each output element the
// k-accumulation is sequential, so any row subset of A reproduces the
// corresponding C rows bitwise.
inline void mm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  if (!acc) std::fill(c, c + int64_t(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    double* crow = c + int64_t(i) * n;
    const double* arow = a + int64_t(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + int64_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
inline void mm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + int64_t(i) * k;
    double* crow = c + int64_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + int64_t(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = acc ? crow[j] + s : s;
    }
  }
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
inline void mm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  if (!acc) std::fill(c, c + int64_t(k) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + int64_t(i) * k;
    const double* brow = b + int64_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + int64_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// Disables tape recording for the current thread while alive.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_recording() { return detail::grad_enabled; }

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return make_leaf(std::move(shape), {}, 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    return make_leaf(std::move(shape), {}, v, requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (int64_t(data.size()) != shape_numel(shape))
      throw ShapeError("from_data: data length does not match shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return check().shape; }
  int ndim() const { return int(check().shape.size()); }
  int dim(int i) const {
    const auto& s = check().shape;
    if (i < 0 || i >= int(s.size())) throw IndexError("dim: axis out of range");
    return s[i];
  }
  int64_t numel() const { return int64_t(check().value.size()); }

  const std::vector<double>& data() const { return check().value; }
  std::vector<double>& data_mut() { return check().value; }

  double item() const {
    const auto& n = check();
    if (n.value.size() != 1) throw ShapeError("item: tensor is not scalar");
    return n.value[0];
  }

  double at(int i) const { return check().value.at(flat({i})); }
  double at(int i, int j) const { return check().value.at(flat({i, j})); }
  double at(int i, int j, int k) const { return check().value.at(flat({i, j, k})); }

  bool requires_grad() const { return check().requires_grad; }

  void set_requires_grad(bool rg) {
    auto& n = check();
    if (!n.leaf) throw ValueError("set_requires_grad: only leaf tensors");
    n.requires_grad = rg;
  }

  bool has_grad() const { return defined() && !node_->grad.empty(); }

  const std::vector<double>& grad() const {
    const auto& n = check();
    if (n.grad.size() != n.value.size()) throw ValueError("grad: no gradient present");
    return n.grad;
  }

  // Gradient if present, zeros otherwise.
  std::vector<double> grad_or_zero() const {
    const auto& n = check();
    if (n.grad.size() == n.value.size()) return n.grad;
    return std::vector<double>(n.value.size(), 0.0);
  }

  void zero_grad() {
    auto& n = check();
    n.grad.assign(n.value.size(), 0.0);
  }

  void clear_grad() { check().grad.clear(); }

  // Value copy detached from any graph.
  Tensor detach() const {
    const auto& n = check();
    return from_data(n.shape, n.value, false);
  }

  Tensor clone(bool requires_grad) const {
    const auto& n = check();
    return from_data(n.shape, n.value, requires_grad);
  }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  std::shared_ptr<detail::Node> node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  static Tensor make_leaf(Shape shape, std::vector<double> data, double fill, bool rg) {
    auto n = std::make_shared<detail::Node>();
    int64_t count = shape_numel(shape);
    n->shape = std::move(shape);
    if (data.empty())
      n->value.assign(count, fill);
    else
      n->value = std::move(data);
    n->requires_grad = rg;
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  int64_t flat(std::initializer_list<int> idx) const {
    const auto& s = check().shape;
    if (idx.size() != s.size()) throw IndexError("at: wrong index arity for shape " + shape_str(s));
    int64_t off = 0;
    int axis = 0;
    for (int v : idx) {
      if (v < 0 || v >= s[axis]) throw IndexError("at: index out of range");
      off = off * s[axis] + v;
      ++axis;
    }
    return off;
  }

  detail::Node& check() const {
    if (!node_) throw ValueError("empty tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value, const std::vector<Tensor>& parents,
                      std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  bool rg = false;
  if (grad_enabled) {
    for (const auto& p : parents) rg = rg || p.requires_grad();
  }
  n->requires_grad = rg;
  if (rg) {
    for (const auto& p : parents)
      if (p.requires_grad()) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return Tensor::from_node(std::move(n));
}

inline void accumulate(Node& dst, const std::vector<double>& g) {
  dst.ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace detail

// ---- structural ops ----

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto xn = x.node();
  return detail::make_op(std::move(shape), x.data(), {x}, [xn](detail::Node& self) {
    if (xn->requires_grad) detail::accumulate(*xn, self.grad);
  });
}

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
  if (x.ndim() != 2) throw ShapeError("slice_rows: expected 2-d tensor");
  int rows = x.dim(0), cols = x.dim(1);
  if (r0 < 0 || r1 > rows || r0 >= r1) throw IndexError("slice_rows: bad range");
  std::vector<double> v(int64_t(r1 - r0) * cols);
  std::copy(x.data().begin() + int64_t(r0) * cols, x.data().begin() + int64_t(r1) * cols, v.begin());
  auto xn = x.node();
  return detail::make_op({r1 - r0, cols}, std::move(v), {x}, [xn, r0, cols](detail::Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[int64_t(r0) * cols + i] += self.grad[i];
  });
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  if (x.ndim() != 2) throw ShapeError("slice_cols: expected 2-d tensor");
  int rows = x.dim(0), cols = x.dim(1);
  if (c0 < 0 || c1 > cols || c0 >= c1) throw IndexError("slice_cols: bad range");
  int w = c1 - c0;
  std::vector<double> v(int64_t(rows) * w);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < w; ++c) v[int64_t(r) * w + c] = x.data()[int64_t(r) * cols + c0 + c];
  auto xn = x.node();
  return detail::make_op({rows, w}, std::move(v), {x}, [xn, rows, cols, c0, w](detail::Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c) xn->grad[int64_t(r) * cols + c0 + c] += self.grad[int64_t(r) * w + c];
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValueError("concat_rows: no parts");
  int cols = parts[0].dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(1) != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  std::vector<double> v;
  v.reserve(int64_t(rows) * cols);
  for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  std::vector<std::pair<std::shared_ptr<detail::Node>, int64_t>> spans;
  int64_t off = 0;
  for (const auto& p : parts) {
    spans.emplace_back(p.node(), off);
    off += p.numel();
  }
  return detail::make_op({rows, cols}, std::move(v), parts, [spans](detail::Node& self) {
    for (const auto& [pn, o] : spans) {
      if (!pn->requires_grad) continue;
      pn->ensure_grad();
      for (size_t i = 0; i < pn->value.size(); ++i) pn->grad[i] += self.grad[o + i];
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValueError("concat_cols: no parts");
  int rows = parts[0].dim(0);
  int cols = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.dim(1);
  }
  std::vector<double> v(int64_t(rows) * cols);
  int c0 = 0;
  for (const auto& p : parts) {
    int w = p.dim(1);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c) v[int64_t(r) * cols + c0 + c] = p.data()[int64_t(r) * w + c];
    c0 += w;
  }
  std::vector<std::pair<std::shared_ptr<detail::Node>, int>> spans;
  c0 = 0;
  for (const auto& p : parts) {
    spans.emplace_back(p.node(), c0);
    c0 += p.dim(1);
  }
  return detail::make_op({rows, cols}, std::move(v), parts, [spans, rows, cols](detail::Node& self) {
    for (const auto& [pn, start] : spans) {
      if (!pn->requires_grad) continue;
      pn->ensure_grad();
      int w = pn->shape[1];
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c) pn->grad[int64_t(r) * w + c] += self.grad[int64_t(r) * cols + start + c];
    }
  });
}

inline Tensor stack0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValueError("stack0: no parts");
  const Shape inner = parts[0].shape();
  for (const auto& p : parts)
    if (p.shape() != inner) throw ShapeError("stack0: shape mismatch");
  Shape out;
  out.push_back(int(parts.size()));
  out.insert(out.end(), inner.begin(), inner.end());
  std::vector<double> v;
  v.reserve(shape_numel(out));
  for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  int64_t stride = parts[0].numel();
  return detail::make_op(std::move(out), std::move(v), parts, [nodes, stride](detail::Node& self) {
    for (size_t k = 0; k < nodes.size(); ++k) {
      auto& pn = *nodes[k];
      if (!pn.requires_grad) continue;
      pn.ensure_grad();
      for (int64_t i = 0; i < stride; ++i) pn.grad[i] += self.grad[int64_t(k) * stride + i];
    }
  });
}

inline Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  if (x.ndim() != 2) throw ShapeError("gather_rows: expected 2-d tensor");
  int rows = x.dim(0), cols = x.dim(1);
  std::vector<double> v(int64_t(idx.size()) * cols);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) throw IndexError("gather_rows: index out of range");
    std::copy(x.data().begin() + int64_t(idx[i]) * cols, x.data().begin() + int64_t(idx[i] + 1) * cols,
              v.begin() + int64_t(i) * cols);
  }
  auto xn = x.node();
  auto ix = idx;
  return detail::make_op({int(idx.size()), cols}, std::move(v), {x}, [xn, ix, cols](detail::Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < ix.size(); ++i)
      for (int c = 0; c < cols; ++c) xn->grad[int64_t(ix[i]) * cols + c] += self.grad[int64_t(i) * cols + c];
  });
}

inline Tensor gather_flat(const Tensor& x, const std::vector<int>& idx) {
  int64_t n = x.numel();
  std::vector<double> v(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw IndexError("gather_flat: index out of range");
    v[i] = x.data()[idx[i]];
  }
  auto xn = x.node();
  auto ix = idx;
  return detail::make_op({int(idx.size())}, std::move(v), {x}, [xn, ix](detail::Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < ix.size(); ++i) xn->grad[ix[i]] += self.grad[i];
  });
}

// ---- arithmetic ----

namespace detail {
inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "add");
  std::vector<double> v(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) v[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.shape(), std::move(v), {a, b}, [an, bn](detail::Node& self) {
    if (an->requires_grad) detail::accumulate(*an, self.grad);
    if (bn->requires_grad) detail::accumulate(*bn, self.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "sub");
  std::vector<double> v(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) v[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.shape(), std::move(v), {a, b}, [an, bn](detail::Node& self) {
    if (an->requires_grad) detail::accumulate(*an, self.grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "mul");
  std::vector<double> v(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) v[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.shape(), std::move(v), {a, b}, [an, bn](detail::Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) v[i] = a.data()[i] * s;
  auto an = a.node();
  return detail::make_op(a.shape(), std::move(v), {a}, [an, s](detail::Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
  });
}

// x[R,C] + v[C] broadcast over rows
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (x.ndim() != 2 || v.ndim() != 1 || v.dim(0) != x.dim(1))
    throw ShapeError("add_rowvec: expected [R,C] and [C]");
  int rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.numel());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[int64_t(r) * cols + c] = x.data()[int64_t(r) * cols + c] + v.data()[c];
  auto xn = x.node(), vn = v.node();
  return detail::make_op(x.shape(), std::move(out), {x, v}, [xn, vn, rows, cols](detail::Node& self) {
    if (xn->requires_grad) detail::accumulate(*xn, self.grad);
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) vn->grad[c] += self.grad[int64_t(r) * cols + c];
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node();
  return detail::make_op({1}, {s}, {x}, [xn](detail::Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (auto& g : xn->grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  double inv = 1.0 / double(x.numel());
  auto xn = x.node();
  return detail::make_op({1}, {s * inv}, {x}, [xn, inv](detail::Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (auto& g : xn->grad) g += self.grad[0] * inv;
  });
}

// ---- matmul family ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(int64_t(m) * n);
  detail::mm_nn(a.data().data(), b.data().data(), v.data(), m, k, n, false);
  auto an = a.node(), bn = b.node();
  return detail::make_op({m, n}, std::move(v), {a, b}, [an, bn, m, k, n](detail::Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      detail::mm_nt(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::mm_tn(an->value.data(), self.grad.data(), bn->grad.data(), m, k, n, true);
    }
  });
}

// a[m,k] * b[n,k]^T -> [m,n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> v(int64_t(m) * n);
  detail::mm_nt(a.data().data(), b.data().data(), v.data(), m, k, n, false);
  auto an = a.node(), bn = b.node();
  return detail::make_op({m, n}, std::move(v), {a, b}, [an, bn, m, k, n](detail::Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      detail::mm_nn(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::mm_tn(self.grad.data(), an->value.data(), bn->grad.data(), m, n, k, true);
    }
  });
}

// ---- nonlinear ops ----

inline Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= int(s.size())) throw IndexError("softmax: axis out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < int(s.size()); ++i) inner *= s[i];
  int n = s[axis];
  std::vector<double> y(x.numel());
  const auto& xv = x.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * n * inner + i;
      double mx = xv[base];
      for (int a = 1; a < n; ++a) mx = std::max(mx, xv[base + int64_t(a) * inner]);
      double z = 0.0;
      for (int a = 0; a < n; ++a) {
        double e = std::exp(xv[base + int64_t(a) * inner] - mx);
        y[base + int64_t(a) * inner] = e;
        z += e;
      }
      double invz = 1.0 / z;
      for (int a = 0; a < n; ++a) y[base + int64_t(a) * inner] *= invz;
    }
  auto xn = x.node();
  return detail::make_op(s, std::move(y), {x}, [xn, outer, inner, n](detail::Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const auto& yv = self.value;
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * n * inner + i;
        double dot = 0.0;
        for (int a = 0; a < n; ++a) {
          int64_t p = base + int64_t(a) * inner;
          dot += self.grad[p] * yv[p];
        }
        for (int a = 0; a < n; ++a) {
          int64_t p = base + int64_t(a) * inner;
          xn->grad[p] += yv[p] * (self.grad[p] - dot);
        }
      }
  });
}

// Normalizes the last dimension; epsilon sits inside the square root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6) {
  const Shape& s = x.shape();
  int d = s.back();
  if (gamma.ndim() != 1 || gamma.dim(0) != d || beta.ndim() != 1 || beta.dim(0) != d)
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
  int64_t rows = x.numel() / d;
  std::vector<double> y(x.numel()), xh(x.numel()), invs(rows);
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (int c = 0; c < d; ++c) mu += row[c];
    mu /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) {
      double t = row[c] - mu;
      var += t * t;
    }
    var /= d;
    double inv = 1.0 / std::sqrt(var + eps);
    invs[r] = inv;
    for (int c = 0; c < d; ++c) {
      double h = (row[c] - mu) * inv;
      xh[r * d + c] = h;
      y[r * d + c] = gv[c] * h + bv[c];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_op(s, std::move(y), {x, gamma, beta},
                         [xn, gn, bn, xh, invs, rows, d](detail::Node& self) {
    if (gn->requires_grad) {
      gn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < d; ++c) gn->grad[c] += self.grad[r * d + c] * xh[r * d + c];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < d; ++c) bn->grad[c] += self.grad[r * d + c];
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_xh = 0.0;
        for (int c = 0; c < d; ++c) {
          double dh = self.grad[r * d + c] * gn->value[c];
          mean_dh += dh;
          mean_dh_xh += dh * xh[r * d + c];
        }
        mean_dh /= d;
        mean_dh_xh /= d;
        for (int c = 0; c < d; ++c) {
          double dh = self.grad[r * d + c] * gn->value[c];
          xn->grad[r * d + c] += invs[r] * (dh - mean_dh - xh[r * d + c] * mean_dh_xh);
        }
      }
    }
  });
}

// Exact erf formulation: x * Phi(x).
inline Tensor gelu(const Tensor& x) {
  static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::acos(-1.0));
  std::vector<double> y(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) {
    double v = x.data()[i];
    y[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  auto xn = x.node();
  return detail::make_op(x.shape(), std::move(y), {x}, [xn](detail::Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double v = xn->value[i];
      double phi_cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      double phi_pdf = std::exp(-0.5 * v * v) * inv_sqrt2pi;
      xn->grad[i] += self.grad[i] * (phi_cdf + v * phi_pdf);
    }
  });
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "mse");
  int64_t n = a.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  auto an = a.node(), bn = b.node();
  return detail::make_op({1}, {s / double(n)}, {a, b}, [an, bn, n](detail::Node& self) {
    double c = 2.0 * self.grad[0] / double(n);
    if (an->requires_grad) {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->grad[i] += c * (an->value[i] - bn->value[i]);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < n; ++i) bn->grad[i] -= c * (an->value[i] - bn->value[i]);
    }
  });
}

// KL(p || q) over flattened distributions. Both must be valid probability
// vectors; q is clamped at 1e-12 inside the log, and p_i = 0 terms are zero.
inline Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  detail::same_shape(p, q, "kl_divergence");
  static constexpr double kClamp = 1e-12;
  auto validate = [](const Tensor& t, const char* name) {
    double s = 0.0;
    for (double v : t.data()) {
      if (v < -1e-12) throw ValueError(std::string("kl_divergence: ") + name + " has negative entries");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6)
      throw ValueError(std::string("kl_divergence: ") + name + " does not sum to 1 (sum=" + std::to_string(s) + ")");
  };
  validate(p, "p");
  validate(q, "q");
  int64_t n = p.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double pi = p.data()[i];
    if (pi <= 0.0) continue;
    double qc = std::max(q.data()[i], kClamp);
    s += pi * std::log(pi / qc);
  }
  auto pn = p.node(), qn = q.node();
  return detail::make_op({1}, {s}, {p, q}, [pn, qn, n](detail::Node& self) {
    double g = self.grad[0];
    if (pn->requires_grad) {
      pn->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        double pi = pn->value[i];
        if (pi <= 0.0) continue;
        double qc = std::max(qn->value[i], kClamp);
        pn->grad[i] += g * (std::log(pi / qc) + 1.0);
      }
    }
    if (qn->requires_grad) {
      qn->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        double pi = pn->value[i];
        if (pi <= 0.0) continue;
        if (qn->value[i] >= kClamp) qn->grad[i] -= g * pi / qn->value[i];
      }
    }
  });
}

// Mean cross entropy from raw logits [B,C] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: expected [B,C] logits");
  int b = logits.dim(0), c = logits.dim(1);
  if (int(labels.size()) != b) throw ShapeError("cross_entropy: label count mismatch");
  std::vector<double> prob(logits.numel());
  const auto& z = logits.data();
  double loss = 0.0;
  for (int r = 0; r < b; ++r) {
    if (labels[r] < 0 || labels[r] >= c) throw IndexError("cross_entropy: label out of range");
    const double* row = z.data() + int64_t(r) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      double e = std::exp(row[j] - mx);
      prob[int64_t(r) * c + j] = e;
      sum += e;
    }
    double inv = 1.0 / sum;
    for (int j = 0; j < c; ++j) prob[int64_t(r) * c + j] *= inv;
    loss -= std::log(std::max(prob[int64_t(r) * c + labels[r]], 1e-300));
  }
  loss /= b;
  auto ln = logits.node();
  auto lab = labels;
  return detail::make_op({1}, {loss}, {logits}, [ln, lab, prob, b, c](detail::Node& self) {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    double g = self.grad[0] / double(b);
    for (int r = 0; r < b; ++r)
      for (int j = 0; j < c; ++j) {
        double t = prob[int64_t(r) * c + j] - (j == lab[r] ? 1.0 : 0.0);
        ln->grad[int64_t(r) * c + j] += g * t;
      }
  });
}

// ---- backward ----

inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
  if (!loss.requires_grad())
    throw ValueError("backward: no recorded graph reaches the loss");
  auto root = loss.node();
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  // keep shared ownership of every visited node for the duration of the pass
  std::vector<std::shared_ptr<detail::Node>> alive;
  std::vector<std::pair<std::shared_ptr<detail::Node>, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  alive.push_back(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto child = node->parents[next++];
      if (seen.insert(child.get()).second) {
        alive.push_back(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node.get());
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] = 1.0;
  // order is post-order (parents precede dependents), so walk it backwards
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
  for (detail::Node* n : order) {
    n->backprop = nullptr;
    n->parents.clear();
    if (!n->leaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---- optimizer ----

using NamedParams = std::map<std::string, Tensor>;

inline void zero_grad(NamedParams& params) {
  for (auto& [name, t] : params) t.zero_grad();
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  AdamWConfig hp;
  int64_t step_count = 0;
  std::map<std::string, std::vector<double>> m, v;
};

// Decoupled weight decay applied before the adaptive update; moments are
// bias-corrected. lr = 0 leaves parameter values bitwise unchanged.
inline void adamw_step(NamedParams& params, AdamWState& state) {
  const auto& hp = state.hp;
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(hp.beta1, double(state.step_count));
  const double bc2 = 1.0 - std::pow(hp.beta2, double(state.step_count));
  for (auto& [name, p] : params) {
    auto& value = p.data_mut();
    std::vector<double> g = p.grad_or_zero();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(value.size(), 0.0);
    if (v.empty()) v.assign(value.size(), 0.0);
    if (m.size() != value.size())
      throw ValueError("adamw_step: state shape mismatch for " + name);
    for (size_t i = 0; i < value.size(); ++i) {
      value[i] -= hp.lr * hp.weight_decay * value[i];
      m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
      v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
      double mh = m[i] / bc1;
      double vh = v[i] / bc2;
      value[i] -= hp.lr * mh / (std::sqrt(vh) + hp.eps);
    }
  }
}

// ---- finite differences ----

// Central differences on x's entries, in place; f() re-reads x through shared
// structure. f is evaluated with recording off.
inline std::vector<double> finite_diff_grad(const std::function<double()>& f, Tensor& x, double h) {
  if (h <= 0.0) throw ValueError("finite_diff_grad: h must be positive");
  auto& v = x.data_mut();
  std::vector<double> g(v.size());
  NoGradGuard ng;
  for (size_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + h;
    double fp = f();
    v[i] = orig - h;
    double fm = f();
    v[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// ---- init helpers ----

inline void fill_normal(Tensor& t, Rng& rng, double stddev, double mean = 0.0) {
  for (auto& v : t.data_mut()) v = rng.normal(mean, stddev);
}

inline void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.data_mut()) v = rng.uniform(lo, hi);
}

}  // namespace lookwhere
