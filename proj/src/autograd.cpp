#include "acrec/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace acrec::ag {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

template <typename T>
bool any_grad(std::initializer_list<const Var<T>*> inputs) {
  for (const auto* v : inputs) {
    if (v->requires_grad()) return true;
  }
  return false;
}

// Builds the output Var; records inputs and the backward closure only when
// some input requires a gradient.
template <typename T>
Var<T> make(Shape shape, std::vector<T> value, std::initializer_list<const Var<T>*> inputs,
            std::function<void(Node<T>&)> bw) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (any_grad<T>(inputs)) {
    node->requires_grad = true;
    for (const auto* v : inputs) node->inputs.push_back(v->ptr());
    node->backward = std::move(bw);
  }
  return Var<T>(std::move(node));
}

// Gradient buffer of input `k`, or nullptr when it does not need one.
template <typename T>
T* in_grad(Node<T>& self, std::size_t k) {
  auto& in = *self.inputs[k];
  return in.requires_grad ? in.grad_data() : nullptr;
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride;
  std::vector<std::size_t> b_stride;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Broadcast plan;
  plan.out.assign(nd, 1);
  std::vector<std::size_t> ad(nd, 1), bd(nd, 1);
  std::copy(a.begin(), a.end(), ad.begin() + (nd - a.size()));
  std::copy(b.begin(), b.end(), bd.begin() + (nd - b.size()));
  for (std::size_t i = 0; i < nd; ++i) {
    if (ad[i] != bd[i] && ad[i] != 1 && bd[i] != 1) {
      throw std::invalid_argument("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    plan.out[i] = std::max(ad[i], bd[i]);
  }
  plan.a_stride.assign(nd, 0);
  plan.b_stride.assign(nd, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = nd; i-- > 0;) {
    plan.a_stride[i] = ad[i] == 1 ? 0 : sa;
    plan.b_stride[i] = bd[i] == 1 ? 0 : sb;
    sa *= ad[i];
    sb *= bd[i];
  }
  return plan;
}

// Calls f(out_index, a_index, b_index) over the broadcast output.
template <typename F>
void broadcast_loop(const Broadcast& plan, F&& f) {
  const std::size_t nd = plan.out.size();
  const std::size_t total = numel(plan.out);
  if (total == 0) return;
  if (nd == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = plan.out.back();
  const std::size_t sa = plan.a_stride.back(), sb = plan.b_stride.back();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0, ib = 0, o = 0;
  for (std::size_t outer = total / inner; outer > 0; --outer) {
    for (std::size_t k = 0; k < inner; ++k) f(o++, ia + k * sa, ib + k * sb);
    for (std::size_t d = nd - 1; d-- > 0;) {
      ++idx[d];
      ia += plan.a_stride[d];
      ib += plan.b_stride[d];
      if (idx[d] < plan.out[d]) break;
      ia -= plan.a_stride[d] * plan.out[d];
      ib -= plan.b_stride[d] * plan.out[d];
      idx[d] = 0;
    }
  }
}

// Shared implementation of the broadcasting binary ops. `fwd(x, y)` gives the
// value, `dx(x, y)` and `dy(x, y)` the partial derivatives.
template <typename T, typename Fwd, typename Dx, typename Dy>
Var<T> binary(const Var<T>& a, const Var<T>& b, Fwd fwd, Dx dx, Dy dy) {
  const auto av = a.value();
  const auto bv = b.value();
  if (a.shape() == b.shape()) {
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return make<T>(a.shape(), std::move(out), {&a, &b}, [dx, dy](Node<T>& self) {
      const auto& x = self.inputs[0]->value;
      const auto& y = self.inputs[1]->value;
      const auto& g = self.grad;
      if (T* gx = in_grad(self, 0)) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dx(x[i], y[i]);
      }
      if (T* gy = in_grad(self, 1)) {
        for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i] * dy(x[i], y[i]);
      }
    });
  }
  auto plan = plan_broadcast(a.shape(), b.shape());
  std::vector<T> out(numel(plan.out));
  broadcast_loop(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = fwd(av[ia], bv[ib]);
  });
  Shape shape = plan.out;
  return make<T>(std::move(shape), std::move(out), {&a, &b},
                 [plan = std::move(plan), dx, dy](Node<T>& self) {
                   const auto& x = self.inputs[0]->value;
                   const auto& y = self.inputs[1]->value;
                   const auto& g = self.grad;
                   T* gx = in_grad(self, 0);
                   T* gy = in_grad(self, 1);
                   broadcast_loop(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                     if (gx) gx[ia] += g[o] * dx(x[ia], y[ib]);
                     if (gy) gy[ib] += g[o] * dy(x[ia], y[ib]);
                   });
                 });
}

// Unary op; `dfn(x, y)` is the derivative given input x and output y.
template <typename T, typename Fwd, typename D>
Var<T> unary(const Var<T>& a, Fwd fwd, D dfn) {
  const auto av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  return make<T>(a.shape(), std::move(out), {&a}, [dfn](Node<T>& self) {
    T* gx = in_grad(self, 0);
    if (!gx) return;
    const auto& x = self.inputs[0]->value;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfn(x[i], y[i]);
  });
}

std::size_t leading(const Shape& s, std::size_t trailing) {
  std::size_t p = 1;
  for (std::size_t i = 0; i + trailing < s.size(); ++i) p *= s[i];
  return p;
}

}  // namespace

template <typename T>
Var<T> Var<T>::constant(Shape shape, std::vector<T> value) {
  check(numel(shape) == value.size(), "constant: value size does not match shape " + to_string(shape));
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::parameter(Shape shape, std::vector<T> value) {
  Var v = constant(std::move(shape), std::move(value));
  v.node_->requires_grad = true;
  return v;
}

template <typename T>
Var<T> Var<T>::full(Shape shape, T fill) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<T>(n, fill));
}

template <typename T>
T Var<T>::item() const {
  check(size() == 1, "item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename T>
void backward(const Var<T>& root) {
  check(root.size() == 1, "backward() needs a scalar root");
  if (!root.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_data()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Var<T> affine(const Var<T>& x, T scale, T shift) {
  return unary(
      x, [=](T v) { return scale * v + shift; }, [=](T, T) { return scale; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(
      x,
      [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return unary(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return unary(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(
      x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return unary(
      x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return unary(
      x, [=](T v) { return std::clamp(v, lo, hi); },
      [=](T v, T) { return (v < lo || v > hi) ? T(0) : T(1); });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value()) s += v;
  return make<T>({}, {s}, {&x}, [](Node<T>& self) {
    T* gx = in_grad(self, 0);
    if (!gx) return;
    const T g = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  check(x.size() > 0, "mean of empty tensor");
  return affine(sum(x), T(1) / static_cast<T>(x.size()), T(0));
}

template <typename T>
Var<T> masked_l2(const Var<T>& x, const PairMask& mask) {
  check(x.rank() >= 3, "masked_l2 needs rank >= 3");
  const std::size_t n = x.dim(x.rank() - 2), m = x.dim(x.rank() - 1);
  check(n == mask.rows && m == mask.cols && x.dim(0) == mask.batch, "masked_l2: mask shape");
  const std::size_t blocks = leading(x.shape(), 2);
  const std::size_t per_batch = blocks / mask.batch;
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  std::vector<T> out(blocks, T(0));
  const auto xv = x.value();
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t b = blk / per_batch;
    const T* p = xv.data() + blk * n * m;
    T s = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        if (mask(b, i, j)) s += p[i * m + j] * p[i * m + j];
    out[blk] = std::sqrt(s);
  }
  return make<T>(std::move(out_shape), std::move(out), {&x},
                 [mask, n, m, per_batch](Node<T>& self) {
                   T* gx = in_grad(self, 0);
                   if (!gx) return;
                   const auto& xv = self.inputs[0]->value;
                   for (std::size_t blk = 0; blk < self.value.size(); ++blk) {
                     const T norm = self.value[blk];
                     if (norm == T(0)) continue;
                     const T scale = self.grad[blk] / norm;
                     const std::size_t b = blk / per_batch;
                     const std::size_t base = blk * n * m;
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < m; ++j)
                         if (mask(b, i, j)) gx[base + i * m + j] += scale * xv[base + i * m + j];
                   }
                 });
}

template <typename T>
Var<T> matmul(const Var<T>& x, const Var<T>& w) {
  check(w.rank() == 2 && x.rank() >= 1 && x.shape().back() == w.dim(0),
        "matmul: " + to_string(x.shape()) + " x " + to_string(w.shape()));
  const std::size_t k = w.dim(0), m = w.dim(1);
  const std::size_t rows = x.size() / k;
  Shape shape = x.shape();
  shape.back() = m;
  std::vector<T> out(rows * m, T(0));
  const T* xv = x.value().data();
  const T* wv = w.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = out.data() + r * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T a = xv[r * k + p];
      const T* wr = wv + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += a * wr[j];
    }
  }
  return make<T>(std::move(shape), std::move(out), {&x, &w}, [rows, k, m](Node<T>& self) {
    const T* xv = self.inputs[0]->value.data();
    const T* wv = self.inputs[1]->value.data();
    const T* g = self.grad.data();
    if (T* gx = in_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t p = 0; p < k; ++p) {
          T s = 0;
          for (std::size_t j = 0; j < m; ++j) s += g[r * m + j] * wv[p * m + j];
          gx[r * k + p] += s;
        }
    }
    if (T* gw = in_grad(self, 1)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t p = 0; p < k; ++p) {
          const T a = xv[r * k + p];
          for (std::size_t j = 0; j < m; ++j) gw[p * m + j] += a * g[r * m + j];
        }
    }
  });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& x, const Var<T>& y) {
  check(x.rank() == 2 && y.rank() == 2 && x.dim(1) == y.dim(1),
        "matmul_nt: " + to_string(x.shape()) + " x " + to_string(y.shape()) + "^T");
  const std::size_t mrows = x.dim(0), n = y.dim(0), k = x.dim(1);
  std::vector<T> out(mrows * n);
  const T* xv = x.value().data();
  const T* yv = y.value().data();
  for (std::size_t i = 0; i < mrows; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += xv[i * k + p] * yv[j * k + p];
      out[i * n + j] = s;
    }
  return make<T>({mrows, n}, std::move(out), {&x, &y}, [mrows, n, k](Node<T>& self) {
    const T* xv = self.inputs[0]->value.data();
    const T* yv = self.inputs[1]->value.data();
    const T* g = self.grad.data();
    T* gx = in_grad(self, 0);
    T* gy = in_grad(self, 1);
    for (std::size_t i = 0; i < mrows; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const T gij = g[i * n + j];
        if (gij == T(0)) continue;
        if (gx)
          for (std::size_t p = 0; p < k; ++p) gx[i * k + p] += gij * yv[j * k + p];
        if (gy)
          for (std::size_t p = 0; p < k; ++p) gy[j * k + p] += gij * xv[i * k + p];
      }
  });
}

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  check(a.rank() >= 2 && a.rank() == b.rank(), "bmm: rank mismatch");
  const std::size_t n = a.dim(a.rank() - 2), m = a.dim(a.rank() - 1);
  const std::size_t r = b.dim(b.rank() - 1);
  check(b.dim(b.rank() - 2) == m, "bmm: inner dimension mismatch");
  check(std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()), "bmm: batch mismatch");
  const std::size_t batches = leading(a.shape(), 2);
  Shape shape = a.shape();
  shape.back() = r;
  std::vector<T> out(batches * n * r, T(0));
  const T* av = a.value().data();
  const T* bv = b.value().data();
  for (std::size_t p = 0; p < batches; ++p) {
    const T* ap = av + p * n * m;
    const T* bp = bv + p * m * r;
    T* op = out.data() + p * n * r;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < m; ++t) {
        const T x = ap[i * m + t];
        for (std::size_t j = 0; j < r; ++j) op[i * r + j] += x * bp[t * r + j];
      }
  }
  return make<T>(std::move(shape), std::move(out), {&a, &b}, [batches, n, m, r](Node<T>& self) {
    const T* av = self.inputs[0]->value.data();
    const T* bv = self.inputs[1]->value.data();
    const T* g = self.grad.data();
    T* ga = in_grad(self, 0);
    T* gb = in_grad(self, 1);
    for (std::size_t p = 0; p < batches; ++p) {
      const T* ap = av + p * n * m;
      const T* bp = bv + p * m * r;
      const T* gp = g + p * n * r;
      if (ga) {
        T* gap = ga + p * n * m;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t t = 0; t < m; ++t) {
            T s = 0;
            for (std::size_t j = 0; j < r; ++j) s += gp[i * r + j] * bp[t * r + j];
            gap[i * m + t] += s;
          }
      }
      if (gb) {
        T* gbp = gb + p * m * r;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t t = 0; t < m; ++t) {
            const T x = ap[i * m + t];
            if (x == T(0)) continue;
            for (std::size_t j = 0; j < r; ++j) gbp[t * r + j] += x * gp[i * r + j];
          }
      }
    }
  });
}

template <typename T>
Var<T> bmm_nt(const Var<T>& a, const Var<T>& b, T scale) {
  check(a.rank() >= 2 && a.rank() == b.rank(), "bmm_nt: rank mismatch");
  const std::size_t n = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t m = b.dim(b.rank() - 2);
  check(b.dim(b.rank() - 1) == k, "bmm_nt: inner dimension mismatch");
  check(std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()), "bmm_nt: batch mismatch");
  const std::size_t batches = leading(a.shape(), 2);
  Shape shape = a.shape();
  shape.back() = m;
  std::vector<T> out(batches * n * m);
  const T* av = a.value().data();
  const T* bv = b.value().data();
  for (std::size_t p = 0; p < batches; ++p) {
    const T* ap = av + p * n * k;
    const T* bp = bv + p * m * k;
    T* op = out.data() + p * n * m;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        T s = 0;
        for (std::size_t t = 0; t < k; ++t) s += ap[i * k + t] * bp[j * k + t];
        op[i * m + j] = scale * s;
      }
  }
  return make<T>(std::move(shape), std::move(out), {&a, &b},
                 [batches, n, m, k, scale](Node<T>& self) {
                   const T* av = self.inputs[0]->value.data();
                   const T* bv = self.inputs[1]->value.data();
                   const T* g = self.grad.data();
                   T* ga = in_grad(self, 0);
                   T* gb = in_grad(self, 1);
                   for (std::size_t p = 0; p < batches; ++p) {
                     const T* ap = av + p * n * k;
                     const T* bp = bv + p * m * k;
                     const T* gp = g + p * n * m;
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < m; ++j) {
                         const T gij = scale * gp[i * m + j];
                         if (gij == T(0)) continue;
                         if (ga)
                           for (std::size_t t = 0; t < k; ++t) ga[p * n * k + i * k + t] += gij * bp[j * k + t];
                         if (gb)
                           for (std::size_t t = 0; t < k; ++t) gb[p * m * k + j * k + t] += gij * ap[i * k + t];
                       }
                   }
                 });
}

template <typename T>
Var<T> head_matmul(const Var<T>& x, const Var<T>& w) {
  check(x.rank() == 4 && w.rank() == 3, "head_matmul: expects [B,H,n,k] x [H,k,m]");
  const std::size_t batch = x.dim(0), heads = x.dim(1), n = x.dim(2), k = x.dim(3);
  const std::size_t wh = w.dim(0), m = w.dim(2);
  check(w.dim(1) == k && (wh == heads || wh == 1),
        "head_matmul: " + to_string(x.shape()) + " x " + to_string(w.shape()));
  std::vector<T> out(batch * heads * n * m, T(0));
  const T* xv = x.value().data();
  const T* wv = w.value().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const T* wp = wv + (wh == 1 ? 0 : h) * k * m;
      const std::size_t base = (b * heads + h) * n;
      for (std::size_t i = 0; i < n; ++i) {
        T* o = out.data() + (base + i) * m;
        const T* xr = xv + (base + i) * k;
        for (std::size_t p = 0; p < k; ++p) {
          const T a = xr[p];
          for (std::size_t j = 0; j < m; ++j) o[j] += a * wp[p * m + j];
        }
      }
    }
  return make<T>({batch, heads, n, m}, std::move(out), {&x, &w},
                 [batch, heads, n, k, m, wh](Node<T>& self) {
                   const T* xv = self.inputs[0]->value.data();
                   const T* wv = self.inputs[1]->value.data();
                   const T* g = self.grad.data();
                   T* gx = in_grad(self, 0);
                   T* gw = in_grad(self, 1);
                   for (std::size_t b = 0; b < batch; ++b)
                     for (std::size_t h = 0; h < heads; ++h) {
                       const std::size_t woff = (wh == 1 ? 0 : h) * k * m;
                       const std::size_t base = (b * heads + h) * n;
                       for (std::size_t i = 0; i < n; ++i) {
                         const T* gr = g + (base + i) * m;
                         const T* xr = xv + (base + i) * k;
                         for (std::size_t p = 0; p < k; ++p) {
                           if (gx) {
                             T s = 0;
                             for (std::size_t j = 0; j < m; ++j) s += gr[j] * wv[woff + p * m + j];
                             gx[(base + i) * k + p] += s;
                           }
                           if (gw)
                             for (std::size_t j = 0; j < m; ++j) gw[woff + p * m + j] += xr[p] * gr[j];
                         }
                       }
                     }
                 });
}

template <typename T>
Var<T> outer_add(const Var<T>& a, const Var<T>& c) {
  check(a.rank() >= 2 && a.rank() == c.rank() && a.shape().back() == 1 && c.shape().back() == 1,
        "outer_add: expects [..., n, 1] and [..., m, 1]");
  check(std::equal(a.shape().begin(), a.shape().end() - 2, c.shape().begin()), "outer_add: batch mismatch");
  const std::size_t n = a.dim(a.rank() - 2), m = c.dim(c.rank() - 2);
  const std::size_t batches = leading(a.shape(), 2);
  Shape shape = a.shape();
  shape.back() = m;
  std::vector<T> out(batches * n * m);
  const T* av = a.value().data();
  const T* cv = c.value().data();
  for (std::size_t p = 0; p < batches; ++p)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[(p * n + i) * m + j] = av[p * n + i] + cv[p * m + j];
  return make<T>(std::move(shape), std::move(out), {&a, &c}, [batches, n, m](Node<T>& self) {
    const T* g = self.grad.data();
    T* ga = in_grad(self, 0);
    T* gc = in_grad(self, 1);
    for (std::size_t p = 0; p < batches; ++p)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const T gij = g[(p * n + i) * m + j];
          if (ga) ga[p * n + i] += gij;
          if (gc) gc[p * m + j] += gij;
        }
  });
}

template <typename T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
  check(x.rank() == 3 && heads > 0 && x.dim(2) % heads == 0, "split_heads: bad shape");
  const std::size_t batch = x.dim(0), n = x.dim(1), d = x.dim(2), dh = d / heads;
  std::vector<T> out(x.size());
  const T* xv = x.value().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < dh; ++t)
          out[((b * heads + h) * n + i) * dh + t] = xv[(b * n + i) * d + h * dh + t];
  return make<T>({batch, heads, n, dh}, std::move(out), {&x}, [batch, n, heads, dh, d](Node<T>& self) {
    T* gx = in_grad(self, 0);
    if (!gx) return;
    const T* g = self.grad.data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t t = 0; t < dh; ++t)
            gx[(b * n + i) * d + h * dh + t] += g[((b * heads + h) * n + i) * dh + t];
  });
}

template <typename T>
Var<T> merge_heads(const Var<T>& x) {
  check(x.rank() == 4, "merge_heads: expects [B,H,n,dh]");
  const std::size_t batch = x.dim(0), heads = x.dim(1), n = x.dim(2), dh = x.dim(3), d = heads * dh;
  std::vector<T> out(x.size());
  const T* xv = x.value().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < dh; ++t)
          out[(b * n + i) * d + h * dh + t] = xv[((b * heads + h) * n + i) * dh + t];
  return make<T>({batch, n, d}, std::move(out), {&x}, [batch, n, heads, dh, d](Node<T>& self) {
    T* gx = in_grad(self, 0);
    if (!gx) return;
    const T* g = self.grad.data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t t = 0; t < dh; ++t)
            gx[((b * heads + h) * n + i) * dh + t] += g[(b * n + i) * d + h * dh + t];
  });
}

template <typename T>
Var<T> select_position(const Var<T>& x, std::size_t pos) {
  check(x.rank() == 3 && pos < x.dim(1), "select_position: bad shape or position");
  const std::size_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  std::vector<T> out(batch * d);
  const T* xv = x.value().data();
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(xv + (b * n + pos) * d, d, out.data() + b * d);
  return make<T>({batch, d}, std::move(out), {&x}, [batch, n, d, pos](Node<T>& self) {
    T* gx = in_grad(self, 0);
    if (!gx) return;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < d; ++t) gx[(b * n + pos) * d + t] += self.grad[b * d + t];
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin) {
  check(x.rank() == 2 && begin <= x.dim(0), "slice_rows: bad shape");
  const std::size_t rows = x.dim(0) - begin, d = x.dim(1);
  std::vector<T> out(x.value().begin() + static_cast<std::ptrdiff_t>(begin * d), x.value().end());
  return make<T>({rows, d}, std::move(out), {&x}, [begin, d](Node<T>& self) {
    T* gx = in_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[begin * d + i] += self.grad[i];
  });
}

template <typename T>
Var<T> mean_heads(const Var<T>& x) {
  check(x.rank() == 4, "mean_heads: expects [B,H,n,m]");
  const std::size_t batch = x.dim(0), heads = x.dim(1), block = x.dim(2) * x.dim(3);
  std::vector<T> out(batch * block, T(0));
  const T* xv = x.value().data();
  const T inv = T(1) / static_cast<T>(heads);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t e = 0; e < block; ++e) out[b * block + e] += xv[(b * heads + h) * block + e] * inv;
  return make<T>({batch, 1, x.dim(2), x.dim(3)}, std::move(out), {&x},
                 [batch, heads, block, inv](Node<T>& self) {
                   T* gx = in_grad(self, 0);
                   if (!gx) return;
                   for (std::size_t b = 0; b < batch; ++b)
                     for (std::size_t h = 0; h < heads; ++h)
                       for (std::size_t e = 0; e < block; ++e)
                         gx[(b * heads + h) * block + e] += self.grad[b * block + e] * inv;
                 });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int64_t> ids, const Shape& out_prefix,
                 std::int64_t skip_id) {
  check(table.rank() == 2, "embedding: table must be 2-D");
  check(numel(out_prefix) == ids.size(), "embedding: ids do not match output prefix");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d, T(0));
  const T* tv = table.value().data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const std::int64_t id = ids[r];
    if (id == skip_id) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside table of " +
                              std::to_string(rows) + " rows");
    }
    std::copy_n(tv + static_cast<std::size_t>(id) * d, d, out.data() + r * d);
  }
  Shape shape = out_prefix;
  shape.push_back(d);
  std::vector<std::int64_t> saved(ids.begin(), ids.end());
  return make<T>(std::move(shape), std::move(out), {&table},
                 [saved = std::move(saved), d, skip_id](Node<T>& self) {
                   T* gt = in_grad(self, 0);
                   if (!gt) return;
                   for (std::size_t r = 0; r < saved.size(); ++r) {
                     if (saved[r] == skip_id) continue;
                     T* row = gt + static_cast<std::size_t>(saved[r]) * d;
                     for (std::size_t t = 0; t < d; ++t) row[t] += self.grad[r * d + t];
                   }
                 });
}

template <typename T>
Var<T> masked_softmax(const Var<T>& x, const PairMask& mask) {
  check(x.rank() >= 3, "masked_softmax needs rank >= 3");
  const std::size_t n = x.dim(x.rank() - 2), m = x.dim(x.rank() - 1);
  check(n == mask.rows && m == mask.cols && x.dim(0) == mask.batch,
        "masked_softmax: mask does not match " + to_string(x.shape()));
  const std::size_t blocks = leading(x.shape(), 2);
  const std::size_t per_batch = blocks / mask.batch;
  std::vector<T> out(x.size(), T(0));
  const T* xv = x.value().data();
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t b = blk / per_batch;
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = xv + (blk * n + i) * m;
      T* o = out.data() + (blk * n + i) * m;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < m; ++j)
        if (mask(b, i, j)) mx = std::max(mx, row[j]);
      if (mx == -std::numeric_limits<T>::infinity()) {
        if (i < m) o[i] = T(1);
        continue;
      }
      T s = 0;
      for (std::size_t j = 0; j < m; ++j)
        if (mask(b, i, j)) {
          o[j] = std::exp(row[j] - mx);
          s += o[j];
        }
      const T inv = T(1) / s;
      for (std::size_t j = 0; j < m; ++j)
        if (mask(b, i, j)) o[j] *= inv;
    }
  }
  return make<T>(x.shape(), std::move(out), {&x}, [mask, n, m, per_batch](Node<T>& self) {
    T* gx = in_grad(self, 0);
    if (!gx) return;
    const T* y = self.value.data();
    const T* g = self.grad.data();
    const std::size_t blocks = self.value.size() / (n * m);
    for (std::size_t blk = 0; blk < blocks; ++blk) {
      const std::size_t b = blk / per_batch;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = (blk * n + i) * m;
        T dot = 0;
        for (std::size_t j = 0; j < m; ++j)
          if (mask(b, i, j)) dot += g[base + j] * y[base + j];
        for (std::size_t j = 0; j < m; ++j)
          if (mask(b, i, j)) gx[base + j] += y[base + j] * (g[base + j] - dot);
      }
    }
  });
}

template <typename T>
Var<T> masked_fill(const Var<T>& x, const PairMask& mask, T fill) {
  check(x.rank() >= 3, "masked_fill needs rank >= 3");
  const std::size_t n = x.dim(x.rank() - 2), m = x.dim(x.rank() - 1);
  check(n == mask.rows && m == mask.cols && x.dim(0) == mask.batch, "masked_fill: mask shape");
  const std::size_t blocks = leading(x.shape(), 2);
  const std::size_t per_batch = blocks / mask.batch;
  std::vector<T> out(x.value().begin(), x.value().end());
  for (std::size_t blk = 0; blk < blocks; ++blk)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        if (!mask(blk / per_batch, i, j)) out[(blk * n + i) * m + j] = fill;
  return make<T>(x.shape(), std::move(out), {&x}, [mask, n, m, per_batch](Node<T>& self) {
    T* gx = in_grad(self, 0);
    if (!gx) return;
    const std::size_t blocks = self.value.size() / (n * m);
    for (std::size_t blk = 0; blk < blocks; ++blk)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
          if (mask(blk / per_batch, i, j)) gx[(blk * n + i) * m + j] += self.grad[(blk * n + i) * m + j];
  });
}

template <typename T>
Var<T> pick(const Var<T>& x, std::span<const std::int64_t> cols) {
  check(x.rank() == 2 && x.dim(0) == cols.size(), "pick: shape mismatch");
  const std::size_t rows = x.dim(0), c = x.dim(1);
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= c) throw std::out_of_range("pick: column out of range");
    out[r] = x.value()[r * c + static_cast<std::size_t>(cols[r])];
  }
  std::vector<std::int64_t> saved(cols.begin(), cols.end());
  return make<T>({rows}, std::move(out), {&x}, [saved = std::move(saved), c](Node<T>& self) {
    T* gx = in_grad(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < saved.size(); ++r) gx[r * c + static_cast<std::size_t>(saved[r])] += self.grad[r];
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const std::size_t d = x.shape().back();
  check(gamma.size() == d && beta.size() == d, "layer_norm: parameter size mismatch");
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(rows);
  const T* xv = x.value().data();
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * d;
    T mu = 0;
    for (std::size_t t = 0; t < d; ++t) mu += xr[t];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t t = 0; t < d; ++t) var += (xr[t] - mu) * (xr[t] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t t = 0; t < d; ++t) {
      xhat[r * d + t] = (xr[t] - mu) * rstd[r];
      out[r * d + t] = xhat[r * d + t] * gv[t] + bv[t];
    }
  }
  return make<T>(x.shape(), std::move(out), {&x, &gamma, &beta},
                 [xhat = std::move(xhat), rstd = std::move(rstd), rows, d](Node<T>& self) {
                   const T* g = self.grad.data();
                   const T* gv = self.inputs[1]->value.data();
                   T* gx = in_grad(self, 0);
                   T* gg = in_grad(self, 1);
                   T* gb = in_grad(self, 2);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const T* gr = g + r * d;
                     const T* xh = xhat.data() + r * d;
                     if (gg)
                       for (std::size_t t = 0; t < d; ++t) gg[t] += gr[t] * xh[t];
                     if (gb)
                       for (std::size_t t = 0; t < d; ++t) gb[t] += gr[t];
                     if (gx) {
                       T mean_dy = 0, mean_dy_xh = 0;
                       for (std::size_t t = 0; t < d; ++t) {
                         const T dy = gr[t] * gv[t];
                         mean_dy += dy;
                         mean_dy_xh += dy * xh[t];
                       }
                       mean_dy /= static_cast<T>(d);
                       mean_dy_xh /= static_cast<T>(d);
                       for (std::size_t t = 0; t < d; ++t)
                         gx[r * d + t] += rstd[r] * (gr[t] * gv[t] - mean_dy - xh[t] * mean_dy_xh);
                     }
                   }
                 });
}

template <typename T>
Var<T> dropout(const Var<T>& x, T p, std::mt19937_64& rng) {
  if (p <= T(0)) return x;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const T scale = T(1) / (T(1) - p);
  std::vector<T> m(x.size());
  for (auto& v : m) v = keep(rng) ? scale : T(0);
  return mul(x, Var<T>::constant(x.shape(), std::move(m)));
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int64_t> targets, T max_loss) {
  check(logits.rank() == 2 && logits.dim(0) == targets.size(), "cross_entropy: shape mismatch");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  const T* z = logits.value().data();
  std::vector<T> probs(batch * classes);
  std::vector<std::uint8_t> capped(batch, 0);
  T total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto t = targets[b];
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " out of range");
    }
    const T* zr = z + b * classes;
    const T mx = *std::max_element(zr, zr + classes);
    T s = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[b * classes + c] = std::exp(zr[c] - mx);
      s += probs[b * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] /= s;
    T loss = std::log(s) + mx - zr[t];
    if (loss > max_loss) {
      loss = max_loss;
      capped[b] = 1;
    }
    total += loss;
  }
  std::vector<std::int64_t> saved(targets.begin(), targets.end());
  return make<T>({}, {total / static_cast<T>(batch)}, {&logits},
                 [probs = std::move(probs), capped = std::move(capped), saved = std::move(saved), batch,
                  classes](Node<T>& self) {
                   T* gz = in_grad(self, 0);
                   if (!gz) return;
                   const T g = self.grad[0] / static_cast<T>(batch);
                   for (std::size_t b = 0; b < batch; ++b) {
                     if (capped[b]) continue;
                     for (std::size_t c = 0; c < classes; ++c) gz[b * classes + c] += g * probs[b * classes + c];
                     gz[b * classes + static_cast<std::size_t>(saved[b])] -= g;
                   }
                 });
}

#define ACREC_INSTANTIATE_AUTOGRAD(T)                                                            \
  template class Var<T>;                                                                         \
  template void backward<T>(const Var<T>&);                                                      \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                          \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                          \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                          \
  template Var<T> affine<T>(const Var<T>&, T, T);                                                \
  template Var<T> sigmoid<T>(const Var<T>&);                                                     \
  template Var<T> exp<T>(const Var<T>&);                                                         \
  template Var<T> log<T>(const Var<T>&);                                                         \
  template Var<T> relu<T>(const Var<T>&);                                                        \
  template Var<T> square<T>(const Var<T>&);                                                      \
  template Var<T> clamp<T>(const Var<T>&, T, T);                                                 \
  template Var<T> sum<T>(const Var<T>&);                                                         \
  template Var<T> mean<T>(const Var<T>&);                                                        \
  template Var<T> masked_l2<T>(const Var<T>&, const PairMask&);                                  \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> matmul_nt<T>(const Var<T>&, const Var<T>&);                                    \
  template Var<T> bmm<T>(const Var<T>&, const Var<T>&);                                          \
  template Var<T> bmm_nt<T>(const Var<T>&, const Var<T>&, T);                                    \
  template Var<T> head_matmul<T>(const Var<T>&, const Var<T>&);                                  \
  template Var<T> outer_add<T>(const Var<T>&, const Var<T>&);                                    \
  template Var<T> split_heads<T>(const Var<T>&, std::size_t);                                    \
  template Var<T> merge_heads<T>(const Var<T>&);                                                 \
  template Var<T> select_position<T>(const Var<T>&, std::size_t);                                \
  template Var<T> slice_rows<T>(const Var<T>&, std::size_t);                                     \
  template Var<T> mean_heads<T>(const Var<T>&);                                                  \
  template Var<T> embedding<T>(const Var<T>&, std::span<const std::int64_t>, const Shape&,       \
                               std::int64_t);                                                    \
  template Var<T> masked_softmax<T>(const Var<T>&, const PairMask&);                             \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                 \
  template Var<T> masked_fill<T>(const Var<T>&, const PairMask&, T);                             \
  template Var<T> pick<T>(const Var<T>&, std::span<const std::int64_t>);                         \
  template Var<T> dropout<T>(const Var<T>&, T, std::mt19937_64&);                                \
  template Var<T> cross_entropy<T>(const Var<T>&, std::span<const std::int64_t>, T);

ACREC_INSTANTIATE_AUTOGRAD(float)
ACREC_INSTANTIATE_AUTOGRAD(double)
#undef ACREC_INSTANTIATE_AUTOGRAD

}  // namespace acrec::ag
