#include "nerftap/diff/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

namespace nerftap::diff {

namespace {

enum BinaryOp { kAdd = 0, kSub = 1, kMul = 2, kDiv = 3 };

template <class T>
struct Tap {
  int x0, x1, y0, y1;
  T wx, wy;
  bool free_x, free_y;
};

// Border-clamped bilinear footprint of (cx, cy) on an h x w lattice.
template <class T>
Tap<T> make_tap(T cx, T cy, int h, int w) {
  Tap<T> t{};
  t.free_x = cx >= T(0) && cx <= T(w - 1);
  t.free_y = cy >= T(0) && cy <= T(h - 1);
  T x = std::clamp(cx, T(0), T(w - 1));
  T y = std::clamp(cy, T(0), T(h - 1));
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  x0 = std::clamp(x0, 0, std::max(w - 2, 0));
  y0 = std::clamp(y0, 0, std::max(h - 2, 0));
  t.x0 = x0;
  t.y0 = y0;
  t.x1 = std::min(x0 + 1, w - 1);
  t.y1 = std::min(y0 + 1, h - 1);
  t.wx = x - T(x0);
  t.wy = y - T(y0);
  return t;
}

// Separable 1-D taps for half-pixel-centred resampling by an integer factor.
template <class T>
void upsample_taps(int in, int factor, std::vector<int>& lo, std::vector<int>& hi, std::vector<T>& wt) {
  const int out = in * factor;
  lo.resize(out);
  hi.resize(out);
  wt.resize(out);
  for (int o = 0; o < out; ++o) {
    T s = (T(o) + T(0.5)) / T(factor) - T(0.5);
    s = std::clamp(s, T(0), T(in - 1));
    int i0 = std::min(static_cast<int>(std::floor(s)), std::max(in - 2, 0));
    lo[o] = i0;
    hi[o] = std::min(i0 + 1, in - 1);
    wt[o] = s - T(i0);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape mechanics

template <class T>
const typename GraphT<T>::Node& GraphT<T>::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw std::out_of_range("invalid graph variable");
  return nodes_[v.id];
}

template <class T>
typename GraphT<T>::Node& GraphT<T>::node(Var v) {
  if (!v.valid() || v.id >= nodes_.size()) throw std::out_of_range("invalid graph variable");
  return nodes_[v.id];
}

template <class T>
const TensorT<T>& GraphT<T>::value(Var v) const {
  const Node& n = node(v);
  return n.external ? *n.external : n.value;
}

template <class T>
T GraphT<T>::item(Var v) const {
  const Tensor& t = value(v);
  if (t.numel() != 1) throw ShapeError("item", Shape{1}, t.shape);
  return t.data[0];
}

template <class T>
const TensorT<T>& GraphT<T>::in(std::uint32_t self, std::size_t k) const {
  const Node& n = nodes_[nodes_[self].inputs[k]];
  return n.external ? *n.external : n.value;
}

template <class T>
std::vector<T>* GraphT<T>::gin(std::uint32_t self, std::size_t k) {
  Node& n = nodes_[nodes_[self].inputs[k]];
  if (!n.needs_grad) return nullptr;
  if (n.grad.empty()) {
    const Tensor& v = n.external ? *n.external : n.value;
    n.grad.assign(v.numel(), T(0));
  }
  return &n.grad;
}

template <class T>
Var GraphT<T>::push(std::string kind, std::vector<std::uint32_t> inputs, Kernel fwd, Kernel bwd) {
  Node n;
  n.kind = std::move(kind);
  for (std::uint32_t i : inputs) {
    if (i >= nodes_.size()) throw std::out_of_range("graph input refers to a later node");
    n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
  }
  n.inputs = std::move(inputs);
  n.fwd = std::move(fwd);
  n.bwd = std::move(bwd);
  nodes_.push_back(std::move(n));
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  nodes_[id].fwd(*this, id);
  return Var{id};
}

template <class T>
Var GraphT<T>::constant(Tensor t) {
  Node n;
  n.kind = "constant";
  n.value = std::move(t);
  n.value.requires_grad = false;
  n.value.grad.clear();
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
Var GraphT<T>::constant(Shape shape, std::vector<T> values) {
  return constant(Tensor(std::move(shape), std::move(values)));
}

template <class T>
Var GraphT<T>::scalar(T v) {
  return constant(Tensor(Shape{1}, std::vector<T>{v}));
}

template <class T>
Var GraphT<T>::param(Tensor& t) {
  if (shape_numel(t.shape) != t.data.size()) throw ShapeError("param", t.shape, Shape{int(t.data.size())});
  Node n;
  n.kind = "param";
  n.external = &t;
  n.grad_sink = &t;
  n.needs_grad = t.requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
Var GraphT<T>::param(const Tensor& t) {
  if (shape_numel(t.shape) != t.data.size()) throw ShapeError("param", t.shape, Shape{int(t.data.size())});
  Node n;
  n.kind = "param";
  n.external = &t;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
void GraphT<T>::forward() {
  for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].fwd) nodes_[i].fwd(*this, i);
  }
}

template <class T>
void GraphT<T>::backward(Var output) {
  const Tensor& out_value = value(output);
  if (out_value.numel() != 1) throw ShapeError("backward", Shape{1}, out_value.shape);
  for (Node& n : nodes_) n.grad.clear();
  Node& o = node(output);
  if (!o.needs_grad) return;
  o.grad.assign(1, T(1));
  for (std::int64_t i = output.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.empty() || !n.bwd) continue;
    n.bwd(*this, static_cast<std::uint32_t>(i));
  }
  for (Node& n : nodes_) {
    if (!n.grad_sink || !n.needs_grad || n.grad.empty()) continue;
    auto& sink = n.grad_sink->grad;
    if (sink.size() != n.grad.size()) sink.assign(n.grad.size(), T(0));
    for (std::size_t k = 0; k < n.grad.size(); ++k) sink[k] += n.grad[k];
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var GraphT<T>::binary(const char* kind, Var a, Var b, int op) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  const std::size_t na = value(a).numel();
  const std::size_t nb = value(b).numel();
  if (!(sa == sb || na == 1 || nb == 1)) throw ShapeError(kind, sa, sb);
  auto fwd = [op](GraphT& g, std::uint32_t self) {
    const Tensor& x = g.in(self, 0);
    const Tensor& y = g.in(self, 1);
    const std::size_t nx = x.numel(), ny = y.numel();
    const std::size_t n = std::max(nx, ny);
    Tensor& o = g.out(self);
    o.shape = nx >= ny ? x.shape : y.shape;
    o.data.resize(n);
    const std::size_t sx = nx == 1 ? 0 : 1, sy = ny == 1 ? 0 : 1;
    for (std::size_t i = 0; i < n; ++i) {
      const T u = x.data[i * sx], v = y.data[i * sy];
      switch (op) {
        case kAdd: o.data[i] = u + v; break;
        case kSub: o.data[i] = u - v; break;
        case kMul: o.data[i] = u * v; break;
        default: o.data[i] = u / v; break;
      }
    }
  };
  auto bwd = [op](GraphT& g, std::uint32_t self) {
    const Tensor& x = g.in(self, 0);
    const Tensor& y = g.in(self, 1);
    const auto& go = g.gout(self);
    const std::size_t nx = x.numel(), ny = y.numel();
    const std::size_t n = go.size();
    const std::size_t sx = nx == 1 ? 0 : 1, sy = ny == 1 ? 0 : 1;
    if (auto* gx = g.gin(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        T d = go[i];
        if (op == kMul) d *= y.data[i * sy];
        if (op == kDiv) d /= y.data[i * sy];
        (*gx)[i * sx] += d;
      }
    }
    if (auto* gy = g.gin(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        T d = go[i];
        switch (op) {
          case kAdd: break;
          case kSub: d = -d; break;
          case kMul: d *= x.data[i * sx]; break;
          default: {
            const T v = y.data[i * sy];
            d = -d * x.data[i * sx] / (v * v);
          }
        }
        (*gy)[i * sy] += d;
      }
    }
  };
  return push(kind, {a.id, b.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::add(Var a, Var b) { return binary("add", a, b, kAdd); }
template <class T>
Var GraphT<T>::sub(Var a, Var b) { return binary("sub", a, b, kSub); }
template <class T>
Var GraphT<T>::mul(Var a, Var b) { return binary("mul", a, b, kMul); }
template <class T>
Var GraphT<T>::div(Var a, Var b) { return binary("div", a, b, kDiv); }

template <class T>
template <class F, class DF>
Var GraphT<T>::unary(const char* kind, Var x, F f, DF df) {
  auto fwd = [f](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    Tensor& o = g.out(self);
    o.shape = a.shape;
    o.data.resize(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) o.data[i] = f(a.data[i]);
  };
  auto bwd = [df](GraphT& g, std::uint32_t self) {
    auto* ga = g.gin(self, 0);
    if (!ga) return;
    const Tensor& a = g.in(self, 0);
    const Tensor& o = g.out(self);
    const auto& go = g.gout(self);
    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * df(a.data[i], o.data[i]);
  };
  return push(kind, {x.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::scale(Var x, T c) {
  return unary("scale", x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Var GraphT<T>::add_scalar(Var x, T c) {
  return unary("add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Var GraphT<T>::relu(Var x) {
  return unary("relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var GraphT<T>::leaky_relu(Var x, T slope) {
  return unary(
      "leaky_relu", x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <class T>
Var GraphT<T>::sigmoid(Var x) {
  return unary(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var GraphT<T>::softplus(Var x) {
  return unary(
      "softplus", x, [](T v) { return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T v, T) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      });
}

template <class T>
Var GraphT<T>::exp(Var x) {
  return unary("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var GraphT<T>::log(Var x) {
  for (T v : value(x).data) {
    if (!(v > T(0))) throw NumericError("log of non-positive value");
  }
  return unary("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Var GraphT<T>::sqrt(Var x) {
  for (T v : value(x).data) {
    if (v < T(0)) throw NumericError("sqrt of negative value");
  }
  return unary(
      "sqrt", x, [](T v) { return std::sqrt(std::max(v, T(0))); },
      [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <class T>
Var GraphT<T>::square(Var x) {
  return unary("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Var GraphT<T>::clamp(Var x, T lo, T hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return unary(
      "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var GraphT<T>::sum(Var x) {
  auto fwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    double s = 0.0;
    for (T v : a.data) s += v;
    g.out(self) = Tensor(Shape{1}, std::vector<T>{T(s)});
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    if (auto* ga = g.gin(self, 0)) {
      const T d = g.gout(self)[0];
      for (T& v : *ga) v += d;
    }
  };
  return push("sum", {x.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::mean(Var x) {
  auto fwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    double s = 0.0;
    for (T v : a.data) s += v;
    g.out(self) = Tensor(Shape{1}, std::vector<T>{T(s / double(a.numel()))});
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    if (auto* ga = g.gin(self, 0)) {
      const T d = g.gout(self)[0] / T(ga->size());
      for (T& v : *ga) v += d;
    }
  };
  return push("mean", {x.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::l2_norm(Var x) {
  auto fwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    double s = 0.0;
    for (T v : a.data) s += double(v) * double(v);
    g.out(self) = Tensor(Shape{1}, std::vector<T>{T(std::sqrt(s))});
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    auto* ga = g.gin(self, 0);
    const T norm = g.out(self).data[0];
    if (!ga || norm == T(0)) return;
    const Tensor& a = g.in(self, 0);
    const T d = g.gout(self)[0] / norm;
    for (std::size_t i = 0; i < a.numel(); ++i) (*ga)[i] += d * a.data[i];
  };
  return push("l2_norm", {x.id}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Structure

template <class T>
Var GraphT<T>::reshape(Var x, Shape s) {
  if (shape_numel(s) != value(x).numel()) throw ShapeError("reshape", s, shape(x));
  auto fwd = [s](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    Tensor& o = g.out(self);
    o.shape = s;
    o.data = a.data;
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    if (auto* ga = g.gin(self, 0)) {
      const auto& go = g.gout(self);
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
    }
  };
  return push("reshape", {x.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::concat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat of nothing");
  const Shape& first = shape(parts[0]);
  std::vector<std::uint32_t> ids;
  for (Var p : parts) {
    const Shape& s = shape(p);
    bool ok = s.size() == first.size() && !s.empty();
    for (std::size_t d = 1; ok && d < s.size(); ++d) ok = s[d] == first[d];
    if (!ok) throw ShapeError("concat", first, s);
    ids.push_back(p.id);
  }
  auto fwd = [](GraphT& g, std::uint32_t self) {
    Tensor& o = g.out(self);
    const std::size_t k = g.nodes_[self].inputs.size();
    o.shape = g.in(self, 0).shape;
    o.shape[0] = 0;
    o.data.clear();
    for (std::size_t i = 0; i < k; ++i) {
      const Tensor& a = g.in(self, i);
      o.shape[0] += a.shape[0];
      o.data.insert(o.data.end(), a.data.begin(), a.data.end());
    }
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    const auto& go = g.gout(self);
    const std::size_t k = g.nodes_[self].inputs.size();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t n = g.in(self, i).numel();
      if (auto* ga = g.gin(self, i)) {
        for (std::size_t j = 0; j < n; ++j) (*ga)[j] += go[offset + j];
      }
      offset += n;
    }
  };
  return push("concat", std::move(ids), fwd, bwd);
}

template <class T>
Var GraphT<T>::slice(Var x, int begin, int end) {
  const Shape& s = shape(x);
  if (s.empty() || begin < 0 || end > s[0] || begin >= end) {
    Shape want = s;
    if (!want.empty()) want[0] = end - begin;
    throw ShapeError("slice", want, s);
  }
  auto fwd = [begin, end](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const std::size_t inner = a.numel() / std::size_t(a.shape[0]);
    Tensor& o = g.out(self);
    o.shape = a.shape;
    o.shape[0] = end - begin;
    o.data.assign(a.data.begin() + std::ptrdiff_t(begin * inner), a.data.begin() + std::ptrdiff_t(end * inner));
  };
  auto bwd = [begin](GraphT& g, std::uint32_t self) {
    if (auto* ga = g.gin(self, 0)) {
      const Tensor& a = g.in(self, 0);
      const std::size_t inner = a.numel() / std::size_t(a.shape[0]);
      const auto& go = g.gout(self);
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[begin * inner + i] += go[i];
    }
  };
  return push("slice", {x.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::slice_cols(Var x, int begin, int end) {
  const Shape& s = shape(x);
  if (s.size() != 2 || begin < 0 || end > s[1] || begin >= end) {
    throw ShapeError("slice_cols", Shape{s.empty() ? 0 : s[0], end - begin}, s);
  }
  auto fwd = [begin, end](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const int rows = a.shape[0], cols = a.shape[1], w = end - begin;
    Tensor& o = g.out(self);
    o.shape = {rows, w};
    o.data.resize(std::size_t(rows) * w);
    for (int r = 0; r < rows; ++r) {
      std::copy_n(a.data.begin() + std::ptrdiff_t(r) * cols + begin, w, o.data.begin() + std::ptrdiff_t(r) * w);
    }
  };
  auto bwd = [begin, end](GraphT& g, std::uint32_t self) {
    if (auto* ga = g.gin(self, 0)) {
      const Tensor& a = g.in(self, 0);
      const int rows = a.shape[0], cols = a.shape[1], w = end - begin;
      const auto& go = g.gout(self);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c) (*ga)[std::size_t(r) * cols + begin + c] += go[std::size_t(r) * w + c];
    }
  };
  return push("slice_cols", {x.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols of nothing");
  const Shape& first = shape(parts[0]);
  std::vector<std::uint32_t> ids;
  for (Var p : parts) {
    const Shape& s = shape(p);
    if (s.size() != 2 || first.size() != 2 || s[0] != first[0]) throw ShapeError("concat_cols", first, s);
    ids.push_back(p.id);
  }
  auto fwd = [](GraphT& g, std::uint32_t self) {
    const std::size_t k = g.nodes_[self].inputs.size();
    const int rows = g.in(self, 0).shape[0];
    int total = 0;
    for (std::size_t i = 0; i < k; ++i) total += g.in(self, i).shape[1];
    Tensor& o = g.out(self);
    o.shape = {rows, total};
    o.data.resize(std::size_t(rows) * total);
    int offset = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const Tensor& a = g.in(self, i);
      const int w = a.shape[1];
      for (int r = 0; r < rows; ++r) {
        std::copy_n(a.data.begin() + std::ptrdiff_t(r) * w, w, o.data.begin() + std::ptrdiff_t(r) * total + offset);
      }
      offset += w;
    }
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    const std::size_t k = g.nodes_[self].inputs.size();
    const auto& go = g.gout(self);
    const Tensor& o = g.out(self);
    const int rows = o.shape[0], total = o.shape[1];
    int offset = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const int w = g.in(self, i).shape[1];
      if (auto* ga = g.gin(self, i)) {
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < w; ++c) (*ga)[std::size_t(r) * w + c] += go[std::size_t(r) * total + offset + c];
      }
      offset += w;
    }
  };
  return push("concat_cols", std::move(ids), fwd, bwd);
}

template <class T>
Var GraphT<T>::transpose(Var x) {
  const Shape& s = shape(x);
  if (s.size() != 2) throw ShapeError("transpose", Shape{0, 0}, s);
  auto fwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const int r = a.shape[0], c = a.shape[1];
    Tensor& o = g.out(self);
    o.shape = {c, r};
    o.data.resize(a.numel());
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) o.data[std::size_t(j) * r + i] = a.data[std::size_t(i) * c + j];
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    if (auto* ga = g.gin(self, 0)) {
      const Tensor& a = g.in(self, 0);
      const int r = a.shape[0], c = a.shape[1];
      const auto& go = g.gout(self);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) (*ga)[std::size_t(i) * c + j] += go[std::size_t(j) * r + i];
    }
  };
  return push("transpose", {x.id}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace {

// c[m x n] += a[m x k] * b[k x n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + std::size_t(i) * n;
    const T* arow = a + std::size_t(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + std::size_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Gradients of c = a * b given dc: da += dc * b^T, db += a^T * dc.
template <class T>
void gemm_backward(const T* a, const T* b, const T* dc, T* da, T* db, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* dcrow = dc + std::size_t(i) * n;
    const T* arow = a + std::size_t(i) * k;
    for (int p = 0; p < k; ++p) {
      const T* brow = b + std::size_t(p) * n;
      if (da) {
        T acc = T(0);
        for (int j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
        da[std::size_t(i) * k + p] += acc;
      }
      if (db) {
        const T av = arow[p];
        T* dbrow = db + std::size_t(p) * n;
        for (int j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
      }
    }
  }
}

}  // namespace

template <class T>
Var GraphT<T>::matmul(Var a, Var b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul", Shape{sa.empty() ? 0 : sa.back(), sb.size() == 2 ? sb[1] : 0}, sb);
  }
  auto fwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& x = g.in(self, 0);
    const Tensor& y = g.in(self, 1);
    const int m = x.shape[0], k = x.shape[1], n = y.shape[1];
    Tensor& o = g.out(self);
    o.shape = {m, n};
    o.data.assign(std::size_t(m) * n, T(0));
    gemm_nn(x.data.data(), y.data.data(), o.data.data(), m, k, n);
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& x = g.in(self, 0);
    const Tensor& y = g.in(self, 1);
    auto* gx = g.gin(self, 0);
    auto* gy = g.gin(self, 1);
    gemm_backward(x.data.data(), y.data.data(), g.gout(self).data(), gx ? gx->data() : nullptr,
                  gy ? gy->data() : nullptr, x.shape[0], x.shape[1], y.shape[1]);
  };
  return push("matmul", {a.id, b.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::linear(Var x, Var w, Var bias) {
  const Shape& sx = shape(x);
  const Shape& sw = shape(w);
  const Shape& sb = shape(bias);
  if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[0]) throw ShapeError("linear", Shape{sx.empty() ? 0 : sx[1], -1}, sw);
  if (sb != Shape{sw[1]}) throw ShapeError("linear.bias", Shape{sw[1]}, sb);
  auto fwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const Tensor& wt = g.in(self, 1);
    const Tensor& b = g.in(self, 2);
    const int m = a.shape[0], k = a.shape[1], n = wt.shape[1];
    Tensor& o = g.out(self);
    o.shape = {m, n};
    o.data.resize(std::size_t(m) * n);
    for (int i = 0; i < m; ++i) std::copy(b.data.begin(), b.data.end(), o.data.begin() + std::ptrdiff_t(i) * n);
    gemm_nn(a.data.data(), wt.data.data(), o.data.data(), m, k, n);
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const Tensor& wt = g.in(self, 1);
    const auto& go = g.gout(self);
    const int m = a.shape[0], n = wt.shape[1];
    auto* ga = g.gin(self, 0);
    auto* gw = g.gin(self, 1);
    gemm_backward(a.data.data(), wt.data.data(), go.data(), ga ? ga->data() : nullptr, gw ? gw->data() : nullptr, m,
                  a.shape[1], n);
    if (auto* gb = g.gin(self, 2)) {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) (*gb)[j] += go[std::size_t(i) * n + j];
    }
  };
  return push("linear", {x.id, w.id, bias.id}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Images

template <class T>
Var GraphT<T>::conv2d(Var x, Var w, Var bias) {
  const Shape& sx = shape(x);
  const Shape& sw = shape(w);
  if (sx.size() != 3) throw ShapeError("conv2d.input", Shape{-1, -1, -1}, sx);
  if (sw.size() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0) {
    throw ShapeError("conv2d.weight", Shape{sw.empty() ? -1 : sw[0], sx[0], 3, 3}, sw);
  }
  const bool has_bias = bias.valid();
  if (has_bias && shape(bias) != Shape{sw[0]}) throw ShapeError("conv2d.bias", Shape{sw[0]}, shape(bias));
  std::vector<std::uint32_t> ids{x.id, w.id};
  if (has_bias) ids.push_back(bias.id);

  auto fwd = [has_bias](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const Tensor& wt = g.in(self, 1);
    const int ci = a.shape[0], h = a.shape[1], wd = a.shape[2];
    const int co = wt.shape[0], k = wt.shape[2], pad = k / 2;
    Tensor& o = g.out(self);
    o.shape = {co, h, wd};
    o.data.assign(std::size_t(co) * h * wd, T(0));
    const std::size_t plane = std::size_t(h) * wd;
    for (int oc = 0; oc < co; ++oc) {
      T* op = o.data.data() + oc * plane;
      if (has_bias) std::fill(op, op + plane, g.in(self, 2).data[oc]);
      for (int ic = 0; ic < ci; ++ic) {
        const T* ip = a.data.data() + ic * plane;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = ky - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - pad;
            const T wv = wt.data[((std::size_t(oc) * ci + ic) * k + ky) * k + kx];
            if (wv == T(0)) continue;
            const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
            for (int y = y0; y < y1; ++y) {
              T* orow = op + std::size_t(y) * wd;
              const T* irow = ip + std::size_t(y + dy) * wd + dx;
              for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * irow[xx];
            }
          }
        }
      }
    }
  };
  auto bwd = [has_bias](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const Tensor& wt = g.in(self, 1);
    const auto& go = g.gout(self);
    const int ci = a.shape[0], h = a.shape[1], wd = a.shape[2];
    const int co = wt.shape[0], k = wt.shape[2], pad = k / 2;
    const std::size_t plane = std::size_t(h) * wd;
    auto* ga = g.gin(self, 0);
    auto* gw = g.gin(self, 1);
    if (has_bias) {
      if (auto* gb = g.gin(self, 2)) {
        for (int oc = 0; oc < co; ++oc) {
          T acc = T(0);
          const T* gp = go.data() + oc * plane;
          for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
          (*gb)[oc] += acc;
        }
      }
    }
    if (!ga && !gw) return;
    for (int oc = 0; oc < co; ++oc) {
      const T* gp = go.data() + oc * plane;
      for (int ic = 0; ic < ci; ++ic) {
        const T* ip = a.data.data() + ic * plane;
        T* gip = ga ? ga->data() + ic * plane : nullptr;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = ky - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - pad;
            const std::size_t widx = ((std::size_t(oc) * ci + ic) * k + ky) * k + kx;
            const T wv = wt.data[widx];
            const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
            T acc = T(0);
            for (int y = y0; y < y1; ++y) {
              const T* grow = gp + std::size_t(y) * wd;
              const T* irow = ip + std::size_t(y + dy) * wd + dx;
              if (gw) {
                for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
              }
              if (gip && wv != T(0)) {
                T* girow = gip + std::size_t(y + dy) * wd + dx;
                for (int xx = x0; xx < x1; ++xx) girow[xx] += wv * grow[xx];
              }
            }
            if (gw) (*gw)[widx] += acc;
          }
        }
      }
    }
  };
  return push("conv2d", std::move(ids), fwd, bwd);
}

template <class T>
Var GraphT<T>::avg_pool2(Var x) {
  const Shape& s = shape(x);
  if (s.size() != 3 || s[1] % 2 || s[2] % 2) throw ShapeError("avg_pool2", Shape{s.empty() ? -1 : s[0], -2, -2}, s);
  auto fwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const int c = a.shape[0], h = a.shape[1], w = a.shape[2], oh = h / 2, ow = w / 2;
    Tensor& o = g.out(self);
    o.shape = {c, oh, ow};
    o.data.resize(std::size_t(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const T* p = a.data.data() + (std::size_t(ch) * h + 2 * y) * w + 2 * xx;
          o.data[(std::size_t(ch) * oh + y) * ow + xx] = T(0.25) * (p[0] + p[1] + p[w] + p[w + 1]);
        }
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    auto* ga = g.gin(self, 0);
    if (!ga) return;
    const Tensor& a = g.in(self, 0);
    const auto& go = g.gout(self);
    const int c = a.shape[0], h = a.shape[1], w = a.shape[2], oh = h / 2, ow = w / 2;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const T d = T(0.25) * go[(std::size_t(ch) * oh + y) * ow + xx];
          T* p = ga->data() + (std::size_t(ch) * h + 2 * y) * w + 2 * xx;
          p[0] += d;
          p[1] += d;
          p[w] += d;
          p[w + 1] += d;
        }
  };
  return push("avg_pool2", {x.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::upsample_nearest(Var x, int factor) {
  const Shape& s = shape(x);
  if (s.size() != 3 || factor < 1) throw ShapeError("upsample_nearest", Shape{-1, -1, -1}, s);
  auto fwd = [factor](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const int c = a.shape[0], h = a.shape[1], w = a.shape[2], oh = h * factor, ow = w * factor;
    Tensor& o = g.out(self);
    o.shape = {c, oh, ow};
    o.data.resize(std::size_t(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
          o.data[(std::size_t(ch) * oh + y) * ow + xx] = a.data[(std::size_t(ch) * h + y / factor) * w + xx / factor];
  };
  auto bwd = [factor](GraphT& g, std::uint32_t self) {
    auto* ga = g.gin(self, 0);
    if (!ga) return;
    const Tensor& a = g.in(self, 0);
    const auto& go = g.gout(self);
    const int c = a.shape[0], h = a.shape[1], w = a.shape[2], oh = h * factor, ow = w * factor;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
          (*ga)[(std::size_t(ch) * h + y / factor) * w + xx / factor] += go[(std::size_t(ch) * oh + y) * ow + xx];
  };
  return push("upsample_nearest", {x.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::upsample_bilinear(Var x, int factor) {
  const Shape& s = shape(x);
  if (s.size() != 3 || factor < 1) throw ShapeError("upsample_bilinear", Shape{-1, -1, -1}, s);
  auto fwd = [factor](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const int c = a.shape[0], h = a.shape[1], w = a.shape[2], oh = h * factor, ow = w * factor;
    std::vector<int> ylo, yhi, xlo, xhi;
    std::vector<T> yw, xw;
    upsample_taps(h, factor, ylo, yhi, yw);
    upsample_taps(w, factor, xlo, xhi, xw);
    Tensor& o = g.out(self);
    o.shape = {c, oh, ow};
    o.data.resize(std::size_t(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch) {
      const T* p = a.data.data() + std::size_t(ch) * h * w;
      for (int y = 0; y < oh; ++y) {
        const T* r0 = p + std::size_t(ylo[y]) * w;
        const T* r1 = p + std::size_t(yhi[y]) * w;
        const T wy = yw[y];
        T* orow = o.data.data() + (std::size_t(ch) * oh + y) * ow;
        for (int xx = 0; xx < ow; ++xx) {
          const T wx = xw[xx];
          const T top = (T(1) - wx) * r0[xlo[xx]] + wx * r0[xhi[xx]];
          const T bot = (T(1) - wx) * r1[xlo[xx]] + wx * r1[xhi[xx]];
          orow[xx] = (T(1) - wy) * top + wy * bot;
        }
      }
    }
  };
  auto bwd = [factor](GraphT& g, std::uint32_t self) {
    auto* ga = g.gin(self, 0);
    if (!ga) return;
    const Tensor& a = g.in(self, 0);
    const auto& go = g.gout(self);
    const int c = a.shape[0], h = a.shape[1], w = a.shape[2], oh = h * factor, ow = w * factor;
    std::vector<int> ylo, yhi, xlo, xhi;
    std::vector<T> yw, xw;
    upsample_taps(h, factor, ylo, yhi, yw);
    upsample_taps(w, factor, xlo, xhi, xw);
    for (int ch = 0; ch < c; ++ch) {
      T* p = ga->data() + std::size_t(ch) * h * w;
      for (int y = 0; y < oh; ++y) {
        T* r0 = p + std::size_t(ylo[y]) * w;
        T* r1 = p + std::size_t(yhi[y]) * w;
        const T wy = yw[y];
        const T* grow = go.data() + (std::size_t(ch) * oh + y) * ow;
        for (int xx = 0; xx < ow; ++xx) {
          const T wx = xw[xx];
          const T d = grow[xx];
          r0[xlo[xx]] += (T(1) - wy) * (T(1) - wx) * d;
          r0[xhi[xx]] += (T(1) - wy) * wx * d;
          r1[xlo[xx]] += wy * (T(1) - wx) * d;
          r1[xhi[xx]] += wy * wx * d;
        }
      }
    }
  };
  return push("upsample_bilinear", {x.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::grid_sample(Var x, Var coords) {
  const Shape& sx = shape(x);
  const Shape& sc = shape(coords);
  if (sx.size() != 3) throw ShapeError("grid_sample.input", Shape{-1, -1, -1}, sx);
  if (sc.size() != 2 || sc[1] != 2) throw ShapeError("grid_sample.coords", Shape{-1, 2}, sc);
  auto fwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const Tensor& cd = g.in(self, 1);
    const int c = a.shape[0], h = a.shape[1], w = a.shape[2], n = cd.shape[0];
    Tensor& o = g.out(self);
    o.shape = {c, n};
    o.data.resize(std::size_t(c) * n);
    for (int i = 0; i < n; ++i) {
      const Tap<T> t = make_tap(cd.data[2 * i], cd.data[2 * i + 1], h, w);
      const T w00 = (T(1) - t.wy) * (T(1) - t.wx), w01 = (T(1) - t.wy) * t.wx;
      const T w10 = t.wy * (T(1) - t.wx), w11 = t.wy * t.wx;
      const std::size_t i00 = std::size_t(t.y0) * w + t.x0, i01 = std::size_t(t.y0) * w + t.x1;
      const std::size_t i10 = std::size_t(t.y1) * w + t.x0, i11 = std::size_t(t.y1) * w + t.x1;
      for (int ch = 0; ch < c; ++ch) {
        const T* p = a.data.data() + std::size_t(ch) * h * w;
        o.data[std::size_t(ch) * n + i] = w00 * p[i00] + w01 * p[i01] + w10 * p[i10] + w11 * p[i11];
      }
    }
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const Tensor& cd = g.in(self, 1);
    const auto& go = g.gout(self);
    const int c = a.shape[0], h = a.shape[1], w = a.shape[2], n = cd.shape[0];
    auto* ga = g.gin(self, 0);
    auto* gc = g.gin(self, 1);
    for (int i = 0; i < n; ++i) {
      const Tap<T> t = make_tap(cd.data[2 * i], cd.data[2 * i + 1], h, w);
      const T w00 = (T(1) - t.wy) * (T(1) - t.wx), w01 = (T(1) - t.wy) * t.wx;
      const T w10 = t.wy * (T(1) - t.wx), w11 = t.wy * t.wx;
      const std::size_t i00 = std::size_t(t.y0) * w + t.x0, i01 = std::size_t(t.y0) * w + t.x1;
      const std::size_t i10 = std::size_t(t.y1) * w + t.x0, i11 = std::size_t(t.y1) * w + t.x1;
      T dcx = T(0), dcy = T(0);
      for (int ch = 0; ch < c; ++ch) {
        const T d = go[std::size_t(ch) * n + i];
        if (ga) {
          T* p = ga->data() + std::size_t(ch) * h * w;
          p[i00] += w00 * d;
          p[i01] += w01 * d;
          p[i10] += w10 * d;
          p[i11] += w11 * d;
        }
        if (gc) {
          const T* p = a.data.data() + std::size_t(ch) * h * w;
          dcx += d * ((T(1) - t.wy) * (p[i01] - p[i00]) + t.wy * (p[i11] - p[i10]));
          dcy += d * ((T(1) - t.wx) * (p[i10] - p[i00]) + t.wx * (p[i11] - p[i01]));
        }
      }
      if (gc) {
        if (t.free_x && t.x1 != t.x0) (*gc)[2 * i] += dcx;
        if (t.free_y && t.y1 != t.y0) (*gc)[2 * i + 1] += dcy;
      }
    }
  };
  return push("grid_sample", {x.id, coords.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::overwrite_pixels(Var base, Var values, std::vector<int> idx) {
  const Shape& sb = shape(base);
  const Shape& sv = shape(values);
  if (sb.size() != 3) throw ShapeError("overwrite_pixels.base", Shape{-1, -1, -1}, sb);
  if (sv != Shape{sb[0], static_cast<int>(idx.size())}) {
    throw ShapeError("overwrite_pixels.values", Shape{sb[0], static_cast<int>(idx.size())}, sv);
  }
  const int plane = sb[1] * sb[2];
  for (int i : idx) {
    if (i < 0 || i >= plane) throw std::out_of_range("overwrite_pixels: pixel index out of range");
  }
  auto fwd = [idx](GraphT& g, std::uint32_t self) {
    const Tensor& b = g.in(self, 0);
    const Tensor& v = g.in(self, 1);
    const std::size_t plane = std::size_t(b.shape[1]) * b.shape[2];
    const std::size_t n = idx.size();
    Tensor& o = g.out(self);
    o.shape = b.shape;
    o.data = b.data;
    for (int ch = 0; ch < b.shape[0]; ++ch)
      for (std::size_t k = 0; k < n; ++k) o.data[ch * plane + idx[k]] = v.data[ch * n + k];
  };
  auto bwd = [idx](GraphT& g, std::uint32_t self) {
    const Tensor& b = g.in(self, 0);
    const auto& go = g.gout(self);
    const std::size_t plane = std::size_t(b.shape[1]) * b.shape[2];
    const std::size_t n = idx.size();
    if (auto* gb = g.gin(self, 0)) {
      std::vector<char> replaced(plane, 0);
      for (int i : idx) replaced[i] = 1;
      for (int ch = 0; ch < b.shape[0]; ++ch)
        for (std::size_t p = 0; p < plane; ++p)
          if (!replaced[p]) (*gb)[ch * plane + p] += go[ch * plane + p];
    }
    if (auto* gv = g.gin(self, 1)) {
      for (int ch = 0; ch < b.shape[0]; ++ch)
        for (std::size_t k = 0; k < n; ++k) (*gv)[ch * n + k] += go[ch * plane + idx[k]];
    }
  };
  return push("overwrite_pixels", {base.id, values.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::scatter_rows(Var x, std::vector<int> rows, int n_rows) {
  const Shape& sx = shape(x);
  if (sx.size() != 2 || sx[0] != static_cast<int>(rows.size())) {
    throw ShapeError("scatter_rows", Shape{static_cast<int>(rows.size()), sx.size() == 2 ? sx[1] : -1}, sx);
  }
  for (int r : rows) {
    if (r < 0 || r >= n_rows) throw std::out_of_range("scatter_rows: row index out of range");
  }
  auto fwd = [rows, n_rows](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const std::size_t k = a.shape[1];
    Tensor& o = g.out(self);
    o.shape = Shape{n_rows, a.shape[1]};
    o.data.assign(std::size_t(n_rows) * k, T(0));
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy_n(a.data.begin() + i * k, k, o.data.begin() + std::size_t(rows[i]) * k);
  };
  auto bwd = [rows](GraphT& g, std::uint32_t self) {
    auto* ga = g.gin(self, 0);
    if (!ga) return;
    const auto& go = g.gout(self);
    const std::size_t k = g.in(self, 0).shape[1];
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t c = 0; c < k; ++c) (*ga)[i * k + c] += go[std::size_t(rows[i]) * k + c];
  };
  return push("scatter_rows", {x.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::add_plane(Var x, Var plane) {
  const Shape& sx = shape(x);
  const Shape& sp = shape(plane);
  if (sx.size() != 3 || sp != Shape{sx[1], sx[2]}) throw ShapeError("add_plane", Shape{sx.size() == 3 ? sx[1] : -1, sx.size() == 3 ? sx[2] : -1}, sp);
  auto fwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const Tensor& p = g.in(self, 1);
    const std::size_t n = p.numel();
    Tensor& o = g.out(self);
    o.shape = a.shape;
    o.data.resize(a.numel());
    for (int ch = 0; ch < a.shape[0]; ++ch)
      for (std::size_t i = 0; i < n; ++i) o.data[ch * n + i] = a.data[ch * n + i] + p.data[i];
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    const auto& go = g.gout(self);
    const Tensor& a = g.in(self, 0);
    const std::size_t n = g.in(self, 1).numel();
    if (auto* ga = g.gin(self, 0)) {
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
    }
    if (auto* gp = g.gin(self, 1)) {
      for (int ch = 0; ch < a.shape[0]; ++ch)
        for (std::size_t i = 0; i < n; ++i) (*gp)[i] += go[ch * n + i];
    }
  };
  return push("add_plane", {x.id, plane.id}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Domain kernels

template <class T>
Var GraphT<T>::volume_composite(Var density, Var color, T delta, std::vector<T> background) {
  const Shape& sd = shape(density);
  const Shape& sc = shape(color);
  if (sd.size() != 2) throw ShapeError("volume_composite.density", Shape{-1, -1}, sd);
  const int k = sc.size() == 2 ? sc[1] : -1;
  if (sc.size() != 2 || sc[0] != sd[0] * sd[1]) throw ShapeError("volume_composite.color", Shape{sd[0] * sd[1], k}, sc);
  if (background.size() > std::size_t(k)) throw ShapeError("volume_composite.background", Shape{k}, Shape{int(background.size())});
  if (!(delta > T(0))) throw std::invalid_argument("volume_composite: step must be positive");
  background.resize(std::size_t(k), T(0));
  for (T s : value(density).data) {
    if (!std::isfinite(s)) throw NumericError("volume_composite: non-finite density");
  }

  auto fwd = [delta, background](GraphT& g, std::uint32_t self) {
    const Tensor& d = g.in(self, 0);
    const Tensor& col = g.in(self, 1);
    const int rays = d.shape[0], steps = d.shape[1], kk = col.shape[1];
    Tensor& o = g.out(self);
    o.shape = {rays, kk + 1};
    o.data.assign(std::size_t(rays) * (kk + 1), T(0));
    for (int r = 0; r < rays; ++r) {
      T* orow = o.data.data() + std::size_t(r) * (kk + 1);
      T trans = T(1), acc = T(0);
      for (int s = 0; s < steps; ++s) {
        const T e = std::exp(-d.data[std::size_t(r) * steps + s] * delta);
        const T wgt = trans * (T(1) - e);
        const T* crow = col.data.data() + (std::size_t(r) * steps + s) * kk;
        for (int c = 0; c < kk; ++c) orow[c] += wgt * crow[c];
        acc += wgt;
        trans *= e;
      }
      for (int c = 0; c < kk; ++c) orow[c] += (T(1) - acc) * background[c];
      orow[kk] = acc;
    }
  };
  auto bwd = [delta, background](GraphT& g, std::uint32_t self) {
    const Tensor& d = g.in(self, 0);
    const Tensor& col = g.in(self, 1);
    const auto& go = g.gout(self);
    const int rays = d.shape[0], steps = d.shape[1], kk = col.shape[1];
    auto* gd = g.gin(self, 0);
    auto* gc = g.gin(self, 1);
    std::vector<T> trans(steps), ex(steps), wgt(steps), h(steps);
    for (int r = 0; r < rays; ++r) {
      const T* grow = go.data() + std::size_t(r) * (kk + 1);
      T bg_term = grow[kk];
      for (int c = 0; c < kk; ++c) bg_term -= grow[c] * background[c];
      T t = T(1);
      for (int s = 0; s < steps; ++s) {
        const T e = std::exp(-d.data[std::size_t(r) * steps + s] * delta);
        trans[s] = t;
        ex[s] = e;
        wgt[s] = t * (T(1) - e);
        const T* crow = col.data.data() + (std::size_t(r) * steps + s) * kk;
        T hs = bg_term;
        for (int c = 0; c < kk; ++c) hs += grow[c] * crow[c];
        h[s] = hs;
        if (gc) {
          T* gcrow = gc->data() + (std::size_t(r) * steps + s) * kk;
          for (int c = 0; c < kk; ++c) gcrow[c] += wgt[s] * grow[c];
        }
        t *= e;
      }
      if (gd) {
        T suffix = T(0);
        for (int s = steps - 1; s >= 0; --s) {
          (*gd)[std::size_t(r) * steps + s] += delta * (trans[s] * ex[s] * h[s] - suffix);
          suffix += wgt[s] * h[s];
        }
      }
    }
  };
  return push("volume_composite", {density.id, color.id}, fwd, bwd);
}

template <class T>
Var GraphT<T>::gram(Var x) {
  const Shape& s = shape(x);
  if (s.size() != 3) throw ShapeError("gram", Shape{-1, -1, -1}, s);
  auto fwd = [](GraphT& g, std::uint32_t self) {
    const Tensor& a = g.in(self, 0);
    const int c = a.shape[0];
    const std::size_t n = std::size_t(a.shape[1]) * a.shape[2];
    const T norm = T(1) / (T(c) * T(n));
    Tensor& o = g.out(self);
    o.shape = {c, c};
    o.data.assign(std::size_t(c) * c, T(0));
    for (int i = 0; i < c; ++i) {
      const T* fi = a.data.data() + i * n;
      for (int j = i; j < c; ++j) {
        const T* fj = a.data.data() + j * n;
        T acc = T(0);
        for (std::size_t p = 0; p < n; ++p) acc += fi[p] * fj[p];
        o.data[std::size_t(i) * c + j] = acc * norm;
        o.data[std::size_t(j) * c + i] = acc * norm;
      }
    }
  };
  auto bwd = [](GraphT& g, std::uint32_t self) {
    auto* ga = g.gin(self, 0);
    if (!ga) return;
    const Tensor& a = g.in(self, 0);
    const auto& go = g.gout(self);
    const int c = a.shape[0];
    const std::size_t n = std::size_t(a.shape[1]) * a.shape[2];
    const T norm = T(1) / (T(c) * T(n));
    for (int i = 0; i < c; ++i) {
      T* gi = ga->data() + i * n;
      for (int j = 0; j < c; ++j) {
        const T coef = (go[std::size_t(i) * c + j] + go[std::size_t(j) * c + i]) * norm;
        if (coef == T(0)) continue;
        const T* fj = a.data.data() + j * n;
        for (std::size_t p = 0; p < n; ++p) gi[p] += coef * fj[p];
      }
    }
  };
  return push("gram", {x.id}, fwd, bwd);
}

template class GraphT<float>;
template class GraphT<double>;

}  // namespace nerftap::diff
