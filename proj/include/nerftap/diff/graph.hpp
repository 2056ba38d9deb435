#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "nerftap/diff/tensor.hpp"

namespace nerftap::diff {

/// Handle to a node inside a GraphT. Only meaningful for the graph that issued it.
struct Var {
  static constexpr std::uint32_t kNone = 0xffffffffu;
  std::uint32_t id = kNone;
  bool valid() const { return id != kNone; }
};

/// Define-by-run reverse-mode tape.
///
/// Nodes are evaluated eagerly as they are appended, so every input id of node k
/// is smaller than k. `forward()` replays the whole tape in order, which lets a
/// caller perturb a parameter tensor in place and re-evaluate (used by
/// gradient checks). Parameter leaves reference tensors owned by the caller;
/// `backward()` accumulates into their `grad` arrays additively.
///
/// Images are channel-major (C x H x W) with no batch axis.
template <class T>
class GraphT {
 public:
  using Tensor = TensorT<T>;

  GraphT() = default;
  GraphT(const GraphT&) = delete;
  GraphT& operator=(const GraphT&) = delete;
  GraphT(GraphT&&) noexcept = default;
  GraphT& operator=(GraphT&&) noexcept = default;

  // Leaves.
  Var constant(Tensor t);
  Var constant(Shape shape, std::vector<T> values);
  Var scalar(T v);
  /// Leaf reading a caller-owned tensor; gradients accumulate into t.grad when t.requires_grad.
  Var param(Tensor& t);
  /// Leaf reading a caller-owned tensor that never receives gradients.
  Var param(const Tensor& t);

  // Inspection.
  const Tensor& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape; }
  T item(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  const std::string& kind(Var v) const { return node(v).kind; }
  const std::vector<std::uint32_t>& inputs(Var v) const { return node(v).inputs; }
  /// Gradient of the last backward output w.r.t. node v; empty when v does not need grad.
  const std::vector<T>& grad(Var v) const { return node(v).grad; }

  void forward();
  void backward(Var output);

  // Elementwise binary. Operands share a shape, or one of them holds a single element.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);

  // Elementwise unary.
  Var scale(Var x, T c);
  Var add_scalar(Var x, T c);
  Var relu(Var x);
  Var leaky_relu(Var x, T slope = T(0.2));
  Var sigmoid(Var x);
  Var softplus(Var x);
  Var exp(Var x);
  Var log(Var x);
  Var sqrt(Var x);
  Var square(Var x);
  Var clamp(Var x, T lo, T hi);

  // Reductions to a single-element tensor of shape [1].
  Var sum(Var x);
  Var mean(Var x);
  Var l2_norm(Var x);

  // Structure.
  Var reshape(Var x, Shape shape);
  Var concat(std::span<const Var> parts);
  Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }
  Var slice(Var x, int begin, int end);
  Var slice_cols(Var x, int begin, int end);
  Var concat_cols(std::span<const Var> parts);
  Var concat_cols(std::initializer_list<Var> parts) {
    return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
  }
  Var transpose(Var x);

  // Linear algebra.
  Var matmul(Var a, Var b);
  /// x [N x in] * w [in x out] + bias [out].
  Var linear(Var x, Var w, Var bias);

  // Images.
  /// Stride-1 zero-padded convolution. x [Ci x H x W], w [Co x Ci x k x k], bias [Co] or invalid.
  Var conv2d(Var x, Var w, Var bias);
  Var avg_pool2(Var x);
  Var upsample_nearest(Var x, int factor);
  /// Half-pixel-centred bilinear upsampling with edge clamping.
  Var upsample_bilinear(Var x, int factor);
  /// Bilinear gather. x [C x H x W], coords [N x 2] holding (column, row) in pixel
  /// units; samples outside the image clamp to the border. Returns [C x N].
  Var grid_sample(Var x, Var coords);
  /// Copy of base [C x H x W] whose pixels idx[n] are replaced by values[:, n].
  Var overwrite_pixels(Var base, Var values, std::vector<int> idx);
  /// [n_rows x K] zeros with row rows[i] taken from x[i]; x is [rows.size() x K].
  Var scatter_rows(Var x, std::vector<int> rows, int n_rows);
  /// x [C x H x W] plus the same plane [H x W] on every channel.
  Var add_plane(Var x, Var plane);

  // Domain kernels.
  /// Quadrature of the emission-absorption integral. density [R x S], color [R*S x K]
  /// with constant step `delta`. Returns [R x (K+1)]: composited channels (background
  /// blended through the residual transmittance) followed by the accumulated opacity.
  Var volume_composite(Var density, Var color, T delta, std::vector<T> background);
  /// x [C x H x W] -> F F^T / (C*H*W) with F the [C x HW] flattening.
  Var gram(Var x);

 private:
  struct Node {
    std::string kind;
    std::vector<std::uint32_t> inputs;
    Tensor value;
    const Tensor* external = nullptr;
    Tensor* grad_sink = nullptr;
    bool needs_grad = false;
    std::vector<T> grad;
    std::function<void(GraphT&, std::uint32_t)> fwd;
    std::function<void(GraphT&, std::uint32_t)> bwd;
  };

  using Kernel = std::function<void(GraphT&, std::uint32_t)>;

  Var push(std::string kind, std::vector<std::uint32_t> inputs, Kernel fwd, Kernel bwd);
  Var binary(const char* kind, Var a, Var b, int op);
  template <class F, class DF>
  Var unary(const char* kind, Var x, F f, DF df);

  const Node& node(Var v) const;
  Node& node(Var v);
  Tensor& out(std::uint32_t self) { return nodes_[self].value; }
  const Tensor& in(std::uint32_t self, std::size_t k) const;
  /// Gradient buffer of input k of node self, zero-allocated on demand; nullptr if k needs no grad.
  std::vector<T>* gin(std::uint32_t self, std::size_t k);
  const std::vector<T>& gout(std::uint32_t self) const { return nodes_[self].grad; }

  std::vector<Node> nodes_;
};

using Graph = GraphT<float>;

extern template class GraphT<float>;
extern template class GraphT<double>;

}  // namespace nerftap::diff
