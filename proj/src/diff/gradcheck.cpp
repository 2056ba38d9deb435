#include "nerftap/diff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nerftap::diff {

template <class T>
T check_gradient(GraphT<T>& graph, Var output, TensorT<T>& leaf, T h, std::span<const std::size_t> indices) {
  if (!(h > T(0) && h <= T(0.1))) throw std::invalid_argument("check_gradient: h must lie in (0, 0.1]");
  if (graph.value(output).numel() != 1) throw ShapeError("check_gradient", Shape{1}, graph.shape(output));
  if (!leaf.requires_grad) throw std::invalid_argument("check_gradient: leaf does not require grad");

  std::vector<std::size_t> all;
  if (indices.empty()) {
    all.resize(leaf.numel());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    indices = all;
  }

  graph.forward();
  leaf.zero_grad();
  graph.backward(output);
  const std::vector<T> analytic = leaf.grad;

  T worst = T(0);
  for (std::size_t i : indices) {
    if (i >= leaf.numel()) throw std::out_of_range("check_gradient: index out of range");
    const T saved = leaf.data[i];
    leaf.data[i] = saved + h;
    graph.forward();
    const T up = graph.item(output);
    leaf.data[i] = saved - h;
    graph.forward();
    const T down = graph.item(output);
    leaf.data[i] = saved;
    const T numeric = (up - down) / (T(2) * h);
    const T err = std::abs(analytic[i] - numeric) / std::max(T(1e-8), std::abs(analytic[i]) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  graph.forward();
  return worst;
}

template float check_gradient<float>(GraphT<float>&, Var, TensorT<float>&, float, std::span<const std::size_t>);
template double check_gradient<double>(GraphT<double>&, Var, TensorT<double>&, double, std::span<const std::size_t>);

}  // namespace nerftap::diff
