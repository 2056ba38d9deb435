#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "nerftap/diff/graph.hpp"

namespace nerftap::diff {

/// Compares reverse-mode gradients of a scalar `output` w.r.t. `leaf` (a tensor
/// registered in `graph` through param()) with central differences of step h.
///
/// Returns max_i |analytic - numeric| / max(1e-8, |analytic| + |numeric|) over the
/// checked elements (all elements when `indices` is empty). The graph is replayed
/// with the original leaf values before returning.
template <class T>
T check_gradient(GraphT<T>& graph, Var output, TensorT<T>& leaf, T h, std::span<const std::size_t> indices = {});

extern template float check_gradient<float>(GraphT<float>&, Var, TensorT<float>&, float, std::span<const std::size_t>);
extern template double check_gradient<double>(GraphT<double>&, Var, TensorT<double>&, double,
                                              std::span<const std::size_t>);

}  // namespace nerftap::diff
