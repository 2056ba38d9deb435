#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nerftap/diff/tensor.hpp"

namespace nerftap::diff {

/// Moment buffers for bias-corrected Adam. Buffers are sized on the first step.
template <class T>
struct AdamStateT {
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
  T base_lr = T(3e-4);
};

using AdamState = AdamStateT<float>;

/// One Adam update of every tensor in `params` using its `grad`. Tensors with an
/// empty grad are treated as having a zero gradient.
template <class T>
void adam_step(AdamStateT<T>& state, std::span<TensorT<T>* const> params, T lr);

/// base_lr * 0.5 * (1 + cos(pi * step / total_steps)), floored at zero.
double cosine_anneal_lr(double base_lr, std::int64_t step, std::int64_t total_steps);

/// Clears the gradients of every tensor in `params`.
template <class T>
void zero_grads(std::span<TensorT<T>* const> params) {
  for (TensorT<T>* p : params) p->zero_grad();
}

extern template void adam_step<float>(AdamStateT<float>&, std::span<TensorT<float>* const>, float);
extern template void adam_step<double>(AdamStateT<double>&, std::span<TensorT<double>* const>, double);

}  // namespace nerftap::diff
