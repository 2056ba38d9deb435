#include "nerftap/diff/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace nerftap::diff {

template <class T>
void adam_step(AdamStateT<T>& state, std::span<TensorT<T>* const> params, T lr) {
  if (!(lr > T(0))) throw std::invalid_argument("adam_step: learning rate must be positive");
  if (state.m.empty()) {
    for (TensorT<T>* p : params) {
      state.m.emplace_back(p->numel(), T(0));
      state.v.emplace_back(p->numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adam_step.params", Shape{static_cast<int>(state.m.size())},
                     Shape{static_cast<int>(params.size())});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const TensorT<T>& p = *params[i];
    if (state.m[i].size() != p.numel()) {
      throw ShapeError("adam_step.moment[" + std::to_string(i) + "]", Shape{static_cast<int>(state.m[i].size())}, p.shape);
    }
    if (!p.grad.empty() && p.grad.size() != p.numel()) {
      throw ShapeError("adam_step.grad[" + std::to_string(i) + "]", p.shape, Shape{static_cast<int>(p.grad.size())});
    }
  }

  state.step += 1;
  const T b1 = state.beta1, b2 = state.beta2;
  const T c1 = T(1) - std::pow(b1, T(state.step));
  const T c2 = T(1) - std::pow(b2, T(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    TensorT<T>& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has_grad = !p.grad.empty();
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const T g = has_grad ? p.grad[k] : T(0);
      m[k] = b1 * m[k] + (T(1) - b1) * g;
      v[k] = b2 * v[k] + (T(1) - b2) * g * g;
      const T mhat = m[k] / c1;
      const T vhat = v[k] / c2;
      p.data[k] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

double cosine_anneal_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps < 1) throw std::invalid_argument("cosine_anneal_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    throw std::out_of_range("cosine_anneal_lr: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
  }
  const double lr = base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(total_steps)));
  return lr < 0.0 ? 0.0 : lr;
}

template void adam_step<float>(AdamStateT<float>&, std::span<TensorT<float>* const>, float);
template void adam_step<double>(AdamStateT<double>&, std::span<TensorT<double>* const>, double);

}  // namespace nerftap::diff
