#include "nerftap/diff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace nerftap::diff {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

ShapeError::ShapeError(std::string node, Shape expected, Shape actual)
    : std::runtime_error("shape mismatch at " + node + ": expected " + shape_string(expected) + ", got " +
                         shape_string(actual)),
      node_(std::move(node)),
      expected_(std::move(expected)),
      actual_(std::move(actual)) {}

template <class T>
TensorT<T>::TensorT(Shape s, T fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

template <class T>
TensorT<T>::TensorT(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor", shape, Shape{static_cast<int>(data.size())});
  }
}

template <class T>
void TensorT<T>::zero_grad() {
  grad.assign(data.size(), T(0));
}

template <class T>
bool TensorT<T>::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](T v) { return std::isfinite(v); });
}

template struct TensorT<float>;
template struct TensorT<double>;

}  // namespace nerftap::diff
