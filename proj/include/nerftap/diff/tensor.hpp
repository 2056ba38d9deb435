#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace nerftap::diff {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Raised when an operation receives operands of incompatible shape.
class ShapeError : public std::runtime_error {
 public:
  ShapeError(std::string node, Shape expected, Shape actual);

  const std::string& node() const { return node_; }
  const Shape& expected() const { return expected_; }
  const Shape& actual() const { return actual_; }

 private:
  std::string node_;
  Shape expected_;
  Shape actual_;
};

/// Raised when a computation produces or is fed a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major array. `grad`, when non-empty, always matches `data` in length.
template <class T>
struct TensorT {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;

  TensorT() = default;
  explicit TensorT(Shape s, T fill = T(0));
  TensorT(Shape s, std::vector<T> values);

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int axis) const { return shape.at(static_cast<std::size_t>(axis)); }

  void zero_grad();
  bool all_finite() const;

  template <class U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    return out;
  }
};

using Tensor = TensorT<float>;

extern template struct TensorT<float>;
extern template struct TensorT<double>;

}  // namespace nerftap::diff
