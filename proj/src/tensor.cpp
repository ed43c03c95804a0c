#include "abus/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "abus/errors.hpp"

namespace abus {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::string to_string(const Extent3& e) {
  std::ostringstream os;
  os << e.d << 'x' << e.h << 'x' << e.w;
  return os.str();
}

Index shape_volume(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.size() != 4 && shape.size() != 5)
    throw ContractViolation("tensor rank must be 4 or 5, got shape " + to_string(shape));
  if (std::any_of(shape.begin(), shape.end(), [](Index e) { return e < 1; }))
    throw ContractViolation("tensor extents must be positive, got shape " + to_string(shape));
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(static_cast<std::size_t>(shape_volume(shape_)), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  check_shape(shape_);
  if (static_cast<Index>(data_.size()) != shape_volume(shape_))
    throw ContractViolation("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + to_string(shape_));
}

template <typename T>
Extent3 Tensor<T>::spatial() const {
  if (shape_.size() == 5) return {shape_[2], shape_[3], shape_[4]};
  return {1, shape_[2], shape_[3]};
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

Shape with_channels(const Shape& shape, Index channels) {
  Shape out = shape;
  out.at(1) = channels;
  return out;
}

Shape make_shape(Index batch, Index channels, const Extent3& spatial, Index spatial_rank) {
  if (spatial_rank == 3) return {batch, channels, spatial.d, spatial.h, spatial.w};
  return {batch, channels, spatial.h, spatial.w};
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace abus
