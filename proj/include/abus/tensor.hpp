#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace abus {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

// Extents of the three spatial axes. Rank-4 (2-D) tensors report depth 1.
struct Extent3 {
  Index d = 1;
  Index h = 1;
  Index w = 1;

  Index volume() const noexcept { return d * h * w; }
  bool operator==(const Extent3&) const = default;
};

std::string to_string(const Shape& shape);
std::string to_string(const Extent3& e);
Index shape_volume(const Shape& shape);

// Dense batch x channel x [depth x] height x width array in row-major order.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{});
  Tensor(Shape shape, std::vector<T> values);

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index spatial_rank() const noexcept { return rank() - 2; }
  Index size() const noexcept { return static_cast<Index>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  Index batch() const { return shape_.at(0); }
  Index channels() const { return shape_.at(1); }
  Extent3 spatial() const;

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  // Start of the spatial block belonging to (sample, channel).
  T* plane(Index n, Index c) { return data() + (n * channels() + c) * spatial().volume(); }
  const T* plane(Index n, Index c) const {
    return data() + (n * channels() + c) * spatial().volume();
  }

  void fill(T value);

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Shape of a tensor with the same batch and spatial extents but `channels` channels.
Shape with_channels(const Shape& shape, Index channels);
Shape make_shape(Index batch, Index channels, const Extent3& spatial, Index spatial_rank);

extern template class Tensor<float>;
extern template class Tensor<double>;

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace abus
