#pragma once

// Differentiable kernels for the U-net family. Every forward map has a
// matching *_backward that returns the gradient with respect to its inputs
// and parameters. Spatial loops are OpenMP-parallel over independent output
// planes, so results are bitwise identical for any thread count.

#include <array>
#include <utility>
#include <vector>

#include "abus/tensor.hpp"

namespace abus {

enum class Padding { same, valid };

template <typename T>
struct ConvWeights {
  Tensor<T> kernel;  // (out-channels, in-channels, k...)
  std::vector<T> bias;
  Extent3 stride{1, 1, 1};
  Padding padding = Padding::same;

  Index out_channels() const { return kernel.shape().at(0); }
  Index in_channels() const { return kernel.shape().at(1); }
  Extent3 extent() const { return kernel.spatial(); }
};

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> kernel;
  std::vector<T> bias;
};

// Output extent and lower padding along one axis of a strided convolution.
struct AxisGeometry {
  Index out = 0;
  Index pad_lo = 0;
};
AxisGeometry conv_axis(Index n, Index k, Index stride, Padding padding);
AxisGeometry transposed_axis(Index n, Index k, Index stride, Padding padding);

template <typename T>
Tensor<T> convolve(const Tensor<T>& input, const ConvWeights<T>& w);
template <typename T>
ConvGrads<T> convolve_backward(const Tensor<T>& input, const ConvWeights<T>& w,
                               const Tensor<T>& grad_output);

// Fractionally strided convolution: out[q*s + k - pad] += in[q] * w[k].
template <typename T>
Tensor<T> transposed_convolve(const Tensor<T>& input, const ConvWeights<T>& w);
template <typename T>
ConvGrads<T> transposed_convolve_backward(const Tensor<T>& input, const ConvWeights<T>& w,
                                          const Tensor<T>& grad_output);

// 2x2(x2) max pooling with stride two. `argmax` holds, per output element, the
// linear index of the winning input element (lowest index on ties).
template <typename T>
struct PoolResult {
  Tensor<T> output;
  std::vector<Index> argmax;
};

template <typename T>
PoolResult<T> max_pool(const Tensor<T>& input);
template <typename T>
Tensor<T> max_pool_backward(const Shape& input_shape, const std::vector<Index>& argmax,
                            const Tensor<T>& grad_output);

enum class BatchNormMode { train, infer };

template <typename T>
struct BatchNormState {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T epsilon = T(1e-5);
  T momentum = T(0.9);
  BatchNormMode mode = BatchNormMode::train;

  static BatchNormState fresh(Index channels);
  Index channels() const { return static_cast<Index>(gamma.size()); }
};

template <typename T>
struct BatchNormCache {
  Tensor<T> normalized;
  std::vector<T> mean;
  std::vector<T> variance;
  std::vector<T> inv_std;
  BatchNormMode mode = BatchNormMode::train;
};

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

// Train mode normalizes with batch statistics and folds them into the running
// statistics: running = momentum * running + (1 - momentum) * batch.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& state,
                     BatchNormCache<T>* cache = nullptr);
template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormState<T>& state, const BatchNormCache<T>& cache,
                                      const Tensor<T>& grad_output);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);
// Passes the gradient where the forward input was strictly positive.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_output);

template <typename T>
Tensor<T> softmax_over_channels(const Tensor<T>& input);
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_probs);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, Index first_channels);

// Per-axis linear interpolation table: output j blends source lo[j] and
// hi[j] with weight frac[j] on hi.
struct LinearAxisMap {
  Index source_extent = 1;
  std::vector<Index> lo;
  std::vector<Index> hi;
  std::vector<double> frac;

  Index target_extent() const { return static_cast<Index>(lo.size()); }
  static LinearAxisMap identity(Index extent);
  // Target j samples source coordinate start + j * step, clamped to the source.
  static LinearAxisMap sampling(Index source_extent, Index target_extent, double start, double step);
};
using LinearMap3 = std::array<LinearAxisMap, 3>;

template <typename T>
Tensor<T> interpolate(const Tensor<T>& input, const LinearMap3& maps);
template <typename T>
Tensor<T> interpolate_backward(const Shape& input_shape, const LinearMap3& maps,
                               const Tensor<T>& grad_output);

}  // namespace abus
