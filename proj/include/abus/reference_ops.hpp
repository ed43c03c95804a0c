#pragma once

// Serial, loop-per-definition versions of the convolution kernels. They are
// slow on purpose: tests use them as oracles and the benchmark compares the
// parallel kernels against them.

#include "abus/ops.hpp"

namespace abus::reference {

// out[n,o,p] = b[o] + sum_i sum_k w[o,i,k] * in[n,i,p*s + k - pad]
template <typename T>
Tensor<T> convolve(const Tensor<T>& input, const ConvWeights<T>& w);

// Scatter-add: for every input element, out[n,o,q*s + k - pad] += in[n,i,q] * w[o,i,k].
template <typename T>
Tensor<T> transposed_convolve(const Tensor<T>& input, const ConvWeights<T>& w);

}  // namespace abus::reference
