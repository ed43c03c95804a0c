#include "abus/reference_ops.hpp"

#include "abus/errors.hpp"

namespace abus::reference {

namespace {

Extent3 effective_stride(const Extent3& s, Index rank) {
  Extent3 out = s;
  if (rank == 4) out.d = 1;
  return out;
}

}  // namespace

template <typename T>
Tensor<T> convolve(const Tensor<T>& input, const ConvWeights<T>& w) {
  if (input.channels() != w.in_channels() || input.rank() != w.kernel.rank())
    throw ContractViolation("reference convolve: input " + to_string(input.shape()) + " vs kernel " +
                            to_string(w.kernel.shape()));
  const Extent3 ie = input.spatial();
  const Extent3 k = w.extent();
  const Extent3 s = effective_stride(w.stride, input.rank());
  const AxisGeometry gd = conv_axis(ie.d, k.d, s.d, w.padding);
  const AxisGeometry gh = conv_axis(ie.h, k.h, s.h, w.padding);
  const AxisGeometry gw = conv_axis(ie.w, k.w, s.w, w.padding);
  const Extent3 oe{gd.out, gh.out, gw.out};
  Tensor<T> out(make_shape(input.batch(), w.out_channels(), oe, input.spatial_rank()));
  for (Index n = 0; n < input.batch(); ++n)
    for (Index o = 0; o < w.out_channels(); ++o)
      for (Index z = 0; z < oe.d; ++z)
        for (Index y = 0; y < oe.h; ++y)
          for (Index x = 0; x < oe.w; ++x) {
            double acc = static_cast<double>(w.bias[static_cast<std::size_t>(o)]);
            for (Index i = 0; i < input.channels(); ++i)
              for (Index kz = 0; kz < k.d; ++kz)
                for (Index ky = 0; ky < k.h; ++ky)
                  for (Index kx = 0; kx < k.w; ++kx) {
                    const Index iz = z * s.d + kz - gd.pad_lo;
                    const Index iy = y * s.h + ky - gh.pad_lo;
                    const Index ix = x * s.w + kx - gw.pad_lo;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= ie.d || iy >= ie.h || ix >= ie.w) continue;
                    const T wv = w.kernel[(((o * input.channels() + i) * k.d + kz) * k.h + ky) * k.w + kx];
                    const T xv = input[(((n * input.channels() + i) * ie.d + iz) * ie.h + iy) * ie.w + ix];
                    acc += static_cast<double>(wv) * static_cast<double>(xv);
                  }
            out[(((n * w.out_channels() + o) * oe.d + z) * oe.h + y) * oe.w + x] = static_cast<T>(acc);
          }
  return out;
}

template <typename T>
Tensor<T> transposed_convolve(const Tensor<T>& input, const ConvWeights<T>& w) {
  if (input.channels() != w.in_channels() || input.rank() != w.kernel.rank())
    throw ContractViolation("reference transposed_convolve: input " + to_string(input.shape()) + " vs kernel " +
                            to_string(w.kernel.shape()));
  const Extent3 ie = input.spatial();
  const Extent3 k = w.extent();
  const Extent3 s = effective_stride(w.stride, input.rank());
  const AxisGeometry gd = transposed_axis(ie.d, k.d, s.d, w.padding);
  const AxisGeometry gh = transposed_axis(ie.h, k.h, s.h, w.padding);
  const AxisGeometry gw = transposed_axis(ie.w, k.w, s.w, w.padding);
  const Extent3 oe{gd.out, gh.out, gw.out};
  const Index C = input.channels();
  const Index O = w.out_channels();
  std::vector<double> acc(static_cast<std::size_t>(input.batch() * O * oe.volume()));
  for (Index n = 0; n < input.batch(); ++n)
    for (Index o = 0; o < O; ++o)
      for (Index v = 0; v < oe.volume(); ++v)
        acc[static_cast<std::size_t>((n * O + o) * oe.volume() + v)] = w.bias[static_cast<std::size_t>(o)];
  for (Index n = 0; n < input.batch(); ++n)
    for (Index i = 0; i < C; ++i)
      for (Index qz = 0; qz < ie.d; ++qz)
        for (Index qy = 0; qy < ie.h; ++qy)
          for (Index qx = 0; qx < ie.w; ++qx) {
            const T xv = input[(((n * C + i) * ie.d + qz) * ie.h + qy) * ie.w + qx];
            for (Index o = 0; o < O; ++o)
              for (Index kz = 0; kz < k.d; ++kz)
                for (Index ky = 0; ky < k.h; ++ky)
                  for (Index kx = 0; kx < k.w; ++kx) {
                    const Index z = qz * s.d + kz - gd.pad_lo;
                    const Index y = qy * s.h + ky - gh.pad_lo;
                    const Index x = qx * s.w + kx - gw.pad_lo;
                    if (z < 0 || y < 0 || x < 0 || z >= oe.d || y >= oe.h || x >= oe.w) continue;
                    const T wv = w.kernel[(((o * C + i) * k.d + kz) * k.h + ky) * k.w + kx];
                    acc[static_cast<std::size_t>((((n * O + o) * oe.d + z) * oe.h + y) * oe.w + x)] +=
                        static_cast<double>(wv) * static_cast<double>(xv);
                  }
          }
  std::vector<T> values(acc.begin(), acc.end());
  return Tensor<T>(make_shape(input.batch(), O, oe, input.spatial_rank()), std::move(values));
}

template Tensor<float> convolve(const Tensor<float>&, const ConvWeights<float>&);
template Tensor<double> convolve(const Tensor<double>&, const ConvWeights<double>&);
template Tensor<float> transposed_convolve(const Tensor<float>&, const ConvWeights<float>&);
template Tensor<double> transposed_convolve(const Tensor<double>&, const ConvWeights<double>&);

}  // namespace abus::reference
