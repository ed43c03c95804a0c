#include "abus/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "abus/errors.hpp"

namespace abus {

AxisGeometry conv_axis(Index n, Index k, Index stride, Padding padding) {
  if (k < 1 || stride < 1) throw ContractViolation("kernel extent and stride must be positive");
  if (padding == Padding::same) {
    const Index out = (n + stride - 1) / stride;
    const Index total = std::max<Index>((out - 1) * stride + k - n, 0);
    return {out, total / 2};
  }
  if (n < k)
    throw ContractViolation("valid convolution needs extent >= kernel, got " + std::to_string(n) +
                            " < " + std::to_string(k));
  return {(n - k) / stride + 1, 0};
}

AxisGeometry transposed_axis(Index n, Index k, Index stride, Padding padding) {
  if (k < 1 || stride < 1) throw ContractViolation("kernel extent and stride must be positive");
  if (padding == Padding::same) {
    if (k < stride)
      throw ContractViolation("transposed convolution with kernel " + std::to_string(k) +
                              " < stride " + std::to_string(stride) +
                              " cannot produce a same-padded output");
    return {n * stride, (k - stride) / 2};
  }
  return {(n - 1) * stride + k, 0};
}

namespace {

struct ConvDims {
  Index batch = 0;
  Index in_ch = 0;
  Index out_ch = 0;
  Extent3 in;
  Extent3 out;
  Extent3 k;
  Extent3 stride;
  Extent3 pad;
  Index rank = 5;
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& input, const ConvWeights<T>& w, bool transposed) {
  const Tensor<T>& kernel = w.kernel;
  if (input.rank() != kernel.rank())
    throw ContractViolation("input " + to_string(input.shape()) + " and kernel " +
                            to_string(kernel.shape()) + " have different spatial rank");
  if (input.channels() != kernel.shape()[1])
    throw ContractViolation("input " + to_string(input.shape()) + " channel count does not match kernel " +
                            to_string(kernel.shape()));
  if (static_cast<Index>(w.bias.size()) != kernel.shape()[0])
    throw ContractViolation("bias length " + std::to_string(w.bias.size()) +
                            " does not match kernel " + to_string(kernel.shape()));
  ConvDims d;
  d.rank = input.rank();
  d.batch = input.batch();
  d.in_ch = input.channels();
  d.out_ch = kernel.shape()[0];
  d.in = input.spatial();
  d.k = kernel.spatial();
  d.stride = w.stride;
  if (d.rank == 4) d.stride.d = 1;
  const auto axis = transposed ? transposed_axis : conv_axis;
  const AxisGeometry gd = axis(d.in.d, d.k.d, d.stride.d, w.padding);
  const AxisGeometry gh = axis(d.in.h, d.k.h, d.stride.h, w.padding);
  const AxisGeometry gw = axis(d.in.w, d.k.w, d.stride.w, w.padding);
  d.out = {gd.out, gh.out, gw.out};
  d.pad = {gd.pad_lo, gh.pad_lo, gw.pad_lo};
  return d;
}

// Output range [lo, hi) along one axis for which o + k - pad lands inside [0, n).
inline void unit_range(Index out, Index n, Index k, Index pad, Index& lo, Index& hi) {
  lo = std::max<Index>(0, pad - k);
  hi = std::min<Index>(out, n + pad - k);
}

// Stride-1 convolutions run on zero-padded planes laid out on a common
// padded grid. On that grid every kernel offset is a constant shift of the
// flat index, so each (channel pair, offset) term is one long contiguous
// multiply-add over the output positions.
struct FlatGeometry {
  Extent3 padded;
  Extent3 out;
  Index length = 0;  // flat span covering every output position
  std::vector<Index> offsets;
};

FlatGeometry flat_geometry(const Extent3& in, const Extent3& lo, const Extent3& out, const Extent3& k) {
  FlatGeometry g;
  g.padded = {std::max(lo.d + in.d, out.d + k.d - 1), std::max(lo.h + in.h, out.h + k.h - 1),
              std::max(lo.w + in.w, out.w + k.w - 1)};
  g.out = out;
  g.length = ((out.d - 1) * g.padded.h + (out.h - 1)) * g.padded.w + out.w;
  for (Index kz = 0; kz < k.d; ++kz)
    for (Index ky = 0; ky < k.h; ++ky)
      for (Index kx = 0; kx < k.w; ++kx) g.offsets.push_back((kz * g.padded.h + ky) * g.padded.w + kx);
  return g;
}

template <typename T>
std::vector<T> pad_planes(const Tensor<T>& x, const Extent3& lo, const Extent3& padded) {
  const Extent3 e = x.spatial();
  const Index planes = x.batch() * x.channels();
  const Index pv = padded.volume();
  std::vector<T> out(static_cast<std::size_t>(planes * pv), T(0));
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < planes; ++p) {
    const T* src = x.data() + p * e.volume();
    T* dst = out.data() + p * pv;
    for (Index z = 0; z < e.d; ++z)
      for (Index y = 0; y < e.h; ++y)
        std::copy(src + (z * e.h + y) * e.w, src + (z * e.h + y + 1) * e.w,
                  dst + ((z + lo.d) * padded.h + (y + lo.h)) * padded.w + lo.w);
  }
  return out;
}

constexpr Index kFlatBlock = 1024;

// dst(n, c) = bias[c] + sum_s sum_k w(c, s)[k] * src(n, s)[p + k] on the padded grid.
// `flip` reverses the kernel, which turns a correlation into a convolution.
template <typename T, typename WeightAt>
void correlate_flat(const std::vector<T>& src, Index batch, Index src_ch, const FlatGeometry& g, Index kvol,
                    WeightAt weight_at, bool flip, const std::vector<T>* bias, Tensor<T>& dst) {
  const Index dst_ch = dst.channels();
  const Index pv = g.padded.volume();
  const Index length = g.length;
#pragma omp parallel for collapse(2) schedule(static)
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < dst_ch; ++c) {
      std::vector<T> ext(static_cast<std::size_t>(length), bias ? (*bias)[static_cast<std::size_t>(c)] : T(0));
      T* e = ext.data();
      for (Index b0 = 0; b0 < length; b0 += kFlatBlock) {
        const Index b1 = std::min(length, b0 + kFlatBlock);
        for (Index s = 0; s < src_ch; ++s) {
          const T* sp = src.data() + (n * src_ch + s) * pv;
          const T* wk = weight_at(c, s);
          for (Index kk = 0; kk < kvol; ++kk) {
            const T wv = wk[flip ? kvol - 1 - kk : kk];
            const T* xs = sp + g.offsets[static_cast<std::size_t>(kk)];
#pragma omp simd
            for (Index f = b0; f < b1; ++f) e[f] += wv * xs[f];
          }
        }
      }
      T* out = dst.plane(n, c);
      for (Index z = 0; z < g.out.d; ++z)
        for (Index y = 0; y < g.out.h; ++y) {
          const T* row = e + (z * g.padded.h + y) * g.padded.w;
          std::copy(row, row + g.out.w, out + (z * g.out.h + y) * g.out.w);
        }
    }
  }
}

// gk(o, i, k) = sum_n sum_p gout(n, o, p) * xpad(n, i, p + k).
template <typename T>
void kernel_grad_flat(const Tensor<T>& input, const Tensor<T>& grad_output, const ConvDims& d, Tensor<T>& gk) {
  const Extent3 lo = d.pad;
  const FlatGeometry g = flat_geometry(d.in, lo, d.out, d.k);
  const std::vector<T> xpad = pad_planes(input, lo, g.padded);
  const Index pv = g.padded.volume();
  const Index length = g.length;
  const Index kvol = d.k.volume();
  // Output gradient embedded in the padded grid; gaps between rows stay zero.
  std::vector<T> gext(static_cast<std::size_t>(d.batch * d.out_ch * length), T(0));
  for (Index p = 0; p < d.batch * d.out_ch; ++p) {
    const T* src = grad_output.data() + p * d.out.volume();
    T* dst = gext.data() + p * length;
    for (Index z = 0; z < d.out.d; ++z)
      for (Index y = 0; y < d.out.h; ++y)
        std::copy(src + (z * d.out.h + y) * d.out.w, src + (z * d.out.h + y + 1) * d.out.w,
                  dst + (z * g.padded.h + y) * g.padded.w);
  }
#pragma omp parallel for schedule(static)
  for (Index o = 0; o < d.out_ch; ++o) {
    std::vector<double> acc(static_cast<std::size_t>(d.in_ch * kvol), 0.0);
    for (Index n = 0; n < d.batch; ++n) {
      const T* go = gext.data() + (n * d.out_ch + o) * length;
      for (Index b0 = 0; b0 < length; b0 += kFlatBlock) {
        const Index b1 = std::min(length, b0 + kFlatBlock);
        for (Index i = 0; i < d.in_ch; ++i) {
          const T* xp = xpad.data() + (n * d.in_ch + i) * pv;
          for (Index kk = 0; kk < kvol; ++kk) {
            const T* xs = xp + g.offsets[static_cast<std::size_t>(kk)];
            T sum = 0;
#pragma omp simd reduction(+ : sum)
            for (Index f = b0; f < b1; ++f) sum += go[f] * xs[f];
            acc[static_cast<std::size_t>(i * kvol + kk)] += static_cast<double>(sum);
          }
        }
      }
    }
    T* dst = gk.data() + o * d.in_ch * kvol;
    for (Index j = 0; j < d.in_ch * kvol; ++j) dst[j] = static_cast<T>(acc[static_cast<std::size_t>(j)]);
  }
}

template <typename T>
void conv_forward_unit(const Tensor<T>& input, const ConvWeights<T>& w, const ConvDims& d, Tensor<T>& out) {
  const FlatGeometry g = flat_geometry(d.in, d.pad, d.out, d.k);
  const std::vector<T> xpad = pad_planes(input, d.pad, g.padded);
  const Index kvol = d.k.volume();
  correlate_flat(
      xpad, d.batch, d.in_ch, g, kvol,
      [&](Index o, Index i) { return w.kernel.data() + (o * d.in_ch + i) * kvol; }, false, &w.bias, out);
}

// Input gradient of a stride-1 convolution: the output gradient convolved
// with the flipped, channel-transposed kernel.
template <typename T>
void conv_input_grad_unit(const Tensor<T>& grad_output, const ConvWeights<T>& w, const ConvDims& d,
                          Tensor<T>& gin) {
  const Extent3 lo{d.k.d - 1 - d.pad.d, d.k.h - 1 - d.pad.h, d.k.w - 1 - d.pad.w};
  const FlatGeometry g = flat_geometry(d.out, lo, d.in, d.k);
  const std::vector<T> gpad = pad_planes(grad_output, lo, g.padded);
  const Index kvol = d.k.volume();
  correlate_flat(
      gpad, d.batch, d.out_ch, g, kvol,
      [&](Index i, Index o) { return w.kernel.data() + (o * d.in_ch + i) * kvol; }, true,
      static_cast<const std::vector<T>*>(nullptr), gin);
}

template <typename T>
void conv_forward_strided(const Tensor<T>& input, const ConvWeights<T>& w, const ConvDims& d, Tensor<T>& out) {
  const Index kvol = d.k.volume();
#pragma omp parallel for collapse(2) schedule(static)
  for (Index n = 0; n < d.batch; ++n) {
    for (Index o = 0; o < d.out_ch; ++o) {
      T* op = out.plane(n, o);
      for (Index oz = 0; oz < d.out.d; ++oz)
        for (Index oy = 0; oy < d.out.h; ++oy)
          for (Index ox = 0; ox < d.out.w; ++ox) {
            T acc = w.bias[o];
            for (Index i = 0; i < d.in_ch; ++i) {
              const T* ip = input.plane(n, i);
              const T* wk = w.kernel.data() + (o * d.in_ch + i) * kvol;
              for (Index kz = 0; kz < d.k.d; ++kz) {
                const Index iz = oz * d.stride.d + kz - d.pad.d;
                if (iz < 0 || iz >= d.in.d) continue;
                for (Index ky = 0; ky < d.k.h; ++ky) {
                  const Index iy = oy * d.stride.h + ky - d.pad.h;
                  if (iy < 0 || iy >= d.in.h) continue;
                  for (Index kx = 0; kx < d.k.w; ++kx) {
                    const Index ix = ox * d.stride.w + kx - d.pad.w;
                    if (ix < 0 || ix >= d.in.w) continue;
                    acc += wk[(kz * d.k.h + ky) * d.k.w + kx] * ip[(iz * d.in.h + iy) * d.in.w + ix];
                  }
                }
              }
            }
            op[(oz * d.out.h + oy) * d.out.w + ox] = acc;
          }
    }
  }
}

// Scatter form shared by transposed convolution forward and the strided
// convolution input gradient: dst[q*s + k - pad] += src[q] * w(dst_ch, src_ch, k),
// where `weight_at(dst_ch, src_ch)` returns the kernel block for that pair.
template <typename T, typename WeightAt>
void scatter_accumulate(const Tensor<T>& src, Tensor<T>& dst, const Extent3& kext, const Extent3& stride,
                        const Extent3& pad, WeightAt weight_at) {
  const Extent3 se = src.spatial();
  const Extent3 de = dst.spatial();
  const Index batch = src.batch();
  const Index src_ch = src.channels();
  const Index dst_ch = dst.channels();
#pragma omp parallel for collapse(2) schedule(static)
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < dst_ch; ++c) {
      T* dp = dst.plane(n, c);
      for (Index s = 0; s < src_ch; ++s) {
        const T* sp = src.plane(n, s);
        const T* wk = weight_at(c, s);
        for (Index kz = 0; kz < kext.d; ++kz)
          for (Index ky = 0; ky < kext.h; ++ky)
            for (Index kx = 0; kx < kext.w; ++kx) {
              const T wv = wk[(kz * kext.h + ky) * kext.w + kx];
              for (Index qz = 0; qz < se.d; ++qz) {
                const Index z = qz * stride.d + kz - pad.d;
                if (z < 0 || z >= de.d) continue;
                for (Index qy = 0; qy < se.h; ++qy) {
                  const Index y = qy * stride.h + ky - pad.h;
                  if (y < 0 || y >= de.h) continue;
                  const T* srow = sp + (qz * se.h + qy) * se.w;
                  T* drow = dp + (z * de.h + y) * de.w;
                  if (stride.w == 1) {
                    const Index xlo = std::max<Index>(0, pad.w - kx);
                    const Index xhi = std::min<Index>(se.w, de.w + pad.w - kx);
                    T* dshift = drow + (kx - pad.w);
#pragma omp simd
                    for (Index qx = xlo; qx < xhi; ++qx) dshift[qx] += wv * srow[qx];
                    continue;
                  }
                  for (Index qx = 0; qx < se.w; ++qx) {
                    const Index x = qx * stride.w + kx - pad.w;
                    if (x < 0 || x >= de.w) continue;
                    drow[x] += wv * srow[qx];
                  }
                }
              }
            }
      }
    }
  }
}

// Gathered correlation gk(a, b, k) = sum_n sum_q big(n, a, q*s + k - pad) * small(n, b, q),
// the kernel gradient of both convolution flavours.
template <typename T>
void correlate_kernel_grad(const Tensor<T>& big, const Tensor<T>& small, const Extent3& kext,
                           const Extent3& stride, const Extent3& pad, bool big_is_output, Tensor<T>& gk) {
  const Extent3 be = big.spatial();
  const Extent3 se = small.spatial();
  const Index batch = big.batch();
  const Index big_ch = big.channels();
  const Index small_ch = small.channels();
  const Index kvol = kext.volume();
  const Index out_ch = gk.shape()[0];
  const Index in_ch = gk.shape()[1];
#pragma omp parallel for schedule(static)
  for (Index o = 0; o < out_ch; ++o) {
    std::vector<double> acc(static_cast<std::size_t>(kvol));
    for (Index i = 0; i < in_ch; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const Index bc = big_is_output ? o : i;
      const Index sc = big_is_output ? i : o;
      (void)big_ch;
      (void)small_ch;
      for (Index n = 0; n < batch; ++n) {
        const T* bp = big.plane(n, bc);
        const T* sp = small.plane(n, sc);
        for (Index kz = 0; kz < kext.d; ++kz)
          for (Index ky = 0; ky < kext.h; ++ky)
            for (Index kx = 0; kx < kext.w; ++kx) {
              T sum = 0;
              for (Index qz = 0; qz < se.d; ++qz) {
                const Index z = qz * stride.d + kz - pad.d;
                if (z < 0 || z >= be.d) continue;
                for (Index qy = 0; qy < se.h; ++qy) {
                  const Index y = qy * stride.h + ky - pad.h;
                  if (y < 0 || y >= be.h) continue;
                  const T* srow = sp + (qz * se.h + qy) * se.w;
                  const T* brow = bp + (z * be.h + y) * be.w;
                  if (stride.w == 1) {
                    const Index xlo = std::max<Index>(0, pad.w - kx);
                    const Index xhi = std::min<Index>(se.w, be.w + pad.w - kx);
                    const T* bshift = brow + (kx - pad.w);
#pragma omp simd reduction(+ : sum)
                    for (Index qx = xlo; qx < xhi; ++qx) sum += srow[qx] * bshift[qx];
                  } else {
                    for (Index qx = 0; qx < se.w; ++qx) {
                      const Index x = qx * stride.w + kx - pad.w;
                      if (x < 0 || x >= be.w) continue;
                      sum += srow[qx] * brow[x];
                    }
                  }
                }
              }
              acc[static_cast<std::size_t>((kz * kext.h + ky) * kext.w + kx)] += static_cast<double>(sum);
            }
      }
      T* dst = gk.data() + (o * in_ch + i) * kvol;
      for (Index k = 0; k < kvol; ++k) dst[k] = static_cast<T>(acc[static_cast<std::size_t>(k)]);
    }
  }
}

template <typename T>
std::vector<T> channel_sums(const Tensor<T>& x) {
  const Index vol = x.spatial().volume();
  std::vector<T> out(static_cast<std::size_t>(x.channels()));
  for (Index c = 0; c < x.channels(); ++c) {
    double acc = 0;
    for (Index n = 0; n < x.batch(); ++n) {
      const T* p = x.plane(n, c);
      for (Index v = 0; v < vol; ++v) acc += p[v];
    }
    out[static_cast<std::size_t>(c)] = static_cast<T>(acc);
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> convolve(const Tensor<T>& input, const ConvWeights<T>& w) {
  const ConvDims d = conv_dims(input, w, false);
  Tensor<T> out(make_shape(d.batch, d.out_ch, d.out, d.rank - 2));
  if (d.stride == Extent3{1, 1, 1})
    conv_forward_unit(input, w, d, out);
  else
    conv_forward_strided(input, w, d, out);
  return out;
}

template <typename T>
ConvGrads<T> convolve_backward(const Tensor<T>& input, const ConvWeights<T>& w, const Tensor<T>& grad_output) {
  const ConvDims d = conv_dims(input, w, false);
  const Shape expected = make_shape(d.batch, d.out_ch, d.out, d.rank - 2);
  if (grad_output.shape() != expected)
    throw ContractViolation("gradient " + to_string(grad_output.shape()) + " does not match convolution output " +
                            to_string(expected));
  ConvGrads<T> g;
  g.input = Tensor<T>(input.shape());
  g.kernel = Tensor<T>(w.kernel.shape());
  const Index kvol = d.k.volume();
  if (d.stride == Extent3{1, 1, 1}) {
    conv_input_grad_unit(grad_output, w, d, g.input);
    kernel_grad_flat(input, grad_output, d, g.kernel);
  } else {
    // Input gradient scatters each output gradient back through the kernel.
    scatter_accumulate(grad_output, g.input, d.k, d.stride, d.pad, [&](Index in_c, Index out_c) {
      return w.kernel.data() + (out_c * d.in_ch + in_c) * kvol;
    });
    correlate_kernel_grad(input, grad_output, d.k, d.stride, d.pad, false, g.kernel);
  }
  g.bias = channel_sums(grad_output);
  return g;
}

template <typename T>
Tensor<T> transposed_convolve(const Tensor<T>& input, const ConvWeights<T>& w) {
  const ConvDims d = conv_dims(input, w, true);
  Tensor<T> out(make_shape(d.batch, d.out_ch, d.out, d.rank - 2));
  for (Index n = 0; n < d.batch; ++n)
    for (Index o = 0; o < d.out_ch; ++o) std::fill(out.plane(n, o), out.plane(n, o) + d.out.volume(), w.bias[o]);
  const Index kvol = d.k.volume();
  scatter_accumulate(input, out, d.k, d.stride, d.pad, [&](Index out_c, Index in_c) {
    return w.kernel.data() + (out_c * d.in_ch + in_c) * kvol;
  });
  return out;
}

template <typename T>
ConvGrads<T> transposed_convolve_backward(const Tensor<T>& input, const ConvWeights<T>& w,
                                          const Tensor<T>& grad_output) {
  const ConvDims d = conv_dims(input, w, true);
  const Shape expected = make_shape(d.batch, d.out_ch, d.out, d.rank - 2);
  if (grad_output.shape() != expected)
    throw ContractViolation("gradient " + to_string(grad_output.shape()) +
                            " does not match transposed convolution output " + to_string(expected));
  ConvGrads<T> g;
  g.input = Tensor<T>(input.shape());
  g.kernel = Tensor<T>(w.kernel.shape());
  const Index kvol = d.k.volume();
  const Extent3 ge = grad_output.spatial();
  // gx(i, q) = sum_o sum_k w(o, i, k) gy(o, q*s + k - pad)
#pragma omp parallel for collapse(2) schedule(static)
  for (Index n = 0; n < d.batch; ++n) {
    for (Index i = 0; i < d.in_ch; ++i) {
      T* gp = g.input.plane(n, i);
      for (Index qz = 0; qz < d.in.d; ++qz)
        for (Index qy = 0; qy < d.in.h; ++qy)
          for (Index qx = 0; qx < d.in.w; ++qx) {
            T acc = 0;
            for (Index o = 0; o < d.out_ch; ++o) {
              const T* yp = grad_output.plane(n, o);
              const T* wk = w.kernel.data() + (o * d.in_ch + i) * kvol;
              for (Index kz = 0; kz < d.k.d; ++kz) {
                const Index z = qz * d.stride.d + kz - d.pad.d;
                if (z < 0 || z >= ge.d) continue;
                for (Index ky = 0; ky < d.k.h; ++ky) {
                  const Index y = qy * d.stride.h + ky - d.pad.h;
                  if (y < 0 || y >= ge.h) continue;
                  for (Index kx = 0; kx < d.k.w; ++kx) {
                    const Index x = qx * d.stride.w + kx - d.pad.w;
                    if (x < 0 || x >= ge.w) continue;
                    acc += wk[(kz * d.k.h + ky) * d.k.w + kx] * yp[(z * ge.h + y) * ge.w + x];
                  }
                }
              }
            }
            gp[(qz * d.in.h + qy) * d.in.w + qx] = acc;
          }
    }
  }
  correlate_kernel_grad(grad_output, input, d.k, d.stride, d.pad, true, g.kernel);
  g.bias = channel_sums(grad_output);
  return g;
}

template <typename T>
PoolResult<T> max_pool(const Tensor<T>& input) {
  const Extent3 e = input.spatial();
  const bool volumetric = input.rank() == 5;
  if ((volumetric && e.d % 2) || e.h % 2 || e.w % 2)
    throw ContractViolation("max pooling needs even spatial extents, got " + to_string(input.shape()));
  const Index wd = volumetric ? 2 : 1;
  const Extent3 oe{e.d / wd, e.h / 2, e.w / 2};
  PoolResult<T> r;
  r.output = Tensor<T>(make_shape(input.batch(), input.channels(), oe, input.spatial_rank()));
  r.argmax.resize(static_cast<std::size_t>(r.output.size()));
  const Index planes = input.batch() * input.channels();
  const Index ivol = e.volume();
  const Index ovol = oe.volume();
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < planes; ++p) {
    const T* ip = input.data() + p * ivol;
    T* op = r.output.data() + p * ovol;
    Index* ap = r.argmax.data() + p * ovol;
    for (Index z = 0; z < oe.d; ++z)
      for (Index y = 0; y < oe.h; ++y)
        for (Index x = 0; x < oe.w; ++x) {
          Index best = -1;
          T best_v = -std::numeric_limits<T>::infinity();
          // Window visited in increasing linear index; strict > keeps the lowest on ties.
          for (Index dz = 0; dz < wd; ++dz)
            for (Index dy = 0; dy < 2; ++dy)
              for (Index dx = 0; dx < 2; ++dx) {
                const Index idx = ((z * wd + dz) * e.h + (y * 2 + dy)) * e.w + (x * 2 + dx);
                if (best < 0 || ip[idx] > best_v) {
                  best = idx;
                  best_v = ip[idx];
                }
              }
          const Index o = (z * oe.h + y) * oe.w + x;
          op[o] = best_v;
          ap[o] = p * ivol + best;
        }
  }
  return r;
}

template <typename T>
Tensor<T> max_pool_backward(const Shape& input_shape, const std::vector<Index>& argmax, const Tensor<T>& grad_output) {
  if (static_cast<Index>(argmax.size()) != grad_output.size())
    throw ContractViolation("argmax map length does not match gradient " + to_string(grad_output.shape()));
  Tensor<T> g(input_shape);
  // Windows are disjoint, so every input receives at most one contribution.
  for (Index o = 0; o < grad_output.size(); ++o) g[argmax[static_cast<std::size_t>(o)]] += grad_output[o];
  return g;
}

template <typename T>
BatchNormState<T> BatchNormState<T>::fresh(Index channels) {
  BatchNormState s;
  const auto c = static_cast<std::size_t>(channels);
  s.gamma.assign(c, T(1));
  s.beta.assign(c, T(0));
  s.running_mean.assign(c, T(0));
  s.running_var.assign(c, T(1));
  return s;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& state, BatchNormCache<T>* cache) {
  const Index C = input.channels();
  if (state.channels() != C || static_cast<Index>(state.beta.size()) != C ||
      static_cast<Index>(state.running_mean.size()) != C || static_cast<Index>(state.running_var.size()) != C)
    throw ContractViolation("batch norm state has " + std::to_string(state.channels()) + " channels, input " +
                            to_string(input.shape()));
  if (!(state.epsilon > 0)) throw ContractViolation("batch norm epsilon must be positive");
  const Index vol = input.spatial().volume();
  const Index N = input.batch();
  const double count = static_cast<double>(N * vol);
  std::vector<T> mean(static_cast<std::size_t>(C)), var(static_cast<std::size_t>(C)), inv(static_cast<std::size_t>(C));
  const bool train = state.mode == BatchNormMode::train;

#pragma omp parallel for schedule(static)
  for (Index c = 0; c < C; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    if (train) {
      double s = 0;
      for (Index n = 0; n < N; ++n) {
        const T* p = input.plane(n, c);
        for (Index v = 0; v < vol; ++v) s += p[v];
      }
      const double m = s / count;
      double q = 0;
      for (Index n = 0; n < N; ++n) {
        const T* p = input.plane(n, c);
        for (Index v = 0; v < vol; ++v) {
          const double dv = p[v] - m;
          q += dv * dv;
        }
      }
      mean[ci] = static_cast<T>(m);
      var[ci] = static_cast<T>(q / count);
    } else {
      mean[ci] = state.running_mean[ci];
      var[ci] = state.running_var[ci];
    }
    inv[ci] = T(1) / std::sqrt(var[ci] + state.epsilon);
  }

  Tensor<T> out(input.shape());
  Tensor<T> normalized;
  if (cache) normalized = Tensor<T>(input.shape());
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const T* p = input.plane(n, c);
      T* o = out.plane(n, c);
      T* h = cache ? normalized.plane(n, c) : nullptr;
      const T m = mean[ci], is = inv[ci], g = state.gamma[ci], b = state.beta[ci];
      for (Index v = 0; v < vol; ++v) {
        const T xhat = (p[v] - m) * is;
        if (h) h[v] = xhat;
        o[v] = g * xhat + b;
      }
    }

  if (train) {
    const T mom = state.momentum;
    for (Index c = 0; c < C; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      state.running_mean[ci] = mom * state.running_mean[ci] + (T(1) - mom) * mean[ci];
      state.running_var[ci] = mom * state.running_var[ci] + (T(1) - mom) * var[ci];
    }
  }
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->mean = std::move(mean);
    cache->variance = std::move(var);
    cache->inv_std = std::move(inv);
    cache->mode = state.mode;
  }
  return out;
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormState<T>& state, const BatchNormCache<T>& cache,
                                      const Tensor<T>& grad_output) {
  if (grad_output.shape() != cache.normalized.shape())
    throw ContractViolation("gradient " + to_string(grad_output.shape()) + " does not match batch norm cache " +
                            to_string(cache.normalized.shape()));
  const Index C = grad_output.channels();
  const Index N = grad_output.batch();
  const Index vol = grad_output.spatial().volume();
  const double count = static_cast<double>(N * vol);
  BatchNormGrads<T> g;
  g.input = Tensor<T>(grad_output.shape());
  g.gamma.resize(static_cast<std::size_t>(C));
  g.beta.resize(static_cast<std::size_t>(C));
#pragma omp parallel for schedule(static)
  for (Index c = 0; c < C; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    double db = 0, dg = 0;
    for (Index n = 0; n < N; ++n) {
      const T* gy = grad_output.plane(n, c);
      const T* xh = cache.normalized.plane(n, c);
      for (Index v = 0; v < vol; ++v) {
        db += gy[v];
        dg += static_cast<double>(gy[v]) * xh[v];
      }
    }
    g.beta[ci] = static_cast<T>(db);
    g.gamma[ci] = static_cast<T>(dg);
    const T scale = state.gamma[ci] * cache.inv_std[ci];
    const bool train = cache.mode == BatchNormMode::train;
    const T mean_db = static_cast<T>(db / count);
    const T mean_dg = static_cast<T>(dg / count);
    for (Index n = 0; n < N; ++n) {
      const T* gy = grad_output.plane(n, c);
      const T* xh = cache.normalized.plane(n, c);
      T* gx = g.input.plane(n, c);
      if (train) {
        for (Index v = 0; v < vol; ++v) gx[v] = scale * (gy[v] - mean_db - xh[v] * mean_dg);
      } else {
        for (Index v = 0; v < vol; ++v) gx[v] = scale * gy[v];
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const T* in = input.data();
  T* o = out.data();
  const Index n = input.size();
#pragma omp simd
  for (Index i = 0; i < n; ++i) o[i] = in[i] > T(0) ? in[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_output) {
  if (input.shape() != grad_output.shape())
    throw ContractViolation("relu gradient " + to_string(grad_output.shape()) + " does not match input " +
                            to_string(input.shape()));
  Tensor<T> out(input.shape());
  const T* in = input.data();
  const T* g = grad_output.data();
  T* o = out.data();
  const Index n = input.size();
#pragma omp simd
  for (Index i = 0; i < n; ++i) o[i] = in[i] > T(0) ? g[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> softmax_over_channels(const Tensor<T>& input) {
  const Index C = input.channels();
  if (C < 2) throw ContractViolation("softmax needs at least two channels, got " + to_string(input.shape()));
  const Index vol = input.spatial().volume();
  Tensor<T> out(input.shape());
  for (Index n = 0; n < input.batch(); ++n) {
    const T* ip = input.plane(n, 0);
    T* op = out.plane(n, 0);
    for (Index v = 0; v < vol; ++v) {
      T mx = ip[v];
      for (Index c = 1; c < C; ++c) mx = std::max(mx, ip[c * vol + v]);
      T sum = 0;
      for (Index c = 0; c < C; ++c) {
        const T e = std::exp(ip[c * vol + v] - mx);
        op[c * vol + v] = e;
        sum += e;
      }
      for (Index c = 0; c < C; ++c) op[c * vol + v] /= sum;
    }
  }
  return out;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_probs) {
  if (probs.shape() != grad_probs.shape())
    throw ContractViolation("softmax gradient " + to_string(grad_probs.shape()) + " does not match " +
                            to_string(probs.shape()));
  const Index C = probs.channels();
  const Index vol = probs.spatial().volume();
  Tensor<T> out(probs.shape());
  for (Index n = 0; n < probs.batch(); ++n) {
    const T* p = probs.plane(n, 0);
    const T* g = grad_probs.plane(n, 0);
    T* o = out.plane(n, 0);
    for (Index v = 0; v < vol; ++v) {
      T dot = 0;
      for (Index c = 0; c < C; ++c) dot += p[c * vol + v] * g[c * vol + v];
      for (Index c = 0; c < C; ++c) o[c * vol + v] = p[c * vol + v] * (g[c * vol + v] - dot);
    }
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.batch() != b.batch() || !(a.spatial() == b.spatial()))
    throw ContractViolation("cannot concatenate " + to_string(a.shape()) + " with " + to_string(b.shape()));
  Tensor<T> out(with_channels(a.shape(), a.channels() + b.channels()));
  const Index vol = a.spatial().volume();
  for (Index n = 0; n < a.batch(); ++n) {
    std::copy(a.plane(n, 0), a.plane(n, 0) + a.channels() * vol, out.plane(n, 0));
    std::copy(b.plane(n, 0), b.plane(n, 0) + b.channels() * vol, out.plane(n, a.channels()));
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, Index first_channels) {
  if (first_channels < 1 || first_channels >= x.channels())
    throw ContractViolation("cannot split " + to_string(x.shape()) + " after channel " +
                            std::to_string(first_channels));
  Tensor<T> a(with_channels(x.shape(), first_channels));
  Tensor<T> b(with_channels(x.shape(), x.channels() - first_channels));
  const Index vol = x.spatial().volume();
  for (Index n = 0; n < x.batch(); ++n) {
    std::copy(x.plane(n, 0), x.plane(n, first_channels), a.plane(n, 0));
    std::copy(x.plane(n, first_channels), x.plane(n, 0) + x.channels() * vol, b.plane(n, 0));
  }
  return {std::move(a), std::move(b)};
}

LinearAxisMap LinearAxisMap::identity(Index extent) {
  return sampling(extent, extent, 0.0, 1.0);
}

LinearAxisMap LinearAxisMap::sampling(Index source_extent, Index target_extent, double start, double step) {
  if (source_extent < 1 || target_extent < 1) throw ContractViolation("interpolation extents must be positive");
  LinearAxisMap m;
  m.source_extent = source_extent;
  m.lo.resize(static_cast<std::size_t>(target_extent));
  m.hi.resize(static_cast<std::size_t>(target_extent));
  m.frac.resize(static_cast<std::size_t>(target_extent));
  const double last = static_cast<double>(source_extent - 1);
  for (Index j = 0; j < target_extent; ++j) {
    const double pos = std::clamp(start + static_cast<double>(j) * step, 0.0, last);
    const auto lo = static_cast<Index>(std::floor(pos));
    const auto ju = static_cast<std::size_t>(j);
    m.lo[ju] = lo;
    m.hi[ju] = std::min<Index>(lo + 1, source_extent - 1);
    m.frac[ju] = pos - static_cast<double>(lo);
  }
  return m;
}

namespace {

// Applies `map` along spatial axis `axis` (0 = depth, 1 = height, 2 = width).
template <typename T>
Tensor<T> interpolate_axis(const Tensor<T>& x, const LinearAxisMap& map, int axis) {
  const Extent3 e = x.spatial();
  Extent3 oe = e;
  const Index src_ext = axis == 0 ? e.d : axis == 1 ? e.h : e.w;
  if (src_ext != map.source_extent)
    throw ContractViolation("interpolation table expects source extent " + std::to_string(map.source_extent) +
                            ", tensor " + to_string(x.shape()));
  (axis == 0 ? oe.d : axis == 1 ? oe.h : oe.w) = map.target_extent();
  Tensor<T> out(make_shape(x.batch(), x.channels(), oe, x.spatial_rank()));
  const Index planes = x.batch() * x.channels();
  const Index outer = axis == 0 ? 1 : axis == 1 ? e.d : e.d * e.h;
  const Index inner = axis == 0 ? e.h * e.w : axis == 1 ? e.w : 1;
  const Index tgt = map.target_extent();
  for (Index p = 0; p < planes; ++p) {
    const T* ip = x.data() + p * e.volume();
    T* op = out.data() + p * oe.volume();
    for (Index a = 0; a < outer; ++a)
      for (Index j = 0; j < tgt; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        const T f = static_cast<T>(map.frac[ju]);
        const T* lo = ip + (a * src_ext + map.lo[ju]) * inner;
        const T* hi = ip + (a * src_ext + map.hi[ju]) * inner;
        T* o = op + (a * tgt + j) * inner;
        for (Index b = 0; b < inner; ++b) o[b] = (T(1) - f) * lo[b] + f * hi[b];
      }
  }
  return out;
}

template <typename T>
Tensor<T> interpolate_axis_adjoint(const Tensor<T>& g, const LinearAxisMap& map, int axis) {
  const Extent3 e = g.spatial();
  Extent3 ie = e;
  const Index src_ext = map.source_extent;
  (axis == 0 ? ie.d : axis == 1 ? ie.h : ie.w) = src_ext;
  Tensor<T> out(make_shape(g.batch(), g.channels(), ie, g.spatial_rank()));
  const Index planes = g.batch() * g.channels();
  const Index outer = axis == 0 ? 1 : axis == 1 ? e.d : e.d * e.h;
  const Index inner = axis == 0 ? e.h * e.w : axis == 1 ? e.w : 1;
  const Index tgt = map.target_extent();
  for (Index p = 0; p < planes; ++p) {
    const T* gp = g.data() + p * e.volume();
    T* op = out.data() + p * ie.volume();
    for (Index a = 0; a < outer; ++a)
      for (Index j = 0; j < tgt; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        const T f = static_cast<T>(map.frac[ju]);
        T* lo = op + (a * src_ext + map.lo[ju]) * inner;
        T* hi = op + (a * src_ext + map.hi[ju]) * inner;
        const T* gi = gp + (a * tgt + j) * inner;
        for (Index b = 0; b < inner; ++b) {
          lo[b] += (T(1) - f) * gi[b];
          hi[b] += f * gi[b];
        }
      }
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> interpolate(const Tensor<T>& input, const LinearMap3& maps) {
  Tensor<T> x = input;
  if (input.rank() == 5) x = interpolate_axis(x, maps[0], 0);
  x = interpolate_axis(x, maps[1], 1);
  return interpolate_axis(x, maps[2], 2);
}

template <typename T>
Tensor<T> interpolate_backward(const Shape& input_shape, const LinearMap3& maps, const Tensor<T>& grad_output) {
  Tensor<T> g = interpolate_axis_adjoint(grad_output, maps[2], 2);
  g = interpolate_axis_adjoint(g, maps[1], 1);
  if (input_shape.size() == 5) g = interpolate_axis_adjoint(g, maps[0], 0);
  if (g.shape() != input_shape)
    throw ContractViolation("interpolation adjoint produced " + to_string(g.shape()) + ", expected " +
                            to_string(input_shape));
  return g;
}

#define ABUS_INSTANTIATE_OPS(T)                                                                              \
  template Tensor<T> convolve(const Tensor<T>&, const ConvWeights<T>&);                                      \
  template ConvGrads<T> convolve_backward(const Tensor<T>&, const ConvWeights<T>&, const Tensor<T>&);        \
  template Tensor<T> transposed_convolve(const Tensor<T>&, const ConvWeights<T>&);                           \
  template ConvGrads<T> transposed_convolve_backward(const Tensor<T>&, const ConvWeights<T>&,                \
                                                     const Tensor<T>&);                                      \
  template PoolResult<T> max_pool(const Tensor<T>&);                                                         \
  template Tensor<T> max_pool_backward(const Shape&, const std::vector<Index>&, const Tensor<T>&);          \
  template struct BatchNormState<T>;                                                                         \
  template Tensor<T> batch_norm(const Tensor<T>&, BatchNormState<T>&, BatchNormCache<T>*);                   \
  template BatchNormGrads<T> batch_norm_backward(const BatchNormState<T>&, const BatchNormCache<T>&,         \
                                                 const Tensor<T>&);                                          \
  template Tensor<T> relu(const Tensor<T>&);                                                                 \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> softmax_over_channels(const Tensor<T>&);                                                \
  template Tensor<T> softmax_backward(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                    \
  template std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>&, Index);                          \
  template Tensor<T> interpolate(const Tensor<T>&, const LinearMap3&);                                       \
  template Tensor<T> interpolate_backward(const Shape&, const LinearMap3&, const Tensor<T>&);

ABUS_INSTANTIATE_OPS(float)
ABUS_INSTANTIATE_OPS(double)

}  // namespace abus
