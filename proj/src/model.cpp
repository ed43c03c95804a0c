#include "abus/model.hpp"

#include <cmath>
#include <random>

#include "abus/errors.hpp"
#include "abus/ops.hpp"

namespace abus {

void ModelConfig::validate() const {
  if (dimensionality != 2 && dimensionality != 3)
    throw ConfigError("dimensionality must be 2 or 3, got " + std::to_string(dimensionality));
  if (depth < 1 || depth > 8) throw ConfigError("depth must be in [1, 8], got " + std::to_string(depth));
  if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (num_labels < 2) throw ConfigError("num_labels must be >= 2, got " + std::to_string(num_labels));
  if (dual_path && !(second_path_scale > 0.0 && second_path_scale < 1.0))
    throw ConfigError("second_path_scale must lie in (0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"dimensionality", c.dimensionality}, {"depth", c.depth},
                     {"base_channels", c.base_channels},   {"in_channels", c.in_channels},
                     {"num_labels", c.num_labels},         {"dual_path", c.dual_path},
                     {"second_path_scale", c.second_path_scale}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.dimensionality = j.value("dimensionality", d.dimensionality);
  c.depth = j.value("depth", d.depth);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.in_channels = j.value("in_channels", d.in_channels);
  c.num_labels = j.value("num_labels", d.num_labels);
  c.dual_path = j.value("dual_path", d.dual_path);
  c.second_path_scale = j.value("second_path_scale", d.second_path_scale);
}

std::array<double, 2> fusion_axis_transform(Index extent, double scale) {
  // Path-1 voxel j sits at (j - c) * scale + c in path-2 voxels, c = (extent - 1) / 2.
  const double c = static_cast<double>(extent - 1) / 2.0;
  return {c - c * scale, scale};
}

namespace {

template <typename T>
struct Conv {
  std::string name;
  ConvWeights<T> w;
  bool transposed = false;
  Tensor<T> gkernel;
  std::vector<T> gbias;
  Tensor<T> input;

  Tensor<T> forward(const Tensor<T>& x, bool keep) {
    if (keep) input = x;
    return transposed ? transposed_convolve(x, w) : convolve(x, w);
  }

  Tensor<T> backward(const Tensor<T>& g) {
    ConvGrads<T> r = transposed ? transposed_convolve_backward(input, w, g) : convolve_backward(input, w, g);
    gkernel = std::move(r.kernel);
    gbias = std::move(r.bias);
    return std::move(r.input);
  }
};

template <typename T>
struct Norm {
  std::string name;
  BatchNormState<T> state;
  BatchNormCache<T> cache;
  std::vector<T> ggamma;
  std::vector<T> gbeta;

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    state.mode = mode == Mode::train ? BatchNormMode::train : BatchNormMode::infer;
    return batch_norm(x, state, mode == Mode::train ? &cache : nullptr);
  }

  Tensor<T> backward(const Tensor<T>& g) {
    BatchNormGrads<T> r = batch_norm_backward(state, cache, g);
    ggamma = std::move(r.gamma);
    gbeta = std::move(r.beta);
    return std::move(r.input);
  }
};

template <typename T>
struct EncoderBlock {
  Conv<T> conv1, conv2;
  Norm<T> bn1, bn2;
  Tensor<T> pre1, pre2;  // ReLU inputs
};

template <typename T>
struct DecoderBlock {
  Conv<T> up, conv1, conv2;
  Tensor<T> pre1, pre2;
  Index skip_channels = 0;
};

template <typename T>
struct Path {
  std::vector<EncoderBlock<T>> enc;  // depth + 1 blocks, the last one is the bottleneck
  std::vector<DecoderBlock<T>> dec;  // indexed by level
  std::vector<std::vector<Index>> pool_argmax;
  std::vector<Shape> pool_input_shape;
  std::vector<Tensor<T>> skip_grads;
};

template <typename T>
void init_conv(Conv<T>& c, const std::string& name, Index out, Index in, Index k, int dims, bool transposed,
               std::mt19937_64& rng) {
  c.name = name;
  c.transposed = transposed;
  Shape shape{out, in};
  for (int i = 0; i < dims; ++i) shape.push_back(k);
  c.w.kernel = Tensor<T>(shape);
  c.w.bias.assign(static_cast<std::size_t>(out), T(0));
  const Index kvol = shape_volume(shape) / (out * in);
  const double limit = std::sqrt(6.0 / static_cast<double>((in + out) * kvol));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (T& v : c.w.kernel.values()) v = static_cast<T>(dist(rng));
  if (transposed) {
    c.w.stride = dims == 3 ? Extent3{2, 2, 2} : Extent3{1, 2, 2};
    c.w.padding = Padding::valid;
  } else {
    c.w.stride = {1, 1, 1};
    c.w.padding = Padding::same;
  }
}

template <typename T>
void init_norm(Norm<T>& n, const std::string& name, Index channels) {
  n.name = name;
  n.state = BatchNormState<T>::fresh(channels);
}

template <typename T>
Path<T> build_path(const ModelConfig& cfg, int p, std::mt19937_64& rng) {
  Path<T> path;
  const std::string prefix = "path" + std::to_string(p) + ".";
  const int dims = cfg.dimensionality;
  Index in = cfg.in_channels;
  for (int l = 0; l <= cfg.depth; ++l) {
    EncoderBlock<T> b;
    const Index c = cfg.channels_at(l);
    const std::string n = prefix + "enc" + std::to_string(l) + ".";
    init_conv(b.conv1, n + "conv1", c, in, 3, dims, false, rng);
    init_norm(b.bn1, n + "bn1", c);
    init_conv(b.conv2, n + "conv2", c, c, 3, dims, false, rng);
    init_norm(b.bn2, n + "bn2", c);
    path.enc.push_back(std::move(b));
    in = c;
  }
  path.dec.resize(static_cast<std::size_t>(cfg.depth));
  for (int l = cfg.depth - 1; l >= 0; --l) {
    DecoderBlock<T>& b = path.dec[static_cast<std::size_t>(l)];
    const Index c = cfg.channels_at(l);
    const std::string n = prefix + "dec" + std::to_string(l) + ".";
    init_conv(b.up, n + "up", c, cfg.channels_at(l + 1), 2, dims, true, rng);
    init_conv(b.conv1, n + "conv1", c, 2 * c, 3, dims, false, rng);
    init_conv(b.conv2, n + "conv2", c, c, 3, dims, false, rng);
    b.skip_channels = c;
  }
  path.pool_argmax.resize(static_cast<std::size_t>(cfg.depth));
  path.pool_input_shape.resize(static_cast<std::size_t>(cfg.depth));
  path.skip_grads.resize(static_cast<std::size_t>(cfg.depth));
  return path;
}

template <typename T>
Tensor<T> path_forward(Path<T>& path, const Tensor<T>& x, Mode mode) {
  const bool keep = mode == Mode::train;
  const auto depth = path.dec.size();
  std::vector<Tensor<T>> skips(depth);
  Tensor<T> h = x;
  for (std::size_t l = 0; l < path.enc.size(); ++l) {
    EncoderBlock<T>& b = path.enc[l];
    Tensor<T> a = b.bn1.forward(b.conv1.forward(h, keep), mode);
    h = relu(a);
    if (keep) b.pre1 = std::move(a);
    a = b.bn2.forward(b.conv2.forward(h, keep), mode);
    h = relu(a);
    if (keep) b.pre2 = std::move(a);
    if (l < depth) {
      PoolResult<T> pooled = max_pool(h);
      if (keep) {
        path.pool_argmax[l] = std::move(pooled.argmax);
        path.pool_input_shape[l] = h.shape();
      }
      skips[l] = std::move(h);
      h = std::move(pooled.output);
    }
  }
  for (std::size_t i = depth; i-- > 0;) {
    DecoderBlock<T>& b = path.dec[i];
    Tensor<T> u = b.up.forward(h, keep);
    Tensor<T> a = b.conv1.forward(concat_channels(skips[i], u), keep);
    h = relu(a);
    if (keep) b.pre1 = std::move(a);
    a = b.conv2.forward(h, keep);
    h = relu(a);
    if (keep) b.pre2 = std::move(a);
  }
  return h;
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.shape() != src.shape())
    throw ContractViolation("cannot add " + to_string(src.shape()) + " into " + to_string(dst.shape()));
  T* d = dst.data();
  const T* s = src.data();
  for (Index i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename T>
Tensor<T> path_backward(Path<T>& path, Tensor<T> g) {
  const auto depth = path.dec.size();
  for (std::size_t i = 0; i < depth; ++i) {
    DecoderBlock<T>& b = path.dec[i];
    g = b.conv2.backward(relu_backward(b.pre2, g));
    g = b.conv1.backward(relu_backward(b.pre1, g));
    auto [gskip, gup] = split_channels(g, b.skip_channels);
    path.skip_grads[i] = std::move(gskip);
    g = b.up.backward(gup);
  }
  for (std::size_t l = path.enc.size(); l-- > 0;) {
    EncoderBlock<T>& b = path.enc[l];
    if (l < depth) {
      g = max_pool_backward(path.pool_input_shape[l], path.pool_argmax[l], g);
      add_into(g, path.skip_grads[l]);
    }
    g = b.conv2.backward(b.bn2.backward(relu_backward(b.pre2, g)));
    g = b.conv1.backward(b.bn1.backward(relu_backward(b.pre1, g)));
  }
  return g;
}

}  // namespace

template <typename T>
struct BasicModel<T>::Impl {
  ModelConfig config;
  std::vector<Path<T>> paths;
  Conv<T> head;
  LinearMap3 fusion;
  Shape path2_shape;
  bool cached = false;
  std::vector<Tensor<T>> input_grads;

  // Visits every conv and batch-norm layer in a fixed order.
  template <typename ConvFn, typename NormFn>
  void visit(ConvFn&& on_conv, NormFn&& on_norm) {
    for (auto& p : paths) {
      for (auto& b : p.enc) {
        on_conv(b.conv1);
        on_norm(b.bn1);
        on_conv(b.conv2);
        on_norm(b.bn2);
      }
      for (std::size_t i = p.dec.size(); i-- > 0;) {
        on_conv(p.dec[i].up);
        on_conv(p.dec[i].conv1);
        on_conv(p.dec[i].conv2);
      }
    }
    on_conv(head);
  }
};

template <typename T>
BasicModel<T>::BasicModel(const ModelConfig& config, std::uint64_t seed) : impl_(std::make_unique<Impl>()) {
  config.validate();
  impl_->config = config;
  std::mt19937_64 rng(seed);
  const int npaths = config.dual_path ? 2 : 1;
  for (int p = 0; p < npaths; ++p) impl_->paths.push_back(build_path<T>(config, p, rng));
  init_conv(impl_->head, "head", config.num_labels, config.base_channels * npaths, 1, config.dimensionality, false,
            rng);
}

template <typename T>
BasicModel<T>::BasicModel(const BasicModel& other) : impl_(std::make_unique<Impl>(*other.impl_)) {}

template <typename T>
BasicModel<T>& BasicModel<T>::operator=(const BasicModel& other) {
  if (this != &other) impl_ = std::make_unique<Impl>(*other.impl_);
  return *this;
}

template <typename T>
BasicModel<T>::BasicModel(BasicModel&&) noexcept = default;
template <typename T>
BasicModel<T>& BasicModel<T>::operator=(BasicModel&&) noexcept = default;
template <typename T>
BasicModel<T>::~BasicModel() = default;

template <typename T>
const ModelConfig& BasicModel<T>::config() const noexcept {
  return impl_->config;
}

template <typename T>
Index BasicModel<T>::path_count() const noexcept {
  return static_cast<Index>(impl_->paths.size());
}

template <typename T>
Tensor<T> BasicModel<T>::forward(const Tensor<T>& input, Mode mode) {
  return forward(std::span<const Tensor<T>>(&input, 1), mode);
}

template <typename T>
Tensor<T> BasicModel<T>::forward(std::span<const Tensor<T>> inputs, Mode mode) {
  const ModelConfig& cfg = impl_->config;
  if (static_cast<Index>(inputs.size()) != path_count())
    throw ContractViolation("model has " + std::to_string(path_count()) + " paths but received " +
                            std::to_string(inputs.size()) + " inputs");
  for (const Tensor<T>& x : inputs) {
    if (x.spatial_rank() != cfg.dimensionality || x.channels() != cfg.in_channels)
      throw ContractViolation("input " + to_string(x.shape()) + " does not match a " +
                              std::to_string(cfg.dimensionality) + "-D model with " +
                              std::to_string(cfg.in_channels) + " input channels");
    const Extent3 e = x.spatial();
    const Index div = cfg.divisor();
    if ((cfg.dimensionality == 3 && e.d % div) || e.h % div || e.w % div)
      throw ContractViolation("input spatial extents " + to_string(x.shape()) + " must be divisible by " +
                              std::to_string(div));
    if (x.shape() != inputs[0].shape())
      throw ContractViolation("path inputs must share a shape, got " + to_string(inputs[0].shape()) + " and " +
                              to_string(x.shape()));
  }
  const bool keep = mode == Mode::train;
  Tensor<T> features = path_forward(impl_->paths[0], inputs[0], mode);
  if (path_count() == 2) {
    Tensor<T> second = path_forward(impl_->paths[1], inputs[1], mode);
    const Extent3 e = second.spatial();
    const double s = cfg.second_path_scale;
    auto axis_map = [s](Index n) {
      const auto tr = fusion_axis_transform(n, s);
      return LinearAxisMap::sampling(n, n, tr[0], tr[1]);
    };
    LinearMap3 maps{cfg.dimensionality == 3 ? axis_map(e.d) : LinearAxisMap::identity(1), axis_map(e.h),
                    axis_map(e.w)};
    Tensor<T> aligned = interpolate(second, maps);
    if (keep) {
      impl_->fusion = std::move(maps);
      impl_->path2_shape = second.shape();
    }
    features = concat_channels(features, aligned);
  }
  Tensor<T> logits = impl_->head.forward(features, keep);
  if (keep) impl_->cached = true;
  return logits;
}

template <typename T>
void BasicModel<T>::backward(const Tensor<T>& grad_logits) {
  if (!impl_->cached) throw StateError("backward called without a cached train-mode forward");
  Tensor<T> g = impl_->head.backward(grad_logits);
  impl_->input_grads.clear();
  if (path_count() == 1) {
    impl_->input_grads.push_back(path_backward(impl_->paths[0], std::move(g)));
    return;
  }
  auto [g1, g2] = split_channels(g, Index{impl_->config.base_channels});
  Tensor<T> g2_path = interpolate_backward(impl_->path2_shape, impl_->fusion, g2);
  Tensor<T> in1 = path_backward(impl_->paths[0], std::move(g1));
  Tensor<T> in2 = path_backward(impl_->paths[1], std::move(g2_path));
  impl_->input_grads.push_back(std::move(in1));
  impl_->input_grads.push_back(std::move(in2));
}

template <typename T>
const std::vector<Tensor<T>>& BasicModel<T>::input_gradients() const {
  return impl_->input_grads;
}

template <typename T>
std::vector<ParamView<T>> BasicModel<T>::parameters() {
  std::vector<ParamView<T>> out;
  auto on_conv = [&](Conv<T>& c) {
    if (c.gkernel.shape() != c.w.kernel.shape()) {
      c.gkernel = Tensor<T>(c.w.kernel.shape());
      c.gbias.assign(c.w.bias.size(), T(0));
    }
    out.push_back({c.name + ".kernel", c.w.kernel.shape(), c.w.kernel.values(), c.gkernel.values()});
    out.push_back({c.name + ".bias", Shape{static_cast<Index>(c.w.bias.size())}, std::span<T>(c.w.bias),
                   std::span<T>(c.gbias)});
  };
  auto on_norm = [&](Norm<T>& n) {
    if (n.ggamma.size() != n.state.gamma.size()) {
      n.ggamma.assign(n.state.gamma.size(), T(0));
      n.gbeta.assign(n.state.beta.size(), T(0));
    }
    const Shape s{n.state.channels()};
    out.push_back({n.name + ".gamma", s, std::span<T>(n.state.gamma), std::span<T>(n.ggamma)});
    out.push_back({n.name + ".beta", s, std::span<T>(n.state.beta), std::span<T>(n.gbeta)});
  };
  impl_->visit(on_conv, on_norm);
  return out;
}

template <typename T>
Index BasicModel<T>::parameter_count() const {
  Index total = 0;
  for (const auto& p : const_cast<BasicModel*>(this)->parameters()) total += static_cast<Index>(p.value.size());
  return total;
}

template <typename T>
std::vector<NamedArray<T>> BasicModel<T>::state() const {
  std::vector<NamedArray<T>> out;
  auto on_conv = [&](Conv<T>& c) {
    out.push_back({c.name + ".kernel", c.w.kernel.shape(), {c.w.kernel.values().begin(), c.w.kernel.values().end()}});
    out.push_back({c.name + ".bias", Shape{static_cast<Index>(c.w.bias.size())}, c.w.bias});
  };
  auto on_norm = [&](Norm<T>& n) {
    const Shape s{n.state.channels()};
    out.push_back({n.name + ".gamma", s, n.state.gamma});
    out.push_back({n.name + ".beta", s, n.state.beta});
    out.push_back({n.name + ".running_mean", s, n.state.running_mean});
    out.push_back({n.name + ".running_var", s, n.state.running_var});
  };
  impl_->visit(on_conv, on_norm);
  return out;
}

template <typename T>
void BasicModel<T>::load_state(const std::vector<NamedArray<T>>& state) {
  std::size_t next = 0;
  auto take = [&](const std::string& name, const Shape& shape, std::span<T> dst) {
    if (next >= state.size()) throw ContractViolation("model state is missing entry '" + name + "'");
    const NamedArray<T>& a = state[next++];
    if (a.name != name || a.shape != shape || a.values.size() != dst.size())
      throw ContractViolation("model state entry '" + a.name + "' " + to_string(a.shape) + " does not match '" + name +
                              "' " + to_string(shape));
    std::copy(a.values.begin(), a.values.end(), dst.begin());
  };
  auto on_conv = [&](Conv<T>& c) {
    take(c.name + ".kernel", c.w.kernel.shape(), c.w.kernel.values());
    take(c.name + ".bias", Shape{static_cast<Index>(c.w.bias.size())}, c.w.bias);
  };
  auto on_norm = [&](Norm<T>& n) {
    const Shape s{n.state.channels()};
    take(n.name + ".gamma", s, n.state.gamma);
    take(n.name + ".beta", s, n.state.beta);
    take(n.name + ".running_mean", s, n.state.running_mean);
    take(n.name + ".running_var", s, n.state.running_var);
  };
  impl_->visit(on_conv, on_norm);
  if (next != state.size())
    throw ContractViolation("model state has " + std::to_string(state.size() - next) + " unexpected entries");
}

template <typename T>
void BasicModel<T>::commit_batch_statistics() {
  bool missing = false;
  impl_->visit([](Conv<T>&) {},
               [&](Norm<T>& n) {
                 if (n.cache.mean.size() != n.state.running_mean.size()) {
                   missing = true;
                   return;
                 }
                 n.state.running_mean = n.cache.mean;
                 n.state.running_var = n.cache.variance;
               });
  if (missing) throw StateError("no train-mode forward to take batch statistics from");
}

template class BasicModel<float>;
template class BasicModel<double>;

Model build_unet(const ModelConfig& config, std::uint64_t seed) {
  if (config.dual_path) throw ConfigError("build_unet needs a single-path configuration");
  return Model(config, seed);
}

Model build_dual_path_unet(const ModelConfig& config, std::uint64_t seed) {
  if (!config.dual_path) throw ConfigError("build_dual_path_unet needs dual_path = true");
  return Model(config, seed);
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
  return Model(config, seed);
}

}  // namespace abus
