#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "abus/tensor.hpp"

namespace abus {

// Architecture of a single- or dual-path U-net.
struct ModelConfig {
  int dimensionality = 3;  // 2 or 3
  int depth = 3;           // pooling levels
  int base_channels = 16;  // channels at level 0, doubled per level
  int in_channels = 1;
  int num_labels = 2;
  bool dual_path = false;
  double second_path_scale = 0.5;  // field-of-view shrink of path 2, dual-path only

  // Throws ConfigError on an invalid combination.
  void validate() const;
  Index divisor() const { return Index{1} << depth; }
  Index channels_at(int level) const { return Index{base_channels} << level; }

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class Mode { train, infer };

// Mutable view of one trainable tensor and its gradient.
template <typename T>
struct ParamView {
  std::string name;
  Shape shape;
  std::span<T> value;
  std::span<T> grad;
};

// Owned copy of a named parameter or buffer, used for checkpoints and snapshots.
template <typename T>
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<T> values;

  bool operator==(const NamedArray&) const = default;
};

// U-net with cached activations for one forward/backward pair.
//
// Compression levels run [conv3 -> BN -> ReLU] x2 followed by 2x max pooling;
// decompression levels run a 2x up-convolution, concatenate the skip from the
// matching compression level and apply [conv3 -> ReLU] x2. A 1x1 head maps
// the level-0 features to logits. The dual-path variant runs two independent
// paths, resamples the centre of path 2's features onto path 1's grid and
// fuses both with a 1x1 head.
template <typename T>
class BasicModel {
 public:
  BasicModel(const ModelConfig& config, std::uint64_t seed);
  BasicModel(const BasicModel& other);
  BasicModel& operator=(const BasicModel& other);
  BasicModel(BasicModel&&) noexcept;
  BasicModel& operator=(BasicModel&&) noexcept;
  ~BasicModel();

  const ModelConfig& config() const noexcept;
  Index path_count() const noexcept;

  // One input per path. Train mode uses batch statistics and caches
  // activations for backward; infer mode leaves any existing cache intact.
  Tensor<T> forward(std::span<const Tensor<T>> inputs, Mode mode);
  Tensor<T> forward(const Tensor<T>& input, Mode mode);

  // Overwrites every parameter gradient. Throws StateError without a cached
  // train-mode forward.
  void backward(const Tensor<T>& grad_logits);
  // Input gradients of the last backward, one per path.
  const std::vector<Tensor<T>>& input_gradients() const;

  std::vector<ParamView<T>> parameters();
  Index parameter_count() const;

  // Parameters followed by batch-norm running statistics.
  std::vector<NamedArray<T>> state() const;
  void load_state(const std::vector<NamedArray<T>>& state);

  // Copies the batch statistics of the last train-mode forward into the
  // running statistics.
  void commit_batch_statistics();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

extern template class BasicModel<float>;
extern template class BasicModel<double>;

using Model = BasicModel<float>;

// Builders enforce the path-count half of the contract.
Model build_unet(const ModelConfig& config, std::uint64_t seed);
Model build_dual_path_unet(const ModelConfig& config, std::uint64_t seed);
Model build_model(const ModelConfig& config, std::uint64_t seed);

// Sampling table that places the central `scale` fraction of path 2's grid
// onto path 1's grid (identity along depth for 2-D models).
std::array<double, 2> fusion_axis_transform(Index extent, double scale);

}  // namespace abus
