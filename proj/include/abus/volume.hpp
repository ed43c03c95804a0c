#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "abus/tensor.hpp"

namespace abus {

// Voxel coordinate (z, y, x).
struct Index3 {
  Index z = 0;
  Index y = 0;
  Index x = 0;

  bool operator==(const Index3&) const = default;
};

using Vec3 = std::array<double, 3>;  // (z, y, x), millimetres unless noted

enum class VoxelType { r32, u8 };

// Scalar volume on a regular grid. Voxel (z, y, x) has its centre at
// origin + (z, y, x) * spacing. Masks (u8) hold only 0 and 1.
struct Volume {
  Extent3 extents;
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  VoxelType dtype = VoxelType::r32;
  std::vector<float> data;

  Volume() = default;
  Volume(Extent3 extents, Vec3 spacing, VoxelType dtype = VoxelType::r32, float fill = 0.0f);

  bool is_mask() const noexcept { return dtype == VoxelType::u8; }
  Index index(Index z, Index y, Index x) const noexcept { return (z * extents.h + y) * extents.w + x; }
  float& at(Index z, Index y, Index x) { return data[static_cast<std::size_t>(index(z, y, x))]; }
  float at(Index z, Index y, Index x) const { return data[static_cast<std::size_t>(index(z, y, x))]; }
  bool contains(Index z, Index y, Index x) const noexcept {
    return z >= 0 && y >= 0 && x >= 0 && z < extents.d && y < extents.h && x < extents.w;
  }
  Vec3 physical(const Index3& v) const;
  // Voxel nearest to a physical point (may lie outside the grid).
  Index3 nearest_voxel(const Vec3& p) const;

  // Throws ContractViolation when extents, spacing or mask values are invalid.
  void validate() const;

  bool operator==(const Volume&) const = default;
};

bool same_grid(const Volume& a, const Volume& b);

enum class Interp { trilinear, nearest };

// Resamples by per-axis factor: n' = round(n * s), spacing' = spacing / s,
// with the grid corners kept in place. Masks require nearest.
Volume resample(const Volume& v, const Vec3& scale, Interp interp);
Volume resample(const Volume& v, double scale, Interp interp);
Volume resample_to_spacing(const Volume& v, double spacing_mm, Interp interp);

// Patch of `extents` whose voxel (E/2) lands on `center`; voxels outside the
// volume take `pad_value` (default: the minimum for images, 0 for masks).
Volume crop_patch(const Volume& v, const Index3& center, const Extent3& extents,
                  std::optional<float> pad_value = std::nullopt);

struct BalanceCounts {
  std::int64_t lesion = 0;
  std::int64_t background = 0;
  double ratio = 0.0;
};

// Lesion and non-lesion voxel counts over the union of patches cropped at
// every centre; padding outside the volume counts as non-lesion. The ratio is
// +inf when every covered voxel is lesion.
BalanceCounts balance_ratio(const Volume& mask, const std::vector<Index3>& centers, const Extent3& extents);

// Depth indices holding at least one lesion voxel, ascending.
std::vector<Index> lesion_slice_indices(const Volume& mask);

// Rounded centroid of the positive voxels; nullopt for an empty mask.
std::optional<Index3> mask_centroid(const Volume& mask);

std::int64_t count_positive(const Volume& mask);

// (1, 1, d, h, w) view of a volume, or (1, 1, h, w) of one slice.
TensorF to_tensor(const Volume& v);
TensorF slice_tensor(const Volume& v, Index z);
// Zero mean, unit variance (left centred when flat). With `inside`, the
// statistics come only from voxels flagged nonzero, so crop padding does not
// shift the intensity scale; every voxel is still transformed.
void standardize(TensorF& t, const std::vector<std::uint8_t>& inside = {});

// 1 where crop_patch(v, center, e) copies a voxel of `v`, 0 where it pads.
std::vector<std::uint8_t> crop_coverage(const Volume& v, const Index3& center, const Extent3& e);

// Ground-truth description of one lesion.
struct LesionAnnotation {
  std::string case_id;
  Index3 center;              // voxel coordinates in the case's image grid
  double diameter_mm = 0.0;   // equivalent-sphere diameter
  std::string label = "benign";

  bool operator==(const LesionAnnotation&) const = default;
};

void to_json(nlohmann::json& j, const Index3& v);
void from_json(const nlohmann::json& j, Index3& v);
void to_json(nlohmann::json& j, const LesionAnnotation& a);
void from_json(const nlohmann::json& j, LesionAnnotation& a);

}  // namespace abus
