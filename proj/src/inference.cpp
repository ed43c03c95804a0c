#include "abus/inference.hpp"

#include <cmath>
#include <sstream>

#include "abus/errors.hpp"

namespace abus {

Segmenter model_segmenter(Model& model) {
  Segmenter s;
  const ModelConfig& c = model.config();
  s.paths = c.dual_path ? 2 : 1;
  s.second_path_scale = c.second_path_scale;
  s.divisor = c.divisor();
  s.dimensionality = c.dimensionality;
  s.predict = [&model](std::span<const TensorF> in) { return model.forward(in, Mode::infer); };
  return s;
}

void validate_schedule(const ScaleSchedule& s) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!(s[i] > 0.0 && s[i] < 1.0)) throw ConfigError("schedule factors must lie in (0, 1), got " + std::to_string(s[i]));
    if (i > 0 && !(s[i] < s[i - 1])) throw ConfigError("schedule factors must be strictly decreasing");
  }
}

ScaleSchedule parse_schedule(const std::string& text) {
  ScaleSchedule s;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    try {
      std::size_t used = 0;
      s.push_back(std::stod(item.substr(first), &used));
      if (item.find_first_not_of(" \t", first + used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("cannot parse schedule factor '" + item + "'");
    }
  }
  validate_schedule(s);
  return s;
}

std::int64_t boundary_positive_count(const Volume& labels) {
  const Extent3 e = labels.extents;
  std::int64_t n = 0;
  for (Index z = 0; z < e.d; ++z)
    for (Index y = 0; y < e.h; ++y)
      for (Index x = 0; x < e.w; ++x) {
        const bool shell = z == 0 || y == 0 || x == 0 || z == e.d - 1 || y == e.h - 1 || x == e.w - 1;
        if (shell && labels.at(z, y, x) > 0.5f) ++n;
      }
  return n;
}

Volume labels_from_logits(const TensorF& logits, const Volume& like) {
  const Index plane = like.extents.volume();
  if (logits.batch() != 1 || logits.spatial().volume() != plane)
    throw ContractViolation("logits " + to_string(logits.shape()) + " do not cover a " + to_string(like.extents) +
                            " patch");
  Volume out(like.extents, like.spacing, VoxelType::u8, 0.0f);
  out.origin = like.origin;
  const Index labels = logits.channels();
  for (Index i = 0; i < plane; ++i) {
    Index best = 0;
    float best_v = logits[i];
    for (Index c = 1; c < labels; ++c)
      if (logits[c * plane + i] > best_v) {
        best_v = logits[c * plane + i];
        best = c;
      }
    out.data[static_cast<std::size_t>(i)] = best > 0 ? 1.0f : 0.0f;
  }
  return out;
}

PatchInputs make_patch_inputs(const Volume& image, const Index3& center, const Extent3& extents, int paths,
                              double second_path_scale, int dimensionality) {
  PatchInputs r;
  r.patch = crop_patch(image, center, extents);
  auto tensor = [dimensionality, &extents](const Volume& source, const Volume& patch, const Index3& at) {
    TensorF t = dimensionality == 2 ? slice_tensor(patch, 0) : to_tensor(patch);
    std::vector<std::uint8_t> inside = crop_coverage(source, at, extents);
    if (dimensionality == 2) inside.resize(static_cast<std::size_t>(extents.h * extents.w));
    standardize(t, inside);
    return t;
  };
  r.tensors.push_back(tensor(image, r.patch, center));
  if (paths == 2) {
    const Vec3 p = image.physical(center);
    const Vec3 scale = dimensionality == 2 ? Vec3{1.0, second_path_scale, second_path_scale}
                                           : Vec3{second_path_scale, second_path_scale, second_path_scale};
    const Volume coarse = resample(image, scale, Interp::trilinear);
    const Index3 at = coarse.nearest_voxel(p);
    r.tensors.push_back(tensor(coarse, crop_patch(coarse, at, extents), at));
  }
  return r;
}

namespace {

void check_patch(const Segmenter& s, const Extent3& patch) {
  if (!s.predict) throw ConfigError("segmenter has no predictor");
  if ((s.dimensionality == 3 && patch.d % s.divisor) || patch.h % s.divisor || patch.w % s.divisor)
    throw ContractViolation("patch extents " + to_string(patch) + " must be divisible by " + std::to_string(s.divisor));
}

// Writes `labels` (a patch with its own spacing and origin) into `mask` by
// nearest neighbour over the patch's physical box.
void place(Volume& mask, const Volume& labels) {
  Index lo[3], hi[3];
  const Index n[3] = {mask.extents.d, mask.extents.h, mask.extents.w};
  const Index e[3] = {labels.extents.d, labels.extents.h, labels.extents.w};
  for (std::size_t a = 0; a < 3; ++a) {
    const double first = labels.origin[a] - labels.spacing[a] / 2.0;
    const double last = labels.origin[a] + (static_cast<double>(e[a]) - 0.5) * labels.spacing[a];
    lo[a] = std::max<Index>(0, static_cast<Index>(std::floor((first - mask.origin[a]) / mask.spacing[a])) - 1);
    hi[a] = std::min<Index>(n[a] - 1, static_cast<Index>(std::ceil((last - mask.origin[a]) / mask.spacing[a])) + 1);
  }
  for (Index z = lo[0]; z <= hi[0]; ++z)
    for (Index y = lo[1]; y <= hi[1]; ++y)
      for (Index x = lo[2]; x <= hi[2]; ++x) {
        const Index3 j = labels.nearest_voxel(mask.physical({z, y, x}));
        if (labels.contains(j.z, j.y, j.x)) mask.at(z, y, x) = labels.at(j.z, j.y, j.x);
      }
}

}  // namespace

SegmentationResult segment_with_rescaling(const Segmenter& s, const Volume& volume, const Index3& center,
                                          const Extent3& patch, const ScaleSchedule& schedule) {
  check_patch(s, patch);
  validate_schedule(schedule);
  if (!volume.contains(center.z, center.y, center.x))
    throw ContractViolation("lesion centre lies outside the volume");
  SegmentationResult r;
  r.mask = Volume(volume.extents, volume.spacing, VoxelType::u8, 0.0f);
  r.mask.origin = volume.origin;
  const Vec3 p = volume.physical(center);
  Volume labels;
  for (std::size_t k = 0; k <= schedule.size(); ++k) {
    const double scale = k == 0 ? 1.0 : schedule[k - 1];
    const Volume scaled = k == 0 ? volume : resample(volume, scale, Interp::trilinear);
    const Index3 c = k == 0 ? center : scaled.nearest_voxel(p);
    PatchInputs in = make_patch_inputs(scaled, c, patch, s.paths, s.second_path_scale, 3);
    const TensorF logits = s.predict(in.tensors);
    ++r.model_calls;
    labels = labels_from_logits(logits, in.patch);
    const std::int64_t n = boundary_positive_count(labels);
    r.trace.push_back({scale, n, n == 0});
    if (n == 0) break;
  }
  if (!r.trace.back().accepted) {
    std::ostringstream w;
    w << "schedule exhausted: " << r.trace.back().boundary_positive
      << " lesion voxels still touch the patch boundary at scale " << r.trace.back().scale;
    r.warnings.push_back(w.str());
  }
  place(r.mask, labels);
  return r;
}

SegmentationResult segment_2d(const Segmenter& s, const Volume& volume, const std::vector<Index>& slices,
                              Index patch_h, Index patch_w, const Index3& center) {
  if (slices.empty()) throw ConfigError("2-D segmentation needs at least one lesion slice");
  check_patch(s, {1, patch_h, patch_w});
  SegmentationResult r;
  r.mask = Volume(volume.extents, volume.spacing, VoxelType::u8, 0.0f);
  r.mask.origin = volume.origin;
  const Index plane = volume.extents.h * volume.extents.w;
  for (Index z : slices) {
    if (z < 0 || z >= volume.extents.d) throw ContractViolation("slice " + std::to_string(z) + " is outside the volume");
    Volume slice({1, volume.extents.h, volume.extents.w}, volume.spacing, volume.dtype, 0.0f);
    slice.origin = volume.physical({z, 0, 0});
    std::copy_n(volume.data.begin() + z * plane, plane, slice.data.begin());
    PatchInputs in = make_patch_inputs(slice, {0, center.y, center.x}, {1, patch_h, patch_w}, s.paths,
                                       s.second_path_scale, 2);
    const TensorF logits = s.predict(in.tensors);
    ++r.model_calls;
    const Volume labels = labels_from_logits(logits, in.patch);
    const Index y0 = center.y - patch_h / 2, x0 = center.x - patch_w / 2;
    for (Index y = 0; y < patch_h; ++y)
      for (Index x = 0; x < patch_w; ++x)
        if (r.mask.contains(z, y0 + y, x0 + x)) r.mask.at(z, y0 + y, x0 + x) = labels.at(0, y, x);
  }
  return r;
}

}  // namespace abus
