#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "abus/model.hpp"
#include "abus/volume.hpp"

namespace abus {

// Anything that maps per-path patch tensors to logits. Wraps a Model for
// real runs and lets tests substitute stubs.
struct Segmenter {
  std::function<TensorF(std::span<const TensorF>)> predict;
  int paths = 1;
  double second_path_scale = 0.5;
  Index divisor = 1;  // patch extents must be multiples of this
  int dimensionality = 3;
};

// Infer-mode forward of `model`; the model must outlive the segmenter.
Segmenter model_segmenter(Model& model);

// Strictly decreasing factors in (0, 1), e.g. 0.9, 0.8, 0.7, 0.6, 0.5.
using ScaleSchedule = std::vector<double>;
void validate_schedule(const ScaleSchedule& s);
ScaleSchedule parse_schedule(const std::string& text);

struct TraceEntry {
  double scale = 1.0;
  std::int64_t boundary_positive = 0;
  bool accepted = false;
};

struct SegmentationResult {
  Volume mask;  // on the input volume's grid
  std::vector<TraceEntry> trace;
  std::vector<std::string> warnings;
  int model_calls = 0;
};

// Positive voxels on the outermost shell of the patch.
std::int64_t boundary_positive_count(const Volume& labels);

// Argmax over channels of a single-sample logit tensor, as a mask shaped like `like`.
Volume labels_from_logits(const TensorF& logits, const Volume& like);

// Patch inputs for one segmentation attempt: the standardized patch around
// `center` and, for two paths, the same-extent patch of the volume resampled
// by `second_path_scale` around the same physical point.
struct PatchInputs {
  std::vector<TensorF> tensors;
  Volume patch;  // path-1 patch, carries the physical placement
};
PatchInputs make_patch_inputs(const Volume& image, const Index3& center, const Extent3& extents, int paths,
                              double second_path_scale, int dimensionality = 3);

// Feeds the native patch, then the volume resampled by each schedule factor
// in turn, until no predicted lesion voxel touches the patch boundary. The
// accepted labels are mapped back to the input grid by nearest neighbour.
// An exhausted schedule returns the last attempt with a warning and no
// accepted trace entry.
SegmentationResult segment_with_rescaling(const Segmenter& s, const Volume& volume, const Index3& center,
                                          const Extent3& patch, const ScaleSchedule& schedule);

// Segments each listed slice from a 2-D patch around (center.y, center.x)
// and stacks the results; unlisted slices stay background.
SegmentationResult segment_2d(const Segmenter& s, const Volume& volume, const std::vector<Index>& slices,
                              Index patch_h, Index patch_w, const Index3& center);

}  // namespace abus
