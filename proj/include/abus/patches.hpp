#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "abus/inference.hpp"
#include "abus/volume.hpp"
#include "abus/volume_io.hpp"

namespace abus {

// One case loaded from a manifest.
struct Case {
  std::string case_id;
  Volume image;
  Volume mask;
  std::vector<LesionAnnotation> lesions;
};

Case load_case(const ManifestEntry& entry, const std::filesystem::path& manifest_dir);
std::vector<Case> load_cases(const std::filesystem::path& manifest_path);

struct PatchOptions {
  Extent3 extents{16, 32, 32};  // depth is ignored for 2-D patches
  int dimensionality = 3;
  int paths = 1;
  double second_path_scale = 0.5;
  // For lesions that touch the native patch boundary, also add the patch
  // at the first factor whose lesion patch is clear of the boundary.
  ScaleSchedule scale_augmentation;
};

void to_json(nlohmann::json& j, const PatchOptions& p);
void from_json(const nlohmann::json& j, PatchOptions& p);

// Training example: one input per path plus the binary lesion target.
struct Sample {
  std::string case_id;
  std::vector<TensorF> inputs;
  TensorF target;
  double scale = 1.0;
};

// Lesion-centred patches of one case. 3-D: one patch per lesion (plus an
// optional rescaled one). 2-D: one patch per lesion slice of each lesion.
std::vector<Sample> make_samples(const Case& c, const PatchOptions& options);
std::vector<Sample> make_samples(const std::vector<Case>& cases, const PatchOptions& options);

}  // namespace abus
