#pragma once

#include <string>
#include <vector>

#include "abus/volume.hpp"

namespace abus {

// 2|a & b| / (|a| + |b|); two empty masks score 1.
double dice(const Volume& a, const Volume& b);
// Same ratio over raw label arrays of equal length (non-zero = positive).
double dice(const std::vector<float>& a, const std::vector<float>& b);

// Area of voxel faces separating the mask from background (or the grid
// border), each face weighted by its physical area.
double surface_area(const Volume& mask);

// Face counting overestimates a smooth surface by about 1.5 on average.
inline constexpr double kFaceCountBias = 1.5;

// A^3 / (36 pi V^2). With `bias_corrected`, A is divided by kFaceCountBias
// first. Throws ContractViolation for an empty mask.
double compactness(const Volume& mask, bool bias_corrected = false);
double compactness_from(double area, double volume);

// Diameter of the sphere with the mask's volume.
double equivalent_diameter(const Volume& mask);
double mask_volume_mm3(const Volume& mask);

struct DiameterCdf {
  std::vector<double> diameters;  // ascending
  std::vector<double> fraction;   // fraction[i] = (i + 1) / n

  // Fraction of diameters <= d.
  double at(double d) const;
};

DiameterCdf cumulative_diameter_histogram(std::vector<double> diameters);

struct EvalRecord {
  std::string case_id;
  double dsc = 0.0;
  double gt_compactness = 0.0;
  double predicted_compactness = 0.0;  // 0 when the prediction is empty
  double gt_diameter_mm = 0.0;
  double gt_volume_mm3 = 0.0;
};

enum class EvalProperty { compactness, size };

struct ScatterRow {
  std::string case_id;
  double x = 0.0;
  double y = 0.0;
};

// (property, DSC) pairs sorted by case id.
std::vector<ScatterRow> dsc_vs_property(std::vector<EvalRecord> records, EvalProperty property);
// (ground-truth compactness, predicted compactness) pairs sorted by case id.
std::vector<ScatterRow> compactness_pairs(std::vector<EvalRecord> records);

// Iterated binary median filter over a ball of `radius` voxels. Removes small
// protrusions and fills small dents, so the boundary only gets simpler.
Volume morphological_smooth(const Volume& mask, int radius = 2, int iterations = 3);

}  // namespace abus
