#pragma once

#include <optional>

#include <nlohmann/json.hpp>

#include "abus/volume.hpp"

namespace abus {

enum class DenoiseMode { slice2d, full3d };

// Bayesian non-local means with the Pearson distance for multiplicative
// speckle. block_step 1 restores every voxel from its own patch; larger
// steps restore whole blocks on a sparse grid and average the overlapping
// block estimates.
struct ObnlmParams {
  int search_radius = 5;      // M
  int patch_radius = 1;       // d
  std::optional<double> h;    // smoothing; estimated as kappa * sigma when unset
  double kappa = 0.7;
  int block_step = 1;         // s
  DenoiseMode mode = DenoiseMode::slice2d;

  void validate() const;
};

void to_json(nlohmann::json& j, const ObnlmParams& p);
void from_json(const nlohmann::json& j, ObnlmParams& p);

// Pseudo-residual noise level normalised for speckle: sqrt(mean(eps^2 / u))
// where eps is the scaled difference between a voxel and its neighbour mean.
double estimate_speckle_sigma(const Volume& v, DenoiseMode mode);

// Resolved smoothing parameter for `v`.
double obnlm_smoothing(const Volume& v, const ObnlmParams& p);

Volume obnlm_denoise(const Volume& v, const ObnlmParams& p);

}  // namespace abus
