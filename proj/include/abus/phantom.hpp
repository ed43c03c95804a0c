#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "abus/volume.hpp"

namespace abus {

enum class LesionShape { sphere, ellipsoid, lobulated };

// Synthetic breast-ultrasound-like volume with hypoechoic lesions.
//
// Diameters follow a lognormal truncated to [diameter_min_mm,
// diameter_max_mm]. The defaults put half of the population below 7 mm and
// 80% below 15 mm. Speckle is multiplicative gamma noise with unit mean.
struct PhantomSpec {
  Extent3 extents{112, 112, 112};
  double spacing_mm = 0.6;
  int lesion_count = 1;
  double diameter_log_mean = 1.7557;  // mean of ln(d / 1 mm) before truncation
  double diameter_log_sd = 1.4625;
  double diameter_min_mm = 2.0;
  double diameter_max_mm = 30.0;
  LesionShape shape = LesionShape::lobulated;
  double max_elongation = 1.4;  // bound on each ellipsoid axis ratio
  double lobulation = 0.15;     // relative amplitude of radial perturbation
  double background = 100.0;
  double texture = 0.1;         // amplitude of smooth background variation
  double contrast = 0.35;       // lesion mean / local background mean
  double speckle_shape = 4.0;   // gamma shape; speckle variance is 1 / shape
  int max_attempts = 200;

  void validate() const;
  // High-contrast spherical lesions on a smaller grid.
  static PhantomSpec easy();
};

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);

struct Phantom {
  Volume image;
  Volume mask;
  std::vector<LesionAnnotation> lesions;
};

// Deterministic for a fixed spec and seed. Each lesion centre lies at least
// one diameter from every face; lesions do not overlap.
Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed, const std::string& case_id = "case");

// One draw from the truncated diameter distribution.
double sample_diameter(const PhantomSpec& spec, std::mt19937_64& rng);

// Voxelizes a ball of `radius_mm` centred at `center_mm` into `mask`.
void draw_ball(Volume& mask, const Vec3& center_mm, double radius_mm);

}  // namespace abus
