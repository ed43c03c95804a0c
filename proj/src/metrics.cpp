#include "abus/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "abus/errors.hpp"

namespace abus {

double dice(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size())
    throw ContractViolation("dice needs equal sizes, got " + std::to_string(a.size()) + " and " +
                            std::to_string(b.size()));
  std::int64_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a[i] > 0.5f, pb = b[i] > 0.5f;
    na += pa;
    nb += pb;
    both += pa && pb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double dice(const Volume& a, const Volume& b) {
  if (!same_grid(a, b))
    throw ContractViolation("dice needs masks on the same grid, got " + to_string(a.extents) + " and " +
                            to_string(b.extents));
  return dice(a.data, b.data);
}

double surface_area(const Volume& m) {
  const Extent3 e = m.extents;
  const double face[3] = {m.spacing[1] * m.spacing[2], m.spacing[0] * m.spacing[2], m.spacing[0] * m.spacing[1]};
  auto on = [&](Index z, Index y, Index x) { return m.contains(z, y, x) && m.at(z, y, x) > 0.5f; };
  std::int64_t count[3] = {0, 0, 0};
  for (Index z = 0; z < e.d; ++z)
    for (Index y = 0; y < e.h; ++y)
      for (Index x = 0; x < e.w; ++x) {
        if (!on(z, y, x)) continue;
        count[0] += !on(z - 1, y, x) + !on(z + 1, y, x);
        count[1] += !on(z, y - 1, x) + !on(z, y + 1, x);
        count[2] += !on(z, y, x - 1) + !on(z, y, x + 1);
      }
  return static_cast<double>(count[0]) * face[0] + static_cast<double>(count[1]) * face[1] +
         static_cast<double>(count[2]) * face[2];
}

double mask_volume_mm3(const Volume& m) {
  return static_cast<double>(count_positive(m)) * m.spacing[0] * m.spacing[1] * m.spacing[2];
}

double compactness_from(double area, double volume) {
  return area * area * area / (36.0 * std::numbers::pi * volume * volume);
}

double compactness(const Volume& m, bool bias_corrected) {
  const double v = mask_volume_mm3(m);
  if (v <= 0.0) throw ContractViolation("compactness is undefined for an empty mask");
  double a = surface_area(m);
  if (bias_corrected) a /= kFaceCountBias;
  return compactness_from(a, v);
}

double equivalent_diameter(const Volume& m) {
  const double v = mask_volume_mm3(m);
  if (v <= 0.0) throw ContractViolation("equivalent diameter is undefined for an empty mask");
  return 2.0 * std::cbrt(3.0 * v / (4.0 * std::numbers::pi));
}

double DiameterCdf::at(double d) const {
  const auto it = std::upper_bound(diameters.begin(), diameters.end(), d);
  return static_cast<double>(it - diameters.begin()) / static_cast<double>(diameters.size());
}

DiameterCdf cumulative_diameter_histogram(std::vector<double> diameters) {
  if (diameters.empty()) throw ConfigError("cumulative diameter histogram needs at least one diameter");
  DiameterCdf c;
  std::sort(diameters.begin(), diameters.end());
  c.diameters = std::move(diameters);
  const double n = static_cast<double>(c.diameters.size());
  for (std::size_t i = 0; i < c.diameters.size(); ++i) c.fraction.push_back(static_cast<double>(i + 1) / n);
  return c;
}

namespace {

void sort_by_case(std::vector<EvalRecord>& r) {
  std::stable_sort(r.begin(), r.end(), [](const EvalRecord& a, const EvalRecord& b) { return a.case_id < b.case_id; });
}

// Max (dilate) or min (erode) filter over a ball of radius r; voxels outside
// the grid count as background.
// One pass of a binary median filter over a ball; outside the grid counts as 0.
Volume ball_majority(const Volume& m, int r) {
  std::vector<Index3> offsets;
  for (Index z = -r; z <= r; ++z)
    for (Index y = -r; y <= r; ++y)
      for (Index x = -r; x <= r; ++x)
        if (z * z + y * y + x * x <= static_cast<Index>(r) * r) offsets.push_back({z, y, x});
  Volume out = m;
  const Extent3 e = m.extents;
#pragma omp parallel for schedule(static)
  for (Index z = 0; z < e.d; ++z)
    for (Index y = 0; y < e.h; ++y)
      for (Index x = 0; x < e.w; ++x) {
        std::size_t on = 0;
        for (const Index3& o : offsets) {
          const Index zz = z + o.z, yy = y + o.y, xx = x + o.x;
          on += m.contains(zz, yy, xx) && m.at(zz, yy, xx) > 0.5f;
        }
        out.at(z, y, x) = 2 * on > offsets.size() ? 1.0f : 0.0f;
      }
  return out;
}

}  // namespace

std::vector<ScatterRow> dsc_vs_property(std::vector<EvalRecord> records, EvalProperty property) {
  sort_by_case(records);
  std::vector<ScatterRow> rows;
  for (const auto& r : records)
    rows.push_back({r.case_id, property == EvalProperty::compactness ? r.gt_compactness : r.gt_diameter_mm, r.dsc});
  return rows;
}

std::vector<ScatterRow> compactness_pairs(std::vector<EvalRecord> records) {
  sort_by_case(records);
  std::vector<ScatterRow> rows;
  for (const auto& r : records) rows.push_back({r.case_id, r.gt_compactness, r.predicted_compactness});
  return rows;
}

Volume morphological_smooth(const Volume& mask, int radius, int iterations) {
  if (radius < 1 || iterations < 1) return mask;
  Volume out = mask;
  for (int i = 0; i < iterations; ++i) out = ball_majority(out, radius);
  return out;
}

}  // namespace abus
