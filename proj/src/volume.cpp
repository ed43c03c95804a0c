#include "abus/volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "abus/errors.hpp"
#include "abus/ops.hpp"

namespace abus {

Volume::Volume(Extent3 e, Vec3 s, VoxelType t, float fill)
    : extents(e), spacing(s), dtype(t), data(static_cast<std::size_t>(e.volume()), fill) {
  validate();
}

Vec3 Volume::physical(const Index3& v) const {
  return {origin[0] + static_cast<double>(v.z) * spacing[0], origin[1] + static_cast<double>(v.y) * spacing[1],
          origin[2] + static_cast<double>(v.x) * spacing[2]};
}

Index3 Volume::nearest_voxel(const Vec3& p) const {
  auto axis = [&](int a) { return static_cast<Index>(std::floor((p[a] - origin[a]) / spacing[a] + 0.5)); };
  return {axis(0), axis(1), axis(2)};
}

void Volume::validate() const {
  if (extents.d < 1 || extents.h < 1 || extents.w < 1)
    throw ContractViolation("volume extents must be positive, got " + to_string(extents));
  for (double s : spacing)
    if (!(s > 0.0) || !std::isfinite(s)) throw ContractViolation("volume spacing must be positive");
  if (static_cast<Index>(data.size()) != extents.volume())
    throw ContractViolation("volume holds " + std::to_string(data.size()) + " values for extents " +
                            to_string(extents));
  if (is_mask())
    for (float v : data)
      if (v != 0.0f && v != 1.0f) throw ContractViolation("mask volume holds a value other than 0 or 1");
}

bool same_grid(const Volume& a, const Volume& b) {
  auto close = [](const Vec3& x, const Vec3& y) {
    for (int i = 0; i < 3; ++i)
      if (std::abs(x[i] - y[i]) > 1e-9 * std::max(1.0, std::abs(x[i]))) return false;
    return true;
  };
  return a.extents == b.extents && close(a.spacing, b.spacing) && close(a.origin, b.origin);
}

Volume resample(const Volume& v, const Vec3& scale, Interp interp) {
  v.validate();
  if (v.is_mask() && interp != Interp::nearest) throw ContractViolation("masks must be resampled with nearest");
  const Index n[3] = {v.extents.d, v.extents.h, v.extents.w};
  Index m[3];
  for (int a = 0; a < 3; ++a) {
    if (!(scale[a] > 0.0)) throw ContractViolation("resample scale must be positive");
    m[a] = static_cast<Index>(std::llround(static_cast<double>(n[a]) * scale[a]));
    if (m[a] < 1)
      throw ContractViolation("resampling extent " + std::to_string(n[a]) + " by " + std::to_string(scale[a]) +
                              " leaves no voxels");
  }
  Volume out;
  out.extents = {m[0], m[1], m[2]};
  out.dtype = v.dtype;
  for (int a = 0; a < 3; ++a) {
    out.spacing[a] = v.spacing[a] / scale[a];
    out.origin[a] = v.origin[a] - v.spacing[a] / 2.0 + out.spacing[a] / 2.0;
  }
  // Output voxel j samples source coordinate (j + 0.5) / s - 0.5.
  auto start = [&](int a) { return 0.5 / scale[a] - 0.5; };
  if (interp == Interp::trilinear) {
    LinearMap3 maps;
    for (int a = 0; a < 3; ++a) maps[static_cast<std::size_t>(a)] = LinearAxisMap::sampling(n[a], m[a], start(a), 1.0 / scale[a]);
    TensorF r = interpolate(to_tensor(v), maps);
    out.data.assign(r.values().begin(), r.values().end());
    return out;
  }
  std::vector<Index> src[3];
  for (int a = 0; a < 3; ++a) {
    src[a].resize(static_cast<std::size_t>(m[a]));
    for (Index j = 0; j < m[a]; ++j) {
      const double pos = start(a) + static_cast<double>(j) / scale[a];
      src[a][static_cast<std::size_t>(j)] = std::clamp<Index>(static_cast<Index>(std::floor(pos + 0.5)), 0, n[a] - 1);
    }
  }
  out.data.resize(static_cast<std::size_t>(out.extents.volume()));
  for (Index z = 0; z < m[0]; ++z)
    for (Index y = 0; y < m[1]; ++y)
      for (Index x = 0; x < m[2]; ++x)
        out.at(z, y, x) = v.at(src[0][static_cast<std::size_t>(z)], src[1][static_cast<std::size_t>(y)],
                               src[2][static_cast<std::size_t>(x)]);
  return out;
}

Volume resample(const Volume& v, double scale, Interp interp) {
  return resample(v, Vec3{scale, scale, scale}, interp);
}

Volume resample_to_spacing(const Volume& v, double spacing_mm, Interp interp) {
  if (!(spacing_mm > 0.0)) throw ContractViolation("target spacing must be positive");
  return resample(v, Vec3{v.spacing[0] / spacing_mm, v.spacing[1] / spacing_mm, v.spacing[2] / spacing_mm}, interp);
}

Volume crop_patch(const Volume& v, const Index3& center, const Extent3& e, std::optional<float> pad_value) {
  if (e.d < 1 || e.h < 1 || e.w < 1) throw ContractViolation("patch extents must be positive, got " + to_string(e));
  float pad = 0.0f;
  if (pad_value) {
    pad = *pad_value;
  } else if (!v.is_mask() && !v.data.empty()) {
    pad = *std::min_element(v.data.begin(), v.data.end());
  }
  const Index3 start{center.z - e.d / 2, center.y - e.h / 2, center.x - e.w / 2};
  Volume out(e, v.spacing, v.dtype, pad);
  out.origin = v.physical(start);
  for (Index z = 0; z < e.d; ++z) {
    const Index sz = start.z + z;
    if (sz < 0 || sz >= v.extents.d) continue;
    for (Index y = 0; y < e.h; ++y) {
      const Index sy = start.y + y;
      if (sy < 0 || sy >= v.extents.h) continue;
      const Index x0 = std::max<Index>(0, -start.x);
      const Index x1 = std::min<Index>(e.w, v.extents.w - start.x);
      if (x0 >= x1) continue;
      std::copy_n(v.data.begin() + v.index(sz, sy, start.x + x0), x1 - x0, out.data.begin() + out.index(z, y, x0));
    }
  }
  return out;
}

BalanceCounts balance_ratio(const Volume& mask, const std::vector<Index3>& centers, const Extent3& e) {
  BalanceCounts r;
  if (centers.empty()) {
    r.background = e.volume();
    return r;
  }
  Index3 lo{centers[0].z - e.d / 2, centers[0].y - e.h / 2, centers[0].x - e.w / 2};
  Index3 hi = lo;
  for (const Index3& c : centers) {
    const Index3 s{c.z - e.d / 2, c.y - e.h / 2, c.x - e.w / 2};
    lo = {std::min(lo.z, s.z), std::min(lo.y, s.y), std::min(lo.x, s.x)};
    hi = {std::max(hi.z, s.z), std::max(hi.y, s.y), std::max(hi.x, s.x)};
  }
  const Extent3 box{hi.z - lo.z + e.d, hi.y - lo.y + e.h, hi.x - lo.x + e.w};
  std::vector<std::uint8_t> covered(static_cast<std::size_t>(box.volume()), 0);
  for (const Index3& c : centers) {
    const Index3 s{c.z - e.d / 2 - lo.z, c.y - e.h / 2 - lo.y, c.x - e.w / 2 - lo.x};
    for (Index z = 0; z < e.d; ++z)
      for (Index y = 0; y < e.h; ++y)
        std::fill_n(covered.begin() + ((s.z + z) * box.h + s.y + y) * box.w + s.x, e.w, std::uint8_t{1});
  }
  std::int64_t total = 0;
  for (Index z = 0; z < box.d; ++z)
    for (Index y = 0; y < box.h; ++y)
      for (Index x = 0; x < box.w; ++x) {
        if (!covered[static_cast<std::size_t>((z * box.h + y) * box.w + x)]) continue;
        ++total;
        const Index vz = z + lo.z, vy = y + lo.y, vx = x + lo.x;
        if (mask.contains(vz, vy, vx) && mask.at(vz, vy, vx) > 0.5f) ++r.lesion;
      }
  r.background = total - r.lesion;
  r.ratio = r.background > 0 ? static_cast<double>(r.lesion) / static_cast<double>(r.background)
                             : std::numeric_limits<double>::infinity();
  return r;
}

std::vector<Index> lesion_slice_indices(const Volume& mask) {
  std::vector<Index> out;
  const Index plane = mask.extents.h * mask.extents.w;
  for (Index z = 0; z < mask.extents.d; ++z) {
    const auto first = mask.data.begin() + z * plane;
    if (std::any_of(first, first + plane, [](float v) { return v > 0.5f; })) out.push_back(z);
  }
  return out;
}

std::optional<Index3> mask_centroid(const Volume& mask) {
  double sz = 0, sy = 0, sx = 0;
  std::int64_t n = 0;
  for (Index z = 0; z < mask.extents.d; ++z)
    for (Index y = 0; y < mask.extents.h; ++y)
      for (Index x = 0; x < mask.extents.w; ++x)
        if (mask.at(z, y, x) > 0.5f) {
          sz += static_cast<double>(z);
          sy += static_cast<double>(y);
          sx += static_cast<double>(x);
          ++n;
        }
  if (n == 0) return std::nullopt;
  const double k = static_cast<double>(n);
  return Index3{std::llround(sz / k), std::llround(sy / k), std::llround(sx / k)};
}

std::int64_t count_positive(const Volume& mask) {
  return std::count_if(mask.data.begin(), mask.data.end(), [](float v) { return v > 0.5f; });
}

TensorF to_tensor(const Volume& v) {
  return TensorF({1, 1, v.extents.d, v.extents.h, v.extents.w}, v.data);
}

TensorF slice_tensor(const Volume& v, Index z) {
  if (z < 0 || z >= v.extents.d) throw ContractViolation("slice " + std::to_string(z) + " is outside the volume");
  const Index plane = v.extents.h * v.extents.w;
  return TensorF({1, 1, v.extents.h, v.extents.w},
                 std::vector<float>(v.data.begin() + z * plane, v.data.begin() + (z + 1) * plane));
}

void standardize(TensorF& t, const std::vector<std::uint8_t>& inside) {
  if (!inside.empty() && static_cast<Index>(inside.size()) != t.size())
    throw ContractViolation("standardize coverage has " + std::to_string(inside.size()) + " flags for " +
                            std::to_string(t.size()) + " values");
  const auto counted = [&](Index i) { return inside.empty() || inside[static_cast<std::size_t>(i)] != 0; };
  double sum = 0, sq = 0, n = 0;
  for (Index i = 0; i < t.size(); ++i)
    if (counted(i)) {
      sum += t[i];
      n += 1;
    }
  if (n == 0) return;
  const double mean = sum / n;
  for (Index i = 0; i < t.size(); ++i)
    if (counted(i)) sq += (t[i] - mean) * (t[i] - mean);
  const double sd = std::sqrt(sq / n);
  const double inv = sd > 1e-12 ? 1.0 / sd : 1.0;
  for (float& v : t.values()) v = static_cast<float>((v - mean) * inv);
}

std::vector<std::uint8_t> crop_coverage(const Volume& v, const Index3& center, const Extent3& e) {
  const Index3 start{center.z - e.d / 2, center.y - e.h / 2, center.x - e.w / 2};
  const auto in = [](Index s, Index n) { return s >= 0 && s < n; };
  std::vector<std::uint8_t> out(static_cast<std::size_t>(e.d * e.h * e.w), 0);
  std::size_t k = 0;
  for (Index z = 0; z < e.d; ++z)
    for (Index y = 0; y < e.h; ++y)
      for (Index x = 0; x < e.w; ++x, ++k)
        out[k] = in(start.z + z, v.extents.d) && in(start.y + y, v.extents.h) && in(start.x + x, v.extents.w);
  return out;
}

void to_json(nlohmann::json& j, const Index3& v) { j = nlohmann::json::array({v.z, v.y, v.x}); }

void from_json(const nlohmann::json& j, Index3& v) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("voxel coordinate must be a 3-element array");
  v = {j[0].get<Index>(), j[1].get<Index>(), j[2].get<Index>()};
}

void to_json(nlohmann::json& j, const LesionAnnotation& a) {
  j = nlohmann::json{{"case_id", a.case_id}, {"center", a.center}, {"diameter_mm", a.diameter_mm}, {"label", a.label}};
}

void from_json(const nlohmann::json& j, LesionAnnotation& a) {
  a.case_id = j.value("case_id", std::string());
  a.center = j.at("center").get<Index3>();
  a.diameter_mm = j.at("diameter_mm").get<double>();
  a.label = j.value("label", std::string("benign"));
}

}  // namespace abus
