#include "abus/denoise.hpp"

#include <algorithm>
#include <cmath>

#include "abus/errors.hpp"

namespace abus {

void ObnlmParams::validate() const {
  if (patch_radius < 1) throw ConfigError("patch radius must be >= 1");
  if (search_radius < patch_radius) throw ConfigError("search radius must be >= patch radius");
  if (h && !(*h > 0.0)) throw ConfigError("smoothing parameter h must be positive");
  if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
  if (block_step < 1 || block_step > 2 * patch_radius + 1)
    throw ConfigError("block step must lie in [1, 2 * patch_radius + 1]");
}

void to_json(nlohmann::json& j, const ObnlmParams& p) {
  j = nlohmann::json{{"search_radius", p.search_radius},
                     {"patch_radius", p.patch_radius},
                     {"kappa", p.kappa},
                     {"block_step", p.block_step},
                     {"mode", p.mode == DenoiseMode::slice2d ? "slice2d" : "full3d"}};
  j["h"] = p.h ? nlohmann::json(*p.h) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, ObnlmParams& p) {
  ObnlmParams d;
  d.search_radius = j.value("search_radius", d.search_radius);
  d.patch_radius = j.value("patch_radius", d.patch_radius);
  d.kappa = j.value("kappa", d.kappa);
  d.block_step = j.value("block_step", d.block_step);
  if (j.contains("h") && !j.at("h").is_null()) d.h = j.at("h").get<double>();
  const std::string mode = j.value("mode", std::string("slice2d"));
  if (mode == "slice2d") {
    d.mode = DenoiseMode::slice2d;
  } else if (mode == "full3d") {
    d.mode = DenoiseMode::full3d;
  } else {
    throw ConfigError("unknown denoise mode '" + mode + "'");
  }
  p = d;
}

namespace {

constexpr double kIntensityFloor = 1e-6;

struct Grid {
  Index d, h, w;
  const float* u;

  bool in(Index z, Index y, Index x) const { return z >= 0 && y >= 0 && x >= 0 && z < d && y < h && x < w; }
  double at(Index z, Index y, Index x) const { return u[(z * h + y) * w + x]; }
};

// Pearson distance between the patches around p and q, averaged over the
// offsets for which both patches stay inside the grid.
double pearson_distance(const Grid& g, Index pz, Index py, Index px, Index qz, Index qy, Index qx, Index rz, Index r) {
  double sum = 0;
  int n = 0;
  for (Index kz = -rz; kz <= rz; ++kz)
    for (Index ky = -r; ky <= r; ++ky)
      for (Index kx = -r; kx <= r; ++kx) {
        if (!g.in(pz + kz, py + ky, px + kx) || !g.in(qz + kz, qy + ky, qx + kx)) continue;
        const double a = g.at(pz + kz, py + ky, px + kx);
        const double b = g.at(qz + kz, qy + ky, qx + kx);
        sum += (a - b) * (a - b) / std::max(b, kIntensityFloor);
        ++n;
      }
  return sum / n;
}

Volume pixelwise(const Volume& v, const ObnlmParams& p, double h2) {
  const Grid g{v.extents.d, v.extents.h, v.extents.w, v.data.data()};
  const Index rz = p.mode == DenoiseMode::full3d ? p.patch_radius : 0;
  const Index mz = p.mode == DenoiseMode::full3d ? p.search_radius : 0;
  const Index r = p.patch_radius, m = p.search_radius;
  Volume out = v;
#pragma omp parallel for collapse(2) schedule(static)
  for (Index z = 0; z < g.d; ++z)
    for (Index y = 0; y < g.h; ++y)
      for (Index x = 0; x < g.w; ++x) {
        double num = 0, den = 0;
        for (Index qz = std::max<Index>(0, z - mz); qz <= std::min(g.d - 1, z + mz); ++qz)
          for (Index qy = std::max<Index>(0, y - m); qy <= std::min(g.h - 1, y + m); ++qy)
            for (Index qx = std::max<Index>(0, x - m); qx <= std::min(g.w - 1, x + m); ++qx) {
              const double w = std::exp(-pearson_distance(g, z, y, x, qz, qy, qx, rz, r) / h2);
              num += w * g.at(qz, qy, qx);
              den += w;
            }
        out.at(z, y, x) = static_cast<float>(num / den);
      }
  return out;
}

// Block centres 0, s, 2s, ... plus the last index, so blocks of radius
// r >= (s - 1) / 2 cover the axis.
std::vector<Index> block_centres(Index n, Index step) {
  std::vector<Index> c;
  for (Index i = 0; i < n; i += step) c.push_back(i);
  if (c.back() != n - 1) c.push_back(n - 1);
  return c;
}

Volume blockwise(const Volume& v, const ObnlmParams& p, double h2) {
  const Grid g{v.extents.d, v.extents.h, v.extents.w, v.data.data()};
  const bool full = p.mode == DenoiseMode::full3d;
  const Index rz = full ? p.patch_radius : 0;
  const Index mz = full ? p.search_radius : 0;
  const Index r = p.patch_radius, m = p.search_radius;
  const Index bz = 2 * rz + 1, b = 2 * r + 1;
  const Index block = bz * b * b;
  const std::vector<Index> cz = full ? block_centres(g.d, p.block_step) : block_centres(g.d, 1);
  const std::vector<Index> cy = block_centres(g.h, p.block_step);
  const std::vector<Index> cx = block_centres(g.w, p.block_step);
  const auto nz = static_cast<Index>(cz.size()), ny = static_cast<Index>(cy.size()), nx = static_cast<Index>(cx.size());
  std::vector<float> estimate(static_cast<std::size_t>(nz * ny * nx * block), 0.0f);

#pragma omp parallel for collapse(2) schedule(static)
  for (Index iz = 0; iz < nz; ++iz)
    for (Index iy = 0; iy < ny; ++iy) {
      std::vector<double> num(static_cast<std::size_t>(block)), den(static_cast<std::size_t>(block));
      for (Index ix = 0; ix < nx; ++ix) {
        const Index z = cz[static_cast<std::size_t>(iz)], y = cy[static_cast<std::size_t>(iy)],
                    x = cx[static_cast<std::size_t>(ix)];
        std::fill(num.begin(), num.end(), 0.0);
        std::fill(den.begin(), den.end(), 0.0);
        for (Index qz = std::max<Index>(0, z - mz); qz <= std::min(g.d - 1, z + mz); ++qz)
          for (Index qy = std::max<Index>(0, y - m); qy <= std::min(g.h - 1, y + m); ++qy)
            for (Index qx = std::max<Index>(0, x - m); qx <= std::min(g.w - 1, x + m); ++qx) {
              const double w = std::exp(-pearson_distance(g, z, y, x, qz, qy, qx, rz, r) / h2);
              Index k = 0;
              for (Index kz = -rz; kz <= rz; ++kz)
                for (Index ky = -r; ky <= r; ++ky)
                  for (Index kx = -r; kx <= r; ++kx, ++k) {
                    if (!g.in(z + kz, y + ky, x + kx) || !g.in(qz + kz, qy + ky, qx + kx)) continue;
                    num[static_cast<std::size_t>(k)] += w * g.at(qz + kz, qy + ky, qx + kx);
                    den[static_cast<std::size_t>(k)] += w;
                  }
            }
        float* e = estimate.data() + ((iz * ny + iy) * nx + ix) * block;
        for (Index k = 0; k < block; ++k)
          e[k] = den[static_cast<std::size_t>(k)] > 0 ? static_cast<float>(num[static_cast<std::size_t>(k)] / den[static_cast<std::size_t>(k)]) : 0.0f;
      }
    }

  // Gather: every voxel averages the estimates of the blocks covering it.
  auto covering = [](const std::vector<Index>& c, Index i, Index radius) {
    const auto lo = std::lower_bound(c.begin(), c.end(), i - radius) - c.begin();
    const auto hi = std::upper_bound(c.begin(), c.end(), i + radius) - c.begin();
    return std::pair<Index, Index>{lo, hi};
  };
  Volume out = v;
#pragma omp parallel for collapse(2) schedule(static)
  for (Index z = 0; z < g.d; ++z)
    for (Index y = 0; y < g.h; ++y) {
      const auto [z0, z1] = covering(cz, z, rz);
      const auto [y0, y1] = covering(cy, y, r);
      for (Index x = 0; x < g.w; ++x) {
        const auto [x0, x1] = covering(cx, x, r);
        double sum = 0;
        int n = 0;
        for (Index iz = z0; iz < z1; ++iz)
          for (Index iy = y0; iy < y1; ++iy)
            for (Index ix = x0; ix < x1; ++ix) {
              const Index kz = z - cz[static_cast<std::size_t>(iz)] + rz;
              const Index ky = y - cy[static_cast<std::size_t>(iy)] + r;
              const Index kx = x - cx[static_cast<std::size_t>(ix)] + r;
              sum += estimate[static_cast<std::size_t>(((iz * ny + iy) * nx + ix) * block + (kz * b + ky) * b + kx)];
              ++n;
            }
        out.at(z, y, x) = static_cast<float>(sum / n);
      }
    }
  return out;
}

}  // namespace

double estimate_speckle_sigma(const Volume& v, DenoiseMode mode) {
  const Grid g{v.extents.d, v.extents.h, v.extents.w, v.data.data()};
  const bool full = mode == DenoiseMode::full3d && g.d >= 3;
  const double neighbours = full ? 6.0 : 4.0;
  const double scale = std::sqrt(neighbours / (neighbours + 1.0));
  double sum = 0;
  std::int64_t n = 0;
  for (Index z = full ? 1 : 0; z < (full ? g.d - 1 : g.d); ++z)
    for (Index y = 1; y + 1 < g.h; ++y)
      for (Index x = 1; x + 1 < g.w; ++x) {
        double s = g.at(z, y - 1, x) + g.at(z, y + 1, x) + g.at(z, y, x - 1) + g.at(z, y, x + 1);
        if (full) s += g.at(z - 1, y, x) + g.at(z + 1, y, x);
        const double u = g.at(z, y, x);
        const double eps = scale * (u - s / neighbours);
        sum += eps * eps / std::max(u, kIntensityFloor);
        ++n;
      }
  return n > 0 ? std::sqrt(sum / static_cast<double>(n)) : 0.0;
}

double obnlm_smoothing(const Volume& v, const ObnlmParams& p) {
  p.validate();
  return p.h ? *p.h : p.kappa * estimate_speckle_sigma(v, p.mode);
}

Volume obnlm_denoise(const Volume& v, const ObnlmParams& p) {
  p.validate();
  v.validate();
  for (float x : v.data)
    if (x < 0.0f) throw ContractViolation("OBNLM expects non-negative intensities");
  const double h = obnlm_smoothing(v, p);
  if (!(h > 0.0)) return v;  // noise-free input: nothing to restore
  const double h2 = h * h;
  return p.block_step == 1 ? pixelwise(v, p, h2) : blockwise(v, p, h2);
}

}  // namespace abus
