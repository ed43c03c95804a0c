#include "abus/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "abus/errors.hpp"

namespace abus {

void PhantomSpec::validate() const {
  if (extents.d < 1 || extents.h < 1 || extents.w < 1) throw ConfigError("phantom extents must be positive");
  if (!(spacing_mm > 0.0)) throw ConfigError("phantom spacing must be positive");
  if (lesion_count < 0) throw ConfigError("lesion_count must be >= 0");
  if (!(diameter_log_sd > 0.0)) throw ConfigError("diameter_log_sd must be positive");
  if (!(diameter_min_mm > 0.0) || !(diameter_max_mm >= diameter_min_mm))
    throw ConfigError("diameter bounds must satisfy 0 < min <= max");
  if (!(max_elongation >= 1.0)) throw ConfigError("max_elongation must be >= 1");
  if (!(lobulation >= 0.0 && lobulation < 0.5)) throw ConfigError("lobulation must lie in [0, 0.5)");
  if (!(background > 0.0)) throw ConfigError("background intensity must be positive");
  if (!(texture >= 0.0 && texture < 1.0)) throw ConfigError("texture must lie in [0, 1)");
  if (!(contrast > 0.0)) throw ConfigError("contrast must be positive");
  if (!(speckle_shape > 0.0)) throw ConfigError("speckle_shape must be positive");
  if (max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
}

PhantomSpec PhantomSpec::easy() {
  PhantomSpec s;
  s.extents = {80, 80, 80};
  s.diameter_min_mm = 4.0;
  s.diameter_max_mm = 20.0;
  s.shape = LesionShape::sphere;
  s.lobulation = 0.0;
  s.texture = 0.05;
  s.contrast = 0.2;
  s.speckle_shape = 8.0;
  return s;
}

namespace {

const char* shape_name(LesionShape s) {
  switch (s) {
    case LesionShape::sphere:
      return "sphere";
    case LesionShape::ellipsoid:
      return "ellipsoid";
    case LesionShape::lobulated:
      return "lobulated";
  }
  return "sphere";
}

LesionShape parse_shape(const std::string& s) {
  if (s == "sphere") return LesionShape::sphere;
  if (s == "ellipsoid") return LesionShape::ellipsoid;
  if (s == "lobulated") return LesionShape::lobulated;
  throw ConfigError("unknown lesion shape '" + s + "'");
}

using Mat3 = std::array<Vec3, 3>;

Vec3 unit_vector(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    Vec3 v{n(rng), n(rng), n(rng)};
    const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (len > 1e-9) return {v[0] / len, v[1] / len, v[2] / len};
  }
}

double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

// Random rotation from Gram-Schmidt on two random directions.
Mat3 random_rotation(std::mt19937_64& rng) {
  const Vec3 a = unit_vector(rng);
  Vec3 b = unit_vector(rng);
  const double p = dot3(a, b);
  b = {b[0] - p * a[0], b[1] - p * a[1], b[2] - p * a[2]};
  const double len = std::sqrt(dot3(b, b));
  if (len < 1e-6) return {Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}};
  b = {b[0] / len, b[1] / len, b[2] / len};
  const Vec3 c{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
  return {a, b, c};
}

// Star-shaped lesion: in the rotated, axis-scaled frame a point at
// direction n and distance rho is inside when rho <= radius * (1 + A f(n)).
struct Lesion {
  Vec3 center;  // mm, grid-relative (voxel 0 sits at 0)
  Mat3 axes;
  Vec3 scale{1, 1, 1};
  double radius = 0;
  double amplitude = 0;
  std::vector<Vec3> lobe_axes;
  std::vector<int> lobe_orders;
  double extent = 0;  // bound on the distance of any inside point from the centre

  double perturbation(const Vec3& n) const {
    if (lobe_axes.empty()) return 0.0;
    double f = 0;
    for (std::size_t k = 0; k < lobe_axes.size(); ++k)
      f += std::cos(lobe_orders[k] * std::acos(std::clamp(dot3(n, lobe_axes[k]), -1.0, 1.0)));
    return f / static_cast<double>(lobe_axes.size());
  }

  bool inside(const Vec3& p) const {
    const Vec3 d{p[0] - center[0], p[1] - center[1], p[2] - center[2]};
    Vec3 u;
    for (int i = 0; i < 3; ++i) u[static_cast<std::size_t>(i)] = dot3(d, axes[static_cast<std::size_t>(i)]) / scale[static_cast<std::size_t>(i)];
    const double rho = std::sqrt(dot3(u, u));
    if (rho < 1e-12) return true;
    if (rho > radius * (1.0 + amplitude)) return false;
    const Vec3 n{u[0] / rho, u[1] / rho, u[2] / rho};
    return rho <= radius * (1.0 + amplitude * perturbation(n));
  }
};

// Mean of (1 + A f(n))^3 over the unit sphere on a Fibonacci lattice; the
// lesion volume is (4/3) pi radius^3 times this factor.
double volume_factor(const Lesion& l) {
  if (l.amplitude == 0.0) return 1.0;
  constexpr int kPoints = 4096;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  double sum = 0;
  for (int i = 0; i < kPoints; ++i) {
    const double z = 1.0 - (2.0 * i + 1.0) / kPoints;
    const double r = std::sqrt(1.0 - z * z);
    const double phi = golden * i;
    const double g = 1.0 + l.amplitude * l.perturbation({z, r * std::cos(phi), r * std::sin(phi)});
    sum += g * g * g;
  }
  return sum / kPoints;
}

Lesion make_lesion(const PhantomSpec& spec, double diameter, std::mt19937_64& rng) {
  Lesion l;
  l.axes = random_rotation(rng);
  if (spec.shape != LesionShape::sphere && spec.max_elongation > 1.0) {
    std::uniform_real_distribution<double> logr(-std::log(spec.max_elongation), std::log(spec.max_elongation));
    const double a = std::exp(logr(rng) / 2.0);
    const double b = std::exp(logr(rng) / 2.0);
    l.scale = {a, b, 1.0 / (a * b)};  // unit product keeps the volume
  }
  if (spec.shape == LesionShape::lobulated && spec.lobulation > 0.0) {
    l.amplitude = spec.lobulation;
    std::uniform_int_distribution<int> order(2, 4);
    for (int k = 0; k < 3; ++k) {
      l.lobe_axes.push_back(unit_vector(rng));
      l.lobe_orders.push_back(order(rng));
    }
  }
  l.radius = diameter / 2.0 / std::cbrt(volume_factor(l));
  l.extent = l.radius * (1.0 + l.amplitude) * std::max({l.scale[0], l.scale[1], l.scale[2]});
  return l;
}

}  // namespace

void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = nlohmann::json{{"extents", {s.extents.d, s.extents.h, s.extents.w}},
                     {"spacing_mm", s.spacing_mm},
                     {"lesion_count", s.lesion_count},
                     {"diameter_log_mean", s.diameter_log_mean},
                     {"diameter_log_sd", s.diameter_log_sd},
                     {"diameter_min_mm", s.diameter_min_mm},
                     {"diameter_max_mm", s.diameter_max_mm},
                     {"shape", shape_name(s.shape)},
                     {"max_elongation", s.max_elongation},
                     {"lobulation", s.lobulation},
                     {"background", s.background},
                     {"texture", s.texture},
                     {"contrast", s.contrast},
                     {"speckle_shape", s.speckle_shape},
                     {"max_attempts", s.max_attempts}};
}

void from_json(const nlohmann::json& j, PhantomSpec& s) {
  PhantomSpec d = j.value("preset", std::string("default")) == "easy" ? PhantomSpec::easy() : PhantomSpec{};
  if (j.contains("extents")) {
    const auto& e = j.at("extents");
    if (!e.is_array() || e.size() != 3) throw ConfigError("phantom extents must be a 3-element array");
    d.extents = {e[0].get<Index>(), e[1].get<Index>(), e[2].get<Index>()};
  }
  d.spacing_mm = j.value("spacing_mm", d.spacing_mm);
  d.lesion_count = j.value("lesion_count", d.lesion_count);
  d.diameter_log_mean = j.value("diameter_log_mean", d.diameter_log_mean);
  d.diameter_log_sd = j.value("diameter_log_sd", d.diameter_log_sd);
  d.diameter_min_mm = j.value("diameter_min_mm", d.diameter_min_mm);
  d.diameter_max_mm = j.value("diameter_max_mm", d.diameter_max_mm);
  if (j.contains("shape")) d.shape = parse_shape(j.at("shape").get<std::string>());
  d.max_elongation = j.value("max_elongation", d.max_elongation);
  d.lobulation = j.value("lobulation", d.lobulation);
  d.background = j.value("background", d.background);
  d.texture = j.value("texture", d.texture);
  d.contrast = j.value("contrast", d.contrast);
  d.speckle_shape = j.value("speckle_shape", d.speckle_shape);
  d.max_attempts = j.value("max_attempts", d.max_attempts);
  s = d;
}

double sample_diameter(const PhantomSpec& spec, std::mt19937_64& rng) {
  if (spec.diameter_min_mm == spec.diameter_max_mm) return spec.diameter_min_mm;
  std::lognormal_distribution<double> dist(spec.diameter_log_mean, spec.diameter_log_sd);
  for (int i = 0; i < 100000; ++i) {
    const double d = dist(rng);
    if (d >= spec.diameter_min_mm && d <= spec.diameter_max_mm) return d;
  }
  throw GenerationError("diameter distribution has no mass inside the truncation bounds");
}

void draw_ball(Volume& mask, const Vec3& c, double r) {
  const Extent3 e = mask.extents;
  auto range = [&](int a, Index n) {
    const double lo = (c[static_cast<std::size_t>(a)] - r - mask.origin[static_cast<std::size_t>(a)]) / mask.spacing[static_cast<std::size_t>(a)];
    const double hi = (c[static_cast<std::size_t>(a)] + r - mask.origin[static_cast<std::size_t>(a)]) / mask.spacing[static_cast<std::size_t>(a)];
    return std::pair<Index, Index>{std::max<Index>(0, static_cast<Index>(std::ceil(lo))),
                                   std::min<Index>(n - 1, static_cast<Index>(std::floor(hi)))};
  };
  const auto [z0, z1] = range(0, e.d);
  const auto [y0, y1] = range(1, e.h);
  const auto [x0, x1] = range(2, e.w);
  for (Index z = z0; z <= z1; ++z)
    for (Index y = y0; y <= y1; ++y)
      for (Index x = x0; x <= x1; ++x) {
        const Vec3 p = mask.physical({z, y, x});
        const double dz = p[0] - c[0], dy = p[1] - c[1], dx = p[2] - c[2];
        if (dz * dz + dy * dy + dx * dx <= r * r) mask.at(z, y, x) = 1.0f;
      }
}

Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed, const std::string& case_id) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const double h = spec.spacing_mm;
  const Vec3 spacing{h, h, h};
  const Vec3 length{static_cast<double>(spec.extents.d) * h, static_cast<double>(spec.extents.h) * h,
                    static_cast<double>(spec.extents.w) * h};

  std::vector<Lesion> lesions;
  std::vector<double> diameters;
  for (int i = 0; i < spec.lesion_count; ++i) {
    const double d = sample_diameter(spec, rng);
    Lesion l = make_lesion(spec, d, rng);
    bool placed = false;
    for (int attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
      // Centres are measured from the grid corner at -h/2.
      Vec3 c;
      bool fits = true;
      for (std::size_t a = 0; a < 3; ++a) {
        if (length[a] < 2.0 * d) {
          fits = false;
          break;
        }
        std::uniform_real_distribution<double> u(d, length[a] - d);
        c[a] = u(rng) - h / 2.0;
      }
      if (!fits) break;
      placed = std::all_of(lesions.begin(), lesions.end(), [&](const Lesion& o) {
        const Vec3 dv{c[0] - o.center[0], c[1] - o.center[1], c[2] - o.center[2]};
        return std::sqrt(dot3(dv, dv)) > l.extent + o.extent + h;
      });
      if (placed) l.center = c;
    }
    if (!placed)
      throw GenerationError("could not place lesion " + std::to_string(i) + " of diameter " + std::to_string(d) +
                            " mm in " + to_string(spec.extents) + " voxels after " +
                            std::to_string(spec.max_attempts) + " attempts");
    lesions.push_back(std::move(l));
    diameters.push_back(d);
  }

  Phantom out;
  out.mask = Volume(spec.extents, spacing, VoxelType::u8, 0.0f);
  std::vector<std::vector<Index3>> members(lesions.size());
  for (std::size_t i = 0; i < lesions.size(); ++i) {
    const Lesion& l = lesions[i];
    auto range = [&](std::size_t a, Index n) {
      return std::pair<Index, Index>{
          std::max<Index>(0, static_cast<Index>(std::floor((l.center[a] - l.extent) / h))),
          std::min<Index>(n - 1, static_cast<Index>(std::ceil((l.center[a] + l.extent) / h)))};
    };
    const auto [z0, z1] = range(0, spec.extents.d);
    const auto [y0, y1] = range(1, spec.extents.h);
    const auto [x0, x1] = range(2, spec.extents.w);
    for (Index z = z0; z <= z1; ++z)
      for (Index y = y0; y <= y1; ++y)
        for (Index x = x0; x <= x1; ++x)
          if (l.inside({static_cast<double>(z) * h, static_cast<double>(y) * h, static_cast<double>(x) * h})) {
            out.mask.at(z, y, x) = 1.0f;
            members[i].push_back({z, y, x});
          }
  }

  // Smooth background: a few random low-frequency plane waves.
  struct Wave {
    Vec3 k;
    double phase;
  };
  std::vector<Wave> waves;
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  for (int i = 0; i < 4; ++i) {
    const Vec3 dir = unit_vector(rng);
    const double wavelength = std::uniform_real_distribution<double>(15.0, 40.0)(rng);
    const double f = 2.0 * std::numbers::pi / wavelength;
    waves.push_back({{dir[0] * f, dir[1] * f, dir[2] * f}, phase(rng)});
  }
  out.image = Volume(spec.extents, spacing, VoxelType::r32, 0.0f);
  std::gamma_distribution<double> speckle(spec.speckle_shape, 1.0 / spec.speckle_shape);
  for (Index z = 0; z < spec.extents.d; ++z)
    for (Index y = 0; y < spec.extents.h; ++y)
      for (Index x = 0; x < spec.extents.w; ++x) {
        const Vec3 p{static_cast<double>(z) * h, static_cast<double>(y) * h, static_cast<double>(x) * h};
        double t = 0;
        for (const Wave& w : waves) t += std::cos(dot3(w.k, p) + w.phase);
        double mean = spec.background * (1.0 + spec.texture * t / static_cast<double>(waves.size()));
        if (out.mask.at(z, y, x) > 0.5f) mean *= spec.contrast;
        out.image.at(z, y, x) = static_cast<float>(mean * speckle(rng));
      }

  std::bernoulli_distribution malignant(0.5);
  for (std::size_t i = 0; i < lesions.size(); ++i) {
    LesionAnnotation a;
    a.case_id = case_id;
    a.diameter_mm = diameters[i];
    a.label = malignant(rng) ? "malignant" : "benign";
    if (members[i].empty()) {
      a.center = out.mask.nearest_voxel(lesions[i].center);
    } else {
      double s[3] = {0, 0, 0};
      for (const Index3& v : members[i]) {
        s[0] += static_cast<double>(v.z);
        s[1] += static_cast<double>(v.y);
        s[2] += static_cast<double>(v.x);
      }
      const double n = static_cast<double>(members[i].size());
      a.center = {std::llround(s[0] / n), std::llround(s[1] / n), std::llround(s[2] / n)};
    }
    out.lesions.push_back(a);
  }
  return out;
}

}  // namespace abus
