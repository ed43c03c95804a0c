#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <tuple>

#include "abus/errors.hpp"
#include "abus/inference.hpp"
#include "abus/metrics.hpp"

using namespace abus;

namespace {

// Logits with channel 1 winning wherever `fg(input, i)` holds.
template <typename F>
TensorF logits_where(const TensorF& in, F fg) {
  Shape s = in.shape();
  s[1] = 2;
  TensorF out(s);
  const Index plane = in.spatial().volume();
  for (Index i = 0; i < plane; ++i) out[plane + i] = fg(in, i) ? 1.0f : -1.0f;
  return out;
}

Segmenter stub(std::function<bool(const TensorF&, Index)> fg, int* calls = nullptr) {
  Segmenter s;
  s.predict = [fg, calls](std::span<const TensorF> in) {
    if (calls) ++*calls;
    return logits_where(in[0], fg);
  };
  return s;
}

Volume image_of(const Extent3& e, double h = 0.6) { return Volume(e, {h, h, h}); }

// Shell membership counted by enumerating each face separately.
std::int64_t brute_shell(const Volume& m) {
  std::set<std::tuple<Index, Index, Index>> shell;
  const Extent3 e = m.extents;
  for (Index a = 0; a < e.h; ++a)
    for (Index b = 0; b < e.w; ++b) shell.insert({0, a, b}), shell.insert({e.d - 1, a, b});
  for (Index a = 0; a < e.d; ++a)
    for (Index b = 0; b < e.w; ++b) shell.insert({a, 0, b}), shell.insert({a, e.h - 1, b});
  for (Index a = 0; a < e.d; ++a)
    for (Index b = 0; b < e.h; ++b) shell.insert({a, b, 0}), shell.insert({a, b, e.w - 1});
  std::int64_t n = 0;
  for (const auto& [z, y, x] : shell) n += m.at(z, y, x) > 0.5f;
  return n;
}

// A bright ball of physical radius `r_mm` on a dark background.
Volume ball_image(const Extent3& e, const Index3& c, double r_mm, double h = 0.6) {
  Volume v = image_of(e, h);
  for (Index z = 0; z < e.d; ++z)
    for (Index y = 0; y < e.h; ++y)
      for (Index x = 0; x < e.w; ++x) {
        const double dz = double(z - c.z) * h, dy = double(y - c.y) * h, dx = double(x - c.x) * h;
        v.at(z, y, x) = dz * dz + dy * dy + dx * dx <= r_mm * r_mm ? 100.0f : 10.0f;
      }
  return v;
}

const ScaleSchedule kDefaultSchedule{0.9, 0.8, 0.7, 0.6, 0.5};

}  // namespace

TEST(BoundaryCount, Examples) {
  Volume m({4, 5, 6}, {1, 1, 1}, VoxelType::u8);
  EXPECT_EQ(boundary_positive_count(m), 0);
  m.at(0, 0, 0) = 1;
  EXPECT_EQ(boundary_positive_count(m), 1);
  m.at(2, 2, 2) = 1;
  EXPECT_EQ(boundary_positive_count(m), 1);
  std::fill(m.data.begin(), m.data.end(), 1.0f);
  EXPECT_EQ(boundary_positive_count(m), 4 * 5 * 6 - 2 * 3 * 4);
}

TEST(BoundaryCount, MatchesShellEnumeration) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<Index> ext(1, 7);
  std::bernoulli_distribution on(0.3);
  for (int t = 0; t < 100; ++t) {
    Volume m({ext(rng), ext(rng), ext(rng)}, {1, 1, 1}, VoxelType::u8);
    for (float& v : m.data) v = on(rng);
    ASSERT_EQ(boundary_positive_count(m), brute_shell(m)) << t;
  }
}

TEST(Schedule, ParseAndValidate) {
  EXPECT_EQ(parse_schedule("0.9, 0.8,0.7 ,0.6,0.5"), kDefaultSchedule);
  EXPECT_TRUE(parse_schedule("").empty());
  EXPECT_THROW(parse_schedule("0.9,0.9"), ConfigError);
  EXPECT_THROW(parse_schedule("0.5,0.7"), ConfigError);
  EXPECT_THROW(parse_schedule("1.0"), ConfigError);
  EXPECT_THROW(parse_schedule("0.9,abc"), ConfigError);
  EXPECT_THROW(parse_schedule("0.9x"), ConfigError);
}

TEST(Rescaling, BackgroundStubAcceptsImmediately) {
  int calls = 0;
  const Segmenter s = stub([](const TensorF&, Index) { return false; }, &calls);
  const SegmentationResult r = segment_with_rescaling(s, image_of({20, 20, 20}), {10, 10, 10}, {8, 8, 8}, kDefaultSchedule);
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(r.model_calls, 1);
  ASSERT_EQ(r.trace.size(), 1u);
  EXPECT_TRUE(r.trace[0].accepted);
  EXPECT_EQ(r.trace[0].boundary_positive, 0);
  EXPECT_EQ(r.trace[0].scale, 1.0);
  EXPECT_TRUE(r.warnings.empty());
  EXPECT_EQ(count_positive(r.mask), 0);
}

TEST(Rescaling, ForegroundStubExhaustsScheduleWithWarning) {
  int calls = 0;
  const Segmenter s = stub([](const TensorF&, Index) { return true; }, &calls);
  const Volume v = image_of({20, 20, 20});
  const SegmentationResult r = segment_with_rescaling(s, v, {10, 10, 10}, {8, 8, 8}, kDefaultSchedule);
  EXPECT_EQ(calls, 6);
  EXPECT_EQ(r.model_calls, 6);
  ASSERT_EQ(r.trace.size(), 6u);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(r.trace[k].scale, k == 0 ? 1.0 : kDefaultSchedule[k - 1]);
    EXPECT_FALSE(r.trace[k].accepted);
    EXPECT_EQ(r.trace[k].boundary_positive, 8 * 8 * 8 - 6 * 6 * 6);
  }
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("schedule exhausted"), std::string::npos);
  // The last attempt covers 8 voxels of spacing 1.2 mm: 16 native voxels per axis.
  EXPECT_EQ(count_positive(r.mask), 16 * 16 * 16);
  EXPECT_EQ(r.mask.spacing, v.spacing);
  EXPECT_EQ(r.mask.extents, v.extents);
}

TEST(Rescaling, CentredBallIsPlacedExactly) {
  // The stub ignores its input and draws a radius-3 ball at the patch centre.
  const Extent3 pe{12, 12, 12};
  auto inside = [pe](Index i) {
    const Index z = i / (pe.h * pe.w), y = (i / pe.w) % pe.h, x = i % pe.w;
    const Index dz = z - pe.d / 2, dy = y - pe.h / 2, dx = x - pe.w / 2;
    return dz * dz + dy * dy + dx * dx <= 9;
  };
  const Segmenter s = stub([&](const TensorF&, Index i) { return inside(i); });
  const Volume v = image_of({30, 28, 26});
  const Index3 c{14, 11, 16};
  const SegmentationResult r = segment_with_rescaling(s, v, c, pe, kDefaultSchedule);
  ASSERT_EQ(r.trace.size(), 1u);
  EXPECT_TRUE(r.trace[0].accepted);
  Volume expected(v.extents, v.spacing, VoxelType::u8);
  for (Index z = 0; z < pe.d; ++z)
    for (Index y = 0; y < pe.h; ++y)
      for (Index x = 0; x < pe.w; ++x)
        if (inside((z * pe.h + y) * pe.w + x)) expected.at(c.z - pe.d / 2 + z, c.y - pe.h / 2 + y, c.x - pe.w / 2 + x) = 1;
  EXPECT_EQ(dice(r.mask, expected), 1.0);
}

TEST(Rescaling, LargeBallIsAcceptedAfterDownsampling) {
  // Threshold stub on a bright ball of radius 4.2 mm: at 0.6 mm spacing the
  // ball spans 15 voxels and overflows a 12-voxel patch, so a coarser scale
  // must be reached before the prediction fits.
  const Segmenter s = stub([](const TensorF& in, Index i) { return in[i] > 0.0f; });
  const Index3 c{20, 20, 20};
  const Volume v = ball_image({40, 40, 40}, c, 4.2);
  const SegmentationResult r = segment_with_rescaling(s, v, c, {12, 12, 12}, kDefaultSchedule);
  ASSERT_GT(r.trace.size(), 1u);
  EXPECT_TRUE(r.trace.back().accepted);
  EXPECT_TRUE(r.warnings.empty());
  for (std::size_t k = 0; k + 1 < r.trace.size(); ++k) EXPECT_GT(r.trace[k].boundary_positive, 0);
  Volume truth(v.extents, v.spacing, VoxelType::u8);
  for (std::size_t i = 0; i < v.data.size(); ++i) truth.data[i] = v.data[i] > 50.0f;
  EXPECT_GT(dice(r.mask, truth), 0.85);
}

TEST(Rescaling, RandomStubsAreSoundAndBounded) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> radius(0.5, 6.0);
  std::uniform_int_distribution<Index> offset(-3, 3);
  std::bernoulli_distribution noisy(0.3);
  for (int t = 0; t < 200; ++t) {
    const Index3 c{16 + offset(rng), 16 + offset(rng), 16 + offset(rng)};
    const Volume v = ball_image({32, 32, 32}, c, radius(rng));
    const std::uint64_t salt = rng();
    const bool noise = noisy(rng);
    TensorF last;
    Segmenter s;
    s.divisor = 2;
    s.predict = [&](std::span<const TensorF> in) {
      std::mt19937_64 local(salt + static_cast<std::uint64_t>(in[0].size()));
      std::bernoulli_distribution flip(0.002);
      last = logits_where(in[0], [&](const TensorF& x, Index i) { return (x[i] > 0.0f) != (noise && flip(local)); });
      return last;
    };
    const Extent3 pe{10, 10, 10};
    const SegmentationResult r = segment_with_rescaling(s, v, c, pe, kDefaultSchedule);
    ASSERT_LE(r.model_calls, 6);
    ASSERT_EQ(static_cast<std::size_t>(r.model_calls), r.trace.size());
    const Volume labels = labels_from_logits(last, Volume(pe, {1, 1, 1}, VoxelType::u8));
    int accepted = 0;
    for (const auto& e : r.trace) accepted += e.accepted;
    if (r.warnings.empty()) {
      ASSERT_EQ(brute_shell(labels), 0) << t;
      ASSERT_EQ(accepted, 1);
      ASSERT_TRUE(r.trace.back().accepted);
    } else {
      ASSERT_EQ(accepted, 0);
      ASSERT_EQ(r.trace.size(), 6u);
    }
    // Geometry: positives lie inside the physical box of the last patch.
    const double scale = r.trace.back().scale;
    const Volume grid = scale == 1.0 ? v : resample(v, scale, Interp::trilinear);
    const Volume patch = crop_patch(grid, scale == 1.0 ? c : grid.nearest_voxel(v.physical(c)), pe);
    for (Index z = 0; z < v.extents.d; ++z)
      for (Index y = 0; y < v.extents.h; ++y)
        for (Index x = 0; x < v.extents.w; ++x) {
          if (r.mask.at(z, y, x) != 1.0f) continue;
          const Vec3 p = v.physical({z, y, x});
          for (std::size_t a = 0; a < 3; ++a) {
            const Index n = a == 0 ? pe.d : a == 1 ? pe.h : pe.w;
            ASSERT_GE(p[a], patch.origin[a] - patch.spacing[a] / 2 - 1e-9);
            ASSERT_LE(p[a], patch.origin[a] + (double(n) - 0.5) * patch.spacing[a] + 1e-9);
          }
        }
  }
}

TEST(Rescaling, DeterministicAndDualPathInputs) {
  std::vector<Shape> seen;
  Segmenter s;
  s.paths = 2;
  s.predict = [&](std::span<const TensorF> in) {
    for (const auto& t : in) seen.push_back(t.shape());
    return logits_where(in[0], [](const TensorF& x, Index i) { return x[i] > 0.0f; });
  };
  const Index3 c{16, 16, 16};
  const Volume v = ball_image({32, 32, 32}, c, 2.0);
  const SegmentationResult a = segment_with_rescaling(s, v, c, {8, 8, 8}, kDefaultSchedule);
  ASSERT_EQ(seen.size(), 2u * static_cast<std::size_t>(a.model_calls));
  for (const Shape& sh : seen) EXPECT_EQ(sh, (Shape{1, 1, 8, 8, 8}));
  const SegmentationResult b = segment_with_rescaling(s, v, c, {8, 8, 8}, kDefaultSchedule);
  EXPECT_EQ(a.mask.data, b.mask.data);
  EXPECT_EQ(a.trace.size(), b.trace.size());
}

TEST(Rescaling, Contracts) {
  Segmenter s = stub([](const TensorF&, Index) { return false; });
  s.divisor = 4;
  const Volume v = image_of({16, 16, 16});
  EXPECT_THROW(segment_with_rescaling(s, v, {8, 8, 8}, {8, 8, 6}, kDefaultSchedule), ContractViolation);
  EXPECT_THROW(segment_with_rescaling(s, v, {8, 8, 16}, {8, 8, 8}, kDefaultSchedule), ContractViolation);
  EXPECT_THROW(segment_with_rescaling(s, v, {8, 8, 8}, {8, 8, 8}, {0.5, 0.7}), ConfigError);
  EXPECT_NO_THROW(segment_with_rescaling(s, v, {8, 8, 8}, {8, 8, 8}, kDefaultSchedule));
}

TEST(Segment2d, CallAccountingAndPerSliceThreshold) {
  // Integer intensities with a non-integer patch mean, so thresholding at the
  // mean never ties.
  Volume v = image_of({9, 20, 20});
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> u(0, 100);
  for (float& x : v.data) x = static_cast<float>(u(rng));
  int calls = 0;
  Segmenter s = stub([](const TensorF& in, Index i) { return in[i] > 0.0f; }, &calls);
  s.dimensionality = 2;
  s.divisor = 4;
  const std::vector<Index> slices{1, 2, 4, 6, 7};
  const Index3 c{4, 10, 9};
  const SegmentationResult r = segment_2d(s, v, slices, 8, 12, c);
  EXPECT_EQ(calls, 5);
  EXPECT_EQ(r.model_calls, 5);
  EXPECT_EQ(r.mask.extents, v.extents);
  EXPECT_TRUE(r.warnings.empty());
  const Index y0 = c.y - 4, x0 = c.x - 6;
  for (Index z = 0; z < v.extents.d; ++z) {
    const bool listed = std::find(slices.begin(), slices.end(), z) != slices.end();
    double mean = 0;
    for (Index y = 0; y < 8; ++y)
      for (Index x = 0; x < 12; ++x) mean += v.at(z, y0 + y, x0 + x);
    mean /= 96.0;
    for (Index y = 0; y < v.extents.h; ++y)
      for (Index x = 0; x < v.extents.w; ++x) {
        const bool in_patch = y >= y0 && y < y0 + 8 && x >= x0 && x < x0 + 12;
        const float want = listed && in_patch && v.at(z, y, x) > mean ? 1.0f : 0.0f;
        ASSERT_EQ(r.mask.at(z, y, x), want) << z << "," << y << "," << x;
      }
  }
}

TEST(Segment2d, NoPredictionGivesEmptyMask) {
  Segmenter s = stub([](const TensorF&, Index) { return false; });
  s.dimensionality = 2;
  const SegmentationResult r = segment_2d(s, image_of({5, 16, 16}), {0, 3}, 8, 8, {2, 8, 8});
  EXPECT_EQ(count_positive(r.mask), 0);
  EXPECT_TRUE(r.warnings.empty());
  EXPECT_THROW(segment_2d(s, image_of({5, 16, 16}), {}, 8, 8, {2, 8, 8}), ConfigError);
  EXPECT_THROW(segment_2d(s, image_of({5, 16, 16}), {5}, 8, 8, {2, 8, 8}), ContractViolation);
}

TEST(Segment2d, ReceivesRankFourSlices) {
  Shape seen;
  Segmenter s;
  s.dimensionality = 2;
  s.predict = [&](std::span<const TensorF> in) {
    seen = in[0].shape();
    return logits_where(in[0], [](const TensorF&, Index) { return false; });
  };
  segment_2d(s, image_of({3, 16, 16}), {1}, 8, 4, {1, 8, 8});
  EXPECT_EQ(seen, (Shape{1, 1, 8, 4}));
}
