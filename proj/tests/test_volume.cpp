#include <gtest/gtest.h>

#include "cased/io.hpp"
#include "oracles.hpp"

using namespace cased;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cased_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Volume random_volume(Dims d, Vec3 spacing, uint64_t seed) {
  Volume v(d, spacing, Vec3{-10.0, 4.5, 2.0});
  Rng rng(seed);
  for (auto& x : v.data()) x = static_cast<float>(rng.uniform(-1000, 400));
  return v;
}

}  // namespace

TEST(Rng, DeterministicAndStateRoundTrip) {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.next(), b.next());
  const std::string s = a.state();
  const uint64_t x = a.next();
  b.set_state(s);
  EXPECT_EQ(b.next(), x);
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  for (int i = 0; i < 1000; ++i) ASSERT_LT(a.below(7), 7u);
}

TEST(RescaleIntensity, WindowEndpointsAndMidpoint) {
  Volume v(Dims{3, 1, 1}, Vec3{1, 1, 1});
  v[0] = -1000;
  v[1] = 400;
  v[2] = -300;
  const Volume r = rescale_intensity(v, {-1000, 400});
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[1], 1.0f);
  EXPECT_NEAR(r[2], 0.5f, 1e-7);
  EXPECT_TRUE(r.same_geometry(v));
  EXPECT_THROW(rescale_intensity(v, {5, 5}), ValidationError);
}

TEST(RescaleIntensity, OutputInUnitRangeAndIdempotentOnUnitWindow) {
  const Volume v = random_volume(Dims::cube(6), {1, 1, 1}, 3);
  const Volume r = rescale_intensity(v);
  for (float x : r.data()) ASSERT_TRUE(x >= 0.0f && x <= 1.0f);
  EXPECT_EQ(rescale_intensity(r, {0, 1}), r);
}

TEST(Resample, DimsFollowRounding) {
  const Volume v(Dims::cube(40), Vec3{2.5, 2.5, 2.5});
  const auto r = resample_isotropic(v, 1.25, Interpolation::trilinear);
  EXPECT_EQ(r.grid.dims(), Dims::cube(80));
  EXPECT_EQ(r.grid.origin(), v.origin());
}

TEST(Resample, ConstantStaysConstant) {
  Volume v(Dims{7, 9, 5}, Vec3{0.7, 1.1, 2.0}, Vec3{}, -123.5f);
  for (double t : {0.5, 1.25, 3.0}) {
    const auto r = resample_isotropic(v, t, Interpolation::trilinear);
    for (float x : r.grid.data()) ASSERT_FLOAT_EQ(x, -123.5f);
  }
}

TEST(Resample, MatchesBruteForceTrilinear) {
  const Volume v = random_volume(Dims::cube(31), {1, 1, 1}, 11);
  const auto r = resample_isotropic(v, 1.25, Interpolation::trilinear);
  ASSERT_EQ(r.grid.dims(), Dims::cube(25));
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const Index3 p{int64_t(rng.below(25)), int64_t(rng.below(25)), int64_t(rng.below(25))};
    const Vec3 src = r.target_to_source_voxel(Vec3{double(p.x), double(p.y), double(p.z)});
    const double expect = oracle::trilinear(v.values(), src);
    EXPECT_NEAR(r.grid[p], expect, 1e-6 * std::max(1.0, std::abs(expect))) << "point " << i;
  }
}

TEST(Resample, OwnSpacingIsIdentityForNearest) {
  LabelMap l(Dims{5, 6, 7}, Vec3{1.25, 1.25, 1.25});
  Rng rng(2);
  for (auto& x : l.data()) x = uint8_t(rng.below(2));
  const auto r = resample_isotropic(l, 1.25, Interpolation::nearest);
  EXPECT_EQ(r.grid.dims(), l.dims());
  EXPECT_EQ(r.grid.values(), l.values());
}

TEST(Resample, RejectsEmptyGrid) {
  const Volume v(Dims::cube(2), Vec3{1, 1, 1});
  EXPECT_THROW(resample_isotropic(v, 10.0, Interpolation::trilinear), ValidationError);
  EXPECT_THROW(resample_isotropic(v, 0.0, Interpolation::trilinear), ValidationError);
}

TEST(RasterizeSphere, SmallRadiiCounts) {
  const Volume g(Dims::cube(9), Vec3{1.25, 1.25, 1.25});
  const Vec3 c = g.transform().voxel_to_world(Index3{4, 4, 4});
  EXPECT_EQ(count_positive(rasterize_sphere(g, c, 0.4 * 1.25)), 1u);
  EXPECT_EQ(count_positive(rasterize_sphere(g, c, 1.25 * 1.25)), 7u);
}

TEST(RasterizeSphere, MatchesFullScanAndIsMonotone) {
  const Volume g(Dims{14, 12, 10}, Vec3{0.8, 1.0, 1.3}, Vec3{3, -2, 1});
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    const Vec3 c{rng.uniform(0, 14), rng.uniform(-4, 12), rng.uniform(0, 14)};
    size_t prev = 0;
    for (double r : {0.5, 1.0, 2.0, 3.5, 5.0}) {
      WarningCapture quiet;
      const size_t n = count_positive(rasterize_sphere(g, c, r));
      EXPECT_EQ(n, oracle::sphere_count(g, c, r));
      EXPECT_GE(n, prev);
      prev = n;
    }
  }
}

TEST(RasterizeSphere, OutsideGridWarns) {
  const Volume g(Dims::cube(4), Vec3{1, 1, 1});
  WarningCapture cap;
  EXPECT_EQ(count_positive(rasterize_sphere(g, Vec3{100, 100, 100}, 2.0)), 0u);
  EXPECT_EQ(cap.messages().size(), 1u);
}

TEST(ReferenceLabels, SingleRaterAndIntersection) {
  const Volume g(Dims::cube(4), Vec3{1, 1, 1});
  AnnotationSet one;
  one.nodules.push_back({0, {1, 1, 1}, 1.0, 1, {{3, 5, 9}}});
  const LabelMap a = build_reference_labels(g, one);
  EXPECT_EQ(count_positive(a), 3u);
  EXPECT_TRUE(a[3] && a[5] && a[9]);

  AnnotationSet two;
  two.nodules.push_back({0, {1, 1, 1}, 1.0, 2, {{3, 5}, {5, 9}}});
  const LabelMap b = build_reference_labels(g, two);
  EXPECT_EQ(count_positive(b), 1u);
  EXPECT_TRUE(b[5]);
}

TEST(ReferenceLabels, MatchesSetArithmeticOracle) {
  const Volume g(Dims::cube(8), Vec3{1, 1, 1});
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    AnnotationSet ann;
    std::set<int64_t> expected;
    std::set<int64_t> all_union;
    for (int k = 0; k < 3; ++k) {
      Nodule n{k, {1, 1, 1}, 1.0, 1, {}};
      // nodule k lives in the slab z in [2k, 2k+2) so nodules are disjoint
      const int raters = 1 + int(rng.below(4));
      std::vector<std::set<int64_t>> sets;
      for (int r = 0; r < raters; ++r) {
        std::set<int64_t> s;
        for (int64_t i = 0; i < 128; ++i)
          if (rng.uniform() < 0.7) s.insert(128 * k + i);
        sets.push_back(s);
        n.rater_masks.emplace_back(s.begin(), s.end());
        all_union.insert(s.begin(), s.end());
      }
      std::set<int64_t> inter = sets[0];
      for (size_t r = 1; r < sets.size(); ++r) {
        std::set<int64_t> t;
        std::set_intersection(inter.begin(), inter.end(), sets[r].begin(), sets[r].end(), std::inserter(t, t.end()));
        inter = t;
      }
      expected.insert(inter.begin(), inter.end());
      ann.nodules.push_back(n);
    }
    const LabelMap l = build_reference_labels(g, ann);
    EXPECT_EQ(count_positive(l), expected.size());
    for (size_t i = 0; i < l.size(); ++i) {
      ASSERT_EQ(bool(l[i]), expected.count(int64_t(i)) == 1) << "voxel " << i;
      if (l[i]) ASSERT_TRUE(all_union.count(int64_t(i)));
    }
  }
}

TEST(ReferenceLabels, MaskOutsideGridThrows) {
  const Volume g(Dims::cube(2), Vec3{1, 1, 1});
  AnnotationSet ann;
  ann.nodules.push_back({0, {0, 0, 0}, 1.0, 1, {{8}}});
  EXPECT_THROW(build_reference_labels(g, ann), ValidationError);
}

TEST(Synthetic, ZeroNodulesGiveEmptyLabels) {
  SyntheticSpec s;
  s.dims = Dims::cube(24);
  s.nodules_min = s.nodules_max = 0;
  const auto c = synthesize_case(s, 1);
  EXPECT_EQ(count_positive(c.labels), 0u);
  EXPECT_TRUE(c.annotations.nodules.empty());
}

TEST(Synthetic, DeterministicPerSeed) {
  SyntheticSpec s;
  s.dims = Dims::cube(32);
  const auto a = synthesize_case(s, 42), b = synthesize_case(s, 42), c = synthesize_case(s, 43);
  EXPECT_EQ(a.image.values(), b.image.values());
  EXPECT_EQ(a.labels.values(), b.labels.values());
  EXPECT_EQ(a.annotations, b.annotations);
  EXPECT_NE(a.image.values(), c.image.values());
}

TEST(Synthetic, StandardSpecUnderOnePercentAndConsistent) {
  const SyntheticSpec s;  // 3 nodules, 2-4 mm, 64^3 @ 1.25 mm
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const auto c = synthesize_case(s, seed);
    const double frac = double(count_positive(c.labels)) / double(c.labels.size());
    EXPECT_LT(frac, 0.01);
    EXPECT_EQ(c.annotations.nodules.size(), 3u);
    EXPECT_EQ(c.labels.values(), build_sphere_labels(c.labels, c.annotations).values());
    for (const auto& n : c.annotations.nodules) {
      const Vec3 v = c.labels.transform().world_to_voxel(n.center_mm);
      EXPECT_TRUE(c.labels(std::llround(v.x), std::llround(v.y), std::llround(v.z)));
    }
  }
}

TEST(Synthetic, ImpossiblePlacementThrows) {
  SyntheticSpec s;
  s.dims = Dims::cube(8);
  s.nodules_min = s.nodules_max = 5;
  s.max_retries = 50;
  EXPECT_THROW(synthesize_case(s, 0), ValidationError);
}

TEST(VolumeIo, RoundTripIsExact) {
  const fs::path dir = scratch_dir("io_roundtrip");
  const Volume v = random_volume(Dims{5, 4, 3}, {0.5, 0.75, 2.5}, 8);
  save_volume(v, dir / "img");
  const Volume w = load_volume(dir / "img");
  EXPECT_EQ(w.values(), v.values());
  EXPECT_EQ(w.transform(), v.transform());

  LabelMap l = LabelMap::like(v);
  l[3] = 1;
  save_labels(l, dir / "lab");
  EXPECT_EQ(load_labels(dir / "lab").values(), l.values());
}

TEST(VolumeIo, DecodesZeroPayload) {
  const fs::path dir = scratch_dir("io_zero");
  detail::write_text(dir / "z.json", R"({"dims":[2,2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"f32le"})");
  detail::write_text(dir / "z.raw", std::string(32, '\0'));
  const Volume v = load_volume(dir / "z");
  EXPECT_EQ(v.size(), 8u);
  for (float x : v.data()) EXPECT_EQ(x, 0.0f);
}

TEST(VolumeIo, RejectsBadFiles) {
  const fs::path dir = scratch_dir("io_bad");
  const std::string header = R"({"dims":[2,2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"f32le"})";
  detail::write_text(dir / "short.json", header);
  detail::write_text(dir / "short.raw", std::string(31, '\0'));
  EXPECT_THROW(load_volume(dir / "short"), ValidationError);

  detail::write_text(dir / "dt.json", R"({"dims":[2,2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"f64"})");
  detail::write_text(dir / "dt.raw", std::string(64, '\0'));
  EXPECT_THROW(load_volume(dir / "dt"), ValidationError);

  detail::write_text(dir / "bad.json", "{\"dims\": [2,2]");
  EXPECT_THROW(load_volume(dir / "bad"), ValidationError);

  EXPECT_THROW(load_volume(dir / "missing"), IoError);
}

TEST(AnnotationIo, RoundTrip) {
  const fs::path dir = scratch_dir("io_ann");
  AnnotationSet a;
  a.nodules.push_back({3, {1.5, -2.0, 7.25}, 3.5, 3, {{1, 2, 3}, {2, 3}}});
  a.nodules.push_back({4, {0, 0, 0}, 1.0, 1, {}});
  save_annotations(a, dir / "ann.json");
  EXPECT_EQ(load_annotations(dir / "ann.json"), a);
  detail::write_text(dir / "neg.json", R"([{"id":0,"center_mm":[0,0,0],"radius_mm":-1}])");
  EXPECT_THROW(load_annotations(dir / "neg.json"), ValidationError);
}
