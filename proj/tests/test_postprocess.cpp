#include <gtest/gtest.h>

#include "cased/postprocess.hpp"
#include "oracles.hpp"

using namespace cased;

namespace {

Volume random_prob(Dims d, uint64_t seed, Vec3 spacing = {1, 1, 1}, Vec3 origin = {}) {
  Volume v(d, spacing, origin);
  Rng rng(seed);
  for (auto& x : v.data()) x = float(rng.uniform());
  return v;
}

LabelMap random_binary(Dims d, double density, uint64_t seed) {
  LabelMap m(d, Vec3{1, 1, 1});
  Rng rng(seed);
  for (auto& x : m.data()) x = rng.bernoulli(density);
  return m;
}

}  // namespace

TEST(Threshold, StrictAndVoxelwise) {
  Volume v(Dims::cube(4), Vec3{1, 1, 1});
  EXPECT_EQ(count_positive(threshold_map(v, 0.5)), 0u);
  v(1, 2, 3) = 0.5f;
  v(0, 0, 0) = 0.51f;
  const auto b = threshold_map(v, 0.5);
  EXPECT_EQ(b(1, 2, 3), 0);
  EXPECT_EQ(b(0, 0, 0), 1);

  const auto r = random_prob(Dims::cube(10), 3);
  const auto rb = threshold_map(r, 0.3);
  for (size_t i = 0; i < r.size(); ++i) ASSERT_EQ(rb[i], r[i] > 0.3f ? 1 : 0);
  EXPECT_THROW(threshold_map(r, 0.0), ValidationError);
  EXPECT_THROW(threshold_map(r, 1.0), ValidationError);
}

TEST(Threshold, RaisingNeverAddsVoxels) {
  const auto r = random_prob(Dims::cube(12), 5);
  size_t prev = r.size();
  for (double t = 0.05; t < 1; t += 0.05) {
    const size_t n = count_positive(threshold_map(r, t));
    EXPECT_LE(n, prev);
    prev = n;
  }
}

TEST(Components, SingleVoxelAndCorner) {
  LabelMap m(Dims::cube(5), Vec3{1, 1, 1});
  m(2, 2, 2) = 1;
  auto cc = connected_components(m, 26);
  EXPECT_EQ(cc.count, 1);
  EXPECT_EQ(cc.sizes, (std::vector<size_t>{1}));
  m(3, 3, 3) = 1;  // shares a corner only
  EXPECT_EQ(connected_components(m, 26).count, 1);
  EXPECT_EQ(connected_components(m, 6).count, 2);
  m(3, 3, 2) = 1;  // shares an edge with (2,2,2), a face with (3,3,3)
  EXPECT_EQ(connected_components(m, 6).count, 2);
  EXPECT_EQ(connected_components(m, 26).count, 1);
  EXPECT_THROW(connected_components(m, 18), ValidationError);
}

TEST(Components, MatchPairwiseOracle) {
  for (int conn : {6, 26})
    for (uint64_t seed = 1; seed <= 3; ++seed) {
      const auto m = random_binary(Dims::cube(16), conn == 6 ? 0.3 : 0.12, seed);
      const auto cc = connected_components(m, conn);
      const auto ref = oracle::pairwise_components(m, conn);
      int32_t max_ref = 0;
      for (size_t i = 0; i < m.size(); ++i) {
        ASSERT_EQ(cc.labels[i], ref[i]) << conn << " " << i;
        max_ref = std::max(max_ref, int32_t(ref[i]));
      }
      EXPECT_EQ(cc.count, max_ref);
      size_t total = 0;
      for (size_t s : cc.sizes) total += s;
      EXPECT_EQ(total, count_positive(m));
    }
}

TEST(Candidates, SingleVoxel) {
  Volume p(Dims::cube(6), Vec3{2, 2, 2}, Vec3{-10, 0, 5});
  p(1, 2, 3) = 0.9f;
  const GridTransform native{Vec3{-10, 0, 5}, Vec3{0.5, 1.0, 2.0}};
  const auto c = detect_candidates(p, native);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_NEAR(c[0].confidence, 0.9, 1e-7);
  EXPECT_EQ(c[0].component_size, 1u);
  EXPECT_NEAR(c[0].position_mm.x, -8.0, 1e-9);
  EXPECT_NEAR(c[0].position_mm.y, 4.0, 1e-9);
  EXPECT_NEAR(c[0].position_mm.z, 11.0, 1e-9);
  EXPECT_NEAR(c[0].native_voxel.x, 4.0, 1e-9);
  EXPECT_NEAR(c[0].native_voxel.y, 4.0, 1e-9);
  EXPECT_NEAR(c[0].native_voxel.z, 3.0, 1e-9);
}

TEST(Candidates, SymmetricPairAtMidpoint) {
  Volume p(Dims::cube(6), Vec3{1, 1, 1});
  p(2, 3, 3) = 0.8f;
  p(3, 3, 3) = 0.8f;
  const auto c = detect_candidates(p, p.transform());
  ASSERT_EQ(c.size(), 1u);
  EXPECT_NEAR(c[0].position_mm.x, 2.5, 1e-9);
  EXPECT_NEAR(c[0].position_mm.y, 3.0, 1e-9);
}

TEST(Candidates, WeightedCenterMatchesDirectSum) {
  Volume p(Dims::cube(8), Vec3{1.25, 1.25, 1.25}, Vec3{3, -2, 7});
  const std::vector<std::pair<Index3, float>> vox = {
      {{2, 2, 2}, 0.95f}, {{3, 2, 2}, 0.6f}, {{3, 3, 2}, 0.7f}, {{3, 3, 3}, 0.99f}, {{4, 3, 3}, 0.55f}};
  Vec3 num{};
  double den = 0, mean = 0;
  for (const auto& [i, v] : vox) {
    p(i.x, i.y, i.z) = v;
    num = num + double(v) * p.transform().voxel_to_world(i);
    den += v;
    mean += double(v) / double(vox.size());
  }
  const auto c = detect_candidates(p, GridTransform{Vec3{0, 0, 0}, Vec3{0.7, 0.7, 2.5}});
  ASSERT_EQ(c.size(), 1u);
  for (int a = 0; a < 3; ++a) EXPECT_NEAR(c[0].position_mm[a], num[a] / den, 1e-9);
  EXPECT_NEAR(c[0].confidence, mean, 1e-7);

  DetectionParams unweighted;
  unweighted.center = CenterOfMass::unweighted;
  const auto u = detect_candidates(p, p.transform(), unweighted);
  EXPECT_NEAR(u[0].position_mm.x, 3 + 1.25 * (2 + 3 + 3 + 3 + 4) / 5.0, 1e-9);
}

TEST(Candidates, SortedAboveThresholdAndOnePerComponent) {
  const auto p = random_prob(Dims::cube(14), 8);
  for (double t : {0.5, 0.8, 0.95}) {
    const auto cc = connected_components(threshold_map(p, t), 26);
    const auto c = detect_candidates(p, p.transform(), {t, 26, CenterOfMass::probability_weighted});
    EXPECT_EQ(c.size(), size_t(cc.count));
    for (size_t i = 0; i < c.size(); ++i) {
      EXPECT_GT(c[i].confidence, t);
      if (i) EXPECT_GE(c[i - 1].confidence, c[i].confidence);
    }
  }
}

TEST(Candidates, InconsistentTransformRejected) {
  const auto p = random_prob(Dims::cube(6), 1);
  const auto cc = connected_components(threshold_map(p, 0.5));
  GridTransform wrong = p.transform();
  wrong.spacing.x = 2;
  EXPECT_THROW(components_to_candidates(p, cc, wrong, p.transform()), ValidationError);
  GridTransform degenerate = p.transform();
  degenerate.spacing.y = 0;
  EXPECT_THROW(components_to_candidates(p, cc, p.transform(), degenerate), ValidationError);
}

TEST(CandidateCsv, RoundTripAndErrors) {
  const std::vector<CandidateRow> rows = {{"a", {1.5, -2.25, 3.0}, 0.912345}, {"b", {0, 0, 0}, 0.5}};
  const std::string text = candidates_csv(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), "scan_id,x_mm,y_mm,z_mm,probability");
  EXPECT_NE(text.find("a,1.500000,-2.250000,3.000000,0.912345"), std::string::npos);
  const auto back = parse_candidates_csv(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].scan_id, "a");
  EXPECT_DOUBLE_EQ(back[0].position_mm.y, -2.25);
  EXPECT_DOUBLE_EQ(back[1].probability, 0.5);
  EXPECT_THROW(parse_candidates_csv("id,x,y,z,p\n"), ValidationError);
  EXPECT_THROW(parse_candidates_csv("scan_id,x_mm,y_mm,z_mm,probability\na,1,2,3\n"), ValidationError);
  EXPECT_THROW(parse_candidates_csv("scan_id,x_mm,y_mm,z_mm,probability\na,1,2,x,0.5\n"), ValidationError);
  EXPECT_THROW(parse_candidates_csv(""), ValidationError);
}
