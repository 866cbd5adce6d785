#include <gtest/gtest.h>

#include "cased/eval.hpp"
#include "oracles.hpp"

using namespace cased;

TEST(Match, HitBoundary) {
  ScanResult s{"s", {{7, {0, 0, 0}, 4, true}}, {{{0, 0, 3}, 0.5}, {{0, 0, 4.01}, 0.6}}};
  const auto m = match_candidates(s);
  EXPECT_EQ(m[0].kind, MatchKind::true_positive);
  EXPECT_EQ(m[0].nodule_ids, std::vector<int>{7});
  EXPECT_EQ(m[1].kind, MatchKind::false_positive);
  // with 5 mm both hit; the more confident one takes the credit
  const auto wide = match_candidates(s, HitRule::fixed(5.0));
  EXPECT_EQ(wide[1].kind, MatchKind::true_positive);
  EXPECT_EQ(wide[0].kind, MatchKind::ignored);
}

TEST(Match, DuplicateHitIsIgnored) {
  ScanResult s{"s", {{1, {0, 0, 0}, 4, true}}, {{{2, 0, 0}, 0.9}, {{0, 3, 0}, 0.4}}};
  const auto m = match_candidates(s);
  EXPECT_EQ(m[0].kind, MatchKind::true_positive);
  EXPECT_EQ(m[1].kind, MatchKind::ignored);
  const auto ref = oracle::exhaustive_match(s);
  for (size_t i = 0; i < m.size(); ++i) EXPECT_EQ(m[i].kind, ref[i].kind);
}

TEST(Match, ExcludedFindingIsIgnored) {
  ScanResult s{"s", {{1, {0, 0, 0}, 4, false}}, {{{1, 0, 0}, 0.9}}};
  EXPECT_EQ(match_candidates(s)[0].kind, MatchKind::ignored);
}

TEST(Match, AgreesWithExhaustiveAssignment) {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    const auto s = oracle::random_scan(rng, 1 + rng.below(5), rng.below(11));
    const auto m = match_candidates(s);
    const auto ref = oracle::exhaustive_match(s);
    ASSERT_EQ(m.size(), ref.size());
    for (size_t i = 0; i < m.size(); ++i) {
      auto ids = m[i].nodule_ids;
      std::sort(ids.begin(), ids.end());
      ASSERT_EQ(m[i].kind, ref[i].kind) << trial << " " << i;
      ASSERT_EQ(ids, ref[i].nodule_ids) << trial << " " << i;
    }
  }
}

TEST(Match, PermutationInvariant) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = oracle::random_scan(rng, 4, 10);
    s.candidates[3].confidence = s.candidates[7].confidence;  // a tie
    const auto base = match_candidates(s);
    std::vector<size_t> perm(s.candidates.size());
    std::iota(perm.begin(), perm.end(), size_t{0});
    for (size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    ScanResult p = s;
    for (size_t i = 0; i < perm.size(); ++i) p.candidates[i] = s.candidates[perm[i]];
    const auto m = match_candidates(p);
    for (size_t i = 0; i < perm.size(); ++i) {
      ASSERT_EQ(m[i].kind, base[perm[i]].kind);
      ASSERT_EQ(m[i].nodule_ids, base[perm[i]].nodule_ids);
    }
  }
}

TEST(Froc, PerfectDetector) {
  std::vector<ScanResult> scans(2);
  scans[0].references = {{1, {0, 0, 0}, 3, true}};
  scans[0].candidates = {{{0, 0, 0}, 1.0}};
  scans[1].references = {{1, {5, 5, 5}, 3, true}, {2, {50, 5, 5}, 3, true}};
  scans[1].candidates = {{{5, 5, 5}, 1.0}, {{50, 5, 5}, 1.0}};
  const auto r = froc_curve(scans);
  for (double v : r.sensitivities) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(r.cpm, 1.0);
}

TEST(Froc, CurveMatchesThresholdSweep) {
  const auto scans = oracle::three_scan_fixture();
  const auto r = froc_curve(scans);
  const auto sweep = oracle::threshold_sweep(scans);
  EXPECT_EQ(r.reference_count, 5u);
  for (const auto& p : sweep) {
    const auto c = oracle::curve_at(r.curve, p.threshold);
    EXPECT_EQ(c.fp_per_scan, p.fp_per_scan) << p.threshold;
    EXPECT_EQ(c.sensitivity, p.sensitivity) << p.threshold;
  }
  EXPECT_EQ(r.sensitivities, oracle::sweep_operating_points(sweep));
  // hand enumeration: FPs at 0.85, 0.8, 0.7, 0.2, 0.1; TPs at 0.9, 0.6, 0.5 (two nodules), 0.3
  EXPECT_EQ(r.sensitivities, (std::array<double, 7>{0.2, 0.2, 0.2, 1.0, 1.0, 1.0, 1.0}));
}

TEST(Froc, RandomFixturesMatchSweep) {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<ScanResult> scans;
    for (int s = 0; s < 4; ++s) scans.push_back(oracle::random_scan(rng, 1 + rng.below(4), rng.below(12)));
    scans[0].references[0].included = true;
    const auto r = froc_curve(scans);
    const auto sweep = oracle::threshold_sweep(scans);
    EXPECT_EQ(r.sensitivities, oracle::sweep_operating_points(sweep));
    for (size_t i = 1; i < r.curve.size(); ++i) {
      EXPECT_GE(r.curve[i].sensitivity, r.curve[i - 1].sensitivity);
      EXPECT_GE(r.curve[i].fp_per_scan, r.curve[i - 1].fp_per_scan);
    }
    for (size_t i = 1; i < 7; ++i) EXPECT_GE(r.sensitivities[i], r.sensitivities[i - 1]);
  }
}

TEST(Froc, CasedRowAverageSensitivity) {
  const auto r = froc_curve(oracle::cased_row_fixture());
  for (size_t i = 0; i < 7; ++i) EXPECT_NEAR(r.sensitivities[i], oracle::kCasedRowSensitivities[i], 1e-12);
  EXPECT_NEAR(r.cpm, 0.8834, 1e-4);
  EXPECT_NEAR(cpm_score(oracle::kCasedRowSensitivities), 0.883428571, 1e-9);
  EXPECT_EQ(froc_summary_json(r)["cpm"].get<double>(), 0.8834);
}

TEST(Froc, ZeroConfidenceFalsePositiveChangesNothingBelowIt) {
  const auto scans = oracle::three_scan_fixture();
  const auto base = froc_curve(scans);
  auto more = scans;
  more[1].candidates.push_back({{500, 500, 500}, 0.0});
  const auto r = froc_curve(more);
  EXPECT_EQ(r.sensitivities, base.sensitivities);
}

TEST(Froc, Errors) {
  EXPECT_THROW(froc_curve({}), ValidationError);
  ScanResult none{"s", {{1, {0, 0, 0}, 3, false}}, {}};
  EXPECT_THROW(froc_curve({none}), ValidationError);
  ScanResult bad{"s", {{1, {0, 0, 0}, 0, true}}, {}};
  EXPECT_THROW(froc_curve({bad}), ValidationError);
}

TEST(Froc, FpAtSensitivity) {
  const auto r = froc_curve(oracle::three_scan_fixture());
  EXPECT_DOUBLE_EQ(fp_at_sensitivity(r.curve, 0.2), 0.0);
  EXPECT_DOUBLE_EQ(fp_at_sensitivity(r.curve, 0.4), 1.0);
  EXPECT_DOUBLE_EQ(fp_at_sensitivity(r.curve, 1.0), 1.0);
  auto missing = oracle::three_scan_fixture();
  missing[0].candidates.clear();
  EXPECT_TRUE(std::isinf(fp_at_sensitivity(froc_curve(missing).curve, 1.0)));
}

TEST(Bootstrap, IdenticalScansHaveZeroVariance) {
  const auto one = oracle::three_scan_fixture()[0];
  const std::vector<ScanResult> same(6, one);
  const auto b = bootstrap_froc(same, 200, 3);
  const auto plug = froc_curve(same);
  EXPECT_EQ(b.used, 200u);
  for (size_t r = 0; r < 7; ++r) {
    EXPECT_EQ(b.variance[r], 0.0);
    EXPECT_DOUBLE_EQ(b.mean[r], plug.sensitivities[r]);
  }
}

TEST(Bootstrap, SingleResample) {
  const auto scans = oracle::three_scan_fixture();
  const auto b = bootstrap_froc(scans, 1, 9);
  ASSERT_EQ(b.used, 1u);
  Rng rng(derive_seed(9, 0));
  std::vector<ScanResult> resample;
  for (size_t i = 0; i < scans.size(); ++i) resample.push_back(scans[rng.below(scans.size())]);
  const auto direct = froc_curve(resample);
  for (size_t r = 0; r < 7; ++r) {
    EXPECT_EQ(b.variance[r], 0.0);
    EXPECT_DOUBLE_EQ(b.mean[r], direct.sensitivities[r]);
  }
}

TEST(Bootstrap, DeterministicPerSeed) {
  const auto scans = oracle::three_scan_fixture();
  const auto a = bootstrap_froc(scans, 100, 4);
  const auto b = bootstrap_froc(scans, 100, 4);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.variance, b.variance);
  EXPECT_THROW(bootstrap_froc(scans, 0, 4), ValidationError);
}

TEST(Io, FrocCsvAndReferences) {
  auto r = froc_curve(oracle::cased_row_fixture());
  attach_bootstrap(r, bootstrap_froc(oracle::cased_row_fixture(), 20, 1));
  const auto back = parse_froc_csv(froc_csv(r));
  for (size_t i = 0; i < 7; ++i) {
    EXPECT_NEAR(back.sensitivities[i], r.sensitivities[i], 1e-6);
    EXPECT_EQ(back.fp_rates[i], kFrocRates[i]);
  }
  EXPECT_THROW(parse_froc_csv("a,b\n"), ValidationError);

  AnnotationSet ann;
  ann.nodules = {{1, {0, 0, 0}, 3, 4}, {2, {9, 9, 9}, 3, 2}};
  const auto refs = reference_from_annotations(ann, 3);
  EXPECT_TRUE(refs[0].included);
  EXPECT_FALSE(refs[1].included);
  const auto scans = assemble_scans({{"a", {0, 0, 0}, 0.9}}, {{"a", ann}, {"b", ann}});
  ASSERT_EQ(scans.size(), 2u);
  EXPECT_EQ(scans[0].candidates.size(), 1u);
  EXPECT_TRUE(scans[1].candidates.empty());
  EXPECT_THROW(assemble_scans({{"zzz", {0, 0, 0}, 0.9}}, {{"a", ann}}), ValidationError);
}
