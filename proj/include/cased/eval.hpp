/*
 * eval.hpp
 *
 * Detection scoring: candidate/reference matching, FROC curve, average
 * sensitivity over the seven standard FP rates (CPM), bootstrap bands.
 */
#pragma once

#include <array>
#include <limits>
#include <map>

#include "cased/io.hpp"
#include "cased/postprocess.hpp"

namespace cased {

inline constexpr std::array<double, 7> kFrocRates = {0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

struct ReferenceNodule {
  int id = 0;
  Vec3 center_mm;
  double radius_mm = 0;
  /// false: excluded finding; hits on it are neither TP nor FP.
  bool included = true;
};

struct ScoredCandidate {
  Vec3 position_mm;
  double confidence = 0;
};

struct ScanResult {
  std::string scan_id;
  std::vector<ReferenceNodule> references;
  std::vector<ScoredCandidate> candidates;

  void validate() const {
    for (const auto& r : references) require(r.radius_mm > 0, "scan " + scan_id + ": reference radius must be > 0");
    for (const auto& c : candidates) require(std::isfinite(c.confidence), "scan " + scan_id + ": non-finite confidence");
  }
};

/// Hit if distance <= the nodule radius (scaled), or <= a fixed distance.
struct HitRule {
  enum class Kind { radius, fixed_mm } kind = Kind::radius;
  double radius_scale = 1.0;
  double fixed_mm = 0.0;

  static HitRule nodule_radius(double scale = 1.0) { return {Kind::radius, scale, 0.0}; }
  static HitRule fixed(double mm) { return {Kind::fixed_mm, 1.0, mm}; }

  double reach(const ReferenceNodule& n) const { return kind == Kind::radius ? radius_scale * n.radius_mm : fixed_mm; }
  bool hits(const ScoredCandidate& c, const ReferenceNodule& n) const {
    return distance(c.position_mm, n.center_mm) <= reach(n);
  }
};

enum class MatchKind { true_positive, false_positive, ignored };

struct CandidateMatch {
  MatchKind kind = MatchKind::false_positive;
  /// Reference nodules credited to this candidate (true positives only).
  std::vector<int> nodule_ids;
};

/// One entry per candidate, in input order. Each included nodule is credited
/// to its highest-confidence hit; a single candidate may be the best hit of
/// several nodules. Ties on confidence are broken by position, so the result
/// does not depend on candidate order.
inline std::vector<CandidateMatch> match_candidates(const ScanResult& scan, const HitRule& rule = {}) {
  const auto& cands = scan.candidates;
  std::vector<size_t> order(cands.size());
  std::iota(order.begin(), order.end(), size_t{0});
  auto key = [&](size_t i) {
    const auto& c = cands[i];
    return std::tuple(-c.confidence, c.position_mm.x, c.position_mm.y, c.position_mm.z);
  };
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return key(a) < key(b); });

  std::vector<CandidateMatch> out(cands.size());
  std::vector<bool> credited(scan.references.size(), false);
  for (size_t i : order) {
    bool any_hit = false;
    for (size_t n = 0; n < scan.references.size(); ++n) {
      const auto& ref = scan.references[n];
      if (!rule.hits(cands[i], ref)) continue;
      any_hit = true;
      if (ref.included && !credited[n]) {
        credited[n] = true;
        out[i].nodule_ids.push_back(ref.id);
      }
    }
    if (!out[i].nodule_ids.empty()) {
      out[i].kind = MatchKind::true_positive;
    } else {
      out[i].kind = any_hit ? MatchKind::ignored : MatchKind::false_positive;
    }
  }
  return out;
}

struct FrocPoint {
  double threshold = 0;
  double fp_per_scan = 0;
  double sensitivity = 0;
};

struct FrocResult {
  std::array<double, 7> fp_rates = kFrocRates;
  std::array<double, 7> sensitivities{};
  double cpm = 0;
  /// Filled by bootstrap_froc.
  std::array<double, 7> boot_mean{};
  std::array<double, 7> boot_var{};
  size_t boot_samples = 0;
  /// Step curve from the strictest threshold (+inf) down to the lowest confidence.
  std::vector<FrocPoint> curve;
  size_t scan_count = 0;
  size_t reference_count = 0;
};

inline double cpm_score(const std::array<double, 7>& sens) {
  double s = 0;
  for (double v : sens) s += v;
  return s / 7.0;
}

namespace detail {

/// Matched outcome of one scan, independent of the threshold.
struct ScanEvents {
  size_t reference_count = 0;
  std::vector<double> tp_confidences;  // one per credited nodule
  std::vector<double> fp_confidences;
};

inline ScanEvents scan_events(const ScanResult& scan, const HitRule& rule) {
  scan.validate();
  ScanEvents e;
  for (const auto& r : scan.references) e.reference_count += r.included ? 1 : 0;
  const auto m = match_candidates(scan, rule);
  for (size_t i = 0; i < m.size(); ++i) {
    const double c = scan.candidates[i].confidence;
    if (m[i].kind == MatchKind::true_positive) {
      e.tp_confidences.insert(e.tp_confidences.end(), m[i].nodule_ids.size(), c);
    } else if (m[i].kind == MatchKind::false_positive) {
      e.fp_confidences.push_back(c);
    }
  }
  return e;
}

/// Curve over the union of the given scans (indices may repeat).
inline std::vector<FrocPoint> curve_from_events(const std::vector<ScanEvents>& events, const std::vector<size_t>& picks,
                                                size_t& reference_count) {
  std::vector<std::pair<double, bool>> ev;  // (confidence, is_tp)
  reference_count = 0;
  for (size_t s : picks) {
    const auto& e = events[s];
    reference_count += e.reference_count;
    for (double c : e.tp_confidences) ev.emplace_back(c, true);
    for (double c : e.fp_confidences) ev.emplace_back(c, false);
  }
  std::sort(ev.begin(), ev.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const double scans = double(picks.size());
  const double refs = double(std::max<size_t>(reference_count, 1));
  std::vector<FrocPoint> curve{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  size_t tp = 0, fp = 0;
  for (size_t i = 0; i < ev.size();) {
    const double t = ev[i].first;
    for (; i < ev.size() && ev[i].first == t; ++i) (ev[i].second ? tp : fp) += 1;
    curve.push_back({t, double(fp) / scans, double(tp) / refs});
  }
  return curve;
}

/// Highest sensitivity among curve points with fp_per_scan <= rate.
inline std::array<double, 7> operating_points(const std::vector<FrocPoint>& curve) {
  std::array<double, 7> out{};
  for (size_t r = 0; r < kFrocRates.size(); ++r) {
    double best = 0;
    for (const auto& p : curve)
      if (p.fp_per_scan <= kFrocRates[r]) best = std::max(best, p.sensitivity);
    out[r] = best;
  }
  return out;
}

}  // namespace detail

inline FrocResult froc_curve(const std::vector<ScanResult>& results, const HitRule& rule = {}) {
  require(!results.empty(), "froc_curve: no scans");
  std::vector<detail::ScanEvents> events;
  events.reserve(results.size());
  for (const auto& s : results) events.push_back(detail::scan_events(s, rule));
  std::vector<size_t> all(results.size());
  std::iota(all.begin(), all.end(), size_t{0});
  FrocResult r;
  r.curve = detail::curve_from_events(events, all, r.reference_count);
  require(r.reference_count > 0, "froc_curve: no reference nodules");
  r.scan_count = results.size();
  r.sensitivities = detail::operating_points(r.curve);
  r.cpm = cpm_score(r.sensitivities);
  return r;
}

struct BootstrapStats {
  std::array<double, 7> mean{};
  std::array<double, 7> variance{};
  /// Resamples that contained at least one reference nodule.
  size_t used = 0;
};

/// Resamples scans with replacement. Resample b draws from its own stream
/// derive_seed(seed, b); resamples without any reference nodule are skipped.
/// Variance is the population variance over the used resamples.
inline BootstrapStats bootstrap_froc(const std::vector<ScanResult>& results, size_t n_samples, uint64_t seed,
                                     const HitRule& rule = {}) {
  require(n_samples >= 1, "bootstrap_froc: n_samples must be >= 1");
  require(!results.empty(), "bootstrap_froc: no scans");
  std::vector<detail::ScanEvents> events;
  for (const auto& s : results) events.push_back(detail::scan_events(s, rule));

  std::vector<std::array<double, 7>> samples;
  samples.reserve(n_samples);
  std::vector<size_t> picks(results.size());
  for (size_t b = 0; b < n_samples; ++b) {
    Rng rng(derive_seed(seed, b));
    for (auto& p : picks) p = size_t(rng.below(results.size()));
    size_t refs = 0;
    const auto curve = detail::curve_from_events(events, picks, refs);
    if (refs == 0) continue;
    samples.push_back(detail::operating_points(curve));
  }
  BootstrapStats st;
  st.used = samples.size();
  if (samples.empty()) {
    warn("bootstrap_froc: no resample contained a reference nodule");
    return st;
  }
  for (size_t r = 0; r < 7; ++r) {
    double m = 0;
    for (const auto& s : samples) m += s[r];
    m /= double(samples.size());
    double v = 0;
    for (const auto& s : samples) v += (s[r] - m) * (s[r] - m);
    st.mean[r] = m;
    st.variance[r] = v / double(samples.size());
  }
  return st;
}

inline void attach_bootstrap(FrocResult& r, const BootstrapStats& b) {
  r.boot_mean = b.mean;
  r.boot_var = b.variance;
  r.boot_samples = b.used;
}

/// Lowest fp_per_scan reaching at least `sensitivity`; +inf if never reached.
inline double fp_at_sensitivity(const std::vector<FrocPoint>& curve, double sensitivity) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : curve)
    if (p.sensitivity >= sensitivity) best = std::min(best, p.fp_per_scan);
  return best;
}

// ---------------------------------------------------------------------------
// Inputs and outputs

/// Reference set of one scan: nodules with agreement_count >= min_agreement
/// are included, the rest are excluded findings.
inline std::vector<ReferenceNodule> reference_from_annotations(const AnnotationSet& a, int min_agreement = 3) {
  std::vector<ReferenceNodule> out;
  for (const auto& n : a.nodules) out.push_back({n.id, n.center_mm, n.radius_mm, n.agreement_count >= min_agreement});
  return out;
}

/// Joins candidate rows with per-scan references. Every reference scan is
/// scored, with or without candidates; a candidate for an unknown scan is an error.
inline std::vector<ScanResult> assemble_scans(const std::vector<CandidateRow>& rows,
                                              const std::map<std::string, AnnotationSet>& references,
                                              int min_agreement = 3) {
  std::map<std::string, size_t> slot;
  std::vector<ScanResult> out;
  for (const auto& [id, ann] : references) {
    slot[id] = out.size();
    out.push_back({id, reference_from_annotations(ann, min_agreement), {}});
  }
  for (const auto& r : rows) {
    const auto it = slot.find(r.scan_id);
    require(it != slot.end(), "candidate for scan '" + r.scan_id + "' has no reference annotations");
    out[it->second].candidates.push_back({r.position_mm, r.probability});
  }
  return out;
}

/// References from either one JSON object {scan_id: [nodules]} or a directory
/// of `<scan_id>.json` annotation files.
inline std::map<std::string, AnnotationSet> load_reference_set(const fs::path& path) {
  std::map<std::string, AnnotationSet> out;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out[f.stem().string()] = load_annotations(f);
    return out;
  }
  const json j = detail::read_json(path);
  require(j.is_object(), "reference file must map scan ids to annotation arrays");
  for (const auto& [id, arr] : j.items()) out[id] = annotations_from_json(arr);
  return out;
}

inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

inline std::string froc_csv(const FrocResult& r) {
  std::string s = "fp_per_scan,sensitivity,boot_mean,boot_var\n";
  for (size_t i = 0; i < 7; ++i) {
    s += format_fixed(r.fp_rates[i], 3) + "," + format_fixed(r.sensitivities[i], 6) + "," +
         format_fixed(r.boot_mean[i], 6) + "," + format_fixed(r.boot_var[i], 8) + "\n";
  }
  return s;
}

inline json froc_summary_json(const FrocResult& r) {
  json ops = json::array();
  for (size_t i = 0; i < 7; ++i) ops.push_back({{"fp_per_scan", r.fp_rates[i]}, {"sensitivity", r.sensitivities[i]}});
  json j;
  j["operating_points"] = ops;
  j["cpm"] = std::stod(format_fixed(r.cpm, 4));
  j["cpm_exact"] = r.cpm;
  j["scans"] = r.scan_count;
  j["reference_nodules"] = r.reference_count;
  j["bootstrap_samples"] = r.boot_samples;
  return j;
}

/// Parses the seven-row FROC CSV back into (rates, sensitivities, mean, var).
inline FrocResult parse_froc_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(bool(std::getline(in, line)), "FROC CSV: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == "fp_per_scan,sensitivity,boot_mean,boot_var", "FROC CSV: unexpected header '" + line + "'");
  FrocResult r;
  size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    require(row < 7, "FROC CSV: more than 7 rows");
    double v[4];
    require(std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &v[0], &v[1], &v[2], &v[3]) == 4,
            "FROC CSV: malformed row '" + line + "'");
    r.fp_rates[row] = v[0];
    r.sensitivities[row] = v[1];
    r.boot_mean[row] = v[2];
    r.boot_var[row] = v[3];
    ++row;
  }
  require(row == 7, "FROC CSV: expected 7 rows");
  r.cpm = cpm_score(r.sensitivities);
  return r;
}

}  // namespace cased
