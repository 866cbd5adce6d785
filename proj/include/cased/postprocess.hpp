/*
 * postprocess.hpp
 *
 * Soft segmentation -> candidate list: threshold, 3D connected components,
 * then one (center of mass, mean probability) candidate per component.
 */
#pragma once

#include <cstdio>
#include <filesystem>
#include <numeric>

#include "cased/io.hpp"
#include "cased/volume.hpp"

namespace cased {

/// 1 where prob > t (strict).
inline LabelMap threshold_map(const Volume& prob, double t) {
  require(t > 0 && t < 1, "threshold_map: threshold must lie in (0, 1)");
  LabelMap out = LabelMap::like(prob);
  for (size_t i = 0; i < prob.size(); ++i) out[i] = double(prob[i]) > t ? 1 : 0;
  return out;
}

struct ComponentLabeling {
  /// 0 = background, components numbered 1..count in scan order of their first voxel.
  Array3<int32_t> labels;
  int32_t count = 0;
  /// sizes[k] = voxel count of component k + 1.
  std::vector<size_t> sizes;
};

namespace detail {

class DisjointSet {
public:
  int32_t make() {
    parent_.push_back(int32_t(parent_.size()));
    return parent_.back();
  }
  int32_t find(int32_t x) {
    int32_t root = x;
    while (parent_[size_t(root)] != root) root = parent_[size_t(root)];
    while (parent_[size_t(x)] != root) {
      const int32_t next = parent_[size_t(x)];
      parent_[size_t(x)] = root;
      x = next;
    }
    return root;
  }
  void unite(int32_t a, int32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    // smaller provisional label becomes the root
    if (a < b) {
      parent_[size_t(b)] = a;
    } else {
      parent_[size_t(a)] = b;
    }
  }

private:
  std::vector<int32_t> parent_;
};

/// Neighbors that precede a voxel in scan order.
inline std::vector<Index3> backward_neighbors(int connectivity) {
  std::vector<Index3> n;
  for (int64_t dz = -1; dz <= 0; ++dz)
    for (int64_t dy = -1; dy <= 1; ++dy)
      for (int64_t dx = -1; dx <= 1; ++dx) {
        if (dz == 0 && (dy > 0 || (dy == 0 && dx >= 0))) continue;
        const int64_t manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (connectivity == 6 && manhattan != 1) continue;
        n.push_back({dx, dy, dz});
      }
  return n;
}

}  // namespace detail

/// Two-pass labeling with union-find over provisional labels.
inline ComponentLabeling connected_components(const LabelMap& bin, int connectivity = 26) {
  require(connectivity == 6 || connectivity == 26, "connected_components: connectivity must be 6 or 26");
  const Dims& d = bin.dims();
  const auto nbrs = detail::backward_neighbors(connectivity);
  Array3<int32_t> prov(d, -1);
  detail::DisjointSet ds;
  for (int64_t z = 0; z < d.nz; ++z)
    for (int64_t y = 0; y < d.ny; ++y)
      for (int64_t x = 0; x < d.nx; ++x) {
        if (!bin(x, y, z)) continue;
        int32_t label = -1;
        for (const Index3& o : nbrs) {
          const Index3 q{x + o.x, y + o.y, z + o.z};
          if (!d.contains(q)) continue;
          const int32_t l = prov[q];
          if (l < 0) continue;
          if (label < 0) {
            label = l;
          } else {
            ds.unite(label, l);
          }
        }
        prov(x, y, z) = label < 0 ? ds.make() : label;
      }

  ComponentLabeling out{Array3<int32_t>(d, 0), 0, {}};
  std::vector<int32_t> final_of_root;
  for (size_t i = 0; i < prov.size(); ++i) {
    if (prov[i] < 0) continue;
    const auto root = size_t(ds.find(prov[i]));
    if (final_of_root.size() <= root) final_of_root.resize(root + 1, 0);
    if (final_of_root[root] == 0) {
      final_of_root[root] = ++out.count;
      out.sizes.push_back(0);
    }
    out.labels[i] = final_of_root[root];
    ++out.sizes[size_t(final_of_root[root] - 1)];
  }
  return out;
}

struct Candidate {
  /// World (mm) position, shared by the resampled and the native grid.
  Vec3 position_mm;
  /// Continuous voxel coordinate in the native image.
  Vec3 native_voxel;
  double confidence = 0;
  size_t component_size = 0;
};

enum class CenterOfMass { probability_weighted, unweighted };

/// One candidate per component, sorted by confidence (descending; ties keep
/// component order). `resampled` must describe the grid of `prob`.
inline std::vector<Candidate> components_to_candidates(const Volume& prob, const ComponentLabeling& labeling,
                                                       const GridTransform& resampled, const GridTransform& native,
                                                       CenterOfMass com = CenterOfMass::probability_weighted) {
  require(labeling.labels.dims() == prob.dims(), "components_to_candidates: labeling grid differs from probability grid");
  if (!(resampled == prob.transform())) {
    throw ValidationError("components_to_candidates: resampled transform does not describe the probability grid");
  }
  for (int a = 0; a < 3; ++a) {
    require(native.spacing[a] > 0 && std::isfinite(native.origin[a]),
            "components_to_candidates: native transform is not invertible");
  }
  const auto n = size_t(labeling.count);
  std::vector<double> mass(n, 0), psum(n, 0);
  std::vector<Vec3> moment(n);
  const Dims& d = prob.dims();
  for (size_t i = 0; i < prob.size(); ++i) {
    const int32_t l = labeling.labels[i];
    if (l <= 0) continue;
    const auto k = size_t(l - 1);
    const double p = prob[i];
    const double m = com == CenterOfMass::probability_weighted ? p : 1.0;
    const Index3 v = d.unravel(i);
    moment[k] = moment[k] + m * Vec3{double(v.x), double(v.y), double(v.z)};
    mass[k] += m;
    psum[k] += p;
  }
  std::vector<Candidate> out;
  out.reserve(n);
  for (size_t k = 0; k < n; ++k) {
    const double m = mass[k] > 0 ? mass[k] : 1.0;
    const Vec3 voxel = (1.0 / m) * moment[k];
    Candidate c;
    c.position_mm = resampled.voxel_to_world(voxel);
    c.native_voxel = native.world_to_voxel(c.position_mm);
    c.confidence = psum[k] / double(labeling.sizes[k]);
    c.component_size = labeling.sizes[k];
    out.push_back(c);
  }
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) { return a.confidence > b.confidence; });
  return out;
}

struct DetectionParams {
  double threshold = 0.5;
  int connectivity = 26;
  CenterOfMass center = CenterOfMass::probability_weighted;
};

/// threshold -> components -> candidates on a probability map.
inline std::vector<Candidate> detect_candidates(const Volume& prob, const GridTransform& native,
                                                const DetectionParams& params = {}) {
  const LabelMap bin = threshold_map(prob, params.threshold);
  const ComponentLabeling cc = connected_components(bin, params.connectivity);
  return components_to_candidates(prob, cc, prob.transform(), native, params.center);
}

// ---------------------------------------------------------------------------
// Candidate CSV: scan_id,x_mm,y_mm,z_mm,probability

struct CandidateRow {
  std::string scan_id;
  Vec3 position_mm;
  double probability = 0;
};

inline std::string format_candidate_row(const std::string& scan_id, Vec3 p, double prob) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f", scan_id.c_str(), p.x, p.y, p.z, prob);
  return buf;
}

inline std::string candidates_csv(const std::vector<CandidateRow>& rows) {
  std::string s = "scan_id,x_mm,y_mm,z_mm,probability\n";
  for (const auto& r : rows) s += format_candidate_row(r.scan_id, r.position_mm, r.probability) + "\n";
  return s;
}

inline void save_candidates_csv(const std::vector<CandidateRow>& rows, const std::filesystem::path& path) {
  detail::write_text(path, candidates_csv(rows));
}

inline std::vector<CandidateRow> parse_candidates_csv(const std::string& text) {
  std::vector<CandidateRow> rows;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1) {
      require(line == "scan_id,x_mm,y_mm,z_mm,probability", "candidates CSV: unexpected header '" + line + "'");
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    require(f.size() == 5, "candidates CSV line " + std::to_string(lineno) + ": expected 5 fields");
    try {
      rows.push_back({f[0], {std::stod(f[1]), std::stod(f[2]), std::stod(f[3])}, std::stod(f[4])});
    } catch (const std::exception&) {
      throw ValidationError("candidates CSV line " + std::to_string(lineno) + ": malformed number");
    }
    require(std::isfinite(rows.back().probability), "candidates CSV line " + std::to_string(lineno) + ": non-finite probability");
  }
  require(lineno >= 1, "candidates CSV: missing header");
  return rows;
}

inline std::vector<CandidateRow> load_candidates_csv(const std::filesystem::path& path) {
  return parse_candidates_csv(detail::read_text(path));
}

}  // namespace cased
