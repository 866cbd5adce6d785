/*
 * volume.hpp
 *
 * Volumetric images and label maps on a physical grid: intensity windowing,
 * isotropic resampling, reference-label construction from rater masks,
 * sphere rasterization, and synthetic case generation.
 */
#pragma once

#include <set>
#include <span>

#include "cased/core.hpp"

namespace cased {

/// Voxel <-> world (mm) mapping of an axis-aligned grid. `origin` is the
/// world position of the center of voxel (0,0,0).
struct GridTransform {
  Vec3 origin{0, 0, 0};
  Vec3 spacing{1, 1, 1};

  Vec3 voxel_to_world(Vec3 v) const {
    return {origin.x + v.x * spacing.x, origin.y + v.y * spacing.y, origin.z + v.z * spacing.z};
  }
  Vec3 voxel_to_world(Index3 p) const {
    return voxel_to_world(Vec3{double(p.x), double(p.y), double(p.z)});
  }
  Vec3 world_to_voxel(Vec3 w) const {
    return {(w.x - origin.x) / spacing.x, (w.y - origin.y) / spacing.y, (w.z - origin.z) / spacing.z};
  }
  friend bool operator==(const GridTransform&, const GridTransform&) = default;
};

/// Scalar field on a physical grid.
template <typename T>
class Grid {
public:
  Grid() = default;
  Grid(Dims dims, Vec3 spacing, Vec3 origin = {}, T fill = T{})
      : values_(dims, fill), xf_{origin, spacing} {
    validate();
  }
  Grid(Array3<T> values, GridTransform xf) : values_(std::move(values)), xf_(xf) { validate(); }

  /// Empty grid sharing another grid's metadata.
  template <typename U>
  static Grid like(const Grid<U>& other, T fill = T{}) {
    return Grid(other.dims(), other.spacing(), other.origin(), fill);
  }

  const Dims& dims() const { return values_.dims(); }
  const Vec3& spacing() const { return xf_.spacing; }
  const Vec3& origin() const { return xf_.origin; }
  const GridTransform& transform() const { return xf_; }
  size_t size() const { return values_.size(); }

  Array3<T>& values() { return values_; }
  const Array3<T>& values() const { return values_; }
  std::vector<T>& data() { return values_.data(); }
  const std::vector<T>& data() const { return values_.data(); }

  T& operator()(int64_t x, int64_t y, int64_t z) { return values_(x, y, z); }
  const T& operator()(int64_t x, int64_t y, int64_t z) const { return values_(x, y, z); }
  T& operator[](Index3 p) { return values_[p]; }
  const T& operator[](Index3 p) const { return values_[p]; }
  T& operator[](size_t i) { return values_[i]; }
  const T& operator[](size_t i) const { return values_[i]; }

  template <typename U>
  bool same_geometry(const Grid<U>& o) const {
    return dims() == o.dims() && xf_ == o.transform();
  }

  friend bool operator==(const Grid&, const Grid&) = default;

private:
  void validate() const {
    require(values_.dims().valid(), "grid dims must all be >= 1");
    require(xf_.spacing.x > 0 && xf_.spacing.y > 0 && xf_.spacing.z > 0, "grid spacing must be > 0");
  }

  Array3<T> values_;
  GridTransform xf_;
};

using Volume = Grid<float>;
using LabelMap = Grid<uint8_t>;

inline size_t count_positive(const LabelMap& labels) {
  return static_cast<size_t>(std::count_if(labels.data().begin(), labels.data().end(),
                                           [](uint8_t v) { return v != 0; }));
}

// ---------------------------------------------------------------------------
// Annotations

struct Nodule {
  int id = 0;
  Vec3 center_mm;
  double radius_mm = 1.0;
  int agreement_count = 1;
  /// One linear-index voxel set per rater; empty when only point + radius is known.
  std::vector<std::vector<int64_t>> rater_masks;

  friend bool operator==(const Nodule&, const Nodule&) = default;
};

struct AnnotationSet {
  std::vector<Nodule> nodules;

  void validate() const {
    for (const auto& n : nodules) {
      require(n.radius_mm > 0, "nodule " + std::to_string(n.id) + ": radius must be > 0");
      require(n.agreement_count >= 1, "nodule " + std::to_string(n.id) + ": agreement_count must be >= 1");
      require(n.rater_masks.size() <= 4, "nodule " + std::to_string(n.id) + ": at most 4 rater masks");
    }
  }
  friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

// ---------------------------------------------------------------------------
// Preprocessing

struct HuWindow {
  double lo = -1000.0;
  double hi = 400.0;
};

/// Linear map of `window` onto [0,1], clamped.
inline Volume rescale_intensity(const Volume& v, HuWindow window = {}) {
  require(window.lo < window.hi, "rescale_intensity: window requires lo < hi");
  Volume out = v;
  const double scale = 1.0 / (window.hi - window.lo);
  for (auto& x : out.data()) {
    const double t = (double(x) - window.lo) * scale;
    x = static_cast<float>(std::clamp(t, 0.0, 1.0));
  }
  return out;
}

enum class Interpolation { trilinear, nearest };

/// Result of resampling: the new grid plus the transforms of both grids,
/// which share the world frame.
template <typename T>
struct Resampled {
  Grid<T> grid;
  GridTransform source;
  GridTransform target;

  Vec3 target_to_source_voxel(Vec3 v) const { return source.world_to_voxel(target.voxel_to_world(v)); }
  Vec3 source_to_target_voxel(Vec3 v) const { return target.world_to_voxel(source.voxel_to_world(v)); }
};

namespace detail {

template <typename T>
double trilinear_at(const Array3<T>& a, double fx, double fy, double fz) {
  const Dims& d = a.dims();
  auto split = [](double f, int64_t n, int64_t& i0, int64_t& i1, double& t) {
    f = std::clamp(f, 0.0, double(n - 1));
    i0 = std::min<int64_t>(static_cast<int64_t>(std::floor(f)), n - 1);
    i1 = std::min<int64_t>(i0 + 1, n - 1);
    t = f - double(i0);
  };
  int64_t x0, x1, y0, y1, z0, z1;
  double tx, ty, tz;
  split(fx, d.nx, x0, x1, tx);
  split(fy, d.ny, y0, y1, ty);
  split(fz, d.nz, z0, z1, tz);
  auto at = [&](int64_t x, int64_t y, int64_t z) { return double(a(x, y, z)); };
  const double c00 = at(x0, y0, z0) * (1 - tx) + at(x1, y0, z0) * tx;
  const double c10 = at(x0, y1, z0) * (1 - tx) + at(x1, y1, z0) * tx;
  const double c01 = at(x0, y0, z1) * (1 - tx) + at(x1, y0, z1) * tx;
  const double c11 = at(x0, y1, z1) * (1 - tx) + at(x1, y1, z1) * tx;
  const double c0 = c00 * (1 - ty) + c10 * ty;
  const double c1 = c01 * (1 - ty) + c11 * ty;
  return c0 * (1 - tz) + c1 * tz;
}

}  // namespace detail

/// Resamples onto an isotropic grid with the same world origin. New dims are
/// round(old_dims * old_spacing / target) per axis. Sample positions outside
/// the source extent clamp to the border voxel.
template <typename T>
Resampled<T> resample_isotropic(const Grid<T>& v, double target_spacing_mm, Interpolation mode) {
  require(target_spacing_mm > 0, "resample_isotropic: target spacing must be > 0");
  Dims nd;
  for (int a = 0; a < 3; ++a) {
    nd[a] = static_cast<int64_t>(std::llround(double(v.dims()[a]) * v.spacing()[a] / target_spacing_mm));
  }
  require(nd.valid(), "resample_isotropic: empty output grid");

  const GridTransform target{v.origin(), {target_spacing_mm, target_spacing_mm, target_spacing_mm}};
  Resampled<T> r{Grid<T>(nd, target.spacing, target.origin), v.transform(), target};
  const Vec3 ratio{target_spacing_mm / v.spacing().x, target_spacing_mm / v.spacing().y,
                   target_spacing_mm / v.spacing().z};
  const Dims& od = v.dims();
  for (int64_t z = 0; z < nd.nz; ++z) {
    for (int64_t y = 0; y < nd.ny; ++y) {
      for (int64_t x = 0; x < nd.nx; ++x) {
        const double fx = x * ratio.x, fy = y * ratio.y, fz = z * ratio.z;
        if (mode == Interpolation::nearest) {
          auto pick = [](double f, int64_t n) {
            return std::clamp<int64_t>(static_cast<int64_t>(std::llround(f)), 0, n - 1);
          };
          r.grid(x, y, z) = v(pick(fx, od.nx), pick(fy, od.ny), pick(fz, od.nz));
        } else {
          const double val = detail::trilinear_at(v.values(), fx, fy, fz);
          if constexpr (std::is_integral_v<T>) {
            r.grid(x, y, z) = static_cast<T>(std::llround(val));
          } else {
            r.grid(x, y, z) = static_cast<T>(val);
          }
        }
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Labels

/// Voxels whose center lies within `radius_mm` of `center_mm`. A sphere that
/// misses the grid entirely yields an empty map and a warning.
template <typename T>
LabelMap rasterize_sphere(const Grid<T>& grid, Vec3 center_mm, double radius_mm) {
  require(radius_mm > 0, "rasterize_sphere: radius must be > 0");
  LabelMap out = LabelMap::like(grid);
  const Dims& d = grid.dims();
  const GridTransform& xf = grid.transform();
  Index3 lo, hi;
  for (int a = 0; a < 3; ++a) {
    const double c = (center_mm[a] - xf.origin[a]) / xf.spacing[a];
    const double r = radius_mm / xf.spacing[a];
    lo[a] = std::max<int64_t>(0, static_cast<int64_t>(std::floor(c - r)));
    hi[a] = std::min<int64_t>(d[a] - 1, static_cast<int64_t>(std::ceil(c + r)));
  }
  size_t hits = 0;
  const double r2 = radius_mm * radius_mm;
  for (int64_t z = lo.z; z <= hi.z; ++z) {
    for (int64_t y = lo.y; y <= hi.y; ++y) {
      for (int64_t x = lo.x; x <= hi.x; ++x) {
        const Vec3 w = xf.voxel_to_world(Index3{x, y, z}) - center_mm;
        if (w.x * w.x + w.y * w.y + w.z * w.z <= r2) {
          out(x, y, z) = 1;
          ++hits;
        }
      }
    }
  }
  if (hits == 0) {
    std::ostringstream os;
    os << "rasterize_sphere: sphere at (" << center_mm.x << ", " << center_mm.y << ", " << center_mm.z
       << ") r=" << radius_mm << " covers no voxel center of the grid";
    warn(os.str());
  }
  return out;
}

/// Per nodule, the intersection of its rater masks (a single mask is used
/// as-is); the union over nodules. Nodules without any rater mask fall back to
/// their rasterized sphere.
template <typename T>
LabelMap build_reference_labels(const Grid<T>& grid, const AnnotationSet& ann) {
  ann.validate();
  LabelMap out = LabelMap::like(grid);
  const auto total = static_cast<int64_t>(grid.size());
  std::vector<uint8_t> counts(grid.size(), 0);
  for (const auto& n : ann.nodules) {
    if (n.rater_masks.empty()) {
      const LabelMap s = rasterize_sphere(grid, n.center_mm, n.radius_mm);
      for (size_t i = 0; i < s.size(); ++i) out[i] |= s[i];
      continue;
    }
    std::vector<size_t> touched;
    for (const auto& mask : n.rater_masks) {
      // duplicate indices inside one mask must not count twice
      std::set<int64_t> unique(mask.begin(), mask.end());
      for (int64_t idx : unique) {
        if (idx < 0 || idx >= total) {
          throw ValidationError("build_reference_labels: nodule " + std::to_string(n.id) +
                                " references voxel " + std::to_string(idx) + " outside the grid");
        }
        if (counts[size_t(idx)]++ == 0) touched.push_back(size_t(idx));
      }
    }
    const auto raters = static_cast<uint8_t>(n.rater_masks.size());
    for (size_t idx : touched) {
      if (counts[idx] == raters) out[idx] = 1;
      counts[idx] = 0;
    }
  }
  return out;
}

/// Union of rasterized spheres of every nodule (point + radius labels).
template <typename T>
LabelMap build_sphere_labels(const Grid<T>& grid, const AnnotationSet& ann) {
  ann.validate();
  LabelMap out = LabelMap::like(grid);
  for (const auto& n : ann.nodules) {
    const LabelMap s = rasterize_sphere(grid, n.center_mm, n.radius_mm);
    for (size_t i = 0; i < s.size(); ++i) out[i] |= s[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Parameters of a synthetic CT-like case: smoothed noise background in HU
/// with brighter spherical nodules planted at non-overlapping positions.
struct SyntheticSpec {
  Dims dims = Dims::cube(64);
  double spacing_mm = 1.25;
  int nodules_min = 3;
  int nodules_max = 3;
  double radius_min_mm = 2.0;
  double radius_max_mm = 4.0;
  double background_hu = -700.0;
  /// Standard deviation of the smoothed texture in HU.
  double texture_hu = 120.0;
  /// Gaussian smoothing scale of the texture in voxels.
  double texture_sigma_vox = 1.5;
  /// Nodule intensity above background mean, in HU.
  double nodule_contrast_hu = 500.0;
  double max_positive_fraction = 0.01;
  int max_retries = 1000;

  void validate() const {
    require(dims.valid(), "synthetic spec: dims must be >= 1");
    require(spacing_mm > 0, "synthetic spec: spacing must be > 0");
    require(nodules_min >= 0 && nodules_max >= nodules_min, "synthetic spec: invalid nodule count range");
    require(radius_min_mm > 0 && radius_max_mm >= radius_min_mm, "synthetic spec: invalid radius range");
    require(max_positive_fraction > 0 && max_positive_fraction <= 0.05,
            "synthetic spec: positive fraction budget must lie in (0, 0.05]");
    require(texture_sigma_vox >= 0 && texture_hu >= 0, "synthetic spec: texture parameters must be >= 0");
    require(max_retries >= 1, "synthetic spec: max_retries must be >= 1");
  }
};

struct SyntheticCase {
  Volume image;  // HU
  AnnotationSet annotations;
  LabelMap labels;
};

namespace detail {

inline void gaussian_blur_axis(std::vector<float>& buf, const Dims& d, int axis, double sigma) {
  if (sigma <= 0) return;
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double ksum = 0;
  for (int i = -radius; i <= radius; ++i) ksum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ksum;
  const int64_t n = d[axis];
  const int64_t stride = axis == 0 ? 1 : (axis == 1 ? d.nx : d.nx * d.ny);
  std::vector<double> line(n);
  const int64_t lines = int64_t(d.size()) / n;
  for (int64_t l = 0; l < lines; ++l) {
    int64_t base;
    if (axis == 0) {
      base = l * n;
    } else if (axis == 1) {
      base = (l / d.nx) * d.nx * d.ny + l % d.nx;
    } else {
      base = l;
    }
    for (int64_t i = 0; i < n; ++i) line[i] = buf[base + i * stride];
    for (int64_t i = 0; i < n; ++i) {
      double acc = 0;
      for (int j = -radius; j <= radius; ++j) {
        int64_t s = i + j;
        // reflect at the border
        if (s < 0) s = -s - 1;
        if (s >= n) s = 2 * n - s - 1;
        s = std::clamp<int64_t>(s, 0, n - 1);
        acc += k[j + radius] * line[s];
      }
      buf[base + i * stride] = static_cast<float>(acc);
    }
  }
}

}  // namespace detail

/// Deterministic synthetic case for `seed`. Throws when the requested nodules
/// cannot be placed without overlap inside the positive-voxel budget.
inline SyntheticCase synthesize_case(const SyntheticSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const Dims d = spec.dims;
  const Vec3 spacing{spec.spacing_mm, spec.spacing_mm, spec.spacing_mm};

  std::vector<float> tex(d.size());
  for (auto& t : tex) t = static_cast<float>(rng.normal());
  for (int a = 0; a < 3; ++a) detail::gaussian_blur_axis(tex, d, a, spec.texture_sigma_vox);
  double mean = 0, sq = 0;
  for (float t : tex) {
    mean += t;
    sq += double(t) * t;
  }
  mean /= double(tex.size());
  const double sd = std::sqrt(std::max(sq / double(tex.size()) - mean * mean, 1e-12));

  SyntheticCase c{Volume(d, spacing), {}, LabelMap(d, spacing)};
  for (size_t i = 0; i < tex.size(); ++i) {
    c.image[i] = static_cast<float>(spec.background_hu + spec.texture_hu * (tex[i] - mean) / sd);
  }

  const int count = spec.nodules_min + int(rng.below(uint64_t(spec.nodules_max - spec.nodules_min + 1)));
  const auto budget = static_cast<size_t>(spec.max_positive_fraction * double(d.size()));
  size_t positives = 0;
  int retries = 0;
  while (int(c.annotations.nodules.size()) < count) {
    if (retries > spec.max_retries) {
      throw ValidationError("synthesize_case: could not place " + std::to_string(count) +
                            " non-overlapping nodules within the positive-voxel budget");
    }
    const double r = rng.uniform(spec.radius_min_mm, spec.radius_max_mm);
    Vec3 center;
    bool fits = true;
    for (int a = 0; a < 3; ++a) {
      const double extent = double(d[a] - 1) * spec.spacing_mm;
      const double lo = r + spec.spacing_mm, hi = extent - r - spec.spacing_mm;
      if (hi < lo) fits = false;
      center[a] = rng.uniform(lo, std::max(lo, hi));
    }
    for (const auto& n : c.annotations.nodules) {
      if (distance(n.center_mm, center) <= n.radius_mm + r + 2 * spec.spacing_mm) fits = false;
    }
    if (!fits) {
      ++retries;
      continue;
    }
    LabelMap sphere = rasterize_sphere(c.labels, center, r);
    const size_t vox = count_positive(sphere);
    if (vox == 0 || positives + vox > budget) {
      ++retries;
      continue;
    }
    positives += vox;
    Nodule n;
    n.id = int(c.annotations.nodules.size());
    n.center_mm = center;
    n.radius_mm = r;
    n.agreement_count = 4;
    c.annotations.nodules.push_back(n);
    for (size_t i = 0; i < sphere.size(); ++i) {
      if (sphere[i]) {
        c.labels[i] = 1;
        c.image[i] += static_cast<float>(spec.nodule_contrast_hu);
      }
    }
  }
  return c;
}

}  // namespace cased
