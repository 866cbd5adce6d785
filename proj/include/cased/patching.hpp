/*
 * patching.hpp
 *
 * Patch geometry. The finite training set is the non-overlapping tiling of
 * each volume's output grid by `output_stride` cubes; each tile's network
 * input is the tile extended by `context_margin / 2` voxels per side, with
 * mirror padding outside the volume.
 */
#pragma once

#include "cased/volume.hpp"

namespace cased {

struct PatchGeometry {
  int64_t output_stride = 8;
  int64_t context_margin = 8;

  int64_t input_size() const { return output_stride + context_margin; }
  int64_t half_margin() const { return context_margin / 2; }

  void validate() const {
    require(output_stride >= 1, "patch geometry: output_stride must be >= 1");
    require(context_margin >= 0 && context_margin % 2 == 0, "patch geometry: context_margin must be even and >= 0");
  }
  friend bool operator==(const PatchGeometry&, const PatchGeometry&) = default;
};

/// One training patch: a volume and the low corner (in voxels) of its
/// output region.
struct PatchIndex {
  int32_t volume_id = 0;
  Index3 corner;

  friend auto operator<=>(const PatchIndex&, const PatchIndex&) = default;
};

enum class PatchClass { background, nodule };

/// Non-overlapping tiling of the output grid in scan order (x fastest).
/// Voxels past the last full tile on an axis are left out, with a warning.
inline std::vector<PatchIndex> enumerate_patches(const Dims& dims, const PatchGeometry& geom, int32_t volume_id = 0) {
  geom.validate();
  const int64_t s = geom.output_stride;
  std::vector<PatchIndex> out;
  if (dims.nx < s || dims.ny < s || dims.nz < s) {
    warn("enumerate_patches: volume " + std::to_string(volume_id) + " is smaller than the output stride");
    return out;
  }
  const int64_t tx = dims.nx / s, ty = dims.ny / s, tz = dims.nz / s;
  if (dims.nx % s || dims.ny % s || dims.nz % s) {
    std::ostringstream os;
    os << "enumerate_patches: volume " << volume_id << " dims (" << dims.nx << ", " << dims.ny << ", " << dims.nz
       << ") leave a trailing slab of (" << dims.nx % s << ", " << dims.ny % s << ", " << dims.nz % s
       << ") voxels outside the training tiles";
    warn(os.str());
  }
  out.reserve(size_t(tx * ty * tz));
  for (int64_t z = 0; z < tz; ++z)
    for (int64_t y = 0; y < ty; ++y)
      for (int64_t x = 0; x < tx; ++x) out.push_back({volume_id, {x * s, y * s, z * s}});
  return out;
}

inline bool output_region_inside(const Dims& dims, const PatchIndex& p, int64_t stride) {
  for (int a = 0; a < 3; ++a) {
    if (p.corner[a] < 0 || p.corner[a] + stride > dims[a]) return false;
  }
  return true;
}

/// Nodule iff any labeled voxel lies inside the output region; the context
/// margin does not matter.
inline PatchClass classify_patch(const PatchIndex& p, const LabelMap& labels, int64_t output_stride) {
  require(output_region_inside(labels.dims(), p, output_stride), "classify_patch: output region outside the grid");
  for (int64_t z = 0; z < output_stride; ++z)
    for (int64_t y = 0; y < output_stride; ++y)
      for (int64_t x = 0; x < output_stride; ++x)
        if (labels(p.corner.x + x, p.corner.y + y, p.corner.z + z)) return PatchClass::nodule;
  return PatchClass::background;
}

/// Reflects an index into [0, n) without repeating the edge voxel
/// (-1 -> 1, n -> n-2). A single-voxel axis maps everything to 0.
inline int64_t mirror_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// Copies the box [lo, lo + size) of `src`, mirror-reflecting outside indices.
template <typename Out, typename In>
Array3<Out> extract_region(const Array3<In>& src, Index3 lo, Dims size) {
  Array3<Out> out(size);
  const Dims& d = src.dims();
  const bool interior = lo.x >= 0 && lo.y >= 0 && lo.z >= 0 && lo.x + size.nx <= d.nx && lo.y + size.ny <= d.ny &&
                        lo.z + size.nz <= d.nz;
  std::vector<int64_t> xs(size_t(size.nx));
  for (int64_t x = 0; x < size.nx; ++x) xs[size_t(x)] = interior ? lo.x + x : mirror_index(lo.x + x, d.nx);
  for (int64_t z = 0; z < size.nz; ++z) {
    const int64_t sz = interior ? lo.z + z : mirror_index(lo.z + z, d.nz);
    for (int64_t y = 0; y < size.ny; ++y) {
      const int64_t sy = interior ? lo.y + y : mirror_index(lo.y + y, d.ny);
      const In* row = &src(0, sy, sz);
      Out* dst = &out(0, y, z);
      for (int64_t x = 0; x < size.nx; ++x) dst[x] = static_cast<Out>(row[xs[size_t(x)]]);
    }
  }
  return out;
}

template <typename Real = float>
struct PatchPair {
  Array3<Real> input;     // input_size^3, mirror-padded
  Array3<uint8_t> target;  // output_stride^3, never padded
};

template <typename Real = float>
PatchPair<Real> extract_patch(const Volume& v, const LabelMap* labels, const PatchIndex& p, const PatchGeometry& geom) {
  geom.validate();
  const int64_t s = geom.output_stride;
  require(output_region_inside(v.dims(), p, s), "extract_patch: output region outside the volume");
  const int64_t h = geom.half_margin();
  PatchPair<Real> out;
  out.input = extract_region<Real>(v.values(), p.corner - Index3{h, h, h}, Dims::cube(geom.input_size()));
  if (labels) {
    require(labels->dims() == v.dims(), "extract_patch: label grid differs from image grid");
    out.target = extract_region<uint8_t>(labels->values(), p.corner, Dims::cube(s));
  }
  return out;
}

template <typename Real = float>
PatchPair<Real> extract_patch(const Volume& v, const LabelMap& labels, const PatchIndex& p, const PatchGeometry& geom) {
  return extract_patch<Real>(v, &labels, p, geom);
}

}  // namespace cased
