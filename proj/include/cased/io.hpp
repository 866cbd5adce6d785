/*
 * io.hpp
 *
 * On-disk formats. A volume is a `<stem>.json` header plus a `<stem>.raw`
 * payload (C-order, x fastest, little-endian). Annotations are a JSON array
 * of nodules.
 */
#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "cased/volume.hpp"

namespace cased {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) {
    return "f32le";
  } else {
    static_assert(std::is_same_v<T, uint8_t>, "volume files hold f32le or u8 voxels");
    return "u8";
  }
}

inline fs::path with_suffix(const fs::path& stem, const char* ext) {
  fs::path p = stem;
  if (p.extension() == ".json" || p.extension() == ".raw") p.replace_extension();
  p += ext;
  return p;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, std::string_view text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(text.data(), std::streamsize(text.size()));
  if (!out) throw IoError("write failed: " + p.string());
}

inline json parse_json(const std::string& text, const fs::path& where) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError("malformed JSON in " + where.string() + ": " + e.what());
  }
}

inline json read_json(const fs::path& p) { return parse_json(read_text(p), p); }

template <typename T>
void to_little_endian(std::vector<char>& bytes) {
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    for (size_t i = 0; i < bytes.size(); i += sizeof(T)) std::reverse(bytes.begin() + i, bytes.begin() + i + sizeof(T));
  }
}

inline Vec3 vec3_from(const json& j, const char* key) {
  const json& a = j.at(key);
  if (!a.is_array() || a.size() != 3) throw ValidationError(std::string("expected 3-vector for ") + key);
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

}  // namespace detail

inline json to_json(Vec3 v) { return json::array({v.x, v.y, v.z}); }

template <typename T>
void save_grid(const Grid<T>& g, const fs::path& stem) {
  json h;
  h["dims"] = {g.dims().nx, g.dims().ny, g.dims().nz};
  h["spacing_mm"] = to_json(g.spacing());
  h["origin_mm"] = to_json(g.origin());
  h["dtype"] = detail::dtype_name<T>();
  detail::write_text(detail::with_suffix(stem, ".json"), h.dump(2) + "\n");

  std::vector<char> bytes(g.size() * sizeof(T));
  std::memcpy(bytes.data(), g.data().data(), bytes.size());
  detail::to_little_endian<T>(bytes);
  detail::write_text(detail::with_suffix(stem, ".raw"), std::string_view(bytes.data(), bytes.size()));
}

template <typename T>
Grid<T> load_grid(const fs::path& stem) {
  const fs::path hp = detail::with_suffix(stem, ".json");
  const json h = detail::read_json(hp);
  Dims d;
  Vec3 spacing, origin;
  std::string dtype;
  try {
    const json& dj = h.at("dims");
    if (!dj.is_array() || dj.size() != 3) throw ValidationError("dims must have 3 entries");
    d = {dj[0].get<int64_t>(), dj[1].get<int64_t>(), dj[2].get<int64_t>()};
    spacing = detail::vec3_from(h, "spacing_mm");
    origin = detail::vec3_from(h, "origin_mm");
    dtype = h.at("dtype").get<std::string>();
  } catch (const json::exception& e) {
    throw ValidationError("malformed volume header " + hp.string() + ": " + e.what());
  }
  if (dtype != "f32le" && dtype != "u8") throw ValidationError("unsupported dtype '" + dtype + "' in " + hp.string());
  require(d.valid(), "volume header " + hp.string() + ": dims must be >= 1");

  const std::string payload = detail::read_text(detail::with_suffix(stem, ".raw"));
  const size_t elem = dtype == "u8" ? 1 : 4;
  if (payload.size() != d.size() * elem) {
    throw ValidationError("payload of " + stem.string() + " has " + std::to_string(payload.size()) +
                          " bytes, header implies " + std::to_string(d.size() * elem));
  }
  std::vector<T> values(d.size());
  if (dtype == detail::dtype_name<T>()) {
    std::vector<char> bytes(payload.begin(), payload.end());
    detail::to_little_endian<T>(bytes);
    std::memcpy(values.data(), bytes.data(), bytes.size());
  } else if (dtype == "u8") {
    // labels may be read as an image (e.g. a ground-truth "probability" map)
    for (size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(static_cast<uint8_t>(payload[i]));
  } else {
    throw ValidationError("cannot read " + dtype + " payload of " + stem.string() + " as " + detail::dtype_name<T>());
  }
  return Grid<T>(Array3<T>(d, std::move(values)), GridTransform{origin, spacing});
}

inline void save_volume(const Volume& v, const fs::path& stem) { save_grid(v, stem); }
inline Volume load_volume(const fs::path& stem) { return load_grid<float>(stem); }
inline void save_labels(const LabelMap& v, const fs::path& stem) { save_grid(v, stem); }
inline LabelMap load_labels(const fs::path& stem) { return load_grid<uint8_t>(stem); }

// ---------------------------------------------------------------------------
// Annotations

inline json annotations_to_json(const AnnotationSet& a) {
  json arr = json::array();
  for (const auto& n : a.nodules) {
    arr.push_back({{"id", n.id},
                   {"center_mm", to_json(n.center_mm)},
                   {"radius_mm", n.radius_mm},
                   {"agreement_count", n.agreement_count},
                   {"rater_masks", n.rater_masks}});
  }
  return arr;
}

inline AnnotationSet annotations_from_json(const json& j) {
  if (!j.is_array()) throw ValidationError("annotation file must hold a JSON array");
  AnnotationSet a;
  try {
    for (const auto& e : j) {
      Nodule n;
      n.id = e.at("id").get<int>();
      n.center_mm = detail::vec3_from(e, "center_mm");
      n.radius_mm = e.at("radius_mm").get<double>();
      n.agreement_count = e.value("agreement_count", 1);
      if (e.contains("rater_masks")) n.rater_masks = e.at("rater_masks").get<std::vector<std::vector<int64_t>>>();
      a.nodules.push_back(std::move(n));
    }
  } catch (const json::exception& ex) {
    throw ValidationError(std::string("malformed annotation entry: ") + ex.what());
  }
  a.validate();
  return a;
}

inline void save_annotations(const AnnotationSet& a, const fs::path& path) {
  detail::write_text(path, annotations_to_json(a).dump(2) + "\n");
}

inline AnnotationSet load_annotations(const fs::path& path) {
  return annotations_from_json(detail::read_json(path));
}

}  // namespace cased
