/*
 * pipeline.hpp
 *
 * Training loop (sampler -> patches -> FCN -> Nesterov step, with periodic
 * false-positive mining on a weight snapshot), whole-volume prediction by
 * tiling, and the sampler comparison experiment.
 */
#pragma once

#include <chrono>
#include <functional>
#include <future>
#include <set>

#include "cased/eval.hpp"
#include "cased/io.hpp"
#include "cased/model.hpp"
#include "cased/patching.hpp"
#include "cased/postprocess.hpp"
#include "cased/sampler.hpp"
#include "cased/volume.hpp"

namespace cased {

// ---------------------------------------------------------------------------
// Data

struct PreprocessConfig {
  HuWindow window;
  /// 0 keeps the native grid.
  double target_spacing_mm = 0.0;
};

/// A scan ready for training or prediction: rescaled image and labels on the
/// working grid, plus the native transform for reporting.
struct Case {
  std::string id;
  Volume image;
  LabelMap labels;
  AnnotationSet annotations;
  GridTransform native;
};

/// `labels` (native grid) may be null; reference labels are then built from
/// the annotations.
inline Case prepare_case(std::string id, const Volume& hu, const AnnotationSet& ann, const LabelMap* labels,
                         const PreprocessConfig& pre) {
  Case c;
  c.id = std::move(id);
  c.annotations = ann;
  c.native = hu.transform();
  LabelMap native_labels = labels ? *labels : build_reference_labels(hu, ann);
  require(native_labels.same_geometry(hu), "case " + c.id + ": label grid differs from image grid");
  Volume img = rescale_intensity(hu, pre.window);
  const bool resample = pre.target_spacing_mm > 0 && !(hu.spacing() == Vec3{pre.target_spacing_mm, pre.target_spacing_mm,
                                                                            pre.target_spacing_mm});
  if (resample) {
    c.image = resample_isotropic(img, pre.target_spacing_mm, Interpolation::trilinear).grid;
    c.labels = resample_isotropic(native_labels, pre.target_spacing_mm, Interpolation::nearest).grid;
  } else {
    c.image = std::move(img);
    c.labels = std::move(native_labels);
  }
  return c;
}

/// Dataset manifest: {"cases": [{"id", "image", "labels"?, "annotations"}]},
/// paths relative to the manifest.
struct ManifestEntry {
  std::string id;
  fs::path image, labels, annotations;
};

inline std::vector<ManifestEntry> load_manifest(const fs::path& path) {
  const json j = detail::read_json(path);
  const fs::path base = path.parent_path();
  std::vector<ManifestEntry> out;
  try {
    for (const auto& e : j.at("cases")) {
      ManifestEntry m;
      m.id = e.at("id").get<std::string>();
      m.image = base / e.at("image").get<std::string>();
      if (e.contains("labels")) m.labels = base / e.at("labels").get<std::string>();
      m.annotations = base / e.at("annotations").get<std::string>();
      out.push_back(std::move(m));
    }
  } catch (const json::exception& ex) {
    throw ValidationError("malformed dataset manifest " + path.string() + ": " + ex.what());
  }
  require(!out.empty(), "dataset manifest " + path.string() + " lists no cases");
  return out;
}

inline void save_manifest(const std::vector<ManifestEntry>& entries, const fs::path& path) {
  const fs::path base = path.parent_path();
  json cases = json::array();
  for (const auto& e : entries) {
    json c = {{"id", e.id},
              {"image", fs::relative(e.image, base).generic_string()},
              {"annotations", fs::relative(e.annotations, base).generic_string()}};
    if (!e.labels.empty()) c["labels"] = fs::relative(e.labels, base).generic_string();
    cases.push_back(std::move(c));
  }
  detail::write_text(path, json{{"cases", cases}}.dump(2) + "\n");
}

inline std::vector<Case> load_dataset(const fs::path& manifest, const PreprocessConfig& pre) {
  std::vector<Case> out;
  for (const auto& e : load_manifest(manifest)) {
    const Volume hu = load_volume(e.image);
    const AnnotationSet ann = load_annotations(e.annotations);
    if (e.labels.empty()) {
      out.push_back(prepare_case(e.id, hu, ann, nullptr, pre));
    } else {
      const LabelMap lab = load_labels(e.labels);
      out.push_back(prepare_case(e.id, hu, ann, &lab, pre));
    }
  }
  return out;
}

/// Writes `count` synthetic cases as `<prefix>NNN` under `dir`, with a
/// dataset.json manifest and one annotation file per case in annotations/.
inline std::vector<ManifestEntry> write_synthetic_dataset(const SyntheticSpec& spec, int count, uint64_t seed,
                                                          const fs::path& dir, const std::string& prefix = "case") {
  require(count >= 1, "synthetic dataset: count must be >= 1");
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < count; ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s%03d", prefix.c_str(), i);
    const SyntheticCase c = synthesize_case(spec, derive_seed(seed, uint64_t(i)));
    ManifestEntry e{name, dir / "images" / name, dir / "labels" / name, dir / "annotations" / (std::string(name) + ".json")};
    save_volume(c.image, e.image);
    save_labels(c.labels, e.labels);
    save_annotations(c.annotations, e.annotations);
    entries.push_back(std::move(e));
  }
  save_manifest(entries, dir / "dataset.json");
  return entries;
}

/// In-memory synthetic cases; case i uses derive_seed(seed, i) as for
/// write_synthetic_dataset.
inline std::vector<Case> synthesize_dataset(const SyntheticSpec& spec, int count, uint64_t seed,
                                            const PreprocessConfig& pre, const std::string& prefix = "case") {
  std::vector<Case> out;
  for (int i = 0; i < count; ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s%03d", prefix.c_str(), i);
    const SyntheticCase c = synthesize_case(spec, derive_seed(seed, uint64_t(i)));
    out.push_back(prepare_case(name, c.image, c.annotations, &c.labels, pre));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prediction

struct PredictOptions {
  /// Output voxels per tile side; rounded down to a multiple of the stride.
  int64_t tile_output = 64;
};

/// Probability map over every voxel. Tiles of multiples of the output stride
/// are laid from the low corner; on an axis whose length is not covered the
/// last tile is shifted back to end at the border and only fills voxels no
/// earlier tile wrote. Context outside the volume is mirror-padded.
template <typename Real>
Volume predict_volume(const Fcn<Real>& net, const Weights<Real>& w, const PatchGeometry& geom, const Volume& v,
                      const PredictOptions& opt = {}) {
  net.check_geometry(geom);
  const int64_t s = geom.output_stride, h = geom.half_margin();
  const Dims& d = v.dims();
  for (int a = 0; a < 3; ++a) {
    if (d[a] < s) {
      throw ValidationError("predict_volume: volume axis " + std::to_string(a) + " has " + std::to_string(d[a]) +
                            " voxels, fewer than the output stride " + std::to_string(s));
    }
  }
  const int64_t cap = std::max(s, opt.tile_output / s * s);
  std::array<int64_t, 3> tile{};
  std::array<std::vector<int64_t>, 3> starts;
  for (int a = 0; a < 3; ++a) {
    tile[size_t(a)] = std::min(cap, d[a] / s * s);
    const int64_t t = tile[size_t(a)];
    for (int64_t p = 0; p + t <= d[a]; p += t) starts[size_t(a)].push_back(p);
    if (starts[size_t(a)].back() + t < d[a]) starts[size_t(a)].push_back(d[a] - t);
  }
  const Dims out_size{tile[0], tile[1], tile[2]};
  const Dims in_size{tile[0] + 2 * h, tile[1] + 2 * h, tile[2] + 2 * h};
  Volume prob = Volume::like(v);
  Array3<uint8_t> written(d, 0);
  for (int64_t sz : starts[2])
    for (int64_t sy : starts[1])
      for (int64_t sx : starts[0]) {
        const Array3<Real> in = extract_region<Real>(v.values(), Index3{sx - h, sy - h, sz - h}, in_size);
        const Activations<Real> act = net.forward(w, in);
        const Tensor<Real>& o = act.output();
        require(o.d == out_size, "predict_volume: network output does not match the tile");
        for (int64_t z = 0; z < out_size.nz; ++z)
          for (int64_t y = 0; y < out_size.ny; ++y)
            for (int64_t x = 0; x < out_size.nx; ++x) {
              const size_t i = d.linear(sx + x, sy + y, sz + z);
              if (written[i]) continue;
              written[i] = 1;
              prob[i] = static_cast<float>(o.at(0, x, y, z));
            }
      }
  return prob;
}

// ---------------------------------------------------------------------------
// Training

struct MiningConfig {
  int64_t every = 200;
  /// Fraction of training volumes predicted per pass, rotated across passes.
  double coverage = 1.0;
  /// A background voxel above this probability is a false positive.
  double threshold = 0.5;

  void validate() const {
    require(every >= 1, "mining: every must be >= 1");
    require(coverage > 0 && coverage <= 1, "mining: coverage must lie in (0, 1]");
    require(threshold > 0 && threshold < 1, "mining: threshold must lie in (0, 1)");
  }
};

struct TrainConfig {
  /// Dataset manifest; when empty, `synthetic_cases` cases are generated.
  std::string dataset;
  SyntheticSpec synthetic;
  int synthetic_cases = 0;
  uint64_t data_seed = 0;
  PreprocessConfig preprocess;
  FcnConfig model;
  /// context_margin < 0 means "take it from the model".
  PatchGeometry geometry{8, -1};
  DecaySchedule curriculum = DecaySchedule::exponential(2000.0);
  DecaySchedule hard_share = DecaySchedule::exponential(4000.0);
  HardnessMode hardness = HardnessMode::fp_flag;
  int batch_size = 16;
  int64_t iterations = 1000;
  MiningConfig mining;
  OptimizerParams optimizer;
  uint64_t seed = 0;
  /// Single-threaded and wall-clock free; false runs mining on a worker thread.
  bool deterministic = true;
  std::string checkpoint_dir;
  int64_t checkpoint_every = 0;
  std::string metrics_path;

  /// Geometry with the margin resolved against the model.
  PatchGeometry resolved_geometry() const {
    PatchGeometry g = geometry;
    if (g.context_margin < 0) g.context_margin = Fcn<float>(model).context_margin();
    return g;
  }

  void validate() const {
    require(batch_size >= 1, "train config: batch_size must be >= 1");
    require(iterations >= 0, "train config: iterations must be >= 0");
    require(checkpoint_every >= 0, "train config: checkpoint_every must be >= 0");
    require(optimizer.learning_rate > 0, "train config: learning_rate must be > 0");
    require(optimizer.momentum >= 0 && optimizer.momentum < 1, "train config: momentum must lie in [0, 1)");
    mining.validate();
    curriculum.validate();
    hard_share.validate();
    model.validate();
    Fcn<float>(model).check_geometry(resolved_geometry());
    require(!dataset.empty() || synthetic_cases >= 1, "train config: needs a dataset or synthetic_cases >= 1");
  }

  /// Mining only matters when background draws can favor hard patches.
  bool mining_enabled() const {
    const bool no_hard = hard_share.kind == ScheduleKind::constant && hard_share.value == 0.0;
    const bool no_background = curriculum.kind == ScheduleKind::constant && curriculum.value == 1.0;
    return !no_hard && !no_background;
  }
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  require(j.is_object(), where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    require(ok, where + ": unknown key '" + k + "'");
  }
}

}  // namespace detail

inline json synthetic_spec_to_json(const SyntheticSpec& s) {
  return {{"dims", {s.dims.nx, s.dims.ny, s.dims.nz}},
          {"spacing_mm", s.spacing_mm},
          {"nodules_min", s.nodules_min},
          {"nodules_max", s.nodules_max},
          {"radius_min_mm", s.radius_min_mm},
          {"radius_max_mm", s.radius_max_mm},
          {"background_hu", s.background_hu},
          {"texture_hu", s.texture_hu},
          {"texture_sigma_vox", s.texture_sigma_vox},
          {"nodule_contrast_hu", s.nodule_contrast_hu},
          {"max_positive_fraction", s.max_positive_fraction},
          {"max_retries", s.max_retries}};
}

inline SyntheticSpec synthetic_spec_from_json(const json& j) {
  detail::check_keys(j,
                     {"dims", "spacing_mm", "nodules_min", "nodules_max", "radius_min_mm", "radius_max_mm",
                      "background_hu", "texture_hu", "texture_sigma_vox", "nodule_contrast_hu",
                      "max_positive_fraction", "max_retries"},
                     "synthetic spec");
  SyntheticSpec s;
  try {
    if (j.contains("dims")) {
      const auto& d = j.at("dims");
      if (d.is_number_integer()) {
        s.dims = Dims::cube(d.get<int64_t>());
      } else {
        require(d.is_array() && d.size() == 3, "synthetic spec: dims must be an integer or a 3-array");
        s.dims = {d[0].get<int64_t>(), d[1].get<int64_t>(), d[2].get<int64_t>()};
      }
    }
    s.spacing_mm = j.value("spacing_mm", s.spacing_mm);
    s.nodules_min = j.value("nodules_min", s.nodules_min);
    s.nodules_max = j.value("nodules_max", s.nodules_max);
    s.radius_min_mm = j.value("radius_min_mm", s.radius_min_mm);
    s.radius_max_mm = j.value("radius_max_mm", s.radius_max_mm);
    s.background_hu = j.value("background_hu", s.background_hu);
    s.texture_hu = j.value("texture_hu", s.texture_hu);
    s.texture_sigma_vox = j.value("texture_sigma_vox", s.texture_sigma_vox);
    s.nodule_contrast_hu = j.value("nodule_contrast_hu", s.nodule_contrast_hu);
    s.max_positive_fraction = j.value("max_positive_fraction", s.max_positive_fraction);
    s.max_retries = j.value("max_retries", s.max_retries);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

inline json train_config_to_json(const TrainConfig& c) {
  json j;
  j["dataset"] = c.dataset;
  j["synthetic"] = synthetic_spec_to_json(c.synthetic);
  j["synthetic_cases"] = c.synthetic_cases;
  j["data_seed"] = c.data_seed;
  j["preprocess"] = {{"hu_min", c.preprocess.window.lo},
                     {"hu_max", c.preprocess.window.hi},
                     {"target_spacing_mm", c.preprocess.target_spacing_mm}};
  j["model"] = fcn_config_to_json(c.model);
  j["geometry"] = {{"output_stride", c.geometry.output_stride}, {"context_margin", c.geometry.context_margin}};
  j["sampler"] = {{"curriculum", CasedSampler::schedule_to_json(c.curriculum)},
                  {"hard_share", CasedSampler::schedule_to_json(c.hard_share)},
                  {"hardness", c.hardness == HardnessMode::fp_flag ? "fp_flag" : "loss"}};
  j["batch_size"] = c.batch_size;
  j["iterations"] = c.iterations;
  j["mining"] = {{"every", c.mining.every}, {"coverage", c.mining.coverage}, {"threshold", c.mining.threshold}};
  j["optimizer"] = {{"learning_rate", c.optimizer.learning_rate}, {"momentum", c.optimizer.momentum}};
  j["seed"] = c.seed;
  j["deterministic"] = c.deterministic;
  j["checkpoint_dir"] = c.checkpoint_dir;
  j["checkpoint_every"] = c.checkpoint_every;
  j["metrics_path"] = c.metrics_path;
  return j;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  detail::check_keys(j,
                     {"dataset", "synthetic", "synthetic_cases", "data_seed", "preprocess", "model", "geometry",
                      "sampler", "batch_size", "iterations", "mining", "optimizer", "seed", "deterministic",
                      "checkpoint_dir", "checkpoint_every", "metrics_path"},
                     "train config");
  try {
    c.dataset = j.value("dataset", c.dataset);
    if (j.contains("synthetic")) c.synthetic = synthetic_spec_from_json(j.at("synthetic"));
    c.synthetic_cases = j.value("synthetic_cases", c.synthetic_cases);
    c.data_seed = j.value("data_seed", c.data_seed);
    if (j.contains("preprocess")) {
      const json& p = j.at("preprocess");
      detail::check_keys(p, {"hu_min", "hu_max", "target_spacing_mm"}, "preprocess");
      c.preprocess.window.lo = p.value("hu_min", c.preprocess.window.lo);
      c.preprocess.window.hi = p.value("hu_max", c.preprocess.window.hi);
      c.preprocess.target_spacing_mm = p.value("target_spacing_mm", c.preprocess.target_spacing_mm);
    }
    if (j.contains("model")) {
      detail::check_keys(j.at("model"), {"arch", "layers", "channels"}, "model");
      c.model = fcn_config_from_json(j.at("model"));
    }
    if (j.contains("geometry")) {
      const json& g = j.at("geometry");
      detail::check_keys(g, {"output_stride", "context_margin"}, "geometry");
      c.geometry.output_stride = g.value("output_stride", c.geometry.output_stride);
      c.geometry.context_margin = g.value("context_margin", c.geometry.context_margin);
    }
    if (j.contains("sampler")) {
      const json& s = j.at("sampler");
      detail::check_keys(s, {"curriculum", "hard_share", "hardness"}, "sampler");
      if (s.contains("curriculum")) c.curriculum = CasedSampler::schedule_from_json(s.at("curriculum"));
      if (s.contains("hard_share")) c.hard_share = CasedSampler::schedule_from_json(s.at("hard_share"));
      if (s.contains("hardness")) {
        const auto h = s.at("hardness").get<std::string>();
        require(h == "fp_flag" || h == "loss", "sampler: hardness must be fp_flag or loss");
        c.hardness = h == "fp_flag" ? HardnessMode::fp_flag : HardnessMode::loss;
      }
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.iterations = j.value("iterations", c.iterations);
    if (j.contains("mining")) {
      const json& m = j.at("mining");
      detail::check_keys(m, {"every", "coverage", "threshold"}, "mining");
      c.mining.every = m.value("every", c.mining.every);
      c.mining.coverage = m.value("coverage", c.mining.coverage);
      c.mining.threshold = m.value("threshold", c.mining.threshold);
    }
    if (j.contains("optimizer")) {
      const json& o = j.at("optimizer");
      detail::check_keys(o, {"learning_rate", "momentum"}, "optimizer");
      c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
      c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
    }
    c.seed = j.value("seed", c.seed);
    c.deterministic = j.value("deterministic", c.deterministic);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.metrics_path = j.value("metrics_path", c.metrics_path);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed train config: ") + e.what());
  }
  return c;
}

struct MetricsRecord {
  int64_t iter = 0;
  double loss = 0;
  double f_n = 0;
  size_t fp_set_size = 0;
  double wall_ms = 0;
};

inline std::string metrics_line(const MetricsRecord& m) {
  json j = {{"iter", m.iter}, {"loss", m.loss}, {"f_n", m.f_n}, {"fp_set_size", m.fp_set_size}, {"wall_ms", m.wall_ms}};
  return j.dump();
}

/// Loss became NaN or infinite.
class TrainingDiverged : public std::runtime_error {
public:
  explicit TrainingDiverged(int64_t iter)
      : std::runtime_error("non-finite loss at iteration " + std::to_string(iter) +
                           "; lower optimizer.learning_rate or check the input intensities") {}
};

/// Per-patch mining outcome of one volume under fixed weights.
template <typename Real>
std::vector<MiningResult> mine_volume(const Fcn<Real>& net, const Weights<Real>& w, const PatchGeometry& geom,
                                      const Case& c, int32_t volume_id, double threshold) {
  const Volume prob = predict_volume(net, w, geom, c.image);
  std::vector<MiningResult> out;
  const int64_t s = geom.output_stride;
  for (const PatchIndex& p : enumerate_patches(c.image.dims(), geom, volume_id)) {
    MiningResult r{p, false, 0.0};
    double acc = 0;
    for (int64_t z = 0; z < s; ++z)
      for (int64_t y = 0; y < s; ++y)
        for (int64_t x = 0; x < s; ++x) {
          const int64_t X = p.corner.x + x, Y = p.corner.y + y, Z = p.corner.z + z;
          const double q = std::clamp(double(prob(X, Y, Z)), kBceEpsilon, 1.0 - kBceEpsilon);
          const bool label = c.labels(X, Y, Z) != 0;
          if (!label && q > threshold) r.has_false_positive = true;
          acc -= label ? std::log(q) : std::log(1 - q);
        }
    r.loss = acc / double(s * s * s);
    out.push_back(r);
  }
  return out;
}

/// Volumes scanned by mining pass `pass` (1-based): a window of
/// ceil(coverage * V) volumes that advances by its own length each pass.
inline std::vector<int32_t> mining_volumes(size_t volume_count, double coverage, int64_t pass) {
  const auto n = size_t(volume_count);
  const size_t k = std::clamp<size_t>(size_t(std::ceil(coverage * double(n) - 1e-9)), 1, n);
  std::vector<int32_t> out;
  const size_t start = size_t((pass - 1) % int64_t(n)) * k % n;
  for (size_t i = 0; i < k; ++i) out.push_back(int32_t((start + i) % n));
  std::sort(out.begin(), out.end());
  return out;
}

/// Stateful training run. Iteration tau: mining pass if tau is a positive
/// multiple of mining.every, then one mini-batch step, then tau + 1.
class Trainer {
public:
  using MetricsSink = std::function<void(const MetricsRecord&)>;

  Trainer(TrainConfig cfg, std::vector<Case> data)
      : cfg_(std::move(cfg)), geom_(cfg_.resolved_geometry()), net_(cfg_.model), data_(std::move(data)),
        sampler_(build_sampler()) {
    weights_ = net_.init_weights(derive_seed(cfg_.seed, 1));
  }

  /// Continues from a checkpoint written by save(); the dataset must be the one
  /// the run started with.
  Trainer(TrainConfig cfg, std::vector<Case> data, const ModelCheckpoint& ck) : Trainer(std::move(cfg), std::move(data)) {
    require(ck.config == cfg_.model, "resume: checkpoint model differs from the configuration");
    require(ck.weights.params.size() == weights_.params.size(), "resume: checkpoint size mismatch");
    weights_.params.assign(ck.weights.params.begin(), ck.weights.params.end());
    weights_.momentum.assign(ck.weights.momentum.begin(), ck.weights.momentum.end());
    weights_.version = ck.weights.version;
    require(ck.extra.contains("sampler"), "resume: checkpoint carries no sampler state");
    sampler_.restore(ck.extra.at("sampler"));
    require(sampler_.tau() == ck.iteration, "resume: sampler and model iteration disagree");
  }

  ~Trainer() { drain(); }
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const { return cfg_; }
  const Fcn<float>& network() const { return net_; }
  const PatchGeometry& geometry() const { return geom_; }
  const Weights<float>& weights() const { return weights_; }
  const CasedSampler& sampler() const { return sampler_; }
  const std::vector<Case>& data() const { return data_; }
  int64_t iteration() const { return sampler_.tau(); }

  /// Runs iterations until tau == `until`.
  void run_until(int64_t until, const MetricsSink& sink = {}) {
    while (sampler_.tau() < until) {
      step(sink);
      const int64_t done = sampler_.tau();
      if (cfg_.checkpoint_every > 0 && !cfg_.checkpoint_dir.empty() && done % cfg_.checkpoint_every == 0 && done < until) {
        save(fs::path(cfg_.checkpoint_dir) / ("iter_" + std::to_string(done)));
      }
    }
    drain();
  }

  void step(const MetricsSink& sink = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const int64_t tau = sampler_.tau();
    collect(false);
    if (tau > 0 && tau % cfg_.mining.every == 0 && cfg_.mining_enabled()) mine(tau / cfg_.mining.every);

    const double fn = sampler_.mixing();
    const auto batch = sampler_.sample_batch(size_t(cfg_.batch_size));
    std::vector<float> grad(weights_.params.size(), 0.0f);
    std::vector<float> g(weights_.params.size());
    double loss = 0;
    const double inv_b = 1.0 / double(batch.size());
    for (const PatchIndex& p : batch) {
      const Case& c = data_[size_t(p.volume_id)];
      const auto pair = extract_patch<float>(c.image, c.labels, p, geom_);
      const auto act = net_.forward(weights_, pair.input);
      auto lr = bce_loss(act.output(), pair.target);
      if (!std::isfinite(lr.loss)) throw TrainingDiverged(tau);
      loss += lr.loss * inv_b;
      std::fill(g.begin(), g.end(), 0.0f);
      net_.backward(weights_, act, lr.grad, std::span<float>(g));
      for (size_t i = 0; i < g.size(); ++i) grad[i] += static_cast<float>(g[i] * inv_b);
    }
    sgd_nesterov_step(weights_, std::span<const float>(grad), cfg_.optimizer.learning_rate, cfg_.optimizer.momentum);
    sampler_.advance();

    if (sink) {
      MetricsRecord m{tau, loss, fn, sampler_.fp_set_size(), 0.0};
      if (!cfg_.deterministic) {
        m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      }
      sink(m);
    }
  }

  ModelCheckpoint checkpoint() {
    drain();
    ModelCheckpoint ck;
    ck.config = cfg_.model;
    ck.optimizer = cfg_.optimizer;
    ck.iteration = sampler_.tau();
    ck.weights = weights_;
    ck.extra = {{"sampler", sampler_.checkpoint()},
                {"geometry", {{"output_stride", geom_.output_stride}, {"context_margin", geom_.context_margin}}},
                {"train_config", train_config_to_json(cfg_)}};
    return ck;
  }

  void save(const fs::path& dir) { save_checkpoint(dir, checkpoint()); }

private:
  CasedSampler build_sampler() const {
    cfg_.validate();
    require(!data_.empty(), "train: the dataset is empty");
    std::vector<PatchRecord> records;
    for (size_t v = 0; v < data_.size(); ++v) {
      const Case& c = data_[v];
      require(c.image.same_geometry(c.labels), "train: case " + c.id + " has mismatched image and labels");
      for (const PatchIndex& p : enumerate_patches(c.image.dims(), geom_, int32_t(v))) {
        PatchRecord r;
        r.index = p;
        r.is_nodule = classify_patch(p, c.labels, geom_.output_stride) == PatchClass::nodule;
        records.push_back(r);
      }
    }
    require(!records.empty(), "train: no volume holds a full output tile");
    if (std::none_of(records.begin(), records.end(), [](const PatchRecord& r) { return r.is_nodule; })) {
      throw NoPositivePatches();
    }
    SamplerConfig sc;
    sc.curriculum = cfg_.curriculum;
    sc.hard_share = cfg_.hard_share;
    sc.hardness = cfg_.hardness;
    sc.seed = derive_seed(cfg_.seed, 2);
    return CasedSampler(std::move(records), sc);
  }

  std::vector<MiningResult> run_mining(std::shared_ptr<const Weights<float>> snap, std::vector<int32_t> vols) const {
    std::vector<MiningResult> all;
    for (int32_t v : vols) {
      auto r = mine_volume(net_, *snap, geom_, data_[size_t(v)], v, cfg_.mining.threshold);
      all.insert(all.end(), r.begin(), r.end());
    }
    return all;
  }

  void mine(int64_t pass) {
    auto snap = snapshot(weights_);
    auto vols = mining_volumes(data_.size(), cfg_.mining.coverage, pass);
    if (cfg_.deterministic) {
      const auto results = run_mining(snap, vols);
      sampler_.record_mining_results(results);
    } else {
      collect(true);
      pending_ = std::async(std::launch::async, [this, snap, vols] { return run_mining(snap, vols); });
    }
  }

  /// Applies a finished background mining pass; `wait` blocks for it.
  void collect(bool wait) {
    if (!pending_.valid()) return;
    if (!wait && pending_.wait_for(std::chrono::seconds(0)) != std::future_status::ready) return;
    const auto results = pending_.get();
    sampler_.record_mining_results(results);
  }

  void drain() {
    if (pending_.valid()) collect(true);
  }

  TrainConfig cfg_;
  PatchGeometry geom_;
  Fcn<float> net_;
  std::vector<Case> data_;
  CasedSampler sampler_;
  Weights<float> weights_;
  std::future<std::vector<MiningResult>> pending_;
};

/// Dataset named by the config: the manifest, or generated synthetic cases.
inline std::vector<Case> load_training_data(const TrainConfig& cfg) {
  if (!cfg.dataset.empty()) return load_dataset(cfg.dataset, cfg.preprocess);
  return synthesize_dataset(cfg.synthetic, cfg.synthetic_cases, cfg.data_seed, cfg.preprocess);
}

/// Appends NDJSON metric lines to `path` (truncated first unless `append`).
class MetricsWriter {
public:
  MetricsWriter(const fs::path& path, bool append) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw IoError("cannot write " + path.string());
  }
  void operator()(const MetricsRecord& m) {
    out_ << metrics_line(m) << '\n';
    if (!out_) throw IoError("metrics write failed");
  }

private:
  std::ofstream out_;
};

/// Full run: trains cfg.iterations steps, writes metrics and the final
/// checkpoint (checkpoint_dir/final) when the paths are set.
inline ModelCheckpoint train(const TrainConfig& cfg, std::vector<Case> data) {
  Trainer t(cfg, std::move(data));
  std::optional<MetricsWriter> writer;
  if (!cfg.metrics_path.empty()) writer.emplace(cfg.metrics_path, false);
  t.run_until(cfg.iterations, writer ? Trainer::MetricsSink(std::ref(*writer)) : Trainer::MetricsSink{});
  ModelCheckpoint ck = t.checkpoint();
  if (!cfg.checkpoint_dir.empty()) save_checkpoint(fs::path(cfg.checkpoint_dir) / "final", ck);
  return ck;
}

inline ModelCheckpoint train(const TrainConfig& cfg) { return train(cfg, load_training_data(cfg)); }

// ---------------------------------------------------------------------------
// Detection on a case

struct CaseDetections {
  Volume probability;
  std::vector<Candidate> candidates;
};

template <typename Real>
CaseDetections detect_case(const Fcn<Real>& net, const Weights<Real>& w, const PatchGeometry& geom, const Case& c,
                           const DetectionParams& params = {}) {
  CaseDetections out{predict_volume(net, w, geom, c.image), {}};
  out.candidates = detect_candidates(out.probability, c.native, params);
  return out;
}

inline ScanResult scan_result(const Case& c, const std::vector<Candidate>& cands, int min_agreement = 3) {
  ScanResult s{c.id, reference_from_annotations(c.annotations, min_agreement), {}};
  for (const auto& k : cands) s.candidates.push_back({k.position_mm, k.confidence});
  return s;
}

// ---------------------------------------------------------------------------
// Sampler comparison

enum class Strategy { uniform, nodule_only, curriculum_no_hnm, cased };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::uniform: return "uniform";
    case Strategy::nodule_only: return "nodule_only";
    case Strategy::curriculum_no_hnm: return "curriculum_no_hnm";
    case Strategy::cased: return "cased";
  }
  return "?";
}

inline Strategy strategy_from_name(const std::string& n) {
  for (Strategy s : {Strategy::uniform, Strategy::nodule_only, Strategy::curriculum_no_hnm, Strategy::cased})
    if (n == strategy_name(s)) return s;
  throw ValidationError("unknown strategy '" + n + "' (expected uniform, nodule_only, curriculum_no_hnm or cased)");
}

/// Training config of a strategy, derived from the CASED config `base`.
inline TrainConfig strategy_config(const TrainConfig& base, Strategy s) {
  TrainConfig c = base;
  switch (s) {
    case Strategy::uniform:
      c.curriculum = DecaySchedule::constant(0.0);
      c.hard_share = DecaySchedule::constant(0.0);
      break;
    case Strategy::nodule_only:
      c.curriculum = DecaySchedule::constant(1.0);
      break;
    case Strategy::curriculum_no_hnm:
      c.hard_share = DecaySchedule::constant(0.0);
      break;
    case Strategy::cased:
      break;
  }
  return c;
}

struct CompareConfig {
  TrainConfig train;
  std::vector<Strategy> strategies{Strategy::uniform, Strategy::nodule_only, Strategy::curriculum_no_hnm, Strategy::cased};
  /// Held-out set: a manifest, or synthetic cases from test_seed.
  std::string test_dataset;
  int test_cases = 10;
  uint64_t test_seed = 1;
  DetectionParams detection;
  HitRule hit_rule;
  int min_agreement = 3;
  size_t bootstrap_samples = 0;

  void validate() const {
    train.validate();
    require(!strategies.empty(), "compare: no strategies");
    require(!test_dataset.empty() || test_cases >= 1, "compare: needs a test dataset or test_cases >= 1");
  }
};

struct StrategyResult {
  Strategy strategy = Strategy::cased;
  FrocResult froc;
  /// All candidates above the detection threshold that are false positives, per scan.
  double fp_per_scan = 0;
  double candidates_per_scan = 0;
  double fp_at_matched_sensitivity = 0;
  std::vector<MetricsRecord> metrics;
};

struct CompareReport {
  std::vector<StrategyResult> results;
  /// Highest sensitivity every strategy with at least one detection reaches.
  double matched_sensitivity = 0;
};

inline CompareReport compare_samplers(const CompareConfig& cc, const std::vector<Case>& train_data,
                                      const std::vector<Case>& test_data) {
  cc.validate();
  require(!test_data.empty(), "compare: empty held-out set");
  CompareReport rep;
  for (Strategy s : cc.strategies) {
    TrainConfig tc = strategy_config(cc.train, s);
    tc.checkpoint_dir.clear();
    tc.metrics_path.clear();
    StrategyResult r;
    r.strategy = s;
    Trainer t(tc, train_data);
    t.run_until(tc.iterations, [&](const MetricsRecord& m) { r.metrics.push_back(m); });
    std::vector<ScanResult> scans;
    size_t n_cands = 0;
    for (const Case& c : test_data) {
      const auto det = detect_case(t.network(), t.weights(), t.geometry(), c, cc.detection);
      n_cands += det.candidates.size();
      scans.push_back(scan_result(c, det.candidates, cc.min_agreement));
    }
    r.froc = froc_curve(scans, cc.hit_rule);
    if (cc.bootstrap_samples > 0) attach_bootstrap(r.froc, bootstrap_froc(scans, cc.bootstrap_samples, tc.seed, cc.hit_rule));
    r.fp_per_scan = r.froc.curve.back().fp_per_scan;
    r.candidates_per_scan = double(n_cands) / double(scans.size());
    rep.results.push_back(std::move(r));
  }
  // strategies that find nothing would pin the match at zero
  rep.matched_sensitivity = 1.0;
  bool any = false;
  for (const auto& r : rep.results) {
    const double top = r.froc.curve.back().sensitivity;
    if (top <= 0) continue;
    rep.matched_sensitivity = std::min(rep.matched_sensitivity, top);
    any = true;
  }
  if (!any) rep.matched_sensitivity = 0;
  for (auto& r : rep.results) r.fp_at_matched_sensitivity = fp_at_sensitivity(r.froc.curve, rep.matched_sensitivity);
  return rep;
}

inline CompareReport compare_samplers(const CompareConfig& cc) {
  const auto train_data = load_training_data(cc.train);
  const auto test_data = cc.test_dataset.empty()
                             ? synthesize_dataset(cc.train.synthetic, cc.test_cases, cc.test_seed, cc.train.preprocess, "test")
                             : load_dataset(cc.test_dataset, cc.train.preprocess);
  return compare_samplers(cc, train_data, test_data);
}

inline json compare_config_to_json(const CompareConfig& c) {
  json s = json::array();
  for (Strategy x : c.strategies) s.push_back(strategy_name(x));
  return {{"train", train_config_to_json(c.train)},
          {"strategies", s},
          {"test_dataset", c.test_dataset},
          {"test_cases", c.test_cases},
          {"test_seed", c.test_seed},
          {"detection", {{"threshold", c.detection.threshold}, {"connectivity", c.detection.connectivity}}},
          {"min_agreement", c.min_agreement},
          {"bootstrap_samples", c.bootstrap_samples}};
}

inline CompareConfig compare_config_from_json(const json& j, CompareConfig c = {}) {
  detail::check_keys(j,
                     {"train", "strategies", "test_dataset", "test_cases", "test_seed", "detection", "min_agreement",
                      "bootstrap_samples"},
                     "compare config");
  try {
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
    if (j.contains("strategies")) {
      c.strategies.clear();
      for (const auto& s : j.at("strategies")) c.strategies.push_back(strategy_from_name(s.get<std::string>()));
    }
    c.test_dataset = j.value("test_dataset", c.test_dataset);
    c.test_cases = j.value("test_cases", c.test_cases);
    c.test_seed = j.value("test_seed", c.test_seed);
    if (j.contains("detection")) {
      const json& d = j.at("detection");
      detail::check_keys(d, {"threshold", "connectivity"}, "detection");
      c.detection.threshold = d.value("threshold", c.detection.threshold);
      c.detection.connectivity = d.value("connectivity", c.detection.connectivity);
    }
    c.min_agreement = j.value("min_agreement", c.min_agreement);
    c.bootstrap_samples = j.value("bootstrap_samples", c.bootstrap_samples);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed compare config: ") + e.what());
  }
  return c;
}

inline json compare_report_json(const CompareReport& rep) {
  json arr = json::array();
  for (const auto& r : rep.results) {
    json e = froc_summary_json(r.froc);
    e["strategy"] = strategy_name(r.strategy);
    e["fp_per_scan"] = r.fp_per_scan;
    e["candidates_per_scan"] = r.candidates_per_scan;
    e["fp_at_matched_sensitivity"] =
        std::isfinite(r.fp_at_matched_sensitivity) ? json(r.fp_at_matched_sensitivity) : json(nullptr);
    e["final_loss"] = r.metrics.empty() ? json(nullptr) : json(r.metrics.back().loss);
    arr.push_back(std::move(e));
  }
  return {{"strategies", arr}, {"matched_sensitivity", rep.matched_sensitivity}};
}

}  // namespace cased
