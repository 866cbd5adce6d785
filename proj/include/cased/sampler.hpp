/*
 * sampler.hpp
 *
 * Curriculum adaptive patch sampling.
 *
 * At mini-batch iteration tau a patch is drawn from
 *
 *   p_tau(x_i) = f_r,i(tau) * (1 - f_n(tau)) + f_n(tau) * [x_i in G_n] / |G_n|
 *
 * where G_n is the set of patches whose output region contains a labeled
 * voxel, f_n is the curriculum mixing coefficient (1 at tau = 0, decaying to
 * 0) and f_r is the background distribution over all M patches:
 *
 *   f_r,i = h(tau) * hard_i + (1 - h(tau)) / M
 *
 * with hard_i uniform over the patches flagged by the latest false-positive
 * mining pass (uniform over all patches when none is flagged) and a hard
 * share h(tau) that decays to 0, so f_r tends to 1/M. The nodule branch is
 * normalized uniformly over G_n so that p_tau sums to one.
 */
#pragma once

#include <map>
#include <mutex>
#include <optional>
#include <span>

#include <json.hpp>

#include "cased/patching.hpp"

namespace cased {

enum class ScheduleKind { exponential, inverse, constant };

/// A non-increasing function of the iteration counter.
///   exponential: floor + (1 - floor) * 2^(-tau / rate)      (rate = half-life)
///   inverse:     floor + (1 - floor) / (1 + tau / rate)
///   constant:    value, for all tau (baseline strategies only)
struct DecaySchedule {
  ScheduleKind kind = ScheduleKind::exponential;
  double rate = 2000.0;
  double floor = 0.0;
  double value = 1.0;

  static DecaySchedule exponential(double half_life, double floor = 0.0) {
    return {ScheduleKind::exponential, half_life, floor, 1.0};
  }
  static DecaySchedule inverse(double k, double floor = 0.0) { return {ScheduleKind::inverse, k, floor, 1.0}; }
  static DecaySchedule constant(double v) { return {ScheduleKind::constant, 1.0, 0.0, v}; }

  void validate() const {
    if (kind == ScheduleKind::constant) {
      require(value >= 0 && value <= 1, "schedule: constant value must lie in [0,1]");
    } else {
      require(rate > 0 && std::isfinite(rate), "schedule: rate must be > 0");
      require(floor >= 0 && floor <= 1, "schedule: floor must lie in [0,1]");
    }
  }

  double at(int64_t tau) const {
    require(tau >= 0, "schedule: tau must be >= 0");
    const double t = static_cast<double>(tau);
    switch (kind) {
      case ScheduleKind::exponential:
        return floor + (1.0 - floor) * std::exp2(-t / rate);
      case ScheduleKind::inverse:
        return floor + (1.0 - floor) / (1.0 + t / rate);
      case ScheduleKind::constant:
        return value;
    }
    return value;
  }
  friend bool operator==(const DecaySchedule&, const DecaySchedule&) = default;
};

/// f_n(tau) = p_tau(g_n).
inline double mixing_coefficient(const DecaySchedule& sched, int64_t tau) {
  sched.validate();
  return std::clamp(sched.at(tau), 0.0, 1.0);
}

/// How the hard-example part of f_r is distributed.
enum class HardnessMode {
  fp_flag,  ///< uniform over patches flagged with a false positive
  loss,     ///< proportional to the last recorded loss of background patches
};

struct SamplerConfig {
  DecaySchedule curriculum = DecaySchedule::exponential(2000.0);
  /// h(tau) = 1 - beta(tau): share of background mass given to hard examples.
  DecaySchedule hard_share = DecaySchedule::exponential(4000.0);
  HardnessMode hardness = HardnessMode::fp_flag;
  uint64_t seed = 0;

  void validate() const {
    curriculum.validate();
    hard_share.validate();
  }
};

struct PatchRecord {
  PatchIndex index;
  bool is_nodule = false;
  bool fp_flag = false;
  double last_loss = std::numeric_limits<double>::quiet_NaN();
  int64_t last_eval_tau = -1;
};

struct MiningResult {
  PatchIndex index;
  bool has_false_positive = false;
  double loss = std::numeric_limits<double>::quiet_NaN();
};

/// Thrown when the curriculum asks for a nodule patch but the dataset has none.
class NoPositivePatches : public ValidationError {
public:
  NoPositivePatches() : ValidationError("no positive patches: the dataset contains no nodule patch") {}
};

/// Sampler state: iteration counter, schedules, per-patch records and the RNG.
/// Every public member is serialized by an internal mutex, so one training
/// thread and one mining thread may share an instance; each batch is drawn
/// against a single consistent record set.
class CasedSampler {
public:
  CasedSampler(std::vector<PatchRecord> records, SamplerConfig cfg)
      : cfg_(cfg), rng_(cfg.seed), records_(std::move(records)) {
    cfg_.validate();
    require(!records_.empty(), "sampler: the patch set is empty");
    for (size_t i = 0; i < records_.size(); ++i) {
      auto [it, inserted] = lookup_.emplace(records_[i].index, i);
      require(inserted, "sampler: duplicate patch index");
      if (records_[i].is_nodule) {
        nodules_.push_back(i);
        records_[i].fp_flag = false;
      }
    }
    rebuild_hard_set();
  }

  CasedSampler(const CasedSampler& o) {
    std::lock_guard lock(o.mu_);
    cfg_ = o.cfg_;
    rng_ = o.rng_;
    tau_ = o.tau_;
    records_ = o.records_;
    lookup_ = o.lookup_;
    nodules_ = o.nodules_;
    hard_ = o.hard_;
    hard_cdf_ = o.hard_cdf_;
  }
  CasedSampler& operator=(const CasedSampler&) = delete;

  const SamplerConfig& config() const { return cfg_; }
  size_t size() const { return records_.size(); }
  size_t nodule_count() const { return nodules_.size(); }

  int64_t tau() const {
    std::lock_guard lock(mu_);
    return tau_;
  }

  double mixing() const {
    std::lock_guard lock(mu_);
    return mixing_coefficient(cfg_.curriculum, tau_);
  }

  /// beta(tau) = 1 - h(tau).
  double beta() const {
    std::lock_guard lock(mu_);
    return 1.0 - hard_share_locked();
  }

  size_t fp_set_size() const {
    std::lock_guard lock(mu_);
    return size_t(std::count_if(records_.begin(), records_.end(), [](const PatchRecord& r) { return r.fp_flag; }));
  }

  std::vector<PatchRecord> records() const {
    std::lock_guard lock(mu_);
    return records_;
  }

  const PatchRecord& record(size_t i) const { return records_.at(i); }

  std::optional<size_t> find(const PatchIndex& p) const {
    auto it = lookup_.find(p);
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }

  /// f_r over all M patches, in record order.
  std::vector<double> background_weights() const {
    std::lock_guard lock(mu_);
    return background_weights_locked();
  }

  /// p_tau(x_i) over all M patches, in record order.
  std::vector<double> patch_distribution() const {
    std::lock_guard lock(mu_);
    const double fn = mixing_coefficient(cfg_.curriculum, tau_);
    if (fn > 0 && nodules_.empty()) throw NoPositivePatches();
    std::vector<double> p = background_weights_locked();
    for (auto& w : p) w *= (1.0 - fn);
    if (fn > 0) {
      const double share = fn / double(nodules_.size());
      for (size_t i : nodules_) p[i] += share;
    }
    return p;
  }

  /// Record positions of `batch_size` i.i.d. draws. Does not advance tau.
  std::vector<size_t> sample_batch_ids(size_t batch_size) {
    require(batch_size >= 1, "sample_batch: batch_size must be >= 1");
    std::lock_guard lock(mu_);
    const double fn = mixing_coefficient(cfg_.curriculum, tau_);
    const double h = hard_share_locked();
    std::vector<size_t> out;
    out.reserve(batch_size);
    for (size_t b = 0; b < batch_size; ++b) {
      if (rng_.bernoulli(fn)) {
        if (nodules_.empty()) throw NoPositivePatches();
        out.push_back(nodules_[rng_.below(nodules_.size())]);
      } else {
        out.push_back(draw_background_locked(h));
      }
    }
    return out;
  }

  std::vector<PatchIndex> sample_batch(size_t batch_size) {
    std::vector<PatchIndex> out;
    for (size_t i : sample_batch_ids(batch_size)) out.push_back(records_[i].index);
    return out;
  }

  /// Replaces fp_flag and last_loss of every reported patch; later entries
  /// for the same patch win. Nodule patches never carry a false-positive flag.
  void record_mining_results(std::span<const MiningResult> results) {
    std::lock_guard lock(mu_);
    std::vector<size_t> pos;
    pos.reserve(results.size());
    for (const auto& r : results) {
      auto it = lookup_.find(r.index);
      if (it == lookup_.end()) {
        std::ostringstream os;
        os << "record_mining_results: unknown patch (volume " << r.index.volume_id << ", corner " << r.index.corner.x
           << "," << r.index.corner.y << "," << r.index.corner.z << ")";
        throw ValidationError(os.str());
      }
      pos.push_back(it->second);
    }
    if (results.empty()) return;
    for (size_t k = 0; k < results.size(); ++k) {
      PatchRecord& rec = records_[pos[k]];
      rec.fp_flag = !rec.is_nodule && results[k].has_false_positive;
      rec.last_loss = results[k].loss;
      rec.last_eval_tau = tau_;
    }
    rebuild_hard_set();
  }

  void advance() {
    std::lock_guard lock(mu_);
    ++tau_;
  }

  // -------------------------------------------------------------------------
  // Checkpointing

  nlohmann::json checkpoint() const {
    std::lock_guard lock(mu_);
    nlohmann::json j;
    j["tau"] = tau_;
    j["seed"] = cfg_.seed;
    j["rng_state"] = rng_.state();
    j["curriculum"] = schedule_to_json(cfg_.curriculum);
    j["hard_share"] = schedule_to_json(cfg_.hard_share);
    j["hardness"] = cfg_.hardness == HardnessMode::fp_flag ? "fp_flag" : "loss";
    j["patch_count"] = records_.size();
    nlohmann::json flags = nlohmann::json::array();
    nlohmann::json evals = nlohmann::json::array();
    for (const auto& r : records_) {
      const auto& c = r.index.corner;
      if (r.fp_flag) flags.push_back({r.index.volume_id, c.x, c.y, c.z});
      if (r.last_eval_tau >= 0) {
        evals.push_back({r.index.volume_id, c.x, c.y, c.z, std::isfinite(r.last_loss) ? nlohmann::json(r.last_loss) : nlohmann::json(nullptr), r.last_eval_tau});
      }
    }
    j["fp_flags"] = std::move(flags);
    j["evaluations"] = std::move(evals);
    return j;
  }

  /// Restores tau, schedules, RNG position and mining records onto a sampler
  /// built over the same patch set.
  void restore(const nlohmann::json& j) {
    std::lock_guard lock(mu_);
    try {
      require(j.at("patch_count").get<size_t>() == records_.size(), "sampler checkpoint: patch count mismatch");
      SamplerConfig cfg = cfg_;
      cfg.seed = j.at("seed").get<uint64_t>();
      cfg.curriculum = schedule_from_json(j.at("curriculum"));
      cfg.hard_share = schedule_from_json(j.at("hard_share"));
      cfg.hardness = j.at("hardness").get<std::string>() == "loss" ? HardnessMode::loss : HardnessMode::fp_flag;
      cfg.validate();
      const auto tau = j.at("tau").get<int64_t>();
      require(tau >= 0, "sampler checkpoint: tau must be >= 0");
      Rng rng;
      rng.set_state(j.at("rng_state").get<std::string>());

      std::vector<PatchRecord> recs = records_;
      for (auto& r : recs) {
        r.fp_flag = false;
        r.last_loss = std::numeric_limits<double>::quiet_NaN();
        r.last_eval_tau = -1;
      }
      auto locate = [&](const nlohmann::json& e) -> PatchRecord& {
        PatchIndex p{e.at(0).get<int32_t>(), {e.at(1).get<int64_t>(), e.at(2).get<int64_t>(), e.at(3).get<int64_t>()}};
        auto it = lookup_.find(p);
        require(it != lookup_.end(), "sampler checkpoint: unknown patch index");
        return recs[it->second];
      };
      for (const auto& e : j.at("evaluations")) {
        PatchRecord& r = locate(e);
        r.last_loss = e.at(4).is_null() ? std::numeric_limits<double>::quiet_NaN() : e.at(4).get<double>();
        r.last_eval_tau = e.at(5).get<int64_t>();
      }
      for (const auto& e : j.at("fp_flags")) {
        PatchRecord& r = locate(e);
        require(!r.is_nodule, "sampler checkpoint: false-positive flag on a nodule patch");
        r.fp_flag = true;
      }
      cfg_ = cfg;
      tau_ = tau;
      rng_ = rng;
      records_ = std::move(recs);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed sampler checkpoint: ") + e.what());
    }
    rebuild_hard_set();
  }

  static nlohmann::json schedule_to_json(const DecaySchedule& s) {
    const char* kind = s.kind == ScheduleKind::exponential ? "exponential"
                       : s.kind == ScheduleKind::inverse   ? "inverse"
                                                           : "constant";
    return {{"kind", kind}, {"rate", s.rate}, {"floor", s.floor}, {"value", s.value}};
  }

  static DecaySchedule schedule_from_json(const nlohmann::json& j) {
    DecaySchedule s;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "exponential") {
      s.kind = ScheduleKind::exponential;
    } else if (kind == "inverse") {
      s.kind = ScheduleKind::inverse;
    } else if (kind == "constant") {
      s.kind = ScheduleKind::constant;
    } else {
      throw ValidationError("unknown schedule kind '" + kind + "'");
    }
    s.rate = j.value("rate", s.rate);
    s.floor = j.value("floor", s.floor);
    s.value = j.value("value", s.value);
    s.validate();
    return s;
  }

private:
  double hard_share_locked() const { return std::clamp(cfg_.hard_share.at(tau_), 0.0, 1.0); }

  void rebuild_hard_set() {
    hard_.clear();
    hard_cdf_.clear();
    if (cfg_.hardness == HardnessMode::fp_flag) {
      for (size_t i = 0; i < records_.size(); ++i)
        if (records_[i].fp_flag) hard_.push_back(i);
      return;
    }
    double acc = 0;
    for (size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      if (!r.is_nodule && std::isfinite(r.last_loss) && r.last_loss > 0) {
        acc += r.last_loss;
        hard_.push_back(i);
        hard_cdf_.push_back(acc);
      }
    }
  }

  std::vector<double> background_weights_locked() const {
    const double m = double(records_.size());
    const double h = hard_.empty() ? 0.0 : hard_share_locked();
    std::vector<double> w(records_.size(), (1.0 - h) / m);
    if (hard_.empty()) {
      std::fill(w.begin(), w.end(), 1.0 / m);
      return w;
    }
    if (cfg_.hardness == HardnessMode::fp_flag) {
      const double share = h / double(hard_.size());
      for (size_t i : hard_) w[i] += share;
    } else {
      const double total = hard_cdf_.back();
      for (size_t k = 0; k < hard_.size(); ++k) w[hard_[k]] += h * records_[hard_[k]].last_loss / total;
    }
    return w;
  }

  size_t draw_background_locked(double h) {
    if (!hard_.empty() && rng_.bernoulli(h)) {
      if (cfg_.hardness == HardnessMode::fp_flag) return hard_[rng_.below(hard_.size())];
      const double u = rng_.uniform() * hard_cdf_.back();
      const auto it = std::upper_bound(hard_cdf_.begin(), hard_cdf_.end(), u);
      return hard_[std::min<size_t>(size_t(it - hard_cdf_.begin()), hard_.size() - 1)];
    }
    return size_t(rng_.below(records_.size()));
  }

  mutable std::mutex mu_;
  SamplerConfig cfg_;
  Rng rng_;
  int64_t tau_ = 0;
  std::vector<PatchRecord> records_;
  std::map<PatchIndex, size_t> lookup_;
  std::vector<size_t> nodules_;
  std::vector<size_t> hard_;
  std::vector<double> hard_cdf_;
};

}  // namespace cased
