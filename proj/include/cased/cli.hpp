/*
 * cli.hpp
 *
 * The `cased` command-line driver. run() returns the process exit code:
 * 0 success, 1 invalid input, 2 I/O failure, 3 any other runtime failure.
 * Failures print one line `cased: error kind=<kind> message=<text>` on the
 * error stream.
 */
#pragma once

#include <CLI11.hpp>
#include <iostream>

#include "cased/eval.hpp"
#include "cased/pipeline.hpp"

namespace cased::cli {

struct Globals {
  std::string config;
  uint64_t seed = 0;
  bool seed_set = false;
  bool deterministic = false;
  std::string out = "out";
};

namespace detail {

inline void add_globals(CLI::App* app, Globals& g) {
  app->add_option("--config", g.config, "JSON configuration file")->check(CLI::ExistingFile);
  app->add_option_function<uint64_t>(
      "--seed",
      [&g](const uint64_t& s) {
        g.seed = s;
        g.seed_set = true;
      },
      "Random seed (overrides the configuration)");
  app->add_flag("--deterministic", g.deterministic, "Single-threaded run without wall-clock fields");
  app->add_option("--out", g.out, "Output directory")->capture_default_str();
}

inline json config_json(const Globals& g) {
  if (g.config.empty()) return json::object();
  return cased::detail::read_json(g.config);
}

inline std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

inline std::string format_cpm(double v) { return format_fixed(v, 4); }

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  int cases = 1;
  std::optional<int> nodules;
  std::optional<int64_t> dims;
  std::optional<double> spacing;
};

inline int cmd_synth(const Globals& g, const SynthArgs& a, std::ostream& out) {
  const json cj = config_json(g);
  SyntheticSpec spec = cj.empty() ? SyntheticSpec{} : synthetic_spec_from_json(cj.contains("synthetic") ? cj.at("synthetic") : cj);
  if (a.nodules) {
    require(*a.nodules >= 0, "--nodules must be >= 0");
    spec.nodules_min = spec.nodules_max = *a.nodules;
  }
  if (a.dims) spec.dims = Dims::cube(*a.dims);
  if (a.spacing) spec.spacing_mm = *a.spacing;
  spec.validate();
  require(a.cases >= 1, "--cases must be >= 1");
  const auto entries = write_synthetic_dataset(spec, a.cases, g.seed, g.out);
  json meta = {{"synthetic", synthetic_spec_to_json(spec)}, {"cases", a.cases}, {"seed", g.seed}};
  cased::detail::write_text(fs::path(g.out) / "synth.json", meta.dump(2) + "\n");
  out << "wrote " << entries.size() << " cases to " << (fs::path(g.out) / "dataset.json").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string dataset;
  std::optional<int64_t> iterations;
  std::string resume;
};

inline int cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg = train_config_from_json(config_json(g));
  if (!a.dataset.empty()) cfg.dataset = a.dataset;
  if (a.iterations) cfg.iterations = *a.iterations;
  if (g.seed_set) cfg.seed = g.seed;
  if (g.deterministic) cfg.deterministic = true;
  const fs::path dir = g.out;
  cfg.metrics_path = (dir / "metrics.ndjson").string();
  if (cfg.checkpoint_every > 0) cfg.checkpoint_dir = (dir / "checkpoints").string();
  cfg.validate();

  auto data = load_training_data(cfg);
  std::unique_ptr<Trainer> t;
  if (a.resume.empty()) {
    t = std::make_unique<Trainer>(cfg, std::move(data));
  } else {
    t = std::make_unique<Trainer>(cfg, std::move(data), load_checkpoint(a.resume));
  }
  MetricsWriter writer(cfg.metrics_path, !a.resume.empty());
  t->run_until(cfg.iterations, std::ref(writer));
  t->save(dir / "checkpoint");
  cased::detail::write_text(dir / "train_config.json", train_config_to_json(cfg).dump(2) + "\n");
  out << "trained " << t->iteration() << " iterations; checkpoint " << (dir / "checkpoint").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  std::string checkpoint;
  std::string dataset;
  bool oracle_labels = false;
  double threshold = 0.5;
  int connectivity = 26;
};

inline int cmd_predict(const Globals& g, const PredictArgs& a, std::ostream& out) {
  require(!a.dataset.empty(), "predict: --dataset is required");
  require(a.oracle_labels || !a.checkpoint.empty(), "predict: --checkpoint is required unless --oracle-labels is set");
  TrainConfig cfg = train_config_from_json(config_json(g));
  std::optional<ModelCheckpoint> ck;
  if (!a.oracle_labels) {
    ck = load_checkpoint(a.checkpoint);
    if (ck->extra.contains("train_config")) {
      TrainConfig saved = train_config_from_json(ck->extra.at("train_config"));
      cfg.preprocess = saved.preprocess;
      cfg.geometry = saved.geometry;
      cfg.model = saved.model;
    }
    require(ck->config == cfg.model, "predict: checkpoint model differs from the configuration");
  }
  const auto cases = load_dataset(a.dataset, cfg.preprocess);
  DetectionParams dp;
  dp.threshold = a.threshold;
  dp.connectivity = a.connectivity;
  const fs::path dir = g.out;
  std::vector<CandidateRow> rows;
  for (const Case& c : cases) {
    Volume prob;
    if (a.oracle_labels) {
      prob = Volume::like(c.labels);
      for (size_t i = 0; i < prob.size(); ++i) prob[i] = c.labels[i] ? 1.0f : 0.0f;
    } else {
      const Fcn<float> net(ck->config);
      prob = predict_volume(net, ck->weights, cfg.resolved_geometry(), c.image);
    }
    save_volume(prob, dir / "probability" / c.id);
    for (const auto& k : detect_candidates(prob, c.native, dp)) rows.push_back({c.id, k.position_mm, k.confidence});
  }
  save_candidates_csv(rows, dir / "candidates.csv");
  out << "wrote " << rows.size() << " candidates for " << cases.size() << " scans to "
      << (dir / "candidates.csv").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string candidates;
  std::string references;
  size_t bootstrap = 1000;
  int min_agreement = 3;
  std::optional<double> hit_mm;
};

inline int cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& out) {
  require(!a.candidates.empty() && !a.references.empty(), "eval: --candidates and --references are required");
  const auto rows = load_candidates_csv(a.candidates);
  const auto refs = load_reference_set(a.references);
  const auto scans = assemble_scans(rows, refs, a.min_agreement);
  const HitRule rule = a.hit_mm ? HitRule::fixed(*a.hit_mm) : HitRule::nodule_radius();
  FrocResult r = froc_curve(scans, rule);
  if (a.bootstrap > 0) attach_bootstrap(r, bootstrap_froc(scans, a.bootstrap, g.seed, rule));
  const fs::path dir = g.out;
  cased::detail::write_text(dir / "froc.csv", froc_csv(r));
  json summary = froc_summary_json(r);
  summary["seed"] = g.seed;
  cased::detail::write_text(dir / "summary.json", summary.dump(2) + "\n");
  out << "cpm " << format_cpm(r.cpm) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// compare

struct CompareArgs {
  std::string strategies;
  std::optional<int64_t> iterations;
  std::optional<int> train_cases;
  std::optional<int> test_cases;
};

inline int cmd_compare(const Globals& g, const CompareArgs& a, std::ostream& out) {
  CompareConfig cc = compare_config_from_json(config_json(g));
  if (cc.train.dataset.empty() && cc.train.synthetic_cases == 0) cc.train.synthetic_cases = 20;
  if (!a.strategies.empty()) {
    cc.strategies.clear();
    std::stringstream ss(a.strategies);
    std::string s;
    while (std::getline(ss, s, ',')) cc.strategies.push_back(strategy_from_name(s));
  }
  if (a.iterations) cc.train.iterations = *a.iterations;
  if (a.train_cases) cc.train.synthetic_cases = *a.train_cases;
  if (a.test_cases) cc.test_cases = *a.test_cases;
  if (g.seed_set) cc.train.seed = g.seed;
  if (g.deterministic) cc.train.deterministic = true;
  const CompareReport rep = compare_samplers(cc);
  const fs::path dir = g.out;
  json j = compare_report_json(rep);
  j["config"] = compare_config_to_json(cc);
  cased::detail::write_text(dir / "report.json", j.dump(2) + "\n");
  for (const auto& r : rep.results) {
    cased::detail::write_text(dir / (std::string("froc_") + strategy_name(r.strategy) + ".csv"), froc_csv(r.froc));
    out << strategy_name(r.strategy) << " cpm " << format_cpm(r.froc.cpm) << " fp_per_scan "
        << format_fixed(r.fp_per_scan, 3) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// plot

struct PlotArgs {
  std::vector<std::string> froc;
  std::vector<std::string> labels;
  std::string title = "FROC";
};

inline std::string svg_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

/// FP/scan on a log2 axis at the seven rates, sensitivity 0..1, with a
/// mean +- one standard deviation band from the bootstrap columns.
inline std::string froc_svg(const std::vector<FrocResult>& curves, const std::vector<std::string>& labels,
                            const std::string& title) {
  const double W = 640, H = 480, L = 70, R = 160, T = 40, B = 60;
  const double pw = W - L - R, ph = H - T - B;
  auto X = [&](double fp) { return L + (std::log2(fp) + 3.0) / 6.0 * pw; };
  auto Y = [&](double s) { return T + (1.0 - s) * ph; };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(2);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << " " << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << L + pw / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
    << svg_escape(title) << "</text>\n";
  for (int i = 0; i <= 10; ++i) {
    const double s = i / 10.0;
    o << "<line x1=\"" << L << "\" y1=\"" << Y(s) << "\" x2=\"" << L + pw << "\" y2=\"" << Y(s)
      << "\" stroke=\"#ddd\"/>\n";
    o << "<text x=\"" << L - 8 << "\" y=\"" << Y(s) + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
      << "font-size=\"11\">" << format_fixed(s, 1) << "</text>\n";
  }
  for (double fp : kFrocRates) {
    o << "<line x1=\"" << X(fp) << "\" y1=\"" << T << "\" x2=\"" << X(fp) << "\" y2=\"" << T + ph
      << "\" stroke=\"#ddd\"/>\n";
    o << "<text x=\"" << X(fp) << "\" y=\"" << T + ph + 18 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "font-size=\"11\">" << (fp < 1 ? format_fixed(fp, 3) : format_fixed(fp, 0)) << "</text>\n";
  }
  o << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  o << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 16
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">Average number of false positives per scan</text>\n";
  o << "<text transform=\"translate(18 " << T + ph / 2
    << ") rotate(-90)\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">Sensitivity</text>\n";
  for (size_t c = 0; c < curves.size(); ++c) {
    const auto& r = curves[c];
    const char* col = colors[c % 6];
    const bool band = std::any_of(r.boot_mean.begin(), r.boot_mean.end(), [](double v) { return v > 0; });
    if (band) {
      o << "<polygon fill=\"" << col << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
      for (size_t i = 0; i < 7; ++i)
        o << X(r.fp_rates[i]) << "," << Y(std::min(1.0, r.boot_mean[i] + std::sqrt(r.boot_var[i]))) << " ";
      for (size_t i = 7; i-- > 0;)
        o << X(r.fp_rates[i]) << "," << Y(std::max(0.0, r.boot_mean[i] - std::sqrt(r.boot_var[i]))) << " ";
      o << "\"/>\n";
      o << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-dasharray=\"4 3\" points=\"";
      for (size_t i = 0; i < 7; ++i) o << X(r.fp_rates[i]) << "," << Y(r.boot_mean[i]) << " ";
      o << "\"/>\n";
    }
    o << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < 7; ++i) o << X(r.fp_rates[i]) << "," << Y(r.sensitivities[i]) << " ";
    o << "\"/>\n";
    for (size_t i = 0; i < 7; ++i)
      o << "<circle cx=\"" << X(r.fp_rates[i]) << "\" cy=\"" << Y(r.sensitivities[i]) << "\" r=\"3\" fill=\"" << col
        << "\"/>\n";
    const double ly = T + 16 + 20 * double(c);
    o << "<line x1=\"" << L + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << L + pw + 32 << "\" y2=\"" << ly
      << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << L + pw + 38 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
      << svg_escape(labels[c]) << " (" << format_fixed(r.cpm, 3) << ")</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline int cmd_plot(const Globals& g, const PlotArgs& a, std::ostream& out) {
  require(!a.froc.empty(), "plot: at least one --froc CSV is required");
  require(a.labels.empty() || a.labels.size() == a.froc.size(), "plot: give one --label per --froc file");
  std::vector<FrocResult> curves;
  std::vector<std::string> labels;
  std::string data = "label,fp_per_scan,sensitivity,boot_mean,boot_var\n";
  for (size_t i = 0; i < a.froc.size(); ++i) {
    curves.push_back(parse_froc_csv(cased::detail::read_text(a.froc[i])));
    labels.push_back(a.labels.empty() ? fs::path(a.froc[i]).stem().string() : a.labels[i]);
    const auto& r = curves.back();
    for (size_t k = 0; k < 7; ++k) {
      data += labels.back() + "," + format_fixed(r.fp_rates[k], 3) + "," + format_fixed(r.sensitivities[k], 6) + "," +
              format_fixed(r.boot_mean[k], 6) + "," + format_fixed(r.boot_var[k], 8) + "\n";
    }
  }
  const fs::path dir = g.out;
  cased::detail::write_text(dir / "froc.svg", froc_svg(curves, labels, a.title));
  cased::detail::write_text(dir / "froc_plot.csv", data);
  out << "wrote " << (dir / "froc.svg").string() << "\n";
  return 0;
}

}  // namespace detail

inline int fail(std::ostream& err, int code, const char* kind, const std::string& msg) {
  err << "cased: error kind=" << kind << " message=" << detail::one_line(msg) << "\n";
  return code;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Curriculum adaptive sampling for volumetric nodule detection"};
  app.name("cased");
  app.require_subcommand(1);

  Globals g;
  detail::SynthArgs synth;
  detail::TrainArgs train;
  detail::PredictArgs predict;
  detail::EvalArgs eval;
  detail::CompareArgs compare;
  detail::PlotArgs plot;

  auto* s = app.add_subcommand("synth", "Write a synthetic dataset (volumes, labels, annotations, manifest)");
  detail::add_globals(s, g);
  s->add_option("--cases", synth.cases, "Number of cases")->capture_default_str();
  s->add_option("--nodules", synth.nodules, "Nodules per case (overrides the configured range)");
  s->add_option("--dims", synth.dims, "Voxels per side");
  s->add_option("--spacing", synth.spacing, "Voxel spacing in mm");

  auto* t = app.add_subcommand("train", "Train the voxel classifier with the configured sampler");
  detail::add_globals(t, g);
  t->add_option("--dataset", train.dataset, "Dataset manifest (dataset.json)");
  t->add_option("--iterations", train.iterations, "Mini-batch iterations");
  t->add_option("--resume", train.resume, "Checkpoint directory to continue from");

  auto* p = app.add_subcommand("predict", "Write probability volumes and a candidates CSV");
  detail::add_globals(p, g);
  p->add_option("--checkpoint", predict.checkpoint, "Checkpoint directory");
  p->add_option("--dataset", predict.dataset, "Dataset manifest (dataset.json)");
  p->add_flag("--oracle-labels", predict.oracle_labels, "Use the label maps as the probability volumes");
  p->add_option("--threshold", predict.threshold, "Probability threshold")->capture_default_str();
  p->add_option("--connectivity", predict.connectivity, "6 or 26")->capture_default_str();

  auto* e = app.add_subcommand("eval", "Score candidates: FROC CSV and summary JSON");
  detail::add_globals(e, g);
  e->add_option("--candidates", eval.candidates, "Candidates CSV");
  e->add_option("--references", eval.references, "Annotation directory or {scan_id: nodules} JSON");
  e->add_option("--bootstrap", eval.bootstrap, "Bootstrap resamples (0 disables)")->capture_default_str();
  e->add_option("--min-agreement", eval.min_agreement, "Raters needed for the reference set")->capture_default_str();
  e->add_option("--hit-mm", eval.hit_mm, "Fixed hit distance in mm instead of the nodule radius");

  auto* c = app.add_subcommand("compare", "Train and score each sampling strategy");
  detail::add_globals(c, g);
  c->add_option("--strategies", compare.strategies, "Comma list of uniform,nodule_only,curriculum_no_hnm,cased");
  c->add_option("--iterations", compare.iterations, "Iterations per strategy");
  c->add_option("--train-cases", compare.train_cases, "Synthetic training cases");
  c->add_option("--test-cases", compare.test_cases, "Synthetic held-out cases");

  auto* pl = app.add_subcommand("plot", "Render FROC CSVs as an SVG figure");
  detail::add_globals(pl, g);
  pl->add_option("--froc", plot.froc, "FROC CSV (repeatable)");
  pl->add_option("--label", plot.labels, "Legend label per --froc (repeatable)");
  pl->add_option("--title", plot.title, "Figure title")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    return fail(err, 1, "usage", ex.what());
  }

  try {
    if (s->parsed()) return detail::cmd_synth(g, synth, out);
    if (t->parsed()) return detail::cmd_train(g, train, out);
    if (p->parsed()) return detail::cmd_predict(g, predict, out);
    if (e->parsed()) return detail::cmd_eval(g, eval, out);
    if (c->parsed()) return detail::cmd_compare(g, compare, out);
    if (pl->parsed()) return detail::cmd_plot(g, plot, out);
  } catch (const NoPositivePatches& ex) {
    return fail(err, 1, "validation", ex.what());
  } catch (const ValidationError& ex) {
    return fail(err, 1, "validation", ex.what());
  } catch (const IoError& ex) {
    return fail(err, 2, "io", ex.what());
  } catch (const fs::filesystem_error& ex) {
    return fail(err, 2, "io", ex.what());
  } catch (const std::exception& ex) {
    return fail(err, 3, "runtime", ex.what());
  }
  return fail(err, 1, "usage", "no subcommand");
}

}  // namespace cased::cli
