#include <gtest/gtest.h>

#include <sstream>

#include "cased/cli.hpp"
#include "oracles.hpp"

using namespace cased;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "cased");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("cased_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) { return cased::detail::read_text(p); }

}  // namespace

TEST(Cli, EvalCasedRowFixture) {
  const fs::path dir = fresh_dir("cased_row");
  const auto scans = oracle::cased_row_fixture();
  std::vector<CandidateRow> rows;
  json refs = json::object();
  for (const auto& s : scans) {
    AnnotationSet a;
    for (const auto& r : s.references) a.nodules.push_back({r.id, r.center_mm, r.radius_mm, 4, {}});
    refs[s.scan_id] = annotations_to_json(a);
    for (const auto& c : s.candidates) rows.push_back({s.scan_id, c.position_mm, c.confidence});
  }
  save_candidates_csv(rows, dir / "candidates.csv");
  cased::detail::write_text(dir / "refs.json", refs.dump());

  const auto r = invoke({"eval", "--candidates", (dir / "candidates.csv").string(), "--references",
                      (dir / "refs.json").string(), "--bootstrap", "50", "--seed", "4", "--out", (dir / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "cpm 0.8834\n");
  const json summary = json::parse(slurp(dir / "out" / "summary.json"));
  EXPECT_NEAR(summary.at("cpm_exact").get<double>(), 0.8835, 1e-4);
  EXPECT_EQ(summary.at("seed").get<uint64_t>(), 4u);
  EXPECT_EQ(summary.at("bootstrap_samples").get<size_t>(), 50u);
  const auto froc = parse_froc_csv(slurp(dir / "out" / "froc.csv"));
  for (size_t i = 0; i < 7; ++i) EXPECT_NEAR(froc.sensitivities[i], oracle::kCasedRowSensitivities[i], 1e-6);
}

TEST(Cli, TrainWithoutNodulesFails) {
  const fs::path dir = fresh_dir("nopos");
  auto r = invoke({"synth", "--cases", "2", "--nodules", "0", "--dims", "24", "--out", (dir / "data").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = invoke({"train", "--dataset", (dir / "data" / "dataset.json").string(), "--iterations", "5", "--out",
           (dir / "run").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("kind=validation"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("no positive patches"), std::string::npos) << r.err;
}

TEST(Cli, OracleLabelsScorePerfectly) {
  const fs::path dir = fresh_dir("oracle");
  auto r = invoke({"synth", "--cases", "3", "--nodules", "1", "--dims", "32", "--seed", "11", "--out",
                (dir / "data").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = invoke({"predict", "--oracle-labels", "--dataset", (dir / "data" / "dataset.json").string(), "--out",
           (dir / "pred").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = invoke({"eval", "--candidates", (dir / "pred" / "candidates.csv").string(), "--references",
           (dir / "data" / "annotations").string(), "--min-agreement", "1", "--bootstrap", "0", "--out",
           (dir / "eval").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json summary = json::parse(slurp(dir / "eval" / "summary.json"));
  EXPECT_EQ(summary.at("reference_nodules").get<size_t>(), 3u);
  const auto& ops = summary.at("operating_points");
  EXPECT_DOUBLE_EQ(ops.at(0).at("fp_per_scan").get<double>(), 0.125);
  EXPECT_DOUBLE_EQ(ops.at(0).at("sensitivity").get<double>(), 1.0);
  EXPECT_EQ(r.out, "cpm 1.0000\n");
}

TEST(Cli, SynthIsByteIdentical) {
  const fs::path a = fresh_dir("synth_a"), b = fresh_dir("synth_b");
  for (const auto& d : {a, b})
    ASSERT_EQ(invoke({"synth", "--cases", "2", "--dims", "24", "--seed", "7", "--out", d.string()}).code, 0);
  size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    if (rel == "dataset.json") continue;  // holds absolute paths
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_GE(files, 7u);
}

TEST(Cli, UsageErrors) {
  auto r = invoke({"eval", "--no-such-flag"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("kind=usage"), std::string::npos);
  r = invoke({});
  EXPECT_EQ(r.code, 1);
  r = invoke({"eval"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("kind=validation"), std::string::npos);
}

TEST(Cli, HelpListsFlags) {
  const auto r = invoke({"train", "--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* flag : {"--dataset", "--iterations", "--resume", "--seed", "--config", "--out", "--deterministic"})
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
}

TEST(Cli, MissingInputIsIoError) {
  const fs::path dir = fresh_dir("missing");
  const auto r = invoke({"train", "--dataset", (dir / "nope.json").string(), "--out", (dir / "run").string()});
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_NE(r.err.find("kind=io"), std::string::npos);
}

TEST(Cli, PlotWritesSvg) {
  const fs::path dir = fresh_dir("plot");
  FrocResult f;
  f.sensitivities = oracle::kCasedRowSensitivities;
  f.cpm = cpm_score(f.sensitivities);
  cased::detail::write_text(dir / "a.csv", froc_csv(f));
  const auto r = invoke({"plot", "--froc", (dir / "a.csv").string(), "--label", "cased", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string svg = slurp(dir / "froc.svg");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("cased (0.883)"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "froc_plot.csv"));
}
