#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "gnnbench/bench.hpp"

using namespace gnnbench;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config() {
  return parse_config(R"(
dataset.kind = synthetic
dataset.name = tiny
synthetic.num_nodes = 60
synthetic.num_classes = 3
synthetic.feature_dim = 16
synthetic.homophily = 0.8
synthetic.seed = 4
architectures = gcn-2l
defenses = none, jaccard
iterations = 1
nodes_per_iteration = 3
runs_per_node = 2
epochs = 20
gnnexplainer.epochs = 10
seed = 77
)");
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("gnnbench_" + name)) {
    fs::remove_all(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Relative path -> contents for every file under `root` except the wall-clock records.
std::map<std::string, std::string> reproducible_files(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).string();
    if (rel == "timings.jsonl" || rel.rfind("cells/", 0) == 0) continue;
    out[rel] = slurp(e.path());
  }
  return out;
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text, "exp.cfg");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, Defaults) {
  const ExperimentConfig c = parse_config("");
  EXPECT_EQ(c.iterations, 5u);
  EXPECT_EQ(c.nodes_per_iteration, 10u);
  EXPECT_EQ(c.runs_per_node, 5u);
  EXPECT_EQ(c.epochs, 200u);
  EXPECT_EQ(c.train_fraction, 0.8);
  EXPECT_EQ(c.sparsity_tolerance, 1e-6);
  EXPECT_EQ(c.fidelity_mode, FidelityMode::agreement);
  EXPECT_EQ(c.perturbation.feature_fraction, 0.05);
  EXPECT_EQ(c.perturbation.node_removal_fraction, 0.05);
  EXPECT_EQ(c.attack, "none");
}

TEST(Config, NormalizedTextRoundTrips) {
  ExperimentConfig c = small_config();
  c.defense_options.grad_reg_lambda = 0.25;
  c.explainer.subgraphx.high2low = true;
  const std::string text = config_to_text(c);
  EXPECT_EQ(config_to_text(parse_config(text)), text);
}

TEST(Config, ErrorsNameLineAndCulprit) {
  std::string e = config_error("iterations = 2\ndefenses = none, moat\n");
  EXPECT_NE(e.find("exp.cfg:2"), std::string::npos) << e;
  EXPECT_NE(e.find("moat"), std::string::npos) << e;

  e = config_error("# comment\n\nbogus = 1\n");
  EXPECT_NE(e.find("exp.cfg:3"), std::string::npos) << e;
  EXPECT_NE(e.find("bogus"), std::string::npos) << e;

  e = config_error("seed = 1\nseed = 2\n");
  EXPECT_NE(e.find("duplicate"), std::string::npos) << e;

  EXPECT_NE(config_error("runs_per_node = 1\n"), "");  // consistency needs two runs
  EXPECT_NE(config_error("train_fraction = 1\n"), "");
  EXPECT_NE(config_error("attack = pgd\n"), "");
  EXPECT_NE(config_error("subgraphx.reward_method = nc_mc_l_shapley\n"), "");
  EXPECT_NE(config_error("epochs\n"), "");
  EXPECT_NE(config_error("defense.jaccard.thresh = 0.1\n"), "");
  EXPECT_EQ(config_error("attack = fgsm-in-training # trailing comment\n"), "");
}

TEST(Config, Validation) {
  ExperimentConfig c = small_config();
  EXPECT_NO_THROW(validate_config(c));
  c.defenses = {DefenseId::none, DefenseId::none};
  EXPECT_THROW(validate_config(c), ConfigError);
  c = small_config();
  c.architectures.clear();
  EXPECT_THROW(validate_config(c), ConfigError);
  c = small_config();
  c.dataset.kind = "bundle";
  EXPECT_THROW(validate_config(c), ConfigError);
}

TEST(Config, SubgraphXSizeGuard) {
  ExperimentConfig c = small_config();
  c.explainer.id = ExplainerId::subgraphx;
  c.subgraphx_node_limit = 50;
  const Graph g = load_dataset(c.dataset);
  EXPECT_THROW(check_dataset_fits(c, g), ConfigError);
  c.allow_large_subgraphx = true;
  EXPECT_NO_THROW(check_dataset_fits(c, g));
}

// ---------------------------------------------------------------------------
// Iteration plans

TEST(Plan, TargetsComeFromTheTestSplit) {
  const ExperimentConfig c = small_config();
  const Graph g = load_dataset(c.dataset);
  const IterationPlan p = plan_iteration(c, g, 0);
  EXPECT_EQ(p.targets.size(), 3u);
  EXPECT_TRUE(std::is_sorted(p.targets.begin(), p.targets.end()));
  for (NodeId t : p.targets) EXPECT_TRUE(p.masks.test[t]);
  const IterationPlan again = plan_iteration(c, g, 0);
  EXPECT_EQ(again.targets, p.targets);
  EXPECT_EQ(again.masks.train, p.masks.train);
  EXPECT_NE(plan_iteration(c, g, 1).seed, p.seed);
}

TEST(Plan, TooManyTargetsRejected) {
  ExperimentConfig c = small_config();
  c.nodes_per_iteration = 13;  // the 20% test split has 12 nodes
  EXPECT_THROW(plan_iteration(c, load_dataset(c.dataset), 0), ConfigError);
}

// ---------------------------------------------------------------------------
// Grid runs

TEST(Grid, CellsOfAnIterationShareTargets) {
  ExperimentConfig c = small_config();
  c.iterations = 2;
  const auto results = run_experiment(c, {});
  ASSERT_EQ(results.size(), 4u);
  for (const auto& r : results) ASSERT_TRUE(r.ok) << r.error;
  EXPECT_EQ(results[0].targets, results[1].targets);
  EXPECT_EQ(results[2].targets, results[3].targets);
  EXPECT_EQ(results[0].key.defense, DefenseId::none);
  EXPECT_EQ(results[1].key.defense, DefenseId::jaccard);
  EXPECT_EQ(results[0].seeds.at("model_init"), results[1].seeds.at("model_init"));
  EXPECT_NE(results[0].seeds.at("cell"), results[1].seeds.at("cell"));
  for (const auto& r : results) {
    EXPECT_EQ(r.per_node.size(), 3u);
    EXPECT_EQ(r.report.runs, 2u);
    EXPECT_GE(r.report.consistency.mean, -1.0);
    EXPECT_LE(r.report.consistency.mean, 1.0);
    EXPECT_GE(r.report.stability.mean, 0.0);
  }
}

TEST(Grid, RerunIsByteIdenticalAcrossWorkerCounts) {
  TempDir a("grid_a"), b("grid_b");
  ExperimentConfig c = small_config();
  emit_summary(run_experiment(c, a.path()), a.path());
  c.workers = 2;
  emit_summary(run_experiment(c, b.path()), b.path());
  const auto fa = reproducible_files(a.path()), fb = reproducible_files(b.path());
  ASSERT_TRUE(fa.count("results.jsonl"));
  EXPECT_GT(fa.size(), 10u);
  for (const auto& [name, content] : fa) {
    ASSERT_TRUE(fb.count(name)) << name;
    EXPECT_EQ(content, fb.at(name)) << name;
  }
  EXPECT_EQ(fa.size(), fb.size());
}

TEST(Grid, PersistsEveryMask) {
  TempDir d("grid_masks");
  const ExperimentConfig c = small_config();
  const auto results = run_experiment(c, d.path());
  for (const auto& r : results) {
    const CellPaths p = cell_paths(d.path(), r.key);
    EXPECT_TRUE(fs::exists(p.cell_file));
    EXPECT_TRUE(fs::exists(p.checkpoint));
    for (NodeId t : r.targets)
      for (std::size_t k = 0; k < c.runs_per_node; ++k)
        for (bool perturbed : {false, true}) {
          const ExplanationMask m = load_mask(p.mask_dir / mask_file_name(t, k, perturbed));
          EXPECT_EQ(m.explainer, "gnnexplainer");
        }
  }
  EXPECT_EQ(slurp(d.path() / "config.cfg"), config_to_text(c));
}

TEST(Grid, ResumeReloadsFinishedCellsAndRedoesTheRest) {
  TempDir d("grid_resume");
  const ExperimentConfig c = small_config();
  const auto first = run_experiment(c, d.path());
  const CellPaths lost = cell_paths(d.path(), first[1].key);
  fs::remove(lost.cell_file);
  {
    std::ofstream(cell_paths(d.path(), first[0].key).cell_file) << "{ truncated";
  }
  std::vector<std::string> seen;
  RunOptions ro;
  ro.resume = true;
  ro.on_cell = [&](const CellResult& r, std::size_t, std::size_t) { seen.push_back(r.key.str()); };
  const auto second = run_experiment(c, d.path(), ro);
  ASSERT_EQ(second.size(), first.size());
  EXPECT_EQ(seen.size(), 2u);
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(second[i].to_json().dump(), first[i].to_json().dump());

  // An intact record is reused as is.
  const auto stamp = fs::last_write_time(cell_paths(d.path(), first[0].key).cell_file);
  (void)run_experiment(c, d.path(), ro);
  EXPECT_EQ(fs::last_write_time(cell_paths(d.path(), first[0].key).cell_file), stamp);
}

TEST(Grid, RecomputedMetricsMatchTheStoredReport) {
  TempDir d("grid_recompute");
  const ExperimentConfig c = small_config();
  const auto results = run_experiment(c, d.path());
  const Graph g = load_dataset(c.dataset);
  for (const auto& r : results) {
    const CellResult again = recompute_cell(c, g, r, d.path());
    EXPECT_EQ(again.to_json().dump(), r.to_json().dump()) << r.key.str();
  }
}

TEST(Grid, FailingCellIsRecordedWithoutStoppingTheGrid) {
  ExperimentConfig c = small_config();
  c.defenses = {DefenseId::none, DefenseId::grad_reg};
  c.defense_options.grad_reg_lambda = std::numeric_limits<double>::quiet_NaN();
  const auto results = run_experiment(c, {});
  ASSERT_EQ(results.size(), 2u);
  EXPECT_TRUE(results[0].ok);
  EXPECT_FALSE(results[1].ok);
  EXPECT_FALSE(results[1].error.empty());
  EXPECT_EQ(results[1].to_json().at("status"), "error");
}

// ---------------------------------------------------------------------------
// Summary output

TEST(Summary, FilesAndFormat) {
  TempDir d("summary");
  const auto results = run_experiment(small_config(), {});
  emit_summary(results, d.path());
  std::istringstream jsonl(slurp(d.path() / "results.jsonl"));
  std::size_t lines = 0;
  for (std::string line; std::getline(jsonl, line);) {
    EXPECT_FALSE(nlohmann::json::parse(line).contains("wall_seconds"));
    ++lines;
  }
  EXPECT_EQ(lines, 2u);

  const std::string csv = slurp(d.path() / "summary.csv");
  EXPECT_EQ(csv.rfind("metric,gcn-2l/none,gcn-2l/jaccard\n", 0), 0u) << csv;
  EXPECT_NE(csv.find("\nstability,"), std::string::npos);
  EXPECT_NE(csv.find(" ± "), std::string::npos);
  for (const auto& m : summary_rows()) {
    const std::string svg = slurp(d.path() / "plots" / (m + ".svg"));
    EXPECT_EQ(svg.rfind("<svg", 0), 0u) << m;
  }
  EXPECT_TRUE(fs::exists(d.path() / "timings.jsonl"));
}

TEST(Summary, Errors) {
  TempDir d("summary_err");
  EXPECT_THROW(emit_summary({}, d.path()), MetricError);
  fs::create_directories(d.path());
  std::ofstream(d.path() / "blocker") << "x";
  const auto results = run_experiment(small_config(), {});
  EXPECT_ANY_THROW(emit_summary(results, d.path() / "blocker" / "out"));
}
