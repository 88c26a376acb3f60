// Command-line front end for the benchmark.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gnnbench/gnnbench.hpp"

namespace fs = std::filesystem;
using namespace gnnbench;

namespace {

fs::path resolve_output(const std::string& flag, const ExperimentConfig& cfg, const fs::path& config_path) {
  if (!flag.empty()) return flag;
  if (!cfg.output.empty()) return cfg.output;
  const fs::path root = std::getenv("GNNBENCH_OUTPUT_ROOT") ? fs::path(std::getenv("GNNBENCH_OUTPUT_ROOT")) : "results";
  return root / config_path.stem();
}

int cmd_run(const std::string& config, const std::string& out_flag, std::optional<std::size_t> workers,
            std::optional<std::uint64_t> seed, bool resume, bool allow_large) {
  ExperimentConfig cfg = load_config(config);
  if (workers) cfg.workers = *workers;
  if (seed) cfg.seed = *seed;
  if (allow_large) cfg.allow_large_subgraphx = true;
  const fs::path out = resolve_output(out_flag, cfg, config);
  std::cerr << "writing results to " << out.string() << "\n";
  RunOptions ro;
  ro.resume = resume;
  ro.on_cell = [](const CellResult& r, std::size_t done, std::size_t total) {
    std::cerr << "[" << done << "/" << total << "] " << r.key.str();
    if (r.ok)
      std::cerr << " acc=" << text::format_double(r.test_accuracy) << " (" << r.wall_seconds << " s)\n";
    else
      std::cerr << " FAILED: " << r.error << "\n";
  };
  const auto results = run_experiment(cfg, out, ro);
  emit_summary(results, out);
  std::size_t failed = 0;
  for (const auto& r : results) failed += !r.ok;
  if (failed) {
    std::cerr << failed << " of " << results.size() << " cells failed; see results.jsonl\n";
    return 2;
  }
  return 0;
}

int cmd_explain_one(const std::string& config, const std::string& checkpoint, std::size_t node, std::uint64_t seed,
                    const std::string& save_to, bool allow_large) {
  ExperimentConfig cfg = load_config(config);
  if (allow_large) cfg.allow_large_subgraphx = true;
  const TrainedModel model = load_checkpoint(checkpoint);
  DefenseConfig dc = cfg.defense_options;
  dc.id = parse_defense(model.meta.defense);
  const Graph g = poison_transform(load_dataset(cfg.dataset), dc);
  check_dataset_fits(cfg, g);
  if (node >= g.num_nodes()) throw ParameterError("node " + std::to_string(node) + " not in graph");
  const ExplanationMask m = explain(model, g, node, cfg.explainer, seed);
  if (!save_to.empty()) save_mask(m, save_to);
  std::cout << mask_to_text(m);
  return 0;
}

int cmd_metrics_only(const std::string& dir) {
  const fs::path out = dir;
  const ExperimentConfig cfg = load_config(out / "config.cfg");
  const Graph g = load_dataset(cfg.dataset);
  const auto stored_text = text::read_file((out / "results.jsonl").string());
  if (!stored_text) throw IngestionError((out / "results.jsonl").string(), "cannot open results");
  std::vector<CellResult> recomputed;
  std::string lines;
  for (auto line : text::split(*stored_text, '\n')) {
    if (text::trim(line).empty()) continue;
    const CellResult stored = cell_from_json(nlohmann::json::parse(line), cfg.fidelity_mode);
    recomputed.push_back(recompute_cell(cfg, g, stored, out));
    lines += recomputed.back().to_json().dump() + "\n";
  }
  write_text_file(out / "results.recomputed.jsonl", lines);
  const bool same = lines == *stored_text;
  std::cout << (same ? "recomputed metrics match results.jsonl\n" : "recomputed metrics DIFFER from results.jsonl\n");
  return same ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph neural network robustness and interpretability benchmark"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, save_to, from, content, cites;
  std::optional<std::size_t> workers;
  std::optional<std::uint64_t> seed;
  bool resume = false, allow_large = false;
  std::size_t node = 0;
  std::uint64_t explain_seed = 0;
  SyntheticSpec syn;
  std::optional<std::uint64_t> dataset_seed;

  auto* run = app.add_subcommand("run", "Run the experiment grid of a config file");
  run->add_option("--config", config, "Experiment config file")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Output directory (default: config 'output', else $GNNBENCH_OUTPUT_ROOT/<config name>)");
  run->add_option("--workers", workers, "Cells run in parallel")->check(CLI::PositiveNumber);
  run->add_option("--seed", seed, "Master seed (overrides the config)");
  run->add_flag("--resume", resume, "Reuse finished cells found in the output directory");
  run->add_flag("--allow-large-subgraphx", allow_large, "Run SubgraphX beyond the Cora-scale node limit");

  auto* one = app.add_subcommand("explain-one", "Explain one node of a checkpointed model and print the mask");
  one->add_option("--config", config, "Config naming the dataset and explainer")->required()->check(CLI::ExistingFile);
  one->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  one->add_option("--node", node, "Target node id")->required();
  one->add_option("--seed", explain_seed, "Explainer seed");
  one->add_option("--save", save_to, "Also write the mask to this file");
  one->add_flag("--allow-large-subgraphx", allow_large, "Run SubgraphX beyond the Cora-scale node limit");

  auto* met = app.add_subcommand("metrics-only", "Recompute metrics from persisted checkpoints and masks");
  met->add_option("--out", out, "Output directory of a finished run")->required()->check(CLI::ExistingDirectory);

  auto* conv = app.add_subcommand("convert-dataset", "Write a graph bundle");
  conv->add_option("--from", from, "linqs | cora-like | synthetic")
      ->required()
      ->check(CLI::IsMember({"linqs", "cora-like", "synthetic"}));
  conv->add_option("--content", content, "LINQS .content file")->check(CLI::ExistingFile);
  conv->add_option("--cites", cites, "LINQS .cites file")->check(CLI::ExistingFile);
  conv->add_option("--seed", dataset_seed, "Generator seed");
  conv->add_option("--nodes", syn.num_nodes, "Synthetic node count");
  conv->add_option("--classes", syn.num_classes, "Synthetic class count");
  conv->add_option("--features", syn.feature_dim, "Synthetic feature width");
  conv->add_option("--homophily", syn.homophily, "Synthetic intra-class edge probability");
  conv->add_option("--out", out, "Bundle directory")->required();

  auto* val = app.add_subcommand("validate-config", "Check a config file without running it");
  val->add_option("--config", config, "Experiment config file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config, out, workers, seed, resume, allow_large);
    if (*one) return cmd_explain_one(config, checkpoint, node, explain_seed, save_to, allow_large);
    if (*met) return cmd_metrics_only(out);
    if (*conv) {
      Graph g;
      if (from == "linqs") {
        if (content.empty() || cites.empty()) throw ConfigError("--from linqs needs --content and --cites");
        const LinqsImport imp = import_linqs(content, cites);
        g = imp.graph;
        std::cerr << "skipped " << imp.skipped_citations << " citation lines\n";
      } else if (from == "cora-like") {
        g = generate_synthetic(cora_like_spec(dataset_seed.value_or(2708)));
      } else {
        if (dataset_seed) syn.seed = *dataset_seed;
        g = generate_synthetic(syn);
      }
      save_graph_bundle(g, out);
      std::cout << g.num_nodes() << " nodes, " << g.num_edges() << " edges, " << g.num_features() << " features, "
                << g.num_classes() << " classes\n";
      return 0;
    }
    if (*val) {
      const ExperimentConfig cfg = load_config(config);
      validate_config(cfg);
      std::cout << "ok: " << cfg.iterations * cfg.architectures.size() * cfg.defenses.size() << " cells ("
                << cfg.iterations << " iterations x " << cfg.architectures.size() << " architectures x "
                << cfg.defenses.size() << " defenses), explainer " << to_string(cfg.explainer.id) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
