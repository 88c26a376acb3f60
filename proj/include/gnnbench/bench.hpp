#pragma once

// Experiment grid: dataset x architecture x defense for one explainer,
// repeated over iterations. Each iteration fixes one split and one target
// set shared by every cell. Seeds derive hierarchically from the master seed:
//
//   iteration  derive_seed(master, "iteration", i)
//   split      derive_seed(iteration, "split")
//   targets    derive_seed(iteration, "targets")
//   model init derive_seed(iteration, "model-init:<arch>")   shared by all defenses
//   cell       derive_seed(iteration, "cell:<arch>/<defense>")
//   training   derive_seed(cell, "train")
//   node       derive_seed(cell, "node", target)
//   run        derive_seed(node, "run", r)        explainer seed of run r
//   perturb    derive_seed(node, "perturb")       base of the stability perturbations
//
// Outputs under the output directory:
//   config.cfg           normalized copy of the configuration
//   cells/<key>.json     one finished cell (also the resume record)
//   masks/<key>/...      every mask, original and perturbed
//   checkpoints/<key>.json
//   results.jsonl        one line per cell in grid order
//   timings.jsonl        wall-clock per cell (kept apart so results stay reproducible)
//   summary.csv, plots/<metric>.svg

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "defenses.hpp"
#include "errors.hpp"
#include "explainers.hpp"
#include "graph.hpp"
#include "metrics.hpp"
#include "models.hpp"
#include "seeding.hpp"
#include "text.hpp"

namespace gnnbench {

// ---------------------------------------------------------------------------
// Configuration

struct DatasetRef {
  std::string kind = "cora-like";  // cora-like | synthetic | bundle
  std::string name = "cora-like";
  std::string path;  // bundle directory
  std::uint64_t seed = 2708;  // cora-like generator seed
  SyntheticSpec synthetic{};
};

struct ExperimentConfig {
  DatasetRef dataset;
  std::vector<Architecture> architectures{Architecture::gcn_2l};
  std::vector<DefenseId> defenses{DefenseId::none};
  DefenseConfig defense_options{};  // shared hyperparameters; id is set per cell
  ExplainerConfig explainer{};
  std::string attack = "none";
  std::size_t iterations = 5;
  std::size_t nodes_per_iteration = 10;
  std::size_t runs_per_node = 5;
  std::size_t epochs = 200;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  std::string output;
  std::size_t workers = 1;
  FidelityMode fidelity_mode = FidelityMode::agreement;
  double sparsity_tolerance = 1e-6;
  PerturbationSpec perturbation{};
  bool allow_large_subgraphx = false;
  std::size_t subgraphx_node_limit = 3000;
};

namespace detail {

inline std::vector<std::string> list_values(const std::string& v) {
  std::vector<std::string> out;
  for (auto part : text::split(v, ',')) {
    auto t = text::trim(part);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

}  // namespace detail

// `key = value` lines; `#` starts a comment. Unknown keys and malformed
// values raise ConfigError naming the line.
inline ExperimentConfig parse_config(const std::string& content, const std::string& origin = "<config>") {
  ExperimentConfig c;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    return ConfigError(origin + ":" + std::to_string(line_no) + ": " + what);
  };
  std::map<std::string, std::size_t> seen;
  for (auto raw : text::split(content, '\n')) {
    ++line_no;
    auto hash = raw.find('#');
    auto line = text::trim(hash == std::string_view::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw fail("expected 'key = value'");
    const std::string key(text::trim(line.substr(0, eq)));
    const std::string value(text::trim(line.substr(eq + 1)));
    if (key.empty()) throw fail("empty key");
    if (seen.count(key)) throw fail("duplicate key '" + key + "' (first on line " + std::to_string(seen[key]) + ")");
    seen[key] = line_no;

    auto num = [&](double lo, double hi) {
      auto v = text::parse_double(value);
      if (!v || !(*v >= lo && *v <= hi)) throw fail("invalid value '" + value + "' for " + key);
      return *v;
    };
    auto count = [&](std::size_t lo) {
      auto v = text::parse_int<std::int64_t>(value);
      if (!v || *v < static_cast<std::int64_t>(lo)) throw fail("invalid value '" + value + "' for " + key);
      return static_cast<std::size_t>(*v);
    };
    auto seed = [&]() {
      auto v = text::parse_int<std::uint64_t>(value);
      if (!v) throw fail("invalid seed '" + value + "'");
      return *v;
    };
    auto flag = [&]() {
      if (value == "true") return true;
      if (value == "false") return false;
      throw fail("expected true or false for " + key);
    };

    try {
      if (key == "dataset.kind") {
        if (value != "cora-like" && value != "synthetic" && value != "bundle")
          throw fail("unknown dataset kind '" + value + "' (expected cora-like, synthetic or bundle)");
        c.dataset.kind = value;
      } else if (key == "dataset.name") c.dataset.name = value;
      else if (key == "dataset.path") c.dataset.path = value;
      else if (key == "dataset.seed") c.dataset.seed = seed();
      else if (key == "synthetic.num_nodes") c.dataset.synthetic.num_nodes = count(1);
      else if (key == "synthetic.num_classes") c.dataset.synthetic.num_classes = count(1);
      else if (key == "synthetic.feature_dim") c.dataset.synthetic.feature_dim = count(1);
      else if (key == "synthetic.homophily") c.dataset.synthetic.homophily = num(0, 1);
      else if (key == "synthetic.seed") c.dataset.synthetic.seed = seed();
      else if (key == "synthetic.average_degree") c.dataset.synthetic.average_degree = num(0, 1e9);
      else if (key == "synthetic.signature_bits") c.dataset.synthetic.signature_bits = count(0);
      else if (key == "synthetic.signature_noise") c.dataset.synthetic.signature_noise = num(0, 1);
      else if (key == "synthetic.background_bits") c.dataset.synthetic.background_bits = count(0);
      else if (key == "architectures") {
        c.architectures.clear();
        for (const auto& a : detail::list_values(value)) c.architectures.push_back(parse_architecture(a));
      } else if (key == "defenses") {
        c.defenses.clear();
        for (const auto& d : detail::list_values(value)) c.defenses.push_back(parse_defense(d));
      } else if (key == "explainer") c.explainer.id = parse_explainer(value);
      else if (key == "attack") {
        if (value != "none" && value != "fgsm-in-training")
          throw fail("unsupported attack '" + value + "' (expected none or fgsm-in-training)");
        c.attack = value;
      } else if (key == "iterations") c.iterations = count(1);
      else if (key == "nodes_per_iteration") c.nodes_per_iteration = count(1);
      else if (key == "runs_per_node") c.runs_per_node = count(2);
      else if (key == "epochs") c.epochs = count(1);
      else if (key == "train_fraction") {
        c.train_fraction = num(0, 1);
        if (c.train_fraction <= 0 || c.train_fraction >= 1) throw fail("train_fraction must lie strictly in (0, 1)");
      } else if (key == "seed") c.seed = seed();
      else if (key == "output") c.output = value;
      else if (key == "workers") c.workers = count(1);
      else if (key == "metrics.fidelity_mode") c.fidelity_mode = parse_fidelity_mode(value);
      else if (key == "metrics.sparsity_tolerance") c.sparsity_tolerance = num(0, 1);
      else if (key == "perturbation.feature_fraction") c.perturbation.feature_fraction = num(0, 1);
      else if (key == "perturbation.node_removal_fraction") c.perturbation.node_removal_fraction = num(0, 1);
      else if (key == "gnnexplainer.epochs") c.explainer.gnnexplainer.epochs = count(1);
      else if (key == "gnnexplainer.lr") c.explainer.gnnexplainer.lr = num(0, 1e9);
      else if (key == "gnnexplainer.edge_size") c.explainer.gnnexplainer.edge_size = num(0, 1e9);
      else if (key == "gnnexplainer.node_feat_size") c.explainer.gnnexplainer.node_feat_size = num(0, 1e9);
      else if (key == "gnnexplainer.edge_ent") c.explainer.gnnexplainer.edge_ent = num(0, 1e9);
      else if (key == "gnnexplainer.node_feat_ent") c.explainer.gnnexplainer.node_feat_ent = num(0, 1e9);
      else if (key == "gnnexplainer.eps") c.explainer.gnnexplainer.eps = num(0, 0.5);
      else if (key == "gnnexplainer.init_std") c.explainer.gnnexplainer.init_std = num(0, 1e9);
      else if (key == "subgraphx.rollout") c.explainer.subgraphx.rollout = count(1);
      else if (key == "subgraphx.min_atoms") c.explainer.subgraphx.min_atoms = count(1);
      else if (key == "subgraphx.c_puct") c.explainer.subgraphx.c_puct = num(0, 1e9);
      else if (key == "subgraphx.expand_atoms") c.explainer.subgraphx.expand_atoms = count(1);
      else if (key == "subgraphx.local_radius") c.explainer.subgraphx.local_radius = count(1);
      else if (key == "subgraphx.sample_num") c.explainer.subgraphx.sample_num = count(1);
      else if (key == "subgraphx.reward_method") {
        if (value != "mc_l_shapley") throw fail("subgraphx.reward_method: only mc_l_shapley is supported");
        c.explainer.subgraphx.reward_method = value;
      } else if (key == "subgraphx.high2low") c.explainer.subgraphx.high2low = flag();
      else if (key == "subgraphx.subgraph_building") {
        if (value != "zero_filling") throw fail("subgraphx.subgraph_building: only zero_filling is supported");
        c.explainer.subgraphx.subgraph_building = value;
      } else if (key == "subgraphx.max_nodes") c.explainer.subgraphx.max_nodes = count(1);
      else if (key == "subgraphx.allow_large") c.allow_large_subgraphx = flag();
      else if (key == "subgraphx.node_limit") c.subgraphx_node_limit = count(1);
      else if (key.rfind("defense.", 0) == 0) {
        if (!set_defense_option(c.defense_options, key.substr(8), value)) throw fail("unknown key '" + key + "'");
      } else {
        throw fail("unknown key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      if (msg.rfind(origin + ":", 0) == 0) throw;
      throw fail(msg);
    } catch (const ParameterError& e) {
      throw fail(e.what());
    }
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  auto content = text::read_file(path.string());
  if (!content) throw ConfigError("cannot read config file " + path.string());
  return parse_config(*content, path.string());
}

// Checks that do not need the dataset.
inline void validate_config(const ExperimentConfig& c) {
  if (c.architectures.empty()) throw ConfigError("no architectures configured");
  if (c.defenses.empty()) throw ConfigError("no defenses configured");
  for (std::size_t i = 0; i < c.architectures.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (c.architectures[i] == c.architectures[j])
        throw ConfigError("architecture '" + to_string(c.architectures[i]) + "' listed twice");
  for (std::size_t i = 0; i < c.defenses.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (c.defenses[i] == c.defenses[j]) throw ConfigError("defense '" + to_string(c.defenses[i]) + "' listed twice");
  if (c.dataset.kind == "bundle" && c.dataset.path.empty()) throw ConfigError("dataset.kind = bundle needs dataset.path");
  if (c.dataset.kind == "synthetic") {
    const auto& s = c.dataset.synthetic;
    if (s.num_nodes < s.num_classes) throw ConfigError("synthetic.num_nodes must be at least synthetic.num_classes");
    if (s.feature_dim < s.num_classes) throw ConfigError("synthetic.feature_dim must be at least synthetic.num_classes");
  }
  const auto& d = c.defense_options;
  if (d.distillation_temperature <= 0) throw ConfigError("defense.distillation.temperature must be positive");
  if (d.autoencoder.bottleneck_dim > d.autoencoder.hidden_dim)
    throw ConfigError("defense.autoencoder.bottleneck_dim exceeds hidden_dim");
  if (d.grad_reg_step <= 0) throw ConfigError("defense.grad_reg.step must be positive");
}

inline std::string config_to_text(const ExperimentConfig& c) {
  std::ostringstream o;
  auto d = [](double v) { return text::format_double(v); };
  o << "dataset.kind = " << c.dataset.kind << "\n";
  o << "dataset.name = " << c.dataset.name << "\n";
  if (!c.dataset.path.empty()) o << "dataset.path = " << c.dataset.path << "\n";
  o << "dataset.seed = " << c.dataset.seed << "\n";
  if (c.dataset.kind == "synthetic") {
    const auto& s = c.dataset.synthetic;
    o << "synthetic.num_nodes = " << s.num_nodes << "\n"
      << "synthetic.num_classes = " << s.num_classes << "\n"
      << "synthetic.feature_dim = " << s.feature_dim << "\n"
      << "synthetic.homophily = " << d(s.homophily) << "\n"
      << "synthetic.seed = " << s.seed << "\n"
      << "synthetic.average_degree = " << d(s.average_degree) << "\n"
      << "synthetic.signature_bits = " << s.signature_bits << "\n"
      << "synthetic.signature_noise = " << d(s.signature_noise) << "\n"
      << "synthetic.background_bits = " << s.background_bits << "\n";
  }
  o << "architectures = ";
  for (std::size_t i = 0; i < c.architectures.size(); ++i) o << (i ? ", " : "") << to_string(c.architectures[i]);
  o << "\ndefenses = ";
  for (std::size_t i = 0; i < c.defenses.size(); ++i) o << (i ? ", " : "") << to_string(c.defenses[i]);
  o << "\nexplainer = " << to_string(c.explainer.id) << "\n";
  o << "attack = " << c.attack << "\n";
  o << "iterations = " << c.iterations << "\n";
  o << "nodes_per_iteration = " << c.nodes_per_iteration << "\n";
  o << "runs_per_node = " << c.runs_per_node << "\n";
  o << "epochs = " << c.epochs << "\n";
  o << "train_fraction = " << d(c.train_fraction) << "\n";
  o << "seed = " << c.seed << "\n";
  o << "metrics.fidelity_mode = " << to_string(c.fidelity_mode) << "\n";
  o << "metrics.sparsity_tolerance = " << d(c.sparsity_tolerance) << "\n";
  o << "perturbation.feature_fraction = " << d(c.perturbation.feature_fraction) << "\n";
  o << "perturbation.node_removal_fraction = " << d(c.perturbation.node_removal_fraction) << "\n";
  const auto& g = c.explainer.gnnexplainer;
  o << "gnnexplainer.epochs = " << g.epochs << "\n"
    << "gnnexplainer.lr = " << d(g.lr) << "\n"
    << "gnnexplainer.edge_size = " << d(g.edge_size) << "\n"
    << "gnnexplainer.node_feat_size = " << d(g.node_feat_size) << "\n"
    << "gnnexplainer.edge_ent = " << d(g.edge_ent) << "\n"
    << "gnnexplainer.node_feat_ent = " << d(g.node_feat_ent) << "\n"
    << "gnnexplainer.eps = " << d(g.eps) << "\n"
    << "gnnexplainer.init_std = " << d(g.init_std) << "\n";
  const auto& s = c.explainer.subgraphx;
  o << "subgraphx.rollout = " << s.rollout << "\n"
    << "subgraphx.min_atoms = " << s.min_atoms << "\n"
    << "subgraphx.c_puct = " << d(s.c_puct) << "\n"
    << "subgraphx.expand_atoms = " << s.expand_atoms << "\n"
    << "subgraphx.local_radius = " << s.local_radius << "\n"
    << "subgraphx.sample_num = " << s.sample_num << "\n"
    << "subgraphx.reward_method = " << s.reward_method << "\n"
    << "subgraphx.high2low = " << (s.high2low ? "true" : "false") << "\n"
    << "subgraphx.subgraph_building = " << s.subgraph_building << "\n"
    << "subgraphx.max_nodes = " << s.max_nodes << "\n"
    << "subgraphx.allow_large = " << (c.allow_large_subgraphx ? "true" : "false") << "\n"
    << "subgraphx.node_limit = " << c.subgraphx_node_limit << "\n";
  const auto& f = c.defense_options;
  o << "defense.jaccard.threshold = " << d(f.jaccard_threshold) << "\n"
    << "defense.gnnguard.lr = " << d(f.guard.lr) << "\n"
    << "defense.gnnguard.attention = " << (f.guard.attention ? "true" : "false") << "\n"
    << "defense.gnnguard.drop = " << (f.guard.drop ? "true" : "false") << "\n"
    << "defense.gnnguard.train_iters = " << f.guard.train_iters << "\n"
    << "defense.gnnguard.initial_threshold = " << d(f.guard.initial_threshold) << "\n"
    << "defense.grad_reg.lambda = " << d(f.grad_reg_lambda) << "\n"
    << "defense.grad_reg.step = " << d(f.grad_reg_step) << "\n"
    << "defense.distillation.temperature = " << d(f.distillation_temperature) << "\n"
    << "defense.adv_training.attack = " << f.adv_attack << "\n"
    << "defense.adv_training.epsilon = " << d(f.adv_epsilon) << "\n"
    << "defense.adv_training.lambda = " << d(f.adv_lambda) << "\n"
    << "defense.quantization.num_levels = " << f.quantization_levels << "\n"
    << "defense.autoencoder.hidden_dim = " << f.autoencoder.hidden_dim << "\n"
    << "defense.autoencoder.bottleneck_dim = " << f.autoencoder.bottleneck_dim << "\n"
    << "defense.autoencoder.reconstruction_weight = " << d(f.autoencoder_weight) << "\n"
    << "defense.autoencoder.noise_std = " << d(f.autoencoder.noise_std) << "\n";
  return o.str();
}

inline Graph load_dataset(const DatasetRef& ref) {
  if (ref.kind == "bundle") return load_graph_bundle(ref.path);
  if (ref.kind == "synthetic") return generate_synthetic(ref.synthetic);
  if (ref.kind == "cora-like") return generate_synthetic(cora_like_spec(ref.seed));
  throw ConfigError("unknown dataset kind '" + ref.kind + "'");
}

// SubgraphX is only run on Cora-scale graphs unless explicitly allowed.
inline void check_dataset_fits(const ExperimentConfig& c, const Graph& g) {
  if (c.explainer.id == ExplainerId::subgraphx && g.num_nodes() > c.subgraphx_node_limit && !c.allow_large_subgraphx)
    throw ConfigError("subgraphx on a " + std::to_string(g.num_nodes()) + "-node graph exceeds the " +
                      std::to_string(c.subgraphx_node_limit) +
                      "-node limit; set subgraphx.allow_large = true (or pass --allow-large-subgraphx) to override");
}

// ---------------------------------------------------------------------------
// Cells

struct IterationPlan {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  SplitMasks masks;
  std::vector<NodeId> targets;
};

inline IterationPlan plan_iteration(const ExperimentConfig& c, const Graph& g, std::size_t i) {
  IterationPlan p;
  p.index = i;
  p.seed = derive_seed(c.seed, "iteration", i);
  p.masks = split(g, c.train_fraction, derive_seed(p.seed, "split"));
  std::vector<NodeId> test = p.masks.test_nodes();
  if (test.size() < c.nodes_per_iteration)
    throw ConfigError("nodes_per_iteration = " + std::to_string(c.nodes_per_iteration) + " exceeds the " +
                      std::to_string(test.size()) + "-node test split");
  Rng rng = make_rng(derive_seed(p.seed, "targets"));
  shuffle(test.begin(), test.end(), rng);
  p.targets.assign(test.begin(), test.begin() + static_cast<std::ptrdiff_t>(c.nodes_per_iteration));
  std::sort(p.targets.begin(), p.targets.end());
  return p;
}

struct CellKey {
  std::string dataset;
  Architecture architecture;
  DefenseId defense;
  ExplainerId explainer;
  std::size_t iteration;

  std::string str() const {
    return dataset + "__" + to_string(architecture) + "__" + to_string(defense) + "__" + to_string(explainer) +
           "__it" + std::to_string(iteration);
  }
};

struct CellResult {
  CellKey key;
  bool ok = false;
  std::string error;
  double test_accuracy = 0;
  std::vector<NodeMetrics> per_node;
  MetricReport report;
  nlohmann::json seeds = nlohmann::json::object();
  std::vector<NodeId> targets;
  double wall_seconds = 0;  // not part of the reproducible record

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["key"] = key.str();
    j["dataset"] = key.dataset;
    j["architecture"] = to_string(key.architecture);
    j["defense"] = to_string(key.defense);
    j["explainer"] = to_string(key.explainer);
    j["iteration"] = key.iteration;
    j["status"] = ok ? "ok" : "error";
    if (!ok) {
      j["error"] = error;
      return j;
    }
    j["test_accuracy"] = test_accuracy;
    j["targets"] = targets;
    j["seeds"] = seeds;
    j["report"] = report.to_json();
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : per_node)
      nodes.push_back({{"node", n.node},
                       {"fidelity_agreement", n.fidelity_agreement},
                       {"fidelity_probability", n.fidelity_probability},
                       {"sparsity", n.sparsity},
                       {"stability", n.stability},
                       {"consistency", n.consistency}});
    j["per_node"] = nodes;
    return j;
  }
};

inline CellResult cell_from_json(const nlohmann::json& j, FidelityMode mode) {
  CellResult r;
  r.key.dataset = j.at("dataset").get<std::string>();
  r.key.architecture = parse_architecture(j.at("architecture").get<std::string>());
  r.key.defense = parse_defense(j.at("defense").get<std::string>());
  r.key.explainer = parse_explainer(j.at("explainer").get<std::string>());
  r.key.iteration = j.at("iteration").get<std::size_t>();
  r.ok = j.at("status").get<std::string>() == "ok";
  if (!r.ok) {
    r.error = j.value("error", "");
    return r;
  }
  r.test_accuracy = j.at("test_accuracy").get<double>();
  r.targets = j.at("targets").get<std::vector<NodeId>>();
  r.seeds = j.at("seeds");
  for (const auto& n : j.at("per_node"))
    r.per_node.push_back({n.at("node").get<NodeId>(), n.at("fidelity_agreement").get<double>(),
                          n.at("fidelity_probability").get<double>(), n.at("sparsity").get<double>(),
                          n.at("stability").get<double>(), n.at("consistency").get<double>()});
  const auto& rep = j.at("report");
  r.report = build_report(r.per_node, mode, rep.at("runs").get<std::size_t>(), rep.at("metadata"));
  return r;
}

inline std::string mask_file_name(NodeId node, std::size_t run, bool perturbed) {
  return "node" + std::to_string(node) + (perturbed ? "_perturbed" : "") + "_run" + std::to_string(run) + ".mask";
}

inline Graph poison_transform(const Graph& g, const DefenseConfig& d) {
  if (d.id == DefenseId::jaccard) return jaccard_defense(g, d.jaccard_threshold);
  if (d.id == DefenseId::quantization) return quantize_graph(g, d.quantization_levels);
  return g;
}

inline nlohmann::json protocol_metadata(const ExperimentConfig& c, const CellKey& k) {
  return {{"dataset", k.dataset},
          {"architecture", to_string(k.architecture)},
          {"defense", to_string(k.defense)},
          {"explainer", to_string(k.explainer)},
          {"iteration", k.iteration},
          {"nodes_per_iteration", c.nodes_per_iteration},
          {"runs_per_node", c.runs_per_node},
          {"epochs", c.epochs},
          {"sparsity_tolerance", c.sparsity_tolerance},
          {"perturbation",
           {{"feature_fraction", c.perturbation.feature_fraction},
            {"node_removal_fraction", c.perturbation.node_removal_fraction},
            {"feature_budget", "per node"}}},
          {"explainer_config", c.explainer.id == ExplainerId::gnnexplainer ? c.explainer.gnnexplainer.to_json()
                                                                           : c.explainer.subgraphx.to_json()},
          {"attack", c.attack},
          {"gnnguard_interpretation", "cosine-similarity message gating with learnable per-layer threshold"}};
}

// Per-node metrics from masks already in original node ids.
inline NodeMetrics node_metrics(const TrainedModel& model, const Graph& g, NodeId target,
                                const std::vector<ExplanationMask>& runs, const std::vector<ExplanationMask>& perturbed,
                                double sparsity_tol) {
  NodeMetrics n;
  n.node = target;
  const auto fid = fidelity_scores(model, g, runs);
  for (std::size_t r = 0; r < runs.size(); ++r) {
    n.fidelity_agreement += fid[r].agreement;
    n.fidelity_probability += fid[r].probability_change;
    n.sparsity += sparsity(runs[r], sparsity_tol);
  }
  const auto k = static_cast<double>(runs.size());
  n.fidelity_agreement /= k;
  n.fidelity_probability /= k;
  n.sparsity /= k;
  n.consistency = consistency(runs);
  n.stability = stability_from_masks(runs, perturbed);
  return n;
}

struct CellPaths {
  std::filesystem::path cell_file, mask_dir, checkpoint;
};

inline CellPaths cell_paths(const std::filesystem::path& out, const CellKey& k) {
  return {out / "cells" / (k.str() + ".json"), out / "masks" / k.str(), out / "checkpoints" / (k.str() + ".json")};
}

inline CellResult run_cell(const ExperimentConfig& c, const Graph& g, const IterationPlan& plan, Architecture arch,
                           DefenseId defense, const std::filesystem::path& out) {
  CellResult r;
  r.key = {c.dataset.name, arch, defense, c.explainer.id, plan.index};
  r.targets = plan.targets;
  const auto start = std::chrono::steady_clock::now();
  try {
    const std::uint64_t init_seed = derive_seed(plan.seed, "model-init:" + to_string(arch));
    const std::uint64_t cell_seed = derive_seed(plan.seed, "cell:" + to_string(arch) + "/" + to_string(defense));
    DefenseConfig dc = c.defense_options;
    dc.id = defense;
    TrainOptions opt;
    opt.epochs = c.epochs;
    opt.seed = derive_seed(cell_seed, "train");
    const ModelSpec spec{arch, g.num_features(), g.num_classes()};
    const DefendedModel dm = train_defended(dc, spec, g, plan.masks, init_seed, opt);
    r.test_accuracy = accuracy(dm.model, dm.graph, plan.masks.test_nodes());
    r.seeds = {{"iteration", plan.seed}, {"model_init", init_seed}, {"cell", cell_seed}, {"train", opt.seed}};

    const CellPaths paths = cell_paths(out, r.key);
    if (!out.empty()) {
      std::filesystem::create_directories(paths.mask_dir);
      std::filesystem::create_directories(paths.checkpoint.parent_path());
      save_checkpoint(dm.model, paths.checkpoint);
    }
    const Explainer explainer = [&](const Graph& graph, NodeId t, std::uint64_t s) {
      return explain(dm.model, graph, t, c.explainer, s);
    };
    for (NodeId t : plan.targets) {
      const std::uint64_t node_seed = derive_seed(cell_seed, "node", t);
      PerturbationSpec pspec = c.perturbation;
      pspec.seed = derive_seed(node_seed, "perturb");
      std::vector<ExplanationMask> runs, perturbed;
      for (std::size_t k = 0; k < c.runs_per_node; ++k) {
        const std::uint64_t s = derive_seed(node_seed, "run", k);
        runs.push_back(explainer(dm.graph, t, s));
        perturbed.push_back(explain_perturbed(dm.graph, explainer, t, stability_perturbation(pspec, k), s));
        if (!out.empty()) {
          save_mask(runs.back(), paths.mask_dir / mask_file_name(t, k, false));
          save_mask(perturbed.back(), paths.mask_dir / mask_file_name(t, k, true));
        }
      }
      r.per_node.push_back(node_metrics(dm.model, dm.graph, t, runs, perturbed, c.sparsity_tolerance));
    }
    r.report = build_report(r.per_node, c.fidelity_mode, c.runs_per_node, protocol_metadata(c, r.key));
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// Recomputes one cell's metrics from its persisted checkpoint and masks.
inline CellResult recompute_cell(const ExperimentConfig& c, const Graph& g, const CellResult& stored,
                                 const std::filesystem::path& out) {
  CellResult r = stored;
  if (!stored.ok) return r;
  const CellPaths paths = cell_paths(out, stored.key);
  const TrainedModel model = load_checkpoint(paths.checkpoint);
  DefenseConfig dc = c.defense_options;
  dc.id = stored.key.defense;
  const Graph dg = poison_transform(g, dc);
  r.per_node.clear();
  for (NodeId t : stored.targets) {
    std::vector<ExplanationMask> runs, perturbed;
    for (std::size_t k = 0; k < c.runs_per_node; ++k) {
      runs.push_back(load_mask(paths.mask_dir / mask_file_name(t, k, false)));
      perturbed.push_back(load_mask(paths.mask_dir / mask_file_name(t, k, true)));
    }
    r.per_node.push_back(node_metrics(model, dg, t, runs, perturbed, c.sparsity_tolerance));
  }
  r.report = build_report(r.per_node, c.fidelity_mode, c.runs_per_node, protocol_metadata(c, r.key));
  return r;
}

// ---------------------------------------------------------------------------
// Grid

struct RunOptions {
  bool resume = false;
  std::function<void(const CellResult&, std::size_t done, std::size_t total)> on_cell;
};

inline void write_text_file(const std::filesystem::path& p, const std::string& content) {
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out << content;
    if (!out) throw Error("failed writing " + p.string());
  }
  std::filesystem::rename(tmp, p);
}

inline std::vector<CellResult> run_experiment(const ExperimentConfig& c, const std::filesystem::path& out,
                                              const RunOptions& ro = {}) {
  validate_config(c);
  const Graph g = load_dataset(c.dataset);
  check_dataset_fits(c, g);
  if (!out.empty()) {
    std::filesystem::create_directories(out / "cells");
    write_text_file(out / "config.cfg", config_to_text(c));
  }
  std::vector<IterationPlan> plans;
  for (std::size_t i = 0; i < c.iterations; ++i) plans.push_back(plan_iteration(c, g, i));

  struct Job {
    std::size_t iteration;
    Architecture arch;
    DefenseId defense;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < c.iterations; ++i)
    for (Architecture a : c.architectures)
      for (DefenseId d : c.defenses) jobs.push_back({i, a, d});

  std::vector<std::optional<CellResult>> results(jobs.size());
  std::mutex mu;
  std::size_t done = 0;
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t k = next.fetch_add(1);
      if (k >= jobs.size()) return;
      const Job& job = jobs[k];
      const CellKey key{c.dataset.name, job.arch, job.defense, c.explainer.id, job.iteration};
      const auto cell_file = cell_paths(out, key).cell_file;
      std::optional<CellResult> res;
      if (ro.resume && !out.empty() && std::filesystem::exists(cell_file)) {
        auto content = text::read_file(cell_file.string());
        try {
          if (content) {
            auto j = nlohmann::json::parse(*content);
            CellResult loaded = cell_from_json(j, c.fidelity_mode);
            if (loaded.ok) {
              loaded.wall_seconds = j.value("wall_seconds", 0.0);
              res = std::move(loaded);
            }
          }
        } catch (const std::exception&) {
          res.reset();  // unreadable record: recompute the cell
        }
      }
      if (!res) {
        res = run_cell(c, g, plans[job.iteration], job.arch, job.defense, out);
        if (!out.empty()) {
          auto j = res->to_json();
          j["wall_seconds"] = res->wall_seconds;
          write_text_file(cell_file, j.dump() + "\n");
        }
      }
      std::lock_guard<std::mutex> lock(mu);
      results[k] = std::move(res);
      ++done;
      if (ro.on_cell) ro.on_cell(*results[k], done, jobs.size());
    }
  };
  const std::size_t nthreads = std::max<std::size_t>(1, std::min(c.workers, jobs.size()));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::vector<CellResult> out_results;
  for (auto& r : results) out_results.push_back(std::move(*r));
  return out_results;
}

// ---------------------------------------------------------------------------
// Summary output

struct ColumnSummary {
  std::string column;  // "<arch>/<defense>"
  std::map<std::string, Summary> metrics;
};

inline std::vector<ColumnSummary> summarize(const std::vector<CellResult>& results) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const CellResult*>> by_col;
  for (const auto& r : results) {
    if (!r.ok) continue;
    const std::string col = to_string(r.key.architecture) + "/" + to_string(r.key.defense);
    if (!by_col.count(col)) order.push_back(col);
    by_col[col].push_back(&r);
  }
  std::vector<ColumnSummary> out;
  for (const auto& col : order) {
    std::map<std::string, std::vector<double>> vals;
    for (const CellResult* r : by_col[col]) {
      for (const auto& n : r->per_node) {
        vals["fidelity"].push_back(r->report.metadata.value("fidelity_mode", "agreement") == "agreement"
                                       ? n.fidelity_agreement
                                       : n.fidelity_probability);
        vals["fidelity_probability"].push_back(n.fidelity_probability);
        vals["sparsity"].push_back(n.sparsity);
        vals["stability"].push_back(n.stability);
        vals["consistency"].push_back(n.consistency);
      }
      vals["accuracy"].push_back(r->test_accuracy);
    }
    ColumnSummary cs{col, {}};
    for (const auto& [m, v] : vals) cs.metrics[m] = aggregate(v);
    out.push_back(std::move(cs));
  }
  return out;
}

inline const std::vector<std::string>& summary_rows() {
  static const std::vector<std::string> rows{"fidelity", "fidelity_probability", "sparsity", "stability",
                                             "consistency", "accuracy"};
  return rows;
}

inline std::string svg_bar_chart(const std::string& title, const std::vector<ColumnSummary>& cols,
                                 const std::string& metric) {
  const double width = 80.0 + 60.0 * static_cast<double>(cols.size()), height = 320.0;
  const double top = 40, bottom = 250, left = 60;
  double ymax = 0;
  for (const auto& c : cols) {
    const auto& s = c.metrics.at(metric);
    ymax = std::max(ymax, s.mean + s.std);
  }
  if (ymax <= 0) ymax = 1;
  auto y = [&](double v) { return bottom - (bottom - top) * v / ymax; };
  auto num = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return std::string(b);
  };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
    << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  o << "<text x=\"" << num(width / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
    << "</text>\n";
  o << "<line x1=\"" << num(left) << "\" y1=\"" << num(bottom) << "\" x2=\"" << num(width - 10) << "\" y2=\""
    << num(bottom) << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << num(left) << "\" y1=\"" << num(top) << "\" x2=\"" << num(left) << "\" y2=\"" << num(bottom)
    << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = ymax * k / 4.0;
    o << "<text x=\"" << num(left - 4) << "\" y=\"" << num(y(v) + 3) << "\" text-anchor=\"end\">" << num(v)
      << "</text>\n";
  }
  for (std::size_t i = 0; i < cols.size(); ++i) {
    const auto& s = cols[i].metrics.at(metric);
    const double x = left + 15 + 60.0 * static_cast<double>(i);
    o << "<rect x=\"" << num(x) << "\" y=\"" << num(y(s.mean)) << "\" width=\"30\" height=\""
      << num(bottom - y(s.mean)) << "\" fill=\"#4a78b5\"/>\n";
    o << "<line x1=\"" << num(x + 15) << "\" y1=\"" << num(y(s.mean + s.std)) << "\" x2=\"" << num(x + 15)
      << "\" y2=\"" << num(y(std::max(0.0, s.mean - s.std))) << "\" stroke=\"black\"/>\n";
    o << "<text transform=\"translate(" << num(x + 15) << "," << num(bottom + 8) << ") rotate(45)\">"
      << cols[i].column << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline void emit_summary(const std::vector<CellResult>& results, const std::filesystem::path& out) {
  if (results.empty()) throw MetricError("emit_summary: no results");
  std::filesystem::create_directories(out / "plots");
  std::ostringstream jsonl, timings;
  for (const auto& r : results) {
    jsonl << r.to_json().dump() << "\n";
    timings << nlohmann::json{{"key", r.key.str()}, {"wall_seconds", r.wall_seconds}}.dump() << "\n";
  }
  write_text_file(out / "results.jsonl", jsonl.str());
  write_text_file(out / "timings.jsonl", timings.str());

  const auto cols = summarize(results);
  std::ostringstream csv;
  csv << "metric";
  for (const auto& c : cols) csv << "," << c.column;
  csv << "\n";
  for (const auto& m : summary_rows()) {
    csv << m;
    for (const auto& c : cols) csv << "," << format_summary(c.metrics.at(m));
    csv << "\n";
  }
  write_text_file(out / "summary.csv", csv.str());
  if (cols.empty()) return;
  for (const auto& m : summary_rows()) write_text_file(out / "plots" / (m + ".svg"), svg_bar_chart(m, cols, m));
}

}  // namespace gnnbench
