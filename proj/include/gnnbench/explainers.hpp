#pragma once

// Post-hoc explainers producing a feature mask over the target's receptive
// field: GNNExplainer (feature-mask optimization) and SubgraphX (MCTS over
// connected subgraphs scored by Shapley values). Also the mask file format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "autodiff.hpp"
#include "errors.hpp"
#include "graph.hpp"
#include "models.hpp"
#include "seeding.hpp"
#include "text.hpp"

namespace gnnbench {

// Feature mask over `node_support` (original node ids, sorted), row-major.
struct ExplanationMask {
  std::string explainer;
  NodeId target = 0;
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
  std::size_t num_features = 0;
  std::vector<NodeId> node_support;
  std::vector<NodeId> subgraph_nodes;  // SubgraphX only
  std::vector<double> values;

  std::size_t rows() const { return node_support.size(); }
  double at(std::size_t row, std::size_t col) const { return values[row * num_features + col]; }
  std::optional<std::size_t> row_of(NodeId node) const {
    auto it = std::lower_bound(node_support.begin(), node_support.end(), node);
    if (it == node_support.end() || *it != node) return std::nullopt;
    return static_cast<std::size_t>(it - node_support.begin());
  }
  friend bool operator==(const ExplanationMask&, const ExplanationMask&) = default;
};

// Text format:
//   gnnbench-mask 1
//   explainer <id>
//   target <node>
//   seed <n>
//   config <json>
//   num_features <F>
//   node_support <ids...>
//   subgraph_nodes <ids...>
//   values dense            followed by one line of F values per support row
//   values sparse <count>   followed by <flat row-major index> <value> lines
// Values use the shortest decimal form that parses back to the same double.
inline std::string mask_to_text(const ExplanationMask& m) {
  std::ostringstream out;
  out << "gnnbench-mask 1\n";
  out << "explainer " << m.explainer << "\n";
  out << "target " << m.target << "\n";
  out << "seed " << m.seed << "\n";
  out << "config " << m.config.dump() << "\n";
  out << "num_features " << m.num_features << "\n";
  out << "node_support";
  for (NodeId u : m.node_support) out << ' ' << u;
  out << "\nsubgraph_nodes";
  for (NodeId u : m.subgraph_nodes) out << ' ' << u;
  out << "\n";
  std::size_t nonzero = 0;
  for (double v : m.values) nonzero += v != 0.0;
  if (nonzero * 2 < m.values.size()) {
    out << "values sparse " << nonzero << "\n";
    for (std::size_t i = 0; i < m.values.size(); ++i)
      if (m.values[i] != 0.0) out << i << ' ' << text::format_double(m.values[i]) << "\n";
  } else {
    out << "values dense\n";
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = 0; c < m.num_features; ++c) {
        if (c) out << ' ';
        out << text::format_double(m.at(r, c));
      }
      out << "\n";
    }
  }
  return out.str();
}

inline ExplanationMask mask_from_text(const std::string& content, const std::string& origin = "<mask>") {
  std::vector<std::string_view> lines;
  for (auto l : text::split(content, '\n')) lines.push_back(l);
  while (!lines.empty() && text::trim(lines.back()).empty()) lines.pop_back();
  std::size_t ln = 0;
  auto fail = [&](const std::string& what) -> ValidationError { return ValidationError(origin, ln + 1, what); };
  auto next = [&](std::string_view key) {
    if (ln >= lines.size()) throw fail("unexpected end of file, expected '" + std::string(key) + "'");
    auto line = lines[ln];
    if (line.substr(0, key.size()) != key || (line.size() > key.size() && line[key.size()] != ' '))
      throw fail("expected '" + std::string(key) + "'");
    auto rest = line.size() > key.size() ? line.substr(key.size() + 1) : std::string_view{};
    return rest;
  };
  auto ids = [&](std::string_view rest) {
    std::vector<NodeId> out;
    for (auto tok : text::split_ws(rest)) {
      auto v = text::parse_int<std::uint64_t>(tok);
      if (!v) throw fail("bad node id '" + std::string(tok) + "'");
      out.push_back(static_cast<NodeId>(*v));
    }
    return out;
  };
  ExplanationMask m;
  if (text::trim(next("gnnbench-mask")) != "1") throw fail("unsupported mask version");
  ++ln;
  m.explainer = std::string(text::trim(next("explainer")));
  ++ln;
  auto t = text::parse_int<std::uint64_t>(next("target"));
  if (!t) throw fail("bad target");
  m.target = static_cast<NodeId>(*t);
  ++ln;
  auto s = text::parse_int<std::uint64_t>(next("seed"));
  if (!s) throw fail("bad seed");
  m.seed = *s;
  ++ln;
  try {
    m.config = nlohmann::json::parse(next("config"));
  } catch (const nlohmann::json::parse_error&) {
    throw fail("config is not valid JSON");
  }
  ++ln;
  auto f = text::parse_int<std::uint64_t>(next("num_features"));
  if (!f) throw fail("bad num_features");
  m.num_features = static_cast<std::size_t>(*f);
  ++ln;
  m.node_support = ids(next("node_support"));
  if (!std::is_sorted(m.node_support.begin(), m.node_support.end())) throw fail("node_support must be sorted");
  ++ln;
  m.subgraph_nodes = ids(next("subgraph_nodes"));
  ++ln;
  const auto kind = text::split_ws(next("values"));
  const std::size_t total = m.node_support.size() * m.num_features;
  m.values.assign(total, 0.0);
  ++ln;
  if (!kind.empty() && kind[0] == "dense") {
    for (std::size_t r = 0; r < m.node_support.size(); ++r, ++ln) {
      if (ln >= lines.size()) throw fail("missing mask row");
      auto toks = text::split_ws(lines[ln]);
      if (toks.size() != m.num_features) throw fail("mask row has " + std::to_string(toks.size()) + " values");
      for (std::size_t c = 0; c < toks.size(); ++c) {
        auto v = text::parse_double(toks[c]);
        if (!v) throw fail("bad mask value");
        m.values[r * m.num_features + c] = *v;
      }
    }
  } else if (kind.size() == 2 && kind[0] == "sparse") {
    auto count = text::parse_int<std::uint64_t>(kind[1]);
    if (!count) throw fail("bad sparse count");
    for (std::uint64_t k = 0; k < *count; ++k, ++ln) {
      if (ln >= lines.size()) throw fail("missing sparse entry");
      auto toks = text::split_ws(lines[ln]);
      auto i = toks.size() == 2 ? text::parse_int<std::uint64_t>(toks[0]) : std::nullopt;
      auto v = toks.size() == 2 ? text::parse_double(toks[1]) : std::nullopt;
      if (!i || !v || *i >= total) throw fail("bad sparse entry");
      m.values[*i] = *v;
    }
  } else {
    throw fail("values must be 'dense' or 'sparse <count>'");
  }
  if (ln != lines.size()) throw fail("trailing content");
  return m;
}

inline void save_mask(const ExplanationMask& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write mask file " + path.string());
  out << mask_to_text(m);
  if (!out) throw Error("failed writing mask file " + path.string());
}

inline ExplanationMask load_mask(const std::filesystem::path& path) {
  auto content = text::read_file(path.string());
  if (!content) throw IngestionError(path.string(), "cannot open mask file");
  return mask_from_text(*content, path.string());
}

// ---------------------------------------------------------------------------
// GNNExplainer

struct GNNExplainerConfig {
  std::size_t epochs = 100;
  double lr = 0.01;
  double edge_size = 0.005;  // carried for completeness; there is no edge mask
  double node_feat_size = 1.0;
  double edge_ent = 1.0;  // likewise inert
  double node_feat_ent = 0.1;
  double eps = 1e-15;
  double init_std = 0.1;

  nlohmann::json to_json() const {
    return {{"epochs", epochs},       {"lr", lr},
            {"node_mask_type", "attributes"}, {"edge_mask_type", "none"},
            {"edge_size", edge_size}, {"node_feat_size", node_feat_size},
            {"node_feat_reduction", "mean"}, {"edge_ent", edge_ent},
            {"node_feat_ent", node_feat_ent}, {"EPS", eps},
            {"init_std", init_std}};
  }
};

// The target's L-hop neighborhood (the mask support) embedded in the graph
// induced by its (L+1)-hop neighborhood. The extra ring carries no signal to
// the target but keeps the degree of every support node exact, which the
// normalized aggregations depend on.
struct ReceptiveField {
  Subgraph sub;
  NodeId local_target;
  std::vector<NodeId> support;            // original ids, ascending
  std::vector<std::size_t> support_rows;  // their local ids in `sub`
};

inline ReceptiveField receptive_field(const Graph& g, NodeId target, std::size_t hops) {
  if (target >= g.num_nodes()) throw ParameterError("explain: target " + std::to_string(target) + " not in graph");
  Subgraph sub = induced_subgraph(g, k_hop_nodes(g, target, hops + 1));
  const NodeId t = *sub.local_id(target);
  std::vector<NodeId> support = k_hop_nodes(g, target, hops);
  std::vector<std::size_t> rows;
  for (NodeId u : support) rows.push_back(*sub.local_id(u));
  return {std::move(sub), t, std::move(support), std::move(rows)};
}

inline int predicted_class(const TrainedModel& m, const Graph& g, NodeId node) {
  const auto lp = predict(m, g);
  return argmax_rows(lp)[node];
}

// Mask entries whose gradient at the first iteration is zero cannot affect
// the prediction; they are excluded from the regularizers and reported as 0.
inline ExplanationMask gnnexplainer_explain(const TrainedModel& model, const Graph& g, NodeId target,
                                            const GNNExplainerConfig& cfg, std::uint64_t seed) {
  if (cfg.epochs == 0) throw ParameterError("gnnexplainer: epochs must be at least 1");
  const ReceptiveField rf = receptive_field(g, target, model.num_layers());
  const Graph& sg = rf.sub.graph;
  const MessageGraph mg(sg);
  const ad::Tensor x = feature_tensor(sg);
  const std::size_t t = rf.local_target;
  const int cls = argmax_rows(model.model.forward(x, mg).log_probs)[t];
  const std::vector<int> label(sg.num_nodes(), cls);
  const std::vector<std::size_t> rows{t};

  Rng rng = make_rng(derive_seed(seed, "gnnexplainer-init"));
  std::vector<double> init(x.size());
  for (double& v : init) v = cfg.init_std * standard_normal(rng);
  std::vector<ad::Tensor> params{ad::Tensor::parameter(x.rows(), x.cols(), std::move(init))};
  ad::AdamState adam{{cfg.lr, 0.9, 0.999, 1e-8}, 0, {}, {}};
  std::shared_ptr<const std::vector<std::size_t>> hard;

  for (std::size_t it = 0; it < cfg.epochs; ++it) {
    const ad::Tensor s = ad::sigmoid(params[0]);
    const ad::Tensor out = model.model.forward(ad::mul(x, s), mg).log_probs;
    ad::Tensor loss = ad::nll_loss(out, label, rows);
    if (hard && !hard->empty()) {
      const ad::Tensor active = ad::gather_entries(s, hard);
      loss = ad::add(loss, ad::scale(ad::mean(active), cfg.node_feat_size));
      loss = ad::add(loss, ad::scale(ad::bernoulli_entropy(active, cfg.eps), cfg.node_feat_ent));
    }
    if (!std::isfinite(loss.item())) throw TrainingError(it, "gnnexplainer: non-finite loss");
    const ad::Gradients grads = ad::backward(loss);
    if (!hard) {
      const std::vector<double> g0 = grads.of(params[0]);
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < g0.size(); ++i)
        if (g0[i] != 0.0) idx.push_back(i);
      hard = std::make_shared<const std::vector<std::size_t>>(std::move(idx));
    }
    ad::adam_step(params, grads, adam);
  }

  ExplanationMask m;
  m.explainer = "gnnexplainer";
  m.target = target;
  m.seed = seed;
  m.config = cfg.to_json();
  m.num_features = g.num_features();
  m.node_support = rf.support;
  std::vector<double> full(x.size(), 0.0);
  const auto& raw = params[0].data();
  for (std::size_t i : *hard) full[i] = 1.0 / (1.0 + std::exp(-raw[i]));
  const std::size_t f = sg.num_features();
  for (std::size_t r : rf.support_rows)
    m.values.insert(m.values.end(), full.begin() + static_cast<std::ptrdiff_t>(r * f),
                    full.begin() + static_cast<std::ptrdiff_t>((r + 1) * f));
  return m;
}

// ---------------------------------------------------------------------------
// Shapley values of a coalition

// Sorted node set; value functions receive the set of included players
// together with every non-player node.
using Coalition = std::vector<NodeId>;

inline Coalition set_union(const Coalition& a, const Coalition& b) {
  Coalition out;
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

enum class ShapleyMode { monte_carlo, exhaustive };

// Shapley value of `coalition`, acting as one player, in the game whose other
// players are `others`. `value(S)` is called with sorted node sets.
// Monte Carlo draws `samples` uniform orderings of the players and averages
// the marginal gain of the coalition over the players preceding it.
// Exhaustive mode averages the same quantity over every ordering.
template <class ValueFn>
double shapley_value(const Coalition& coalition, const Coalition& others, ValueFn&& value, ShapleyMode mode,
                     std::size_t samples, Rng& rng) {
  if (coalition.empty()) return 0.0;
  auto marginal = [&](Coalition before) {
    std::sort(before.begin(), before.end());
    return value(set_union(before, coalition)) - value(before);
  };
  if (mode == ShapleyMode::monte_carlo) {
    if (samples == 0) throw ParameterError("shapley: sample count must be positive");
    double total = 0;
    std::vector<std::size_t> order(others.size() + 1);
    for (std::size_t s = 0; s < samples; ++s) {
      std::iota(order.begin(), order.end(), 0);
      shuffle(order.begin(), order.end(), rng);
      Coalition before;
      for (std::size_t k : order) {
        if (k == others.size()) break;
        before.push_back(others[k]);
      }
      total += marginal(std::move(before));
    }
    return total / static_cast<double>(samples);
  }
  if (others.size() > 9) throw ParameterError("shapley: exhaustive enumeration limited to 10 players");
  std::vector<std::size_t> order(others.size() + 1);
  std::iota(order.begin(), order.end(), 0);
  double total = 0;
  std::size_t count = 0;
  do {
    Coalition before;
    for (std::size_t k : order) {
      if (k == others.size()) break;
      before.push_back(others[k]);
    }
    total += marginal(std::move(before));
    ++count;
  } while (std::next_permutation(order.begin(), order.end()));
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// SubgraphX

struct SubgraphXConfig {
  std::size_t rollout = 20;
  std::size_t min_atoms = 5;
  double c_puct = 10.0;
  std::size_t expand_atoms = 14;
  std::size_t local_radius = 4;
  std::size_t sample_num = 100;
  std::string reward_method = "mc_l_shapley";
  bool high2low = false;
  std::string subgraph_building = "zero_filling";
  std::size_t max_nodes = 5;

  nlohmann::json to_json() const {
    return {{"rollout", rollout},
            {"min_atoms", min_atoms},
            {"c_puct", c_puct},
            {"expand_atoms", expand_atoms},
            {"local_radius", local_radius},
            {"sample_num", sample_num},
            {"reward_method", reward_method},
            {"high2low", high2low},
            {"subgraph_building", subgraph_building},
            {"max_nodes", max_nodes}};
  }
};

// Zero-filling value oracle on a fixed graph: probability of `cls` at
// `target` when the features of every node outside the kept set are zeroed.
// Results are memoized per kept set.
class OcclusionValue {
 public:
  using ProbFn = std::function<double(const std::vector<double>& features)>;

  OcclusionValue(const Graph& g, Coalition always_kept, ProbFn prob)
      : g_(g), always_(std::move(always_kept)), prob_(std::move(prob)) {}

  double operator()(const Coalition& kept) {
    Coalition all = set_union(kept, always_);
    std::string key(g_.num_nodes(), '0');
    for (NodeId u : all) key[u] = '1';
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    std::vector<double> x(g_.num_nodes() * g_.num_features(), 0.0);
    for (NodeId u : all) {
      auto row = g_.feature_row(u);
      std::copy(row.begin(), row.end(), x.begin() + static_cast<std::ptrdiff_t>(u * g_.num_features()));
    }
    const double v = prob_(x);
    cache_.emplace(std::move(key), v);
    return v;
  }

  std::size_t evaluations() const { return cache_.size(); }

 private:
  const Graph& g_;
  Coalition always_;
  ProbFn prob_;
  std::unordered_map<std::string, double> cache_;
};

struct SubgraphSearchResult {
  Coalition best;  // local ids
  double best_score = 0.0;
  std::map<Coalition, double> scored;  // every scored state
};

// MCTS over connected node subsets of `g` containing `target`. `prob` maps a
// full feature matrix of `g` to the explained-class probability at `target`.
inline SubgraphSearchResult subgraphx_search(const Graph& g, NodeId target, const OcclusionValue::ProbFn& prob,
                                             const SubgraphXConfig& cfg, std::uint64_t seed) {
  if (cfg.max_nodes == 0) throw ParameterError("subgraphx: max_nodes must be positive");
  const std::size_t n = g.num_nodes();
  Coalition all(n);
  std::iota(all.begin(), all.end(), NodeId{0});
  SubgraphSearchResult result;
  if (n < cfg.min_atoms) {
    result.best = all;
    result.scored[all] = 0.0;
    return result;
  }

  // Players lie within local_radius of the target; farther nodes always keep their features.
  const Coalition local = k_hop_nodes(g, target, cfg.local_radius);
  Coalition outside;
  std::set_difference(all.begin(), all.end(), local.begin(), local.end(), std::back_inserter(outside));
  OcclusionValue value(g, outside, prob);
  Rng rng = make_rng(derive_seed(seed, "subgraphx"));

  auto score = [&](const Coalition& c) {
    auto it = result.scored.find(c);
    if (it != result.scored.end()) return it->second;
    Coalition others;
    std::set_difference(local.begin(), local.end(), c.begin(), c.end(), std::back_inserter(others));
    const double s = shapley_value(c, others, value, ShapleyMode::monte_carlo, cfg.sample_num, rng);
    result.scored.emplace(c, s);
    return s;
  };

  struct TreeNode {
    Coalition nodes;
    double prior = 0;
    double total = 0;
    double visits = 0;
    std::vector<std::size_t> children;
    bool expanded = false;
  };
  std::vector<TreeNode> tree;
  std::map<Coalition, std::size_t> index;
  auto node_for = [&](const Coalition& c) {
    auto it = index.find(c);
    if (it != index.end()) return it->second;
    tree.push_back({c, score(c), 0, 0, {}, false});
    index.emplace(c, tree.size() - 1);
    return tree.size() - 1;
  };

  auto expand = [&](std::size_t id) {
    const Coalition cur = tree[id].nodes;
    std::vector<std::pair<std::size_t, NodeId>> by_degree;
    for (NodeId u : cur) {
      std::size_t d = 0;
      for (NodeId v : g.neighbors(u)) d += std::binary_search(cur.begin(), cur.end(), v);
      by_degree.emplace_back(d, u);
    }
    if (cfg.high2low)
      std::sort(by_degree.begin(), by_degree.end(),
                [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    else
      std::sort(by_degree.begin(), by_degree.end());
    std::vector<std::size_t> kids;
    for (std::size_t k = 0; k < by_degree.size() && kids.size() < cfg.expand_atoms; ++k) {
      const NodeId drop = by_degree[k].second;
      if (drop == target) continue;
      Coalition rest;
      for (NodeId u : cur)
        if (u != drop) rest.push_back(u);
      Coalition comp = component_within(g, rest, target);
      const std::size_t child = node_for(comp);
      if (std::find(kids.begin(), kids.end(), child) == kids.end()) kids.push_back(child);
    }
    tree[id].children = std::move(kids);
    tree[id].expanded = true;
  };

  // Returns the best score met on the way down, which is backed up the path.
  std::function<double(std::size_t)> rollout = [&](std::size_t id) -> double {
    if (tree[id].nodes.size() <= cfg.min_atoms) return tree[id].prior;
    if (!tree[id].expanded) expand(id);
    if (tree[id].children.empty()) return tree[id].prior;
    double visits = 0;
    for (std::size_t c : tree[id].children) visits += tree[c].visits;
    std::size_t pick = tree[id].children.front();
    double best = -INFINITY;
    for (std::size_t c : tree[id].children) {
      const TreeNode& ch = tree[c];
      const double q = ch.visits > 0 ? ch.total / ch.visits : 0.0;
      const double u = cfg.c_puct * ch.prior * std::sqrt(visits) / (1.0 + ch.visits);
      if (q + u > best) {
        best = q + u;
        pick = c;
      }
    }
    // The recursive call may grow `tree`, so read the child's prior only afterwards.
    const double below = rollout(pick);
    const double v = std::max(below, tree[pick].prior);
    tree[pick].total += v;
    tree[pick].visits += 1;
    return v;
  };

  const std::size_t root = node_for(component_within(g, all, target));
  for (std::size_t r = 0; r < cfg.rollout; ++r) rollout(root);

  // Highest score among states small enough; ties prefer fewer nodes, then lower ids.
  bool found = false;
  for (const auto& [c, s] : result.scored) {
    if (c.size() > cfg.max_nodes) continue;
    if (!found || s > result.best_score || (s == result.best_score && c.size() < result.best.size())) {
      result.best = c;
      result.best_score = s;
      found = true;
    }
  }
  if (!found) {
    // No rollout reached max_nodes: keep the target and its nearest nodes.
    Coalition near = k_hop_nodes(g, target, 1);
    Coalition pick{target};
    for (NodeId u : near)
      if (u != target && pick.size() < cfg.max_nodes) pick.push_back(u);
    std::sort(pick.begin(), pick.end());
    result.best = pick;
    result.best_score = score(pick);
  }
  return result;
}

inline ExplanationMask subgraphx_explain(const TrainedModel& model, const Graph& g, NodeId target,
                                         const SubgraphXConfig& cfg, std::uint64_t seed) {
  if (cfg.reward_method != "mc_l_shapley") throw ConfigError("subgraphx: only mc_l_shapley rewards are supported");
  if (cfg.subgraph_building != "zero_filling") throw ConfigError("subgraphx: only zero_filling is supported");
  const ReceptiveField rf = receptive_field(g, target, model.num_layers());
  const Graph& cg = rf.sub.graph;
  const MessageGraph mg(cg);
  const std::size_t f = cg.num_features();
  const int cls = argmax_rows(model.model.forward(feature_tensor(cg), mg).log_probs)[rf.local_target];
  // The search runs on the support; its feature matrices are written into the
  // support rows of the computation graph, whose ring rows stay as they are.
  const Subgraph field = induced_subgraph(g, rf.support);
  const Graph& sg = field.graph;
  const std::size_t t = *field.local_id(target);
  auto prob = [&](const std::vector<double>& x) {
    std::vector<double> full = cg.features();
    for (std::size_t i = 0; i < rf.support_rows.size(); ++i)
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(i * f), f,
                  full.begin() + static_cast<std::ptrdiff_t>(rf.support_rows[i] * f));
    const ad::Tensor lp = model.model.forward(ad::Tensor(cg.num_nodes(), f, std::move(full)), mg).log_probs;
    return std::exp(lp.at(rf.local_target, static_cast<std::size_t>(cls)));
  };
  const SubgraphSearchResult res = subgraphx_search(sg, t, prob, cfg, seed);

  ExplanationMask m;
  m.explainer = "subgraphx";
  m.target = target;
  m.seed = seed;
  m.config = cfg.to_json();
  m.num_features = g.num_features();
  m.node_support = field.nodes;
  m.values.assign(sg.num_nodes() * sg.num_features(), 0.0);
  for (NodeId local : res.best) {
    m.subgraph_nodes.push_back(field.nodes[local]);
    std::fill_n(m.values.begin() + static_cast<std::ptrdiff_t>(local * sg.num_features()), sg.num_features(), 1.0);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Dispatch

enum class ExplainerId { gnnexplainer, subgraphx };

inline std::string to_string(ExplainerId e) { return e == ExplainerId::gnnexplainer ? "gnnexplainer" : "subgraphx"; }

inline ExplainerId parse_explainer(const std::string& s) {
  if (s == "gnnexplainer") return ExplainerId::gnnexplainer;
  if (s == "subgraphx") return ExplainerId::subgraphx;
  throw ConfigError("unknown explainer '" + s + "'");
}

struct ExplainerConfig {
  ExplainerId id = ExplainerId::gnnexplainer;
  GNNExplainerConfig gnnexplainer{};
  SubgraphXConfig subgraphx{};
};

inline ExplanationMask explain(const TrainedModel& model, const Graph& g, NodeId target, const ExplainerConfig& cfg,
                               std::uint64_t seed) {
  return cfg.id == ExplainerId::gnnexplainer ? gnnexplainer_explain(model, g, target, cfg.gnnexplainer, seed)
                                             : subgraphx_explain(model, g, target, cfg.subgraphx, seed);
}

}  // namespace gnnbench
