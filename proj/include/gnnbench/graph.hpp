#pragma once

// Graph data model: node features, undirected edge set, labels. Also the
// bundle file format, the synthetic generator, train/test splitting and the
// perturbation operator used when measuring explanation stability.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "seeding.hpp"
#include "text.hpp"

namespace gnnbench {

using NodeId = std::size_t;

struct Edge {
  NodeId u;
  NodeId v;  // u < v after canonicalization
  friend bool operator==(const Edge&, const Edge&) = default;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

class Graph {
 public:
  Graph() = default;

  // Edges may arrive in either orientation and with duplicates; they are
  // stored once as (min, max). Self-loops are rejected.
  Graph(std::size_t num_nodes, std::size_t num_features, std::vector<double> features,
        std::vector<Edge> edges, std::vector<int> labels, std::size_t num_classes)
      : num_nodes_(num_nodes),
        num_features_(num_features),
        num_classes_(num_classes),
        features_(std::move(features)),
        labels_(std::move(labels)) {
    if (features_.size() != num_nodes_ * num_features_)
      throw ShapeError("graph: feature matrix has " + std::to_string(features_.size()) +
                       " values, expected " + std::to_string(num_nodes_) + "x" +
                       std::to_string(num_features_));
    if (labels_.size() != num_nodes_)
      throw ShapeError("graph: " + std::to_string(labels_.size()) + " labels for " +
                       std::to_string(num_nodes_) + " nodes");
    for (int y : labels_)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes_)
        throw ParameterError("graph: label " + std::to_string(y) + " outside [0, " +
                             std::to_string(num_classes_) + ")");
    for (auto& e : edges) {
      if (e.u >= num_nodes_ || e.v >= num_nodes_)
        throw ParameterError("graph: edge (" + std::to_string(e.u) + ", " + std::to_string(e.v) +
                             ") references a node >= " + std::to_string(num_nodes_));
      if (e.u == e.v) throw ParameterError("graph: self-loop on node " + std::to_string(e.u));
      if (e.u > e.v) std::swap(e.u, e.v);
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    edges_ = std::move(edges);
    build_adjacency();
  }

  std::size_t num_nodes() const noexcept { return num_nodes_; }
  std::size_t num_features() const noexcept { return num_features_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t num_edges() const noexcept { return edges_.size(); }

  const std::vector<Edge>& edges() const noexcept { return edges_; }
  const std::vector<double>& features() const noexcept { return features_; }
  const std::vector<int>& labels() const noexcept { return labels_; }

  std::span<const double> feature_row(NodeId u) const {
    return {features_.data() + u * num_features_, num_features_};
  }
  double feature(NodeId u, std::size_t j) const { return features_[u * num_features_ + j]; }

  // Sorted neighbor ids.
  std::span<const NodeId> neighbors(NodeId u) const {
    return {adjacency_.data() + offsets_[u], offsets_[u + 1] - offsets_[u]};
  }
  std::size_t degree(NodeId u) const { return offsets_[u + 1] - offsets_[u]; }

  bool has_edge(NodeId u, NodeId v) const {
    auto nb = neighbors(u);
    return std::binary_search(nb.begin(), nb.end(), v);
  }

  Graph with_features(std::vector<double> features) const {
    return Graph(num_nodes_, num_features_, std::move(features), edges_, labels_, num_classes_);
  }
  Graph with_edges(std::vector<Edge> edges) const {
    return Graph(num_nodes_, num_features_, features_, std::move(edges), labels_, num_classes_);
  }

  friend bool operator==(const Graph& a, const Graph& b) {
    return a.num_nodes_ == b.num_nodes_ && a.num_features_ == b.num_features_ &&
           a.num_classes_ == b.num_classes_ && a.edges_ == b.edges_ && a.labels_ == b.labels_ &&
           a.features_ == b.features_;
  }

 private:
  void build_adjacency() {
    offsets_.assign(num_nodes_ + 1, 0);
    for (const auto& e : edges_) {
      ++offsets_[e.u + 1];
      ++offsets_[e.v + 1];
    }
    for (std::size_t i = 0; i < num_nodes_; ++i) offsets_[i + 1] += offsets_[i];
    adjacency_.assign(offsets_.back(), 0);
    std::vector<std::size_t> fill(offsets_.begin(), offsets_.end() - 1);
    for (const auto& e : edges_) {
      adjacency_[fill[e.u]++] = e.v;
      adjacency_[fill[e.v]++] = e.u;
    }
    for (std::size_t i = 0; i < num_nodes_; ++i)
      std::sort(adjacency_.begin() + static_cast<std::ptrdiff_t>(offsets_[i]),
                adjacency_.begin() + static_cast<std::ptrdiff_t>(offsets_[i + 1]));
  }

  std::size_t num_nodes_ = 0;
  std::size_t num_features_ = 0;
  std::size_t num_classes_ = 0;
  std::vector<double> features_;
  std::vector<Edge> edges_;
  std::vector<int> labels_;
  std::vector<std::size_t> offsets_{0};
  std::vector<NodeId> adjacency_;
};

// ---------------------------------------------------------------------------
// Neighborhoods and induced subgraphs

// Nodes within `hops` of `center` (including it), sorted ascending.
inline std::vector<NodeId> k_hop_nodes(const Graph& g, NodeId center, std::size_t hops) {
  std::vector<std::size_t> dist(g.num_nodes(), static_cast<std::size_t>(-1));
  std::vector<NodeId> out{center};
  std::queue<NodeId> q;
  dist[center] = 0;
  q.push(center);
  while (!q.empty()) {
    const NodeId u = q.front();
    q.pop();
    if (dist[u] == hops) continue;
    for (NodeId v : g.neighbors(u)) {
      if (dist[v] != static_cast<std::size_t>(-1)) continue;
      dist[v] = dist[u] + 1;
      out.push_back(v);
      q.push(v);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct Subgraph {
  Graph graph;
  std::vector<NodeId> nodes;  // local id -> original id (sorted)

  std::optional<NodeId> local_id(NodeId original) const {
    auto it = std::lower_bound(nodes.begin(), nodes.end(), original);
    if (it == nodes.end() || *it != original) return std::nullopt;
    return static_cast<NodeId>(it - nodes.begin());
  }
};

inline Subgraph induced_subgraph(const Graph& g, std::vector<NodeId> nodes) {
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  const std::size_t f = g.num_features();
  std::vector<double> feats(nodes.size() * f);
  std::vector<int> labels(nodes.size());
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    auto row = g.feature_row(nodes[i]);
    std::copy(row.begin(), row.end(), feats.begin() + static_cast<std::ptrdiff_t>(i * f));
    labels[i] = g.labels()[nodes[i]];
    for (NodeId v : g.neighbors(nodes[i])) {
      if (v <= nodes[i]) continue;
      auto it = std::lower_bound(nodes.begin(), nodes.end(), v);
      if (it != nodes.end() && *it == v) edges.push_back({i, static_cast<NodeId>(it - nodes.begin())});
    }
  }
  Graph sub(nodes.size(), f, std::move(feats), std::move(edges), std::move(labels), g.num_classes());
  return {std::move(sub), std::move(nodes)};
}

// Connected component of `start` inside the node subset `allowed` (sorted).
inline std::vector<NodeId> component_within(const Graph& g, const std::vector<NodeId>& allowed,
                                            NodeId start) {
  std::vector<NodeId> out;
  if (!std::binary_search(allowed.begin(), allowed.end(), start)) return out;
  std::vector<NodeId> stack{start};
  std::vector<NodeId> seen{start};
  while (!stack.empty()) {
    NodeId u = stack.back();
    stack.pop_back();
    out.push_back(u);
    for (NodeId v : g.neighbors(u)) {
      if (!std::binary_search(allowed.begin(), allowed.end(), v)) continue;
      if (std::find(seen.begin(), seen.end(), v) != seen.end()) continue;
      seen.push_back(v);
      stack.push_back(v);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Bundle format: edges.tsv, features.csv, labels.csv, optional meta.json.

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IngestionError(p.string(), "cannot open file");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace detail

inline Graph load_graph_bundle(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const std::string files[] = {"edges.tsv", "features.csv", "labels.csv"};
  for (const auto& f : files)
    if (!fs::exists(dir / f)) throw IngestionError((dir / f).string(), "missing bundle file " + f);

  const auto feat_path = (dir / "features.csv").string();
  std::vector<double> features;
  std::size_t num_features = 0;
  std::size_t num_nodes = 0;
  {
    const auto lines = detail::read_lines(dir / "features.csv");
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (text::trim(lines[i]).empty()) continue;
      auto cells = text::split(lines[i], ',');
      if (num_nodes == 0) num_features = cells.size();
      if (cells.size() != num_features)
        throw ValidationError(feat_path, i + 1,
                              "ragged row with " + std::to_string(cells.size()) +
                                  " values, expected " + std::to_string(num_features));
      for (auto c : cells) {
        auto v = text::parse_double(c);
        if (!v) throw ValidationError(feat_path, i + 1, "bad number '" + std::string(c) + "'");
        features.push_back(*v);
      }
      ++num_nodes;
    }
  }

  const auto label_path = (dir / "labels.csv").string();
  std::vector<int> labels;
  {
    const auto lines = detail::read_lines(dir / "labels.csv");
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (text::trim(lines[i]).empty()) continue;
      auto v = text::parse_int<int>(lines[i]);
      if (!v || *v < 0) throw ValidationError(label_path, i + 1, "bad label '" + lines[i] + "'");
      labels.push_back(*v);
    }
  }
  if (labels.size() != num_nodes)
    throw ValidationError(label_path, labels.size(),
                          std::to_string(labels.size()) + " labels for " + std::to_string(num_nodes) +
                              " feature rows");
  std::size_t num_classes = 0;
  for (int y : labels) num_classes = std::max(num_classes, static_cast<std::size_t>(y) + 1);

  const auto edge_path = (dir / "edges.tsv").string();
  std::vector<Edge> edges;
  {
    const auto lines = detail::read_lines(dir / "edges.tsv");
    for (std::size_t i = 0; i < lines.size(); ++i) {
      auto tok = text::split_ws(lines[i]);
      if (tok.empty()) continue;
      if (tok.size() != 2) throw ValidationError(edge_path, i + 1, "expected two node ids");
      auto a = text::parse_int<std::int64_t>(tok[0]);
      auto b = text::parse_int<std::int64_t>(tok[1]);
      if (!a || !b) throw ValidationError(edge_path, i + 1, "bad node id");
      if (*a < 0 || *b < 0 || static_cast<std::size_t>(*a) >= num_nodes ||
          static_cast<std::size_t>(*b) >= num_nodes)
        throw ValidationError(edge_path, i + 1,
                              "node id out of range [0, " + std::to_string(num_nodes) + ")");
      if (*a == *b) throw ValidationError(edge_path, i + 1, "self-loop");
      edges.push_back({static_cast<NodeId>(*a), static_cast<NodeId>(*b)});
    }
  }

  if (fs::exists(dir / "meta.json")) {
    const auto meta_path = (dir / "meta.json").string();
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(*text::read_file(meta_path));
    } catch (const nlohmann::json::exception& e) {
      throw IngestionError(meta_path, e.what());
    }
    auto check = [&](const char* key, std::size_t actual) {
      if (meta.contains(key) && meta[key].get<std::size_t>() != actual)
        throw ValidationError(meta_path, 1,
                              std::string(key) + " is " + std::to_string(meta[key].get<std::size_t>()) +
                                  " but the bundle has " + std::to_string(actual));
    };
    check("num_nodes", num_nodes);
    check("num_features", num_features);
    if (meta.contains("num_classes")) {
      const auto declared = meta["num_classes"].get<std::size_t>();
      if (declared < num_classes)
        throw ValidationError(meta_path, 1, "num_classes smaller than the largest label");
      num_classes = declared;
    }
  }
  return Graph(num_nodes, num_features, std::move(features), std::move(edges), std::move(labels),
               num_classes);
}

inline void save_graph_bundle(const Graph& g, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError((dir / name).string(), "cannot write file");
    return out;
  };
  {
    auto out = open("edges.tsv");
    for (const auto& e : g.edges()) out << e.u << '\t' << e.v << '\n';
  }
  {
    auto out = open("features.csv");
    for (NodeId u = 0; u < g.num_nodes(); ++u) {
      auto row = g.feature_row(u);
      for (std::size_t j = 0; j < row.size(); ++j) {
        if (j) out << ',';
        out << text::format_double(row[j]);
      }
      out << '\n';
    }
  }
  {
    auto out = open("labels.csv");
    for (int y : g.labels()) out << y << '\n';
  }
  {
    auto out = open("meta.json");
    nlohmann::json meta{{"num_nodes", g.num_nodes()},
                        {"num_features", g.num_features()},
                        {"num_classes", g.num_classes()}};
    out << meta.dump(2) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic stochastic-block-model graphs with planted binary features.

struct SyntheticSpec {
  std::size_t num_nodes = 60;
  std::size_t num_classes = 3;
  std::size_t feature_dim = 16;
  double homophily = 0.9;  // probability an edge joins two nodes of the same class
  std::uint64_t seed = 1;
  double average_degree = 4.0;
  // Each node switches on signature_bits features drawn from its class block,
  // each surviving with probability 1 - signature_noise, plus background_bits
  // uniformly random features.
  std::size_t signature_bits = 0;  // 0: the whole class block
  double signature_noise = 0.1;
  std::size_t background_bits = 0;
  std::vector<double> class_weights;  // empty: uniform class sizes
};

inline Graph generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_nodes == 0 || spec.num_classes == 0 || spec.feature_dim == 0)
    throw ParameterError("generate_synthetic: num_nodes, num_classes and feature_dim must be positive");
  if (spec.num_nodes < spec.num_classes)
    throw ParameterError("generate_synthetic: num_nodes < num_classes");
  if (spec.feature_dim < spec.num_classes)
    throw ParameterError("generate_synthetic: feature_dim < num_classes");
  if (spec.homophily < 0.0 || spec.homophily > 1.0)
    throw ParameterError("generate_synthetic: homophily outside [0, 1]");
  if (!spec.class_weights.empty() && spec.class_weights.size() != spec.num_classes)
    throw ParameterError("generate_synthetic: class_weights size differs from num_classes");

  Rng rng = make_rng(derive_seed(spec.seed, "synthetic"));
  const std::size_t n = spec.num_nodes;
  const std::size_t c = spec.num_classes;

  // Class sizes: every class gets one node, the rest by weight (largest remainder).
  std::vector<double> w = spec.class_weights.empty() ? std::vector<double>(c, 1.0) : spec.class_weights;
  double wsum = 0;
  for (double x : w) wsum += x;
  std::vector<std::size_t> sizes(c, 1);
  std::size_t assigned = c;
  std::vector<std::pair<double, std::size_t>> rema;
  for (std::size_t k = 0; k < c; ++k) {
    const double share = w[k] / wsum * static_cast<double>(n - c);
    const auto whole = static_cast<std::size_t>(std::floor(share));
    sizes[k] += whole;
    assigned += whole;
    rema.push_back({share - static_cast<double>(whole), k});
  }
  std::sort(rema.begin(), rema.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++sizes[rema[i % c].second];

  std::vector<int> labels;
  labels.reserve(n);
  for (std::size_t k = 0; k < c; ++k) labels.insert(labels.end(), sizes[k], static_cast<int>(k));
  shuffle(labels.begin(), labels.end(), rng);

  std::vector<std::vector<NodeId>> members(c);
  for (NodeId u = 0; u < n; ++u) members[static_cast<std::size_t>(labels[u])].push_back(u);

  // Edges.
  const auto target_edges = static_cast<std::size_t>(std::llround(spec.average_degree * static_cast<double>(n) / 2.0));
  std::vector<Edge> edges;
  std::vector<std::vector<NodeId>> adj(n);
  std::size_t attempts = 0;
  const std::size_t max_attempts = 50 * target_edges + 1000;
  while (edges.size() < target_edges && attempts++ < max_attempts) {
    const NodeId u = uniform_index(rng, n);
    const auto cu = static_cast<std::size_t>(labels[u]);
    NodeId v;
    if (uniform01(rng) < spec.homophily || c == 1) {
      const auto& pool = members[cu];
      v = pool[uniform_index(rng, pool.size())];
    } else {
      auto other = uniform_index(rng, c - 1);
      if (other >= cu) ++other;
      const auto& pool = members[other];
      v = pool[uniform_index(rng, pool.size())];
    }
    if (u == v) continue;
    if (std::find(adj[u].begin(), adj[u].end(), v) != adj[u].end()) continue;
    adj[u].push_back(v);
    adj[v].push_back(u);
    edges.push_back({std::min(u, v), std::max(u, v)});
  }

  // Features: class k owns block [k*b, (k+1)*b).
  const std::size_t d = spec.feature_dim;
  const std::size_t block = d / c;
  std::vector<double> features(n * d, 0.0);
  for (NodeId u = 0; u < n; ++u) {
    const auto k = static_cast<std::size_t>(labels[u]);
    double* row = features.data() + u * d;
    if (spec.signature_bits == 0) {
      for (std::size_t j = k * block; j < (k + 1) * block; ++j)
        if (uniform01(rng) >= spec.signature_noise) row[j] = 1.0;
    } else {
      for (std::size_t s = 0; s < spec.signature_bits; ++s) {
        const std::size_t j = k * block + uniform_index(rng, block);
        if (uniform01(rng) >= spec.signature_noise) row[j] = 1.0;
      }
    }
    for (std::size_t s = 0; s < spec.background_bits; ++s) row[uniform_index(rng, d)] = 1.0;
  }
  return Graph(n, d, std::move(features), std::move(edges), std::move(labels), c);
}

// Desk-scale stand-in with the Planetoid Cora shape: 2708 nodes, 5278
// undirected edges, 1433 sparse binary features, 7 classes with Cora's class
// proportions.
inline SyntheticSpec cora_like_spec(std::uint64_t seed = 2708) {
  SyntheticSpec s;
  s.num_nodes = 2708;
  s.num_classes = 7;
  s.feature_dim = 1433;
  s.homophily = 0.81;
  s.seed = seed;
  s.average_degree = 2.0 * 5278.0 / 2708.0;
  s.signature_bits = 8;
  s.signature_noise = 0.0;
  s.background_bits = 10;
  s.class_weights = {351, 217, 418, 818, 426, 298, 180};
  return s;
}

// ---------------------------------------------------------------------------
// Train/test split

struct SplitMasks {
  std::vector<bool> train;
  std::vector<bool> test;

  std::vector<NodeId> train_nodes() const { return select(train); }
  std::vector<NodeId> test_nodes() const { return select(test); }

 private:
  static std::vector<NodeId> select(const std::vector<bool>& m) {
    std::vector<NodeId> out;
    for (NodeId i = 0; i < m.size(); ++i)
      if (m[i]) out.push_back(i);
    return out;
  }
};

inline SplitMasks split(const Graph& g, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ParameterError("split: train_fraction must lie in (0, 1)");
  const std::size_t n = g.num_nodes();
  std::vector<NodeId> order(n);
  for (NodeId i = 0; i < n; ++i) order[i] = i;
  Rng rng = make_rng(derive_seed(seed, "split"));
  shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 0.5));
  SplitMasks m{std::vector<bool>(n, false), std::vector<bool>(n, true)};
  for (std::size_t i = 0; i < n_train; ++i) {
    m.train[order[i]] = true;
    m.test[order[i]] = false;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Perturbation

struct PerturbationSpec {
  double feature_fraction = 0.05;       // per node, share of feature entries altered
  double node_removal_fraction = 0.05;  // share of nodes removed
  std::uint64_t seed = 0;
};

struct PerturbedGraph {
  Graph graph;
  std::vector<std::optional<NodeId>> remap;  // original id -> new id, nullopt if removed
};

inline PerturbedGraph perturb(const Graph& g, const PerturbationSpec& spec, NodeId protected_node) {
  if (protected_node >= g.num_nodes())
    throw ParameterError("perturb: protected node " + std::to_string(protected_node) + " not in graph");
  if (spec.feature_fraction < 0 || spec.feature_fraction > 1 || spec.node_removal_fraction < 0 ||
      spec.node_removal_fraction > 1)
    throw ParameterError("perturb: fractions must lie in [0, 1]");

  const std::size_t n = g.num_nodes();
  const std::size_t d = g.num_features();
  Rng rng = make_rng(derive_seed(spec.seed, "perturb"));

  std::vector<double> features = g.features();
  const auto per_node = static_cast<std::size_t>(std::floor(spec.feature_fraction * static_cast<double>(d)));
  if (per_node > 0) {
    std::vector<bool> binary(d, true);
    for (std::size_t j = 0; j < d; ++j)
      for (NodeId u = 0; u < n && binary[j]; ++u) {
        const double v = g.feature(u, j);
        binary[j] = (v == 0.0 || v == 1.0);
      }
    std::vector<std::size_t> cols(d);
    for (NodeId u = 0; u < n; ++u) {
      for (std::size_t j = 0; j < d; ++j) cols[j] = j;
      // Partial Fisher-Yates: first per_node entries are the chosen columns.
      for (std::size_t s = 0; s < per_node; ++s) {
        const auto pick = s + uniform_index(rng, d - s);
        std::swap(cols[s], cols[pick]);
        const std::size_t j = cols[s];
        double& x = features[u * d + j];
        if (binary[j]) {
          x = 1.0 - x;
        } else {
          x = g.feature(uniform_index(rng, n), j);
        }
      }
    }
  }

  const auto n_remove = static_cast<std::size_t>(std::floor(spec.node_removal_fraction * static_cast<double>(n)));
  std::vector<bool> removed(n, false);
  if (n_remove > 0) {
    std::vector<NodeId> candidates;
    candidates.reserve(n - 1);
    for (NodeId u = 0; u < n; ++u)
      if (u != protected_node) candidates.push_back(u);
    for (std::size_t s = 0; s < n_remove && s < candidates.size(); ++s) {
      const auto pick = s + uniform_index(rng, candidates.size() - s);
      std::swap(candidates[s], candidates[pick]);
      removed[candidates[s]] = true;
    }
  }

  PerturbedGraph out;
  out.remap.assign(n, std::nullopt);
  std::vector<NodeId> kept;
  for (NodeId u = 0; u < n; ++u)
    if (!removed[u]) {
      out.remap[u] = kept.size();
      kept.push_back(u);
    }
  std::vector<double> kept_features(kept.size() * d);
  std::vector<int> kept_labels(kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(kept[i] * d), d,
                kept_features.begin() + static_cast<std::ptrdiff_t>(i * d));
    kept_labels[i] = g.labels()[kept[i]];
  }
  std::vector<Edge> edges;
  for (const auto& e : g.edges())
    if (!removed[e.u] && !removed[e.v]) edges.push_back({*out.remap[e.u], *out.remap[e.v]});
  out.graph = Graph(kept.size(), d, std::move(kept_features), std::move(edges), std::move(kept_labels),
                    g.num_classes());
  return out;
}

// ---------------------------------------------------------------------------
// LINQS citation releases (cora.content / cora.cites): each content line is
// "<paper id> <binary attributes...> <class name>", each cites line is
// "<cited id> <citing id>". Nodes keep content order, class ids follow the
// sorted class names, and citations naming unknown papers or a paper itself
// are skipped.

struct LinqsImport {
  Graph graph;
  std::vector<std::string> paper_ids;
  std::vector<std::string> class_names;
  std::size_t skipped_citations = 0;
};

inline LinqsImport import_linqs(const std::filesystem::path& content, const std::filesystem::path& cites) {
  const auto content_lines = detail::read_lines(content);
  const auto cite_lines = detail::read_lines(cites);
  LinqsImport out;
  std::map<std::string, NodeId> index;
  std::vector<std::vector<double>> rows;
  std::vector<std::string> label_names;
  std::size_t width = 0;
  for (std::size_t i = 0; i < content_lines.size(); ++i) {
    const auto toks = text::split_ws(content_lines[i]);
    if (toks.empty()) continue;
    if (toks.size() < 3) throw ValidationError(content.string(), i + 1, "expected id, attributes and class");
    const std::size_t f = toks.size() - 2;
    if (width == 0) width = f;
    if (f != width)
      throw ValidationError(content.string(), i + 1,
                            "row has " + std::to_string(f) + " attributes, expected " + std::to_string(width));
    const std::string id(toks.front());
    if (index.count(id)) throw ValidationError(content.string(), i + 1, "duplicate paper id " + id);
    std::vector<double> row(f);
    for (std::size_t j = 0; j < f; ++j) {
      auto v = text::parse_double(toks[j + 1]);
      if (!v) throw ValidationError(content.string(), i + 1, "bad attribute value");
      row[j] = *v;
    }
    index.emplace(id, rows.size());
    out.paper_ids.push_back(id);
    rows.push_back(std::move(row));
    label_names.emplace_back(toks.back());
  }
  if (rows.empty()) throw IngestionError(content.string(), "no papers");
  out.class_names = label_names;
  std::sort(out.class_names.begin(), out.class_names.end());
  out.class_names.erase(std::unique(out.class_names.begin(), out.class_names.end()), out.class_names.end());
  std::vector<int> labels;
  for (const auto& name : label_names)
    labels.push_back(static_cast<int>(std::lower_bound(out.class_names.begin(), out.class_names.end(), name) -
                                      out.class_names.begin()));
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < cite_lines.size(); ++i) {
    const auto toks = text::split_ws(cite_lines[i]);
    if (toks.empty()) continue;
    if (toks.size() != 2) throw ValidationError(cites.string(), i + 1, "expected two paper ids");
    auto a = index.find(std::string(toks[0]));
    auto b = index.find(std::string(toks[1]));
    if (a == index.end() || b == index.end() || a->second == b->second) {
      ++out.skipped_citations;
      continue;
    }
    edges.push_back({a->second, b->second});
  }
  std::vector<double> features;
  features.reserve(rows.size() * width);
  for (const auto& r : rows) features.insert(features.end(), r.begin(), r.end());
  out.graph = Graph(rows.size(), width, std::move(features), std::move(edges), std::move(labels),
                    out.class_names.size());
  return out;
}

}  // namespace gnnbench
