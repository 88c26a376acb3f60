#pragma once

// Interpretability metrics over explanation masks: fidelity, sparsity,
// stability and consistency, plus mean / sample-std aggregation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "explainers.hpp"
#include "graph.hpp"
#include "models.hpp"

namespace gnnbench {

enum class FidelityMode { agreement, probability };

inline std::string to_string(FidelityMode m) { return m == FidelityMode::agreement ? "agreement" : "probability"; }

inline FidelityMode parse_fidelity_mode(const std::string& s) {
  if (s == "agreement") return FidelityMode::agreement;
  if (s == "probability") return FidelityMode::probability;
  throw ConfigError("unknown fidelity mode '" + s + "'");
}

// Both readings for one mask: whether the masked input keeps the prediction,
// and the absolute change of the originally predicted class probability.
struct FidelityScore {
  double agreement = 0;
  double probability_change = 0;
};

inline FidelityScore fidelity_score(const TrainedModel& model, const Graph& g, const ExplanationMask& mask) {
  if (mask.num_features != g.num_features())
    throw AlignmentError("fidelity: mask has " + std::to_string(mask.num_features) + " features, graph has " +
                         std::to_string(g.num_features()));
  for (NodeId u : mask.node_support)
    if (u >= g.num_nodes()) throw AlignmentError("fidelity: mask node " + std::to_string(u) + " not in graph");
  if (!mask.row_of(mask.target)) throw AlignmentError("fidelity: mask support does not contain its target");
  // Rows outside the support cannot reach the target. The graph is induced one
  // ring further out so that the degrees of support nodes are exact.
  std::vector<NodeId> nodes = mask.node_support;
  for (NodeId u : mask.node_support) {
    const auto nb = g.neighbors(u);
    nodes.insert(nodes.end(), nb.begin(), nb.end());
  }
  const Subgraph sub = induced_subgraph(g, std::move(nodes));
  const MessageGraph mg(sub.graph);
  const ad::Tensor x = feature_tensor(sub.graph);
  std::vector<double> masked = x.data();
  const std::size_t f = g.num_features();
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    const std::size_t row = *sub.local_id(mask.node_support[r]);
    for (std::size_t c = 0; c < f; ++c) masked[row * f + c] *= mask.at(r, c);
  }
  const ad::Tensor lp0 = model.model.forward(x, mg).log_probs;
  const ad::Tensor lp1 = model.model.forward(ad::Tensor(x.rows(), x.cols(), std::move(masked)), mg).log_probs;
  const std::size_t t = *sub.local_id(mask.target);
  const int c0 = argmax_rows(lp0)[t];
  const int c1 = argmax_rows(lp1)[t];
  const auto c = static_cast<std::size_t>(c0);
  return {c0 == c1 ? 1.0 : 0.0, std::abs(std::exp(lp1.at(t, c)) - std::exp(lp0.at(t, c)))};
}

inline std::vector<FidelityScore> fidelity_scores(const TrainedModel& model, const Graph& g,
                                                  const std::vector<ExplanationMask>& masks) {
  std::vector<FidelityScore> out;
  out.reserve(masks.size());
  for (const auto& m : masks) out.push_back(fidelity_score(model, g, m));
  return out;
}

inline double fidelity(const TrainedModel& model, const Graph& g, const std::vector<ExplanationMask>& masks,
                       FidelityMode mode = FidelityMode::agreement) {
  if (masks.empty()) throw MetricError("fidelity: no masks");
  double s = 0;
  for (const auto& f : fidelity_scores(model, g, masks))
    s += mode == FidelityMode::agreement ? f.agreement : f.probability_change;
  return s / static_cast<double>(masks.size());
}

// Fraction of entries above `zero_tol`.
inline double sparsity(const ExplanationMask& mask, double zero_tol = 1e-6) {
  if (mask.values.empty()) throw MetricError("sparsity: empty mask");
  const auto active = std::count_if(mask.values.begin(), mask.values.end(), [&](double v) { return v > zero_tol; });
  return static_cast<double>(active) / static_cast<double>(mask.values.size());
}

// L2 distance over the nodes present in both supports.
inline double mask_distance(const ExplanationMask& a, const ExplanationMask& b) {
  if (a.num_features != b.num_features) throw AlignmentError("stability: masks have different feature counts");
  double s = 0;
  std::size_t i = 0, j = 0;
  const std::size_t f = a.num_features;
  while (i < a.rows() && j < b.rows()) {
    if (a.node_support[i] < b.node_support[j]) {
      ++i;
    } else if (a.node_support[i] > b.node_support[j]) {
      ++j;
    } else {
      for (std::size_t c = 0; c < f; ++c) {
        const double d = a.at(i, c) - b.at(j, c);
        s += d * d;
      }
      ++i;
      ++j;
    }
  }
  return std::sqrt(s);
}

// Rewrites a mask computed on a re-indexed graph in terms of original ids.
// `new_to_old[k]` is the original id of new node k.
inline ExplanationMask relabel_mask(const ExplanationMask& m, const std::vector<NodeId>& new_to_old) {
  std::vector<std::size_t> order(m.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return new_to_old[m.node_support[a]] < new_to_old[m.node_support[b]]; });
  ExplanationMask out = m;
  out.target = new_to_old.at(m.target);
  out.node_support.clear();
  out.values.clear();
  for (std::size_t r : order) {
    out.node_support.push_back(new_to_old.at(m.node_support[r]));
    out.values.insert(out.values.end(), m.values.begin() + static_cast<std::ptrdiff_t>(r * m.num_features),
                      m.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * m.num_features));
  }
  for (NodeId& u : out.subgraph_nodes) u = new_to_old.at(u);
  std::sort(out.subgraph_nodes.begin(), out.subgraph_nodes.end());
  return out;
}

inline std::vector<NodeId> inverse_remap(const std::vector<std::optional<NodeId>>& remap, std::size_t new_size) {
  std::vector<NodeId> inv(new_size);
  for (std::size_t old = 0; old < remap.size(); ++old)
    if (remap[old]) inv[*remap[old]] = old;
  return inv;
}

// Mean over paired (original, perturbed) masks, both in original ids.
inline double stability_from_masks(const std::vector<ExplanationMask>& original,
                                   const std::vector<ExplanationMask>& perturbed) {
  if (original.empty() || original.size() != perturbed.size())
    throw MetricError("stability: need equally many original and perturbed masks");
  double s = 0;
  for (std::size_t r = 0; r < original.size(); ++r) s += mask_distance(original[r], perturbed[r]);
  return s / static_cast<double>(original.size());
}

using Explainer = std::function<ExplanationMask(const Graph&, NodeId target, std::uint64_t seed)>;

// Seed of the perturbation and explainer for stability run `run`.
inline PerturbationSpec stability_perturbation(const PerturbationSpec& base, std::size_t run) {
  PerturbationSpec p = base;
  p.seed = derive_seed(base.seed, "stability-perturb", run);
  return p;
}

// The perturbed-graph half of one stability run, mapped back to original ids.
inline ExplanationMask explain_perturbed(const Graph& g, const Explainer& explainer, NodeId target,
                                         const PerturbationSpec& spec, std::uint64_t explainer_seed) {
  const PerturbedGraph pg = perturb(g, spec, target);
  const auto new_target = pg.remap.at(target);
  if (!new_target) throw ContractError("stability: target removed by perturbation");
  const ExplanationMask m = explainer(pg.graph, *new_target, explainer_seed);
  return relabel_mask(m, inverse_remap(pg.remap, pg.graph.num_nodes()));
}

inline double stability(const Graph& g, const Explainer& explainer, NodeId target, const PerturbationSpec& spec,
                        std::size_t runs, std::uint64_t explainer_seed) {
  if (runs == 0) throw MetricError("stability: runs must be at least 1");
  std::vector<ExplanationMask> a, b;
  for (std::size_t r = 0; r < runs; ++r) {
    const std::uint64_t s = derive_seed(explainer_seed, "run", r);
    a.push_back(explainer(g, target, s));
    b.push_back(explain_perturbed(g, explainer, target, stability_perturbation(spec, r), s));
  }
  return stability_from_masks(a, b);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Mean cosine similarity of consecutive masks.
inline double consistency(const std::vector<ExplanationMask>& masks) {
  if (masks.size() < 2) throw MetricError("consistency: need at least two masks");
  for (const auto& m : masks)
    if (m.node_support != masks[0].node_support || m.num_features != masks[0].num_features)
      throw AlignmentError("consistency: masks have different supports");
  double s = 0;
  for (std::size_t i = 0; i + 1 < masks.size(); ++i) s += cosine(masks[i].values, masks[i + 1].values);
  return s / static_cast<double>(masks.size() - 1);
}

// ---------------------------------------------------------------------------
// Aggregation

struct Summary {
  double mean = 0;
  double std = 0;  // sample standard deviation, 0 for a single value
  std::size_t count = 0;
};

inline Summary aggregate(const std::vector<double>& values) {
  if (values.empty()) throw MetricError("aggregate: no values");
  Summary s;
  s.count = values.size();
  // Sorting first makes the result independent of input order.
  std::vector<double> v = values;
  std::sort(v.begin(), v.end());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

inline std::string format_summary(const Summary& s, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f ± %.*f", digits, s.mean, digits, s.std);
  return buf;
}

inline nlohmann::json to_json(const Summary& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"count", s.count}};
}

struct MetricReport {
  Summary fidelity;  // the configured reading
  Summary fidelity_agreement;
  Summary fidelity_probability;
  Summary sparsity;
  Summary stability;
  Summary consistency;
  std::size_t nodes = 0;
  std::size_t runs = 0;
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json() const {
    using gnnbench::to_json;
    return {{"fidelity", to_json(fidelity)},
            {"fidelity_agreement", to_json(fidelity_agreement)},
            {"fidelity_probability", to_json(fidelity_probability)},
            {"sparsity", to_json(sparsity)},
            {"stability", to_json(stability)},
            {"consistency", to_json(consistency)},
            {"nodes", nodes},
            {"runs", runs},
            {"metadata", metadata}};
  }
};

// Per-node values of the four metrics for one cell.
struct NodeMetrics {
  NodeId node = 0;
  double fidelity_agreement = 0;
  double fidelity_probability = 0;
  double sparsity = 0;
  double stability = 0;
  double consistency = 0;
};

inline MetricReport build_report(const std::vector<NodeMetrics>& per_node, FidelityMode mode, std::size_t runs,
                                 nlohmann::json metadata) {
  if (per_node.empty()) throw MetricError("report: no explained nodes");
  auto col = [&](double NodeMetrics::*f) {
    std::vector<double> v;
    for (const auto& n : per_node) v.push_back(n.*f);
    return aggregate(v);
  };
  MetricReport r;
  r.fidelity_agreement = col(&NodeMetrics::fidelity_agreement);
  r.fidelity_probability = col(&NodeMetrics::fidelity_probability);
  r.fidelity = mode == FidelityMode::agreement ? r.fidelity_agreement : r.fidelity_probability;
  r.sparsity = col(&NodeMetrics::sparsity);
  r.stability = col(&NodeMetrics::stability);
  r.consistency = col(&NodeMetrics::consistency);
  r.nodes = per_node.size();
  r.runs = runs;
  r.metadata = std::move(metadata);
  r.metadata["fidelity_mode"] = to_string(mode);
  return r;
}

}  // namespace gnnbench
