#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "gnnbench/metrics.hpp"

using namespace gnnbench;

namespace {

Graph sanity_graph() {
  SyntheticSpec s;
  s.num_nodes = 60;
  s.num_classes = 3;
  s.feature_dim = 16;
  s.homophily = 0.8;
  s.seed = 4;
  return generate_synthetic(s);
}

const TrainedModel& trained_gcn() {
  static const TrainedModel m = [] {
    const Graph g = sanity_graph();
    TrainOptions opt;
    opt.seed = 3;
    return train(build_model(ModelSpec{Architecture::gcn_2l, 16, 3}, 3), g, split(g, 0.5, 3), opt);
  }();
  return m;
}

ExplanationMask filled_mask(const Graph& g, NodeId target, std::size_t hops, double fill) {
  ExplanationMask m;
  m.explainer = "test";
  m.target = target;
  m.num_features = g.num_features();
  m.node_support = k_hop_nodes(g, target, hops);
  m.values.assign(m.node_support.size() * g.num_features(), fill);
  return m;
}

ExplanationMask flat_mask(std::vector<NodeId> support, std::size_t f, std::vector<double> values) {
  ExplanationMask m;
  m.num_features = f;
  m.target = support.front();
  m.node_support = std::move(support);
  m.values = std::move(values);
  return m;
}

// Predictions on the full graph with every feature zeroed.
std::vector<int> zero_feature_predictions(const TrainedModel& model, const Graph& g) {
  const Graph blank(g.num_nodes(), g.num_features(), std::vector<double>(g.features().size(), 0.0), g.edges(),
                    g.labels(), g.num_classes());
  return argmax_rows(predict(model, blank));
}

}  // namespace

// ---------------------------------------------------------------------------
// Fidelity

TEST(Fidelity, IdentityMasksAgreeForEveryArchitecture) {
  const Graph g = sanity_graph();
  for (const auto& [arch, name] : architecture_names()) {
    TrainOptions opt;
    opt.epochs = 3;  // records batch-norm statistics
    const TrainedModel m = train(build_model(ModelSpec{arch, 16, 3}, 5), g, split(g, 0.5, 1), opt);
    std::vector<ExplanationMask> masks;
    for (NodeId t : {0u, 9u, 33u, 59u}) masks.push_back(filled_mask(g, t, m.num_layers(), 1.0));
    EXPECT_EQ(fidelity(m, g, masks), 1.0) << name;
    EXPECT_EQ(fidelity(m, g, masks, FidelityMode::probability), 0.0) << name;
  }
  std::vector<ExplanationMask> masks;
  for (NodeId t = 0; t < g.num_nodes(); ++t) masks.push_back(filled_mask(g, t, 2, 1.0));
  EXPECT_EQ(fidelity(trained_gcn(), g, masks), 1.0);
}

TEST(Fidelity, FlippedPredictionsScoreZero) {
  const Graph g = sanity_graph();
  const TrainedModel& m = trained_gcn();
  const auto pred = argmax_rows(predict(m, g));
  std::vector<ExplanationMask> flipped;
  const auto blank = zero_feature_predictions(m, g);
  for (NodeId t = 0; t < g.num_nodes(); ++t)
    if (blank[t] != pred[t]) flipped.push_back(filled_mask(g, t, 2, 0.0));
  ASSERT_GE(flipped.size(), 5u);
  EXPECT_EQ(fidelity(m, g, flipped), 0.0);
  const double p = fidelity(m, g, flipped, FidelityMode::probability);
  EXPECT_GT(p, 0.0);
  EXPECT_LE(p, 1.0);
}

TEST(Fidelity, ProbabilityReadingIsTheAbsoluteTargetClassChange) {
  const Graph g = sanity_graph();
  const TrainedModel& m = trained_gcn();
  const NodeId t = 12;
  const ExplanationMask mask = filled_mask(g, t, 2, 0.5);
  // Halving every feature in the field equals halving the whole graph for this target.
  std::vector<double> half = g.features();
  for (double& v : half) v *= 0.5;
  const Graph scaled(g.num_nodes(), g.num_features(), half, g.edges(), g.labels(), g.num_classes());
  const auto p0 = predict(m, g), p1 = predict(m, scaled);
  const auto c = static_cast<std::size_t>(argmax_rows(p0)[t]);
  const double expected = std::abs(std::exp(p1.at(t, c)) - std::exp(p0.at(t, c)));
  EXPECT_NEAR(fidelity(m, g, {mask}, FidelityMode::probability), expected, 1e-12);
}

TEST(Fidelity, Errors) {
  const Graph g = sanity_graph();
  EXPECT_THROW(fidelity(trained_gcn(), g, {}), MetricError);
  ExplanationMask wrong = filled_mask(g, 3, 2, 1.0);
  wrong.num_features = 4;
  EXPECT_THROW(fidelity(trained_gcn(), g, {wrong}), AlignmentError);
  ExplanationMask outside = filled_mask(g, 3, 2, 1.0);
  outside.node_support.back() = 600;
  EXPECT_THROW(fidelity(trained_gcn(), g, {outside}), AlignmentError);
  EXPECT_EQ(parse_fidelity_mode("probability"), FidelityMode::probability);
  EXPECT_THROW(parse_fidelity_mode("literal"), ConfigError);
}

// ---------------------------------------------------------------------------
// Sparsity

TEST(Sparsity, Examples) {
  EXPECT_EQ(sparsity(flat_mask({0, 1}, 5, {0, 0.3, 0, 0, 0, 0, 0, 0.9, 0, 0})), 0.2);
  EXPECT_EQ(sparsity(flat_mask({0, 1}, 5, std::vector<double>(10, 0.0))), 0.0);
  std::vector<NodeId> rows(20);
  for (NodeId u = 0; u < 20; ++u) rows[u] = u;
  std::vector<double> indicator(20 * 8, 0.0);
  for (NodeId u : {2u, 3u, 7u, 11u, 19u}) std::fill_n(indicator.begin() + u * 8, 8, 1.0);
  EXPECT_EQ(sparsity(flat_mask(rows, 8, indicator)), 0.25);
}

TEST(Sparsity, ToleranceIsStrict) {
  const ExplanationMask m = flat_mask({0}, 4, {1e-6, 2e-6, 1e-7, 0.5});
  EXPECT_EQ(sparsity(m), 0.5);
  EXPECT_EQ(sparsity(m, 0.0), 1.0);
  EXPECT_EQ(sparsity(m, 0.5), 0.0);
  EXPECT_THROW(sparsity(ExplanationMask{}), MetricError);
}

TEST(Sparsity, MonotoneUnderEntrywiseIncrease) {
  Rng rng = make_rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(24), b(24);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = uniform01(rng) < 0.5 ? 0.0 : uniform01(rng);
      b[i] = a[i] + (uniform01(rng) < 0.3 ? uniform01(rng) : 0.0);
    }
    EXPECT_LE(sparsity(flat_mask({0, 1, 2}, 8, a)), sparsity(flat_mask({0, 1, 2}, 8, b)));
  }
}

// ---------------------------------------------------------------------------
// Stability

TEST(Stability, DisjointIndicatorsGiveRootTwoK) {
  // Supports {0..3} and {2..5} share nodes 2 and 3: 12 common entries at
  // offset 12 in a and offset 0 in b. Ones sit on disjoint common entries.
  for (std::size_t k = 1; k <= 6; ++k) {
    std::vector<double> a(24, 0.0), b(24, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
      a[12 + i] = 1.0;
      b[6 + i] = 1.0;
    }
    // Ones on unshared rows must not count.
    a[0] = b[23] = 1.0;
    const ExplanationMask ma = flat_mask({0, 1, 2, 3}, 6, a);
    const ExplanationMask mb = flat_mask({2, 3, 4, 5}, 6, b);
    const double expected = std::sqrt(2.0 * static_cast<double>(k));
    EXPECT_DOUBLE_EQ(mask_distance(ma, mb), expected) << k;
    EXPECT_DOUBLE_EQ(stability_from_masks({ma, ma}, {mb, ma}), expected / 2) << k;
  }
}

TEST(Stability, RemovedNodesAreExcluded) {
  const ExplanationMask a = flat_mask({0, 1, 2}, 2, {1, 1, 5, 5, 0, 0});
  const ExplanationMask b = flat_mask({0, 2}, 2, {1, 1, 0, 0});
  EXPECT_EQ(mask_distance(a, b), 0.0);
  EXPECT_THROW(mask_distance(a, flat_mask({0}, 3, {0, 0, 0})), AlignmentError);
  EXPECT_THROW(stability_from_masks({a}, {}), MetricError);
}

TEST(Stability, IdentityPerturbationWithSeededExplainerIsZero) {
  const Graph g = sanity_graph();
  const TrainedModel& m = trained_gcn();
  GNNExplainerConfig cfg;
  cfg.epochs = 20;
  const Explainer ex = [&](const Graph& h, NodeId t, std::uint64_t s) { return gnnexplainer_explain(m, h, t, cfg, s); };
  PerturbationSpec none;
  none.feature_fraction = 0;
  none.node_removal_fraction = 0;
  none.seed = 8;
  for (NodeId t : {4u, 21u}) EXPECT_EQ(stability(g, ex, t, none, 3, 99), 0.0);
}

TEST(Stability, NodeRemovalIsRealignedThroughTheRemap) {
  // Each row of this explainer's mask is its node's own feature row, so any
  // misalignment of surviving nodes would show up as a nonzero distance.
  const Graph g = sanity_graph();
  const Explainer ex = [](const Graph& h, NodeId t, std::uint64_t) {
    ExplanationMask m;
    m.target = t;
    m.num_features = h.num_features();
    m.node_support = k_hop_nodes(h, t, 2);
    for (NodeId u : m.node_support) {
      const auto row = h.feature_row(u);
      m.values.insert(m.values.end(), row.begin(), row.end());
    }
    return m;
  };
  PerturbationSpec removal;
  removal.feature_fraction = 0;
  removal.node_removal_fraction = 0.2;
  removal.seed = 5;
  for (NodeId t : {0u, 17u, 42u}) EXPECT_EQ(stability(g, ex, t, removal, 4, 1), 0.0);

  PerturbationSpec noisy = removal;
  noisy.feature_fraction = 0.2;
  EXPECT_GT(stability(g, ex, 17, noisy, 4, 1), 0.0);
  EXPECT_THROW(stability(g, ex, 17, noisy, 0, 1), MetricError);
}

// ---------------------------------------------------------------------------
// Consistency

TEST(Consistency, Examples) {
  const ExplanationMask a = flat_mask({0, 1}, 3, {0.1, 0.7, 0.2, 0.9, 0.33, 0.05});
  EXPECT_NEAR(consistency({a, a, a, a, a}), 1.0, 1e-12);
  const ExplanationMask x = flat_mask({0, 1}, 3, {1, 0, 1, 0, 0, 0});
  const ExplanationMask y = flat_mask({0, 1}, 3, {0, 1, 0, 0, 2, 0});
  EXPECT_EQ(consistency({x, y, x, y}), 0.0);
  const ExplanationMask zero = flat_mask({0, 1}, 3, std::vector<double>(6, 0.0));
  EXPECT_EQ(consistency({zero, zero}), 0.0);
  EXPECT_NEAR(consistency({a, a, zero}), 0.5, 1e-12);
}

TEST(Consistency, DuplicatesOfRealMasks) {
  const Graph g = sanity_graph();
  const ExplanationMask m = gnnexplainer_explain(trained_gcn(), g, 30, {}, 4);
  EXPECT_NEAR(consistency({m, m, m}), 1.0, 1e-12);
}

TEST(Consistency, Errors) {
  const ExplanationMask a = flat_mask({0, 1}, 1, {1, 1});
  EXPECT_THROW(consistency({a}), MetricError);
  EXPECT_THROW(consistency({a, flat_mask({0, 2}, 1, {1, 1})}), AlignmentError);
}

// ---------------------------------------------------------------------------
// Aggregation and reports

TEST(Aggregate, Examples) {
  const Summary one = aggregate({0.37});
  EXPECT_EQ(one.mean, 0.37);
  EXPECT_EQ(one.std, 0.0);
  EXPECT_EQ(one.count, 1u);
  const Summary two = aggregate({0.0, 1.0});
  EXPECT_EQ(two.mean, 0.5);
  EXPECT_DOUBLE_EQ(two.std, std::sqrt(0.5));
  EXPECT_THROW(aggregate({}), MetricError);
}

TEST(Aggregate, PermutationInvariant) {
  Rng rng = make_rng(12);
  std::vector<double> v(37);
  for (double& x : v) x = uniform01(rng) * std::pow(10.0, static_cast<double>(uniform_index(rng, 12)) - 6);
  const Summary base = aggregate(v);
  for (int i = 0; i < 20; ++i) {
    std::shuffle(v.begin(), v.end(), rng);
    const Summary s = aggregate(v);
    EXPECT_EQ(s.mean, base.mean);
    EXPECT_EQ(s.std, base.std);
  }
}

TEST(Aggregate, TableFormat) {
  EXPECT_EQ(format_summary({0.998, 0.003, 10}), "0.998 ± 0.003");
  EXPECT_EQ(format_summary({0.4361, 0.1649, 10}, 2), "0.44 ± 0.16");
}

TEST(Report, ColumnsAndMetadata) {
  std::vector<NodeMetrics> rows{{1, 1.0, 0.1, 0.2, 0.3, 0.9}, {2, 0.0, 0.3, 0.4, 0.5, 1.0}};
  const MetricReport r = build_report(rows, FidelityMode::probability, 5, {{"dataset", "cora"}});
  EXPECT_EQ(r.fidelity.mean, r.fidelity_probability.mean);
  EXPECT_DOUBLE_EQ(r.fidelity_agreement.mean, 0.5);
  EXPECT_DOUBLE_EQ(r.sparsity.mean, 0.3);
  EXPECT_DOUBLE_EQ(r.consistency.mean, 0.95);
  EXPECT_EQ(r.nodes, 2u);
  const auto j = r.to_json();
  EXPECT_EQ(j.at("runs"), 5);
  EXPECT_EQ(j.at("metadata").at("dataset"), "cora");
  EXPECT_EQ(j.at("metadata").at("fidelity_mode"), "probability");
  EXPECT_THROW(build_report({}, FidelityMode::agreement, 5, {}), MetricError);
}
