#pragma once

// The six node-classification architectures, full-graph training and
// prediction, and the JSON checkpoint format.
//
// Layer stacks:
//   gcn-2l   GCNConv(in,16) ReLU GCNConv(16,out) LogSoftmax
//   gcn-3l   GCNConv(in,16) ReLU GCNConv(16,16) ReLU GCNConv(16,out) LogSoftmax
//   sage-2l  SAGEConv(in,16) BatchNorm1d(16) ReLU SAGEConv(16,out) LogSoftmax
//   sage-3l  SAGEConv(in,16) BN ReLU SAGEConv(16,16) BN ReLU SAGEConv(16,out) LogSoftmax
//   gin-2l   GINConv[Linear(in,16) BN ReLU Linear(16,16) BN ReLU] ReLU
//            GINConv[Linear(16,16) BN ReLU Linear(16,out)] LogSoftmax
//   gat-2l   GATConv(in,16,heads=3) BatchNorm1d(48) ReLU GATConv(48,out,heads=1) LogSoftmax
//
// Two optional wrappers are carried by the model because they change the
// forward pass: edge gating (GNNGuard-style message weights) and a feature
// denoising autoencoder in front of the classifier.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "autodiff.hpp"
#include "errors.hpp"
#include "graph.hpp"
#include "seeding.hpp"

namespace gnnbench {

enum class Architecture { gcn_2l, gcn_3l, sage_2l, sage_3l, gin_2l, gat_2l };

inline const std::vector<std::pair<Architecture, std::string>>& architecture_names() {
  static const std::vector<std::pair<Architecture, std::string>> names{
      {Architecture::gcn_2l, "gcn-2l"},   {Architecture::gcn_3l, "gcn-3l"}, {Architecture::sage_2l, "sage-2l"},
      {Architecture::sage_3l, "sage-3l"}, {Architecture::gin_2l, "gin-2l"}, {Architecture::gat_2l, "gat-2l"}};
  return names;
}

inline std::string to_string(Architecture a) {
  for (const auto& [k, v] : architecture_names())
    if (k == a) return v;
  return "unknown";
}

inline Architecture parse_architecture(const std::string& s) {
  for (const auto& [k, v] : architecture_names())
    if (v == s) return k;
  throw ParameterError("unknown architecture '" + s + "'");
}

struct ModelSpec {
  Architecture architecture = Architecture::gcn_2l;
  std::size_t input_size = 0;
  std::size_t output_size = 0;
  std::size_t hidden = 16;
  std::size_t gat_heads = 3;
};

// Message-passing depth of an architecture.
inline std::size_t num_layers(Architecture a) {
  return (a == Architecture::gcn_3l || a == Architecture::sage_3l) ? 3 : 2;
}

// ---------------------------------------------------------------------------
// Precomputed aggregation structure of a graph

struct MessageGraph {
  std::size_t num_nodes = 0;
  // Directed messages src -> dst, two per undirected edge, grouped by dst.
  std::shared_ptr<const std::vector<std::size_t>> src;
  std::shared_ptr<const std::vector<std::size_t>> dst;
  // Same plus one self-loop per node (attention layers).
  std::shared_ptr<const std::vector<std::size_t>> src_loop;
  std::shared_ptr<const std::vector<std::size_t>> dst_loop;
  std::vector<double> degree;  // per node
  std::shared_ptr<const ad::SparseMatrix> gcn;  // D^-1/2 (A+I) D^-1/2
  std::shared_ptr<const ad::SparseMatrix> mean;  // row-normalized A
  std::shared_ptr<const ad::SparseMatrix> sum;  // A
  ad::Tensor gcn_self;  // n x 1 diagonal of the GCN operator
  ad::Tensor gcn_edge;  // E x 1 off-diagonal coefficients, aligned with src/dst
  ad::Tensor mean_edge;  // E x 1, 1/deg(dst)
  ad::Tensor edge_dst_degree;  // E x 1, deg(dst)

  explicit MessageGraph(const Graph& g) : num_nodes(g.num_nodes()) {
    const std::size_t n = g.num_nodes();
    std::vector<std::size_t> s, d, sl, dl;
    degree.resize(n);
    for (NodeId u = 0; u < n; ++u) {
      degree[u] = static_cast<double>(g.degree(u));
      bool self_done = false;
      for (NodeId v : g.neighbors(u)) {
        if (!self_done && v > u) {
          sl.push_back(u);
          dl.push_back(u);
          self_done = true;
        }
        s.push_back(v);
        d.push_back(u);
        sl.push_back(v);
        dl.push_back(u);
      }
      if (!self_done) {
        sl.push_back(u);
        dl.push_back(u);
      }
    }
    const std::size_t E = s.size();
    std::vector<double> gself(n), gedge(E), medge(E), ddeg(E);
    for (NodeId u = 0; u < n; ++u) gself[u] = 1.0 / (degree[u] + 1.0);
    for (std::size_t e = 0; e < E; ++e) {
      gedge[e] = 1.0 / std::sqrt((degree[s[e]] + 1.0) * (degree[d[e]] + 1.0));
      medge[e] = 1.0 / degree[d[e]];
      ddeg[e] = degree[d[e]];
    }
    auto gcn_m = std::make_shared<ad::SparseMatrix>();
    auto mean_m = std::make_shared<ad::SparseMatrix>();
    auto sum_m = std::make_shared<ad::SparseMatrix>();
    for (auto* m : {gcn_m.get(), mean_m.get(), sum_m.get()}) m->rows = m->cols = n;
    std::size_t e = 0;
    for (NodeId u = 0; u < n; ++u) {
      bool self_done = false;
      for (; e < E && d[e] == u; ++e) {
        if (!self_done && s[e] > u) {
          gcn_m->indices.push_back(u);
          gcn_m->values.push_back(gself[u]);
          self_done = true;
        }
        gcn_m->indices.push_back(s[e]);
        gcn_m->values.push_back(gedge[e]);
        mean_m->indices.push_back(s[e]);
        mean_m->values.push_back(medge[e]);
        sum_m->indices.push_back(s[e]);
        sum_m->values.push_back(1.0);
      }
      if (!self_done) {
        gcn_m->indices.push_back(u);
        gcn_m->values.push_back(gself[u]);
      }
      gcn_m->offsets.push_back(gcn_m->indices.size());
      mean_m->offsets.push_back(mean_m->indices.size());
      sum_m->offsets.push_back(sum_m->indices.size());
    }
    gcn = gcn_m;
    mean = mean_m;
    sum = sum_m;
    gcn_self = ad::Tensor(n, 1, std::move(gself));
    gcn_edge = ad::Tensor(E, 1, std::move(gedge));
    mean_edge = ad::Tensor(E, 1, std::move(medge));
    edge_dst_degree = ad::Tensor(E, 1, std::move(ddeg));
    src = std::make_shared<const std::vector<std::size_t>>(std::move(s));
    dst = std::make_shared<const std::vector<std::size_t>>(std::move(d));
    src_loop = std::make_shared<const std::vector<std::size_t>>(std::move(sl));
    dst_loop = std::make_shared<const std::vector<std::size_t>>(std::move(dl));
  }

  std::size_t num_messages() const { return src->size(); }
};

// ---------------------------------------------------------------------------
// Convolution layers (ungated forms; the model adds biases and gating)

// Â X W with Â = D̃^-1/2 (A + I) D̃^-1/2.
inline ad::Tensor gcn_conv(const ad::Tensor& x, const MessageGraph& mg, const ad::Tensor& w) {
  return ad::spmm(mg.gcn, ad::matmul(x, w));
}

// X W_self + mean_{v in N(u)} x_v W_neigh; isolated nodes get a zero neighbor term.
inline ad::Tensor sage_conv(const ad::Tensor& x, const MessageGraph& mg, const ad::Tensor& w_self,
                            const ad::Tensor& w_neigh) {
  return ad::add(ad::matmul(x, w_self), ad::matmul(ad::spmm(mg.mean, x), w_neigh));
}

// GIN input (1 + eps) x_u + sum of neighbors, eps fixed at 0.
inline ad::Tensor gin_aggregate(const ad::Tensor& x, const MessageGraph& mg) { return ad::add(x, ad::spmm(mg.sum, x)); }

// Attention coefficients over neighborhood plus self, aligned with src_loop/dst_loop.
inline ad::Tensor gat_attention(const ad::Tensor& hw, const MessageGraph& mg, const ad::Tensor& att_src,
                                const ad::Tensor& att_dst) {
  const ad::Tensor a_src = ad::matmul(hw, att_src);
  const ad::Tensor a_dst = ad::matmul(hw, att_dst);
  const ad::Tensor logits =
      ad::leaky_relu(ad::add(ad::gather_rows(a_src, mg.src_loop), ad::gather_rows(a_dst, mg.dst_loop)), 0.2);
  return ad::segment_softmax(logits, mg.dst_loop, mg.num_nodes);
}

// One attention head, sum_v alpha_uv W x_v. `gate` rescales alpha per message.
inline ad::Tensor gat_head(const ad::Tensor& x, const MessageGraph& mg, const ad::Tensor& w, const ad::Tensor& att_src,
                           const ad::Tensor& att_dst, const std::optional<ad::Tensor>& gate = std::nullopt) {
  const ad::Tensor hw = ad::matmul(x, w);
  ad::Tensor alpha = gat_attention(hw, mg, att_src, att_dst);
  if (gate) alpha = ad::mul(alpha, *gate);
  return ad::scatter_add_rows(ad::mul(ad::gather_rows(hw, mg.src_loop), alpha), mg.dst_loop, mg.num_nodes);
}

// ---------------------------------------------------------------------------
// Wrappers

// Per-layer message gating. Each message u<-v is scaled by deg(u) * w_uv,
// where w is the neighborhood-normalized cosine similarity of the layer input
// embeddings, shifted by a learnable per-layer threshold tau_k in (0, 1).
// With drop, messages whose similarity is at or below tau_k get weight 0.
// The self term is not gated.
struct EdgeGuard {
  bool attention = true;
  bool drop = true;
  double lr = 0.01;
  std::size_t train_iters = 50;  // epochs during which the thresholds are learned
  double initial_threshold = 0.1;
};

// Dense autoencoder input -> hidden -> bottleneck -> hidden -> input with
// ReLU on the hidden layers; the classifier consumes its reconstruction.
struct Denoiser {
  std::size_t hidden_dim = 7;
  std::size_t bottleneck_dim = 5;
  double noise_std = 0.01;
};

// ---------------------------------------------------------------------------
// Model

enum class Mode {
  train,  // batch statistics, recorded when a sink is given
  eval,   // recorded statistics
};

struct ForwardOptions {
  Mode mode = Mode::eval;
  std::map<std::string, ad::BatchNormStats>* record_stats = nullptr;
  const std::vector<double>* denoiser_noise = nullptr;  // added to the autoencoder input
};

struct ForwardOutput {
  ad::Tensor log_probs;
  std::optional<ad::Tensor> reconstruction;
};

class Model {
 public:
  Model() = default;
  Model(ModelSpec spec, std::uint64_t seed) : spec_(spec) {
    if (spec.input_size == 0 || spec.output_size == 0)
      throw ParameterError("build_model: input and output sizes must be positive");
    Rng rng = make_rng(derive_seed(seed, "init"));
    const std::size_t h = spec.hidden;
    const std::size_t in = spec.input_size, out = spec.output_size;
    switch (spec.architecture) {
      case Architecture::gcn_2l:
        add_gcn("conv0", in, h, rng);
        add_gcn("conv1", h, out, rng);
        break;
      case Architecture::gcn_3l:
        add_gcn("conv0", in, h, rng);
        add_gcn("conv1", h, h, rng);
        add_gcn("conv2", h, out, rng);
        break;
      case Architecture::sage_2l:
        add_sage("conv0", in, h, rng);
        add_bn("bn0", h);
        add_sage("conv1", h, out, rng);
        break;
      case Architecture::sage_3l:
        add_sage("conv0", in, h, rng);
        add_bn("bn0", h);
        add_sage("conv1", h, h, rng);
        add_bn("bn1", h);
        add_sage("conv2", h, out, rng);
        break;
      case Architecture::gin_2l:
        add_linear("conv0.lin0", in, h, rng);
        add_bn("conv0.bn0", h);
        add_linear("conv0.lin1", h, h, rng);
        add_bn("conv0.bn1", h);
        add_linear("conv1.lin0", h, h, rng);
        add_bn("conv1.bn0", h);
        add_linear("conv1.lin1", h, out, rng);
        break;
      case Architecture::gat_2l:
        add_gat("conv0", in, h, spec.gat_heads, rng);
        add_bn("bn0", h * spec.gat_heads);
        add_gat("conv1", h * spec.gat_heads, out, 1, rng);
        break;
    }
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  std::size_t num_layers() const noexcept { return gnnbench::num_layers(spec_.architecture); }

  std::map<std::string, ad::Tensor>& parameters() noexcept { return params_; }
  const std::map<std::string, ad::Tensor>& parameters() const noexcept { return params_; }
  std::map<std::string, ad::Tensor>& gate_parameters() noexcept { return gate_params_; }
  const std::map<std::string, ad::Tensor>& gate_parameters() const noexcept { return gate_params_; }
  std::map<std::string, ad::BatchNormStats>& batch_norm_stats() noexcept { return stats_; }
  const std::map<std::string, ad::BatchNormStats>& batch_norm_stats() const noexcept { return stats_; }

  // Copies share parameter storage; this gives the model its own.
  void own_parameters() {
    for (auto* ps : {&params_, &gate_params_})
      for (auto& [name, t] : *ps) t = ad::Tensor::parameter(t.rows(), t.cols(), t.data());
  }

  const std::optional<EdgeGuard>& guard() const noexcept { return guard_; }
  const std::optional<Denoiser>& denoiser() const noexcept { return denoiser_; }

  // Neighborhood-normalized guard weights w_uv of layer k for layer input h,
  // one per message in MessageGraph order. Each lies in [0, 1] and they sum to
  // at most 1 per destination.
  ad::Tensor guard_weights(std::size_t k, const ad::Tensor& h, const MessageGraph& mg) const {
    if (!guard_) throw ContractError("model: guard weights requested without a guard");
    const std::size_t E = mg.num_messages();
    const std::size_t d = h.cols();
    std::vector<double> norms(h.rows(), 0.0);
    for (std::size_t i = 0; i < h.rows(); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += h.at(i, j) * h.at(i, j);
      norms[i] = std::sqrt(s);
    }
    std::vector<double> sim(E, 0.0);
    for (std::size_t e = 0; e < E; ++e) {
      const std::size_t a = (*mg.src)[e], b = (*mg.dst)[e];
      if (norms[a] == 0.0 || norms[b] == 0.0) continue;
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += h.at(a, j) * h.at(b, j);
      sim[e] = dot / (norms[a] * norms[b]);
    }
    const ad::Tensor tau = ad::sigmoid(gate_params_.at("guard.threshold" + std::to_string(k)));
    ad::Tensor raw;
    if (guard_->attention) {
      if (guard_->drop) {
        std::vector<double> keep(E);
        for (std::size_t e = 0; e < E; ++e) keep[e] = sim[e] > tau.item() ? 1.0 : 0.0;
        raw = ad::mul(ad::sub(ad::Tensor(E, 1, sim), tau), ad::Tensor(E, 1, std::move(keep)));
      } else {
        for (double& s : sim) s = std::max(s, 0.0);
        raw = ad::Tensor(E, 1, std::move(sim));
      }
    } else {
      std::vector<double> keep(E, 1.0);
      if (guard_->drop)
        for (std::size_t e = 0; e < E; ++e) keep[e] = sim[e] > tau.item() ? 1.0 : 0.0;
      raw = ad::Tensor(E, 1, std::move(keep));
    }
    return ad::segment_normalize(raw, mg.dst, mg.num_nodes);
  }

  void enable_guard(const EdgeGuard& g) {
    guard_ = g;
    const double t = std::clamp(g.initial_threshold, 1e-6, 1.0 - 1e-6);
    for (std::size_t k = 0; k < num_layers(); ++k)
      gate_params_["guard.threshold" + std::to_string(k)] = ad::Tensor::parameter(1, 1, {std::log(t / (1.0 - t))});
  }

  void enable_denoiser(const Denoiser& d, std::uint64_t seed) {
    if (d.bottleneck_dim >= spec_.input_size)
      throw ConfigError("autoencoder: bottleneck width " + std::to_string(d.bottleneck_dim) +
                        " must be smaller than the input width " + std::to_string(spec_.input_size));
    denoiser_ = d;
    Rng rng = make_rng(derive_seed(seed, "denoiser-init"));
    add_linear("ae.enc0", spec_.input_size, d.hidden_dim, rng);
    add_linear("ae.enc1", d.hidden_dim, d.bottleneck_dim, rng);
    add_linear("ae.dec0", d.bottleneck_dim, d.hidden_dim, rng);
    add_linear("ae.dec1", d.hidden_dim, spec_.input_size, rng);
  }

  // Human-readable layer stack.
  std::vector<std::string> layer_listing() const {
    const auto in = std::to_string(spec_.input_size), out = std::to_string(spec_.output_size),
               h = std::to_string(spec_.hidden);
    const auto bn = [](std::size_t w) { return "BatchNorm1d(" + std::to_string(w) + ", eps=1e-05)"; };
    switch (spec_.architecture) {
      case Architecture::gcn_2l:
        return {"GCNConv(" + in + ", " + h + ")", "ReLU", "GCNConv(" + h + ", " + out + ")", "LogSoftmax"};
      case Architecture::gcn_3l:
        return {"GCNConv(" + in + ", " + h + ")", "ReLU", "GCNConv(" + h + ", " + h + ")", "ReLU",
                "GCNConv(" + h + ", " + out + ")", "LogSoftmax"};
      case Architecture::sage_2l:
        return {"SAGEConv(" + in + ", " + h + ")", bn(spec_.hidden), "ReLU", "SAGEConv(" + h + ", " + out + ")",
                "LogSoftmax"};
      case Architecture::sage_3l:
        return {"SAGEConv(" + in + ", " + h + ")", bn(spec_.hidden), "ReLU", "SAGEConv(" + h + ", " + h + ")",
                bn(spec_.hidden), "ReLU", "SAGEConv(" + h + ", " + out + ")", "LogSoftmax"};
      case Architecture::gin_2l:
        return {"GINConv(Linear(" + in + ", " + h + "), " + bn(spec_.hidden) + ", ReLU, Linear(" + h + ", " + h +
                    "), " + bn(spec_.hidden) + ", ReLU)",
                "ReLU",
                "GINConv(Linear(" + h + ", " + h + "), " + bn(spec_.hidden) + ", ReLU, Linear(" + h + ", " + out + "))",
                "LogSoftmax"};
      case Architecture::gat_2l: {
        const auto wide = spec_.hidden * spec_.gat_heads;
        return {"GATConv(" + in + ", " + h + ", heads=" + std::to_string(spec_.gat_heads) + ")", bn(wide), "ReLU",
                "GATConv(" + std::to_string(wide) + ", " + out + ", heads=1)", "LogSoftmax"};
      }
    }
    return {};
  }

  ForwardOutput forward(const ad::Tensor& x, const MessageGraph& mg, const ForwardOptions& opt = {}) const {
    if (x.cols() != spec_.input_size)
      throw ShapeError("model: feature width " + std::to_string(x.cols()) + " differs from input size " +
                       std::to_string(spec_.input_size));
    if (x.rows() != mg.num_nodes)
      throw ShapeError("model: " + std::to_string(x.rows()) + " feature rows for " + std::to_string(mg.num_nodes) +
                       " nodes");
    ForwardOutput out;
    ad::Tensor h = x;
    if (denoiser_) {
      ad::Tensor in = x;
      if (opt.denoiser_noise) in = ad::add(x, ad::Tensor(x.rows(), x.cols(), *opt.denoiser_noise));
      ad::Tensor z = ad::relu(linear("ae.enc0", in));
      z = ad::relu(linear("ae.enc1", z));
      z = ad::relu(linear("ae.dec0", z));
      h = linear("ae.dec1", z);
      out.reconstruction = h;
    }
    const auto relu = [](const ad::Tensor& t) { return ad::relu(t); };
    switch (spec_.architecture) {
      case Architecture::gcn_2l:
        h = relu(gcn("conv0", h, mg, gate(0, h, mg)));
        h = gcn("conv1", h, mg, gate(1, h, mg));
        break;
      case Architecture::gcn_3l:
        h = relu(gcn("conv0", h, mg, gate(0, h, mg)));
        h = relu(gcn("conv1", h, mg, gate(1, h, mg)));
        h = gcn("conv2", h, mg, gate(2, h, mg));
        break;
      case Architecture::sage_2l:
        h = relu(bn("bn0", sage("conv0", h, mg, gate(0, h, mg)), opt));
        h = sage("conv1", h, mg, gate(1, h, mg));
        break;
      case Architecture::sage_3l:
        h = relu(bn("bn0", sage("conv0", h, mg, gate(0, h, mg)), opt));
        h = relu(bn("bn1", sage("conv1", h, mg, gate(1, h, mg)), opt));
        h = sage("conv2", h, mg, gate(2, h, mg));
        break;
      case Architecture::gin_2l: {
        ad::Tensor a = gin_aggregate(h, mg, gate(0, h, mg));
        a = relu(bn("conv0.bn0", linear("conv0.lin0", a), opt));
        a = relu(bn("conv0.bn1", linear("conv0.lin1", a), opt));
        h = relu(a);
        a = gin_aggregate(h, mg, gate(1, h, mg));
        a = relu(bn("conv1.bn0", linear("conv1.lin0", a), opt));
        h = linear("conv1.lin1", a);
        break;
      }
      case Architecture::gat_2l:
        h = relu(bn("bn0", gat("conv0", h, mg, spec_.gat_heads, gate(0, h, mg)), opt));
        h = gat("conv1", h, mg, 1, gate(1, h, mg));
        break;
    }
    out.log_probs = ad::log_softmax(h);
    return out;
  }

 private:
  static std::vector<double> glorot(std::size_t fan_in, std::size_t fan_out, std::size_t count, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> w(count);
    for (double& v : w) v = (2.0 * uniform01(rng) - 1.0) * limit;
    return w;
  }

  void add_weight(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng) {
    params_[name] = ad::Tensor::parameter(rows, cols, glorot(rows, cols, rows * cols, rng));
  }
  void add_bias(const std::string& name, std::size_t cols) {
    params_[name] = ad::Tensor::parameter(1, cols, std::vector<double>(cols, 0.0));
  }
  void add_gcn(const std::string& p, std::size_t in, std::size_t out, Rng& rng) {
    add_weight(p + ".weight", in, out, rng);
    add_bias(p + ".bias", out);
  }
  void add_sage(const std::string& p, std::size_t in, std::size_t out, Rng& rng) {
    add_weight(p + ".weight_neigh", in, out, rng);
    add_weight(p + ".weight_self", in, out, rng);
    add_bias(p + ".bias", out);
  }
  void add_linear(const std::string& p, std::size_t in, std::size_t out, Rng& rng) {
    add_weight(p + ".weight", in, out, rng);
    add_bias(p + ".bias", out);
  }
  void add_gat(const std::string& p, std::size_t in, std::size_t out, std::size_t heads, Rng& rng) {
    for (std::size_t k = 0; k < heads; ++k) {
      const auto hp = p + ".head" + std::to_string(k);
      add_weight(hp + ".weight", in, out, rng);
      params_[hp + ".att_src"] = ad::Tensor::parameter(out, 1, glorot(out, 1, out, rng));
      params_[hp + ".att_dst"] = ad::Tensor::parameter(out, 1, glorot(out, 1, out, rng));
    }
    add_bias(p + ".bias", out * heads);
  }
  void add_bn(const std::string& p, std::size_t width) {
    params_[p + ".gamma"] = ad::Tensor::parameter(1, width, std::vector<double>(width, 1.0));
    params_[p + ".beta"] = ad::Tensor::parameter(1, width, std::vector<double>(width, 0.0));
  }

  const ad::Tensor& param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("model: missing parameter " + name);
    return it->second;
  }

  ad::Tensor linear(const std::string& p, const ad::Tensor& x) const {
    return ad::add(ad::matmul(x, param(p + ".weight")), param(p + ".bias"));
  }

  ad::Tensor bn(const std::string& p, const ad::Tensor& x, const ForwardOptions& opt) const {
    constexpr double eps = 1e-5;
    if (opt.mode == Mode::train) {
      ad::BatchNormStats* rec = opt.record_stats ? &(*opt.record_stats)[p] : nullptr;
      return ad::batch_norm(x, param(p + ".gamma"), param(p + ".beta"), eps, true, rec);
    }
    auto it = stats_.find(p);
    if (it == stats_.end()) throw ContractError("model: batch norm '" + p + "' has no recorded statistics; train first");
    return ad::batch_norm(x, param(p + ".gamma"), param(p + ".beta"), eps, false, nullptr, &it->second);
  }

  // Message multipliers for layer k, or nullopt when ungated.
  std::optional<ad::Tensor> gate(std::size_t k, const ad::Tensor& h, const MessageGraph& mg) const {
    if (!guard_) return std::nullopt;
    return ad::mul(guard_weights(k, h, mg), mg.edge_dst_degree);
  }

  ad::Tensor gcn(const std::string& p, const ad::Tensor& x, const MessageGraph& mg, const std::optional<ad::Tensor>& g) const {
    if (!g) return ad::add(gcn_conv(x, mg, param(p + ".weight")), param(p + ".bias"));
    const ad::Tensor hw = ad::matmul(x, param(p + ".weight"));
    const ad::Tensor msgs = ad::mul(ad::gather_rows(hw, mg.src), ad::mul(*g, mg.gcn_edge));
    const ad::Tensor agg = ad::add(ad::mul(hw, mg.gcn_self), ad::scatter_add_rows(msgs, mg.dst, mg.num_nodes));
    return ad::add(agg, param(p + ".bias"));
  }

  ad::Tensor sage(const std::string& p, const ad::Tensor& x, const MessageGraph& mg, const std::optional<ad::Tensor>& g) const {
    if (!g) return ad::add(sage_conv(x, mg, param(p + ".weight_self"), param(p + ".weight_neigh")), param(p + ".bias"));
    const ad::Tensor msgs = ad::mul(ad::gather_rows(x, mg.src), ad::mul(*g, mg.mean_edge));
    const ad::Tensor neigh = ad::scatter_add_rows(msgs, mg.dst, mg.num_nodes);
    return ad::add(ad::add(ad::matmul(neigh, param(p + ".weight_neigh")), param(p + ".bias")),
                   ad::matmul(x, param(p + ".weight_self")));
  }

  static ad::Tensor gin_aggregate(const ad::Tensor& x, const MessageGraph& mg, const std::optional<ad::Tensor>& g) {
    if (!g) return gnnbench::gin_aggregate(x, mg);
    const ad::Tensor msgs = ad::mul(ad::gather_rows(x, mg.src), *g);
    return ad::add(x, ad::scatter_add_rows(msgs, mg.dst, mg.num_nodes));
  }

  ad::Tensor gat(const std::string& p, const ad::Tensor& x, const MessageGraph& mg, std::size_t heads,
                 const std::optional<ad::Tensor>& g) const {
    std::optional<ad::Tensor> gate_loop;
    if (g) {
      // Messages are listed per destination; insert a unit multiplier at each self-loop slot.
      std::vector<ad::Tensor> parts;
      std::vector<std::size_t> pos;
      const std::size_t E = mg.num_messages();
      std::size_t e = 0;
      for (std::size_t i = 0; i < mg.src_loop->size(); ++i) {
        if ((*mg.src_loop)[i] == (*mg.dst_loop)[i]) {
          pos.push_back(E);  // index of the constant one appended below
        } else {
          pos.push_back(e++);
        }
      }
      const ad::Tensor extended = ad::concat_rows({*g, ad::Tensor::full(1, 1, 1.0)});
      gate_loop = ad::gather_rows(extended, std::move(pos));
    }
    std::vector<ad::Tensor> outs;
    for (std::size_t k = 0; k < heads; ++k) {
      const auto hp = p + ".head" + std::to_string(k);
      outs.push_back(gat_head(x, mg, param(hp + ".weight"), param(hp + ".att_src"), param(hp + ".att_dst"), gate_loop));
    }
    const ad::Tensor cat = heads == 1 ? outs[0] : ad::concat_cols(outs);
    return ad::add(cat, param(p + ".bias"));
  }

  ModelSpec spec_;
  std::map<std::string, ad::Tensor> params_;
  std::map<std::string, ad::Tensor> gate_params_;
  std::map<std::string, ad::BatchNormStats> stats_;
  std::optional<EdgeGuard> guard_;
  std::optional<Denoiser> denoiser_;
};

// ---------------------------------------------------------------------------
// Trained model

struct TrainingMetadata {
  std::size_t epochs = 0;
  double final_loss = 0.0;
  std::vector<double> loss_history;
  std::uint64_t seed = 0;
  std::string defense = "none";
};

struct TrainedModel {
  Model model;
  TrainingMetadata meta;

  std::size_t num_layers() const { return model.num_layers(); }

  // Evaluation-mode log-probabilities for the given graph and feature tensor
  // (the tensor may require grad, e.g. when explaining).
  ad::Tensor log_probs(const Graph& g, const ad::Tensor& features) const {
    const MessageGraph mg(g);
    return model.forward(features, mg).log_probs;
  }
};

inline TrainedModel build_model(const ModelSpec& spec, std::uint64_t seed) {
  TrainedModel m{Model(spec, seed), {}};
  m.meta.seed = seed;
  return m;
}

inline ad::Tensor feature_tensor(const Graph& g) { return ad::Tensor(g.num_nodes(), g.num_features(), g.features()); }

inline ad::Tensor predict(const TrainedModel& m, const Graph& g) {
  if (g.num_features() != m.model.spec().input_size)
    throw ShapeError("predict: graph has " + std::to_string(g.num_features()) + " features, model expects " +
                     std::to_string(m.model.spec().input_size));
  return m.log_probs(g, feature_tensor(g));
}

inline std::vector<int> argmax_rows(const ad::Tensor& t) {
  std::vector<int> out(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < t.cols(); ++c)
      if (t.at(r, c) > t.at(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

inline double accuracy(const TrainedModel& m, const Graph& g, const std::vector<NodeId>& nodes) {
  if (nodes.empty()) return 0.0;
  const auto pred = argmax_rows(predict(m, g));
  std::size_t hit = 0;
  for (NodeId u : nodes) hit += pred[u] == g.labels()[u];
  return static_cast<double>(hit) / static_cast<double>(nodes.size());
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::size_t epochs = 200;
  ad::AdamOptions adam{};
  std::uint64_t seed = 0;
};

// What an additive loss term sees each epoch.
struct HookContext {
  const Model& model;
  const MessageGraph& graph;
  const ad::Tensor& features;  // constant input features
  const std::vector<int>& labels;
  const std::vector<std::size_t>& train_rows;
  const ForwardOutput& base;  // this epoch's forward pass on `features`
  std::size_t epoch;
  const std::vector<double>* denoiser_noise;

  // Training-mode forward pass on other inputs; statistics are not recorded.
  ForwardOutput forward(const ad::Tensor& x) const {
    return model.forward(x, graph, {Mode::train, nullptr, denoiser_noise});
  }
  ad::Tensor base_loss(const ForwardOutput& out) const { return ad::nll_loss(out.log_probs, labels, train_rows); }
};

struct TrainingHook {
  std::string name;
  std::function<ad::Tensor(const HookContext&)> loss;
};

// Base objective on the train rows; defaults to masked NLL of the log-probabilities.
using Objective = std::function<ad::Tensor(const ForwardOutput&, const std::vector<std::size_t>& rows)>;

inline TrainedModel train(TrainedModel m, const Graph& g, const SplitMasks& masks, const TrainOptions& opt,
                          const std::vector<TrainingHook>& hooks = {}, const Objective& objective = {}) {
  if (opt.epochs == 0) throw ParameterError("train: epochs must be at least 1");
  if (g.num_features() != m.model.spec().input_size)
    throw ShapeError("train: graph has " + std::to_string(g.num_features()) + " features, model expects " +
                     std::to_string(m.model.spec().input_size));
  if (masks.train.size() != g.num_nodes()) throw ShapeError("train: split masks do not match the graph");
  std::vector<std::size_t> rows;
  for (NodeId u = 0; u < g.num_nodes(); ++u)
    if (masks.train[u]) rows.push_back(u);
  if (rows.empty()) throw ParameterError("train: empty training set");
  m.model.own_parameters();

  const MessageGraph mg(g);
  const ad::Tensor x = feature_tensor(g);
  std::vector<ad::Tensor> params;
  for (auto& [name, t] : m.model.parameters()) params.push_back(t);
  std::vector<ad::Tensor> gate_params;
  for (auto& [name, t] : m.model.gate_parameters()) gate_params.push_back(t);
  ad::AdamState state{opt.adam, 0, {}, {}};
  ad::AdamState gate_state{opt.adam, 0, {}, {}};
  if (m.model.guard()) gate_state.options.lr = m.model.guard()->lr;

  Rng noise_rng = make_rng(derive_seed(opt.seed, "denoiser-noise"));
  std::vector<double> noise;
  m.meta.loss_history.clear();
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const std::vector<double>* noise_ptr = nullptr;
    if (m.model.denoiser()) {
      noise.resize(x.size());
      for (double& v : noise) v = m.model.denoiser()->noise_std * standard_normal(noise_rng);
      noise_ptr = &noise;
    }
    const ForwardOutput out = m.model.forward(x, mg, {Mode::train, &m.model.batch_norm_stats(), noise_ptr});
    ad::Tensor loss = objective ? objective(out, rows) : ad::nll_loss(out.log_probs, g.labels(), rows);
    const HookContext ctx{m.model, mg, x, g.labels(), rows, out, epoch, noise_ptr};
    for (const auto& hook : hooks) loss = ad::add(loss, hook.loss(ctx));
    const double value = loss.item();
    if (!std::isfinite(value)) throw TrainingError(epoch, "non-finite training loss");
    m.meta.loss_history.push_back(value);
    const ad::Gradients grads = ad::backward(loss);
    ad::adam_step(params, grads, state);
    if (!gate_params.empty() && epoch < m.model.guard()->train_iters) ad::adam_step(gate_params, grads, gate_state);
  }
  m.meta.epochs = opt.epochs;
  m.meta.final_loss = m.meta.loss_history.back();
  // Evaluation statistics come from the final parameters.
  m.model.forward(x, mg, {Mode::train, &m.model.batch_norm_stats(), nullptr});
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON document with the spec, wrappers, metadata, named
// parameters and batch-norm statistics. Arrays are row-major.

inline nlohmann::json checkpoint_json(const TrainedModel& m) {
  using nlohmann::json;
  const auto& s = m.model.spec();
  json j;
  j["format"] = "gnnbench-checkpoint";
  j["version"] = 1;
  j["spec"] = {{"architecture", to_string(s.architecture)},
               {"input_size", s.input_size},
               {"output_size", s.output_size},
               {"hidden", s.hidden},
               {"gat_heads", s.gat_heads}};
  j["metadata"] = {{"seed", m.meta.seed},
                   {"defense", m.meta.defense},
                   {"epochs", m.meta.epochs},
                   {"final_loss", m.meta.final_loss}};
  if (const auto& gd = m.model.guard())
    j["guard"] = {{"attention", gd->attention}, {"drop", gd->drop}, {"lr", gd->lr}, {"train_iters", gd->train_iters},
                  {"initial_threshold", gd->initial_threshold}};
  if (const auto& d = m.model.denoiser())
    j["denoiser"] = {{"hidden_dim", d->hidden_dim}, {"bottleneck_dim", d->bottleneck_dim}, {"noise_std", d->noise_std}};
  auto dump = [](const std::map<std::string, ad::Tensor>& ps) {
    json out = json::object();
    for (const auto& [name, t] : ps) out[name] = {{"rows", t.rows()}, {"cols", t.cols()}, {"data", t.data()}};
    return out;
  };
  j["parameters"] = dump(m.model.parameters());
  j["gate_parameters"] = dump(m.model.gate_parameters());
  json stats = json::object();
  for (const auto& [name, st] : m.model.batch_norm_stats()) stats[name] = {{"mean", st.mean}, {"var", st.var}};
  j["batch_norm"] = stats;
  return j;
}

inline TrainedModel model_from_checkpoint(const nlohmann::json& j) {
  if (j.value("format", "") != "gnnbench-checkpoint") throw ParameterError("checkpoint: unrecognized format");
  ModelSpec spec;
  spec.architecture = parse_architecture(j.at("spec").at("architecture").get<std::string>());
  spec.input_size = j.at("spec").at("input_size").get<std::size_t>();
  spec.output_size = j.at("spec").at("output_size").get<std::size_t>();
  spec.hidden = j.at("spec").at("hidden").get<std::size_t>();
  spec.gat_heads = j.at("spec").at("gat_heads").get<std::size_t>();
  TrainedModel m{Model(spec, 0), {}};
  if (j.contains("guard")) {
    const auto& g = j["guard"];
    m.model.enable_guard({g.at("attention").get<bool>(), g.at("drop").get<bool>(), g.at("lr").get<double>(),
                          g.at("train_iters").get<std::size_t>(), g.at("initial_threshold").get<double>()});
  }
  if (j.contains("denoiser")) {
    const auto& d = j["denoiser"];
    m.model.enable_denoiser({d.at("hidden_dim").get<std::size_t>(), d.at("bottleneck_dim").get<std::size_t>(),
                             d.at("noise_std").get<double>()},
                            0);
  }
  auto load = [](const nlohmann::json& src, std::map<std::string, ad::Tensor>& dst) {
    for (auto& [name, t] : dst) {
      if (!src.contains(name)) throw ParameterError("checkpoint: missing parameter " + name);
      const auto& e = src.at(name);
      auto data = e.at("data").get<std::vector<double>>();
      if (e.at("rows").get<std::size_t>() != t.rows() || e.at("cols").get<std::size_t>() != t.cols())
        throw ShapeError("checkpoint: parameter " + name + " has the wrong shape");
      t.mutable_data() = std::move(data);
    }
  };
  load(j.at("parameters"), m.model.parameters());
  load(j.at("gate_parameters"), m.model.gate_parameters());
  for (const auto& [name, st] : j.at("batch_norm").items())
    m.model.batch_norm_stats()[name] = {st.at("mean").get<std::vector<double>>(), st.at("var").get<std::vector<double>>()};
  const auto& meta = j.at("metadata");
  m.meta.seed = meta.at("seed").get<std::uint64_t>();
  m.meta.defense = meta.at("defense").get<std::string>();
  m.meta.epochs = meta.at("epochs").get<std::size_t>();
  m.meta.final_loss = meta.at("final_loss").get<double>();
  return m;
}

inline void save_checkpoint(const TrainedModel& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << checkpoint_json(m).dump() << '\n';
}

inline TrainedModel load_checkpoint(const std::filesystem::path& path) {
  auto text = text::read_file(path.string());
  if (!text) throw IngestionError(path.string(), "cannot open checkpoint");
  return model_from_checkpoint(nlohmann::json::parse(*text));
}

}  // namespace gnnbench
