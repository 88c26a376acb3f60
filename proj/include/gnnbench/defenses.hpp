#pragma once

// Defense methods. Jaccard pruning and feature quantization transform the
// graph before training; edge gating and the autoencoder wrap the model;
// gradient regularization and adversarial training add loss terms;
// distillation retrains a student on a teacher's soft labels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "graph.hpp"
#include "models.hpp"
#include "text.hpp"

namespace gnnbench {

enum class DefenseId { none, jaccard, gnnguard, grad_reg, distillation, adv_training, quantization, autoencoder };

inline const std::vector<std::pair<DefenseId, std::string>>& defense_names() {
  static const std::vector<std::pair<DefenseId, std::string>> names{
      {DefenseId::none, "none"},
      {DefenseId::jaccard, "jaccard"},
      {DefenseId::gnnguard, "gnnguard"},
      {DefenseId::grad_reg, "grad-reg"},
      {DefenseId::distillation, "distillation"},
      {DefenseId::adv_training, "adv-training"},
      {DefenseId::quantization, "quantization"},
      {DefenseId::autoencoder, "autoencoder"}};
  return names;
}

inline std::string to_string(DefenseId d) {
  for (const auto& [k, v] : defense_names())
    if (k == d) return v;
  return "unknown";
}

inline DefenseId parse_defense(const std::string& s) {
  for (const auto& [k, v] : defense_names())
    if (v == s) return k;
  throw ConfigError("unknown defense '" + s + "'");
}

enum class DefenseStage { none, poison, evasion };

inline DefenseStage stage_of(DefenseId d) {
  switch (d) {
    case DefenseId::none:
      return DefenseStage::none;
    case DefenseId::jaccard:
    case DefenseId::gnnguard:
      return DefenseStage::poison;
    default:
      return DefenseStage::evasion;
  }
}

struct DefenseConfig {
  DefenseId id = DefenseId::none;
  double jaccard_threshold = 0.4;
  EdgeGuard guard{};
  double grad_reg_lambda = 50.0;
  double grad_reg_step = 0.01;
  double distillation_temperature = 5.0;
  std::string adv_attack = "fgsm";
  double adv_epsilon = 0.01;
  double adv_lambda = 1.0;
  std::size_t quantization_levels = 8;
  Denoiser autoencoder{};
  double autoencoder_weight = 0.1;
};

// Applies one `defense.<key> = value` setting. Returns false for unknown keys.
inline bool set_defense_option(DefenseConfig& c, const std::string& key, const std::string& value) {
  auto num = [&](double lo) {
    auto v = text::parse_double(value);
    if (!v || !std::isfinite(*v) || *v < lo) throw ConfigError("defense option " + key + ": invalid value '" + value + "'");
    return *v;
  };
  auto count = [&](std::size_t lo) {
    auto v = text::parse_int<std::int64_t>(value);
    if (!v || *v < static_cast<std::int64_t>(lo))
      throw ConfigError("defense option " + key + ": invalid value '" + value + "'");
    return static_cast<std::size_t>(*v);
  };
  auto flag = [&]() {
    if (value == "true") return true;
    if (value == "false") return false;
    throw ConfigError("defense option " + key + ": expected true or false, got '" + value + "'");
  };
  if (key == "jaccard.threshold") c.jaccard_threshold = num(0.0);
  else if (key == "gnnguard.lr") c.guard.lr = num(0.0);
  else if (key == "gnnguard.attention") c.guard.attention = flag();
  else if (key == "gnnguard.drop") c.guard.drop = flag();
  else if (key == "gnnguard.train_iters") c.guard.train_iters = count(0);
  else if (key == "gnnguard.initial_threshold") c.guard.initial_threshold = num(0.0);
  else if (key == "grad_reg.lambda") c.grad_reg_lambda = num(0.0);
  else if (key == "grad_reg.step") c.grad_reg_step = num(0.0);
  else if (key == "distillation.temperature") {
    c.distillation_temperature = num(0.0);
    if (c.distillation_temperature == 0.0) throw ConfigError("defense option " + key + ": temperature must be positive");
  } else if (key == "adv_training.attack") {
    if (value != "fgsm") throw ConfigError("defense option adv_training.attack: only 'fgsm' is supported");
    c.adv_attack = value;
  } else if (key == "adv_training.epsilon") c.adv_epsilon = num(0.0);
  else if (key == "adv_training.lambda") c.adv_lambda = num(0.0);
  else if (key == "quantization.num_levels") c.quantization_levels = count(2);
  else if (key == "autoencoder.hidden_dim") c.autoencoder.hidden_dim = count(1);
  else if (key == "autoencoder.bottleneck_dim") c.autoencoder.bottleneck_dim = count(1);
  else if (key == "autoencoder.reconstruction_weight") c.autoencoder_weight = num(0.0);
  else if (key == "autoencoder.noise_std") c.autoencoder.noise_std = num(0.0);
  else return false;
  return true;
}

// ---------------------------------------------------------------------------
// Graph transforms

inline double jaccard_similarity(std::span<const double> a, std::span<const double> b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const bool x = a[j] > 0, y = b[j] > 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline Graph jaccard_defense(const Graph& g, double threshold) {
  std::vector<Edge> kept;
  for (const Edge& e : g.edges())
    if (jaccard_similarity(g.feature_row(e.u), g.feature_row(e.v)) >= threshold) kept.push_back(e);
  return g.with_edges(std::move(kept));
}

// Snaps each column to the nearest of `levels` equally spaced points on [min, max].
inline std::vector<double> quantize_features(const std::vector<double>& x, std::size_t rows, std::size_t cols,
                                             std::size_t levels) {
  if (levels < 2) throw ParameterError("quantize_features: need at least 2 levels");
  if (x.size() != rows * cols) throw ShapeError("quantize_features: data does not match shape");
  std::vector<double> out = x;
  for (std::size_t j = 0; j < cols; ++j) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t i = 0; i < rows; ++i) {
      lo = std::min(lo, x[i * cols + j]);
      hi = std::max(hi, x[i * cols + j]);
    }
    if (!(hi > lo)) continue;
    const double steps = static_cast<double>(levels - 1);
    const double step = (hi - lo) / steps;
    for (std::size_t i = 0; i < rows; ++i) {
      const double k = std::clamp(std::floor((x[i * cols + j] - lo) / step + 0.5), 0.0, steps);
      out[i * cols + j] = k == steps ? hi : lo + k * step;
    }
  }
  return out;
}

inline Graph quantize_graph(const Graph& g, std::size_t levels) {
  return g.with_features(quantize_features(g.features(), g.num_nodes(), g.num_features(), levels));
}

// ---------------------------------------------------------------------------
// Loss terms

namespace detail {

// Gradient of the base loss with respect to the input features, as a constant.
inline std::vector<double> input_gradient(const HookContext& ctx) {
  const ad::Tensor leaf(ctx.features.rows(), ctx.features.cols(), ctx.features.data(), true);
  const ForwardOutput out = ctx.forward(leaf);
  return ad::backward(ctx.base_loss(out)).of(leaf);
}

}  // namespace detail

// z = x + h * g / ||g||, or nullopt when g vanishes.
inline std::optional<std::vector<double>> gradient_step(const std::vector<double>& x, const std::vector<double>& g,
                                                        double h) {
  double norm = 0;
  for (double v : g) norm += v * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) return std::nullopt;
  std::vector<double> z = x;
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += h * g[i] / norm;
  return z;
}

// lambda / (h^2 n) * ||f(z) - f(x)||^2 over the train rows, with
// z = x + h * g / ||g|| and f the class probabilities.
inline TrainingHook grad_reg_hook(double lambda, double h) {
  return {"grad-reg", [lambda, h](const HookContext& ctx) {
            auto z = gradient_step(ctx.features.data(), detail::input_gradient(ctx), h);
            if (!z) return ad::Tensor::scalar(0.0);
            const ForwardOutput fz = ctx.forward(ad::Tensor(ctx.features.rows(), ctx.features.cols(), std::move(*z)));
            const auto rows = std::make_shared<const std::vector<std::size_t>>(ctx.train_rows);
            const ad::Tensor diff =
                ad::gather_rows(ad::sub(ad::exp(fz.log_probs), ad::exp(ctx.base.log_probs)), rows);
            const double n = static_cast<double>(ctx.train_rows.size());
            return ad::scale(ad::squared_l2_norm(diff), lambda / (h * h * n));
          }};
}

// FGSM adversarial example x' = x + eps * sign(grad); returns lambda * l(f(x'), y).
inline std::vector<double> fgsm_features(const std::vector<double>& x, const std::vector<double>& grad, double eps) {
  std::vector<double> out = x;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] += eps * static_cast<double>((grad[i] > 0) - (grad[i] < 0));
  return out;
}

inline TrainingHook adv_training_hook(double eps, double lambda) {
  return {"adv-training", [eps, lambda](const HookContext& ctx) {
            const std::vector<double> g = detail::input_gradient(ctx);
            const ad::Tensor xa(ctx.features.rows(), ctx.features.cols(), fgsm_features(ctx.features.data(), g, eps));
            return ad::scale(ctx.base_loss(ctx.forward(xa)), lambda);
          }};
}

// weight * ||x_AE - x||_1 / (n d)
inline TrainingHook autoencoder_hook(double weight) {
  return {"autoencoder", [weight](const HookContext& ctx) {
            if (!ctx.base.reconstruction) throw ContractError("autoencoder hook: model has no denoiser");
            const double nd = static_cast<double>(ctx.features.size());
            return ad::scale(ad::l1_norm(ad::sub(*ctx.base.reconstruction, ctx.features)), weight / nd);
          }};
}

// ---------------------------------------------------------------------------
// Distillation

// Teacher soft labels softmax(z / T), computed from log-probabilities (the
// softmax is invariant to the per-row shift that separates them from logits).
inline ad::Tensor soft_labels(const ad::Tensor& log_probs, double temperature) {
  if (!(temperature > 0)) throw ParameterError("distillation: temperature must be positive");
  return ad::softmax(log_probs.detach(), temperature);
}

inline Objective distillation_objective(ad::Tensor targets, double temperature) {
  if (!(temperature > 0)) throw ParameterError("distillation: temperature must be positive");
  return [targets = std::move(targets), temperature](const ForwardOutput& out, const std::vector<std::size_t>& rows) {
    return ad::soft_cross_entropy(ad::log_softmax(ad::scale(out.log_probs, 1.0 / temperature)), targets, rows);
  };
}

inline TrainedModel distillation_defense(const TrainedModel& teacher, const Graph& g, const SplitMasks& masks,
                                         double temperature, std::uint64_t init_seed, const TrainOptions& opt) {
  const ad::Tensor targets = soft_labels(predict(teacher, g), temperature);
  TrainedModel student = build_model(teacher.model.spec(), init_seed);
  return train(std::move(student), g, masks, opt, {}, distillation_objective(targets, temperature));
}

// ---------------------------------------------------------------------------
// Full pipeline

struct DefendedModel {
  TrainedModel model;
  Graph graph;  // the graph the model was trained on and is explained on
};

inline DefendedModel train_defended(const DefenseConfig& cfg, const ModelSpec& spec, const Graph& g,
                                    const SplitMasks& masks, std::uint64_t init_seed, const TrainOptions& opt) {
  DefendedModel out{build_model(spec, init_seed), g};
  std::vector<TrainingHook> hooks;
  switch (cfg.id) {
    case DefenseId::none:
      break;
    case DefenseId::jaccard:
      out.graph = jaccard_defense(g, cfg.jaccard_threshold);
      break;
    case DefenseId::quantization:
      out.graph = quantize_graph(g, cfg.quantization_levels);
      break;
    case DefenseId::gnnguard:
      out.model.model.enable_guard(cfg.guard);
      break;
    case DefenseId::grad_reg:
      hooks.push_back(grad_reg_hook(cfg.grad_reg_lambda, cfg.grad_reg_step));
      break;
    case DefenseId::adv_training:
      hooks.push_back(adv_training_hook(cfg.adv_epsilon, cfg.adv_lambda));
      break;
    case DefenseId::autoencoder:
      out.model.model.enable_denoiser(cfg.autoencoder, derive_seed(init_seed, "autoencoder"));
      hooks.push_back(autoencoder_hook(cfg.autoencoder_weight));
      break;
    case DefenseId::distillation: {
      const TrainedModel teacher = train(out.model, g, masks, opt);
      out.model = distillation_defense(teacher, g, masks, cfg.distillation_temperature, init_seed, opt);
      out.model.meta.defense = to_string(cfg.id);
      return out;
    }
  }
  out.model = train(std::move(out.model), out.graph, masks, opt, hooks);
  out.model.meta.defense = to_string(cfg.id);
  return out;
}

}  // namespace gnnbench
