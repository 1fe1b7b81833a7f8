#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "pata/toy_model.hpp"
#include "pata/synth.hpp"

namespace pata {

/// Settings for the supervised shape fit applied on top of random initialization.
struct RefineConfig {
  int steps = 300;
  int batch_images = 4;
  int prompts_per_image = 4;
  double learning_rate = 2e-3;
  double box_fraction = 0.25;
  std::uint64_t data_seed = 1'000'003;
};

struct RefineProgress {
  int step = 0;
  double loss = 0.0;
};

namespace detail {

inline double softplus(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }
inline double sigmoid(double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

struct LabeledPrompt {
  Prompt prompt;
  int label = 0;
};

inline LabeledPrompt draw_training_prompt(const SyntheticScene& scene, double box_fraction, std::mt19937_64& rng) {
  const int h = scene.image.height, w = scene.image.width;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  if (scene.objects > 0 && u01(rng) < box_fraction) {
    const int label = 1 + static_cast<int>(u01(rng) * scene.objects) % scene.objects;
    int x1 = w, y1 = h, x2 = 0, y2 = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (scene.labels[static_cast<std::size_t>(y) * w + x] == label) {
          x1 = std::min(x1, x), y1 = std::min(y1, y), x2 = std::max(x2, x + 1), y2 = std::max(y2, y + 1);
        }
    if (x2 > x1 && y2 > y1) return {BoxPrompt{x1, y1, x2, y2}, label};
  }
  std::uniform_int_distribution<int> ux(0, w - 1), uy(0, h - 1);
  const int x = ux(rng), y = uy(rng);
  return {PointPrompt{x, y}, scene.labels[static_cast<std::size_t>(y) * w + x]};
}

}  // namespace detail

/// Fits the encoder of `model` so that prompted masks follow shape labels of
/// synthetic scenes (logistic loss per pixel, Adam). The decoder stays fixed.
/// Deterministic given the config and the model's initial weights.
inline void refine_toy_model(ToyModel& model, const RefineConfig& cfg,
                             const std::function<void(const RefineProgress&)>& progress = {}) {
  if (cfg.steps < 0 || cfg.batch_images < 1 || cfg.prompts_per_image < 1 || !(cfg.learning_rate > 0.0))
    throw ConfigError("invalid refine settings");
  std::vector<NamedTensor> params = model.parameters();
  const std::size_t n_enc = model.decoder_parameter_offset();
  std::vector<std::vector<double>> m1, m2;
  for (const auto& p : params) m1.emplace_back(p.data.size(), 0.0), m2.emplace_back(p.data.size(), 0.0);
  const Resolution res = model.input_resolution();
  std::mt19937_64 rng(cfg.data_seed);
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<std::vector<double>> grads;
    for (const auto& p : params) grads.emplace_back(p.data.size(), 0.0);
    double loss = 0.0;
    const double norm = 1.0 / (static_cast<double>(cfg.batch_images) * cfg.prompts_per_image * res.height * res.width);
    for (int b = 0; b < cfg.batch_images; ++b) {
      const SyntheticScene scene = synthetic_scene(res.height, res.width, rng());
      const EmbeddingGrid emb = model.encode(scene.image);
      std::vector<Prompt> prompts;
      std::vector<MaskLogits> d_logits;
      for (int k = 0; k < cfg.prompts_per_image; ++k) {
        const auto lp = detail::draw_training_prompt(scene, cfg.box_fraction, rng);
        MaskLogits logits = model.decode(emb, lp.prompt);
        for (std::size_t i = 0; i < logits.data.size(); ++i) {
          const double y = scene.labels[i] == lp.label ? 1.0 : 0.0;
          const double z = logits.data[i];
          loss += (detail::softplus(z) - y * z) * norm;
          logits.data[i] = (detail::sigmoid(z) - y) * norm;
        }
        prompts.push_back(lp.prompt);
        d_logits.push_back(std::move(logits));
      }
      const EmbeddingGrid d_emb = model.decode_vjp_sum(emb, prompts, d_logits);
      model.accumulate_encoder_gradients(scene.image, d_emb, grads);
    }
    const double c1 = 1.0 - std::pow(beta1, step), c2 = 1.0 - std::pow(beta2, step);
    for (std::size_t t = 0; t < n_enc; ++t) {
      for (std::size_t i = 0; i < grads[t].size(); ++i) {
        const double g = grads[t][i];
        m1[t][i] = beta1 * m1[t][i] + (1.0 - beta1) * g;
        m2[t][i] = beta2 * m2[t][i] + (1.0 - beta2) * g * g;
        params[t].data[i] -= cfg.learning_rate * (m1[t][i] / c1) / (std::sqrt(m2[t][i] / c2) + eps);
      }
    }
    model.set_parameters(params);
    if (progress) progress({step, loss});
  }
}

}  // namespace pata
