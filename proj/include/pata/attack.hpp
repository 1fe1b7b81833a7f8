#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pata/competition.hpp"
#include "pata/metrics.hpp"
#include "pata/model.hpp"

namespace pata {

enum class AttackMethod { decoder_attack, pata, pata_plus, pata_plus_plus };
enum class FeatureLossKind { mse, cosine, huber };
enum class GradTransform { none, mi, ti };

inline bool is_encoder_method(AttackMethod m) noexcept { return m != AttackMethod::decoder_attack; }
inline bool is_regularized(AttackMethod m) noexcept {
  return m == AttackMethod::pata_plus || m == AttackMethod::pata_plus_plus;
}

struct AttackConfig {
  AttackMethod method = AttackMethod::pata;
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int iterations = 200;
  FeatureLossKind feature_loss = FeatureLossKind::mse;
  double lambda_reg = 0.01;
  double thres_pos = 40.0;
  double thres_neg = -10.0;
  int train_prompts = 1;
  CompetitionSpec competition;
  GradTransform grad_transform = GradTransform::none;
  double mi_decay = 1.0;
  int ti_kernel_size = 7;
  double ti_sigma = 3.0;
  std::uint64_t seed = 0;

  MixMode mix_mode = MixMode::sum_clamp;
  /// Competitors (M) in the logged fd estimate; 0 disables fd logging.
  int fd_samples = 8;
  /// fd is logged every fd_every iterations and always at the last one.
  int fd_every = 1;
  /// Competition source for the fd probe. Unset: external pool when one is
  /// loaded, self patches otherwise.
  std::optional<CompetitionSpec> fd_competition;

  /// Source implied by the method when `competition.source` is unset.
  CompetitionSource default_competition_source() const noexcept {
    return method == AttackMethod::pata_plus ? CompetitionSource::external_images : CompetitionSource::self_patches;
  }

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be finite and >= 0");
    if (!(step_size > 0.0)) throw ConfigError("step_size must be > 0");
    if (epsilon > 0.0 && step_size > epsilon) throw ConfigError("step_size must not exceed epsilon");
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (!(lambda_reg >= 0.0)) throw ConfigError("lambda_reg must be >= 0");
    if (!(thres_neg < 0.0 && thres_pos > 0.0)) throw ConfigError("thresholds must satisfy thres_neg < 0 < thres_pos");
    if (method == AttackMethod::decoder_attack && train_prompts < 1) throw ConfigError("train_prompts must be >= 1");
    if (grad_transform == GradTransform::mi && !(mi_decay >= 0.0)) throw ConfigError("mi_decay must be >= 0");
    if (grad_transform == GradTransform::ti && (ti_kernel_size < 1 || ti_kernel_size % 2 == 0 || !(ti_sigma > 0.0))) {
      throw ConfigError("ti_kernel_size must be odd and >= 1, ti_sigma > 0");
    }
    if (fd_samples < 0 || fd_every < 1) throw ConfigError("fd_samples must be >= 0 and fd_every >= 1");
    if (is_regularized(method)) competition.validate(default_competition_source());
  }
};

struct IterationRecord {
  int iter = 0;
  double total_loss = 0.0;
  double feature_loss = 0.0;
  double reg_loss = 0.0;
  std::optional<double> fd_estimate;
};

struct AttackResult {
  ImageTensor adv_image;
  /// Entries 0..T: entry t is measured at the image after t steps.
  std::vector<IterationRecord> per_iteration;
  AttackConfig config_echo;
  std::chrono::duration<double> elapsed{};
};

/// Observation points used by experiments and tests.
struct AttackHooks {
  /// Called for every prompt that enters a loss during optimization.
  std::function<void(const Prompt&)> on_loss_prompt;
};

// --- projection and steps ------------------------------------------------

/// Clamp to the l_inf ball, then to the pixel domain around `clean`.
inline PixelArray project(PixelArray delta, double epsilon, const ImageTensor& clean) {
  require_same_shape(delta, clean, "project");
  for (std::size_t i = 0; i < delta.size(); ++i) {
    double d = std::clamp(delta.data[i], -epsilon, epsilon);
    d = std::clamp(d, -clean.data[i], 1.0 - clean.data[i]);
    delta.data[i] = d;
  }
  return delta;
}

inline double sign(double v) noexcept { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// Signed descent step followed by projection.
inline PixelArray pgd_step(const PixelArray& delta, const PixelArray& grad, const AttackConfig& config,
                           const ImageTensor& clean, int iteration = -1) {
  require_same_shape(delta, grad, "pgd_step");
  if (!grad.all_finite()) throw NumericalError("non-finite gradient in pgd_step", iteration);
  PixelArray next = delta;
  for (std::size_t i = 0; i < next.size(); ++i) next.data[i] -= config.step_size * sign(grad.data[i]);
  return project(std::move(next), config.epsilon, clean);
}

inline ImageTensor apply_perturbation(const ImageTensor& clean, const PixelArray& delta) {
  ImageTensor adv = clean;
  for (std::size_t i = 0; i < adv.size(); ++i) adv.data[i] = std::clamp(clean.data[i] + delta.data[i], 0.0, 1.0);
  return adv;
}

// --- losses --------------------------------------------------------------

/// Target value per pixel: thres_pos where the target logit is positive, thres_neg elsewhere.
inline MaskLogits clip_targets(const MaskLogits& logits_target, double thres_pos, double thres_neg) {
  MaskLogits t(logits_target.height, logits_target.width, 1);
  for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = logits_target.data[i] > 0.0 ? thres_pos : thres_neg;
  return t;
}

/// Mean over pixels of (logits_adv - clip_target)^2.
inline double clip_mse_loss(const MaskLogits& logits_adv, const MaskLogits& logits_target, double thres_pos,
                            double thres_neg) {
  require_same_shape(logits_adv, logits_target, "clip_mse_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < logits_adv.size(); ++i) {
    const double t = logits_target.data[i] > 0.0 ? thres_pos : thres_neg;
    const double r = logits_adv.data[i] - t;
    s += r * r;
  }
  return s / static_cast<double>(logits_adv.size());
}

struct FeatureLossValue {
  double value = 0.0;
  EmbeddingGrid grad;
};

inline constexpr double kHuberDelta = 1.0;

/// Loss between adversarial and target embeddings, with gradient w.r.t. e_adv.
/// mse and huber vanish iff the grids are equal; cosine vanishes iff they are
/// positively parallel.
inline FeatureLossValue feature_loss_with_grad(const EmbeddingGrid& e_adv, const EmbeddingGrid& e_target,
                                               FeatureLossKind kind) {
  require_same_shape(e_adv, e_target, "feature_loss");
  const std::size_t n = e_adv.size();
  FeatureLossValue out{0.0, EmbeddingGrid(e_adv.height, e_adv.width, e_adv.channels)};
  switch (kind) {
    case FeatureLossKind::mse:
      for (std::size_t i = 0; i < n; ++i) {
        const double r = e_adv.data[i] - e_target.data[i];
        out.value += r * r;
        out.grad.data[i] = 2.0 * r / static_cast<double>(n);
      }
      out.value /= static_cast<double>(n);
      break;
    case FeatureLossKind::huber:
      for (std::size_t i = 0; i < n; ++i) {
        const double r = e_adv.data[i] - e_target.data[i];
        const double a = std::abs(r);
        out.value += a <= kHuberDelta ? 0.5 * r * r : kHuberDelta * (a - 0.5 * kHuberDelta);
        out.grad.data[i] = (a <= kHuberDelta ? r : kHuberDelta * sign(r)) / static_cast<double>(n);
      }
      out.value /= static_cast<double>(n);
      break;
    case FeatureLossKind::cosine: {
      out.value = 1.0 - cosine_similarity(e_adv.values(), e_target.values());
      const auto g = cosine_similarity_grad(e_adv.values(), e_target.values());
      for (std::size_t i = 0; i < n; ++i) out.grad.data[i] = -g[i];
      break;
    }
  }
  return out;
}

inline double feature_loss(const EmbeddingGrid& e_adv, const EmbeddingGrid& e_target, FeatureLossKind kind) {
  return feature_loss_with_grad(e_adv, e_target, kind).value;
}

/// -fd(adv, competition); minimizing it raises the adversarial image's feature dominance.
inline double dominance_reg_loss(const SegModel& model, const ImageTensor& adv, const ImageTensor& competition,
                                 MixMode mode = MixMode::sum_clamp) {
  const EmbeddingGrid f_adv = encode_image(model, adv);
  const EmbeddingGrid f_com = encode_image(model, competition);
  const EmbeddingGrid f_mix = encode_image(model, mix_images(adv, competition, mode));
  return -feature_dominance(f_adv, f_com, f_mix);
}

struct RegGradient {
  double value = 0.0;
  /// Gradient reaching the pixels through f_adv (to be merged with the feature term).
  EmbeddingGrid d_f_adv;
  /// Gradient reaching the pixels through the mixed image.
  PixelArray d_pixels_via_mix;
};

/// -fd and its gradient for one competition image, given f_adv = E(adv).
inline RegGradient dominance_reg_gradient(const SegModel& model, const ImageTensor& adv, const EmbeddingGrid& f_adv,
                                          const ImageTensor& competition, MixMode mode) {
  const EmbeddingGrid f_com = encode_image(model, competition);
  const ImageTensor mixed = mix_images(adv, competition, mode);
  const EmbeddingGrid f_mix = encode_image(model, mixed);

  RegGradient out;
  out.value = -feature_dominance(f_adv, f_com, f_mix);
  out.d_f_adv = EmbeddingGrid(f_adv.height, f_adv.width, f_adv.channels);
  const auto g_adv = cosine_similarity_grad(f_adv.values(), f_mix.values());
  for (std::size_t i = 0; i < g_adv.size(); ++i) out.d_f_adv.data[i] = -g_adv[i];

  EmbeddingGrid d_mix(f_mix.height, f_mix.width, f_mix.channels);
  const auto g_mix_adv = cosine_similarity_grad(f_mix.values(), f_adv.values());
  const auto g_mix_com = cosine_similarity_grad(f_mix.values(), f_com.values());
  for (std::size_t i = 0; i < d_mix.size(); ++i) d_mix.data[i] = -(g_mix_adv[i] - g_mix_com[i]);

  out.d_pixels_via_mix = model.encode_vjp(mixed, d_mix);
  const auto jac = mix_jacobian(adv, competition, mode);
  for (std::size_t i = 0; i < jac.size(); ++i) out.d_pixels_via_mix.data[i] *= jac[i];
  return out;
}

// --- gradient transforms -------------------------------------------------

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
inline std::vector<double> gaussian_taps(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size));
  const int r = size / 2;
  double s = 0.0;
  for (int i = 0; i < size; ++i) {
    const double x = i - r;
    k[static_cast<std::size_t>(i)] = std::exp(-0.5 * x * x / (sigma * sigma));
    s += k[static_cast<std::size_t>(i)];
  }
  for (double& v : k) v /= s;
  return k;
}

inline int reflect_index(int i, int n) noexcept {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

/// Per-channel 2-D Gaussian smoothing with reflective padding.
inline PixelArray gaussian_smooth(const PixelArray& g, int size, double sigma) {
  if (size == 1) return g;
  const auto k = gaussian_taps(size, sigma);
  const int r = size / 2;
  PixelArray tmp(g.height, g.width, g.channels), out(g.height, g.width, g.channels);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x)
      for (int c = 0; c < g.channels; ++c) {
        double s = 0.0;
        for (int t = -r; t <= r; ++t) s += k[static_cast<std::size_t>(t + r)] * g.at(y, reflect_index(x + t, g.width), c);
        tmp.at(y, x, c) = s;
      }
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x)
      for (int c = 0; c < g.channels; ++c) {
        double s = 0.0;
        for (int t = -r; t <= r; ++t) s += k[static_cast<std::size_t>(t + r)] * tmp.at(reflect_index(y + t, g.height), x, c);
        out.at(y, x, c) = s;
      }
  return out;
}

/// Momentum buffer for MI; empty until the first mi step.
struct TransformState {
  PixelArray momentum;
};

inline std::pair<PixelArray, TransformState> transform_gradient(const PixelArray& grad, TransformState state,
                                                                const AttackConfig& config) {
  if (!grad.all_finite()) throw NumericalError("non-finite gradient in transform_gradient");
  switch (config.grad_transform) {
    case GradTransform::none:
      return {grad, std::move(state)};
    case GradTransform::ti:
      return {gaussian_smooth(grad, config.ti_kernel_size, config.ti_sigma), std::move(state)};
    case GradTransform::mi: {
      if (state.momentum.size() == 0) state.momentum = PixelArray(grad.height, grad.width, grad.channels);
      double l1 = 0.0;
      for (double v : grad.data) l1 += std::abs(v);
      for (std::size_t i = 0; i < grad.size(); ++i) {
        state.momentum.data[i] = config.mi_decay * state.momentum.data[i] + (l1 > 0.0 ? grad.data[i] / l1 : 0.0);
      }
      return {state.momentum, std::move(state)};
    }
  }
  return {grad, std::move(state)};
}

// --- attack loop ---------------------------------------------------------

namespace detail {

inline std::vector<ImageTensor> draw_fd_competitors(const ImageTensor& clean, const AttackConfig& config) {
  CompetitionSpec spec;
  if (config.fd_competition) {
    spec = *config.fd_competition;
  } else {
    spec.patch_scale_range = config.competition.patch_scale_range;
    spec.pool_images = config.competition.pool_images;
    spec.source = spec.pool_images.empty() ? CompetitionSource::self_patches : CompetitionSource::external_images;
  }
  Rng rng(config.seed ^ 0xfd5eed0000000001ULL);
  std::vector<ImageTensor> out;
  for (int i = 0; i < config.fd_samples; ++i) {
    out.push_back(sample_competition(clean, spec, rng, CompetitionSource::self_patches));
  }
  return out;
}

}  // namespace detail

/// Runs one targeted attack of `clean` toward `target`.
///
/// decoder_attack minimizes the mean ClipMSE over `prompts`; the encoder
/// methods minimize the feature loss to the target embedding and ignore
/// `prompts`. pata_plus adds lambda * mean(-fd) over count_per_iter pool
/// images per step; pata_plus_plus draws one fresh self patch per step.
inline AttackResult run_attack(const SegModel& model, const ImageTensor& clean, const ImageTensor& target,
                               std::span<const Prompt> prompts, const AttackConfig& config,
                               const AttackHooks* hooks = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  config.validate();
  require_model_resolution(model, clean);
  require_model_resolution(model, target);
  require_pixel_domain(clean);
  require_pixel_domain(target);
  const Resolution res = model.input_resolution();
  const bool encoder = is_encoder_method(config.method);
  if (!encoder && prompts.empty()) throw ConfigError("decoder_attack requires at least one prompt");
  if (!encoder) {
    for (const auto& p : prompts) require_prompt_in_bounds(p, res.height, res.width);
  }

  EmbeddingGrid target_embedding;
  std::vector<MaskLogits> clip_target;
  if (encoder) {
    target_embedding = encode_image(model, target);
  } else {
    const EmbeddingGrid e = encode_image(model, target);
    for (const auto& p : prompts) clip_target.push_back(clip_targets(model.decode(e, p), config.thres_pos, config.thres_neg));
  }

  std::optional<FdProbe> probe;
  if (encoder && config.fd_samples > 0) probe.emplace(model, detail::draw_fd_competitors(clean, config), config.mix_mode);

  const CompetitionSource reg_source = config.competition.resolved_source(config.default_competition_source());
  const int reg_draws = config.method == AttackMethod::pata_plus_plus ? 1 : config.competition.count_per_iter;
  Rng rng(config.seed);

  AttackResult result;
  result.config_echo = config;
  PixelArray delta(clean.height, clean.width, clean.channels);
  TransformState tstate;
  const int T = config.iterations;

  for (int it = 0; it <= T; ++it) {
    const ImageTensor adv = apply_perturbation(clean, delta);
    const bool need_grad = it < T;
    const EmbeddingGrid f_adv = encode_image(model, adv);
    IterationRecord rec;
    rec.iter = it;
    EmbeddingGrid d_f_adv;
    PixelArray extra_grad;

    if (encoder) {
      FeatureLossValue fl = feature_loss_with_grad(f_adv, target_embedding, config.feature_loss);
      rec.feature_loss = fl.value;
      d_f_adv = std::move(fl.grad);
      if (is_regularized(config.method)) {
        double reg = 0.0;
        for (int r = 0; r < reg_draws; ++r) {
          const ImageTensor com = sample_competition(clean, config.competition, rng, reg_source);
          if (config.lambda_reg > 0.0 && need_grad) {
            RegGradient rg = dominance_reg_gradient(model, adv, f_adv, com, config.mix_mode);
            reg += rg.value;
            const double w = config.lambda_reg / reg_draws;
            for (std::size_t i = 0; i < d_f_adv.size(); ++i) d_f_adv.data[i] += w * rg.d_f_adv.data[i];
            if (extra_grad.size() == 0) extra_grad = PixelArray(clean.height, clean.width, clean.channels);
            for (std::size_t i = 0; i < extra_grad.size(); ++i) extra_grad.data[i] += w * rg.d_pixels_via_mix.data[i];
          } else {
            reg += dominance_reg_loss(model, adv, com, config.mix_mode);
          }
        }
        rec.reg_loss = reg / reg_draws;
      }
      rec.total_loss = rec.feature_loss + config.lambda_reg * rec.reg_loss;
      if (probe && (it % config.fd_every == 0 || it == T)) rec.fd_estimate = probe->evaluate(adv, f_adv);
    } else {
      std::vector<MaskLogits> d_logits;
      const double norm = 1.0 / (static_cast<double>(res.height) * res.width * static_cast<double>(prompts.size()));
      double loss = 0.0;
      for (std::size_t k = 0; k < prompts.size(); ++k) {
        if (hooks && hooks->on_loss_prompt) hooks->on_loss_prompt(prompts[k]);
        const MaskLogits logits = model.decode(f_adv, prompts[k]);
        MaskLogits d(logits.height, logits.width, 1);
        for (std::size_t i = 0; i < logits.size(); ++i) {
          const double r = logits.data[i] - clip_target[k].data[i];
          loss += r * r;
          d.data[i] = 2.0 * r * norm;
        }
        d_logits.push_back(std::move(d));
      }
      rec.feature_loss = loss * norm;
      rec.total_loss = rec.feature_loss;
      if (need_grad) d_f_adv = model.decode_vjp_sum(f_adv, prompts, d_logits);
    }

    if (!std::isfinite(rec.total_loss)) throw NumericalError("non-finite attack loss", it);
    result.per_iteration.push_back(rec);
    if (!need_grad) break;

    PixelArray grad = model.encode_vjp(adv, d_f_adv);
    if (extra_grad.size() != 0) {
      for (std::size_t i = 0; i < grad.size(); ++i) grad.data[i] += extra_grad.data[i];
    }
    if (!grad.all_finite()) throw NumericalError("non-finite attack gradient", it);
    auto [g, st] = transform_gradient(grad, std::move(tstate), config);
    tstate = std::move(st);
    delta = pgd_step(delta, g, config, clean, it);
  }

  result.adv_image = apply_perturbation(clean, delta);
  result.elapsed = std::chrono::steady_clock::now() - t0;
  return result;
}

}  // namespace pata
