#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pata/attack.hpp"
#include "pata/errors.hpp"
#include "pata/metrics.hpp"
#include "pata/model.hpp"
#include "pata/prompt.hpp"

namespace pata {

enum class PromptRole { train, test, grid };

inline const char* to_string(PromptRole r) noexcept {
  switch (r) {
    case PromptRole::train: return "train";
    case PromptRole::test: return "test";
    case PromptRole::grid: return "grid";
  }
  return "?";
}

struct PromptSet {
  std::vector<Prompt> prompts;
  PromptRole role = PromptRole::test;
  std::uint64_t seed = 0;
  std::string id;

  std::size_t size() const noexcept { return prompts.size(); }
  bool operator==(const PromptSet&) const = default;
};

/// Throws InputError if any prompt of `set` falls outside an h x w image.
inline void require_prompts_in_bounds(const PromptSet& set, int height, int width) {
  for (const auto& p : set.prompts) require_prompt_in_bounds(p, height, width);
}

/// n distinct points drawn uniformly over the pixel grid. Points listed in
/// `exclude` are never returned, so a training set drawn with the test set
/// excluded shares no point with it.
inline PromptSet sample_points(int n, Resolution dims, std::uint64_t seed, PromptRole role = PromptRole::test,
                               const std::vector<Prompt>& exclude = {}) {
  if (n < 1) throw InputError("sample_points: n must be >= 1, got " + std::to_string(n));
  if (dims.height < 1 || dims.width < 1) throw InputError("sample_points: empty image");
  std::set<std::pair<int, int>> taken;
  for (const auto& p : exclude) {
    if (const auto* pt = std::get_if<PointPrompt>(&p)) taken.emplace(pt->x, pt->y);
  }
  const long long pixels = static_cast<long long>(dims.height) * dims.width;
  const long long free = pixels - static_cast<long long>(taken.size());
  if (n > free) {
    throw InputError("sample_points: requested " + std::to_string(n) + " points but only " + std::to_string(free) +
                     " pixels are available");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> ux(0, dims.width - 1), uy(0, dims.height - 1);
  PromptSet out;
  out.role = role;
  out.seed = seed;
  out.id = std::string(to_string(role)) + "-points-" + std::to_string(n) + "-s" + std::to_string(seed);
  while (static_cast<int>(out.prompts.size()) < n) {
    const int x = ux(rng);
    const int y = uy(rng);
    if (!taken.emplace(x, y).second) continue;
    out.prompts.emplace_back(PointPrompt{x, y});
  }
  return out;
}

/// n boxes with uniform centers and sides uniform in [0.2, 0.8] of the image
/// size, clipped to the image.
inline PromptSet sample_boxes(int n, Resolution dims, std::uint64_t seed, PromptRole role = PromptRole::test) {
  if (n < 1) throw InputError("sample_boxes: n must be >= 1, got " + std::to_string(n));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  PromptSet out;
  out.role = role;
  out.seed = seed;
  out.id = std::string(to_string(role)) + "-boxes-" + std::to_string(n) + "-s" + std::to_string(seed);
  for (int i = 0; i < n; ++i) {
    const double cx = u01(rng) * dims.width, cy = u01(rng) * dims.height;
    const double bw = (0.2 + 0.6 * u01(rng)) * dims.width, bh = (0.2 + 0.6 * u01(rng)) * dims.height;
    int x1 = std::clamp(static_cast<int>(std::floor(cx - bw / 2)), 0, dims.width - 1);
    int y1 = std::clamp(static_cast<int>(std::floor(cy - bh / 2)), 0, dims.height - 1);
    int x2 = std::clamp(static_cast<int>(std::ceil(cx + bw / 2)), x1 + 1, dims.width);
    int y2 = std::clamp(static_cast<int>(std::ceil(cy + bh / 2)), y1 + 1, dims.height);
    out.prompts.emplace_back(BoxPrompt{x1, y1, x2, y2});
  }
  return out;
}

/// One point at the center of every stride x stride cell (the last row and
/// column of cells may be clipped by the image border).
inline PromptSet grid_prompts(int stride, Resolution dims) {
  if (stride < 1) throw InputError("grid_prompts: stride must be >= 1, got " + std::to_string(stride));
  PromptSet out;
  out.role = PromptRole::grid;
  out.id = "grid-" + std::to_string(stride);
  for (int y0 = 0; y0 < dims.height; y0 += stride) {
    const int y1 = std::min(y0 + stride, dims.height);
    for (int x0 = 0; x0 < dims.width; x0 += stride) {
      const int x1 = std::min(x0 + stride, dims.width);
      out.prompts.emplace_back(PointPrompt{(x0 + x1) / 2, (y0 + y1) / 2});
    }
  }
  return out;
}

/// Scores `adv` against `target` under every prompt of `set`; both masks are
/// decoded with the same prompt.
inline EvalReport score_prompts(const SegModel& model, const ImageTensor& adv, const ImageTensor& target,
                                const PromptSet& set) {
  const Resolution res = model.input_resolution();
  require_prompts_in_bounds(set, res.height, res.width);
  const EmbeddingGrid ea = encode_image(model, adv);
  const EmbeddingGrid et = encode_image(model, target);
  std::vector<LogitPair> pairs;
  pairs.reserve(set.size());
  for (const auto& p : set.prompts) pairs.emplace_back(model.decode(ea, p), model.decode(et, p));
  return miou(pairs, set.id);
}

struct CrossPromptRow {
  int k = 0;
  double train_miou = 0.0;
  double test_miou = 0.0;
};

/// For every K: draws K training points (disjoint from the test set), runs a
/// decoder attack on them, and scores the result on the training points and
/// on `test_set`. Training points for K come from seed config.seed + K.
inline std::vector<CrossPromptRow> cross_prompt_experiment(const SegModel& model, const ImageTensor& clean,
                                                           const ImageTensor& target, const std::vector<int>& k_values,
                                                           const PromptSet& test_set, AttackConfig config,
                                                           const AttackHooks* hooks = nullptr) {
  if (test_set.role != PromptRole::test) throw ConfigError("cross_prompt_experiment: prompt set must have role test");
  if (k_values.empty()) throw ConfigError("cross_prompt_experiment: no K values");
  config.method = AttackMethod::decoder_attack;
  std::vector<CrossPromptRow> rows;
  for (int k : k_values) {
    try {
      config.train_prompts = k;
      const PromptSet train =
          sample_points(k, model.input_resolution(), config.seed + static_cast<std::uint64_t>(k), PromptRole::train,
                        test_set.prompts);
      const AttackResult r = run_attack(model, clean, target, train.prompts, config, hooks);
      rows.push_back({k, score_prompts(model, r.adv_image, target, train).miou,
                      score_prompts(model, r.adv_image, target, test_set).miou});
    } catch (const NumericalError& e) {
      throw NumericalError("K=" + std::to_string(k) + ": " + e.what(), e.iteration());
    } catch (const ConfigError& e) {
      throw ConfigError("K=" + std::to_string(k) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError("K=" + std::to_string(k) + ": " + e.what());
    }
  }
  return rows;
}

}  // namespace pata
