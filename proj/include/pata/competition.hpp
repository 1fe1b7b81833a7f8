#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pata/image_ops.hpp"
#include "pata/tensor.hpp"

namespace pata {

using Rng = std::mt19937_64;

enum class CompetitionSource { external_images, self_patches };

/// Where competition images come from when probing or regularizing feature
/// dominance. `pool` holds references (file paths) as written in configs;
/// `pool_images` holds the decoded images actually sampled from.
struct CompetitionSpec {
  std::optional<CompetitionSource> source;
  int count_per_iter = 1;
  std::vector<std::string> pool;
  std::pair<double, double> patch_scale_range{0.1, 0.5};
  std::vector<ImageTensor> pool_images;

  CompetitionSource resolved_source(CompetitionSource fallback) const { return source.value_or(fallback); }

  void validate(CompetitionSource fallback) const {
    if (count_per_iter < 1) throw ConfigError("competition.count_per_iter must be >= 1");
    const auto [lo, hi] = patch_scale_range;
    if (!(lo > 0.0 && lo <= hi && hi <= 1.0)) {
      throw ConfigError("competition.patch_scale_range must satisfy 0 < lo <= hi <= 1");
    }
    if (resolved_source(fallback) == CompetitionSource::external_images && pool_images.empty()) {
      throw ConfigError(pool.empty() ? "external_images competition requires a non-empty pool"
                                     : "external_images competition pool has not been loaded");
    }
  }
};

struct PatchRect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
  double frac_w = 0.0;
  double frac_h = 0.0;
};

/// Side fractions uniform in `range` (independently per axis), position
/// uniform over all placements that fit.
inline PatchRect sample_patch_rect(int height, int width, std::pair<double, double> range, Rng& rng) {
  std::uniform_real_distribution<double> frac(range.first, range.second);
  PatchRect r;
  r.frac_h = range.first == range.second ? range.first : frac(rng);
  r.frac_w = range.first == range.second ? range.first : frac(rng);
  r.h = std::clamp(static_cast<int>(std::lround(r.frac_h * height)), 1, height);
  r.w = std::clamp(static_cast<int>(std::lround(r.frac_w * width)), 1, width);
  r.y = std::uniform_int_distribution<int>(0, height - r.h)(rng);
  r.x = std::uniform_int_distribution<int>(0, width - r.w)(rng);
  return r;
}

/// One competition image at the resolution of `clean`.
inline ImageTensor sample_competition(const ImageTensor& clean, const CompetitionSpec& spec, Rng& rng,
                                      CompetitionSource fallback = CompetitionSource::self_patches) {
  spec.validate(fallback);
  if (spec.resolved_source(fallback) == CompetitionSource::external_images) {
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, spec.pool_images.size() - 1)(rng);
    const ImageTensor& src = spec.pool_images[i];
    return clamp_pixels(resize_bilinear(src, clean.height, clean.width));
  }
  const PatchRect r = sample_patch_rect(clean.height, clean.width, spec.patch_scale_range, rng);
  return clamp_pixels(resize_bilinear(crop(clean, r.x, r.y, r.w, r.h), clean.height, clean.width));
}

enum class MixMode { sum_clamp, mean };

/// The mixed image of a feature-dominance probe. Symmetric in its arguments.
inline ImageTensor mix_images(const ImageTensor& a, const ImageTensor& b, MixMode mode = MixMode::sum_clamp) {
  require_same_shape(a, b, "mix_images");
  ImageTensor out(a.height, a.width, a.channels);
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.data[i] = mode == MixMode::mean ? 0.5 * (a.data[i] + b.data[i]) : std::clamp(a.data[i] + b.data[i], 0.0, 1.0);
  }
  return out;
}

/// d mix / d a, elementwise. Zero where the sum clamp is active.
inline std::vector<double> mix_jacobian(const ImageTensor& a, const ImageTensor& b, MixMode mode) {
  std::vector<double> j(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mode == MixMode::mean) {
      j[i] = 0.5;
    } else {
      const double s = a.data[i] + b.data[i];
      j[i] = (s > 0.0 && s < 1.0) ? 1.0 : 0.0;
    }
  }
  return j;
}

}  // namespace pata
