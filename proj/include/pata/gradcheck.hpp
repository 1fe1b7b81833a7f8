#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "pata/model.hpp"

namespace pata {

struct GradCheckResult {
  /// ||analytic - numeric|| / ||numeric|| over the sampled pixels.
  double relative_error = 0.0;
  /// max |analytic - numeric| / (max(|analytic|, |numeric|) + floor) over the sampled pixels.
  double worst_pixel_error = 0.0;
  int pixels = 0;
};

/// Compares input_gradient with central differences of step `h` on `n_pixels`
/// distinct pixel entries drawn with `seed`. Perturbed pixels are not clamped,
/// so images should keep a margin of h from the domain edges.
inline GradCheckResult check_input_gradient(const SegModel& model, const ImageTensor& image, const LossSpec& loss,
                                            int n_pixels, std::uint64_t seed, double h = 1e-3, double floor = 1e-6) {
  const PixelArray g = input_gradient(model, image, loss);
  std::vector<std::size_t> idx(image.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(n_pixels)));
  auto value = [&](const ImageTensor& x) { return loss(encode_image(model, x)).value; };
  double diff2 = 0.0, ref2 = 0.0;
  GradCheckResult r;
  for (std::size_t i : idx) {
    ImageTensor plus = image, minus = image;
    plus.data[i] += h;
    minus.data[i] -= h;
    const double numeric = (value(plus) - value(minus)) / (2.0 * h);
    const double d = g.data[i] - numeric;
    diff2 += d * d;
    ref2 += numeric * numeric;
    r.worst_pixel_error =
        std::max(r.worst_pixel_error, std::abs(d) / (std::max(std::abs(g.data[i]), std::abs(numeric)) + floor));
  }
  r.pixels = static_cast<int>(idx.size());
  r.relative_error = ref2 > 0.0 ? std::sqrt(diff2 / ref2) : std::sqrt(diff2);
  return r;
}

/// Random linear functional of the embedding (standard normal weights).
inline LossSpec random_linear_loss(const SegModel& model, std::uint64_t seed) {
  const Resolution g = model.embedding_grid();
  EmbeddingGrid w(g.height, g.width, model.embedding_dim());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : w.data) v = n(rng);
  return losses::linear_functional(std::move(w));
}

}  // namespace pata
