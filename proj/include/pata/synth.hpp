#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <array>
#include <random>
#include <vector>

#include "pata/tensor.hpp"

namespace pata {

namespace detail {
inline double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }
}  // namespace detail

/// Fixed analytic test scene: shaded background, a disc and a bar.
/// Values sit on the 8-bit lattice so PNG round trips are exact.
inline ImageTensor reference_image(int height = 32, int width = 32) {
  ImageTensor img(height, width, 3);
  const double cy = 0.45 * height, cx = 0.35 * width, r = 0.22 * std::min(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double fy = (y + 0.5) / height, fx = (x + 0.5) / width;
      double rgb[3] = {0.10 + 0.15 * fx, 0.15 + 0.10 * fy, 0.25};
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) {
        rgb[0] = 0.60; rgb[1] = 0.30; rgb[2] = 0.10;
      } else if (fx > 0.65 && fx < 0.9 && fy > 0.15 && fy < 0.85) {
        rgb[0] = 0.10; rgb[1] = 0.45; rgb[2] = 0.55;
      }
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = detail::quantize8(rgb[c]);
    }
  }
  return img;
}

/// Image plus per-pixel object label (0 = background, i = i-th shape drawn).
struct SyntheticScene {
  ImageTensor image;
  std::vector<int> labels;
  int objects = 0;
};

/// Random scene of one to three flat-colored rectangles and ellipses over a
/// two-color gradient, with light pixel noise. Deterministic in `seed`.
inline SyntheticScene synthetic_scene(int height, int width, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 0x2545F4914F6CDD1DULL + 17);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto color = [&](double lo, double hi) {
    return std::array<double, 3>{lo + (hi - lo) * u01(rng), lo + (hi - lo) * u01(rng), lo + (hi - lo) * u01(rng)};
  };
  ImageTensor img(height, width, 3);
  std::vector<int> labels(static_cast<std::size_t>(height) * width, 0);
  const auto c0 = color(0.15, 0.85);
  const auto c1 = color(0.15, 0.85);
  const double angle = 2.0 * 3.141592653589793 * u01(rng);
  const double ga = std::cos(angle), gb = std::sin(angle);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double t = 0.5 + 0.5 * (ga * ((x + 0.5) / width - 0.5) + gb * ((y + 0.5) / height - 0.5)) * 1.4;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = (1.0 - t) * c0[static_cast<std::size_t>(c)] + t * c1[static_cast<std::size_t>(c)];
    }
  }
  const int shapes = 1 + static_cast<int>(u01(rng) * 3.0);
  for (int s = 0; s < shapes; ++s) {
    const auto col = color(0.0, 1.0);
    const bool ellipse = u01(rng) < 0.5;
    const double cy = u01(rng) * height, cx = u01(rng) * width;
    const double ry = (0.12 + 0.25 * u01(rng)) * height, rx = (0.12 + 0.25 * u01(rng)) * width;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
        const bool inside = ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (!inside) continue;
        labels[static_cast<std::size_t>(y) * width + x] = s + 1;
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = col[static_cast<std::size_t>(c)];
      }
    }
  }
  std::normal_distribution<double> noise(0.0, 0.015);
  for (double& v : img.data) v = detail::quantize8(v + noise(rng));
  return {std::move(img), std::move(labels), shapes};
}

inline ImageTensor synthetic_image(int height, int width, std::uint64_t seed) {
  return synthetic_scene(height, width, seed).image;
}

}  // namespace pata
