#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pata/errors.hpp"

namespace pata {

/// Row-major height x width x channels array of doubles. The tag keeps
/// images, perturbations, embeddings and logits from mixing silently.
template <class Tag>
struct HwcArray {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  HwcArray() = default;
  HwcArray(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(c), fill) {}

  std::size_t size() const noexcept { return data.size(); }
  std::size_t index(int y, int x, int c = 0) const noexcept {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) *
               static_cast<std::size_t>(channels) +
           static_cast<std::size_t>(c);
  }
  double& at(int y, int x, int c = 0) noexcept { return data[index(y, x, c)]; }
  double at(int y, int x, int c = 0) const noexcept { return data[index(y, x, c)]; }

  std::span<double> values() noexcept { return data; }
  std::span<const double> values() const noexcept { return data; }

  template <class Other>
  bool same_shape(const HwcArray<Other>& o) const noexcept {
    return height == o.height && width == o.width && channels == o.channels;
  }

  bool all_finite() const noexcept {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const HwcArray&, const HwcArray&) = default;
};

struct ImageTag {};
struct PixelTag {};
struct EmbeddingTag {};
struct LogitTag {};

/// Pixel values in [0,1]; channels == 3 for model inputs.
using ImageTensor = HwcArray<ImageTag>;
/// Unconstrained per-pixel array: perturbations and input gradients.
using PixelArray = HwcArray<PixelTag>;
/// Encoder output: grid_h x grid_w x dim.
using EmbeddingGrid = HwcArray<EmbeddingTag>;
/// Per-pixel mask confidence, channels == 1. Masked iff value > 0.
using MaskLogits = HwcArray<LogitTag>;

template <class To, class From>
HwcArray<To> retag(HwcArray<From> a) {
  HwcArray<To> out;
  out.height = a.height;
  out.width = a.width;
  out.channels = a.channels;
  out.data = std::move(a.data);
  return out;
}

template <class A, class B>
void require_same_shape(const HwcArray<A>& a, const HwcArray<B>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw InputError(std::string(what) + ": shape mismatch " + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + "x" + std::to_string(a.channels) + " vs " +
                     std::to_string(b.height) + "x" + std::to_string(b.width) + "x" +
                     std::to_string(b.channels));
  }
}

inline bool in_pixel_domain(const ImageTensor& img) noexcept {
  return std::all_of(img.data.begin(), img.data.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
}

inline void require_pixel_domain(const ImageTensor& img) {
  if (!in_pixel_domain(img)) throw InputError("image has values outside [0,1]");
}

inline double linf_distance(const ImageTensor& a, const ImageTensor& b) {
  require_same_shape(a, b, "linf_distance");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> a) noexcept { return std::sqrt(dot(a, a)); }

}  // namespace pata
