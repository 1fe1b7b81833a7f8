#pragma once

#include <string>
#include <variant>

#include "pata/errors.hpp"

namespace pata {

/// Foreground click at pixel (x, y); 0 <= x < width, 0 <= y < height.
struct PointPrompt {
  int x = 0;
  int y = 0;
  friend bool operator==(const PointPrompt&, const PointPrompt&) = default;
  friend auto operator<=>(const PointPrompt&, const PointPrompt&) = default;
};

/// Half-open pixel box [x1, x2) x [y1, y2); 0 <= x1 < x2 <= width.
struct BoxPrompt {
  int x1 = 0;
  int y1 = 0;
  int x2 = 1;
  int y2 = 1;
  friend bool operator==(const BoxPrompt&, const BoxPrompt&) = default;
  friend auto operator<=>(const BoxPrompt&, const BoxPrompt&) = default;
};

using Prompt = std::variant<PointPrompt, BoxPrompt>;

inline bool is_point(const Prompt& p) noexcept { return std::holds_alternative<PointPrompt>(p); }

inline std::string describe(const Prompt& p) {
  if (const auto* pt = std::get_if<PointPrompt>(&p)) {
    return "point(" + std::to_string(pt->x) + ", " + std::to_string(pt->y) + ")";
  }
  const auto& b = std::get<BoxPrompt>(p);
  return "box(" + std::to_string(b.x1) + ", " + std::to_string(b.y1) + ", " + std::to_string(b.x2) + ", " +
         std::to_string(b.y2) + ")";
}

inline bool prompt_in_bounds(const Prompt& p, int height, int width) noexcept {
  if (const auto* pt = std::get_if<PointPrompt>(&p)) {
    return pt->x >= 0 && pt->x < width && pt->y >= 0 && pt->y < height;
  }
  const auto& b = std::get<BoxPrompt>(p);
  return b.x1 >= 0 && b.y1 >= 0 && b.x1 < b.x2 && b.y1 < b.y2 && b.x2 <= width && b.y2 <= height;
}

inline void require_prompt_in_bounds(const Prompt& p, int height, int width) {
  if (!prompt_in_bounds(p, height, width)) {
    throw InputError("prompt " + describe(p) + " outside image bounds " + std::to_string(width) + "x" +
                     std::to_string(height));
  }
}

}  // namespace pata
