#pragma once

#include <algorithm>
#include <cmath>

#include "pata/tensor.hpp"

namespace pata {

/// Bilinear resize with half-pixel centers. Same-size resize is an exact copy.
template <class Tag>
HwcArray<Tag> resize_bilinear(const HwcArray<Tag>& src, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw InputError("resize target must be at least 1x1");
  if (src.height < 1 || src.width < 1) throw InputError("cannot resize an empty image");
  HwcArray<Tag> out(out_h, out_w, src.channels);
  const double sy = static_cast<double>(src.height) / out_h;
  const double sx = static_cast<double>(src.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double tx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = (1.0 - tx) * src.at(y0, x0, c) + tx * src.at(y0, x1, c);
        const double bot = (1.0 - tx) * src.at(y1, x0, c) + tx * src.at(y1, x1, c);
        out.at(y, x, c) = (1.0 - ty) * top + ty * bot;
      }
    }
  }
  return out;
}

template <class Tag>
HwcArray<Tag> crop(const HwcArray<Tag>& src, int x, int y, int w, int h) {
  if (x < 0 || y < 0 || w < 1 || h < 1 || x + w > src.width || y + h > src.height) {
    throw InputError("crop rectangle outside image");
  }
  HwcArray<Tag> out(h, w, src.channels);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int k = 0; k < src.channels; ++k) out.at(r, c, k) = src.at(y + r, x + c, k);
    }
  }
  return out;
}

inline ImageTensor clamp_pixels(ImageTensor img) {
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace pata
