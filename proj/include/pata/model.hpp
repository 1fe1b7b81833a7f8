#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pata/errors.hpp"
#include "pata/prompt.hpp"
#include "pata/tensor.hpp"

namespace pata {

struct Resolution {
  int height = 0;
  int width = 0;
  friend bool operator==(const Resolution&, const Resolution&) = default;
};

/// Two-stage prompt-guided segmentation model: an image encoder producing an
/// embedding grid, and a prompt-conditioned mask decoder producing per-pixel
/// logits at input resolution.
///
/// Implementations must be deterministic and safe to call concurrently from
/// several threads. The *_vjp methods return vector-Jacobian products, i.e.
/// they backpropagate an upstream gradient through one stage. A real
/// checkpoint plugs in by implementing this interface; pixel normalization
/// specific to the checkpoint belongs inside the implementation.
class SegModel {
 public:
  virtual ~SegModel() = default;

  virtual std::string identity() const = 0;
  virtual int patch_size() const = 0;
  virtual Resolution input_resolution() const = 0;
  /// Shape of the encoder output; independent of image content.
  virtual Resolution embedding_grid() const = 0;
  virtual int embedding_dim() const = 0;

  virtual EmbeddingGrid encode(const ImageTensor& image) const = 0;
  virtual PixelArray encode_vjp(const ImageTensor& image, const EmbeddingGrid& d_embedding) const = 0;

  virtual MaskLogits decode(const EmbeddingGrid& embedding, const Prompt& prompt) const = 0;
  virtual EmbeddingGrid decode_vjp(const EmbeddingGrid& embedding, const Prompt& prompt,
                                   const MaskLogits& d_logits) const = 0;

  /// Sum of decode_vjp over prompts. Overridable when the decoder can share work.
  virtual EmbeddingGrid decode_vjp_sum(const EmbeddingGrid& embedding, std::span<const Prompt> prompts,
                                       std::span<const MaskLogits> d_logits) const {
    EmbeddingGrid total(embedding.height, embedding.width, embedding.channels);
    for (std::size_t k = 0; k < prompts.size(); ++k) {
      const EmbeddingGrid part = decode_vjp(embedding, prompts[k], d_logits[k]);
      for (std::size_t i = 0; i < total.size(); ++i) total.data[i] += part.data[i];
    }
    return total;
  }
};

using SegModelPtr = std::shared_ptr<const SegModel>;

inline void require_model_resolution(const SegModel& model, const ImageTensor& image) {
  const Resolution r = model.input_resolution();
  if (image.height != r.height || image.width != r.width || image.channels != 3) {
    throw ConfigError("model " + model.identity() + " expects " + std::to_string(r.height) + "x" +
                      std::to_string(r.width) + "x3 input, got " + std::to_string(image.height) + "x" +
                      std::to_string(image.width) + "x" + std::to_string(image.channels));
  }
}

inline void require_embedding_shape(const SegModel& model, const EmbeddingGrid& e) {
  const Resolution g = model.embedding_grid();
  if (e.height != g.height || e.width != g.width || e.channels != model.embedding_dim()) {
    throw InputError("embedding shape does not match model " + model.identity());
  }
}

inline EmbeddingGrid encode_image(const SegModel& model, const ImageTensor& image) {
  require_model_resolution(model, image);
  return model.encode(image);
}

inline MaskLogits decode_mask(const SegModel& model, const EmbeddingGrid& embedding, const Prompt& prompt) {
  require_embedding_shape(model, embedding);
  const Resolution r = model.input_resolution();
  require_prompt_in_bounds(prompt, r.height, r.width);
  return model.decode(embedding, prompt);
}

inline MaskLogits forward(const SegModel& model, const ImageTensor& image, const Prompt& prompt) {
  return decode_mask(model, encode_image(model, image), prompt);
}

/// Scalar loss of the embedding together with its gradient w.r.t. the
/// embedding. Losses over mask logits reach the embedding through
/// SegModel::decode_vjp inside the closure.
struct LossValue {
  double value = 0.0;
  EmbeddingGrid d_embedding;
};

using LossSpec = std::function<LossValue(const EmbeddingGrid&)>;

struct LossAndGradient {
  double value = 0.0;
  PixelArray gradient;
};

inline LossAndGradient loss_and_gradient(const SegModel& model, const ImageTensor& image, const LossSpec& loss_spec,
                                         int iteration = -1) {
  const EmbeddingGrid e = encode_image(model, image);
  LossValue lv = loss_spec(e);
  if (!std::isfinite(lv.value)) throw NumericalError("non-finite loss", iteration);
  if (lv.d_embedding.size() == 0) lv.d_embedding = EmbeddingGrid(e.height, e.width, e.channels);
  if (!lv.d_embedding.same_shape(e)) throw InputError("loss gradient shape does not match embedding");
  LossAndGradient out{lv.value, model.encode_vjp(image, lv.d_embedding)};
  if (!out.gradient.all_finite()) throw NumericalError("non-finite input gradient", iteration);
  return out;
}

/// d loss / d pixels for a loss composed of encoder (and decoder) outputs.
inline PixelArray input_gradient(const SegModel& model, const ImageTensor& image, const LossSpec& loss_spec) {
  return loss_and_gradient(model, image, loss_spec).gradient;
}

namespace losses {

inline LossSpec constant(double c) {
  return [c](const EmbeddingGrid& e) { return LossValue{c, EmbeddingGrid(e.height, e.width, e.channels)}; };
}

inline LossSpec embedding_sum() {
  return [](const EmbeddingGrid& e) {
    double s = 0.0;
    for (double v : e.data) s += v;
    return LossValue{s, EmbeddingGrid(e.height, e.width, e.channels, 1.0)};
  };
}

/// <weights, embedding> for a fixed weight grid.
inline LossSpec linear_functional(EmbeddingGrid weights) {
  return [w = std::move(weights)](const EmbeddingGrid& e) {
    require_same_shape(w, e, "linear_functional");
    return LossValue{dot(w.values(), e.values()), w};
  };
}

}  // namespace losses

}  // namespace pata
