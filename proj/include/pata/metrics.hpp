#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pata/competition.hpp"
#include "pata/model.hpp"

namespace pata {

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  bool at(int y, int x) const noexcept { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  std::size_t count() const noexcept {
    std::size_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

/// Foreground iff logit > 0 (strict).
inline BinaryMask binarize(const MaskLogits& logits) {
  BinaryMask m{logits.height, logits.width, std::vector<std::uint8_t>(logits.size())};
  for (std::size_t i = 0; i < logits.size(); ++i) m.bits[i] = logits.data[i] > 0.0 ? 1 : 0;
  return m;
}

/// |a & b| / |a | b|. Two empty masks agree perfectly (1.0).
inline double iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width || a.bits.size() != b.bits.size()) {
    throw InputError("iou: mask shapes differ");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += (a.bits[i] & b.bits[i]);
    uni += (a.bits[i] | b.bits[i]);
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

struct EvalReport {
  std::vector<double> per_pair_iou;
  double miou = 0.0;
  int n_pairs = 0;
  std::string prompt_set_id;
};

using LogitPair = std::pair<MaskLogits, MaskLogits>;

inline EvalReport miou(std::span<const LogitPair> pairs, std::string prompt_set_id = {}) {
  if (pairs.empty()) throw InputError("miou: no pairs to evaluate");
  EvalReport r;
  r.prompt_set_id = std::move(prompt_set_id);
  double sum = 0.0;
  for (const auto& [adv, target] : pairs) {
    const double v = iou(binarize(adv), binarize(target));
    r.per_pair_iou.push_back(v);
    sum += v;
  }
  r.n_pairs = static_cast<int>(pairs.size());
  r.miou = sum / r.n_pairs;
  return r;
}

/// Cosine similarity of flattened arrays; zero-norm operands are an error.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("cosine_similarity: length mismatch");
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw NumericalError("cosine similarity of a zero-norm vector");
  return dot(a, b) / (na * nb);
}

/// Gradient of cos(a, b) with respect to a.
inline std::vector<double> cosine_similarity_grad(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw NumericalError("cosine similarity of a zero-norm vector");
  const double c = dot(a, b) / (na * nb);
  std::vector<double> g(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = b[i] / (na * nb) - c * a[i] / (na * na);
  return g;
}

/// CosSim(f_adv, f_mix) - CosSim(f_com, f_mix) over flattened grids.
inline double feature_dominance(const EmbeddingGrid& f_adv, const EmbeddingGrid& f_com, const EmbeddingGrid& f_mix) {
  require_same_shape(f_adv, f_com, "feature_dominance");
  require_same_shape(f_adv, f_mix, "feature_dominance");
  return cosine_similarity(f_adv.values(), f_mix.values()) - cosine_similarity(f_com.values(), f_mix.values());
}

/// Fixed set of competition images with cached encodings, so an fd
/// trajectory is measured against the same competitors at every iteration.
class FdProbe {
 public:
  FdProbe(const SegModel& model, std::vector<ImageTensor> competitors, MixMode mode = MixMode::sum_clamp)
      : model_(&model), competitors_(std::move(competitors)), mode_(mode) {
    if (competitors_.empty()) throw InputError("fd probe needs at least one competition image");
    for (const auto& c : competitors_) encodings_.push_back(encode_image(model, c));
  }

  double evaluate(const ImageTensor& adv) const { return evaluate(adv, encode_image(*model_, adv)); }

  double evaluate(const ImageTensor& adv, const EmbeddingGrid& f_adv) const {
    double sum = 0.0;
    for (std::size_t i = 0; i < competitors_.size(); ++i) {
      const EmbeddingGrid f_mix = encode_image(*model_, mix_images(adv, competitors_[i], mode_));
      sum += feature_dominance(f_adv, encodings_[i], f_mix);
    }
    return sum / static_cast<double>(competitors_.size());
  }

  std::size_t size() const noexcept { return competitors_.size(); }

 private:
  const SegModel* model_;
  std::vector<ImageTensor> competitors_;
  std::vector<EmbeddingGrid> encodings_;
  MixMode mode_;
};

/// Mean fd of `adv` over m competition images drawn from `clean_source`.
inline double fd_estimate(const SegModel& model, const ImageTensor& adv, const ImageTensor& clean_source,
                          const CompetitionSpec& spec, int m, Rng& rng, MixMode mode = MixMode::sum_clamp,
                          CompetitionSource fallback = CompetitionSource::self_patches) {
  if (m < 1) throw InputError("fd_estimate requires m >= 1");
  std::vector<ImageTensor> competitors;
  competitors.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) competitors.push_back(sample_competition(clean_source, spec, rng, fallback));
  return FdProbe(model, std::move(competitors), mode).evaluate(adv);
}

}  // namespace pata
