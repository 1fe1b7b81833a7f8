#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pata/linalg.hpp"
#include "pata/model.hpp"

namespace pata {

/// Architecture and initialization of the desk-scale toy segmenter.
///
/// Parameters are drawn from `seed`. When `family_seed` is set, the base
/// parameters come from `family_seed` and `seed` only adds a perturbation of
/// relative size `variant_scale`; two such models behave like related
/// checkpoints of one model family, which is what transfer experiments need.
struct ToyModelConfig {
  int height = 32;
  int width = 32;
  int patch_size = 8;
  int dim = 64;
  int depth = 2;
  int heads = 4;
  int mlp_hidden = 128;
  int key_dim = 32;
  int pos_features = 16;
  double logit_scale = 16.0;
  double mask_threshold = 0.4;
  double box_margin = 2.0;
  double pos_scale = 0.7;
  double pos_frequency = 2.0;
  /// Gain of the patch embedding on each patch's per-channel mean (1 = plain
  /// random projection). Values below 1 emphasize texture over flat color.
  double dc_gain = 1.0;
  double qk_gain = 1.0;
  double mlp_gain = 1.0;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> family_seed;
  double variant_scale = 0.0;
  std::string id;

  void validate() const {
    if (patch_size < 1 || height < patch_size || width < patch_size || height % patch_size != 0 ||
        width % patch_size != 0) {
      throw ConfigError("toy model input " + std::to_string(height) + "x" + std::to_string(width) +
                        " must be a positive multiple of patch_size " + std::to_string(patch_size));
    }
    if (dim < 1 || depth < 0 || heads < 1 || dim % heads != 0) {
      throw ConfigError("toy model dim must be positive and divisible by heads");
    }
    if (mlp_hidden < 1 || key_dim < 1 || pos_features < 2 || pos_features % 2 != 0) {
      throw ConfigError("toy model mlp_hidden/key_dim must be positive and pos_features even");
    }
    if (variant_scale < 0.0) throw ConfigError("variant_scale must be >= 0");
  }

  std::string identity() const {
    if (!id.empty()) return id;
    std::string s = "toy-vit-d" + std::to_string(dim) + "x" + std::to_string(depth) + "/seed" + std::to_string(seed);
    if (family_seed) s += "/family" + std::to_string(*family_seed);
    return s;
  }
};

/// Flat parameter tensor as stored in weight blobs.
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};

/// Patch-embedding transformer encoder plus a similarity decoder.
///
/// Encoder: pixels are normalized, cut into patch_size^2 patches, linearly
/// embedded with a learned position table, passed through pre-norm
/// transformer blocks (multi-head attention, GELU MLP) and a final layer norm.
///
/// Decoder: the grid is projected to key_dim, centered over tokens, bilinearly upsampled to input
/// resolution and offset by a fixed Fourier positional term. A point prompt
/// takes the key at its pixel, a box prompt the mean key over the box; pixel
/// logits are scale/key_dim * (<k, a_ij> - threshold*|k|^2), so the prompted
/// pixel is foreground whenever threshold < 1. Box prompts add +/-box_margin
/// inside/outside the box.
class ToyModel final : public SegModel {
 public:
  explicit ToyModel(ToyModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init_parameters();
    rebuild();
  }

  const ToyModelConfig& config() const noexcept { return cfg_; }
  const std::vector<NamedTensor>& parameters() const noexcept { return params_; }

  /// Replaces parameter values (e.g. from a weight blob). Names and shapes must match.
  void set_parameters(const std::vector<NamedTensor>& values) {
    if (values.size() != params_.size()) throw InputError("parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i].name != params_[i].name || values[i].shape != params_[i].shape ||
          values[i].data.size() != params_[i].data.size()) {
        throw InputError("parameter '" + values[i].name + "' does not match architecture tensor '" +
                         params_[i].name + "'");
      }
      params_[i].data = values[i].data;
    }
    rebuild();
  }

  /// Accumulates d loss / d parameter for every encoder parameter into
  /// `grads` (aligned with parameters(); decoder entries are left untouched),
  /// given d loss / d embedding for `image`. Returns d loss / d pixels.
  PixelArray accumulate_encoder_gradients(const ImageTensor& image, const EmbeddingGrid& d_embedding,
                                          std::vector<std::vector<double>>& grads) const {
    if (grads.size() != params_.size()) {
      grads.clear();
      for (const auto& p : params_) grads.emplace_back(p.data.size(), 0.0);
    }
    EncoderCache cache;
    encode_tokens(image, cache);
    return backward_tokens(from_grid(d_embedding), cache, &grads);
  }

  /// Index of the first decoder tensor in parameters(); earlier tensors belong to the encoder.
  std::size_t decoder_parameter_offset() const noexcept { return params_.size() - 3; }

  std::string identity() const override { return cfg_.identity(); }
  int patch_size() const override { return cfg_.patch_size; }
  Resolution input_resolution() const override { return {cfg_.height, cfg_.width}; }
  Resolution embedding_grid() const override { return {grid_h_, grid_w_}; }
  int embedding_dim() const override { return cfg_.dim; }

  EmbeddingGrid encode(const ImageTensor& image) const override {
    EncoderCache cache;
    return to_grid(encode_tokens(image, cache));
  }

  PixelArray encode_vjp(const ImageTensor& image, const EmbeddingGrid& d_embedding) const override {
    EncoderCache cache;
    encode_tokens(image, cache);
    return backward_tokens(from_grid(d_embedding), cache);
  }

  MaskLogits decode(const EmbeddingGrid& embedding, const Prompt& prompt) const override {
    const linalg::Mat keys = pixel_keys(embedding);
    const std::vector<double> k = prompt_key(keys, prompt);
    const double kk = dot(k, k);
    const double s = cfg_.logit_scale / cfg_.key_dim;
    MaskLogits out(cfg_.height, cfg_.width, 1);
    for (int p = 0; p < keys.rows; ++p) {
      const double* a = keys.row(p);
      double ka = 0.0;
      for (int j = 0; j < keys.cols; ++j) ka += k[static_cast<std::size_t>(j)] * a[j];
      out.data[static_cast<std::size_t>(p)] = s * (ka - cfg_.mask_threshold * kk);
    }
    if (const auto* box = std::get_if<BoxPrompt>(&prompt)) {
      for (int y = 0; y < cfg_.height; ++y) {
        for (int x = 0; x < cfg_.width; ++x) {
          const bool inside = x >= box->x1 && x < box->x2 && y >= box->y1 && y < box->y2;
          out.at(y, x) += inside ? cfg_.box_margin : -cfg_.box_margin;
        }
      }
    }
    return out;
  }

  EmbeddingGrid decode_vjp(const EmbeddingGrid& embedding, const Prompt& prompt,
                           const MaskLogits& d_logits) const override {
    const Prompt ps[1] = {prompt};
    const MaskLogits ds[1] = {d_logits};
    return decode_vjp_sum(embedding, ps, ds);
  }

  EmbeddingGrid decode_vjp_sum(const EmbeddingGrid& embedding, std::span<const Prompt> prompts,
                               std::span<const MaskLogits> d_logits) const override {
    const linalg::Mat keys = pixel_keys(embedding);
    linalg::Mat d_keys(keys.rows, keys.cols);
    const double s = cfg_.logit_scale / cfg_.key_dim;
    const int dk = keys.cols;
    for (std::size_t n = 0; n < prompts.size(); ++n) {
      const std::vector<double> k = prompt_key(keys, prompts[n]);
      const auto& dl = d_logits[n].data;
      std::vector<double> d_k(static_cast<std::size_t>(dk), 0.0);
      for (int p = 0; p < keys.rows; ++p) {
        const double g = s * dl[static_cast<std::size_t>(p)];
        if (g == 0.0) continue;
        const double* a = keys.row(p);
        double* da = d_keys.row(p);
        for (int j = 0; j < dk; ++j) {
          d_k[static_cast<std::size_t>(j)] += g * (a[j] - 2.0 * cfg_.mask_threshold * k[static_cast<std::size_t>(j)]);
          da[j] += g * k[static_cast<std::size_t>(j)];
        }
      }
      scatter_prompt_key_grad(d_keys, prompts[n], d_k);
    }
    // keys = upsample(center(E * Wk)) + bias; centering is a symmetric projection.
    linalg::Mat d_grid_keys = upsample_transpose(d_keys);
    center_rows(d_grid_keys);
    return to_grid(linalg::matmul_nt(d_grid_keys, w_.key_proj));
  }

 private:
  struct Block {
    std::vector<double> ln1_g, ln1_b, ln2_g, ln2_b;
    linalg::Mat wq, wk, wv, wo, w1, w2;
    std::vector<double> bq, bk, bv, bo, b1, b2;
  };

  struct Weights {
    linalg::Mat patch_w;
    std::vector<double> patch_b;
    linalg::Mat pos;
    std::vector<Block> blocks;
    std::vector<double> lnf_g, lnf_b;
    linalg::Mat key_proj;
    linalg::Mat pos_freq;
    linalg::Mat pos_proj;
  };

  struct BlockCache {
    linalg::LayerNormCache ln1, ln2;
    linalg::Mat h1, q, k, v, o, h2, z;
    std::vector<linalg::Mat> attn;
  };

  struct EncoderCache {
    linalg::Mat patches;
    std::vector<BlockCache> blocks;
    linalg::LayerNormCache lnf;
  };

  struct Tap {
    int i0, i1;
    double w0, w1;
  };

  static constexpr double kPixelMean = 0.5;
  static constexpr double kPixelStd = 0.25;

  // --- parameters -------------------------------------------------------

  void add_param(std::string name, std::vector<int> shape, double mean, double stddev) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    params_.push_back({std::move(name), std::move(shape), std::vector<double>(n, mean)});
    init_std_.push_back(stddev);
  }

  void init_parameters() {
    const int d = cfg_.dim;
    const int pdim = cfg_.patch_size * cfg_.patch_size * 3;
    const int n_tokens = (cfg_.height / cfg_.patch_size) * (cfg_.width / cfg_.patch_size);
    auto inv_sqrt = [](int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

    add_param("patch_embed.weight", {pdim, d}, 0.0, inv_sqrt(pdim));
    add_param("patch_embed.bias", {d}, 0.0, 0.02);
    add_param("pos_embed", {n_tokens, d}, 0.0, 0.5);
    for (int b = 0; b < cfg_.depth; ++b) {
      const std::string p = "blocks." + std::to_string(b) + ".";
      add_param(p + "ln1.gamma", {d}, 1.0, 0.0);
      add_param(p + "ln1.beta", {d}, 0.0, 0.0);
      for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
        const bool qk = w[6] == 'q' || w[6] == 'k';
        add_param(p + w, {d, d}, 0.0, (qk ? cfg_.qk_gain : 1.0) * inv_sqrt(d));
        add_param(p + w + ".bias", {d}, 0.0, 0.0);
      }
      add_param(p + "ln2.gamma", {d}, 1.0, 0.0);
      add_param(p + "ln2.beta", {d}, 0.0, 0.0);
      add_param(p + "mlp.w1", {d, cfg_.mlp_hidden}, 0.0, cfg_.mlp_gain * inv_sqrt(d));
      add_param(p + "mlp.b1", {cfg_.mlp_hidden}, 0.0, 0.0);
      add_param(p + "mlp.w2", {cfg_.mlp_hidden, d}, 0.0, inv_sqrt(cfg_.mlp_hidden));
      add_param(p + "mlp.b2", {d}, 0.0, 0.0);
    }
    add_param("final_ln.gamma", {d}, 1.0, 0.0);
    add_param("final_ln.beta", {d}, 0.0, 0.0);
    add_param("decoder.key_proj", {d, cfg_.key_dim}, 0.0, inv_sqrt(d));
    add_param("decoder.pos_freq", {2, cfg_.pos_features / 2}, 0.0, cfg_.pos_frequency);
    add_param("decoder.pos_proj", {cfg_.pos_features, d}, 0.0,
              cfg_.pos_scale * std::sqrt(2.0 / static_cast<double>(cfg_.pos_features)));

    const std::uint64_t base_seed = cfg_.family_seed.value_or(cfg_.seed);
    std::mt19937_64 base_rng(base_seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (init_std_[i] == 0.0) continue;
      for (double& v : params_[i].data) v += init_std_[i] * normal(base_rng);
    }
    if (cfg_.dc_gain != 1.0) {
      NamedTensor& w = params_[0];
      const int p2 = cfg_.patch_size * cfg_.patch_size;
      for (int j = 0; j < d; ++j) {
        for (int c = 0; c < 3; ++c) {
          double mean = 0.0;
          for (int k = 0; k < p2; ++k) mean += w.data[static_cast<std::size_t>((k * 3 + c) * d + j)];
          mean /= p2;
          for (int k = 0; k < p2; ++k) w.data[static_cast<std::size_t>((k * 3 + c) * d + j)] -= (1.0 - cfg_.dc_gain) * mean;
        }
      }
    }
    if (cfg_.family_seed && cfg_.variant_scale > 0.0) {
      std::mt19937_64 variant_rng(cfg_.seed ^ 0x9e3779b97f4a7c15ULL);
      for (std::size_t i = 0; i < params_.size(); ++i) {
        const double ref = init_std_[i] > 0.0 ? init_std_[i] : 0.1;
        for (double& v : params_[i].data) v += cfg_.variant_scale * ref * normal(variant_rng);
      }
    }
  }

  static linalg::Mat as_mat(const NamedTensor& t) {
    linalg::Mat m(t.shape.at(0), t.shape.size() > 1 ? t.shape[1] : 1);
    m.v = t.data;
    return m;
  }

  void rebuild() {
    std::size_t i = 0;
    auto next_vec = [&] { return params_.at(i++).data; };
    auto next_mat = [&] { return as_mat(params_.at(i++)); };
    w_ = Weights{};
    w_.patch_w = next_mat();
    w_.patch_b = next_vec();
    w_.pos = next_mat();
    for (int b = 0; b < cfg_.depth; ++b) {
      Block blk;
      blk.ln1_g = next_vec();
      blk.ln1_b = next_vec();
      blk.wq = next_mat();
      blk.bq = next_vec();
      blk.wk = next_mat();
      blk.bk = next_vec();
      blk.wv = next_mat();
      blk.bv = next_vec();
      blk.wo = next_mat();
      blk.bo = next_vec();
      blk.ln2_g = next_vec();
      blk.ln2_b = next_vec();
      blk.w1 = next_mat();
      blk.b1 = next_vec();
      blk.w2 = next_mat();
      blk.b2 = next_vec();
      w_.blocks.push_back(std::move(blk));
    }
    w_.lnf_g = next_vec();
    w_.lnf_b = next_vec();
    w_.key_proj = next_mat();
    w_.pos_freq = next_mat();
    w_.pos_proj = next_mat();

    grid_h_ = cfg_.height / cfg_.patch_size;
    grid_w_ = cfg_.width / cfg_.patch_size;
    row_taps_ = make_taps(cfg_.height, grid_h_);
    col_taps_ = make_taps(cfg_.width, grid_w_);

    // Fixed positional key offset per pixel: fourier(y, x) * pos_proj * key_proj.
    const int half = cfg_.pos_features / 2;
    linalg::Mat fourier(cfg_.height * cfg_.width, cfg_.pos_features);
    for (int y = 0; y < cfg_.height; ++y) {
      for (int x = 0; x < cfg_.width; ++x) {
        const double cy = (y + 0.5) / cfg_.height;
        const double cx = (x + 0.5) / cfg_.width;
        double* f = fourier.row(y * cfg_.width + x);
        for (int j = 0; j < half; ++j) {
          const double phase = 2.0 * std::numbers::pi * (w_.pos_freq(0, j) * cy + w_.pos_freq(1, j) * cx);
          f[j] = std::sin(phase);
          f[half + j] = std::cos(phase);
        }
      }
    }
    pixel_key_bias_ = linalg::matmul(linalg::matmul(fourier, w_.pos_proj), w_.key_proj);
    center_rows(pixel_key_bias_);
  }

  /// Subtracts the column mean, i.e. removes the component shared by all rows.
  static void center_rows(linalg::Mat& m) {
    for (int j = 0; j < m.cols; ++j) {
      double mean = 0.0;
      for (int i = 0; i < m.rows; ++i) mean += m(i, j);
      mean /= m.rows;
      for (int i = 0; i < m.rows; ++i) m(i, j) -= mean;
    }
  }

  // Bilinear taps, half-pixel centers, edge-clamped.
  static std::vector<Tap> make_taps(int out, int in) {
    std::vector<Tap> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      double src = (o + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, in - 1);
      const double t = src - i0;
      taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - t, t};
    }
    return taps;
  }

  // --- encoder ----------------------------------------------------------

  linalg::Mat encode_tokens(const ImageTensor& image, EncoderCache& cache) const {
    const int p = cfg_.patch_size;
    const int pdim = p * p * 3;
    cache.patches = linalg::Mat(grid_h_ * grid_w_, pdim);
    for (int gy = 0; gy < grid_h_; ++gy) {
      for (int gx = 0; gx < grid_w_; ++gx) {
        double* row = cache.patches.row(gy * grid_w_ + gx);
        for (int py = 0; py < p; ++py) {
          for (int px = 0; px < p; ++px) {
            for (int c = 0; c < 3; ++c) {
              row[(py * p + px) * 3 + c] = (image.at(gy * p + py, gx * p + px, c) - kPixelMean) / kPixelStd;
            }
          }
        }
      }
    }
    linalg::Mat x = linalg::matmul(cache.patches, w_.patch_w, &w_.patch_b);
    linalg::add_inplace(x, w_.pos);

    cache.blocks.resize(w_.blocks.size());
    for (std::size_t b = 0; b < w_.blocks.size(); ++b) x = block_forward(w_.blocks[b], x, cache.blocks[b]);
    return linalg::layer_norm(x, w_.lnf_g, w_.lnf_b, cache.lnf);
  }

  linalg::Mat block_forward(const Block& blk, const linalg::Mat& x, BlockCache& c) const {
    const int n = x.rows;
    const int d = cfg_.dim;
    const int dh = d / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    c.h1 = linalg::layer_norm(x, blk.ln1_g, blk.ln1_b, c.ln1);
    c.q = linalg::matmul(c.h1, blk.wq, &blk.bq);
    c.k = linalg::matmul(c.h1, blk.wk, &blk.bk);
    c.v = linalg::matmul(c.h1, blk.wv, &blk.bv);
    c.o = linalg::Mat(n, d);
    c.attn.assign(static_cast<std::size_t>(cfg_.heads), linalg::Mat(n, n));
    for (int h = 0; h < cfg_.heads; ++h) {
      linalg::Mat& a = c.attn[static_cast<std::size_t>(h)];
      const int off = h * dh;
      for (int i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) {
          double s = 0.0;
          for (int t = 0; t < dh; ++t) s += c.q(i, off + t) * c.k(j, off + t);
          a(i, j) = s * scale;
          mx = std::max(mx, a(i, j));
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
          a(i, j) = std::exp(a(i, j) - mx);
          z += a(i, j);
        }
        for (int j = 0; j < n; ++j) a(i, j) /= z;
        for (int j = 0; j < n; ++j) {
          const double aij = a(i, j);
          for (int t = 0; t < dh; ++t) c.o(i, off + t) += aij * c.v(j, off + t);
        }
      }
    }
    linalg::Mat x2 = linalg::matmul(c.o, blk.wo, &blk.bo);
    linalg::add_inplace(x2, x);

    c.h2 = linalg::layer_norm(x2, blk.ln2_g, blk.ln2_b, c.ln2);
    c.z = linalg::matmul(c.h2, blk.w1, &blk.b1);
    linalg::Mat g = c.z;
    for (double& v : g.v) v = linalg::gelu(v);
    linalg::Mat x3 = linalg::matmul(g, blk.w2, &blk.b2);
    linalg::add_inplace(x3, x2);
    return x3;
  }

  using GradSink = std::vector<std::vector<double>>;

  static void add_outer(std::vector<double>& dw, const linalg::Mat& x, const linalg::Mat& dy) {
    const linalg::Mat g = linalg::matmul_tn(x, dy);
    for (std::size_t i = 0; i < g.v.size(); ++i) dw[i] += g.v[i];
  }

  static void add_colsum(std::vector<double>& db, const linalg::Mat& dy) {
    for (int i = 0; i < dy.rows; ++i)
      for (int j = 0; j < dy.cols; ++j) db[static_cast<std::size_t>(j)] += dy(i, j);
  }

  static void add_layer_norm_grads(std::vector<double>& dg, std::vector<double>& db, const linalg::Mat& dy,
                                   const linalg::LayerNormCache& c) {
    for (int i = 0; i < dy.rows; ++i) {
      for (int j = 0; j < dy.cols; ++j) {
        dg[static_cast<std::size_t>(j)] += dy(i, j) * c.xhat(i, j);
        db[static_cast<std::size_t>(j)] += dy(i, j);
      }
    }
  }

  linalg::Mat block_backward(const Block& blk, const linalg::Mat& dx3, const BlockCache& c, GradSink* sink = nullptr,
                             std::size_t base = 0) const {
    const int n = dx3.rows;
    const int d = cfg_.dim;
    const int dh = d / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // MLP branch
    linalg::Mat dg = linalg::matmul_nt(dx3, blk.w2);
    if (sink) {
      linalg::Mat g = c.z;
      for (double& v : g.v) v = linalg::gelu(v);
      add_outer((*sink)[base + 14], g, dx3);
      add_colsum((*sink)[base + 15], dx3);
    }
    for (std::size_t i = 0; i < dg.v.size(); ++i) dg.v[i] *= linalg::gelu_grad(c.z.v[i]);
    if (sink) {
      add_outer((*sink)[base + 12], c.h2, dg);
      add_colsum((*sink)[base + 13], dg);
    }
    const linalg::Mat dh2 = linalg::matmul_nt(dg, blk.w1);
    if (sink) add_layer_norm_grads((*sink)[base + 10], (*sink)[base + 11], dh2, c.ln2);
    linalg::Mat dx2 = linalg::layer_norm_backward(dh2, blk.ln2_g, c.ln2);
    linalg::add_inplace(dx2, dx3);

    // attention branch
    if (sink) {
      add_outer((*sink)[base + 8], c.o, dx2);
      add_colsum((*sink)[base + 9], dx2);
    }
    const linalg::Mat d_o = linalg::matmul_nt(dx2, blk.wo);
    linalg::Mat dq(n, d), dk(n, d), dv(n, d);
    std::vector<double> da(static_cast<std::size_t>(n));
    for (int h = 0; h < cfg_.heads; ++h) {
      const linalg::Mat& a = c.attn[static_cast<std::size_t>(h)];
      const int off = h * dh;
      for (int i = 0; i < n; ++i) {
        double row_dot = 0.0;
        for (int j = 0; j < n; ++j) {
          double s = 0.0;
          for (int t = 0; t < dh; ++t) s += d_o(i, off + t) * c.v(j, off + t);
          da[static_cast<std::size_t>(j)] = s;
          row_dot += s * a(i, j);
          for (int t = 0; t < dh; ++t) dv(j, off + t) += a(i, j) * d_o(i, off + t);
        }
        for (int j = 0; j < n; ++j) {
          const double ds = a(i, j) * (da[static_cast<std::size_t>(j)] - row_dot) * scale;
          if (ds == 0.0) continue;
          for (int t = 0; t < dh; ++t) {
            dq(i, off + t) += ds * c.k(j, off + t);
            dk(j, off + t) += ds * c.q(i, off + t);
          }
        }
      }
    }
    if (sink) {
      add_outer((*sink)[base + 2], c.h1, dq);
      add_colsum((*sink)[base + 3], dq);
      add_outer((*sink)[base + 4], c.h1, dk);
      add_colsum((*sink)[base + 5], dk);
      add_outer((*sink)[base + 6], c.h1, dv);
      add_colsum((*sink)[base + 7], dv);
    }
    linalg::Mat dh1 = linalg::matmul_nt(dq, blk.wq);
    linalg::add_inplace(dh1, linalg::matmul_nt(dk, blk.wk));
    linalg::add_inplace(dh1, linalg::matmul_nt(dv, blk.wv));
    if (sink) add_layer_norm_grads((*sink)[base + 0], (*sink)[base + 1], dh1, c.ln1);
    linalg::Mat dx = linalg::layer_norm_backward(dh1, blk.ln1_g, c.ln1);
    linalg::add_inplace(dx, dx2);
    return dx;
  }

  // Parameter layout: patch_w, patch_b, pos, 16 tensors per block, final_ln (2), decoder (3).
  PixelArray backward_tokens(const linalg::Mat& d_out, const EncoderCache& cache, GradSink* sink = nullptr) const {
    const std::size_t lnf = 3 + 16 * w_.blocks.size();
    if (sink) add_layer_norm_grads((*sink)[lnf], (*sink)[lnf + 1], d_out, cache.lnf);
    linalg::Mat dx = linalg::layer_norm_backward(d_out, w_.lnf_g, cache.lnf);
    for (std::size_t b = w_.blocks.size(); b-- > 0;) dx = block_backward(w_.blocks[b], dx, cache.blocks[b], sink, 3 + 16 * b);
    if (sink) {
      add_outer((*sink)[0], cache.patches, dx);
      add_colsum((*sink)[1], dx);
      for (std::size_t i = 0; i < dx.v.size(); ++i) (*sink)[2][i] += dx.v[i];
    }
    const linalg::Mat d_patches = linalg::matmul_nt(dx, w_.patch_w);

    const int p = cfg_.patch_size;
    PixelArray grad(cfg_.height, cfg_.width, 3);
    for (int gy = 0; gy < grid_h_; ++gy) {
      for (int gx = 0; gx < grid_w_; ++gx) {
        const double* row = d_patches.row(gy * grid_w_ + gx);
        for (int py = 0; py < p; ++py) {
          for (int px = 0; px < p; ++px) {
            for (int c = 0; c < 3; ++c) {
              grad.at(gy * p + py, gx * p + px, c) = row[(py * p + px) * 3 + c] / kPixelStd;
            }
          }
        }
      }
    }
    return grad;
  }

  EmbeddingGrid to_grid(const linalg::Mat& tokens) const {
    EmbeddingGrid e(grid_h_, grid_w_, tokens.cols);
    e.data = tokens.v;
    return e;
  }

  linalg::Mat from_grid(const EmbeddingGrid& e) const {
    linalg::Mat m(e.height * e.width, e.channels);
    m.v = e.data;
    return m;
  }

  // --- decoder ----------------------------------------------------------

  /// Per-pixel keys, (H*W) x key_dim.
  linalg::Mat pixel_keys(const EmbeddingGrid& embedding) const {
    linalg::Mat grid_keys = linalg::matmul(from_grid(embedding), w_.key_proj);
    center_rows(grid_keys);
    const int dk = grid_keys.cols;
    linalg::Mat keys = pixel_key_bias_;
    for (int y = 0; y < cfg_.height; ++y) {
      const Tap& ty = row_taps_[static_cast<std::size_t>(y)];
      for (int x = 0; x < cfg_.width; ++x) {
        const Tap& tx = col_taps_[static_cast<std::size_t>(x)];
        double* out = keys.row(y * cfg_.width + x);
        const double* g00 = grid_keys.row(ty.i0 * grid_w_ + tx.i0);
        const double* g01 = grid_keys.row(ty.i0 * grid_w_ + tx.i1);
        const double* g10 = grid_keys.row(ty.i1 * grid_w_ + tx.i0);
        const double* g11 = grid_keys.row(ty.i1 * grid_w_ + tx.i1);
        const double w00 = ty.w0 * tx.w0, w01 = ty.w0 * tx.w1, w10 = ty.w1 * tx.w0, w11 = ty.w1 * tx.w1;
        for (int j = 0; j < dk; ++j) out[j] += w00 * g00[j] + w01 * g01[j] + w10 * g10[j] + w11 * g11[j];
      }
    }
    return keys;
  }

  linalg::Mat upsample_transpose(const linalg::Mat& d_keys) const {
    const int dk = d_keys.cols;
    linalg::Mat d_grid(grid_h_ * grid_w_, dk);
    for (int y = 0; y < cfg_.height; ++y) {
      const Tap& ty = row_taps_[static_cast<std::size_t>(y)];
      for (int x = 0; x < cfg_.width; ++x) {
        const Tap& tx = col_taps_[static_cast<std::size_t>(x)];
        const double* g = d_keys.row(y * cfg_.width + x);
        double* g00 = d_grid.row(ty.i0 * grid_w_ + tx.i0);
        double* g01 = d_grid.row(ty.i0 * grid_w_ + tx.i1);
        double* g10 = d_grid.row(ty.i1 * grid_w_ + tx.i0);
        double* g11 = d_grid.row(ty.i1 * grid_w_ + tx.i1);
        const double w00 = ty.w0 * tx.w0, w01 = ty.w0 * tx.w1, w10 = ty.w1 * tx.w0, w11 = ty.w1 * tx.w1;
        for (int j = 0; j < dk; ++j) {
          g00[j] += w00 * g[j];
          g01[j] += w01 * g[j];
          g10[j] += w10 * g[j];
          g11[j] += w11 * g[j];
        }
      }
    }
    return d_grid;
  }

  std::vector<double> prompt_key(const linalg::Mat& keys, const Prompt& prompt) const {
    const int dk = keys.cols;
    std::vector<double> k(static_cast<std::size_t>(dk), 0.0);
    if (const auto* pt = std::get_if<PointPrompt>(&prompt)) {
      const double* a = keys.row(pt->y * cfg_.width + pt->x);
      k.assign(a, a + dk);
      return k;
    }
    const auto& box = std::get<BoxPrompt>(prompt);
    const double inv = 1.0 / (static_cast<double>(box.x2 - box.x1) * (box.y2 - box.y1));
    for (int y = box.y1; y < box.y2; ++y) {
      for (int x = box.x1; x < box.x2; ++x) {
        const double* a = keys.row(y * cfg_.width + x);
        for (int j = 0; j < dk; ++j) k[static_cast<std::size_t>(j)] += a[j] * inv;
      }
    }
    return k;
  }

  void scatter_prompt_key_grad(linalg::Mat& d_keys, const Prompt& prompt, const std::vector<double>& d_k) const {
    const int dk = d_keys.cols;
    if (const auto* pt = std::get_if<PointPrompt>(&prompt)) {
      double* da = d_keys.row(pt->y * cfg_.width + pt->x);
      for (int j = 0; j < dk; ++j) da[j] += d_k[static_cast<std::size_t>(j)];
      return;
    }
    const auto& box = std::get<BoxPrompt>(prompt);
    const double inv = 1.0 / (static_cast<double>(box.x2 - box.x1) * (box.y2 - box.y1));
    for (int y = box.y1; y < box.y2; ++y) {
      for (int x = box.x1; x < box.x2; ++x) {
        double* da = d_keys.row(y * cfg_.width + x);
        for (int j = 0; j < dk; ++j) da[j] += d_k[static_cast<std::size_t>(j)] * inv;
      }
    }
  }

  ToyModelConfig cfg_;
  std::vector<NamedTensor> params_;
  std::vector<double> init_std_;
  Weights w_;
  int grid_h_ = 0;
  int grid_w_ = 0;
  std::vector<Tap> row_taps_, col_taps_;
  linalg::Mat pixel_key_bias_;
};

}  // namespace pata
