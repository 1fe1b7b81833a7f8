#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "test_support.hpp"

namespace pata {
namespace {

using testing::random_image;
using testing::toy_model;

TEST(ToyModel, EncodeZeroImageIsFiniteAndRepeatable) {
  const ImageTensor zero(32, 32, 3, 0.0);
  const EmbeddingGrid a = encode_image(toy_model(), zero);
  const EmbeddingGrid b = encode_image(toy_model(), zero);
  EXPECT_TRUE(a.all_finite());
  EXPECT_EQ(a, b);
}

TEST(ToyModel, CopyOfImageEncodesIdentically) {
  const ImageTensor img = random_image(32, 32, 11);
  const ImageTensor copy = img;
  EXPECT_EQ(encode_image(toy_model(), img), encode_image(toy_model(), copy));
}

TEST(ToyModel, SameSeedSameModel) {
  const ToyModel a{ToyModelConfig{}}, b{ToyModelConfig{}};
  const ImageTensor img = random_image(32, 32, 12);
  EXPECT_EQ(a.encode(img), b.encode(img));
  ToyModelConfig other;
  other.seed = 1;
  EXPECT_NE(ToyModel(other).encode(img), a.encode(img));
}

TEST(ToyModel, EmbeddingShapeIndependentOfContent) {
  const Resolution g = toy_model().embedding_grid();
  EXPECT_EQ(g, (Resolution{4, 4}));
  for (std::uint64_t s = 0; s < 3; ++s) {
    const EmbeddingGrid e = encode_image(toy_model(), random_image(32, 32, s));
    EXPECT_EQ(e.height, 4);
    EXPECT_EQ(e.width, 4);
    EXPECT_EQ(e.channels, 64);
  }
}

TEST(ToyModel, WrongResolutionIsConfigErrorNamingBoth) {
  try {
    encode_image(toy_model(), ImageTensor(16, 32, 3));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("32x32x3"), std::string::npos);
    EXPECT_NE(what.find("16x32x3"), std::string::npos);
  }
}

TEST(ToyModel, InvalidConfigsRejected) {
  ToyModelConfig c;
  c.height = 30;
  EXPECT_THROW(ToyModel{c}, ConfigError);
  c = {};
  c.heads = 5;
  EXPECT_THROW(ToyModel{c}, ConfigError);
}

TEST(ToyModel, GoldenEmbeddingOfReferenceImage) {
  const std::string path = std::string(PATA_TEST_DATA_DIR) + "/golden_embedding_seed0.json";
  const EmbeddingGrid e = encode_image(toy_model(), reference_image());
  if (std::getenv("PATA_REGENERATE_GOLDEN")) {
    write_json_file(path, Json{{"model", toy_model().identity()},
                               {"image", "reference_image(32, 32)"},
                               {"shape", {e.height, e.width, e.channels}},
                               {"values", e.data}});
  }
  const Json golden = read_json_file(path);
  ASSERT_EQ(golden.at("shape").get<std::vector<int>>(), (std::vector<int>{e.height, e.width, e.channels}));
  const auto values = golden.at("values").get<std::vector<double>>();
  ASSERT_EQ(values.size(), e.size());
  for (std::size_t i = 0; i < values.size(); ++i) ASSERT_NEAR(e.data[i], values[i], 1e-9) << "entry " << i;
}

TEST(ToyModel, DecodeIsDeterministic) {
  const EmbeddingGrid e = encode_image(toy_model(), reference_image());
  EXPECT_EQ(toy_model().decode(e, PointPrompt{5, 9}), toy_model().decode(e, PointPrompt{5, 9}));
}

TEST(ToyModel, DistinctPointsGiveDifferentLogits) {
  const EmbeddingGrid e = encode_image(toy_model(), reference_image());
  EXPECT_NE(toy_model().decode(e, PointPrompt{4, 4}), toy_model().decode(e, PointPrompt{27, 20}));
}

TEST(ToyModel, FullBoxAndOnePixelBoxMaskDifferentCounts) {
  const EmbeddingGrid e = encode_image(toy_model(), reference_image());
  const auto full = binarize(toy_model().decode(e, BoxPrompt{0, 0, 32, 32}));
  const auto tiny = binarize(toy_model().decode(e, BoxPrompt{16, 16, 17, 17}));
  EXPECT_NE(full.count(), tiny.count());
}

TEST(ToyModel, ReferenceImageMaskIsNonEmpty) {
  const MaskLogits logits = forward(toy_model(), reference_image(), PointPrompt{16, 16});
  EXPECT_GT(binarize(logits).count(), 0u);
}

TEST(ToyModel, ForwardEqualsTwoStageComposition) {
  const ImageTensor img = random_image(32, 32, 13);
  for (const Prompt& p : {Prompt{PointPrompt{3, 30}}, Prompt{BoxPrompt{2, 5, 20, 29}}}) {
    EXPECT_EQ(forward(toy_model(), img, p), decode_mask(toy_model(), encode_image(toy_model(), img), p));
  }
}

TEST(ToyModel, LogitsHaveInputShapeAndAreFinite) {
  const MaskLogits m = forward(toy_model(), reference_image(), BoxPrompt{1, 1, 9, 9});
  EXPECT_EQ(m.height, 32);
  EXPECT_EQ(m.width, 32);
  EXPECT_EQ(m.channels, 1);
  EXPECT_TRUE(m.all_finite());
}

TEST(ToyModel, OutOfBoundsPromptIsInputError) {
  const EmbeddingGrid e = encode_image(toy_model(), reference_image());
  EXPECT_THROW(decode_mask(toy_model(), e, PointPrompt{32, 0}), InputError);
  EXPECT_THROW(decode_mask(toy_model(), e, BoxPrompt{0, 0, 33, 4}), InputError);
}

TEST(ToyModel, BinarizationFollowsLogitSign) {
  const MaskLogits m = forward(toy_model(), reference_image(), PointPrompt{8, 20});
  const BinaryMask b = binarize(m);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) EXPECT_EQ(b.at(y, x), m.at(y, x) > 0.0);
}

TEST(InputGradient, ConstantLossHasZeroGradient) {
  const PixelArray g = input_gradient(toy_model(), random_image(32, 32, 14), losses::constant(3.5));
  for (double v : g.data) EXPECT_EQ(v, 0.0);
}

TEST(InputGradient, EmbeddingSumIsInvariant) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    const ImageTensor img = random_image(32, 32, 15 + s);
    const LossAndGradient lg = loss_and_gradient(toy_model(), img, losses::embedding_sum());
    EXPECT_NEAR(lg.value, 0.0, 1e-9);
    for (double v : lg.gradient.data) EXPECT_NEAR(v, 0.0, 1e-12);
  }
}

TEST(InputGradient, SquaredNormMatchesFiniteDifferences) {
  const LossSpec half_squared_norm = [](const EmbeddingGrid& e) {
    double s = 0.0;
    for (double v : e.data) s += 0.5 * v * v;
    return LossValue{s, e};
  };
  const ImageTensor img = random_image(32, 32, 15, 0.05, 0.95);
  const GradCheckResult r = check_input_gradient(toy_model(), img, half_squared_norm, 100, 1);
  EXPECT_EQ(r.pixels, 100);
  EXPECT_LT(r.relative_error, 1e-3);
}

TEST(InputGradient, RandomLinearFunctionalsMatchFiniteDifferences) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    const ImageTensor img = random_image(32, 32, 100 + s, 0.05, 0.95);
    const GradCheckResult r = check_input_gradient(toy_model(), img, random_linear_loss(toy_model(), s), 100, s);
    EXPECT_LT(r.relative_error, 1e-3) << "image " << s;
    EXPECT_LT(r.worst_pixel_error, 1e-3) << "image " << s;
  }
}

TEST(InputGradient, MseAtMinimizerIsStationary) {
  const ImageTensor img = random_image(32, 32, 16);
  const EmbeddingGrid target = encode_image(toy_model(), img);
  const LossSpec mse = [&](const EmbeddingGrid& e) {
    const FeatureLossValue v = feature_loss_with_grad(e, target, FeatureLossKind::mse);
    return LossValue{v.value, v.grad};
  };
  const PixelArray g = input_gradient(toy_model(), img, mse);
  EXPECT_LT(l2_norm(g.values()), 1e-6);
}

TEST(InputGradient, DecoderLossMatchesFiniteDifferences) {
  const ImageTensor img = random_image(32, 32, 17, 0.05, 0.95);
  const std::vector<Prompt> prompts{PointPrompt{7, 21}, BoxPrompt{3, 4, 19, 30}};
  const MaskLogits w = testing::random_logits(32, 32, 5);
  const LossSpec loss = [&](const EmbeddingGrid& e) {
    LossValue out{0.0, EmbeddingGrid(e.height, e.width, e.channels)};
    std::vector<MaskLogits> ds;
    for (const auto& p : prompts) {
      out.value += dot(toy_model().decode(e, p).values(), w.values());
      ds.push_back(w);
    }
    out.d_embedding = toy_model().decode_vjp_sum(e, prompts, ds);
    return out;
  };
  EXPECT_LT(check_input_gradient(toy_model(), img, loss, 100, 9).relative_error, 1e-3);
}

TEST(InputGradient, NonFiniteLossIsNumericalError) {
  const LossSpec bad = [](const EmbeddingGrid& e) {
    return LossValue{std::numeric_limits<double>::infinity(), EmbeddingGrid(e.height, e.width, e.channels)};
  };
  EXPECT_THROW(input_gradient(toy_model(), reference_image(), bad), NumericalError);
}

TEST(ToyModel, EncoderParameterGradientsMatchFiniteDifferences) {
  const ToyModel& m = toy_model();
  const ImageTensor img = synthetic_image(32, 32, 5);
  const Resolution g = m.embedding_grid();
  const EmbeddingGrid w = testing::random_grid(g.height, g.width, m.embedding_dim(), 21);
  std::vector<std::vector<double>> grads;
  m.accumulate_encoder_gradients(img, w, grads);
  auto value = [&](const std::vector<NamedTensor>& p) {
    ToyModel copy(m.config());
    copy.set_parameters(p);
    return dot(copy.encode(img).values(), w.values());
  };
  const double h = 1e-5;
  double diff2 = 0.0, ref2 = 0.0;
  for (std::size_t t = 0; t < m.decoder_parameter_offset(); ++t) {
    auto params = m.parameters();
    const std::size_t i = (t * 7919) % params[t].data.size();
    params[t].data[i] += h;
    const double up = value(params);
    params[t].data[i] -= 2 * h;
    const double down = value(params);
    const double numeric = (up - down) / (2 * h);
    diff2 += (numeric - grads[t][i]) * (numeric - grads[t][i]);
    ref2 += numeric * numeric;
  }
  EXPECT_LT(std::sqrt(diff2 / ref2), 1e-5);
}

TEST(ToyModel, SetParametersValidatesNames) {
  ToyModel m{ToyModelConfig{}};
  auto p = m.parameters();
  p[0].name = "nope";
  EXPECT_THROW(m.set_parameters(p), InputError);
  p = m.parameters();
  p.pop_back();
  EXPECT_THROW(m.set_parameters(p), InputError);
}

TEST(ToyModel, FamilyVariantsAreCloseButDistinct) {
  ToyModelConfig a, b, far;
  a.family_seed = b.family_seed = 7;
  a.variant_scale = b.variant_scale = 0.1;
  a.seed = 1;
  b.seed = 2;
  far.seed = 3;
  const ImageTensor img = reference_image();
  const EmbeddingGrid ea = ToyModel(a).encode(img), eb = ToyModel(b).encode(img), ef = ToyModel(far).encode(img);
  EXPECT_NE(ea, eb);
  EXPECT_GT(cosine_similarity(ea.values(), eb.values()), cosine_similarity(ea.values(), ef.values()));
  EXPECT_NE(ToyModel(a).identity(), ToyModel(b).identity());
}

TEST(ToyModel, ConcurrentEncodingMatchesSequential) {
  const ImageTensor img = random_image(32, 32, 18);
  const EmbeddingGrid ref = encode_image(toy_model(), img);
  std::vector<EmbeddingGrid> out(4);
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) threads.emplace_back([&, t] { out[t] = encode_image(toy_model(), img); });
  for (auto& th : threads) th.join();
  for (const auto& e : out) EXPECT_EQ(e, ref);
}

TEST(ToyTrain, RefinementIsDeterministicAndLowersLoss) {
  RefineConfig rc;
  rc.steps = 12;
  std::vector<double> l1, l2;
  ToyModel a{ToyModelConfig{}}, b{ToyModelConfig{}};
  refine_toy_model(a, rc, [&](const RefineProgress& p) { l1.push_back(p.loss); });
  refine_toy_model(b, rc, [&](const RefineProgress& p) { l2.push_back(p.loss); });
  EXPECT_EQ(l1, l2);
  EXPECT_EQ(a.encode(reference_image()), b.encode(reference_image()));
  EXPECT_NE(a.encode(reference_image()), toy_model().encode(reference_image()));
  ASSERT_EQ(l1.size(), 12u);
  const double head = (l1[0] + l1[1] + l1[2]) / 3, tail = (l1[9] + l1[10] + l1[11]) / 3;
  EXPECT_LT(tail, head);
}

}  // namespace
}  // namespace pata
