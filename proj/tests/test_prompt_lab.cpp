#include <gtest/gtest.h>

#include <set>

#include "test_support.hpp"

namespace pata {
namespace {

TEST(SamplePoints, SinglePixelImage) {
  const PromptSet s = sample_points(1, {1, 1}, 3);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(std::get<PointPrompt>(s.prompts[0]), (PointPrompt{0, 0}));
}

TEST(SamplePoints, SameSeedSameSet) {
  EXPECT_EQ(sample_points(20, {32, 32}, 5).prompts, sample_points(20, {32, 32}, 5).prompts);
  EXPECT_NE(sample_points(20, {32, 32}, 5).prompts, sample_points(20, {32, 32}, 6).prompts);
}

TEST(SamplePoints, UniformMean) {
  const PromptSet s = sample_points(1000, {32, 32}, 7);
  double sx = 0.0;
  for (const auto& p : s.prompts) sx += std::get<PointPrompt>(p).x;
  EXPECT_NEAR(sx / 1000, 15.5, 1.5);
}

TEST(SamplePoints, DistinctAndInBounds) {
  const PromptSet s = sample_points(1024, {32, 32}, 8);
  std::set<PointPrompt> seen;
  for (const auto& p : s.prompts) {
    EXPECT_TRUE(prompt_in_bounds(p, 32, 32));
    EXPECT_TRUE(seen.insert(std::get<PointPrompt>(p)).second);
  }
}

TEST(SamplePoints, TooManyPointsIsInputError) {
  EXPECT_THROW(sample_points(17, {4, 4}, 0), InputError);
  EXPECT_THROW(sample_points(0, {4, 4}, 0), InputError);
  const PromptSet test = sample_points(10, {4, 4}, 0);
  EXPECT_THROW(sample_points(7, {4, 4}, 1, PromptRole::train, test.prompts), InputError);
}

TEST(SamplePoints, HeaderFields) {
  const PromptSet s = sample_points(3, {8, 8}, 42, PromptRole::train);
  EXPECT_EQ(s.role, PromptRole::train);
  EXPECT_EQ(s.seed, 42u);
  EXPECT_FALSE(s.id.empty());
}

TEST(SamplePoints, TrainSetAvoidsTestSet) {
  const PromptSet test = sample_points(64, {32, 32}, 1);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const PromptSet train = sample_points(100, {32, 32}, seed, PromptRole::train, test.prompts);
    for (const auto& p : train.prompts) {
      EXPECT_EQ(std::find(test.prompts.begin(), test.prompts.end(), p), test.prompts.end());
    }
  }
}

TEST(SampleBoxes, SidesWithinRangeAndInBounds) {
  const PromptSet s = sample_boxes(200, {32, 32}, 3);
  for (const auto& p : s.prompts) {
    const auto& b = std::get<BoxPrompt>(p);
    EXPECT_TRUE(prompt_in_bounds(p, 32, 32));
    EXPECT_LE(b.x2 - b.x1, 32 * 0.8 + 2);
    EXPECT_LE(b.y2 - b.y1, 32 * 0.8 + 2);
  }
}

TEST(Grid, StrideSixteenOnThirtyTwo) {
  const PromptSet g = grid_prompts(16, {32, 32});
  std::vector<Prompt> expected{PointPrompt{8, 8}, PointPrompt{24, 8}, PointPrompt{8, 24}, PointPrompt{24, 24}};
  EXPECT_EQ(g.role, PromptRole::grid);
  ASSERT_EQ(g.size(), 4u);
  std::set<PointPrompt> got, want;
  for (const auto& p : g.prompts) got.insert(std::get<PointPrompt>(p));
  for (const auto& p : expected) want.insert(std::get<PointPrompt>(p));
  EXPECT_EQ(got, want);
}

TEST(Grid, StrideEqualToSideGivesCenter) {
  const PromptSet g = grid_prompts(32, {32, 32});
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(std::get<PointPrompt>(g.prompts[0]), (PointPrompt{16, 16}));
}

TEST(Grid, CountAndCoverage) {
  for (int stride : {1, 3, 5, 7, 10, 32}) {
    for (const Resolution r : {Resolution{32, 32}, Resolution{20, 13}}) {
      const PromptSet g = grid_prompts(stride, r);
      const auto cells = static_cast<std::size_t>(((r.height + stride - 1) / stride) * ((r.width + stride - 1) / stride));
      EXPECT_EQ(g.size(), cells);
      for (int y = 0; y < r.height; ++y)
        for (int x = 0; x < r.width; ++x) {
          const bool covered = std::any_of(g.prompts.begin(), g.prompts.end(), [&](const Prompt& p) {
            const auto& q = std::get<PointPrompt>(p);
            return std::abs(q.x - x) < stride && std::abs(q.y - y) < stride;
          });
          ASSERT_TRUE(covered) << stride << " (" << x << "," << y << ")";
        }
    }
  }
  EXPECT_THROW(grid_prompts(0, {8, 8}), InputError);
}

TEST(ScorePrompts, SelfScoreIsPerfect) {
  const ImageTensor img = synthetic_image(32, 32, 1);
  EXPECT_EQ(score_prompts(testing::toy_model(), img, img, sample_points(16, {32, 32}, 2)).miou, 1.0);
  EXPECT_THROW(score_prompts(testing::toy_model(), img, img, sample_points(4, {64, 64}, 2)), InputError);
}

TEST(CrossPrompt, ZeroBudgetReproducesBaseline) {
  const ImageTensor clean = synthetic_image(32, 32, 3), target = synthetic_image(32, 32, 4);
  const PromptSet test = sample_points(64, {32, 32}, 5);
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  cfg.iterations = 5;
  const auto rows = cross_prompt_experiment(testing::toy_model(), clean, target, {1, 4}, test, cfg);
  const double baseline = score_prompts(testing::toy_model(), clean, target, test).miou;
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.test_miou, baseline);
    const PromptSet train = sample_points(r.k, {32, 32}, cfg.seed + r.k, PromptRole::train, test.prompts);
    EXPECT_EQ(r.train_miou, score_prompts(testing::toy_model(), clean, target, train).miou);
  }
}

TEST(CrossPrompt, TestPromptsNeverEnterTheLoss) {
  const ImageTensor clean = synthetic_image(32, 32, 6), target = synthetic_image(32, 32, 7);
  const PromptSet test = sample_points(64, {32, 32}, 8);
  std::map<std::pair<int, int>, int> calls;
  AttackHooks hooks;
  hooks.on_loss_prompt = [&](const Prompt& p) {
    const auto& q = std::get<PointPrompt>(p);
    ++calls[{q.x, q.y}];
  };
  AttackConfig cfg;
  cfg.iterations = 4;
  cross_prompt_experiment(testing::toy_model(), clean, target, {1, 8, 16}, test, cfg, &hooks);
  int total = 0;
  for (const auto& [xy, n] : calls) {
    total += n;
    EXPECT_EQ(std::find(test.prompts.begin(), test.prompts.end(), Prompt{PointPrompt{xy.first, xy.second}}),
              test.prompts.end());
  }
  EXPECT_EQ(total, (1 + 8 + 16) * 5);
}

TEST(CrossPrompt, RequiresTestRoleAndKValues) {
  const ImageTensor img = synthetic_image(32, 32, 9);
  AttackConfig cfg;
  EXPECT_THROW(cross_prompt_experiment(testing::toy_model(), img, img, {1}, grid_prompts(8, {32, 32}), cfg),
               ConfigError);
  EXPECT_THROW(cross_prompt_experiment(testing::toy_model(), img, img, {}, sample_points(4, {32, 32}, 1), cfg),
               ConfigError);
}

TEST(CrossPrompt, ErrorsNameTheK) {
  const ImageTensor img = synthetic_image(32, 32, 10);
  AttackConfig cfg;
  cfg.iterations = 1;
  try {
    cross_prompt_experiment(testing::toy_model(), img, img, {1, 2000}, sample_points(4, {32, 32}, 1), cfg);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("K=2000"), std::string::npos);
  }
}

TEST(CrossPrompt, DeterministicTable) {
  const ImageTensor clean = synthetic_image(32, 32, 11), target = synthetic_image(32, 32, 12);
  const PromptSet test = sample_points(16, {32, 32}, 13);
  AttackConfig cfg;
  cfg.iterations = 10;
  const auto a = cross_prompt_experiment(testing::toy_model(), clean, target, {2, 4}, test, cfg);
  const auto b = cross_prompt_experiment(testing::toy_model(), clean, target, {2, 4}, test, cfg);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].train_miou, b[i].train_miou);
    EXPECT_EQ(a[i].test_miou, b[i].test_miou);
  }
}

}  // namespace
}  // namespace pata
