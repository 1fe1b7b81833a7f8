// Decoder attack with K training points, scored on K and on held-out points.

#include <cstdio>

#include "pata/pata.hpp"

int main() {
  using namespace pata;
  const ToyModel model{ToyModelConfig{}};
  const ImageTensor clean = synthetic_image(32, 32, 3);
  const ImageTensor target = synthetic_image(32, 32, 4);
  const PromptSet test = sample_points(64, model.input_resolution(), 7);

  AttackConfig cfg;
  cfg.iterations = 100;
  const auto rows = cross_prompt_experiment(model, clean, target, {1, 2, 4, 8, 16}, test, cfg);

  std::printf("baseline test mIoU %.4f\n", score_prompts(model, clean, target, test).miou);
  std::printf("%4s %10s %10s\n", "K", "train", "test");
  for (const auto& r : rows) std::printf("%4d %10.4f %10.4f\n", r.k, r.train_miou, r.test_miou);
}
