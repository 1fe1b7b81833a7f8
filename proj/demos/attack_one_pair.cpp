// Attacks one synthetic pair with each method and prints the loss, fd and
// mIoU before and after.

#include <cstdio>

#include "pata/pata.hpp"

int main() {
  using namespace pata;
  const ToyModel model{ToyModelConfig{}};
  const ImageTensor clean = synthetic_image(32, 32, 0);
  const ImageTensor target = synthetic_image(32, 32, 1);
  const PromptSet test = sample_points(64, model.input_resolution(), 1);

  std::vector<ImageTensor> pool;
  for (std::uint64_t s = 2; s < 10; ++s) pool.push_back(synthetic_image(32, 32, s));

  std::printf("baseline mIoU(clean, target) = %.4f\n", score_prompts(model, clean, target, test).miou);
  for (AttackMethod method : {AttackMethod::pata, AttackMethod::pata_plus, AttackMethod::pata_plus_plus}) {
    AttackConfig cfg;
    cfg.method = method;
    cfg.iterations = 100;
    cfg.fd_every = 100;
    cfg.competition.pool_images = pool;
    CompetitionSpec fd;
    fd.source = CompetitionSource::external_images;
    fd.pool_images = pool;
    cfg.fd_competition = fd;
    const AttackResult r = run_attack(model, clean, target, {}, cfg);
    const IterationRecord& first = r.per_iteration.front();
    const IterationRecord& last = r.per_iteration.back();
    std::printf("%-15s loss %.4f -> %.4f  fd %+.4f -> %+.4f  mIoU %.4f  linf %.5f  %.2fs\n",
                json_detail::enum_name(json_detail::kMethods, method), first.feature_loss, last.feature_loss,
                first.fd_estimate.value_or(0.0), last.fd_estimate.value_or(0.0),
                score_prompts(model, r.adv_image, target, test).miou, linf_distance(r.adv_image, clean),
                r.elapsed.count());
  }
}
