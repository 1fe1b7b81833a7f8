#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "test_support.hpp"

namespace pata {
namespace {

ExperimentSpec small_spec(const std::filesystem::path& root, int n_pairs = 3) {
  testing::write_synthetic_dataset(root / "data", n_pairs + 2);
  ExperimentSpec s;
  s.dataset_dir = (root / "data").string();
  s.output_dir = (root / "out").string();
  s.n_pairs = n_pairs;
  s.attack.iterations = 6;
  s.attack.fd_samples = 2;
  s.prompt_eval.test_points = 16;
  return s;
}

TEST(Pairing, DerangementHasNoFixedPoints) {
  for (std::size_t n : {2u, 3u, 5u, 17u, 100u}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto p = derangement(n, seed);
      std::set<std::size_t> seen(p.begin(), p.end());
      EXPECT_EQ(seen.size(), n);
      for (std::size_t i = 0; i < n; ++i) EXPECT_NE(p[i], i);
      EXPECT_EQ(p, derangement(n, seed));
    }
  }
  EXPECT_EQ(derangement(2, 4), (std::vector<std::size_t>{1, 0}));
  EXPECT_THROW(derangement(1, 0), InputError);
}

TEST(Pairing, MakePairsNeverPairsAnItemWithItself) {
  const std::vector<std::string> items{"a", "b", "c", "d"};
  const auto pairs = make_pairs(items, 3);
  ASSERT_EQ(pairs.size(), items.size());
  std::multiset<std::string> targets;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(pairs[i].first, items[i]);
    EXPECT_NE(pairs[i].first, pairs[i].second);
    targets.insert(pairs[i].second);
  }
  EXPECT_EQ(targets, std::multiset<std::string>(items.begin(), items.end()));
}

TEST(Dataset, IngestIsSeededAndResized) {
  const auto dir = testing::scratch_dir("ingest");
  testing::write_synthetic_dataset(dir, 6);
  write_png((dir / "big.png").string(), ImageTensor(64, 48, 3, 0.5));
  const auto a = ingest_dataset(dir, 7, 11, {32, 32}), b = ingest_dataset(dir, 7, 11, {32, 32});
  ASSERT_EQ(a.size(), 7u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].ref, b[i].ref);
    EXPECT_EQ(a[i].image.height, 32);
    EXPECT_EQ(a[i].image.width, 32);
    EXPECT_TRUE(in_pixel_domain(a[i].image));
  }
  EXPECT_EQ(ingest_dataset(dir, 1, 0, {32, 32}).size(), 1u);
}

TEST(Dataset, TooFewImagesReportsCounts) {
  const auto dir = testing::scratch_dir("few");
  testing::write_synthetic_dataset(dir, 2);
  try {
    ingest_dataset(dir, 5, 0, {32, 32});
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("has 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("need 5"), std::string::npos) << msg;
  }
  EXPECT_THROW(ingest_dataset(dir / "missing", 1, 0, {32, 32}), InputError);
}

TEST(Dataset, UndecodableFilesAreSkippedWithWarning) {
  const auto dir = testing::scratch_dir("corrupt");
  testing::write_synthetic_dataset(dir, 3);
  std::ofstream((dir / "broken.png").string()) << "garbage";
  std::vector<std::string> warnings;
  EXPECT_THROW(ingest_dataset(dir, 4, 0, {32, 32}, [&](const std::string& w) { warnings.push_back(w); }), InputError);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("broken.png"), std::string::npos);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto imgs = ingest_dataset(dir, 3, seed, {32, 32}, nullptr);
    EXPECT_EQ(imgs.size(), 3u);
    for (const auto& im : imgs) EXPECT_NE(im.ref, "broken.png");
  }
}

TEST(ExperimentSpecJson, RoundTripAndUnknownKeys) {
  ExperimentSpec s;
  s.dataset_dir = "data";
  s.n_pairs = 7;
  s.attack.epsilon = 4.0 / 255.0;
  s.sweep = SweepSpec{SweepParam::epsilon, {0.0, 0.01}};
  const ExperimentSpec back = experiment_spec_from_json(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));
  EXPECT_THROW(experiment_spec_from_json(Json{{"datset_dir", "x"}}), ConfigError);
  EXPECT_THROW(experiment_spec_from_json(Json{{"attack", {{"epsilonn", 1}}}}), ConfigError);
  EXPECT_THROW(experiment_spec_from_json(Json{{"sweep", {{"param", "gamma"}, {"values", {1}}}}}), ConfigError);
}

TEST(RunExperiment, ZeroBudgetScoresEqualBaseline) {
  const auto root = testing::scratch_dir("eps0");
  ExperimentSpec s = small_spec(root);
  s.attack.epsilon = 0.0;
  const RunRecord r = run_experiment(s, nullptr, false);
  ASSERT_FALSE(r.aggregate.empty());
  for (const auto& [id, v] : r.aggregate) EXPECT_EQ(v, r.baseline_aggregate.at(id));
}

TEST(RunExperiment, ArtifactLayoutAndConsistentAggregate) {
  const auto root = testing::scratch_dir("layout");
  ExperimentSpec s = small_spec(root);
  s.prompt_eval.boxes = 4;
  s.prompt_eval.grid_stride = 16;
  const RunRecord r = run_experiment(s, nullptr, true);
  const auto out = root / "out";
  ASSERT_TRUE(std::filesystem::exists(out / "run.json"));
  for (const auto& p : r.per_pair) {
    const auto dir = out / "pairs" / path_safe(p.pair_id);
    EXPECT_TRUE(std::filesystem::exists(dir / "adv.png"));
    EXPECT_TRUE(std::filesystem::exists(dir / "fd.csv"));
    EXPECT_TRUE(std::filesystem::is_directory(dir / "masks"));
    EXPECT_NE(p.clean_ref, p.target_ref);
  }

  const Json j = read_json_file((out / "run.json").string());
  const RunRecord back = run_record_from_json(j);
  for (const auto& id : back.model_ids) {
    double sum = 0.0;
    for (const auto& p : back.per_pair) sum += p.per_model.at(id).miou;
    EXPECT_NEAR(back.aggregate.at(id), sum / back.per_pair.size(), 1e-12);
  }

  const AuditReport audit = audit_run(out);
  EXPECT_TRUE(audit.ok());
  EXPECT_EQ(audit.pairs_checked, 3);
  EXPECT_LE(audit.max_linf, s.attack.epsilon + 1e-6);

  const RunRecord rescored = rescore_run(out);
  for (const auto& [id, v] : r.aggregate) EXPECT_NEAR(rescored.aggregate.at(id), v, 1e-12);

  std::vector<std::string> warnings;
  const auto files = emit_plots(out, [&](const std::string& w) { warnings.push_back(w); });
  int panels = 0;
  for (const auto& f : files) panels += f.parent_path().filename() == "panels";
  EXPECT_EQ(panels, 3 * 3);
  EXPECT_TRUE(std::filesystem::exists(out / "plots" / "fd.svg"));
  EXPECT_TRUE(warnings.empty());

  const Series fd = mean_fd_series(back, "pata");
  ASSERT_FALSE(fd.x.empty());
  EXPECT_EQ(fd.x.front(), 0.0);
  EXPECT_EQ(fd.x.back(), s.attack.iterations);
}

TEST(RunExperiment, AuditFlagsTamperedImages) {
  const auto root = testing::scratch_dir("tamper");
  ExperimentSpec s = small_spec(root, 2);
  s.attack.iterations = 2;
  const RunRecord r = run_experiment(s, nullptr, true);
  const auto dir = root / "out" / "pairs" / path_safe(r.per_pair[0].pair_id);
  ImageTensor adv = read_raw_image((dir / "adv.f64").string());
  adv.data[0] = adv.data[0] > 0.5 ? 0.0 : 1.0;
  write_raw_image((dir / "adv.f64").string(), adv);
  const AuditReport audit = audit_run(root / "out");
  EXPECT_FALSE(audit.ok());
  EXPECT_EQ(audit.violations.size(), 1u);
}

TEST(RunExperiment, DeterministicRecords) {
  const auto root = testing::scratch_dir("determinism");
  ExperimentSpec s = small_spec(root);
  s.attack.method = AttackMethod::pata_plus_plus;
  const RunRecord a = run_experiment(s, nullptr, false), b = run_experiment(s, nullptr, false);
  ASSERT_EQ(a.per_pair.size(), b.per_pair.size());
  for (const auto& [id, v] : a.aggregate) EXPECT_NEAR(v, b.aggregate.at(id), 1e-10);
  for (std::size_t i = 0; i < a.per_pair.size(); ++i) {
    const auto &ta = a.per_pair[i].fd_trajectory, &tb = b.per_pair[i].fd_trajectory;
    ASSERT_EQ(ta.size(), tb.size());
    for (std::size_t t = 0; t < ta.size(); ++t) {
      EXPECT_NEAR(ta[t].total_loss, tb[t].total_loss, 1e-10);
      ASSERT_EQ(ta[t].fd_estimate.has_value(), tb[t].fd_estimate.has_value());
      if (ta[t].fd_estimate) {
        EXPECT_NEAR(*ta[t].fd_estimate, *tb[t].fd_estimate, 1e-10);
      }
    }
  }
}

TEST(RunExperiment, WorkerCountDoesNotChangeResults) {
  const auto root = testing::scratch_dir("workers");
  ExperimentSpec s = small_spec(root);
  const RunRecord one = run_experiment(s, nullptr, false);
  s.workers = 3;
  const RunRecord three = run_experiment(s, nullptr, false);
  EXPECT_EQ(one.aggregate, three.aggregate);
}

TEST(RunExperiment, DecoderAttackSkipsFdPlotWithWarning) {
  const auto root = testing::scratch_dir("decoder_plot");
  ExperimentSpec s = small_spec(root, 2);
  s.attack.method = AttackMethod::decoder_attack;
  s.attack.iterations = 3;
  run_experiment(s, nullptr, true);
  std::vector<std::string> warnings;
  const auto files = emit_plots(root / "out", [&](const std::string& w) { warnings.push_back(w); });
  EXPECT_FALSE(std::filesystem::exists(root / "out" / "plots" / "fd.svg"));
  ASSERT_FALSE(warnings.empty());
  EXPECT_NE(warnings.front().find("decoder_attack"), std::string::npos);
}

TEST(RunPairs, FailurePolicy) {
  const auto model = testing::toy_model_ptr();
  RunOptions opt;
  opt.attack.iterations = 2;
  opt.attack.fd_samples = 0;
  opt.eval_sets = evaluation_prompt_sets(PromptEvalSpec{8, 0, 0}, {32, 32}, 0);
  opt.warn = nullptr;
  auto make = [](int n, int bad) {
    std::vector<PairInput> pairs;
    for (int i = 0; i < n; ++i) {
      PairInput in;
      in.id = std::to_string(i);
      in.clean = synthetic_image(32, 32, static_cast<std::uint64_t>(i));
      in.target = synthetic_image(32, 32, static_cast<std::uint64_t>(i + 100));
      if (i < bad) in.clean.data[0] = 2.0;
      pairs.push_back(std::move(in));
    }
    return pairs;
  };
  const RunRecord ok = run_pairs(model, {model}, make(10, 1), opt);
  EXPECT_EQ(ok.failures, 1);
  EXPECT_FALSE(ok.per_pair[0].ok);
  double sum = 0.0;
  for (std::size_t i = 1; i < 10; ++i) sum += ok.per_pair[i].per_model.at(model->identity()).miou;
  EXPECT_NEAR(ok.aggregate.at(model->identity()), sum / 9, 1e-12);
  EXPECT_THROW(run_pairs(model, {model}, make(10, 2), opt), InputError);
}

TEST(Sweep, ZeroEpsilonRowMatchesBaseline) {
  const auto root = testing::scratch_dir("sweep");
  ExperimentSpec s = small_spec(root, 2);
  s.attack.iterations = 3;
  s.sweep = SweepSpec{SweepParam::epsilon, {0.0, 8.0 / 255.0}};
  const auto rows = run_sweep(s, nullptr, true);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& [id, v] : rows[0].aggregate) EXPECT_EQ(v, rows[0].baseline.at(id));
  EXPECT_TRUE(std::filesystem::exists(root / "out" / "sweep.json"));
  EXPECT_TRUE(std::filesystem::exists(root / "out" / "sweep.csv"));
}

TEST(CrossPromptRun, TableShape) {
  const auto root = testing::scratch_dir("xprompt");
  ExperimentSpec s = small_spec(root, 2);
  s.attack.iterations = 3;
  const CrossPromptTable t = run_cross_prompt(s, {1, 4}, nullptr, true);
  ASSERT_EQ(t.mean.size(), 2u);
  EXPECT_EQ(t.mean[0].k, 1);
  EXPECT_EQ(t.mean[1].k, 4);
  EXPECT_TRUE(std::filesystem::exists(root / "out" / "cross_prompt.json"));
  const auto files = emit_plots(root / "out", nullptr);
  EXPECT_NE(std::find(files.begin(), files.end(), root / "out" / "plots" / "miou_vs_k.svg"), files.end());
}

}  // namespace
}  // namespace pata
