#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pata/attack.hpp"
#include "pata/errors.hpp"
#include "pata/image_io.hpp"
#include "pata/image_ops.hpp"
#include "pata/json_io.hpp"
#include "pata/metrics.hpp"
#include "pata/model_io.hpp"
#include "pata/prompt_lab.hpp"

namespace pata {

namespace fs = std::filesystem;

using WarningSink = std::function<void(const std::string&)>;

inline void warn_to_stderr(const std::string& message) { std::cerr << "warning: " << message << '\n'; }

// ---------------------------------------------------------------- dataset

struct DatasetImage {
  std::string ref;
  ImageTensor image;
};

/// Deterministic in-place shuffle (Fisher-Yates over rng()).
template <class T>
void seeded_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

/// Picks n decodable PNG/JPEG files from `dir` in a seeded order, resized to
/// `res` with values in [0,1]. Undecodable files are skipped with a warning.
inline std::vector<DatasetImage> ingest_dataset(const fs::path& dir, int n, std::uint64_t seed, Resolution res,
                                                const WarningSink& warn = warn_to_stderr) {
  if (n < 1) throw InputError("ingest_dataset: n must be >= 1");
  if (!fs::is_directory(dir)) throw InputError("dataset directory not found: " + dir.string());
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path().string())) files.push_back(e.path().filename().string());
  }
  std::sort(files.begin(), files.end());
  std::mt19937_64 rng(seed);
  seeded_shuffle(files, rng);
  std::vector<DatasetImage> out;
  for (const auto& f : files) {
    if (static_cast<int>(out.size()) == n) break;
    try {
      ImageTensor img = read_image((dir / f).string());
      if (img.height != res.height || img.width != res.width) img = resize_bilinear(img, res.height, res.width);
      out.push_back({f, clamp_pixels(std::move(img))});
    } catch (const InputError& e) {
      if (warn) warn("skipping " + f + ": " + e.what());
    }
  }
  if (static_cast<int>(out.size()) < n) {
    throw InputError("dataset " + dir.string() + " has " + std::to_string(out.size()) + " decodable images (" +
                     std::to_string(files.size()) + " image files), need " + std::to_string(n));
  }
  return out;
}

/// Seeded derangement of 0..n-1: result[i] != i for every i.
inline std::vector<std::size_t> derangement(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw InputError("pairing needs at least 2 images, got " + std::to_string(n));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> p(n);
  for (;;) {
    std::iota(p.begin(), p.end(), std::size_t{0});
    seeded_shuffle(p, rng);
    bool fixed = false;
    for (std::size_t i = 0; i < n && !fixed; ++i) fixed = p[i] == i;
    if (!fixed) return p;
  }
}

/// Pairs every item (as clean) with a different item (as target).
template <class T>
std::vector<std::pair<T, T>> make_pairs(const std::vector<T>& items, std::uint64_t seed) {
  const auto p = derangement(items.size(), seed);
  std::vector<std::pair<T, T>> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) out.emplace_back(items[i], items[p[i]]);
  return out;
}

// ---------------------------------------------------------------- spec

struct PromptEvalSpec {
  int test_points = 64;
  int boxes = 0;
  int grid_stride = 0;
};

enum class SweepParam { lambda, epsilon, k_prompts };

inline const char* to_string(SweepParam p) noexcept {
  switch (p) {
    case SweepParam::lambda: return "lambda";
    case SweepParam::epsilon: return "epsilon";
    case SweepParam::k_prompts: return "k_prompts";
  }
  return "?";
}

struct SweepSpec {
  SweepParam param = SweepParam::lambda;
  std::vector<double> values;
};

struct ExperimentSpec {
  std::string dataset_dir;
  int n_pairs = 100;
  std::uint64_t pairing_seed = 0;
  Json surrogate_model = Json::object();
  std::vector<Json> target_models;
  AttackConfig attack;
  PromptEvalSpec prompt_eval;
  std::optional<SweepSpec> sweep;
  std::string output_dir = "out";
  int workers = 1;
  /// Directory that relative paths in the spec resolve against.
  fs::path base_dir;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  }

  void validate() const {
    if (n_pairs < 1) throw ConfigError("n_pairs must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (prompt_eval.test_points < 1) throw ConfigError("prompt_eval.test_points must be >= 1");
    if (prompt_eval.boxes < 0 || prompt_eval.grid_stride < 0) throw ConfigError("prompt_eval counts must be >= 0");
    if (sweep && sweep->values.empty()) throw ConfigError("sweep.values must not be empty");
    if (dataset_dir.empty()) throw ConfigError("dataset_dir is required");
  }
};

inline Json to_json(const ExperimentSpec& s) {
  Json j{{"dataset_dir", s.dataset_dir},
         {"n_pairs", s.n_pairs},
         {"pairing_seed", s.pairing_seed},
         {"surrogate_model", s.surrogate_model},
         {"target_models", s.target_models},
         {"attack", to_json(s.attack)},
         {"prompt_eval",
          {{"test_points", s.prompt_eval.test_points},
           {"boxes", s.prompt_eval.boxes},
           {"grid_stride", s.prompt_eval.grid_stride}}},
         {"output_dir", s.output_dir},
         {"workers", s.workers}};
  if (s.sweep) j["sweep"] = {{"param", to_string(s.sweep->param)}, {"values", s.sweep->values}};
  return j;
}

inline ExperimentSpec experiment_spec_from_json(const Json& j, const fs::path& base_dir = {}) {
  using namespace json_detail;
  require_object(j, "experiment spec");
  reject_unknown_keys(j,
                      {"dataset_dir", "n_pairs", "pairing_seed", "surrogate_model", "target_models", "attack",
                       "prompt_eval", "sweep", "output_dir", "workers"},
                      "experiment spec");
  ExperimentSpec s;
  s.base_dir = base_dir;
  auto str = [&](const char* k, std::string& dst) {
    if (!j.contains(k)) return;
    if (!j[k].is_string()) throw ConfigError(std::string(k) + ": expected a string");
    dst = j[k].get<std::string>();
  };
  str("dataset_dir", s.dataset_dir);
  str("output_dir", s.output_dir);
  if (j.contains("n_pairs")) s.n_pairs = static_cast<int>(parse_int(j["n_pairs"], "n_pairs"));
  if (j.contains("pairing_seed")) s.pairing_seed = parse_seed(j["pairing_seed"], "pairing_seed");
  if (j.contains("workers")) s.workers = static_cast<int>(parse_int(j["workers"], "workers"));
  if (j.contains("surrogate_model")) s.surrogate_model = j["surrogate_model"];
  if (j.contains("target_models")) {
    if (!j["target_models"].is_array()) throw ConfigError("target_models: expected an array");
    for (const auto& m : j["target_models"]) s.target_models.push_back(m);
  }
  if (j.contains("attack")) s.attack = attack_config_from_json(j["attack"]);
  if (j.contains("prompt_eval")) {
    const Json& p = j["prompt_eval"];
    require_object(p, "prompt_eval");
    reject_unknown_keys(p, {"test_points", "boxes", "grid_stride"}, "prompt_eval");
    if (p.contains("test_points")) s.prompt_eval.test_points = static_cast<int>(parse_int(p["test_points"], "test_points"));
    if (p.contains("boxes")) s.prompt_eval.boxes = static_cast<int>(parse_int(p["boxes"], "boxes"));
    if (p.contains("grid_stride")) s.prompt_eval.grid_stride = static_cast<int>(parse_int(p["grid_stride"], "grid_stride"));
  }
  if (j.contains("sweep") && !j["sweep"].is_null()) {
    const Json& w = j["sweep"];
    require_object(w, "sweep");
    reject_unknown_keys(w, {"param", "values"}, "sweep");
    SweepSpec sw;
    if (!w.contains("param")) throw ConfigError("sweep: missing param");
    static constexpr EnumName<SweepParam> kParams[] = {
        {SweepParam::lambda, "lambda"}, {SweepParam::epsilon, "epsilon"}, {SweepParam::k_prompts, "k_prompts"}};
    sw.param = parse_enum(kParams, w["param"], "sweep.param");
    if (!w.contains("values") || !w["values"].is_array()) throw ConfigError("sweep: values must be an array");
    for (const auto& v : w["values"]) sw.values.push_back(parse_real(v, "sweep.values"));
    s.sweep = std::move(sw);
  }
  return s;
}

/// Copy of `spec` with every path made absolute (and base_dir cleared).
inline ExperimentSpec absolutized(const ExperimentSpec& spec) {
  ExperimentSpec s = spec;
  auto abs = [&](const std::string& p) { return fs::absolute(spec.resolve(p)).lexically_normal().string(); };
  auto abs_ref = [&](Json ref) {
    if (ref.is_string()) return Json(abs(ref.get<std::string>()));
    if (ref.is_object()) {
      for (const char* k : {"weights", "weights_manifest"})
        if (ref.contains(k) && ref[k].is_string()) ref[k] = abs(ref[k].get<std::string>());
    }
    return ref;
  };
  s.dataset_dir = abs(spec.dataset_dir);
  s.output_dir = abs(spec.output_dir);
  s.surrogate_model = abs_ref(spec.surrogate_model);
  for (auto& t : s.target_models) t = abs_ref(t);
  for (auto& p : s.attack.competition.pool) p = abs(p);
  s.base_dir.clear();
  return s;
}

inline ExperimentSpec load_experiment_spec(const std::string& path) {
  return experiment_spec_from_json(read_json_file(path), fs::path(path).parent_path());
}

// ---------------------------------------------------------------- records

struct PairRecord {
  std::string pair_id;
  std::string clean_ref;
  std::string target_ref;
  bool ok = true;
  std::string error;
  /// Main score per model: the test-point prompt set.
  std::map<std::string, EvalReport> per_model;
  /// Score per model and prompt kind ("points", "boxes", "grid").
  std::map<std::string, std::map<std::string, EvalReport>> by_kind;
  /// Clean-vs-target mIoU per model on the test points.
  std::map<std::string, double> baseline;
  std::vector<IterationRecord> fd_trajectory;
  std::uint64_t attack_seed = 0;
};

struct RunRecord {
  Json spec_echo;
  std::string surrogate_id;
  std::vector<std::string> model_ids;
  std::vector<PairRecord> per_pair;
  std::map<std::string, double> aggregate;
  std::map<std::string, double> baseline_aggregate;
  int failures = 0;
  std::string started;
  std::string finished;
};

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline Json to_json(const IterationRecord& r) {
  Json j{{"iter", r.iter}, {"total_loss", r.total_loss}, {"feature_loss", r.feature_loss}, {"reg_loss", r.reg_loss}};
  j["fd_estimate"] = r.fd_estimate ? Json(*r.fd_estimate) : Json(nullptr);
  return j;
}

inline IterationRecord iteration_record_from_json(const Json& j) {
  IterationRecord r;
  r.iter = j.at("iter").get<int>();
  r.total_loss = j.at("total_loss").get<double>();
  r.feature_loss = j.at("feature_loss").get<double>();
  r.reg_loss = j.at("reg_loss").get<double>();
  if (j.contains("fd_estimate") && !j["fd_estimate"].is_null()) r.fd_estimate = j["fd_estimate"].get<double>();
  return r;
}

inline Json to_json(const PairRecord& p) {
  Json per_model = Json::object(), by_kind = Json::object(), traj = Json::array();
  for (const auto& [id, r] : p.per_model) per_model[id] = to_json(r);
  for (const auto& [id, kinds] : p.by_kind) {
    Json k = Json::object();
    for (const auto& [kind, r] : kinds) k[kind] = to_json(r);
    by_kind[id] = std::move(k);
  }
  for (const auto& r : p.fd_trajectory) traj.push_back(to_json(r));
  Json j{{"pair_id", p.pair_id},   {"clean_ref", p.clean_ref}, {"target_ref", p.target_ref},
         {"ok", p.ok},             {"per_model", per_model},   {"by_kind", by_kind},
         {"baseline", p.baseline}, {"fd_trajectory", traj},    {"attack_seed", p.attack_seed}};
  if (!p.ok) j["error"] = p.error;
  return j;
}

inline PairRecord pair_record_from_json(const Json& j) {
  PairRecord p;
  p.pair_id = j.at("pair_id").get<std::string>();
  p.clean_ref = j.at("clean_ref").get<std::string>();
  p.target_ref = j.at("target_ref").get<std::string>();
  p.ok = j.value("ok", true);
  p.error = j.value("error", std::string());
  p.attack_seed = j.value("attack_seed", std::uint64_t{0});
  for (const auto& [id, r] : j.at("per_model").items()) p.per_model[id] = eval_report_from_json(r);
  if (j.contains("by_kind")) {
    for (const auto& [id, kinds] : j["by_kind"].items())
      for (const auto& [kind, r] : kinds.items()) p.by_kind[id][kind] = eval_report_from_json(r);
  }
  if (j.contains("baseline")) p.baseline = j["baseline"].get<std::map<std::string, double>>();
  for (const auto& r : j.at("fd_trajectory")) p.fd_trajectory.push_back(iteration_record_from_json(r));
  return p;
}

inline Json to_json(const RunRecord& r) {
  Json pairs = Json::array();
  for (const auto& p : r.per_pair) pairs.push_back(to_json(p));
  return Json{{"spec_echo", r.spec_echo},
              {"surrogate_id", r.surrogate_id},
              {"model_ids", r.model_ids},
              {"per_pair", std::move(pairs)},
              {"aggregate", r.aggregate},
              {"baseline_aggregate", r.baseline_aggregate},
              {"failures", r.failures},
              {"timestamps", {{"started", r.started}, {"finished", r.finished}}}};
}

inline RunRecord run_record_from_json(const Json& j) {
  try {
    RunRecord r;
    r.spec_echo = j.at("spec_echo");
    r.surrogate_id = j.at("surrogate_id").get<std::string>();
    r.model_ids = j.at("model_ids").get<std::vector<std::string>>();
    for (const auto& p : j.at("per_pair")) r.per_pair.push_back(pair_record_from_json(p));
    r.aggregate = j.at("aggregate").get<std::map<std::string, double>>();
    r.baseline_aggregate = j.value("baseline_aggregate", std::map<std::string, double>{});
    r.failures = j.value("failures", 0);
    if (j.contains("timestamps")) {
      r.started = j["timestamps"].value("started", "");
      r.finished = j["timestamps"].value("finished", "");
    }
    return r;
  } catch (const Json::exception& e) {
    throw InputError(std::string("malformed run record: ") + e.what());
  }
}

/// Mean of per-pair values over successful pairs, summed in pair order.
inline std::map<std::string, double> aggregate_miou(const std::vector<PairRecord>& pairs,
                                                    const std::vector<std::string>& model_ids, bool baseline = false) {
  std::map<std::string, double> out;
  for (const auto& id : model_ids) {
    double sum = 0.0;
    int n = 0;
    for (const auto& p : pairs) {
      if (!p.ok) continue;
      if (baseline) {
        auto it = p.baseline.find(id);
        if (it == p.baseline.end()) continue;
        sum += it->second;
      } else {
        auto it = p.per_model.find(id);
        if (it == p.per_model.end()) continue;
        sum += it->second.miou;
      }
      ++n;
    }
    if (n > 0) out[id] = sum / n;
  }
  return out;
}

// ---------------------------------------------------------------- running pairs

struct PairInput {
  std::string id;
  std::string clean_ref;
  std::string target_ref;
  ImageTensor clean;
  ImageTensor target;
  /// External competition images for this pair (used when the attack needs a pool).
  std::vector<ImageTensor> pool;
};

/// Evaluation prompt sets in fixed order: test points, then boxes and grid when enabled.
inline std::vector<std::pair<std::string, PromptSet>> evaluation_prompt_sets(const PromptEvalSpec& spec, Resolution res,
                                                                             std::uint64_t seed) {
  std::vector<std::pair<std::string, PromptSet>> out;
  out.emplace_back("points", sample_points(spec.test_points, res, seed + 1, PromptRole::test));
  if (spec.boxes > 0) out.emplace_back("boxes", sample_boxes(spec.boxes, res, seed + 2, PromptRole::test));
  if (spec.grid_stride > 0) out.emplace_back("grid", grid_prompts(spec.grid_stride, res));
  return out;
}

struct RunOptions {
  AttackConfig attack;
  std::vector<std::pair<std::string, PromptSet>> eval_sets;
  std::optional<fs::path> artifact_dir;
  int workers = 1;
  /// Masks saved per model and prompt kind (the first few prompts of each set).
  int saved_masks_per_kind = 4;
  WarningSink warn = warn_to_stderr;
};

inline std::string path_safe(std::string s) {
  for (char& c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  return s;
}

inline void write_trajectory_csv(const fs::path& path, const std::vector<IterationRecord>& traj) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "iter,total_loss,feature_loss,reg_loss,fd_estimate\n" << std::setprecision(17);
  for (const auto& r : traj) {
    out << r.iter << ',' << r.total_loss << ',' << r.feature_loss << ',' << r.reg_loss << ',';
    if (r.fd_estimate) out << *r.fd_estimate;
    out << '\n';
  }
}

namespace bench_detail {

inline bool needs_external_pool(const AttackConfig& c) {
  return is_regularized(c.method) &&
         c.competition.resolved_source(c.default_competition_source()) == CompetitionSource::external_images;
}

inline PairRecord run_one_pair(const SegModel& surrogate, const std::vector<SegModelPtr>& models, const PairInput& in,
                               std::size_t index, const RunOptions& opt) {
  PairRecord rec;
  rec.pair_id = in.id;
  rec.clean_ref = in.clean_ref;
  rec.target_ref = in.target_ref;
  AttackConfig cfg = opt.attack;
  cfg.seed = opt.attack.seed + index;
  rec.attack_seed = cfg.seed;
  if (needs_external_pool(cfg) && cfg.competition.pool_images.empty()) {
    if (in.pool.empty()) throw ConfigError("external_images competition needs a pool and none is available");
    cfg.competition.pool_images = in.pool;
  }
  if (!cfg.fd_competition && !in.pool.empty()) {
    CompetitionSpec fd;
    fd.source = CompetitionSource::external_images;
    fd.pool_images = in.pool;
    cfg.fd_competition = std::move(fd);
  }
  const Resolution res = surrogate.input_resolution();
  std::vector<Prompt> train;
  if (cfg.method == AttackMethod::decoder_attack) {
    const PromptSet& test = opt.eval_sets.front().second;
    train = sample_points(cfg.train_prompts, res, cfg.seed, PromptRole::train, test.prompts).prompts;
  }
  const AttackResult result = run_attack(surrogate, in.clean, in.target, train, cfg);
  rec.fd_trajectory = result.per_iteration;

  std::optional<fs::path> dir;
  if (opt.artifact_dir) {
    dir = *opt.artifact_dir / "pairs" / path_safe(in.id);
    fs::create_directories(*dir / "masks");
    write_png((*dir / "adv.png").string(), result.adv_image);
    write_raw_image((*dir / "adv.f64").string(), result.adv_image);
    write_raw_image((*dir / "clean.f64").string(), in.clean);
    write_raw_image((*dir / "target.f64").string(), in.target);
    write_trajectory_csv(*dir / "fd.csv", result.per_iteration);
  }

  for (const auto& model : models) {
    const std::string id = model->identity();
    const EmbeddingGrid e_adv = encode_image(*model, result.adv_image);
    const EmbeddingGrid e_tgt = encode_image(*model, in.target);
    const EmbeddingGrid e_cln = encode_image(*model, in.clean);
    for (const auto& [kind, set] : opt.eval_sets) {
      std::vector<LogitPair> pairs;
      pairs.reserve(set.size());
      for (std::size_t k = 0; k < set.size(); ++k) {
        const Prompt& p = set.prompts[k];
        pairs.emplace_back(model->decode(e_adv, p), model->decode(e_tgt, p));
        if (dir && static_cast<int>(k) < opt.saved_masks_per_kind) {
          const fs::path mdir = *dir / "masks" / path_safe(id);
          fs::create_directories(mdir);
          const std::string stem = kind + "_" + std::to_string(k);
          write_mask_png((mdir / (stem + "_adv.png")).string(), binarize(pairs.back().first));
          write_mask_png((mdir / (stem + "_target.png")).string(), binarize(pairs.back().second));
        }
      }
      rec.by_kind[id][kind] = miou(pairs, set.id);
      if (kind == opt.eval_sets.front().first) {
        rec.per_model[id] = rec.by_kind[id][kind];
        std::vector<LogitPair> base;
        for (const auto& p : set.prompts) base.emplace_back(model->decode(e_cln, p), model->decode(e_tgt, p));
        rec.baseline[id] = miou(base, set.id).miou;
      }
    }
  }
  return rec;
}

}  // namespace bench_detail

/// Attacks every pair on `surrogate` and scores the adversarial images on each
/// model in `models`. Pairs that fail with an input or numerical error are
/// recorded and skipped; more than 10% failures abort the run.
inline RunRecord run_pairs(const SegModelPtr& surrogate, const std::vector<SegModelPtr>& models,
                           const std::vector<PairInput>& pairs, const RunOptions& opt) {
  if (pairs.empty()) throw InputError("no pairs to run");
  if (opt.eval_sets.empty()) throw ConfigError("no evaluation prompt sets");
  opt.attack.validate();
  RunRecord run;
  run.started = utc_timestamp();
  run.surrogate_id = surrogate->identity();
  for (const auto& m : models) {
    if (std::find(run.model_ids.begin(), run.model_ids.end(), m->identity()) != run.model_ids.end()) {
      throw ConfigError("duplicate model identity " + m->identity());
    }
    run.model_ids.push_back(m->identity());
  }
  run.per_pair.resize(pairs.size());
  std::vector<int> error_kind(pairs.size(), 0);
  std::mutex warn_mutex;
  std::atomic<std::size_t> next{0};
  std::exception_ptr fatal;
  std::mutex fatal_mutex;
  auto failed_record = [](const PairInput& in, const std::string& what) {
    PairRecord r;
    r.pair_id = in.id;
    r.clean_ref = in.clean_ref;
    r.target_ref = in.target_ref;
    r.ok = false;
    r.error = what;
    return r;
  };
  auto worker = [&] {
    for (std::size_t i = next++; i < pairs.size(); i = next++) {
      try {
        run.per_pair[i] = bench_detail::run_one_pair(*surrogate, models, pairs[i], i, opt);
      } catch (const NumericalError& e) {
        error_kind[i] = 2;
        run.per_pair[i] = failed_record(pairs[i], e.what());
      } catch (const InputError& e) {
        error_kind[i] = 1;
        run.per_pair[i] = failed_record(pairs[i], e.what());
      } catch (...) {
        std::lock_guard lock(fatal_mutex);
        if (!fatal) fatal = std::current_exception();
        next = pairs.size();
      }
      if (error_kind[i] != 0 && opt.warn) {
        std::lock_guard lock(warn_mutex);
        opt.warn("pair " + pairs[i].id + " failed: " + run.per_pair[i].error);
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(opt.workers, static_cast<int>(pairs.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  run.failures = static_cast<int>(std::count_if(error_kind.begin(), error_kind.end(), [](int k) { return k != 0; }));
  if (run.failures * 10 > static_cast<int>(pairs.size())) {
    const std::string msg = std::to_string(run.failures) + " of " + std::to_string(pairs.size()) +
                            " pairs failed (limit 10%); first error: " +
                            std::find_if(run.per_pair.begin(), run.per_pair.end(), [](const PairRecord& p) {
                              return !p.ok;
                            })->error;
    if (std::find(error_kind.begin(), error_kind.end(), 2) != error_kind.end()) throw NumericalError(msg);
    throw InputError(msg);
  }
  run.aggregate = aggregate_miou(run.per_pair, run.model_ids);
  run.baseline_aggregate = aggregate_miou(run.per_pair, run.model_ids, true);
  run.finished = utc_timestamp();
  return run;
}

/// Loads the surrogate and the evaluation models (surrogate first, then the
/// targets that differ from it).
inline std::pair<SegModelPtr, std::vector<SegModelPtr>> load_experiment_models(const ExperimentSpec& spec) {
  SegModelPtr surrogate = load_model(spec.surrogate_model, spec.base_dir);
  std::vector<SegModelPtr> models{surrogate};
  for (const auto& ref : spec.target_models) {
    SegModelPtr m = load_model(ref, spec.base_dir);
    const bool seen = std::any_of(models.begin(), models.end(),
                                  [&](const SegModelPtr& x) { return x->identity() == m->identity(); });
    if (!seen) models.push_back(std::move(m));
  }
  return {surrogate, models};
}

/// Builds the pair list of an experiment. The competition pool of each pair
/// is the spec's pool if given, else every other ingested image.
inline std::vector<PairInput> build_pairs(const ExperimentSpec& spec, Resolution res, const WarningSink& warn) {
  const auto images = ingest_dataset(spec.resolve(spec.dataset_dir), spec.n_pairs, spec.pairing_seed, res, warn);
  const auto perm = derangement(images.size(), spec.pairing_seed ^ 0x5a17ed0000000000ULL);
  std::vector<ImageTensor> spec_pool;
  for (const auto& p : spec.attack.competition.pool) {
    ImageTensor img = read_image(spec.resolve(p).string());
    if (img.height != res.height || img.width != res.width) img = resize_bilinear(img, res.height, res.width);
    spec_pool.push_back(clamp_pixels(std::move(img)));
  }
  std::vector<PairInput> pairs;
  for (std::size_t i = 0; i < images.size(); ++i) {
    PairInput in;
    std::ostringstream id;
    id << std::setw(4) << std::setfill('0') << i;
    in.id = id.str();
    in.clean_ref = images[i].ref;
    in.target_ref = images[perm[i]].ref;
    in.clean = images[i].image;
    in.target = images[perm[i]].image;
    if (!spec_pool.empty()) {
      in.pool = spec_pool;
    } else {
      for (std::size_t k = 0; k < images.size(); ++k)
        if (k != i && k != perm[i]) in.pool.push_back(images[k].image);
    }
    pairs.push_back(std::move(in));
  }
  return pairs;
}

/// Runs an experiment and, when `write_artifacts`, persists run.json and the
/// per-pair artifacts under the output directory.
inline RunRecord run_experiment(const ExperimentSpec& spec_in, const WarningSink& warn = warn_to_stderr,
                                bool write_artifacts = true) {
  spec_in.validate();
  const ExperimentSpec spec = absolutized(spec_in);
  const auto [surrogate, models] = load_experiment_models(spec);
  const Resolution res = surrogate->input_resolution();
  const auto pairs = build_pairs(spec, res, warn);
  RunOptions opt;
  opt.attack = spec.attack;
  opt.eval_sets = evaluation_prompt_sets(spec.prompt_eval, res, spec.pairing_seed);
  opt.workers = spec.workers;
  opt.warn = warn;
  const fs::path out = spec.resolve(spec.output_dir);
  if (write_artifacts) {
    fs::create_directories(out);
    opt.artifact_dir = out;
  }
  RunRecord run = run_pairs(surrogate, models, pairs, opt);
  run.spec_echo = to_json(spec);
  if (write_artifacts) write_json_file((out / "run.json").string(), to_json(run));
  return run;
}

// ---------------------------------------------------------------- sweep

struct SweepRow {
  double value = 0.0;
  std::map<std::string, double> aggregate;
  std::map<std::string, double> baseline;
};

inline std::string sweep_value_label(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

/// One experiment per sweep value with only the swept parameter changed.
/// Writes sweep.json and sweep.csv into the output directory.
inline std::vector<SweepRow> run_sweep(const ExperimentSpec& spec, const WarningSink& warn = warn_to_stderr,
                                       bool write_artifacts = true) {
  if (!spec.sweep) throw ConfigError("run_sweep: spec has no sweep section");
  spec.validate();
  std::vector<SweepRow> rows;
  const ExperimentSpec base = absolutized(spec);
  const fs::path out = base.output_dir;
  for (double v : spec.sweep->values) {
    ExperimentSpec s = base;
    s.sweep.reset();
    switch (spec.sweep->param) {
      case SweepParam::lambda: s.attack.lambda_reg = v; break;
      case SweepParam::epsilon: s.attack.epsilon = v; break;
      case SweepParam::k_prompts:
        if (v < 1 || std::floor(v) != v) throw ConfigError("k_prompts sweep values must be positive integers");
        s.attack.train_prompts = static_cast<int>(v);
        break;
    }
    s.output_dir = (out / (std::string(to_string(spec.sweep->param)) + "_" + sweep_value_label(v))).string();
    const RunRecord r = run_experiment(s, warn, write_artifacts);
    rows.push_back({v, r.aggregate, r.baseline_aggregate});
  }
  if (write_artifacts) {
    fs::create_directories(out);
    Json table = Json::array();
    for (const auto& r : rows) table.push_back({{"value", r.value}, {"aggregate", r.aggregate}, {"baseline", r.baseline}});
    write_json_file((out / "sweep.json").string(),
                    Json{{"param", to_string(spec.sweep->param)}, {"rows", table}, {"spec_echo", to_json(base)}});
    std::ofstream csv(out / "sweep.csv");
    csv << "value,model,miou,baseline\n" << std::setprecision(17);
    for (const auto& r : rows)
      for (const auto& [id, m] : r.aggregate) csv << r.value << ',' << id << ',' << m << ',' << r.baseline.at(id) << '\n';
  }
  return rows;
}

// ---------------------------------------------------------------- cross-prompt

struct CrossPromptTable {
  std::vector<int> k_values;
  /// Mean over pairs, one row per K.
  std::vector<CrossPromptRow> mean;
  /// Mean test-set mIoU of an encoder (pata) attack on the same pairs.
  double pata_test_miou = 0.0;
  double baseline_test_miou = 0.0;
};

/// Cross-prompt decoder attack on the first n_pairs pairs of the spec's dataset,
/// scored on the surrogate. Writes cross_prompt.json when requested.
inline CrossPromptTable run_cross_prompt(const ExperimentSpec& spec_in, const std::vector<int>& k_values,
                                         const WarningSink& warn = warn_to_stderr, bool write_artifacts = true) {
  spec_in.validate();
  const ExperimentSpec spec = absolutized(spec_in);
  if (k_values.empty()) throw ConfigError("cross-prompt: no K values");
  const SegModelPtr model = load_model(spec.surrogate_model, spec.base_dir);
  const Resolution res = model->input_resolution();
  const auto pairs = build_pairs(spec, res, warn);
  const PromptSet test = sample_points(spec.prompt_eval.test_points, res, spec.pairing_seed + 1, PromptRole::test);
  CrossPromptTable table;
  table.k_values = k_values;
  table.mean.resize(k_values.size());
  Json per_pair = Json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    AttackConfig cfg = spec.attack;
    cfg.seed = spec.attack.seed + i;
    const auto rows = cross_prompt_experiment(*model, pairs[i].clean, pairs[i].target, k_values, test, cfg);
    AttackConfig enc = cfg;
    enc.method = AttackMethod::pata;
    enc.fd_samples = 0;
    const AttackResult pr = run_attack(*model, pairs[i].clean, pairs[i].target, {}, enc);
    const double pata_test = score_prompts(*model, pr.adv_image, pairs[i].target, test).miou;
    const double base = score_prompts(*model, pairs[i].clean, pairs[i].target, test).miou;
    Json jr = Json::array();
    for (std::size_t k = 0; k < rows.size(); ++k) {
      table.mean[k].k = rows[k].k;
      table.mean[k].train_miou += rows[k].train_miou / pairs.size();
      table.mean[k].test_miou += rows[k].test_miou / pairs.size();
      jr.push_back({{"k", rows[k].k}, {"train_miou", rows[k].train_miou}, {"test_miou", rows[k].test_miou}});
    }
    table.pata_test_miou += pata_test / pairs.size();
    table.baseline_test_miou += base / pairs.size();
    per_pair.push_back({{"pair_id", pairs[i].id}, {"rows", jr}, {"pata_test_miou", pata_test}, {"baseline_test_miou", base}});
  }
  if (write_artifacts) {
    const fs::path out = spec.resolve(spec.output_dir);
    fs::create_directories(out);
    Json mean = Json::array();
    for (const auto& r : table.mean) mean.push_back({{"k", r.k}, {"train_miou", r.train_miou}, {"test_miou", r.test_miou}});
    write_json_file((out / "cross_prompt.json").string(),
                    Json{{"spec_echo", to_json(spec)},
                         {"test_prompt_set", to_json(test)},
                         {"mean", mean},
                         {"pata_test_miou", table.pata_test_miou},
                         {"baseline_test_miou", table.baseline_test_miou},
                         {"per_pair", per_pair}});
  }
  return table;
}

// ---------------------------------------------------------------- audit / eval

struct AuditReport {
  int pairs_checked = 0;
  double max_linf = 0.0;
  double epsilon = 0.0;
  bool aggregate_consistent = true;
  std::vector<std::string> violations;

  bool ok() const noexcept { return violations.empty() && aggregate_consistent; }
};

/// Checks every persisted adversarial image against its clean image
/// (budget and pixel domain) and recomputes the aggregate from per-pair data.
inline AuditReport audit_run(const fs::path& run_dir) {
  const RunRecord run = run_record_from_json(read_json_file((run_dir / "run.json").string()));
  AuditReport rep;
  rep.epsilon = attack_config_from_json(run.spec_echo.at("attack")).epsilon;
  for (const auto& p : run.per_pair) {
    if (!p.ok) continue;
    const fs::path dir = run_dir / "pairs" / path_safe(p.pair_id);
    const ImageTensor clean = read_raw_image((dir / "clean.f64").string());
    const ImageTensor adv = read_raw_image((dir / "adv.f64").string());
    ++rep.pairs_checked;
    if (!adv.same_shape(clean)) {
      rep.violations.push_back(p.pair_id + ": adversarial and clean shapes differ");
      continue;
    }
    const double d = linf_distance(adv, clean);
    rep.max_linf = std::max(rep.max_linf, d);
    if (d > rep.epsilon + 1e-6) rep.violations.push_back(p.pair_id + ": linf " + std::to_string(d) + " exceeds epsilon");
    if (!in_pixel_domain(adv)) rep.violations.push_back(p.pair_id + ": pixels outside [0,1]");
  }
  rep.aggregate_consistent = aggregate_miou(run.per_pair, run.model_ids) == run.aggregate;
  return rep;
}

/// Re-scores persisted adversarial images with the models and prompts named in
/// the run's spec echo. Returns the recomputed record (timestamps refreshed).
inline RunRecord rescore_run(const fs::path& run_dir) {
  const RunRecord run = run_record_from_json(read_json_file((run_dir / "run.json").string()));
  const ExperimentSpec spec = experiment_spec_from_json(run.spec_echo);
  const auto [surrogate, models] = load_experiment_models(spec);
  const auto sets = evaluation_prompt_sets(spec.prompt_eval, surrogate->input_resolution(), spec.pairing_seed);
  RunRecord out = run;
  out.started = utc_timestamp();
  for (auto& p : out.per_pair) {
    if (!p.ok) continue;
    const fs::path dir = run_dir / "pairs" / path_safe(p.pair_id);
    const ImageTensor adv = read_raw_image((dir / "adv.f64").string());
    const ImageTensor target = read_raw_image((dir / "target.f64").string());
    for (const auto& m : models) {
      for (const auto& [kind, set] : sets) {
        p.by_kind[m->identity()][kind] = score_prompts(*m, adv, target, set);
        if (kind == sets.front().first) p.per_model[m->identity()] = p.by_kind[m->identity()][kind];
      }
    }
  }
  out.aggregate = aggregate_miou(out.per_pair, out.model_ids);
  out.finished = utc_timestamp();
  return out;
}

}  // namespace pata
