#pragma once

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "pata/attack.hpp"
#include "pata/errors.hpp"
#include "pata/metrics.hpp"
#include "pata/prompt_lab.hpp"

namespace pata {

using Json = nlohmann::json;

namespace json_detail {

template <class E>
struct EnumName {
  E value;
  const char* name;
};

inline constexpr EnumName<AttackMethod> kMethods[] = {{AttackMethod::decoder_attack, "decoder_attack"},
                                                      {AttackMethod::pata, "pata"},
                                                      {AttackMethod::pata_plus, "pata_plus"},
                                                      {AttackMethod::pata_plus_plus, "pata_plus_plus"}};
inline constexpr EnumName<FeatureLossKind> kLosses[] = {
    {FeatureLossKind::mse, "mse"}, {FeatureLossKind::cosine, "cosine"}, {FeatureLossKind::huber, "huber"}};
inline constexpr EnumName<GradTransform> kTransforms[] = {
    {GradTransform::none, "none"}, {GradTransform::mi, "mi"}, {GradTransform::ti, "ti"}};
inline constexpr EnumName<CompetitionSource> kSources[] = {{CompetitionSource::external_images, "external_images"},
                                                           {CompetitionSource::self_patches, "self_patches"}};
inline constexpr EnumName<MixMode> kMixModes[] = {{MixMode::sum_clamp, "sum_clamp"}, {MixMode::mean, "mean"}};
inline constexpr EnumName<PromptRole> kRoles[] = {
    {PromptRole::train, "train"}, {PromptRole::test, "test"}, {PromptRole::grid, "grid"}};

template <class E, std::size_t N>
const char* enum_name(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

template <class E, std::size_t N>
E parse_enum(const EnumName<E> (&table)[N], const Json& j, std::string_view key) {
  if (!j.is_string()) throw ConfigError(std::string(key) + ": expected a string");
  const auto s = j.get<std::string>();
  std::string options;
  for (const auto& e : table) {
    if (s == e.name) return e.value;
    options += options.empty() ? e.name : std::string(", ") + e.name;
  }
  throw ConfigError(std::string(key) + ": unknown value \"" + s + "\" (expected one of " + options + ")");
}

inline void require_object(const Json& j, std::string_view what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
}

inline void reject_unknown_keys(const Json& j, std::initializer_list<std::string_view> allowed, std::string_view what) {
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError(std::string(what) + ": unknown key \"" + k + "\"");
  }
}

/// Accepts a number or a "a/b" fraction string such as "8/255".
inline double parse_real(const Json& j, std::string_view key) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    std::istringstream in(s);
    double num = 0.0, den = 1.0;
    char slash = 0;
    if (in >> num) {
      if (in >> slash) {
        if (slash == '/' && in >> den && in.peek() == std::char_traits<char>::eof() && den != 0.0) return num / den;
      } else {
        return num;
      }
    }
    throw ConfigError(std::string(key) + ": cannot parse \"" + s + "\" as a number");
  }
  throw ConfigError(std::string(key) + ": expected a number");
}

inline long long parse_int(const Json& j, std::string_view key) {
  if (j.is_number_integer()) return j.get<long long>();
  if (j.is_number_float()) {
    const double v = j.get<double>();
    if (std::floor(v) == v) return static_cast<long long>(v);
  }
  throw ConfigError(std::string(key) + ": expected an integer");
}

inline std::uint64_t parse_seed(const Json& j, std::string_view key) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  const long long v = parse_int(j, key);
  if (v < 0) throw ConfigError(std::string(key) + ": must be >= 0");
  return static_cast<std::uint64_t>(v);
}

}  // namespace json_detail

// ---- CompetitionSpec ----

inline Json to_json(const CompetitionSpec& c) {
  Json j;
  if (c.source) j["source"] = json_detail::enum_name(json_detail::kSources, *c.source);
  j["count_per_iter"] = c.count_per_iter;
  j["pool"] = c.pool;
  j["patch_scale_range"] = {c.patch_scale_range.first, c.patch_scale_range.second};
  return j;
}

inline CompetitionSpec competition_from_json(const Json& j, std::string_view what = "competition") {
  using namespace json_detail;
  require_object(j, what);
  reject_unknown_keys(j, {"source", "count_per_iter", "pool", "patch_scale_range"}, what);
  CompetitionSpec c;
  if (j.contains("source")) c.source = parse_enum(kSources, j["source"], "source");
  if (j.contains("count_per_iter")) c.count_per_iter = static_cast<int>(parse_int(j["count_per_iter"], "count_per_iter"));
  if (j.contains("pool")) {
    if (!j["pool"].is_array()) throw ConfigError("pool: expected an array of paths");
    for (const auto& p : j["pool"]) {
      if (!p.is_string()) throw ConfigError("pool: expected an array of paths");
      c.pool.push_back(p.get<std::string>());
    }
  }
  if (j.contains("patch_scale_range")) {
    const auto& r = j["patch_scale_range"];
    if (!r.is_array() || r.size() != 2) throw ConfigError("patch_scale_range: expected [lo, hi]");
    c.patch_scale_range = {parse_real(r[0], "patch_scale_range"), parse_real(r[1], "patch_scale_range")};
  }
  return c;
}

// ---- AttackConfig ----

inline Json to_json(const AttackConfig& c) {
  using namespace json_detail;
  Json j;
  j["method"] = enum_name(kMethods, c.method);
  j["epsilon"] = c.epsilon;
  j["step_size"] = c.step_size;
  j["iterations"] = c.iterations;
  j["feature_loss"] = enum_name(kLosses, c.feature_loss);
  j["lambda_reg"] = c.lambda_reg;
  j["thres_pos"] = c.thres_pos;
  j["thres_neg"] = c.thres_neg;
  j["train_prompts"] = c.train_prompts;
  j["competition"] = to_json(c.competition);
  j["grad_transform"] = enum_name(kTransforms, c.grad_transform);
  j["mi_decay"] = c.mi_decay;
  j["ti_kernel_size"] = c.ti_kernel_size;
  j["ti_sigma"] = c.ti_sigma;
  j["seed"] = c.seed;
  j["mix_mode"] = enum_name(kMixModes, c.mix_mode);
  j["fd_samples"] = c.fd_samples;
  j["fd_every"] = c.fd_every;
  if (c.fd_competition) j["fd_competition"] = to_json(*c.fd_competition);
  return j;
}

/// Every key is optional; unknown keys throw ConfigError. Does not validate
/// value ranges (call AttackConfig::validate for that).
inline AttackConfig attack_config_from_json(const Json& j) {
  using namespace json_detail;
  require_object(j, "attack config");
  reject_unknown_keys(j,
                      {"method", "epsilon", "step_size", "iterations", "feature_loss", "lambda_reg", "thres_pos",
                       "thres_neg", "train_prompts", "competition", "grad_transform", "mi_decay", "ti_kernel_size",
                       "ti_sigma", "seed", "mix_mode", "fd_samples", "fd_every", "fd_competition"},
                      "attack config");
  AttackConfig c;
  auto real = [&](const char* k, double& dst) {
    if (j.contains(k)) dst = parse_real(j[k], k);
  };
  auto integer = [&](const char* k, int& dst) {
    if (j.contains(k)) dst = static_cast<int>(parse_int(j[k], k));
  };
  if (j.contains("method")) c.method = parse_enum(kMethods, j["method"], "method");
  real("epsilon", c.epsilon);
  real("step_size", c.step_size);
  integer("iterations", c.iterations);
  if (j.contains("feature_loss")) c.feature_loss = parse_enum(kLosses, j["feature_loss"], "feature_loss");
  real("lambda_reg", c.lambda_reg);
  real("thres_pos", c.thres_pos);
  real("thres_neg", c.thres_neg);
  integer("train_prompts", c.train_prompts);
  if (j.contains("competition")) c.competition = competition_from_json(j["competition"]);
  if (j.contains("grad_transform")) c.grad_transform = parse_enum(kTransforms, j["grad_transform"], "grad_transform");
  real("mi_decay", c.mi_decay);
  integer("ti_kernel_size", c.ti_kernel_size);
  real("ti_sigma", c.ti_sigma);
  if (j.contains("seed")) c.seed = parse_seed(j["seed"], "seed");
  if (j.contains("mix_mode")) c.mix_mode = parse_enum(kMixModes, j["mix_mode"], "mix_mode");
  integer("fd_samples", c.fd_samples);
  integer("fd_every", c.fd_every);
  if (j.contains("fd_competition")) c.fd_competition = competition_from_json(j["fd_competition"], "fd_competition");
  return c;
}

// ---- EvalReport ----

inline Json to_json(const EvalReport& r) {
  return Json{{"per_pair_iou", r.per_pair_iou}, {"miou", r.miou}, {"n_pairs", r.n_pairs}, {"prompt_set_id", r.prompt_set_id}};
}

inline EvalReport eval_report_from_json(const Json& j) {
  try {
    EvalReport r;
    r.per_pair_iou = j.at("per_pair_iou").get<std::vector<double>>();
    r.miou = j.at("miou").get<double>();
    r.n_pairs = j.at("n_pairs").get<int>();
    r.prompt_set_id = j.at("prompt_set_id").get<std::string>();
    return r;
  } catch (const Json::exception& e) {
    throw InputError(std::string("malformed EvalReport: ") + e.what());
  }
}

// ---- Prompt / PromptSet ----

inline Json to_json(const Prompt& p) {
  if (const auto* pt = std::get_if<PointPrompt>(&p)) return Json{{"kind", "point"}, {"x", pt->x}, {"y", pt->y}};
  const auto& b = std::get<BoxPrompt>(p);
  return Json{{"kind", "box"}, {"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}};
}

inline Prompt prompt_from_json(const Json& j) {
  using namespace json_detail;
  require_object(j, "prompt");
  if (!j.contains("kind") || !j["kind"].is_string()) throw InputError("prompt: missing \"kind\"");
  const auto kind = j["kind"].get<std::string>();
  auto coord = [&](const char* k) {
    if (!j.contains(k)) throw InputError(std::string("prompt: missing \"") + k + "\"");
    return static_cast<int>(parse_int(j[k], k));
  };
  if (kind == "point") {
    reject_unknown_keys(j, {"kind", "x", "y", "label"}, "point prompt");
    if (j.contains("label") && j["label"] != "foreground") throw InputError("point prompt: label must be \"foreground\"");
    return PointPrompt{coord("x"), coord("y")};
  }
  if (kind == "box") {
    reject_unknown_keys(j, {"kind", "x1", "y1", "x2", "y2"}, "box prompt");
    const BoxPrompt b{coord("x1"), coord("y1"), coord("x2"), coord("y2")};
    if (!(b.x1 < b.x2 && b.y1 < b.y2)) throw InputError("box prompt: requires x1 < x2 and y1 < y2");
    return b;
  }
  throw InputError("prompt: unknown kind \"" + kind + "\"");
}

inline Json to_json(const PromptSet& s) {
  Json prompts = Json::array();
  for (const auto& p : s.prompts) prompts.push_back(to_json(p));
  return Json{{"role", to_string(s.role)}, {"seed", s.seed}, {"id", s.id}, {"prompts", std::move(prompts)}};
}

inline PromptSet prompt_set_from_json(const Json& j) {
  using namespace json_detail;
  try {
    require_object(j, "prompt set");
    reject_unknown_keys(j, {"role", "seed", "id", "prompts"}, "prompt set");
    PromptSet s;
    if (j.contains("role")) s.role = parse_enum(kRoles, j["role"], "role");
    if (j.contains("seed")) s.seed = parse_seed(j["seed"], "seed");
    if (j.contains("id")) s.id = j["id"].get<std::string>();
    if (!j.contains("prompts") || !j["prompts"].is_array()) throw InputError("prompt set: missing \"prompts\" array");
    for (const auto& p : j["prompts"]) s.prompts.push_back(prompt_from_json(p));
    return s;
  } catch (const ConfigError& e) {
    throw InputError(e.what());
  } catch (const Json::exception& e) {
    throw InputError(std::string("malformed prompt set: ") + e.what());
  }
}

// ---- files ----

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw InputError(path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << j.dump(2) << '\n';
}

}  // namespace pata
