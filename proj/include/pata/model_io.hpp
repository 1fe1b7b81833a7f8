#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pata/errors.hpp"
#include "pata/json_io.hpp"
#include "pata/model.hpp"
#include "pata/toy_model.hpp"

namespace pata {

/// Parsed model definition file.
struct ModelDefinition {
  std::string arch = "toy_vit";
  ToyModelConfig config;
  /// Weight blob and manifest paths, already resolved against the definition's directory.
  std::optional<std::string> weights;
  std::optional<std::string> manifest;
};

inline Json to_json(const ToyModelConfig& c) {
  Json params{{"height", c.height},
              {"width", c.width},
              {"patch_size", c.patch_size},
              {"dim", c.dim},
              {"depth", c.depth},
              {"heads", c.heads},
              {"mlp_hidden", c.mlp_hidden},
              {"key_dim", c.key_dim},
              {"pos_features", c.pos_features},
              {"logit_scale", c.logit_scale},
              {"mask_threshold", c.mask_threshold},
              {"box_margin", c.box_margin},
              {"pos_scale", c.pos_scale},
              {"pos_frequency", c.pos_frequency},
              {"dc_gain", c.dc_gain},
              {"qk_gain", c.qk_gain},
              {"mlp_gain", c.mlp_gain},
              {"variant_scale", c.variant_scale}};
  if (c.family_seed) params["family_seed"] = *c.family_seed;
  Json j{{"arch", "toy_vit"}, {"seed", c.seed}, {"params", std::move(params)}};
  if (!c.id.empty()) j["id"] = c.id;
  return j;
}

/// Parses a definition object. Relative weight paths resolve against `base_dir`.
inline ModelDefinition model_definition_from_json(const Json& j, const std::filesystem::path& base_dir = {}) {
  using namespace json_detail;
  require_object(j, "model definition");
  reject_unknown_keys(j, {"arch", "seed", "params", "id", "weights", "weights_manifest"}, "model definition");
  ModelDefinition def;
  if (j.contains("arch")) {
    if (!j["arch"].is_string()) throw ConfigError("model definition: arch must be a string");
    def.arch = j["arch"].get<std::string>();
  }
  if (def.arch != "toy_vit") throw ConfigError("model definition: unsupported arch \"" + def.arch + "\"");
  ToyModelConfig& c = def.config;
  if (j.contains("seed")) c.seed = parse_seed(j["seed"], "seed");
  if (j.contains("id")) c.id = j["id"].get<std::string>();
  if (j.contains("params")) {
    const Json& p = j["params"];
    require_object(p, "params");
    reject_unknown_keys(p,
                        {"height", "width", "patch_size", "dim", "depth", "heads", "mlp_hidden", "key_dim",
                         "pos_features", "logit_scale", "mask_threshold", "box_margin", "pos_scale", "pos_frequency",
                         "dc_gain", "qk_gain", "mlp_gain", "family_seed", "variant_scale"},
                        "params");
    auto integer = [&](const char* k, int& dst) {
      if (p.contains(k)) dst = static_cast<int>(parse_int(p[k], k));
    };
    auto real = [&](const char* k, double& dst) {
      if (p.contains(k)) dst = parse_real(p[k], k);
    };
    integer("height", c.height);
    integer("width", c.width);
    integer("patch_size", c.patch_size);
    integer("dim", c.dim);
    integer("depth", c.depth);
    integer("heads", c.heads);
    integer("mlp_hidden", c.mlp_hidden);
    integer("key_dim", c.key_dim);
    integer("pos_features", c.pos_features);
    real("logit_scale", c.logit_scale);
    real("mask_threshold", c.mask_threshold);
    real("box_margin", c.box_margin);
    real("pos_scale", c.pos_scale);
    real("pos_frequency", c.pos_frequency);
    real("dc_gain", c.dc_gain);
    real("qk_gain", c.qk_gain);
    real("mlp_gain", c.mlp_gain);
    real("variant_scale", c.variant_scale);
    if (p.contains("family_seed")) c.family_seed = parse_seed(p["family_seed"], "family_seed");
  }
  auto resolve = [&](const std::string& s) {
    const std::filesystem::path path(s);
    return (path.is_absolute() || base_dir.empty() ? path : base_dir / path).string();
  };
  if (j.contains("weights")) def.weights = resolve(j["weights"].get<std::string>());
  if (j.contains("weights_manifest")) def.manifest = resolve(j["weights_manifest"].get<std::string>());
  if (def.manifest && !def.weights) throw ConfigError("model definition: weights_manifest given without weights");
  c.validate();
  return def;
}

/// Manifest path used when a definition names only the blob: "w.bin" -> "w.manifest.json".
inline std::string default_manifest_path(const std::string& blob) {
  return std::filesystem::path(blob).replace_extension(".manifest.json").string();
}

/// Writes parameters as a flat little-endian float32 blob plus a JSON manifest
/// listing each tensor's name, shape and element offset.
inline void save_weights(const std::string& blob_path, const std::string& manifest_path,
                         const std::vector<NamedTensor>& params) {
  static_assert(std::endian::native == std::endian::little, "weight blobs assume a little-endian host");
  std::ofstream out(blob_path, std::ios::binary);
  if (!out) throw InputError("cannot write " + blob_path);
  Json tensors = Json::array();
  std::size_t offset = 0;
  for (const auto& t : params) {
    std::vector<float> f(t.data.begin(), t.data.end());
    out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += f.size();
  }
  if (!out) throw InputError("short write to " + blob_path);
  write_json_file(manifest_path, Json{{"dtype", "float32"},
                                      {"byte_order", "little"},
                                      {"blob", std::filesystem::path(blob_path).filename().string()},
                                      {"count", offset},
                                      {"tensors", std::move(tensors)}});
}

inline std::vector<NamedTensor> load_weights(const std::string& blob_path, const std::string& manifest_path) {
  const Json m = read_json_file(manifest_path);
  std::ifstream in(blob_path, std::ios::binary | std::ios::ate);
  if (!in) throw InputError("cannot open " + blob_path);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  if (bytes % sizeof(float) != 0) throw InputError(blob_path + ": size is not a multiple of 4 bytes");
  std::vector<float> flat(bytes / sizeof(float));
  in.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(bytes));
  std::vector<NamedTensor> out;
  try {
    if (m.value("dtype", "float32") != "float32") throw InputError(manifest_path + ": only float32 blobs are supported");
    for (const auto& t : m.at("tensors")) {
      NamedTensor nt;
      nt.name = t.at("name").get<std::string>();
      nt.shape = t.at("shape").get<std::vector<int>>();
      const auto offset = t.at("offset").get<std::size_t>();
      std::size_t n = 1;
      for (int d : nt.shape) n *= static_cast<std::size_t>(d);
      if (offset + n > flat.size()) {
        throw InputError(blob_path + ": tensor '" + nt.name + "' extends past the end of the blob");
      }
      nt.data.assign(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                     flat.begin() + static_cast<std::ptrdiff_t>(offset + n));
      out.push_back(std::move(nt));
    }
  } catch (const Json::exception& e) {
    throw InputError(manifest_path + ": " + e.what());
  }
  return out;
}

/// Builds the model a definition describes, loading its weights if any.
inline std::shared_ptr<ToyModel> build_model(const ModelDefinition& def) {
  ToyModelConfig cfg = def.config;
  if (def.weights && cfg.id.empty()) cfg.id = cfg.identity() + "/" + std::filesystem::path(*def.weights).stem().string();
  auto model = std::make_shared<ToyModel>(cfg);
  if (def.weights) model->set_parameters(load_weights(*def.weights, def.manifest.value_or(default_manifest_path(*def.weights))));
  return model;
}

/// A model reference is either a path to a definition file or an inline JSON object.
inline std::shared_ptr<ToyModel> load_model(const Json& ref, const std::filesystem::path& base_dir = {}) {
  if (ref.is_string()) {
    const std::filesystem::path path = ref.get<std::string>();
    const std::filesystem::path full = path.is_absolute() || base_dir.empty() ? path : base_dir / path;
    return build_model(model_definition_from_json(read_json_file(full.string()), full.parent_path()));
  }
  if (ref.is_object()) return build_model(model_definition_from_json(ref, base_dir));
  throw ConfigError("model reference must be a path or a JSON object");
}

}  // namespace pata
