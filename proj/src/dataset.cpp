#include "patchflow/dataset.hpp"

#include <stdexcept>

#include "patchflow/json_util.hpp"
#include "patchflow/rng.hpp"
#include "patchflow/util.hpp"

namespace patchflow {

SceneSample manifest_sample(const DatasetManifest& manifest, int index) {
  if (index < 0 || index >= manifest.count)
    throw std::out_of_range("manifest sample index " + std::to_string(index) + " not in [0," +
                            std::to_string(manifest.count) + ")");
  SceneConfig config = manifest.base;
  config.seed = derive_seed(manifest.root_seed, static_cast<std::uint64_t>(index));
  return generate_scene(config);
}

nlohmann::json scene_config_to_json(const SceneConfig& c) {
  nlohmann::json kinds = nlohmann::json::array();
  for (ShapeKind k : c.shape_kinds) kinds.push_back(shape_kind_name(k));
  return nlohmann::json{{"height", c.height},
                        {"width", c.width},
                        {"num_shapes", c.num_shapes},
                        {"shape_kinds", kinds},
                        {"max_shape_translation", c.max_shape_translation},
                        {"max_background_translation", c.max_background_translation},
                        {"min_shape_radius", c.min_shape_radius},
                        {"max_shape_radius", c.max_shape_radius},
                        {"subpixel", c.subpixel}};
}

SceneConfig scene_config_from_json(const nlohmann::json& obj) {
  check_keys(obj,
             {"height", "width", "num_shapes", "shape_kinds", "max_shape_translation",
              "max_background_translation", "min_shape_radius", "max_shape_radius", "subpixel"},
             "scene config");
  SceneConfig c;
  c.height = json_get(obj, "height", c.height);
  c.width = json_get(obj, "width", c.width);
  c.num_shapes = json_get(obj, "num_shapes", c.num_shapes);
  if (obj.contains("shape_kinds")) {
    c.shape_kinds.clear();
    for (const auto& name : obj.at("shape_kinds"))
      c.shape_kinds.push_back(shape_kind_from_name(name.get<std::string>()));
  }
  c.max_shape_translation = json_get(obj, "max_shape_translation", c.max_shape_translation);
  c.max_background_translation =
      json_get(obj, "max_background_translation", c.max_background_translation);
  c.min_shape_radius = json_get(obj, "min_shape_radius", c.min_shape_radius);
  c.max_shape_radius = json_get(obj, "max_shape_radius", c.max_shape_radius);
  c.subpixel = json_get(obj, "subpixel", c.subpixel);
  return c;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  nlohmann::json doc{{"scene", scene_config_to_json(manifest.base)},
                     {"root_seed", manifest.root_seed},
                     {"count", manifest.count}};
  write_text_file(path, doc.dump(2) + "\n");
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest parse failure in " + path.string() + ": " + e.what());
  }
  check_keys(doc, {"scene", "root_seed", "count"}, "manifest");
  DatasetManifest m;
  if (doc.contains("scene")) m.base = scene_config_from_json(doc.at("scene"));
  m.root_seed = json_get<std::uint64_t>(doc, "root_seed", m.root_seed);
  m.count = json_get(doc, "count", m.count);
  return m;
}

}  // namespace patchflow
