#pragma once

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "patchflow/scene.hpp"

namespace patchflow {

// A dataset is a scene configuration plus a root seed: sample i is the scene
// generated with seed derive_seed(root_seed, i). Manifests serialize this
// recipe as JSON so a dataset is reproducible from one small file.
struct DatasetManifest {
  SceneConfig base;
  std::uint64_t root_seed = 1;
  int count = 0;
};

SceneSample manifest_sample(const DatasetManifest& manifest, int index);

nlohmann::json scene_config_to_json(const SceneConfig& config);
SceneConfig scene_config_from_json(const nlohmann::json& obj);

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);

}  // namespace patchflow
