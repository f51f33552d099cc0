#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "patchflow/flow_field.hpp"
#include "patchflow/image.hpp"

namespace patchflow {

enum class ShapeKind { rectangle, ellipse, polygon };

// Synthetic two-frame scene: textured moving shapes over a translating
// band-limited-noise background, with exact ground-truth flow.
struct SceneConfig {
  int height = 64;
  int width = 128;
  int num_shapes = 3;
  // Shapes cycle through these kinds in order.
  std::vector<ShapeKind> shape_kinds = {ShapeKind::rectangle, ShapeKind::ellipse,
                                        ShapeKind::polygon};
  // Per-axis displacement bounds (inclusive); sampled uniformly.
  int max_shape_translation = 6;
  int max_background_translation = 2;
  // Half-extent range of a shape, in pixels.
  int min_shape_radius = 6;
  int max_shape_radius = 14;
  // Integer displacements keep ground truth exactly warp-consistent; the
  // sub-pixel mode samples continuous displacements and resamples textures
  // bilinearly (excluded from the exact warp oracle).
  bool subpixel = false;
  std::uint64_t seed = 0;

  // Test hooks: when set, these override the sampled displacements.
  std::vector<std::pair<double, double>> forced_shape_translations;
  std::optional<std::pair<double, double>> forced_background_translation;
};

struct SceneSample {
  ImagePair pair;
  FlowField flow;
  // Pixels of frame_t whose destination in frame_t1 is covered by other
  // content (or leaves the frame); excluded from warp-consistency checks.
  std::vector<std::uint8_t> occluded;
};

SceneSample generate_scene(const SceneConfig& config);

std::string shape_kind_name(ShapeKind k);
ShapeKind shape_kind_from_name(const std::string& name);

}  // namespace patchflow
