#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchflow/dataset.hpp"
#include "patchflow/flow_field.hpp"
#include "patchflow/image.hpp"
#include "patchflow/models.hpp"
#include "patchflow/tensor.hpp"

namespace patchflow {

// Square patch with an inscribed circular mask; only masked pixels are ever
// pasted or optimized.
struct AdversarialPatch {
  int height = 0;
  int width = 0;
  Tensor pixels;           // (1,3,h,w), values in [0,1]
  std::vector<bool> mask;  // row-major h*w, centered disk

  int mask_radius() const { return std::min(height, width) / 2; }
  bool mask_at(int y, int x) const { return mask[static_cast<std::size_t>(y) * width + x]; }
};

// Disk mask of radius floor(min(h,w)/2) around the pixel-grid center.
std::vector<bool> disk_mask(int height, int width);

AdversarialPatch make_random_patch(int size, std::uint64_t seed);

// Extra rigid motion applied to the patch in the second frame only.
struct SecondFrameDelta {
  double dx = 0.0;
  double dy = 0.0;
  double rotation_deg = 0.0;
  double scale = 1.0;
};

struct PatchPlacement {
  double x = 0.0;  // top-left corner of the scaled footprint, pixels
  double y = 0.0;
  double rotation_deg = 0.0;
  double scale = 1.0;
  std::optional<SecondFrameDelta> second_frame_delta;
};

struct PatchAttackConfig {
  int patch_size = 16;
  int iterations = 400;
  double learning_rate = 0.05;
  double rotation_range_deg = 10.0;  // sampled uniformly in +-range
  double scale_range = 0.05;         // sampled uniformly in 1 +- range
  int locations_per_step = 1;
  std::uint64_t seed = 0;
};

struct StripeConfig {
  int size = 16;
  int stripe_width = 2;
  double orientation_deg = 0.0;  // 0 = vertical stripes (bands of columns)
  std::array<double, 3> color_a = {0.0, 0.0, 0.0};
  std::array<double, 3> color_b = {1.0, 1.0, 1.0};
  double contrast = 1.0;  // blends both colors toward mid-gray
};

struct FgsmConfig {
  double epsilon = 0.02;  // max-norm ball radius
  double alpha = 0.002;   // signed step size
  double beta = 0.47;     // gradient momentum
  int iterations = 10;
};

// Side length of the pasted footprint for a patch extent under a scale
// factor: round half up of extent*scale.
int footprint_side(int patch_extent, double scale);

// Pastes the masked patch into a [0,1] image tensor (1,3,H,W) with bilinear
// resampling under the placement's rotation/scale. Differentiable w.r.t.
// both the patch pixels and the image. Throws when the footprint leaves the
// image.
Tensor paste_patch_tensor(const Tensor& image01, const Tensor& patch_pixels,
                          const std::vector<bool>& mask, int patch_h, int patch_w,
                          double x, double y, double rotation_deg, double scale);

// Applies the placement to both frames (second_frame_delta shifts only the
// second frame's placement).
ImagePair paste_patch(const ImagePair& pair, const AdversarialPatch& patch,
                      const PatchPlacement& placement);

// Image pixels overwritten by the paste in the first frame.
std::vector<bool> patch_footprint(int image_h, int image_w, const AdversarialPatch& patch,
                                  const PatchPlacement& placement);

// Mean over all pixels of the cosine between the reference flow and the
// attacked flow tensor (1,2,H,W); differentiable w.r.t. the attacked flow.
Tensor cosine_objective(const FlowField& unattacked, const Tensor& attacked);

struct PatchAttackResult {
  AdversarialPatch patch;
  std::vector<double> objective_trace;  // mean objective per step, pre-update
  std::string trace_csv;                // header: step,objective
};

// Gradient descent on the masked patch pixels of the expected cosine
// objective against the model's own clean predictions, sampling
// location/rotation/scale per step; pixels clamped to [0,1] after each step.
PatchAttackResult optimize_patch(const Model& model, const DatasetManifest& dataset,
                                 const PatchAttackConfig& config);

AdversarialPatch make_striped_patch(const StripeConfig& config);

struct FgsmResult {
  ImagePair perturbed;
  Tensor delta_t;   // (1,3,H,W), perturbed - original, first frame
  Tensor delta_t1;  // second frame
};

// Iterative signed-gradient attack with momentum on both frames
// independently, minimizing the cosine objective against the clean
// prediction; each step projects to the epsilon max-norm ball and to [0,1].
FgsmResult fgsm_attack(const Model& model, const ImagePair& pair, const FgsmConfig& config);

struct ReplacementReport {
  double epe_none = 0.0;        // attacked, no replacement
  double epe_conv3 = 0.0;       // attacked, level-3 features replaced
  double epe_conv_redir = 0.0;  // attacked, redirect features replaced
  double epe_corr = 0.0;        // attacked, correlation output replaced
};

// For each dataset sample: paste a uniform-noise patch at a sampled
// location and record each tap; paste the given patch at the same location
// and re-run with each tap replaced by the recorded bank. EPE is measured
// against ground truth zeroed inside the patch footprint; the report
// averages over samples.
ReplacementReport feature_replacement_experiment(const Model& model,
                                                 const DatasetManifest& dataset,
                                                 const AdversarialPatch& patch,
                                                 std::uint64_t noise_seed);

// PNG of the pixels plus a JSON sidecar (same path with .json) holding
// size, mask radius, seed and the generator config.
void save_patch(const std::filesystem::path& png_path, const AdversarialPatch& patch,
                const nlohmann::json& generator, std::uint64_t seed);
AdversarialPatch load_patch(const std::filesystem::path& png_path);

}  // namespace patchflow
