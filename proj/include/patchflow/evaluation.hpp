#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchflow/attacks.hpp"
#include "patchflow/dataset.hpp"
#include "patchflow/flow_field.hpp"
#include "patchflow/image.hpp"
#include "patchflow/models.hpp"

namespace patchflow {

// Mean over valid pixels of the Euclidean endpoint error.
double epe(const FlowField& pred, const FlowField& gt);

// Ground truth inside the patch footprint is zeroed before the EPE: the
// patch region is static scene content, so its true flow is no motion.
double epe_attacked(const FlowField& pred, const FlowField& gt, const AdversarialPatch& patch,
                    const PatchPlacement& placement);

// Attacked EPE per patch location on a stride lattice of fully in-bounds
// top-left placements.
struct HeatMap {
  int stride = 0;
  int patch_h = 0;
  int patch_w = 0;
  std::vector<int> xs, ys;     // lattice coordinates
  std::vector<double> values;  // dataset mean, row-major over (ys, xs)
  std::vector<std::vector<double>> per_image;  // [sample][cell]

  double at(int iy, int ix) const { return values[static_cast<std::size_t>(iy) * xs.size() + ix]; }
  std::string to_csv() const;  // header x,y,epe in lattice order
};

struct LocationScore {
  int x = 0;
  int y = 0;
  double epe = 0.0;
};

struct EvalReport {
  double epe_unattacked = 0.0;
  LocationScore best, median, worst;  // best.epe <= median.epe <= worst.epe
  std::vector<double> per_sample_unattacked;
  int skipped_placements = 0;  // moving-patch placements dropped after retries
  nlohmann::json config_echo;

  nlohmann::json to_json() const;
};

struct HeatmapEval {
  HeatMap map;
  EvalReport report;
};

// Pastes the patch at every lattice placement (rotation 0, scale 1, both
// frames) and measures epe_attacked, averaged over the dataset. Placements
// are independent; `jobs` > 1 splits cells across threads with results
// reduced in lattice order, byte-identical to the serial run.
HeatmapEval location_heatmap(const Model& model, const DatasetManifest& dataset,
                             const AdversarialPatch& patch, int stride, int jobs = 1);

struct MotionRanges {
  double translation = 50.0;    // +- pixels, each axis
  double rotation_deg = 180.0;  // +- degrees
  double scale = 0.05;          // multiplier in 1 +- scale
};

struct MovingPatchConfig {
  int stride = 25;
  MotionRanges motion;
  std::uint64_t seed = 0;
  int max_retries = 20;  // per placement, before skipping with a log line
  int jobs = 1;
};

// Like location_heatmap, but the second frame's placement is perturbed by a
// sampled rigid motion and the ground truth inside the first-frame footprint
// becomes the sampled patch translation. Zero motion ranges reduce to
// location_heatmap.
HeatmapEval moving_patch_eval(const Model& model, const DatasetManifest& dataset,
                              const AdversarialPatch& patch, const MovingPatchConfig& config);

// Unbiased squared-MMD with a Gaussian kernel exp(-|x-y|^2 / (2 sigma^2)),
// as the paired U-statistic over equally sized sets (the diagonal is
// excluded from the cross term, so identical collections give exactly 0);
// may be slightly negative when both sets come from the same distribution.
double mmd(const std::vector<std::vector<double>>& set_a,
           const std::vector<std::vector<double>>& set_b, double bandwidth);

// Naive double-loop form of the same estimator, kept as a cross-check.
double mmd_reference(const std::vector<std::vector<double>>& set_a,
                     const std::vector<std::vector<double>>& set_b, double bandwidth);

// Median pairwise Euclidean distance of the pooled sets (lower median);
// falls back to the smallest positive distance, then 1, when degenerate.
double median_bandwidth(const std::vector<std::vector<double>>& set_a,
                        const std::vector<std::vector<double>>& set_b);

// Per-sample feature vectors (spatial mean of a tap activation) for clean
// and patched passes.
struct FeatureSampleSet {
  std::vector<std::vector<double>> unattacked, attacked;

  std::string to_csv() const;  // header set,f0,f1,... one row per vector
};

struct SeparabilityReport {
  FeatureSampleSet before_corr;  // first frame's deepest encoder features
  FeatureSampleSet after_corr;   // correlation output
  double bandwidth_before = 0.0, bandwidth_after = 0.0;  // median heuristic
  double mmd_before = 0.0, mmd_after = 0.0;

  nlohmann::json to_json() const;
};

// Pastes the patch at one sampled location per sample (rotation 0, scale 1)
// and compares clean vs patched feature distributions before and after the
// correlation layer.
SeparabilityReport feature_separability(const Model& model, const DatasetManifest& dataset,
                                        const AdversarialPatch& patch,
                                        std::uint64_t placement_seed);

// Bilinear colormap rendering of the grid (blue low, red high), cell_px
// output pixels per lattice cell.
Image render_heatmap(const HeatMap& map, int cell_px = 24);

}  // namespace patchflow
