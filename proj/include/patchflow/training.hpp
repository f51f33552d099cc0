#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "patchflow/dataset.hpp"
#include "patchflow/flow_field.hpp"
#include "patchflow/models.hpp"
#include "patchflow/scene.hpp"
#include "patchflow/tensor.hpp"

namespace patchflow {

struct TrainConfig {
  int iterations = 20000;
  int batch_size = 4;
  double peak_lr = 1e-4;
  double weight_decay = 1e-6;
  double clip_norm = 1.0;
  // One weight per predicted scale, coarse to fine; empty selects the
  // default halving ladder starting at 0.32.
  std::vector<double> loss_weights;
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;
  std::string normalization_id = "sym_unit";
  // Probability of mirroring a training sample left-right.
  double hflip_probability = 0.5;
};

// Adaptive-moment constants shared with the reference oracle in the tests.
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// Linear warmup from peak/25 over the first 30% of steps, then linear anneal
// to peak/1e4 at the end; continuous at the junction.
double one_cycle_lr(int step, int total, double peak_lr);

// Sum over scales of weight * (mean endpoint error of that scale's
// prediction against the average-pooled ground truth, in the scale's own
// pixel units).
Tensor multiscale_l2_loss(const std::vector<Tensor>& predictions, const FlowField& gt,
                          const std::vector<double>& weights);

std::vector<double> default_loss_weights(int num_scales);

// Zero-mean normal draw with variance 2/fan_in.
Tensor kaiming_init(const std::vector<int>& shape, int fan_in, std::uint64_t seed);

struct OptState {
  long step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  void init(const Model& model);
};

struct StepMetrics {
  double lr = 0.0;
  double loss = 0.0;
  double epe = 0.0;
};

// Scales every parameter gradient so the global l2 norm does not exceed
// clip_norm; a norm already within the bound is left untouched.
void clip_global_norm(std::vector<Param>& params, double clip_norm);

// One decoupled-weight-decay adaptive-moment update:
//   m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
//   theta <- theta*(1 - weight_decay) - lr * mhat / (sqrt(vhat) + eps)
// The decay multiplier is independent of the learning rate.
void adamw_update(std::vector<Param>& params, double lr, double weight_decay, OptState& state);

// Forward, multiscale loss, backward, clip, update. Throws on a non-finite
// loss, naming the first parameter with a non-finite gradient.
StepMetrics train_step(Model& model, const std::vector<SceneSample>& batch,
                       const TrainConfig& config, OptState& state);

struct TrainResult {
  Model model;
  std::string metrics_csv;  // header: step,lr,loss,epe
  StepMetrics last;
};

// Initializes from config.seed, then runs config.iterations optimization
// steps over batches drawn from the manifest. Deterministic per
// (spec, manifest, config).
TrainResult train(const ModelSpec& spec, const DatasetManifest& manifest,
                  const TrainConfig& config);

// Left-right mirror of a sample (frames, flow with negated u, masks).
SceneSample hflip_sample(const SceneSample& sample);

}  // namespace patchflow
