#include "patchflow/training.hpp"

#include <algorithm>
#include <cmath>

#include "patchflow/image.hpp"
#include "patchflow/normalization.hpp"
#include "patchflow/ops.hpp"
#include "patchflow/rng.hpp"
#include "patchflow/util.hpp"

namespace patchflow {

namespace {

class PrecisionGuard {
 public:
  explicit PrecisionGuard(Precision p) : previous_(compute_precision()) {
    set_compute_precision(p);
  }
  ~PrecisionGuard() { set_compute_precision(previous_); }

 private:
  Precision previous_;
};

void validate_config(const TrainConfig& config) {
  if (config.iterations < 0) throw ConfigError("train config: iterations must be >= 0");
  if (config.batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (!(config.peak_lr > 0.0)) throw ConfigError("train config: peak_lr must be positive");
  if (config.weight_decay < 0.0)
    throw ConfigError("train config: weight_decay must be non-negative");
  if (!(config.clip_norm > 0.0)) throw ConfigError("train config: clip_norm must be positive");
  if (config.hflip_probability < 0.0 || config.hflip_probability > 1.0)
    throw ConfigError("train config: hflip_probability must lie in [0,1]");
}

double mean_epe(const Tensor& full_res, const FlowField& gt) {
  const auto& vals = full_res.values();
  std::size_t plane = static_cast<std::size_t>(gt.height) * static_cast<std::size_t>(gt.width);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (!gt.valid[i]) continue;
    double du = vals[i] - gt.u[i];
    double dv = vals[plane + i] - gt.v[i];
    sum += std::sqrt(du * du + dv * dv);
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

}  // namespace

double one_cycle_lr(int step, int total, double peak_lr) {
  if (total <= 0) throw ConfigError("lr schedule: total steps must be positive");
  if (step < 0 || step >= total)
    throw ConfigError("lr schedule: step " + std::to_string(step) + " out of range [0," +
                      std::to_string(total) + ")");
  double warmup = 0.3 * total;
  double start = peak_lr / 25.0;
  double floor_lr = peak_lr / 1e4;
  double s = static_cast<double>(step);
  if (s <= warmup) {
    if (warmup == 0.0) return peak_lr;
    return start + (peak_lr - start) * (s / warmup);
  }
  return peak_lr + (floor_lr - peak_lr) * ((s - warmup) / (total - warmup));
}

Tensor multiscale_l2_loss(const std::vector<Tensor>& predictions, const FlowField& gt,
                          const std::vector<double>& weights) {
  if (predictions.empty()) throw ConfigError("multiscale loss: no predictions");
  if (weights.size() != predictions.size())
    throw ConfigError("multiscale loss: " + std::to_string(weights.size()) + " weights for " +
                      std::to_string(predictions.size()) + " predicted scales");
  Tensor total;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const Tensor& pred = predictions[i];
    if (pred.ndim() != 4 || pred.dim(1) != 2)
      throw ShapeError("multiscale loss: prediction " + std::to_string(i) +
                       " must have shape (1,2,h,w), got " + shape_string(pred.shape()));
    int h = pred.dim(2);
    if (h <= 0 || gt.height % h != 0)
      throw ShapeError("multiscale loss: ground-truth height " + std::to_string(gt.height) +
                       " is not a multiple of prediction height " + std::to_string(h));
    int factor = gt.height / h;
    FlowField scaled_gt = factor == 1 ? gt : downsample_flow(gt, factor);
    if (scaled_gt.width != pred.dim(3))
      throw ShapeError("multiscale loss: prediction " + std::to_string(i) +
                       " width does not match the downsampled ground truth");
    Tensor term = ops::scale(ops::epe_loss(pred, scaled_gt), weights[i]);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

std::vector<double> default_loss_weights(int num_scales) {
  if (num_scales < 1) throw ConfigError("loss weights: scale count must be positive");
  std::vector<double> w(static_cast<std::size_t>(num_scales));
  double value = 0.32;
  for (auto& x : w) {
    x = value;
    value /= 2.0;
  }
  return w;
}

Tensor kaiming_init(const std::vector<int>& shape, int fan_in, std::uint64_t seed) {
  if (fan_in <= 0) throw ConfigError("kaiming init: fan_in must be positive");
  Tensor t = Tensor::zeros(shape);
  Rng rng(seed);
  double std_dev = std::sqrt(2.0 / fan_in);
  for (double& v : t.values()) v = rng.normal(0.0, std_dev);
  return t;
}

void OptState::init(const Model& model) {
  step = 0;
  m.assign(model.params.size(), {});
  v.assign(model.params.size(), {});
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    m[i].assign(model.params[i].tensor.numel(), 0.0);
    v[i].assign(model.params[i].tensor.numel(), 0.0);
  }
}

void clip_global_norm(std::vector<Param>& params, double clip_norm) {
  if (!(clip_norm > 0.0)) throw ConfigError("gradient clip: clip_norm must be positive");
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  double norm = std::sqrt(sq);
  if (norm <= clip_norm) return;
  double factor = clip_norm / norm;
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double& g : p.tensor.grad()) g *= factor;
  }
}

void adamw_update(std::vector<Param>& params, double lr, double weight_decay, OptState& state) {
  if (state.m.size() != params.size())
    throw ConfigError("optimizer: state was initialized for a different parameter list");
  long t = state.step + 1;
  double bias1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t));
  double bias2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].tensor;
    if (!p.has_grad()) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    auto& vals = p.values();
    const auto& grad = p.grad();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      double g = grad[j];
      m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * g;
      v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * g * g;
      double mhat = m[j] / bias1;
      double vhat = v[j] / bias2;
      vals[j] = vals[j] * (1.0 - weight_decay) - lr * mhat / (std::sqrt(vhat) + kAdamEps);
    }
  }
  state.step = t;
}

StepMetrics train_step(Model& model, const std::vector<SceneSample>& batch,
                       const TrainConfig& config, OptState& state) {
  validate_config(config);
  if (batch.empty()) throw ConfigError("train step: empty batch");
  PrecisionGuard precision(config.precision);

  StepMetrics metrics;
  metrics.lr = one_cycle_lr(static_cast<int>(state.step), config.iterations, config.peak_lr);

  for (auto& p : model.params) p.tensor.zero_grad();

  Tape tape;
  TapeScope scope(tape);
  Tensor total;
  double epe_sum = 0.0;
  for (const SceneSample& sample : batch) {
    Tensor a = normalize_tensor(image_to_tensor(sample.pair.frame_t), model.normalization);
    Tensor b = normalize_tensor(image_to_tensor(sample.pair.frame_t1), model.normalization);
    ForwardResult out = model.forward_normalized(a, b);
    std::vector<double> weights = config.loss_weights.empty()
                                      ? default_loss_weights(static_cast<int>(out.flows.size()))
                                      : config.loss_weights;
    Tensor loss = multiscale_l2_loss(out.flows, sample.flow, weights);
    total = total.defined() ? ops::add(total, loss) : loss;
    epe_sum += mean_epe(out.full_res, sample.flow);
  }
  total = ops::scale(total, 1.0 / static_cast<double>(batch.size()));
  metrics.loss = total.values()[0];
  metrics.epe = epe_sum / static_cast<double>(batch.size());

  tape.backward(total);

  if (!std::isfinite(metrics.loss)) {
    std::string culprit = "(no non-finite parameter gradient found)";
    for (const auto& p : model.params) {
      if (!p.tensor.has_grad()) continue;
      bool bad = false;
      for (double g : p.tensor.grad())
        if (!std::isfinite(g)) {
          bad = true;
          break;
        }
      if (bad) {
        culprit = "'" + p.name + "'";
        break;
      }
    }
    throw std::runtime_error("training: non-finite loss at step " + std::to_string(state.step) +
                             "; first non-finite gradient in parameter " + culprit);
  }

  clip_global_norm(model.params, config.clip_norm);
  adamw_update(model.params, metrics.lr, config.weight_decay, state);
  return metrics;
}

SceneSample hflip_sample(const SceneSample& sample) {
  SceneSample out = sample;
  int h = sample.pair.frame_t.height;
  int w = sample.pair.frame_t.width;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        out.pair.frame_t.at(c, y, x) = sample.pair.frame_t.at(c, y, w - 1 - x);
        out.pair.frame_t1.at(c, y, x) = sample.pair.frame_t1.at(c, y, w - 1 - x);
      }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::size_t dst = sample.flow.index(y, x);
      std::size_t src = sample.flow.index(y, w - 1 - x);
      out.flow.u[dst] = -sample.flow.u[src];
      out.flow.v[dst] = sample.flow.v[src];
      out.flow.valid[dst] = sample.flow.valid[src];
      out.occluded[dst] = sample.occluded[src];
    }
  return out;
}

TrainResult train(const ModelSpec& spec, const DatasetManifest& manifest,
                  const TrainConfig& config) {
  validate_config(config);
  if (manifest.count < 1) throw ConfigError("train: dataset manifest is empty");

  TrainResult result;
  result.model = build_model(spec, config.seed);
  result.model.normalization.id = config.normalization_id;
  if (config.normalization_id == "unit_meansub") {
    std::vector<Image> head;
    int probe = std::min(manifest.count, 100);
    for (int i = 0; i < probe; ++i) {
      SceneSample s = manifest_sample(manifest, i);
      head.push_back(s.pair.frame_t);
      head.push_back(s.pair.frame_t1);
    }
    result.model.normalization = make_unit_meansub(head);
  }
  validate_scheme(result.model.normalization);

  OptState state;
  state.init(result.model);
  Rng order_rng(derive_seed(config.seed, 1));
  Rng aug_rng(derive_seed(config.seed, 2));

  CsvWriter log({"step", "lr", "loss", "epe"});
  for (int step = 0; step < config.iterations; ++step) {
    std::vector<SceneSample> batch;
    batch.reserve(static_cast<std::size_t>(config.batch_size));
    for (int b = 0; b < config.batch_size; ++b) {
      int idx = static_cast<int>(order_rng.uniform_int(static_cast<std::uint64_t>(manifest.count)));
      SceneSample sample = manifest_sample(manifest, idx);
      if (aug_rng.bernoulli(config.hflip_probability)) sample = hflip_sample(sample);
      batch.push_back(std::move(sample));
    }
    result.last = train_step(result.model, batch, config, state);
    log.add_row({std::to_string(step), format_double(result.last.lr),
                 format_double(result.last.loss), format_double(result.last.epe)});
  }
  result.metrics_csv = log.str();
  return result;
}

}  // namespace patchflow
