#include "patchflow/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "patchflow/image_io.hpp"
#include "patchflow/json_util.hpp"
#include "patchflow/normalization.hpp"
#include "patchflow/ops.hpp"
#include "patchflow/rng.hpp"
#include "patchflow/util.hpp"

namespace patchflow {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Temporarily drops requires_grad on every model parameter so attack
// backward passes skip parameter-gradient work.
class ParamGradOff {
 public:
  explicit ParamGradOff(const Model& model) {
    for (const auto& p : model.params) {
      Tensor handle = p.tensor;  // shares storage; flips the shared flag
      saved_.push_back(handle.requires_grad());
      handle.set_requires_grad(false);
      handles_.push_back(handle);
    }
  }
  ~ParamGradOff() {
    for (std::size_t i = 0; i < handles_.size(); ++i)
      handles_[i].set_requires_grad(saved_[i]);
  }

 private:
  std::vector<Tensor> handles_;
  std::vector<bool> saved_;
};

struct PasteGeometry {
  int side_h = 0, side_w = 0;
  double cfy = 0, cfx = 0;  // footprint center, image coordinates
  double cpy = 0, cpx = 0;  // patch center, patch coordinates
  double cos_t = 1, sin_t = 0, inv_scale = 1;
  int y_begin = 0, y_end = 0, x_begin = 0, x_end = 0;  // image iteration range
};

PasteGeometry make_geometry(int image_h, int image_w, int patch_h, int patch_w, double x,
                            double y, double rotation_deg, double scale) {
  if (!(scale > 0.0)) throw ConfigError("paste: scale must be positive");
  PasteGeometry g;
  g.side_h = footprint_side(patch_h, scale);
  g.side_w = footprint_side(patch_w, scale);
  if (x < -1e-9 || y < -1e-9 || x + g.side_w > image_w + 1e-9 || y + g.side_h > image_h + 1e-9)
    throw ConfigError("paste: patch footprint out of bounds (top-left " + std::to_string(x) +
                      "," + std::to_string(y) + ", footprint " + std::to_string(g.side_w) + "x" +
                      std::to_string(g.side_h) + ", image " + std::to_string(image_w) + "x" +
                      std::to_string(image_h) + ")");
  g.cfy = y + (g.side_h - 1) / 2.0;
  g.cfx = x + (g.side_w - 1) / 2.0;
  g.cpy = (patch_h - 1) / 2.0;
  g.cpx = (patch_w - 1) / 2.0;
  double theta = rotation_deg * kPi / 180.0;
  g.cos_t = std::cos(theta);
  g.sin_t = std::sin(theta);
  g.inv_scale = 1.0 / scale;
  g.y_begin = std::max(0, static_cast<int>(std::floor(y)));
  g.y_end = std::min(image_h - 1, static_cast<int>(std::ceil(y + g.side_h - 1)));
  g.x_begin = std::max(0, static_cast<int>(std::floor(x)));
  g.x_end = std::min(image_w - 1, static_cast<int>(std::ceil(x + g.side_w - 1)));
  return g;
}

struct PastePixel {
  int out_y = 0, out_x = 0;
  std::size_t tap[4] = {0, 0, 0, 0};  // patch plane indices (clamped)
  double weight[4] = {0, 0, 0, 0};
};

// Enumerates the image pixels whose interpolated mask value reaches 0.5,
// with the bilinear taps into the patch plane for each.
std::vector<PastePixel> compute_paste_pixels(int image_h, int image_w,
                                             const std::vector<bool>& mask, int patch_h,
                                             int patch_w, double x, double y,
                                             double rotation_deg, double scale) {
  if (static_cast<int>(mask.size()) != patch_h * patch_w)
    throw ShapeError("paste: mask size does not match the patch extents");
  PasteGeometry g =
      make_geometry(image_h, image_w, patch_h, patch_w, x, y, rotation_deg, scale);
  std::vector<PastePixel> out;
  for (int yy = g.y_begin; yy <= g.y_end; ++yy) {
    for (int xx = g.x_begin; xx <= g.x_end; ++xx) {
      double dy = yy - g.cfy;
      double dx = xx - g.cfx;
      double px = g.cpx + (g.cos_t * dx + g.sin_t * dy) * g.inv_scale;
      double py = g.cpy + (-g.sin_t * dx + g.cos_t * dy) * g.inv_scale;
      int y0 = static_cast<int>(std::floor(py));
      int x0 = static_cast<int>(std::floor(px));
      double fy = py - y0;
      double fx = px - x0;
      double w[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
      int ty[4] = {y0, y0, y0 + 1, y0 + 1};
      int tx[4] = {x0, x0 + 1, x0, x0 + 1};
      double mask_value = 0.0;
      for (int k = 0; k < 4; ++k) {
        if (ty[k] < 0 || ty[k] >= patch_h || tx[k] < 0 || tx[k] >= patch_w) continue;
        if (mask[static_cast<std::size_t>(ty[k]) * patch_w + tx[k]]) mask_value += w[k];
      }
      if (mask_value < 0.5) continue;
      PastePixel p;
      p.out_y = yy;
      p.out_x = xx;
      for (int k = 0; k < 4; ++k) {
        int cy = std::clamp(ty[k], 0, patch_h - 1);
        int cx = std::clamp(tx[k], 0, patch_w - 1);
        p.tap[k] = static_cast<std::size_t>(cy) * patch_w + cx;
        p.weight[k] = w[k];
      }
      out.push_back(p);
    }
  }
  return out;
}

double mean_epe_value(const Tensor& full_res, const FlowField& gt) {
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

void check_patch(const AdversarialPatch& patch) {
  if (patch.height < 1 || patch.width < 1 || !patch.pixels.defined())
    throw ConfigError("patch: empty patch");
  if (patch.pixels.shape() != std::vector<int>{1, 3, patch.height, patch.width})
    throw ShapeError("patch: pixels must have shape (1,3,h,w), got " +
                     shape_string(patch.pixels.shape()));
  if (static_cast<int>(patch.mask.size()) != patch.height * patch.width)
    throw ShapeError("patch: mask size does not match extents");
}

PatchPlacement second_frame_placement(const AdversarialPatch& patch,
                                      const PatchPlacement& placement) {
  if (!placement.second_frame_delta) return placement;
  const SecondFrameDelta& d = *placement.second_frame_delta;
  PatchPlacement p2;
  p2.rotation_deg = placement.rotation_deg + d.rotation_deg;
  p2.scale = placement.scale * d.scale;
  // The delta translates the footprint center, so a scale change keeps the
  // patch centered on its translated position.
  int side1_h = footprint_side(patch.height, placement.scale);
  int side1_w = footprint_side(patch.width, placement.scale);
  int side2_h = footprint_side(patch.height, p2.scale);
  int side2_w = footprint_side(patch.width, p2.scale);
  double cfy = placement.y + (side1_h - 1) / 2.0 + d.dy;
  double cfx = placement.x + (side1_w - 1) / 2.0 + d.dx;
  p2.y = cfy - (side2_h - 1) / 2.0;
  p2.x = cfx - (side2_w - 1) / 2.0;
  return p2;
}

}  // namespace

std::vector<bool> disk_mask(int height, int width) {
  if (height < 1 || width < 1) throw ConfigError("mask: extents must be positive");
  double cy = (height - 1) / 2.0;
  double cx = (width - 1) / 2.0;
  double r = std::min(height, width) / 2;
  double r2 = r * r + 1e-9;
  std::vector<bool> mask(static_cast<std::size_t>(height) * width, false);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double dy = y - cy, dx = x - cx;
      if (dy * dy + dx * dx <= r2) mask[static_cast<std::size_t>(y) * width + x] = true;
    }
  return mask;
}

AdversarialPatch make_random_patch(int size, std::uint64_t seed) {
  if (size < 1) throw ConfigError("patch: size must be positive");
  AdversarialPatch p;
  p.height = size;
  p.width = size;
  p.pixels = Tensor::zeros({1, 3, size, size});
  Rng rng(seed);
  for (double& v : p.pixels.values()) v = rng.uniform01();
  p.mask = disk_mask(size, size);
  return p;
}

int footprint_side(int patch_extent, double scale) {
  if (patch_extent < 1) throw ConfigError("paste: patch extent must be positive");
  if (!(scale > 0.0)) throw ConfigError("paste: scale must be positive");
  return std::max(1, static_cast<int>(std::floor(patch_extent * scale + 0.5)));
}

Tensor paste_patch_tensor(const Tensor& image01, const Tensor& patch_pixels,
                          const std::vector<bool>& mask, int patch_h, int patch_w, double x,
                          double y, double rotation_deg, double scale) {
  if (image01.ndim() != 4 || image01.dim(0) != 1 || image01.dim(1) != 3)
    throw ShapeError("paste: image must have shape (1,3,H,W), got " +
                     shape_string(image01.shape()));
  if (patch_pixels.shape() != std::vector<int>{1, 3, patch_h, patch_w})
    throw ShapeError("paste: patch pixels must have shape (1,3," + std::to_string(patch_h) +
                     "," + std::to_string(patch_w) + "), got " +
                     shape_string(patch_pixels.shape()));
  int h = image01.dim(2), w = image01.dim(3);
  auto pixels = std::make_shared<std::vector<PastePixel>>(
      compute_paste_pixels(h, w, mask, patch_h, patch_w, x, y, rotation_deg, scale));

  Tensor out = Tensor::from_values(image01.shape(), image01.values());
  std::size_t out_plane = static_cast<std::size_t>(h) * w;
  std::size_t patch_plane = static_cast<std::size_t>(patch_h) * patch_w;
  for (const PastePixel& p : *pixels) {
    std::size_t oi = static_cast<std::size_t>(p.out_y) * w + p.out_x;
    for (int c = 0; c < 3; ++c) {
      double v = 0.0;
      for (int k = 0; k < 4; ++k)
        v += p.weight[k] * patch_pixels.values()[c * patch_plane + p.tap[k]];
      out.values()[c * out_plane + oi] = v;
    }
  }

  Tape* tape = Tape::active();
  bool track = tape != nullptr && (image01.requires_grad() || patch_pixels.requires_grad());
  if (track) {
    out.set_requires_grad(true);
    Tensor img = image01, patch = patch_pixels, result = out;
    tape->record([img, patch, result, pixels, out_plane, patch_plane, w]() mutable {
      const auto& go = result.grad();
      if (img.requires_grad()) {
        img.ensure_grad();
        auto& gi = img.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        for (const PastePixel& p : *pixels) {
          std::size_t oi = static_cast<std::size_t>(p.out_y) * w + p.out_x;
          for (int c = 0; c < 3; ++c) gi[c * out_plane + oi] -= go[c * out_plane + oi];
        }
      }
      if (patch.requires_grad()) {
        patch.ensure_grad();
        auto& gp = patch.grad();
        for (const PastePixel& p : *pixels) {
          std::size_t oi = static_cast<std::size_t>(p.out_y) * w + p.out_x;
          for (int c = 0; c < 3; ++c) {
            double g = go[c * out_plane + oi];
            for (int k = 0; k < 4; ++k) gp[c * patch_plane + p.tap[k]] += p.weight[k] * g;
          }
        }
      }
    });
  }
  return out;
}

ImagePair paste_patch(const ImagePair& pair, const AdversarialPatch& patch,
                      const PatchPlacement& placement) {
  check_patch(patch);
  PatchPlacement p2 = second_frame_placement(patch, placement);
  Tensor a = paste_patch_tensor(image_to_tensor(pair.frame_t), patch.pixels, patch.mask,
                                patch.height, patch.width, placement.x, placement.y,
                                placement.rotation_deg, placement.scale);
  Tensor b = paste_patch_tensor(image_to_tensor(pair.frame_t1), patch.pixels, patch.mask,
                                patch.height, patch.width, p2.x, p2.y, p2.rotation_deg,
                                p2.scale);
  ImagePair out;
  out.frame_t = tensor_to_image(a);
  out.frame_t1 = tensor_to_image(b);
  return out;
}

std::vector<bool> patch_footprint(int image_h, int image_w, const AdversarialPatch& patch,
                                  const PatchPlacement& placement) {
  check_patch(patch);
  auto pixels = compute_paste_pixels(image_h, image_w, patch.mask, patch.height, patch.width,
                                     placement.x, placement.y, placement.rotation_deg,
                                     placement.scale);
  std::vector<bool> fp(static_cast<std::size_t>(image_h) * image_w, false);
  for (const PastePixel& p : pixels)
    fp[static_cast<std::size_t>(p.out_y) * image_w + p.out_x] = true;
  return fp;
}

Tensor cosine_objective(const FlowField& unattacked, const Tensor& attacked) {
  return ops::cosine_similarity(attacked, unattacked);
}

PatchAttackResult optimize_patch(const Model& model, const DatasetManifest& dataset,
                                 const PatchAttackConfig& config) {
  if (config.patch_size < 1) throw ConfigError("patch attack: patch_size must be positive");
  if (config.iterations < 0) throw ConfigError("patch attack: iterations must be >= 0");
  if (config.learning_rate < 0.0)
    throw ConfigError("patch attack: learning rate must be non-negative");
  if (config.locations_per_step < 1)
    throw ConfigError("patch attack: locations_per_step must be >= 1");
  if (config.rotation_range_deg < 0.0 || config.scale_range < 0.0 || config.scale_range >= 1.0)
    throw ConfigError("patch attack: invalid sampling ranges");
  if (dataset.count < 1) throw ConfigError("patch attack: dataset manifest is empty");

  ParamGradOff guard(model);

  // Clean images and the model's own predictions, fixed for the whole run.
  std::vector<Tensor> frames_t, frames_t1;
  std::vector<FlowField> clean;
  for (int i = 0; i < dataset.count; ++i) {
    SceneSample s = manifest_sample(dataset, i);
    Tensor a = image_to_tensor(s.pair.frame_t);
    Tensor b = image_to_tensor(s.pair.frame_t1);
    ForwardResult out = model.forward_normalized(normalize_tensor(a, model.normalization),
                                                 normalize_tensor(b, model.normalization));
    frames_t.push_back(a);
    frames_t1.push_back(b);
    clean.push_back(ops::tensor_to_flow(out.full_res));
  }
  int image_h = frames_t[0].dim(2), image_w = frames_t[0].dim(3);

  PatchAttackResult result;
  result.patch = make_random_patch(config.patch_size, derive_seed(config.seed, 0));
  Tensor& px = result.patch.pixels;
  px.set_requires_grad(true);

  Rng order_rng(derive_seed(config.seed, 1));
  Rng place_rng(derive_seed(config.seed, 2));
  CsvWriter trace({"step", "objective"});

  for (int step = 0; step < config.iterations; ++step) {
    int idx = static_cast<int>(order_rng.uniform_int(static_cast<std::uint64_t>(dataset.count)));
    Tape tape;
    TapeScope scope(tape);
    px.zero_grad();
    Tensor total;
    for (int k = 0; k < config.locations_per_step; ++k) {
      double rot = config.rotation_range_deg == 0.0
                       ? 0.0
                       : place_rng.uniform(-config.rotation_range_deg, config.rotation_range_deg);
      double scale = config.scale_range == 0.0
                         ? 1.0
                         : place_rng.uniform(1.0 - config.scale_range, 1.0 + config.scale_range);
      int side_h = footprint_side(result.patch.height, scale);
      int side_w = footprint_side(result.patch.width, scale);
      if (side_h > image_h || side_w > image_w)
        throw ConfigError("patch attack: footprint " + std::to_string(side_w) + "x" +
                          std::to_string(side_h) + " exceeds the image " +
                          std::to_string(image_w) + "x" + std::to_string(image_h));
      double ly = static_cast<double>(
          place_rng.uniform_int(static_cast<std::uint64_t>(image_h - side_h + 1)));
      double lx = static_cast<double>(
          place_rng.uniform_int(static_cast<std::uint64_t>(image_w - side_w + 1)));
      Tensor a = paste_patch_tensor(frames_t[idx], px, result.patch.mask, result.patch.height,
                                    result.patch.width, lx, ly, rot, scale);
      Tensor b = paste_patch_tensor(frames_t1[idx], px, result.patch.mask, result.patch.height,
                                    result.patch.width, lx, ly, rot, scale);
      ForwardResult out = model.forward_normalized(normalize_tensor(a, model.normalization),
                                                   normalize_tensor(b, model.normalization));
      Tensor obj = cosine_objective(clean[idx], out.full_res);
      total = total.defined() ? ops::add(total, obj) : obj;
    }
    total = ops::scale(total, 1.0 / static_cast<double>(config.locations_per_step));
    double value = total.values()[0];
    result.objective_trace.push_back(value);
    trace.add_row({std::to_string(step), format_double(value)});
    tape.backward(total);

    const auto& grad = px.grad();
    auto& vals = px.values();
    std::size_t plane =
        static_cast<std::size_t>(result.patch.height) * result.patch.width;
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        if (!result.patch.mask[i]) continue;
        double v = vals[c * plane + i] - config.learning_rate * grad[c * plane + i];
        vals[c * plane + i] = std::clamp(v, 0.0, 1.0);
      }
  }
  px.set_requires_grad(false);
  result.trace_csv = trace.str();
  return result;
}

AdversarialPatch make_striped_patch(const StripeConfig& config) {
  if (config.size < 1) throw ConfigError("stripes: size must be positive");
  if (config.stripe_width < 1) throw ConfigError("stripes: stripe_width must be >= 1");
  if (config.contrast < 0.0 || config.contrast > 1.0)
    throw ConfigError("stripes: contrast must lie in [0,1]");
  for (double v : config.color_a)
    if (v < 0.0 || v > 1.0) throw ConfigError("stripes: colors must lie in [0,1]");
  for (double v : config.color_b)
    if (v < 0.0 || v > 1.0) throw ConfigError("stripes: colors must lie in [0,1]");

  AdversarialPatch p;
  p.height = config.size;
  p.width = config.size;
  p.pixels = Tensor::zeros({1, 3, config.size, config.size});
  p.mask = disk_mask(config.size, config.size);

  double theta = config.orientation_deg * kPi / 180.0;
  double cos_t = std::cos(theta), sin_t = std::sin(theta);
  // keep quarter-turn orientations exact despite rounded pi
  if (std::abs(cos_t) < 1e-12) cos_t = 0.0;
  if (std::abs(sin_t) < 1e-12) sin_t = 0.0;
  double cy = (config.size - 1) / 2.0, cx = (config.size - 1) / 2.0;
  std::size_t plane = static_cast<std::size_t>(config.size) * config.size;
  for (int y = 0; y < config.size; ++y)
    for (int x = 0; x < config.size; ++x) {
      // Band coordinate: equals the column index at orientation 0.
      double coord = cos_t * (x - cx) + sin_t * (y - cy) + cx;
      long band = static_cast<long>(std::floor(coord / config.stripe_width));
      bool use_b = ((band % 2) + 2) % 2 == 1;
      const auto& color = use_b ? config.color_b : config.color_a;
      for (int c = 0; c < 3; ++c) {
        double v = 0.5 + config.contrast * (color[static_cast<std::size_t>(c)] - 0.5);
        p.pixels.values()[c * plane + static_cast<std::size_t>(y) * config.size + x] = v;
      }
    }
  return p;
}

FgsmResult fgsm_attack(const Model& model, const ImagePair& pair, const FgsmConfig& config) {
  if (config.epsilon < 0.0) throw ConfigError("fgsm: epsilon must be non-negative");
  if (config.alpha < 0.0) throw ConfigError("fgsm: alpha must be non-negative");
  if (config.beta < 0.0 || config.beta >= 1.0)
    throw ConfigError("fgsm: beta must lie in [0,1)");
  if (config.iterations < 0) throw ConfigError("fgsm: iterations must be >= 0");

  ParamGradOff guard(model);
  FlowField clean = ops::tensor_to_flow(model.forward(pair).full_res);

  Tensor x1 = image_to_tensor(pair.frame_t);
  Tensor x2 = image_to_tensor(pair.frame_t1);
  std::vector<double> orig1 = x1.values(), orig2 = x2.values();
  std::vector<double> m1(x1.numel(), 0.0), m2(x2.numel(), 0.0);
  x1.set_requires_grad(true);
  x2.set_requires_grad(true);

  auto step_frame = [&](Tensor& x, const std::vector<double>& orig, std::vector<double>& m) {
    const auto& g = x.grad();
    auto& v = x.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      m[i] = config.beta * m[i] + g[i];
      double sgn = m[i] > 0.0 ? 1.0 : (m[i] < 0.0 ? -1.0 : 0.0);
      double nv = v[i] - config.alpha * sgn;
      double delta = std::clamp(nv - orig[i], -config.epsilon, config.epsilon);
      v[i] = std::clamp(orig[i] + delta, 0.0, 1.0);
    }
  };

  for (int it = 0; it < config.iterations; ++it) {
    x1.zero_grad();
    x2.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    ForwardResult out =
        model.forward_normalized(normalize_tensor(x1, model.normalization),
                                 normalize_tensor(x2, model.normalization));
    Tensor obj = cosine_objective(clean, out.full_res);
    tape.backward(obj);
    step_frame(x1, orig1, m1);
    step_frame(x2, orig2, m2);
  }
  x1.set_requires_grad(false);
  x2.set_requires_grad(false);

  FgsmResult result;
  result.perturbed.frame_t = tensor_to_image(x1);
  result.perturbed.frame_t1 = tensor_to_image(x2);
  result.delta_t = Tensor::zeros(x1.shape());
  result.delta_t1 = Tensor::zeros(x2.shape());
  for (std::size_t i = 0; i < x1.numel(); ++i)
    result.delta_t.values()[i] = x1.values()[i] - orig1[i];
  for (std::size_t i = 0; i < x2.numel(); ++i)
    result.delta_t1.values()[i] = x2.values()[i] - orig2[i];
  return result;
}

ReplacementReport feature_replacement_experiment(const Model& model,
                                                 const DatasetManifest& dataset,
                                                 const AdversarialPatch& patch,
                                                 std::uint64_t noise_seed) {
  check_patch(patch);
  if (dataset.count < 1) throw ConfigError("replacement: dataset manifest is empty");

  Rng rng(noise_seed);
  ReplacementReport report;
  for (int i = 0; i < dataset.count; ++i) {
    SceneSample s = manifest_sample(dataset, i);
    int h = s.pair.frame_t.height, w = s.pair.frame_t.width;
    if (patch.height > h || patch.width > w)
      throw ConfigError("replacement: patch does not fit the image");
    PatchPlacement placement;
    placement.y = static_cast<double>(
        rng.uniform_int(static_cast<std::uint64_t>(h - patch.height + 1)));
    placement.x = static_cast<double>(
        rng.uniform_int(static_cast<std::uint64_t>(w - patch.width + 1)));

    AdversarialPatch noise = make_random_patch(patch.height, derive_seed(noise_seed, 7000 + i));

    auto normalized_pair = [&](const AdversarialPatch& p) {
      ImagePair pasted = paste_patch(s.pair, p, placement);
      return std::pair<Tensor, Tensor>(
          normalize_tensor(image_to_tensor(pasted.frame_t), model.normalization),
          normalize_tensor(image_to_tensor(pasted.frame_t1), model.normalization));
    };
    auto [na, nb] = normalized_pair(noise);
    TapBank bank_conv3 =
        model.forward_with_tap(na, nb, TapPoint::conv3, TapMode::record, nullptr).recorded;
    TapBank bank_redir =
        model.forward_with_tap(na, nb, TapPoint::conv_redir, TapMode::record, nullptr).recorded;
    TapBank bank_corr =
        model.forward_with_tap(na, nb, TapPoint::corr, TapMode::record, nullptr).recorded;

    FlowField gt = s.flow;
    std::vector<bool> fp = patch_footprint(h, w, patch, placement);
    for (std::size_t j = 0; j < fp.size(); ++j)
      if (fp[j]) {
        gt.u[j] = 0.0;
        gt.v[j] = 0.0;
      }

    auto [aa, ab] = normalized_pair(patch);
    report.epe_none += mean_epe_value(model.forward_normalized(aa, ab).full_res, gt);
    report.epe_conv3 += mean_epe_value(
        model.forward_with_tap(aa, ab, TapPoint::conv3, TapMode::replace, &bank_conv3)
            .full_res,
        gt);
    report.epe_conv_redir += mean_epe_value(
        model.forward_with_tap(aa, ab, TapPoint::conv_redir, TapMode::replace, &bank_redir)
            .full_res,
        gt);
    report.epe_corr += mean_epe_value(
        model.forward_with_tap(aa, ab, TapPoint::corr, TapMode::replace, &bank_corr).full_res,
        gt);
  }
  double n = static_cast<double>(dataset.count);
  report.epe_none /= n;
  report.epe_conv3 /= n;
  report.epe_conv_redir /= n;
  report.epe_corr /= n;
  return report;
}

void save_patch(const std::filesystem::path& png_path, const AdversarialPatch& patch,
                const nlohmann::json& generator, std::uint64_t seed) {
  check_patch(patch);
  write_image(png_path, tensor_to_image(patch.pixels));
  nlohmann::json sidecar;
  sidecar["height"] = patch.height;
  sidecar["width"] = patch.width;
  sidecar["mask_radius"] = patch.mask_radius();
  sidecar["seed"] = seed;
  sidecar["generator"] = generator;
  std::filesystem::path jp = png_path;
  jp.replace_extension(".json");
  write_text_file(jp, sidecar.dump(2) + "\n");
}

AdversarialPatch load_patch(const std::filesystem::path& png_path) {
  Image img = read_image(png_path);
  AdversarialPatch p;
  p.height = img.height;
  p.width = img.width;
  p.pixels = image_to_tensor(img);
  p.mask = disk_mask(p.height, p.width);
  std::filesystem::path jp = png_path;
  jp.replace_extension(".json");
  if (std::filesystem::exists(jp)) {
    nlohmann::json sidecar;
    try {
      sidecar = nlohmann::json::parse(read_text_file(jp));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("patch sidecar " + jp.string() + ": " + e.what());
    }
    if (json_get<int>(sidecar, "height", p.height) != p.height ||
        json_get<int>(sidecar, "width", p.width) != p.width)
      throw IoError("patch sidecar " + jp.string() + ": extents do not match the PNG");
  }
  return p;
}

}  // namespace patchflow
