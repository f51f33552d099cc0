#include "patchflow/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <thread>

#include "patchflow/normalization.hpp"
#include "patchflow/ops.hpp"
#include "patchflow/rng.hpp"
#include "patchflow/util.hpp"

namespace patchflow {

namespace {

struct PreparedSample {
  ImagePair pair;
  FlowField gt;
  double epe_clean = 0.0;
};

std::vector<PreparedSample> prepare_samples(const Model& model, const DatasetManifest& dataset) {
  if (dataset.count < 1) throw ConfigError("eval: dataset manifest is empty");
  std::vector<PreparedSample> out;
  out.reserve(static_cast<std::size_t>(dataset.count));
  for (int i = 0; i < dataset.count; ++i) {
    SceneSample s = manifest_sample(dataset, i);
    PreparedSample p;
    p.epe_clean = epe(ops::tensor_to_flow(model.forward(s.pair).full_res), s.flow);
    p.pair = std::move(s.pair);
    p.gt = std::move(s.flow);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<int> lattice(int image_extent, int side, int stride) {
  std::vector<int> out;
  for (int v = 0; v + side <= image_extent; v += stride) out.push_back(v);
  return out;
}

// Fills report best/median/worst from the dataset-mean grid; cells that are
// NaN (every sample skipped) are excluded. Ties resolve to lattice order.
void summarize(const HeatMap& map, EvalReport& report) {
  struct Cell {
    int x, y;
    double v;
  };
  std::vector<Cell> cells;
  for (std::size_t iy = 0; iy < map.ys.size(); ++iy)
    for (std::size_t ix = 0; ix < map.xs.size(); ++ix) {
      double v = map.values[iy * map.xs.size() + ix];
      if (std::isnan(v)) continue;
      cells.push_back({map.xs[ix], map.ys[iy], v});
    }
  if (cells.empty()) throw ConfigError("eval: no in-bounds placements survived");
  std::vector<std::size_t> order(cells.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return cells[a].v < cells[b].v; });
  auto to_score = [&](std::size_t i) {
    return LocationScore{cells[i].x, cells[i].y, cells[i].v};
  };
  report.best = to_score(order.front());
  report.median = to_score(order[(order.size() - 1) / 2]);  // lower median
  report.worst = to_score(order.back());
}

// Runs fn(cell) for every cell index, optionally across threads; each cell
// writes only its own slots so the reduction is deterministic.
void for_each_cell(std::size_t cell_count, int jobs, const std::function<void(std::size_t)>& fn) {
  int workers = std::max(1, jobs);
  if (workers == 1 || cell_count <= 1) {
    for (std::size_t c = 0; c < cell_count; ++c) fn(c);
    return;
  }
  workers = std::min<int>(workers, static_cast<int>(cell_count));
  std::vector<std::thread> threads;
  for (int t = 0; t < workers; ++t)
    threads.emplace_back([&, t]() {
      for (std::size_t c = static_cast<std::size_t>(t); c < cell_count;
           c += static_cast<std::size_t>(workers))
        fn(c);
    });
  for (auto& th : threads) th.join();
}

double attacked_epe_for(const Model& model, const PreparedSample& sample,
                        const AdversarialPatch& patch, const PatchPlacement& placement,
                        const std::pair<double, double>* footprint_flow) {
  ImagePair pasted = paste_patch(sample.pair, patch, placement);
  FlowField pred = ops::tensor_to_flow(model.forward(pasted).full_res);
  FlowField gt = sample.gt;
  auto fp = patch_footprint(gt.height, gt.width, patch, placement);
  double fu = footprint_flow ? footprint_flow->first : 0.0;
  double fv = footprint_flow ? footprint_flow->second : 0.0;
  for (std::size_t i = 0; i < fp.size(); ++i)
    if (fp[i]) {
      gt.u[i] = fu;
      gt.v[i] = fv;
    }
  return epe(pred, gt);
}

nlohmann::json score_json(const LocationScore& s) {
  return nlohmann::json{{"x", s.x}, {"y", s.y}, {"epe", s.epe}};
}

// piecewise-linear blue -> yellow -> red
std::array<double, 3> heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  std::array<double, 3> lo = {0.15, 0.25, 0.75};
  std::array<double, 3> mid = {0.95, 0.9, 0.25};
  std::array<double, 3> hi = {0.85, 0.1, 0.1};
  std::array<double, 3> out{};
  for (int c = 0; c < 3; ++c)
    out[static_cast<std::size_t>(c)] =
        t < 0.5 ? lo[static_cast<std::size_t>(c)] +
                      2 * t * (mid[static_cast<std::size_t>(c)] - lo[static_cast<std::size_t>(c)])
                : mid[static_cast<std::size_t>(c)] +
                      (2 * t - 1) *
                          (hi[static_cast<std::size_t>(c)] - mid[static_cast<std::size_t>(c)]);
  return out;
}

double gaussian_kernel(const std::vector<double>& a, const std::vector<double>& b,
                       double inv_two_sigma2) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    d2 += d * d;
  }
  return std::exp(-d2 * inv_two_sigma2);
}

void check_mmd_inputs(const std::vector<std::vector<double>>& a,
                      const std::vector<std::vector<double>>& b, double bandwidth) {
  if (a.size() < 2 || b.size() < 2) throw ConfigError("mmd: need at least 2 samples per set");
  if (a.size() != b.size())
    throw ConfigError("mmd: the paired estimator needs equal sample counts, got " +
                      std::to_string(a.size()) + " and " + std::to_string(b.size()));
  if (!(bandwidth > 0.0)) throw ConfigError("mmd: bandwidth must be positive");
  std::size_t dim = a[0].size();
  for (const auto& v : a)
    if (v.size() != dim) throw ShapeError("mmd: inconsistent vector dimensionality");
  for (const auto& v : b)
    if (v.size() != dim) throw ShapeError("mmd: inconsistent vector dimensionality");
}

std::vector<double> spatial_mean_features(const Tensor& t) {
  int channels = t.dim(1);
  std::size_t plane = static_cast<std::size_t>(t.dim(2)) * static_cast<std::size_t>(t.dim(3));
  std::vector<double> out(static_cast<std::size_t>(channels), 0.0);
  const auto& v = t.values();
  for (int c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) sum += v[static_cast<std::size_t>(c) * plane + i];
    out[static_cast<std::size_t>(c)] = sum / static_cast<double>(plane);
  }
  return out;
}

}  // namespace

double epe(const FlowField& pred, const FlowField& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw ShapeError("epe: flow extents differ (" + std::to_string(pred.width) + "x" +
                     std::to_string(pred.height) + " vs " + std::to_string(gt.width) + "x" +
                     std::to_string(gt.height) + ")");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < gt.u.size(); ++i) {
    if (!gt.valid[i]) continue;
    double du = pred.u[i] - gt.u[i];
    double dv = pred.v[i] - gt.v[i];
    sum += std::sqrt(du * du + dv * dv);
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

double epe_attacked(const FlowField& pred, const FlowField& gt, const AdversarialPatch& patch,
                    const PatchPlacement& placement) {
  FlowField zeroed = gt;
  auto fp = patch_footprint(gt.height, gt.width, patch, placement);
  for (std::size_t i = 0; i < fp.size(); ++i)
    if (fp[i]) {
      zeroed.u[i] = 0.0;
      zeroed.v[i] = 0.0;
    }
  return epe(pred, zeroed);
}

std::string HeatMap::to_csv() const {
  CsvWriter csv({"x", "y", "epe"});
  for (std::size_t iy = 0; iy < ys.size(); ++iy)
    for (std::size_t ix = 0; ix < xs.size(); ++ix)
      csv.add_row({std::to_string(xs[ix]), std::to_string(ys[iy]),
                   format_double(values[iy * xs.size() + ix])});
  return csv.str();
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["epe_unattacked"] = epe_unattacked;
  j["best"] = score_json(best);
  j["median"] = score_json(median);
  j["worst"] = score_json(worst);
  j["per_sample_unattacked"] = per_sample_unattacked;
  j["skipped_placements"] = skipped_placements;
  if (!config_echo.is_null()) j["config"] = config_echo;
  return j;
}

HeatmapEval location_heatmap(const Model& model, const DatasetManifest& dataset,
                             const AdversarialPatch& patch, int stride, int jobs) {
  if (stride < 1) throw ConfigError("heatmap: stride must be >= 1");
  auto samples = prepare_samples(model, dataset);
  int h = samples[0].gt.height, w = samples[0].gt.width;
  if (patch.height > h || patch.width > w)
    throw ConfigError("heatmap: patch " + std::to_string(patch.width) + "x" +
                      std::to_string(patch.height) + " larger than the image " +
                      std::to_string(w) + "x" + std::to_string(h));

  HeatmapEval out;
  out.map.stride = stride;
  out.map.patch_h = patch.height;
  out.map.patch_w = patch.width;
  out.map.xs = lattice(w, patch.width, stride);
  out.map.ys = lattice(h, patch.height, stride);
  std::size_t cells = out.map.xs.size() * out.map.ys.size();
  out.map.values.assign(cells, 0.0);
  out.map.per_image.assign(samples.size(), std::vector<double>(cells, 0.0));

  for_each_cell(cells, jobs, [&](std::size_t c) {
    PatchPlacement pl;
    pl.x = out.map.xs[c % out.map.xs.size()];
    pl.y = out.map.ys[c / out.map.xs.size()];
    double sum = 0.0;
    for (std::size_t s = 0; s < samples.size(); ++s) {
      double v = attacked_epe_for(model, samples[s], patch, pl, nullptr);
      out.map.per_image[s][c] = v;
      sum += v;
    }
    out.map.values[c] = sum / static_cast<double>(samples.size());
  });

  double clean = 0.0;
  for (const auto& s : samples) {
    out.report.per_sample_unattacked.push_back(s.epe_clean);
    clean += s.epe_clean;
  }
  out.report.epe_unattacked = clean / static_cast<double>(samples.size());
  summarize(out.map, out.report);
  return out;
}

HeatmapEval moving_patch_eval(const Model& model, const DatasetManifest& dataset,
                              const AdversarialPatch& patch, const MovingPatchConfig& config) {
  if (config.stride < 1) throw ConfigError("moving patch: stride must be >= 1");
  if (config.max_retries < 0) throw ConfigError("moving patch: max_retries must be >= 0");
  if (config.motion.translation < 0.0 || config.motion.rotation_deg < 0.0 ||
      config.motion.scale < 0.0 || config.motion.scale >= 1.0)
    throw ConfigError("moving patch: invalid motion ranges");
  auto samples = prepare_samples(model, dataset);
  int h = samples[0].gt.height, w = samples[0].gt.width;
  if (patch.height > h || patch.width > w)
    throw ConfigError("moving patch: patch larger than the image");

  HeatmapEval out;
  out.map.stride = config.stride;
  out.map.patch_h = patch.height;
  out.map.patch_w = patch.width;
  out.map.xs = lattice(w, patch.width, config.stride);
  out.map.ys = lattice(h, patch.height, config.stride);
  std::size_t cells = out.map.xs.size() * out.map.ys.size();
  out.map.values.assign(cells, 0.0);
  out.map.per_image.assign(samples.size(), std::vector<double>(cells, 0.0));
  std::vector<int> skipped_per_cell(cells, 0);

  for_each_cell(cells, config.jobs, [&](std::size_t c) {
    PatchPlacement base;
    base.x = out.map.xs[c % out.map.xs.size()];
    base.y = out.map.ys[c / out.map.xs.size()];
    double sum = 0.0;
    int used = 0;
    for (std::size_t s = 0; s < samples.size(); ++s) {
      Rng rng(derive_seed(config.seed, c * samples.size() + s));
      bool placed = false;
      for (int attempt = 0; attempt <= config.max_retries && !placed; ++attempt) {
        SecondFrameDelta d;
        d.dx = rng.uniform(-config.motion.translation, config.motion.translation);
        d.dy = rng.uniform(-config.motion.translation, config.motion.translation);
        d.rotation_deg = rng.uniform(-config.motion.rotation_deg, config.motion.rotation_deg);
        d.scale = rng.uniform(1.0 - config.motion.scale, 1.0 + config.motion.scale);
        // bounds of the second-frame footprint, translated about the center
        int side2_h = footprint_side(patch.height, base.scale * d.scale);
        int side2_w = footprint_side(patch.width, base.scale * d.scale);
        int side1_h = footprint_side(patch.height, base.scale);
        int side1_w = footprint_side(patch.width, base.scale);
        double x2 = base.x + (side1_w - 1) / 2.0 + d.dx - (side2_w - 1) / 2.0;
        double y2 = base.y + (side1_h - 1) / 2.0 + d.dy - (side2_h - 1) / 2.0;
        if (x2 < -1e-9 || y2 < -1e-9 || x2 + side2_w > w + 1e-9 || y2 + side2_h > h + 1e-9)
          continue;
        PatchPlacement pl = base;
        pl.second_frame_delta = d;
        std::pair<double, double> motion{d.dx, d.dy};
        double v = attacked_epe_for(model, samples[s], patch, pl, &motion);
        out.map.per_image[s][c] = v;
        sum += v;
        ++used;
        placed = true;
      }
      if (!placed) {
        out.map.per_image[s][c] = std::nan("");
        ++skipped_per_cell[c];
      }
    }
    out.map.values[c] = used == 0 ? std::nan("") : sum / static_cast<double>(used);
  });

  for (std::size_t c = 0; c < cells; ++c) {
    if (skipped_per_cell[c] > 0)
      std::cerr << "moving patch: skipped " << skipped_per_cell[c]
                << " placement(s) at cell x=" << out.map.xs[c % out.map.xs.size()]
                << " y=" << out.map.ys[c / out.map.xs.size()] << " after "
                << config.max_retries << " retries\n";
    out.report.skipped_placements += skipped_per_cell[c];
  }

  double clean = 0.0;
  for (const auto& s : samples) {
    out.report.per_sample_unattacked.push_back(s.epe_clean);
    clean += s.epe_clean;
  }
  out.report.epe_unattacked = clean / static_cast<double>(samples.size());
  summarize(out.map, out.report);
  return out;
}

// Paired U-statistic: the diagonal is excluded from the cross term as well,
// so two identical collections give exactly zero.
double mmd(const std::vector<std::vector<double>>& set_a,
           const std::vector<std::vector<double>>& set_b, double bandwidth) {
  check_mmd_inputs(set_a, set_b, bandwidth);
  double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  std::size_t m = set_a.size();
  double sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      sa += gaussian_kernel(set_a[i], set_a[j], inv);
      sb += gaussian_kernel(set_b[i], set_b[j], inv);
    }
  double sc_all = 0.0, sc_diag = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) sc_all += gaussian_kernel(set_a[i], set_b[j], inv);
    sc_diag += gaussian_kernel(set_a[i], set_b[i], inv);
  }
  return (2.0 * sa + 2.0 * sb - 2.0 * (sc_all - sc_diag)) /
         (static_cast<double>(m) * static_cast<double>(m - 1));
}

double mmd_reference(const std::vector<std::vector<double>>& set_a,
                     const std::vector<std::vector<double>>& set_b, double bandwidth) {
  check_mmd_inputs(set_a, set_b, bandwidth);
  double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  std::size_t m = set_a.size();
  double sum = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      sum += gaussian_kernel(set_a[i], set_a[j], inv) +
             gaussian_kernel(set_b[i], set_b[j], inv) -
             gaussian_kernel(set_a[i], set_b[j], inv) -
             gaussian_kernel(set_a[j], set_b[i], inv);
    }
  return sum / (static_cast<double>(m) * static_cast<double>(m - 1));
}

double median_bandwidth(const std::vector<std::vector<double>>& set_a,
                        const std::vector<std::vector<double>>& set_b) {
  std::vector<std::vector<double>> pooled = set_a;
  pooled.insert(pooled.end(), set_b.begin(), set_b.end());
  if (pooled.size() < 2) throw ConfigError("mmd: need at least 2 pooled samples");
  std::vector<double> dists;
  for (std::size_t i = 0; i < pooled.size(); ++i)
    for (std::size_t j = i + 1; j < pooled.size(); ++j) {
      if (pooled[i].size() != pooled[j].size())
        throw ShapeError("mmd: inconsistent vector dimensionality");
      double d2 = 0.0;
      for (std::size_t k = 0; k < pooled[i].size(); ++k) {
        double d = pooled[i][k] - pooled[j][k];
        d2 += d * d;
      }
      dists.push_back(std::sqrt(d2));
    }
  std::sort(dists.begin(), dists.end());
  double med = dists[(dists.size() - 1) / 2];
  if (med > 0.0) return med;
  for (double d : dists)
    if (d > 0.0) return d;
  return 1.0;
}

std::string FeatureSampleSet::to_csv() const {
  std::size_t dim = unattacked.empty() ? (attacked.empty() ? 0 : attacked[0].size())
                                       : unattacked[0].size();
  std::vector<std::string> header{"set"};
  for (std::size_t i = 0; i < dim; ++i) header.push_back("f" + std::to_string(i));
  CsvWriter csv(header);
  auto add = [&](const char* label, const std::vector<std::vector<double>>& rows) {
    for (const auto& r : rows) {
      std::vector<std::string> cells{label};
      for (double v : r) cells.push_back(format_double(v));
      csv.add_row(cells);
    }
  };
  add("unattacked", unattacked);
  add("attacked", attacked);
  return csv.str();
}

nlohmann::json SeparabilityReport::to_json() const {
  nlohmann::json j;
  j["mmd_before_corr"] = mmd_before;
  j["mmd_after_corr"] = mmd_after;
  j["bandwidth_before_corr"] = bandwidth_before;
  j["bandwidth_after_corr"] = bandwidth_after;
  j["samples"] = before_corr.unattacked.size();
  return j;
}

SeparabilityReport feature_separability(const Model& model, const DatasetManifest& dataset,
                                        const AdversarialPatch& patch,
                                        std::uint64_t placement_seed) {
  if (dataset.count < 2) throw ConfigError("separability: need at least 2 samples");
  Rng rng(placement_seed);
  SeparabilityReport report;
  for (int i = 0; i < dataset.count; ++i) {
    SceneSample s = manifest_sample(dataset, i);
    int h = s.pair.frame_t.height, w = s.pair.frame_t.width;
    if (patch.height > h || patch.width > w)
      throw ConfigError("separability: patch does not fit the image");
    PatchPlacement pl;
    pl.y = static_cast<double>(
        rng.uniform_int(static_cast<std::uint64_t>(h - patch.height + 1)));
    pl.x = static_cast<double>(
        rng.uniform_int(static_cast<std::uint64_t>(w - patch.width + 1)));

    auto collect = [&](const ImagePair& pair, FeatureSampleSet& before,
                       FeatureSampleSet& after, bool attacked) {
      Tensor a = normalize_tensor(image_to_tensor(pair.frame_t), model.normalization);
      Tensor b = normalize_tensor(image_to_tensor(pair.frame_t1), model.normalization);
      TapBank conv3 =
          model.forward_with_tap(a, b, TapPoint::conv3, TapMode::record, nullptr).recorded;
      TapBank corr =
          model.forward_with_tap(a, b, TapPoint::corr, TapMode::record, nullptr).recorded;
      auto& before_rows = attacked ? before.attacked : before.unattacked;
      auto& after_rows = attacked ? after.attacked : after.unattacked;
      before_rows.push_back(spatial_mean_features(conv3.features[0]));
      after_rows.push_back(spatial_mean_features(corr.features[0]));
    };
    collect(s.pair, report.before_corr, report.after_corr, false);
    collect(paste_patch(s.pair, patch, pl), report.before_corr, report.after_corr, true);
  }
  report.bandwidth_before =
      median_bandwidth(report.before_corr.unattacked, report.before_corr.attacked);
  report.bandwidth_after =
      median_bandwidth(report.after_corr.unattacked, report.after_corr.attacked);
  report.mmd_before =
      mmd(report.before_corr.unattacked, report.before_corr.attacked, report.bandwidth_before);
  report.mmd_after =
      mmd(report.after_corr.unattacked, report.after_corr.attacked, report.bandwidth_after);
  return report;
}

Image render_heatmap(const HeatMap& map, int cell_px) {
  if (cell_px < 1) throw ConfigError("heatmap render: cell_px must be >= 1");
  if (map.xs.empty() || map.ys.empty()) throw ConfigError("heatmap render: empty grid");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : map.values) {
    if (std::isnan(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  double span = hi - lo;
  int out_h = static_cast<int>(map.ys.size()) * cell_px;
  int out_w = static_cast<int>(map.xs.size()) * cell_px;
  Image im = Image::zeros(out_h, out_w);
  auto grid_at = [&](int iy, int ix) {
    double v = map.at(iy, ix);
    return std::isnan(v) ? lo : v;
  };
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      // bilinear between cell centers
      double gy = (y + 0.5) / cell_px - 0.5;
      double gx = (x + 0.5) / cell_px - 0.5;
      int y0 = std::clamp(static_cast<int>(std::floor(gy)), 0,
                          static_cast<int>(map.ys.size()) - 1);
      int x0 = std::clamp(static_cast<int>(std::floor(gx)), 0,
                          static_cast<int>(map.xs.size()) - 1);
      int y1 = std::min(y0 + 1, static_cast<int>(map.ys.size()) - 1);
      int x1 = std::min(x0 + 1, static_cast<int>(map.xs.size()) - 1);
      double fy = std::clamp(gy - y0, 0.0, 1.0);
      double fx = std::clamp(gx - x0, 0.0, 1.0);
      double v = (1 - fy) * ((1 - fx) * grid_at(y0, x0) + fx * grid_at(y0, x1)) +
                 fy * ((1 - fx) * grid_at(y1, x0) + fx * grid_at(y1, x1));
      double t = span > 0.0 ? (v - lo) / span : 0.5;
      auto rgb = heat_color(t);
      for (int c = 0; c < 3; ++c) im.at(c, y, x) = rgb[static_cast<std::size_t>(c)];
    }
  return im;
}

}  // namespace patchflow
