// Command line for the optical-flow attack lab: train miniature flow
// networks on synthetic scenes, craft patch / stripe / global perturbation
// attacks against them, and run the causal evaluations (location heatmaps,
// feature replacement, feature-distribution MMD).
//
// Every data subcommand reads one JSON config (--config), applies repeatable
// --set dotted.path=value overrides (flags win), rejects unknown keys, and
// writes a resolved copy of the config next to its outputs. A top-level JSON
// array is a sweep: elements run into sweep_NNN/ subdirectories and a
// combined sweep.csv collects the per-run summaries.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "patchflow/attacks.hpp"
#include "patchflow/dataset.hpp"
#include "patchflow/evaluation.hpp"
#include "patchflow/flow_color.hpp"
#include "patchflow/flow_io.hpp"
#include "patchflow/image_io.hpp"
#include "patchflow/json_util.hpp"
#include "patchflow/models.hpp"
#include "patchflow/ops.hpp"
#include "patchflow/training.hpp"
#include "patchflow/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace patchflow;

namespace {

// Ordered key/value pairs summarizing one run; shared columns across a sweep.
using Summary = std::vector<std::pair<std::string, std::string>>;

json load_config_file(const fs::path& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

// Applies one "dotted.path=value" override. The value is parsed as JSON when
// possible, so numbers, booleans, arrays and objects work; anything that
// fails to parse is taken as a bare string.
void apply_override(json& cfg, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "': expected dotted.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    if (!node->is_object() && !node->is_null())
      throw ConfigError("override '" + assignment + "': path crosses a non-object value");
    auto dot = path.find('.', start);
    const std::string key =
        path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "': empty key segment");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &((*node)[key]);
    start = dot + 1;
  }
}

std::string require_string(const json& cfg, const std::string& key, const std::string& context) {
  if (!cfg.contains(key)) throw ConfigError(context + ": missing '" + key + "'");
  try {
    return cfg.at(key).get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(context + ": bad value for '" + key + "': " + e.what());
  }
}

// Dataset block: either an inline {scene, count, root_seed} object or a
// string path to a manifest JSON file.
DatasetManifest dataset_from_config(const json& cfg, const std::string& context) {
  if (!cfg.contains("dataset")) throw ConfigError(context + ": missing 'dataset'");
  const json& obj = cfg.at("dataset");
  if (obj.is_string()) return read_manifest(obj.get<std::string>());
  check_keys(obj, {"scene", "count", "root_seed"}, context + " dataset");
  DatasetManifest m;
  if (obj.contains("scene")) m.base = scene_config_from_json(obj.at("scene"));
  m.count = json_get(obj, "count", m.count);
  m.root_seed = json_get<std::uint64_t>(obj, "root_seed", m.root_seed);
  if (m.count <= 0) throw ConfigError(context + ": dataset count must be positive");
  return m;
}

Model model_from_config(const json& cfg, const std::string& context) {
  return load_checkpoint(require_string(cfg, "checkpoint", context));
}

AdversarialPatch patch_from_config(const json& cfg, const std::string& context) {
  return load_patch(require_string(cfg, "patch", context));
}

TrainConfig train_config_from_json(const json& obj) {
  check_keys(obj,
             {"iterations", "batch_size", "peak_lr", "weight_decay", "clip_norm", "loss_weights",
              "seed", "precision", "normalization_id", "hflip_probability"},
             "train settings");
  TrainConfig c;
  c.iterations = json_get(obj, "iterations", c.iterations);
  c.batch_size = json_get(obj, "batch_size", c.batch_size);
  c.peak_lr = json_get(obj, "peak_lr", c.peak_lr);
  c.weight_decay = json_get(obj, "weight_decay", c.weight_decay);
  c.clip_norm = json_get(obj, "clip_norm", c.clip_norm);
  c.loss_weights = json_get(obj, "loss_weights", c.loss_weights);
  c.seed = json_get<std::uint64_t>(obj, "seed", c.seed);
  if (obj.contains("precision")) {
    const std::string p = obj.at("precision").get<std::string>();
    if (p == "f64")
      c.precision = Precision::f64;
    else if (p == "f32")
      c.precision = Precision::f32;
    else
      throw ConfigError("train settings: precision must be 'f64' or 'f32'");
  }
  c.normalization_id = json_get(obj, "normalization_id", c.normalization_id);
  c.hflip_probability = json_get(obj, "hflip_probability", c.hflip_probability);
  return c;
}

PatchAttackConfig patch_attack_from_json(const json& obj) {
  check_keys(obj,
             {"patch_size", "iterations", "learning_rate", "rotation_range_deg", "scale_range",
              "locations_per_step", "seed"},
             "attack settings");
  PatchAttackConfig c;
  c.patch_size = json_get(obj, "patch_size", c.patch_size);
  c.iterations = json_get(obj, "iterations", c.iterations);
  c.learning_rate = json_get(obj, "learning_rate", c.learning_rate);
  c.rotation_range_deg = json_get(obj, "rotation_range_deg", c.rotation_range_deg);
  c.scale_range = json_get(obj, "scale_range", c.scale_range);
  c.locations_per_step = json_get(obj, "locations_per_step", c.locations_per_step);
  c.seed = json_get<std::uint64_t>(obj, "seed", c.seed);
  return c;
}

StripeConfig stripe_config_from_json(const json& obj) {
  check_keys(obj, {"size", "stripe_width", "orientation_deg", "color_a", "color_b", "contrast"},
             "stripe settings");
  StripeConfig c;
  c.size = json_get(obj, "size", c.size);
  c.stripe_width = json_get(obj, "stripe_width", c.stripe_width);
  c.orientation_deg = json_get(obj, "orientation_deg", c.orientation_deg);
  c.color_a = json_get(obj, "color_a", c.color_a);
  c.color_b = json_get(obj, "color_b", c.color_b);
  c.contrast = json_get(obj, "contrast", c.contrast);
  return c;
}

double mean_epe_clean(const Model& model, const DatasetManifest& manifest) {
  double total = 0.0;
  for (int i = 0; i < manifest.count; ++i) {
    SceneSample s = manifest_sample(manifest, i);
    total += epe(ops::tensor_to_flow(model.forward(s.pair).full_res), s.flow);
  }
  return total / manifest.count;
}

// ---------------------------------------------------------------------------
// Subcommand runners. Each receives its resolved config (command/out_dir
// already injected) and the created output directory.

Summary run_train(const json& cfg, const fs::path& out) {
  check_keys(cfg, {"command", "out_dir", "model", "train", "dataset"}, "train config");
  if (!cfg.contains("model")) throw ConfigError("train config: missing 'model'");
  ModelSpec spec = model_spec_from_json(cfg.at("model"));
  DatasetManifest manifest = dataset_from_config(cfg, "train config");
  TrainConfig tc = train_config_from_json(cfg.value("train", json::object()));

  TrainResult r = train(spec, manifest, tc);
  save_checkpoint(out / "checkpoint.bin", r.model);
  write_text_file(out / "metrics.csv", r.metrics_csv);
  return {{"variant", variant_name(spec.variant)},
          {"parameters", std::to_string(r.model.parameter_count())},
          {"final_loss", format_double(r.last.loss)},
          {"final_epe", format_double(r.last.epe)}};
}

Summary run_attack_patch(const json& cfg, const fs::path& out) {
  check_keys(cfg, {"command", "out_dir", "checkpoint", "dataset", "attack"},
             "attack-patch config");
  Model model = model_from_config(cfg, "attack-patch config");
  DatasetManifest manifest = dataset_from_config(cfg, "attack-patch config");
  json attack_obj = cfg.value("attack", json::object());
  PatchAttackConfig ac = patch_attack_from_json(attack_obj);

  PatchAttackResult r = optimize_patch(model, manifest, ac);
  json generator = attack_obj;
  generator["kind"] = "optimized";
  save_patch(out / "patch.png", r.patch, generator, ac.seed);
  write_text_file(out / "trace.csv", r.trace_csv);
  const double first = r.objective_trace.empty() ? 0.0 : r.objective_trace.front();
  const double last = r.objective_trace.empty() ? 0.0 : r.objective_trace.back();
  return {{"patch_size", std::to_string(ac.patch_size)},
          {"iterations", std::to_string(ac.iterations)},
          {"objective_first", format_double(first)},
          {"objective_last", format_double(last)}};
}

Summary run_attack_stripes(const json& cfg, const fs::path& out) {
  check_keys(cfg, {"command", "out_dir", "stripes"}, "attack-stripes config");
  json stripes_obj = cfg.value("stripes", json::object());
  StripeConfig sc = stripe_config_from_json(stripes_obj);

  AdversarialPatch patch = make_striped_patch(sc);
  json generator = stripes_obj;
  generator["kind"] = "stripes";
  save_patch(out / "patch.png", patch, generator, 0);
  return {{"size", std::to_string(sc.size)},
          {"stripe_width", std::to_string(sc.stripe_width)},
          {"orientation_deg", format_double(sc.orientation_deg)},
          {"contrast", format_double(sc.contrast)}};
}

Summary run_attack_fgsm(const json& cfg, const fs::path& out) {
  check_keys(cfg, {"command", "out_dir", "checkpoint", "dataset", "fgsm", "render_examples"},
             "attack-fgsm config");
  Model model = model_from_config(cfg, "attack-fgsm config");
  DatasetManifest manifest = dataset_from_config(cfg, "attack-fgsm config");
  json fgsm_obj = cfg.value("fgsm", json::object());
  check_keys(fgsm_obj, {"epsilons", "alpha", "beta", "iterations"}, "fgsm settings");
  std::vector<double> epsilons =
      json_get(fgsm_obj, "epsilons", std::vector<double>{0.02, 0.01, 0.005, 0.002});
  if (epsilons.empty()) throw ConfigError("fgsm settings: epsilons must be non-empty");
  FgsmConfig base;
  base.alpha = json_get(fgsm_obj, "alpha", base.alpha);
  base.beta = json_get(fgsm_obj, "beta", base.beta);
  base.iterations = json_get(fgsm_obj, "iterations", base.iterations);
  const int render_examples = json_get(cfg, "render_examples", 1);

  CsvWriter csv({"epsilon", "epe"});
  Summary summary;
  const double clean = mean_epe_clean(model, manifest);
  csv.add_row({format_double(0.0), format_double(clean)});
  summary.emplace_back("epe_unattacked", format_double(clean));
  for (double eps : epsilons) {
    FgsmConfig fc = base;
    fc.epsilon = eps;
    double total = 0.0;
    for (int i = 0; i < manifest.count; ++i) {
      SceneSample s = manifest_sample(manifest, i);
      FgsmResult fr = fgsm_attack(model, s.pair, fc);
      total += epe(ops::tensor_to_flow(model.forward(fr.perturbed).full_res), s.flow);
    }
    const double attacked = total / manifest.count;
    csv.add_row({format_double(eps), format_double(attacked)});
    char short_eps[32];
    std::snprintf(short_eps, sizeof(short_eps), "%g", eps);
    summary.emplace_back(std::string("epe_eps_") + short_eps, format_double(attacked));
  }
  csv.save(out / "epe_by_epsilon.csv");

  // Side-by-side renders for the first (typically strongest) epsilon.
  FgsmConfig fc = base;
  fc.epsilon = epsilons.front();
  for (int i = 0; i < std::min(render_examples, manifest.count); ++i) {
    SceneSample s = manifest_sample(manifest, i);
    FgsmResult fr = fgsm_attack(model, s.pair, fc);
    FlowField clean_flow = ops::tensor_to_flow(model.forward(s.pair).full_res);
    FlowField attacked_flow = ops::tensor_to_flow(model.forward(fr.perturbed).full_res);
    double max_mag = 1e-9;
    for (const FlowField* f : {&clean_flow, &attacked_flow, &s.flow})
      for (std::size_t p = 0; p < f->u.size(); ++p)
        max_mag = std::max(max_mag, std::hypot(f->u[p], f->v[p]));
    const fs::path dir = out / ("example_" + std::to_string(i));
    fs::create_directories(dir);
    write_image(dir / "frame_t.png", s.pair.frame_t);
    write_image(dir / "frame_t_attacked.png", fr.perturbed.frame_t);
    write_image(dir / "flow_gt.png", flow_to_color(s.flow, max_mag));
    write_image(dir / "flow_clean.png", flow_to_color(clean_flow, max_mag));
    write_image(dir / "flow_attacked.png", flow_to_color(attacked_flow, max_mag));
  }
  return summary;
}

Summary run_eval_heatmap(const json& cfg, const fs::path& out, int jobs_flag) {
  check_keys(cfg,
             {"command", "out_dir", "checkpoint", "dataset", "patch", "stride", "jobs", "cell_px",
              "moving", "motion", "seed", "max_retries"},
             "eval-heatmap config");
  Model model = model_from_config(cfg, "eval-heatmap config");
  DatasetManifest manifest = dataset_from_config(cfg, "eval-heatmap config");
  AdversarialPatch patch = patch_from_config(cfg, "eval-heatmap config");
  const int stride = json_get(cfg, "stride", 25);
  const int jobs = jobs_flag > 0 ? jobs_flag : json_get(cfg, "jobs", 1);
  const int cell_px = json_get(cfg, "cell_px", 24);
  const bool moving = json_get(cfg, "moving", false);

  HeatmapEval he;
  if (moving) {
    MovingPatchConfig mc;
    mc.stride = stride;
    mc.jobs = jobs;
    mc.seed = json_get<std::uint64_t>(cfg, "seed", mc.seed);
    mc.max_retries = json_get(cfg, "max_retries", mc.max_retries);
    json motion_obj = cfg.value("motion", json::object());
    check_keys(motion_obj, {"translation", "rotation_deg", "scale"}, "motion settings");
    mc.motion.translation = json_get(motion_obj, "translation", mc.motion.translation);
    mc.motion.rotation_deg = json_get(motion_obj, "rotation_deg", mc.motion.rotation_deg);
    mc.motion.scale = json_get(motion_obj, "scale", mc.motion.scale);
    he = moving_patch_eval(model, manifest, patch, mc);
  } else {
    he = location_heatmap(model, manifest, patch, stride, jobs);
  }

  he.report.config_echo = cfg;
  write_text_file(out / "heatmap.csv", he.map.to_csv());
  write_image(out / "heatmap.png", render_heatmap(he.map, cell_px));
  write_text_file(out / "report.json", he.report.to_json().dump(2) + "\n");

  // Per-sample grids, for digging into which images drive a hot cell.
  CsvWriter per_image({"sample", "x", "y", "epe"});
  const std::size_t nx = he.map.xs.size();
  for (std::size_t s = 0; s < he.map.per_image.size(); ++s)
    for (std::size_t c = 0; c < he.map.per_image[s].size(); ++c)
      per_image.add_row({std::to_string(s), std::to_string(he.map.xs[c % nx]),
                         std::to_string(he.map.ys[c / nx]),
                         format_double(he.map.per_image[s][c])});
  per_image.save(out / "heatmap_per_image.csv");

  return {{"epe_unattacked", format_double(he.report.epe_unattacked)},
          {"epe_best", format_double(he.report.best.epe)},
          {"epe_median", format_double(he.report.median.epe)},
          {"epe_worst", format_double(he.report.worst.epe)},
          {"skipped_placements", std::to_string(he.report.skipped_placements)}};
}

Summary run_eval_replace(const json& cfg, const fs::path& out) {
  check_keys(cfg, {"command", "out_dir", "checkpoint", "dataset", "patch", "noise_seed"},
             "eval-replace config");
  Model model = model_from_config(cfg, "eval-replace config");
  DatasetManifest manifest = dataset_from_config(cfg, "eval-replace config");
  AdversarialPatch patch = patch_from_config(cfg, "eval-replace config");
  const std::uint64_t noise_seed = json_get<std::uint64_t>(cfg, "noise_seed", 0);

  ReplacementReport rep = feature_replacement_experiment(model, manifest, patch, noise_seed);
  CsvWriter csv({"variant", "epe"});
  csv.add_row({"none", format_double(rep.epe_none)});
  csv.add_row({"conv3", format_double(rep.epe_conv3)});
  csv.add_row({"conv_redir", format_double(rep.epe_conv_redir)});
  csv.add_row({"corr", format_double(rep.epe_corr)});
  csv.save(out / "replace.csv");
  json rj{{"epe_none", rep.epe_none},
          {"epe_conv3", rep.epe_conv3},
          {"epe_conv_redir", rep.epe_conv_redir},
          {"epe_corr", rep.epe_corr},
          {"config", cfg}};
  write_text_file(out / "report.json", rj.dump(2) + "\n");
  return {{"epe_none", format_double(rep.epe_none)},
          {"epe_conv3", format_double(rep.epe_conv3)},
          {"epe_conv_redir", format_double(rep.epe_conv_redir)},
          {"epe_corr", format_double(rep.epe_corr)}};
}

Summary run_eval_mmd(const json& cfg, const fs::path& out) {
  check_keys(cfg, {"command", "out_dir", "checkpoint", "dataset", "patch", "placement_seed"},
             "eval-mmd config");
  Model model = model_from_config(cfg, "eval-mmd config");
  DatasetManifest manifest = dataset_from_config(cfg, "eval-mmd config");
  AdversarialPatch patch = patch_from_config(cfg, "eval-mmd config");
  const std::uint64_t placement_seed = json_get<std::uint64_t>(cfg, "placement_seed", 0);

  SeparabilityReport rep = feature_separability(model, manifest, patch, placement_seed);
  json rj = rep.to_json();
  rj["config"] = cfg;
  write_text_file(out / "report.json", rj.dump(2) + "\n");
  write_text_file(out / "features_before_corr.csv", rep.before_corr.to_csv());
  write_text_file(out / "features_after_corr.csv", rep.after_corr.to_csv());
  const double ratio = rep.mmd_before > 0.0 ? rep.mmd_after / rep.mmd_before
                                            : std::numeric_limits<double>::quiet_NaN();
  return {{"mmd_before", format_double(rep.mmd_before)},
          {"mmd_after", format_double(rep.mmd_after)},
          {"mmd_ratio", format_double(ratio)}};
}

void write_sweep_csv(const fs::path& path, const std::vector<Summary>& rows) {
  std::vector<std::string> keys;
  for (const auto& row : rows)
    for (const auto& [k, v] : row)
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  std::vector<std::string> header{"run"};
  header.insert(header.end(), keys.begin(), keys.end());
  CsvWriter csv(header);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<std::string> cells{std::to_string(i)};
    for (const auto& k : keys) {
      auto it = std::find_if(rows[i].begin(), rows[i].end(),
                             [&](const auto& kv) { return kv.first == k; });
      cells.push_back(it == rows[i].end() ? std::string() : it->second);
    }
    csv.add_row(cells);
  }
  csv.save(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patchflow: a desk-scale lab for physical adversarial attacks on optical flow"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::vector<std::string> sets;
  int jobs_flag = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path,
                    "JSON config file; a top-level array runs a sweep");
    sub->add_option("--set", sets, "override: dotted.path=value (repeatable, wins over file)");
    sub->add_option("--out", out_dir, "output directory (default out/<command>)");
  };

  std::map<std::string, std::function<Summary(const json&, const fs::path&)>> runners;

  add_common(app.add_subcommand("train", "train a flow network on synthetic scenes"));
  runners["train"] = run_train;

  add_common(app.add_subcommand("attack-patch", "optimize an adversarial patch"));
  runners["attack-patch"] = run_attack_patch;

  add_common(app.add_subcommand("attack-stripes", "generate a striped pattern patch"));
  runners["attack-stripes"] = run_attack_stripes;

  add_common(app.add_subcommand("attack-fgsm", "global perturbation attack, EPE per epsilon"));
  runners["attack-fgsm"] = run_attack_fgsm;

  CLI::App* sub_heatmap =
      app.add_subcommand("eval-heatmap", "attacked EPE per patch location on a lattice");
  add_common(sub_heatmap);
  sub_heatmap->add_option("--jobs", jobs_flag, "worker threads (wins over config)");
  runners["eval-heatmap"] = [&](const json& cfg, const fs::path& out) {
    return run_eval_heatmap(cfg, out, jobs_flag);
  };

  add_common(app.add_subcommand("eval-replace",
                                "feature replacement: which stage carries the attack"));
  runners["eval-replace"] = run_eval_replace;

  add_common(app.add_subcommand("eval-mmd",
                                "clean vs attacked feature separability around the "
                                "correlation layer"));
  runners["eval-mmd"] = run_eval_mmd;

  CLI::App* sub_rf = app.add_subcommand("rf", "print an encoder's receptive field in pixels");
  int rf_kernel = 3, rf_convs = 1, rf_dilation = 1, rf_first = 7, rf_levels = 3;
  sub_rf->add_option("--kernel", rf_kernel, "conv kernel size")->required();
  sub_rf->add_option("--convs", rf_convs, "convolutions per level")->required();
  sub_rf->add_option("--dilation", rf_dilation, "dilation of non-strided convs");
  sub_rf->add_option("--first-kernel", rf_first, "kernel of the very first conv");
  sub_rf->add_option("--levels", rf_levels, "stride-2 resolution levels");

  CLI::App* sub_render = app.add_subcommand("render", "render a .flo file to a color PNG");
  std::string flo_path, png_path;
  double max_mag = 0.0;
  sub_render->add_option("flo", flo_path, "input .flo flow file")->required();
  sub_render->add_option("--out", png_path, "output PNG (default: input with .png)");
  sub_render->add_option("--max-magnitude", max_mag,
                         "saturation magnitude (default: per-file maximum)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "config: " << e.what() << "\n";
    return 1;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "rf") {
      EncoderSpec spec;
      spec.kernel_size = rf_kernel;
      spec.convs_per_level = rf_convs;
      spec.dilation = rf_dilation;
      spec.first_kernel = rf_first;
      spec.levels = rf_levels;
      std::cout << receptive_field(spec) << "\n";
      return 0;
    }
    if (cmd == "render") {
      FlowField flow = read_flo(flo_path);
      std::optional<double> mm;
      if (max_mag > 0.0) mm = max_mag;
      fs::path dst = png_path.empty() ? fs::path(flo_path).replace_extension(".png")
                                      : fs::path(png_path);
      if (dst.has_parent_path()) fs::create_directories(dst.parent_path());
      write_image(dst, flow_to_color(flow, mm));
      std::cout << dst.string() << "\n";
      return 0;
    }

    json cfg = config_path.empty() ? json::object() : load_config_file(config_path);
    const auto& runner = runners.at(cmd);

    auto run_one = [&](json one, const fs::path& dir) -> Summary {
      if (one.contains("command") && one.at("command").get<std::string>() != cmd)
        throw ConfigError("command '" + one.at("command").get<std::string>() +
                          "' does not match subcommand '" + cmd + "'");
      one["command"] = cmd;
      one["out_dir"] = dir.string();
      fs::create_directories(dir);
      write_text_file(dir / "config.json", one.dump(2) + "\n");
      return runner(one, dir);
    };

    if (cfg.is_array()) {
      if (cfg.empty()) throw ConfigError("sweep array is empty");
      fs::path out_root = out_dir.empty() ? fs::path("out") / cmd : fs::path(out_dir);
      std::vector<Summary> rows;
      for (std::size_t i = 0; i < cfg.size(); ++i) {
        json one = cfg[i];
        if (!one.is_object())
          throw ConfigError("sweep element " + std::to_string(i) + " is not an object");
        if (one.contains("out_dir"))
          throw ConfigError("sweep elements must not set out_dir; use --out");
        for (const auto& s : sets) apply_override(one, s);
        char name[32];
        std::snprintf(name, sizeof(name), "sweep_%03zu", i);
        rows.push_back(run_one(std::move(one), out_root / name));
        std::cout << name << " done\n";
      }
      write_sweep_csv(out_root / "sweep.csv", rows);
      std::cout << "sweep: " << rows.size() << " runs -> "
                << (out_root / "sweep.csv").string() << "\n";
      return 0;
    }

    for (const auto& s : sets) apply_override(cfg, s);
    fs::path out_root;
    if (!out_dir.empty())
      out_root = out_dir;
    else if (cfg.contains("out_dir"))
      out_root = cfg.at("out_dir").get<std::string>();
    else
      out_root = fs::path("out") / cmd;
    Summary summary = run_one(std::move(cfg), out_root);
    for (const auto& [k, v] : summary) std::cout << k << " = " << v << "\n";
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "shape: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "io: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
