#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "patchflow/dataset.hpp"
#include "patchflow/models.hpp"
#include "patchflow/ops.hpp"
#include "patchflow/rng.hpp"
#include "patchflow/scene.hpp"
#include "patchflow/training.hpp"
#include "patchflow/util.hpp"

using namespace patchflow;

namespace {

DatasetManifest small_manifest(int count, std::uint64_t root_seed) {
  DatasetManifest m;
  m.base.height = 32;
  m.base.width = 64;
  m.base.num_shapes = 2;
  m.root_seed = root_seed;
  m.count = count;
  return m;
}

ModelSpec tiny_spec() {
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  spec.channel_scale = 0.25;
  return spec;
}

}  // namespace

TEST_CASE("one-cycle schedule: endpoints, peak, continuity, range errors") {
  const int total = 1000;
  const double peak = 1e-3;
  CHECK(one_cycle_lr(0, total, peak) == doctest::Approx(peak / 25.0).epsilon(1e-12));
  CHECK(one_cycle_lr(300, total, peak) == doctest::Approx(peak).epsilon(1e-12));
  double lr_last = one_cycle_lr(total - 1, total, peak);
  double increment = (peak - peak / 1e4) / (total - 0.3 * total);
  CHECK(lr_last >= peak / 1e4);
  CHECK(lr_last - peak / 1e4 <= increment + 1e-15);
  // piecewise-linear and continuous across the junction
  double before = one_cycle_lr(299, total, peak);
  double after = one_cycle_lr(301, total, peak);
  CHECK(before < peak);
  CHECK(after < peak);
  CHECK_THROWS_AS(one_cycle_lr(-1, total, peak), ConfigError);
  CHECK_THROWS_AS(one_cycle_lr(total, total, peak), ConfigError);
  CHECK_THROWS_AS(one_cycle_lr(0, 0, peak), ConfigError);
}

TEST_CASE("multiscale loss: zero on exact predictions, 3-4-5 on constant error") {
  FlowField gt = FlowField::zeros(16, 16);
  Rng rng(4);
  for (std::size_t i = 0; i < gt.u.size(); ++i) {
    gt.u[i] = std::floor(rng.uniform(-3.0, 3.0));
    gt.v[i] = std::floor(rng.uniform(-3.0, 3.0));
  }
  SUBCASE("predictions equal to the pooled ground truth give zero loss") {
    std::vector<Tensor> preds = {ops::flow_to_tensor(downsample_flow(gt, 4)),
                                 ops::flow_to_tensor(downsample_flow(gt, 2))};
    Tensor loss = multiscale_l2_loss(preds, gt, {0.4, 0.2});
    CHECK(loss.values()[0] == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("all-zero weights give zero loss") {
    std::vector<Tensor> preds = {ops::flow_to_tensor(downsample_flow(gt, 2)),
                                 ops::flow_to_tensor(gt)};
    Tensor loss = multiscale_l2_loss(preds, gt, {0.0, 0.0});
    CHECK(loss.values()[0] == 0.0);
  }
  SUBCASE("single scale with constant (3,4) error and weight 1 gives 5") {
    FlowField zeros = FlowField::zeros(8, 8);
    Tensor pred = Tensor::zeros({1, 2, 8, 8});
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        pred.at4(0, 0, y, x) = 3.0;
        pred.at4(0, 1, y, x) = 4.0;
      }
    Tensor loss = multiscale_l2_loss({pred}, zeros, {1.0});
    CHECK(loss.values()[0] == doctest::Approx(5.0).epsilon(1e-12));
  }
  SUBCASE("weight count must match the prediction count") {
    std::vector<Tensor> preds = {ops::flow_to_tensor(gt)};
    CHECK_THROWS_AS(multiscale_l2_loss(preds, gt, {0.1, 0.2}), ConfigError);
  }
  SUBCASE("default weight ladder halves from 0.32") {
    auto w = default_loss_weights(3);
    REQUIRE(w.size() == 3);
    CHECK(w[0] == doctest::Approx(0.32));
    CHECK(w[1] == doctest::Approx(0.16));
    CHECK(w[2] == doctest::Approx(0.08));
  }
}

TEST_CASE("kaiming_init: seeded determinism and 2/fan_in variance") {
  Tensor a = kaiming_init({100, 100}, 450, 7);
  Tensor b = kaiming_init({100, 100}, 450, 7);
  CHECK(a.values() == b.values());
  Tensor c = kaiming_init({100, 100}, 450, 8);
  CHECK(a.values() != c.values());
  double sq = 0.0;
  for (double v : a.values()) sq += v * v;
  double var = sq / static_cast<double>(a.numel());
  CHECK(var == doctest::Approx(2.0 / 450.0).epsilon(0.10));
  CHECK_THROWS_AS(kaiming_init({4, 4}, 0, 1), ConfigError);
}

TEST_CASE("gradient clipping: inactive within the bound, exact rescale beyond it") {
  std::vector<Param> params;
  params.push_back({"a", Tensor::from_values({2}, {1.0, 2.0}, true)});
  params.push_back({"b", Tensor::from_values({1}, {3.0}, true)});
  for (auto& p : params) p.tensor.ensure_grad();
  params[0].tensor.grad() = {3.0, 0.0};
  params[1].tensor.grad() = {4.0};  // global norm 5

  SUBCASE("clip_norm above the norm leaves gradients untouched") {
    clip_global_norm(params, 5.0);
    CHECK(params[0].tensor.grad() == std::vector<double>{3.0, 0.0});
    CHECK(params[1].tensor.grad() == std::vector<double>{4.0});
  }
  SUBCASE("clip_norm below the norm rescales to exactly clip_norm") {
    clip_global_norm(params, 1.0);
    CHECK(params[0].tensor.grad()[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(params[1].tensor.grad()[0] == doctest::Approx(0.8).epsilon(1e-12));
  }
}

TEST_CASE("decoupled-weight-decay update matches a hand-stepped recurrence") {
  // Quadratic loss 0.5*(theta-3)^2 so the gradient is theta-3.
  std::vector<Param> params;
  params.push_back({"w", Tensor::from_values({1}, {1.5}, true)});
  OptState state;
  state.m = {{0.0}};
  state.v = {{0.0}};

  const double lr = 0.1, wd = 0.01;
  double theta = 1.5, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    double& model_theta = params[0].tensor.values()[0];
    Tape tape;
    TapeScope scope(tape);
    params[0].tensor.zero_grad();
    Tensor d = ops::affine(params[0].tensor, 1.0, -3.0);
    Tensor loss = ops::sum(ops::scale(ops::mul(d, d), 0.5));
    tape.backward(loss);
    adamw_update(params, lr, wd, state);

    double g = theta - 3.0;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    double mhat = m / (1.0 - std::pow(0.9, t));
    double vhat = v / (1.0 - std::pow(0.999, t));
    theta = theta * (1.0 - wd) - lr * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(model_theta == doctest::Approx(theta).epsilon(1e-12));
  }
  CHECK(state.step == 3);
}

TEST_CASE("zero learning rate changes parameters only through the decay term") {
  auto make = [] {
    std::vector<Param> params;
    params.push_back({"w", Tensor::from_values({2}, {2.0, -1.0}, true)});
    params[0].tensor.ensure_grad();
    params[0].tensor.grad() = {0.7, -0.3};
    return params;
  };
  SUBCASE("with weight decay zero the parameters are bit-identical") {
    auto params = make();
    OptState state;
    state.m = {{0.0, 0.0}};
    state.v = {{0.0, 0.0}};
    adamw_update(params, 0.0, 0.0, state);
    CHECK(params[0].tensor.values() == std::vector<double>{2.0, -1.0});
  }
  SUBCASE("with weight decay the shrink is exactly (1-wd)") {
    auto params = make();
    OptState state;
    state.m = {{0.0, 0.0}};
    state.v = {{0.0, 0.0}};
    adamw_update(params, 0.0, 0.1, state);
    CHECK(params[0].tensor.values()[0] == doctest::Approx(2.0 * 0.9).epsilon(1e-15));
    CHECK(params[0].tensor.values()[1] == doctest::Approx(-0.9).epsilon(1e-15));
  }
}

TEST_CASE("horizontal flip mirrors frames and negates the u component") {
  SceneConfig cfg;
  cfg.height = 32;
  cfg.width = 64;
  cfg.num_shapes = 1;
  cfg.seed = 12;
  cfg.forced_shape_translations = {{5.0, 0.0}};
  cfg.forced_background_translation = {{0.0, 0.0}};
  SceneSample s = generate_scene(cfg);
  SceneSample f = hflip_sample(s);
  int w = cfg.width;
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < w; ++x) {
      std::size_t here = s.flow.index(y, x);
      std::size_t mirror = s.flow.index(y, w - 1 - x);
      CHECK(f.flow.u[here] == -s.flow.u[mirror]);
      CHECK(f.flow.v[here] == s.flow.v[mirror]);
      CHECK(f.occluded[here] == s.occluded[mirror]);
      for (int c = 0; c < 3; ++c) {
        CHECK(f.pair.frame_t.at(c, y, x) == s.pair.frame_t.at(c, y, w - 1 - x));
        CHECK(f.pair.frame_t1.at(c, y, x) == s.pair.frame_t1.at(c, y, w - 1 - x));
      }
    }
}

TEST_CASE("train: zero iterations returns the untouched initialization") {
  TrainConfig config;
  config.iterations = 0;
  config.seed = 31;
  TrainResult r = train(tiny_spec(), small_manifest(4, 2), config);
  Model fresh = build_model(tiny_spec(), 31);
  REQUIRE(r.model.params.size() == fresh.params.size());
  for (std::size_t i = 0; i < fresh.params.size(); ++i)
    CHECK(r.model.params[i].tensor.values() == fresh.params[i].tensor.values());
  CHECK(r.metrics_csv == "step,lr,loss,epe\n");
}

TEST_CASE("train: deterministic metric log, finite loss, per-step rows") {
  TrainConfig config;
  config.iterations = 2;
  config.batch_size = 2;
  config.seed = 77;
  DatasetManifest manifest = small_manifest(8, 3);
  TrainResult a = train(tiny_spec(), manifest, config);
  TrainResult b = train(tiny_spec(), manifest, config);
  CHECK(a.metrics_csv == b.metrics_csv);
  CHECK(std::isfinite(a.last.loss));
  CHECK(a.last.loss > 0.0);
  int lines = 0;
  for (char ch : a.metrics_csv)
    if (ch == '\n') ++lines;
  CHECK(lines == 3);  // header + one row per iteration
  CHECK(a.metrics_csv.rfind("step,lr,loss,epe\n", 0) == 0);
  for (std::size_t i = 0; i < a.model.params.size(); ++i)
    CHECK(a.model.params[i].tensor.values() == b.model.params[i].tensor.values());
}

TEST_CASE("train: the mean-subtraction scheme freezes stream means into the model") {
  TrainConfig config;
  config.iterations = 1;
  config.batch_size = 1;
  config.seed = 5;
  config.normalization_id = "unit_meansub";
  TrainResult r = train(tiny_spec(), small_manifest(4, 9), config);
  CHECK(r.model.normalization.id == "unit_meansub");
  REQUIRE(r.model.normalization.channel_means.size() == 3);
  for (double m : r.model.normalization.channel_means) {
    CHECK(m > 0.0);
    CHECK(m < 1.0);
  }
}

TEST_CASE("train_step aborts on a non-finite loss and names a parameter") {
  Model model = build_model(tiny_spec(), 3);
  model.params[0].tensor.values()[0] = std::numeric_limits<double>::infinity();
  SceneConfig cfg;
  cfg.height = 32;
  cfg.width = 64;
  cfg.seed = 2;
  std::vector<SceneSample> batch = {generate_scene(cfg)};
  TrainConfig config;
  config.iterations = 10;
  OptState state;
  state.init(model);
  CHECK_THROWS_WITH_AS(train_step(model, batch, config, state),
                       doctest::Contains("non-finite"), std::runtime_error);
}
