#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "patchflow/image.hpp"
#include "patchflow/models.hpp"
#include "patchflow/normalization.hpp"
#include "patchflow/ops.hpp"
#include "patchflow/rng.hpp"
#include "patchflow/training.hpp"
#include "patchflow/util.hpp"

using namespace patchflow;

namespace {

EncoderSpec make_encoder(int kernel, int convs, int dilation = 1) {
  EncoderSpec e;
  e.kernel_size = kernel;
  e.convs_per_level = convs;
  e.dilation = dilation;
  return e;
}

// Overwrites every weight with strictly positive values and biases with a
// small positive constant so that gradient support equals geometric support.
void make_positive(Model& model, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : model.params) {
    bool is_bias = p.name.size() > 5 && p.name.substr(p.name.size() - 5) == ".bias";
    for (double& v : p.tensor.values()) v = is_bias ? 0.05 : rng.uniform(0.02, 1.0);
  }
}

// Side length of the bounding box of input pixels with nonzero gradient when
// differentiating one centered unit of the final encoder level.
struct MaskExtent {
  int height = 0;
  int width = 0;
};

MaskExtent influence_mask_extent(const EncoderSpec& enc) {
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  spec.encoder = enc;
  spec.channel_scale = 0.25;
  Model model = build_model(spec, 7);
  make_positive(model, 11);

  const int size = 128;
  Rng rng(3);
  Tensor input = Tensor::zeros({1, 3, size, size}, true);
  for (double& v : input.values()) v = rng.uniform(0.1, 1.0);

  Tape tape;
  TapeScope scope(tape);
  std::vector<Tensor> levels = model.encoder_forward(input);
  Tensor l3 = levels.back();
  Tensor onehot = Tensor::zeros(l3.shape());
  onehot.at4(0, 0, l3.dim(2) / 2, l3.dim(3) / 2) = 1.0;
  Tensor loss = ops::sum(ops::mul(l3, onehot));
  tape.backward(loss);

  int min_x = size, max_x = -1, min_y = size, max_y = -1;
  const double* g = input.grad_data();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        std::size_t i = (static_cast<std::size_t>(c) * size + y) * size + x;
        if (g[i] != 0.0) {
          min_x = std::min(min_x, x);
          max_x = std::max(max_x, x);
          min_y = std::min(min_y, y);
          max_y = std::max(max_y, y);
        }
      }
  REQUIRE(max_x >= 0);
  return {max_y - min_y + 1, max_x - min_x + 1};
}

ImagePair random_pair(int h, int w, std::uint64_t seed) {
  ImagePair pair;
  pair.frame_t = Image::zeros(h, w);
  pair.frame_t1 = Image::zeros(h, w);
  Rng rng(seed);
  for (double& v : pair.frame_t.data) v = rng.uniform01();
  for (double& v : pair.frame_t1.data) v = rng.uniform01();
  return pair;
}

Tensor random_normalized(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({1, 3, h, w});
  for (double& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.values() == b.values();
}

}  // namespace

TEST_CASE("receptive field matches the published encoder table") {
  CHECK(receptive_field(make_encoder(3, 1)) == 19);
  CHECK(receptive_field(make_encoder(5, 1)) == 31);
  CHECK(receptive_field(make_encoder(3, 2)) == 47);
  CHECK(receptive_field(make_encoder(3, 3)) == 75);
  CHECK(receptive_field(make_encoder(5, 2)) == 87);
  CHECK(receptive_field(make_encoder(3, 4)) == 103);
}

TEST_CASE("encoder layer list: 7x7 first layer, one stride-2 conv per level") {
  auto layers = encoder_layers(make_encoder(3, 4), 3, 1.0);
  CHECK(layers.size() == 12);
  CHECK(layers[0].kernel == 7);
  CHECK(layers[0].stride == 2);
  CHECK(layers[0].in_channels == 3);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i > 0) CHECK(layers[i].kernel == 3);
    CHECK(layers[i].stride == (i % 4 == 0 ? 2 : 1));
    CHECK(layers[i].padding == layers[i].dilation * (layers[i].kernel - 1) / 2);
  }
  CHECK(layers[0].out_channels == 16);
  CHECK(layers[3].out_channels == 16);
  CHECK(layers[4].out_channels == 32);
  CHECK(layers[11].out_channels == 64);

  auto shallow = encoder_layers(make_encoder(5, 1), 3, 1.0);
  CHECK(shallow.size() == 3);
  CHECK(shallow[0].kernel == 7);
  CHECK(shallow[1].kernel == 5);
  CHECK(shallow[2].kernel == 5);
  for (const auto& l : shallow) CHECK(l.stride == 2);
}

TEST_CASE("influence mask of the built encoder equals the receptive field") {
  struct Case {
    int kernel, convs, dilation, expected;
  };
  const Case cases[] = {
      {3, 1, 1, 19}, {5, 1, 1, 31}, {3, 2, 1, 47},
      {3, 3, 1, 75}, {5, 2, 1, 87}, {3, 4, 1, 103},
  };
  for (const auto& c : cases) {
    CAPTURE(c.kernel);
    CAPTURE(c.convs);
    EncoderSpec enc = make_encoder(c.kernel, c.convs, c.dilation);
    CHECK(receptive_field(enc) == c.expected);
    MaskExtent m = influence_mask_extent(enc);
    CHECK(m.height == c.expected);
    CHECK(m.width == c.expected);
  }
}

TEST_CASE("influence mask confirms the dilated receptive field") {
  EncoderSpec enc = make_encoder(5, 1, 2);
  int rf = receptive_field(enc);
  CHECK(rf == 61);
  MaskExtent m = influence_mask_extent(enc);
  CHECK(m.height == rf);
  CHECK(m.width == rf);
}

TEST_CASE("presets select the published encoder variants") {
  ModelSpec c = default_spec(Variant::flownetc_mini);
  CHECK(c.encoder.kernel_size == 5);
  CHECK(c.encoder.convs_per_level == 1);
  CHECK(receptive_field(c.encoder) == 31);
  ModelSpec r = default_spec(Variant::robust_flownetc_mini);
  CHECK(r.encoder.kernel_size == 3);
  CHECK(r.encoder.convs_per_level == 4);
  CHECK(receptive_field(r.encoder) == 103);
  ModelSpec s = default_spec(Variant::flownets_mini);
  CHECK(s.encoder.kernel_size == 5);
  CHECK(s.encoder.convs_per_level == 1);
}

TEST_CASE("build_model is deterministic per (spec, seed)") {
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  spec.channel_scale = 0.5;
  Model a = build_model(spec, 42);
  Model b = build_model(spec, 42);
  Model c = build_model(spec, 43);
  REQUIRE(a.params.size() == b.params.size());
  bool all_equal = true;
  for (std::size_t i = 0; i < a.params.size(); ++i)
    if (!same_values(a.params[i].tensor, b.params[i].tensor)) all_equal = false;
  CHECK(all_equal);
  bool any_diff = false;
  for (std::size_t i = 0; i < c.params.size(); ++i)
    if (a.params[i].tensor.values() != c.params[i].tensor.values()) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("parameter count matches a hand-derived closed form") {
  SUBCASE("flownetc_mini at full width") {
    ModelSpec spec = default_spec(Variant::flownetc_mini);
    Model m = build_model(spec, 1);
    std::size_t expected = 0;
    expected += 16 * 3 * 7 * 7 + 16;     // 7x7 stride-2 conv into level 1
    expected += 32 * 16 * 5 * 5 + 32;    // level 2
    expected += 64 * 32 * 5 * 5 + 64;    // level 3
    expected += 8 * 64 * 1 * 1 + 8;      // 1x1 redirect branch
    expected += 64 * (81 + 8) * 9 + 64;  // merge conv on corr(81) + redirect(8)
    expected += 128 * 64 * 9 + 128;      // stride-2 stage at 1/16
    expected += 128 * 128 * 9 + 128;     // its companion stride-1 conv
    expected += 2 * 128 * 9 + 2;         // coarsest prediction
    expected += 128 * 32 * 16 + 32;      // deconv to 1/8 (out 64/2)
    expected += 2 * (32 + 64 + 2) * 9 + 2;  // prediction at 1/8
    expected += (32 + 64 + 2) * 16 * 16 + 16;  // deconv to 1/4 (out 32/2)
    expected += 2 * (16 + 32 + 2) * 9 + 2;     // prediction at 1/4
    CHECK(m.parameter_count() == expected);
  }
  SUBCASE("robust_flownetc_mini at full width") {
    ModelSpec spec = default_spec(Variant::robust_flownetc_mini);
    Model m = build_model(spec, 1);
    std::size_t expected = 0;
    expected += 16 * 3 * 7 * 7 + 16;            // 7x7 stride-2 conv
    expected += 3 * (16 * 16 * 9 + 16);         // three stride-1 convs, level 1
    expected += 32 * 16 * 9 + 32;               // level-2 stride-2 conv
    expected += 3 * (32 * 32 * 9 + 32);
    expected += 64 * 32 * 9 + 64;               // level-3 stride-2 conv
    expected += 3 * (64 * 64 * 9 + 64);
    expected += 8 * 64 + 8;
    expected += 64 * (81 + 8) * 9 + 64;
    expected += 128 * 64 * 9 + 128;
    expected += 128 * 128 * 9 + 128;
    expected += 2 * 128 * 9 + 2;
    expected += 128 * 32 * 16 + 32;
    expected += 2 * (32 + 64 + 2) * 9 + 2;
    expected += (32 + 64 + 2) * 16 * 16 + 16;
    expected += 2 * (16 + 32 + 2) * 9 + 2;
    CHECK(m.parameter_count() == expected);
  }
  SUBCASE("flownets_mini at full width") {
    ModelSpec spec = default_spec(Variant::flownets_mini);
    Model m = build_model(spec, 1);
    std::size_t expected = 0;
    expected += 16 * 6 * 7 * 7 + 16;  // stacked 6-channel input
    expected += 32 * 16 * 5 * 5 + 32;
    expected += 64 * 32 * 5 * 5 + 64;
    expected += 64 * 64 * 9 + 64;  // merge conv sees the level-3 features directly
    expected += 128 * 64 * 9 + 128;
    expected += 128 * 128 * 9 + 128;
    expected += 2 * 128 * 9 + 2;
    expected += 128 * 32 * 16 + 32;
    expected += 2 * (32 + 64 + 2) * 9 + 2;
    expected += (32 + 64 + 2) * 16 * 16 + 16;
    expected += 2 * (16 + 32 + 2) * 9 + 2;
    CHECK(m.parameter_count() == expected);
  }
}

TEST_CASE("initialization follows the 2/fan_in variance rule") {
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  Model m = build_model(spec, 5);
  const Tensor& w = m.param("enc3_1.weight");  // 64*32*25 = 51200 samples
  double fan_in = 32 * 25;
  double sum = 0.0, sq = 0.0;
  for (double v : w.values()) {
    sum += v;
    sq += v * v;
  }
  double n = static_cast<double>(w.numel());
  double mean = sum / n;
  double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 5.0 * std::sqrt(2.0 / fan_in / n));
  CHECK(var == doctest::Approx(2.0 / fan_in).epsilon(0.10));
  for (double v : m.param("enc3_1.bias").values()) CHECK(v == 0.0);
}

TEST_CASE("forward yields finite multiscale flows with the contracted shapes") {
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  spec.channel_scale = 0.5;
  Model m = build_model(spec, 9);
  ImagePair zeros;
  zeros.frame_t = Image::zeros(32, 64);
  zeros.frame_t1 = Image::zeros(32, 64);
  ForwardResult out = m.forward(zeros);
  REQUIRE(out.flows.size() == 3);
  CHECK(out.flows[0].shape() == std::vector<int>{1, 2, 2, 4});
  CHECK(out.flows[1].shape() == std::vector<int>{1, 2, 4, 8});
  CHECK(out.flows[2].shape() == std::vector<int>{1, 2, 8, 16});
  CHECK(out.full_res.shape() == std::vector<int>{1, 2, 32, 64});
  for (const Tensor& f : out.flows)
    for (double v : f.values()) CHECK(std::isfinite(v));
  for (double v : out.full_res.values()) CHECK(std::isfinite(v));
}

TEST_CASE("full-resolution output is the x4 upsample of the finest flow, x4 magnitude") {
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  spec.channel_scale = 0.5;
  Model m = build_model(spec, 10);
  ImagePair pair = random_pair(32, 48, 77);
  ForwardResult out = m.forward(pair);
  CHECK(out.flows.back().dim(2) == 32 / 4);
  CHECK(out.flows.back().dim(3) == 48 / 4);
  Tensor recomputed = ops::scale(ops::upsample_bilinear(out.flows.back(), 4), 4.0);
  REQUIRE(recomputed.shape() == out.full_res.shape());
  for (std::size_t i = 0; i < recomputed.numel(); ++i)
    CHECK(recomputed.values()[i] == doctest::Approx(out.full_res.values()[i]).epsilon(1e-12));
}

TEST_CASE("forward is pure: repeated calls agree bitwise") {
  ModelSpec spec = default_spec(Variant::robust_flownetc_mini);
  spec.channel_scale = 0.25;
  Model m = build_model(spec, 21);
  ImagePair pair = random_pair(32, 32, 5);
  ForwardResult a = m.forward(pair);
  ForwardResult b = m.forward(pair);
  CHECK(same_values(a.full_res, b.full_res));
  for (std::size_t i = 0; i < a.flows.size(); ++i) CHECK(same_values(a.flows[i], b.flows[i]));
}

TEST_CASE("indivisible input extents are rejected") {
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  spec.channel_scale = 0.25;
  Model m = build_model(spec, 2);
  ImagePair pair = random_pair(30, 60, 3);
  CHECK_THROWS_AS(m.forward(pair), ShapeError);
}

TEST_CASE("taps: self-replacement reproduces the plain forward bitwise") {
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  spec.channel_scale = 0.25;
  Model m = build_model(spec, 33);
  Tensor a = random_normalized(32, 32, 1);
  Tensor b = random_normalized(32, 32, 2);
  ForwardResult plain = m.forward_normalized(a, b);
  for (TapPoint tap : {TapPoint::conv3, TapPoint::conv_redir, TapPoint::corr}) {
    CAPTURE(tap_point_name(tap));
    ForwardResult rec = m.forward_with_tap(a, b, tap, TapMode::record, nullptr);
    std::size_t want = tap == TapPoint::conv3 ? 2 : 1;
    REQUIRE(rec.recorded.features.size() == want);
    ForwardResult rep = m.forward_with_tap(a, b, tap, TapMode::replace, &rec.recorded);
    CHECK(same_values(rep.full_res, plain.full_res));
    for (std::size_t i = 0; i < rep.flows.size(); ++i)
      CHECK(same_values(rep.flows[i], plain.flows[i]));
  }
}

TEST_CASE("taps: downstream layers see the banked tensor exactly") {
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  spec.channel_scale = 0.25;
  Model m = build_model(spec, 34);
  Tensor a1 = random_normalized(32, 32, 10);
  Tensor a2 = random_normalized(32, 32, 11);
  Tensor b1 = random_normalized(32, 32, 12);
  Tensor b2 = random_normalized(32, 32, 13);
  ForwardResult bankA = m.forward_with_tap(a1, a2, TapPoint::corr, TapMode::record, nullptr);
  ForwardResult plainB = m.forward_normalized(b1, b2);
  ForwardResult rep = m.forward_with_tap(b1, b2, TapPoint::corr, TapMode::replace,
                                         &bankA.recorded);
  REQUIRE(rep.recorded.features.size() == 1);
  CHECK(rep.recorded.features[0].same_storage(bankA.recorded.features[0]));
  CHECK(same_values(rep.recorded.features[0], bankA.recorded.features[0]));
  bool differs = rep.full_res.values() != plainB.full_res.values();
  CHECK(differs);
}

TEST_CASE("taps: bank shape mismatch is rejected") {
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  spec.channel_scale = 0.25;
  Model m = build_model(spec, 35);
  Tensor a = random_normalized(32, 32, 20);
  Tensor b = random_normalized(32, 32, 21);
  ForwardResult rec = m.forward_with_tap(a, b, TapPoint::corr, TapMode::record, nullptr);
  TapBank bad;
  bad.features.push_back(Tensor::zeros({1, 81, 2, 2}));
  CHECK_THROWS_AS(m.forward_with_tap(a, b, TapPoint::corr, TapMode::replace, &bad), ShapeError);
  TapBank empty;
  CHECK_THROWS_AS(m.forward_with_tap(a, b, TapPoint::corr, TapMode::replace, &empty),
                  ShapeError);
}

TEST_CASE("flownets variant: stacked input, no correlation or redirect branch") {
  ModelSpec spec = default_spec(Variant::flownets_mini);
  spec.channel_scale = 0.5;
  Model m = build_model(spec, 40);
  CHECK_FALSE(m.has_param("conv_redir.weight"));
  // The merge conv consumes the level-3 feature width directly, not a
  // correlation volume.
  CHECK(m.param("conv3_1.weight").dim(1) == m.param("enc3_1.weight").dim(0));
  ImagePair pair = random_pair(32, 32, 50);
  ForwardResult out = m.forward(pair);
  CHECK(out.full_res.shape() == std::vector<int>{1, 2, 32, 32});
  Tensor a = random_normalized(32, 32, 51);
  Tensor b = random_normalized(32, 32, 52);
  CHECK_THROWS_AS(m.forward_with_tap(a, b, TapPoint::corr, TapMode::record, nullptr),
                  ConfigError);
  CHECK_THROWS_AS(m.forward_with_tap(a, b, TapPoint::conv_redir, TapMode::record, nullptr),
                  ConfigError);
  ForwardResult rec = m.forward_with_tap(a, b, TapPoint::conv3, TapMode::record, nullptr);
  CHECK(rec.recorded.features.size() == 1);
}

TEST_CASE("checkpoint roundtrip preserves spec, seed, normalization and parameters") {
  ModelSpec spec = default_spec(Variant::robust_flownetc_mini);
  spec.channel_scale = 0.25;
  Model m = build_model(spec, 123);
  m.normalization.id = "unit_meansub";
  m.normalization.channel_means = {0.31, 0.44, 0.57};
  auto path = std::filesystem::temp_directory_path() / "patchflow_ckpt_test.bin";
  save_checkpoint(path, m);
  Model r = load_checkpoint(path);
  CHECK(model_spec_to_json(r.spec) == model_spec_to_json(m.spec));
  CHECK(r.init_seed == 123);
  CHECK(r.normalization.id == "unit_meansub");
  CHECK(r.normalization.channel_means == m.normalization.channel_means);
  REQUIRE(r.params.size() == m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    CHECK(r.params[i].name == m.params[i].name);
    CHECK(same_values(r.params[i].tensor, m.params[i].tensor));
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint loader rejects corrupt files") {
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  spec.channel_scale = 0.25;
  Model m = build_model(spec, 1);
  auto path = std::filesystem::temp_directory_path() / "patchflow_ckpt_bad.bin";
  save_checkpoint(path, m);
  std::string blob = read_text_file(path);

  std::string wrong_magic = blob;
  wrong_magic[0] = 'X';
  write_text_file(path, wrong_magic);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"), IoError);

  write_text_file(path, blob.substr(0, blob.size() - 9));
  CHECK_THROWS_AS(load_checkpoint(path), IoError);

  write_text_file(path, blob + "xx");
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("model spec JSON: roundtrip and strict key checking") {
  ModelSpec spec = default_spec(Variant::robust_flownetc_mini);
  spec.channel_scale = 0.75;
  spec.max_displacement = 3;
  nlohmann::json j = model_spec_to_json(spec);
  ModelSpec back = model_spec_from_json(j);
  CHECK(model_spec_to_json(back) == j);

  nlohmann::json unknown = j;
  unknown["extra_knob"] = 1;
  CHECK_THROWS_AS(model_spec_from_json(unknown), ConfigError);

  nlohmann::json enc_unknown = j;
  enc_unknown["encoder"]["kernal_size"] = 3;
  CHECK_THROWS_AS(model_spec_from_json(enc_unknown), ConfigError);

  nlohmann::json missing;
  missing["max_displacement"] = 4;
  CHECK_THROWS_AS(model_spec_from_json(missing), ConfigError);

  CHECK_THROWS_AS(variant_from_name("flownet_giga"), ConfigError);
}

TEST_CASE("normalization mismatch at inference emits a warning but still runs") {
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  spec.channel_scale = 0.25;
  Model m = build_model(spec, 3);
  NormalizationScheme other;
  other.id = "unit_meansub";
  other.channel_means = {0.5, 0.5, 0.5};
  ImagePair pair = random_pair(32, 32, 8);
  ForwardResult out = m.forward_with_scheme(pair, other);
  CHECK(out.full_res.numel() == 2u * 32 * 32);
}

TEST_CASE("whole-model gradients match central finite differences") {
  // Tiny spec so every parameter element can be probed.
  ModelSpec spec = default_spec(Variant::flownetc_mini);
  spec.channel_scale = 0.0625;  // channels 1, 2, 4
  spec.max_displacement = 1;
  spec.redirect_channels = 4;   // scales to 1
  Model model = build_model(spec, 99);

  Tensor a = random_normalized(16, 16, 61);
  Tensor b = random_normalized(16, 16, 62);
  FlowField gt = FlowField::zeros(16, 16);
  Rng grng(63);
  for (std::size_t i = 0; i < gt.u.size(); ++i) {
    gt.u[i] = grng.uniform(-1.5, 1.5);
    gt.v[i] = grng.uniform(-1.5, 1.5);
  }

  std::vector<Tensor> probes;
  for (auto& p : model.params) probes.push_back(p.tensor);
  probes.push_back(a);
  probes.push_back(b);

  auto loss_fn = [&]() {
    ForwardResult out = model.forward_normalized(a, b);
    std::vector<double> weights = default_loss_weights(static_cast<int>(out.flows.size()));
    return multiscale_l2_loss(out.flows, gt, weights);
  };
  double err = testutil::max_grad_rel_err(loss_fn, probes, 1e-5, 1e-4);
  CHECK(err < 1e-4);
}
