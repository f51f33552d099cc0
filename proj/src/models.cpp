#include "patchflow/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "patchflow/ops.hpp"
#include "patchflow/rng.hpp"
#include "patchflow/json_util.hpp"
#include "patchflow/util.hpp"

namespace patchflow {

namespace {

constexpr double kLeakySlope = 0.1;
constexpr char kCheckpointMagic[4] = {'P', 'F', 'C', 'P'};
constexpr int kCheckpointVersion = 1;

void validate_spec(const ModelSpec& spec) {
  const EncoderSpec& e = spec.encoder;
  if (e.kernel_size < 1 || e.kernel_size % 2 == 0)
    throw ConfigError("model spec: kernel_size must be odd and positive");
  if (e.first_kernel < 1 || e.first_kernel % 2 == 0)
    throw ConfigError("model spec: first_kernel must be odd and positive");
  if (e.convs_per_level < 1) throw ConfigError("model spec: convs_per_level must be >= 1");
  if (e.dilation < 1) throw ConfigError("model spec: dilation must be >= 1");
  if (e.levels != 3) throw ConfigError("model spec: encoder must have exactly 3 levels");
  if (static_cast<int>(e.channels_per_level.size()) != e.levels)
    throw ConfigError("model spec: channels_per_level must list one width per level");
  for (int c : e.channels_per_level)
    if (c < 1) throw ConfigError("model spec: channel widths must be positive");
  if (spec.max_displacement < 1) throw ConfigError("model spec: max_displacement must be >= 1");
  if (spec.redirect_channels < 1) throw ConfigError("model spec: redirect_channels must be >= 1");
  if (spec.decoder_levels < 1) throw ConfigError("model spec: decoder_levels must be >= 1");
  if (!(spec.channel_scale > 0.0)) throw ConfigError("model spec: channel_scale must be positive");
}

int input_channels_for(const ModelSpec& spec) {
  return spec.variant == Variant::flownets_mini ? 6 : 3;
}

// Channel width of the feature block feeding the refinement at resolution
// exponent r (the stream runs at 1/2^r of the input).
int base_width_at(const ModelSpec& spec, int r) {
  const auto& cpl = spec.encoder.channels_per_level;
  if (r <= 3) return scaled_channels(cpl[static_cast<std::size_t>(r - 1)], spec.channel_scale);
  return scaled_channels(cpl.back() << (r - 3), spec.channel_scale);
}

int deconv_width_at(const ModelSpec& spec, int r) {
  return std::max(1, base_width_at(spec, r) / 2);
}

int correlation_channels(const ModelSpec& spec) {
  int side = 2 * spec.max_displacement + 1;
  return side * side;
}

struct ParamBuilder {
  std::vector<Param> params;
  // fan-in per weight tensor, aligned with params (biases get 0)
  std::vector<int> fan_ins;

  void add_conv(const std::string& name, int out_ch, int in_ch, int k) {
    params.push_back({name + ".weight", Tensor::zeros({out_ch, in_ch, k, k})});
    fan_ins.push_back(in_ch * k * k);
    params.push_back({name + ".bias", Tensor::zeros({out_ch})});
    fan_ins.push_back(0);
  }
  void add_tconv(const std::string& name, int in_ch, int out_ch, int k) {
    params.push_back({name + ".weight", Tensor::zeros({in_ch, out_ch, k, k})});
    fan_ins.push_back(in_ch * k * k);
    params.push_back({name + ".bias", Tensor::zeros({out_ch})});
    fan_ins.push_back(0);
  }
};

// Declares every parameter in its fixed serialization order.
ParamBuilder declare_params(const ModelSpec& spec) {
  validate_spec(spec);
  ParamBuilder b;
  auto layers = encoder_layers(spec.encoder, input_channels_for(spec), spec.channel_scale);
  int cpl = spec.encoder.convs_per_level;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    int level = static_cast<int>(i) / cpl + 1;
    int pos = static_cast<int>(i) % cpl + 1;
    b.add_conv("enc" + std::to_string(level) + "_" + std::to_string(pos), layers[i].out_channels,
               layers[i].in_channels, layers[i].kernel);
  }
  int c3 = base_width_at(spec, 3);
  int merged_ch;
  if (spec.variant == Variant::flownets_mini) {
    merged_ch = c3;
  } else {
    int redir = scaled_channels(spec.redirect_channels, spec.channel_scale);
    b.add_conv("conv_redir", redir, c3, 1);
    merged_ch = correlation_channels(spec) + redir;
  }
  b.add_conv("conv3_1", c3, merged_ch, 3);
  for (int j = 1; j <= spec.decoder_levels; ++j) {
    int in_ch = base_width_at(spec, 3 + j - 1);
    int out_ch = base_width_at(spec, 3 + j);
    std::string stage = "conv" + std::to_string(3 + j);
    b.add_conv(stage, out_ch, in_ch, 3);
    b.add_conv(stage + "_1", out_ch, out_ch, 3);
  }
  int rb = 3 + spec.decoder_levels;
  b.add_conv("predict_" + std::to_string(rb), 2, base_width_at(spec, rb), 3);
  int block_ch = base_width_at(spec, rb);
  for (int r = rb - 1; r >= 2; --r) {
    int up_ch = deconv_width_at(spec, r);
    b.add_tconv("deconv_" + std::to_string(r), block_ch, up_ch, 4);
    block_ch = up_ch + base_width_at(spec, r) + 2;
    b.add_conv("predict_" + std::to_string(r), 2, block_ch, 3);
  }
  return b;
}

Model build_structure(const ModelSpec& spec) {
  Model m;
  m.spec = spec;
  m.params = declare_params(spec).params;
  return m;
}

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& buf, std::size_t pos) {
  auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])); };
  return b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
}

double get_f64(const std::string& buf, std::size_t pos) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)])) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::flownetc_mini: return "flownetc_mini";
    case Variant::robust_flownetc_mini: return "robust_flownetc_mini";
    case Variant::flownets_mini: return "flownets_mini";
  }
  throw ConfigError("variant_name: unknown variant");
}

Variant variant_from_name(const std::string& name) {
  if (name == "flownetc_mini") return Variant::flownetc_mini;
  if (name == "robust_flownetc_mini") return Variant::robust_flownetc_mini;
  if (name == "flownets_mini") return Variant::flownets_mini;
  throw ConfigError("variant: unknown name '" + name + "'");
}

std::string tap_point_name(TapPoint t) {
  switch (t) {
    case TapPoint::conv3: return "conv3";
    case TapPoint::conv_redir: return "conv_redir";
    case TapPoint::corr: return "corr";
  }
  throw ConfigError("tap_point_name: unknown tap");
}

TapPoint tap_point_from_name(const std::string& name) {
  if (name == "conv3") return TapPoint::conv3;
  if (name == "conv_redir") return TapPoint::conv_redir;
  if (name == "corr") return TapPoint::corr;
  throw ConfigError("tap point: unknown name '" + name + "'");
}

ModelSpec default_spec(Variant v) {
  ModelSpec spec;
  spec.variant = v;
  switch (v) {
    case Variant::flownetc_mini:
    case Variant::flownets_mini:
      spec.encoder.kernel_size = 5;
      spec.encoder.convs_per_level = 1;
      break;
    case Variant::robust_flownetc_mini:
      spec.encoder.kernel_size = 3;
      spec.encoder.convs_per_level = 4;
      break;
  }
  return spec;
}

int scaled_channels(int base, double scale) {
  return std::max(1, static_cast<int>(std::lround(base * scale)));
}

std::vector<EncoderLayer> encoder_layers(const EncoderSpec& spec, int input_channels,
                                         double channel_scale) {
  std::vector<EncoderLayer> layers;
  int in_ch = input_channels;
  for (int level = 0; level < spec.levels; ++level) {
    int out_ch = scaled_channels(spec.channels_per_level[static_cast<std::size_t>(level)],
                                 channel_scale);
    for (int i = 0; i < spec.convs_per_level; ++i) {
      EncoderLayer layer;
      layer.kernel = (level == 0 && i == 0) ? spec.first_kernel : spec.kernel_size;
      layer.stride = (i == 0) ? 2 : 1;
      layer.dilation = spec.dilation;
      layer.padding = spec.dilation * (layer.kernel - 1) / 2;
      layer.in_channels = in_ch;
      layer.out_channels = out_ch;
      layers.push_back(layer);
      in_ch = out_ch;
    }
  }
  return layers;
}

int receptive_field(const EncoderSpec& spec) {
  auto layers = encoder_layers(spec, 3, 1.0);
  int rf = 1;
  int jump = 1;
  for (const auto& layer : layers) {
    int k_eff = layer.dilation * (layer.kernel - 1) + 1;
    rf += (k_eff - 1) * jump;
    jump *= layer.stride;
  }
  return rf;
}

nlohmann::json model_spec_to_json(const ModelSpec& spec) {
  nlohmann::json enc;
  enc["kernel_size"] = spec.encoder.kernel_size;
  enc["convs_per_level"] = spec.encoder.convs_per_level;
  enc["dilation"] = spec.encoder.dilation;
  enc["levels"] = spec.encoder.levels;
  enc["first_kernel"] = spec.encoder.first_kernel;
  enc["channels_per_level"] = spec.encoder.channels_per_level;
  nlohmann::json obj;
  obj["variant"] = variant_name(spec.variant);
  obj["encoder"] = enc;
  obj["max_displacement"] = spec.max_displacement;
  obj["redirect_channels"] = spec.redirect_channels;
  obj["decoder_levels"] = spec.decoder_levels;
  obj["channel_scale"] = spec.channel_scale;
  return obj;
}

ModelSpec model_spec_from_json(const nlohmann::json& obj) {
  check_keys(obj, {"variant", "encoder", "max_displacement", "redirect_channels",
                   "decoder_levels", "channel_scale"},
             "model spec");
  if (!obj.contains("variant")) throw ConfigError("model spec: missing 'variant'");
  ModelSpec spec = default_spec(variant_from_name(obj.at("variant").get<std::string>()));
  if (obj.contains("encoder")) {
    const auto& enc = obj.at("encoder");
    check_keys(enc, {"kernel_size", "convs_per_level", "dilation", "levels", "first_kernel",
                     "channels_per_level"},
               "model spec encoder");
    spec.encoder.kernel_size = json_get<int>(enc, "kernel_size", spec.encoder.kernel_size);
    spec.encoder.convs_per_level =
        json_get<int>(enc, "convs_per_level", spec.encoder.convs_per_level);
    spec.encoder.dilation = json_get<int>(enc, "dilation", spec.encoder.dilation);
    spec.encoder.levels = json_get<int>(enc, "levels", spec.encoder.levels);
    spec.encoder.first_kernel = json_get<int>(enc, "first_kernel", spec.encoder.first_kernel);
    spec.encoder.channels_per_level =
        json_get<std::vector<int>>(enc, "channels_per_level", spec.encoder.channels_per_level);
  }
  spec.max_displacement = json_get<int>(obj, "max_displacement", spec.max_displacement);
  spec.redirect_channels = json_get<int>(obj, "redirect_channels", spec.redirect_channels);
  spec.decoder_levels = json_get<int>(obj, "decoder_levels", spec.decoder_levels);
  spec.channel_scale = json_get<double>(obj, "channel_scale", spec.channel_scale);
  validate_spec(spec);
  return spec;
}

const Tensor& Model::param(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return p.tensor;
  throw ConfigError("model: no parameter named '" + name + "'");
}

bool Model::has_param(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return true;
  return false;
}

void Model::set_params_requires_grad(bool value) {
  for (auto& p : params) p.tensor.set_requires_grad(value);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

std::vector<Tensor> Model::encoder_forward(const Tensor& input) const {
  if (input.ndim() != 4)
    throw ShapeError("encoder: expected a 4-d input, got " + shape_string(input.shape()));
  auto layers = encoder_layers(spec.encoder, input.dim(1), spec.channel_scale);
  std::vector<Tensor> level_outputs;
  Tensor x = input;
  int cpl = spec.encoder.convs_per_level;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    int level = static_cast<int>(i) / cpl + 1;
    int pos = static_cast<int>(i) % cpl + 1;
    std::string name = "enc" + std::to_string(level) + "_" + std::to_string(pos);
    x = ops::leaky_relu(ops::conv2d(x, param(name + ".weight"), param(name + ".bias"),
                                    layers[i].stride, layers[i].padding, layers[i].dilation),
                        kLeakySlope);
    if (pos == cpl) level_outputs.push_back(x);
  }
  return level_outputs;
}

namespace {

Tensor apply_conv(const Model& m, const std::string& name, const Tensor& x, int stride,
                  int padding, bool activate) {
  Tensor y = ops::conv2d(x, m.param(name + ".weight"), m.param(name + ".bias"), stride, padding);
  return activate ? ops::leaky_relu(y, kLeakySlope) : y;
}

Tensor apply_tap(TapPoint tap, TapMode mode, const TapBank* bank, std::size_t slot,
                 std::size_t bank_size, const Tensor& value, TapBank& recorded,
                 TapPoint active_tap) {
  if (mode == TapMode::none || tap != active_tap) return value;
  if (mode == TapMode::record) {
    recorded.features.push_back(value);
    return value;
  }
  if (bank == nullptr || bank->features.size() != bank_size)
    throw ShapeError("tap replace: expected a bank of " + std::to_string(bank_size) +
                     " feature tensors for tap '" + tap_point_name(active_tap) + "'");
  const Tensor& sub = bank->features[slot];
  if (sub.shape() != value.shape())
    throw ShapeError("tap replace: bank tensor " + std::to_string(slot) + " has shape " +
                     shape_string(sub.shape()) + ", activation has shape " +
                     shape_string(value.shape()));
  recorded.features.push_back(sub);
  return sub;
}

}  // namespace

ForwardResult Model::forward_with_tap(const Tensor& in1, const Tensor& in2, TapPoint tap,
                                      TapMode mode, const TapBank* bank) const {
  bool is_flownets = spec.variant == Variant::flownets_mini;
  if (mode != TapMode::none && is_flownets && tap != TapPoint::conv3)
    throw ConfigError("tap: '" + tap_point_name(tap) + "' is not present in this variant");
  for (const Tensor* t : {&in1, &in2}) {
    if (t->ndim() != 4 || t->dim(0) != 1 || t->dim(1) != 3)
      throw ShapeError("forward: expected inputs of shape (1,3,H,W), got " +
                       shape_string(t->shape()));
  }
  if (in1.shape() != in2.shape())
    throw ShapeError("forward: frame shapes differ: " + shape_string(in1.shape()) + " vs " +
                     shape_string(in2.shape()));
  int div = 1 << (3 + spec.decoder_levels);
  int h = in1.dim(2), w = in1.dim(3);
  if (h % div != 0 || w % div != 0 || h < div || w < div)
    throw ShapeError("forward: input extents must be positive multiples of " +
                     std::to_string(div) + ", got " + std::to_string(h) + "x" + std::to_string(w));

  ForwardResult result;
  Tensor merged;
  std::vector<Tensor> f1;
  if (is_flownets) {
    Tensor stacked = ops::concat_channels({in1, in2});
    f1 = encoder_forward(stacked);
    Tensor a3 = apply_tap(tap, mode, bank, 0, 1, f1.back(), result.recorded, TapPoint::conv3);
    merged = a3;
  } else {
    f1 = encoder_forward(in1);
    std::vector<Tensor> f2 = encoder_forward(in2);
    Tensor a3 = apply_tap(tap, mode, bank, 0, 2, f1.back(), result.recorded, TapPoint::conv3);
    Tensor b3 = apply_tap(tap, mode, bank, 1, 2, f2.back(), result.recorded, TapPoint::conv3);
    Tensor corr = ops::leaky_relu(ops::correlation(a3, b3, spec.max_displacement), kLeakySlope);
    corr = apply_tap(tap, mode, bank, 0, 1, corr, result.recorded, TapPoint::corr);
    Tensor redir = apply_conv(*this, "conv_redir", a3, 1, 0, true);
    redir = apply_tap(tap, mode, bank, 0, 1, redir, result.recorded, TapPoint::conv_redir);
    merged = ops::concat_channels({corr, redir});
  }

  Tensor x = apply_conv(*this, "conv3_1", merged, 1, 1, true);
  std::vector<Tensor> skips(static_cast<std::size_t>(4 + spec.decoder_levels));
  skips[3] = x;
  for (int j = 1; j <= spec.decoder_levels; ++j) {
    std::string stage = "conv" + std::to_string(3 + j);
    x = apply_conv(*this, stage, x, 2, 1, true);
    x = apply_conv(*this, stage + "_1", x, 1, 1, true);
    skips[static_cast<std::size_t>(3 + j)] = x;
  }
  int rb = 3 + spec.decoder_levels;
  Tensor flow = apply_conv(*this, "predict_" + std::to_string(rb), x, 1, 1, false);
  result.flows.push_back(flow);
  Tensor block = x;
  for (int r = rb - 1; r >= 2; --r) {
    std::string rs = std::to_string(r);
    Tensor up = ops::leaky_relu(
        ops::transposed_conv2d(block, param("deconv_" + rs + ".weight"),
                               param("deconv_" + rs + ".bias"), 2, 1),
        kLeakySlope);
    Tensor upflow = ops::scale(ops::upsample_bilinear(flow, 2), 2.0);
    const Tensor& skip = r >= 3 ? skips[static_cast<std::size_t>(r)] : f1[1];
    block = ops::concat_channels({up, skip, upflow});
    flow = apply_conv(*this, "predict_" + rs, block, 1, 1, false);
    result.flows.push_back(flow);
  }
  result.full_res = ops::scale(ops::upsample_bilinear(flow, 4), 4.0);
  return result;
}

ForwardResult Model::forward_normalized(const Tensor& in1, const Tensor& in2) const {
  return forward_with_tap(in1, in2, TapPoint::conv3, TapMode::none, nullptr);
}

ForwardResult Model::forward(const ImagePair& pair) const {
  Tensor a = normalize_tensor(image_to_tensor(pair.frame_t), normalization);
  Tensor b = normalize_tensor(image_to_tensor(pair.frame_t1), normalization);
  return forward_normalized(a, b);
}

ForwardResult Model::forward_with_scheme(const ImagePair& pair,
                                         const NormalizationScheme& scheme) const {
  if (scheme.id != normalization.id)
    std::fprintf(stderr,
                 "warning: inference normalization '%s' differs from the scheme bound at "
                 "training ('%s')\n",
                 scheme.id.c_str(), normalization.id.c_str());
  Tensor a = normalize_tensor(image_to_tensor(pair.frame_t), scheme);
  Tensor b = normalize_tensor(image_to_tensor(pair.frame_t1), scheme);
  return forward_normalized(a, b);
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  ParamBuilder b = declare_params(spec);
  Model m;
  m.spec = spec;
  m.init_seed = seed;
  Rng rng(seed);
  for (std::size_t i = 0; i < b.params.size(); ++i) {
    Tensor& t = b.params[i].tensor;
    if (b.fan_ins[i] > 0) {
      double std_dev = std::sqrt(2.0 / b.fan_ins[i]);
      for (double& v : t.values()) v = rng.normal(0.0, std_dev);
    }
    t.set_requires_grad(true);
  }
  m.params = std::move(b.params);
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["spec"] = model_spec_to_json(model.spec);
  header["seed"] = model.init_seed;
  header["normalization"] = {{"id", model.normalization.id},
                             {"channel_means", model.normalization.channel_means}};
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : model.params)
    manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  header["params"] = manifest;
  std::string header_str = header.dump();

  std::string out;
  out.append(kCheckpointMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(header_str.size()));
  out += header_str;
  for (const auto& p : model.params)
    for (double v : p.tensor.values()) put_f64(out, v);
  write_text_file(path, out);
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::string buf = read_text_file(path);
  if (buf.size() < 8 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
    throw IoError("checkpoint " + path.string() + ": magic check failed (expected PFCP)");
  std::uint32_t header_len = get_u32(buf, 4);
  if (buf.size() < 8 + static_cast<std::size_t>(header_len))
    throw IoError("checkpoint " + path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.substr(8, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + path.string() + ": bad header: " + e.what());
  }
  if (json_get<int>(header, "format_version", -1) != kCheckpointVersion)
    throw IoError("checkpoint " + path.string() + ": unsupported format version");

  Model m = build_structure(model_spec_from_json(header.at("spec")));
  m.init_seed = json_get<std::uint64_t>(header, "seed", 0);
  if (header.contains("normalization")) {
    const auto& n = header.at("normalization");
    m.normalization.id = json_get<std::string>(n, "id", "sym_unit");
    auto means = json_get<std::vector<double>>(n, "channel_means", {0.0, 0.0, 0.0});
    if (means.size() != 3)
      throw IoError("checkpoint " + path.string() + ": channel_means must have 3 entries");
    std::copy(means.begin(), means.end(), m.normalization.channel_means.begin());
  }
  validate_scheme(m.normalization);

  const auto& manifest = header.at("params");
  if (!manifest.is_array() || manifest.size() != m.params.size())
    throw IoError("checkpoint " + path.string() + ": parameter manifest size mismatch");
  std::size_t pos = 8 + header_len;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& entry = manifest[i];
    std::string name = entry.at("name").get<std::string>();
    std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    if (name != m.params[i].name || shape != m.params[i].tensor.shape())
      throw IoError("checkpoint " + path.string() + ": parameter '" + name +
                    "' does not match the shape derived from the spec");
    Tensor& t = m.params[i].tensor;
    std::size_t bytes = t.numel() * 8;
    if (buf.size() < pos + bytes)
      throw IoError("checkpoint " + path.string() + ": truncated parameter data");
    for (std::size_t j = 0; j < t.numel(); ++j) t.values()[j] = get_f64(buf, pos + j * 8);
    pos += bytes;
    t.set_requires_grad(true);
  }
  if (pos != buf.size())
    throw IoError("checkpoint " + path.string() + ": trailing bytes after parameter data");
  return m;
}

}  // namespace patchflow
