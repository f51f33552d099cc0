#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchflow/image.hpp"
#include "patchflow/normalization.hpp"
#include "patchflow/tensor.hpp"

namespace patchflow {

// Encoder family: three resolution levels; the first conv of every level has
// stride 2 and the very first conv of the network is always 7x7. Each level
// holds convs_per_level convolutions sharing that level's channel count.
struct EncoderSpec {
  int kernel_size = 5;  // 3 or 5
  int convs_per_level = 1;
  int dilation = 1;
  int levels = 3;
  int first_kernel = 7;
  std::vector<int> channels_per_level = {16, 32, 64};
};

enum class Variant { flownetc_mini, robust_flownetc_mini, flownets_mini };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ModelSpec {
  Variant variant = Variant::flownetc_mini;
  EncoderSpec encoder;
  int max_displacement = 4;   // correlation range at 1/8 resolution
  int redirect_channels = 8;  // 1x1 redirect branch width
  int decoder_levels = 1;     // extra stride-2 stages below 1/8
  double channel_scale = 1.0; // multiplies every channel count
};

// Presets: flownetc_mini = kernel 5 / 1 conv per level (receptive field 31),
// robust_flownetc_mini = kernel 3 / 4 convs per level (receptive field 103),
// flownets_mini = the encoder of flownetc_mini on a stacked 6-channel input.
ModelSpec default_spec(Variant v);

nlohmann::json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& obj);

// Rounded channel width after applying the shrink factor (at least 1).
int scaled_channels(int base, double scale);

struct EncoderLayer {
  int kernel = 3;
  int stride = 1;
  int dilation = 1;
  int padding = 1;
  int in_channels = 0;
  int out_channels = 0;
};

// The single source of truth for the encoder structure; both the receptive
// field formula and the parameter builder walk this list.
std::vector<EncoderLayer> encoder_layers(const EncoderSpec& spec, int input_channels,
                                         double channel_scale);

// Side length (input pixels) of the influence region of one unit of the
// final encoder level: rf += (dilation*(k-1)) * jump per layer, jump
// doubling after every stride-2 layer.
int receptive_field(const EncoderSpec& spec);

struct Param {
  std::string name;
  Tensor tensor;
};

enum class TapPoint { conv3, conv_redir, corr };
enum class TapMode { none, record, replace };

std::string tap_point_name(TapPoint t);
TapPoint tap_point_from_name(const std::string& name);

// Activations at a tap. conv3 holds both frames' level-3 features (in that
// order); conv_redir and corr hold a single tensor.
struct TapBank {
  std::vector<Tensor> features;
};

struct ForwardResult {
  // Coarse-to-fine predictions, finest at 1/4 input resolution, each in its
  // own scale's pixel units.
  std::vector<Tensor> flows;
  // Finest prediction bilinearly upsampled x4 with magnitudes x4.
  Tensor full_res;
  // Filled when a tap is active (replace mode records the substituted
  // activation, so banked and recorded tensors agree bit-for-bit).
  TapBank recorded;
};

class Model {
 public:
  ModelSpec spec;
  std::uint64_t init_seed = 0;
  NormalizationScheme normalization;
  std::vector<Param> params;  // declaration order; serialized in this order

  const Tensor& param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  void set_params_requires_grad(bool value);
  std::size_t parameter_count() const;

  // Normalizes with the bound scheme and runs the net.
  ForwardResult forward(const ImagePair& pair) const;
  // Differentiable core on already-normalized input tensors (1,3,H,W each).
  ForwardResult forward_normalized(const Tensor& in1, const Tensor& in2) const;
  ForwardResult forward_with_tap(const Tensor& in1, const Tensor& in2, TapPoint tap, TapMode mode,
                                 const TapBank* bank) const;
  // Per-level encoder activations (after activation functions). For
  // flownets_mini pass the stacked 6-channel tensor.
  std::vector<Tensor> encoder_forward(const Tensor& input) const;

  // Emits a stderr warning when the scheme id differs from the bound one.
  ForwardResult forward_with_scheme(const ImagePair& pair,
                                    const NormalizationScheme& scheme) const;
};

Model build_model(const ModelSpec& spec, std::uint64_t seed);

// Binary checkpoint: magic "PFCP", little-endian u32 JSON header length, the
// JSON header (format version, spec, seed, normalization, parameter
// manifest), then raw little-endian f64 parameter buffers in declaration
// order.
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace patchflow
