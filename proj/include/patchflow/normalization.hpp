#pragma once

#include <array>
#include <string>
#include <utility>

#include "patchflow/image.hpp"
#include "patchflow/tensor.hpp"

namespace patchflow {

// Input normalization bound to a model at training time. sym_unit maps
// [0,1] -> [-1,1]; unit_meansub subtracts per-channel means from [0,1]
// values. Using a different scheme at inference than at training is the
// mismatch the models are sensitive to, so the id travels in checkpoints.
struct NormalizationScheme {
  std::string id = "sym_unit";  // "sym_unit" | "unit_meansub"
  std::array<double, 3> channel_means = {0.0, 0.0, 0.0};
};

// Differentiable: applies the scheme to a (N,3,H,W) tensor of [0,1] values.
Tensor normalize_tensor(const Tensor& image01, const NormalizationScheme& scheme);

std::pair<Tensor, Tensor> normalize_pair(const ImagePair& pair,
                                         const NormalizationScheme& scheme);

// Freezes per-channel means over a stream of images (used once, over the
// first samples of the training stream).
NormalizationScheme make_unit_meansub(const std::vector<Image>& images);

void validate_scheme(const NormalizationScheme& scheme);

}  // namespace patchflow
