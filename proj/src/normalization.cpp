#include "patchflow/normalization.hpp"

#include "patchflow/ops.hpp"
#include "patchflow/util.hpp"

namespace patchflow {

void validate_scheme(const NormalizationScheme& scheme) {
  if (scheme.id != "sym_unit" && scheme.id != "unit_meansub")
    throw ConfigError("unknown normalization scheme: " + scheme.id);
}

Tensor normalize_tensor(const Tensor& image01, const NormalizationScheme& scheme) {
  validate_scheme(scheme);
  if (image01.ndim() != 4 || image01.dim(1) != 3)
    throw ShapeError("normalize_tensor: need (N,3,H,W), got " + shape_string(image01.shape()));
  if (scheme.id == "sym_unit") return ops::affine(image01, 2.0, -1.0);
  return ops::channel_affine(image01, {1.0, 1.0, 1.0},
                             {-scheme.channel_means[0], -scheme.channel_means[1],
                              -scheme.channel_means[2]});
}

std::pair<Tensor, Tensor> normalize_pair(const ImagePair& pair,
                                         const NormalizationScheme& scheme) {
  return {normalize_tensor(image_to_tensor(pair.frame_t), scheme),
          normalize_tensor(image_to_tensor(pair.frame_t1), scheme)};
}

NormalizationScheme make_unit_meansub(const std::vector<Image>& images) {
  if (images.empty()) throw ConfigError("make_unit_meansub: empty image stream");
  NormalizationScheme s;
  s.id = "unit_meansub";
  for (int c = 0; c < 3; ++c) {
    double acc = 0.0;
    std::size_t count = 0;
    for (const Image& im : images) {
      for (std::size_t i = 0; i < im.plane(); ++i) acc += im.data[c * im.plane() + i];
      count += im.plane();
    }
    s.channel_means[static_cast<std::size_t>(c)] = acc / static_cast<double>(count);
  }
  return s;
}

}  // namespace patchflow
