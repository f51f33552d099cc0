#pragma once

#include <vector>

#include "patchflow/tensor.hpp"

namespace patchflow {

// Planar RGB raster; channel values live in [0,1] until normalization.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // channel-major: c*H*W + y*W + x

  static Image zeros(int height, int width) {
    Image im;
    im.height = height;
    im.width = width;
    im.data.assign(3 * static_cast<std::size_t>(height) * width, 0.0);
    return im;
  }

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  double& at(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  double at(int c, int y, int x) const {
    return data[c * plane() + static_cast<std::size_t>(y) * width + x];
  }
};

struct ImagePair {
  Image frame_t;
  Image frame_t1;
};

// (1,3,H,W) tensor with the image's planar layout.
Tensor image_to_tensor(const Image& im);
Image tensor_to_image(const Tensor& t);

}  // namespace patchflow
