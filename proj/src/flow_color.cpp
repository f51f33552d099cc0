#include "patchflow/flow_color.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace patchflow {

namespace {

// Segment sizes of the standard wheel: RY, YG, GC, CB, BM, MR.
constexpr int kRY = 15, kYG = 6, kGC = 4, kCB = 11, kBM = 13, kMR = 6;
constexpr int kCols = kRY + kYG + kGC + kCB + kBM + kMR;

struct Wheel {
  double r[kCols], g[kCols], b[kCols];
};

Wheel make_wheel() {
  Wheel w{};
  int col = 0;
  for (int i = 0; i < kRY; ++i, ++col) {
    w.r[col] = 255;
    w.g[col] = 255.0 * i / kRY;
  }
  for (int i = 0; i < kYG; ++i, ++col) {
    w.r[col] = 255 - 255.0 * i / kYG;
    w.g[col] = 255;
  }
  for (int i = 0; i < kGC; ++i, ++col) {
    w.g[col] = 255;
    w.b[col] = 255.0 * i / kGC;
  }
  for (int i = 0; i < kCB; ++i, ++col) {
    w.g[col] = 255 - 255.0 * i / kCB;
    w.b[col] = 255;
  }
  for (int i = 0; i < kBM; ++i, ++col) {
    w.b[col] = 255;
    w.r[col] = 255.0 * i / kBM;
  }
  for (int i = 0; i < kMR; ++i, ++col) {
    w.b[col] = 255 - 255.0 * i / kMR;
    w.r[col] = 255;
  }
  return w;
}

const Wheel& wheel() {
  static const Wheel w = make_wheel();
  return w;
}

}  // namespace

void flow_wheel_color(double u, double v, double rgb_out[3]) {
  const Wheel& w = wheel();
  const double rad = std::min(std::sqrt(u * u + v * v), 1.0);
  const double a = std::atan2(-v, -u) / 3.14159265358979323846;  // [-1,1]
  const double fk = (a + 1.0) / 2.0 * (kCols - 1);
  int k0 = static_cast<int>(std::floor(fk));
  if (k0 < 0) k0 = 0;
  if (k0 > kCols - 1) k0 = kCols - 1;
  const int k1 = (k0 + 1) % kCols;
  const double f = fk - k0;
  const double base[3] = {((1.0 - f) * w.r[k0] + f * w.r[k1]) / 255.0,
                          ((1.0 - f) * w.g[k0] + f * w.g[k1]) / 255.0,
                          ((1.0 - f) * w.b[k0] + f * w.b[k1]) / 255.0};
  for (int c = 0; c < 3; ++c) rgb_out[c] = 1.0 - rad * (1.0 - base[c]);
}

Image flow_to_color(const FlowField& flow, std::optional<double> max_magnitude) {
  double max_rad;
  if (max_magnitude) {
    max_rad = *max_magnitude;
  } else {
    // smallest magnitude that is >= 99% of the pixels
    std::vector<double> mags(flow.size());
    for (std::size_t i = 0; i < flow.size(); ++i)
      mags[i] = std::sqrt(flow.u[i] * flow.u[i] + flow.v[i] * flow.v[i]);
    std::sort(mags.begin(), mags.end());
    const std::size_t n = mags.size();
    std::size_t idx = n == 0 ? 0 : static_cast<std::size_t>(std::ceil(0.99 * n)) - 1;
    if (idx >= n) idx = n - 1;
    max_rad = n == 0 ? 0.0 : mags[idx];
  }
  if (!(max_rad > 0.0)) max_rad = 1.0;

  Image im = Image::zeros(flow.height, flow.width);
  double rgb[3];
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x) {
      const std::size_t i = flow.index(y, x);
      if (!flow.valid[i]) continue;  // stays black
      flow_wheel_color(flow.u[i] / max_rad, flow.v[i] / max_rad, rgb);
      for (int c = 0; c < 3; ++c) im.at(c, y, x) = rgb[c];
    }
  return im;
}

}  // namespace patchflow
