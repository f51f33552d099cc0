#pragma once

#include <cstdint>
#include <vector>

namespace patchflow {

// Per-pixel 2-vector displacement map with validity mask. Flow maps frame t
// to frame t+1: content at (x, y) in frame t appears at (x+u, y+v) in t+1.
struct FlowField {
  int height = 0;
  int width = 0;
  std::vector<double> u;
  std::vector<double> v;
  std::vector<std::uint8_t> valid;

  static FlowField zeros(int height, int width) {
    FlowField f;
    f.height = height;
    f.width = width;
    std::size_t n = static_cast<std::size_t>(height) * width;
    f.u.assign(n, 0.0);
    f.v.assign(n, 0.0);
    f.valid.assign(n, 1);
    return f;
  }

  std::size_t index(int y, int x) const { return static_cast<std::size_t>(y) * width + x; }
  std::size_t size() const { return u.size(); }
};

// 2x average-pool of u and v; pooled displacements divided by 2 so values are
// in the pooled resolution's pixel units. A pooled cell is valid when all
// four sources are valid (invalid sources excluded from the average).
FlowField downsample_flow_2x(const FlowField& f);

// Applies downsample_flow_2x repeatedly; factor must be a power of two.
FlowField downsample_flow(const FlowField& f, int factor);

}  // namespace patchflow
