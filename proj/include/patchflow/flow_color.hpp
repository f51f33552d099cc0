#pragma once

#include <optional>

#include "patchflow/flow_field.hpp"
#include "patchflow/image.hpp"

namespace patchflow {

// Middlebury-style flow visualization: zero displacement is white, hue
// encodes direction on a fixed 55-entry color wheel, saturation grows with
// magnitude. Magnitudes are scaled by max_magnitude (default: the field's
// 99th-percentile magnitude); scaled radii above 1 are clamped. Invalid
// pixels render black.
Image flow_to_color(const FlowField& flow, std::optional<double> max_magnitude = std::nullopt);

// Color for one normalized displacement (|(u,v)| <= 1 maps inside the
// wheel). Exposed for the rendering tests.
void flow_wheel_color(double u, double v, double rgb_out[3]);

}  // namespace patchflow
