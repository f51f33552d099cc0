#pragma once

#include <vector>

#include "patchflow/flow_field.hpp"
#include "patchflow/tensor.hpp"

namespace patchflow {
namespace ops {

// All tensors are NCHW unless stated otherwise. Every op is differentiable:
// when a tape is active and an input tracks gradients, the op records its
// backward rule onto the tape.

// weight (out_ch, in_ch, k, k). Output extent per axis:
// floor((H + 2*padding - dilation*(k-1) - 1) / stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding, int dilation = 1);

// weight (in_ch, out_ch, k, k). Output extent: (H-1)*stride - 2*padding + k.
Tensor transposed_conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                         int stride, int padding);

// max(x, slope*x), slope in (0,1).
Tensor leaky_relu(const Tensor& input, double slope);

// Pointwise feature correlation over displacements |dx|,|dy| <= max_displacement.
// Output channel (dy+D)*(2D+1)+(dx+D) holds (1/C) * sum_c f1[c,y,x]*f2[c,y+dy,x+dx];
// displaced positions outside the frame contribute zero.
Tensor correlation(const Tensor& f1, const Tensor& f2, int max_displacement);

// Integer-factor bilinear upsampling. Source position of output pixel i is
// i/factor; fractional tails past the last source pixel clamp to the edge,
// so input values are reproduced exactly at output index i*factor.
Tensor upsample_bilinear(const Tensor& input, int factor);

Tensor concat_channels(const std::vector<Tensor>& inputs);

// Elementwise; shapes must match.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// a*t + b applied elementwise.
Tensor affine(const Tensor& t, double a, double b);
inline Tensor scale(const Tensor& t, double a) { return affine(t, a, 0.0); }

// Per-channel affine: out[c] = scale[c]*in[c] + shift[c]. Input NCHW.
Tensor channel_affine(const Tensor& t, const std::vector<double>& scales,
                      const std::vector<double>& shifts);

Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);

// Mean over valid pixels of the Euclidean distance between predicted flow
// (N,2,H,W; N must be 1) and the target field. Backward uses d/max(|d|,eps)
// so the exact-match case has zero, not infinite, gradient.
Tensor epe_loss(const Tensor& pred, const FlowField& target, double eps = 1e-12);

// Mean over pixels of the cosine between predicted flow vectors (N,2,H,W)
// and a constant reference field; norms are clamped below at eps.
Tensor cosine_similarity(const Tensor& pred, const FlowField& reference, double eps = 1e-8);

// FlowField <-> Tensor (N=1). Tensor layout (1,2,H,W), channel 0 = u.
Tensor flow_to_tensor(const FlowField& f);
FlowField tensor_to_flow(const Tensor& t);

}  // namespace ops
}  // namespace patchflow
