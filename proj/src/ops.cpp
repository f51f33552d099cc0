#include "patchflow/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "patchflow/util.hpp"

namespace patchflow {
namespace ops {

namespace {

bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void check_4d(const Tensor& t, const char* op, const char* name) {
  if (t.ndim() != 4)
    throw ShapeError(std::string(op) + ": " + name + " must be 4-D (N,C,H,W), got " +
                     shape_string(t.shape()));
}

// First output index whose source index offset*1 + out*stride is >= 0.
int first_valid(int offset, int stride) {
  return offset >= 0 ? 0 : (-offset + stride - 1) / stride;
}

// Last output index whose source index stays <= limit; -1 when empty.
int last_valid(int offset, int stride, int limit, int out_last) {
  int num = limit - offset;
  if (num < 0) return -1;
  return std::min(num / stride, out_last);
}

std::vector<float> to_f32(const std::vector<double>& v) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return out;
}

void accumulate(std::vector<double>& dst, const std::vector<float>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += static_cast<double>(src[i]);
}

void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

struct ConvDims {
  int batch, in_ch, in_h, in_w;
  int out_ch, k, out_h, out_w;
  int stride, pad, dil;
};

template <typename T>
void conv2d_forward_impl(const T* in, const T* w, const T* bias, T* out, const ConvDims& d) {
  const std::size_t in_plane_sz = static_cast<std::size_t>(d.in_h) * d.in_w;
  const std::size_t out_plane_sz = static_cast<std::size_t>(d.out_h) * d.out_w;
  for (int n = 0; n < d.batch; ++n) {
    const T* in_n = in + static_cast<std::size_t>(n) * d.in_ch * in_plane_sz;
    T* out_n = out + static_cast<std::size_t>(n) * d.out_ch * out_plane_sz;
    for (int oc = 0; oc < d.out_ch; ++oc) {
      T* out_plane = out_n + oc * out_plane_sz;
      const T bv = bias[oc];
      for (std::size_t i = 0; i < out_plane_sz; ++i) out_plane[i] = bv;
      for (int ic = 0; ic < d.in_ch; ++ic) {
        const T* in_plane = in_n + ic * in_plane_sz;
        const T* w_base = w + ((static_cast<std::size_t>(oc) * d.in_ch + ic) * d.k) * d.k;
        for (int ky = 0; ky < d.k; ++ky) {
          const int off_y = ky * d.dil - d.pad;
          const int lo_y = first_valid(off_y, d.stride);
          const int hi_y = last_valid(off_y, d.stride, d.in_h - 1, d.out_h - 1);
          for (int kx = 0; kx < d.k; ++kx) {
            const T wv = w_base[ky * d.k + kx];
            const int off_x = kx * d.dil - d.pad;
            const int lo_x = first_valid(off_x, d.stride);
            const int hi_x = last_valid(off_x, d.stride, d.in_w - 1, d.out_w - 1);
            for (int oy = lo_y; oy <= hi_y; ++oy) {
              const T* in_row = in_plane + static_cast<std::size_t>(oy * d.stride + off_y) * d.in_w;
              T* out_row = out_plane + static_cast<std::size_t>(oy) * d.out_w;
              if (d.stride == 1) {
                const T* ip = in_row + off_x;
                for (int ox = lo_x; ox <= hi_x; ++ox) out_row[ox] += wv * ip[ox];
              } else {
                for (int ox = lo_x; ox <= hi_x; ++ox)
                  out_row[ox] += wv * in_row[ox * d.stride + off_x];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input_impl(const T* gout, const T* w, T* gin, const ConvDims& d) {
  const std::size_t in_plane_sz = static_cast<std::size_t>(d.in_h) * d.in_w;
  const std::size_t out_plane_sz = static_cast<std::size_t>(d.out_h) * d.out_w;
  for (int n = 0; n < d.batch; ++n) {
    const T* gout_n = gout + static_cast<std::size_t>(n) * d.out_ch * out_plane_sz;
    T* gin_n = gin + static_cast<std::size_t>(n) * d.in_ch * in_plane_sz;
    for (int ic = 0; ic < d.in_ch; ++ic) {
      T* gin_plane = gin_n + ic * in_plane_sz;
      for (int oc = 0; oc < d.out_ch; ++oc) {
        const T* gout_plane = gout_n + oc * out_plane_sz;
        const T* w_base = w + ((static_cast<std::size_t>(oc) * d.in_ch + ic) * d.k) * d.k;
        for (int ky = 0; ky < d.k; ++ky) {
          const int off_y = ky * d.dil - d.pad;
          const int lo_y = first_valid(off_y, d.stride);
          const int hi_y = last_valid(off_y, d.stride, d.in_h - 1, d.out_h - 1);
          for (int kx = 0; kx < d.k; ++kx) {
            const T wv = w_base[ky * d.k + kx];
            const int off_x = kx * d.dil - d.pad;
            const int lo_x = first_valid(off_x, d.stride);
            const int hi_x = last_valid(off_x, d.stride, d.in_w - 1, d.out_w - 1);
            for (int oy = lo_y; oy <= hi_y; ++oy) {
              T* gin_row = gin_plane + static_cast<std::size_t>(oy * d.stride + off_y) * d.in_w;
              const T* gout_row = gout_plane + static_cast<std::size_t>(oy) * d.out_w;
              if (d.stride == 1) {
                T* gp = gin_row + off_x;
                for (int ox = lo_x; ox <= hi_x; ++ox) gp[ox] += wv * gout_row[ox];
              } else {
                for (int ox = lo_x; ox <= hi_x; ++ox)
                  gin_row[ox * d.stride + off_x] += wv * gout_row[ox];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight_impl(const T* gout, const T* in, T* gw, T* gb, const ConvDims& d) {
  const std::size_t in_plane_sz = static_cast<std::size_t>(d.in_h) * d.in_w;
  const std::size_t out_plane_sz = static_cast<std::size_t>(d.out_h) * d.out_w;
  for (int n = 0; n < d.batch; ++n) {
    const T* in_n = in + static_cast<std::size_t>(n) * d.in_ch * in_plane_sz;
    const T* gout_n = gout + static_cast<std::size_t>(n) * d.out_ch * out_plane_sz;
    for (int oc = 0; oc < d.out_ch; ++oc) {
      const T* gout_plane = gout_n + oc * out_plane_sz;
      T acc_b = T(0);
      for (std::size_t i = 0; i < out_plane_sz; ++i) acc_b += gout_plane[i];
      gb[oc] += acc_b;
      for (int ic = 0; ic < d.in_ch; ++ic) {
        const T* in_plane = in_n + ic * in_plane_sz;
        T* gw_base = gw + ((static_cast<std::size_t>(oc) * d.in_ch + ic) * d.k) * d.k;
        for (int ky = 0; ky < d.k; ++ky) {
          const int off_y = ky * d.dil - d.pad;
          const int lo_y = first_valid(off_y, d.stride);
          const int hi_y = last_valid(off_y, d.stride, d.in_h - 1, d.out_h - 1);
          for (int kx = 0; kx < d.k; ++kx) {
            const int off_x = kx * d.dil - d.pad;
            const int lo_x = first_valid(off_x, d.stride);
            const int hi_x = last_valid(off_x, d.stride, d.in_w - 1, d.out_w - 1);
            T acc = T(0);
            for (int oy = lo_y; oy <= hi_y; ++oy) {
              const T* in_row = in_plane + static_cast<std::size_t>(oy * d.stride + off_y) * d.in_w;
              const T* gout_row = gout_plane + static_cast<std::size_t>(oy) * d.out_w;
              if (d.stride == 1) {
                const T* ip = in_row + off_x;
                for (int ox = lo_x; ox <= hi_x; ++ox) acc += gout_row[ox] * ip[ox];
              } else {
                for (int ox = lo_x; ox <= hi_x; ++ox)
                  acc += gout_row[ox] * in_row[ox * d.stride + off_x];
              }
            }
            gw_base[ky * d.k + kx] += acc;
          }
        }
      }
    }
  }
}

struct TconvDims {
  int batch, in_ch, in_h, in_w;
  int out_ch, k, out_h, out_w;
  int stride, pad;
};

template <typename T>
void tconv_forward_impl(const T* in, const T* w, const T* bias, T* out, const TconvDims& d) {
  const std::size_t in_plane_sz = static_cast<std::size_t>(d.in_h) * d.in_w;
  const std::size_t out_plane_sz = static_cast<std::size_t>(d.out_h) * d.out_w;
  for (int n = 0; n < d.batch; ++n) {
    const T* in_n = in + static_cast<std::size_t>(n) * d.in_ch * in_plane_sz;
    T* out_n = out + static_cast<std::size_t>(n) * d.out_ch * out_plane_sz;
    for (int oc = 0; oc < d.out_ch; ++oc) {
      T* out_plane = out_n + oc * out_plane_sz;
      const T bv = bias[oc];
      for (std::size_t i = 0; i < out_plane_sz; ++i) out_plane[i] = bv;
      for (int ic = 0; ic < d.in_ch; ++ic) {
        const T* in_plane = in_n + ic * in_plane_sz;
        const T* w_base = w + ((static_cast<std::size_t>(ic) * d.out_ch + oc) * d.k) * d.k;
        for (int ky = 0; ky < d.k; ++ky) {
          const int off_y = ky - d.pad;
          const int lo_y = first_valid(off_y, d.stride);
          const int hi_y = last_valid(off_y, d.stride, d.out_h - 1, d.in_h - 1);
          for (int kx = 0; kx < d.k; ++kx) {
            const T wv = w_base[ky * d.k + kx];
            const int off_x = kx - d.pad;
            const int lo_x = first_valid(off_x, d.stride);
            const int hi_x = last_valid(off_x, d.stride, d.out_w - 1, d.in_w - 1);
            for (int iy = lo_y; iy <= hi_y; ++iy) {
              const T* in_row = in_plane + static_cast<std::size_t>(iy) * d.in_w;
              T* out_row = out_plane + static_cast<std::size_t>(iy * d.stride + off_y) * d.out_w;
              for (int ix = lo_x; ix <= hi_x; ++ix)
                out_row[ix * d.stride + off_x] += wv * in_row[ix];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void tconv_backward_input_impl(const T* gout, const T* w, T* gin, const TconvDims& d) {
  const std::size_t in_plane_sz = static_cast<std::size_t>(d.in_h) * d.in_w;
  const std::size_t out_plane_sz = static_cast<std::size_t>(d.out_h) * d.out_w;
  for (int n = 0; n < d.batch; ++n) {
    const T* gout_n = gout + static_cast<std::size_t>(n) * d.out_ch * out_plane_sz;
    T* gin_n = gin + static_cast<std::size_t>(n) * d.in_ch * in_plane_sz;
    for (int ic = 0; ic < d.in_ch; ++ic) {
      T* gin_plane = gin_n + ic * in_plane_sz;
      for (int oc = 0; oc < d.out_ch; ++oc) {
        const T* gout_plane = gout_n + oc * out_plane_sz;
        const T* w_base = w + ((static_cast<std::size_t>(ic) * d.out_ch + oc) * d.k) * d.k;
        for (int ky = 0; ky < d.k; ++ky) {
          const int off_y = ky - d.pad;
          const int lo_y = first_valid(off_y, d.stride);
          const int hi_y = last_valid(off_y, d.stride, d.out_h - 1, d.in_h - 1);
          for (int kx = 0; kx < d.k; ++kx) {
            const T wv = w_base[ky * d.k + kx];
            const int off_x = kx - d.pad;
            const int lo_x = first_valid(off_x, d.stride);
            const int hi_x = last_valid(off_x, d.stride, d.out_w - 1, d.in_w - 1);
            for (int iy = lo_y; iy <= hi_y; ++iy) {
              T* gin_row = gin_plane + static_cast<std::size_t>(iy) * d.in_w;
              const T* gout_row =
                  gout_plane + static_cast<std::size_t>(iy * d.stride + off_y) * d.out_w;
              for (int ix = lo_x; ix <= hi_x; ++ix)
                gin_row[ix] += wv * gout_row[ix * d.stride + off_x];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void tconv_backward_weight_impl(const T* gout, const T* in, T* gw, T* gb, const TconvDims& d) {
  const std::size_t in_plane_sz = static_cast<std::size_t>(d.in_h) * d.in_w;
  const std::size_t out_plane_sz = static_cast<std::size_t>(d.out_h) * d.out_w;
  for (int n = 0; n < d.batch; ++n) {
    const T* in_n = in + static_cast<std::size_t>(n) * d.in_ch * in_plane_sz;
    const T* gout_n = gout + static_cast<std::size_t>(n) * d.out_ch * out_plane_sz;
    for (int oc = 0; oc < d.out_ch; ++oc) {
      const T* gout_plane = gout_n + oc * out_plane_sz;
      T acc_b = T(0);
      for (std::size_t i = 0; i < out_plane_sz; ++i) acc_b += gout_plane[i];
      gb[oc] += acc_b;
      for (int ic = 0; ic < d.in_ch; ++ic) {
        const T* in_plane = in_n + ic * in_plane_sz;
        T* gw_base = gw + ((static_cast<std::size_t>(ic) * d.out_ch + oc) * d.k) * d.k;
        for (int ky = 0; ky < d.k; ++ky) {
          const int off_y = ky - d.pad;
          const int lo_y = first_valid(off_y, d.stride);
          const int hi_y = last_valid(off_y, d.stride, d.out_h - 1, d.in_h - 1);
          for (int kx = 0; kx < d.k; ++kx) {
            const int off_x = kx - d.pad;
            const int lo_x = first_valid(off_x, d.stride);
            const int hi_x = last_valid(off_x, d.stride, d.out_w - 1, d.in_w - 1);
            T acc = T(0);
            for (int iy = lo_y; iy <= hi_y; ++iy) {
              const T* in_row = in_plane + static_cast<std::size_t>(iy) * d.in_w;
              const T* gout_row =
                  gout_plane + static_cast<std::size_t>(iy * d.stride + off_y) * d.out_w;
              for (int ix = lo_x; ix <= hi_x; ++ix)
                acc += in_row[ix] * gout_row[ix * d.stride + off_x];
            }
            gw_base[ky * d.k + kx] += acc;
          }
        }
      }
    }
  }
}

template <typename T>
void correlation_forward_impl(const T* f1, const T* f2, T* out, int batch, int ch, int h, int w,
                              int max_disp) {
  const int side = 2 * max_disp + 1;
  const std::size_t plane_sz = static_cast<std::size_t>(h) * w;
  const T inv_c = T(1) / static_cast<T>(ch);
  for (int n = 0; n < batch; ++n) {
    const T* f1_n = f1 + static_cast<std::size_t>(n) * ch * plane_sz;
    const T* f2_n = f2 + static_cast<std::size_t>(n) * ch * plane_sz;
    T* out_n = out + static_cast<std::size_t>(n) * side * side * plane_sz;
    for (int dy = -max_disp; dy <= max_disp; ++dy) {
      for (int dx = -max_disp; dx <= max_disp; ++dx) {
        T* out_plane = out_n + static_cast<std::size_t>((dy + max_disp) * side + (dx + max_disp)) *
                                   plane_sz;
        for (std::size_t i = 0; i < plane_sz; ++i) out_plane[i] = T(0);
        const int y0 = std::max(0, -dy), y1 = std::min(h - 1, h - 1 - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(w - 1, w - 1 - dx);
        for (int c = 0; c < ch; ++c) {
          const T* p1 = f1_n + c * plane_sz;
          const T* p2 = f2_n + c * plane_sz;
          for (int y = y0; y <= y1; ++y) {
            const T* r1 = p1 + static_cast<std::size_t>(y) * w;
            const T* r2 = p2 + static_cast<std::size_t>(y + dy) * w + dx;
            T* ro = out_plane + static_cast<std::size_t>(y) * w;
            for (int x = x0; x <= x1; ++x) ro[x] += r1[x] * r2[x];
          }
        }
        for (std::size_t i = 0; i < plane_sz; ++i) out_plane[i] *= inv_c;
      }
    }
  }
}

template <typename T>
void correlation_backward_impl(const T* gout, const T* f1, const T* f2, T* g1, T* g2, int batch,
                               int ch, int h, int w, int max_disp) {
  const int side = 2 * max_disp + 1;
  const std::size_t plane_sz = static_cast<std::size_t>(h) * w;
  const T inv_c = T(1) / static_cast<T>(ch);
  for (int n = 0; n < batch; ++n) {
    const T* f1_n = f1 + static_cast<std::size_t>(n) * ch * plane_sz;
    const T* f2_n = f2 + static_cast<std::size_t>(n) * ch * plane_sz;
    T* g1_n = g1 + static_cast<std::size_t>(n) * ch * plane_sz;
    T* g2_n = g2 + static_cast<std::size_t>(n) * ch * plane_sz;
    const T* gout_n = gout + static_cast<std::size_t>(n) * side * side * plane_sz;
    for (int dy = -max_disp; dy <= max_disp; ++dy) {
      for (int dx = -max_disp; dx <= max_disp; ++dx) {
        const T* gout_plane =
            gout_n +
            static_cast<std::size_t>((dy + max_disp) * side + (dx + max_disp)) * plane_sz;
        const int y0 = std::max(0, -dy), y1 = std::min(h - 1, h - 1 - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(w - 1, w - 1 - dx);
        for (int c = 0; c < ch; ++c) {
          const T* p1 = f1_n + c * plane_sz;
          const T* p2 = f2_n + c * plane_sz;
          T* q1 = g1_n + c * plane_sz;
          T* q2 = g2_n + c * plane_sz;
          for (int y = y0; y <= y1; ++y) {
            const T* go = gout_plane + static_cast<std::size_t>(y) * w;
            const T* r1 = p1 + static_cast<std::size_t>(y) * w;
            const T* r2 = p2 + static_cast<std::size_t>(y + dy) * w + dx;
            T* s1 = q1 + static_cast<std::size_t>(y) * w;
            T* s2 = q2 + static_cast<std::size_t>(y + dy) * w + dx;
            for (int x = x0; x <= x1; ++x) {
              const T g = go[x] * inv_c;
              s1[x] += g * r2[x];
              s2[x] += g * r1[x];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding, int dilation) {
  check_4d(input, "conv2d", "input");
  check_4d(weight, "conv2d", "weight");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be non-negative");
  if (dilation < 1) throw std::invalid_argument("conv2d: dilation must be positive");
  if (weight.dim(2) != weight.dim(3))
    throw ShapeError("conv2d: kernel must be square, got " + shape_string(weight.shape()));
  if (input.dim(1) != weight.dim(1))
    throw ShapeError("conv2d: input channels (C=" + std::to_string(input.dim(1)) +
                     ") do not match weight in_channels (" + std::to_string(weight.dim(1)) + ")");
  if (!(bias.ndim() == 1 && bias.dim(0) == weight.dim(0)))
    throw ShapeError("conv2d: bias shape " + shape_string(bias.shape()) +
                     " does not match out_channels (" + std::to_string(weight.dim(0)) + ")");

  ConvDims d;
  d.batch = input.dim(0);
  d.in_ch = input.dim(1);
  d.in_h = input.dim(2);
  d.in_w = input.dim(3);
  d.out_ch = weight.dim(0);
  d.k = weight.dim(2);
  d.stride = stride;
  d.pad = padding;
  d.dil = dilation;
  const int span = dilation * (d.k - 1) + 1;
  d.out_h = (d.in_h + 2 * padding - span) / stride + 1;
  d.out_w = (d.in_w + 2 * padding - span) / stride + 1;
  if (d.in_h + 2 * padding < span || d.in_w + 2 * padding < span)
    throw ShapeError("conv2d: effective kernel " + std::to_string(span) +
                     " exceeds padded input " + std::to_string(d.in_h + 2 * padding) + "x" +
                     std::to_string(d.in_w + 2 * padding));

  Tensor out = Tensor::zeros({d.batch, d.out_ch, d.out_h, d.out_w});
  if (compute_precision() == Precision::f32) {
    auto in32 = to_f32(input.values());
    auto w32 = to_f32(weight.values());
    auto b32 = to_f32(bias.values());
    std::vector<float> out32(out.numel());
    conv2d_forward_impl<float>(in32.data(), w32.data(), b32.data(), out32.data(), d);
    for (std::size_t i = 0; i < out32.size(); ++i) out.data()[i] = out32[i];
  } else {
    conv2d_forward_impl<double>(input.data(), weight.data(), bias.data(), out.data(), d);
  }

  if (tracing({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    Tensor in_t = input, w_t = weight, b_t = bias, out_t = out;
    if (in_t.requires_grad()) in_t.ensure_grad();
    if (w_t.requires_grad()) w_t.ensure_grad();
    if (b_t.requires_grad()) b_t.ensure_grad();
    Tape::active()->record([in_t, w_t, b_t, out_t, d]() mutable {
      if (compute_precision() == Precision::f32) {
        auto g32 = to_f32(out_t.grad());
        if (in_t.requires_grad()) {
          auto w32 = to_f32(w_t.values());
          std::vector<float> gin(in_t.numel(), 0.0f);
          conv2d_backward_input_impl<float>(g32.data(), w32.data(), gin.data(), d);
          accumulate(in_t.grad(), gin);
        }
        if (w_t.requires_grad() || b_t.requires_grad()) {
          auto in32 = to_f32(in_t.values());
          std::vector<float> gw(w_t.numel(), 0.0f), gb(b_t.numel(), 0.0f);
          conv2d_backward_weight_impl<float>(g32.data(), in32.data(), gw.data(), gb.data(), d);
          if (w_t.requires_grad()) accumulate(w_t.grad(), gw);
          if (b_t.requires_grad()) accumulate(b_t.grad(), gb);
        }
      } else {
        if (in_t.requires_grad()) {
          std::vector<double> gin(in_t.numel(), 0.0);
          conv2d_backward_input_impl<double>(out_t.grad_data(), w_t.data(), gin.data(), d);
          accumulate(in_t.grad(), gin);
        }
        if (w_t.requires_grad() || b_t.requires_grad()) {
          std::vector<double> gw(w_t.numel(), 0.0), gb(b_t.numel(), 0.0);
          conv2d_backward_weight_impl<double>(out_t.grad_data(), in_t.data(), gw.data(), gb.data(),
                                              d);
          if (w_t.requires_grad()) accumulate(w_t.grad(), gw);
          if (b_t.requires_grad()) accumulate(b_t.grad(), gb);
        }
      }
    });
  }
  return out;
}

Tensor transposed_conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
                         int padding) {
  check_4d(input, "transposed_conv2d", "input");
  check_4d(weight, "transposed_conv2d", "weight");
  if (stride < 1) throw std::invalid_argument("transposed_conv2d: stride must be positive");
  if (padding < 0) throw std::invalid_argument("transposed_conv2d: padding must be non-negative");
  if (weight.dim(2) != weight.dim(3))
    throw ShapeError("transposed_conv2d: kernel must be square, got " +
                     shape_string(weight.shape()));
  if (input.dim(1) != weight.dim(0))
    throw ShapeError("transposed_conv2d: input channels (C=" + std::to_string(input.dim(1)) +
                     ") do not match weight in_channels (" + std::to_string(weight.dim(0)) + ")");
  if (!(bias.ndim() == 1 && bias.dim(0) == weight.dim(1)))
    throw ShapeError("transposed_conv2d: bias shape " + shape_string(bias.shape()) +
                     " does not match out_channels (" + std::to_string(weight.dim(1)) + ")");

  TconvDims d;
  d.batch = input.dim(0);
  d.in_ch = input.dim(1);
  d.in_h = input.dim(2);
  d.in_w = input.dim(3);
  d.out_ch = weight.dim(1);
  d.k = weight.dim(2);
  d.stride = stride;
  d.pad = padding;
  d.out_h = (d.in_h - 1) * stride - 2 * padding + d.k;
  d.out_w = (d.in_w - 1) * stride - 2 * padding + d.k;
  if (d.out_h <= 0 || d.out_w <= 0)
    throw ShapeError("transposed_conv2d: output extent would be non-positive (" +
                     std::to_string(d.out_h) + "x" + std::to_string(d.out_w) + ")");

  Tensor out = Tensor::zeros({d.batch, d.out_ch, d.out_h, d.out_w});
  if (compute_precision() == Precision::f32) {
    auto in32 = to_f32(input.values());
    auto w32 = to_f32(weight.values());
    auto b32 = to_f32(bias.values());
    std::vector<float> out32(out.numel());
    tconv_forward_impl<float>(in32.data(), w32.data(), b32.data(), out32.data(), d);
    for (std::size_t i = 0; i < out32.size(); ++i) out.data()[i] = out32[i];
  } else {
    tconv_forward_impl<double>(input.data(), weight.data(), bias.data(), out.data(), d);
  }

  if (tracing({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    Tensor in_t = input, w_t = weight, b_t = bias, out_t = out;
    if (in_t.requires_grad()) in_t.ensure_grad();
    if (w_t.requires_grad()) w_t.ensure_grad();
    if (b_t.requires_grad()) b_t.ensure_grad();
    Tape::active()->record([in_t, w_t, b_t, out_t, d]() mutable {
      if (compute_precision() == Precision::f32) {
        auto g32 = to_f32(out_t.grad());
        if (in_t.requires_grad()) {
          auto w32 = to_f32(w_t.values());
          std::vector<float> gin(in_t.numel(), 0.0f);
          tconv_backward_input_impl<float>(g32.data(), w32.data(), gin.data(), d);
          accumulate(in_t.grad(), gin);
        }
        if (w_t.requires_grad() || b_t.requires_grad()) {
          auto in32 = to_f32(in_t.values());
          std::vector<float> gw(w_t.numel(), 0.0f), gb(b_t.numel(), 0.0f);
          tconv_backward_weight_impl<float>(g32.data(), in32.data(), gw.data(), gb.data(), d);
          if (w_t.requires_grad()) accumulate(w_t.grad(), gw);
          if (b_t.requires_grad()) accumulate(b_t.grad(), gb);
        }
      } else {
        if (in_t.requires_grad()) {
          std::vector<double> gin(in_t.numel(), 0.0);
          tconv_backward_input_impl<double>(out_t.grad_data(), w_t.data(), gin.data(), d);
          accumulate(in_t.grad(), gin);
        }
        if (w_t.requires_grad() || b_t.requires_grad()) {
          std::vector<double> gw(w_t.numel(), 0.0), gb(b_t.numel(), 0.0);
          tconv_backward_weight_impl<double>(out_t.grad_data(), in_t.data(), gw.data(), gb.data(),
                                             d);
          if (w_t.requires_grad()) accumulate(w_t.grad(), gw);
          if (b_t.requires_grad()) accumulate(b_t.grad(), gb);
        }
      }
    });
  }
  return out;
}

Tensor leaky_relu(const Tensor& input, double slope) {
  if (!(slope > 0.0 && slope < 1.0))
    throw std::invalid_argument("leaky_relu: slope must be in (0,1), got " + format_double(slope));
  Tensor out = Tensor::zeros(input.shape());
  const double* in = input.data();
  double* o = out.data();
  for (std::size_t i = 0; i < input.numel(); ++i) o[i] = in[i] >= 0.0 ? in[i] : slope * in[i];
  if (tracing({&input})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    Tensor in_t = input, out_t = out;
    in_t.ensure_grad();
    Tape::active()->record([in_t, out_t, slope]() mutable {
      const double* x = in_t.data();
      const double* g = out_t.grad_data();
      double* gi = in_t.grad_data();
      for (std::size_t i = 0; i < in_t.numel(); ++i) gi[i] += (x[i] >= 0.0 ? 1.0 : slope) * g[i];
    });
  }
  return out;
}

Tensor correlation(const Tensor& f1, const Tensor& f2, int max_displacement) {
  check_4d(f1, "correlation", "f1");
  check_4d(f2, "correlation", "f2");
  if (max_displacement < 1)
    throw std::invalid_argument("correlation: max_displacement must be positive");
  if (f1.shape() != f2.shape())
    throw ShapeError("correlation: f1 shape " + shape_string(f1.shape()) + " != f2 shape " +
                     shape_string(f2.shape()));
  const int batch = f1.dim(0), ch = f1.dim(1), h = f1.dim(2), w = f1.dim(3);
  const int side = 2 * max_displacement + 1;
  Tensor out = Tensor::zeros({batch, side * side, h, w});
  if (compute_precision() == Precision::f32) {
    auto a32 = to_f32(f1.values());
    auto b32 = to_f32(f2.values());
    std::vector<float> out32(out.numel());
    correlation_forward_impl<float>(a32.data(), b32.data(), out32.data(), batch, ch, h, w,
                                    max_displacement);
    for (std::size_t i = 0; i < out32.size(); ++i) out.data()[i] = out32[i];
  } else {
    correlation_forward_impl<double>(f1.data(), f2.data(), out.data(), batch, ch, h, w,
                                     max_displacement);
  }

  if (tracing({&f1, &f2})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    Tensor a_t = f1, b_t = f2, out_t = out;
    a_t.ensure_grad();
    b_t.ensure_grad();
    Tape::active()->record([a_t, b_t, out_t, batch, ch, h, w, max_displacement]() mutable {
      if (compute_precision() == Precision::f32) {
        auto g32 = to_f32(out_t.grad());
        auto a32 = to_f32(a_t.values());
        auto b32 = to_f32(b_t.values());
        std::vector<float> ga(a_t.numel(), 0.0f), gb(b_t.numel(), 0.0f);
        correlation_backward_impl<float>(g32.data(), a32.data(), b32.data(), ga.data(), gb.data(),
                                         batch, ch, h, w, max_displacement);
        if (a_t.requires_grad()) accumulate(a_t.grad(), ga);
        if (b_t.requires_grad()) accumulate(b_t.grad(), gb);
      } else {
        std::vector<double> ga(a_t.numel(), 0.0), gb(b_t.numel(), 0.0);
        correlation_backward_impl<double>(out_t.grad_data(), a_t.data(), b_t.data(), ga.data(),
                                          gb.data(), batch, ch, h, w, max_displacement);
        if (a_t.requires_grad()) accumulate(a_t.grad(), ga);
        if (b_t.requires_grad()) accumulate(b_t.grad(), gb);
      }
    });
  }
  return out;
}

Tensor upsample_bilinear(const Tensor& input, int factor) {
  check_4d(input, "upsample_bilinear", "input");
  if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
  const int n_batch = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int oh = h * factor, ow = w * factor;

  // Per-axis source indices and interpolation weights: src = i / factor,
  // tail past the last source pixel clamps to the edge.
  auto make_axis = [factor](int in_len, int out_len) {
    std::vector<int> i0(out_len), i1(out_len);
    std::vector<double> frac(out_len);
    for (int i = 0; i < out_len; ++i) {
      double src = static_cast<double>(i) / factor;
      int lo = static_cast<int>(src);
      double f = src - lo;
      int hi = lo + 1;
      if (hi > in_len - 1) {
        hi = in_len - 1;
        if (lo > in_len - 1) lo = in_len - 1;
        if (lo == hi) f = 0.0;
      }
      i0[i] = lo;
      i1[i] = hi;
      frac[i] = f;
    }
    return std::tuple{i0, i1, frac};
  };
  auto [y0, y1, fy] = make_axis(h, oh);
  auto [x0, x1, fx] = make_axis(w, ow);

  Tensor out = Tensor::zeros({n_batch, ch, oh, ow});
  for (int n = 0; n < n_batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const double* in_plane = input.data() + (static_cast<std::size_t>(n) * ch + c) * h * w;
      double* out_plane = out.data() + (static_cast<std::size_t>(n) * ch + c) * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        const double* r0 = in_plane + static_cast<std::size_t>(y0[oy]) * w;
        const double* r1 = in_plane + static_cast<std::size_t>(y1[oy]) * w;
        const double wy = fy[oy];
        double* orow = out_plane + static_cast<std::size_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) {
          const double wx = fx[ox];
          const double top = (1.0 - wx) * r0[x0[ox]] + wx * r0[x1[ox]];
          const double bot = (1.0 - wx) * r1[x0[ox]] + wx * r1[x1[ox]];
          orow[ox] = (1.0 - wy) * top + wy * bot;
        }
      }
    }
  }

  if (tracing({&input})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    Tensor in_t = input, out_t = out;
    in_t.ensure_grad();
    Tape::active()->record(
        [in_t, out_t, n_batch, ch, h, w, oh, ow, y0 = y0, y1 = y1, fy = fy, x0 = x0, x1 = x1,
         fx = fx]() mutable {
          for (int n = 0; n < n_batch; ++n) {
            for (int c = 0; c < ch; ++c) {
              double* gin = in_t.grad_data() + (static_cast<std::size_t>(n) * ch + c) * h * w;
              const double* gout =
                  out_t.grad_data() + (static_cast<std::size_t>(n) * ch + c) * oh * ow;
              for (int oy = 0; oy < oh; ++oy) {
                const double wy = fy[oy];
                const double* grow = gout + static_cast<std::size_t>(oy) * ow;
                double* g0 = gin + static_cast<std::size_t>(y0[oy]) * w;
                double* g1 = gin + static_cast<std::size_t>(y1[oy]) * w;
                for (int ox = 0; ox < ow; ++ox) {
                  const double wx = fx[ox];
                  const double g = grow[ox];
                  g0[x0[ox]] += (1.0 - wy) * (1.0 - wx) * g;
                  g0[x1[ox]] += (1.0 - wy) * wx * g;
                  g1[x0[ox]] += wy * (1.0 - wx) * g;
                  g1[x1[ox]] += wy * wx * g;
                }
              }
            }
          }
        });
  }
  return out;
}

Tensor concat_channels(const std::vector<Tensor>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  for (const Tensor& t : inputs) check_4d(t, "concat_channels", "input");
  const int n_batch = inputs[0].dim(0), h = inputs[0].dim(2), w = inputs[0].dim(3);
  int total_ch = 0;
  for (const Tensor& t : inputs) {
    if (t.dim(0) != n_batch || t.dim(2) != h || t.dim(3) != w)
      throw ShapeError("concat_channels: input " + shape_string(t.shape()) +
                       " does not spatially match " + shape_string(inputs[0].shape()));
    total_ch += t.dim(1);
  }
  Tensor out = Tensor::zeros({n_batch, total_ch, h, w});
  const std::size_t plane_sz = static_cast<std::size_t>(h) * w;
  for (int n = 0; n < n_batch; ++n) {
    std::size_t ch_off = 0;
    for (const Tensor& t : inputs) {
      const std::size_t block = static_cast<std::size_t>(t.dim(1)) * plane_sz;
      std::copy(t.data() + n * block, t.data() + (n + 1) * block,
                out.data() + (static_cast<std::size_t>(n) * total_ch + ch_off) * plane_sz);
      ch_off += t.dim(1);
    }
  }

  bool any_grad = false;
  for (const Tensor& t : inputs)
    if (t.requires_grad()) any_grad = true;
  if (Tape::active() && any_grad) {
    out.set_requires_grad(true);
    out.ensure_grad();
    std::vector<Tensor> ins = inputs;
    for (Tensor& t : ins)
      if (t.requires_grad()) t.ensure_grad();
    Tensor out_t = out;
    Tape::active()->record([ins, out_t, n_batch, total_ch, plane_sz]() mutable {
      for (int n = 0; n < n_batch; ++n) {
        std::size_t ch_off = 0;
        for (Tensor& t : ins) {
          const std::size_t block = static_cast<std::size_t>(t.dim(1)) * plane_sz;
          if (t.requires_grad()) {
            const double* g =
                out_t.grad_data() + (static_cast<std::size_t>(n) * total_ch + ch_off) * plane_sz;
            double* gi = t.grad_data() + n * block;
            for (std::size_t i = 0; i < block; ++i) gi[i] += g[i];
          }
          ch_off += t.dim(1);
        }
      }
    });
  }
  return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(name) + ": shape " + shape_string(a.shape()) + " != " +
                     shape_string(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = fwd(a.data()[i], b.data()[i]);
  if (tracing({&a, &b})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    Tensor a_t = a, b_t = b, out_t = out;
    if (a_t.requires_grad()) a_t.ensure_grad();
    if (b_t.requires_grad()) b_t.ensure_grad();
    Tape::active()->record([a_t, b_t, out_t, bwd]() mutable {
      for (std::size_t i = 0; i < out_t.numel(); ++i) {
        auto [da, db] = bwd(a_t.data()[i], b_t.data()[i]);
        if (a_t.requires_grad()) a_t.grad_data()[i] += da * out_t.grad_data()[i];
        if (b_t.requires_grad()) b_t.grad_data()[i] += db * out_t.grad_data()[i];
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(a, b, "add", [](double x, double y) { return x + y; },
                            [](double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(a, b, "sub", [](double x, double y) { return x - y; },
                            [](double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(a, b, "mul", [](double x, double y) { return x * y; },
                            [](double x, double y) { return std::pair{y, x}; });
}

Tensor affine(const Tensor& t, double a, double b) {
  Tensor out = Tensor::zeros(t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) out.data()[i] = a * t.data()[i] + b;
  if (tracing({&t})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    Tensor in_t = t, out_t = out;
    in_t.ensure_grad();
    Tape::active()->record([in_t, out_t, a]() mutable {
      for (std::size_t i = 0; i < in_t.numel(); ++i)
        in_t.grad_data()[i] += a * out_t.grad_data()[i];
    });
  }
  return out;
}

Tensor channel_affine(const Tensor& t, const std::vector<double>& scales,
                      const std::vector<double>& shifts) {
  check_4d(t, "channel_affine", "input");
  const int ch = t.dim(1);
  if (static_cast<int>(scales.size()) != ch || static_cast<int>(shifts.size()) != ch)
    throw ShapeError("channel_affine: got " + std::to_string(scales.size()) + " scales / " +
                     std::to_string(shifts.size()) + " shifts for C=" + std::to_string(ch));
  const std::size_t plane_sz = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
  Tensor out = Tensor::zeros(t.shape());
  for (int n = 0; n < t.dim(0); ++n) {
    for (int c = 0; c < ch; ++c) {
      const double* in = t.data() + (static_cast<std::size_t>(n) * ch + c) * plane_sz;
      double* o = out.data() + (static_cast<std::size_t>(n) * ch + c) * plane_sz;
      for (std::size_t i = 0; i < plane_sz; ++i) o[i] = scales[c] * in[i] + shifts[c];
    }
  }
  if (tracing({&t})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    Tensor in_t = t, out_t = out;
    in_t.ensure_grad();
    const int n_batch = t.dim(0);
    Tape::active()->record([in_t, out_t, scales, n_batch, ch, plane_sz]() mutable {
      for (int n = 0; n < n_batch; ++n) {
        for (int c = 0; c < ch; ++c) {
          const double* g =
              out_t.grad_data() + (static_cast<std::size_t>(n) * ch + c) * plane_sz;
          double* gi = in_t.grad_data() + (static_cast<std::size_t>(n) * ch + c) * plane_sz;
          for (std::size_t i = 0; i < plane_sz; ++i) gi[i] += scales[c] * g[i];
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& t) {
  double acc = 0.0;
  for (std::size_t i = 0; i < t.numel(); ++i) acc += t.data()[i];
  Tensor out = Tensor::scalar(acc);
  if (tracing({&t})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    Tensor in_t = t, out_t = out;
    in_t.ensure_grad();
    Tape::active()->record([in_t, out_t]() mutable {
      const double g = out_t.grad()[0];
      for (std::size_t i = 0; i < in_t.numel(); ++i) in_t.grad_data()[i] += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& t) {
  const double inv = 1.0 / static_cast<double>(t.numel());
  return scale(sum(t), inv);
}

Tensor epe_loss(const Tensor& pred, const FlowField& target, double eps) {
  check_4d(pred, "epe_loss", "pred");
  if (pred.dim(0) != 1 || pred.dim(1) != 2)
    throw ShapeError("epe_loss: pred must be (1,2,H,W), got " + shape_string(pred.shape()));
  if (pred.dim(2) != target.height || pred.dim(3) != target.width)
    throw ShapeError("epe_loss: pred " + std::to_string(pred.dim(2)) + "x" +
                     std::to_string(pred.dim(3)) + " vs target " + std::to_string(target.height) +
                     "x" + std::to_string(target.width));
  const int h = target.height, w = target.width;
  const std::size_t plane_sz = static_cast<std::size_t>(h) * w;
  const double* pu = pred.data();
  const double* pv = pred.data() + plane_sz;
  std::size_t count = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < plane_sz; ++i) {
    if (!target.valid[i]) continue;
    const double du = pu[i] - target.u[i];
    const double dv = pv[i] - target.v[i];
    acc += std::sqrt(du * du + dv * dv);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("epe_loss: target has no valid pixels");
  Tensor out = Tensor::scalar(acc / static_cast<double>(count));
  if (tracing({&pred})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    Tensor p_t = pred, out_t = out;
    p_t.ensure_grad();
    FlowField tgt = target;
    Tape::active()->record([p_t, out_t, tgt, plane_sz, count, eps]() mutable {
      const double g = out_t.grad()[0] / static_cast<double>(count);
      const double* pu = p_t.data();
      const double* pv = p_t.data() + plane_sz;
      double* gu = p_t.grad_data();
      double* gv = p_t.grad_data() + plane_sz;
      for (std::size_t i = 0; i < plane_sz; ++i) {
        if (!tgt.valid[i]) continue;
        const double du = pu[i] - tgt.u[i];
        const double dv = pv[i] - tgt.v[i];
        const double norm = std::max(std::sqrt(du * du + dv * dv), eps);
        gu[i] += g * du / norm;
        gv[i] += g * dv / norm;
      }
    });
  }
  return out;
}

Tensor cosine_similarity(const Tensor& pred, const FlowField& reference, double eps) {
  check_4d(pred, "cosine_similarity", "pred");
  if (pred.dim(0) != 1 || pred.dim(1) != 2)
    throw ShapeError("cosine_similarity: pred must be (1,2,H,W), got " +
                     shape_string(pred.shape()));
  if (pred.dim(2) != reference.height || pred.dim(3) != reference.width)
    throw ShapeError("cosine_similarity: pred " + std::to_string(pred.dim(2)) + "x" +
                     std::to_string(pred.dim(3)) + " vs reference " +
                     std::to_string(reference.height) + "x" + std::to_string(reference.width));
  const std::size_t plane_sz = static_cast<std::size_t>(reference.height) * reference.width;
  const double* pu = pred.data();
  const double* pv = pred.data() + plane_sz;
  double acc = 0.0;
  for (std::size_t i = 0; i < plane_sz; ++i) {
    const double au = reference.u[i], av = reference.v[i];
    const double bu = pu[i], bv = pv[i];
    const double na = std::max(std::sqrt(au * au + av * av), eps);
    const double nb = std::max(std::sqrt(bu * bu + bv * bv), eps);
    acc += (au * bu + av * bv) / (na * nb);
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(plane_sz));
  if (tracing({&pred})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    Tensor p_t = pred, out_t = out;
    p_t.ensure_grad();
    FlowField ref = reference;
    Tape::active()->record([p_t, out_t, ref, plane_sz, eps]() mutable {
      const double g = out_t.grad()[0] / static_cast<double>(plane_sz);
      const double* pu = p_t.data();
      const double* pv = p_t.data() + plane_sz;
      double* gu = p_t.grad_data();
      double* gv = p_t.grad_data() + plane_sz;
      for (std::size_t i = 0; i < plane_sz; ++i) {
        const double au = ref.u[i], av = ref.v[i];
        const double bu = pu[i], bv = pv[i];
        const double na = std::max(std::sqrt(au * au + av * av), eps);
        const double nb_raw = std::sqrt(bu * bu + bv * bv);
        const double nb = std::max(nb_raw, eps);
        const double dot = au * bu + av * bv;
        // d/db [ dot/(na*nb) ]; the nb factor is constant below the guard.
        if (nb_raw > eps) {
          const double inv = 1.0 / (na * nb);
          const double k = dot / (na * nb * nb * nb);
          gu[i] += g * (au * inv - k * bu);
          gv[i] += g * (av * inv - k * bv);
        } else {
          const double inv = 1.0 / (na * nb);
          gu[i] += g * au * inv;
          gv[i] += g * av * inv;
        }
      }
    });
  }
  return out;
}

Tensor flow_to_tensor(const FlowField& f) {
  const std::size_t plane_sz = static_cast<std::size_t>(f.height) * f.width;
  std::vector<double> vals(2 * plane_sz);
  std::copy(f.u.begin(), f.u.end(), vals.begin());
  std::copy(f.v.begin(), f.v.end(), vals.begin() + plane_sz);
  return Tensor::from_values({1, 2, f.height, f.width}, std::move(vals));
}

FlowField tensor_to_flow(const Tensor& t) {
  if (t.ndim() != 4 || t.dim(0) != 1 || t.dim(1) != 2)
    throw ShapeError("tensor_to_flow: need (1,2,H,W), got " + shape_string(t.shape()));
  FlowField f = FlowField::zeros(t.dim(2), t.dim(3));
  const std::size_t plane_sz = f.size();
  std::copy(t.data(), t.data() + plane_sz, f.u.begin());
  std::copy(t.data() + plane_sz, t.data() + 2 * plane_sz, f.v.begin());
  return f;
}

}  // namespace ops

FlowField downsample_flow_2x(const FlowField& f) {
  if (f.height % 2 != 0 || f.width % 2 != 0)
    throw ShapeError("downsample_flow_2x: extents must be even, got " + std::to_string(f.height) +
                     "x" + std::to_string(f.width));
  FlowField out = FlowField::zeros(f.height / 2, f.width / 2);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      double su = 0.0, sv = 0.0;
      int n_valid = 0;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const std::size_t i = f.index(2 * y + dy, 2 * x + dx);
          if (!f.valid[i]) continue;
          su += f.u[i];
          sv += f.v[i];
          ++n_valid;
        }
      }
      const std::size_t o = out.index(y, x);
      if (n_valid == 4) {
        // displacement halves with the resolution
        out.u[o] = su / n_valid / 2.0;
        out.v[o] = sv / n_valid / 2.0;
        out.valid[o] = 1;
      } else {
        out.u[o] = 0.0;
        out.v[o] = 0.0;
        out.valid[o] = 0;
      }
    }
  }
  return out;
}

FlowField downsample_flow(const FlowField& f, int factor) {
  if (factor < 1 || (factor & (factor - 1)) != 0)
    throw std::invalid_argument("downsample_flow: factor must be a power of two, got " +
                                std::to_string(factor));
  FlowField out = f;
  for (int s = factor; s > 1; s /= 2) out = downsample_flow_2x(out);
  return out;
}

}  // namespace patchflow
