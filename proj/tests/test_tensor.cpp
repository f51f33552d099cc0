#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "patchflow/ops.hpp"
#include "patchflow/rng.hpp"
#include "patchflow/tensor.hpp"
#include "patchflow/util.hpp"

using namespace patchflow;
using testutil::max_grad_rel_err;
using testutil::random_tensor;

namespace {

// Independent quadruple-loop direct convolution, written without reference
// to the library kernel. Serves as the oracle for conv2d.
Tensor direct_conv2d(const Tensor& in, const Tensor& w, const Tensor& b, int stride, int pad,
                     int dil) {
  const int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const int OC = w.dim(0), K = w.dim(2);
  const int span = dil * (K - 1) + 1;
  const int OH = (H + 2 * pad - span) / stride + 1;
  const int OW = (W + 2 * pad - span) / stride + 1;
  Tensor out = Tensor::zeros({N, OC, OH, OW});
  for (int n = 0; n < N; ++n)
    for (int oc = 0; oc < OC; ++oc)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = b.values()[oc];
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int iy = oy * stride - pad + ky * dil;
                const int ix = ox * stride - pad + kx * dil;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += in.at4(n, c, iy, ix) * w.at4(oc, c, ky, kx);
              }
          out.at4(n, oc, oy, ox) = acc;
        }
  return out;
}

// Independent scatter-accumulate oracle for transposed convolution: every
// input pixel stamps the kernel into the output at stride offsets.
Tensor scatter_tconv2d(const Tensor& in, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const int OC = w.dim(1), K = w.dim(2);
  const int OH = (H - 1) * stride - 2 * pad + K;
  const int OW = (W - 1) * stride - 2 * pad + K;
  Tensor out = Tensor::zeros({N, OC, OH, OW});
  for (int n = 0; n < N; ++n)
    for (int oc = 0; oc < OC; ++oc)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) out.at4(n, oc, oy, ox) = b.values()[oc];
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int iy = 0; iy < H; ++iy)
        for (int ix = 0; ix < W; ++ix)
          for (int oc = 0; oc < OC; ++oc)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int oy = iy * stride - pad + ky;
                const int ox = ix * stride - pad + kx;
                if (oy < 0 || oy >= OH || ox < 0 || ox >= OW) continue;
                out.at4(n, oc, oy, ox) += in.at4(n, c, iy, ix) * w.at4(c, oc, ky, kx);
              }
  return out;
}

// Direct correlation oracle.
Tensor direct_correlation(const Tensor& f1, const Tensor& f2, int D) {
  const int N = f1.dim(0), C = f1.dim(1), H = f1.dim(2), W = f1.dim(3);
  const int side = 2 * D + 1;
  Tensor out = Tensor::zeros({N, side * side, H, W});
  for (int n = 0; n < N; ++n)
    for (int dy = -D; dy <= D; ++dy)
      for (int dx = -D; dx <= D; ++dx) {
        const int ch = (dy + D) * side + (dx + D);
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const int y2 = y + dy, x2 = x + dx;
            if (y2 < 0 || y2 >= H || x2 < 0 || x2 >= W) continue;
            double acc = 0.0;
            for (int c = 0; c < C; ++c) acc += f1.at4(n, c, y, x) * f2.at4(n, c, y2, x2);
            out.at4(n, ch, y, x) = acc / C;
          }
      }
  return out;
}

void require_close(const Tensor& a, const Tensor& b, double tol = 1e-12) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
  CHECK(worst <= tol);
}

}  // namespace

TEST_CASE("tensor basics and shape guards") {
  Tensor t = Tensor::zeros({2, 3, 4, 5});
  CHECK(t.numel() == 120);
  CHECK_THROWS_AS(Tensor::zeros({2, 0, 4}), ShapeError);
  CHECK_THROWS_AS(Tensor::from_values({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  Tensor alias = t;
  alias.data()[0] = 7.0;
  CHECK(t.data()[0] == 7.0);
  Tensor copy = t.clone();
  copy.data()[0] = 9.0;
  CHECK(t.data()[0] == 7.0);
}

TEST_CASE("backward requires scalar loss") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = ops::add(x, x);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("loss = sum(input) gives all-ones gradient") {
  Tensor x = Tensor::from_values({2, 2}, {1.0, -2.0, 3.0, 4.0}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = ops::sum(x);
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("loss = 0.5*||input||^2 gives gradient equal to input") {
  Tensor x = Tensor::from_values({4}, {1.5, -2.0, 0.25, 3.0}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = ops::scale(ops::sum(ops::mul(x, x)), 0.5);
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(x.values()[i]));
}

TEST_CASE("conv2d identity kernel reproduces input") {
  Rng rng(11);
  Tensor in = random_tensor(rng, {1, 2, 4, 4});
  Tensor w = Tensor::zeros({2, 2, 1, 1});
  w.at4(0, 0, 0, 0) = 1.0;
  w.at4(1, 1, 0, 0) = 1.0;
  Tensor b = Tensor::zeros({2});
  require_close(ops::conv2d(in, w, b, 1, 0), in);
}

TEST_CASE("conv2d averaging kernel keeps interior of constant input constant") {
  Tensor in = Tensor::full({1, 1, 6, 6}, 3.25);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0 / 9.0);
  Tensor b = Tensor::zeros({1});
  Tensor out = ops::conv2d(in, w, b, 1, 0);
  CHECK(out.dim(2) == 4);
  for (double v : out.values()) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("conv2d matches brute-force direct convolution oracle") {
  Rng rng(21);
  SUBCASE("reference case 1x2x5x5 by 3x2x3x3") {
    Tensor in = random_tensor(rng, {1, 2, 5, 5});
    Tensor w = random_tensor(rng, {3, 2, 3, 3});
    Tensor b = random_tensor(rng, {3});
    for (int stride : {1, 2})
      for (int pad : {0, 1})
        require_close(ops::conv2d(in, w, b, stride, pad), direct_conv2d(in, w, b, stride, pad, 1));
  }
  SUBCASE("strides, paddings, dilations, batches") {
    struct Case {
      int n, c, h, w, oc, k, stride, pad, dil;
    };
    for (const Case& cs : {Case{2, 3, 7, 6, 4, 3, 1, 1, 1}, Case{1, 1, 8, 8, 2, 5, 2, 2, 1},
                           Case{1, 2, 8, 7, 3, 3, 2, 1, 1}, Case{1, 2, 8, 8, 2, 3, 1, 2, 2},
                           Case{1, 1, 8, 8, 1, 7, 2, 3, 1}, Case{2, 2, 6, 6, 2, 3, 3, 1, 1}}) {
      Tensor in = random_tensor(rng, {cs.n, cs.c, cs.h, cs.w});
      Tensor w = random_tensor(rng, {cs.oc, cs.c, cs.k, cs.k});
      Tensor b = random_tensor(rng, {cs.oc});
      require_close(ops::conv2d(in, w, b, cs.stride, cs.pad, cs.dil),
                    direct_conv2d(in, w, b, cs.stride, cs.pad, cs.dil));
    }
  }
}

TEST_CASE("conv2d rejects mismatched shapes with a shape error") {
  Tensor in = Tensor::zeros({1, 3, 5, 5});
  Tensor w = Tensor::zeros({4, 2, 3, 3});
  Tensor b = Tensor::zeros({4});
  CHECK_THROWS_AS(ops::conv2d(in, w, b, 1, 1), ShapeError);
  Tensor w_ok = Tensor::zeros({4, 3, 3, 3});
  CHECK_THROWS_AS(ops::conv2d(in, w_ok, Tensor::zeros({3}), 1, 1), ShapeError);
}

TEST_CASE("transposed_conv2d identity and impulse response") {
  Rng rng(31);
  Tensor in = random_tensor(rng, {1, 2, 4, 4});
  Tensor w = Tensor::zeros({2, 2, 1, 1});
  w.at4(0, 0, 0, 0) = 1.0;
  w.at4(1, 1, 0, 0) = 1.0;
  Tensor b = Tensor::zeros({2});
  require_close(ops::transposed_conv2d(in, w, b, 1, 0), in);

  // impulse at (1,2), stride 2, 4x4 kernel: kernel stamped at (2,4)
  Tensor imp = Tensor::zeros({1, 1, 3, 3});
  imp.at4(0, 0, 1, 2) = 1.0;
  Tensor k = random_tensor(rng, {1, 1, 4, 4});
  Tensor out = ops::transposed_conv2d(imp, k, Tensor::zeros({1}), 2, 0);
  CHECK(out.dim(2) == 8);
  CHECK(out.dim(3) == 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const double expect =
          (y >= 2 && y < 6 && x >= 4 && x < 8) ? k.at4(0, 0, y - 2, x - 4) : 0.0;
      CHECK(out.at4(0, 0, y, x) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("transposed_conv2d matches scatter-accumulate oracle") {
  Rng rng(41);
  struct Case {
    int n, c, h, w, oc, k, stride, pad;
  };
  for (const Case& cs : {Case{1, 2, 5, 5, 3, 3, 1, 1}, Case{1, 3, 4, 5, 2, 4, 2, 1},
                         Case{2, 2, 3, 3, 2, 4, 2, 1}, Case{1, 1, 6, 6, 1, 5, 3, 2}}) {
    Tensor in = random_tensor(rng, {cs.n, cs.c, cs.h, cs.w});
    Tensor w = random_tensor(rng, {cs.c, cs.oc, cs.k, cs.k});
    Tensor b = random_tensor(rng, {cs.oc});
    require_close(ops::transposed_conv2d(in, w, b, cs.stride, cs.pad),
                  scatter_tconv2d(in, w, b, cs.stride, cs.pad));
  }
}

TEST_CASE("conv2d stride s then transposed_conv2d stride s preserves extent") {
  Rng rng(43);
  // formula padding: conv pad (k-1)/2 halves even extents at s=2; tconv k=4,p=1 doubles
  Tensor in = random_tensor(rng, {1, 2, 8, 8});
  Tensor w1 = random_tensor(rng, {3, 2, 3, 3});
  Tensor mid = ops::conv2d(in, w1, Tensor::zeros({3}), 2, 1);
  CHECK(mid.dim(2) == 4);
  CHECK(mid.dim(3) == 4);
  Tensor w2 = random_tensor(rng, {3, 2, 4, 4});
  Tensor back = ops::transposed_conv2d(mid, w2, Tensor::zeros({2}), 2, 1);
  CHECK(back.dim(2) == 8);
  CHECK(back.dim(3) == 8);
}

TEST_CASE("leaky_relu forward values") {
  Tensor x = Tensor::from_values({2}, {2.0, -2.0});
  Tensor y = ops::leaky_relu(x, 0.1);
  CHECK(y.values()[0] == doctest::Approx(2.0));
  CHECK(y.values()[1] == doctest::Approx(-0.2));
  CHECK_THROWS_AS(ops::leaky_relu(x, 1.5), std::invalid_argument);
}

TEST_CASE("leaky_relu gradient at -2 is the slope") {
  Tensor x = Tensor::scalar(-2.0, true);
  const double err = max_grad_rel_err([&] { return ops::sum(ops::leaky_relu(x, 0.1)); }, {x});
  CHECK(err < 1e-4);
  CHECK(x.grad()[0] == doctest::Approx(0.1));
}

TEST_CASE("correlation of constant ones is one at interior positions") {
  Tensor f = Tensor::full({1, 4, 5, 5}, 1.0);
  Tensor out = ops::correlation(f, f, 1);
  CHECK(out.dim(1) == 9);
  for (int ch = 0; ch < 9; ++ch)
    for (int y = 1; y < 4; ++y)
      for (int x = 1; x < 4; ++x)
        CHECK(out.at4(0, ch, y, x) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("correlation impulse pair activates exactly the d=(1,0) channel") {
  Tensor f1 = Tensor::zeros({1, 1, 5, 5});
  Tensor f2 = Tensor::zeros({1, 1, 5, 5});
  f1.at4(0, 0, 2, 2) = 1.0;
  f2.at4(0, 0, 2, 3) = 1.0;
  Tensor out = ops::correlation(f1, f2, 1);
  // dx=+1, dy=0 -> channel (0+1)*3 + (1+1) = 5
  for (int ch = 0; ch < 9; ++ch)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        const double expect = (ch == 5 && y == 2 && x == 2) ? 1.0 : 0.0;
        CHECK(out.at4(0, ch, y, x) == doctest::Approx(expect).epsilon(1e-12));
      }
}

TEST_CASE("correlation with zero f2 is zero and bilinear in f1") {
  Rng rng(51);
  Tensor f1 = random_tensor(rng, {1, 3, 6, 6});
  Tensor zero = Tensor::zeros({1, 3, 6, 6});
  Tensor corr_zero = ops::correlation(f1, zero, 2);
  for (double v : corr_zero.values()) CHECK(v == 0.0);

  Tensor f2 = random_tensor(rng, {1, 3, 6, 6});
  Tensor lhs = ops::correlation(ops::scale(f1, 2.5), f2, 2);
  Tensor rhs = ops::scale(ops::correlation(f1, f2, 2), 2.5);
  require_close(lhs, rhs, 1e-12);
}

TEST_CASE("correlation matches direct oracle") {
  Rng rng(61);
  for (int D : {1, 2}) {
    Tensor f1 = random_tensor(rng, {2, 3, 6, 5});
    Tensor f2 = random_tensor(rng, {2, 3, 6, 5});
    require_close(ops::correlation(f1, f2, D), direct_correlation(f1, f2, D), 1e-12);
  }
  CHECK_THROWS_AS(ops::correlation(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 2, 4, 5}), 1),
                  ShapeError);
}

TEST_CASE("upsample_bilinear identity, constants, and hand-computed ramp") {
  Rng rng(71);
  Tensor in = random_tensor(rng, {1, 2, 3, 3});
  require_close(ops::upsample_bilinear(in, 1), in);

  Tensor c = Tensor::full({1, 1, 2, 3}, 4.5);
  Tensor up3 = ops::upsample_bilinear(c, 3);
  for (double v : up3.values()) CHECK(v == doctest::Approx(4.5).epsilon(1e-12));

  Tensor ramp = Tensor::from_values({1, 1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
  Tensor up = ops::upsample_bilinear(ramp, 2);
  const std::vector<double> expect = {0.0, 0.5, 1.0, 1.0, 1.0, 1.5, 2.0, 2.0,
                                      2.0, 2.5, 3.0, 3.0, 2.0, 2.5, 3.0, 3.0};
  REQUIRE(up.numel() == expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(up.values()[i] == doctest::Approx(expect[i]).epsilon(1e-12));

  // aligned source positions are reproduced exactly
  Tensor big = random_tensor(rng, {1, 1, 4, 4});
  Tensor up4 = ops::upsample_bilinear(big, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      CHECK(up4.at4(0, 0, 4 * y, 4 * x) == doctest::Approx(big.at4(0, 0, y, x)).epsilon(1e-14));
}

TEST_CASE("concat_channels stacks planes and validates shapes") {
  Tensor a = Tensor::full({1, 1, 2, 2}, 0.0);
  Tensor b = Tensor::full({1, 1, 2, 2}, 1.0);
  Tensor out = ops::concat_channels({a, b});
  CHECK(out.dim(1) == 2);
  for (int i = 0; i < 4; ++i) {
    CHECK(out.values()[i] == 0.0);
    CHECK(out.values()[4 + i] == 1.0);
  }
  Rng rng(81);
  Tensor single = random_tensor(rng, {2, 3, 4, 4});
  require_close(ops::concat_channels({single}), single);
  CHECK_THROWS_AS(ops::concat_channels({a, Tensor::zeros({1, 1, 3, 2})}), ShapeError);
}

TEST_CASE("finite differences: conv2d w.r.t. input, weight, bias") {
  Rng rng(91);
  struct Case {
    int n, c, h, w, oc, k, stride, pad, dil;
  };
  for (const Case& cs : {Case{1, 2, 6, 6, 3, 3, 1, 1, 1}, Case{1, 2, 8, 8, 2, 3, 2, 1, 1},
                         Case{1, 1, 8, 8, 2, 5, 2, 2, 1}, Case{1, 2, 8, 8, 1, 3, 1, 2, 2},
                         Case{1, 1, 8, 8, 1, 7, 2, 3, 1}}) {
    Tensor in = random_tensor(rng, {cs.n, cs.c, cs.h, cs.w});
    Tensor w = random_tensor(rng, {cs.oc, cs.c, cs.k, cs.k});
    Tensor b = random_tensor(rng, {cs.oc});
    // nonlinearity after the conv so weight/input gradients are not constant
    auto loss = [&] {
      return ops::sum(ops::leaky_relu(ops::conv2d(in, w, b, cs.stride, cs.pad, cs.dil), 0.1));
    };
    CHECK(max_grad_rel_err(loss, {in, w, b}) < 1e-4);
  }
}

TEST_CASE("finite differences: transposed_conv2d w.r.t. input, weight, bias") {
  Rng rng(101);
  struct Case {
    int n, c, h, w, oc, k, stride, pad;
  };
  for (const Case& cs : {Case{1, 2, 5, 5, 2, 3, 1, 1}, Case{1, 3, 4, 4, 2, 4, 2, 1},
                         Case{1, 1, 6, 5, 1, 5, 3, 2}}) {
    Tensor in = random_tensor(rng, {cs.n, cs.c, cs.h, cs.w});
    Tensor w = random_tensor(rng, {cs.c, cs.oc, cs.k, cs.k});
    Tensor b = random_tensor(rng, {cs.oc});
    auto loss = [&] {
      return ops::sum(
          ops::leaky_relu(ops::transposed_conv2d(in, w, b, cs.stride, cs.pad), 0.1));
    };
    CHECK(max_grad_rel_err(loss, {in, w, b}) < 1e-4);
  }
}

TEST_CASE("finite differences: correlation w.r.t. both feature maps") {
  Rng rng(111);
  Tensor f1 = random_tensor(rng, {1, 3, 6, 6});
  Tensor f2 = random_tensor(rng, {1, 3, 6, 6});
  auto loss = [&] { return ops::sum(ops::leaky_relu(ops::correlation(f1, f2, 2), 0.1)); };
  CHECK(max_grad_rel_err(loss, {f1, f2}) < 1e-4);
}

TEST_CASE("finite differences: upsample_bilinear") {
  Rng rng(121);
  Tensor in = random_tensor(rng, {1, 2, 3, 4});
  auto loss = [&] { return ops::sum(ops::leaky_relu(ops::upsample_bilinear(in, 2), 0.1)); };
  CHECK(max_grad_rel_err(loss, {in}) < 1e-4);
}

TEST_CASE("finite differences: concat routes gradients to each input") {
  Rng rng(131);
  Tensor a = random_tensor(rng, {1, 2, 4, 4});
  Tensor b = random_tensor(rng, {1, 3, 4, 4});
  Tensor w = random_tensor(rng, {2, 5, 3, 3});
  Tensor bias = random_tensor(rng, {2});
  auto loss = [&] {
    return ops::sum(ops::leaky_relu(ops::conv2d(ops::concat_channels({a, b}), w, bias, 1, 1), 0.1));
  };
  CHECK(max_grad_rel_err(loss, {a, b}) < 1e-4);
}

TEST_CASE("finite differences: elementwise ops and channel_affine") {
  Rng rng(141);
  Tensor a = random_tensor(rng, {1, 2, 3, 3});
  Tensor b = random_tensor(rng, {1, 2, 3, 3});
  auto loss = [&] {
    Tensor s = ops::mul(ops::add(a, b), ops::sub(a, b));
    Tensor aff = ops::channel_affine(s, {2.0, -0.5}, {0.1, 0.2});
    return ops::mean(ops::mul(aff, aff));
  };
  CHECK(max_grad_rel_err(loss, {a, b}) < 1e-4);
}

TEST_CASE("finite differences: epe loss and cosine similarity") {
  Rng rng(151);
  FlowField target = FlowField::zeros(4, 4);
  for (std::size_t i = 0; i < target.size(); ++i) {
    target.u[i] = rng.uniform(-2.0, 2.0);
    target.v[i] = rng.uniform(-2.0, 2.0);
  }
  target.valid[3] = 0;
  Tensor pred = random_tensor(rng, {1, 2, 4, 4}, -2.0, 2.0);
  CHECK(max_grad_rel_err([&] { return ops::epe_loss(pred, target); }, {pred}) < 1e-4);
  CHECK(max_grad_rel_err([&] { return ops::cosine_similarity(pred, target); }, {pred}) < 1e-4);
}

TEST_CASE("epe loss values") {
  FlowField target = FlowField::zeros(2, 2);
  Tensor pred = ops::flow_to_tensor(target);
  CHECK(ops::epe_loss(pred, target).values()[0] == 0.0);
  FlowField off = target;
  for (std::size_t i = 0; i < off.size(); ++i) {
    off.u[i] = 3.0;
    off.v[i] = 4.0;
  }
  CHECK(ops::epe_loss(ops::flow_to_tensor(off), target).values()[0] == doctest::Approx(5.0));
}

TEST_CASE("cosine similarity is 1 on itself and -1 on negation") {
  Rng rng(161);
  FlowField ref = FlowField::zeros(3, 3);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    ref.u[i] = rng.uniform(0.5, 2.0);
    ref.v[i] = rng.uniform(0.5, 2.0);
  }
  Tensor same = ops::flow_to_tensor(ref);
  CHECK(ops::cosine_similarity(same, ref).values()[0] == doctest::Approx(1.0).epsilon(1e-9));
  Tensor neg = ops::scale(same, -1.0);
  CHECK(ops::cosine_similarity(neg, ref).values()[0] == doctest::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("flow downsampling pools displacements into coarser pixel units") {
  FlowField f = FlowField::zeros(4, 4);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.u[i] = 8.0;
    f.v[i] = -4.0;
  }
  FlowField half = downsample_flow_2x(f);
  CHECK(half.height == 2);
  for (std::size_t i = 0; i < half.size(); ++i) {
    CHECK(half.u[i] == doctest::Approx(4.0));
    CHECK(half.v[i] == doctest::Approx(-2.0));
    CHECK(half.valid[i] == 1);
  }
  FlowField masked = f;
  masked.valid[0] = 0;  // invalidates pooled cell (0,0) only
  FlowField half2 = downsample_flow_2x(masked);
  CHECK(half2.valid[0] == 0);
  CHECK(half2.valid[1] == 1);
  FlowField quarter = downsample_flow(f, 4);
  CHECK(quarter.height == 1);
  CHECK(quarter.u[0] == doctest::Approx(2.0));
}

TEST_CASE("forwards are deterministic and finite") {
  Rng rng(171);
  Tensor in = random_tensor(rng, {1, 3, 8, 8});
  Tensor w = random_tensor(rng, {4, 3, 3, 3});
  Tensor b = random_tensor(rng, {4});
  Tensor out1 = ops::conv2d(in, w, b, 2, 1);
  Tensor out2 = ops::conv2d(in, w, b, 2, 1);
  for (std::size_t i = 0; i < out1.numel(); ++i) {
    CHECK(out1.values()[i] == out2.values()[i]);
    CHECK(std::isfinite(out1.values()[i]));
  }
}

TEST_CASE("single-precision compute path stays close to double and restores") {
  Rng rng(181);
  Tensor in = random_tensor(rng, {1, 3, 8, 8});
  Tensor w = random_tensor(rng, {4, 3, 3, 3});
  Tensor b = random_tensor(rng, {4});
  Tensor ref = ops::conv2d(in, w, b, 1, 1);
  set_compute_precision(Precision::f32);
  Tensor fast = ops::conv2d(in, w, b, 1, 1);
  Tensor corr32 = ops::correlation(in, in, 1);
  set_compute_precision(Precision::f64);
  Tensor corr64 = ops::correlation(in, in, 1);
  double worst = 0.0;
  for (std::size_t i = 0; i < ref.numel(); ++i)
    worst = std::max(worst, std::abs(ref.values()[i] - fast.values()[i]));
  CHECK(worst < 1e-4);
  worst = 0.0;
  for (std::size_t i = 0; i < corr64.numel(); ++i)
    worst = std::max(worst, std::abs(corr64.values()[i] - corr32.values()[i]));
  CHECK(worst < 1e-4);
}
