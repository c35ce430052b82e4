#include <doctest.h>

#include <cmath>
#include <vector>

#include "im/random.hpp"
#include "im/tensor.hpp"
#include "oracles.hpp"

using namespace im;

namespace {
Tensor random_tensor(Rng& rng, Shape s, DType dt = DType::f32) { return rng.tensor_normal(s, 0.0, 1.0, dt); }
}  // namespace

TEST_CASE("conv2d: 1x1 depthwise identity kernel is the identity") {
  Rng rng(7);
  Tensor x = random_tensor(rng, {2, 5, 6, 4});
  ConvKernel k;
  k.weights = Tensor::full({5, 1, 1, 1}, 1.0);
  k.bias = Tensor::zeros({5});
  k.spec.grouping = Grouping::depthwise;
  Tensor y = conv2d(x, k);
  CHECK(y.same_bits(x));
}

TEST_CASE("conv2d: 3x11 depthwise with (1,5) padding preserves extent") {
  Rng rng(8);
  Tensor x = random_tensor(rng, {1, 9, 14, 14});
  ConvKernel k;
  k.weights = random_tensor(rng, {9, 1, 3, 11});
  k.spec = {1, 1, 1, 5, Grouping::depthwise};
  Tensor y = conv2d(x, k);
  CHECK(y.shape() == Shape{1, 9, 14, 14});
}

TEST_CASE("conv2d: matches quadruple-loop direct convolution") {
  Rng rng(9);
  Tensor x = random_tensor(rng, {1, 4, 8, 8});
  Tensor w = random_tensor(rng, {4, 1, 3, 3});
  Conv2dSpec spec{1, 1, 1, 1, Grouping::depthwise};
  Tensor got = conv2d(x, w, nullptr, spec);
  Tensor want = oracle::conv2d_direct(x, w, nullptr, spec);
  CHECK(oracle::max_abs_diff(got, want) <= 1e-5);

  // dense path with stride and bias
  Tensor w2 = random_tensor(rng, {6, 4, 3, 3});
  Tensor b2 = random_tensor(rng, {6});
  Conv2dSpec spec2{2, 2, 1, 1, Grouping::dense};
  CHECK(oracle::max_abs_diff(conv2d(x, w2, &b2, spec2), oracle::conv2d_direct(x, w2, &b2, spec2)) <= 1e-5);
}

TEST_CASE("conv2d: shape errors carry both shapes") {
  Tensor x = Tensor::zeros({1, 4, 8, 8});
  Tensor w = Tensor::zeros({4, 3, 3, 3});
  try {
    conv2d(x, w, nullptr, {});
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrKind::config);
    CHECK(std::string(e.what()).find("[1,4,8,8]") != std::string::npos);
    CHECK(std::string(e.what()).find("[4,3,3,3]") != std::string::npos);
  }
}

TEST_CASE("pointwise_conv: identity weights, hand matrix product, matmul oracle") {
  Rng rng(10);
  Tensor x = random_tensor(rng, {1, 3, 4, 4});
  ConvKernel id;
  id.weights = Tensor::zeros({3, 3, 1, 1});
  for (int i = 0; i < 3; ++i) id.weights.set(i * 3 + i, 1.0);
  CHECK(pointwise_conv(x, id).same_bits(x));

  Tensor v = Tensor::from(Shape{1, 2, 1, 1}, std::span<const float>(std::vector<float>{1.f, 2.f}));
  ConvKernel m;
  m.weights = Tensor::from(Shape{2, 2, 1, 1}, std::span<const float>(std::vector<float>{1.f, 1.f, 0.f, 1.f}));
  Tensor y = pointwise_conv(v, m);
  CHECK(y.at(0) == doctest::Approx(3.0));
  CHECK(y.at(1) == doctest::Approx(2.0));

  Tensor xr = random_tensor(rng, {2, 8, 4, 4});
  Tensor wr = random_tensor(rng, {5, 8, 1, 1});
  Tensor br = random_tensor(rng, {5});
  ConvKernel kr{wr, br, {}};
  CHECK(oracle::max_abs_diff(pointwise_conv(xr, kr), oracle::pointwise_matmul(xr, wr, &br)) <= 1e-5);

  ConvKernel bad;
  bad.weights = Tensor::zeros({3, 3, 3, 3});
  CHECK_THROWS_AS(pointwise_conv(x, bad), Error);
}

TEST_CASE("split_channels: group sizes and round trip") {
  std::vector<double> r{1.0 / 8, 1.0 / 8, 3.0 / 4};
  auto s72 = split_sizes(72, r);
  CHECK(s72 == std::vector<int64_t>{9, 9, 54});
  auto s96 = split_sizes(96, r);
  CHECK(s96 == std::vector<int64_t>{12, 12, 72});

  Rng rng(11);
  Tensor x = random_tensor(rng, {2, 72, 5, 5});
  auto parts = split_channels(x, r);
  REQUIRE(parts.size() == 3);
  CHECK(parts[0].dim(1) == 9);
  CHECK(concat_channels(parts).same_bits(x));

  std::vector<double> bad{0.5, 0.6};
  CHECK_THROWS_AS(split_sizes(72, bad), Error);
}

TEST_CASE("concat_channels: order and mismatch rejection") {
  Tensor a = Tensor::full({1, 1, 3, 3}, 0.0);
  Tensor b = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y = concat_channels(std::vector<Tensor>{a, b});
  CHECK(global_avg_pool(y).at(0) == doctest::Approx(0.0));
  CHECK(global_avg_pool(y).at(1) == doctest::Approx(1.0));

  Tensor c = Tensor::zeros({1, 1, 4, 3});
  CHECK_THROWS_AS(concat_channels(std::vector<Tensor>{a, c}), Error);
}

TEST_CASE("layer_norm_channels: constants and statistics") {
  Tensor ones5 = Tensor::full({5}, 1.0);
  Tensor zeros5 = Tensor::zeros({5});
  Tensor x = Tensor::full({1, 5, 3, 3}, 4.25);
  Tensor y = layer_norm_channels(x, ones5, zeros5);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.at(i)) < 1e-5);

  Tensor beta = Tensor::full({5}, -2.5);
  Tensor yb = layer_norm_channels(x, zeros5, beta);
  for (int64_t i = 0; i < yb.numel(); ++i) CHECK(yb.at(i) == doctest::Approx(-2.5));

  Rng rng(12);
  Tensor xr = random_tensor(rng, {2, 64, 4, 4}, DType::f64);
  Tensor g64 = Tensor::full({64}, 1.0, DType::f64);
  Tensor b64 = Tensor::zeros({64}, DType::f64);
  Tensor yr = layer_norm_channels(xr, g64, b64, 1e-12);
  const int64_t c = 64, plane = 16;
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t s = 0; s < plane; ++s) {
      double mean = 0, var = 0;
      for (int64_t ch = 0; ch < c; ++ch) mean += yr.at((b * c + ch) * plane + s);
      mean /= c;
      for (int64_t ch = 0; ch < c; ++ch) {
        const double d = yr.at((b * c + ch) * plane + s) - mean;
        var += d * d;
      }
      var /= c;
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("activations, pooling, cross entropy") {
  Tensor z = Tensor::zeros({3});
  CHECK(gelu(z).at(0) == doctest::Approx(0.0));
  CHECK(silu(z).at(1) == doctest::Approx(0.0));

  Tensor xc = Tensor::full({2, 3, 4, 4}, 1.75);
  Tensor g = global_avg_pool(xc);
  CHECK(g.shape() == Shape{2, 3});
  CHECK(g.at(4) == doctest::Approx(1.75));

  Tensor logits = Tensor::from(Shape{1, 2}, std::span<const float>(std::vector<float>{10.f, -10.f}));
  std::vector<int> label{0};
  CHECK(softmax_cross_entropy(logits, label) < 1e-4);
  // independent log-sum-exp closed form
  const double want = std::log(std::exp(10.0) + std::exp(-10.0)) - 10.0;
  CHECK(softmax_cross_entropy(logits, label) == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("property: conv output-shape formula over randomized shapes") {
  Rng rng(13);
  int checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int64_t ih = rng.uniform_int(1, 12), iw = rng.uniform_int(1, 12);
    const int64_t kh = rng.uniform_int(1, 5), kw = rng.uniform_int(1, 5);
    const int ph = static_cast<int>(rng.uniform_int(0, 3)), pw = static_cast<int>(rng.uniform_int(0, 3));
    const int sh = static_cast<int>(rng.uniform_int(1, 3)), sw = static_cast<int>(rng.uniform_int(1, 3));
    const int64_t cin = rng.uniform_int(1, 4);
    const bool dw = rng.uniform() < 0.5;
    const int64_t cout = dw ? cin : rng.uniform_int(1, 4);
    const int64_t oh = (ih + 2 * ph - kh) / sh + 1;
    const int64_t ow = (iw + 2 * pw - kw) / sw + 1;
    if (oh < 1 || ow < 1) continue;
    Tensor x = Tensor::zeros({1, cin, ih, iw});
    Tensor w = Tensor::zeros({cout, dw ? 1 : cin, kh, kw});
    Conv2dSpec spec{sh, sw, ph, pw, dw ? Grouping::depthwise : Grouping::dense};
    Tensor y = conv2d(x, w, nullptr, spec);
    CHECK(y.shape() == Shape{1, cout, oh, ow});
    ++checked;
  }
  CHECK(checked > 500);
}

TEST_CASE("property: depthwise convolution never mixes channels") {
  Rng rng(14);
  Tensor x = random_tensor(rng, {1, 6, 7, 7});
  Tensor w = random_tensor(rng, {6, 1, 3, 3});
  Conv2dSpec spec{1, 1, 1, 1, Grouping::depthwise};
  Tensor y0 = conv2d(x, w, nullptr, spec);
  const int64_t j = 2, plane = 49;
  Tensor xp = x;
  for (int64_t s = 0; s < plane; ++s) xp.set(j * plane + s, xp.at(j * plane + s) + 0.5);
  Tensor y1 = conv2d(xp, w, nullptr, spec);
  for (int64_t c = 0; c < 6; ++c)
    for (int64_t s = 0; s < plane; ++s) {
      if (c == j) continue;
      CHECK(y0.at(c * plane + s) == y1.at(c * plane + s));
    }
}

TEST_CASE("property: conv2d is linear in the input (zero bias)") {
  Rng rng(15);
  Tensor x1 = random_tensor(rng, {1, 3, 6, 6});
  Tensor x2 = random_tensor(rng, {1, 3, 6, 6});
  Tensor w = random_tensor(rng, {4, 3, 3, 3});
  Conv2dSpec spec{1, 1, 1, 1, Grouping::dense};
  const double a = 0.7, b = -1.3;
  Tensor lhs = conv2d(add(scale(x1, a), scale(x2, b)), w, nullptr, spec);
  Tensor rhs = add(scale(conv2d(x1, w, nullptr, spec), a), scale(conv2d(x2, w, nullptr, spec), b));
  CHECK(oracle::max_abs_diff(lhs, rhs) <= 1e-5);
}

TEST_CASE("property: 64-bit mode tracks 32-bit within 1e-4 on unit-scale inputs") {
  Rng rng(16);
  Tensor x32 = random_tensor(rng, {1, 4, 6, 6});
  Rng rng2(17);
  Tensor w32 = rng2.tensor_uniform({4, 4, 3, 3}, -0.5, 0.5);
  Conv2dSpec spec{1, 1, 1, 1, Grouping::dense};
  Tensor y32 = conv2d(x32, w32, nullptr, spec);
  Tensor y64 = conv2d(x32.to(DType::f64), w32.to(DType::f64), nullptr, spec);
  CHECK(oracle::max_abs_diff(y32, y64) <= 1e-4);

  Tensor g = Tensor::full({4}, 1.0), bt = Tensor::zeros({4});
  Tensor n32 = layer_norm_channels(y32, g, bt);
  Tensor n64 = layer_norm_channels(y64, g.to(DType::f64), bt.to(DType::f64));
  CHECK(oracle::max_abs_diff(n32, n64) <= 1e-4);
}

TEST_CASE("tensor invariants: extents and reshape guards") {
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), Error);
  Tensor t = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(t.reshaped({7}), Error);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
}
