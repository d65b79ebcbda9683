#include <doctest.h>

#include <cmath>

#include "lungseg/errors.hpp"
#include "lungseg/nn_ops.hpp"
#include "test_util.hpp"

using namespace lungseg;
using namespace lungseg::testing;

namespace {

LayerParams<double> scalar_conv(double w, double b) {
  LayerParams<double> p;
  p.spec = ConvSpec{};
  p.weight = Tensor5<double>({1, 1, 1, 1, 1}, w);
  p.bias = Tensor5<double>({1, 1, 1, 1, 1}, b);
  return p;
}

LayerParams<double> random_params(const ConvSpec& spec, bool transposed, std::uint64_t seed, bool zero_bias) {
  Rng rng(seed);
  auto p = transposed ? make_tconv_params<double>(spec, rng) : make_conv_params<double>(spec, rng);
  p.weight = random_tensor<double>(p.weight.shape(), seed + 100);
  p.bias = zero_bias ? Tensor5<double>(p.bias.shape()) : random_tensor<double>(p.bias.shape(), seed + 200);
  return p;
}

}  // namespace

TEST_CASE("conv3d examples") {
  CHECK(conv3d(Tensor5<double>({1, 1, 1, 1, 1}, 2.0), scalar_conv(3, 1))[0] == 7.0);

  ConvSpec s = ConvSpec::cube(2, 5, 3, 2, 2);
  CHECK(s.padding == Index3{2, 2, 2});
  auto y = conv3d(random_tensor<double>({1, 2, 8, 8, 8}, 1), random_params(s, false, 1, false));
  CHECK(y.shape() == Shape5{1, 5, 4, 4, 4});

  ConvSpec id = ConvSpec::cube(1, 1, 3);
  LayerParams<double> p{id, Tensor5<double>({1, 1, 3, 3, 3}), Tensor5<double>({1, 1, 1, 1, 1})};
  p.weight(0, 0, 1, 1, 1) = 1.0;
  auto x = random_tensor<double>({2, 1, 5, 6, 7}, 2);
  CHECK(bit_equal(conv3d(x, p), x));
}

TEST_CASE("conv3d output shape follows the size formula") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> k(1, 3), st(1, 2), dl(1, 2), pd(0, 2), sz(5, 9);
    ConvSpec s;
    s.in_channels = 2;
    s.out_channels = 3;
    s.kernel = {k(rng), k(rng), k(rng)};
    s.stride = {st(rng), st(rng), st(rng)};
    s.dilation = {dl(rng), dl(rng), dl(rng)};
    s.padding = {pd(rng), pd(rng), pd(rng)};
    Index3 in{sz(rng), sz(rng), sz(rng)};
    auto expect = [](std::int64_t x, std::int64_t kk, std::int64_t ss, std::int64_t dd, std::int64_t pp) {
      return (x + 2 * pp - dd * (kk - 1) - 1) / ss + 1;
    };
    Index3 e{expect(in.d, s.kernel.d, s.stride.d, s.dilation.d, s.padding.d),
             expect(in.h, s.kernel.h, s.stride.h, s.dilation.h, s.padding.h),
             expect(in.w, s.kernel.w, s.stride.w, s.dilation.w, s.padding.w)};
    auto y = conv3d(random_tensor<double>({1, 2, in.d, in.h, in.w}, trial), random_params(s, false, trial, false));
    CHECK(spatial_of(y.shape()) == e);
    CHECK(y.channels() == 3);
  }
}

TEST_CASE("conv3d rejects channel mismatch and empty output") {
  auto p = random_params(ConvSpec::cube(2, 1, 3), false, 1, false);
  CHECK_THROWS_AS(conv3d(random_tensor<double>({1, 3, 4, 4, 4}, 1), p), ShapeError);
  ConvSpec big = ConvSpec::cube(1, 1, 3);
  big.padding = {0, 0, 0};
  CHECK_THROWS_AS(conv3d(random_tensor<double>({1, 1, 2, 2, 2}, 1), random_params(big, false, 1, false)),
                  ShapeError);
}

TEST_CASE("conv3d_backward trivial cases") {
  auto p = random_params(ConvSpec::cube(2, 3, 3), false, 3, false);
  auto x = random_tensor<double>({1, 2, 4, 4, 4}, 3);
  auto y = conv3d(x, p);
  auto g = conv3d_backward(x, p, Tensor5<double>(y.shape()));
  for (auto* t : {&g.input, &g.weight, &g.bias})
    for (double v : t->values()) CHECK(v == 0.0);

  auto sp = scalar_conv(1.5, 0.25);
  Tensor5<double> xs({1, 1, 1, 1, 1}, 2.0);
  auto gs = conv3d_backward(xs, sp, Tensor5<double>({1, 1, 1, 1, 1}, -3.0));
  CHECK(gs.weight[0] == 2.0 * -3.0);
  CHECK(gs.bias[0] == -3.0);
  CHECK(gs.input[0] == 1.5 * -3.0);

  CHECK_THROWS_AS(conv3d_backward(x, p, Tensor5<double>({1, 3, 3, 4, 4})), ShapeError);
}

TEST_CASE("tconv3d examples") {
  ConvSpec s;
  s.kernel = {2, 2, 2};
  s.stride = {2, 2, 2};
  LayerParams<double> p{s, Tensor5<double>({1, 1, 2, 2, 2}, 1.0), Tensor5<double>({1, 1, 1, 1, 1})};
  auto y = tconv3d(Tensor5<double>({1, 1, 2, 2, 2}, 1.0), p);
  CHECK(y.shape() == Shape5{1, 1, 4, 4, 4});
  for (double v : y.values()) CHECK(v == 1.0);

  CHECK(tconv3d(Tensor5<double>({1, 1, 4, 4, 4}, 1.0), p).depth() == 8);
  CHECK(s.transposed_output_size({4, 4, 4}) == Index3{8, 8, 8});
  CHECK_THROWS_AS(tconv3d(Tensor5<double>({1, 2, 2, 2, 2}, 1.0), p), ShapeError);
}

TEST_CASE("conv3d and tconv3d are adjoint") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 24; ++trial) {
    std::uniform_int_distribution<int> k(1, 3), st(1, 2), dl(1, 2), pd(0, 2), ch(1, 3), sz(4, 7);
    ConvSpec s;
    s.in_channels = ch(rng);
    s.out_channels = ch(rng);
    s.kernel = {k(rng), k(rng), k(rng)};
    s.stride = {st(rng), st(rng), st(rng)};
    s.dilation = {dl(rng), dl(rng), dl(rng)};
    s.padding = {pd(rng), pd(rng), pd(rng)};
    const Index3 in{sz(rng), sz(rng), sz(rng)};
    const Index3 out = s.output_size(in);
    if (out.d < 1 || out.h < 1 || out.w < 1) continue;
    // The transposed output of `out` may fall short of `in` when the stride
    // does not divide evenly; use the size tconv actually produces.
    const Index3 back = s.transposed_output_size(out);
    auto x = random_tensor<double>({2, s.in_channels, back.d, back.h, back.w}, 1000 + trial);
    auto p = random_params(s, false, trial, true);
    auto y = random_tensor<double>({2, s.out_channels, out.d, out.h, out.w}, 2000 + trial);
    auto cx = conv3d(x, p);
    REQUIRE(cx.shape() == y.shape());
    // Same weight buffer, read as a transposed conv from C_out back to C_in.
    LayerParams<double> pt = p;
    std::swap(pt.spec.in_channels, pt.spec.out_channels);
    pt.bias = Tensor5<double>({s.in_channels, 1, 1, 1, 1});
    auto ty = tconv3d(y, pt);
    REQUIRE(ty.shape() == x.shape());
    const double lhs = tensor_dot(cx, y), rhs = tensor_dot(x, ty);
    CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max({std::abs(lhs), std::abs(rhs), 1e-300}));
  }
}

TEST_CASE("maxpool3d examples") {
  auto r = maxpool3d(iota_tensor<double>({1, 1, 2, 2, 2}, 1.0), {2, 2, 2});
  CHECK(r.output.size() == 1);
  CHECK(r.output[0] == 8.0);
  CHECK(r.argmax[0] == 7);

  auto c = maxpool3d(Tensor5<double>({1, 2, 4, 4, 4}, 3.0), {2, 2, 2});
  for (double v : c.output.values()) CHECK(v == 3.0);
  Tensor5<double> probe({1, 2, 4, 4, 4});
  for (std::size_t i = 0; i < c.argmax.size(); ++i) {
    const auto a = static_cast<std::size_t>(c.argmax[i]);
    // first voxel of each window in scan order
    const std::int64_t w = a % 4, h = (a / 4) % 4, d = (a / 16) % 4;
    CHECK(w % 2 == 0);
    CHECK(h % 2 == 0);
    CHECK(d % 2 == 0);
  }

  CHECK_THROWS_AS(maxpool3d(Tensor5<double>({1, 1, 3, 4, 4}), {2, 2, 2}), ShapeError);
}

TEST_CASE("maxpool3d_backward routes gradient to the argmax only") {
  auto x = random_tensor<double>({1, 2, 4, 4, 4}, 5);
  auto r = maxpool3d(x, {2, 2, 2});
  auto g = random_tensor<double>(r.output.shape(), 6);
  auto gx = maxpool3d_backward(x.shape(), r.argmax, g);
  double total = 0;
  std::size_t nonzero = 0;
  for (double v : gx.values()) {
    total += v;
    nonzero += v != 0.0;
  }
  CHECK(nonzero == g.size());
  CHECK(total == doctest::Approx(tensor_reduce(g, ReduceOp::sum)).epsilon(1e-14));
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(gx[static_cast<std::size_t>(r.argmax[i])] == g[i]);
}

TEST_CASE("batchnorm3d train mode standardizes per channel") {
  auto x = random_tensor<double>({2, 2, 4, 5, 6}, 7, -3.0, 5.0);
  Tensor5<double> gamma({2, 1, 1, 1, 1}, 1.0), beta({2, 1, 1, 1, 1});
  auto st = BatchNormState<double>::make(2);
  auto y = batchnorm3d(x, gamma, beta, st, Mode::train);
  for (std::int64_t c = 0; c < 2; ++c) {
    double s = 0, s2 = 0, n = 0;
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t i = 0; i < x.spatial_size(); ++i) {
        const double v = y.channel_ptr(b, c)[i];
        s += v;
        s2 += v * v;
        ++n;
      }
    const double mean = s / n;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(s2 / n - mean * mean - 1.0) <= 1e-5);
  }
}

TEST_CASE("batchnorm3d constant input, affine form and running stats") {
  Tensor5<double> gamma({1, 1, 1, 1, 1}, 1.0), beta({1, 1, 1, 1, 1});
  auto st = BatchNormState<double>::make(1);
  auto y = batchnorm3d(Tensor5<double>({1, 1, 3, 3, 3}, 4.2), gamma, beta, st, Mode::train);
  for (double v : y.values()) CHECK(std::abs(v) <= 1e-3);

  auto x = random_tensor<double>({1, 1, 3, 3, 3}, 8);
  auto st1 = BatchNormState<double>::make(1);
  auto st2 = BatchNormState<double>::make(1);
  auto xh = batchnorm3d(x, gamma, beta, st1, Mode::train);
  auto y2 = batchnorm3d(x, Tensor5<double>({1, 1, 1, 1, 1}, 2.0), Tensor5<double>({1, 1, 1, 1, 1}, 1.0), st2,
                        Mode::train);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y2[i] == doctest::Approx(2 * xh[i] + 1).epsilon(1e-12));

  // momentum 0.1 from (0, 1)
  double mean = tensor_reduce(x, ReduceOp::mean);
  CHECK(st1.running_mean[0] == doctest::Approx(0.1 * mean).epsilon(1e-12));

  // eval uses running statistics and leaves them untouched
  const auto rm = st1.running_mean, rv = st1.running_var;
  auto ye = batchnorm3d(x, gamma, beta, st1, Mode::eval);
  CHECK(bit_equal(st1.running_mean, rm));
  CHECK(bit_equal(st1.running_var, rv));
  CHECK(ye[0] == doctest::Approx((x[0] - rm[0]) / std::sqrt(rv[0] + 1e-5)).epsilon(1e-12));

  CHECK_THROWS_AS(batchnorm3d(random_tensor<double>({1, 2, 2, 2, 2}, 1), gamma, beta, st, Mode::train),
                  ShapeError);
}

TEST_CASE("activation examples") {
  Tensor5<double> x({1, 1, 1, 1, 3}, std::vector<double>{-1, 2, 0});
  auto r = activation(x, Activation::relu);
  CHECK(r.storage() == std::vector<double>{0, 2, 0});
  auto s = activation(x, Activation::sigmoid);
  CHECK(s[2] == 0.5);

  auto xs = random_tensor<double>({1, 1, 1, 1, 200}, 3, -20, 20);
  std::sort(xs.storage().begin(), xs.storage().end());
  auto ys = activation(xs, Activation::sigmoid);
  for (std::size_t i = 1; i < ys.size(); ++i)
    if (xs[i] > xs[i - 1]) CHECK(ys[i] > ys[i - 1]);
  for (double v : ys.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }

  Tensor5<float> far({1, 1, 1, 1, 4}, std::vector<float>{-200.f, -30.f, 30.f, 200.f});
  auto yf = activation(far, Activation::sigmoid);
  for (float v : yf.values()) {
    CHECK(v > 0.f);
    CHECK(v < 1.f);
  }
  CHECK(yf[3] == std::nextafter(1.f, 0.f));
}

TEST_CASE("softmax_lastdim examples and normalization") {
  Matrix<double> u(1, 3, 2.5);
  auto su = softmax_lastdim(u);
  for (std::size_t j = 0; j < 3; ++j) CHECK(su(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-15));

  Matrix<double> big(1, 2);
  big(0, 0) = 1000;
  auto sb = softmax_lastdim(big);
  CHECK(std::isfinite(sb(0, 0)));
  CHECK(sb(0, 0) == doctest::Approx(1.0));
  CHECK(sb(0, 1) < 1e-300);

  Matrix<double> r(17, 9);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 5);
  for (auto& v : r.data) v = n(rng);
  auto sr = softmax_lastdim(r);
  for (std::size_t i = 0; i < r.rows; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < r.cols; ++j) {
      CHECK(sr(i, j) > 0.0);
      CHECK(sr(i, j) < 1.0);
      s += sr(i, j);
    }
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("dropout identities and statistics") {
  auto x = random_tensor<double>({1, 1, 4, 4, 4}, 3);
  Rng rng(1);
  CHECK(bit_equal(dropout(x, 0.0, Mode::train, rng).output, x));
  CHECK(bit_equal(dropout(x, 0.7, Mode::eval, rng).output, x));
  CHECK_THROWS_AS(dropout(x, 1.0, Mode::train, rng), ValidationError);
  CHECK_THROWS_AS(dropout(x, -0.1, Mode::train, rng), ValidationError);

  Tensor5<double> big({1, 1, 1, 1, 100000}, 1.0);
  Rng r2(2024);
  auto d = dropout(big, 0.5, Mode::train, r2);
  double survivors = 0;
  for (double m : d.mask.values()) survivors += m != 0.0;
  CHECK(std::abs(survivors / 1e5 - 0.5) <= 0.01);
  CHECK(std::abs(tensor_reduce(d.output, ReduceOp::mean) - 1.0) <= 0.02);

  Rng a(77), b(77);
  CHECK(bit_equal(dropout(x, 0.3, Mode::train, a).output, dropout(x, 0.3, Mode::train, b).output));
}

TEST_CASE("concat_channels and split_channels") {
  auto a = random_tensor<double>({1, 2, 2, 2, 2}, 1);
  auto b = random_tensor<double>({1, 3, 2, 2, 2}, 2);
  auto c = concat_channels(a, b);
  CHECK(c.shape() == Shape5{1, 5, 2, 2, 2});
  auto [sa, sb] = split_channels(c, 2);
  CHECK(bit_equal(sa, a));
  CHECK(bit_equal(sb, b));
  CHECK(bit_equal(concat_channels(a, Tensor5<double>({1, 0, 2, 2, 2})), a));
  CHECK_THROWS_AS(concat_channels(a, Tensor5<double>({1, 1, 2, 2, 3})), ShapeError);
}

TEST_CASE("center_crop3d examples and pad3d inverse") {
  auto x = iota_tensor<double>({1, 1, 4, 4, 4});
  auto c = center_crop3d(x, {2, 2, 2});
  for (std::int64_t d = 0; d < 2; ++d)
    for (std::int64_t h = 0; h < 2; ++h)
      for (std::int64_t w = 0; w < 2; ++w) CHECK(c(0, 0, d, h, w) == x(0, 0, d + 1, h + 1, w + 1));
  CHECK(bit_equal(center_crop3d(x, {4, 4, 4}), x));

  auto x5 = iota_tensor<double>({1, 1, 5, 5, 5});
  auto c5 = center_crop3d(x5, {2, 2, 2});
  CHECK(c5(0, 0, 0, 0, 0) == x5(0, 0, 1, 1, 1));
  CHECK(c5(0, 0, 1, 1, 1) == x5(0, 0, 2, 2, 2));

  CHECK_THROWS_AS(center_crop3d(x, {5, 4, 4}), ShapeError);

  auto small = random_tensor<double>({1, 2, 3, 2, 5}, 9);
  CHECK(bit_equal(center_crop3d(pad3d(small, {8, 7, 6}), {3, 2, 5}), small));
}

TEST_CASE("unfold_windows ordering") {
  auto x = iota_tensor<double>({1, 1, 4, 4, 4});
  auto t = unfold_windows(x, {2, 2, 2});
  CHECK(t.windows == 8);
  CHECK(t.tokens == 8);
  CHECK(t.at(0, 1, 0, 0) == x(0, 0, 0, 0, 2));
  CHECK(t.at(0, 2, 0, 0) == x(0, 0, 0, 2, 0));
  CHECK(t.at(0, 4, 0, 0) == x(0, 0, 2, 0, 0));
  CHECK(t.at(0, 7, 7, 0) == x(0, 0, 3, 3, 3));

  auto one = unfold_windows(x, {4, 4, 4});
  CHECK(one.windows == 1);
  CHECK(one.tokens == 64);

  auto small = iota_tensor<double>({1, 1, 2, 2, 2}, 1.0);
  auto ts = unfold_windows(small, {2, 2, 2});
  REQUIRE(ts.tokens == 8);
  for (std::int64_t i = 0; i < 8; ++i) CHECK(ts.at(0, 0, i, 0) == double(i + 1));

  auto mc = random_tensor<double>({2, 3, 2, 2, 2}, 1);
  auto tm = unfold_windows(mc, {1, 2, 2});
  CHECK(tm.at(1, 1, 3, 2) == mc(1, 2, 1, 1, 1));

  CHECK_THROWS_AS(unfold_windows(x, {3, 2, 2}), ShapeError);
}

TEST_CASE("fold_windows inverts unfold_windows") {
  auto x = random_tensor<double>({2, 3, 4, 4, 8}, 12);
  CHECK(bit_equal(fold_windows(unfold_windows(x, {2, 2, 2}), {2, 2, 2}, {4, 4, 8}), x));

  TokenTensor<double> ones{1, 8, 8, 2, std::vector<double>(128, 1.0)};
  for (double v : elements(fold_windows(ones, {2, 2, 2}, {4, 4, 4}))) CHECK(v == 1.0);

  auto t = unfold_windows(random_tensor<double>({1, 2, 4, 4, 4}, 13), {2, 2, 2});
  for (auto& v : t.data) v = std::nextafter(v, 2.0);
  auto back = unfold_windows(fold_windows(t, {2, 2, 2}, {4, 4, 4}), {2, 2, 2});
  CHECK(back.data == t.data);

  CHECK_THROWS_AS(fold_windows(t, {2, 2, 2}, {4, 4, 8}), ShapeError);
}
