#include <doctest.h>

#include <cmath>

#include "lungseg/blocks.hpp"
#include "lungseg/errors.hpp"
#include "test_util.hpp"

using namespace lungseg;
using namespace lungseg::testing;

namespace {

void zero_layer(Conv3dLayer<double>& l) {
  l.params().weight.fill(0.0);
  l.params().bias.fill(0.0);
}

/// Dense attention over every voxel of batch `b`, computed straight from the
/// module's weights without any window machinery.
Tensor5<double> global_attention_oracle(const Tensor5<double>& x, EfficientSASM<double>& m) {
  const std::int64_t C = x.channels(), N = x.spatial_size();
  const auto& wq = m.qkv_proj.params().weight;  // (3C, C, 1,1,1)
  const auto& bq = m.qkv_proj.params().bias;
  const auto& wo = m.out_proj.params().weight;  // (C, C, 1,1,1)
  const auto& bo = m.out_proj.params().bias;
  Tensor5<double> y = x;
  for (std::int64_t b = 0; b < x.batch(); ++b) {
    std::vector<std::vector<double>> q(N, std::vector<double>(C)), k = q, v = q;
    for (std::int64_t i = 0; i < N; ++i)
      for (std::int64_t o = 0; o < C; ++o) {
        double aq = bq[o], ak = bq[C + o], av = bq[2 * C + o];
        for (std::int64_t c = 0; c < C; ++c) {
          const double xi = x.channel_ptr(b, c)[i];
          aq += wq[static_cast<std::size_t>(o * C + c)] * xi;
          ak += wq[static_cast<std::size_t>((C + o) * C + c)] * xi;
          av += wq[static_cast<std::size_t>((2 * C + o) * C + c)] * xi;
        }
        q[i][o] = aq;
        k[i][o] = ak;
        v[i][o] = av;
      }
    for (std::int64_t i = 0; i < N; ++i) {
      std::vector<double> s(N);
      double mx = -1e300;
      for (std::int64_t j = 0; j < N; ++j) {
        double dot = 0;
        for (std::int64_t c = 0; c < C; ++c) dot += q[i][c] * k[j][c];
        s[j] = dot / std::sqrt(double(C));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      std::vector<double> o(C, 0.0);
      for (std::int64_t j = 0; j < N; ++j)
        for (std::int64_t c = 0; c < C; ++c) o[c] += s[j] / z * v[j][c];
      for (std::int64_t oc = 0; oc < C; ++oc) {
        double p = bo[oc];
        for (std::int64_t c = 0; c < C; ++c) p += wo[static_cast<std::size_t>(oc * C + c)] * o[c];
        y.channel_ptr(b, oc)[i] += m.gamma[0] * p;
      }
    }
  }
  return y;
}

}  // namespace

TEST_CASE("residual block with a zeroed f-path reduces to ReLU(x)") {
  Rng rng(1);
  ResidualBlock<double> rb(3, 3, 1, rng);
  CHECK_FALSE(rb.has_projection());
  zero_layer(rb.layer1);
  zero_layer(rb.layer2);
  rb.bn1.beta.fill(0.0);
  rb.bn2.beta.fill(0.0);
  auto x = random_tensor<double>({1, 3, 5, 5, 5}, 2);
  auto y = rb.forward(x, Mode::train);
  CHECK(bit_equal(y, activation(x, Activation::relu)));
}

TEST_CASE("strided residual block halves the spatial size") {
  Rng rng(2);
  ResidualBlock<double> rb(2, 4, 2, rng);
  CHECK(rb.has_projection());
  auto y = rb.forward(random_tensor<double>({1, 2, 8, 8, 8}, 3), Mode::train);
  CHECK(y.shape() == Shape5{1, 4, 4, 4, 4});
  CHECK_THROWS_AS(rb.forward(random_tensor<double>({1, 3, 8, 8, 8}, 3), Mode::train), ShapeError);
}

TEST_CASE("attention gate shape and range") {
  Rng rng(3);
  AttentionGate<double> g(4, 8, rng);
  auto x = random_tensor<double>({1, 4, 6, 6, 6}, 4);
  auto gs = random_tensor<double>({1, 8, 3, 3, 3}, 5);
  auto z = g.forward(x, gs);
  CHECK(z.shape() == x.shape());
  double maxft = 0;
  for (double v : g.transformed_input().values()) maxft = std::max(maxft, std::abs(v));
  for (double v : z.values()) CHECK(std::abs(v) <= maxft);
  for (double v : g.mask().values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("attention gate with zero W_y halves f_t(x)") {
  Rng rng(4);
  AttentionGate<double> g(2, 4, rng);
  zero_layer(g.w_y);
  auto x = random_tensor<double>({1, 2, 4, 4, 4}, 6);
  auto z = g.forward(x, random_tensor<double>({1, 4, 2, 2, 2}, 7));
  for (double v : g.mask().values()) CHECK(v == 0.5);
  const auto& ft = g.transformed_input();
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.5 * ft[i]);
}

TEST_CASE("SASM with gamma 0 is the exact identity") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    EfficientSASM<float> m(4, {2, 2, 2}, rng);
    CHECK(m.gamma[0] == 0.0f);
    auto x = random_tensor<float>({2, 4, 4, 4, 4}, seed);
    CHECK(bit_equal(m.forward(x), x));
  }
  Rng rng(9);
  EfficientSASM<double> md(3, {2, 2, 2}, rng);
  auto xd = random_tensor<double>({1, 3, 4, 4, 8}, 9, -50, 50);
  CHECK(bit_equal(md.forward(xd), xd));
}

TEST_CASE("single-window SASM matches the dense global-attention oracle") {
  for (std::uint64_t seed : {11u, 12u}) {
    Rng rng(seed);
    EfficientSASM<double> m(3, {4, 4, 4}, rng);
    m.gamma[0] = 0.8;
    auto x = random_tensor<double>({2, 3, 4, 4, 4}, seed, -2, 2);
    auto y = m.forward(x);
    auto ref = global_attention_oracle(x, m);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double rel = std::abs(y[i] - ref[i]) / std::max(std::abs(ref[i]), 1e-12);
      CHECK(rel <= 1e-6);
    }
  }
}

TEST_CASE("SASM attention rows sum to one") {
  Rng rng(13);
  EfficientSASM<double> m(4, {2, 2, 2}, rng);
  m.gamma[0] = 0.3;
  m.forward(random_tensor<double>({2, 4, 4, 4, 4}, 14, -3, 3));
  REQUIRE(m.attention().size() == 16);
  for (const auto& a : m.attention()) {
    CHECK(a.rows == 8);
    for (std::size_t i = 0; i < a.rows; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < a.cols; ++j) s += a(i, j);
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("SASM rejects indivisible input") {
  Rng rng(15);
  EfficientSASM<double> m(2, {2, 2, 2}, rng);
  CHECK_THROWS_AS(m.forward(random_tensor<double>({1, 2, 3, 4, 4}, 1)), ShapeError);
  CHECK_THROWS_AS(m.forward(random_tensor<double>({1, 3, 4, 4, 4}, 1)), ShapeError);
}

TEST_CASE("conv block eval mode is deterministic and ignores dropout") {
  Rng rng(5);
  ConvBlock<double> cb(2, 3, 0.5, rng);
  auto x = random_tensor<double>({1, 2, 4, 4, 4}, 8);
  cb.forward(x, Mode::train, rng);  // populate running statistics
  Rng r1(1), r2(999);
  auto a = cb.forward(x, Mode::eval, r1);
  auto b = cb.forward(x, Mode::eval, r2);
  CHECK(bit_equal(a, b));
  CHECK(a.shape() == Shape5{1, 3, 4, 4, 4});
}

TEST_CASE("conv block with zero weights and offsets outputs zeros") {
  Rng rng(6);
  ConvBlock<double> cb(2, 3, 0.2, rng);
  zero_layer(cb.layer1);
  zero_layer(cb.layer2);
  cb.bn1.beta.fill(0.0);
  cb.bn2.beta.fill(0.0);
  auto y = cb.forward(random_tensor<double>({1, 2, 4, 4, 4}, 9), Mode::train, rng);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("blocks expose named parameters with gradients") {
  Rng rng(7);
  ResidualBlock<float> rb(2, 4, 2, rng);
  ParamList<float> ps;
  rb.collect(ps, "enc1");
  std::size_t buffers = 0;
  for (const auto& p : ps) {
    CHECK(p.name.rfind("enc1.", 0) == 0);
    buffers += !p.trainable();
  }
  CHECK(buffers == 4);  // two BN layers, mean and variance each
}
