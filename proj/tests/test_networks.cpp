#include <doctest.h>

#include <set>

#include "lungseg/errors.hpp"
#include "lungseg/networks.hpp"
#include "test_util.hpp"

using namespace lungseg;
using namespace lungseg::testing;

namespace {

NetworkConfig micro_lung(Index3 spatial) {
  auto c = NetworkConfig::lung_default();
  c.stage_channels = {2, 4, 8, 16};
  c.input_spatial = spatial;
  return c;
}

NetworkConfig micro_nodule(bool sasm, double dropout = 0.0) {
  auto c = NetworkConfig::nodule_default();
  c.stage_channels = {2, 4, 8, 16};
  c.input_spatial = {32, 32, 32};
  c.use_sasm = sasm;
  c.dropout_rate = dropout;
  return c;
}

template <typename T>
void check_open_unit(const Tensor5<T>& p) {
  for (T v : p.values()) {
    CHECK(v > T(0));
    CHECK(v < T(1));
  }
}

}  // namespace

TEST_CASE("lung net keeps unpadded input shape") {
  for (Index3 s : {Index3{23, 30, 30}, Index3{16, 32, 32}, Index3{17, 20, 33}}) {
    Rng rng(1);
    auto cfg = micro_lung(s);
    AttentionResUNet<float> net(cfg, rng);
    auto x = random_tensor<float>({1, 1, s.d, s.h, s.w}, 2, 0, 1);
    auto p = net.forward(x, Mode::train, rng);
    CHECK(p.shape() == x.shape());
    check_open_unit(p);
    auto pe = net.forward(x, Mode::eval, rng);
    CHECK(pe.shape() == x.shape());
  }
}

TEST_CASE("lung net encoder halves four times and decoder restores the padded size") {
  Rng rng(2);
  auto cfg = micro_lung({23, 30, 30});
  CHECK(cfg.padded_spatial() == Index3{32, 32, 32});
  AttentionResUNet<float> net(cfg, rng);
  net.forward(random_tensor<float>({1, 1, 23, 30, 30}, 3), Mode::train, rng);
  const auto& tr = net.trace();
  for (int i = 0; i < 4; ++i) {
    const std::int64_t e = 32 >> i;
    CHECK(spatial_of(tr.encoder[i].shape()) == Index3{e, e, e});
    CHECK(tr.encoder[i].channels() == cfg.stage_channels[i]);
    CHECK(spatial_of(tr.decoder[i].shape()) == Index3{e, e, e});
    CHECK(tr.attention[i].shape() == tr.encoder[i].shape());
  }
  CHECK(spatial_of(tr.bottleneck.shape()) == Index3{2, 2, 2});
  CHECK(tr.bottleneck.channels() == 32);
}

TEST_CASE("nodule net shape, range and trace") {
  Rng rng(3);
  auto cfg = micro_nodule(true, 0.2);
  EfficientSasmUNet<float> net(cfg, rng);
  auto x = random_tensor<float>({2, 1, 32, 32, 32}, 4, 0, 1);
  auto p = net.forward(x, Mode::train, rng);
  CHECK(p.shape() == x.shape());
  check_open_unit(p);
  const auto& tr = net.trace();
  for (int i = 0; i < 4; ++i) {
    const std::int64_t e = 32 >> i;
    CHECK(spatial_of(tr.encoder[i].shape()) == Index3{e, e, e});
    CHECK(spatial_of(tr.decoder[i].shape()) == Index3{e, e, e});
  }
  CHECK(spatial_of(tr.bottleneck.shape()) == Index3{2, 2, 2});
}

TEST_CASE("nodule net with SASM gamma 0 equals the net without SASM") {
  Rng r1(5), r2(6);
  EfficientSasmUNet<float> with(micro_nodule(true), r1);
  EfficientSasmUNet<float> without(micro_nodule(false), r2);
  REQUIRE(with.sasm() != nullptr);
  CHECK(with.sasm()->gamma[0] == 0.0f);
  CHECK(without.sasm() == nullptr);
  auto src = with.parameters();
  auto dst = without.parameters();
  CHECK(dst.size() < src.size());
  copy_values(src, dst);

  auto x = random_tensor<float>({1, 1, 32, 32, 32}, 7, 0, 1);
  for (Mode m : {Mode::train, Mode::eval}) {
    Rng a(8), b(8);
    CHECK(bit_equal(with.forward(x, m, a), without.forward(x, m, b)));
  }
}

TEST_CASE("network forward is deterministic for a fixed seed") {
  auto build_and_run = [] {
    Rng rng(10);
    auto net = make_network<float>(micro_nodule(true, 0.2), rng);
    auto x = random_tensor<float>({1, 1, 32, 32, 32}, 11, 0, 1);
    Rng drop(12);
    return net->forward(x, Mode::train, drop);
  };
  CHECK(bit_equal(build_and_run(), build_and_run()));
}

TEST_CASE("network input validation") {
  Rng rng(13);
  auto net = make_network<float>(micro_nodule(true), rng);
  CHECK_THROWS_AS(net->forward(Tensor5<float>({1, 1, 16, 32, 32}), Mode::eval, rng), ShapeError);
  CHECK_THROWS_AS(net->forward(Tensor5<float>({1, 2, 32, 32, 32}), Mode::eval, rng), ShapeError);

  auto bad = micro_nodule(true);
  bad.input_spatial = {24, 32, 32};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = micro_nodule(true);
  bad.input_spatial = {16, 16, 16};  // bottleneck 1^3, window 2^3
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad.use_sasm = false;
  CHECK_NOTHROW(bad.validate());
  bad = micro_nodule(true);
  bad.dropout_rate = 1.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = micro_nodule(true);
  bad.output_channels = 2;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_THROWS_AS(parse_net_kind("liver"), ValidationError);
}

TEST_CASE("network config JSON round-trip") {
  for (auto c : {micro_lung({23, 30, 30}), micro_nodule(true, 0.2), NetworkConfig::lung_default(),
                 NetworkConfig::nodule_default()}) {
    auto back = network_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
  }
  auto partial = network_config_from_json({{"net", "lung"}});
  CHECK(partial.stage_channels == NetworkConfig::lung_default().stage_channels);
  CHECK(partial.input_spatial == Index3{23, 300, 300});
  CHECK_THROWS_AS(network_config_from_json({{"net", "nodule"}, {"stage_channels", {1, 2}}}), ValidationError);
  CHECK_THROWS_AS(network_config_from_json({{"net", "nodule"}, {"dropout_rate", "high"}}), ValidationError);
}

TEST_CASE("parameter names are unique and cover both nets") {
  for (auto cfg : {micro_lung({16, 16, 16}), micro_nodule(true)}) {
    Rng rng(14);
    auto net = make_network<float>(cfg, rng);
    auto ps = net->parameters();
    std::set<std::string> names;
    for (const auto& p : ps) names.insert(p.name);
    CHECK(names.size() == ps.size());
    CHECK(count_trainable(ps) > 0);
  }
}

TEST_CASE("thresholding examples and monotonicity") {
  Tensor5<float> p({1, 1, 1, 1, 2}, std::vector<float>{0.4f, 0.6f});
  CHECK(threshold_probabilities(p, 0.5).storage() == std::vector<float>{0.f, 1.f});
  CHECK_THROWS_AS(threshold_probabilities(p, 1.0), ValidationError);
  CHECK_THROWS_AS(threshold_probabilities(p, 0.0), ValidationError);

  Rng rng(15);
  auto net = make_network<float>(micro_nodule(true), rng);
  auto x = random_tensor<float>({1, 1, 32, 32, 32}, 16, 0, 1);
  double prev = 1e300;
  for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    auto m = predict_volume(*net, x, t);
    for (float v : m.values()) CHECK((v == 0.f || v == 1.f));
    const double fg = tensor_reduce(m, ReduceOp::sum);
    CHECK(fg <= prev);
    prev = fg;
  }
}
