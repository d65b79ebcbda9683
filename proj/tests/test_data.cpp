#include <doctest.h>

#include <fstream>
#include <set>

#include "lungseg/data.hpp"
#include "lungseg/errors.hpp"
#include "test_util.hpp"

using namespace lungseg;
using namespace lungseg::testing;

namespace {

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
}

void write_shorts(const std::filesystem::path& p, int count) {
  std::ofstream out(p, std::ios::binary);
  for (std::int16_t v = 0; v < count; ++v) {
    const unsigned char bytes[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff)};
    out.write(reinterpret_cast<const char*>(bytes), 2);
  }
}

const char* kHeader =
    "ObjectType = Image\n"
    "NDims = 3\n"
    "BinaryData = True\n"
    "BinaryDataByteOrderMSB = False\n"
    "Offset = -10.5 20 3\n"
    "ElementSpacing = 0.7 0.8 2.5\n"
    "DimSize = 4 4 2\n"
    "ElementType = MET_SHORT\n";

}  // namespace

TEST_CASE("MetaImage axis ordering") {
  TempDir dir("mhd");
  write_text(dir / "v.mhd", std::string(kHeader) + "ElementDataFile = v.raw\n");
  write_shorts(dir / "v.raw", 32);
  auto v = load_mhd(dir / "v.mhd");
  CHECK(v.data.shape() == Shape5{1, 1, 2, 4, 4});
  CHECK(v.data(0, 0, 0, 0, 0) == 0.0f);
  CHECK(v.data(0, 0, 0, 0, 1) == 1.0f);  // x varies fastest
  CHECK(v.data(0, 0, 0, 1, 0) == 4.0f);
  CHECK(v.data(0, 0, 1, 0, 0) == 16.0f);
  CHECK(v.data(0, 0, 1, 3, 3) == 31.0f);
  CHECK(v.spacing == Vec3{0.7, 0.8, 2.5});
  CHECK(v.origin == Vec3{-10.5, 20, 3});
  CHECK(v.element_type == MetaElementType::met_short);
}

TEST_CASE("MetaImage header validation") {
  TempDir dir("mhdbad");
  write_shorts(dir / "v.raw", 32);
  write_text(dir / "nofile.mhd", kHeader);
  CHECK_THROWS_AS(load_mhd(dir / "nofile.mhd"), ValidationError);

  write_text(dir / "local.mhd", std::string(kHeader) + "ElementDataFile = LOCAL\n");
  CHECK_THROWS_AS(load_mhd(dir / "local.mhd"), ValidationError);

  write_text(dir / "msb.mhd", "ElementByteOrderMSB = True\n" + std::string(kHeader) + "ElementDataFile = v.raw\n");
  CHECK_THROWS_AS(load_mhd(dir / "msb.mhd"), ValidationError);

  write_text(dir / "short.mhd", std::string(kHeader) + "ElementDataFile = missing.raw\n");
  CHECK_THROWS_AS(load_mhd(dir / "short.mhd"), IoError);

  write_shorts(dir / "small.raw", 30);
  write_text(dir / "small.mhd", std::string(kHeader) + "ElementDataFile = small.raw\n");
  CHECK_THROWS_AS(load_mhd(dir / "small.mhd"), ValidationError);

  CHECK_THROWS_AS(load_mhd(dir / "absent.mhd"), IoError);
}

TEST_CASE("MetaImage write/read round-trip is bit-exact") {
  TempDir dir("mhdrt");
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> u(-1024, 3071);
  MetaVolume v;
  v.data = Tensor5<float>({1, 1, 3, 5, 7});
  for (auto& x : v.data.values()) x = static_cast<float>(u(rng));
  v.spacing = {0.625, 0.625, 1.25};
  v.origin = {-180.3, -200.0, 1024.5};
  write_mhd(dir / "rt.mhd", v);
  auto back = load_mhd(dir / "rt.mhd");
  CHECK(bit_equal(back.data, v.data));
  CHECK(back.spacing == v.spacing);
  CHECK(back.origin == v.origin);

  MetaVolume f;
  f.element_type = MetaElementType::met_float;
  f.data = random_tensor<float>({1, 1, 2, 3, 4}, 5, -1000, 1000);
  write_mhd(dir / "f.mhd", f);
  CHECK(bit_equal(load_mhd(dir / "f.mhd").data, f.data));

  MetaVolume bad = v;
  bad.data[0] = 40000.0f;
  CHECK_THROWS_AS(write_mhd(dir / "bad.mhd", bad), ValidationError);
}

TEST_CASE("resize_inplane examples") {
  Tensor5<float> c({1, 1, 2, 3, 5}, 7.25f);
  for (auto [h, w] : {std::pair{4, 4}, std::pair{1, 9}, std::pair{10, 2}})
    for (auto kind : {ResizeKind::linear, ResizeKind::nearest})
      for (float v : elements(resize_inplane(c, h, w, kind))) CHECK(v == 7.25f);

  Tensor5<float> s({1, 1, 1, 2, 2}, std::vector<float>{0, 1, 2, 3});
  auto r = resize_inplane(s, 4, 4, ResizeKind::linear);
  CHECK(r(0, 0, 0, 0, 0) == 0.0f);
  CHECK(r(0, 0, 0, 0, 3) == 1.0f);
  CHECK(r(0, 0, 0, 3, 0) == 2.0f);
  CHECK(r(0, 0, 0, 3, 3) == 3.0f);
  CHECK(r(0, 0, 0, 1, 1) == doctest::Approx(0.75f));  // 0.25 along each axis

  auto mask = binarize_mask(random_tensor<float>({1, 1, 2, 7, 9}, 4, 0, 1));
  for (float v : elements(resize_inplane(mask, 13, 5, ResizeKind::nearest))) CHECK((v == 0.f || v == 1.f));
  CHECK_THROWS_AS(resize_inplane(mask, 0, 3, ResizeKind::linear), ValidationError);
}

TEST_CASE("crop_about_median examples") {
  auto v = iota_tensor<float>({1, 1, 100, 1, 1});
  auto c = crop_about_median(v);
  CHECK(c.depth() == 23);
  CHECK(c[0] == 38.0f);
  CHECK(c[22] == 60.0f);

  auto v23 = random_tensor<float>({1, 1, 23, 2, 2}, 1);
  CHECK(bit_equal(crop_about_median(v23), v23));
  CHECK_THROWS_AS(crop_about_median(Tensor5<float>({1, 1, 22, 2, 2})), ValidationError);
  for (std::int64_t d = 23; d < 200; d += 7) CHECK(crop_about_median(Tensor5<float>({1, 1, d, 1, 1})).depth() == 23);
}

TEST_CASE("crop_nodule_block bookkeeping") {
  auto v = random_tensor<float>({1, 1, 128, 128, 128}, 2);
  auto inner = crop_nodule_block(v, {60, 70, 64});
  CHECK(inner.block.shape() == Shape5{1, 1, 64, 64, 64});
  CHECK(inner.pad_before == Index3{0, 0, 0});
  CHECK(inner.pad_after == Index3{0, 0, 0});
  CHECK(inner.block(0, 0, 32, 32, 32) == v(0, 0, 60, 70, 64));
  CHECK(inner.start == Index3{28, 38, 32});

  auto corner = crop_nodule_block(v, {0, 0, 127});
  CHECK(corner.block.shape() == Shape5{1, 1, 64, 64, 64});
  CHECK(corner.pad_before == Index3{32, 32, 0});
  CHECK(corner.pad_after == Index3{0, 0, 31});
  CHECK(corner.block(0, 0, 32, 32, 32) == v(0, 0, 0, 0, 127));
  CHECK(corner.block(0, 0, 0, 0, 0) == 0.0f);
  CHECK(corner.block(0, 0, 63, 63, 63) == 0.0f);
}

TEST_CASE("intensity window and mask binarization") {
  Tensor5<float> hu({1, 1, 1, 1, 4}, std::vector<float>{-2000, -1000, -300, 1000});
  auto n = normalize_intensity(hu);
  CHECK(n.storage() == std::vector<float>{0.f, 0.f, 0.5f, 1.f});
  Tensor5<float> m({1, 1, 1, 1, 3}, std::vector<float>{0.49f, 0.5f, 3.f});
  CHECK(binarize_mask(m).storage() == std::vector<float>{0.f, 1.f, 1.f});
}

TEST_CASE("nodule phantom mask matches an enumerated sphere") {
  const Index3 dims{32, 32, 32}, c{16, 16, 16};
  auto s = make_nodule_phantom(dims, c, 4.0, 1);
  std::int64_t expect = 0;
  for (std::int64_t d = 0; d < 32; ++d)
    for (std::int64_t h = 0; h < 32; ++h)
      for (std::int64_t w = 0; w < 32; ++w)
        expect += (d - 16) * (d - 16) + (h - 16) * (h - 16) + (w - 16) * (w - 16) <= 16;
  CHECK(tensor_reduce(s.mask, ReduceOp::sum) == doctest::Approx(double(expect)));
  CHECK(expect == 257);
}

TEST_CASE("phantoms are deterministic, binary and inside the bright region") {
  for (auto kind : {PhantomKind::nodule, PhantomKind::lung}) {
    auto a = make_phantom(kind, {24, 32, 32}, 42, "p");
    auto b = make_phantom(kind, {24, 32, 32}, 42, "p");
    auto c = make_phantom(kind, {24, 32, 32}, 43, "p");
    CHECK(bit_equal(a.image, b.image));
    CHECK(bit_equal(a.mask, b.mask));
    CHECK_FALSE(bit_equal(a.image, c.image));
    CHECK_NOTHROW(a.validate());
    CHECK(tensor_reduce(a.mask, ReduceOp::sum) > 0);
  }
  auto n = make_phantom(PhantomKind::nodule, {32, 32, 32}, 7);
  for (std::size_t i = 0; i < n.mask.size(); ++i)
    if (n.mask[i] == 1.0f) CHECK(n.image[i] > -400.0f);
  auto l = make_phantom(PhantomKind::lung, {16, 32, 32}, 7);
  for (std::size_t i = 0; i < l.mask.size(); ++i)
    if (l.mask[i] == 1.0f) CHECK(l.image[i] < -400.0f);
  CHECK_THROWS_AS(make_phantom(PhantomKind::nodule, {16, 32, 32}, 1), ValidationError);
}

TEST_CASE("split_dataset sizes and determinism") {
  auto ids = [](int n) {
    std::vector<std::string> v;
    for (int i = 0; i < n; ++i) v.push_back("s" + std::to_string(i));
    return v;
  };
  auto ten = split_dataset(ids(10), 1);
  CHECK(ten.train.size() == 6);
  CHECK(ten.val.size() == 2);
  CHECK(ten.test.size() == 2);
  auto big = split_dataset(ids(888), 3);
  CHECK(big.train.size() == 534);
  CHECK(big.val.size() == 177);
  CHECK(big.test.size() == 177);
  std::set<std::string> all(big.train.begin(), big.train.end());
  all.insert(big.val.begin(), big.val.end());
  all.insert(big.test.begin(), big.test.end());
  CHECK(all.size() == 888);
  auto again = split_dataset(ids(888), 3);
  CHECK(again.train == big.train);
  CHECK(again.val == big.val);
  CHECK(again.test == big.test);
  auto eight = split_dataset(ids(8), 0);
  CHECK(eight.train.size() == 6);
  CHECK(eight.val.size() == 1);
  CHECK(eight.test.size() == 1);

  CHECK_THROWS_AS(split_dataset({}, 0), ValidationError);
  CHECK_THROWS_AS(split_dataset({"a", "a"}, 0), ValidationError);
}

TEST_CASE("manifest and sample storage round-trip") {
  TempDir dir("store");
  auto s = make_phantom(PhantomKind::nodule, {32, 32, 32}, 5, "nod_a");
  s.spacing = {0.7, 0.7, 1.25};
  s.origin = {1, 2, 3};
  save_sample(dir.path(), s);
  save_sample(dir.path(), make_phantom(PhantomKind::nodule, {32, 32, 32}, 6, "nod_b"));
  CHECK(list_samples(dir.path()) == std::vector<std::string>{"nod_a", "nod_b"});
  auto back = load_sample(dir.path(), "nod_a");
  CHECK(bit_equal(back.image, s.image));
  CHECK(bit_equal(back.mask, s.mask));
  CHECK(back.spacing == s.spacing);
  CHECK(back.origin == s.origin);
  CHECK_THROWS_AS(load_sample(dir.path(), "nope"), IoError);

  auto m = split_dataset({"nod_a", "nod_b", "c", "d", "e"}, 9);
  save_manifest(dir / "m.json", m);
  auto mb = load_manifest(dir / "m.json");
  CHECK(to_json(mb) == to_json(m));
  CHECK(manifest_data_dir(dir / "m.json", mb) == dir.path());
  m.data_dir = "samples";
  CHECK(manifest_data_dir(dir / "m.json", m) == dir.path() / "samples");

  write_text(dir / "dup.json", R"({"train":["a"],"val":["a"],"test":[],"seed":0})");
  CHECK_THROWS_AS(load_manifest(dir / "dup.json"), ValidationError);
}
