#include <doctest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "lungseg/cli.hpp"
#include "lungseg/data.hpp"
#include "test_util.hpp"

using namespace lungseg;
using namespace lungseg::testing;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "lungseg");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  CliRun r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

void write_micro_config(const fs::path& p) {
  std::ofstream(p) << R"({"net":{"net":"nodule","stage_channels":[2,4,8,16],"input_geometry":[1,32,32,32]},"lr":0.001})";
}

}  // namespace

TEST_CASE("help and argument errors") {
  auto h = cli({"--help"});
  CHECK(h.code == 0);
  CHECK(h.out.find("gradcheck") != std::string::npos);
  CHECK(cli({"train", "--help"}).code == 0);
  CHECK(cli({}).code == 1);
  CHECK(cli({"bogus"}).code == 1);
  CHECK(cli({"split", "--data"}).code == 1);
  CHECK(cli({"phantom-gen", "--out", "x", "--kind", "liver"}).code == 1);
  CHECK(cli({"phantom-gen", "--out", "x", "--dims", "3,4"}).code == 1);
}

TEST_CASE("gradcheck subcommand prints JSON reports") {
  auto r = cli({"gradcheck", "--target", "residual_block", "--seed", "7"});
  CHECK(r.code == 0);
  auto j = nlohmann::json::parse(r.out);
  REQUIRE(j.is_array());
  CHECK(j.size() > 0);
  for (const auto& rep : j) CHECK(rep["pass"] == true);
  CHECK(r.err.find("effective config") != std::string::npos);
  CHECK(cli({"gradcheck", "--target", "nope"}).code == 1);
}

TEST_CASE("phantom-gen is deterministic") {
  TempDir dir("cliphantom");
  auto a = cli({"phantom-gen", "--kind", "nodule", "--count", "8", "--dims", "32", "--out", (dir / "a").string(),
                "--seed", "1"});
  auto b = cli({"phantom-gen", "--kind", "nodule", "--count", "8", "--dims", "32", "--out", (dir / "b").string(),
                "--seed", "1"});
  CHECK(a.code == 0);
  CHECK(b.code == 0);
  CHECK(list_samples(dir / "a").size() == 8);
  CHECK(tree(dir / "a") == tree(dir / "b"));
  CHECK(cli({"phantom-gen", "--kind", "lung", "--count", "2", "--dims", "16,32,32", "--out",
             (dir / "l").string()})
            .code == 0);
  CHECK(list_samples(dir / "l").size() == 2);
}

TEST_CASE("split, train, eval, predict and heatmap end to end") {
  TempDir dir("clie2e");
  const auto data = (dir / "data").string(), man = (dir / "m.json").string(), cfg = (dir / "c.json").string();
  REQUIRE(cli({"phantom-gen", "--count", "5", "--dims", "32", "--out", data, "--seed", "3"}).code == 0);
  REQUIRE(cli({"split", "--data", data, "--out", man, "--seed", "3"}).code == 0);
  auto m = load_manifest(man);
  CHECK(m.train.size() == 3);
  write_micro_config(cfg);

  const auto out = (dir / "run").string();
  auto t = cli({"train", "--net", "nodule", "--manifest", man, "--config", cfg, "--epochs", "2", "--out", out});
  CHECK(t.code == 0);
  const auto log = slurp(dir / "run" / "log.csv");
  CHECK(std::count(log.begin(), log.end(), '\n') == 3);
  CHECK(fs::exists(dir / "run" / "last" / "manifest.json"));
  CHECK(t.err.find("\"lr\":0.001") != std::string::npos);

  auto resumed = cli({"train", "--manifest", man, "--config", cfg, "--epochs", "3", "--out", (dir / "run2").string(),
                      "--resume", (dir / "run" / "last").string()});
  CHECK(resumed.code == 0);
  const auto log2 = slurp(dir / "run2" / "log.csv");
  CHECK(std::count(log2.begin(), log2.end(), '\n') == 4);

  auto e = cli({"eval", "--checkpoint", (dir / "run" / "last").string(), "--manifest", man, "--split", "test"});
  CHECK(e.code == 0);
  auto ej = nlohmann::json::parse(e.out);
  CHECK(ej["volumes"].size() == 1);
  CHECK(ej["mean"].contains("dice"));
  CHECK(cli({"eval", "--checkpoint", (dir / "run" / "last").string(), "--manifest", man, "--split", "bogus"}).code == 1);

  const auto stem = (dir / "pred").string();
  auto p = cli({"predict", "--checkpoint", (dir / "run" / "last").string(), "--data", data, "--id", m.test[0],
                "--out", stem});
  CHECK(p.code == 0);
  CHECK(nlohmann::json::parse(p.out).contains("metrics"));
  auto prob = load_tensor<float>(stem + ".prob");
  CHECK(prob.shape() == Shape5{1, 1, 32, 32, 32});

  auto hm = cli({"heatmap", "--prob", stem + ".prob", "--out", (dir / "h.pgm").string()});
  CHECK(hm.code == 0);
  CHECK(slurp(dir / "h.pgm").rfind("P5\n32 32\n255\n", 0) == 0);
  CHECK(cli({"heatmap", "--prob", stem + ".prob", "--out", (dir / "h.ppm").string(), "--color"}).code == 0);
  CHECK(cli({"heatmap", "--prob", stem + ".prob", "--out", (dir / "x.pgm").string(), "--slice", "99"}).code == 1);
}

TEST_CASE("exit code 2 for I/O failures") {
  TempDir dir("cliio");
  CHECK(cli({"train", "--manifest", (dir / "missing.json").string()}).code == 2);
  CHECK(cli({"split", "--data", (dir / "nowhere").string(), "--out", (dir / "m.json").string()}).code == 2);
  CHECK(cli({"heatmap", "--prob", (dir / "nothing").string(), "--out", (dir / "h.pgm").string()}).code == 2);
}

TEST_CASE("preprocess turns MetaImage volumes into samples") {
  TempDir dir("clipre");
  auto ph = make_phantom(PhantomKind::lung, {30, 40, 48}, 4);
  MetaVolume img{ph.image, {0.7, 0.7, 2.0}, {0, 0, 0}, MetaElementType::met_short};
  for (auto& v : img.data.values()) v = std::round(v);
  MetaVolume msk{ph.mask, {0.7, 0.7, 2.0}, {0, 0, 0}, MetaElementType::met_uchar};
  write_mhd(dir / "img.mhd", img);
  write_mhd(dir / "msk.mhd", msk);

  auto r = cli({"preprocess", "--image", (dir / "img.mhd").string(), "--mask", (dir / "msk.mhd").string(), "--mode",
                "lung", "--size", "64", "--out", (dir / "s").string(), "--id", "case1"});
  CHECK(r.code == 0);
  auto s = load_sample(dir / "s", "case1");
  CHECK(s.image.shape() == Shape5{1, 1, 23, 64, 64});
  CHECK(s.mask.shape() == s.image.shape());

  auto n = cli({"preprocess", "--image", (dir / "img.mhd").string(), "--mask", (dir / "msk.mhd").string(), "--mode",
                "nodule", "--center", "15,20,24", "--block", "32", "--out", (dir / "s").string(), "--id", "case2"});
  CHECK(n.code == 0);
  CHECK(load_sample(dir / "s", "case2").image.shape() == Shape5{1, 1, 32, 32, 32});

  CHECK(cli({"preprocess", "--image", (dir / "img.mhd").string(), "--mask", (dir / "msk.mhd").string(), "--mode",
             "nodule", "--out", (dir / "s").string()})
            .code == 1);
  CHECK(cli({"preprocess", "--image", (dir / "none.mhd").string(), "--mask", (dir / "msk.mhd").string(), "--out",
             (dir / "s").string()})
            .code == 2);
}
