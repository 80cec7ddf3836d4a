#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dgs/checkpoint.hpp"
#include "dgs/model.hpp"
#include "dgs/rng.hpp"

using namespace dgs;

namespace {

Tensor random_image(Rng& rng, int n, int h, int w) {
  Tensor t(n, 3, h, w);
  for (float& v : t.data) v = rng.uniform(0.0f, 1.0f);
  return t;
}

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.stages = {{1, 8}, {1, 8}, {1, 16}, {1, 16}};
  cfg.input_w = cfg.input_h = 64;
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("default model head shapes at 640 and 320") {
  Model m = Model::build(ModelConfig{}, 1);
  {
    Rng rng(2);
    Tape t(false);
    auto outs = m.forward(t, t.leaf_const(random_image(rng, 1, 640, 640)), Phase::kEval);
    REQUIRE(outs.size() == 2);
    CHECK(t.val(outs[0]).shape == Shape{1, 21, 40, 40});
    CHECK(t.val(outs[1]).shape == Shape{1, 21, 20, 20});
  }
  {
    Rng rng(3);
    Tape t(false);
    auto outs = m.forward(t, t.leaf_const(random_image(rng, 1, 320, 320)), Phase::kEval);
    CHECK(t.val(outs[0]).shape == Shape{1, 21, 20, 20});
    CHECK(t.val(outs[1]).shape == Shape{1, 21, 10, 10});
  }
}

TEST_CASE("stride law holds across input sizes") {
  Model m = Model::build(micro_config(), 4);
  Rng rng(5);
  for (int s : {32, 64, 96, 160}) {
    Tape t(false);
    auto outs = m.forward(t, t.leaf_const(random_image(rng, 1, s, s)), Phase::kEval);
    CHECK(t.val(outs[0]).shape == Shape{1, 21, s / 16, s / 16});
    CHECK(t.val(outs[1]).shape == Shape{1, 21, s / 32, s / 32});
  }
}

TEST_CASE("graph has exactly two heads by default, three for the extended variant") {
  Model m2 = Model::build(ModelConfig{}, 1);
  CHECK(m2.heads.size() == 2);
  Model m3 = Model::build(ModelConfig::preset("dgsm"), 1);
  CHECK(m3.heads.size() == 3);
}

TEST_CASE("default params are below the 3-head variant built from the same config") {
  Model m2 = Model::build(ModelConfig{}, 1);
  ModelConfig cfg3;
  cfg3.strides = {8, 16, 32};
  cfg3.anchors = ModelConfig::preset("dgsm").anchors;
  Model m3 = Model::build(cfg3, 1);
  CHECK(m2.param_count() < m3.param_count());
}

TEST_CASE("analytic parameter count equals buffer enumeration per layer and in total") {
  for (const char* preset : {"dgst_dgsm", "dgsm", "dgst", "baseline3"}) {
    Model m = Model::build(ModelConfig::preset(preset), 9);
    Summary s = m.summarize(m.cfg.input_h, m.cfg.input_w);
    std::int64_t total = 0;
    for (const auto& row : s.rows) {
      INFO(preset, " layer ", row.name);
      CHECK(row.params == row.params_enum);
      total += row.params;
    }
    CHECK(total == s.total_params);
    CHECK(s.total_params == m.param_count());
    CHECK(s.total_params == m.enumerated_param_count());
  }
}

TEST_CASE("default model total sits within 20 percent of the reported 2.02M") {
  Model m = Model::build(ModelConfig{}, 1);
  double total_m = static_cast<double>(m.param_count()) / 1e6;
  CHECK(std::fabs(total_m - 2.02) / 2.02 <= 0.20);
}

TEST_CASE("conv MAC formulas") {
  // 1x1 conv, in=8, out=8, g=1 on a 4x4 map -> 8*8*16
  CHECK(conv_macs(ConvSpec{8, 8, 1, 1, 1, false}, Shape{1, 8, 4, 4}) == 1024);
  CHECK(conv_macs(ConvSpec{8, 8, 1, 1, 2, false}, Shape{1, 8, 4, 4}) == 512);
}

TEST_CASE("model MACs strictly decrease as pw_groups increase") {
  std::int64_t prev = -1;
  for (int g : {1, 2, 4}) {
    ModelConfig cfg;
    cfg.pw_groups = g;
    Model m = Model::build(cfg, 1);
    std::int64_t macs = m.summarize(640, 640).total_macs;
    if (prev >= 0) CHECK(macs < prev);
    prev = macs;
  }
}

TEST_CASE("checkpoint round trip is bitwise exact") {
  ModelConfig cfg = micro_config();
  Model m = Model::build(cfg, 42);
  std::string path = temp_path("dgs_ckpt_roundtrip.ckpt");
  save_checkpoint(m, path);

  Model loaded = Model::build(cfg, 7);  // different init, fully overwritten
  load_checkpoint(loaded, path);

  std::vector<std::pair<std::string, Tensor*>> a, b;
  m.visit_params([&](const std::string& n, Tensor& t, bool) { a.emplace_back(n, &t); });
  loaded.visit_params([&](const std::string& n, Tensor& t, bool) { b.emplace_back(n, &t); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second->data == b[i].second->data);
  }

  // bitwise-identical forward outputs
  Rng rng(1);
  Tensor img = random_image(rng, 1, 64, 64);
  Tape t1(false), t2(false);
  auto o1 = m.forward(t1, t1.leaf_const(img), Phase::kEval);
  auto o2 = loaded.forward(t2, t2.leaf_const(img), Phase::kEval);
  for (std::size_t h = 0; h < o1.size(); ++h) {
    CHECK(t1.val(o1[h]).data == t2.val(o2[h]).data);
  }
  CHECK(m.param_count() == loaded.param_count());
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint element count equals count_params") {
  ModelConfig cfg = micro_config();
  Model m = Model::build(cfg, 42);
  std::string path = temp_path("dgs_ckpt_count.ckpt");
  save_checkpoint(m, path);
  std::int64_t file_size = static_cast<std::int64_t>(std::filesystem::file_size(path));
  std::ifstream f(path, std::ios::binary);
  f.seekg(8);
  unsigned char lb[4];
  f.read(reinterpret_cast<char*>(lb), 4);
  std::int64_t mlen = lb[0] | (lb[1] << 8) | (lb[2] << 16) | (static_cast<std::int64_t>(lb[3]) << 24);
  std::int64_t blob_bytes = file_size - 12 - mlen;
  CHECK(blob_bytes == m.enumerated_param_count() * 4);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint errors name the offending tensor") {
  ModelConfig cfg = micro_config();
  Model m = Model::build(cfg, 42);
  std::string path = temp_path("dgs_ckpt_bad.ckpt");
  save_checkpoint(m, path);

  // truncated blob
  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(path + ".trunc", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 64));
  }
  Model victim = Model::build(cfg, 0);
  CHECK_THROWS_WITH_AS(load_checkpoint(victim, path + ".trunc"),
                       doctest::Contains("truncated"), ValidationError);

  // a config mismatch reports the missing tensor by name
  ModelConfig bigger = micro_config();
  bigger.stages = {{2, 8}, {1, 8}, {1, 16}, {1, 16}};
  Model other = Model::build(bigger, 0);
  try {
    load_checkpoint(other, path);
    FAIL("expected missing-tensor error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("backbone.s1.b1") != std::string::npos);
  }

  // bad magic
  {
    std::ofstream out(path + ".magic", std::ios::binary);
    out << "NOTMAGIC" << std::string(100, '\0');
  }
  CHECK_THROWS_AS(load_checkpoint(victim, path + ".magic"), ValidationError);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".trunc");
  std::filesystem::remove(path + ".magic");
}

TEST_CASE("topology is independent of the weights") {
  ModelConfig cfg = micro_config();
  Model a = Model::build(cfg, 1);
  Model b = Model::build(cfg, 999);
  Rng rng(3);
  Tensor img = random_image(rng, 1, 64, 64);
  Tape ta(false), tb(false);
  auto oa = a.forward(ta, ta.leaf_const(img), Phase::kEval);
  auto ob = b.forward(tb, tb.leaf_const(img), Phase::kEval);
  for (std::size_t h = 0; h < oa.size(); ++h) {
    CHECK(ta.val(oa[h]).shape == tb.val(ob[h]).shape);
  }
}

TEST_CASE("config file round trip") {
  ModelConfig cfg = ModelConfig::preset("dgsm");
  cfg.num_classes = 5;
  cfg.input_w = cfg.input_h = 320;
  std::string text = cfg.serialize();
  ModelConfig back = ModelConfig::parse(text);
  CHECK(back.num_classes == 5);
  CHECK(back.input_w == 320);
  CHECK(back.stages == cfg.stages);
  CHECK(back.strides == cfg.strides);
  CHECK(back.backbone == cfg.backbone);
  CHECK(back.neck == cfg.neck);
  for (std::size_t h = 0; h < cfg.anchors.size(); ++h) {
    for (int a = 0; a < 3; ++a) {
      CHECK(back.anchors[h][static_cast<std::size_t>(a)].w ==
            cfg.anchors[h][static_cast<std::size_t>(a)].w);
    }
  }
  CHECK_THROWS_AS(ModelConfig::parse("bogus 12\n"), ValidationError);
  CHECK_THROWS_AS(ModelConfig::parse("stage 1 6\n"), ValidationError);  // not a multiple of 4
}

TEST_CASE("train and eval phases share one forward implementation") {
  ModelConfig cfg = micro_config();
  Model m = Model::build(cfg, 11);
  Rng rng(12);
  Tensor img = random_image(rng, 2, 64, 64);
  Tape t(true);
  auto outs = m.forward(t, t.leaf_input(img, false), Phase::kTrain);
  CHECK(t.val(outs[0]).shape == Shape{2, 21, 4, 4});
  CHECK(t.val(outs[1]).shape == Shape{2, 21, 2, 2});
}
