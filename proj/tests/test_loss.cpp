#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dgs/gradcheck.hpp"
#include "dgs/loss.hpp"
#include "dgs/ref_modules.hpp"
#include "dgs/rng.hpp"

using namespace dgs;

namespace {

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.stages = {{1, 8}, {1, 8}, {1, 16}, {1, 16}};
  cfg.input_w = cfg.input_h = 64;
  return cfg;
}

// brute-force argmax over every (head, anchor) pair, double arithmetic
std::pair<int, int> assign_oracle(const GtBox& gt, const ModelConfig& cfg) {
  double best = -1.0;
  int bh = 0, ba = 0;
  for (std::size_t h = 0; h < cfg.strides.size(); ++h) {
    for (int a = 0; a < 3; ++a) {
      const Anchor& an = cfg.anchors[h][static_cast<std::size_t>(a)];
      double inter = std::min<double>(gt.w, an.w) * std::min<double>(gt.h, an.h);
      double uni = static_cast<double>(gt.w) * gt.h + static_cast<double>(an.w) * an.h - inter;
      double v = inter / uni;
      if (v > best) {
        best = v;
        bh = static_cast<int>(h);
        ba = a;
      }
    }
  }
  return {bh, ba};
}

}  // namespace

TEST_CASE("an exact anchor-prior match assigns to that anchor") {
  ModelConfig cfg;  // default 640, heads at strides 16/32
  std::vector<std::vector<GtBox>> gts(1);
  gts[0].push_back(GtBox{0, 320.0f, 320.0f, 116.0f, 90.0f});
  auto assignments = assign_targets(gts, cfg, 640, 640);
  REQUIRE(assignments.size() == 1);
  CHECK(assignments[0].head == 1);    // stride 32
  CHECK(assignments[0].anchor == 0);  // (116, 90)
  CHECK(assignments[0].cell_x == 10);
  CHECK(assignments[0].cell_y == 10);
}

TEST_CASE("a center exactly on a cell boundary goes to floor(center/stride)") {
  ModelConfig cfg;
  std::vector<std::vector<GtBox>> gts(1);
  gts[0].push_back(GtBox{0, 96.0f, 64.0f, 116.0f, 90.0f});  // 96/32 = 3 exactly
  auto a = assign_targets(gts, cfg, 640, 640);
  REQUIRE(a.size() == 1);
  CHECK(a[0].cell_x == 3);
  CHECK(a[0].cell_y == 2);
}

TEST_CASE("assignment equals the exhaustive argmax oracle") {
  ModelConfig cfg;
  Rng rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    GtBox gt;
    gt.class_id = rng.uniform_int(0, 1);
    gt.w = rng.uniform(4.0f, 500.0f);
    gt.h = rng.uniform(4.0f, 500.0f);
    gt.cx = rng.uniform(gt.w / 2, 640.0f - gt.w / 2);
    gt.cy = rng.uniform(gt.h / 2, 640.0f - gt.h / 2);
    std::vector<std::vector<GtBox>> gts = {{gt}};
    auto got = assign_targets(gts, cfg, 640, 640);
    auto [wh, wa] = assign_oracle(gt, cfg);
    REQUIRE(got.size() == 1);
    CHECK(got[0].head == wh);
    CHECK(got[0].anchor == wa);
    int stride = cfg.strides[static_cast<std::size_t>(wh)];
    CHECK(got[0].cell_x == std::clamp(static_cast<int>(gt.cx) / stride, 0, 640 / stride - 1));
  }
}

TEST_CASE("degenerate ground truth is rejected") {
  ModelConfig cfg;
  std::vector<std::vector<GtBox>> gts(1);
  gts[0].push_back(GtBox{0, 100.0f, 100.0f, 0.0f, 10.0f});
  CHECK_THROWS_AS(assign_targets(gts, cfg, 640, 640), ValidationError);
}

TEST_CASE("reported loss rows sum to their printed totals") {
  LossWeights unit{1.0f, 1.0f, 1.0f};
  struct Row {
    float box, obj, cls, printed, unit_last_digit;
  };
  const Row rows[4] = {
      {0.02671f, 0.03225f, 0.00129f, 0.06025f, 1e-5f},
      {0.02589f, 0.02889f, 0.001067f, 0.05585f, 1e-5f},
      {0.02423f, 0.02788f, 0.0006791f, 0.05278f, 1e-5f},
      {0.02381f, 0.01283f, 0.0008498f, 0.0375f, 1e-4f},
  };
  for (const Row& r : rows) {
    float total = compose_total(r.box, r.obj, r.cls, unit);
    CHECK(std::fabs(total - r.printed) <= r.unit_last_digit);
  }
}

TEST_CASE("loss breakdown total equals the fixed-order composition bitwise") {
  ModelConfig cfg = micro_config();
  Model model = Model::build(cfg, 3);
  Rng rng(4);
  Tensor images(2, 3, 64, 64);
  for (float& v : images.data) v = rng.uniform(0.0f, 1.0f);
  std::vector<std::vector<GtBox>> gts(2);
  gts[0].push_back(GtBox{0, 30.0f, 30.0f, 20.0f, 16.0f});
  gts[1].push_back(GtBox{1, 40.0f, 24.0f, 12.0f, 24.0f});
  auto assignments = assign_targets(gts, cfg, 64, 64);

  Tape t(true);
  VarId img = t.leaf_input(images, false);
  auto raw = model.forward(t, img, Phase::kTrain);
  LossWeights lw;
  LossResult res = compute_loss(t, raw, assignments, cfg, lw);
  CHECK(res.values.total ==
        compose_total(res.values.box_loss, res.values.obj_loss, res.values.cls_loss, lw));
  CHECK(res.values.box_loss >= 0.0f);
  CHECK(res.values.box_loss <= 2.0f);
  CHECK(res.values.obj_loss >= 0.0f);
  CHECK(res.values.cls_loss >= 0.0f);
}

TEST_CASE("empty ground truth batch: zero box/cls and all-background obj") {
  ModelConfig cfg = micro_config();
  Model model = Model::build(cfg, 5);
  // zero weights so raw logits are 0 and BCE(0,0) = ln 2
  model.visit_params([](const std::string&, Tensor& t, bool trainable) {
    if (trainable) std::fill(t.data.begin(), t.data.end(), 0.0f);
  });
  Tensor images(1, 3, 64, 64);
  Tape t(true);
  auto raw = model.forward(t, t.leaf_input(images, false), Phase::kEval);
  LossResult res = compute_loss(t, raw, {}, cfg);
  CHECK(res.values.box_loss == 0.0f);
  CHECK(res.values.cls_loss == 0.0f);
  CHECK(res.values.obj_loss == doctest::Approx(std::log(2.0)).epsilon(1e-5));
}

TEST_CASE("loss matches the double-precision reference on a toy batch") {
  ModelConfig cfg = micro_config();
  Model model = Model::build(cfg, 6);
  Rng rng(7);
  Tensor images(2, 3, 64, 64);
  for (float& v : images.data) v = rng.uniform(0.0f, 1.0f);
  std::vector<std::vector<GtBox>> gts(2);
  gts[0].push_back(GtBox{0, 28.0f, 32.0f, 24.0f, 20.0f});
  gts[1].push_back(GtBox{1, 36.0f, 24.0f, 16.0f, 28.0f});
  auto assignments = assign_targets(gts, cfg, 64, 64);

  Tape t(true);
  auto raw = model.forward(t, t.leaf_input(images, false), Phase::kEval);
  LossResult res = compute_loss(t, raw, assignments, cfg);

  std::vector<ref::RTensor> rraw;
  for (VarId id : raw) rraw.push_back(ref::RTensor::from(t.val(id)));
  ref::RLossOut want = ref::loss_forward(rraw, assignments, cfg, LossWeights{});
  CHECK(res.values.box_loss == doctest::Approx(want.box).epsilon(1e-4));
  CHECK(res.values.obj_loss == doctest::Approx(want.obj).epsilon(1e-4));
  CHECK(res.values.cls_loss == doctest::Approx(want.cls).epsilon(1e-4));
}

TEST_CASE("loss gradients pass finite differences on the toy model") {
  auto results = refcheck::loss_suite(11);
  for (const auto& r : results) {
    INFO(r.name, " err=", r.max_err);
    CHECK(r.max_err <= r.tol);
  }
}

TEST_CASE("train_tiny with lr 0 keeps the loss curve constant") {
  ModelConfig cfg = micro_config();
  Model model = Model::build(cfg, 8);
  Rng rng(9);
  std::vector<Sample> samples;
  for (int i = 0; i < 2; ++i) {
    Sample s;
    s.image = Tensor(1, 3, 64, 64);
    for (float& v : s.image.data) v = rng.uniform(0.0f, 1.0f);
    s.labels.push_back(Label{i % 2, 0.5f, 0.5f, 0.4f, 0.3f});
    samples.push_back(std::move(s));
  }
  TrainResult tr = train_tiny(model, samples, 5, 0.0f, 1);
  for (const auto& lb : tr.curve) {
    CHECK(lb.total == tr.curve[0].total);
    CHECK(lb.box_loss == tr.curve[0].box_loss);
  }
}

TEST_CASE("train_tiny is bitwise reproducible per seed") {
  ModelConfig cfg = micro_config();
  Rng rng(10);
  std::vector<Sample> samples;
  for (int i = 0; i < 3; ++i) {
    Sample s;
    s.image = Tensor(1, 3, 64, 64);
    for (float& v : s.image.data) v = rng.uniform(0.0f, 1.0f);
    s.labels.push_back(Label{i % 2, 0.4f, 0.6f, 0.3f, 0.4f});
    samples.push_back(std::move(s));
  }
  Model a = Model::build(cfg, 12);
  Model b = Model::build(cfg, 12);
  TrainResult ta = train_tiny(a, samples, 6, 0.01f, 99);
  TrainResult tb = train_tiny(b, samples, 6, 0.01f, 99);
  REQUIRE(ta.curve.size() == tb.curve.size());
  for (std::size_t i = 0; i < ta.curve.size(); ++i) {
    CHECK(ta.curve[i].total == tb.curve[i].total);
    CHECK(ta.curve[i].box_loss == tb.curve[i].box_loss);
    CHECK(ta.curve[i].obj_loss == tb.curve[i].obj_loss);
    CHECK(ta.curve[i].cls_loss == tb.curve[i].cls_loss);
  }
}

TEST_CASE("train_tiny aborts on divergence") {
  ModelConfig cfg = micro_config();
  Model model = Model::build(cfg, 13);
  Rng rng(14);
  std::vector<Sample> samples;
  Sample s;
  s.image = Tensor(1, 3, 64, 64);
  for (float& v : s.image.data) v = rng.uniform(0.0f, 1.0f);
  s.labels.push_back(Label{0, 0.5f, 0.5f, 0.4f, 0.3f});
  samples.push_back(std::move(s));
  CHECK_THROWS_AS(train_tiny(model, samples, 50, 1e6f, 1), NumericError);
}
