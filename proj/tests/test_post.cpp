#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dgs/postprocess.hpp"
#include "dgs/rng.hpp"

using namespace dgs;

namespace {

// independently coded straight-line decode, double arithmetic
std::vector<Detection> decode_oracle(const Tensor& raw, const std::array<Anchor, 3>& anchors,
                                     int stride, int nc, double conf, int img_w, int img_h) {
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<Detection> out;
  int pa = 5 + nc;
  for (int a = 0; a < 3; ++a) {
    for (int gy = 0; gy < raw.shape.h; ++gy) {
      for (int gx = 0; gx < raw.shape.w; ++gx) {
        double obj = sig(raw.at(0, a * pa + 4, gy, gx));
        double bx = (2.0 * sig(raw.at(0, a * pa + 0, gy, gx)) - 0.5 + gx) * stride;
        double by = (2.0 * sig(raw.at(0, a * pa + 1, gy, gx)) - 0.5 + gy) * stride;
        double sw = 2.0 * sig(raw.at(0, a * pa + 2, gy, gx));
        double sh = 2.0 * sig(raw.at(0, a * pa + 3, gy, gx));
        double bw = sw * sw * anchors[static_cast<std::size_t>(a)].w;
        double bh = sh * sh * anchors[static_cast<std::size_t>(a)].h;
        double x1 = std::clamp(bx - bw / 2, 0.0, static_cast<double>(img_w));
        double y1 = std::clamp(by - bh / 2, 0.0, static_cast<double>(img_h));
        double x2 = std::clamp(bx + bw / 2, 0.0, static_cast<double>(img_w));
        double y2 = std::clamp(by + bh / 2, 0.0, static_cast<double>(img_h));
        if (x2 <= x1 || y2 <= y1) continue;
        for (int c = 0; c < nc; ++c) {
          double score = obj * sig(raw.at(0, a * pa + 5 + c, gy, gx));
          if (score >= conf) {
            out.push_back(Detection{Box{static_cast<float>(x1), static_cast<float>(y1),
                                        static_cast<float>(x2), static_cast<float>(y2)},
                                    c, static_cast<float>(score)});
          }
        }
      }
    }
  }
  return out;
}

// memoized recursive formulation of greedy class-wise suppression
std::vector<Detection> nms_oracle(const std::vector<Detection>& dets, float thr) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    if (dets[a].class_id != dets[b].class_id) return dets[a].class_id < dets[b].class_id;
    return a < b;
  });
  std::vector<int> kept_memo(dets.size(), -1);
  std::function<bool(std::size_t)> kept = [&](std::size_t rank) -> bool {
    if (kept_memo[rank] >= 0) return kept_memo[rank] == 1;
    bool ok = true;
    for (std::size_t r = 0; r < rank; ++r) {
      if (dets[order[r]].class_id != dets[order[rank]].class_id) continue;
      if (!kept(r)) continue;
      if (iou(dets[order[r]].box, dets[order[rank]].box) >= thr) {
        ok = false;
        break;
      }
    }
    kept_memo[rank] = ok ? 1 : 0;
    return ok;
  };
  std::vector<Detection> out;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (kept(r)) out.push_back(dets[order[r]]);
  }
  return out;
}

std::vector<Detection> random_dets(Rng& rng, int n, int classes) {
  std::vector<Detection> dets;
  for (int i = 0; i < n; ++i) {
    float x1 = rng.uniform(0.0f, 80.0f), y1 = rng.uniform(0.0f, 80.0f);
    Detection d;
    d.box = Box{x1, y1, x1 + rng.uniform(5.0f, 40.0f), y1 + rng.uniform(5.0f, 40.0f)};
    d.class_id = rng.uniform_int(0, classes - 1);
    d.score = rng.uniform(0.05f, 1.0f);
    dets.push_back(d);
  }
  return dets;
}

bool same_dets(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].class_id != b[i].class_id || a[i].score != b[i].score ||
        a[i].box.x1 != b[i].box.x1 || a[i].box.y2 != b[i].box.y2) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("decode of all-zero raw follows the sigmoid(0) arithmetic") {
  ModelConfig cfg;
  Tensor raw(1, 21, 20, 20);
  auto dets = decode(raw, cfg.anchors[1], 32, 2, 0.25f, 640, 640);
  REQUIRE(!dets.empty());
  // every surviving entry scores exactly sigmoid(0)^2 = 0.25
  for (const auto& d : dets) CHECK(d.score == 0.25f);
  // at an interior cell the box is the anchor centred mid-cell: cell (8,8)
  bool found = false;
  for (const auto& d : dets) {
    float cx = 0.5f * (d.box.x1 + d.box.x2);
    float cy = 0.5f * (d.box.y1 + d.box.y2);
    if (std::fabs(cx - 272.0f) < 1e-3f && std::fabs(cy - 272.0f) < 1e-3f && d.class_id == 0 &&
        std::fabs(d.box.x2 - d.box.x1 - 116.0f) < 0.01f &&
        std::fabs(d.box.y2 - d.box.y1 - 90.0f) < 0.01f) {
      found = true;  // anchor (116,90) decoded at mid-cell with sigma(0) offsets
    }
  }
  CHECK(found);
  // the corner cell (0,0) clips at the image boundary
  bool corner = false;
  for (const auto& d : dets) {
    float cy = 0.5f * (d.box.y1 + d.box.y2);
    if (d.box.x1 == 0.0f && d.box.x2 == doctest::Approx(74.0f) && cy < 40.0f) corner = true;
  }
  CHECK(corner);
}

TEST_CASE("decode with conf above 1 returns nothing") {
  Rng rng(1);
  Tensor raw(1, 21, 4, 4);
  for (float& v : raw.data) v = rng.uniform(-3.0f, 3.0f);
  ModelConfig cfg;
  CHECK(decode(raw, cfg.anchors[1], 32, 2, 1.1f, 128, 128).empty());
}

TEST_CASE("decode matches the independent oracle on random raw") {
  Rng rng(2);
  ModelConfig cfg;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor raw(1, 21, 5, 5);
    for (float& v : raw.data) v = rng.uniform(-4.0f, 4.0f);
    auto got = decode(raw, cfg.anchors[0], 16, 2, 0.25f, 80, 80);
    auto want = decode_oracle(raw, cfg.anchors[0], 16, 2, 0.25, 80, 80);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].class_id == want[i].class_id);
      CHECK(got[i].score == doctest::Approx(want[i].score).epsilon(1e-5));
      CHECK(got[i].box.x1 == doctest::Approx(want[i].box.x1).epsilon(1e-4));
      CHECK(got[i].box.y2 == doctest::Approx(want[i].box.y2).epsilon(1e-4));
    }
  }
}

TEST_CASE("iou and ciou closed-form cases") {
  Box a{0, 0, 2, 2};
  CHECK(iou(a, a) == 1.0f);
  CHECK(ciou(a, a) == doctest::Approx(1.0).epsilon(1e-6));
  Box b{5, 5, 7, 7};
  CHECK(iou(a, b) == 0.0f);
  Box c{1, 1, 3, 3};
  CHECK(iou(a, c) == doctest::Approx(1.0 / 7.0).epsilon(1e-6));
  CHECK(ciou(a, c) < iou(a, c));  // penalties only subtract
}

TEST_CASE("nms keeps the best of duplicates and separates classes") {
  Box b{10, 10, 30, 30};
  std::vector<Detection> same = {{b, 0, 0.9f}, {b, 0, 0.8f}};
  auto kept = nms(same, 0.45f);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9f);

  std::vector<Detection> diff = {{b, 0, 0.9f}, {b, 1, 0.8f}};
  CHECK(nms(diff, 0.45f).size() == 2);
}

TEST_CASE("nms equals the recursive oracle on random instances") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto dets = random_dets(rng, rng.uniform_int(0, 50), 3);
    auto a = nms(dets, 0.45f);
    auto b = nms_oracle(dets, 0.45f);
    CHECK(same_dets(a, b));
  }
}

TEST_CASE("nms output is an anti-chain under same-class IoU") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto kept = nms(random_dets(rng, 40, 3), 0.45f);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t j = i + 1; j < kept.size(); ++j) {
        if (kept[i].class_id != kept[j].class_id) continue;
        CHECK(iou(kept[i].box, kept[j].box) < 0.45f);
      }
    }
    // and the output is sorted by descending score
    for (std::size_t i = 1; i < kept.size(); ++i) CHECK(kept[i - 1].score >= kept[i].score);
  }
}

TEST_CASE("evaluate: perfect predictions give all ones") {
  Rng rng(5);
  std::vector<std::vector<GroundTruth>> gts(3);
  std::vector<std::vector<Detection>> preds(3);
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 2; ++k) {
      float x1 = rng.uniform(0.0f, 50.0f), y1 = rng.uniform(0.0f, 50.0f);
      Box b{x1, y1, x1 + 20, y1 + 15};
      gts[static_cast<std::size_t>(i)].push_back(GroundTruth{b, k});
      preds[static_cast<std::size_t>(i)].push_back(Detection{b, k, 1.0f});
    }
  }
  std::vector<double> thr;
  for (int i = 0; i < 10; ++i) thr.push_back(0.5 + 0.05 * i);
  MetricsReport rep = evaluate(preds, gts, 2, thr);
  CHECK(rep.precision == doctest::Approx(1.0));
  CHECK(rep.recall == doctest::Approx(1.0));
  CHECK(rep.map50 == doctest::Approx(1.0));
  CHECK(rep.map5095 == doctest::Approx(1.0));
  CHECK(rep.f1 == doctest::Approx(1.0));
}

TEST_CASE("evaluate: zero predictions follow the stated conventions") {
  std::vector<std::vector<GroundTruth>> gts(2);
  gts[0].push_back(GroundTruth{Box{0, 0, 10, 10}, 0});
  std::vector<std::vector<Detection>> preds(2);
  MetricsReport rep = evaluate(preds, gts, 2, {0.5});
  CHECK(rep.precision == 0.0);
  CHECK(rep.recall == 0.0);
  CHECK(rep.map50 == 0.0);
  CHECK(rep.f1 == 0.0);
}

TEST_CASE("evaluate: hand-enumerated three-prediction instance gives AP 5/6") {
  // 1 class, 2 GTs; predictions: .9 TP, .8 FP, .7 TP
  Box g1{0, 0, 10, 10}, g2{40, 40, 52, 50};
  Box far{70, 70, 80, 80};
  std::vector<std::vector<GroundTruth>> gts(1);
  gts[0] = {GroundTruth{g1, 0}, GroundTruth{g2, 0}};
  std::vector<std::vector<Detection>> preds(1);
  preds[0] = {Detection{g1, 0, 0.9f}, Detection{far, 0, 0.8f}, Detection{g2, 0, 0.7f}};
  MetricsReport rep = evaluate(preds, gts, 1, {0.5});
  CHECK(rep.map50 == doctest::Approx(5.0 / 6.0).epsilon(1e-9));
}

TEST_CASE("evaluate is invariant to prediction order and monotone score scaling") {
  Rng rng(6);
  std::vector<std::vector<GroundTruth>> gts(4);
  std::vector<std::vector<Detection>> preds(4);
  for (std::size_t i = 0; i < 4; ++i) {
    for (int k = 0; k < 3; ++k) {
      float x1 = rng.uniform(0.0f, 60.0f), y1 = rng.uniform(0.0f, 60.0f);
      gts[i].push_back(GroundTruth{Box{x1, y1, x1 + 15, y1 + 10}, rng.uniform_int(0, 1)});
    }
    for (int k = 0; k < 6; ++k) {
      float x1 = rng.uniform(0.0f, 60.0f), y1 = rng.uniform(0.0f, 60.0f);
      preds[i].push_back(Detection{Box{x1, y1, x1 + rng.uniform(8.0f, 20.0f),
                                       y1 + rng.uniform(8.0f, 14.0f)},
                                   rng.uniform_int(0, 1), rng.uniform(0.1f, 0.99f)});
    }
  }
  std::vector<double> thr;
  for (int i = 0; i < 10; ++i) thr.push_back(0.5 + 0.05 * i);
  MetricsReport base = evaluate(preds, gts, 2, thr);
  CHECK(base.map5095 <= base.map50 + 1e-12);

  auto shuffled = preds;
  for (auto& v : shuffled) rng.shuffle(v);
  MetricsReport perm = evaluate(shuffled, gts, 2, thr);
  CHECK(perm.map50 == doctest::Approx(base.map50).epsilon(1e-12));
  CHECK(perm.map5095 == doctest::Approx(base.map5095).epsilon(1e-12));
  CHECK(perm.precision == doctest::Approx(base.precision).epsilon(1e-12));

  auto scaled = preds;
  for (auto& v : scaled) {
    for (auto& d : v) d.score = 0.1f + 0.5f * d.score;  // positive monotone map
  }
  MetricsReport mono = evaluate(scaled, gts, 2, thr);
  CHECK(mono.map50 == doctest::Approx(base.map50).epsilon(1e-12));
  CHECK(mono.map5095 == doctest::Approx(base.map5095).epsilon(1e-12));
}

TEST_CASE("f1 reproduces the reported rows") {
  CHECK(std::fabs(f1_score(0.885, 0.805) - 0.8431) <= 5e-5);
  CHECK(std::fabs(f1_score(0.895, 0.794) - 0.8415) <= 5e-5);
  CHECK(std::fabs(f1_score(0.887, 0.806) - 0.8446) <= 5e-5);
  CHECK(std::fabs(f1_score(0.908, 0.796) - 0.8483) <= 5e-5);
  CHECK(f1_score(1.0, 1.0) == 1.0);
  CHECK(f1_score(0.0, 0.0) == 0.0);
}

TEST_CASE("detection text format has six space-separated fields") {
  std::vector<Detection> dets = {{Box{1.25f, 2.5f, 100.125f, 200.0f}, 1, 0.875f}};
  std::string line = detection_lines(dets);
  CHECK(line == "1 0.875 1.25 2.5 100.125 200\n");
}
