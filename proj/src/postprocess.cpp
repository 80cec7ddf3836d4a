#include "dgs/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dgs/ops.hpp"

namespace dgs {

float iou(const Box& a, const Box& b) {
  float ix = std::max(0.0f, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  float iy = std::max(0.0f, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  float inter = ix * iy;
  float uni = a.area() + b.area() - inter;
  return uni > 0.0f ? inter / uni : 0.0f;
}

float ciou(const Box& a, const Box& b) {
  constexpr float kEps = 1e-7f;
  float i = iou(a, b);
  float acx = 0.5f * (a.x1 + a.x2), acy = 0.5f * (a.y1 + a.y2);
  float bcx = 0.5f * (b.x1 + b.x2), bcy = 0.5f * (b.y1 + b.y2);
  float rho2 = (acx - bcx) * (acx - bcx) + (acy - bcy) * (acy - bcy);
  float cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  float ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  float c2 = cw * cw + ch * ch;
  float aw = a.x2 - a.x1, ah = a.y2 - a.y1;
  float bw = b.x2 - b.x1, bh = b.y2 - b.y1;
  float da = std::atan(aw / ah) - std::atan(bw / bh);
  float v = 4.0f / (static_cast<float>(M_PI) * static_cast<float>(M_PI)) * da * da;
  float alpha = v / ((1.0f - i) + v + kEps);
  float dist = c2 > 0.0f ? rho2 / c2 : 0.0f;
  return i - dist - alpha * v;
}

std::vector<Detection> decode(const Tensor& raw, const std::array<Anchor, 3>& anchors, int stride,
                              int num_classes, float conf_threshold, int img_w, int img_h) {
  int per_anchor = 5 + num_classes;
  check(raw.shape.n == 1, "decode: expected a single-image tensor");
  check(raw.shape.c == 3 * per_anchor,
        "decode: raw has " + std::to_string(raw.shape.c) + " channels, expected " +
            std::to_string(3 * per_anchor) + " for " + std::to_string(num_classes) + " classes");
  int gh = raw.shape.h, gw = raw.shape.w;
  std::vector<Detection> out;
  for (int a = 0; a < 3; ++a) {
    int base = a * per_anchor;
    for (int gy = 0; gy < gh; ++gy) {
      for (int gx = 0; gx < gw; ++gx) {
        float tx = raw.at(0, base + 0, gy, gx);
        float ty = raw.at(0, base + 1, gy, gx);
        float tw = raw.at(0, base + 2, gy, gx);
        float th = raw.at(0, base + 3, gy, gx);
        float obj = ops::sigmoidf(raw.at(0, base + 4, gy, gx));
        // objectness alone caps every class score
        if (obj < conf_threshold) continue;
        float bx = (2.0f * ops::sigmoidf(tx) - 0.5f + static_cast<float>(gx)) *
                   static_cast<float>(stride);
        float by = (2.0f * ops::sigmoidf(ty) - 0.5f + static_cast<float>(gy)) *
                   static_cast<float>(stride);
        float sw = 2.0f * ops::sigmoidf(tw);
        float sh = 2.0f * ops::sigmoidf(th);
        float bw = sw * sw * anchors[static_cast<std::size_t>(a)].w;
        float bh = sh * sh * anchors[static_cast<std::size_t>(a)].h;
        Box box;
        box.x1 = std::clamp(bx - 0.5f * bw, 0.0f, static_cast<float>(img_w));
        box.y1 = std::clamp(by - 0.5f * bh, 0.0f, static_cast<float>(img_h));
        box.x2 = std::clamp(bx + 0.5f * bw, 0.0f, static_cast<float>(img_w));
        box.y2 = std::clamp(by + 0.5f * bh, 0.0f, static_cast<float>(img_h));
        if (box.x2 <= box.x1 || box.y2 <= box.y1) continue;
        for (int c = 0; c < num_classes; ++c) {
          float score = obj * ops::sigmoidf(raw.at(0, base + 5 + c, gy, gx));
          if (score >= conf_threshold) {
            out.push_back(Detection{box, c, score});
          }
        }
      }
    }
  }
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    if (dets[a].class_id != dets[b].class_id) return dets[a].class_id < dets[b].class_id;
    return a < b;
  });
  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    const Detection& d = dets[idx];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

double f1_score(double p, double r) {
  return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

namespace {

struct ScoredPred {
  float score;
  int image;
  Box box;
};

// Canonical order independent of input order within each image.
bool canonical_less(const ScoredPred& a, const ScoredPred& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.image != b.image) return a.image < b.image;
  if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
  if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
  if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
  return a.box.y2 < b.box.y2;
}

// Greedy matching at one IoU threshold; returns per-prediction TP flags in the
// sorted order of `preds`.
std::vector<bool> match_class(const std::vector<ScoredPred>& preds,
                              const std::vector<std::vector<Box>>& gts, double thr) {
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  std::vector<bool> tp(preds.size(), false);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& boxes = gts[static_cast<std::size_t>(preds[i].image)];
    double best = -1.0;
    int best_j = -1;
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      if (used[static_cast<std::size_t>(preds[i].image)][j]) continue;
      double v = iou(preds[i].box, boxes[j]);
      if (v > best) {
        best = v;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0 && best >= thr) {
      tp[i] = true;
      used[static_cast<std::size_t>(preds[i].image)][static_cast<std::size_t>(best_j)] = true;
    }
  }
  return tp;
}

// Area under the monotone precision envelope over recall.
double average_precision(const std::vector<bool>& tp, std::int64_t n_gt) {
  if (n_gt == 0) return 0.0;
  std::vector<double> recall, precision;
  std::int64_t tps = 0, fps = 0;
  for (bool t : tp) {
    (t ? tps : fps) += 1;
    recall.push_back(static_cast<double>(tps) / static_cast<double>(n_gt));
    precision.push_back(static_cast<double>(tps) / static_cast<double>(tps + fps));
  }
  double ap = 0.0;
  double prev_r = 0.0;
  // envelope from the right
  std::vector<double> env(precision.size());
  double run = 0.0;
  for (std::size_t i = precision.size(); i-- > 0;) {
    run = std::max(run, precision[i]);
    env[i] = run;
  }
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_r) * env[i];
    prev_r = recall[i];
  }
  return ap;
}

}  // namespace

MetricsReport evaluate(const std::vector<std::vector<Detection>>& preds_per_image,
                       const std::vector<std::vector<GroundTruth>>& gts_per_image,
                       int num_classes, const std::vector<double>& iou_thresholds) {
  check(preds_per_image.size() == gts_per_image.size(),
        "evaluate: prediction/ground-truth image count mismatch");
  check(!iou_thresholds.empty(), "evaluate: need at least one IoU threshold");
  std::size_t n_images = gts_per_image.size();

  for (const auto& gts : gts_per_image) {
    for (const GroundTruth& g : gts) {
      check(g.class_id >= 0 && g.class_id < num_classes,
            "evaluate: ground-truth class id " + std::to_string(g.class_id) + " out of range");
    }
  }
  for (const auto& preds : preds_per_image) {
    for (const Detection& d : preds) {
      check(d.class_id >= 0 && d.class_id < num_classes,
            "evaluate: prediction class id " + std::to_string(d.class_id) + " out of range");
    }
  }

  // Per-class pools.
  std::vector<std::vector<ScoredPred>> preds_c(static_cast<std::size_t>(num_classes));
  std::vector<std::vector<std::vector<Box>>> gts_c(static_cast<std::size_t>(num_classes));
  std::vector<std::int64_t> ngt_c(static_cast<std::size_t>(num_classes), 0);
  for (int c = 0; c < num_classes; ++c) {
    gts_c[static_cast<std::size_t>(c)].resize(n_images);
  }
  for (std::size_t i = 0; i < n_images; ++i) {
    for (const Detection& d : preds_per_image[i]) {
      preds_c[static_cast<std::size_t>(d.class_id)].push_back(
          ScoredPred{d.score, static_cast<int>(i), d.box});
    }
    for (const GroundTruth& g : gts_per_image[i]) {
      gts_c[static_cast<std::size_t>(g.class_id)][i].push_back(g.box);
      ngt_c[static_cast<std::size_t>(g.class_id)] += 1;
    }
  }
  for (auto& v : preds_c) std::sort(v.begin(), v.end(), canonical_less);

  // AP per class per threshold; classes without ground truth are skipped.
  double map50 = 0.0, map_all = 0.0;
  int classes_with_gt = 0;
  std::vector<std::vector<bool>> tp50_c(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    std::size_t ci = static_cast<std::size_t>(c);
    if (ngt_c[ci] == 0) continue;
    ++classes_with_gt;
    double ap_sum = 0.0;
    for (double thr : iou_thresholds) {
      std::vector<bool> tp = match_class(preds_c[ci], gts_c[ci], thr);
      double ap = average_precision(tp, ngt_c[ci]);
      ap_sum += ap;
      if (thr == iou_thresholds.front()) {
        map50 += ap;
        tp50_c[ci] = std::move(tp);
      }
    }
    map_all += ap_sum / static_cast<double>(iou_thresholds.size());
  }
  MetricsReport rep;
  if (classes_with_gt > 0) {
    map50 /= classes_with_gt;
    map_all /= classes_with_gt;
  }
  rep.map50 = map50;
  rep.map5095 = map_all;

  // Micro-averaged P/R at the F1-maximizing confidence, using the matching at
  // the first (lowest) threshold.
  struct Flat {
    float score;
    bool tp;
  };
  std::vector<Flat> flat;
  std::int64_t total_gt = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::size_t ci = static_cast<std::size_t>(c);
    total_gt += ngt_c[ci];
    for (std::size_t i = 0; i < preds_c[ci].size(); ++i) {
      bool tp = ngt_c[ci] > 0 && !tp50_c[ci].empty() ? tp50_c[ci][i] : false;
      flat.push_back(Flat{preds_c[ci][i].score, tp});
    }
  }
  std::stable_sort(flat.begin(), flat.end(),
                   [](const Flat& a, const Flat& b) { return a.score > b.score; });
  double best_f1 = -1.0, best_p = 0.0, best_r = 0.0;
  std::int64_t tps = 0;
  for (std::size_t k = 0; k < flat.size(); ++k) {
    if (flat[k].tp) ++tps;
    double p = static_cast<double>(tps) / static_cast<double>(k + 1);
    double r = total_gt > 0 ? static_cast<double>(tps) / static_cast<double>(total_gt) : 0.0;
    double f = f1_score(p, r);
    if (f > best_f1) {
      best_f1 = f;
      best_p = p;
      best_r = r;
    }
  }
  if (flat.empty()) {
    best_p = 0.0;
    best_r = 0.0;
    best_f1 = 0.0;
  }
  rep.precision = best_p;
  rep.recall = best_r;
  rep.f1 = f1_score(best_p, best_r);
  return rep;
}

std::string detection_lines(const std::vector<Detection>& dets) {
  std::string out;
  char buf[160];
  for (const Detection& d : dets) {
    std::snprintf(buf, sizeof(buf), "%d %.6g %.6g %.6g %.6g %.6g\n", d.class_id,
                  static_cast<double>(d.score), static_cast<double>(d.box.x1),
                  static_cast<double>(d.box.y1), static_cast<double>(d.box.x2),
                  static_cast<double>(d.box.y2));
    out += buf;
  }
  return out;
}

}  // namespace dgs
