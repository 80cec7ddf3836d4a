#pragma once

#include <string>
#include <vector>

#include "dgs/model.hpp"
#include "dgs/tensor.hpp"

namespace dgs {

struct Box {
  float x1 = 0.0f, y1 = 0.0f, x2 = 0.0f, y2 = 0.0f;
  float area() const { return (x2 - x1) * (y2 - y1); }
};

// Decoded detection in input-image pixel space.
struct Detection {
  Box box;
  int class_id = 0;
  float score = 0.0f;
};

struct GroundTruth {
  Box box;
  int class_id = 0;
};

// Detection quality row: precision, recall, mAP@.5, mAP@.5:.95, F1.
struct MetricsReport {
  double precision = 0.0;
  double recall = 0.0;
  double map50 = 0.0;
  double map5095 = 0.0;
  double f1 = 0.0;
};

float iou(const Box& a, const Box& b);
// IoU - center-distance penalty - aspect-ratio penalty; <= 1, equals 1 for
// identical boxes.
float ciou(const Box& a, const Box& b);

// Decode one head's raw (pre-sigmoid) output. Per cell/anchor and per class c
// with sigmoid(obj)*sigmoid(cls_c) >= conf_threshold, emits a Detection with
//   bx = (2*sig(tx) - 0.5 + cx) * stride     bw = (2*sig(tw))^2 * anchor_w
// boxes converted to xyxy and clipped to [0,img_w] x [0,img_h]. Boxes that
// collapse to zero extent after clipping are dropped.
std::vector<Detection> decode(const Tensor& raw, const std::array<Anchor, 3>& anchors, int stride,
                              int num_classes, float conf_threshold, int img_w, int img_h);

// Class-wise greedy suppression. Candidates are ordered by (score desc,
// class_id asc, insertion order asc); a box is kept iff its IoU with every
// already-kept box of the same class is < iou_threshold. Output keeps that
// order.
std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_threshold);

// COCO-style evaluation with all-point AP interpolation. Reported P/R are
// micro-averaged at the confidence that maximizes F1 (matching at IoU 0.5).
MetricsReport evaluate(const std::vector<std::vector<Detection>>& preds_per_image,
                       const std::vector<std::vector<GroundTruth>>& gts_per_image,
                       int num_classes, const std::vector<double>& iou_thresholds);

double f1_score(double p, double r);

// Text exchange format: one line per box, 6 significant digits.
std::string detection_lines(const std::vector<Detection>& dets);

}  // namespace dgs
