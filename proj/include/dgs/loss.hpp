#pragma once

#include <vector>

#include "dgs/data.hpp"
#include "dgs/model.hpp"

namespace dgs {

// Ground-truth box in network-input pixel space (center/size form).
struct GtBox {
  int class_id = 0;
  float cx = 0.0f, cy = 0.0f, w = 0.0f, h = 0.0f;
};

// One GT mapped to its (head, anchor, cell); the rule is pure argmax of the
// anchor-prior IoU at a shared center, first maximum winning.
struct Assignment {
  int image = 0;
  int head = 0;
  int anchor = 0;
  int cell_x = 0, cell_y = 0;
  GtBox gt;
};

std::vector<Assignment> assign_targets(const std::vector<std::vector<GtBox>>& gts_per_image,
                                       const ModelConfig& cfg, int in_w, int in_h);

struct LossWeights {
  float box = 0.05f;
  float obj = 1.0f;
  float cls = 0.5f;
};

struct LossBreakdown {
  float box_loss = 0.0f;
  float obj_loss = 0.0f;
  float cls_loss = 0.0f;
  float total = 0.0f;
};

// total = (box*w_box + obj*w_obj) + cls*w_cls, evaluated in exactly this
// float32 order everywhere; the reported-total identity checks rely on it.
inline float compose_total(float box, float obj, float cls, const LossWeights& lw) {
  return (lw.box * box + lw.obj * obj) + lw.cls * cls;
}

struct LossResult {
  LossBreakdown values;
  VarId box = kNoVar, obj = kNoVar, cls = kNoVar, total = kNoVar;
};

// Differentiable three-component detection loss over raw head outputs:
//   box: mean (1 - CIoU) over assigned cells
//   obj: mean BCE over every cell/anchor of every head (target 1 at assigned)
//   cls: mean BCE over assigned cells' class logits (one-hot targets)
LossResult compute_loss(Tape& t, const std::vector<VarId>& raw_heads,
                        const std::vector<Assignment>& assignments, const ModelConfig& cfg,
                        const LossWeights& lw = {});

struct TrainResult {
  std::vector<LossBreakdown> curve;
};

// Plain SGD with momentum 0.9 on a small in-memory dataset; fixed seed gives a
// bitwise-reproducible loss curve. Aborts with NumericError if the total loss
// exceeds 1e3.
TrainResult train_tiny(Model& model, const std::vector<Sample>& samples, int steps, float lr,
                       std::uint64_t seed);

}  // namespace dgs
