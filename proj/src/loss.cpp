#include "dgs/loss.hpp"

#include <algorithm>
#include <cmath>

namespace dgs {

static float wh_iou(float w1, float h1, float w2, float h2) {
  float inter = std::min(w1, w2) * std::min(h1, h2);
  float uni = w1 * h1 + w2 * h2 - inter;
  return inter / uni;
}

std::vector<Assignment> assign_targets(const std::vector<std::vector<GtBox>>& gts_per_image,
                                       const ModelConfig& cfg, int in_w, int in_h) {
  std::vector<Assignment> out;
  for (std::size_t img = 0; img < gts_per_image.size(); ++img) {
    for (const GtBox& gt : gts_per_image[img]) {
      check(gt.w > 0.0f && gt.h > 0.0f, "assign_targets: ground truth with non-positive extent");
      check(gt.class_id >= 0 && gt.class_id < cfg.num_classes,
            "assign_targets: class id out of range");
      int best_head = 0, best_anchor = 0;
      float best = -1.0f;
      for (std::size_t h = 0; h < cfg.strides.size(); ++h) {
        for (int a = 0; a < 3; ++a) {
          const Anchor& an = cfg.anchors[h][static_cast<std::size_t>(a)];
          float v = wh_iou(gt.w, gt.h, an.w, an.h);
          if (v > best) {
            best = v;
            best_head = static_cast<int>(h);
            best_anchor = a;
          }
        }
      }
      int stride = cfg.strides[static_cast<std::size_t>(best_head)];
      int gw = in_w / stride, gh = in_h / stride;
      Assignment as;
      as.image = static_cast<int>(img);
      as.head = best_head;
      as.anchor = best_anchor;
      as.cell_x = std::clamp(static_cast<int>(std::floor(gt.cx / static_cast<float>(stride))), 0,
                             gw - 1);
      as.cell_y = std::clamp(static_cast<int>(std::floor(gt.cy / static_cast<float>(stride))), 0,
                             gh - 1);
      as.gt = gt;
      out.push_back(as);
    }
  }
  return out;
}

LossResult compute_loss(Tape& t, const std::vector<VarId>& raw_heads,
                        const std::vector<Assignment>& assignments, const ModelConfig& cfg,
                        const LossWeights& lw) {
  check(raw_heads.size() == cfg.strides.size(), "compute_loss: head count mismatch");
  int nc = cfg.num_classes;
  int per_anchor = 5 + nc;

  // ---- objectness over every cell of every head ----
  std::vector<VarId> obj_parts;
  std::vector<float> obj_targets;
  for (std::size_t h = 0; h < raw_heads.size(); ++h) {
    const Shape s = t.val(raw_heads[h]).shape;
    check(s.c == 3 * per_anchor, "compute_loss: head " + std::to_string(h) + " has " +
                                     std::to_string(s.c) + " channels, expected " +
                                     std::to_string(3 * per_anchor));
    std::vector<std::int64_t> idx;
    idx.reserve(static_cast<std::size_t>(s.n) * 3 * s.h * s.w);
    std::vector<float> tgt(static_cast<std::size_t>(s.n) * 3 * s.h * s.w, 0.0f);
    std::size_t k = 0;
    for (int img = 0; img < s.n; ++img) {
      for (int a = 0; a < 3; ++a) {
        int ch = a * per_anchor + 4;
        for (int gy = 0; gy < s.h; ++gy) {
          for (int gx = 0; gx < s.w; ++gx) {
            idx.push_back(((static_cast<std::int64_t>(img) * s.c + ch) * s.h + gy) * s.w + gx);
            ++k;
          }
        }
      }
    }
    for (const Assignment& as : assignments) {
      if (as.head != static_cast<int>(h)) continue;
      std::size_t pos = ((static_cast<std::size_t>(as.image) * 3 +
                          static_cast<std::size_t>(as.anchor)) *
                             static_cast<std::size_t>(s.h) +
                         static_cast<std::size_t>(as.cell_y)) *
                            static_cast<std::size_t>(s.w) +
                        static_cast<std::size_t>(as.cell_x);
      tgt[pos] = 1.0f;
    }
    obj_parts.push_back(t.gather(raw_heads[h], std::move(idx)));
    obj_targets.insert(obj_targets.end(), tgt.begin(), tgt.end());
    (void)k;
  }
  VarId obj_logits = obj_parts.size() == 1 ? obj_parts[0] : t.concat(obj_parts);
  Tensor obj_tgt = Tensor::from(Shape{1, static_cast<int>(obj_targets.size()), 1, 1}, obj_targets);
  VarId obj = t.bce_with_logits_mean(obj_logits, std::move(obj_tgt));

  VarId box = kNoVar, cls = kNoVar;
  if (assignments.empty()) {
    box = t.leaf_const(Tensor(1, 1, 1, 1));
    cls = t.leaf_const(Tensor(1, 1, 1, 1));
  } else {
    // ---- gather assigned-cell logits, grouped per head, head-major order ----
    std::vector<VarId> tx_p, ty_p, tw_p, th_p, cls_p;
    std::vector<float> c_cx, c_cy, c_stride, c_aw, c_ah;       // per assignment
    std::vector<float> c_gx1, c_gy1, c_gx2, c_gy2, c_gatan, c_garea;
    std::vector<float> cls_tgt;
    for (std::size_t h = 0; h < raw_heads.size(); ++h) {
      const Shape s = t.val(raw_heads[h]).shape;
      std::vector<std::int64_t> itx, ity, itw, ith, icls;
      for (const Assignment& as : assignments) {
        if (as.head != static_cast<int>(h)) continue;
        auto flat = [&](int ch) {
          return ((static_cast<std::int64_t>(as.image) * s.c + ch) * s.h + as.cell_y) * s.w +
                 as.cell_x;
        };
        int base = as.anchor * per_anchor;
        itx.push_back(flat(base + 0));
        ity.push_back(flat(base + 1));
        itw.push_back(flat(base + 2));
        ith.push_back(flat(base + 3));
        for (int c = 0; c < nc; ++c) {
          icls.push_back(flat(base + 5 + c));
          cls_tgt.push_back(c == as.gt.class_id ? 1.0f : 0.0f);
        }
        const Anchor& an = cfg.anchors[h][static_cast<std::size_t>(as.anchor)];
        float stride = static_cast<float>(cfg.strides[h]);
        c_cx.push_back(static_cast<float>(as.cell_x));
        c_cy.push_back(static_cast<float>(as.cell_y));
        c_stride.push_back(stride);
        c_aw.push_back(an.w);
        c_ah.push_back(an.h);
        float gx1 = as.gt.cx - 0.5f * as.gt.w, gx2 = as.gt.cx + 0.5f * as.gt.w;
        float gy1 = as.gt.cy - 0.5f * as.gt.h, gy2 = as.gt.cy + 0.5f * as.gt.h;
        c_gx1.push_back(gx1);
        c_gy1.push_back(gy1);
        c_gx2.push_back(gx2);
        c_gy2.push_back(gy2);
        c_gatan.push_back(std::atan(as.gt.w / as.gt.h));
        c_garea.push_back(as.gt.w * as.gt.h);
      }
      if (!itx.empty()) {
        tx_p.push_back(t.gather(raw_heads[h], std::move(itx)));
        ty_p.push_back(t.gather(raw_heads[h], std::move(ity)));
        tw_p.push_back(t.gather(raw_heads[h], std::move(itw)));
        th_p.push_back(t.gather(raw_heads[h], std::move(ith)));
        cls_p.push_back(t.gather(raw_heads[h], std::move(icls)));
      }
    }
    auto cat = [&](std::vector<VarId>& v) { return v.size() == 1 ? v[0] : t.concat(v); };
    VarId tx = cat(tx_p), ty = cat(ty_p), tw = cat(tw_p), th = cat(th_p);

    int m = static_cast<int>(c_cx.size());
    auto konst = [&](const std::vector<float>& v) {
      return t.leaf_const(Tensor::from(Shape{1, m, 1, 1}, v));
    };
    VarId cx = konst(c_cx), cy = konst(c_cy), strd = konst(c_stride);
    VarId aw = konst(c_aw), ah = konst(c_ah);
    VarId gx1 = konst(c_gx1), gy1 = konst(c_gy1), gx2 = konst(c_gx2), gy2 = konst(c_gy2);
    VarId gatan = konst(c_gatan), garea = konst(c_garea);
    VarId zero = t.leaf_const(Tensor(1, m, 1, 1));
    VarId one = t.leaf_const(Tensor::full(Shape{1, m, 1, 1}, 1.0f));
    VarId epsv = t.leaf_const(Tensor::full(Shape{1, m, 1, 1}, 1e-7f));

    // decode: b = (2*sig(t) - 0.5 + cell) * stride ; bw = (2*sig(tw))^2 * anchor
    VarId bx = t.mul(t.add(t.affine(t.sigmoid(tx), 2.0f, -0.5f), cx), strd);
    VarId by = t.mul(t.add(t.affine(t.sigmoid(ty), 2.0f, -0.5f), cy), strd);
    VarId bw = t.mul(t.square(t.affine(t.sigmoid(tw), 2.0f)), aw);
    VarId bh = t.mul(t.square(t.affine(t.sigmoid(th), 2.0f)), ah);
    VarId px1 = t.sub(bx, t.affine(bw, 0.5f));
    VarId px2 = t.add(bx, t.affine(bw, 0.5f));
    VarId py1 = t.sub(by, t.affine(bh, 0.5f));
    VarId py2 = t.add(by, t.affine(bh, 0.5f));

    // IoU
    VarId iw = t.vmax(t.sub(t.vmin(px2, gx2), t.vmax(px1, gx1)), zero);
    VarId ih = t.vmax(t.sub(t.vmin(py2, gy2), t.vmax(py1, gy1)), zero);
    VarId inter = t.mul(iw, ih);
    VarId uni = t.sub(t.add(t.mul(bw, bh), garea), inter);
    VarId iou_v = t.div(inter, uni);
    // center distance over enclosing diagonal
    VarId gcx = t.affine(t.add(gx1, gx2), 0.5f);
    VarId gcy = t.affine(t.add(gy1, gy2), 0.5f);
    VarId rho2 = t.add(t.square(t.sub(bx, gcx)), t.square(t.sub(by, gcy)));
    VarId cw = t.sub(t.vmax(px2, gx2), t.vmin(px1, gx1));
    VarId chh = t.sub(t.vmax(py2, gy2), t.vmin(py1, gy1));
    VarId c2 = t.add(t.square(cw), t.square(chh));
    // aspect term
    VarId v = t.affine(t.square(t.sub(gatan, t.arctan(t.div(bw, bh)))),
                       4.0f / static_cast<float>(M_PI * M_PI));
    VarId alpha = t.div(v, t.add(t.sub(one, iou_v), t.add(v, epsv)));
    VarId ciou_v = t.sub(t.sub(iou_v, t.div(rho2, c2)), t.mul(alpha, v));
    box = t.affine(t.mean(ciou_v), -1.0f, 1.0f);

    VarId cls_logits = cat(cls_p);
    Tensor ct = Tensor::from(Shape{1, static_cast<int>(cls_tgt.size()), 1, 1}, cls_tgt);
    cls = t.bce_with_logits_mean(cls_logits, std::move(ct));
  }

  VarId total = t.add(t.add(t.affine(box, lw.box), t.affine(obj, lw.obj)), t.affine(cls, lw.cls));

  LossResult res;
  res.box = box;
  res.obj = obj;
  res.cls = cls;
  res.total = total;
  res.values.box_loss = t.val(box).data[0];
  res.values.obj_loss = t.val(obj).data[0];
  res.values.cls_loss = t.val(cls).data[0];
  res.values.total = t.val(total).data[0];
  if (!std::isfinite(res.values.total)) {
    throw NumericError("compute_loss: non-finite total (box=" +
                       std::to_string(res.values.box_loss) +
                       ", obj=" + std::to_string(res.values.obj_loss) +
                       ", cls=" + std::to_string(res.values.cls_loss) + ")");
  }
  return res;
}

TrainResult train_tiny(Model& model, const std::vector<Sample>& samples, int steps, float lr,
                       std::uint64_t seed) {
  check(!samples.empty(), "train_tiny: empty dataset");
  check(model.cfg.input_w == model.cfg.input_h, "train_tiny: square input required");
  check(steps >= 1, "train_tiny: steps must be >= 1");
  int target = model.cfg.input_w;

  // Letterbox every sample once; batches reuse the preprocessed tensors.
  check(samples.size() <= 100, "train_tiny: desk-scale trainer caps at 100 images");
  std::size_t n = samples.size();
  std::size_t batch = std::min<std::size_t>(n, 8);
  std::vector<Tensor> prepped(n);
  std::vector<std::vector<GtBox>> all_gts(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = samples[i];
    auto [img, tf] = letterbox(s.image, target);
    prepped[i] = std::move(img);
    for (const Label& lb : s.labels) {
      float ow = static_cast<float>(s.image.shape.w), oh = static_cast<float>(s.image.shape.h);
      Box orig{(lb.cx - 0.5f * lb.w) * ow, (lb.cy - 0.5f * lb.h) * oh,
               (lb.cx + 0.5f * lb.w) * ow, (lb.cy + 0.5f * lb.h) * oh};
      Box net = tf.apply(orig);
      GtBox g;
      g.class_id = lb.class_id;
      g.cx = 0.5f * (net.x1 + net.x2);
      g.cy = 0.5f * (net.y1 + net.y2);
      g.w = net.x2 - net.x1;
      g.h = net.y2 - net.y1;
      all_gts[i].push_back(g);
    }
  }
  // Fixed batch when everything fits; otherwise minibatches cycle through a
  // seeded shuffle, reshuffled each epoch.
  Rng order_rng(seed);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (n > batch) order_rng.shuffle(order);
  std::size_t cursor = 0;
  auto next_batch = [&]() {
    std::vector<std::size_t> ids;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == n) {
        cursor = 0;
        if (n > batch) order_rng.shuffle(order);
      }
      ids.push_back(order[cursor++]);
    }
    return ids;
  };

  // SGD with momentum: fixed parameter order from visit_params.
  std::vector<Tensor*> params;
  model.visit_params([&](const std::string&, Tensor& t, bool trainable) {
    if (trainable) params.push_back(&t);
  });
  std::vector<std::vector<float>> velocity(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i].assign(params[i]->data.size(), 0.0f);
  }
  constexpr float kMomentum = 0.9f;

  TrainResult result;
  result.curve.reserve(static_cast<std::size_t>(steps));
  for (int step = 0; step < steps; ++step) {
    std::vector<std::size_t> ids = next_batch();
    Tensor images(static_cast<int>(batch), 3, target, target);
    std::vector<std::vector<GtBox>> gts(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy(prepped[ids[b]].data.begin(), prepped[ids[b]].data.end(),
                images.data.begin() + static_cast<std::int64_t>(b) * prepped[ids[b]].numel());
      gts[b] = all_gts[ids[b]];
    }
    std::vector<Assignment> assignments =
        assign_targets(gts, model.cfg, model.cfg.input_w, model.cfg.input_h);
    Tape t(true);
    VarId img = t.leaf_input(std::move(images), false);
    std::vector<VarId> raw = model.forward(t, img, Phase::kTrain);
    LossResult loss = compute_loss(t, raw, assignments, model.cfg);
    if (loss.values.total > 1e3f) {
      throw NumericError("train_tiny: diverged at step " + std::to_string(step) +
                         " (total=" + std::to_string(loss.values.total) + ")");
    }
    t.backward(loss.total);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::vector<float>* g = t.grad_for(*params[i]);
      check(g != nullptr, "train_tiny: parameter missing from tape");
      std::vector<float>& v = velocity[i];
      std::vector<float>& p = params[i]->data;
      for (std::size_t j = 0; j < p.size(); ++j) {
        v[j] = kMomentum * v[j] + (*g)[j];
        p[j] -= lr * v[j];
      }
    }
    result.curve.push_back(loss.values);
  }
  return result;
}

}  // namespace dgs
