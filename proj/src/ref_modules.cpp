#include "dgs/ref_modules.hpp"

#include <cmath>

namespace dgs::ref {

RBn RBn::from(const BatchNorm& bn) {
  RBn r;
  r.gamma = RTensor::from(bn.gamma);
  r.beta = RTensor::from(bn.beta);
  r.rmean = RTensor::from(bn.running_mean);
  r.rvar = RTensor::from(bn.running_var);
  r.eps = static_cast<double>(bn.eps);
  return r;
}

RTensor RBn::fwd(const RTensor& x, bool train) const {
  if (train) return batchnorm_train(x, gamma, beta, eps);
  return batchnorm_eval(x, gamma, beta, rmean, rvar, eps);
}

void RBn::collect(const std::string& p, SlotList& s) {
  s.emplace_back(p + ".gamma", &gamma.data);
  s.emplace_back(p + ".beta", &beta.data);
}

RLn RLn::from(const LayerNorm& ln) {
  RLn r;
  r.gamma = RTensor::from(ln.gamma);
  r.beta = RTensor::from(ln.beta);
  r.eps = static_cast<double>(ln.eps);
  return r;
}

RTensor RLn::fwd(const RTensor& x) const { return layernorm_channels(x, gamma, beta, eps); }

void RLn::collect(const std::string& p, SlotList& s) {
  s.emplace_back(p + ".gamma", &gamma.data);
  s.emplace_back(p + ".beta", &beta.data);
}

RConv RConv::from(const ConvLayer& c) {
  RConv r;
  r.spec = c.spec;
  r.w = RTensor::from(c.w);
  if (c.spec.has_bias) r.b = RTensor::from(c.b);
  return r;
}

RTensor RConv::fwd(const RTensor& x) const {
  return conv2d(x, w, spec.has_bias ? &b : nullptr, spec);
}

void RConv::collect(const std::string& p, SlotList& s) {
  s.emplace_back(p + ".w", &w.data);
  if (spec.has_bias) s.emplace_back(p + ".b", &b.data);
}

RConvBnAct RConvBnAct::from(const ConvBnAct& c) {
  RConvBnAct r;
  r.spec = c.spec;
  r.w = RTensor::from(c.w);
  r.bn = RBn::from(c.bn);
  r.act = c.act;
  r.slope = static_cast<double>(c.slope);
  return r;
}

RTensor RConvBnAct::fwd(const RTensor& x, bool train) const {
  RTensor y = conv2d(x, w, nullptr, spec);
  y = bn.fwd(y, train);
  if (act) y = leaky_relu(y, slope);
  return y;
}

void RConvBnAct::collect(const std::string& p, SlotList& s) {
  s.emplace_back(p + ".conv.w", &w.data);
  bn.collect(p + ".bn", s);
}

RDwConvBn RDwConvBn::from(const DwConvBn& c) {
  RDwConvBn r;
  r.channels = c.channels;
  r.stride = c.stride;
  r.w = RTensor::from(c.w);
  r.bn = RBn::from(c.bn);
  return r;
}

RTensor RDwConvBn::fwd(const RTensor& x, bool train) const {
  ConvSpec spec{channels, channels, 3, stride, channels, false};
  RTensor y = conv2d(x, w, nullptr, spec);
  return bn.fwd(y, train);
}

void RDwConvBn::collect(const std::string& p, SlotList& s) {
  s.emplace_back(p + ".dw.w", &w.data);
  bn.collect(p + ".bn", s);
}

RDgsmBlock RDgsmBlock::from(const DgsmBlock& b) {
  RDgsmBlock r;
  r.downsample = b.downsample;
  r.channels = b.channels;
  r.pw_groups = b.pw_groups;
  if (b.downsample) {
    r.a_dw = RDwConvBn::from(b.a_dw);
    r.a_pw = RConvBnAct::from(b.a_pw);
  }
  r.b_pw1 = RConvBnAct::from(b.b_pw1);
  r.b_dw = RDwConvBn::from(b.b_dw);
  r.b_pw2 = RConvBnAct::from(b.b_pw2);
  return r;
}

RTensor RDgsmBlock::fwd(const RTensor& x, bool train) const {
  RTensor merged;
  if (downsample) {
    RTensor a = a_pw.fwd(a_dw.fwd(x, train), train);
    RTensor b = b_pw2.fwd(b_dw.fwd(b_pw1.fwd(x, train), train), train);
    merged = concat({&a, &b});
  } else {
    int half = channels / 2;
    std::vector<RTensor> parts = channel_split(x, {half, half});
    RTensor b = b_pw2.fwd(b_dw.fwd(b_pw1.fwd(parts[1], train), train), train);
    merged = concat({&parts[0], &b});
  }
  return channel_shuffle(merged, 2);
}

void RDgsmBlock::collect(const std::string& p, SlotList& s) {
  if (downsample) {
    a_dw.collect(p + ".a_dw", s);
    a_pw.collect(p + ".a_pw", s);
  }
  b_pw1.collect(p + ".b_pw1", s);
  b_dw.collect(p + ".b_dw", s);
  b_pw2.collect(p + ".b_pw2", s);
}

RDgsmStage RDgsmStage::from(const DgsmStage& st) {
  RDgsmStage r;
  for (const auto& b : st.blocks) r.blocks.push_back(RDgsmBlock::from(b));
  return r;
}

RTensor RDgsmStage::fwd(const RTensor& x, bool train) const {
  RTensor y = x;
  for (const auto& b : blocks) y = b.fwd(y, train);
  return y;
}

void RDgsmStage::collect(const std::string& p, SlotList& s) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect(p + ".b" + std::to_string(i), s);
  }
}

RAttention RAttention::from(const AttentionPath& a) {
  RAttention r;
  r.channels = a.channels;
  r.heads = a.heads;
  r.use_posenc = a.use_posenc;
  r.ln1 = RLn::from(a.ln1);
  r.ln2 = RLn::from(a.ln2);
  r.q = RConv::from(a.q);
  r.k = RConv::from(a.k);
  r.v = RConv::from(a.v);
  r.proj = RConv::from(a.proj);
  r.mlp1 = RConv::from(a.mlp1);
  r.mlp2 = RConv::from(a.mlp2);
  return r;
}

RTensor RAttention::fwd(const RTensor& x) const {
  RTensor x0 = x;
  if (use_posenc) {
    RTensor pe = posenc(channels, x.shape.h, x.shape.w);
    RTensor full(x.shape);
    for (int ni = 0; ni < x.shape.n; ++ni) {
      std::copy(pe.data.begin(), pe.data.end(),
                full.data.begin() + static_cast<std::int64_t>(ni) * pe.numel());
    }
    x0 = add(x, full);
  }
  RTensor n1 = ln1.fwd(x0);
  RTensor at = mhsa(q.fwd(n1), k.fwd(n1), v.fwd(n1), heads);
  RTensor x1 = add(x0, proj.fwd(at));
  RTensor n2 = ln2.fwd(x1);
  return add(x1, mlp2.fwd(silu(mlp1.fwd(n2))));
}

void RAttention::collect(const std::string& p, SlotList& s) {
  ln1.collect(p + ".ln1", s);
  q.collect(p + ".q", s);
  k.collect(p + ".k", s);
  v.collect(p + ".v", s);
  proj.collect(p + ".proj", s);
  ln2.collect(p + ".ln2", s);
  mlp1.collect(p + ".mlp1", s);
  mlp2.collect(p + ".mlp2", s);
}

RDgstBlock RDgstBlock::from(const DgstBlock& b) {
  RDgstBlock r;
  r.channels = b.cfg.channels;
  r.pw_groups = b.cfg.pw_groups;
  r.c_pw1 = RConvBnAct::from(b.c_pw1);
  r.c_dw = RDwConvBn::from(b.c_dw);
  r.c_pw2 = RConvBnAct::from(b.c_pw2);
  r.attn = RAttention::from(b.attn);
  return r;
}

RTensor RDgstBlock::fwd(const RTensor& x, bool train) const {
  int ca = channels / 4;
  int cc = channels - ca;
  std::vector<RTensor> parts = channel_split(x, {cc, ca});
  RTensor cv = c_pw2.fwd(c_dw.fwd(c_pw1.fwd(parts[0], train), train), train);
  cv = channel_shuffle(cv, pw_groups);
  RTensor av = attn.fwd(parts[1]);
  RTensor merged = channel_shuffle(concat({&cv, &av}), 4);
  return add(merged, x);
}

void RDgstBlock::collect(const std::string& p, SlotList& s) {
  c_pw1.collect(p + ".c_pw1", s);
  c_dw.collect(p + ".c_dw", s);
  c_pw2.collect(p + ".c_pw2", s);
  attn.collect(p + ".attn", s);
}

RSpp RSpp::from(const SppBlock& b) {
  RSpp r;
  r.fuse = RConvBnAct::from(b.fuse);
  return r;
}

RTensor RSpp::fwd(const RTensor& x, bool train) const {
  RTensor p5 = maxpool(x, 5, 1);
  RTensor p9 = maxpool(x, 9, 1);
  RTensor p13 = maxpool(x, 13, 1);
  RTensor y = fuse.fwd(concat({&x, &p5, &p9, &p13}), train);
  return fuse.spec.groups > 1 ? channel_shuffle(y, fuse.spec.groups) : y;
}

void RSpp::collect(const std::string& p, SlotList& s) { fuse.collect(p + ".fuse", s); }

RHead RHead::from(const DetectHead& h) {
  RHead r;
  r.conv = RConv::from(h.conv);
  return r;
}

RTensor RHead::fwd(const RTensor& x) const { return conv.fwd(x); }

void RHead::collect(const std::string& p, SlotList& s) { conv.collect(p, s); }

RModel RModel::from(const Model& m) {
  check(m.cfg.backbone == BackboneKind::kDgsm && m.cfg.neck == NeckKind::kDgst &&
            m.cfg.strides.size() == 2,
        "RModel: replica supports the dgsm+dgst two-head configuration");
  RModel r;
  r.cfg = m.cfg;
  r.stem0 = RConvBnAct::from(m.stem0);
  r.stem1 = RConvBnAct::from(m.stem1);
  for (const auto& st : m.dgsm_stages) r.stages.push_back(RDgsmStage::from(st));
  r.spp = RSpp::from(m.spp);
  r.top = RDgstBlock::from(m.blk_top.dgst);
  r.p4 = RDgstBlock::from(m.blk_p4.dgst);
  r.bot = RDgstBlock::from(m.blk_bot.dgst);
  r.fuse_p4 = RConvBnAct::from(m.fuse_p4);
  r.down_p4 = RConvBnAct::from(m.down_p4);
  r.fuse_p5 = RConvBnAct::from(m.fuse_p5);
  for (const auto& h : m.heads) r.heads.push_back(RHead::from(h));
  return r;
}

std::vector<RTensor> RModel::fwd(const RTensor& image, bool train) const {
  RTensor x = stem1.fwd(stem0.fwd(image, train), train);
  x = stages[0].fwd(x, train);
  RTensor p3 = stages[1].fwd(x, train);
  RTensor p4v = stages[2].fwd(p3, train);
  RTensor p5v = stages[3].fwd(p4v, train);

  RTensor x5 = top.fwd(spp.fwd(p5v, train), train);
  RTensor u4 = upsample_nearest(x5, 2);
  RTensor cat4 = concat({&u4, &p4v});
  RTensor f4 = fuse_p4.fwd(cat4, train);
  if (fuse_p4.spec.groups > 1) f4 = channel_shuffle(f4, fuse_p4.spec.groups);
  RTensor x4 = p4.fwd(f4, train);

  RTensor d4 = down_p4.fwd(x4, train);
  RTensor cat5 = concat({&d4, &x5});
  RTensor f5 = fuse_p5.fwd(cat5, train);
  if (fuse_p5.spec.groups > 1) f5 = channel_shuffle(f5, fuse_p5.spec.groups);
  RTensor x5b = bot.fwd(f5, train);

  std::vector<RTensor> outs;
  outs.push_back(heads[0].fwd(x4));
  outs.push_back(heads[1].fwd(x5b));
  return outs;
}

void RModel::collect(SlotList& s) {
  stem0.collect("stem.0", s);
  stem1.collect("stem.1", s);
  for (std::size_t i = 0; i < stages.size(); ++i) {
    stages[i].collect("backbone.s" + std::to_string(i + 1), s);
  }
  spp.collect("neck.spp", s);
  top.collect("neck.top", s);
  fuse_p4.collect("neck.fuse_p4", s);
  p4.collect("neck.p4", s);
  down_p4.collect("neck.down_p4", s);
  fuse_p5.collect("neck.fuse_p5", s);
  bot.collect("neck.bot", s);
  for (std::size_t i = 0; i < heads.size(); ++i) {
    heads[i].collect("head." + std::to_string(i), s);
  }
}

RLossOut loss_forward(const std::vector<RTensor>& raw_heads,
                      const std::vector<Assignment>& assignments, const ModelConfig& cfg,
                      const LossWeights& lw) {
  int nc = cfg.num_classes;
  int per_anchor = 5 + nc;
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  auto bce = [](double z, double t) {
    return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
  };

  RLossOut out;

  // objectness over every cell
  double obj_acc = 0.0;
  std::int64_t obj_n = 0;
  for (std::size_t h = 0; h < raw_heads.size(); ++h) {
    const RTensor& raw = raw_heads[h];
    for (int img = 0; img < raw.shape.n; ++img) {
      for (int a = 0; a < 3; ++a) {
        int ch = a * per_anchor + 4;
        for (int gy = 0; gy < raw.shape.h; ++gy) {
          for (int gx = 0; gx < raw.shape.w; ++gx) {
            double target = 0.0;
            for (const Assignment& as : assignments) {
              if (as.head == static_cast<int>(h) && as.image == img && as.anchor == a &&
                  as.cell_y == gy && as.cell_x == gx) {
                target = 1.0;
                break;
              }
            }
            obj_acc += bce(raw.at(img, ch, gy, gx), target);
            ++obj_n;
          }
        }
      }
    }
  }
  out.obj = obj_acc / static_cast<double>(obj_n);

  if (!assignments.empty()) {
    double ciou_acc = 0.0;
    double cls_acc = 0.0;
    std::int64_t cls_n = 0;
    // head-major assignment order, matching the engine's gather layout
    for (std::size_t h = 0; h < raw_heads.size(); ++h) {
      const RTensor& raw = raw_heads[h];
      double stride = static_cast<double>(cfg.strides[h]);
      for (const Assignment& as : assignments) {
        if (as.head != static_cast<int>(h)) continue;
        int base = as.anchor * per_anchor;
        double tx = raw.at(as.image, base + 0, as.cell_y, as.cell_x);
        double ty = raw.at(as.image, base + 1, as.cell_y, as.cell_x);
        double tw = raw.at(as.image, base + 2, as.cell_y, as.cell_x);
        double th = raw.at(as.image, base + 3, as.cell_y, as.cell_x);
        const Anchor& an = cfg.anchors[h][static_cast<std::size_t>(as.anchor)];
        double bx = (2.0 * sig(tx) - 0.5 + as.cell_x) * stride;
        double by = (2.0 * sig(ty) - 0.5 + as.cell_y) * stride;
        double sw = 2.0 * sig(tw), sh = 2.0 * sig(th);
        double bw = sw * sw * an.w, bh = sh * sh * an.h;
        double px1 = bx - 0.5 * bw, px2 = bx + 0.5 * bw;
        double py1 = by - 0.5 * bh, py2 = by + 0.5 * bh;
        double gx1 = as.gt.cx - 0.5 * as.gt.w, gx2 = as.gt.cx + 0.5 * as.gt.w;
        double gy1 = as.gt.cy - 0.5 * as.gt.h, gy2 = as.gt.cy + 0.5 * as.gt.h;
        double iw = std::max(std::min(px2, gx2) - std::max(px1, gx1), 0.0);
        double ih = std::max(std::min(py2, gy2) - std::max(py1, gy1), 0.0);
        double inter = iw * ih;
        double uni = bw * bh + static_cast<double>(as.gt.w) * as.gt.h - inter;
        double iou_v = inter / uni;
        double gcx = 0.5 * (gx1 + gx2), gcy = 0.5 * (gy1 + gy2);
        double rho2 = (bx - gcx) * (bx - gcx) + (by - gcy) * (by - gcy);
        double cw = std::max(px2, gx2) - std::min(px1, gx1);
        double chh = std::max(py2, gy2) - std::min(py1, gy1);
        double c2 = cw * cw + chh * chh;
        double da = std::atan(static_cast<double>(as.gt.w) / as.gt.h) - std::atan(bw / bh);
        double v = 4.0 / (M_PI * M_PI) * da * da;
        double alpha = v / ((1.0 - iou_v) + (v + 1e-7));
        ciou_acc += iou_v - rho2 / c2 - alpha * v;

        for (int c = 0; c < nc; ++c) {
          cls_acc += bce(raw.at(as.image, base + 5 + c, as.cell_y, as.cell_x),
                         c == as.gt.class_id ? 1.0 : 0.0);
          ++cls_n;
        }
      }
    }
    out.box = 1.0 - ciou_acc / static_cast<double>(assignments.size());
    out.cls = cls_acc / static_cast<double>(cls_n);
  }
  out.total = (lw.box * out.box + lw.obj * out.obj) + lw.cls * out.cls;
  return out;
}

}  // namespace dgs::ref
