#include "dgs/blocks.hpp"

#include <cmath>

namespace dgs {

std::int64_t conv_macs(const ConvSpec& spec, Shape out) {
  return static_cast<std::int64_t>(out.n) * out.c * out.h * out.w *
         (spec.in_channels / spec.groups) * spec.kernel * spec.kernel;
}

Tensor sinusoidal_posenc(int c, int h, int w) {
  check(c % 2 == 0, "posenc: channel count must be even, got " + std::to_string(c));
  Tensor pe(1, c, h, w);
  int half = c / 2;
  for (int ci = 0; ci < c; ++ci) {
    bool row_half = ci < half;
    int i = row_half ? ci : ci - half;
    double omega = std::pow(10000.0, -2.0 * (i / 2) / static_cast<double>(half));
    float* p = pe.plane(0, ci);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double pos = row_half ? y : x;
        double v = (i % 2 == 0) ? std::sin(pos * omega) : std::cos(pos * omega);
        p[static_cast<std::int64_t>(y) * w + x] = static_cast<float>(v);
      }
    }
  }
  return pe;
}

static Tensor he_normal(Rng& rng, Shape s, int fan_in) {
  Tensor t(s);
  float std = std::sqrt(2.0f / static_cast<float>(fan_in));
  for (float& v : t.data) v = rng.normal(0.0f, std);
  return t;
}

// ---- BatchNorm -----------------------------------------------------------------

void BatchNorm::init(int c) {
  gamma = Tensor::full(Shape{1, c, 1, 1}, 1.0f);
  beta = Tensor(1, c, 1, 1);
  running_mean = Tensor(1, c, 1, 1);
  running_var = Tensor::full(Shape{1, c, 1, 1}, 1.0f);
}

VarId BatchNorm::forward(Tape& t, VarId x, Phase phase) {
  VarId g = t.leaf_param(gamma);
  VarId b = t.leaf_param(beta);
  if (phase == Phase::kEval) {
    return t.batchnorm_eval(x, g, b, running_mean, running_var, eps);
  }
  ops::BnBatchStats stats;
  VarId y = t.batchnorm_train(x, g, b, eps, &stats);
  for (int ci = 0; ci < gamma.shape.c; ++ci) {
    running_mean.data[ci] = (1.0f - momentum) * running_mean.data[ci] + momentum * stats.mean[ci];
    running_var.data[ci] = (1.0f - momentum) * running_var.data[ci] + momentum * stats.var[ci];
  }
  return y;
}

void BatchNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".gamma", gamma, true);
  fn(prefix + ".beta", beta, true);
  fn(prefix + ".rmean", running_mean, false);
  fn(prefix + ".rvar", running_var, false);
}

// ---- LayerNorm -----------------------------------------------------------------

void LayerNorm::init(int c) {
  gamma = Tensor::full(Shape{1, c, 1, 1}, 1.0f);
  beta = Tensor(1, c, 1, 1);
}

VarId LayerNorm::forward(Tape& t, VarId x) {
  VarId g = t.leaf_param(gamma);
  VarId b = t.leaf_param(beta);
  return t.layernorm_channels(x, g, b, eps);
}

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".gamma", gamma, true);
  fn(prefix + ".beta", beta, true);
}

// ---- ConvLayer -----------------------------------------------------------------

void ConvLayer::init(Rng& rng, const ConvSpec& s) {
  spec = s;
  spec.validate();
  int fan_in = (s.in_channels / s.groups) * s.kernel * s.kernel;
  w = he_normal(rng, Shape{s.out_channels, s.in_channels / s.groups, s.kernel, s.kernel}, fan_in);
  if (s.has_bias) b = Tensor(1, s.out_channels, 1, 1);
}

VarId ConvLayer::forward(Tape& t, VarId x) {
  VarId wv = t.leaf_param(w);
  VarId bv = spec.has_bias ? t.leaf_param(b) : kNoVar;
  return t.conv2d(x, wv, bv, spec);
}

void ConvLayer::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".w", w, true);
  if (spec.has_bias) fn(prefix + ".b", b, true);
}

// ---- ConvBnAct -----------------------------------------------------------------

void ConvBnAct::init(Rng& rng, const ConvSpec& s, bool with_act) {
  spec = s;
  spec.has_bias = false;  // BN supplies the shift
  spec.validate();
  act = with_act;
  int fan_in = (s.in_channels / s.groups) * s.kernel * s.kernel;
  w = he_normal(rng, Shape{s.out_channels, s.in_channels / s.groups, s.kernel, s.kernel}, fan_in);
  bn.init(s.out_channels);
}

VarId ConvBnAct::forward(Tape& t, VarId x, Phase phase) {
  VarId wv = t.leaf_param(w);
  VarId y = t.conv2d(x, wv, kNoVar, spec);
  y = bn.forward(t, y, phase);
  if (act) y = t.leaky_relu(y, slope);
  return y;
}

void ConvBnAct::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".conv.w", w, true);
  bn.visit(prefix + ".bn", fn);
}

// ---- DwConvBn ------------------------------------------------------------------

void DwConvBn::init(Rng& rng, int c, int stride_) {
  channels = c;
  stride = stride_;
  w = he_normal(rng, Shape{c, 1, 3, 3}, 9);
  bn.init(c);
}

VarId DwConvBn::forward(Tape& t, VarId x, Phase phase) {
  VarId wv = t.leaf_param(w);
  VarId y = t.depthwise_conv3x3(x, wv, kNoVar, stride);
  return bn.forward(t, y, phase);
}

void DwConvBn::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".dw.w", w, true);
  bn.visit(prefix + ".bn", fn);
}

Shape DwConvBn::out_shape(Shape in) const {
  ConvSpec s{channels, channels, 3, stride, channels, false};
  return ops::conv_out_shape(in, s);
}

std::int64_t DwConvBn::macs(Shape in) const {
  Shape o = out_shape(in);
  return static_cast<std::int64_t>(o.n) * o.c * o.h * o.w * 9;
}

// ---- DGSM ----------------------------------------------------------------------

void DgsmConfig::validate() const {
  check(channels > 0 && channels % 4 == 0,
        "DgsmConfig: channels must be a positive multiple of 4, got " + std::to_string(channels));
  check(n_blocks >= 1, "DgsmConfig: n_blocks must be >= 1");
  check(pw_groups >= 1, "DgsmConfig: pw_groups must be >= 1");
  check((channels / 2) % pw_groups == 0,
        "DgsmConfig: half width " + std::to_string(channels / 2) + " not divisible by pw_groups " +
            std::to_string(pw_groups));
}

void DgsmBlock::init(Rng& rng, int in_c, int out_c, bool down, int pw_groups_) {
  in_channels = in_c;
  channels = out_c;
  downsample = down;
  pw_groups = pw_groups_;
  check(out_c % 4 == 0, "DgsmBlock: channels must be a multiple of 4");
  int half = out_c / 2;
  check(half % pw_groups == 0, "DgsmBlock: half width not divisible by pw_groups");
  if (down) {
    check(in_c % pw_groups == 0, "DgsmBlock: input width not divisible by pw_groups");
    a_dw.init(rng, in_c, 2);
    a_pw.init(rng, ConvSpec{in_c, half, 1, 1, 1, false});
    b_pw1.init(rng, ConvSpec{in_c, in_c, 1, 1, pw_groups, false});
    b_dw.init(rng, in_c, 2);
    b_pw2.init(rng, ConvSpec{in_c, half, 1, 1, pw_groups, false});
  } else {
    check(in_c == out_c, "DgsmBlock: stride-1 block requires in_channels == channels");
    b_pw1.init(rng, ConvSpec{half, half, 1, 1, pw_groups, false});
    b_dw.init(rng, half, 1);
    b_pw2.init(rng, ConvSpec{half, half, 1, 1, pw_groups, false});
  }
}

VarId DgsmBlock::forward(Tape& t, VarId x, Phase phase) {
  check(t.val(x).shape.c == in_channels,
        "DgsmBlock: expected " + std::to_string(in_channels) + " input channels, got " +
            std::to_string(t.val(x).shape.c));
  VarId merged;
  if (downsample) {
    VarId a = a_dw.forward(t, x, phase);
    a = a_pw.forward(t, a, phase);
    VarId b = b_pw1.forward(t, x, phase);
    b = b_dw.forward(t, b, phase);
    b = b_pw2.forward(t, b, phase);
    merged = t.concat({a, b});
  } else {
    int half = channels / 2;
    std::vector<VarId> parts = t.channel_split(x, {half, half});
    VarId b = b_pw1.forward(t, parts[1], phase);
    b = b_dw.forward(t, b, phase);
    b = b_pw2.forward(t, b, phase);
    merged = t.concat({parts[0], b});
  }
  return t.channel_shuffle(merged, 2);
}

void DgsmBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
  if (downsample) {
    a_dw.visit(prefix + ".a_dw", fn);
    a_pw.visit(prefix + ".a_pw", fn);
  }
  b_pw1.visit(prefix + ".b_pw1", fn);
  b_dw.visit(prefix + ".b_dw", fn);
  b_pw2.visit(prefix + ".b_pw2", fn);
}

std::int64_t DgsmBlock::param_count() const {
  std::int64_t total = b_pw1.param_count() + b_dw.param_count() + b_pw2.param_count();
  if (downsample) total += a_dw.param_count() + a_pw.param_count();
  return total;
}

Shape DgsmBlock::out_shape(Shape in) const {
  if (!downsample) return in;
  return Shape{in.n, channels, (in.h + 1) / 2, (in.w + 1) / 2};
}

std::int64_t DgsmBlock::macs(Shape in) const {
  std::int64_t total = 0;
  if (downsample) {
    Shape a1 = a_dw.out_shape(in);
    total += a_dw.macs(in) + a_pw.macs(a1);
    Shape b1 = in;  // pw1 keeps shape
    total += b_pw1.macs(b1) + b_dw.macs(b1) + b_pw2.macs(b_dw.out_shape(b1));
  } else {
    Shape halfs{in.n, in.c / 2, in.h, in.w};
    total += b_pw1.macs(halfs) + b_dw.macs(halfs) + b_pw2.macs(halfs);
  }
  return total;
}

void DgsmStage::init(Rng& rng, int in_c, const DgsmConfig& cfg_, bool entry_downsamples) {
  cfg = cfg_;
  cfg.validate();
  blocks.clear();
  blocks.resize(static_cast<std::size_t>(cfg.n_blocks));
  if (entry_downsamples) {
    blocks[0].init(rng, in_c, cfg.channels, true, cfg.pw_groups);
  } else {
    check(in_c == cfg.channels, "DgsmStage: non-downsampling entry requires matching widths");
    blocks[0].init(rng, in_c, cfg.channels, false, cfg.pw_groups);
  }
  for (int i = 1; i < cfg.n_blocks; ++i) {
    blocks[static_cast<std::size_t>(i)].init(rng, cfg.channels, cfg.channels, false, cfg.pw_groups);
  }
}

VarId DgsmStage::forward(Tape& t, VarId x, Phase phase) {
  VarId y = x;
  for (auto& b : blocks) y = b.forward(t, y, phase);
  return y;
}

void DgsmStage::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].visit(prefix + ".b" + std::to_string(i), fn);
  }
}

std::int64_t DgsmStage::param_count() const {
  std::int64_t total = 0;
  for (const auto& b : blocks) total += b.param_count();
  return total;
}

Shape DgsmStage::out_shape(Shape in) const {
  Shape s = in;
  for (const auto& b : blocks) s = b.out_shape(s);
  return s;
}

std::int64_t DgsmStage::macs(Shape in) const {
  std::int64_t total = 0;
  Shape s = in;
  for (const auto& b : blocks) {
    total += b.macs(s);
    s = b.out_shape(s);
  }
  return total;
}

// ---- DGST ----------------------------------------------------------------------

void DgstConfig::validate() const {
  check(channels > 0 && channels % 4 == 0,
        "DgstConfig: channels must be a positive multiple of 4, got " + std::to_string(channels));
  int ca = attn_channels();
  check(heads >= 1 && ca % heads == 0,
        "DgstConfig: heads " + std::to_string(heads) + " must divide attention width " +
            std::to_string(ca));
  check(ca % 2 == 0, "DgstConfig: attention width must be even for the positional encoding");
  check(conv_channels() % pw_groups == 0,
        "DgstConfig: conv path width " + std::to_string(conv_channels()) +
            " not divisible by pw_groups " + std::to_string(pw_groups));
  check(mlp_ratio >= 1, "DgstConfig: mlp_ratio must be >= 1");
}

int DgstConfig::default_heads(int channels) {
  int ca = channels / 4;
  int h = std::max(1, (ca + 31) / 32);
  while (ca % h != 0) ++h;
  return h;
}

void AttentionPath::init(Rng& rng, int c, int heads_, int mlp_ratio_, bool use_posenc_) {
  channels = c;
  heads = heads_;
  mlp_ratio = mlp_ratio_;
  use_posenc = use_posenc_;
  ln1.init(c);
  ln2.init(c);
  ConvSpec pw{c, c, 1, 1, 1, true};
  q.init(rng, pw);
  k.init(rng, pw);
  v.init(rng, pw);
  proj.init(rng, pw);
  mlp1.init(rng, ConvSpec{c, c * mlp_ratio, 1, 1, 1, true});
  mlp2.init(rng, ConvSpec{c * mlp_ratio, c, 1, 1, 1, true});
}

VarId AttentionPath::forward(Tape& t, VarId x, Phase) {
  Shape s = t.val(x).shape;
  VarId x0 = x;
  if (use_posenc) {
    Tensor pe = sinusoidal_posenc(channels, s.h, s.w);
    if (s.n > 1) {
      // replicate over the batch; add() has no broadcasting
      Tensor full(s);
      for (int ni = 0; ni < s.n; ++ni) {
        std::copy(pe.data.begin(), pe.data.end(),
                  full.data.begin() + static_cast<std::int64_t>(ni) * pe.numel());
      }
      pe = std::move(full);
    }
    x0 = t.add(x, t.leaf_const(std::move(pe)));
  }
  VarId n1 = ln1.forward(t, x0);
  VarId at = t.mhsa(q.forward(t, n1), k.forward(t, n1), v.forward(t, n1), heads);
  at = proj.forward(t, at);
  VarId x1 = t.add(x0, at);
  VarId n2 = ln2.forward(t, x1);
  VarId m = mlp1.forward(t, n2);
  m = t.silu(m);
  m = mlp2.forward(t, m);
  return t.add(x1, m);
}

void AttentionPath::visit(const std::string& prefix, const ParamVisitor& fn) {
  ln1.visit(prefix + ".ln1", fn);
  q.visit(prefix + ".q", fn);
  k.visit(prefix + ".k", fn);
  v.visit(prefix + ".v", fn);
  proj.visit(prefix + ".proj", fn);
  ln2.visit(prefix + ".ln2", fn);
  mlp1.visit(prefix + ".mlp1", fn);
  mlp2.visit(prefix + ".mlp2", fn);
}

std::int64_t AttentionPath::param_count() const {
  return ln1.param_count() + ln2.param_count() + q.param_count() + k.param_count() +
         v.param_count() + proj.param_count() + mlp1.param_count() + mlp2.param_count();
}

std::int64_t AttentionPath::macs(Shape in) const {
  std::int64_t tokens = static_cast<std::int64_t>(in.h) * in.w;
  std::int64_t core = 2 * tokens * tokens * channels * in.n;
  return core + q.macs(in) + k.macs(in) + v.macs(in) + proj.macs(in) + mlp1.macs(in) +
         mlp2.macs(mlp1.out_shape(in));
}

void DgstBlock::init(Rng& rng, const DgstConfig& cfg_) {
  cfg = cfg_;
  cfg.validate();
  int cc = cfg.conv_channels();
  c_pw1.init(rng, ConvSpec{cc, cc, 1, 1, cfg.pw_groups, false});
  c_dw.init(rng, cc, 1);
  c_pw2.init(rng, ConvSpec{cc, cc, 1, 1, cfg.pw_groups, false});
  attn.init(rng, cfg.attn_channels(), cfg.heads, cfg.mlp_ratio, cfg.use_posenc);
}

VarId DgstBlock::forward(Tape& t, VarId x, Phase phase) {
  check(t.val(x).shape.c == cfg.channels,
        "DgstBlock: expected " + std::to_string(cfg.channels) + " channels, got " +
            std::to_string(t.val(x).shape.c));
  std::vector<VarId> parts = t.channel_split(x, {cfg.conv_channels(), cfg.attn_channels()});
  VarId cv = c_pw1.forward(t, parts[0], phase);
  cv = c_dw.forward(t, cv, phase);
  cv = c_pw2.forward(t, cv, phase);
  cv = t.channel_shuffle(cv, cfg.pw_groups);
  VarId av = attn.forward(t, parts[1], phase);
  VarId merged = t.channel_shuffle(t.concat({cv, av}), 4);
  return t.add(merged, x);
}

void DgstBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
  c_pw1.visit(prefix + ".c_pw1", fn);
  c_dw.visit(prefix + ".c_dw", fn);
  c_pw2.visit(prefix + ".c_pw2", fn);
  attn.visit(prefix + ".attn", fn);
}

std::int64_t DgstBlock::param_count() const {
  return c_pw1.param_count() + c_dw.param_count() + c_pw2.param_count() + attn.param_count();
}

std::int64_t DgstBlock::macs(Shape in) const {
  Shape cs{in.n, cfg.conv_channels(), in.h, in.w};
  Shape as{in.n, cfg.attn_channels(), in.h, in.w};
  return c_pw1.macs(cs) + c_dw.macs(cs) + c_pw2.macs(cs) + attn.macs(as);
}

// ---- SPP -----------------------------------------------------------------------

void SppBlock::init(Rng& rng, int c, int pw_groups) {
  channels = c;
  fuse.init(rng, ConvSpec{4 * c, c, 1, 1, pw_groups, false});
}

VarId SppBlock::forward(Tape& t, VarId x, Phase phase) {
  VarId p5 = t.maxpool(x, 5, 1);
  VarId p9 = t.maxpool(x, 9, 1);
  VarId p13 = t.maxpool(x, 13, 1);
  VarId y = fuse.forward(t, t.concat({x, p5, p9, p13}), phase);
  return fuse.spec.groups > 1 ? t.channel_shuffle(y, fuse.spec.groups) : y;
}

void SppBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
  fuse.visit(prefix + ".fuse", fn);
}

// ---- ELAN baseline ---------------------------------------------------------------

void ElanBlock::init(Rng& rng, int in_c, int out_c) {
  in_channels = in_c;
  channels = out_c;
  int half = out_c / 2;
  cv1.init(rng, ConvSpec{in_c, half, 1, 1, 1, false});
  cv2.init(rng, ConvSpec{in_c, half, 1, 1, 1, false});
  cv3.init(rng, ConvSpec{half, half, 3, 1, 1, false});
  cv4.init(rng, ConvSpec{half, half, 3, 1, 1, false});
  fuse.init(rng, ConvSpec{2 * out_c, out_c, 1, 1, 1, false});
}

VarId ElanBlock::forward(Tape& t, VarId x, Phase phase) {
  VarId y0 = cv1.forward(t, x, phase);
  VarId y1 = cv2.forward(t, x, phase);
  VarId y2 = cv3.forward(t, y1, phase);
  VarId y3 = cv4.forward(t, y2, phase);
  return fuse.forward(t, t.concat({y0, y1, y2, y3}), phase);
}

void ElanBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
  cv1.visit(prefix + ".cv1", fn);
  cv2.visit(prefix + ".cv2", fn);
  cv3.visit(prefix + ".cv3", fn);
  cv4.visit(prefix + ".cv4", fn);
  fuse.visit(prefix + ".fuse", fn);
}

std::int64_t ElanBlock::param_count() const {
  return cv1.param_count() + cv2.param_count() + cv3.param_count() + cv4.param_count() +
         fuse.param_count();
}

std::int64_t ElanBlock::macs(Shape in) const {
  Shape half{in.n, channels / 2, in.h, in.w};
  Shape cat{in.n, 2 * channels, in.h, in.w};
  return cv1.macs(in) + cv2.macs(in) + cv3.macs(half) + cv4.macs(half) + fuse.macs(cat);
}

void ConvStage::init(Rng& rng, int in_c, int out_c, int n_blocks, bool entry_downsamples) {
  channels = out_c;
  entry.init(rng, ConvSpec{in_c, out_c, 3, entry_downsamples ? 2 : 1, 1, false});
  blocks.clear();
  blocks.resize(static_cast<std::size_t>(n_blocks));
  for (auto& b : blocks) b.init(rng, out_c, out_c);
}

VarId ConvStage::forward(Tape& t, VarId x, Phase phase) {
  VarId y = entry.forward(t, x, phase);
  for (auto& b : blocks) y = b.forward(t, y, phase);
  return y;
}

void ConvStage::visit(const std::string& prefix, const ParamVisitor& fn) {
  entry.visit(prefix + ".entry", fn);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].visit(prefix + ".b" + std::to_string(i), fn);
  }
}

std::int64_t ConvStage::param_count() const {
  std::int64_t total = entry.param_count();
  for (const auto& b : blocks) total += b.param_count();
  return total;
}

Shape ConvStage::out_shape(Shape in) const {
  Shape s = entry.out_shape(in);
  for (const auto& b : blocks) s = b.out_shape(s);
  return s;
}

std::int64_t ConvStage::macs(Shape in) const {
  std::int64_t total = entry.macs(in);
  Shape s = entry.out_shape(in);
  for (const auto& b : blocks) {
    total += b.macs(s);
    s = b.out_shape(s);
  }
  return total;
}

// ---- DetectHead ------------------------------------------------------------------

void DetectHead::init(Rng& rng, int in_c, int num_anchors_, int num_classes_) {
  num_anchors = num_anchors_;
  num_classes = num_classes_;
  conv.init(rng, ConvSpec{in_c, num_anchors_ * (5 + num_classes_), 1, 1, 1, true});
}

VarId DetectHead::forward(Tape& t, VarId x) { return conv.forward(t, x); }

void DetectHead::visit(const std::string& prefix, const ParamVisitor& fn) {
  conv.visit(prefix, fn);
}

}  // namespace dgs
