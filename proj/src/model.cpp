#include "dgs/model.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace dgs {

static const std::array<Anchor, 3> kAnchorsS8{{{10, 13}, {16, 30}, {33, 23}}};
static const std::array<Anchor, 3> kAnchorsS16{{{30, 61}, {62, 45}, {59, 119}}};
static const std::array<Anchor, 3> kAnchorsS32{{{116, 90}, {156, 198}, {373, 326}}};

ModelConfig::ModelConfig() {
  anchors = {kAnchorsS16, kAnchorsS32};
}

void ModelConfig::validate() const {
  check(stages.size() == 4, "ModelConfig: expected 4 backbone stages, got " +
                                std::to_string(stages.size()));
  for (const auto& [n, c] : stages) {
    check(n >= 1, "ModelConfig: stage depth must be >= 1");
    check(c > 0 && c % 4 == 0, "ModelConfig: stage channels must be a positive multiple of 4");
  }
  check(num_classes >= 1, "ModelConfig: num_classes must be >= 1");
  check(strides.size() == 2 || strides.size() == 3,
        "ModelConfig: expected 2 or 3 heads, got " + std::to_string(strides.size()));
  check(anchors.size() == strides.size(), "ModelConfig: anchors/strides length mismatch");
  std::vector<int> want = strides.size() == 2 ? std::vector<int>{16, 32}
                                              : std::vector<int>{8, 16, 32};
  check(strides == want, "ModelConfig: head strides must be 16,32 (or 8,16,32 for 3 heads)");
  for (const auto& trio : anchors) {
    for (const Anchor& a : trio) {
      check(a.w > 0 && a.h > 0, "ModelConfig: anchors must have positive extent");
    }
  }
  check(input_w > 0 && input_w % 32 == 0 && input_h > 0 && input_h % 32 == 0,
        "ModelConfig: input size must be a positive multiple of 32");
  check(pw_groups >= 1, "ModelConfig: pw_groups must be >= 1");
}

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os << "# dgsdet model config\n";
  os << "input " << input_w << " " << input_h << "\n";
  os << "classes " << num_classes << "\n";
  os << "backbone " << (backbone == BackboneKind::kDgsm ? "dgsm" : "conv") << "\n";
  os << "neck " << (neck == NeckKind::kDgst ? "dgst" : "conv") << "\n";
  os << "pw_groups " << pw_groups << "\n";
  for (const auto& [n, c] : stages) os << "stage " << n << " " << c << "\n";
  for (std::size_t i = 0; i < strides.size(); ++i) {
    os << "head " << strides[i];
    for (const Anchor& a : anchors[i]) os << " " << a.w << "," << a.h;
    os << "\n";
  }
  return os.str();
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg;
  cfg.stages.clear();
  cfg.strides.clear();
  cfg.anchors.clear();
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string where = "config line " + std::to_string(lineno);
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "input") {
      check(static_cast<bool>(ls >> cfg.input_w >> cfg.input_h), where + ": expected 'input W H'");
    } else if (key == "classes") {
      check(static_cast<bool>(ls >> cfg.num_classes), where + ": expected 'classes N'");
    } else if (key == "backbone") {
      std::string v;
      ls >> v;
      check(v == "dgsm" || v == "conv", where + ": backbone must be dgsm or conv");
      cfg.backbone = v == "dgsm" ? BackboneKind::kDgsm : BackboneKind::kConv;
    } else if (key == "neck") {
      std::string v;
      ls >> v;
      check(v == "dgst" || v == "conv", where + ": neck must be dgst or conv");
      cfg.neck = v == "dgst" ? NeckKind::kDgst : NeckKind::kConv;
    } else if (key == "pw_groups") {
      check(static_cast<bool>(ls >> cfg.pw_groups), where + ": expected 'pw_groups N'");
    } else if (key == "stage") {
      int n = 0, c = 0;
      check(static_cast<bool>(ls >> n >> c), where + ": expected 'stage N C'");
      cfg.stages.emplace_back(n, c);
    } else if (key == "head") {
      int stride = 0;
      check(static_cast<bool>(ls >> stride), where + ": expected 'head STRIDE w,h w,h w,h'");
      std::array<Anchor, 3> trio{};
      for (int i = 0; i < 3; ++i) {
        std::string tok;
        check(static_cast<bool>(ls >> tok), where + ": head needs 3 anchors");
        auto comma = tok.find(',');
        check(comma != std::string::npos, where + ": anchor must be w,h");
        try {
          trio[static_cast<std::size_t>(i)].w = std::stof(tok.substr(0, comma));
          trio[static_cast<std::size_t>(i)].h = std::stof(tok.substr(comma + 1));
        } catch (const std::exception&) {
          throw ValidationError(where + ": bad anchor token '" + tok + "'");
        }
      }
      cfg.strides.push_back(stride);
      cfg.anchors.push_back(trio);
    } else {
      throw ValidationError(where + ": unknown key '" + key + "'");
    }
  }
  if (cfg.stages.empty()) cfg.stages = {{2, 64}, {3, 128}, {4, 256}, {2, 512}};
  if (cfg.strides.empty()) {
    cfg.strides = {16, 32};
    cfg.anchors = {kAnchorsS16, kAnchorsS32};
  }
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), "cannot open config file: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse(buf.str());
}

void ModelConfig::save_file(const std::string& path) const {
  std::ofstream f(path);
  check(f.good(), "cannot write config file: " + path);
  f << serialize();
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig cfg;
  if (name == "dgst_dgsm") {
    return cfg;
  }
  if (name == "dgsm") {
    cfg.neck = NeckKind::kConv;
    cfg.strides = {8, 16, 32};
    cfg.anchors = {kAnchorsS8, kAnchorsS16, kAnchorsS32};
    return cfg;
  }
  if (name == "dgst") {
    cfg.backbone = BackboneKind::kConv;
    return cfg;
  }
  if (name == "baseline3") {
    cfg.backbone = BackboneKind::kConv;
    cfg.neck = NeckKind::kConv;
    cfg.strides = {8, 16, 32};
    cfg.anchors = {kAnchorsS8, kAnchorsS16, kAnchorsS32};
    return cfg;
  }
  throw ValidationError("unknown preset '" + name + "'");
}

// ---- NeckBlock -------------------------------------------------------------------

void NeckBlock::init(Rng& rng, NeckKind k, int channels, int pw_groups) {
  kind = k;
  if (kind == NeckKind::kDgst) {
    DgstConfig dc;
    dc.channels = channels;
    dc.heads = DgstConfig::default_heads(channels);
    dc.pw_groups = pw_groups;
    dgst.init(rng, dc);
  } else {
    elan.init(rng, channels, channels);
  }
}

VarId NeckBlock::forward(Tape& t, VarId x, Phase phase) {
  return kind == NeckKind::kDgst ? dgst.forward(t, x, phase) : elan.forward(t, x, phase);
}

void NeckBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
  if (kind == NeckKind::kDgst) {
    dgst.visit(prefix, fn);
  } else {
    elan.visit(prefix, fn);
  }
}

std::int64_t NeckBlock::param_count() const {
  return kind == NeckKind::kDgst ? dgst.param_count() : elan.param_count();
}

std::int64_t NeckBlock::macs(Shape in) const {
  return kind == NeckKind::kDgst ? dgst.macs(in) : elan.macs(in);
}

// ---- Model -----------------------------------------------------------------------

Model Model::build(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  Rng rng(seed);

  // stem widths follow the first stage: 3 -> c1/2 -> c1 (64 -> 32/64 default)
  int c1 = cfg.stages[0].second;
  m.stem0.init(rng, ConvSpec{3, c1 / 2, 3, 2, 1, false});
  m.stem1.init(rng, ConvSpec{c1 / 2, c1, 3, 2, 1, false});

  int in_c = c1;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    auto [n, c] = cfg.stages[i];
    bool entry_down = i > 0;  // stage 1 stays at stride 4
    if (cfg.backbone == BackboneKind::kDgsm) {
      DgsmConfig sc;
      sc.channels = c;
      sc.n_blocks = n;
      sc.downsample = entry_down;
      sc.pw_groups = cfg.pw_groups;
      DgsmStage st;
      st.init(rng, in_c, sc, entry_down);
      m.dgsm_stages.push_back(std::move(st));
    } else {
      ConvStage st;
      st.init(rng, in_c, c, n, entry_down);
      m.conv_stages.push_back(std::move(st));
    }
    in_c = c;
  }
  m.c3_ = cfg.stages[1].second;
  m.c4_ = cfg.stages[2].second;
  m.c5_ = cfg.stages[3].second;
  int g = cfg.pw_groups;

  m.spp.init(rng, m.c5_, g);
  m.blk_top.init(rng, cfg.neck, m.c5_, g);
  m.fuse_p4.init(rng, ConvSpec{m.c5_ + m.c4_, m.c4_, 1, 1, g, false});
  m.blk_p4.init(rng, cfg.neck, m.c4_, g);
  if (m.three_heads()) {
    m.fuse_p3.init(rng, ConvSpec{m.c4_ + m.c3_, m.c3_, 1, 1, g, false});
    m.blk_p3.init(rng, cfg.neck, m.c3_, g);
    m.down_p3.init(rng, ConvSpec{m.c3_, m.c3_, 3, 2, g, false});
    m.fuse_mid.init(rng, ConvSpec{m.c3_ + m.c4_, m.c4_, 1, 1, g, false});
    m.blk_mid.init(rng, cfg.neck, m.c4_, g);
  }
  m.down_p4.init(rng, ConvSpec{m.c4_, m.c4_ / 2, 3, 2, g, false});
  m.fuse_p5.init(rng, ConvSpec{m.c4_ / 2 + m.c5_, m.c5_, 1, 1, g, false});
  m.blk_bot.init(rng, cfg.neck, m.c5_, g);

  m.heads.resize(cfg.strides.size());
  std::vector<int> head_in = m.three_heads() ? std::vector<int>{m.c3_, m.c4_, m.c5_}
                                             : std::vector<int>{m.c4_, m.c5_};
  for (std::size_t i = 0; i < m.heads.size(); ++i) {
    m.heads[i].init(rng, head_in[i], 3, cfg.num_classes);
  }
  return m;
}

VarId Model::backbone_stage(Tape& t, int idx, VarId x, Phase phase) {
  if (cfg.backbone == BackboneKind::kDgsm) {
    return dgsm_stages[static_cast<std::size_t>(idx)].forward(t, x, phase);
  }
  return conv_stages[static_cast<std::size_t>(idx)].forward(t, x, phase);
}

Shape Model::stage_out_shape(int idx, Shape in) const {
  if (cfg.backbone == BackboneKind::kDgsm) {
    return dgsm_stages[static_cast<std::size_t>(idx)].out_shape(in);
  }
  return conv_stages[static_cast<std::size_t>(idx)].out_shape(in);
}

std::vector<VarId> Model::forward(Tape& t, VarId image, Phase phase) {
  Shape s = t.val(image).shape;
  check(s.c == 3, "Model: input must have 3 channels, got " + std::to_string(s.c));
  check(s.h % 32 == 0 && s.w % 32 == 0,
        "Model: input size must be divisible by 32, got " + s.str());
  VarId x = stem0.forward(t, image, phase);
  x = stem1.forward(t, x, phase);
  x = backbone_stage(t, 0, x, phase);
  VarId p3 = backbone_stage(t, 1, x, phase);
  VarId p4 = backbone_stage(t, 2, p3, phase);
  VarId p5 = backbone_stage(t, 3, p4, phase);

  VarId x5 = blk_top.forward(t, spp.forward(t, p5, phase), phase);
  VarId u4 = t.upsample_nearest(x5, 2);
  VarId f4 = fuse_p4.forward(t, t.concat({u4, p4}), phase);
  if (fuse_p4.spec.groups > 1) f4 = t.channel_shuffle(f4, fuse_p4.spec.groups);
  VarId x4 = blk_p4.forward(t, f4, phase);

  std::vector<VarId> outs;
  VarId head16_src = x4;
  if (three_heads()) {
    VarId u3 = t.upsample_nearest(x4, 2);
    VarId f3 = fuse_p3.forward(t, t.concat({u3, p3}), phase);
    if (fuse_p3.spec.groups > 1) f3 = t.channel_shuffle(f3, fuse_p3.spec.groups);
    VarId x3 = blk_p3.forward(t, f3, phase);
    outs.push_back(heads[0].forward(t, x3));

    VarId d3 = down_p3.forward(t, x3, phase);
    VarId fm = fuse_mid.forward(t, t.concat({d3, x4}), phase);
    if (fuse_mid.spec.groups > 1) fm = t.channel_shuffle(fm, fuse_mid.spec.groups);
    head16_src = blk_mid.forward(t, fm, phase);
  }
  outs.push_back(heads[three_heads() ? 1 : 0].forward(t, head16_src));

  VarId d4 = down_p4.forward(t, head16_src, phase);
  VarId f5 = fuse_p5.forward(t, t.concat({d4, x5}), phase);
  if (fuse_p5.spec.groups > 1) f5 = t.channel_shuffle(f5, fuse_p5.spec.groups);
  VarId x5b = blk_bot.forward(t, f5, phase);
  outs.push_back(heads[three_heads() ? 2 : 1].forward(t, x5b));
  return outs;
}

void Model::visit_params(const ParamVisitor& fn) {
  stem0.visit("stem.0", fn);
  stem1.visit("stem.1", fn);
  for (std::size_t i = 0; i < std::max(dgsm_stages.size(), conv_stages.size()); ++i) {
    std::string name = "backbone.s" + std::to_string(i + 1);
    if (cfg.backbone == BackboneKind::kDgsm) {
      dgsm_stages[i].visit(name, fn);
    } else {
      conv_stages[i].visit(name, fn);
    }
  }
  spp.visit("neck.spp", fn);
  blk_top.visit("neck.top", fn);
  fuse_p4.visit("neck.fuse_p4", fn);
  blk_p4.visit("neck.p4", fn);
  if (three_heads()) {
    fuse_p3.visit("neck.fuse_p3", fn);
    blk_p3.visit("neck.p3", fn);
    down_p3.visit("neck.down_p3", fn);
    fuse_mid.visit("neck.fuse_mid", fn);
    blk_mid.visit("neck.mid", fn);
  }
  down_p4.visit("neck.down_p4", fn);
  fuse_p5.visit("neck.fuse_p5", fn);
  blk_bot.visit("neck.bot", fn);
  for (std::size_t i = 0; i < heads.size(); ++i) {
    heads[i].visit("head." + std::to_string(i), fn);
  }
}

std::int64_t Model::enumerated_param_count() {
  std::int64_t total = 0;
  visit_params([&](const std::string&, Tensor& t, bool) { total += t.numel(); });
  return total;
}

std::int64_t Model::param_count() const {
  std::int64_t total = stem0.param_count() + stem1.param_count();
  for (const auto& s : dgsm_stages) total += s.param_count();
  for (const auto& s : conv_stages) total += s.param_count();
  total += spp.param_count() + blk_top.param_count() + fuse_p4.param_count() +
           blk_p4.param_count() + down_p4.param_count() + fuse_p5.param_count() +
           blk_bot.param_count();
  if (three_heads()) {
    total += fuse_p3.param_count() + blk_p3.param_count() + down_p3.param_count() +
             fuse_mid.param_count() + blk_mid.param_count();
  }
  for (const auto& h : heads) total += h.param_count();
  return total;
}

// Per-module enumeration helper for the summary table.
template <class M>
static std::int64_t enum_params(M& mod, const char* tag) {
  std::int64_t total = 0;
  mod.visit(tag, [&](const std::string&, Tensor& t, bool) { total += t.numel(); });
  return total;
}

Summary Model::summarize(int in_h, int in_w) {
  check(in_h % 32 == 0 && in_w % 32 == 0, "summarize: input size must be divisible by 32");
  Summary s;
  auto row = [&](const std::string& name, Shape out, std::int64_t params, std::int64_t penum,
                 std::int64_t macs) {
    s.rows.push_back(LayerRow{name, out, params, penum, macs});
    s.total_params += params;
    s.total_macs += macs;
  };

  Shape cur{1, 3, in_h, in_w};
  Shape o = stem0.out_shape(cur);
  row("stem.0", o, stem0.param_count(), enum_params(stem0, ""), stem0.macs(cur));
  cur = o;
  o = stem1.out_shape(cur);
  row("stem.1", o, stem1.param_count(), enum_params(stem1, ""), stem1.macs(cur));
  cur = o;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    std::string name = "backbone.s" + std::to_string(i + 1);
    if (cfg.backbone == BackboneKind::kDgsm) {
      auto& st = dgsm_stages[i];
      o = st.out_shape(cur);
      row(name, o, st.param_count(), enum_params(st, ""), st.macs(cur));
    } else {
      auto& st = conv_stages[i];
      o = st.out_shape(cur);
      row(name, o, st.param_count(), enum_params(st, ""), st.macs(cur));
    }
    cur = o;
  }
  Shape s3{1, c3_, in_h / 8, in_w / 8};
  Shape s4{1, c4_, in_h / 16, in_w / 16};
  Shape s5{1, c5_, in_h / 32, in_w / 32};

  row("neck.spp", s5, spp.param_count(), enum_params(spp, ""), spp.macs(s5));
  row("neck.top", s5, blk_top.param_count(), enum_params(blk_top, ""), blk_top.macs(s5));
  Shape cat4{1, c5_ + c4_, s4.h, s4.w};
  row("neck.fuse_p4", s4, fuse_p4.param_count(), enum_params(fuse_p4, ""), fuse_p4.macs(cat4));
  row("neck.p4", s4, blk_p4.param_count(), enum_params(blk_p4, ""), blk_p4.macs(s4));
  if (three_heads()) {
    Shape cat3{1, c4_ + c3_, s3.h, s3.w};
    row("neck.fuse_p3", s3, fuse_p3.param_count(), enum_params(fuse_p3, ""), fuse_p3.macs(cat3));
    row("neck.p3", s3, blk_p3.param_count(), enum_params(blk_p3, ""), blk_p3.macs(s3));
    row("neck.down_p3", s4, down_p3.param_count(), enum_params(down_p3, ""), down_p3.macs(s3));
    Shape catm{1, c3_ + c4_, s4.h, s4.w};
    row("neck.fuse_mid", s4, fuse_mid.param_count(), enum_params(fuse_mid, ""),
        fuse_mid.macs(catm));
    row("neck.mid", s4, blk_mid.param_count(), enum_params(blk_mid, ""), blk_mid.macs(s4));
  }
  Shape d4 = down_p4.out_shape(s4);
  row("neck.down_p4", d4, down_p4.param_count(), enum_params(down_p4, ""), down_p4.macs(s4));
  Shape cat5{1, c4_ / 2 + c5_, s5.h, s5.w};
  row("neck.fuse_p5", s5, fuse_p5.param_count(), enum_params(fuse_p5, ""), fuse_p5.macs(cat5));
  row("neck.bot", s5, blk_bot.param_count(), enum_params(blk_bot, ""), blk_bot.macs(s5));

  std::vector<Shape> head_in = three_heads() ? std::vector<Shape>{s3, s4, s5}
                                             : std::vector<Shape>{s4, s5};
  for (std::size_t i = 0; i < heads.size(); ++i) {
    Shape hi = head_in[i];
    row("head." + std::to_string(i), heads[i].out_shape(hi), heads[i].param_count(),
        enum_params(heads[i], ""), heads[i].macs(hi));
  }
  return s;
}

std::string format_summary(const Summary& s) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "layer" << std::right << std::setw(20) << "output"
     << std::setw(12) << "params" << std::setw(16) << "macs" << "\n";
  for (const auto& r : s.rows) {
    os << std::left << std::setw(18) << r.name << std::right << std::setw(20) << r.out.str()
       << std::setw(12) << r.params << std::setw(16) << r.macs << "\n";
  }
  os << std::left << std::setw(18) << "total" << std::right << std::setw(20) << ""
     << std::setw(12) << s.total_params << std::setw(16) << s.total_macs << "\n";
  os << "params " << std::fixed << std::setprecision(3)
     << static_cast<double>(s.total_params) / 1e6 << "M, macs " << std::setprecision(3)
     << static_cast<double>(s.total_macs) / 1e9 << "G\n";
  return os.str();
}

}  // namespace dgs
