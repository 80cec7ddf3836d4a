#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dgs/rng.hpp"
#include "dgs/tape.hpp"

namespace dgs {

// Visits every stored tensor of a module: (name, tensor, trainable).
// Running statistics are visited with trainable=false; they persist in
// checkpoints but are not touched by the optimizer.
using ParamVisitor = std::function<void(const std::string&, Tensor&, bool)>;

std::int64_t conv_macs(const ConvSpec& spec, Shape out);

// Fixed 2D sinusoidal positional encoding over (h, w): the first c/2 channels
// encode the row index, the rest the column index. c must be even.
Tensor sinusoidal_posenc(int c, int h, int w);

struct BatchNorm {
  Tensor gamma, beta, running_mean, running_var;
  float eps = 1e-5f;
  float momentum = 0.03f;

  void init(int c);
  VarId forward(Tape& t, VarId x, Phase phase);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const { return 4LL * gamma.shape.c; }
};

struct LayerNorm {
  Tensor gamma, beta;
  float eps = 1e-5f;

  void init(int c);
  VarId forward(Tape& t, VarId x);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const { return 2LL * gamma.shape.c; }
};

// Plain convolution with optional bias (detect heads, attention projections).
struct ConvLayer {
  ConvSpec spec;
  Tensor w, b;

  void init(Rng& rng, const ConvSpec& s);
  VarId forward(Tape& t, VarId x);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const { return spec.param_count(); }
  Shape out_shape(Shape in) const { return ops::conv_out_shape(in, spec); }
  std::int64_t macs(Shape in) const { return conv_macs(spec, out_shape(in)); }
};

// Conv (no bias) + BatchNorm + optional LeakyReLU(0.1): the CBL unit.
struct ConvBnAct {
  ConvSpec spec;
  Tensor w;
  BatchNorm bn;
  bool act = true;
  float slope = 0.1f;

  void init(Rng& rng, const ConvSpec& s, bool with_act = true);
  VarId forward(Tape& t, VarId x, Phase phase);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const { return spec.weight_count() + bn.param_count(); }
  Shape out_shape(Shape in) const { return ops::conv_out_shape(in, spec); }
  std::int64_t macs(Shape in) const { return conv_macs(spec, out_shape(in)); }
};

// 3x3 depthwise conv (no bias) + BatchNorm, no activation.
struct DwConvBn {
  int channels = 0;
  int stride = 1;
  Tensor w;  // (c,1,3,3)
  BatchNorm bn;

  void init(Rng& rng, int c, int stride_);
  VarId forward(Tape& t, VarId x, Phase phase);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const { return 9LL * channels + bn.param_count(); }
  Shape out_shape(Shape in) const;
  std::int64_t macs(Shape in) const;
};

// ---- DGSM ---------------------------------------------------------------------

struct DgsmConfig {
  int channels = 0;    // output width
  int n_blocks = 1;    // stack depth N
  bool downsample = true;
  int pw_groups = 2;

  void validate() const;
};

// Split/transform/merge backbone block with grouped pointwise convs, a 3x3
// depthwise step, and a trailing channel shuffle. The stride-1 form keeps one
// half of the channels as an untouched skip; the stride-2 form processes both
// branches and halves the spatial size.
struct DgsmBlock {
  int in_channels = 0;
  int channels = 0;
  bool downsample = false;
  int pw_groups = 2;

  // branch A (downsample only)
  DwConvBn a_dw;
  ConvBnAct a_pw;
  // branch B
  ConvBnAct b_pw1;
  DwConvBn b_dw;
  ConvBnAct b_pw2;

  void init(Rng& rng, int in_c, int out_c, bool down, int pw_groups_);
  VarId forward(Tape& t, VarId x, Phase phase);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const;
  Shape out_shape(Shape in) const;
  std::int64_t macs(Shape in) const;
};

struct DgsmStage {
  DgsmConfig cfg;
  std::vector<DgsmBlock> blocks;

  // entry_stride selects the first block's stride (stage 1 keeps stride 1).
  void init(Rng& rng, int in_c, const DgsmConfig& cfg_, bool entry_downsamples);
  VarId forward(Tape& t, VarId x, Phase phase);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const;
  Shape out_shape(Shape in) const;
  std::int64_t macs(Shape in) const;
};

// ---- DGST ---------------------------------------------------------------------

struct DgstConfig {
  int channels = 0;
  int heads = 1;
  int mlp_ratio = 2;
  int pw_groups = 2;
  bool use_posenc = true;

  int attn_channels() const { return channels / 4; }
  int conv_channels() const { return channels - channels / 4; }
  void validate() const;
  // heads = ceil((c/4)/32) so head_dim stays <= 32, nudged up to a divisor.
  static int default_heads(int channels);
};

// Pre-norm transformer path on the 1/4 split: all projections are 1x1 convs,
// tokens are the h*w spatial positions.
struct AttentionPath {
  int channels = 0;
  int heads = 1;
  int mlp_ratio = 2;
  bool use_posenc = true;

  LayerNorm ln1, ln2;
  ConvLayer q, k, v, proj, mlp1, mlp2;

  void init(Rng& rng, int c, int heads_, int mlp_ratio_, bool use_posenc_);
  VarId forward(Tape& t, VarId x, Phase phase);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const;
  std::int64_t macs(Shape in) const;
};

struct DgstBlock {
  DgstConfig cfg;
  ConvBnAct c_pw1, c_pw2;
  DwConvBn c_dw;
  AttentionPath attn;

  void init(Rng& rng, const DgstConfig& cfg_);
  VarId forward(Tape& t, VarId x, Phase phase);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const;
  Shape out_shape(Shape in) const { return in; }
  std::int64_t macs(Shape in) const;
};

// ---- standard neck/baseline pieces ---------------------------------------------

// concat(x, maxpool 5/9/13 stride 1) -> grouped pointwise fuse back to x.c,
// then a shuffle to mix the groups.
struct SppBlock {
  int channels = 0;
  ConvBnAct fuse;

  void init(Rng& rng, int c, int pw_groups);
  VarId forward(Tape& t, VarId x, Phase phase);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const { return fuse.param_count(); }
  Shape out_shape(Shape in) const { return in; }
  std::int64_t macs(Shape in) const { return fuse.macs(Shape{in.n, 4 * in.c, in.h, in.w}); }
};

// ELAN-style dense aggregation block used by the conv baseline variants.
struct ElanBlock {
  int in_channels = 0;
  int channels = 0;
  ConvBnAct cv1, cv2, cv3, cv4, fuse;

  void init(Rng& rng, int in_c, int out_c);
  VarId forward(Tape& t, VarId x, Phase phase);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const;
  Shape out_shape(Shape in) const { return Shape{in.n, channels, in.h, in.w}; }
  std::int64_t macs(Shape in) const;
};

struct ConvStage {
  int channels = 0;
  ConvBnAct entry;  // 3x3, stride 2 (or 1 for the first stage)
  std::vector<ElanBlock> blocks;

  void init(Rng& rng, int in_c, int out_c, int n_blocks, bool entry_downsamples);
  VarId forward(Tape& t, VarId x, Phase phase);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const;
  Shape out_shape(Shape in) const;
  std::int64_t macs(Shape in) const;
};

// 1x1 conv with bias emitting anchors*(5+classes) raw channels.
struct DetectHead {
  ConvLayer conv;
  int num_anchors = 3;
  int num_classes = 0;

  void init(Rng& rng, int in_c, int num_anchors_, int num_classes_);
  VarId forward(Tape& t, VarId x);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const { return conv.param_count(); }
  Shape out_shape(Shape in) const { return conv.out_shape(in); }
  std::int64_t macs(Shape in) const { return conv.macs(in); }
};

}  // namespace dgs
