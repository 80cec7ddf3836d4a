#pragma once

#include "dgs/loss.hpp"
#include "dgs/model.hpp"
#include "dgs/ref_ops.hpp"

// Double-precision replicas of the engine modules. Each replica copies the
// engine module's parameters at construction and computes the same function
// with the reference kernels; collect() exposes the trainable buffers under
// the same names the engine's visit_params() emits.
namespace dgs::ref {

using SlotList = std::vector<std::pair<std::string, std::vector<double>*>>;

struct RBn {
  RTensor gamma, beta, rmean, rvar;
  double eps = 1e-5;

  static RBn from(const BatchNorm& bn);
  RTensor fwd(const RTensor& x, bool train) const;
  void collect(const std::string& p, SlotList& s);
};

struct RLn {
  RTensor gamma, beta;
  double eps = 1e-5;

  static RLn from(const LayerNorm& ln);
  RTensor fwd(const RTensor& x) const;
  void collect(const std::string& p, SlotList& s);
};

struct RConv {
  ConvSpec spec;
  RTensor w, b;

  static RConv from(const ConvLayer& c);
  RTensor fwd(const RTensor& x) const;
  void collect(const std::string& p, SlotList& s);
};

struct RConvBnAct {
  ConvSpec spec;
  RTensor w;
  RBn bn;
  bool act = true;
  double slope = 0.1;

  static RConvBnAct from(const ConvBnAct& c);
  RTensor fwd(const RTensor& x, bool train) const;
  void collect(const std::string& p, SlotList& s);
};

struct RDwConvBn {
  int channels = 0, stride = 1;
  RTensor w;
  RBn bn;

  static RDwConvBn from(const DwConvBn& c);
  RTensor fwd(const RTensor& x, bool train) const;
  void collect(const std::string& p, SlotList& s);
};

struct RDgsmBlock {
  bool downsample = false;
  int channels = 0, pw_groups = 2;
  RDwConvBn a_dw, b_dw;
  RConvBnAct a_pw, b_pw1, b_pw2;

  static RDgsmBlock from(const DgsmBlock& b);
  RTensor fwd(const RTensor& x, bool train) const;
  void collect(const std::string& p, SlotList& s);
};

struct RDgsmStage {
  std::vector<RDgsmBlock> blocks;

  static RDgsmStage from(const DgsmStage& st);
  RTensor fwd(const RTensor& x, bool train) const;
  void collect(const std::string& p, SlotList& s);
};

struct RAttention {
  int channels = 0, heads = 1;
  bool use_posenc = true;
  RLn ln1, ln2;
  RConv q, k, v, proj, mlp1, mlp2;

  static RAttention from(const AttentionPath& a);
  RTensor fwd(const RTensor& x) const;
  void collect(const std::string& p, SlotList& s);
};

struct RDgstBlock {
  int channels = 0, pw_groups = 2;
  RConvBnAct c_pw1, c_pw2;
  RDwConvBn c_dw;
  RAttention attn;

  static RDgstBlock from(const DgstBlock& b);
  RTensor fwd(const RTensor& x, bool train) const;
  void collect(const std::string& p, SlotList& s);
};

struct RSpp {
  RConvBnAct fuse;

  static RSpp from(const SppBlock& b);
  RTensor fwd(const RTensor& x, bool train) const;
  void collect(const std::string& p, SlotList& s);
};

struct RHead {
  RConv conv;

  static RHead from(const DetectHead& h);
  RTensor fwd(const RTensor& x) const;
  void collect(const std::string& p, SlotList& s);
};

// Full-model replica; supports the DGSM backbone + DGST neck + two heads.
struct RModel {
  ModelConfig cfg;
  RConvBnAct stem0, stem1;
  std::vector<RDgsmStage> stages;
  RSpp spp;
  RDgstBlock top, p4, bot;
  RConvBnAct fuse_p4, down_p4, fuse_p5;
  std::vector<RHead> heads;

  static RModel from(const Model& m);
  std::vector<RTensor> fwd(const RTensor& image, bool train) const;
  void collect(SlotList& s);
};

struct RLossOut {
  double box = 0.0, obj = 0.0, cls = 0.0, total = 0.0;
};

// Mirrors compute_loss (decode, CIoU, BCE means) in double precision.
RLossOut loss_forward(const std::vector<RTensor>& raw_heads,
                      const std::vector<Assignment>& assignments, const ModelConfig& cfg,
                      const LossWeights& lw);

}  // namespace dgs::ref
