#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dgs/blocks.hpp"

namespace dgs {

enum class BackboneKind { kDgsm, kConv };
enum class NeckKind { kDgst, kConv };

struct Anchor {
  float w = 0.0f;
  float h = 0.0f;
};

// Stage plan, head layout, and class count; fully determines the network.
struct ModelConfig {
  std::vector<std::pair<int, int>> stages = {{2, 64}, {3, 128}, {4, 256}, {2, 512}};  // (N, C)
  int num_classes = 2;
  int input_w = 640;
  int input_h = 640;
  BackboneKind backbone = BackboneKind::kDgsm;
  NeckKind neck = NeckKind::kDgst;
  std::vector<int> strides = {16, 32};
  std::vector<std::array<Anchor, 3>> anchors;  // one triple per head
  int pw_groups = 2;

  ModelConfig();  // fills default anchors for strides {16,32}

  int anchors_per_head() const { return 3; }
  int head_channels() const { return 3 * (5 + num_classes); }
  void validate() const;

  std::string serialize() const;
  static ModelConfig parse(const std::string& text);
  static ModelConfig load_file(const std::string& path);
  void save_file(const std::string& path) const;

  // "dgst_dgsm" (the default), "dgsm" (DGSM backbone + conv neck, 3 heads),
  // "dgst" (conv backbone + DGST neck, 2 heads), "baseline3" (conv everywhere,
  // 3 heads).
  static ModelConfig preset(const std::string& name);
};

struct LayerRow {
  std::string name;
  Shape out{};
  std::int64_t params = 0;       // analytic count
  std::int64_t params_enum = 0;  // enumerated from allocated buffers
  std::int64_t macs = 0;
};

struct Summary {
  std::vector<LayerRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
};

// One neck slot: a DGST block or the dense ELAN fallback, per config.
struct NeckBlock {
  NeckKind kind = NeckKind::kDgst;
  DgstBlock dgst;
  ElanBlock elan;

  void init(Rng& rng, NeckKind k, int channels, int pw_groups);
  VarId forward(Tape& t, VarId x, Phase phase);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  std::int64_t param_count() const;
  std::int64_t macs(Shape in) const;
};

// Assembled detector: stem, 4 backbone stages, PAN-style neck, 2 or 3 heads.
class Model {
 public:
  ModelConfig cfg;

  ConvBnAct stem0, stem1;
  std::vector<DgsmStage> dgsm_stages;
  std::vector<ConvStage> conv_stages;

  SppBlock spp;
  NeckBlock blk_top;                 // deepest width after SPP
  ConvBnAct fuse_p4;                 // (c5+c4) -> c4 pointwise
  NeckBlock blk_p4;
  // three-head extension
  ConvBnAct fuse_p3;                 // (c4+c3) -> c3
  NeckBlock blk_p3;
  ConvBnAct down_p3;                 // 3x3 s2 c3 -> c3
  ConvBnAct fuse_mid;                // (c3+c4) -> c4
  NeckBlock blk_mid;
  // bottom-path
  ConvBnAct down_p4;                 // 3x3 s2 c4 -> c4/2
  ConvBnAct fuse_p5;                 // (c4/2+c5) -> c5
  NeckBlock blk_bot;

  std::vector<DetectHead> heads;

  static Model build(const ModelConfig& cfg, std::uint64_t seed = 0);

  // Raw head outputs ordered by ascending stride.
  std::vector<VarId> forward(Tape& t, VarId image, Phase phase);

  void visit_params(const ParamVisitor& fn);
  std::int64_t param_count() const;        // analytic
  std::int64_t enumerated_param_count();   // sum of allocated buffer sizes
  Summary summarize(int in_h, int in_w);

  bool three_heads() const { return cfg.strides.size() == 3; }

 private:
  int c3_ = 0, c4_ = 0, c5_ = 0;
  VarId backbone_stage(Tape& t, int idx, VarId x, Phase phase);
  Shape stage_out_shape(int idx, Shape in) const;
};

std::string format_summary(const Summary& s);

}  // namespace dgs
