#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "dgs/ops.hpp"
#include "dgs/tensor.hpp"

namespace dgs {

using VarId = std::int32_t;
inline constexpr VarId kNoVar = -1;

enum class Phase { kTrain, kEval };

// Append-only autodiff tape. Ops compute forward values immediately and, when
// the tape is recording, register a backward closure. backward() walks nodes
// in reverse creation order (a valid topological order, and a fixed one), so
// gradients are bitwise reproducible. A tape can be consumed by backward()
// exactly once.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // Leaves. leaf_param remembers the origin tensor so its gradient can be
  // looked up after backward; leaf_const never receives gradients.
  VarId leaf_param(Tensor& origin);
  VarId leaf_const(Tensor value);
  VarId leaf_input(Tensor value, bool requires_grad);

  const Tensor& val(VarId id) const { return cnode(id).value; }
  const std::vector<float>& grad(VarId id) const;
  // Gradient buffer for a parameter registered via leaf_param; null if the
  // tensor was never registered.
  const std::vector<float>* grad_for(const Tensor& origin) const;

  void backward(VarId scalar_out);

  // ---- differentiable ops ---------------------------------------------------
  VarId conv2d(VarId x, VarId w, VarId b, const ConvSpec& spec);
  VarId depthwise_conv3x3(VarId x, VarId w, VarId b, int stride);
  VarId channel_shuffle(VarId x, int groups);
  std::vector<VarId> channel_split(VarId x, const std::vector<int>& sizes);
  VarId concat(const std::vector<VarId>& xs);
  VarId batchnorm_eval(VarId x, VarId gamma, VarId beta, const Tensor& rmean, const Tensor& rvar,
                       float eps);
  VarId batchnorm_train(VarId x, VarId gamma, VarId beta, float eps, ops::BnBatchStats* stats_out);
  VarId layernorm_channels(VarId x, VarId gamma, VarId beta, float eps);
  VarId leaky_relu(VarId x, float slope = 0.1f);
  VarId relu(VarId x);
  VarId sigmoid(VarId x);
  VarId silu(VarId x);
  VarId square(VarId x);
  VarId arctan(VarId x);
  VarId affine(VarId x, float a, float b = 0.0f);  // a*x + b
  VarId add(VarId x, VarId y);
  VarId sub(VarId x, VarId y);
  VarId mul(VarId x, VarId y);
  VarId div(VarId x, VarId y);
  VarId vmin(VarId x, VarId y);
  VarId vmax(VarId x, VarId y);
  VarId maxpool(VarId x, int kernel, int stride);
  VarId upsample_nearest(VarId x, int factor = 2);
  VarId softmax_lastdim(VarId x);
  // Multi-head scaled dot-product self-attention over the h*w token grid.
  VarId mhsa(VarId q, VarId k, VarId v, int heads);
  // Extract elements at fixed flat indices into a (1, M, 1, 1) tensor.
  VarId gather(VarId x, std::vector<std::int64_t> idx);
  VarId sum(VarId x);   // -> (1,1,1,1)
  VarId mean(VarId x);  // -> (1,1,1,1)
  // Mean binary cross-entropy with logits against fixed targets -> scalar.
  VarId bce_with_logits_mean(VarId x, Tensor targets);

 private:
  struct Node {
    Tensor value;
    std::vector<float> grad;  // sized lazily during backward
    bool requires_grad = false;
    const Tensor* origin = nullptr;
    std::function<void(Tape&)> bwd;  // empty for leaves
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, VarId> origin_map_;
  bool recording_;
  bool consumed_ = false;

  Node& node(VarId id);
  const Node& cnode(VarId id) const;
  VarId push(Tensor value, bool requires_grad, std::function<void(Tape&)> bwd);
  bool needs(VarId id) const { return id != kNoVar && cnode(id).requires_grad; }

  // Zero-initialized gradient buffer for accumulation.
  std::vector<float>& grad_buf(VarId id);

  using UnaryDf = float (*)(float x, float y, float p);
  VarId unary_op(VarId x, const char* name, float param, float (*f)(float, float), UnaryDf df);
  using BinaryDf = void (*)(float x, float y, float gz, float* gx, float* gy);
  VarId binary_op(VarId x, VarId y, const char* name, float (*f)(float, float), BinaryDf df);
};

}  // namespace dgs
