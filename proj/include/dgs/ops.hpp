#pragma once

#include <cstdint>
#include <vector>

#include "dgs/tensor.hpp"

// Pure NCHW kernels. Forward functions allocate and return their output;
// backward functions accumulate into caller-provided gradient buffers (which
// may be null when that input does not require a gradient). All loops are
// single-threaded with a fixed accumulation order, so repeated runs are
// bitwise identical.
namespace dgs::ops {

// ---- convolution -----------------------------------------------------------

Shape conv_out_shape(Shape in, const ConvSpec& spec);

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& spec);
void conv2d_backward(const Tensor& x, const Tensor& w, const ConvSpec& spec,
                     const std::vector<float>& gy, Shape y_shape,
                     std::vector<float>* gx, std::vector<float>* gw, std::vector<float>* gb);

// Fast path for 3x3 depthwise; agrees bitwise with conv2d(groups == channels).
Tensor depthwise_conv3x3(const Tensor& x, const Tensor& w, const Tensor* bias, int stride);

// ---- channel rearrangement -------------------------------------------------

// Output channel j reads input channel (j % g) * (c/g) + j / g.
Tensor channel_shuffle(const Tensor& x, int groups);
std::vector<Tensor> channel_split(const Tensor& x, const std::vector<int>& sizes);
Tensor concat_channels(const std::vector<const Tensor*>& xs);

// ---- normalization ---------------------------------------------------------

Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const Tensor& rmean, const Tensor& rvar, float eps);

struct BnBatchStats {
  std::vector<float> mean;  // per channel
  std::vector<float> var;   // per channel, biased
};
Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                       BnBatchStats* stats);

struct LnStats {
  std::vector<float> mean;     // per (n,h,w) position
  std::vector<float> inv_std;  // per (n,h,w) position
};
Tensor layernorm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                          LnStats* stats);

// ---- spatial ops ------------------------------------------------------------

// Padding is kernel/2 with -inf fill; `argmax` (optional) receives the flat
// in-plane index of the first maximal element per output cell.
Tensor maxpool(const Tensor& x, int kernel, int stride, std::vector<std::int32_t>* argmax);
Tensor upsample_nearest(const Tensor& x, int factor);

// ---- softmax / attention ----------------------------------------------------

Tensor softmax_lastdim(const Tensor& x);

// Scaled dot-product attention probabilities: output (n, heads, h*w, h*w),
// rows softmax-normalized over the last dim.
Tensor attention_probs(const Tensor& q, const Tensor& k, int heads);

// ---- small helpers ----------------------------------------------------------

float sigmoidf(float x);

}  // namespace dgs::ops
