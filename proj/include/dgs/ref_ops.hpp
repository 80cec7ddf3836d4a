#pragma once

#include <cstdint>
#include <vector>

#include "dgs/tensor.hpp"

// Double-precision reference kernels, written as straight loops independent of
// the engine's implementation. They serve as the naive-convolution oracle and
// as the function under central differences in gradient checks.
namespace dgs::ref {

struct RTensor {
  Shape shape{};
  std::vector<double> data;

  RTensor() = default;
  explicit RTensor(Shape s) : shape(s), data(static_cast<std::size_t>(s.numel()), 0.0) {}
  RTensor(int n, int c, int h, int w) : RTensor(Shape{n, c, h, w}) {}
  static RTensor from(const Tensor& t);
  Tensor to_f32() const;

  std::int64_t numel() const { return shape.numel(); }
  double& at(int ni, int ci, int hi, int wi) {
    return data[((static_cast<std::int64_t>(ni) * shape.c + ci) * shape.h + hi) * shape.w + wi];
  }
  double at(int ni, int ci, int hi, int wi) const {
    return data[((static_cast<std::int64_t>(ni) * shape.c + ci) * shape.h + hi) * shape.w + wi];
  }
};

RTensor conv2d(const RTensor& x, const RTensor& w, const RTensor* bias, const ConvSpec& spec);
RTensor channel_shuffle(const RTensor& x, int groups);
std::vector<RTensor> channel_split(const RTensor& x, const std::vector<int>& sizes);
RTensor concat(const std::vector<const RTensor*>& xs);
RTensor batchnorm_eval(const RTensor& x, const RTensor& gamma, const RTensor& beta,
                       const RTensor& rmean, const RTensor& rvar, double eps);
RTensor batchnorm_train(const RTensor& x, const RTensor& gamma, const RTensor& beta, double eps);
RTensor layernorm_channels(const RTensor& x, const RTensor& gamma, const RTensor& beta,
                           double eps);
RTensor leaky_relu(const RTensor& x, double slope);
RTensor sigmoid(const RTensor& x);
RTensor silu(const RTensor& x);
RTensor square(const RTensor& x);
RTensor arctan(const RTensor& x);
RTensor affine(const RTensor& x, double a, double b = 0.0);
RTensor add(const RTensor& x, const RTensor& y);
RTensor sub(const RTensor& x, const RTensor& y);
RTensor mul(const RTensor& x, const RTensor& y);
RTensor divide(const RTensor& x, const RTensor& y);
RTensor vmin(const RTensor& x, const RTensor& y);
RTensor vmax(const RTensor& x, const RTensor& y);
RTensor maxpool(const RTensor& x, int kernel, int stride);
RTensor upsample_nearest(const RTensor& x, int factor);
RTensor softmax_lastdim(const RTensor& x);
RTensor mhsa(const RTensor& q, const RTensor& k, const RTensor& v, int heads);
RTensor gather(const RTensor& x, const std::vector<std::int64_t>& idx);
double sum(const RTensor& x);
double mean(const RTensor& x);
double bce_with_logits_mean(const RTensor& x, const RTensor& targets);
RTensor posenc(int c, int h, int w);

}  // namespace dgs::ref
