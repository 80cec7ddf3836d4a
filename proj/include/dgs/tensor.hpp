#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dgs/error.hpp"

namespace dgs {

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Rank-4 NCHW float32 array, contiguous row-major. `grad` is empty unless an
// autodiff pass populated it; when present it matches `data` in length.
struct Tensor {
  Shape shape{};
  std::vector<float> data;
  std::vector<float> grad;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(s), data(static_cast<std::size_t>(s.numel()), 0.0f) {}
  Tensor(int n, int c, int h, int w) : Tensor(Shape{n, c, h, w}) {}

  static Tensor full(Shape s, float v) {
    Tensor t(s);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor from(Shape s, std::vector<float> values);

  std::int64_t numel() const { return shape.numel(); }
  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  // Pointer to the (n,c) spatial plane of size h*w.
  float* plane(int ni, int ci) {
    return data.data() + (static_cast<std::int64_t>(ni) * shape.c + ci) * shape.h * shape.w;
  }
  const float* plane(int ni, int ci) const {
    return data.data() + (static_cast<std::int64_t>(ni) * shape.c + ci) * shape.h * shape.w;
  }

  float& at(int ni, int ci, int hi, int wi) {
    return data[((static_cast<std::int64_t>(ni) * shape.c + ci) * shape.h + hi) * shape.w + wi];
  }
  float at(int ni, int ci, int hi, int wi) const {
    return data[((static_cast<std::int64_t>(ni) * shape.c + ci) * shape.h + hi) * shape.w + wi];
  }
};

// Grouped 2D convolution geometry. Padding is always kernel/2 ("same").
struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;   // 1 or 3
  int stride = 1;   // 1 or 2
  int groups = 1;
  bool has_bias = false;

  int padding() const { return kernel / 2; }
  std::int64_t weight_count() const {
    return static_cast<std::int64_t>(out_channels) * (in_channels / groups) * kernel * kernel;
  }
  std::int64_t param_count() const {
    return weight_count() + (has_bias ? out_channels : 0);
  }
  void validate() const;
};

// Throws NumericError if any element is NaN or Inf.
void check_finite(const Tensor& t, const char* op);
void check_finite(const std::vector<float>& v, const char* op);

}  // namespace dgs
