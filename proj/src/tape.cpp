#include "dgs/tape.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace dgs {

Tape::Node& Tape::node(VarId id) {
  check(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(), "Tape: invalid var id");
  return nodes_[static_cast<std::size_t>(id)];
}

const Tape::Node& Tape::cnode(VarId id) const {
  check(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(), "Tape: invalid var id");
  return nodes_[static_cast<std::size_t>(id)];
}

VarId Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> bwd) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = recording_ && requires_grad;
  if (recording_ && n.requires_grad) n.bwd = std::move(bwd);
  nodes_.push_back(std::move(n));
  return static_cast<VarId>(nodes_.size() - 1);
}

VarId Tape::leaf_param(Tensor& origin) {
  check_finite(origin, "leaf_param");
  VarId id = push(origin, true, nullptr);
  nodes_.back().origin = &origin;
  origin_map_[&origin] = id;
  return id;
}

VarId Tape::leaf_const(Tensor value) {
  check_finite(value, "leaf_const");
  return push(std::move(value), false, nullptr);
}

VarId Tape::leaf_input(Tensor value, bool requires_grad) {
  check_finite(value, "leaf_input");
  return push(std::move(value), requires_grad, nullptr);
}

const std::vector<float>& Tape::grad(VarId id) const {
  const Node& n = cnode(id);
  check(!n.grad.empty(), "Tape: gradient not available (run backward first)");
  return n.grad;
}

const std::vector<float>* Tape::grad_for(const Tensor& origin) const {
  auto it = origin_map_.find(&origin);
  if (it == origin_map_.end()) return nullptr;
  const Node& n = cnode(it->second);
  return n.grad.empty() ? nullptr : &n.grad;
}

std::vector<float>& Tape::grad_buf(VarId id) {
  Node& n = node(id);
  if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(n.value.numel()), 0.0f);
  return n.grad;
}

void Tape::backward(VarId out) {
  check(recording_, "Tape: backward on a non-recording tape");
  check(!consumed_, "Tape: backward already consumed this tape");
  const Node& on = cnode(out);
  check(on.value.numel() == 1,
        "Tape: backward requires a scalar output, got shape " + on.value.shape.str());
  consumed_ = true;
  grad_buf(out)[0] = 1.0f;
  for (VarId id = out; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.bwd && !n.grad.empty()) {
      n.bwd(*this);
    }
  }
  // Parameters never reached by the loss still report a (zero) gradient.
  for (Node& n : nodes_) {
    if (n.requires_grad && n.grad.empty()) {
      n.grad.assign(static_cast<std::size_t>(n.value.numel()), 0.0f);
    }
  }
}

// ---- convolution -----------------------------------------------------------

VarId Tape::conv2d(VarId x, VarId w, VarId b, const ConvSpec& spec) {
  const Tensor* bias = (b == kNoVar) ? nullptr : &val(b);
  Tensor y = ops::conv2d(val(x), val(w), bias, spec);
  bool ng = needs(x) || needs(w) || (b != kNoVar && needs(b));
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, w, b, spec, out](Tape& t) {
    const std::vector<float>& gy = t.node(out).grad;
    Shape ys = t.val(out).shape;
    std::vector<float>* gx = t.needs(x) ? &t.grad_buf(x) : nullptr;
    std::vector<float>* gw = t.needs(w) ? &t.grad_buf(w) : nullptr;
    std::vector<float>* gb = (b != kNoVar && t.needs(b)) ? &t.grad_buf(b) : nullptr;
    ops::conv2d_backward(t.val(x), t.val(w), spec, gy, ys, gx, gw, gb);
  });
}

VarId Tape::depthwise_conv3x3(VarId x, VarId w, VarId b, int stride) {
  const Tensor* bias = (b == kNoVar) ? nullptr : &val(b);
  Tensor y = ops::depthwise_conv3x3(val(x), val(w), bias, stride);
  int c = val(x).shape.c;
  ConvSpec spec{c, c, 3, stride, c, b != kNoVar};
  bool ng = needs(x) || needs(w) || (b != kNoVar && needs(b));
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, w, b, spec, out](Tape& t) {
    const std::vector<float>& gy = t.node(out).grad;
    Shape ys = t.val(out).shape;
    std::vector<float>* gx = t.needs(x) ? &t.grad_buf(x) : nullptr;
    std::vector<float>* gw = t.needs(w) ? &t.grad_buf(w) : nullptr;
    std::vector<float>* gb = (b != kNoVar && t.needs(b)) ? &t.grad_buf(b) : nullptr;
    ops::conv2d_backward(t.val(x), t.val(w), spec, gy, ys, gx, gw, gb);
  });
}

// ---- channel rearrangement -------------------------------------------------

VarId Tape::channel_shuffle(VarId x, int groups) {
  Tensor y = ops::channel_shuffle(val(x), groups);
  bool ng = needs(x);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, groups, out](Tape& t) {
    // shuffle is a channel permutation; its inverse is shuffle with c/groups.
    const Tensor& xv = t.val(x);
    const std::vector<float>& gy = t.node(out).grad;
    std::vector<float>& gx = t.grad_buf(x);
    int c = xv.shape.c;
    int cpg = c / groups;
    std::int64_t plane = static_cast<std::int64_t>(xv.shape.h) * xv.shape.w;
    for (int ni = 0; ni < xv.shape.n; ++ni) {
      for (int j = 0; j < c; ++j) {
        int src = (j % groups) * cpg + j / groups;
        const float* gp = gy.data() + (static_cast<std::int64_t>(ni) * c + j) * plane;
        float* gxp = gx.data() + (static_cast<std::int64_t>(ni) * c + src) * plane;
        for (std::int64_t i = 0; i < plane; ++i) gxp[i] += gp[i];
      }
    }
  });
}

std::vector<VarId> Tape::channel_split(VarId x, const std::vector<int>& sizes) {
  std::vector<Tensor> parts = ops::channel_split(val(x), sizes);
  bool ng = needs(x);
  std::vector<VarId> out_ids;
  int base = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    int my_base = base;
    base += sizes[i];
    VarId out = static_cast<VarId>(nodes_.size());
    out_ids.push_back(push(std::move(parts[i]), ng, [x, my_base, out](Tape& t) {
      const Tensor& yv = t.val(out);
      const std::vector<float>& gy = t.node(out).grad;
      std::vector<float>& gx = t.grad_buf(x);
      const Tensor& xv = t.val(x);
      std::int64_t plane = static_cast<std::int64_t>(xv.shape.h) * xv.shape.w;
      for (int ni = 0; ni < xv.shape.n; ++ni) {
        for (int ci = 0; ci < yv.shape.c; ++ci) {
          const float* gp = gy.data() + (static_cast<std::int64_t>(ni) * yv.shape.c + ci) * plane;
          float* gxp =
              gx.data() + (static_cast<std::int64_t>(ni) * xv.shape.c + my_base + ci) * plane;
          for (std::int64_t k = 0; k < plane; ++k) gxp[k] += gp[k];
        }
      }
    }));
  }
  return out_ids;
}

VarId Tape::concat(const std::vector<VarId>& xs) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(xs.size());
  bool ng = false;
  for (VarId id : xs) {
    ptrs.push_back(&val(id));
    ng = ng || needs(id);
  }
  Tensor y = ops::concat_channels(ptrs);
  VarId out = static_cast<VarId>(nodes_.size());
  std::vector<VarId> inputs = xs;
  return push(std::move(y), ng, [inputs, out](Tape& t) {
    const Tensor& yv = t.val(out);
    const std::vector<float>& gy = t.node(out).grad;
    std::int64_t plane = static_cast<std::int64_t>(yv.shape.h) * yv.shape.w;
    int base = 0;
    for (VarId id : inputs) {
      const Tensor& xv = t.val(id);
      if (t.needs(id)) {
        std::vector<float>& gx = t.grad_buf(id);
        for (int ni = 0; ni < xv.shape.n; ++ni) {
          for (int ci = 0; ci < xv.shape.c; ++ci) {
            const float* gp =
                gy.data() + (static_cast<std::int64_t>(ni) * yv.shape.c + base + ci) * plane;
            float* gxp = gx.data() + (static_cast<std::int64_t>(ni) * xv.shape.c + ci) * plane;
            for (std::int64_t k = 0; k < plane; ++k) gxp[k] += gp[k];
          }
        }
      }
      base += xv.shape.c;
    }
  });
}

// ---- normalization ---------------------------------------------------------

VarId Tape::batchnorm_eval(VarId x, VarId gamma, VarId beta, const Tensor& rmean,
                           const Tensor& rvar, float eps) {
  Tensor y = ops::batchnorm_eval(val(x), val(gamma), val(beta), rmean, rvar, eps);
  bool ng = needs(x) || needs(gamma) || needs(beta);
  VarId out = static_cast<VarId>(nodes_.size());
  Tensor rm = rmean, rv = rvar;
  return push(std::move(y), ng, [x, gamma, beta, rm, rv, eps, out](Tape& t) {
    const Tensor& xv = t.val(x);
    const std::vector<float>& gy = t.node(out).grad;
    std::int64_t plane = static_cast<std::int64_t>(xv.shape.h) * xv.shape.w;
    bool nx = t.needs(x), ngm = t.needs(gamma), nb = t.needs(beta);
    std::vector<float>* gx = nx ? &t.grad_buf(x) : nullptr;
    std::vector<float>* gg = ngm ? &t.grad_buf(gamma) : nullptr;
    std::vector<float>* gb = nb ? &t.grad_buf(beta) : nullptr;
    for (int ci = 0; ci < xv.shape.c; ++ci) {
      float inv = 1.0f / std::sqrt(rv.data[ci] + eps);
      float scale = t.val(gamma).data[ci] * inv;
      float mean = rm.data[ci];
      float acc_g = 0.0f, acc_b = 0.0f;
      for (int ni = 0; ni < xv.shape.n; ++ni) {
        const float* xp = xv.plane(ni, ci);
        const float* gp = gy.data() + (static_cast<std::int64_t>(ni) * xv.shape.c + ci) * plane;
        float* gxp = gx ? gx->data() + (static_cast<std::int64_t>(ni) * xv.shape.c + ci) * plane
                        : nullptr;
        for (std::int64_t i = 0; i < plane; ++i) {
          float g = gp[i];
          if (gxp) gxp[i] += g * scale;
          acc_g += g * (xp[i] - mean) * inv;
          acc_b += g;
        }
      }
      if (gg) (*gg)[ci] += acc_g;
      if (gb) (*gb)[ci] += acc_b;
    }
  });
}

VarId Tape::batchnorm_train(VarId x, VarId gamma, VarId beta, float eps,
                            ops::BnBatchStats* stats_out) {
  ops::BnBatchStats stats;
  Tensor y = ops::batchnorm_train(val(x), val(gamma), val(beta), eps, &stats);
  if (stats_out) *stats_out = stats;
  bool ng = needs(x) || needs(gamma) || needs(beta);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, gamma, beta, eps, stats, out](Tape& t) {
    const Tensor& xv = t.val(x);
    const std::vector<float>& gy = t.node(out).grad;
    std::int64_t plane = static_cast<std::int64_t>(xv.shape.h) * xv.shape.w;
    std::int64_t m = static_cast<std::int64_t>(xv.shape.n) * plane;
    float inv_m = 1.0f / static_cast<float>(m);
    bool nx = t.needs(x), ngm = t.needs(gamma), nb = t.needs(beta);
    std::vector<float>* gx = nx ? &t.grad_buf(x) : nullptr;
    std::vector<float>* gg = ngm ? &t.grad_buf(gamma) : nullptr;
    std::vector<float>* gb = nb ? &t.grad_buf(beta) : nullptr;
    for (int ci = 0; ci < xv.shape.c; ++ci) {
      float mean = stats.mean[ci];
      float inv = 1.0f / std::sqrt(stats.var[ci] + eps);
      float g_ch = t.val(gamma).data[ci];
      // reductions: sum(dxh), sum(dxh * xh), sum(gy), sum(gy * xh)
      float s_dxh = 0.0f, s_dxh_xh = 0.0f, s_g = 0.0f, s_g_xh = 0.0f;
      for (int ni = 0; ni < xv.shape.n; ++ni) {
        const float* xp = xv.plane(ni, ci);
        const float* gp = gy.data() + (static_cast<std::int64_t>(ni) * xv.shape.c + ci) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          float xh = (xp[i] - mean) * inv;
          float dxh = gp[i] * g_ch;
          s_dxh += dxh;
          s_dxh_xh += dxh * xh;
          s_g += gp[i];
          s_g_xh += gp[i] * xh;
        }
      }
      if (gg) (*gg)[ci] += s_g_xh;
      if (gb) (*gb)[ci] += s_g;
      if (gx) {
        float mean_dxh = s_dxh * inv_m;
        float mean_dxh_xh = s_dxh_xh * inv_m;
        for (int ni = 0; ni < xv.shape.n; ++ni) {
          const float* xp = xv.plane(ni, ci);
          const float* gp = gy.data() + (static_cast<std::int64_t>(ni) * xv.shape.c + ci) * plane;
          float* gxp = gx->data() + (static_cast<std::int64_t>(ni) * xv.shape.c + ci) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            float xh = (xp[i] - mean) * inv;
            float dxh = gp[i] * g_ch;
            gxp[i] += inv * (dxh - mean_dxh - xh * mean_dxh_xh);
          }
        }
      }
    }
  });
}

VarId Tape::layernorm_channels(VarId x, VarId gamma, VarId beta, float eps) {
  ops::LnStats stats;
  Tensor y = ops::layernorm_channels(val(x), val(gamma), val(beta), eps, &stats);
  bool ng = needs(x) || needs(gamma) || needs(beta);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, gamma, beta, stats, out](Tape& t) {
    const Tensor& xv = t.val(x);
    const std::vector<float>& gy = t.node(out).grad;
    int c = xv.shape.c;
    float inv_c = 1.0f / static_cast<float>(c);
    std::int64_t plane = static_cast<std::int64_t>(xv.shape.h) * xv.shape.w;
    bool nx = t.needs(x), ngm = t.needs(gamma), nb = t.needs(beta);
    std::vector<float>* gx = nx ? &t.grad_buf(x) : nullptr;
    std::vector<float>* gg = ngm ? &t.grad_buf(gamma) : nullptr;
    std::vector<float>* gb = nb ? &t.grad_buf(beta) : nullptr;
    const std::vector<float>& gmv = t.val(gamma).data;
    for (int ni = 0; ni < xv.shape.n; ++ni) {
      const float* xb = xv.plane(ni, 0);
      const float* gyb = gy.data() + static_cast<std::int64_t>(ni) * c * plane;
      float* gxb = gx ? gx->data() + static_cast<std::int64_t>(ni) * c * plane : nullptr;
      for (std::int64_t pos = 0; pos < plane; ++pos) {
        float mean = stats.mean[ni * plane + pos];
        float inv = stats.inv_std[ni * plane + pos];
        float s_dxh = 0.0f, s_dxh_xh = 0.0f;
        for (int ci = 0; ci < c; ++ci) {
          float xh = (xb[ci * plane + pos] - mean) * inv;
          float g = gyb[ci * plane + pos];
          float dxh = g * gmv[ci];
          s_dxh += dxh;
          s_dxh_xh += dxh * xh;
          if (gg) (*gg)[ci] += g * xh;
          if (gb) (*gb)[ci] += g;
        }
        if (gxb) {
          float m1 = s_dxh * inv_c;
          float m2 = s_dxh_xh * inv_c;
          for (int ci = 0; ci < c; ++ci) {
            float xh = (xb[ci * plane + pos] - mean) * inv;
            float dxh = gyb[ci * plane + pos] * gmv[ci];
            gxb[ci * plane + pos] += inv * (dxh - m1 - xh * m2);
          }
        }
      }
    }
  });
}

// ---- elementwise -----------------------------------------------------------

VarId Tape::unary_op(VarId x, const char* name, float param, float (*f)(float, float),
                     UnaryDf df) {
  const Tensor& xv = val(x);
  Tensor y(xv.shape);
  for (std::int64_t i = 0; i < xv.numel(); ++i) y.data[i] = f(xv.data[i], param);
  check_finite(y, name);
  bool ng = needs(x);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, param, df, out](Tape& t) {
    const Tensor& xv2 = t.val(x);
    const Tensor& yv = t.val(out);
    const std::vector<float>& gy = t.node(out).grad;
    std::vector<float>& gx = t.grad_buf(x);
    for (std::int64_t i = 0; i < xv2.numel(); ++i) {
      gx[i] += df(xv2.data[i], yv.data[i], param) * gy[i];
    }
  });
}

static float f_lrelu(float x, float s) { return x > 0.0f ? x : s * x; }
static float df_lrelu(float x, float, float s) { return x > 0.0f ? 1.0f : s; }
static float f_relu(float x, float) { return x > 0.0f ? x : 0.0f; }
static float df_relu(float x, float, float) { return x > 0.0f ? 1.0f : 0.0f; }
static float f_sigmoid(float x, float) { return ops::sigmoidf(x); }
static float df_sigmoid(float, float y, float) { return y * (1.0f - y); }
static float f_silu(float x, float) { return x * ops::sigmoidf(x); }
static float df_silu(float x, float, float) {
  float s = ops::sigmoidf(x);
  return s * (1.0f + x * (1.0f - s));
}
static float f_square(float x, float) { return x * x; }
static float df_square(float x, float, float) { return 2.0f * x; }
static float f_atan(float x, float) { return std::atan(x); }
static float df_atan(float x, float, float) { return 1.0f / (1.0f + x * x); }

VarId Tape::leaky_relu(VarId x, float slope) {
  return unary_op(x, "leaky_relu", slope, f_lrelu, df_lrelu);
}
VarId Tape::relu(VarId x) { return unary_op(x, "relu", 0.0f, f_relu, df_relu); }
VarId Tape::sigmoid(VarId x) { return unary_op(x, "sigmoid", 0.0f, f_sigmoid, df_sigmoid); }
VarId Tape::silu(VarId x) { return unary_op(x, "silu", 0.0f, f_silu, df_silu); }
VarId Tape::square(VarId x) { return unary_op(x, "square", 0.0f, f_square, df_square); }
VarId Tape::arctan(VarId x) { return unary_op(x, "arctan", 0.0f, f_atan, df_atan); }

VarId Tape::affine(VarId x, float a, float b) {
  const Tensor& xv = val(x);
  Tensor y(xv.shape);
  for (std::int64_t i = 0; i < xv.numel(); ++i) y.data[i] = a * xv.data[i] + b;
  check_finite(y, "affine");
  bool ng = needs(x);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, a, out](Tape& t) {
    const std::vector<float>& gy = t.node(out).grad;
    std::vector<float>& gx = t.grad_buf(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += a * gy[i];
  });
}

VarId Tape::binary_op(VarId x, VarId y, const char* name, float (*f)(float, float), BinaryDf df) {
  const Tensor& xv = val(x);
  const Tensor& yv = val(y);
  check(xv.shape == yv.shape, std::string(name) + ": shape mismatch " + xv.shape.str() + " vs " +
                                  yv.shape.str() + " (no broadcasting)");
  Tensor z(xv.shape);
  for (std::int64_t i = 0; i < xv.numel(); ++i) z.data[i] = f(xv.data[i], yv.data[i]);
  check_finite(z, name);
  bool ng = needs(x) || needs(y);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(z), ng, [x, y, df, out](Tape& t) {
    const Tensor& xv2 = t.val(x);
    const Tensor& yv2 = t.val(y);
    const std::vector<float>& gz = t.node(out).grad;
    bool nx = t.needs(x), ny = t.needs(y);
    std::vector<float>* gx = nx ? &t.grad_buf(x) : nullptr;
    std::vector<float>* gy = ny ? &t.grad_buf(y) : nullptr;
    for (std::int64_t i = 0; i < xv2.numel(); ++i) {
      float px = 0.0f, py = 0.0f;
      df(xv2.data[i], yv2.data[i], gz[i], &px, &py);
      if (gx) (*gx)[i] += px;
      if (gy) (*gy)[i] += py;
    }
  });
}

static float f_add(float x, float y) { return x + y; }
static void df_add(float, float, float g, float* gx, float* gy) {
  *gx = g;
  *gy = g;
}
static float f_sub(float x, float y) { return x - y; }
static void df_sub(float, float, float g, float* gx, float* gy) {
  *gx = g;
  *gy = -g;
}
static float f_mul(float x, float y) { return x * y; }
static void df_mul(float x, float y, float g, float* gx, float* gy) {
  *gx = g * y;
  *gy = g * x;
}
static float f_div(float x, float y) { return x / y; }
static void df_div(float x, float y, float g, float* gx, float* gy) {
  *gx = g / y;
  *gy = -g * x / (y * y);
}
static float f_min(float x, float y) { return x <= y ? x : y; }
static void df_min(float x, float y, float g, float* gx, float* gy) {
  if (x <= y) *gx = g; else *gy = g;
}
static float f_max(float x, float y) { return x >= y ? x : y; }
static void df_max(float x, float y, float g, float* gx, float* gy) {
  if (x >= y) *gx = g; else *gy = g;
}

VarId Tape::add(VarId x, VarId y) { return binary_op(x, y, "add", f_add, df_add); }
VarId Tape::sub(VarId x, VarId y) { return binary_op(x, y, "sub", f_sub, df_sub); }
VarId Tape::mul(VarId x, VarId y) { return binary_op(x, y, "mul", f_mul, df_mul); }
VarId Tape::div(VarId x, VarId y) { return binary_op(x, y, "div", f_div, df_div); }
VarId Tape::vmin(VarId x, VarId y) { return binary_op(x, y, "min", f_min, df_min); }
VarId Tape::vmax(VarId x, VarId y) { return binary_op(x, y, "max", f_max, df_max); }

// ---- spatial ----------------------------------------------------------------

VarId Tape::maxpool(VarId x, int kernel, int stride) {
  std::vector<std::int32_t> argmax;
  Tensor y = ops::maxpool(val(x), kernel, stride, recording_ ? &argmax : nullptr);
  Shape ys = y.shape;
  bool ng = needs(x);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, argmax, ys, out](Tape& t) {
    const Tensor& xv = t.val(x);
    const std::vector<float>& gy = t.node(out).grad;
    std::vector<float>& gx = t.grad_buf(x);
    std::int64_t oplane = static_cast<std::int64_t>(ys.h) * ys.w;
    std::int64_t iplane = static_cast<std::int64_t>(xv.shape.h) * xv.shape.w;
    for (int ni = 0; ni < ys.n; ++ni) {
      for (int ci = 0; ci < ys.c; ++ci) {
        std::int64_t ob = (static_cast<std::int64_t>(ni) * ys.c + ci) * oplane;
        std::int64_t ib = (static_cast<std::int64_t>(ni) * ys.c + ci) * iplane;
        for (std::int64_t i = 0; i < oplane; ++i) {
          gx[ib + argmax[ob + i]] += gy[ob + i];
        }
      }
    }
  });
}

VarId Tape::upsample_nearest(VarId x, int factor) {
  Tensor y = ops::upsample_nearest(val(x), factor);
  Shape ys = y.shape;
  bool ng = needs(x);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, factor, ys, out](Tape& t) {
    const Tensor& xv = t.val(x);
    const std::vector<float>& gy = t.node(out).grad;
    std::vector<float>& gx = t.grad_buf(x);
    for (int ni = 0; ni < ys.n; ++ni) {
      for (int ci = 0; ci < ys.c; ++ci) {
        const float* gp = gy.data() + (static_cast<std::int64_t>(ni) * ys.c + ci) * ys.h * ys.w;
        float* gxp = gx.data() +
                     (static_cast<std::int64_t>(ni) * xv.shape.c + ci) * xv.shape.h * xv.shape.w;
        for (int oy = 0; oy < ys.h; ++oy) {
          for (int ox = 0; ox < ys.w; ++ox) {
            gxp[static_cast<std::int64_t>(oy / factor) * xv.shape.w + ox / factor] +=
                gp[static_cast<std::int64_t>(oy) * ys.w + ox];
          }
        }
      }
    }
  });
}

VarId Tape::softmax_lastdim(VarId x) {
  Tensor y = ops::softmax_lastdim(val(x));
  bool ng = needs(x);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, out](Tape& t) {
    const Tensor& yv = t.val(out);
    const std::vector<float>& gy = t.node(out).grad;
    std::vector<float>& gx = t.grad_buf(x);
    int w = yv.shape.w;
    std::int64_t rows = yv.numel() / w;
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* yr = yv.data.data() + r * w;
      const float* gr = gy.data() + r * w;
      float dot = 0.0f;
      for (int i = 0; i < w; ++i) dot += gr[i] * yr[i];
      float* gxr = gx.data() + r * w;
      for (int i = 0; i < w; ++i) gxr[i] += yr[i] * (gr[i] - dot);
    }
  });
}

// ---- attention ---------------------------------------------------------------

VarId Tape::mhsa(VarId q, VarId k, VarId v, int heads) {
  const Tensor& qv = val(q);
  const Tensor& kv = val(k);
  const Tensor& vv = val(v);
  check(qv.shape == kv.shape && qv.shape == vv.shape, "mhsa: q/k/v shapes must match");
  check(heads >= 1 && qv.shape.c % heads == 0,
        "mhsa: channels " + std::to_string(qv.shape.c) + " not divisible by heads " +
            std::to_string(heads));
  int d = qv.shape.c / heads;
  int tokens = qv.shape.h * qv.shape.w;
  float scale = 1.0f / std::sqrt(static_cast<float>(d));
  std::int64_t t2 = static_cast<std::int64_t>(tokens) * tokens;

  Tensor y(qv.shape);
  // probs saved per (n, head) when recording
  std::vector<float> probs;
  if (recording_) probs.assign(static_cast<std::size_t>(qv.shape.n) * heads * t2, 0.0f);
  std::vector<float> srow(static_cast<std::size_t>(t2));
  for (int ni = 0; ni < qv.shape.n; ++ni) {
    for (int a = 0; a < heads; ++a) {
      std::fill(srow.begin(), srow.end(), 0.0f);
      for (int dd = 0; dd < d; ++dd) {
        const float* qp = qv.plane(ni, a * d + dd);
        const float* kp = kv.plane(ni, a * d + dd);
        for (int ti = 0; ti < tokens; ++ti) {
          float qs = qp[ti] * scale;
          float* row = srow.data() + static_cast<std::int64_t>(ti) * tokens;
          for (int u = 0; u < tokens; ++u) row[u] += qs * kp[u];
        }
      }
      // softmax rows in place
      for (int ti = 0; ti < tokens; ++ti) {
        float* row = srow.data() + static_cast<std::int64_t>(ti) * tokens;
        float m = row[0];
        for (int u = 1; u < tokens; ++u) m = std::max(m, row[u]);
        float sum = 0.0f;
        for (int u = 0; u < tokens; ++u) {
          row[u] = std::exp(row[u] - m);
          sum += row[u];
        }
        float inv = 1.0f / sum;
        for (int u = 0; u < tokens; ++u) row[u] *= inv;
      }
      for (int dd = 0; dd < d; ++dd) {
        const float* vp = vv.plane(ni, a * d + dd);
        float* yp = y.plane(ni, a * d + dd);
        for (int ti = 0; ti < tokens; ++ti) {
          const float* row = srow.data() + static_cast<std::int64_t>(ti) * tokens;
          float acc = 0.0f;
          for (int u = 0; u < tokens; ++u) acc += row[u] * vp[u];
          yp[ti] = acc;
        }
      }
      if (recording_) {
        std::copy(srow.begin(), srow.end(),
                  probs.begin() + (static_cast<std::int64_t>(ni) * heads + a) * t2);
      }
    }
  }
  check_finite(y, "mhsa");
  bool ng = needs(q) || needs(k) || needs(v);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [q, k, v, heads, d, tokens, scale, t2, probs, out](Tape& t) {
    const Tensor& qv2 = t.val(q);
    const Tensor& kv2 = t.val(k);
    const Tensor& vv2 = t.val(v);
    const std::vector<float>& gy = t.node(out).grad;
    std::vector<float>& gq = t.grad_buf(q);
    std::vector<float>& gk = t.grad_buf(k);
    std::vector<float>& gv = t.grad_buf(v);
    Shape s = qv2.shape;
    std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
    std::vector<float> dp(static_cast<std::size_t>(t2));
    for (int ni = 0; ni < s.n; ++ni) {
      for (int a = 0; a < heads; ++a) {
        const float* P = probs.data() + (static_cast<std::int64_t>(ni) * heads + a) * t2;
        std::fill(dp.begin(), dp.end(), 0.0f);
        // dP[t,u] = sum_dd gy[dd,t] * v[dd,u]; dV[dd,u] += sum_t P[t,u] gy[dd,t]
        for (int dd = 0; dd < d; ++dd) {
          std::int64_t ch = (static_cast<std::int64_t>(ni) * s.c + a * d + dd) * plane;
          const float* gyp = gy.data() + ch;
          const float* vp = vv2.data.data() + ch;
          float* gvp = gv.data() + ch;
          for (int ti = 0; ti < tokens; ++ti) {
            float g = gyp[ti];
            const float* prow = P + static_cast<std::int64_t>(ti) * tokens;
            float* dprow = dp.data() + static_cast<std::int64_t>(ti) * tokens;
            for (int u = 0; u < tokens; ++u) {
              dprow[u] += g * vp[u];
              gvp[u] += prow[u] * g;
            }
          }
        }
        // dS rows (reuse dp buffer): dS = P * (dP - rowdot(dP, P))
        for (int ti = 0; ti < tokens; ++ti) {
          const float* prow = P + static_cast<std::int64_t>(ti) * tokens;
          float* dprow = dp.data() + static_cast<std::int64_t>(ti) * tokens;
          float dot = 0.0f;
          for (int u = 0; u < tokens; ++u) dot += dprow[u] * prow[u];
          for (int u = 0; u < tokens; ++u) dprow[u] = prow[u] * (dprow[u] - dot);
        }
        // dQ[dd,t] = scale * sum_u dS[t,u] k[dd,u]; dK[dd,u] += scale * sum_t dS[t,u] q[dd,t]
        for (int dd = 0; dd < d; ++dd) {
          std::int64_t ch = (static_cast<std::int64_t>(ni) * s.c + a * d + dd) * plane;
          const float* kp = kv2.data.data() + ch;
          const float* qp = qv2.data.data() + ch;
          float* gqp = gq.data() + ch;
          float* gkp = gk.data() + ch;
          for (int ti = 0; ti < tokens; ++ti) {
            const float* dsrow = dp.data() + static_cast<std::int64_t>(ti) * tokens;
            float acc = 0.0f;
            float qs = qp[ti] * scale;
            for (int u = 0; u < tokens; ++u) {
              acc += dsrow[u] * kp[u];
              gkp[u] += qs * dsrow[u];
            }
            gqp[ti] += scale * acc;
          }
        }
      }
    }
  });
}

// ---- reductions and loss helpers ---------------------------------------------

VarId Tape::gather(VarId x, std::vector<std::int64_t> idx) {
  const Tensor& xv = val(x);
  for (std::int64_t i : idx) {
    check(i >= 0 && i < xv.numel(), "gather: index out of range");
  }
  Tensor y(1, static_cast<int>(idx.size()), 1, 1);
  for (std::size_t m = 0; m < idx.size(); ++m) y.data[m] = xv.data[idx[m]];
  bool ng = needs(x);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, idx, out](Tape& t) {
    const std::vector<float>& gy = t.node(out).grad;
    std::vector<float>& gx = t.grad_buf(x);
    for (std::size_t m = 0; m < idx.size(); ++m) gx[idx[m]] += gy[m];
  });
}

VarId Tape::sum(VarId x) {
  const Tensor& xv = val(x);
  float acc = 0.0f;
  for (float v : xv.data) acc += v;
  Tensor y(1, 1, 1, 1);
  y.data[0] = acc;
  check_finite(y, "sum");
  bool ng = needs(x);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, out](Tape& t) {
    float g = t.node(out).grad[0];
    std::vector<float>& gx = t.grad_buf(x);
    for (float& v : gx) v += g;
  });
}

VarId Tape::mean(VarId x) {
  const Tensor& xv = val(x);
  float inv = 1.0f / static_cast<float>(xv.numel());
  float acc = 0.0f;
  for (float v : xv.data) acc += v;
  Tensor y(1, 1, 1, 1);
  y.data[0] = acc * inv;
  check_finite(y, "mean");
  bool ng = needs(x);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, inv, out](Tape& t) {
    float g = t.node(out).grad[0] * inv;
    std::vector<float>& gx = t.grad_buf(x);
    for (float& v : gx) v += g;
  });
}

VarId Tape::bce_with_logits_mean(VarId x, Tensor targets) {
  const Tensor& xv = val(x);
  check(targets.shape == xv.shape, "bce: target shape mismatch");
  float inv = 1.0f / static_cast<float>(xv.numel());
  float acc = 0.0f;
  for (std::int64_t i = 0; i < xv.numel(); ++i) {
    float z = xv.data[i], tg = targets.data[i];
    acc += std::max(z, 0.0f) - z * tg + std::log1p(std::exp(-std::fabs(z)));
  }
  Tensor y(1, 1, 1, 1);
  y.data[0] = acc * inv;
  check_finite(y, "bce_with_logits_mean");
  bool ng = needs(x);
  VarId out = static_cast<VarId>(nodes_.size());
  return push(std::move(y), ng, [x, targets, inv, out](Tape& t) {
    float g = t.node(out).grad[0] * inv;
    const Tensor& xv2 = t.val(x);
    std::vector<float>& gx = t.grad_buf(x);
    for (std::int64_t i = 0; i < xv2.numel(); ++i) {
      gx[i] += g * (ops::sigmoidf(xv2.data[i]) - targets.data[i]);
    }
  });
}

}  // namespace dgs
