#include "dgs/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dgs::ops {

float sigmoidf(float x) {
  if (x >= 0.0f) {
    return 1.0f / (1.0f + std::exp(-x));
  }
  float e = std::exp(x);
  return e / (1.0f + e);
}

Shape conv_out_shape(Shape in, const ConvSpec& spec) {
  int p = spec.padding();
  int oh = (in.h + 2 * p - spec.kernel) / spec.stride + 1;
  int ow = (in.w + 2 * p - spec.kernel) / spec.stride + 1;
  return Shape{in.n, spec.out_channels, oh, ow};
}

static void check_conv_args(const Tensor& x, const Tensor& w, const Tensor* bias,
                            const ConvSpec& spec) {
  spec.validate();
  check(x.shape.c == spec.in_channels,
        "conv2d: input has " + std::to_string(x.shape.c) + " channels, spec expects " +
            std::to_string(spec.in_channels));
  Shape want_w{spec.out_channels, spec.in_channels / spec.groups, spec.kernel, spec.kernel};
  check(w.shape == want_w, "conv2d: weight shape " + w.shape.str() + " != " + want_w.str());
  if (spec.has_bias) {
    check(bias != nullptr && bias->shape == Shape{1, spec.out_channels, 1, 1},
          "conv2d: bias must be (1," + std::to_string(spec.out_channels) + ",1,1)");
  } else {
    check(bias == nullptr, "conv2d: spec has no bias but one was supplied");
  }
}

// One (input plane, output plane) tap accumulation: y += coeff * shifted(x).
// Shared by the grouped and the depthwise kernels so both accumulate in the
// same order (bias, then taps in (ic, kh, kw) order).
static inline void conv_tap(float* yp, const float* xp, float coeff, int h, int w, int oh, int ow,
                            int stride, int pad, int kh, int kw) {
  // valid output rows: 0 <= oy*stride - pad + kh < h
  int oy_lo = std::max(0, (pad - kh + stride - 1) / stride);
  int oy_hi = std::min(oh - 1, (h - 1 + pad - kh) / stride);
  int ox_lo = std::max(0, (pad - kw + stride - 1) / stride);
  int ox_hi = std::min(ow - 1, (w - 1 + pad - kw) / stride);
  if (oy_lo > oy_hi || ox_lo > ox_hi) return;
  int count = ox_hi - ox_lo + 1;
  for (int oy = oy_lo; oy <= oy_hi; ++oy) {
    int iy = oy * stride - pad + kh;
    const float* xrow = xp + static_cast<std::int64_t>(iy) * w + (ox_lo * stride - pad + kw);
    float* yrow = yp + static_cast<std::int64_t>(oy) * ow + ox_lo;
    if (stride == 1) {
      for (int t = 0; t < count; ++t) yrow[t] += coeff * xrow[t];
    } else {
      for (int t = 0; t < count; ++t) yrow[t] += coeff * xrow[t * stride];
    }
  }
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& spec) {
  check_conv_args(x, w, bias, spec);
  Shape ys = conv_out_shape(x.shape, spec);
  Tensor y(ys);
  int k = spec.kernel, p = spec.padding(), s = spec.stride;
  int icpg = spec.in_channels / spec.groups;
  int ocpg = spec.out_channels / spec.groups;
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int g = 0; g < spec.groups; ++g) {
      for (int ocg = 0; ocg < ocpg; ++ocg) {
        int oc = g * ocpg + ocg;
        float* yp = y.plane(ni, oc);
        if (spec.has_bias) {
          float b = bias->data[oc];
          std::fill(yp, yp + static_cast<std::int64_t>(ys.h) * ys.w, b);
        }
        for (int icg = 0; icg < icpg; ++icg) {
          int ic = g * icpg + icg;
          const float* xp = x.plane(ni, ic);
          const float* wp =
              w.data.data() + (static_cast<std::int64_t>(oc) * icpg + icg) * k * k;
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              conv_tap(yp, xp, wp[kh * k + kw], x.shape.h, x.shape.w, ys.h, ys.w, s, p, kh, kw);
            }
          }
        }
      }
    }
  }
  check_finite(y, "conv2d");
  return y;
}

Tensor depthwise_conv3x3(const Tensor& x, const Tensor& w, const Tensor* bias, int stride) {
  int c = x.shape.c;
  ConvSpec spec{c, c, 3, stride, c, bias != nullptr};
  spec.validate();
  check(w.shape == Shape{c, 1, 3, 3}, "depthwise_conv: weight shape must be (c,1,3,3)");
  if (bias) {
    check(bias->shape == Shape{1, c, 1, 1}, "depthwise_conv: bias must be (1,c,1,1)");
  }
  Shape ys = conv_out_shape(x.shape, spec);
  Tensor y(ys);
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      float* yp = y.plane(ni, ci);
      if (bias) {
        std::fill(yp, yp + static_cast<std::int64_t>(ys.h) * ys.w, bias->data[ci]);
      }
      const float* xp = x.plane(ni, ci);
      const float* wp = w.data.data() + static_cast<std::int64_t>(ci) * 9;
      for (int kh = 0; kh < 3; ++kh) {
        for (int kw = 0; kw < 3; ++kw) {
          conv_tap(yp, xp, wp[kh * 3 + kw], x.shape.h, x.shape.w, ys.h, ys.w, stride, 1, kh, kw);
        }
      }
    }
  }
  check_finite(y, "depthwise_conv");
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& w, const ConvSpec& spec,
                     const std::vector<float>& gy, Shape ys,
                     std::vector<float>* gx, std::vector<float>* gw, std::vector<float>* gb) {
  int k = spec.kernel, p = spec.padding(), s = spec.stride;
  int icpg = spec.in_channels / spec.groups;
  int ocpg = spec.out_channels / spec.groups;
  std::int64_t plane = static_cast<std::int64_t>(ys.h) * ys.w;
  if (gb) {
    for (int ni = 0; ni < ys.n; ++ni) {
      for (int oc = 0; oc < ys.c; ++oc) {
        const float* gp = gy.data() + (static_cast<std::int64_t>(ni) * ys.c + oc) * plane;
        float acc = 0.0f;
        for (std::int64_t i = 0; i < plane; ++i) acc += gp[i];
        (*gb)[oc] += acc;
      }
    }
  }
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int g = 0; g < spec.groups; ++g) {
      for (int ocg = 0; ocg < ocpg; ++ocg) {
        int oc = g * ocpg + ocg;
        const float* gp = gy.data() + (static_cast<std::int64_t>(ni) * ys.c + oc) * plane;
        for (int icg = 0; icg < icpg; ++icg) {
          int ic = g * icpg + icg;
          const float* xp = x.plane(ni, ic);
          float* gxp = gx ? gx->data() + (static_cast<std::int64_t>(ni) * x.shape.c + ic) *
                                             x.shape.h * x.shape.w
                          : nullptr;
          std::int64_t wbase = (static_cast<std::int64_t>(oc) * icpg + icg) * k * k;
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              int oy_lo = std::max(0, (p - kh + s - 1) / s);
              int oy_hi = std::min(ys.h - 1, (x.shape.h - 1 + p - kh) / s);
              int ox_lo = std::max(0, (p - kw + s - 1) / s);
              int ox_hi = std::min(ys.w - 1, (x.shape.w - 1 + p - kw) / s);
              if (oy_lo > oy_hi || ox_lo > ox_hi) continue;
              float coeff = w.data[wbase + kh * k + kw];
              float wacc = 0.0f;
              for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                int iy = oy * s - p + kh;
                const float* grow = gp + static_cast<std::int64_t>(oy) * ys.w + ox_lo;
                const float* xrow =
                    xp + static_cast<std::int64_t>(iy) * x.shape.w + (ox_lo * s - p + kw);
                int count = ox_hi - ox_lo + 1;
                if (gxp) {
                  float* gxrow =
                      gxp + static_cast<std::int64_t>(iy) * x.shape.w + (ox_lo * s - p + kw);
                  if (s == 1) {
                    for (int t = 0; t < count; ++t) gxrow[t] += coeff * grow[t];
                  } else {
                    for (int t = 0; t < count; ++t) gxrow[t * s] += coeff * grow[t];
                  }
                }
                if (gw) {
                  if (s == 1) {
                    for (int t = 0; t < count; ++t) wacc += grow[t] * xrow[t];
                  } else {
                    for (int t = 0; t < count; ++t) wacc += grow[t] * xrow[t * s];
                  }
                }
              }
              if (gw) (*gw)[wbase + kh * k + kw] += wacc;
            }
          }
        }
      }
    }
  }
}

Tensor channel_shuffle(const Tensor& x, int groups) {
  check(groups >= 1, "channel_shuffle: groups must be >= 1");
  check(x.shape.c % groups == 0, "channel_shuffle: " + std::to_string(x.shape.c) +
                                     " channels not divisible by " + std::to_string(groups));
  Tensor y(x.shape);
  int cpg = x.shape.c / groups;
  std::int64_t plane = static_cast<std::int64_t>(x.shape.h) * x.shape.w;
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int j = 0; j < x.shape.c; ++j) {
      int src = (j % groups) * cpg + j / groups;
      std::copy_n(x.plane(ni, src), plane, y.plane(ni, j));
    }
  }
  return y;
}

std::vector<Tensor> channel_split(const Tensor& x, const std::vector<int>& sizes) {
  int total = 0;
  for (int s : sizes) {
    check(s > 0, "channel_split: sizes must be positive");
    total += s;
  }
  check(total == x.shape.c, "channel_split: sizes sum to " + std::to_string(total) + ", input has " +
                                std::to_string(x.shape.c) + " channels");
  std::vector<Tensor> out;
  out.reserve(sizes.size());
  std::int64_t plane = static_cast<std::int64_t>(x.shape.h) * x.shape.w;
  int base = 0;
  for (int s : sizes) {
    Tensor part(x.shape.n, s, x.shape.h, x.shape.w);
    for (int ni = 0; ni < x.shape.n; ++ni) {
      for (int ci = 0; ci < s; ++ci) {
        std::copy_n(x.plane(ni, base + ci), plane, part.plane(ni, ci));
      }
    }
    out.push_back(std::move(part));
    base += s;
  }
  return out;
}

Tensor concat_channels(const std::vector<const Tensor*>& xs) {
  check(!xs.empty(), "concat: empty input list");
  Shape s0 = xs[0]->shape;
  int c = 0;
  for (const Tensor* t : xs) {
    check(t->shape.n == s0.n && t->shape.h == s0.h && t->shape.w == s0.w,
          "concat: mismatched non-channel dims " + t->shape.str() + " vs " + s0.str());
    c += t->shape.c;
  }
  Tensor y(s0.n, c, s0.h, s0.w);
  std::int64_t plane = static_cast<std::int64_t>(s0.h) * s0.w;
  for (int ni = 0; ni < s0.n; ++ni) {
    int base = 0;
    for (const Tensor* t : xs) {
      for (int ci = 0; ci < t->shape.c; ++ci) {
        std::copy_n(t->plane(ni, ci), plane, y.plane(ni, base + ci));
      }
      base += t->shape.c;
    }
  }
  return y;
}

static void check_affine_params(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                const char* op) {
  Shape want{1, x.shape.c, 1, 1};
  check(gamma.shape == want && beta.shape == want,
        std::string(op) + ": gamma/beta must be (1,c,1,1), c=" + std::to_string(x.shape.c));
}

Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const Tensor& rmean, const Tensor& rvar, float eps) {
  check_affine_params(x, gamma, beta, "batchnorm");
  check_affine_params(x, rmean, rvar, "batchnorm(running)");
  Tensor y(x.shape);
  std::int64_t plane = static_cast<std::int64_t>(x.shape.h) * x.shape.w;
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int ci = 0; ci < x.shape.c; ++ci) {
      float inv = 1.0f / std::sqrt(rvar.data[ci] + eps);
      float scale = gamma.data[ci] * inv;
      float shift = beta.data[ci] - rmean.data[ci] * scale;
      const float* xp = x.plane(ni, ci);
      float* yp = y.plane(ni, ci);
      for (std::int64_t i = 0; i < plane; ++i) yp[i] = xp[i] * scale + shift;
    }
  }
  check_finite(y, "batchnorm_eval");
  return y;
}

Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                       BnBatchStats* stats) {
  check_affine_params(x, gamma, beta, "batchnorm");
  int c = x.shape.c;
  std::int64_t plane = static_cast<std::int64_t>(x.shape.h) * x.shape.w;
  std::int64_t m = static_cast<std::int64_t>(x.shape.n) * plane;
  check(m > 0, "batchnorm_train: empty input");
  stats->mean.assign(c, 0.0f);
  stats->var.assign(c, 0.0f);
  for (int ci = 0; ci < c; ++ci) {
    float acc = 0.0f;
    for (int ni = 0; ni < x.shape.n; ++ni) {
      const float* xp = x.plane(ni, ci);
      for (std::int64_t i = 0; i < plane; ++i) acc += xp[i];
    }
    float mean = acc / static_cast<float>(m);
    float vacc = 0.0f;
    for (int ni = 0; ni < x.shape.n; ++ni) {
      const float* xp = x.plane(ni, ci);
      for (std::int64_t i = 0; i < plane; ++i) {
        float d = xp[i] - mean;
        vacc += d * d;
      }
    }
    stats->mean[ci] = mean;
    stats->var[ci] = vacc / static_cast<float>(m);
  }
  Tensor y(x.shape);
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      float inv = 1.0f / std::sqrt(stats->var[ci] + eps);
      float scale = gamma.data[ci] * inv;
      float shift = beta.data[ci] - stats->mean[ci] * scale;
      const float* xp = x.plane(ni, ci);
      float* yp = y.plane(ni, ci);
      for (std::int64_t i = 0; i < plane; ++i) yp[i] = xp[i] * scale + shift;
    }
  }
  check_finite(y, "batchnorm_train");
  return y;
}

Tensor layernorm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                          LnStats* stats) {
  check_affine_params(x, gamma, beta, "layernorm");
  int c = x.shape.c;
  std::int64_t plane = static_cast<std::int64_t>(x.shape.h) * x.shape.w;
  std::int64_t positions = static_cast<std::int64_t>(x.shape.n) * plane;
  if (stats) {
    stats->mean.assign(positions, 0.0f);
    stats->inv_std.assign(positions, 0.0f);
  }
  Tensor y(x.shape);
  for (int ni = 0; ni < x.shape.n; ++ni) {
    const float* xb = x.plane(ni, 0);
    float* yb = y.plane(ni, 0);
    for (std::int64_t pos = 0; pos < plane; ++pos) {
      float acc = 0.0f;
      for (int ci = 0; ci < c; ++ci) acc += xb[ci * plane + pos];
      float mean = acc / static_cast<float>(c);
      float vacc = 0.0f;
      for (int ci = 0; ci < c; ++ci) {
        float d = xb[ci * plane + pos] - mean;
        vacc += d * d;
      }
      float inv = 1.0f / std::sqrt(vacc / static_cast<float>(c) + eps);
      for (int ci = 0; ci < c; ++ci) {
        yb[ci * plane + pos] = (xb[ci * plane + pos] - mean) * inv * gamma.data[ci] + beta.data[ci];
      }
      if (stats) {
        stats->mean[ni * plane + pos] = mean;
        stats->inv_std[ni * plane + pos] = inv;
      }
    }
  }
  check_finite(y, "layernorm_channels");
  return y;
}

Tensor maxpool(const Tensor& x, int kernel, int stride, std::vector<std::int32_t>* argmax) {
  check(kernel >= 1 && stride >= 1, "maxpool: kernel and stride must be >= 1");
  int p = kernel / 2;
  int oh = (x.shape.h + 2 * p - kernel) / stride + 1;
  int ow = (x.shape.w + 2 * p - kernel) / stride + 1;
  check(oh > 0 && ow > 0, "maxpool: window larger than padded input");
  Tensor y(x.shape.n, x.shape.c, oh, ow);
  if (argmax) argmax->assign(static_cast<std::size_t>(y.numel()), -1);
  std::int64_t oplane = static_cast<std::int64_t>(oh) * ow;
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int ci = 0; ci < x.shape.c; ++ci) {
      const float* xp = x.plane(ni, ci);
      float* yp = y.plane(ni, ci);
      std::int64_t abase = (static_cast<std::int64_t>(ni) * x.shape.c + ci) * oplane;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          float best = -std::numeric_limits<float>::infinity();
          std::int32_t best_idx = -1;
          for (int kh = 0; kh < kernel; ++kh) {
            int iy = oy * stride - p + kh;
            if (iy < 0 || iy >= x.shape.h) continue;
            for (int kw = 0; kw < kernel; ++kw) {
              int ix = ox * stride - p + kw;
              if (ix < 0 || ix >= x.shape.w) continue;
              float v = xp[static_cast<std::int64_t>(iy) * x.shape.w + ix];
              if (v > best) {
                best = v;
                best_idx = static_cast<std::int32_t>(iy * x.shape.w + ix);
              }
            }
          }
          yp[static_cast<std::int64_t>(oy) * ow + ox] = best;
          if (argmax) (*argmax)[abase + oy * ow + ox] = best_idx;
        }
      }
    }
  }
  check_finite(y, "maxpool");
  return y;
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  check(factor >= 1, "upsample_nearest: factor must be >= 1");
  Tensor y(x.shape.n, x.shape.c, x.shape.h * factor, x.shape.w * factor);
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int ci = 0; ci < x.shape.c; ++ci) {
      const float* xp = x.plane(ni, ci);
      float* yp = y.plane(ni, ci);
      for (int oy = 0; oy < y.shape.h; ++oy) {
        const float* xrow = xp + static_cast<std::int64_t>(oy / factor) * x.shape.w;
        float* yrow = yp + static_cast<std::int64_t>(oy) * y.shape.w;
        for (int ox = 0; ox < y.shape.w; ++ox) yrow[ox] = xrow[ox / factor];
      }
    }
  }
  return y;
}

Tensor softmax_lastdim(const Tensor& x) {
  Tensor y(x.shape);
  std::int64_t rows = x.numel() / x.shape.w;
  int w = x.shape.w;
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* xr = x.data.data() + r * w;
    float* yr = y.data.data() + r * w;
    float m = xr[0];
    for (int i = 1; i < w; ++i) m = std::max(m, xr[i]);
    float sum = 0.0f;
    for (int i = 0; i < w; ++i) {
      yr[i] = std::exp(xr[i] - m);
      sum += yr[i];
    }
    float inv = 1.0f / sum;
    for (int i = 0; i < w; ++i) yr[i] *= inv;
  }
  check_finite(y, "softmax_lastdim");
  return y;
}

Tensor attention_probs(const Tensor& q, const Tensor& k, int heads) {
  check(q.shape == k.shape, "attention: q/k shape mismatch");
  check(heads >= 1 && q.shape.c % heads == 0,
        "attention: channels " + std::to_string(q.shape.c) + " not divisible by heads " +
            std::to_string(heads));
  int d = q.shape.c / heads;
  int tokens = q.shape.h * q.shape.w;
  float scale = 1.0f / std::sqrt(static_cast<float>(d));
  Tensor scores(q.shape.n, heads, tokens, tokens);
  for (int ni = 0; ni < q.shape.n; ++ni) {
    for (int a = 0; a < heads; ++a) {
      float* sp = scores.plane(ni, a);
      for (int dd = 0; dd < d; ++dd) {
        const float* qp = q.plane(ni, a * d + dd);
        const float* kp = k.plane(ni, a * d + dd);
        for (int t = 0; t < tokens; ++t) {
          float qv = qp[t] * scale;
          float* srow = sp + static_cast<std::int64_t>(t) * tokens;
          for (int u = 0; u < tokens; ++u) srow[u] += qv * kp[u];
        }
      }
    }
  }
  return softmax_lastdim(scores);
}

}  // namespace dgs::ops
