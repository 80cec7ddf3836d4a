#include "dgs/ref_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dgs::ref {

RTensor RTensor::from(const Tensor& t) {
  RTensor r(t.shape);
  for (std::size_t i = 0; i < t.data.size(); ++i) r.data[i] = static_cast<double>(t.data[i]);
  return r;
}

Tensor RTensor::to_f32() const {
  Tensor t(shape);
  for (std::size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<float>(data[i]);
  return t;
}

RTensor conv2d(const RTensor& x, const RTensor& w, const RTensor* bias, const ConvSpec& spec) {
  int k = spec.kernel, p = spec.padding(), s = spec.stride;
  int icpg = spec.in_channels / spec.groups;
  int ocpg = spec.out_channels / spec.groups;
  int oh = (x.shape.h + 2 * p - k) / s + 1;
  int ow = (x.shape.w + 2 * p - k) / s + 1;
  RTensor y(x.shape.n, spec.out_channels, oh, ow);
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int oc = 0; oc < spec.out_channels; ++oc) {
      int g = oc / ocpg;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias ? bias->data[static_cast<std::size_t>(oc)] : 0.0;
          for (int icg = 0; icg < icpg; ++icg) {
            int ic = g * icpg + icg;
            for (int kh = 0; kh < k; ++kh) {
              int iy = oy * s - p + kh;
              if (iy < 0 || iy >= x.shape.h) continue;
              for (int kw = 0; kw < k; ++kw) {
                int ix = ox * s - p + kw;
                if (ix < 0 || ix >= x.shape.w) continue;
                acc += x.at(ni, ic, iy, ix) *
                       w.data[((static_cast<std::int64_t>(oc) * icpg + icg) * k + kh) * k + kw];
              }
            }
          }
          y.at(ni, oc, oy, ox) = acc;
        }
      }
    }
  }
  return y;
}

RTensor channel_shuffle(const RTensor& x, int groups) {
  RTensor y(x.shape);
  int cpg = x.shape.c / groups;
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int j = 0; j < x.shape.c; ++j) {
      int src = (j % groups) * cpg + j / groups;
      for (int hi = 0; hi < x.shape.h; ++hi) {
        for (int wi = 0; wi < x.shape.w; ++wi) {
          y.at(ni, j, hi, wi) = x.at(ni, src, hi, wi);
        }
      }
    }
  }
  return y;
}

std::vector<RTensor> channel_split(const RTensor& x, const std::vector<int>& sizes) {
  std::vector<RTensor> out;
  int base = 0;
  for (int s : sizes) {
    RTensor part(x.shape.n, s, x.shape.h, x.shape.w);
    for (int ni = 0; ni < x.shape.n; ++ni) {
      for (int ci = 0; ci < s; ++ci) {
        for (int hi = 0; hi < x.shape.h; ++hi) {
          for (int wi = 0; wi < x.shape.w; ++wi) {
            part.at(ni, ci, hi, wi) = x.at(ni, base + ci, hi, wi);
          }
        }
      }
    }
    out.push_back(std::move(part));
    base += s;
  }
  return out;
}

RTensor concat(const std::vector<const RTensor*>& xs) {
  int c = 0;
  for (const RTensor* t : xs) c += t->shape.c;
  RTensor y(xs[0]->shape.n, c, xs[0]->shape.h, xs[0]->shape.w);
  int base = 0;
  for (const RTensor* t : xs) {
    for (int ni = 0; ni < t->shape.n; ++ni) {
      for (int ci = 0; ci < t->shape.c; ++ci) {
        for (int hi = 0; hi < t->shape.h; ++hi) {
          for (int wi = 0; wi < t->shape.w; ++wi) {
            y.at(ni, base + ci, hi, wi) = t->at(ni, ci, hi, wi);
          }
        }
      }
    }
    base += t->shape.c;
  }
  return y;
}

RTensor batchnorm_eval(const RTensor& x, const RTensor& gamma, const RTensor& beta,
                       const RTensor& rmean, const RTensor& rvar, double eps) {
  RTensor y(x.shape);
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int ci = 0; ci < x.shape.c; ++ci) {
      std::size_t cc = static_cast<std::size_t>(ci);
      double inv = 1.0 / std::sqrt(rvar.data[cc] + eps);
      for (int hi = 0; hi < x.shape.h; ++hi) {
        for (int wi = 0; wi < x.shape.w; ++wi) {
          y.at(ni, ci, hi, wi) =
              (x.at(ni, ci, hi, wi) - rmean.data[cc]) * inv * gamma.data[cc] + beta.data[cc];
        }
      }
    }
  }
  return y;
}

RTensor batchnorm_train(const RTensor& x, const RTensor& gamma, const RTensor& beta, double eps) {
  RTensor y(x.shape);
  double m = static_cast<double>(x.shape.n) * x.shape.h * x.shape.w;
  for (int ci = 0; ci < x.shape.c; ++ci) {
    double mean = 0.0;
    for (int ni = 0; ni < x.shape.n; ++ni) {
      for (int hi = 0; hi < x.shape.h; ++hi) {
        for (int wi = 0; wi < x.shape.w; ++wi) mean += x.at(ni, ci, hi, wi);
      }
    }
    mean /= m;
    double var = 0.0;
    for (int ni = 0; ni < x.shape.n; ++ni) {
      for (int hi = 0; hi < x.shape.h; ++hi) {
        for (int wi = 0; wi < x.shape.w; ++wi) {
          double d = x.at(ni, ci, hi, wi) - mean;
          var += d * d;
        }
      }
    }
    var /= m;
    double inv = 1.0 / std::sqrt(var + eps);
    std::size_t cc = static_cast<std::size_t>(ci);
    for (int ni = 0; ni < x.shape.n; ++ni) {
      for (int hi = 0; hi < x.shape.h; ++hi) {
        for (int wi = 0; wi < x.shape.w; ++wi) {
          y.at(ni, ci, hi, wi) = (x.at(ni, ci, hi, wi) - mean) * inv * gamma.data[cc] +
                                 beta.data[cc];
        }
      }
    }
  }
  return y;
}

RTensor layernorm_channels(const RTensor& x, const RTensor& gamma, const RTensor& beta,
                           double eps) {
  RTensor y(x.shape);
  int c = x.shape.c;
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int hi = 0; hi < x.shape.h; ++hi) {
      for (int wi = 0; wi < x.shape.w; ++wi) {
        double mean = 0.0;
        for (int ci = 0; ci < c; ++ci) mean += x.at(ni, ci, hi, wi);
        mean /= c;
        double var = 0.0;
        for (int ci = 0; ci < c; ++ci) {
          double d = x.at(ni, ci, hi, wi) - mean;
          var += d * d;
        }
        var /= c;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int ci = 0; ci < c; ++ci) {
          y.at(ni, ci, hi, wi) = (x.at(ni, ci, hi, wi) - mean) * inv *
                                     gamma.data[static_cast<std::size_t>(ci)] +
                                 beta.data[static_cast<std::size_t>(ci)];
        }
      }
    }
  }
  return y;
}

static RTensor map_unary(const RTensor& x, double (*f)(double)) {
  RTensor y(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = f(x.data[i]);
  return y;
}

RTensor leaky_relu(const RTensor& x, double slope) {
  RTensor y(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    y.data[i] = x.data[i] > 0.0 ? x.data[i] : slope * x.data[i];
  }
  return y;
}

RTensor sigmoid(const RTensor& x) {
  return map_unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

RTensor silu(const RTensor& x) {
  return map_unary(x, [](double v) { return v / (1.0 + std::exp(-v)); });
}

RTensor square(const RTensor& x) {
  return map_unary(x, [](double v) { return v * v; });
}

RTensor arctan(const RTensor& x) {
  return map_unary(x, [](double v) { return std::atan(v); });
}

RTensor affine(const RTensor& x, double a, double b) {
  RTensor y(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = a * x.data[i] + b;
  return y;
}

static RTensor zip(const RTensor& x, const RTensor& y, double (*f)(double, double)) {
  RTensor z(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) z.data[i] = f(x.data[i], y.data[i]);
  return z;
}

RTensor add(const RTensor& x, const RTensor& y) {
  return zip(x, y, [](double a, double b) { return a + b; });
}
RTensor sub(const RTensor& x, const RTensor& y) {
  return zip(x, y, [](double a, double b) { return a - b; });
}
RTensor mul(const RTensor& x, const RTensor& y) {
  return zip(x, y, [](double a, double b) { return a * b; });
}
RTensor divide(const RTensor& x, const RTensor& y) {
  return zip(x, y, [](double a, double b) { return a / b; });
}
RTensor vmin(const RTensor& x, const RTensor& y) {
  return zip(x, y, [](double a, double b) { return a <= b ? a : b; });
}
RTensor vmax(const RTensor& x, const RTensor& y) {
  return zip(x, y, [](double a, double b) { return a >= b ? a : b; });
}

RTensor maxpool(const RTensor& x, int kernel, int stride) {
  int p = kernel / 2;
  int oh = (x.shape.h + 2 * p - kernel) / stride + 1;
  int ow = (x.shape.w + 2 * p - kernel) / stride + 1;
  RTensor y(x.shape.n, x.shape.c, oh, ow);
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int ci = 0; ci < x.shape.c; ++ci) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          for (int kh = 0; kh < kernel; ++kh) {
            int iy = oy * stride - p + kh;
            if (iy < 0 || iy >= x.shape.h) continue;
            for (int kw = 0; kw < kernel; ++kw) {
              int ix = ox * stride - p + kw;
              if (ix < 0 || ix >= x.shape.w) continue;
              best = std::max(best, x.at(ni, ci, iy, ix));
            }
          }
          y.at(ni, ci, oy, ox) = best;
        }
      }
    }
  }
  return y;
}

RTensor upsample_nearest(const RTensor& x, int factor) {
  RTensor y(x.shape.n, x.shape.c, x.shape.h * factor, x.shape.w * factor);
  for (int ni = 0; ni < x.shape.n; ++ni) {
    for (int ci = 0; ci < x.shape.c; ++ci) {
      for (int oy = 0; oy < y.shape.h; ++oy) {
        for (int ox = 0; ox < y.shape.w; ++ox) {
          y.at(ni, ci, oy, ox) = x.at(ni, ci, oy / factor, ox / factor);
        }
      }
    }
  }
  return y;
}

RTensor softmax_lastdim(const RTensor& x) {
  RTensor y(x.shape);
  int w = x.shape.w;
  std::int64_t rows = x.numel() / w;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * w;
    double* yr = y.data.data() + r * w;
    double m = xr[0];
    for (int i = 1; i < w; ++i) m = std::max(m, xr[i]);
    double sum_e = 0.0;
    for (int i = 0; i < w; ++i) {
      yr[i] = std::exp(xr[i] - m);
      sum_e += yr[i];
    }
    for (int i = 0; i < w; ++i) yr[i] /= sum_e;
  }
  return y;
}

RTensor mhsa(const RTensor& q, const RTensor& k, const RTensor& v, int heads) {
  int d = q.shape.c / heads;
  int tokens = q.shape.h * q.shape.w;
  double scale = 1.0 / std::sqrt(static_cast<double>(d));
  RTensor y(q.shape);
  std::int64_t plane = static_cast<std::int64_t>(q.shape.h) * q.shape.w;
  std::vector<double> row(static_cast<std::size_t>(tokens));
  for (int ni = 0; ni < q.shape.n; ++ni) {
    for (int a = 0; a < heads; ++a) {
      for (int ti = 0; ti < tokens; ++ti) {
        // scores for query ti against all keys
        double m = -std::numeric_limits<double>::infinity();
        for (int u = 0; u < tokens; ++u) {
          double s = 0.0;
          for (int dd = 0; dd < d; ++dd) {
            std::int64_t ch = (static_cast<std::int64_t>(ni) * q.shape.c + a * d + dd) * plane;
            s += q.data[ch + ti] * k.data[ch + u];
          }
          row[static_cast<std::size_t>(u)] = s * scale;
          m = std::max(m, row[static_cast<std::size_t>(u)]);
        }
        double z = 0.0;
        for (int u = 0; u < tokens; ++u) {
          row[static_cast<std::size_t>(u)] = std::exp(row[static_cast<std::size_t>(u)] - m);
          z += row[static_cast<std::size_t>(u)];
        }
        for (int dd = 0; dd < d; ++dd) {
          std::int64_t ch = (static_cast<std::int64_t>(ni) * q.shape.c + a * d + dd) * plane;
          double acc = 0.0;
          for (int u = 0; u < tokens; ++u) acc += row[static_cast<std::size_t>(u)] * v.data[ch + u];
          y.data[ch + ti] = acc / z;
        }
      }
    }
  }
  return y;
}

RTensor gather(const RTensor& x, const std::vector<std::int64_t>& idx) {
  RTensor y(1, static_cast<int>(idx.size()), 1, 1);
  for (std::size_t m = 0; m < idx.size(); ++m) y.data[m] = x.data[static_cast<std::size_t>(idx[m])];
  return y;
}

double sum(const RTensor& x) {
  double acc = 0.0;
  for (double v : x.data) acc += v;
  return acc;
}

double mean(const RTensor& x) {
  return sum(x) / static_cast<double>(x.numel());
}

double bce_with_logits_mean(const RTensor& x, const RTensor& targets) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    double z = x.data[i], t = targets.data[i];
    acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
  }
  return acc / static_cast<double>(x.numel());
}

RTensor posenc(int c, int h, int w) {
  RTensor pe(1, c, h, w);
  int half = c / 2;
  for (int ci = 0; ci < c; ++ci) {
    bool row_half = ci < half;
    int i = row_half ? ci : ci - half;
    double omega = std::pow(10000.0, -2.0 * (i / 2) / static_cast<double>(half));
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double pos = row_half ? y : x;
        // match the engine: the value is computed in double then rounded to
        // float32 before entering the graph
        double v = (i % 2 == 0) ? std::sin(pos * omega) : std::cos(pos * omega);
        pe.at(0, ci, y, x) = static_cast<double>(static_cast<float>(v));
      }
    }
  }
  return pe;
}

}  // namespace dgs::ref
