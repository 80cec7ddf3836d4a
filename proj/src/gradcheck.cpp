#include "dgs/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dgs/rng.hpp"

namespace dgs::refcheck {

double fd_max_err(const ref::SlotList& slots,
                  const std::function<std::vector<double>()>& ref_losses,
                  const std::vector<std::map<std::string, std::vector<float>>>& engine_grads,
                  double h) {
  double worst = 0.0;
  for (const auto& [name, buf] : slots) {
    for (std::size_t k = 0; k < engine_grads.size(); ++k) {
      auto it = engine_grads[k].find(name);
      check(it != engine_grads[k].end(), "fd_max_err: engine grads missing slot " + name);
      check(it->second.size() == buf->size(), "fd_max_err: grad size mismatch for " + name);
    }
    for (std::size_t i = 0; i < buf->size(); ++i) {
      double orig = (*buf)[i];
      (*buf)[i] = orig + h;
      std::vector<double> lp = ref_losses();
      (*buf)[i] = orig - h;
      std::vector<double> lm = ref_losses();
      (*buf)[i] = orig;
      for (std::size_t k = 0; k < engine_grads.size(); ++k) {
        double fd = (lp[k] - lm[k]) / (2.0 * h);
        double g = static_cast<double>(engine_grads[k].at(name)[i]);
        double err = std::fabs(g - fd) / std::max({1.0, std::fabs(g), std::fabs(fd)});
        worst = std::max(worst, err);
      }
    }
  }
  return worst;
}

namespace {

Tensor rnd(Rng& rng, Shape s, float lo, float hi) {
  Tensor t(s);
  for (float& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// random sign, |v| in [min_abs, max_abs]; keeps relu-family inputs off kinks
Tensor rnd_offset(Rng& rng, Shape s, float min_abs, float max_abs) {
  Tensor t(s);
  for (float& v : t.data) {
    float m = rng.uniform(min_abs, max_abs);
    v = rng.uniform01() < 0.5 ? -m : m;
  }
  return t;
}

// per-plane distinct values, gaps >> 2h, for pooling argmax stability
Tensor rnd_distinct(Rng& rng, Shape s) {
  Tensor t(s);
  std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  std::vector<float> vals(static_cast<std::size_t>(plane));
  for (int ni = 0; ni < s.n; ++ni) {
    for (int ci = 0; ci < s.c; ++ci) {
      for (std::int64_t i = 0; i < plane; ++i) {
        vals[static_cast<std::size_t>(i)] = 0.05f * static_cast<float>(i);
      }
      rng.shuffle(vals);
      float off = rng.uniform(-1.0f, 1.0f);
      float* p = t.plane(ni, ci);
      for (std::int64_t i = 0; i < plane; ++i) p[i] = vals[static_cast<std::size_t>(i)] + off;
    }
  }
  return t;
}

struct OpCheck {
  std::string name;
  std::vector<std::pair<std::string, Tensor>> inputs;
  std::function<VarId(Tape&, const std::vector<VarId>&)> engine;
  std::function<ref::RTensor(const std::vector<ref::RTensor>&)> ref_out;
};

CheckResult run_op_check(OpCheck oc, Rng& rng, double tol) {
  Tape t(true);
  std::vector<VarId> ids;
  for (auto& [n, ten] : oc.inputs) ids.push_back(t.leaf_input(ten, true));
  VarId out = oc.engine(t, ids);
  Tensor weights = rnd(rng, t.val(out).shape, 0.5f, 1.5f);
  ref::RTensor rweights = ref::RTensor::from(weights);
  VarId loss = t.sum(t.mul(out, t.leaf_const(weights)));
  t.backward(loss);

  std::map<std::string, std::vector<float>> grads;
  for (std::size_t i = 0; i < ids.size(); ++i) grads[oc.inputs[i].first] = t.grad(ids[i]);

  std::vector<ref::RTensor> rt;
  rt.reserve(oc.inputs.size());
  for (auto& [n, ten] : oc.inputs) rt.push_back(ref::RTensor::from(ten));
  ref::SlotList slots;
  for (std::size_t i = 0; i < rt.size(); ++i) slots.emplace_back(oc.inputs[i].first, &rt[i].data);

  auto ref_losses = [&]() {
    ref::RTensor y = oc.ref_out(rt);
    return std::vector<double>{ref::sum(ref::mul(y, rweights))};
  };
  CheckResult res;
  res.name = oc.name;
  res.tol = tol;
  res.max_err = fd_max_err(slots, ref_losses, {grads}, 1e-4);
  return res;
}

// Set every BatchNorm shift to ~3 so downstream LeakyReLU inputs sit far from
// the kink; finite differences would otherwise straddle it.
template <class M>
void push_bn_betas(M& mod, Rng& rng) {
  mod.visit("m", [&](const std::string& name, Tensor& t, bool) {
    if (name.size() > 8 && name.substr(name.size() - 8) == ".bn.beta") {
      for (float& v : t.data) v = 3.0f + rng.uniform(-0.2f, 0.2f);
    }
  });
}

void model_push_bn_betas(Model& m, Rng& rng) {
  m.visit_params([&](const std::string& name, Tensor& t, bool) {
    if (name.size() > 8 && name.substr(name.size() - 8) == ".bn.beta") {
      for (float& v : t.data) v = 3.0f + rng.uniform(-0.2f, 0.2f);
    }
  });
}

template <class EngineFwd, class RefFwd, class Collect>
CheckResult run_block_check(const std::string& name, Tensor input, EngineFwd engine_fwd,
                            RefFwd ref_fwd, Collect collect_params,
                            std::map<std::string, Tensor*> engine_params, Rng& rng, double tol) {
  Tape t(true);
  VarId x = t.leaf_input(input, true);
  VarId out = engine_fwd(t, x);
  Tensor weights = rnd(rng, t.val(out).shape, 0.5f, 1.5f);
  ref::RTensor rweights = ref::RTensor::from(weights);
  VarId loss = t.sum(t.mul(out, t.leaf_const(weights)));
  t.backward(loss);

  std::map<std::string, std::vector<float>> grads;
  grads["x"] = t.grad(x);
  for (auto& [n, ten] : engine_params) {
    const std::vector<float>* g = t.grad_for(*ten);
    check(g != nullptr, "block check: missing grad for " + n);
    grads[n] = *g;
  }

  ref::RTensor rx = ref::RTensor::from(input);
  ref::SlotList slots;
  slots.emplace_back("x", &rx.data);
  collect_params(slots);

  auto ref_losses = [&]() {
    ref::RTensor y = ref_fwd(rx);
    return std::vector<double>{ref::sum(ref::mul(y, rweights))};
  };
  CheckResult res;
  res.name = name;
  res.tol = tol;
  res.max_err = fd_max_err(slots, ref_losses, {grads}, 1e-4);
  return res;
}

std::map<std::string, Tensor*> trainable_map_of(const std::function<void(const ParamVisitor&)>& v) {
  std::map<std::string, Tensor*> out;
  v([&](const std::string& name, Tensor& t, bool trainable) {
    if (trainable) out[name] = &t;
  });
  return out;
}

}  // namespace

std::vector<CheckResult> op_suite(std::uint64_t base_seed, int n_seeds) {
  std::vector<CheckResult> results;
  for (int sd = 0; sd < n_seeds; ++sd) {
    Rng rng(base_seed + static_cast<std::uint64_t>(sd));
    std::string tag = "@" + std::to_string(sd);
    auto push = [&](OpCheck oc) { results.push_back(run_op_check(std::move(oc), rng, 1e-4)); };

    {
      ConvSpec spec{4, 6, 3, 1, 2, true};
      push({"conv2d_k3_g2_s1" + tag,
            {{"x", rnd(rng, {1, 4, 6, 6}, -1, 1)},
             {"w", rnd(rng, {6, 2, 3, 3}, -0.5, 0.5)},
             {"b", rnd(rng, {1, 6, 1, 1}, -0.2, 0.2)}},
            [spec](Tape& t, const std::vector<VarId>& v) { return t.conv2d(v[0], v[1], v[2], spec); },
            [spec](const std::vector<ref::RTensor>& v) {
              return ref::conv2d(v[0], v[1], &v[2], spec);
            }});
    }
    {
      ConvSpec spec{4, 8, 1, 2, 1, false};
      push({"conv2d_k1_g1_s2" + tag,
            {{"x", rnd(rng, {2, 4, 5, 5}, -1, 1)}, {"w", rnd(rng, {8, 4, 1, 1}, -0.5, 0.5)}},
            [spec](Tape& t, const std::vector<VarId>& v) {
              return t.conv2d(v[0], v[1], kNoVar, spec);
            },
            [spec](const std::vector<ref::RTensor>& v) {
              return ref::conv2d(v[0], v[1], nullptr, spec);
            }});
    }
    for (int stride : {1, 2}) {
      ConvSpec spec{4, 4, 3, stride, 4, true};
      push({"depthwise_s" + std::to_string(stride) + tag,
            {{"x", rnd(rng, {1, 4, 6, 6}, -1, 1)},
             {"w", rnd(rng, {4, 1, 3, 3}, -0.5, 0.5)},
             {"b", rnd(rng, {1, 4, 1, 1}, -0.2, 0.2)}},
            [stride](Tape& t, const std::vector<VarId>& v) {
              return t.depthwise_conv3x3(v[0], v[1], v[2], stride);
            },
            [spec](const std::vector<ref::RTensor>& v) {
              return ref::conv2d(v[0], v[1], &v[2], spec);
            }});
    }
    push({"channel_shuffle_g2" + tag,
          {{"x", rnd(rng, {2, 8, 3, 3}, -1, 1)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.channel_shuffle(v[0], 2); },
          [](const std::vector<ref::RTensor>& v) { return ref::channel_shuffle(v[0], 2); }});
    push({"split_concat" + tag,
          {{"x", rnd(rng, {1, 9, 4, 4}, -1, 1)}},
          [](Tape& t, const std::vector<VarId>& v) {
            auto parts = t.channel_split(v[0], {2, 4, 3});
            return t.concat({parts[2], parts[0], parts[1]});
          },
          [](const std::vector<ref::RTensor>& v) {
            auto parts = ref::channel_split(v[0], {2, 4, 3});
            return ref::concat({&parts[2], &parts[0], &parts[1]});
          }});
    {
      Tensor rm = rnd(rng, {1, 5, 1, 1}, -0.5f, 0.5f);
      Tensor rv = rnd(rng, {1, 5, 1, 1}, 0.5f, 1.5f);
      ref::RTensor rrm = ref::RTensor::from(rm), rrv = ref::RTensor::from(rv);
      push({"batchnorm_eval" + tag,
            {{"x", rnd(rng, {2, 5, 3, 3}, -1, 1)},
             {"gamma", rnd(rng, {1, 5, 1, 1}, 0.5, 1.5)},
             {"beta", rnd(rng, {1, 5, 1, 1}, -0.5, 0.5)}},
            [rm, rv](Tape& t, const std::vector<VarId>& v) {
              return t.batchnorm_eval(v[0], v[1], v[2], rm, rv, 1e-5f);
            },
            [rrm, rrv](const std::vector<ref::RTensor>& v) {
              return ref::batchnorm_eval(v[0], v[1], v[2], rrm, rrv, 1e-5);
            }});
    }
    push({"batchnorm_train" + tag,
          {{"x", rnd(rng, {2, 5, 3, 3}, -1, 1)},
           {"gamma", rnd(rng, {1, 5, 1, 1}, 0.5, 1.5)},
           {"beta", rnd(rng, {1, 5, 1, 1}, -0.5, 0.5)}},
          [](Tape& t, const std::vector<VarId>& v) {
            return t.batchnorm_train(v[0], v[1], v[2], 1e-5f, nullptr);
          },
          [](const std::vector<ref::RTensor>& v) {
            return ref::batchnorm_train(v[0], v[1], v[2], 1e-5);
          }});
    push({"layernorm_channels" + tag,
          {{"x", rnd(rng, {2, 6, 3, 3}, -1, 1)},
           {"gamma", rnd(rng, {1, 6, 1, 1}, 0.5, 1.5)},
           {"beta", rnd(rng, {1, 6, 1, 1}, -0.5, 0.5)}},
          [](Tape& t, const std::vector<VarId>& v) {
            return t.layernorm_channels(v[0], v[1], v[2], 1e-5f);
          },
          [](const std::vector<ref::RTensor>& v) {
            return ref::layernorm_channels(v[0], v[1], v[2], 1e-5);
          }});
    push({"leaky_relu" + tag,
          {{"x", rnd_offset(rng, {1, 4, 5, 5}, 0.01f, 1.0f)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.leaky_relu(v[0], 0.1f); },
          [](const std::vector<ref::RTensor>& v) { return ref::leaky_relu(v[0], 0.1); }});
    push({"relu" + tag,
          {{"x", rnd_offset(rng, {1, 4, 5, 5}, 0.01f, 1.0f)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.relu(v[0]); },
          [](const std::vector<ref::RTensor>& v) { return ref::vmax(v[0], ref::RTensor(v[0].shape)); }});
    push({"sigmoid" + tag,
          {{"x", rnd(rng, {1, 4, 5, 5}, -3, 3)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.sigmoid(v[0]); },
          [](const std::vector<ref::RTensor>& v) { return ref::sigmoid(v[0]); }});
    push({"silu" + tag,
          {{"x", rnd(rng, {1, 4, 5, 5}, -3, 3)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.silu(v[0]); },
          [](const std::vector<ref::RTensor>& v) { return ref::silu(v[0]); }});
    push({"square" + tag,
          {{"x", rnd(rng, {1, 4, 5, 5}, -2, 2)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.square(v[0]); },
          [](const std::vector<ref::RTensor>& v) { return ref::square(v[0]); }});
    push({"arctan" + tag,
          {{"x", rnd(rng, {1, 4, 5, 5}, -2, 2)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.arctan(v[0]); },
          [](const std::vector<ref::RTensor>& v) { return ref::arctan(v[0]); }});
    push({"affine" + tag,
          {{"x", rnd(rng, {1, 4, 5, 5}, -2, 2)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.affine(v[0], 1.7f, -0.3f); },
          [](const std::vector<ref::RTensor>& v) { return ref::affine(v[0], 1.7, -0.3); }});
    {
      Tensor x = rnd(rng, {1, 3, 4, 4}, -1, 1);
      Tensor y = rnd(rng, {1, 3, 4, 4}, -1, 1);
      push({"add" + tag,
            {{"x", x}, {"y", y}},
            [](Tape& t, const std::vector<VarId>& v) { return t.add(v[0], v[1]); },
            [](const std::vector<ref::RTensor>& v) { return ref::add(v[0], v[1]); }});
      push({"sub" + tag,
            {{"x", x}, {"y", y}},
            [](Tape& t, const std::vector<VarId>& v) { return t.sub(v[0], v[1]); },
            [](const std::vector<ref::RTensor>& v) { return ref::sub(v[0], v[1]); }});
      push({"mul" + tag,
            {{"x", x}, {"y", y}},
            [](Tape& t, const std::vector<VarId>& v) { return t.mul(v[0], v[1]); },
            [](const std::vector<ref::RTensor>& v) { return ref::mul(v[0], v[1]); }});
    }
    push({"div" + tag,
          {{"x", rnd(rng, {1, 3, 4, 4}, -1, 1)}, {"y", rnd_offset(rng, {1, 3, 4, 4}, 0.5f, 1.5f)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.div(v[0], v[1]); },
          [](const std::vector<ref::RTensor>& v) { return ref::divide(v[0], v[1]); }});
    {
      // elementwise gaps >= 0.05 keep min/max off their kinks
      Tensor x = rnd(rng, {1, 3, 4, 4}, -1, 1);
      Tensor y = x;
      for (float& v : y.data) {
        float gap = rng.uniform(0.05f, 0.5f);
        v += rng.uniform01() < 0.5 ? -gap : gap;
      }
      push({"min" + tag,
            {{"x", x}, {"y", y}},
            [](Tape& t, const std::vector<VarId>& v) { return t.vmin(v[0], v[1]); },
            [](const std::vector<ref::RTensor>& v) { return ref::vmin(v[0], v[1]); }});
      push({"max" + tag,
            {{"x", x}, {"y", y}},
            [](Tape& t, const std::vector<VarId>& v) { return t.vmax(v[0], v[1]); },
            [](const std::vector<ref::RTensor>& v) { return ref::vmax(v[0], v[1]); }});
    }
    for (int k : {3, 5}) {
      push({"maxpool_k" + std::to_string(k) + tag,
            {{"x", rnd_distinct(rng, {1, 3, 6, 6})}},
            [k](Tape& t, const std::vector<VarId>& v) { return t.maxpool(v[0], k, 1); },
            [k](const std::vector<ref::RTensor>& v) { return ref::maxpool(v[0], k, 1); }});
    }
    push({"upsample_nearest" + tag,
          {{"x", rnd(rng, {1, 3, 3, 3}, -1, 1)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.upsample_nearest(v[0], 2); },
          [](const std::vector<ref::RTensor>& v) { return ref::upsample_nearest(v[0], 2); }});
    push({"softmax_lastdim" + tag,
          {{"x", rnd(rng, {1, 2, 3, 5}, -2, 2)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.softmax_lastdim(v[0]); },
          [](const std::vector<ref::RTensor>& v) { return ref::softmax_lastdim(v[0]); }});
    push({"mhsa_h2" + tag,
          {{"q", rnd(rng, {1, 4, 3, 3}, -1, 1)},
           {"k", rnd(rng, {1, 4, 3, 3}, -1, 1)},
           {"v", rnd(rng, {1, 4, 3, 3}, -1, 1)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.mhsa(v[0], v[1], v[2], 2); },
          [](const std::vector<ref::RTensor>& v) { return ref::mhsa(v[0], v[1], v[2], 2); }});
    {
      std::vector<std::int64_t> idx = {0, 5, 5, 17, 3, 31};
      push({"gather" + tag,
            {{"x", rnd(rng, {1, 2, 4, 4}, -1, 1)}},
            [idx](Tape& t, const std::vector<VarId>& v) { return t.gather(v[0], idx); },
            [idx](const std::vector<ref::RTensor>& v) { return ref::gather(v[0], idx); }});
    }
    {
      Tensor targets(Shape{1, 12, 1, 1});
      for (float& v : targets.data) v = rng.uniform01() < 0.5 ? 0.0f : 1.0f;
      ref::RTensor rtargets = ref::RTensor::from(targets);
      push({"bce_with_logits_mean" + tag,
            {{"x", rnd(rng, {1, 12, 1, 1}, -2, 2)}},
            [targets](Tape& t, const std::vector<VarId>& v) {
              return t.bce_with_logits_mean(v[0], targets);
            },
            [rtargets](const std::vector<ref::RTensor>& v) {
              ref::RTensor y(Shape{1, 1, 1, 1});
              y.data[0] = ref::bce_with_logits_mean(v[0], rtargets);
              return y;
            }});
    }
    push({"sum" + tag,
          {{"x", rnd(rng, {1, 3, 4, 4}, -1, 1)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.sum(v[0]); },
          [](const std::vector<ref::RTensor>& v) {
            ref::RTensor y(Shape{1, 1, 1, 1});
            y.data[0] = ref::sum(v[0]);
            return y;
          }});
    push({"mean" + tag,
          {{"x", rnd(rng, {1, 3, 4, 4}, -1, 1)}},
          [](Tape& t, const std::vector<VarId>& v) { return t.mean(v[0]); },
          [](const std::vector<ref::RTensor>& v) {
            ref::RTensor y(Shape{1, 1, 1, 1});
            y.data[0] = ref::mean(v[0]);
            return y;
          }});
  }
  return results;
}

std::vector<CheckResult> block_suite(std::uint64_t base_seed, int n_seeds) {
  std::vector<CheckResult> results;
  for (int sd = 0; sd < n_seeds; ++sd) {
    std::uint64_t seed = base_seed + static_cast<std::uint64_t>(sd);
    std::string tag = "@" + std::to_string(sd);
    {
      Rng rng(seed);
      DgsmBlock blk;
      blk.init(rng, 8, 8, false, 2);
      push_bn_betas(blk, rng);
      ref::RDgsmBlock rblk = ref::RDgsmBlock::from(blk);
      ref::SlotList extra;
      rblk.collect("m", extra);
      results.push_back(run_block_check(
          "dgsm_stride1" + tag, rnd(rng, {1, 8, 6, 6}, -1, 1),
          [&](Tape& t, VarId x) { return blk.forward(t, x, Phase::kTrain); },
          [&](const ref::RTensor& x) { return rblk.fwd(x, true); },
          [&](ref::SlotList& s) { s.insert(s.end(), extra.begin(), extra.end()); },
          trainable_map_of([&](const ParamVisitor& f) { blk.visit("m", f); }), rng, 1e-3));
    }
    {
      Rng rng(seed + 1000);
      DgsmBlock blk;
      blk.init(rng, 8, 16, true, 2);
      push_bn_betas(blk, rng);
      ref::RDgsmBlock rblk = ref::RDgsmBlock::from(blk);
      ref::SlotList extra;
      rblk.collect("m", extra);
      results.push_back(run_block_check(
          "dgsm_stride2" + tag, rnd(rng, {1, 8, 6, 6}, -1, 1),
          [&](Tape& t, VarId x) { return blk.forward(t, x, Phase::kTrain); },
          [&](const ref::RTensor& x) { return rblk.fwd(x, true); },
          [&](ref::SlotList& s) { s.insert(s.end(), extra.begin(), extra.end()); },
          trainable_map_of([&](const ParamVisitor& f) { blk.visit("m", f); }), rng, 1e-3));
    }
    {
      Rng rng(seed + 2000);
      DgstConfig dc;
      dc.channels = 16;
      dc.heads = DgstConfig::default_heads(16);
      DgstBlock blk;
      blk.init(rng, dc);
      push_bn_betas(blk, rng);
      ref::RDgstBlock rblk = ref::RDgstBlock::from(blk);
      ref::SlotList extra;
      rblk.collect("m", extra);
      results.push_back(run_block_check(
          "dgst" + tag, rnd(rng, {1, 16, 4, 4}, -1, 1),
          [&](Tape& t, VarId x) { return blk.forward(t, x, Phase::kTrain); },
          [&](const ref::RTensor& x) { return rblk.fwd(x, true); },
          [&](ref::SlotList& s) { s.insert(s.end(), extra.begin(), extra.end()); },
          trainable_map_of([&](const ParamVisitor& f) { blk.visit("m", f); }), rng, 1e-3));
    }
    {
      Rng rng(seed + 3000);
      ConvBnAct cba;
      cba.init(rng, ConvSpec{4, 6, 3, 1, 2, false});
      push_bn_betas(cba, rng);
      ref::RConvBnAct rcba = ref::RConvBnAct::from(cba);
      ref::SlotList extra;
      rcba.collect("m", extra);
      results.push_back(run_block_check(
          "conv_bn_act" + tag, rnd(rng, {1, 4, 5, 5}, -1, 1),
          [&](Tape& t, VarId x) { return cba.forward(t, x, Phase::kTrain); },
          [&](const ref::RTensor& x) { return rcba.fwd(x, true); },
          [&](ref::SlotList& s) { s.insert(s.end(), extra.begin(), extra.end()); },
          trainable_map_of([&](const ParamVisitor& f) { cba.visit("m", f); }), rng, 1e-3));
    }
  }
  return results;
}

std::vector<CheckResult> loss_suite(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.stages = {{1, 8}, {1, 8}, {1, 16}, {1, 16}};
  cfg.input_w = cfg.input_h = 32;
  Model model = Model::build(cfg, seed);
  Rng rng(seed + 7);
  model_push_bn_betas(model, rng);

  Tensor images(2, 3, 32, 32);
  for (float& v : images.data) v = rng.uniform(0.0f, 1.0f);
  std::vector<std::vector<GtBox>> gts(2);
  gts[0].push_back(GtBox{0, 14.0f, 16.0f, 12.0f, 10.0f});
  gts[1].push_back(GtBox{1, 18.0f, 12.0f, 8.0f, 14.0f});
  std::vector<Assignment> assignments = assign_targets(gts, cfg, 32, 32);
  LossWeights lw;

  // one engine pass per loss component (a tape supports a single backward)
  const char* names[4] = {"loss_box", "loss_obj", "loss_cls", "loss_total"};
  std::vector<std::map<std::string, std::vector<float>>> engine_grads(4);
  std::map<std::string, Tensor*> params;
  model.visit_params([&](const std::string& n, Tensor& t, bool trainable) {
    if (trainable) params[n] = &t;
  });
  for (int k = 0; k < 4; ++k) {
    Tape t(true);
    VarId img = t.leaf_input(images, false);
    std::vector<VarId> raw = model.forward(t, img, Phase::kTrain);
    LossResult lr = compute_loss(t, raw, assignments, cfg, lw);
    VarId target = k == 0 ? lr.box : k == 1 ? lr.obj : k == 2 ? lr.cls : lr.total;
    t.backward(target);
    for (auto& [n, ten] : params) {
      const std::vector<float>* g = t.grad_for(*ten);
      check(g != nullptr, "loss_suite: missing grad for " + n);
      engine_grads[static_cast<std::size_t>(k)][n] = *g;
    }
  }

  ref::RModel rmodel = ref::RModel::from(model);
  ref::SlotList slots;
  rmodel.collect(slots);
  ref::RTensor rimages = ref::RTensor::from(images);
  auto ref_losses = [&]() {
    std::vector<ref::RTensor> raw = rmodel.fwd(rimages, true);
    ref::RLossOut lo = ref::loss_forward(raw, assignments, cfg, lw);
    return std::vector<double>{lo.box, lo.obj, lo.cls, lo.total};
  };
  // single fd sweep covers all four components
  double err = fd_max_err(slots, ref_losses, engine_grads, 1e-4);
  std::vector<CheckResult> results;
  for (int k = 0; k < 4; ++k) {
    results.push_back(CheckResult{names[static_cast<std::size_t>(k)], err, 1e-3});
  }
  return results;
}

std::vector<CheckResult> full_suite(std::uint64_t base_seed, int n_seeds) {
  std::vector<CheckResult> all = op_suite(base_seed, n_seeds);
  std::vector<CheckResult> blocks = block_suite(base_seed, n_seeds);
  all.insert(all.end(), blocks.begin(), blocks.end());
  std::vector<CheckResult> loss = loss_suite(base_seed);
  all.insert(all.end(), loss.begin(), loss.end());
  return all;
}

}  // namespace dgs::refcheck
