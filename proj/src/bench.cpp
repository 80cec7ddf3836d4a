#include "dgs/bench.hpp"

#include <chrono>
#include <cstdio>

#include "dgs/data.hpp"
#include "dgs/rng.hpp"

namespace dgs {

std::vector<Detection> run_inference(Model& model, const Tensor& image, float conf_threshold,
                                     float iou_threshold) {
  check(model.cfg.input_w == model.cfg.input_h, "inference: square input required");
  auto [net_img, tf] = letterbox(image, model.cfg.input_w);
  Tape t(false);
  VarId x = t.leaf_input(std::move(net_img), false);
  std::vector<VarId> raw = model.forward(t, x, Phase::kEval);
  std::vector<Detection> dets;
  for (std::size_t h = 0; h < raw.size(); ++h) {
    std::vector<Detection> part =
        decode(t.val(raw[h]), model.cfg.anchors[h], model.cfg.strides[h], model.cfg.num_classes,
               conf_threshold, model.cfg.input_w, model.cfg.input_h);
    dets.insert(dets.end(), part.begin(), part.end());
  }
  std::vector<Detection> kept = nms(dets, iou_threshold);
  for (Detection& d : kept) d.box = tf.invert(d.box);
  return kept;
}

BenchReport bench_model(Model& model, int runs, int warmup, int size, float conf_threshold,
                        float iou_threshold, std::uint64_t seed) {
  check(runs >= 1 && warmup >= 0, "bench: need runs >= 1, warmup >= 0");
  check(size % 32 == 0, "bench: size must be a multiple of 32");
  model.cfg.input_w = model.cfg.input_h = size;
  Rng rng(seed);
  Tensor image(1, 3, size, size);
  for (float& v : image.data) v = rng.uniform(0.0f, 1.0f);

  using clock = std::chrono::steady_clock;
  double sum_iface = 0.0, sum_nms = 0.0;
  for (int r = 0; r < warmup + runs; ++r) {
    auto t0 = clock::now();
    auto [net_img, tf] = letterbox(image, size);
    Tape t(false);
    VarId x = t.leaf_input(std::move(net_img), false);
    std::vector<VarId> raw = model.forward(t, x, Phase::kEval);
    auto t1 = clock::now();
    std::vector<Detection> dets;
    for (std::size_t h = 0; h < raw.size(); ++h) {
      std::vector<Detection> part =
          decode(t.val(raw[h]), model.cfg.anchors[h], model.cfg.strides[h],
                 model.cfg.num_classes, conf_threshold, size, size);
      dets.insert(dets.end(), part.begin(), part.end());
    }
    std::vector<Detection> kept = nms(dets, iou_threshold);
    for (Detection& d : kept) d.box = tf.invert(d.box);
    auto t2 = clock::now();
    if (r >= warmup) {
      sum_iface += std::chrono::duration<double, std::milli>(t1 - t0).count();
      sum_nms += std::chrono::duration<double, std::milli>(t2 - t1).count();
    }
  }
  BenchReport rep;
  rep.params_m = static_cast<double>(model.param_count()) / 1e6;
  rep.interface_ms = sum_iface / runs;
  rep.nms_ms = sum_nms / runs;
  rep.total_ms = rep.interface_ms + rep.nms_ms;
  return rep;
}

std::string format_bench(const BenchReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "params(M) %.2f interface(ms) %.1f nms(ms) %.1f total(ms) %.1f\n",
                r.params_m, r.interface_ms, r.nms_ms, r.total_ms);
  return buf;
}

}  // namespace dgs
