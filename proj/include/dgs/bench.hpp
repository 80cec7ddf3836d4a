#pragma once

#include <string>

#include "dgs/model.hpp"
#include "dgs/postprocess.hpp"

namespace dgs {

// Efficiency row: parameter count plus the two-stage timing split.
// interface_ms covers letterbox + forward; nms_ms covers decode + suppression;
// total_ms is their sum.
struct BenchReport {
  double params_m = 0.0;
  double interface_ms = 0.0;
  double nms_ms = 0.0;
  double total_ms = 0.0;
};

BenchReport bench_model(Model& model, int runs, int warmup, int size, float conf_threshold,
                        float iou_threshold, std::uint64_t seed);

std::string format_bench(const BenchReport& r);

// Shared single-image inference path: letterbox, forward (eval), per-head
// decode, NMS; boxes returned in original-image coordinates.
std::vector<Detection> run_inference(Model& model, const Tensor& image, float conf_threshold,
                                     float iou_threshold);

}  // namespace dgs
