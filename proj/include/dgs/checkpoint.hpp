#pragma once

#include <string>

#include "dgs/model.hpp"

namespace dgs {

// Checkpoint file layout:
//   bytes 0..7   magic "DGSD0001"
//   bytes 8..11  u32 little-endian manifest byte length L
//   L bytes      UTF-8 manifest:
//                  endian le
//                  count <N>
//                  tensor <name> f32 <n> <c> <h> <w> <blob-byte-offset>
//   rest         raw float32 little-endian blob, tensors tightly packed in
//                manifest order
// Every stored tensor of the model (weights, biases, norm parameters, running
// statistics) appears exactly once; load() validates names and shapes against
// the built graph before accepting any weights.
void save_checkpoint(Model& model, const std::string& path);
void load_checkpoint(Model& model, const std::string& path);

}  // namespace dgs
