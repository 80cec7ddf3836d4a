#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dgs/postprocess.hpp"
#include "dgs/tensor.hpp"

namespace dgs {

// One YOLO-format annotation: class id plus center/size normalized to [0,1].
struct Label {
  int class_id = 0;
  float cx = 0.0f, cy = 0.0f, w = 0.0f, h = 0.0f;
};

struct Sample {
  Tensor image;  // (1,3,H,W) in [0,1]
  std::vector<Label> labels;
  std::string path;
};

// Parses `class cx cy w h` lines; blank lines are ignored, errors report the
// 1-based line number.
std::vector<Label> parse_label_file(const std::string& text);
std::string serialize_labels(const std::vector<Label>& labels);

// Sniffs the magic: binary PPM ("P6", 8-bit) or the raw tensor format
// ("DGSI0001", u32 dims n/c/h/w + little-endian f32 payload).
Tensor load_image(const std::string& path);
void save_image_ppm(const std::string& path, const Tensor& img);   // clamps to [0,1]
void save_image_raw(const std::string& path, const Tensor& img);   // bit-exact

// Aspect-preserving nearest-neighbor resize into a target x target canvas,
// centered, padded with 114/255 gray.
struct LetterboxTransform {
  float scale = 1.0f;
  float pad_x = 0.0f;
  float pad_y = 0.0f;
  int orig_w = 0, orig_h = 0;
  int target = 0;

  Box apply(const Box& original) const;    // original pixels -> network pixels
  Box invert(const Box& network) const;    // network pixels -> original pixels
};
std::pair<Tensor, LetterboxTransform> letterbox(const Tensor& img, int target);

// Deterministic 70/15/15 split: paths are sorted, shuffled by seed, then cut
// at floor(0.70 N) and floor(0.15 N); the test split takes the remainder.
struct SplitResult {
  std::vector<std::string> train, val, test;
};
SplitResult split_dataset(std::vector<std::string> paths, std::uint64_t seed);

// Dataset layout: <dir>/images/* with <dir>/labels/<basename>.txt; a missing
// label file means a negative image.
std::vector<std::string> list_dataset_images(const std::string& dir);
Sample load_sample(const std::string& image_path);

// Draws a 2px box outline in-place; color per class from a fixed palette.
void draw_box(Tensor& img, const Box& box, int class_id);

}  // namespace dgs
