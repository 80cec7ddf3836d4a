#include "dgs/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dgs/rng.hpp"

namespace fs = std::filesystem;

namespace dgs {

std::vector<Label> parse_label_file(const std::string& text) {
  std::vector<Label> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<std::string> tokens;
    std::string tok;
    while (ls >> tok) tokens.push_back(tok);
    if (tokens.empty()) continue;
    std::string where = "label line " + std::to_string(lineno);
    check(tokens.size() == 5, where + ": expected 5 fields, got " + std::to_string(tokens.size()));
    Label lb;
    try {
      std::size_t pos = 0;
      lb.class_id = std::stoi(tokens[0], &pos);
      check(pos == tokens[0].size(), where + ": non-numeric class id '" + tokens[0] + "'");
      float vals[4];
      for (int i = 0; i < 4; ++i) {
        vals[i] = std::stof(tokens[static_cast<std::size_t>(i + 1)], &pos);
        check(pos == tokens[static_cast<std::size_t>(i + 1)].size(),
              where + ": non-numeric token '" + tokens[static_cast<std::size_t>(i + 1)] + "'");
      }
      lb.cx = vals[0];
      lb.cy = vals[1];
      lb.w = vals[2];
      lb.h = vals[3];
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception&) {
      throw ValidationError(where + ": non-numeric token");
    }
    check(lb.class_id >= 0, where + ": negative class id");
    check(lb.cx >= 0.0f && lb.cx <= 1.0f && lb.cy >= 0.0f && lb.cy <= 1.0f,
          where + ": center out of [0,1]");
    check(lb.w > 0.0f && lb.w <= 1.0f && lb.h > 0.0f && lb.h <= 1.0f,
          where + ": size out of (0,1]");
    out.push_back(lb);
  }
  return out;
}

std::string serialize_labels(const std::vector<Label>& labels) {
  std::ostringstream os;
  for (const Label& lb : labels) {
    os << lb.class_id << " " << lb.cx << " " << lb.cy << " " << lb.w << " " << lb.h << "\n";
  }
  return os.str();
}

// ---- images ------------------------------------------------------------------

static constexpr char kRawMagic[8] = {'D', 'G', 'S', 'I', '0', '0', '0', '1'};

static std::uint32_t get_u32_le(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

static void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

static Tensor load_ppm(const std::vector<unsigned char>& bytes, const std::string& path) {
  std::size_t pos = 2;  // past "P6"
  auto skip_ws = [&]() {
    while (pos < bytes.size()) {
      if (std::isspace(bytes[pos])) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> int {
    skip_ws();
    check(pos < bytes.size() && std::isdigit(bytes[pos]), "PPM: malformed header in " + path);
    int v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      ++pos;
    }
    return v;
  };
  int w = read_int();
  int h = read_int();
  int maxval = read_int();
  check(maxval == 255, "PPM: unsupported max-val " + std::to_string(maxval) + " (must be 255): " +
                           path);
  check(pos < bytes.size() && std::isspace(bytes[pos]), "PPM: malformed header in " + path);
  ++pos;  // single whitespace before payload
  std::size_t need = static_cast<std::size_t>(w) * h * 3;
  check(bytes.size() - pos >= need, "PPM: truncated payload in " + path);
  Tensor img(1, 3, h, w);
  const unsigned char* p = bytes.data() + pos;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(0, c, y, x) = static_cast<float>(p[(static_cast<std::size_t>(y) * w + x) * 3 +
                                                  static_cast<std::size_t>(c)]) /
                             255.0f;
      }
    }
  }
  return img;
}

static Tensor load_raw(const std::vector<unsigned char>& bytes, const std::string& path) {
  check(bytes.size() >= 8 + 16, "raw tensor: truncated header in " + path);
  Shape s;
  s.n = static_cast<int>(get_u32_le(bytes.data() + 8));
  s.c = static_cast<int>(get_u32_le(bytes.data() + 12));
  s.h = static_cast<int>(get_u32_le(bytes.data() + 16));
  s.w = static_cast<int>(get_u32_le(bytes.data() + 20));
  check(s.numel() > 0, "raw tensor: bad dims in " + path);
  std::size_t need = 24 + static_cast<std::size_t>(s.numel()) * 4;
  check(bytes.size() >= need, "raw tensor: truncated payload in " + path);
  Tensor t(s);
  for (std::int64_t i = 0; i < s.numel(); ++i) {
    std::uint32_t u = get_u32_le(bytes.data() + 24 + 4 * i);
    std::memcpy(&t.data[static_cast<std::size_t>(i)], &u, 4);
  }
  return t;
}

Tensor load_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "cannot open image: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  check(bytes.size() >= 8, "image file too short: " + path);
  if (bytes[0] == 'P' && bytes[1] == '6') return load_ppm(bytes, path);
  if (std::memcmp(bytes.data(), kRawMagic, 8) == 0) return load_raw(bytes, path);
  throw ValidationError("unsupported image magic in " + path + " (need P6 or DGSI0001)");
}

void save_image_ppm(const std::string& path, const Tensor& img) {
  check(img.shape.n == 1 && img.shape.c == 3, "save_image_ppm: need a (1,3,H,W) tensor");
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot write image: " + path);
  f << "P6\n" << img.shape.w << " " << img.shape.h << "\n255\n";
  for (int y = 0; y < img.shape.h; ++y) {
    for (int x = 0; x < img.shape.w; ++x) {
      for (int c = 0; c < 3; ++c) {
        float v = std::clamp(img.at(0, c, y, x), 0.0f, 1.0f);
        unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0f));
        f.write(reinterpret_cast<const char*>(&b), 1);
      }
    }
  }
}

void save_image_raw(const std::string& path, const Tensor& img) {
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot write image: " + path);
  f.write(kRawMagic, 8);
  put_u32_le(f, static_cast<std::uint32_t>(img.shape.n));
  put_u32_le(f, static_cast<std::uint32_t>(img.shape.c));
  put_u32_le(f, static_cast<std::uint32_t>(img.shape.h));
  put_u32_le(f, static_cast<std::uint32_t>(img.shape.w));
  for (float v : img.data) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32_le(f, u);
  }
}

// ---- letterbox ---------------------------------------------------------------

Box LetterboxTransform::apply(const Box& b) const {
  return Box{b.x1 * scale + pad_x, b.y1 * scale + pad_y, b.x2 * scale + pad_x,
             b.y2 * scale + pad_y};
}

Box LetterboxTransform::invert(const Box& b) const {
  return Box{(b.x1 - pad_x) / scale, (b.y1 - pad_y) / scale, (b.x2 - pad_x) / scale,
             (b.y2 - pad_y) / scale};
}

std::pair<Tensor, LetterboxTransform> letterbox(const Tensor& img, int target) {
  check(img.shape.n == 1 && img.shape.c == 3, "letterbox: need a (1,3,H,W) tensor");
  check(target >= 1, "letterbox: target must be positive");
  int ow = img.shape.w, oh = img.shape.h;
  LetterboxTransform tf;
  tf.orig_w = ow;
  tf.orig_h = oh;
  tf.target = target;
  tf.scale = std::min(static_cast<float>(target) / static_cast<float>(ow),
                      static_cast<float>(target) / static_cast<float>(oh));
  int new_w = static_cast<int>(std::round(ow * tf.scale));
  int new_h = static_cast<int>(std::round(oh * tf.scale));
  tf.pad_x = static_cast<float>((target - new_w) / 2);
  tf.pad_y = static_cast<float>((target - new_h) / 2);

  constexpr float kGray = 114.0f / 255.0f;
  Tensor out = Tensor::full(Shape{1, 3, target, target}, kGray);
  int px = static_cast<int>(tf.pad_x);
  int py = static_cast<int>(tf.pad_y);
  float inv_scale = 1.0f / tf.scale;
  for (int c = 0; c < 3; ++c) {
    const float* src = img.plane(0, c);
    float* dst = out.plane(0, c);
    for (int y = 0; y < new_h; ++y) {
      int sy = std::min(static_cast<int>((static_cast<float>(y) + 0.5f) * inv_scale), oh - 1);
      const float* srow = src + static_cast<std::int64_t>(sy) * ow;
      float* drow = dst + static_cast<std::int64_t>(y + py) * target + px;
      for (int x = 0; x < new_w; ++x) {
        int sx = std::min(static_cast<int>((static_cast<float>(x) + 0.5f) * inv_scale), ow - 1);
        drow[x] = srow[sx];
      }
    }
  }
  return {std::move(out), tf};
}

// ---- split -------------------------------------------------------------------

SplitResult split_dataset(std::vector<std::string> paths, std::uint64_t seed) {
  std::size_t n = paths.size();
  check(n >= 3, "split_dataset: need at least 3 items, got " + std::to_string(n));
  std::sort(paths.begin(), paths.end());
  Rng rng(seed);
  rng.shuffle(paths);
  std::size_t n_train = static_cast<std::size_t>(0.70 * static_cast<double>(n));
  std::size_t n_val = static_cast<std::size_t>(0.15 * static_cast<double>(n));
  SplitResult r;
  r.train.assign(paths.begin(), paths.begin() + static_cast<std::ptrdiff_t>(n_train));
  r.val.assign(paths.begin() + static_cast<std::ptrdiff_t>(n_train),
               paths.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  r.test.assign(paths.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), paths.end());
  return r;
}

std::vector<std::string> list_dataset_images(const std::string& dir) {
  fs::path images = fs::path(dir) / "images";
  check(fs::is_directory(images), "dataset: missing images/ directory under " + dir);
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.is_regular_file()) out.push_back(entry.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Sample load_sample(const std::string& image_path) {
  Sample s;
  s.path = image_path;
  s.image = load_image(image_path);
  fs::path ip(image_path);
  fs::path label = ip.parent_path().parent_path() / "labels" / (ip.stem().string() + ".txt");
  if (fs::exists(label)) {
    std::ifstream f(label);
    std::ostringstream buf;
    buf << f.rdbuf();
    s.labels = parse_label_file(buf.str());
  }
  return s;
}

void draw_box(Tensor& img, const Box& box, int class_id) {
  static const float kPalette[6][3] = {{1.0f, 0.2f, 0.2f}, {0.2f, 1.0f, 0.2f}, {0.2f, 0.4f, 1.0f},
                                       {1.0f, 1.0f, 0.2f}, {1.0f, 0.2f, 1.0f}, {0.2f, 1.0f, 1.0f}};
  const float* color = kPalette[class_id % 6];
  int x1 = std::clamp(static_cast<int>(std::lround(box.x1)), 0, img.shape.w - 1);
  int y1 = std::clamp(static_cast<int>(std::lround(box.y1)), 0, img.shape.h - 1);
  int x2 = std::clamp(static_cast<int>(std::lround(box.x2)), 0, img.shape.w - 1);
  int y2 = std::clamp(static_cast<int>(std::lround(box.y2)), 0, img.shape.h - 1);
  auto put = [&](int y, int x) {
    for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = color[c];
  };
  for (int t = 0; t < 2; ++t) {
    int yt = std::min(y1 + t, img.shape.h - 1);
    int yb = std::max(y2 - t, 0);
    for (int x = x1; x <= x2; ++x) {
      put(yt, x);
      put(yb, x);
    }
    int xl = std::min(x1 + t, img.shape.w - 1);
    int xr = std::max(x2 - t, 0);
    for (int y = y1; y <= y2; ++y) {
      put(y, xl);
      put(y, xr);
    }
  }
}

}  // namespace dgs
