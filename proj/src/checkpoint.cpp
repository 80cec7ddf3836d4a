#include "dgs/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace dgs {

static constexpr char kMagic[8] = {'D', 'G', 'S', 'D', '0', '0', '0', '1'};

static void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

static std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  check(is.good(), "checkpoint: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

static void put_f32_le(std::ostream& os, const float* src, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u;
    std::memcpy(&u, &src[i], 4);
    unsigned char b[4] = {static_cast<unsigned char>(u & 0xff),
                          static_cast<unsigned char>((u >> 8) & 0xff),
                          static_cast<unsigned char>((u >> 16) & 0xff),
                          static_cast<unsigned char>((u >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
  }
}

static void get_f32_le(const unsigned char* src, float* dst, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = static_cast<std::uint32_t>(src[4 * i]) |
                      (static_cast<std::uint32_t>(src[4 * i + 1]) << 8) |
                      (static_cast<std::uint32_t>(src[4 * i + 2]) << 16) |
                      (static_cast<std::uint32_t>(src[4 * i + 3]) << 24);
    std::memcpy(&dst[i], &u, 4);
  }
}

void save_checkpoint(Model& model, const std::string& path) {
  struct Entry {
    std::string name;
    Tensor* t;
  };
  std::vector<Entry> entries;
  model.visit_params(
      [&](const std::string& name, Tensor& t, bool) { entries.push_back({name, &t}); });

  std::ostringstream manifest;
  manifest << "endian le\n";
  manifest << "count " << entries.size() << "\n";
  std::int64_t offset = 0;
  for (const Entry& e : entries) {
    const Shape& s = e.t->shape;
    manifest << "tensor " << e.name << " f32 " << s.n << " " << s.c << " " << s.h << " " << s.w
             << " " << offset << "\n";
    offset += e.t->numel() * 4;
  }
  std::string mtext = manifest.str();

  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot write checkpoint: " + path);
  f.write(kMagic, 8);
  put_u32_le(f, static_cast<std::uint32_t>(mtext.size()));
  f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const Entry& e : entries) {
    put_f32_le(f, e.t->data.data(), e.t->data.size());
  }
  check(f.good(), "checkpoint write failed: " + path);
}

void load_checkpoint(Model& model, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  check(f.good() && std::memcmp(magic, kMagic, 8) == 0,
        "checkpoint: bad magic (expected DGSD0001): " + path);
  std::uint32_t mlen = get_u32_le(f);
  std::string mtext(mlen, '\0');
  f.read(mtext.data(), mlen);
  check(f.good(), "checkpoint: truncated manifest");

  struct Entry {
    Shape shape;
    std::int64_t offset = 0;
  };
  std::map<std::string, Entry> manifest;
  {
    std::istringstream ms(mtext);
    std::string line;
    bool endian_seen = false;
    std::size_t declared = 0;
    while (std::getline(ms, line)) {
      std::istringstream ls(line);
      std::string key;
      if (!(ls >> key)) continue;
      if (key == "endian") {
        std::string v;
        ls >> v;
        check(v == "le", "checkpoint: endian marker mismatch (got '" + v + "', need 'le')");
        endian_seen = true;
      } else if (key == "count") {
        ls >> declared;
      } else if (key == "tensor") {
        std::string name, dtype;
        Entry e;
        check(static_cast<bool>(ls >> name >> dtype >> e.shape.n >> e.shape.c >> e.shape.h >>
                                e.shape.w >> e.offset),
              "checkpoint: malformed tensor line: " + line);
        check(dtype == "f32", "checkpoint: unsupported dtype '" + dtype + "' for " + name);
        check(manifest.emplace(name, e).second, "checkpoint: duplicate tensor " + name);
      } else {
        throw ValidationError("checkpoint: unknown manifest key '" + key + "'");
      }
    }
    check(endian_seen, "checkpoint: endian marker missing");
    check(declared == manifest.size(), "checkpoint: manifest count mismatch");
  }

  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());

  // Validate the full manifest against the graph before touching any weight.
  std::vector<std::pair<std::string, Tensor*>> params;
  model.visit_params(
      [&](const std::string& name, Tensor& t, bool) { params.emplace_back(name, &t); });
  for (auto& [name, t] : params) {
    auto it = manifest.find(name);
    check(it != manifest.end(), "checkpoint: missing tensor '" + name + "'");
    check(it->second.shape == t->shape, "checkpoint: shape mismatch for '" + name + "': file " +
                                            it->second.shape.str() + ", model " + t->shape.str());
    std::int64_t need = it->second.offset + it->second.shape.numel() * 4;
    check(need <= static_cast<std::int64_t>(blob.size()),
          "checkpoint: truncated blob (tensor '" + name + "')");
  }
  check(params.size() == manifest.size(),
        "checkpoint: file has " + std::to_string(manifest.size()) + " tensors, model expects " +
            std::to_string(params.size()));

  for (auto& [name, t] : params) {
    const Entry& e = manifest.at(name);
    get_f32_le(blob.data() + e.offset, t->data.data(), t->data.size());
    check_finite(*t, "load_checkpoint");
  }
}

}  // namespace dgs
