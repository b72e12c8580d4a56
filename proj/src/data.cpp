#include "hsmamba/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hsmamba {

std::size_t LabelMap::num_classes() const {
  std::uint16_t k = 0;
  for (std::uint16_t v : labels) k = std::max(k, v);
  return k;
}

namespace {

std::size_t count_set(const std::vector<std::uint8_t>& m) {
  std::size_t n = 0;
  for (std::uint8_t v : m) n += v != 0;
  return n;
}

}  // namespace

std::size_t SplitMask::count_train() const { return count_set(train); }
std::size_t SplitMask::count_val() const { return count_set(val); }
std::size_t SplitMask::count_test() const { return count_set(test); }

// --- binary little-endian helpers ----------------------------------------------

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  std::string data;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n, const char* what) const {
    if (pos + n > data.size())
      throw IoError(path + ": truncated " + what + " at byte " + std::to_string(pos) +
                    " (need " + std::to_string(n) + " bytes, file has " +
                    std::to_string(data.size() - pos) + " left)");
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint8_t>(data[pos]) |
                      (static_cast<std::uint16_t>(static_cast<std::uint8_t>(data[pos + 1])) << 8);
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  float f32(const char* what) {
    std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  void magic(const char* expect) {
    need(4, "magic");
    if (std::memcmp(data.data() + pos, expect, 4) != 0)
      throw IoError(path + ": bad magic at byte 0, expected '" + expect + "'");
    pos += 4;
  }
  void done() const {
    if (pos != data.size())
      throw IoError(path + ": " + std::to_string(data.size() - pos) +
                    " unexpected trailing bytes at byte " + std::to_string(pos));
  }
};

Reader slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  Reader r;
  r.data = ss.str();
  r.path = path;
  return r;
}

void spill(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to " + path);
}

constexpr std::uint64_t kMaxExtentProduct = 1ull << 34;  // 16 Gi scalars

void check_extents(const Reader& r, std::uint64_t a, std::uint64_t b, std::uint64_t c,
                   std::size_t at) {
  if (a == 0 || b == 0 || c == 0 || a * b > kMaxExtentProduct ||
      a * b * c > kMaxExtentProduct)
    throw IoError(r.path + ": extent overflow at byte " + std::to_string(at));
}

}  // namespace

void write_cube(const Cube& cube, const std::string& path) {
  if (cube.values.rank() != 3 || cube.bands() == 0)
    throw ShapeError("write_cube: want non-empty [C,H,W]");
  std::string out;
  out.reserve(18 + cube.values.numel() * 4);
  out += "HSIC";
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(cube.bands()));
  put_u32(out, static_cast<std::uint32_t>(cube.height()));
  put_u32(out, static_cast<std::uint32_t>(cube.width()));
  for (std::size_t i = 0; i < cube.values.numel(); ++i)
    put_f32(out, static_cast<float>(cube.values[i]));
  spill(path, out);
}

Cube read_cube(const std::string& path) {
  Reader r = slurp(path);
  r.magic("HSIC");
  std::uint16_t version = r.u16("version");
  if (version != 1)
    throw IoError(path + ": unsupported HSIC version " + std::to_string(version) + " at byte 4");
  std::size_t extent_at = r.pos;
  std::uint32_t c = r.u32("band extent");
  std::uint32_t h = r.u32("height extent");
  std::uint32_t w = r.u32("width extent");
  check_extents(r, c, h, w, extent_at);
  std::size_t n = static_cast<std::size_t>(c) * h * w;
  r.need(n * 4, "cube payload");
  Cube cube;
  cube.values = NdArray({c, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    float v = r.f32("cube payload");
    if (!std::isfinite(v))
      throw IoError(path + ": non-finite value at byte " + std::to_string(r.pos - 4));
    cube.values[i] = v;
  }
  r.done();
  return cube;
}

void write_labels(const LabelMap& labels, const std::string& path) {
  if (labels.labels.size() != labels.height * labels.width)
    throw ShapeError("write_labels: buffer does not match extents");
  std::string out;
  out.reserve(14 + labels.labels.size() * 2);
  out += "HSIL";
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(labels.height));
  put_u32(out, static_cast<std::uint32_t>(labels.width));
  for (std::uint16_t v : labels.labels) put_u16(out, v);
  spill(path, out);
}

LabelMap read_labels(const std::string& path) {
  Reader r = slurp(path);
  r.magic("HSIL");
  std::uint16_t version = r.u16("version");
  if (version != 1)
    throw IoError(path + ": unsupported HSIL version " + std::to_string(version) + " at byte 4");
  std::size_t extent_at = r.pos;
  std::uint32_t h = r.u32("height extent");
  std::uint32_t w = r.u32("width extent");
  check_extents(r, h, w, 1, extent_at);
  LabelMap m;
  m.height = h;
  m.width = w;
  m.labels.resize(static_cast<std::size_t>(h) * w);
  r.need(m.labels.size() * 2, "label payload");
  for (auto& v : m.labels) v = r.u16("label payload");
  r.done();
  return m;
}

// --- splitting --------------------------------------------------------------------

SplitOverrides load_split_overrides(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  SplitOverrides ov;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::string body = line.substr(0, line.find('#'));
    if (body.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(body);
    long cls, tr, va;
    if (!(ss >> cls >> tr >> va) || cls < 1 || tr < 0 || va < 0)
      throw IoError(path + " line " + std::to_string(lineno) +
                    ": expected `class_index train_n val_n`");
    std::string rest;
    if (ss >> rest)
      throw IoError(path + " line " + std::to_string(lineno) + ": trailing token '" + rest + "'");
    ov[static_cast<int>(cls)] = {static_cast<int>(tr), static_cast<int>(va)};
  }
  return ov;
}

SplitMask stratified_split(const LabelMap& labels, int train_n, int val_n,
                           const SplitOverrides& overrides, std::uint64_t seed) {
  if (train_n < 1 || val_n < 0) throw ParamError("stratified_split: bad default counts");
  std::size_t k = labels.num_classes();
  SplitMask m;
  m.height = labels.height;
  m.width = labels.width;
  std::size_t n = labels.labels.size();
  m.train.assign(n, 0);
  m.val.assign(n, 0);
  m.test.assign(n, 0);

  std::vector<std::vector<std::size_t>> members(k + 1);
  for (std::size_t i = 0; i < n; ++i)
    if (labels.labels[i] > 0) members[labels.labels[i]].push_back(i);

  Rng root(seed);
  for (std::size_t cls = 1; cls <= k; ++cls) {
    auto& idx = members[cls];
    if (idx.empty()) continue;
    if (idx.size() < 3)
      throw SplitError("class " + std::to_string(cls) + " has only " +
                       std::to_string(idx.size()) + " labeled pixels (need >= 3)");
    int want_tr = train_n, want_va = val_n;
    auto it = overrides.find(static_cast<int>(cls));
    if (it != overrides.end()) {
      want_tr = it->second.first;
      want_va = it->second.second;
    }
    std::size_t n_tr = std::min<std::size_t>(want_tr, idx.size() - 2);
    std::size_t n_va = std::min<std::size_t>(want_va, idx.size() - n_tr - 1);

    Rng rng = root.derive("split-class", cls);
    for (std::size_t i = idx.size(); i-- > 1;)
      std::swap(idx[i], idx[rng.below(i + 1)]);

    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (i < n_tr)
        m.train[idx[i]] = 1;
      else if (i < n_tr + n_va)
        m.val[idx[i]] = 1;
      else
        m.test[idx[i]] = 1;
    }
  }
  return m;
}

// --- synthetic scenes ----------------------------------------------------------------

SynthScene synth_scene(std::size_t height, std::size_t width, std::size_t bands,
                       std::size_t num_classes, double noise_sigma, std::uint64_t seed) {
  if (height == 0 || width == 0 || bands == 0 || num_classes == 0)
    throw ParamError("synth_scene: extents must be >= 1");
  if (num_classes > height * width)
    throw ParamError("synth_scene: more classes than pixels");
  if (noise_sigma < 0) throw ParamError("synth_scene: negative noise");

  Rng root(seed);
  std::size_t k = num_classes, c = bands;

  // distinct Voronoi seed pixels
  Rng vr = root.derive("voronoi");
  std::vector<std::size_t> centers;
  while (centers.size() < k) {
    std::size_t p = vr.below(height * width);
    if (std::find(centers.begin(), centers.end(), p) == centers.end()) centers.push_back(p);
  }

  SynthScene scene;
  scene.labels.height = height;
  scene.labels.width = width;
  scene.labels.labels.resize(height * width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t best = 0;
      long bd = -1;
      for (std::size_t i = 0; i < k; ++i) {
        long cy = static_cast<long>(centers[i] / width), cx = static_cast<long>(centers[i] % width);
        long dy = static_cast<long>(y) - cy, dx = static_cast<long>(x) - cx;
        long d2 = dy * dy + dx * dx;
        if (bd < 0 || d2 < bd) {
          bd = d2;
          best = i;
        }
      }
      scene.labels.labels[y * width + x] = static_cast<std::uint16_t>(best + 1);
    }

  // smooth two-bump signatures; first bump center stratified over the band
  // axis so classes stay discriminable
  Rng sr = root.derive("signatures");
  scene.signatures = NdArray({k, c});
  double cd = static_cast<double>(c);
  for (std::size_t cls = 0; cls < k; ++cls) {
    // primary bump centers stratified over the band axis keep classes apart
    double mu1 = (static_cast<double>(cls) + 0.5) / static_cast<double>(k) * (cd - 1.0) +
                 sr.uniform(-0.1, 0.1) * cd / static_cast<double>(k);
    double s1 = std::max(0.6, sr.uniform(cd / 16.0, cd / 10.0));
    double a1 = sr.uniform(0.7, 1.0);
    double mu2 = sr.uniform(0.0, cd - 1.0);
    double s2 = std::max(0.6, sr.uniform(cd / 16.0, cd / 8.0));
    double a2 = sr.uniform(0.15, 0.35);
    for (std::size_t b = 0; b < c; ++b) {
      double db = static_cast<double>(b);
      double v = 0.1 + a1 * std::exp(-0.5 * (db - mu1) * (db - mu1) / (s1 * s1)) +
                 a2 * std::exp(-0.5 * (db - mu2) * (db - mu2) / (s2 * s2));
      scene.signatures[cls * c + b] = v;
    }
  }

  Rng nr = root.derive("noise");
  scene.cube.values = NdArray({c, height, width});
  for (std::size_t b = 0; b < c; ++b)
    for (std::size_t p = 0; p < height * width; ++p) {
      std::size_t cls = scene.labels.labels[p] - 1;
      double v = scene.signatures[cls * c + b];
      if (noise_sigma > 0) v += noise_sigma * nr.normal();
      // round through f32 so HSIC files round-trip bit-exactly
      scene.cube.values[b * height * width + p] = static_cast<float>(v);
    }
  return scene;
}

Cube normalize(const Cube& cube) {
  Cube out;
  out.values = NdArray(cube.values.shape());
  std::size_t s = cube.height() * cube.width();
  for (std::size_t b = 0; b < cube.bands(); ++b) {
    const double* src = cube.values.data() + b * s;
    double* dst = out.values.data() + b * s;
    double lo = src[0], hi = src[0];
    for (std::size_t p = 1; p < s; ++p) {
      lo = std::min(lo, src[p]);
      hi = std::max(hi, src[p]);
    }
    double range = hi - lo;
    for (std::size_t p = 0; p < s; ++p)
      dst[p] = range > 0 ? static_cast<float>((src[p] - lo) / range) : 0.0;
  }
  return out;
}

NormalizeMode normalize_mode_from_string(const std::string& s) {
  if (s == "minmax") return NormalizeMode::MinMax;
  if (s == "zscore") return NormalizeMode::ZScore;
  if (s == "none") return NormalizeMode::None;
  throw ConfigError("unknown normalize mode '" + s + "' (want minmax|zscore|none)");
}

std::string to_string(NormalizeMode m) {
  switch (m) {
    case NormalizeMode::MinMax: return "minmax";
    case NormalizeMode::ZScore: return "zscore";
    case NormalizeMode::None: return "none";
  }
  return "?";
}

Cube normalize(const Cube& cube, NormalizeMode mode) {
  if (mode == NormalizeMode::MinMax) return normalize(cube);
  if (mode == NormalizeMode::None) return cube;
  Cube out;
  out.values = NdArray(cube.values.shape());
  std::size_t s = cube.height() * cube.width();
  for (std::size_t b = 0; b < cube.bands(); ++b) {
    const double* src = cube.values.data() + b * s;
    double* dst = out.values.data() + b * s;
    double mean = 0.0;
    for (std::size_t p = 0; p < s; ++p) mean += src[p];
    mean /= static_cast<double>(s);
    double var = 0.0;
    for (std::size_t p = 0; p < s; ++p) var += (src[p] - mean) * (src[p] - mean);
    var /= static_cast<double>(s);
    double sd = std::sqrt(var);
    for (std::size_t p = 0; p < s; ++p)
      dst[p] = sd > 0 ? static_cast<float>((src[p] - mean) / sd) : 0.0;
  }
  return out;
}

}  // namespace hsmamba
