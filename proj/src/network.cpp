#include "hsmamba/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hsmamba/ops.hpp"

namespace hsmamba {

FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "gated") return FusionMode::Gated;
  if (s == "sum") return FusionMode::Sum;
  if (s == "adaptive_sum") return FusionMode::AdaptiveSum;
  if (s == "concat") return FusionMode::Concat;
  throw ConfigError("unknown fusion mode '" + s +
                    "' (want gated|sum|adaptive_sum|concat)");
}

std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::Gated: return "gated";
    case FusionMode::Sum: return "sum";
    case FusionMode::AdaptiveSum: return "adaptive_sum";
    case FusionMode::Concat: return "concat";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
  if (embed_dim == 0 || gn_groups == 0 || tau == 0 || state_dim == 0 || base_patch == 0)
    throw ConfigError("model: extents must be >= 1");
  if (embed_dim % gn_groups != 0)
    throw ConfigError("model: embed_dim " + std::to_string(embed_dim) +
                      " not divisible by gn_groups " + std::to_string(gn_groups));
  if (use_lgi && embed_dim % tau != 0)
    throw ConfigError("model: embed_dim " + std::to_string(embed_dim) +
                      " not divisible by tau " + std::to_string(tau));
}

VarId fuse(Tape& t, VarId f_spe, VarId f_spa, FusionMode mode, const FusionParams& p) {
  if (!t.value(f_spe).same_shape(t.value(f_spa)))
    throw ShapeError("fuse: branch shapes differ");
  switch (mode) {
    case FusionMode::Sum:
      return add(t, f_spe, f_spa);
    case FusionMode::AdaptiveSum: {
      VarId mix = t.param(*p.mix);
      return add(t, scale_by_weight_entry(t, f_spe, mix, 0),
                 scale_by_weight_entry(t, f_spa, mix, 1));
    }
    case FusionMode::Concat: {
      VarId cat = concat(t, 0, {f_spe, f_spa});
      return pointwise_conv(t, cat, t.param(*p.proj_kernel), t.param(*p.proj_bias));
    }
    case FusionMode::Gated: {
      VarId cat = concat(t, 0, {f_spe, f_spa});
      VarId w = sigmoid(t, pointwise_conv(t, cat, t.param(*p.gate_kernel),
                                          t.param(*p.gate_bias)));  // [1,H,W]
      VarId a = mul_broadcast(t, f_spe, w);
      VarId b = mul_broadcast(t, f_spa, affine_scalar(t, w, -1.0, 1.0));
      return add(t, a, b);
    }
  }
  throw ConfigError("fuse: unknown mode");
}

namespace {

NdArray uniform_fan_in(Shape shape, std::size_t fan_in, Rng rng) {
  double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
  NdArray a(std::move(shape));
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.uniform(-k, k);
  return a;
}

void trace_entry(ForwardTrace* trace, const Tape& t, const std::string& name, VarId id) {
  if (!trace) return;
  const NdArray& v = t.value(id);
  ForwardTrace::Entry e;
  e.name = name;
  e.shape = v.shape();
  e.vmin = v.numel() ? v[0] : 0.0;
  e.vmax = e.vmin;
  double acc = 0.0;
  for (std::size_t i = 0; i < v.numel(); ++i) {
    e.vmin = std::min(e.vmin, v[i]);
    e.vmax = std::max(e.vmax, v[i]);
    acc += v[i];
  }
  e.vmean = v.numel() ? acc / static_cast<double>(v.numel()) : 0.0;
  trace->entries.push_back(std::move(e));
}

}  // namespace

Network::Network(ModelConfig cfg, std::size_t in_bands, std::uint64_t seed)
    : cfg_(cfg), in_bands_(in_bands) {
  cfg_.validate();
  if (in_bands == 0) throw ConfigError("model: in_bands must be >= 1");
  Rng rng(seed);
  std::size_t d = cfg_.embed_dim;

  embed_kernel_ = &store_.create("embed.kernel",
                                 uniform_fan_in({d, in_bands}, in_bands, rng.derive("embed.kernel")));
  embed_bias_ = &store_.create("embed.bias", NdArray({d}));
  embed_gn_scale_ = &store_.create("embed.gn_scale", NdArray::full({d}, 1.0));
  embed_gn_shift_ = &store_.create("embed.gn_shift", NdArray({d}));

  // patch sizes halve per stage; spatial halving happens between blocks
  std::size_t patch = cfg_.base_patch;
  for (std::size_t i = 0; i < 3; ++i) {
    std::string prefix = "stage" + std::to_string(i + 1);
    stages_.push_back(make_stage_encoder(store_, prefix + ".enc", d, std::max<std::size_t>(patch, 1),
                                         cfg_.groups_spe, cfg_.groups_spa, cfg_.state_dim,
                                         cfg_.exact_zoh, rng));
    if (cfg_.use_lgi)
      gates_.push_back(make_stage_gates(store_, prefix + ".lgi", d, cfg_.tau, rng));
    FusionParams fp;
    switch (cfg_.fusion) {
      case FusionMode::Gated:
        fp.gate_kernel = &store_.create(prefix + ".fuse.kernel",
                                        uniform_fan_in({1, 2 * d}, 2 * d,
                                                       rng.derive(prefix + ".fuse.kernel")));
        fp.gate_bias = &store_.create(prefix + ".fuse.bias", NdArray({1}));
        break;
      case FusionMode::AdaptiveSum:
        fp.mix = &store_.create(prefix + ".fuse.mix", NdArray::full({2}, 0.5));
        break;
      case FusionMode::Concat:
        fp.proj_kernel = &store_.create(prefix + ".fuse.kernel",
                                        uniform_fan_in({d, 2 * d}, 2 * d,
                                                       rng.derive(prefix + ".fuse.kernel")));
        fp.proj_bias = &store_.create(prefix + ".fuse.bias", NdArray({d}));
        break;
      case FusionMode::Sum:
        break;
    }
    fusions_.push_back(fp);
    patch = std::max<std::size_t>(patch / 2, 1);
  }

  cls_kernel1_ = &store_.create("classifier.kernel1",
                                uniform_fan_in({d, 3 * d}, 3 * d,
                                               rng.derive("classifier.kernel1")));
  cls_bias1_ = &store_.create("classifier.bias1", NdArray({d}));
  cls_gn_scale_ = &store_.create("classifier.gn_scale", NdArray::full({d}, 1.0));
  cls_gn_shift_ = &store_.create("classifier.gn_shift", NdArray({d}));
  cls_kernel2_ = &store_.create("classifier.kernel2",
                                uniform_fan_in({cfg_.num_classes, d}, d,
                                               rng.derive("classifier.kernel2")));
  cls_bias2_ = &store_.create("classifier.bias2", NdArray({cfg_.num_classes}));
}

VarId Network::embed(Tape& t, VarId raw) const {
  VarId c = pointwise_conv(t, raw, t.param(*embed_kernel_), t.param(*embed_bias_));
  VarId n = group_norm(t, c, cfg_.gn_groups, t.param(*embed_gn_scale_), t.param(*embed_gn_shift_));
  return silu(t, n);
}

VarId Network::block(Tape& t, VarId f, std::size_t stage, ForwardTrace* trace) const {
  if (stage >= stages_.size()) throw ConfigError("block: stage out of range");
  auto [f_spe, f_spa] = encoder_forward(t, f, stages_[stage], cfg_.use_pos_encoding);
  std::string prefix = "stage" + std::to_string(stage + 1);
  trace_entry(trace, t, prefix + ".spe", f_spe);
  trace_entry(trace, t, prefix + ".spa", f_spa);
  if (cfg_.use_lgi) {
    VarId w_spe = spectral_gate(t, f, gates_[stage].spectral);
    VarId w_spa = spatial_gate(t, f, gates_[stage].spatial);
    std::tie(f_spe, f_spa) = apply_global_gates(t, f_spe, f_spa, w_spe, w_spa);
  }
  VarId fused = fuse(t, f_spe, f_spa, cfg_.fusion, fusions_[stage]);
  trace_entry(trace, t, prefix + ".fused", fused);
  return add(t, f, fused);  // residual trunk
}

VarId Network::classify(Tape& t, VarId f) const {
  VarId c1 = pointwise_conv(t, f, t.param(*cls_kernel1_), t.param(*cls_bias1_));
  VarId n = group_norm(t, c1, cfg_.gn_groups, t.param(*cls_gn_scale_), t.param(*cls_gn_shift_));
  return pointwise_conv(t, silu(t, n), t.param(*cls_kernel2_), t.param(*cls_bias2_));
}

VarId Network::forward(Tape& t, const NdArray& cube, ForwardTrace* trace) const {
  if (cube.rank() != 3 || cube.extent(0) != in_bands_)
    throw ShapeError("forward: cube must be [" + std::to_string(in_bands_) + ",H,W]");
  std::size_t h = cube.extent(1), w = cube.extent(2);
  VarId x = embed(t, t.constant(cube));
  trace_entry(trace, t, "embed", x);
  VarId f1 = block(t, x, 0, trace);
  VarId f2 = block(t, avg_pool2x2(t, f1), 1, trace);
  VarId f3 = block(t, avg_pool2x2(t, f2), 2, trace);
  // merge every stage back at the input grid; the deep stages alone would pin
  // logits to 4x4 pixel blocks, and a plain sum would let their block-constant
  // context drown the per-pixel features, so the head gets them as channels
  VarId up2 = crop_hw(t, upsample_nearest(t, f2, 2), h, w);
  VarId up4 = crop_hw(t, upsample_nearest(t, f3, 4), h, w);
  VarId merged = concat(t, 0, {f1, up2, up4});
  trace_entry(trace, t, "upsampled", merged);
  VarId logits = classify(t, merged);
  trace_entry(trace, t, "logits", logits);
  return logits;
}

EncoderStageInfo Network::stage_info(std::size_t stage) const {
  if (stage >= stages_.size()) throw ConfigError("stage_info: stage out of range");
  return stage_encoder_info(stages_[stage], cfg_.embed_dim);
}

Network::FlopEstimate Network::flop_estimate(std::size_t height, std::size_t width) const {
  FlopEstimate fe;
  double d = static_cast<double>(cfg_.embed_dim);
  double n = static_cast<double>(cfg_.state_dim);
  double hw = static_cast<double>(height * width);

  fe.total += 2.0 * static_cast<double>(in_bands_) * d * hw;  // embed conv
  fe.total += 9.0 * d * hw;                                   // GN + SiLU

  std::size_t hh = height, ww = width;
  for (std::size_t i = 0; i < 3; ++i) {
    const StageEncoderParams& sp = stages_[i];
    double p = static_cast<double>(sp.patch);
    double rows = std::ceil(static_cast<double>(hh) / p);
    double cols = std::ceil(static_cast<double>(ww) / p);
    double np = rows * cols;
    double shw = static_cast<double>(hh) * static_cast<double>(ww);
    // per-domain grouped scan: for sequence length L with C channels,
    // projections cost 2C(2N + Dg) per token and the recurrence about 8CN
    auto domain_cost = [&](double len, double c, double dg) {
      return np * len * c * (4.0 * n + 2.0 * dg + 8.0 * n);
    };
    fe.total += domain_cost(d, p * p, static_cast<double>(sp.spectral.group_dim));
    fe.total += domain_cost(p * p, d, static_cast<double>(sp.spatial.group_dim));
    if (cfg_.use_lgi) {
      double gate = 4.0 * d * shw                          // four pooling passes
                    + 2.0 * (2.0 * d * d / cfg_.tau) * 2.0  // bottleneck convs
                    + 2.0 * 18.0 * shw                      // dilated 3x3 over 2 channels
                    + 4.0 * d * shw;                        // two gating multiplies
      fe.gates += gate;
      fe.total += gate;
    }
    switch (cfg_.fusion) {
      case FusionMode::Gated: fe.total += (2.0 * 2.0 * d + 4.0) * shw; break;
      case FusionMode::Concat: fe.total += 2.0 * 2.0 * d * d * shw; break;
      default: fe.total += 2.0 * d * shw; break;
    }
    fe.total += d * shw;  // residual
    hh = (hh + 1) / 2;
    ww = (ww + 1) / 2;
  }

  fe.total += 2.0 * (3.0 * d) * d * hw + 9.0 * d * hw;               // head conv + GN/SiLU
  fe.total += 2.0 * d * static_cast<double>(cfg_.num_classes) * hw;  // logits conv
  return fe;
}

// --- checkpoints -------------------------------------------------------------

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct CkptReader {
  std::string data;
  std::size_t pos = 0;
  std::string path;

  bool eof() const { return pos == data.size(); }
  void need(std::size_t n, const char* what) const {
    if (pos + n > data.size())
      throw IoError(path + ": truncated " + what + " at byte " + std::to_string(pos));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64(const char* what) {
    std::uint64_t bits = u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
};

}  // namespace

void save_checkpoint(const ParamStore& store, const std::string& path) {
  std::string out;
  out += "HSMW";
  put_u32(out, 1);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Parameter& p = store[i];
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_u64(out, p.value.rank());
    for (std::size_t a = 0; a < p.value.rank(); ++a) put_u64(out, p.value.extent(a));
    for (std::size_t j = 0; j < p.value.numel(); ++j) put_f64(out, p.value[j]);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to " + path);
}

void load_checkpoint(ParamStore& store, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  CkptReader r;
  r.data = ss.str();
  r.path = path;
  r.need(4, "magic");
  if (r.data.compare(0, 4, "HSMW") != 0) throw IoError(path + ": bad magic at byte 0");
  r.pos = 4;
  std::uint32_t version = r.u32("version");
  if (version != 1)
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  std::size_t loaded = 0;
  while (!r.eof()) {
    std::uint32_t name_len = r.u32("name length");
    r.need(name_len, "name");
    std::string name = r.data.substr(r.pos, name_len);
    r.pos += name_len;
    std::uint64_t rank = r.u64("rank");
    if (rank > 8) throw IoError(path + ": implausible rank for " + name);
    Shape shape(rank);
    for (std::uint64_t a = 0; a < rank; ++a) shape[a] = r.u64("extent");
    Parameter* p = store.find(name);
    if (!p) throw IoError(path + ": unknown parameter '" + name + "'");
    if (p->value.shape() != shape)
      throw IoError(path + ": shape mismatch for '" + name + "': file " + shape_str(shape) +
                    " vs model " + shape_str(p->value.shape()));
    for (std::size_t j = 0; j < p->value.numel(); ++j) p->value[j] = r.f64("values");
    ++loaded;
  }
  if (loaded != store.size())
    throw IoError(path + ": has " + std::to_string(loaded) + " parameters, model expects " +
                  std::to_string(store.size()));
}

std::vector<std::uint16_t> argmax_labels(const NdArray& logits) {
  if (logits.rank() != 3) throw ShapeError("argmax_labels: want [K,H,W]");
  std::size_t k = logits.extent(0), s = logits.extent(1) * logits.extent(2);
  std::vector<std::uint16_t> out(s);
  for (std::size_t p = 0; p < s; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (logits[c * s + p] > logits[best * s + p]) best = c;
    out[p] = static_cast<std::uint16_t>(best + 1);
  }
  return out;
}

}  // namespace hsmamba
