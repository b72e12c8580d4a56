#include "hsmamba/encoder.hpp"

#include <cmath>
#include <iostream>
#include <memory>

#include "hsmamba/ops.hpp"

namespace hsmamba {

PatchGrid patchify(const NdArray& f, std::size_t patch) {
  if (patch == 0) throw ParamError("patchify: patch size must be >= 1");
  if (f.rank() != 3) throw ShapeError("patchify: want [D,H,W]");
  PatchGrid g;
  g.patch = patch;
  std::size_t h = f.extent(1), w = f.extent(2);
  g.rows = (h + patch - 1) / patch;
  g.cols = (w + patch - 1) / patch;
  g.pad_h = g.rows * patch - h;
  g.pad_w = g.cols * patch - w;
  PatchifyOp op(patch);
  std::vector<const NdArray*> in{&f};
  g.patches = op.forward(in);
  return g;
}

NdArray unpatchify(const PatchGrid& grid, std::size_t height, std::size_t width) {
  UnpatchifyOp op(height, width, grid.patch);
  std::vector<const NdArray*> in{&grid.patches};
  return op.forward(in);
}

std::pair<NdArray, NdArray> flatten_dual(const NdArray& token) {
  if (token.rank() != 3 || token.extent(1) != token.extent(2))
    throw ShapeError("flatten_dual: want [D,P,P]");
  std::size_t d = token.extent(0), p2 = token.extent(1) * token.extent(2);
  NdArray spe = token.reshaped({d, p2});  // row-major pixel order per band
  NdArray spa({p2, d});
  for (std::size_t b = 0; b < d; ++b)
    for (std::size_t p = 0; p < p2; ++p) spa[p * d + b] = spe[b * p2 + p];
  return {std::move(spe), std::move(spa)};
}

std::vector<NdArray> group_split(const NdArray& x, std::size_t n_groups) {
  if (x.rank() != 2) throw ShapeError("group_split: want [L,C]");
  std::size_t c = x.extent(1);
  if (n_groups == 0 || c % n_groups != 0)
    throw ConfigError("group_split: " + std::to_string(c) + " channels are not divisible into " +
                      std::to_string(n_groups) + " groups");
  std::size_t dg = c / n_groups, len = x.extent(0);
  std::vector<NdArray> parts;
  parts.reserve(n_groups);
  for (std::size_t i = 0; i < n_groups; ++i) {
    NdArray part({len, dg});
    for (std::size_t l = 0; l < len; ++l)
      std::copy_n(x.data() + l * c + i * dg, dg, part.data() + l * dg);
    parts.push_back(std::move(part));
  }
  return parts;
}

std::size_t effective_group_count(std::size_t channels, std::size_t requested) {
  if (channels == 0) throw ConfigError("effective_group_count: zero channels");
  std::size_t g = std::min(channels, std::max<std::size_t>(requested, 1));
  while (channels % g != 0) --g;
  return g;
}

NdArray cosine_positional_encoding(std::size_t seq_len, std::size_t channels) {
  NdArray pe({seq_len, channels});
  for (std::size_t pos = 0; pos < seq_len; ++pos)
    for (std::size_t k = 0; 2 * k < channels; ++k) {
      double freq = std::pow(10000.0, static_cast<double>(2 * k) / static_cast<double>(channels));
      double angle = static_cast<double>(pos) / freq;
      pe[pos * channels + 2 * k] = std::sin(angle);
      if (2 * k + 1 < channels) pe[pos * channels + 2 * k + 1] = std::cos(angle);
    }
  return pe;
}

std::vector<StagePlanEntry> stage_plan(std::size_t height, std::size_t width,
                                       std::size_t base_patch) {
  if (base_patch == 0) throw ParamError("stage_plan: base patch must be >= 1");
  if (base_patch < 4)
    std::cerr << "[hsmamba] note: base patch " << base_patch
              << " < 4, stage-3 patches collapse to 1 pixel\n";
  std::vector<StagePlanEntry> plan;
  std::size_t h = height, w = width, p = base_patch;
  for (int i = 0; i < 3; ++i) {
    plan.push_back({h, w, std::max<std::size_t>(p, 1)});
    h = (h + 1) / 2;
    w = (w + 1) / 2;
    p = std::max<std::size_t>(p / 2, 1);
  }
  return plan;
}

namespace {

ScanGroupParams make_group(ParamStore& store, const std::string& prefix, std::size_t dg,
                           std::size_t state, const Rng& rng) {
  SsmParams init = SsmParams::init(dg, state, rng.derive(prefix));
  ScanGroupParams p;
  p.log_a = &store.create(prefix + ".log_a", std::move(init.log_a));
  p.w_b = &store.create(prefix + ".w_b", std::move(init.w_b));
  p.w_c = &store.create(prefix + ".w_c", std::move(init.w_c));
  p.w_delta = &store.create(prefix + ".w_delta", std::move(init.w_delta));
  p.b_delta = &store.create(prefix + ".b_delta", std::move(init.b_delta));
  p.d_skip = &store.create(prefix + ".d_skip", std::move(init.d_skip));
  return p;
}

DomainEncoderParams make_domain(ParamStore& store, const std::string& prefix,
                                std::size_t channels, std::size_t requested_groups,
                                std::size_t state, const Rng& rng) {
  std::size_t groups = effective_group_count(channels, requested_groups);
  if (groups != requested_groups)
    std::cerr << "[hsmamba] note: " << prefix << ": falling back to " << groups
              << " groups (requested " << requested_groups << ", channels " << channels << ")\n";
  DomainEncoderParams dp;
  dp.group_dim = channels / groups;
  dp.groups.reserve(groups);
  for (std::size_t i = 0; i < groups; ++i)
    dp.groups.push_back(make_group(store, prefix + ".g" + std::to_string(i), dp.group_dim,
                                   state, rng));
  dp.group_weights = &store.create(prefix + ".w", NdArray::full({groups}, 1.0));
  return dp;
}

}  // namespace

StageEncoderParams make_stage_encoder(ParamStore& store, const std::string& prefix,
                                      std::size_t d_model, std::size_t patch,
                                      std::size_t groups_spe, std::size_t groups_spa,
                                      std::size_t state, bool exact_zoh, const Rng& rng) {
  StageEncoderParams sp;
  sp.patch = patch;
  sp.state = state;
  sp.exact_zoh = exact_zoh;
  sp.spectral = make_domain(store, prefix + ".spe", patch * patch, groups_spe, state, rng);
  sp.spatial = make_domain(store, prefix + ".spa", d_model, groups_spa, state, rng);
  return sp;
}

EncoderStageInfo stage_encoder_info(const StageEncoderParams& p, std::size_t d_model) {
  EncoderStageInfo info;
  info.patch = p.patch;
  info.groups_spe = p.spectral.groups.size();
  info.dim_spe = p.spectral.group_dim;
  info.groups_spa = p.spatial.groups.size();
  info.dim_spa = p.spatial.group_dim;
  if (info.groups_spe * info.dim_spe != p.patch * p.patch)
    throw ConfigError("stage encoder: spectral grouping does not cover P^2");
  if (info.groups_spa * info.dim_spa != d_model)
    throw ConfigError("stage encoder: spatial grouping does not cover D");
  return info;
}

VarId multi_group_scan(Tape& t, VarId seq, const DomainEncoderParams& dp, std::size_t state,
                       bool exact_zoh) {
  const NdArray& v = t.value(seq);
  if (v.rank() != 3) throw ShapeError("multi_group_scan: want [B,L,C]");
  std::size_t c = v.extent(2);
  std::size_t n_groups = dp.groups.size();
  if (n_groups == 0 || c != n_groups * dp.group_dim)
    throw ConfigError("multi_group_scan: " + std::to_string(c) + " channels vs " +
                      std::to_string(n_groups) + " groups of " + std::to_string(dp.group_dim));
  VarId w = t.param(*dp.group_weights);
  std::vector<VarId> parts;
  parts.reserve(n_groups);
  for (std::size_t i = 0; i < n_groups; ++i) {
    const ScanGroupParams& gp = dp.groups[i];
    VarId x = n_groups == 1 ? seq : slice_axis(t, seq, 2, i * dp.group_dim, dp.group_dim);
    VarId y = selective_scan(t, x, t.param(*gp.log_a), t.param(*gp.w_b), t.param(*gp.w_c),
                             t.param(*gp.w_delta), t.param(*gp.b_delta), t.param(*gp.d_skip),
                             state, exact_zoh);
    parts.push_back(scale_by_weight_entry(t, y, w, i));
  }
  return n_groups == 1 ? parts[0] : concat(t, 2, parts);
}

std::pair<VarId, VarId> encoder_forward(Tape& t, VarId f, const StageEncoderParams& params,
                                        bool use_pos_encoding) {
  const NdArray& v = t.value(f);
  if (v.rank() != 3) throw ShapeError("encoder_forward: want [D,H,W]");
  std::size_t d = v.extent(0), h = v.extent(1), w = v.extent(2), p = params.patch;
  std::size_t rows = (h + p - 1) / p, cols = (w + p - 1) / p, np = rows * cols;

  VarId patches = t.apply(std::make_shared<PatchifyOp>(p), {f});  // [Np,D,P,P]
  VarId spe = reshape(t, patches, {np, d, p * p});                // band axis is the sequence
  VarId spa = transpose_last2(t, spe);                            // pixel axis is the sequence

  if (use_pos_encoding) {
    spe = add_broadcast(t, spe,
                        t.constant(cosine_positional_encoding(d, p * p).reshaped({1, d, p * p})));
    spa = add_broadcast(t, spa,
                        t.constant(cosine_positional_encoding(p * p, d).reshaped({1, p * p, d})));
  }

  VarId spe_out = multi_group_scan(t, spe, params.spectral, params.state, params.exact_zoh);
  VarId spa_out = multi_group_scan(t, spa, params.spatial, params.state, params.exact_zoh);

  VarId spe_tok = reshape(t, spe_out, {np, d, p, p});
  VarId spa_tok = reshape(t, transpose_last2(t, spa_out), {np, d, p, p});
  VarId spe_map = t.apply(std::make_shared<UnpatchifyOp>(h, w, p), {spe_tok});
  VarId spa_map = t.apply(std::make_shared<UnpatchifyOp>(h, w, p), {spa_tok});
  return {spe_map, spa_map};
}

}  // namespace hsmamba
