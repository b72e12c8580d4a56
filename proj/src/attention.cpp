#include "hsmamba/attention.hpp"

#include <cmath>

#include "hsmamba/ops.hpp"

namespace hsmamba {

namespace {

NdArray uniform_fan_in(Shape shape, std::size_t fan_in, Rng rng) {
  double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
  NdArray a(std::move(shape));
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.uniform(-k, k);
  return a;
}

}  // namespace

StageGateParams make_stage_gates(ParamStore& store, const std::string& prefix,
                                 std::size_t d_model, std::size_t tau, const Rng& rng) {
  if (tau == 0 || d_model % tau != 0)
    throw ConfigError("gates: embed dim " + std::to_string(d_model) +
                      " not divisible by tau = " + std::to_string(tau));
  std::size_t dr = d_model / tau;
  StageGateParams g;
  g.spectral.tau = tau;
  g.spectral.reduce_kernel = &store.create(
      prefix + ".spe.reduce_k", uniform_fan_in({dr, 2 * d_model}, 2 * d_model,
                                               rng.derive(prefix + ".spe.reduce_k")));
  g.spectral.reduce_bias = &store.create(prefix + ".spe.reduce_b", NdArray({dr}));
  g.spectral.expand_kernel = &store.create(
      prefix + ".spe.expand_k", uniform_fan_in({d_model, dr}, dr,
                                               rng.derive(prefix + ".spe.expand_k")));
  g.spectral.expand_bias = &store.create(prefix + ".spe.expand_b", NdArray({d_model}));
  g.spatial.kernel = &store.create(
      prefix + ".spa.kernel", uniform_fan_in({1, 2, 3, 3}, 18, rng.derive(prefix + ".spa.kernel")));
  return g;
}

VarId spectral_gate(Tape& t, VarId f, const SpectralGateParams& p) {
  VarId avg = global_avg_pool(t, f);
  VarId mx = global_max_pool(t, f);
  VarId cat = concat(t, 0, {avg, mx});  // [2D,1,1]
  VarId r = pointwise_conv(t, cat, t.param(*p.reduce_kernel), t.param(*p.reduce_bias));
  VarId e = pointwise_conv(t, silu(t, r), t.param(*p.expand_kernel), t.param(*p.expand_bias));
  return sigmoid(t, e);
}

VarId spatial_gate(Tape& t, VarId f, const SpatialGateParams& p) {
  VarId mean = channel_mean(t, f);
  VarId mx = channel_max(t, f);
  VarId cat = concat(t, 0, {mean, mx});  // [2,H,W]
  VarId c = dilated_conv3x3(t, cat, t.param(*p.kernel), 2);
  return sigmoid(t, silu(t, c));
}

std::pair<VarId, VarId> apply_global_gates(Tape& t, VarId f_spe, VarId f_spa, VarId w_spe,
                                           VarId w_spa) {
  VarId spe = mul_broadcast(t, f_spe, affine_scalar(t, w_spe, 1.0, 1.0));
  VarId spa = mul_broadcast(t, f_spa, affine_scalar(t, w_spa, 1.0, 1.0));
  return {spe, spa};
}

}  // namespace hsmamba
