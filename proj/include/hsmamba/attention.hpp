#pragma once

#include <string>
#include <utility>

#include "hsmamba/rng.hpp"
#include "hsmamba/tape.hpp"

namespace hsmamba {

// Whole-image gating: a channel gate from dual global pooling through a
// bottleneck (reduction ratio tau), and a spatial gate from channel pooling
// through one dilated 3x3 convolution. Both squash to (0,1) and enter the
// trunk as residual multipliers F ⊙ (1 + gate).

struct SpectralGateParams {
  Parameter* reduce_kernel;  // [D/tau, 2D]
  Parameter* reduce_bias;    // [D/tau]
  Parameter* expand_kernel;  // [D, D/tau]
  Parameter* expand_bias;    // [D]
  std::size_t tau;
};

struct SpatialGateParams {
  Parameter* kernel;  // [1,2,3,3], dilation 2
};

struct StageGateParams {
  SpectralGateParams spectral;
  SpatialGateParams spatial;
};

StageGateParams make_stage_gates(ParamStore& store, const std::string& prefix,
                                 std::size_t d_model, std::size_t tau, const Rng& rng);

// channel weights [D,1,1] in (0,1); invariant to spatial permutations of f
VarId spectral_gate(Tape& t, VarId f, const SpectralGateParams& p);

// spatial weights [1,H,W] in (0,1)
VarId spatial_gate(Tape& t, VarId f, const SpatialGateParams& p);

// f_spe ⊙ (1 + w_spe) broadcast over space, f_spa ⊙ (1 + w_spa) broadcast
// over channels
std::pair<VarId, VarId> apply_global_gates(Tape& t, VarId f_spe, VarId f_spa, VarId w_spe,
                                           VarId w_spa);

}  // namespace hsmamba
