#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hsmamba/rng.hpp"
#include "hsmamba/ssm.hpp"
#include "hsmamba/tape.hpp"

namespace hsmamba {

// --- patch tiling (plain helpers; the tape ops mirror these exactly) --------

struct PatchGrid {
  NdArray patches;  // [rows*cols, D, P, P]
  std::size_t rows = 0, cols = 0;
  std::size_t pad_h = 0, pad_w = 0;
  std::size_t patch = 0;
};

PatchGrid patchify(const NdArray& f, std::size_t patch);
NdArray unpatchify(const PatchGrid& grid, std::size_t height, std::size_t width);

// token [D,P,P] -> (spe [D,P^2], spa [P^2,D]); pixels enumerated row-major,
// spa is the transpose of spe.
std::pair<NdArray, NdArray> flatten_dual(const NdArray& token);

// contiguous channel blocks of x [L,C]; concatenating the blocks restores x
std::vector<NdArray> group_split(const NdArray& x, std::size_t n_groups);

// largest divisor of `channels` that is <= `requested` (and >= 1)
std::size_t effective_group_count(std::size_t channels, std::size_t requested);

// PE[pos,2k] = sin(pos / 10000^(2k/C)), PE[pos,2k+1] = cos(same)
NdArray cosine_positional_encoding(std::size_t seq_len, std::size_t channels);

// --- stage geometry ----------------------------------------------------------

struct StagePlanEntry {
  std::size_t height, width, patch;
};

// Three stages: spatial extents halve (ceil) between stages, patch sizes halve
// (floor, min 1). Warns on stderr when base_patch < 4 since the last stage
// then degenerates to single-pixel patches.
std::vector<StagePlanEntry> stage_plan(std::size_t height, std::size_t width,
                                       std::size_t base_patch);

// --- multi-group selective scan encoder ---------------------------------------

struct ScanGroupParams {
  Parameter* log_a;
  Parameter* w_b;
  Parameter* w_c;
  Parameter* w_delta;
  Parameter* b_delta;
  Parameter* d_skip;
};

struct DomainEncoderParams {
  std::vector<ScanGroupParams> groups;
  Parameter* group_weights;  // [N_G], init 1
  std::size_t group_dim;     // channels per group
};

struct StageEncoderParams {
  DomainEncoderParams spectral;  // scans along the band axis, pixel channels
  DomainEncoderParams spatial;   // scans along the pixel axis, band channels
  std::size_t patch;
  std::size_t state;
  bool exact_zoh;
};

struct EncoderStageInfo {
  std::size_t patch;
  std::size_t groups_spe, dim_spe;  // N_G * D_G == P^2
  std::size_t groups_spa, dim_spa;  // N_G * D_G == D
};

// Creates all stage parameters in `store` under `prefix`. Group counts fall
// back to the largest divisor of the channel extent; a note goes to stderr
// when that differs from the request.
StageEncoderParams make_stage_encoder(ParamStore& store, const std::string& prefix,
                                      std::size_t d_model, std::size_t patch,
                                      std::size_t groups_spe, std::size_t groups_spa,
                                      std::size_t state, bool exact_zoh, const Rng& rng);

EncoderStageInfo stage_encoder_info(const StageEncoderParams& p, std::size_t d_model);

// grouped scan over seq [B,L,C]: per-group selective scan, scaled by its
// weight, channel-concatenated back to [B,L,C]
VarId multi_group_scan(Tape& t, VarId seq, const DomainEncoderParams& dp, std::size_t state,
                       bool exact_zoh);

// Full dual-domain stage on f [D,H,W]: non-overlapping patches, dual
// flattening, optional additive positional encoding, grouped scans, and
// reassembly. Returns the spectral-branch and spatial-branch maps, both
// [D,H,W].
std::pair<VarId, VarId> encoder_forward(Tape& t, VarId f, const StageEncoderParams& params,
                                        bool use_pos_encoding);

}  // namespace hsmamba
