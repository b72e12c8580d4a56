#pragma once

#include <string>
#include <vector>

#include "hsmamba/attention.hpp"
#include "hsmamba/encoder.hpp"
#include "hsmamba/tape.hpp"

namespace hsmamba {

enum class FusionMode { Gated, Sum, AdaptiveSum, Concat };

FusionMode fusion_mode_from_string(const std::string& s);
std::string to_string(FusionMode m);

struct ModelConfig {
  std::size_t embed_dim = 128;
  std::size_t base_patch = 9;
  std::size_t groups_spe = 16;
  std::size_t groups_spa = 16;
  std::size_t state_dim = 16;
  std::size_t num_classes = 0;
  std::size_t gn_groups = 8;
  std::size_t tau = 4;
  FusionMode fusion = FusionMode::Gated;
  bool use_pos_encoding = true;
  bool use_lgi = true;
  bool exact_zoh = true;

  void validate() const;  // embed_dim % gn_groups == 0, % tau == 0, classes >= 1
};

// Shapes and activation summaries captured along one forward pass.
struct ForwardTrace {
  struct Entry {
    std::string name;
    Shape shape;
    double vmin, vmax, vmean;
  };
  std::vector<Entry> entries;
};

struct FusionParams {
  Parameter* gate_kernel = nullptr;  // gated: [1,2D] + [1]
  Parameter* gate_bias = nullptr;
  Parameter* mix = nullptr;          // adaptive_sum: [2] = {alpha, beta}
  Parameter* proj_kernel = nullptr;  // concat: [D,2D] + [D]
  Parameter* proj_bias = nullptr;
};

// gated:        sigma(conv(cat)) convex combination per pixel
// sum:          f_spe + f_spa
// adaptive_sum: alpha*f_spe + beta*f_spa
// concat:       conv1x1(cat) back to D channels
VarId fuse(Tape& t, VarId f_spe, VarId f_spa, FusionMode mode, const FusionParams& p);

// Three-stage per-pixel classifier: embedding, three dual-domain blocks with
// 2x2 average-pool downsampling in between, x4 nearest upsampling back to the
// input grid, and a two-layer pointwise classifier head.
class Network {
 public:
  Network(ModelConfig cfg, std::size_t in_bands, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::size_t in_bands() const { return in_bands_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

  VarId embed(Tape& t, VarId raw) const;
  VarId block(Tape& t, VarId f, std::size_t stage, ForwardTrace* trace = nullptr) const;
  VarId classify(Tape& t, VarId f) const;

  // cube values [C,H,W] -> logits [num_classes,H,W]
  VarId forward(Tape& t, const NdArray& cube, ForwardTrace* trace = nullptr) const;

  std::size_t count_params() const { return store_.total_scalars(); }

  EncoderStageInfo stage_info(std::size_t stage) const;

  struct FlopEstimate {
    double total = 0;
    double gates = 0;  // LGI share
  };
  FlopEstimate flop_estimate(std::size_t height, std::size_t width) const;

 private:
  ModelConfig cfg_;
  std::size_t in_bands_;
  // ParamStore owns the parameters; these structs only point into it.
  ParamStore store_;

  Parameter *embed_kernel_, *embed_bias_, *embed_gn_scale_, *embed_gn_shift_;
  std::vector<StageEncoderParams> stages_;
  std::vector<StageGateParams> gates_;
  std::vector<FusionParams> fusions_;
  Parameter *cls_kernel1_, *cls_bias1_, *cls_gn_scale_, *cls_gn_shift_;
  Parameter *cls_kernel2_, *cls_bias2_;
};

// checkpoint container: magic HSMW, version u32 LE, then one record per
// parameter: name length u32, name bytes, rank u64, extents u64, f64 LE values
void save_checkpoint(const ParamStore& store, const std::string& path);
void load_checkpoint(ParamStore& store, const std::string& path);

// argmax over the class axis, as 1-based labels
std::vector<std::uint16_t> argmax_labels(const NdArray& logits);

}  // namespace hsmamba
