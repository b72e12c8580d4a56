#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hsmamba/rng.hpp"
#include "hsmamba/tape.hpp"

namespace hsmamba {

struct GradCheckResult {
  std::string label;
  double max_rel_err = 0.0;
  bool pass = true;
  std::string worst;  // which input/element missed the tolerance

  static GradCheckResult merge(const std::vector<GradCheckResult>& parts);
};

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-4;
  // inputs whose gradients to verify; empty = all
  std::vector<std::size_t> check_inputs;
};

// Central finite differences against DiffOp::backward, with a fixed random
// upstream gradient: loss = sum(g ⊙ forward(inputs)).
GradCheckResult check_diffop(const DiffOp& op, std::vector<NdArray> inputs, Rng rng,
                             const GradCheckOptions& opt = {});

// Central finite differences of an arbitrary scalar function against supplied
// analytic gradients; used for whole-model checks where the tape produces the
// analytic side.
GradCheckResult check_scalar_fn(const std::string& label,
                                const std::function<double(const std::vector<NdArray>&)>& fn,
                                std::vector<NdArray> at,
                                const std::vector<NdArray>& analytic_grads,
                                const GradCheckOptions& opt = {});

// The standard per-op suite run by `gradcheck --level op`: every differentiable
// primitive on several random shapes. Returns one result per (op, shape).
std::vector<GradCheckResult> gradcheck_op_suite(std::uint64_t seed = 7);

// Composite checks (encoder stage, attention gates, fusion) on tiny configs.
std::vector<GradCheckResult> gradcheck_block_suite(std::uint64_t seed = 7);

// End-to-end tiny model loss gradient check.
std::vector<GradCheckResult> gradcheck_model_suite(std::uint64_t seed = 7);

}  // namespace hsmamba
