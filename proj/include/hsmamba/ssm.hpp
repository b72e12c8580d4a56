#pragma once

#include <iosfwd>
#include <vector>

#include "hsmamba/rng.hpp"
#include "hsmamba/tape.hpp"

namespace hsmamba {

// Discrete state-space factors. a_bar/b_bar are [N] for a time-invariant
// system or [L,N] when the timescale varies per step.
struct DiscretizedPair {
  NdArray a_bar;
  NdArray b_bar;
  bool time_varying() const { return a_bar.rank() == 2; }
};

// Zero-order-hold discretization of a diagonal system:
//   a_bar = exp(delta*a),  b_bar = ((exp(delta*a) - 1) / a) * b
// with the removable singularity |delta*a| < 1e-8 handled by the series limit
// b_bar = delta*b. `delta` may be a scalar ([1]) or a per-step vector [L].
DiscretizedPair discretize_zoh(const NdArray& a_diag, const NdArray& b, const NdArray& delta);

// h_t = a_bar ∘ h_{t-1} + b_bar * x_t,  y_t = <c, h_t>, h_0 = 0.
NdArray recurrent_scan(const DiscretizedPair& pair, const NdArray& c, const NdArray& x);

// y = x ⋆ k_bar with k_bar[j] = <c, a_bar^j ∘ b_bar>; valid only for a
// time-invariant pair (throws ModeError otherwise), where it equals
// recurrent_scan exactly.
NdArray kernel_scan(const DiscretizedPair& pair, const NdArray& c, const NdArray& x);
NdArray lti_kernel(const DiscretizedPair& pair, const NdArray& c, std::size_t len);

// Input-dependent scan parameters for one channel block of width D with
// diagonal state of size N. A is parameterized as -exp(log_a) so it stays
// strictly negative.
struct SsmParams {
  NdArray log_a;    // [D,N]
  NdArray w_b;      // [N,D], B_t = w_b x_t
  NdArray w_c;      // [N,D], C_t = w_c x_t
  NdArray w_delta;  // [D,D]
  NdArray b_delta;  // [D],  delta_t = softplus(w_delta x_t + b_delta)
  NdArray d_skip;   // [D],  per-channel skip scale
  bool exact_zoh = true;  // false: first-order b_bar = delta*b cross-check mode

  std::size_t dim() const { return log_a.extent(0); }
  std::size_t state() const { return log_a.extent(1); }

  // log_a[d,n] = log(n+1), delta bias so softplus lands in [1e-3, 0.1],
  // projections fan-in uniform, skip scale 1.
  static SsmParams init(std::size_t dim, std::size_t state, Rng rng);
};

// Selective scan over x of shape [L,D] or [B,L,D] (batch of independent
// sequences sharing the same parameters).
NdArray selective_scan_s6(const SsmParams& params, const NdArray& x);

// Differentiable selective scan. Inputs in tape order:
//   x, log_a, w_b, w_c, w_delta, b_delta, d_skip
class SelectiveScanOp final : public DiffOp {
 public:
  SelectiveScanOp(std::size_t state, bool exact_zoh) : state_(state), exact_(exact_zoh) {}
  const char* name() const override { return "selective_scan"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  std::size_t state_;
  bool exact_;
};

VarId selective_scan(Tape& t, VarId x, VarId log_a, VarId w_b, VarId w_c, VarId w_delta,
                     VarId b_delta, VarId d_skip, std::size_t state, bool exact_zoh = true);

// --- scan scaling benchmark --------------------------------------------------

struct BenchRow {
  std::size_t len;
  double mean_seconds;
  double std_seconds;
};

// Times the forward selective scan at each sequence length. `lengths` must be
// ascending; repeats <= 0 yields an empty table. use_f32 switches the timing
// kernel to 32-bit floats for speed runs.
std::vector<BenchRow> benchmark_scan(const std::vector<std::size_t>& lengths, std::size_t dim,
                                     std::size_t state, int repeats, bool use_f32 = false,
                                     std::uint64_t seed = 20240501);

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows);

// least-squares slope of log(mean_seconds) against log(len)
double fit_loglog_slope(const std::vector<BenchRow>& rows);

}  // namespace hsmamba
