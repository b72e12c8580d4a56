#include "hsmamba/ssm.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>

#include "hsmamba/ops.hpp"

namespace hsmamba {

namespace {

// branch guard for the removable singularity of ((exp(z)-1)/a)
constexpr double kZohSeriesCutoff = 1e-8;

void zoh_entry(double a, double b, double delta, bool exact, double& a_bar, double& b_bar) {
  double z = delta * a;
  a_bar = std::exp(z);
  if (!exact) {
    b_bar = delta * b;
    return;
  }
  b_bar = (std::fabs(z) < kZohSeriesCutoff) ? delta * b : (a_bar - 1.0) / a * b;
}

}  // namespace

DiscretizedPair discretize_zoh(const NdArray& a_diag, const NdArray& b, const NdArray& delta) {
  if (a_diag.rank() != 1 || b.rank() != 1 || a_diag.numel() != b.numel())
    throw ShapeError("discretize_zoh: a and b must be vectors of equal length");
  for (std::size_t i = 0; i < delta.numel(); ++i)
    if (!(delta[i] > 0.0)) throw ParamError("discretize_zoh: delta must be > 0");
  std::size_t n = a_diag.numel();
  DiscretizedPair pair;
  if (delta.numel() == 1) {
    pair.a_bar = NdArray({n});
    pair.b_bar = NdArray({n});
    for (std::size_t i = 0; i < n; ++i)
      zoh_entry(a_diag[i], b[i], delta[0], true, pair.a_bar[i], pair.b_bar[i]);
  } else {
    std::size_t steps = delta.numel();
    pair.a_bar = NdArray({steps, n});
    pair.b_bar = NdArray({steps, n});
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t i = 0; i < n; ++i)
        zoh_entry(a_diag[i], b[i], delta[t], true, pair.a_bar[t * n + i],
                  pair.b_bar[t * n + i]);
  }
  return pair;
}

NdArray recurrent_scan(const DiscretizedPair& pair, const NdArray& c, const NdArray& x) {
  if (c.rank() != 1) throw ShapeError("recurrent_scan: c must be a vector");
  std::size_t n = c.numel();
  std::size_t len = x.numel();
  if (pair.a_bar.numel() == 0 || pair.a_bar.extent(pair.a_bar.rank() - 1) != n)
    throw ShapeError("recurrent_scan: pair/state size mismatch");
  if (pair.time_varying() && pair.a_bar.extent(0) != len)
    throw ShapeError("recurrent_scan: per-step pair length != sequence length");
  NdArray y({len});
  std::vector<double> h(n, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    const double* ab = pair.a_bar.data() + (pair.time_varying() ? t * n : 0);
    const double* bb = pair.b_bar.data() + (pair.time_varying() ? t * n : 0);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      h[i] = ab[i] * h[i] + bb[i] * x[t];
      acc += c[i] * h[i];
    }
    y[t] = acc;
  }
  return y;
}

NdArray lti_kernel(const DiscretizedPair& pair, const NdArray& c, std::size_t len) {
  if (pair.time_varying()) throw ModeError("lti_kernel: pair has per-step parameters");
  std::size_t n = c.numel();
  NdArray k({len});
  std::vector<double> pw(n, 1.0);  // a_bar^j
  for (std::size_t j = 0; j < len; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += c[i] * pw[i] * pair.b_bar[i];
      pw[i] *= pair.a_bar[i];
    }
    k[j] = acc;
  }
  return k;
}

NdArray kernel_scan(const DiscretizedPair& pair, const NdArray& c, const NdArray& x) {
  if (pair.time_varying())
    throw ModeError("kernel_scan: only time-invariant parameters admit a convolution kernel");
  std::size_t len = x.numel();
  NdArray k = lti_kernel(pair, c, len);
  NdArray y({len});
  for (std::size_t t = 0; t < len; ++t) {
    double acc = 0.0;
    for (std::size_t j = 0; j <= t; ++j) acc += k[j] * x[t - j];
    y[t] = acc;
  }
  return y;
}

SsmParams SsmParams::init(std::size_t dim, std::size_t state, Rng rng) {
  SsmParams p;
  p.log_a = NdArray({dim, state});
  for (std::size_t d = 0; d < dim; ++d)
    for (std::size_t n = 0; n < state; ++n)
      p.log_a[d * state + n] = std::log(static_cast<double>(n + 1));
  double k = 1.0 / std::sqrt(static_cast<double>(dim));
  p.w_b = NdArray({state, dim});
  p.w_c = NdArray({state, dim});
  for (std::size_t i = 0; i < state * dim; ++i) p.w_b[i] = rng.uniform(-k, k);
  for (std::size_t i = 0; i < state * dim; ++i) p.w_c[i] = rng.uniform(-k, k);
  p.w_delta = NdArray({dim, dim});
  for (std::size_t i = 0; i < dim * dim; ++i) p.w_delta[i] = rng.uniform(-k, k);
  p.b_delta = NdArray({dim});
  for (std::size_t d = 0; d < dim; ++d) {
    double dt = std::exp(rng.uniform(std::log(1e-3), std::log(0.1)));
    p.b_delta[d] = softplus_inverse(dt);
  }
  p.d_skip = NdArray::full({dim}, 1.0);
  return p;
}

namespace {

struct ScanShape {
  std::size_t batch, len, dim, state;
  bool batched;
};

ScanShape scan_shape(const NdArray& x, std::size_t dim, std::size_t state) {
  ScanShape s{};
  s.state = state;
  if (x.rank() == 2) {
    s.batched = false;
    s.batch = 1;
    s.len = x.extent(0);
    s.dim = x.extent(1);
  } else if (x.rank() == 3) {
    s.batched = true;
    s.batch = x.extent(0);
    s.len = x.extent(1);
    s.dim = x.extent(2);
  } else {
    throw ShapeError("selective_scan: input must be [L,D] or [B,L,D]");
  }
  if (s.dim != dim)
    throw ShapeError("selective_scan: channel extent " + std::to_string(s.dim) +
                     " != parameter width " + std::to_string(dim));
  return s;
}

// Per-step internals of one sequence, kept for the backward pass.
struct ScanTrace {
  std::vector<double> h;      // [L,D,N]
  std::vector<double> ab;            // [L,D,N]
  std::vector<double> phi;           // [L,D,N]
  std::vector<double> delta;  // [L,D]
  std::vector<double> bt;     // [L,N]
  std::vector<double> ct;     // [L,N]
};

void scan_seq_forward(const double* x, std::size_t len, std::size_t dim, std::size_t state,
                      const double* a_vals, const double* w_b, const double* w_c,
                      const double* w_delta, const double* b_delta, const double* d_skip,
                      bool exact, double* y, ScanTrace* trace) {
  std::vector<double> h(dim * state, 0.0);
  std::vector<double> bt(state), ct(state), delta(dim);
  if (trace) {
    trace->h.assign(len * dim * state, 0.0);
    trace->ab.assign(len * dim * state, 0.0);
    trace->phi.assign(len * dim * state, 0.0);
    trace->delta.assign(len * dim, 0.0);
    trace->bt.assign(len * state, 0.0);
    trace->ct.assign(len * state, 0.0);
  }
  for (std::size_t t = 0; t < len; ++t) {
    const double* xt = x + t * dim;
    for (std::size_t n = 0; n < state; ++n) {
      double accb = 0.0, accc = 0.0;
      const double* wbn = w_b + n * dim;
      const double* wcn = w_c + n * dim;
      for (std::size_t d = 0; d < dim; ++d) {
        accb += wbn[d] * xt[d];
        accc += wcn[d] * xt[d];
      }
      bt[n] = accb;
      ct[n] = accc;
    }
    for (std::size_t d = 0; d < dim; ++d) {
      double pre = b_delta[d];
      const double* wdd = w_delta + d * dim;
      for (std::size_t i = 0; i < dim; ++i) pre += wdd[i] * xt[i];
      delta[d] = softplus_scalar(pre);
    }
    for (std::size_t d = 0; d < dim; ++d) {
      double acc = 0.0;
      double* hd = h.data() + d * state;
      const double* ad = a_vals + d * state;
      for (std::size_t n = 0; n < state; ++n) {
        double z = delta[d] * ad[n];
        double ab = std::exp(z);
        double phi;
        if (!exact)
          phi = delta[d];
        else
          phi = (std::fabs(z) < kZohSeriesCutoff) ? delta[d] : (ab - 1.0) / ad[n];
        hd[n] = ab * hd[n] + phi * bt[n] * xt[d];
        acc += ct[n] * hd[n];
        if (trace) {
          std::size_t off = (t * dim + d) * state + n;
          trace->ab[off] = ab;
          trace->phi[off] = phi;
          trace->h[off] = hd[n];
        }
      }
      y[t * dim + d] = acc + d_skip[d] * xt[d];
    }
    if (trace) {
      std::copy_n(delta.data(), dim, trace->delta.data() + t * dim);
      std::copy_n(bt.data(), state, trace->bt.data() + t * state);
      std::copy_n(ct.data(), state, trace->ct.data() + t * state);
    }
  }
}

}  // namespace

NdArray selective_scan_s6(const SsmParams& params, const NdArray& x) {
  ScanShape s = scan_shape(x, params.dim(), params.state());
  NdArray a_vals(params.log_a.shape());
  for (std::size_t i = 0; i < a_vals.numel(); ++i) a_vals[i] = -std::exp(params.log_a[i]);
  NdArray y(x.shape());
  for (std::size_t b = 0; b < s.batch; ++b)
    scan_seq_forward(x.data() + b * s.len * s.dim, s.len, s.dim, s.state, a_vals.data(),
                     params.w_b.data(), params.w_c.data(), params.w_delta.data(),
                     params.b_delta.data(), params.d_skip.data(), params.exact_zoh,
                     y.data() + b * s.len * s.dim, nullptr);
  if (!y.all_finite()) throw NumericError("selective_scan_s6 produced a non-finite value");
  return y;
}

NdArray SelectiveScanOp::forward(const std::vector<const NdArray*>& in) const {
  if (in.size() != 7) throw ShapeError("selective_scan: expected 7 inputs");
  const NdArray& x = *in[0];
  const NdArray& log_a = *in[1];
  if (log_a.rank() != 2 || log_a.extent(1) != state_)
    throw ShapeError("selective_scan: log_a must be [D,N]");
  std::size_t dim = log_a.extent(0);
  ScanShape s = scan_shape(x, dim, state_);
  if (in[2]->shape() != Shape{state_, dim} || in[3]->shape() != Shape{state_, dim})
    throw ShapeError("selective_scan: w_b/w_c must be [N,D]");
  if (in[4]->shape() != Shape{dim, dim}) throw ShapeError("selective_scan: w_delta must be [D,D]");
  if (in[5]->numel() != dim || in[6]->numel() != dim)
    throw ShapeError("selective_scan: b_delta/d_skip must be [D]");
  NdArray a_vals(log_a.shape());
  for (std::size_t i = 0; i < a_vals.numel(); ++i) a_vals[i] = -std::exp(log_a[i]);
  NdArray y(x.shape());
  for (std::size_t b = 0; b < s.batch; ++b)
    scan_seq_forward(x.data() + b * s.len * s.dim, s.len, s.dim, s.state, a_vals.data(),
                     in[2]->data(), in[3]->data(), in[4]->data(), in[5]->data(), in[6]->data(),
                     exact_, y.data() + b * s.len * s.dim, nullptr);
  return y;
}

std::vector<NdArray> SelectiveScanOp::backward(const std::vector<const NdArray*>& in,
                                               const NdArray&, const NdArray& g) const {
  const NdArray& x = *in[0];
  const NdArray& log_a = *in[1];
  std::size_t dim = log_a.extent(0);
  ScanShape s = scan_shape(x, dim, state_);
  const double* w_b = in[2]->data();
  const double* w_c = in[3]->data();
  const double* w_delta = in[4]->data();
  const double* b_delta = in[5]->data();
  const double* d_skip = in[6]->data();

  NdArray a_vals(log_a.shape());
  for (std::size_t i = 0; i < a_vals.numel(); ++i) a_vals[i] = -std::exp(log_a[i]);

  NdArray dx(x.shape()), d_log_a(log_a.shape()), d_wb(in[2]->shape()), d_wc(in[3]->shape()),
      d_wd(in[4]->shape()), d_bd(in[5]->shape()), d_ds(in[6]->shape());
  std::vector<double> ga(dim * state_, 0.0);  // grad wrt A itself

  std::vector<double> y_scratch(s.len * dim);
  ScanTrace tr;
  std::vector<double> lambda(dim * state_);
  std::vector<double> gct(state_), gbt(state_), gdelta(dim), gpre(dim);

  for (std::size_t b = 0; b < s.batch; ++b) {
    const double* xb = x.data() + b * s.len * dim;
    const double* gb = g.data() + b * s.len * dim;
    double* dxb = dx.data() + b * s.len * dim;
    scan_seq_forward(xb, s.len, dim, state_, a_vals.data(), w_b, w_c, w_delta, b_delta, d_skip,
                     exact_, y_scratch.data(), &tr);
    std::fill(lambda.begin(), lambda.end(), 0.0);
    for (std::size_t t = s.len; t-- > 0;) {
      const double* xt = xb + t * dim;
      const double* gt = gb + t * dim;
      double* dxt = dxb + t * dim;
      const double* ht = tr.h.data() + t * dim * state_;
      const double* hprev = t > 0 ? tr.h.data() + (t - 1) * dim * state_ : nullptr;
      const double* abt = tr.ab.data() + t * dim * state_;
      const double* phit = tr.phi.data() + t * dim * state_;
      const double* deltat = tr.delta.data() + t * dim;
      const double* btt = tr.bt.data() + t * state_;
      const double* ctt = tr.ct.data() + t * state_;

      for (std::size_t n = 0; n < state_; ++n) {
        double acc = 0.0;
        for (std::size_t d = 0; d < dim; ++d) acc += gt[d] * ht[d * state_ + n];
        gct[n] = acc;
        gbt[n] = 0.0;
      }
      std::fill(gdelta.begin(), gdelta.end(), 0.0);

      for (std::size_t d = 0; d < dim; ++d) {
        d_ds[d] += gt[d] * xt[d];
        dxt[d] += gt[d] * d_skip[d];
        const double* ad = a_vals.data() + d * state_;
        for (std::size_t n = 0; n < state_; ++n) {
          std::size_t dn = d * state_ + n;
          double lam = lambda[dn] + gt[d] * ctt[n];
          double hp = hprev ? hprev[dn] : 0.0;
          double ab = abt[dn];
          double phi = phit[dn];
          double dab = lam * hp;
          double dphi = lam * btt[n] * xt[d];
          gbt[n] += lam * phi * xt[d];
          dxt[d] += lam * phi * btt[n];
          double dz = dab * ab;
          double dphi_ddelta, dphi_da;
          if (!exact_) {
            dphi_ddelta = 1.0;
            dphi_da = 0.0;
          } else if (std::fabs(deltat[d] * ad[n]) < kZohSeriesCutoff) {
            dphi_ddelta = ab;
            dphi_da = 0.5 * deltat[d] * deltat[d];
          } else {
            dphi_ddelta = ab;
            dphi_da = (deltat[d] * ab - phi) / ad[n];
          }
          gdelta[d] += dz * ad[n] + dphi * dphi_ddelta;
          ga[dn] += dz * deltat[d] + dphi * dphi_da;
          lambda[dn] = lam * ab;
        }
      }

      // delta = softplus(pre), softplus'(pre) = 1 - exp(-delta)
      for (std::size_t d = 0; d < dim; ++d) gpre[d] = gdelta[d] * (1.0 - std::exp(-deltat[d]));
      for (std::size_t d = 0; d < dim; ++d) {
        d_bd[d] += gpre[d];
        const double* wdd = w_delta + d * dim;
        double* dwdd = d_wd.data() + d * dim;
        for (std::size_t i = 0; i < dim; ++i) {
          dwdd[i] += gpre[d] * xt[i];
          dxt[i] += gpre[d] * wdd[i];
        }
      }
      for (std::size_t n = 0; n < state_; ++n) {
        const double* wbn = w_b + n * dim;
        const double* wcn = w_c + n * dim;
        double* dwbn = d_wb.data() + n * dim;
        double* dwcn = d_wc.data() + n * dim;
        for (std::size_t i = 0; i < dim; ++i) {
          dwbn[i] += gbt[n] * xt[i];
          dwcn[i] += gct[n] * xt[i];
          dxt[i] += gbt[n] * wbn[i] + gct[n] * wcn[i];
        }
      }
    }
  }

  // A = -exp(log_a) => dA/dlog_a = A
  for (std::size_t i = 0; i < d_log_a.numel(); ++i) d_log_a[i] = ga[i] * a_vals[i];

  return {std::move(dx),  std::move(d_log_a), std::move(d_wb), std::move(d_wc),
          std::move(d_wd), std::move(d_bd),    std::move(d_ds)};
}

VarId selective_scan(Tape& t, VarId x, VarId log_a, VarId w_b, VarId w_c, VarId w_delta,
                     VarId b_delta, VarId d_skip, std::size_t state, bool exact_zoh) {
  return t.apply(std::make_shared<SelectiveScanOp>(state, exact_zoh),
                 {x, log_a, w_b, w_c, w_delta, b_delta, d_skip});
}

// --- benchmark -----------------------------------------------------------------

namespace {

// Self-contained timing kernel, templated so speed runs can use 32-bit floats.
template <typename T>
double run_timed_scan(std::size_t len, std::size_t dim, std::size_t state,
                      const std::vector<T>& x, const std::vector<T>& a_vals,
                      const std::vector<T>& w_b, const std::vector<T>& w_c,
                      const std::vector<T>& w_delta, const std::vector<T>& b_delta,
                      const std::vector<T>& d_skip, std::vector<T>& y) {
  auto t0 = std::chrono::steady_clock::now();
  std::vector<T> h(dim * state, T(0)), bt(state), ct(state), delta(dim);
  for (std::size_t t = 0; t < len; ++t) {
    const T* xt = x.data() + t * dim;
    for (std::size_t n = 0; n < state; ++n) {
      T accb = 0, accc = 0;
      for (std::size_t d = 0; d < dim; ++d) {
        accb += w_b[n * dim + d] * xt[d];
        accc += w_c[n * dim + d] * xt[d];
      }
      bt[n] = accb;
      ct[n] = accc;
    }
    for (std::size_t d = 0; d < dim; ++d) {
      T pre = b_delta[d];
      for (std::size_t i = 0; i < dim; ++i) pre += w_delta[d * dim + i] * xt[i];
      delta[d] = pre > T(30) ? pre : std::log1p(std::exp(pre));
    }
    for (std::size_t d = 0; d < dim; ++d) {
      T acc = 0;
      for (std::size_t n = 0; n < state; ++n) {
        T z = delta[d] * a_vals[d * state + n];
        T ab = std::exp(z);
        T phi = std::fabs(z) < T(kZohSeriesCutoff) ? delta[d] : (ab - T(1)) / a_vals[d * state + n];
        h[d * state + n] = ab * h[d * state + n] + phi * bt[n] * xt[d];
        acc += ct[n] * h[d * state + n];
      }
      y[t * dim + d] = acc + d_skip[d] * xt[d];
    }
  }
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count();
}

template <typename T>
std::vector<BenchRow> benchmark_scan_impl(const std::vector<std::size_t>& lengths,
                                          std::size_t dim, std::size_t state, int repeats,
                                          std::uint64_t seed) {
  std::vector<BenchRow> rows;
  if (repeats <= 0) return rows;
  Rng rng(seed);
  SsmParams p = SsmParams::init(dim, state, rng.derive("bench-params"));
  auto to_vec = [](const NdArray& a) {
    std::vector<T> v(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) v[i] = static_cast<T>(a[i]);
    return v;
  };
  std::vector<T> a_vals(p.log_a.numel());
  for (std::size_t i = 0; i < a_vals.size(); ++i)
    a_vals[i] = static_cast<T>(-std::exp(p.log_a[i]));
  auto w_b = to_vec(p.w_b), w_c = to_vec(p.w_c), w_delta = to_vec(p.w_delta),
       b_delta = to_vec(p.b_delta), d_skip = to_vec(p.d_skip);

  Rng data_rng = rng.derive("bench-data");
  double sink = 0.0;
  for (std::size_t len : lengths) {
    std::vector<T> x(len * dim), y(len * dim);
    for (T& v : x) v = static_cast<T>(data_rng.uniform(-1.0, 1.0));
    // one untimed warm-up per length
    run_timed_scan(len, dim, state, x, a_vals, w_b, w_c, w_delta, b_delta, d_skip, y);
    std::vector<double> times(repeats);
    for (int r = 0; r < repeats; ++r) {
      times[r] = run_timed_scan(len, dim, state, x, a_vals, w_b, w_c, w_delta, b_delta, d_skip, y);
      sink += static_cast<double>(y[len / 2 * dim]);
    }
    double mean = 0.0;
    for (double t : times) mean += t;
    mean /= repeats;
    double var = 0.0;
    for (double t : times) var += (t - mean) * (t - mean);
    double sd = repeats > 1 ? std::sqrt(var / (repeats - 1)) : 0.0;
    rows.push_back({len, mean, sd});
  }
  volatile double anchor = sink;  // keep the scans alive
  (void)anchor;
  return rows;
}

}  // namespace

std::vector<BenchRow> benchmark_scan(const std::vector<std::size_t>& lengths, std::size_t dim,
                                     std::size_t state, int repeats, bool use_f32,
                                     std::uint64_t seed) {
  for (std::size_t i = 1; i < lengths.size(); ++i)
    if (lengths[i] <= lengths[i - 1])
      throw ParamError("benchmark_scan: lengths must be strictly ascending");
  if (dim == 0 || state == 0) throw ParamError("benchmark_scan: dim and state must be >= 1");
  return use_f32 ? benchmark_scan_impl<float>(lengths, dim, state, repeats, seed)
                 : benchmark_scan_impl<double>(lengths, dim, state, repeats, seed);
}

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "L,mean_seconds,std_seconds\n";
  for (const BenchRow& r : rows) {
    os << r.len << ',' << r.mean_seconds << ',' << r.std_seconds << '\n';
  }
}

double fit_loglog_slope(const std::vector<BenchRow>& rows) {
  if (rows.size() < 2) throw ParamError("fit_loglog_slope: need at least two rows");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t n = rows.size();
  for (const BenchRow& r : rows) {
    if (!(r.mean_seconds > 0)) throw NumericError("fit_loglog_slope: non-positive timing");
    double lx = std::log(static_cast<double>(r.len));
    double ly = std::log(r.mean_seconds);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace hsmamba
