#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hsmamba/gradcheck.hpp"
#include "hsmamba/ssm.hpp"
#include "oracles.hpp"

using namespace hsmamba;

TEST_CASE("zoh discretization closed forms") {
  // A=-1, delta=ln 2: a_bar = 1/2, b_bar = ((0.5-1)/(-1))*1 = 1/2
  NdArray a({1}, {-1.0});
  NdArray b({1}, {1.0});
  NdArray delta({1}, {std::log(2.0)});
  DiscretizedPair p = discretize_zoh(a, b, delta);
  CHECK(p.a_bar[0] == doctest::Approx(0.5));
  CHECK(p.b_bar[0] == doctest::Approx(0.5));

  // series limit a -> 0: a_bar -> 1, b_bar -> delta*b
  DiscretizedPair lim = discretize_zoh(NdArray({1}, {0.0}), NdArray({1}, {2.0}),
                                       NdArray({1}, {0.3}));
  CHECK(lim.a_bar[0] == 1.0);
  CHECK(lim.b_bar[0] == doctest::Approx(0.6));

  CHECK_THROWS_AS(discretize_zoh(a, b, NdArray({1}, {0.0})), ParamError);
  CHECK_THROWS_AS(discretize_zoh(a, b, NdArray({1}, {-0.5})), ParamError);
}

TEST_CASE("zoh matches trapezoid quadrature") {
  Rng rng(23);
  for (int i = 0; i < 10; ++i) {
    double a = rng.uniform(-3.0, -0.05);
    double b = rng.uniform(-2.0, 2.0);
    double d = rng.uniform(0.01, 2.0);
    DiscretizedPair p = discretize_zoh(NdArray({1}, {a}), NdArray({1}, {b}), NdArray({1}, {d}));
    CHECK(std::fabs(p.b_bar[0] - oracle::zoh_b_quadrature(a, b, d, 50000)) < 1e-8);
  }
  // the |delta*a| < 1e-8 branch agrees with quadrature too
  DiscretizedPair tiny = discretize_zoh(NdArray({1}, {-1e-6}), NdArray({1}, {1.0}),
                                        NdArray({1}, {1e-4}));
  CHECK(std::fabs(tiny.b_bar[0] - oracle::zoh_b_quadrature(-1e-6, 1.0, 1e-4, 2000)) < 1e-12);
}

TEST_CASE("recurrent scan") {
  // memoryless: a_bar = 0 passes input straight through
  DiscretizedPair p0{NdArray({1}, {0.0}), NdArray({1}, {1.0})};
  NdArray y0 = recurrent_scan(p0, NdArray({1}, {1.0}), NdArray({2}, {3.0, 5.0}));
  CHECK(y0[0] == 3.0);
  CHECK(y0[1] == 5.0);

  // hand recurrence: impulse through a 1/2-decay state
  DiscretizedPair ph{NdArray({1}, {0.5}), NdArray({1}, {1.0})};
  NdArray yh = recurrent_scan(ph, NdArray({1}, {1.0}), NdArray({3}, {1.0, 0.0, 0.0}));
  CHECK(yh[0] == doctest::Approx(1.0));
  CHECK(yh[1] == doctest::Approx(0.5));
  CHECK(yh[2] == doctest::Approx(0.25));

  // N=2 against the dense matrix recurrence
  Rng rng(29);
  NdArray ab = oracle::random_array({2}, rng, -0.9, 0.9);
  NdArray bb = oracle::random_array({2}, rng);
  NdArray c = oracle::random_array({2}, rng);
  NdArray x = oracle::random_array({16}, rng);
  DiscretizedPair pd{ab, bb};
  CHECK(max_abs_diff(recurrent_scan(pd, c, x), oracle::dense_recurrence(ab, bb, c, x)) < 1e-12);

  // empty sequence -> empty output
  CHECK(recurrent_scan(pd, c, NdArray({0})).numel() == 0);
}

TEST_CASE("kernel scan equals recurrent scan in LTI mode") {
  // closed-form kernel for a_bar=1/2
  DiscretizedPair p{NdArray({1}, {0.5}), NdArray({1}, {1.0})};
  NdArray c({1}, {1.0});
  NdArray k = lti_kernel(p, c, 3);
  CHECK(k[0] == doctest::Approx(1.0));
  CHECK(k[1] == doctest::Approx(0.5));
  CHECK(k[2] == doctest::Approx(0.25));

  // impulse response is the kernel itself
  NdArray imp({4});
  imp[0] = 1.0;
  NdArray yi = kernel_scan(p, c, imp);
  NdArray k4 = lti_kernel(p, c, 4);
  CHECK(max_abs_diff(yi, k4) < 1e-15);

  // random LTI instance, L = 64
  Rng rng(31);
  for (int rep = 0; rep < 5; ++rep) {
    std::size_t n = 1 + rng.below(8);
    NdArray a({n}), b({n}), cc({n});
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.uniform(-2.0, -0.05);
      b[i] = rng.uniform(-1.0, 1.0);
      cc[i] = rng.uniform(-1.0, 1.0);
    }
    DiscretizedPair pr = discretize_zoh(a, b, NdArray({1}, {rng.uniform(0.05, 1.0)}));
    NdArray x = oracle::random_array({64}, rng);
    CHECK(max_abs_diff(kernel_scan(pr, cc, x), recurrent_scan(pr, cc, x)) <= 1e-10);
  }

  // per-step parameters are not a convolution
  NdArray delta_steps({3}, {0.1, 0.2, 0.3});
  DiscretizedPair varying =
      discretize_zoh(NdArray({1}, {-1.0}), NdArray({1}, {1.0}), delta_steps);
  CHECK_THROWS_AS(kernel_scan(varying, c, NdArray({3})), ModeError);
}

TEST_CASE("selective scan degenerate timescale is a pure skip") {
  std::size_t dim = 3, n = 4;
  Rng rng(37);
  SsmParams p = SsmParams::init(dim, n, rng.derive("p"));
  for (std::size_t i = 0; i < p.b_delta.numel(); ++i) p.b_delta[i] = -40.0;  // delta ~ 4e-18
  for (std::size_t i = 0; i < p.w_delta.numel(); ++i) p.w_delta[i] = 0.0;
  NdArray x = oracle::random_array({6, dim}, rng);
  NdArray y = selective_scan_s6(p, x);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t d = 0; d < dim; ++d)
      CHECK(y.at({t, d}) == doctest::Approx(p.d_skip[d] * x.at({t, d})).epsilon(1e-12));
}

TEST_CASE("selective scan single step closed form") {
  std::size_t dim = 2, n = 3;
  Rng rng(41);
  SsmParams p = SsmParams::init(dim, n, rng.derive("p"));
  NdArray x = oracle::random_array({1, dim}, rng);
  NdArray y = selective_scan_s6(p, x);

  for (std::size_t d = 0; d < dim; ++d) {
    double pre = p.b_delta[d];
    for (std::size_t i = 0; i < dim; ++i) pre += p.w_delta.at({d, i}) * x.at({0, i});
    double delta = std::log1p(std::exp(pre));
    double acc = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      double bt = 0.0, ct = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        bt += p.w_b.at({s, i}) * x.at({0, i});
        ct += p.w_c.at({s, i}) * x.at({0, i});
      }
      double a = -std::exp(p.log_a.at({d, s}));
      double phi = (std::exp(delta * a) - 1.0) / a;
      acc += ct * phi * bt * x.at({0, d});
    }
    acc += p.d_skip[d] * x.at({0, d});
    CHECK(y.at({0, d}) == doctest::Approx(acc).epsilon(1e-12));
  }
}

TEST_CASE("selective scan matches the all-loops reference") {
  Rng rng(43);
  SsmParams p = SsmParams::init(2, 4, rng.derive("p"));
  NdArray x = oracle::random_array({8, 2}, rng);
  NdArray ours = selective_scan_s6(p, x);
  NdArray ref = oracle::selective_scan(x, p.log_a, p.w_b, p.w_c, p.w_delta, p.b_delta, p.d_skip);
  CHECK(max_abs_diff(ours, ref) <= 1e-12);

  // batched input runs each sequence independently
  NdArray xb({2, 8, 2});
  std::copy_n(x.data(), 16, xb.data());
  for (std::size_t i = 0; i < 16; ++i) xb[16 + i] = x[i] * 0.5;
  NdArray yb = selective_scan_s6(p, xb);
  for (std::size_t i = 0; i < 16; ++i) CHECK(yb[i] == ours[i]);
}

TEST_CASE("scan with zeroed projections reduces to the LTI recurrence") {
  // constant token stream makes B, C, delta time-invariant
  std::size_t dim = 2, n = 3, len = 20;
  Rng rng(47);
  SsmParams p = SsmParams::init(dim, n, rng.derive("p"));
  NdArray x0 = oracle::random_array({dim}, rng);
  NdArray x({len, dim});
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t d = 0; d < dim; ++d) x.at({t, d}) = x0[d];
  NdArray y = selective_scan_s6(p, x);

  for (std::size_t d = 0; d < dim; ++d) {
    double pre = p.b_delta[d];
    for (std::size_t i = 0; i < dim; ++i) pre += p.w_delta.at({d, i}) * x0[i];
    double delta = std::log1p(std::exp(pre));
    NdArray a({n}), bt({n}), ct({n});
    for (std::size_t s = 0; s < n; ++s) {
      a[s] = -std::exp(p.log_a.at({d, s}));
      for (std::size_t i = 0; i < dim; ++i) {
        bt[s] += p.w_b.at({s, i}) * x0[i];
        ct[s] += p.w_c.at({s, i}) * x0[i];
      }
    }
    DiscretizedPair pair = discretize_zoh(a, bt, NdArray({1}, {delta}));
    NdArray chan({len});
    for (std::size_t t = 0; t < len; ++t) chan[t] = x0[d];
    NdArray lti = recurrent_scan(pair, ct, chan);
    for (std::size_t t = 0; t < len; ++t)
      CHECK(y.at({t, d}) == doctest::Approx(lti[t] + p.d_skip[d] * x0[d]).epsilon(1e-12));
  }
}

TEST_CASE("stability bound holds on long random runs") {
  Rng rng(53);
  std::size_t n = 4, len = 10000;
  NdArray a({n}), b({n}), c({n});
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = rng.uniform(-2.0, -0.1);
    b[i] = rng.uniform(-1.0, 1.0);
    c[i] = rng.uniform(-1.0, 1.0);
  }
  DiscretizedPair p = discretize_zoh(a, b, NdArray({1}, {0.5}));
  double bound = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    bound += std::fabs(p.b_bar[i]) / (1.0 - std::fabs(p.a_bar[i]));
  // run the recurrence tracking the state directly
  std::vector<double> h(n, 0.0);
  double hmax = 0.0;
  for (std::size_t t = 0; t < len; ++t) {
    double x = rng.uniform(-1.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      h[i] = p.a_bar[i] * h[i] + p.b_bar[i] * x;
      hmax = std::max(hmax, std::fabs(h[i]));
    }
  }
  CHECK(hmax <= bound + 1e-12);
}

TEST_CASE("scan gradients pass finite differences at L=16") {
  Rng rng(59);
  SsmParams p = SsmParams::init(3, 4, rng.derive("p"));
  GradCheckResult r = check_diffop(
      SelectiveScanOp{4, true},
      {oracle::random_array({16, 3}, rng), p.log_a, p.w_b, p.w_c, p.w_delta, p.b_delta, p.d_skip},
      rng.derive("g"));
  INFO(r.max_rel_err, " at ", r.worst);
  CHECK(r.pass);
}

TEST_CASE("benchmark plumbing") {
  CHECK(benchmark_scan({64, 128}, 1, 1, 0).empty());

  auto rows = benchmark_scan({64, 128}, 1, 1, 2);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].len == 64);
  CHECK(rows[0].mean_seconds > 0.0);
  CHECK(rows[1].mean_seconds > 0.0);

  CHECK_THROWS_AS(benchmark_scan({128, 64}, 2, 2, 1), ParamError);
  CHECK_THROWS_AS(fit_loglog_slope({{64, 1e-3, 0.0}}), ParamError);
}
