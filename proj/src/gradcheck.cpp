#include "hsmamba/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "hsmamba/attention.hpp"
#include "hsmamba/data.hpp"
#include "hsmamba/encoder.hpp"
#include "hsmamba/network.hpp"
#include "hsmamba/ops.hpp"
#include "hsmamba/ssm.hpp"
#include "hsmamba/train.hpp"

namespace hsmamba {

namespace {

double rel_err(double analytic, double numeric) {
  double scale = std::max({std::fabs(analytic), std::fabs(numeric), 1e-3});
  return std::fabs(analytic - numeric) / scale;
}

NdArray random_array(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  NdArray a(std::move(shape));
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

// accepts freshly derived streams
NdArray random_array(Shape shape, Rng&& rng, double lo = -1.0, double hi = 1.0) {
  return random_array(std::move(shape), rng, lo, hi);
}

}  // namespace

GradCheckResult GradCheckResult::merge(const std::vector<GradCheckResult>& parts) {
  GradCheckResult r;
  r.label = "merged";
  for (const auto& p : parts) {
    if (p.max_rel_err > r.max_rel_err) {
      r.max_rel_err = p.max_rel_err;
      r.worst = p.label + (p.worst.empty() ? "" : ": " + p.worst);
    }
    r.pass = r.pass && p.pass;
  }
  return r;
}

GradCheckResult check_diffop(const DiffOp& op, std::vector<NdArray> inputs, Rng rng,
                             const GradCheckOptions& opt) {
  GradCheckResult res;
  res.label = op.name();
  std::vector<const NdArray*> in;
  for (const NdArray& a : inputs) in.push_back(&a);
  NdArray out = op.forward(in);
  NdArray g = random_array(out.shape(), rng);
  std::vector<NdArray> analytic = op.backward(in, out, g);

  auto loss_at = [&]() {
    NdArray y = op.forward(in);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += g[i] * y[i];
    return acc;
  };

  std::vector<std::size_t> which = opt.check_inputs;
  if (which.empty())
    for (std::size_t i = 0; i < inputs.size(); ++i) which.push_back(i);

  for (std::size_t i : which) {
    NdArray& x = inputs[i];
    for (std::size_t e = 0; e < x.numel(); ++e) {
      double keep = x[e];
      x[e] = keep + opt.step;
      double up = loss_at();
      x[e] = keep - opt.step;
      double dn = loss_at();
      x[e] = keep;
      double numeric = (up - dn) / (2.0 * opt.step);
      double err = rel_err(analytic[i][e], numeric);
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst = "input " + std::to_string(i) + " element " + std::to_string(e);
      }
    }
  }
  res.pass = res.max_rel_err <= opt.tol;
  return res;
}

GradCheckResult check_scalar_fn(const std::string& label,
                                const std::function<double(const std::vector<NdArray>&)>& fn,
                                std::vector<NdArray> at,
                                const std::vector<NdArray>& analytic_grads,
                                const GradCheckOptions& opt) {
  GradCheckResult res;
  res.label = label;
  for (std::size_t i = 0; i < at.size(); ++i) {
    for (std::size_t e = 0; e < at[i].numel(); ++e) {
      double keep = at[i][e];
      at[i][e] = keep + opt.step;
      double up = fn(at);
      at[i][e] = keep - opt.step;
      double dn = fn(at);
      at[i][e] = keep;
      double numeric = (up - dn) / (2.0 * opt.step);
      double err = rel_err(analytic_grads[i][e], numeric);
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst = "input " + std::to_string(i) + " element " + std::to_string(e);
      }
    }
  }
  res.pass = res.max_rel_err <= opt.tol;
  return res;
}

namespace {

// finite differences over every parameter in the store, against grads already
// accumulated by one tape backward
GradCheckResult check_store_params(const std::string& label, ParamStore& store,
                                   const std::function<double()>& eval,
                                   const GradCheckOptions& opt) {
  GradCheckResult res;
  res.label = label;
  for (std::size_t pi = 0; pi < store.size(); ++pi) {
    Parameter& p = store[pi];
    for (std::size_t e = 0; e < p.value.numel(); ++e) {
      double keep = p.value[e];
      p.value[e] = keep + opt.step;
      double up = eval();
      p.value[e] = keep - opt.step;
      double dn = eval();
      p.value[e] = keep;
      double numeric = (up - dn) / (2.0 * opt.step);
      double err = rel_err(p.grad[e], numeric);
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst = p.name + "[" + std::to_string(e) + "]";
      }
    }
  }
  res.pass = res.max_rel_err <= opt.tol;
  return res;
}

void add_result(std::vector<GradCheckResult>& out, GradCheckResult r, const std::string& detail) {
  r.label += detail;
  out.push_back(std::move(r));
}

}  // namespace

std::vector<GradCheckResult> gradcheck_op_suite(std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  Rng root(seed);
  auto rng = [&](const char* label) { return root.derive(label); };

  // five shape variants per primitive
  const Shape rasters[5] = {{2, 3, 3}, {1, 4, 2}, {3, 2, 5}, {4, 1, 1}, {2, 5, 4}};

  for (int v = 0; v < 5; ++v) {
    Rng r = root.derive("shapes", v);
    const Shape& s = rasters[v];
    std::size_t cin = s[0];

    {
      std::size_t cout = 1 + v % 3;
      add_result(out,
                 check_diffop(PointwiseConvOp{},
                              {random_array(s, r), random_array({cout, cin}, r),
                               random_array({cout}, r)},
                              rng("pwc")),
                 "/v" + std::to_string(v));
    }
    add_result(out,
               check_diffop(DilatedConv3x3Op{1 + v % 2},
                            {random_array(s, r), random_array({1, cin, 3, 3}, r)},
                            rng("dil")),
               "/v" + std::to_string(v));
    {
      std::size_t groups = (v % 2 == 0) ? 1 : cin;  // both layer-wide and per-channel
      add_result(out,
                 check_diffop(GroupNormOp{groups},
                              {random_array(s, r), random_array({cin}, r, 0.5, 1.5),
                               random_array({cin}, r)},
                              rng("gn")),
                 "/v" + std::to_string(v));
    }
    add_result(out, check_diffop(SiluOp{}, {random_array(s, r, -3, 3)}, rng("silu")),
               "/v" + std::to_string(v));
    add_result(out, check_diffop(SigmoidOp{}, {random_array(s, r, -3, 3)}, rng("sig")),
               "/v" + std::to_string(v));
    add_result(out, check_diffop(SoftplusOp{}, {random_array(s, r, -3, 3)}, rng("sp")),
               "/v" + std::to_string(v));
    add_result(out,
               check_diffop(AffineScalarOp{1.0 + 0.5 * v, -0.25 * v}, {random_array(s, r)},
                            rng("aff")),
               "/v" + std::to_string(v));
    add_result(out, check_diffop(AddOp{}, {random_array(s, r), random_array(s, r)}, rng("add")),
               "/v" + std::to_string(v));
    {
      Shape sb = s;
      sb[v % 3] = 1;
      add_result(out,
                 check_diffop(AddBroadcastOp{}, {random_array(s, r), random_array(sb, r)},
                              rng("addb")),
                 "/v" + std::to_string(v));
      add_result(out,
                 check_diffop(MulBroadcastOp{}, {random_array(s, r), random_array(sb, r)},
                              rng("mulb")),
                 "/v" + std::to_string(v));
    }
    {
      std::size_t axis = v % 3;
      add_result(out,
                 check_diffop(ConcatOp{axis}, {random_array(s, r), random_array(s, r)},
                              rng("cat")),
                 "/v" + std::to_string(v));
      std::size_t len = std::max<std::size_t>(s[axis] / 2, 1);
      add_result(out,
                 check_diffop(SliceAxisOp{axis, s[axis] - len, len}, {random_array(s, r)},
                              rng("slice")),
                 "/v" + std::to_string(v));
    }
    add_result(out, check_diffop(TransposeLast2Op{}, {random_array(s, r)}, rng("tr")),
               "/v" + std::to_string(v));
    add_result(out,
               check_diffop(ReshapeOp{{s[0] * s[1] * s[2]}}, {random_array(s, r)}, rng("rs")),
               "/v" + std::to_string(v));
    {
      std::size_t p = 1 + v % 3;
      add_result(out, check_diffop(PatchifyOp{p}, {random_array(s, r)}, rng("patch")),
                 "/v" + std::to_string(v));
      std::size_t rows = (s[1] + p - 1) / p, cols = (s[2] + p - 1) / p;
      add_result(out,
                 check_diffop(UnpatchifyOp{s[1], s[2], p},
                              {random_array({rows * cols, s[0], p, p}, r)}, rng("unpatch")),
                 "/v" + std::to_string(v));
    }
    add_result(out, check_diffop(AvgPool2x2Op{}, {random_array(s, r)}, rng("pool")),
               "/v" + std::to_string(v));
    add_result(out,
               check_diffop(UpsampleNearestOp{static_cast<std::size_t>(1 + v % 3)},
                            {random_array(s, r)}, rng("up")),
               "/v" + std::to_string(v));
    add_result(out,
               check_diffop(CropHWOp{std::max<std::size_t>(s[1] - 1, 1),
                                     std::max<std::size_t>(s[2] - 1, 1)},
                            {random_array(s, r)}, rng("crop")),
               "/v" + std::to_string(v));
    add_result(out, check_diffop(GlobalAvgPoolOp{}, {random_array(s, r)}, rng("gap")),
               "/v" + std::to_string(v));
    add_result(out, check_diffop(GlobalMaxPoolOp{}, {random_array(s, r)}, rng("gmp")),
               "/v" + std::to_string(v));
    add_result(out, check_diffop(ChannelMeanOp{}, {random_array(s, r)}, rng("cmean")),
               "/v" + std::to_string(v));
    add_result(out, check_diffop(ChannelMaxOp{}, {random_array(s, r)}, rng("cmax")),
               "/v" + std::to_string(v));
    add_result(out,
               check_diffop(ScaleByWeightEntryOp{static_cast<std::size_t>(v) % 3},
                            {random_array(s, r), random_array({3}, r)}, rng("scale")),
               "/v" + std::to_string(v));
  }

  // selective scan: five size variants, both ZOH modes
  for (int v = 0; v < 5; ++v) {
    Rng r = root.derive("scan-shapes", v);
    std::size_t dim = 1 + v % 3, state = 1 + (v + 1) % 3, len = 2 + v;
    SsmParams p = SsmParams::init(dim, state, r.derive("p"));
    Shape xs = (v % 2 == 0) ? Shape{len, dim} : Shape{2, len, dim};
    add_result(out,
               check_diffop(SelectiveScanOp{state, v != 4},
                            {random_array(xs, r), p.log_a, p.w_b, p.w_c, p.w_delta, p.b_delta,
                             p.d_skip},
                            rng("scan")),
               "/v" + std::to_string(v));
  }

  // masked cross-entropy over five random label/mask draws
  for (int v = 0; v < 5; ++v) {
    Rng r = root.derive("ce-shapes", v);
    std::size_t k = 2 + v % 3, h = 2 + v % 2, w = 2;
    std::vector<std::uint16_t> labels(h * w);
    std::vector<std::uint8_t> mask(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      labels[i] = static_cast<std::uint16_t>(1 + r.below(k));
      mask[i] = r.uniform() < 0.7;
    }
    mask[0] = 1;  // never empty
    add_result(out,
               check_diffop(MaskedCrossEntropyOp{labels, mask},
                            {random_array({k, h, w}, r, -2, 2)}, rng("ce")),
               "/v" + std::to_string(v));
  }

  return out;
}

std::vector<GradCheckResult> gradcheck_block_suite(std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  Rng root(seed);
  GradCheckOptions opt;

  // dual-domain encoder stage, tiny config
  {
    ParamStore store;
    StageEncoderParams sp =
        make_stage_encoder(store, "enc", 4, 2, 2, 2, 2, true, root.derive("enc"));
    NdArray f = random_array({4, 4, 4}, root.derive("enc-f"));
    NdArray w1 = random_array({4, 4, 4}, root.derive("enc-w1"));
    NdArray w2 = random_array({4, 4, 4}, root.derive("enc-w2"));
    auto eval = [&]() {
      Tape t;
      auto [spe, spa] = encoder_forward(t, t.constant(f), sp, true);
      double acc = 0.0;
      const NdArray& a = t.value(spe);
      const NdArray& b = t.value(spa);
      for (std::size_t i = 0; i < a.numel(); ++i) acc += w1[i] * a[i] + w2[i] * b[i];
      return acc;
    };
    store.zero_grads();
    {
      Tape t;
      auto [spe, spa] = encoder_forward(t, t.constant(f), sp, true);
      VarId mixed = add(t, mul_broadcast(t, spe, t.constant(w1)),
                        mul_broadcast(t, spa, t.constant(w2)));
      t.backward(sum_all(t, mixed));
    }
    out.push_back(check_store_params("encoder_stage", store, eval, opt));
  }

  // attention gates
  {
    ParamStore store;
    StageGateParams gates = make_stage_gates(store, "lgi", 4, 2, root.derive("lgi"));
    NdArray f = random_array({4, 3, 3}, root.derive("lgi-f"));
    NdArray spe_in = random_array({4, 3, 3}, root.derive("lgi-spe"));
    NdArray spa_in = random_array({4, 3, 3}, root.derive("lgi-spa"));
    NdArray w = random_array({4, 3, 3}, root.derive("lgi-w"));
    auto build = [&](Tape& t) {
      VarId fv = t.constant(f);
      VarId ws = spectral_gate(t, fv, gates.spectral);
      VarId wp = spatial_gate(t, fv, gates.spatial);
      auto [gs, gp] = apply_global_gates(t, t.constant(spe_in), t.constant(spa_in), ws, wp);
      VarId mix = add(t, gs, gp);
      return sum_all(t, mul_broadcast(t, mix, t.constant(w)));
    };
    auto eval = [&]() {
      Tape t;
      return t.value(build(t))[0];
    };
    store.zero_grads();
    {
      Tape t;
      t.backward(build(t));
    }
    out.push_back(check_store_params("attention_gates", store, eval, opt));
  }

  // gated fusion
  {
    ParamStore store;
    Rng r = root.derive("fuse");
    FusionParams fp;
    fp.gate_kernel = &store.create("fuse.kernel", random_array({1, 8}, r));
    fp.gate_bias = &store.create("fuse.bias", random_array({1}, r));
    NdArray a = random_array({4, 3, 3}, root.derive("fuse-a"));
    NdArray b = random_array({4, 3, 3}, root.derive("fuse-b"));
    NdArray w = random_array({4, 3, 3}, root.derive("fuse-w"));
    auto build = [&](Tape& t) {
      VarId fused = fuse(t, t.constant(a), t.constant(b), FusionMode::Gated, fp);
      return sum_all(t, mul_broadcast(t, fused, t.constant(w)));
    };
    auto eval = [&]() {
      Tape t;
      return t.value(build(t))[0];
    };
    store.zero_grads();
    {
      Tape t;
      t.backward(build(t));
    }
    out.push_back(check_store_params("gated_fusion", store, eval, opt));
  }

  return out;
}

std::vector<GradCheckResult> gradcheck_model_suite(std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  SynthScene scene = synth_scene(8, 8, 3, 3, 0.05, seed + 17);
  Cube cube = normalize(scene.cube);
  SplitMask split = stratified_split(scene.labels, 5, 3, {}, seed + 5);

  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.base_patch = 2;
  cfg.groups_spe = 2;
  cfg.groups_spa = 2;
  cfg.state_dim = 2;
  cfg.num_classes = 3;
  cfg.gn_groups = 4;
  cfg.tau = 4;
  Network net(cfg, cube.bands(), seed);

  auto eval = [&]() {
    Tape t;
    VarId logits = net.forward(t, cube.values);
    VarId loss = masked_cross_entropy(t, logits, scene.labels, split.train);
    return t.value(loss)[0];
  };
  net.store().zero_grads();
  {
    Tape t;
    VarId logits = net.forward(t, cube.values);
    VarId loss = masked_cross_entropy(t, logits, scene.labels, split.train);
    t.backward(loss);
  }
  out.push_back(check_store_params("tiny_model_end_to_end", net.store(), eval, {}));
  return out;
}

}  // namespace hsmamba
