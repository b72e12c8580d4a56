#include "hsmamba/ops.hpp"

#include <algorithm>
#include <cmath>

namespace hsmamba {

namespace {

void expect_arity(const std::vector<const NdArray*>& in, std::size_t n, const char* op) {
  if (in.size() != n)
    throw ShapeError(std::string(op) + ": expected " + std::to_string(n) + " inputs, got " +
                     std::to_string(in.size()));
}

// broadcast plan for two equal-rank operands (extent match or 1 on one side)
struct Bcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
};

Bcast make_bcast(const NdArray& a, const NdArray& b, const char* op) {
  if (a.rank() != b.rank())
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Bcast bc;
  bc.out.resize(a.rank());
  for (std::size_t i = 0; i < a.rank(); ++i) {
    std::size_t ea = a.extent(i), eb = b.extent(i);
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
    bc.out[i] = std::max(ea, eb);
  }
  auto sa = row_major_strides(a.shape());
  auto sb = row_major_strides(b.shape());
  bc.stride_a.resize(a.rank());
  bc.stride_b.resize(a.rank());
  for (std::size_t i = 0; i < a.rank(); ++i) {
    bc.stride_a[i] = a.extent(i) == 1 ? 0 : sa[i];
    bc.stride_b[i] = b.extent(i) == 1 ? 0 : sb[i];
  }
  return bc;
}

// walks every output position of `bc`, handing (out_index, off_a, off_b) to fn
template <typename F>
void bcast_for_each(const Bcast& bc, F&& fn) {
  std::size_t n = shape_numel(bc.out);
  if (n == 0) return;
  std::size_t rank = bc.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offa = 0, offb = 0;
  for (std::size_t k = 0; k < n; ++k) {
    fn(k, offa, offb);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      offa += bc.stride_a[ax];
      offb += bc.stride_b[ax];
      if (idx[ax] < bc.out[ax]) break;
      offa -= bc.stride_a[ax] * bc.out[ax];
      offb -= bc.stride_b[ax] * bc.out[ax];
      idx[ax] = 0;
    }
  }
}

std::size_t spatial_size(const NdArray& x) {
  return x.extent(0) == 0 ? 0 : x.numel() / x.extent(0);
}

}  // namespace

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double softplus_inverse(double y) {
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

NdArray silu_eval(const NdArray& x) {
  NdArray y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] * sigmoid_scalar(x[i]);
  return y;
}

NdArray sigmoid_eval(const NdArray& x) {
  NdArray y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = sigmoid_scalar(x[i]);
  return y;
}

NdArray softplus_eval(const NdArray& x) {
  NdArray y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = softplus_scalar(x[i]);
  return y;
}

// --- PointwiseConvOp -------------------------------------------------------

NdArray PointwiseConvOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 3, name());
  const NdArray& x = *in[0];
  const NdArray& k = *in[1];
  const NdArray& b = *in[2];
  if (x.rank() < 1 || k.rank() != 2 || b.rank() != 1)
    throw ShapeError("pointwise_conv: want x[C,...], kernel[O,C], bias[O]");
  std::size_t cin = x.extent(0), cout = k.extent(0);
  if (k.extent(1) != cin)
    throw ShapeError("pointwise_conv: kernel expects " + std::to_string(k.extent(1)) +
                     " input channels, x has " + std::to_string(cin));
  if (b.extent(0) != cout) throw ShapeError("pointwise_conv: bias/kernel mismatch");
  std::size_t s = spatial_size(x);
  Shape os = x.shape();
  os[0] = cout;
  NdArray y(os);
  for (std::size_t o = 0; o < cout; ++o) {
    double* yo = y.data() + o * s;
    for (std::size_t p = 0; p < s; ++p) yo[p] = b[o];
    for (std::size_t i = 0; i < cin; ++i) {
      double w = k[o * cin + i];
      if (w == 0.0) continue;
      const double* xi = x.data() + i * s;
      for (std::size_t p = 0; p < s; ++p) yo[p] += w * xi[p];
    }
  }
  return y;
}

std::vector<NdArray> PointwiseConvOp::backward(const std::vector<const NdArray*>& in,
                                               const NdArray&, const NdArray& g) const {
  const NdArray& x = *in[0];
  const NdArray& k = *in[1];
  std::size_t cin = x.extent(0), cout = k.extent(0), s = spatial_size(x);
  NdArray dx(x.shape()), dk(k.shape()), db(in[2]->shape());
  for (std::size_t o = 0; o < cout; ++o) {
    const double* go = g.data() + o * s;
    double acc = 0.0;
    for (std::size_t p = 0; p < s; ++p) acc += go[p];
    db[o] = acc;
    for (std::size_t i = 0; i < cin; ++i) {
      const double* xi = x.data() + i * s;
      double* dxi = dx.data() + i * s;
      double w = k[o * cin + i];
      double dw = 0.0;
      for (std::size_t p = 0; p < s; ++p) {
        dw += go[p] * xi[p];
        dxi[p] += w * go[p];
      }
      dk[o * cin + i] = dw;
    }
  }
  return {std::move(dx), std::move(dk), std::move(db)};
}

// --- DilatedConv3x3Op ------------------------------------------------------

DilatedConv3x3Op::DilatedConv3x3Op(int dilation) : dilation_(dilation) {
  if (dilation < 1) throw ParamError("dilated_conv3x3: dilation must be >= 1");
}

NdArray DilatedConv3x3Op::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 2, name());
  const NdArray& x = *in[0];
  const NdArray& k = *in[1];
  if (x.rank() != 3 || k.rank() != 4 || k.extent(0) != 1 || k.extent(2) != 3 ||
      k.extent(3) != 3 || k.extent(1) != x.extent(0))
    throw ShapeError("dilated_conv3x3: want x[C,H,W], kernel[1,C,3,3]");
  std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  long d = dilation_;
  NdArray y({1, h, w});
  for (std::size_t ci = 0; ci < c; ++ci) {
    const double* xc = x.data() + ci * h * w;
    const double* kc = k.data() + ci * 9;
    for (long yy = 0; yy < static_cast<long>(h); ++yy)
      for (long xx = 0; xx < static_cast<long>(w); ++xx) {
        double acc = 0.0;
        for (long a = -1; a <= 1; ++a) {
          long sy = yy + a * d;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          for (long bb = -1; bb <= 1; ++bb) {
            long sx = xx + bb * d;
            if (sx < 0 || sx >= static_cast<long>(w)) continue;
            acc += kc[(a + 1) * 3 + (bb + 1)] * xc[sy * w + sx];
          }
        }
        y[yy * w + xx] += acc;
      }
  }
  return y;
}

std::vector<NdArray> DilatedConv3x3Op::backward(const std::vector<const NdArray*>& in,
                                                const NdArray&, const NdArray& g) const {
  const NdArray& x = *in[0];
  const NdArray& k = *in[1];
  std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  long d = dilation_;
  NdArray dx(x.shape()), dk(k.shape());
  for (std::size_t ci = 0; ci < c; ++ci) {
    const double* xc = x.data() + ci * h * w;
    const double* kc = k.data() + ci * 9;
    double* dxc = dx.data() + ci * h * w;
    double* dkc = dk.data() + ci * 9;
    for (long yy = 0; yy < static_cast<long>(h); ++yy)
      for (long xx = 0; xx < static_cast<long>(w); ++xx) {
        double gv = g[yy * w + xx];
        if (gv == 0.0) continue;
        for (long a = -1; a <= 1; ++a) {
          long sy = yy + a * d;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          for (long bb = -1; bb <= 1; ++bb) {
            long sx = xx + bb * d;
            if (sx < 0 || sx >= static_cast<long>(w)) continue;
            dkc[(a + 1) * 3 + (bb + 1)] += gv * xc[sy * w + sx];
            dxc[sy * w + sx] += gv * kc[(a + 1) * 3 + (bb + 1)];
          }
        }
      }
  }
  return {std::move(dx), std::move(dk)};
}

// --- GroupNormOp ------------------------------------------------------------

GroupNormOp::GroupNormOp(std::size_t groups, double eps) : groups_(groups), eps_(eps) {
  if (groups == 0) throw ParamError("group_norm: groups must be >= 1");
}

NdArray GroupNormOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 3, name());
  const NdArray& x = *in[0];
  const NdArray& scale = *in[1];
  const NdArray& shift = *in[2];
  std::size_t c = x.extent(0);
  if (c % groups_ != 0)
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible by " +
                     std::to_string(groups_) + " groups");
  if (scale.numel() != c || shift.numel() != c)
    throw ShapeError("group_norm: scale/shift must have one entry per channel");
  std::size_t s = spatial_size(x), cg = c / groups_, m = cg * s;
  NdArray y(x.shape());
  for (std::size_t gidx = 0; gidx < groups_; ++gidx) {
    const double* xg = x.data() + gidx * cg * s;
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += xg[i];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double dvi = xg[i] - mean;
      var += dvi * dvi;
    }
    var /= static_cast<double>(m);
    double inv = 1.0 / std::sqrt(var + eps_);
    for (std::size_t cc = 0; cc < cg; ++cc) {
      std::size_t ch = gidx * cg + cc;
      double* yc = y.data() + ch * s;
      const double* xc = x.data() + ch * s;
      for (std::size_t p = 0; p < s; ++p)
        yc[p] = scale[ch] * ((xc[p] - mean) * inv) + shift[ch];
    }
  }
  return y;
}

std::vector<NdArray> GroupNormOp::backward(const std::vector<const NdArray*>& in,
                                           const NdArray&, const NdArray& g) const {
  const NdArray& x = *in[0];
  const NdArray& scale = *in[1];
  std::size_t c = x.extent(0), s = spatial_size(x), cg = c / groups_, m = cg * s;
  NdArray dx(x.shape()), dscale(in[1]->shape()), dshift(in[2]->shape());
  std::vector<double> xhat(m), gh(m);
  for (std::size_t gidx = 0; gidx < groups_; ++gidx) {
    const double* xg = x.data() + gidx * cg * s;
    const double* gg = g.data() + gidx * cg * s;
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += xg[i];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double dvi = xg[i] - mean;
      var += dvi * dvi;
    }
    var /= static_cast<double>(m);
    double inv = 1.0 / std::sqrt(var + eps_);

    double mean_gh = 0.0, mean_ghx = 0.0;
    for (std::size_t cc = 0; cc < cg; ++cc) {
      std::size_t ch = gidx * cg + cc;
      double dsc = 0.0, dsh = 0.0;
      for (std::size_t p = 0; p < s; ++p) {
        std::size_t i = cc * s + p;
        xhat[i] = (xg[i] - mean) * inv;
        gh[i] = gg[i] * scale[ch];
        dsc += gg[i] * xhat[i];
        dsh += gg[i];
        mean_gh += gh[i];
        mean_ghx += gh[i] * xhat[i];
      }
      dscale[ch] = dsc;
      dshift[ch] = dsh;
    }
    mean_gh /= static_cast<double>(m);
    mean_ghx /= static_cast<double>(m);
    double* dxg = dx.data() + gidx * cg * s;
    for (std::size_t i = 0; i < m; ++i)
      dxg[i] = inv * (gh[i] - mean_gh - xhat[i] * mean_ghx);
  }
  return {std::move(dx), std::move(dscale), std::move(dshift)};
}

// --- elementwise activations ------------------------------------------------

NdArray SiluOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  return silu_eval(*in[0]);
}

std::vector<NdArray> SiluOp::backward(const std::vector<const NdArray*>& in, const NdArray&,
                                      const NdArray& g) const {
  const NdArray& x = *in[0];
  NdArray dx(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    double sg = sigmoid_scalar(x[i]);
    dx[i] = g[i] * sg * (1.0 + x[i] * (1.0 - sg));
  }
  return {std::move(dx)};
}

NdArray SigmoidOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  return sigmoid_eval(*in[0]);
}

std::vector<NdArray> SigmoidOp::backward(const std::vector<const NdArray*>&, const NdArray& out,
                                         const NdArray& g) const {
  NdArray dx(out.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) dx[i] = g[i] * out[i] * (1.0 - out[i]);
  return {std::move(dx)};
}

NdArray SoftplusOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  return softplus_eval(*in[0]);
}

std::vector<NdArray> SoftplusOp::backward(const std::vector<const NdArray*>& in, const NdArray&,
                                          const NdArray& g) const {
  const NdArray& x = *in[0];
  NdArray dx(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) dx[i] = g[i] * sigmoid_scalar(x[i]);
  return {std::move(dx)};
}

NdArray AffineScalarOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  const NdArray& x = *in[0];
  NdArray y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = a_ * x[i] + b_;
  return y;
}

std::vector<NdArray> AffineScalarOp::backward(const std::vector<const NdArray*>& in,
                                              const NdArray&, const NdArray& g) const {
  NdArray dx(in[0]->shape());
  for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] = a_ * g[i];
  return {std::move(dx)};
}

// --- add / broadcast arithmetic ----------------------------------------------

NdArray AddOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 2, name());
  const NdArray& a = *in[0];
  const NdArray& b = *in[1];
  if (!a.same_shape(b))
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  NdArray y(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) y[i] = a[i] + b[i];
  return y;
}

std::vector<NdArray> AddOp::backward(const std::vector<const NdArray*>&, const NdArray&,
                                     const NdArray& g) const {
  return {g, g};
}

NdArray AddBroadcastOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 2, name());
  Bcast bc = make_bcast(*in[0], *in[1], name());
  NdArray y(bc.out);
  const double* a = in[0]->data();
  const double* b = in[1]->data();
  bcast_for_each(bc, [&](std::size_t k, std::size_t oa, std::size_t ob) { y[k] = a[oa] + b[ob]; });
  return y;
}

std::vector<NdArray> AddBroadcastOp::backward(const std::vector<const NdArray*>& in,
                                              const NdArray&, const NdArray& g) const {
  Bcast bc = make_bcast(*in[0], *in[1], name());
  NdArray da(in[0]->shape()), db(in[1]->shape());
  bcast_for_each(bc, [&](std::size_t k, std::size_t oa, std::size_t ob) {
    da[oa] += g[k];
    db[ob] += g[k];
  });
  return {std::move(da), std::move(db)};
}

NdArray MulBroadcastOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 2, name());
  Bcast bc = make_bcast(*in[0], *in[1], name());
  NdArray y(bc.out);
  const double* a = in[0]->data();
  const double* b = in[1]->data();
  bcast_for_each(bc, [&](std::size_t k, std::size_t oa, std::size_t ob) { y[k] = a[oa] * b[ob]; });
  return y;
}

std::vector<NdArray> MulBroadcastOp::backward(const std::vector<const NdArray*>& in,
                                              const NdArray&, const NdArray& g) const {
  Bcast bc = make_bcast(*in[0], *in[1], name());
  NdArray da(in[0]->shape()), db(in[1]->shape());
  const double* a = in[0]->data();
  const double* b = in[1]->data();
  bcast_for_each(bc, [&](std::size_t k, std::size_t oa, std::size_t ob) {
    da[oa] += g[k] * b[ob];
    db[ob] += g[k] * a[oa];
  });
  return {std::move(da), std::move(db)};
}

// --- shape plumbing -----------------------------------------------------------

NdArray ConcatOp::forward(const std::vector<const NdArray*>& in) const {
  if (in.empty()) throw ShapeError("concat: no inputs");
  const NdArray& first = *in[0];
  if (axis_ >= first.rank()) throw ShapeError("concat: axis out of range");
  Shape os = first.shape();
  std::size_t total = 0;
  for (const NdArray* a : in) {
    if (a->rank() != first.rank()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.rank(); ++i)
      if (i != axis_ && a->extent(i) != first.extent(i))
        throw ShapeError("concat: extent mismatch off the concat axis");
    total += a->extent(axis_);
  }
  os[axis_] = total;
  NdArray y(os);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis_; ++i) outer *= os[i];
  for (std::size_t i = axis_ + 1; i < os.size(); ++i) inner *= os[i];
  std::size_t row = total * inner;
  std::size_t at = 0;
  for (const NdArray* a : in) {
    std::size_t len = a->extent(axis_) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(a->data() + o * len, len, y.data() + o * row + at);
    at += len;
  }
  return y;
}

std::vector<NdArray> ConcatOp::backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                        const NdArray& g) const {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis_; ++i) outer *= out.extent(i);
  for (std::size_t i = axis_ + 1; i < out.rank(); ++i) inner *= out.extent(i);
  std::size_t row = out.extent(axis_) * inner;
  std::vector<NdArray> grads;
  grads.reserve(in.size());
  std::size_t at = 0;
  for (const NdArray* a : in) {
    NdArray da(a->shape());
    std::size_t len = a->extent(axis_) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(g.data() + o * row + at, len, da.data() + o * len);
    at += len;
    grads.push_back(std::move(da));
  }
  return grads;
}

NdArray SliceAxisOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  const NdArray& x = *in[0];
  if (axis_ >= x.rank() || start_ + len_ > x.extent(axis_))
    throw ShapeError("slice_axis: slice out of range");
  Shape os = x.shape();
  os[axis_] = len_;
  NdArray y(os);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis_; ++i) outer *= x.extent(i);
  for (std::size_t i = axis_ + 1; i < x.rank(); ++i) inner *= x.extent(i);
  std::size_t row = x.extent(axis_) * inner, orow = len_ * inner;
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data() + o * row + start_ * inner, orow, y.data() + o * orow);
  return y;
}

std::vector<NdArray> SliceAxisOp::backward(const std::vector<const NdArray*>& in, const NdArray&,
                                           const NdArray& g) const {
  const NdArray& x = *in[0];
  NdArray dx(x.shape());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis_; ++i) outer *= x.extent(i);
  for (std::size_t i = axis_ + 1; i < x.rank(); ++i) inner *= x.extent(i);
  std::size_t row = x.extent(axis_) * inner, orow = len_ * inner;
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(g.data() + o * orow, orow, dx.data() + o * row + start_ * inner);
  return {std::move(dx)};
}

NdArray TransposeLast2Op::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  const NdArray& x = *in[0];
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank must be >= 2");
  Shape os = x.shape();
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  NdArray y(os);
  std::size_t a = x.extent(x.rank() - 2), b = x.extent(x.rank() - 1);
  std::size_t outer = x.numel() / (a * b);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* xo = x.data() + o * a * b;
    double* yo = y.data() + o * a * b;
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j) yo[j * a + i] = xo[i * b + j];
  }
  return y;
}

std::vector<NdArray> TransposeLast2Op::backward(const std::vector<const NdArray*>& in,
                                                const NdArray&, const NdArray& g) const {
  TransposeLast2Op back;
  std::vector<const NdArray*> gin{&g};
  (void)in;
  return {back.forward(gin)};
}

NdArray ReshapeOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  return in[0]->reshaped(target_);
}

std::vector<NdArray> ReshapeOp::backward(const std::vector<const NdArray*>& in, const NdArray&,
                                         const NdArray& g) const {
  return {g.reshaped(in[0]->shape())};
}

// --- patch tiling ---------------------------------------------------------------

PatchifyOp::PatchifyOp(std::size_t patch) : patch_(patch) {
  if (patch == 0) throw ParamError("patchify: patch size must be >= 1");
}

NdArray PatchifyOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  const NdArray& x = *in[0];
  if (x.rank() != 3) throw ShapeError("patchify: want [C,H,W]");
  std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2), p = patch_;
  std::size_t rows = (h + p - 1) / p, cols = (w + p - 1) / p;
  NdArray y({rows * cols, c, p, p});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t cl = 0; cl < cols; ++cl) {
      double* yp = y.data() + (r * cols + cl) * c * p * p;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* xc = x.data() + ch * h * w;
        for (std::size_t py = 0; py < p; ++py) {
          std::size_t sy = r * p + py;
          for (std::size_t px = 0; px < p; ++px) {
            std::size_t sx = cl * p + px;
            yp[ch * p * p + py * p + px] = (sy < h && sx < w) ? xc[sy * w + sx] : 0.0;
          }
        }
      }
    }
  return y;
}

std::vector<NdArray> PatchifyOp::backward(const std::vector<const NdArray*>& in, const NdArray&,
                                          const NdArray& g) const {
  const NdArray& x = *in[0];
  std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2), p = patch_;
  std::size_t cols = (w + p - 1) / p, rows = (h + p - 1) / p;
  NdArray dx(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t cl = 0; cl < cols; ++cl) {
      const double* gp = g.data() + (r * cols + cl) * c * p * p;
      for (std::size_t ch = 0; ch < c; ++ch) {
        double* dxc = dx.data() + ch * h * w;
        for (std::size_t py = 0; py < p; ++py) {
          std::size_t sy = r * p + py;
          if (sy >= h) continue;
          for (std::size_t px = 0; px < p; ++px) {
            std::size_t sx = cl * p + px;
            if (sx >= w) continue;
            dxc[sy * w + sx] += gp[ch * p * p + py * p + px];
          }
        }
      }
    }
  return {std::move(dx)};
}

UnpatchifyOp::UnpatchifyOp(std::size_t height, std::size_t width, std::size_t patch)
    : height_(height), width_(width), patch_(patch) {
  if (patch == 0) throw ParamError("unpatchify: patch size must be >= 1");
}

NdArray UnpatchifyOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  const NdArray& x = *in[0];
  std::size_t p = patch_;
  std::size_t rows = (height_ + p - 1) / p, cols = (width_ + p - 1) / p;
  if (x.rank() != 4 || x.extent(0) != rows * cols || x.extent(2) != p || x.extent(3) != p)
    throw ShapeError("unpatchify: patch stack does not tile " + std::to_string(height_) + "x" +
                     std::to_string(width_) + " with P=" + std::to_string(p));
  std::size_t c = x.extent(1);
  NdArray y({c, height_, width_});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t cl = 0; cl < cols; ++cl) {
      const double* xp = x.data() + (r * cols + cl) * c * p * p;
      for (std::size_t ch = 0; ch < c; ++ch) {
        double* yc = y.data() + ch * height_ * width_;
        for (std::size_t py = 0; py < p; ++py) {
          std::size_t sy = r * p + py;
          if (sy >= height_) continue;
          for (std::size_t px = 0; px < p; ++px) {
            std::size_t sx = cl * p + px;
            if (sx >= width_) continue;
            yc[sy * width_ + sx] = xp[ch * p * p + py * p + px];
          }
        }
      }
    }
  return y;
}

std::vector<NdArray> UnpatchifyOp::backward(const std::vector<const NdArray*>& in, const NdArray&,
                                            const NdArray& g) const {
  const NdArray& x = *in[0];
  std::size_t p = patch_, c = x.extent(1);
  std::size_t rows = (height_ + p - 1) / p, cols = (width_ + p - 1) / p;
  NdArray dx(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t cl = 0; cl < cols; ++cl) {
      double* dxp = dx.data() + (r * cols + cl) * c * p * p;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* gc = g.data() + ch * height_ * width_;
        for (std::size_t py = 0; py < p; ++py) {
          std::size_t sy = r * p + py;
          if (sy >= height_) continue;
          for (std::size_t px = 0; px < p; ++px) {
            std::size_t sx = cl * p + px;
            if (sx >= width_) continue;
            dxp[ch * p * p + py * p + px] = gc[sy * width_ + sx];
          }
        }
      }
    }
  return {std::move(dx)};
}

// --- pooling / resampling --------------------------------------------------------

NdArray AvgPool2x2Op::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  const NdArray& x = *in[0];
  if (x.rank() != 3) throw ShapeError("avg_pool2x2: want [C,H,W]");
  std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  NdArray y({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* xc = x.data() + ch * h * w;
    double* yc = y.data() + ch * oh * ow;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b) {
            std::size_t sy = 2 * i + a, sx = 2 * j + b;
            if (sy < h && sx < w) acc += xc[sy * w + sx];  // high-side zero pad
          }
        yc[i * ow + j] = acc / 4.0;
      }
  }
  return y;
}

std::vector<NdArray> AvgPool2x2Op::backward(const std::vector<const NdArray*>& in, const NdArray&,
                                            const NdArray& g) const {
  const NdArray& x = *in[0];
  std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  NdArray dx(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* gc = g.data() + ch * oh * ow;
    double* dxc = dx.data() + ch * h * w;
    for (std::size_t sy = 0; sy < h; ++sy)
      for (std::size_t sx = 0; sx < w; ++sx)
        dxc[sy * w + sx] = gc[(sy / 2) * ow + (sx / 2)] / 4.0;
  }
  return {std::move(dx)};
}

UpsampleNearestOp::UpsampleNearestOp(std::size_t factor) : factor_(factor) {
  if (factor == 0) throw ParamError("upsample_nearest: factor must be >= 1");
}

NdArray UpsampleNearestOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  const NdArray& x = *in[0];
  if (x.rank() != 3) throw ShapeError("upsample_nearest: want [C,H,W]");
  std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2), f = factor_;
  NdArray y({c, h * f, w * f});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* xc = x.data() + ch * h * w;
    double* yc = y.data() + ch * h * f * w * f;
    for (std::size_t i = 0; i < h * f; ++i)
      for (std::size_t j = 0; j < w * f; ++j) yc[i * w * f + j] = xc[(i / f) * w + (j / f)];
  }
  return y;
}

std::vector<NdArray> UpsampleNearestOp::backward(const std::vector<const NdArray*>& in,
                                                 const NdArray&, const NdArray& g) const {
  const NdArray& x = *in[0];
  std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2), f = factor_;
  NdArray dx(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* gc = g.data() + ch * h * f * w * f;
    double* dxc = dx.data() + ch * h * w;
    for (std::size_t i = 0; i < h * f; ++i)
      for (std::size_t j = 0; j < w * f; ++j) dxc[(i / f) * w + (j / f)] += gc[i * w * f + j];
  }
  return {std::move(dx)};
}

NdArray CropHWOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  const NdArray& x = *in[0];
  if (x.rank() != 3 || x.extent(1) < height_ || x.extent(2) < width_)
    throw ShapeError("crop_hw: input smaller than crop target");
  std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  NdArray y({c, height_, width_});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < height_; ++i)
      std::copy_n(x.data() + ch * h * w + i * w, width_,
                  y.data() + ch * height_ * width_ + i * width_);
  return y;
}

std::vector<NdArray> CropHWOp::backward(const std::vector<const NdArray*>& in, const NdArray&,
                                        const NdArray& g) const {
  const NdArray& x = *in[0];
  std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  NdArray dx(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < height_; ++i)
      std::copy_n(g.data() + ch * height_ * width_ + i * width_, width_,
                  dx.data() + ch * h * w + i * w);
  return {std::move(dx)};
}

NdArray GlobalAvgPoolOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  const NdArray& x = *in[0];
  if (x.rank() != 3) throw ShapeError("global_avg_pool: want [C,H,W]");
  std::size_t c = x.extent(0), s = x.extent(1) * x.extent(2);
  NdArray y({c, 1, 1});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* xc = x.data() + ch * s;
    double acc = 0.0;
    for (std::size_t p = 0; p < s; ++p) acc += xc[p];
    y[ch] = acc / static_cast<double>(s);
  }
  return y;
}

std::vector<NdArray> GlobalAvgPoolOp::backward(const std::vector<const NdArray*>& in,
                                               const NdArray&, const NdArray& g) const {
  const NdArray& x = *in[0];
  std::size_t c = x.extent(0), s = x.extent(1) * x.extent(2);
  NdArray dx(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double v = g[ch] / static_cast<double>(s);
    double* dxc = dx.data() + ch * s;
    for (std::size_t p = 0; p < s; ++p) dxc[p] = v;
  }
  return {std::move(dx)};
}

NdArray GlobalMaxPoolOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  const NdArray& x = *in[0];
  if (x.rank() != 3) throw ShapeError("global_max_pool: want [C,H,W]");
  std::size_t c = x.extent(0), s = x.extent(1) * x.extent(2);
  NdArray y({c, 1, 1});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* xc = x.data() + ch * s;
    double m = xc[0];
    for (std::size_t p = 1; p < s; ++p) m = std::max(m, xc[p]);
    y[ch] = m;
  }
  return y;
}

std::vector<NdArray> GlobalMaxPoolOp::backward(const std::vector<const NdArray*>& in,
                                               const NdArray&, const NdArray& g) const {
  const NdArray& x = *in[0];
  std::size_t c = x.extent(0), s = x.extent(1) * x.extent(2);
  NdArray dx(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* xc = x.data() + ch * s;
    std::size_t best = 0;
    for (std::size_t p = 1; p < s; ++p)
      if (xc[p] > xc[best]) best = p;
    dx[ch * s + best] = g[ch];
  }
  return {std::move(dx)};
}

NdArray ChannelMeanOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  const NdArray& x = *in[0];
  if (x.rank() != 3) throw ShapeError("channel_mean: want [C,H,W]");
  std::size_t c = x.extent(0), s = x.extent(1) * x.extent(2);
  NdArray y({1, x.extent(1), x.extent(2)});
  for (std::size_t p = 0; p < s; ++p) {
    double acc = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) acc += x[ch * s + p];
    y[p] = acc / static_cast<double>(c);
  }
  return y;
}

std::vector<NdArray> ChannelMeanOp::backward(const std::vector<const NdArray*>& in, const NdArray&,
                                             const NdArray& g) const {
  const NdArray& x = *in[0];
  std::size_t c = x.extent(0), s = x.extent(1) * x.extent(2);
  NdArray dx(x.shape());
  for (std::size_t p = 0; p < s; ++p) {
    double v = g[p] / static_cast<double>(c);
    for (std::size_t ch = 0; ch < c; ++ch) dx[ch * s + p] = v;
  }
  return {std::move(dx)};
}

NdArray ChannelMaxOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  const NdArray& x = *in[0];
  if (x.rank() != 3) throw ShapeError("channel_max: want [C,H,W]");
  std::size_t c = x.extent(0), s = x.extent(1) * x.extent(2);
  NdArray y({1, x.extent(1), x.extent(2)});
  for (std::size_t p = 0; p < s; ++p) {
    double m = x[p];
    for (std::size_t ch = 1; ch < c; ++ch) m = std::max(m, x[ch * s + p]);
    y[p] = m;
  }
  return y;
}

std::vector<NdArray> ChannelMaxOp::backward(const std::vector<const NdArray*>& in, const NdArray&,
                                            const NdArray& g) const {
  const NdArray& x = *in[0];
  std::size_t c = x.extent(0), s = x.extent(1) * x.extent(2);
  NdArray dx(x.shape());
  for (std::size_t p = 0; p < s; ++p) {
    std::size_t best = 0;
    for (std::size_t ch = 1; ch < c; ++ch)
      if (x[ch * s + p] > x[best * s + p]) best = ch;
    dx[best * s + p] = g[p];
  }
  return {std::move(dx)};
}

NdArray SumAllOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 1, name());
  double acc = 0.0;
  for (std::size_t i = 0; i < in[0]->numel(); ++i) acc += (*in[0])[i];
  return NdArray::scalar(acc);
}

std::vector<NdArray> SumAllOp::backward(const std::vector<const NdArray*>& in, const NdArray&,
                                        const NdArray& g) const {
  return {NdArray::full(in[0]->shape(), g[0])};
}

NdArray ScaleByWeightEntryOp::forward(const std::vector<const NdArray*>& in) const {
  expect_arity(in, 2, name());
  const NdArray& x = *in[0];
  const NdArray& w = *in[1];
  if (w.rank() != 1 || index_ >= w.numel())
    throw ShapeError("scale_by_weight_entry: weight index out of range");
  NdArray y(x.shape());
  double v = w[index_];
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = v * x[i];
  return y;
}

std::vector<NdArray> ScaleByWeightEntryOp::backward(const std::vector<const NdArray*>& in,
                                                    const NdArray&, const NdArray& g) const {
  const NdArray& x = *in[0];
  const NdArray& w = *in[1];
  NdArray dx(x.shape()), dw(w.shape());
  double v = w[index_];
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    dx[i] = v * g[i];
    acc += g[i] * x[i];
  }
  dw[index_] = acc;
  return {std::move(dx), std::move(dw)};
}

// --- tape wrappers ---------------------------------------------------------------

VarId pointwise_conv(Tape& t, VarId x, VarId kernel, VarId bias) {
  return t.apply(std::make_shared<PointwiseConvOp>(), {x, kernel, bias});
}

VarId dilated_conv3x3(Tape& t, VarId x, VarId kernel, int dilation) {
  return t.apply(std::make_shared<DilatedConv3x3Op>(dilation), {x, kernel});
}

VarId group_norm(Tape& t, VarId x, std::size_t groups, VarId scale, VarId shift, double eps) {
  return t.apply(std::make_shared<GroupNormOp>(groups, eps), {x, scale, shift});
}

VarId silu(Tape& t, VarId x) { return t.apply(std::make_shared<SiluOp>(), {x}); }
VarId sigmoid(Tape& t, VarId x) { return t.apply(std::make_shared<SigmoidOp>(), {x}); }
VarId softplus(Tape& t, VarId x) { return t.apply(std::make_shared<SoftplusOp>(), {x}); }
VarId add(Tape& t, VarId a, VarId b) { return t.apply(std::make_shared<AddOp>(), {a, b}); }

VarId add_broadcast(Tape& t, VarId a, VarId b) {
  return t.apply(std::make_shared<AddBroadcastOp>(), {a, b});
}

VarId mul_broadcast(Tape& t, VarId a, VarId b) {
  return t.apply(std::make_shared<MulBroadcastOp>(), {a, b});
}

VarId affine_scalar(Tape& t, VarId x, double a, double b) {
  return t.apply(std::make_shared<AffineScalarOp>(a, b), {x});
}

VarId concat(Tape& t, std::size_t axis, const std::vector<VarId>& parts) {
  return t.apply(std::make_shared<ConcatOp>(axis), parts);
}

VarId slice_axis(Tape& t, VarId x, std::size_t axis, std::size_t start, std::size_t len) {
  return t.apply(std::make_shared<SliceAxisOp>(axis, start, len), {x});
}

VarId transpose_last2(Tape& t, VarId x) {
  return t.apply(std::make_shared<TransposeLast2Op>(), {x});
}

VarId reshape(Tape& t, VarId x, Shape target) {
  return t.apply(std::make_shared<ReshapeOp>(std::move(target)), {x});
}

VarId avg_pool2x2(Tape& t, VarId x) { return t.apply(std::make_shared<AvgPool2x2Op>(), {x}); }

VarId upsample_nearest(Tape& t, VarId x, std::size_t factor) {
  return t.apply(std::make_shared<UpsampleNearestOp>(factor), {x});
}

VarId crop_hw(Tape& t, VarId x, std::size_t height, std::size_t width) {
  return t.apply(std::make_shared<CropHWOp>(height, width), {x});
}

VarId global_avg_pool(Tape& t, VarId x) {
  return t.apply(std::make_shared<GlobalAvgPoolOp>(), {x});
}

VarId global_max_pool(Tape& t, VarId x) {
  return t.apply(std::make_shared<GlobalMaxPoolOp>(), {x});
}

VarId channel_mean(Tape& t, VarId x) { return t.apply(std::make_shared<ChannelMeanOp>(), {x}); }
VarId channel_max(Tape& t, VarId x) { return t.apply(std::make_shared<ChannelMaxOp>(), {x}); }
VarId sum_all(Tape& t, VarId x) { return t.apply(std::make_shared<SumAllOp>(), {x}); }

VarId scale_by_weight_entry(Tape& t, VarId x, VarId w, std::size_t index) {
  return t.apply(std::make_shared<ScaleByWeightEntryOp>(index), {x, w});
}

}  // namespace hsmamba
