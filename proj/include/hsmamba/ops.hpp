#pragma once

#include <memory>
#include <vector>

#include "hsmamba/tape.hpp"

namespace hsmamba {

// --- differentiable primitives -------------------------------------------
//
// Shapes follow the channel-major raster convention [C,H,W]; sequence data is
// [batch, length, channels]. Every op here passes the central finite-difference
// gradient check in the test suite.

// out[o,h,w] = bias[o] + sum_i kernel[o,i] * x[i,h,w]
class PointwiseConvOp final : public DiffOp {
 public:
  const char* name() const override { return "pointwise_conv"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

// 3x3 cross-correlation with taps spaced `dilation` apart; zero padding keeps
// the spatial extent. kernel is [1,C_in,3,3], output [1,H,W], no bias.
class DilatedConv3x3Op final : public DiffOp {
 public:
  explicit DilatedConv3x3Op(int dilation);
  const char* name() const override { return "dilated_conv3x3"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  int dilation_;
};

// per-group mean 0 / variance 1 over (channels-in-group x spatial), then
// per-channel affine. inputs: x[C,...], scale[C], shift[C]
class GroupNormOp final : public DiffOp {
 public:
  GroupNormOp(std::size_t groups, double eps = 1e-5);
  const char* name() const override { return "group_norm"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  std::size_t groups_;
  double eps_;
};

class SiluOp final : public DiffOp {
 public:
  const char* name() const override { return "silu"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

class SigmoidOp final : public DiffOp {
 public:
  const char* name() const override { return "sigmoid"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

class SoftplusOp final : public DiffOp {
 public:
  const char* name() const override { return "softplus"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

// y = a*x + b elementwise
class AffineScalarOp final : public DiffOp {
 public:
  AffineScalarOp(double a, double b) : a_(a), b_(b) {}
  const char* name() const override { return "affine_scalar"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  double a_, b_;
};

class AddOp final : public DiffOp {
 public:
  const char* name() const override { return "add"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

// Elementwise ops with broadcasting: equal rank, each axis either matches or
// has extent 1 on one side. Gradients reduce-sum over broadcast axes.
class AddBroadcastOp final : public DiffOp {
 public:
  const char* name() const override { return "add_broadcast"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

class MulBroadcastOp final : public DiffOp {
 public:
  const char* name() const override { return "mul_broadcast"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

class ConcatOp final : public DiffOp {
 public:
  explicit ConcatOp(std::size_t axis) : axis_(axis) {}
  const char* name() const override { return "concat"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  std::size_t axis_;
};

class SliceAxisOp final : public DiffOp {
 public:
  SliceAxisOp(std::size_t axis, std::size_t start, std::size_t len)
      : axis_(axis), start_(start), len_(len) {}
  const char* name() const override { return "slice_axis"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  std::size_t axis_, start_, len_;
};

// swap the last two axes
class TransposeLast2Op final : public DiffOp {
 public:
  const char* name() const override { return "transpose_last2"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

class ReshapeOp final : public DiffOp {
 public:
  explicit ReshapeOp(Shape target) : target_(std::move(target)) {}
  const char* name() const override { return "reshape"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  Shape target_;
};

// [D,H,W] -> [rows*cols, D, P, P], zero padding H and W up to multiples of P
// on the high side; patches tile the padded map row-major.
class PatchifyOp final : public DiffOp {
 public:
  explicit PatchifyOp(std::size_t patch);
  const char* name() const override { return "patchify"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  std::size_t patch_;
};

// inverse of PatchifyOp for a known target extent (crops the padding)
class UnpatchifyOp final : public DiffOp {
 public:
  UnpatchifyOp(std::size_t height, std::size_t width, std::size_t patch);
  const char* name() const override { return "unpatchify"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  std::size_t height_, width_, patch_;
};

// 2x2 average pooling, stride 2; odd extents are zero-padded on the high side
class AvgPool2x2Op final : public DiffOp {
 public:
  const char* name() const override { return "avg_pool2x2"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

class UpsampleNearestOp final : public DiffOp {
 public:
  explicit UpsampleNearestOp(std::size_t factor);
  const char* name() const override { return "upsample_nearest"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  std::size_t factor_;
};

// keep [:, :H, :W]
class CropHWOp final : public DiffOp {
 public:
  CropHWOp(std::size_t height, std::size_t width) : height_(height), width_(width) {}
  const char* name() const override { return "crop_hw"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  std::size_t height_, width_;
};

class GlobalAvgPoolOp final : public DiffOp {
 public:
  const char* name() const override { return "global_avg_pool"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

class GlobalMaxPoolOp final : public DiffOp {
 public:
  const char* name() const override { return "global_max_pool"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

class ChannelMeanOp final : public DiffOp {
 public:
  const char* name() const override { return "channel_mean"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

class ChannelMaxOp final : public DiffOp {
 public:
  const char* name() const override { return "channel_max"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

// sum of all elements, as a scalar [1]
class SumAllOp final : public DiffOp {
 public:
  const char* name() const override { return "sum_all"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;
};

// y = w[index] * x, with w a weight vector; used for per-group scaling
class ScaleByWeightEntryOp final : public DiffOp {
 public:
  explicit ScaleByWeightEntryOp(std::size_t index) : index_(index) {}
  const char* name() const override { return "scale_by_weight_entry"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  std::size_t index_;
};

// --- plain (non-tape) evaluation helpers ----------------------------------

NdArray silu_eval(const NdArray& x);
NdArray sigmoid_eval(const NdArray& x);
NdArray softplus_eval(const NdArray& x);

double sigmoid_scalar(double x);
double softplus_scalar(double x);
double softplus_inverse(double y);

// --- tape convenience wrappers --------------------------------------------

VarId pointwise_conv(Tape& t, VarId x, VarId kernel, VarId bias);
VarId dilated_conv3x3(Tape& t, VarId x, VarId kernel, int dilation);
VarId group_norm(Tape& t, VarId x, std::size_t groups, VarId scale, VarId shift,
                 double eps = 1e-5);
VarId silu(Tape& t, VarId x);
VarId sigmoid(Tape& t, VarId x);
VarId softplus(Tape& t, VarId x);
VarId add(Tape& t, VarId a, VarId b);
VarId add_broadcast(Tape& t, VarId a, VarId b);
VarId mul_broadcast(Tape& t, VarId a, VarId b);
VarId affine_scalar(Tape& t, VarId x, double a, double b);
VarId concat(Tape& t, std::size_t axis, const std::vector<VarId>& parts);
VarId slice_axis(Tape& t, VarId x, std::size_t axis, std::size_t start, std::size_t len);
VarId transpose_last2(Tape& t, VarId x);
VarId reshape(Tape& t, VarId x, Shape target);
VarId avg_pool2x2(Tape& t, VarId x);
VarId upsample_nearest(Tape& t, VarId x, std::size_t factor);
VarId crop_hw(Tape& t, VarId x, std::size_t height, std::size_t width);
VarId global_avg_pool(Tape& t, VarId x);
VarId global_max_pool(Tape& t, VarId x);
VarId channel_mean(Tape& t, VarId x);
VarId channel_max(Tape& t, VarId x);
VarId sum_all(Tape& t, VarId x);
VarId scale_by_weight_entry(Tape& t, VarId x, VarId w, std::size_t index);

}  // namespace hsmamba
