#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "hsmamba/data.hpp"
#include "hsmamba/network.hpp"

namespace hsmamba {

struct TrainConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int max_epochs = 500;
  int patience = 50;  // early stop on validation OA; <= 0 disables
  std::uint64_t seed = 1;
};

// Confusion-matrix metrics. OA = trace/total, AA = mean per-class recall over
// classes with support, kappa = (OA - p_e) / (1 - p_e).
struct Metrics {
  std::size_t num_classes = 0;
  std::vector<std::size_t> confusion;  // [K,K], rows = reference, cols = predicted
  double oa = 0, aa = 0, kappa = 0;

  std::size_t total() const;
  double expected_agreement() const;  // p_e
};

Metrics compute_metrics(const std::vector<std::uint16_t>& pred, const LabelMap& labels,
                        const std::vector<std::uint8_t>& mask);

// mean over masked pixels of -log softmax(logits)[label-1]; logits [K,H,W]
class MaskedCrossEntropyOp final : public DiffOp {
 public:
  MaskedCrossEntropyOp(std::vector<std::uint16_t> labels, std::vector<std::uint8_t> mask);
  const char* name() const override { return "masked_cross_entropy"; }
  NdArray forward(const std::vector<const NdArray*>& in) const override;
  std::vector<NdArray> backward(const std::vector<const NdArray*>& in, const NdArray& out,
                                const NdArray& g) const override;

 private:
  std::vector<std::uint16_t> labels_;
  std::vector<std::uint8_t> mask_;
  std::size_t count_;
};

VarId masked_cross_entropy(Tape& t, VarId logits, const LabelMap& labels,
                           const std::vector<std::uint8_t>& mask);

// standard Adam with bias correction; state lives on the parameters
void adam_step(ParamStore& store, const TrainConfig& cfg);

struct EpochRow {
  int epoch;
  double train_loss, val_oa, val_aa, val_kappa;
};

struct TrainResult {
  std::vector<EpochRow> history;
  double best_val_oa = 0;
  int best_epoch = -1;
  int epochs_run = 0;
};

// Whole-scene training: one forward per epoch, loss masked to training pixels,
// validation metrics tracked per epoch, best-validation parameters restored at
// the end. Divergence (non-finite loss) aborts with the failing epoch.
TrainResult train(Network& net, const Cube& cube, const LabelMap& labels, const SplitMask& split,
                  const TrainConfig& cfg);

struct RunRow {
  int run;
  std::uint64_t seed;
  double oa, aa, kappa;
};

struct RunTable {
  std::vector<RunRow> rows;
  std::array<double, 3> mean{};  // oa, aa, kappa
  std::array<double, 3> stdev{};
};

RunTable aggregate_runs(const std::vector<RunRow>& rows);

void write_history_csv(std::ostream& os, const std::vector<EpochRow>& rows);
void write_results_csv(std::ostream& os, const RunTable& table);

// --- classification-map export ------------------------------------------------

using Rgb = std::array<std::uint8_t, 3>;

// entry 0 (unlabeled) is black; throws if fewer than K+1 entries are needed
std::vector<Rgb> default_palette(std::size_t num_classes);

void export_map(const std::vector<std::uint16_t>& pred, std::size_t height, std::size_t width,
                const std::vector<Rgb>& palette, const std::string& path);

// reads back a P6 map written by export_map (test / inversion helper)
std::vector<Rgb> read_ppm(const std::string& path, std::size_t& height, std::size_t& width);

}  // namespace hsmamba
