#include "hsmamba/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

namespace hsmamba {

std::size_t Metrics::total() const {
  std::size_t n = 0;
  for (std::size_t v : confusion) n += v;
  return n;
}

double Metrics::expected_agreement() const {
  std::size_t k = num_classes, n = total();
  if (n == 0) return 0.0;
  double pe = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    double row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += static_cast<double>(confusion[i * k + j]);
      col += static_cast<double>(confusion[j * k + i]);
    }
    pe += row * col;
  }
  return pe / (static_cast<double>(n) * static_cast<double>(n));
}

Metrics compute_metrics(const std::vector<std::uint16_t>& pred, const LabelMap& labels,
                        const std::vector<std::uint8_t>& mask) {
  if (pred.size() != labels.labels.size() || mask.size() != labels.labels.size())
    throw ShapeError("compute_metrics: prediction/label/mask size mismatch");
  std::size_t k = labels.num_classes();
  Metrics m;
  m.num_classes = k;
  m.confusion.assign(k * k, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    std::uint16_t ref = labels.labels[i];
    std::uint16_t hyp = pred[i];
    if (ref == 0) continue;  // unlabeled never scores
    if (hyp < 1 || hyp > k) throw ParamError("compute_metrics: prediction out of class range");
    ++m.confusion[(ref - 1) * k + (hyp - 1)];
  }
  std::size_t n = m.total();
  if (n == 0) throw ParamError("compute_metrics: empty evaluation mask");
  std::size_t diag = 0;
  for (std::size_t i = 0; i < k; ++i) diag += m.confusion[i * k + i];
  m.oa = static_cast<double>(diag) / static_cast<double>(n);

  double recall_sum = 0.0;
  std::size_t supported = 0;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t row = 0;
    for (std::size_t j = 0; j < k; ++j) row += m.confusion[i * k + j];
    if (row == 0) continue;  // class absent from this mask
    recall_sum += static_cast<double>(m.confusion[i * k + i]) / static_cast<double>(row);
    ++supported;
  }
  m.aa = supported ? recall_sum / static_cast<double>(supported) : 0.0;

  double pe = m.expected_agreement();
  m.kappa = pe >= 1.0 ? (m.oa >= 1.0 ? 1.0 : 0.0) : (m.oa - pe) / (1.0 - pe);
  return m;
}

// --- loss -------------------------------------------------------------------

MaskedCrossEntropyOp::MaskedCrossEntropyOp(std::vector<std::uint16_t> labels,
                                           std::vector<std::uint8_t> mask)
    : labels_(std::move(labels)), mask_(std::move(mask)) {
  if (labels_.size() != mask_.size())
    throw ShapeError("masked_cross_entropy: labels/mask size mismatch");
  count_ = 0;
  for (std::size_t i = 0; i < mask_.size(); ++i) count_ += (mask_[i] && labels_[i] > 0);
  if (count_ == 0) throw ParamError("masked_cross_entropy: empty mask");
}

NdArray MaskedCrossEntropyOp::forward(const std::vector<const NdArray*>& in) const {
  if (in.size() != 1) throw ShapeError("masked_cross_entropy: one input");
  const NdArray& logits = *in[0];
  if (logits.rank() != 3) throw ShapeError("masked_cross_entropy: want [K,H,W]");
  std::size_t k = logits.extent(0), s = logits.extent(1) * logits.extent(2);
  if (s != labels_.size()) throw ShapeError("masked_cross_entropy: raster size mismatch");
  double loss = 0.0;
  for (std::size_t p = 0; p < s; ++p) {
    if (!mask_[p] || labels_[p] == 0) continue;
    if (labels_[p] > k) throw ParamError("masked_cross_entropy: label exceeds class count");
    double mx = logits[p];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits[c * s + p]);
    double lse = 0.0;
    for (std::size_t c = 0; c < k; ++c) lse += std::exp(logits[c * s + p] - mx);
    lse = mx + std::log(lse);
    loss += lse - logits[(labels_[p] - 1) * s + p];
  }
  return NdArray::scalar(loss / static_cast<double>(count_));
}

std::vector<NdArray> MaskedCrossEntropyOp::backward(const std::vector<const NdArray*>& in,
                                                    const NdArray&, const NdArray& g) const {
  const NdArray& logits = *in[0];
  std::size_t k = logits.extent(0), s = logits.extent(1) * logits.extent(2);
  NdArray dl(logits.shape());
  double scale = g[0] / static_cast<double>(count_);
  for (std::size_t p = 0; p < s; ++p) {
    if (!mask_[p] || labels_[p] == 0) continue;
    double mx = logits[p];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits[c * s + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(logits[c * s + p] - mx);
    for (std::size_t c = 0; c < k; ++c) {
      double soft = std::exp(logits[c * s + p] - mx) / z;
      dl[c * s + p] = scale * (soft - (c + 1 == labels_[p] ? 1.0 : 0.0));
    }
  }
  return {std::move(dl)};
}

VarId masked_cross_entropy(Tape& t, VarId logits, const LabelMap& labels,
                           const std::vector<std::uint8_t>& mask) {
  return t.apply(std::make_shared<MaskedCrossEntropyOp>(labels.labels, mask), {logits});
}

// --- optimizer ---------------------------------------------------------------

void adam_step(ParamStore& store, const TrainConfig& cfg) {
  if (cfg.lr < 0) throw ConfigError("adam: lr must be >= 0");
  long t = ++store.adam_t;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store[i];
    if (p.adam_m.numel() != p.value.numel()) {
      p.adam_m = NdArray(p.value.shape());
      p.adam_v = NdArray(p.value.shape());
    }
    for (std::size_t j = 0; j < p.value.numel(); ++j) {
      double gj = p.grad[j];
      p.adam_m[j] = cfg.beta1 * p.adam_m[j] + (1.0 - cfg.beta1) * gj;
      p.adam_v[j] = cfg.beta2 * p.adam_v[j] + (1.0 - cfg.beta2) * gj * gj;
      double mhat = p.adam_m[j] / bc1;
      double vhat = p.adam_v[j] / bc2;
      p.value[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// --- training loop --------------------------------------------------------------

TrainResult train(Network& net, const Cube& cube, const LabelMap& labels, const SplitMask& split,
                  const TrainConfig& cfg) {
  if (labels.labels.size() != cube.height() * cube.width())
    throw ShapeError("train: cube and labels disagree on raster size");
  TrainResult res;
  std::vector<NdArray> best_values;
  long best_adam_t = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    net.store().zero_grads();
    Tape tape;
    VarId logits;
    VarId loss;
    try {
      logits = net.forward(tape, cube.values);
      loss = masked_cross_entropy(tape, logits, labels, split.train);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    double loss_value = tape.value(loss)[0];
    if (!std::isfinite(loss_value))
      throw NumericError("training diverged at epoch " + std::to_string(epoch));

    // same logits serve validation (forward has no train-only behavior)
    std::vector<std::uint16_t> pred = argmax_labels(tape.value(logits));
    Metrics val = compute_metrics(pred, labels, split.val);
    res.history.push_back({epoch, loss_value, val.oa, val.aa, val.kappa});
    res.epochs_run = epoch;

    // ties keep the latest (most-trained) state; patience counts from the
    // last strict improvement
    if (val.oa >= res.best_val_oa || res.best_epoch < 0) {
      if (val.oa > res.best_val_oa || res.best_epoch < 0) res.best_epoch = epoch;
      res.best_val_oa = val.oa;
      best_values.clear();
      for (std::size_t i = 0; i < net.store().size(); ++i)
        best_values.push_back(net.store()[i].value);
      best_adam_t = net.store().adam_t;
    } else if (cfg.patience > 0 && epoch - res.best_epoch >= cfg.patience) {
      break;
    }

    tape.backward(loss);
    adam_step(net.store(), cfg);
  }

  if (!best_values.empty()) {
    for (std::size_t i = 0; i < net.store().size(); ++i)
      net.store()[i].value = best_values[i];
    net.store().adam_t = best_adam_t;
  }
  return res;
}

RunTable aggregate_runs(const std::vector<RunRow>& rows) {
  if (rows.empty()) throw ParamError("aggregate_runs: no rows");
  RunTable t;
  t.rows = rows;
  auto metric = [](const RunRow& r, std::size_t i) {
    return i == 0 ? r.oa : (i == 1 ? r.aa : r.kappa);
  };
  std::size_t n = rows.size();
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0;
    for (const RunRow& r : rows) mean += metric(r, i);
    mean /= static_cast<double>(n);
    double var = 0;
    for (const RunRow& r : rows) var += (metric(r, i) - mean) * (metric(r, i) - mean);
    t.mean[i] = mean;
    t.stdev[i] = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
  }
  return t;
}

namespace {

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(10);
  ss << v;
  return ss.str();
}

}  // namespace

void write_history_csv(std::ostream& os, const std::vector<EpochRow>& rows) {
  os << "epoch,train_loss,val_oa,val_aa,val_kappa\n";
  for (const EpochRow& r : rows)
    os << r.epoch << ',' << fmt(r.train_loss) << ',' << fmt(r.val_oa) << ',' << fmt(r.val_aa)
       << ',' << fmt(r.val_kappa) << '\n';
}

void write_results_csv(std::ostream& os, const RunTable& table) {
  os << "run,seed,oa,aa,kappa\n";
  for (const RunRow& r : table.rows)
    os << r.run << ',' << r.seed << ',' << fmt(r.oa) << ',' << fmt(r.aa) << ',' << fmt(r.kappa)
       << '\n';
  os << "mean,," << fmt(table.mean[0]) << ',' << fmt(table.mean[1]) << ',' << fmt(table.mean[2])
     << '\n';
  os << "std,," << fmt(table.stdev[0]) << ',' << fmt(table.stdev[1]) << ',' << fmt(table.stdev[2])
     << '\n';
}

// --- map export -------------------------------------------------------------------

std::vector<Rgb> default_palette(std::size_t num_classes) {
  // fixed, well-separated colors; entry 0 stays black for unlabeled pixels
  static const std::vector<Rgb> base = {
      {{230, 25, 75}},  {{60, 180, 75}},   {{255, 225, 25}}, {{0, 130, 200}},
      {{245, 130, 48}}, {{145, 30, 180}},  {{70, 240, 240}}, {{240, 50, 230}},
      {{210, 245, 60}}, {{250, 190, 212}}, {{0, 128, 128}},  {{220, 190, 255}},
      {{170, 110, 40}}, {{255, 250, 200}}, {{128, 0, 0}},    {{170, 255, 195}},
      {{128, 128, 0}},  {{255, 215, 180}}, {{0, 0, 128}},    {{128, 128, 128}},
      {{255, 255, 255}}, {{160, 80, 120}}, {{90, 140, 60}},  {{100, 60, 220}},
  };
  std::vector<Rgb> pal;
  pal.push_back({{0, 0, 0}});
  for (std::size_t i = 0; i < num_classes; ++i) pal.push_back(base[i % base.size()]);
  return pal;
}

void export_map(const std::vector<std::uint16_t>& pred, std::size_t height, std::size_t width,
                const std::vector<Rgb>& palette, const std::string& path) {
  if (pred.size() != height * width) throw ShapeError("export_map: raster size mismatch");
  std::uint16_t top = 0;
  for (std::uint16_t v : pred) top = std::max(top, v);
  if (palette.size() < static_cast<std::size_t>(top) + 1)
    throw ParamError("export_map: palette has " + std::to_string(palette.size()) +
                     " entries, need " + std::to_string(top + 1));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << "P6\n" << width << ' ' << height << "\n255\n";
  for (std::uint16_t v : pred) {
    const Rgb& c = palette[v];
    f.write(reinterpret_cast<const char*>(c.data()), 3);
  }
  if (!f) throw IoError("short write to " + path);
}

std::vector<Rgb> read_ppm(const std::string& path, std::size_t& height, std::size_t& width) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string magic;
  std::size_t maxval;
  f >> magic >> width >> height >> maxval;
  if (magic != "P6" || maxval != 255) throw IoError(path + ": not a P6/255 pixmap");
  f.get();  // single whitespace after the header
  std::vector<Rgb> px(height * width);
  f.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size() * 3));
  if (!f) throw IoError(path + ": truncated pixel data");
  return px;
}

}  // namespace hsmamba
