#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "hsmamba/data.hpp"
#include "hsmamba/gradcheck.hpp"
#include "hsmamba/network.hpp"
#include "hsmamba/ssm.hpp"
#include "hsmamba/train.hpp"

namespace fs = std::filesystem;
using namespace hsmamba;

namespace {

// Everything a run needs beyond input/output paths. These keys are what the
// `key = value` config overlay and the effective-config dump speak.
struct RunOptions {
  std::size_t embed_dim = 128;
  std::size_t base_patch = 9;
  std::size_t groups_spe = 16;
  std::size_t groups_spa = 16;
  std::size_t state_dim = 16;
  std::size_t gn_groups = 8;
  std::size_t tau = 4;
  std::string fusion = "gated";
  bool pos_encoding = true;
  bool lgi = true;
  bool exact_zoh = true;
  std::string normalize_mode = "minmax";
  double lr = 3e-4;
  int max_epochs = 500;
  int patience = 50;
  int runs = 10;
  std::uint64_t seed = 1;
  int train_per_class = 30;
  int val_per_class = 10;

  ModelConfig model(std::size_t num_classes) const {
    ModelConfig cfg;
    cfg.embed_dim = embed_dim;
    cfg.base_patch = base_patch;
    cfg.groups_spe = groups_spe;
    cfg.groups_spa = groups_spa;
    cfg.state_dim = state_dim;
    cfg.num_classes = num_classes;
    cfg.gn_groups = gn_groups;
    cfg.tau = tau;
    cfg.fusion = fusion_mode_from_string(fusion);
    cfg.use_pos_encoding = pos_encoding;
    cfg.use_lgi = lgi;
    cfg.exact_zoh = exact_zoh;
    return cfg;
  }

  TrainConfig trainer(std::uint64_t run_seed) const {
    TrainConfig tc;
    tc.lr = lr;
    tc.max_epochs = max_epochs;
    tc.patience = patience;
    tc.seed = run_seed;
    return tc;
  }
};

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("expected a boolean, got '" + v + "'");
}

struct ConfigKeys {
  struct Entry {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };
  std::vector<std::pair<std::string, Entry>> entries;

  template <typename T>
  void add_num(const std::string& name, T* slot) {
    entries.push_back({name,
                       {[slot, name](const std::string& v) {
                          std::istringstream ss(v);
                          T parsed;
                          if (!(ss >> parsed) || !ss.eof())
                            throw ConfigError("bad value for " + name + ": '" + v + "'");
                          *slot = parsed;
                        },
                        [slot]() {
                          std::ostringstream ss;
                          ss.precision(12);
                          ss << *slot;
                          return ss.str();
                        }}});
  }

  void add_bool(const std::string& name, bool* slot) {
    entries.push_back({name,
                       {[slot](const std::string& v) { *slot = parse_bool(v); },
                        [slot]() { return *slot ? std::string("true") : std::string("false"); }}});
  }

  void add_string(const std::string& name, std::string* slot) {
    entries.push_back({name,
                       {[slot](const std::string& v) { *slot = v; },
                        [slot]() { return *slot; }}});
  }

  void apply_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      std::string body = line.substr(0, line.find('#'));
      auto trim = [](std::string s) {
        std::size_t a = s.find_first_not_of(" \t\r");
        std::size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      body = trim(body);
      if (body.empty()) continue;
      std::size_t eq = body.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + " line " + std::to_string(lineno) + ": expected `key = value`");
      std::string key = trim(body.substr(0, eq));
      std::string value = trim(body.substr(eq + 1));
      bool found = false;
      for (auto& [name, entry] : entries)
        if (name == key) {
          entry.set(value);
          found = true;
          break;
        }
      if (!found)
        throw ConfigError(path + " line " + std::to_string(lineno) + ": unknown key '" + key +
                          "'");
    }
  }

  std::string dump() const {
    std::ostringstream ss;
    for (const auto& [name, entry] : entries) ss << name << " = " << entry.get() << '\n';
    return ss.str();
  }
};

ConfigKeys make_keys(RunOptions& o) {
  ConfigKeys k;
  k.add_num("embed_dim", &o.embed_dim);
  k.add_num("base_patch", &o.base_patch);
  k.add_num("groups_spe", &o.groups_spe);
  k.add_num("groups_spa", &o.groups_spa);
  k.add_num("state_dim", &o.state_dim);
  k.add_num("gn_groups", &o.gn_groups);
  k.add_num("tau", &o.tau);
  k.add_string("fusion", &o.fusion);
  k.add_bool("pos_encoding", &o.pos_encoding);
  k.add_bool("lgi", &o.lgi);
  k.add_bool("exact_zoh", &o.exact_zoh);
  k.add_string("normalize", &o.normalize_mode);
  k.add_num("lr", &o.lr);
  k.add_num("max_epochs", &o.max_epochs);
  k.add_num("patience", &o.patience);
  k.add_num("runs", &o.runs);
  k.add_num("seed", &o.seed);
  k.add_num("train_per_class", &o.train_per_class);
  k.add_num("val_per_class", &o.val_per_class);
  return k;
}

// flags override the config file, so the overlay loads before CLI11 parses
std::string scan_for_config(int argc, char** argv) {
  for (int i = 1; i < argc - 1; ++i)
    if (std::string(argv[i]) == "--config") return argv[i + 1];
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return {};
}

void print_effective(const ConfigKeys& keys) {
  std::cout << "# effective config (replayable via --config)\n" << keys.dump() << std::flush;
}

void attach_model_flags(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--embed-dim", o.embed_dim, "embedding channels D");
  cmd->add_option("--patch", o.base_patch, "stage-1 patch size");
  cmd->add_option("--groups-spe", o.groups_spe, "spectral-domain scan groups");
  cmd->add_option("--groups-spa", o.groups_spa, "spatial-domain scan groups");
  cmd->add_option("--state", o.state_dim, "diagonal state size N");
  cmd->add_option("--gn-groups", o.gn_groups, "group-norm groups");
  cmd->add_option("--tau", o.tau, "channel-gate reduction ratio");
  cmd->add_option("--fusion", o.fusion, "gated|sum|adaptive_sum|concat");
  cmd->add_flag("--pos-encoding,!--no-pos-encoding", o.pos_encoding, "positional encoding");
  cmd->add_flag("--lgi,!--no-lgi", o.lgi, "global attention branch");
  cmd->add_flag("--exact-zoh,!--simple-zoh", o.exact_zoh, "exact vs first-order discretization");
  cmd->add_option("--normalize", o.normalize_mode, "minmax|zscore|none");
}

SplitMask make_split(const LabelMap& labels, const RunOptions& o, const std::string& splits_file,
                     std::uint64_t split_seed) {
  SplitOverrides ov;
  if (!splits_file.empty()) ov = load_split_overrides(splits_file);
  return stratified_split(labels, o.train_per_class, o.val_per_class, ov, split_seed);
}

Metrics eval_on_mask(Network& net, const Cube& cube, const LabelMap& labels,
                     const std::vector<std::uint8_t>& mask) {
  Tape tape;
  VarId logits = net.forward(tape, cube.values);
  return compute_metrics(argmax_labels(tape.value(logits)), labels, mask);
}

int cmd_synth(std::size_t h, std::size_t w, std::size_t c, std::size_t k, double noise,
              std::uint64_t seed, const std::string& out) {
  SynthScene scene = synth_scene(h, w, c, k, noise, seed);
  write_cube(scene.cube, out + ".hsic");
  write_labels(scene.labels, out + ".hsil");
  std::cout << "wrote " << out << ".hsic (" << c << "x" << h << "x" << w << ") and " << out
            << ".hsil (" << k << " classes)\n";
  return 0;
}

struct RunArtifacts {
  RunRow row;
  std::vector<EpochRow> history;
  std::vector<std::uint16_t> test_pred;
  double best_val_oa;
  Network* net = nullptr;
};

int cmd_train(const RunOptions& opts, const ConfigKeys& keys, const std::string& cube_path,
              const std::string& labels_path, const std::string& splits_file,
              std::uint64_t split_seed, bool split_seed_given, const std::string& out_dir,
              int jobs) {
  print_effective(keys);
  Cube cube = read_cube(cube_path);
  LabelMap labels = read_labels(labels_path);
  cube = normalize(cube, normalize_mode_from_string(opts.normalize_mode));
  std::size_t k = labels.num_classes();
  if (k == 0) throw ConfigError("label map has no labeled pixels");
  fs::create_directories(out_dir);

  int runs = std::max(opts.runs, 1);
  std::vector<RunRow> rows(runs);
  std::vector<std::unique_ptr<Network>> nets(runs);
  std::vector<TrainResult> results(runs);
  std::vector<SplitMask> splits(runs);

  auto one_run = [&](int r) {
    std::uint64_t run_seed = opts.seed + static_cast<std::uint64_t>(r);
    std::uint64_t sseed = split_seed_given ? split_seed : run_seed;
    splits[r] = make_split(labels, opts, splits_file, sseed);
    nets[r] = std::make_unique<Network>(opts.model(k), cube.bands(), run_seed);
    results[r] = train(*nets[r], cube, labels, splits[r], opts.trainer(run_seed));
    Metrics test = eval_on_mask(*nets[r], cube, labels, splits[r].test);
    rows[r] = {r, run_seed, test.oa, test.aa, test.kappa};
  };

  if (jobs <= 1) {
    for (int r = 0; r < runs; ++r) one_run(r);
  } else {
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int j = 0; j < std::min(jobs, runs); ++j)
      pool.emplace_back([&]() {
        for (int r = next.fetch_add(1); r < runs; r = next.fetch_add(1)) one_run(r);
      });
    for (auto& th : pool) th.join();
  }

  for (int r = 0; r < runs; ++r) {
    std::string base = out_dir + "/run" + std::to_string(r);
    std::ofstream hist(base + "_history.csv");
    write_history_csv(hist, results[r].history);
    save_checkpoint(nets[r]->store(), base + ".ckpt");
    Tape tape;
    VarId logits = nets[r]->forward(tape, cube.values);
    export_map(argmax_labels(tape.value(logits)), cube.height(), cube.width(),
               default_palette(k), base + "_map.ppm");
  }

  RunTable table = aggregate_runs(rows);
  {
    std::ofstream res(out_dir + "/results.csv");
    write_results_csv(res, table);
  }
  {
    std::ofstream cfg(out_dir + "/model.cfg");
    cfg << keys.dump();
  }
  std::cout << "run,seed,oa,aa,kappa\n";
  for (const RunRow& r : rows)
    std::cout << r.run << ',' << r.seed << ',' << r.oa << ',' << r.aa << ',' << r.kappa << '\n';
  std::cout << "mean oa=" << table.mean[0] << " aa=" << table.mean[1]
            << " kappa=" << table.mean[2] << "\n";
  std::cout << "std  oa=" << table.stdev[0] << " aa=" << table.stdev[1]
            << " kappa=" << table.stdev[2] << "\n";
  std::cout << "wrote " << out_dir << "/results.csv\n";
  return 0;
}

int cmd_eval(const RunOptions& opts, const ConfigKeys& keys, const std::string& cube_path,
             const std::string& labels_path, const std::string& ckpt,
             const std::string& mask_name, const std::string& splits_file,
             std::uint64_t split_seed) {
  print_effective(keys);
  Cube cube = read_cube(cube_path);
  LabelMap labels = read_labels(labels_path);
  cube = normalize(cube, normalize_mode_from_string(opts.normalize_mode));
  SplitMask split = make_split(labels, opts, splits_file, split_seed);
  Network net(opts.model(labels.num_classes()), cube.bands(), opts.seed);
  load_checkpoint(net.store(), ckpt);
  const std::vector<std::uint8_t>* mask = nullptr;
  if (mask_name == "train") mask = &split.train;
  else if (mask_name == "val") mask = &split.val;
  else if (mask_name == "test") mask = &split.test;
  else throw ConfigError("unknown mask '" + mask_name + "' (want train|val|test)");
  Metrics m = eval_on_mask(net, cube, labels, *mask);
  std::cout << "mask=" << mask_name << " pixels=" << m.total() << "\n";
  std::cout << "oa=" << m.oa << " aa=" << m.aa << " kappa=" << m.kappa << "\n";
  return 0;
}

int cmd_predict(const RunOptions& opts, const ConfigKeys& keys, const std::string& cube_path,
                const std::string& ckpt, const std::string& map_out, std::size_t num_classes) {
  print_effective(keys);
  Cube cube = read_cube(cube_path);
  cube = normalize(cube, normalize_mode_from_string(opts.normalize_mode));
  Network net(opts.model(num_classes), cube.bands(), opts.seed);
  load_checkpoint(net.store(), ckpt);
  Tape tape;
  VarId logits = net.forward(tape, cube.values);
  export_map(argmax_labels(tape.value(logits)), cube.height(), cube.width(),
             default_palette(num_classes), map_out);
  std::cout << "wrote " << map_out << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& level, std::uint64_t seed) {
  std::vector<GradCheckResult> results;
  if (level == "op")
    results = gradcheck_op_suite(seed);
  else if (level == "block")
    results = gradcheck_block_suite(seed);
  else if (level == "model")
    results = gradcheck_model_suite(seed);
  else
    throw ConfigError("unknown gradcheck level '" + level + "' (want op|block|model)");

  int failed = 0;
  const GradCheckResult* worst = nullptr;
  for (const auto& r : results) {
    if (!worst || r.max_rel_err > worst->max_rel_err) worst = &r;
    if (!r.pass) {
      ++failed;
      std::cout << "FAIL " << r.label << " max_rel_err=" << r.max_rel_err << " (" << r.worst
                << ")\n";
    }
  }
  std::cout << results.size() - failed << "/" << results.size() << " checks passed\n";
  if (worst)
    std::cout << "worst: " << worst->label << " max_rel_err=" << worst->max_rel_err
              << (worst->worst.empty() ? "" : " at " + worst->worst) << "\n";
  return failed == 0 ? 0 : 1;
}

int cmd_bench(const std::vector<std::size_t>& lengths, std::size_t dim, std::size_t state,
              int repeats, const std::string& dtype, const std::string& out) {
  bool f32 = dtype == "f32";
  if (!f32 && dtype != "f64") throw ConfigError("unknown dtype '" + dtype + "' (want f64|f32)");
  auto rows = benchmark_scan(lengths, dim, state, repeats, f32);
  if (out.empty()) {
    write_bench_csv(std::cout, rows);
  } else {
    std::ofstream f(out);
    write_bench_csv(f, rows);
    std::cout << "wrote " << out << "\n";
  }
  if (rows.size() >= 2)
    std::cout << "# log-log slope: " << fit_loglog_slope(rows) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hsmamba: dual-domain selective-scan hyperspectral classifier"};
  app.require_subcommand(1);

  RunOptions opts;
  ConfigKeys keys = make_keys(opts);

  std::string config_path = scan_for_config(argc, argv);
  try {
    if (!config_path.empty()) keys.apply_file(config_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::string config_sink;  // recognized (and already applied) by the pre-scan

  // synth
  std::size_t s_h = 32, s_w = 32, s_c = 8, s_k = 4;
  double s_noise = 0.05;
  std::uint64_t s_seed = 1;
  std::string s_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic labeled scene");
  synth->add_option("--config", config_sink, "key = value overlay file");
  synth->add_option("--H", s_h, "height");
  synth->add_option("--W", s_w, "width");
  synth->add_option("--C", s_c, "bands");
  synth->add_option("--K", s_k, "classes");
  synth->add_option("--noise", s_noise, "noise sigma");
  synth->add_option("--seed", s_seed, "generator seed");
  synth->add_option("--out", s_out, "output path prefix")->required();

  // train
  std::string t_cube, t_labels, t_splits, t_out = "out";
  std::uint64_t t_split_seed = 0;
  int t_jobs = 1;
  auto* tr = app.add_subcommand("train", "train with per-class pixel splits");
  tr->add_option("--cube", t_cube, "HSIC cube")->required();
  tr->add_option("--labels", t_labels, "HSIL label map")->required();
  tr->add_option("--splits", t_splits, "per-class override fixture");
  auto* split_seed_opt = tr->add_option("--split-seed", t_split_seed,
                                        "fixed split seed (default: per-run seed)");
  tr->add_option("--out", t_out, "output directory");
  tr->add_option("--config", config_sink, "key = value overlay file");
  tr->add_option("--runs", opts.runs, "number of seeded runs");
  tr->add_option("--seed", opts.seed, "base seed");
  tr->add_option("--lr", opts.lr, "Adam learning rate");
  tr->add_option("--epochs", opts.max_epochs, "epoch budget");
  tr->add_option("--patience", opts.patience, "early-stop patience on val OA");
  tr->add_option("--train-per-class", opts.train_per_class, "training pixels per class");
  tr->add_option("--val-per-class", opts.val_per_class, "validation pixels per class");
  tr->add_option("--jobs", t_jobs, "parallel runs");
  attach_model_flags(tr, opts);

  // eval
  std::string e_cube, e_labels, e_ckpt, e_mask = "test", e_splits;
  std::uint64_t e_split_seed = 1;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split mask");
  ev->add_option("--cube", e_cube)->required();
  ev->add_option("--labels", e_labels)->required();
  ev->add_option("--checkpoint", e_ckpt)->required();
  ev->add_option("--mask", e_mask, "train|val|test");
  ev->add_option("--splits", e_splits, "per-class override fixture");
  ev->add_option("--split-seed", e_split_seed, "split seed used in training");
  ev->add_option("--config", config_sink, "key = value overlay file");
  ev->add_option("--seed", opts.seed, "model seed (init is overwritten by the checkpoint)");
  ev->add_option("--train-per-class", opts.train_per_class);
  ev->add_option("--val-per-class", opts.val_per_class);
  attach_model_flags(ev, opts);

  // predict
  std::string p_cube, p_ckpt, p_map = "map.ppm";
  std::size_t p_classes = 0;
  auto* pr = app.add_subcommand("predict", "write a classification map");
  pr->add_option("--cube", p_cube)->required();
  pr->add_option("--checkpoint", p_ckpt)->required();
  pr->add_option("--map-out", p_map, "output PPM path");
  pr->add_option("--classes", p_classes, "number of classes")->required();
  pr->add_option("--config", config_sink, "key = value overlay file");
  attach_model_flags(pr, opts);

  // gradcheck
  std::string g_level = "op";
  std::uint64_t g_seed = 7;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference verification suite");
  gc->add_option("--config", config_sink, "key = value overlay file");
  gc->add_option("--level", g_level, "op|block|model");
  gc->add_option("--seed", g_seed);

  // bench
  std::vector<std::size_t> b_lengths = {1024, 2048, 4096, 8192, 16384, 32768, 65536};
  std::size_t b_dim = 8, b_state = 8;
  int b_repeats = 5;
  std::string b_dtype = "f64", b_out;
  auto* be = app.add_subcommand("bench", "selective-scan timing");
  be->add_option("--config", config_sink, "key = value overlay file");
  auto* scan_flag = be->add_flag("--scan", "benchmark the selective scan");
  be->add_option("--L", b_lengths, "sequence lengths (ascending)")->delimiter(',');
  be->add_option("--D", b_dim, "channels");
  be->add_option("--N", b_state, "state size");
  be->add_option("--repeats", b_repeats, "timing repeats per length");
  be->add_option("--dtype", b_dtype, "f64|f32");
  be->add_option("--out", b_out, "CSV output path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage error
  }

  try {
    if (synth->parsed()) return cmd_synth(s_h, s_w, s_c, s_k, s_noise, s_seed, s_out);
    if (tr->parsed())
      return cmd_train(opts, keys, t_cube, t_labels, t_splits, t_split_seed,
                       split_seed_opt->count() > 0, t_out, t_jobs);
    if (ev->parsed())
      return cmd_eval(opts, keys, e_cube, e_labels, e_ckpt, e_mask, e_splits, e_split_seed);
    if (pr->parsed()) return cmd_predict(opts, keys, p_cube, p_ckpt, p_map, p_classes);
    if (gc->parsed()) return cmd_gradcheck(g_level, g_seed);
    if (be->parsed()) {
      if (scan_flag->count() == 0) throw ConfigError("bench: nothing selected, pass --scan");
      return cmd_bench(b_lengths, b_dim, b_state, b_repeats, b_dtype, b_out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
