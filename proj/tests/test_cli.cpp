#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int exit_code;
  std::string output;  // stdout + stderr
};

CmdResult run_cli(const std::string& args) {
  std::string cmd = std::string("\"") + HSM_CLI_PATH + "\" " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  std::array<char, 4096> buf;
  while (std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) out.append(buf.data(), n);
  int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const std::string kTinyShape =
    " --embed-dim 8 --patch 2 --groups-spe 2 --groups-spa 2 --state 2 --gn-groups 4";
const std::string kTinyModel =
    kTinyShape + " --train-per-class 6 --val-per-class 3 --lr 0.001";

struct Workdir {
  fs::path dir;
  Workdir() : dir("cli_tmp") {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workdir() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cli("").exit_code == 2);                     // missing subcommand
  CHECK(run_cli("train --labels x.hsil").exit_code == 2);  // missing --cube
  CHECK(run_cli("--help").exit_code == 0);
}

TEST_CASE("runtime failures exit with code 1") {
  CmdResult r = run_cli("eval --cube missing.hsic --labels missing.hsil --checkpoint no.ckpt");
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("error:") != std::string::npos);
  CHECK(run_cli("gradcheck --level nonsense").exit_code == 1);
  CHECK(run_cli("bench --L 16,32").exit_code == 1);  // nothing selected without --scan
}

TEST_CASE("synth, train, eval, predict round trip") {
  Workdir wd;
  std::string prefix = wd / "scene";
  CmdResult synth = run_cli("synth --H 20 --W 20 --C 5 --K 3 --noise 0.05 --seed 5 --out " +
                            prefix);
  CHECK(synth.exit_code == 0);
  CHECK(fs::exists(prefix + ".hsic"));
  CHECK(fs::exists(prefix + ".hsil"));

  std::string out_dir = wd / "run";
  CmdResult train = run_cli("train --cube " + prefix + ".hsic --labels " + prefix +
                            ".hsil --out " + out_dir + " --runs 2 --epochs 6 --seed 3" +
                            kTinyModel);
  CHECK(train.exit_code == 0);
  CHECK(train.output.find("# effective config") != std::string::npos);
  CHECK(fs::exists(out_dir + "/results.csv"));
  CHECK(fs::exists(out_dir + "/run0.ckpt"));
  CHECK(fs::exists(out_dir + "/run1_history.csv"));
  CHECK(fs::exists(out_dir + "/run0_map.ppm"));
  CHECK(fs::exists(out_dir + "/model.cfg"));

  // one data row per run plus header and the mean/std rows
  std::string results = slurp(out_dir + "/results.csv");
  CHECK(std::count(results.begin(), results.end(), '\n') == 5);

  CmdResult ev = run_cli("eval --cube " + prefix + ".hsic --labels " + prefix +
                         ".hsil --checkpoint " + out_dir + "/run0.ckpt --mask val --split-seed 3" +
                         kTinyShape + " --train-per-class 6 --val-per-class 3");
  CHECK(ev.exit_code == 0);
  CHECK(ev.output.find("oa=") != std::string::npos);

  CmdResult pr = run_cli("predict --cube " + prefix + ".hsic --checkpoint " + out_dir +
                         "/run0.ckpt --classes 3 --map-out " + (wd / "map.ppm") + kTinyShape);
  CHECK(pr.exit_code == 0);
  CHECK(fs::exists(wd / "map.ppm"));
}

TEST_CASE("config overlay: flags win, unknown keys are rejected with line numbers") {
  Workdir wd;
  {
    std::ofstream f(wd / "good.cfg");
    f << "# overlay\n";
    f << "embed_dim = 16\n";
    f << "lr = 0.002\n";
  }
  CmdResult r = run_cli("gradcheck --level op --seed 3 --config " + (wd / "good.cfg"));
  // gradcheck ignores model keys but the overlay must parse
  CHECK(r.exit_code == 0);

  {
    std::ofstream f(wd / "bad.cfg");
    f << "embed_dim = 16\n";
    f << "warp_factor = 9\n";
  }
  CmdResult bad = run_cli("gradcheck --level op --config " + (wd / "bad.cfg"));
  CHECK(bad.exit_code == 2);
  CHECK(bad.output.find("line 2") != std::string::npos);
  CHECK(bad.output.find("warp_factor") != std::string::npos);
}

TEST_CASE("the effective-config dump replays the run") {
  Workdir wd;
  std::string prefix = wd / "scene";
  REQUIRE(run_cli("synth --H 16 --W 16 --C 4 --K 2 --seed 9 --out " + prefix).exit_code == 0);

  std::string flags = " --runs 1 --epochs 5 --seed 11" + kTinyModel;
  CmdResult first = run_cli("train --cube " + prefix + ".hsic --labels " + prefix +
                            ".hsil --out " + (wd / "a") + flags);
  REQUIRE(first.exit_code == 0);

  // the dump written next to the checkpoints is the loadable overlay
  CmdResult replay = run_cli("train --cube " + prefix + ".hsic --labels " + prefix +
                             ".hsil --out " + (wd / "b") + " --config " + (wd / "a") +
                             "/model.cfg");
  REQUIRE(replay.exit_code == 0);
  CHECK(slurp(wd / "a/results.csv") == slurp(wd / "b/results.csv"));
}

TEST_CASE("parallel runs reproduce the sequential results") {
  Workdir wd;
  std::string prefix = wd / "scene";
  REQUIRE(run_cli("synth --H 16 --W 16 --C 4 --K 2 --seed 2 --out " + prefix).exit_code == 0);
  std::string flags = " --runs 3 --epochs 4 --seed 5" + kTinyModel;
  REQUIRE(run_cli("train --cube " + prefix + ".hsic --labels " + prefix + ".hsil --out " +
                  (wd / "seq") + flags + " --jobs 1")
              .exit_code == 0);
  REQUIRE(run_cli("train --cube " + prefix + ".hsic --labels " + prefix + ".hsil --out " +
                  (wd / "par") + flags + " --jobs 3")
              .exit_code == 0);
  CHECK(slurp(wd / "seq/results.csv") == slurp(wd / "par/results.csv"));
}

TEST_CASE("bench emits ascending rows and gradcheck gates on tolerance") {
  CmdResult bench = run_cli("bench --scan --L 64,128,256 --D 2 --N 2 --repeats 2");
  CHECK(bench.exit_code == 0);
  std::istringstream ss(bench.output);
  std::string line;
  std::getline(ss, line);
  CHECK(line == "L,mean_seconds,std_seconds");
  long prev = 0;
  int rows = 0;
  while (std::getline(ss, line) && line[0] != '#') {
    long len = std::stol(line.substr(0, line.find(',')));
    CHECK(len > prev);
    prev = len;
    ++rows;
  }
  CHECK(rows == 3);

  CmdResult gc = run_cli("gradcheck --level op --seed 7");
  CHECK(gc.exit_code == 0);
  CHECK(gc.output.find("worst:") != std::string::npos);
}
