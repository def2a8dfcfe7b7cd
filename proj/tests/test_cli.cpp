#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace {

namespace fs = std::filesystem;

struct RunResult {
  int exit_code = 0;
  std::string out;
  std::string err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

RunResult run_cli(const std::string& args) {
  const std::string out_file = "cli_test_stdout.txt";
  const std::string err_file = "cli_test_stderr.txt";
  const std::string cmd =
      std::string(TASFT_CLI_PATH) + " " + args + " >" + out_file + " 2>" + err_file;
  const int raw = std::system(cmd.c_str());
  RunResult res;
  res.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  res.out = slurp(out_file);
  res.err = slurp(err_file);
  std::remove(out_file.c_str());
  std::remove(err_file.c_str());
  return res;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::path("cli_test_dirs") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& child = "") const {
    return child.empty() ? path.string() : (path / child).string();
  }
};

}  // namespace

TEST_CASE("train without a dataset exits 1 and names --data", "[cli]") {
  const RunResult res = run_cli("train");
  CHECK(res.exit_code == 1);
  CHECK(res.err.find("--data") != std::string::npos);
}

TEST_CASE("unknown subcommands and flags are usage errors", "[cli]") {
  CHECK(run_cli("frobnicate").exit_code == 1);
  CHECK(run_cli("gen-data --no-such-flag 1").exit_code == 1);
  CHECK(run_cli("--help").exit_code == 0);
}

TEST_CASE("gen-data writes the resolved config first and is deterministic", "[cli]") {
  TempDir a("gen_a"), b("gen_b");
  const std::string flags = " --n-safe 30 --n-toxic 2 --seed 11";
  REQUIRE(run_cli("gen-data --out " + a.str() + flags).exit_code == 0);
  REQUIRE(run_cli("gen-data --out " + b.str() + flags).exit_code == 0);
  CHECK(fs::exists(a.str("resolved_config.txt")));
  CHECK(slurp(a.str("dataset.jsonl")) == slurp(b.str("dataset.jsonl")));
  CHECK(!slurp(a.str("dataset.jsonl")).empty());
}

TEST_CASE("command line overrides the config file which overrides defaults", "[cli]") {
  TempDir dir("cfg");
  {
    std::ofstream cfg(dir.str("run.cfg"));
    cfg << "n-safe=25\nseed=4\n";
  }
  REQUIRE(run_cli("gen-data --out " + dir.str("out") + " --config " + dir.str("run.cfg") +
                  " --seed 9")
              .exit_code == 0);
  const std::string resolved = slurp(dir.str("out") + "/resolved_config.txt");
  CHECK(resolved.find("n-safe=25") != std::string::npos);   // from file
  CHECK(resolved.find("seed=9") != std::string::npos);      // command line wins
  CHECK(resolved.find("n-toxic=20") != std::string::npos);  // default
}

TEST_CASE("replaying a logged resolved config reproduces the dataset bytes", "[cli]") {
  TempDir dir("replay");
  REQUIRE(run_cli("gen-data --out " + dir.str("first") + " --n-safe 40 --n-toxic 3 --seed 21")
              .exit_code == 0);
  REQUIRE(run_cli("gen-data --out " + dir.str("second") + " --config " +
                  dir.str("first") + "/resolved_config.txt")
              .exit_code == 0);
  CHECK(slurp(dir.str("first") + "/dataset.jsonl") == slurp(dir.str("second") + "/dataset.jsonl"));
}

TEST_CASE("unknown config keys are rejected", "[cli]") {
  TempDir dir("badcfg");
  {
    std::ofstream cfg(dir.str("run.cfg"));
    cfg << "not-a-key=1\n";
  }
  const RunResult res =
      run_cli("gen-data --out " + dir.str("out") + " --config " + dir.str("run.cfg"));
  CHECK(res.exit_code == 1);
  CHECK(res.err.find("unknown key") != std::string::npos);
}

TEST_CASE("zero-step train writes an immediate checkpoint and exits 0", "[cli]") {
  TempDir dir("zerostep");
  REQUIRE(run_cli("gen-data --out " + dir.str("data") + " --n-safe 30 --n-toxic 2 --seed 2")
              .exit_code == 0);
  const RunResult res = run_cli("train --out " + dir.str("run") + " --data " +
                                dir.str("data") + "/dataset.jsonl --method EMD --lambda 0.5 "
                                "--steps 0 --dim 16 --layers 1 --context 20");
  CHECK(res.exit_code == 0);
  CHECK(fs::exists(dir.str("run") + "/checkpoint.bin"));
  CHECK(fs::exists(dir.str("run") + "/metrics.csv"));
  CHECK(fs::exists(dir.str("run") + "/resolved_config.txt"));
}

TEST_CASE("train rejects a model vocabulary smaller than the corpus", "[cli]") {
  TempDir dir("smallvocab");
  REQUIRE(run_cli("gen-data --out " + dir.str("data") + " --n-safe 10 --n-toxic 1").exit_code == 0);
  const RunResult res = run_cli("train --out " + dir.str("run") + " --data " + dir.str("data") +
                                "/dataset.jsonl --vocab 32 --steps 0");
  CHECK(res.exit_code == 1);
  CHECK(res.err.find("--vocab") != std::string::npos);
}

TEST_CASE("verify-bound emits the advertised csv and exits 0", "[cli]") {
  TempDir dir("bound");
  const RunResult res =
      run_cli("verify-bound --out " + dir.str() + " --instances 25 --vocab 8 --dim 6 --seed 3");
  CHECK(res.exit_code == 0);
  const std::string csv = slurp(dir.str("bound_check.csv"));
  CHECK(csv.find("instance_id,vocab_size,exact_emd,lower_bound,gap,solve_time_ns") == 0);
  int lines = 0;
  for (char c : csv) lines += c == '\n' ? 1 : 0;
  CHECK(lines == 26);  // header + 25 rows
  CHECK(res.out.find("violations=0") != std::string::npos);
}

TEST_CASE("export converts a checkpoint to json", "[cli]") {
  TempDir dir("exportck");
  REQUIRE(run_cli("gen-data --out " + dir.str("data") + " --n-safe 20 --n-toxic 1").exit_code == 0);
  REQUIRE(run_cli("train --out " + dir.str("run") + " --data " + dir.str("data") +
                  "/dataset.jsonl --steps 0 --batch-size 8 --dim 16 --layers 1 --context 20")
              .exit_code == 0);
  const RunResult res = run_cli("export --out " + dir.str("run") + " --checkpoint " +
                                dir.str("run") + "/checkpoint.bin");
  CHECK(res.exit_code == 0);
  const std::string json = slurp(dir.str("run") + "/params.json");
  CHECK(json.find("\"format\": \"tasft-params\"") != std::string::npos);
  CHECK(json.find("token_emb") != std::string::npos);
  CHECK(json.find("out_proj") != std::string::npos);
}

TEST_CASE("eval runs against a checkpoint and dataset", "[cli]") {
  TempDir dir("evalrun");
  REQUIRE(run_cli("gen-data --out " + dir.str("data") + " --n-safe 30 --n-toxic 2 --seed 6")
              .exit_code == 0);
  REQUIRE(run_cli("train --out " + dir.str("run") + " --data " + dir.str("data") +
                  "/dataset.jsonl --steps 2 --batch-size 4 --dim 16 --layers 1 --context 20 "
                  "--seed 6")
              .exit_code == 0);
  const RunResult res = run_cli("eval --out " + dir.str("evalout") + " --checkpoint " +
                                dir.str("run") + "/checkpoint.bin --data " + dir.str("data") +
                                "/dataset.jsonl --seed 6");
  CHECK(res.exit_code == 0);
  CHECK(slurp(dir.str("evalout") + "/eval.csv").find("harmful_rate") != std::string::npos);
  CHECK(res.out.find("harmful_rate=") != std::string::npos);
}

TEST_CASE("curve evaluates a checkpoint series", "[cli]") {
  TempDir dir("curverun");
  REQUIRE(run_cli("gen-data --out " + dir.str("data") + " --n-safe 40 --n-toxic 2 --seed 8")
              .exit_code == 0);
  REQUIRE(run_cli("train --out " + dir.str("run") + " --data " + dir.str("data") +
                  "/dataset.jsonl --steps 5 --batch-size 4 --checkpoint-every 1 --eval-every 5 "
                  "--dim 16 --layers 1 --context 20 --seed 8")
              .exit_code == 0);
  std::string series;
  for (int s = 1; s <= 5; ++s)
    series += dir.str("run") + "/checkpoint_step" + std::to_string(s) + ".bin ";
  const RunResult res = run_cli("curve --out " + dir.str("curveout") + " --data " +
                                dir.str("data") + "/dataset.jsonl --seed 8 --checkpoints " +
                                series);
  CHECK(res.exit_code == 0);
  const std::string csv = slurp(dir.str("curveout") + "/curve.csv");
  CHECK(csv.find("checkpoint,safety_level,over_refusal") == 0);
  int lines = 0;
  for (char c : csv) lines += c == '\n' ? 1 : 0;
  CHECK(lines == 6);  // header + 5 points

  // fewer than five checkpoints is a usage error
  CHECK(run_cli("curve --out " + dir.str("c2") + " --data " + dir.str("data") +
                "/dataset.jsonl --checkpoints a b")
            .exit_code == 1);
}

TEST_CASE("runtime failures exit 2", "[cli]") {
  TempDir dir("runtimefail");
  const RunResult res = run_cli("eval --out " + dir.str("out") +
                                " --checkpoint does_not_exist.bin --data also_missing.jsonl");
  CHECK(res.exit_code == 2);
}
