#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "caplab/config.hpp"
#include "caplab/errors.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace caplab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

const char* binary_path() {
  const char* bin = std::getenv("CAPLAB_BIN_PATH");
  REQUIRE_MESSAGE(bin != nullptr, "CAPLAB_BIN_PATH must point at the cli binary");
  return bin;
}

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

// run the cli through the shell, capturing combined output
RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
  static int counter = 0;
  const fs::path out = fs::temp_directory_path() / ("caplab_cli_out_" +
                                                    std::to_string(counter++) + ".txt");
  std::string cmd = env_prefix + "\"" + std::string(binary_path()) + "\" " + args + " > \"" +
                    out.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult res;
  if (status != -1 && WIFEXITED(status)) res.exit_code = WEXITSTATUS(status);
  res.output = slurp(out.string());
  fs::remove(out);
  return res;
}

// a config small enough that every subcommand finishes in well under a second
std::string tiny_config_text(const std::string& out_dir) {
  std::ostringstream cfg;
  cfg << "[experiment]\n"
      << "seed = 5\n"
      << "[scene]\n"
      << "max-objects = 4\n"
      << "[model]\n"
      << "hidden-size = 8\n"
      << "embed-dim = 4\n"
      << "[data]\n"
      << "train-size = 12\n"
      << "val-size = 4\n"
      << "probe-size = 4\n"
      << "[train.xent]\n"
      << "learning-rate = 0.1\n"
      << "batch-size = 2\n"
      << "grad-accum-steps = 1\n"
      << "max-steps = 2\n"
      << "stop-mean-length = 97\n"
      << "probe-every = 1\n"
      << "[decode.eval]\n"
      << "strategy = greedy\n"
      << "max-length = 8\n"
      << "[output]\n"
      << "dir = " << out_dir << "\n";
  return cfg.str();
}

struct TempTree {
  fs::path root;
  explicit TempTree(const std::string& name) : root(fs::temp_directory_path() / name) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~TempTree() { fs::remove_all(root); }

  std::string write_config(const std::string& text) {
    const fs::path path = root / "experiment.cfg";
    std::ofstream out(path);
    out << text;
    return path.string();
  }
  std::string out_dir() const { return (root / "out").string(); }
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("default experiment config is valid and synchronized") {
  const ExperimentConfig cfg = default_experiment_config();
  CHECK_NOTHROW(validate_experiment_config(cfg));
  CHECK(cfg.seed == 11);
  CHECK(cfg.scene.max_objects == 9);
  CHECK(cfg.train_xent.stage == Stage::xent);
  CHECK(cfg.train_debias.stage == Stage::debias);
  CHECK(cfg.train_reinforce.stage == Stage::reinforce);
  // stage blocks inherit the experiment seed and both decode configs
  CHECK(cfg.train_debias.seed == cfg.seed);
  CHECK(cfg.train_debias.decode_eval.strategy == Strategy::nucleus);
  CHECK(cfg.train_debias.decode_train.strategy == Strategy::contrastive);
  CHECK(cfg.train_xent.decode_eval.repetition_penalty == 1.0);
}

TEST_CASE("config text parses sections, comments, and whitespace") {
  std::istringstream in(
      "# full-line comment\n"
      "\n"
      "[experiment]\n"
      "seed = 99\n"
      "[scene]\n"
      "  max-objects =  3 \n"
      "noise-sigma = 0.25\n"
      "[model]\n"
      "hidden-size = 12\n"
      "[train.debias]\n"
      "learning-rate = 0.02\n"
      "target-token = 6\n"
      "[decode.eval]\n"
      "strategy = beam\n"
      "beam-width = 3\n"
      "block-eos = true\n"
      "[output]\n"
      "dir = /tmp/elsewhere\n");
  const ExperimentConfig cfg = parse_experiment_config(in);
  CHECK(cfg.seed == 99);
  CHECK(cfg.scene.max_objects == 3);
  CHECK(cfg.scene.noise_sigma == doctest::Approx(0.25));
  CHECK(cfg.hidden_size == 12);
  CHECK(cfg.train_debias.learning_rate == doctest::Approx(0.02));
  CHECK(cfg.train_debias.debias_target_token == 6);
  CHECK(cfg.decode_eval.strategy == Strategy::beam);
  CHECK(cfg.decode_eval.beam_width == 3);
  CHECK(cfg.decode_eval.block_eos);
  CHECK(cfg.output_dir == "/tmp/elsewhere");
  // the stage blocks see the parsed decode config
  CHECK(cfg.train_xent.decode_eval.beam_width == 3);
  CHECK(cfg.train_xent.seed == 99);
}

TEST_CASE("config rejections name the offending construct") {
  auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return parse_experiment_config(in);
  };
  CHECK_THROWS_AS(parse("[nonsense]\n"), ConfigError);
  CHECK_THROWS_AS(parse("[experiment]\nflavor = vanilla\n"), ConfigError);
  CHECK_THROWS_AS(parse("seed = 1\n"), ConfigError);              // key outside a section
  CHECK_THROWS_AS(parse("[experiment\nseed = 1\n"), ConfigError); // unterminated header
  CHECK_THROWS_AS(parse("[experiment]\nseed\n"), ConfigError);    // missing '='
  CHECK_THROWS_AS(parse("[experiment]\nseed = twelve\n"), ConfigError);
  CHECK_THROWS_AS(parse("[decode.eval]\nblock-eos = maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse("[model]\nhidden-size = 0\n"), ConfigError);  // validation
  // target-token is a debias-only key
  CHECK_THROWS_AS(parse("[train.xent]\ntarget-token = 3\n"), ConfigError);
  CHECK_NOTHROW(parse("[train.debias]\ntarget-token = 3\n"));
}

TEST_CASE("strategy names round trip") {
  CHECK(std::string(strategy_name(Strategy::greedy)) == "greedy");
  CHECK(std::string(strategy_name(Strategy::beam)) == "beam");
  CHECK(std::string(strategy_name(Strategy::contrastive)) == "contrastive");
  CHECK(std::string(strategy_name(Strategy::nucleus)) == "nucleus");
  CHECK(strategy_from_name("nucleus") == Strategy::nucleus);
  CHECK_THROWS_AS(strategy_from_name("viterbi"), ConfigError);
}

TEST_CASE("environment override replaces only the output dir") {
  ExperimentConfig cfg = default_experiment_config();
  const std::string original = cfg.output_dir;
  REQUIRE(setenv("CAPLAB_OUT_DIR", "/tmp/override-dir", 1) == 0);
  apply_env_overrides(cfg);
  CHECK(cfg.output_dir == "/tmp/override-dir");
  CHECK(cfg.seed == 11);
  REQUIRE(setenv("CAPLAB_OUT_DIR", "", 1) == 0);
  cfg.output_dir = original;
  apply_env_overrides(cfg);  // empty value is ignored
  CHECK(cfg.output_dir == original);
  unsetenv("CAPLAB_OUT_DIR");
}

TEST_CASE("gen-data writes deterministic splits") {
  TempTree a("caplab_cli_gen_a");
  TempTree b("caplab_cli_gen_b");
  const std::string cfg_a = a.write_config(tiny_config_text(a.out_dir()));
  const std::string cfg_b = b.write_config(tiny_config_text(b.out_dir()));

  const RunResult ra = run_cli("--config \"" + cfg_a + "\" gen-data");
  CHECK(ra.exit_code == 0);
  const RunResult rb = run_cli("--config \"" + cfg_b + "\" gen-data");
  CHECK(rb.exit_code == 0);

  for (const char* split : {"train", "val", "probe"}) {
    const std::string pa = a.out_dir() + "/data/" + split + ".scenes";
    const std::string pb = b.out_dir() + "/data/" + split + ".scenes";
    REQUIRE(fs::exists(pa));
    CHECK(slurp(pa) == slurp(pb));
  }
  // splits draw from distinct seed streams
  CHECK(slurp(a.out_dir() + "/data/train.scenes") != slurp(a.out_dir() + "/data/val.scenes"));
}

TEST_CASE("a size-zero split is a header-only file") {
  TempTree tree("caplab_cli_gen_zero");
  std::string text = tiny_config_text(tree.out_dir());
  text.replace(text.find("train-size = 12"), 15, "train-size = 0 ");
  const std::string cfg = tree.write_config(text);
  CHECK(run_cli("--config \"" + cfg + "\" gen-data").exit_code == 0);
  const std::string content = slurp(tree.out_dir() + "/data/train.scenes");
  CHECK(content.find('\n') == content.size() - 1);  // exactly one line
}

TEST_CASE("usage and config problems exit with code two") {
  TempTree tree("caplab_cli_badcfg");
  CHECK(run_cli("").exit_code == 2);                // a subcommand is required
  CHECK(run_cli("make-it-so").exit_code == 2);      // unknown subcommand
  CHECK(run_cli("eval").exit_code == 2);            // missing required options
  CHECK(run_cli("--config /nonexistent.cfg gen-data").exit_code == 2);

  const std::string bad = tree.write_config("[experiment]\nwarp-factor = 9\n");
  CHECK(run_cli("--config \"" + bad + "\" gen-data").exit_code == 2);

  const std::string cfg = tree.write_config(tiny_config_text(tree.out_dir()));
  CHECK(run_cli("--config \"" + cfg + "\" gen-data").exit_code == 0);
  CHECK(run_cli("--config \"" + cfg + "\" train --stage xent --sweep lr=abc").exit_code == 2);
  CHECK(run_cli("--config \"" + cfg + "\" train --stage warp").exit_code == 2);

  const RunResult help = run_cli("--help");
  CHECK(help.exit_code == 0);
  CHECK(help.output.find("gen-data") != std::string::npos);
}

TEST_CASE("missing inputs exit with code three") {
  TempTree tree("caplab_cli_missing");
  const std::string cfg = tree.write_config(tiny_config_text(tree.out_dir()));

  // no datasets yet
  const RunResult train = run_cli("--config \"" + cfg + "\" train --stage xent");
  CHECK(train.exit_code == 3);
  CHECK(train.output.find("gen-data") != std::string::npos);

  REQUIRE(run_cli("--config \"" + cfg + "\" gen-data").exit_code == 0);

  // debias needs a stage-1 checkpoint
  const RunResult debias = run_cli("--config \"" + cfg + "\" train --stage debias");
  CHECK(debias.exit_code == 3);
  CHECK(debias.output.find("xent") != std::string::npos);

  const RunResult eval = run_cli("--config \"" + cfg + "\" eval --checkpoint missing.bin" +
                                 " --dataset " + tree.out_dir() + "/data/probe.scenes");
  CHECK(eval.exit_code == 3);
}

TEST_CASE("the training pipeline runs end to end") {
  TempTree tree("caplab_cli_train");
  const std::string cfg = tree.write_config(tiny_config_text(tree.out_dir()));
  REQUIRE(run_cli("--config \"" + cfg + "\" gen-data").exit_code == 0);

  const RunResult train = run_cli("--config \"" + cfg + "\" train --stage xent");
  CHECK(train.exit_code == 0);
  CHECK(train.output.find("xent: stopped at step 2") != std::string::npos);

  const std::string trace_path = tree.out_dir() + "/xent/trace.csv";
  REQUIRE(fs::exists(trace_path));
  std::istringstream trace(slurp(trace_path));
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(trace, line)) rows.push_back(line);
  REQUIRE(rows.size() == 4);  // header + probes at steps 0, 1, 2
  CHECK(rows[1].rfind("0,", 0) == 0);
  CHECK(rows[3].rfind("2,", 0) == 0);
  for (int step : {0, 1, 2}) {
    CHECK(fs::exists(tree.out_dir() + "/xent/ckpt_00000" + std::to_string(step) + ".bin"));
  }

  // eval the final checkpoint on the probe split; greedy decoding makes the
  // report agree with the final trace row despite different rng streams
  const std::string report = tree.out_dir() + "/report.json";
  const RunResult eval = run_cli("--config \"" + cfg + "\" eval --checkpoint " + tree.out_dir() +
                                 "/xent/ckpt_000002.bin --dataset " + tree.out_dir() +
                                 "/data/probe.scenes --report " + report);
  CHECK(eval.exit_code == 0);
  REQUIRE(fs::exists(report));
  std::ifstream report_in(report);
  const nlohmann::json parsed = nlohmann::json::parse(report_in);
  CHECK(parsed["schema_version"] == 1);
  CHECK(parsed["report"]["sample_count"] == 4);
  REQUIRE(parsed["samples"].size() == 4);

  const std::string last_row = rows[3];
  const std::size_t comma = last_row.find(',');
  const double trace_mean = std::stod(last_row.substr(comma + 1));
  CHECK(parsed["report"]["mean_length"].get<double>() ==
        doctest::Approx(trace_mean).epsilon(1e-6));

  // probe-captions prints one caption line per checkpoint, missing ones marked
  const std::string list = tree.out_dir() + "/xent/ckpt_000002.bin,/nope/missing.bin";
  const RunResult probe =
      run_cli("--config \"" + cfg + "\" probe-captions --checkpoints " + list);
  CHECK(probe.exit_code == 0);
  CHECK(probe.output.find("# scene 7") != std::string::npos);
  CHECK(probe.output.find("[missing]") != std::string::npos);
  const RunResult probe_again =
      run_cli("--config \"" + cfg + "\" probe-captions --checkpoints " + list);
  CHECK(probe_again.output == probe.output);
}

TEST_CASE("sweeps fan out into per-rate directories") {
  TempTree tree("caplab_cli_sweep");
  std::string text = tiny_config_text(tree.out_dir());
  text.replace(text.find("max-steps = 2"), 13, "max-steps = 1");
  const std::string cfg = tree.write_config(text);
  REQUIRE(run_cli("--config \"" + cfg + "\" gen-data").exit_code == 0);

  const RunResult sweep =
      run_cli("--config \"" + cfg + "\" sweep --stage xent --lrs 0.05,0.1");
  CHECK(sweep.exit_code == 0);
  CHECK(fs::exists(tree.out_dir() + "/xent-lr-0.05/trace.csv"));
  CHECK(fs::exists(tree.out_dir() + "/xent-lr-0.1/trace.csv"));
  CHECK(sweep.output.find("lr=0.05") != std::string::npos);
  CHECK(sweep.output.find("lr=0.1") != std::string::npos);
}

TEST_CASE("the out-dir environment override redirects artifacts") {
  TempTree tree("caplab_cli_env");
  const fs::path elsewhere = tree.root / "elsewhere";
  const std::string cfg = tree.write_config(tiny_config_text(tree.out_dir()));
  const RunResult r = run_cli("--config \"" + cfg + "\" gen-data",
                              "CAPLAB_OUT_DIR=\"" + elsewhere.string() + "\" ");
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(elsewhere / "data" / "train.scenes"));
  CHECK_FALSE(fs::exists(fs::path(tree.out_dir()) / "data" / "train.scenes"));
}

}  // TEST_SUITE
