#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "pcfglab/cli.hpp"
#include "support/test_paths.hpp"

using pcfglab::cli_dispatch;
using pcfglab::testing::data_path;
using pcfglab::testing::grammar_path;

namespace {

namespace fs = std::filesystem;

struct Capture {
  std::ostringstream out;
  std::streambuf* saved;
  Capture() : saved(std::cout.rdbuf(out.rdbuf())) {}
  ~Capture() { std::cout.rdbuf(saved); }
};

int run(std::vector<std::string> args, std::string* stdout_text = nullptr) {
  std::vector<const char*> argv{"pcfglab"};
  for (const auto& a : args) argv.push_back(a.c_str());
  Capture cap;
  int code = cli_dispatch(static_cast<int>(argv.size()), argv.data());
  if (stdout_text) *stdout_text = cap.out.str();
  return code;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  std::string path;
  explicit TempDir(const std::string& name) {
    path = (fs::temp_directory_path() / name).string();
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("validate prints a report and exits 0") {
  std::string out;
  CHECK(run({"validate", grammar_path("nested_parens")}, &out) == 0);
  CHECK(out.find("consistent: yes") != std::string::npos);
  CHECK(out.find("spectral radius: 0.8") != std::string::npos);
}

TEST_CASE("exit codes: usage 1, data 2") {
  CHECK(run({"no-such-command"}) == 1);
  CHECK(run({"validate"}) == 1);  // missing required positional
  CHECK(run({"validate", "/nonexistent.pcfg"}) == 2);
  CHECK(run({"oracle", "logprob", grammar_path("nested_parens"), "bogus-token"}) == 2);
}

TEST_CASE("oracle subcommands answer on stdout") {
  std::string out;
  CHECK(run({"oracle", "logprob", grammar_path("nested_parens"), "(", "a", ")"}, &out) == 0);
  CHECK(std::abs(std::stod(out) - std::log(0.14)) < 1e-9);
  CHECK(run({"oracle", "prefix", grammar_path("nested_parens"), "("}, &out) == 0);
  CHECK(std::abs(std::stod(out)) < 1e-12);
  CHECK(run({"oracle", "nextdist", grammar_path("nested_parens"), "("}, &out) == 0);
  CHECK(out.find("(") != std::string::npos);
  CHECK(run({"oracle", "entropy", grammar_path("nested_parens")}, &out) == 0);
  CHECK(out.find("derivational entropy") != std::string::npos);
  CHECK(out.find("ambiguous") != std::string::npos);
  CHECK(run({"oracle", "recursion", grammar_path("nested_parens"), "--nt", "L0"}, &out) == 0);
  CHECK(out.find("E[R] = 0.6") != std::string::npos);
}

TEST_CASE("decompose and top-level print structure") {
  std::string out;
  CHECK(run({"decompose", grammar_path("deeper_recursion")}, &out) == 0);
  CHECK(out.find("{L0} (self-loop)") != std::string::npos);
  CHECK(run({"decompose", grammar_path("nested_parens"), "--json"}, &out) == 0);
  CHECK(out.find("\"self_loop\": true") != std::string::npos);
  CHECK(run({"top-level", grammar_path("abc")}, &out) == 0);
  CHECK(out.find("L1a") != std::string::npos);
  CHECK(out.find("position=prefix") != std::string::npos);
  CHECK(out.find("position=infix") != std::string::npos);
  CHECK(out.find("position=suffix") != std::string::npos);
}

TEST_CASE("sample writes a corpus plus resolved config, reproducibly") {
  TempDir dir("pcfglab_cli_sample");
  std::string out;
  CHECK(run({"sample", grammar_path("nested_parens"), "--n", "50", "--seed", "9", "--out",
             dir.path},
            &out) == 0);
  CHECK(fs::exists(dir.path + "/corpus.jsonl"));
  CHECK(fs::exists(dir.path + "/resolved_config.json"));
  std::string first = slurp(dir.path + "/corpus.jsonl");
  CHECK(run({"sample", grammar_path("nested_parens"), "--n", "50", "--seed", "9", "--out",
             dir.path}) == 0);
  CHECK(slurp(dir.path + "/corpus.jsonl") == first);  // bit-for-bit rerun
  CHECK(slurp(dir.path + "/resolved_config.json").find("\"seed\": 9") != std::string::npos);
}

TEST_CASE("kl verify-top with the oracle model exits 0") {
  std::string out;
  CHECK(run({"kl", "verify-top", "--grammar", grammar_path("kl_example_1"), "--model",
             "oracle", "--n", "500", "--seed", "4"},
            &out) == 0);
  CHECK(out.find("max residual: 0") != std::string::npos);
}

TEST_CASE("kl estimate with a synthetic model writes a json report") {
  TempDir dir("pcfglab_cli_kl");
  std::string out;
  CHECK(run({"kl", "estimate", "--grammar", grammar_path("kl_example_2"), "--model",
             "synthetic", "--perturb-magnitude", "0.3", "--n", "400", "--seed", "2", "--out",
             dir.path},
            &out) == 0);
  CHECK(fs::exists(dir.path + "/kl.json"));
  CHECK(slurp(dir.path + "/kl.json").find("per_bucket") != std::string::npos);
}

TEST_CASE("kl verify-outer prints the three terms") {
  std::string out;
  CHECK(run({"kl", "verify-outer", "--grammar", grammar_path("nested_parens"),
             "--drop-rules", "1", "--model", "synthetic", "--perturb-magnitude", "0.15",
             "--n", "100", "--seed", "6", "--length-cap", "800", "--mc-n", "500"},
            &out) == 0);
  CHECK(out.find("P(A) term") != std::string::npos);
  CHECK(out.find("residual") != std::string::npos);
}

TEST_CASE("arith eval answers exactly") {
  std::string out;
  CHECK(run({"arith", "eval", "--expr", "(2 + 2)"}, &out) == 0);
  CHECK(out == "4/1\n");
  CHECK(run({"arith", "eval", "--expr-file", data_path("appendix_nondeep_expr.txt")}, &out) ==
        0);
  CHECK(out == "707449/1260\n");
  CHECK(run({"arith", "eval", "--expr", "(1 / (3 - 3))"}) == 3);  // numerical failure
  CHECK(run({"arith", "eval", "--expr", "(1 +"}) == 2);           // data error
}

TEST_CASE("arith gen emits JSONL with exact results") {
  std::string out;
  CHECK(run({"arith", "gen", "--kind", "deep", "--depth", "4", "--count", "3", "--seed",
             "11"},
            &out) == 0);
  CHECK(std::count(out.begin(), out.end(), '\n') == 3);
  CHECK(out.find("\"depth\":4") != std::string::npos);
  CHECK(out.find("result_num") != std::string::npos);
  std::string out2;
  CHECK(run({"arith", "gen", "--kind", "chain", "--n-terms", "5", "--count", "2", "--seed",
             "11"},
            &out2) == 0);
  CHECK(out2.find("\"n_terms\":5") != std::string::npos);
}

TEST_CASE("depth-probe emits a curve and accepts the faulty variant") {
  TempDir dir("pcfglab_cli_probe");
  std::string out;
  CHECK(run({"depth-probe", grammar_path("nested_parens"), "--model", "oracle", "--case",
             "same-depth", "--i-max", "4", "--seed", "1", "--out", dir.path},
            &out) == 0);
  CHECK(out.find("i,error") == 0);
  CHECK(fs::exists(dir.path + "/same-depth.csv"));
  CHECK(run({"depth-probe", grammar_path("nested_parens"), "--model", "oracle", "--case",
             "deepening", "--i-max", "4", "--seed", "1", "--out", dir.path}) == 0);
  // fig5 emitter consumes the two probe files
  CHECK(run({"emit-figure", "--figure", "fig5", "--run", dir.path}) == 0);
  CHECK(fs::exists(dir.path + "/fig5_case_i.csv"));
  CHECK(fs::exists(dir.path + "/fig5_case_ii.csv"));
}

TEST_CASE("train writes checkpoint, log and kl curve; fig1-style emitters work") {
  TempDir dir("pcfglab_cli_train");
  std::string out;
  CHECK(run({"train", grammar_path("kl_example_2"), "--out", dir.path, "--steps", "4",
             "--batch", "8", "--corpus", "32", "--layers", "1", "--heads", "2", "--dim",
             "12", "--mlp-dim", "16", "--ctx", "128", "--seed", "3", "--eval-kl-every", "2",
             "--eval-kl-n", "30"},
            &out) == 0);
  CHECK(fs::exists(dir.path + "/checkpoint.bin"));
  CHECK(fs::exists(dir.path + "/train_log.csv"));
  CHECK(fs::exists(dir.path + "/kl_curve.csv"));
  CHECK(fs::exists(dir.path + "/resolved_config.json"));
  CHECK(run({"emit-figure", "--figure", "fig1b", "--run", dir.path}) == 0);
  std::string csv = slurp(dir.path + "/fig1b.csv");
  CHECK(csv.find("step,total") == 0);
  CHECK(csv.find("overhead") != std::string::npos);
  // the trained checkpoint is usable as a model spec
  CHECK(run({"kl", "estimate", "--grammar", grammar_path("kl_example_2"), "--model",
             "ckpt:" + dir.path + "/checkpoint.bin", "--n", "50", "--seed", "2"},
            &out) == 0);
}

TEST_CASE("cka and cosine subcommands run on trained checkpoints") {
  TempDir dir("pcfglab_cli_cka");
  for (const char* seed : {"1", "2"}) {
    CHECK(run({"train", grammar_path("kl_example_2"), "--out", dir.path + "/s" + seed,
               "--steps", "3", "--batch", "8", "--corpus", "24", "--layers", "1", "--heads",
               "2", "--dim", "12", "--mlp-dim", "16", "--ctx", "128", "--seed", seed}) == 0);
  }
  std::string out;
  CHECK(run({"cka", grammar_path("kl_example_2"), "--ckpt-a", dir.path + "/s1/checkpoint.bin",
             "--ckpt-b", dir.path + "/s1/checkpoint.bin", "--n-sentences", "6", "--seed",
             "3"},
            &out) == 0);
  CHECK(out.find("mean attention: 1") != std::string::npos);
  CHECK(run({"cka", grammar_path("kl_example_2"), "--ckpt-a", dir.path + "/s1/checkpoint.bin",
             "--ckpt-b", dir.path + "/s2/checkpoint.bin", "--n-sentences", "6", "--seed",
             "3"},
            &out) == 0);
  CHECK(run({"cosine", grammar_path("kl_example_2"), "--root", "L2_2", "--ckpt",
             dir.path + "/s1/checkpoint.bin", "--ckpt", dir.path + "/s2/checkpoint.bin",
             "--n-sentences", "5", "--seed", "4"},
            &out) == 0);
  CHECK(out.find("class,attention,mlp") != std::string::npos);
  CHECK(out.find("subgrammar_only") != std::string::npos);
  CHECK(out.find("cross:subgrammar_only|no_subgrammar") != std::string::npos);
}

TEST_CASE("emit-figure rejects unknown ids with a usage error") {
  TempDir dir("pcfglab_cli_fig");
  fs::create_directories(dir.path);
  CHECK(run({"emit-figure", "--figure", "fig99", "--run", dir.path}) == 1);
  CHECK(run({"emit-figure", "--figure", "fig7", "--run", dir.path}) == 2);  // missing artifact
}

TEST_CASE("config files feed options; unknown keys are rejected") {
  TempDir dir("pcfglab_cli_cfg");
  fs::create_directories(dir.path);
  {
    std::ofstream cfg(dir.path + "/cfg.json");
    cfg << "{\"n\": 120, \"seed\": 5, \"model\": \"oracle\"}\n";
  }
  std::string out;
  CHECK(run({"kl", "verify-top", "--grammar", grammar_path("nested_parens"), "--config",
             dir.path + "/cfg.json"},
            &out) == 0);
  {
    std::ofstream cfg(dir.path + "/bad.json");
    cfg << "{\"not_an_option\": 1}\n";
  }
  CHECK(run({"kl", "verify-top", "--grammar", grammar_path("nested_parens"), "--config",
             dir.path + "/bad.json"}) == 1);
}
