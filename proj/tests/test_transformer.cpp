#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>

#include "pcfglab/errors.hpp"
#include "pcfglab/oracle.hpp"
#include "pcfglab/transformer.hpp"
#include "support/test_paths.hpp"

using namespace pcfglab;
using pcfglab::testing::grammar_path;

namespace {

Grammar load(const std::string& name) { return load_grammar_file(grammar_path(name)); }

ModelConfig tiny_config(bool tied = false) {
  ModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.model_dim = 8;
  c.mlp_dim = 12;
  c.max_context = 16;
  c.seed = 5;
  c.tied_output = tied;
  return c;
}

}  // namespace

TEST_CASE("invalid dims are rejected") {
  Grammar g = load("nested_parens");
  Vocab v = Vocab::for_grammar(g);
  ModelConfig c = tiny_config();
  c.model_dim = 63;
  CHECK_THROWS_AS(Transformer(c, v), DataError);
  c = tiny_config();
  c.layers = 0;
  CHECK_THROWS_AS(Transformer(c, v), DataError);
}

TEST_CASE("parameter count matches the closed form") {
  Grammar g = load("nested_parens");
  Vocab vb = Vocab::for_grammar(g);
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.model_dim = 64;
  c.mlp_dim = 128;
  c.max_context = 32;
  Transformer model(c, vb);
  std::int64_t V = vb.size(), d = c.model_dim, m = c.mlp_dim;
  std::int64_t per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
  std::int64_t expect = V * d + c.max_context * d + c.layers * per_layer + 2 * d + d * V + V;
  CHECK(model.parameter_count() == expect);
}

TEST_CASE("same seed twice gives bit-identical parameters") {
  Grammar g = load("nested_parens");
  Vocab v = Vocab::for_grammar(g);
  Transformer a(tiny_config(), v), b(tiny_config(), v);
  REQUIRE(a.params().size() == b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i)
    CHECK(a.params()[i] == b.params()[i]);
}

TEST_CASE("zeroed output head yields the uniform next distribution") {
  Grammar g = load("nested_parens");
  Vocab v = Vocab::for_grammar(g);
  Transformer model(tiny_config(), v);
  for (std::size_t i = 0; i < model.params().size(); ++i)
    if (model.param_names()[i] == "wout" || model.param_names()[i] == "bout")
      model.mutable_params()[i].setZero();
  TokenDistribution d = model.next_dist(g.tokens_from_strings({"(", "a"}));
  double u = 1.0 / (g.num_terminals() + 1);
  for (double p : d.terminal_probs) CHECK(p == doctest::Approx(u).epsilon(1e-12));
  CHECK(d.eos == doctest::Approx(u).epsilon(1e-12));
  CHECK(d.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("gradient check: analytic vs central differences") {
  Grammar g = load("nested_parens");
  Vocab v = Vocab::for_grammar(g);
  std::vector<std::vector<int>> batch = {g.tokens_from_strings({"(", "a", ")"}),
                                         g.tokens_from_strings({"(", "(", "a", ")", ")"})};
  Transformer model(tiny_config(), v);
  CHECK(model.grad_check(batch) < 1e-4);
  Transformer tied(tiny_config(true), v);
  CHECK(tied.grad_check(batch) < 1e-4);
}

TEST_CASE("unused token ids get exactly zero embedding gradient") {
  Grammar g = load("nested_parens");
  Vocab v = Vocab::for_grammar(g);
  Transformer model(tiny_config(), v);
  auto grads = model.batch_gradients({g.tokens_from_strings({"(", "a", ")"})});
  CHECK(grads[0].row(v.pad).isZero(0.0));
  CHECK(!grads[0].row(v.bos).isZero(0.0));  // BOS is an input
}

TEST_CASE("gradient of a duplicated batch equals the single batch (linearity)") {
  Grammar g = load("nested_parens");
  Vocab v = Vocab::for_grammar(g);
  Transformer model(tiny_config(), v);
  std::vector<int> s = g.tokens_from_strings({"(", "a", ")"});
  auto g1 = model.batch_gradients({s});
  auto g2 = model.batch_gradients({s, s});
  for (std::size_t i = 0; i < g1.size(); ++i)
    CHECK((g1[i] - g2[i]).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("causal mask: earlier logits are bit-identical under suffix edits") {
  Grammar g = load("nested_parens");
  Vocab v = Vocab::for_grammar(g);
  ModelConfig c = tiny_config();
  c.max_context = 32;
  Transformer model(c, v);
  auto a = g.tokens_from_strings({"(", "(", "a", ")", ")"});
  auto b = g.tokens_from_strings({"(", "(", "(", "a", ")"});  // same first 2 tokens
  auto la = model.conditional_logprobs(a);
  auto lb = model.conditional_logprobs(b);
  for (int t = 0; t < 2; ++t) CHECK(la[t] == lb[t]);  // bitwise
}

TEST_CASE("next_dist normalizes and excludes BOS/PAD") {
  Grammar g = load("kl_example_2");
  Vocab v = Vocab::for_grammar(g);
  Transformer model(tiny_config(), v);
  TokenDistribution d = model.next_dist({});
  CHECK(d.sum() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(static_cast<int>(d.terminal_probs.size()) == g.num_terminals());
}

TEST_CASE("context overflow raises") {
  Grammar g = load("nested_parens");
  Vocab v = Vocab::for_grammar(g);
  Transformer model(tiny_config(), v);  // max_context 16
  std::vector<int> longseq(16, 0);
  CHECK_THROWS_WITH_AS(model.conditional_logprobs(longseq), doctest::Contains("context"),
                       DataError);
}

TEST_CASE("chaining identity: sentence logprob equals the sum of step logprobs") {
  Grammar g = load("nested_parens");
  Vocab v = Vocab::for_grammar(g);
  Transformer model(tiny_config(), v);
  auto s = g.tokens_from_strings({"(", "a", ")"});
  auto conds = model.conditional_logprobs(s);
  double via_next = 0;
  std::vector<int> prefix;
  for (int t : s) {
    via_next += std::log(model.next_dist(prefix).terminal_probs[t]);
    prefix.push_back(t);
  }
  via_next += std::log(model.next_dist(prefix).eos);
  CHECK(model.sentence_logprob(s) == doctest::Approx(via_next).epsilon(1e-12));
  double sum = 0;
  for (double c : conds) sum += c;
  CHECK(sum == doctest::Approx(via_next).epsilon(1e-12));
}

TEST_CASE("training on a single-sentence language drives loss to zero") {
  Grammar g = load_grammar_text("start: S\nS -> \"a\" [1.0]\n");
  SubgrammarDag dag = decompose_dag(g);
  Corpus corpus = sample_corpus(g, dag, 64, 1, {}, Exec::serial);
  ModelConfig mc;
  mc.layers = 1;
  mc.heads = 2;
  mc.model_dim = 32;
  mc.mlp_dim = 64;
  mc.max_context = 8;
  mc.seed = 3;
  Transformer model(mc, Vocab::for_grammar(g));
  TrainConfig tc;
  tc.steps = 200;
  tc.batch_size = 16;
  tc.opt.lr = 3e-3;
  tc.exec = Exec::serial;
  auto log = model.train(corpus, g, tc);
  CHECK(log.back().loss < 0.05);
  CHECK(log.back().step == 200);
}

TEST_CASE("training is deterministic and identical under serial and openmp") {
  Grammar g = load("nested_parens");
  SubgrammarDag dag = decompose_dag(g);
  SampleLimits lim;
  lim.max_tokens = 60;
  Corpus corpus = sample_corpus(g, dag, 256, 9, lim, Exec::serial);
  ModelConfig mc = tiny_config();
  mc.max_context = 64;
  auto run = [&](Exec exec) {
    Transformer model(mc, Vocab::for_grammar(g));
    TrainConfig tc;
    tc.steps = 12;
    tc.batch_size = 16;
    tc.exec = exec;
    tc.log_every = 1;
    auto log = model.train(corpus, g, tc);
    return std::make_pair(log, std::move(model));
  };
#ifdef _OPENMP
  omp_set_num_threads(4);
#endif
  auto [log1, m1] = run(Exec::serial);
  auto [log2, m2] = run(Exec::openmp);
  auto [log3, m3] = run(Exec::serial);
  REQUIRE(log1.size() == log2.size());
  for (std::size_t i = 0; i < log1.size(); ++i) {
    CHECK(log1[i].loss == log2[i].loss);  // bitwise
    CHECK(log1[i].loss == log3[i].loss);
  }
  for (std::size_t i = 0; i < m1.params().size(); ++i) {
    CHECK(m1.params()[i] == m2.params()[i]);
    CHECK(m1.params()[i] == m3.params()[i]);
  }
}

TEST_CASE("per-bucket restricted loss columns are populated and consistent") {
  Grammar g = load("kl_example_2");
  SubgrammarDag dag = decompose_dag(g);
  SampleLimits lim;
  lim.max_tokens = 120;
  Corpus corpus = sample_corpus(g, dag, 128, 21, lim, Exec::serial);
  ModelConfig mc = tiny_config();
  mc.max_context = 128;
  Transformer model(mc, Vocab::for_grammar(g));
  EvalResult ev = model.evaluate(corpus, g, Exec::serial);
  CHECK(ev.bucket_ce.count("OVERHEAD") == 1);
  CHECK(ev.bucket_ce.count("ROOT-EOS") == 1);
  CHECK(ev.bucket_ce.count("L2_2") == 1);
  double total = 0;
  std::int64_t slots = 0;
  for (const auto& [k, ce] : ev.bucket_ce) {
    total += ce * ev.bucket_slots.at(k);
    slots += ev.bucket_slots.at(k);
  }
  CHECK(slots == ev.slots);
  CHECK(total == doctest::Approx(ev.total_ce).epsilon(1e-9));
}

TEST_CASE("vocab mismatch is rejected") {
  Grammar g = load("kl_example_2");
  Grammar small = load("nested_parens");
  SubgrammarDag dag = decompose_dag(g);
  Corpus corpus = sample_corpus(g, dag, 8, 2, {}, Exec::serial);
  ModelConfig mc = tiny_config();
  mc.max_context = 256;
  Transformer model(mc, Vocab::for_grammar(small));
  TrainConfig tc;
  tc.steps = 1;
  tc.batch_size = 2;
  CHECK_THROWS_AS(model.train(corpus, g, tc), DataError);
}

TEST_CASE("checkpoint save/load round-trips bit-exactly") {
  Grammar g = load("nested_parens");
  SubgrammarDag dag = decompose_dag(g);
  SampleLimits lim;
  lim.max_tokens = 40;
  Corpus corpus = sample_corpus(g, dag, 64, 4, lim, Exec::serial);
  ModelConfig mc = tiny_config();
  mc.max_context = 48;
  Transformer model(mc, Vocab::for_grammar(g));
  TrainConfig tc;
  tc.steps = 5;
  tc.batch_size = 8;
  tc.exec = Exec::serial;
  model.train(corpus, g, tc);

  auto path = (std::filesystem::temp_directory_path() / "pcfglab_ckpt_test.bin").string();
  model.save(path);
  Transformer back = Transformer::load(path);
  std::remove(path.c_str());
  CHECK(back.step() == model.step());
  for (std::size_t i = 0; i < model.params().size(); ++i)
    CHECK(model.params()[i] == back.params()[i]);
  double a = model.evaluate(corpus, g, Exec::serial).total_ce;
  double b = back.evaluate(corpus, g, Exec::serial).total_ce;
  CHECK(a == b);  // bitwise
  // training continues identically from the restored optimizer state
  TrainConfig tc2 = tc;
  tc2.steps = 3;
  auto l1 = model.train(corpus, g, tc2);
  auto l2 = back.train(corpus, g, tc2);
  CHECK(l1.back().loss == l2.back().loss);
}

TEST_CASE("activation capture: shapes and determinism") {
  Grammar g = load("nested_parens");
  Vocab v = Vocab::for_grammar(g);
  ModelConfig mc = tiny_config();
  mc.layers = 2;
  mc.max_context = 32;
  Transformer model(mc, v);
  auto s = g.tokens_from_strings({"(", "(", "a", ")", ")"});
  ActivationRecord r1 = model.capture_activations(s);
  ActivationRecord r2 = model.capture_activations(s);
  REQUIRE(r1.attention.size() == 2);
  REQUIRE(r1.mlp.size() == 2);
  for (int l = 0; l < 2; ++l) {
    CHECK(r1.attention[l].rows() == 5);
    CHECK(r1.attention[l].cols() == mc.model_dim);
    CHECK(r1.mlp[l].rows() == 5);
    CHECK(r1.attention[l] == r2.attention[l]);
    CHECK(r1.mlp[l] == r2.mlp[l]);
  }
}

TEST_CASE("dropout training still has finite loss and stays deterministic") {
  Grammar g = load("nested_parens");
  SubgrammarDag dag = decompose_dag(g);
  SampleLimits lim;
  lim.max_tokens = 40;
  Corpus corpus = sample_corpus(g, dag, 64, 6, lim, Exec::serial);
  ModelConfig mc = tiny_config();
  mc.max_context = 48;
  mc.dropout = 0.1;
  auto run = [&] {
    Transformer model(mc, Vocab::for_grammar(g));
    TrainConfig tc;
    tc.steps = 6;
    tc.batch_size = 8;
    tc.exec = Exec::serial;
    tc.log_every = 1;
    return model.train(corpus, g, tc);
  };
  auto l1 = run(), l2 = run();
  for (std::size_t i = 0; i < l1.size(); ++i) {
    CHECK(std::isfinite(l1[i].loss));
    CHECK(l1[i].loss == l2[i].loss);
  }
}

TEST_CASE("a briefly trained model concentrates mass correctly after '('") {
  Grammar g = load("nested_parens");
  SubgrammarDag dag = decompose_dag(g);
  SampleLimits lim;
  lim.max_tokens = 100;
  Corpus corpus = sample_corpus(g, dag, 2000, 8, lim, Exec::serial);
  ModelConfig mc;
  mc.layers = 2;
  mc.heads = 2;
  mc.model_dim = 48;
  mc.mlp_dim = 96;
  mc.max_context = 104;
  mc.seed = 1;
  Transformer model(mc, Vocab::for_grammar(g));
  TrainConfig tc;
  tc.steps = 600;
  tc.batch_size = 32;
  tc.opt.lr = 1e-3;
  auto log = model.train(corpus, g, tc);
  CHECK(log.back().loss < 1.2);  // well below the ~1.55 uniform baseline
  TokenDistribution d = model.next_dist(g.tokens_from_strings({"("}));
  double mass = d.terminal_probs[g.require_terminal("(")] +
                d.terminal_probs[g.require_terminal("a")];
  CHECK(mass >= 0.99);
}
