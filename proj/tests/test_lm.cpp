#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "pcfglab/errors.hpp"
#include "pcfglab/lm.hpp"
#include "pcfglab/sampler.hpp"
#include "support/test_paths.hpp"

using namespace pcfglab;
using pcfglab::testing::grammar_path;

namespace {
Grammar load(const std::string& name) { return load_grammar_file(grammar_path(name)); }
}  // namespace

TEST_CASE("vocab layout: terminals then EOS, BOS, PAD") {
  Grammar g = load("nested_parens");
  Vocab v = Vocab::for_grammar(g);
  CHECK(v.n_terminals == 3);
  CHECK(v.size() == 6);
  CHECK(v.eos == 3);
  CHECK(v.bos == 4);
  CHECK(v.pad == 5);
  CHECK(v.symbols[0] == "(");
}

TEST_CASE("oracle lm delegates exactly to the oracle") {
  Grammar g = load("kl_example_2");
  OracleLm lm(g);
  Oracle o(g);
  SamplingTables tables(g);
  for (int i = 0; i < 20; ++i) {
    DerivationTree t = sample_tree(g, tables, 2, i);
    auto tokens = frontier(g, t);
    auto a = lm.conditional_logprobs(tokens);
    auto b = o.conditional_logprobs(tokens);
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k] == b[k]);
    // prefix next_dist identical too
    std::vector<int> prefix(tokens.begin(), tokens.begin() + tokens.size() / 2);
    TokenDistribution da = lm.next_dist(prefix), db = o.next_token_dist(prefix);
    for (std::size_t k = 0; k < da.terminal_probs.size(); ++k)
      CHECK(std::abs(da.terminal_probs[k] - db.terminal_probs[k]) < 1e-12);
  }
}

TEST_CASE("uniform lm prices every slot at log(T+1)") {
  Grammar g = load("nested_parens");
  UniformLm lm(g.num_terminals());
  auto lp = lm.conditional_logprobs(g.tokens_from_strings({"(", "a", ")"}));
  for (double x : lp) CHECK(x == doctest::Approx(-std::log(4.0)).epsilon(1e-12));
  CHECK(lm.next_dist({}).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("default conditional_logprobs chains next_dist") {
  Grammar g = load("nested_parens");
  // exercise the base-class default through a thin adapter
  struct Wrap : LanguageModel {
    const Oracle& o;
    explicit Wrap(const Oracle& oo) : o(oo) {}
    int num_terminals() const override { return o.grammar().num_terminals(); }
    TokenDistribution next_dist(const std::vector<int>& p) const override {
      return o.next_token_dist(p);
    }
  };
  Oracle o(g);
  Wrap w(o);
  auto tokens = g.tokens_from_strings({"(", "(", "a", ")", ")"});
  auto a = w.conditional_logprobs(tokens);
  auto b = o.conditional_logprobs(tokens);
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-9));
  CHECK(w.sentence_logprob(tokens) == doctest::Approx(o.string_logprob(tokens)).epsilon(1e-9));
}

TEST_CASE("zero perturbation gives back the oracle") {
  Grammar g = load("recursion_composition");
  PerturbSpec spec;
  spec.magnitude = 0.0;
  SyntheticComposedLm lm(g, spec);
  CHECK(structural_equal(lm.q_grammar(), g));
  OracleLm ref(g);
  auto tokens = g.tokens_from_strings({"(", "x", "and", "x", ")"});
  auto a = lm.conditional_logprobs(tokens);
  auto b = ref.conditional_logprobs(tokens);
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k] == b[k]);
}

TEST_CASE("perturbation touches only the targeted nonterminal") {
  Grammar g = load("kl_example_2");
  PerturbSpec spec;
  spec.seed = 4;
  spec.magnitude = 0.3;
  spec.targets = {"L2_2"};
  Grammar q = perturb_weights(g, spec);
  for (std::size_t r = 0; r < g.rules.size(); ++r) {
    if (g.rules[r].lhs == g.require_nonterminal("L2_2"))
      CHECK(q.rules[r].weight != g.rules[r].weight);
    else
      CHECK(q.rules[r].weight == doctest::Approx(g.rules[r].weight).epsilon(1e-9));
  }
  // still a valid distribution per nonterminal
  for (double s : validate(q).weight_sums) CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  CHECK_THROWS_AS(perturb_weights(g, PerturbSpec{1, 0.1, {"nope"}}), DataError);
}

TEST_CASE("model sampling terminates and respects the cap") {
  Grammar g = load("nested_parens");
  OracleLm lm(g);
  RngStream rng(3, 0);
  Oracle o(g);
  for (int i = 0; i < 30; ++i) {
    auto s = lm.sample(rng, 200);
    if (static_cast<int>(s.size()) < 200) CHECK(o.recognize(s));
  }
}
