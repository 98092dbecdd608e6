#pragma once

#include <memory>
#include <string>
#include <vector>

#include "pcfglab/grammar.hpp"
#include "pcfglab/oracle.hpp"
#include "pcfglab/rng.hpp"

namespace pcfglab {

// Grammar terminals plus the control symbols, with stable contiguous ids:
// terminals keep their grammar ids, then EOS, BOS, PAD.
struct Vocab {
  std::vector<std::string> symbols;
  int n_terminals = 0;
  int eos = 0, bos = 0, pad = 0;

  static Vocab for_grammar(const Grammar& g) {
    Vocab v;
    v.symbols = g.terminals;
    v.n_terminals = g.num_terminals();
    v.eos = v.n_terminals;
    v.bos = v.n_terminals + 1;
    v.pad = v.n_terminals + 2;
    v.symbols.push_back("<eos>");
    v.symbols.push_back("<bos>");
    v.symbols.push_back("<pad>");
    return v;
  }
  int size() const { return static_cast<int>(symbols.size()); }
};

// Anything that autoregressively prices terminal sequences. Distributions
// are over grammar terminals plus EOS; prefixes/sentences use terminal ids.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual int num_terminals() const = 0;
  virtual TokenDistribution next_dist(const std::vector<int>& prefix) const = 0;
  // entry i = log P(tokens[i] | tokens[<i]); final entry = log P(EOS | all).
  // Default implementation chains next_dist; subclasses override with a
  // single pass where that is cheaper.
  virtual std::vector<double> conditional_logprobs(const std::vector<int>& tokens) const;

  double sentence_logprob(const std::vector<int>& tokens) const;
  // ancestral sampling from the model's own conditionals
  std::vector<int> sample(RngStream& rng, int max_len) const;
};

// Q = P: wraps the exact oracle; the zero-KL reference point.
class OracleLm : public LanguageModel {
 public:
  explicit OracleLm(const Grammar& g) : oracle_(g) {}
  int num_terminals() const override { return oracle_.grammar().num_terminals(); }
  TokenDistribution next_dist(const std::vector<int>& prefix) const override {
    return oracle_.next_token_dist(prefix);
  }
  std::vector<double> conditional_logprobs(const std::vector<int>& tokens) const override {
    return oracle_.conditional_logprobs(tokens);
  }
  const Oracle& oracle() const { return oracle_; }

 private:
  Oracle oracle_;
};

// Uniform over terminals + EOS at every step, for closed-form KL baselines.
class UniformLm : public LanguageModel {
 public:
  explicit UniformLm(int n_terminals) : n_(n_terminals) {}
  int num_terminals() const override { return n_; }
  TokenDistribution next_dist(const std::vector<int>&) const override {
    TokenDistribution d;
    d.terminal_probs.assign(n_, 1.0 / (n_ + 1));
    d.eos = 1.0 / (n_ + 1);
    return d;
  }
  std::vector<double> conditional_logprobs(const std::vector<int>& tokens) const override {
    return std::vector<double>(tokens.size() + 1, -std::log(n_ + 1.0));
  }

 private:
  int n_;
};

// Per-nonterminal multiplicative weight noise; empty targets = everywhere.
struct PerturbSpec {
  std::uint64_t seed = 1;
  double magnitude = 0.1;            // log-space amplitude
  std::vector<std::string> targets;  // nonterminal names to touch
};

// Same structure and symbols, perturbed renormalized weights. Throws
// DataError when the spec names unknown nonterminals.
Grammar perturb_weights(const Grammar& g, const PerturbSpec& spec);

// Replaces the weights with the given per-rule values (renormalized exactly
// through a rational grid so sampling tables stay exact).
Grammar with_weights(const Grammar& g, const std::vector<double>& weights);

// A model that generates each subgrammar identically in every context, by
// construction: the oracle of a weight-perturbed copy of the grammar.
class SyntheticComposedLm : public LanguageModel {
 public:
  SyntheticComposedLm(const Grammar& p_grammar, const PerturbSpec& spec);
  explicit SyntheticComposedLm(Grammar q_grammar);
  int num_terminals() const override { return oracle_.grammar().num_terminals(); }
  TokenDistribution next_dist(const std::vector<int>& prefix) const override {
    return oracle_.next_token_dist(prefix);
  }
  std::vector<double> conditional_logprobs(const std::vector<int>& tokens) const override {
    return oracle_.conditional_logprobs(tokens);
  }
  const Grammar& q_grammar() const { return oracle_.grammar(); }

 private:
  Oracle oracle_;
};

}  // namespace pcfglab
