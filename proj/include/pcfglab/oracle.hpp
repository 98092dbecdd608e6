#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pcfglab/earley.hpp"
#include "pcfglab/grammar.hpp"

namespace pcfglab {

struct EntropyReport {
  double derivational_entropy = 0.0;  // nats
  std::map<std::string, double> per_nonterminal;
  bool ambiguous_warning = false;  // then string entropy <= derivational entropy
};

struct RecursionStats {
  double expected_recursion = 0.0;
  double blowup_factor = 0.0;
  bool unbounded = false;  // E[R] >= 1
};

// Exact ground truth for a PCFG. All probability queries run on one
// incremental chart per call; everything is pure and concurrently callable.
class Oracle {
 public:
  explicit Oracle(const Grammar& g) : parser_(g) {}

  const Grammar& grammar() const { return parser_.grammar(); }

  double string_logprob(const std::vector<int>& tokens) const;
  double prefix_logprob(const std::vector<int>& prefix) const;
  // size tokens.size()+1; entry i = log P(tokens[i] | tokens[<i]), last entry
  // = log P(EOS | tokens). Dead extensions yield -inf from that point on.
  std::vector<double> conditional_logprobs(const std::vector<int>& tokens) const;
  // throws DataError on an impossible prefix
  TokenDistribution next_token_dist(const std::vector<int>& prefix) const;
  bool recognize(const std::vector<int>& tokens) const;

  // string-convenience forms
  double string_logprob(const std::vector<std::string>& toks) const {
    return string_logprob(grammar().tokens_from_strings(toks));
  }
  double prefix_logprob(const std::vector<std::string>& toks) const {
    return prefix_logprob(grammar().tokens_from_strings(toks));
  }

  EarleyParser::Session session() const { return parser_.session(); }

 private:
  EarleyParser parser_;
};

// Per-nonterminal entropies solve (I - M) H = local with
// local[A] = -sum w log w. The ambiguity check samples `ambiguity_samples`
// derivations and compares tree log-probability with chart string
// log-probability. Throws DataError for inconsistent grammars.
EntropyReport derivational_entropy(const Grammar& g, int ambiguity_samples = 2000,
                                   std::uint64_t check_seed = 0x9e1d);

RecursionStats expected_recursion(const Grammar& g, int nt);
RecursionStats expected_recursion(const Grammar& g, const std::string& nt);

// Solves (I - M) L = t with t[A] = sum w * (#terminals in rhs).
double expected_length(const Grammar& g);

}  // namespace pcfglab
