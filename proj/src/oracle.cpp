#include "pcfglab/oracle.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "pcfglab/errors.hpp"
#include "pcfglab/sampler.hpp"

namespace pcfglab {

double Oracle::string_logprob(const std::vector<int>& tokens) const {
  if (tokens.empty())
    return parser_.empty_sentence_prob() > 0 ? std::log(parser_.empty_sentence_prob())
                                             : -std::numeric_limits<double>::infinity();
  auto s = parser_.session();
  for (int t : tokens)
    if (!std::isfinite(s.advance(t))) return -std::numeric_limits<double>::infinity();
  return s.consumed_logprob() + s.eos_logprob();
}

double Oracle::prefix_logprob(const std::vector<int>& prefix) const {
  auto s = parser_.session();
  for (int t : prefix)
    if (!std::isfinite(s.advance(t))) return -std::numeric_limits<double>::infinity();
  return s.consumed_logprob();
}

std::vector<double> Oracle::conditional_logprobs(const std::vector<int>& tokens) const {
  std::vector<double> out;
  out.reserve(tokens.size() + 1);
  auto s = parser_.session();
  for (int t : tokens) out.push_back(s.advance(t));
  out.push_back(s.eos_logprob());
  return out;
}

TokenDistribution Oracle::next_token_dist(const std::vector<int>& prefix) const {
  auto s = parser_.session();
  for (int t : prefix)
    if (!std::isfinite(s.advance(t)))
      throw DataError("impossible prefix: zero probability at position " +
                      std::to_string(s.position()));
  return s.next_dist();
}

bool Oracle::recognize(const std::vector<int>& tokens) const {
  return std::isfinite(string_logprob(tokens));
}

EntropyReport derivational_entropy(const Grammar& g, int ambiguity_samples,
                                   std::uint64_t check_seed) {
  ValidationReport v = validate(g);
  if (!v.consistent) throw DataError("entropy needs a consistent grammar: " + g.name);

  int n = g.num_nonterminals();
  Eigen::VectorXd local = Eigen::VectorXd::Zero(n);
  for (const Rule& r : g.rules)
    if (r.weight > 0.0) local(r.lhs) -= r.weight * std::log(r.weight);
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n) - mean_matrix(g);
  Eigen::VectorXd h = a.partialPivLu().solve(local);

  EntropyReport rep;
  rep.derivational_entropy = h(g.start);
  for (int nt = 0; nt < n; ++nt) rep.per_nonterminal[g.nonterminals[nt]] = h(nt);

  if (ambiguity_samples > 0) {
    Oracle oracle(g);
    SamplingTables tables(g);
    SampleLimits lim;
    for (int i = 0; i < ambiguity_samples && !rep.ambiguous_warning; ++i) {
      DerivationTree t = sample_tree(g, tables, check_seed, i, lim);
      double sp = oracle.string_logprob(frontier(g, t));
      if (sp > t.log_prob + 1e-9) rep.ambiguous_warning = true;
    }
  }
  return rep;
}

RecursionStats expected_recursion(const Grammar& g, int nt) {
  if (nt < 0 || nt >= g.num_nonterminals()) throw DataError("unknown nonterminal id");
  RecursionStats s;
  for (int r : g.rules_of[nt])
    s.expected_recursion += g.rules[r].weight * g.rules[r].count_nonterminal(nt);
  if (s.expected_recursion < 1.0) {
    s.blowup_factor = 1.0 / (1.0 - s.expected_recursion);
  } else {
    s.unbounded = true;
    s.blowup_factor = std::numeric_limits<double>::infinity();
  }
  return s;
}

RecursionStats expected_recursion(const Grammar& g, const std::string& nt) {
  return expected_recursion(g, g.require_nonterminal(nt));
}

double expected_length(const Grammar& g) {
  ValidationReport v = validate(g);
  if (!v.consistent) throw DataError("expected length needs a consistent grammar: " + g.name);
  int n = g.num_nonterminals();
  Eigen::VectorXd t = Eigen::VectorXd::Zero(n);
  for (const Rule& r : g.rules) t(r.lhs) += r.weight * r.terminal_count();
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n) - mean_matrix(g);
  Eigen::VectorXd len = a.partialPivLu().solve(t);
  return len(g.start);
}

}  // namespace pcfglab
