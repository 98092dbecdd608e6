#include "pcfglab/lm.hpp"

#include <cmath>

#include "pcfglab/errors.hpp"

namespace pcfglab {

std::vector<double> LanguageModel::conditional_logprobs(const std::vector<int>& tokens) const {
  std::vector<double> out;
  out.reserve(tokens.size() + 1);
  std::vector<int> prefix;
  prefix.reserve(tokens.size());
  for (int t : tokens) {
    TokenDistribution d = next_dist(prefix);
    double p = t >= 0 && t < static_cast<int>(d.terminal_probs.size()) ? d.terminal_probs[t] : 0;
    out.push_back(p > 0 ? std::log(p) : -std::numeric_limits<double>::infinity());
    prefix.push_back(t);
  }
  TokenDistribution d = next_dist(prefix);
  out.push_back(d.eos > 0 ? std::log(d.eos) : -std::numeric_limits<double>::infinity());
  return out;
}

double LanguageModel::sentence_logprob(const std::vector<int>& tokens) const {
  double sum = 0;
  for (double lp : conditional_logprobs(tokens)) sum += lp;
  return sum;
}

std::vector<int> LanguageModel::sample(RngStream& rng, int max_len) const {
  std::vector<int> out;
  while (static_cast<int>(out.size()) < max_len) {
    TokenDistribution d = next_dist(out);
    double u = rng.unit() * d.sum();
    double acc = d.eos;
    if (u < acc) return out;
    int chosen = static_cast<int>(d.terminal_probs.size()) - 1;
    for (std::size_t t = 0; t < d.terminal_probs.size(); ++t) {
      acc += d.terminal_probs[t];
      if (u < acc) {
        chosen = static_cast<int>(t);
        break;
      }
    }
    out.push_back(chosen);
  }
  return out;
}

Grammar with_weights(const Grammar& g, const std::vector<double>& weights) {
  if (weights.size() != g.rules.size()) throw DataError("weight vector length mismatch");
  Grammar out = g;
  // snap to a 1e9 rational grid, then renormalize exactly per nonterminal
  const std::int64_t kGrid = 1000000000;
  for (std::size_t r = 0; r < weights.size(); ++r) {
    if (!(weights[r] >= 0)) throw DataError("perturbed weight is negative or NaN");
    out.rules[r].weight_exact =
        Rational(static_cast<std::int64_t>(std::llround(weights[r] * kGrid)), kGrid);
  }
  for (int nt = 0; nt < out.num_nonterminals(); ++nt) {
    Rational sum(0, 1);
    for (int r : out.rules_of[nt]) sum = sum + out.rules[r].weight_exact;
    if (sum.num == 0) throw DataError("all weights of a nonterminal vanished");
    for (int r : out.rules_of[nt]) {
      out.rules[r].weight_exact = out.rules[r].weight_exact / sum;
      out.rules[r].weight = out.rules[r].weight_exact.to_double();
    }
  }
  return out;
}

Grammar perturb_weights(const Grammar& g, const PerturbSpec& spec) {
  std::vector<char> touch(g.num_nonterminals(), spec.targets.empty() ? 1 : 0);
  for (const auto& name : spec.targets) touch[g.require_nonterminal(name)] = 1;
  if (spec.magnitude == 0.0) return g;
  RngStream rng(spec.seed, 0xbead);
  std::vector<double> w(g.rules.size());
  for (std::size_t r = 0; r < g.rules.size(); ++r) {
    double u = 2.0 * rng.unit() - 1.0;  // draw for every rule to keep streams stable
    w[r] = g.rules[r].weight;
    if (touch[g.rules[r].lhs]) w[r] *= std::exp(spec.magnitude * u);
  }
  return with_weights(g, w);
}

SyntheticComposedLm::SyntheticComposedLm(const Grammar& p_grammar, const PerturbSpec& spec)
    : oracle_(perturb_weights(p_grammar, spec)) {}

SyntheticComposedLm::SyntheticComposedLm(Grammar q_grammar) : oracle_(std::move(q_grammar)) {}

}  // namespace pcfglab
