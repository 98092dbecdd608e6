#pragma once

#include <Eigen/Core>
#include <memory>
#include <unordered_map>
#include <vector>

#include "pcfglab/grammar.hpp"

namespace pcfglab {

// Probability vector over the grammar's terminals plus EOS.
struct TokenDistribution {
  std::vector<double> terminal_probs;
  double eos = 0.0;

  double sum() const {
    double s = eos;
    for (double p : terminal_probs) s += p;
    return s;
  }
  double tv_distance(const TokenDistribution& o) const {
    double d = std::abs(eos - o.eos);
    for (std::size_t i = 0; i < terminal_probs.size(); ++i)
      d += std::abs(terminal_probs[i] - o.terminal_probs[i]);
    return 0.5 * d;
  }
};

// Probabilistic Earley chart with prefix probabilities. Left recursion and
// unit chains are folded into the left-corner and unit closure matrices
// R_L = (I-P_L)^-1 and R_U = (I-P_U)^-1; epsilon rules are removed up front
// by a weighted transform that preserves all nonempty string probabilities.
// Forward/inner probabilities are rescaled by each token's conditional, so
// arbitrarily long sentences stay in range; per-token conditionals come out
// of the rescaling constants directly.
class EarleyParser {
 public:
  explicit EarleyParser(const Grammar& g);

  const Grammar& grammar() const { return g_; }
  double empty_sentence_prob() const { return eps_start_; }

  struct XRule {
    int lhs;
    std::vector<Symbol> rhs;  // nonempty; not a single nonterminal
    double weight;
  };

  class Session {
   public:
    explicit Session(const EarleyParser& parser);

    // Consumes one terminal. Returns log P(t | consumed prefix); -inf when
    // the extension is impossible (the session is dead afterwards).
    double advance(int terminal);
    double consumed_logprob() const { return dead_ ? -kInf() : prefix_lp_; }
    double eos_logprob() const;               // log P(EOS | consumed prefix)
    TokenDistribution next_dist() const;      // P(. | consumed prefix)
    bool dead() const { return dead_; }
    int position() const { return pos_; }

   private:
    struct State {
      int rule;  // index into parser's xrules_
      int dot;
      int origin;
      double alpha;  // forward, rescaled
      double gamma;  // inner, rescaled over the state's span
    };
    struct Position {
      std::vector<State> states;
      std::unordered_map<std::uint64_t, int> index;
      std::vector<std::vector<int>> waiting;  // nonterminal -> states with that next symbol
    };

    static double kInf() { return std::numeric_limits<double>::infinity(); }
    int add_state(Position& p, int rule, int dot, int origin, double alpha, double gamma);
    void complete_and_predict(std::vector<std::pair<std::pair<int, int>, double>> seeds);

    const EarleyParser& p_;
    std::vector<Position> chart_;
    int pos_ = 0;
    bool dead_ = false;
    double prefix_lp_ = 0.0;
    double eos_scaled_ = 0.0;  // P(EOS | prefix), valid after each position
  };

  Session session() const { return Session(*this); }

 private:
  friend class Session;
  Grammar g_;  // original grammar (copied; sessions reference the parser)
  std::vector<XRule> xrules_;
  std::vector<std::vector<int>> xrules_of_;      // lhs -> xrule ids
  Eigen::MatrixXd rl_;                           // left-corner closure
  Eigen::MatrixXd ru_;                           // unit-production closure
  std::vector<std::vector<std::pair<int, double>>> unit_parents_;  // C -> {(B, RU[B][C])}
  double eps_start_ = 0.0;                       // P(S =>* epsilon)
};

}  // namespace pcfglab
