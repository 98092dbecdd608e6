#pragma once

#include <Eigen/Core>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcfglab/rational.hpp"

namespace pcfglab {

struct Symbol {
  bool terminal = false;
  int id = 0;
  friend bool operator==(const Symbol&, const Symbol&) = default;
};

struct Rule {
  int lhs = 0;
  std::vector<Symbol> rhs;  // empty = epsilon
  double weight = 0.0;
  Rational weight_exact;

  int terminal_count() const {
    int n = 0;
    for (const auto& s : rhs) n += s.terminal ? 1 : 0;
    return n;
  }
  int count_nonterminal(int nt) const {
    int n = 0;
    for (const auto& s : rhs) n += (!s.terminal && s.id == nt) ? 1 : 0;
    return n;
  }
};

// A PCFG. Symbol tables keep declaration order: nonterminals in group order,
// terminals in order of first appearance. Immutable once built; call
// rebuild_index() after any manual construction.
struct Grammar {
  std::string name;
  std::vector<std::string> terminals;
  std::vector<std::string> nonterminals;
  int start = 0;
  std::vector<Rule> rules;

  std::vector<std::vector<int>> rules_of;  // nonterminal id -> rule ids
  std::unordered_map<std::string, int> terminal_id;
  std::unordered_map<std::string, int> nonterminal_id;

  void rebuild_index();

  int num_terminals() const { return static_cast<int>(terminals.size()); }
  int num_nonterminals() const { return static_cast<int>(nonterminals.size()); }
  int require_terminal(const std::string& s) const;     // DataError if unknown
  int require_nonterminal(const std::string& s) const;  // DataError if unknown

  std::vector<int> tokens_from_strings(const std::vector<std::string>& toks) const;
  std::vector<std::string> tokens_to_strings(const std::vector<int>& toks) const;
};

// Syntax layer: accepts the grammar file format, performs no weight policy.
// Throws ParseError with line/column on bad input.
Grammar parse_grammar(const std::string& text, const std::string& name = "");

// Canonical printer: `start:` header, one group per nonterminal in
// declaration order, terminals double-quoted, weights at 6 decimal places.
std::string print_grammar(const Grammar& g);

// parse + one-shot weight renormalization: per-nonterminal sums off by less
// than 1e-6 are normalized exactly (in rationals); larger deviations are
// rejected with DataError.
Grammar load_grammar_text(const std::string& text, const std::string& name = "");
Grammar load_grammar_file(const std::string& path);

// Everything except the display name.
bool structural_equal(const Grammar& a, const Grammar& b);

struct ValidationReport {
  std::vector<double> weight_sums;        // per nonterminal
  std::vector<std::string> unreachable;
  std::vector<std::string> unproductive;
  double spectral_radius = 0.0;
  bool spectral_converged = true;  // false = power iteration hit its cap
  bool sums_ok = true;
  bool consistent = false;

  std::string summary(const Grammar& g) const;
};

ValidationReport validate(const Grammar& g);

// M[A][B] = sum over rules A -> alpha of weight * (count of B in alpha).
Eigen::MatrixXd mean_matrix(const Grammar& g);

// Power iteration with a 10000-iteration cap and relative tolerance 1e-10.
// Returns {rho, converged}.
std::pair<double, bool> spectral_radius(const Eigen::MatrixXd& m);

// --- structural analyses -------------------------------------------------

// Nonterminals reachable from `root` through rule right-hand sides,
// including `root` itself.
std::vector<char> closure_of(const Grammar& g, int root);
std::vector<char> reachable(const Grammar& g);
std::vector<char> productive(const Grammar& g);

// P(A =>* epsilon) per nonterminal, by monotone fixpoint.
std::vector<double> epsilon_probs(const Grammar& g);
std::vector<char> nullable(const Grammar& g);

// Shortest derivable terminal string length per nonterminal (INT_MAX if the
// nonterminal is unproductive).
std::vector<int> min_lengths(const Grammar& g);

// The two-rule family S -> "x" [p] | "(" S "and" S ")" [1-p].
Grammar make_recursion_grammar(const Rational& p);

}  // namespace pcfglab
