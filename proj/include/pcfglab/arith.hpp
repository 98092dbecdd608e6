#pragma once

#include <cstdint>
#include <gmpxx.h>
#include <memory>
#include <string>

#include "pcfglab/rng.hpp"

namespace pcfglab::arith {

// Binary expression tree over single-digit leaves. Depth = maximum level of
// nested parentheses, 0 for a bare digit.
struct Expr {
  char op = 0;  // 0 = leaf
  int leaf = 0;
  std::unique_ptr<Expr> lhs, rhs;

  bool is_leaf() const { return op == 0; }
  int depth() const;
};

using Rat = mpq_class;  // exact, canonical, arbitrary precision

// Parses fully or partially parenthesized expressions over digits and
// + - * /, whitespace-insensitive, standard precedence, left-associative.
// Throws DataError with the offset on junk.
Expr parse_expr(const std::string& text);
std::string print_expr(const Expr& e);  // fully parenthesized canonical form

// Exact evaluation; division by zero raises NumericalError naming the
// offending subtree.
Rat eval_exact(const Expr& e);
Rat eval_exact(const std::string& text);

// n depth<=2 summands joined by +; division-by-zero subtrees are resampled.
Expr gen_shallow_chain(std::uint64_t seed, int n_terms);
// full binary nesting to the requested depth
Expr gen_deep_expr(std::uint64_t seed, int depth);

}  // namespace pcfglab::arith
