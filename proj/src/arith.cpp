#include "pcfglab/arith.hpp"

#include <algorithm>
#include <cctype>

#include "pcfglab/errors.hpp"

namespace pcfglab::arith {

int Expr::depth() const {
  if (is_leaf()) return 0;
  return 1 + std::max(lhs->depth(), rhs->depth());
}

namespace {

struct Parser {
  const std::string& s;
  std::size_t i = 0;

  void skip() {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
  }
  [[noreturn]] void fail(const std::string& msg) {
    throw DataError("expression parse error at offset " + std::to_string(i) + ": " + msg);
  }
  char peek() {
    skip();
    return i < s.size() ? s[i] : '\0';
  }

  std::unique_ptr<Expr> atom() {
    skip();
    if (i >= s.size()) fail("unexpected end of input");
    char c = s[i];
    if (c == '(') {
      ++i;
      auto e = sum();
      skip();
      if (i >= s.size() || s[i] != ')') fail("expected ')'");
      ++i;
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      ++i;
      auto e = std::make_unique<Expr>();
      e->leaf = c - '0';
      return e;
    }
    fail(std::string("unexpected character '") + c + "'");
  }

  std::unique_ptr<Expr> product() {
    auto e = atom();
    while (true) {
      char c = peek();
      if (c != '*' && c != '/') return e;
      ++i;
      auto node = std::make_unique<Expr>();
      node->op = c;
      node->lhs = std::move(e);
      node->rhs = atom();
      e = std::move(node);
    }
  }

  std::unique_ptr<Expr> sum() {
    auto e = product();
    while (true) {
      char c = peek();
      if (c != '+' && c != '-') return e;
      ++i;
      auto node = std::make_unique<Expr>();
      node->op = c;
      node->lhs = std::move(e);
      node->rhs = product();
      e = std::move(node);
    }
  }
};

Expr clone(const Expr& e) {
  Expr out;
  out.op = e.op;
  out.leaf = e.leaf;
  if (!e.is_leaf()) {
    out.lhs = std::make_unique<Expr>(clone(*e.lhs));
    out.rhs = std::make_unique<Expr>(clone(*e.rhs));
  }
  return out;
}

}  // namespace

Expr parse_expr(const std::string& text) {
  Parser p{text};
  auto e = p.sum();
  p.skip();
  if (p.i != text.size()) p.fail("trailing input");
  return clone(*e);
}

std::string print_expr(const Expr& e) {
  if (e.is_leaf()) return std::to_string(e.leaf);
  return "(" + print_expr(*e.lhs) + " " + e.op + " " + print_expr(*e.rhs) + ")";
}

Rat eval_exact(const Expr& e) {
  if (e.is_leaf()) return Rat(e.leaf);
  Rat a = eval_exact(*e.lhs);
  Rat b = eval_exact(*e.rhs);
  switch (e.op) {
    case '+': return a + b;
    case '-': return a - b;
    case '*': return a * b;
    case '/':
      if (b == 0) throw NumericalError("division by zero in subtree " + print_expr(e));
      return a / b;
    default: throw DataError("unknown operator");
  }
}

Rat eval_exact(const std::string& text) { return eval_exact(parse_expr(text)); }

namespace {

const char kOps[4] = {'+', '-', '*', '/'};

Expr gen_leaf(RngStream& rng) {
  Expr e;
  e.leaf = static_cast<int>(rng.below(10));
  return e;
}

Expr gen_node(RngStream& rng, int depth) {
  if (depth == 0) return gen_leaf(rng);
  Expr e;
  e.op = kOps[rng.below(4)];
  e.lhs = std::make_unique<Expr>(gen_node(rng, depth - 1));
  e.rhs = std::make_unique<Expr>(gen_node(rng, depth - 1));
  return e;
}

bool evaluates(const Expr& e) {
  try {
    eval_exact(e);
    return true;
  } catch (const NumericalError&) {
    return false;
  }
}

Expr gen_checked(RngStream& rng, int depth) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Expr e = gen_node(rng, depth);
    if (evaluates(e)) return e;
  }
  throw NumericalError("expression resample budget exhausted");
}

}  // namespace

Expr gen_shallow_chain(std::uint64_t seed, int n_terms) {
  if (n_terms < 1) throw DataError("n_terms must be >= 1");
  RngStream rng(seed, 0x5ca1e);
  // each summand is depth <= 2: full depth 2, lopsided, or depth 1
  auto summand = [&]() -> Expr {
    switch (rng.below(3)) {
      case 0: return gen_checked(rng, 2);
      case 1: {
        for (int attempt = 0; attempt < 1000; ++attempt) {
          Expr e;
          e.op = kOps[rng.below(4)];
          e.lhs = std::make_unique<Expr>(gen_checked(rng, 1));
          e.rhs = std::make_unique<Expr>(gen_leaf(rng));
          if (evaluates(e)) return e;
        }
        throw NumericalError("expression resample budget exhausted");
      }
      default: return gen_checked(rng, 1);
    }
  };
  Expr chain = summand();
  for (int k = 1; k < n_terms; ++k) {
    Expr node;
    node.op = '+';
    node.lhs = std::make_unique<Expr>(std::move(chain));
    node.rhs = std::make_unique<Expr>(summand());
    chain = std::move(node);
  }
  return chain;
}

Expr gen_deep_expr(std::uint64_t seed, int depth) {
  if (depth < 1) throw DataError("depth must be >= 1");
  RngStream rng(seed, 0xdee9);
  return gen_checked(rng, depth);
}

}  // namespace pcfglab::arith
