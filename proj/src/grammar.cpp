#include "pcfglab/grammar.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <deque>
#include <fstream>
#include <sstream>

#include "pcfglab/errors.hpp"

namespace pcfglab {

void Grammar::rebuild_index() {
  terminal_id.clear();
  nonterminal_id.clear();
  for (int i = 0; i < num_terminals(); ++i) terminal_id[terminals[i]] = i;
  for (int i = 0; i < num_nonterminals(); ++i) nonterminal_id[nonterminals[i]] = i;
  rules_of.assign(nonterminals.size(), {});
  for (int r = 0; r < static_cast<int>(rules.size()); ++r)
    rules_of[rules[r].lhs].push_back(r);
}

int Grammar::require_terminal(const std::string& s) const {
  auto it = terminal_id.find(s);
  if (it == terminal_id.end()) throw DataError("unknown terminal symbol: '" + s + "'");
  return it->second;
}

int Grammar::require_nonterminal(const std::string& s) const {
  auto it = nonterminal_id.find(s);
  if (it == nonterminal_id.end()) throw DataError("unknown nonterminal: '" + s + "'");
  return it->second;
}

std::vector<int> Grammar::tokens_from_strings(const std::vector<std::string>& toks) const {
  std::vector<int> out;
  out.reserve(toks.size());
  for (const auto& t : toks) out.push_back(require_terminal(t));
  return out;
}

std::vector<std::string> Grammar::tokens_to_strings(const std::vector<int>& toks) const {
  std::vector<std::string> out;
  out.reserve(toks.size());
  for (int t : toks) out.push_back(terminals.at(t));
  return out;
}

// --- parser ----------------------------------------------------------------

namespace {

struct Tok {
  enum Kind { Ident, Quoted, Arrow, Pipe, Weight, StartKw } kind;
  std::string text;   // identifier, unescaped terminal, or weight body
  int line, col;
};

// Tokenizes one line. '#' starts a comment unless inside quotes.
std::vector<Tok> lex_line(const std::string& line, int lineno) {
  std::vector<Tok> out;
  std::size_t i = 0;
  auto err = [&](const std::string& m) { throw ParseError(lineno, static_cast<int>(i) + 1, m); };
  while (i < line.size()) {
    char c = line[i];
    if (c == ' ' || c == '\t' || c == '\r') {
      ++i;
      continue;
    }
    if (c == '#') break;
    int col = static_cast<int>(i) + 1;
    if (c == '"') {
      std::string s;
      ++i;
      bool closed = false;
      while (i < line.size()) {
        char d = line[i];
        if (d == '\\') {
          if (i + 1 >= line.size()) err("dangling escape in terminal");
          char e = line[i + 1];
          if (e != '"' && e != '\\') err("unknown escape in terminal");
          s.push_back(e);
          i += 2;
        } else if (d == '"') {
          ++i;
          closed = true;
          break;
        } else {
          s.push_back(d);
          ++i;
        }
      }
      if (!closed) err("unterminated terminal string");
      out.push_back({Tok::Quoted, s, lineno, col});
    } else if (c == '[') {
      auto close = line.find(']', i);
      if (close == std::string::npos) err("unterminated weight bracket");
      std::string body = line.substr(i + 1, close - i - 1);
      body.erase(std::remove_if(body.begin(), body.end(),
                                [](char ch) { return ch == ' ' || ch == '\t'; }),
                 body.end());
      out.push_back({Tok::Weight, body, lineno, col});
      i = close + 1;
    } else if (c == '-' && i + 1 < line.size() && line[i + 1] == '>') {
      out.push_back({Tok::Arrow, "->", lineno, col});
      i += 2;
    } else if (c == '|') {
      out.push_back({Tok::Pipe, "|", lineno, col});
      ++i;
    } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < line.size() &&
             (std::isalnum(static_cast<unsigned char>(line[j])) || line[j] == '_'))
        ++j;
      std::string id = line.substr(i, j - i);
      // `start:` header
      if (id == "start" && j < line.size() && line[j] == ':') {
        out.push_back({Tok::StartKw, id, lineno, col});
        i = j + 1;
      } else {
        out.push_back({Tok::Ident, id, lineno, col});
        i = j;
      }
    } else {
      err(std::string("unexpected character '") + c + "'");
    }
  }
  return out;
}

struct RawAlt {
  // Items before symbol resolution: (is_quoted, text, line, col).
  struct Item {
    bool quoted;
    std::string text;
    int line, col;
  };
  std::vector<Item> items;
  Rational weight;
};

}  // namespace

Grammar parse_grammar(const std::string& text, const std::string& name) {
  Grammar g;
  g.name = name;
  std::string start_name;
  int start_line = 0;
  std::vector<std::pair<std::string, std::vector<RawAlt>>> groups;
  std::unordered_map<std::string, int> group_seen;

  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto toks = lex_line(line, lineno);
    if (toks.empty()) continue;
    std::size_t p = 0;
    if (toks[p].kind == Tok::StartKw) {
      if (!start_name.empty())
        throw ParseError(lineno, toks[p].col,
                         "duplicate start declaration (already set at line " +
                             std::to_string(start_line) + ")");
      if (toks.size() != 2 || toks[1].kind != Tok::Ident)
        throw ParseError(lineno, toks[p].col, "expected 'start: <nonterminal>'");
      start_name = toks[1].text;
      start_line = lineno;
      continue;
    }
    // rule group: Ident -> alt (| alt)*
    if (toks[p].kind != Tok::Ident)
      throw ParseError(toks[p].line, toks[p].col, "expected nonterminal at start of rule group");
    std::string lhs = toks[p].text;
    if (group_seen.count(lhs))
      throw ParseError(toks[p].line, toks[p].col,
                       "duplicate rule group for nonterminal '" + lhs + "'");
    ++p;
    if (p >= toks.size() || toks[p].kind != Tok::Arrow)
      throw ParseError(lineno, p < toks.size() ? toks[p].col : static_cast<int>(line.size()) + 1,
                       "expected '->' after nonterminal");
    ++p;
    std::vector<RawAlt> alts;
    RawAlt cur;
    bool have_weight = false;
    auto flush = [&](int l, int c) {
      if (!have_weight) throw ParseError(l, c, "alternative is missing its [weight]");
      alts.push_back(cur);
      cur = RawAlt{};
      have_weight = false;
    };
    for (; p < toks.size(); ++p) {
      const Tok& t = toks[p];
      if (t.kind == Tok::Pipe) {
        flush(t.line, t.col);
      } else if (t.kind == Tok::Weight) {
        if (have_weight) throw ParseError(t.line, t.col, "two weights in one alternative");
        cur.weight = parse_rational(t.text);
        have_weight = true;
      } else if (t.kind == Tok::Ident || t.kind == Tok::Quoted) {
        if (have_weight)
          throw ParseError(t.line, t.col, "symbols after [weight]; use '|' to separate alternatives");
        cur.items.push_back({t.kind == Tok::Quoted, t.text, t.line, t.col});
      } else {
        throw ParseError(t.line, t.col, "unexpected token in rule group");
      }
    }
    flush(lineno, static_cast<int>(line.size()) + 1);
    group_seen[lhs] = static_cast<int>(groups.size());
    groups.emplace_back(lhs, std::move(alts));
  }

  if (groups.empty()) throw ParseError(lineno + 1, 1, "no rules found");
  if (start_name.empty()) throw ParseError(1, 1, "missing 'start:' declaration");

  for (auto& [lhs, alts] : groups) g.nonterminals.push_back(lhs);
  g.rebuild_index();
  auto sit = g.nonterminal_id.find(start_name);
  if (sit == g.nonterminal_id.end())
    throw ParseError(start_line, 1, "start symbol '" + start_name + "' has no rule group");
  g.start = sit->second;

  // Second pass: resolve symbols. Quoted = terminal, bare = nonterminal.
  for (auto& [lhs, alts] : groups) {
    int lhs_id = g.nonterminal_id[lhs];
    for (auto& alt : alts) {
      Rule r;
      r.lhs = lhs_id;
      r.weight_exact = alt.weight;
      r.weight = alt.weight.to_double();
      for (auto& item : alt.items) {
        if (item.quoted) {
          if (item.text.empty()) continue;  // "" = epsilon, contributes nothing
          auto it = g.terminal_id.find(item.text);
          int id;
          if (it == g.terminal_id.end()) {
            id = g.num_terminals();
            g.terminals.push_back(item.text);
            g.terminal_id[item.text] = id;
          } else {
            id = it->second;
          }
          r.rhs.push_back({true, id});
        } else {
          auto it = g.nonterminal_id.find(item.text);
          if (it == g.nonterminal_id.end())
            throw ParseError(item.line, item.col,
                             "undeclared symbol '" + item.text +
                                 "' (terminals must be double-quoted)");
          r.rhs.push_back({false, it->second});
        }
      }
      g.rules.push_back(std::move(r));
    }
  }
  g.rebuild_index();
  return g;
}

namespace {

std::string quote_terminal(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string format_weight(double w) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", w);
  return buf;
}

}  // namespace

std::string print_grammar(const Grammar& g) {
  std::ostringstream out;
  out << "start: " << g.nonterminals[g.start] << "\n";
  for (int nt = 0; nt < g.num_nonterminals(); ++nt) {
    out << g.nonterminals[nt] << " ->";
    bool first = true;
    for (int r : g.rules_of[nt]) {
      if (!first) out << " |";
      first = false;
      const Rule& rule = g.rules[r];
      if (rule.rhs.empty()) out << " \"\"";
      for (const auto& s : rule.rhs) {
        if (s.terminal)
          out << " " << quote_terminal(g.terminals[s.id]);
        else
          out << " " << g.nonterminals[s.id];
      }
      out << " [" << format_weight(rule.weight) << "]";
    }
    out << "\n";
  }
  return out.str();
}

Grammar load_grammar_text(const std::string& text, const std::string& name) {
  Grammar g = parse_grammar(text, name);
  for (int nt = 0; nt < g.num_nonterminals(); ++nt) {
    Rational sum(0, 1);
    for (int r : g.rules_of[nt]) sum = sum + g.rules[r].weight_exact;
    double dev = std::abs(sum.to_double() - 1.0);
    if (dev == 0.0) continue;
    if (dev >= 1e-6)
      throw DataError("rule weights of '" + g.nonterminals[nt] + "' sum to " +
                      std::to_string(sum.to_double()) + ", not 1");
    for (int r : g.rules_of[nt]) {
      g.rules[r].weight_exact = g.rules[r].weight_exact / sum;
      g.rules[r].weight = g.rules[r].weight_exact.to_double();
    }
  }
  return g;
}

Grammar load_grammar_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open grammar file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  auto slash = path.find_last_of('/');
  std::string base = slash == std::string::npos ? path : path.substr(slash + 1);
  auto dot = base.find_last_of('.');
  if (dot != std::string::npos) base = base.substr(0, dot);
  return load_grammar_text(ss.str(), base);
}

bool structural_equal(const Grammar& a, const Grammar& b) {
  if (a.terminals != b.terminals || a.nonterminals != b.nonterminals) return false;
  if (a.start != b.start || a.rules.size() != b.rules.size()) return false;
  for (std::size_t i = 0; i < a.rules.size(); ++i) {
    const Rule &x = a.rules[i], &y = b.rules[i];
    if (x.lhs != y.lhs || x.rhs != y.rhs || !(x.weight_exact == y.weight_exact)) return false;
  }
  return true;
}

// --- analyses ----------------------------------------------------------------

std::vector<char> closure_of(const Grammar& g, int root) {
  std::vector<char> in(g.num_nonterminals(), 0);
  std::deque<int> queue{root};
  in[root] = 1;
  while (!queue.empty()) {
    int nt = queue.front();
    queue.pop_front();
    for (int r : g.rules_of[nt])
      for (const auto& s : g.rules[r].rhs)
        if (!s.terminal && !in[s.id]) {
          in[s.id] = 1;
          queue.push_back(s.id);
        }
  }
  return in;
}

std::vector<char> reachable(const Grammar& g) { return closure_of(g, g.start); }

std::vector<char> productive(const Grammar& g) {
  std::vector<char> ok(g.num_nonterminals(), 0);
  bool changed = true;
  while (changed) {
    changed = false;
    for (const Rule& r : g.rules) {
      if (ok[r.lhs]) continue;
      bool all = true;
      for (const auto& s : r.rhs)
        if (!s.terminal && !ok[s.id]) {
          all = false;
          break;
        }
      if (all) {
        ok[r.lhs] = 1;
        changed = true;
      }
    }
  }
  return ok;
}

std::vector<double> epsilon_probs(const Grammar& g) {
  std::vector<double> p(g.num_nonterminals(), 0.0);
  for (int iter = 0; iter < 10000; ++iter) {
    double delta = 0.0;
    for (int nt = 0; nt < g.num_nonterminals(); ++nt) {
      double v = 0.0;
      for (int r : g.rules_of[nt]) {
        const Rule& rule = g.rules[r];
        double prod = rule.weight;
        for (const auto& s : rule.rhs) {
          if (s.terminal) {
            prod = 0.0;
            break;
          }
          prod *= p[s.id];
        }
        v += prod;
      }
      delta = std::max(delta, std::abs(v - p[nt]));
      p[nt] = v;
    }
    if (delta < 1e-15) break;
  }
  return p;
}

std::vector<char> nullable(const Grammar& g) {
  std::vector<char> n(g.num_nonterminals(), 0);
  bool changed = true;
  while (changed) {
    changed = false;
    for (const Rule& r : g.rules) {
      if (n[r.lhs]) continue;
      bool all = true;
      for (const auto& s : r.rhs)
        if (s.terminal || !n[s.id]) {
          all = false;
          break;
        }
      if (all) {
        n[r.lhs] = 1;
        changed = true;
      }
    }
  }
  return n;
}

std::vector<int> min_lengths(const Grammar& g) {
  std::vector<int> len(g.num_nonterminals(), INT_MAX);
  bool changed = true;
  while (changed) {
    changed = false;
    for (const Rule& r : g.rules) {
      long long total = 0;
      bool feasible = true;
      for (const auto& s : r.rhs) {
        if (s.terminal)
          total += 1;
        else if (len[s.id] == INT_MAX) {
          feasible = false;
          break;
        } else {
          total += len[s.id];
        }
      }
      if (feasible && total < len[r.lhs]) {
        len[r.lhs] = static_cast<int>(total);
        changed = true;
      }
    }
  }
  return len;
}

Eigen::MatrixXd mean_matrix(const Grammar& g) {
  int n = g.num_nonterminals();
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (const Rule& r : g.rules)
    for (const auto& s : r.rhs)
      if (!s.terminal) m(r.lhs, s.id) += r.weight;
  return m;
}

std::pair<double, bool> spectral_radius(const Eigen::MatrixXd& m) {
  const int cap = 10000;
  const double rtol = 1e-10;
  int n = static_cast<int>(m.rows());
  if (n == 0) return {0.0, true};
  Eigen::VectorXd x = Eigen::VectorXd::Constant(n, 1.0 / n);
  double lambda = 0.0;
  for (int it = 0; it < cap; ++it) {
    Eigen::VectorXd y = m * x;
    double norm = y.lpNorm<1>();
    if (norm == 0.0) return {0.0, true};
    double next = norm;  // x is L1-normalized and nonnegative
    y /= norm;
    if (it > 0 && std::abs(next - lambda) <= rtol * std::max(next, 1e-300))
      return {next, true};
    lambda = next;
    x = y;
  }
  // Defective spectra (Jordan chains of the dominant eigenvalue, as in a
  // chain of equally self-looping levels) defeat plain power iteration:
  // the estimate drifts like rho (1 + d/k). Resolve the cap-hit with
  // log-scaled repeated squaring: ||M^(2^40)||^(1/2^40) kills polynomial
  // factors and settles the radius to full precision.
  Eigen::MatrixXd b = m;
  double logscale = 0.0;
  for (int k = 0; k < 40; ++k) {
    double a = b.cwiseAbs().rowwise().sum().maxCoeff();  // infinity norm
    if (a == 0.0) return {0.0, true};
    b /= a;
    logscale = (logscale + std::log(a)) * 2.0;
    b = (b * b).eval();
  }
  double tail = b.cwiseAbs().rowwise().sum().maxCoeff();
  if (tail > 0) logscale += std::log(tail);
  double rho = std::exp(logscale / std::exp2(40));
  return {rho, true};
}

ValidationReport validate(const Grammar& g) {
  ValidationReport rep;
  rep.weight_sums.resize(g.num_nonterminals(), 0.0);
  for (int nt = 0; nt < g.num_nonterminals(); ++nt) {
    double s = 0.0;
    for (int r : g.rules_of[nt]) s += g.rules[r].weight;
    rep.weight_sums[nt] = s;
    if (std::abs(s - 1.0) > 1e-9) rep.sums_ok = false;
  }
  auto reach = reachable(g);
  auto prod = productive(g);
  for (int nt = 0; nt < g.num_nonterminals(); ++nt) {
    if (!reach[nt]) rep.unreachable.push_back(g.nonterminals[nt]);
    if (!prod[nt]) rep.unproductive.push_back(g.nonterminals[nt]);
  }
  auto [rho, conv] = spectral_radius(mean_matrix(g));
  rep.spectral_radius = rho;
  rep.spectral_converged = conv;
  rep.consistent = rep.sums_ok && rep.unreachable.empty() && rep.unproductive.empty() &&
                   conv && rho < 1.0;
  return rep;
}

std::string ValidationReport::summary(const Grammar& g) const {
  std::ostringstream out;
  out << "grammar: " << g.name << "\n";
  out << "nonterminals: " << g.num_nonterminals() << "  terminals: " << g.num_terminals()
      << "  rules: " << g.rules.size() << "\n";
  for (int nt = 0; nt < g.num_nonterminals(); ++nt) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9f", weight_sums[nt]);
    out << "  weight sum " << g.nonterminals[nt] << ": " << buf << "\n";
  }
  if (!unreachable.empty()) {
    out << "unreachable:";
    for (const auto& s : unreachable) out << " " << s;
    out << "\n";
  }
  if (!unproductive.empty()) {
    out << "unproductive:";
    for (const auto& s : unproductive) out << " " << s;
    out << "\n";
  }
  out << "spectral radius: " << spectral_radius
      << (spectral_converged ? "" : " (power iteration cap hit; inconclusive)") << "\n";
  out << "consistent: " << (consistent ? "yes" : "no") << "\n";
  return out.str();
}

Grammar make_recursion_grammar(const Rational& p) {
  Grammar g;
  g.name = "recursion_composition";
  g.nonterminals = {"S"};
  g.terminals = {"x", "(", "and", ")"};
  g.start = 0;
  Rule r1;
  r1.lhs = 0;
  r1.rhs = {{true, 0}};
  r1.weight_exact = p;
  r1.weight = p.to_double();
  Rule r2;
  r2.lhs = 0;
  r2.rhs = {{true, 1}, {false, 0}, {true, 2}, {false, 0}, {true, 3}};
  r2.weight_exact = Rational(1, 1) + Rational(-p.num, p.den);
  r2.weight = r2.weight_exact.to_double();
  g.rules = {r1, r2};
  g.rebuild_index();
  return g;
}

}  // namespace pcfglab
