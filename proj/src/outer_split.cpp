#include <Eigen/Dense>
#include <algorithm>
#include <climits>
#include <cmath>

#include "pcfglab/divergence.hpp"
#include "pcfglab/errors.hpp"
#include "pcfglab/oracle.hpp"

// Exact verification of the outer-subgrammar KL split. Every term is a sum
// over P-derivations; for a same-structure pair (P, Q) of unambiguous
// epsilon-free grammars, per-derivation log ratios decompose over rules, so
// sums over all strings of length <= cap can be computed by dynamic
// programming on length:
//   mass_A[l] = sum of P-weights of derivations of length-l strings from A
//   kl_A[l]   = same sum weighted by log(P(d)/Q(d))
// The tail beyond the cap is bounded rigorously: a derivation of a length-l
// string has at most 2l(1+U) rule applications (U = longest unit chain), so
// |sum over the tail| <= 2 kappa (1+U) E[len ; len > cap], and the truncated
// expected length is available from the exact linear system.

namespace pcfglab {

namespace {

struct WRule {
  int lhs;
  std::vector<Symbol> rhs;
  double wp, wq;
};

struct WGrammar {
  int n_nts = 0;
  int start = 0;
  std::vector<WRule> rules;
};

// Left-factor until no rule carries more than two nonterminals; fresh
// connective nonterminals have weight 1 on both sides, preserving
// derivations one-to-one.
void binarize(WGrammar& g) {
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<WRule> next;
    for (auto& r : g.rules) {
      int nts = 0;
      for (const auto& s : r.rhs) nts += s.terminal ? 0 : 1;
      if (nts <= 2) {
        next.push_back(r);
        continue;
      }
      changed = true;
      // split after the first nonterminal
      std::size_t cut = 0;
      int seen = 0;
      for (std::size_t i = 0; i < r.rhs.size(); ++i) {
        if (!r.rhs[i].terminal && ++seen == 1) {
          cut = i + 1;
          break;
        }
      }
      int fresh = g.n_nts++;
      WRule head;
      head.lhs = r.lhs;
      head.rhs.assign(r.rhs.begin(), r.rhs.begin() + cut);
      head.rhs.push_back({false, fresh});
      head.wp = r.wp;
      head.wq = r.wq;
      WRule tail;
      tail.lhs = fresh;
      tail.rhs.assign(r.rhs.begin() + cut, r.rhs.end());
      tail.wp = 1.0;
      tail.wq = 1.0;
      next.push_back(std::move(head));
      next.push_back(std::move(tail));
    }
    g.rules = std::move(next);
  }
}

std::vector<int> w_min_lengths(const WGrammar& g) {
  std::vector<int> len(g.n_nts, INT_MAX);
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& r : g.rules) {
      if (r.wp <= 0) continue;
      long long total = 0;
      bool ok = true;
      for (const auto& s : r.rhs) {
        if (s.terminal)
          total += 1;
        else if (len[s.id] == INT_MAX) {
          ok = false;
          break;
        } else
          total += len[s.id];
      }
      if (ok && total < len[r.lhs]) {
        len[r.lhs] = static_cast<int>(total);
        changed = true;
      }
    }
  }
  return len;
}

int longest_unit_chain(const WGrammar& g) {
  // unit edges among nonterminals; must be acyclic for the tail bound
  std::vector<std::vector<int>> adj(g.n_nts);
  for (const auto& r : g.rules)
    if (r.wp > 0 && r.rhs.size() == 1 && !r.rhs.front().terminal)
      adj[r.lhs].push_back(r.rhs.front().id);
  std::vector<int> depth(g.n_nts, -1), onstack(g.n_nts, 0);
  std::function<int(int)> dfs = [&](int v) -> int {
    if (depth[v] >= 0) return depth[v];
    if (onstack[v]) throw NumericalError("unit-production cycle; tail bound unavailable");
    onstack[v] = 1;
    int best = 0;
    for (int w : adj[v]) best = std::max(best, 1 + dfs(w));
    onstack[v] = 0;
    depth[v] = best;
    return best;
  };
  int best = 0;
  for (int v = 0; v < g.n_nts; ++v) best = std::max(best, dfs(v));
  return best;
}

double w_expected_length(const WGrammar& g) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(g.n_nts, g.n_nts);
  Eigen::VectorXd t = Eigen::VectorXd::Zero(g.n_nts);
  for (const auto& r : g.rules) {
    if (r.wp <= 0) continue;
    for (const auto& s : r.rhs) {
      if (s.terminal)
        t(r.lhs) += r.wp;
      else
        m(r.lhs, s.id) += r.wp;
    }
  }
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(g.n_nts, g.n_nts) - m;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  if (!lu.isInvertible())
    throw NumericalError("conditioned grammar is not subcritical; expected length undefined");
  Eigen::VectorXd len = lu.solve(t);
  return len(g.start);
}

struct DpResult {
  double covered_mass = 0;
  double covered_len = 0;  // sum l * mass(l)
  double kl = 0;
  double tail_mass = 0;
  double tail_kl_bound = 0;
};

DpResult run_dp(WGrammar g, int cap, double tail_budget) {
  binarize(g);
  double kappa = 0;
  for (auto& r : g.rules) {
    if (r.wp <= 0) continue;
    if (r.wq <= 0)
      throw NumericalError("model assigns zero weight to a supported rule: infinite KL");
    kappa = std::max(kappa, std::abs(std::log(r.wp / r.wq)));
  }
  int unit_depth = longest_unit_chain(g);
  auto min_len = w_min_lengths(g);

  int n = g.n_nts;
  // mass[a][l], kl[a][l]
  std::vector<std::vector<double>> mass(n, std::vector<double>(cap + 1, 0.0));
  std::vector<std::vector<double>> klv(n, std::vector<double>(cap + 1, 0.0));

  std::vector<const WRule*> unit_rules, other_rules;
  for (const auto& r : g.rules) {
    if (r.wp <= 0) continue;
    if (r.rhs.size() == 1 && !r.rhs.front().terminal)
      unit_rules.push_back(&r);
    else
      other_rules.push_back(&r);
  }

  for (int l = 1; l <= cap; ++l) {
    for (const WRule* rp : other_rules) {
      const WRule& r = *rp;
      double lr = std::log(r.wp / r.wq);
      int f = 0;
      std::vector<int> kids;
      for (const auto& s : r.rhs)
        s.terminal ? void(++f) : kids.push_back(s.id);
      int rest = l - f;
      double m = 0, k = 0;
      if (kids.empty()) {
        if (rest == 0) m = 1.0;
      } else if (kids.size() == 1) {
        if (rest >= 1 && rest < l) {  // child strictly shorter than l
          m = mass[kids[0]][rest];
          k = klv[kids[0]][rest];
        } else if (rest == l) {
          // f == 0 with a single child is a unit rule, handled separately
          continue;
        }
      } else {
        int a0 = kids[0], a1 = kids[1];
        int lo = std::max(1, min_len[a0] == INT_MAX ? 1 : min_len[a0]);
        for (int x = lo; x <= rest - 1; ++x) {
          int y = rest - x;
          double m0 = mass[a0][x], m1 = mass[a1][y];
          if (m0 == 0.0) continue;
          m += m0 * m1;
          k += klv[a0][x] * m1 + m0 * klv[a1][y];
        }
      }
      if (m == 0.0 && k == 0.0) continue;
      mass[r.lhs][l] += r.wp * m;
      klv[r.lhs][l] += r.wp * (k + lr * m);
    }
    // unit closure at this length: iterate the affine map from the non-unit
    // base; acyclic chains settle within unit_depth passes
    if (!unit_rules.empty()) {
      std::vector<double> base_m(n), base_k(n);
      for (int a = 0; a < n; ++a) {
        base_m[a] = mass[a][l];
        base_k[a] = klv[a][l];
      }
      for (int pass = 0; pass < unit_depth + 2; ++pass) {
        std::vector<double> nm = base_m, nk = base_k;
        for (const WRule* rp : unit_rules) {
          const WRule& r = *rp;
          double lr = std::log(r.wp / r.wq);
          int b = r.rhs.front().id;
          nm[r.lhs] += r.wp * mass[b][l];
          nk[r.lhs] += r.wp * (klv[b][l] + lr * mass[b][l]);
        }
        for (int a = 0; a < n; ++a) {
          mass[a][l] = nm[a];
          klv[a][l] = nk[a];
        }
      }
    }
  }

  DpResult out;
  for (int l = 1; l <= cap; ++l) {
    out.covered_mass += mass[g.start][l];
    out.covered_len += l * mass[g.start][l];
    out.kl += klv[g.start][l];
  }
  out.tail_mass = std::max(0.0, 1.0 - out.covered_mass);
  double e_len = w_expected_length(g);
  double tail_len = std::max(0.0, e_len - out.covered_len);
  out.tail_kl_bound = 2.0 * kappa * (1.0 + unit_depth) * tail_len;
  if (out.tail_mass > tail_budget)
    throw NumericalError("enumeration tail mass " + std::to_string(out.tail_mass) +
                         " exceeds budget at length cap " + std::to_string(cap));
  return out;
}

// probability that a derivation uses only kept rules, per nonterminal
std::vector<double> kept_probability(const Grammar& g, const std::vector<char>& keep,
                                     bool q_side, const Grammar& q) {
  int n = g.num_nonterminals();
  std::vector<double> pi(n, 0.0);
  for (int it = 0; it < 20000; ++it) {
    double delta = 0;
    for (int a = 0; a < n; ++a) {
      double v = 0;
      for (int rid : g.rules_of[a]) {
        if (!keep[rid]) continue;
        double w = q_side ? q.rules[rid].weight : g.rules[rid].weight;
        double prod = w;
        for (const auto& s : g.rules[rid].rhs)
          if (!s.terminal) prod *= pi[s.id];
        v += prod;
      }
      delta = std::max(delta, std::abs(v - pi[a]));
      pi[a] = v;
    }
    if (delta < 1e-15) break;
  }
  return pi;
}

}  // namespace

OuterSplitReport verify_outer(const Grammar& p, const std::vector<int>& keep_rules,
                              const Grammar& q, int length_cap, double tail_budget,
                              std::int64_t mc_n, std::uint64_t seed) {
  // same structure, possibly different weights
  if (p.terminals != q.terminals || p.nonterminals != q.nonterminals ||
      p.rules.size() != q.rules.size() || p.start != q.start)
    throw DataError("outer split needs a same-structure model grammar");
  for (std::size_t r = 0; r < p.rules.size(); ++r)
    if (p.rules[r].lhs != q.rules[r].lhs || !(p.rules[r].rhs == q.rules[r].rhs))
      throw DataError("outer split needs a same-structure model grammar");
  for (char nul : nullable(p))
    if (nul) throw DataError("outer split supports epsilon-free grammars only");

  std::vector<char> keep(p.rules.size(), 0);
  for (int r : keep_rules) {
    if (r < 0 || r >= static_cast<int>(p.rules.size())) throw DataError("rule id out of range");
    keep[r] = 1;
  }
  // must be a valid outer subgrammar; also gives the membership recognizer
  Grammar outer = outer_subgrammar(p, keep_rules);
  Oracle outer_oracle(outer);

  // The dynamic programs sum over derivations; they equal the string-level
  // divergence when all derivations of a string share one rule multiset
  // (plain unambiguity is the special case). Spot check: the string/tree
  // probability ratio must then be the same integer count under both
  // weightings, so the two ratios agree.
  {
    Oracle oracle_p(p), oracle_q(q);
    SamplingTables tables(p);
    for (int i = 0; i < 2000; ++i) {
      DerivationTree t = sample_tree(p, tables, seed ^ 0xa3bu, i);
      auto tokens = frontier(p, t);
      double tree_q = 0;
      for (int r : rule_trace(t)) tree_q += std::log(q.rules[r].weight);
      double ratio_p = oracle_p.string_logprob(tokens) - t.log_prob;
      double ratio_q = oracle_q.string_logprob(tokens) - tree_q;
      if (std::abs(ratio_p - ratio_q) > 1e-9)
        throw DataError(
            "outer split needs derivation-consistent ambiguity (equal rule "
            "multisets per string): " +
            p.name);
    }
  }

  OuterSplitReport rep;
  rep.length_cap = length_cap;

  auto pi_p = kept_probability(p, keep, false, q);
  auto pi_q = kept_probability(p, keep, true, q);
  // snap fixpoint fuzz at the boundaries
  auto snap = [](double v) { return v > 1.0 - 1e-12 ? 1.0 : (v < 1e-12 ? 0.0 : v); };
  for (auto& v : pi_p) v = snap(v);
  for (auto& v : pi_q) v = snap(v);
  rep.p_a = pi_p[p.start];
  rep.q_a = pi_q[p.start];

  int n = p.num_nonterminals();
  auto as_wgrammar = [&](auto&& rule_filter) {
    WGrammar g;
    g.n_nts = n;
    g.start = p.start;
    for (std::size_t r = 0; r < p.rules.size(); ++r) {
      auto [wp, wq, use] = rule_filter(static_cast<int>(r));
      if (!use) continue;
      WRule wr;
      wr.lhs = p.rules[r].lhs;
      wr.rhs = p.rules[r].rhs;
      wr.wp = wp;
      wr.wq = wq;
      g.rules.push_back(std::move(wr));
    }
    return g;
  };

  // LHS: D(P || Q) over everything
  WGrammar full = as_wgrammar([&](int r) {
    return std::tuple<double, double, bool>(p.rules[r].weight, q.rules[r].weight, true);
  });
  DpResult lhs = run_dp(full, length_cap, tail_budget);
  rep.lhs = lhs.kl;
  rep.tail_bound = lhs.tail_kl_bound;

  // Term A: both sides conditioned on membership (Doob transform of the
  // kept system: w'(A->alpha) = w prod pi(C) / pi(A))
  if (rep.p_a > 0) {
    WGrammar cond = as_wgrammar([&](int r) -> std::tuple<double, double, bool> {
      if (!keep[r]) return {0, 0, false};
      int lhs_nt = p.rules[r].lhs;
      if (pi_p[lhs_nt] <= 0) return {0, 0, false};
      double wp = p.rules[r].weight / pi_p[lhs_nt];
      double wq = q.rules[r].weight / pi_q[lhs_nt];
      for (const auto& s : p.rules[r].rhs)
        if (!s.terminal) {
          wp *= pi_p[s.id];
          wq *= pi_q[s.id];
        }
      return {wp, wq, wp > 0};
    });
    DpResult a = run_dp(cond, length_cap, tail_budget);
    rep.term_a = rep.p_a * a.kl;
    rep.tail_bound += rep.p_a * a.tail_kl_bound;
  }

  // Term Abar: conditioned on at least one dropped choice. Nonterminal ids
  // double: X (unconstrained) and X-marked = n + X (subtree contains a drop).
  double pbar = 1.0 - rep.p_a;
  double qbar = 1.0 - rep.q_a;
  if (pbar > 0) {
    if (qbar <= 0)
      throw NumericalError("model gives the complement zero probability: infinite KL");
    WGrammar marked;
    marked.n_nts = 2 * n;
    marked.start = n + p.start;
    for (std::size_t r = 0; r < p.rules.size(); ++r) {
      const Rule& pr = p.rules[r];
      const Rule& qr = q.rules[r];
      // unmarked copies keep original weights
      WRule plain;
      plain.lhs = pr.lhs;
      plain.rhs = pr.rhs;
      plain.wp = pr.weight;
      plain.wq = qr.weight;
      marked.rules.push_back(plain);

      double pbar_lhs = 1.0 - pi_p[pr.lhs];
      double qbar_lhs = 1.0 - pi_q[pr.lhs];
      if (pbar_lhs <= 0) continue;  // this lhs can never contain a drop
      if (!keep[r]) {
        WRule wr;
        wr.lhs = n + pr.lhs;
        wr.rhs = pr.rhs;  // children unconstrained
        wr.wp = pr.weight / pbar_lhs;
        wr.wq = qr.weight / qbar_lhs;
        marked.rules.push_back(std::move(wr));
      } else {
        // kept rule: some nonempty subset of children carries the drop
        std::vector<int> kid_pos;
        for (std::size_t i = 0; i < pr.rhs.size(); ++i)
          if (!pr.rhs[i].terminal) kid_pos.push_back(static_cast<int>(i));
        int m = static_cast<int>(kid_pos.size());
        if (m == 0) continue;
        for (std::uint32_t maskbits = 1; maskbits < (1u << m); ++maskbits) {
          double wp = pr.weight / pbar_lhs;
          double wq = qr.weight / qbar_lhs;
          WRule wr;
          wr.lhs = n + pr.lhs;
          wr.rhs = pr.rhs;
          for (int b = 0; b < m; ++b) {
            int nt = pr.rhs[kid_pos[b]].id;
            if (maskbits & (1u << b)) {
              wr.rhs[kid_pos[b]].id = n + nt;
              wp *= 1.0 - pi_p[nt];
              wq *= 1.0 - pi_q[nt];
            } else {
              wp *= pi_p[nt];
              wq *= pi_q[nt];
            }
          }
          if (wp <= 0) continue;
          wr.wp = wp;
          wr.wq = wq;
          marked.rules.push_back(std::move(wr));
        }
      }
    }
    DpResult abar = run_dp(marked, length_cap, tail_budget);
    rep.term_abar = pbar * abar.kl;
    rep.tail_bound += pbar * abar.tail_kl_bound;
  }

  // binary membership term
  auto xlog = [](double a, double b) { return a > 0 ? a * std::log(a / b) : 0.0; };
  if ((rep.p_a > 0 && rep.q_a <= 0) || (pbar > 0 && qbar <= 0))
    throw NumericalError("membership distribution mismatch: infinite KL");
  rep.term_star = xlog(rep.p_a, rep.q_a) + xlog(pbar, qbar);

  rep.residual = std::abs(rep.lhs - (rep.term_a + rep.term_abar + rep.term_star));

  // Monte-Carlo cross-check of P(A) through the recognizer
  SamplingTables tables(p);
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < mc_n; ++i) {
    DerivationTree t = sample_tree(p, tables, seed ^ 0x0a0bull, i);
    auto toks = p.tokens_to_strings(frontier(p, t));
    bool in_a = true;
    try {
      in_a = outer_oracle.recognize(outer.tokens_from_strings(toks));
    } catch (const DataError&) {
      in_a = false;  // token outside the outer grammar's alphabet
    }
    hits += in_a ? 1 : 0;
  }
  rep.p_a_mc = static_cast<double>(hits) / static_cast<double>(mc_n);
  rep.p_a_mc_stderr = std::sqrt(rep.p_a_mc * (1.0 - rep.p_a_mc) / static_cast<double>(mc_n));
  return rep;
}

}  // namespace pcfglab
