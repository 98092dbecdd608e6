#include "pcfglab/sampler.hpp"

#include <cmath>
#include <numeric>

#include "pcfglab/errors.hpp"

namespace pcfglab {

SamplingTables::SamplingTables(const Grammar& g) {
  rows_.resize(g.num_nonterminals());
  for (int nt = 0; nt < g.num_nonterminals(); ++nt) {
    Row& row = rows_[nt];
    row.rule_ids = g.rules_of[nt];
    if (row.rule_ids.empty()) continue;

    // exact path: common denominator, exact integer cumulative sums
    __int128 lcm = 1;
    bool exact = true;
    Rational sum(0, 1);
    for (int r : row.rule_ids) {
      const Rational& w = g.rules[r].weight_exact;
      __int128 gg = Rational::gcd128(lcm, w.den);
      lcm = lcm / gg * w.den;
      if (lcm > (__int128(1) << 62)) {
        exact = false;
        break;
      }
      sum = sum + w;
    }
    if (exact && !(sum == Rational(1, 1))) exact = false;
    if (exact) {
      row.total = static_cast<std::uint64_t>(lcm);
      __int128 cum = 0;
      for (int r : row.rule_ids) {
        const Rational& w = g.rules[r].weight_exact;
        cum += (__int128)w.num * ((std::int64_t)(lcm / w.den));
        row.cum.push_back(static_cast<std::uint64_t>(cum));
      }
    } else {
      // fixed point at 2^62 against the double weights; still integer draws
      row.total = std::uint64_t(1) << 62;
      double total_w = 0;
      for (int r : row.rule_ids) total_w += g.rules[r].weight;
      long double acc = 0;
      for (std::size_t i = 0; i < row.rule_ids.size(); ++i) {
        acc += g.rules[row.rule_ids[i]].weight / total_w;
        long double t = acc * static_cast<long double>(row.total);
        row.cum.push_back(i + 1 == row.rule_ids.size() ? row.total
                                                       : static_cast<std::uint64_t>(t));
      }
    }
  }
}

int SamplingTables::draw(int nt, RngStream& rng) const {
  const Row& row = rows_[nt];
  if (row.rule_ids.empty()) throw DataError("nonterminal has no rules");
  std::uint64_t u = rng.below(row.total);
  for (std::size_t i = 0; i < row.cum.size(); ++i)
    if (u < row.cum[i]) return row.rule_ids[i];
  return row.rule_ids.back();
}

namespace {

struct LimitBreach {};

struct SampleWalk {
  const Grammar& g;
  const SamplingTables& tables;
  RngStream& rng;
  const SampleLimits& lim;
  int tokens = 0;
  int max_depth_seen = 0;
  double log_prob = 0.0;

  DerivationTree::Node expand(int nt, int depth) {
    if (depth > lim.max_depth) throw LimitBreach{};
    max_depth_seen = std::max(max_depth_seen, depth);
    DerivationTree::Node node;
    node.rule = tables.draw(nt, rng);
    const Rule& rule = g.rules[node.rule];
    log_prob += std::log(rule.weight);
    for (const auto& s : rule.rhs) {
      if (s.terminal) {
        if (++tokens > lim.max_tokens) throw LimitBreach{};
      } else {
        node.kids.push_back(expand(s.id, depth + 1));
      }
    }
    return node;
  }
};

}  // namespace

DerivationTree sample_tree(const Grammar& g, const SamplingTables& tables,
                           std::uint64_t seed, std::uint64_t index,
                           const SampleLimits& limits, SampleStats* stats) {
  RngStream rng(seed, index);
  for (int attempt = 0; attempt < limits.max_resamples; ++attempt) {
    if (stats) stats->attempts++;
    SampleWalk walk{g, tables, rng, limits};
    try {
      DerivationTree t;
      t.root = walk.expand(g.start, 0);
      t.log_prob = walk.log_prob;
      t.token_count = walk.tokens;
      t.depth = walk.max_depth_seen;
      if (stats) stats->accepted++;
      return t;
    } catch (LimitBreach&) {
      continue;
    }
  }
  throw NumericalError("resample budget exhausted (" + std::to_string(limits.max_resamples) +
                       " attempts) for sample index " + std::to_string(index));
}

namespace {

void frontier_walk(const Grammar& g, const DerivationTree::Node& node, std::vector<int>& out) {
  const Rule& rule = g.rules[node.rule];
  std::size_t kid = 0;
  for (const auto& s : rule.rhs) {
    if (s.terminal)
      out.push_back(s.id);
    else
      frontier_walk(g, node.kids[kid++], out);
  }
}

void trace_walk(const DerivationTree::Node& node, std::vector<int>& out) {
  out.push_back(node.rule);
  for (const auto& k : node.kids) trace_walk(k, out);
}

}  // namespace

std::vector<int> frontier(const Grammar& g, const DerivationTree& t) {
  std::vector<int> out;
  frontier_walk(g, t.root, out);
  return out;
}

std::vector<int> rule_trace(const DerivationTree& t) {
  std::vector<int> out;
  trace_walk(t.root, out);
  return out;
}

namespace {

DerivationTree::Node rebuild(const Grammar& g, const std::vector<int>& trace, std::size_t& pos,
                             int expected_nt, double& log_prob, int& tokens, int depth,
                             int& max_depth) {
  if (pos >= trace.size()) throw DataError("rule trace too short");
  int r = trace[pos++];
  if (r < 0 || r >= static_cast<int>(g.rules.size()))
    throw DataError("rule id out of range in trace");
  const Rule& rule = g.rules[r];
  if (rule.lhs != expected_nt)
    throw DataError("rule trace mismatch: expected expansion of '" +
                    g.nonterminals[expected_nt] + "'");
  max_depth = std::max(max_depth, depth);
  DerivationTree::Node node;
  node.rule = r;
  log_prob += std::log(rule.weight);
  for (const auto& s : rule.rhs) {
    if (s.terminal)
      ++tokens;
    else
      node.kids.push_back(rebuild(g, trace, pos, s.id, log_prob, tokens, depth + 1, max_depth));
  }
  return node;
}

}  // namespace

DerivationTree tree_from_trace(const Grammar& g, const std::vector<int>& trace) {
  DerivationTree t;
  std::size_t pos = 0;
  t.root = rebuild(g, trace, pos, g.start, t.log_prob, t.token_count, 0, t.depth);
  if (pos != trace.size()) throw DataError("rule trace too long");
  return t;
}

std::string AnnotatedSentence::bucket_name(const Grammar& g, int slot) const {
  int b = bucket[slot];
  if (b == kOverhead) return "OVERHEAD";
  if (b == kRootEos) return "ROOT-EOS";
  const Instance& inst = instances[b];
  int ordinal = 0;
  for (int i = 0; i < b; ++i)
    if (instances[i].nonterminal == inst.nonterminal) ++ordinal;
  return g.nonterminals[inst.nonterminal] + "#" + std::to_string(ordinal);
}

std::string AnnotatedSentence::bucket_label(const Grammar& g, int slot) const {
  int b = bucket[slot];
  if (b == kOverhead) return "OVERHEAD";
  if (b == kRootEos) return "ROOT-EOS";
  return g.nonterminals[instances[b].nonterminal];
}

namespace {

void annotate_walk(const Grammar& g, const SubgrammarDag& dag, const DerivationTree::Node& node,
                   int nt, int instance, std::vector<int>& path, AnnotatedSentence& out) {
  int my_node = dag.node_of[nt];
  bool pushed = false;
  if (path.empty() || path.back() != my_node) {
    path.push_back(my_node);
    pushed = true;
  }
  const Rule& rule = g.rules[node.rule];
  std::size_t kid = 0;
  for (const auto& s : rule.rhs) {
    if (s.terminal) {
      out.tokens.push_back(s.id);
      out.bucket.push_back(instance);
      out.node_path.push_back(path);
      if (instance >= 0) out.instances[instance].end = static_cast<int>(out.tokens.size());
    } else if (instance < 0) {
      // child of the start node's own rule: a fresh top-level instance
      int id = static_cast<int>(out.instances.size());
      out.instances.push_back({s.id, dag.node_of[s.id], static_cast<int>(out.tokens.size()),
                               static_cast<int>(out.tokens.size())});
      annotate_walk(g, dag, node.kids[kid], s.id, id, path, out);
    } else {
      annotate_walk(g, dag, node.kids[kid], s.id, instance, path, out);
    }
    if (!s.terminal) ++kid;
  }
  if (pushed) path.pop_back();
}

}  // namespace

AnnotatedSentence linearize(const Grammar& g, const SubgrammarDag& dag,
                            const DerivationTree& t) {
  AnnotatedSentence out;
  std::vector<int> path;
  annotate_walk(g, dag, t.root, g.start, AnnotatedSentence::kOverhead, path, out);
  out.bucket.push_back(AnnotatedSentence::kRootEos);
  out.node_path.push_back({dag.node_of[g.start]});
  out.rule_trace = rule_trace(t);
  out.tree_logprob = t.log_prob;
  return out;
}

Corpus sample_corpus(const Grammar& g, const SubgrammarDag& dag, std::int64_t n,
                     std::uint64_t seed, const SampleLimits& limits, Exec exec) {
  SamplingTables tables(g);
  Corpus corpus;
  corpus.grammar_name = g.name;
  corpus.seed = seed;
  corpus.sentences.resize(n);
  std::vector<SampleStats> stats(n);
  std::vector<std::string> errors(n);
  parallel_for(exec, n, [&](std::int64_t i) {
    try {
      DerivationTree t = sample_tree(g, tables, seed, i, limits, &stats[i]);
      corpus.sentences[i] = linearize(g, dag, t);
      corpus.sentences[i].seed = seed;
      corpus.sentences[i].index = i;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::int64_t i = 0; i < n; ++i) {
    if (!errors[i].empty()) throw NumericalError(errors[i]);
    corpus.stats.attempts += stats[i].attempts;
    corpus.stats.accepted += stats[i].accepted;
  }
  return corpus;
}

}  // namespace pcfglab
