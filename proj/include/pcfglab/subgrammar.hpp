#pragma once

#include <string>
#include <vector>

#include "pcfglab/grammar.hpp"

namespace pcfglab {

// Hierarchy of inner subgrammars. Node labels partition the nonterminals
// (mutually-reachable nonterminals share a node); edges point from a node to
// the proper subgrammars spawned by its rules; the graph is acyclic once
// self-loops are removed. Node order is canonical: (depth from root, then
// smallest label id), so it does not depend on rule order.
struct SubgrammarDag {
  struct Node {
    std::vector<int> label;  // nonterminal ids, ascending
    bool self_loop = false;
  };
  std::vector<Node> nodes;
  std::vector<std::pair<int, int>> edges;  // parent -> child, sorted, unique
  int root = 0;
  std::vector<int> node_of;  // nonterminal id -> node id

  bool is_leaf(int node) const;
  std::string label_string(const Grammar& g, int node) const;
  std::string to_json(const Grammar& g) const;
  std::string to_tree_string(const Grammar& g) const;
};

SubgrammarDag decompose_dag(const Grammar& g);

// Rule-closure of `root`, weights untouched (per-nonterminal sums stay 1).
Grammar inner_subgrammar(const Grammar& g, int root);
Grammar inner_subgrammar(const Grammar& g, const std::string& root);

// Restriction to the given rule ids with per-nonterminal renormalization.
// Throws DataError when some nonterminal reachable through kept rules has no
// kept rule of its own (invalid cover).
Grammar outer_subgrammar(const Grammar& g, const std::vector<int>& keep_rules);

struct TopLevelEntry {
  int nonterminal = 0;
  bool proper = true;          // false when the entry is the start node itself
  double occurrence_prob = 0;  // sum of weights of start rules mentioning it
  double expected_count = 0;   // occurrence-count weighted
};

struct TopLevelSplit {
  std::vector<TopLevelEntry> subgrammars;
  std::vector<std::vector<int>> overhead;  // maximal terminal runs in start rules
};

TopLevelSplit top_level(const Grammar& g);

// Position of a proper inner subgrammar relative to sentence endpoints,
// with constant terminals of enclosing rules treated as transparent
// overhead: prefix = nothing but overhead can ever precede an instance's
// span, suffix = ditto on the right, infix = both endpoints always blocked
// by non-overhead material, mixed = anything else. Static fixpoint over
// nullable / can-emit analyses; no sampling.
enum class SpanPosition { prefix, suffix, infix, mixed };
const char* to_string(SpanPosition p);

SpanPosition classify_position(const Grammar& g, int root);
SpanPosition classify_position(const Grammar& g, const std::string& root);

// Rewrites maximal terminal runs of mixed rules into fresh single-rule
// nonterminals so that every rule is all-nonterminal or all-terminal.
// String distribution is unchanged. Fresh names look like "_run_sL1".
Grammar wrap_terminal_runs(const Grammar& g);

}  // namespace pcfglab
