#include "support/enum_oracle.hpp"

#include <climits>

namespace pcfglab::testing {

namespace {

struct Item {
  Symbol sym;
  int depth;
};

struct StringSearch {
  const Grammar& g;
  const std::vector<int>& target;
  int max_depth;
  std::vector<int> min_len;
  double total = 0.0;
  double pruned = 0.0;

  void go(std::vector<Item>& stack, std::size_t matched, double weight) {
    if (stack.empty()) {
      if (matched == target.size()) total += weight;
      return;
    }
    // shortest completion bound
    long long need = 0;
    for (const Item& it : stack)
      need += it.sym.terminal ? 1 : min_len[it.sym.id];
    if (matched + need > target.size()) return;

    Item top = stack.back();
    stack.pop_back();
    if (top.sym.terminal) {
      if (matched < target.size() && target[matched] == top.sym.id)
        go(stack, matched + 1, weight);
    } else if (top.depth >= max_depth) {
      pruned += weight;
    } else {
      for (int r : g.rules_of[top.sym.id]) {
        const Rule& rule = g.rules[r];
        std::size_t before = stack.size();
        for (auto it = rule.rhs.rbegin(); it != rule.rhs.rend(); ++it)
          stack.push_back({*it, top.depth + 1});
        go(stack, matched, weight * rule.weight);
        stack.resize(before);
      }
    }
    stack.push_back(top);
  }
};

struct PrefixSearch {
  const Grammar& g;
  const std::vector<int>& prefix;
  int max_depth;
  double total = 0.0;
  double pruned = 0.0;

  void go(std::vector<Item>& stack, std::size_t matched, double weight) {
    if (matched == prefix.size()) {
      total += weight;  // consistent grammar: completions carry mass 1
      return;
    }
    if (stack.empty()) return;
    Item top = stack.back();
    stack.pop_back();
    if (top.sym.terminal) {
      if (prefix[matched] == top.sym.id) go(stack, matched + 1, weight);
    } else if (top.depth >= max_depth) {
      pruned += weight;
    } else {
      for (int r : g.rules_of[top.sym.id]) {
        const Rule& rule = g.rules[r];
        std::size_t before = stack.size();
        for (auto it = rule.rhs.rbegin(); it != rule.rhs.rend(); ++it)
          stack.push_back({*it, top.depth + 1});
        go(stack, matched, weight * rule.weight);
        stack.resize(before);
      }
    }
    stack.push_back(top);
  }
};

struct AllStrings {
  const Grammar& g;
  int max_len;
  int max_depth;
  std::vector<int> min_len;
  std::vector<char> allowed;
  std::map<std::vector<int>, double> out;
  bool depth_hit = false;

  void go(std::vector<Item>& stack, std::vector<int>& emitted, double weight) {
    long long need = emitted.size();
    for (const Item& it : stack)
      need += it.sym.terminal ? 1 : min_len[it.sym.id];
    if (need > max_len) return;
    if (stack.empty()) {
      out[emitted] += weight;
      return;
    }
    Item top = stack.back();
    stack.pop_back();
    if (top.sym.terminal) {
      if (allowed.empty() || allowed[top.sym.id]) {
        emitted.push_back(top.sym.id);
        go(stack, emitted, weight);
        emitted.pop_back();
      }
    } else if (top.depth >= max_depth) {
      depth_hit = true;
    } else {
      for (int r : g.rules_of[top.sym.id]) {
        const Rule& rule = g.rules[r];
        std::size_t before = stack.size();
        for (auto it = rule.rhs.rbegin(); it != rule.rhs.rend(); ++it)
          stack.push_back({*it, top.depth + 1});
        go(stack, emitted, weight * rule.weight);
        stack.resize(before);
      }
    }
    stack.push_back(top);
  }
};

}  // namespace

EnumResult enum_string_prob(const Grammar& g, const std::vector<int>& tokens, int max_depth) {
  StringSearch s{g, tokens, max_depth, min_lengths(g)};
  std::vector<Item> stack{{{false, g.start}, 0}};
  s.go(stack, 0, 1.0);
  return {s.total, s.pruned};
}

EnumResult enum_prefix_prob(const Grammar& g, const std::vector<int>& prefix, int max_depth) {
  PrefixSearch s{g, prefix, max_depth};
  std::vector<Item> stack{{{false, g.start}, 0}};
  s.go(stack, 0, 1.0);
  return {s.total, s.pruned};
}

std::map<std::vector<int>, double> enum_strings(const Grammar& g, int max_len, int max_depth,
                                                bool* depth_hit, const std::vector<int>& filter) {
  AllStrings s{g, max_len, max_depth, min_lengths(g), {}};
  if (!filter.empty()) {
    s.allowed.assign(g.num_terminals(), 0);
    for (int t : filter) s.allowed[t] = 1;
  }
  std::vector<Item> stack{{{false, g.start}, 0}};
  std::vector<int> emitted;
  s.go(stack, emitted, 1.0);
  if (depth_hit) *depth_hit = s.depth_hit;
  return s.out;
}

}  // namespace pcfglab::testing
