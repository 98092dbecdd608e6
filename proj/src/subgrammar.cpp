#include "pcfglab/subgrammar.hpp"

#include <algorithm>
#include <deque>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "pcfglab/errors.hpp"

namespace pcfglab {

bool SubgrammarDag::is_leaf(int node) const {
  for (const auto& [p, c] : edges)
    if (p == node) return false;
  return true;
}

std::string SubgrammarDag::label_string(const Grammar& g, int node) const {
  std::string out = "{";
  for (std::size_t i = 0; i < nodes[node].label.size(); ++i) {
    if (i) out += ",";
    out += g.nonterminals[nodes[node].label[i]];
  }
  return out + "}";
}

std::string SubgrammarDag::to_json(const Grammar& g) const {
  nlohmann::json j;
  j["root"] = root;
  j["nodes"] = nlohmann::json::array();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    nlohmann::json n;
    n["id"] = i;
    n["label"] = nlohmann::json::array();
    for (int nt : nodes[i].label) n["label"].push_back(g.nonterminals[nt]);
    n["self_loop"] = nodes[i].self_loop;
    j["nodes"].push_back(n);
  }
  j["edges"] = nlohmann::json::array();
  for (const auto& [p, c] : edges) j["edges"].push_back({p, c});
  return j.dump(2);
}

std::string SubgrammarDag::to_tree_string(const Grammar& g) const {
  // Indented DFS from the root; shared children reprinted with a marker.
  std::ostringstream out;
  std::vector<char> seen(nodes.size(), 0);
  std::vector<std::vector<int>> kids(nodes.size());
  for (const auto& [p, c] : edges) kids[p].push_back(c);
  std::function<void(int, int)> walk = [&](int node, int depth) {
    for (int i = 0; i < depth; ++i) out << "  ";
    out << label_string(g, node);
    if (nodes[node].self_loop) out << " (self-loop)";
    if (seen[node]) {
      out << " (shared)\n";
      return;
    }
    out << "\n";
    seen[node] = 1;
    for (int c : kids[node]) walk(c, depth + 1);
  };
  walk(root, 0);
  return out.str();
}

SubgrammarDag decompose_dag(const Grammar& g) {
  int n = g.num_nonterminals();
  // Closure sets as sorted id lists; nodes keyed by closure identity.
  std::vector<std::vector<int>> closure_key(n);
  for (int nt = 0; nt < n; ++nt) {
    auto in = closure_of(g, nt);
    for (int i = 0; i < n; ++i)
      if (in[i]) closure_key[nt].push_back(i);
  }

  std::map<std::vector<int>, int> node_of_closure;
  SubgrammarDag dag;
  dag.node_of.assign(n, -1);
  std::set<std::pair<int, int>> edge_set;

  std::function<int(int)> build = [&](int nt) -> int {
    const auto& key = closure_key[nt];
    auto it = node_of_closure.find(key);
    if (it != node_of_closure.end()) return it->second;
    int id = static_cast<int>(dag.nodes.size());
    node_of_closure[key] = id;
    dag.nodes.push_back({});
    // label = mutual-reachability class: closure members whose own closure
    // is this same set
    std::vector<int> label;
    for (int b : key)
      if (closure_key[b] == key) label.push_back(b);
    dag.nodes[id].label = label;
    for (int b : label) dag.node_of[b] = id;
    bool self_loop = false;
    for (int a : label)
      for (int r : g.rules_of[a])
        for (const auto& s : g.rules[r].rhs)
          if (!s.terminal) {
            if (closure_key[s.id] == key) {
              self_loop = true;
            } else {
              int child = build(s.id);
              edge_set.insert({id, child});
            }
          }
    dag.nodes[id].self_loop = self_loop;
    return id;
  };
  dag.root = build(g.start);

  // canonical order: min depth from root, then smallest label id
  std::vector<std::vector<int>> kids(dag.nodes.size());
  for (const auto& [p, c] : edge_set) kids[p].push_back(c);
  std::vector<int> depth(dag.nodes.size(), -1);
  std::deque<int> queue{dag.root};
  depth[dag.root] = 0;
  while (!queue.empty()) {
    int v = queue.front();
    queue.pop_front();
    for (int c : kids[v])
      if (depth[c] < 0) {
        depth[c] = depth[v] + 1;
        queue.push_back(c);
      }
  }
  std::vector<int> order(dag.nodes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (depth[a] != depth[b]) return depth[a] < depth[b];
    return dag.nodes[a].label.front() < dag.nodes[b].label.front();
  });
  std::vector<int> remap(dag.nodes.size());
  for (std::size_t i = 0; i < order.size(); ++i) remap[order[i]] = static_cast<int>(i);

  SubgrammarDag out;
  out.nodes.resize(dag.nodes.size());
  for (std::size_t i = 0; i < dag.nodes.size(); ++i) out.nodes[remap[i]] = dag.nodes[i];
  out.root = remap[dag.root];
  out.node_of.assign(n, -1);
  for (int nt = 0; nt < n; ++nt)
    if (dag.node_of[nt] >= 0) out.node_of[nt] = remap[dag.node_of[nt]];
  for (const auto& [p, c] : edge_set) out.edges.emplace_back(remap[p], remap[c]);
  std::sort(out.edges.begin(), out.edges.end());
  out.edges.erase(std::unique(out.edges.begin(), out.edges.end()), out.edges.end());
  return out;
}

Grammar inner_subgrammar(const Grammar& g, int root) {
  if (root < 0 || root >= g.num_nonterminals()) throw DataError("unknown nonterminal id");
  auto in = closure_of(g, root);
  Grammar out;
  out.name = g.name + "." + g.nonterminals[root];
  std::vector<int> nt_map(g.num_nonterminals(), -1);
  for (int nt = 0; nt < g.num_nonterminals(); ++nt)
    if (in[nt]) {
      nt_map[nt] = static_cast<int>(out.nonterminals.size());
      out.nonterminals.push_back(g.nonterminals[nt]);
    }
  out.start = nt_map[root];
  std::vector<int> term_map(g.num_terminals(), -1);
  for (const Rule& r : g.rules) {
    if (!in[r.lhs]) continue;
    Rule nr;
    nr.lhs = nt_map[r.lhs];
    nr.weight = r.weight;
    nr.weight_exact = r.weight_exact;
    for (const auto& s : r.rhs) {
      if (s.terminal) {
        if (term_map[s.id] < 0) {
          term_map[s.id] = static_cast<int>(out.terminals.size());
          out.terminals.push_back(g.terminals[s.id]);
        }
        nr.rhs.push_back({true, term_map[s.id]});
      } else {
        nr.rhs.push_back({false, nt_map[s.id]});
      }
    }
    out.rules.push_back(std::move(nr));
  }
  out.rebuild_index();
  return out;
}

Grammar inner_subgrammar(const Grammar& g, const std::string& root) {
  return inner_subgrammar(g, g.require_nonterminal(root));
}

Grammar outer_subgrammar(const Grammar& g, const std::vector<int>& keep_rules) {
  std::vector<char> keep(g.rules.size(), 0);
  for (int r : keep_rules) {
    if (r < 0 || r >= static_cast<int>(g.rules.size()))
      throw DataError("rule id out of range: " + std::to_string(r));
    keep[r] = 1;
  }
  // reachability through kept rules only
  std::vector<char> in(g.num_nonterminals(), 0);
  std::deque<int> queue{g.start};
  in[g.start] = 1;
  while (!queue.empty()) {
    int nt = queue.front();
    queue.pop_front();
    for (int r : g.rules_of[nt]) {
      if (!keep[r]) continue;
      for (const auto& s : g.rules[r].rhs)
        if (!s.terminal && !in[s.id]) {
          in[s.id] = 1;
          queue.push_back(s.id);
        }
    }
  }
  for (int nt = 0; nt < g.num_nonterminals(); ++nt) {
    if (!in[nt]) continue;
    bool any = false;
    for (int r : g.rules_of[nt]) any = any || keep[r];
    if (!any)
      throw DataError("invalid cover: nonterminal '" + g.nonterminals[nt] +
                      "' is reachable through kept rules but has none of its own");
  }

  Grammar out;
  out.name = g.name + ".outer";
  std::vector<int> nt_map(g.num_nonterminals(), -1);
  for (int nt = 0; nt < g.num_nonterminals(); ++nt)
    if (in[nt]) {
      nt_map[nt] = static_cast<int>(out.nonterminals.size());
      out.nonterminals.push_back(g.nonterminals[nt]);
    }
  out.start = nt_map[g.start];
  std::vector<Rational> sums(g.num_nonterminals(), Rational(0, 1));
  for (int r = 0; r < static_cast<int>(g.rules.size()); ++r)
    if (keep[r] && in[g.rules[r].lhs])
      sums[g.rules[r].lhs] = sums[g.rules[r].lhs] + g.rules[r].weight_exact;
  std::vector<int> term_map(g.num_terminals(), -1);
  for (int r = 0; r < static_cast<int>(g.rules.size()); ++r) {
    const Rule& rule = g.rules[r];
    if (!keep[r] || !in[rule.lhs]) continue;
    Rule nr;
    nr.lhs = nt_map[rule.lhs];
    nr.weight_exact = rule.weight_exact / sums[rule.lhs];
    nr.weight = nr.weight_exact.to_double();
    for (const auto& s : rule.rhs) {
      if (s.terminal) {
        if (term_map[s.id] < 0) {
          term_map[s.id] = static_cast<int>(out.terminals.size());
          out.terminals.push_back(g.terminals[s.id]);
        }
        nr.rhs.push_back({true, term_map[s.id]});
      } else {
        nr.rhs.push_back({false, nt_map[s.id]});
      }
    }
    out.rules.push_back(std::move(nr));
  }
  out.rebuild_index();
  return out;
}

TopLevelSplit top_level(const Grammar& g) {
  TopLevelSplit split;
  auto root_in = closure_of(g, g.start);
  std::vector<int> key_root;
  for (int i = 0; i < g.num_nonterminals(); ++i)
    if (root_in[i]) key_root.push_back(i);

  std::map<int, std::pair<double, double>> probs;  // nt -> (occurrence, expected)
  std::vector<int> order;
  std::set<std::vector<int>> run_seen;
  for (int r : g.rules_of[g.start]) {
    const Rule& rule = g.rules[r];
    std::set<int> seen_in_rule;
    std::vector<int> run;
    auto flush_run = [&] {
      if (!run.empty() && run_seen.insert(run).second) split.overhead.push_back(run);
      run.clear();
    };
    for (const auto& s : rule.rhs) {
      if (s.terminal) {
        run.push_back(s.id);
      } else {
        flush_run();
        if (!probs.count(s.id)) order.push_back(s.id);
        auto& [occ, cnt] = probs[s.id];
        if (seen_in_rule.insert(s.id).second) occ += rule.weight;
        cnt += rule.weight;
      }
    }
    flush_run();
  }
  for (int nt : order) {
    TopLevelEntry e;
    e.nonterminal = nt;
    auto in = closure_of(g, nt);
    std::vector<int> key;
    for (int i = 0; i < g.num_nonterminals(); ++i)
      if (in[i]) key.push_back(i);
    e.proper = key != key_root;
    e.occurrence_prob = probs[nt].first;
    e.expected_count = probs[nt].second;
    split.subgrammars.push_back(e);
  }
  return split;
}

const char* to_string(SpanPosition p) {
  switch (p) {
    case SpanPosition::prefix: return "prefix";
    case SpanPosition::suffix: return "suffix";
    case SpanPosition::infix: return "infix";
    default: return "mixed";
  }
}

namespace {

// can the nonterminal derive a string containing at least one terminal?
std::vector<char> can_emit(const Grammar& g) {
  std::vector<char> can(g.num_nonterminals(), 0);
  bool changed = true;
  while (changed) {
    changed = false;
    for (const Rule& r : g.rules) {
      if (can[r.lhs]) continue;
      bool hit = false;
      for (const auto& s : r.rhs)
        if (s.terminal || can[s.id]) {
          hit = true;
          break;
        }
      if (hit) {
        can[r.lhs] = 1;
        changed = true;
      }
    }
  }
  return can;
}

}  // namespace

SpanPosition classify_position(const Grammar& g, int root) {
  if (root < 0 || root >= g.num_nonterminals()) throw DataError("unknown nonterminal id");
  SubgrammarDag dag = decompose_dag(g);
  if (dag.node_of[root] == dag.root)
    throw DataError("'" + g.nonterminals[root] + "' does not label a proper inner subgrammar");
  int target_node = dag.node_of[root];

  auto reach = reachable(g);
  auto nul = nullable(g);
  auto emits = can_emit(g);

  // For every nonterminal X: can anything other than enclosing-rule
  // terminals end up strictly left (right) of an occurrence's span, and can
  // an occurrence ever sit at the modulo-overhead sentence start (end)?
  // Monotone fixpoints over rule occurrences; occurrences of the target
  // inside its own DAG node are internal recursion, not new instances.
  int n = g.num_nonterminals();
  std::vector<char> block_l(n, 0), block_r(n, 0), clear_l(n, 0), clear_r(n, 0);
  clear_l[g.start] = clear_r[g.start] = 1;

  bool changed = true;
  while (changed) {
    changed = false;
    for (const Rule& rule : g.rules) {
      if (!reach[rule.lhs]) continue;
      for (int pos = 0; pos < static_cast<int>(rule.rhs.size()); ++pos) {
        const auto& s = rule.rhs[pos];
        if (s.terminal) continue;
        int x = s.id;
        if (x == root && dag.node_of[rule.lhs] == target_node) continue;
        bool left_can_block = block_l[rule.lhs] != 0;
        bool left_can_clear = clear_l[rule.lhs] != 0;
        for (int i = 0; i < pos; ++i) {
          const auto& t = rule.rhs[i];
          if (t.terminal) continue;  // overhead terminals are transparent
          if (emits[t.id]) left_can_block = true;
          if (!nul[t.id]) left_can_clear = false;
        }
        bool right_can_block = block_r[rule.lhs] != 0;
        bool right_can_clear = clear_r[rule.lhs] != 0;
        for (int i = pos + 1; i < static_cast<int>(rule.rhs.size()); ++i) {
          const auto& t = rule.rhs[i];
          if (t.terminal) continue;
          if (emits[t.id]) right_can_block = true;
          if (!nul[t.id]) right_can_clear = false;
        }
        if (left_can_block && !block_l[x]) block_l[x] = 1, changed = true;
        if (left_can_clear && !clear_l[x]) clear_l[x] = 1, changed = true;
        if (right_can_block && !block_r[x]) block_r[x] = 1, changed = true;
        if (right_can_clear && !clear_r[x]) clear_r[x] = 1, changed = true;
      }
    }
  }

  if (!block_l[root]) return SpanPosition::prefix;
  if (!block_r[root]) return SpanPosition::suffix;
  if (!clear_l[root] && !clear_r[root]) return SpanPosition::infix;
  return SpanPosition::mixed;
}

SpanPosition classify_position(const Grammar& g, const std::string& root) {
  return classify_position(g, g.require_nonterminal(root));
}

Grammar wrap_terminal_runs(const Grammar& g) {
  Grammar out;
  out.name = g.name + ".wrapped";
  out.terminals = g.terminals;
  out.nonterminals = g.nonterminals;
  out.start = g.start;

  std::map<std::vector<int>, int> run_nt;  // terminal run -> fresh nonterminal id
  std::vector<Rule> fresh_rules;
  auto wrap = [&](const std::vector<int>& run) -> int {
    auto it = run_nt.find(run);
    if (it != run_nt.end()) return it->second;
    std::string name = "_run";
    for (int t : run) name += "_" + g.terminals[t];
    while (std::find(out.nonterminals.begin(), out.nonterminals.end(), name) !=
           out.nonterminals.end())
      name += "_";
    int id = static_cast<int>(out.nonterminals.size());
    out.nonterminals.push_back(name);
    run_nt[run] = id;
    Rule r;
    r.lhs = id;
    for (int t : run) r.rhs.push_back({true, t});
    r.weight = 1.0;
    r.weight_exact = Rational(1, 1);
    fresh_rules.push_back(r);
    return id;
  };

  for (const Rule& rule : g.rules) {
    bool has_t = false, has_nt = false;
    for (const auto& s : rule.rhs) (s.terminal ? has_t : has_nt) = true;
    Rule nr;
    nr.lhs = rule.lhs;
    nr.weight = rule.weight;
    nr.weight_exact = rule.weight_exact;
    if (has_t && has_nt) {
      std::vector<int> run;
      auto flush = [&] {
        if (!run.empty()) nr.rhs.push_back({false, wrap(run)});
        run.clear();
      };
      for (const auto& s : rule.rhs) {
        if (s.terminal)
          run.push_back(s.id);
        else {
          flush();
          nr.rhs.push_back(s);
        }
      }
      flush();
    } else {
      nr.rhs = rule.rhs;
    }
    out.rules.push_back(std::move(nr));
  }
  for (const Rule& r : fresh_rules) out.rules.push_back(r);
  out.rebuild_index();
  return out;
}

}  // namespace pcfglab
