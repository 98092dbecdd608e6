#include "pcfglab/earley.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>

#include "pcfglab/errors.hpp"

namespace pcfglab {

namespace {

// Weighted epsilon removal producing a proper PCFG: each transformed
// nonterminal generates its original distribution conditioned on deriving a
// nonempty string. Kept nullable children pick up a (1 - eps) factor and
// every lhs is divided by its own nonempty mass, so per-nonterminal weights
// sum to 1 again and forward (prefix) probabilities stay honest.
std::vector<EarleyParser::XRule> eliminate_epsilon(const Grammar& g,
                                                   const std::vector<double>& eps) {
  std::vector<EarleyParser::XRule> out;
  for (const Rule& rule : g.rules) {
    if (eps[rule.lhs] >= 1.0) continue;  // language is exactly {epsilon}
    // positions of nullable nonterminals in the rhs
    std::vector<int> nullable_pos;
    for (int i = 0; i < static_cast<int>(rule.rhs.size()); ++i) {
      const auto& s = rule.rhs[i];
      if (!s.terminal && eps[s.id] > 0.0) nullable_pos.push_back(i);
    }
    if (nullable_pos.size() > 20)
      throw NumericalError("too many nullable symbols in one rule");
    std::uint32_t subsets = 1u << nullable_pos.size();
    for (std::uint32_t mask = 0; mask < subsets; ++mask) {
      double w = rule.weight / (1.0 - eps[rule.lhs]);
      std::vector<char> erase(rule.rhs.size(), 0);
      for (std::size_t b = 0; b < nullable_pos.size(); ++b) {
        int pos = nullable_pos[b];
        double e = eps[rule.rhs[pos].id];
        if (mask & (1u << b)) {
          erase[pos] = 1;
          w *= e;
        } else {
          w *= 1.0 - e;
        }
      }
      if (w <= 0.0) continue;
      EarleyParser::XRule xr;
      xr.lhs = rule.lhs;
      xr.weight = w;
      for (int i = 0; i < static_cast<int>(rule.rhs.size()); ++i)
        if (!erase[i]) xr.rhs.push_back(rule.rhs[i]);
      if (xr.rhs.empty()) continue;  // the epsilon part lives in eps[] itself
      out.push_back(std::move(xr));
    }
  }
  // merge identical variants
  std::map<std::pair<int, std::vector<std::pair<int, int>>>, int> seen;
  std::vector<EarleyParser::XRule> merged;
  for (auto& xr : out) {
    std::vector<std::pair<int, int>> key_rhs;
    for (const auto& s : xr.rhs) key_rhs.emplace_back(s.terminal ? 1 : 0, s.id);
    auto key = std::make_pair(xr.lhs, key_rhs);
    auto it = seen.find(key);
    if (it == seen.end()) {
      seen[key] = static_cast<int>(merged.size());
      merged.push_back(std::move(xr));
    } else {
      merged[it->second].weight += xr.weight;
    }
  }
  return merged;
}

Eigen::MatrixXd closure_inverse(const Eigen::MatrixXd& p, const char* what) {
  int n = static_cast<int>(p.rows());
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n) - p;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  if (!lu.isInvertible())
    throw NumericalError(std::string("singular ") + what + " closure; grammar too degenerate");
  return lu.inverse();
}

}  // namespace

EarleyParser::EarleyParser(const Grammar& g) : g_(g) {
  int n = g_.num_nonterminals();
  auto eps = epsilon_probs(g_);
  eps_start_ = eps[g_.start];
  auto all = eliminate_epsilon(g_, eps);

  // split off unit productions; they live only inside R_L and R_U
  Eigen::MatrixXd pl = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd pu = Eigen::MatrixXd::Zero(n, n);
  for (const auto& xr : all) {
    if (!xr.rhs.front().terminal) pl(xr.lhs, xr.rhs.front().id) += xr.weight;
    if (xr.rhs.size() == 1 && !xr.rhs.front().terminal) {
      pu(xr.lhs, xr.rhs.front().id) += xr.weight;
      continue;
    }
    xrules_.push_back(xr);
  }
  rl_ = closure_inverse(pl, "left-corner");
  ru_ = closure_inverse(pu, "unit-production");

  xrules_of_.assign(n, {});
  for (int r = 0; r < static_cast<int>(xrules_.size()); ++r)
    xrules_of_[xrules_[r].lhs].push_back(r);
  unit_parents_.assign(n, {});
  for (int c = 0; c < n; ++c)
    for (int b = 0; b < n; ++b)
      if (ru_(b, c) > 1e-300) unit_parents_[c].emplace_back(b, ru_(b, c));
}

EarleyParser::Session::Session(const EarleyParser& parser) : p_(parser) {
  chart_.emplace_back();
  eos_scaled_ = p_.eps_start_;
  // seed the chart with predictions from the bare start-symbol demand
  std::vector<std::pair<std::pair<int, int>, double>> no_seeds;
  complete_and_predict(std::move(no_seeds));
}

int EarleyParser::Session::add_state(Position& p, int rule, int dot, int origin, double alpha,
                                     double gamma) {
  std::uint64_t key = (static_cast<std::uint64_t>(rule) << 40) ^
                      (static_cast<std::uint64_t>(dot) << 32) ^
                      static_cast<std::uint64_t>(origin);
  auto it = p.index.find(key);
  if (it != p.index.end()) {
    p.states[it->second].alpha += alpha;
    p.states[it->second].gamma += gamma;
    return it->second;
  }
  int idx = static_cast<int>(p.states.size());
  p.states.push_back({rule, dot, origin, alpha, gamma});
  p.index[key] = idx;
  const auto& rhs = p_.xrules_[rule].rhs;
  if (dot < static_cast<int>(rhs.size()) && !rhs[dot].terminal) {
    if (p.waiting.empty()) p.waiting.assign(p_.g_.num_nonterminals(), {});
    p.waiting[rhs[dot].id].push_back(idx);
  }
  return idx;
}

// seeds: completed constituents ((nt, origin), gamma) produced by the scan.
// Runs the completion cascade (largest origin first; cascades only move
// left) and then the R_L prediction closure for the current position.
void EarleyParser::Session::complete_and_predict(
    std::vector<std::pair<std::pair<int, int>, double>> seeds) {
  Position& here = chart_[pos_];
  int n = p_.g_.num_nonterminals();

  std::map<int, std::map<int, double>> agenda;  // origin -> nt -> gamma
  for (auto& [key, gamma] : seeds) agenda[key.second][key.first] += gamma;

  eos_scaled_ = pos_ == 0 ? p_.eps_start_ : 0.0;
  while (!agenda.empty()) {
    auto last = std::prev(agenda.end());
    int origin = last->first;
    std::map<int, double> batch = std::move(last->second);
    agenda.erase(last);
    for (auto& [c, gamma] : batch) {
      if (origin == 0) eos_scaled_ += p_.ru_(p_.g_.start, c) * gamma;
      const Position& at = chart_[origin];
      if (at.waiting.empty()) continue;
      for (auto& [b, factor] : p_.unit_parents_[c]) {
        for (int idx : at.waiting[b]) {
          // copy: add_state may grow the vector holding `st`
          State st = at.states[idx];
          double add_a = st.alpha * gamma * factor;
          double add_g = st.gamma * gamma * factor;
          int new_dot = st.dot + 1;
          const auto& rhs = p_.xrules_[st.rule].rhs;
          add_state(here, st.rule, new_dot, st.origin, add_a, add_g);
          if (new_dot == static_cast<int>(rhs.size()))
            agenda[st.origin][p_.xrules_[st.rule].lhs] += add_g;  // cascades move left
        }
      }
    }
  }

  // prediction: demands from everything now at this position (plus the bare
  // start-symbol demand at position 0), closed through R_L
  Eigen::VectorXd demand = Eigen::VectorXd::Zero(n);
  if (pos_ == 0) demand(p_.g_.start) = 1.0;
  for (const State& st : here.states) {
    const auto& rhs = p_.xrules_[st.rule].rhs;
    if (st.dot < static_cast<int>(rhs.size()) && !rhs[st.dot].terminal)
      demand(rhs[st.dot].id) += st.alpha;
  }
  if (demand.isZero(0.0)) return;
  Eigen::VectorXd reach = p_.rl_.transpose() * demand;
  for (int c = 0; c < n; ++c) {
    if (reach(c) <= 0.0) continue;
    for (int r : p_.xrules_of_[c])
      add_state(here, r, 0, pos_, reach(c) * p_.xrules_[r].weight, p_.xrules_[r].weight);
  }
}

double EarleyParser::Session::advance(int terminal) {
  if (dead_) return -kInf();
  chart_.emplace_back();  // may reallocate: take references afterwards
  Position& here = chart_[pos_];
  Position& next = chart_[pos_ + 1];

  double c = 0.0;
  std::vector<std::pair<std::pair<int, int>, double>> completed;
  for (const State& st : here.states) {
    const auto& rhs = p_.xrules_[st.rule].rhs;
    if (st.dot >= static_cast<int>(rhs.size())) continue;
    if (!rhs[st.dot].terminal || rhs[st.dot].id != terminal) continue;
    c += st.alpha;
  }
  if (c <= 0.0) {
    dead_ = true;
    chart_.pop_back();
    return -kInf();
  }
  for (const State& st : here.states) {
    const auto& rhs = p_.xrules_[st.rule].rhs;
    if (st.dot >= static_cast<int>(rhs.size())) continue;
    if (!rhs[st.dot].terminal || rhs[st.dot].id != terminal) continue;
    add_state(next, st.rule, st.dot + 1, st.origin, st.alpha / c, st.gamma / c);
    if (st.dot + 1 == static_cast<int>(rhs.size()))
      completed.push_back({{p_.xrules_[st.rule].lhs, st.origin}, st.gamma / c});
  }
  // the transformed grammar is conditioned on nonempty sentences; the first
  // token pays the (1 - P(S =>* eps)) factor back
  double cond = pos_ == 0 ? c * (1.0 - p_.eps_start_) : c;
  ++pos_;
  prefix_lp_ += std::log(cond);
  complete_and_predict(std::move(completed));
  return std::log(cond);
}

double EarleyParser::Session::eos_logprob() const {
  if (dead_) return -kInf();
  return eos_scaled_ > 0.0 ? std::log(eos_scaled_) : -kInf();
}

TokenDistribution EarleyParser::Session::next_dist() const {
  TokenDistribution d;
  d.terminal_probs.assign(p_.g_.num_terminals(), 0.0);
  if (dead_) return d;
  double scale = pos_ == 0 ? 1.0 - p_.eps_start_ : 1.0;
  for (const State& st : chart_[pos_].states) {
    const auto& rhs = p_.xrules_[st.rule].rhs;
    if (st.dot < static_cast<int>(rhs.size()) && rhs[st.dot].terminal)
      d.terminal_probs[rhs[st.dot].id] += scale * st.alpha;
  }
  d.eos = eos_scaled_;
  return d;
}

}  // namespace pcfglab
