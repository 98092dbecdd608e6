#include "pcfglab/divergence.hpp"

#include <cmath>

#include "json.hpp"
#include "pcfglab/errors.hpp"
#include "pcfglab/oracle.hpp"

namespace pcfglab {

std::string KlReport::to_json() const {
  nlohmann::json j;
  j["total_nats_per_sentence"] = total;
  j["total_stderr"] = total_stderr;
  j["per_token"] = per_token;
  j["per_token_stderr"] = per_token_stderr;
  j["per_bucket"] = per_bucket;
  j["per_bucket_stderr"] = per_bucket_stderr;
  j["max_residual"] = max_residual;
  j["n_samples"] = n;
  j["seed"] = seed;
  return j.dump(2);
}

namespace {

struct KlSample {
  double total = 0;
  std::vector<double> bucket;
  double residual = 0;
  int slots = 0;
};

struct KlEngine {
  std::vector<std::string> labels;
  std::map<std::string, int> label_index;
  std::vector<KlSample> samples;
};

// Samples n annotated sentences from P and prices each token (and the EOS
// slot) with exact P conditionals against Q's. Per-sample bucket sums plus
// the independently accumulated total realize the partition identity.
KlEngine collect_kl_samples(const Grammar& g, const SubgrammarDag& dag,
                            const LanguageModel& q, std::int64_t n, std::uint64_t seed,
                            const SampleLimits& limits, Exec exec, Bucketing bucketing) {
  if (q.num_terminals() != g.num_terminals())
    throw DataError("model vocabulary does not match the grammar's terminals");
  KlEngine eng;
  if (bucketing == Bucketing::top_level) {
    for (const auto& e : top_level(g).subgrammars)
      eng.labels.push_back(g.nonterminals[e.nonterminal]);
    eng.labels.push_back("OVERHEAD");
  } else {
    for (std::size_t node = 0; node < dag.nodes.size(); ++node)
      eng.labels.push_back(g.nonterminals[dag.nodes[node].label.front()]);
  }
  eng.labels.push_back("ROOT-EOS");
  for (std::size_t i = 0; i < eng.labels.size(); ++i)
    eng.label_index[eng.labels[i]] = static_cast<int>(i);

  Oracle oracle(g);
  SamplingTables tables(g);
  eng.samples.resize(n);
  std::vector<std::string> errors(n);
  parallel_for(exec, n, [&](std::int64_t i) {
    try {
      DerivationTree t = sample_tree(g, tables, seed, i, limits);
      AnnotatedSentence s = linearize(g, dag, t);
      auto lp_p = oracle.conditional_logprobs(s.tokens);
      auto lp_q = q.conditional_logprobs(s.tokens);
      KlSample& out = eng.samples[i];
      out.bucket.assign(eng.labels.size(), 0.0);
      out.slots = static_cast<int>(s.tokens.size()) + 1;
      double total = 0;
      for (int slot = 0; slot < out.slots; ++slot) {
        if (!std::isfinite(lp_q[slot]) || lp_q[slot] < -745.0) {
          std::string ctx;
          for (int k = 0; k < slot && k < static_cast<int>(s.tokens.size()); ++k)
            ctx += (k ? " " : "") + g.terminals[s.tokens[k]];
          throw NumericalError(
              "infinite KL witness: model assigns zero probability after context '" + ctx +
              "' (slot " + std::to_string(slot) + ")");
        }
        double ratio = lp_p[slot] - lp_q[slot];
        total += ratio;
        int b;
        if (bucketing == Bucketing::top_level) {
          if (s.bucket[slot] == AnnotatedSentence::kRootEos)
            b = static_cast<int>(eng.labels.size()) - 1;
          else if (s.bucket[slot] == AnnotatedSentence::kOverhead)
            b = eng.label_index.at("OVERHEAD");
          else
            b = eng.label_index.at(g.nonterminals[s.instances[s.bucket[slot]].nonterminal]);
        } else {
          if (s.bucket[slot] == AnnotatedSentence::kRootEos)
            b = static_cast<int>(eng.labels.size()) - 1;
          else
            b = eng.label_index.at(
                g.nonterminals[dag.nodes[s.node_path[slot].back()].label.front()]);
        }
        out.bucket[b] += ratio;
      }
      out.total = total;
      double recomposed = 0;
      for (double v : out.bucket) recomposed += v;
      out.residual = total - recomposed;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::int64_t i = 0; i < n; ++i)
    if (!errors[i].empty()) throw NumericalError(errors[i]);
  return eng;
}

KlReport summarize(const KlEngine& eng, std::uint64_t seed) {
  KlReport rep;
  rep.n = static_cast<std::int64_t>(eng.samples.size());
  rep.seed = seed;
  double n = static_cast<double>(rep.n);
  double sum = 0, sq = 0;
  std::int64_t slots = 0;
  std::vector<double> bsum(eng.labels.size(), 0.0), bsq(eng.labels.size(), 0.0);
  for (const auto& s : eng.samples) {
    sum += s.total;
    sq += s.total * s.total;
    slots += s.slots;
    rep.max_residual = std::max(rep.max_residual, std::abs(s.residual));
    for (std::size_t b = 0; b < eng.labels.size(); ++b) {
      bsum[b] += s.bucket[b];
      bsq[b] += s.bucket[b] * s.bucket[b];
    }
  }
  rep.total = sum / n;
  rep.total_stderr = std::sqrt(std::max(0.0, sq / n - rep.total * rep.total) / n);
  rep.per_token = sum / static_cast<double>(slots);
  rep.per_token_stderr = rep.total_stderr * n / static_cast<double>(slots);
  for (std::size_t b = 0; b < eng.labels.size(); ++b) {
    double mean = bsum[b] / n;
    rep.per_bucket[eng.labels[b]] = mean;
    rep.per_bucket_stderr[eng.labels[b]] =
        std::sqrt(std::max(0.0, bsq[b] / n - mean * mean) / n);
  }
  return rep;
}

}  // namespace

KlReport mc_kl(const Grammar& g, const LanguageModel& q, std::int64_t n, std::uint64_t seed,
               const SampleLimits& limits, Exec exec, Bucketing bucketing) {
  if (bucketing == Bucketing::leaf) return verify_leaf(g, q, n, seed, limits, exec).kl;
  SubgrammarDag dag = decompose_dag(g);
  KlEngine eng = collect_kl_samples(g, dag, q, n, seed, limits, exec, bucketing);
  return summarize(eng, seed);
}

ResidualReport verify_top_level(const Grammar& g, const LanguageModel& q, std::int64_t n,
                                std::uint64_t seed, const SampleLimits& limits, Exec exec) {
  ResidualReport rep;
  rep.kl = mc_kl(g, q, n, seed, limits, exec, Bucketing::top_level);
  rep.max_residual = rep.kl.max_residual;
  return rep;
}

ResidualReport verify_leaf(const Grammar& g, const LanguageModel& q, std::int64_t n,
                           std::uint64_t seed, const SampleLimits& limits, Exec exec) {
  Grammar w = wrap_terminal_runs(g);
  SubgrammarDag dag = decompose_dag(w);
  // gate: all-terminal rules may only live on DAG leaves
  for (const Rule& rule : w.rules) {
    bool all_terminal = !rule.rhs.empty();
    for (const auto& s : rule.rhs) all_terminal = all_terminal && s.terminal;
    if (all_terminal && !dag.is_leaf(dag.node_of[rule.lhs])) {
      std::string rhs;
      for (const auto& s : rule.rhs) rhs += " \"" + w.terminals[s.id] + "\"";
      throw DataError("leaf decomposition refused: rule " + w.nonterminals[rule.lhs] +
                      " ->" + rhs + " emits terminals at a non-leaf subgrammar node");
    }
  }
  KlEngine eng = collect_kl_samples(w, dag, q, n, seed, limits, exec, Bucketing::leaf);
  ResidualReport rep;
  rep.kl = summarize(eng, seed);
  rep.max_residual = rep.kl.max_residual;
  return rep;
}

RecurrencePrediction predict_recurrence(const Grammar& g, const SyntheticComposedLm& q,
                                        std::int64_t n, std::uint64_t seed,
                                        const SampleLimits& limits, Exec exec) {
  RecurrencePrediction out;
  RecursionStats rs = expected_recursion(g, g.start);
  out.expected_r = rs.expected_recursion;
  if (rs.unbounded) {
    out.unbounded = true;
    return out;
  }

  // measured total, its own stream
  KlReport measured = mc_kl(g, q, n, seed, limits, exec);
  out.measured_total = measured.total;
  out.measured_stderr = measured.total_stderr;

  // root-level overhead + EOS restricted term on an independent stream
  SubgrammarDag dag = decompose_dag(g);
  KlEngine eng =
      collect_kl_samples(g, dag, q, n, seed ^ 0x5eedf00dull, limits, exec, Bucketing::top_level);
  int ov = eng.label_index.at("OVERHEAD");
  int eos = eng.label_index.at("ROOT-EOS");
  double nn = static_cast<double>(eng.samples.size());
  double sum = 0, sq = 0;
  for (const auto& s : eng.samples) {
    double v = s.bucket[ov] + s.bucket[eos];
    sum += v;
    sq += v * v;
  }
  out.level_term = sum / nn;
  out.level_term_stderr =
      std::sqrt(std::max(0.0, sq / nn - out.level_term * out.level_term) / nn);

  out.numerator = out.level_term;
  double num_var = out.level_term_stderr * out.level_term_stderr;

  // isolated per-proper-subgrammar KLs, string-level, occurrence weighted
  TopLevelSplit split = top_level(g);
  int sub_idx = 0;
  for (const auto& e : split.subgrammars) {
    if (!e.proper) continue;
    Grammar gp = inner_subgrammar(g, e.nonterminal);
    Grammar gq = inner_subgrammar(
        q.q_grammar(), q.q_grammar().require_nonterminal(g.nonterminals[e.nonterminal]));
    Oracle op(gp), oq(gq);
    SamplingTables tables(gp);
    std::vector<double> vals(n);
    std::vector<std::string> errors(n);
    parallel_for(exec, n, [&](std::int64_t i) {
      try {
        DerivationTree t = sample_tree(gp, tables, seed ^ (0xab1eull + sub_idx), i, limits);
        auto tokens = frontier(gp, t);
        // same terminal names, possibly different ids in the two projections
        vals[i] = op.string_logprob(tokens) -
                  oq.string_logprob(gq.tokens_from_strings(gp.tokens_to_strings(tokens)));
      } catch (const std::exception& ex) {
        errors[i] = ex.what();
      }
    });
    double ssum = 0, ssq = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      if (!errors[i].empty()) throw NumericalError(errors[i]);
      ssum += vals[i];
      ssq += vals[i] * vals[i];
    }
    double mean = ssum / n;
    double var = std::max(0.0, ssq / n - mean * mean) / n;
    out.per_subgrammar_kl[g.nonterminals[e.nonterminal]] = e.expected_count * mean;
    out.numerator += e.expected_count * mean;
    num_var += e.expected_count * e.expected_count * var;
    ++sub_idx;
  }
  out.numerator_stderr = std::sqrt(num_var);
  double blow = 1.0 / (1.0 - out.expected_r);
  out.predicted_total = out.numerator * blow;
  out.predicted_stderr = out.numerator_stderr * blow;
  return out;
}

std::vector<RecurrenceSweepPoint> recurrence_sweep(const std::vector<Rational>& ps,
                                                   double delta, std::int64_t n,
                                                   std::uint64_t seed, Exec exec) {
  std::vector<RecurrenceSweepPoint> out;
  for (const Rational& p : ps) {
    Grammar g = make_recursion_grammar(p);
    double pd = p.to_double();
    double qd = pd - delta * std::sqrt(std::max(0.0, pd * (1.0 - pd)));
    if (qd <= 0.5) throw DataError("sweep perturbation pushes q into inconsistency");
    Grammar qg = with_weights(g, {qd, 1.0 - qd});
    SyntheticComposedLm q(std::move(qg));
    RecurrenceSweepPoint pt;
    pt.p = pd;
    pt.q_weight = qd;
    SampleLimits lim;
    lim.max_tokens = 4096;  // rejection must stay negligible near p = 0.55
    lim.max_depth = 4096;
    pt.pred = predict_recurrence(g, q, n, seed, lim, exec);
    out.push_back(std::move(pt));
  }
  return out;
}

LossIdentityReport loss_identity(const Grammar& g, const LanguageModel& q, std::int64_t n,
                                 std::uint64_t seed, const SampleLimits& limits, Exec exec) {
  LossIdentityReport rep;
  SamplingTables tables(g);

  // cross-entropy on its own stream
  {
    std::vector<double> vals(n);
    std::vector<std::string> errors(n);
    parallel_for(exec, n, [&](std::int64_t i) {
      try {
        DerivationTree t = sample_tree(g, tables, seed ^ 0xCE11ull, i, limits);
        auto tokens = frontier(g, t);
        double lp = 0;
        for (double x : q.conditional_logprobs(tokens)) lp += x;
        vals[i] = -lp;
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    });
    double sum = 0, sq = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      if (!errors[i].empty()) throw NumericalError(errors[i]);
      sum += vals[i];
      sq += vals[i] * vals[i];
    }
    rep.ce = sum / n;
    rep.ce_stderr = std::sqrt(std::max(0.0, sq / n - rep.ce * rep.ce) / n);
  }

  KlReport kl = mc_kl(g, q, n, seed ^ 0x1c1ull, limits, exec);
  rep.kl = kl.total;
  rep.kl_stderr = kl.total_stderr;

  EntropyReport ent = derivational_entropy(g);
  rep.ambiguous = ent.ambiguous_warning;
  if (!rep.ambiguous) {
    rep.entropy = ent.derivational_entropy;
    rep.entropy_stderr = 0;
  } else {
    // string entropy by Monte Carlo: the exact derivational figure is only an
    // upper bound once strings admit several derivations
    Oracle oracle(g);
    std::vector<double> vals(n);
    std::vector<std::string> errors(n);
    parallel_for(exec, n, [&](std::int64_t i) {
      try {
        DerivationTree t = sample_tree(g, tables, seed ^ 0xe27ull, i, limits);
        vals[i] = -oracle.string_logprob(frontier(g, t));
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    });
    double sum = 0, sq = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      if (!errors[i].empty()) throw NumericalError(errors[i]);
      sum += vals[i];
      sq += vals[i] * vals[i];
    }
    rep.entropy = sum / n;
    rep.entropy_stderr = std::sqrt(std::max(0.0, sq / n - rep.entropy * rep.entropy) / n);
  }

  rep.gap = std::abs(rep.ce - (rep.kl + rep.entropy));
  rep.combined_stderr =
      std::sqrt(rep.ce_stderr * rep.ce_stderr + rep.kl_stderr * rep.kl_stderr +
                rep.entropy_stderr * rep.entropy_stderr);
  return rep;
}

}  // namespace pcfglab
