#pragma once

#include <map>
#include <string>
#include <vector>

#include "pcfglab/lm.hpp"
#include "pcfglab/parallel.hpp"
#include "pcfglab/sampler.hpp"
#include "pcfglab/subgrammar.hpp"

namespace pcfglab {

// Monte-Carlo KL estimate with per-bucket restricted terms. The per-sample
// residual total - sum(buckets) is zero by construction up to float
// reordering; max_residual records the worst case actually seen.
struct KlReport {
  double total = 0;  // nats per sentence
  double total_stderr = 0;
  double per_token = 0;  // nats per (token + EOS slot)
  double per_token_stderr = 0;
  std::map<std::string, double> per_bucket;
  std::map<std::string, double> per_bucket_stderr;
  double max_residual = 0;
  std::int64_t n = 0;
  std::uint64_t seed = 0;
  std::string to_json() const;
};

// Token attribution granularity: top-level subgrammar instances (plus
// OVERHEAD and ROOT-EOS), or the finest level, the emitting DAG-leaf node.
enum class Bucketing { top_level, leaf };

// P-side conditionals come from the exact oracle, so the estimator is also
// correct for ambiguous grammars. A zero Q-probability on a sampled token
// aborts with NumericalError carrying the offending context.
KlReport mc_kl(const Grammar& g, const LanguageModel& q, std::int64_t n, std::uint64_t seed,
               const SampleLimits& limits = {}, Exec exec = Exec::openmp,
               Bucketing bucketing = Bucketing::top_level);

// mc_kl plus the per-sample partition identity, reported explicitly.
struct ResidualReport {
  KlReport kl;
  double max_residual = 0;
};
ResidualReport verify_top_level(const Grammar& g, const LanguageModel& q, std::int64_t n,
                                std::uint64_t seed, const SampleLimits& limits = {},
                                Exec exec = Exec::openmp);

// Finest-level decomposition. The grammar is first rewritten so terminal
// runs become single-rule nonterminals; afterwards every rule must be
// all-nonterminal or all-terminal with the all-terminal rules confined to
// DAG leaves, else the offending rule is named in a DataError.
ResidualReport verify_leaf(const Grammar& g, const LanguageModel& q, std::int64_t n,
                           std::uint64_t seed, const SampleLimits& limits = {},
                           Exec exec = Exec::openmp);

struct RecurrencePrediction {
  double expected_r = 0;
  bool unbounded = false;
  std::map<std::string, double> per_subgrammar_kl;  // isolated, count-weighted
  double level_term = 0;  // root-level overhead + EOS restricted KL
  double level_term_stderr = 0;
  double numerator = 0;
  double numerator_stderr = 0;
  double predicted_total = 0;
  double predicted_stderr = 0;
  double measured_total = 0;
  double measured_stderr = 0;
};

// Splits the KL of a composition-respecting model into one level's terms
// (isolated proper-subgrammar KLs plus the root-level overhead/EOS term,
// measured on independent sample streams) and checks the geometric blow-up
// 1/(1 - E[R]) against the directly measured total.
RecurrencePrediction predict_recurrence(const Grammar& g, const SyntheticComposedLm& q,
                                        std::int64_t n, std::uint64_t seed,
                                        const SampleLimits& limits = {},
                                        Exec exec = Exec::openmp);

struct RecurrenceSweepPoint {
  double p = 0;
  double q_weight = 0;
  RecurrencePrediction pred;
};

// The two-rule family S -> x (p) | ( S and S ) (1-p), swept over p with the
// perturbed model q(p) = p - delta * sqrt(p(1-p)) so the per-expansion KL
// stays roughly constant while the blow-up grows toward p = 1/2.
std::vector<RecurrenceSweepPoint> recurrence_sweep(const std::vector<Rational>& ps,
                                                   double delta, std::int64_t n,
                                                   std::uint64_t seed,
                                                   Exec exec = Exec::openmp);

struct LossIdentityReport {
  double ce = 0, ce_stderr = 0;  // per sentence
  double kl = 0, kl_stderr = 0;
  double entropy = 0, entropy_stderr = 0;  // exact when unambiguous, else MC
  bool ambiguous = false;
  double gap = 0;  // |ce - (kl + entropy)|
  double combined_stderr = 0;
};

// Mean cross-entropy vs measured KL + entropy, each from its own sample
// stream so the identity is a genuine three-way statistical check.
LossIdentityReport loss_identity(const Grammar& g, const LanguageModel& q, std::int64_t n,
                                 std::uint64_t seed, const SampleLimits& limits = {},
                                 Exec exec = Exec::openmp);

// --- outer-subgrammar split (outer_split.cpp) ------------------------------

struct OuterSplitReport {
  double lhs = 0;     // D(P || Q)
  double term_a = 0;  // P(A) D(P|A || Q|A)
  double term_abar = 0;
  double term_star = 0;  // binary membership KL
  double p_a = 0, q_a = 0;
  double residual = 0;
  double tail_bound = 0;  // rigorous bound on enumeration truncation
  int length_cap = 0;
  double p_a_mc = 0, p_a_mc_stderr = 0;  // recognizer-based cross-check
};

// Both sides computed by exact bounded-length enumeration (dynamic programs
// over string length, one per conditioned grammar); P and Q must share rule
// structure, be unambiguous (spot-checked by sampling) and epsilon-free.
// Throws NumericalError when the tail mass at the cap exceeds tail_budget.
OuterSplitReport verify_outer(const Grammar& p, const std::vector<int>& keep_rules,
                              const Grammar& q, int length_cap = 800,
                              double tail_budget = 1e-6, std::int64_t mc_n = 4000,
                              std::uint64_t seed = 1234);

}  // namespace pcfglab
