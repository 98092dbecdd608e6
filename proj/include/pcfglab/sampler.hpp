#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pcfglab/grammar.hpp"
#include "pcfglab/parallel.hpp"
#include "pcfglab/rng.hpp"
#include "pcfglab/subgrammar.hpp"

namespace pcfglab {

struct SampleLimits {
  int max_tokens = 512;
  int max_depth = 64;
  int max_resamples = 100;
};

struct SampleStats {
  std::int64_t attempts = 0;
  std::int64_t accepted = 0;
  double acceptance_rate() const {
    return attempts ? static_cast<double>(accepted) / attempts : 1.0;
  }
};

// Rule choice by cumulative-weight inversion against integer thresholds.
// When the per-nonterminal weights share a common denominator that fits, the
// table is exact; otherwise thresholds are 2^62-scaled fixed point. Either
// way draws are integer-only and platform-independent.
class SamplingTables {
 public:
  explicit SamplingTables(const Grammar& g);
  int draw(int nt, RngStream& rng) const;  // returns a rule id

 private:
  struct Row {
    std::vector<int> rule_ids;
    std::vector<std::uint64_t> cum;
    std::uint64_t total = 0;
  };
  std::vector<Row> rows_;
};

// Derivation tree: children align with the nonterminal slots of the chosen
// rule's rhs, in order; terminals are implicit in the rule.
struct DerivationTree {
  struct Node {
    int rule = -1;
    std::vector<Node> kids;
  };
  Node root;
  double log_prob = 0.0;
  int token_count = 0;
  int depth = 0;
};

// Ancestral sampling with rejection on limit breach; the rng stream for
// (seed, index) continues across resamples, so replay is exact.
// Throws NumericalError when max_resamples attempts are all rejected.
DerivationTree sample_tree(const Grammar& g, const SamplingTables& tables,
                           std::uint64_t seed, std::uint64_t index,
                           const SampleLimits& limits = {}, SampleStats* stats = nullptr);

std::vector<int> frontier(const Grammar& g, const DerivationTree& t);
std::vector<int> rule_trace(const DerivationTree& t);  // preorder rule ids
DerivationTree tree_from_trace(const Grammar& g, const std::vector<int>& trace);

// Token sequence plus per-token attribution to subgrammar structure.
// bucket has tokens.size()+1 entries; the last one is the EOS slot.
struct AnnotatedSentence {
  static constexpr int kOverhead = -1;
  static constexpr int kRootEos = -2;

  std::vector<int> tokens;
  std::vector<int> bucket;  // instance id, kOverhead, or kRootEos
  struct Instance {
    int nonterminal = 0;
    int dag_node = 0;
    int begin = 0, end = 0;  // token span [begin, end)
  };
  std::vector<Instance> instances;
  std::vector<std::vector<int>> node_path;  // per slot: dag node ids, root first
  std::vector<int> rule_trace;
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
  double tree_logprob = 0.0;

  // "L2_2#0", "OVERHEAD", "ROOT-EOS"
  std::string bucket_name(const Grammar& g, int slot) const;
  // aggregation key: instance nonterminal name, "OVERHEAD", or "ROOT-EOS"
  std::string bucket_label(const Grammar& g, int slot) const;
};

AnnotatedSentence linearize(const Grammar& g, const SubgrammarDag& dag,
                            const DerivationTree& t);

struct Corpus {
  std::string grammar_name;
  std::uint64_t seed = 0;
  SampleStats stats;
  std::vector<AnnotatedSentence> sentences;
};

// Data-parallel corpus sampling; sentence i always comes from stream
// (seed, i), so the result is identical under both exec policies.
Corpus sample_corpus(const Grammar& g, const SubgrammarDag& dag, std::int64_t n,
                     std::uint64_t seed, const SampleLimits& limits = {},
                     Exec exec = Exec::openmp);

// JSONL round-trip: tokens and buckets as strings, rule trace as ids.
// Malformed lines are reported by number. Reading rebuilds the attribution
// from the rule trace and cross-checks it against the stored fields.
void write_corpus(const Grammar& g, const Corpus& corpus, const std::string& path);
Corpus read_corpus(const Grammar& g, const SubgrammarDag& dag, const std::string& path);

}  // namespace pcfglab
