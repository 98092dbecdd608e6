#pragma once

#include <Eigen/Core>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pcfglab/divergence.hpp"
#include "pcfglab/transformer.hpp"

namespace pcfglab {

// Linear CKA between two activation matrices with aligned rows. Undefined
// (reported, not thrown) when either input is rank zero after centering.
struct CkaValue {
  double value = 0;
  bool defined = false;
};
CkaValue linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

// Per-sublayer CKA between two models on a shared evaluation stream.
struct CkaResult {
  std::vector<double> attention;  // per layer
  std::vector<double> mlp;
  double mean_attention = 0;
  double mean_mlp = 0;
};
CkaResult model_cka(const Transformer& a, const Transformer& b,
                    const std::vector<std::vector<int>>& sentences);

// Mean pairwise CKA across a seed population, with the seed-pair matrices.
struct PopulationCka {
  Eigen::MatrixXd pair_attention;
  Eigen::MatrixXd pair_mlp;
  double mean_attention = 0;
  double mean_mlp = 0;
};
PopulationCka population_cka(const std::vector<const Transformer*>& models,
                             const std::vector<std::vector<int>>& sentences);

// Cosine-similarity protocol: mean-pool sublayer activations per sentence,
// then average pairwise cosines within each class and across the designated
// class pairs, split attention vs MLP, averaged over the given models
// (callers pass the top seed quantile).
struct CosineTable {
  // row label -> (attention, mlp)
  std::map<std::string, std::pair<double, double>> rows;
  std::string to_csv() const;
};
CosineTable cosine_protocol(
    const std::vector<const Transformer*>& models,
    const std::map<std::string, std::vector<std::vector<int>>>& classes,
    const std::vector<std::pair<std::string, std::string>>& cross_pairs);

// Depth-generalization probes on the nested-parentheses grammar: fixed-depth
// repetition "(a)^i(" vs pure deepening "(^{i+1}", optionally behind a
// prefix. The faulty-prefix variant skips the validity check and reuses the
// clean deepening target.
enum class ProbeCase { same_depth, deepening, prefixed, faulty_prefix };

struct DepthProbeSpec {
  ProbeCase kind = ProbeCase::same_depth;
  int i_max = 20;
  std::vector<std::string> prefix_tokens;  // prefixed / faulty variants
  bool use_kl = false;                     // default: total variation distance
};

struct DepthProbeCurve {
  std::string case_id;
  std::string metric;
  std::vector<int> i;
  std::vector<double> error;
  std::string to_csv() const;
};

DepthProbeCurve depth_probe(const LanguageModel& q, const Grammar& g,
                            const DepthProbeSpec& spec);

// --- pretraining study (study.cpp) -----------------------------------------

struct StudyArch {
  std::string name;
  ModelConfig model;
};

struct StudyConfig {
  std::string grammar_path;
  std::string subgrammar_root;
  std::vector<int> pretrain_epoch_variants = {10};
  int continue_epochs = 10;
  int seeds = 30;
  std::vector<StudyArch> archs;
  int corpus_size = 4096;
  int eval_size = 256;
  int batch_size = 64;
  double lr = 3e-4;
  std::int64_t kl_samples = 2000;
  int eval_every = 50;  // retention cadence during continuation
  double top_quantile = 0.25;
  SampleLimits limits;
  Exec exec = Exec::openmp;
  std::string out_dir;
  bool save_checkpoints = false;
};

struct StudyRun {
  std::string arch;
  std::string population;  // "scratch" or "pretrain<k>"
  int pretrain_epochs = 0;
  std::uint64_t seed = 0;
  double final_loss = 0;
  double final_kl = 0;
  double pre_continuation_restricted = 0;  // subgrammar bucket, before switch
  double max_restricted_during_continuation = 0;
  std::vector<std::pair<int, double>> retention;  // (step, restricted loss)
};

struct StudyReport {
  std::vector<StudyRun> runs;
  std::string cka_table_csv;
  std::string cosine_table_csv;
  std::string fig7_csv;  // seed, scratch KL, pretrained KL per arch
  std::string summary_json;
};

StudyReport pretraining_study(const StudyConfig& cfg);

}  // namespace pcfglab
