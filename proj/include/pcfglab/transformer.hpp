#pragma once

#include <Eigen/Core>
#include <map>
#include <string>
#include <vector>

#include "pcfglab/lm.hpp"
#include "pcfglab/parallel.hpp"
#include "pcfglab/sampler.hpp"

namespace pcfglab {

struct ModelConfig {
  int layers = 2;
  int heads = 2;
  int model_dim = 128;
  int mlp_dim = 512;
  int max_context = 512;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  bool tied_output = false;
};

struct OptimizerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_steps = 100;
};

struct TrainConfig {
  OptimizerConfig opt;
  int batch_size = 64;
  int steps = 0;    // either steps or epochs must be set
  int epochs = 0;   // epochs of the corpus, rounded up to whole batches
  std::uint64_t shuffle_seed = 0;
  Exec exec = Exec::openmp;
  int log_every = 25;
};

struct TrainLogRow {
  int step = 0;
  double loss = 0;  // mean nats/token over the batch, EOS included
  std::map<std::string, double> bucket_loss;
  double lr = 0;
  double wallclock_s = 0;
};

struct EvalResult {
  double mean_ce = 0;  // nats per token+EOS slot
  double total_ce = 0;
  std::int64_t slots = 0;
  std::map<std::string, double> bucket_ce;           // mean per bucket label
  std::map<std::string, std::int64_t> bucket_slots;
};

// Per-sublayer activations for one sentence: layers x {attention, mlp},
// rows = token positions (BOS excluded).
struct ActivationRecord {
  std::vector<Eigen::MatrixXd> attention;  // one per layer
  std::vector<Eigen::MatrixXd> mlp;
};

// Decoder-only transformer: pre-norm residual blocks, causal attention,
// learned positions, exact-GELU MLP, float64 throughout, explicit
// backpropagation. Deterministic given (config.seed, corpus, train config).
class Transformer : public LanguageModel {
 public:
  Transformer(const ModelConfig& cfg, const Vocab& vocab);

  const ModelConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  int step() const { return step_; }
  std::int64_t parameter_count() const;

  // LanguageModel surface. Sequences longer than max_context - 2 raise
  // DataError ("context overflow").
  int num_terminals() const override { return vocab_.n_terminals; }
  TokenDistribution next_dist(const std::vector<int>& prefix) const override;
  std::vector<double> conditional_logprobs(const std::vector<int>& tokens) const override;

  std::vector<TrainLogRow> train(const Corpus& corpus, const Grammar& g, const TrainConfig& cfg);
  EvalResult evaluate(const Corpus& corpus, const Grammar& g, Exec exec = Exec::openmp) const;

  ActivationRecord capture_activations(const std::vector<int>& tokens) const;

  // mean-CE gradients for a batch of sequences (tests, diagnostics)
  std::vector<Eigen::MatrixXd> batch_gradients(
      const std::vector<std::vector<int>>& batch) const;

  // max relative error of analytic vs central-difference gradients over every
  // parameter; keep the model tiny (dim <= 16, <= 8 tokens)
  double grad_check(const std::vector<std::vector<int>>& tiny_batch, double h = 1e-4);

  void save(const std::string& path) const;
  static Transformer load(const std::string& path);

  // named parameter access (tests, optimizer introspection)
  const std::vector<Eigen::MatrixXd>& params() const { return w_; }
  std::vector<Eigen::MatrixXd>& mutable_params() { return w_; }
  const std::vector<std::string>& param_names() const { return names_; }

 private:
  struct Cache;  // per-sequence forward intermediates (transformer.cpp)

  Eigen::MatrixXd forward(const std::vector<int>& ids, Cache* cache,
                          ActivationRecord* record = nullptr,
                          RngStream* dropout_rng = nullptr) const;
  double sequence_loss_and_grads(const std::vector<int>& tokens,
                                 const std::vector<std::string>* bucket_labels,
                                 std::vector<Eigen::MatrixXd>* grads,
                                 std::map<std::string, std::pair<double, std::int64_t>>*
                                     bucket_sums,
                                 RngStream* dropout_rng = nullptr) const;
  std::vector<int> with_bos(const std::vector<int>& tokens) const;
  void adam_step(const std::vector<Eigen::MatrixXd>& grads, const OptimizerConfig& opt);

  ModelConfig cfg_;
  Vocab vocab_;
  std::vector<Eigen::MatrixXd> w_;      // parameters
  std::vector<std::string> names_;
  std::vector<Eigen::MatrixXd> m_, v_;  // Adam state
  int step_ = 0;

  // parameter indices
  struct Layout;
  int idx(const std::string& name) const;
};

}  // namespace pcfglab
