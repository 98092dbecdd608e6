// Serial vs OpenMP timing for the data-parallel kernels. Both paths produce
// bit-identical results (covered by the test suite); this harness just
// reports wall time and speedup on the current machine.

#include <chrono>
#include <cstdio>
#include <string>

#include "pcfglab/analysis.hpp"
#include "pcfglab/divergence.hpp"
#include "pcfglab/oracle.hpp"
#include "pcfglab/transformer.hpp"

using namespace pcfglab;

namespace {

using Clock = std::chrono::steady_clock;

template <class F>
double time_s(F&& fn) {
  auto t0 = Clock::now();
  fn();
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void row(const char* name, double serial, double openmp) {
  std::printf("%-34s %10.3fs %10.3fs %8.2fx\n", name, serial, openmp,
              openmp > 0 ? serial / openmp : 0.0);
}

}  // namespace

int main(int argc, char** argv) {
  std::int64_t n = argc > 1 ? std::atoll(argv[1]) : 4000;
  std::printf("kernel                                  serial     openmp  speedup   (threads: %d)\n",
              max_threads());

  Grammar g = load_grammar_file(std::string(PCFGLAB_GRAMMAR_DIR) + "/kl_example_2.pcfg");
  SubgrammarDag dag = decompose_dag(g);
  SampleLimits lim;
  lim.max_tokens = 500;

  {
    double s = time_s([&] { sample_corpus(g, dag, n, 1, lim, Exec::serial); });
    double p = time_s([&] { sample_corpus(g, dag, n, 1, lim, Exec::openmp); });
    row("corpus sampling + annotation", s, p);
  }
  {
    OracleLm q(g);
    double s = time_s([&] { mc_kl(g, q, n, 2, lim, Exec::serial); });
    double p = time_s([&] { mc_kl(g, q, n, 2, lim, Exec::openmp); });
    row("oracle-vs-oracle KL scoring", s, p);
  }
  {
    Corpus corpus = sample_corpus(g, dag, 512, 3, lim, Exec::serial);
    ModelConfig mc;
    mc.layers = 2;
    mc.heads = 2;
    mc.model_dim = 64;
    mc.mlp_dim = 128;
    mc.max_context = 502;
    mc.seed = 4;
    auto train_once = [&](Exec exec) {
      Transformer model(mc, Vocab::for_grammar(g));
      TrainConfig tc;
      tc.steps = 30;
      tc.batch_size = 32;
      tc.exec = exec;
      model.train(corpus, g, tc);
    };
    double s = time_s([&] { train_once(Exec::serial); });
    double p = time_s([&] { train_once(Exec::openmp); });
    row("transformer training (30 steps)", s, p);
  }
  {
    Corpus corpus = sample_corpus(g, dag, 64, 5, lim, Exec::serial);
    ModelConfig mc;
    mc.layers = 2;
    mc.heads = 2;
    mc.model_dim = 64;
    mc.mlp_dim = 128;
    mc.max_context = 502;
    mc.seed = 6;
    Transformer model(mc, Vocab::for_grammar(g));
    double s = time_s([&] { model.evaluate(corpus, g, Exec::serial); });
    double p = time_s([&] { model.evaluate(corpus, g, Exec::openmp); });
    row("transformer evaluation", s, p);
  }
  return 0;
}
