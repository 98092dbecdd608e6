// Acceptance suite: every criterion prints one [PASS]/[FAIL] line with the
// measured numbers; the process exits with the number of failures.
// `acceptance --criterion N` runs a single criterion.

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <Eigen/QR>

#include "pcfglab/analysis.hpp"
#include "pcfglab/arith.hpp"
#include "pcfglab/divergence.hpp"
#include "pcfglab/errors.hpp"
#include "pcfglab/oracle.hpp"
#include "pcfglab/transformer.hpp"
#include "support/enum_oracle.hpp"
#include "support/test_paths.hpp"

using namespace pcfglab;
using namespace pcfglab::testing;

namespace {

const char* kBundled[] = {"nested_parens", "abc", "kl_example_1", "kl_example_2",
                          "deeper_recursion", "unified_example", "recursion_composition"};

Grammar load(const std::string& name) { return load_grammar_file(grammar_path(name)); }

struct Check {
  bool ok = true;
  std::ostringstream detail;
  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail << "  FAILED: " << what << "\n";
    }
  }
  void note(const std::string& what) { detail << "  " << what << "\n"; }
};

Transformer train_transformer(const Grammar& g, int layers, int dim, int mlp, int steps,
                              int batch, double lr, std::uint64_t seed, std::int64_t corpus_n,
                              int max_tokens) {
  SubgrammarDag dag = decompose_dag(g);
  SampleLimits lim;
  lim.max_tokens = max_tokens;
  Corpus corpus = sample_corpus(g, dag, corpus_n, seed ^ 0xc0ffee, lim);
  ModelConfig mc;
  mc.layers = layers;
  mc.heads = 2;
  mc.model_dim = dim;
  mc.mlp_dim = mlp;
  mc.max_context = max_tokens + 2;
  mc.seed = seed;
  Transformer model(mc, Vocab::for_grammar(g));
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = batch;
  tc.opt.lr = lr;
  tc.shuffle_seed = seed;
  model.train(corpus, g, tc);
  return model;
}

// --- criterion 1: Thm 2 / Cor 3 partition identity --------------------------
Check criterion_1() {
  Check c;
  SampleLimits lim;
  lim.max_tokens = 500;
  for (const char* name : kBundled) {
    Grammar g = load(name);
    OracleLm oracle_model(g);
    PerturbSpec spec;
    spec.seed = 17;
    spec.magnitude = 0.25;
    SyntheticComposedLm synthetic(g, spec);
    Transformer trained = train_transformer(g, 2, 48, 96, 500, 32, 1e-3, 11, 2000, 500);
    struct Entry {
      const LanguageModel* q;
      const char* kind;
    } entries[] = {{&oracle_model, "oracle"}, {&synthetic, "synthetic"}, {&trained, "500-step"}};
    for (auto& e : entries) {
      ResidualReport rep = verify_top_level(g, *e.q, 10000, 5, lim);
      std::ostringstream what;
      what << name << "/" << e.kind << " residual " << rep.max_residual;
      c.require(rep.max_residual < 1e-9, what.str() + " >= 1e-9");
      c.note(what.str());
    }
  }
  return c;
}

// --- criterion 2: chart parser vs bounded brute-force enumeration -----------
Check criterion_2() {
  Check c;
  for (const char* name : kBundled) {
    Grammar g = load(name);
    Oracle o(g);
    bool depth_hit = false;
    std::vector<int> filter;
    if (std::string(name) == "deeper_recursion")
      filter = g.tokens_from_strings({"a", "b", "c", "sL1", "eL1", "sL2", "eL2a", "sL3",
                                      "eL3", "sL4", "eL4", "(", ")"});
    auto table = enum_strings(g, 10, 14, &depth_hit, filter);
    c.require(!depth_hit, std::string(name) + ": depth cap truncated the enumeration");
    double worst = 0;
    for (const auto& [tokens, prob] : table)
      worst = std::max(worst, std::abs(std::exp(o.string_logprob(tokens)) - prob));
    c.require(worst < 1e-9,
              std::string(name) + ": string probability gap " + std::to_string(worst));
    c.note(std::string(name) + ": " + std::to_string(table.size()) +
           " strings, worst string gap " + std::to_string(worst));
  }
  // prefix and next-token cross-checks where the enumeration tail is provably
  // tiny (nested parentheses)
  Grammar g = load("nested_parens");
  Oracle o(g);
  double worst_prefix = 0, worst_next = 0;
  std::vector<std::vector<std::string>> prefixes = {
      {"("}, {"(", "a"}, {"(", "("}, {"(", "a", ")"}, {"(", "(", "a", ")"},
      {"(", "a", ")", "("}};
  for (const auto& p : prefixes) {
    auto ids = g.tokens_from_strings(p);
    EnumResult e = enum_prefix_prob(g, ids, 90);
    if (e.pruned_bound > 1e-11) continue;
    worst_prefix =
        std::max(worst_prefix, std::abs(std::exp(o.prefix_logprob(ids)) - e.prob));
    TokenDistribution d = o.next_token_dist(ids);
    for (int t = 0; t < g.num_terminals(); ++t) {
      auto ext = ids;
      ext.push_back(t);
      EnumResult num = enum_prefix_prob(g, ext, 90);
      worst_next = std::max(worst_next, std::abs(d.terminal_probs[t] - num.prob / e.prob));
    }
    EnumResult eos = enum_string_prob(g, ids, 40);
    worst_next = std::max(worst_next, std::abs(d.eos - eos.prob / e.prob));
  }
  c.require(worst_prefix < 1e-9, "prefix probability gap " + std::to_string(worst_prefix));
  c.require(worst_next < 1e-9, "next-token gap " + std::to_string(worst_next));
  c.note("worst prefix gap " + std::to_string(worst_prefix) + ", worst next-token gap " +
         std::to_string(worst_next));
  return c;
}

// --- criterion 3: zero-KL baseline -------------------------------------------
Check criterion_3() {
  Check c;
  SampleLimits lim;
  lim.max_tokens = 2048;
  lim.max_depth = 512;
  for (const char* name : kBundled) {
    Grammar g = load(name);
    OracleLm q(g);
    KlReport rep = mc_kl(g, q, 10000, 123, lim);
    std::ostringstream what;
    what << name << ": total " << rep.total << " +- " << rep.total_stderr;
    c.require(std::abs(rep.total) <= std::max(3 * rep.total_stderr, 1e-12), what.str());
    c.note(what.str());
  }
  return c;
}

// --- criterion 4: Thm 5 recurrence ---------------------------------------------
Check criterion_4() {
  Check c;
  std::vector<Rational> ps = {{11, 20}, {3, 5}, {3, 4}, {9, 10}, {1, 1}};
  auto sweep = recurrence_sweep(ps, 0.08, 50000, 2024);
  double prev = -1;
  for (auto it = sweep.rbegin(); it != sweep.rend(); ++it) {  // p descending
    const auto& pt = *it;
    double gap = std::abs(pt.pred.predicted_total - pt.pred.measured_total);
    double comb = std::sqrt(pt.pred.predicted_stderr * pt.pred.predicted_stderr +
                            pt.pred.measured_stderr * pt.pred.measured_stderr);
    std::ostringstream what;
    what << "p=" << pt.p << ": predicted " << pt.pred.predicted_total << " measured "
         << pt.pred.measured_total << " (3*stderr " << 3 * comb << ")";
    c.require(gap <= std::max(3 * comb, 1e-12), what.str());
    prev = pt.pred.measured_total;
    (void)prev;
    c.note(what.str());
  }
  // the emitted curve grows strictly as p drops toward 1/2
  for (std::size_t i = 1; i < sweep.size(); ++i)
    c.require(sweep[i - 1].pred.measured_total > sweep[i].pred.measured_total,
              "measured curve does not increase as p decreases");
  return c;
}

// --- criterion 5: Prop 1 loss identity -----------------------------------------
Check criterion_5() {
  Check c;
  Grammar g = load("nested_parens");
  SampleLimits lim;
  lim.max_tokens = 2048;
  lim.max_depth = 512;
  SampleLimits trained_lim;
  trained_lim.max_tokens = 500;
  OracleLm oracle_model(g);
  UniformLm uniform(g.num_terminals());
  Transformer trained = train_transformer(g, 2, 64, 128, 1500, 32, 1e-3, 21, 4000, 500);
  struct Entry {
    const LanguageModel* q;
    const char* kind;
    SampleLimits lim;
  } entries[] = {{&oracle_model, "oracle", lim},
                 {&uniform, "uniform", lim},
                 {&trained, "trained", trained_lim}};
  for (auto& e : entries) {
    LossIdentityReport rep = loss_identity(g, *e.q, 50000, 31, e.lim);
    std::ostringstream what;
    what << e.kind << ": CE " << rep.ce << " vs KL+H " << rep.kl + rep.entropy << " gap "
         << rep.gap << " (3*stderr " << 3 * rep.combined_stderr << ")";
    c.require(rep.gap < 3 * rep.combined_stderr, what.str());
    c.note(what.str());
  }
  return c;
}

// --- criterion 6: Thm 8 outer split ---------------------------------------------
Check criterion_6() {
  Check c;
  Grammar p = load("nested_parens");
  PerturbSpec spec;
  spec.seed = 29;
  spec.magnitude = 0.15;
  Grammar q = perturb_weights(p, spec);
  OuterSplitReport rep = verify_outer(p, {0, 2, 3}, q, 800, 1e-6, 10000, 7);
  std::ostringstream what;
  what << "lhs " << rep.lhs << " = " << rep.term_a << " + " << rep.term_abar << " + "
       << rep.term_star << ", residual " << rep.residual << ", 2x tail bound "
       << 2 * rep.tail_bound;
  c.require(rep.residual < std::max(2 * rep.tail_bound, 1e-9), what.str());
  c.require(std::abs(rep.p_a_mc - rep.p_a) < 4 * std::max(rep.p_a_mc_stderr, 1e-4),
            "recognizer membership cross-check");
  c.note(what.str());
  return c;
}

// --- criterion 7: Thm 1 DAG on deeper recursion ----------------------------------
Check criterion_7() {
  Check c;
  Grammar g = load("deeper_recursion");
  SubgrammarDag d = decompose_dag(g);
  c.require(d.nodes.size() == 6, "expected 6 nodes");
  auto node_name = [&](int id) { return d.label_string(g, id); };
  std::set<std::pair<std::string, std::string>> edges;
  for (auto [a, b] : d.edges) edges.insert({node_name(a), node_name(b)});
  std::set<std::pair<std::string, std::string>> chain = {
      {"{L0}", "{L1}"}, {"{L1}", "{L2}"}, {"{L2}", "{L3}"}, {"{L3}", "{L4}"}, {"{L4}", "{V}"}};
  for (auto& e : chain)
    c.require(edges.count(e) == 1, "missing chain edge " + e.first + "->" + e.second);
  for (const char* nt : {"L0", "L1", "L2", "L3"})
    c.require(d.nodes[d.node_of[g.require_nonterminal(nt)]].self_loop,
              std::string("missing self-loop on ") + nt);
  for (const char* nt : {"L4", "V"})
    c.require(!d.nodes[d.node_of[g.require_nonterminal(nt)]].self_loop,
              std::string("unexpected self-loop on ") + nt);
  c.note("chain {L0}->{L1}->{L2}->{L3}->{L4}->{V} with self-loops on L0..L3");

  // invariance under rule reordering (full grammar, alternatives permuted)
  std::string text = print_grammar(g);
  Grammar g2 = load("deeper_recursion");
  for (auto& row : g2.rules_of) std::reverse(row.begin(), row.end());
  {
    // rebuild with reversed alternatives through the printer
    std::ostringstream reordered;
    reordered << "start: " << g2.nonterminals[g2.start] << "\n";
    for (int nt = 0; nt < g2.num_nonterminals(); ++nt) {
      reordered << g2.nonterminals[nt] << " ->";
      bool first = true;
      for (int r : g2.rules_of[nt]) {
        if (!first) reordered << " |";
        first = false;
        for (const auto& s : g2.rules[r].rhs) {
          if (s.terminal)
            reordered << " \"" << g2.terminals[s.id] << "\"";
          else
            reordered << " " << g2.nonterminals[s.id];
        }
        char buf[32];
        std::snprintf(buf, sizeof buf, " [%.6f]", g2.rules[r].weight);
        reordered << buf;
      }
      reordered << "\n";
    }
    Grammar g3 = load_grammar_text(reordered.str(), "reordered");
    SubgrammarDag d3 = decompose_dag(g3);
    std::set<std::pair<std::string, std::string>> edges3;
    for (auto [a, b] : d3.edges)
      edges3.insert({d3.label_string(g3, a), d3.label_string(g3, b)});
    c.require(edges3 == edges, "rule reordering changed the DAG");
    bool loops_same = true;
    for (int nt = 0; nt < g.num_nonterminals(); ++nt)
      loops_same = loops_same &&
                   d.nodes[d.node_of[nt]].self_loop ==
                       d3.nodes[d3.node_of[g3.require_nonterminal(g.nonterminals[nt])]].self_loop;
    c.require(loops_same, "rule reordering changed self-loops");
  }

  // invariance under renaming (up to the label bijection)
  Grammar g4 = g;
  for (auto& name : g4.nonterminals) name = "X" + name;
  g4.rebuild_index();
  SubgrammarDag d4 = decompose_dag(g4);
  std::set<std::pair<std::string, std::string>> mapped;
  for (auto [a, b] : d.edges) {
    auto rename = [](std::string s) { return "{X" + s.substr(1); };
    mapped.insert({rename(node_name(a)), rename(node_name(b))});
  }
  std::set<std::pair<std::string, std::string>> edges4;
  for (auto [a, b] : d4.edges) edges4.insert({d4.label_string(g4, a), d4.label_string(g4, b)});
  c.require(edges4 == mapped, "renaming changed the DAG beyond the label bijection");
  c.note("DAG invariant under rule reordering and nonterminal renaming");
  return c;
}

// --- criterion 8: transformer correctness ----------------------------------------
Check criterion_8() {
  Check c;
  Grammar g = load("nested_parens");
  Vocab v = Vocab::for_grammar(g);
  ModelConfig tiny;
  tiny.layers = 1;
  tiny.heads = 2;
  tiny.model_dim = 8;
  tiny.mlp_dim = 12;
  tiny.max_context = 16;
  tiny.seed = 5;
  Transformer model(tiny, v);
  std::vector<std::vector<int>> batch = {g.tokens_from_strings({"(", "a", ")"}),
                                         g.tokens_from_strings({"(", "(", "a", ")", ")"})};
  double err = model.grad_check(batch);
  c.require(err < 1e-4, "grad check " + std::to_string(err));
  c.note("grad check max relative error " + std::to_string(err));

  ModelConfig mc = tiny;
  mc.max_context = 64;
  Transformer m2(mc, v);
  auto s1 = g.tokens_from_strings({"(", "(", "a", ")", ")"});
  auto s2 = g.tokens_from_strings({"(", "(", "(", "a", ")"});
  auto l1 = m2.conditional_logprobs(s1);
  auto l2 = m2.conditional_logprobs(s2);
  c.require(l1[0] == l2[0] && l1[1] == l2[1], "causal mask: shared-prefix logits differ");
  c.note("causal-mask bit-exactness holds on shared prefixes");

  SubgrammarDag dag = decompose_dag(g);
  SampleLimits lim;
  lim.max_tokens = 60;
  Corpus corpus = sample_corpus(g, dag, 256, 3, lim, Exec::serial);
  auto run_train = [&](Exec exec) {
    Transformer m(mc, v);
    TrainConfig tc;
    tc.steps = 15;
    tc.batch_size = 16;
    tc.exec = exec;
    tc.log_every = 1;
    return m.train(corpus, g, tc);
  };
  auto a = run_train(Exec::serial);
  auto b = run_train(Exec::serial);
  auto p = run_train(Exec::openmp);
  bool same = a.size() == b.size() && a.size() == p.size();
  for (std::size_t i = 0; same && i < a.size(); ++i)
    same = a[i].loss == b[i].loss && a[i].loss == p[i].loss;
  c.require(same, "fixed-seed training loss curves are not bit-identical");
  c.note("loss curves bit-identical across reruns and execution policies");
  return c;
}

// --- criterion 9: depth generalization --------------------------------------------
Check criterion_9() {
  Check c;
  Grammar g = load("nested_parens");
  Transformer model = train_transformer(g, 2, 128, 512, 4000, 32, 1e-3, 7, 8192, 500);
  DepthProbeSpec same;
  same.kind = ProbeCase::same_depth;
  same.i_max = 20;
  DepthProbeSpec deep;
  deep.kind = ProbeCase::deepening;
  deep.i_max = 20;
  DepthProbeCurve ci = depth_probe(model, g, same);
  DepthProbeCurve cii = depth_probe(model, g, deep);
  double e1 = ci.error.at(20), e2 = cii.error.at(20);
  std::ostringstream what;
  what << "TV at i=20: same-depth " << e1 << ", deepening " << e2;
  c.require(e1 < 0.1, "same-depth error at i=20 is " + std::to_string(e1) + " (>= 0.1)");
  c.require(e2 >= 3 * e1,
            "deepening error " + std::to_string(e2) + " is below 3x " + std::to_string(e1));
  c.note(what.str());
  return c;
}

// --- criterion 10: pretraining retention + CKA properties --------------------------
Check criterion_10() {
  Check c;
  Grammar g = load("abc");
  struct Target {
    const char* root;
    SpanPosition expected;
  } targets[] = {{"L1a", SpanPosition::prefix},
                 {"L1b", SpanPosition::infix},
                 {"L1c", SpanPosition::suffix}};
  SubgrammarDag dag = decompose_dag(g);
  SampleLimits lim;
  lim.max_tokens = 500;
  Corpus full_corpus = sample_corpus(g, dag, 3000, 41, lim);
  Corpus eval_corpus = sample_corpus(g, dag, 400, 42, lim);
  for (auto& t : targets) {
    c.require(classify_position(g, t.root) == t.expected,
              std::string(t.root) + " position classification");
    Grammar sub = inner_subgrammar(g, t.root);
    SubgrammarDag sub_dag = decompose_dag(sub);
    Corpus sub_raw = sample_corpus(sub, sub_dag, 3000, 43, lim);
    Corpus sub_corpus;
    sub_corpus.grammar_name = g.name;
    for (const auto& s : sub_raw.sentences) {
      AnnotatedSentence t2;
      t2.tokens = g.tokens_from_strings(sub.tokens_to_strings(s.tokens));
      t2.bucket.assign(t2.tokens.size(), AnnotatedSentence::kOverhead);
      t2.bucket.push_back(AnnotatedSentence::kRootEos);
      t2.node_path.assign(t2.tokens.size() + 1, {0});
      sub_corpus.sentences.push_back(std::move(t2));
    }
    ModelConfig mc;
    mc.layers = 2;
    mc.heads = 2;
    mc.model_dim = 64;
    mc.mlp_dim = 128;
    mc.max_context = 502;
    mc.seed = 1234;
    Transformer model(mc, Vocab::for_grammar(g));
    TrainConfig pre;
    pre.steps = 500;
    pre.batch_size = 32;
    pre.opt.lr = 1e-3;
    pre.shuffle_seed = 1;
    model.train(sub_corpus, g, pre);
    double before = model.evaluate(eval_corpus, g).bucket_ce.at(t.root);
    double worst = 0;
    for (int chunk = 0; chunk < 8; ++chunk) {
      TrainConfig cont;
      cont.steps = 100;
      cont.batch_size = 32;
      cont.opt.lr = 1e-3;
      cont.shuffle_seed = 100 + chunk;
      model.train(full_corpus, g, cont);
      worst = std::max(worst, model.evaluate(eval_corpus, g).bucket_ce.at(t.root));
    }
    std::ostringstream what;
    what << t.root << " (" << to_string(t.expected) << "): restricted loss before "
         << before << ", worst during continuation " << worst;
    c.require(worst <= 1.10 * before, what.str() + " -- regressed by more than 10%");
    c.note(what.str());
  }

  // CKA property suite at the stated tolerances
  RngStream rng(5, 0);
  Eigen::MatrixXd x(40, 8);
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) x(i, j) = rng.gaussian();
  CkaValue self = linear_cka(x, x);
  c.require(self.defined && std::abs(self.value - 1.0) < 1e-9, "CKA(X,X) = 1");
  Eigen::MatrixXd r(8, 8);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) r(i, j) = rng.gaussian();
  Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(r).householderQ();
  c.require(std::abs(linear_cka(x, x * q).value - 1.0) < 1e-9, "orthogonal invariance");
  c.require(std::abs(linear_cka(x, 2.5 * x).value - 1.0) < 1e-9, "scale invariance");
  Eigen::MatrixXd y(40, 8);
  for (int i = 0; i < y.rows(); ++i)
    for (int j = 0; j < y.cols(); ++j) y(i, j) = rng.gaussian();
  double v = linear_cka(x, y).value;
  c.require(v >= 0.0 && v <= 1.0, "CKA within [0,1]");
  c.note("CKA identities and invariances hold to 1e-9");

  // study emits tables in the published schemas
  StudyConfig cfg;
  cfg.grammar_path = grammar_path("abc");
  cfg.subgrammar_root = "L1b";
  cfg.pretrain_epoch_variants = {1};
  cfg.continue_epochs = 1;
  cfg.seeds = 2;
  StudyArch arch;
  arch.name = "tiny";
  arch.model.layers = 1;
  arch.model.heads = 2;
  arch.model.model_dim = 16;
  arch.model.mlp_dim = 24;
  arch.model.max_context = 502;
  cfg.archs = {arch};
  cfg.corpus_size = 64;
  cfg.eval_size = 16;
  cfg.batch_size = 16;
  cfg.kl_samples = 50;
  cfg.eval_every = 2;
  cfg.limits = lim;
  cfg.out_dir = "acceptance_study_out";
  StudyReport rep = pretraining_study(cfg);
  c.require(rep.runs.size() == 4, "study bookkeeping: seeds x populations x archs");
  c.require(rep.cka_table_csv.find("sequences,row") == 0 &&
                rep.cka_table_csv.find("pretraining_only") != std::string::npos,
            "CKA table schema");
  c.require(rep.cosine_table_csv.find("population,class,attention,mlp") == 0,
            "cosine table schema");
  c.note("study tables emitted in the published schemas");
  std::filesystem::remove_all("acceptance_study_out");
  return c;
}

// --- criterion 11: verbatim arithmetic expressions ----------------------------------
Check criterion_11() {
  Check c;
  auto read = [](const std::string& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  arith::Rat nondeep = arith::eval_exact(read(data_path("appendix_nondeep_expr.txt")));
  c.require(nondeep == arith::Rat(707449, 1260),
            "non-deep chain evaluates to " + nondeep.get_str() + ", expected 707449/1260");
  c.note("non-deep chain = " + nondeep.get_str());
  arith::Rat deep = arith::eval_exact(read(data_path("appendix_deep_expr.txt")));
  c.require(deep == arith::Rat(892410719, 448320600),
            "deep expression evaluates to " + deep.get_str() +
                "; the printed reference value 892410719/448320600 does not match the "
                "printed expression (the two are mutually inconsistent in the source); "
                "the evaluator is verified against an independent implementation");
  c.note("deep expression = " + deep.get_str());
  return c;
}

// --- criterion 12: sampling statistics ----------------------------------------------
Check criterion_12() {
  Check c;
  SampleLimits lim;
  lim.max_tokens = 4096;
  lim.max_depth = 1024;
  for (const char* name : kBundled) {
    Grammar g = load(name);
    double expect_len = expected_length(g);
    double expect_h = derivational_entropy(g, 0).derivational_entropy;
    SamplingTables tables(g);
    const std::int64_t n = 100000;
    double len_sum = 0, len_sq = 0, h_sum = 0, h_sq = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      DerivationTree t = sample_tree(g, tables, 2718, i, lim);
      len_sum += t.token_count;
      len_sq += double(t.token_count) * t.token_count;
      h_sum += -t.log_prob;
      h_sq += t.log_prob * t.log_prob;
    }
    double len_mean = len_sum / n;
    double len_se = std::sqrt((len_sq / n - len_mean * len_mean) / n);
    double h_mean = h_sum / n;
    double h_se = std::sqrt((h_sq / n - h_mean * h_mean) / n);
    std::ostringstream what;
    what << name << ": length " << len_mean << " vs " << expect_len << " (3se " << 3 * len_se
         << "), -logprob " << h_mean << " vs " << expect_h << " (3se " << 3 * h_se << ")";
    c.require(std::abs(len_mean - expect_len) < 3 * len_se, what.str() + " [length]");
    c.require(std::abs(h_mean - expect_h) < 3 * h_se, what.str() + " [entropy]");
    c.note(what.str());
  }
  return c;
}

struct Criterion {
  int id;
  const char* name;
  std::function<Check()> fn;
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i)
    if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc) only = std::atoi(argv[i + 1]);

  std::vector<Criterion> criteria = {
      {1, "decomposition identity (top-level partition, three model kinds)", criterion_1},
      {2, "oracle matches bounded brute-force enumeration", criterion_2},
      {3, "zero-KL baseline against the oracle model", criterion_3},
      {4, "expected-recurrence prediction and sweep monotonicity", criterion_4},
      {5, "loss identity: cross-entropy = KL + entropy", criterion_5},
      {6, "outer-subgrammar three-term split", criterion_6},
      {7, "DAG decomposition of the deep chain, invariances", criterion_7},
      {8, "transformer gradients, causality, determinism", criterion_8},
      {9, "depth generalization gap at i = 20", criterion_9},
      {10, "pretraining retention and CKA properties", criterion_10},
      {11, "verbatim arithmetic expressions", criterion_11},
      {12, "sampling statistics vs exact moments", criterion_12},
  };

  int failures = 0;
  for (auto& cr : criteria) {
    if (only != 0 && cr.id != only) continue;
    auto t0 = std::chrono::steady_clock::now();
    Check c;
    try {
      c = cr.fn();
    } catch (const std::exception& e) {
      c.ok = false;
      c.detail << "  EXCEPTION: " << e.what() << "\n";
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (c.ok ? "[PASS]" : "[FAIL]") << " criterion " << cr.id << ": " << cr.name
              << " (" << static_cast<int>(secs) << "s)\n"
              << c.detail.str();
    std::cout.flush();
    failures += c.ok ? 0 : 1;
  }
  return failures;
}
