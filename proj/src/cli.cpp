#include "pcfglab/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pcfglab/analysis.hpp"
#include "pcfglab/arith.hpp"
#include "pcfglab/divergence.hpp"
#include "pcfglab/errors.hpp"
#include "pcfglab/oracle.hpp"
#include "pcfglab/transformer.hpp"

namespace pcfglab {

namespace {

namespace fs = std::filesystem;

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << body;
}

// every run with an output directory drops the resolved options beside it
void write_resolved_config(const std::string& out_dir, const nlohmann::json& resolved) {
  if (out_dir.empty()) return;
  fs::create_directories(out_dir);
  write_file(out_dir + "/resolved_config.json", resolved.dump(2) + "\n");
}

std::uint64_t resolve_seed(std::int64_t seed_opt, nlohmann::json& resolved) {
  std::uint64_t seed;
  if (seed_opt >= 0) {
    seed = static_cast<std::uint64_t>(seed_opt);
  } else {
    seed = std::random_device{}();
    std::cout << "generated seed: " << seed << "\n";
  }
  resolved["seed"] = seed;
  return seed;
}

// --config FILE: JSON keys become --key=value arguments; unknown keys are
// rejected by the regular option parser
std::vector<std::string> expand_config(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] != "--config") continue;
    if (i + 1 >= args.size()) throw DataError("--config needs a file argument");
    nlohmann::json j = nlohmann::json::parse(slurp(args[i + 1]));
    if (!j.is_object()) throw DataError("config file must hold a JSON object");
    std::vector<std::string> extra;
    for (auto& [key, value] : j.items()) {
      if (value.is_array()) {
        for (auto& v : value)
          extra.push_back("--" + key + "=" + (v.is_string() ? v.get<std::string>() : v.dump()));
      } else if (value.is_string()) {
        extra.push_back("--" + key + "=" + value.get<std::string>());
      } else {
        extra.push_back("--" + key + "=" + value.dump());
      }
    }
    args.erase(args.begin() + i, args.begin() + i + 2);
    args.insert(args.begin() + i, extra.begin(), extra.end());
    break;
  }
  return args;
}

std::unique_ptr<LanguageModel> make_model(const std::string& spec, const Grammar& g,
                                          std::uint64_t perturb_seed, double perturb_magnitude,
                                          const std::vector<std::string>& perturb_targets) {
  if (spec == "oracle") return std::make_unique<OracleLm>(g);
  if (spec == "uniform") return std::make_unique<UniformLm>(g.num_terminals());
  if (spec == "synthetic") {
    PerturbSpec p;
    p.seed = perturb_seed;
    p.magnitude = perturb_magnitude;
    p.targets = perturb_targets;
    return std::make_unique<SyntheticComposedLm>(g, p);
  }
  if (spec.rfind("ckpt:", 0) == 0) {
    auto model = std::make_unique<Transformer>(Transformer::load(spec.substr(5)));
    if (model->num_terminals() != g.num_terminals())
      throw DataError("checkpoint vocabulary does not match the grammar");
    return model;
  }
  throw DataError("unknown model spec '" + spec + "' (oracle|uniform|synthetic|ckpt:PATH)");
}

std::string dist_to_string(const Grammar& g, const TokenDistribution& d) {
  std::vector<std::pair<double, std::string>> rows;
  for (std::size_t t = 0; t < d.terminal_probs.size(); ++t)
    if (d.terminal_probs[t] > 0) rows.push_back({d.terminal_probs[t], g.terminals[t]});
  if (d.eos > 0) rows.push_back({d.eos, "<eos>"});
  std::sort(rows.rbegin(), rows.rend());
  std::ostringstream out;
  for (auto& [p, name] : rows) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-14s %.9f\n", name.c_str(), p);
    out << buf;
  }
  return out.str();
}

std::string kl_curve_csv_header(const std::vector<std::string>& buckets) {
  std::string h = "step,total,total_stderr";
  for (const auto& b : buckets) h += "," + b + "," + b + "_stderr";
  return h + "\n";
}

int run(int argc, const char* const* argv) {
  std::cout << std::setprecision(15);
  CLI::App app{"PCFG laboratory: exact oracles, sampling, KL decomposition, "
               "trainable transformer, analysis probes"};
  app.require_subcommand(1);

  // ---- validate ----
  std::string g_path;
  auto* validate_cmd = app.add_subcommand("validate", "check a grammar file");
  validate_cmd->add_option("grammar", g_path, "grammar file")->required();

  // ---- decompose ----
  auto* dec = app.add_subcommand("decompose", "subgrammar hierarchy of a grammar");
  std::string dec_path, dec_out;
  bool dec_json = false;
  dec->add_option("grammar", dec_path)->required();
  dec->add_flag("--json", dec_json, "emit JSON instead of the indented tree");
  dec->add_option("--out", dec_out, "output directory");

  // ---- top-level ----
  auto* top = app.add_subcommand("top-level", "top-level subgrammars and overhead");
  std::string top_path;
  top->add_option("grammar", top_path)->required();

  // ---- sample ----
  auto* smp = app.add_subcommand("sample", "sample an annotated corpus");
  std::string smp_path, smp_out;
  std::int64_t smp_n = 1000, smp_seed = -1;
  SampleLimits smp_lim;
  smp->add_option("grammar", smp_path)->required();
  smp->add_option("--n", smp_n, "sentences");
  smp->add_option("--seed", smp_seed, "rng seed");
  smp->add_option("--max-tokens", smp_lim.max_tokens);
  smp->add_option("--max-depth", smp_lim.max_depth);
  smp->add_option("--max-resamples", smp_lim.max_resamples);
  smp->add_option("--out", smp_out, "output directory")->required();

  // ---- oracle ----
  auto* orc = app.add_subcommand("oracle", "exact probability queries");
  orc->require_subcommand(1);
  std::string orc_path;
  std::vector<std::string> orc_tokens;
  std::string orc_nt;
  auto add_tok = [&](CLI::App* c, bool with_tokens) {
    c->add_option("grammar", orc_path)->required();
    if (with_tokens) c->add_option("tokens", orc_tokens, "terminal symbols");
  };
  add_tok(orc->add_subcommand("logprob", "log probability of a full sentence"), true);
  add_tok(orc->add_subcommand("prefix", "log prefix probability"), true);
  add_tok(orc->add_subcommand("nextdist", "next-token distribution after a prefix"), true);
  add_tok(orc->add_subcommand("entropy", "derivational entropy report"), false);
  auto* orc_rec = orc->add_subcommand("recursion", "expected recursion of a nonterminal");
  add_tok(orc_rec, false);
  orc_rec->add_option("--nt", orc_nt, "nonterminal")->required();

  // ---- train ----
  auto* trn = app.add_subcommand("train", "train a transformer on sampled data");
  std::string trn_path, trn_out, trn_load, trn_corpus_file;
  std::int64_t trn_seed = -1;
  std::int64_t trn_corpus = 8192;
  int trn_steps = 0, trn_epochs = 0, trn_batch = 64;
  int trn_layers = 2, trn_heads = 2, trn_dim = 128, trn_mlp = 512, trn_ctx = 512;
  double trn_lr = 3e-4, trn_dropout = 0.0;
  bool trn_tied = false;
  int trn_kl_every = 0;
  std::int64_t trn_kl_n = 2000;
  SampleLimits trn_lim;
  trn->add_option("grammar", trn_path)->required();
  trn->add_option("--out", trn_out)->required();
  trn->add_option("--seed", trn_seed);
  trn->add_option("--steps", trn_steps);
  trn->add_option("--epochs", trn_epochs);
  trn->add_option("--batch", trn_batch);
  trn->add_option("--corpus", trn_corpus, "corpus size to sample");
  trn->add_option("--corpus-file", trn_corpus_file, "JSONL corpus instead of sampling");
  trn->add_option("--layers", trn_layers);
  trn->add_option("--heads", trn_heads);
  trn->add_option("--dim", trn_dim);
  trn->add_option("--mlp-dim", trn_mlp);
  trn->add_option("--ctx", trn_ctx);
  trn->add_option("--lr", trn_lr);
  trn->add_option("--dropout", trn_dropout);
  trn->add_flag("--tied", trn_tied, "tie output head to the embedding");
  trn->add_option("--load", trn_load, "warm-start checkpoint");
  trn->add_option("--eval-kl-every", trn_kl_every, "emit a KL curve row every N steps");
  trn->add_option("--eval-kl-n", trn_kl_n);
  trn->add_option("--max-tokens", trn_lim.max_tokens);

  // ---- kl ----
  auto* kl = app.add_subcommand("kl", "KL estimation and decomposition checks");
  kl->require_subcommand(1);
  std::string kl_path, kl_model = "oracle", kl_out;
  std::int64_t kl_n = 10000, kl_seed = -1;
  std::uint64_t kl_pseed = 1;
  double kl_pmag = 0.1;
  std::vector<std::string> kl_ptargets;
  SampleLimits kl_lim;
  auto add_kl_common = [&](CLI::App* c) {
    c->add_option("--grammar", kl_path)->required();
    c->add_option("--model", kl_model, "oracle|uniform|synthetic|ckpt:PATH");
    c->add_option("--n", kl_n);
    c->add_option("--seed", kl_seed);
    c->add_option("--perturb-seed", kl_pseed);
    c->add_option("--perturb-magnitude", kl_pmag);
    c->add_option("--perturb-targets", kl_ptargets);
    c->add_option("--max-tokens", kl_lim.max_tokens);
    c->add_option("--out", kl_out);
  };
  add_kl_common(kl->add_subcommand("estimate", "Monte-Carlo KL with bucket decomposition"));
  add_kl_common(kl->add_subcommand("verify-top", "per-sample top-level partition residual"));
  add_kl_common(kl->add_subcommand("verify-leaf", "per-sample leaf partition residual"));
  auto* kl_outer = kl->add_subcommand("verify-outer", "three-term outer split identity");
  std::vector<int> outer_drop;
  int outer_cap = 400;
  std::int64_t outer_mc = 4000;
  add_kl_common(kl_outer);
  kl_outer->add_option("--drop-rules", outer_drop, "rule ids removed from the kept set")
      ->required();
  kl_outer->add_option("--length-cap", outer_cap);
  kl_outer->add_option("--mc-n", outer_mc);
  auto* kl_rec = kl->add_subcommand("recurrence", "expected-recurrence prediction");
  std::vector<double> rec_ps = {0.55, 0.6, 0.75, 0.9, 1.0};
  double rec_delta = 0.08;
  std::string rec_grammar;
  add_kl_common(kl_rec);
  kl_rec->get_option("--grammar")->required(false);
  kl_rec->add_option("--p-values", rec_ps, "sweep values for the two-rule family");
  kl_rec->add_option("--delta", rec_delta, "perturbation scale");
  add_kl_common(kl->add_subcommand("loss-identity", "cross-entropy = KL + entropy check"));

  // ---- depth-probe ----
  auto* dp = app.add_subcommand("depth-probe", "fixed-depth vs deepening contexts");
  std::string dp_path, dp_model = "oracle", dp_case = "same-depth", dp_out, dp_metric = "tv";
  std::vector<std::string> dp_prefix;
  int dp_imax = 20;
  std::int64_t dp_seed = -1;
  std::uint64_t dp_pseed = 1;
  double dp_pmag = 0.1;
  dp->add_option("grammar", dp_path)->required();
  dp->add_option("--model", dp_model);
  dp->add_option("--case", dp_case, "same-depth|deepening|prefixed|faulty-prefix");
  dp->add_option("--i-max", dp_imax);
  dp->add_option("--prefix", dp_prefix, "prefix tokens for the prefixed variants");
  dp->add_option("--metric", dp_metric, "tv|kl");
  dp->add_option("--seed", dp_seed);
  dp->add_option("--out", dp_out);

  // ---- cka ----
  auto* cka_cmd = app.add_subcommand("cka", "linear CKA between two checkpoints");
  std::string cka_a, cka_b, cka_path;
  std::int64_t cka_n = 64, cka_seed = -1;
  SampleLimits cka_lim;
  cka_cmd->add_option("grammar", cka_path)->required();
  cka_cmd->add_option("--ckpt-a", cka_a)->required();
  cka_cmd->add_option("--ckpt-b", cka_b)->required();
  cka_cmd->add_option("--n-sentences", cka_n);
  cka_cmd->add_option("--seed", cka_seed);
  cka_cmd->add_option("--max-tokens", cka_lim.max_tokens);

  // ---- cosine ----
  auto* cos_cmd = app.add_subcommand("cosine", "cosine protocol over checkpoints");
  std::vector<std::string> cos_ckpts;
  std::string cos_path, cos_root, cos_out;
  std::int64_t cos_n = 32, cos_seed = -1;
  SampleLimits cos_lim;
  cos_cmd->add_option("grammar", cos_path)->required();
  cos_cmd->add_option("--root", cos_root, "subgrammar root nonterminal")->required();
  cos_cmd->add_option("--ckpt", cos_ckpts, "checkpoints (repeat)")->required();
  cos_cmd->add_option("--n-sentences", cos_n);
  cos_cmd->add_option("--seed", cos_seed);
  cos_cmd->add_option("--out", cos_out);
  cos_cmd->add_option("--max-tokens", cos_lim.max_tokens);

  // ---- study ----
  auto* study_cmd = app.add_subcommand("study", "pretraining study (scratch vs pretrained)");
  StudyConfig scfg;
  std::vector<std::string> study_archs = {"two_layer:2:2:128:512"};
  std::vector<int> study_pre = {10};
  study_cmd->add_option("--grammar", scfg.grammar_path)->required();
  study_cmd->add_option("--root", scfg.subgrammar_root)->required();
  study_cmd->add_option("--out", scfg.out_dir)->required();
  study_cmd->add_option("--seeds", scfg.seeds);
  study_cmd->add_option("--pretrain-epochs", study_pre);
  study_cmd->add_option("--continue-epochs", scfg.continue_epochs);
  study_cmd->add_option("--corpus", scfg.corpus_size);
  study_cmd->add_option("--eval", scfg.eval_size);
  study_cmd->add_option("--batch", scfg.batch_size);
  study_cmd->add_option("--lr", scfg.lr);
  study_cmd->add_option("--kl-samples", scfg.kl_samples);
  study_cmd->add_option("--eval-every", scfg.eval_every);
  study_cmd->add_option("--top-quantile", scfg.top_quantile);
  study_cmd->add_option("--max-tokens", scfg.limits.max_tokens);
  study_cmd->add_option("--arch", study_archs,
                        "name:layers:heads:dim:mlp (repeat for several)");

  // ---- arith ----
  auto* ar = app.add_subcommand("arith", "arithmetic stress-test expressions");
  ar->require_subcommand(1);
  auto* ar_gen = ar->add_subcommand("gen", "generate expressions as JSONL");
  std::string ar_kind = "chain", ar_out;
  int ar_terms = 50, ar_depth = 7, ar_count = 5;
  std::int64_t ar_seed = -1;
  ar_gen->add_option("--kind", ar_kind, "chain|deep");
  ar_gen->add_option("--n-terms", ar_terms);
  ar_gen->add_option("--depth", ar_depth);
  ar_gen->add_option("--count", ar_count);
  ar_gen->add_option("--seed", ar_seed);
  ar_gen->add_option("--out", ar_out);
  auto* ar_eval = ar->add_subcommand("eval", "exact rational evaluation");
  std::string ar_expr, ar_file;
  ar_eval->add_option("--expr", ar_expr);
  ar_eval->add_option("--expr-file", ar_file);

  // ---- emit-figure ----
  auto* fig = app.add_subcommand("emit-figure", "project run artifacts to figure CSVs");
  std::string fig_id, fig_run, fig_out;
  fig->add_option("--figure", fig_id, "fig1a|fig1b|fig2a|fig3|fig5|fig6|fig7")->required();
  fig->add_option("--run", fig_run, "run directory with artifacts")->required();
  fig->add_option("--out", fig_out, "output directory (default: run dir)");

  auto args = expand_config(argc, argv);
  std::vector<const char*> cargs;
  for (auto& a : args) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (*validate_cmd) {
    Grammar g = parse_grammar(slurp(g_path), fs::path(g_path).stem().string());
    std::cout << validate(g).summary(g);
    return 0;
  }

  if (*dec) {
    Grammar g = load_grammar_file(dec_path);
    SubgrammarDag d = decompose_dag(g);
    std::string body = dec_json ? d.to_json(g) + "\n" : d.to_tree_string(g);
    std::cout << body;
    if (!dec_out.empty()) {
      nlohmann::json resolved{{"grammar", dec_path}, {"json", dec_json}};
      write_resolved_config(dec_out, resolved);
      write_file(dec_out + (dec_json ? "/dag.json" : "/dag.txt"), body);
    }
    return 0;
  }

  if (*top) {
    Grammar g = load_grammar_file(top_path);
    TopLevelSplit s = top_level(g);
    for (const auto& e : s.subgrammars) {
      std::cout << g.nonterminals[e.nonterminal] << ": p=" << e.occurrence_prob
                << " expected_count=" << e.expected_count
                << (e.proper ? "" : " (start symbol itself)");
      if (e.proper) {
        try {
          std::cout << " position=" << to_string(classify_position(g, e.nonterminal));
        } catch (const DataError&) {
        }
      }
      std::cout << "\n";
    }
    std::cout << "overhead:";
    for (const auto& run : s.overhead) {
      std::cout << " \"";
      for (std::size_t i = 0; i < run.size(); ++i)
        std::cout << (i ? " " : "") << g.terminals[run[i]];
      std::cout << "\"";
    }
    std::cout << "\n";
    return 0;
  }

  if (*smp) {
    Grammar g = load_grammar_file(smp_path);
    nlohmann::json resolved{{"grammar", smp_path}, {"n", smp_n},
                            {"max_tokens", smp_lim.max_tokens},
                            {"max_depth", smp_lim.max_depth},
                            {"max_resamples", smp_lim.max_resamples},
                            {"out", smp_out}};
    std::uint64_t seed = resolve_seed(smp_seed, resolved);
    SubgrammarDag dag = decompose_dag(g);
    Corpus c = sample_corpus(g, dag, smp_n, seed, smp_lim);
    write_resolved_config(smp_out, resolved);
    write_corpus(g, c, smp_out + "/corpus.jsonl");
    std::cout << "sampled " << c.sentences.size() << " sentences (acceptance rate "
              << c.stats.acceptance_rate() << ") -> " << smp_out << "/corpus.jsonl\n";
    return 0;
  }

  if (*orc) {
    Grammar g = load_grammar_file(orc_path);
    Oracle oracle(g);
    auto ids = g.tokens_from_strings(orc_tokens);
    if (orc->get_subcommand("logprob")->parsed()) {
      std::cout << oracle.string_logprob(ids) << "\n";
    } else if (orc->get_subcommand("prefix")->parsed()) {
      std::cout << oracle.prefix_logprob(ids) << "\n";
    } else if (orc->get_subcommand("nextdist")->parsed()) {
      std::cout << dist_to_string(g, oracle.next_token_dist(ids));
    } else if (orc->get_subcommand("entropy")->parsed()) {
      EntropyReport rep = derivational_entropy(g);
      std::cout << "derivational entropy: " << rep.derivational_entropy << " nats\n";
      for (auto& [nt, h] : rep.per_nonterminal) std::cout << "  " << nt << ": " << h << "\n";
      if (rep.ambiguous_warning)
        std::cout << "warning: grammar is ambiguous; string entropy is bounded above by this\n";
    } else {
      RecursionStats st = expected_recursion(g, orc_nt);
      std::cout << "E[R] = " << st.expected_recursion << ", blow-up = "
                << (st.unbounded ? std::string("unbounded")
                                 : std::to_string(st.blowup_factor))
                << "\n";
    }
    return 0;
  }

  if (*trn) {
    Grammar g = load_grammar_file(trn_path);
    nlohmann::json resolved{{"grammar", trn_path},   {"steps", trn_steps},
                            {"epochs", trn_epochs},  {"batch", trn_batch},
                            {"layers", trn_layers},  {"heads", trn_heads},
                            {"dim", trn_dim},        {"mlp_dim", trn_mlp},
                            {"ctx", trn_ctx},        {"lr", trn_lr},
                            {"dropout", trn_dropout}, {"tied", trn_tied},
                            {"corpus", trn_corpus},  {"corpus_file", trn_corpus_file},
                            {"load", trn_load},      {"eval_kl_every", trn_kl_every},
                            {"eval_kl_n", trn_kl_n}, {"out", trn_out}};
    std::uint64_t seed = resolve_seed(trn_seed, resolved);
    write_resolved_config(trn_out, resolved);
    SubgrammarDag dag = decompose_dag(g);
    trn_lim.max_tokens = std::min(trn_lim.max_tokens, trn_ctx - 2);
    Corpus corpus = trn_corpus_file.empty()
                        ? sample_corpus(g, dag, trn_corpus, seed ^ 0xc0ull, trn_lim)
                        : read_corpus(g, dag, trn_corpus_file);
    ModelConfig mc;
    mc.layers = trn_layers;
    mc.heads = trn_heads;
    mc.model_dim = trn_dim;
    mc.mlp_dim = trn_mlp;
    mc.max_context = trn_ctx;
    mc.dropout = trn_dropout;
    mc.tied_output = trn_tied;
    mc.seed = seed;
    Transformer model = trn_load.empty() ? Transformer(mc, Vocab::for_grammar(g))
                                         : Transformer::load(trn_load);
    int total = trn_steps > 0
                    ? trn_steps
                    : trn_epochs * static_cast<int>((corpus.sentences.size() + trn_batch - 1) /
                                                    trn_batch);
    if (total <= 0) throw DataError("set --steps or --epochs");

    std::ofstream logcsv(trn_out + "/train_log.csv");
    logcsv << "step,loss,lr,wallclock_s";
    bool wrote_header = false;
    std::ofstream klcsv;
    std::vector<std::string> kl_buckets;
    if (trn_kl_every > 0) klcsv.open(trn_out + "/kl_curve.csv");

    int done = 0;
    std::uint64_t chunk = 0;
    while (done < total) {
      int step = trn_kl_every > 0 ? std::min(trn_kl_every, total - done) : total;
      TrainConfig tc;
      tc.steps = step;
      tc.batch_size = trn_batch;
      tc.opt.lr = trn_lr;
      tc.shuffle_seed = seed + chunk;
      tc.log_every = std::max(1, step / 4);
      auto log = model.train(corpus, g, tc);
      for (const auto& row : log) {
        if (!wrote_header) {
          for (auto& [b, v] : row.bucket_loss) logcsv << "," << b;
          logcsv << "\n";
          wrote_header = true;
        }
        logcsv << row.step << "," << row.loss << "," << row.lr << "," << row.wallclock_s;
        for (auto& [b, v] : row.bucket_loss) logcsv << "," << v;
        logcsv << "\n";
      }
      done += step;
      ++chunk;
      if (trn_kl_every > 0) {
        KlReport rep = mc_kl(g, model, trn_kl_n, seed ^ 0x1234ull, trn_lim);
        if (kl_buckets.empty()) {
          for (auto& [b, v] : rep.per_bucket) kl_buckets.push_back(b);
          klcsv << kl_curve_csv_header(kl_buckets);
        }
        klcsv << model.step() << "," << rep.total << "," << rep.total_stderr;
        for (const auto& b : kl_buckets)
          klcsv << "," << rep.per_bucket.at(b) << "," << rep.per_bucket_stderr.at(b);
        klcsv << "\n";
        std::cout << "step " << model.step() << ": kl " << rep.total << " +- "
                  << rep.total_stderr << "\n";
      }
    }
    model.save(trn_out + "/checkpoint.bin");
    std::cout << "trained " << model.step() << " steps -> " << trn_out << "/checkpoint.bin\n";
    return 0;
  }

  if (*kl) {
    Grammar g;
    if (!kl_path.empty()) g = load_grammar_file(kl_path);
    nlohmann::json resolved{{"grammar", kl_path},  {"model", kl_model},
                            {"n", kl_n},           {"perturb_seed", kl_pseed},
                            {"perturb_magnitude", kl_pmag}, {"out", kl_out}};
    std::uint64_t seed = resolve_seed(kl_seed, resolved);
    write_resolved_config(kl_out, resolved);
    auto report_and_exit = [&](const KlReport& rep, double residual, bool check) {
      std::cout << "total: " << rep.total << " +- " << rep.total_stderr
                << " nats/sentence (" << rep.per_token << " nats/token)\n";
      for (auto& [b, v] : rep.per_bucket)
        std::cout << "  " << b << ": " << v << " +- " << rep.per_bucket_stderr.at(b) << "\n";
      std::cout << "max residual: " << residual << "\n";
      if (!kl_out.empty()) write_file(kl_out + "/kl.json", rep.to_json() + "\n");
      if (check && residual >= 1e-9) {
        std::cerr << "partition residual exceeds 1e-9\n";
        return 3;
      }
      return 0;
    };
    if (kl->get_subcommand("estimate")->parsed()) {
      auto q = make_model(kl_model, g, kl_pseed, kl_pmag, kl_ptargets);
      return report_and_exit(mc_kl(g, *q, kl_n, seed, kl_lim), 0.0, false);
    }
    if (kl->get_subcommand("verify-top")->parsed()) {
      auto q = make_model(kl_model, g, kl_pseed, kl_pmag, kl_ptargets);
      ResidualReport rep = verify_top_level(g, *q, kl_n, seed, kl_lim);
      return report_and_exit(rep.kl, rep.max_residual, true);
    }
    if (kl->get_subcommand("verify-leaf")->parsed()) {
      auto q = make_model(kl_model, g, kl_pseed, kl_pmag, kl_ptargets);
      ResidualReport rep = verify_leaf(g, *q, kl_n, seed, kl_lim);
      return report_and_exit(rep.kl, rep.max_residual, true);
    }
    if (kl_outer->parsed()) {
      std::vector<int> keep;
      for (std::size_t r = 0; r < g.rules.size(); ++r)
        if (std::find(outer_drop.begin(), outer_drop.end(), static_cast<int>(r)) ==
            outer_drop.end())
          keep.push_back(static_cast<int>(r));
      PerturbSpec p;
      p.seed = kl_pseed;
      p.magnitude = kl_pmag;
      p.targets = kl_ptargets;
      Grammar q = perturb_weights(g, p);
      OuterSplitReport rep = verify_outer(g, keep, q, outer_cap, 1e-6, outer_mc, seed);
      std::cout << "lhs:       " << rep.lhs << "\n"
                << "P(A) term: " << rep.term_a << "  (P(A)=" << rep.p_a
                << ", recognizer MC " << rep.p_a_mc << " +- " << rep.p_a_mc_stderr << ")\n"
                << "P(~A) term:" << rep.term_abar << "\n"
                << "star term: " << rep.term_star << "\n"
                << "residual:  " << rep.residual << " (tail bound " << rep.tail_bound << ")\n";
      if (!kl_out.empty()) {
        nlohmann::json j{{"lhs", rep.lhs},           {"term_a", rep.term_a},
                         {"term_abar", rep.term_abar}, {"term_star", rep.term_star},
                         {"p_a", rep.p_a},           {"residual", rep.residual},
                         {"tail_bound", rep.tail_bound}};
        write_file(kl_out + "/outer_split.json", j.dump(2) + "\n");
      }
      return rep.residual < std::max(2 * rep.tail_bound, 1e-9) ? 0 : 3;
    }
    if (kl_rec->parsed()) {
      std::vector<Rational> ps;
      for (double p : rec_ps)
        ps.push_back(Rational(static_cast<std::int64_t>(std::llround(p * 1000000)), 1000000));
      auto sweep = recurrence_sweep(ps, rec_delta, kl_n, seed);
      std::ostringstream csv;
      csv << "p,q,expected_r,numerator,predicted,predicted_stderr,measured,measured_stderr\n";
      std::cout << "p      predicted      measured\n";
      for (const auto& pt : sweep) {
        csv << pt.p << "," << pt.q_weight << "," << pt.pred.expected_r << ","
            << pt.pred.numerator << "," << pt.pred.predicted_total << ","
            << pt.pred.predicted_stderr << "," << pt.pred.measured_total << ","
            << pt.pred.measured_stderr << "\n";
        char buf[96];
        std::snprintf(buf, sizeof buf, "%.4f %.6f+-%.6f %.6f+-%.6f\n", pt.p,
                      pt.pred.predicted_total, pt.pred.predicted_stderr,
                      pt.pred.measured_total, pt.pred.measured_stderr);
        std::cout << buf;
      }
      if (!kl_out.empty()) write_file(kl_out + "/recurrence_sweep.csv", csv.str());
      return 0;
    }
    // loss-identity
    auto q = make_model(kl_model, g, kl_pseed, kl_pmag, kl_ptargets);
    LossIdentityReport rep = loss_identity(g, *q, kl_n, seed, kl_lim);
    std::cout << "cross-entropy: " << rep.ce << " +- " << rep.ce_stderr << "\n"
              << "kl:            " << rep.kl << " +- " << rep.kl_stderr << "\n"
              << "entropy:       " << rep.entropy << " +- " << rep.entropy_stderr
              << (rep.ambiguous ? " (MC string entropy; grammar is ambiguous)" : " (exact)")
              << "\n"
              << "gap: " << rep.gap << " vs 3*stderr " << 3 * rep.combined_stderr << "\n";
    return rep.gap < 3 * rep.combined_stderr ? 0 : 3;
  }

  if (*dp) {
    Grammar g = load_grammar_file(dp_path);
    nlohmann::json resolved{{"grammar", dp_path}, {"model", dp_model},
                            {"case", dp_case},    {"i_max", dp_imax},
                            {"metric", dp_metric}, {"out", dp_out}};
    std::uint64_t seed = resolve_seed(dp_seed, resolved);
    (void)seed;
    write_resolved_config(dp_out, resolved);
    auto q = make_model(dp_model, g, dp_pseed, dp_pmag, {});
    DepthProbeSpec spec;
    if (dp_case == "same-depth")
      spec.kind = ProbeCase::same_depth;
    else if (dp_case == "deepening")
      spec.kind = ProbeCase::deepening;
    else if (dp_case == "prefixed")
      spec.kind = ProbeCase::prefixed;
    else if (dp_case == "faulty-prefix")
      spec.kind = ProbeCase::faulty_prefix;
    else
      throw DataError("unknown probe case: " + dp_case);
    spec.i_max = dp_imax;
    spec.prefix_tokens = dp_prefix;
    spec.use_kl = dp_metric == "kl";
    DepthProbeCurve curve = depth_probe(*q, g, spec);
    std::cout << curve.to_csv();
    if (!dp_out.empty()) write_file(dp_out + "/" + curve.case_id + ".csv", curve.to_csv());
    return 0;
  }

  if (*cka_cmd) {
    Grammar g = load_grammar_file(cka_path);
    nlohmann::json resolved{{"grammar", cka_path}, {"ckpt_a", cka_a}, {"ckpt_b", cka_b},
                            {"n_sentences", cka_n}};
    std::uint64_t seed = resolve_seed(cka_seed, resolved);
    Transformer a = Transformer::load(cka_a);
    Transformer b = Transformer::load(cka_b);
    SubgrammarDag dag = decompose_dag(g);
    cka_lim.max_tokens = std::min(cka_lim.max_tokens, a.config().max_context - 2);
    Corpus c = sample_corpus(g, dag, cka_n, seed, cka_lim);
    std::vector<std::vector<int>> stream;
    for (const auto& s : c.sentences) stream.push_back(s.tokens);
    CkaResult r = model_cka(a, b, stream);
    for (std::size_t l = 0; l < r.attention.size(); ++l)
      std::cout << "layer " << l << ": attention " << r.attention[l] << ", mlp " << r.mlp[l]
                << "\n";
    std::cout << "mean attention: " << r.mean_attention << "\nmean mlp: " << r.mean_mlp << "\n";
    return 0;
  }

  if (*cos_cmd) {
    Grammar g = load_grammar_file(cos_path);
    nlohmann::json resolved{{"grammar", cos_path}, {"root", cos_root},
                            {"n_sentences", cos_n}, {"out", cos_out}};
    std::uint64_t seed = resolve_seed(cos_seed, resolved);
    std::vector<Transformer> models;
    for (const auto& p : cos_ckpts) models.push_back(Transformer::load(p));
    std::vector<const Transformer*> ptrs;
    for (auto& m : models) ptrs.push_back(&m);
    cos_lim.max_tokens = std::min(cos_lim.max_tokens, models[0].config().max_context - 2);
    SubgrammarDag dag = decompose_dag(g);
    Grammar sub = inner_subgrammar(g, cos_root);
    SubgrammarDag sub_dag = decompose_dag(sub);
    Corpus mixed = sample_corpus(g, dag, cos_n, seed, cos_lim);
    Corpus subc = sample_corpus(sub, sub_dag, cos_n, seed ^ 1, cos_lim);
    std::map<std::string, std::vector<std::vector<int>>> classes;
    for (const auto& s : mixed.sentences) classes["mixed"].push_back(s.tokens);
    for (const auto& s : subc.sentences)
      classes["subgrammar_only"].push_back(g.tokens_from_strings(sub.tokens_to_strings(s.tokens)));
    std::vector<std::vector<int>> pool;
    for (const auto& e : top_level(g).subgrammars) {
      if (!e.proper || g.nonterminals[e.nonterminal] == cos_root) continue;
      Grammar sib = inner_subgrammar(g, e.nonterminal);
      SubgrammarDag sib_dag = decompose_dag(sib);
      Corpus c = sample_corpus(sib, sib_dag, cos_n, seed ^ 2, cos_lim);
      for (const auto& s : c.sentences)
        pool.push_back(g.tokens_from_strings(sib.tokens_to_strings(s.tokens)));
    }
    if (pool.empty())
      for (const auto& s : mixed.sentences) pool.push_back(s.tokens);
    pool.resize(std::min<std::size_t>(pool.size(), cos_n));
    classes["no_subgrammar"] = pool;
    CosineTable t =
        cosine_protocol(ptrs, classes, {{"subgrammar_only", "no_subgrammar"}});
    std::cout << t.to_csv();
    if (!cos_out.empty()) {
      write_resolved_config(cos_out, resolved);
      write_file(cos_out + "/cosine_table.csv", t.to_csv());
    }
    return 0;
  }

  if (*study_cmd) {
    scfg.pretrain_epoch_variants = study_pre;
    for (const auto& spec : study_archs) {
      StudyArch arch;
      std::stringstream ss(spec);
      std::string part;
      std::vector<std::string> parts;
      while (std::getline(ss, part, ':')) parts.push_back(part);
      if (parts.size() != 5) throw DataError("arch spec must be name:layers:heads:dim:mlp");
      arch.name = parts[0];
      arch.model.layers = std::stoi(parts[1]);
      arch.model.heads = std::stoi(parts[2]);
      arch.model.model_dim = std::stoi(parts[3]);
      arch.model.mlp_dim = std::stoi(parts[4]);
      arch.model.max_context = scfg.limits.max_tokens + 2;
      scfg.archs.push_back(arch);
    }
    nlohmann::json resolved{{"grammar", scfg.grammar_path},
                            {"root", scfg.subgrammar_root},
                            {"seeds", scfg.seeds},
                            {"pretrain_epochs", study_pre},
                            {"continue_epochs", scfg.continue_epochs},
                            {"corpus", scfg.corpus_size},
                            {"archs", study_archs},
                            {"out", scfg.out_dir}};
    write_resolved_config(scfg.out_dir, resolved);
    StudyReport rep = pretraining_study(scfg);
    std::cout << "study complete: " << rep.runs.size() << " runs -> " << scfg.out_dir << "\n";
    std::cout << rep.cka_table_csv;
    return 0;
  }

  if (*ar) {
    if (ar_gen->parsed()) {
      nlohmann::json resolved{{"kind", ar_kind}, {"n_terms", ar_terms},
                              {"depth", ar_depth}, {"count", ar_count}, {"out", ar_out}};
      std::uint64_t seed = resolve_seed(ar_seed, resolved);
      std::ostringstream out;
      for (int i = 0; i < ar_count; ++i) {
        arith::Expr e = ar_kind == "deep" ? arith::gen_deep_expr(seed + i, ar_depth)
                                          : arith::gen_shallow_chain(seed + i, ar_terms);
        arith::Rat v = arith::eval_exact(e);
        nlohmann::json j{{"expr", arith::print_expr(e)},
                         {"depth", e.depth()},
                         {"n_terms", ar_kind == "deep" ? 1 : ar_terms},
                         {"result_num", v.get_num().get_str()},
                         {"result_den", v.get_den().get_str()}};
        out << j.dump() << "\n";
      }
      std::cout << out.str();
      if (!ar_out.empty()) {
        write_resolved_config(ar_out, resolved);
        write_file(ar_out + "/expressions.jsonl", out.str());
      }
      return 0;
    }
    std::string text = !ar_file.empty() ? slurp(ar_file) : ar_expr;
    if (text.empty()) throw DataError("give --expr or --expr-file");
    arith::Rat v = arith::eval_exact(text);
    std::cout << v.get_num().get_str() << "/" << v.get_den().get_str() << "\n";
    return 0;
  }

  if (*fig) {
    std::string out_dir = fig_out.empty() ? fig_run : fig_out;
    fs::create_directories(out_dir);
    auto need = [&](const std::string& f) {
      if (!fs::exists(fig_run + "/" + f)) throw DataError("missing artifact: " + fig_run + "/" + f);
      return fig_run + "/" + f;
    };
    if (fig_id == "fig1a" || fig_id == "fig1b" || fig_id == "fig2a") {
      // KL curve with ROOT-EOS folded into the overhead column
      std::ifstream in(need("kl_curve.csv"));
      std::string header;
      std::getline(in, header);
      std::vector<std::string> cols;
      std::stringstream hs(header);
      std::string c;
      while (std::getline(hs, c, ',')) cols.push_back(c);
      std::vector<std::string> buckets;
      for (std::size_t i = 3; i < cols.size(); i += 2)
        if (cols[i] != "OVERHEAD" && cols[i] != "ROOT-EOS") buckets.push_back(cols[i]);
      std::ostringstream out;
      out << "step,total";
      for (auto& b : buckets) out << "," << b;
      out << ",overhead\n";
      std::string line;
      while (std::getline(in, line)) {
        std::vector<double> v;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) v.push_back(std::stod(cell));
        std::map<std::string, double> row;
        for (std::size_t i = 3; i < cols.size(); i += 2) row[cols[i]] = v[i];
        out << static_cast<long long>(v[0]) << "," << v[1];
        for (auto& b : buckets) out << "," << row[b];
        out << "," << row["OVERHEAD"] + row["ROOT-EOS"] << "\n";
      }
      write_file(out_dir + "/" + fig_id + ".csv", out.str());
    } else if (fig_id == "fig3") {
      std::string src = need("recurrence_sweep.csv");
      write_file(out_dir + "/fig3.csv", slurp(src));
    } else if (fig_id == "fig5") {
      write_file(out_dir + "/fig5_case_i.csv", slurp(need("same-depth.csv")));
      write_file(out_dir + "/fig5_case_ii.csv", slurp(need("deepening.csv")));
    } else if (fig_id == "fig6") {
      write_file(out_dir + "/fig6_prefixed.csv", slurp(need("prefixed.csv")));
      write_file(out_dir + "/fig6_faulty.csv", slurp(need("faulty-prefix.csv")));
    } else if (fig_id == "fig7") {
      write_file(out_dir + "/fig7.csv", slurp(need("final_kl_pairs.csv")));
    } else {
      std::cerr << "unknown figure id: " << fig_id << "\n";
      return 1;
    }
    std::cout << "figure data written to " << out_dir << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv) {
  try {
    return run(argc, argv);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace pcfglab
