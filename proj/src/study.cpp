#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "pcfglab/analysis.hpp"
#include "pcfglab/errors.hpp"

namespace pcfglab {

namespace {

// Maps a corpus sampled from an inner subgrammar onto the full grammar's
// token ids; attribution collapses to overhead since the instances belong to
// the other grammar's hierarchy.
Corpus project_corpus(const Grammar& sub, const Grammar& full, const Corpus& corpus) {
  Corpus out;
  out.grammar_name = full.name;
  out.seed = corpus.seed;
  out.stats = corpus.stats;
  for (const auto& s : corpus.sentences) {
    AnnotatedSentence t;
    t.tokens = full.tokens_from_strings(sub.tokens_to_strings(s.tokens));
    t.bucket.assign(t.tokens.size(), AnnotatedSentence::kOverhead);
    t.bucket.push_back(AnnotatedSentence::kRootEos);
    t.node_path.assign(t.tokens.size() + 1, {0});
    t.seed = s.seed;
    t.index = s.index;
    t.tree_logprob = s.tree_logprob;
    out.sentences.push_back(std::move(t));
  }
  return out;
}

struct ChunkedResult {
  double final_loss = 0;
  std::vector<std::pair<int, double>> restricted;  // (global step, bucket loss)
};

// Trains in eval_every-sized slices so restricted losses can be tracked on a
// fixed eval corpus; slice k uses shuffle seed base + k so two runs with the
// same schedule are bit-identical.
ChunkedResult train_chunked(Transformer& model, const Grammar& g, const Corpus& corpus,
                            const Corpus& eval_corpus, const std::string& bucket_label,
                            int total_steps, int eval_every, int batch_size, double lr,
                            std::uint64_t seed_base, Exec exec) {
  ChunkedResult out;
  int done = 0;
  std::uint64_t chunk = 0;
  while (done < total_steps) {
    int step = std::min(eval_every, total_steps - done);
    TrainConfig tc;
    tc.steps = step;
    tc.batch_size = batch_size;
    tc.opt.lr = lr;
    tc.exec = exec;
    tc.shuffle_seed = seed_base + chunk;
    tc.log_every = std::max(1, step);
    auto log = model.train(corpus, g, tc);
    out.final_loss = log.back().loss;
    done += step;
    ++chunk;
    if (!bucket_label.empty()) {
      EvalResult ev = model.evaluate(eval_corpus, g, exec);
      auto it = ev.bucket_ce.find(bucket_label);
      double restricted = it != ev.bucket_ce.end() ? it->second : 0.0;
      out.restricted.emplace_back(model.step(), restricted);
    }
  }
  return out;
}

std::string arch_variant_key(const StudyArch& arch, int pre) {
  return arch.name + "_pre" + std::to_string(pre);
}

}  // namespace

StudyReport pretraining_study(const StudyConfig& cfg) {
  if (cfg.out_dir.empty()) throw DataError("study needs an output directory");
  if (cfg.archs.empty()) throw DataError("study needs at least one architecture");
  std::filesystem::create_directories(cfg.out_dir);

  Grammar g = load_grammar_file(cfg.grammar_path);
  SubgrammarDag dag = decompose_dag(g);
  int root = g.require_nonterminal(cfg.subgrammar_root);
  Grammar sub = inner_subgrammar(g, root);
  SubgrammarDag sub_dag = decompose_dag(sub);
  std::string bucket_label = g.nonterminals[root];

  Corpus full_corpus = sample_corpus(g, dag, cfg.corpus_size, 101, cfg.limits, cfg.exec);
  Corpus eval_corpus = sample_corpus(g, dag, cfg.eval_size, 202, cfg.limits, cfg.exec);
  Corpus sub_corpus = project_corpus(
      sub, g, sample_corpus(sub, sub_dag, cfg.corpus_size, 303, cfg.limits, cfg.exec));

  // sequence classes for the cosine protocol
  int analysis_n = std::min<std::int64_t>(32, cfg.eval_size);
  std::map<std::string, std::vector<std::vector<int>>> classes;
  for (int i = 0; i < analysis_n; ++i)
    classes["subgrammar_only"].push_back(sub_corpus.sentences[i].tokens);
  for (int i = 0; i < analysis_n; ++i)
    classes["mixed"].push_back(eval_corpus.sentences[i].tokens);
  {
    // sequences with no target occurrence: pooled sibling subgrammars
    std::vector<std::vector<int>> pool;
    for (const auto& e : top_level(g).subgrammars) {
      if (!e.proper || e.nonterminal == root) continue;
      Grammar sib = inner_subgrammar(g, e.nonterminal);
      SubgrammarDag sib_dag = decompose_dag(sib);
      Corpus c = project_corpus(
          sib, g, sample_corpus(sib, sib_dag, analysis_n, 404, cfg.limits, cfg.exec));
      for (const auto& s : c.sentences) pool.push_back(s.tokens);
    }
    if (pool.empty())
      for (int i = 0; i < analysis_n; ++i)  // degenerate grammars: reuse mixed
        pool.push_back(eval_corpus.sentences[i].tokens);
    pool.resize(std::min<std::size_t>(pool.size(), analysis_n));
    classes["no_subgrammar"] = std::move(pool);
  }

  int steps_per_epoch = (cfg.corpus_size + cfg.batch_size - 1) / cfg.batch_size;
  StudyReport report;

  struct SavedRun {
    std::string path;        // final checkpoint
    std::string path_pre;    // pre-continuation checkpoint (pretrained only)
    double final_loss = 0;
  };
  // (arch, population) -> seed-indexed runs
  std::map<std::string, std::vector<SavedRun>> saved;

  for (const auto& arch : cfg.archs) {
    for (int pre : cfg.pretrain_epoch_variants) {
      for (int s = 0; s < cfg.seeds; ++s) {
        std::uint64_t model_seed = 1000003ull * (s + 1) + std::hash<std::string>{}(arch.name);
        int pre_steps = pre * steps_per_epoch;
        int cont_steps = cfg.continue_epochs * steps_per_epoch;

        // --- scratch: same total budget on the full grammar
        {
          ModelConfig mc = arch.model;
          mc.seed = model_seed;
          Transformer model(mc, Vocab::for_grammar(g));
          ChunkedResult r =
              train_chunked(model, g, full_corpus, eval_corpus, "", pre_steps + cont_steps,
                            cfg.eval_every, cfg.batch_size, cfg.lr, 1000, cfg.exec);
          StudyRun run;
          run.arch = arch.name;
          run.population = "scratch";
          run.pretrain_epochs = pre;
          run.seed = model_seed;
          run.final_loss = r.final_loss;
          run.final_kl = mc_kl(g, model, cfg.kl_samples, 777, cfg.limits, cfg.exec).total;
          report.runs.push_back(run);
          std::string key = arch_variant_key(arch, pre) + "/scratch";
          std::string path = cfg.out_dir + "/" + arch.name + "_pre" + std::to_string(pre) +
                             "_scratch_seed" + std::to_string(s) + ".ckpt";
          model.save(path);
          saved[key].push_back({path, "", r.final_loss});
        }

        // --- pretrain on the subgrammar, then continue on the full grammar
        {
          ModelConfig mc = arch.model;
          mc.seed = model_seed;
          Transformer model(mc, Vocab::for_grammar(g));
          if (pre_steps > 0)
            train_chunked(model, g, sub_corpus, eval_corpus, "", pre_steps, cfg.eval_every,
                          cfg.batch_size, cfg.lr, 0, cfg.exec);
          std::string pre_path = cfg.out_dir + "/" + arch.name + "_pre" + std::to_string(pre) +
                                 "_preonly_seed" + std::to_string(s) + ".ckpt";
          model.save(pre_path);
          double pre_restricted =
              model.evaluate(eval_corpus, g, cfg.exec).bucket_ce[bucket_label];
          ChunkedResult r =
              train_chunked(model, g, full_corpus, eval_corpus, bucket_label, cont_steps,
                            cfg.eval_every, cfg.batch_size, cfg.lr, 1000, cfg.exec);
          StudyRun run;
          run.arch = arch.name;
          run.population = "pretrain" + std::to_string(pre);
          run.pretrain_epochs = pre;
          run.seed = model_seed;
          run.final_loss = r.final_loss;
          run.final_kl = mc_kl(g, model, cfg.kl_samples, 777, cfg.limits, cfg.exec).total;
          run.pre_continuation_restricted = pre_restricted;
          run.retention = r.restricted;
          for (auto& [st, v] : r.restricted)
            run.max_restricted_during_continuation =
                std::max(run.max_restricted_during_continuation, v);
          report.runs.push_back(run);
          std::string key = arch_variant_key(arch, pre) + "/pretrain";
          std::string path = cfg.out_dir + "/" + arch.name + "_pre" + std::to_string(pre) +
                             "_pretrain_seed" + std::to_string(s) + ".ckpt";
          model.save(path);
          saved[key].push_back({path, pre_path, r.final_loss});
        }
      }
    }
  }

  // --- CKA table in the published schema
  auto population_mean = [&](const std::vector<SavedRun>& runs, bool use_pre,
                             const std::vector<std::vector<int>>& stream) {
    std::vector<Transformer> models;
    for (const auto& r : runs) models.push_back(Transformer::load(use_pre ? r.path_pre : r.path));
    std::vector<const Transformer*> ptrs;
    for (auto& m : models) ptrs.push_back(&m);
    PopulationCka p = population_cka(ptrs, stream);
    return std::make_pair(p.mean_attention, p.mean_mlp);
  };
  {
    std::ostringstream cka;
    cka << "sequences,row";
    for (const auto& arch : cfg.archs)
      for (int pre : cfg.pretrain_epoch_variants)
        cka << "," << arch_variant_key(arch, pre) << "_attention,"
            << arch_variant_key(arch, pre) << "_mlp";
    cka << "\n";
    for (const std::string& seqclass : {std::string("full"), std::string("sub")}) {
      const auto& stream = seqclass == "full" ? classes["mixed"] : classes["subgrammar_only"];
      std::map<std::string, std::vector<std::string>> rows;
      for (const auto& arch : cfg.archs) {
        for (int pre : cfg.pretrain_epoch_variants) {
          std::string key = arch_variant_key(arch, pre);
          auto scr = population_mean(saved[key + "/scratch"], false, stream);
          auto wit = population_mean(saved[key + "/pretrain"], false, stream);
          auto fmt = [](double v) {
            char b[32];
            std::snprintf(b, sizeof b, "%.4f", v);
            return std::string(b);
          };
          rows["from_scratch"].push_back(fmt(scr.first));
          rows["from_scratch"].push_back(fmt(scr.second));
          rows["with_pretraining"].push_back(fmt(wit.first));
          rows["with_pretraining"].push_back(fmt(wit.second));
          rows["pct_change"].push_back(fmt(100.0 * (wit.first - scr.first) /
                                           std::max(1e-12, scr.first)));
          rows["pct_change"].push_back(fmt(100.0 * (wit.second - scr.second) /
                                           std::max(1e-12, scr.second)));
          if (seqclass == "sub") {
            auto pre_only = population_mean(saved[key + "/pretrain"], true, stream);
            rows["pretraining_only"].push_back(fmt(pre_only.first));
            rows["pretraining_only"].push_back(fmt(pre_only.second));
          }
        }
      }
      for (const auto& rowname :
           {std::string("from_scratch"), std::string("with_pretraining"),
            std::string("pct_change"), std::string("pretraining_only")}) {
        if (!rows.count(rowname)) continue;
        cka << seqclass << "," << rowname;
        for (const auto& cell : rows[rowname]) cka << "," << cell;
        cka << "\n";
      }
    }
    report.cka_table_csv = cka.str();
  }

  // --- cosine table over the top seed quantile of the first arch/variant
  {
    const auto& arch = cfg.archs.front();
    int pre = cfg.pretrain_epoch_variants.front();
    std::string key = arch_variant_key(arch, pre);
    std::ostringstream cos;
    cos << "population,class,attention,mlp\n";
    for (const std::string& pop : {std::string("scratch"), std::string("pretrain")}) {
      auto runs = saved[key + "/" + pop];
      std::sort(runs.begin(), runs.end(),
                [](const SavedRun& a, const SavedRun& b) { return a.final_loss < b.final_loss; });
      int keep = std::max<int>(2, static_cast<int>(runs.size() * cfg.top_quantile));
      keep = std::min<int>(keep, static_cast<int>(runs.size()));
      std::vector<Transformer> models;
      for (int i = 0; i < keep; ++i) models.push_back(Transformer::load(runs[i].path));
      std::vector<const Transformer*> ptrs;
      for (auto& m : models) ptrs.push_back(&m);
      CosineTable t = cosine_protocol(ptrs, classes,
                                      {{"subgrammar_only", "no_subgrammar"}});
      for (const auto& [rowname, v] : t.rows)
        cos << pop << "," << rowname << "," << v.first << "," << v.second << "\n";
    }
    report.cosine_table_csv = cos.str();
  }

  // --- paired final-KL distributions: runs were appended scratch-then-
  // pretrained for each (arch, variant, seed), so walk them pairwise
  {
    std::ostringstream fig;
    fig << "arch,pretrain_epochs,seed,scratch_kl,pretrained_kl\n";
    for (std::size_t i = 0; i + 1 < report.runs.size(); i += 2) {
      const StudyRun& a = report.runs[i];
      const StudyRun& b = report.runs[i + 1];
      fig << a.arch << "," << a.pretrain_epochs << "," << a.seed << "," << a.final_kl << ","
          << b.final_kl << "\n";
    }
    report.fig7_csv = fig.str();
  }

  // --- retention curves per arch/variant, mean over seeds
  for (const auto& arch : cfg.archs) {
    for (int pre : cfg.pretrain_epoch_variants) {
      std::map<int, std::pair<double, int>> agg;
      for (const auto& r : report.runs) {
        if (r.arch != arch.name || r.pretrain_epochs != pre || r.population == "scratch")
          continue;
        for (auto& [step, v] : r.retention) {
          agg[step].first += v;
          agg[step].second += 1;
        }
      }
      std::ofstream out(cfg.out_dir + "/retention_" + arch_variant_key(arch, pre) + ".csv");
      out << "step,mean_restricted_loss\n";
      for (auto& [step, v] : agg) out << step << "," << v.first / v.second << "\n";
    }
  }

  // --- summary json
  {
    nlohmann::json j;
    j["grammar"] = g.name;
    j["subgrammar_root"] = cfg.subgrammar_root;
    j["seeds"] = cfg.seeds;
    j["runs"] = nlohmann::json::array();
    for (const auto& r : report.runs) {
      nlohmann::json rr;
      rr["arch"] = r.arch;
      rr["population"] = r.population;
      rr["pretrain_epochs"] = r.pretrain_epochs;
      rr["seed"] = r.seed;
      rr["final_loss"] = r.final_loss;
      rr["final_kl"] = r.final_kl;
      rr["pre_continuation_restricted"] = r.pre_continuation_restricted;
      rr["max_restricted_during_continuation"] = r.max_restricted_during_continuation;
      j["runs"].push_back(rr);
    }
    report.summary_json = j.dump(2);
    std::ofstream out(cfg.out_dir + "/summary.json");
    out << report.summary_json << "\n";
    std::ofstream cka(cfg.out_dir + "/cka_table.csv");
    cka << report.cka_table_csv;
    std::ofstream cos(cfg.out_dir + "/cosine_table.csv");
    cos << report.cosine_table_csv;
    std::ofstream fig(cfg.out_dir + "/final_kl_pairs.csv");
    fig << report.fig7_csv;
  }
  return report;
}

}  // namespace pcfglab
