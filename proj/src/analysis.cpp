#include "pcfglab/analysis.hpp"

#include <cmath>
#include <sstream>

#include "pcfglab/errors.hpp"
#include "pcfglab/oracle.hpp"

namespace pcfglab {

CkaValue linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() != y.rows()) throw DataError("CKA needs row-aligned activation matrices");
  Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
  double cross = (yc.transpose() * xc).squaredNorm();
  double xx = (xc.transpose() * xc).squaredNorm();
  double yy = (yc.transpose() * yc).squaredNorm();
  CkaValue out;
  if (xx <= 0 || yy <= 0) return out;  // rank-0 input: undefined, reported
  out.value = cross / std::sqrt(xx * yy);
  out.defined = true;
  return out;
}

namespace {

// stacked per-sublayer activation matrices over an evaluation stream
struct Stacked {
  std::vector<Eigen::MatrixXd> attention, mlp;
};

Stacked stack_activations(const Transformer& m, const std::vector<std::vector<int>>& sentences) {
  int layers = m.config().layers;
  std::int64_t rows = 0;
  for (const auto& s : sentences) rows += static_cast<std::int64_t>(s.size());
  Stacked out;
  out.attention.assign(layers, Eigen::MatrixXd(rows, m.config().model_dim));
  out.mlp.assign(layers, Eigen::MatrixXd(rows, m.config().model_dim));
  std::int64_t at = 0;
  for (const auto& s : sentences) {
    ActivationRecord rec = m.capture_activations(s);
    for (int l = 0; l < layers; ++l) {
      out.attention[l].middleRows(at, s.size()) = rec.attention[l];
      out.mlp[l].middleRows(at, s.size()) = rec.mlp[l];
    }
    at += static_cast<std::int64_t>(s.size());
  }
  return out;
}

}  // namespace

CkaResult model_cka(const Transformer& a, const Transformer& b,
                    const std::vector<std::vector<int>>& sentences) {
  if (a.config().layers != b.config().layers)
    throw DataError("CKA comparison needs matching architectures");
  Stacked sa = stack_activations(a, sentences);
  Stacked sb = stack_activations(b, sentences);
  CkaResult out;
  for (int l = 0; l < a.config().layers; ++l) {
    out.attention.push_back(linear_cka(sa.attention[l], sb.attention[l]).value);
    out.mlp.push_back(linear_cka(sa.mlp[l], sb.mlp[l]).value);
  }
  for (double v : out.attention) out.mean_attention += v / out.attention.size();
  for (double v : out.mlp) out.mean_mlp += v / out.mlp.size();
  return out;
}

PopulationCka population_cka(const std::vector<const Transformer*>& models,
                             const std::vector<std::vector<int>>& sentences) {
  int n = static_cast<int>(models.size());
  if (n < 2) throw DataError("population CKA needs at least two models");
  PopulationCka out;
  out.pair_attention = Eigen::MatrixXd::Ones(n, n);
  out.pair_mlp = Eigen::MatrixXd::Ones(n, n);
  double sum_a = 0, sum_m = 0;
  int pairs = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      CkaResult r = model_cka(*models[i], *models[j], sentences);
      out.pair_attention(i, j) = out.pair_attention(j, i) = r.mean_attention;
      out.pair_mlp(i, j) = out.pair_mlp(j, i) = r.mean_mlp;
      sum_a += r.mean_attention;
      sum_m += r.mean_mlp;
      ++pairs;
    }
  out.mean_attention = sum_a / pairs;
  out.mean_mlp = sum_m / pairs;
  return out;
}

std::string CosineTable::to_csv() const {
  std::ostringstream out;
  out << "class,attention,mlp\n";
  for (const auto& [k, v] : rows) out << k << "," << v.first << "," << v.second << "\n";
  return out.str();
}

CosineTable cosine_protocol(
    const std::vector<const Transformer*>& models,
    const std::map<std::string, std::vector<std::vector<int>>>& classes,
    const std::vector<std::pair<std::string, std::string>>& cross_pairs) {
  for (const auto& [name, sents] : classes)
    if (sents.empty()) throw DataError("empty sequence class: " + name);

  // mean-pooled sublayer activations per sentence, one row per sentence
  struct Pooled {
    Eigen::MatrixXd attention, mlp;  // sentences x dim
  };
  auto pool = [&](const Transformer& m, const std::vector<std::vector<int>>& sents) {
    Pooled p;
    p.attention = Eigen::MatrixXd::Zero(sents.size(), m.config().model_dim);
    p.mlp = Eigen::MatrixXd::Zero(sents.size(), m.config().model_dim);
    for (std::size_t i = 0; i < sents.size(); ++i) {
      ActivationRecord rec = m.capture_activations(sents[i]);
      for (int l = 0; l < m.config().layers; ++l) {
        p.attention.row(i) += rec.attention[l].colwise().mean() / m.config().layers;
        p.mlp.row(i) += rec.mlp[l].colwise().mean() / m.config().layers;
      }
    }
    return p;
  };
  auto mean_pairwise = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, bool same) {
    double sum = 0;
    std::int64_t count = 0;
    for (int i = 0; i < a.rows(); ++i) {
      for (int j = same ? i + 1 : 0; j < b.rows(); ++j) {
        double na = a.row(i).norm(), nb = b.row(j).norm();
        if (na <= 0 || nb <= 0) continue;
        sum += a.row(i).dot(b.row(j)) / (na * nb);
        ++count;
      }
    }
    return count ? sum / count : 0.0;
  };

  CosineTable table;
  for (const Transformer* m : models) {
    std::map<std::string, Pooled> pooled;
    for (const auto& [name, sents] : classes) pooled[name] = pool(*m, sents);
    for (const auto& [name, sents] : classes) {
      const Pooled& p = pooled[name];
      auto& row = table.rows[name];
      row.first += mean_pairwise(p.attention, p.attention, true) / models.size();
      row.second += mean_pairwise(p.mlp, p.mlp, true) / models.size();
    }
    for (const auto& [a, b] : cross_pairs) {
      auto& row = table.rows["cross:" + a + "|" + b];
      row.first +=
          mean_pairwise(pooled.at(a).attention, pooled.at(b).attention, false) / models.size();
      row.second += mean_pairwise(pooled.at(a).mlp, pooled.at(b).mlp, false) / models.size();
    }
  }
  return table;
}

std::string DepthProbeCurve::to_csv() const {
  std::ostringstream out;
  out << "i,error\n";
  for (std::size_t k = 0; k < i.size(); ++k) out << i[k] << "," << error[k] << "\n";
  return out.str();
}

DepthProbeCurve depth_probe(const LanguageModel& q, const Grammar& g,
                            const DepthProbeSpec& spec) {
  int open = g.require_terminal("(");
  int close = g.require_terminal(")");
  int a = g.require_terminal("a");
  Oracle oracle(g);

  DepthProbeCurve curve;
  curve.metric = spec.use_kl ? "kl" : "tv";
  switch (spec.kind) {
    case ProbeCase::same_depth: curve.case_id = "same-depth"; break;
    case ProbeCase::deepening: curve.case_id = "deepening"; break;
    case ProbeCase::prefixed: curve.case_id = "prefixed"; break;
    case ProbeCase::faulty_prefix: curve.case_id = "faulty-prefix"; break;
  }

  std::vector<int> prefix;
  for (const auto& t : spec.prefix_tokens) prefix.push_back(g.require_terminal(t));

  for (int i = 0; i <= spec.i_max; ++i) {
    std::vector<int> ctx;
    std::vector<int> truth_ctx;
    switch (spec.kind) {
      case ProbeCase::same_depth:
        for (int k = 0; k < i; ++k) {
          ctx.push_back(open);
          ctx.push_back(a);
          ctx.push_back(close);
        }
        ctx.push_back(open);
        truth_ctx = ctx;
        break;
      case ProbeCase::deepening:
        ctx.assign(i + 1, open);
        truth_ctx = ctx;
        break;
      case ProbeCase::prefixed:
        ctx = prefix;
        for (int k = 0; k <= i; ++k) ctx.push_back(open);
        truth_ctx = ctx;
        break;
      case ProbeCase::faulty_prefix:
        ctx = prefix;
        for (int k = 0; k <= i; ++k) ctx.push_back(open);
        // ground truth comes from the clean deepening case
        truth_ctx.assign(i + 1, open);
        break;
    }
    TokenDistribution truth = oracle.next_token_dist(truth_ctx);
    TokenDistribution model = q.next_dist(ctx);
    double err;
    if (spec.use_kl) {
      err = 0;
      auto add = [&](double tp, double mp) {
        if (tp > 0) err += tp * (std::log(tp) - std::log(std::max(mp, 1e-300)));
      };
      for (std::size_t t = 0; t < truth.terminal_probs.size(); ++t)
        add(truth.terminal_probs[t], model.terminal_probs[t]);
      add(truth.eos, model.eos);
    } else {
      err = truth.tv_distance(model);
    }
    curve.i.push_back(i);
    curve.error.push_back(err);
  }
  return curve;
}

}  // namespace pcfglab
