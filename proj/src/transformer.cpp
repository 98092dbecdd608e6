#include "pcfglab/transformer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "pcfglab/errors.hpp"

namespace pcfglab {

namespace {

constexpr int kGradChunks = 8;  // fixed reduction layout, independent of threads

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

}  // namespace

struct Transformer::Cache {
  std::vector<int> ids;
  Eigen::MatrixXd x0;
  struct Layer {
    Eigen::MatrixXd x_attn_in;   // residual stream entering the block
    Eigen::MatrixXd ln1_hat;     // normalized rows
    Eigen::VectorXd ln1_rstd;
    Eigen::MatrixXd q, k, v;
    std::vector<Eigen::MatrixXd> probs;  // per head, L x L
    Eigen::MatrixXd heads_out;           // concatenated P V
    Eigen::MatrixXd x_mlp_in;
    Eigen::MatrixXd ln2_hat;
    Eigen::VectorXd ln2_rstd;
    Eigen::MatrixXd mlp_pre;  // before gelu
    Eigen::MatrixXd mlp_act;  // after gelu
  };
  std::vector<Layer> layers;
  std::vector<Eigen::MatrixXd> attn_mask, mlp_mask;  // dropout, training only
  Eigen::MatrixXd x_final;  // before the final layernorm
  Eigen::MatrixXd lnf_hat;
  Eigen::VectorXd lnf_rstd;
  Eigen::MatrixXd probs;  // softmax over the full vocabulary, per position
};

namespace {

// layernorm forward over rows; returns y, stores x_hat and 1/std
Eigen::MatrixXd layernorm(const Eigen::MatrixXd& x, const Eigen::MatrixXd& g,
                          const Eigen::MatrixXd& b, Eigen::MatrixXd& x_hat,
                          Eigen::VectorXd& rstd) {
  const double eps = 1e-5;
  int rows = static_cast<int>(x.rows()), cols = static_cast<int>(x.cols());
  x_hat.resize(rows, cols);
  rstd.resize(rows);
  Eigen::MatrixXd y(rows, cols);
  for (int i = 0; i < rows; ++i) {
    double mean = x.row(i).mean();
    double var = (x.row(i).array() - mean).square().mean();
    double r = 1.0 / std::sqrt(var + eps);
    rstd(i) = r;
    x_hat.row(i) = (x.row(i).array() - mean) * r;
    y.row(i) = x_hat.row(i).cwiseProduct(g.row(0)) + b.row(0);
  }
  return y;
}

// backward through layernorm; accumulates dg/db, returns dx
Eigen::MatrixXd layernorm_back(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& x_hat,
                               const Eigen::VectorXd& rstd, const Eigen::MatrixXd& g,
                               Eigen::MatrixXd& dg, Eigen::MatrixXd& db) {
  int rows = static_cast<int>(dy.rows()), cols = static_cast<int>(dy.cols());
  Eigen::MatrixXd dx(rows, cols);
  dg.row(0) += (dy.cwiseProduct(x_hat)).colwise().sum();
  db.row(0) += dy.colwise().sum();
  for (int i = 0; i < rows; ++i) {
    Eigen::RowVectorXd dxh = dy.row(i).cwiseProduct(g.row(0));
    double m1 = dxh.mean();
    double m2 = dxh.cwiseProduct(x_hat.row(i)).mean();
    dx.row(i) = (dxh.array() - m1 - x_hat.row(i).array() * m2) * rstd(i);
  }
  return dx;
}

}  // namespace

struct Transformer::Layout {
  static std::vector<std::pair<std::string, std::pair<int, int>>> spec(const ModelConfig& c,
                                                                       int vocab) {
    std::vector<std::pair<std::string, std::pair<int, int>>> s;
    s.push_back({"emb", {vocab, c.model_dim}});
    s.push_back({"pos", {c.max_context, c.model_dim}});
    for (int l = 0; l < c.layers; ++l) {
      std::string p = "l" + std::to_string(l) + ".";
      s.push_back({p + "ln1.g", {1, c.model_dim}});
      s.push_back({p + "ln1.b", {1, c.model_dim}});
      s.push_back({p + "wq", {c.model_dim, c.model_dim}});
      s.push_back({p + "bq", {1, c.model_dim}});
      s.push_back({p + "wk", {c.model_dim, c.model_dim}});
      s.push_back({p + "bk", {1, c.model_dim}});
      s.push_back({p + "wv", {c.model_dim, c.model_dim}});
      s.push_back({p + "bv", {1, c.model_dim}});
      s.push_back({p + "wo", {c.model_dim, c.model_dim}});
      s.push_back({p + "bo", {1, c.model_dim}});
      s.push_back({p + "ln2.g", {1, c.model_dim}});
      s.push_back({p + "ln2.b", {1, c.model_dim}});
      s.push_back({p + "w1", {c.model_dim, c.mlp_dim}});
      s.push_back({p + "b1", {1, c.mlp_dim}});
      s.push_back({p + "w2", {c.mlp_dim, c.model_dim}});
      s.push_back({p + "b2", {1, c.model_dim}});
    }
    s.push_back({"lnf.g", {1, c.model_dim}});
    s.push_back({"lnf.b", {1, c.model_dim}});
    if (!c.tied_output) s.push_back({"wout", {c.model_dim, vocab}});
    s.push_back({"bout", {1, vocab}});
    return s;
  }
};

Transformer::Transformer(const ModelConfig& cfg, const Vocab& vocab)
    : cfg_(cfg), vocab_(vocab) {
  if (cfg_.model_dim <= 0 || cfg_.heads <= 0 || cfg_.model_dim % cfg_.heads != 0)
    throw DataError("invalid dims: model_dim must be a positive multiple of heads");
  if (cfg_.layers <= 0 || cfg_.mlp_dim <= 0 || cfg_.max_context <= 2)
    throw DataError("invalid dims: layers, mlp_dim, max_context");
  if (cfg_.dropout < 0.0 || cfg_.dropout >= 1.0) throw DataError("invalid dropout");

  RngStream rng(cfg_.seed, 0x70f0);
  for (auto& [name, shape] : Layout::spec(cfg_, vocab_.size())) {
    names_.push_back(name);
    Eigen::MatrixXd w(shape.first, shape.second);
    bool is_gain = name.size() > 2 && name.substr(name.size() - 2) == ".g";
    bool is_bias = name.find(".b") != std::string::npos || name[0] == 'b';
    if (is_gain) {
      w.setOnes();
    } else if (is_bias) {
      w.setZero();
    } else {
      for (int i = 0; i < w.rows(); ++i)
        for (int j = 0; j < w.cols(); ++j) w(i, j) = 0.02 * rng.gaussian();
    }
    w_.push_back(std::move(w));
  }
  m_.resize(w_.size());
  v_.resize(w_.size());
  for (std::size_t i = 0; i < w_.size(); ++i) {
    m_[i] = Eigen::MatrixXd::Zero(w_[i].rows(), w_[i].cols());
    v_[i] = Eigen::MatrixXd::Zero(w_[i].rows(), w_[i].cols());
  }
}

int Transformer::idx(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  throw DataError("unknown parameter: " + name);
}

std::int64_t Transformer::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& w : w_) n += w.size();
  return n;
}

std::vector<int> Transformer::with_bos(const std::vector<int>& tokens) const {
  if (static_cast<int>(tokens.size()) + 1 > cfg_.max_context)
    throw DataError("context overflow: sequence needs " +
                    std::to_string(tokens.size() + 1) + " positions, max_context is " +
                    std::to_string(cfg_.max_context));
  std::vector<int> ids;
  ids.reserve(tokens.size() + 1);
  ids.push_back(vocab_.bos);
  for (int t : tokens) {
    if (t < 0 || t >= vocab_.size()) throw DataError("token id out of vocabulary");
    ids.push_back(t);
  }
  return ids;
}

Eigen::MatrixXd Transformer::forward(const std::vector<int>& ids, Cache* cache,
                                     ActivationRecord* record, RngStream* dropout_rng) const {
  const bool drop = dropout_rng != nullptr && cfg_.dropout > 0.0;
  const double keep = 1.0 - cfg_.dropout;
  auto draw_mask = [&](int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = dropout_rng->unit() < keep ? 1.0 / keep : 0.0;
    return m;
  };
  int L = static_cast<int>(ids.size());
  int d = cfg_.model_dim;
  int dh = d / cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const Eigen::MatrixXd& emb = w_[0];
  const Eigen::MatrixXd& pos = w_[1];
  Eigen::MatrixXd x(L, d);
  for (int i = 0; i < L; ++i) x.row(i) = emb.row(ids[i]) + pos.row(i);
  if (cache) {
    cache->ids = ids;
    cache->x0 = x;
    cache->layers.resize(cfg_.layers);
    if (drop) {
      cache->attn_mask.resize(cfg_.layers);
      cache->mlp_mask.resize(cfg_.layers);
    }
  }
  if (record) {
    record->attention.clear();
    record->mlp.clear();
  }

  int base = 2;
  for (int l = 0; l < cfg_.layers; ++l) {
    const Eigen::MatrixXd& g1 = w_[base + 0];
    const Eigen::MatrixXd& b1 = w_[base + 1];
    const Eigen::MatrixXd& wq = w_[base + 2];
    const Eigen::MatrixXd& bq = w_[base + 3];
    const Eigen::MatrixXd& wk = w_[base + 4];
    const Eigen::MatrixXd& bk = w_[base + 5];
    const Eigen::MatrixXd& wv = w_[base + 6];
    const Eigen::MatrixXd& bv = w_[base + 7];
    const Eigen::MatrixXd& wo = w_[base + 8];
    const Eigen::MatrixXd& bo = w_[base + 9];
    const Eigen::MatrixXd& g2 = w_[base + 10];
    const Eigen::MatrixXd& b2 = w_[base + 11];
    const Eigen::MatrixXd& w1 = w_[base + 12];
    const Eigen::MatrixXd& bb1 = w_[base + 13];
    const Eigen::MatrixXd& w2 = w_[base + 14];
    const Eigen::MatrixXd& bb2 = w_[base + 15];
    base += 16;

    Eigen::MatrixXd ln1_hat;
    Eigen::VectorXd ln1_rstd;
    if (cache) cache->layers[l].x_attn_in = x;
    Eigen::MatrixXd a1 = layernorm(x, g1, b1, ln1_hat, ln1_rstd);

    Eigen::MatrixXd q = (a1 * wq).rowwise() + bq.row(0);
    Eigen::MatrixXd k = (a1 * wk).rowwise() + bk.row(0);
    Eigen::MatrixXd v = (a1 * wv).rowwise() + bv.row(0);

    Eigen::MatrixXd heads_out(L, d);
    std::vector<Eigen::MatrixXd> probs(cfg_.heads);
    for (int h = 0; h < cfg_.heads; ++h) {
      auto qh = q.middleCols(h * dh, dh);
      auto kh = k.middleCols(h * dh, dh);
      auto vh = v.middleCols(h * dh, dh);
      Eigen::MatrixXd s = qh * kh.transpose() * scale;
      Eigen::MatrixXd p = Eigen::MatrixXd::Zero(L, L);
      for (int i = 0; i < L; ++i) {
        // causal: keys 0..i only
        double mx = s.row(i).head(i + 1).maxCoeff();
        double z = 0;
        for (int j = 0; j <= i; ++j) {
          double e = std::exp(s(i, j) - mx);
          p(i, j) = e;
          z += e;
        }
        p.row(i).head(i + 1) /= z;
      }
      heads_out.middleCols(h * dh, dh) = p * vh;
      probs[h] = std::move(p);
    }
    Eigen::MatrixXd attn = (heads_out * wo).rowwise() + bo.row(0);
    if (drop) {
      Eigen::MatrixXd mask = draw_mask(L, d);
      attn = attn.cwiseProduct(mask);
      if (cache) cache->attn_mask[l] = std::move(mask);
    }
    if (record && L > 1) record->attention.push_back(attn.bottomRows(L - 1));
    x += attn;

    Eigen::MatrixXd ln2_hat;
    Eigen::VectorXd ln2_rstd;
    if (cache) cache->layers[l].x_mlp_in = x;
    Eigen::MatrixXd a2 = layernorm(x, g2, b2, ln2_hat, ln2_rstd);
    Eigen::MatrixXd pre = (a2 * w1).rowwise() + bb1.row(0);
    Eigen::MatrixXd act = pre.unaryExpr([](double t) { return gelu(t); });
    Eigen::MatrixXd mlp = (act * w2).rowwise() + bb2.row(0);
    if (drop) {
      Eigen::MatrixXd mask = draw_mask(L, d);
      mlp = mlp.cwiseProduct(mask);
      if (cache) cache->mlp_mask[l] = std::move(mask);
    }
    if (record && L > 1) record->mlp.push_back(mlp.bottomRows(L - 1));
    x += mlp;

    if (cache) {
      auto& cl = cache->layers[l];
      cl.ln1_hat = std::move(ln1_hat);
      cl.ln1_rstd = std::move(ln1_rstd);
      cl.q = std::move(q);
      cl.k = std::move(k);
      cl.v = std::move(v);
      cl.probs = std::move(probs);
      cl.heads_out = std::move(heads_out);
      cl.ln2_hat = std::move(ln2_hat);
      cl.ln2_rstd = std::move(ln2_rstd);
      cl.mlp_pre = std::move(pre);
      cl.mlp_act = std::move(act);
    }
  }

  Eigen::MatrixXd lnf_hat;
  Eigen::VectorXd lnf_rstd;
  if (cache) cache->x_final = x;
  Eigen::MatrixXd f = layernorm(x, w_[idx("lnf.g")], w_[idx("lnf.b")], lnf_hat, lnf_rstd);
  Eigen::MatrixXd logits;
  if (cfg_.tied_output)
    logits = (f * w_[0].transpose()).rowwise() + w_[idx("bout")].row(0);
  else
    logits = (f * w_[idx("wout")]).rowwise() + w_[idx("bout")].row(0);
  if (cache) {
    cache->lnf_hat = std::move(lnf_hat);
    cache->lnf_rstd = std::move(lnf_rstd);
  }
  return logits;
}

TokenDistribution Transformer::next_dist(const std::vector<int>& prefix) const {
  auto ids = with_bos(prefix);
  Eigen::MatrixXd logits = forward(ids, nullptr);
  Eigen::RowVectorXd last = logits.row(logits.rows() - 1);
  // renormalize over terminals + EOS only; BOS/PAD mass is excluded
  int t = vocab_.n_terminals;
  double mx = last.head(t + 1).maxCoeff();
  TokenDistribution d;
  d.terminal_probs.assign(t, 0.0);
  double z = 0;
  for (int i = 0; i <= t; ++i) z += std::exp(last(i) - mx);
  for (int i = 0; i < t; ++i) d.terminal_probs[i] = std::exp(last(i) - mx) / z;
  d.eos = std::exp(last(t) - mx) / z;
  return d;
}

std::vector<double> Transformer::conditional_logprobs(const std::vector<int>& tokens) const {
  auto ids = with_bos(tokens);
  Eigen::MatrixXd logits = forward(ids, nullptr);
  int n = static_cast<int>(tokens.size());
  int t = vocab_.n_terminals;
  std::vector<double> out(n + 1);
  for (int i = 0; i <= n; ++i) {
    Eigen::RowVectorXd row = logits.row(i);
    double mx = row.head(t + 1).maxCoeff();
    double z = 0;
    for (int j = 0; j <= t; ++j) z += std::exp(row(j) - mx);
    int target = i < n ? tokens[i] : vocab_.eos;
    out[i] = row(target) - mx - std::log(z);
  }
  return out;
}

double Transformer::sequence_loss_and_grads(
    const std::vector<int>& tokens, const std::vector<std::string>* bucket_labels,
    std::vector<Eigen::MatrixXd>* grads,
    std::map<std::string, std::pair<double, std::int64_t>>* bucket_sums,
    RngStream* dropout_rng) const {
  auto ids = with_bos(tokens);
  Cache cache;
  Eigen::MatrixXd logits = forward(ids, grads ? &cache : nullptr, nullptr, dropout_rng);
  int L = static_cast<int>(ids.size());
  int n = static_cast<int>(tokens.size());
  if (!grads) {
    // evaluation: same renormalized head, no backward pass
    const int head_dim = vocab_.n_terminals + 1;
    double sum = 0;
    for (int i = 0; i <= n; ++i) {
      Eigen::RowVectorXd row = logits.row(i).head(head_dim);
      double mx = row.maxCoeff();
      double z = (row.array() - mx).exp().sum();
      int target = i < n ? tokens[i] : vocab_.eos;
      double ce = -(row(target) - mx - std::log(z));
      sum += ce;
      if (bucket_labels && bucket_sums) {
        auto& slot = (*bucket_sums)[(*bucket_labels)[i]];
        slot.first += ce;
        slot.second += 1;
      }
    }
    return sum;
  }
  int d = cfg_.model_dim;
  int dh = d / cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // the modeled distribution is over terminals + EOS; BOS/PAD logits are
  // excluded from the softmax entirely (same renormalization as next_dist)
  const int head = vocab_.n_terminals + 1;
  double loss_sum = 0;
  Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(L, vocab_.size());
  for (int i = 0; i < L; ++i) {
    Eigen::RowVectorXd row = logits.row(i).head(head);
    double mx = row.maxCoeff();
    Eigen::RowVectorXd e = (row.array() - mx).exp();
    double z = e.sum();
    int target = i < n ? tokens[i] : vocab_.eos;
    double ce = -(row(target) - mx - std::log(z));
    loss_sum += ce;
    dlogits.row(i).head(head) = e / z;
    dlogits(i, target) -= 1.0;
    if (bucket_labels && bucket_sums) {
      auto& slot = (*bucket_sums)[(*bucket_labels)[i]];
      slot.first += ce;
      slot.second += 1;
    }
  }

  auto& G = *grads;
  // output head and final layernorm
  Eigen::MatrixXd f = cache.lnf_hat;  // x_hat; recompute f = x_hat*g + b rowwise
  const Eigen::MatrixXd& gf = w_[idx("lnf.g")];
  const Eigen::MatrixXd& bf = w_[idx("lnf.b")];
  Eigen::MatrixXd fout(L, d);
  for (int i = 0; i < L; ++i)
    fout.row(i) = cache.lnf_hat.row(i).cwiseProduct(gf.row(0)) + bf.row(0);

  Eigen::MatrixXd df;
  if (cfg_.tied_output) {
    df = dlogits * w_[0];
    G[0] += dlogits.transpose() * fout;
  } else {
    df = dlogits * w_[idx("wout")].transpose();
    G[idx("wout")] += fout.transpose() * dlogits;
  }
  G[idx("bout")].row(0) += dlogits.colwise().sum();

  Eigen::MatrixXd dx = layernorm_back(df, cache.lnf_hat, cache.lnf_rstd, gf,
                                      G[idx("lnf.g")], G[idx("lnf.b")]);

  int base = 2 + 16 * (cfg_.layers - 1);
  for (int l = cfg_.layers - 1; l >= 0; --l, base -= 16) {
    const auto& cl = cache.layers[l];
    const Eigen::MatrixXd& g1 = w_[base + 0];
    const Eigen::MatrixXd& wq = w_[base + 2];
    const Eigen::MatrixXd& wk = w_[base + 4];
    const Eigen::MatrixXd& wv = w_[base + 6];
    const Eigen::MatrixXd& wo = w_[base + 8];
    const Eigen::MatrixXd& g2 = w_[base + 10];
    const Eigen::MatrixXd& w1 = w_[base + 12];
    const Eigen::MatrixXd& w2 = w_[base + 14];

    // mlp sublayer: x = x_mlp_in + gelu(ln2(x) w1 + b1) w2 + b2
    Eigen::MatrixXd dmlp = dx;  // gradient of the residual branch equals dx
    if (!cache.mlp_mask.empty()) dmlp = dmlp.cwiseProduct(cache.mlp_mask[l]);
    G[base + 15].row(0) += dmlp.colwise().sum();                    // b2
    G[base + 14] += cl.mlp_act.transpose() * dmlp;                  // w2
    Eigen::MatrixXd dact = dmlp * w2.transpose();
    Eigen::MatrixXd dpre =
        dact.cwiseProduct(cl.mlp_pre.unaryExpr([](double t) { return gelu_grad(t); }));
    G[base + 13].row(0) += dpre.colwise().sum();  // b1
    Eigen::MatrixXd a2(cl.ln2_hat.rows(), d);
    for (int i = 0; i < a2.rows(); ++i)
      a2.row(i) = cl.ln2_hat.row(i).cwiseProduct(g2.row(0)) + w_[base + 11].row(0);
    G[base + 12] += a2.transpose() * dpre;  // w1
    Eigen::MatrixXd da2 = dpre * w1.transpose();
    dx += layernorm_back(da2, cl.ln2_hat, cl.ln2_rstd, g2, G[base + 10], G[base + 11]);

    // attention sublayer
    Eigen::MatrixXd dattn = dx;
    if (!cache.attn_mask.empty()) dattn = dattn.cwiseProduct(cache.attn_mask[l]);
    G[base + 9].row(0) += dattn.colwise().sum();          // bo
    G[base + 8] += cl.heads_out.transpose() * dattn;      // wo
    Eigen::MatrixXd dheads = dattn * wo.transpose();
    Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(L, d);
    Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(L, d);
    Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(L, d);
    for (int h = 0; h < cfg_.heads; ++h) {
      auto qh = cl.q.middleCols(h * dh, dh);
      auto kh = cl.k.middleCols(h * dh, dh);
      auto vh = cl.v.middleCols(h * dh, dh);
      const Eigen::MatrixXd& p = cl.probs[h];
      Eigen::MatrixXd doh = dheads.middleCols(h * dh, dh);
      Eigen::MatrixXd dp = doh * vh.transpose();
      dv.middleCols(h * dh, dh) = p.transpose() * doh;
      Eigen::MatrixXd ds(L, L);
      for (int i = 0; i < L; ++i) {
        double dot = dp.row(i).cwiseProduct(p.row(i)).sum();
        ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
      }
      dq.middleCols(h * dh, dh) = ds * kh * scale;
      dk.middleCols(h * dh, dh) = ds.transpose() * qh * scale;
    }
    G[base + 3].row(0) += dq.colwise().sum();  // bq
    G[base + 5].row(0) += dk.colwise().sum();  // bk
    G[base + 7].row(0) += dv.colwise().sum();  // bv
    Eigen::MatrixXd a1(cl.ln1_hat.rows(), d);
    for (int i = 0; i < a1.rows(); ++i)
      a1.row(i) = cl.ln1_hat.row(i).cwiseProduct(g1.row(0)) + w_[base + 1].row(0);
    G[base + 2] += a1.transpose() * dq;  // wq
    G[base + 4] += a1.transpose() * dk;  // wk
    G[base + 6] += a1.transpose() * dv;  // wv
    Eigen::MatrixXd da1 = dq * wq.transpose() + dk * wk.transpose() + dv * wv.transpose();
    dx += layernorm_back(da1, cl.ln1_hat, cl.ln1_rstd, g1, G[base + 0], G[base + 1]);
  }

  // embeddings
  for (int i = 0; i < L; ++i) {
    G[0].row(ids[i]) += dx.row(i);
    G[1].row(i) += dx.row(i);
  }
  return loss_sum;
}

void Transformer::adam_step(const std::vector<Eigen::MatrixXd>& grads,
                            const OptimizerConfig& opt) {
  ++step_;
  double lr = opt.lr;
  if (opt.warmup_steps > 0)
    lr *= std::min(1.0, static_cast<double>(step_) / opt.warmup_steps);
  double bc1 = 1.0 - std::pow(opt.beta1, step_);
  double bc2 = 1.0 - std::pow(opt.beta2, step_);
  for (std::size_t i = 0; i < w_.size(); ++i) {
    m_[i] = opt.beta1 * m_[i] + (1.0 - opt.beta1) * grads[i];
    v_[i] = opt.beta2 * v_[i].array().matrix() +
            (1.0 - opt.beta2) * grads[i].cwiseProduct(grads[i]);
    Eigen::ArrayXXd mhat = m_[i].array() / bc1;
    Eigen::ArrayXXd vhat = v_[i].array() / bc2;
    w_[i].array() -= lr * mhat / (vhat.sqrt() + opt.eps);
  }
}

std::vector<TrainLogRow> Transformer::train(const Corpus& corpus, const Grammar& g,
                                            const TrainConfig& cfg) {
  if (corpus.sentences.empty()) throw DataError("empty training corpus");
  for (const auto& s : corpus.sentences)
    for (int t : s.tokens)
      if (t >= vocab_.n_terminals) throw DataError("corpus token outside model vocabulary");

  std::int64_t n = static_cast<std::int64_t>(corpus.sentences.size());
  int per_epoch = static_cast<int>((n + cfg.batch_size - 1) / cfg.batch_size);
  int steps = cfg.steps > 0 ? cfg.steps : cfg.epochs * per_epoch;
  if (steps <= 0) throw DataError("train config needs steps or epochs");

  // bucket labels per sentence, resolved once
  std::vector<std::vector<std::string>> labels(n);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& s = corpus.sentences[i];
    labels[i].resize(s.bucket.size());
    for (std::size_t slot = 0; slot < s.bucket.size(); ++slot)
      labels[i][slot] = s.bucket_label(g, static_cast<int>(slot));
  }

  std::vector<TrainLogRow> log;
  std::vector<std::int64_t> order(n);
  for (std::int64_t i = 0; i < n; ++i) order[i] = i;
  std::int64_t cursor = 0;
  std::uint64_t epoch = 0;
  auto reshuffle = [&] {
    RngStream rng(cfg.shuffle_seed, 0xe90c + epoch);
    for (std::int64_t i = n - 1; i > 0; --i)
      std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
    cursor = 0;
    ++epoch;
  };
  reshuffle();

  auto t0 = std::chrono::steady_clock::now();
  for (int step = 0; step < steps; ++step) {
    std::vector<std::int64_t> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= n) reshuffle();
      batch.push_back(order[cursor++]);
    }

    // fixed chunk layout so reductions are identical for any thread count
    struct ChunkAcc {
      std::vector<Eigen::MatrixXd> grads;
      double loss = 0;
      std::int64_t slots = 0;
      std::map<std::string, std::pair<double, std::int64_t>> buckets;
      std::string error;
    };
    std::vector<ChunkAcc> chunks(kGradChunks);
    parallel_for(cfg.exec, kGradChunks, [&](std::int64_t c) {
      auto& acc = chunks[c];
      acc.grads.resize(w_.size());
      for (std::size_t i = 0; i < w_.size(); ++i)
        acc.grads[i] = Eigen::MatrixXd::Zero(w_[i].rows(), w_[i].cols());
      std::int64_t lo = c * cfg.batch_size / kGradChunks;
      std::int64_t hi = (c + 1) * cfg.batch_size / kGradChunks;
      for (std::int64_t b = lo; b < hi; ++b) {
        const auto& s = corpus.sentences[batch[b]];
        try {
          RngStream drop_rng(cfg_.seed ^ 0xd309d309u,
                             (static_cast<std::uint64_t>(step_) << 20) ^
                                 static_cast<std::uint64_t>(b));
          acc.loss += sequence_loss_and_grads(s.tokens, &labels[batch[b]], &acc.grads,
                                              &acc.buckets,
                                              cfg_.dropout > 0 ? &drop_rng : nullptr);
          acc.slots += static_cast<std::int64_t>(s.tokens.size()) + 1;
        } catch (const std::exception& e) {
          acc.error = e.what();
          return;
        }
      }
    });
    std::vector<Eigen::MatrixXd> grads(w_.size());
    for (std::size_t i = 0; i < w_.size(); ++i)
      grads[i] = Eigen::MatrixXd::Zero(w_[i].rows(), w_[i].cols());
    double loss_sum = 0;
    std::int64_t slots = 0;
    std::map<std::string, std::pair<double, std::int64_t>> buckets;
    for (const auto& acc : chunks) {
      if (!acc.error.empty())
        throw NumericalError("step " + std::to_string(step_) + ": " + acc.error);
      for (std::size_t i = 0; i < w_.size(); ++i) grads[i] += acc.grads[i];
      loss_sum += acc.loss;
      slots += acc.slots;
      for (const auto& [k, v2] : acc.buckets) {
        buckets[k].first += v2.first;
        buckets[k].second += v2.second;
      }
    }
    double mean_loss = loss_sum / static_cast<double>(slots);
    if (!std::isfinite(mean_loss))
      throw NumericalError("non-finite loss at step " + std::to_string(step_) + ", batch " +
                           std::to_string(step));
    for (auto& gmat : grads) gmat /= static_cast<double>(slots);
    adam_step(grads, cfg.opt);

    if (step % cfg.log_every == 0 || step + 1 == steps) {
      TrainLogRow row;
      row.step = step_;
      row.loss = mean_loss;
      for (const auto& [k, v2] : buckets)
        row.bucket_loss[k] = v2.first / std::max<std::int64_t>(1, v2.second);
      row.lr = cfg.opt.lr *
               (cfg.opt.warmup_steps > 0
                    ? std::min(1.0, static_cast<double>(step_) / cfg.opt.warmup_steps)
                    : 1.0);
      row.wallclock_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log.push_back(std::move(row));
    }
  }
  return log;
}

EvalResult Transformer::evaluate(const Corpus& corpus, const Grammar& g, Exec exec) const {
  std::int64_t n = static_cast<std::int64_t>(corpus.sentences.size());
  std::vector<double> ce(n, 0.0);
  std::vector<std::map<std::string, std::pair<double, std::int64_t>>> buckets(n);
  std::vector<std::string> errors(n);
  parallel_for(exec, n, [&](std::int64_t i) {
    const auto& s = corpus.sentences[i];
    try {
      std::vector<std::string> labels(s.bucket.size());
      for (std::size_t slot = 0; slot < s.bucket.size(); ++slot)
        labels[slot] = s.bucket_label(g, static_cast<int>(slot));
      ce[i] = sequence_loss_and_grads(s.tokens, &labels, nullptr, &buckets[i]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  EvalResult out;
  for (std::int64_t i = 0; i < n; ++i) {
    if (!errors[i].empty()) throw DataError(errors[i]);
    out.total_ce += ce[i];
    out.slots += static_cast<std::int64_t>(corpus.sentences[i].tokens.size()) + 1;
    for (const auto& [k, v2] : buckets[i]) {
      out.bucket_ce[k] += v2.first;
      out.bucket_slots[k] += v2.second;
    }
  }
  out.mean_ce = out.total_ce / std::max<std::int64_t>(1, out.slots);
  for (auto& [k, v2] : out.bucket_ce) v2 /= std::max<std::int64_t>(1, out.bucket_slots[k]);
  return out;
}

ActivationRecord Transformer::capture_activations(const std::vector<int>& tokens) const {
  auto ids = with_bos(tokens);
  ActivationRecord rec;
  forward(ids, nullptr, &rec);
  return rec;
}

std::vector<Eigen::MatrixXd> Transformer::batch_gradients(
    const std::vector<std::vector<int>>& batch) const {
  std::vector<Eigen::MatrixXd> grads(w_.size());
  for (std::size_t i = 0; i < w_.size(); ++i)
    grads[i] = Eigen::MatrixXd::Zero(w_[i].rows(), w_[i].cols());
  std::int64_t slots = 0;
  for (const auto& tokens : batch) {
    sequence_loss_and_grads(tokens, nullptr, &grads, nullptr);
    slots += static_cast<std::int64_t>(tokens.size()) + 1;
  }
  for (auto& gmat : grads) gmat /= static_cast<double>(slots);
  return grads;
}

double Transformer::grad_check(const std::vector<std::vector<int>>& tiny_batch, double h) {
  auto loss_of = [&]() {
    double sum = 0;
    std::int64_t slots = 0;
    for (const auto& tokens : tiny_batch) {
      sum += sequence_loss_and_grads(tokens, nullptr, nullptr, nullptr);
      slots += static_cast<std::int64_t>(tokens.size()) + 1;
    }
    return sum / static_cast<double>(slots);
  };
  std::vector<Eigen::MatrixXd> grads(w_.size());
  for (std::size_t i = 0; i < w_.size(); ++i)
    grads[i] = Eigen::MatrixXd::Zero(w_[i].rows(), w_[i].cols());
  double sum = 0;
  std::int64_t slots = 0;
  for (const auto& tokens : tiny_batch) {
    sum += sequence_loss_and_grads(tokens, nullptr, &grads, nullptr);
    slots += static_cast<std::int64_t>(tokens.size()) + 1;
  }
  for (auto& gmat : grads) gmat /= static_cast<double>(slots);
  (void)sum;

  double worst = 0;
  for (std::size_t p = 0; p < w_.size(); ++p) {
    for (int i = 0; i < w_[p].rows(); ++i)
      for (int j = 0; j < w_[p].cols(); ++j) {
        double keep = w_[p](i, j);
        w_[p](i, j) = keep + h;
        double up = loss_of();
        w_[p](i, j) = keep - h;
        double down = loss_of();
        w_[p](i, j) = keep;
        double fd = (up - down) / (2 * h);
        double an = grads[p](i, j);
        double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        worst = std::max(worst, rel);
      }
  }
  return worst;
}

namespace {
void put_blob(std::ofstream& out, const Eigen::MatrixXd& m) {
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
}
void get_blob(std::ifstream& in, Eigen::MatrixXd& m) {
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
}
}  // namespace

void Transformer::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  nlohmann::json j;
  j["format"] = "pcfglab-checkpoint-v1";
  j["dtype"] = "float64";
  j["config"] = {{"layers", cfg_.layers},     {"heads", cfg_.heads},
                 {"model_dim", cfg_.model_dim}, {"mlp_dim", cfg_.mlp_dim},
                 {"max_context", cfg_.max_context}, {"dropout", cfg_.dropout},
                 {"seed", cfg_.seed},         {"tied_output", cfg_.tied_output}};
  j["vocab"] = {{"symbols", vocab_.symbols}, {"n_terminals", vocab_.n_terminals}};
  j["step"] = step_;
  j["tensors"] = nlohmann::json::array();
  for (std::size_t i = 0; i < w_.size(); ++i)
    j["tensors"].push_back({{"name", names_[i]},
                            {"rows", w_[i].rows()},
                            {"cols", w_[i].cols()}});
  std::string header = j.dump();
  out << header << "\n";
  for (const auto& t : w_) put_blob(out, t);
  for (const auto& t : m_) put_blob(out, t);
  for (const auto& t : v_) put_blob(out, t);
  if (!out) throw DataError("checkpoint write failed: " + path);
}

Transformer Transformer::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::string header;
  std::getline(in, header);
  nlohmann::json j = nlohmann::json::parse(header);
  if (j.value("format", "") != "pcfglab-checkpoint-v1")
    throw DataError("not a checkpoint file: " + path);
  ModelConfig cfg;
  cfg.layers = j["config"]["layers"];
  cfg.heads = j["config"]["heads"];
  cfg.model_dim = j["config"]["model_dim"];
  cfg.mlp_dim = j["config"]["mlp_dim"];
  cfg.max_context = j["config"]["max_context"];
  cfg.dropout = j["config"]["dropout"];
  cfg.seed = j["config"]["seed"];
  cfg.tied_output = j["config"]["tied_output"];
  Vocab vocab;
  vocab.symbols = j["vocab"]["symbols"].get<std::vector<std::string>>();
  vocab.n_terminals = j["vocab"]["n_terminals"];
  vocab.eos = vocab.n_terminals;
  vocab.bos = vocab.n_terminals + 1;
  vocab.pad = vocab.n_terminals + 2;
  Transformer model(cfg, vocab);
  model.step_ = j["step"];
  std::size_t k = 0;
  for (const auto& t : j["tensors"]) {
    if (k >= model.w_.size() || model.names_[k] != t["name"].get<std::string>() ||
        model.w_[k].rows() != t["rows"].get<int>() || model.w_[k].cols() != t["cols"].get<int>())
      throw DataError("checkpoint tensor layout mismatch");
    ++k;
  }
  for (auto& t : model.w_) get_blob(in, t);
  for (auto& t : model.m_) get_blob(in, t);
  for (auto& t : model.v_) get_blob(in, t);
  if (!in) throw DataError("checkpoint truncated: " + path);
  return model;
}

}  // namespace pcfglab
