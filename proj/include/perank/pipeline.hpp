#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "decoding.hpp"
#include "evaluation.hpp"
#include "lm.hpp"
#include "projector.hpp"
#include "retrieval.hpp"
#include "training.hpp"

namespace perank {

enum class InitMode { independent, shared_lexicon };

inline std::string init_mode_name(InitMode m) { return m == InitMode::independent ? "independent" : "shared-lexicon"; }
inline InitMode parse_init_mode(const std::string& s) {
  if (s == "independent") return InitMode::independent;
  if (s == "shared-lexicon") return InitMode::shared_lexicon;
  throw UsageError("unknown init mode '" + s + "'");
}

struct ModelConfig {
  std::size_t hash_size = default_hash_size;
  std::size_t d_enc = 64;
  std::size_t d_lm = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 0;  // 0 means 4 * d_lm
  std::size_t max_seq = 512;
  Pooling pooling = Pooling::mean;
  Activation activation = Activation::gelu;
  InitMode init = InitMode::shared_lexicon;
  double embed_scale = 0.1;
};

struct Models {
  ToyEncoder enc;
  Projector proj;
  ToyLm lm;
  Stage stage = Stage::none;
  std::uint64_t seed = 0;
};

namespace detail {

// d_lm x d_enc matrix with orthonormal columns (or rows when d_enc > d_lm).
inline Matrix random_orthonormal(std::size_t rows, std::size_t cols, Rng& rng) {
  const bool by_cols = cols <= rows;
  const std::size_t nvec = by_cols ? cols : rows, len = by_cols ? rows : cols;
  std::vector<std::vector<double>> vs;
  while (vs.size() < nvec) {
    std::vector<double> v(len);
    for (double& x : v) x = rng.normal();
    for (const auto& u : vs) {
      const double c = dot(u, v);
      for (std::size_t i = 0; i < len; ++i) v[i] -= c * u[i];
    }
    const double nrm = std::sqrt(dot(v, v));
    if (nrm < 1e-8) continue;
    for (double& x : v) x /= nrm;
    vs.push_back(std::move(v));
  }
  Matrix m(rows, cols);
  for (std::size_t a = 0; a < nvec; ++a)
    for (std::size_t i = 0; i < len; ++i) (by_cols ? m(i, a) : m(a, i)) = vs[a][i];
  return m;
}

}  // namespace detail

// Builds encoder, projector and LM from one seed. With the shared-lexicon
// init the encoder rows and the LM token rows are two views (a rotation and a
// scaling) of one latent vector per hashed token, and the vocabulary head
// starts as a copy of the token table.
inline Models make_models(const ModelConfig& mc, std::uint64_t seed) {
  Models m{ToyEncoder(mc.hash_size, mc.d_enc, mc.pooling), Projector(mc.d_enc, mc.d_lm, mc.d_lm, mc.activation),
           ToyLm(LmConfig{mc.hash_size, mc.d_lm, mc.n_layers, mc.n_heads, mc.max_seq, mc.d_ff, 1e-5}), Stage::none, seed};
  Rng root(seed);
  Rng enc_rng = root.split(), proj_rng = root.split(), lm_rng = root.split(), lex_rng = root.split();
  m.enc.init_random(enc_rng);
  m.proj.init(proj_rng);
  m.lm.init(lm_rng, mc.embed_scale);
  if (mc.init == InitMode::shared_lexicon) {
    const std::size_t rows = mc.hash_size + 1;
    Matrix Z(rows, mc.d_lm);
    for (double& v : Z.data) v = lex_rng.normal();
    const Matrix A = detail::random_orthonormal(mc.d_lm, mc.d_enc, lex_rng);
    m.enc.table().value = matmul(Z, A);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < mc.d_lm; ++j) {
        m.lm.tok.value(i, j) = mc.embed_scale * Z(i, j);
        m.lm.head.value(j, i) = mc.embed_scale * Z(i, j);
      }
  }
  m.enc.table().trainable = false;
  return m;
}

inline RunFile first_stage_run(const Retriever& r, const std::vector<Query>& qs, std::size_t k, Backend backend,
                               const std::string& tag) {
  RunFile run;
  run.tag = tag;
  for (const auto& q : qs)
    for (const auto& h : r.retrieve_topk(q.text, k, backend)) run.queries[q.id].push_back({r.corpus()[h.doc].id, h.score});
  return run;
}

struct RerankOutcome {
  RunFile run;
  std::vector<TokenStats> stats;  // per query
};

// Reranks the first-stage top-k of every query. Run scores are descending
// ranks so the file stays consistent; within-window probabilities are not
// comparable across windows.
inline RerankOutcome rerank_queries(const Models& m, const Retriever& r, const std::vector<Query>& qs, std::size_t k, Backend backend,
                                    WindowSchedule sched, const std::string& tag = "perank") {
  RerankOutcome out;
  out.run.tag = tag;
  for (const auto& q : qs) {
    const auto hits = r.retrieve_topk(q.text, k, backend);
    std::vector<Embedding> es;
    for (const auto& h : hits) es.push_back(h.embedding);
    const auto rl = sliding_window_rerank(m.lm, m.proj, tokenize(q.text, m.enc.hash_size()), es, sched);
    const auto order = rl.order();
    for (std::size_t i = 0; i < order.size(); ++i)
      out.run.queries[q.id].push_back({r.corpus()[hits[order[i]].doc].id, static_cast<double>(order.size() - i)});
    out.stats.push_back(rl.stats);
  }
  return out;
}

inline std::vector<AlignmentSample> alignment_samples(const Corpus& c, const ToyEncoder& enc) {
  std::vector<AlignmentSample> out;
  for (const auto& p : c.passages()) out.push_back(make_alignment_sample(p.full_text(), enc));
  return out;
}

}  // namespace perank
