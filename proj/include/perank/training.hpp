#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <ostream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "decoding.hpp"
#include "lm.hpp"
#include "projector.hpp"
#include "retrieval.hpp"

namespace perank {

enum class Stage { none, align, rank };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::align: return "align";
    case Stage::rank: return "rank";
    case Stage::none: break;
  }
  return "none";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "align") return Stage::align;
  if (s == "rank") return Stage::rank;
  if (s == "none") return Stage::none;
  throw DataError("unknown training stage '" + s + "'");
}

// align: projector only; rank: projector + LM. The encoder is always frozen.
inline void configure_stage(Stage stage, ToyLm& lm, Projector& proj, ToyEncoder& enc) {
  set_trainable(proj.params(), stage != Stage::none);
  set_trainable(lm.params(), stage == Stage::rank);
  enc.table().trainable = false;
}

struct AlignmentSample {
  std::string text;
  std::vector<int> tokens;
  Embedding embedding;
};

inline AlignmentSample make_alignment_sample(const std::string& text, const ToyEncoder& enc) {
  AlignmentSample s{text, tokenize(text, enc.hash_size()), {}};
  if (s.tokens.empty()) throw DataError("alignment target is empty");
  s.embedding = enc.encode_tokens(s.tokens);
  return s;
}

struct RankSample {
  Query query;
  std::vector<Passage> passages;
  std::vector<Embedding> embeddings;
  std::vector<std::vector<int>> contents;
  std::vector<int> query_tokens;
  std::vector<std::size_t> golden;  // candidate indices, most relevant first

  std::size_t size() const { return passages.size(); }
};

inline void check_permutation(const std::vector<std::size_t>& g, std::size_t n) {
  if (g.size() != n) throw DataError("golden ranking has " + std::to_string(g.size()) + " entries for " + std::to_string(n) + " passages");
  std::vector<bool> seen(n, false);
  for (auto i : g) {
    if (i >= n || seen[i]) throw DataError("golden ranking is not a permutation");
    seen[i] = true;
  }
}

inline RankSample make_rank_sample(Query q, std::vector<Passage> ps, std::vector<std::size_t> golden, const ToyEncoder& enc) {
  RankSample s;
  s.query = std::move(q);
  s.passages = std::move(ps);
  if (s.passages.empty()) throw DataError("rank sample without passages");
  check_permutation(golden, s.passages.size());
  s.golden = std::move(golden);
  s.query_tokens = tokenize(s.query.text, enc.hash_size());
  for (const auto& p : s.passages) {
    s.contents.push_back(tokenize(p.full_text(), enc.hash_size()));
    s.embeddings.push_back(enc.encode_tokens(s.contents.back()));
  }
  return s;
}

struct LossOptions {
  bool backward = true;
  double grad_scale = 1.0;  // applied to every gradient, e.g. 1/batch
};

namespace detail {

// One teacher-forced pass: prompt followed by the golden prefix g_1..g_{n-1}.
struct Branch {
  std::vector<Slot> slots;
  ToyLm::Trace trace;
  Matrix H;
  std::size_t prompt_len = 0;
  std::vector<std::vector<double>> logits;  // step i: logits over golden[i..n)
};

inline Branch run_branch(const ToyLm& lm, const Matrix& V, std::vector<Slot> prompt, const std::vector<std::size_t>& golden,
                         bool keep_trace) {
  const std::size_t n = golden.size();
  if (prompt.size() + n - 1 > lm.max_seq())
    throw Error("window too large: " + std::to_string(prompt.size() + n - 1) + " positions for max_seq " + std::to_string(lm.max_seq()));
  Branch b;
  b.prompt_len = prompt.size();
  b.slots = std::move(prompt);
  for (std::size_t i = 0; i + 1 < n; ++i)
    b.slots.push_back({Origin::ranked_special, -1, static_cast<int>(golden[i]), Provenance::golden});
  const auto seq = materialize(b.slots, lm, V);
  b.H = lm.forward(seq.vectors, keep_trace ? &b.trace : nullptr);
  const std::size_t d = V.cols;
  for (std::size_t i = 0; i < n; ++i) {
    const double* h = b.H.row(b.prompt_len - 1 + i);
    std::vector<double> lg;
    for (std::size_t k = i; k < n; ++k) lg.push_back(dot(h, V.row(golden[k]), d));
    b.logits.push_back(std::move(lg));
  }
  return b;
}

// Pushes per-step logit gradients back through the LM into dV.
inline void backward_branch(ToyLm& lm, const Branch& b, const Matrix& V, const std::vector<std::size_t>& golden,
                            const std::vector<std::vector<double>>& dlogits, Matrix& dV) {
  const std::size_t n = golden.size(), d = V.cols;
  Matrix dH(b.H.rows, d);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t row = b.prompt_len - 1 + i;
    const double* h = b.H.row(row);
    double* dh = dH.row(row);
    for (std::size_t k = i; k < n; ++k) {
      const double g = dlogits[i][k - i];
      if (g == 0.0) continue;
      const double* v = V.row(golden[k]);
      double* dv = dV.row(golden[k]);
      for (std::size_t u = 0; u < d; ++u) {
        dh[u] += g * v[u];
        dv[u] += g * h[u];
      }
    }
  }
  Matrix dX = lm.backward(b.trace, dH);
  scatter_input_grad(b.slots, dX, lm, dV);
}

inline std::vector<Slot> rank_prompt(const RankSample& s, bool include_content, std::size_t hash_size,
                                     const RankTemplate* tpl = nullptr) {
  const RankTemplate t = tpl ? *tpl : (include_content ? rank_content_template() : rank_embedding_template());
  return render_rank(t, s.query_tokens, s.size(), include_content ? &s.contents : nullptr, hash_size);
}

}  // namespace detail

// Sum over target tokens of -log p(token | prompt with the projected passage, earlier tokens).
inline double alignment_loss(ToyLm& lm, Projector& proj, const AlignmentSample& s, std::size_t variant,
                             const LossOptions& opt = {}) {
  if (s.tokens.empty()) throw Error("alignment_loss: empty target");
  Matrix E(1, s.embedding.size());
  std::copy(s.embedding.begin(), s.embedding.end(), E.row(0));
  const Matrix V = proj.project(E);
  auto slots = render_align(variant, lm.config().hash_size);
  const std::size_t P = slots.size(), m = s.tokens.size();
  for (std::size_t i = 0; i + 1 < m; ++i) slots.push_back({Origin::content, s.tokens[i]});
  if (slots.size() > lm.max_seq()) throw Error("alignment sample exceeds max_seq");
  const auto seq = materialize(slots, lm, V);
  ToyLm::Trace tr;
  const Matrix H = lm.forward(seq.vectors, opt.backward ? &tr : nullptr);
  Matrix Hs(m, lm.d_lm());
  for (std::size_t i = 0; i < m; ++i) std::copy(H.row(P - 1 + i), H.row(P - 1 + i) + H.cols, Hs.row(i));
  Matrix logits = matmul(Hs, lm.head.value);
  double loss = 0.0;
  Matrix dlog(m, logits.cols);
  for (std::size_t i = 0; i < m; ++i) {
    const auto lp = log_softmax(logits.row_vec(i));
    const auto t = static_cast<std::size_t>(s.tokens[i]);
    loss -= lp[t];
    for (std::size_t j = 0; j < lp.size(); ++j) dlog(i, j) = opt.grad_scale * std::exp(lp[j]);
    dlog(i, t) -= opt.grad_scale;
  }
  if (!opt.backward) return loss;
  if (lm.head.trainable) matmul_at_acc(Hs, dlog, lm.head.grad);
  const Matrix dHs = matmul_bt(dlog, lm.head.value);
  Matrix dH(H.rows, H.cols);
  for (std::size_t i = 0; i < m; ++i) std::copy(dHs.row(i), dHs.row(i) + dHs.cols, dH.row(P - 1 + i));
  const Matrix dX = lm.backward(tr, dH);
  Matrix dV(1, V.cols);
  scatter_input_grad(slots, dX, lm, dV);
  proj.project_backward(dV);
  return loss;
}

// Distribution at 1-based step i over golden[i-1..n), conditioned on the golden prefix.
inline std::vector<double> rank_step_distribution(const ToyLm& lm, const Projector& proj, const RankSample& s, std::size_t step,
                                                  bool include_content) {
  const std::size_t n = s.size();
  if (step < 1 || step > n) throw Error("rank_step_distribution: step " + std::to_string(step) + " outside 1.." + std::to_string(n));
  const Matrix V = proj.apply(stack_embeddings(s.embeddings));
  const auto b = detail::run_branch(lm, V, detail::rank_prompt(s, include_content, lm.config().hash_size), s.golden, false);
  return softmax(b.logits[step - 1]);
}

// Slots of the teacher-forced rank input, exposed for provenance inspection.
inline std::vector<Slot> teacher_forced_slots(const RankSample& s, bool include_content, std::size_t hash_size) {
  auto slots = detail::rank_prompt(s, include_content, hash_size);
  for (std::size_t i = 0; i + 1 < s.size(); ++i)
    slots.push_back({Origin::ranked_special, -1, static_cast<int>(s.golden[i]), Provenance::golden});
  return slots;
}

struct LossParts {
  double total = 0.0, rank = 0.0, content = 0.0, kl = 0.0;
};

// ListMLE over one branch: -sum_i log softmax(logits_i)[0].
inline double listmle_rank_loss(ToyLm& lm, Projector& proj, const RankSample& s, const LossOptions& opt = {},
                                const RankTemplate* tpl = nullptr, bool include_content = false) {
  const Matrix V = proj.project(stack_embeddings(s.embeddings));
  auto b = detail::run_branch(lm, V, detail::rank_prompt(s, include_content, lm.config().hash_size, tpl), s.golden, opt.backward);
  double loss = 0.0;
  std::vector<std::vector<double>> dl;
  for (const auto& lg : b.logits) {
    const auto lp = log_softmax(lg);
    loss -= lp[0];
    std::vector<double> g(lp.size());
    for (std::size_t k = 0; k < lp.size(); ++k) g[k] = opt.grad_scale * (std::exp(lp[k]) - (k == 0 ? 1.0 : 0.0));
    dl.push_back(std::move(g));
  }
  if (opt.backward) {
    Matrix dV(V.rows, V.cols);
    detail::backward_branch(lm, b, V, s.golden, dl, dV);
    proj.project_backward(dV);
  }
  return loss;
}

inline double content_rank_loss(ToyLm& lm, Projector& proj, const RankSample& s, const LossOptions& opt = {},
                                const RankTemplate* tpl = nullptr) {
  return listmle_rank_loss(lm, proj, s, opt, tpl, true);
}

namespace detail {

inline double kl_divergence(const std::vector<double>& lp, const std::vector<double>& lq) {
  double kl = 0.0;
  for (std::size_t k = 0; k < lp.size(); ++k) kl += std::exp(lp[k]) * (lp[k] - lq[k]);
  return kl;
}

}  // namespace detail

// Combined objective with both branches sharing one forward pass each:
// rank + content + alpha * sum_i KL(P_emb,i || P_content,i).
inline LossParts combined_loss(ToyLm& lm, Projector& proj, const RankSample& s, double alpha, const LossOptions& opt = {}) {
  const Matrix V = proj.project(stack_embeddings(s.embeddings));
  const std::size_t hs = lm.config().hash_size;
  auto be = detail::run_branch(lm, V, detail::rank_prompt(s, false, hs), s.golden, opt.backward);
  auto bc = detail::run_branch(lm, V, detail::rank_prompt(s, true, hs), s.golden, opt.backward);
  LossParts out;
  std::vector<std::vector<double>> de, dc;
  for (std::size_t i = 0; i < be.logits.size(); ++i) {
    const auto lp = log_softmax(be.logits[i]);
    const auto lq = log_softmax(bc.logits[i]);
    const double kl = detail::kl_divergence(lp, lq);
    out.rank -= lp[0];
    out.content -= lq[0];
    out.kl += kl;
    std::vector<double> ge(lp.size()), gc(lp.size());
    for (std::size_t k = 0; k < lp.size(); ++k) {
      const double p = std::exp(lp[k]), q = std::exp(lq[k]), hit = k == 0 ? 1.0 : 0.0;
      ge[k] = opt.grad_scale * ((p - hit) + alpha * p * (lp[k] - lq[k] - kl));
      gc[k] = opt.grad_scale * ((q - hit) + alpha * (q - p));
    }
    de.push_back(std::move(ge));
    dc.push_back(std::move(gc));
  }
  out.total = out.rank + out.content + alpha * out.kl;
  if (opt.backward) {
    Matrix dV(V.rows, V.cols);
    detail::backward_branch(lm, be, V, s.golden, de, dV);
    detail::backward_branch(lm, bc, V, s.golden, dc, dV);
    proj.project_backward(dV);
  }
  return out;
}

// KL term alone; gradients reach both branches.
inline double kl_distill_loss(ToyLm& lm, Projector& proj, const RankSample& s, const LossOptions& opt = {}) {
  const Matrix V = proj.project(stack_embeddings(s.embeddings));
  const std::size_t hs = lm.config().hash_size;
  auto be = detail::run_branch(lm, V, detail::rank_prompt(s, false, hs), s.golden, opt.backward);
  auto bc = detail::run_branch(lm, V, detail::rank_prompt(s, true, hs), s.golden, opt.backward);
  double total = 0.0;
  std::vector<std::vector<double>> de, dc;
  for (std::size_t i = 0; i < be.logits.size(); ++i) {
    const auto lp = log_softmax(be.logits[i]);
    const auto lq = log_softmax(bc.logits[i]);
    const double kl = detail::kl_divergence(lp, lq);
    total += kl;
    std::vector<double> ge(lp.size()), gc(lp.size());
    for (std::size_t k = 0; k < lp.size(); ++k) {
      const double p = std::exp(lp[k]), q = std::exp(lq[k]);
      ge[k] = opt.grad_scale * p * (lp[k] - lq[k] - kl);
      gc[k] = opt.grad_scale * (q - p);
    }
    de.push_back(std::move(ge));
    dc.push_back(std::move(gc));
  }
  if (opt.backward) {
    Matrix dV(V.rows, V.cols);
    detail::backward_branch(lm, be, V, s.golden, de, dV);
    detail::backward_branch(lm, bc, V, s.golden, dc, dV);
    proj.project_backward(dV);
  }
  return total;
}

// Indices by descending score, ties by ascending index.
inline std::vector<std::size_t> make_golden_ranking(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

struct TeacherScorer {
  std::function<double(const Query&, const Passage&)> score;
};

inline std::vector<std::size_t> make_golden_ranking(const Query& q, const std::vector<Passage>& ps, const TeacherScorer& t) {
  std::vector<double> s;
  for (const auto& p : ps) s.push_back(t.score(q, p));
  return make_golden_ranking(s);
}

// Sum of IDF weights over distinct query terms that also occur in the
// passage; terms in `damped` count with weight factor `damp` (0 ignores them).
inline TeacherScorer lexical_overlap_teacher(const Bm25Index& stats, std::set<int> damped = {}, double damp = 0.0) {
  const std::size_t hs = stats.hash_size();
  return {[&stats, hs, damped = std::move(damped), damp](const Query& q, const Passage& p) {
    const auto qt = tokenize(q.text, hs);
    const auto pt = tokenize(p.full_text(), hs);
    std::set<int> in_p(pt.begin(), pt.end());
    std::set<int> seen;
    double s = 0.0;
    for (int t : qt) {
      if (!in_p.count(t) || !seen.insert(t).second) continue;
      s += (damped.count(t) ? damp : 1.0) * stats.idf(t);
    }
    return s;
  }};
}

// Reorders passages by a seeded permutation and re-indexes golden so it names
// the same passages in the same order.
inline RankSample augment_shuffle(const RankSample& s, Rng& rng) {
  const std::size_t n = s.size();
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  rng.shuffle(perm);  // new position k holds old passage perm[k]
  std::vector<std::size_t> where(n);
  RankSample out;
  out.query = s.query;
  out.query_tokens = s.query_tokens;
  for (std::size_t k = 0; k < n; ++k) {
    where[perm[k]] = k;
    out.passages.push_back(s.passages[perm[k]]);
    out.embeddings.push_back(s.embeddings[perm[k]]);
    out.contents.push_back(s.contents[perm[k]]);
  }
  for (auto g : s.golden) out.golden.push_back(where[g]);
  return out;
}

// Drops samples whose content-augmented teacher-forced input overflows the LM.
inline std::vector<RankSample> length_filter(std::vector<RankSample> samples, std::size_t max_seq, std::size_t hash_size,
                                             std::size_t* dropped = nullptr) {
  std::vector<RankSample> kept;
  std::size_t d = 0;
  for (auto& s : samples) {
    if (teacher_forced_slots(s, true, hash_size).size() <= max_seq)
      kept.push_back(std::move(s));
    else
      ++d;
  }
  if (dropped) *dropped = d;
  return kept;
}

inline nlohmann::json rank_sample_to_json(const RankSample& s) {
  nlohmann::json ps = nlohmann::json::array();
  for (const auto& p : s.passages) ps.push_back(passage_to_json(p));
  return {{"query", {{"id", s.query.id}, {"text", s.query.text}}}, {"passages", ps}, {"golden", s.golden}};
}

inline std::vector<RankSample> load_rank_dataset(const std::string& path, const ToyEncoder& enc) {
  std::vector<RankSample> out;
  detail::for_each_json_line(path, [&](const nlohmann::json& j, std::size_t) {
    const auto& q = j.at("query");
    Query query{detail::id_field(q, "id"), q.at("text").get<std::string>()};
    std::vector<Passage> ps;
    for (const auto& p : j.at("passages")) ps.push_back(passage_from_json(p));
    out.push_back(make_rank_sample(std::move(query), std::move(ps), j.at("golden").get<std::vector<std::size_t>>(), enc));
  });
  return out;
}

inline void save_rank_dataset(const std::vector<RankSample>& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (const auto& s : ds) out << rank_sample_to_json(s).dump() << "\n";
}

struct TrainConfig {
  Stage stage = Stage::rank;
  double alpha = 0.2;
  double lr = 2e-5;
  std::size_t batch = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  double clip_norm = 1.0;
  bool shuffle_augment = true;

  static TrainConfig align_defaults() { return {Stage::align, 0.2, 1e-4, 128, 1, 0, 1.0, false}; }
  static TrainConfig rank_defaults() { return {Stage::rank, 0.2, 2e-5, 32, 1, 0, 1.0, true}; }
};

struct StepLog {
  std::size_t step;
  Stage stage;
  LossParts loss;  // batch means
};

inline void write_loss_line(std::ostream& os, const StepLog& l) {
  os << l.step << '\t' << stage_name(l.stage) << '\t' << l.loss.total << '\t' << l.loss.rank << '\t' << l.loss.content << '\t'
     << l.loss.kl << '\n';
}

using StepCallback = std::function<void(const StepLog&)>;

namespace detail {

inline void check_finite_loss(double v, std::size_t step) {
  if (!std::isfinite(v)) throw Error("non-finite loss at step " + std::to_string(step));
}

inline void apply_step(Adam& opt, const ParamList& ps, double clip) {
  clip_grad_norm(ps, clip);
  opt.step(ps);
}

}  // namespace detail

inline ParamList trainable_params(ToyLm& lm, Projector& proj) {
  ParamList ps = proj.params();
  for (auto* p : lm.params()) ps.push_back(p);
  return ps;
}

// Alignment stage: only the projector moves. Batches average per-sample losses.
inline std::size_t train_align(ToyLm& lm, Projector& proj, ToyEncoder& enc, const std::vector<AlignmentSample>& data,
                               const TrainConfig& cfg, const StepCallback& on_step = {}) {
  if (data.empty()) throw DataError("alignment dataset is empty");
  configure_stage(Stage::align, lm, proj, enc);
  const ParamList ps = trainable_params(lm, proj);
  Adam opt(cfg.lr);
  Rng rng(cfg.seed);
  std::size_t step = 0;
  std::vector<std::size_t> order(data.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t end = std::min(order.size(), b + cfg.batch);
      const double scale = 1.0 / static_cast<double>(end - b);
      zero_grads(ps);
      double total = 0.0;
      try {
        for (std::size_t k = b; k < end; ++k)
          total += alignment_loss(lm, proj, data[order[k]], draw_align_variant(rng), {true, scale});
      } catch (const Error& e) {
        throw Error("training aborted at step " + std::to_string(step) + ": " + e.what());
      }
      total *= scale;
      detail::check_finite_loss(total, step);
      detail::apply_step(opt, ps, cfg.clip_norm);
      if (on_step) on_step({step, Stage::align, {total, 0.0, 0.0, 0.0}});
      ++step;
    }
  }
  return step;
}

// Learning-to-rank stage: projector and LM move, encoder stays frozen.
inline std::size_t train_rank(ToyLm& lm, Projector& proj, ToyEncoder& enc, const std::vector<RankSample>& data,
                              const TrainConfig& cfg, const StepCallback& on_step = {}) {
  if (data.empty()) throw DataError("rank dataset is empty");
  configure_stage(Stage::rank, lm, proj, enc);
  const ParamList ps = trainable_params(lm, proj);
  Adam opt(cfg.lr);
  Rng rng(cfg.seed);
  std::size_t step = 0;
  std::vector<std::size_t> order(data.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t end = std::min(order.size(), b + cfg.batch);
      const double scale = 1.0 / static_cast<double>(end - b);
      zero_grads(ps);
      LossParts mean;
      try {
        for (std::size_t k = b; k < end; ++k) {
          const RankSample& src = data[order[k]];
          const LossParts l = cfg.shuffle_augment ? combined_loss(lm, proj, augment_shuffle(src, rng), cfg.alpha, {true, scale})
                                                  : combined_loss(lm, proj, src, cfg.alpha, {true, scale});
          mean.total += scale * l.total;
          mean.rank += scale * l.rank;
          mean.content += scale * l.content;
          mean.kl += scale * cfg.alpha * l.kl;
        }
      } catch (const Error& e) {
        throw Error("training aborted at step " + std::to_string(step) + ": " + e.what());
      }
      detail::check_finite_loss(mean.total, step);
      detail::apply_step(opt, ps, cfg.clip_norm);
      if (on_step) on_step({step, Stage::rank, mean});
      ++step;
    }
  }
  return step;
}

}  // namespace perank
