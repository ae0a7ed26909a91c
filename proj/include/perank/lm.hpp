#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "numerics.hpp"
#include "projector.hpp"
#include "templates.hpp"

namespace perank {

struct LmConfig {
  std::size_t hash_size = default_hash_size;  // vocab is hash_size + 1; the extra id is BOS
  std::size_t d_lm = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t max_seq = 512;
  std::size_t d_ff = 0;  // 0 means 4 * d_lm
  double ln_eps = 1e-5;

  std::size_t vocab_size() const { return hash_size + 1; }
  std::size_t ff_width() const { return d_ff ? d_ff : 4 * d_lm; }
  int bos() const { return static_cast<int>(hash_size); }
};

// Rows of `vectors` line up with `slots`; passage-special and ranked-special
// slots carry the candidate index they embed.
struct MixedInputSequence {
  Matrix vectors;
  std::vector<Slot> slots;

  std::size_t size() const { return slots.size(); }
  std::size_t count(Origin o) const {
    std::size_t c = 0;
    for (const auto& s : slots) c += s.origin == o;
    return c;
  }
};

namespace detail {

struct LayerNormOut {
  Matrix y, xhat;
  std::vector<double> rstd;
};

inline LayerNormOut layer_norm(const Matrix& x, const Parameter& g, const Parameter& b, double eps) {
  LayerNormOut o{Matrix(x.rows, x.cols), Matrix(x.rows, x.cols), std::vector<double>(x.rows)};
  const double n = static_cast<double>(x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xi = x.row(i);
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mean += xi[j];
    mean /= n;
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + eps);
    o.rstd[i] = rstd;
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double xh = (xi[j] - mean) * rstd;
      o.xhat(i, j) = xh;
      o.y(i, j) = xh * g.value.data[j] + b.value.data[j];
    }
  }
  return o;
}

inline Matrix layer_norm_backward(const Matrix& dy, const LayerNormOut& f, Parameter& g, Parameter& b) {
  Matrix dx(dy.rows, dy.cols);
  const double n = static_cast<double>(dy.cols);
  std::vector<double> dxh(dy.cols);
  for (std::size_t i = 0; i < dy.rows; ++i) {
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t j = 0; j < dy.cols; ++j) {
      const double d = dy(i, j);
      if (g.trainable) g.grad.data[j] += d * f.xhat(i, j);
      if (b.trainable) b.grad.data[j] += d;
      dxh[j] = d * g.value.data[j];
      s1 += dxh[j];
      s2 += dxh[j] * f.xhat(i, j);
    }
    for (std::size_t j = 0; j < dy.cols; ++j) dx(i, j) = f.rstd[i] * (dxh[j] - s1 / n - f.xhat(i, j) * s2 / n);
  }
  return dx;
}

// dy -> dx through y = xW, accumulating dW when trainable
inline Matrix matmul_backward(const Matrix& x, Parameter& W, const Matrix& dy) {
  if (W.trainable) matmul_at_acc(x, dy, W.grad);
  return matmul_bt(dy, W.value);
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  require_shape(a.same_shape(b), "add", a, b);
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace detail

class ToyLm {
 public:
  struct Layer {
    Parameter ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  // Per-layer keys/values of every position processed so far.
  struct KvCache {
    std::vector<Matrix> k, v;
    std::size_t len = 0;
  };

  struct LayerTrace {
    Matrix x;
    detail::LayerNormOut ln1;
    Matrix q, k, v;
    std::vector<Matrix> probs;  // per head, L x L (upper triangle zero)
    Matrix att, x1;
    detail::LayerNormOut ln2;
    Matrix f1, g;
  };

  struct Trace {
    std::vector<LayerTrace> layers;
    detail::LayerNormOut lnf;
  };

  ToyLm() = default;
  explicit ToyLm(const LmConfig& cfg) : cfg_(cfg) {
    if (cfg.d_lm % cfg.n_heads != 0) throw Error("d_lm must be divisible by n_heads");
    const std::size_t d = cfg.d_lm, f = cfg.ff_width();
    tok = Parameter("lm.tok", cfg.vocab_size(), d);
    pos = Parameter("lm.pos", cfg.max_seq, d);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "lm.layer" + std::to_string(l) + ".";
      layers.push_back(Layer{Parameter(p + "ln1_g", 1, d), Parameter(p + "ln1_b", 1, d), Parameter(p + "wq", d, d),
                             Parameter(p + "wk", d, d), Parameter(p + "wv", d, d), Parameter(p + "wo", d, d),
                             Parameter(p + "ln2_g", 1, d), Parameter(p + "ln2_b", 1, d), Parameter(p + "w1", d, f),
                             Parameter(p + "b1", 1, f), Parameter(p + "w2", f, d), Parameter(p + "b2", 1, d)});
    }
    lnf_g = Parameter("lm.lnf_g", 1, d);
    lnf_b = Parameter("lm.lnf_b", 1, d);
    head = Parameter("lm.head", d, cfg.vocab_size());
  }

  void init(Rng& rng, double embed_std = 0.1) {
    for (double& v : tok.value.data) v = embed_std * rng.normal();
    for (double& v : pos.value.data) v = embed_std * rng.normal();
    for (auto& L : layers) {
      for (Parameter* p : {&L.wq, &L.wk, &L.wv, &L.wo, &L.w1, &L.w2}) init_uniform_scaled(*p, rng);
      L.ln1_g.value.fill(1.0);
      L.ln2_g.value.fill(1.0);
      L.ln1_b.value.fill(0.0);
      L.ln2_b.value.fill(0.0);
      L.b1.value.fill(0.0);
      L.b2.value.fill(0.0);
    }
    lnf_g.value.fill(1.0);
    lnf_b.value.fill(0.0);
    init_uniform_scaled(head, rng);
  }

  const LmConfig& config() const { return cfg_; }
  std::size_t d_lm() const { return cfg_.d_lm; }
  std::size_t max_seq() const { return cfg_.max_seq; }

  ParamList params() {
    ParamList ps{&tok, &pos};
    for (auto& L : layers)
      for (Parameter* p : {&L.ln1_g, &L.ln1_b, &L.wq, &L.wk, &L.wv, &L.wo, &L.ln2_g, &L.ln2_b, &L.w1, &L.b1, &L.w2, &L.b2})
        ps.push_back(p);
    ps.push_back(&lnf_g);
    ps.push_back(&lnf_b);
    ps.push_back(&head);
    return ps;
  }

  KvCache new_cache() const {
    KvCache c;
    c.k.assign(cfg_.n_layers, Matrix(0, cfg_.d_lm));
    c.v.assign(cfg_.n_layers, Matrix(0, cfg_.d_lm));
    return c;
  }

  // Full causal forward from scratch; hidden states after the final norm.
  Matrix forward(const Matrix& X, Trace* trace = nullptr) const {
    KvCache c = new_cache();
    return extend(c, X, trace);
  }

  // Appends rows of X after the cached positions and returns their hidden
  // states. Earlier positions are never recomputed. A trace can only be
  // recorded from an empty cache.
  Matrix extend(KvCache& cache, const Matrix& X, Trace* trace = nullptr) const {
    const std::size_t d = cfg_.d_lm, start = cache.len, n = X.rows;
    if (X.cols != d) throw Error("lm: input width " + std::to_string(X.cols) + " vs d_lm " + std::to_string(d));
    if (start + n > cfg_.max_seq)
      throw Error("lm: sequence length " + std::to_string(start + n) + " exceeds max_seq " + std::to_string(cfg_.max_seq));
    if (trace && start != 0) throw Error("lm: trace requires a fresh cache");
    if (trace) trace->layers.clear();
    const std::size_t H = cfg_.n_heads, dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix x = X;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) x(i, j) += pos.value(start + i, j);

    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Layer& L = layers[l];
      LayerTrace lt;
      auto ln1 = detail::layer_norm(x, L.ln1_g, L.ln1_b, cfg_.ln_eps);
      Matrix q = matmul(ln1.y, L.wq.value), k = matmul(ln1.y, L.wk.value), v = matmul(ln1.y, L.wv.value);
      Matrix& K = cache.k[l];
      Matrix& V = cache.v[l];
      for (std::size_t i = 0; i < n; ++i) {
        K.append_row(k.row(i));
        V.append_row(v.row(i));
      }
      Matrix att(n, d);
      if (trace) lt.probs.assign(H, Matrix(n, n));
      std::vector<double> p(start + n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t span = start + i + 1;
        for (std::size_t h = 0; h < H; ++h) {
          const double* qi = q.row(i) + h * dh;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < span; ++j) {
            p[j] = dot(qi, K.row(j) + h * dh, dh) * scale;
            mx = std::max(mx, p[j]);
          }
          double sum = 0.0;
          for (std::size_t j = 0; j < span; ++j) {
            p[j] = std::exp(p[j] - mx);
            sum += p[j];
          }
          double* out = att.row(i) + h * dh;
          for (std::size_t j = 0; j < span; ++j) {
            p[j] /= sum;
            const double* vj = V.row(j) + h * dh;
            for (std::size_t t = 0; t < dh; ++t) out[t] += p[j] * vj[t];
          }
          if (trace)
            for (std::size_t j = 0; j < span; ++j) lt.probs[h](i, j) = p[j];
        }
      }
      Matrix x1 = matmul(att, L.wo.value);
      detail::add_inplace(x1, x);
      auto ln2 = detail::layer_norm(x1, L.ln2_g, L.ln2_b, cfg_.ln_eps);
      Matrix f1 = linear_forward(ln2.y, L.w1, L.b1);
      Matrix g = f1;
      for (double& t : g.data) t = activate(Activation::gelu, t);
      Matrix x2 = linear_forward(g, L.w2, L.b2);
      detail::add_inplace(x2, x1);
      if (trace) {
        lt.x = std::move(x);
        lt.ln1 = std::move(ln1);
        lt.q = std::move(q);
        lt.k = std::move(k);
        lt.v = std::move(v);
        lt.att = std::move(att);
        lt.x1 = std::move(x1);
        lt.ln2 = std::move(ln2);
        lt.f1 = std::move(f1);
        lt.g = std::move(g);
        trace->layers.push_back(std::move(lt));
      }
      x = std::move(x2);
    }
    cache.len += n;
    auto lnf = detail::layer_norm(x, lnf_g, lnf_b, cfg_.ln_eps);
    Matrix h = lnf.y;
    if (trace) trace->lnf = std::move(lnf);
    return h;
  }

  // Gradient of the loss with respect to the input vectors (before positions
  // are added), given dL/dh for every position. Accumulates parameter
  // gradients of trainable LM parameters only.
  Matrix backward(const Trace& tr, const Matrix& dH) {
    const std::size_t d = cfg_.d_lm, H = cfg_.n_heads, dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix dx = detail::layer_norm_backward(dH, tr.lnf, lnf_g, lnf_b);
    const std::size_t n = dx.rows;
    for (std::size_t li = layers.size(); li-- > 0;) {
      Layer& L = layers[li];
      const LayerTrace& t = tr.layers[li];
      // feed-forward branch
      Matrix dg = linear_backward(t.g, L.w2, L.b2, dx);
      for (std::size_t i = 0; i < dg.size(); ++i) dg.data[i] *= activate_grad(Activation::gelu, t.f1.data[i]);
      Matrix dc = linear_backward(t.ln2.y, L.w1, L.b1, dg);
      Matrix dx1 = detail::layer_norm_backward(dc, t.ln2, L.ln2_g, L.ln2_b);
      detail::add_inplace(dx1, dx);
      // attention branch
      Matrix datt = detail::matmul_backward(t.att, L.wo, dx1);
      Matrix dq(n, d), dk(n, d), dv(n, d);
      std::vector<double> dp(n);
      for (std::size_t h = 0; h < H; ++h) {
        const Matrix& P = t.probs[h];
        for (std::size_t i = 0; i < n; ++i) {
          const double* dout = datt.row(i) + h * dh;
          double rs = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            dp[j] = dot(dout, t.v.row(j) + h * dh, dh);
            rs += dp[j] * P(i, j);
            const double pij = P(i, j);
            double* dvj = dv.row(j) + h * dh;
            for (std::size_t u = 0; u < dh; ++u) dvj[u] += pij * dout[u];
          }
          double* dqi = dq.row(i) + h * dh;
          const double* qi = t.q.row(i) + h * dh;
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = P(i, j) * (dp[j] - rs) * scale;
            if (ds == 0.0) continue;
            const double* kj = t.k.row(j) + h * dh;
            double* dkj = dk.row(j) + h * dh;
            for (std::size_t u = 0; u < dh; ++u) {
              dqi[u] += ds * kj[u];
              dkj[u] += ds * qi[u];
            }
          }
        }
      }
      Matrix da = detail::matmul_backward(t.ln1.y, L.wq, dq);
      detail::add_inplace(da, detail::matmul_backward(t.ln1.y, L.wk, dk));
      detail::add_inplace(da, detail::matmul_backward(t.ln1.y, L.wv, dv));
      Matrix dxin = detail::layer_norm_backward(da, t.ln1, L.ln1_g, L.ln1_b);
      detail::add_inplace(dxin, dx1);
      dx = std::move(dxin);
    }
    if (pos.trainable)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) pos.grad(i, j) += dx(i, j);
    return dx;
  }

  std::vector<double> vocab_logits(const std::vector<double>& h) const {
    if (h.size() != cfg_.d_lm) throw Error("vocab_logits: hidden width " + std::to_string(h.size()));
    Matrix hm(1, h.size());
    std::copy(h.begin(), h.end(), hm.row(0));
    return matmul(hm, head.value).row_vec(0);
  }

  std::vector<double> token_vector(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size()) throw Error("token id out of range: " + std::to_string(id));
    return tok.value.row_vec(static_cast<std::size_t>(id));
  }

  Parameter tok, pos;
  std::vector<Layer> layers;
  Parameter lnf_g, lnf_b, head;

 private:
  LmConfig cfg_;
};

// Turns a slot stream into LM-space vectors: token rows from the LM table,
// candidate rows from the projected embeddings.
inline MixedInputSequence materialize(const std::vector<Slot>& slots, const ToyLm& lm, const Matrix& projected) {
  MixedInputSequence s;
  s.vectors = Matrix(0, lm.d_lm());
  s.slots = slots;
  s.vectors.data.reserve(slots.size() * lm.d_lm());
  for (const auto& sl : slots) {
    if (sl.origin == Origin::passage_special || sl.origin == Origin::ranked_special) {
      if (sl.candidate < 0 || static_cast<std::size_t>(sl.candidate) >= projected.rows) throw Error("slot references a missing candidate");
      s.vectors.append_row(projected.row(static_cast<std::size_t>(sl.candidate)));
    } else {
      s.vectors.append_row(lm.tok.value.row(static_cast<std::size_t>(sl.token)));
    }
  }
  return s;
}

// Routes input-vector gradients back: token rows into the LM table (when
// trainable), candidate rows into dProjected.
inline void scatter_input_grad(const std::vector<Slot>& slots, const Matrix& dX, ToyLm& lm, Matrix& dProjected) {
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& sl = slots[i];
    if (sl.origin == Origin::passage_special || sl.origin == Origin::ranked_special) {
      double* dst = dProjected.row(static_cast<std::size_t>(sl.candidate));
      for (std::size_t j = 0; j < dX.cols; ++j) dst[j] += dX(i, j);
    } else if (lm.tok.trainable) {
      double* dst = lm.tok.grad.row(static_cast<std::size_t>(sl.token));
      for (std::size_t j = 0; j < dX.cols; ++j) dst[j] += dX(i, j);
    }
  }
}

// Ranking prompt with one passage-special per candidate. `contents` holds the
// content tokens per candidate and is only used by templates with {{content}}.
inline MixedInputSequence assemble_rank_input(const RankTemplate& tpl, const std::vector<int>& query_tokens,
                                              const Matrix& projected, const std::vector<std::vector<int>>* contents,
                                              const ToyLm& lm) {
  const std::size_t n = projected.rows;
  if (n == 0) throw Error("assemble_rank_input: no candidates");
  auto slots = render_rank(tpl, query_tokens, n, contents, lm.config().hash_size);
  if (slots.size() > lm.max_seq())
    throw Error("window too large: " + std::to_string(slots.size()) + " positions for max_seq " + std::to_string(lm.max_seq()));
  return materialize(slots, lm, projected);
}

inline MixedInputSequence assemble_rank_input(const std::vector<int>& query_tokens, const Matrix& projected,
                                              const std::vector<std::vector<int>>* contents, bool include_content,
                                              const ToyLm& lm) {
  return assemble_rank_input(include_content ? rank_content_template() : rank_embedding_template(), query_tokens, projected,
                             include_content ? contents : nullptr, lm);
}

// Alignment prompt holding exactly one passage-special (candidate 0).
inline MixedInputSequence assemble_align_input(std::size_t variant, const Matrix& projected, const ToyLm& lm) {
  return materialize(render_align(variant, lm.config().hash_size), lm, projected);
}

inline MixedInputSequence assemble_align_input(const std::string& text, const Projector& proj, const ToyEncoder& enc,
                                               const ToyLm& lm, Rng& rng) {
  const Embedding e = enc.encode(text);
  Matrix E(1, e.size());
  std::copy(e.begin(), e.end(), E.row(0));
  return assemble_align_input(draw_align_variant(rng), proj.apply(E), lm);
}

// Positions used by a decoding session over n candidates: prompt plus the
// n - 1 appended selections that are fed back.
inline std::size_t rank_session_length(const std::vector<int>& query_tokens, std::size_t n, std::size_t hash_size) {
  return render_rank(rank_embedding_template(), query_tokens, n, nullptr, hash_size).size() + (n ? n - 1 : 0);
}

inline std::size_t window_capacity(const ToyLm& lm, const std::vector<int>& query_tokens) {
  std::size_t n = 0;
  while (rank_session_length(query_tokens, n + 1, lm.config().hash_size) <= lm.max_seq()) ++n;
  return n;
}

}  // namespace perank
