#pragma once

#include <string>
#include <vector>

#include <perank/decoding.hpp>
#include <perank/lm.hpp>
#include <perank/projector.hpp>
#include <perank/retrieval.hpp>
#include <perank/training.hpp>

namespace perank::testing {

// Small model bundle for gradient and oracle checks.
struct Toy {
  ToyEncoder enc;
  Projector proj;
  ToyLm lm;

  Toy(std::uint64_t seed, std::size_t hash_size = 63, std::size_t d_enc = 8, std::size_t d_lm = 16, std::size_t max_seq = 256,
      Activation act = Activation::gelu)
      : enc(hash_size, d_enc),
        proj(d_enc, d_lm, d_lm, act),
        lm(LmConfig{hash_size, d_lm, 2, 2, max_seq, 2 * d_lm, 1e-5}) {
    Rng rng(seed);
    enc.init_random(rng);
    proj.init(rng);
    lm.init(rng, 0.5);
    // perturb norms and biases away from their identity init so every path is exercised
    for (auto* p : lm.params())
      if (p->value.rows == 1)
        for (double& v : p->value.data) v += 0.2 * rng.normal();
    for (double& v : proj.b1.value.data) v = 0.1 * rng.normal();
    for (double& v : proj.b2.value.data) v = 0.1 * rng.normal();
  }

  ParamList all_params() {
    ParamList ps = proj.params();
    for (auto* p : lm.params()) ps.push_back(p);
    return ps;
  }
};

inline std::string random_words(Rng& rng, std::size_t n) {
  static const char* words[] = {"alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
                                "india", "juliet", "kilo", "lima", "mike", "november", "oscar", "papa"};
  std::string s;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += words[rng.below(16)];
  }
  return s;
}

inline RankSample random_rank_sample(Rng& rng, const ToyEncoder& enc, std::size_t n, std::size_t passage_len = 3) {
  std::vector<Passage> ps;
  for (std::size_t i = 0; i < n; ++i) ps.push_back({"p" + std::to_string(i), std::nullopt, random_words(rng, passage_len)});
  std::vector<std::size_t> golden(n);
  for (std::size_t i = 0; i < n; ++i) golden[i] = i;
  rng.shuffle(golden);
  return make_rank_sample({"q", random_words(rng, 2)}, ps, golden, enc);
}

// Hidden source whose state is a pseudo-random integer vector keyed by the
// exact bytes of everything appended so far; small integer ranges make exact
// score ties common.
class ScriptedSource : public HiddenSource {
 public:
  ScriptedSource(std::size_t dim, std::uint64_t salt, int range) : dim_(dim), salt_(salt), range_(range) {}

  std::vector<double> prime(const MixedInputSequence&) override {
    key_ = salt_;
    return state();
  }
  std::vector<double> append(const std::vector<double>& v) override {
    key_ = fnv1a64(v.data(), v.size() * sizeof(double), key_);
    return state();
  }

  // Same state function, usable by an oracle without a session.
  std::vector<double> state_after(const std::vector<std::vector<double>>& appended) const {
    std::uint64_t k = salt_;
    for (const auto& v : appended) k = fnv1a64(v.data(), v.size() * sizeof(double), k);
    return state_for(k);
  }

 private:
  std::vector<double> state() const { return state_for(key_); }
  std::vector<double> state_for(std::uint64_t k) const {
    Rng rng(k);
    std::vector<double> h(dim_);
    for (double& x : h) x = static_cast<double>(static_cast<int>(rng.below(2 * range_ + 1)) - range_);
    return h;
  }

  std::size_t dim_;
  std::uint64_t salt_;
  int range_;
  std::uint64_t key_ = 0;
};

// Repeated argmax-and-remove over an explicit score table, lowest index on ties.
inline std::vector<std::size_t> argmax_remove_oracle(const ScriptedSource& src, const Matrix& P) {
  std::vector<std::size_t> out;
  std::vector<bool> used(P.rows, false);
  std::vector<std::vector<double>> appended;
  for (std::size_t step = 0; step < P.rows; ++step) {
    const auto h = src.state_after(appended);
    std::vector<double> table(P.rows);
    for (std::size_t j = 0; j < P.rows; ++j) {
      double s = 0;
      for (std::size_t u = 0; u < P.cols; ++u) s += h[u] * P(j, u);
      table[j] = s;
    }
    std::size_t best = P.rows;
    for (std::size_t j = 0; j < P.rows; ++j)
      if (!used[j] && (best == P.rows || table[j] > table[best])) best = j;
    used[best] = true;
    out.push_back(best);
    appended.push_back(P.row_vec(best));
  }
  return out;
}

}  // namespace perank::testing
