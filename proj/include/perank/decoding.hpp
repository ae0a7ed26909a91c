#pragma once

#include <chrono>
#include <memory>
#include <string>
#include <vector>

#include "lm.hpp"
#include "numerics.hpp"

namespace perank {

// Supplies the hidden state that drives each decoding step.
class HiddenSource {
 public:
  virtual ~HiddenSource() = default;
  // Processes the prompt; returns the last position's hidden state.
  virtual std::vector<double> prime(const MixedInputSequence& seq) = 0;
  // Feeds one selected special back; returns the new last hidden state.
  virtual std::vector<double> append(const std::vector<double>& vec) = 0;
};

// Incremental path: keys/values of earlier positions are cached.
class LmSession : public HiddenSource {
 public:
  explicit LmSession(const ToyLm& lm) : lm_(lm), cache_(lm.new_cache()) {}

  std::vector<double> prime(const MixedInputSequence& seq) override {
    cache_ = lm_.new_cache();
    Matrix h = lm_.extend(cache_, seq.vectors);
    return h.row_vec(h.rows - 1);
  }

  std::vector<double> append(const std::vector<double>& vec) override {
    Matrix x(1, vec.size());
    std::copy(vec.begin(), vec.end(), x.row(0));
    return lm_.extend(cache_, x).row_vec(0);
  }

 private:
  const ToyLm& lm_;
  ToyLm::KvCache cache_;
};

// Reference path: every step reruns the whole sequence from scratch.
class RecomputeSession : public HiddenSource {
 public:
  explicit RecomputeSession(const ToyLm& lm) : lm_(lm) {}

  std::vector<double> prime(const MixedInputSequence& seq) override {
    x_ = seq.vectors;
    return last();
  }

  std::vector<double> append(const std::vector<double>& vec) override {
    x_.append_row(vec);
    return last();
  }

 private:
  std::vector<double> last() const {
    Matrix h = lm_.forward(x_);
    return h.row_vec(h.rows - 1);
  }

  const ToyLm& lm_;
  Matrix x_;
};

// Softmax of h . v_j over the remaining candidates, in the order given.
inline std::vector<double> score_remaining(const std::vector<double>& h, const std::vector<std::size_t>& remaining,
                                           const Matrix& projected) {
  if (remaining.empty()) throw Error("score_remaining: no remaining candidates");
  std::vector<double> logits;
  logits.reserve(remaining.size());
  for (std::size_t j : remaining) {
    if (j >= projected.rows) throw Error("score_remaining: candidate index out of range");
    if (h.size() != projected.cols) throw Error("score_remaining: hidden width does not match projected width");
    logits.push_back(dot(h.data(), projected.row(j), h.size()));
  }
  return softmax(logits);
}

struct StepRecord {
  std::size_t candidate;   // index into the window's candidates
  double probability;      // at selection time; comparable only within one window
  std::size_t step;
};

struct DecodeResult {
  std::vector<StepRecord> steps;
  std::vector<Slot> appended;  // fed-back specials, tagged with predicted provenance
  std::size_t processed = 0;   // prompt positions
  std::size_t generated = 0;
  double prefill_seconds = 0.0;
  double decode_seconds = 0.0;

  std::vector<std::size_t> order() const {
    std::vector<std::size_t> o;
    for (const auto& s : steps) o.push_back(s.candidate);
    return o;
  }
};

// Greedy decoding restricted to the not-yet-ranked specials. Each step picks
// the argmax of h . v_j (ties to the lowest candidate index) and feeds the
// chosen candidate's projected vector back in; the last step needs no feed.
inline DecodeResult dc_decode(HiddenSource& src, const MixedInputSequence& seq, const Matrix& projected) {
  using clock = std::chrono::steady_clock;
  const std::size_t n = projected.rows;
  if (n == 0) throw Error("dc_decode: no candidates");
  DecodeResult r;
  r.processed = seq.size();
  const auto t0 = clock::now();
  std::vector<double> h = src.prime(seq);
  const auto t1 = clock::now();
  r.prefill_seconds = std::chrono::duration<double>(t1 - t0).count();

  std::vector<std::size_t> remaining(n);
  for (std::size_t i = 0; i < n; ++i) remaining[i] = i;
  for (std::size_t step = 0; step < n; ++step) {
    const auto probs = score_remaining(h, remaining, projected);
    std::size_t best = 0;
    double best_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < remaining.size(); ++k) {
      const double logit = dot(h.data(), projected.row(remaining[k]), h.size());
      if (logit > best_logit) {  // strict: equal logits keep the earlier (lower) index
        best_logit = logit;
        best = k;
      }
    }
    const std::size_t chosen = remaining[best];
    r.steps.push_back({chosen, probs[best], step});
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best));
    ++r.generated;
    if (!remaining.empty()) {
      r.appended.push_back({Origin::ranked_special, -1, static_cast<int>(chosen), Provenance::predicted});
      h = src.append(projected.row_vec(chosen));
    }
  }
  r.decode_seconds = std::chrono::duration<double>(clock::now() - t1).count();
  return r;
}

struct WindowSchedule {
  std::size_t n = 0, w = 20, s = 10;

  void validate() const {
    if (n == 0) throw Error("sliding window: no candidates");
    if (w == 0 || s == 0) throw UsageError("window and step must be at least 1");
    if (s > w) throw UsageError("step " + std::to_string(s) + " exceeds window " + std::to_string(w));
  }

  std::size_t passes() const {
    if (w >= n) return 1;
    return 1 + (n - w + s - 1) / s;
  }

  // Window start offsets in processing order: back to front, the last one at 0.
  std::vector<std::size_t> starts() const {
    if (w >= n) return {0};
    std::vector<std::size_t> out;
    for (std::size_t st = n - w; st > 0; st = st > s ? st - s : 0) out.push_back(st);
    out.push_back(0);
    return out;
  }

  std::size_t window_len() const { return std::min(w, n); }
};

struct TokenStats {
  std::size_t processed = 0;
  std::size_t generated = 0;
  double prefill_seconds = 0.0;
  double decode_seconds = 0.0;
  std::size_t passes = 0;
};

struct RankedItem {
  std::size_t candidate;  // index into the input candidate list
  std::size_t pass;       // pass that last placed it
  std::size_t step;       // decoding step within that pass
  double probability;     // not comparable across windows
  bool reranked = false;  // false if no window covered it
};

struct RankingList {
  std::vector<RankedItem> items;
  TokenStats stats;

  std::vector<std::size_t> order() const {
    std::vector<std::size_t> o;
    for (const auto& it : items) o.push_back(it.candidate);
    return o;
  }
};

enum class SessionMode { incremental, recompute };

// Reranks candidates (given in first-stage order) window by window. Each pass
// reorders its w contiguous positions in place with dc_decode.
inline RankingList sliding_window_rerank(const ToyLm& lm, const Projector& proj, const std::vector<int>& query_tokens,
                                         const std::vector<Embedding>& candidates, WindowSchedule sched,
                                         SessionMode mode = SessionMode::incremental) {
  sched.n = candidates.size();
  sched.validate();
  const std::size_t wlen = sched.window_len();
  const std::size_t cap = window_capacity(lm, query_tokens);
  if (wlen > cap)
    throw Error("window of " + std::to_string(wlen) + " exceeds this model's capacity of " + std::to_string(cap) + " candidates");

  RankingList out;
  for (std::size_t i = 0; i < candidates.size(); ++i) out.items.push_back({i, 0, 0, 0.0, false});
  const Matrix all = proj.apply(stack_embeddings(candidates));

  std::size_t pass = 0;
  for (std::size_t st : sched.starts()) {
    Matrix win(wlen, all.cols);
    for (std::size_t k = 0; k < wlen; ++k) std::copy(all.row(out.items[st + k].candidate), all.row(out.items[st + k].candidate) + all.cols, win.row(k));
    const auto seq = assemble_rank_input(rank_embedding_template(), query_tokens, win, nullptr, lm);
    std::unique_ptr<HiddenSource> src;
    if (mode == SessionMode::incremental)
      src = std::make_unique<LmSession>(lm);
    else
      src = std::make_unique<RecomputeSession>(lm);
    DecodeResult r;
    try {
      r = dc_decode(*src, seq, win);
    } catch (const Error& e) {
      throw Error("pass " + std::to_string(pass) + " (window at " + std::to_string(st) + "): " + e.what());
    }
    std::vector<RankedItem> reordered;
    for (const auto& s : r.steps) {
      RankedItem it = out.items[st + s.candidate];
      it.pass = pass;
      it.step = s.step;
      it.probability = s.probability;
      it.reranked = true;
      reordered.push_back(it);
    }
    std::copy(reordered.begin(), reordered.end(), out.items.begin() + static_cast<std::ptrdiff_t>(st));
    out.stats.processed += r.processed;
    out.stats.generated += r.generated;
    out.stats.prefill_seconds += r.prefill_seconds;
    out.stats.decode_seconds += r.decode_seconds;
    ++pass;
  }
  out.stats.passes = pass;
  return out;
}

}  // namespace perank
