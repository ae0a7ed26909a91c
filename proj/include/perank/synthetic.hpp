#pragma once

#include <set>
#include <string>
#include <vector>

#include "evaluation.hpp"
#include "numerics.hpp"
#include "retrieval.hpp"
#include "templates.hpp"
#include "training.hpp"

namespace perank {

// Planted-relevance corpus. Every query owns a topic word (repeated in the
// query), a few salted keywords and a handful of common words. Its planted
// passages share the topic and a graded number of keywords; the relevance
// grade is the number of shared keywords. Passages with fewer keywords carry
// more of the query's common words, which is what misleads a bag-of-words
// dense retriever.
struct SyntheticConfig {
  std::uint64_t seed = 7;
  std::size_t test_queries = 40;
  std::size_t train_queries = 2000;
  std::size_t train_topics = 300;
  std::vector<int> shares = {3, 2, 2, 1, 1};  // keywords shared by each planted passage
  std::size_t keywords_per_query = 3;
  std::size_t topic_repeat = 3;
  std::size_t common_per_query = 4;
  std::size_t passage_len = 6;
  std::size_t fillers = 20;
  std::size_t train_candidates = 20;
  std::size_t hash_size = default_hash_size;
  std::size_t common_count = 10;
  // first common_count of these whose hashes stay clear of the templates
  std::vector<std::string> common_candidates = {"what", "about", "which", "the",  "of",   "how",  "does", "is",
                                                "for",  "and",   "that",  "with", "from", "this", "are",  "was",
                                                "when", "where", "who",   "why",  "has",  "into", "can",  "its"};
};

struct SyntheticSplit {
  Corpus corpus;
  std::vector<Query> queries;
  Qrels qrels;
};

struct SyntheticData {
  SyntheticSplit test;
  SyntheticSplit train;
  std::set<int> common_tokens;  // hashed ids of the common words
};

namespace detail {

class WordMint {
 public:
  WordMint(Rng& rng, std::size_t hash_size) : rng_(rng), hash_size_(hash_size) {
    // keep clear of every token the prompt templates can produce
    std::string all = rank_embedding_template().head + " " + rank_embedding_template().tail + " " +
                      rank_content_template().head + " passage " + align_prompt(0);
    for (const auto& v : align_variants()) all += " " + v;
    for (int i = 0; i <= 200; ++i) all += " " + std::to_string(i);
    for (int t : tokenize(all, hash_size_)) used_.insert(t);
    used_.insert(static_cast<int>(hash_size_));
  }

  bool try_reserve(const std::string& w) { return used_.insert(hash_token(w, hash_size_)).second; }

  std::vector<std::string> mint(const std::string& prefix, std::size_t count) {
    std::vector<std::string> out;
    while (out.size() < count) {
      const std::string w = prefix + to_hex(rng_.next_u64()).substr(0, 7);
      if (!used_.insert(hash_token(w, hash_size_)).second) continue;
      out.push_back(w);
    }
    return out;
  }

 private:
  Rng& rng_;
  std::size_t hash_size_;
  std::set<int> used_;
};

template <class T>
std::vector<T> sample_without_replacement(Rng& rng, const std::vector<T>& pool, std::size_t k) {
  if (k > pool.size()) throw Error("synthetic: sample larger than pool");
  std::vector<T> v = pool;
  for (std::size_t i = 0; i < k; ++i) std::swap(v[i], v[i + rng.below(v.size() - i)]);
  v.resize(k);
  return v;
}

inline std::string join(const std::vector<std::string>& ws) {
  std::string s;
  for (const auto& w : ws) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

}  // namespace detail

inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  Rng rng(cfg.seed);
  detail::WordMint mint(rng, cfg.hash_size);
  SyntheticData out;
  std::vector<std::string> common_words;
  for (const auto& w : cfg.common_candidates) {
    if (common_words.size() == cfg.common_count) break;
    if (!mint.try_reserve(w)) continue;
    common_words.push_back(w);
    out.common_tokens.insert(hash_token(w, cfg.hash_size));
  }
  if (common_words.size() < cfg.common_count) throw Error("synthetic: not enough collision-free common words");
  if (common_words.size() < cfg.common_per_query) throw Error("synthetic: common_per_query exceeds common_count");
  const std::size_t K = cfg.keywords_per_query;
  for (int sh : cfg.shares)
    if (sh < 0 || static_cast<std::size_t>(sh) > K) throw Error("synthetic: share exceeds keywords per query");
  const auto keywords = mint.mint("k", cfg.test_queries * K);
  const auto fillers = mint.mint("f", cfg.fillers);
  const auto test_topics = mint.mint("t", cfg.test_queries);
  const auto train_topics = mint.mint("r", cfg.train_topics);

  auto build = [&](SyntheticSplit& split, const std::string& qprefix, const std::string& pprefix, std::size_t nq,
                   auto topic_of, auto keys_of) {
    for (std::size_t qi = 0; qi < nq; ++qi) {
      const std::string topic = topic_of(qi);
      const std::vector<std::string> keys = keys_of(qi);
      const auto common = detail::sample_without_replacement(rng, common_words, cfg.common_per_query);
      std::vector<std::string> qwords(cfg.topic_repeat, topic);
      qwords.insert(qwords.end(), keys.begin(), keys.end());
      qwords.insert(qwords.end(), common.begin(), common.end());
      rng.shuffle(qwords);
      char qid[32];
      std::snprintf(qid, sizeof qid, "%s%04zu", qprefix.c_str(), qi);
      split.queries.push_back({qid, detail::join(qwords)});
      std::vector<std::string> other;
      for (const auto& w : common_words)
        if (std::find(common.begin(), common.end(), w) == common.end()) other.push_back(w);
      for (std::size_t pi = 0; pi < cfg.shares.size(); ++pi) {
        const auto share = static_cast<std::size_t>(cfg.shares[pi]);
        std::vector<std::string> words{topic};
        const auto own = detail::sample_without_replacement(rng, keys, share);
        words.insert(words.end(), own.begin(), own.end());
        const std::size_t n_common = std::min(cfg.common_per_query, (K - share) + static_cast<std::size_t>(rng.below(2)));
        const auto qc = detail::sample_without_replacement(rng, common, n_common);
        words.insert(words.end(), qc.begin(), qc.end());
        const auto oc = detail::sample_without_replacement(rng, other, std::min<std::size_t>(other.size(), rng.below(2)));
        words.insert(words.end(), oc.begin(), oc.end());
        if (words.size() < cfg.passage_len) {
          const auto fill = detail::sample_without_replacement(rng, fillers, cfg.passage_len - words.size());
          words.insert(words.end(), fill.begin(), fill.end());
        }
        rng.shuffle(words);
        char pid[40];
        std::snprintf(pid, sizeof pid, "%s%04zu_%zu", pprefix.c_str(), qi, pi);
        split.corpus.add({pid, std::nullopt, detail::join(words)});
        if (share > 0) split.qrels.set(qid, pid, static_cast<int>(share));
      }
    }
  };

  // test queries use disjoint keyword triples; training queries draw from the same pool
  std::vector<std::size_t> perm(keywords.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm);
  build(out.test, "q", "d", cfg.test_queries, [&](std::size_t i) { return test_topics[i]; },
        [&](std::size_t i) {
          std::vector<std::string> ks;
          for (std::size_t j = 0; j < K; ++j) ks.push_back(keywords[perm[K * i + j]]);
          return ks;
        });
  build(out.train, "tq", "tp", cfg.train_queries, [&](std::size_t i) { return train_topics[i % train_topics.size()]; },
        [&](std::size_t) { return detail::sample_without_replacement(rng, keywords, K); });
  return out;
}

// Training samples: dense top-n candidates per training query, ordered by the
// teacher. Candidates are shuffled before scoring so tie order carries no
// first-stage signal.
inline std::vector<RankSample> build_rank_dataset(const SyntheticSplit& split, const ToyEncoder& enc, const TeacherScorer& teacher,
                                                  std::size_t n, std::uint64_t seed) {
  Retriever r(split.corpus, enc);
  Rng rng(seed);
  std::vector<RankSample> out;
  for (const auto& q : split.queries) {
    auto hits = r.retrieve_topk(q.text, n, Backend::dense);
    rng.shuffle(hits);
    std::vector<Passage> ps;
    for (const auto& h : hits) ps.push_back(split.corpus[h.doc]);
    auto golden = make_golden_ranking(q, ps, teacher);
    out.push_back(make_rank_sample(q, std::move(ps), std::move(golden), enc));
  }
  return out;
}

}  // namespace perank
