#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "numerics.hpp"
#include "text.hpp"

namespace perank {

using Embedding = std::vector<double>;

struct Passage {
  std::string id;
  std::optional<std::string> title;
  std::string text;

  // what the retrievers and the encoder see
  std::string full_text() const { return title ? *title + " " + text : text; }
};

struct Query {
  std::string id;
  std::string text;
};

class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<Passage> ps) {
    for (auto& p : ps) add(std::move(p));
  }

  void add(Passage p) {
    if (p.text.empty()) throw DataError("passage '" + p.id + "' has empty text");
    if (!by_id_.emplace(p.id, passages_.size()).second) throw DataError("duplicate passage id '" + p.id + "'");
    passages_.push_back(std::move(p));
  }

  std::size_t size() const { return passages_.size(); }
  bool empty() const { return passages_.empty(); }
  const Passage& operator[](std::size_t i) const { return passages_[i]; }
  const std::vector<Passage>& passages() const { return passages_; }

  std::size_t index_of(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw DataError("unknown passage id '" + id + "'");
    return it->second;
  }
  bool contains(const std::string& id) const { return by_id_.count(id) != 0; }

 private:
  std::vector<Passage> passages_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

namespace detail {

template <class F>
void for_each_json_line(const std::string& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    try {
      f(j, lineno);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline std::string id_field(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw DataError(std::string("field '") + key + "' must be a string");
}

}  // namespace detail

inline Passage passage_from_json(const nlohmann::json& j) {
  Passage p;
  p.id = detail::id_field(j, "id");
  if (j.contains("title") && !j["title"].is_null()) p.title = j["title"].get<std::string>();
  p.text = j.at("text").get<std::string>();
  return p;
}

inline nlohmann::json passage_to_json(const Passage& p) {
  nlohmann::json j = {{"id", p.id}};
  if (p.title) j["title"] = *p.title;
  j["text"] = p.text;
  return j;
}

inline Corpus load_corpus(const std::string& path) {
  Corpus c;
  detail::for_each_json_line(path, [&](const nlohmann::json& j, std::size_t) { c.add(passage_from_json(j)); });
  return c;
}

inline void save_corpus(const Corpus& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (const auto& p : c.passages()) out << passage_to_json(p).dump() << "\n";
}

inline std::vector<Query> load_queries(const std::string& path) {
  std::vector<Query> qs;
  detail::for_each_json_line(path, [&](const nlohmann::json& j, std::size_t) {
    Query q{detail::id_field(j, "id"), j.at("text").get<std::string>()};
    if (q.text.empty()) throw DataError("query '" + q.id + "' has empty text");
    qs.push_back(std::move(q));
  });
  return qs;
}

inline void save_queries(const std::vector<Query>& qs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (const auto& q : qs) out << nlohmann::json{{"id", q.id}, {"text", q.text}}.dump() << "\n";
}

class Bm25Index {
 public:
  struct Posting {
    std::size_t doc;
    int tf;
  };

  Bm25Index() = default;
  Bm25Index(const Corpus& corpus, std::size_t hash_size = default_hash_size, double k1 = 0.9, double b = 0.4)
      : hash_size_(hash_size), k1_(k1), b_(b) {
    double total = 0.0;
    for (std::size_t d = 0; d < corpus.size(); ++d) {
      ids_.push_back(corpus[d].id);
      by_id_[corpus[d].id] = d;
      auto toks = tokenize(corpus[d].full_text(), hash_size);
      doc_len_.push_back(toks.size());
      total += static_cast<double>(toks.size());
      std::map<int, int> tf;
      for (int t : toks) ++tf[t];
      for (auto [t, n] : tf) postings_[t].push_back({d, n});
    }
    avgdl_ = corpus.empty() ? 0.0 : total / static_cast<double>(corpus.size());
  }

  std::size_t size() const { return ids_.size(); }
  double avgdl() const { return avgdl_; }
  double k1() const { return k1_; }
  double b() const { return b_; }
  std::size_t hash_size() const { return hash_size_; }
  const std::vector<std::size_t>& doc_lengths() const { return doc_len_; }
  const std::map<int, std::vector<Posting>>& postings() const { return postings_; }
  const std::vector<std::string>& ids() const { return ids_; }

  double idf(int term) const {
    auto it = postings_.find(term);
    const double df = it == postings_.end() ? 0.0 : static_cast<double>(it->second.size());
    const double n = static_cast<double>(ids_.size());
    return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
  }

  // Repeated query terms count once per occurrence.
  double score(const std::string& query_text, const std::string& passage_id) const {
    auto it = by_id_.find(passage_id);
    if (it == by_id_.end()) throw DataError("bm25: unknown passage id '" + passage_id + "'");
    return score_doc(tokenize(query_text, hash_size_), it->second);
  }

  std::vector<double> score_all(const std::string& query_text) const {
    std::vector<double> s(ids_.size(), 0.0);
    for (int t : tokenize(query_text, hash_size_)) {
      auto it = postings_.find(t);
      if (it == postings_.end()) continue;
      const double w = idf(t);
      for (const auto& p : it->second) s[p.doc] += w * term_weight(p.tf, p.doc);
    }
    return s;
  }

 private:
  double term_weight(int tf, std::size_t doc) const {
    const double dl = static_cast<double>(doc_len_[doc]);
    const double f = static_cast<double>(tf);
    return f * (k1_ + 1.0) / (f + k1_ * (1.0 - b_ + b_ * dl / avgdl_));
  }

  double score_doc(const std::vector<int>& q, std::size_t doc) const {
    double s = 0.0;
    for (int t : q) {
      auto it = postings_.find(t);
      if (it == postings_.end()) continue;
      for (const auto& p : it->second)
        if (p.doc == doc) s += idf(t) * term_weight(p.tf, doc);
    }
    return s;
  }

  std::size_t hash_size_ = default_hash_size;
  double k1_ = 0.9, b_ = 0.4, avgdl_ = 0.0;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::vector<std::size_t> doc_len_;
  std::map<int, std::vector<Posting>> postings_;
};

enum class Pooling { mean, cls };

inline std::string pooling_name(Pooling p) { return p == Pooling::mean ? "mean" : "cls"; }
inline Pooling parse_pooling(const std::string& s) {
  if (s == "mean") return Pooling::mean;
  if (s == "cls") return Pooling::cls;
  throw UsageError("unknown pooling '" + s + "'");
}

inline void normalize_inplace(std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  if (!(n > 0.0)) throw Error("cannot normalize a zero vector");
  for (double& x : v) x /= n;
}

// Frozen hashing embedding-bag. The table has one extra row past the hashed
// vocabulary that serves as the reserved prefix token for cls pooling.
class ToyEncoder {
 public:
  ToyEncoder() = default;
  ToyEncoder(std::size_t hash_size, std::size_t dim, Pooling pooling = Pooling::mean)
      : hash_size_(hash_size), pooling_(pooling), table_("encoder.table", hash_size + 1, dim) {
    table_.trainable = false;
  }

  void init_random(Rng& rng) {
    for (double& v : table_.value.data) v = rng.normal();
  }

  std::size_t hash_size() const { return hash_size_; }
  std::size_t dim() const { return table_.value.cols; }
  Pooling pooling() const { return pooling_; }
  Parameter& table() { return table_; }
  const Parameter& table() const { return table_; }

  Embedding encode(const std::string& text) const { return encode_tokens(tokenize(text, hash_size_)); }

  // mean: normalize(mean of token rows); cls: normalize(prefix row + mean of token rows)
  Embedding encode_tokens(const std::vector<int>& toks) const {
    if (toks.empty()) throw DataError("unencodable text");
    const std::size_t d = dim();
    Embedding e(d, 0.0);
    for (int t : toks) {
      const double* r = table_.value.row(static_cast<std::size_t>(t));
      for (std::size_t j = 0; j < d; ++j) e[j] += r[j];
    }
    for (double& x : e) x /= static_cast<double>(toks.size());
    if (pooling_ == Pooling::cls) {
      const double* c = table_.value.row(hash_size_);
      for (std::size_t j = 0; j < d; ++j) e[j] += c[j];
    }
    normalize_inplace(e);
    return e;
  }

 private:
  std::size_t hash_size_ = default_hash_size;
  Pooling pooling_ = Pooling::mean;
  Parameter table_;
};

class VectorIndex {
 public:
  VectorIndex() = default;
  explicit VectorIndex(std::size_t dim) : matrix_(0, dim) {}

  void add(const std::string& id, const Embedding& e) {
    if (matrix_.cols == 0 && matrix_.rows == 0) matrix_ = Matrix(0, e.size());
    if (e.size() != matrix_.cols)
      throw DataError("embedding for '" + id + "' has dim " + std::to_string(e.size()) + ", index expects " +
                      std::to_string(matrix_.cols));
    matrix_.append_row(e);
    ids_.push_back(id);
  }

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return matrix_.cols; }
  const std::vector<std::string>& ids() const { return ids_; }
  const Matrix& matrix() const { return matrix_; }
  Embedding embedding(std::size_t i) const { return matrix_.row_vec(i); }

  std::vector<double> scores(const Embedding& q) const {
    if (q.size() != matrix_.cols) throw Error("query dim " + std::to_string(q.size()) + " vs index " + std::to_string(matrix_.cols));
    std::vector<double> s(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) s[i] = dot(matrix_.row(i), q.data(), q.size());
    return s;
  }

 private:
  std::vector<std::string> ids_;
  Matrix matrix_;
};

inline VectorIndex build_vector_index(const Corpus& c, const ToyEncoder& enc) {
  VectorIndex idx(enc.dim());
  for (const auto& p : c.passages()) idx.add(p.id, enc.encode(p.full_text()));
  return idx;
}

inline void save_embeddings(const VectorIndex& idx, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << nlohmann::json{{"dim", idx.dim()}, {"count", idx.size()}}.dump() << "\n";
  for (std::size_t i = 0; i < idx.size(); ++i)
    out << nlohmann::json{{"id", idx.ids()[i]}, {"values", idx.embedding(i)}}.dump() << "\n";
}

inline VectorIndex load_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": missing header");
  std::size_t dim = 0, count = 0;
  try {
    auto h = nlohmann::json::parse(line);
    dim = h.at("dim").get<std::size_t>();
    count = h.at("count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ":1: bad header: " + e.what());
  }
  VectorIndex idx(dim);
  std::size_t lineno = 1;
  while (idx.size() < count && std::getline(in, line)) {
    ++lineno;
    try {
      auto j = nlohmann::json::parse(line);
      idx.add(detail::id_field(j, "id"), j.at("values").get<Embedding>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (idx.size() != count)
    throw DataError(path + ": header promises " + std::to_string(count) + " rows, found " + std::to_string(idx.size()));
  return idx;
}

enum class Backend { bm25, dense };

inline Backend parse_backend(const std::string& s) {
  if (s == "bm25") return Backend::bm25;
  if (s == "dense") return Backend::dense;
  throw UsageError("unknown retriever backend '" + s + "'");
}
inline std::string backend_name(Backend b) { return b == Backend::bm25 ? "bm25" : "dense"; }

struct Hit {
  std::size_t doc;  // corpus index
  double score;
  Embedding embedding;
};

// Bundles the two first-stage indexes over one corpus.
class Retriever {
 public:
  Retriever(const Corpus& corpus, const ToyEncoder& encoder)
      : corpus_(&corpus), encoder_(&encoder), bm25_(corpus, encoder.hash_size()), dense_(build_vector_index(corpus, encoder)) {}

  // Reuses stored embeddings (e.g. loaded from an index file); rows must follow corpus order.
  Retriever(const Corpus& corpus, const ToyEncoder& encoder, VectorIndex stored)
      : corpus_(&corpus), encoder_(&encoder), bm25_(corpus, encoder.hash_size()), dense_(std::move(stored)) {
    if (dense_.size() != corpus.size()) throw DataError("embedding file does not cover the corpus");
    for (std::size_t i = 0; i < corpus.size(); ++i)
      if (dense_.ids()[i] != corpus[i].id) throw DataError("embedding file order differs from corpus at '" + corpus[i].id + "'");
  }

  const Bm25Index& bm25() const { return bm25_; }
  const VectorIndex& dense() const { return dense_; }
  const Corpus& corpus() const { return *corpus_; }

  std::vector<Hit> retrieve_topk(const std::string& query_text, std::size_t k, Backend backend) const {
    if (corpus_->empty()) throw DataError("empty corpus");
    if (k == 0) throw UsageError("k must be at least 1");
    std::vector<double> s = backend == Backend::bm25 ? bm25_.score_all(query_text) : dense_.scores(encoder_->encode(query_text));
    std::vector<std::size_t> order(s.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const auto& c = *corpus_;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (s[a] != s[b]) return s[a] > s[b];
      return c[a].id < c[b].id;
    });
    order.resize(std::min(k, order.size()));
    std::vector<Hit> hits;
    for (std::size_t d : order) hits.push_back({d, s[d], dense_.embedding(d)});
    return hits;
  }

 private:
  const Corpus* corpus_;
  const ToyEncoder* encoder_;
  Bm25Index bm25_;
  VectorIndex dense_;
};

}  // namespace perank
