#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "decoding.hpp"
#include "numerics.hpp"

namespace perank {

class Qrels {
 public:
  void set(const std::string& qid, const std::string& docid, int grade) {
    if (grade < 0) throw DataError("negative relevance grade for " + qid + "/" + docid);
    judgments_[qid][docid] = grade;
  }

  int grade(const std::string& qid, const std::string& docid) const {
    auto q = judgments_.find(qid);
    if (q == judgments_.end()) return 0;
    auto d = q->second.find(docid);
    return d == q->second.end() ? 0 : d->second;
  }

  bool has_query(const std::string& qid) const { return judgments_.count(qid) != 0; }
  const std::map<std::string, int>& for_query(const std::string& qid) const { return judgments_.at(qid); }
  const std::map<std::string, std::map<std::string, int>>& all() const { return judgments_; }

 private:
  std::map<std::string, std::map<std::string, int>> judgments_;
};

inline Qrels load_qrels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  Qrels q;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string qid, iter, docid;
    int grade;
    if (!(ss >> qid)) continue;
    if (!(ss >> iter >> docid >> grade)) throw DataError(path + ":" + std::to_string(lineno) + ": expected 'qid 0 docid grade'");
    q.set(qid, docid, grade);
  }
  return q;
}

inline void save_qrels(const Qrels& q, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (const auto& [qid, docs] : q.all())
    for (const auto& [docid, g] : docs) out << qid << " 0 " << docid << " " << g << "\n";
}

struct RunEntry {
  std::string docid;
  double score;
};

struct RunFile {
  std::string tag = "perank";
  std::map<std::string, std::vector<RunEntry>> queries;  // ranked, best first
};

inline RunFile load_run(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  RunFile r;
  std::map<std::string, std::vector<std::pair<long, RunEntry>>> tmp;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string qid, q0, docid, tag;
    long rank;
    double score;
    if (!(ss >> qid)) continue;
    if (!(ss >> q0 >> docid >> rank >> score >> tag))
      throw DataError(path + ":" + std::to_string(lineno) + ": expected 'qid Q0 docid rank score tag'");
    r.tag = tag;
    tmp[qid].push_back({rank, {docid, score}});
  }
  for (auto& [qid, v] : tmp) {
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i].first != static_cast<long>(i + 1)) throw DataError(path + ": ranks for query " + qid + " are not contiguous from 1");
      r.queries[qid].push_back(v[i].second);
    }
  }
  return r;
}

inline void write_run(std::ostream& os, const RunFile& r) {
  os << std::setprecision(10);
  for (const auto& [qid, v] : r.queries)
    for (std::size_t i = 0; i < v.size(); ++i) os << qid << " Q0 " << v[i].docid << " " << i + 1 << " " << v[i].score << " " << r.tag << "\n";
}

inline void save_run(const RunFile& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  write_run(out, r);
}

enum class Gain { exponential, linear };

struct NdcgReport {
  std::map<std::string, double> per_query;
  double mean = 0.0;
  std::vector<std::string> zero_judgments;  // scored 0
  std::vector<std::string> missing;         // absent from qrels, excluded
};

inline double gain_of(int rel, Gain g) { return g == Gain::exponential ? std::pow(2.0, rel) - 1.0 : static_cast<double>(rel); }

inline double dcg(const std::vector<int>& rels, std::size_t k, Gain g) {
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(k, rels.size()); ++i) s += gain_of(rels[i], g) / std::log2(static_cast<double>(i) + 2.0);
  return s;
}

inline NdcgReport ndcg_at_k(const RunFile& run, const Qrels& qrels, std::size_t k = 10, Gain gain = Gain::exponential) {
  if (k == 0) throw UsageError("ndcg cutoff must be at least 1");
  NdcgReport rep;
  double sum = 0.0;
  for (const auto& [qid, entries] : run.queries) {
    if (!qrels.has_query(qid)) {
      rep.missing.push_back(qid);
      continue;
    }
    std::vector<int> got;
    for (const auto& e : entries) got.push_back(qrels.grade(qid, e.docid));
    std::vector<int> ideal;
    for (const auto& [doc, g] : qrels.for_query(qid)) ideal.push_back(g);
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    const double idcg = dcg(ideal, k, gain);
    double v = 0.0;
    if (idcg > 0.0)
      v = dcg(got, k, gain) / idcg;
    else
      rep.zero_judgments.push_back(qid);
    rep.per_query[qid] = v;
    sum += v;
  }
  rep.mean = rep.per_query.empty() ? 0.0 : sum / static_cast<double>(rep.per_query.size());
  return rep;
}

namespace detail {

// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  const double tiny = 1e-300;
  double c = 1.0, d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) return h;
  }
  throw Error("incomplete beta: continued fraction did not converge");
}

}  // namespace detail

inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(lbt) * detail::beta_cf(a, b, x) / a;
  return 1.0 - std::exp(lbt) * detail::beta_cf(b, a, 1.0 - x) / b;
}

// Two-sided tail probability of Student's t with df degrees of freedom.
inline double student_t_two_sided(double t, double df) { return incomplete_beta(0.5 * df, 0.5, df / (df + t * t)); }

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t df = 0;
  bool degenerate = false;  // zero variance of the differences
};

inline TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error("paired_ttest: samples differ in length");
  if (a.size() < 2) throw Error("paired_ttest: need at least two pairs");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = a[i] - b[i];
    mean += d[i];
  }
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double x : d) ss += (x - mean) * (x - mean);
  TTestResult r;
  r.df = n - 1;
  const double var = ss / static_cast<double>(n - 1);
  if (var == 0.0) {
    r.degenerate = true;
    if (mean == 0.0) return r;
    r.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.t = mean / std::sqrt(var / static_cast<double>(n));
  r.p = student_t_two_sided(r.t, static_cast<double>(r.df));
  return r;
}

enum class CostMode { embedding, text };

struct CostModel {
  CostMode mode = CostMode::embedding;
  double instruction_tokens = 0.0;  // per prompt, excluding the query
  double query_tokens = 0.0;        // per prompt
  double passage_tokens = 0.0;      // mean tokens per passage
  double text_tokens_per_passage = 4.5;  // generated per passage in text mode
};

struct PredictedCost {
  std::size_t passes = 0;
  double processed = 0.0;
  double generated = 0.0;
};

// Per pass: text mode processes instruction + query + w * passage tokens and
// emits that many tokens per passage times w; embedding mode processes instruction + query + w and emits w.
// Totals scale with the pass count.
inline PredictedCost predict_cost(const CostModel& cm, WindowSchedule sched) {
  sched.validate();
  const double w = static_cast<double>(sched.window_len());
  PredictedCost c;
  c.passes = sched.passes();
  const double P = static_cast<double>(c.passes);
  if (cm.mode == CostMode::text) {
    c.processed = P * (cm.instruction_tokens + cm.query_tokens + w * cm.passage_tokens);
    c.generated = P * cm.text_tokens_per_passage * w;
  } else {
    c.processed = P * (cm.instruction_tokens + cm.query_tokens + w);
    c.generated = P * w;
  }
  return c;
}

// Runs `rerank` reps times; counts come from the first run, latencies are medians.
inline TokenStats measure_cost(const std::function<RankingList()>& rerank, std::size_t reps = 5) {
  if (reps == 0) throw UsageError("measure_cost needs at least one repetition");
  TokenStats first;
  std::vector<double> pre, dec;
  for (std::size_t r = 0; r < reps; ++r) {
    const RankingList rl = rerank();
    if (r == 0) first = rl.stats;
    if (rl.stats.processed != first.processed || rl.stats.generated != first.generated)
      throw Error("measure_cost: token counts changed between repetitions");
    pre.push_back(rl.stats.prefill_seconds);
    dec.push_back(rl.stats.decode_seconds);
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  first.prefill_seconds = median(pre);
  first.decode_seconds = median(dec);
  return first;
}

struct EfficiencyRow {
  std::string system;
  std::size_t n, w, s;
  double processed, generated, prefill_s, decode_s;
};

inline void write_efficiency_report(std::ostream& os, const std::vector<EfficiencyRow>& rows) {
  os << "system\tn\tw\ts\tprocessed\tgenerated\tprefill_s\tdecode_s\n";
  for (const auto& r : rows)
    os << r.system << '\t' << r.n << '\t' << r.w << '\t' << r.s << '\t' << r.processed << '\t' << r.generated << '\t' << r.prefill_s
       << '\t' << r.decode_s << '\n';
  os << "# text-mode rows are predictions from the cost model (a lower bound: separators are not counted); "
        "latency columns for them are not measured\n";
}

}  // namespace perank
