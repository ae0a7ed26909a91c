// perank: command-line front end for indexing, retrieval, two-stage
// training, reranking, evaluation and efficiency reporting.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include <perank/checkpoint.hpp>
#include <perank/evaluation.hpp>
#include <perank/pipeline.hpp>
#include <perank/synthetic.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace perank;

namespace {

// Options of one subcommand, settable by flag or by a JSON config file.
class OptionSet {
 public:
  explicit OptionSet(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* add(const std::string& name, T& field, const std::string& desc) {
    setters_[name] = [&field, name](const json& j) {
      try {
        field = j.get<T>();
      } catch (const json::exception&) {
        throw UsageError("config key '" + name + "' has the wrong type");
      }
    };
    getters_[name] = [&field] { return json(field); };
    return app_->add_option("--" + name, field, desc)->capture_default_str();
  }

  CLI::Option* flag(const std::string& name, bool& field, const std::string& desc) {
    setters_[name] = [&field](const json& j) { field = j.get<bool>(); };
    getters_[name] = [&field] { return json(field); };
    return app_->add_flag("--" + name, field, desc);
  }

  void apply(const json& cfg) const {
    for (const auto& [k, v] : cfg.items()) {
      auto it = setters_.find(k);
      if (it == setters_.end()) throw UsageError("unknown config key '" + k + "' for '" + app_->get_name() + "'");
      it->second(v);
    }
  }

  json snapshot() const {
    json j = json::object();
    for (const auto& [k, g] : getters_) j[k] = g();
    return j;
  }

  CLI::App* app() const { return app_; }

 private:
  CLI::App* app_;
  std::map<std::string, std::function<void(const json&)>> setters_;
  std::map<std::string, std::function<json()>> getters_;
};

std::string hash_file(const std::string& path) { return to_hex(fnv1a64(read_file_bytes(path))); }

struct Manifest {
  std::string command;
  json config;
  json inputs = json::object();
  json outputs = json::object();
  json extra = json::object();

  void input(const std::string& p) {
    if (!p.empty()) inputs[p] = hash_file(p);
  }
  void output(const std::string& p) { outputs[p] = hash_file(p); }

  void write(const std::string& path) const {
    json j = {{"command", command}, {"config", config}, {"inputs", inputs}, {"outputs", outputs}};
    if (!extra.empty()) j["results"] = extra;
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << j.dump(2) << "\n";
  }
};

struct ModelFlags {
  std::uint64_t model_seed = 1;
  std::size_t hash_size = default_hash_size;
  std::size_t d_enc = 64;
  std::size_t d_lm = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t d_ff = 0;
  std::size_t max_seq = 512;
  std::string pooling = "mean";
  std::string activation = "gelu";
  std::string init = "shared-lexicon";

  void add(OptionSet& o) {
    o.add("model-seed", model_seed, "seed for freshly initialized models");
    o.add("hash-size", hash_size, "hashed vocabulary size");
    o.add("d-enc", d_enc, "encoder embedding width");
    o.add("d-lm", d_lm, "LM width");
    o.add("layers", layers, "LM layers");
    o.add("heads", heads, "attention heads");
    o.add("d-ff", d_ff, "feed-forward width (0 = 4 * d-lm)");
    o.add("max-seq", max_seq, "LM context length");
    o.add("pooling", pooling, "encoder pooling: mean|cls");
    o.add("activation", activation, "projector activation: gelu|tanh|identity");
    o.add("weight-init", init, "weight init: shared-lexicon|independent");
  }

  ModelConfig config() const {
    ModelConfig mc;
    mc.hash_size = hash_size;
    mc.d_enc = d_enc;
    mc.d_lm = d_lm;
    mc.n_layers = layers;
    mc.n_heads = heads;
    mc.d_ff = d_ff;
    mc.max_seq = max_seq;
    mc.pooling = parse_pooling(pooling);
    mc.activation = parse_activation(activation);
    mc.init = parse_init_mode(init);
    return mc;
  }
};

// Models from a checkpoint if one is given, otherwise freshly initialized.
std::pair<Models, ModelConfig> obtain_models(const std::string& checkpoint, const ModelFlags& mf) {
  if (!checkpoint.empty()) {
    const auto ck = load_checkpoint(checkpoint);
    return {models_from_checkpoint(ck), checkpoint_model_config(ck)};
  }
  const ModelConfig mc = mf.config();
  return {make_models(mc, mf.model_seed), mc};
}

void ensure_parent(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::string manifest_path(const std::string& out) { return out + ".manifest.json"; }

// ---- gen-synthetic ----
struct GenArgs {
  std::string out;
  std::uint64_t seed = 7;
  std::size_t test_queries = 40;
  std::size_t train_queries = 2000;
  std::size_t train_candidates = 20;
  std::size_t passage_len = 6;
  double teacher_common_weight = 0.05;
  ModelFlags model;
};

void cmd_gen_synthetic(const GenArgs& a, const json& cfg) {
  SyntheticConfig sc;
  sc.seed = a.seed;
  sc.test_queries = a.test_queries;
  sc.train_queries = a.train_queries;
  sc.train_candidates = a.train_candidates;
  sc.passage_len = a.passage_len;
  sc.hash_size = a.model.hash_size;
  const auto data = generate_synthetic(sc);
  fs::create_directories(a.out);
  const std::string dir = a.out + "/";
  save_corpus(data.test.corpus, dir + "corpus.jsonl");
  save_queries(data.test.queries, dir + "queries.jsonl");
  save_qrels(data.test.qrels, dir + "qrels.txt");
  save_corpus(data.train.corpus, dir + "train_corpus.jsonl");
  save_queries(data.train.queries, dir + "train_queries.jsonl");
  save_qrels(data.train.qrels, dir + "train_qrels.txt");

  const auto [models, mc] = obtain_models("", a.model);
  Bm25Index stats(data.train.corpus, mc.hash_size);
  const auto teacher = lexical_overlap_teacher(stats, data.common_tokens, a.teacher_common_weight);
  auto ds = build_rank_dataset(data.train, models.enc, teacher, a.train_candidates, a.seed + 1);
  std::size_t dropped = 0;
  ds = length_filter(std::move(ds), mc.max_seq, mc.hash_size, &dropped);
  save_rank_dataset(ds, dir + "train_rank.jsonl");

  Manifest m{"gen-synthetic", cfg};
  for (const char* f : {"corpus.jsonl", "queries.jsonl", "qrels.txt", "train_corpus.jsonl", "train_queries.jsonl",
                        "train_qrels.txt", "train_rank.jsonl"})
    m.output(dir + f);
  m.extra = {{"test_passages", data.test.corpus.size()},
             {"test_queries", data.test.queries.size()},
             {"train_samples", ds.size()},
             {"length_filtered", dropped}};
  m.write(dir + "manifest.json");
}

// ---- index ----
struct IndexArgs {
  std::string corpus, out, checkpoint;
  ModelFlags model;
};

void cmd_index(const IndexArgs& a, const json& cfg) {
  const Corpus corpus = load_corpus(a.corpus);
  if (corpus.empty()) throw DataError("empty corpus");
  const auto [models, mc] = obtain_models(a.checkpoint, a.model);
  fs::create_directories(a.out);
  const Bm25Index bm25(corpus, mc.hash_size);
  json postings = json::object();
  for (const auto& [t, ps] : bm25.postings()) {
    json arr = json::array();
    for (const auto& p : ps) arr.push_back({bm25.ids()[p.doc], p.tf});
    postings[std::to_string(t)] = arr;
  }
  const json bj = {{"k1", bm25.k1()},
                   {"b", bm25.b()},
                   {"N", bm25.size()},
                   {"avgdl", bm25.avgdl()},
                   {"hash_size", mc.hash_size},
                   {"ids", bm25.ids()},
                   {"doc_lengths", bm25.doc_lengths()},
                   {"postings", postings}};
  std::ofstream(a.out + "/bm25.json") << bj.dump() << "\n";
  save_embeddings(build_vector_index(corpus, models.enc), a.out + "/embeddings.jsonl");
  Manifest m{"index", cfg};
  m.input(a.corpus);
  m.input(a.checkpoint);
  m.output(a.out + "/bm25.json");
  m.output(a.out + "/embeddings.jsonl");
  m.extra = {{"passages", corpus.size()}};
  m.write(a.out + "/manifest.json");
}

// ---- retrieve ----
struct RetrieveArgs {
  std::string corpus, queries, out, checkpoint, embeddings;
  std::size_t k = 100;
  std::string backend = "dense";
  ModelFlags model;
};

Retriever make_retriever(const Corpus& corpus, const ToyEncoder& enc, const std::string& embeddings) {
  if (embeddings.empty()) return Retriever(corpus, enc);
  return Retriever(corpus, enc, load_embeddings(embeddings));
}

void cmd_retrieve(const RetrieveArgs& a, const json& cfg) {
  const Corpus corpus = load_corpus(a.corpus);
  const auto queries = load_queries(a.queries);
  const auto [models, mc] = obtain_models(a.checkpoint, a.model);
  const Retriever r = make_retriever(corpus, models.enc, a.embeddings);
  const RunFile run = first_stage_run(r, queries, a.k, parse_backend(a.backend), a.backend);
  ensure_parent(a.out);
  save_run(run, a.out);
  Manifest m{"retrieve", cfg};
  for (const auto& p : {a.corpus, a.queries, a.checkpoint, a.embeddings}) m.input(p);
  m.output(a.out);
  m.write(manifest_path(a.out));
}

// ---- training ----
struct TrainArgs {
  std::string data, out, init, log;
  bool no_align = false;
  std::uint64_t seed = 0;
  double lr = 0.0;
  std::size_t batch = 0;
  std::size_t epochs = 1;
  double alpha = 0.2;
  double clip = 1.0;
  bool no_shuffle = false;
  std::size_t limit = 0;
  ModelFlags model;
};

std::ofstream open_log(const std::string& path) {
  ensure_parent(path);
  std::ofstream log(path);
  if (!log) throw DataError("cannot write '" + path + "'");
  log << "step\tstage\tloss_total\tloss_rank\tloss_content\tloss_kl\n";
  return log;
}

void cmd_train_align(const TrainArgs& a, const json& cfg) {
  auto [models, mc] = obtain_models(a.init, a.model);
  const Corpus corpus = load_corpus(a.data);
  auto samples = alignment_samples(corpus, models.enc);
  if (a.limit && samples.size() > a.limit) samples.resize(a.limit);
  TrainConfig tc = TrainConfig::align_defaults();
  tc.seed = a.seed;
  if (a.lr > 0) tc.lr = a.lr;
  if (a.batch > 0) tc.batch = a.batch;
  tc.epochs = a.epochs;
  tc.clip_norm = a.clip;
  const std::string log_path = a.log.empty() ? a.out + ".loss.tsv" : a.log;
  auto log = open_log(log_path);
  const std::size_t steps = train_align(models.lm, models.proj, models.enc, samples, tc, [&](const StepLog& l) { write_loss_line(log, l); });
  log.close();
  models.stage = Stage::align;
  ensure_parent(a.out);
  save_checkpoint(make_checkpoint(models, mc), a.out);
  Manifest m{"train-align", cfg};
  m.input(a.data);
  m.input(a.init);
  m.output(a.out);
  m.output(log_path);
  m.extra = {{"steps", steps}, {"samples", samples.size()}};
  m.write(manifest_path(a.out));
}

void cmd_train_rank(const TrainArgs& a, const json& cfg) {
  if (a.init.empty() && !a.no_align)
    throw UsageError("train-rank needs an alignment-stage checkpoint (--init); pass --no-align to skip the alignment stage");
  auto [models, mc] = obtain_models(a.init, a.model);
  if (!a.init.empty() && models.stage != Stage::align && models.stage != Stage::rank)
    throw UsageError("checkpoint '" + a.init + "' has not completed the alignment stage; run train-align first");
  auto ds = load_rank_dataset(a.data, models.enc);
  std::size_t dropped = 0;
  ds = length_filter(std::move(ds), mc.max_seq, mc.hash_size, &dropped);
  if (a.limit && ds.size() > a.limit) ds.resize(a.limit);
  TrainConfig tc = TrainConfig::rank_defaults();
  tc.seed = a.seed;
  if (a.lr > 0) tc.lr = a.lr;
  if (a.batch > 0) tc.batch = a.batch;
  tc.epochs = a.epochs;
  tc.alpha = a.alpha;
  tc.clip_norm = a.clip;
  tc.shuffle_augment = !a.no_shuffle;
  const std::string log_path = a.log.empty() ? a.out + ".loss.tsv" : a.log;
  auto log = open_log(log_path);
  const std::size_t steps = train_rank(models.lm, models.proj, models.enc, ds, tc, [&](const StepLog& l) { write_loss_line(log, l); });
  log.close();
  models.stage = Stage::rank;
  ensure_parent(a.out);
  save_checkpoint(make_checkpoint(models, mc), a.out);
  Manifest m{"train-rank", cfg};
  m.input(a.data);
  m.input(a.init);
  m.output(a.out);
  m.output(log_path);
  m.extra = {{"steps", steps}, {"samples", ds.size()}, {"length_filtered", dropped}, {"aligned", !a.no_align}};
  m.write(manifest_path(a.out));
}

// ---- rerank ----
struct RerankArgs {
  std::string checkpoint, corpus, queries, out, embeddings;
  std::size_t k = 100, w = 20, s = 10;
  std::string backend = "dense";
};

void cmd_rerank(const RerankArgs& a, const json& cfg) {
  const auto ck = load_checkpoint(a.checkpoint);
  if (checkpoint_stage(ck) != Stage::rank)
    throw UsageError("rerank needs a rank-stage checkpoint; '" + a.checkpoint + "' is at stage '" + stage_name(checkpoint_stage(ck)) +
                     "' (run train-rank)");
  const Models models = models_from_checkpoint(ck);
  const Corpus corpus = load_corpus(a.corpus);
  const auto queries = load_queries(a.queries);
  const Retriever r = make_retriever(corpus, models.enc, a.embeddings);
  const auto res = rerank_queries(models, r, queries, a.k, parse_backend(a.backend), WindowSchedule{0, a.w, a.s});
  ensure_parent(a.out);
  save_run(res.run, a.out);
  TokenStats tot;
  for (const auto& s : res.stats) {
    tot.processed += s.processed;
    tot.generated += s.generated;
    tot.prefill_seconds += s.prefill_seconds;
    tot.decode_seconds += s.decode_seconds;
    tot.passes = std::max(tot.passes, s.passes);
  }
  Manifest m{"rerank", cfg};
  for (const auto& p : {a.checkpoint, a.corpus, a.queries, a.embeddings}) m.input(p);
  m.output(a.out);
  m.extra = {{"queries", queries.size()},
             {"passes", tot.passes},
             {"processed", tot.processed},
             {"generated", tot.generated},
             {"prefill_s", tot.prefill_seconds},
             {"decode_s", tot.decode_seconds}};
  m.write(manifest_path(a.out));
}

// ---- eval ----
struct EvalArgs {
  std::string run, qrels, baseline, out;
  std::size_t k = 10;
  std::string gain = "exponential";
};

void cmd_eval(const EvalArgs& a, const json& cfg) {
  const RunFile run = load_run(a.run);
  const Qrels qrels = load_qrels(a.qrels);
  const Gain gain = a.gain == "linear" ? Gain::linear : a.gain == "exponential" ? Gain::exponential
                                                                                 : throw UsageError("gain must be exponential or linear");
  const auto rep = ndcg_at_k(run, qrels, a.k, gain);
  for (const auto& q : rep.missing) std::cerr << "warning: query " << q << " has no judgments; excluded\n";
  for (const auto& q : rep.zero_judgments) std::cerr << "warning: query " << q << " has only zero grades; scored 0\n";
  json res = {{"metric", "ndcg@" + std::to_string(a.k)},
              {"mean", rep.mean},
              {"queries", rep.per_query.size()},
              {"per_query", rep.per_query},
              {"missing", rep.missing},
              {"zero_judgments", rep.zero_judgments}};
  if (!a.baseline.empty()) {
    const auto base = ndcg_at_k(load_run(a.baseline), qrels, a.k, gain);
    std::vector<double> x, y;
    for (const auto& [q, v] : rep.per_query) {
      auto it = base.per_query.find(q);
      if (it == base.per_query.end()) continue;
      x.push_back(v);
      y.push_back(it->second);
    }
    const auto t = paired_ttest(x, y);
    res["baseline_mean"] = base.mean;
    res["ttest"] = {{"t", std::isfinite(t.t) ? json(t.t) : json(t.t > 0 ? "inf" : "-inf")}, {"p", t.p}, {"df", t.df}, {"degenerate", t.degenerate}};
  }
  std::cout << "ndcg@" << a.k << "\t" << rep.mean << "\n";
  Manifest m{"eval", cfg};
  m.input(a.run);
  m.input(a.qrels);
  m.input(a.baseline);
  m.extra = res;
  if (!a.out.empty()) {
    ensure_parent(a.out);
    std::ofstream(a.out) << res.dump(2) << "\n";
    m.output(a.out);
    m.write(manifest_path(a.out));
  } else {
    m.write(manifest_path(a.run) + ".eval");
  }
}

// ---- bench ----
struct BenchArgs {
  std::string checkpoint, corpus, queries, out;
  std::size_t n = 100, w = 20, s = 10, reps = 5, max_queries = 5;
  double text_tokens_per_passage = 4.5;
};

void cmd_bench(const BenchArgs& a, const json& cfg) {
  const auto ck = load_checkpoint(a.checkpoint);
  const Models models = models_from_checkpoint(ck);
  const Corpus corpus = load_corpus(a.corpus);
  auto queries = load_queries(a.queries);
  if (queries.size() > a.max_queries) queries.resize(a.max_queries);
  if (queries.empty()) throw DataError("no queries to benchmark");
  const Retriever r(corpus, models.enc);
  const std::size_t hs = models.enc.hash_size();
  // prompt overhead of the embedding template with no query, minus its n specials
  double instruction_tokens = 0, query_tokens = 0, passage_tokens = 0;
  for (const auto& p : corpus.passages()) passage_tokens += static_cast<double>(tokenize(p.full_text(), hs).size());
  passage_tokens /= static_cast<double>(corpus.size());
  const std::size_t win = std::min(a.w, a.n);
  instruction_tokens = static_cast<double>(render_rank(rank_embedding_template(), {}, win, nullptr, hs).size() - win);

  EfficiencyRow measured{"embedding-measured", a.n, a.w, a.s, 0, 0, 0, 0};
  for (const auto& q : queries) {
    const auto qt = tokenize(q.text, hs);
    query_tokens += static_cast<double>(qt.size()) * 2.0;  // the template states the query twice
    const auto hits = r.retrieve_topk(q.text, a.n, Backend::dense);
    std::vector<Embedding> es;
    for (const auto& h : hits) es.push_back(h.embedding);
    const auto st = measure_cost([&] { return sliding_window_rerank(models.lm, models.proj, qt, es, WindowSchedule{0, a.w, a.s}); }, a.reps);
    measured.n = es.size();
    measured.processed += static_cast<double>(st.processed);
    measured.generated += static_cast<double>(st.generated);
    measured.prefill_s += st.prefill_seconds;
    measured.decode_s += st.decode_seconds;
  }
  const double nq = static_cast<double>(queries.size());
  query_tokens /= nq;
  for (double* v : {&measured.processed, &measured.generated, &measured.prefill_s, &measured.decode_s}) *v /= nq;
  const WindowSchedule sched{measured.n, a.w, a.s};
  const auto pe = predict_cost({CostMode::embedding, instruction_tokens, query_tokens, passage_tokens, a.text_tokens_per_passage}, sched);
  const auto pt = predict_cost({CostMode::text, instruction_tokens, query_tokens, passage_tokens, a.text_tokens_per_passage}, sched);
  std::vector<EfficiencyRow> rows{measured,
                                  {"embedding-predicted", measured.n, a.w, a.s, pe.processed, pe.generated, 0, 0},
                                  {"text-predicted", measured.n, a.w, a.s, pt.processed, pt.generated, 0, 0}};
  ensure_parent(a.out);
  std::ofstream out(a.out);
  if (!out) throw DataError("cannot write '" + a.out + "'");
  write_efficiency_report(out, rows);
  out.close();
  Manifest m{"bench", cfg};
  for (const auto& p : {a.checkpoint, a.corpus, a.queries}) m.input(p);
  m.output(a.out);
  m.extra = {{"passes", pe.passes}, {"instruction_tokens", instruction_tokens}, {"query_tokens", query_tokens}, {"passage_tokens", passage_tokens}};
  m.write(manifest_path(a.out));
}

std::string find_config_arg(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string s = argv[i];
    if (s == "--config" && i + 1 < argc) return argv[i + 1];
    if (s.rfind("--config=", 0) == 0) return s.substr(9);
  }
  return "";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"perank: listwise reranking with passage embeddings as special tokens"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file; explicit flags win")->check(CLI::ExistingFile);

  std::map<std::string, std::unique_ptr<OptionSet>> sets;
  std::map<std::string, std::function<void(const json&)>> runs;
  auto sub = [&](const std::string& name, const std::string& desc) -> OptionSet& {
    auto* s = app.add_subcommand(name, desc);
    s->fallthrough();
    auto& os = *(sets[name] = std::make_unique<OptionSet>(s));
    return os;
  };

  GenArgs gen;
  {
    auto& o = sub("gen-synthetic", "write the planted-relevance corpus and training data");
    o.add("out", gen.out, "output directory")->required();
    o.add("seed", gen.seed, "corpus seed");
    o.add("test-queries", gen.test_queries, "evaluation queries");
    o.add("train-queries", gen.train_queries, "training queries");
    o.add("train-candidates", gen.train_candidates, "candidates per training sample");
    o.add("passage-len", gen.passage_len, "tokens per passage");
    o.add("teacher-common-weight", gen.teacher_common_weight, "teacher weight factor for common words");
    gen.model.add(o);
    runs["gen-synthetic"] = [&](const json& c) { cmd_gen_synthetic(gen, c); };
  }
  IndexArgs idx;
  {
    auto& o = sub("index", "build BM25 and dense indexes for a corpus");
    o.add("corpus", idx.corpus, "corpus JSONL")->required();
    o.add("out", idx.out, "output directory")->required();
    o.add("checkpoint", idx.checkpoint, "take the encoder from this checkpoint");
    idx.model.add(o);
    runs["index"] = [&](const json& c) { cmd_index(idx, c); };
  }
  RetrieveArgs ret;
  {
    auto& o = sub("retrieve", "first-stage retrieval to a TREC run");
    o.add("corpus", ret.corpus, "corpus JSONL")->required();
    o.add("queries", ret.queries, "queries JSONL")->required();
    o.add("out", ret.out, "run file")->required();
    o.add("checkpoint", ret.checkpoint, "take the encoder from this checkpoint");
    o.add("embeddings", ret.embeddings, "reuse stored passage embeddings");
    o.add("k", ret.k, "results per query");
    o.add("backend", ret.backend, "bm25|dense");
    ret.model.add(o);
    runs["retrieve"] = [&](const json& c) { cmd_retrieve(ret, c); };
  }
  TrainArgs ta, tr;
  for (auto* t : {&ta, &tr}) {
    const bool rank = t == &tr;
    auto& o = sub(rank ? "train-rank" : "train-align", rank ? "learning-to-rank stage" : "alignment stage (projector only)");
    o.add(rank ? "dataset" : "corpus", t->data, rank ? "rank dataset JSONL" : "texts to reconstruct (corpus JSONL)")->required();
    o.add("out", t->out, "output checkpoint")->required();
    o.add("init", t->init, rank ? "alignment-stage checkpoint" : "start from this checkpoint");
    o.add("log", t->log, "loss log (default <out>.loss.tsv)");
    o.add("seed", t->seed, "training seed");
    o.add("lr", t->lr, "learning rate (0 = stage default)");
    o.add("batch", t->batch, "batch size (0 = stage default)");
    o.add("epochs", t->epochs, "epochs");
    o.add("clip", t->clip, "gradient clipping norm");
    o.add("limit", t->limit, "use at most this many samples (0 = all)");
    if (rank) {
      o.add("alpha", t->alpha, "KL weight");
      o.flag("no-align", t->no_align, "start from fresh weights without an alignment stage");
      o.flag("no-shuffle", t->no_shuffle, "disable shuffle augmentation");
    }
    t->model.add(o);
    runs[rank ? "train-rank" : "train-align"] = [t, rank](const json& c) { rank ? cmd_train_rank(*t, c) : cmd_train_align(*t, c); };
  }
  RerankArgs rr;
  {
    auto& o = sub("rerank", "rerank first-stage candidates with a trained checkpoint");
    o.add("checkpoint", rr.checkpoint, "rank-stage checkpoint")->required();
    o.add("corpus", rr.corpus, "corpus JSONL")->required();
    o.add("queries", rr.queries, "queries JSONL")->required();
    o.add("out", rr.out, "run file")->required();
    o.add("embeddings", rr.embeddings, "reuse stored passage embeddings");
    o.add("k", rr.k, "first-stage depth");
    o.add("w", rr.w, "window size");
    o.add("s", rr.s, "step size");
    o.add("backend", rr.backend, "bm25|dense");
    runs["rerank"] = [&](const json& c) { cmd_rerank(rr, c); };
  }
  EvalArgs ev;
  {
    auto& o = sub("eval", "NDCG@k and paired t-test");
    o.add("run", ev.run, "run file")->required();
    o.add("qrels", ev.qrels, "qrels file")->required();
    o.add("baseline", ev.baseline, "second run for a paired t-test");
    o.add("out", ev.out, "write the JSON report here");
    o.add("k", ev.k, "cutoff");
    o.add("gain", ev.gain, "exponential|linear");
    runs["eval"] = [&](const json& c) { cmd_eval(ev, c); };
  }
  BenchArgs be;
  {
    auto& o = sub("bench", "token and latency accounting");
    o.add("checkpoint", be.checkpoint, "checkpoint")->required();
    o.add("corpus", be.corpus, "corpus JSONL")->required();
    o.add("queries", be.queries, "queries JSONL")->required();
    o.add("out", be.out, "TSV report")->required();
    o.add("n", be.n, "candidates per query");
    o.add("w", be.w, "window size");
    o.add("s", be.s, "step size");
    o.add("reps", be.reps, "timing repetitions (median)");
    o.add("max-queries", be.max_queries, "queries to time");
    o.add("text-tokens-per-passage", be.text_tokens_per_passage, "text-mode generated tokens per passage");
    runs["bench"] = [&](const json& c) { cmd_bench(be, c); };
  }

  try {
    const std::string cfg_file = find_config_arg(argc, argv);
    json file_cfg = json::object();
    if (!cfg_file.empty()) {
      std::ifstream in(cfg_file);
      if (!in) throw UsageError("cannot open config '" + cfg_file + "'");
      try {
        file_cfg = json::parse(in);
      } catch (const json::exception& e) {
        throw UsageError("config '" + cfg_file + "' is not valid JSON: " + e.what());
      }
      // apply to the subcommand named on the command line before flags are parsed
      for (int i = 1; i < argc; ++i)
        if (sets.count(argv[i])) {
          sets[argv[i]]->apply(file_cfg);
          break;
        }
    }
    app.parse(argc, argv);
    for (auto& [name, os] : sets)
      if (os->app()->parsed()) {
        json snap = os->snapshot();
        runs[name](snap);
      }
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
