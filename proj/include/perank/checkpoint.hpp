#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pipeline.hpp"

namespace perank {

inline constexpr char checkpoint_magic[8] = {'P', 'E', 'R', 'A', 'N', 'K', 'C', 'K'};
inline constexpr std::uint32_t checkpoint_version = 1;

struct Tensor {
  std::string name;
  Matrix value;
};

struct Section {
  std::string name;
  std::vector<Tensor> tensors;
};

// Layout: magic, u32 version, u64-length metadata JSON, u32 section count,
// then per section a name and its tensors. Every tensor is a name, u64 rows,
// u64 cols and rows*cols float32 values; all integers little-endian.
struct Checkpoint {
  nlohmann::json meta;
  std::vector<Section> sections;

  const Section& section(const std::string& name) const {
    for (const auto& s : sections)
      if (s.name == name) return s;
    throw DataError("checkpoint has no '" + name + "' section");
  }
};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    out_.append(reinterpret_cast<const char*>(b), sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    out_ += s;
  }
  void put_raw(const char* p, std::size_t n) { out_.append(p, n); }
  const std::string& bytes() const { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : b_(b) {}
  template <class T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, b_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_raw(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw DataError("checkpoint truncated");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.put_raw(checkpoint_magic, sizeof checkpoint_magic);
  w.put<std::uint32_t>(checkpoint_version);
  w.put_string(ck.meta.dump());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.sections.size()));
  for (const auto& s : ck.sections) {
    w.put_string(s.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.tensors.size()));
    for (const auto& t : s.tensors) {
      w.put_string(t.name);
      w.put<std::uint64_t>(t.value.rows);
      w.put<std::uint64_t>(t.value.cols);
      for (double v : t.value.data) w.put<float>(static_cast<float>(v));
    }
  }
  return w.bytes();
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  if (r.get_raw(sizeof checkpoint_magic) != std::string(checkpoint_magic, sizeof checkpoint_magic))
    throw DataError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != checkpoint_version) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  try {
    ck.meta = nlohmann::json::parse(r.get_string());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  }
  const auto ns = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < ns; ++i) {
    Section s{r.get_string(), {}};
    const auto nt = r.get<std::uint32_t>();
    for (std::uint32_t j = 0; j < nt; ++j) {
      Tensor t{r.get_string(), {}};
      const auto rows = r.get<std::uint64_t>(), cols = r.get<std::uint64_t>();
      t.value = Matrix(rows, cols);
      for (double& v : t.value.data) v = r.get<float>();
      s.tensors.push_back(std::move(t));
    }
    ck.sections.push_back(std::move(s));
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  const auto b = serialize_checkpoint(ck);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file_bytes(path)); }

inline nlohmann::json model_config_json(const ModelConfig& mc) {
  return {{"hash_size", mc.hash_size},        {"d_enc", mc.d_enc},
          {"d_lm", mc.d_lm},                  {"n_layers", mc.n_layers},
          {"n_heads", mc.n_heads},            {"d_ff", mc.d_ff},
          {"max_seq", mc.max_seq},
          {"pooling", pooling_name(mc.pooling)}, {"activation", activation_name(mc.activation)},
          {"init", init_mode_name(mc.init)},  {"embed_scale", mc.embed_scale}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig mc;
  mc.hash_size = j.at("hash_size").get<std::size_t>();
  mc.d_enc = j.at("d_enc").get<std::size_t>();
  mc.d_lm = j.at("d_lm").get<std::size_t>();
  mc.n_layers = j.at("n_layers").get<std::size_t>();
  mc.n_heads = j.at("n_heads").get<std::size_t>();
  mc.d_ff = j.value("d_ff", std::size_t{0});
  mc.max_seq = j.at("max_seq").get<std::size_t>();
  mc.pooling = parse_pooling(j.at("pooling").get<std::string>());
  mc.activation = parse_activation(j.at("activation").get<std::string>());
  mc.init = parse_init_mode(j.at("init").get<std::string>());
  mc.embed_scale = j.at("embed_scale").get<double>();
  return mc;
}

inline Checkpoint make_checkpoint(Models& m, const ModelConfig& mc) {
  Checkpoint ck;
  ck.meta = {{"model", model_config_json(mc)},
             {"vocab_size", m.lm.config().vocab_size()},
             {"template_version", template_version},
             {"stage", stage_name(m.stage)},
             {"seed", m.seed}};
  auto section = [](const std::string& name, const ParamList& ps) {
    Section s{name, {}};
    for (auto* p : ps) s.tensors.push_back({p->name, p->value});
    return s;
  };
  ck.sections.push_back(section("encoder", {&m.enc.table()}));
  ck.sections.push_back(section("projector", m.proj.params()));
  ck.sections.push_back(section("lm", m.lm.params()));
  return ck;
}

inline ModelConfig checkpoint_model_config(const Checkpoint& ck) {
  try {
    return model_config_from_json(ck.meta.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  }
}

inline Stage checkpoint_stage(const Checkpoint& ck) { return parse_stage(ck.meta.value("stage", "none")); }

inline Models models_from_checkpoint(const Checkpoint& ck) {
  const ModelConfig mc = checkpoint_model_config(ck);
  if (ck.meta.value("template_version", "") != template_version)
    throw DataError("checkpoint was written for prompt templates '" + ck.meta.value("template_version", "") + "'");
  Models m{ToyEncoder(mc.hash_size, mc.d_enc, mc.pooling), Projector(mc.d_enc, mc.d_lm, mc.d_lm, mc.activation),
           ToyLm(LmConfig{mc.hash_size, mc.d_lm, mc.n_layers, mc.n_heads, mc.max_seq, 0, 1e-5}), checkpoint_stage(ck),
           ck.meta.value("seed", std::uint64_t{0})};
  auto fill = [&](const std::string& name, const ParamList& ps) {
    const Section& s = ck.section(name);
    if (s.tensors.size() != ps.size()) throw DataError("checkpoint section '" + name + "' has the wrong tensor count");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const Tensor& t = s.tensors[i];
      if (t.name != ps[i]->name || !t.value.same_shape(ps[i]->value))
        throw DataError("checkpoint tensor '" + t.name + "' " + t.value.shape() + " does not fit '" + ps[i]->name + "' " +
                        ps[i]->value.shape());
      ps[i]->value = t.value;
    }
  };
  fill("encoder", {&m.enc.table()});
  fill("projector", m.proj.params());
  fill("lm", m.lm.params());
  m.enc.table().trainable = false;
  return m;
}

inline std::uint64_t hash_params(const ParamList& ps) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : ps) {
    h = fnv1a64(p->name, h);
    h = fnv1a64(p->value.data.data(), p->value.data.size() * sizeof(double), h);
  }
  return h;
}

}  // namespace perank
