#pragma once

#include <array>
#include <string>
#include <vector>

#include "numerics.hpp"
#include "text.hpp"

namespace perank {

inline constexpr const char* template_version = "perank-prompts-v1";

enum class Origin { bos, instruction, query, passage_special, content, ranked_special };

// Which prefix a ranked-special position came from.
enum class Provenance { none, golden, predicted };

inline const char* origin_name(Origin o) {
  switch (o) {
    case Origin::bos: return "bos";
    case Origin::instruction: return "instruction-token";
    case Origin::query: return "query-token";
    case Origin::passage_special: return "passage-special";
    case Origin::content: return "content-token";
    case Origin::ranked_special: return "ranked-special";
  }
  return "?";
}

// One position of a rendered prompt before it is turned into vectors:
// either a hashed token id or a reference to a candidate's projected embedding.
struct Slot {
  Origin origin;
  int token = -1;
  int candidate = -1;
  Provenance provenance = Provenance::none;
};

// Placeholders: {{n}} {{query}} {{i}} {{embedding}} {{content}}.
// head and tail are rendered once, passage_line once per candidate.
struct RankTemplate {
  std::string name;
  std::string head;
  std::string passage_line;
  std::string tail;
};

inline RankTemplate rank_embedding_template() {
  return {"rank-embedding-only",
          "User: I will provide you with {{n}} passages, each with a special token representing the passage enclosed "
          "in []. Rank the passages based on their relevance to the search query: {{query}}.",
          "Passage {{i}}: [{{embedding}}]",
          "Search Query: {{query}} Rank the {{n}} passages above based on their relevance to the search query in "
          "descending order. Only output the {{n}} unique special token in the ranking. Assistant:"};
}

inline RankTemplate rank_content_template() {
  return {"rank-embedding-plus-content",
          "User: I will provide you with {{n}} passages, each with a special token representing the passage enclosed "
          "in [], followed by the original text. Rank the passages based on their relevance to the search query: "
          "{{query}}.",
          "Passage {{i}}: [{{embedding}}] {{content}}",
          "Search Query: {{query}} Rank the {{n}} passages above based on their relevance to the search query in "
          "descending order. Only output the {{n}} unique special token in the ranking. Assistant:"};
}

inline const std::array<std::string, 8>& align_variants() {
  static const std::array<std::string, 8> v = {
      "Given the passage: {{embedding}}, reconstruct the original text.",
      "Passage: {{embedding}} means the same as",
      "Passage: {{embedding}} Can you say the above text again?",
      "{{embedding}} Please provide a reconstruction of the preceding passage.",
      "Passage: {{embedding}} is about what?",
      "{{embedding}} Could you give me a different version of the passage above?",
      "Passage: {{embedding}} Please offer a restatement of the provided passage.",
      "Passage: {{embedding}}, which means:",
  };
  return v;
}

inline std::string align_prompt(std::size_t variant) { return "User: " + align_variants().at(variant) + " Assistant:"; }

struct RenderContext {
  std::size_t hash_size = default_hash_size;
  std::size_t n = 0;
  std::vector<int> query_tokens;
  int candidate = -1;                            // for {{i}}, {{embedding}}, {{content}}
  const std::vector<std::vector<int>>* contents = nullptr;
};

inline void render_into(const std::string& tpl, const RenderContext& ctx, std::vector<Slot>& out) {
  auto emit_text = [&](const std::string& s, Origin o) {
    for (int t : tokenize(s, ctx.hash_size)) out.push_back({o, t});
  };
  std::size_t pos = 0;
  while (pos < tpl.size()) {
    const std::size_t open = tpl.find("{{", pos);
    if (open == std::string::npos) {
      emit_text(tpl.substr(pos), Origin::instruction);
      break;
    }
    emit_text(tpl.substr(pos, open - pos), Origin::instruction);
    const std::size_t close = tpl.find("}}", open);
    if (close == std::string::npos) throw Error("unterminated placeholder in template");
    const std::string key = tpl.substr(open + 2, close - open - 2);
    if (key == "n") {
      emit_text(std::to_string(ctx.n), Origin::instruction);
    } else if (key == "query") {
      for (int t : ctx.query_tokens) out.push_back({Origin::query, t});
    } else if (key == "i") {
      emit_text(std::to_string(ctx.candidate + 1), Origin::instruction);
    } else if (key == "embedding") {
      out.push_back({Origin::passage_special, -1, ctx.candidate});
    } else if (key == "content") {
      if (!ctx.contents) throw Error("template uses {{content}} but no content was supplied");
      for (int t : ctx.contents->at(static_cast<std::size_t>(ctx.candidate))) out.push_back({Origin::content, t, ctx.candidate});
    } else {
      throw Error("unknown placeholder {{" + key + "}}");
    }
    pos = close + 2;
  }
}

// Slot stream for a ranking prompt, BOS first. `contents` may be null when the
// template has no {{content}} placeholder.
inline std::vector<Slot> render_rank(const RankTemplate& tpl, const std::vector<int>& query_tokens, std::size_t n,
                                     const std::vector<std::vector<int>>* contents, std::size_t hash_size) {
  std::vector<Slot> out{{Origin::bos, static_cast<int>(hash_size)}};
  RenderContext ctx{hash_size, n, query_tokens, -1, contents};
  render_into(tpl.head, ctx, out);
  for (std::size_t i = 0; i < n; ++i) {
    ctx.candidate = static_cast<int>(i);
    render_into(tpl.passage_line, ctx, out);
  }
  ctx.candidate = -1;
  render_into(tpl.tail, ctx, out);
  return out;
}

inline std::vector<Slot> render_align(std::size_t variant, std::size_t hash_size) {
  std::vector<Slot> out{{Origin::bos, static_cast<int>(hash_size)}};
  RenderContext ctx{hash_size, 1, {}, 0, nullptr};
  render_into(align_prompt(variant), ctx, out);
  return out;
}

inline std::size_t draw_align_variant(Rng& rng) { return static_cast<std::size_t>(rng.below(align_variants().size())); }

}  // namespace perank
