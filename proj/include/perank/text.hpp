#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace perank {

inline constexpr std::size_t default_hash_size = 2048;

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const void* p, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(std::string_view(static_cast<const char*>(p), n), h);
}

inline bool is_word_byte(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c >= 0x80;
}

// Lowercased maximal alphanumeric runs; bytes >= 0x80 count as word bytes so
// UTF-8 words stay intact. Punctuation and whitespace are dropped.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (is_word_byte(c)) {
      cur.push_back((c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline int hash_token(std::string_view word, std::size_t hash_size) {
  return static_cast<int>(fnv1a64(word) % hash_size);
}

inline std::vector<int> tokenize(std::string_view text, std::size_t hash_size = default_hash_size) {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(hash_token(w, hash_size));
  return ids;
}

inline std::string to_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return s;
}

}  // namespace perank
