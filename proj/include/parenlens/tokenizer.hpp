#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "parenlens/model.hpp"

namespace parenlens {

inline constexpr std::string_view kBosToken = "<s>";

/// Fixed token list; a token's id is its position. Immutable once built.
class Vocab {
 public:
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::string& token(TokenId id) const;
  /// -1 when absent.
  TokenId id_of(std::string_view token) const;
  bool contains(std::string_view token) const { return id_of(token) >= 0; }
  TokenId bos() const { return id_of(kBosToken); }
  std::size_t max_token_length() const noexcept { return max_len_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_len_ = 0;
};

/// The hand-built vocabulary for the print/constructor language: keywords,
/// punctuation, the closing runs `)`..`))))`, the `]))` merge, digits, the
/// given multi-digit literals, comment words, whitespace, BOS, and every
/// lowercase letter plus `#` as single-character fallbacks.
Vocab build_vocab(const std::vector<std::string>& multi_digit_literals = {"12", "123"});

/// Greedy longest match, left to right. Throws InvalidArgument naming the
/// first character no token covers.
std::vector<TokenId> tokenize(const Vocab& vocab, std::string_view text);

/// Throws InvalidArgument on an id outside the vocabulary.
std::string detokenize(const Vocab& vocab, const std::vector<TokenId>& ids);

/// True for `)`, `))`, `)))`, ... of any length.
bool is_closing_run(std::string_view token);

}  // namespace parenlens
