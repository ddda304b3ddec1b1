#include "parenlens/tokenizer.hpp"

#include <algorithm>

namespace parenlens {

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw InvalidArgument("vocab: empty token at id " + std::to_string(i));
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) throw InvalidArgument("vocab: duplicate token '" + tokens_[i] + "'");
    max_len_ = std::max(max_len_, tokens_[i].size());
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InvalidArgument("token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocab::id_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? -1 : it->second;
}

Vocab build_vocab(const std::vector<std::string>& multi_digit_literals) {
  std::vector<std::string> t = {
      std::string(kBosToken), "\n", " ",
      "print", "str", "list", "set", "tuple",
      "(", "[", "]", ",",
      ")", "))", ")))", "))))",
      // BPE-style merge; without it `[2]))))` would end in a single `))))`.
      "]))",
  };
  for (char c = '0'; c <= '9'; ++c) t.emplace_back(1, c);
  for (const auto& lit : multi_digit_literals) {
    if (lit.size() > 1 && std::find(t.begin(), t.end(), lit) == t.end()) t.push_back(lit);
  }
  for (const char* w : {"#print", "a", "string", "containing"}) t.emplace_back(w);
  t.emplace_back("#");
  for (char c = 'a'; c <= 'z'; ++c) {
    if (std::find(t.begin(), t.end(), std::string(1, c)) == t.end()) t.emplace_back(1, c);
  }
  return Vocab(std::move(t));
}

std::vector<TokenId> tokenize(const Vocab& vocab, std::string_view text) {
  std::vector<TokenId> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    TokenId found = -1;
    std::size_t len = std::min(vocab.max_token_length(), text.size() - pos);
    for (; len > 0; --len) {
      found = vocab.id_of(text.substr(pos, len));
      if (found >= 0) break;
    }
    if (found < 0) {
      throw InvalidArgument("tokenize: no token covers character '" + std::string(1, text[pos]) +
                            "' at offset " + std::to_string(pos));
    }
    out.push_back(found);
    pos += len;
  }
  return out;
}

std::string detokenize(const Vocab& vocab, const std::vector<TokenId>& ids) {
  std::string out;
  for (auto id : ids) out += vocab.token(id);
  return out;
}

bool is_closing_run(std::string_view token) {
  return !token.empty() && std::all_of(token.begin(), token.end(), [](char c) { return c == ')'; });
}

}  // namespace parenlens
