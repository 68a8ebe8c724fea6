#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lensdyn/core/errors.hpp"
#include "lensdyn/core/tensor.hpp"

namespace lensdyn {

/// Dense word-level vocabulary. Ids 0..2 are reserved for UNK, BOS and EOS.
class Vocab {
 public:
  static constexpr TokenId kUnk = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr std::string_view kUnkToken = "<unk>";
  static constexpr std::string_view kBosToken = "<bos>";
  static constexpr std::string_view kEosToken = "<eos>";

  Vocab() { reset({}); }

  /// Builds a vocabulary from arbitrary words: specials first, then the
  /// distinct words in lexicographic order.
  static Vocab from_words(std::vector<std::string> words) {
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    std::erase_if(words, [](const std::string& w) {
      return w.empty() || w == kUnkToken || w == kBosToken || w == kEosToken;
    });
    Vocab v;
    v.reset(std::move(words));
    return v;
  }

  /// Rebuilds from an explicit id-ordered list (as stored on disk).
  static Vocab from_ordered(std::vector<std::string> tokens) {
    if (tokens.size() < 3 || tokens[0] != kUnkToken || tokens[1] != kBosToken || tokens[2] != kEosToken)
      throw FormatError("vocab: the first three entries must be <unk>, <bos>, <eos>");
    Vocab v;
    v.tokens_ = std::move(tokens);
    v.index_.clear();
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
      if (!v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i)).second)
        throw FormatError("vocab: duplicate token '" + v.tokens_[i] + "'");
    }
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  bool contains(std::string_view word) const { return index_.contains(std::string(word)); }

  TokenId id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || id >= size()) throw VocabError("token id " + std::to_string(id) + " outside vocabulary");
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write vocab file " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read vocab file " + path.string());
    std::vector<std::string> tokens;
    for (std::string line; std::getline(in, line);) tokens.push_back(line);
    return from_ordered(std::move(tokens));
  }

 private:
  void reset(std::vector<std::string> words) {
    tokens_ = {std::string(kUnkToken), std::string(kBosToken), std::string(kEosToken)};
    tokens_.insert(tokens_.end(), words.begin(), words.end());
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

namespace detail {

inline bool is_trailing_punct(char c) {
  return c == ',' || c == '?' || c == '.' || c == '!' || c == ';' || c == ':' || c == ')';
}

inline constexpr std::string_view kClitics[] = {"'s", "n't"};

inline bool attaches_left(std::string_view tok) {
  if (tok.size() == 1 && is_trailing_punct(tok[0])) return true;
  for (auto c : kClitics)
    if (tok == c) return true;
  return false;
}

}  // namespace detail

/// Lower-cases and splits text into words. Whitespace separates words;
/// leading '(' and trailing punctuation become their own tokens, as do the
/// clitics "'s" and "n't".
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    std::string chunk(text.substr(i, j - i));
    for (auto& c : chunk) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    i = j;

    std::size_t lead = 0;
    while (lead < chunk.size() && chunk[lead] == '(') {
      out.emplace_back("(");
      ++lead;
    }
    std::string_view core(chunk);
    core.remove_prefix(lead);
    std::vector<std::string> tail;
    bool peeled = true;
    while (peeled && !core.empty()) {
      peeled = false;
      if (detail::is_trailing_punct(core.back())) {
        tail.emplace_back(1, core.back());
        core.remove_suffix(1);
        peeled = true;
        continue;
      }
      for (auto clitic : detail::kClitics) {
        if (core.size() >= clitic.size() && core.ends_with(clitic)) {
          tail.emplace_back(clitic);
          core.remove_suffix(clitic.size());
          peeled = true;
          break;
        }
      }
    }
    if (!core.empty()) out.emplace_back(core);
    out.insert(out.end(), tail.rbegin(), tail.rend());
  }
  return out;
}

inline std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

/// Inverse of tokenize for in-vocabulary text: punctuation and clitics attach
/// to the previous word, '(' to the next.
inline std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  bool glue_next = false;
  for (TokenId id : ids) {
    const std::string& tok = vocab.token(id);
    if (!out.empty() && !glue_next && !detail::attaches_left(tok)) out.push_back(' ');
    out += tok;
    glue_next = (tok == "(");
  }
  return out;
}

/// BOS followed by the tokenized prompt.
inline std::vector<TokenId> encode_prompt(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids{Vocab::kBos};
  auto body = tokenize(text, vocab);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

}  // namespace lensdyn
