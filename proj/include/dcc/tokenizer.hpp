#pragma once

#include <cctype>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dcc/util.hpp"

namespace dcc {

using TokenId = int;

// A prompt piece: either an ordinary word or a concept placeholder such as
// "[id*]" (stored without brackets, e.g. "id*").
struct PromptPiece {
  std::string text;
  bool placeholder = false;
};

// Splits a prompt into lower-cased words and "[name*]" placeholders.
// Punctuation other than the placeholder brackets is dropped.
inline std::vector<PromptPiece> split_prompt(std::string_view prompt) {
  std::vector<PromptPiece> out;
  std::size_t i = 0;
  while (i < prompt.size()) {
    const char c = prompt[i];
    if (c == '[') {
      const auto close = prompt.find(']', i);
      if (close == std::string_view::npos) throw TokenizeError("unterminated placeholder in prompt");
      std::string name(prompt.substr(i + 1, close - i - 1));
      if (name.empty() || name.back() != '*') {
        throw TokenizeError("placeholder '[" + name + "]' must end with '*', e.g. [id*]");
      }
      out.push_back({name, true});
      i = close + 1;
    } else if (std::isalnum(static_cast<unsigned char>(c))) {
      std::string word;
      while (i < prompt.size() && std::isalnum(static_cast<unsigned char>(prompt[i]))) {
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(prompt[i]))));
        ++i;
      }
      out.push_back({word, false});
    } else {
      ++i;
    }
  }
  return out;
}

// Word-level vocabulary with a pool of reserved placeholder tokens.
class Tokenizer {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kUnk = 2;
  static constexpr TokenId kFirstReserved = 3;
  static constexpr int kReservedCount = 8;

  Tokenizer(std::vector<std::string> words, std::size_t context_length)
      : context_length_(context_length) {
    id_to_word_ = {"<bos>", "<eos>", "<unk>"};
    for (int i = 0; i < kReservedCount; ++i) id_to_word_.push_back("<concept" + std::to_string(i) + ">");
    for (auto& w : words) {
      if (word_to_id_.count(w) != 0) continue;
      word_to_id_[w] = static_cast<TokenId>(id_to_word_.size());
      id_to_word_.push_back(std::move(w));
    }
  }

  std::size_t vocab_size() const { return id_to_word_.size(); }
  std::size_t context_length() const { return context_length_; }

  std::optional<TokenId> lookup(std::string_view word) const {
    auto it = word_to_id_.find(std::string(word));
    if (it == word_to_id_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& word(TokenId id) const { return id_to_word_.at(static_cast<std::size_t>(id)); }

  // Tokens of a plain word sequence without BOS/EOS. Unknown words map to <unk>.
  std::vector<TokenId> encode_words(std::string_view text) const {
    std::vector<TokenId> out;
    for (const auto& p : split_prompt(text)) {
      if (p.placeholder) throw TokenizeError("unexpected placeholder [" + p.text + "]");
      out.push_back(lookup(p.text).value_or(kUnk));
    }
    return out;
  }

  // The single token a superclass word maps to.
  TokenId superclass_token(std::string_view word) const {
    const auto pieces = split_prompt(word);
    if (pieces.size() != 1 || pieces.front().placeholder) {
      throw TokenizeError("superclass '" + std::string(word) + "' must tokenise to exactly one token, got " +
                          std::to_string(pieces.size()));
    }
    auto id = lookup(pieces.front().text);
    if (!id) throw TokenizeError("superclass '" + std::string(word) + "' is not in the vocabulary");
    return *id;
  }

 private:
  std::size_t context_length_;
  std::vector<std::string> id_to_word_;
  std::unordered_map<std::string, TokenId> word_to_id_;
};

inline std::vector<std::string> default_toy_vocabulary() {
  return {"a",        "an",        "the",     "of",       "in",       "on",       "at",        "with",
          "and",      "by",        "for",     "to",       "is",       "photo",    "picture",   "image",
          "portrait", "caricature", "style",  "illustration", "comics", "cartoon", "anime",  "painting",
          "drawing",  "sketch",    "watercolor", "oil",   "pencil",   "ink",      "art",       "artwork",
          "man",      "woman",     "person",  "boy",      "girl",     "child",    "face",      "head",
          "old",      "young",     "smiling", "happy",    "serious",  "big",      "small",     "nose",
          "eyes",     "mouth",     "hair",    "beard",    "glasses",  "hat",      "background", "white",
          "black",    "red",       "blue",    "green",    "colorful", "dark",     "bright",    "funny",
          "exaggerated", "realistic", "cat",  "dog"};
}

}  // namespace dcc
