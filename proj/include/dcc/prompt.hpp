#pragma once

// Prompt tokenisation with concept placeholders and differentiable
// embedding-sequence construction.

#include <map>
#include <string>
#include <vector>

#include "dcc/backbone.hpp"

namespace dcc {

struct PlaceholderSlot {
  std::string name;  // e.g. "id*"
  std::size_t token_index = 0;
};

struct TokenizedPrompt {
  std::vector<TokenId> token_ids;  // BOS, words, EOS, EOS padding; context length
  std::vector<PlaceholderSlot> placeholders;
};

// Each distinct placeholder takes one reserved vocabulary token, so the
// surrounding words never need re-tokenising.
inline TokenizedPrompt tokenize_prompt(std::string_view prompt, const Tokenizer& tok) {
  TokenizedPrompt out;
  out.token_ids.push_back(Tokenizer::kBos);
  std::map<std::string, TokenId> reserved;
  for (const auto& piece : split_prompt(prompt)) {
    if (piece.placeholder) {
      auto it = reserved.find(piece.text);
      if (it == reserved.end()) {
        if (static_cast<int>(reserved.size()) >= Tokenizer::kReservedCount)
          throw TokenizeError("too many distinct placeholders in prompt");
        it = reserved.emplace(piece.text, Tokenizer::kFirstReserved + static_cast<TokenId>(reserved.size())).first;
      }
      out.placeholders.push_back({piece.text, out.token_ids.size()});
      out.token_ids.push_back(it->second);
    } else {
      out.token_ids.push_back(tok.lookup(piece.text).value_or(Tokenizer::kUnk));
    }
  }
  out.token_ids.push_back(Tokenizer::kEos);
  const std::size_t n = tok.context_length();
  if (out.token_ids.size() > n) {
    throw TokenizeError("prompt needs " + std::to_string(out.token_ids.size()) + " tokens (including BOS/EOS) but the context holds " +
                        std::to_string(n));
  }
  out.token_ids.resize(n, Tokenizer::kEos);
  return out;
}

// Embedding rows overridden at given token positions.
struct EmbeddingInjection {
  std::size_t token_index = 0;
  ad::Var embedding;  // 1 x word_dim
};

inline ad::Var embed_prompt(ad::Tape& tape, const Backbone& backbone, const std::vector<TokenId>& tokens,
                            const std::vector<EmbeddingInjection>& injections) {
  auto seq = tape.constant(backbone.embed_tokens(tokens));
  for (const auto& inj : injections) seq = ad::replace_row(seq, inj.token_index, inj.embedding);
  return seq;
}

// Text encoding with the given rows injected; constant (no gradient).
inline Matrix encode_with_injections(const Backbone& backbone, const std::vector<TokenId>& tokens,
                                     const std::vector<std::pair<std::size_t, std::vector<double>>>& rows) {
  ad::Tape tape;
  std::vector<EmbeddingInjection> inj;
  for (const auto& [idx, v] : rows) inj.push_back({idx, tape.constant(Matrix::row_vector(std::span<const double>(v)))});
  return backbone.encode_text(embed_prompt(tape, backbone, tokens, inj)).value();
}

}  // namespace dcc
