#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dcc/concept.hpp"

namespace dcc {

struct ConceptSlot {
  std::string placeholder;
  const Concept* bound = nullptr;
  std::size_t token_index = 0;  // c_i
};

struct PromptEncoding {
  std::vector<TokenId> token_ids;
  std::vector<ConceptSlot> concept_slots;
  Matrix text_encoding;                            // t_p, v* injected at each c_i
  std::optional<Matrix> superclass_encoding;       // t_p^sc, filled on demand
};

using ConceptBindings = std::map<std::string, const Concept*>;

// Placeholders are written "[id*]" in the template and bound by name ("id*").
inline PromptEncoding encode_prompt(std::string_view templ, const ConceptBindings& concepts, const Backbone& backbone) {
  const auto tp = tokenize_prompt(templ, backbone.tokenizer());
  PromptEncoding pe;
  pe.token_ids = tp.token_ids;
  std::vector<std::pair<std::size_t, std::vector<double>>> rows;
  for (const auto& ph : tp.placeholders) {
    auto it = concepts.find(ph.name);
    if (it == concepts.end() || it->second == nullptr)
      throw std::invalid_argument("placeholder [" + ph.name + "] has no bound concept");
    if (it->second->v_star.size() != backbone.info().word_dim)
      throw IncompatibleBackbone("concept for [" + ph.name + "] has a " + std::to_string(it->second->v_star.size()) +
                                 "-dim embedding; backbone word embeddings are " +
                                 std::to_string(backbone.info().word_dim) + "-dim");
    pe.concept_slots.push_back({ph.name, it->second, ph.token_index});
    rows.emplace_back(ph.token_index, to_double(it->second->v_star));
  }
  pe.text_encoding = encode_with_injections(backbone, pe.token_ids, rows);
  return pe;
}

// Same tokens, with each concept's superclass embedding at its c_i.
inline Matrix encode_superclass_reference(const PromptEncoding& pe, const Backbone& backbone) {
  if (pe.concept_slots.empty()) throw std::invalid_argument("superclass reference needs at least one concept slot");
  std::vector<std::pair<std::size_t, std::vector<double>>> rows;
  for (const auto& s : pe.concept_slots) {
    const TokenId sc = backbone.tokenizer().superclass_token(s.bound->superclass_word);
    rows.emplace_back(s.token_index, backbone.word_embedding(sc));
  }
  return encode_with_injections(backbone, pe.token_ids, rows);
}

inline const Matrix& superclass_encoding(PromptEncoding& pe, const Backbone& backbone) {
  if (!pe.superclass_encoding) pe.superclass_encoding = encode_superclass_reference(pe, backbone);
  return *pe.superclass_encoding;
}

// Frozen per-concept tensors for building inference-time edits.
struct ConceptTensors {
  std::vector<double> target_input;
  std::vector<Matrix> key_outputs;
  std::vector<Matrix> value_outputs;

  explicit ConceptTensors(const Concept& c) : target_input(to_double(c.i_star)) {
    for (const auto& o : c.outputs) {
      key_outputs.push_back(Matrix::row_vector(std::span<const float>(o.key)));
      value_outputs.push_back(Matrix::row_vector(std::span<const float>(o.value)));
    }
  }
};

// Per-slot scales keyed by placeholder name; missing entries use the
// concept's default scale.
using ScaleMap = std::map<std::string, double>;

// Inference-time edit set (no gradients) for every slot of a prompt. The
// returned tensors must outlive the tape and the EditSet.
struct InferenceEdits {
  std::vector<ConceptTensors> tensors;
  EditSet set;
};

inline std::unique_ptr<InferenceEdits> make_inference_edits(ad::Tape& tape, const PromptEncoding& pe, const ScaleMap& scales) {
  auto out = std::make_unique<InferenceEdits>();
  out->tensors.reserve(pe.concept_slots.size());
  for (const auto& s : pe.concept_slots) out->tensors.emplace_back(*s.bound);
  for (std::size_t i = 0; i < pe.concept_slots.size(); ++i) {
    const auto& s = pe.concept_slots[i];
    const auto& t = out->tensors[i];
    ConceptEdit e;
    e.token_index = s.token_index;
    e.target_input = &t.target_input;
    auto it = scales.find(s.placeholder);
    e.scale = it != scales.end() ? it->second : static_cast<double>(s.bound->default_scale);
    for (std::size_t l = 0; l < t.key_outputs.size(); ++l) {
      e.key_outputs.push_back(tape.constant(t.key_outputs[l]));
      e.value_outputs.push_back(tape.constant(t.value_outputs[l]));
    }
    out->set.concepts.push_back(std::move(e));
  }
  return out;
}

}  // namespace dcc
