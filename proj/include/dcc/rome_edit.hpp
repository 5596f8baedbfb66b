#pragma once

// Explicit rank-1 editing of cross-attention Key/Value pathway outputs.
//
// For a pathway output h = W t_p (one row per token) and a concept bound at
// token c, the edit touches row c only:
//
//   h'[c] = h[c] + s * cos(t_p[c], i*) * o*
//
// Several independently trained concepts combine additively, each at its own
// token. Every other row of h is copied through untouched, bit for bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcc/autodiff.hpp"
#include "dcc/tensor.hpp"

namespace dcc::rome {

enum class Pathway { key, value };

inline const char* to_string(Pathway p) { return p == Pathway::key ? "key" : "value"; }

// Cosine similarity clamped to [-1, 1]. Throws on a zero-norm input.
// Accepts any pair of indexable sequences (vectors, spans).
template <class A, class B>
double cosine_similarity(const A& a, const B& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("cosine_similarity: length mismatch " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
  double ab = 0.0;
  double aa = 0.0;
  double bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]);
    const double y = static_cast<double>(b[i]);
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  if (aa == 0.0 || bb == 0.0) throw std::domain_error("cosine_similarity: zero-norm input");
  return cosine_from_sums(ab, aa, bb);
}


struct EditSlot {
  std::size_t token_index = 0;
  std::vector<double> target_input;   // i*
  std::vector<double> target_output;  // o*, length d_l
  double scale = 1.0;                 // s
};

struct EditContext {
  Pathway pathway = Pathway::key;
  int layer_index = 0;
  Matrix h;                     // N x d_l pathway output
  const Matrix* text_encoding;  // N x d_text, read at each slot's token
  std::vector<EditSlot> slots;
};

inline void validate(const EditContext& ctx) {
  if (ctx.text_encoding == nullptr) throw std::invalid_argument("edit: missing text encoding");
  if (ctx.text_encoding->rows != ctx.h.rows) {
    throw std::invalid_argument("edit: text encoding has " + std::to_string(ctx.text_encoding->rows) +
                                " tokens but pathway output has " + std::to_string(ctx.h.rows));
  }
  for (const auto& s : ctx.slots) {
    if (s.token_index >= ctx.h.rows) {
      throw std::out_of_range("edit: concept index " + std::to_string(s.token_index) +
                              " outside context of " + std::to_string(ctx.h.rows));
    }
    if (s.target_output.size() != ctx.h.cols) {
      throw std::invalid_argument("edit: layer " + std::to_string(ctx.layer_index) + " " +
                                  to_string(ctx.pathway) + " pathway expects o* of length " +
                                  std::to_string(ctx.h.cols) + ", got " +
                                  std::to_string(s.target_output.size()));
    }
    if (s.target_input.size() != ctx.text_encoding->cols) {
      throw std::invalid_argument("edit: i* length " + std::to_string(s.target_input.size()) +
                                  " does not match text encoding width " +
                                  std::to_string(ctx.text_encoding->cols));
    }
  }
}

// s * cos(t_p[c], i*); the coefficient multiplying o*.
inline double edit_gain(const EditSlot& slot, const Matrix& text_encoding) {
  if (slot.scale == 0.0) return 0.0;
  return slot.scale * cosine_similarity(text_encoding.row(slot.token_index),
                                        std::span<const double>(slot.target_input));
}

// Edits rows in place. Slots sharing a token are summed before being added
// to h so that one addition touches each edited element.
inline void mix_concepts_inplace(Matrix& h, const Matrix& text_encoding, std::span<const EditSlot> slots) {
  std::vector<std::size_t> order(slots.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return slots[a].token_index < slots[b].token_index;
  });
  std::vector<double> delta(h.cols);
  std::size_t k = 0;
  while (k < order.size()) {
    const std::size_t token = slots[order[k]].token_index;
    std::fill(delta.begin(), delta.end(), 0.0);
    bool touched = false;
    for (; k < order.size() && slots[order[k]].token_index == token; ++k) {
      const EditSlot& s = slots[order[k]];
      const double gain = edit_gain(s, text_encoding);
      if (gain == 0.0) continue;
      for (std::size_t j = 0; j < h.cols; ++j) delta[j] += gain * s.target_output[j];
      touched = true;
    }
    touched = touched && std::any_of(delta.begin(), delta.end(), [](double v) { return v != 0.0; });
    if (!touched) continue;
    auto r = h.row(token);
    for (std::size_t j = 0; j < h.cols; ++j) r[j] += delta[j];
  }
}

// Single-concept edit.
inline Matrix apply_edit(const EditContext& ctx) {
  validate(ctx);
  if (ctx.slots.size() != 1) {
    throw std::invalid_argument("apply_edit: expects exactly one slot, got " + std::to_string(ctx.slots.size()));
  }
  Matrix out = ctx.h;
  mix_concepts_inplace(out, *ctx.text_encoding, ctx.slots);
  return out;
}

// Multi-concept edit: each token gets the sum of its slots' deltas.
inline Matrix mix_concepts(const EditContext& ctx) {
  validate(ctx);
  Matrix out = ctx.h;
  mix_concepts_inplace(out, *ctx.text_encoding, ctx.slots);
  return out;
}

// i* <- beta * i* + (1 - beta) * t_p[c]
inline std::vector<double> update_target_input(std::span<const double> target_input,
                                               std::span<const double> encoded_token, double beta = 0.98) {
  if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("update_target_input: beta must lie in (0, 1)");
  if (target_input.size() != encoded_token.size())
    throw std::invalid_argument("update_target_input: length mismatch");
  std::vector<double> out(target_input.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = beta * target_input[i] + (1.0 - beta) * encoded_token[i];
  return out;
}

// Differentiable form used inside the backbones. o* may be a trainable leaf;
// i* is held constant within a step.
struct EditSlotVar {
  std::size_t token_index = 0;
  const std::vector<double>* target_input = nullptr;
  ad::Var target_output;
  double scale = 1.0;
};

inline ad::Var edit(const ad::Var& h, const ad::Var& text_encoding, std::span<const EditSlotVar> slots,
                    Pathway pathway = Pathway::key, int layer_index = 0) {
  EditContext ctx;
  ctx.pathway = pathway;
  ctx.layer_index = layer_index;
  ctx.h = h.value();
  ctx.text_encoding = &text_encoding.value();
  ctx.slots.reserve(slots.size());
  bool grad = h.requires_grad() || text_encoding.requires_grad();
  for (const auto& s : slots) {
    ctx.slots.push_back({s.token_index, *s.target_input, s.target_output.value().data, s.scale});
    grad = grad || s.target_output.requires_grad();
  }
  Matrix out = mix_concepts(ctx);

  struct SlotState {
    std::size_t token;
    ad::Node* out_node;
    std::vector<double> target_input;
    double scale;
  };
  std::vector<SlotState> state;
  state.reserve(slots.size());
  for (const auto& s : slots) state.push_back({s.token_index, s.target_output.node(), *s.target_input, s.scale});
  ad::Node* nh = h.node();
  ad::Node* nt = text_encoding.node();

  return h.tape().record(std::move(out), grad, [nh, nt, state = std::move(state)](const Matrix& g) {
    ad::accumulate(nh, g);
    Matrix dt;
    if (nt->requires_grad) dt = Matrix(nt->value.rows, nt->value.cols);
    for (const auto& s : state) {
      if (s.scale == 0.0) continue;
      auto grow = g.row(s.token);
      auto a = nt->value.row(s.token);
      const double phi = cosine_similarity(a, std::span<const double>(s.target_input));
      if (s.out_node->requires_grad) {
        Matrix d(1, grow.size());
        for (std::size_t j = 0; j < grow.size(); ++j) d.data[j] = s.scale * phi * grow[j];
        ad::accumulate(s.out_node, d);
      }
      if (nt->requires_grad) {
        const double dphi = s.scale * dot(s.out_node->value.data, grow);
        const double na = l2_norm(a);
        const double nb = l2_norm(s.target_input);
        auto drow = dt.row(s.token);
        for (std::size_t j = 0; j < a.size(); ++j)
          drow[j] += dphi * (s.target_input[j] / (na * nb) - phi * a[j] / (na * na));
      }
    }
    if (nt->requires_grad) ad::accumulate(nt, dt);
  });
}

}  // namespace dcc::rome
