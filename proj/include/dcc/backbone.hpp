#pragma once

// Frozen-backbone interface: word embeddings, text encoder, VAE, noise
// predictor with editable cross-attention, and the sketch adapter.

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dcc/autodiff.hpp"
#include "dcc/diffusion.hpp"
#include "dcc/image.hpp"
#include "dcc/rome_edit.hpp"
#include "dcc/tokenizer.hpp"

namespace dcc {

struct CrossAttentionLayer {
  int index = 0;
  std::size_t dim = 0;  // Key/Value output width d_l
  std::string site;     // where the layer sits in the noise predictor
};

struct BackboneInfo {
  std::string family;
  std::size_t word_dim = 0;
  std::size_t text_dim = 0;
  std::size_t context_length = 0;
  int image_size = 0;
  int latent_size = 0;
  int latent_channels = 0;
  int feature_channels = 0;
  std::vector<CrossAttentionLayer> layers;

  std::string signature() const {
    std::string s = family + ";word=" + std::to_string(word_dim) + ";text=" + std::to_string(text_dim) +
                    ";ctx=" + std::to_string(context_length) + ";xattn=";
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (i != 0) s += ",";
      s += std::to_string(layers[i].dim);
    }
    return s;
  }

  std::string fingerprint() const { return sha256_hex(signature()).substr(0, 16); }
};

// Latent images are (latent_size^2 x latent_channels) matrices.
using Latent = Matrix;

// Sketch-adapter output: one (side^2 x C) map per decoder scale, finest first.
struct AdapterFeatures {
  std::vector<Matrix> scales;

  static constexpr std::size_t kScales = 4;

  bool is_zero() const {
    for (const auto& s : scales)
      for (double v : s.data)
        if (v != 0.0) return false;
    return true;
  }
};

// One concept's edit across all cross-attention layers.
struct ConceptEdit {
  std::size_t token_index = 0;
  const std::vector<double>* target_input = nullptr;
  std::vector<ad::Var> key_outputs;    // one per layer
  std::vector<ad::Var> value_outputs;  // one per layer
  double scale = 1.0;
};

struct EditSet {
  std::vector<ConceptEdit> concepts;
  // Called once per cross-attention layer per noise-predictor call.
  std::function<void(int layer)> on_layer;

  std::vector<rome::EditSlotVar> slots(int layer, rome::Pathway p) const {
    std::vector<rome::EditSlotVar> out;
    for (const auto& c : concepts) {
      const auto& outs = p == rome::Pathway::key ? c.key_outputs : c.value_outputs;
      out.push_back({c.token_index, c.target_input, outs.at(static_cast<std::size_t>(layer)), c.scale});
    }
    return out;
  }
};

class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual const BackboneInfo& info() const = 0;
  virtual const Tokenizer& tokenizer() const = 0;
  virtual const diffusion::NoiseSchedule& schedule() const = 0;

  virtual std::vector<double> word_embedding(TokenId id) const = 0;
  // Text encoder applied to an (N x word_dim) embedding sequence.
  virtual ad::Var encode_text(const ad::Var& embeddings) const = 0;

  virtual Latent vae_encode(const Image& image) const = 0;
  virtual Image vae_decode(const Latent& latent) const = 0;

  // Noise prediction; the result has the shape of z_t.
  virtual ad::Var unet_predict(const ad::Var& z_t, int t, const ad::Var& text_encoding, const EditSet* edits,
                               const AdapterFeatures* adapter) const = 0;

  virtual AdapterFeatures adapter_features(const Image& sketch) const = 0;

  // Digest of every frozen weight; must never change.
  virtual std::string weights_digest() const = 0;
  virtual std::size_t trainable_parameter_count() const { return 0; }

  Matrix embed_tokens(const std::vector<TokenId>& tokens) const {
    Matrix out(tokens.size(), info().word_dim);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto e = word_embedding(tokens[i]);
      std::copy(e.begin(), e.end(), out.row(i).begin());
    }
    return out;
  }

  void check_sketch(const Image& sketch) const {
    const int s = info().image_size;
    if (sketch.width != s || sketch.height != s) {
      throw ResolutionMismatch("sketch is " + sketch.size_str() + " but the backbone expects " + std::to_string(s) +
                               "x" + std::to_string(s));
    }
  }
};

// Attention weights for one cross-attention layer.
struct CrossAttention {
  const Matrix* norm_gain = nullptr;
  const Matrix* norm_bias = nullptr;
  const Matrix* w_q = nullptr;  // C x d
  const Matrix* w_k = nullptr;  // d_text x d
  const Matrix* w_v = nullptr;  // d_text x d
  const Matrix* w_o = nullptr;  // d x C
  std::size_t heads = 1;
  int layer_index = 0;

  std::size_t dim() const { return w_k->cols; }

  struct Projections {
    ad::Var q, k, v;
  };

  // Q from features, K/V from the text encoding, then the rank-1 edits on the
  // Key and Value rows.
  Projections project(const ad::Var& features, const ad::Var& text_encoding, const EditSet* edits) const {
    if (text_encoding.cols() != w_k->rows) {
      throw std::invalid_argument("cross_attention: text encoding width " + std::to_string(text_encoding.cols()) +
                                  " does not match layer input " + std::to_string(w_k->rows));
    }
    if (features.cols() != w_q->rows) {
      throw std::invalid_argument("cross_attention: feature width " + std::to_string(features.cols()) +
                                  " does not match layer input " + std::to_string(w_q->rows));
    }
    Projections p{ad::linear(features, *w_q), ad::linear(text_encoding, *w_k), ad::linear(text_encoding, *w_v)};
    if (edits != nullptr) {
      if (edits->on_layer) edits->on_layer(layer_index);
      if (!edits->concepts.empty()) {
        const auto ks = edits->slots(layer_index, rome::Pathway::key);
        const auto vs = edits->slots(layer_index, rome::Pathway::value);
        p.k = rome::edit(p.k, text_encoding, ks, rome::Pathway::key, layer_index);
        p.v = rome::edit(p.v, text_encoding, vs, rome::Pathway::value, layer_index);
      }
    }
    return p;
  }

  // Per-head attention probabilities softmax(Q K^T / sqrt(d_head)).
  std::vector<ad::Var> attention_maps(const Projections& p) const {
    const std::size_t d = dim();
    if (d % heads != 0) throw std::invalid_argument("cross_attention: width not divisible by head count");
    const std::size_t dh = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Var> maps;
    for (std::size_t h = 0; h < heads; ++h) {
      auto qh = ad::slice_cols(p.q, h * dh, (h + 1) * dh);
      auto kh = ad::slice_cols(p.k, h * dh, (h + 1) * dh);
      maps.push_back(ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv)));
    }
    return maps;
  }

  // softmax(QK^T/sqrt(d)) V, before the output projection.
  ad::Var attend(const ad::Var& features, const ad::Var& text_encoding, const EditSet* edits) const {
    const auto p = project(features, text_encoding, edits);
    const auto maps = attention_maps(p);
    const std::size_t dh = dim() / heads;
    std::vector<ad::Var> outs;
    for (std::size_t h = 0; h < heads; ++h)
      outs.push_back(ad::matmul(maps[h], ad::slice_cols(p.v, h * dh, (h + 1) * dh)));
    return heads == 1 ? outs.front() : ad::concat_cols(outs);
  }

  // Residual block form used inside the noise predictor.
  ad::Var forward(const ad::Var& h, const ad::Var& text_encoding, const EditSet* edits) const {
    auto x = ad::layer_norm(h, norm_gain, norm_bias);
    return ad::add(h, ad::linear(attend(x, text_encoding, edits), *w_o));
  }
};

}  // namespace dcc
