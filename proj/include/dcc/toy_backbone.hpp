#pragma once

// Desk-scale stand-in for a pretrained latent diffusion stack. Every weight is
// drawn once from a seeded generator and never changes afterwards.
//
//   text encoder   word embeddings + positions, causal pre-norm transformer
//   VAE            linear 4x4 patch projection to a 4-channel latent
//   noise model    4-level U-Net (r, r/2, r/4, r/8) over per-pixel features
//                  with cross-attention blocks at the two finest levels
//   sketch adapter bias-free pixel-unshuffle stem + four residual stages
//
// The noise model predicts a mean latent mu from the conditioning and returns
// the posterior noise estimate of a Gaussian prior centred on mu:
//
//   eps = sqrt(1 - abar) (z_t - sqrt(abar) mu) / (abar sigma^2 + 1 - abar)

#include <map>
#include <string>
#include <vector>

#include "dcc/backbone.hpp"

namespace dcc {

struct ToyBackboneSpec {
  std::size_t word_dim = 64;
  std::vector<std::size_t> layer_dims = {64, 64, 64, 64};
  std::size_t heads = 4;
  std::size_t channels = 64;
  std::size_t context_length = 16;
  std::size_t text_layers = 2;
  int image_size = 32;
  int latent_channels = 4;
  double sigma_data = 0.5;
  int diffusion_steps = 100;
  std::uint64_t seed = 0;
};

class ToyBackbone final : public Backbone {
 public:
  static constexpr int kVaeFactor = 4;
  static constexpr int kLevels = 4;

  using WeightMap = std::map<std::string, Matrix>;

  explicit ToyBackbone(ToyBackboneSpec spec = {}) : spec_(std::move(spec)), tokenizer_(default_toy_vocabulary(), spec_.context_length) {
    validate_spec();
    build_info();
    init_weights();
    finalize();
  }

  // Rebuilds a toy backbone from previously exported weights.
  ToyBackbone(ToyBackboneSpec spec, WeightMap weights)
      : spec_(std::move(spec)), tokenizer_(default_toy_vocabulary(), spec_.context_length), w_(std::move(weights)) {
    validate_spec();
    build_info();
    check_weights();
    finalize();
  }

  ToyBackbone(const ToyBackbone&) = delete;
  ToyBackbone& operator=(const ToyBackbone&) = delete;

  const BackboneInfo& info() const override { return info_; }
  const Tokenizer& tokenizer() const override { return tokenizer_; }
  const diffusion::NoiseSchedule& schedule() const override { return schedule_; }
  const ToyBackboneSpec& spec() const { return spec_; }
  const WeightMap& weights() const { return w_; }

  std::vector<double> word_embedding(TokenId id) const override {
    const auto& table = w("text.token_embedding");
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows) throw std::out_of_range("token id out of range");
    auto r = table.row(static_cast<std::size_t>(id));
    return {r.begin(), r.end()};
  }

  ad::Var encode_text(const ad::Var& embeddings) const override {
    if (embeddings.rows() != spec_.context_length || embeddings.cols() != spec_.word_dim) {
      throw std::invalid_argument("encode_text: expected " + std::to_string(spec_.context_length) + "x" +
                                  std::to_string(spec_.word_dim) + " embeddings, got " + shape_str(embeddings.value()));
    }
    auto x = ad::affine(embeddings, 1.0, &w("text.position_embedding"));
    const std::size_t d = spec_.word_dim;
    const std::size_t heads = text_heads();
    const std::size_t dh = d / heads;
    for (std::size_t l = 0; l < spec_.text_layers; ++l) {
      const std::string p = "text." + std::to_string(l) + ".";
      auto n1 = ad::layer_norm(x, &w(p + "ln1.g"), &w(p + "ln1.b"));
      auto q = ad::linear(n1, w(p + "q"));
      auto k = ad::linear(n1, w(p + "k"));
      auto v = ad::linear(n1, w(p + "v"));
      std::vector<ad::Var> outs;
      for (std::size_t h = 0; h < heads; ++h) {
        auto qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
        auto kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
        auto vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
        auto a = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh))), true);
        outs.push_back(ad::matmul(a, vh));
      }
      x = ad::add(x, ad::linear(ad::concat_cols(outs), w(p + "o")));
      auto n2 = ad::layer_norm(x, &w(p + "ln2.g"), &w(p + "ln2.b"));
      auto hidden = ad::silu(ad::linear(n2, w(p + "fc1"), &w(p + "fc1.b")));
      x = ad::add(x, ad::linear(hidden, w(p + "fc2"), &w(p + "fc2.b")));
    }
    return ad::layer_norm(x, &w("text.final_ln.g"), &w("text.final_ln.b"));
  }

  Latent vae_encode(const Image& image) const override {
    check_image(image, 3, "vae_encode");
    const int r = info_.latent_size;
    Matrix patches(static_cast<std::size_t>(r * r), kVaeFactor * kVaeFactor * 3);
    for (int y = 0; y < r; ++y)
      for (int x = 0; x < r; ++x) {
        auto row = patches.row(static_cast<std::size_t>(y * r + x));
        std::size_t k = 0;
        for (int c = 0; c < 3; ++c)
          for (int dy = 0; dy < kVaeFactor; ++dy)
            for (int dx = 0; dx < kVaeFactor; ++dx)
              row[k++] = 2.0 * image.at(x * kVaeFactor + dx, y * kVaeFactor + dy, c) - 1.0;
      }
    return dcc::matmul(patches, w("vae.enc"));
  }

  Image vae_decode(const Latent& latent) const override {
    const int r = info_.latent_size;
    if (latent.rows != static_cast<std::size_t>(r * r) || latent.cols != static_cast<std::size_t>(spec_.latent_channels))
      throw std::invalid_argument("vae_decode: latent shape " + shape_str(latent));
    const Matrix patches = dcc::matmul(latent, w("vae.dec"));
    Image img(spec_.image_size, spec_.image_size, 3);
    for (int y = 0; y < r; ++y)
      for (int x = 0; x < r; ++x) {
        auto row = patches.row(static_cast<std::size_t>(y * r + x));
        std::size_t k = 0;
        for (int c = 0; c < 3; ++c)
          for (int dy = 0; dy < kVaeFactor; ++dy)
            for (int dx = 0; dx < kVaeFactor; ++dx) {
              const double v = std::clamp(0.5 * (row[k++] + 1.0), 0.0, 1.0);
              img.at(x * kVaeFactor + dx, y * kVaeFactor + dy, c) = static_cast<float>(v);
            }
      }
    return img;
  }

  ad::Var unet_predict(const ad::Var& z_t, int t, const ad::Var& text_encoding, const EditSet* edits,
                       const AdapterFeatures* adapter) const override {
    const std::size_t r = static_cast<std::size_t>(info_.latent_size);
    if (z_t.rows() != r * r || z_t.cols() != static_cast<std::size_t>(spec_.latent_channels))
      throw std::invalid_argument("unet_predict: z_t shape " + shape_str(z_t.value()));
    if (adapter != nullptr && adapter->scales.size() != AdapterFeatures::kScales)
      throw std::invalid_argument("unet_predict: adapter must supply four scales");
    ad::Tape& tape = z_t.tape();
    const double abar = schedule_.at(t);

    auto temb = ad::linear(ad::silu(ad::linear(tape.constant(timestep_embedding(t)), w("unet.time.fc1"), &w("unet.time.fc1.b"))),
                           w("unet.time.fc2"), &w("unet.time.fc2.b"));
    auto h = ad::linear(z_t, w("unet.in"), &w("unet.in.b"));
    h = ad::affine(h, 1.0, &w("unet.pos"));
    h = ad::add_row(h, temb);

    std::vector<ad::Var> skips;
    for (int k = 0; k < kLevels; ++k) {
      const std::string site = "enc" + std::to_string(k);
      h = res_block("unet." + site, h);
      h = attention_at(site, h, text_encoding, edits);
      skips.push_back(h);
      if (k + 1 < kLevels) h = ad::avg_pool2(h);
    }
    h = res_block("unet.mid", h);
    for (int k = kLevels - 1; k >= 0; --k) {
      const std::string site = "dec" + std::to_string(k);
      if (k + 1 < kLevels) h = ad::upsample2(h);
      h = ad::add(h, skips[static_cast<std::size_t>(k)]);
      if (adapter != nullptr) h = ad::affine(h, 1.0, &adapter->scales[static_cast<std::size_t>(k)]);
      h = res_block("unet." + site, h);
      h = attention_at(site, h, text_encoding, edits);
    }
    auto mu = ad::linear(ad::layer_norm(h, &w("unet.out_ln.g"), &w("unet.out_ln.b")), w("unet.out"), &w("unet.out.b"));

    const double s2 = spec_.sigma_data * spec_.sigma_data;
    const double c_skip = std::sqrt(1.0 - abar) / (abar * s2 + 1.0 - abar);
    const double c_mu = c_skip * std::sqrt(abar);
    Matrix zs = z_t.value();
    for (auto& v : zs.data) v *= c_skip;
    return ad::affine(mu, -c_mu, &zs);
  }

  AdapterFeatures adapter_features(const Image& sketch) const override {
    check_sketch(sketch);
    if (sketch.channels != 1) throw std::invalid_argument("adapter: sketch must be single-channel");
    const int r = info_.latent_size;
    Matrix x(static_cast<std::size_t>(r * r), kVaeFactor * kVaeFactor);
    for (int y = 0; y < r; ++y)
      for (int xx = 0; xx < r; ++xx) {
        auto row = x.row(static_cast<std::size_t>(y * r + xx));
        std::size_t k = 0;
        for (int dy = 0; dy < kVaeFactor; ++dy)
          for (int dx = 0; dx < kVaeFactor; ++dx) row[k++] = sketch.at(xx * kVaeFactor + dx, y * kVaeFactor + dy, 0);
      }
    ad::Tape tape;
    auto h = ad::linear(tape.constant(std::move(x)), w("adapter.in"));
    AdapterFeatures out;
    for (int k = 0; k < kLevels; ++k) {
      const std::string p = "adapter.res" + std::to_string(k) + ".";
      if (k > 0) h = ad::avg_pool2(h);
      h = ad::add(h, ad::linear(ad::silu(ad::linear(h, w(p + "fc1"))), w(p + "fc2")));
      out.scales.push_back(dcc::matmul(h.value(), w("adapter.out" + std::to_string(k))));
    }
    return out;
  }

  std::string weights_digest() const override {
    Sha256 sha;
    for (const auto& [name, m] : w_) {
      sha.update(name);
      sha.update(m);
    }
    return sha.hex();
  }

  // Which cross-attention layers sit at a U-Net site, in layer order.
  static std::string site_of(std::size_t layer) {
    static const char* sites[] = {"enc0", "enc1", "dec1", "dec0"};
    return sites[layer % 4];
  }

 private:
  const Matrix& w(const std::string& name) const {
    auto it = w_.find(name);
    if (it == w_.end()) throw std::out_of_range("toy backbone: missing weight " + name);
    return it->second;
  }

  std::size_t text_heads() const { return spec_.word_dim % 4 == 0 ? 4 : 1; }

  void validate_spec() const {
    if (spec_.layer_dims.empty()) throw std::invalid_argument("toy backbone needs at least one cross-attention layer");
    if (spec_.image_size % (kVaeFactor * 8) != 0)
      throw std::invalid_argument("toy backbone image size must be a multiple of 32");
    for (auto d : spec_.layer_dims)
      if (d == 0 || d % spec_.heads != 0)
        throw std::invalid_argument("cross-attention width must be a positive multiple of the head count");
    if (spec_.latent_channels != 4) throw std::invalid_argument("toy VAE produces exactly 4 latent channels");
  }

  void build_info() {
    info_.family = "toy-ldm";
    info_.word_dim = spec_.word_dim;
    info_.text_dim = spec_.word_dim;
    info_.context_length = spec_.context_length;
    info_.image_size = spec_.image_size;
    info_.latent_size = spec_.image_size / kVaeFactor;
    info_.latent_channels = spec_.latent_channels;
    info_.feature_channels = static_cast<int>(spec_.channels);
    for (std::size_t l = 0; l < spec_.layer_dims.size(); ++l)
      info_.layers.push_back({static_cast<int>(l), spec_.layer_dims[l], site_of(l)});
    schedule_ = diffusion::NoiseSchedule::linear(spec_.diffusion_steps);
  }

  void finalize() {
    for (std::size_t l = 0; l < spec_.layer_dims.size(); ++l) {
      const std::string p = "unet.xattn" + std::to_string(l) + ".";
      CrossAttention a;
      a.norm_gain = &w(p + "ln.g");
      a.norm_bias = &w(p + "ln.b");
      a.w_q = &w(p + "q");
      a.w_k = &w(p + "k");
      a.w_v = &w(p + "v");
      a.w_o = &w(p + "o");
      a.heads = spec_.heads;
      a.layer_index = static_cast<int>(l);
      attention_.push_back(a);
    }
  }

  Matrix timestep_embedding(int t) const {
    const std::size_t c = spec_.channels;
    Matrix e(1, c);
    const std::size_t half = c / 2;
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      e.data[i] = std::cos(t * freq);
      e.data[half + i] = std::sin(t * freq);
    }
    return e;
  }

  ad::Var res_block(const std::string& p, const ad::Var& h) const {
    auto n = ad::layer_norm(h, &w(p + ".ln.g"), &w(p + ".ln.b"));
    auto hidden = ad::silu(ad::linear(n, w(p + ".fc1"), &w(p + ".fc1.b")));
    return ad::add(h, ad::linear(hidden, w(p + ".fc2"), &w(p + ".fc2.b")));
  }

  ad::Var attention_at(const std::string& site, ad::Var h, const ad::Var& text_encoding, const EditSet* edits) const {
    for (std::size_t l = 0; l < attention_.size(); ++l)
      if (site_of(l) == site) h = attention_[l].forward(h, text_encoding, edits);
    return h;
  }

  void check_image(const Image& img, int channels, const char* what) const {
    if (img.width != spec_.image_size || img.height != spec_.image_size || img.channels != channels) {
      throw ResolutionMismatch(std::string(what) + ": expected " + std::to_string(spec_.image_size) + "x" +
                               std::to_string(spec_.image_size) + "x" + std::to_string(channels) + " image, got " +
                               img.size_str() + "x" + std::to_string(img.channels));
    }
  }

  void put(const std::string& name, Matrix m) { w_[name] = std::move(m); }

  void init_weights() {
    Rng rng(spec_.seed ^ 0x5eed7000ULL);
    const std::size_t d = spec_.word_dim;
    const std::size_t c = spec_.channels;
    const std::size_t n = spec_.context_length;
    auto dense = [&](std::size_t in, std::size_t out, double gain = 1.0) {
      return rng.normal_matrix(in, out, gain / std::sqrt(static_cast<double>(in)));
    };
    auto ones = [](std::size_t k) { return Matrix(1, k, 1.0); };
    auto zeros = [](std::size_t k) { return Matrix(1, k, 0.0); };

    // Float-exact so that an f32 v* initialised from a row equals it exactly.
    Matrix table = rng.normal_matrix(tokenizer_.vocab_size(), d, 0.5);
    for (auto& v : table.data) v = static_cast<float>(v);
    put("text.token_embedding", std::move(table));
    put("text.position_embedding", rng.normal_matrix(n, d, 0.5));
    for (std::size_t l = 0; l < spec_.text_layers; ++l) {
      const std::string p = "text." + std::to_string(l) + ".";
      put(p + "ln1.g", ones(d));
      put(p + "ln1.b", zeros(d));
      put(p + "q", dense(d, d));
      put(p + "k", dense(d, d));
      put(p + "v", dense(d, d));
      put(p + "o", dense(d, d, 0.5));
      put(p + "ln2.g", ones(d));
      put(p + "ln2.b", zeros(d));
      put(p + "fc1", dense(d, 2 * d));
      put(p + "fc1.b", zeros(2 * d));
      put(p + "fc2", dense(2 * d, d, 0.5));
      put(p + "fc2.b", zeros(d));
    }
    put("text.final_ln.g", ones(d));
    put("text.final_ln.b", zeros(d));

    const std::size_t r = static_cast<std::size_t>(spec_.image_size / kVaeFactor);
    put("unet.in", dense(static_cast<std::size_t>(spec_.latent_channels), c));
    put("unet.in.b", zeros(c));
    put("unet.pos", rng.normal_matrix(r * r, c, 1.0));
    put("unet.time.fc1", dense(c, c));
    put("unet.time.fc1.b", zeros(c));
    put("unet.time.fc2", dense(c, c, 0.5));
    put("unet.time.fc2.b", zeros(c));
    auto block = [&](const std::string& p) {
      put(p + ".ln.g", ones(c));
      put(p + ".ln.b", zeros(c));
      put(p + ".fc1", dense(c, 2 * c));
      put(p + ".fc1.b", zeros(2 * c));
      put(p + ".fc2", dense(2 * c, c, 0.5));
      put(p + ".fc2.b", zeros(c));
    };
    for (int k = 0; k < kLevels; ++k) {
      block("unet.enc" + std::to_string(k));
      block("unet.dec" + std::to_string(k));
    }
    block("unet.mid");
    for (std::size_t l = 0; l < spec_.layer_dims.size(); ++l) {
      const std::string p = "unet.xattn" + std::to_string(l) + ".";
      const std::size_t dl = spec_.layer_dims[l];
      put(p + "ln.g", ones(c));
      put(p + "ln.b", zeros(c));
      put(p + "q", dense(c, dl, 2.0));
      put(p + "k", dense(d, dl));
      put(p + "v", dense(d, dl));
      put(p + "o", dense(dl, c));
    }
    put("unet.out_ln.g", ones(c));
    put("unet.out_ln.b", zeros(c));
    put("unet.out", dense(c, static_cast<std::size_t>(spec_.latent_channels), 0.5));
    put("unet.out.b", zeros(static_cast<std::size_t>(spec_.latent_channels)));

    // VAE: per-channel patch means plus a left/right luminance gradient,
    // decoded with the exact pseudo-inverse.
    const std::size_t patch = kVaeFactor * kVaeFactor;
    Matrix basis(patch * 3, 4);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t i = 0; i < patch; ++i) {
        basis(ch * patch + i, ch) = 1.0 / std::sqrt(static_cast<double>(patch));
        const bool right = (i % kVaeFactor) >= kVaeFactor / 2;
        basis(ch * patch + i, 3) = (right ? 1.0 : -1.0) / std::sqrt(static_cast<double>(3 * patch));
      }
    const double gain = 1.0 / std::sqrt(static_cast<double>(patch));
    Matrix enc = basis;
    for (auto& v : enc.data) v *= gain;
    Matrix dec = transpose(basis);
    for (auto& v : dec.data) v /= gain;
    put("vae.enc", std::move(enc));
    put("vae.dec", std::move(dec));

    put("adapter.in", dense(patch, c, 2.0));
    for (int k = 0; k < kLevels; ++k) {
      const std::string p = "adapter.res" + std::to_string(k) + ".";
      put(p + "fc1", dense(c, c));
      put(p + "fc2", dense(c, c, 0.5));
      put("adapter.out" + std::to_string(k), dense(c, c, 0.5));
    }
  }

  void check_weights() const {
    ToyBackbone reference(spec_);
    for (const auto& [name, m] : reference.w_) {
      auto it = w_.find(name);
      if (it == w_.end()) throw IncompatibleBackbone("toy weights: missing tensor " + name);
      if (!it->second.same_shape(m))
        throw IncompatibleBackbone("toy weights: tensor " + name + " has shape " + shape_str(it->second) +
                                   ", expected " + shape_str(m));
    }
  }

  ToyBackboneSpec spec_;
  Tokenizer tokenizer_;
  BackboneInfo info_;
  diffusion::NoiseSchedule schedule_;
  WeightMap w_;
  std::vector<CrossAttention> attention_;
};

inline std::shared_ptr<const ToyBackbone> make_toy_backbone(ToyBackboneSpec spec = {}) {
  return std::make_shared<const ToyBackbone>(std::move(spec));
}

}  // namespace dcc
