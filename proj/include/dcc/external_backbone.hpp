#pragma once

// Backbones loaded from disk.
//
//   <file>.safetensors with metadata dcc.family = "toy-ldm"
//       a toy stack exported by export_toy_backbone; fully functional.
//   <dir> in the diffusers layout of Stable Diffusion v1.5
//       unet/diffusion_pytorch_model.safetensors
//       text_encoder/model.safetensors
//       tokenizer/vocab.json
//       adapter/diffusion_pytorch_model.safetensors   (optional sketch adapter)
//     Layer enumeration, word embeddings and the tokenizer are available.
//     The noise predictor, VAE, text encoder and adapter forward passes are
//     not part of this build and raise an error naming the missing runtime.

#include <algorithm>
#include <filesystem>
#include <memory>
#include <regex>
#include <string>
#include <vector>

#include "dcc/safetensors.hpp"
#include "dcc/toy_backbone.hpp"

namespace dcc {

inline nlohmann::json toy_spec_to_json(const ToyBackboneSpec& s) {
  return {{"word_dim", s.word_dim},         {"layer_dims", s.layer_dims},   {"heads", s.heads},
          {"channels", s.channels},         {"context_length", s.context_length},
          {"text_layers", s.text_layers},   {"image_size", s.image_size},   {"latent_channels", s.latent_channels},
          {"sigma_data", s.sigma_data},     {"diffusion_steps", s.diffusion_steps}, {"seed", s.seed}};
}

inline ToyBackboneSpec toy_spec_from_json(const nlohmann::json& j) {
  ToyBackboneSpec s;
  s.word_dim = j.at("word_dim").get<std::size_t>();
  s.layer_dims = j.at("layer_dims").get<std::vector<std::size_t>>();
  s.heads = j.at("heads").get<std::size_t>();
  s.channels = j.at("channels").get<std::size_t>();
  s.context_length = j.at("context_length").get<std::size_t>();
  s.text_layers = j.at("text_layers").get<std::size_t>();
  s.image_size = j.at("image_size").get<int>();
  s.latent_channels = j.at("latent_channels").get<int>();
  s.sigma_data = j.at("sigma_data").get<double>();
  s.diffusion_steps = j.at("diffusion_steps").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

// Weights are written as F64 so that the reloaded stack is bit-identical.
inline void export_toy_backbone(const ToyBackbone& b, const std::filesystem::path& path) {
  safetensors::save(path, b.weights(), {{"dcc.family", "toy-ldm"}, {"dcc.toy_spec", toy_spec_to_json(b.spec()).dump()}},
                    "F64");
}

inline std::shared_ptr<const ToyBackbone> load_toy_backbone(const std::filesystem::path& path) {
  const auto file = safetensors::File::load(path);
  auto fam = file.metadata().find("dcc.family");
  if (fam == file.metadata().end() || fam->second != "toy-ldm")
    throw IncompatibleBackbone(path.string() + ": not a toy-ldm export (missing dcc.family metadata)");
  auto spec_it = file.metadata().find("dcc.toy_spec");
  if (spec_it == file.metadata().end()) throw FormatError(path.string() + ": missing dcc.toy_spec metadata");
  ToyBackboneSpec spec;
  try {
    spec = toy_spec_from_json(nlohmann::json::parse(spec_it->second));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed dcc.toy_spec: " + e.what());
  }
  ToyBackbone::WeightMap w;
  for (const auto& [name, info] : file.tensors()) w[name] = file.matrix(name);
  return std::make_shared<const ToyBackbone>(std::move(spec), std::move(w));
}

// Stable Diffusion v1.5 in the diffusers directory layout.
class Sd15Backbone final : public Backbone {
 public:
  static constexpr std::size_t kTextDim = 768;
  static constexpr std::size_t kContext = 77;
  static constexpr std::size_t kExpectedLayers = 16;

  explicit Sd15Backbone(const std::filesystem::path& root) : root_(root), tokenizer_({}, kContext) {
    require_files();
    unet_ = std::make_unique<safetensors::File>(safetensors::File::open(root_ / "unet/diffusion_pytorch_model.safetensors"));
    text_ = std::make_unique<safetensors::File>(safetensors::File::open(root_ / "text_encoder/model.safetensors"));
    enumerate_layers();
    load_text_tables();
    load_vocabulary();
    info_.family = "sd15";
    info_.word_dim = kTextDim;
    info_.text_dim = kTextDim;
    info_.context_length = kContext;
    info_.image_size = 512;
    info_.latent_size = 64;
    info_.latent_channels = 4;
    info_.feature_channels = 320;
    schedule_ = diffusion::NoiseSchedule::scaled_linear(1000);
  }

  const BackboneInfo& info() const override { return info_; }
  const Tokenizer& tokenizer() const override { return tokenizer_; }
  const diffusion::NoiseSchedule& schedule() const override { return schedule_; }

  std::vector<double> word_embedding(TokenId id) const override {
    if (id < 0 || static_cast<std::size_t>(id) >= local_to_clip_.size()) throw std::out_of_range("token id out of range");
    auto r = token_embedding_.row(static_cast<std::size_t>(local_to_clip_[static_cast<std::size_t>(id)]));
    return {r.begin(), r.end()};
  }

  std::size_t position_count() const { return position_rows_; }
  bool has_adapter() const { return std::filesystem::exists(root_ / "adapter/diffusion_pytorch_model.safetensors"); }

  // Original weight names of each cross-attention layer, in execution order.
  const std::vector<std::string>& layer_names() const { return layer_names_; }

  ad::Var encode_text(const ad::Var&) const override { unavailable("text encoder"); }
  Latent vae_encode(const Image&) const override { unavailable("VAE encoder"); }
  Image vae_decode(const Latent&) const override { unavailable("VAE decoder"); }
  ad::Var unet_predict(const ad::Var&, int, const ad::Var&, const EditSet*, const AdapterFeatures*) const override {
    unavailable("UNet noise predictor");
  }
  AdapterFeatures adapter_features(const Image&) const override { unavailable("sketch adapter"); }

  std::string weights_digest() const override {
    Sha256 h;
    for (const auto* f : {unet_.get(), text_.get()})
      for (const auto& [name, t] : f->tensors()) h.update(name).update(t.dtype).update(std::to_string(t.begin));
    h.update(token_embedding_);
    return h.hex();
  }

 private:
  [[noreturn]] static void unavailable(const char* what) {
    throw std::runtime_error(std::string("sd15 backbone: the ") + what +
                             " forward pass is not included in this build; use the toy backbone (backbone = \"toy\") "
                             "or a toy-ldm safetensors export for training and generation");
  }

  void require_files() const {
    const std::vector<std::string> needed = {"unet/diffusion_pytorch_model.safetensors", "text_encoder/model.safetensors",
                                             "tokenizer/vocab.json"};
    std::vector<std::string> missing;
    for (const auto& f : needed)
      if (!std::filesystem::exists(root_ / f)) missing.push_back(f);
    if (missing.empty()) return;
    std::string msg = "Stable Diffusion v1.5 weights not found under " + root_.string() + "; missing:";
    for (const auto& m : missing) msg += " " + m;
    msg += ". Fetch them with: huggingface-cli download stable-diffusion-v1-5/stable-diffusion-v1-5 "
           "--include 'unet/*' 'text_encoder/*' 'tokenizer/*' --local-dir " + root_.string() +
           " (and optionally TencentARC/t2iadapter_sketch_sd15v2 into " + (root_ / "adapter").string() + ")";
    throw std::runtime_error(msg);
  }

  // down_blocks < mid_block < up_blocks, then numerically by index.
  static std::vector<long> order_key(const std::string& name) {
    std::vector<long> key;
    if (name.rfind("down_blocks", 0) == 0) key.push_back(0);
    else if (name.rfind("mid_block", 0) == 0) key.push_back(1);
    else key.push_back(2);
    static const std::regex num("\\d+");
    for (auto it = std::sregex_iterator(name.begin(), name.end(), num); it != std::sregex_iterator(); ++it)
      key.push_back(std::stol(it->str()));
    return key;
  }

  void enumerate_layers() {
    const std::string suffix = ".attn2.to_k.weight";
    std::vector<std::string> found;
    for (const auto& [name, t] : unet_->tensors())
      if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
        found.push_back(name.substr(0, name.size() - suffix.size()));
    std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return order_key(a) < order_key(b); });

    auto listing = [&] {
      std::string s;
      for (const auto& f : found) s += "\n  " + f;
      return s.empty() ? std::string(" (none)") : s;
    };
    if (found.size() != kExpectedLayers)
      throw IncompatibleBackbone("expected " + std::to_string(kExpectedLayers) + " cross-attention layers, found " +
                                 std::to_string(found.size()) + ":" + listing());
    for (std::size_t l = 0; l < found.size(); ++l) {
      const auto& k = unet_->info(found[l] + ".attn2.to_k.weight");
      const std::string vname = found[l] + ".attn2.to_v.weight";
      if (!unet_->contains(vname)) throw IncompatibleBackbone("layer " + found[l] + " has to_k but no to_v");
      const auto& v = unet_->info(vname);
      if (k.shape.size() != 2 || k.shape != v.shape || k.shape[1] != kTextDim)
        throw IncompatibleBackbone("layer " + found[l] + " K/V projections are not [d, 768]:" + listing());
      info_.layers.push_back({static_cast<int>(l), k.shape[0], found[l]});
    }
    layer_names_ = found;
  }

  void load_text_tables() {
    const std::string tok = "text_model.embeddings.token_embedding.weight";
    const std::string pos = "text_model.embeddings.position_embedding.weight";
    const auto& t = text_->info(tok);
    const auto& p = text_->info(pos);
    if (t.shape.size() != 2 || t.shape[1] != kTextDim)
      throw IncompatibleBackbone("text encoder word embeddings are " + std::to_string(t.shape.back()) + "-dim, expected 768");
    if (p.shape.size() != 2 || p.shape[0] != kContext)
      throw IncompatibleBackbone("text encoder has " + std::to_string(p.shape[0]) + " positions, expected 77");
    token_embedding_ = text_->matrix(tok);
    position_rows_ = p.shape[0];
  }

  // Whole-word entries ("word</w>") of the CLIP vocabulary become the word
  // list of a local tokenizer; ids are translated back to CLIP rows.
  void load_vocabulary() {
    nlohmann::json vocab;
    try {
      const auto bytes = read_file(root_ / "tokenizer/vocab.json");
      vocab = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("tokenizer/vocab.json: " + std::string(e.what()));
    }
    auto id_of = [&](const std::string& key, int fallback) {
      auto it = vocab.find(key);
      return it == vocab.end() ? fallback : it->get<int>();
    };
    const int bos = id_of("<|startoftext|>", 0);
    const int eos = id_of("<|endoftext|>", 0);
    std::vector<std::pair<int, std::string>> words;
    for (auto it = vocab.begin(); it != vocab.end(); ++it) {
      const std::string& k = it.key();
      if (k.size() <= 4 || k.compare(k.size() - 4, 4, "</w>") != 0) continue;
      const std::string w = k.substr(0, k.size() - 4);
      if (!std::all_of(w.begin(), w.end(), [](unsigned char c) { return std::islower(c) || std::isdigit(c); })) continue;
      const int id = it->get<int>();
      if (id < 0 || static_cast<std::size_t>(id) >= token_embedding_.rows) continue;
      words.emplace_back(id, w);
    }
    std::sort(words.begin(), words.end());
    std::vector<std::string> list;
    for (const auto& [id, w] : words) list.push_back(w);
    tokenizer_ = Tokenizer(list, kContext);
    local_to_clip_.assign(tokenizer_.vocab_size(), eos);
    local_to_clip_[Tokenizer::kBos] = bos;
    for (std::size_t i = 0; i < words.size(); ++i)
      local_to_clip_[static_cast<std::size_t>(*tokenizer_.lookup(words[i].second))] = words[i].first;
  }

  std::filesystem::path root_;
  Tokenizer tokenizer_;
  BackboneInfo info_;
  diffusion::NoiseSchedule schedule_;
  std::unique_ptr<safetensors::File> unet_;
  std::unique_ptr<safetensors::File> text_;
  Matrix token_embedding_;
  std::size_t position_rows_ = 0;
  std::vector<int> local_to_clip_;
  std::vector<std::string> layer_names_;
};

// "toy" (or "toy:<seed>") builds the in-process toy stack; anything else is a
// path to a toy-ldm export or a Stable Diffusion v1.5 directory.
inline std::shared_ptr<const Backbone> open_backbone(const std::string& selector) {
  if (selector.empty() || selector == "toy") return make_toy_backbone();
  if (selector.rfind("toy:", 0) == 0) {
    ToyBackboneSpec spec;
    spec.seed = std::stoull(selector.substr(4));
    return make_toy_backbone(spec);
  }
  const std::filesystem::path p(selector);
  if (std::filesystem::is_directory(p)) return std::make_shared<const Sd15Backbone>(p);
  if (!std::filesystem::exists(p))
    throw std::runtime_error("backbone '" + selector + "' not found; use \"toy\", a toy-ldm .safetensors export "
                             "(dcc export-toy --out FILE) or a Stable Diffusion v1.5 diffusers directory");
  return load_toy_backbone(p);
}

}  // namespace dcc
