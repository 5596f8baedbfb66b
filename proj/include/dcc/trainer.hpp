#pragma once

// Single-image fine-tuning of a concept: random-mask reconstruction loss plus
// superclass regularisers, optimised over {v*, o*_K[l], o*_V[l]} only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dcc/sampling.hpp"

namespace dcc {

struct TrainConfig {
  int batch_size = 16;
  double lr_outputs = 0.2;
  double lr_embedding = 0.002;
  int steps = 0;  // 0 selects the per-kind default
  int identity_steps = 40;
  int style_steps = 100;
  double lambda_embedding = 0.01;  // weight of ||v* - S||^2
  double lambda_encoding = 0.1;    // weight of 1 - cos(t_p[c], t_p^sc[c])
  double mask_ratio_min = 0.25;
  double mask_ratio_max = 0.75;
  int patch_size = 0;  // 0 selects image_size / 8
  double face_weight = 0.2;
  double ema_beta = 0.98;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  diffusion::LossNormalisation normalisation = diffusion::LossNormalisation::unmasked_mean;
  std::uint64_t seed = 0;

  int steps_for(ConceptKind k) const {
    if (steps > 0) return steps;
    return k == ConceptKind::identity ? identity_steps : style_steps;
  }

  int patch_for(int image_size) const { return patch_size > 0 ? patch_size : image_size / 8; }

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (lr_outputs <= 0 || lr_embedding <= 0) throw std::invalid_argument("train config: learning rates must be positive");
    if (lambda_embedding < 0 || lambda_encoding < 0) throw std::invalid_argument("train config: lambdas must be >= 0");
    if (mask_ratio_min < 0 || mask_ratio_max > 1 || mask_ratio_min > mask_ratio_max)
      throw std::invalid_argument("train config: mask ratio range must satisfy 0 <= min <= max <= 1");
    if (!(ema_beta > 0 && ema_beta < 1)) throw std::invalid_argument("train config: ema_beta must lie in (0, 1)");
    if (steps < 0) throw std::invalid_argument("train config: steps must be >= 1");
  }

  nlohmann::json to_json(ConceptKind kind) const {
    return {{"steps", steps_for(kind)},
            {"batch_size", batch_size},
            {"lr_outputs", lr_outputs},
            {"lr_embedding", lr_embedding},
            {"lambda_embedding", lambda_embedding},
            {"lambda_encoding", lambda_encoding},
            {"mask_ratio", {mask_ratio_min, mask_ratio_max}},
            {"patch_size", patch_size},
            {"face_weight", face_weight},
            {"ema_beta", ema_beta},
            {"weight_decay", weight_decay},
            {"optimizer", "adamw"},
            {"loss_normalisation",
             normalisation == diffusion::LossNormalisation::unmasked_mean ? "unmasked_mean" : "raw_sum"},
            {"seed", seed}};
  }
};

struct MaskSpec {
  Image pixel_mask;   // 1 channel, 1 = contributes to the loss
  Image occlusion;    // 1 channel, 0 on occluded patches
  Matrix latent_mask; // (latent cells x 1)
  int occluded_patches = 0;
  int total_patches = 0;
};

// Occludes round(ratio * patches) whole patches, ratio ~ U[min, max], then
// applies the region weighting and downscales bilinearly to the latent grid.
//
// identity: M *= region (background = 0)
// style:    M *= face_weight on region cells
inline MaskSpec generate_random_mask(int resolution, int latent_size, const TrainConfig& config, ConceptKind kind,
                                     const Image* region_mask, Rng& rng) {
  const int patch = config.patch_for(resolution);
  if (patch <= 0 || resolution % patch != 0)
    throw std::invalid_argument("mask: resolution " + std::to_string(resolution) + " is not divisible by patch size " +
                                std::to_string(patch));
  if (region_mask != nullptr && (region_mask->width != resolution || region_mask->height != resolution))
    throw ResolutionMismatch("region mask is " + region_mask->size_str() + " but the image is " +
                             std::to_string(resolution) + "x" + std::to_string(resolution));
  const int per_side = resolution / patch;
  MaskSpec m;
  m.total_patches = per_side * per_side;
  const double ratio = config.mask_ratio_min + (config.mask_ratio_max - config.mask_ratio_min) * rng.uniform();
  m.occluded_patches = static_cast<int>(std::lround(ratio * m.total_patches));
  std::vector<int> order(static_cast<std::size_t>(m.total_patches));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());

  m.occlusion = Image(resolution, resolution, 1, 1.0f);
  for (int k = 0; k < m.occluded_patches; ++k) {
    const int p = order[static_cast<std::size_t>(k)];
    const int px = (p % per_side) * patch;
    const int py = (p / per_side) * patch;
    for (int y = py; y < py + patch; ++y)
      for (int x = px; x < px + patch; ++x) m.occlusion.at(x, y, 0) = 0.0f;
  }
  m.pixel_mask = m.occlusion;
  if (region_mask != nullptr) {
    const Image region = to_grayscale(*region_mask);
    for (int y = 0; y < resolution; ++y)
      for (int x = 0; x < resolution; ++x) {
        const bool face = region.at(x, y, 0) >= 0.5f;
        float& v = m.pixel_mask.at(x, y, 0);
        if (kind == ConceptKind::identity) {
          if (!face) v = 0.0f;
        } else if (face) {
          v *= static_cast<float>(config.face_weight);
        }
      }
  }
  const Image small = resize_bilinear(m.pixel_mask, latent_size, latent_size);
  m.latent_mask = Matrix(static_cast<std::size_t>(latent_size * latent_size), 1);
  for (std::size_t i = 0; i < m.latent_mask.rows; ++i)
    m.latent_mask.data[i] = std::clamp(static_cast<double>(small.data[i]), 0.0, 1.0);
  return m;
}

// Image with occluded patches replaced by mid-grey (zero after [-1, 1] mapping).
inline Image apply_occlusion(const Image& image, const Image& occlusion) {
  Image out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      if (occlusion.at(x, y, 0) == 0.0f)
        for (int c = 0; c < image.channels; ++c) out.at(x, y, c) = 0.5f;
  return out;
}

struct TrainingElement {
  MaskSpec mask;
  Latent masked_latent;  // z0^m
  int timestep = 0;
  Matrix noise;
};

using TrainingBatch = std::vector<TrainingElement>;

struct TrainableParams {
  Matrix v_star;                    // 1 x word_dim
  std::vector<Matrix> key_outputs;  // 1 x d_l each
  std::vector<Matrix> value_outputs;

  std::size_t count() const {
    std::size_t n = v_star.size();
    for (std::size_t l = 0; l < key_outputs.size(); ++l) n += key_outputs[l].size() + value_outputs[l].size();
    return n;
  }

  static TrainableParams from_concept(const Concept& c) {
    TrainableParams p;
    p.v_star = Matrix::row_vector(std::span<const float>(c.v_star));
    for (const auto& o : c.outputs) {
      p.key_outputs.push_back(Matrix::row_vector(std::span<const float>(o.key)));
      p.value_outputs.push_back(Matrix::row_vector(std::span<const float>(o.value)));
    }
    return p;
  }

  // Visits every trainable tensor with its group (true = embedding).
  template <class F>
  void for_each(F&& f) {
    f(v_star, true);
    for (auto& m : key_outputs) f(m, false);
    for (auto& m : value_outputs) f(m, false);
  }
};

struct LossTerms {
  double total = 0.0;
  double masked = 0.0;        // L_sd^mask
  double reg_embedding = 0.0; // L_reg^W
  double reg_encoding = 0.0;  // L_reg^T
  std::vector<double> encoded_token;  // t_p[c] for the EMA update

  std::string describe() const {
    return "total=" + std::to_string(total) + " masked=" + std::to_string(masked) +
           " reg_embedding=" + std::to_string(reg_embedding) + " reg_encoding=" + std::to_string(reg_encoding);
  }
};

struct Gradients {
  Matrix v_star;
  std::vector<Matrix> key_outputs;
  std::vector<Matrix> value_outputs;
};

// Everything about a fine-tuning run that stays fixed across steps.
struct TrainingSetup {
  ConceptKind kind = ConceptKind::identity;
  TokenizedPrompt prompt;
  std::size_t concept_index = 0;       // c_i
  Matrix superclass_embedding;         // S_c^w, 1 x word_dim
  std::vector<double> superclass_token_encoding;  // t_p^sc[c]
  Image image;
  std::optional<Image> region_mask;

  static TrainingSetup create(const Image& image, const std::string& superclass, ConceptKind kind,
                              const Backbone& backbone, const Image* region_mask) {
    const int s = backbone.info().image_size;
    if (image.width != s || image.height != s)
      throw ResolutionMismatch("reference image is " + image.size_str() + " but the backbone expects " +
                               std::to_string(s) + "x" + std::to_string(s));
    TrainingSetup t;
    t.kind = kind;
    t.image = to_rgb(image);
    if (region_mask != nullptr) t.region_mask = *region_mask;
    t.prompt = tokenize_prompt(training_prompt(kind), backbone.tokenizer());
    t.concept_index = t.prompt.placeholders.front().token_index;
    const auto emb = backbone.word_embedding(backbone.tokenizer().superclass_token(superclass));
    t.superclass_embedding = Matrix::row_vector(std::span<const double>(emb));
    const Matrix sc = encode_with_injections(backbone, t.prompt.token_ids, {{t.concept_index, emb}});
    auto row = sc.row(t.concept_index);
    t.superclass_token_encoding.assign(row.begin(), row.end());
    return t;
  }
};

inline TrainingBatch draw_batch(const TrainingSetup& setup, const Backbone& backbone, const TrainConfig& config,
                                Rng& rng) {
  const auto& info = backbone.info();
  TrainingBatch batch;
  for (int b = 0; b < config.batch_size; ++b) {
    TrainingElement e;
    e.mask = generate_random_mask(info.image_size, info.latent_size, config, setup.kind,
                                  setup.region_mask ? &*setup.region_mask : nullptr, rng);
    e.masked_latent = backbone.vae_encode(apply_occlusion(setup.image, e.mask.occlusion));
    e.timestep = static_cast<int>(rng.integer(0, backbone.schedule().steps - 1));
    e.noise = rng.normal_matrix(e.masked_latent.rows, e.masked_latent.cols);
    batch.push_back(std::move(e));
  }
  return batch;
}

// L_total = L_sd^mask + lambda_1 L_reg^W + lambda_2 L_reg^T over one batch.
// With `grads` non-null, also returns d L_total / d params.
inline LossTerms total_loss(const Backbone& backbone, const TrainingSetup& setup, const TrainableParams& params,
                            const std::vector<double>& target_input, const TrainingBatch& batch,
                            const TrainConfig& config, Gradients* grads) {
  if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");
  ad::Tape tape;
  const bool want = grads != nullptr;
  auto leaf = [&](const Matrix& m) { return want ? tape.parameter(m) : tape.constant(m); };
  auto v = leaf(params.v_star);
  ConceptEdit edit;
  edit.token_index = setup.concept_index;
  edit.target_input = &target_input;
  edit.scale = 1.0;
  for (std::size_t l = 0; l < params.key_outputs.size(); ++l) {
    edit.key_outputs.push_back(leaf(params.key_outputs[l]));
    edit.value_outputs.push_back(leaf(params.value_outputs[l]));
  }
  EditSet edits;
  edits.concepts.push_back(edit);

  auto text = backbone.encode_text(embed_prompt(tape, backbone, setup.prompt.token_ids, {{setup.concept_index, v}}));
  std::vector<ad::Var> per_element;
  std::vector<double> weights;
  for (const auto& e : batch) {
    const Matrix zt = diffusion::q_sample(e.masked_latent, e.timestep, e.noise, backbone.schedule());
    auto eps_hat = backbone.unet_predict(tape.constant(zt), e.timestep, text, &edits, nullptr);
    per_element.push_back(diffusion::masked_loss(e.noise, eps_hat, e.mask.latent_mask, config.normalisation));
    weights.push_back(1.0 / static_cast<double>(batch.size()));
  }
  auto masked = ad::weighted_sum(per_element, weights);
  auto reg_w = ad::squared_distance(v, setup.superclass_embedding);
  auto token = ad::row(text, setup.concept_index);
  auto reg_t = ad::shift(
      ad::cosine(token, tape.constant(Matrix::row_vector(std::span<const double>(setup.superclass_token_encoding)))),
      -1.0, 1.0);
  auto total = ad::weighted_sum({masked, reg_w, reg_t}, {1.0, config.lambda_embedding, config.lambda_encoding});

  LossTerms terms;
  terms.total = total.scalar();
  terms.masked = masked.scalar();
  terms.reg_embedding = reg_w.scalar();
  terms.reg_encoding = reg_t.scalar();
  terms.encoded_token.assign(token.value().data.begin(), token.value().data.end());

  if (want) {
    tape.backward(total);
    auto grad_or_zero = [](const ad::Var& x) { return x.grad().empty() ? Matrix(x.rows(), x.cols()) : x.grad(); };
    grads->v_star = grad_or_zero(v);
    grads->key_outputs.clear();
    grads->value_outputs.clear();
    for (std::size_t l = 0; l < params.key_outputs.size(); ++l) {
      grads->key_outputs.push_back(grad_or_zero(edit.key_outputs[l]));
      grads->value_outputs.push_back(grad_or_zero(edit.value_outputs[l]));
    }
  }
  return terms;
}

// Decoupled-weight-decay Adam over the two parameter groups.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& c) : c_(c) {}

  void step(TrainableParams& params, const Gradients& grads) {
    ++t_;
    std::size_t slot = 0;
    std::vector<const Matrix*> gs{&grads.v_star};
    for (const auto& g : grads.key_outputs) gs.push_back(&g);
    for (const auto& g : grads.value_outputs) gs.push_back(&g);
    params.for_each([&](Matrix& p, bool embedding) {
      const Matrix& g = *gs.at(slot);
      if (m_.size() <= slot) {
        m_.emplace_back(p.rows, p.cols);
        v_.emplace_back(p.rows, p.cols);
      }
      Matrix& m = m_[slot];
      Matrix& v = v_[slot];
      const double lr = embedding ? c_.lr_embedding : c_.lr_outputs;
      const double bc1 = 1.0 - std::pow(c_.adam_beta1, t_);
      const double bc2 = 1.0 - std::pow(c_.adam_beta2, t_);
      for (std::size_t i = 0; i < p.data.size(); ++i) {
        p.data[i] -= lr * c_.weight_decay * p.data[i];
        m.data[i] = c_.adam_beta1 * m.data[i] + (1.0 - c_.adam_beta1) * g.data[i];
        v.data[i] = c_.adam_beta2 * v.data[i] + (1.0 - c_.adam_beta2) * g.data[i] * g.data[i];
        p.data[i] -= lr * (m.data[i] / bc1) / (std::sqrt(v.data[i] / bc2) + c_.adam_eps);
      }
      ++slot;
    });
  }

 private:
  TrainConfig c_;
  int t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

using ProgressFn = std::function<void(int step, int total, const LossTerms&)>;

class Trainer {
 public:
  Trainer(const Backbone& backbone, const Image& image, const std::string& superclass, ConceptKind kind,
          TrainConfig config, const Image* region_mask = nullptr)
      : backbone_(backbone),
        config_((config.validate(), config)),
        setup_(TrainingSetup::create(image, superclass, kind, backbone, region_mask)),
        concept_(init_concept(superclass, kind, backbone)),
        params_(TrainableParams::from_concept(concept_)),
        target_input_(to_double(concept_.i_star)),
        optimizer_(config_),
        rng_(config_.seed) {}

  int total_steps() const { return config_.steps_for(setup_.kind); }
  int steps_done() const { return step_; }
  const TrainingSetup& setup() const { return setup_; }
  const TrainableParams& params() const { return params_; }
  const std::vector<double>& target_input() const { return target_input_; }

  LossTerms step() {
    const TrainingBatch batch = draw_batch(setup_, backbone_, config_, rng_);
    Gradients grads;
    LossTerms terms = total_loss(backbone_, setup_, params_, target_input_, batch, config_, &grads);
    if (!std::isfinite(terms.total)) {
      throw TrainingDiverged("training diverged at step " + std::to_string(step_) + ": " + terms.describe());
    }
    optimizer_.step(params_, grads);
    target_input_ = rome::update_target_input(target_input_, terms.encoded_token, config_.ema_beta);
    if (step_ == 0) initial_ = terms;
    last_ = terms;
    ++step_;
    return terms;
  }

  Concept run(const ProgressFn& progress = {}) {
    const int total = total_steps();
    while (step_ < total) {
      const auto terms = step();
      if (progress) progress(step_, total, terms);
    }
    return current_concept();
  }

  Concept current_concept() const {
    Concept c = concept_;
    c.v_star = to_float(params_.v_star.data);
    c.i_star = to_float(target_input_);
    for (std::size_t l = 0; l < c.outputs.size(); ++l) {
      c.outputs[l].key = to_float(params_.key_outputs[l].data);
      c.outputs[l].value = to_float(params_.value_outputs[l].data);
    }
    c.training = config_.to_json(setup_.kind);
    c.training["prompt"] = training_prompt(setup_.kind);
    c.training["steps_done"] = step_;
    if (step_ > 0) {
      c.training["initial_masked_loss"] = initial_.masked;
      c.training["final_masked_loss"] = last_.masked;
      c.training["final_total_loss"] = last_.total;
    }
    return c;
  }

 private:
  const Backbone& backbone_;
  TrainConfig config_;
  TrainingSetup setup_;
  Concept concept_;
  TrainableParams params_;
  std::vector<double> target_input_;
  AdamW optimizer_;
  Rng rng_;
  int step_ = 0;
  LossTerms initial_;
  LossTerms last_;
};

inline Concept finetune(const Image& image, const std::string& superclass, ConceptKind kind, const Backbone& backbone,
                        const TrainConfig& config, const Image* region_mask = nullptr, const ProgressFn& progress = {}) {
  Trainer trainer(backbone, image, superclass, kind, config, region_mask);
  return trainer.run(progress);
}

}  // namespace dcc
