#pragma once

// Classifier-free guidance and the deterministic DDIM (eta = 0) sampler.

#include <functional>
#include <optional>
#include <string>

#include "dcc/text_pipeline.hpp"

namespace dcc::diffusion {

struct SampleConfig {
  int steps = 50;
  double guidance = 9.0;
  std::string negative_prompt;  // unconditional branch text
};

// (1 - w) eps_u + w eps_c. The conditional branch carries the concept edits
// and the adapter features; the unconditional branch carries neither.
inline Matrix cfg_predict(const Backbone& backbone, const Matrix& z_t, int t, const PromptEncoding& cond,
                          const PromptEncoding& uncond, double w, const ScaleMap& scales,
                          const AdapterFeatures* adapter) {
  if (w < 0.0) throw std::invalid_argument("cfg_predict: guidance weight must be >= 0");
  Matrix eps_c;
  {
    ad::Tape tape;
    auto edits = make_inference_edits(tape, cond, scales);
    eps_c = backbone
                .unet_predict(tape.constant(z_t), t, tape.constant(cond.text_encoding), &edits->set, adapter)
                .value();
  }
  if (w == 1.0) return eps_c;
  Matrix eps_u;
  {
    ad::Tape tape;
    eps_u = backbone.unet_predict(tape.constant(z_t), t, tape.constant(uncond.text_encoding), nullptr, nullptr).value();
  }
  Matrix out(z_t.rows, z_t.cols);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = (1.0 - w) * eps_u.data[i] + w * eps_c.data[i];
  return out;
}

// Descending timesteps, evenly spaced over [0, T).
inline std::vector<int> sampling_timesteps(int steps, int total) {
  if (steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
  if (steps > total) throw std::invalid_argument("sampler: more steps than the schedule has");
  std::vector<int> ts;
  for (int i = 0; i < steps; ++i) ts.push_back(total - 1 - static_cast<int>(static_cast<long long>(i) * total / steps));
  return ts;
}

inline Latent initial_noise(const BackboneInfo& info, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_matrix(static_cast<std::size_t>(info.latent_size * info.latent_size),
                           static_cast<std::size_t>(info.latent_channels));
}

inline Latent sample_latent(const Backbone& backbone, const PromptEncoding& cond, const PromptEncoding& uncond,
                            const ScaleMap& scales, const AdapterFeatures* adapter, const SampleConfig& config,
                            std::uint64_t seed, const std::function<void(int, int)>& on_step = {}) {
  const auto& sched = backbone.schedule();
  const auto ts = sampling_timesteps(config.steps, sched.steps);
  Latent z = initial_noise(backbone.info(), seed);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const Matrix eps = cfg_predict(backbone, z, t, cond, uncond, config.guidance, scales, adapter);
    const double ab = sched.at(t);
    const double ab_prev = i + 1 < ts.size() ? sched.at(ts[i + 1]) : 1.0;
    const double sa = std::sqrt(ab);
    const double sb = std::sqrt(1.0 - ab);
    for (std::size_t k = 0; k < z.data.size(); ++k) {
      const double x0 = (z.data[k] - sb * eps.data[k]) / sa;
      z.data[k] = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps.data[k];
    }
    if (!all_finite(z)) throw std::runtime_error("sampler produced a non-finite latent at step " + std::to_string(i));
    if (on_step) on_step(static_cast<int>(i) + 1, static_cast<int>(ts.size()));
  }
  return z;
}

}  // namespace dcc::diffusion

namespace dcc {

struct GenerateRequest {
  const Concept* identity = nullptr;
  const Concept* style = nullptr;
  std::optional<double> identity_scale;
  std::optional<double> style_scale;
  std::optional<Image> sketch;
  diffusion::SampleConfig sampling;
  std::uint64_t seed = 0;
  std::string prompt;  // empty: chosen from the bound concepts
  std::function<void(int, int)> on_step;
};

inline std::string default_generation_prompt(bool identity, bool style) {
  if (identity && style) return "a caricature of [id*] in the style of [style*]";
  if (identity) return "a caricature of [id*]";
  if (style) return "a caricature in the style of [style*]";
  return "a caricature";
}

struct GenerateResult {
  Latent latent;
  Image image;
};

inline GenerateResult generate(const Backbone& backbone, const GenerateRequest& req) {
  ConceptBindings bindings;
  ScaleMap scales;
  if (req.identity != nullptr) {
    check_compatible(*req.identity, backbone);
    bindings["id*"] = req.identity;
    if (req.identity_scale) scales["id*"] = *req.identity_scale;
  }
  if (req.style != nullptr) {
    check_compatible(*req.style, backbone);
    bindings["style*"] = req.style;
    if (req.style_scale) scales["style*"] = *req.style_scale;
  }
  const std::string prompt =
      req.prompt.empty() ? default_generation_prompt(req.identity != nullptr, req.style != nullptr) : req.prompt;
  const auto cond = encode_prompt(prompt, bindings, backbone);
  const auto uncond = encode_prompt(req.sampling.negative_prompt, {}, backbone);
  std::optional<AdapterFeatures> features;
  if (req.sketch) features = backbone.adapter_features(normalise_sketch(*req.sketch));
  GenerateResult out;
  out.latent = diffusion::sample_latent(backbone, cond, uncond, scales, features ? &*features : nullptr, req.sampling,
                                        req.seed, req.on_step);
  out.image = backbone.vae_decode(out.latent);
  return out;
}

}  // namespace dcc
