#pragma once

// Backbone-independent diffusion math: noise schedule, forward noising and
// the masked denoising loss.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcc/autodiff.hpp"
#include "dcc/tensor.hpp"
#include "dcc/util.hpp"

namespace dcc::diffusion {

struct NoiseSchedule {
  int steps = 0;  // T
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  // Scaled-linear betas (linear in sqrt(beta)), the Stable Diffusion default.
  static NoiseSchedule scaled_linear(int steps = 1000, double beta_start = 0.00085, double beta_end = 0.012) {
    if (steps < 1) throw std::invalid_argument("schedule: steps must be >= 1");
    NoiseSchedule s;
    s.steps = steps;
    s.alpha.resize(static_cast<std::size_t>(steps));
    s.alpha_bar.resize(static_cast<std::size_t>(steps));
    const double a = std::sqrt(beta_start);
    const double b = std::sqrt(beta_end);
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
      const double sb = a + (b - a) * frac;
      s.alpha[t] = 1.0 - sb * sb;
      prod *= s.alpha[t];
      s.alpha_bar[t] = prod;
    }
    return s;
  }

  // Betas linear in t. The defaults are the usual 1e-4..0.02 range rescaled to
  // a 100-step chain.
  static NoiseSchedule linear(int steps = 100, double beta_start = 0.001, double beta_end = 0.2) {
    if (steps < 1) throw std::invalid_argument("schedule: steps must be >= 1");
    NoiseSchedule s;
    s.steps = steps;
    s.alpha.resize(static_cast<std::size_t>(steps));
    s.alpha_bar.resize(static_cast<std::size_t>(steps));
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
      s.alpha[t] = 1.0 - (beta_start + (beta_end - beta_start) * frac);
      prod *= s.alpha[t];
      s.alpha_bar[t] = prod;
    }
    return s;
  }

  // Schedule with explicitly given cumulative products (used by tests for
  // the alpha_bar = 0 / 1 limits).
  static NoiseSchedule from_alpha_bar(std::vector<double> alpha_bar) {
    NoiseSchedule s;
    s.steps = static_cast<int>(alpha_bar.size());
    s.alpha.resize(alpha_bar.size());
    for (std::size_t t = 0; t < alpha_bar.size(); ++t)
      s.alpha[t] = t == 0 ? alpha_bar[0] : (alpha_bar[t - 1] == 0.0 ? 0.0 : alpha_bar[t] / alpha_bar[t - 1]);
    s.alpha_bar = std::move(alpha_bar);
    return s;
  }

  double at(int t) const {
    if (t < 0 || t >= steps) throw std::out_of_range("schedule: step " + std::to_string(t) + " outside [0, " + std::to_string(steps) + ")");
    return alpha_bar[static_cast<std::size_t>(t)];
  }
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
inline Matrix q_sample(const Matrix& z0, int t, const Matrix& eps, const NoiseSchedule& sched) {
  require_same_shape(z0, eps, "q_sample");
  const double ab = sched.at(t);
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  Matrix out(z0.rows, z0.cols);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * z0.data[i] + b * eps.data[i];
  return out;
}

enum class LossNormalisation {
  unmasked_mean,  // divide by the effective unmasked area
  raw_sum,        // plain masked sum of squares
};

// Latent mask M holds one weight per latent cell (rows of the latent), shared
// by all latent channels.
inline double masked_loss_denominator(const Matrix& mask, std::size_t channels, LossNormalisation norm) {
  if (norm == LossNormalisation::raw_sum) return 1.0;
  double area = 0.0;
  for (double m : mask.data) area += m;
  return std::max(area * static_cast<double>(channels), 1.0);
}

inline void check_mask_shape(const Matrix& eps, const Matrix& mask) {
  if (mask.rows != eps.rows || mask.cols != 1) {
    throw std::invalid_argument("masked_loss: mask " + shape_str(mask) + " does not broadcast over " + shape_str(eps));
  }
}

inline bool mask_is_empty(const Matrix& mask) {
  for (double m : mask.data)
    if (m != 0.0) return false;
  return true;
}

// sum M (eps - eps_hat)^2 / max(sum M * channels, 1)
inline double masked_loss(const Matrix& eps, const Matrix& eps_hat, const Matrix& mask,
                          LossNormalisation norm = LossNormalisation::unmasked_mean) {
  require_same_shape(eps, eps_hat, "masked_loss");
  check_mask_shape(eps, mask);
  if (mask_is_empty(mask)) {
    log::warn("masked_loss: latent mask is all zero; batch element contributes nothing");
    return 0.0;
  }
  double s = 0.0;
  for (std::size_t i = 0; i < eps.rows; ++i) {
    const double m = mask.data[i];
    if (m == 0.0) continue;
    for (std::size_t c = 0; c < eps.cols; ++c) {
      const double d = eps(i, c) - eps_hat(i, c);
      s += m * d * d;
    }
  }
  return s / masked_loss_denominator(mask, eps.cols, norm);
}

// Differentiable form w.r.t. the prediction. Cells with M = 0 receive an
// exactly zero gradient.
inline ad::Var masked_loss(const Matrix& eps, const ad::Var& eps_hat, const Matrix& mask,
                           LossNormalisation norm = LossNormalisation::unmasked_mean) {
  const double value = masked_loss(eps, eps_hat.value(), mask, norm);
  const double denom = masked_loss_denominator(mask, eps.cols, norm);
  ad::Node* np = eps_hat.node();
  return eps_hat.tape().record(Matrix(1, 1, value), eps_hat.requires_grad(),
                               [np, eps, mask, denom](const Matrix& g) {
                                 Matrix d(eps.rows, eps.cols);
                                 for (std::size_t i = 0; i < eps.rows; ++i) {
                                   const double m = mask.data[i];
                                   if (m == 0.0) continue;
                                   for (std::size_t c = 0; c < eps.cols; ++c)
                                     d(i, c) = -2.0 * m * (eps(i, c) - np->value(i, c)) / denom * g.data[0];
                                 }
                                 ad::accumulate(np, d);
                               });
}

}  // namespace dcc::diffusion
