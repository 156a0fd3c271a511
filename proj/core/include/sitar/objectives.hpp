#pragma once
// Loss terms: VAE ELBO pieces, robust cross-entropy on the perturbed latent,
// functional consistency between clean and perturbed logits, and the full
// per-batch assembly of the training objective.
#include <cstdint>
#include <vector>

#include "sitar/nn.hpp"
#include "sitar/proxy.hpp"
#include "sitar/tape.hpp"
#include "sitar/tensor.hpp"

namespace sitar::obj {

struct LossBreakdown {
  double recon = 0.0;
  double kl = 0.0;
  double robust_ce = 0.0;
  double consistency = 0.0;
  double total = 0.0;
};

struct LossConfig {
  double alpha = 1.0;        // perturbation strength
  double beta = 2.0;         // KL weight
  double lambda_cons = 10.0; // consistency weight
  bool isotropic = false;    // v ≡ 1 instead of correlation weights
  bool reweight_correlation = false;
  // Momentum for the exponential moving average of v across batches (applied
  // only when the caller threads an EMA state through total_loss). The
  // batchwise estimate of the correlation is noisy at small batch sizes;
  // smoothing it keeps the anisotropic noise aimed at a consistent axis.
  double v_ema_momentum = 0.9;
};

// z = mu + exp(0.5 * log_var) ⊙ noise; noise enters as a constant.
ad::Var reparameterize(ad::Var mu, ad::Var log_var, const ad::Tensor& noise);

// Sum of squared pixel errors per example, mean over the batch.
ad::Var recon_loss(ad::Var x_hat, const ad::Tensor& x);

// Closed-form KL(N(mu, diag exp(lv)) || N(0, I)): sum over latent dimensions,
// mean over the batch.
ad::Var kl_loss(ad::Var mu, ad::Var log_var);

// Mean softmax cross-entropy of the perturbed latent's logits.
ad::Var robust_ce(ad::Var logits_bar, const std::vector<int>& y);

// Mean squared L2 distance between logit vectors; gradients flow through both.
ad::Var consistency_loss(ad::Var logits_clean, ad::Var logits_bar);

struct TotalLossOut {
  ad::Var total;                     // scalar node to call backward on
  LossBreakdown values;
  proxy::ShortcutWeights weights;    // v used for this batch
};

// One full objective evaluation: encode, reparameterize, decode, ELBO terms,
// correlation weights on detached mu, perturb, robust CE and consistency.
// Noise streams are keyed by (seed, purpose, step) so draws are reproducible
// and alpha = 0 leaves the reparameterization stream untouched.
//
// When v_ema is non-null it carries the running average of v across calls:
// the batch estimate is blended in (momentum from cfg) before the
// perturbation is drawn, and the returned weights are the blended vector.
// A null v_ema uses the raw batch estimate (single-shot evaluation).
TotalLossOut total_loss(ad::Tape& t, const nn::SitarModel& model,
                        const std::vector<ad::Var>& p, const ad::Tensor& x,
                        const std::vector<int>& y, const LossConfig& cfg,
                        std::uint64_t seed, std::uint64_t step,
                        std::vector<double>* v_ema = nullptr);

}  // namespace sitar::obj
