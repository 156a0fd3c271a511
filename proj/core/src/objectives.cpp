#include "sitar/objectives.hpp"

#include "sitar/rng.hpp"

namespace sitar::obj {

ad::Var reparameterize(ad::Var mu, ad::Var log_var, const ad::Tensor& noise) {
  ad::Var sigma = ad::exp_(ad::affine(log_var, 0.5, 0.0));
  return ad::add(mu, ad::mul_const(sigma, noise));
}

ad::Var recon_loss(ad::Var x_hat, const ad::Tensor& x) {
  // Copy the shape out: pushing new nodes may reallocate the tape's storage,
  // so references into it must not be held across op calls.
  const std::vector<std::size_t> shape = x_hat.tape->value(x_hat).shape;
  ad::require(shape == x.shape, "recon_loss: shape mismatch");
  ad::Tensor neg_x = x;
  for (auto& v : neg_x.data) v = -v;
  ad::Var diff = ad::add_const(x_hat, neg_x);
  const double B = static_cast<double>(shape.at(0));
  return ad::affine(ad::sum(ad::square(diff)), 1.0 / B, 0.0);
}

ad::Var kl_loss(ad::Var mu, ad::Var log_var) {
  const ad::Tensor& mv = mu.tape->value(mu);
  ad::require(mv.ndim() == 2, "kl_loss: mu must be [B,m]");
  const double B = static_cast<double>(mv.dim(0));
  const double m = static_cast<double>(mv.dim(1));
  // 0.5/B * sum(mu^2 + exp(lv) - lv) - 0.5*m accounts for the "-1" term.
  ad::Var inner = ad::sub(ad::add(ad::square(mu), ad::exp_(log_var)), log_var);
  return ad::affine(ad::sum(inner), 0.5 / B, -0.5 * m);
}

ad::Var robust_ce(ad::Var logits_bar, const std::vector<int>& y) {
  return ad::cross_entropy_logits(logits_bar, y);
}

ad::Var consistency_loss(ad::Var logits_clean, ad::Var logits_bar) {
  const ad::Tensor& lc = logits_clean.tape->value(logits_clean);
  const double B = static_cast<double>(lc.dim(0));
  ad::Var diff = ad::sub(logits_clean, logits_bar);
  return ad::affine(ad::sum(ad::square(diff)), 1.0 / B, 0.0);
}

TotalLossOut total_loss(ad::Tape& t, const nn::SitarModel& model,
                        const std::vector<ad::Var>& p, const ad::Tensor& x,
                        const std::vector<int>& y, const LossConfig& cfg,
                        std::uint64_t seed, std::uint64_t step,
                        std::vector<double>* v_ema) {
  const std::size_t B = x.dim(0);
  const std::size_t m = static_cast<std::size_t>(model.latent_dim());

  ad::Var xv = t.leaf(x);
  nn::EncodeOut enc = model.encode(t, p, xv);

  rng::Stream reparam_stream(seed, rng::Purpose::kReparam, step);
  ad::Tensor eps({B, m});
  for (auto& v : eps.data) v = reparam_stream.next_gaussian();
  ad::Var z = reparameterize(enc.mu, enc.logvar, eps);

  ad::Var x_hat = model.decode(t, p, z);
  ad::Var recon = recon_loss(x_hat, x);
  ad::Var kl = kl_loss(enc.mu, enc.logvar);

  // v is computed on detached mu: the tensor copy severs the gradient path.
  proxy::ShortcutWeights sw =
      proxy::correlation_weights(ad::stop_gradient(enc.mu), y,
                                 cfg.reweight_correlation);
  if (v_ema != nullptr && cfg.v_ema_momentum > 0.0) {
    if (v_ema->size() != m) {
      *v_ema = sw.v;  // first batch seeds the running average
    } else {
      for (std::size_t j = 0; j < m; ++j)
        (*v_ema)[j] = cfg.v_ema_momentum * (*v_ema)[j] +
                      (1.0 - cfg.v_ema_momentum) * sw.v[j];
    }
    sw.v = *v_ema;
  }

  rng::Stream perturb_stream(seed, rng::Purpose::kPerturb, step);
  ad::Var z_bar = cfg.alpha > 0.0
                      ? proxy::perturb(z, sw.v, cfg.alpha, perturb_stream,
                                       cfg.isotropic)
                      : z;

  ad::Var logits_bar = model.classify(t, p, z_bar);
  ad::Var ce = robust_ce(logits_bar, y);

  ad::Var total;
  LossBreakdown vals;
  if (cfg.alpha > 0.0) {
    ad::Var logits_clean = model.classify(t, p, z);
    ad::Var cons = consistency_loss(logits_clean, logits_bar);
    total = ad::add(ad::add(recon, ad::affine(kl, cfg.beta, 0.0)),
                    ad::add(ce, ad::affine(cons, cfg.lambda_cons, 0.0)));
    vals.consistency = t.value(cons).data[0];
  } else {
    // alpha = 0: z_bar == z, consistency is identically zero; skip its graph
    // so the gradient matches the plain ERM objective exactly.
    total = ad::add(ad::add(recon, ad::affine(kl, cfg.beta, 0.0)), ce);
    vals.consistency = 0.0;
  }

  vals.recon = t.value(recon).data[0];
  vals.kl = t.value(kl).data[0];
  vals.robust_ce = t.value(ce).data[0];
  vals.total = t.value(total).data[0];
  return {total, vals, std::move(sw)};
}

}  // namespace sitar::obj
