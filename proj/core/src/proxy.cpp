#include "sitar/proxy.hpp"

#include <cmath>

namespace sitar::proxy {

ShortcutWeights correlation_weights(const ad::Tensor& mu, const std::vector<int>& y,
                                    bool reweight) {
  ad::require(mu.ndim() == 2, "correlation_weights: mu must be [B,m]");
  const std::size_t B = mu.dim(0), m = mu.dim(1);
  ad::require(B >= 2, "correlation_weights: batch must have at least 2 examples");
  ad::require(y.size() == B, "correlation_weights: label count mismatch");

  std::size_t n1 = 0;
  for (int yi : y) {
    ad::require(yi == 0 || yi == 1, "correlation_weights: labels must be binary");
    n1 += static_cast<std::size_t>(yi);
  }

  // Normalized example weights summing to 1. Unweighted: 1/B each. Reweighted:
  // proportional to 1/(2 * class frequency), which balances the class masses.
  std::vector<double> w(B, 1.0 / static_cast<double>(B));
  if (reweight && n1 > 0 && n1 < B) {
    const double f1 = static_cast<double>(n1) / static_cast<double>(B);
    const double w0 = 1.0 / (2.0 * (1.0 - f1)), w1 = 1.0 / (2.0 * f1);
    double total = 0.0;
    for (std::size_t i = 0; i < B; ++i) total += (y[i] ? w1 : w0);
    for (std::size_t i = 0; i < B; ++i) w[i] = (y[i] ? w1 : w0) / total;
  }

  double my = 0.0;
  for (std::size_t i = 0; i < B; ++i) my += w[i] * y[i];
  double var_y = 0.0;
  for (std::size_t i = 0; i < B; ++i) var_y += w[i] * (y[i] - my) * (y[i] - my);

  ShortcutWeights out;
  out.batch_size = B;
  out.degenerate = (n1 == 0 || n1 == B);
  out.v.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    double mx = 0.0;
    for (std::size_t i = 0; i < B; ++i) mx += w[i] * mu.data[i * m + j];
    double cov = 0.0, var_x = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
      const double xc = mu.data[i * m + j] - mx;
      cov += w[i] * xc * (y[i] - my);
      var_x += w[i] * xc * xc;
    }
    const double r =
        cov / (std::sqrt(std::max(var_x, kCorrEps)) * std::sqrt(var_y + kCorrEps));
    out.v[j] = std::fabs(r);
  }
  return out;
}

namespace {

ad::Tensor perturbation(const std::vector<std::size_t>& shape,
                        const std::vector<double>& v, double alpha,
                        rng::Stream& stream, bool isotropic) {
  const std::size_t B = shape[0], m = shape[1];
  ad::require(v.size() == m, "perturb: v length mismatch");
  ad::require(alpha >= 0.0, "perturb: alpha must be nonnegative");
  ad::Tensor delta(shape);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < m; ++j)
      delta.data[i * m + j] =
          alpha * (isotropic ? 1.0 : v[j]) * stream.next_gaussian();
  return delta;
}

}  // namespace

ad::Var perturb(ad::Var z, const std::vector<double>& v, double alpha,
                rng::Stream& stream, bool isotropic) {
  const ad::Tensor& zv = z.tape->value(z);
  ad::require(zv.ndim() == 2, "perturb: z must be [B,m]");
  return ad::add_const(z, perturbation(zv.shape, v, alpha, stream, isotropic));
}

ad::Tensor perturb_tensor(const ad::Tensor& z, const std::vector<double>& v,
                          double alpha, rng::Stream& stream, bool isotropic) {
  ad::require(z.ndim() == 2, "perturb: z must be [B,m]");
  ad::Tensor out = z;
  const ad::Tensor delta = perturbation(z.shape, v, alpha, stream, isotropic);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += delta.data[i];
  return out;
}

}  // namespace sitar::proxy
