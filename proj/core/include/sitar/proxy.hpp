#pragma once
// Shortcut proxy: per-latent-dimension absolute Pearson correlation with the
// binary label, computed batchwise on detached codes, and the anisotropic
// latent perturbation it drives.
#include <vector>

#include "sitar/rng.hpp"
#include "sitar/tape.hpp"
#include "sitar/tensor.hpp"

namespace sitar::proxy {

inline constexpr double kCorrEps = 1e-8;

struct ShortcutWeights {
  std::vector<double> v;      // length m, entries in [0, 1]
  std::size_t batch_size = 0;
  bool degenerate = false;    // all-same-label batch (v forced ~0 by eps floor)
};

// v_j = |corr(mu^(j), y)| with population moments and an eps floor on the
// variances: r = cov / (sqrt(max(var_x, eps)) * sqrt(var_y + eps)).
// With reweight set, every example is weighted by 1/(2 * batch frequency of
// its class) inside the centered moments, balancing the two classes.
ShortcutWeights correlation_weights(const ad::Tensor& mu, const std::vector<int>& y,
                                    bool reweight = false);

// z_bar = z + alpha * (v ⊙ e), e ~ N(0, I) drawn from the stream in row-major
// order. The noise enters as a constant: no gradient flows into v or e.
// isotropic replaces v by the all-ones vector.
ad::Var perturb(ad::Var z, const std::vector<double>& v, double alpha,
                rng::Stream& stream, bool isotropic = false);

// Same perturbation on a plain tensor (for evaluation / theory checks).
ad::Tensor perturb_tensor(const ad::Tensor& z, const std::vector<double>& v,
                          double alpha, rng::Stream& stream, bool isotropic = false);

}  // namespace sitar::proxy
