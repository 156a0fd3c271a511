#pragma once
// Numerical verification of the second-order expansion of the perturbed
// classifier objective: E[l_CE(f(z + a v⊙e), y)] + lambda E[||f(z̄)-f(z)||²]
// equals l_CE(f(z), y) plus a² Σ_i v_i² [½ J_iᵀ H J_i + lambda ||J_i||²] up
// to O(a⁴), where J is the logit Jacobian and H the softmax-CE Hessian.
#include <cstdint>
#include <vector>

namespace sitar::theory {

// A smooth map from an m-dimensional latent to C logits, evaluated one
// example at a time. jacobian() defaults to central finite differences;
// closed-form networks override it.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::size_t latent_dim() const = 0;
  virtual std::size_t n_classes() const = 0;
  virtual std::vector<double> logits(const std::vector<double>& z) const = 0;
  // Row-major C x m matrix of d(logit_k)/d(z_i).
  virtual std::vector<double> jacobian(const std::vector<double>& z) const;
  // Row-major C x m matrix of the diagonal second derivatives
  // d²(logit_k)/d(z_i)². Defaults to central finite differences.
  virtual std::vector<double> curvature_diag(const std::vector<double>& z) const;
};

// Central-difference Jacobian (row-major C x m).
std::vector<double> jacobian_fd(const Classifier& f, const std::vector<double>& z,
                                double step = 1e-5);

struct LinearClassifier : Classifier {
  std::size_t m = 0, C = 0;
  std::vector<double> A;  // C x m
  std::vector<double> b;  // C
  std::size_t latent_dim() const override { return m; }
  std::size_t n_classes() const override { return C; }
  std::vector<double> logits(const std::vector<double>& z) const override;
  std::vector<double> jacobian(const std::vector<double>& z) const override;
};

struct TanhMlp : Classifier {
  std::size_t m = 0, hidden = 0, C = 0;
  std::vector<double> W1, b1;  // hidden x m, hidden
  std::vector<double> W2, b2;  // C x hidden, C
  static TanhMlp random(std::size_t m, std::size_t hidden, std::size_t C,
                        std::uint64_t seed);
  std::size_t latent_dim() const override { return m; }
  std::size_t n_classes() const override { return C; }
  std::vector<double> logits(const std::vector<double>& z) const override;
  std::vector<double> jacobian(const std::vector<double>& z) const override;
  std::vector<double> curvature_diag(const std::vector<double>& z) const override;
};

// Numerically stable softmax cross-entropy of one logit vector.
double ce_scalar(const std::vector<double>& logits, int y);

struct CEHessian {
  std::vector<double> H;  // C x C, diag(p) - p pᵀ
  std::vector<double> p;  // softmax probabilities
};

// Closed-form softmax-CE Hessian in logit space (independent of y).
CEHessian ce_hessian(const std::vector<double>& logits);

struct PenaltyValue {
  double direct = 0.0;    // a² Σ v_i² [½ J_iᵀ H J_i + lambda ||J_i||²]
  double factored = 0.0;  // same value via the explicit PSD factorization of H
};

// Both forms are returned and must agree to rtol 1e-12 (asserted inside).
PenaltyValue penalty_rhs(const std::vector<double>& J, std::size_t C, std::size_t m,
                         const CEHessian& H, const std::vector<double>& v,
                         double alpha, double lambda_cons);

// The exact remaining second-order term of E[l_CE(f(z + a v⊙e), y)]: for a
// nonlinear f, E[f(z+Δ) - f(z)] = (a²/2) Σ_i v_i² d²f/dz_i² + O(a⁴), and its
// inner product with the CE gradient (p - onehot(y)) is O(a²) — it vanishes
// only for linear maps. The full second-order prediction used by
// verify_scaling is penalty_rhs + mean_shift_term; omitting the shift leaves
// an O(a²) residual and the scaling exponent degrades from 4 to 2.
double mean_shift_term(const Classifier& f, const std::vector<double>& z, int y,
                       const std::vector<double>& v, double alpha);

struct McResult {
  double value = 0.0;
  double std_error = 0.0;
};

// Monte Carlo estimate of the perturbed objective minus its clean value,
// using antithetic pairs. Noise draws are keyed by (seed, sample index) only,
// so estimates across alpha values share common random numbers.
McResult mc_lhs(const Classifier& f, const std::vector<double>& z, int y,
                const std::vector<double>& v, double alpha, double lambda_cons,
                std::size_t n_samples, std::uint64_t seed);

struct ScalingPoint {
  double alpha = 0.0;
  double mc = 0.0;
  double rhs = 0.0;
  double residual = 0.0;
  double std_error = 0.0;
  bool used_in_fit = false;  // dropped when SE > 25% of the residual
};

struct ScalingReport {
  std::vector<ScalingPoint> points;
  double slope = 0.0;      // least-squares log-log slope of residual vs alpha
  bool inconclusive = false;
};

ScalingReport verify_scaling(const Classifier& f, const std::vector<double>& z,
                             int y, const std::vector<double>& v,
                             double lambda_cons,
                             const std::vector<double>& alpha_grid,
                             std::size_t n_samples, std::uint64_t seed);

}  // namespace sitar::theory
