#pragma once
// Analytic Gaussian-mixture score over the mean-centered subspace, and the
// numerical check that the score-matching and denoising objectives have
// equal gradients.

#include <cstdint>
#include <vector>

#include "denoise/common.hpp"

namespace denoise {

// Mixture of isotropic Gaussians on V = {x in R^{3N} : sum_i x^(i) = 0},
// centered at mean-centered structures x_1..x_n (flattened 3N-vectors).
struct MixtureModel {
  std::vector<std::vector<double>> centers;
  double sigma = 0.1;
  int n_atoms = 0;

  int dim() const { return 3 * n_atoms; }
  int subspace_dim() const { return 3 * n_atoms - 3; }
  void validate() const;  // centers nonempty, same size, mean-centered, sigma > 0
};

// Subtracts the per-axis mean over atoms; idempotent, equals P_V P_V^T.
std::vector<double> project_mean_center(const std::vector<double>& x);

bool is_mean_centered(const std::vector<double>& x, double tol = 1e-9);

// log q_sigma(x~) with the (2 pi sigma^2)^{(3N-3)/2} subspace normalizer,
// evaluated by log-sum-exp.
double log_mixture_density(const MixtureModel& m, const std::vector<double>& x);

// Softmax weights w_i(x~) proportional to exp(-|x~ - x_i|^2 / (2 sigma^2)).
std::vector<double> mixture_weights(const MixtureModel& m, const std::vector<double>& x);

// grad log q = sum_i w_i (x_i - x~) / sigma^2; throws when x~ is not
// mean-centered; the result lies in V.
std::vector<double> mixture_score(const MixtureModel& m, const std::vector<double>& x);

// Draws x~ by picking a center uniformly and adding sigma * (projected
// standard normal); the projected Gaussian is exactly the isotropic law
// on V. Returns the chosen center index.
int sample_mixture(const MixtureModel& m, RandomStream& rng, std::vector<double>* out);

struct GradientGapResult {
  double gap = 0.0;           // max_j |dJ1 - dJ2| / (|dJ2|/sqrt(P) + 1e-12)
  double gap_se = 0.0;        // Monte-Carlo standard error of that numerator,
                              // same normalization (batch means, 10 chunks)
  double grad_norm_j2 = 0.0;  // |dJ2|
  std::int64_t n_params = 0;
  std::int64_t n_samples = 0;
};

// Estimates grad_theta J1 (mixture score as regression target) and
// grad_theta J2 (denoising target (x - x~)/sigma^2) for a small two-layer
// network on flattened coordinates, using the same sampled (x, x~) pairs
// for both objectives.
GradientGapResult j1_j2_gradient_gap(const MixtureModel& m, std::int64_t n_samples,
                                     std::uint64_t seed, int hidden = 16);

// Random mean-centered mixture instance: centers drawn N(0, center_scale^2)
// per coordinate. The default puts neighboring components a few sigma apart,
// so posterior weights genuinely mix and the gradient-gap estimate is a
// statistical statement rather than an exact-cancellation one.
MixtureModel random_mixture(int n_centers, int n_atoms, double sigma, std::uint64_t seed,
                            double center_scale = -1.0 /* -1: use 1.5 * sigma */);

}  // namespace denoise
