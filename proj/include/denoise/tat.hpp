#pragma once
// Initialization-time q/c-value machinery for the GNS-TAT variant:
// the leaky-ReLU cosine map, its composition along the edge network,
// and the negative-slope solve.

#include <cmath>
#include <cstdint>

#include "denoise/common.hpp"

namespace denoise {

// Weighted-shortcut coefficients: new = 0.9 * old + sqrt(1 - 0.9^2) * branch.
constexpr double kShortcutWeight = 0.9;
inline double shortcut_branch_weight() { return std::sqrt(1.0 - kShortcutWeight * kShortcutWeight); }

// Transformed leaky-ReLU used by the GNS-TAT variant:
//   phi(x) = output_scale * lrelu_alpha(x) + output_shift,
// with scale/shift chosen so that for u ~ N(0,1), E[phi(u)] = 0 and
// E[phi(u)^2] = 1.
struct TailoredActivation {
  double negative_slope = 1.0;
  double output_scale = 1.0;
  double output_shift = 0.0;
  double eta = 0.8;

  double operator()(double x) const {
    const double l = x >= 0.0 ? x : negative_slope * x;
    return output_scale * l + output_shift;
  }
};

// One point of the initialization-time signal propagation: q is the
// dimension-normalized squared activation norm, c the cosine similarity of
// the activation vectors for two network inputs.
struct QCState {
  double q = 1.0;
  double c = 0.0;

  void validate() const {
    if (q < 0.0) throw ContractViolation("QCState: q must be >= 0");
    if (std::abs(c) > 1.0 + 1e-12) throw ContractViolation("QCState: |c| must be <= 1");
  }
};

// Closed-form scale/shift making the leaky-ReLU q-preserving and centered.
TailoredActivation make_tailored_activation(double alpha, double eta);

// Gaussian-expectation cosine map of the normalized (variance-1, uncentered)
// leaky-ReLU:
//   C(c) = c + ((1-a)^2/(1+a^2)) * (sqrt(1-c^2) - c*acos(c)) / pi.
double cmap_lrelu(double c, double alpha);

// Composes cmap_lrelu along the deepest edge-network path: each of the
// `n_blocks` residual blocks applies the map `mlp_layers` times on its
// branch, then mixes with the shortcut as 0.9^2 * c_in + (1-0.9^2) * c_branch.
double network_cmap(int mlp_layers, int n_blocks, double alpha, double c);

// Solves network_cmap(..., alpha)(0) = eta for alpha in (0,1) by bisection,
// to |residual| < 1e-10. Throws ContractViolation when no root is bracketed,
// reporting the achievable endpoint values.
TailoredActivation solve_tat_slope(int mlp_layers, int n_blocks, double eta);

}  // namespace denoise
