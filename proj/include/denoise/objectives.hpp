#pragma once
// Training objectives: coordinate noising, the denoising loss, atom-type
// masking, the combined auxiliary ("noisy nodes") loss, and the
// interpolation-based variant for trajectory data.

#include <vector>

#include "denoise/common.hpp"
#include "denoise/dataio.hpp"
#include "denoise/tensor.hpp"

namespace denoise {

struct NoiseSpec {
  double sigma = 0.0;
  bool mean_center = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (sigma < 0) throw ContractViolation("NoiseSpec: sigma must be >= 0");
  }
};

struct LossWeights {
  double position_coeff = 1.0;
  double target_coeff = 0.0;
  double atom_type_coeff = 0.0;
  double atom_mask_prob = 0.0;

  void validate() const {
    if (position_coeff < 0 || target_coeff < 0 || atom_type_coeff < 0)
      throw ContractViolation("LossWeights: coefficients must be >= 0");
    if (position_coeff == 0 && target_coeff == 0 && atom_type_coeff == 0)
      throw ContractViolation("LossWeights: at least one coefficient must be positive");
    if (atom_mask_prob < 0 || atom_mask_prob > 1)
      throw ContractViolation("LossWeights: atom_mask_prob must lie in [0,1]");
  }
};

struct CorruptResult {
  Structure noisy;
  std::vector<double> target;  // n_atoms x 3, the (possibly centered) epsilon
};

// p~ = p + sigma * eps with eps ~ N(0, I); when mean_center is set, eps is
// projected to zero per-structure mean first and the same centered noise is
// what gets added, so target + (p~ - p)/sigma stays consistent.
CorruptResult corrupt(const Structure& s, const NoiseSpec& spec, RandomStream& rng);

struct MaskResult {
  std::vector<int> embed_index;      // per atom: atomic number or mask token
  std::vector<int> masked_position;  // indices of masked atoms
  std::vector<int> masked_class;     // true class (z-1) at those positions
};

// Bernoulli(prob) per atom; masked atoms keep their positions, only the
// type embedding is replaced.
MaskResult apply_type_mask(const std::vector<int>& atomic_numbers, double prob,
                           RandomStream& rng);

// Mean over atoms of the squared error (summed over the 3 coordinates),
// averaged per structure and then over the batch.
Tensor denoising_loss(Tape& tape, Tensor pred, Tensor target, const std::vector<int>& graph_id,
                      int n_graphs);

// Plain-number convenience for single structures (used by tests/oracles).
double denoising_loss_value(const std::vector<double>& pred, const std::vector<double>& target);

struct NoisyNodesTerms {
  Tensor total;
  double position = 0.0;  // unweighted term values
  double target = 0.0;
  double atom_type = 0.0;
};

// w.target * MSE(graph_pred, graph_target) + w.position * denoising loss +
// w.atom_type * cross-entropy at the masked positions. Terms whose weight is
// zero are skipped entirely (so e.g. pre-training needs no labels).
NoisyNodesTerms noisy_nodes_loss(Tape& tape, Tensor graph_pred, const std::vector<double>& graph_target,
                                 Tensor vertex_pred, Tensor eps_target,
                                 const std::vector<int>& graph_id, int n_graphs,
                                 Tensor type_logits, const MaskResult& mask,
                                 const LossWeights& w);

struct InterpolateResult {
  Structure input;
  std::vector<double> target;  // per-atom displacement to the relaxed frame
};

// input = (1-u) * p_initial + u * p_relaxed + sigma * eps with u ~ U[0,1]
// per structure; target = p_relaxed - input positions.
InterpolateResult interpolate_corrupt(const Structure& initial, const Structure& relaxed,
                                      double sigma, RandomStream& rng);

}  // namespace denoise
