#include "denoise/objectives.hpp"

#include <cmath>

#include "denoise/model.hpp"

namespace denoise {

CorruptResult corrupt(const Structure& s, const NoiseSpec& spec, RandomStream& rng) {
  spec.validate();
  const int n = s.n_atoms();
  CorruptResult out;
  out.target.resize(3 * static_cast<std::size_t>(n));
  for (double& v : out.target) v = spec.sigma == 0.0 ? 0.0 : rng.gauss();
  if (spec.mean_center && n > 0) {
    for (int c = 0; c < 3; ++c) {
      double m = 0.0;
      for (int i = 0; i < n; ++i) m += out.target[3 * static_cast<std::size_t>(i) + c];
      m /= n;
      for (int i = 0; i < n; ++i) out.target[3 * static_cast<std::size_t>(i) + c] -= m;
    }
  }
  out.noisy = s;
  for (std::size_t k = 0; k < out.target.size(); ++k)
    out.noisy.positions[k] = s.positions[k] + spec.sigma * out.target[k];
  return out;
}

MaskResult apply_type_mask(const std::vector<int>& atomic_numbers, double prob,
                           RandomStream& rng) {
  if (prob < 0 || prob > 1) throw ContractViolation("apply_type_mask: prob must lie in [0,1]");
  MaskResult out;
  out.embed_index.reserve(atomic_numbers.size());
  for (std::size_t i = 0; i < atomic_numbers.size(); ++i) {
    const int z = atomic_numbers[i];
    if (z < 1 || z > kTypeClasses)
      throw ContractViolation("apply_type_mask: atomic number out of range");
    const bool masked = prob > 0.0 && rng.uniform() < prob;
    out.embed_index.push_back(masked ? kMaskToken : z);
    if (masked) {
      out.masked_position.push_back(static_cast<int>(i));
      out.masked_class.push_back(z - 1);
    }
  }
  return out;
}

Tensor denoising_loss(Tape& tape, Tensor pred, Tensor target, const std::vector<int>& graph_id,
                      int n_graphs) {
  if (pred.shape() != target.shape())
    throw ContractViolation("denoising_loss: pred/target shape mismatch " +
                            shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  Tensor sq = tape.square(tape.sub(pred, target));           // [N,3]
  Tensor per_atom = tape.reshape(tape.row_sum(sq), {pred.rows(), 1});
  Tensor per_graph = tape.segment_mean(per_atom, graph_id, n_graphs);  // [B,1]
  return tape.mean(per_graph);
}

double denoising_loss_value(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.size() != target.size() || pred.size() % 3 != 0)
    throw ContractViolation("denoising_loss_value: bad sizes");
  const int n = static_cast<int>(pred.size() / 3);
  double s = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) s += (pred[k] - target[k]) * (pred[k] - target[k]);
  return s / n;
}

NoisyNodesTerms noisy_nodes_loss(Tape& tape, Tensor graph_pred,
                                 const std::vector<double>& graph_target, Tensor vertex_pred,
                                 Tensor eps_target, const std::vector<int>& graph_id, int n_graphs,
                                 Tensor type_logits, const MaskResult& mask,
                                 const LossWeights& w) {
  w.validate();
  NoisyNodesTerms out;
  Tensor total = tape.scalar(0.0);

  if (w.position_coeff > 0.0) {
    Tensor pos = denoising_loss(tape, vertex_pred, eps_target, graph_id, n_graphs);
    out.position = pos.scalar();
    total = tape.add(total, tape.affine(pos, w.position_coeff, 0.0));
  }
  if (w.target_coeff > 0.0) {
    if (static_cast<int>(graph_target.size()) != n_graphs)
      throw ContractViolation("noisy_nodes_loss: graph target size mismatch");
    Tensor tgt = tape.constant({n_graphs}, graph_target);
    Tensor mse = tape.mean(tape.square(tape.sub(graph_pred, tgt)));
    out.target = mse.scalar();
    total = tape.add(total, tape.affine(mse, w.target_coeff, 0.0));
  }
  if (w.atom_type_coeff > 0.0 && !mask.masked_position.empty()) {
    Tensor at_masked = tape.gather_rows(type_logits, mask.masked_position);
    Tensor ce = tape.mean(
        tape.reshape(tape.softmax_cross_entropy(at_masked, mask.masked_class),
                     {static_cast<int>(mask.masked_position.size()), 1}));
    out.atom_type = ce.scalar();
    total = tape.add(total, tape.affine(ce, w.atom_type_coeff, 0.0));
  }
  out.total = total;
  return out;
}

InterpolateResult interpolate_corrupt(const Structure& initial, const Structure& relaxed,
                                      double sigma, RandomStream& rng) {
  if (initial.atomic_numbers != relaxed.atomic_numbers)
    throw ContractViolation("interpolate_corrupt: structures have different atoms");
  if (initial.positions.size() != relaxed.positions.size())
    throw ContractViolation("interpolate_corrupt: position size mismatch");
  const double u = rng.uniform();
  InterpolateResult out;
  out.input = initial;
  out.target.resize(initial.positions.size());
  for (std::size_t k = 0; k < initial.positions.size(); ++k) {
    const double eps = sigma == 0.0 ? 0.0 : rng.gauss();
    out.input.positions[k] =
        (1.0 - u) * initial.positions[k] + u * relaxed.positions[k] + sigma * eps;
    out.target[k] = relaxed.positions[k] - out.input.positions[k];
  }
  return out;
}

}  // namespace denoise
