#pragma once
// Initialization diagnostics over the model: oversmoothing profiles and
// edge-network q/c propagation probes.

#include <vector>

#include "denoise/model.hpp"

namespace denoise {

// For each message-passing step, the mean over distinct within-graph vertex
// pairs of cos(v_i, v_j). Graphs with fewer than two vertices are skipped.
std::vector<double> oversmoothing_profile(const Model& model, const ParamStore& params,
                                          const std::vector<const Structure*>& batch,
                                          const FeaturizerSpec& feat, int max_edges_per_vertex);

// Runs the processor twice on the same graph with two different random
// unit-q latent inputs and reports, per step, the mean over edges of the
// cosine between the two runs' edge features (plus the input value at
// index 0). Measures how fast distinct inputs collapse together.
std::vector<double> edge_cosine_collapse_profile(const Model& model, const ParamStore& params,
                                                 const RadiusGraph& graph, std::uint64_t seed);

// Per-step mean of |e_i|^2 / latent over edges for a random unit-q input
// (index 0 is the input itself). Measures q preservation through depth.
std::vector<double> edge_q_profile(const Model& model, const ParamStore& params,
                                   const RadiusGraph& graph, std::uint64_t seed);

// Joint probe: per step, the q of one run and the across-run c (entries
// validated against the q >= 0, |c| <= 1 invariants).
std::vector<QCState> edge_qc_profile(const Model& model, const ParamStore& params,
                                     const RadiusGraph& graph, std::uint64_t seed);

double mean_pairwise_cosine(const std::vector<double>& features, int n_rows, int dim,
                            const std::vector<int>& graph_id);

}  // namespace denoise
