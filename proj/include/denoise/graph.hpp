#pragma once
// Radius-graph construction and distance featurization: the encoder's
// geometric front end. Graph building is pure geometry (no tape); the
// featurized edge matrix feeds the network as a constant.

#include <vector>

#include "denoise/common.hpp"
#include "denoise/dataio.hpp"

namespace denoise {

struct FeaturizerSpec {
  enum class Kind { bessel, gaussian };
  Kind kind = Kind::bessel;
  int n_basis = 8;
  double r_cut = 3.0;
  // bessel parameters (Table-style defaults r_min=0, sigma=1)
  double r_min = 0.0;
  double sigma = 1.0;
  // gaussian: centers evenly spaced on [mu, r_cut]
  double mu = 0.0;
};

// b_k(d) = sqrt(2/r_cut) * sin(k*pi*(d - r_min)/r_cut) / d  (spherical
// Bessel j0 radial basis), or g_k(d) = exp(-(d - mu_k)^2 / (2 sigma^2)).
std::vector<double> featurize_distance(double d, const FeaturizerSpec& spec);

// Directed radius graph over one or more structures packed into a batch.
// Vertices of structure g are offset so the batch is one disjoint graph
// union; graph_id maps each vertex back to its structure.
struct RadiusGraph {
  std::vector<int> senders;
  std::vector<int> receivers;
  std::vector<double> edge_feat;     // n_edges x n_basis, row-major
  std::vector<double> displacement;  // n_edges x 3, p_recv - p_send
  std::vector<double> edge_length;   // n_edges
  std::vector<int> graph_id;         // per vertex
  int n_vertices = 0;
  int n_graphs = 0;
  double r_cut = 0.0;

  int n_edges() const { return static_cast<int>(senders.size()); }
};

// All ordered pairs closer than r_cut become directed edges; a receiver
// keeps only its max_edges_per_vertex nearest senders (ties break toward
// the lower sender index). Edges are ordered by (receiver, sender).
RadiusGraph build_graph(const Structure& s, const FeaturizerSpec& spec, int max_edges_per_vertex);

// Batched build: per-structure graphs with index offsets applied.
RadiusGraph build_batch_graph(const std::vector<const Structure*>& batch,
                              const FeaturizerSpec& spec, int max_edges_per_vertex);

}  // namespace denoise
