#include "denoise/graph.hpp"

#include <algorithm>
#include <cmath>

namespace denoise {

std::vector<double> featurize_distance(double d, const FeaturizerSpec& spec) {
  if (spec.n_basis < 1) throw ContractViolation("featurize_distance: n_basis must be >= 1");
  if (spec.sigma <= 0) throw ContractViolation("featurize_distance: sigma must be > 0");
  std::vector<double> out(static_cast<std::size_t>(spec.n_basis));
  if (spec.kind == FeaturizerSpec::Kind::bessel) {
    if (d <= 0) throw ContractViolation("featurize_distance: bessel basis requires d > 0");
    const double norm = std::sqrt(2.0 / spec.r_cut);
    for (int k = 1; k <= spec.n_basis; ++k)
      out[static_cast<std::size_t>(k - 1)] =
          norm * std::sin(k * M_PI * (d - spec.r_min) / spec.r_cut) / d;
  } else {
    // centers evenly spaced on [mu, r_cut]; a single basis sits at mu
    const double lo = spec.mu;
    const double delta = spec.n_basis > 1 ? (spec.r_cut - lo) / (spec.n_basis - 1) : 0.0;
    const double inv2s2 = 1.0 / (2.0 * spec.sigma * spec.sigma);
    for (int k = 0; k < spec.n_basis; ++k) {
      const double mu_k = lo + delta * k;
      out[static_cast<std::size_t>(k)] = std::exp(-(d - mu_k) * (d - mu_k) * inv2s2);
    }
  }
  return out;
}

namespace {

struct EdgeCand {
  double dist;
  int sender;
};

void append_structure_edges(const Structure& s, const FeaturizerSpec& spec,
                            int max_edges_per_vertex, int vertex_offset, RadiusGraph* g) {
  const int n = s.n_atoms();
  std::vector<EdgeCand> incoming;
  for (int recv = 0; recv < n; ++recv) {
    incoming.clear();
    const double* pr = s.pos(recv);
    for (int send = 0; send < n; ++send) {
      if (send == recv) continue;
      const double* ps = s.pos(send);
      const double dx = pr[0] - ps[0];
      const double dy = pr[1] - ps[1];
      const double dz = pr[2] - ps[2];
      const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
      if (dist < g->r_cut) incoming.push_back({dist, send});
    }
    if (static_cast<int>(incoming.size()) > max_edges_per_vertex) {
      std::stable_sort(incoming.begin(), incoming.end(), [](const EdgeCand& a, const EdgeCand& b) {
        if (a.dist != b.dist) return a.dist < b.dist;
        return a.sender < b.sender;
      });
      incoming.resize(static_cast<std::size_t>(max_edges_per_vertex));
      std::sort(incoming.begin(), incoming.end(),
                [](const EdgeCand& a, const EdgeCand& b) { return a.sender < b.sender; });
    }
    for (const EdgeCand& e : incoming) {
      g->senders.push_back(vertex_offset + e.sender);
      g->receivers.push_back(vertex_offset + recv);
      const double* ps = s.pos(e.sender);
      g->displacement.push_back(pr[0] - ps[0]);
      g->displacement.push_back(pr[1] - ps[1]);
      g->displacement.push_back(pr[2] - ps[2]);
      g->edge_length.push_back(e.dist);
      const auto feat = featurize_distance(e.dist, spec);
      g->edge_feat.insert(g->edge_feat.end(), feat.begin(), feat.end());
    }
  }
}

}  // namespace

RadiusGraph build_graph(const Structure& s, const FeaturizerSpec& spec, int max_edges_per_vertex) {
  return build_batch_graph({&s}, spec, max_edges_per_vertex);
}

RadiusGraph build_batch_graph(const std::vector<const Structure*>& batch,
                              const FeaturizerSpec& spec, int max_edges_per_vertex) {
  if (spec.r_cut <= 0) throw ContractViolation("build_graph: r_cut must be > 0");
  if (max_edges_per_vertex < 1)
    throw ContractViolation("build_graph: max_edges_per_vertex must be >= 1");
  RadiusGraph g;
  g.r_cut = spec.r_cut;
  g.n_graphs = static_cast<int>(batch.size());
  int offset = 0;
  for (int i = 0; i < g.n_graphs; ++i) {
    const Structure& s = *batch[static_cast<std::size_t>(i)];
    append_structure_edges(s, spec, max_edges_per_vertex, offset, &g);
    for (int v = 0; v < s.n_atoms(); ++v) g.graph_id.push_back(i);
    offset += s.n_atoms();
  }
  g.n_vertices = offset;
  return g;
}

}  // namespace denoise
