#include "denoise/tat.hpp"

#include <cmath>
#include <string>

#include "denoise/diagnostics.hpp"

namespace denoise {

TailoredActivation make_tailored_activation(double alpha, double eta) {
  // For u ~ N(0,1): E[lrelu(u)] = (1-a)/sqrt(2*pi), E[lrelu(u)^2] = (1+a^2)/2.
  const double m = (1.0 - alpha) / std::sqrt(2.0 * M_PI);
  const double second = (1.0 + alpha * alpha) / 2.0;
  const double scale = 1.0 / std::sqrt(second - m * m);
  TailoredActivation act;
  act.negative_slope = alpha;
  act.output_scale = scale;
  act.output_shift = -scale * m;
  act.eta = eta;
  return act;
}

double cmap_lrelu(double c, double alpha) {
  if (std::abs(c) > 1.0 + 1e-12)
    throw ContractViolation("cmap_lrelu: |c| = " + std::to_string(std::abs(c)) + " > 1");
  c = std::min(1.0, std::max(-1.0, c));
  const double coef = (1.0 - alpha) * (1.0 - alpha) / (1.0 + alpha * alpha);
  return c + coef * (std::sqrt(std::max(0.0, 1.0 - c * c)) - c * std::acos(c)) / M_PI;
}

double network_cmap(int mlp_layers, int n_blocks, double alpha, double c) {
  const double ws2 = kShortcutWeight * kShortcutWeight;
  double cur = c;
  for (int b = 0; b < n_blocks; ++b) {
    double branch = cur;
    for (int l = 0; l < mlp_layers; ++l) branch = cmap_lrelu(branch, alpha);
    cur = ws2 * cur + (1.0 - ws2) * branch;
  }
  return cur;
}

TailoredActivation solve_tat_slope(int mlp_layers, int n_blocks, double eta) {
  if (eta <= 0.0 || eta >= 1.0)
    throw ContractViolation("solve_tat_slope: eta must lie in (0,1), got " + std::to_string(eta));
  if (mlp_layers < 0 || n_blocks < 0)
    throw ContractViolation("solve_tat_slope: negative depth");

  auto f = [&](double alpha) { return network_cmap(mlp_layers, n_blocks, alpha, 0.0) - eta; };

  double lo = 1e-9, hi = 1.0 - 1e-12;
  const double flo = f(lo);  // largest achievable drift
  const double fhi = f(hi);  // ~ -eta (identity map)
  if (!(flo >= 0.0 && fhi <= 0.0))
    throw ContractViolation(
        "solve_tat_slope: no root bracketed for eta=" + std::to_string(eta) +
        " at depth " + std::to_string(mlp_layers * n_blocks) + "; C_net(0) spans [" +
        std::to_string(fhi + eta) + ", " + std::to_string(flo + eta) + "]");

  double alpha = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    alpha = 0.5 * (lo + hi);
    const double fm = f(alpha);
    if (std::abs(fm) < 1e-10 && it > 40) break;
    if (fm > 0.0)
      lo = alpha;  // too much drift: increase alpha
    else
      hi = alpha;
  }
  if (std::abs(f(alpha)) >= 1e-10)
    throw ContractViolation("solve_tat_slope: bisection failed to reach 1e-10 residual");
  return make_tailored_activation(alpha, eta);
}

double mean_pairwise_cosine(const std::vector<double>& features, int n_rows, int dim,
                            const std::vector<int>& graph_id) {
  double acc = 0.0;
  std::int64_t pairs = 0;
  for (int i = 0; i < n_rows; ++i) {
    for (int j = i + 1; j < n_rows; ++j) {
      if (graph_id[static_cast<std::size_t>(i)] != graph_id[static_cast<std::size_t>(j)]) continue;
      const double* a = features.data() + static_cast<std::size_t>(i) * dim;
      const double* b = features.data() + static_cast<std::size_t>(j) * dim;
      double dot = 0, na = 0, nb = 0;
      for (int k = 0; k < dim; ++k) {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
      }
      const double denom = std::sqrt(na * nb);
      if (denom > 0.0) {
        acc += dot / denom;
        ++pairs;
      }
    }
  }
  return pairs ? acc / static_cast<double>(pairs) : 0.0;
}

std::vector<double> oversmoothing_profile(const Model& model, const ParamStore& params,
                                          const std::vector<const Structure*>& batch,
                                          const FeaturizerSpec& feat, int max_edges_per_vertex) {
  RadiusGraph graph = build_batch_graph(batch, feat, max_edges_per_vertex);
  std::vector<int> embed_index;
  embed_index.reserve(static_cast<std::size_t>(graph.n_vertices));
  for (const Structure* s : batch)
    for (int z : s->atomic_numbers) embed_index.push_back(z);

  Tape tape;
  BoundParams bp = bind_params(tape, params);
  ForwardTrace trace;
  forward(tape, model, bp, graph, embed_index, &trace);

  std::vector<double> out;
  out.reserve(trace.vertex_feat.size());
  for (const auto& step : trace.vertex_feat)
    out.push_back(
        mean_pairwise_cosine(step, graph.n_vertices, model.config.latent, graph.graph_id));
  return out;
}

namespace {

// Runs the processor on a synthetic latent state (unit-q Gaussian edge and
// vertex features) and returns per-step edge snapshots, input included.
std::vector<std::vector<double>> processor_edge_snapshots(const Model& model,
                                                          const ParamStore& params,
                                                          const RadiusGraph& graph,
                                                          std::uint64_t seed) {
  const int latent = model.config.latent;
  RandomStream rng(seed);
  std::vector<double> e0(static_cast<std::size_t>(graph.n_edges()) * latent);
  std::vector<double> v0(static_cast<std::size_t>(graph.n_vertices) * latent);
  for (double& x : e0) x = rng.gauss();
  for (double& x : v0) x = rng.gauss();

  Tape tape;
  BoundParams bp = bind_params(tape, params);
  GraphState state{tape.constant({graph.n_edges(), latent}, e0),
                   tape.constant({graph.n_vertices, latent}, v0)};
  std::vector<std::vector<double>> snaps;
  snaps.push_back(e0);
  for (int b = 0; b < model.config.n_block_iterations; ++b) {
    for (int t = 0; t < model.config.n_mp_layers; ++t) {
      state = processor_step(tape, model, bp, t, state, graph);
      snaps.push_back(state.edge.value());
    }
  }
  return snaps;
}

}  // namespace

std::vector<double> edge_cosine_collapse_profile(const Model& model, const ParamStore& params,
                                                 const RadiusGraph& graph, std::uint64_t seed) {
  auto a = processor_edge_snapshots(model, params, graph, derive_seed(seed, 1));
  auto b = processor_edge_snapshots(model, params, graph, derive_seed(seed, 2));
  const int latent = model.config.latent;
  std::vector<double> out;
  out.reserve(a.size());
  for (std::size_t s = 0; s < a.size(); ++s) {
    double acc = 0.0;
    int cnt = 0;
    for (int e = 0; e < graph.n_edges(); ++e) {
      const double* x = a[s].data() + static_cast<std::size_t>(e) * latent;
      const double* y = b[s].data() + static_cast<std::size_t>(e) * latent;
      double dot = 0, nx = 0, ny = 0;
      for (int k = 0; k < latent; ++k) {
        dot += x[k] * y[k];
        nx += x[k] * x[k];
        ny += y[k] * y[k];
      }
      if (nx > 0 && ny > 0) {
        acc += dot / std::sqrt(nx * ny);
        ++cnt;
      }
    }
    out.push_back(cnt ? acc / cnt : 0.0);
  }
  return out;
}

std::vector<QCState> edge_qc_profile(const Model& model, const ParamStore& params,
                                     const RadiusGraph& graph, std::uint64_t seed) {
  const std::vector<double> q = edge_q_profile(model, params, graph, seed);
  const std::vector<double> c = edge_cosine_collapse_profile(model, params, graph, seed);
  std::vector<QCState> out(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    out[i].q = q[i];
    out[i].c = std::min(1.0, std::max(-1.0, c[i]));
    out[i].validate();
  }
  return out;
}

std::vector<double> edge_q_profile(const Model& model, const ParamStore& params,
                                   const RadiusGraph& graph, std::uint64_t seed) {
  auto snaps = processor_edge_snapshots(model, params, graph, derive_seed(seed, 3));
  const int latent = model.config.latent;
  std::vector<double> out;
  out.reserve(snaps.size());
  for (const auto& s : snaps) {
    double acc = 0.0;
    for (int e = 0; e < graph.n_edges(); ++e) {
      const double* x = s.data() + static_cast<std::size_t>(e) * latent;
      double nx = 0;
      for (int k = 0; k < latent; ++k) nx += x[k] * x[k];
      acc += nx / latent;
    }
    out.push_back(graph.n_edges() ? acc / graph.n_edges() : 0.0);
  }
  return out;
}

}  // namespace denoise

