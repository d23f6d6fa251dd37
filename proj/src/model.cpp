#include "denoise/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace denoise {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string step_prefix(int step) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "proc/t%02d", step);
  return buf;
}

// Widths of the linear layers of one MLP: in -> hidden^n -> out.
struct MlpDims {
  int in, hidden, n_hidden, out;
  int n_layers() const { return n_hidden + 1; }
  int layer_in(int l) const { return l == 0 ? in : hidden; }
  int layer_out(int l) const { return l == n_hidden ? out : hidden; }
};

void add_mlp(ParamStore* ps, const std::string& prefix, MlpDims dims, bool backbone) {
  for (int l = 0; l < dims.n_layers(); ++l) {
    Param w;
    w.shape = {dims.layer_in(l), dims.layer_out(l)};
    w.init_scheme = "gaussian_fanin";
    w.backbone = backbone;
    ps->add(prefix + "/w" + std::to_string(l), std::move(w));
    Param b;
    b.shape = {dims.layer_out(l)};
    b.init_scheme = "zeros";
    b.backbone = backbone;
    ps->add(prefix + "/b" + std::to_string(l), std::move(b));
  }
}

void add_layer_norm(ParamStore* ps, const std::string& prefix, int dim, bool backbone) {
  Param g;
  g.shape = {dim};
  g.init_scheme = "ones";
  g.backbone = backbone;
  ps->add(prefix + "_g", std::move(g));
  Param b;
  b.shape = {dim};
  b.init_scheme = "zeros";
  b.backbone = backbone;
  ps->add(prefix + "_b", std::move(b));
}

Tensor activation_apply(Tape& tape, const Model& model, Tensor x) {
  if (model.config.variant == Variant::gns) return tape.shifted_softplus(x);
  const TailoredActivation& act = *model.act;
  return tape.affine(tape.leaky_relu(x, act.negative_slope), act.output_scale, act.output_shift);
}

Tensor mlp_apply(Tape& tape, const Model& model, const BoundParams& bp,
                 const std::string& prefix, Tensor x, int n_hidden) {
  Tensor h = x;
  for (int l = 0; l <= n_hidden; ++l) {
    h = tape.add_bias(tape.matmul(h, bp.at(prefix + "/w" + std::to_string(l))),
                      bp.at(prefix + "/b" + std::to_string(l)));
    if (l < n_hidden) h = activation_apply(tape, model, h);
  }
  return h;
}

Tensor layer_norm_apply(Tape& tape, const BoundParams& bp, const std::string& prefix, Tensor x) {
  return tape.layer_norm(x, bp.at(prefix + "_g"), bp.at(prefix + "_b"));
}

}  // namespace

void GNSConfig::validate() const {
  if (n_mp_layers < 1 || n_block_iterations < 1 || latent < 1 || mlp_hidden < 1 ||
      mlp_layers < 1 || decoder_mlp_layers < 1 || edge_feat_dim < 1)
    throw ContractViolation("GNSConfig: all counts must be >= 1");
  if (variant == Variant::gns_tat && decoder_aggregation != Aggregation::mean)
    throw ContractViolation("GNSConfig: the gns_tat variant requires mean decoder aggregation");
  if (variant == Variant::gns_tat && (tat_eta <= 0.0 || tat_eta >= 1.0))
    throw ContractViolation("GNSConfig: tat_eta must lie in (0,1)");
}

void ParamStore::add(const std::string& name, Param p) {
  if (store_.count(name)) throw ContractViolation("ParamStore: duplicate name '" + name + "'");
  if (numel(p.shape) != static_cast<std::int64_t>(p.value.size()) && !p.value.empty())
    throw ContractViolation("ParamStore: value size mismatch for '" + name + "'");
  store_.emplace(name, std::move(p));
}

Param& ParamStore::at(const std::string& name) {
  auto it = store_.find(name);
  if (it == store_.end()) throw ContractViolation("ParamStore: unknown parameter '" + name + "'");
  return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = store_.find(name);
  if (it == store_.end()) throw ContractViolation("ParamStore: unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(store_.size());
  for (const auto& [k, v] : store_) out.push_back(k);
  return out;
}

std::int64_t ParamStore::n_scalars() const {
  std::int64_t n = 0;
  for (const auto& [k, v] : store_) n += numel(v.shape);
  return n;
}

Model Model::create(const GNSConfig& config) {
  config.validate();
  Model m;
  m.config = config;
  if (config.variant == Variant::gns_tat)
    m.act = solve_tat_slope(config.mlp_layers, config.residual_blocks(), config.tat_eta);
  return m;
}

ParamStore init_params(const Model& model, std::uint64_t seed) {
  const GNSConfig& c = model.config;
  c.validate();
  ParamStore ps;

  Param embed;
  embed.shape = {kEmbedRows, c.latent};
  embed.init_scheme = "embedding_normal";
  ps.add("embed/atoms", std::move(embed));

  add_mlp(&ps, "enc/edge", {c.edge_feat_dim, c.mlp_hidden, c.mlp_layers, c.latent}, true);
  add_layer_norm(&ps, "enc/edge/ln", c.latent, true);

  for (int t = 0; t < c.n_mp_layers; ++t) {
    const std::string p = step_prefix(t);
    add_mlp(&ps, p + "/edge", {3 * c.latent, c.mlp_hidden, c.mlp_layers, c.latent}, true);
    add_mlp(&ps, p + "/vertex", {2 * c.latent, c.mlp_hidden, c.mlp_layers, c.latent}, true);
    if (c.variant == Variant::gns) {
      // layer norm after each update MLP
      add_layer_norm(&ps, p + "/edge/ln", c.latent, true);
      add_layer_norm(&ps, p + "/vertex/ln", c.latent, true);
    } else {
      // layer norm moved before the first fully-connected layer, applied to
      // each input part separately so the Edge-Delta path stays exactly
      // independent of vertex features at init
      add_layer_norm(&ps, p + "/edge/pre_ln0", c.latent, true);
      add_layer_norm(&ps, p + "/edge/pre_ln1", c.latent, true);
      add_layer_norm(&ps, p + "/edge/pre_ln2", c.latent, true);
      add_layer_norm(&ps, p + "/vertex/pre_ln0", c.latent, true);
      add_layer_norm(&ps, p + "/vertex/pre_ln1", c.latent, true);
    }
  }

  add_mlp(&ps, "dec/noise", {c.latent, c.mlp_hidden, c.decoder_mlp_layers, 3}, false);
  add_mlp(&ps, "dec/type", {c.latent, c.mlp_hidden, c.decoder_mlp_layers, kTypeClasses}, false);
  add_mlp(&ps, "dec/graph_pre", {c.latent, c.mlp_hidden, c.decoder_mlp_layers, c.latent}, false);
  add_mlp(&ps, "dec/graph_post", {c.latent, c.mlp_hidden, c.decoder_mlp_layers, 1}, false);

  // fill values; each tensor gets its own stream keyed by name
  for (auto& [name, p] : ps) {
    const std::int64_t n = numel(p.shape);
    p.value.assign(static_cast<std::size_t>(n), 0.0);
    if (p.init_scheme == "zeros") continue;
    RandomStream rng(derive_seed(seed, fnv1a(name)));
    if (p.init_scheme == "ones") {
      std::fill(p.value.begin(), p.value.end(), 1.0);
    } else if (p.init_scheme == "embedding_normal") {
      for (double& v : p.value) v = rng.gauss();
    } else if (p.init_scheme == "gaussian_fanin") {
      const double std_dev = 1.0 / std::sqrt(static_cast<double>(p.shape[0]));
      for (double& v : p.value) v = std_dev * rng.gauss();
    }
  }

  if (c.variant == Variant::gns_tat) edge_delta_init(ps, c, seed);
  return ps;
}

void edge_delta_init(ParamStore& params, const GNSConfig& config, std::uint64_t seed) {
  const int latent = config.latent;
  for (int t = 0; t < config.n_mp_layers; ++t) {
    const std::string name = step_prefix(t) + "/edge/w0";
    Param& w = params.at(name);
    if (w.shape != Shape{3 * latent, config.mlp_hidden})
      throw ContractViolation("edge_delta_init: unexpected shape for " + name);
    RandomStream rng(derive_seed(seed, fnv1a(name + "#delta")));
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(latent));  // edge block fan-in only
    for (int r = 0; r < 3 * latent; ++r)
      for (int col = 0; col < config.mlp_hidden; ++col)
        w.value[static_cast<std::size_t>(r) * config.mlp_hidden + col] =
            r < latent ? std_dev * rng.gauss() : 0.0;
    w.init_scheme = "edge_delta";
    params.at(step_prefix(t) + "/edge/b0").value.assign(static_cast<std::size_t>(config.mlp_hidden),
                                                        0.0);
  }
}

BoundParams bind_params(Tape& tape, const ParamStore& params) {
  BoundParams bp;
  for (const auto& [name, p] : params) {
    Tensor t = tape.input(p.shape, p.value);
    bp.names.push_back(name);
    bp.tensors.push_back(t);
    bp.by_name.emplace(name, t);
  }
  return bp;
}

Tensor BoundParams::at(const std::string& name) const {
  auto it = by_name.find(name);
  if (it == by_name.end())
    throw ContractViolation("BoundParams: unknown parameter '" + name + "'");
  return it->second;
}

Tensor edge_update(Tape& tape, const Model& model, const BoundParams& bp, int step,
                   Tensor edge, Tensor sender_feat, Tensor receiver_feat) {
  const std::string p = step_prefix(step);
  if (model.config.variant == Variant::gns) {
    Tensor cat = tape.concat_cols({edge, sender_feat, receiver_feat});
    return layer_norm_apply(tape, bp, p + "/edge/ln",
                            mlp_apply(tape, model, bp, p + "/edge", cat, model.config.mlp_layers));
  }
  Tensor cat = tape.concat_cols({layer_norm_apply(tape, bp, p + "/edge/pre_ln0", edge),
                                 layer_norm_apply(tape, bp, p + "/edge/pre_ln1", sender_feat),
                                 layer_norm_apply(tape, bp, p + "/edge/pre_ln2", receiver_feat)});
  return mlp_apply(tape, model, bp, p + "/edge", cat, model.config.mlp_layers);
}

Tensor vertex_update(Tape& tape, const Model& model, const BoundParams& bp, int step,
                     Tensor vertex, Tensor aggregated_incoming) {
  const std::string p = step_prefix(step);
  if (model.config.variant == Variant::gns) {
    Tensor cat = tape.concat_cols({vertex, aggregated_incoming});
    return layer_norm_apply(
        tape, bp, p + "/vertex/ln",
        mlp_apply(tape, model, bp, p + "/vertex", cat, model.config.mlp_layers));
  }
  Tensor cat =
      tape.concat_cols({layer_norm_apply(tape, bp, p + "/vertex/pre_ln0", vertex),
                        layer_norm_apply(tape, bp, p + "/vertex/pre_ln1", aggregated_incoming)});
  return mlp_apply(tape, model, bp, p + "/vertex", cat, model.config.mlp_layers);
}

GraphState processor_step(Tape& tape, const Model& model, const BoundParams& bp, int step,
                          const GraphState& state, const RadiusGraph& graph) {
  Tensor vs = tape.gather_rows(state.vertex, graph.senders);
  Tensor vr = tape.gather_rows(state.vertex, graph.receivers);
  Tensor e_branch = edge_update(tape, model, bp, step, state.edge, vs, vr);

  GraphState next;
  if (model.config.variant == Variant::gns) {
    next.edge = tape.add(state.edge, e_branch);
  } else {
    next.edge = tape.add(tape.affine(state.edge, kShortcutWeight, 0.0),
                         tape.affine(e_branch, shortcut_branch_weight(), 0.0));
  }

  Tensor agg = tape.segment_sum(next.edge, graph.receivers, graph.n_vertices);
  Tensor v_branch = vertex_update(tape, model, bp, step, state.vertex, agg);
  if (model.config.variant == Variant::gns) {
    next.vertex = tape.add(state.vertex, v_branch);
  } else {
    next.vertex = tape.add(tape.affine(state.vertex, kShortcutWeight, 0.0),
                           tape.affine(v_branch, shortcut_branch_weight(), 0.0));
  }
  return next;
}

namespace {

IterationOutput decode(Tape& tape, const Model& model, const BoundParams& bp,
                       const GraphState& state, const RadiusGraph& graph) {
  const int dl = model.config.decoder_mlp_layers;
  IterationOutput out;
  out.noise_pred = mlp_apply(tape, model, bp, "dec/noise", state.vertex, dl);
  out.type_logits = mlp_apply(tape, model, bp, "dec/type", state.vertex, dl);
  Tensor per_vertex = mlp_apply(tape, model, bp, "dec/graph_pre", state.vertex, dl);
  Tensor agg = model.config.decoder_aggregation == Aggregation::sum
                   ? tape.segment_sum(per_vertex, graph.graph_id, graph.n_graphs)
                   : tape.segment_mean(per_vertex, graph.graph_id, graph.n_graphs);
  Tensor scalar = mlp_apply(tape, model, bp, "dec/graph_post", agg, dl);
  out.graph_pred = tape.reshape(scalar, {graph.n_graphs});
  return out;
}

}  // namespace

ForwardResult forward(Tape& tape, const Model& model, const BoundParams& bp,
                      const RadiusGraph& graph, const std::vector<int>& embed_index,
                      ForwardTrace* trace) {
  const GNSConfig& c = model.config;
  if (static_cast<int>(embed_index.size()) != graph.n_vertices)
    throw ContractViolation("forward: embed_index size != n_vertices");
  for (int idx : embed_index)
    if (idx < 0 || idx >= kEmbedRows)
      throw ContractViolation("forward: embed index " + std::to_string(idx) + " out of range");

  // Edges enter as the raw displacement vector plus the distance featurization;
  // the direction components are what let vertex-level vector predictions
  // point somewhere.
  const int n_basis = c.edge_feat_dim - 3;
  if (n_basis < 1 ||
      static_cast<std::int64_t>(graph.edge_feat.size()) !=
          static_cast<std::int64_t>(graph.n_edges()) * n_basis)
    throw ContractViolation("forward: edge_feat_dim must equal featurizer n_basis + 3");
  Tensor disp = tape.constant({graph.n_edges(), 3}, graph.displacement);
  Tensor basis = tape.constant({graph.n_edges(), n_basis}, graph.edge_feat);
  Tensor edge_in = tape.concat_cols({disp, basis});
  Tensor e = layer_norm_apply(tape, bp, "enc/edge/ln",
                              mlp_apply(tape, model, bp, "enc/edge", edge_in, c.mlp_layers));
  Tensor v = tape.gather_rows(bp.at("embed/atoms"), embed_index);

  ForwardResult result;
  GraphState state{e, v};
  for (int b = 0; b < c.n_block_iterations; ++b) {
    for (int t = 0; t < c.n_mp_layers; ++t) {
      state = processor_step(tape, model, bp, t, state, graph);
      if (trace) {
        trace->vertex_feat.push_back(state.vertex.value());
        trace->edge_feat.push_back(state.edge.value());
      }
    }
    result.iterations.push_back(decode(tape, model, bp, state, graph));
  }
  result.final_state = state;
  return result;
}

}  // namespace denoise
