#pragma once
// GNS and GNS-TAT: encoder, Interaction-Network processor with shortcut
// connections, and vertex/graph decoders. Parameters live in a ParamStore
// and are bound to a fresh tape per forward pass.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "denoise/graph.hpp"
#include "denoise/tat.hpp"
#include "denoise/tensor.hpp"

namespace denoise {

enum class Variant { gns, gns_tat };
enum class Aggregation { sum, mean };

// Atom-type vocabulary: logits over atomic numbers 1..118 (class = z-1);
// the embedding table has one extra leading row for the mask token.
constexpr int kTypeClasses = 118;
constexpr int kEmbedRows = kTypeClasses + 1;
constexpr int kMaskToken = 0;

struct GNSConfig {
  Variant variant = Variant::gns;
  int n_mp_layers = 3;        // message-passing steps per processor
  int n_block_iterations = 2; // processor repetitions with shared parameters
  int latent = 32;            // vertex/edge latent size
  int mlp_hidden = 32;
  int mlp_layers = 2;          // hidden layers in update MLPs
  int decoder_mlp_layers = 2;  // hidden layers in decoder MLPs
  int edge_feat_dim = 11;      // encoder edge input: 3 displacement + n_basis
  Aggregation decoder_aggregation = Aggregation::mean;
  double tat_eta = 0.8;

  void validate() const;
  int residual_blocks() const { return n_mp_layers * n_block_iterations; }
};

struct Param {
  Shape shape;
  std::vector<double> value;
  std::string init_scheme;
  bool backbone = true;  // false for decoder heads
};

class ParamStore {
 public:
  void add(const std::string& name, Param p);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool contains(const std::string& name) const { return store_.count(name) != 0; }
  std::vector<std::string> names() const;  // sorted
  std::size_t size() const { return store_.size(); }
  std::int64_t n_scalars() const;
  auto begin() { return store_.begin(); }
  auto end() { return store_.end(); }
  auto begin() const { return store_.begin(); }
  auto end() const { return store_.end(); }

 private:
  std::map<std::string, Param> store_;
};

// A model is a config plus, for the TAT variant, the solved activation.
struct Model {
  GNSConfig config;
  std::optional<TailoredActivation> act;

  static Model create(const GNSConfig& config);
};

// Fresh parameters: fan-in-scaled Gaussian weights, zero biases, unit
// layer-norm gains, standard-normal atom embeddings. The TAT variant gets
// Edge-Delta first layers in the edge update MLPs.
ParamStore init_params(const Model& model, std::uint64_t seed);

// Zeroes the vertex-feature blocks of the first linear layer of every edge
// update MLP and resamples the edge block at variance 1/latent (the fan-in
// with those blocks treated as absent). Biases stay zero.
void edge_delta_init(ParamStore& params, const GNSConfig& config, std::uint64_t seed);

// The parameters of one tape run, bound as differentiable leaves.
struct BoundParams {
  std::vector<std::string> names;  // sorted, aligned with tensors
  std::vector<Tensor> tensors;
  std::map<std::string, Tensor> by_name;

  Tensor at(const std::string& name) const;
};

BoundParams bind_params(Tape& tape, const ParamStore& params);

struct GraphState {
  Tensor edge;    // [E, latent]
  Tensor vertex;  // [N, latent]
};

// Optional per-step value snapshots (one entry per message-passing step,
// across all block iterations).
struct ForwardTrace {
  std::vector<std::vector<double>> vertex_feat;
  std::vector<std::vector<double>> edge_feat;
};

// Interaction-Network branch updates (without the shortcut):
// GNS:     layer_norm(MLP(concat(...)))
// GNS-TAT: MLP(layer_norm(concat(...))) with tailored activations
Tensor edge_update(Tape& tape, const Model& model, const BoundParams& bp, int step,
                   Tensor edge, Tensor sender_feat, Tensor receiver_feat);
Tensor vertex_update(Tape& tape, const Model& model, const BoundParams& bp, int step,
                     Tensor vertex, Tensor aggregated_incoming);

// One message-passing step: shortcut + Interaction Network (plain sum for
// GNS; 0.9 / sqrt(1-0.9^2) weighted sum for GNS-TAT).
GraphState processor_step(Tape& tape, const Model& model, const BoundParams& bp, int step,
                          const GraphState& state, const RadiusGraph& graph);

struct IterationOutput {
  Tensor noise_pred;   // [N, 3]
  Tensor type_logits;  // [N, kTypeClasses]
  Tensor graph_pred;   // [n_graphs]
};

struct ForwardResult {
  std::vector<IterationOutput> iterations;  // one per block iteration
  GraphState final_state;
};

// Full encoder -> processor (n_block_iterations passes, shared parameters,
// decoded after each) on a batched graph. `embed_index` holds, per vertex,
// the atomic number or kMaskToken.
ForwardResult forward(Tape& tape, const Model& model, const BoundParams& bp,
                      const RadiusGraph& graph, const std::vector<int>& embed_index,
                      ForwardTrace* trace = nullptr);

}  // namespace denoise
