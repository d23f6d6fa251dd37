#pragma once
// Training machinery: config parsing (Table-style snake_case keys), dynamic
// batching under vertex/edge/graph caps, the warmup + 1-cycle cosine
// schedule, Adam, EMA shadowing, bit-exact checkpoints, and the
// pretrain / finetune / frozen-backbone run modes.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "denoise/dataio.hpp"
#include "denoise/model.hpp"
#include "denoise/objectives.hpp"

namespace denoise {

enum class Mode { pretrain, finetune, finetune_frozen_backbone };

struct TrainConfig {
  Mode mode = Mode::pretrain;

  // optimizer & schedule
  std::int64_t gradient_steps = 300000;
  double beta1 = 0.9;
  double beta2 = 0.95;
  std::int64_t warm_up_steps = 10000;
  double warm_up_start_learning_rate = 1e-5;
  double warm_up_max_learning_rate = 1e-4;
  double cosine_min_learning_rate = 1e-7;
  std::int64_t cosine_cycle_length = 500000;

  // dynamic batching caps
  int max_vertices_in_batch = 256;
  int max_edges_in_batch = 9216;
  int max_graphs_in_batch = 8;

  // graph construction / featurization
  std::string distance_featurization = "bessel";  // bessel | gaussian
  int featurizer_n_basis = 8;
  double featurizer_r_min = 0.0;
  double featurizer_mu = 0.0;
  double featurizer_sigma = 1.0;
  double connectivity_radius = 3.0;
  int max_edges_per_vertex = 20;

  // network
  std::string variant = "gns_tat";  // gns | gns_tat
  std::string activation = "tailored_lrelu";  // shifted_softplus | tailored_lrelu
  int mlp_number_of_layers = 3;
  int mlp_hidden_size = 1024;
  int message_passing_layers = 10;
  int block_iterations = 3;
  int latent_size = 512;
  std::string decoder_aggregation = "mean";  // sum | mean
  int decoder_mlp_layers = 2;
  double tat_eta = 0.8;

  // noise & losses
  double position_noise_sigma = 0.02;
  bool mean_center_noise = true;
  double ema_decay = 0.9999;
  double position_loss_coefficient = 1.0;
  double atom_type_mask_probability = 0.75;
  double atom_type_loss_coefficient = 4.0;
  double target_loss_coefficient = 0.0;
  std::string target_label = "surrogate_energy";
  bool normalize_target = true;

  // bookkeeping
  std::int64_t seed = 0;
  std::int64_t eval_interval = 100;
  std::int64_t early_stopping_patience = 10;  // in eval intervals
  std::int64_t checkpoint_interval = 0;       // 0: only final
  double train_fraction = 0.6;
  double valid_fraction = 0.2;

  void validate() const;
  GNSConfig gns_config() const;
  FeaturizerSpec featurizer() const;
  NoiseSpec noise() const;
  LossWeights loss_weights() const;

  // canonical `key=value` text (sorted keys) and its hash
  std::string to_text() const;
  std::string fingerprint() const;        // full config
  std::string model_fingerprint() const;  // architecture-defining keys only

  void set(const std::string& key, const std::string& value);  // unknown key -> error
  static TrainConfig from_text(const std::string& text);
  static TrainConfig load_file(const std::string& path);
  static std::vector<std::string> valid_keys();
};

std::string mode_name(Mode m);
Mode mode_from_name(const std::string& s);

// --- batching ---------------------------------------------------------------

struct GraphDims {
  int n_vertices = 0;
  int n_edges = 0;
};

// Greedy accumulation in stream order: a graph that would breach any cap
// closes the current batch. A single graph over the caps is an error that
// names the violated cap.
std::vector<std::vector<int>> dynamic_batch(const std::vector<GraphDims>& stream,
                                            int max_vertices, int max_edges, int max_graphs);

// --- schedule / optimizer / EMA ----------------------------------------------

double lr_at(std::int64_t step, const TrainConfig& cfg);

struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::int64_t t = 0;
};

// Standard bias-corrected Adam over the named parameters; `grads` aligns
// with `names`. A non-finite gradient aborts with the parameter's name.
// `skip` marks parameters whose update is discarded (frozen backbone).
void adam_step(ParamStore& params, const std::vector<std::string>& names,
               const std::vector<std::vector<double>>& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps = 1e-8,
               const std::vector<bool>* skip = nullptr);

void ema_update(ParamStore& shadow, const ParamStore& params, double decay);

// --- checkpoints --------------------------------------------------------------

struct Checkpoint {
  int format_version = 1;
  std::string config_fingerprint;
  std::string model_fingerprint;
  std::int64_t step = 0;
  std::string rng_state;
  ParamStore params;
  ParamStore ema;
  AdamState opt;
  double target_mean = 0.0;  // label standardization used by the graph head
  double target_std = 1.0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// --- training ----------------------------------------------------------------

struct RunOptions {
  std::string out_dir;
  std::string init_checkpoint;    // finetune modes: backbone initializer
  std::string resume_checkpoint;  // continue an interrupted run bit-exactly
  int threads = 1;
  bool verbose = false;
};

struct StepMetrics {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_pos = 0.0;
  double loss_type = 0.0;
  double loss_target = 0.0;
  std::optional<double> val_mae;
};

struct RunResult {
  std::int64_t steps_run = 0;
  double final_loss = 0.0;
  double best_val_mae = std::numeric_limits<double>::quiet_NaN();
  double test_mae = std::numeric_limits<double>::quiet_NaN();
  std::string checkpoint_path;
  std::string metrics_path;
  std::vector<StepMetrics> metrics;
};

// Pretrain: denoising (+ atom-type) on `upstream`, labels unused. Finetune
// modes: combined loss on the labeled `downstream` train split, periodic
// validation MAE on the EMA shadow with early stopping, test MAE evaluated
// at the best-validation parameters. The frozen mode computes full
// gradients but applies updates only to decoder parameters.
RunResult run(const TrainConfig& cfg, const Dataset& upstream, const Dataset& downstream,
              const RunOptions& opts);

// MAE of the graph decoder on clean structures, in label units.
double evaluate_mae(const Model& model, const ParamStore& params, const Dataset& data,
                    const std::vector<int>& indices, const TrainConfig& cfg, double target_mean,
                    double target_std, int threads = 1);

}  // namespace denoise
