#include "denoise/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "denoise/dataio.hpp"
#include "denoise/diagnostics.hpp"
#include "denoise/score.hpp"
#include "denoise/train.hpp"

namespace denoise {

namespace {

TrainConfig load_config(const std::string& path, const std::vector<std::string>& sets,
                        bool seed_given, std::int64_t seed) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : TrainConfig::load_file(path);
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ContractViolation("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (seed_given) cfg.seed = seed;
  return cfg;
}

std::ostream& open_output(const std::string& path, std::ofstream& file) {
  if (path.empty()) return std::cout;
  file.open(path, std::ios::binary);
  if (!file) throw IoError("cannot write '" + path + "'");
  return file;
}

int run_training(const std::string& config_path, const std::vector<std::string>& sets,
                 bool seed_given, std::int64_t seed, Mode expected_base,
                 const std::string& upstream_path, const std::string& downstream_path,
                 const std::string& out_dir, const std::string& checkpoint,
                 const std::string& resume, int threads, bool verbose) {
  TrainConfig cfg = load_config(config_path, sets, seed_given, seed);
  if (expected_base == Mode::pretrain && cfg.mode != Mode::pretrain)
    throw ContractViolation("the pretrain subcommand requires mode=pretrain (config says '" +
                            mode_name(cfg.mode) + "')");
  if (expected_base == Mode::finetune && cfg.mode == Mode::pretrain)
    throw ContractViolation("the finetune subcommand requires a finetune mode (config says '" +
                            mode_name(cfg.mode) + "')");
  cfg.validate();

  Dataset upstream, downstream;
  if (cfg.mode == Mode::pretrain) {
    if (upstream_path.empty()) throw ContractViolation("pretrain requires --upstream");
    upstream = load_xyz_file(upstream_path);
  } else {
    if (downstream_path.empty()) throw ContractViolation("finetune requires --downstream");
    downstream = load_xyz_file(downstream_path);
  }

  RunOptions opts;
  opts.out_dir = out_dir;
  opts.init_checkpoint = checkpoint;
  opts.resume_checkpoint = resume;
  opts.threads = threads;
  opts.verbose = verbose;
  RunResult r = run(cfg, upstream, downstream, opts);

  std::printf("steps=%lld final_loss=%.17g", static_cast<long long>(r.steps_run), r.final_loss);
  if (cfg.mode != Mode::pretrain)
    std::printf(" best_val_mae=%.17g test_mae=%.17g", r.best_val_mae, r.test_mae);
  if (!r.checkpoint_path.empty()) std::printf(" checkpoint=%s", r.checkpoint_path.c_str());
  std::printf("\n");
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Denoising pre-training toolkit for 3D molecular property prediction"};
  app.require_subcommand(1);

  std::string config_path, upstream_path, downstream_path, dataset_path, out_path;
  std::string checkpoint_path, resume_path;
  std::vector<std::string> sets;
  std::int64_t seed = 0;
  int threads = 1;
  bool verbose = false;
  app.add_option("--seed", seed, "Seed for all randomness (default 0)");
  app.add_option("--threads", threads, "Worker-parallelism cap")->check(CLI::PositiveNumber);
  app.add_flag("--verbose", verbose, "Progress lines on stderr");

  // global options (--seed, --threads, --verbose) remain usable after a
  // subcommand name
  app.fallthrough();

  auto add_config_opts = [&](CLI::App* cmd) {
    cmd->fallthrough();
    cmd->add_option("--config", config_path, "Config file (key=value lines)");
    cmd->add_option("--set", sets, "Override a config key, e.g. --set position_noise_sigma=0.02");
  };

  CLI::App* pre = app.add_subcommand("pretrain", "Denoising pre-training on unlabeled structures");
  add_config_opts(pre);
  pre->add_option("--upstream", upstream_path, "Extended-XYZ file of structures");
  pre->add_option("--out", out_path, "Output directory (metrics.csv, checkpoints)");

  CLI::App* fin = app.add_subcommand("finetune", "Supervised fine-tuning with auxiliary denoising");
  add_config_opts(fin);
  fin->add_option("--downstream", downstream_path, "Labeled extended-XYZ file");
  fin->add_option("--checkpoint", checkpoint_path,
                  "Pre-trained checkpoint to initialize the backbone (omit to train from scratch)");
  fin->add_option("--resume", resume_path, "Resume an interrupted run from its checkpoint");
  fin->add_option("--out", out_path, "Output directory");

  CLI::App* eva = app.add_subcommand("evaluate", "MAE of a checkpoint on a labeled dataset");
  add_config_opts(eva);
  eva->add_option("--checkpoint", checkpoint_path, "Checkpoint to evaluate")->required();
  eva->add_option("--dataset", dataset_path, "Labeled extended-XYZ file")->required();

  int diag_depth = 30;
  int diag_seeds = 10;
  double diag_eta = 0.8;
  std::string diag_variant = "gns";
  CLI::App* dia = app.add_subcommand("diagnose", "Oversmoothing profile at initialization");
  dia->fallthrough();
  dia->add_option("--variant", diag_variant, "gns | gns_tat")->required();
  dia->add_option("--depth", diag_depth, "Message-passing steps to probe");
  dia->add_option("--seeds", diag_seeds, "Seeds to average over")->check(CLI::PositiveNumber);
  dia->add_option("--eta", diag_eta, "TAT eta for the gns_tat variant (must be reachable at this depth)");
  dia->add_option("--out", out_path, "CSV output path (default stdout)");

  int oc_centers = 3, oc_atoms = 4;
  double oc_sigma = 0.1;
  double oc_center_scale = -1.0;
  std::int64_t oc_samples = 100000;
  CLI::App* orc = app.add_subcommand(
      "oracle-check", "Score-matching vs denoising gradient-gap estimate (common random numbers)");
  orc->fallthrough();
  orc->add_option("--centers", oc_centers, "Mixture centers")->check(CLI::PositiveNumber);
  orc->add_option("--atoms", oc_atoms, "Atoms per structure")->check(CLI::PositiveNumber);
  orc->add_option("--sigma", oc_sigma, "Noise scale")->check(CLI::PositiveNumber);
  orc->add_option("--samples", oc_samples, "Monte-Carlo samples")->check(CLI::PositiveNumber);
  orc->add_option("--center-scale", oc_center_scale,
                  "Std of the random centers (default 1.5 * sigma)");
  orc->add_option("--out", out_path, "CSV output path (default stdout)");

  CLI::App* sta = app.add_subcommand("dataset-stats", "Element counts and coverage");
  sta->fallthrough();
  sta->add_option("--dataset", dataset_path, "Extended-XYZ file to summarize")->required();
  sta->add_option("--upstream", upstream_path, "Reference dataset for the coverage line");
  sta->add_option("--out", out_path, "CSV output path (default stdout)");

  int syn_n = 1000;
  int syn_min_atoms = 4, syn_max_atoms = 16;
  CLI::App* syn = app.add_subcommand("make-synthetic", "Generate the bundled synthetic dataset");
  syn->fallthrough();
  syn->add_option("--n", syn_n, "Number of structures")->check(CLI::PositiveNumber);
  syn->add_option("--min-atoms", syn_min_atoms, "Smallest cluster");
  syn->add_option("--max-atoms", syn_max_atoms, "Largest cluster");
  syn->add_option("--out", out_path, "Output extended-XYZ path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const bool seed_given = app.count("--seed") > 0;

  try {
    if (app.got_subcommand(pre))
      return run_training(config_path, sets, seed_given, seed, Mode::pretrain, upstream_path, "",
                          out_path, "", resume_path, threads, verbose);
    if (app.got_subcommand(fin))
      return run_training(config_path, sets, seed_given, seed, Mode::finetune, "", downstream_path,
                          out_path, checkpoint_path, resume_path, threads, verbose);

    if (app.got_subcommand(eva)) {
      TrainConfig cfg = load_config(config_path, sets, seed_given, seed);
      Checkpoint ckpt = load_checkpoint(checkpoint_path);
      if (ckpt.model_fingerprint != cfg.model_fingerprint())
        throw ContractViolation("evaluate: checkpoint architecture does not match this config");
      Dataset data = load_xyz_file(dataset_path);
      std::vector<int> idx(data.size());
      for (std::size_t i = 0; i < data.size(); ++i) idx[i] = static_cast<int>(i);
      Model model = Model::create(cfg.gns_config());
      const double mae = evaluate_mae(model, ckpt.ema, data, idx, cfg, ckpt.target_mean,
                                      ckpt.target_std, threads);
      std::printf("n=%zu mae=%.17g\n", data.size(), mae);
      return 0;
    }

    if (app.got_subcommand(dia)) {
      if (diag_variant != "gns" && diag_variant != "gns_tat")
        throw ContractViolation("diagnose: --variant must be gns or gns_tat");
      GNSConfig c;
      c.variant = diag_variant == "gns" ? Variant::gns : Variant::gns_tat;
      c.n_mp_layers = diag_depth;
      c.n_block_iterations = 1;
      c.latent = 16;
      c.mlp_hidden = 16;
      c.mlp_layers = 3;
      c.decoder_mlp_layers = 1;
      c.edge_feat_dim = 11;
      c.decoder_aggregation = Aggregation::mean;
      c.tat_eta = diag_eta;
      Model model = Model::create(c);
      if (model.act)
        std::printf("solved_alpha=%.17g\n", model.act->negative_slope);

      FeaturizerSpec feat;
      feat.r_cut = 3.0;
      feat.n_basis = 8;
      std::vector<double> acc(static_cast<std::size_t>(diag_depth), 0.0);
      for (int s = 0; s < diag_seeds; ++s) {
        const std::uint64_t sd = derive_seed(static_cast<std::uint64_t>(seed),
                                             static_cast<std::uint64_t>(s), 0xd1a6);
        Dataset batch = make_synthetic_dataset(4, sd);
        std::vector<const Structure*> ptrs;
        for (const auto& st : batch) ptrs.push_back(&st);
        auto prof = oversmoothing_profile(model, init_params(model, sd), ptrs, feat, 20);
        for (std::size_t i = 0; i < prof.size(); ++i) acc[i] += prof[i] / diag_seeds;
      }
      std::ofstream file;
      std::ostream& os = open_output(out_path, file);
      os << "step,variant,mean_cosine\n";
      for (std::size_t i = 0; i < acc.size(); ++i)
        os << (i + 1) << ',' << diag_variant << ',' << acc[i] << '\n';
      return 0;
    }

    if (app.got_subcommand(orc)) {
      MixtureModel m = random_mixture(oc_centers, oc_atoms, oc_sigma,
                                      derive_seed(static_cast<std::uint64_t>(seed), 0x06c),
                                      oc_center_scale);
      GradientGapResult r = j1_j2_gradient_gap(m, oc_samples, static_cast<std::uint64_t>(seed));
      std::ofstream file;
      std::ostream& os = open_output(out_path, file);
      os << "metric,value\n";
      os << "j1_j2_gap," << r.gap << '\n';
      os << "gap_standard_error," << r.gap_se << '\n';
      os << "grad_norm_j2," << r.grad_norm_j2 << '\n';
      os << "n_params," << r.n_params << '\n';
      os << "n_samples," << r.n_samples << '\n';
      os << "centers," << oc_centers << '\n';
      os << "atoms," << oc_atoms << '\n';
      os << "sigma," << oc_sigma << '\n';
      return 0;
    }

    if (app.got_subcommand(sta)) {
      Dataset data = load_xyz_file(dataset_path);
      std::ofstream file;
      std::ostream& os = open_output(out_path, file);
      os << "element,count\n";
      for (const auto& [z, count] : element_counts(data))
        os << element_symbol(z) << ',' << count << '\n';
      if (!upstream_path.empty()) {
        Dataset up = load_xyz_file(upstream_path);
        os << "coverage," << element_coverage(up, data) << '\n';
      }
      return 0;
    }

    if (app.got_subcommand(syn)) {
      SyntheticOptions opt;
      opt.min_atoms = syn_min_atoms;
      opt.max_atoms = syn_max_atoms;
      Dataset d = make_synthetic_dataset(syn_n, static_cast<std::uint64_t>(seed), opt);
      save_xyz_file(d, out_path);
      std::printf("wrote %d structures to %s\n", syn_n, out_path.c_str());
      return 0;
    }
  } catch (const ContractViolation& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return 2;
  }
  return 1;
}

}  // namespace denoise
