#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "denoise/train.hpp"

using namespace denoise;

namespace {

// Desk-scale finetune config used across the training tests.
TrainConfig desk_config(Mode mode) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.gradient_steps = 30;
  cfg.warm_up_steps = 10;
  cfg.cosine_cycle_length = 40;
  cfg.max_vertices_in_batch = 64;
  cfg.max_edges_in_batch = 1024;
  cfg.max_graphs_in_batch = 8;
  cfg.featurizer_n_basis = 4;
  cfg.connectivity_radius = 3.0;
  cfg.variant = "gns";
  cfg.activation = "shifted_softplus";
  cfg.mlp_number_of_layers = 2;
  cfg.mlp_hidden_size = 12;
  cfg.message_passing_layers = 2;
  cfg.block_iterations = 1;
  cfg.latent_size = 12;
  cfg.decoder_mlp_layers = 1;
  cfg.decoder_aggregation = "mean";
  cfg.position_noise_sigma = 0.05;
  cfg.ema_decay = 0.99;
  cfg.eval_interval = 10;
  cfg.atom_type_mask_probability = mode == Mode::pretrain ? 0.75 : 0.0;
  cfg.atom_type_loss_coefficient = mode == Mode::pretrain ? 4.0 : 0.0;
  cfg.target_loss_coefficient = mode == Mode::pretrain ? 0.0 : 1.0;
  cfg.position_loss_coefficient = mode == Mode::pretrain ? 1.0 : 0.01;
  return cfg;
}

std::string temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("denoise_test_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace

TEST_CASE("config text round trip, fingerprints, unknown keys") {
  TrainConfig cfg = desk_config(Mode::finetune);
  TrainConfig back = TrainConfig::from_text(cfg.to_text());
  CHECK(back.to_text() == cfg.to_text());
  CHECK(back.fingerprint() == cfg.fingerprint());

  TrainConfig other = cfg;
  other.set("position_noise_sigma", "0.02");
  CHECK(other.fingerprint() != cfg.fingerprint());
  CHECK(other.model_fingerprint() == cfg.model_fingerprint());
  other.set("latent_size", "16");
  CHECK(other.model_fingerprint() != cfg.model_fingerprint());

  try {
    cfg.set("no_such_key", "1");
    FAIL("expected ContractViolation");
  } catch (const ContractViolation& e) {
    const std::string msg = e.what();
    CHECK(msg.find("unknown key") != std::string::npos);
    CHECK(msg.find("position_noise_sigma") != std::string::npos);  // lists valid keys
    CHECK(msg.find("max_edges_in_batch") != std::string::npos);
  }

  // Table-style keys parse
  TrainConfig t = TrainConfig::from_text("position_noise_sigma=0.02\nmax_edges_in_batch=9216\n");
  CHECK(t.position_noise_sigma == 0.02);
  CHECK(t.max_edges_in_batch == 9216);

  // variant/activation coupling enforced
  TrainConfig bad = desk_config(Mode::finetune);
  bad.variant = "gns";
  bad.activation = "tailored_lrelu";
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
}

TEST_CASE("dynamic batching") {
  SUBCASE("Table caps with 10-vertex graphs of <=40 edges bind at 8 graphs") {
    std::vector<GraphDims> stream(40, GraphDims{10, 40});
    auto batches = dynamic_batch(stream, 256, 9216, 8);
    CHECK(batches.size() == 5);
    for (const auto& b : batches) CHECK(b.size() == 8);
  }
  SUBCASE("single oversized graph errors naming the cap") {
    try {
      dynamic_batch({GraphDims{300, 10}}, 256, 9216, 8);
      FAIL("expected ContractViolation");
    } catch (const ContractViolation& e) {
      CHECK(std::string(e.what()).find("max_vertices_in_batch") != std::string::npos);
    }
    try {
      dynamic_batch({GraphDims{10, 10000}}, 256, 9216, 8);
      FAIL("expected ContractViolation");
    } catch (const ContractViolation& e) {
      CHECK(std::string(e.what()).find("max_edges_in_batch") != std::string::npos);
    }
  }
  SUBCASE("concatenated batches reproduce the stream; caps never violated") {
    RandomStream rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
      const int n = 1 + static_cast<int>(rng.bounded(40));
      std::vector<GraphDims> stream(static_cast<std::size_t>(n));
      for (auto& g : stream)
        g = {1 + static_cast<int>(rng.bounded(20)), static_cast<int>(rng.bounded(120))};
      const int cap_v = 20 + static_cast<int>(rng.bounded(40));
      const int cap_e = 120 + static_cast<int>(rng.bounded(200));
      const int cap_g = 1 + static_cast<int>(rng.bounded(6));
      auto batches = dynamic_batch(stream, cap_v, cap_e, cap_g);
      std::vector<int> flat;
      for (const auto& b : batches) {
        int nv = 0, ne = 0;
        for (int i : b) {
          nv += stream[static_cast<std::size_t>(i)].n_vertices;
          ne += stream[static_cast<std::size_t>(i)].n_edges;
          flat.push_back(i);
        }
        CHECK(nv <= cap_v);
        CHECK(ne <= cap_e);
        CHECK(static_cast<int>(b.size()) <= cap_g);
        CHECK(!b.empty());
      }
      REQUIRE(static_cast<int>(flat.size()) == n);
      for (int i = 0; i < n; ++i) CHECK(flat[static_cast<std::size_t>(i)] == i);
    }
  }
}

TEST_CASE("learning-rate schedule hits the Table endpoints") {
  TrainConfig cfg;  // Table defaults: 1e-5 -> 1e-4, min 1e-7
  CHECK(lr_at(0, cfg) == 1e-5);
  CHECK(lr_at(cfg.warm_up_steps, cfg) == 1e-4);
  // halfway through the cosine: exactly (max + min) / 2
  CHECK(lr_at(cfg.warm_up_steps + cfg.cosine_cycle_length / 2, cfg) ==
        doctest::Approx((1e-4 + 1e-7) / 2).epsilon(1e-14));
  CHECK(lr_at(cfg.warm_up_steps + cfg.cosine_cycle_length, cfg) == 1e-7);
  CHECK(lr_at(cfg.warm_up_steps + 2 * cfg.cosine_cycle_length, cfg) == 1e-7);
  // continuity at the warmup/cosine boundary
  const double before = lr_at(cfg.warm_up_steps - 1, cfg);
  const double at = lr_at(cfg.warm_up_steps, cfg);
  CHECK(std::abs(at - before) < 2.0 * (1e-4 - 1e-5) / cfg.warm_up_steps);
}

TEST_CASE("adam") {
  SUBCASE("zero gradients leave parameters unchanged") {
    ParamStore ps;
    ps.add("w", Param{{2}, {1.0, -2.0}, "x", true});
    AdamState st;
    adam_step(ps, {"w"}, {{0.0, 0.0}}, st, 0.1, 0.9, 0.95);
    CHECK(ps.at("w").value[0] == 1.0);
    CHECK(ps.at("w").value[1] == -2.0);
  }
  SUBCASE("constant gradient tends to -lr * sign(g)") {
    ParamStore ps;
    ps.add("w", Param{{1}, {0.0}, "x", true});
    AdamState st;
    double prev = 0.0;
    double delta = 0.0;
    for (int t = 0; t < 500; ++t) {
      adam_step(ps, {"w"}, {{0.37}}, st, 0.01, 0.9, 0.95);
      delta = ps.at("w").value[0] - prev;
      prev = ps.at("w").value[0];
    }
    CHECK(delta == doctest::Approx(-0.01).epsilon(1e-3));
  }
  SUBCASE("three-step scalar trajectory matches the hand-computed sequence") {
    // lr=0.1, beta1=0.9, beta2=0.95, eps=1e-8, g = 0.5 each step, w0 = 1.
    // step1: m=0.05, v=0.0125, mhat=0.5, vhat=0.25 -> w = 1 - 0.1*0.5/(0.5+1e-8)
    // step2: m=0.095, v=0.024375, mhat=0.5, vhat=0.25 -> same update
    // step3: likewise; constant gradient keeps mhat=g, vhat=g^2 exactly.
    ParamStore ps;
    ps.add("w", Param{{1}, {1.0}, "x", true});
    AdamState st;
    const double upd = 0.1 * 0.5 / (0.5 + 1e-8);
    std::vector<double> expect = {1.0 - upd, 1.0 - 2 * upd, 1.0 - 3 * upd};
    for (int t = 0; t < 3; ++t) {
      adam_step(ps, {"w"}, {{0.5}}, st, 0.1, 0.9, 0.95);
      CHECK(ps.at("w").value[0] == doctest::Approx(expect[static_cast<std::size_t>(t)]).epsilon(1e-12));
    }
  }
  SUBCASE("NaN gradient aborts naming the parameter") {
    ParamStore ps;
    ps.add("enc/w0", Param{{1}, {1.0}, "x", true});
    AdamState st;
    try {
      adam_step(ps, {"enc/w0"}, {{std::nan("")}}, st, 0.1, 0.9, 0.95);
      FAIL("expected ContractViolation");
    } catch (const ContractViolation& e) {
      CHECK(std::string(e.what()).find("enc/w0") != std::string::npos);
    }
    CHECK(ps.at("enc/w0").value[0] == 1.0);  // step aborted before mutation
  }
}

TEST_CASE("ema") {
  ParamStore params, shadow;
  params.add("w", Param{{1}, {1.0}, "x", true});
  shadow.add("w", Param{{1}, {0.0}, "x", true});

  SUBCASE("single step from zero") {
    ema_update(shadow, params, 0.9999);
    CHECK(shadow.at("w").value[0] == doctest::Approx(1e-4).epsilon(1e-12));
  }
  SUBCASE("constant params, shadow equal stays equal") {
    shadow.at("w").value[0] = 1.0;
    ema_update(shadow, params, 0.9999);
    CHECK(shadow.at("w").value[0] == 1.0);
  }
  SUBCASE("geometric series after k steps") {
    const double decay = 0.9999;
    const int k = 257;
    for (int i = 0; i < k; ++i) ema_update(shadow, params, decay);
    CHECK(std::abs(shadow.at("w").value[0] - (1.0 - std::pow(decay, k))) <= 1e-12);
  }
}

TEST_CASE("checkpoint save/load round trip is bit-exact") {
  TrainConfig cfg = desk_config(Mode::finetune);
  Model model = Model::create(cfg.gns_config());
  ParamStore params = init_params(model, 3);
  ParamStore ema = init_params(model, 4);
  AdamState opt;
  opt.t = 17;
  RandomStream rng(5);
  for (const auto& name : params.names()) {
    auto& m = opt.m[name];
    auto& v = opt.v[name];
    m.resize(params.at(name).value.size());
    v.resize(m.size());
    for (auto& x : m) x = rng.gauss();
    for (auto& x : v) x = std::abs(rng.gauss());
  }
  Checkpoint ckpt{1, cfg.fingerprint(), cfg.model_fingerprint(), 42, "seed=0;step=42",
                  params, ema, opt};
  const std::string dir = temp_dir("ckpt");
  save_checkpoint(dir + "/c.bin", ckpt);
  Checkpoint back = load_checkpoint(dir + "/c.bin");
  CHECK(back.step == 42);
  CHECK(back.config_fingerprint == cfg.fingerprint());
  CHECK(back.opt.t == 17);
  for (const auto& name : params.names()) {
    CHECK(back.params.at(name).value == params.at(name).value);
    CHECK(back.params.at(name).shape == params.at(name).shape);
    CHECK(back.params.at(name).backbone == params.at(name).backbone);
    CHECK(back.ema.at(name).value == ema.at(name).value);
    CHECK(back.opt.m.at(name) == opt.m.at(name));
    CHECK(back.opt.v.at(name) == opt.v.at(name));
  }
  CHECK_THROWS_AS(load_checkpoint(dir + "/missing.bin"), IoError);
}

TEST_CASE("training runs, resumes bit-exactly, and freezes backbones") {
  Dataset down = make_synthetic_dataset(60, 91);
  Dataset none;

  SUBCASE("pretrain smoke: loss decreases and metrics stream is written") {
    TrainConfig cfg = desk_config(Mode::pretrain);
    cfg.gradient_steps = 60;
    const std::string dir = temp_dir("pre");
    RunResult r = run(cfg, down, none, {dir, "", "", 1, false});
    CHECK(r.steps_run == 60);
    CHECK(std::filesystem::exists(dir + "/checkpoint.bin"));
    std::ifstream mf(dir + "/metrics.csv");
    std::string header;
    std::getline(mf, header);
    CHECK(header == "step,lr,loss_total,loss_pos,loss_type,loss_target,val_mae");
    double first5 = 0, last5 = 0;
    for (int i = 0; i < 5; ++i) {
      first5 += r.metrics[static_cast<std::size_t>(i)].loss_total;
      last5 += r.metrics[r.metrics.size() - 1 - static_cast<std::size_t>(i)].loss_total;
    }
    CHECK(last5 < first5);
  }

  SUBCASE("determinism: identical seeds give identical metrics") {
    TrainConfig cfg = desk_config(Mode::finetune);
    cfg.gradient_steps = 12;
    RunResult a = run(cfg, none, down, {"", "", "", 1, false});
    RunResult b = run(cfg, none, down, {"", "", "", 1, false});
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (std::size_t i = 0; i < a.metrics.size(); ++i)
      CHECK(a.metrics[i].loss_total == b.metrics[i].loss_total);
    CHECK(a.test_mae == b.test_mae);
  }

  SUBCASE("resume reproduces subsequent losses bit-exactly") {
    TrainConfig cfg = desk_config(Mode::finetune);
    cfg.gradient_steps = 14;
    cfg.checkpoint_interval = 7;
    const std::string dir = temp_dir("resume");
    RunResult full = run(cfg, none, down, {dir, "", "", 1, false});
    REQUIRE(std::filesystem::exists(dir + "/ckpt_step7.bin"));

    const std::string dir2 = temp_dir("resume2");
    RunResult resumed = run(cfg, none, down, {dir2, "", dir + "/ckpt_step7.bin", 1, false});
    REQUIRE(resumed.metrics.size() == 7);
    for (std::size_t i = 0; i < resumed.metrics.size(); ++i) {
      const StepMetrics& want = full.metrics[7 + i];
      const StepMetrics& got = resumed.metrics[i];
      CHECK(got.step == want.step);
      CHECK(got.loss_total == want.loss_total);  // bit-exact
    }
    CHECK(resumed.test_mae == full.test_mae);
  }

  SUBCASE("frozen backbone leaves backbone parameters bit-identical") {
    TrainConfig pre = desk_config(Mode::pretrain);
    pre.gradient_steps = 8;
    const std::string dir = temp_dir("frozen");
    run(pre, down, none, {dir, "", "", 1, false});

    TrainConfig ft = desk_config(Mode::finetune_frozen_backbone);
    ft.gradient_steps = 10;
    const std::string dir2 = temp_dir("frozen2");
    RunResult r = run(ft, none, down, {dir2, dir + "/checkpoint.bin", "", 1, false});
    CHECK(r.steps_run == 10);

    Checkpoint init = load_checkpoint(dir + "/checkpoint.bin");
    Checkpoint final = load_checkpoint(dir2 + "/checkpoint.bin");
    bool decoder_moved = false;
    for (const auto& name : final.params.names()) {
      const Param& p = final.params.at(name);
      if (p.backbone) {
        CHECK(p.value == init.ema.at(name).value);  // frozen = loaded EMA weights
      } else if (p.value != init.params.at(name).value) {
        decoder_moved = true;
      }
    }
    CHECK(decoder_moved);
  }

  SUBCASE("finetune from an incompatible architecture is rejected") {
    TrainConfig pre = desk_config(Mode::pretrain);
    pre.gradient_steps = 4;
    const std::string dir = temp_dir("mismatch");
    run(pre, down, none, {dir, "", "", 1, false});
    TrainConfig ft = desk_config(Mode::finetune);
    ft.latent_size = 16;
    CHECK_THROWS_AS(run(ft, none, down, {"", dir + "/checkpoint.bin", "", 1, false}),
                    ContractViolation);
  }
}
