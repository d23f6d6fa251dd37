#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "denoise/cli.hpp"
#include "denoise/dataio.hpp"

using namespace denoise;

namespace {

int call(std::vector<std::string> args) {
  std::vector<const char*> argv = {"denoise-pretrain"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

std::string temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("denoise_cli_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("make-synthetic and dataset-stats") {
  const std::string dir = temp_dir("data");
  CHECK(call({"make-synthetic", "--n", "12", "--seed", "3", "--out", dir + "/d.xyz"}) == 0);
  Dataset d = load_xyz_file(dir + "/d.xyz");
  CHECK(d.size() == 12);

  CHECK(call({"dataset-stats", "--dataset", dir + "/d.xyz", "--upstream", dir + "/d.xyz",
              "--out", dir + "/stats.csv"}) == 0);
  const std::string csv = slurp(dir + "/stats.csv");
  CHECK(csv.rfind("element,count\n", 0) == 0);
  CHECK(csv.find("coverage,1\n") != std::string::npos);  // self-coverage is exactly 1
}

TEST_CASE("oracle-check emits the gap CSV") {
  const std::string dir = temp_dir("oracle");
  CHECK(call({"oracle-check", "--centers", "3", "--atoms", "4", "--sigma", "0.1", "--samples",
              "5000", "--seed", "0", "--out", dir + "/gap.csv"}) == 0);
  const std::string csv = slurp(dir + "/gap.csv");
  CHECK(csv.rfind("metric,value\n", 0) == 0);
  CHECK(csv.find("j1_j2_gap,") != std::string::npos);
  CHECK(csv.find("gap_standard_error,") != std::string::npos);
}

TEST_CASE("diagnose emits the oversmoothing CSV for both variants") {
  const std::string dir = temp_dir("diag");
  CHECK(call({"diagnose", "--variant", "gns", "--depth", "4", "--seeds", "2", "--out",
              dir + "/gns.csv", "--seed", "1"}) == 0);
  CHECK(call({"diagnose", "--variant", "gns_tat", "--depth", "4", "--seeds", "2", "--eta",
              "0.25", "--out", dir + "/tat.csv", "--seed", "1"}) == 0);
  for (const char* f : {"/gns.csv", "/tat.csv"}) {
    const std::string csv = slurp(dir + f);
    CHECK(csv.rfind("step,variant,mean_cosine\n", 0) == 0);
    int rows = -1;  // minus header
    for (char c : csv)
      if (c == '\n') ++rows;
    CHECK(rows == 4);
  }
  CHECK(call({"diagnose", "--variant", "nope", "--depth", "4"}) == 1);
}

TEST_CASE("--help exits 0") {
  CHECK(call({"--help"}) == 0);
}

TEST_CASE("missing config file exits 1 with the path in the message") {
  CHECK(call({"pretrain", "--config", "/no/such/config.cfg", "--upstream", "x.xyz"}) == 1);
}

TEST_CASE("unknown --set key exits 1") {
  const std::string dir = temp_dir("setkey");
  CHECK(call({"make-synthetic", "--n", "4", "--out", dir + "/d.xyz"}) == 0);
  CHECK(call({"pretrain", "--set", "bogus_key=1", "--upstream", dir + "/d.xyz", "--out", dir}) ==
        1);
}

TEST_CASE("pretrain then finetune then evaluate through the CLI") {
  const std::string dir = temp_dir("train");
  REQUIRE(call({"make-synthetic", "--n", "40", "--seed", "5", "--out", dir + "/up.xyz"}) == 0);
  REQUIRE(call({"make-synthetic", "--n", "30", "--seed", "6", "--out", dir + "/down.xyz"}) == 0);

  std::vector<std::string> shrink = {
      "--set", "gradient_steps=8",          "--set", "warm_up_steps=4",
      "--set", "max_vertices_in_batch=64",  "--set", "max_edges_in_batch=1024",
      "--set", "latent_size=10",            "--set", "mlp_hidden_size=10",
      "--set", "mlp_number_of_layers=2",    "--set", "message_passing_layers=2",
      "--set", "block_iterations=1",        "--set", "featurizer_n_basis=5",
      "--set", "variant=gns",               "--set", "activation=shifted_softplus",
      "--set", "eval_interval=4",           "--set", "decoder_mlp_layers=1",
  };

  std::vector<std::string> pre = {"pretrain", "--upstream", dir + "/up.xyz", "--out",
                                  dir + "/pre", "--set", "mode=pretrain",
                                  "--set", "target_loss_coefficient=0"};
  pre.insert(pre.end(), shrink.begin(), shrink.end());
  REQUIRE(call(pre) == 0);
  CHECK(std::filesystem::exists(dir + "/pre/checkpoint.bin"));
  CHECK(std::filesystem::exists(dir + "/pre/metrics.csv"));

  std::vector<std::string> fin = {"finetune",
                                  "--downstream", dir + "/down.xyz",
                                  "--checkpoint", dir + "/pre/checkpoint.bin",
                                  "--out", dir + "/ft",
                                  "--set", "mode=finetune",
                                  "--set", "position_noise_sigma=0.05",
                                  "--set", "position_loss_coefficient=0.01",
                                  "--set", "atom_type_mask_probability=0",
                                  "--set", "atom_type_loss_coefficient=0",
                                  "--set", "target_loss_coefficient=1"};
  fin.insert(fin.end(), shrink.begin(), shrink.end());
  REQUIRE(call(fin) == 0);

  std::vector<std::string> eva = {"evaluate", "--checkpoint", dir + "/ft/checkpoint.bin",
                                  "--dataset", dir + "/down.xyz",
                                  "--set", "target_loss_coefficient=1",
                                  "--set", "position_loss_coefficient=0.01"};
  eva.insert(eva.end(), shrink.begin(), shrink.end());
  CHECK(call(eva) == 0);

  // subcommand/mode mismatch is a usage error
  std::vector<std::string> wrong = {"pretrain", "--upstream", dir + "/up.xyz",
                                    "--set", "mode=finetune"};
  wrong.insert(wrong.end(), shrink.begin(), shrink.end());
  CHECK(call(wrong) == 1);
}
