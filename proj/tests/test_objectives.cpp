#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "denoise/objectives.hpp"

using namespace denoise;

namespace {

Structure simple_structure(int n, std::uint64_t seed = 17) {
  RandomStream rng(seed);
  Structure s;
  for (int i = 0; i < n; ++i) {
    s.atomic_numbers.push_back(6);
    for (int c = 0; c < 3; ++c) s.positions.push_back(rng.uniform(-2, 2));
  }
  return s;
}

}  // namespace

TEST_CASE("corrupt with sigma 0 is the identity with zero target") {
  Structure s = simple_structure(5);
  NoiseSpec spec;
  spec.sigma = 0.0;
  RandomStream rng(1);
  CorruptResult r = corrupt(s, spec, rng);
  CHECK(r.noisy.positions == s.positions);
  for (double v : r.target) CHECK(v == 0.0);
}

TEST_CASE("mean-centered targets have zero per-structure mean") {
  Structure s = simple_structure(7);
  NoiseSpec spec;
  spec.sigma = 0.3;
  spec.mean_center = true;
  RandomStream rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    CorruptResult r = corrupt(s, spec, rng);
    for (int c = 0; c < 3; ++c) {
      double m = 0;
      for (int i = 0; i < s.n_atoms(); ++i) m += r.target[static_cast<std::size_t>(3 * i + c)];
      CHECK(std::abs(m / s.n_atoms()) <= 1e-12);
    }
    // noisy = clean + sigma * centered target, consistently
    for (std::size_t k = 0; k < r.target.size(); ++k)
      CHECK(r.noisy.positions[k] ==
            doctest::Approx(s.positions[k] + spec.sigma * r.target[k]).epsilon(1e-15));
  }
}

TEST_CASE("target standard deviation matches the projection law") {
  // un-centered: std 1; centered: sqrt(1 - 1/N) per coordinate
  const int n_atoms = 5;
  Structure s = simple_structure(n_atoms);
  const int draws = 100000;

  for (bool centered : {false, true}) {
    NoiseSpec spec;
    spec.sigma = 1.0;
    spec.mean_center = centered;
    RandomStream rng(3);
    double sumsq = 0;
    std::int64_t count = 0;
    for (int d = 0; d < draws; ++d) {
      CorruptResult r = corrupt(s, spec, rng);
      for (double v : r.target) {
        sumsq += v * v;
        ++count;
      }
    }
    const double std_hat = std::sqrt(sumsq / static_cast<double>(count));
    const double want = centered ? std::sqrt(1.0 - 1.0 / n_atoms) : 1.0;
    CHECK(std_hat == doctest::Approx(want).epsilon(0.01));
  }
}

TEST_CASE("corrupt is reproducible bit-exactly under a fixed seed") {
  Structure s = simple_structure(6);
  NoiseSpec spec;
  spec.sigma = 0.1;
  RandomStream r1(99), r2(99);
  CorruptResult a = corrupt(s, spec, r1);
  CorruptResult b = corrupt(s, spec, r2);
  CHECK(a.noisy.positions == b.noisy.positions);
  CHECK(a.target == b.target);
}

TEST_CASE("denoising loss values") {
  SUBCASE("pred equals target") {
    CHECK(denoising_loss_value({1, 2, 3}, {1, 2, 3}) == 0.0);
  }
  SUBCASE("unit offset per coordinate gives 3") {
    std::vector<double> t = {0.5, -1, 2, 0, 0, 1};
    std::vector<double> p = t;
    for (double& v : p) v += 1.0;
    CHECK(denoising_loss_value(p, t) == doctest::Approx(3.0).epsilon(1e-15));
  }
  SUBCASE("tape version matches and batching averages per structure") {
    RandomStream rng(5);
    std::vector<double> pred(18), target(18);
    for (auto& v : pred) v = rng.gauss();
    for (auto& v : target) v = rng.gauss();
    // batch: structure A = atoms 0..1, structure B = atoms 2..5
    std::vector<int> graph_id = {0, 0, 1, 1, 1, 1};
    Tape tape;
    Tensor p = tape.constant({6, 3}, pred);
    Tensor t = tape.constant({6, 3}, target);
    Tensor loss = denoising_loss(tape, p, t, graph_id, 2);
    const double la = denoising_loss_value({pred.begin(), pred.begin() + 6},
                                           {target.begin(), target.begin() + 6});
    const double lb = denoising_loss_value({pred.begin() + 6, pred.end()},
                                           {target.begin() + 6, target.end()});
    CHECK(loss.scalar() == doctest::Approx(0.5 * (la + lb)).epsilon(1e-14));
  }
  SUBCASE("shape mismatch") {
    Tape tape;
    Tensor p = tape.constant({2, 3}, std::vector<double>(6, 0.0));
    Tensor t = tape.constant({3, 2}, std::vector<double>(6, 0.0));
    CHECK_THROWS_AS(denoising_loss(tape, p, t, {0, 0}, 1), ContractViolation);
  }
}

TEST_CASE("denoising loss is invariant under joint rotation and permutation") {
  RandomStream rng(7);
  std::vector<double> pred(12), target(12);
  for (auto& v : pred) v = rng.gauss();
  for (auto& v : target) v = rng.gauss();
  std::vector<int> gid = {0, 0, 0, 0};
  auto value = [&](const std::vector<double>& p, const std::vector<double>& t) {
    Tape tape;
    return denoising_loss(tape, tape.constant({4, 3}, p), tape.constant({4, 3}, t), gid, 1)
        .scalar();
  };
  const double base = value(pred, target);

  // rotation by angle about z applied to both
  const double th = 0.83;
  auto rot = [&](std::vector<double> v) {
    for (std::size_t i = 0; i < v.size(); i += 3) {
      const double x = v[i], y = v[i + 1];
      v[i] = std::cos(th) * x - std::sin(th) * y;
      v[i + 1] = std::sin(th) * x + std::cos(th) * y;
    }
    return v;
  };
  CHECK(value(rot(pred), rot(target)) == doctest::Approx(base).epsilon(1e-12));

  // permutation applied to both
  std::vector<int> perm = {2, 0, 3, 1};
  auto permute = [&](const std::vector<double>& v) {
    std::vector<double> out(v.size());
    for (int i = 0; i < 4; ++i)
      for (int c = 0; c < 3; ++c)
        out[static_cast<std::size_t>(3 * i + c)] =
            v[static_cast<std::size_t>(3 * perm[static_cast<std::size_t>(i)] + c)];
    return out;
  };
  CHECK(value(permute(pred), permute(target)) == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("atom-type masking") {
  RandomStream rng(11);
  std::vector<int> z = {1, 6, 7, 8, 9, 6, 6, 1};
  SUBCASE("prob 0 masks nothing") {
    MaskResult m = apply_type_mask(z, 0.0, rng);
    CHECK(m.embed_index == z);
    CHECK(m.masked_position.empty());
  }
  SUBCASE("prob 1 masks everything") {
    MaskResult m = apply_type_mask(z, 1.0, rng);
    CHECK(m.masked_position.size() == z.size());
    for (int idx : m.embed_index) CHECK(idx == 0);
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(m.masked_class[i] == z[i] - 1);
  }
  SUBCASE("fraction approximately honored") {
    int masked = 0, total = 0;
    for (int t = 0; t < 2000; ++t) {
      MaskResult m = apply_type_mask(z, 0.75, rng);
      masked += static_cast<int>(m.masked_position.size());
      total += static_cast<int>(z.size());
    }
    CHECK(static_cast<double>(masked) / total == doctest::Approx(0.75).epsilon(0.02));
  }
}

TEST_CASE("noisy_nodes_loss composes the three terms") {
  RandomStream rng(13);
  const int n = 5, k = 118;
  std::vector<double> vpred(3 * n), eps(3 * n), logits(static_cast<std::size_t>(n) * k);
  for (auto& v : vpred) v = rng.gauss();
  for (auto& v : eps) v = rng.gauss();
  for (auto& v : logits) v = 0.1 * rng.gauss();
  std::vector<int> gid(static_cast<std::size_t>(n), 0);
  std::vector<double> gtarget = {0.7};

  Tape tape;
  Tensor gp = tape.constant({1}, {0.2});
  Tensor vp = tape.constant({n, 3}, vpred);
  Tensor ep = tape.constant({n, 3}, eps);
  Tensor lg = tape.constant({n, k}, logits);
  MaskResult mask;
  mask.masked_position = {1, 3};
  mask.masked_class = {5, 0};

  LossWeights w;
  w.position_coeff = 1.0;
  w.target_coeff = 2.0;
  w.atom_type_coeff = 4.0;
  NoisyNodesTerms terms = noisy_nodes_loss(tape, gp, gtarget, vp, ep, gid, 1, lg, mask, w);
  CHECK(terms.total.scalar() ==
        doctest::Approx(1.0 * terms.position + 2.0 * terms.target + 4.0 * terms.atom_type)
            .epsilon(1e-12));
  CHECK(terms.target == doctest::Approx((0.2 - 0.7) * (0.2 - 0.7)).epsilon(1e-12));

  SUBCASE("supervised-only degenerates to the MSE") {
    LossWeights w2;
    w2.position_coeff = 0.0;
    w2.target_coeff = 1.0;
    NoisyNodesTerms t2 = noisy_nodes_loss(tape, gp, gtarget, vp, ep, gid, 1, lg, mask, w2);
    CHECK(t2.total.scalar() == doctest::Approx(t2.target).epsilon(1e-14));
  }
  SUBCASE("no masked positions means no type term") {
    MaskResult empty;
    NoisyNodesTerms t3 = noisy_nodes_loss(tape, gp, gtarget, vp, ep, gid, 1, lg, empty, w);
    CHECK(t3.atom_type == 0.0);
  }
  SUBCASE("all-zero weights rejected") {
    LossWeights bad;
    bad.position_coeff = 0.0;
    CHECK_THROWS_AS(noisy_nodes_loss(tape, gp, gtarget, vp, ep, gid, 1, lg, mask, bad),
                    ContractViolation);
  }
}

TEST_CASE("interpolate_corrupt identities") {
  Structure relaxed = simple_structure(6, 21);
  Structure initial = relaxed;
  RandomStream jit(22);
  for (auto& p : initial.positions) p += 0.4 * jit.gauss();

  SUBCASE("target + input equals relaxed identically") {
    RandomStream rng(1);
    InterpolateResult r = interpolate_corrupt(initial, relaxed, 0.2, rng);
    for (std::size_t k = 0; k < r.target.size(); ++k)
      CHECK(r.input.positions[k] + r.target[k] == relaxed.positions[k]);
  }
  SUBCASE("initial == relaxed gives target = -sigma*eps") {
    RandomStream rng(2);
    InterpolateResult r = interpolate_corrupt(relaxed, relaxed, 0.3, rng);
    for (std::size_t k = 0; k < r.target.size(); ++k) {
      CHECK(r.target[k] == relaxed.positions[k] - r.input.positions[k]);
      // displacement is pure noise
      CHECK(std::abs(r.target[k]) < 0.3 * 6.0);
    }
  }
  SUBCASE("sigma 0: input on the segment, target points to relaxed") {
    RandomStream rng(3);
    InterpolateResult r = interpolate_corrupt(initial, relaxed, 0.0, rng);
    for (std::size_t k = 0; k < r.target.size(); ++k) {
      const double lo = std::min(initial.positions[k], relaxed.positions[k]) - 1e-12;
      const double hi = std::max(initial.positions[k], relaxed.positions[k]) + 1e-12;
      CHECK(r.input.positions[k] >= lo);
      CHECK(r.input.positions[k] <= hi);
    }
  }
  SUBCASE("atom mismatch rejected") {
    Structure other = simple_structure(5, 23);
    RandomStream rng(4);
    CHECK_THROWS_AS(interpolate_corrupt(other, relaxed, 0.1, rng), ContractViolation);
  }
}
