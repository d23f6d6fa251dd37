#include "denoise/score.hpp"

#include <algorithm>
#include <cmath>

#include "denoise/tensor.hpp"

namespace denoise {

void MixtureModel::validate() const {
  if (centers.empty()) throw ContractViolation("MixtureModel: no centers");
  if (sigma <= 0) throw ContractViolation("MixtureModel: sigma must be > 0");
  if (n_atoms < 1) throw ContractViolation("MixtureModel: n_atoms must be >= 1");
  for (const auto& c : centers) {
    if (static_cast<int>(c.size()) != dim())
      throw ContractViolation("MixtureModel: center dimension mismatch");
    if (!is_mean_centered(c, 1e-9))
      throw ContractViolation("MixtureModel: center is not mean-centered");
  }
}

std::vector<double> project_mean_center(const std::vector<double>& x) {
  if (x.size() % 3 != 0) throw ContractViolation("project_mean_center: size not divisible by 3");
  const std::size_t n = x.size() / 3;
  if (n == 0) throw ContractViolation("project_mean_center: empty vector");
  std::vector<double> out(x);
  for (int c = 0; c < 3; ++c) {
    double m = 0;
    for (std::size_t i = 0; i < n; ++i) m += x[3 * i + static_cast<std::size_t>(c)];
    m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out[3 * i + static_cast<std::size_t>(c)] -= m;
  }
  return out;
}

bool is_mean_centered(const std::vector<double>& x, double tol) {
  const std::size_t n = x.size() / 3;
  for (int c = 0; c < 3; ++c) {
    double m = 0;
    for (std::size_t i = 0; i < n; ++i) m += x[3 * i + static_cast<std::size_t>(c)];
    if (std::abs(m / static_cast<double>(n)) > tol) return false;
  }
  return true;
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

double log_mixture_density(const MixtureModel& m, const std::vector<double>& x) {
  m.validate();
  if (static_cast<int>(x.size()) != m.dim())
    throw ContractViolation("log_mixture_density: dimension mismatch");
  const double inv2s2 = 1.0 / (2.0 * m.sigma * m.sigma);
  std::vector<double> logs(m.centers.size());
  for (std::size_t i = 0; i < m.centers.size(); ++i) logs[i] = -sq_dist(x, m.centers[i]) * inv2s2;
  const double mx = *std::max_element(logs.begin(), logs.end());
  double s = 0;
  for (double l : logs) s += std::exp(l - mx);
  const double log_norm =
      -0.5 * m.subspace_dim() * std::log(2.0 * M_PI * m.sigma * m.sigma);
  return mx + std::log(s) - std::log(static_cast<double>(m.centers.size())) + log_norm;
}

std::vector<double> mixture_weights(const MixtureModel& m, const std::vector<double>& x) {
  const double inv2s2 = 1.0 / (2.0 * m.sigma * m.sigma);
  std::vector<double> logs(m.centers.size());
  for (std::size_t i = 0; i < m.centers.size(); ++i) logs[i] = -sq_dist(x, m.centers[i]) * inv2s2;
  const double mx = *std::max_element(logs.begin(), logs.end());
  double s = 0;
  for (double& l : logs) {
    l = std::exp(l - mx);
    s += l;
  }
  for (double& l : logs) l /= s;
  return logs;
}

std::vector<double> mixture_score(const MixtureModel& m, const std::vector<double>& x) {
  m.validate();
  if (static_cast<int>(x.size()) != m.dim())
    throw ContractViolation("mixture_score: dimension mismatch");
  if (!is_mean_centered(x))
    throw ContractViolation("mixture_score: input is not mean-centered");
  const std::vector<double> w = mixture_weights(m, x);
  std::vector<double> score(x.size(), 0.0);
  const double inv_s2 = 1.0 / (m.sigma * m.sigma);
  for (std::size_t i = 0; i < m.centers.size(); ++i)
    for (std::size_t k = 0; k < x.size(); ++k)
      score[k] += w[i] * (m.centers[i][k] - x[k]) * inv_s2;
  return score;
}

int sample_mixture(const MixtureModel& m, RandomStream& rng, std::vector<double>* out) {
  const int idx = static_cast<int>(rng.bounded(m.centers.size()));
  std::vector<double> eps(static_cast<std::size_t>(m.dim()));
  for (double& v : eps) v = rng.gauss();
  eps = project_mean_center(eps);
  out->resize(eps.size());
  for (std::size_t k = 0; k < eps.size(); ++k)
    (*out)[k] = m.centers[static_cast<std::size_t>(idx)][k] + m.sigma * eps[k];
  return idx;
}

MixtureModel random_mixture(int n_centers, int n_atoms, double sigma, std::uint64_t seed,
                            double center_scale) {
  if (n_centers < 1 || n_atoms < 1)
    throw ContractViolation("random_mixture: counts must be >= 1");
  if (center_scale < 0) center_scale = 1.5 * sigma;
  RandomStream rng(seed);
  MixtureModel m;
  m.sigma = sigma;
  m.n_atoms = n_atoms;
  for (int i = 0; i < n_centers; ++i) {
    std::vector<double> c(3 * static_cast<std::size_t>(n_atoms));
    for (double& v : c) v = center_scale * rng.gauss();
    m.centers.push_back(project_mean_center(c));
  }
  m.validate();
  return m;
}

GradientGapResult j1_j2_gradient_gap(const MixtureModel& m, std::int64_t n_samples,
                                     std::uint64_t seed, int hidden) {
  m.validate();
  if (n_samples < 10) throw ContractViolation("j1_j2_gradient_gap: need at least 10 samples");
  const int d = m.dim();

  // small two-layer network on flattened coordinates
  RandomStream init(derive_seed(seed, 0x90de1));
  std::vector<double> w1(static_cast<std::size_t>(d) * hidden), b1(static_cast<std::size_t>(hidden));
  std::vector<double> w2(static_cast<std::size_t>(hidden) * d), b2(static_cast<std::size_t>(d));
  const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (double& v : w1) v = s1 * init.gauss();
  for (double& v : b1) v = 0.1 * init.gauss();
  for (double& v : w2) v = s2 * init.gauss();
  for (double& v : b2) v = 0.1 * init.gauss();

  const int n_chunks = 10;
  const std::int64_t chunk = n_samples / n_chunks;
  const std::int64_t total = chunk * n_chunks;

  RandomStream rng(derive_seed(seed, 0x5a3b));
  std::vector<std::vector<double>> diff_per_chunk;   // per chunk: dJ1 - dJ2 (per parameter)
  std::vector<double> g1_acc, g2_acc;

  for (int c = 0; c < n_chunks; ++c) {
    // sample a chunk of (x, x~) pairs with common random numbers
    std::vector<double> xs(static_cast<std::size_t>(chunk) * d);
    std::vector<double> t_score(xs.size());  // J1 targets
    std::vector<double> t_deno(xs.size());   // J2 targets
    for (std::int64_t i = 0; i < chunk; ++i) {
      std::vector<double> xt;
      const int idx = sample_mixture(m, rng, &xt);
      const std::vector<double> sc = mixture_score(m, xt);
      for (int k = 0; k < d; ++k) {
        xs[static_cast<std::size_t>(i) * d + k] = xt[static_cast<std::size_t>(k)];
        t_score[static_cast<std::size_t>(i) * d + k] = sc[static_cast<std::size_t>(k)];
        t_deno[static_cast<std::size_t>(i) * d + k] =
            (m.centers[static_cast<std::size_t>(idx)][static_cast<std::size_t>(k)] -
             xt[static_cast<std::size_t>(k)]) /
            (m.sigma * m.sigma);
      }
    }

    Tape tape;
    Tensor W1 = tape.input({d, hidden}, w1);
    Tensor B1 = tape.input({hidden}, b1);
    Tensor W2 = tape.input({hidden, d}, w2);
    Tensor B2 = tape.input({d}, b2);
    Tensor X = tape.constant({static_cast<int>(chunk), d}, xs);
    Tensor H = tape.shifted_softplus(tape.add_bias(tape.matmul(X, W1), B1));
    Tensor F = tape.add_bias(tape.matmul(H, W2), B2);

    Tensor T1 = tape.constant({static_cast<int>(chunk), d}, t_score);
    Tensor T2 = tape.constant({static_cast<int>(chunk), d}, t_deno);
    // || f - t ||^2 summed over coordinates, averaged over samples
    Tensor J1 = tape.mean(tape.row_sum(tape.square(tape.sub(F, T1))));
    Tensor J2 = tape.mean(tape.row_sum(tape.square(tape.sub(F, T2))));

    const std::vector<Tensor> leaves = {W1, B1, W2, B2};
    auto g1 = tape.grad(J1, leaves);
    auto g2 = tape.grad(J2, leaves);

    std::vector<double> flat_diff;
    std::vector<double> flat1, flat2;
    for (std::size_t t = 0; t < leaves.size(); ++t)
      for (std::size_t i = 0; i < g1[t].size(); ++i) {
        flat_diff.push_back(g1[t][i] - g2[t][i]);
        flat1.push_back(g1[t][i]);
        flat2.push_back(g2[t][i]);
      }
    if (g1_acc.empty()) {
      g1_acc.assign(flat1.size(), 0.0);
      g2_acc.assign(flat2.size(), 0.0);
    }
    for (std::size_t i = 0; i < flat1.size(); ++i) {
      g1_acc[i] += flat1[i] / n_chunks;
      g2_acc[i] += flat2[i] / n_chunks;
    }
    diff_per_chunk.push_back(std::move(flat_diff));
  }

  const std::size_t n_params = g2_acc.size();
  GradientGapResult out;
  out.n_params = static_cast<std::int64_t>(n_params);
  out.n_samples = total;

  double norm2 = 0;
  for (double v : g2_acc) norm2 += v * v;
  out.grad_norm_j2 = std::sqrt(norm2);
  const double denom = out.grad_norm_j2 / std::sqrt(static_cast<double>(n_params)) + 1e-12;

  // overall diff per parameter plus its batch-means standard error
  std::size_t argmax = 0;
  double max_abs = 0;
  std::vector<double> mean_diff(n_params, 0.0);
  for (const auto& dchunk : diff_per_chunk)
    for (std::size_t i = 0; i < n_params; ++i) mean_diff[i] += dchunk[i] / n_chunks;
  for (std::size_t i = 0; i < n_params; ++i)
    if (std::abs(mean_diff[i]) > max_abs) {
      max_abs = std::abs(mean_diff[i]);
      argmax = i;
    }
  double var = 0;
  for (const auto& dchunk : diff_per_chunk) {
    const double dev = dchunk[argmax] - mean_diff[argmax];
    var += dev * dev;
  }
  var /= (n_chunks - 1);
  out.gap = max_abs / denom;
  out.gap_se = std::sqrt(var / n_chunks) / denom;
  return out;
}

}  // namespace denoise
